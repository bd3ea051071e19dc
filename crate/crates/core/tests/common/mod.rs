#![allow(dead_code)]

use dpoe::config::ModelConfig;
use dpoe::data::InjectionKind;
use dpoe::eval::{CorpusSource, ExperimentSpec};

/// The synthetic desk corpus: two 20-dimensional views over three clusters.
pub const VIEWS: usize = 2;
pub const CLUSTERS: usize = 3;
pub const DIM: usize = 20;

pub fn desk_spec(id: &str, anomaly: InjectionKind, n: usize, seeds: &[u64]) -> ExperimentSpec {
    ExperimentSpec {
        id: id.into(),
        source: CorpusSource::Synthetic { views: VIEWS, clusters: CLUSTERS, n, dim: DIM },
        anomaly,
        ratio: None,
        seeds: seeds.to_vec(),
        model: ModelConfig::desk(Vec::new(), CLUSTERS),
        variants: Vec::new(),
        sweep: None,
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
