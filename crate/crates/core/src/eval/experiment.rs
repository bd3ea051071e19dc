use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{auc_for_type, compute_auc};
use crate::config::{Ablation, ModelConfig};
use crate::data::{inject, load_dataset, make_synthetic, AnomalyType, InjectionKind, InjectionReport, MultiViewDataset};
use crate::detect::{score_batch, ScoredInstance};
use crate::error::{DpoeError, Result};
use crate::train::fit;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CorpusSource {
    /// Gaussian clusters; the cell seed also seeds the generator.
    Synthetic { views: usize, clusters: usize, n: usize, dim: usize },
    /// A dataset directory with class ids.
    Directory { path: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Lambda,
    Gamma,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Gamma => "gamma",
        }
    }

    fn apply(self, cfg: &mut ModelConfig, value: f64) {
        match self {
            SweepParam::Lambda => cfg.lambda = value,
            SweepParam::Gamma => cfg.gamma = value,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

/// One experiment: a corpus, an injection, a model configuration and the
/// seeds, ablation variants and sweep values to cross.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub id: String,
    pub source: CorpusSource,
    pub anomaly: InjectionKind,
    /// Anomalous share; per type for a mixture. Defaults to 0.05 for a
    /// mixture and 0.1 otherwise.
    #[serde(default)]
    pub ratio: Option<f64>,
    pub seeds: Vec<u64>,
    /// Views are taken from the corpus; `k` from a synthetic source.
    pub model: ModelConfig,
    /// Components to switch off, one variant per entry; `"full"` is the
    /// unablated model. Empty means `["full"]`.
    #[serde(default)]
    pub variants: Vec<String>,
    #[serde(default)]
    pub sweep: Option<Sweep>,
}

impl ExperimentSpec {
    /// Load a TOML (or `.json`) spec file holding one `[[experiment]]` table
    /// per spec, or a single spec at the top level.
    pub fn from_path(path: &std::path::Path) -> Result<Vec<Self>> {
        #[derive(Deserialize)]
        struct Many {
            experiment: Vec<ExperimentSpec>,
        }
        let text = std::fs::read_to_string(path)?;
        let json = path.extension().is_some_and(|e| e == "json");
        let parse_err = |e: String| DpoeError::Config(format!("{}: {e}", path.display()));
        let specs = if json {
            serde_json::from_str::<Many>(&text)
                .map(|m| m.experiment)
                .or_else(|_| serde_json::from_str::<Self>(&text).map(|s| vec![s]))
                .map_err(|e| parse_err(e.to_string()))?
        } else {
            match toml::from_str::<Many>(&text) {
                Ok(m) => m.experiment,
                Err(_) => vec![toml::from_str::<Self>(&text).map_err(|e| parse_err(e.to_string()))?],
            }
        };
        for s in &specs {
            s.validate()?;
        }
        Ok(specs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(DpoeError::Config(format!("experiment '{}' lists no seeds", self.id)));
        }
        let ratio = self.ratio();
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(DpoeError::Config(format!("ratio must lie in (0, 1), got {ratio}")));
        }
        for v in &self.variants {
            variant_ablation(self.model.ablation, v)?;
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(DpoeError::Config("sweep lists no values".into()));
            }
        }
        Ok(())
    }

    pub fn ratio(&self) -> f64 {
        self.ratio.unwrap_or(match self.anomaly {
            InjectionKind::Mix => crate::data::MIX_TYPE_RATIO,
            _ => 0.1,
        })
    }

    pub fn variant_names(&self) -> Vec<String> {
        if self.variants.is_empty() {
            vec!["full".into()]
        } else {
            self.variants.clone()
        }
    }

    fn sweep_points(&self) -> Vec<Option<(SweepParam, f64)>> {
        match &self.sweep {
            None => vec![None],
            Some(s) => s.values.iter().map(|&v| Some((s.param, v))).collect(),
        }
    }
}

/// `"full"`, or `+`-separated component names to disable (`"Cc"`, `"tc+poe"`).
fn variant_ablation(base: Ablation, variant: &str) -> Result<Ablation> {
    let mut ablation = base;
    if variant != "full" {
        for part in variant.split('+') {
            ablation.disable(part.trim())?;
        }
    }
    Ok(ablation)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub spec_id: String,
    pub variant: String,
    pub param: Option<String>,
    pub param_value: Option<f64>,
    pub seed: u64,
    pub auc: f64,
    pub auc_type_i: Option<f64>,
    pub auc_type_ii: Option<f64>,
    pub auc_type_iii: Option<f64>,
    pub wall_time: f64,
}

/// Everything one (spec, variant, sweep point, seed) cell produced.
#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub row: ResultRow,
    pub scores: Vec<ScoredInstance>,
    pub labels: Vec<u8>,
    pub anomaly_type: Vec<AnomalyType>,
    pub report: InjectionReport,
}

impl CellOutcome {
    /// Share of `which` anomalies whose experts disagree on the most likely
    /// cluster.
    pub fn expert_disagreement(&self, which: AnomalyType) -> Option<f64> {
        let picked: Vec<&ScoredInstance> = self
            .scores
            .iter()
            .zip(&self.anomaly_type)
            .filter(|(_, &t)| t == which)
            .map(|(s, _)| s)
            .collect();
        if picked.is_empty() {
            return None;
        }
        let argmax = |p: &Vec<f64>| {
            p.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(k, _)| k)
                .unwrap_or(0)
        };
        let split = picked
            .iter()
            .filter(|s| {
                let first = argmax(&s.per_expert[0]);
                s.per_expert.iter().any(|p| argmax(p) != first)
            })
            .count();
        Some(split as f64 / picked.len() as f64)
    }
}

/// Build the normalized, injected corpus for one seed.
pub fn prepare_corpus(spec: &ExperimentSpec, seed: u64) -> Result<(MultiViewDataset<f32>, InjectionReport)> {
    let mut clean = match &spec.source {
        CorpusSource::Synthetic {
            views,
            clusters,
            n,
            dim,
        } => make_synthetic::<f32>(*views, *clusters, *n, *dim, seed),
        CorpusSource::Directory { path } => load_dataset::<f32>(path)?,
    };
    clean.normalize();
    inject(&clean, spec.anomaly, spec.ratio(), seed)
}

fn cell_config(spec: &ExperimentSpec, data: &MultiViewDataset<f32>, variant: &str, point: Option<(SweepParam, f64)>, seed: u64) -> Result<ModelConfig> {
    let mut cfg = spec.model.clone();
    cfg.views = data.specs.clone();
    if let CorpusSource::Synthetic { clusters, .. } = spec.source {
        cfg.k = clusters;
    }
    cfg.seed = seed;
    cfg.ablation = variant_ablation(spec.model.ablation, variant)?;
    if let Some((param, value)) = point {
        param.apply(&mut cfg, value);
    }
    Ok(cfg)
}

/// Train and score one cell.
pub fn run_cell(spec: &ExperimentSpec, variant: &str, point: Option<(SweepParam, f64)>, seed: u64) -> Result<CellOutcome> {
    let started = Instant::now();
    let (data, report) = prepare_corpus(spec, seed)?;
    let cfg = cell_config(spec, &data, variant, point, seed)?;
    let (state, _) = fit(&cfg, &data)?;
    let scores = score_batch(&state.model, &data)?;
    let labels = data.labels_or_normal();
    let anomaly_type = data.anomaly_type.clone().unwrap_or_else(|| vec![AnomalyType::None; data.len()]);
    let raw: Vec<f64> = scores.iter().map(|s| s.score).collect();
    let auc = compute_auc(&raw, &labels)?;
    let per_type = |t: AnomalyType| {
        if spec.anomaly == InjectionKind::Mix && anomaly_type.contains(&t) {
            auc_for_type(&raw, &anomaly_type, t).ok()
        } else {
            None
        }
    };
    let row = ResultRow {
        spec_id: spec.id.clone(),
        variant: variant.to_string(),
        param: point.map(|(p, _)| p.name().to_string()),
        param_value: point.map(|(_, v)| v),
        seed,
        auc,
        auc_type_i: per_type(AnomalyType::I),
        auc_type_ii: per_type(AnomalyType::II),
        auc_type_iii: per_type(AnomalyType::III),
        wall_time: started.elapsed().as_secs_f64(),
    };
    Ok(CellOutcome {
        row,
        scores,
        labels,
        anomaly_type,
        report,
    })
}

/// Run every cell of `spec`, handing each finished row to `sink` before
/// starting the next, so a failure keeps everything already produced.
pub fn run_experiment_with<F>(spec: &ExperimentSpec, mut sink: F) -> Result<()>
where
    F: FnMut(&ResultRow) -> Result<()>,
{
    spec.validate()?;
    for variant in spec.variant_names() {
        for point in spec.sweep_points() {
            for &seed in &spec.seeds {
                let outcome = run_cell(spec, &variant, point, seed)?;
                sink(&outcome.row)?;
            }
        }
    }
    Ok(())
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    run_experiment_with(spec, |r| {
        rows.push(r.clone());
        Ok(())
    })?;
    Ok(rows)
}
