//! Gaussian-cluster corpora with consistent cluster membership across views.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::MultiViewDataset;
use crate::config::ViewSpec;
use crate::scalar::Scalar;

/// Minimum distance between cluster means, in units of the within-cluster
/// standard deviation.
pub const MIN_SEPARATION: f64 = 6.0;

/// Spread of the cluster means around the origin.
const MEAN_SCALE: f64 = 2.0;

/// `m` vector views of width `dim`; instance `i` belongs to one of `k`
/// balanced classes and every view draws it from that class's unit-variance
/// Gaussian. Values are raw (not standardized).
pub fn make_synthetic<T: Scalar>(m: usize, k: usize, n: usize, dim: usize, seed: u64) -> MultiViewDataset<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<usize> = (0..n).map(|i| i % k.max(1)).collect();
    classes.shuffle(&mut rng);
    let spread = Normal::new(0.0, MEAN_SCALE).expect("positive scale");
    let mut specs = Vec::with_capacity(m);
    let mut views = Vec::with_capacity(m);
    for v in 0..m {
        let means = loop {
            let means = Array2::<f64>::from_shape_simple_fn((k, dim), || spread.sample(&mut rng));
            if min_distance(&means) >= MIN_SEPARATION {
                break means;
            }
        };
        let x = Array2::from_shape_fn((n, dim), |(i, j)| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            T::lit(means[[classes[i], j]] + noise)
        });
        specs.push(ViewSpec::vector(format!("v{}", v + 1), dim));
        views.push(x);
    }
    let mut d = MultiViewDataset::new(specs, views).expect("consistent shapes");
    d.class_ids = Some(classes);
    d
}

fn min_distance(means: &Array2<f64>) -> f64 {
    let mut best = f64::INFINITY;
    for a in 0..means.nrows() {
        for b in a + 1..means.nrows() {
            let d = (&means.row(a) - &means.row(b)).mapv(|x| x * x).sum().sqrt();
            best = best.min(d);
        }
    }
    best
}
