//! Multi-view datasets: the in-memory container, normalization, file I/O,
//! anomaly injection and a synthetic cluster generator.
//!
//! Every view is stored as an `N × D` matrix. Image views are flattened
//! channel-major (`C × H × W`), the layout the convolution kernels expect.

mod inject;
mod io;
mod synthetic;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

pub use inject::{inject, inject_mix, inject_mix_with_ratio, MIX_TYPE_RATIO, inject_type1, inject_type2, inject_type3, InjectionKind, InjectionReport, SwapRecord, TypeCounts};
pub use io::{load_dataset, write_dataset, DatasetManifest, ManifestView};
pub use synthetic::make_synthetic;

use crate::config::{ViewKind, ViewSpec};
use crate::error::{DpoeError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AnomalyType {
    #[default]
    #[serde(rename = "none")]
    None,
    I,
    II,
    III,
}

impl AnomalyType {
    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyType::None => "none",
            AnomalyType::I => "I",
            AnomalyType::II => "II",
            AnomalyType::III => "III",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "none" | "" => Ok(AnomalyType::None),
            "I" | "1" => Ok(AnomalyType::I),
            "II" | "2" => Ok(AnomalyType::II),
            "III" | "3" => Ok(AnomalyType::III),
            other => Err(DpoeError::Data(format!("unknown anomaly type '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewDataset<T> {
    pub specs: Vec<ViewSpec>,
    /// One `N × input_dim` matrix per view.
    pub views: Vec<Array2<T>>,
    /// `1` marks an anomaly.
    pub labels: Option<Vec<u8>>,
    pub anomaly_type: Option<Vec<AnomalyType>>,
    pub class_ids: Option<Vec<usize>>,
}

impl<T: Scalar> MultiViewDataset<T> {
    pub fn new(specs: Vec<ViewSpec>, views: Vec<Array2<T>>) -> Result<Self> {
        let d = Self {
            specs,
            views,
            labels: None,
            anomaly_type: None,
            class_ids: None,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.specs.len() != self.views.len() {
            return Err(DpoeError::Data("one matrix per view spec required".into()));
        }
        let n = self.len();
        for (spec, x) in self.specs.iter().zip(&self.views) {
            if x.nrows() != n {
                return Err(DpoeError::Data("view length mismatch".into()));
            }
            if x.ncols() != spec.input_dim() {
                return Err(DpoeError::Data(format!(
                    "view '{}' has width {}, spec says {}",
                    spec.name,
                    x.ncols(),
                    spec.input_dim()
                )));
            }
        }
        let check = |what: &str, len: Option<usize>| match len {
            Some(l) if l != n => Err(DpoeError::Data(format!("{what} has {l} entries for {n} instances"))),
            _ => Ok(()),
        };
        check("labels", self.labels.as_ref().map(Vec::len))?;
        check("anomaly_type", self.anomaly_type.as_ref().map(Vec::len))?;
        check("class_ids", self.class_ids.as_ref().map(Vec::len))?;
        Ok(())
    }

    /// Number of instances.
    pub fn len(&self) -> usize {
        self.views.first().map_or(0, |v| v.nrows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn view_views(&self) -> Vec<ArrayView2<'_, T>> {
        self.views.iter().map(|v| v.view()).collect()
    }

    /// Rows `indices` of every view.
    pub fn batch(&self, indices: &[usize]) -> Vec<Array2<T>> {
        self.views.iter().map(|v| v.select(Axis(0), indices)).collect()
    }

    /// Subset with all annotations carried along.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let pick = |v: &Option<Vec<_>>| v.as_ref().map(|v: &Vec<_>| indices.iter().map(|&i| v[i]).collect());
        Self {
            specs: self.specs.clone(),
            views: self.batch(indices),
            labels: self.labels.as_ref().map(|v| indices.iter().map(|&i| v[i]).collect()),
            anomaly_type: pick(&self.anomaly_type),
            class_ids: self.class_ids.as_ref().map(|v| indices.iter().map(|&i| v[i]).collect()),
        }
    }

    /// Labels, or all-normal when the corpus carries none.
    pub fn labels_or_normal(&self) -> Vec<u8> {
        self.labels.clone().unwrap_or_else(|| vec![0; self.len()])
    }

    /// Standardize vector views per feature and min-max scale image views
    /// to `[0, 1]`.
    pub fn normalize(&mut self) {
        for (spec, x) in self.specs.iter().zip(self.views.iter_mut()) {
            match spec.kind {
                ViewKind::Vector => standardize_columns(x),
                ViewKind::Image => min_max_scale(x),
            }
        }
    }
}

/// Zero mean, unit (population) standard deviation per column; constant
/// columns are only centered.
pub fn standardize_columns<T: Scalar>(x: &mut Array2<T>) {
    let n = x.nrows();
    if n == 0 {
        return;
    }
    for mut col in x.columns_mut() {
        let mean = col.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        let scale = if std > 1e-12 { 1.0 / std } else { 1.0 };
        col.mapv_inplace(|v| T::lit((v.as_f64() - mean) * scale));
    }
}

/// Scale the whole matrix linearly onto `[0, 1]`.
pub fn min_max_scale<T: Scalar>(x: &mut Array2<T>) {
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.as_f64()), hi.max(v.as_f64())));
    if !lo.is_finite() {
        return;
    }
    let span = hi - lo;
    x.mapv_inplace(|v| {
        if span > 0.0 {
            T::lit((v.as_f64() - lo) / span)
        } else {
            T::zero()
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardized_columns_have_unit_moments() {
        let mut x = Array2::from_shape_fn((50, 3), |(i, j)| (i * (j + 1)) as f64 + 3.0 * j as f64);
        x.column_mut(2).fill(4.0);
        standardize_columns(&mut x);
        for j in 0..2 {
            let col = x.column(j);
            let mean = col.sum() / 50.0;
            let var = col.mapv(|v| (v - mean).powi(2)).sum() / 50.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
        assert!(x.column(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dataset_checks_lengths() {
        let specs = vec![ViewSpec::vector("a", 2), ViewSpec::vector("b", 1)];
        let err = MultiViewDataset::<f32>::new(specs.clone(), vec![Array2::zeros((100, 2)), Array2::zeros((99, 1))])
            .unwrap_err();
        assert!(err.to_string().contains("view length mismatch"));
        let mut d = MultiViewDataset::<f32>::new(specs, vec![Array2::zeros((4, 2)), Array2::zeros((4, 1))]).unwrap();
        d.labels = Some(vec![0, 1, 0]);
        assert!(d.validate().is_err());
        d.labels = Some(vec![0, 1, 0, 1]);
        let sub = d.subset(&[1, 3]);
        assert_eq!(sub.len(), 2);
        assert_eq!(sub.labels, Some(vec![1, 1]));
    }

    #[test]
    fn anomaly_type_names_roundtrip() {
        for t in [AnomalyType::None, AnomalyType::I, AnomalyType::II, AnomalyType::III] {
            assert_eq!(AnomalyType::parse(t.as_str()).unwrap(), t);
        }
        assert!(AnomalyType::parse("IV").is_err());
    }
}
