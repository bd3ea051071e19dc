//! Dataset directories: `manifest.json` plus one payload per view.
//!
//! Vector views are headerless CSV, one row per instance. Image views are raw
//! little-endian `f32` in `N × H × W × C` order.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{resize, FilterType};
use image::{ImageBuffer, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{min_max_scale, standardize_columns, AnomalyType, MultiViewDataset};
use crate::config::{ViewKind, ViewSpec, IMAGE_SIDE};
use crate::error::{DpoeError, Result};
use crate::scalar::Scalar;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABELS_FILE: &str = "labels.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestView {
    pub name: String,
    pub kind: ViewKind,
    pub shape: Vec<usize>,
    /// Payload path relative to the manifest.
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n: usize,
    pub views: Vec<ManifestView>,
    /// Headerless CSV with one integer class id per line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_ids: Option<String>,
    /// CSV with columns `instance_id,label,anomaly_type`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
    /// Payloads are already rescaled and normalized.
    #[serde(default)]
    pub normalized: bool,
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

fn missing(path: &Path, e: std::io::Error) -> DpoeError {
    DpoeError::Data(format!("cannot read {}: {e}", path.display()))
}

/// Load a dataset from a directory (or its manifest). Images are rescaled
/// to 32×32 and scaled to `[0, 1]`, vectors standardized per feature, unless
/// the manifest says the payloads are already normalized.
pub fn load_dataset<T: Scalar>(path: &Path) -> Result<MultiViewDataset<T>> {
    let manifest_file = manifest_path(path);
    let text = fs::read_to_string(&manifest_file).map_err(|e| missing(&manifest_file, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let root = manifest_file.parent().unwrap_or(Path::new("."));
    let n = manifest.n;

    let mut specs = Vec::new();
    let mut views = Vec::new();
    for mv in &manifest.views {
        let file = root.join(&mv.file);
        let (spec, x) = match mv.kind {
            ViewKind::Vector => {
                let [dim] = mv.shape[..] else {
                    return Err(DpoeError::Data(format!("vector view '{}' needs a 1-entry shape", mv.name)));
                };
                let mut x = read_vector_csv::<T>(&file, dim)?;
                if !manifest.normalized {
                    standardize_columns(&mut x);
                }
                (ViewSpec::vector(&mv.name, dim), x)
            }
            ViewKind::Image => {
                let [h, w, c] = mv.shape[..] else {
                    return Err(DpoeError::Data(format!("image view '{}' needs an H×W×C shape", mv.name)));
                };
                if h == 0 || w == 0 || c == 0 {
                    return Err(DpoeError::Data(format!("image view '{}' has an empty dimension", mv.name)));
                }
                let mut x = read_image_payload::<T>(&file, h, w, c)?;
                if !manifest.normalized {
                    min_max_scale(&mut x);
                }
                (ViewSpec::image(&mv.name, IMAGE_SIDE, IMAGE_SIDE, c), x)
            }
        };
        if x.nrows() != n {
            return Err(DpoeError::Data(format!(
                "view length mismatch: '{}' has {} instances, manifest says {n}",
                mv.name,
                x.nrows()
            )));
        }
        specs.push(spec);
        views.push(x);
    }
    let mut dataset = MultiViewDataset::new(specs, views)?;
    if let Some(file) = &manifest.class_ids {
        dataset.class_ids = Some(read_class_ids(&root.join(file))?);
    }
    if let Some(file) = &manifest.labels {
        let (labels, types) = read_labels(&root.join(file), n)?;
        dataset.labels = Some(labels);
        dataset.anomaly_type = Some(types);
    }
    dataset.validate()?;
    Ok(dataset)
}

fn read_vector_csv<T: Scalar>(file: &Path, dim: usize) -> Result<Array2<T>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(file)
        .map_err(|e| DpoeError::Data(format!("cannot read {}: {e}", file.display())))?;
    let mut values = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record?;
        if record.len() != dim {
            return Err(DpoeError::Data(format!(
                "{}: row {rows} has {} values, expected {dim}",
                file.display(),
                record.len()
            )));
        }
        for field in record.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| DpoeError::Data(format!("{}: non-numeric payload '{field}'", file.display())))?;
            values.push(T::lit(v));
        }
        rows += 1;
    }
    Ok(Array2::from_shape_vec((rows, dim), values).expect("rows × dim values"))
}

/// Read `N × H × W × C` little-endian `f32`, rescale to 32×32 per channel
/// (bilinear), and flatten each instance channel-major.
fn read_image_payload<T: Scalar>(file: &Path, h: usize, w: usize, c: usize) -> Result<Array2<T>> {
    let bytes = fs::read(file).map_err(|e| missing(file, e))?;
    let per = h * w * c * 4;
    if bytes.len() % per != 0 {
        return Err(DpoeError::Data(format!(
            "{}: {} bytes is not a whole number of {h}×{w}×{c} f32 images",
            file.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / per;
    let side = IMAGE_SIDE;
    let mut out = Array2::<T>::zeros((n, c * side * side));
    for (i, chunk) in bytes.chunks_exact(per).enumerate() {
        let pixels: Vec<f32> = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(DpoeError::Data(format!("{}: non-finite pixel in image {i}", file.display())));
        }
        let mut row = out.row_mut(i);
        for ch in 0..c {
            let plane: Vec<f32> = (0..h * w).map(|p| pixels[p * c + ch]).collect();
            let plane: Vec<f32> = if (h, w) == (side, side) {
                plane
            } else {
                let img = ImageBuffer::<Luma<f32>, _>::from_raw(w as u32, h as u32, plane).expect("plane size");
                resize(&img, side as u32, side as u32, FilterType::Triangle).into_raw()
            };
            for (p, v) in plane.into_iter().enumerate() {
                row[ch * side * side + p] = T::lit(v as f64);
            }
        }
    }
    Ok(out)
}

fn read_class_ids(file: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(file).map_err(|e| missing(file, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse()
                .map_err(|_| DpoeError::Data(format!("{}: bad class id '{l}'", file.display())))
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    instance_id: usize,
    label: u8,
    anomaly_type: String,
}

fn read_labels(file: &Path, n: usize) -> Result<(Vec<u8>, Vec<AnomalyType>)> {
    let mut reader = csv::Reader::from_path(file).map_err(|e| DpoeError::Data(format!("{}: {e}", file.display())))?;
    let mut labels = vec![0; n];
    let mut types = vec![AnomalyType::None; n];
    for row in reader.deserialize() {
        let row: LabelRow = row?;
        if row.instance_id >= n {
            return Err(DpoeError::Data(format!("label for unknown instance {}", row.instance_id)));
        }
        labels[row.instance_id] = row.label;
        types[row.instance_id] = AnomalyType::parse(&row.anomaly_type)?;
    }
    Ok((labels, types))
}

/// `labels.csv` with columns `instance_id,label,anomaly_type`.
pub fn write_labels<T: Scalar>(d: &MultiViewDataset<T>, file: &Path) -> Result<()> {
    let labels = d.labels_or_normal();
    let mut w = csv::Writer::from_path(file)?;
    for (i, &label) in labels.iter().enumerate() {
        let t = d.anomaly_type.as_ref().map_or(AnomalyType::None, |t| t[i]);
        w.serialize(LabelRow {
            instance_id: i,
            label,
            anomaly_type: t.as_str().to_string(),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Write `d` as an already-normalized dataset directory.
pub fn write_dataset<T: Scalar>(d: &MultiViewDataset<T>, dir: &Path) -> Result<()> {
    d.validate()?;
    fs::create_dir_all(dir)?;
    let mut views = Vec::new();
    for (spec, x) in d.specs.iter().zip(&d.views) {
        let manifest_view = match spec.kind {
            ViewKind::Vector => {
                let file = format!("{}.csv", spec.name);
                let mut w = csv::WriterBuilder::new().has_headers(false).from_path(dir.join(&file))?;
                for row in x.rows() {
                    w.write_record(row.iter().map(|v| v.to_string()))?;
                }
                w.flush()?;
                ManifestView {
                    name: spec.name.clone(),
                    kind: ViewKind::Vector,
                    shape: spec.shape.clone(),
                    file,
                }
            }
            ViewKind::Image => {
                let (h, w, c) = spec.image_dims().expect("image spec");
                let file = format!("{}.bin", spec.name);
                let mut bytes = Vec::with_capacity(x.len() * 4);
                for row in x.rows() {
                    for p in 0..h * w {
                        for ch in 0..c {
                            let v = row[ch * h * w + p].as_f64() as f32;
                            bytes.extend_from_slice(&v.to_le_bytes());
                        }
                    }
                }
                fs::write(dir.join(&file), bytes)?;
                ManifestView {
                    name: spec.name.clone(),
                    kind: ViewKind::Image,
                    shape: spec.shape.clone(),
                    file,
                }
            }
        };
        views.push(manifest_view);
    }
    let class_ids = match &d.class_ids {
        Some(ids) => {
            let file = "class_ids.csv".to_string();
            let text: String = ids.iter().map(|i| format!("{i}\n")).collect();
            fs::write(dir.join(&file), text)?;
            Some(file)
        }
        None => None,
    };
    let labels = match &d.labels {
        Some(_) => {
            write_labels(d, &dir.join(LABELS_FILE))?;
            Some(LABELS_FILE.to_string())
        }
        None => None,
    };
    let manifest = DatasetManifest {
        n: d.len(),
        views,
        class_ids,
        labels,
        normalized: true,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}
