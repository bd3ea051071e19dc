//! Binary checkpoint bundles.
//!
//! Layout: the 8-byte magic, a little-endian `u32` format version, a `u64`
//! manifest length, the JSON manifest, then every array's elements in
//! manifest order as little-endian floats of the manifest's dtype.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::{Capacities, ModelConfig};
use crate::error::{DpoeError, Result};
use crate::model::DpoeModel;
use crate::params::ParamStore;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"DPOECKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub epochs_completed: usize,
    pub steps: usize,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrayGroup {
    Model,
    Buffer,
    Disc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub group: ArrayGroup,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub dtype: String,
    pub config: ModelConfig,
    pub capacities: Capacities,
    pub training: TrainingMetadata,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointBundle<T> {
    pub manifest: CheckpointManifest,
    /// Same order as `manifest.arrays`.
    pub arrays: Vec<Array2<T>>,
}

impl<T: Scalar> CheckpointBundle<T> {
    pub fn from_model(model: &DpoeModel<T>, training: TrainingMetadata) -> Self {
        let mut entries = Vec::new();
        let mut arrays = Vec::new();
        for (group, store) in [
            (ArrayGroup::Model, &model.params),
            (ArrayGroup::Buffer, &model.buffers),
            (ArrayGroup::Disc, &model.disc_params),
        ] {
            for (name, a) in store.iter() {
                entries.push(ArrayEntry {
                    name: name.to_string(),
                    group,
                    shape: [a.nrows(), a.ncols()],
                });
                arrays.push(a.clone());
            }
        }
        Self {
            manifest: CheckpointManifest {
                version: FORMAT_VERSION,
                dtype: T::DTYPE.to_string(),
                config: model.config.clone(),
                capacities: model.capacities.clone(),
                training,
                arrays: entries,
            },
            arrays,
        }
    }

    /// Rebuild the model the manifest describes and fill in its arrays.
    /// Every array must match the freshly built architecture by name and
    /// shape.
    pub fn into_model(self) -> Result<DpoeModel<T>> {
        let mut model = DpoeModel::<T>::new(&self.manifest.config)?;
        let expected = model.params.len() + model.buffers.len() + model.disc_params.len();
        if self.arrays.len() != expected || self.manifest.arrays.len() != expected {
            return Err(DpoeError::Checkpoint(format!(
                "manifest lists {} arrays, architecture has {expected}",
                self.manifest.arrays.len()
            )));
        }
        for (entry, array) in self.manifest.arrays.iter().zip(self.arrays) {
            let store: &mut ParamStore<T> = match entry.group {
                ArrayGroup::Model => &mut model.params,
                ArrayGroup::Buffer => &mut model.buffers,
                ArrayGroup::Disc => &mut model.disc_params,
            };
            let slot = store
                .by_name_mut(&entry.name)
                .ok_or_else(|| DpoeError::Checkpoint(format!("unknown array '{}'", entry.name)))?;
            if slot.dim() != array.dim() || [array.nrows(), array.ncols()] != entry.shape {
                return Err(DpoeError::Checkpoint(format!(
                    "array '{}' has shape {:?}, architecture expects {:?}",
                    entry.name,
                    entry.shape,
                    slot.dim()
                )));
            }
            *slot = array;
        }
        model.capacities = self.manifest.capacities;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let payload: usize = self.arrays.iter().map(|a| a.len()).sum();
        let mut out = Vec::with_capacity(20 + manifest.len() + payload * T::BYTES);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for a in &self.arrays {
            for &x in a.iter() {
                x.write_le(&mut out);
            }
        }
        Ok(out)
    }

    /// Parse a bundle; arrays stored in another float width are converted.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(DpoeError::UnrecognizedCheckpoint);
        }
        let truncated = || DpoeError::Checkpoint("truncated file".into());
        let header = bytes.get(8..20).ok_or_else(truncated)?;
        let version = u32::from_le_bytes(header[..4].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(DpoeError::Checkpoint(format!(
                "format version {version}, this build reads version {FORMAT_VERSION}"
            )));
        }
        let len = u64::from_le_bytes(header[4..].try_into().expect("8 bytes")) as usize;
        let manifest_bytes = bytes.get(20..20usize.saturating_add(len)).ok_or_else(truncated)?;
        let manifest: CheckpointManifest = serde_json::from_slice(manifest_bytes)?;
        let width = match manifest.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(DpoeError::Checkpoint(format!("unsupported dtype '{other}'"))),
        };
        let mut offset = 20 + len;
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for entry in &manifest.arrays {
            let count = entry.shape[0] * entry.shape[1];
            let end = offset + count * width;
            let chunk = bytes.get(offset..end).ok_or_else(truncated)?;
            let values: Vec<T> = chunk
                .chunks_exact(width)
                .map(|c| match width {
                    4 => T::lit(f32::read_le(c) as f64),
                    _ => T::lit(f64::read_le(c)),
                })
                .collect();
            arrays.push(Array2::from_shape_vec((entry.shape[0], entry.shape[1]), values).expect("sized above"));
            offset = end;
        }
        if offset != bytes.len() {
            return Err(DpoeError::Checkpoint(format!("{} trailing bytes", bytes.len() - offset)));
        }
        Ok(Self { manifest, arrays })
    }
}

/// Write atomically: a sibling temp file renamed into place.
pub fn save_checkpoint<T: Scalar>(bundle: &CheckpointBundle<T>, path: &Path) -> Result<()> {
    let bytes = bundle.to_bytes()?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<CheckpointBundle<T>> {
    CheckpointBundle::from_bytes(&fs::read(path)?)
}

/// Load a bundle and rebuild its model.
pub fn load_model<T: Scalar>(path: &Path) -> Result<DpoeModel<T>> {
    load_checkpoint(path)?.into_model()
}
