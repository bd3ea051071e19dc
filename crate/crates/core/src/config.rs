//! Model configuration, view descriptions and the capacity constants derived
//! from them.
//!
//! A [`ModelConfig`] is read from a TOML or JSON file, validated once with
//! [`validate_config`], and treated as immutable afterwards.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DpoeError, Result};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "DPOE_SEED";

/// Side length images are rescaled to before modeling.
pub const IMAGE_SIDE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewKind {
    Image,
    Vector,
}

/// One view of the multi-view input.
///
/// Image shapes are `[H, W, C]`; vector shapes are `[D]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub name: String,
    pub kind: ViewKind,
    pub shape: Vec<usize>,
}

impl ViewSpec {
    pub fn vector(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            kind: ViewKind::Vector,
            shape: vec![dim],
        }
    }

    pub fn image(name: impl Into<String>, height: usize, width: usize, channels: usize) -> Self {
        Self {
            name: name.into(),
            kind: ViewKind::Image,
            shape: vec![height, width, channels],
        }
    }

    /// Number of scalars per instance.
    pub fn input_dim(&self) -> usize {
        self.shape.iter().product()
    }

    /// `(height, width, channels)` for image views.
    pub fn image_dims(&self) -> Option<(usize, usize, usize)> {
        match (self.kind, self.shape.as_slice()) {
            (ViewKind::Image, &[h, w, c]) => Some((h, w, c)),
            _ => None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(DpoeError::Config("view name must be non-empty".into()));
        }
        if self.shape.contains(&0) {
            return Err(DpoeError::Config(format!(
                "view '{}': shape entries must be > 0",
                self.name
            )));
        }
        match self.kind {
            ViewKind::Vector if self.shape.len() != 1 => Err(DpoeError::Config(format!(
                "vector view '{}' needs a shape of length 1",
                self.name
            ))),
            ViewKind::Image if self.shape.len() != 3 => Err(DpoeError::Config(format!(
                "image view '{}' needs a shape [H, W, C]",
                self.name
            ))),
            ViewKind::Image if !self.shape[0].is_multiple_of(8) || !self.shape[1].is_multiple_of(8) => {
                Err(DpoeError::Config(format!(
                    "image view '{}': height and width must be multiples of 8",
                    self.name
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Component switches used by the ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Anchor the view-common KL at `ln K`; when off the anchor is 0.
    pub use_cc: bool,
    /// Anchor each view-specific KL at `d/2`; when off the anchor is 0.
    pub use_cs: bool,
    /// Fuse experts by product; when off, by arithmetic mean.
    pub use_poe: bool,
    /// Train the TC discriminator and penalize its estimate.
    pub use_tc: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_cc: true,
            use_cs: true,
            use_poe: true,
            use_tc: true,
        }
    }
}

impl Ablation {
    /// Switch a component off by its short name (`Cc`, `Cs`, `poe`, `tc`).
    pub fn disable(&mut self, component: &str) -> Result<()> {
        match component.to_ascii_lowercase().as_str() {
            "cc" => self.use_cc = false,
            "cs" => self.use_cs = false,
            "poe" => self.use_poe = false,
            "tc" => self.use_tc = false,
            other => {
                return Err(DpoeError::Config(format!(
                    "unknown ablation component '{other}' (expected Cc, Cs, poe or tc)"
                )))
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let mut off = Vec::new();
        if !self.use_cc {
            off.push("Cc");
        }
        if !self.use_cs {
            off.push("Cs");
        }
        if !self.use_poe {
            off.push("poe");
        }
        if !self.use_tc {
            off.push("tc");
        }
        if off.is_empty() {
            "full".into()
        } else {
            format!("w/o {}", off.join("+"))
        }
    }
}

/// Layer widths of the encoder, decoder and discriminator stacks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    /// Width of the fully connected stages in encoders and decoders.
    pub hidden_width: usize,
    /// Channel counts of the three convolution stages of image encoders.
    pub conv_channels: [usize; 3],
    /// Width of each stage of the two discriminator mapping towers.
    pub disc_mapping_width: usize,
    /// Width of the two hidden stages of the discriminator score tower.
    pub disc_score_width: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden_width: 256,
            conv_channels: [32, 64, 64],
            disc_mapping_width: 500,
            disc_score_width: 1000,
        }
    }
}

fn default_lambda() -> f64 {
    50.0
}
fn default_gamma() -> f64 {
    50.0
}
fn default_tau() -> f64 {
    0.5
}
fn default_learning_rate() -> f64 {
    1e-4
}
fn default_epochs() -> usize {
    500
}
fn default_batch_size() -> usize {
    256
}
fn default_bn_scale() -> f64 {
    1.0
}
fn default_grad_clip() -> f64 {
    10.0
}

/// Full model and training configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// View descriptions; may be left empty in experiment files and filled
    /// from the dataset.
    #[serde(default)]
    pub views: Vec<ViewSpec>,
    /// Number of clusters `K`.
    pub k: usize,
    /// Per-view latent dimensions `d^v`. Empty means 10 for every view; a
    /// single entry is broadcast.
    #[serde(default)]
    pub latent_dims: Vec<usize>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Gumbel-Softmax temperature, constant during training.
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub architecture: Architecture,
    /// Fixed scale of the batch normalization applied to the posterior means.
    #[serde(default = "default_bn_scale")]
    pub bn_scale: f64,
    /// Count the view-common KL once instead of once per view.
    #[serde(default)]
    pub normalize_common_kl: bool,
    /// Global gradient-norm clipping threshold.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    /// Epochs over which both capacity anchors ramp linearly from 0 to
    /// their bounds; 0 uses the bounds from the first step.
    #[serde(default)]
    pub capacity_warmup_epochs: f64,
}

pub const DEFAULT_LATENT_DIM: usize = 10;

impl ModelConfig {
    /// Config with every default filled for the given views and cluster count.
    pub fn new(views: Vec<ViewSpec>, k: usize) -> Self {
        Self {
            views,
            k,
            latent_dims: Vec::new(),
            lambda: default_lambda(),
            gamma: default_gamma(),
            tau: default_tau(),
            learning_rate: default_learning_rate(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed: 0,
            ablation: Ablation::default(),
            architecture: Architecture::default(),
            bn_scale: default_bn_scale(),
            normalize_common_kl: false,
            grad_clip: default_grad_clip(),
            capacity_warmup_epochs: 0.0,
        }
    }

    /// Settings sized for vector views of a few dozen features on one CPU
    /// core: narrower discriminators, smaller batches, penalty weights scaled
    /// to the smaller reconstruction sums, and a capacity ramp that keeps
    /// the view-common code from collapsing onto one cluster early on.
    pub fn desk(views: Vec<ViewSpec>, k: usize) -> Self {
        let mut cfg = Self::new(views, k);
        cfg.latent_dims = vec![DEFAULT_LATENT_DIM];
        cfg.lambda = 1.0;
        cfg.gamma = 1.0;
        cfg.learning_rate = 5e-4;
        cfg.epochs = 100;
        cfg.batch_size = 64;
        cfg.bn_scale = 0.3;
        cfg.capacity_warmup_epochs = 40.0;
        cfg.architecture.disc_mapping_width = 64;
        cfg.architecture.disc_score_width = 128;
        cfg
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    /// Latent dimension of view `v`; only meaningful after validation.
    pub fn latent_dim(&self, v: usize) -> usize {
        self.latent_dims[v]
    }

    /// Parse a TOML or JSON config file (chosen by extension) and apply the
    /// seed override from the environment.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: ModelConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)
                .map_err(|e| DpoeError::Config(format!("{}: {e}", path.display())))?,
            _ => toml::from_str(&text)
                .map_err(|e| DpoeError::Config(format!("{}: {e}", path.display())))?,
        };
        cfg.apply_env_overrides()?;
        Ok(cfg)
    }

    pub fn apply_env_overrides(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.seed = raw
                .trim()
                .parse()
                .map_err(|_| DpoeError::Config(format!("{SEED_ENV}='{raw}' is not an integer")))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| DpoeError::Config(e.to_string()))
    }
}

/// Check every field and fill derived defaults (per-view latent dims).
pub fn validate_config(cfg: &ModelConfig) -> Result<ModelConfig> {
    let mut cfg = cfg.clone();
    if cfg.k < 2 {
        return Err(DpoeError::Config("K must be ≥ 2".into()));
    }
    let m = cfg.views.len();
    if m < 2 {
        return Err(DpoeError::Config("m must be ≥ 2".into()));
    }
    for view in &cfg.views {
        view.validate()?;
    }
    for (i, a) in cfg.views.iter().enumerate() {
        if cfg.views[..i].iter().any(|b| b.name == a.name) {
            return Err(DpoeError::Config(format!("duplicate view name '{}'", a.name)));
        }
    }
    cfg.latent_dims = match cfg.latent_dims.len() {
        0 => vec![DEFAULT_LATENT_DIM; m],
        1 => vec![cfg.latent_dims[0]; m],
        n if n == m => cfg.latent_dims,
        n => {
            return Err(DpoeError::Config(format!(
                "latent_dims has {n} entries for {m} views"
            )))
        }
    };
    if cfg.latent_dims.contains(&0) {
        return Err(DpoeError::Config("latent dims d^v must be ≥ 1".into()));
    }
    let nonneg = [
        ("lambda", cfg.lambda),
        ("gamma", cfg.gamma),
        ("capacity_warmup_epochs", cfg.capacity_warmup_epochs),
    ];
    for (name, value) in nonneg {
        if !(value >= 0.0 && value.is_finite()) {
            return Err(DpoeError::Config(format!("{name} must be a nonnegative real")));
        }
    }
    let positive = [
        ("tau", cfg.tau),
        ("learning_rate", cfg.learning_rate),
        ("bn_scale", cfg.bn_scale),
        ("grad_clip", cfg.grad_clip),
    ];
    for (name, value) in positive {
        if !(value > 0.0 && value.is_finite()) {
            return Err(DpoeError::Config(format!("{name} must be a positive real")));
        }
    }
    if cfg.batch_size == 0 {
        return Err(DpoeError::Config("batch_size must be positive".into()));
    }
    let arch = &cfg.architecture;
    if arch.hidden_width == 0
        || arch.disc_mapping_width == 0
        || arch.disc_score_width == 0
        || arch.conv_channels.contains(&0)
    {
        return Err(DpoeError::Config("layer widths must be positive".into()));
    }
    Ok(cfg)
}

/// Capacity anchors of the capped KL penalties, in nats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Capacities {
    /// `C_{s^v} = d^v / 2` per view.
    pub c_specific: Vec<f64>,
    /// `C_c = ln K`.
    pub c_common: f64,
}

/// Capacities implied by the latent dimensions and cluster count of a
/// validated config.
pub fn derive_capacities(cfg: &ModelConfig) -> Capacities {
    Capacities {
        c_specific: cfg.latent_dims.iter().map(|&d| d as f64 / 2.0).collect(),
        c_common: (cfg.k as f64).ln(),
    }
}

impl Capacities {
    /// Anchors actually used by the loss: a disabled capacity becomes 0.
    pub fn effective(&self, ablation: &Ablation) -> Capacities {
        Capacities {
            c_specific: if ablation.use_cs {
                self.c_specific.clone()
            } else {
                vec![0.0; self.c_specific.len()]
            },
            c_common: if ablation.use_cc { self.c_common } else { 0.0 },
        }
    }

    /// Every anchor multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Capacities {
        Capacities {
            c_specific: self.c_specific.iter().map(|c| c * factor).collect(),
            c_common: self.c_common * factor,
        }
    }
}
