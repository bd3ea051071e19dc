//! The assembled dPoE model: one encoder/decoder pair and one TC
//! discriminator per view, plus the parameter stores they index into.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel, StandardNormal};

use crate::config::{derive_capacities, validate_config, Capacities, ModelConfig};
use crate::error::{DpoeError, Result};
use crate::networks::{TcDiscriminator, ViewDecoder, ViewEncoder};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct DpoeModel<T> {
    /// Validated configuration.
    pub config: ModelConfig,
    pub capacities: Capacities,
    /// Encoder and decoder weights.
    pub params: ParamStore<T>,
    /// Running normalization statistics (not trained by gradient).
    pub buffers: ParamStore<T>,
    pub disc_params: ParamStore<T>,
    pub encoders: Vec<ViewEncoder>,
    pub decoders: Vec<ViewDecoder>,
    pub discriminators: Vec<TcDiscriminator>,
}

impl<T: Scalar> DpoeModel<T> {
    /// Validate `config` and initialize every network from its seed.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let config = validate_config(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self::with_rng(config, &mut rng))
    }

    /// Build from an already validated config.
    pub fn with_rng<R: Rng>(config: ModelConfig, rng: &mut R) -> Self {
        let capacities = derive_capacities(&config);
        let k = config.k;
        let arch = config.architecture;
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let mut disc_params = ParamStore::new();
        let mut encoders = Vec::new();
        let mut decoders = Vec::new();
        let mut discriminators = Vec::new();
        for (v, view) in config.views.iter().enumerate() {
            let d = config.latent_dim(v);
            encoders.push(ViewEncoder::new(
                &mut params,
                &mut buffers,
                view,
                d,
                k,
                &arch,
                config.bn_scale,
                rng,
            ));
            decoders.push(ViewDecoder::new(&mut params, view, k + d, &arch, rng));
            discriminators.push(TcDiscriminator::new(
                &mut disc_params,
                &format!("disc.{}", view.name),
                k,
                d,
                &arch,
                rng,
            ));
        }
        Self {
            config,
            capacities,
            params,
            buffers,
            disc_params,
            encoders,
            decoders,
            discriminators,
        }
    }

    pub fn num_views(&self) -> usize {
        self.config.num_views()
    }

    pub fn clusters(&self) -> usize {
        self.config.k
    }

    /// Check one batch tensor per view, with matching widths and row counts.
    /// Returns the batch size.
    pub fn check_views(&self, views: &[ArrayView2<'_, T>]) -> Result<usize> {
        if views.len() != self.num_views() {
            return Err(DpoeError::Shape(format!(
                "expected {} views, got {}",
                self.num_views(),
                views.len()
            )));
        }
        let n = views[0].nrows();
        for (spec, x) in self.config.views.iter().zip(views) {
            if x.ncols() != spec.input_dim() {
                return Err(DpoeError::Shape(format!(
                    "view '{}': expected width {}, got {}",
                    spec.name,
                    spec.input_dim(),
                    x.ncols()
                )));
            }
            if x.nrows() != n {
                return Err(DpoeError::Shape("view length mismatch".into()));
            }
        }
        Ok(n)
    }

    pub fn all_finite(&self) -> bool {
        self.params.all_finite() && self.buffers.all_finite() && self.disc_params.all_finite()
    }
}

/// Explicit noise for one stochastic forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise<T> {
    /// Standard-normal draws, `B × d^v` per view.
    pub gaussian: Vec<Array2<T>>,
    /// Standard Gumbel draws, `B × K`.
    pub gumbel: Array2<T>,
}

impl<T: Scalar> Noise<T> {
    pub fn sample<R: Rng>(model: &DpoeModel<T>, batch: usize, rng: &mut R) -> Self {
        let gaussian = (0..model.num_views())
            .map(|v| {
                Array2::from_shape_simple_fn((batch, model.config.latent_dim(v)), || {
                    T::lit(StandardNormal.sample(rng))
                })
            })
            .collect();
        let gumbel_dist = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
        let gumbel =
            Array2::from_shape_simple_fn((batch, model.clusters()), || T::lit(gumbel_dist.sample(rng)));
        Self { gaussian, gumbel }
    }

    /// All-zero noise: `s = μ` and `c = softmax(ln π / τ)`.
    pub fn zeros(model: &DpoeModel<T>, batch: usize) -> Self {
        Self {
            gaussian: (0..model.num_views())
                .map(|v| Array2::zeros((batch, model.config.latent_dim(v))))
                .collect(),
            gumbel: Array2::zeros((batch, model.clusters())),
        }
    }
}
