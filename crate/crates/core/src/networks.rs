//! Per-view encoders and decoders and the total-correlation discriminator.
//!
//! Image encoders are `Conv(k4,s2) ×3 → Fc`, vector encoders `Fc → Fc`;
//! both end in three heads on the hidden code: posterior mean, posterior
//! log-variance and `K` expert logits. Decoders mirror their encoder. All
//! hidden activations are ReLU, except in the discriminator (LeakyReLU).

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::autodiff::{softmax_rows, ConvGeom, Graph, Var};
use crate::config::{Architecture, ViewKind, ViewSpec};
use crate::error::{DpoeError, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Negative-side slope of the discriminator activations.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Numerical floor inside the batch-normalization square root.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running normalization statistics.
pub const BN_MOMENTUM: f64 = 0.1;

const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PAD: usize = 1;

/// Whether normalization uses batch statistics (training) or the running
/// estimates (inference).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Fully connected stage `x·W + b` with `W: in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.insert_uniform(format!("{name}.w"), (in_dim, out_dim), in_dim, rng);
        let b = store.insert_uniform(format!("{name}.b"), (1, out_dim), in_dim, rng);
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, p: &Bound, x: Var) -> Var {
        let h = g.matmul(x, p.var(self.w));
        g.add_row(h, p.var(self.b))
    }
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    geom: ConvGeom,
}

impl Conv {
    fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, geom: ConvGeom, rng: &mut R) -> Self {
        let fan_in = geom.patch_len();
        let w = store.insert_uniform(format!("{name}.w"), (geom.out_c, geom.patch_len()), fan_in, rng);
        let b = store.insert_uniform(format!("{name}.b"), (1, geom.out_c), fan_in, rng);
        Self { w, b, geom }
    }

    /// Transposed stage undoing `geom`.
    fn transposed<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        geom: ConvGeom,
        rng: &mut R,
    ) -> Self {
        let fan_in = geom.out_c * KERNEL * KERNEL;
        let w = store.insert_uniform(format!("{name}.w"), (geom.out_c, geom.patch_len()), fan_in, rng);
        let b = store.insert_uniform(format!("{name}.b"), (1, geom.in_c), fan_in, rng);
        Self { w, b, geom }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p.var(self.w), p.var(self.b), self.geom)
    }

    fn forward_transposed<T: Scalar>(&self, g: &mut Graph<'_, T>, p: &Bound, x: Var) -> Var {
        g.conv_transpose2d(x, p.var(self.w), p.var(self.b), self.geom)
    }
}

/// Geometries of the three stride-2 convolutions for an `H × W × C` image.
fn conv_stack(h: usize, w: usize, c: usize, channels: [usize; 3]) -> [ConvGeom; 3] {
    let g1 = ConvGeom::new(c, h, w, channels[0], KERNEL, STRIDE, PAD);
    let g2 = ConvGeom::new(channels[0], g1.out_h, g1.out_w, channels[1], KERNEL, STRIDE, PAD);
    let g3 = ConvGeom::new(channels[1], g2.out_h, g2.out_w, channels[2], KERNEL, STRIDE, PAD);
    [g1, g2, g3]
}

#[derive(Clone, Debug)]
enum EncoderBody {
    Conv { convs: Box<[Conv; 3]>, fc: Linear },
    Mlp { fc1: Linear, fc2: Linear },
}

/// Graph handles produced by one encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub hidden: Var,
    /// Posterior mean after batch normalization.
    pub mu: Var,
    /// Posterior mean before batch normalization.
    pub mu_raw: Var,
    pub log_var: Var,
    pub expert_logits: Var,
}

/// Array outputs of [`encode_view`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedView<T> {
    pub hidden: Array2<T>,
    pub mu: Array2<T>,
    pub log_var: Array2<T>,
    pub expert_logits: Array2<T>,
}

#[derive(Clone, Debug)]
pub struct ViewEncoder {
    pub view: ViewSpec,
    pub latent_dim: usize,
    pub clusters: usize,
    body: EncoderBody,
    mu_head: Linear,
    log_var_head: Linear,
    expert_head: Linear,
    bn_scale: f64,
    bn_mean: ParamId,
    bn_var: ParamId,
}

impl ViewEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        params: &mut ParamStore<T>,
        buffers: &mut ParamStore<T>,
        view: &ViewSpec,
        latent_dim: usize,
        clusters: usize,
        arch: &Architecture,
        bn_scale: f64,
        rng: &mut R,
    ) -> Self {
        let prefix = format!("enc.{}", view.name);
        let hidden = arch.hidden_width;
        let body = match view.kind {
            ViewKind::Image => {
                let (h, w, c) = view.image_dims().expect("validated image view");
                let geoms = conv_stack(h, w, c, arch.conv_channels);
                let convs = [0, 1, 2].map(|i| Conv::new(params, &format!("{prefix}.conv{}", i + 1), geoms[i], rng));
                let fc = Linear::new(params, &format!("{prefix}.fc"), geoms[2].out_len(), hidden, rng);
                EncoderBody::Conv { convs: Box::new(convs), fc }
            }
            ViewKind::Vector => EncoderBody::Mlp {
                fc1: Linear::new(params, &format!("{prefix}.fc1"), view.input_dim(), hidden, rng),
                fc2: Linear::new(params, &format!("{prefix}.fc2"), hidden, hidden, rng),
            },
        };
        let mu_head = Linear::new(params, &format!("{prefix}.mu"), hidden, latent_dim, rng);
        let log_var_head = Linear::new(params, &format!("{prefix}.log_var"), hidden, latent_dim, rng);
        let expert_head = Linear::new(params, &format!("{prefix}.expert"), hidden, clusters, rng);
        let bn_mean = buffers.insert(format!("{prefix}.bn.running_mean"), Array2::zeros((1, latent_dim)));
        let bn_var = buffers.insert(format!("{prefix}.bn.running_var"), Array2::ones((1, latent_dim)));
        Self {
            view: view.clone(),
            latent_dim,
            clusters,
            body,
            mu_head,
            log_var_head,
            expert_head,
            bn_scale,
            bn_mean,
            bn_var,
        }
    }

    pub fn hidden_width(&self) -> usize {
        self.mu_head.in_dim
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        p: &Bound,
        buffers: &ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> EncoderVars {
        let hidden = match &self.body {
            EncoderBody::Conv { convs, fc } => {
                let mut h = x;
                for conv in convs.iter() {
                    let z = conv.forward(g, p, h);
                    h = g.relu(z);
                }
                let z = fc.forward(g, p, h);
                g.relu(z)
            }
            EncoderBody::Mlp { fc1, fc2 } => {
                let z = fc1.forward(g, p, x);
                let h = g.relu(z);
                let z = fc2.forward(g, p, h);
                g.relu(z)
            }
        };
        let mu_raw = self.mu_head.forward(g, p, hidden);
        let log_var = self.log_var_head.forward(g, p, hidden);
        let expert_logits = self.expert_head.forward(g, p, hidden);
        let scale = T::lit(self.bn_scale);
        let mu = match mode {
            Mode::Train => g.batch_norm(mu_raw, scale, T::lit(BN_EPS)),
            Mode::Eval => {
                let (shift, factor) = self.running_affine(buffers);
                let shift = g.constant(shift);
                let factor = g.constant(factor);
                let centered = g.add_row(mu_raw, shift);
                g.mul_row(centered, factor)
            }
        };
        EncoderVars {
            hidden,
            mu,
            mu_raw,
            log_var,
            expert_logits,
        }
    }

    /// `(-running_mean, scale / sqrt(running_var + eps))` as `1 × d` rows.
    fn running_affine<T: Scalar>(&self, buffers: &ParamStore<T>) -> (Array2<T>, Array2<T>) {
        let shift = buffers.get(self.bn_mean).mapv(|v| -v);
        let scale = T::lit(self.bn_scale);
        let eps = T::lit(BN_EPS);
        let factor = buffers.get(self.bn_var).mapv(|v| scale / (v + eps).sqrt());
        (shift, factor)
    }

    /// Fold one training batch of pre-normalization means into the running
    /// statistics.
    pub fn update_running_stats<T: Scalar>(&self, buffers: &mut ParamStore<T>, mu_raw: ArrayView2<'_, T>) {
        let n = mu_raw.nrows();
        if n == 0 {
            return;
        }
        let nf = T::from_usize(n).expect("rows");
        let mean: Array1<T> = mu_raw.sum_axis(Axis(0)) / nf;
        let denom = T::from_usize(n.saturating_sub(1).max(1)).expect("rows");
        let var: Array1<T> = (&mu_raw - &mean).mapv(|v| v * v).sum_axis(Axis(0)) / denom;
        let momentum = T::lit(BN_MOMENTUM);
        let keep = T::one() - momentum;
        let running_mean = buffers.get_mut(self.bn_mean);
        ndarray::Zip::from(running_mean.row_mut(0))
            .and(&mean)
            .for_each(|r, &b| *r = keep * *r + momentum * b);
        let running_var = buffers.get_mut(self.bn_var);
        ndarray::Zip::from(running_var.row_mut(0))
            .and(&var)
            .for_each(|r, &b| *r = keep * *r + momentum * b);
    }
}

#[derive(Clone, Debug)]
enum DecoderBody {
    Mlp {
        fc1: Linear,
        fc2: Linear,
        out: Linear,
    },
    Conv {
        fc1: Linear,
        fc2: Linear,
        deconvs: Box<[Conv; 3]>,
    },
}

/// Mirror of a [`ViewEncoder`] mapping `z = [c, s]` back to the view.
#[derive(Clone, Debug)]
pub struct ViewDecoder {
    pub view: ViewSpec,
    pub input_dim: usize,
    body: DecoderBody,
}

impl ViewDecoder {
    pub fn new<T: Scalar, R: Rng>(
        params: &mut ParamStore<T>,
        view: &ViewSpec,
        input_dim: usize,
        arch: &Architecture,
        rng: &mut R,
    ) -> Self {
        let prefix = format!("dec.{}", view.name);
        let hidden = arch.hidden_width;
        let body = match view.kind {
            ViewKind::Image => {
                let (h, w, c) = view.image_dims().expect("validated image view");
                let geoms = conv_stack(h, w, c, arch.conv_channels);
                let fc1 = Linear::new(params, &format!("{prefix}.fc1"), input_dim, hidden, rng);
                let fc2 = Linear::new(params, &format!("{prefix}.fc2"), hidden, geoms[2].out_len(), rng);
                let deconvs = [2, 1, 0].map(|i| {
                    Conv::transposed(params, &format!("{prefix}.deconv{}", i + 1), geoms[i], rng)
                });
                DecoderBody::Conv { fc1, fc2, deconvs: Box::new(deconvs) }
            }
            ViewKind::Vector => DecoderBody::Mlp {
                fc1: Linear::new(params, &format!("{prefix}.fc1"), input_dim, hidden, rng),
                fc2: Linear::new(params, &format!("{prefix}.fc2"), hidden, hidden, rng),
                out: Linear::new(params, &format!("{prefix}.out"), hidden, view.input_dim(), rng),
            },
        };
        Self {
            view: view.clone(),
            input_dim,
            body,
        }
    }

    /// Pre-activation output: Bernoulli logits for images, the reconstruction
    /// itself for vectors.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, p: &Bound, z: Var) -> Var {
        match &self.body {
            DecoderBody::Mlp { fc1, fc2, out } => {
                let h = fc1.forward(g, p, z);
                let h = g.relu(h);
                let h = fc2.forward(g, p, h);
                let h = g.relu(h);
                out.forward(g, p, h)
            }
            DecoderBody::Conv { fc1, fc2, deconvs } => {
                let h = fc1.forward(g, p, z);
                let h = g.relu(h);
                let h = fc2.forward(g, p, h);
                let mut h = g.relu(h);
                for (i, deconv) in deconvs.iter().enumerate() {
                    h = deconv.forward_transposed(g, p, h);
                    if i + 1 < deconvs.len() {
                        h = g.relu(h);
                    }
                }
                h
            }
        }
    }

    /// Apply the view's output activation to a pre-activation output.
    pub fn activate<T: Scalar>(&self, g: &mut Graph<'_, T>, pre: Var) -> Var {
        match self.view.kind {
            ViewKind::Image => g.sigmoid(pre),
            ViewKind::Vector => pre,
        }
    }
}

/// Density-ratio discriminator on `(c, s^v)` pairs: two mapping towers, a
/// score tower, and two output logits `[joint, marginal]`.
#[derive(Clone, Debug)]
pub struct TcDiscriminator {
    pub clusters: usize,
    pub latent_dim: usize,
    c_tower: [Linear; 3],
    s_tower: [Linear; 3],
    score: [Linear; 3],
}

/// Column of the discriminator logits that stands for "joint sample".
pub const JOINT: usize = 0;

impl TcDiscriminator {
    pub fn new<T: Scalar, R: Rng>(
        params: &mut ParamStore<T>,
        name: &str,
        clusters: usize,
        latent_dim: usize,
        arch: &Architecture,
        rng: &mut R,
    ) -> Self {
        let map = arch.disc_mapping_width;
        let score = arch.disc_score_width;
        let tower = |params: &mut ParamStore<T>, rng: &mut R, tag: &str, input: usize| {
            [
                Linear::new(params, &format!("{name}.{tag}1"), input, map, rng),
                Linear::new(params, &format!("{name}.{tag}2"), map, map, rng),
                Linear::new(params, &format!("{name}.{tag}3"), map, map, rng),
            ]
        };
        let c_tower = tower(params, rng, "c", clusters);
        let s_tower = tower(params, rng, "s", latent_dim);
        let score = [
            Linear::new(params, &format!("{name}.score1"), 2 * map, score, rng),
            Linear::new(params, &format!("{name}.score2"), score, score, rng),
            Linear::new(params, &format!("{name}.score3"), score, 2, rng),
        ];
        Self {
            clusters,
            latent_dim,
            c_tower,
            s_tower,
            score,
        }
    }

    /// Logits `B × 2`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, p: &Bound, c: Var, s: Var) -> Var {
        let slope = T::lit(LEAKY_SLOPE);
        let mut hc = c;
        for layer in &self.c_tower {
            let z = layer.forward(g, p, hc);
            hc = g.leaky_relu(z, slope);
        }
        let mut hs = s;
        for layer in &self.s_tower {
            let z = layer.forward(g, p, hs);
            hs = g.leaky_relu(z, slope);
        }
        let mut h = g.concat(&[hc, hs]);
        for (i, layer) in self.score.iter().enumerate() {
            h = layer.forward(g, p, h);
            if i + 1 < self.score.len() {
                h = g.leaky_relu(h, slope);
            }
        }
        h
    }
}

fn check_width<T: Scalar>(what: &str, x: &ArrayView2<'_, T>, expected: usize) -> Result<()> {
    if x.ncols() != expected {
        return Err(DpoeError::Shape(format!(
            "{what}: expected width {expected}, got {}",
            x.ncols()
        )));
    }
    Ok(())
}

/// Run one encoder on a batch of flattened view instances.
pub fn encode_view<T: Scalar>(
    enc: &ViewEncoder,
    params: &ParamStore<T>,
    buffers: &ParamStore<T>,
    x: ArrayView2<'_, T>,
    mode: Mode,
) -> Result<EncodedView<T>> {
    check_width(&format!("view '{}'", enc.view.name), &x, enc.view.input_dim())?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let xv = g.constant_view(x.reborrow());
    let out = enc.forward(&mut g, &p, buffers, xv, mode);
    Ok(EncodedView {
        hidden: g.value(out.hidden).to_owned(),
        mu: g.value(out.mu).to_owned(),
        log_var: g.value(out.log_var).to_owned(),
        expert_logits: g.value(out.expert_logits).to_owned(),
    })
}

/// Decode a batch of latent codes `z = [c, s]` into the view's codomain.
pub fn decode_view<T: Scalar>(dec: &ViewDecoder, params: &ParamStore<T>, z: ArrayView2<'_, T>) -> Result<Array2<T>> {
    check_width("decoder input", &z, dec.input_dim)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let zv = g.constant_view(z.reborrow());
    let pre = dec.forward(&mut g, &p, zv);
    let out = dec.activate(&mut g, pre);
    Ok(g.value(out).to_owned())
}

/// Probability that each `(c, s)` row is a joint sample.
pub fn discriminator_prob<T: Scalar>(
    disc: &TcDiscriminator,
    params: &ParamStore<T>,
    c: ArrayView2<'_, T>,
    s: ArrayView2<'_, T>,
) -> Result<Array1<T>> {
    check_width("discriminator c", &c, disc.clusters)?;
    check_width("discriminator s", &s, disc.latent_dim)?;
    if c.nrows() != s.nrows() {
        return Err(DpoeError::Shape("discriminator: c and s batch sizes differ".into()));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let cv = g.constant_view(c.reborrow());
    let sv = g.constant_view(s.reborrow());
    let logits = disc.forward(&mut g, &p, cv, sv);
    Ok(softmax_rows(g.value(logits)).column(JOINT).to_owned())
}
