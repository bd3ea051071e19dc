//! The λ-VAE objective with capped KL terms, the adversarial TC estimate,
//! the joint dPoE loss and the discriminator loss.
//!
//! Everything is in minimization form:
//!
//! ```text
//! total = mean_b [ Σ_v recon_v + λ Σ_v |KL_s^v − C_s^v| + λ m |KL_c − C_c| + γ Σ_v tc_v ]
//! ```
//!
//! with `m` replaced by 1 when `normalize_common_kl` is set.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::config::{Capacities, ModelConfig, ViewKind};
use crate::error::{DpoeError, Result};
use crate::latent::{
    capped_kl, capped_kl_var, fuse_log_var, gumbel_softmax_var, kl_categorical_uniform, kl_categorical_var,
    kl_gaussian, kl_gaussian_var, reparam_var, LatentState,
};
use crate::model::{DpoeModel, Noise};
use crate::networks::{discriminator_prob, EncoderVars, Mode, TcDiscriminator, JOINT};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;

/// Discriminator probabilities are clamped to `[P_CLAMP, 1 − P_CLAMP]`
/// before taking the log-odds.
pub const P_CLAMP: f64 = 1e-6;

/// Largest log-odds the TC estimate can report.
pub fn tc_limit() -> f64 {
    ((1.0 - P_CLAMP) / P_CLAMP).ln()
}

/// Per-instance negative log-likelihood of `x` under the decoder output
/// `x_tilde`: Bernoulli cross-entropy over pixels for images (from
/// probabilities), `½‖x − x̃‖²` for vectors.
pub fn reconstruction_nll<T: Scalar>(
    x: ArrayView2<'_, T>,
    x_tilde: ArrayView2<'_, T>,
    kind: ViewKind,
) -> Result<Array1<T>> {
    if x.dim() != x_tilde.dim() {
        return Err(DpoeError::Shape(format!(
            "reconstruction: {:?} vs {:?}",
            x.dim(),
            x_tilde.dim()
        )));
    }
    let terms = match kind {
        ViewKind::Image => {
            let lo = T::lit(1e-12);
            let hi = T::one() - lo;
            Zip::from(x).and(x_tilde).map_collect(|&t, &p| {
                let p = p.max(lo).min(hi);
                -(t * p.ln() + (T::one() - t) * (T::one() - p).ln())
            })
        }
        ViewKind::Vector => {
            let half = T::lit(0.5);
            Zip::from(x).and(x_tilde).map_collect(|&a, &b| half * (a - b) * (a - b))
        }
    };
    Ok(terms.sum_axis(Axis(1)))
}

/// Batch-mean terms of one view's λ-VAE loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ViewComponents {
    pub recon: f64,
    pub kl_s: f64,
    pub kl_s_capped: f64,
    pub kl_c: f64,
    pub kl_c_capped: f64,
}

/// Weight of the common KL term inside each per-view loss.
fn common_weight(cfg: &ModelConfig) -> f64 {
    if cfg.normalize_common_kl {
        1.0 / cfg.num_views() as f64
    } else {
        1.0
    }
}

impl ViewComponents {
    /// `recon + λ |KL_s − C_s| + λ w |KL_c − C_c|`.
    pub fn value(&self, cfg: &ModelConfig) -> f64 {
        self.recon + cfg.lambda * self.kl_s_capped + cfg.lambda * common_weight(cfg) * self.kl_c_capped
    }
}

fn mean_f64<T: Scalar>(x: &Array1<T>) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().map(|v| v.as_f64()).sum::<f64>() / x.len() as f64
    }
}

/// Per-view λ-VAE components for one batch. Disabled capacities are
/// anchored at 0.
pub fn lambda_vae_loss<T: Scalar>(
    state: &LatentState<T>,
    x: &[ArrayView2<'_, T>],
    x_tilde: &[ArrayView2<'_, T>],
    cfg: &ModelConfig,
    caps: &Capacities,
) -> Result<Vec<ViewComponents>> {
    let m = cfg.num_views();
    if x.len() != m || x_tilde.len() != m || state.mu.len() != m {
        return Err(DpoeError::Shape(format!("expected {m} views")));
    }
    let caps = caps.effective(&cfg.ablation);
    let kl_c = kl_categorical_uniform(state.pi.view())?;
    let kl_c_capped = capped_kl(kl_c.view(), caps.c_common);
    (0..m)
        .map(|v| {
            let recon = reconstruction_nll(x[v], x_tilde[v], cfg.views[v].kind)?;
            let kl_s = kl_gaussian(state.mu[v].view(), state.log_var[v].view());
            let kl_s_capped = capped_kl(kl_s.view(), caps.c_specific[v]);
            Ok(ViewComponents {
                recon: mean_f64(&recon),
                kl_s: mean_f64(&kl_s),
                kl_s_capped: mean_f64(&kl_s_capped),
                kl_c: mean_f64(&kl_c),
                kl_c_capped: mean_f64(&kl_c_capped),
            })
        })
        .collect()
}

/// Log-odds of a joint-sample probability, clamped to `[1e-6, 1 − 1e-6]`.
pub fn tc_from_prob(p: f64) -> f64 {
    let p = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
    (p / (1.0 - p)).ln()
}

/// Density-ratio estimate of the total correlation between `c` and `s` per
/// instance: `ln(𝔇 / (1 − 𝔇))`.
pub fn tc_estimate<T: Scalar>(
    disc: &TcDiscriminator,
    params: &ParamStore<T>,
    c: ArrayView2<'_, T>,
    s: ArrayView2<'_, T>,
) -> Result<Array1<f64>> {
    Ok(discriminator_prob(disc, params, c, s)?.mapv(|p| tc_from_prob(p.as_f64())))
}

/// Batch means of every loss term, and the total in minimization sense.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: Vec<f64>,
    pub kl_s: Vec<f64>,
    pub kl_s_capped: Vec<f64>,
    pub kl_c: f64,
    pub kl_c_capped: f64,
    /// Empty when the TC term is disabled.
    pub tc: Vec<f64>,
    pub total: f64,
}

/// Combine per-view components and TC estimates into the joint objective.
pub fn dpoe_total_loss(components: &[ViewComponents], tc: &[f64], cfg: &ModelConfig) -> LossBreakdown {
    let mut total: f64 = components.iter().map(|c| c.value(cfg)).sum();
    let tc = if cfg.ablation.use_tc { tc.to_vec() } else { Vec::new() };
    total += cfg.gamma * tc.iter().sum::<f64>();
    let first = components.first().cloned().unwrap_or_default();
    LossBreakdown {
        recon: components.iter().map(|c| c.recon).collect(),
        kl_s: components.iter().map(|c| c.kl_s).collect(),
        kl_s_capped: components.iter().map(|c| c.kl_s_capped).collect(),
        kl_c: first.kl_c,
        kl_c_capped: first.kl_c_capped,
        tc,
        total,
    }
}

/// Uniform random cyclic permutation (Sattolo), so no index maps to itself.
pub fn derangement<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        perm.swap(i, j);
    }
    perm
}

pub fn permute_rows<T: Scalar>(x: ArrayView2<'_, T>, perm: &[usize]) -> Array2<T> {
    x.select(Axis(0), perm)
}

/// `−mean[ln 𝔇(c, s) + ln(1 − 𝔇(c, s̃))]`.
pub fn discriminator_loss<T: Scalar>(
    disc: &TcDiscriminator,
    params: &ParamStore<T>,
    c: ArrayView2<'_, T>,
    s: ArrayView2<'_, T>,
    s_shuffled: ArrayView2<'_, T>,
) -> Result<f64> {
    if c.nrows() < 2 {
        return Err(DpoeError::Input("discriminator loss needs a batch of at least 2".into()));
    }
    let mut g = Graph::new();
    let dp = params.bind(&mut g, false);
    let (cv, sv, shv) = (
        g.constant_view(c.reborrow()),
        g.constant_view(s.reborrow()),
        g.constant_view(s_shuffled.reborrow()),
    );
    if g.shape(sv) != g.shape(shv) {
        return Err(DpoeError::Shape("shuffled codes differ in shape".into()));
    }
    let out = discriminator_loss_var(&mut g, disc, &dp, cv, sv, shv);
    Ok(g.scalar(out).as_f64())
}

/// Graph form of [`discriminator_loss`].
pub fn discriminator_loss_var<T: Scalar>(
    g: &mut Graph<'_, T>,
    disc: &TcDiscriminator,
    dp: &Bound,
    c: Var,
    s: Var,
    s_shuffled: Var,
) -> Var {
    let marginal = 1 - JOINT;
    let joint_logits = disc.forward(g, dp, c, s);
    let joint_ls = g.log_softmax(joint_logits);
    let joint_term = g.slice_cols(joint_ls, JOINT, JOINT + 1);
    let joint_mean = g.mean(joint_term);
    let marg_logits = disc.forward(g, dp, c, s_shuffled);
    let marg_ls = g.log_softmax(marg_logits);
    let marg_term = g.slice_cols(marg_ls, marginal, marginal + 1);
    let marg_mean = g.mean(marg_term);
    let both = g.add(joint_mean, marg_mean);
    g.scale(both, -T::one())
}

/// Per-instance clamped log-odds `l_joint − l_marginal`, `B × 1`.
pub fn tc_estimate_var<T: Scalar>(g: &mut Graph<'_, T>, disc: &TcDiscriminator, dp: &Bound, c: Var, s: Var) -> Var {
    let logits = disc.forward(g, dp, c, s);
    let joint = g.slice_cols(logits, JOINT, JOINT + 1);
    let marginal = g.slice_cols(logits, 1 - JOINT, 2 - JOINT);
    let odds = g.sub(joint, marginal);
    let limit = T::lit(tc_limit());
    g.clamp(odds, -limit, limit)
}

/// Per-instance reconstruction NLL from decoder pre-activations, `B × 1`.
pub fn reconstruction_var<T: Scalar>(g: &mut Graph<'_, T>, kind: ViewKind, pre: Var, x: Var) -> Var {
    match kind {
        ViewKind::Image => {
            let bce = g.bce_with_logits(pre, x);
            g.row_sum(bce)
        }
        ViewKind::Vector => {
            let d = g.sub(pre, x);
            let sq = g.square(d);
            let total = g.row_sum(sq);
            g.scale(total, T::lit(0.5))
        }
    }
}

/// Graph handles of one stochastic forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub encoders: Vec<EncoderVars>,
    pub log_pi: Var,
    /// Relaxed one-hot code used for reconstruction.
    pub c: Var,
    pub s: Vec<Var>,
    /// Decoder pre-activations.
    pub recon_pre: Vec<Var>,
}

/// Encode, fuse, sample and decode every view.
pub fn forward_var<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &DpoeModel<T>,
    p: &Bound,
    views: &[Var],
    noise: &Noise<T>,
    mode: Mode,
) -> ForwardVars {
    let cfg = &model.config;
    let encoders: Vec<EncoderVars> = model
        .encoders
        .iter()
        .zip(views)
        .map(|(enc, &x)| enc.forward(g, p, &model.buffers, x, mode))
        .collect();
    let logits: Vec<Var> = encoders.iter().map(|e| e.expert_logits).collect();
    let log_pi = fuse_log_var(g, &logits, cfg.ablation.use_poe);
    let gumbel = g.constant(noise.gumbel.clone());
    let c = gumbel_softmax_var(g, log_pi, gumbel, cfg.tau);
    let mut s = Vec::with_capacity(views.len());
    let mut recon_pre = Vec::with_capacity(views.len());
    for (v, (e, dec)) in encoders.iter().zip(&model.decoders).enumerate() {
        let eps = g.constant(noise.gaussian[v].clone());
        let sv = reparam_var(g, e.mu, e.log_var, eps);
        let z = g.concat(&[c, sv]);
        recon_pre.push(dec.forward(g, p, z));
        s.push(sv);
    }
    ForwardVars {
        encoders,
        log_pi,
        c,
        s,
        recon_pre,
    }
}

/// Graph handles of the joint objective; every term is a `1 × 1` batch mean.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub total: Var,
    pub recon: Vec<Var>,
    pub kl_s: Vec<Var>,
    pub kl_s_capped: Vec<Var>,
    pub kl_c: Var,
    pub kl_c_capped: Var,
    pub tc: Vec<Var>,
    pub forward: ForwardVars,
}

/// Build the joint objective. `dp` binds the discriminator parameters; it
/// is only read when the TC term is enabled and should be bound as
/// constants so no gradient reaches the discriminator.
pub fn dpoe_loss_var<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &DpoeModel<T>,
    p: &Bound,
    dp: Option<&Bound>,
    views: &[Var],
    noise: &Noise<T>,
    mode: Mode,
) -> LossVars {
    let caps = model.capacities.effective(&model.config.ablation);
    dpoe_loss_var_with_caps(g, model, p, dp, views, noise, mode, &caps)
}

/// [`dpoe_loss_var`] with explicit capacity anchors.
#[allow(clippy::too_many_arguments)]
pub fn dpoe_loss_var_with_caps<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &DpoeModel<T>,
    p: &Bound,
    dp: Option<&Bound>,
    views: &[Var],
    noise: &Noise<T>,
    mode: Mode,
    caps: &Capacities,
) -> LossVars {
    let cfg = &model.config;
    let fwd = forward_var(g, model, p, views, noise, mode);
    let lambda = T::lit(cfg.lambda);
    let m = cfg.num_views();

    let kl_c_rows = kl_categorical_var(g, fwd.log_pi);
    let kl_c_capped_rows = capped_kl_var(g, kl_c_rows, caps.c_common);
    let kl_c = g.mean(kl_c_rows);
    let kl_c_capped = g.mean(kl_c_capped_rows);
    let common = T::lit(cfg.lambda * common_weight(cfg) * m as f64);
    let mut per_instance = g.scale(kl_c_capped_rows, common);

    let mut recon = Vec::with_capacity(m);
    let mut kl_s = Vec::with_capacity(m);
    let mut kl_s_capped = Vec::with_capacity(m);
    let mut tc = Vec::new();
    for (v, e) in fwd.encoders.iter().enumerate() {
        let r = reconstruction_var(g, cfg.views[v].kind, fwd.recon_pre[v], views[v]);
        let k = kl_gaussian_var(g, e.mu, e.log_var);
        let kc = capped_kl_var(g, k, caps.c_specific[v]);
        let weighted = g.scale(kc, lambda);
        per_instance = g.add(per_instance, r);
        per_instance = g.add(per_instance, weighted);
        recon.push(g.mean(r));
        kl_s.push(g.mean(k));
        kl_s_capped.push(g.mean(kc));
        if cfg.ablation.use_tc {
            let dp = dp.expect("discriminator parameters are bound when the TC term is on");
            let t = tc_estimate_var(g, &model.discriminators[v], dp, fwd.c, fwd.s[v]);
            let weighted = g.scale(t, T::lit(cfg.gamma));
            per_instance = g.add(per_instance, weighted);
            tc.push(g.mean(t));
        }
    }
    let total = g.mean(per_instance);
    LossVars {
        total,
        recon,
        kl_s,
        kl_s_capped,
        kl_c,
        kl_c_capped,
        tc,
        forward: fwd,
    }
}

impl LossBreakdown {
    pub fn from_graph<T: Scalar>(g: &Graph<'_, T>, vars: &LossVars) -> Self {
        let read = |vs: &[Var]| vs.iter().map(|&v| g.scalar(v).as_f64()).collect::<Vec<_>>();
        Self {
            recon: read(&vars.recon),
            kl_s: read(&vars.kl_s),
            kl_s_capped: read(&vars.kl_s_capped),
            kl_c: g.scalar(vars.kl_c).as_f64(),
            kl_c_capped: g.scalar(vars.kl_c_capped).as_f64(),
            tc: read(&vars.tc),
            total: g.scalar(vars.total).as_f64(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.kl_c.is_finite()
            && self
                .recon
                .iter()
                .chain(&self.kl_s)
                .chain(&self.kl_s_capped)
                .chain(&self.tc)
                .all(|v| v.is_finite())
    }
}

/// Evaluate the joint objective and its breakdown without gradients.
pub fn evaluate_loss<T: Scalar>(
    model: &DpoeModel<T>,
    views: &[ArrayView2<'_, T>],
    noise: &Noise<T>,
    mode: Mode,
) -> Result<LossBreakdown> {
    model.check_views(views)?;
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let dp = model.disc_params.bind(&mut g, false);
    let vars: Vec<Var> = views.iter().map(|x| g.constant_view(x.reborrow())).collect();
    let out = dpoe_loss_var(&mut g, model, &p, Some(&dp), &vars, noise, mode);
    Ok(LossBreakdown::from_graph(&g, &out))
}
