//! Stochastic inference: Gaussian reparameterization, Gumbel-Softmax,
//! Product-of-Experts fusion and the KL terms with their capped forms.
//!
//! Each operation exists twice: as a plain array function (used for scoring
//! and as a test oracle) and as a graph builder (`*_var`) used in training.
//! Noise is always an explicit argument.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::autodiff::{softmax_rows, Graph, Var};
use crate::error::{DpoeError, Result};
use crate::model::{DpoeModel, Noise};
use crate::networks::{encode_view, Mode};
use crate::scalar::Scalar;

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// `s = μ + ε · exp(½ log σ²)`.
pub fn gaussian_reparam<T: Scalar>(
    mu: ArrayView2<'_, T>,
    log_var: ArrayView2<'_, T>,
    noise: ArrayView2<'_, T>,
) -> Array2<T> {
    let half = T::lit(0.5);
    Zip::from(mu)
        .and(log_var)
        .and(noise)
        .map_collect(|&m, &lv, &e| m + e * (half * lv).exp())
}

/// `½ Σ_i (μ_i² + σ_i² − log σ_i² − 1)` per row.
pub fn kl_gaussian<T: Scalar>(mu: ArrayView2<'_, T>, log_var: ArrayView2<'_, T>) -> Array1<T> {
    let half = T::lit(0.5);
    let terms = Zip::from(mu)
        .and(log_var)
        .map_collect(|&m, &lv| m * m + lv.exp() - lv - T::one());
    terms.sum_axis(Axis(1)).mapv(|v| half * v)
}

/// `Σ_k q_k ln(q_k K)`: KL from each row of `q` to the uniform categorical.
pub fn kl_categorical_uniform<T: Scalar>(q: ArrayView2<'_, T>) -> Result<Array1<T>> {
    let k = T::from_usize(q.ncols()).expect("K");
    let floor = T::lit(PROB_FLOOR);
    let mut out = Array1::zeros(q.nrows());
    for (i, row) in q.outer_iter().enumerate() {
        let total = row.sum();
        if (total - T::one()).abs() > T::lit(1e-4) {
            return Err(DpoeError::Input(format!("row {i} of q sums to {total}, not 1")));
        }
        out[i] = row.iter().map(|&p| p * (p.max(floor) * k).ln()).sum();
    }
    Ok(out)
}

/// `|kl − C|` per instance.
pub fn capped_kl<T: Scalar>(kl: ArrayView1<'_, T>, capacity: f64) -> Array1<T> {
    let c = T::lit(capacity);
    kl.mapv(|v| (v - c).abs())
}

/// Row-wise softmax of expert logits.
pub fn expert_probs<T: Scalar>(expert_logits: ArrayView2<'_, T>) -> Array2<T> {
    softmax_rows(expert_logits)
}

fn check_experts<T: Scalar>(experts: &[ArrayView2<'_, T>]) -> Result<(usize, usize)> {
    let first = experts
        .first()
        .ok_or_else(|| DpoeError::Input("fusion needs at least one expert".into()))?;
    let dim = first.dim();
    if experts.iter().any(|e| e.dim() != dim) {
        return Err(DpoeError::Shape("experts disagree in shape".into()));
    }
    Ok(dim)
}

/// Product of Experts: `π_k ∝ Π_v q_{v,k}`, evaluated as a normalized sum of
/// clamped logs.
pub fn poe_combine<T: Scalar>(experts: &[ArrayView2<'_, T>]) -> Result<Array2<T>> {
    let dim = check_experts(experts)?;
    let floor = T::lit(PROB_FLOOR);
    let mut log_sum = Array2::<T>::zeros(dim);
    for e in experts {
        Zip::from(&mut log_sum).and(e).for_each(|acc, &p| *acc += p.max(floor).ln());
    }
    Ok(softmax_rows(log_sum.view()))
}

/// Arithmetic mean of the experts, the fusion used when PoE is ablated.
pub fn mean_combine<T: Scalar>(experts: &[ArrayView2<'_, T>]) -> Result<Array2<T>> {
    let dim = check_experts(experts)?;
    let mut acc = Array2::<T>::zeros(dim);
    for e in experts {
        acc += e;
    }
    let m = T::from_usize(experts.len()).expect("m");
    Ok(acc.mapv(|v| v / m))
}

/// Joint cluster probabilities under the configured fusion rule.
pub fn fuse<T: Scalar>(experts: &[ArrayView2<'_, T>], use_poe: bool) -> Result<Array2<T>> {
    if use_poe {
        poe_combine(experts)
    } else {
        mean_combine(experts)
    }
}

/// `c = softmax((logits + g) / τ)` row-wise.
pub fn gumbel_softmax<T: Scalar>(
    logits: ArrayView2<'_, T>,
    tau: f64,
    gumbel_noise: ArrayView2<'_, T>,
) -> Result<Array2<T>> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(DpoeError::Input(format!("Gumbel temperature must be positive, got {tau}")));
    }
    let inv = T::lit(1.0 / tau);
    let perturbed = Zip::from(logits)
        .and(gumbel_noise)
        .map_collect(|&l, &g| (l + g) * inv);
    Ok(softmax_rows(perturbed.view()))
}

/// `ln π` floored at `ln 1e-12`, the Gumbel logits.
pub fn clamped_log<T: Scalar>(pi: ArrayView2<'_, T>) -> Array2<T> {
    let floor = T::lit(PROB_FLOOR);
    pi.mapv(|p| p.max(floor).ln())
}

pub fn reparam_var<T: Scalar>(g: &mut Graph<'_, T>, mu: Var, log_var: Var, noise: Var) -> Var {
    let half = g.scale(log_var, T::lit(0.5));
    let sigma = g.exp(half);
    let spread = g.mul(noise, sigma);
    g.add(mu, spread)
}

/// Per-row Gaussian KL, `B × 1`.
pub fn kl_gaussian_var<T: Scalar>(g: &mut Graph<'_, T>, mu: Var, log_var: Var) -> Var {
    let mu2 = g.square(mu);
    let var = g.exp(log_var);
    let a = g.add(mu2, var);
    let b = g.sub(a, log_var);
    let c = g.offset(b, -T::one());
    let total = g.row_sum(c);
    g.scale(total, T::lit(0.5))
}

/// Per-row KL to the uniform categorical from log-probabilities, `B × 1`.
pub fn kl_categorical_var<T: Scalar>(g: &mut Graph<'_, T>, log_q: Var) -> Var {
    let k = g.shape(log_q).1;
    let q = g.exp(log_q);
    let shifted = g.offset(log_q, T::lit((k as f64).ln()));
    let terms = g.mul(q, shifted);
    g.row_sum(terms)
}

pub fn capped_kl_var<T: Scalar>(g: &mut Graph<'_, T>, kl: Var, capacity: f64) -> Var {
    let d = g.offset(kl, T::lit(-capacity));
    g.abs(d)
}

/// Joint log-probabilities `ln π` from per-view expert logits.
pub fn fuse_log_var<T: Scalar>(g: &mut Graph<'_, T>, expert_logits: &[Var], use_poe: bool) -> Var {
    let floor = T::lit(PROB_FLOOR);
    if use_poe {
        let lo = floor.ln();
        let mut acc: Option<Var> = None;
        for &l in expert_logits {
            let lq = g.log_softmax(l);
            let lq = g.clamp(lq, lo, T::max_value());
            acc = Some(match acc {
                None => lq,
                Some(a) => g.add(a, lq),
            });
        }
        g.log_softmax(acc.expect("at least one expert"))
    } else {
        let mut acc: Option<Var> = None;
        for &l in expert_logits {
            let q = g.softmax(l);
            acc = Some(match acc {
                None => q,
                Some(a) => g.add(a, q),
            });
        }
        let m = T::from_usize(expert_logits.len()).expect("m");
        let mean = g.scale(acc.expect("at least one expert"), T::one() / m);
        let mean = g.clamp(mean, floor, T::max_value());
        g.ln(mean)
    }
}

/// Relaxed one-hot sample from `ln π` (floored) and Gumbel noise.
pub fn gumbel_softmax_var<T: Scalar>(g: &mut Graph<'_, T>, log_pi: Var, noise: Var, tau: f64) -> Var {
    let logits = g.clamp(log_pi, T::lit(PROB_FLOOR).ln(), T::max_value());
    let perturbed = g.add(logits, noise);
    let scaled = g.scale(perturbed, T::lit(1.0 / tau));
    g.softmax(scaled)
}

/// Inference results for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState<T> {
    pub mu: Vec<Array2<T>>,
    pub sigma: Vec<Array2<T>>,
    pub log_var: Vec<Array2<T>>,
    pub s: Vec<Array2<T>>,
    pub expert_probs: Vec<Array2<T>>,
    pub pi: Array2<T>,
    pub c: Array2<T>,
}

/// Encode every view, fuse the experts and draw `(c, s)` with explicit noise.
pub fn infer_with_noise<T: Scalar>(
    model: &DpoeModel<T>,
    views: &[ArrayView2<'_, T>],
    noise: &Noise<T>,
    mode: Mode,
) -> Result<LatentState<T>> {
    let n = model.check_views(views)?;
    if noise.gumbel.dim() != (n, model.clusters())
        || noise.gaussian.len() != views.len()
        || noise
            .gaussian
            .iter()
            .enumerate()
            .any(|(v, e)| e.dim() != (n, model.config.latent_dim(v)))
    {
        return Err(DpoeError::Shape("noise does not match the batch".into()));
    }
    let mut state = LatentState {
        mu: Vec::new(),
        sigma: Vec::new(),
        log_var: Vec::new(),
        s: Vec::new(),
        expert_probs: Vec::new(),
        pi: Array2::zeros((0, 0)),
        c: Array2::zeros((0, 0)),
    };
    for (v, (enc, x)) in model.encoders.iter().zip(views).enumerate() {
        let out = encode_view(enc, &model.params, &model.buffers, x.view(), mode)?;
        state.s.push(gaussian_reparam(out.mu.view(), out.log_var.view(), noise.gaussian[v].view()));
        state.sigma.push(out.log_var.mapv(|lv| (T::lit(0.5) * lv).exp()));
        state.expert_probs.push(expert_probs(out.expert_logits.view()));
        state.mu.push(out.mu);
        state.log_var.push(out.log_var);
    }
    let experts: Vec<_> = state.expert_probs.iter().map(|e| e.view()).collect();
    state.pi = fuse(&experts, model.config.ablation.use_poe)?;
    state.c = gumbel_softmax(clamped_log(state.pi.view()).view(), model.config.tau, noise.gumbel.view())?;
    Ok(state)
}

/// [`infer_with_noise`] with noise drawn from `rng`, using the running
/// normalization statistics.
pub fn infer<T: Scalar, R: Rng>(
    model: &DpoeModel<T>,
    views: &[ArrayView2<'_, T>],
    rng: &mut R,
) -> Result<LatentState<T>> {
    let n = model.check_views(views)?;
    let noise = Noise::sample(model, n, rng);
    infer_with_noise(model, views, &noise, Mode::Eval)
}

#[cfg(test)]
mod tests {
    use ndarray::{array, Array2};
    use proptest::{prop_assert, proptest};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Gumbel, StandardNormal};

    use super::*;
    use crate::autodiff::testing::{check, matrix};
    use crate::config::{ModelConfig, ViewSpec};

    const EXACT: f64 = 1e-9;

    #[test]
    fn reparam_limits() {
        let mu = array![[0.3, -1.2]];
        let lv = array![[0.4, -2.0]];
        let s = gaussian_reparam(mu.view(), lv.view(), Array2::zeros((1, 2)).view());
        assert_eq!(s, mu);
        let eps = array![[0.7, -0.1]];
        let s = gaussian_reparam(Array2::zeros((1, 2)).view(), Array2::zeros((1, 2)).view(), eps.view());
        assert_eq!(s, eps);
    }

    #[test]
    fn reparam_matches_target_moments() {
        let n = 100_000;
        let (mu, lv) = (1.5_f64, -0.6_f64);
        let sigma = (0.5 * lv).exp();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let eps = Array2::from_shape_simple_fn((n, 1), || StandardNormal.sample(&mut rng));
        let s = gaussian_reparam(
            Array2::from_elem((n, 1), mu).view(),
            Array2::from_elem((n, 1), lv).view(),
            eps.view(),
        );
        let mean = s.mean().unwrap();
        let std = s.std(1.0);
        let se_mean = sigma / (n as f64).sqrt();
        let se_std = sigma / (2.0 * (n as f64 - 1.0)).sqrt();
        assert!((mean - mu).abs() < 3.0 * se_mean, "{mean}");
        assert!((std - sigma).abs() < 3.0 * se_std, "{std}");
    }

    #[test]
    fn gaussian_kl_closed_forms() {
        let zero = Array2::<f64>::zeros((1, 10));
        assert!(kl_gaussian(zero.view(), zero.view())[0].abs() < EXACT);
        let ones = Array2::<f64>::ones((1, 10));
        assert!((kl_gaussian(ones.view(), zero.view())[0] - 5.0).abs() < EXACT);
    }

    #[test]
    fn gaussian_kl_attains_half_dim_for_unit_normal_means() {
        let (n, d) = (100_000, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mu = Array2::<f64>::from_shape_simple_fn((n, d), || StandardNormal.sample(&mut rng));
        let kl = kl_gaussian(mu.view(), Array2::zeros((n, d)).view());
        let mean = kl.mean().unwrap();
        assert!((mean - d as f64 / 2.0).abs() < 0.02 * d as f64 / 2.0, "{mean}");
    }

    #[test]
    fn categorical_kl_closed_forms() {
        let uniform = Array2::<f64>::from_elem((1, 10), 0.1);
        assert!(kl_categorical_uniform(uniform.view()).unwrap()[0].abs() < EXACT);
        let mut one_hot = Array2::<f64>::zeros((1, 10));
        one_hot[[0, 3]] = 1.0;
        let kl = kl_categorical_uniform(one_hot.view()).unwrap()[0];
        assert!((kl - 10f64.ln()).abs() < EXACT);
        assert!(kl_categorical_uniform(array![[0.5, 0.4]].view()).is_err());
    }

    #[test]
    fn categorical_kl_is_bounded_by_ln_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for k in [2usize, 3, 10, 50] {
            let raw = Array2::<f64>::from_shape_simple_fn((2_500, k), || {
                let e: f64 = rand_distr::Exp1.sample(&mut rng);
                // Occasionally sharpen to reach the vertices.
                if rng.random_bool(0.2) { e.powi(8) } else { e }
            });
            let q = &raw / &raw.sum_axis(Axis(1)).insert_axis(Axis(1));
            let kl = kl_categorical_uniform(q.view()).unwrap();
            let bound = (k as f64).ln() + 1e-9;
            assert!(kl.iter().all(|&v| v <= bound && v >= -1e-12));
        }
    }

    #[test]
    fn capped_kl_is_distance_to_capacity() {
        let kl = array![5.0, 0.0, 7.0];
        let out = capped_kl(kl.view(), 5.0);
        assert_eq!(out, array![0.0, 5.0, 2.0]);
        let out = capped_kl(array![0.0f64].view(), 10f64.ln());
        assert!((out[0] - std::f64::consts::LN_10).abs() < EXACT);
    }

    #[test]
    fn expert_probs_closed_forms() {
        let p = expert_probs(array![[4f64.ln(), 0.0], [1.0, 1.0]].view());
        assert!((p[[0, 0]] - 0.8).abs() < EXACT && (p[[0, 1]] - 0.2).abs() < EXACT);
        assert!((p[[1, 0]] - 0.5).abs() < EXACT);
        let shifted = expert_probs(array![[4f64.ln() + 7.0, 7.0]].view());
        assert!((shifted[[0, 0]] - 0.8).abs() < EXACT);
    }

    #[test]
    fn poe_closed_forms() {
        let a = array![[0.8f64, 0.2], [0.5, 0.5], [0.9, 0.1]];
        let b = array![[0.5, 0.5], [0.5, 0.5], [0.1, 0.9]];
        let pi = poe_combine(&[a.view(), b.view()]).unwrap();
        let expected = array![[0.8, 0.2], [0.5, 0.5], [0.5, 0.5]];
        assert!((&pi - &expected).iter().all(|d| d.abs() < EXACT));
        assert!(poe_combine::<f64>(&[]).is_err());
        let mean = mean_combine(&[a.view(), b.view()]).unwrap();
        assert!((mean[[0, 0]] - 0.65).abs() < EXACT);
    }

    #[test]
    fn poe_survives_underflowing_products() {
        let tiny = Array2::from_shape_fn((1, 3), |(_, k)| if k == 0 { 1e-200f64 } else { 0.5 });
        let experts: Vec<_> = (0..8).map(|_| tiny.view()).collect();
        let pi = poe_combine(&experts).unwrap();
        assert!((pi.sum() - 1.0).abs() < EXACT);
        assert!(pi[[0, 0]] < 1e-12);
    }

    fn simplex(rows: usize, k: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Array2::<f64>::from_shape_simple_fn((rows, k), || rand_distr::Exp1.sample(&mut rng));
        &raw / &raw.sum_axis(Axis(1)).insert_axis(Axis(1))
    }

    proptest! {
        #[test]
        fn poe_is_order_invariant(seed in 0u64..1000, m in 2usize..5, k in 2usize..8) {
            let experts: Vec<_> = (0..m).map(|v| simplex(4, k, seed * 31 + v as u64)).collect();
            let forward: Vec<_> = experts.iter().map(|e| e.view()).collect();
            let backward: Vec<_> = experts.iter().rev().map(|e| e.view()).collect();
            let a = poe_combine(&forward).unwrap();
            let b = poe_combine(&backward).unwrap();
            prop_assert!((&a - &b).iter().all(|d| d.abs() < 1e-12));
            prop_assert!(a.rows().into_iter().all(|r| (r.sum() - 1.0).abs() < 1e-9));
        }

        #[test]
        fn poe_of_one_expert_is_identity(seed in 0u64..1000, k in 2usize..8) {
            let e = simplex(5, k, seed).mapv(|p| p.max(1e-6));
            let e = &e / &e.sum_axis(Axis(1)).insert_axis(Axis(1));
            let pi = poe_combine(&[e.view()]).unwrap();
            prop_assert!((&pi - &e).iter().all(|d| d.abs() < 1e-12));
        }

        #[test]
        fn gumbel_rows_are_distributions(seed in 0u64..1000, tau in 0.05f64..5.0) {
            let logits = clamped_log(simplex(6, 5, seed).view());
            let noise = matrix(6, 5, seed).mapv(|v| 3.0 * v);
            let c = gumbel_softmax(logits.view(), tau, noise.view()).unwrap();
            prop_assert!(c.rows().into_iter().all(|r| (r.sum() - 1.0).abs() < 1e-6));
        }
    }

    #[test]
    fn gumbel_reduces_to_softmax_without_noise() {
        let logits = array![[0.3f64, -1.0, 2.0]];
        let c = gumbel_softmax(logits.view(), 1.0, Array2::zeros((1, 3)).view()).unwrap();
        assert!((&c - &expert_probs(logits.view())).iter().all(|d| d.abs() < EXACT));
        assert!(gumbel_softmax(logits.view(), 0.0, Array2::zeros((1, 3)).view()).is_err());
    }

    #[test]
    fn cold_gumbel_concentrates_on_the_dominant_logit() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let gumbel = Gumbel::new(0.0, 1.0).unwrap();
        let n = 1000;
        let logits = Array2::from_shape_fn((n, 3), |(_, k)| if k == 0 { 10.0 } else { 0.0 });
        let noise = Array2::<f64>::from_shape_simple_fn((n, 3), || gumbel.sample(&mut rng));
        let c = gumbel_softmax(logits.view(), 0.01, noise.view()).unwrap();
        let hits = c.rows().into_iter().filter(|r| r[0] > 0.99).count();
        assert!(hits >= 990, "{hits}");
    }

    fn run<F>(inputs: &[Array2<f64>], f: F) -> Array2<f64>
    where
        F: for<'g> Fn(&mut Graph<'g, f64>, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).to_owned()
    }

    #[test]
    fn graph_builders_agree_with_array_ops() {
        let mu = matrix(4, 3, 1);
        let lv = matrix(4, 3, 2);
        let eps = matrix(4, 3, 3);
        let s = run(&[mu.clone(), lv.clone(), eps.clone()], |g, v| reparam_var(g, v[0], v[1], v[2]));
        assert!((&s - &gaussian_reparam(mu.view(), lv.view(), eps.view())).iter().all(|d| d.abs() < EXACT));
        let kl = run(&[mu.clone(), lv.clone()], |g, v| kl_gaussian_var(g, v[0], v[1]));
        let expected = kl_gaussian(mu.view(), lv.view());
        assert!(kl.column(0).iter().zip(&expected).all(|(a, b)| (a - b).abs() < EXACT));

        let logits = [matrix(4, 5, 4).mapv(|v| 4.0 * v), matrix(4, 5, 5).mapv(|v| 4.0 * v)];
        for use_poe in [true, false] {
            let log_pi = run(&logits, |g, v| fuse_log_var(g, v, use_poe));
            let experts: Vec<_> = logits.iter().map(|l| expert_probs(l.view())).collect();
            let views: Vec<_> = experts.iter().map(|e| e.view()).collect();
            let pi = fuse(&views, use_poe).unwrap();
            assert!((&log_pi.mapv(f64::exp) - &pi).iter().all(|d| d.abs() < 1e-12));
            let klc = run(std::slice::from_ref(&log_pi), |g, v| kl_categorical_var(g, v[0]));
            let expected = kl_categorical_uniform(pi.view()).unwrap();
            assert!(klc.column(0).iter().zip(&expected).all(|(a, b)| (a - b).abs() < 1e-9));
            let gn = matrix(4, 5, 6);
            let c = run(&[log_pi, gn.clone()], |g, v| gumbel_softmax_var(g, v[0], v[1], 0.5));
            let expected = gumbel_softmax(clamped_log(pi.view()).view(), 0.5, gn.view()).unwrap();
            assert!((&c - &expected).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn graph_builders_match_finite_differences() {
        let mu = matrix(3, 2, 7);
        let lv = matrix(3, 2, 8);
        let eps = matrix(3, 2, 9);
        let l1 = matrix(3, 4, 10).mapv(|v| 2.0 * v);
        let l2 = matrix(3, 4, 11).mapv(|v| 2.0 * v);
        let gn = matrix(3, 4, 12);
        let wts = matrix(3, 4, 13);
        for use_poe in [true, false] {
            let err = check(&[mu.clone(), lv.clone(), eps.clone(), l1.clone(), l2.clone(), gn.clone(), wts.clone()], |g, v| {
                let s = reparam_var(g, v[0], v[1], v[2]);
                let kl = kl_gaussian_var(g, v[0], v[1]);
                let kl = capped_kl_var(g, kl, 0.3);
                let log_pi = fuse_log_var(g, &[v[3], v[4]], use_poe);
                let klc = kl_categorical_var(g, log_pi);
                let c = gumbel_softmax_var(g, log_pi, v[5], 0.7);
                let cw = g.mul(c, v[6]);
                let parts = g.concat(&[s, kl, klc, cw]);
                let sq = g.square(parts);
                g.sum(sq)
            });
            assert!(err < 1e-6, "{use_poe}: {err}");
        }
    }

    fn tiny_model() -> DpoeModel<f64> {
        let mut cfg = ModelConfig::new(vec![ViewSpec::vector("a", 4), ViewSpec::vector("b", 3)], 3);
        cfg.latent_dims = vec![2];
        cfg.architecture.hidden_width = 8;
        cfg.architecture.disc_mapping_width = 4;
        cfg.architecture.disc_score_width = 4;
        DpoeModel::new(&cfg).unwrap()
    }

    #[test]
    fn infer_satisfies_state_invariants_and_is_seeded() {
        let model = tiny_model();
        let a = matrix(6, 4, 30);
        let b = matrix(6, 3, 31);
        let views = [a.view(), b.view()];
        let state = infer(&model, &views, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let again = infer(&model, &views, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(state, again);
        let rows_ok = |x: &Array2<f64>| x.rows().into_iter().all(|r| (r.sum() - 1.0).abs() < 1e-6);
        assert!(state.expert_probs.iter().all(rows_ok));
        assert!(rows_ok(&state.pi) && rows_ok(&state.c));
        assert!(state.pi.iter().all(|&p| p > 0.0 && p < 1.0));
        assert!(state.sigma.iter().all(|s| s.iter().all(|&v| v > 0.0)));
        assert_eq!(state.s[0].dim(), (6, 2));
        assert!(infer(&model, &[a.view()], &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn agreeing_one_hot_experts_give_one_hot_codes() {
        let one_hot = Array2::from_shape_fn((2, 3), |(_, k)| if k == 0 { 1.0f64 } else { 0.0 });
        let pi = poe_combine(&[one_hot.view(), one_hot.view()]).unwrap();
        assert!((pi[[0, 0]] - 1.0).abs() < 1e-12);
        let c = gumbel_softmax(clamped_log(pi.view()).view(), 0.05, matrix(2, 3, 40).view()).unwrap();
        assert!(c.column(0).iter().all(|&v| v > 0.999));
    }
}
