//! Alternating optimization of the model and the TC discriminators, and
//! per-epoch telemetry.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::{save_checkpoint, CheckpointBundle, TrainingMetadata};
use crate::config::ModelConfig;
use crate::data::MultiViewDataset;
use crate::error::{DpoeError, Result};
use crate::loss::{derangement, discriminator_loss_var, dpoe_loss_var_with_caps, permute_rows, LossBreakdown};
use crate::model::{DpoeModel, Noise};
use crate::networks::Mode;
use crate::params::{clip_global_norm, Adam};
use crate::scalar::Scalar;

/// Stream of the training generator; stream 0 is used for initialization.
const TRAIN_STREAM: u64 = 1;

/// Outcome of one alternating step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: LossBreakdown,
    /// `None` when the TC term is off or the batch has a single row.
    pub disc_loss: Option<f64>,
    pub grad_norm: f64,
    pub disc_grad_norm: Option<f64>,
    /// Number of the two updates whose gradients were clipped.
    pub clipped: usize,
}

/// One telemetry row, averaged over the batches of an epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochTelemetry {
    pub epoch: usize,
    pub recon: f64,
    pub kl_s: f64,
    pub kl_c: f64,
    pub tc: f64,
    pub disc_loss: f64,
    pub wall_time: f64,
    pub total: f64,
    pub clipped: usize,
}

pub struct TrainState<T: Scalar> {
    pub model: DpoeModel<T>,
    pub model_opt: Adam<T>,
    pub disc_opt: Adam<T>,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub step: usize,
    pub history: Vec<EpochTelemetry>,
    /// Fraction of the capacity anchors in force, ramped by [`run_epoch`].
    pub capacity_scale: f64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: DpoeModel<T>) -> Self {
        let lr = model.config.learning_rate;
        let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
        rng.set_stream(TRAIN_STREAM);
        Self {
            model_opt: Adam::new(&model.params, lr),
            disc_opt: Adam::new(&model.disc_params, lr),
            model,
            rng,
            epoch: 0,
            step: 0,
            history: Vec::new(),
            capacity_scale: 1.0,
        }
    }

    pub fn from_config(cfg: &ModelConfig) -> Result<Self> {
        Ok(Self::new(DpoeModel::new(cfg)?))
    }

    pub fn metadata(&self) -> TrainingMetadata {
        TrainingMetadata {
            epochs_completed: self.epoch,
            steps: self.step,
            final_loss: self.history.last().map(|h| h.total),
        }
    }

    pub fn checkpoint(&self) -> CheckpointBundle<T> {
        CheckpointBundle::from_model(&self.model, self.metadata())
    }

    fn non_finite(&self, what: &str, detail: String) -> DpoeError {
        DpoeError::NonFinite {
            epoch: self.epoch,
            step: self.step,
            snapshot: format!("{what}: {detail}"),
        }
    }
}

/// One model update on the joint loss followed by one discriminator update,
/// each with the other's parameters frozen.
pub fn train_step<T: Scalar>(state: &mut TrainState<T>, batch: &[ArrayView2<'_, T>]) -> Result<StepReport> {
    let n = state.model.check_views(batch)?;
    let use_tc = state.model.config.ablation.use_tc;
    let clip = state.model.config.grad_clip;
    let noise = Noise::sample(&state.model, n, &mut state.rng);
    let caps = state
        .model
        .capacities
        .effective(&state.model.config.ablation)
        .scaled(state.capacity_scale);

    let (loss, mut grads, codes, mu_raw) = {
        let model = &state.model;
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, true);
        let dp = use_tc.then(|| model.disc_params.bind(&mut g, false));
        let views: Vec<Var> = batch.iter().map(|x| g.constant_view(x.reborrow())).collect();
        let out = dpoe_loss_var_with_caps(&mut g, model, &p, dp.as_ref(), &views, &noise, Mode::Train, &caps);
        let loss = LossBreakdown::from_graph(&g, &out);
        let mut gr = g.backward(out.total);
        let grads = p.gradients(&mut gr, &model.params);
        let c = g.value(out.forward.c).to_owned();
        let s: Vec<Array2<T>> = out.forward.s.iter().map(|&v| g.value(v).to_owned()).collect();
        let mu_raw: Vec<Array2<T>> = out.forward.encoders.iter().map(|e| g.value(e.mu_raw).to_owned()).collect();
        (loss, grads, (c, s), mu_raw)
    };
    if !loss.is_finite() {
        return Err(state.non_finite("loss", serde_json::to_string(&loss)?));
    }
    let grad_norm = clip_global_norm(&mut grads, clip);
    if !grad_norm.is_finite() {
        return Err(state.non_finite("model gradient", format!("norm {grad_norm}")));
    }
    let mut clipped = usize::from(grad_norm > clip);
    state.model_opt.step(&mut state.model.params, &grads);
    for (enc, mu) in state.model.encoders.iter().zip(&mu_raw) {
        enc.update_running_stats(&mut state.model.buffers, mu.view());
    }

    let (mut disc_loss, mut disc_grad_norm) = (None, None);
    if use_tc && n >= 2 {
        let (c, s) = codes;
        let perm = derangement(n, &mut state.rng);
        let shuffled: Vec<Array2<T>> = s.iter().map(|x| permute_rows(x.view(), &perm)).collect();
        let (value, mut grads) = {
            let model = &state.model;
            let mut g = Graph::new();
            let dp = model.disc_params.bind(&mut g, true);
            let cv = g.constant_view(c.view());
            let mut total: Option<Var> = None;
            for (v, disc) in model.discriminators.iter().enumerate() {
                let sv = g.constant_view(s[v].view());
                let shv = g.constant_view(shuffled[v].view());
                let l = discriminator_loss_var(&mut g, disc, &dp, cv, sv, shv);
                total = Some(match total {
                    None => l,
                    Some(t) => g.add(t, l),
                });
            }
            let total = total.expect("at least two views");
            let value = g.scalar(total).as_f64();
            let mut gr = g.backward(total);
            (value, dp.gradients(&mut gr, &model.disc_params))
        };
        if !value.is_finite() {
            return Err(state.non_finite("discriminator loss", value.to_string()));
        }
        let norm = clip_global_norm(&mut grads, clip);
        clipped += usize::from(norm > clip);
        state.disc_opt.step(&mut state.model.disc_params, &grads);
        disc_loss = Some(value / state.model.num_views() as f64);
        disc_grad_norm = Some(norm);
    }
    if !state.model.all_finite() {
        return Err(state.non_finite("parameters", serde_json::to_string(&loss)?));
    }
    state.step += 1;
    Ok(StepReport {
        loss,
        disc_loss,
        grad_norm,
        disc_grad_norm,
        clipped,
    })
}

/// Where [`fit_with`] writes its side outputs.
#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Append-only CSV, one row per epoch.
    pub telemetry: Option<PathBuf>,
    /// Final checkpoint.
    pub checkpoint: Option<PathBuf>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

const TELEMETRY_HEADER: &str = "epoch,recon,kl_s,kl_c,tc,disc_loss,wall_time,total,clipped";

fn append_telemetry(path: &Path, row: &EpochTelemetry) -> Result<()> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{TELEMETRY_HEADER}")?;
    }
    writeln!(
        f,
        "{},{},{},{},{},{},{:.3},{},{}",
        row.epoch, row.recon, row.kl_s, row.kl_c, row.tc, row.disc_loss, row.wall_time, row.total, row.clipped
    )?;
    Ok(())
}

/// Run one epoch over a fresh shuffle of `data`.
pub fn run_epoch<T: Scalar>(state: &mut TrainState<T>, data: &MultiViewDataset<T>, started: Instant) -> Result<EpochTelemetry> {
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut state.rng);
    let bs = state.model.config.batch_size;
    let mut acc = EpochTelemetry::default();
    let (mut batches, mut disc_batches) = (0usize, 0usize);
    let per_epoch = n.div_ceil(bs.max(1)).max(1);
    let warmup = state.model.config.capacity_warmup_epochs;
    for (b, chunk) in order.chunks(bs).enumerate() {
        state.capacity_scale = if warmup > 0.0 {
            ((state.epoch as f64 + b as f64 / per_epoch as f64) / warmup).min(1.0)
        } else {
            1.0
        };
        let batch = data.batch(chunk);
        let views: Vec<ArrayView2<'_, T>> = batch.iter().map(|b| b.view()).collect();
        let r = train_step(state, &views)?;
        acc.recon += r.loss.recon.iter().sum::<f64>();
        acc.kl_s += r.loss.kl_s.iter().sum::<f64>();
        acc.kl_c += r.loss.kl_c;
        acc.tc += r.loss.tc.iter().sum::<f64>();
        acc.total += r.loss.total;
        acc.clipped += r.clipped;
        if let Some(d) = r.disc_loss {
            acc.disc_loss += d;
            disc_batches += 1;
        }
        batches += 1;
    }
    let b = batches.max(1) as f64;
    state.epoch += 1;
    Ok(EpochTelemetry {
        epoch: state.epoch,
        recon: acc.recon / b,
        kl_s: acc.kl_s / b,
        kl_c: acc.kl_c / b,
        tc: acc.tc / b,
        disc_loss: acc.disc_loss / disc_batches.max(1) as f64,
        wall_time: started.elapsed().as_secs_f64(),
        total: acc.total / b,
        clipped: acc.clipped,
    })
}

/// Train for `cfg.epochs` epochs, recording telemetry and writing the
/// final checkpoint when asked.
pub fn fit_with<T: Scalar>(
    cfg: &ModelConfig,
    data: &MultiViewDataset<T>,
    options: &FitOptions,
) -> Result<(TrainState<T>, CheckpointBundle<T>)> {
    let mut state = TrainState::from_config(cfg)?;
    if data.specs != state.model.config.views {
        return Err(DpoeError::Data("dataset views do not match the configured views".into()));
    }
    if data.is_empty() && state.model.config.epochs > 0 {
        return Err(DpoeError::Data("cannot train on an empty dataset".into()));
    }
    let started = Instant::now();
    for _ in 0..state.model.config.epochs {
        let row = run_epoch(&mut state, data, started)?;
        if options.verbose {
            eprintln!(
                "epoch {:>4}  total {:>10.4}  recon {:>9.4}  kl_s {:>7.3}  kl_c {:>6.3}  tc {:>7.3}  disc {:>6.3}",
                row.epoch, row.total, row.recon, row.kl_s, row.kl_c, row.tc, row.disc_loss
            );
        }
        if let Some(path) = &options.telemetry {
            append_telemetry(path, &row)?;
        }
        state.history.push(row);
    }
    let bundle = state.checkpoint();
    if let Some(path) = &options.checkpoint {
        save_checkpoint(&bundle, path)?;
    }
    Ok((state, bundle))
}

pub fn fit<T: Scalar>(cfg: &ModelConfig, data: &MultiViewDataset<T>) -> Result<(TrainState<T>, CheckpointBundle<T>)> {
    fit_with(cfg, data, &FitOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ViewSpec;
    use crate::data::make_synthetic;
    use crate::loss::evaluate_loss;

    fn small_config(epochs: usize) -> ModelConfig {
        let mut cfg = ModelConfig::new(vec![ViewSpec::vector("v1", 6), ViewSpec::vector("v2", 6)], 3);
        cfg.latent_dims = vec![2];
        cfg.architecture.hidden_width = 16;
        cfg.architecture.disc_mapping_width = 8;
        cfg.architecture.disc_score_width = 8;
        cfg.batch_size = 16;
        cfg.epochs = epochs;
        cfg.learning_rate = 1e-3;
        cfg
    }

    fn small_data() -> MultiViewDataset<f32> {
        let mut d = make_synthetic(2, 3, 60, 6, 1);
        d.normalize();
        d
    }

    #[test]
    fn identical_seeds_give_identical_parameters() {
        let d = small_data();
        let (a, _) = fit(&small_config(2), &d).unwrap();
        let (b, _) = fit(&small_config(2), &d).unwrap();
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.model.disc_params, b.model.disc_params);
        assert_eq!(a.step, 2 * 60usize.div_ceil(16));
        assert_eq!(a.history.len(), 2);
    }

    #[test]
    fn disabled_tc_leaves_the_discriminator_alone() {
        let mut cfg = small_config(1);
        cfg.ablation.use_tc = false;
        let d = small_data();
        let initial = DpoeModel::<f32>::new(&cfg).unwrap().disc_params;
        let (state, _) = fit(&cfg, &d).unwrap();
        assert_eq!(state.model.disc_params, initial);
        assert!(state.history[0].tc == 0.0);
    }

    #[test]
    fn reconstruction_decreases_when_overfitting_one_batch() {
        let mut cfg = small_config(0);
        cfg.lambda = 0.0;
        cfg.gamma = 0.0;
        let d = small_data();
        let mut state = TrainState::<f32>::from_config(&cfg).unwrap();
        let batch = d.batch(&(0..16).collect::<Vec<_>>());
        let views: Vec<_> = batch.iter().map(|b| b.view()).collect();
        let zero = Noise::zeros(&state.model, 16);
        let recon = |s: &TrainState<f32>| -> f64 {
            evaluate_loss(&s.model, &views, &zero, Mode::Train).unwrap().recon.iter().sum()
        };
        let mut trace = vec![recon(&state)];
        for _ in 0..10 {
            for _ in 0..10 {
                train_step(&mut state, &views).unwrap();
            }
            trace.push(recon(&state));
        }
        assert!(trace.windows(2).all(|w| w[1] <= w[0]), "{trace:?}");
        assert!(trace[10] < 0.7 * trace[0], "{trace:?}");
    }

    #[test]
    fn zero_epochs_return_the_initial_model() {
        let d = small_data();
        let (state, bundle) = fit(&small_config(0), &d).unwrap();
        assert_eq!(state.step, 0);
        let model = bundle.into_model().unwrap();
        assert_eq!(model.params, state.model.params);
    }

    #[test]
    fn telemetry_has_one_row_per_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("telemetry.csv");
        let options = FitOptions {
            telemetry: Some(path.clone()),
            checkpoint: Some(dir.path().join("model.ckpt")),
            verbose: false,
        };
        fit_with(&small_config(3), &small_data(), &options).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], TELEMETRY_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(dir.path().join("model.ckpt").exists());
    }

    #[test]
    fn single_row_batches_skip_the_discriminator() {
        let d = small_data();
        let mut state = TrainState::<f32>::from_config(&small_config(0)).unwrap();
        let batch = d.batch(&[3]);
        let views: Vec<_> = batch.iter().map(|b| b.view()).collect();
        let before = state.model.disc_params.clone();
        let r = train_step(&mut state, &views).unwrap();
        assert!(r.disc_loss.is_none());
        assert_eq!(state.model.disc_params, before);
    }
}
