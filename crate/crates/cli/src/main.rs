use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dpoe::checkpoint::load_model;
use dpoe::data::{inject, load_dataset, make_synthetic, write_dataset, InjectionKind, MIX_TYPE_RATIO};
use dpoe::detect::{score_batch, serve_stdio, serve_tcp};
use dpoe::eval::{compute_auc, emit_report, run_experiment_with, ExperimentSpec};
use dpoe::train::{fit_with, FitOptions};
use dpoe::{Dataset, Model, ModelConfig};

/// Multi-view anomaly detection with a product-of-experts clustering VAE.
#[derive(Parser)]
#[command(name = "dpoe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view Gaussian-cluster dataset.
    Synth(SynthArgs),
    /// Inject anomalies into a dataset.
    Inject(InjectArgs),
    /// Train a model and write its checkpoint.
    Train(TrainArgs),
    /// Score every instance of a dataset.
    Score(ScoreArgs),
    /// Answer newline-delimited JSON scoring requests.
    Serve(ServeArgs),
    /// Run experiment specs and write a report.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 2)]
    views: usize,
    #[arg(long, default_value_t = 3)]
    clusters: usize,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 20)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InjectArgs {
    /// 1, 2, 3 or mix.
    #[arg(long = "type")]
    kind: InjectionKind,
    /// Anomalous share; per type for mix. Defaults to 0.1, or 0.05 per type for mix.
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Component to switch off (Cc, Cs, poe, tc); repeatable.
    #[arg(long)]
    ablate: Vec<String>,
    /// Per-epoch telemetry CSV; defaults to `<out>.telemetry.csv`.
    #[arg(long)]
    telemetry: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output CSV with columns instance_id, score, argmax_cluster.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, conflicts_with = "stdio", required_unless_present = "stdio")]
    port: Option<u16>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Read requests from stdin and answer on stdout.
    #[arg(long)]
    stdio: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth(a) => synth(a),
        Command::Inject(a) => run_inject(a),
        Command::Train(a) => train(a),
        Command::Score(a) => score(a),
        Command::Serve(a) => serve(a),
        Command::Eval(a) => eval(a),
    }
}

fn load(path: &Path) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut d: Dataset = make_synthetic(a.views, a.clusters, a.n, a.dim, a.seed);
    d.normalize();
    write_dataset(&d, &a.out)?;
    eprintln!("wrote {} instances to {}", d.len(), a.out.display());
    Ok(())
}

fn run_inject(a: InjectArgs) -> Result<()> {
    let ratio = a.ratio.unwrap_or(match a.kind {
        InjectionKind::Mix => MIX_TYPE_RATIO,
        _ => 0.1,
    });
    let clean = load(&a.data)?;
    let (dirty, report) = inject(&clean, a.kind, ratio, a.seed)?;
    write_dataset(&dirty, &a.out)?;
    std::fs::write(a.out.join("injection.json"), serde_json::to_string_pretty(&report)?)?;
    let c = report.counts;
    eprintln!(
        "injected {} anomalies (I {}, II {}, III {}) into {}",
        c.total(),
        c.type_i,
        c.type_ii,
        c.type_iii,
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = ModelConfig::from_path(&a.config)?;
    let data = load(&a.data)?;
    if cfg.views.is_empty() {
        cfg.views = data.specs.clone();
    } else if cfg.views != data.specs {
        bail!("config views do not match the dataset views");
    }
    for component in &a.ablate {
        cfg.ablation.disable(component)?;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let telemetry = a.telemetry.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".telemetry.csv");
        PathBuf::from(p)
    });
    let options = FitOptions {
        telemetry: Some(telemetry),
        checkpoint: Some(a.out.clone()),
        verbose: !a.quiet,
    };
    let (state, _) = fit_with(&cfg, &data, &options)?;
    eprintln!(
        "trained {} epochs ({} steps, {}); checkpoint {}",
        state.epoch,
        state.step,
        cfg.ablation.label(),
        a.out.display()
    );
    Ok(())
}

fn score(a: ScoreArgs) -> Result<()> {
    let model: Model = load_model(&a.ckpt)?;
    let data = load(&a.data)?;
    let scores = score_batch(&model, &data)?;
    let mut w = csv::Writer::from_path(&a.out)?;
    w.write_record(["instance_id", "score", "argmax_cluster"])?;
    for (i, s) in scores.iter().enumerate() {
        w.write_record([i.to_string(), s.score.to_string(), s.argmax_cluster.to_string()])?;
    }
    w.flush()?;
    if let Some(labels) = &data.labels {
        let raw: Vec<f64> = scores.iter().map(|s| s.score).collect();
        if let Ok(auc) = compute_auc(&raw, labels) {
            eprintln!("AUC {auc:.4}");
        }
    }
    eprintln!("scored {} instances into {}", scores.len(), a.out.display());
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let model: Model = load_model(&a.ckpt)?;
    if a.stdio {
        serve_stdio(&model)?;
        return Ok(());
    }
    let port = a.port.expect("clap requires --port without --stdio");
    eprintln!("listening on {}:{port}", a.host);
    serve_tcp(Arc::new(model), (a.host.as_str(), port))?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let specs = ExperimentSpec::from_path(&a.spec)?;
    let mut rows = Vec::new();
    let mut failure = None;
    for spec in &specs {
        let outcome = run_experiment_with(spec, |row| {
            eprintln!(
                "{} {} seed {}{}: AUC {:.4} ({:.1}s)",
                row.spec_id,
                row.variant,
                row.seed,
                row.param_value.map(|v| format!(" {}={v}", row.param.as_deref().unwrap_or(""))).unwrap_or_default(),
                row.auc,
                row.wall_time
            );
            rows.push(row.clone());
            Ok(())
        });
        if let Err(e) = outcome {
            failure = Some(anyhow::Error::new(e).context(format!("experiment '{}'", spec.id)));
            break;
        }
    }
    if !rows.is_empty() {
        let files = emit_report(&rows, &a.out)?;
        eprintln!("wrote {} report files to {}", files.len(), a.out.display());
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
