//! Argument definitions and subcommand dispatch.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use condrecon::data::{make_dataset, Split};
use condrecon::eval::{evaluate_grid, load_for_eval, NamedReconstructor};
use condrecon::training::train;

use crate::error::{CliError, CliResult, Context, EXIT_CHECKPOINT, EXIT_DATA, EXIT_FAILURE};
use crate::loading::{load_config, load_dataset, load_model};
use crate::recon::{reconstruct_slice, MapKind};
use crate::service::{self, Served};

#[derive(Debug, Parser)]
#[command(name = "condrecon", version, about = "λ-conditioned unrolled MRI reconstruction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic phantom dataset into `data.dir`.
    MakeData(MakeDataArgs),
    /// Train `[model]` on the dataset's train split.
    Train(TrainArgs),
    /// Evaluate checkpoints over a λ × σ grid and write CSV, JSON and SVG reports.
    Evaluate(EvaluateArgs),
    /// Reconstruct one slice to PNG files plus a metrics JSON.
    Reconstruct(ReconstructArgs),
    /// Serve the HTTP inference API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Run configuration (TOML).
    #[arg(short, long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct MakeDataArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Output directory instead of `data.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Output directory instead of `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// `NAME=PATH` (or just `PATH`); replaces `eval.checkpoints` when given.
    #[arg(long = "checkpoint", value_parser = parse_named_checkpoint)]
    pub checkpoints: Vec<(String, PathBuf)>,
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub sigmas: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_split)]
    pub split: Option<Split>,
    /// Leave the zero-filled baseline out of the report.
    #[arg(long)]
    pub no_zero_filled: bool,
    /// Report directory; defaults to `<out_dir>/eval`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub slice: String,
    #[arg(long)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    /// Noise seed; defaults to `eval.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint; defaults to `serve.checkpoint`, then to the zero-weight model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory; defaults to `<out_dir>/recon/<slice>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Overrides both `CONDRECON_PORT` and `serve.port`; 0 picks a free port.
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: condrecon::Error| e.to_string())
}

fn parse_named_checkpoint(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.into(), path.into())),
        Some(_) => Err(format!("expected NAME=PATH, got {s:?}")),
        None => {
            let path = PathBuf::from(s);
            let name = path
                .file_stem()
                .map(|n| n.to_string_lossy().into_owned())
                .ok_or_else(|| format!("no file name in {s:?}"))?;
            Ok((name, path))
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::MakeData(a) => make_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Serve(a) => serve(a),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::new(EXIT_FAILURE, format!("cannot write {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::new(EXIT_FAILURE, format!("cannot create {}: {e}", dir.display())))
}

fn make_data(a: MakeDataArgs) -> CliResult<()> {
    let cfg = load_config(&a.config.config)?;
    let dir = a.out.unwrap_or(cfg.data.dir);
    let ds = make_dataset(&cfg.data.synthetic).ctx("generating dataset", EXIT_DATA)?;
    ds.save(&dir).ctx(&format!("writing dataset {}", dir.display()), EXIT_DATA)?;
    let count = |s| ds.split(s).len();
    println!(
        "wrote {} slices to {} (train {}, val {}, test {})",
        ds.len(),
        dir.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CliResult<()> {
    let cfg = load_config(&a.config.config)?;
    let mut tcfg = cfg.train_config();
    if let Some(e) = a.epochs {
        tcfg.epochs = e;
    }
    let out = a.out.unwrap_or(cfg.out_dir.clone());
    let ds = load_dataset(&cfg.data.dir)?;
    let outcome = train(&ds, &cfg.model, &tcfg, &out).ctx("training", EXIT_FAILURE)?;
    for e in &outcome.epochs {
        println!(
            "epoch {:>3}  loss {:.5}  val psnr {:.2} dB  ssim {:.4}",
            e.epoch, e.mean_loss, e.val_psnr, e.val_ssim
        );
    }
    println!(
        "zero-filled val psnr {:.2} dB; best epoch {} -> {}",
        outcome.val_zero_filled_psnr,
        outcome.best_epoch,
        outcome.best_checkpoint.display()
    );
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> CliResult<()> {
    let cfg = load_config(&a.config.config)?;
    let checkpoints: Vec<(String, PathBuf)> = if a.checkpoints.is_empty() {
        cfg.eval.checkpoints.iter().map(|c| (c.name.clone(), c.path.clone())).collect()
    } else {
        a.checkpoints
    };
    let mut models = Vec::new();
    if cfg.eval.include_zero_filled && !a.no_zero_filled {
        models.push(NamedReconstructor::zero_filled());
    }
    for (name, path) in checkpoints {
        let ckpt = load_for_eval(&path, None).ctx(&format!("checkpoint {}", path.display()), EXIT_CHECKPOINT)?;
        models.push(NamedReconstructor::model(name, ckpt.model));
    }
    if models.is_empty() {
        return Err(CliError::usage("nothing to evaluate: no checkpoints and the zero-filled baseline is disabled"));
    }
    let lambdas = a.lambdas.unwrap_or(cfg.eval.lambdas.clone());
    let sigmas = a.sigmas.unwrap_or(cfg.eval.sigmas.clone());
    let split = a.split.unwrap_or(cfg.eval.split);
    let ds = load_dataset(&cfg.data.dir)?;
    let records = ds.split(split);
    let report = evaluate_grid(&models, &lambdas, &sigmas, &records, a.seed.unwrap_or(cfg.eval.seed))
        .ctx("evaluation", EXIT_FAILURE)?;
    let out = a.out.unwrap_or(cfg.out_dir.join("eval"));
    create_dir(&out)?;
    let csv = report.to_csv().ctx("report", EXIT_FAILURE)?;
    write(&out.join("report.csv"), &csv)?;
    write(&out.join("report.json"), report.to_json().ctx("report", EXIT_FAILURE)?)?;
    write(&out.join("report.svg"), report.to_svg())?;
    print!("{csv}");
    eprintln!("reports written to {}", out.display());
    Ok(())
}

fn reconstruct(a: ReconstructArgs) -> CliResult<()> {
    let cfg = load_config(&a.config.config)?;
    if !(0.0..=1.0).contains(&a.lambda) {
        return Err(CliError::usage(format!("--lambda must be in [0, 1], got {}", a.lambda)));
    }
    if !(a.sigma >= 0.0 && a.sigma.is_finite()) {
        return Err(CliError::usage(format!("--sigma must be finite and nonnegative, got {}", a.sigma)));
    }
    let ds = load_dataset(&cfg.data.dir)?;
    let record = ds
        .get(&a.slice)
        .ok_or_else(|| CliError::new(EXIT_DATA, format!("unknown slice {:?}", a.slice)))?;
    let loaded = load_model(&cfg, a.checkpoint.as_deref().or(cfg.serve.checkpoint.as_deref()))?;
    let seed = a.seed.unwrap_or(cfg.eval.seed);
    let r = reconstruct_slice(&loaded.model, record, a.lambda, a.sigma, seed).ctx("reconstruction", EXIT_FAILURE)?;
    let out = a.out.unwrap_or(cfg.out_dir.join("recon").join(&a.slice));
    create_dir(&out)?;
    for k in MapKind::ALL {
        write(&out.join(format!("{}.png", k.name())), r.png(k))?;
    }
    let metrics = json!({
        "slice_id": a.slice,
        "lambda": a.lambda,
        "sigma": a.sigma,
        "seed": seed,
        "psnr": r.quality.psnr,
        "ssim": r.quality.ssim,
        "zero_filled": r.zero_filled_quality,
        "data_range": r.data_range,
        "latency_ms": r.latency_ms,
        "model": { "source": loaded.source(), "config_hash": loaded.model.config().hash() },
    });
    let text = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    write(&out.join("metrics.json"), &text)?;
    println!("{text}");
    Ok(())
}

fn serve(a: ServeArgs) -> CliResult<()> {
    let cfg = load_config(&a.config.config)?;
    let port = service::resolve_port(a.port, std::env::var(service::PORT_ENV).ok().as_deref(), cfg.serve.port)?;
    let host = a.host.unwrap_or(cfg.serve.host.clone());
    let checkpoint = a.checkpoint.or(cfg.serve.checkpoint.clone());
    let origins = cfg.serve.cors_origins.clone();
    let load = move || {
        let loaded = load_model(&cfg, checkpoint.as_deref())?;
        let ds = load_dataset(&cfg.data.dir)?;
        Served::new(loaded, ds, cfg.serve.split)
    };
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::new(EXIT_FAILURE, format!("runtime: {e}")))?;
    rt.block_on(service::run((host, port), &origins, load, service::shutdown_signal()))
}
