use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use uasam::config::{AdapterMode, RunConfig};
use uasam::data::{generate, load_manifest, split, write_manifest, AnnotatedExample};
use uasam::engine::checkpoint::{self, Checkpoint};
use uasam::engine::ParamStore;
use uasam::experiment::{finetune, latent_dim_sweep, pretrain, run_ablation_grid, test_options};
use uasam::metrics::{count_parameters, evaluate, write_ablation_csv, write_eval_csv, write_sweep_csv, Predictor};
use uasam::model::UaSam;
use uasam::training::{write_metrics_csv, EpochRecord, Stage, StageOutcome};
use uasam::{Error, Result};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// Uncertainty-aware adapters on a desk-scale segment-anything model.
#[derive(Parser, Debug)]
#[command(name = "uasam", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; overrides `seed` in the config.
    #[arg(long, global = true, env = "UASAM_SEED")]
    seed: Option<u64>,
    /// Config override as dotted `key=value`, e.g. `train.max_epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic dataset and its train/test manifests.
    Generate {
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Run one training stage.
    Train {
        #[arg(long, value_parser = ["pretrain", "finetune"], default_value = "pretrain")]
        stage: String,
        #[arg(long, default_value = "data/train.json")]
        manifest: PathBuf,
        /// Stage-1 checkpoint; required for `finetune`.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Adapter mode for `finetune`.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Score a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        from: PathBuf,
        #[arg(long, default_value = "data/test.json")]
        manifest: PathBuf,
        /// Latent draws fused per example.
        #[arg(long, default_value_t = 4)]
        k_samples: usize,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
    },
    /// Fine-tune and score every adapter mode.
    Ablate {
        #[arg(long, default_value = "data/manifest.json")]
        manifest: PathBuf,
        /// Stage-1 checkpoint; trained from scratch when omitted.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Comma-separated modes.
        #[arg(long, value_delimiter = ',', default_value = "z-only,p-only,wms,cmsm")]
        mode: Vec<String>,
        /// Comma-separated KL weights for modes with a latent.
        #[arg(long, value_delimiter = ',', default_value = "0.1,1,10")]
        betas: Vec<f64>,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
    },
    /// Fine-tune and score one model per latent dimension.
    Sweep {
        #[arg(long, default_value = "data/manifest.json")]
        manifest: PathBuf,
        /// Stage-1 checkpoint; trained from scratch when omitted.
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "2,4,6,8")]
        dims: Vec<usize>,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
    },
    /// Print a checkpoint's parameter counts and metadata.
    Inspect {
        #[arg(long)]
        from: PathBuf,
    },
}

fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    RunConfig::load(common.config.as_deref(), &overrides)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_text(&dir.join("config.toml"), &cfg.to_toml())
}

fn progress(r: &EpochRecord) {
    match r.loss {
        Some(loss) => eprintln!("[{}] epoch {:>3} loss {loss:.4} val_dice {:.4}", r.stage, r.epoch, r.val_dice),
        None => eprintln!("[{}] epoch {:>3} val_dice {:.4}", r.stage, r.epoch, r.val_dice),
    }
}

fn checkpoint_meta(stage: Stage, cfg: &RunConfig, outcome: &StageOutcome, which: &str) -> serde_json::Value {
    serde_json::json!({
        "stage": stage.name(),
        "which": which,
        "config": cfg.to_toml(),
        "epoch": if which == "best" { outcome.state.best_epoch } else { outcome.state.epoch },
        "best_val_dice": outcome.state.best_val_dice,
    })
}

/// Config stored in a checkpoint, with the CLI seed and overrides applied.
fn checkpoint_config(ckpt: &Checkpoint, common: &Common) -> Result<RunConfig> {
    let text = ckpt.meta.get("config").and_then(|v| v.as_str()).unwrap_or("");
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    RunConfig::from_toml_str(text, &overrides)
}

fn checkpoint_stage(meta: &serde_json::Value) -> Result<Stage> {
    meta.get("stage").and_then(|v| v.as_str()).unwrap_or("").parse()
}

fn load_backbone(path: &Path) -> Result<ParamStore> {
    let ckpt = checkpoint::load(path)?;
    if checkpoint_stage(&ckpt.meta)? != Stage::Pretrain {
        return Err(Error::Checkpoint { path: path.display().to_string(), reason: "expected a pretrain checkpoint".into() });
    }
    Ok(ckpt.store)
}

fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    let examples = generate(&cfg.synth)?;
    let (train, test) = split(&examples, cfg.train.split_ratio, cfg.synth.seed)?;
    let path = write_manifest(out, "manifest.json", &examples)?;
    write_manifest(out, "train.json", &train)?;
    write_manifest(out, "test.json", &test)?;
    echo_config(out, cfg)?;
    println!("{}", path.display());
    Ok(())
}

fn save_outcome(out: &Path, stage: Stage, cfg: &RunConfig, outcome: &StageOutcome) -> Result<()> {
    checkpoint::save(&out.join("best.ckpt"), &outcome.best, None, &checkpoint_meta(stage, cfg, outcome, "best"))?;
    checkpoint::save(
        &out.join("final.ckpt"),
        &outcome.last,
        Some(&outcome.optimizer),
        &checkpoint_meta(stage, cfg, outcome, "final"),
    )?;
    write_metrics_csv(&out.join("metrics.csv"), &outcome.history)
}

fn cmd_train(
    mut cfg: RunConfig,
    stage: Stage,
    manifest: &Path,
    from: Option<&Path>,
    mode: Option<&str>,
    out: &Path,
) -> Result<()> {
    if let Some(m) = mode {
        cfg.adapter.mode = m.parse()?;
    }
    let backbone = match (stage, from) {
        (Stage::Finetune, None) => {
            return Err(Error::InvalidArgument("finetune needs --from <pretrain checkpoint>".into()));
        }
        (Stage::Finetune, Some(p)) => Some(load_backbone(p)?),
        (Stage::Pretrain, _) => None,
    };
    let examples = load_manifest(manifest)?;
    create_dir(out)?;
    echo_config(out, &cfg)?;
    let outcome = match backbone {
        None => pretrain(&examples, &cfg, &mut progress)?,
        Some(b) => finetune(&b, &examples, &cfg, &mut progress)?.1,
    };
    save_outcome(out, stage, &cfg, &outcome)?;
    println!(
        "stage={} best_val_dice={:.6} best_epoch={} epochs={}",
        stage.name(),
        outcome.state.best_val_dice,
        outcome.state.best_epoch,
        outcome.state.epoch
    );
    Ok(())
}

fn cmd_eval(common: &Common, from: &Path, manifest: &Path, k: usize, out: &Path) -> Result<()> {
    let ckpt = checkpoint::load(from)?;
    let mut cfg = checkpoint_config(&ckpt, common)?;
    cfg.train.k_samples = k;
    let predictor = match checkpoint_stage(&ckpt.meta)? {
        Stage::Pretrain => Predictor::Backbone,
        Stage::Finetune => Predictor::Adapted,
    };
    let model = UaSam::new(&cfg)?;
    let examples = load_manifest(manifest)?;
    let mut report = evaluate(&model, &ckpt.store, &examples, predictor, &test_options(&cfg))?;
    report.fingerprint = cfg.fingerprint();
    create_dir(out)?;
    echo_config(out, &cfg)?;
    write_eval_csv(&out.join("eval.csv"), &report)?;
    println!("{}", report.summary());
    Ok(())
}

/// Train/test split of a full manifest plus a Stage-1 backbone.
fn experiment_inputs(
    cfg: &RunConfig,
    manifest: &Path,
    from: Option<&Path>,
    out: &Path,
) -> Result<(Vec<AnnotatedExample>, Vec<AnnotatedExample>, ParamStore)> {
    let examples = load_manifest(manifest)?;
    let (train, test) = split(&examples, cfg.train.split_ratio, cfg.synth.seed)?;
    create_dir(out)?;
    echo_config(out, cfg)?;
    let backbone = match from {
        Some(p) => load_backbone(p)?,
        None => {
            let outcome = pretrain(&train, cfg, &mut progress)?;
            let dir = out.join("pretrain");
            create_dir(&dir)?;
            save_outcome(&dir, Stage::Pretrain, cfg, &outcome)?;
            outcome.best
        }
    };
    Ok((train, test, backbone))
}

fn cmd_ablate(
    cfg: &RunConfig,
    manifest: &Path,
    from: Option<&Path>,
    modes: &[String],
    betas: &[f64],
    out: &Path,
) -> Result<()> {
    let modes: Vec<AdapterMode> = modes.iter().map(|m| m.parse()).collect::<Result<_>>()?;
    let (train, test, backbone) = experiment_inputs(cfg, manifest, from, out)?;
    let rows = run_ablation_grid(&backbone, &train, &test, cfg, &modes, betas, &mut |m, beta, r| {
        eprint!("{:>7} beta={beta} ", m.name());
        progress(r)
    })?;
    let path = out.join("ablation.csv");
    write_ablation_csv(&path, &rows)?;
    for r in &rows {
        println!("mode={} beta={} dice={:.6} diversity={:.6}", r.mode, r.beta, r.dice, r.diversity);
    }
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig, manifest: &Path, from: Option<&Path>, dims: &[usize], out: &Path) -> Result<()> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::InvalidArgument("--dims needs one or more values >= 1".into()));
    }
    let (train, test, backbone) = experiment_inputs(cfg, manifest, from, out)?;
    let rows = latent_dim_sweep(&backbone, &train, &test, cfg, dims, &mut |c, r| {
        eprint!("C={c} ");
        progress(r)
    })?;
    write_sweep_csv(&out.join("sweep.csv"), &rows)?;
    for r in &rows {
        println!("latent_dim={} dice={:.6}", r.latent_dim, r.dice);
    }
    Ok(())
}

fn cmd_inspect(from: &Path) -> Result<()> {
    let ckpt = checkpoint::load(from)?;
    let mut store = ckpt.store;
    if checkpoint_stage(&ckpt.meta)? == Stage::Finetune {
        uasam::sam::freeze_backbone(&mut store)?;
    }
    let counts = count_parameters(&store);
    println!("tensors={}", store.len());
    println!("total={} trainable={} frozen={}", counts.total, counts.trainable, counts.frozen);
    for (prefix, n) in &counts.by_prefix {
        println!("  {prefix}: {n}");
    }
    for key in ["stage", "which", "epoch", "best_val_dice"] {
        if let Some(v) = ckpt.meta.get(key) {
            println!("{key}={v}");
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::Generate { out } => cmd_generate(&resolve_config(common)?, out),
        Command::Train { stage, manifest, from, mode, out } => {
            cmd_train(resolve_config(common)?, stage.parse()?, manifest, from.as_deref(), mode.as_deref(), out)
        }
        Command::Eval { from, manifest, k_samples, out } => cmd_eval(common, from, manifest, *k_samples, out),
        Command::Ablate { manifest, from, mode, betas, out } => {
            cmd_ablate(&resolve_config(common)?, manifest, from.as_deref(), mode, betas, out)
        }
        Command::Sweep { manifest, from, dims, out } => {
            cmd_sweep(&resolve_config(common)?, manifest, from.as_deref(), dims, out)
        }
        Command::Inspect { from } => cmd_inspect(from),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = if e.is_numeric() {
                EXIT_NUMERIC
            } else if e.is_data() {
                EXIT_DATA
            } else {
                EXIT_USAGE
            };
            ExitCode::from(code)
        }
    }
}
