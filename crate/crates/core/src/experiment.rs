//! End-to-end runs shared by the CLI and the benchmark: backbone
//! pretraining, adapter fine-tuning, the adapter-mode grid and the latent
//! dimension sweep.

use crate::config::{AdapterMode, RunConfig};
use crate::data::AnnotatedExample;
use crate::engine::ParamStore;
use crate::error::Result;
use crate::metrics::{evaluate, AblationRow, EvalOptions, EvalReport, Predictor, SweepRow};
use crate::model::UaSam;
use crate::training::{attach_adapters, init_backbone, run_stage, EpochRecord, Stage, StageOutcome};

/// Stage 1 from scratch.
pub fn pretrain(examples: &[AnnotatedExample], cfg: &RunConfig, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<StageOutcome> {
    let model = UaSam::new(cfg)?;
    let store = init_backbone(&model, cfg.seed)?;
    run_stage(Stage::Pretrain, &model, store, examples, cfg, on_epoch)
}

/// Stage 2 on top of a trained backbone.
pub fn finetune(
    backbone: &ParamStore,
    examples: &[AnnotatedExample],
    cfg: &RunConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(UaSam, StageOutcome)> {
    let model = UaSam::new(cfg)?;
    let store = attach_adapters(&model, backbone, cfg.seed)?;
    let outcome = run_stage(Stage::Finetune, &model, store, examples, cfg, on_epoch)?;
    Ok((model, outcome))
}

pub fn test_options(cfg: &RunConfig) -> EvalOptions {
    EvalOptions { k: cfg.train.k_samples, seed: cfg.seed, tie_to_foreground: cfg.train.tie_to_foreground, batch_size: 32 }
}

/// Fine-tunes one configuration and scores its best checkpoint on `test`.
pub fn finetune_and_evaluate(
    backbone: &ParamStore,
    train: &[AnnotatedExample],
    test: &[AnnotatedExample],
    cfg: &RunConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<EvalReport> {
    let (model, outcome) = finetune(backbone, train, cfg, on_epoch)?;
    let mut report = evaluate(&model, &outcome.best, test, Predictor::Adapted, &test_options(cfg))?;
    report.fingerprint = cfg.fingerprint();
    Ok(report)
}

/// One row per adapter mode and KL weight, everything else held fixed.
/// Modes without a latent have no KL term and run once at `base.loss.beta`.
pub fn run_ablation_grid(
    backbone: &ParamStore,
    train: &[AnnotatedExample],
    test: &[AnnotatedExample],
    base: &RunConfig,
    modes: &[AdapterMode],
    betas: &[f64],
    on_epoch: &mut dyn FnMut(AdapterMode, f64, &EpochRecord),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &mode in modes {
        let single = [base.loss.beta];
        let sweep = if mode.uses_latent() && !betas.is_empty() { betas } else { &single[..] };
        for &beta in sweep {
            let mut cfg = base.clone();
            cfg.adapter.mode = mode;
            cfg.loss.beta = beta;
            cfg.validate()?;
            let report = finetune_and_evaluate(backbone, train, test, &cfg, &mut |r| on_epoch(mode, beta, r))?;
            rows.push(AblationRow { mode: mode.name().into(), beta, dice: report.mean_dice, diversity: report.diversity });
        }
    }
    Ok(rows)
}

/// One row per latent dimension.
pub fn latent_dim_sweep(
    backbone: &ParamStore,
    train: &[AnnotatedExample],
    test: &[AnnotatedExample],
    base: &RunConfig,
    dims: &[usize],
    on_epoch: &mut dyn FnMut(usize, &EpochRecord),
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(dims.len());
    for &c in dims {
        let mut cfg = base.clone();
        cfg.latent.latent_dim = c;
        cfg.validate()?;
        let report = finetune_and_evaluate(backbone, train, test, &cfg, &mut |r| on_epoch(c, r))?;
        rows.push(SweepRow { latent_dim: c, dice: report.mean_dice });
    }
    Ok(rows)
}
