//! Losses, per-step sampling and the two training stages.
//!
//! Stage 1 (`pretrain`) fits the whole backbone on the annotators' majority
//! vote. Stage 2 (`finetune`) freezes the backbone and fits the adapters,
//! the first position variant and the prior/posterior nets on the
//! variational objective, drawing one annotator per example and step.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{LossConfig, RunConfig};
use crate::data::{split, AnnotatedExample};
use crate::engine::{adam_step, apply_grads, Ctx, OptimizerState, ParamStore, Rng, Tensor, Var};
use crate::error::{Error, Result};
use crate::latent::{kl_divergence, sample};
use crate::metrics::{evaluate, majority_vote_with, EvalOptions, Predictor};
use crate::model::UaSam;
use crate::sam::{freeze_backbone, is_backbone_param, PromptPoint};

const BACKBONE_INIT_STREAM: u64 = 11;
const ADAPTER_INIT_STREAM: u64 = 12;
const TRAIN_STREAM: u64 = 13;
const VAL_SPLIT_OFFSET: u64 = 0x7a1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "finetune" => Ok(Stage::Finetune),
            _ => Err(Error::Config(format!("unknown stage `{s}` (pretrain, finetune)"))),
        }
    }
}

fn check_binary_target(t: &Tensor) -> Result<()> {
    match t.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(&v) => Err(Error::NonBinaryMask(v)),
        None => Ok(()),
    }
}

/// Weighted soft-Dice plus binary cross-entropy on raw logits `[B, S, S]`.
/// Dice is computed per example and averaged over the batch; cross-entropy
/// is the per-image negative log-likelihood (summed over pixels) averaged
/// over the batch.
pub fn dice_ce_loss(ctx: &mut Ctx, logits: Var, target: &Tensor, cfg: &LossConfig) -> Result<Var> {
    if ctx.shape(logits) != target.shape() || target.shape().len() != 3 {
        return Err(Error::shape(
            "dice_ce_loss",
            format!("logits {:?} vs target {:?}", ctx.shape(logits), target.shape()),
        ));
    }
    check_binary_target(target)?;
    let s = target.shape().to_vec();
    let (b, n) = (s[0], s[1] * s[2]);
    let t = ctx.constant(target.clone());

    let probs = ctx.sigmoid(logits)?;
    let inter = ctx.mul(probs, t)?;
    let inter = ctx.reshape(inter, &[b, n])?;
    let inter = ctx.sum_axis(inter, 1)?;
    let p_flat = ctx.reshape(probs, &[b, n])?;
    let p_sum = ctx.sum_axis(p_flat, 1)?;
    let t_sum: Vec<f64> = target.data().chunks(n).map(|c| c.iter().sum::<f64>() + cfg.epsilon_dice).collect();
    let t_sum = ctx.constant(Tensor::new(vec![b], t_sum)?);
    let num = ctx.scale(inter, 2.0)?;
    let num = ctx.add_scalar(num, cfg.epsilon_dice)?;
    let den = ctx.add(p_sum, t_sum)?;
    let soft_dice = ctx.div(num, den)?;
    let mean_dice = ctx.mean(soft_dice)?;
    let dice_loss = ctx.scale(mean_dice, -1.0)?;
    let dice_loss = ctx.add_scalar(dice_loss, 1.0)?;

    let sp = ctx.softplus(logits)?;
    let xt = ctx.mul(logits, t)?;
    let bce = ctx.sub(sp, xt)?;
    let bce = ctx.sum(bce)?;
    let bce = ctx.scale(bce, 1.0 / b as f64)?;

    let a = ctx.scale(dice_loss, cfg.dice_weight)?;
    let c = ctx.scale(bce, cfg.ce_weight)?;
    ctx.add(a, c)
}

/// Scalar parts of the variational objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboParts {
    pub recon: f64,
    pub kl: f64,
}

/// Reconstruction under a posterior draw plus `beta` times KL(posterior ||
/// prior). `images` is `[B, 1, S, S]`, `masks` the chosen annotator masks
/// `[B, S, S]`. Modes without a latent reduce to the reconstruction term.
pub fn elbo_loss(
    ctx: &mut Ctx,
    model: &UaSam,
    images: Var,
    masks: &Tensor,
    points: &[PromptPoint],
    cfg: &LossConfig,
    rng: &mut Rng,
) -> Result<(Var, ElboParts)> {
    let s = masks.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::shape("elbo_loss", format!("masks {s:?}, expected [B, S, S]")));
    }
    if !model.uses_latent() {
        let logits = model.predict(ctx, images, points, None)?;
        let recon = dice_ce_loss(ctx, logits, masks, cfg)?;
        let parts = ElboParts { recon: ctx.value(recon).item(), kl: 0.0 };
        return Ok((recon, parts));
    }
    let mask_var = ctx.constant(masks.reshape(vec![s[0], 1, s[1], s[2]])?);
    let q = model.posterior(ctx, images, mask_var)?;
    let p = model.prior(ctx, images)?;
    let z = sample(ctx, q, rng)?;
    let logits = model.predict(ctx, images, points, Some(z))?;
    let recon = dice_ce_loss(ctx, logits, masks, cfg)?;
    let kl = kl_divergence(ctx, q, p)?;
    let parts = ElboParts { recon: ctx.value(recon).item(), kl: ctx.value(kl).item() };
    let loss = if cfg.beta == 0.0 {
        recon
    } else {
        let weighted = ctx.scale(kl, cfg.beta)?;
        ctx.add(recon, weighted)?
    };
    Ok((loss, parts))
}

/// Uniform choice among the example's annotator masks.
pub fn sample_annotator<'a>(example: &'a AnnotatedExample, rng: &mut Rng) -> Result<&'a Tensor> {
    if example.masks.is_empty() {
        return Err(Error::Empty("annotator masks"));
    }
    Ok(&example.masks[rng.below(example.masks.len())])
}

/// Uniform foreground pixel of `mask` `[S, S]`. An empty mask yields the
/// image centre and `true` for the fallback flag.
pub fn sample_prompt_point(mask: &Tensor, rng: &mut Rng) -> (PromptPoint, bool) {
    let size = mask.shape()[1];
    let fg: Vec<usize> = mask.data().iter().enumerate().filter(|(_, &v)| v > 0.5).map(|(i, _)| i).collect();
    if fg.is_empty() {
        return (PromptPoint::foreground(size / 2, size / 2), true);
    }
    let i = fg[rng.below(fg.len())];
    (PromptPoint::foreground(i / size, i % size), false)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: Stage,
    pub epoch: usize,
    pub step: u64,
    pub best_val_dice: f64,
    pub best_epoch: usize,
    pub patience_counter: usize,
}

/// One row of the metrics CSV. Epoch 0 is the validation score before any
/// update; its loss fields are empty.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: String,
    pub loss: Option<f64>,
    pub recon: Option<f64>,
    pub kl: Option<f64>,
    pub val_dice: f64,
    pub lr: f64,
}

pub struct StageOutcome {
    pub state: TrainState,
    pub history: Vec<EpochRecord>,
    /// Parameters at the best validation epoch.
    pub best: ParamStore,
    /// Parameters after the last completed epoch.
    pub last: ParamStore,
    pub optimizer: OptimizerState,
}

/// Fresh backbone parameters for Stage 1.
pub fn init_backbone(model: &UaSam, seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    model.register_backbone(&mut store, &mut Rng::derive(seed, BACKBONE_INIT_STREAM))?;
    Ok(store)
}

/// Adds adapter and latent parameters to a trained backbone and freezes it.
pub fn attach_adapters(model: &UaSam, backbone: &ParamStore, seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, t) in backbone.iter().filter(|(n, _)| is_backbone_param(n)) {
        store.insert(name, t.clone())?;
    }
    model.register_adapters(&mut store, &mut Rng::derive(seed, ADAPTER_INIT_STREAM))?;
    freeze_backbone(&mut store)?;
    Ok(store)
}

/// Train / validation split used by both stages; depends only on the data
/// seed so both stages and every run seed validate on the same examples.
pub fn validation_split(examples: &[AnnotatedExample], cfg: &RunConfig) -> Result<(Vec<AnnotatedExample>, Vec<AnnotatedExample>)> {
    let (fit, val) = split(examples, 1.0 - cfg.train.val_fraction, cfg.synth.seed.wrapping_add(VAL_SPLIT_OFFSET))?;
    if fit.is_empty() || val.is_empty() {
        return Err(Error::Empty("training or validation split"));
    }
    Ok((fit, val))
}

pub fn validation_options(stage: Stage, cfg: &RunConfig) -> EvalOptions {
    EvalOptions {
        k: match stage {
            Stage::Pretrain => 1,
            Stage::Finetune => cfg.train.k_samples,
        },
        seed: cfg.synth.seed,
        tie_to_foreground: cfg.train.tie_to_foreground,
        batch_size: 32,
    }
}

fn predictor(stage: Stage) -> Predictor {
    match stage {
        Stage::Pretrain => Predictor::Backbone,
        Stage::Finetune => Predictor::Adapted,
    }
}

struct Batch {
    images: Tensor,
    targets: Tensor,
    points: Vec<PromptPoint>,
}

fn make_batch(examples: &[&AnnotatedExample], stage: Stage, tie: bool, rng: &mut Rng) -> Result<Batch> {
    let mut images = Vec::with_capacity(examples.len());
    let mut targets = Vec::with_capacity(examples.len());
    let mut points = Vec::with_capacity(examples.len());
    for ex in examples {
        images.push(ex.image.clone());
        targets.push(match stage {
            Stage::Pretrain => majority_vote_with(&ex.masks, tie)?,
            Stage::Finetune => sample_annotator(ex, rng)?.clone(),
        });
        points.push(sample_prompt_point(&ex.union_mask(), rng).0);
    }
    Ok(Batch { images: Tensor::stack(&images)?, targets: Tensor::stack(&targets)?, points })
}

/// One optimisation step; returns `(loss, recon, kl)`.
fn train_step(
    model: &UaSam,
    store: &mut ParamStore,
    opt: &mut OptimizerState,
    stage: Stage,
    batch: Batch,
    cfg: &RunConfig,
    rng: &mut Rng,
) -> Result<(f64, f64, f64)> {
    let (grads, loss, parts) = {
        let mut ctx = Ctx::train(store);
        let images = ctx.constant(batch.images);
        let (loss, parts) = match stage {
            Stage::Pretrain => {
                let logits = model.predict_backbone(&mut ctx, images, &batch.points)?;
                let loss = dice_ce_loss(&mut ctx, logits, &batch.targets, &cfg.loss)?;
                let v = ctx.value(loss).item();
                (loss, ElboParts { recon: v, kl: 0.0 })
            }
            Stage::Finetune => elbo_loss(&mut ctx, model, images, &batch.targets, &batch.points, &cfg.loss, rng)?,
        };
        let value = ctx.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "training loss".into() });
        }
        (ctx.backward(loss)?, value, parts)
    };
    apply_grads(store, grads)?;
    adam_step(store, opt)?;
    Ok((loss, parts.recon, parts.kl))
}

/// Runs one stage with early stopping on validation majority-vote Dice.
///
/// `store` must already hold the parameters for the stage: a fresh backbone
/// for Stage 1 ([`init_backbone`]) or a backbone with attached adapters for
/// Stage 2 ([`attach_adapters`]).
pub fn run_stage(
    stage: Stage,
    model: &UaSam,
    store: ParamStore,
    examples: &[AnnotatedExample],
    cfg: &RunConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<StageOutcome> {
    if examples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut store = store;
    if stage == Stage::Finetune {
        freeze_backbone(&mut store)?;
    }
    let (fit, val) = validation_split(examples, cfg)?;
    let steps_per_epoch = fit.len().div_ceil(cfg.train.batch_size) as u64;
    let lr = match stage {
        Stage::Pretrain => cfg.train.pretrain_lr,
        Stage::Finetune => cfg.train.finetune_lr,
    };
    let mut opt = OptimizerState::new(lr, cfg.train.decay_every_epochs as u64 * steps_per_epoch, cfg.train.decay_factor)?;
    let val_opts = validation_options(stage, cfg);
    let stage_id = match stage {
        Stage::Pretrain => 0,
        Stage::Finetune => 1,
    };
    let mut rng = Rng::derive(cfg.seed, TRAIN_STREAM + stage_id);

    let initial = evaluate(model, &store, &val, predictor(stage), &val_opts)?.mean_dice;
    let first = EpochRecord {
        epoch: 0,
        stage: stage.name().into(),
        loss: None,
        recon: None,
        kl: None,
        val_dice: initial,
        lr: opt.learning_rate,
    };
    on_epoch(&first);
    let mut history = vec![first];
    let mut state = TrainState { stage, epoch: 0, step: 0, best_val_dice: initial, best_epoch: 0, patience_counter: 0 };
    let mut best = store.clone();

    let mut order: Vec<usize> = (0..fit.len()).collect();
    for epoch in 1..=cfg.train.max_epochs {
        rng.shuffle(&mut order);
        let (mut loss_sum, mut recon_sum, mut kl_sum) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.train.batch_size) {
            let exs: Vec<&AnnotatedExample> = chunk.iter().map(|&i| &fit[i]).collect();
            let batch = make_batch(&exs, stage, cfg.train.tie_to_foreground, &mut rng)?;
            let (l, r, k) = train_step(model, &mut store, &mut opt, stage, batch, cfg, &mut rng)?;
            loss_sum += l;
            recon_sum += r;
            kl_sum += k;
            state.step += 1;
        }
        let val_dice = evaluate(model, &store, &val, predictor(stage), &val_opts)?.mean_dice;
        let steps = steps_per_epoch as f64;
        let record = EpochRecord {
            epoch,
            stage: stage.name().into(),
            loss: Some(loss_sum / steps),
            recon: Some(recon_sum / steps),
            kl: Some(kl_sum / steps),
            val_dice,
            lr: opt.learning_rate,
        };
        on_epoch(&record);
        history.push(record);
        state.epoch = epoch;
        // the untrained start is logged for reference but never kept as best
        if epoch == 1 || val_dice > state.best_val_dice {
            state.best_val_dice = val_dice;
            state.best_epoch = epoch;
            state.patience_counter = 0;
            best = store.clone();
        } else {
            state.patience_counter += 1;
            if state.patience_counter >= cfg.train.patience {
                break;
            }
        }
    }
    Ok(StageOutcome { state, history, best, last: store, optimizer: opt })
}

pub fn write_metrics_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{other:?}")),
    })?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
