//! Dice, majority-vote fusion, sample diversity, evaluation and parameter
//! accounting.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::data::AnnotatedExample;
use crate::engine::{Ctx, ParamStore, Rng, Tensor};
use crate::error::{Error, Result};
use crate::latent::sample_with;
use crate::model::UaSam;
use crate::sam::PromptPoint;
use crate::training::sample_prompt_point;

const PROMPT_STREAM: u64 = 1 << 40;
const LATENT_STREAM: u64 = 2 << 40;

fn check_binary(m: &Tensor) -> Result<()> {
    match m.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(&v) => Err(Error::NonBinaryMask(v)),
        None => Ok(()),
    }
}

/// `2|a ∩ b| / (|a| + |b|)`, with 1.0 when both masks are empty.
pub fn dice(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("dice", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    check_binary(a)?;
    check_binary(b)?;
    let (mut inter, mut total) = (0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        inter += x * y;
        total += x + y;
    }
    Ok(if total == 0.0 { 1.0 } else { 2.0 * inter / total })
}

/// Per-pixel vote: foreground when strictly more than half of the masks
/// agree. With `tie_to_foreground`, an even split also counts as foreground.
pub fn majority_vote_with(masks: &[Tensor], tie_to_foreground: bool) -> Result<Tensor> {
    let first = masks.first().ok_or(Error::Empty("mask list"))?;
    let n = masks.len();
    let mut counts = vec![0usize; first.numel()];
    for m in masks {
        if m.shape() != first.shape() {
            return Err(Error::shape("majority_vote", format!("{:?} vs {:?}", first.shape(), m.shape())));
        }
        check_binary(m)?;
        for (c, v) in counts.iter_mut().zip(m.data()) {
            if *v == 1.0 {
                *c += 1;
            }
        }
    }
    let threshold = if tie_to_foreground { n.div_ceil(2) } else { n / 2 + 1 };
    let data = counts.into_iter().map(|c| if c >= threshold { 1.0 } else { 0.0 }).collect();
    Tensor::new(first.shape().to_vec(), data)
}

pub fn majority_vote(masks: &[Tensor]) -> Result<Tensor> {
    majority_vote_with(masks, false)
}

/// Mean pairwise `1 - dice` over the samples; 0 for fewer than two.
pub fn diversity(samples: &[Tensor]) -> Result<f64> {
    let (mut sum, mut pairs) = (0.0, 0usize);
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            sum += 1.0 - dice(&samples[i], &samples[j])?;
            pairs += 1;
        }
    }
    Ok(if pairs == 0 { 0.0 } else { sum / pairs as f64 })
}

/// K binarised predictions for one image and their fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<Tensor>,
    pub fused: Tensor,
}

impl SampleSet {
    pub fn new(samples: Vec<Tensor>, tie_to_foreground: bool) -> Result<Self> {
        let fused = majority_vote_with(&samples, tie_to_foreground)?;
        Ok(SampleSet { samples, fused })
    }

    pub fn k(&self) -> usize {
        self.samples.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExampleScore {
    pub example_id: String,
    pub dice: f64,
    pub diversity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mean_dice: f64,
    pub diversity: f64,
    pub k: usize,
    pub per_example: Vec<ExampleScore>,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn summary(&self) -> String {
        format!("mean_dice={:.6} diversity={:.6} K={}", self.mean_dice, self.diversity, self.k)
    }
}

/// Which forward path produces predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Predictor {
    /// Frozen-backbone path, no adapters.
    Backbone,
    /// Adapter chain with latent draws from the prior.
    Adapted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub k: usize,
    pub seed: u64,
    pub tie_to_foreground: bool,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { k: 4, seed: 42, tie_to_foreground: false, batch_size: 32 }
    }
}

/// Prompt used for example `index` of an evaluation set.
pub fn eval_prompt(example: &AnnotatedExample, index: usize, seed: u64) -> PromptPoint {
    let mut rng = Rng::derive(seed, PROMPT_STREAM + index as u64);
    sample_prompt_point(&example.union_mask(), &mut rng).0
}

fn binarize(logits: &[f64]) -> Vec<f64> {
    // sigmoid(x) > 0.5 <=> x > 0
    logits.iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect()
}

/// K binarised predictions for each example of a batch.
pub fn predict_samples(
    model: &UaSam,
    store: &ParamStore,
    examples: &[AnnotatedExample],
    first_index: usize,
    predictor: Predictor,
    opts: &EvalOptions,
) -> Result<Vec<SampleSet>> {
    let b = examples.len();
    let s = examples[0].size();
    let images = Tensor::stack(&examples.iter().map(|e| e.image.clone()).collect::<Vec<_>>())?;
    let points: Vec<PromptPoint> =
        examples.iter().enumerate().map(|(i, e)| eval_prompt(e, first_index + i, opts.seed)).collect();
    let stochastic = predictor == Predictor::Adapted && model.uses_latent();
    let passes = if stochastic { opts.k } else { 1 };
    let mut rngs: Vec<Rng> =
        (0..b).map(|i| Rng::derive(opts.seed, LATENT_STREAM + (first_index + i) as u64)).collect();

    let mut per_pass = Vec::with_capacity(passes);
    {
        let mut ctx = Ctx::eval(store);
        let img = ctx.constant(images);
        let prior = if stochastic { Some(model.prior(&mut ctx, img)?) } else { None };
        for _ in 0..passes {
            let logits = match (predictor, prior) {
                (Predictor::Backbone, _) => model.predict_backbone(&mut ctx, img, &points)?,
                (Predictor::Adapted, Some(dist)) => {
                    let c = ctx.shape(dist.mu)[1];
                    let mut eps = Vec::with_capacity(b * c);
                    for r in rngs.iter_mut() {
                        eps.extend((0..c).map(|_| r.normal()));
                    }
                    let z = sample_with(&mut ctx, dist, Tensor::new(vec![b, c], eps)?)?;
                    model.predict(&mut ctx, img, &points, Some(z))?
                }
                (Predictor::Adapted, None) => model.predict(&mut ctx, img, &points, None)?,
            };
            per_pass.push(binarize(ctx.value(logits).data()));
        }
    }
    let n = s * s;
    (0..b)
        .map(|i| {
            let samples: Vec<Tensor> = (0..opts.k)
                .map(|k| Tensor::new(vec![s, s], per_pass[k % passes][i * n..(i + 1) * n].to_vec()))
                .collect::<Result<_>>()?;
            SampleSet::new(samples, opts.tie_to_foreground)
        })
        .collect()
}

/// Scores the fused prediction of every example against the majority vote
/// of its annotators.
pub fn evaluate(
    model: &UaSam,
    store: &ParamStore,
    examples: &[AnnotatedExample],
    predictor: Predictor,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if opts.k == 0 || opts.batch_size == 0 {
        return Err(Error::InvalidArgument("k and batch_size must be >= 1".into()));
    }
    let mut per_example = Vec::with_capacity(examples.len());
    for (chunk_idx, chunk) in examples.chunks(opts.batch_size).enumerate() {
        let sets = predict_samples(model, store, chunk, chunk_idx * opts.batch_size, predictor, opts)?;
        for (ex, set) in chunk.iter().zip(sets) {
            let truth = majority_vote_with(&ex.masks, opts.tie_to_foreground)?;
            per_example.push(ExampleScore {
                example_id: ex.id.clone(),
                dice: dice(&set.fused, &truth)?,
                diversity: diversity(&set.samples)?,
            });
        }
    }
    let n = per_example.len() as f64;
    Ok(EvalReport {
        mean_dice: per_example.iter().map(|e| e.dice).sum::<f64>() / n,
        diversity: per_example.iter().map(|e| e.diversity).sum::<f64>() / n,
        k: opts.k,
        per_example,
        fingerprint: String::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub total: usize,
    pub trainable: usize,
    pub frozen: usize,
    /// Keyed by the first path component, e.g. `encoder`.
    pub by_prefix: BTreeMap<String, usize>,
}

impl ParamCounts {
    pub fn trainable_fraction(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }
}

pub fn count_parameters(store: &ParamStore) -> ParamCounts {
    let mut counts = ParamCounts { total: 0, trainable: 0, frozen: 0, by_prefix: BTreeMap::new() };
    for (name, t) in store.iter() {
        let n = t.numel();
        counts.total += n;
        if store.is_frozen(name) {
            counts.frozen += n;
        } else {
            counts.trainable += n;
        }
        let head = name.split('.').next().unwrap_or(name).to_string();
        *counts.by_prefix.entry(head).or_default() += n;
    }
    counts
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{other:?}")),
    })?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_eval_csv(path: &Path, report: &EvalReport) -> Result<()> {
    write_rows(path, &report.per_example)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub mode: String,
    pub beta: f64,
    pub dice: f64,
    pub diversity: f64,
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    write_rows(path, rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub latent_dim: usize,
    pub dice: f64,
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_rows(path, rows)
}
