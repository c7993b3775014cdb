//! Joint training of the nested model family on synthetic grid data.
//!
//! Every slicing level runs a forward pass over the same masked batch. The
//! loss averages the levels, smallest model first: the full model always
//! trains against the data, and each sub-model blends a data term with a
//! distillation term toward its next-larger sibling. The blend weight alpha
//! starts at 1 (pure data) and decays linearly to 0 (pure distillation for
//! the sub-models) over the run; teachers are held behind a stop-gradient,
//! so the distillation term moves only the student. Pinning alpha at 0 for a
//! whole run leaves sub-models anchored only through their teacher chain;
//! that mode is supported for comparison runs but can drift early in
//! training while the full model is still noisy.
//!
//! Gradients come from a recorded forward pass that mirrors the inference
//! path bit for bit, differentiated by hand in reverse; a finite-difference
//! checker validates every parameter family. Data comes from seeded
//! per-class Markov transition tables, whose exact conditional entropy gives
//! a floor that evaluation NLL can be compared against.

mod optim;
mod source;
mod tape;

pub use optim::{Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use source::{SyntheticSource, ROW_LOGIT_STD};

use crate::error::{Error, Result};
use crate::nested::{ForwardRequest, KvCache, NestedConfig, NestedWeights};
use crate::numerics::{real, to_f64, Real, Rng, Tensor};
use crate::schedules::alpha_decay;

use tape::{backward_tape, forward_tape};

// =============================================================================
// Configuration
// =============================================================================

/// How the per-level blend weight alpha evolves over a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Alpha pinned at 1: every level trains against the data.
    GtOnly,
    /// Alpha pinned at 0: sub-models train only against their teachers.
    DistillOnly,
    /// Alpha decays linearly from 1 at step 0 to 0 at the final step.
    GtToDistill,
}

impl LossMode {
    /// Blend weight at step `t` of `total` (data weight; `1 - alpha` is the
    /// distillation weight on sub-models).
    #[must_use]
    pub fn alpha(&self, t: usize, total: usize) -> f64 {
        match self {
            LossMode::GtOnly => 1.0,
            LossMode::DistillOnly => 0.0,
            LossMode::GtToDistill => alpha_decay(t, total),
        }
    }

    #[must_use]
    pub fn name(&self) -> &'static str {
        match self {
            LossMode::GtOnly => "gt-only",
            LossMode::DistillOnly => "distill-only",
            LossMode::GtToDistill => "gt-to-distill",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gt-only" => Ok(LossMode::GtOnly),
            "distill-only" => Ok(LossMode::DistillOnly),
            "gt-to-distill" => Ok(LossMode::GtToDistill),
            other => Err(Error::Config(format!(
                "unknown loss mode {other:?} (expected gt-only, distill-only, or gt-to-distill)"
            ))),
        }
    }
}

/// Default probability of replacing a sample's class with the unconditional
/// token, which trains the guidance-capable null stream.
pub const DEFAULT_LABEL_DROP: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate decays linearly toward zero over the run, clamped below
    /// at `min_lr_fraction * learning_rate`. 1.0 keeps the rate constant.
    pub min_lr_fraction: f64,
    /// Probability that a sample trains the unconditional stream.
    pub label_drop_prob: f64,
    pub loss_mode: LossMode,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(
        total_steps: usize,
        batch_size: usize,
        learning_rate: f64,
        loss_mode: LossMode,
        seed: u64,
    ) -> Self {
        TrainConfig {
            total_steps,
            batch_size,
            learning_rate,
            min_lr_fraction: 1.0,
            label_drop_prob: DEFAULT_LABEL_DROP,
            loss_mode,
            seed,
        }
    }

    /// The (possibly decayed) learning rate used at `step`.
    #[must_use]
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        self.learning_rate
            * (1.0 - step as f64 / self.total_steps as f64).max(self.min_lr_fraction)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("training needs at least one step".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be finite and positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.min_lr_fraction.is_finite()
            && self.min_lr_fraction > 0.0
            && self.min_lr_fraction <= 1.0)
        {
            return Err(Error::Config(format!(
                "min_lr_fraction must lie in (0, 1], got {}",
                self.min_lr_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.label_drop_prob) {
            return Err(Error::Config(format!(
                "label drop probability must lie in [0, 1], got {}",
                self.label_drop_prob
            )));
        }
        Ok(())
    }
}

// =============================================================================
// Batches
// =============================================================================

/// One training batch. `tokens` holds the clean grids; `masks` marks the
/// positions the model must reconstruct (its input sees MASK there).
#[derive(Debug, Clone)]
pub struct Batch {
    pub tokens: Vec<Vec<u32>>,
    pub classes: Vec<u32>,
    pub masks: Vec<Vec<bool>>,
    /// Samples that train the unconditional stream instead of their class.
    pub class_drop: Vec<bool>,
}

impl Batch {
    #[must_use]
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self, config: &NestedConfig) -> Result<()> {
        let b = self.tokens.len();
        if b == 0 {
            return Err(Error::Input("batch has no samples".into()));
        }
        if self.classes.len() != b || self.masks.len() != b || self.class_drop.len() != b {
            return Err(Error::Input(format!(
                "batch field lengths disagree: {b} grids, {} classes, {} masks, {} drop flags",
                self.classes.len(),
                self.masks.len(),
                self.class_drop.len()
            )));
        }
        for s in 0..b {
            if self.tokens[s].len() != config.max_positions {
                return Err(Error::Input(format!(
                    "sample {s} holds {} tokens, model grids hold {}",
                    self.tokens[s].len(),
                    config.max_positions
                )));
            }
            if self.masks[s].len() != self.tokens[s].len() {
                return Err(Error::Input(format!("sample {s}: mask length != token length")));
            }
            if !self.masks[s].iter().any(|&m| m) {
                return Err(Error::Input(format!(
                    "sample {s} masks nothing; every sample must hide at least one position"
                )));
            }
            if let Some(&id) = self.tokens[s].iter().find(|&&id| id >= config.vocab_size as u32) {
                return Err(Error::Input(format!(
                    "sample {s} holds token id {id}, vocabulary size is {}",
                    config.vocab_size
                )));
            }
            if self.classes[s] as usize >= config.num_classes {
                return Err(Error::Input(format!(
                    "sample {s} class {} out of range ({} classes)",
                    self.classes[s], config.num_classes
                )));
            }
        }
        Ok(())
    }

    /// Model input for sample `s`: the grid with masked positions replaced by
    /// the MASK sentinel.
    #[must_use]
    pub fn input_ids(&self, s: usize, mask_token: u32) -> Vec<u32> {
        self.tokens[s]
            .iter()
            .zip(&self.masks[s])
            .map(|(&id, &m)| if m { mask_token } else { id })
            .collect()
    }

    /// Class-slot embedding row for sample `s`, honoring label drop.
    pub fn class_row(&self, s: usize, config: &NestedConfig) -> Result<usize> {
        if self.class_drop[s] {
            Ok(config.null_row())
        } else {
            config.class_row(self.classes[s])
        }
    }

    fn total_masked(&self) -> usize {
        self.masks.iter().map(|m| m.iter().filter(|&&b| b).count()).sum()
    }
}

/// Draw a training mask over `n` positions: the masked fraction follows
/// `cos(pi/2 * u)` for uniform `u` (dense masks are common, near-empty masks
/// rare), positions are then chosen uniformly, and at least one position is
/// always masked. The mean masked fraction is `2/pi`.
pub fn sample_training_mask(rng: &mut Rng, n: usize) -> Result<Vec<bool>> {
    if n == 0 {
        return Err(Error::Input("cannot mask a zero-length grid".into()));
    }
    let ratio = (std::f64::consts::FRAC_PI_2 * rng.next_f64()).cos();
    let count = ((ratio * n as f64).ceil() as usize).clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = i + rng.next_below((n - i) as u64) as usize;
        idx.swap(i, j);
    }
    let mut mask = vec![false; n];
    for &i in &idx[..count] {
        mask[i] = true;
    }
    Ok(mask)
}

/// Assemble a batch from the source. Each sample derives its own substream of
/// `rng`, so batches are reproducible and order-independent.
pub fn make_batch(
    source: &SyntheticSource,
    config: &NestedConfig,
    batch_size: usize,
    label_drop_prob: f64,
    rng: &Rng,
) -> Result<Batch> {
    if batch_size == 0 {
        return Err(Error::Input("batch size must be positive".into()));
    }
    if source.vocab() != config.vocab_size {
        return Err(Error::Config(format!(
            "source vocabulary {} != model vocabulary {}",
            source.vocab(),
            config.vocab_size
        )));
    }
    if source.num_classes() > config.num_classes {
        return Err(Error::Config(format!(
            "source has {} classes, model embeds only {}",
            source.num_classes(),
            config.num_classes
        )));
    }
    if !(0.0..=1.0).contains(&label_drop_prob) {
        return Err(Error::Input(format!(
            "label drop probability must lie in [0, 1], got {label_drop_prob}"
        )));
    }
    let n = config.max_positions;
    let mut tokens = Vec::with_capacity(batch_size);
    let mut classes = Vec::with_capacity(batch_size);
    let mut masks = Vec::with_capacity(batch_size);
    let mut class_drop = Vec::with_capacity(batch_size);
    for s in 0..batch_size {
        let mut sub = rng.substream(s as u64);
        let class = sub.next_below(source.num_classes() as u64) as u32;
        tokens.push(source.sample_grid(class, n, &mut sub)?);
        classes.push(class);
        masks.push(sample_training_mask(&mut sub, n)?);
        class_drop.push(sub.next_f64() < label_drop_prob);
    }
    Ok(Batch { tokens, classes, masks, class_drop })
}

// =============================================================================
// Losses
// =============================================================================

fn log_softmax_f64<T: Real>(row: &[T]) -> Vec<f64> {
    let mut out: Vec<f64> = row.iter().map(|&x| to_f64(x)).collect();
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + out.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    for x in &mut out {
        *x -= lse;
    }
    out
}

fn check_logit_batch<T: Real>(
    op: &'static str,
    logits: &[Tensor<T>],
    masks: &[Vec<bool>],
) -> Result<usize> {
    if logits.len() != masks.len() {
        return Err(Error::Shape {
            op,
            detail: format!("{} logit tensors vs {} masks", logits.len(), masks.len()),
        });
    }
    let mut total = 0usize;
    for (s, (l, m)) in logits.iter().zip(masks).enumerate() {
        if l.shape().len() != 2 || l.shape()[0] != m.len() {
            return Err(Error::Shape {
                op,
                detail: format!(
                    "sample {s}: logits shape {:?} does not fit {} mask positions",
                    l.shape(),
                    m.len()
                ),
            });
        }
        total += m.iter().filter(|&&b| b).count();
    }
    if total == 0 {
        return Err(Error::Input(format!("{op}: mask selects no positions")));
    }
    Ok(total)
}

/// Mean cross-entropy against the clean tokens, over masked positions only.
/// Reductions run in f64 regardless of the model precision.
pub fn masked_ce<T: Real>(
    logits: &[Tensor<T>],
    targets: &[Vec<u32>],
    masks: &[Vec<bool>],
) -> Result<f64> {
    let total = check_logit_batch("masked_ce", logits, masks)?;
    if targets.len() != logits.len() {
        return Err(Error::Shape {
            op: "masked_ce",
            detail: format!("{} logit tensors vs {} target grids", logits.len(), targets.len()),
        });
    }
    let mut sum = 0.0;
    for (s, l) in logits.iter().enumerate() {
        let vocab = l.shape()[1];
        for (i, &m) in masks[s].iter().enumerate() {
            if !m {
                continue;
            }
            let y = targets[s][i] as usize;
            if y >= vocab {
                return Err(Error::Input(format!(
                    "target id {y} outside vocabulary of {vocab}"
                )));
            }
            sum -= log_softmax_f64(l.row(i))[y];
        }
    }
    Ok(sum / total as f64)
}

/// Mean cross-entropy of the student against the teacher's full softmax
/// (temperature 1), over masked positions only. The teacher is a value here:
/// gradients of this term propagate through the student logits alone.
pub fn distill_ce<T: Real>(
    student: &[Tensor<T>],
    teacher: &[Tensor<T>],
    masks: &[Vec<bool>],
) -> Result<f64> {
    let total = check_logit_batch("distill_ce", student, masks)?;
    if teacher.len() != student.len() {
        return Err(Error::Shape {
            op: "distill_ce",
            detail: format!("{} student tensors vs {} teacher tensors", student.len(), teacher.len()),
        });
    }
    let mut sum = 0.0;
    for (s, (sl, tl)) in student.iter().zip(teacher).enumerate() {
        if sl.shape() != tl.shape() {
            return Err(Error::Shape {
                op: "distill_ce",
                detail: format!(
                    "sample {s}: student shape {:?} vs teacher shape {:?}",
                    sl.shape(),
                    tl.shape()
                ),
            });
        }
        for (i, &m) in masks[s].iter().enumerate() {
            if !m {
                continue;
            }
            let ls = log_softmax_f64(sl.row(i));
            let lt = log_softmax_f64(tl.row(i));
            let mut h = 0.0;
            for (lsv, ltv) in ls.iter().zip(&lt) {
                h -= ltv.exp() * lsv;
            }
            sum += h;
        }
    }
    Ok(sum / total as f64)
}

/// Loss contribution of one slicing level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelLoss {
    pub factor: usize,
    /// Cross-entropy against the data, when the data term is active.
    pub gt: Option<f64>,
    /// Cross-entropy against the next-larger sibling, for sub-models when
    /// the distillation term is active.
    pub distill: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub alpha: f64,
    pub total: f64,
    /// Levels ordered smallest model first (largest factor first).
    pub levels: Vec<LevelLoss>,
}

/// Logits for every sample of `batch` at one slicing factor, through the
/// inference forward pass (full grid, no cache reuse).
pub fn level_logits<T: Real>(
    config: &NestedConfig,
    weights: &NestedWeights<T>,
    batch: &Batch,
    factor: usize,
) -> Result<Vec<Tensor<T>>> {
    let model = weights.slice_view(config, factor)?;
    let cache = KvCache::new(config.num_layers, config.max_positions);
    let mut out = Vec::with_capacity(batch.len());
    for s in 0..batch.len() {
        let ids = batch.input_ids(s, config.mask_token());
        let grid: Vec<(usize, u32)> = ids.into_iter().enumerate().collect();
        let class_id = if batch.class_drop[s] { None } else { Some(batch.classes[s]) };
        out.push(model.forward(&ForwardRequest { grid: &grid, class_id }, &cache)?.logits);
    }
    Ok(out)
}

fn factors_descending(config: &NestedConfig) -> Vec<usize> {
    config.factors.iter().rev().copied().collect()
}

/// Combine per-level logits into the blended loss. `logits` is ordered
/// smallest model first; the last level must be the full model, which always
/// takes the data term. When `frozen_teachers` is given (one entry per
/// sub-model level), those logits replace the live next-larger level as
/// teachers; the finite-difference checker uses this to hold teachers at
/// their stop-gradient values while students move.
fn loss_from_logits<T: Real>(
    factors_desc: &[usize],
    logits: &[Vec<Tensor<T>>],
    frozen_teachers: Option<&[Vec<Tensor<T>>]>,
    batch: &Batch,
    alpha: f64,
) -> Result<LossBreakdown> {
    let n_levels = factors_desc.len();
    debug_assert_eq!(logits.len(), n_levels);
    debug_assert_eq!(factors_desc.last(), Some(&1));
    if let Some(f) = frozen_teachers {
        debug_assert_eq!(f.len(), n_levels - 1);
    }
    let mut levels = Vec::with_capacity(n_levels);
    let mut total = 0.0;
    for (i, &factor) in factors_desc.iter().enumerate() {
        let full = i + 1 == n_levels;
        let gt = if full || alpha > 0.0 {
            Some(masked_ce(&logits[i], &batch.tokens, &batch.masks)?)
        } else {
            None
        };
        let distill = if !full && alpha < 1.0 {
            let teacher = match frozen_teachers {
                Some(f) => &f[i],
                None => &logits[i + 1],
            };
            Some(distill_ce(&logits[i], teacher, &batch.masks)?)
        } else {
            None
        };
        if full {
            total += gt.expect("full level always carries the data term");
        } else {
            total += alpha * gt.unwrap_or(0.0) + (1.0 - alpha) * distill.unwrap_or(0.0);
        }
        levels.push(LevelLoss { factor, gt, distill });
    }
    Ok(LossBreakdown { alpha, total: total / n_levels as f64, levels })
}

/// Blended training loss over all slicing levels at blend weight `alpha`.
pub fn total_loss<T: Real>(
    config: &NestedConfig,
    weights: &NestedWeights<T>,
    batch: &Batch,
    alpha: f64,
) -> Result<LossBreakdown> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Input(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    batch.validate(config)?;
    let factors_desc = factors_descending(config);
    let mut logits = Vec::with_capacity(factors_desc.len());
    for &factor in &factors_desc {
        logits.push(level_logits(config, weights, batch, factor)?);
    }
    loss_from_logits(&factors_desc, &logits, None, batch, alpha)
}

// =============================================================================
// Gradients and steps
// =============================================================================

fn softmax_from_log(ls: &[f64]) -> Vec<f64> {
    ls.iter().map(|&x| x.exp()).collect()
}

/// Loss plus its gradient, via one recorded forward per level and a shared
/// reverse pass. Gradients of the distillation terms flow through students
/// only; teacher logits enter as values.
pub fn loss_and_grads<T: Real>(
    config: &NestedConfig,
    weights: &NestedWeights<T>,
    batch: &Batch,
    alpha: f64,
) -> Result<(LossBreakdown, NestedWeights<T>)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Input(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    batch.validate(config)?;
    let factors_desc = factors_descending(config);
    let n_levels = factors_desc.len();
    let b = batch.len();
    let mask_token = config.mask_token();

    let mut tapes = Vec::with_capacity(n_levels);
    let mut logits: Vec<Vec<Tensor<T>>> = Vec::with_capacity(n_levels);
    for &factor in &factors_desc {
        let model = weights.slice_view(config, factor)?;
        let mut level_tapes = Vec::with_capacity(b);
        let mut level_logits = Vec::with_capacity(b);
        for s in 0..b {
            let ids = batch.input_ids(s, mask_token);
            let tape = forward_tape(&model, &ids, batch.class_row(s, config)?)?;
            level_logits.push(tape.logits.clone());
            level_tapes.push(tape);
        }
        tapes.push(level_tapes);
        logits.push(level_logits);
    }

    let breakdown = loss_from_logits(&factors_desc, &logits, None, batch, alpha)?;
    let m_total = batch.total_masked() as f64;
    let level_weight = 1.0 / n_levels as f64;

    let mut grads = NestedWeights::zeros(config);
    let vocab = config.vocab_size;
    for (i, &factor) in factors_desc.iter().enumerate() {
        let full = i + 1 == n_levels;
        let c_gt = if full { level_weight } else { alpha * level_weight };
        let c_kd = if full { 0.0 } else { (1.0 - alpha) * level_weight };
        if c_gt == 0.0 && c_kd == 0.0 {
            continue;
        }
        let model = weights.slice_view(config, factor)?;
        for s in 0..b {
            let n = batch.tokens[s].len();
            let mut d = vec![0.0f64; n * vocab];
            for (pos, &m) in batch.masks[s].iter().enumerate() {
                if !m {
                    continue;
                }
                let ls = log_softmax_f64(logits[i][s].row(pos));
                let p = softmax_from_log(&ls);
                let row = &mut d[pos * vocab..(pos + 1) * vocab];
                if c_gt > 0.0 {
                    for (dv, &pv) in row.iter_mut().zip(&p) {
                        *dv += c_gt * pv;
                    }
                    row[batch.tokens[s][pos] as usize] -= c_gt;
                }
                if c_kd > 0.0 {
                    let q = softmax_from_log(&log_softmax_f64(logits[i + 1][s].row(pos)));
                    for ((dv, &pv), &qv) in row.iter_mut().zip(&p).zip(&q) {
                        *dv += c_kd * (pv - qv);
                    }
                }
            }
            let d_logits = Tensor::new(
                d.into_iter().map(|x| real::<T>(x / m_total)).collect(),
                vec![n, vocab],
            )?;
            backward_tape(&model, &tapes[i][s], &d_logits, &mut grads)?;
        }
    }
    Ok((breakdown, grads))
}

/// One optimization step's log record.
#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub step: usize,
    pub alpha: f64,
    pub total: f64,
    pub levels: Vec<LevelLoss>,
}

impl TrainRecord {
    /// One line per step: step, alpha, blended loss, then per-level data and
    /// distillation cross-entropies ("-" where a term is inactive).
    #[must_use]
    pub fn log_line(&self) -> String {
        let mut line =
            format!("step {:>6} alpha {:.4} loss {:.6}", self.step, self.alpha, self.total);
        for lv in &self.levels {
            line.push_str(&format!(" | p{} gt ", lv.factor));
            match lv.gt {
                Some(v) => line.push_str(&format!("{v:.4}")),
                None => line.push('-'),
            }
            line.push_str(" kd ");
            match lv.distill {
                Some(v) => line.push_str(&format!("{v:.4}")),
                None => line.push('-'),
            }
        }
        line
    }
}

/// Apply one training step at schedule position `step`.
pub fn train_step<T: Real>(
    config: &NestedConfig,
    weights: &mut NestedWeights<T>,
    opt: &mut Adam<T>,
    batch: &Batch,
    step: usize,
    train: &TrainConfig,
) -> Result<TrainRecord> {
    train.validate()?;
    let alpha = train.loss_mode.alpha(step.min(train.total_steps), train.total_steps);
    let (breakdown, grads) = loss_and_grads(config, weights, batch, alpha)?;
    if !breakdown.total.is_finite() {
        return Err(Error::Train(format!(
            "loss diverged at step {step}: total {} (alpha {alpha:.4})",
            breakdown.total
        )));
    }
    opt.step(weights, &grads)?;
    Ok(TrainRecord { step, alpha, total: breakdown.total, levels: breakdown.levels })
}

/// Full training run: seeded init, one sampled batch per step, records out.
/// Weight init, batch draws, and the step loop all derive from `train.seed`,
/// so equal configurations reproduce bit-identical weights.
pub fn run_training<T: Real>(
    config: &NestedConfig,
    train: &TrainConfig,
    source: &SyntheticSource,
    mut on_record: impl FnMut(&TrainRecord, &NestedWeights<T>),
) -> Result<(NestedWeights<T>, Adam<T>, Vec<TrainRecord>)> {
    train.validate()?;
    let base = Rng::new(train.seed);
    let mut init_rng = base.substream(0);
    let mut weights = NestedWeights::init(config, &mut init_rng);
    let mut opt = Adam::new(config, train.learning_rate)?;
    let mut records = Vec::with_capacity(train.total_steps);
    for t in 0..train.total_steps {
        opt.set_learning_rate(train.learning_rate_at(t))?;
        let batch_rng = base.substream(1 + t as u64);
        let batch =
            make_batch(source, config, train.batch_size, train.label_drop_prob, &batch_rng)?;
        let record = train_step(config, &mut weights, &mut opt, &batch, t, train)?;
        on_record(&record, &weights);
        records.push(record);
    }
    Ok((weights, opt, records))
}

// =============================================================================
// Verification
// =============================================================================

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub params_checked: usize,
}

/// Compare analytic gradients against central finite differences on randomly
/// probed parameters from every tensor, in f64. Teachers are frozen at the
/// base point for the difference quotient, which is exactly the function the
/// stop-gradient derivative belongs to; at the base point its value and the
/// true training loss coincide.
pub fn grad_check(
    config: &NestedConfig,
    weights: &NestedWeights<f64>,
    batch: &Batch,
    alpha: f64,
    epsilon: f64,
    probes_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::Input(format!("epsilon must be positive, got {epsilon}")));
    }
    if probes_per_tensor == 0 {
        return Err(Error::Input("need at least one probe per tensor".into()));
    }
    let (_, grads) = loss_and_grads(config, weights, batch, alpha)?;

    let factors_desc = factors_descending(config);
    let mut frozen = Vec::with_capacity(factors_desc.len() - 1);
    for i in 0..factors_desc.len() - 1 {
        frozen.push(level_logits(config, weights, batch, factors_desc[i + 1])?);
    }
    let eval = |w: &NestedWeights<f64>| -> Result<f64> {
        let mut logits = Vec::with_capacity(factors_desc.len());
        for &factor in &factors_desc {
            logits.push(level_logits(config, w, batch, factor)?);
        }
        Ok(loss_from_logits(&factors_desc, &logits, Some(&frozen), batch, alpha)?.total)
    };

    let mut work = weights.clone();
    let base = Rng::new(seed);
    let mut max_rel_err: f64 = 0.0;
    let mut params_checked = 0usize;
    let tensor_count = weights.param_views().len();
    for ti in 0..tensor_count {
        let len = weights.param_views()[ti].data.len();
        let mut sel = base.substream(ti as u64);
        for _ in 0..probes_per_tensor {
            let idx = sel.next_below(len as u64) as usize;
            let orig = weights.param_views()[ti].data[idx];
            work.param_views_mut()[ti].data[idx] = orig + epsilon;
            let up = eval(&work)?;
            work.param_views_mut()[ti].data[idx] = orig - epsilon;
            let down = eval(&work)?;
            work.param_views_mut()[ti].data[idx] = orig;
            let fd = (up - down) / (2.0 * epsilon);
            let an = grads.param_views()[ti].data[idx];
            let denom = an.abs().max(fd.abs());
            let err = if denom < 1e-6 { (an - fd).abs() } else { (an - fd).abs() / denom };
            max_rel_err = max_rel_err.max(err);
            params_checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err, params_checked })
}

/// Held-out NLL of one slicing level under the reconstruction protocol the
/// source's `conditional_entropy` floors: sample a grid, mask a full suffix
/// starting at a uniform cut, and score the model's prediction at the first
/// masked position. With a Markov source the best achievable value is
/// exactly the source's conditional entropy for the same grid length.
pub fn eval_nll<T: Real>(
    config: &NestedConfig,
    weights: &NestedWeights<T>,
    factor: usize,
    source: &SyntheticSource,
    num_samples: usize,
    seed: u64,
) -> Result<f64> {
    if num_samples == 0 {
        return Err(Error::Input("evaluation needs at least one sample".into()));
    }
    let n = config.max_positions;
    if n < 2 {
        return Err(Error::Input("suffix evaluation needs grids of at least 2 positions".into()));
    }
    if source.vocab() != config.vocab_size {
        return Err(Error::Config(format!(
            "source vocabulary {} != model vocabulary {}",
            source.vocab(),
            config.vocab_size
        )));
    }
    let model = weights.slice_view(config, factor)?;
    let cache = KvCache::new(config.num_layers, config.max_positions);
    let base = Rng::new(seed);
    let mut sum = 0.0;
    for s in 0..num_samples {
        let mut sub = base.substream(s as u64);
        let class = (s % source.num_classes()) as u32;
        let tokens = source.sample_grid(class, n, &mut sub)?;
        let cut = 1 + sub.next_below((n - 1) as u64) as usize;
        let grid: Vec<(usize, u32)> = (0..n)
            .map(|i| (i, if i < cut { tokens[i] } else { config.mask_token() }))
            .collect();
        let out = model.forward(&ForwardRequest { grid: &grid, class_id: Some(class) }, &cache)?;
        sum -= log_softmax_f64(out.logits.row(cut))[tokens[cut] as usize];
    }
    Ok(sum / num_samples as f64)
}

// =============================================================================
// Tests
// =============================================================================

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> NestedConfig {
        NestedConfig::new(2, 32, 64, 4, 8, 16, 4, 16, vec![1, 2, 4, 8]).unwrap()
    }

    fn two_level_config() -> NestedConfig {
        NestedConfig::new(1, 16, 32, 2, 8, 8, 2, 8, vec![1, 2]).unwrap()
    }

    fn test_batch(config: &NestedConfig, batch_size: usize, seed: u64) -> Batch {
        let source = SyntheticSource::new(config.num_classes, config.vocab_size, seed).unwrap();
        make_batch(&source, config, batch_size, 0.25, &Rng::new(seed)).unwrap()
    }

    // -------------------------------------------------------------- masking

    #[test]
    fn mask_fraction_follows_the_cosine_law() {
        let mut rng = Rng::new(11);
        let n = 256;
        let mut sum = 0.0;
        let draws = 100_000;
        for _ in 0..draws {
            let mask = sample_training_mask(&mut rng, n).unwrap();
            let count = mask.iter().filter(|&&b| b).count();
            assert!(count >= 1);
            sum += count as f64 / n as f64;
        }
        let mean = sum / draws as f64;
        let expect = 2.0 / std::f64::consts::PI;
        // Ceiling and the >=1 floor bias the mean up by at most 1/n.
        assert!(
            (mean - expect).abs() < 0.01,
            "mean masked fraction {mean}, expected about {expect}"
        );
    }

    #[test]
    fn mask_positions_are_uniform() {
        let mut rng = Rng::new(7);
        let n = 16;
        let draws = 40_000;
        let mut hits = vec![0usize; n];
        let mut total = 0usize;
        for _ in 0..draws {
            for (i, &m) in sample_training_mask(&mut rng, n).unwrap().iter().enumerate() {
                if m {
                    hits[i] += 1;
                    total += 1;
                }
            }
        }
        let expect = total as f64 / n as f64;
        for (i, &h) in hits.iter().enumerate() {
            assert!(
                (h as f64 - expect).abs() < 0.05 * expect,
                "position {i}: {h} hits vs expected {expect}"
            );
        }
    }

    #[test]
    fn single_position_grids_always_mask_it() {
        let mut rng = Rng::new(3);
        for _ in 0..100 {
            assert_eq!(sample_training_mask(&mut rng, 1).unwrap(), vec![true]);
        }
        assert!(sample_training_mask(&mut rng, 0).is_err());
    }

    // -------------------------------------------------------------- batches

    #[test]
    fn make_batch_is_deterministic_and_valid() {
        let cfg = tiny_config();
        let source = SyntheticSource::new(cfg.num_classes, cfg.vocab_size, 5).unwrap();
        let a = make_batch(&source, &cfg, 8, 0.1, &Rng::new(9)).unwrap();
        let b = make_batch(&source, &cfg, 8, 0.1, &Rng::new(9)).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.classes, b.classes);
        assert_eq!(a.masks, b.masks);
        assert_eq!(a.class_drop, b.class_drop);
        a.validate(&cfg).unwrap();
        let c = make_batch(&source, &cfg, 8, 0.1, &Rng::new(10)).unwrap();
        assert_ne!(a.tokens, c.tokens);
    }

    #[test]
    fn label_drop_fraction_matches_the_probability() {
        let cfg = tiny_config();
        let source = SyntheticSource::new(cfg.num_classes, cfg.vocab_size, 5).unwrap();
        let batch = make_batch(&source, &cfg, 20_000, 0.1, &Rng::new(1)).unwrap();
        let dropped = batch.class_drop.iter().filter(|&&d| d).count();
        let frac = dropped as f64 / batch.len() as f64;
        assert!((frac - 0.1).abs() < 0.01, "drop fraction {frac}");
        let none = make_batch(&source, &cfg, 500, 0.0, &Rng::new(1)).unwrap();
        assert!(none.class_drop.iter().all(|&d| !d));
        let all = make_batch(&source, &cfg, 500, 1.0, &Rng::new(1)).unwrap();
        assert!(all.class_drop.iter().all(|&d| d));
    }

    #[test]
    fn masked_positions_feed_the_sentinel() {
        let cfg = tiny_config();
        let batch = test_batch(&cfg, 4, 2);
        for s in 0..batch.len() {
            let ids = batch.input_ids(s, cfg.mask_token());
            for (i, &m) in batch.masks[s].iter().enumerate() {
                if m {
                    assert_eq!(ids[i], cfg.mask_token());
                } else {
                    assert_eq!(ids[i], batch.tokens[s][i]);
                    assert!(ids[i] < cfg.vocab_size as u32);
                }
            }
        }
    }

    #[test]
    fn batch_validation_rejects_malformed_batches() {
        let cfg = tiny_config();
        let good = test_batch(&cfg, 2, 3);
        good.validate(&cfg).unwrap();

        let mut short = good.clone();
        short.tokens[0].pop();
        short.masks[0].pop();
        assert!(short.validate(&cfg).is_err());

        let mut unmasked = good.clone();
        unmasked.masks[1].iter_mut().for_each(|m| *m = false);
        assert!(unmasked.validate(&cfg).is_err());

        let mut bad_id = good.clone();
        bad_id.tokens[0][0] = cfg.vocab_size as u32;
        assert!(bad_id.validate(&cfg).is_err());

        let mut bad_class = good.clone();
        bad_class.classes[0] = cfg.num_classes as u32;
        assert!(bad_class.validate(&cfg).is_err());

        let mut ragged = good;
        ragged.classes.pop();
        assert!(ragged.validate(&cfg).is_err());
    }

    // --------------------------------------------------------------- losses

    fn logits_tensor(rows: Vec<Vec<f64>>) -> Tensor<f64> {
        let n = rows.len();
        let v = rows[0].len();
        Tensor::new(rows.into_iter().flatten().collect(), vec![n, v]).unwrap()
    }

    #[test]
    fn masked_ce_handles_the_textbook_cases() {
        // Confident correct prediction: loss effectively zero.
        let sharp = logits_tensor(vec![vec![40.0, 0.0, 0.0, 0.0], vec![0.0, 40.0, 0.0, 0.0]]);
        let ce = masked_ce(&[sharp], &[vec![0, 1]], &[vec![true, true]]).unwrap();
        assert!(ce < 1e-12, "{ce}");

        // Uniform logits: exactly ln(vocab) per position.
        let flat = logits_tensor(vec![vec![3.0; 4], vec![3.0; 4]]);
        let ce = masked_ce(&[flat], &[vec![2, 0]], &[vec![true, true]]).unwrap();
        assert!((ce - 4.0f64.ln()).abs() < 1e-12);

        // Unmasked rows are ignored entirely.
        let mixed = logits_tensor(vec![vec![40.0, 0.0, 0.0, 0.0], vec![f64::NAN; 4]]);
        let ce = masked_ce(&[mixed], &[vec![0, 0]], &[vec![true, false]]).unwrap();
        assert!(ce < 1e-12);
    }

    #[test]
    fn masked_ce_matches_an_independent_reference() {
        let mut rng = Rng::new(21);
        let (n, v) = (6, 9);
        let rows: Vec<Vec<f64>> =
            (0..n).map(|_| (0..v).map(|_| 3.0 * rng.next_normal()).collect()).collect();
        let targets: Vec<u32> = (0..n).map(|_| rng.next_below(v as u64) as u32).collect();
        let mask: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();

        // Reference: direct -log(exp(l_y)/sum exp(l)) without max shifting.
        let mut reference = 0.0;
        let mut m = 0;
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let z: f64 = rows[i].iter().map(|x| x.exp()).sum();
            reference -= (rows[i][targets[i] as usize].exp() / z).ln();
            m += 1;
        }
        reference /= m as f64;

        let ce = masked_ce(&[logits_tensor(rows)], &[targets], &[mask]).unwrap();
        assert!((ce - reference).abs() < 1e-9, "{ce} vs {reference}");
    }

    #[test]
    fn masked_ce_rejects_empty_masks_and_bad_shapes() {
        let l = logits_tensor(vec![vec![0.0; 4]; 2]);
        assert!(masked_ce(&[l.clone()], &[vec![0, 0]], &[vec![false, false]]).is_err());
        assert!(masked_ce(&[l.clone()], &[vec![0, 0]], &[vec![true]]).is_err());
        assert!(masked_ce(&[l.clone()], &[vec![9, 0]], &[vec![true, true]]).is_err());
        assert!(masked_ce(&[l], &[], &[vec![true, true]]).is_err());
    }

    #[test]
    fn distill_against_itself_scores_the_teacher_entropy() {
        let mut rng = Rng::new(33);
        let rows: Vec<Vec<f64>> =
            (0..3).map(|_| (0..5).map(|_| 2.0 * rng.next_normal()).collect()).collect();
        let t = logits_tensor(rows.clone());
        let kd = distill_ce(&[t.clone()], &[t], &[vec![true; 3]]).unwrap();
        let mut entropy = 0.0;
        for row in &rows {
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            for x in row {
                let p = x.exp() / z;
                entropy -= p * p.ln();
            }
        }
        entropy /= 3.0;
        assert!((kd - entropy).abs() < 1e-9, "{kd} vs {entropy}");
    }

    #[test]
    fn one_hot_teachers_reduce_distillation_to_hard_targets() {
        let mut rng = Rng::new(34);
        let student =
            logits_tensor((0..4).map(|_| (0..6).map(|_| rng.next_normal()).collect()).collect());
        let hard: Vec<u32> = (0..4).map(|_| rng.next_below(6) as u32).collect();
        let teacher = logits_tensor(
            hard.iter()
                .map(|&y| (0..6).map(|v| if v == y as usize { 200.0 } else { 0.0 }).collect())
                .collect(),
        );
        let mask = vec![true, false, true, true];
        let kd = distill_ce(&[student.clone()], &[teacher], &[mask.clone()]).unwrap();
        let ce = masked_ce(&[student], &[hard], &[mask]).unwrap();
        assert!((kd - ce).abs() < 1e-9, "{kd} vs {ce}");
    }

    #[test]
    fn distill_ce_validates_its_inputs() {
        let a = logits_tensor(vec![vec![0.0; 4]; 2]);
        let b = logits_tensor(vec![vec![0.0; 5]; 2]);
        assert!(distill_ce(&[a.clone()], &[b], &[vec![true, true]]).is_err());
        assert!(distill_ce(&[a.clone()], &[a.clone()], &[vec![false, false]]).is_err());
        assert!(distill_ce(&[a.clone()], &[], &[vec![true, true]]).is_err());
        let _ = a;
    }

    // ---------------------------------------------------- blended total loss

    #[test]
    fn pure_data_loss_averages_per_level_cross_entropies() {
        let cfg = tiny_config();
        let weights = NestedWeights::<f64>::init(&cfg, &mut Rng::new(4));
        let batch = test_batch(&cfg, 3, 6);
        let breakdown = total_loss(&cfg, &weights, &batch, 1.0).unwrap();
        let mut expect = 0.0;
        for &factor in &[8, 4, 2, 1] {
            let l = level_logits(&cfg, &weights, &batch, factor).unwrap();
            expect += masked_ce(&l, &batch.tokens, &batch.masks).unwrap();
        }
        expect /= 4.0;
        assert!((breakdown.total - expect).abs() < 1e-12);
        assert_eq!(breakdown.levels.len(), 4);
        assert_eq!(breakdown.levels[0].factor, 8);
        assert_eq!(breakdown.levels[3].factor, 1);
        for lv in &breakdown.levels {
            assert!(lv.gt.is_some());
            assert!(lv.distill.is_none());
        }
    }

    #[test]
    fn pure_distill_loss_anchors_only_the_full_model_to_data() {
        let cfg = tiny_config();
        let weights = NestedWeights::<f64>::init(&cfg, &mut Rng::new(8));
        let batch = test_batch(&cfg, 3, 7);
        let breakdown = total_loss(&cfg, &weights, &batch, 0.0).unwrap();
        let logits: Vec<_> =
            [8, 4, 2, 1].iter().map(|&f| level_logits(&cfg, &weights, &batch, f).unwrap()).collect();
        let mut expect = masked_ce(&logits[3], &batch.tokens, &batch.masks).unwrap();
        for i in 0..3 {
            expect += distill_ce(&logits[i], &logits[i + 1], &batch.masks).unwrap();
        }
        expect /= 4.0;
        assert!((breakdown.total - expect).abs() < 1e-12);
        for (i, lv) in breakdown.levels.iter().enumerate() {
            if i < 3 {
                assert!(lv.gt.is_none());
                assert!(lv.distill.is_some());
            } else {
                assert!(lv.gt.is_some());
                assert!(lv.distill.is_none());
            }
        }
    }

    #[test]
    fn midpoint_alpha_blends_both_terms_on_the_sub_model() {
        let cfg = two_level_config();
        let weights = NestedWeights::<f64>::init(&cfg, &mut Rng::new(12));
        let batch = test_batch(&cfg, 2, 13);
        let breakdown = total_loss(&cfg, &weights, &batch, 0.5).unwrap();
        let half = level_logits(&cfg, &weights, &batch, 2).unwrap();
        let full = level_logits(&cfg, &weights, &batch, 1).unwrap();
        let expect = (masked_ce(&full, &batch.tokens, &batch.masks).unwrap()
            + 0.5 * masked_ce(&half, &batch.tokens, &batch.masks).unwrap()
            + 0.5 * distill_ce(&half, &full, &batch.masks).unwrap())
            / 2.0;
        assert!((breakdown.total - expect).abs() < 1e-12);
    }

    #[test]
    fn loss_mode_endpoints_match_the_pinned_modes() {
        let cfg = two_level_config();
        let weights = NestedWeights::<f64>::init(&cfg, &mut Rng::new(14));
        let batch = test_batch(&cfg, 2, 15);
        let t_total = 80;
        let start = LossMode::GtToDistill.alpha(0, t_total);
        let end = LossMode::GtToDistill.alpha(t_total, t_total);
        assert_eq!(start, LossMode::GtOnly.alpha(0, t_total));
        assert_eq!(end, LossMode::DistillOnly.alpha(t_total, t_total));
        let at_start = total_loss(&cfg, &weights, &batch, start).unwrap();
        let pinned_gt = total_loss(&cfg, &weights, &batch, 1.0).unwrap();
        assert_eq!(at_start.total, pinned_gt.total);
        let at_end = total_loss(&cfg, &weights, &batch, end).unwrap();
        let pinned_kd = total_loss(&cfg, &weights, &batch, 0.0).unwrap();
        assert_eq!(at_end.total, pinned_kd.total);
        assert_eq!(LossMode::GtToDistill.alpha(20, 80), 0.75);
    }

    #[test]
    fn loss_mode_names_round_trip() {
        for mode in [LossMode::GtOnly, LossMode::DistillOnly, LossMode::GtToDistill] {
            assert_eq!(LossMode::parse(mode.name()).unwrap(), mode);
        }
        assert!(LossMode::parse("half-and-half").is_err());
    }

    // ------------------------------------------------------------- training

    #[test]
    fn train_steps_are_deterministic() {
        let cfg = two_level_config();
        let source = SyntheticSource::new(cfg.num_classes, cfg.vocab_size, 3).unwrap();
        let train = TrainConfig::new(4, 3, 1e-3, LossMode::GtToDistill, 77);
        let run = || {
            let mut lines = Vec::new();
            let (w, opt, records) =
                run_training::<f32>(&cfg, &train, &source, |r, _| lines.push(r.log_line())).unwrap();
            (w, opt.steps(), records.len(), lines)
        };
        let (w_a, steps_a, recs_a, lines_a) = run();
        let (w_b, steps_b, recs_b, lines_b) = run();
        assert_eq!(steps_a, 4);
        assert_eq!(steps_a, steps_b);
        assert_eq!(recs_a, recs_b);
        assert_eq!(lines_a, lines_b);
        assert_eq!(w_a, w_b);
    }

    #[test]
    fn diverged_losses_surface_as_training_errors() {
        let cfg = two_level_config();
        let mut weights = NestedWeights::<f32>::init(&cfg, &mut Rng::new(1));
        weights.output_head.data_mut()[0] = f32::INFINITY;
        let mut opt = Adam::new(&cfg, 1e-3).unwrap();
        let batch = test_batch(&cfg, 2, 9);
        let train = TrainConfig::new(10, 2, 1e-3, LossMode::GtOnly, 1);
        let err = train_step(&cfg, &mut weights, &mut opt, &batch, 0, &train).unwrap_err();
        assert!(matches!(err, Error::Train(_)), "{err}");
    }

    #[test]
    fn train_config_validation() {
        let ok = TrainConfig::new(10, 2, 1e-3, LossMode::GtOnly, 1);
        ok.validate().unwrap();
        for bad in [
            TrainConfig { total_steps: 0, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { learning_rate: 0.0, ..ok.clone() },
            TrainConfig { learning_rate: f64::NAN, ..ok.clone() },
            TrainConfig { label_drop_prob: 1.5, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn log_lines_carry_every_level() {
        let rec = TrainRecord {
            step: 12,
            alpha: 0.25,
            total: 1.5,
            levels: vec![
                LevelLoss { factor: 2, gt: Some(2.0), distill: Some(0.5) },
                LevelLoss { factor: 1, gt: Some(1.75), distill: None },
            ],
        };
        assert_eq!(
            rec.log_line(),
            "step     12 alpha 0.2500 loss 1.500000 | p2 gt 2.0000 kd 0.5000 | p1 gt 1.7500 kd -"
        );
    }

    // ----------------------------------------------------------- evaluation

    #[test]
    fn untrained_models_score_near_the_uniform_baseline() {
        let cfg = tiny_config();
        let weights = NestedWeights::<f32>::init(&cfg, &mut Rng::new(6));
        let source = SyntheticSource::new(cfg.num_classes, cfg.vocab_size, 11).unwrap();
        let nll = eval_nll(&cfg, &weights, 1, &source, 400, 50).unwrap();
        let uniform = (cfg.vocab_size as f64).ln();
        assert!((nll - uniform).abs() < 0.05, "untrained NLL {nll}, uniform {uniform}");
        // No predictor beats the source's conditional entropy.
        let floor = source.conditional_entropy(cfg.max_positions).unwrap();
        assert!(nll > floor, "NLL {nll} under the entropy floor {floor}");
    }

    #[test]
    fn eval_nll_validates_its_inputs() {
        let cfg = tiny_config();
        let weights = NestedWeights::<f32>::init(&cfg, &mut Rng::new(6));
        let source = SyntheticSource::new(cfg.num_classes, cfg.vocab_size, 11).unwrap();
        assert!(eval_nll(&cfg, &weights, 1, &source, 0, 1).is_err());
        assert!(eval_nll(&cfg, &weights, 3, &source, 10, 1).is_err());
        let other = SyntheticSource::new(cfg.num_classes, cfg.vocab_size * 2, 11).unwrap();
        assert!(eval_nll(&cfg, &weights, 1, &other, 10, 1).is_err());
    }

    // ------------------------------------------------------ gradient checks

    #[test]
    fn gradients_match_finite_differences_in_every_mode() {
        let cfg = two_level_config();
        let weights = NestedWeights::<f64>::init(&cfg, &mut Rng::new(19));
        let batch = test_batch(&cfg, 2, 20);
        for &alpha in &[1.0, 0.0, 0.5] {
            let report = grad_check(&cfg, &weights, &batch, alpha, 1e-4, 2, 99).unwrap();
            assert!(
                report.max_rel_err <= 1e-4,
                "alpha {alpha}: max rel err {}",
                report.max_rel_err
            );
            assert_eq!(report.params_checked, 2 * weights.param_views().len());
        }
    }

    #[test]
    fn distillation_moves_the_student_but_never_the_teacher() {
        // Isolate the distillation term with the half-width student and the
        // full model as teacher. Backward runs through the student tape only,
        // so parameters the student never reads (the upper half of each head
        // and MLP slice) must get exactly zero gradient, even though the real
        // loss does depend on them through the teacher. A central difference
        // on one such parameter confirms that dependence is nonzero.
        let cfg = two_level_config();
        let weights = NestedWeights::<f64>::init(&cfg, &mut Rng::new(25));
        let batch = test_batch(&cfg, 2, 26);
        let mask_token = cfg.mask_token();
        let m_total = batch.total_masked() as f64;
        let (keep, _mlp_keep) = cfg.slice_dims(2).unwrap();

        let student_model = weights.slice_view(&cfg, 2).unwrap();
        let kd_of = |w: &NestedWeights<f64>| -> f64 {
            let s = level_logits(&cfg, w, &batch, 2).unwrap();
            let t = level_logits(&cfg, w, &batch, 1).unwrap();
            distill_ce(&s, &t, &batch.masks).unwrap()
        };

        let teacher_logits = level_logits(&cfg, &weights, &batch, 1).unwrap();
        let mut grads = NestedWeights::<f64>::zeros(&cfg);
        for s in 0..batch.len() {
            let ids = batch.input_ids(s, mask_token);
            let tape = forward_tape(&student_model, &ids, batch.class_row(s, &cfg).unwrap()).unwrap();
            let n = ids.len();
            let v = cfg.vocab_size;
            let mut d = vec![0.0f64; n * v];
            for (pos, &m) in batch.masks[s].iter().enumerate() {
                if !m {
                    continue;
                }
                let p = softmax_from_log(&log_softmax_f64(tape.logits.row(pos)));
                let q = softmax_from_log(&log_softmax_f64(teacher_logits[s].row(pos)));
                for ((dv, &pv), &qv) in
                    d[pos * v..(pos + 1) * v].iter_mut().zip(&p).zip(&q)
                {
                    *dv = (pv - qv) / m_total;
                }
            }
            let d_logits = Tensor::new(d, vec![n, v]).unwrap();
            backward_tape(&student_model, &tape, &d_logits, &mut grads).unwrap();
        }

        // Teacher-only weight columns carry exactly zero analytic gradient.
        for layer in &grads.layers {
            for r in 0..cfg.hidden {
                for h in 0..cfg.num_heads {
                    for j in keep..cfg.head_dim {
                        assert_eq!(layer.wq.row(r)[h * cfg.head_dim + j], 0.0);
                    }
                }
            }
        }

        // But the distillation loss itself does move with such a column:
        // scan one teacher-only column across all rows and take the largest
        // finite-difference response.
        let mut work = weights.clone();
        let probe_col = cfg.head_dim - 1;
        let eps = 1e-5;
        let mut strongest: f64 = 0.0;
        for r in 0..cfg.hidden {
            let flat = r * cfg.attn_width() + probe_col;
            let orig = work.layers[0].wq.data()[flat];
            work.layers[0].wq.data_mut()[flat] = orig + eps;
            let up = kd_of(&work);
            work.layers[0].wq.data_mut()[flat] = orig - eps;
            let down = kd_of(&work);
            work.layers[0].wq.data_mut()[flat] = orig;
            strongest = strongest.max(((up - down) / (2.0 * eps)).abs());
        }
        assert!(strongest > 1e-7, "teacher path finite differences all near zero ({strongest})");
    }

    #[test]
    fn learning_rate_decay_is_linear_with_a_floor() {
        let mut train = TrainConfig::new(1000, 4, 1e-3, LossMode::GtOnly, 0);
        assert_eq!(train.learning_rate_at(0), 1e-3);
        assert_eq!(train.learning_rate_at(500), 1e-3);

        train.min_lr_fraction = 0.05;
        train.validate().unwrap();
        assert_eq!(train.learning_rate_at(0), 1e-3);
        assert!((train.learning_rate_at(500) - 5e-4).abs() < 1e-18);
        assert_eq!(train.learning_rate_at(990), 0.05 * 1e-3);

        train.min_lr_fraction = 0.0;
        assert!(train.validate().is_err());
        train.min_lr_fraction = 1.5;
        assert!(train.validate().is_err());
    }
}
