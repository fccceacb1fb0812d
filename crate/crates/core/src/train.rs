//! Mini-batch Adam training with an increasing barrier weight and an
//! adaptive barrier bound, plus a finite-difference gradient checker.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::EventSequence;
use crate::exec::Parallelism;
use crate::model::KernelModel;
use crate::objective::{evaluate, min_grid_intensity, total_loss_and_grad, LossKind, ObjectiveConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Initial barrier weight; the penalty enters the objective as `p / w`.
    pub w0: f64,
    /// Per-epoch multiplier of `w`.
    pub growth: f64,
    /// Margin kept between the barrier bound and the smallest grid intensity.
    pub epsilon: f64,
    pub loss: LossKind,
    /// Batch-order seed; experiment files set it from their top-level seed.
    #[serde(skip)]
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Step halvings tried when an update leaves the feasible region.
    pub max_backtracks: usize,
    #[serde(skip)]
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-2,
            w0: 1.0,
            growth: 1.5,
            epsilon: 1e-3,
            loss: LossKind::Nll,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_backtracks: 10,
            parallelism: Parallelism::Auto,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                field: field.into(),
                message: message.into(),
            })
        };
        if !(self.growth > 1.0) {
            return bad("growth", "must be greater than 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.w0 > 0.0) {
            return bad("w0", "must be positive");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon", "must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1", "moment decay rates must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", "must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub epoch: usize,
    pub validation_loss: f64,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub w: f64,
    pub bound: f64,
    pub steps: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub best: Option<Snapshot>,
}

/// One optimizer step, or the end-of-epoch summary when `step` is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: Option<u64>,
    pub data_term: f64,
    pub integral_term: f64,
    pub barrier_term: f64,
    pub loss: f64,
    pub total: f64,
    pub w: f64,
    pub b: f64,
    pub min_grid_intensity: Option<f64>,
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub backtracks: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub skipped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_loss: Option<f64>,
}

fn is_zero(x: &usize) -> bool {
    *x == 0
}

pub struct TrainOutcome {
    pub model: KernelModel,
    pub state: TrainState,
    pub log: Vec<LogRecord>,
}

/// Seeded shuffle split of `0..n` into `(kept, held_out)` index lists, each
/// ascending, with `round(fraction * n)` held out.
pub fn split_indices(n: usize, held_out_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&held_out_fraction) {
        return Err(Error::invalid("held-out fraction must lie in [0, 1)"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (held_out_fraction * n as f64).round() as usize;
    let mut held = idx[..cut].to_vec();
    let mut kept = idx[cut..].to_vec();
    held.sort_unstable();
    kept.sort_unstable();
    Ok((kept, held))
}

/// [`split_indices`] applied to `sequences`.
pub fn split(
    sequences: &[EventSequence],
    held_out_fraction: f64,
    seed: u64,
) -> Result<(Vec<EventSequence>, Vec<EventSequence>)> {
    let (kept, held) = split_indices(sequences.len(), held_out_fraction, seed)?;
    let pick = |ids: Vec<usize>| ids.into_iter().map(|i| sequences[i].clone()).collect();
    Ok((pick(kept), pick(held)))
}

fn validation_loss(model: &KernelModel, data: &[EventSequence], cfg: &TrainConfig) -> Result<f64> {
    let mut obj = ObjectiveConfig::new(model, cfg.loss);
    obj.parallelism = cfg.parallelism;
    match evaluate(model, data, &obj) {
        Ok(bd) => Ok(bd.loss),
        Err(e) if e.is_numerical() => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

/// Trains `model` on `train`, keeping the parameters with the lowest
/// `validation` loss (the training loss when `validation` is empty). The
/// initial parameters are a candidate, so the result is never worse than the
/// start.
pub fn train(
    mut model: KernelModel,
    train: &[EventSequence],
    validation: &[EventSequence],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let select_on = if validation.is_empty() { train } else { validation };
    let points = model.barrier_points();
    let initial_min = min_grid_intensity(&model, train, points, cfg.parallelism)?;
    let n_params = model.num_params();
    let mut state = TrainState {
        epoch: 0,
        w: cfg.w0,
        bound: (initial_min - cfg.epsilon).min(0.0),
        steps: 0,
        first_moment: vec![0.0; n_params],
        second_moment: vec![0.0; n_params],
        best: Some(Snapshot {
            epoch: 0,
            validation_loss: validation_loss(&model, select_on, cfg)?,
            params: model.params(),
        }),
    };
    let mut log = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_min = f64::INFINITY;
        let epoch_start = log.len();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<EventSequence> = chunk.iter().map(|&i| train[i].clone()).collect();
            let record = train_step(&mut model, &batch, cfg, &mut state, epoch)?;
            if let Some(m) = record.min_grid_intensity {
                epoch_min = epoch_min.min(m);
            }
            log.push(record);
        }
        state.epoch = epoch + 1;
        state.w = cfg.w0 * cfg.growth.powi(state.epoch as i32);
        if epoch_min.is_finite() {
            state.bound = (epoch_min - cfg.epsilon).min(0.0);
        }
        let vloss = validation_loss(&model, select_on, cfg)?;
        if state.best.as_ref().map_or(true, |b| vloss < b.validation_loss) {
            state.best = Some(Snapshot {
                epoch: state.epoch,
                validation_loss: vloss,
                params: model.params(),
            });
        }
        log.push(epoch_summary(&log[epoch_start..], epoch, &state, epoch_min, vloss));
    }
    if let Some(best) = &state.best {
        model.set_params(&best.params)?;
    }
    Ok(TrainOutcome { model, state, log })
}

/// Epoch means of the step records, with the schedule values for the next
/// epoch.
fn epoch_summary(
    steps: &[LogRecord],
    epoch: usize,
    state: &TrainState,
    epoch_min: f64,
    validation_loss: f64,
) -> LogRecord {
    let taken: Vec<&LogRecord> = steps.iter().filter(|r| !r.skipped).collect();
    let mean = |f: fn(&LogRecord) -> f64| {
        taken.iter().map(|r| f(r)).sum::<f64>() / taken.len().max(1) as f64
    };
    LogRecord {
        epoch,
        step: None,
        data_term: mean(|r| r.data_term),
        integral_term: mean(|r| r.integral_term),
        barrier_term: mean(|r| r.barrier_term),
        loss: mean(|r| r.loss),
        total: mean(|r| r.total),
        w: state.w,
        b: state.bound,
        min_grid_intensity: epoch_min.is_finite().then_some(epoch_min),
        grad_norm: mean(|r| r.grad_norm),
        backtracks: steps.iter().map(|r| r.backtracks).sum(),
        skipped: false,
        validation_loss: Some(validation_loss),
    }
}

fn train_step(
    model: &mut KernelModel,
    batch: &[EventSequence],
    cfg: &TrainConfig,
    state: &mut TrainState,
    epoch: usize,
) -> Result<LogRecord> {
    let points = model.barrier_points();
    let mut obj = ObjectiveConfig::new(model, cfg.loss).with_barrier(state.bound, state.w);
    obj.parallelism = cfg.parallelism;
    let mut bound = state.bound;
    let mut batch_min = None;
    let attempt = match total_loss_and_grad(model, batch, &obj) {
        // A batch not seen since the bound was set may sit below it already.
        Err(Error::InfeasibleBarrier { .. }) => {
            let m = min_grid_intensity(model, batch, points, cfg.parallelism)?;
            batch_min = Some(m);
            bound = bound.min(m - cfg.epsilon);
            obj = obj.with_barrier(bound, state.w);
            total_loss_and_grad(model, batch, &obj)
        }
        other => other,
    };
    let (bd, grad) = match attempt {
        Ok(x) => x,
        Err(Error::InfeasibleLoss { .. }) => {
            return Ok(LogRecord {
                epoch,
                step: Some(state.steps),
                data_term: f64::NAN,
                integral_term: f64::NAN,
                barrier_term: f64::NAN,
                loss: f64::NAN,
                total: f64::NAN,
                w: state.w,
                b: bound,
                min_grid_intensity: batch_min,
                grad_norm: 0.0,
                backtracks: 0,
                skipped: true,
                validation_loss: None,
            })
        }
        Err(e) => return Err(e),
    };
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::TrainingAborted(format!(
            "non-finite gradient at epoch {epoch}, step {}",
            state.steps
        )));
    }
    state.steps += 1;
    let t = state.steps as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let direction: Vec<f64> = grad
        .iter()
        .zip(state.first_moment.iter_mut().zip(state.second_moment.iter_mut()))
        .map(|(&g, (m, v))| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / (1.0 - b1.powi(t));
            let v_hat = *v / (1.0 - b2.powi(t));
            m_hat / (v_hat.sqrt() + cfg.adam_eps)
        })
        .collect();
    let start = model.params();
    let mut scale = cfg.learning_rate;
    let mut backtracks = 0;
    loop {
        let proposal: Vec<f64> = start.iter().zip(&direction).map(|(p, d)| p - scale * d).collect();
        model.set_params(&proposal)?;
        let feasible = match min_grid_intensity(model, batch, points, cfg.parallelism) {
            Ok(m) => m - bound > 0.0,
            Err(e) if e.is_numerical() => false,
            Err(e) => return Err(e),
        };
        if feasible {
            break;
        }
        if backtracks == cfg.max_backtracks {
            model.set_params(&start)?;
            return Err(Error::TrainingAborted(format!(
                "update stays infeasible after {backtracks} step halvings at epoch {epoch}, step {} (bound {bound})",
                state.steps
            )));
        }
        backtracks += 1;
        scale *= 0.5;
    }
    Ok(LogRecord {
        epoch,
        step: Some(state.steps),
        data_term: bd.data_term,
        integral_term: bd.integral_term,
        barrier_term: bd.barrier_term,
        loss: bd.loss,
        total: bd.total,
        w: state.w,
        b: bound,
        min_grid_intensity: bd.min_grid_intensity,
        grad_norm,
        backtracks,
        skipped: false,
        validation_loss: None,
    })
}

/// Newline-delimited JSON, one record per line.
pub fn write_log<W: std::io::Write>(mut out: W, log: &[LogRecord]) -> Result<()> {
    for r in log {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io("<log>", e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub loss: LossKind,
    pub step: f64,
    /// Barrier `(bound, weight)`; `None` checks the bare loss.
    pub barrier: Option<(f64, f64)>,
    /// Check at most this many evenly spaced parameters per block.
    pub max_per_block: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            loss: LossKind::Nll,
            step: 1e-5,
            barrier: None,
            max_per_block: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub block: String,
    pub checked: usize,
    /// `max |analytic - numeric| / max |numeric|` over the checked entries.
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.rel_error).fold(0.0, f64::max)
    }
}

/// Central finite differences of the total objective against the analytic
/// gradient, block by block.
pub fn gradient_check(
    model: &KernelModel,
    batch: &[EventSequence],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut obj = ObjectiveConfig::new(model, opts.loss);
    if let Some((b, w)) = opts.barrier {
        obj = obj.with_barrier(b, w);
    }
    let (_, analytic) = total_loss_and_grad(model, batch, &obj)?;
    let base = model.params();
    let mut probe = model.clone();
    let mut blocks = Vec::new();
    for (name, range) in model.layout().blocks() {
        if range.is_empty() {
            continue;
        }
        let len = range.len();
        let take = opts.max_per_block.unwrap_or(len).clamp(1, len);
        let indices: Vec<usize> = (0..take).map(|k| range.start + k * len / take).collect();
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for &i in &indices {
            let mut eval_at = |x: f64| -> Result<f64> {
                let mut p = base.clone();
                p[i] = x;
                probe.set_params(&p)?;
                evaluate(&probe, batch, &obj).map(|bd| bd.total)
            };
            let h = opts.step * base[i].abs().max(1.0);
            let numeric = (eval_at(base[i] + h)? - eval_at(base[i] - h)?) / (2.0 * h);
            diff = diff.max((analytic[i] - numeric).abs());
            scale = scale.max(numeric.abs());
        }
        blocks.push(BlockCheck {
            block: name,
            checked: indices.len(),
            rel_error: diff / scale.max(1e-12),
        });
    }
    Ok(GradCheckReport { blocks })
}
