//! Backpropagation through time, the optimizer, early stopping, and the
//! finite-difference gradient checker.

use crate::architecture::{
    split_rows, step_on_tape, Model, ModelConfig, ModelParams, ModelVars, StateHandles, StepConstants, UpdateMode,
};
use crate::cells::MaskBranch;
use crate::data::{SequenceDataset, Split};
use crate::error::{Error, Result};
use crate::metrics::mean_portion;
use crate::scalar::Scalar;
use crate::tape::{softmax_xent, Tape, Var};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use twofloat::TwoFloat;

/// Mean over rows of `−log softmax(logits_t)[label_t]`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    if logits.rows() != labels.len() {
        return Err(Error::Dimension {
            op: "cross_entropy",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    if labels.is_empty() {
        return Err(Error::Empty("label sequence"));
    }
    let k = logits.cols();
    let mut total = T::zero();
    for (t, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::Label { label, num_classes: k });
        }
        total += softmax_xent(logits.row(t), label).0;
    }
    Ok(total / T::of(labels.len() as f64))
}

/// One labeled sequence in the model's scalar type.
#[derive(Clone, Debug, PartialEq)]
pub struct Example<T> {
    /// One column vector per step.
    pub steps: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Example<T> {
    /// From an `n × input_dim` matrix and `n` labels.
    pub fn new(inputs: &Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Dimension {
                op: "example",
                left: inputs.shape(),
                right: (labels.len(), 1),
            });
        }
        Ok(Example {
            steps: split_rows(inputs),
            labels,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Example<U> {
        Example {
            steps: self.steps.iter().map(Tensor::cast).collect(),
            labels: self.labels.clone(),
        }
    }
}

/// Forward pass of one sequence recorded on `tape`.
struct Recorded {
    loss: Var,
    params: Vec<Var>,
    portions: Vec<f64>,
    mults: u64,
}

fn record<'p, T: Scalar>(tape: &mut Tape<'p, T>, model: &'p Model<T>, ex: &'p Example<T>) -> Result<Recorded> {
    if ex.steps.is_empty() {
        return Err(Error::Empty("sequence"));
    }
    let cfg = &model.config;
    let vars = ModelVars::register(tape, &model.params);
    let consts = StepConstants::new(tape, cfg.hidden, UpdateMode::Adaptive);
    let mut state = StateHandles::zeros(tape, cfg);
    let mut losses = Vec::with_capacity(ex.steps.len());
    let mut portions = Vec::new();
    let mut mults = 0;
    for (x_raw, &label) in ex.steps.iter().zip(&ex.labels) {
        let x = tape.input(x_raw);
        let out = step_on_tape(tape, cfg, &vars, &consts, &state, x)?;
        let (ps, cost) = out.portions(tape, cfg.hidden);
        portions.extend(ps);
        mults += cost;
        losses.push(tape.cross_entropy(out.logits, label)?);
        state = out.state;
    }
    let loss = tape.mean(losses)?;
    Ok(Recorded {
        loss,
        params: vars.all(),
        portions,
        mults,
    })
}

/// Loss, portion values and cost of one sequence without gradients.
#[derive(Clone, Debug)]
pub struct SequenceEval {
    pub loss: f64,
    pub portions: Vec<f64>,
    pub mults: u64,
    pub branches: Vec<MaskBranch>,
}

pub fn evaluate_sequence<T: Scalar>(model: &Model<T>, ex: &Example<T>) -> Result<SequenceEval> {
    let mut tape = Tape::new();
    let rec = record(&mut tape, model, ex)?;
    Ok(SequenceEval {
        loss: tape.value(rec.loss).item().as_f64(),
        portions: rec.portions,
        mults: rec.mults,
        branches: tape.mask_branches().to_vec(),
    })
}

/// Loss and exact gradients of one sequence.
#[derive(Clone, Debug)]
pub struct SequenceGradient<T> {
    pub loss: T,
    pub grads: ModelParams<T>,
    pub portions: Vec<f64>,
    pub mults: u64,
    pub branches: Vec<MaskBranch>,
}

pub fn sequence_gradients<T: Scalar>(model: &Model<T>, ex: &Example<T>) -> Result<SequenceGradient<T>> {
    sequence_gradients_scaled(model, ex, T::one())
}

/// As [`sequence_gradients`] with the loss adjoint seeded to `seed`.
pub fn sequence_gradients_scaled<T: Scalar>(model: &Model<T>, ex: &Example<T>, seed: T) -> Result<SequenceGradient<T>> {
    let mut tape = Tape::new();
    let rec = record(&mut tape, model, ex)?;
    let loss = tape.value(rec.loss).item();
    let branches = tape.mask_branches().to_vec();
    let mut adj = tape.backward_with(rec.loss, seed)?;
    let mut grads = model.params.zeros_like();
    for (dst, var) in grads.tensors_mut().into_iter().zip(rec.params) {
        adj.take_into(var, dst);
    }
    Ok(SequenceGradient {
        loss,
        grads,
        portions: rec.portions,
        mults: rec.mults,
        branches,
    })
}

/// Batch loss (mean over sequences) and gradients averaged over the batch,
/// reduced in batch order.
pub fn batch_gradients<T: Scalar>(model: &Model<T>, batch: &[&Example<T>]) -> Result<SequenceGradient<T>> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut total: Option<SequenceGradient<T>> = None;
    for ex in batch {
        let g = sequence_gradients(model, ex)?;
        match &mut total {
            None => total = Some(g),
            Some(acc) => {
                acc.loss += g.loss;
                for (a, b) in acc.grads.tensors_mut().into_iter().zip(g.grads.tensors()) {
                    a.add_assign(b)?;
                }
                acc.portions.extend(g.portions);
                acc.mults += g.mults;
                acc.branches.extend(g.branches);
            }
        }
    }
    let mut acc = total.expect("non-empty batch");
    let inv = T::one() / T::of(batch.len() as f64);
    acc.loss *= inv;
    for t in acc.grads.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    Ok(acc)
}

/// Batch loss with the branch taken by every mask entry.
pub fn batch_loss<T: Scalar>(model: &Model<T>, batch: &[&Example<T>]) -> Result<(f64, Vec<MaskBranch>)> {
    let (loss, branches) = batch_loss_native(model, batch)?;
    Ok((loss.as_f64(), branches))
}

fn batch_loss_native<T: Scalar>(model: &Model<T>, batch: &[&Example<T>]) -> Result<(T, Vec<MaskBranch>)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut loss = T::zero();
    let mut branches = Vec::new();
    for ex in batch {
        let mut tape = Tape::new();
        let rec = record(&mut tape, model, ex)?;
        loss += tape.value(rec.loss).item();
        branches.extend_from_slice(tape.mask_branches());
    }
    Ok((loss / T::of(batch.len() as f64), branches))
}

/// `|a − b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(fd: f64, bp: f64) -> f64 {
    (fd - bp).abs() / (fd.abs() + bp.abs()).max(1e-8)
}

/// Central differences of `f` at `x`.
pub fn central_differences(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub coordinates: usize,
    /// Coordinates whose ± perturbation changed a mask branch.
    pub non_differentiable: usize,
    pub failures: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> usize {
        self.tensors.iter().map(|t| t.failures).sum()
    }

    pub fn non_differentiable(&self) -> usize {
        self.tensors.iter().map(|t| t.non_differentiable).sum()
    }

    pub fn coordinates(&self) -> usize {
        self.tensors.iter().map(|t| t.coordinates).sum()
    }

    pub fn passed(&self) -> bool {
        self.failures() == 0
    }
}

/// Compares backprop gradients of the batch loss against central differences
/// for every parameter coordinate. Coordinates where either perturbation
/// flips a mask entry between threshold branches are counted separately and
/// excluded from the error statistics.
///
/// The differences are taken in `f64`. With step `1e-5` their roundoff is
/// about `1e-16 · loss / step`, which swamps coordinates whose gradient is
/// below roughly `1e-7`; [`finite_diff_check_extended`] avoids that.
pub fn finite_diff_check(
    model: &Model<f64>,
    batch: &[&Example<f64>],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    fd_check::<f64>(model, batch, step, tolerance)
}

/// Same as [`finite_diff_check`], but the perturbed losses are evaluated in
/// double-double arithmetic so the reference is accurate even for tiny
/// gradient coordinates.
pub fn finite_diff_check_extended(
    model: &Model<f64>,
    batch: &[&Example<f64>],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    fd_check::<TwoFloat>(model, batch, step, tolerance)
}

fn fd_check<O: Scalar>(model: &Model<f64>, batch: &[&Example<f64>], step: f64, tolerance: f64) -> Result<GradCheckReport> {
    let analytic = batch_gradients(model, batch)?;
    let base_branches = analytic.branches;
    let mut probe = Model::<O>::from_parts(model.config.clone(), model.params.cast())?;
    let examples: Vec<Example<O>> = batch.iter().map(|ex| ex.cast()).collect();
    let examples: Vec<&Example<O>> = examples.iter().collect();
    let h = O::of(step);
    let names: Vec<String> = model.params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut tensors = Vec::with_capacity(names.len());
    for (ti, name) in names.into_iter().enumerate() {
        let len = probe.params.tensors()[ti].len();
        let grad = analytic.grads.tensors()[ti].data().to_vec();
        let mut check = TensorCheck {
            name,
            coordinates: len,
            non_differentiable: 0,
            failures: 0,
            max_rel_error: 0.0,
        };
        for ci in 0..len {
            let orig = probe.params.tensors()[ti].data()[ci];
            probe.params.tensors_mut()[ti].data_mut()[ci] = orig + h;
            let (up, up_br) = batch_loss_native(&probe, &examples)?;
            probe.params.tensors_mut()[ti].data_mut()[ci] = orig - h;
            let (down, down_br) = batch_loss_native(&probe, &examples)?;
            probe.params.tensors_mut()[ti].data_mut()[ci] = orig;
            if up_br != base_branches || down_br != base_branches {
                check.non_differentiable += 1;
                continue;
            }
            let fd = ((up - down) / (h + h)).as_f64();
            let err = relative_error(fd, grad[ci]);
            check.max_rel_error = check.max_rel_error.max(err);
            if err >= tolerance {
                check.failures += 1;
            }
        }
        tensors.push(check);
    }
    Ok(GradCheckReport {
        step,
        tolerance,
        tensors,
    })
}

/// Adam moments plus global-norm clipping threshold.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub first: ModelParams<T>,
    pub second: ModelParams<T>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: Option<f64>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ModelParams<T>, learning_rate: f64, clip_norm: Option<f64>) -> Self {
        OptimState {
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm,
        }
    }
}

pub fn global_norm<T: Scalar>(grads: &ModelParams<T>) -> f64 {
    grads
        .tensors()
        .iter()
        .map(|t| t.sum_squares().as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Clips `grads` to the global norm, then applies one bias-corrected Adam
/// update. Returns the pre-clipping gradient norm.
pub fn adam_step<T: Scalar>(params: &mut ModelParams<T>, grads: &ModelParams<T>, opt: &mut OptimState<T>) -> Result<f64> {
    let norm = global_norm(grads);
    if !norm.is_finite() {
        let bad = grads
            .named_tensors()
            .into_iter()
            .find(|(_, t)| !t.all_finite())
            .map_or_else(|| "?".to_string(), |(n, _)| n);
        return Err(Error::NonFinite(format!("gradient of {bad} at optimizer step {}", opt.step + 1)));
    }
    let scale = match opt.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    opt.step += 1;
    let (b1, b2) = (opt.beta1, opt.beta2);
    let c1 = 1.0 - b1.powi(opt.step as i32);
    let c2 = 1.0 - b2.powi(opt.step as i32);
    let (lr, eps) = (T::of(opt.learning_rate), T::of(opt.epsilon));
    let (b1t, b2t, c1t, c2t, st) = (T::of(b1), T::of(b2), T::of(c1), T::of(c2), T::of(scale));
    let (one_b1, one_b2) = (T::one() - b1t, T::one() - b2t);
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(opt.first.tensors_mut())
        .zip(opt.second.tensors_mut())
    {
        p.check_same(g, "adam_step")?;
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gi = gi * st;
            *mi = b1t * *mi + one_b1 * gi;
            *vi = b2t * *vi + one_b2 * gi * gi;
            let m_hat = *mi / c1t;
            let v_hat = *vi / c2t;
            *pi -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(norm)
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    32
}
fn default_epochs() -> usize {
    50
}
fn default_patience() -> usize {
    5
}
fn default_min_delta() -> f64 {
    1e-4
}
fn default_clip() -> f64 {
    5.0
}
fn default_seed() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    /// Epochs without a validation improvement larger than `min_delta` before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_min_delta")]
    pub min_delta: f64,
    #[serde(default = "default_clip")]
    pub grad_clip_norm: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Fill the `wall_seconds` column. Off by default so reports are
    /// reproducible byte for byte.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            max_epochs: default_epochs(),
            patience: default_patience(),
            min_delta: default_min_delta(),
            grad_clip_norm: default_clip(),
            seed: default_seed(),
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be non-negative".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("batch_size, max_epochs and patience must be positive".into()));
        }
        if !(self.min_delta >= 0.0) || !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config("min_delta must be >= 0 and grad_clip_norm > 0".into()));
        }
        Ok(())
    }
}

/// One row of the per-epoch report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_ce: f64,
    pub val_ce: f64,
    pub avg_p: Option<f64>,
    pub cum_eff_mults: u64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: String,
    pub epochs: Vec<EpochRecord>,
    /// Epoch of the best validation loss; the converged checkpoint.
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    /// Whether patience ran out before `max_epochs`.
    pub early_stopped: bool,
    pub best_val_ce: f64,
    pub test_ce: f64,
    /// Portion values of the validation pass at the best checkpoint,
    /// flattened over sequences, steps and cells.
    #[serde(skip)]
    pub converged_portions: Vec<f64>,
    pub avg_p_converged: Option<f64>,
    pub parameter_count: usize,
}

impl TrainReport {
    pub fn ce_epoch1(&self) -> f64 {
        self.epochs.first().map_or(f64::NAN, |e| e.val_ce)
    }

    /// Cumulative training multiplications up to and including the best epoch.
    pub fn mults_at_convergence(&self) -> u64 {
        self.epochs
            .iter()
            .find(|e| e.epoch == self.best_epoch)
            .map_or(0, |e| e.cum_eff_mults)
    }

    pub fn total_eff_mults(&self) -> u64 {
        self.epochs.last().map_or(0, |e| e.cum_eff_mults)
    }

    /// First epoch whose validation loss is at most `target`.
    pub fn first_epoch_reaching(&self, target: f64) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.val_ce <= target)
    }
}

/// Training, validation and test examples in the model's scalar type.
#[derive(Clone, Debug)]
pub struct TrainData<T> {
    pub train: Vec<Example<T>>,
    pub validation: Vec<Example<T>>,
    pub test: Vec<Example<T>>,
}

impl<T: Scalar> TrainData<T> {
    pub fn from_dataset(ds: &SequenceDataset) -> Result<Self> {
        if !ds.is_split() {
            return Err(Error::Contract("dataset has no split assignment".into()));
        }
        let d = ds.meta.input_dim;
        let convert = |which: Split| -> Result<Vec<Example<T>>> {
            ds.split_indices(which)
                .into_iter()
                .map(|i| {
                    let s = &ds.sequences[i];
                    let m = Tensor::from_f64(s.steps(), d, &s.features)?;
                    Example::new(&m, s.labels.iter().map(|&l| l as usize).collect())
                })
                .collect()
        };
        Ok(TrainData {
            train: convert(Split::Train)?,
            validation: convert(Split::Validation)?,
            test: convert(Split::Test)?,
        })
    }
}

/// Mean loss, portion values and cost over a set of sequences.
pub fn evaluate<T: Scalar>(model: &Model<T>, examples: &[Example<T>]) -> Result<(f64, Vec<f64>, u64)> {
    if examples.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let mut loss = 0.0;
    let mut portions = Vec::new();
    let mut mults = 0;
    for ex in examples {
        let e = evaluate_sequence(model, ex)?;
        loss += e.loss;
        portions.extend(e.portions);
        mults += e.mults;
    }
    Ok((loss / examples.len() as f64, portions, mults))
}

/// Result of [`train`]: the report and the best-validation model.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub report: TrainReport,
    pub model: Model<T>,
}

/// Trains from a split [`SequenceDataset`].
pub fn train<T: Scalar>(model_config: &ModelConfig, train_config: &TrainConfig, dataset: &SequenceDataset) -> Result<TrainOutcome<T>> {
    let data = TrainData::<T>::from_dataset(dataset)?;
    train_on(Model::new(model_config.clone())?, train_config, &data)
}

/// Epoch loop with seeded shuffling, validation-based early stopping and
/// effective-multiplication accounting over every training forward step.
pub fn train_on<T: Scalar>(mut model: Model<T>, cfg: &TrainConfig, data: &TrainData<T>) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    for (split, name) in [
        (&data.train, "training split"),
        (&data.validation, "validation split"),
        (&data.test, "test split"),
    ] {
        if split.is_empty() {
            return Err(Error::Empty(name));
        }
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimState::new(&model.params, cfg.learning_rate, Some(cfg.grad_clip_norm));
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut epochs = Vec::new();
    let mut cum_mults = 0u64;
    let mut best: Option<(usize, f64, Model<T>, Vec<f64>)> = None;
    let mut stale = 0;
    let mut early_stopped = false;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example<T>> = chunk.iter().map(|&i| &data.train[i]).collect();
            let g = batch_gradients(&model, &batch)?;
            loss_sum += g.loss.as_f64() * batch.len() as f64;
            cum_mults += g.mults;
            adam_step(&mut model.params, &g.grads, &mut opt)?;
        }
        let train_ce = loss_sum / data.train.len() as f64;
        let (val_ce, portions, _) = evaluate(&model, &data.validation)?;
        if !val_ce.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {epoch}")));
        }
        epochs.push(EpochRecord {
            epoch,
            train_ce,
            val_ce,
            avg_p: mean_portion(&portions),
            cum_eff_mults: cum_mults,
            wall_seconds: if cfg.record_wall_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
        log::debug!("{} epoch {epoch}: train {train_ce:.4} val {val_ce:.4}", model.config.arch.name());
        let improved = best.as_ref().is_none_or(|(_, b, _, _)| val_ce < b - cfg.min_delta);
        if improved {
            best = Some((epoch, val_ce, model.clone(), portions));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                early_stopped = true;
                break;
            }
        }
    }
    let stopped_epoch = epochs.len();
    let (best_epoch, best_val_ce, best_model, converged_portions) = best.expect("at least one epoch");
    let (test_ce, _, _) = evaluate(&best_model, &data.test)?;
    let report = TrainReport {
        method: best_model.config.arch.name().to_string(),
        epochs,
        best_epoch,
        stopped_epoch,
        early_stopped,
        best_val_ce,
        test_ce,
        avg_p_converged: mean_portion(&converged_portions),
        converged_portions,
        parameter_count: best_model.params.parameter_count(),
    };
    Ok(TrainOutcome {
        report,
        model: best_model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::architecture::Arch;
    use crate::data::{split_dataset, synth_generate, SynthConfig};
    use crate::tensor::{init_params, InitScheme};

    fn example(n: usize, dim: usize, k: usize, seed: u64) -> Example<f64> {
        let x = init_params::<f64>(n, dim, seed, InitScheme::Uniform).scale(2.0);
        Example::new(&x, (0..n).map(|t| (t + seed as usize) % k).collect()).unwrap()
    }

    #[test]
    fn cross_entropy_reference_values() {
        let uniform = Tensor::<f64>::zeros(2, 26);
        assert!((cross_entropy(&uniform, &[0, 25]).unwrap() - 26f64.ln()).abs() < 1e-14);
        let confident = Tensor::from_vec(1, 3, vec![40.0, 0.0, 0.0]).unwrap();
        assert!(cross_entropy(&confident, &[0]).unwrap() < 1e-15);
        let z = [0.3, -1.2, 2.0];
        let direct = -(z[1] - z.iter().map(|v: &f64| v.exp()).sum::<f64>().ln());
        let logits = Tensor::from_vec(1, 3, z.to_vec()).unwrap();
        assert!((cross_entropy(&logits, &[1]).unwrap() - direct).abs() < 1e-14);
        assert!(matches!(cross_entropy(&logits, &[3]), Err(Error::Label { .. })));
    }

    #[test]
    fn central_differences_on_a_quadratic() {
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[0] * x[1] - x[1];
        let x = [0.7, -1.3];
        let exact = [2.0 * x[0] + 3.0 * x[1], 3.0 * x[0] - 1.0];
        let fd = central_differences(f, &x, 1e-5);
        for (a, b) in fd.iter().zip(exact) {
            assert!(relative_error(*a, b) < 1e-9);
        }
    }

    #[test]
    fn coarse_step_degrades_the_check() {
        let cfg = ModelConfig::new(Arch::DeepTransitionLstm, 3, 2, 2, 3).with_seed(4);
        let model = Model::<f64>::new(cfg).unwrap();
        let ex = example(3, 2, 3, 1);
        let fine = finite_diff_check(&model, &[&ex], 1e-5, 1e-4).unwrap();
        let coarse = finite_diff_check(&model, &[&ex], 1e-1, 1e-4).unwrap();
        assert!(fine.passed());
        assert!(coarse.max_rel_error() > 10.0 * fine.max_rel_error());
    }

    #[test]
    fn scaled_seed_scales_every_gradient() {
        let model = Model::<f64>::new(ModelConfig::new(Arch::DaLstm, 3, 2, 2, 3)).unwrap();
        let ex = example(4, 2, 3, 2);
        let one = sequence_gradients(&model, &ex).unwrap();
        let three = sequence_gradients_scaled(&model, &ex, 3.0).unwrap();
        for (a, b) in one.grads.tensors().into_iter().zip(three.grads.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((3.0 * x - y).abs() <= 1e-15 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn inputs_of_later_transition_cells_get_no_gradient() {
        // cells after the first see x = 0, so their U matrices are disconnected
        let model = Model::<f64>::new(ModelConfig::new(Arch::DeepTransitionLstm, 3, 3, 2, 3)).unwrap();
        let g = sequence_gradients(&model, &example(4, 2, 3, 3)).unwrap();
        for (name, t) in g.grads.named_tensors() {
            if name.starts_with("bottom.1.u_") || name.starts_with("bottom.2.u_") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        assert!(g.grads.bottom[0].forget.u.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn da_gradients_match_extended_finite_differences() {
        let model = Model::<f64>::new(ModelConfig::new(Arch::DaLstm, 3, 3, 2, 3).with_seed(5)).unwrap();
        let (a, b) = (example(3, 2, 3, 4), example(3, 2, 3, 5));
        let rep = finite_diff_check_extended(&model, &[&a, &b], 1e-5, 1e-4).unwrap();
        assert!(rep.passed(), "{:?}", rep.tensors);
        assert_eq!(rep.coordinates(), model.params.parameter_count());
    }

    #[test]
    fn adam_zero_gradient_only_decays_moments() {
        let model = Model::<f64>::new(ModelConfig::new(Arch::StackedLstm, 2, 1, 2, 2)).unwrap();
        let mut params = model.params.clone();
        let mut opt = OptimState::new(&params, 1e-2, Some(5.0));
        opt.first.tensors_mut().into_iter().for_each(|t| t.data_mut().fill(1.0));
        let zero = params.zeros_like();
        adam_step(&mut params, &zero, &mut opt).unwrap();
        assert_ne!(params, model.params);
        let mut opt = OptimState::new(&params, 1e-2, Some(5.0));
        let before = params.clone();
        adam_step(&mut params, &zero, &mut opt).unwrap();
        assert_eq!(params, before);
        assert!(opt.first.tensors().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn adam_constant_gradient_moves_by_learning_rate() {
        let model = Model::<f64>::new(ModelConfig::new(Arch::StackedLstm, 2, 1, 2, 2)).unwrap();
        let mut params = model.params.clone();
        let mut grads = params.zeros_like();
        grads.tensors_mut().into_iter().for_each(|t| t.data_mut().fill(0.01));
        let mut opt = OptimState::new(&params, 1e-3, None);
        for _ in 0..10 {
            let before = params.output_proj.b.data()[0];
            adam_step(&mut params, &grads, &mut opt).unwrap();
            let moved = before - params.output_proj.b.data()[0];
            assert!((moved - 1e-3).abs() < 1e-8, "{moved}");
        }
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let model = Model::<f64>::new(ModelConfig::new(Arch::StackedLstm, 2, 1, 2, 2)).unwrap();
        let mut grads = model.params.zeros_like();
        grads.output_proj.b.data_mut().fill(100.0);
        assert!((global_norm(&grads) - 100.0 * 2f64.sqrt()).abs() < 1e-12);
        let mut a = model.params.clone();
        let mut b = model.params.clone();
        let mut big = grads.clone();
        big.output_proj.b.data_mut().fill(1000.0);
        adam_step(&mut a, &grads, &mut OptimState::new(&model.params, 1e-3, Some(5.0))).unwrap();
        adam_step(&mut b, &big, &mut OptimState::new(&model.params, 1e-3, Some(5.0))).unwrap();
        assert_eq!(a, b);
        let mut bad = grads;
        bad.bottom[0].forget.w.data_mut()[0] = f64::NAN;
        let err = adam_step(&mut a, &bad, &mut OptimState::new(&model.params, 1e-3, None)).unwrap_err();
        assert!(err.to_string().contains("bottom.0.w_f"));
    }

    fn small_dataset(seed: u64) -> crate::data::SequenceDataset {
        let ds = synth_generate(&SynthConfig {
            transient_ratio: 0.5,
            steps: 20,
            sequences: 30,
            input_dim: 4,
            num_classes: 3,
            seed,
        })
        .unwrap();
        split_dataset(ds, seed).unwrap()
    }

    #[test]
    fn one_epoch_gives_one_row_and_matching_cost() {
        let ds = small_dataset(1);
        let mcfg = ModelConfig::new(Arch::DaLstm, 4, 2, 4, ds.meta.num_classes());
        let tcfg = TrainConfig {
            max_epochs: 1,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let out = train::<f64>(&mcfg, &tcfg, &ds).unwrap();
        assert_eq!(out.report.epochs.len(), 1);
        assert_eq!(out.report.best_epoch, 1);
        let row = &out.report.epochs[0];
        assert!(row.cum_eff_mults > 0 && row.wall_seconds == 0.0);
        assert!(row.avg_p.is_some_and(|p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn zero_learning_rate_keeps_training_loss_fixed() {
        let ds = small_dataset(2);
        let mcfg = ModelConfig::new(Arch::StackedLstm, 4, 2, 4, ds.meta.num_classes());
        let tcfg = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 3,
            patience: 10,
            batch_size: 7,
            ..TrainConfig::default()
        };
        let out = train::<f64>(&mcfg, &tcfg, &ds).unwrap();
        let e = &out.report.epochs;
        assert_eq!(e.len(), 3);
        assert!((e[0].train_ce - e[2].train_ce).abs() < 1e-12);
        assert_eq!(e[0].val_ce, e[2].val_ce);
        // flat validation loss stops nothing before patience runs out, and
        // per-epoch cost is constant for an ungated model
        assert_eq!(e[2].cum_eff_mults, 3 * e[0].cum_eff_mults);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let ds = small_dataset(3);
        let mcfg = ModelConfig::new(Arch::DaLstm, 8, 2, 4, ds.meta.num_classes());
        let tcfg = TrainConfig {
            learning_rate: 1e-2,
            max_epochs: 6,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let a = train::<f64>(&mcfg, &tcfg, &ds).unwrap();
        let e = &a.report.epochs;
        assert!(e.last().unwrap().train_ce < e[0].train_ce);
        let b = train::<f64>(&mcfg, &tcfg, &ds).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
