//! Prompt and verbalizer optimization over a frozen backbone.
//!
//! [`fit`] runs epochs of round-robin multi-task mini-batches, updates only
//! the tensors returned by [`trainable_parameters`] with Adam, and drives a
//! reduce-on-plateau schedule plus early stopping from the mean validation
//! loss. The best-validation prompts and verbalizers are restored on return.

mod checkpoint;
mod pretrain;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayViewD, ArrayViewMutD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::SegmentedDataset;
use crate::prompts::{compose, PromptMode, PromptPool, TaskSpec};
use crate::ulm::{backward, forward, softmax, with_bos, Dropout, Readout, UlmParameters};
use crate::verbalizer::Verbalizer;
use crate::{Error, Exec, Real, Result};

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, checkpoint_layout, load_checkpoint, read_checkpoint_dtype, save_checkpoint,
    Checkpoint,
};
pub use pretrain::{pretrain_backbone, PretrainConfig};

/// Verbalizers keyed by task id.
pub type Verbalizers<F> = BTreeMap<String, Verbalizer<F>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub betas: (f64, f64),
    pub eps_adam: f64,
    pub min_lr: f64,
    /// Minimum decrease of the validation loss that counts as improvement.
    pub improvement_threshold: f64,
    /// Weight of an auxiliary next-unit loss; 0 disables it.
    pub aux_lm_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-2,
            plateau_factor: 0.1,
            plateau_patience: 5,
            early_stop_patience: 15,
            max_epochs: 300,
            batch_size: 16,
            betas: (0.9, 0.999),
            eps_adam: 1e-8,
            min_lr: 1e-6,
            improvement_threshold: 1e-6,
            aux_lm_weight: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("lr must be > 0");
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return bad("patiences must be >= 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return bad("plateau_factor must be in (0, 1]");
        }
        if self.aux_lm_weight < 0.0 {
            return bad("aux_lm_weight must be >= 0");
        }
        Ok(())
    }
}

/// Optimizer and scheduler state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<F> {
    /// Number of completed epochs.
    pub epoch: usize,
    pub current_lr: f64,
    pub best_val_loss: f64,
    pub epochs_since_improvement: usize,
    /// Non-improving epochs since the last improvement or lr reduction.
    pub plateau_count: usize,
    /// Adam steps taken.
    pub step: u64,
    /// Adam first and second moments in trainable-parameter order.
    pub moments: Vec<Moment<F>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moment<F> {
    pub name: String,
    pub m: ArrayD<F>,
    pub v: ArrayD<F>,
}

impl<F: Real> TrainState<F> {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            epoch: 0,
            current_lr: cfg.lr,
            best_val_loss: f64::INFINITY,
            epochs_since_improvement: 0,
            plateau_count: 0,
            step: 0,
            moments: Vec::new(),
        }
    }
}

/// Mean cross-entropy `-(1/N) Σ log softmax(z_i)[y_i]`.
pub fn task_loss<F: Real>(class_logits: &[Array1<F>], labels: &[usize]) -> Result<f64> {
    if class_logits.len() != labels.len() || labels.is_empty() {
        return Err(Error::Dimension(format!(
            "{} logit rows vs {} labels",
            class_logits.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (z, &y) in class_logits.iter().zip(labels) {
        total += cross_entropy(z.view(), y)?;
    }
    Ok(total / labels.len() as f64)
}

/// Single-sample cross-entropy, computed in `f64` with log-sum-exp.
pub fn cross_entropy<F: Real>(z: ArrayView1<F>, label: usize) -> Result<f64> {
    if label >= z.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: z.len(),
        });
    }
    let max = z.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
    Ok(lse - z[label].as_f64())
}

/// Ordered list of every tensor the optimizer may update.
///
/// Order: disease prompts by id, language prompts, class prompts, then each
/// verbalizer's weight and bias by task id. Backbone tensors never appear.
pub fn trainable_parameters<'a, F: Real>(
    pool: &'a mut PromptPool<F>,
    verbalizers: &'a mut Verbalizers<F>,
) -> Vec<(String, ArrayViewMutD<'a, F>)> {
    let mut out = Vec::new();
    pool.visit_mut(&mut |n, t| out.push((n, t)));
    for vb in verbalizers.values_mut() {
        vb.visit_mut(&mut |n, t| out.push((n, t)));
    }
    out
}

/// Gradient counterpart of [`trainable_parameters`], same order.
pub fn trainable_gradients<'a, F: Real>(
    pool: &'a PromptPool<F>,
    verbalizers: &'a Verbalizers<F>,
) -> Vec<(String, ArrayViewD<'a, F>)> {
    let mut out = Vec::new();
    pool.visit(&mut |n, t| out.push((n, t)));
    for vb in verbalizers.values() {
        vb.visit(&mut |n, t| out.push((n, t)));
    }
    out
}

/// One bias-corrected Adam update of `params` using `grads` (same order).
///
/// A non-finite gradient aborts before any tensor is modified.
pub fn adam_step<F: Real>(
    state: &mut TrainState<F>,
    cfg: &TrainConfig,
    mut params: Vec<(String, ArrayViewMutD<'_, F>)>,
    grads: &[(String, ArrayViewD<'_, F>)],
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Dimension(format!(
            "{} parameters vs {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for ((pn, p), (gn, g)) in params.iter().zip(grads) {
        if pn != gn || p.shape() != g.shape() {
            return Err(Error::Dimension(format!("parameter {pn} does not match gradient {gn}")));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(gn.clone()));
        }
    }
    if state.moments.is_empty() {
        state.moments = params
            .iter()
            .map(|(n, p)| Moment {
                name: n.clone(),
                m: ArrayD::zeros(p.raw_dim()),
                v: ArrayD::zeros(p.raw_dim()),
            })
            .collect();
    }
    if state.moments.len() != params.len() || state.moments.iter().zip(&params).any(|(m, (n, _))| &m.name != n) {
        return Err(Error::Dimension("optimizer state does not match parameter list".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = state.current_lr;
    let eps = cfg.eps_adam;
    for ((_, p), (mom, (_, g))) in params.iter_mut().zip(state.moments.iter_mut().zip(grads)) {
        ndarray::Zip::from(p)
            .and(&mut mom.m)
            .and(&mut mom.v)
            .and(g)
            .for_each(|p, m, v, &g| {
                let g64 = g.as_f64();
                let m64 = b1 * m.as_f64() + (1.0 - b1) * g64;
                let v64 = b2 * v.as_f64() + (1.0 - b2) * g64 * g64;
                *m = F::from_f64(m64);
                *v = F::from_f64(v64);
                let update = lr * (m64 / c1) / ((v64 / c2).sqrt() + eps);
                *p = F::from_f64(p.as_f64() - update);
            });
    }
    Ok(())
}

/// Result of one scheduler tick.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlateauOutcome {
    pub improved: bool,
    pub lr_reduced: bool,
    pub stop: bool,
}

/// Called once per epoch with that epoch's validation loss.
///
/// Improvement means `val_loss < best - improvement_threshold`. After
/// `plateau_patience` non-improving epochs the lr is multiplied by
/// `plateau_factor` (floored at `min_lr`) and the plateau counter restarts.
/// Stops after `early_stop_patience` consecutive non-improving epochs or
/// once `max_epochs` epochs have completed; a stopping epoch does not also
/// reduce the lr.
pub fn plateau_step<F>(state: &mut TrainState<F>, cfg: &TrainConfig, val_loss: f64) -> PlateauOutcome {
    state.epoch += 1;
    let improved = val_loss < state.best_val_loss - cfg.improvement_threshold;
    if improved {
        state.best_val_loss = val_loss;
        state.epochs_since_improvement = 0;
        state.plateau_count = 0;
    } else {
        state.epochs_since_improvement += 1;
        state.plateau_count += 1;
    }
    let stop = state.epochs_since_improvement >= cfg.early_stop_patience || state.epoch >= cfg.max_epochs;
    let mut lr_reduced = false;
    if !stop && state.plateau_count >= cfg.plateau_patience {
        state.current_lr = (state.current_lr * cfg.plateau_factor).max(cfg.min_lr);
        state.plateau_count = 0;
        lr_reduced = true;
    }
    PlateauOutcome {
        improved,
        lr_reduced,
        stop,
    }
}

/// Train and validation data of one task.
#[derive(Clone, Copy, Debug)]
pub struct TaskSplits<'a> {
    pub train: &'a SegmentedDataset,
    pub val: &'a SegmentedDataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

impl EpochLog {
    /// `epoch,train_loss,val_loss,lr`
    pub fn csv_line(&self) -> String {
        format!("{},{:.8},{:.8},{:e}", self.epoch, self.train_loss, self.val_loss, self.lr)
    }
}

#[derive(Debug)]
pub struct FitOutcome<F> {
    pub state: TrainState<F>,
    pub history: Vec<EpochLog>,
    /// Epoch (1-based) whose prompts and verbalizers were restored.
    pub best_epoch: usize,
}

/// Options that are not part of the optimization recipe itself.
#[derive(Clone, Copy, Debug)]
pub struct FitOptions {
    pub mode: PromptMode,
    pub exec: Exec,
    /// Stop after this many optimizer steps, regardless of epochs.
    pub max_steps: Option<u64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            mode: PromptMode::Both,
            exec: Exec::Parallel,
            max_steps: None,
        }
    }
}

struct SegmentResult<F> {
    loss: f64,
    pool_grad: PromptPool<F>,
    vb_grad: Verbalizer<F>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub(crate) fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x1234_5678_9ABC_DEF0, |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Loss and gradients of one segment, scaled by `weight` (1/N for batch means).
#[allow(clippy::too_many_arguments)]
fn segment_gradients<F: Real>(
    model: &UlmParameters<F>,
    task: &TaskSpec,
    pool: &PromptPool<F>,
    vb: &Verbalizer<F>,
    units: &[usize],
    label: usize,
    dropout: Option<Dropout>,
    cfg: &TrainConfig,
    mode: PromptMode,
    weight: f64,
) -> Result<SegmentResult<F>> {
    let prompt = compose(task, pool, mode)?;
    let tokens = with_bos(units, &model.config);
    let aux = cfg.aux_lm_weight > 0.0 && units.len() >= 1;
    let readout = if aux { Readout::All } else { Readout::Last };
    let out = forward(&tokens, model, &prompt, dropout, readout, true)?;
    let last = out.last_logits();
    let class_logits = vb.classify_logits(last)?;
    let mut loss = cross_entropy(class_logits.view(), label)?;
    let probs = softmax(class_logits.view());
    let mut d_class = probs;
    d_class[label] -= F::one();
    d_class.mapv_inplace(|v| v * F::from_f64(weight));
    let mut vb_grad = vb.zeros_like();
    let d_last = vb.backward(last, d_class.view(), &mut vb_grad);

    let mut d_logits = Array2::<F>::zeros(out.next_unit_logits.raw_dim());
    let n_rows = d_logits.nrows();
    d_logits.row_mut(n_rows - 1).assign(&d_last);
    if aux {
        // Row t predicts token t+1.
        let targets = &tokens[1..];
        let scale = cfg.aux_lm_weight / targets.len() as f64;
        let mut lm = 0.0;
        for (t, &y) in targets.iter().enumerate() {
            let row = out.next_unit_logits.row(t);
            lm += cross_entropy(row, y)?;
            let mut p = softmax(row);
            p[y] -= F::one();
            let mut dst = d_logits.row_mut(t);
            dst.scaled_add(F::from_f64(scale * weight), &p);
        }
        loss += cfg.aux_lm_weight * lm / targets.len() as f64;
    }
    let grads = backward(model, &out, d_logits.view(), false)?;
    let mut pool_grad = pool.zeros_like();
    pool_grad.scatter_gradients(task, &grads)?;
    Ok(SegmentResult {
        loss,
        pool_grad,
        vb_grad,
    })
}

/// Eval-mode class logits for every segment of `data`.
pub fn class_logits_for<F: Real>(
    model: &UlmParameters<F>,
    pool: &PromptPool<F>,
    vb: &Verbalizer<F>,
    data: &SegmentedDataset,
    mode: PromptMode,
    exec: Exec,
) -> Result<Vec<Array1<F>>> {
    let prompt = compose(&data.task, pool, mode)?;
    exec.map(&data.segments, |_, seg| {
        let tokens = with_bos(&seg.units.units, &model.config);
        let out = forward(&tokens, model, &prompt, None, Readout::Last, false)?;
        vb.classify(&out)
    })
    .into_iter()
    .collect()
}

/// Mean validation loss over tasks (each task's loss is its segment mean).
pub fn validation_loss<F: Real>(
    model: &UlmParameters<F>,
    pool: &PromptPool<F>,
    verbalizers: &Verbalizers<F>,
    tasks: &[TaskSplits<'_>],
    mode: PromptMode,
    exec: Exec,
) -> Result<f64> {
    let mut total = 0.0;
    for t in tasks {
        let vb = verbalizer_for(verbalizers, &t.val.task)?;
        let logits = class_logits_for(model, pool, vb, t.val, mode, exec)?;
        let labels: Vec<usize> = t.val.segments.iter().map(|s| s.label).collect();
        total += task_loss(&logits, &labels)?;
    }
    Ok(total / tasks.len() as f64)
}

pub(crate) fn verbalizer_for<'a, F>(vbs: &'a Verbalizers<F>, task: &TaskSpec) -> Result<&'a Verbalizer<F>> {
    vbs.get(&task.id())
        .ok_or_else(|| Error::UnknownId(format!("no verbalizer for task {}", task.id())))
}

/// Trains prompts and verbalizers; the backbone is only ever read.
pub fn fit<F: Real>(
    tasks: &[TaskSplits<'_>],
    model: &UlmParameters<F>,
    pool: &mut PromptPool<F>,
    verbalizers: &mut Verbalizers<F>,
    cfg: &TrainConfig,
    opts: FitOptions,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FitOutcome<F>> {
    cfg.validate()?;
    if !model.frozen {
        return Err(Error::Invalid("backbone must be frozen for prompt tuning".into()));
    }
    if tasks.is_empty() {
        return Err(Error::Invalid("no tasks to train".into()));
    }
    let units = model.config.units();
    for t in tasks {
        for (name, split) in [("train", t.train), ("val", t.val)] {
            if split.segments.is_empty() {
                return Err(Error::Invalid(format!("task {}: empty {name} split", split.task.id())));
            }
            if let Some(max) = split.max_unit() {
                if max >= units {
                    return Err(Error::Invalid(format!(
                        "task {}: unit {max} outside model vocabulary of {units} units",
                        split.task.id()
                    )));
                }
            }
        }
        verbalizer_for(verbalizers, &t.train.task)?;
    }

    let mut state = TrainState::new(cfg);
    let mut history = Vec::new();
    let mut best = (pool.clone(), verbalizers.clone(), 0usize);
    'epochs: loop {
        let epoch = state.epoch;
        // Seeded per-task shuffles, then round-robin interleaving of batches.
        let mut queues: Vec<Vec<Vec<usize>>> = tasks
            .iter()
            .enumerate()
            .map(|(ti, t)| {
                let mut idx: Vec<usize> = (0..t.train.segments.len()).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, epoch as u64, ti as u64]));
                idx.shuffle(&mut rng);
                idx.chunks(cfg.batch_size).map(|c| c.to_vec()).rev().collect()
            })
            .collect();
        let mut schedule = Vec::new();
        while queues.iter().any(|q| !q.is_empty()) {
            for (ti, q) in queues.iter_mut().enumerate() {
                if let Some(b) = q.pop() {
                    schedule.push((ti, b));
                }
            }
        }

        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for (ti, batch) in schedule {
            let split = tasks[ti].train;
            let task = &split.task;
            let vb = verbalizer_for(verbalizers, task)?;
            let weight = 1.0 / batch.len() as f64;
            let step = state.step;
            let results = opts.exec.map(&batch, |pos, &si| {
                let seg = &split.segments[si];
                let dropout = Dropout {
                    seed: derive_seed(&[cfg.seed, step, pos as u64, si as u64]),
                };
                segment_gradients(
                    model,
                    task,
                    pool,
                    vb,
                    &seg.units.units,
                    seg.label,
                    Some(dropout),
                    cfg,
                    opts.mode,
                    weight,
                )
            });
            // Fixed accumulation order: batch position.
            let mut pool_grad = pool.zeros_like();
            let mut vb_grads: Verbalizers<F> = verbalizers
                .iter()
                .map(|(k, v)| (k.clone(), v.zeros_like()))
                .collect();
            for r in results {
                let r = r?;
                loss_sum += r.loss;
                loss_count += 1;
                add_pool(&mut pool_grad, &r.pool_grad);
                let g = vb_grads.get_mut(&task.id()).expect("checked above");
                g.weight += &r.vb_grad.weight;
                g.bias += &r.vb_grad.bias;
            }
            let grads = trainable_gradients(&pool_grad, &vb_grads);
            adam_step(&mut state, cfg, trainable_parameters(pool, verbalizers), &grads)?;
            if opts.max_steps.is_some_and(|m| state.step >= m) {
                break;
            }
        }

        let val_loss = validation_loss(model, pool, verbalizers, tasks, opts.mode, opts.exec)?;
        let lr_used = state.current_lr;
        let outcome = plateau_step(&mut state, cfg, val_loss);
        if outcome.improved {
            best = (pool.clone(), verbalizers.clone(), state.epoch);
        }
        let log = EpochLog {
            epoch: state.epoch,
            train_loss: loss_sum / loss_count.max(1) as f64,
            val_loss,
            lr: lr_used,
        };
        log::debug!("{}", log.csv_line());
        on_epoch(&log);
        history.push(log);
        if outcome.stop || opts.max_steps.is_some_and(|m| state.step >= m) {
            break 'epochs;
        }
    }
    let (best_pool, best_vbs, best_epoch) = best;
    if best_epoch > 0 {
        *pool = best_pool;
        *verbalizers = best_vbs;
    }
    Ok(FitOutcome {
        state,
        history,
        best_epoch,
    })
}

fn add_pool<F: Real>(dst: &mut PromptPool<F>, src: &PromptPool<F>) {
    let mut theirs = Vec::new();
    src.visit(&mut |_, t| theirs.push(t));
    let mut i = 0;
    dst.visit_mut(&mut |_, mut t| {
        t += &theirs[i];
        i += 1;
    });
}
