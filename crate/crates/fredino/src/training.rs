//! Training: data-misfit losses through the unrolled fixed-point pass,
//! bias-corrected Adam with a piecewise-constant learning-rate schedule,
//! the two-phase alternating scheme for the nonlinear problem, and
//! contraction monitoring at checkpoints.
//!
//! Every epoch builds a fresh tape, registers the trainable model's
//! parameters as leaves (frozen models enter as constants, so their bytes
//! cannot change), and runs one full forward/backward/update cycle. A
//! forward blow-up is treated as the infinite-penalty branch of the
//! constrained objective: the step that caused it is rolled back, retried
//! once at half the learning rate, and a second blow-up aborts the run.

use crate::datagen::{stream_seed, FunctionPairDataset};
use crate::error::{Error, Result};
use crate::fredholm::{
    assemble, forward_linear, forward_recurrent, operator_norms, FredholmNetConfig, GApply,
    IterationMode,
};
use crate::metrics::rel_errors;
use crate::models::{kernel_eval_grid, mlp_forward, MlpModel, MlpParams};
use crate::quadrature::Grid;
use crate::tensor::{Pointwise, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use std::time::Instant;

const STREAM_BATCH: u64 = 3;
/// Probe resolution for the G regularizer (uniform points over the f-range).
const G_PROBE_POINTS: usize = 256;

// ───────────────────────────── config ─────────────────────────────

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    Full,
    Mini(usize),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AltMinConfig {
    pub phase_a_epochs: usize,
    pub phase_b_epochs: usize,
    pub rounds: usize,
    pub fine_tune_epochs: usize,
    pub fine_tune_lr: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    /// (epoch_threshold, lr) pairs; the active lr has the largest
    /// threshold ≤ epoch.
    pub lr_schedule: Vec<(usize, f64)>,
    pub lambda_k: f64,
    pub lambda_g: f64,
    pub batch: BatchMode,
    pub alt_min: Option<AltMinConfig>,
    #[serde(default)]
    pub adam: AdamHyper,
    pub seed: u64,
    /// Contraction checkpoint cadence; 0 picks epochs/10.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_schedule.is_empty() {
            return Err(Error::EmptySchedule);
        }
        let mut prev: Option<(usize, f64)> = None;
        for &(threshold, lr) in &self.lr_schedule {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::InvalidRange(format!("non-positive lr {lr}")));
            }
            if let Some((pt, plr)) = prev {
                if threshold <= pt {
                    return Err(Error::InvalidRange("lr thresholds must increase".into()));
                }
                if lr > plr {
                    return Err(Error::InvalidRange("lr values must be non-increasing".into()));
                }
            }
            prev = Some((threshold, lr));
        }
        if self.lambda_k < 0.0 || self.lambda_g < 0.0 {
            return Err(Error::InvalidRange("regularization weights must be >= 0".into()));
        }
        if let BatchMode::Mini(0) = self.batch {
            return Err(Error::InvalidRange("mini-batch size must be >= 1".into()));
        }
        if let Some(alt) = &self.alt_min {
            if alt.rounds == 0 || (alt.phase_a_epochs == 0 && alt.phase_b_epochs == 0) {
                return Err(Error::InvalidRange("alternating schedule has no epochs".into()));
            }
            if alt.fine_tune_epochs > 0 && !(alt.fine_tune_lr > 0.0) {
                return Err(Error::InvalidRange("fine-tune lr must be positive".into()));
            }
        } else if self.epochs == 0 {
            return Err(Error::InvalidRange("epochs must be >= 1".into()));
        }
        Ok(())
    }

    fn checkpoint_cadence(&self, total_epochs: usize) -> usize {
        if self.checkpoint_every > 0 {
            self.checkpoint_every
        } else {
            (total_epochs / 10).max(1)
        }
    }
}

/// Default decay: three equal segments at lr, lr/10, lr/100.
pub fn default_lr_schedule(epochs: usize, lr0: f64) -> Vec<(usize, f64)> {
    let third = (epochs / 3).max(1);
    vec![(0, lr0), (third, lr0 / 10.0), (2 * third, lr0 / 100.0)]
}

/// Piecewise-constant lookup: the entry with the largest threshold ≤ epoch
/// (the first entry when the epoch precedes every threshold).
pub fn lr_at(schedule: &[(usize, f64)], epoch: usize) -> Result<f64> {
    if schedule.is_empty() {
        return Err(Error::EmptySchedule);
    }
    let mut lr = schedule[0].1;
    for &(threshold, value) in schedule {
        if threshold <= epoch {
            lr = value;
        }
    }
    Ok(lr)
}

// ───────────────────────────── adam ─────────────────────────────

#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(shapes: &[&Tensor]) -> Self {
        Self::from_lens(&shapes.iter().map(|t| t.len()).collect::<Vec<_>>())
    }

    pub fn from_lens(lens: &[usize]) -> Self {
        AdamState {
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// Standard bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    hyper: &AdamHyper,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch { op: "adam_step", detail: "slot count".into() });
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for ((param, grad), (m, v)) in
        params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(&mut state.v))
    {
        if param.len() != grad.len() {
            return Err(Error::ShapeMismatch { op: "adam_step", detail: "grad shape".into() });
        }
        let data = param.data_mut();
        for i in 0..data.len() {
            let g = grad.data()[i];
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

// ───────────────────────────── losses ─────────────────────────────

/// Shared per-run tensors: the pair matrix is the expensive constant, built
/// once and reused every epoch.
pub struct LossContext {
    pub grid: Grid,
    pub net: FredholmNetConfig,
    /// n x M columns.
    pub g_cols: Tensor,
    pub f_cols: Tensor,
    pub lambda_k: f64,
    pub lambda_g: f64,
    /// Fixed probe vector for the G regularizer (nonlinear runs).
    pub probe: Option<Tensor>,
}

impl LossContext {
    pub fn new(
        dataset: &FunctionPairDataset,
        net: &FredholmNetConfig,
        lambda_k: f64,
        lambda_g: f64,
    ) -> Result<Self> {
        let grid = dataset.grid.clone();
        let probe = if net.mode == IterationMode::RecurrentPicard {
            Some(probe_over_range(dataset.f_matrix.data(), G_PROBE_POINTS)?)
        } else {
            None
        };
        Ok(LossContext {
            grid,
            net: *net,
            g_cols: dataset.g_columns(),
            f_cols: dataset.f_columns(),
            lambda_k,
            lambda_g,
            probe,
        })
    }
}

/// Uniform probe points spanning the observed value range.
pub fn probe_over_range(values: &[f64], count: usize) -> Result<Tensor> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let step = (hi - lo) / (count - 1) as f64;
    Tensor::new(count, 1, (0..count).map(|i| lo + i as f64 * step).collect())
}

pub struct LossParts {
    /// Scalar loss node on the epoch's tape.
    pub loss: Tensor,
    /// Detached kernel grid evaluation, for contraction diagnostics.
    pub kernel_grid: Tensor,
}

/// Mean squared data misfit through the damped linear pass plus
/// λ_K ‖K_θ grid‖_F².
pub fn loss_linear(
    tape: &Tape,
    k_params: &MlpParams,
    ctx: &LossContext,
    g_cols: &Tensor,
    f_cols: &Tensor,
) -> Result<LossParts> {
    let kernel_grid = kernel_eval_grid(tape, k_params, &ctx.grid.nodes, &ctx.grid.nodes)?;
    let op = assemble(tape, &kernel_grid, &ctx.grid, &ctx.net)?;
    let run = forward_linear(tape, &op, g_cols, false)?;
    let diff = tape.sub(&run.output, f_cols)?;
    let mut loss = tape.mean(&tape.pointwise(&diff, Pointwise::Square)?)?;
    if ctx.lambda_k > 0.0 {
        let frob = tape.sum(&tape.pointwise(&kernel_grid, Pointwise::Square)?)?;
        loss = tape.add(&loss, &tape.scale(&frob, ctx.lambda_k)?)?;
    }
    Ok(LossParts { loss, kernel_grid: kernel_grid.detach() })
}

/// Nonlinear counterpart through the Picard pass, with both Frobenius
/// regularizers. The G term evaluates G_ϑ on the fixed probe vector.
pub fn loss_nonlinear(
    tape: &Tape,
    k_params: &MlpParams,
    g_params: &MlpParams,
    ctx: &LossContext,
    g_cols: &Tensor,
    f_cols: &Tensor,
) -> Result<LossParts> {
    let kernel_grid = kernel_eval_grid(tape, k_params, &ctx.grid.nodes, &ctx.grid.nodes)?;
    let op = assemble(tape, &kernel_grid, &ctx.grid, &ctx.net)?;
    let run = forward_recurrent(tape, &op, g_cols, &GApply::Surrogate(g_params), false)?;
    let diff = tape.sub(&run.output, f_cols)?;
    let mut loss = tape.mean(&tape.pointwise(&diff, Pointwise::Square)?)?;
    if ctx.lambda_k > 0.0 {
        let frob = tape.sum(&tape.pointwise(&kernel_grid, Pointwise::Square)?)?;
        loss = tape.add(&loss, &tape.scale(&frob, ctx.lambda_k)?)?;
    }
    if ctx.lambda_g > 0.0 {
        let probe = ctx.probe.as_ref().ok_or(Error::EmptyInput)?;
        let g_eval = mlp_forward(tape, g_params, probe)?;
        let frob_g = tape.sum(&tape.pointwise(&g_eval, Pointwise::Square)?)?;
        loss = tape.add(&loss, &tape.scale(&frob_g, ctx.lambda_g)?)?;
    }
    Ok(LossParts { loss, kernel_grid: kernel_grid.detach() })
}

// ───────────────────────────── reports ─────────────────────────────

#[derive(Clone, Copy, Debug, Serialize)]
pub struct CheckpointRecord {
    pub epoch: usize,
    pub inf_norm: f64,
    pub spectral_norm: f64,
    pub contractive: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    pub checkpoints: Vec<CheckpointRecord>,
    pub final_loss: f64,
    pub mean_loss: f64,
    pub median_loss: f64,
    pub wall_time_s: f64,
    pub diverged_retries: usize,
}

impl TrainReport {
    fn from_curve(
        losses: Vec<f64>,
        lrs: Vec<f64>,
        checkpoints: Vec<CheckpointRecord>,
        wall_time_s: f64,
        diverged_retries: usize,
    ) -> Self {
        let final_loss = *losses.last().expect("non-empty curve");
        let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let mut sorted = losses.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let median_loss = if sorted.len() % 2 == 1 {
            sorted[sorted.len() / 2]
        } else {
            0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
        };
        TrainReport {
            losses,
            lrs,
            checkpoints,
            final_loss,
            mean_loss,
            median_loss,
            wall_time_s,
            diverged_retries,
        }
    }

    /// CSV rows: epoch, loss, lr, contractive (blank between checkpoints).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,lr,contractive\n");
        for (epoch, (loss, lr)) in self.losses.iter().zip(&self.lrs).enumerate() {
            let flag = self
                .checkpoints
                .iter()
                .find(|c| c.epoch == epoch)
                .map(|c| c.contractive.to_string())
                .unwrap_or_default();
            out.push_str(&format!("{epoch},{loss:.12e},{lr:.6e},{flag}\n"));
        }
        out
    }
}

// ───────────────────────────── training driver ─────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PhaseKind {
    Linear,
    NlKernel,
    NlG,
    NlJoint,
}

#[derive(Clone, Copy, Debug)]
struct Segment {
    kind: PhaseKind,
    epochs: usize,
    lr_override: Option<f64>,
}

struct Snapshot {
    params: Vec<Tensor>,
    adam: AdamState,
    grads: Vec<Tensor>,
    lr: f64,
    kind: PhaseKind,
}

fn clone_params(model: &MlpModel) -> Vec<Tensor> {
    model.params().into_iter().cloned().collect()
}

/// Gradients w.r.t. a leaf set, in `params()` order.
fn collect_grads(grads: &crate::tensor::Gradients, leaves: &MlpParams) -> Result<Vec<Tensor>> {
    leaves.all().into_iter().map(|t| grads.wrt(t)).collect()
}

fn select_columns(t: &Tensor, idx: &[usize]) -> Tensor {
    let (n, m) = (t.rows(), t.cols());
    let mut out = vec![0.0; n * idx.len()];
    for i in 0..n {
        for (jj, &j) in idx.iter().enumerate() {
            debug_assert!(j < m);
            out[i * idx.len() + jj] = t.get(i, j);
        }
    }
    Tensor::new(n, idx.len(), out).expect("subset of finite data")
}

struct Driver<'a> {
    ctx: &'a LossContext,
    config: &'a TrainingConfig,
    total_epochs: usize,
    losses: Vec<f64>,
    lrs: Vec<f64>,
    checkpoints: Vec<CheckpointRecord>,
    lr_scale: f64,
    retries: usize,
    adam_k: Option<AdamState>,
    adam_g: Option<AdamState>,
    adam_joint: Option<AdamState>,
}

impl<'a> Driver<'a> {
    fn batch(&self, epoch: usize) -> (Tensor, Tensor) {
        match self.config.batch {
            BatchMode::Full => (self.ctx.g_cols.clone(), self.ctx.f_cols.clone()),
            BatchMode::Mini(size) => {
                let m = self.ctx.g_cols.cols();
                let take = size.min(m);
                let mut rng = Xoshiro256PlusPlus::seed_from_u64(stream_seed(
                    self.config.seed,
                    STREAM_BATCH,
                    epoch as u64,
                ));
                let mut pool: Vec<usize> = (0..m).collect();
                // Partial Fisher-Yates: the first `take` entries.
                for i in 0..take {
                    let j = i + rng.gen_range(0..m - i);
                    pool.swap(i, j);
                }
                let idx = &pool[..take];
                (select_columns(&self.ctx.g_cols, idx), select_columns(&self.ctx.f_cols, idx))
            }
        }
    }

    fn checkpoint(&mut self, epoch: usize, kernel_grid: &Tensor) {
        let cadence = self.config.checkpoint_cadence(self.total_epochs);
        if epoch % cadence != 0 && epoch + 1 != self.total_epochs {
            return;
        }
        let n = self.ctx.grid.len();
        let kv = kernel_grid.data();
        let mut tilde = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                tilde[i * n + j] = kv[i * n + j] * self.ctx.grid.weights[j];
            }
        }
        let w = Tensor::new(n, n, tilde).expect("finite kernel grid");
        let (inf_norm, spectral_norm) = operator_norms(&w);
        self.checkpoints.push(CheckpointRecord {
            epoch,
            inf_norm,
            spectral_norm,
            contractive: inf_norm < 1.0 || spectral_norm < 1.0,
        });
    }

    fn adam_for(&mut self, kind: PhaseKind, slots: &[&Tensor]) -> &mut AdamState {
        let slot = match kind {
            PhaseKind::Linear | PhaseKind::NlKernel => &mut self.adam_k,
            PhaseKind::NlG => &mut self.adam_g,
            PhaseKind::NlJoint => &mut self.adam_joint,
        };
        slot.get_or_insert_with(|| AdamState::new(slots))
    }

    fn run(
        &mut self,
        segments: &[Segment],
        k_model: &mut MlpModel,
        g_model: Option<&mut MlpModel>,
    ) -> Result<()> {
        let mut g_model = g_model;
        let mut snapshot: Option<Snapshot> = None;
        let mut retried_here = false;
        let mut global_epoch = 0usize;

        for segment in segments {
            let mut epoch_in_segment = 0usize;
            while epoch_in_segment < segment.epochs {
                let lr_base = match segment.lr_override {
                    Some(lr) => lr,
                    None => lr_at(&self.config.lr_schedule, global_epoch)?,
                };
                let lr = lr_base * self.lr_scale;
                let (g_cols, f_cols) = self.batch(global_epoch);
                let tape = Tape::new();

                let outcome: Result<(f64, Vec<Tensor>, Tensor)> = (|| {
                    match segment.kind {
                        PhaseKind::Linear => {
                            let k_leaves = k_model.leaves(&tape);
                            let parts = loss_linear(&tape, &k_leaves, self.ctx, &g_cols, &f_cols)?;
                            let value = parts.loss.item();
                            let grads = tape.backward(&parts.loss)?;
                            Ok((value, collect_grads(&grads, &k_leaves)?, parts.kernel_grid))
                        }
                        PhaseKind::NlKernel => {
                            let k_leaves = k_model.leaves(&tape);
                            let g_const = g_model.as_ref().expect("nonlinear phase").constants();
                            let parts =
                                loss_nonlinear(&tape, &k_leaves, &g_const, self.ctx, &g_cols, &f_cols)?;
                            let value = parts.loss.item();
                            let grads = tape.backward(&parts.loss)?;
                            Ok((value, collect_grads(&grads, &k_leaves)?, parts.kernel_grid))
                        }
                        PhaseKind::NlG => {
                            let k_const = k_model.constants();
                            let g_leaves = g_model.as_ref().expect("nonlinear phase").leaves(&tape);
                            let parts =
                                loss_nonlinear(&tape, &k_const, &g_leaves, self.ctx, &g_cols, &f_cols)?;
                            let value = parts.loss.item();
                            let grads = tape.backward(&parts.loss)?;
                            Ok((value, collect_grads(&grads, &g_leaves)?, parts.kernel_grid))
                        }
                        PhaseKind::NlJoint => {
                            let k_leaves = k_model.leaves(&tape);
                            let g_leaves = g_model.as_ref().expect("nonlinear phase").leaves(&tape);
                            let parts =
                                loss_nonlinear(&tape, &k_leaves, &g_leaves, self.ctx, &g_cols, &f_cols)?;
                            let value = parts.loss.item();
                            let grads = tape.backward(&parts.loss)?;
                            let mut all = collect_grads(&grads, &k_leaves)?;
                            all.extend(collect_grads(&grads, &g_leaves)?);
                            Ok((value, all, parts.kernel_grid))
                        }
                    }
                })();

                match outcome {
                    Ok((loss_value, grad_list, kernel_grid)) => {
                        // Snapshot the state the update starts from, so a
                        // later blow-up can roll this step back.
                        let params_before = match segment.kind {
                            PhaseKind::Linear | PhaseKind::NlKernel => clone_params(k_model),
                            PhaseKind::NlG => clone_params(g_model.as_ref().unwrap()),
                            PhaseKind::NlJoint => {
                                let mut p = clone_params(k_model);
                                p.extend(clone_params(g_model.as_ref().unwrap()));
                                p
                            }
                        };
                        let shapes: Vec<&Tensor> = params_before.iter().collect();
                        let adam_before = self.adam_for(segment.kind, &shapes).clone();

                        self.apply_update(segment.kind, k_model, &mut g_model, &grad_list, lr)?;

                        snapshot = Some(Snapshot {
                            params: params_before,
                            adam: adam_before,
                            grads: grad_list,
                            lr,
                            kind: segment.kind,
                        });
                        self.losses.push(loss_value);
                        self.lrs.push(lr);
                        self.checkpoint(global_epoch, &kernel_grid);
                        retried_here = false;
                        epoch_in_segment += 1;
                        global_epoch += 1;
                    }
                    Err(e @ (Error::DivergedForward { .. } | Error::NonFiniteValue { .. })) => {
                        let Some(snap) = snapshot.take() else { return Err(e) };
                        if retried_here {
                            return Err(e);
                        }
                        // Roll the offending step back and retake it at half
                        // the learning rate; the halving sticks for the rest
                        // of the run.
                        self.restore(&snap, k_model, &mut g_model)?;
                        self.lr_scale *= 0.5;
                        self.retries += 1;
                        let half_lr = snap.lr * 0.5;
                        let kind = snap.kind;
                        let grads = snap.grads.clone();
                        self.apply_update(kind, k_model, &mut g_model, &grads, half_lr)?;
                        snapshot = Some(snap);
                        retried_here = true;
                        // Epoch counters unchanged: the epoch re-runs with
                        // the corrected parameters.
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(())
    }

    fn apply_update(
        &mut self,
        kind: PhaseKind,
        k_model: &mut MlpModel,
        g_model: &mut Option<&mut MlpModel>,
        grads: &[Tensor],
        lr: f64,
    ) -> Result<()> {
        let hyper = self.config.adam;
        let mut slots = match kind {
            PhaseKind::Linear | PhaseKind::NlKernel => k_model.params_mut(),
            PhaseKind::NlG => g_model.as_mut().expect("nonlinear phase").params_mut(),
            PhaseKind::NlJoint => {
                let mut s = k_model.params_mut();
                s.extend(g_model.as_mut().expect("nonlinear phase").params_mut());
                s
            }
        };
        let lens: Vec<usize> = slots.iter().map(|t| t.len()).collect();
        let state_slot = match kind {
            PhaseKind::Linear | PhaseKind::NlKernel => &mut self.adam_k,
            PhaseKind::NlG => &mut self.adam_g,
            PhaseKind::NlJoint => &mut self.adam_joint,
        };
        let state = state_slot.get_or_insert_with(|| AdamState::from_lens(&lens));
        adam_step(&mut slots, grads, state, &hyper, lr)
    }

    fn restore(
        &mut self,
        snap: &Snapshot,
        k_model: &mut MlpModel,
        g_model: &mut Option<&mut MlpModel>,
    ) -> Result<()> {
        match snap.kind {
            PhaseKind::Linear | PhaseKind::NlKernel => {
                k_model.set_params(&snap.params)?;
                self.adam_k = Some(snap.adam.clone());
            }
            PhaseKind::NlG => {
                g_model.as_mut().expect("nonlinear phase").set_params(&snap.params)?;
                self.adam_g = Some(snap.adam.clone());
            }
            PhaseKind::NlJoint => {
                let k_count = k_model.params().len();
                k_model.set_params(&snap.params[..k_count])?;
                g_model.as_mut().expect("nonlinear phase").set_params(&snap.params[k_count..])?;
                self.adam_joint = Some(snap.adam.clone());
            }
        }
        Ok(())
    }
}

/// Full-batch (or mini-batch) Adam over the linear loss; the trained kernel
/// lands in `k_model`.
pub fn train_linear(
    k_model: &mut MlpModel,
    dataset: &FunctionPairDataset,
    net: &FredholmNetConfig,
    config: &TrainingConfig,
) -> Result<TrainReport> {
    config.validate()?;
    net.validate()?;
    if net.mode != IterationMode::LinearKm {
        return Err(Error::UnknownKind("train_linear needs linear_km mode".into()));
    }
    let started = Instant::now();
    let ctx = LossContext::new(dataset, net, config.lambda_k, config.lambda_g)?;
    let segments =
        [Segment { kind: PhaseKind::Linear, epochs: config.epochs, lr_override: None }];
    let mut driver = Driver {
        ctx: &ctx,
        config,
        total_epochs: config.epochs,
        losses: Vec::new(),
        lrs: Vec::new(),
        checkpoints: Vec::new(),
        lr_scale: 1.0,
        retries: 0,
        adam_k: None,
        adam_g: None,
        adam_joint: None,
    };
    driver.run(&segments, k_model, None)?;
    Ok(TrainReport::from_curve(
        driver.losses,
        driver.lrs,
        driver.checkpoints,
        started.elapsed().as_secs_f64(),
        driver.retries,
    ))
}

/// Alternating minimization: rounds of (Phase A: θ with ϑ frozen, Phase B:
/// ϑ with θ frozen), then an optional joint low-rate fine-tune. Frozen
/// parameters enter the loss as constants and are bitwise untouched.
pub fn train_alternating(
    k_model: &mut MlpModel,
    g_model: &mut MlpModel,
    dataset: &FunctionPairDataset,
    net: &FredholmNetConfig,
    config: &TrainingConfig,
) -> Result<TrainReport> {
    config.validate()?;
    net.validate()?;
    if net.mode != IterationMode::RecurrentPicard {
        return Err(Error::UnknownKind("train_alternating needs recurrent_picard mode".into()));
    }
    let alt = config.alt_min.ok_or(Error::Config("alt_min config required".into()))?;
    let started = Instant::now();
    let ctx = LossContext::new(dataset, net, config.lambda_k, config.lambda_g)?;

    let mut segments = Vec::new();
    for _ in 0..alt.rounds {
        if alt.phase_a_epochs > 0 {
            segments.push(Segment {
                kind: PhaseKind::NlKernel,
                epochs: alt.phase_a_epochs,
                lr_override: None,
            });
        }
        if alt.phase_b_epochs > 0 {
            segments.push(Segment {
                kind: PhaseKind::NlG,
                epochs: alt.phase_b_epochs,
                lr_override: None,
            });
        }
    }
    if alt.fine_tune_epochs > 0 {
        segments.push(Segment {
            kind: PhaseKind::NlJoint,
            epochs: alt.fine_tune_epochs,
            lr_override: Some(alt.fine_tune_lr),
        });
    }
    let total: usize = segments.iter().map(|s| s.epochs).sum();
    let mut driver = Driver {
        ctx: &ctx,
        config,
        total_epochs: total,
        losses: Vec::new(),
        lrs: Vec::new(),
        checkpoints: Vec::new(),
        lr_scale: 1.0,
        retries: 0,
        adam_k: None,
        adam_g: None,
        adam_joint: None,
    };
    driver.run(&segments, k_model, Some(g_model))?;
    Ok(TrainReport::from_curve(
        driver.losses,
        driver.lrs,
        driver.checkpoints,
        started.elapsed().as_secs_f64(),
        driver.retries,
    ))
}

// ───────────────────────────── evaluation ─────────────────────────────

/// Rebuild the learned operator on an arbitrary grid and score each test
/// function: returns (rel_l1, rel_l2, rel_linf) per column of `g_cols`.
pub fn evaluate(
    k_model: &MlpModel,
    g_model: Option<&MlpModel>,
    grid: &Grid,
    g_cols: &Tensor,
    f_cols: &Tensor,
    net: &FredholmNetConfig,
) -> Result<Vec<(f64, f64, f64)>> {
    let tape = Tape::inactive();
    let k_params = k_model.constants();
    let kernel_grid = kernel_eval_grid_on(&tape, &k_params, grid)?;
    let op = assemble(&tape, &kernel_grid, grid, net)?;
    let output = match net.mode {
        IterationMode::LinearKm => forward_linear(&tape, &op, g_cols, false)?.output,
        IterationMode::RecurrentPicard => {
            let g_params = g_model.ok_or(Error::Config("recurrent evaluation needs G".into()))?;
            forward_recurrent(&tape, &op, g_cols, &GApply::Surrogate(&g_params.constants()), false)?
                .output
        }
    };
    let n = grid.len();
    let mut results = Vec::with_capacity(g_cols.cols());
    let mut f_hat = vec![0.0; n];
    let mut f_true = vec![0.0; n];
    for j in 0..g_cols.cols() {
        for i in 0..n {
            f_hat[i] = output.get(i, j);
            f_true[i] = f_cols.get(i, j);
        }
        results.push(rel_errors(&f_hat, &f_true, &grid.weights)?);
    }
    Ok(results)
}

fn kernel_eval_grid_on(tape: &Tape, params: &MlpParams, grid: &Grid) -> Result<Tensor> {
    crate::models::kernel_eval_grid(tape, params, &grid.nodes, &grid.nodes)
}

// ───────────────────────────── tests ─────────────────────────────
