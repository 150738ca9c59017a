//! The Fredholm network core: discretized operator assembly, the M-layer
//! damped fixed-point forward pass, the recurrent pass with a pointwise
//! nonlinearity, a dense LU solve as the independent oracle, contraction
//! diagnostics, and kernel-scale calibration.
//!
//! Notation: W̃ is the raw discretized integral operator, W̃_ij = K(z_i, z_j)
//! Δz_j. The damped layer weights fold the Krasnosel'skii–Mann constant κ
//! into W̃ and put (1−κ) on the diagonal, so one matrix-vector product per
//! layer performs one damped fixed-point update:
//!
//!   linear:    W_ij = κ K(z_i,z_j) Δz_j + (1−κ)·[i = j]
//!              f⁽⁰⁾ = κg,  f⁽ᵏ⁾ = W f⁽ᵏ⁻¹⁾ + κg,          k = 1..M
//!   recurrent: W = W̃ (κ = 1, no identity mixing)
//!              f⁽⁰⁾ = g,   f⁽ᵏ⁾ = W G(f⁽ᵏ⁻¹⁾) + g,        k = 1..M
//!
//! The iterate f⁽ᴹ⁾ is the network output; for contractive W̃ it approaches
//! the dense-solve fixed point geometrically in M.

use crate::error::{Error, Result};
use crate::models::{mlp_forward, MlpParams};
use crate::quadrature::Grid;
use crate::tensor::{Tape, Tensor};
use serde::{Deserialize, Serialize};

/// Sup-norm growth beyond this factor over the input aborts the pass.
const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationMode {
    LinearKm,
    RecurrentPicard,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FredholmNetConfig {
    pub depth_m: usize,
    pub kappa: f64,
    pub mode: IterationMode,
}

impl FredholmNetConfig {
    pub fn linear(depth_m: usize, kappa: f64) -> Self {
        FredholmNetConfig { depth_m, kappa, mode: IterationMode::LinearKm }
    }

    pub fn recurrent(depth_m: usize) -> Self {
        FredholmNetConfig { depth_m, kappa: 1.0, mode: IterationMode::RecurrentPicard }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return Err(Error::KappaOutOfRange { kappa: self.kappa });
        }
        if self.mode == IterationMode::RecurrentPicard && self.kappa != 1.0 {
            // The recurrent pass is Picard iteration; damping is undefined there.
            return Err(Error::KappaOutOfRange { kappa: self.kappa });
        }
        if self.depth_m == 0 {
            return Err(Error::InvalidRange("depth_m must be >= 1".into()));
        }
        Ok(())
    }
}

/// Smallest M with (1 − κ(1 − ‖W̃‖))^M ≤ tol: the damped contraction factor
/// reaches the tolerance after M layers.
pub fn depth_for_tolerance(kappa: f64, w_norm: f64, tol: f64) -> usize {
    let factor = 1.0 - kappa * (1.0 - w_norm);
    (tol.ln() / factor.ln()).ceil() as usize
}

pub struct AssembledOperator {
    /// Mode-specific layer weights (tape-attached when assembled on an
    /// active tape).
    pub w: Tensor,
    /// Detached κ-independent part W̃ = K Δz, for norm diagnostics.
    pub w_tilde: Tensor,
    pub config: FredholmNetConfig,
    pub grid_weights: Vec<f64>,
}

/// Builds the layer weight matrix from kernel values on the grid product.
/// Differentiable w.r.t. `kernel_values` when the tape is active.
pub fn assemble(
    tape: &Tape,
    kernel_values: &Tensor,
    grid: &Grid,
    config: &FredholmNetConfig,
) -> Result<AssembledOperator> {
    config.validate()?;
    let n = grid.len();
    if kernel_values.rows() != n || kernel_values.cols() != n {
        return Err(Error::ShapeMismatch {
            op: "assemble",
            detail: format!("kernel {}x{} for grid of {}", kernel_values.rows(), kernel_values.cols(), n),
        });
    }

    // Column scaling by κΔz_j plus (1−κ) on the diagonal, as one hadamard
    // and one constant add so gradients flow through kernel_values only.
    let kappa = config.kappa;
    let mut scale = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            scale[i * n + j] = kappa * grid.weights[j];
        }
    }
    let scaled = tape.hadamard(kernel_values, &Tensor::new(n, n, scale)?)?;
    let w = if kappa < 1.0 {
        let mut diag = vec![0.0; n * n];
        for i in 0..n {
            diag[i * n + i] = 1.0 - kappa;
        }
        tape.add(&scaled, &Tensor::new(n, n, diag)?)?
    } else {
        scaled
    };

    let kv = kernel_values.data();
    let mut tilde = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            tilde[i * n + j] = kv[i * n + j] * grid.weights[j];
        }
    }

    Ok(AssembledOperator {
        w,
        w_tilde: Tensor::new(n, n, tilde)?,
        config: *config,
        grid_weights: grid.weights.clone(),
    })
}

/// One forward pass result. `layers` holds detached copies of f⁽⁰⁾..f⁽ᴹ⁾
/// when recording was requested (for contraction diagnostics).
pub struct ForwardRun {
    pub output: Tensor,
    pub layers: Vec<Tensor>,
}

/// How the recurrent pass applies G to a layer's values.
pub enum GApply<'a> {
    /// Differentiable surrogate; applied as one batched forward pass.
    Surrogate(&'a MlpParams),
    /// Fixed analytic nonlinearity (data generation, evaluation).
    Analytic(&'a dyn Fn(f64) -> f64),
    Identity,
}

impl GApply<'_> {
    fn apply(&self, tape: &Tape, f: &Tensor) -> Result<Tensor> {
        match self {
            GApply::Surrogate(params) => {
                let flat = tape.reshape(f, f.len(), 1)?;
                let out = mlp_forward(tape, params, &flat)?;
                tape.reshape(&out, f.rows(), f.cols())
            }
            GApply::Analytic(g) => {
                let data = f.data().iter().map(|&u| g(u)).collect();
                Tensor::new(f.rows(), f.cols(), data)
            }
            GApply::Identity => Ok(f.clone()),
        }
    }
}

fn guard(layer: usize, f: &Tensor, limit: f64) -> Result<()> {
    let sup = f.sup_norm();
    if sup > limit {
        return Err(Error::DivergedForward { layer, sup });
    }
    Ok(())
}

/// Damped fixed-point pass for the linear equation. `g` may hold one column
/// per input function; all columns share the operator.
pub fn forward_linear(
    tape: &Tape,
    op: &AssembledOperator,
    g: &Tensor,
    record_layers: bool,
) -> Result<ForwardRun> {
    if op.config.mode != IterationMode::LinearKm {
        return Err(Error::UnknownKind("forward_linear needs a linear_km operator".into()));
    }
    if g.rows() != op.w.rows() {
        return Err(Error::ShapeMismatch {
            op: "forward_linear",
            detail: format!("g has {} rows for operator of {}", g.rows(), op.w.rows()),
        });
    }
    let limit = DIVERGENCE_FACTOR * g.sup_norm().max(1.0);
    let f0 = tape.scale(g, op.config.kappa)?;
    let mut layers = Vec::new();
    if record_layers {
        layers.push(f0.detach());
    }
    let mut f = f0.clone();
    for k in 1..=op.config.depth_m {
        f = tape.add(&tape.matmul(&op.w, &f)?, &f0)?;
        guard(k, &f, limit)?;
        if record_layers {
            layers.push(f.detach());
        }
    }
    Ok(ForwardRun { output: f, layers })
}

/// Picard pass for the nonlinear equation: f⁽ᵏ⁾ = W G(f⁽ᵏ⁻¹⁾) + g.
pub fn forward_recurrent(
    tape: &Tape,
    op: &AssembledOperator,
    g: &Tensor,
    nonlinearity: &GApply,
    record_layers: bool,
) -> Result<ForwardRun> {
    if op.config.mode != IterationMode::RecurrentPicard {
        return Err(Error::UnknownKind("forward_recurrent needs a recurrent_picard operator".into()));
    }
    if g.rows() != op.w.rows() {
        return Err(Error::ShapeMismatch {
            op: "forward_recurrent",
            detail: format!("g has {} rows for operator of {}", g.rows(), op.w.rows()),
        });
    }
    let limit = DIVERGENCE_FACTOR * g.sup_norm().max(1.0);
    let mut layers = Vec::new();
    let mut f = g.clone();
    if record_layers {
        layers.push(f.detach());
    }
    for k in 1..=op.config.depth_m {
        let gf = nonlinearity.apply(tape, &f)?;
        f = tape.add(&tape.matmul(&op.w, &gf)?, g)?;
        guard(k, &f, limit)?;
        if record_layers {
            layers.push(f.detach());
        }
    }
    Ok(ForwardRun { output: f, layers })
}

/// Read-out at off-grid queries for the Picard case (κ = 1):
/// f̂(x) = Σ_j K(x, z_j) Δz_j f⁽ᴹ⁻¹⁾_j + g(x).
pub fn readout_offgrid(
    kernel: &dyn Fn(&[f64], &[f64]) -> f64,
    grid: &Grid,
    f_prev: &[f64],
    x_query: &[Vec<f64>],
    g_query: &[f64],
) -> Result<Vec<f64>> {
    if f_prev.len() != grid.len() || g_query.len() != x_query.len() {
        return Err(Error::ShapeMismatch { op: "readout_offgrid", detail: "length mismatch".into() });
    }
    Ok(x_query
        .iter()
        .zip(g_query)
        .map(|(x, gq)| {
            let acc: f64 = (0..grid.len())
                .map(|j| kernel(x, grid.node(j)) * grid.weights[j] * f_prev[j])
                .sum();
            acc + gq
        })
        .collect())
}

// ───────────────────────────── dense solve oracle ─────────────────────────────

/// Solves (I − W̃) f = g by LU with partial pivoting; the quadrature-exact
/// fixed point the forward pass converges to. `g` may hold many columns.
pub fn direct_solve_oracle(kernel_values: &Tensor, grid: &Grid, g: &Tensor) -> Result<Tensor> {
    let n = grid.len();
    if kernel_values.rows() != n || kernel_values.cols() != n || g.rows() != n {
        return Err(Error::ShapeMismatch { op: "direct_solve_oracle", detail: "size mismatch".into() });
    }
    let kv = kernel_values.data();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let w = kv[i * n + j] * grid.weights[j];
            a[i * n + j] = if i == j { 1.0 - w } else { -w };
        }
    }
    let f = lu_solve(a, n, g.data(), g.cols())?;
    Tensor::new(n, g.cols(), f)
}

/// LU with partial pivoting; `b` is n x m row-major, solved in place per column.
pub fn lu_solve(mut a: Vec<f64>, n: usize, b: &[f64], m: usize) -> Result<Vec<f64>> {
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let (mut best, mut best_abs) = (col, a[perm[col] * n + col].abs());
        for row in col + 1..n {
            let v = a[perm[row] * n + col].abs();
            if v > best_abs {
                best = row;
                best_abs = v;
            }
        }
        if best_abs == 0.0 {
            return Err(Error::SingularSystem { pivot: col });
        }
        perm.swap(col, best);
        let pivot = a[perm[col] * n + col];
        for row in col + 1..n {
            let factor = a[perm[row] * n + col] / pivot;
            a[perm[row] * n + col] = factor;
            for j in col + 1..n {
                a[perm[row] * n + j] -= factor * a[perm[col] * n + j];
            }
        }
    }

    let mut x = vec![0.0; n * m];
    let mut y = vec![0.0; n];
    for rhs in 0..m {
        for i in 0..n {
            let mut v = b[perm[i] * m + rhs];
            for j in 0..i {
                v -= a[perm[i] * n + j] * y[j];
            }
            y[i] = v;
        }
        for i in (0..n).rev() {
            let mut v = y[i];
            for j in i + 1..n {
                v -= a[perm[i] * n + j] * x[j * m + rhs];
            }
            x[i * m + rhs] = v / a[perm[i] * n + i];
        }
    }
    Ok(x)
}

// ───────────────────────────── diagnostics ─────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct ContractionReport {
    /// ρ̂⁽ᵏ⁾ in the sup norm, k = 1.. (difference of consecutive layers).
    pub successive_sup: Vec<f64>,
    /// ρ̂⁽ᵏ⁾ in the weighted discrete L2 norm.
    pub successive_l2: Vec<f64>,
    /// ratio[k−2] = ρ̂⁽ᵏ⁾/ρ̂⁽ᵏ⁻¹⁾ (sup), NaN where the denominator
    /// underflows 1e-15.
    pub ratios: Vec<f64>,
    /// Max absolute row sum of W̃ (κ-independent part).
    pub inf_norm_w: f64,
    /// Largest singular value of W̃ by power iteration on W̃ᵀW̃.
    pub spectral_norm_w: f64,
    pub contractive: bool,
}

impl ContractionReport {
    /// CSV with columns: layer k, rho_sup, rho_l2, ratio.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,rho_sup,rho_l2,ratio\n");
        for (i, (s, l)) in self.successive_sup.iter().zip(&self.successive_l2).enumerate() {
            let k = i + 1;
            let ratio = if i >= 1 { format!("{:.12e}", self.ratios[i - 1]) } else { String::new() };
            out.push_str(&format!("{k},{s:.12e},{l:.12e},{ratio}\n"));
        }
        out
    }
}

/// Max absolute row sum and power-iteration spectral norm of a square matrix.
pub fn operator_norms(w: &Tensor) -> (f64, f64) {
    let n = w.rows();
    let data = w.data();
    let inf = (0..n)
        .map(|i| data[i * n..(i + 1) * n].iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0f64, f64::max);

    // 200 power iterations on W̃ᵀW̃ from a deterministic start.
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut lambda = 0.0;
    for _ in 0..200 {
        let wv: Vec<f64> = (0..n)
            .map(|i| data[i * n..(i + 1) * n].iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect();
        let mut wtwv = vec![0.0; n];
        for i in 0..n {
            let wvi = wv[i];
            for (j, acc) in wtwv.iter_mut().enumerate() {
                *acc += data[i * n + j] * wvi;
            }
        }
        let norm = wtwv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return (inf, 0.0);
        }
        lambda = norm;
        for (vi, wi) in v.iter_mut().zip(&wtwv) {
            *vi = wi / norm;
        }
    }
    (inf, lambda.sqrt())
}

/// Successive-norm diagnostics over recorded layer outputs.
pub fn contraction_report(layers: &[Tensor], op: &AssembledOperator) -> Result<ContractionReport> {
    if layers.len() < 2 {
        return Err(Error::InsufficientLayers { got: layers.len() });
    }
    let weights = &op.grid_weights;
    let mut successive_sup = Vec::new();
    let mut successive_l2 = Vec::new();
    for pair in layers.windows(2) {
        let (prev, next) = (&pair[0], &pair[1]);
        let cols = next.cols() as f64;
        let mut sup = 0.0f64;
        let mut l2 = 0.0;
        for i in 0..next.rows() {
            let mut row_sq = 0.0;
            for j in 0..next.cols() {
                let d = next.get(i, j) - prev.get(i, j);
                sup = sup.max(d.abs());
                row_sq += d * d;
            }
            l2 += weights[i] * row_sq / cols;
        }
        successive_sup.push(sup);
        successive_l2.push(l2.sqrt());
    }
    let ratios: Vec<f64> = successive_sup
        .windows(2)
        .map(|w| if w[0] > 1e-15 { w[1] / w[0] } else { f64::NAN })
        .collect();

    let (inf_norm_w, spectral_norm_w) = operator_norms(&op.w_tilde);
    // Ratios "after layer 2": k ≥ 3, i.e. skip the first ratio entry.
    let tail_ok = ratios.iter().skip(1).all(|r| r.is_nan() || *r < 1.0);
    let contractive = (inf_norm_w < 1.0 || spectral_norm_w < 1.0) && tail_ok;

    Ok(ContractionReport {
        successive_sup,
        successive_l2,
        ratios,
        inf_norm_w,
        spectral_norm_w,
        contractive,
    })
}

// ───────────────────────────── calibration ─────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    InfRowSum,
    Spectral,
}

/// Scale λ with norm(λ · K Δz) = target for the requested norm.
pub fn calibrate_scale(
    kernel: &dyn Fn(&[f64], &[f64]) -> f64,
    grid: &Grid,
    target: f64,
    norm_kind: NormKind,
) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::InvalidRange(format!("target norm must be in (0,1), got {target}")));
    }
    let n = grid.len();
    let mut tilde = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            tilde[i * n + j] = kernel(grid.node(i), grid.node(j)) * grid.weights[j];
        }
    }
    let w = Tensor::new(n, n, tilde)?;
    let (inf, spec) = operator_norms(&w);
    let norm = match norm_kind {
        NormKind::InfRowSum => inf,
        NormKind::Spectral => spec,
    };
    if norm <= 1e-300 {
        return Err(Error::ZeroNorm);
    }
    Ok(target / norm)
}

// ───────────────────────────── tests ─────────────────────────────
