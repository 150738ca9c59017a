//! Synthetic problem instances: random input functions g built from a
//! Gaussian mixture, a cubic polynomial, and sinusoids; ground-truth kernels
//! and the two-peak pointwise nonlinearity; normalization transforms; and
//! generation of (g, f) training pairs by solving the integral equation with
//! the true kernel.
//!
//! Every random draw flows through per-sample seeded streams, so a dataset is
//! a pure function of its config: generating twice writes identical bytes,
//! and samples are independent of generation order.

use crate::error::{Error, Result};
use crate::fredholm::{
    self, assemble, calibrate_scale, direct_solve_oracle, forward_linear, FredholmNetConfig,
    NormKind,
};
use crate::quadrature::{Grid, GridSpec};
use crate::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const DATASET_FORMAT_VERSION: u32 = 1;

const N_GAUSSIANS: usize = 200;
const N_SINUSOIDS: usize = 10;

// ───────────────────────────── seed streams ─────────────────────────────

/// Stream labels keep per-purpose RNG streams decorrelated under one base
/// seed. One splitmix64 round over the packed label; the generator itself
/// expands the result through splitmix64 again at seeding time.
pub fn stream_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        ^ stream.wrapping_mul(0xA076_1D64_78BD_642F)
        ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const STREAM_G: u64 = 1;
pub const STREAM_AFFINE: u64 = 2;

fn uniform(rng: &mut Xoshiro256PlusPlus, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

// ───────────────────────────── input functions ─────────────────────────────

/// Parameters of one random input function: 200 Gaussian bumps, a cubic
/// polynomial, and 10 sinusoids, each with per-dimension parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GFunctionParams {
    /// (w, s, c) per bump, each of length d.
    pub gaussians: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>,
    /// a0..a3, each of length d.
    pub poly: [Vec<f64>; 4],
    /// (amplitude, frequency, phase) per sinusoid, each of length d.
    pub sinusoids: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>,
    pub seed: u64,
}

impl GFunctionParams {
    /// Draw order is frozen: per bump w then s then c (each coordinate-major),
    /// then a0..a3, then per sinusoid A, f, φ.
    pub fn sample(seed: u64, d: usize) -> Self {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let vecd = |rng: &mut Xoshiro256PlusPlus, lo: f64, hi: f64| -> Vec<f64> {
            (0..d).map(|_| uniform(rng, lo, hi)).collect()
        };
        let gaussians = (0..N_GAUSSIANS)
            .map(|_| {
                let w = vecd(&mut rng, -1.0, 1.0);
                let s = vecd(&mut rng, 0.0, 50.0);
                let c = vecd(&mut rng, 0.0, 1.0);
                (w, s, c)
            })
            .collect();
        let poly = [
            vecd(&mut rng, -1.0, 1.0),
            vecd(&mut rng, -1.0, 1.0),
            vecd(&mut rng, -1.0, 1.0),
            vecd(&mut rng, -1.0, 1.0),
        ];
        let sinusoids = (0..N_SINUSOIDS)
            .map(|_| {
                let a = vecd(&mut rng, -0.5, 0.5);
                let f = vecd(&mut rng, 0.5, 8.0);
                let phi = vecd(&mut rng, 0.0, 2.0 * std::f64::consts::PI);
                (a, f, phi)
            })
            .collect();
        GFunctionParams { gaussians, poly, sinusoids, seed }
    }

    pub fn dim(&self) -> usize {
        self.poly[0].len()
    }

    /// Evaluate at one point. Bumps are anisotropic Gaussians
    /// exp(−Σ_k s_k (x_k−c_k)²) with amplitude averaged over coordinates;
    /// polynomial and sinusoid terms are applied per coordinate and summed.
    /// For d = 1 this is exactly the scalar formula.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let mut acc = 0.0;
        for (w, s, c) in &self.gaussians {
            let expo: f64 = (0..d).map(|k| s[k] * (x[k] - c[k]) * (x[k] - c[k])).sum();
            let amp: f64 = w.iter().sum::<f64>() / d as f64;
            acc += amp * (-expo).exp();
        }
        for (k, &xk) in x.iter().enumerate() {
            acc += self.poly[0][k] + self.poly[1][k] * xk + self.poly[2][k] * xk * xk
                + self.poly[3][k] * xk * xk * xk;
        }
        for (a, f, phi) in &self.sinusoids {
            for (k, &xk) in x.iter().enumerate() {
                acc += a[k] * (2.0 * std::f64::consts::PI * f[k] * xk + phi[k]).sin();
            }
        }
        acc
    }
}

/// Evaluate one sampled input function on all grid nodes.
pub fn sample_g(params: &GFunctionParams, grid: &Grid) -> Result<Vec<f64>> {
    if grid.dim() != params.dim() {
        return Err(Error::ShapeMismatch {
            op: "sample_g",
            detail: format!("grid dim {} vs params dim {}", grid.dim(), params.dim()),
        });
    }
    Ok((0..grid.len()).map(|i| params.eval(grid.node(i))).collect())
}

// ───────────────────────────── transforms ─────────────────────────────

/// Subtract the weighted mean and scale to unit weighted L2 norm. A second
/// correction round keeps the residual mean at rounding level even after the
/// division, which makes the map idempotent to ~1e-15.
pub fn center_normalize(values: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() || values.len() != weights.len() {
        return Err(Error::EmptyInput);
    }
    let total: f64 = weights.iter().sum();
    let mut out = values.to_vec();
    for _ in 0..2 {
        let mean: f64 = out.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total;
        for v in &mut out {
            *v -= mean;
        }
        let norm = out
            .iter()
            .zip(weights)
            .map(|(v, w)| w * v * v)
            .sum::<f64>()
            .sqrt();
        let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        if norm <= 1e-12 * scale {
            return Err(Error::DegenerateConstantInput);
        }
        for v in &mut out {
            *v /= norm;
        }
    }
    Ok(out)
}

/// g = α·g' + β with α, β ∼ U(−1,1); the draw order is α then β.
pub fn affine_scale(values: &[f64], seed: u64) -> (Vec<f64>, f64, f64) {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let alpha = uniform(&mut rng, -1.0, 1.0);
    let beta = uniform(&mut rng, -1.0, 1.0);
    (values.iter().map(|v| alpha * v + beta).collect(), alpha, beta)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Raw,
    CenterNormalize,
    CenterNormalizeAffine,
}

// ───────────────────────────── true kernels ─────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrueKernelKind {
    /// cos(25(x−z)) + cos(7(x−z)) on [0,1].
    TwoCosines,
    /// exp(−Σ α_i (x_i−z_i)²)(1 + γ cos(ω·(x−z))); α_i linearly spaced in
    /// [1.5, 3.5], γ = 0.5, ω a seeded random unit direction scaled by 6/√d.
    HdGaussCosine { d: usize, omega: Vec<f64> },
    /// exp(−|x−z|²/(2ℓ²)).
    GaussRbf { ell: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrueKernelSpec {
    #[serde(flatten)]
    pub kind: TrueKernelKind,
    /// Overall scale λ (the constant C for the RBF kernel).
    pub lambda: f64,
    /// Calibration target recorded when `calibrate` set λ.
    pub calibration: Option<(f64, NormKind)>,
}

const HD_GAMMA: f64 = 0.5;

fn hd_alphas(d: usize) -> Vec<f64> {
    if d == 1 {
        return vec![1.5];
    }
    (0..d).map(|i| 1.5 + 2.0 * i as f64 / (d - 1) as f64).collect()
}

impl TrueKernelSpec {
    pub fn two_cosines() -> Self {
        TrueKernelSpec { kind: TrueKernelKind::TwoCosines, lambda: 1.0, calibration: None }
    }

    /// ω is drawn once from the seed: a standard Gaussian vector normalized
    /// to unit length, scaled by 6/√d.
    pub fn hd_gauss_cosine(d: usize, omega_seed: u64) -> Self {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(omega_seed);
        let mut omega: Vec<f64> = (0..d)
            .map(|_| {
                // Box–Muller from two uniforms; only the cosine branch.
                let u1: f64 = rng.gen::<f64>().max(1e-300);
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        let norm = omega.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = 6.0 / (d as f64).sqrt() / norm;
        for v in &mut omega {
            *v *= scale;
        }
        TrueKernelSpec {
            kind: TrueKernelKind::HdGaussCosine { d, omega },
            lambda: 1.0,
            calibration: None,
        }
    }

    pub fn gauss_rbf(ell: f64) -> Self {
        TrueKernelSpec { kind: TrueKernelKind::GaussRbf { ell }, lambda: 1.0, calibration: None }
    }

    pub fn eval(&self, x: &[f64], z: &[f64]) -> f64 {
        self.lambda
            * match &self.kind {
                TrueKernelKind::TwoCosines => {
                    let delta = x[0] - z[0];
                    (25.0 * delta).cos() + (7.0 * delta).cos()
                }
                TrueKernelKind::HdGaussCosine { d, omega } => {
                    let alphas = hd_alphas(*d);
                    let mut expo = 0.0;
                    let mut dot = 0.0;
                    for i in 0..*d {
                        let diff = x[i] - z[i];
                        expo += alphas[i] * diff * diff;
                        dot += omega[i] * diff;
                    }
                    (-expo).exp() * (1.0 + HD_GAMMA * dot.cos())
                }
                TrueKernelKind::GaussRbf { ell } => {
                    let sq: f64 = x.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
                    (-sq / (2.0 * ell * ell)).exp()
                }
            }
    }

    /// Set λ so the assembled operator norm on this grid equals `target`.
    pub fn calibrate(&mut self, grid: &Grid, target: f64, norm_kind: NormKind) -> Result<()> {
        self.lambda = 1.0;
        let base = |x: &[f64], z: &[f64]| self.eval(x, z);
        let lambda = calibrate_scale(&base, grid, target, norm_kind)?;
        self.lambda = lambda;
        self.calibration = Some((target, norm_kind));
        Ok(())
    }

    /// Kernel values on the grid product, K(z_i, z_j).
    pub fn eval_grid(&self, grid: &Grid) -> Result<Tensor> {
        let n = grid.len();
        let mut kv = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                kv[i * n + j] = self.eval(grid.node(i), grid.node(j));
            }
        }
        Tensor::new(n, n, kv)
    }
}

// ───────────────────────────── true nonlinearity ─────────────────────────────

pub const TRUE_G_PARAMS: [f64; 6] = [0.25, 0.25, 0.40, -0.40, 0.25, 0.15];

/// Two-peak Gaussian nonlinearity
/// G(u) = a1 exp(−½((u−m1)/s1)²) + a2 exp(−½((u−m2)/s2)²).
pub fn true_g_eval(u: f64) -> f64 {
    let [a1, a2, m1, m2, s1, s2] = TRUE_G_PARAMS;
    let r1 = (u - m1) / s1;
    let r2 = (u - m2) / s2;
    a1 * (-0.5 * r1 * r1).exp() + a2 * (-0.5 * r2 * r2).exp()
}

/// The same expression with unsquared exponent arguments, for comparison:
/// the ratio form −½(u−m)/s grows without bound as u → −∞, so this variant
/// is not a bump and exists only to quantify the difference.
pub fn true_g_eval_literal(u: f64) -> f64 {
    let [a1, a2, m1, m2, s1, s2] = TRUE_G_PARAMS;
    a1 * (-0.5 * (u - m1) / s1).exp() + a2 * (-0.5 * (u - m2) / s2).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrueGSpec {
    TwoPeakGauss,
    TwoPeakGaussLiteral,
}

impl TrueGSpec {
    pub fn eval(&self, u: f64) -> f64 {
        match self {
            TrueGSpec::TwoPeakGauss => true_g_eval(u),
            TrueGSpec::TwoPeakGaussLiteral => true_g_eval_literal(u),
        }
    }
}

// ───────────────────────────── dataset generation ─────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub grid: GridSpec,
    pub kernel: TrueKernelSpec,
    /// None generates a linear dataset.
    pub nonlinearity: Option<TrueGSpec>,
    pub n_samples: usize,
    /// Forward depth for the linear cross-check and the data-generation pass.
    pub depth_m: usize,
    pub transform: TransformKind,
    pub base_seed: u64,
    /// Verify the linear direct solve against the forward pass.
    pub cross_check: bool,
}

/// Per-sample generation record; part of the manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleRecord {
    pub g_seed: u64,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    /// Picard iterations used (nonlinear datasets).
    pub iterations: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct FunctionPairDataset {
    pub grid: Grid,
    /// M x N, one row per sample.
    pub g_matrix: Tensor,
    pub f_matrix: Tensor,
    pub config: DatasetConfig,
    pub records: Vec<SampleRecord>,
}

fn transpose_to_rows(columns: &Tensor) -> Tensor {
    let (n, m) = (columns.rows(), columns.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = columns.get(i, j);
        }
    }
    Tensor::new(m, n, out).expect("transpose preserves finiteness")
}

/// Picard iteration f ← W̃ G(f) + g down to a tight fixed-point residual.
/// Returns the solution and the iteration count.
fn picard_to_residual(
    w_tilde: &Tensor,
    g: &[f64],
    nonlinearity: &TrueGSpec,
    max_iters: usize,
) -> Result<(Vec<f64>, usize)> {
    let n = g.len();
    let w = w_tilde.data();
    let mut f = g.to_vec();
    let mut gf = vec![0.0; n];
    let mut next = vec![0.0; n];
    for iter in 1..=max_iters {
        for (dst, &v) in gf.iter_mut().zip(&f) {
            *dst = nonlinearity.eval(v);
        }
        for i in 0..n {
            let row = &w[i * n..(i + 1) * n];
            let acc: f64 = row.iter().zip(&gf).map(|(a, b)| a * b).sum();
            next[i] = acc + g[i];
        }
        let step: f64 = next.iter().zip(&f).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        std::mem::swap(&mut f, &mut next);
        if step <= 1e-13 {
            // Verify the actual equation residual once at the end.
            for (dst, &v) in gf.iter_mut().zip(&f) {
                *dst = nonlinearity.eval(v);
            }
            let mut residual = 0.0f64;
            for i in 0..n {
                let row = &w[i * n..(i + 1) * n];
                let acc: f64 = row.iter().zip(&gf).map(|(a, b)| a * b).sum();
                residual = residual.max((f[i] - g[i] - acc).abs());
            }
            if residual > 1e-12 {
                return Err(Error::NotConverged { iters: iter, last: vec![residual] });
            }
            return Ok((f, iter));
        }
        if !f.iter().all(|v| v.is_finite()) {
            return Err(Error::DivergedForward { layer: iter, sup: f64::INFINITY });
        }
    }
    Err(Error::NotConverged { iters: max_iters, last: f })
}

pub fn generate_dataset(config: &DatasetConfig) -> Result<FunctionPairDataset> {
    if config.n_samples == 0 {
        return Err(Error::EmptyInput);
    }
    let grid = config.grid.build()?;
    let n = grid.len();
    let m = config.n_samples;

    // Inputs first: sample, transform, record.
    let mut g_cols = vec![0.0; n * m];
    let mut records = Vec::with_capacity(m);
    for sample in 0..m {
        let g_seed = stream_seed(config.base_seed, STREAM_G, sample as u64);
        let params = GFunctionParams::sample(g_seed, grid.dim());
        let raw = sample_g(&params, &grid)?;
        let (values, alpha, beta) = match config.transform {
            TransformKind::Raw => (raw, None, None),
            TransformKind::CenterNormalize => (center_normalize(&raw, &grid.weights)?, None, None),
            TransformKind::CenterNormalizeAffine => {
                let centered = center_normalize(&raw, &grid.weights)?;
                let affine_seed = stream_seed(config.base_seed, STREAM_AFFINE, sample as u64);
                let (scaled, a, b) = affine_scale(&centered, affine_seed);
                (scaled, Some(a), Some(b))
            }
        };
        for (i, v) in values.iter().enumerate() {
            g_cols[i * m + sample] = *v;
        }
        records.push(SampleRecord { g_seed, alpha, beta, iterations: None });
    }
    let g_matrix_cols = Tensor::new(n, m, g_cols)?;

    let kernel_values = config.kernel.eval_grid(&grid)?;
    let tape = Tape::inactive();

    let f_matrix_cols = match &config.nonlinearity {
        None => {
            // Quadrature-exact fixed point; the forward pass cross-checks it.
            let exact = direct_solve_oracle(&kernel_values, &grid, &g_matrix_cols)?;
            if config.cross_check {
                let cfg = FredholmNetConfig::linear(config.depth_m, 1.0);
                let op = assemble(&tape, &kernel_values, &grid, &cfg)?;
                let run = forward_linear(&tape, &op, &g_matrix_cols, false)?;
                let gap: f64 = run
                    .output
                    .data()
                    .iter()
                    .zip(exact.data())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                if gap > 1e-10 {
                    return Err(Error::NotConverged { iters: config.depth_m, last: vec![gap] });
                }
            }
            exact
        }
        Some(nonlinearity) => {
            let cfg = FredholmNetConfig::recurrent(config.depth_m.max(1));
            let op = assemble(&tape, &kernel_values, &grid, &cfg)?;
            let mut f_cols = vec![0.0; n * m];
            let mut g_col = vec![0.0; n];
            for sample in 0..m {
                for i in 0..n {
                    g_col[i] = g_matrix_cols.get(i, sample);
                }
                let (f, iters) =
                    picard_to_residual(&op.w_tilde, &g_col, nonlinearity, 10_000)?;
                records[sample].iterations = Some(iters);
                for (i, v) in f.iter().enumerate() {
                    f_cols[i * m + sample] = *v;
                }
            }
            Tensor::new(n, m, f_cols)?
        }
    };

    Ok(FunctionPairDataset {
        grid,
        g_matrix: transpose_to_rows(&g_matrix_cols),
        f_matrix: transpose_to_rows(&f_matrix_cols),
        config: config.clone(),
        records,
    })
}

impl FunctionPairDataset {
    /// g and f as n x M column matrices, the layout the solvers use.
    pub fn g_columns(&self) -> Tensor {
        transpose_to_rows(&self.g_matrix)
    }

    pub fn f_columns(&self) -> Tensor {
        transpose_to_rows(&self.f_matrix)
    }

    pub fn n_samples(&self) -> usize {
        self.g_matrix.rows()
    }

    /// Max FIE residual over samples: ‖f − g − W̃ G(f)‖_∞ (G = id if linear).
    pub fn max_residual(&self) -> Result<f64> {
        let kernel_values = self.config.kernel.eval_grid(&self.grid)?;
        let n = self.grid.len();
        let kv = kernel_values.data();
        let mut worst = 0.0f64;
        for sample in 0..self.n_samples() {
            let g = &self.g_matrix.data()[sample * n..(sample + 1) * n];
            let f = &self.f_matrix.data()[sample * n..(sample + 1) * n];
            let gf: Vec<f64> = match &self.config.nonlinearity {
                None => f.to_vec(),
                Some(spec) => f.iter().map(|&u| spec.eval(u)).collect(),
            };
            for i in 0..n {
                let acc: f64 = (0..n)
                    .map(|j| kv[i * n + j] * self.grid.weights[j] * gf[j])
                    .sum();
                worst = worst.max((f[i] - g[i] - acc).abs());
            }
        }
        Ok(worst)
    }
}

// ───────────────────────────── file format ─────────────────────────────

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: DatasetConfig,
    n_samples: usize,
    n_nodes: usize,
    dim: usize,
    records: Vec<SampleRecord>,
    files: ManifestFiles,
}

#[derive(Serialize, Deserialize)]
struct ManifestFiles {
    nodes: String,
    weights: String,
    g: String,
    f: String,
}

pub(crate) fn write_f64_blob(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub(crate) fn read_f64_blob(path: &Path, expect_len: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expect_len * 8 {
        return Err(Error::FormatVersionMismatch(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expect_len * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Writes manifest.json plus little-endian float64 row-major blobs.
pub fn save_dataset(dataset: &FunctionPairDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let files = ManifestFiles {
        nodes: "nodes.f64".into(),
        weights: "weights.f64".into(),
        g: "g.f64".into(),
        f: "f.f64".into(),
    };
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        config: dataset.config.clone(),
        n_samples: dataset.n_samples(),
        n_nodes: dataset.grid.len(),
        dim: dataset.grid.dim(),
        records: dataset.records.clone(),
        files,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    write_f64_blob(&dir.join("nodes.f64"), dataset.grid.nodes.data())?;
    write_f64_blob(&dir.join("weights.f64"), &dataset.grid.weights)?;
    write_f64_blob(&dir.join("g.f64"), dataset.g_matrix.data())?;
    write_f64_blob(&dir.join("f.f64"), dataset.f_matrix.data())?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<FunctionPairDataset> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::FormatVersionMismatch(format!(
            "dataset format {} (supported: {})",
            manifest.format_version, DATASET_FORMAT_VERSION
        )));
    }
    let (n, d, m) = (manifest.n_nodes, manifest.dim, manifest.n_samples);
    let nodes = read_f64_blob(&dir.join(&manifest.files.nodes), n * d)?;
    let weights = read_f64_blob(&dir.join(&manifest.files.weights), n)?;
    let g = read_f64_blob(&dir.join(&manifest.files.g), m * n)?;
    let f = read_f64_blob(&dir.join(&manifest.files.f), m * n)?;
    let grid = Grid {
        nodes: Tensor::new(n, d, nodes)?,
        weights,
        kind: manifest.config.grid.kind.clone(),
    };
    Ok(FunctionPairDataset {
        grid,
        g_matrix: Tensor::new(m, n, g)?,
        f_matrix: Tensor::new(m, n, f)?,
        config: manifest.config,
        records: manifest.records,
    })
}

// Re-export for callers configuring calibration.
pub use fredholm::NormKind as KernelNormKind;

// ───────────────────────────── tests ─────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{uniform_grid, GridKind};

    fn unit_grid_spec(n: usize) -> GridSpec {
        GridSpec { kind: GridKind::Uniform1d { a: 0.0, b: 1.0 }, n, d: 1 }
    }

    #[test]
    fn constant_poly_only_g() {
        let mut params = GFunctionParams::sample(7, 1);
        for (w, _, _) in &mut params.gaussians {
            w[0] = 0.0;
        }
        for (a, _, _) in &mut params.sinusoids {
            a[0] = 0.0;
        }
        params.poly = [vec![0.7], vec![0.0], vec![0.0], vec![0.0]];
        let grid = uniform_grid(0.0, 1.0, 16).unwrap();
        let g = sample_g(&params, &grid).unwrap();
        for v in g {
            assert_eq!(v, 0.7);
        }
    }

    #[test]
    fn sample_g_deterministic() {
        let grid = uniform_grid(0.0, 1.0, 32).unwrap();
        let a = sample_g(&GFunctionParams::sample(42, 1), &grid).unwrap();
        let b = sample_g(&GFunctionParams::sample(42, 1), &grid).unwrap();
        assert_eq!(a, b);
        let c = sample_g(&GFunctionParams::sample(43, 1), &grid).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn params_have_paper_term_counts() {
        let params = GFunctionParams::sample(1, 3);
        assert_eq!(params.gaussians.len(), 200);
        assert_eq!(params.sinusoids.len(), 10);
        assert!(params.gaussians.iter().all(|(w, s, c)| {
            w.len() == 3
                && s.len() == 3
                && c.len() == 3
                && w.iter().all(|v| (-1.0..=1.0).contains(v))
                && s.iter().all(|v| (0.0..=50.0).contains(v))
                && c.iter().all(|v| (0.0..=1.0).contains(v))
        }));
        assert!(params.sinusoids.iter().all(|(a, f, phi)| {
            a.iter().all(|v| (-0.5..=0.5).contains(v))
                && f.iter().all(|v| (0.5..=8.0).contains(v))
                && phi.iter().all(|v| (0.0..=2.0 * std::f64::consts::PI).contains(v))
        }));
    }

    #[test]
    fn center_normalize_constant_rejected() {
        let grid = uniform_grid(0.0, 1.0, 8).unwrap();
        let g = vec![5.0; 8];
        assert!(matches!(
            center_normalize(&g, &grid.weights),
            Err(Error::DegenerateConstantInput)
        ));
    }

    #[test]
    fn center_normalize_linear_ramp() {
        // g(x) = x has mean 1/2 and centered L2 norm 1/√12, so the result is
        // √12 (x − 1/2) up to midpoint-rule discretization of the moments.
        let n = 2000;
        let grid = uniform_grid(0.0, 1.0, n).unwrap();
        let g: Vec<f64> = (0..n).map(|i| grid.node(i)[0]).collect();
        let out = center_normalize(&g, &grid.weights).unwrap();
        for (i, v) in out.iter().enumerate() {
            let expect = 12.0f64.sqrt() * (grid.node(i)[0] - 0.5);
            assert!((v - expect).abs() <= 1e-5, "node {i}: {v} vs {expect}");
        }
    }

    #[test]
    fn center_normalize_invariants_and_idempotence() {
        let grid = uniform_grid(0.0, 1.0, 64).unwrap();
        let g = sample_g(&GFunctionParams::sample(9, 1), &grid).unwrap();
        let once = center_normalize(&g, &grid.weights).unwrap();
        let mean: f64 = once
            .iter()
            .zip(&grid.weights)
            .map(|(v, w)| v * w)
            .sum::<f64>();
        let norm = once
            .iter()
            .zip(&grid.weights)
            .map(|(v, w)| w * v * v)
            .sum::<f64>()
            .sqrt();
        assert!(mean.abs() <= 1e-12, "mean {mean}");
        assert!((norm - 1.0).abs() <= 1e-12, "norm {norm}");
        let twice = center_normalize(&once, &grid.weights).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn affine_scale_deterministic() {
        let g = vec![1.0, -1.0, 0.5];
        let (out1, a1, b1) = affine_scale(&g, 5);
        let (out2, a2, b2) = affine_scale(&g, 5);
        assert_eq!(out1, out2);
        assert_eq!((a1, b1), (a2, b2));
        assert!((-1.0..1.0).contains(&a1) && (-1.0..1.0).contains(&b1));
        for (o, v) in out1.iter().zip(&g) {
            assert!((o - (a1 * v + b1)).abs() <= 1e-15);
        }
    }

    #[test]
    fn kernel_diagonal_values() {
        let cosines = TrueKernelSpec::two_cosines();
        assert!((cosines.eval(&[0.3], &[0.3]) - 2.0).abs() <= 1e-15);

        let hd = TrueKernelSpec::hd_gauss_cosine(10, 11);
        let x = vec![0.4; 10];
        assert!((hd.eval(&x, &x) - 1.5).abs() <= 1e-15);

        let rbf = TrueKernelSpec::gauss_rbf(0.2);
        // |x−z| = ℓ = 0.2 puts the exponent at −1/2.
        assert!((rbf.eval(&[0.0], &[0.2]) - (-0.5f64).exp()).abs() <= 1e-15);
    }

    #[test]
    fn hd_omega_scaling() {
        let d = 10;
        let spec = TrueKernelSpec::hd_gauss_cosine(d, 3);
        if let TrueKernelKind::HdGaussCosine { omega, .. } = &spec.kind {
            let norm = omega.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 6.0 / (d as f64).sqrt()).abs() <= 1e-12);
        } else {
            panic!("wrong kind");
        }
        // Same seed, same direction.
        assert_eq!(spec, TrueKernelSpec::hd_gauss_cosine(d, 3));
    }

    #[test]
    fn calibration_hits_target() {
        let grid = uniform_grid(0.0, 1.0, 100).unwrap();
        let mut spec = TrueKernelSpec::two_cosines();
        spec.calibrate(&grid, 0.5, NormKind::InfRowSum).unwrap();
        let n = grid.len();
        let kv = spec.eval_grid(&grid).unwrap();
        let inf = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| (kv.get(i, j) * grid.weights[j]).abs())
                    .sum::<f64>()
            })
            .fold(0.0f64, f64::max);
        assert!((inf - 0.5).abs() <= 1e-10);
    }

    #[test]
    fn true_g_matches_hand_values() {
        // Peak at m1: first bump contributes a1, second is ~1.7e-7.
        let v = true_g_eval(0.40);
        let second = 0.25 * (-0.5f64 * (0.8 / 0.15) * (0.8 / 0.15)).exp();
        assert!((v - (0.25 + second)).abs() <= 1e-15);
        assert!(second < 2e-7);
        // Bounded by a1 + a2.
        for i in 0..200 {
            let u = -4.0 + i as f64 * 0.04;
            assert!(true_g_eval(u) <= 0.5 + 1e-15);
            assert!(true_g_eval(u) >= 0.0);
        }
        // The literal variant diverges for small u instead of decaying.
        assert!(true_g_eval_literal(-10.0) > 1e3);
    }

    fn small_linear_config() -> DatasetConfig {
        let grid_spec = unit_grid_spec(40);
        let grid = grid_spec.build().unwrap();
        let mut kernel = TrueKernelSpec::two_cosines();
        kernel.calibrate(&grid, 0.5, NormKind::InfRowSum).unwrap();
        DatasetConfig {
            grid: grid_spec,
            kernel,
            nonlinearity: None,
            n_samples: 6,
            depth_m: 60,
            transform: TransformKind::CenterNormalize,
            base_seed: 2024,
            cross_check: true,
        }
    }

    #[test]
    fn linear_dataset_zero_kernel_copies_g() {
        let mut config = small_linear_config();
        config.kernel = TrueKernelSpec::two_cosines();
        config.kernel.lambda = 0.0;
        config.cross_check = true;
        let ds = generate_dataset(&config).unwrap();
        assert_eq!(ds.g_matrix.data(), ds.f_matrix.data());
    }

    #[test]
    fn linear_dataset_satisfies_fie() {
        let ds = generate_dataset(&small_linear_config()).unwrap();
        assert!(ds.max_residual().unwrap() <= 1e-9);
    }

    #[test]
    fn nonlinear_dataset_satisfies_fie() {
        let grid_spec = unit_grid_spec(40);
        let grid = grid_spec.build().unwrap();
        let mut kernel = TrueKernelSpec::gauss_rbf(0.2);
        kernel.calibrate(&grid, 0.7, NormKind::Spectral).unwrap();
        let config = DatasetConfig {
            grid: grid_spec,
            kernel,
            nonlinearity: Some(TrueGSpec::TwoPeakGauss),
            n_samples: 5,
            depth_m: 30,
            transform: TransformKind::CenterNormalizeAffine,
            base_seed: 77,
            cross_check: false,
        };
        let ds = generate_dataset(&config).unwrap();
        assert!(ds.max_residual().unwrap() <= 1e-9);
        assert!(ds.records.iter().all(|r| r.iterations.is_some()));
        assert!(ds.records.iter().all(|r| r.alpha.is_some() && r.beta.is_some()));
    }

    #[test]
    fn dataset_round_trip_and_byte_determinism() {
        let config = small_linear_config();
        let ds1 = generate_dataset(&config).unwrap();
        let ds2 = generate_dataset(&config).unwrap();

        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(&ds1, dir1.path()).unwrap();
        save_dataset(&ds2, dir2.path()).unwrap();
        for name in ["manifest.json", "nodes.f64", "weights.f64", "g.f64", "f.f64"] {
            let a = std::fs::read(dir1.path().join(name)).unwrap();
            let b = std::fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical configs");
        }

        let loaded = load_dataset(dir1.path()).unwrap();
        assert_eq!(loaded.g_matrix.data(), ds1.g_matrix.data());
        assert_eq!(loaded.f_matrix.data(), ds1.f_matrix.data());
        assert_eq!(loaded.grid.nodes.data(), ds1.grid.nodes.data());
        assert_eq!(loaded.records.len(), ds1.records.len());
    }

    #[test]
    fn samples_are_order_independent() {
        // The second sample of a 6-sample run equals the second sample of a
        // 3-sample run: streams depend only on (base_seed, index).
        let mut config = small_linear_config();
        let big = generate_dataset(&config).unwrap();
        config.n_samples = 3;
        let small = generate_dataset(&config).unwrap();
        let n = big.grid.len();
        for sample in 0..3 {
            assert_eq!(
                &big.g_matrix.data()[sample * n..(sample + 1) * n],
                &small.g_matrix.data()[sample * n..(sample + 1) * n]
            );
        }
    }
}

