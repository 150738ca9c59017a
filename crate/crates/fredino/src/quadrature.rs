//! Domain discretizations: uniform 1D midpoint grids, scrambled Sobol nodes
//! in [0,1]^d, Gauss–Legendre × uniform-angle quadrature on the unit disk,
//! and the periodic trapezoid rule on the unit circle.
//!
//! A [`Grid`] couples nodes (n x d) with per-node quadrature weights whose
//! sum is the domain volume, so every integral in the crate is a plain
//! weighted dot product.
//!
//! Sobol points use Gray-code generation with the new-joe-kuo-6.21201
//! direction numbers (D(6) search criterion), first 32 dimensions embedded.
//! Scrambling is a digital shift: a per-dimension XOR mask drawn from a
//! seeded stream. It randomizes placement while preserving the digital-net
//! stratification that makes the points good quadrature nodes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const SOBOL_MAX_DIM: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridKind {
    #[serde(rename = "uniform_1d")]
    Uniform1d { a: f64, b: f64 },
    Sobol { scramble_seed: Option<u64> },
    DiskPolar { n_r: usize, n_phi: usize },
    CircleBoundary,
}

#[derive(Clone, Debug)]
pub struct Grid {
    /// n x d node coordinates.
    pub nodes: Tensor,
    /// Quadrature weight per node; sums to the domain volume.
    pub weights: Vec<f64>,
    pub kind: GridKind,
}

/// Serializable recipe that rebuilds a grid exactly; stored in dataset
/// manifests so runs can be regenerated byte-identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    #[serde(flatten)]
    pub kind: GridKind,
    pub n: usize,
    pub d: usize,
}

impl GridSpec {
    pub fn build(&self) -> Result<Grid> {
        match &self.kind {
            GridKind::Uniform1d { a, b } => {
                if self.d != 1 {
                    return Err(Error::InvalidRange("uniform_1d grids are one-dimensional".into()));
                }
                uniform_grid(*a, *b, self.n)
            }
            GridKind::Sobol { scramble_seed } => sobol_points(self.d, self.n, *scramble_seed),
            GridKind::DiskPolar { n_r, n_phi } => {
                if self.n != n_r * n_phi || self.d != 2 {
                    return Err(Error::InvalidRange("disk_polar needs n = n_r*n_phi, d = 2".into()));
                }
                disk_polar_grid(*n_r, *n_phi)
            }
            GridKind::CircleBoundary => {
                if self.d != 2 {
                    return Err(Error::InvalidRange("circle_boundary grids live in d = 2".into()));
                }
                circle_boundary_grid(self.n)
            }
        }
    }
}

impl Grid {
    pub fn len(&self) -> usize {
        self.nodes.rows()
    }

    /// The spec this grid was built from, for provenance records.
    pub fn spec(&self) -> GridSpec {
        GridSpec { kind: self.kind.clone(), n: self.len(), d: self.dim() }
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.nodes.cols()
    }

    pub fn node(&self, i: usize) -> &[f64] {
        let d = self.nodes.cols();
        &self.nodes.data()[i * d..(i + 1) * d]
    }

    pub fn volume(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Weighted discrete integral of samples given per node.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }
}

// ───────────────────────────── uniform 1d ─────────────────────────────

/// Midpoint rule on [a, b]: nodes a + (j + 1/2)(b−a)/n, weights (b−a)/n.
pub fn uniform_grid(a: f64, b: f64, n: usize) -> Result<Grid> {
    if !(a < b) || !a.is_finite() || !b.is_finite() {
        return Err(Error::InvalidRange(format!("[{a}, {b}]")));
    }
    if n < 2 {
        return Err(Error::InvalidRange(format!("need n >= 2, got {n}")));
    }
    let h = (b - a) / n as f64;
    let nodes: Vec<f64> = (0..n).map(|j| a + (j as f64 + 0.5) * h).collect();
    Ok(Grid {
        nodes: Tensor::new(n, 1, nodes)?,
        weights: vec![h; n],
        kind: GridKind::Uniform1d { a, b },
    })
}

// ───────────────────────────── sobol ─────────────────────────────

/// new-joe-kuo-6.21201 table rows: (primitive polynomial with all coefficient
/// bits, initial m values). Row 0 is the van der Corput dimension.
const JOE_KUO: [(u32, &[u32]); SOBOL_MAX_DIM] = [
    (1, &[1]),
    (3, &[1]),
    (7, &[1, 3]),
    (11, &[1, 3, 1]),
    (13, &[1, 1, 1]),
    (19, &[1, 1, 3, 3]),
    (25, &[1, 3, 5, 13]),
    (37, &[1, 1, 5, 5, 17]),
    (41, &[1, 1, 5, 5, 5]),
    (47, &[1, 1, 7, 11, 19]),
    (55, &[1, 1, 5, 1, 1]),
    (59, &[1, 1, 1, 3, 11]),
    (61, &[1, 3, 5, 5, 31]),
    (67, &[1, 3, 3, 9, 7, 49]),
    (91, &[1, 1, 1, 15, 21, 21]),
    (97, &[1, 3, 1, 13, 27, 49]),
    (103, &[1, 1, 1, 15, 7, 5]),
    (109, &[1, 3, 1, 15, 13, 25]),
    (115, &[1, 1, 5, 5, 19, 61]),
    (131, &[1, 3, 7, 11, 23, 15, 103]),
    (137, &[1, 3, 7, 13, 13, 15, 69]),
    (143, &[1, 1, 3, 13, 7, 35, 63]),
    (145, &[1, 3, 5, 9, 1, 25, 53]),
    (157, &[1, 3, 1, 13, 9, 35, 107]),
    (167, &[1, 3, 1, 5, 27, 61, 31]),
    (171, &[1, 1, 5, 11, 19, 41, 61]),
    (185, &[1, 3, 5, 3, 3, 13, 69]),
    (191, &[1, 1, 7, 13, 1, 19, 1]),
    (193, &[1, 3, 7, 5, 13, 19, 59]),
    (203, &[1, 1, 3, 9, 25, 29, 41]),
    (211, &[1, 3, 5, 13, 23, 1, 55]),
    (213, &[1, 3, 7, 3, 13, 59, 17]),
];

/// 32-bit direction numbers v_k = m_k · 2^(32−k) for one dimension.
fn direction_numbers(dim: usize) -> [u32; 32] {
    let (poly, m_init) = JOE_KUO[dim];
    let mut m = [0u32; 32];
    if dim == 0 {
        // Van der Corput: m_k = 1 for all k.
        m = [1; 32];
    } else {
        let s = (31 - poly.leading_zeros()) as usize;
        m[..m_init.len()].copy_from_slice(m_init);
        for k in s..32 {
            // m_k = 2^s m_{k−s} ⊕ m_{k−s} ⊕ Σ_j 2^j a_j m_{k−j},
            // a_j the coefficient of x^{s−j} in the primitive polynomial.
            let mut mk = m[k - s] ^ (m[k - s] << s);
            for j in 1..s {
                if (poly >> (s - j)) & 1 == 1 {
                    mk ^= m[k - j] << j;
                }
            }
            m[k] = mk;
        }
    }
    let mut v = [0u32; 32];
    for (k, vk) in v.iter_mut().enumerate() {
        *vk = m[k] << (31 - k);
    }
    v
}

/// First n points of the (optionally digitally shifted) Sobol sequence in
/// [0,1]^d, equal weights 1/n. `scramble_seed = None` gives the raw net,
/// whose index 0 is the origin.
pub fn sobol_points(d: usize, n: usize, scramble_seed: Option<u64>) -> Result<Grid> {
    if d < 1 || d > SOBOL_MAX_DIM {
        return Err(Error::DimensionTooLarge { d, max: SOBOL_MAX_DIM });
    }
    if n < 1 {
        return Err(Error::InvalidRange("need n >= 1".into()));
    }
    let dirs: Vec<[u32; 32]> = (0..d).map(direction_numbers).collect();
    let shifts: Vec<u32> = match scramble_seed {
        Some(seed) => {
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
            (0..d).map(|_| rng.next_u32()).collect()
        }
        None => vec![0; d],
    };

    let mut data = vec![0.0; n * d];
    let mut x = vec![0u32; d];
    let scale = (0.5 / (1u64 << 31) as f64) as f64;
    for i in 0..n {
        for (j, xj) in x.iter_mut().enumerate() {
            data[i * d + j] = ((*xj ^ shifts[j]) as f64) * scale;
        }
        // Gray-code step: flip the direction number of the lowest zero bit.
        let bit = (i as u32).trailing_ones() as usize;
        if bit < 32 {
            for (xj, dir) in x.iter_mut().zip(&dirs) {
                *xj ^= dir[bit];
            }
        }
    }
    Ok(Grid {
        nodes: Tensor::new(n, d, data)?,
        weights: vec![1.0 / n as f64; n],
        kind: GridKind::Sobol { scramble_seed },
    })
}

// ───────────────────────────── gauss–legendre ─────────────────────────────

/// Legendre nodes and weights on [−1, 1] by Newton iteration on P_n.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[n - 1 - i] = x;
        weights[n - 1 - i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

// ───────────────────────────── disk ─────────────────────────────

/// Tensor quadrature on the unit disk: Gauss–Legendre radii mapped to (0,1)
/// crossed with uniform angles; weight w_GL · (2π/n_phi) · r is the polar
/// Jacobian. Node order: radius-major, angle-minor.
pub fn disk_polar_grid(n_r: usize, n_phi: usize) -> Result<Grid> {
    if n_r < 2 || n_phi < 2 {
        return Err(Error::InvalidRange(format!("need n_r, n_phi >= 2, got {n_r}, {n_phi}")));
    }
    let (gl_nodes, gl_weights) = gauss_legendre(n_r);
    let mut data = Vec::with_capacity(n_r * n_phi * 2);
    let mut weights = Vec::with_capacity(n_r * n_phi);
    for i in 0..n_r {
        let r = 0.5 * (gl_nodes[i] + 1.0);
        let wr = 0.5 * gl_weights[i];
        for k in 0..n_phi {
            let phi = 2.0 * PI * k as f64 / n_phi as f64;
            data.push(r * phi.cos());
            data.push(r * phi.sin());
            weights.push(wr * (2.0 * PI / n_phi as f64) * r);
        }
    }
    Ok(Grid {
        nodes: Tensor::new(n_r * n_phi, 2, data)?,
        weights,
        kind: GridKind::DiskPolar { n_r, n_phi },
    })
}

/// Periodic trapezoid rule on the unit circle: nodes (cos θ_j, sin θ_j),
/// θ_j = 2πj/n, weights 2π/n. Spectrally accurate for smooth integrands.
pub fn circle_boundary_grid(n: usize) -> Result<Grid> {
    if n < 4 {
        return Err(Error::InvalidRange(format!("need n >= 4, got {n}")));
    }
    let mut data = Vec::with_capacity(2 * n);
    for j in 0..n {
        let theta = 2.0 * PI * j as f64 / n as f64;
        data.push(theta.cos());
        data.push(theta.sin());
    }
    Ok(Grid {
        nodes: Tensor::new(n, 2, data)?,
        weights: vec![2.0 * PI / n as f64; n],
        kind: GridKind::CircleBoundary,
    })
}

// ───────────────────────────── tests ─────────────────────────────
