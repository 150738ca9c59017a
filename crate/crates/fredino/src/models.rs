//! MLP surrogates: the kernel network K_θ (input 2d), the pointwise
//! nonlinearity G_ϑ (input 1), and the PDE correction C_θ (input 4).
//!
//! All surrogates end in a linear layer so outputs can be signed. Weights
//! are Glorot-uniform, biases zero, drawn from a seeded stream so the same
//! (widths, activation, seed) triple always reproduces the same bits.
//!
//! File format: magic line, little-endian u64 header length, JSON header
//! (format version, widths, activation, seed), then the parameters as one
//! little-endian f64 blob in layer order W0, b0, W1, b1, …

use crate::error::{Error, Result};
use crate::tensor::{Pointwise, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8] = b"FREDINO-MODEL\n";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Silu,
}

impl Activation {
    fn pointwise(self) -> Pointwise {
        match self {
            Activation::Tanh => Pointwise::Tanh,
            Activation::Relu => Pointwise::Relu,
            Activation::Silu => Pointwise::Silu,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MlpModel {
    widths: Vec<usize>,
    activation: Activation,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    init_seed: u64,
}

/// Parameter handles for one forward pass. Produced per tape: `leaves` for
/// trainable passes, `constants` for frozen or inference passes.
pub struct MlpParams {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    activation: Activation,
}

pub fn mlp_init(widths: &[usize], activation: Activation, seed: u64) -> Result<MlpModel> {
    if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
        return Err(Error::InvalidWidths(format!("{widths:?}")));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for l in 0..widths.len() - 1 {
        let (fan_in, fan_out) = (widths[l], widths[l + 1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data: Vec<f64> =
            (0..fan_in * fan_out).map(|_| limit * (2.0 * rng.gen::<f64>() - 1.0)).collect();
        // Stored as fan_in x fan_out so a batch row multiplies from the left.
        weights.push(Tensor::new(fan_in, fan_out, data)?);
        biases.push(Tensor::zeros(1, fan_out));
    }
    Ok(MlpModel { widths: widths.to_vec(), activation, weights, biases, init_seed: seed })
}

impl MlpModel {
    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum::<usize>()
            + self.biases.iter().map(Tensor::len).sum::<usize>()
    }

    /// Parameters in serialization order W0, b0, W1, b1, …
    pub fn params(&self) -> Vec<&Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights.iter_mut().zip(self.biases.iter_mut()).flat_map(|(w, b)| [w, b]).collect()
    }

    /// Register all parameters on `tape` as differentiable leaves.
    pub fn leaves(&self, tape: &Tape) -> MlpParams {
        MlpParams {
            weights: self.weights.iter().map(|w| tape.leaf(w)).collect(),
            biases: self.biases.iter().map(|b| tape.leaf(b)).collect(),
            activation: self.activation,
        }
    }

    /// Detached parameter copies: participate in forward passes as constants.
    pub fn constants(&self) -> MlpParams {
        MlpParams {
            weights: self.weights.iter().map(Tensor::detach).collect(),
            biases: self.biases.iter().map(Tensor::detach).collect(),
            activation: self.activation,
        }
    }

    /// Overwrite parameters from tensors in `params()` order.
    pub fn set_params(&mut self, values: &[Tensor]) -> Result<()> {
        let mut slots = self.params_mut();
        if values.len() != slots.len() {
            return Err(Error::ShapeMismatch {
                op: "set_params",
                detail: format!("{} tensors for {} slots", values.len(), slots.len()),
            });
        }
        for (slot, v) in slots.iter_mut().zip(values) {
            if (slot.rows(), slot.cols()) != (v.rows(), v.cols()) {
                return Err(Error::ShapeMismatch { op: "set_params", detail: "shape drift".into() });
            }
            slot.data_mut().copy_from_slice(v.data());
        }
        Ok(())
    }
}

impl MlpParams {
    pub fn all(&self) -> Vec<&Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    /// Rebuild from tensors in `params()` order (W0, b0, W1, b1, …); used by
    /// finite-difference checks that perturb parameters one slot at a time.
    pub fn from_interleaved(activation: Activation, tensors: &[Tensor]) -> Result<Self> {
        if tensors.is_empty() || tensors.len() % 2 != 0 {
            return Err(Error::InvalidWidths(format!("{} interleaved tensors", tensors.len())));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in tensors.chunks_exact(2) {
            weights.push(pair[0].clone());
            biases.push(pair[1].clone());
        }
        Ok(MlpParams { weights, biases, activation })
    }
}

/// Batched forward pass: `inputs` is n x in_dim, result is n x out_dim.
/// Hidden layers apply the activation; the final layer is linear.
pub fn mlp_forward(tape: &Tape, params: &MlpParams, inputs: &Tensor) -> Result<Tensor> {
    if inputs.cols() != params.weights[0].rows() {
        return Err(Error::ShapeMismatch {
            op: "mlp_forward",
            detail: format!("input width {} vs {}", inputs.cols(), params.weights[0].rows()),
        });
    }
    // The input's tape attachment is preserved, so registering inputs as
    // leaves yields input-gradients through the same backward call.
    mlp_layers_from(tape, params, inputs.clone(), 0)
}

/// Layers `start..` applied to a batch already inside the net.
fn mlp_layers_from(
    tape: &Tape,
    params: &MlpParams,
    mut cur: Tensor,
    start: usize,
) -> Result<Tensor> {
    let layers = params.weights.len();
    for l in start..layers {
        let z = tape.matmul(&cur, &params.weights[l])?;
        let z = tape.add_row_broadcast(&z, &params.biases[l])?;
        cur = if l + 1 < layers { tape.pointwise(&z, params.activation.pointwise())? } else { z };
    }
    Ok(cur)
}

/// Row-major pair matrix for kernel evaluation: row i·n + j is [x_i, z_j],
/// shape (m·n) x 2d. Constant across training epochs, so callers cache it.
pub fn pair_matrix(x_nodes: &Tensor, z_nodes: &Tensor) -> Result<Tensor> {
    if x_nodes.cols() != z_nodes.cols() {
        return Err(Error::ShapeMismatch {
            op: "pair_matrix",
            detail: format!("dims {} vs {}", x_nodes.cols(), z_nodes.cols()),
        });
    }
    let (m, n, d) = (x_nodes.rows(), z_nodes.rows(), x_nodes.cols());
    let mut data = vec![0.0; m * n * 2 * d];
    for i in 0..m {
        let xi = &x_nodes.data()[i * d..(i + 1) * d];
        for j in 0..n {
            let zj = &z_nodes.data()[j * d..(j + 1) * d];
            let at = (i * n + j) * 2 * d;
            data[at..at + d].copy_from_slice(xi);
            data[at + d..at + 2 * d].copy_from_slice(zj);
        }
    }
    Tensor::new(m * n, 2 * d, data)
}

/// K_θ evaluated on the grid product: entry (i, j) = K_θ(x_i, z_j).
///
/// The first layer splits over the pair blocks, W0·[x; z] = Wx·x + Wz·z, so
/// the m·n concatenated pairs never go through a dense matmul: two node-sized
/// products feed a pair_row_sum and the remaining layers run on the result.
/// Agrees with the pair-matrix path up to floating-point reassociation.
pub fn kernel_eval_grid(
    tape: &Tape,
    params: &MlpParams,
    x_nodes: &Tensor,
    z_nodes: &Tensor,
) -> Result<Tensor> {
    let d = x_nodes.cols();
    if z_nodes.cols() != d {
        return Err(Error::ShapeMismatch {
            op: "kernel_eval_grid",
            detail: format!("dims {} vs {}", d, z_nodes.cols()),
        });
    }
    if params.weights[0].rows() != 2 * d {
        return Err(Error::ShapeMismatch {
            op: "kernel_eval_grid",
            detail: format!("input width {} vs {}", 2 * d, params.weights[0].rows()),
        });
    }
    let layers = params.weights.len();
    let wx = tape.slice_rows(&params.weights[0], 0, d)?;
    let wz = tape.slice_rows(&params.weights[0], d, d)?;
    let ax = tape.matmul(x_nodes, &wx)?;
    let bz = tape.matmul(z_nodes, &wz)?;
    let z0 = tape.pair_row_sum(&ax, &bz)?;
    let z0 = tape.add_row_broadcast(&z0, &params.biases[0])?;
    let h0 = if layers > 1 { tape.pointwise(&z0, params.activation.pointwise())? } else { z0 };
    let flat = mlp_layers_from(tape, params, h0, 1)?;
    tape.reshape(&flat, x_nodes.rows(), z_nodes.rows())
}

/// Same as `kernel_eval_grid` with a precomputed pair matrix.
pub fn kernel_eval_pairs(
    tape: &Tape,
    params: &MlpParams,
    pairs: &Tensor,
    m: usize,
    n: usize,
) -> Result<Tensor> {
    let flat = mlp_forward(tape, params, pairs)?;
    tape.reshape(&flat, m, n)
}

// ───────────────────────────── serialization ─────────────────────────────

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    widths: Vec<usize>,
    activation: Activation,
    init_seed: u64,
}

pub fn save_model(model: &MlpModel, path: &Path) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        widths: model.widths.clone(),
        activation: model.activation,
        init_seed: model.init_seed,
    })?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + model.param_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for p in model.params() {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<MlpModel> {
    let mut file = fs::File::open(path)?;
    let mut magic = vec![0u8; MAGIC.len()];
    file.read_exact(&mut magic).map_err(|_| bad_format("file too short"))?;
    if magic != MAGIC {
        return Err(bad_format("wrong magic bytes"));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let mut header_bytes = vec![0u8; u64::from_le_bytes(len_bytes) as usize];
    file.read_exact(&mut header_bytes)?;
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(|e| bad_format(&format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad_format(&format!("version {} (expected {FORMAT_VERSION})", header.format_version)));
    }

    let mut model = mlp_init(&header.widths, header.activation, header.init_seed)?;
    let mut blob = Vec::new();
    file.read_to_end(&mut blob)?;
    if blob.len() != model.param_count() * 8 {
        return Err(bad_format(&format!(
            "parameter blob holds {} bytes, expected {}",
            blob.len(),
            model.param_count() * 8
        )));
    }
    let mut at = 0;
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v = f64::from_le_bytes(blob[at..at + 8].try_into().unwrap());
            at += 8;
        }
    }
    Ok(model)
}

fn bad_format(detail: &str) -> Error {
    Error::FormatVersionMismatch(detail.to_string())
}

/// Convenience: write through a std Write (used by the dataset bundle).
pub fn write_f64_slice<W: Write>(w: &mut W, data: &[f64]) -> std::io::Result<()> {
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

// ───────────────────────────── tests ─────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    #[test]
    fn same_seed_is_bitwise_equal() {
        let a = mlp_init(&[2, 8, 1], Activation::Tanh, 42).unwrap();
        let b = mlp_init(&[2, 8, 1], Activation::Tanh, 42).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.data(), pb.data());
        }
        let c = mlp_init(&[2, 8, 1], Activation::Tanh, 43).unwrap();
        assert_ne!(a.params()[0].data(), c.params()[0].data());
    }

    #[test]
    fn param_count_2_64_1() {
        let m = mlp_init(&[2, 64, 1], Activation::Tanh, 0).unwrap();
        assert_eq!(m.param_count(), 2 * 64 + 64 + 64 + 1);
        assert_eq!(m.param_count(), 257);
    }

    #[test]
    fn four_weight_matrices_for_deep_widths() {
        let m = mlp_init(&[20, 128, 128, 64, 1], Activation::Silu, 7).unwrap();
        assert_eq!(m.num_layers(), 4);
    }

    #[test]
    fn invalid_widths_rejected() {
        assert!(matches!(mlp_init(&[3], Activation::Tanh, 0), Err(Error::InvalidWidths(_))));
        assert!(matches!(mlp_init(&[3, 0, 1], Activation::Tanh, 0), Err(Error::InvalidWidths(_))));
    }

    #[test]
    fn glorot_limits_respected() {
        let m = mlp_init(&[2, 64, 1], Activation::Tanh, 11).unwrap();
        let lim0 = (6.0 / 66.0f64).sqrt();
        assert!(m.weights[0].data().iter().all(|v| v.abs() < lim0));
        assert!(m.biases.iter().all(|b| b.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut m = mlp_init(&[2, 4, 1], Activation::Tanh, 0).unwrap();
        for p in m.params_mut() {
            for v in p.data_mut() {
                *v = 0.0;
            }
        }
        let tape = Tape::inactive();
        let x = Tensor::new(3, 2, vec![0.5, -0.3, 1.0, 2.0, -1.0, 0.25]).unwrap();
        let y = mlp_forward(&tape, &m.constants(), &x).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn single_linear_layer_hand_arithmetic() {
        // W = [[2],[0]], b = [1]: (3, 5) -> 3·2 + 5·0 + 1 = 7.
        let mut m = mlp_init(&[2, 1], Activation::Tanh, 0).unwrap();
        m.weights[0].data_mut().copy_from_slice(&[2.0, 0.0]);
        m.biases[0].data_mut().copy_from_slice(&[1.0]);
        let tape = Tape::inactive();
        let x = Tensor::new(1, 2, vec![3.0, 5.0]).unwrap();
        let y = mlp_forward(&tape, &m.constants(), &x).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn batch_equals_stacked_single_rows() {
        let m = mlp_init(&[3, 16, 8, 1], Activation::Silu, 5).unwrap();
        let tape = Tape::inactive();
        let xs: Vec<Vec<f64>> =
            vec![vec![0.1, -0.4, 0.9], vec![0.0, 0.0, 0.0], vec![2.0, -2.0, 0.5]];
        let batch =
            Tensor::new(3, 3, xs.iter().flatten().copied().collect()).unwrap();
        let by = mlp_forward(&tape, &m.constants(), &batch).unwrap();
        for (i, x) in xs.iter().enumerate() {
            let single = Tensor::new(1, 3, x.clone()).unwrap();
            let sy = mlp_forward(&tape, &m.constants(), &single).unwrap();
            assert_eq!(by.data()[i], sy.data()[0], "row {i} drifted from single eval");
        }
    }

    #[test]
    fn tanh_antisymmetry_fixture() {
        // Zero biases + linear head make tanh nets odd: f(-x) = -f(x).
        let m = mlp_init(&[2, 16, 1], Activation::Tanh, 9).unwrap();
        let tape = Tape::inactive();
        let x = Tensor::new(1, 2, vec![0.37, -0.81]).unwrap();
        let nx = Tensor::new(1, 2, vec![-0.37, 0.81]).unwrap();
        let y = mlp_forward(&tape, &m.constants(), &x).unwrap();
        let ny = mlp_forward(&tape, &m.constants(), &nx).unwrap();
        assert!((y.data()[0] + ny.data()[0]).abs() <= 1e-15);
    }

    #[test]
    fn kernel_grid_matches_rowwise_forward() {
        let m = mlp_init(&[2, 8, 1], Activation::Tanh, 3).unwrap();
        let tape = Tape::inactive();
        let x = Tensor::new(3, 1, vec![0.1, 0.5, 0.9]).unwrap();
        let z = Tensor::new(4, 1, vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let grid = kernel_eval_grid(&tape, &m.constants(), &x, &z).unwrap();
        assert_eq!((grid.rows(), grid.cols()), (3, 4));
        for i in 0..3 {
            for j in 0..4 {
                let pair =
                    Tensor::new(1, 2, vec![x.data()[i], z.data()[j]]).unwrap();
                let v = mlp_forward(&tape, &m.constants(), &pair).unwrap();
                assert_eq!(grid.get(i, j), v.data()[0], "entry ({i},{j})");
            }
        }
    }

    #[test]
    fn factorized_grid_matches_pair_matrix_path() {
        // Same values up to reassociation of the first-layer dot products.
        let m = mlp_init(&[6, 8, 1], Activation::Silu, 11).unwrap();
        let tape = Tape::inactive();
        let x = Tensor::new(3, 3, vec![0.1, -0.4, 0.9, 0.0, 0.2, -0.1, 0.7, 0.5, -0.6]).unwrap();
        let z = Tensor::new(4, 3, vec![0.3, 0.1, -0.2, 0.8, -0.5, 0.4, 0.0, 0.9, 0.6, -0.3, 0.2, 0.7])
            .unwrap();
        let grid = kernel_eval_grid(&tape, &m.constants(), &x, &z).unwrap();
        let pairs = pair_matrix(&x, &z).unwrap();
        let flat = kernel_eval_pairs(&tape, &m.constants(), &pairs, 3, 4).unwrap();
        for (a, b) in grid.data().iter().zip(flat.data()) {
            assert!((a - b).abs() <= 1e-13 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn kernel_grid_gradients_match_finite_differences() {
        let m = mlp_init(&[4, 6, 1], Activation::Tanh, 17).unwrap();
        let x = Tensor::new(3, 2, vec![0.1, 0.9, -0.4, 0.2, 0.7, -0.7]).unwrap();
        let z = Tensor::new(2, 2, vec![0.3, -0.1, 0.5, 0.6]).unwrap();
        let params: Vec<Tensor> = m.params().iter().map(|p| p.detach()).collect();
        let act = m.activation();
        let err = grad_check(
            |tape, ps| {
                let mp = MlpParams::from_interleaved(act, ps)?;
                let grid = kernel_eval_grid(tape, &mp, &x, &z)?;
                tape.mean(&tape.pointwise(&grid, Pointwise::Square)?)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "rel error {err}");
    }

    #[test]
    fn zeroed_kernel_model_gives_zero_matrix() {
        let mut m = mlp_init(&[4, 6, 1], Activation::Relu, 0).unwrap();
        for p in m.params_mut() {
            for v in p.data_mut() {
                *v = 0.0;
            }
        }
        let tape = Tape::inactive();
        let x = Tensor::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let grid = kernel_eval_grid(&tape, &m.constants(), &x, &x).unwrap();
        assert!(grid.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        for seed in [1u64, 2, 3] {
            let m = mlp_init(&[2, 6, 1], Activation::Tanh, seed).unwrap();
            let x = Tensor::new(4, 2, vec![0.1, 0.9, -0.4, 0.2, 0.7, -0.7, 0.0, 0.3]).unwrap();
            let target = Tensor::new(4, 1, vec![0.5, -0.2, 0.1, 0.8]).unwrap();
            let params: Vec<Tensor> = m.params().iter().map(|p| p.detach()).collect();
            let act = m.activation();
            let err = grad_check(
                |tape, ps| {
                    let mp = MlpParams {
                        weights: vec![ps[0].clone(), ps[2].clone()],
                        biases: vec![ps[1].clone(), ps[3].clone()],
                        activation: act,
                    };
                    let y = mlp_forward(tape, &mp, &x)?;
                    let diff = tape.sub(&y, &target)?;
                    tape.mean(&tape.pointwise(&diff, Pointwise::Square)?)
                },
                &params,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "seed {seed}: rel error {err}");
        }
    }

    #[test]
    fn save_load_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fnn");
        let m = mlp_init(&[2, 64, 1], Activation::Silu, 123).unwrap();
        save_model(&m, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.widths(), m.widths());
        assert_eq!(loaded.activation(), m.activation());
        assert_eq!(loaded.init_seed(), m.init_seed());
        for (a, b) in m.params().iter().zip(loaded.params()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn wrong_magic_is_format_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.fnn");
        fs::write(&path, b"NOT-A-MODEL-FILE....................").unwrap();
        assert!(matches!(load_model(&path), Err(Error::FormatVersionMismatch(_))));
    }
}
