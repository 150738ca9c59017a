//! Versioned run configuration for the `fredino` command line.
//!
//! A run config is a single JSON file naming one experiment. The same file
//! drives every subcommand, so a dataset generated today and a model trained
//! tomorrow are guaranteed to agree on grids, kernels, and seeds. Configs are
//! strict: unknown fields, wrong versions, and cross-field mismatches (a
//! linear iteration with a nonlinearity attached, a Sobol experiment with a
//! uniform grid) are rejected before any computation starts.
//!
//! Each file may carry an optional `paper_scale` block: a complete second
//! experiment at publication scale selected by the `--paper-scale` flag. The
//! block is never merged with the desk-scale experiment; it stands alone, so
//! reading a config tells you exactly what either invocation will do.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::DatasetConfig;
use crate::error::{Error, Result};
use crate::fredholm::{FredholmNetConfig, IterationMode, NormKind};
use crate::models::Activation;
use crate::pfnn::{
    PdeDatasetConfig, PfnnTrainConfig, PhiBaseKind, PhiModel, DEFAULT_CORRECTION_WIDTHS,
};
use crate::quadrature::{GridKind, GridSpec};
use crate::training::TrainingConfig;

/// Bumped on any incompatible change to the config schema.
pub const RUN_CONFIG_VERSION: u32 = 1;

// ───────────────────────────── top level ─────────────────────────────

/// One config file: a named experiment plus the optional full-scale variant.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    /// Identifier used in artifact names and error tables; lowercase
    /// alphanumerics, `_`, and `-` only.
    pub name: String,
    pub experiment: ExperimentSpec,
    /// Complete alternative experiment at publication scale.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paper_scale: Option<ExperimentSpec>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != RUN_CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config format_version {} but this build reads {}",
                self.format_version, RUN_CONFIG_VERSION
            )));
        }
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '-')
        {
            return Err(Error::Config(format!(
                "name {:?} must be non-empty lowercase alphanumerics, '_', or '-'",
                self.name
            )));
        }
        self.experiment.validate()?;
        if let Some(ps) = &self.paper_scale {
            ps.validate()?;
        }
        Ok(())
    }

    /// Pick the experiment for this invocation and apply the seed override.
    pub fn resolve(&self, paper_scale: bool, seed: Option<u64>) -> Result<ResolvedRun> {
        self.validate()?;
        let mut experiment = if paper_scale {
            self.paper_scale
                .clone()
                .ok_or_else(|| Error::Config("config has no paper_scale block".into()))?
        } else {
            self.experiment.clone()
        };
        if let Some(s) = seed {
            experiment.set_base_seed(s);
        }
        Ok(ResolvedRun { name: self.name.clone(), experiment, paper_scale, seed_override: seed })
    }
}

/// Fully resolved invocation: flags folded in, ready to execute. Its
/// `as_run_config` copy reproduces the run with no flags at all.
#[derive(Clone, Debug)]
pub struct ResolvedRun {
    pub name: String,
    pub experiment: ExperimentSpec,
    pub paper_scale: bool,
    pub seed_override: Option<u64>,
}

impl ResolvedRun {
    /// Self-contained config equivalent to this invocation.
    pub fn as_run_config(&self) -> RunConfig {
        RunConfig {
            format_version: RUN_CONFIG_VERSION,
            name: self.name.clone(),
            experiment: self.experiment.clone(),
            paper_scale: None,
        }
    }
}

/// Read and structurally validate a config file. Parse failures are config
/// errors, not I/O errors; only a missing or unreadable file is I/O.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    let config: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("parse {}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

// ───────────────────────────── experiments ─────────────────────────────

/// The five experiment kinds. Integral kinds share one payload; the split
/// exists so a config states its domain up front and validation can hold
/// each kind to its own grid and iteration mode.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ExperimentSpec {
    /// Linear operator on a 1D interval grid.
    #[serde(rename = "linear_1d")]
    Linear1d(IntegralExperiment),
    /// Linear operator on a scrambled Sobol grid in d dimensions.
    #[serde(rename = "linear_hd")]
    LinearHd(IntegralExperiment),
    /// Nonlinear fixed point on a 1D interval grid.
    #[serde(rename = "nonlinear_1d")]
    Nonlinear1d(IntegralExperiment),
    /// Nonlinear fixed point on a Sobol grid.
    #[serde(rename = "nonlinear_hd")]
    NonlinearHd(IntegralExperiment),
    /// Dirichlet problem on the unit disk through the boundary integral
    /// formulation.
    #[serde(rename = "pfnn_2d")]
    Pfnn2d(PdeExperiment),
}

impl ExperimentSpec {
    pub fn kind_label(&self) -> &'static str {
        match self {
            ExperimentSpec::Linear1d(_) => "linear_1d",
            ExperimentSpec::LinearHd(_) => "linear_hd",
            ExperimentSpec::Nonlinear1d(_) => "nonlinear_1d",
            ExperimentSpec::NonlinearHd(_) => "nonlinear_hd",
            ExperimentSpec::Pfnn2d(_) => "pfnn_2d",
        }
    }

    pub fn as_integral(&self) -> Result<&IntegralExperiment> {
        match self {
            ExperimentSpec::Linear1d(e)
            | ExperimentSpec::LinearHd(e)
            | ExperimentSpec::Nonlinear1d(e)
            | ExperimentSpec::NonlinearHd(e) => Ok(e),
            ExperimentSpec::Pfnn2d(_) => {
                Err(Error::Config("this command needs an integral experiment".into()))
            }
        }
    }

    pub fn as_pde(&self) -> Result<&PdeExperiment> {
        match self {
            ExperimentSpec::Pfnn2d(e) => Ok(e),
            _ => Err(Error::Config("this command needs a pfnn_2d experiment".into())),
        }
    }

    /// The one seed the `--seed` flag overrides: dataset generation.
    pub fn set_base_seed(&mut self, seed: u64) {
        match self {
            ExperimentSpec::Linear1d(e)
            | ExperimentSpec::LinearHd(e)
            | ExperimentSpec::Nonlinear1d(e)
            | ExperimentSpec::NonlinearHd(e) => e.dataset.base_seed = seed,
            ExperimentSpec::Pfnn2d(e) => e.dataset.base_seed = seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ExperimentSpec::Linear1d(e) => e.validate(Linearity::Linear, GridFamily::Interval),
            ExperimentSpec::LinearHd(e) => e.validate(Linearity::Linear, GridFamily::Sobol),
            ExperimentSpec::Nonlinear1d(e) => {
                e.validate(Linearity::Nonlinear, GridFamily::Interval)
            }
            ExperimentSpec::NonlinearHd(e) => e.validate(Linearity::Nonlinear, GridFamily::Sobol),
            ExperimentSpec::Pfnn2d(e) => e.validate(),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Linearity {
    Linear,
    Nonlinear,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum GridFamily {
    Interval,
    Sobol,
}

fn check_grid_family(label: &str, spec: &GridSpec, family: GridFamily) -> Result<()> {
    match (family, &spec.kind) {
        (GridFamily::Interval, GridKind::Uniform1d { .. }) => Ok(()),
        (GridFamily::Sobol, GridKind::Sobol { .. }) => Ok(()),
        (GridFamily::Interval, _) => {
            Err(Error::Config(format!("{label} must be a uniform_1d grid for this kind")))
        }
        (GridFamily::Sobol, _) => {
            Err(Error::Config(format!("{label} must be a sobol grid for this kind")))
        }
    }
}

// ───────────────────────────── integral payload ─────────────────────────────

/// Everything one integral-equation experiment needs, desk or paper scale.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegralExperiment {
    pub dataset: DatasetConfig,
    /// Set λ on the training grid before generation so the true operator
    /// meets this norm target; omitted means the configured λ is used as is.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibrate: Option<CalibrationSpec>,
    pub net: FredholmNetConfig,
    pub surrogate: SurrogateSpec,
    pub training: TrainingConfig,
    pub evaluation: EvaluationSpec,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSpec {
    pub target: f64,
    pub norm: NormKind,
}

/// Architecture of the learned pieces. The kernel net maps concatenated
/// (x, z) pairs, so its input width is twice the grid dimension; the G net
/// is scalar to scalar. The G seed is derived from `seed` by adding one.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateSpec {
    pub kernel_widths: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_widths: Option<Vec<usize>>,
    pub activation: Activation,
    pub seed: u64,
}

impl SurrogateSpec {
    pub fn g_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }
}

/// Held-out scoring: fresh functions from the shared family on a grid the
/// training run never saw.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSpec {
    pub test_grid: GridSpec,
    pub n_test: usize,
    pub test_seed: u64,
}

impl IntegralExperiment {
    fn validate(&self, linearity: Linearity, family: GridFamily) -> Result<()> {
        check_grid_family("dataset.grid", &self.dataset.grid, family)?;
        check_grid_family("evaluation.test_grid", &self.evaluation.test_grid, family)?;
        if self.evaluation.test_grid.d != self.dataset.grid.d {
            return Err(Error::Config(format!(
                "test grid dimension {} differs from training dimension {}",
                self.evaluation.test_grid.d, self.dataset.grid.d
            )));
        }
        if self.dataset.n_samples == 0 || self.evaluation.n_test == 0 {
            return Err(Error::Config("n_samples and n_test must be >= 1".into()));
        }
        if self.dataset.depth_m == 0 {
            return Err(Error::Config("dataset.depth_m must be >= 1".into()));
        }

        match linearity {
            Linearity::Linear => {
                if self.dataset.nonlinearity.is_some() {
                    return Err(Error::Config("linear kinds take no nonlinearity".into()));
                }
                if self.net.mode != IterationMode::LinearKm {
                    return Err(Error::Config("linear kinds need net.mode = linear_km".into()));
                }
                if self.surrogate.g_widths.is_some() || self.training.alt_min.is_some() {
                    return Err(Error::Config(
                        "linear kinds take no g_widths or alt_min block".into(),
                    ));
                }
            }
            Linearity::Nonlinear => {
                if self.dataset.nonlinearity.is_none() {
                    return Err(Error::Config("nonlinear kinds need dataset.nonlinearity".into()));
                }
                if self.net.mode != IterationMode::RecurrentPicard {
                    return Err(Error::Config(
                        "nonlinear kinds need net.mode = recurrent_picard".into(),
                    ));
                }
                let g = self
                    .surrogate
                    .g_widths
                    .as_ref()
                    .ok_or_else(|| Error::Config("nonlinear kinds need g_widths".into()))?;
                check_widths("g_widths", g, 1)?;
                if self.training.alt_min.is_none() {
                    return Err(Error::Config("nonlinear kinds need an alt_min block".into()));
                }
            }
        }

        check_widths("kernel_widths", &self.surrogate.kernel_widths, 2 * self.dataset.grid.d)?;
        if let Some(cal) = &self.calibrate {
            if !(cal.target > 0.0 && cal.target < 1.0) {
                return Err(Error::Config(format!(
                    "calibration target must sit in (0, 1), got {}",
                    cal.target
                )));
            }
        }
        self.net.validate()?;
        self.training.validate()?;
        Ok(())
    }

    /// Training-grid dataset recipe with calibration applied. λ is fixed on
    /// the training grid and reused verbatim everywhere else, so test-time
    /// truth comes from the same operator the model was fit to.
    pub fn resolved_dataset(&self) -> Result<DatasetConfig> {
        let mut config = self.dataset.clone();
        if let Some(cal) = &self.calibrate {
            let grid = config.grid.build()?;
            config.kernel.calibrate(&grid, cal.target, cal.norm)?;
        }
        Ok(config)
    }

    /// Test-set recipe: the resolved kernel on the held-out grid. The cross
    /// check is dropped because the direct solve itself is the truth here.
    pub fn test_dataset(&self) -> Result<DatasetConfig> {
        let mut config = self.resolved_dataset()?;
        config.grid = self.evaluation.test_grid.clone();
        config.n_samples = self.evaluation.n_test;
        config.base_seed = self.evaluation.test_seed;
        config.cross_check = false;
        Ok(config)
    }
}

fn check_widths(label: &str, widths: &[usize], input: usize) -> Result<()> {
    if widths.len() < 2 {
        return Err(Error::Config(format!("{label} needs at least input and output layers")));
    }
    if widths[0] != input {
        return Err(Error::Config(format!(
            "{label} input width {} but this experiment feeds {input}",
            widths[0]
        )));
    }
    if *widths.last().unwrap() != 1 {
        return Err(Error::Config(format!("{label} must end in one output")));
    }
    if widths.iter().any(|&w| w == 0) {
        return Err(Error::Config(format!("{label} has a zero width")));
    }
    Ok(())
}

// ───────────────────────────── pde payload ─────────────────────────────

/// One boundary-integral experiment on the unit disk.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeExperiment {
    pub dataset: PdeDatasetConfig,
    pub model: PhiModelSpec,
    pub training: PfnnTrainConfig,
    pub evaluation: PdeEvaluationSpec,
}

/// Which fundamental solution to run: the smoothed trainable blend with a
/// correction net, or the exact reference kernel with none.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhiModelSpec {
    pub base: PhiBaseKind,
    /// Correction architecture; defaults to the stock widths for the
    /// smoothed base. The reference base takes no correction net.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correction_widths: Option<Vec<usize>>,
    #[serde(default)]
    pub seed: u64,
}

impl PhiModelSpec {
    pub fn validate(&self) -> Result<()> {
        match self.base {
            PhiBaseKind::ReferenceK0 => {
                if self.correction_widths.is_some() {
                    return Err(Error::Config(
                        "reference_k0 takes no correction net; use smoothed_k0 to train".into(),
                    ));
                }
            }
            PhiBaseKind::SmoothedK0 => {
                if let Some(w) = &self.correction_widths {
                    check_widths("correction_widths", w, 4)?;
                }
            }
        }
        Ok(())
    }

    pub fn build(&self, lambda: f64) -> Result<PhiModel> {
        self.validate()?;
        match self.base {
            PhiBaseKind::ReferenceK0 => PhiModel::reference(lambda),
            PhiBaseKind::SmoothedK0 => {
                let widths = self
                    .correction_widths
                    .clone()
                    .unwrap_or_else(|| DEFAULT_CORRECTION_WIDTHS.to_vec());
                PhiModel::smoothed(lambda, &widths, self.seed)
            }
        }
    }
}

/// Held-out scoring for the solution operator: fresh boundary traces, then
/// both the one-pass reconstruction and the full Picard solve.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeEvaluationSpec {
    pub n_test: usize,
    pub test_seed: u64,
    /// Outer Picard iterations and stopping tolerance of the solver test.
    pub outer_iters: usize,
    pub tol: f64,
}

impl PdeExperiment {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.training.validate()?;
        if self.evaluation.n_test == 0 || self.evaluation.outer_iters == 0 {
            return Err(Error::Config("n_test and outer_iters must be >= 1".into()));
        }
        if !(self.evaluation.tol > 0.0) || !self.evaluation.tol.is_finite() {
            return Err(Error::Config(format!(
                "evaluation tol must be positive, got {}",
                self.evaluation.tol
            )));
        }
        Ok(())
    }

    /// Test-set recipe: same grids and source, fresh seed and sample count.
    pub fn test_dataset(&self) -> PdeDatasetConfig {
        let mut config = self.dataset.clone();
        config.n_samples = self.evaluation.n_test;
        config.base_seed = self.evaluation.test_seed;
        config
    }
}

// ───────────────────────────── tests ─────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{TransformKind, TrueGSpec, TrueKernelSpec};
    use crate::training::{AltMinConfig, BatchMode};

    fn linear_experiment() -> IntegralExperiment {
        IntegralExperiment {
            dataset: DatasetConfig {
                grid: GridSpec { kind: GridKind::Uniform1d { a: 0.0, b: 1.0 }, n: 24, d: 1 },
                kernel: TrueKernelSpec::two_cosines(),
                nonlinearity: None,
                n_samples: 8,
                depth_m: 20,
                transform: TransformKind::CenterNormalize,
                base_seed: 11,
                cross_check: true,
            },
            calibrate: Some(CalibrationSpec { target: 0.5, norm: NormKind::InfRowSum }),
            net: FredholmNetConfig::linear(20, 0.5),
            surrogate: SurrogateSpec {
                kernel_widths: vec![2, 16, 16, 1],
                g_widths: None,
                activation: Activation::Tanh,
                seed: 7,
            },
            training: TrainingConfig {
                epochs: 10,
                lr_schedule: vec![(0, 1e-3)],
                lambda_k: 0.0,
                lambda_g: 0.0,
                batch: BatchMode::Full,
                alt_min: None,
                adam: Default::default(),
                seed: 3,
                checkpoint_every: 0,
            },
            evaluation: EvaluationSpec {
                test_grid: GridSpec { kind: GridKind::Uniform1d { a: 0.0, b: 1.0 }, n: 31, d: 1 },
                n_test: 4,
                test_seed: 99,
            },
        }
    }

    fn nonlinear_experiment() -> IntegralExperiment {
        let mut e = linear_experiment();
        e.dataset.nonlinearity = Some(TrueGSpec::TwoPeakGauss);
        e.calibrate = None;
        e.net = FredholmNetConfig::recurrent(20);
        e.surrogate.g_widths = Some(vec![1, 8, 1]);
        e.training.alt_min = Some(AltMinConfig {
            phase_a_epochs: 4,
            phase_b_epochs: 4,
            rounds: 1,
            fine_tune_epochs: 0,
            fine_tune_lr: 1e-4,
        });
        e
    }

    fn pde_experiment() -> PdeExperiment {
        PdeExperiment {
            dataset: PdeDatasetConfig {
                boundary_n: 16,
                n_r: 3,
                n_phi: 6,
                lambda: 1.0,
                psi: crate::pfnn::PsiKind::TanhWell,
                n_samples: 2,
                depth_m: 12,
                kappa_b: 0.5,
                outer_cap: 8,
                tol: 1e-10,
                base_seed: 5,
                amp_lo: 0.5,
                amp_hi: 2.0,
            },
            model: PhiModelSpec {
                base: PhiBaseKind::SmoothedK0,
                correction_widths: Some(vec![4, 8, 1]),
                seed: 2,
            },
            training: PfnnTrainConfig::with_defaults(4),
            evaluation: PdeEvaluationSpec { n_test: 2, test_seed: 17, outer_iters: 8, tol: 1e-9 },
        }
    }

    fn base_config(experiment: ExperimentSpec) -> RunConfig {
        RunConfig {
            format_version: RUN_CONFIG_VERSION,
            name: "unit".into(),
            experiment,
            paper_scale: None,
        }
    }

    #[test]
    fn kind_tags_are_stable() {
        let cases = [
            (ExperimentSpec::Linear1d(linear_experiment()), "linear_1d"),
            (ExperimentSpec::LinearHd(linear_experiment()), "linear_hd"),
            (ExperimentSpec::Nonlinear1d(nonlinear_experiment()), "nonlinear_1d"),
            (ExperimentSpec::NonlinearHd(nonlinear_experiment()), "nonlinear_hd"),
            (ExperimentSpec::Pfnn2d(pde_experiment()), "pfnn_2d"),
        ];
        for (spec, tag) in cases {
            let v = serde_json::to_value(&spec).unwrap();
            assert_eq!(v["kind"], tag);
            assert_eq!(spec.kind_label(), tag);
        }
    }

    #[test]
    fn roundtrips_through_json() {
        for spec in [
            ExperimentSpec::Linear1d(linear_experiment()),
            ExperimentSpec::Nonlinear1d(nonlinear_experiment()),
            ExperimentSpec::Pfnn2d(pde_experiment()),
        ] {
            let config = base_config(spec);
            let text = serde_json::to_string_pretty(&config).unwrap();
            let back: RunConfig = serde_json::from_str(&text).unwrap();
            back.validate().unwrap();
            assert_eq!(serde_json::to_string(&back).unwrap(), serde_json::to_string(&config).unwrap());
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v = serde_json::to_value(base_config(ExperimentSpec::Linear1d(
            linear_experiment(),
        )))
        .unwrap();
        v["experiment"]["surrogate"]["kernel_width"] = serde_json::json!([2, 8, 1]);
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
    }

    #[test]
    fn version_and_name_are_checked() {
        let mut config = base_config(ExperimentSpec::Linear1d(linear_experiment()));
        config.format_version = 999;
        assert!(config.validate().is_err());
        config.format_version = RUN_CONFIG_VERSION;
        config.name = "Bad Name!".into();
        assert!(config.validate().is_err());
    }

    #[test]
    fn cross_field_mismatches_are_rejected() {
        // Linear kind with a nonlinearity attached.
        let mut e = linear_experiment();
        e.dataset.nonlinearity = Some(TrueGSpec::TwoPeakGauss);
        assert!(ExperimentSpec::Linear1d(e).validate().is_err());

        // Nonlinear kind missing its G surrogate.
        let mut e = nonlinear_experiment();
        e.surrogate.g_widths = None;
        assert!(ExperimentSpec::Nonlinear1d(e).validate().is_err());

        // 1d kind on a Sobol grid.
        let mut e = linear_experiment();
        e.dataset.grid = GridSpec { kind: GridKind::Sobol { scramble_seed: Some(1) }, n: 16, d: 2 };
        assert!(ExperimentSpec::Linear1d(e).validate().is_err());

        // Kernel net fed the wrong input width.
        let mut e = linear_experiment();
        e.surrogate.kernel_widths = vec![3, 8, 1];
        assert!(ExperimentSpec::Linear1d(e).validate().is_err());

        // Reference base with a correction net.
        let mut p = pde_experiment();
        p.model.base = PhiBaseKind::ReferenceK0;
        assert!(ExperimentSpec::Pfnn2d(p).validate().is_err());
    }

    #[test]
    fn resolve_selects_scale_and_overrides_seed() {
        let mut config = base_config(ExperimentSpec::Linear1d(linear_experiment()));
        assert!(config.resolve(true, None).is_err());

        let mut big = linear_experiment();
        big.dataset.n_samples = 16;
        config.paper_scale = Some(ExperimentSpec::Linear1d(big));

        let desk = config.resolve(false, Some(1234)).unwrap();
        let paper = config.resolve(true, None).unwrap();
        assert_eq!(desk.experiment.as_integral().unwrap().dataset.n_samples, 8);
        assert_eq!(desk.experiment.as_integral().unwrap().dataset.base_seed, 1234);
        assert_eq!(paper.experiment.as_integral().unwrap().dataset.n_samples, 16);
        assert_eq!(paper.experiment.as_integral().unwrap().dataset.base_seed, 11);

        // The provenance copy reproduces the run without flags.
        let copy = desk.as_run_config();
        assert!(copy.paper_scale.is_none());
        assert_eq!(copy.resolve(false, None).unwrap().experiment.as_integral().unwrap().dataset.base_seed, 1234);
    }

    #[test]
    fn calibration_resolves_lambda_once() {
        let e = linear_experiment();
        let resolved = e.resolved_dataset().unwrap();
        assert!(resolved.kernel.calibration.is_some());
        let test = e.test_dataset().unwrap();
        assert_eq!(test.kernel.lambda, resolved.kernel.lambda);
        assert_eq!(test.grid.n, 31);
        assert_eq!(test.base_seed, 99);
        assert!(!test.cross_check);
    }

    #[test]
    fn phi_spec_builds_both_bases() {
        let spec = PhiModelSpec { base: PhiBaseKind::SmoothedK0, correction_widths: None, seed: 4 };
        let model = spec.build(1.0).unwrap();
        assert_eq!(model.correction.as_ref().unwrap().widths(), DEFAULT_CORRECTION_WIDTHS);

        let spec = PhiModelSpec { base: PhiBaseKind::ReferenceK0, correction_widths: None, seed: 0 };
        assert!(spec.build(1.0).unwrap().correction.is_none());
    }

    #[test]
    fn shipped_presets_parse_and_resolve() {
        let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut seen = 0;
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let config = load_run_config(&path).unwrap_or_else(|e| panic!("{path:?}: {e}"));
            config.resolve(false, None).unwrap_or_else(|e| panic!("{path:?} desk: {e}"));
            config.resolve(true, None).unwrap_or_else(|e| panic!("{path:?} paper: {e}"));
            assert_eq!(
                config.name,
                path.file_stem().unwrap().to_str().unwrap(),
                "preset name should match its file name"
            );
            seen += 1;
        }
        assert!(seen >= 5, "expected the shipped presets, found {seen}");
    }
}
