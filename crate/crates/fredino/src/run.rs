//! Command implementations behind the `fredino` binary.
//!
//! Every subcommand takes one run config and one output directory and leaves
//! a self-describing trail: a resolved copy of the config (flags folded in,
//! so rerunning it with no flags reproduces the run), a per-command
//! provenance record of the seeds in play, and the command's own artifacts.
//! Commands never modify their inputs; `train` and `evaluate` read the
//! dataset and models from the output directory and refuse to proceed when
//! what they find there disagrees with the config they were handed.
//!
//! Artifact map, all relative to `--out`:
//!
//! * `run_config.json`, `provenance_<command>.json`: reproduction bundle.
//! * `dataset/`: manifest plus raw little-endian blobs (`generate`, or
//!   `train` when no dataset exists yet).
//! * `model/`: `kernel.bin` and optional `g.bin`, or `phi.bin` for the
//!   boundary-integral experiments (`train`).
//! * `train_report.json` (includes wall time), `losses.json` (deterministic
//!   loss and learning-rate curves only).
//! * `evaluation.json` plus per-protocol error CSVs (`evaluate`).
//! * `contraction.json` / `contraction.csv` (`contraction`).
//! * `solution/` with the solved field and its diagnostics (`solve-pde`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{
    load_run_config, ExperimentSpec, IntegralExperiment, PdeExperiment, ResolvedRun,
};
use crate::datagen::{
    generate_dataset, load_dataset, save_dataset, write_f64_blob, FunctionPairDataset,
};
use crate::error::{Error, Result};
use crate::fredholm::{
    assemble, contraction_report, forward_linear, forward_recurrent, ContractionReport, GApply,
    IterationMode,
};
use crate::metrics::{aggregate, report_csv, AggregateReport, ErrorRecord, Protocol};
use crate::models::{kernel_eval_grid, load_model, mlp_init, save_model, MlpModel};
use crate::pfnn::{
    generate_pde_dataset, load_pde_dataset, load_phi_model, picard_pde_solve, reconstruction_test,
    sample_boundary_g, save_pde_dataset, save_phi_model, solver_test, train_pfnn, PdeDataset,
    PdeProblem, PhiModel,
};
use crate::tensor::{Tape, Tensor};
use crate::training::{evaluate, train_alternating, train_linear};

// ───────────────────────────── artifact names ─────────────────────────────

pub const RUN_CONFIG_COPY: &str = "run_config.json";
pub const DATASET_DIR: &str = "dataset";
pub const MODEL_DIR: &str = "model";
pub const KERNEL_MODEL_FILE: &str = "kernel.bin";
pub const G_MODEL_FILE: &str = "g.bin";
pub const PHI_MODEL_FILE: &str = "phi.bin";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const LOSS_CURVE_FILE: &str = "losses.json";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const CONTRACTION_FILE: &str = "contraction.json";
pub const CONTRACTION_CSV_FILE: &str = "contraction.csv";
pub const SOLUTION_DIR: &str = "solution";

// ───────────────────────────── context ─────────────────────────────

/// One resolved invocation bound to its output directory.
pub struct RunContext {
    pub resolved: ResolvedRun,
    pub out: PathBuf,
}

impl RunContext {
    /// Load the config, fold in the flags, and create the output directory.
    /// `out` defaults to `runs/<name>`.
    pub fn new(
        config_path: &Path,
        out: Option<PathBuf>,
        paper_scale: bool,
        seed: Option<u64>,
    ) -> Result<Self> {
        let config = load_run_config(config_path)?;
        let resolved = config.resolve(paper_scale, seed)?;
        let out = out.unwrap_or_else(|| PathBuf::from("runs").join(&resolved.name));
        fs::create_dir_all(&out)?;
        Ok(RunContext { resolved, out })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        fs::write(self.path(rel), text)?;
        Ok(())
    }

    /// Reproduction bundle: the resolved config plus the seeds this command
    /// will consume. Contains no timestamps, so identical invocations leave
    /// identical bundles.
    fn write_provenance(&self, command: &'static str, calibrated_lambda: Option<f64>) -> Result<()> {
        self.write_json(RUN_CONFIG_COPY, &self.resolved.as_run_config())?;
        let exp = &self.resolved.experiment;
        let (base_seed, model_seed, test_seed) = match exp {
            ExperimentSpec::Pfnn2d(e) => {
                (e.dataset.base_seed, e.model.seed, e.evaluation.test_seed)
            }
            other => {
                let e = other.as_integral()?;
                (e.dataset.base_seed, e.surrogate.seed, e.evaluation.test_seed)
            }
        };
        let record = Provenance {
            command,
            name: self.resolved.name.clone(),
            kind: exp.kind_label(),
            paper_scale: self.resolved.paper_scale,
            seed_override: self.resolved.seed_override,
            base_seed,
            model_seed,
            test_seed,
            calibrated_lambda,
        };
        self.write_json(&format!("provenance_{command}.json"), &record)
    }
}

/// Everything needed to rerun one command: flags, effective seeds, and the
/// λ that calibration resolved (when it ran).
#[derive(Clone, Debug, Serialize)]
pub struct Provenance {
    pub command: &'static str,
    pub name: String,
    pub kind: &'static str,
    pub paper_scale: bool,
    pub seed_override: Option<u64>,
    pub base_seed: u64,
    pub model_seed: u64,
    pub test_seed: u64,
    pub calibrated_lambda: Option<f64>,
}

/// Deterministic slice of a training run; everything wall-clock lands in
/// `train_report.json` instead so this file is byte-stable across machines.
#[derive(Serialize)]
struct LossCurve<'a> {
    losses: &'a [f64],
    lrs: &'a [f64],
    checkpoints: &'a [crate::training::CheckpointRecord],
}

// ───────────────────────────── generate ─────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct GenerateSummary {
    pub n_samples: usize,
    pub grid_points: usize,
    pub calibrated_lambda: Option<f64>,
    pub max_residual: Option<f64>,
}

/// Build the training dataset and save it under `out/dataset`.
pub fn cmd_generate(ctx: &RunContext) -> Result<GenerateSummary> {
    let summary = match &ctx.resolved.experiment {
        ExperimentSpec::Pfnn2d(e) => {
            let dataset = generate_pde_dataset(&e.dataset)?;
            save_pde_dataset(&dataset, &ctx.path(DATASET_DIR))?;
            ctx.write_provenance("generate", None)?;
            GenerateSummary {
                n_samples: dataset.n_samples(),
                grid_points: dataset.interior.len(),
                calibrated_lambda: None,
                max_residual: None,
            }
        }
        other => {
            let e = other.as_integral()?;
            let config = e.resolved_dataset()?;
            let dataset = generate_dataset(&config)?;
            save_dataset(&dataset, &ctx.path(DATASET_DIR))?;
            let lambda = config.kernel.calibration.map(|_| config.kernel.lambda);
            ctx.write_provenance("generate", lambda)?;
            GenerateSummary {
                n_samples: dataset.n_samples(),
                grid_points: dataset.grid.len(),
                calibrated_lambda: lambda,
                max_residual: Some(dataset.max_residual()?),
            }
        }
    };
    Ok(summary)
}

// ───────────────────────────── train ─────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub final_loss: f64,
    pub median_loss: f64,
    pub wall_time_s: f64,
    pub diverged_retries: usize,
}

/// Fit the surrogate on the dataset in `out/dataset`, generating it first
/// when absent, and save the model under `out/model`.
pub fn cmd_train(ctx: &RunContext) -> Result<TrainSummary> {
    let report = match &ctx.resolved.experiment {
        ExperimentSpec::Pfnn2d(e) => {
            let dataset = load_or_generate_pde(ctx, e)?;
            let mut model = e.model.build(e.dataset.lambda)?;
            let report = train_pfnn(&mut model, &dataset, &e.training)?;
            fs::create_dir_all(ctx.path(MODEL_DIR))?;
            save_phi_model(&model, &ctx.path(MODEL_DIR).join(PHI_MODEL_FILE))?;
            ctx.write_provenance("train", None)?;
            report
        }
        other => {
            let e = other.as_integral()?;
            let (dataset, lambda) = load_or_generate_integral(ctx, e)?;
            let spec = &e.surrogate;
            let mut k_model = mlp_init(&spec.kernel_widths, spec.activation, spec.seed)?;
            let report = match &spec.g_widths {
                None => train_linear(&mut k_model, &dataset, &e.net, &e.training)?,
                Some(g_widths) => {
                    let mut g_model = mlp_init(g_widths, spec.activation, spec.g_seed())?;
                    let report =
                        train_alternating(&mut k_model, &mut g_model, &dataset, &e.net, &e.training)?;
                    fs::create_dir_all(ctx.path(MODEL_DIR))?;
                    save_model(&g_model, &ctx.path(MODEL_DIR).join(G_MODEL_FILE))?;
                    report
                }
            };
            fs::create_dir_all(ctx.path(MODEL_DIR))?;
            save_model(&k_model, &ctx.path(MODEL_DIR).join(KERNEL_MODEL_FILE))?;
            ctx.write_provenance("train", lambda)?;
            report
        }
    };
    ctx.write_json(TRAIN_REPORT_FILE, &report)?;
    ctx.write_json(
        LOSS_CURVE_FILE,
        &LossCurve { losses: &report.losses, lrs: &report.lrs, checkpoints: &report.checkpoints },
    )?;
    Ok(TrainSummary {
        epochs_run: report.losses.len(),
        final_loss: report.final_loss,
        median_loss: report.median_loss,
        wall_time_s: report.wall_time_s,
        diverged_retries: report.diverged_retries,
    })
}

/// Load `out/dataset` when present, generating and saving it otherwise. A
/// present dataset must match the resolved config exactly; a stale one from
/// an edited config is an error, never silently retrained on.
fn load_or_generate_integral(
    ctx: &RunContext,
    e: &IntegralExperiment,
) -> Result<(FunctionPairDataset, Option<f64>)> {
    let config = e.resolved_dataset()?;
    let lambda = config.kernel.calibration.map(|_| config.kernel.lambda);
    let dir = ctx.path(DATASET_DIR);
    if dir.join("manifest.json").exists() {
        let dataset = load_dataset(&dir)?;
        check_same_config("dataset", &dataset.config, &config)?;
        Ok((dataset, lambda))
    } else {
        let dataset = generate_dataset(&config)?;
        save_dataset(&dataset, &dir)?;
        Ok((dataset, lambda))
    }
}

fn load_or_generate_pde(ctx: &RunContext, e: &PdeExperiment) -> Result<PdeDataset> {
    let dir = ctx.path(DATASET_DIR);
    if dir.join("manifest.json").exists() {
        let dataset = load_pde_dataset(&dir)?;
        check_same_config("dataset", &dataset.config, &e.dataset)?;
        Ok(dataset)
    } else {
        let dataset = generate_pde_dataset(&e.dataset)?;
        save_pde_dataset(&dataset, &dir)?;
        Ok(dataset)
    }
}

fn check_same_config<T: Serialize>(label: &str, found: &T, wanted: &T) -> Result<()> {
    let found = serde_json::to_value(found)?;
    let wanted = serde_json::to_value(wanted)?;
    if found != wanted {
        return Err(Error::Config(format!(
            "{label} in the output directory was generated from a different config; \
             remove it or point --out elsewhere"
        )));
    }
    Ok(())
}

// ───────────────────────────── evaluate ─────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct EvaluateSummary {
    pub n_test: usize,
    /// Median per-sample relative L2 error; reconstruction error for the
    /// boundary-integral experiments.
    pub median_rel_l2: f64,
    /// Solver-test median, boundary-integral experiments only.
    pub solver_median_rel_l2: Option<f64>,
}

#[derive(Serialize)]
struct IntegralEvaluation {
    name: String,
    kind: &'static str,
    n_test: usize,
    test_grid_points: usize,
    median_rel_l2: f64,
    reports: Vec<AggregateReport>,
}

#[derive(Serialize)]
struct PdeEvaluation {
    name: String,
    n_test: usize,
    reconstruction_median_rel_l2: f64,
    solver_median_rel_l2: f64,
    reconstruction: Vec<AggregateReport>,
    solver: Vec<AggregateReport>,
    contraction: ContractionReport,
}

/// Score the trained model on held-out functions from the config's
/// evaluation block; truth comes from the exact operator.
pub fn cmd_evaluate(ctx: &RunContext) -> Result<EvaluateSummary> {
    match &ctx.resolved.experiment {
        ExperimentSpec::Pfnn2d(e) => {
            let model = load_phi_model(&ctx.path(MODEL_DIR).join(PHI_MODEL_FILE))?;
            let data = generate_pde_dataset(&e.test_dataset())?;
            let recon = reconstruction_test(&model, &data, e.training.depth_m, e.training.kappa_b)?;
            let (solve, contraction) = solver_test(
                &model,
                &data,
                e.training.depth_m,
                e.training.kappa_b,
                e.evaluation.outer_iters,
                e.evaluation.tol,
            )?;
            let recon_reports = both_protocols(&recon)?;
            let solve_reports = both_protocols(&solve)?;
            let recon_median = per_sample_median(&recon_reports);
            let solve_median = per_sample_median(&solve_reports);
            fs::write(
                ctx.path("errors_reconstruction.csv"),
                report_csv(&ctx.resolved.name, &recon_reports),
            )?;
            fs::write(ctx.path("errors_solver.csv"), report_csv(&ctx.resolved.name, &solve_reports))?;
            ctx.write_json(
                EVALUATION_FILE,
                &PdeEvaluation {
                    name: ctx.resolved.name.clone(),
                    n_test: data.n_samples(),
                    reconstruction_median_rel_l2: recon_median,
                    solver_median_rel_l2: solve_median,
                    reconstruction: recon_reports,
                    solver: solve_reports,
                    contraction,
                },
            )?;
            ctx.write_provenance("evaluate", None)?;
            Ok(EvaluateSummary {
                n_test: data.n_samples(),
                median_rel_l2: recon_median,
                solver_median_rel_l2: Some(solve_median),
            })
        }
        other => {
            let e = other.as_integral()?;
            let k_model = load_model(&ctx.path(MODEL_DIR).join(KERNEL_MODEL_FILE))?;
            check_architecture("kernel model", &k_model, &e.surrogate.kernel_widths)?;
            let g_model = match &e.surrogate.g_widths {
                None => None,
                Some(w) => {
                    let m = load_model(&ctx.path(MODEL_DIR).join(G_MODEL_FILE))?;
                    check_architecture("g model", &m, w)?;
                    Some(m)
                }
            };
            let test_config = e.test_dataset()?;
            let lambda = test_config.kernel.calibration.map(|_| test_config.kernel.lambda);
            let data = generate_dataset(&test_config)?;
            let per_fn = evaluate(
                &k_model,
                g_model.as_ref(),
                &data.grid,
                &data.g_columns(),
                &data.f_columns(),
                &e.net,
            )?;
            let records: Vec<ErrorRecord> = per_fn
                .iter()
                .enumerate()
                .map(|(j, &(rel_l1, rel_l2, rel_linf))| ErrorRecord {
                    run_id: 0,
                    test_fn_id: j,
                    rel_l1,
                    rel_l2,
                    rel_linf,
                })
                .collect();
            let reports = both_protocols(&records)?;
            let median = per_sample_median(&reports);
            fs::write(ctx.path("errors.csv"), report_csv(&ctx.resolved.name, &reports))?;
            ctx.write_json(
                EVALUATION_FILE,
                &IntegralEvaluation {
                    name: ctx.resolved.name.clone(),
                    kind: other.kind_label(),
                    n_test: records.len(),
                    test_grid_points: data.grid.len(),
                    median_rel_l2: median,
                    reports,
                },
            )?;
            ctx.write_provenance("evaluate", lambda)?;
            Ok(EvaluateSummary {
                n_test: records.len(),
                median_rel_l2: median,
                solver_median_rel_l2: None,
            })
        }
    }
}

fn both_protocols(records: &[ErrorRecord]) -> Result<Vec<AggregateReport>> {
    Ok(vec![aggregate(records, Protocol::PerRun)?, aggregate(records, Protocol::PerSample)?])
}

/// reports[1] is always the per-sample protocol.
fn per_sample_median(reports: &[AggregateReport]) -> f64 {
    reports[1].rel_l2.median
}

fn check_architecture(label: &str, model: &MlpModel, widths: &[usize]) -> Result<()> {
    if model.widths() != widths {
        return Err(Error::Config(format!(
            "{label} in the output directory has widths {:?} but the config says {:?}; \
             retrain or fix the config",
            model.widths(),
            widths
        )));
    }
    Ok(())
}

// ───────────────────────────── contraction ─────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct ContractionSummary {
    /// "surrogate" when a trained model was found, "true_kernel" otherwise;
    /// "trained_phi" / "initial_phi" for the boundary-integral experiments.
    pub source: &'static str,
    pub contractive: bool,
    pub inf_norm_w: f64,
    pub spectral_norm_w: f64,
}

#[derive(Serialize)]
struct ContractionArtifact {
    name: String,
    source: &'static str,
    report: ContractionReport,
}

/// Diagnose the fixed-point pass the config describes: the trained operator
/// when one is present in `out/model`, the exact one otherwise. Exits
/// nonzero when the pass is not a contraction.
pub fn cmd_contraction(ctx: &RunContext) -> Result<ContractionSummary> {
    let (source, report) = match &ctx.resolved.experiment {
        ExperimentSpec::Pfnn2d(e) => {
            let phi_path = ctx.path(MODEL_DIR).join(PHI_MODEL_FILE);
            let (source, model) = if phi_path.exists() {
                ("trained_phi", load_phi_model(&phi_path)?)
            } else {
                ("initial_phi", e.model.build(e.dataset.lambda)?)
            };
            let (_, _, g) = sample_boundary_g(&e.dataset, 0);
            let problem = PdeProblem::on_disk(
                e.dataset.psi,
                e.dataset.lambda,
                e.dataset.boundary_n,
                e.dataset.n_r,
                e.dataset.n_phi,
                g,
            )?;
            let solve = picard_pde_solve(
                &model,
                &problem,
                e.training.depth_m,
                e.training.kappa_b,
                e.evaluation.outer_iters,
                e.evaluation.tol,
            )?;
            (source, solve.report)
        }
        other => {
            let e = other.as_integral()?;
            let config = e.resolved_dataset()?;
            let grid = config.grid.build()?;
            let tape = Tape::inactive();
            let kernel_path = ctx.path(MODEL_DIR).join(KERNEL_MODEL_FILE);
            let (source, kernel_values) = if kernel_path.exists() {
                let k_model = load_model(&kernel_path)?;
                let values =
                    kernel_eval_grid(&tape, &k_model.constants(), &grid.nodes, &grid.nodes)?;
                ("surrogate", values)
            } else {
                ("true_kernel", config.kernel.eval_grid(&grid)?)
            };
            let op = assemble(&tape, &kernel_values, &grid, &e.net)?;
            let probe = Tensor::new(grid.len(), 1, vec![1.0; grid.len()])?;
            let run = match e.net.mode {
                IterationMode::LinearKm => forward_linear(&tape, &op, &probe, true)?,
                IterationMode::RecurrentPicard => {
                    let g_path = ctx.path(MODEL_DIR).join(G_MODEL_FILE);
                    if source == "surrogate" && g_path.exists() {
                        let g_model = load_model(&g_path)?;
                        forward_recurrent(
                            &tape,
                            &op,
                            &probe,
                            &GApply::Surrogate(&g_model.constants()),
                            true,
                        )?
                    } else {
                        let spec = config
                            .nonlinearity
                            .ok_or_else(|| Error::Config("recurrent mode needs nonlinearity".into()))?;
                        let g_fn = move |u: f64| spec.eval(u);
                        forward_recurrent(&tape, &op, &probe, &GApply::Analytic(&g_fn), true)?
                    }
                }
            };
            (source, contraction_report(&run.layers, &op)?)
        }
    };

    fs::write(ctx.path(CONTRACTION_CSV_FILE), report.to_csv())?;
    ctx.write_json(
        CONTRACTION_FILE,
        &ContractionArtifact { name: ctx.resolved.name.clone(), source, report: report.clone() },
    )?;
    ctx.write_provenance("contraction", None)?;

    let summary = ContractionSummary {
        source,
        contractive: report.contractive,
        inf_norm_w: report.inf_norm_w,
        spectral_norm_w: report.spectral_norm_w,
    };
    if !report.contractive {
        return Err(Error::NotConverged {
            iters: report.successive_sup.len(),
            last: vec![report.inf_norm_w, report.spectral_norm_w],
        });
    }
    Ok(summary)
}

// ───────────────────────────── solve-pde ─────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct SolveSummary {
    pub source: &'static str,
    pub outer_iterations: usize,
    pub final_delta: f64,
    pub contractive: bool,
}

#[derive(Serialize)]
struct SolutionArtifact {
    name: String,
    source: &'static str,
    lambda: f64,
    psi: &'static str,
    boundary_points: usize,
    interior_points: usize,
    g_seed: u64,
    amplitude: f64,
    outer_iterations: usize,
    sup_deltas: Vec<f64>,
    contraction: ContractionReport,
}

/// Solve one Dirichlet instance drawn from the dataset distribution and
/// write the field to `out/solution`. Uses the trained model when present,
/// the exact reference kernel otherwise.
pub fn cmd_solve_pde(ctx: &RunContext) -> Result<SolveSummary> {
    let e = ctx.resolved.experiment.as_pde()?;
    let phi_path = ctx.path(MODEL_DIR).join(PHI_MODEL_FILE);
    let (source, model) = if phi_path.exists() {
        ("trained_phi", load_phi_model(&phi_path)?)
    } else {
        ("reference_phi", PhiModel::reference(e.dataset.lambda)?)
    };
    let (g_seed, amplitude, g) = sample_boundary_g(&e.dataset, 0);
    let problem = PdeProblem::on_disk(
        e.dataset.psi,
        e.dataset.lambda,
        e.dataset.boundary_n,
        e.dataset.n_r,
        e.dataset.n_phi,
        g.clone(),
    )?;
    let solve = picard_pde_solve(
        &model,
        &problem,
        e.training.depth_m,
        e.training.kappa_b,
        e.evaluation.outer_iters,
        e.evaluation.tol,
    )?;

    let dir = ctx.path(SOLUTION_DIR);
    fs::create_dir_all(&dir)?;
    write_f64_blob(&dir.join("g.bin"), &g)?;
    write_f64_blob(&dir.join("beta.bin"), &solve.beta)?;
    write_f64_blob(&dir.join("u.bin"), &solve.u)?;
    let final_delta = solve.sup_deltas.last().copied().unwrap_or(0.0);
    let artifact = SolutionArtifact {
        name: ctx.resolved.name.clone(),
        source,
        lambda: e.dataset.lambda,
        psi: e.dataset.psi.id(),
        boundary_points: problem.boundary.len(),
        interior_points: problem.interior.len(),
        g_seed,
        amplitude,
        outer_iterations: solve.outer_iterations,
        sup_deltas: solve.sup_deltas.clone(),
        contraction: solve.report.clone(),
    };
    let text = serde_json::to_string_pretty(&artifact)?;
    fs::write(dir.join("solution.json"), text)?;
    ctx.write_provenance("solve-pde", None)?;
    Ok(SolveSummary {
        source,
        outer_iterations: solve.outer_iterations,
        final_delta,
        contractive: solve.report.contractive,
    })
}

// ───────────────────────────── tests ─────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{
        CalibrationSpec, EvaluationSpec, PdeEvaluationSpec, PhiModelSpec, RunConfig, SurrogateSpec,
        RUN_CONFIG_VERSION,
    };
    use crate::datagen::{DatasetConfig, TransformKind, TrueGSpec, TrueKernelSpec};
    use crate::fredholm::{FredholmNetConfig, NormKind};
    use crate::models::Activation;
    use crate::pfnn::{PdeDatasetConfig, PfnnTrainConfig, PhiBaseKind, PsiKind};
    use crate::quadrature::{GridKind, GridSpec};
    use crate::training::{AltMinConfig, BatchMode, TrainingConfig};
    use tempfile::tempdir;

    fn grid_1d(n: usize) -> GridSpec {
        GridSpec { kind: GridKind::Uniform1d { a: 0.0, b: 1.0 }, n, d: 1 }
    }

    fn tiny_training(epochs: usize) -> TrainingConfig {
        TrainingConfig {
            epochs,
            lr_schedule: vec![(0, 3e-3)],
            lambda_k: 0.0,
            lambda_g: 0.0,
            batch: BatchMode::Full,
            alt_min: None,
            adam: Default::default(),
            seed: 3,
            checkpoint_every: 0,
        }
    }

    fn tiny_linear() -> RunConfig {
        RunConfig {
            format_version: RUN_CONFIG_VERSION,
            name: "tiny-linear".into(),
            experiment: ExperimentSpec::Linear1d(IntegralExperiment {
                dataset: DatasetConfig {
                    grid: grid_1d(20),
                    kernel: TrueKernelSpec::two_cosines(),
                    nonlinearity: None,
                    n_samples: 6,
                    depth_m: 30,
                    transform: TransformKind::CenterNormalize,
                    base_seed: 11,
                    cross_check: true,
                },
                calibrate: Some(CalibrationSpec { target: 0.5, norm: NormKind::InfRowSum }),
                net: FredholmNetConfig::linear(30, 0.5),
                surrogate: SurrogateSpec {
                    kernel_widths: vec![2, 8, 1],
                    g_widths: None,
                    activation: Activation::Tanh,
                    seed: 7,
                },
                training: tiny_training(8),
                evaluation: EvaluationSpec { test_grid: grid_1d(27), n_test: 3, test_seed: 99 },
            }),
            paper_scale: None,
        }
    }

    fn tiny_nonlinear() -> RunConfig {
        let mut config = tiny_linear();
        config.name = "tiny-nonlinear".into();
        let ExperimentSpec::Linear1d(mut e) = config.experiment else { unreachable!() };
        e.dataset.nonlinearity = Some(TrueGSpec::TwoPeakGauss);
        e.calibrate = None;
        e.dataset.kernel.lambda = 0.4;
        e.net = FredholmNetConfig::recurrent(30);
        e.surrogate.g_widths = Some(vec![1, 8, 1]);
        e.training.alt_min = Some(AltMinConfig {
            phase_a_epochs: 3,
            phase_b_epochs: 3,
            rounds: 1,
            fine_tune_epochs: 2,
            fine_tune_lr: 1e-4,
        });
        config.experiment = ExperimentSpec::Nonlinear1d(e);
        config
    }

    fn tiny_pde() -> RunConfig {
        RunConfig {
            format_version: RUN_CONFIG_VERSION,
            name: "tiny-pde".into(),
            experiment: ExperimentSpec::Pfnn2d(PdeExperiment {
                dataset: PdeDatasetConfig {
                    boundary_n: 16,
                    n_r: 3,
                    n_phi: 8,
                    lambda: 1.0,
                    psi: PsiKind::TanhWell,
                    n_samples: 2,
                    depth_m: 14,
                    kappa_b: 0.5,
                    outer_cap: 12,
                    tol: 1e-10,
                    base_seed: 5,
                    amp_lo: 0.5,
                    amp_hi: 1.5,
                },
                model: PhiModelSpec {
                    base: PhiBaseKind::SmoothedK0,
                    correction_widths: Some(vec![4, 8, 1]),
                    seed: 2,
                },
                training: PfnnTrainConfig {
                    checkpoint_every: 1,
                    ..PfnnTrainConfig::with_defaults(2)
                },
                evaluation: PdeEvaluationSpec {
                    n_test: 2,
                    test_seed: 17,
                    outer_iters: 12,
                    tol: 1e-9,
                },
            }),
            paper_scale: None,
        }
    }

    fn write_config(dir: &Path, config: &RunConfig) -> PathBuf {
        let path = dir.join("config.json");
        fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
        path
    }

    fn context(dir: &Path, config: &RunConfig, seed: Option<u64>) -> RunContext {
        let path = write_config(dir, config);
        RunContext::new(&path, Some(dir.join("out")), false, seed).unwrap()
    }

    fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        entries
            .into_iter()
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
            .collect()
    }

    #[test]
    fn linear_pipeline_end_to_end() {
        let tmp = tempdir().unwrap();
        let ctx = context(tmp.path(), &tiny_linear(), None);

        let gen = cmd_generate(&ctx).unwrap();
        assert_eq!(gen.n_samples, 6);
        assert!(gen.calibrated_lambda.is_some());
        assert!(gen.max_residual.unwrap() <= 1e-9);
        assert!(ctx.path(RUN_CONFIG_COPY).exists());
        assert!(ctx.path("provenance_generate.json").exists());

        let train = cmd_train(&ctx).unwrap();
        assert_eq!(train.epochs_run, 8);
        assert!(train.final_loss.is_finite());
        assert!(ctx.path(MODEL_DIR).join(KERNEL_MODEL_FILE).exists());
        assert!(ctx.path(LOSS_CURVE_FILE).exists());

        // The deterministic loss file must not leak wall-clock fields.
        let losses: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(ctx.path(LOSS_CURVE_FILE)).unwrap()).unwrap();
        assert!(losses.get("wall_time_s").is_none());
        assert_eq!(losses["losses"].as_array().unwrap().len(), 8);

        let eval = cmd_evaluate(&ctx).unwrap();
        assert_eq!(eval.n_test, 3);
        assert!(eval.median_rel_l2.is_finite());
        assert!(ctx.path("errors.csv").exists());

        let contraction = cmd_contraction(&ctx).unwrap();
        assert_eq!(contraction.source, "surrogate");
        assert!(contraction.contractive);
    }

    #[test]
    fn generate_twice_is_byte_identical() {
        let tmp = tempdir().unwrap();
        let config = tiny_linear();
        let path = write_config(tmp.path(), &config);
        let ctx1 =
            RunContext::new(&path, Some(tmp.path().join("a")), false, None).unwrap();
        let ctx2 =
            RunContext::new(&path, Some(tmp.path().join("b")), false, None).unwrap();
        cmd_generate(&ctx1).unwrap();
        cmd_generate(&ctx2).unwrap();
        let a = read_dir_bytes(&ctx1.path(DATASET_DIR));
        let b = read_dir_bytes(&ctx2.path(DATASET_DIR));
        assert!(!a.is_empty());
        assert_eq!(a, b);
    }

    #[test]
    fn contraction_without_model_uses_true_kernel() {
        let tmp = tempdir().unwrap();
        let ctx = context(tmp.path(), &tiny_linear(), None);
        let summary = cmd_contraction(&ctx).unwrap();
        assert_eq!(summary.source, "true_kernel");
        assert!(summary.contractive);
        assert!((summary.inf_norm_w - 0.5).abs() < 1e-12);
    }

    #[test]
    fn miscalibrated_kernel_exits_three() {
        let mut config = tiny_linear();
        let ExperimentSpec::Linear1d(ref mut e) = config.experiment else { unreachable!() };
        // Calibrate to 0.5 on the training grid, then push the spectral norm
        // to 1.2 by scaling λ directly with the calibration block removed.
        // For this kernel the inf row sum lands even higher, so no norm is
        // below one and the pass genuinely expands.
        let grid = e.dataset.grid.build().unwrap();
        e.dataset.kernel.calibrate(&grid, 0.5, NormKind::Spectral).unwrap();
        e.dataset.kernel.lambda *= 2.4;
        e.dataset.kernel.calibration = None;
        e.calibrate = None;
        e.dataset.cross_check = false;
        e.net.kappa = 1.0;

        let tmp = tempdir().unwrap();
        let ctx = context(tmp.path(), &config, None);
        let err = cmd_contraction(&ctx).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        // The diagnostic artifact is still written for inspection.
        assert!(ctx.path(CONTRACTION_FILE).exists());
        let artifact: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(ctx.path(CONTRACTION_FILE)).unwrap()).unwrap();
        let spectral = artifact["report"]["spectral_norm_w"].as_f64().unwrap();
        assert!((spectral - 1.2).abs() < 1e-6);
        assert!(artifact["report"]["inf_norm_w"].as_f64().unwrap() > 1.0);
    }

    #[test]
    fn train_rejects_dataset_from_other_config() {
        let tmp = tempdir().unwrap();
        let config = tiny_linear();
        let ctx = context(tmp.path(), &config, None);
        cmd_generate(&ctx).unwrap();

        // Same out dir, different seed: the stored dataset no longer matches.
        let path = tmp.path().join("config.json");
        let ctx2 = RunContext::new(&path, Some(tmp.path().join("out")), false, Some(999)).unwrap();
        let err = cmd_train(&ctx2).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn nonlinear_pipeline_end_to_end() {
        let tmp = tempdir().unwrap();
        let ctx = context(tmp.path(), &tiny_nonlinear(), None);
        cmd_generate(&ctx).unwrap();
        let train = cmd_train(&ctx).unwrap();
        assert_eq!(train.epochs_run, 8);
        assert!(ctx.path(MODEL_DIR).join(G_MODEL_FILE).exists());
        let eval = cmd_evaluate(&ctx).unwrap();
        assert!(eval.median_rel_l2.is_finite());
        let contraction = cmd_contraction(&ctx).unwrap();
        assert_eq!(contraction.source, "surrogate");
    }

    #[test]
    fn pde_pipeline_end_to_end() {
        let tmp = tempdir().unwrap();
        let ctx = context(tmp.path(), &tiny_pde(), None);
        cmd_generate(&ctx).unwrap();
        assert!(ctx.path(DATASET_DIR).join("manifest.json").exists());

        let train = cmd_train(&ctx).unwrap();
        assert_eq!(train.epochs_run, 2);
        assert!(ctx.path(MODEL_DIR).join(PHI_MODEL_FILE).exists());

        let eval = cmd_evaluate(&ctx).unwrap();
        assert!(eval.median_rel_l2.is_finite());
        assert!(eval.solver_median_rel_l2.unwrap().is_finite());
        assert!(ctx.path("errors_reconstruction.csv").exists());
        assert!(ctx.path("errors_solver.csv").exists());

        let contraction = cmd_contraction(&ctx).unwrap();
        assert_eq!(contraction.source, "trained_phi");
        assert!(contraction.contractive);

        let solve = cmd_solve_pde(&ctx).unwrap();
        assert_eq!(solve.source, "trained_phi");
        assert!(ctx.path(SOLUTION_DIR).join("u.bin").exists());
        assert!(ctx.path(SOLUTION_DIR).join("solution.json").exists());
    }

    #[test]
    fn solve_pde_without_model_uses_reference() {
        let tmp = tempdir().unwrap();
        let ctx = context(tmp.path(), &tiny_pde(), None);
        let solve = cmd_solve_pde(&ctx).unwrap();
        assert_eq!(solve.source, "reference_phi");
        assert!(solve.contractive);
    }

    #[test]
    fn solve_pde_rejects_integral_experiments() {
        let tmp = tempdir().unwrap();
        let ctx = context(tmp.path(), &tiny_linear(), None);
        assert_eq!(cmd_solve_pde(&ctx).unwrap_err().exit_code(), 2);
    }
}
