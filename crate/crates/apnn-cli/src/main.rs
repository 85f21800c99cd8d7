//! Command-line harness: ground-truth generation, training runs, and report
//! emission for the experiment catalog.
//!
//! Output layout (root from `--out`, else `$APNN_OUT`, else `./apnn-out`):
//!
//! ```text
//! <root>/truth/<group>.{csv,json}      cached ground-truth tables
//! <root>/runs/<name>/                  one directory per training run
//!     scenario.json   dataset.{csv,json}   history.csv   checkpoint.json
//!     report.{json,txt}   network.{csv,json}   errors.{csv,json}
//! ```
//!
//! Exit codes: 0 success, 2 usage or configuration, 3 ground-truth solver,
//! 4 dataset construction, 5 training, 6 evaluation, 7 artifact I/O.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};

use apnn::loss::ResidualForm;
use apnn::metrics::{compute_metrics, load_report, render_report, save_report, RunMeta};
use apnn::network::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_SCHEMA_VERSION};
use apnn::physics::ModelSpec;
use apnn::scenario::{
    apply_overrides, build_dataset, catalog, dataset_column_names, find_scenario, generate_truth,
    load_or_generate_truth, load_scenario, save_dataset, save_scenario, Overrides, SamplingMode,
};
use apnn::train::{train, StopReason};

const CODE_USAGE: u8 = 2;
const CODE_SOLVER: u8 = 3;
const CODE_DATASET: u8 = 4;
const CODE_TRAINING: u8 = 5;
const CODE_EVALUATION: u8 = 6;
const CODE_IO: u8 = 7;

#[derive(Parser)]
#[command(
    name = "apnn",
    version,
    about = "Asymptotic-preserving neural-network experiment harness"
)]
struct Cli {
    /// Output root; overrides the APNN_OUT environment variable
    /// (default ./apnn-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// List the scenario catalog.
    List,
    /// Solve a scenario's ground truth and cache it under the output root.
    Generate {
        /// Scenario name (see `list`).
        scenario: String,
    },
    /// Train a scenario end to end and write a run directory.
    Run {
        /// Scenario name (see `list`).
        scenario: String,
        /// Multiply every point count and the epoch budget (importance-mode
        /// data counts and quadrature resolution stay fixed).
        #[arg(long)]
        scale: Option<f64>,
        /// Run seed (dataset draws, validation split, initialization).
        #[arg(long)]
        seed: Option<u64>,
        /// PDE residual formulation.
        #[arg(long, value_enum, default_value_t = FormArg::Ap)]
        residual: FormArg,
        /// Epoch budget (applied after --scale).
        #[arg(long)]
        epochs: Option<usize>,
        /// Truncate measured data to t ≤ T (forecasting window).
        #[arg(long = "t-train")]
        t_train: Option<f64>,
        /// Explicit measured-point count (applied after --scale).
        #[arg(long = "data-points")]
        data_points: Option<usize>,
        /// Print only the run directory path.
        #[arg(long)]
        quiet: bool,
    },
    /// Recompute the report of an existing run directory from its saved
    /// checkpoint (byte-identical for an unchanged run).
    Report {
        /// A directory written by `run`.
        run_dir: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum FormArg {
    Ap,
    Standard,
}

impl From<FormArg> for ResidualForm {
    fn from(f: FormArg) -> Self {
        match f {
            FormArg::Ap => ResidualForm::Ap,
            FormArg::Standard => ResidualForm::Standard,
        }
    }
}

struct Failure {
    code: u8,
    stage: &'static str,
    message: String,
}

fn fail(code: u8, stage: &'static str, err: impl Display) -> Failure {
    Failure {
        code,
        stage,
        message: err.to_string(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let root = cli
        .out
        .clone()
        .or_else(|| std::env::var_os("APNN_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("apnn-out"));
    match dispatch(cli, &root) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error [{}]: {}", f.stage, f.message);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cli: Cli, root: &Path) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::List => {
            list_catalog();
            Ok(())
        }
        Cmd::Generate { scenario } => cmd_generate(&scenario, root),
        Cmd::Run {
            scenario,
            scale,
            seed,
            residual,
            epochs,
            t_train,
            data_points,
            quiet,
        } => cmd_run(
            &scenario,
            Overrides {
                scale,
                seed,
                epochs,
                t_train,
                n_data: data_points,
            },
            residual.into(),
            quiet,
            root,
        ),
        Cmd::Report { run_dir } => cmd_report(&run_dir, root),
    }
}

fn list_catalog() {
    println!(
        "{:<18} {:<9} {:<10} {:>7} {:>9} {:>7}  window",
        "name", "family", "sampling", "N_d", "N_r", "epochs"
    );
    for cfg in catalog() {
        let family = match cfg.model {
            ModelSpec::Gt(_) => "transport",
            ModelSpec::Sir(_) => "epidemic",
        };
        let sampling = match cfg.plan.data_mode {
            SamplingMode::Lattice => "lattice",
            SamplingMode::Importance => "importance",
            SamplingMode::UniformRandom => "uniform",
        };
        println!(
            "{:<18} {:<9} {:<10} {:>7} {:>9} {:>7}  t ≤ {} of {}",
            cfg.name,
            family,
            sampling,
            cfg.plan.n_data,
            cfg.plan.n_residual,
            cfg.train.epochs,
            cfg.plan.t_train,
            cfg.horizon
        );
    }
}

fn cmd_generate(name: &str, root: &Path) -> Result<(), Failure> {
    let cfg = find_scenario(name).map_err(|e| fail(CODE_USAGE, "scenario", e))?;
    let dir = root.join("truth");
    std::fs::create_dir_all(&dir).map_err(|e| fail(CODE_IO, "artifacts", e))?;
    let truth = generate_truth(&cfg.truth_spec()).map_err(|e| fail(CODE_SOLVER, "solver", e))?;
    let stem = dir.join(&cfg.truth_group);
    truth
        .save(&stem)
        .map_err(|e| fail(CODE_IO, "artifacts", e))?;
    println!("{}", stem.with_extension("csv").display());
    Ok(())
}

fn run_dir_for(root: &Path, name: &str, form: ResidualForm, seed: u64) -> PathBuf {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let form = match form {
        ResidualForm::Ap => "ap",
        ResidualForm::Standard => "standard",
    };
    let base = root.join("runs");
    let mut dir = base.join(format!("{name}-{form}-seed{seed}-{secs}"));
    let mut k = 1;
    while dir.exists() {
        k += 1;
        dir = base.join(format!("{name}-{form}-seed{seed}-{secs}-{k}"));
    }
    dir
}

fn cmd_run(
    name: &str,
    overrides: Overrides,
    form: ResidualForm,
    quiet: bool,
    root: &Path,
) -> Result<(), Failure> {
    let mut cfg = find_scenario(name).map_err(|e| fail(CODE_USAGE, "scenario", e))?;
    apply_overrides(&mut cfg, &overrides).map_err(|e| fail(CODE_USAGE, "scenario", e))?;

    if !quiet {
        println!("ground truth for {} …", cfg.truth_group);
    }
    let truth = load_or_generate_truth(&cfg, &root.join("truth"))
        .map_err(|e| fail(CODE_SOLVER, "solver", e))?;

    let built = build_dataset(&cfg, &truth, form).map_err(|e| fail(CODE_DATASET, "dataset", e))?;

    if !quiet {
        println!(
            "training {} [{form:?}] seed {}: {} epochs on {}+{} points …",
            cfg.name,
            cfg.train.seed,
            cfg.train.epochs,
            built.dataset.data.x.len(),
            built.dataset.residual.x.len()
        );
    }
    let started = Instant::now();
    let outcome = train(
        &cfg.model,
        &cfg.arch(),
        &built.dataset,
        &cfg.weights_for(form),
        form,
        &cfg.train,
    )
    .map_err(|e| fail(CODE_TRAINING, "training", e))?;
    let runtime_s = started.elapsed().as_secs_f64();

    let meta = RunMeta {
        scenario: cfg.name.clone(),
        residual_form: form,
        seed: cfg.train.seed,
        scale: overrides.scale.unwrap_or(1.0),
        epochs_run: outcome.epochs_run,
        stop: stop_label(&outcome.stop),
        best_validation: outcome.best_validation,
        runtime_s,
    };
    let evaluation = compute_metrics(&cfg, form, &outcome.params, &truth, meta)
        .map_err(|e| fail(CODE_EVALUATION, "evaluation", e))?;

    // Persist every artifact — including for diverged runs, whose last good
    // state is worth inspecting.
    let dir = run_dir_for(root, name, form, cfg.train.seed);
    let io = |e: &dyn Display| fail(CODE_IO, "artifacts", e);
    std::fs::create_dir_all(&dir).map_err(|e| io(&e))?;
    save_scenario(&cfg, &dir.join("scenario.json")).map_err(|e| io(&e))?;
    save_dataset(
        &dir.join("dataset"),
        &built,
        &dataset_column_names(&cfg.model, form),
    )
    .map_err(|e| io(&e))?;
    outcome
        .history
        .save_csv(&dir.join("history.csv"))
        .map_err(|e| io(&e))?;
    save_checkpoint(
        &dir.join("checkpoint.json"),
        &Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            arch: cfg.arch(),
            params: outcome.params.clone(),
            seed: cfg.train.seed,
            epoch: outcome.epochs_run,
        },
    )
    .map_err(|e| io(&e))?;
    save_report(&evaluation.report, &dir.join("report.json")).map_err(|e| io(&e))?;
    let rendered = render_report(&evaluation.report);
    std::fs::write(dir.join("report.txt"), &rendered).map_err(|e| io(&e))?;
    evaluation
        .predictions
        .save(&dir.join("network"))
        .map_err(|e| io(&e))?;
    evaluation
        .errors
        .save(&dir.join("errors"))
        .map_err(|e| io(&e))?;

    if quiet {
        println!("{}", dir.display());
    } else {
        print!("{rendered}");
        println!("artifacts: {}", dir.display());
    }

    if let StopReason::Diverged { epoch, term } = &outcome.stop {
        return Err(fail(
            CODE_TRAINING,
            "training",
            format!("loss diverged at epoch {epoch} in term `{term}` (last good state saved)"),
        ));
    }
    Ok(())
}

fn stop_label(stop: &StopReason) -> String {
    match stop {
        StopReason::MaxEpochs => "max-epochs".into(),
        StopReason::EarlyStop { epoch } => format!("early-stop@{epoch}"),
        StopReason::Diverged { epoch, term } => format!("diverged@{epoch}:{term}"),
    }
}

fn cmd_report(run_dir: &Path, root: &Path) -> Result<(), Failure> {
    let cfg = load_scenario(&run_dir.join("scenario.json"))
        .map_err(|e| fail(CODE_USAGE, "scenario", e))?;
    let previous =
        load_report(&run_dir.join("report.json")).map_err(|e| fail(CODE_USAGE, "scenario", e))?;
    let ck = load_checkpoint(&run_dir.join("checkpoint.json"))
        .map_err(|e| fail(CODE_EVALUATION, "evaluation", e))?;
    if ck.arch != cfg.arch() {
        return Err(fail(
            CODE_EVALUATION,
            "evaluation",
            "checkpoint architecture does not match the scenario",
        ));
    }
    let truth = load_or_generate_truth(&cfg, &root.join("truth"))
        .map_err(|e| fail(CODE_SOLVER, "solver", e))?;
    let form = previous.meta.residual_form;
    let evaluation = compute_metrics(&cfg, form, &ck.params, &truth, previous.meta)
        .map_err(|e| fail(CODE_EVALUATION, "evaluation", e))?;

    let io = |e: &dyn Display| fail(CODE_IO, "artifacts", e);
    save_report(&evaluation.report, &run_dir.join("report.json")).map_err(|e| io(&e))?;
    let rendered = render_report(&evaluation.report);
    std::fs::write(run_dir.join("report.txt"), &rendered).map_err(|e| io(&e))?;
    evaluation
        .predictions
        .save(&run_dir.join("network"))
        .map_err(|e| io(&e))?;
    evaluation
        .errors
        .save(&run_dir.join("errors"))
        .map_err(|e| io(&e))?;
    print!("{rendered}");
    Ok(())
}
