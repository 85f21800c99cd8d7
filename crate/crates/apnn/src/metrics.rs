//! Post-training evaluation: parameter tables, relative-error maps over the
//! report grid, reproduction-number and infected-mass time series, and the
//! serialized run report.
//!
//! Every metric is computed against the scenario's ground-truth table on its
//! own grid, so a report regenerated from a saved checkpoint is bit-for-bit
//! identical to the one written at training time.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::forward_values_batch;
use crate::loss::ResidualForm;
use crate::network::{validate_params, NetError, NetworkArch, NetworkParams};
use crate::physics::{BetaSpec, GtSource, GtSpec, ModelSpec, Param, SirSpec};
use crate::refsolver::Trajectory;
use crate::scenario::ScenarioConfig;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("invalid network state: {0}")]
    Network(#[from] NetError),
    #[error("evaluation mismatch: {0}")]
    Shape(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("malformed report file: {0}")]
    Format(String),
}

/// One learnable parameter in the report table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub name: String,
    pub truth: f64,
    pub init: f64,
    pub estimate: f64,
    /// |estimate − truth| / |truth|; `None` (rendered "N/A") when the true
    /// value is zero.
    pub rel_err: Option<f64>,
}

/// Relative L² error of one state component over the evaluation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldError {
    pub name: String,
    /// ‖u_NN − u‖ / ‖u‖ over the whole grid.
    pub rel_l2: f64,
    /// Same, restricted to the forecast region t > t_train; `None` when the
    /// run trains on the full horizon.
    pub rel_l2_forecast: Option<f64>,
}

/// A time series carried by both the network and the ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub times: Vec<f64>,
    pub network: Vec<f64>,
    pub truth: Vec<f64>,
}

/// Provenance of a run, recorded verbatim into its report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub scenario: String,
    pub residual_form: ResidualForm,
    pub seed: u64,
    pub scale: f64,
    pub epochs_run: usize,
    pub stop: String,
    pub best_validation: Option<f64>,
    pub runtime_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub meta: RunMeta,
    pub params: Vec<ParamRow>,
    pub fields: Vec<FieldError>,
    /// Effective reproduction number over time (epidemic runs only): the
    /// network series uses the *estimated* rates, the truth series the true
    /// ones.
    pub rt: Option<Series>,
    /// Domain-integrated infected density over time (epidemic runs only).
    pub infected_mass: Option<Series>,
    /// Largest relative drift of the network's population integral from its
    /// t = 0 value (epidemic runs only).
    pub conservation_drift: Option<f64>,
    /// Median |f⁺ − f⁻| over the grid: the kinetic gap the standard-form
    /// transport comparison is expected to collapse in the stiff regime.
    pub kinetic_gap_median: Option<f64>,
}

/// Everything [`compute_metrics`] produces: the report plus two grid tables
/// ready for CSV export (predictions in macroscopic components, and the
/// pointwise relative-error map).
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: Report,
    pub predictions: Trajectory,
    pub errors: Trajectory,
}

/// Network outputs tabulated over `xs × ts`: `fields[f][m][q]`.
pub fn tabulate_network(
    arch: &NetworkArch,
    params: &NetworkParams,
    xs: &[f64],
    ts: &[f64],
) -> Result<Vec<Vec<Vec<f64>>>, MetricsError> {
    validate_params(arch, params)?;
    let nf = arch.output_dim;
    let mut fields = vec![vec![vec![0.0; xs.len()]; ts.len()]; nf];
    let mut tbuf = vec![0.0; xs.len()];
    for (m, &t) in ts.iter().enumerate() {
        tbuf.fill(t);
        let (out, _) = forward_values_batch(arch, params, xs, &tbuf);
        for q in 0..xs.len() {
            for (f, field) in fields.iter_mut().enumerate() {
                field[m][q] = out[[q, f]];
            }
        }
    }
    Ok(fields)
}

/// The model with every learnable parameter pinned to its trained estimate
/// (looked up by name in the network's learnable list; anything missing
/// keeps its initial guess).
pub fn estimated_model(model: &ModelSpec, params: &NetworkParams) -> ModelSpec {
    let resolve = |name: &str, p: Param| -> Param {
        match p {
            Param::Learnable { init, .. } => {
                let v = params
                    .learnable_names
                    .iter()
                    .position(|n| n == name)
                    .map(|i| params.learnable[i])
                    .unwrap_or(init);
                Param::Known(v)
            }
            known => known,
        }
    };
    match *model {
        ModelSpec::Gt(g) => ModelSpec::Gt(GtSpec {
            sigma: resolve("sigma", g.sigma),
            source: g.source.map(|s| GtSource {
                kappa0: resolve("kappa0", s.kappa0),
                kappa1: resolve("kappa1", s.kappa1),
                kappa2: resolve("kappa2", s.kappa2),
            }),
            ..g
        }),
        ModelSpec::Sir(s) => ModelSpec::Sir(SirSpec {
            beta: match s.beta {
                BetaSpec::Constant(b) => BetaSpec::Constant(resolve("beta", b)),
                BetaSpec::Sinusoid { beta0, beta1, zeta } => BetaSpec::Sinusoid {
                    beta0: resolve("beta0", beta0),
                    beta1: resolve("beta1", beta1),
                    zeta: resolve("zeta", zeta),
                },
            },
            gamma: resolve("gamma", s.gamma),
            ..s
        }),
    }
}

/// Inferred-parameter table: truth, initial guess, trained estimate, and
/// relative error per learnable.
pub fn parameter_table(model: &ModelSpec, params: &NetworkParams) -> Vec<ParamRow> {
    let truths = model.learnable_truths();
    let inits = model.learnables();
    truths
        .into_iter()
        .zip(inits)
        .map(|((name, truth), (_, init))| {
            let estimate = params
                .learnable_names
                .iter()
                .position(|n| *n == name)
                .map(|i| params.learnable[i])
                .unwrap_or(init);
            let rel_err = if truth == 0.0 {
                None
            } else {
                Some((estimate - truth).abs() / truth.abs())
            };
            ParamRow {
                name,
                truth,
                init,
                estimate,
                rel_err,
            }
        })
        .collect()
}

/// Effective reproduction number per time level: the ratio of the
/// domain-integrated incidence β(x)·S·I to the domain-integrated recovery
/// γ·I (the uniform node spacing cancels).
pub fn rt_series(spec: &SirSpec, s: &[Vec<f64>], i: &[Vec<f64>], xs: &[f64]) -> Vec<f64> {
    let gamma = spec.gamma.truth();
    s.iter()
        .zip(i)
        .map(|(srow, irow)| {
            let mut num = 0.0;
            let mut den = 0.0;
            for (q, &x) in xs.iter().enumerate() {
                num += spec.beta.truth_at(x) * srow[q] * irow[q];
                den += gamma * irow[q];
            }
            num / den.max(f64::MIN_POSITIVE)
        })
        .collect()
}

/// Rectangle-rule integral of the infected density per time level.
pub fn infected_mass_series(i: &[Vec<f64>], xs: &[f64]) -> Vec<f64> {
    let dq = xs[1] - xs[0];
    i.iter().map(|row| dq * row.iter().sum::<f64>()).collect()
}

/// Largest relative departure of dq·Σ(S+I+R) from its t = 0 value.
fn population_drift(fields: &[Vec<Vec<f64>>], xs: &[f64]) -> f64 {
    let dq = xs[1] - xs[0];
    let total = |m: usize| {
        dq * (0..xs.len())
            .map(|q| fields[0][m][q] + fields[1][m][q] + fields[2][m][q])
            .sum::<f64>()
    };
    let q0 = total(0);
    let scale = if q0.abs() > f64::MIN_POSITIVE {
        q0.abs()
    } else {
        1.0
    };
    (0..fields[0].len())
        .map(|m| (total(m) - q0).abs() / scale)
        .fold(0.0, f64::max)
}

fn rms(rows: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for row in rows {
        for &v in row {
            sum += v * v;
            n += 1;
        }
    }
    (sum / n.max(1) as f64).sqrt()
}

/// ‖a − b‖ / ‖b‖ over the rows with `ts[m] > t_lo` (RMS norms on the grid
/// restricted to that region). Returns `None` when no rows qualify.
pub fn rel_l2_region(a: &[Vec<f64>], b: &[Vec<f64>], ts: &[f64], t_lo: f64) -> Option<f64> {
    let tiny = 1e-12 * ts.last().copied().unwrap_or(1.0).abs().max(1.0);
    let rows: Vec<usize> = (0..ts.len()).filter(|&m| ts[m] > t_lo + tiny).collect();
    if rows.is_empty() {
        return None;
    }
    let mut dsum = 0.0;
    let mut bsum = 0.0;
    for &m in &rows {
        for q in 0..b[m].len() {
            let d = a[m][q] - b[m][q];
            dsum += d * d;
            bsum += b[m][q] * b[m][q];
        }
    }
    Some(if bsum > 0.0 {
        (dsum / bsum).sqrt()
    } else {
        dsum.sqrt()
    })
}

fn median(mut vals: Vec<f64>) -> f64 {
    vals.sort_by(f64::total_cmp);
    let n = vals.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    }
}

/// Evaluate a trained network against its scenario's ground truth.
///
/// Predictions are tabulated on the truth table's own grid; standard-form
/// transport outputs are converted to the macroscopic pair before
/// comparison, and their raw kinetic gap is summarized in the report. The
/// pointwise error map is `e(x,t) = |u_NN − u| / ‖u‖` with `‖u‖` the RMS of
/// the true component over the whole grid (absolute error for an
/// identically zero component), so the full-grid relative L² error is the
/// RMS of the map.
pub fn compute_metrics(
    cfg: &ScenarioConfig,
    form: ResidualForm,
    params: &NetworkParams,
    truth: &Trajectory,
    meta: RunMeta,
) -> Result<Evaluation, MetricsError> {
    let names = cfg.model.field_names();
    if truth.field_names != names {
        return Err(MetricsError::Shape(format!(
            "truth table fields {:?} do not match the model",
            truth.field_names
        )));
    }
    let arch = cfg.arch();
    let raw = tabulate_network(&arch, params, &truth.xs, &truth.ts)?;

    // Macroscopic predictions and, for standard-form runs, the kinetic gap.
    let (preds, kinetic_gap_median) = match (&cfg.model, form) {
        (ModelSpec::Gt(g), ResidualForm::Standard) => {
            let (nt, nx) = (truth.ts.len(), truth.xs.len());
            let mut rho = vec![vec![0.0; nx]; nt];
            let mut j = vec![vec![0.0; nx]; nt];
            let mut gaps = Vec::with_capacity(nt * nx);
            for m in 0..nt {
                for q in 0..nx {
                    let (fp, fm) = (raw[0][m][q], raw[1][m][q]);
                    rho[m][q] = fp + fm;
                    j[m][q] = g.c * (fp - fm) / g.eps;
                    gaps.push((fp - fm).abs());
                }
            }
            (vec![rho, j], Some(median(gaps)))
        }
        _ => (raw, None),
    };

    // Per-component error maps and their summaries.
    let tiny = 1e-12 * cfg.horizon.max(1.0);
    let forecasting = cfg.plan.t_train + tiny < cfg.horizon;
    let mut fields = Vec::with_capacity(names.len());
    let mut emaps = Vec::with_capacity(names.len());
    for (f, &name) in names.iter().enumerate() {
        let denom = rms(&truth.fields[f]);
        let scale = if denom > 0.0 { denom } else { 1.0 };
        let mut emap = vec![vec![0.0; truth.xs.len()]; truth.ts.len()];
        for m in 0..truth.ts.len() {
            for q in 0..truth.xs.len() {
                emap[m][q] = (preds[f][m][q] - truth.fields[f][m][q]).abs() / scale;
            }
        }
        // Full-grid relative error is the RMS of the map by construction.
        let rel_l2 = rms(&emap);
        let rel_l2_forecast = if forecasting {
            rel_l2_region(&preds[f], &truth.fields[f], &truth.ts, cfg.plan.t_train)
        } else {
            None
        };
        fields.push(FieldError {
            name: name.into(),
            rel_l2,
            rel_l2_forecast,
        });
        emaps.push(emap);
    }

    // Epidemic summaries.
    let (rt, infected_mass, conservation_drift) = match cfg.model {
        ModelSpec::Sir(_) => {
            let est = match estimated_model(&cfg.model, params) {
                ModelSpec::Sir(s) => s,
                _ => unreachable!(),
            };
            let tru = match cfg.truth_spec().model {
                ModelSpec::Sir(s) => s,
                _ => unreachable!(),
            };
            let rt = Series {
                times: truth.ts.clone(),
                network: rt_series(&est, &preds[0], &preds[1], &truth.xs),
                truth: rt_series(&tru, &truth.fields[0], &truth.fields[1], &truth.xs),
            };
            let mass = Series {
                times: truth.ts.clone(),
                network: infected_mass_series(&preds[1], &truth.xs),
                truth: infected_mass_series(&truth.fields[1], &truth.xs),
            };
            let drift = population_drift(&preds, &truth.xs);
            (Some(rt), Some(mass), Some(drift))
        }
        ModelSpec::Gt(_) => (None, None, None),
    };

    let report = Report {
        schema_version: REPORT_SCHEMA_VERSION,
        meta,
        params: parameter_table(&cfg.model, params),
        fields,
        rt,
        infected_mass,
        conservation_drift,
        kinetic_gap_median,
    };

    let table = |scheme: &str, fields: Vec<Vec<Vec<f64>>>, prefix: &str| Trajectory {
        schema_version: truth.schema_version,
        field_names: names.iter().map(|n| format!("{prefix}{n}")).collect(),
        xs: truth.xs.clone(),
        ts: truth.ts.clone(),
        fields,
        meta: crate::refsolver::SolverMeta {
            scheme: scheme.into(),
            ..truth.meta.clone()
        },
        tag: None,
    };
    Ok(Evaluation {
        report,
        predictions: table("network-evaluation", preds, ""),
        errors: table("relative-error-map", emaps, "e_"),
    })
}

/// Human-readable rendering of a report (the JSON file is the machine form).
pub fn render_report(r: &Report) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "scenario {} [{:?}] seed {} scale {} — {} epochs, stop: {}, {:.1}s",
        r.meta.scenario,
        r.meta.residual_form,
        r.meta.seed,
        r.meta.scale,
        r.meta.epochs_run,
        r.meta.stop,
        r.meta.runtime_s
    );
    if let Some(v) = r.meta.best_validation {
        let _ = writeln!(out, "best validation loss: {v:.6e}");
    }
    if !r.params.is_empty() {
        let _ = writeln!(
            out,
            "parameter      truth        guess        estimate     rel. error"
        );
        for p in &r.params {
            let err = match p.rel_err {
                Some(e) => format!("{e:.4e}"),
                None => "N/A".into(),
            };
            let _ = writeln!(
                out,
                "{:<14} {:<12.6} {:<12.6} {:<12.6} {}",
                p.name, p.truth, p.init, p.estimate, err
            );
        }
    }
    let _ = writeln!(
        out,
        "field errors (relative L2, full grid / forecast region):"
    );
    for f in &r.fields {
        match f.rel_l2_forecast {
            Some(fc) => {
                let _ = writeln!(out, "  {:<6} {:.4e} / {:.4e}", f.name, f.rel_l2, fc);
            }
            None => {
                let _ = writeln!(out, "  {:<6} {:.4e}", f.name, f.rel_l2);
            }
        }
    }
    if let Some(d) = r.conservation_drift {
        let _ = writeln!(out, "population drift (network): {d:.4e}");
    }
    if let Some(g) = r.kinetic_gap_median {
        let _ = writeln!(out, "median kinetic gap |f+ - f-|: {g:.4e}");
    }
    if let Some(rt) = &r.rt {
        let _ = writeln!(
            out,
            "R_t(0): network {:.4}, truth {:.4}; final: network {:.4}, truth {:.4}",
            rt.network[0],
            rt.truth[0],
            rt.network.last().unwrap(),
            rt.truth.last().unwrap()
        );
    }
    out
}

pub fn save_report(report: &Report, path: &Path) -> Result<(), MetricsError> {
    fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<Report, MetricsError> {
    let r: Report = serde_json::from_str(&fs::read_to_string(path)?)?;
    if r.schema_version != REPORT_SCHEMA_VERSION {
        return Err(MetricsError::Format(format!(
            "unsupported report schema version {}",
            r.schema_version
        )));
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{LossWeights, SirWeights};
    use crate::network::init_params;
    use crate::refsolver::{CflConfig, SolverMeta};
    use crate::scenario::{
        find_scenario, generate_truth, DatasetPlan, SamplingMode, SCENARIO_SCHEMA_VERSION,
    };
    use crate::train::TrainConfig;
    use std::sync::OnceLock;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!(
            (a - b).abs() <= tol,
            "left {a}, right {b}, diff {}, tol {tol}",
            (a - b).abs()
        );
    }

    fn meta_for(name: &str, form: ResidualForm) -> RunMeta {
        RunMeta {
            scenario: name.into(),
            residual_form: form,
            seed: 1,
            scale: 1.0,
            epochs_run: 0,
            stop: "test".into(),
            best_validation: None,
            runtime_s: 0.0,
        }
    }

    /// A small epidemic scenario whose learnable β has truth 5, guess 3.
    fn small_sir_cfg() -> ScenarioConfig {
        ScenarioConfig {
            schema_version: SCENARIO_SCHEMA_VERSION,
            name: "sir-desk".into(),
            truth_group: "sir-desk".into(),
            model: ModelSpec::Sir(SirSpec {
                tau: [1.0; 3],
                lambda: [1.0; 3],
                beta: BetaSpec::Constant(Param::Learnable {
                    truth: 5.0,
                    init: 3.0,
                }),
                gamma: Param::Known(2.0),
            }),
            ic: crate::physics::IcSpec::SirHotspots {
                bumps: vec![(0.01, 5.0)],
            },
            domain: (0.0, 20.0),
            horizon: 2.0,
            alpha: 1.0,
            plan: DatasetPlan {
                n_data: 10,
                n_residual: 10,
                n_boundary: 4,
                n_conservation: 2,
                n_quadrature: 8,
                data_mode: SamplingMode::UniformRandom,
                t_train: 2.0,
            },
            weights: LossWeights::Sir(SirWeights {
                d: [1.0; 3],
                b: [1.0; 6],
                r: [1.0; 6],
                c: 1.0,
            }),
            train: TrainConfig::default(),
        }
    }

    fn grid_table(
        names: &[&str],
        xs: Vec<f64>,
        ts: Vec<f64>,
        fields: Vec<Vec<Vec<f64>>>,
    ) -> Trajectory {
        Trajectory {
            schema_version: 1,
            field_names: names.iter().map(|s| s.to_string()).collect(),
            xs,
            ts,
            fields,
            meta: SolverMeta {
                scheme: "test".into(),
                cfl: CflConfig::default(),
                n_cells: 8,
                dt_nominal: 1.0,
                steps: 0,
            },
            tag: None,
        }
    }

    #[test]
    fn a_network_identical_to_the_truth_reports_zero_errors() {
        let cfg = small_sir_cfg();
        let arch = cfg.arch();
        let mut params = init_params(&arch, 3, &cfg.model.learnables()).unwrap();
        // Pin the learnable to its true value so the parameter row is exact.
        params.learnable[0] = 5.0;

        let xs: Vec<f64> = (0..16).map(|q| q as f64 * 20.0 / 16.0).collect();
        let ts: Vec<f64> = (0..5).map(|m| m as f64 * 0.5).collect();
        let fields = tabulate_network(&arch, &params, &xs, &ts).unwrap();
        let truth = grid_table(&["S", "I", "R", "J_S", "J_I", "J_R"], xs, ts, fields);

        let ev = compute_metrics(
            &cfg,
            ResidualForm::Ap,
            &params,
            &truth,
            meta_for("sir-desk", ResidualForm::Ap),
        )
        .unwrap();
        for f in &ev.report.fields {
            assert_eq!(f.rel_l2, 0.0, "{}", f.name);
            assert_eq!(f.rel_l2_forecast, None);
        }
        for row in ev.errors.fields.iter().flatten().flatten() {
            assert_eq!(*row, 0.0);
        }
        assert_eq!(ev.predictions.fields, truth.fields);
        let p = &ev.report.params[0];
        assert_eq!(
            (p.name.as_str(), p.truth, p.init, p.estimate),
            ("beta", 5.0, 3.0, 5.0)
        );
        assert_eq!(p.rel_err, Some(0.0));
        let rt = ev.report.rt.as_ref().unwrap();
        assert_eq!(rt.network, rt.truth);
        let mass = ev.report.infected_mass.as_ref().unwrap();
        assert_eq!(mass.network, mass.truth);
    }

    #[test]
    fn error_maps_normalize_by_the_true_field_norm() {
        // Constant network output 2.5 against truth 2.5 before t_train and
        // 2.0 after: the map is 0 then 0.5/denominator, the forecast-region
        // error is the clean 0.25.
        let mut cfg = small_sir_cfg();
        cfg.model = ModelSpec::Gt(GtSpec {
            eps: 1.0,
            c: 1.0,
            sigma: Param::Known(4.0),
            source: None,
        });
        cfg.ic = crate::physics::IcSpec::GtCosine {
            mean: 1.0,
            amp: 0.0,
            k: 1.0,
        };
        cfg.domain = (0.0, 2.0);
        cfg.horizon = 2.0;
        cfg.plan.t_train = 1.0;
        cfg.plan.n_conservation = 0;

        // A zeroed scenario network with only the output biases set produces
        // the constant (2.5, 2.5).
        let sarch = cfg.arch();
        let mut sparams = init_params(&sarch, 0, &[]).unwrap();
        for w in &mut sparams.weights {
            w.fill(0.0);
        }
        for b in &mut sparams.biases {
            b.fill(0.0);
        }
        let last = sparams.biases.len() - 1;
        sparams.biases[last][0] = 2.5;
        sparams.biases[last][1] = 2.5;

        let xs: Vec<f64> = (0..4).map(|q| q as f64 * 0.5).collect();
        let ts = vec![0.0, 1.0, 2.0];
        let mk_row = |v: f64| vec![v; 4];
        let truth_field = vec![mk_row(2.5), mk_row(2.5), mk_row(2.0)];
        let truth = grid_table(
            &["rho", "j"],
            xs,
            ts,
            vec![truth_field.clone(), truth_field],
        );

        let ev = compute_metrics(
            &cfg,
            ResidualForm::Ap,
            &sparams,
            &truth,
            meta_for("gt-desk", ResidualForm::Ap),
        )
        .unwrap();
        let denom = ((2.5 * 2.5 * 8.0 + 2.0 * 2.0 * 4.0) / 12.0_f64).sqrt();
        for f in &ev.report.fields {
            approx(f.rel_l2, (0.5 * 0.5 / 3.0_f64).sqrt() / denom, 1e-12);
            approx(f.rel_l2_forecast.unwrap(), 0.5 / 2.0, 1e-12);
        }
        // The map itself: zero where the truth matches, 0.5/denom after.
        approx(ev.errors.fields[0][0][0], 0.0, 0.0);
        approx(ev.errors.fields[0][2][1], 0.5 / denom, 1e-12);
        assert_eq!(ev.errors.field_names[0], "e_rho");
        assert!(ev.report.rt.is_none() && ev.report.conservation_drift.is_none());
    }

    #[test]
    fn zero_truth_renders_na_and_nonzero_gets_a_ratio() {
        let cfg = find_scenario("test2a").unwrap();
        let arch = cfg.arch();
        let mut params = init_params(&arch, 1, &cfg.model.learnables()).unwrap();
        assert_eq!(params.learnable_names, ["kappa0", "kappa1", "kappa2"]);
        params.learnable = vec![0.3, 3.3, 4.0];
        let rows = parameter_table(&cfg.model, &params);
        assert_eq!(rows[0].rel_err, None); // truth κ0 = 0
        approx(rows[1].rel_err.unwrap(), 0.1, 1e-12);
        assert_eq!(rows[2].rel_err, Some(0.0));

        let report = Report {
            schema_version: REPORT_SCHEMA_VERSION,
            meta: meta_for("test2a", ResidualForm::Ap),
            params: rows,
            fields: vec![],
            rt: None,
            infected_mass: None,
            conservation_drift: None,
            kinetic_gap_median: None,
        };
        let text = render_report(&report);
        assert!(text.contains("N/A"), "{text}");
        assert!(text.contains("kappa1"));
    }

    #[test]
    fn reproduction_number_follows_the_estimated_rates() {
        // One spatial profile, constant in time: S = 0.8, I = 0.1. With
        // constant rates R_t = (β/γ)·S exactly.
        let spec = SirSpec {
            tau: [1.0; 3],
            lambda: [1.0; 3],
            beta: BetaSpec::Constant(Param::Known(6.0)),
            gamma: Param::Known(2.0),
        };
        let xs: Vec<f64> = (0..10).map(|q| q as f64).collect();
        let s = vec![vec![0.8; 10]; 3];
        let i = vec![vec![0.1; 10]; 3];
        let rt = rt_series(&spec, &s, &i, &xs);
        for v in rt {
            approx(v, 2.4, 1e-12);
        }
        // Sinusoidal β: R_t = Σβ(x)SI/ΣγI with the profile averaged over
        // the nodes.
        let spec = SirSpec {
            beta: BetaSpec::Sinusoid {
                beta0: Param::Known(6.0),
                beta1: Param::Known(1.0),
                zeta: Param::Known(0.5),
            },
            ..spec
        };
        let rt = rt_series(&spec, &s, &i, &xs);
        let mean_beta: f64 = xs
            .iter()
            .map(|&x| 6.0 + (0.5 * std::f64::consts::PI * x).sin())
            .sum::<f64>()
            / 10.0;
        approx(rt[0], mean_beta * 0.8 / 2.0, 1e-12);

        let mass = infected_mass_series(&i, &xs);
        approx(mass[0], 1.0, 1e-12); // dq = 1, Σ I = 1

        // The estimated model pins learnables to the trained values.
        let cfg = small_sir_cfg();
        let arch = cfg.arch();
        let mut params = init_params(&arch, 0, &cfg.model.learnables()).unwrap();
        params.learnable[0] = 4.5;
        match estimated_model(&cfg.model, &params) {
            ModelSpec::Sir(s) => assert_eq!(s.beta, BetaSpec::Constant(Param::Known(4.5))),
            _ => unreachable!(),
        }
    }

    #[test]
    fn initial_reproduction_number_from_the_solved_truth_is_two() {
        static TRUTH: OnceLock<Trajectory> = OnceLock::new();
        let cfg = find_scenario("test3a-inference").unwrap();
        let truth = TRUTH.get_or_init(|| generate_truth(&cfg.truth_spec()).unwrap());
        let spec = match cfg.truth_spec().model {
            ModelSpec::Sir(s) => s,
            _ => unreachable!(),
        };
        let rt = rt_series(&spec, &truth.fields[0], &truth.fields[1], &truth.xs);
        assert!((rt[0] - 2.0).abs() < 0.015, "R_t(0) = {}", rt[0]);
        // Infected mass at t = 0 is the analytic Gaussian total
        // (0.01 + 1e-4)·√π.
        let mass = infected_mass_series(&truth.fields[1], &truth.xs);
        approx(mass[0], 0.0101 * std::f64::consts::PI.sqrt(), 1e-5);
    }

    #[test]
    fn standard_runs_report_the_kinetic_gap() {
        let cfg = find_scenario("test1-inverse").unwrap();
        let arch = cfg.arch();
        let mut params = init_params(&arch, 5, &cfg.model.learnables()).unwrap();
        // Zero network: f⁺ = f⁻ = 0 everywhere → gap exactly 0, ρ = j = 0.
        for w in &mut params.weights {
            w.fill(0.0);
        }
        for b in &mut params.biases {
            b.fill(0.0);
        }
        let xs: Vec<f64> = (0..6).map(|q| -1.0 + q as f64 / 3.0).collect();
        let ts = vec![0.0, 0.05, 0.1];
        let truth = grid_table(
            &["rho", "j"],
            xs,
            ts,
            vec![vec![vec![1.0; 6]; 3], vec![vec![0.0; 6]; 3]],
        );
        let ev = compute_metrics(
            &cfg,
            ResidualForm::Standard,
            &params,
            &truth,
            meta_for("test1-inverse", ResidualForm::Standard),
        )
        .unwrap();
        assert_eq!(ev.report.kinetic_gap_median, Some(0.0));
        // Predictions are reported in macroscopic components.
        assert_eq!(ev.predictions.field_names, ["rho", "j"]);
        assert_eq!(ev.report.fields[0].rel_l2, 1.0); // |0 − 1|/1
                                                     // An AP run has no kinetic-gap summary.
        let ev = compute_metrics(
            &cfg,
            ResidualForm::Ap,
            &params,
            &truth,
            meta_for("test1-inverse", ResidualForm::Ap),
        )
        .unwrap();
        assert_eq!(ev.report.kinetic_gap_median, None);
    }

    #[test]
    fn report_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let report = Report {
            schema_version: REPORT_SCHEMA_VERSION,
            meta: meta_for("test1-inverse", ResidualForm::Ap),
            params: vec![ParamRow {
                name: "sigma".into(),
                truth: 4.0,
                init: 2.0,
                estimate: 3.98,
                rel_err: Some(0.005),
            }],
            fields: vec![FieldError {
                name: "rho".into(),
                rel_l2: 1e-3,
                rel_l2_forecast: Some(2e-3),
            }],
            rt: Some(Series {
                times: vec![0.0, 1.0],
                network: vec![2.0, 1.5],
                truth: vec![2.0, 1.4],
            }),
            infected_mass: None,
            conservation_drift: Some(1e-6),
            kinetic_gap_median: None,
        };
        let path = dir.path().join("report.json");
        save_report(&report, &path).unwrap();
        assert_eq!(load_report(&path).unwrap(), report);

        let mut bad = report;
        bad.schema_version = 9;
        save_report(&bad, &path).unwrap();
        assert!(matches!(load_report(&path), Err(MetricsError::Format(_))));
    }

    #[test]
    fn median_handles_even_and_odd_counts() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
