//! Scenario catalog and dataset construction.
//!
//! A [`ScenarioConfig`] bundles everything a training run needs: the PDE
//! model with its learnable parameters and initial guesses, the space-time
//! box, analytic initial data, a dataset plan (point counts, sampling mode,
//! training horizon), loss weights, and optimizer settings. [`catalog`]
//! returns the eleven named configurations used by the experiment harness;
//! [`build_dataset`] realizes a plan against a solved ground-truth table.
//!
//! Every random draw comes from `ChaCha8` seeded as `run_seed ^ STREAM`,
//! with a distinct stream tag per point family, so datasets are bit-for-bit
//! reproducible across machines from `(scenario, seed)` alone.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss::{
    BoundarySet, ConservationSet, DataSet, Dataset, GtWeights, LossWeights, ResidualForm,
    ResidualSet, SirWeights,
};
use crate::network::{Activation, Embedding, NetworkArch};
use crate::physics::{
    kinetic_from_macro, BetaSpec, GtSource, GtSpec, IcSpec, ModelSpec, Param, SirSpec,
};
use crate::refsolver::{
    generate_ground_truth, CflConfig, Grid1D, ReportSpec, SolveError, Trajectory,
};
use crate::train::{validation_indices, TrainConfig, DATA_SPLIT_STREAM, RESIDUAL_SPLIT_STREAM};

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;
pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// Reference-solver resolution used for every catalog ground truth.
pub const TRUTH_CELLS: usize = 400;

/// Stream tag for measured-data point draws (importance and uniform modes).
const DATA_STREAM: u64 = 0x243f6a8885a308d3;
/// Stream tag for residual collocation draws.
const RESIDUAL_STREAM: u64 = 0x13198a2e03707344;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("invalid scenario configuration: {0}")]
    Config(String),
    #[error("solver error: {0}")]
    Solver(#[from] SolveError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("malformed dataset file: {0}")]
    Format(String),
}

/// How measured data points are placed over the space-time box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Uniform lattice: `n_data = nx·nt` with `nx` the largest divisor of
    /// `n_data` not exceeding the truth table's node count, x uniform over
    /// the periodic domain (right endpoint excluded), t uniform over
    /// `[0, t_train]` inclusive.
    Lattice,
    /// Random table nodes drawn with probability proportional to the
    /// infected density (with replacement, restricted to `t ≤ t_train`).
    Importance,
    /// Independent uniform draws over `[a, b) × [0, t_train)`.
    UniformRandom,
}

/// Point counts and sampling mode for one training dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetPlan {
    pub n_data: usize,
    pub n_residual: usize,
    pub n_boundary: usize,
    /// Time levels of the total-population constraint; 0 disables it.
    pub n_conservation: usize,
    /// Quadrature nodes per constraint time level.
    pub n_quadrature: usize,
    pub data_mode: SamplingMode,
    /// Measured data are restricted to `t ≤ t_train`; equal to the horizon
    /// for inference runs, smaller for forecasting. Residual points always
    /// span the full horizon.
    pub t_train: f64,
}

/// One named experiment: model + domain + initial data + dataset plan +
/// loss weights + optimizer settings. Learnable parameters carry their
/// initial guesses inside [`Param::Learnable`], so a valid config cannot
/// lack one by construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub name: String,
    /// Scenarios sharing a ground-truth table (e.g. the inference and
    /// forecasting variants of one test) share this key; the truth cache
    /// stores one table per group.
    pub truth_group: String,
    pub model: ModelSpec,
    pub ic: IcSpec,
    pub domain: (f64, f64),
    pub horizon: f64,
    /// Winding number of the periodic input embedding.
    pub alpha: f64,
    pub plan: DatasetPlan,
    pub weights: LossWeights,
    pub train: TrainConfig,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let err = |m: &str| Err(ScenarioError::Config(format!("{}: {m}", self.name)));
        self.model
            .validate()
            .map_err(|e| ScenarioError::Config(format!("{}: {e}", self.name)))?;
        if !(self.domain.1 > self.domain.0) {
            return err("domain must satisfy a < b");
        }
        if !(self.horizon > 0.0) {
            return err("horizon must be positive");
        }
        if !(self.alpha > 0.0) {
            return err("embedding alpha must be positive");
        }
        if self.plan.n_data == 0 || self.plan.n_residual == 0 {
            return err("n_data and n_residual must be at least 1");
        }
        if !(self.plan.t_train > 0.0) || self.plan.t_train > self.horizon {
            return err("t_train must lie in (0, horizon]");
        }
        if self.plan.n_conservation > 0 {
            if !matches!(self.model, ModelSpec::Sir(_)) {
                return err("the conservation constraint applies to the epidemic model only");
            }
            if self.plan.n_quadrature < 2 {
                return err("the conservation constraint needs at least 2 quadrature nodes");
            }
        }
        if self.plan.data_mode == SamplingMode::Importance
            && !matches!(self.model, ModelSpec::Sir(_))
        {
            return err("importance sampling requires an infected-density field");
        }
        self.weights
            .validate()
            .map_err(|e| ScenarioError::Config(format!("{}: {e}", self.name)))?;
        self.train
            .validate()
            .map_err(|e| ScenarioError::Config(format!("{}: {e}", self.name)))?;
        Ok(())
    }

    /// Network architecture for this scenario: 8 affine layers of width 32,
    /// sinusoidal activation for the transport tests and tanh for the
    /// epidemic tests, periodic spatial embedding, time rescaled by the
    /// horizon.
    pub fn arch(&self) -> NetworkArch {
        NetworkArch {
            depth: 8,
            width: 32,
            output_dim: self.model.n_fields(),
            activation: match self.model {
                ModelSpec::Gt(_) => Activation::Sin,
                ModelSpec::Sir(_) => Activation::Tanh,
            },
            embedding: Some(Embedding {
                alpha: self.alpha,
                domain_len: self.domain.1 - self.domain.0,
            }),
            time_rescale: self.horizon,
            omega0: 1.0,
        }
    }

    /// Loss weights for the requested residual form. The standard comparison
    /// observes both kinetic components with equal weight (the larger of the
    /// two macroscopic data weights; the catalog transport tests measure
    /// only the density, so both become its weight).
    pub fn weights_for(&self, form: ResidualForm) -> LossWeights {
        match (form, self.weights) {
            (ResidualForm::Standard, LossWeights::Gt(w)) => {
                let d = w.d_rho.max(w.d_j);
                LossWeights::Gt(GtWeights {
                    d_rho: d,
                    d_j: d,
                    ..w
                })
            }
            (_, w) => w,
        }
    }

    /// Fingerprint of the ground truth this scenario trains against.
    /// Learnable parameters are canonicalized to their true values so the
    /// inference and forecasting variants of one test share a table.
    pub fn truth_spec(&self) -> TruthSpec {
        TruthSpec {
            model: canonical_model(&self.model),
            ic: self.ic.clone(),
            domain: self.domain,
            horizon: self.horizon,
            n_cells: TRUTH_CELLS,
        }
    }
}

/// Everything the reference solver needs to manufacture a ground truth;
/// serialized into [`Trajectory::tag`] so cached tables are validated
/// against the scenario that requests them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthSpec {
    pub model: ModelSpec,
    pub ic: IcSpec,
    pub domain: (f64, f64),
    pub horizon: f64,
    pub n_cells: usize,
}

/// The same model with every learnable parameter replaced by its true value.
fn canonical_model(model: &ModelSpec) -> ModelSpec {
    let known = |p: Param| Param::Known(p.truth());
    match *model {
        ModelSpec::Gt(g) => ModelSpec::Gt(GtSpec {
            sigma: known(g.sigma),
            source: g.source.map(|s| GtSource {
                kappa0: known(s.kappa0),
                kappa1: known(s.kappa1),
                kappa2: known(s.kappa2),
            }),
            ..g
        }),
        ModelSpec::Sir(s) => ModelSpec::Sir(SirSpec {
            beta: match s.beta {
                BetaSpec::Constant(b) => BetaSpec::Constant(known(b)),
                BetaSpec::Sinusoid { beta0, beta1, zeta } => BetaSpec::Sinusoid {
                    beta0: known(beta0),
                    beta1: known(beta1),
                    zeta: known(zeta),
                },
            },
            gamma: known(s.gamma),
            ..s
        }),
    }
}

/// Solve the reference model on a 400-cell grid and tabulate it on the
/// report grid, stamping the table with the serialized [`TruthSpec`].
pub fn generate_truth(spec: &TruthSpec) -> Result<Trajectory, ScenarioError> {
    let grid = Grid1D::new(spec.domain.0, spec.domain.1, spec.n_cells)?;
    let mut tr = generate_ground_truth(
        &spec.model,
        &spec.ic,
        &grid,
        spec.horizon,
        &CflConfig::default(),
        &ReportSpec::default(),
    )?;
    tr.tag = Some(serde_json::to_string(spec)?);
    Ok(tr)
}

/// Load the scenario's cached ground truth from `dir`, or solve and cache
/// it. A cached table is used only when its tag matches the scenario's
/// current [`TruthSpec`]; anything else is regenerated.
pub fn load_or_generate_truth(
    cfg: &ScenarioConfig,
    dir: &Path,
) -> Result<Trajectory, ScenarioError> {
    fs::create_dir_all(dir)?;
    let spec = cfg.truth_spec();
    let tag = serde_json::to_string(&spec)?;
    let stem = dir.join(&cfg.truth_group);
    if stem.with_extension("json").exists() {
        if let Ok(tr) = Trajectory::load(&stem) {
            if tr.tag.as_deref() == Some(tag.as_str()) {
                return Ok(tr);
            }
        }
    }
    let tr = generate_truth(&spec)?;
    tr.save(&stem)?;
    Ok(tr)
}

/// Command-line adjustments applied on top of a catalog entry.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Overrides {
    /// Multiplies every point count and the epoch budget. Importance-sampled
    /// data counts are exempt (their sparsity is the point of the test), as
    /// is the quadrature node count (a resolution, not a workload).
    pub scale: Option<f64>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub t_train: Option<f64>,
    /// Explicit data count; applied after `scale`.
    pub n_data: Option<usize>,
}

fn scale_count(n: usize, s: f64) -> usize {
    if n == 0 {
        0
    } else {
        ((n as f64 * s).round() as usize).max(1)
    }
}

pub fn apply_overrides(cfg: &mut ScenarioConfig, ov: &Overrides) -> Result<(), ScenarioError> {
    if let Some(s) = ov.scale {
        if !(s > 0.0) || !s.is_finite() {
            return Err(ScenarioError::Config("scale must be positive".into()));
        }
        if cfg.plan.data_mode != SamplingMode::Importance {
            cfg.plan.n_data = scale_count(cfg.plan.n_data, s);
        }
        cfg.plan.n_residual = scale_count(cfg.plan.n_residual, s);
        cfg.plan.n_boundary = scale_count(cfg.plan.n_boundary, s);
        cfg.plan.n_conservation = scale_count(cfg.plan.n_conservation, s);
        cfg.train.epochs = scale_count(cfg.train.epochs, s);
    }
    if let Some(seed) = ov.seed {
        cfg.train.seed = seed;
    }
    if let Some(epochs) = ov.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(tt) = ov.t_train {
        cfg.plan.t_train = tt;
    }
    if let Some(nd) = ov.n_data {
        cfg.plan.n_data = nd;
    }
    cfg.validate()
}

/// The named experiment catalog. Counts, weights, learning rates and epoch
/// budgets follow the published test suite; `*-forecast` variants treat the
/// model parameters as known and truncate the measured data to `t_train`.
pub fn catalog() -> Vec<ScenarioConfig> {
    let gt_weights = LossWeights::Gt(GtWeights {
        d_rho: 100.0,
        d_j: 0.0,
        b_rho: 1.0,
        b_j: 1.0,
        r_rho: 1.0,
        r_j: 1.0,
    });
    let train = |lr: f64, epochs: usize| TrainConfig {
        learning_rate: lr,
        epochs,
        seed: 1,
        ..TrainConfig::default()
    };
    let lattice = |n: usize, nb: usize, t_train: f64| DatasetPlan {
        n_data: n,
        n_residual: n,
        n_boundary: nb,
        n_conservation: 0,
        n_quadrature: 0,
        data_mode: SamplingMode::Lattice,
        t_train,
    };

    let mut list = Vec::new();

    // Transport inverse problem: recover the relaxation rate from density
    // measurements in the diffusive regime.
    list.push(ScenarioConfig {
        schema_version: SCENARIO_SCHEMA_VERSION,
        name: "test1-inverse".into(),
        truth_group: "test1".into(),
        model: ModelSpec::Gt(GtSpec {
            eps: 1e-4,
            c: 1.0,
            sigma: Param::Learnable {
                truth: 4.0,
                init: 2.0,
            },
            source: None,
        }),
        ic: IcSpec::GtCosine {
            mean: 6.0,
            amp: 3.0,
            k: 3.0,
        },
        domain: (-1.0, 1.0),
        horizon: 0.1,
        alpha: 3.0,
        plan: lattice(24000, 200, 0.1),
        weights: gt_weights,
        train: train(1e-2, 20000),
    });

    // Transport with a sinusoidal source: recover the three source
    // coefficients; diffusive and kinetic regimes.
    let gt_source_model = |eps: f64| {
        ModelSpec::Gt(GtSpec {
            eps,
            c: 1.0,
            sigma: Param::Known(1.0),
            source: Some(GtSource {
                kappa0: Param::Learnable {
                    truth: 0.0,
                    init: 0.5,
                },
                kappa1: Param::Learnable {
                    truth: 3.0,
                    init: 2.0,
                },
                kappa2: Param::Learnable {
                    truth: 4.0,
                    init: 3.0,
                },
            }),
        })
    };
    let gauss = IcSpec::GtGaussian {
        base: 1.0,
        amp: 0.5,
        rate: 10.0,
    };
    list.push(ScenarioConfig {
        schema_version: SCENARIO_SCHEMA_VERSION,
        name: "test2a".into(),
        truth_group: "test2a".into(),
        model: gt_source_model(1e-5),
        ic: gauss.clone(),
        domain: (-1.0, 1.0),
        horizon: 0.1,
        alpha: 1.0,
        plan: lattice(12000, 200, 0.1),
        weights: gt_weights,
        train: train(1e-2, 40000),
    });
    list.push(ScenarioConfig {
        schema_version: SCENARIO_SCHEMA_VERSION,
        name: "test2b".into(),
        truth_group: "test2b".into(),
        model: gt_source_model(1.0),
        ic: gauss,
        domain: (-1.0, 1.0),
        horizon: 0.5,
        alpha: 1.0,
        plan: lattice(16800, 200, 0.5),
        weights: gt_weights,
        train: train(1e-2, 12000),
    });

    // Epidemic with constant rates: two hot-spots, parabolic (a) and
    // hyperbolic (b) regimes; sparse importance-sampled inference and
    // truncated-horizon forecasting.
    let sir3 = |lambda2: f64, tau: f64, learn: bool| {
        let param = |truth: f64, init: f64| {
            if learn {
                Param::Learnable { truth, init }
            } else {
                Param::Known(truth)
            }
        };
        ModelSpec::Sir(SirSpec {
            tau: [tau; 3],
            lambda: [lambda2.sqrt(); 3],
            beta: BetaSpec::Constant(param(12.0, 8.0)),
            gamma: param(6.0, 3.0),
        })
    };
    let two_spots = IcSpec::SirHotspots {
        bumps: vec![(0.01, 5.0), (1e-4, 15.0)],
    };
    let w3 = |r_scale: f64| {
        LossWeights::Sir(SirWeights {
            d: [1.0, 100.0, 10.0],
            b: [1.0, 10.0, 1.0, 0.0, 0.0, 0.0],
            r: [1.0, 10.0 * r_scale, r_scale, 1.0, 10.0 * r_scale, r_scale],
            c: 1.0,
        })
    };
    let sir_plan = |n_data, n_residual, n_cons, mode, t_train| DatasetPlan {
        n_data,
        n_residual,
        n_boundary: 200,
        n_conservation: n_cons,
        n_quadrature: 200,
        data_mode: mode,
        t_train,
    };
    list.push(ScenarioConfig {
        schema_version: SCENARIO_SCHEMA_VERSION,
        name: "test3a-inference".into(),
        truth_group: "test3a".into(),
        model: sir3(1e3, 1e-3, true),
        ic: two_spots.clone(),
        domain: (0.0, 20.0),
        horizon: 4.0,
        alpha: 1.0,
        plan: sir_plan(20, 40000, 40, SamplingMode::Importance, 4.0),
        weights: w3(1.0),
        train: train(1e-3, 20000),
    });
    list.push(ScenarioConfig {
        schema_version: SCENARIO_SCHEMA_VERSION,
        name: "test3a-forecast".into(),
        truth_group: "test3a".into(),
        model: sir3(1e3, 1e-3, false),
        ic: two_spots.clone(),
        domain: (0.0, 20.0),
        horizon: 4.0,
        alpha: 1.0,
        plan: sir_plan(5300, 40000, 40, SamplingMode::UniformRandom, 1.5),
        weights: w3(1.0),
        train: train(1e-3, 20000),
    });
    list.push(ScenarioConfig {
        schema_version: SCENARIO_SCHEMA_VERSION,
        name: "test3b-inference".into(),
        truth_group: "test3b".into(),
        model: sir3(1.0, 1.0, true),
        ic: two_spots.clone(),
        domain: (0.0, 20.0),
        horizon: 5.0,
        alpha: 1.0,
        plan: sir_plan(20, 23600, 50, SamplingMode::Importance, 5.0),
        weights: w3(10.0),
        train: train(1e-2, 20000),
    });
    list.push(ScenarioConfig {
        schema_version: SCENARIO_SCHEMA_VERSION,
        name: "test3b-forecast".into(),
        truth_group: "test3b".into(),
        model: sir3(1.0, 1.0, false),
        ic: two_spots,
        domain: (0.0, 20.0),
        horizon: 5.0,
        alpha: 1.0,
        plan: sir_plan(8500, 23600, 50, SamplingMode::UniformRandom, 2.5),
        weights: w3(10.0),
        train: train(1e-2, 20000),
    });

    // Epidemic with a sinusoidal transmission profile: three hot-spots,
    // three learnable profile coefficients, known recovery rate.
    let sir4 = |lambda2: f64, tau: f64, learn: bool| {
        let param = |truth: f64, init: f64| {
            if learn {
                Param::Learnable { truth, init }
            } else {
                Param::Known(truth)
            }
        };
        ModelSpec::Sir(SirSpec {
            tau: [tau; 3],
            lambda: [lambda2.sqrt(); 3],
            beta: BetaSpec::Sinusoid {
                beta0: param(9.0, 5.0),
                beta1: param(2.5, 1.5),
                zeta: param(0.55, 0.5),
            },
            gamma: Param::Known(8.0),
        })
    };
    let three_spots = IcSpec::SirHotspots {
        bumps: vec![(0.01, 10.0 / 3.0), (0.001, 10.0), (0.004, 50.0 / 3.0)],
    };
    let w4 = LossWeights::Sir(SirWeights {
        d: [1.0, 1000.0, 100.0],
        b: [1.0, 1000.0, 100.0, 1.0, 10.0, 1.0],
        r: [1.0, 1000.0, 100.0, 1.0, 10.0, 1.0],
        c: 1.0,
    });
    let plan4 = |n_data, n_residual, n_boundary, n_cons, mode, t_train| DatasetPlan {
        n_data,
        n_residual,
        n_boundary,
        n_conservation: n_cons,
        n_quadrature: 200,
        data_mode: mode,
        t_train,
    };
    list.push(ScenarioConfig {
        schema_version: SCENARIO_SCHEMA_VERSION,
        name: "test4a-inference".into(),
        truth_group: "test4a".into(),
        model: sir4(1e5, 1e-5, true),
        ic: three_spots.clone(),
        domain: (0.0, 20.0),
        horizon: 5.0,
        alpha: 1.0,
        plan: plan4(1000, 10100, 200, 235, SamplingMode::Importance, 5.0),
        weights: w4,
        train: train(1e-3, 150000),
    });
    list.push(ScenarioConfig {
        schema_version: SCENARIO_SCHEMA_VERSION,
        name: "test4a-forecast".into(),
        truth_group: "test4a".into(),
        model: sir4(1e5, 1e-5, false),
        ic: three_spots.clone(),
        domain: (0.0, 20.0),
        horizon: 5.0,
        alpha: 1.0,
        plan: plan4(10100, 10100, 200, 235, SamplingMode::UniformRandom, 2.5),
        weights: w4,
        train: train(1e-3, 150000),
    });
    list.push(ScenarioConfig {
        schema_version: SCENARIO_SCHEMA_VERSION,
        name: "test4b-inference".into(),
        truth_group: "test4b".into(),
        model: sir4(1.0, 1.0, true),
        ic: three_spots.clone(),
        domain: (0.0, 20.0),
        horizon: 5.0,
        alpha: 1.0,
        plan: plan4(1000, 23500, 600, 47, SamplingMode::Importance, 5.0),
        weights: w4,
        train: train(1e-3, 150000),
    });
    list.push(ScenarioConfig {
        schema_version: SCENARIO_SCHEMA_VERSION,
        name: "test4b-forecast".into(),
        truth_group: "test4b".into(),
        model: sir4(1.0, 1.0, false),
        ic: three_spots,
        domain: (0.0, 20.0),
        horizon: 5.0,
        alpha: 1.0,
        plan: plan4(8400, 23500, 600, 47, SamplingMode::UniformRandom, 2.5),
        weights: w4,
        train: train(1e-3, 150000),
    });

    list
}

pub fn find_scenario(name: &str) -> Result<ScenarioConfig, ScenarioError> {
    catalog()
        .into_iter()
        .find(|c| c.name == name)
        .ok_or_else(|| ScenarioError::UnknownScenario(name.to_string()))
}

/// Draw `n` table nodes (with replacement) with probability proportional to
/// `field`'s value, restricted to time levels `≤ t_max`. Returns `(ti, qi)`
/// index pairs into the table. Deterministic under `seed`.
pub fn importance_sample(
    truth: &Trajectory,
    field: usize,
    t_max: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<(usize, usize)>, ScenarioError> {
    let tiny = 1e-12 * truth.ts.last().copied().unwrap_or(1.0).abs().max(1.0);
    let nt = truth.ts.iter().take_while(|&&t| t <= t_max + tiny).count();
    let nx = truth.xs.len();
    if nt == 0 {
        return Err(ScenarioError::Config(
            "no table time levels at or below t_train".into(),
        ));
    }

    // Cumulative weights over the admissible nodes, row-major in (t, x).
    // Solver output may carry rounding-level negative values; anything worse
    // violates the nonnegativity premise.
    let mut cdf = Vec::with_capacity(nt * nx);
    let mut total = 0.0;
    for m in 0..nt {
        for q in 0..nx {
            let w = truth.fields[field][m][q];
            if w < -1e-9 {
                return Err(ScenarioError::Config(format!(
                    "importance weights must be nonnegative (found {w} at t index {m})"
                )));
            }
            total += w.max(0.0);
            cdf.push(total);
        }
    }
    if !(total > 0.0) {
        return Err(ScenarioError::Config(
            "importance weights are identically zero".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ DATA_STREAM);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.random_range(0.0..total);
        let k = cdf.partition_point(|&c| c <= u).min(nt * nx - 1);
        out.push((k / nx, k % nx));
    }
    Ok(out)
}

/// Largest divisor of `n` not exceeding `cap` (at least 1).
fn lattice_shape(n: usize, cap: usize) -> (usize, usize) {
    let mut best = 1;
    for d in 1..=cap.min(n) {
        if n.is_multiple_of(d) {
            best = d;
        }
    }
    (best, n / best)
}

/// `count` values from 0 to `end` inclusive (just `[0]` when `count` is 1).
fn linspace_inclusive(end: f64, count: usize) -> Vec<f64> {
    if count <= 1 {
        return vec![0.0];
    }
    (0..count)
        .map(|m| m as f64 * end / (count - 1) as f64)
        .collect()
}

/// A realized dataset plus the validation split the trainer will carve from
/// it (recorded so a run's held-out points can be reconstructed exactly).
#[derive(Clone, Debug, PartialEq)]
pub struct BuiltDataset {
    pub dataset: Dataset,
    pub split: SplitIndices,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub validation_fraction: f64,
    pub seed: u64,
    /// Sorted indices of held-out measured points.
    pub data: Vec<usize>,
    /// Sorted indices of held-out residual points.
    pub residual: Vec<usize>,
}

/// Realize the scenario's dataset plan against its solved ground truth.
///
/// Measured values are read from the table (exact node values for
/// importance draws, bilinear interpolation otherwise); boundary rows carry
/// the full analytic initial state at `t = 0`; residual points are uniform
/// over the whole space-time box; the conservation constraint pins the
/// rectangle-rule population integral to its analytic initial value. In the
/// standard (non-AP) transport form the measured columns carry the kinetic
/// pair `f± = (ρ ± εj/c)/2` instead of `(ρ, ·)`.
pub fn build_dataset(
    cfg: &ScenarioConfig,
    truth: &Trajectory,
    form: ResidualForm,
) -> Result<BuiltDataset, ScenarioError> {
    cfg.validate()?;
    let names: Vec<&str> = cfg.model.field_names().to_vec();
    if truth.field_names != names {
        return Err(ScenarioError::Config(format!(
            "truth table fields {:?} do not match the model",
            truth.field_names
        )));
    }
    let t_end = truth.ts.last().copied().unwrap_or(0.0);
    if t_end + 1e-9 * cfg.horizon < cfg.horizon {
        return Err(ScenarioError::Config(format!(
            "truth table ends at t = {t_end}, before the horizon {}",
            cfg.horizon
        )));
    }
    if form == ResidualForm::Standard {
        match cfg.model {
            ModelSpec::Gt(g) if g.source.is_none() => {}
            _ => {
                return Err(ScenarioError::Config(
                    "the standard residual form applies to the plain transport model only".into(),
                ))
            }
        }
    }

    let (a, b) = cfg.domain;
    let el = b - a;
    let seed = cfg.train.seed;
    let plan = &cfg.plan;

    // Measured points and the table values at them.
    let n_fields = cfg.model.n_fields();
    let mut dx_pts = Vec::with_capacity(plan.n_data);
    let mut dt_pts = Vec::with_capacity(plan.n_data);
    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(plan.n_data); n_fields];
    let observed: Vec<usize> = match cfg.model {
        ModelSpec::Gt(_) => vec![0, 1],
        ModelSpec::Sir(_) => vec![0, 1, 2],
    };
    match plan.data_mode {
        SamplingMode::Lattice => {
            let (nx, nt) = lattice_shape(plan.n_data, truth.xs.len());
            if nt > truth.ts.len() {
                return Err(ScenarioError::Config(format!(
                    "lattice of {} × {nt} points exceeds the table's {} time levels",
                    nx,
                    truth.ts.len()
                )));
            }
            let ts = linspace_inclusive(plan.t_train, nt);
            for &t in &ts {
                for i in 0..nx {
                    let x = a + i as f64 * el / nx as f64;
                    dx_pts.push(x);
                    dt_pts.push(t);
                    for &f in &observed {
                        samples[f].push(truth.sample_bilinear(f, x, t));
                    }
                }
            }
        }
        SamplingMode::Importance => {
            let i_field = truth
                .field_index("I")
                .ok_or_else(|| ScenarioError::Config("table has no infected field".into()))?;
            let idx = importance_sample(truth, i_field, plan.t_train, plan.n_data, seed)?;
            for (m, q) in idx {
                dx_pts.push(truth.xs[q]);
                dt_pts.push(truth.ts[m]);
                for &f in &observed {
                    samples[f].push(truth.fields[f][m][q]);
                }
            }
        }
        SamplingMode::UniformRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ DATA_STREAM);
            for _ in 0..plan.n_data {
                let x = rng.random_range(a..b);
                let t = rng.random_range(0.0..plan.t_train);
                dx_pts.push(x);
                dt_pts.push(t);
                for &f in &observed {
                    samples[f].push(truth.sample_bilinear(f, x, t));
                }
            }
        }
    }

    // Map table samples to observation columns.
    let mut obs: Vec<Option<Vec<f64>>> = vec![None; n_fields];
    match (&cfg.model, form) {
        (ModelSpec::Gt(_), ResidualForm::Ap) => {
            obs[0] = Some(std::mem::take(&mut samples[0]));
        }
        (ModelSpec::Gt(g), ResidualForm::Standard) => {
            let mut fplus = Vec::with_capacity(plan.n_data);
            let mut fminus = Vec::with_capacity(plan.n_data);
            for p in 0..plan.n_data {
                let (fp, fm) = kinetic_from_macro(samples[0][p], samples[1][p], g.eps, g.c);
                fplus.push(fp);
                fminus.push(fm);
            }
            obs[0] = Some(fplus);
            obs[1] = Some(fminus);
        }
        (ModelSpec::Sir(_), _) => {
            for f in 0..3 {
                obs[f] = Some(std::mem::take(&mut samples[f]));
            }
        }
    }
    let data = DataSet {
        x: dx_pts,
        t: dt_pts,
        obs,
    };

    // Residual collocation: uniform over the full space-time box regardless
    // of t_train.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ RESIDUAL_STREAM);
    let mut residual = ResidualSet::default();
    for _ in 0..plan.n_residual {
        residual.x.push(rng.random_range(a..b));
        residual.t.push(rng.random_range(0.0..cfg.horizon));
    }

    // Initial-state rows: equally spaced over the periodic domain at t = 0,
    // full analytic state (weights decide which components are enforced).
    let mut boundary = BoundarySet {
        x: Vec::with_capacity(plan.n_boundary),
        t: vec![0.0; plan.n_boundary],
        values: vec![Vec::with_capacity(plan.n_boundary); n_fields],
    };
    for i in 0..plan.n_boundary {
        let x = a + i as f64 * el / plan.n_boundary as f64;
        boundary.x.push(x);
        match &cfg.model {
            ModelSpec::Gt(g) => {
                let (rho, j) = cfg.ic.eval_gt(x, g.diffusion());
                boundary.values[0].push(rho);
                boundary.values[1].push(j);
            }
            ModelSpec::Sir(s) => {
                let d = [s.diffusion(0), s.diffusion(1), s.diffusion(2)];
                let vals = cfg.ic.eval_sir(x, d);
                for (f, col) in boundary.values.iter_mut().enumerate() {
                    col.push(vals[f]);
                }
            }
        }
    }

    // Total-population constraint: time levels over the full horizon,
    // uniform periodic quadrature nodes, target computed from the analytic
    // initial densities with the same rectangle rule the loss applies.
    let conservation = if plan.n_conservation > 0 {
        let nodes: Vec<f64> = (0..plan.n_quadrature)
            .map(|q| a + q as f64 * el / plan.n_quadrature as f64)
            .collect();
        let dq = nodes[1] - nodes[0];
        let s = match &cfg.model {
            ModelSpec::Sir(s) => s,
            ModelSpec::Gt(_) => unreachable!("validated: conservation implies the epidemic model"),
        };
        let d = [s.diffusion(0), s.diffusion(1), s.diffusion(2)];
        let q0 = dq
            * nodes
                .iter()
                .map(|&x| {
                    let v = cfg.ic.eval_sir(x, d);
                    v[0] + v[1] + v[2]
                })
                .sum::<f64>();
        Some(ConservationSet {
            times: linspace_inclusive(cfg.horizon, plan.n_conservation),
            nodes,
            q0,
        })
    } else {
        None
    };

    let split = SplitIndices {
        validation_fraction: cfg.train.validation_fraction,
        seed,
        data: validation_indices(
            plan.n_data,
            cfg.train.validation_fraction,
            seed,
            DATA_SPLIT_STREAM,
        ),
        residual: validation_indices(
            plan.n_residual,
            cfg.train.validation_fraction,
            seed,
            RESIDUAL_SPLIT_STREAM,
        ),
    };

    Ok(BuiltDataset {
        dataset: Dataset {
            data,
            boundary,
            residual,
            conservation,
        },
        split,
    })
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

pub fn save_scenario(cfg: &ScenarioConfig, path: &Path) -> Result<(), ScenarioError> {
    fs::write(path, serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

pub fn load_scenario(path: &Path) -> Result<ScenarioConfig, ScenarioError> {
    let cfg: ScenarioConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
    if cfg.schema_version != SCENARIO_SCHEMA_VERSION {
        return Err(ScenarioError::Format(format!(
            "unsupported scenario schema version {}",
            cfg.schema_version
        )));
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize, Deserialize)]
struct DatasetSidecar {
    schema_version: u32,
    names: Vec<String>,
    n_data: usize,
    n_boundary: usize,
    n_residual: usize,
    conservation: Option<ConservationSet>,
    split: SplitIndices,
}

/// Write `<stem>.csv` (one row per point: `set,x,t,<columns>`; measured
/// rows leave unobserved cells empty, residual rows leave all cells empty)
/// and `<stem>.json` (counts, conservation constraint, validation split).
/// `names` are the column labels — the model's field names, or the kinetic
/// pair for standard-form transport datasets.
pub fn save_dataset(
    stem: &Path,
    built: &BuiltDataset,
    names: &[String],
) -> Result<(), ScenarioError> {
    let ds = &built.dataset;
    let side = DatasetSidecar {
        schema_version: DATASET_SCHEMA_VERSION,
        names: names.to_vec(),
        n_data: ds.data.x.len(),
        n_boundary: ds.boundary.x.len(),
        n_residual: ds.residual.x.len(),
        conservation: ds.conservation.clone(),
        split: built.split.clone(),
    };
    fs::write(
        stem.with_extension("json"),
        serde_json::to_string_pretty(&side)?,
    )?;

    let mut out = String::new();
    out.push_str("set,x,t");
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for p in 0..ds.data.x.len() {
        let _ = write!(out, "data,{},{}", ds.data.x[p], ds.data.t[p]);
        for col in &ds.data.obs {
            match col {
                Some(c) => {
                    let _ = write!(out, ",{}", c[p]);
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    for p in 0..ds.boundary.x.len() {
        let _ = write!(out, "boundary,{},{}", ds.boundary.x[p], ds.boundary.t[p]);
        for col in &ds.boundary.values {
            let _ = write!(out, ",{}", col[p]);
        }
        out.push('\n');
    }
    for p in 0..ds.residual.x.len() {
        let _ = write!(out, "residual,{},{}", ds.residual.x[p], ds.residual.t[p]);
        for _ in names {
            out.push(',');
        }
        out.push('\n');
    }
    fs::write(stem.with_extension("csv"), out)?;
    Ok(())
}

/// Read a dataset written by [`save_dataset`]; returns it with the column
/// labels from the sidecar.
pub fn load_dataset(stem: &Path) -> Result<(BuiltDataset, Vec<String>), ScenarioError> {
    let side: DatasetSidecar =
        serde_json::from_str(&fs::read_to_string(stem.with_extension("json"))?)?;
    if side.schema_version != DATASET_SCHEMA_VERSION {
        return Err(ScenarioError::Format(format!(
            "unsupported dataset schema version {}",
            side.schema_version
        )));
    }
    let nf = side.names.len();
    let text = fs::read_to_string(stem.with_extension("csv"))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| ScenarioError::Format("empty dataset file".into()))?;
    let expect = format!("set,x,t,{}", side.names.join(","));
    if header != expect {
        return Err(ScenarioError::Format(format!(
            "unexpected dataset header {header:?}"
        )));
    }

    let parse = |s: &str| -> Result<f64, ScenarioError> {
        s.parse()
            .map_err(|_| ScenarioError::Format(format!("bad number {s:?}")))
    };
    let mut data = DataSet {
        obs: vec![None; nf],
        ..DataSet::default()
    };
    let mut data_cols: Vec<Vec<Option<f64>>> = vec![Vec::new(); nf];
    let mut boundary = BoundarySet {
        values: vec![Vec::new(); nf],
        ..BoundarySet::default()
    };
    let mut residual = ResidualSet::default();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != nf + 3 {
            return Err(ScenarioError::Format(format!(
                "row has {} cells, expected {}",
                cells.len(),
                nf + 3
            )));
        }
        let x = parse(cells[1])?;
        let t = parse(cells[2])?;
        match cells[0] {
            "data" => {
                data.x.push(x);
                data.t.push(t);
                for f in 0..nf {
                    let cell = cells[3 + f];
                    data_cols[f].push(if cell.is_empty() {
                        None
                    } else {
                        Some(parse(cell)?)
                    });
                }
            }
            "boundary" => {
                boundary.x.push(x);
                boundary.t.push(t);
                for f in 0..nf {
                    boundary.values[f].push(parse(cells[3 + f])?);
                }
            }
            "residual" => {
                residual.x.push(x);
                residual.t.push(t);
            }
            other => {
                return Err(ScenarioError::Format(format!(
                    "unknown point set {other:?}"
                )));
            }
        }
    }
    for (f, col) in data_cols.into_iter().enumerate() {
        if col.iter().all(|v| v.is_none()) {
            continue;
        }
        if col.iter().any(|v| v.is_none()) {
            return Err(ScenarioError::Format(format!(
                "column {} is observed at some points but not others",
                side.names[f]
            )));
        }
        data.obs[f] = Some(col.into_iter().map(|v| v.unwrap()).collect());
    }

    if data.x.len() != side.n_data
        || boundary.x.len() != side.n_boundary
        || residual.x.len() != side.n_residual
    {
        return Err(ScenarioError::Format(
            "point counts disagree with the sidecar".into(),
        ));
    }
    Ok((
        BuiltDataset {
            dataset: Dataset {
                data,
                boundary,
                residual,
                conservation: side.conservation,
            },
            split: side.split,
        },
        side.names,
    ))
}

/// Column labels for a dataset file: field names, or the kinetic pair for
/// standard-form transport data.
pub fn dataset_column_names(model: &ModelSpec, form: ResidualForm) -> Vec<String> {
    match (model, form) {
        (ModelSpec::Gt(_), ResidualForm::Standard) => vec!["fplus".into(), "fminus".into()],
        _ => model.field_names().iter().map(|s| s.to_string()).collect(),
    }
}
