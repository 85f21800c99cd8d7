//! Finite-volume reference solver used to manufacture ground truth.
//!
//! Both model families are relaxation systems built from pairs
//! (u, J) coupled as
//!
//!   ∂t u + ∂x J            = G_u(state)
//!   ∂t J + λ²·∂x u + J/τ   = C_J(state)
//!
//! with stiff relaxation time τ. The scheme splits each pair into an
//! explicit hyperbolic part advanced with a second-order MUSCL (minmod)
//! reconstruction and Rusanov interface fluxes at speed μ = λ·min(1, √τ),
//! and an implicit stiff part (the remaining ν = λ² − μ² share of the
//! gradient plus the relaxation term) that is linear and pointwise, so each
//! implicit stage is a closed-form update — no linear solves. Time stepping
//! is the two-stage ARS(2,2,2) IMEX Runge–Kutta scheme. The splitting keeps
//! the time step bounded by the limit diffusion (Δt ∝ Δx²/D) rather than the
//! stiff speed λ, so the solver stays usable uniformly down to τ → 0 and the
//! computed solution converges to the limit diffusion equation.
//!
//! Reaction terms (the GT source κ(x)·ρ and the SIR infection/recovery
//! couplings) are non-stiff and evaluated explicitly at each stage.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::physics::{IcSpec, ModelSpec};

/// Report-table width: spatial nodes per time level (left endpoint included,
/// right excluded — the domain is periodic).
pub const REPORT_NX: usize = 200;
/// Report-table height: time levels, both endpoints included.
pub const REPORT_NT: usize = 201;

pub const TRAJECTORY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("time step underflow (nominal dt = {dt:.3e} over horizon {t_end:.3e})")]
    DtUnderflow { dt: f64, t_end: f64 },
    #[error("non-finite state in field {field:?} at cell {cell} (x = {x:.6}), t = {t:.6}")]
    NonFinite {
        field: String,
        cell: usize,
        x: f64,
        t: f64,
    },
    #[error("malformed trajectory file: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Uniform periodic cell grid on [a, b); cell centers x_i = a + (i + ½)·Δx.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    pub a: f64,
    pub b: f64,
    pub n_cells: usize,
}

impl Grid1D {
    pub fn new(a: f64, b: f64, n_cells: usize) -> Result<Self, SolveError> {
        let g = Grid1D { a, b, n_cells };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), SolveError> {
        if !(self.b > self.a) || !self.a.is_finite() || !self.b.is_finite() {
            return Err(SolveError::Config("grid needs b > a, both finite".into()));
        }
        if self.n_cells < 4 {
            return Err(SolveError::Config("grid needs at least 4 cells".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> f64 {
        self.b - self.a
    }

    pub fn dx(&self) -> f64 {
        self.len() / self.n_cells as f64
    }

    pub fn centers(&self) -> Vec<f64> {
        let dx = self.dx();
        (0..self.n_cells)
            .map(|i| self.a + (i as f64 + 0.5) * dx)
            .collect()
    }
}

/// Time-step safety factors: Δt = min(hyperbolic·Δx/μ_max, parabolic·Δx²/(2·D_max)).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CflConfig {
    pub hyperbolic: f64,
    pub parabolic: f64,
}

impl Default for CflConfig {
    fn default() -> Self {
        CflConfig {
            hyperbolic: 0.5,
            parabolic: 0.25,
        }
    }
}

/// How the solved trajectory is condensed into the report table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSpec {
    /// Spatial nodes x_q = a + q·L/nx, q = 0..nx−1.
    pub nx: usize,
    /// Time levels, uniformly spaced, both endpoints included.
    pub nt: usize,
}

impl Default for ReportSpec {
    fn default() -> Self {
        ReportSpec {
            nx: REPORT_NX,
            nt: REPORT_NT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverMeta {
    pub scheme: String,
    pub cfl: CflConfig,
    pub n_cells: usize,
    pub dt_nominal: f64,
    pub steps: u64,
}

/// Solved fields tabulated on the uniform report grid.
///
/// `fields[f][m][q]` is field `f` at time `ts[m]`, node `xs[q]`. With the
/// default 400-cell grid and 200 report nodes every node falls midway
/// between two cell centers, so each table value is the exact average of a
/// cell pair and report-grid quadrature of a conserved density tracks the
/// finite-volume cell sum to rounding error.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub schema_version: u32,
    pub field_names: Vec<String>,
    pub xs: Vec<f64>,
    pub ts: Vec<f64>,
    pub fields: Vec<Vec<Vec<f64>>>,
    pub meta: SolverMeta,
    /// Free-form fingerprint of whatever produced this table (set by
    /// callers that cache trajectories on disk; not interpreted here).
    pub tag: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    schema_version: u32,
    field_names: Vec<String>,
    xs: Vec<f64>,
    ts: Vec<f64>,
    meta: SolverMeta,
    tag: Option<String>,
}

impl Trajectory {
    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.field_names.iter().position(|n| n == name)
    }

    pub fn value(&self, field: usize, ti: usize, xi: usize) -> f64 {
        self.fields[field][ti][xi]
    }

    /// Node spacing of the report grid (periodic: L/nx, not L/(nx−1)).
    pub fn dx(&self) -> f64 {
        debug_assert!(self.xs.len() >= 2);
        self.xs[1] - self.xs[0]
    }

    /// Bilinear interpolation, periodic in x and clamped in t.
    pub fn sample_bilinear(&self, field: usize, x: f64, t: f64) -> f64 {
        let nx = self.xs.len();
        let dx = self.dx();
        let pos = (x - self.xs[0]) / dx;
        let base = pos.floor();
        let wx = pos - base;
        let q0 = (base as i64).rem_euclid(nx as i64) as usize;
        let q1 = (q0 + 1) % nx;

        let nt = self.ts.len();
        if nt == 1 {
            let row = &self.fields[field][0];
            return (1.0 - wx) * row[q0] + wx * row[q1];
        }
        let dt = self.ts[1] - self.ts[0];
        let tpos = ((t - self.ts[0]) / dt).clamp(0.0, (nt - 1) as f64);
        let tbase = tpos.floor().min((nt - 2) as f64);
        let wt = tpos - tbase;
        let m0 = tbase as usize;
        let m1 = m0 + 1;

        let r0 = &self.fields[field][m0];
        let r1 = &self.fields[field][m1];
        let v0 = (1.0 - wx) * r0[q0] + wx * r0[q1];
        let v1 = (1.0 - wx) * r1[q0] + wx * r1[q1];
        (1.0 - wt) * v0 + wt * v1
    }

    /// Rectangle-rule integral of a field over the periodic domain at one
    /// time level.
    pub fn quadrature(&self, field: usize, ti: usize) -> f64 {
        self.dx() * self.fields[field][ti].iter().sum::<f64>()
    }

    /// Largest relative departure, over all time levels, of the summed
    /// quadrature of `fields` from its initial value.
    pub fn conservation_drift(&self, fields: &[usize]) -> f64 {
        let total = |ti: usize| fields.iter().map(|&f| self.quadrature(f, ti)).sum::<f64>();
        let q0 = total(0);
        let scale = if q0.abs() > f64::MIN_POSITIVE {
            q0.abs()
        } else {
            1.0
        };
        (0..self.ts.len())
            .map(|ti| (total(ti) - q0).abs() / scale)
            .fold(0.0, f64::max)
    }

    /// Minimum table value over the given fields and all (t, x).
    pub fn min_over(&self, fields: &[usize]) -> f64 {
        fields
            .iter()
            .flat_map(|&f| self.fields[f].iter().flatten())
            .fold(f64::INFINITY, |m, &v| m.min(v))
    }

    /// Relative L² distance of one field at one time level from a reference
    /// profile: √(Σ(v−e)² / Σe²).
    pub fn rel_l2_error_at(&self, field: usize, ti: usize, exact: impl Fn(f64) -> f64) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (q, &x) in self.xs.iter().enumerate() {
            let e = exact(x);
            let d = self.fields[field][ti][q] - e;
            num += d * d;
            den += e * e;
        }
        (num / den).sqrt()
    }

    /// Write `<stem>.csv` (header `t,x,<fields…>`, one row per (t, x) pair,
    /// time-major) and a `<stem>.json` sidecar with grid and solver metadata.
    /// Values are printed in shortest round-trip form, so `load` restores
    /// them bit-for-bit.
    pub fn save(&self, stem: &Path) -> Result<(), SolveError> {
        let side = Sidecar {
            schema_version: self.schema_version,
            field_names: self.field_names.clone(),
            xs: self.xs.clone(),
            ts: self.ts.clone(),
            meta: self.meta.clone(),
            tag: self.tag.clone(),
        };
        fs::write(
            stem.with_extension("json"),
            serde_json::to_string_pretty(&side)?,
        )?;

        let mut out = String::new();
        out.push_str("t,x");
        for n in &self.field_names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (m, &t) in self.ts.iter().enumerate() {
            for (q, &x) in self.xs.iter().enumerate() {
                let _ = write!(out, "{t},{x}");
                for f in 0..self.field_names.len() {
                    let _ = write!(out, ",{}", self.fields[f][m][q]);
                }
                out.push('\n');
            }
        }
        let mut fh = fs::File::create(stem.with_extension("csv"))?;
        fh.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Trajectory, SolveError> {
        let side: Sidecar =
            serde_json::from_str(&fs::read_to_string(stem.with_extension("json"))?)?;
        if side.schema_version != TRAJECTORY_SCHEMA_VERSION {
            return Err(SolveError::Format(format!(
                "unsupported trajectory schema version {}",
                side.schema_version
            )));
        }
        let nt = side.ts.len();
        let nx = side.xs.len();
        let nf = side.field_names.len();
        let mut fields = vec![vec![vec![0.0; nx]; nt]; nf];

        let fh = fs::File::open(stem.with_extension("csv"))?;
        let mut lines = BufReader::new(fh).lines();
        let header = lines
            .next()
            .ok_or_else(|| SolveError::Format("empty csv".into()))??;
        let expect_cols = 2 + nf;
        if header.split(',').count() != expect_cols {
            return Err(SolveError::Format(format!(
                "csv header has wrong column count (want {expect_cols})"
            )));
        }
        let mut rows = 0usize;
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            if rows >= nt * nx {
                return Err(SolveError::Format(
                    "csv has more rows than sidecar grid".into(),
                ));
            }
            let m = rows / nx;
            let q = rows % nx;
            let mut cols = line.split(',');
            cols.next();
            cols.next();
            for (f, field) in fields.iter_mut().enumerate() {
                let cell = cols
                    .next()
                    .ok_or_else(|| SolveError::Format(format!("row {rows}: missing column")))?;
                field[m][q] = cell
                    .parse::<f64>()
                    .map_err(|e| SolveError::Format(format!("row {rows} field {f}: {e}")))?;
            }
            rows += 1;
        }
        if rows != nt * nx {
            return Err(SolveError::Format(format!(
                "csv has {rows} data rows, sidecar grid implies {}",
                nt * nx
            )));
        }
        Ok(Trajectory {
            schema_version: side.schema_version,
            field_names: side.field_names,
            xs: side.xs,
            ts: side.ts,
            fields,
            meta: side.meta,
            tag: side.tag,
        })
    }
}

/// GT limit profile for cosine initial data ρ0 = mean + amp·cos(kπx):
/// the heat equation ∂t ρ = (c²/σ)·∂xx ρ damps the mode by
/// exp(−(c²/σ)(kπ)²t); the matching equilibrium flux is Fick's law.
/// Returns (ρ, j).
pub fn analytic_heat_solution(
    x: f64,
    t: f64,
    c: f64,
    sigma: f64,
    mean: f64,
    amp: f64,
    k: f64,
) -> (f64, f64) {
    let d = c * c / sigma;
    let kp = k * std::f64::consts::PI;
    let decay = (-d * kp * kp * t).exp();
    let rho = mean + amp * (kp * x).cos() * decay;
    let j = d * amp * kp * (kp * x).sin() * decay;
    (rho, j)
}

/// Cell-centered initial state for a model/initial-data pair, fluxes in
/// diffusive equilibrium from the analytic density gradients.
pub fn initial_state(
    model: &ModelSpec,
    ic: &IcSpec,
    grid: &Grid1D,
) -> Result<Vec<Vec<f64>>, SolveError> {
    grid.validate()?;
    if !ic.matches(model) {
        return Err(SolveError::Config(
            "initial data does not match the model family".into(),
        ));
    }
    let centers = grid.centers();
    let mut fields = vec![vec![0.0; grid.n_cells]; model.n_fields()];
    match model {
        ModelSpec::Gt(gt) => {
            let d = gt.diffusion();
            for (i, &x) in centers.iter().enumerate() {
                let (rho, j) = ic.eval_gt(x, d);
                fields[0][i] = rho;
                fields[1][i] = j;
            }
        }
        ModelSpec::Sir(sir) => {
            let d = [sir.diffusion(0), sir.diffusion(1), sir.diffusion(2)];
            for (i, &x) in centers.iter().enumerate() {
                let vals = ic.eval_sir(x, d);
                for (f, field) in fields.iter_mut().enumerate() {
                    field[i] = vals[f];
                }
            }
        }
    }
    Ok(fields)
}

struct PairCoef {
    u_idx: usize,
    j_idx: usize,
    mu: f64,
    nu: f64,
    tau: f64,
    dcoef: f64,
}

enum ReactKind {
    GtNone,
    /// κ evaluated at cell centers; contributes κ(x)·ρ to the ρ equation.
    GtKappa(Vec<f64>),
    Sir {
        /// β evaluated at cell centers.
        beta: Vec<f64>,
        gamma: f64,
        /// λ_I/λ_S and λ_R/λ_I weights on the flux couplings.
        ratio_is: f64,
        ratio_ri: f64,
    },
}

struct Integrator {
    n: usize,
    dx: f64,
    centers: Vec<f64>,
    names: Vec<String>,
    pairs: Vec<PairCoef>,
    react: ReactKind,
    fields: Vec<Vec<f64>>,
    t: f64,
    dt: f64,
    steps: u64,
    // scratch buffers (no per-step allocation)
    reac: Vec<Vec<f64>>,
    ke1: Vec<Vec<f64>>,
    ke2: Vec<Vec<f64>>,
    stage2: Vec<Vec<f64>>,
    ki2: Vec<Vec<f64>>,
    su: Vec<f64>,
    sj: Vec<f64>,
    fu: Vec<f64>,
    fj: Vec<f64>,
    grad: Vec<f64>,
    unew: Vec<f64>,
}

/// ARS(2,2,2) implicit stage weight γ = 1 − 1/√2.
const ARS_GAMMA: f64 = 1.0 - std::f64::consts::FRAC_1_SQRT_2;
/// ARS(2,2,2) explicit stage-3 weight δ = 1 − 1/(2γ).
const ARS_DELTA: f64 = 1.0 - 1.0 / (2.0 * ARS_GAMMA);

fn minmod(a: f64, b: f64) -> f64 {
    if a * b > 0.0 {
        if a.abs() < b.abs() {
            a
        } else {
            b
        }
    } else {
        0.0
    }
}

impl Integrator {
    fn new(
        model: &ModelSpec,
        grid: &Grid1D,
        init: Vec<Vec<f64>>,
        cfl: &CflConfig,
        t_end: f64,
    ) -> Result<Self, SolveError> {
        grid.validate()?;
        model
            .validate()
            .map_err(|e| SolveError::Config(e.to_string()))?;
        if !(cfl.hyperbolic > 0.0) || !(cfl.parabolic > 0.0) {
            return Err(SolveError::Config("CFL factors must be positive".into()));
        }
        if !(t_end >= 0.0) || !t_end.is_finite() {
            return Err(SolveError::Config("horizon must be finite and >= 0".into()));
        }
        if init.len() != model.n_fields() {
            return Err(SolveError::Config(format!(
                "initial state has {} fields, model needs {}",
                init.len(),
                model.n_fields()
            )));
        }
        for (f, field) in init.iter().enumerate() {
            if field.len() != grid.n_cells {
                return Err(SolveError::Config(format!(
                    "initial field {f} has {} cells, grid has {}",
                    field.len(),
                    grid.n_cells
                )));
            }
            if field.iter().any(|v| !v.is_finite()) {
                return Err(SolveError::Config(format!(
                    "initial field {f} contains non-finite values"
                )));
            }
        }

        let centers = grid.centers();
        let pair =
            |u_idx: usize, j_idx: usize, lambda2: f64, tau: f64| -> Result<PairCoef, SolveError> {
                if !(tau > 0.0) {
                    return Err(SolveError::Config(
                        "IMEX stages divide by the relaxation time; tau must be positive".into(),
                    ));
                }
                let lambda = lambda2.sqrt();
                if !(lambda > 0.0) {
                    return Err(SolveError::Config(
                        "transport speed must be positive".into(),
                    ));
                }
                let mu = lambda * tau.sqrt().min(1.0);
                Ok(PairCoef {
                    u_idx,
                    j_idx,
                    mu,
                    nu: lambda2 - mu * mu,
                    tau,
                    dcoef: lambda2 * tau,
                })
            };

        let (pairs, react) = match model {
            ModelSpec::Gt(gt) => {
                let lambda2 = gt.c * gt.c / (gt.eps * gt.eps);
                let tau = gt.eps * gt.eps / gt.sigma.truth();
                let pairs = vec![pair(0, 1, lambda2, tau)?];
                let react = match &gt.source {
                    None => ReactKind::GtNone,
                    Some(src) => {
                        let (k0, k1, k2) =
                            (src.kappa0.truth(), src.kappa1.truth(), src.kappa2.truth());
                        ReactKind::GtKappa(
                            centers
                                .iter()
                                .map(|&x| k0 + k1 * (k2 * std::f64::consts::PI * x).sin())
                                .collect(),
                        )
                    }
                };
                (pairs, react)
            }
            ModelSpec::Sir(sir) => {
                let pairs = vec![
                    pair(0, 3, sir.lambda[0] * sir.lambda[0], sir.tau[0])?,
                    pair(1, 4, sir.lambda[1] * sir.lambda[1], sir.tau[1])?,
                    pair(2, 5, sir.lambda[2] * sir.lambda[2], sir.tau[2])?,
                ];
                let react = ReactKind::Sir {
                    beta: centers.iter().map(|&x| sir.beta.truth_at(x)).collect(),
                    gamma: sir.gamma.truth(),
                    ratio_is: sir.lambda[1] / sir.lambda[0],
                    ratio_ri: sir.lambda[2] / sir.lambda[1],
                };
                (pairs, react)
            }
        };

        let dx = grid.dx();
        let mut dt = f64::INFINITY;
        for p in &pairs {
            dt = dt
                .min(cfl.hyperbolic * dx / p.mu)
                .min(cfl.parabolic * dx * dx / (2.0 * p.dcoef));
        }
        if t_end > 0.0 && dt <= f64::EPSILON * t_end.max(1.0) {
            return Err(SolveError::DtUnderflow { dt, t_end });
        }

        let n = grid.n_cells;
        let nf = init.len();
        let zeros = || vec![vec![0.0; n]; nf];
        Ok(Integrator {
            n,
            dx,
            centers,
            names: model.field_names().iter().map(|s| s.to_string()).collect(),
            pairs,
            react,
            fields: init,
            t: 0.0,
            dt,
            steps: 0,
            reac: zeros(),
            ke1: zeros(),
            ke2: zeros(),
            stage2: zeros(),
            ki2: zeros(),
            su: vec![0.0; n],
            sj: vec![0.0; n],
            fu: vec![0.0; n],
            fj: vec![0.0; n],
            grad: vec![0.0; n],
            unew: vec![0.0; n],
        })
    }

    fn reactions(react: &ReactKind, fields: &[Vec<f64>], out: &mut [Vec<f64>]) {
        match react {
            ReactKind::GtNone => {
                for row in out.iter_mut() {
                    row.fill(0.0);
                }
            }
            ReactKind::GtKappa(kappa) => {
                for (o, (&k, &rho)) in out[0].iter_mut().zip(kappa.iter().zip(&fields[0])) {
                    *o = k * rho;
                }
                out[1].fill(0.0);
            }
            ReactKind::Sir {
                beta,
                gamma,
                ratio_is,
                ratio_ri,
            } => {
                let n = fields[0].len();
                for i in 0..n {
                    let b_si = beta[i] * fields[0][i] * fields[1][i];
                    let g_i = gamma * fields[1][i];
                    let b_js = beta[i] * fields[3][i] * fields[1][i];
                    let g_ji = gamma * fields[4][i];
                    out[0][i] = -b_si;
                    out[1][i] = b_si - g_i;
                    out[2][i] = g_i;
                    out[3][i] = -b_js;
                    out[4][i] = ratio_is * b_js - g_ji;
                    out[5][i] = ratio_ri * g_ji;
                }
            }
        }
    }

    /// Explicit RHS of one pair: −∂x of the Rusanov pair fluxes built from
    /// MUSCL (minmod) interface states. Writes −div into (out_u, out_j).
    #[allow(clippy::too_many_arguments)]
    fn expl_pair_rhs(
        u: &[f64],
        j: &[f64],
        mu: f64,
        dx: f64,
        su: &mut [f64],
        sj: &mut [f64],
        fu: &mut [f64],
        fj: &mut [f64],
        out_u: &mut [f64],
        out_j: &mut [f64],
    ) {
        let n = u.len();
        for i in 0..n {
            let im = (i + n - 1) % n;
            let ip = (i + 1) % n;
            su[i] = minmod(u[i] - u[im], u[ip] - u[i]);
            sj[i] = minmod(j[i] - j[im], j[ip] - j[i]);
        }
        for i in 0..n {
            let ip = (i + 1) % n;
            let ul = u[i] + 0.5 * su[i];
            let ur = u[ip] - 0.5 * su[ip];
            let jl = j[i] + 0.5 * sj[i];
            let jr = j[ip] - 0.5 * sj[ip];
            fu[i] = 0.5 * (jl + jr) - 0.5 * mu * (ur - ul);
            fj[i] = 0.5 * mu * mu * (ul + ur) - 0.5 * mu * (jr - jl);
        }
        for i in 0..n {
            let im = (i + n - 1) % n;
            out_u[i] = -(fu[i] - fu[im]) / dx;
            out_j[i] = -(fj[i] - fj[im]) / dx;
        }
    }

    fn central_gradient(u: &[f64], dx: f64, out: &mut [f64]) {
        let n = u.len();
        for i in 0..n {
            let im = (i + n - 1) % n;
            let ip = (i + 1) % n;
            out[i] = (u[ip] - u[im]) / (2.0 * dx);
        }
    }

    /// One ARS(2,2,2) step of size `h`.
    fn step(&mut self, h: f64) {
        let g = ARS_GAMMA;
        let dlt = ARS_DELTA;
        let n = self.n;

        // Stage 1: explicit RHS at the current state.
        Self::reactions(&self.react, &self.fields, &mut self.reac);
        for p in &self.pairs {
            let (ui, ji) = (p.u_idx, p.j_idx);
            Self::expl_pair_rhs(
                &self.fields[ui],
                &self.fields[ji],
                p.mu,
                self.dx,
                &mut self.su,
                &mut self.sj,
                &mut self.fu,
                &mut self.fj,
                &mut self.grad,
                &mut self.unew,
            );
            for i in 0..n {
                self.ke1[ui][i] = self.grad[i] + self.reac[ui][i];
                self.ke1[ji][i] = self.unew[i] + self.reac[ji][i];
            }
        }

        // Stage 2: explicit predictor for u, pointwise implicit solve for J.
        for p in &self.pairs {
            let (ui, ji) = (p.u_idx, p.j_idx);
            for i in 0..n {
                self.stage2[ui][i] = self.fields[ui][i] + h * g * self.ke1[ui][i];
            }
            Self::central_gradient(&self.stage2[ui], self.dx, &mut self.grad);
            let den = 1.0 + h * g / p.tau;
            for i in 0..n {
                let j2 = (self.fields[ji][i] + h * g * self.ke1[ji][i]
                    - h * g * p.nu * self.grad[i])
                    / den;
                self.stage2[ji][i] = j2;
                self.ki2[ji][i] = (j2 - self.fields[ji][i]) / (h * g) - self.ke1[ji][i];
            }
        }

        // Explicit RHS at stage 2.
        Self::reactions(&self.react, &self.stage2, &mut self.reac);
        for p in &self.pairs {
            let (ui, ji) = (p.u_idx, p.j_idx);
            Self::expl_pair_rhs(
                &self.stage2[ui],
                &self.stage2[ji],
                p.mu,
                self.dx,
                &mut self.su,
                &mut self.sj,
                &mut self.fu,
                &mut self.fj,
                &mut self.grad,
                &mut self.unew,
            );
            for i in 0..n {
                self.ke2[ui][i] = self.grad[i] + self.reac[ui][i];
                self.ke2[ji][i] = self.unew[i] + self.reac[ji][i];
            }
        }

        // Stage 3 (= new state): combine explicit stages, then the final
        // pointwise implicit solve for J against the updated gradient.
        for p in &self.pairs {
            let (ui, ji) = (p.u_idx, p.j_idx);
            for i in 0..n {
                self.unew[i] = self.fields[ui][i]
                    + h * (dlt * self.ke1[ui][i] + (1.0 - dlt) * self.ke2[ui][i]);
            }
            Self::central_gradient(&self.unew, self.dx, &mut self.grad);
            let den = 1.0 + h * g / p.tau;
            for i in 0..n {
                let jnew = (self.fields[ji][i]
                    + h * (dlt * self.ke1[ji][i] + (1.0 - dlt) * self.ke2[ji][i])
                    + h * (1.0 - g) * self.ki2[ji][i]
                    - h * g * p.nu * self.grad[i])
                    / den;
                self.fields[ji][i] = jnew;
            }
            self.fields[ui].copy_from_slice(&self.unew);
        }

        self.steps += 1;
    }

    /// Advance to `target`, clipping the final step to land exactly.
    fn advance_to(&mut self, target: f64) {
        while self.t < target - 1e-14 * target.max(1.0) {
            let h = self.dt.min(target - self.t);
            self.step(h);
            self.t += h;
        }
        self.t = target;
    }

    fn check_finite(&self) -> Result<(), SolveError> {
        for (f, field) in self.fields.iter().enumerate() {
            if let Some(i) = field.iter().position(|v| !v.is_finite()) {
                return Err(SolveError::NonFinite {
                    field: self.names[f].clone(),
                    cell: i,
                    x: self.centers[i],
                    t: self.t,
                });
            }
        }
        Ok(())
    }

    /// Linearly interpolate cell values onto a report node at fractional
    /// cell position `pos` (in units of Δx from the first center).
    fn sample_row(&self, field: usize, nodes: &[(usize, usize, f64)], out: &mut [f64]) {
        for (o, &(i0, i1, w)) in out.iter_mut().zip(nodes) {
            *o = (1.0 - w) * self.fields[field][i0] + w * self.fields[field][i1];
        }
    }
}

/// Solve the model to `t_end` and tabulate on the report grid.
pub fn imex_fv_solve(
    model: &ModelSpec,
    grid: &Grid1D,
    init: Vec<Vec<f64>>,
    t_end: f64,
    cfl: &CflConfig,
    report: &ReportSpec,
) -> Result<Trajectory, SolveError> {
    if report.nx < 2 || report.nt < 2 {
        return Err(SolveError::Config(
            "report grid needs at least 2 nodes and 2 time levels".into(),
        ));
    }
    let mut integ = Integrator::new(model, grid, init, cfl, t_end)?;

    // Precompute the cell pair and weight under each report node. The
    // fractional cell position q·n/nx − ½ is formed from exact integers so
    // that when nx divides n the weight is exactly ½ and each table value
    // is the exact average of the two neighbouring cells.
    let nodes: Vec<(usize, usize, f64)> = (0..report.nx)
        .map(|q| {
            let pos = (q * integ.n) as f64 / report.nx as f64 - 0.5;
            let base = pos.floor();
            let i0 = (base as i64).rem_euclid(integ.n as i64) as usize;
            (i0, (i0 + 1) % integ.n, pos - base)
        })
        .collect();
    let xs: Vec<f64> = (0..report.nx)
        .map(|q| grid.a + q as f64 * grid.len() / report.nx as f64)
        .collect();

    let nt = if t_end == 0.0 { 1 } else { report.nt };
    let ts: Vec<f64> = (0..nt)
        .map(|m| t_end * m as f64 / (nt - 1).max(1) as f64)
        .collect();

    let nf = integ.fields.len();
    let mut fields = vec![vec![vec![0.0; report.nx]; nt]; nf];
    for m in 0..nt {
        if m > 0 {
            integ.advance_to(ts[m]);
        }
        integ.check_finite()?;
        for (f, field) in fields.iter_mut().enumerate() {
            integ.sample_row(f, &nodes, &mut field[m]);
        }
    }

    Ok(Trajectory {
        schema_version: TRAJECTORY_SCHEMA_VERSION,
        field_names: integ.names.clone(),
        xs,
        ts,
        fields,
        meta: SolverMeta {
            scheme: "MUSCL-minmod/Rusanov + ARS(2,2,2) IMEX".into(),
            cfl: *cfl,
            n_cells: grid.n_cells,
            dt_nominal: integ.dt,
            steps: integ.steps,
        },
        tag: None,
    })
}

/// Solve to `t_end` and return the raw cell-centered state (no report
/// interpolation) — used for grid-convergence studies.
pub fn solve_final_state(
    model: &ModelSpec,
    grid: &Grid1D,
    init: Vec<Vec<f64>>,
    t_end: f64,
    cfl: &CflConfig,
) -> Result<Vec<Vec<f64>>, SolveError> {
    let mut integ = Integrator::new(model, grid, init, cfl, t_end)?;
    integ.advance_to(t_end);
    integ.check_finite()?;
    Ok(integ.fields)
}

/// Build the initial state from analytic initial data and solve: the one
/// call sites use to manufacture a scenario's ground truth.
pub fn generate_ground_truth(
    model: &ModelSpec,
    ic: &IcSpec,
    grid: &Grid1D,
    t_end: f64,
    cfl: &CflConfig,
    report: &ReportSpec,
) -> Result<Trajectory, SolveError> {
    let init = initial_state(model, ic, grid)?;
    imex_fv_solve(model, grid, init, t_end, cfl, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{BetaSpec, GtSpec, Param, SirSpec};

    fn approx(a: f64, b: f64, tol: f64) {
        assert!(
            (a - b).abs() <= tol,
            "left {a}, right {b}, diff {}, tol {tol}",
            (a - b).abs()
        );
    }

    fn gt_model(eps: f64, c: f64, sigma: f64) -> ModelSpec {
        ModelSpec::Gt(GtSpec {
            eps,
            c,
            sigma: Param::Known(sigma),
            source: None,
        })
    }

    fn test1_ic() -> IcSpec {
        IcSpec::GtCosine {
            mean: 6.0,
            amp: 3.0,
            k: 3.0,
        }
    }

    fn sir_model(lambda2: f64, tau: f64, beta: f64, gamma: f64) -> ModelSpec {
        let l = lambda2.sqrt();
        ModelSpec::Sir(SirSpec {
            tau: [tau; 3],
            lambda: [l; 3],
            beta: BetaSpec::Constant(Param::Known(beta)),
            gamma: Param::Known(gamma),
        })
    }

    fn two_hotspots() -> IcSpec {
        IcSpec::SirHotspots {
            bumps: vec![(0.01, 5.0), (1e-4, 15.0)],
        }
    }

    #[test]
    fn heat_profile_matches_initial_data_at_t0_and_quoted_values() {
        let ic = test1_ic();
        for q in 0..37 {
            let x = -1.0 + 2.0 * q as f64 / 37.0;
            let (rho_a, j_a) = analytic_heat_solution(x, 0.0, 1.0, 4.0, 6.0, 3.0, 3.0);
            let (rho_i, j_i) = ic.eval_gt(x, 0.25);
            approx(rho_a, rho_i, 1e-14);
            approx(j_a, j_i, 1e-14);
        }
        // Peak value at x = 0, t = 0.1: 6 + 3·exp(−9π²/40).
        let (peak, _) = analytic_heat_solution(0.0, 0.1, 1.0, 4.0, 6.0, 3.0, 3.0);
        approx(
            peak,
            6.0 + 3.0 * (-9.0 * std::f64::consts::PI.powi(2) / 40.0).exp(),
            1e-15,
        );
        approx(peak, 6.325612, 1e-5);
    }

    #[test]
    fn heat_profile_domain_average_is_the_mean() {
        // k = 3 gives three full periods on [−1, 1]; the uniform-node
        // average of the cosine mode cancels to rounding error.
        let n = 200;
        let mean: f64 = (0..n)
            .map(|q| {
                let x = -1.0 + 2.0 * q as f64 / n as f64;
                analytic_heat_solution(x, 0.03, 1.0, 4.0, 6.0, 3.0, 3.0).0
            })
            .sum::<f64>()
            / n as f64;
        approx(mean, 6.0, 1e-12);
    }

    #[test]
    fn stationary_disease_free_state_stays_put() {
        let model = sir_model(1e3, 1e-3, 12.0, 6.0);
        let grid = Grid1D::new(0.0, 20.0, 200).unwrap();
        let n = grid.n_cells;
        let init = vec![
            vec![1.0; n],
            vec![0.0; n],
            vec![0.0; n],
            vec![0.0; n],
            vec![0.0; n],
            vec![0.0; n],
        ];
        let fin = solve_final_state(&model, &grid, init, 0.5, &CflConfig::default()).unwrap();
        for i in 0..n {
            assert!((fin[0][i] - 1.0).abs() < 1e-13, "S drifted: {}", fin[0][i]);
            for f in 1..6 {
                assert!(fin[f][i].abs() < 1e-13, "field {f} drifted: {}", fin[f][i]);
            }
        }
    }

    #[test]
    fn stiff_gt_run_matches_the_diffusion_limit() {
        let model = gt_model(1e-4, 1.0, 4.0);
        let grid = Grid1D::new(-1.0, 1.0, 400).unwrap();
        let traj = generate_ground_truth(
            &model,
            &test1_ic(),
            &grid,
            0.1,
            &CflConfig::default(),
            &ReportSpec::default(),
        )
        .unwrap();

        let last = traj.ts.len() - 1;
        let err = traj.rel_l2_error_at(0, last, |x| {
            analytic_heat_solution(x, 0.1, 1.0, 4.0, 6.0, 3.0, 3.0).0
        });
        assert!(err < 1e-3, "rel L2 vs diffusion limit = {err}");

        // The cosine mode's amplitude 3 decays to ≈ 0.3256 by t = 0.1.
        let peak = traj.fields[0][last]
            .iter()
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        approx(peak - 6.0, 0.325612, 1e-3);

        // No source term: mass on the report grid is conserved.
        assert!(traj.conservation_drift(&[0]) < 1e-10);
    }

    #[test]
    fn accuracy_improves_monotonically_toward_the_stiff_limit() {
        let grid = Grid1D::new(-1.0, 1.0, 400).unwrap();
        let dist: Vec<f64> = [1e-2, 1e-4, 1e-6]
            .iter()
            .map(|&eps| {
                let traj = generate_ground_truth(
                    &gt_model(eps, 1.0, 4.0),
                    &test1_ic(),
                    &grid,
                    0.1,
                    &CflConfig::default(),
                    &ReportSpec::default(),
                )
                .unwrap();
                traj.rel_l2_error_at(0, traj.ts.len() - 1, |x| {
                    analytic_heat_solution(x, 0.1, 1.0, 4.0, 6.0, 3.0, 3.0).0
                })
            })
            .collect();
        assert!(
            dist[1] <= dist[0] * 1.01 && dist[2] <= dist[1] * 1.01,
            "distances to the limit not monotone: {dist:?}"
        );
    }

    /// L¹ self-convergence order between grids (N, 2N, 4N), comparing each
    /// coarse solution with the cell-pair average of the next finer one.
    fn convergence_order(eps: f64) -> f64 {
        let ic = IcSpec::GtCosine {
            mean: 2.0,
            amp: 1.0,
            k: 1.0,
        };
        let model = gt_model(eps, 1.0, 1.0);
        let t_end = 0.05;
        let solve = |n: usize| {
            let grid = Grid1D::new(-1.0, 1.0, n).unwrap();
            let init = initial_state(&model, &ic, &grid).unwrap();
            solve_final_state(&model, &grid, init, t_end, &CflConfig::default()).unwrap()
        };
        let (u200, u400, u800) = (solve(200), solve(400), solve(800));
        let l1 = |coarse: &[f64], fine: &[f64]| -> f64 {
            let dx = 2.0 / coarse.len() as f64;
            coarse
                .iter()
                .enumerate()
                .map(|(i, &c)| (c - 0.5 * (fine[2 * i] + fine[2 * i + 1])).abs() * dx)
                .sum()
        };
        let e1 = l1(&u200[0], &u400[0]);
        let e2 = l1(&u400[0], &u800[0]);
        (e1 / e2).log2()
    }

    #[test]
    fn second_order_in_the_kinetic_regime() {
        let order = convergence_order(1.0);
        assert!(order >= 1.8, "observed order {order}");
    }

    #[test]
    fn second_order_in_the_stiff_regime() {
        let order = convergence_order(1e-4);
        assert!(order >= 1.8, "observed order {order}");
    }

    #[test]
    fn sir_conserves_population_and_stays_nonnegative() {
        let grid = Grid1D::new(0.0, 20.0, 400).unwrap();
        for (lambda2, tau) in [(1e3, 1e-3), (1.0, 1.0)] {
            let model = sir_model(lambda2, tau, 12.0, 6.0);
            let traj = generate_ground_truth(
                &model,
                &two_hotspots(),
                &grid,
                2.0,
                &CflConfig::default(),
                &ReportSpec::default(),
            )
            .unwrap();
            let drift = traj.conservation_drift(&[0, 1, 2]);
            assert!(drift < 1e-10, "population drift {drift} at tau = {tau}");
            let min = traj.min_over(&[0, 1, 2]);
            assert!(min >= -1e-12, "density went negative: {min} at tau = {tau}");
            // The epidemic actually runs: infected mass must grow.
            let i_field = traj.field_index("I").unwrap();
            let last = traj.ts.len() - 1;
            assert!(traj.quadrature(i_field, last) > 2.0 * traj.quadrature(i_field, 0));
        }
    }

    #[test]
    fn zero_horizon_returns_the_initial_table() {
        let model = gt_model(1e-4, 1.0, 4.0);
        let grid = Grid1D::new(-1.0, 1.0, 400).unwrap();
        let init = initial_state(&model, &test1_ic(), &grid).unwrap();
        let traj = imex_fv_solve(
            &model,
            &grid,
            init.clone(),
            0.0,
            &CflConfig::default(),
            &ReportSpec::default(),
        )
        .unwrap();
        assert_eq!(traj.ts, vec![0.0]);
        assert_eq!(traj.meta.steps, 0);
        // Each node is the exact average of the two cells it sits between.
        for (q, &x) in traj.xs.iter().enumerate() {
            assert_eq!(x, -1.0 + q as f64 * 2.0 / 200.0);
            let i0 = (2 * q + 399) % 400;
            let i1 = 2 * q % 400;
            for f in 0..2 {
                assert_eq!(traj.fields[f][0][q], 0.5 * (init[f][i0] + init[f][i1]));
            }
        }
    }

    #[test]
    fn bilinear_sampling_reproduces_an_affine_table() {
        // A field linear in x and t is reproduced exactly away from the
        // periodic seam.
        let xs: Vec<f64> = (0..10).map(|q| q as f64).collect();
        let ts: Vec<f64> = (0..5).map(|m| m as f64 * 0.25).collect();
        let fields = vec![ts
            .iter()
            .map(|&t| xs.iter().map(|&x| 2.0 * x + 3.0 * t).collect())
            .collect()];
        let traj = Trajectory {
            schema_version: TRAJECTORY_SCHEMA_VERSION,
            field_names: vec!["u".into()],
            xs,
            ts,
            fields,
            meta: SolverMeta {
                scheme: "test".into(),
                cfl: CflConfig::default(),
                n_cells: 10,
                dt_nominal: 0.0,
                steps: 0,
            },
            tag: None,
        };
        approx(
            traj.sample_bilinear(0, 3.25, 0.6),
            2.0 * 3.25 + 3.0 * 0.6,
            1e-12,
        );
        approx(traj.sample_bilinear(0, 0.0, 1.0), 3.0, 1e-12);
        // Clamping in time.
        approx(traj.sample_bilinear(0, 2.0, 9.9), 4.0 + 3.0, 1e-12);
        // Periodic wrap in x: x = −0.5 sits between nodes 9 and 0.
        approx(
            traj.sample_bilinear(0, -0.5, 0.0),
            0.5 * (18.0 + 0.0),
            1e-12,
        );
    }

    #[test]
    fn trajectory_files_round_trip_bit_for_bit() {
        let model = gt_model(1e-2, 1.0, 4.0);
        let grid = Grid1D::new(-1.0, 1.0, 64).unwrap();
        let mut traj = generate_ground_truth(
            &model,
            &test1_ic(),
            &grid,
            0.01,
            &CflConfig::default(),
            &ReportSpec { nx: 32, nt: 5 },
        )
        .unwrap();
        traj.tag = Some("round-trip check".into());
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("truth");
        traj.save(&stem).unwrap();
        let back = Trajectory::load(&stem).unwrap();
        assert_eq!(traj, back);
    }

    #[test]
    fn configuration_errors_are_reported() {
        let grid = Grid1D::new(-1.0, 1.0, 64).unwrap();
        // Zero relaxation time: the implicit stages divide by tau.
        let model = ModelSpec::Sir(SirSpec {
            tau: [0.0; 3],
            lambda: [0.0; 3],
            beta: BetaSpec::Constant(Param::Known(1.0)),
            gamma: Param::Known(1.0),
        });
        let init = vec![vec![0.0; 64]; 6];
        let err = solve_final_state(&model, &grid, init, 1.0, &CflConfig::default());
        assert!(matches!(err, Err(SolveError::Config(_))));

        // Mismatched initial data family.
        let gt = gt_model(1e-2, 1.0, 4.0);
        let err = initial_state(&gt, &two_hotspots(), &grid);
        assert!(matches!(err, Err(SolveError::Config(_))));

        // Wrong field count.
        let err = solve_final_state(&gt, &grid, vec![vec![0.0; 64]], 1.0, &CflConfig::default());
        assert!(matches!(err, Err(SolveError::Config(_))));

        Grid1D::new(1.0, -1.0, 64).unwrap_err();
    }
}
