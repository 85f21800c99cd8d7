//! The three PDE systems and their residuals.
//!
//! * Goldstein–Taylor (GT) in macroscopic variables (ρ, j), optionally with a
//!   space-dependent source κ(x)·ρ, plus the standard (non-AP) kinetic
//!   residual on (f⁺, f⁻).
//! * A two-velocity SIR transport model in macroscopic variables
//!   (S, I, R, J_S, J_I, J_R).
//!
//! The asymptotic-preserving residuals below are the relaxation systems with
//! each flux equation pre-multiplied by its relaxation time, so that setting
//! ε (or τ_i) to zero recovers exactly the residual of the diffusion limit —
//! this scaling is what makes a physics-informed loss built on them uniformly
//! accurate across regimes.
//!
//! Residual formulas are written once, generically over an
//! [`Algebra`](crate::autodiff::Algebra) backend, so the identical code path
//! produces plain numbers (fast evaluation, tests) or tape variables
//! (derivatives with respect to learnable physical parameters).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Algebra, Jet};

/// A physical scalar, either fixed or inferred during training. Learnable
/// parameters are stored raw (no positivity transform); `truth` is the value
/// used by the reference solver, `init` the optimizer's starting guess.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Param {
    Known(f64),
    Learnable { truth: f64, init: f64 },
}

impl Param {
    pub fn truth(self) -> f64 {
        match self {
            Param::Known(v) => v,
            Param::Learnable { truth, .. } => truth,
        }
    }
    pub fn init(self) -> f64 {
        match self {
            Param::Known(v) => v,
            Param::Learnable { init, .. } => init,
        }
    }
    pub fn is_learnable(self) -> bool {
        matches!(self, Param::Learnable { .. })
    }
}

/// Optional GT source term κ(x) = κ0 + κ1·sin(κ2·π·x).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtSource {
    pub kappa0: Param,
    pub kappa1: Param,
    pub kappa2: Param,
}

/// Goldstein–Taylor relaxation system
/// ∂t ρ + ∂x j = κ(x)·ρ,   ∂t j + (c²/ε²)·∂x ρ = −(σ/ε²)·j.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtSpec {
    pub eps: f64,
    pub c: f64,
    pub sigma: Param,
    pub source: Option<GtSource>,
}

impl GtSpec {
    /// Diffusion coefficient of the ε→0 limit, c²/σ (at the true σ).
    pub fn diffusion(&self) -> f64 {
        self.c * self.c / self.sigma.truth()
    }

    pub fn validate(&self) -> Result<(), PhysicsError> {
        if !(self.eps > 0.0) || !(self.c > 0.0) || !(self.sigma.truth() > 0.0) {
            return Err(PhysicsError::InvalidSpec(
                "GT requires eps > 0, c > 0, sigma > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Transmission rate: constant, or β(x) = β0 + β1·sin(ζ·π·x).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum BetaSpec {
    Constant(Param),
    Sinusoid {
        beta0: Param,
        beta1: Param,
        zeta: Param,
    },
}

impl BetaSpec {
    /// β(x) at the true coefficient values.
    pub fn truth_at(&self, x: f64) -> f64 {
        match *self {
            BetaSpec::Constant(b) => b.truth(),
            BetaSpec::Sinusoid { beta0, beta1, zeta } => {
                beta0.truth() + beta1.truth() * (zeta.truth() * std::f64::consts::PI * x).sin()
            }
        }
    }
}

/// Two-velocity SIR transport model. Component order is S, I, R throughout.
/// Diffusion coefficients are derived as D_i = λ_i²·τ_i, so that identity
/// holds exactly by construction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SirSpec {
    pub tau: [f64; 3],
    pub lambda: [f64; 3],
    pub beta: BetaSpec,
    pub gamma: Param,
}

impl SirSpec {
    pub fn diffusion(&self, i: usize) -> f64 {
        self.lambda[i] * self.lambda[i] * self.tau[i]
    }

    pub fn validate(&self) -> Result<(), PhysicsError> {
        if self.tau.iter().any(|&t| t < 0.0) || self.lambda.iter().any(|&l| l < 0.0) {
            return Err(PhysicsError::InvalidSpec(
                "SIR requires tau_i >= 0 and lambda_i >= 0".into(),
            ));
        }
        // The flux couplings divide by λ_S (in the J_I equation) and λ_I (in
        // the J_R equation); they are active only when the corresponding τ is
        // nonzero.
        if self.tau[1] > 0.0 && self.lambda[0] == 0.0 {
            return Err(PhysicsError::InvalidSpec(
                "lambda_S = 0 with the J_I coupling active".into(),
            ));
        }
        if self.tau[2] > 0.0 && self.lambda[1] == 0.0 {
            return Err(PhysicsError::InvalidSpec(
                "lambda_I = 0 with the J_R coupling active".into(),
            ));
        }
        let gamma_ok = self.gamma.truth() >= 0.0;
        let beta_ok = match self.beta {
            BetaSpec::Constant(b) => b.truth() >= 0.0,
            // Nonnegativity of a sinusoidal rate over the whole domain.
            BetaSpec::Sinusoid { beta0, beta1, .. } => beta0.truth() >= beta1.truth().abs(),
        };
        if !gamma_ok || !beta_ok {
            return Err(PhysicsError::InvalidSpec(
                "rates beta, gamma must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Which PDE system a scenario trains against.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ModelSpec {
    Gt(GtSpec),
    Sir(SirSpec),
}

impl ModelSpec {
    pub fn n_fields(&self) -> usize {
        match self {
            ModelSpec::Gt(_) => 2,
            ModelSpec::Sir(_) => 6,
        }
    }

    pub fn field_names(&self) -> &'static [&'static str] {
        match self {
            ModelSpec::Gt(_) => &["rho", "j"],
            ModelSpec::Sir(_) => &["S", "I", "R", "J_S", "J_I", "J_R"],
        }
    }

    pub fn validate(&self) -> Result<(), PhysicsError> {
        match self {
            ModelSpec::Gt(s) => s.validate(),
            ModelSpec::Sir(s) => s.validate(),
        }
    }

    /// Learnable physical parameters in canonical order: `(name, initial
    /// guess)`. Everything that resolves learnables (network attachment,
    /// coefficient binding, reports) relies on this one ordering.
    pub fn learnables(&self) -> Vec<(String, f64)> {
        self.learnable_params()
            .into_iter()
            .map(|(n, p)| (n.to_string(), p.init()))
            .collect()
    }

    /// `(name, true value)` for each learnable, same order as
    /// [`ModelSpec::learnables`].
    pub fn learnable_truths(&self) -> Vec<(String, f64)> {
        self.learnable_params()
            .into_iter()
            .map(|(n, p)| (n.to_string(), p.truth()))
            .collect()
    }

    fn learnable_params(&self) -> Vec<(&'static str, Param)> {
        let mut out = Vec::new();
        let mut push = |name: &'static str, p: Param| {
            if p.is_learnable() {
                out.push((name, p));
            }
        };
        #[allow(clippy::unit_arg)]
        match self {
            ModelSpec::Gt(g) => {
                push("sigma", g.sigma);
                if let Some(src) = g.source {
                    push("kappa0", src.kappa0);
                    push("kappa1", src.kappa1);
                    push("kappa2", src.kappa2);
                }
            }
            ModelSpec::Sir(s) => {
                match s.beta {
                    BetaSpec::Constant(b) => push("beta", b),
                    BetaSpec::Sinusoid { beta0, beta1, zeta } => {
                        push("beta0", beta0);
                        push("beta1", beta1);
                        push("zeta", zeta);
                    }
                }
                push("gamma", s.gamma);
            }
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum PhysicsError {
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
    #[error("learnable parameter {0:?} missing from the attached network")]
    MissingLearnable(String),
}

/// Analytic initial data for the catalog scenarios. Fluxes start in diffusive
/// equilibrium (Fick's law, J = −D·∂x density) built from the analytic
/// density gradient, so no discrete differentiation enters the initial state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum IcSpec {
    /// GT: ρ0 = mean + amp·cos(k·π·x).
    GtCosine { mean: f64, amp: f64, k: f64 },
    /// GT: ρ0 = base + amp·exp(−rate·x²).
    GtGaussian { base: f64, amp: f64, rate: f64 },
    /// SIR: I0 = Σ amp_i·exp(−(x−center_i)²), S0 = 1 − I0, R0 = 0.
    SirHotspots { bumps: Vec<(f64, f64)> },
}

impl IcSpec {
    /// GT initial state (ρ0, j0) at `x`, given the limit diffusion
    /// coefficient `d = c²/σ`.
    pub fn eval_gt(&self, x: f64, d: f64) -> (f64, f64) {
        match *self {
            IcSpec::GtCosine { mean, amp, k } => {
                let kp = k * std::f64::consts::PI;
                let rho = mean + amp * (kp * x).cos();
                let drho = -amp * kp * (kp * x).sin();
                (rho, fick_flux(drho, d))
            }
            IcSpec::GtGaussian { base, amp, rate } => {
                let g = (-rate * x * x).exp();
                let rho = base + amp * g;
                let drho = -2.0 * rate * x * amp * g;
                (rho, fick_flux(drho, d))
            }
            IcSpec::SirHotspots { .. } => panic!("SIR initial data used with a GT model"),
        }
    }

    /// SIR initial state (S, I, R, J_S, J_I, J_R) at `x`, given the diffusion
    /// coefficients `d = [D_S, D_I, D_R]`.
    pub fn eval_sir(&self, x: f64, d: [f64; 3]) -> [f64; 6] {
        match self {
            IcSpec::SirHotspots { bumps } => {
                let mut i0 = 0.0;
                let mut di0 = 0.0;
                for &(amp, center) in bumps {
                    let g = amp * (-(x - center) * (x - center)).exp();
                    i0 += g;
                    di0 += -2.0 * (x - center) * g;
                }
                // S = 1 − I ⇒ ∂xS = −∂xI; R ≡ 0.
                [
                    1.0 - i0,
                    i0,
                    0.0,
                    fick_flux(-di0, d[0]),
                    fick_flux(di0, d[1]),
                    0.0,
                ]
            }
            _ => panic!("GT initial data used with an SIR model"),
        }
    }

    /// Whether this initial data matches the given model family.
    pub fn matches(&self, model: &ModelSpec) -> bool {
        matches!(
            (self, model),
            (IcSpec::GtCosine { .. }, ModelSpec::Gt(_))
                | (IcSpec::GtGaussian { .. }, ModelSpec::Gt(_))
                | (IcSpec::SirHotspots { .. }, ModelSpec::Sir(_))
        )
    }
}

/// Resolves named learnable values (plain numbers or tape variables) when
/// binding specification parameters into residual coefficients.
pub struct LearnSlots<'a, V> {
    pub names: &'a [String],
    pub values: &'a [V],
}

impl<'a, V: Copy> LearnSlots<'a, V> {
    pub fn get(&self, name: &str) -> Result<V, PhysicsError> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.values[i])
            .ok_or_else(|| PhysicsError::MissingLearnable(name.to_string()))
    }
}

fn bind<A: Algebra>(
    alg: &mut A,
    p: Param,
    name: &str,
    slots: &LearnSlots<'_, A::V>,
) -> Result<A::V, PhysicsError> {
    match p {
        Param::Known(v) => Ok(alg.constant(v)),
        Param::Learnable { .. } => slots.get(name),
    }
}

/// GT residual coefficients over a backend. ε and c are never learnable and
/// stay plain; σ and the κ's may be backend variables.
pub struct GtCoef<V> {
    pub eps: f64,
    pub c: f64,
    pub sigma: V,
    pub kappa: Option<[V; 3]>,
}

pub fn gt_coef<A: Algebra>(
    alg: &mut A,
    spec: &GtSpec,
    slots: &LearnSlots<'_, A::V>,
) -> Result<GtCoef<A::V>, PhysicsError> {
    let sigma = bind(alg, spec.sigma, "sigma", slots)?;
    let kappa = match spec.source {
        None => None,
        Some(src) => Some([
            bind(alg, src.kappa0, "kappa0", slots)?,
            bind(alg, src.kappa1, "kappa1", slots)?,
            bind(alg, src.kappa2, "kappa2", slots)?,
        ]),
    };
    Ok(GtCoef {
        eps: spec.eps,
        c: spec.c,
        sigma,
        kappa,
    })
}

/// SIR residual coefficients over a backend. Only β's coefficients and γ may
/// be learnable; relaxation times, speeds and diffusion coefficients are
/// fixed numbers.
pub struct SirCoef<V> {
    pub tau: [f64; 3],
    pub dcoef: [f64; 3],
    /// λ_I/λ_S (J_I coupling) and λ_R/λ_I (J_R coupling); zero when the
    /// corresponding τ vanishes and the term is inactive.
    pub ratio_is: f64,
    pub ratio_ri: f64,
    pub beta: BetaCoef<V>,
    pub gamma: V,
}

pub enum BetaCoef<V> {
    Constant(V),
    Sinusoid { beta0: V, beta1: V, zeta: V },
}

pub fn sir_coef<A: Algebra>(
    alg: &mut A,
    spec: &SirSpec,
    slots: &LearnSlots<'_, A::V>,
) -> Result<SirCoef<A::V>, PhysicsError> {
    spec.validate()
        .map_err(|e| PhysicsError::InvalidSpec(e.to_string()))?;
    let beta = match spec.beta {
        BetaSpec::Constant(b) => BetaCoef::Constant(bind(alg, b, "beta", slots)?),
        BetaSpec::Sinusoid { beta0, beta1, zeta } => BetaCoef::Sinusoid {
            beta0: bind(alg, beta0, "beta0", slots)?,
            beta1: bind(alg, beta1, "beta1", slots)?,
            zeta: bind(alg, zeta, "zeta", slots)?,
        },
    };
    let ratio_is = if spec.tau[1] > 0.0 {
        spec.lambda[1] / spec.lambda[0]
    } else {
        0.0
    };
    let ratio_ri = if spec.tau[2] > 0.0 {
        spec.lambda[2] / spec.lambda[1]
    } else {
        0.0
    };
    Ok(SirCoef {
        tau: spec.tau,
        dcoef: [spec.diffusion(0), spec.diffusion(1), spec.diffusion(2)],
        ratio_is,
        ratio_ri,
        beta,
        gamma: bind(alg, spec.gamma, "gamma", slots)?,
    })
}

/// β(x) over the backend: β0 + β1·sin(ζ·π·x).
pub fn beta_at<A: Algebra>(alg: &mut A, beta: &BetaCoef<A::V>, x: f64) -> A::V {
    match beta {
        BetaCoef::Constant(b) => *b,
        BetaCoef::Sinusoid { beta0, beta1, zeta } => {
            let arg = alg.scale(*zeta, std::f64::consts::PI * x);
            let s = alg.sin(arg);
            let term = alg.mul(*beta1, s);
            alg.add(*beta0, term)
        }
    }
}

/// κ(x) over the backend: κ0 + κ1·sin(κ2·π·x).
pub fn kappa_at<A: Algebra>(alg: &mut A, kappa: &[A::V; 3], x: f64) -> A::V {
    let arg = alg.scale(kappa[2], std::f64::consts::PI * x);
    let s = alg.sin(arg);
    let term = alg.mul(kappa[1], s);
    alg.add(kappa[0], term)
}

/// Asymptotic-preserving GT residuals:
///
/// R(ρ) = ∂t ρ + ∂x j − κ(x)·ρ
/// R(j) = ε²·∂t j + c²·∂x ρ + σ·j
///
/// At ε = 0 these are exactly the residuals of the diffusion limit
/// ∂t ρ = (c²/σ)·∂xx ρ + κρ written with j as auxiliary variable.
pub fn residual_gt_ap<A: Algebra>(
    alg: &mut A,
    rho: Jet<A::V>,
    j: Jet<A::V>,
    coef: &GtCoef<A::V>,
    x: f64,
) -> (A::V, A::V) {
    let mut r_rho = alg.add(rho.dt, j.dx);
    if let Some(kappa) = &coef.kappa {
        let k = kappa_at(alg, kappa, x);
        let term = alg.mul(k, rho.v);
        r_rho = alg.sub(r_rho, term);
    }
    let a = alg.scale(j.dt, coef.eps * coef.eps);
    let b = alg.scale(rho.dx, coef.c * coef.c);
    let relax = alg.mul(coef.sigma, j.v);
    let ab = alg.add(a, b);
    (r_rho, alg.add(ab, relax))
}

/// Standard (non-AP) kinetic GT residuals on f⁺, f⁻:
///
/// R(f^±) = ε²·∂t f^± ± ε·c·∂x f^± − (σ/2)·(f^∓ − f^±)
///
/// As ε→0 only the relaxation survives, which forces f⁺ = f⁻ but loses the
/// diffusive time scale — the training failure this library demonstrates.
pub fn residual_gt_standard<A: Algebra>(
    alg: &mut A,
    fp: Jet<A::V>,
    fm: Jet<A::V>,
    coef: &GtCoef<A::V>,
) -> (A::V, A::V) {
    let eps2 = coef.eps * coef.eps;
    let epc = coef.eps * coef.c;
    let half_sigma = alg.scale(coef.sigma, 0.5);

    let tp = alg.scale(fp.dt, eps2);
    let xp = alg.scale(fp.dx, epc);
    let dp = alg.sub(fm.v, fp.v);
    let rp_relax = alg.mul(half_sigma, dp);
    let sum_p = alg.add(tp, xp);
    let r_p = alg.sub(sum_p, rp_relax);

    let tm = alg.scale(fm.dt, eps2);
    let xm = alg.scale(fm.dx, -epc);
    let dm = alg.sub(fp.v, fm.v);
    let rm_relax = alg.mul(half_sigma, dm);
    let sum_m = alg.add(tm, xm);
    let r_m = alg.sub(sum_m, rm_relax);

    (r_p, r_m)
}

/// Asymptotic-preserving SIR residuals, in component order
/// (S, I, R, J_S, J_I, J_R):
///
/// R(S)   = ∂t S + ∂x J_S + βSI
/// R(I)   = ∂t I + ∂x J_I − βSI + γI
/// R(R)   = ∂t R + ∂x J_R − γI
/// R(J_S) = τ_S·∂t J_S + D_S·∂x S + τ_S·β·J_S·I + J_S
/// R(J_I) = τ_I·∂t J_I + D_I·∂x I − τ_I·(λ_I/λ_S)·β·J_S·I + τ_I·γ·J_I + J_I
/// R(J_R) = τ_R·∂t J_R + D_R·∂x R − τ_R·(λ_R/λ_I)·γ·J_I + J_R
///
/// At τ_i = 0 with D_i held fixed the flux residuals reduce to Fick's law
/// J_i = −D_i·∂x(density) and the density residuals to the reaction-diffusion
/// limit.
pub fn residual_sir_ap<A: Algebra>(
    alg: &mut A,
    u: &[Jet<A::V>; 6],
    coef: &SirCoef<A::V>,
    x: f64,
) -> [A::V; 6] {
    let [s, i, r, js, ji, jr] = *u;
    let beta = beta_at(alg, &coef.beta, x);
    let si = alg.mul(s.v, i.v);
    let bsi = alg.mul(beta, si);
    let gi = alg.mul(coef.gamma, i.v);

    // Densities.
    let r_s = {
        let adv = alg.add(s.dt, js.dx);
        alg.add(adv, bsi)
    };
    let r_i = {
        let adv = alg.add(i.dt, ji.dx);
        let a = alg.sub(adv, bsi);
        alg.add(a, gi)
    };
    let r_r = {
        let adv = alg.add(r.dt, jr.dx);
        alg.sub(adv, gi)
    };

    // Fluxes (each equation pre-multiplied by its τ).
    let bjsi = {
        let jsi = alg.mul(js.v, i.v);
        alg.mul(beta, jsi)
    };
    let gji = alg.mul(coef.gamma, ji.v);

    let r_js = {
        let a = alg.scale(js.dt, coef.tau[0]);
        let b = alg.scale(s.dx, coef.dcoef[0]);
        let c = alg.scale(bjsi, coef.tau[0]);
        let ab = alg.add(a, b);
        let abc = alg.add(ab, c);
        alg.add(abc, js.v)
    };
    let r_ji = {
        let a = alg.scale(ji.dt, coef.tau[1]);
        let b = alg.scale(i.dx, coef.dcoef[1]);
        let c = alg.scale(bjsi, -coef.tau[1] * coef.ratio_is);
        let d = alg.scale(gji, coef.tau[1]);
        let ab = alg.add(a, b);
        let abc = alg.add(ab, c);
        let abcd = alg.add(abc, d);
        alg.add(abcd, ji.v)
    };
    let r_jr = {
        let a = alg.scale(jr.dt, coef.tau[2]);
        let b = alg.scale(r.dx, coef.dcoef[2]);
        let c = alg.scale(gji, -coef.tau[2] * coef.ratio_ri);
        let ab = alg.add(a, b);
        let abc = alg.add(ab, c);
        alg.add(abc, jr.v)
    };

    [r_s, r_i, r_r, r_js, r_ji, r_jr]
}

/// Kinetic variables from macroscopic: f^± = (ρ ± ε·j/c)/2.
pub fn kinetic_from_macro(rho: f64, j: f64, eps: f64, c: f64) -> (f64, f64) {
    let half_scaled = 0.5 * eps * j / c;
    (0.5 * rho + half_scaled, 0.5 * rho - half_scaled)
}

/// Macroscopic variables from kinetic: ρ = f⁺ + f⁻, j = c·(f⁺ − f⁻)/ε.
pub fn macro_from_kinetic(fp: f64, fm: f64, eps: f64, c: f64) -> (f64, f64) {
    (fp + fm, c * (fp - fm) / eps)
}

/// Fick's law pointwise: J = −D·∂x(density), from an analytic derivative.
pub fn fick_flux(ddx_density: f64, d: f64) -> f64 {
    -d * ddx_density
}

/// Fick's law on a uniform periodic grid, with a second-order central
/// difference for the density gradient.
pub fn fick_flux_profile(density: &[f64], d: f64, dx: f64) -> Vec<f64> {
    let n = density.len();
    (0..n)
        .map(|q| {
            let grad = (density[(q + 1) % n] - density[(q + n - 1) % n]) / (2.0 * dx);
            fick_flux(grad, d)
        })
        .collect()
}

/// Quadrature on a uniform periodic grid whose nodes exclude the right
/// endpoint: the rectangle rule, which for periodic data equals the composite
/// trapezoid exactly. Left-to-right summation keeps results deterministic.
pub fn periodic_quadrature(values: &[f64], dx: f64) -> f64 {
    values.iter().fold(0.0, |acc, v| acc + v) * dx
}

/// Effective reproduction number R_t = ∫βSI dx / ∫γI dx on a uniform periodic
/// grid. Returns `None` when the removal integral is below 1e-14 (R_t is then
/// undefined, reported as a missing value rather than an error).
pub fn effective_reproduction_number(
    xs: &[f64],
    s: &[f64],
    i: &[f64],
    beta: impl Fn(f64) -> f64,
    gamma: impl Fn(f64) -> f64,
    dx: f64,
) -> Option<f64> {
    let num: Vec<f64> = xs
        .iter()
        .zip(s.iter().zip(i))
        .map(|(&x, (&sv, &iv))| beta(x) * sv * iv)
        .collect();
    let den: Vec<f64> = xs.iter().zip(i).map(|(&x, &iv)| gamma(x) * iv).collect();
    let den_q = periodic_quadrature(&den, dx);
    if den_q.abs() < 1e-14 {
        return None;
    }
    Some(periodic_quadrature(&num, dx) / den_q)
}

/// Total population P = ∫(S+I+R) dx on a uniform periodic grid.
pub fn total_population(s: &[f64], i: &[f64], r: &[f64], dx: f64) -> f64 {
    let sums: Vec<f64> = s
        .iter()
        .zip(i.iter().zip(r))
        .map(|(&a, (&b, &c))| a + b + c)
        .collect();
    periodic_quadrature(&sums, dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Jet2, Values};
    use approx::assert_relative_eq;

    fn plain_gt(eps: f64, c: f64, sigma: f64) -> GtCoef<f64> {
        GtCoef {
            eps,
            c,
            sigma,
            kappa: None,
        }
    }

    #[test]
    fn gt_ap_vanishes_on_constant_state() {
        let coef = plain_gt(1e-3, 1.0, 4.0);
        let (rr, rj) = residual_gt_ap(
            &mut Values,
            Jet2::constant(5.0),
            Jet2::constant(0.0),
            &coef,
            0.3,
        );
        assert_eq!((rr, rj), (0.0, 0.0));
    }

    #[test]
    fn gt_ap_vanishes_on_the_heat_limit_solution() {
        // ρ = 6 + 3cos(3πx)·e^{−D(3π)²t}, j = −D·∂xρ, with ε = 0 (the limit
        // residual): both residual components are zero pointwise.
        let (c, sigma) = (1.0, 4.0);
        let d = c * c / sigma;
        let k = 3.0 * std::f64::consts::PI;
        let coef = plain_gt(0.0, c, sigma);
        for &(x, t) in &[(0.0, 0.0), (0.37, 0.05), (-0.81, 0.1), (0.5, 0.02)] {
            let decay = (-d * k * k * t).exp();
            let rho = Jet2::new(
                6.0 + 3.0 * (k * x).cos() * decay,
                -3.0 * k * (k * x).sin() * decay,
                -d * k * k * 3.0 * (k * x).cos() * decay,
            );
            let j = Jet2::new(
                d * 3.0 * k * (k * x).sin() * decay,
                d * 3.0 * k * k * (k * x).cos() * decay,
                -d * k * k * d * 3.0 * k * (k * x).sin() * decay,
            );
            let (rr, rj) = residual_gt_ap(&mut Values, rho, j, &coef, x);
            assert_relative_eq!(rr, 0.0, epsilon = 1e-9);
            assert_relative_eq!(rj, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn gt_ap_static_field_example() {
        // ρ = cos(πx), j = sin(πx), c = σ = ε = 1, static in time:
        // R(ρ) = π·cos(πx), R(j) = −π·sin(πx) + sin(πx).
        let pi = std::f64::consts::PI;
        let coef = plain_gt(1.0, 1.0, 1.0);
        for &x in &[-0.7, -0.2, 0.0, 0.4, 0.9] {
            let rho = Jet2::new((pi * x).cos(), -pi * (pi * x).sin(), 0.0);
            let j = Jet2::new((pi * x).sin(), pi * (pi * x).cos(), 0.0);
            let (rr, rj) = residual_gt_ap(&mut Values, rho, j, &coef, x);
            assert_relative_eq!(rr, pi * (pi * x).cos(), max_relative = 1e-14);
            assert_relative_eq!(
                rj,
                -pi * (pi * x).sin() + (pi * x).sin(),
                max_relative = 1e-13,
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn gt_source_term_enters_the_density_residual() {
        // κ(x) = κ0 + κ1·sin(κ2πx); static ρ = 1, j = 0 → R(ρ) = −κ(x).
        let mut slots_names = vec!["kappa2".to_string()];
        let slots_vals = vec![4.0];
        let spec = GtSpec {
            eps: 1e-3,
            c: 1.0,
            sigma: Param::Known(1.0),
            source: Some(GtSource {
                kappa0: Param::Known(0.0),
                kappa1: Param::Known(3.0),
                kappa2: Param::Learnable {
                    truth: 4.0,
                    init: 3.0,
                },
            }),
        };
        let slots = LearnSlots {
            names: &mut slots_names,
            values: &slots_vals,
        };
        let coef = gt_coef(&mut Values, &spec, &slots).unwrap();
        for &x in &[0.1, -0.6, 0.8] {
            let kappa = 3.0 * (4.0 * std::f64::consts::PI * x).sin();
            let (rr, _) = residual_gt_ap(
                &mut Values,
                Jet2::constant(1.0),
                Jet2::constant(0.0),
                &coef,
                x,
            );
            assert_relative_eq!(rr, -kappa, max_relative = 1e-14, epsilon = 1e-15);
        }
    }

    #[test]
    fn gt_standard_relaxation_only_cases() {
        let coef = plain_gt(0.0, 1.0, 4.0);
        // Equal kinetic densities → both residuals vanish.
        let (rp, rm) =
            residual_gt_standard(&mut Values, Jet2::constant(0.7), Jet2::constant(0.7), &coef);
        assert_eq!((rp, rm), (0.0, 0.0));
        // ε = 0 with gap d: R(f⁺) = σd/2, R(f⁻) = −σd/2.
        let d = 0.3;
        let (rp, rm) = residual_gt_standard(
            &mut Values,
            Jet2::constant(0.5 + d),
            Jet2::constant(0.5),
            &coef,
        );
        assert_relative_eq!(rp, 4.0 * d / 2.0, max_relative = 1e-14);
        assert_relative_eq!(rm, -4.0 * d / 2.0, max_relative = 1e-14);
    }

    #[test]
    fn gt_standard_linear_field_example() {
        // ε = 1, c = 1, σ = 4, f^± = ±x static:
        // R(f⁺) = 1 + 4x, R(f⁻) = 1 − 4x; at x = 0 both equal 1.
        let coef = plain_gt(1.0, 1.0, 4.0);
        for &x in &[0.0, 0.25, -0.5, 1.0] {
            let fp = Jet2::new(x, 1.0, 0.0);
            let fm = Jet2::new(-x, -1.0, 0.0);
            let (rp, rm) = residual_gt_standard(&mut Values, fp, fm, &coef);
            assert_relative_eq!(rp, 1.0 + 4.0 * x, max_relative = 1e-14);
            assert_relative_eq!(rm, 1.0 - 4.0 * x, max_relative = 1e-14);
        }
    }

    fn plain_sir(tau: [f64; 3], lambda: [f64; 3], beta: f64, gamma: f64) -> SirCoef<f64> {
        SirCoef {
            tau,
            dcoef: [
                lambda[0] * lambda[0] * tau[0],
                lambda[1] * lambda[1] * tau[1],
                lambda[2] * lambda[2] * tau[2],
            ],
            ratio_is: if tau[1] > 0.0 {
                lambda[1] / lambda[0]
            } else {
                0.0
            },
            ratio_ri: if tau[2] > 0.0 {
                lambda[2] / lambda[1]
            } else {
                0.0
            },
            beta: BetaCoef::Constant(beta),
            gamma,
        }
    }

    #[test]
    fn sir_disease_free_equilibrium_has_zero_residuals() {
        let coef = plain_sir([1e-3; 3], [31.6; 3], 12.0, 6.0);
        let u = [
            Jet2::constant(1.0),
            Jet2::constant(0.0),
            Jet2::constant(0.0),
            Jet2::constant(0.0),
            Jet2::constant(0.0),
            Jet2::constant(0.0),
        ];
        for r in residual_sir_ap(&mut Values, &u, &coef, 3.7) {
            assert_eq!(r, 0.0);
        }
    }

    #[test]
    fn sir_flux_residuals_reduce_to_fick_at_tau_zero() {
        // τ_i = 0 with D_i fixed: R(J_i) = D_i·∂x(density) + J_i, which
        // vanishes exactly when J_i = −D_i·∂x(density).
        let dcoef = [1.0, 2.0, 0.5];
        let coef = SirCoef {
            tau: [0.0; 3],
            dcoef,
            ratio_is: 0.0,
            ratio_ri: 0.0,
            beta: BetaCoef::Constant(12.0),
            gamma: 6.0,
        };
        let grads = [0.31, -0.12, 0.07];
        let u = [
            Jet2::new(0.8, grads[0], 0.0),
            Jet2::new(0.1, grads[1], 0.0),
            Jet2::new(0.1, grads[2], 0.0),
            Jet2::constant(fick_flux(grads[0], dcoef[0])),
            Jet2::constant(fick_flux(grads[1], dcoef[1])),
            Jet2::constant(fick_flux(grads[2], dcoef[2])),
        ];
        let res = residual_sir_ap(&mut Values, &u, &coef, 1.0);
        for k in 3..6 {
            assert_relative_eq!(res[k], 0.0, epsilon = 1e-15);
        }
    }

    /// Homogeneous-in-space SIR dynamics: an RK4 integration of the ODE
    /// system Ṡ = −βSI, İ = βSI − γI, Ṙ = γI is an independent oracle for the
    /// reaction signs. Time derivatives are taken from the trajectory by
    /// central differences, so the residual check is not circular.
    #[test]
    fn sir_density_residuals_vanish_on_ode_trajectory() {
        let (beta, gamma) = (12.0, 6.0);
        let rhs = |s: f64, i: f64| {
            let bsi = beta * s * i;
            (-bsi, bsi - gamma * i, gamma * i)
        };
        let step = |s: f64, i: f64, r: f64, h: f64| {
            let k1 = rhs(s, i);
            let k2 = rhs(s + 0.5 * h * k1.0, i + 0.5 * h * k1.1);
            let k3 = rhs(s + 0.5 * h * k2.0, i + 0.5 * h * k2.1);
            let k4 = rhs(s + h * k3.0, i + h * k3.1);
            (
                s + h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
                i + h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
                r + h / 6.0 * (k1.2 + 2.0 * k2.2 + 2.0 * k3.2 + k4.2),
            )
        };
        let h = 1e-5;
        let (mut s, mut i, mut r) = (0.99, 0.01, 0.0);
        let coef = plain_sir([0.0; 3], [1.0; 3], beta, gamma);
        let mut checked = 0;
        // `prev` lags one step behind (s,i,r); `fwd` is one step ahead, so
        // (fwd − prev)/2h is a central difference at the current state.
        let mut prev = (s, i, r);
        for n in 0..50_000 {
            let fwd = step(s, i, r, h);
            if n % 10_000 == 0 && n > 0 {
                let ds = (fwd.0 - prev.0) / (2.0 * h);
                let di = (fwd.1 - prev.1) / (2.0 * h);
                let dr = (fwd.2 - prev.2) / (2.0 * h);
                let u = [
                    Jet2::new(s, 0.0, ds),
                    Jet2::new(i, 0.0, di),
                    Jet2::new(r, 0.0, dr),
                    Jet2::constant(0.0),
                    Jet2::constant(0.0),
                    Jet2::constant(0.0),
                ];
                let res = residual_sir_ap(&mut Values, &u, &coef, 0.0);
                for k in 0..3 {
                    assert_relative_eq!(res[k], 0.0, epsilon = 1e-6);
                }
                checked += 1;
            }
            prev = (s, i, r);
            (s, i, r) = fwd;
        }
        assert!(checked >= 4);
    }

    #[test]
    fn fick_examples() {
        // Constant density → zero flux.
        assert_eq!(fick_flux(0.0, 0.25), 0.0);
        // ρ = 6 + 3cos(3πx), D = c²/σ = 1/4 → j = (9π/4)·sin(3πx).
        let pi = std::f64::consts::PI;
        let d = 0.25;
        for &x in &[0.13, -0.42, 0.77] {
            let ddx = -9.0 * pi * (3.0 * pi * x).sin();
            assert_relative_eq!(
                fick_flux(ddx, d),
                9.0 * pi / 4.0 * (3.0 * pi * x).sin(),
                max_relative = 1e-14,
                epsilon = 1e-15
            );
        }
        // Gaussian I = 0.01·e^{−(x−5)²}, D = 1 → J_I = 0.02(x−5)e^{−(x−5)²}.
        for &x in &[4.0, 5.0, 6.3] {
            let ddx = -0.02 * (x - 5.0) * (-(x - 5.0f64).powi(2)).exp();
            assert_relative_eq!(
                fick_flux(ddx, 1.0),
                0.02 * (x - 5.0) * (-(x - 5.0f64).powi(2)).exp(),
                max_relative = 1e-14,
                epsilon = 1e-18
            );
        }
        // Grid version converges at second order to the analytic flux.
        let n = 400;
        let dx = 2.0 / n as f64;
        let density: Vec<f64> = (0..n)
            .map(|q| {
                let x = -1.0 + q as f64 * dx;
                6.0 + 3.0 * (3.0 * pi * x).cos()
            })
            .collect();
        let flux = fick_flux_profile(&density, d, dx);
        for q in 0..n {
            let x = -1.0 + q as f64 * dx;
            let exact = 9.0 * pi / 4.0 * (3.0 * pi * x).sin();
            assert_relative_eq!(flux[q], exact, epsilon = 5e-3);
        }
    }

    #[test]
    fn reproduction_number_examples() {
        let n = 200;
        let dx = 20.0 / n as f64;
        let xs: Vec<f64> = (0..n).map(|q| q as f64 * dx).collect();
        let ones = vec![1.0; n];
        let i_field: Vec<f64> = xs
            .iter()
            .map(|&x| 0.01 * (-(x - 5.0f64).powi(2)).exp())
            .collect();
        // β = 12, γ = 6, S ≡ 1 → R_t = 2.
        let rt = effective_reproduction_number(&xs, &ones, &i_field, |_| 12.0, |_| 6.0, dx);
        assert_relative_eq!(rt.unwrap(), 2.0, max_relative = 1e-13);
        // β = γ, S ≡ 1 → R_t = 1 (endemic threshold).
        let rt = effective_reproduction_number(&xs, &ones, &i_field, |_| 7.0, |_| 7.0, dx);
        assert_relative_eq!(rt.unwrap(), 1.0, max_relative = 1e-13);
        // I ≡ 0 → denominator vanishes → undefined.
        let zeros = vec![0.0; n];
        assert_eq!(
            effective_reproduction_number(&xs, &ones, &zeros, |_| 12.0, |_| 6.0, dx),
            None
        );
    }

    #[test]
    fn reproduction_number_for_three_hotspot_initial_data() {
        // I(x,0) = 0.01e^{−(x−10/3)²} + 0.001e^{−(x−10)²} + 0.004e^{−(x−50/3)²},
        // S = 1 − I, β(x) = 9 + 2.5·sin(0.55πx), γ = 8 on [0,20] → R_t(0) ≈ 1.05.
        let n = 2000;
        let dx = 20.0 / n as f64;
        let xs: Vec<f64> = (0..n).map(|q| q as f64 * dx).collect();
        let i0 = |x: f64| {
            0.01 * (-(x - 10.0 / 3.0f64).powi(2)).exp()
                + 0.001 * (-(x - 10.0f64).powi(2)).exp()
                + 0.004 * (-(x - 50.0 / 3.0f64).powi(2)).exp()
        };
        let i_field: Vec<f64> = xs.iter().map(|&x| i0(x)).collect();
        let s_field: Vec<f64> = i_field.iter().map(|&i| 1.0 - i).collect();
        let beta = |x: f64| 9.0 + 2.5 * (0.55 * std::f64::consts::PI * x).sin();
        let rt = effective_reproduction_number(&xs, &s_field, &i_field, beta, |_| 8.0, dx).unwrap();
        assert!((rt - 1.05).abs() < 0.01, "R_t(0) = {rt}");
        assert_relative_eq!(rt, 1.0403809966, max_relative = 1e-6);
    }

    #[test]
    fn total_population_examples() {
        let n = 200;
        let dx = 20.0 / n as f64;
        let ones = vec![1.0; n];
        let zeros = vec![0.0; n];
        assert_relative_eq!(
            total_population(&ones, &zeros, &zeros, dx),
            20.0,
            max_relative = 1e-14
        );
        // S = 1 − I, R = 0 → S + I + R ≡ 1 → P = |domain| regardless of I.
        let xs: Vec<f64> = (0..n).map(|q| q as f64 * dx).collect();
        let i_field: Vec<f64> = xs
            .iter()
            .map(|&x| 0.01 * (-(x - 5.0f64).powi(2)).exp())
            .collect();
        let s_field: Vec<f64> = i_field.iter().map(|&i| 1.0 - i).collect();
        assert_relative_eq!(
            total_population(&s_field, &i_field, &zeros, dx),
            20.0,
            max_relative = 1e-14
        );
    }

    #[test]
    fn spec_validation_rejects_ill_posed_models() {
        let gt = GtSpec {
            eps: 0.0,
            c: 1.0,
            sigma: Param::Known(1.0),
            source: None,
        };
        assert!(gt.validate().is_err());
        let sir = SirSpec {
            tau: [0.0, 1.0, 0.0],
            lambda: [0.0, 1.0, 1.0],
            beta: BetaSpec::Constant(Param::Known(12.0)),
            gamma: Param::Known(6.0),
        };
        assert!(sir.validate().is_err(), "lambda_S = 0 with J_I coupling");
        let ok = SirSpec {
            tau: [1.0; 3],
            lambda: [1.0; 3],
            beta: BetaSpec::Constant(Param::Known(12.0)),
            gamma: Param::Known(6.0),
        };
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn learnable_ordering_is_canonical() {
        let spec = ModelSpec::Sir(SirSpec {
            tau: [1.0; 3],
            lambda: [1.0; 3],
            beta: BetaSpec::Sinusoid {
                beta0: Param::Learnable {
                    truth: 9.0,
                    init: 5.0,
                },
                beta1: Param::Learnable {
                    truth: 2.5,
                    init: 1.5,
                },
                zeta: Param::Learnable {
                    truth: 0.55,
                    init: 0.5,
                },
            },
            gamma: Param::Known(8.0),
        });
        let names: Vec<String> = spec.learnables().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["beta0", "beta1", "zeta"]);
        let inits: Vec<f64> = spec.learnables().into_iter().map(|(_, v)| v).collect();
        assert_eq!(inits, vec![5.0, 1.5, 0.5]);
        let truths: Vec<f64> = spec
            .learnable_truths()
            .into_iter()
            .map(|(_, v)| v)
            .collect();
        assert_eq!(truths, vec![9.0, 2.5, 0.55]);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn jet() -> impl Strategy<Value = Jet2> {
            (-2.0..2.0f64, -3.0..3.0f64, -3.0..3.0f64).prop_map(|(v, dx, dt)| Jet2::new(v, dx, dt))
        }

        proptest! {
            /// GT AP identity: R^ε(j) − R^0(j) = ε²·∂t j exactly (to fp), and
            /// the density residual is independent of ε.
            #[test]
            fn gt_ap_identity(rho in jet(), j in jet(), eps in 1e-6..1.0f64) {
                let (c, sigma) = (1.0, 4.0);
                let with_eps = plain_gt(eps, c, sigma);
                let at_zero = plain_gt(0.0, c, sigma);
                let (rr_e, rj_e) = residual_gt_ap(&mut Values, rho, j, &with_eps, 0.3);
                let (rr_0, rj_0) = residual_gt_ap(&mut Values, rho, j, &at_zero, 0.3);
                prop_assert_eq!(rr_e, rr_0);
                let diff = rj_e - rj_0;
                prop_assert!((diff - eps * eps * j.dt).abs() <= 1e-12 * (1.0 + rj_e.abs()));
            }

            /// SIR AP identity: each flux residual minus its τ=0 counterpart
            /// (same D) equals τ·(∂tJ + couplings) componentwise.
            #[test]
            fn sir_ap_identity(s in jet(), i in jet(), r in jet(),
                               js in jet(), ji in jet(), jr in jet(),
                               tau_s in 1e-6..1.0f64, tau_i in 1e-6..1.0f64, tau_r in 1e-6..1.0f64) {
                let lambda = [1.3, 0.9, 1.1];
                let (beta, gamma) = (12.0, 6.0);
                let tau = [tau_s, tau_i, tau_r];
                let full = plain_sir(tau, lambda, beta, gamma);
                let frozen = SirCoef {
                    tau: [0.0; 3],
                    dcoef: full.dcoef,
                    ratio_is: 0.0,
                    ratio_ri: 0.0,
                    beta: BetaCoef::Constant(beta),
                    gamma,
                };
                let u = [s, i, r, js, ji, jr];
                let res_full = residual_sir_ap(&mut Values, &u, &full, 0.5);
                let res_frozen = residual_sir_ap(&mut Values, &u, &frozen, 0.5);
                let bjsi = beta * js.v * i.v;
                let expected = [
                    tau[0] * (js.dt + bjsi),
                    tau[1] * (ji.dt - lambda[1] / lambda[0] * bjsi + gamma * ji.v),
                    tau[2] * (jr.dt - lambda[2] / lambda[1] * gamma * ji.v),
                ];
                for k in 0..3 {
                    let diff = res_full[3 + k] - res_frozen[3 + k];
                    let scale = 1.0 + res_full[3 + k].abs() + expected[k].abs();
                    prop_assert!((diff - expected[k]).abs() <= 1e-12 * scale,
                        "component {}: diff {} vs expected {}", k, diff, expected[k]);
                }
                // Density residuals don't depend on τ at all.
                for k in 0..3 {
                    prop_assert_eq!(res_full[k], res_frozen[k]);
                }
            }

            /// (f⁺,f⁻) → (ρ,j) → (f⁺,f⁻) is the identity to 1e-14, and the
            /// reverse composition too.
            #[test]
            fn kinetic_macro_round_trip(fp in -5.0..5.0f64, fm in -5.0..5.0f64,
                                        eps in 1e-4..1.0f64, c in 0.5..2.0f64) {
                let (rho, j) = macro_from_kinetic(fp, fm, eps, c);
                let (fp2, fm2) = kinetic_from_macro(rho, j, eps, c);
                prop_assert!((fp2 - fp).abs() <= 1e-14 * (1.0 + fp.abs()));
                prop_assert!((fm2 - fm).abs() <= 1e-14 * (1.0 + fm.abs()));
                let (rho2, j2) = macro_from_kinetic(fp2, fm2, eps, c);
                prop_assert!((rho2 - rho).abs() <= 1e-14 * (1.0 + rho.abs()));
                prop_assert!((j2 - j).abs() <= 1e-13 * (1.0 + j.abs()));
            }

            /// Reaction terms cancel across the three density residuals: with
            /// no transport (zero derivatives, zero fluxes) the residuals sum
            /// to zero — the algebraic basis of population conservation.
            #[test]
            fn sir_reactions_sum_to_zero(sv in 0.0..1.0f64, iv in 0.0..1.0f64, rv in 0.0..1.0f64,
                                         beta in 0.0..20.0f64, gamma in 0.0..10.0f64) {
                let coef = plain_sir([1e-3; 3], [1.0; 3], beta, gamma);
                let u = [
                    Jet2::constant(sv), Jet2::constant(iv), Jet2::constant(rv),
                    Jet2::constant(0.0), Jet2::constant(0.0), Jet2::constant(0.0),
                ];
                let res = residual_sir_ap(&mut Values, &u, &coef, 0.2);
                let total = res[0] + res[1] + res[2];
                prop_assert!(total.abs() <= 1e-13 * (1.0 + res[0].abs() + res[1].abs()));
            }
        }
    }
}
