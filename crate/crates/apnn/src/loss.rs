//! The composite training loss: data, boundary/initial, residual, and (for
//! SIR) conservation terms, each a weighted mean squared error.
//!
//! Two evaluation routes produce the same numbers:
//!
//! * the fast route below — batched GEMM evaluation ([`crate::batch`]) with
//!   hand-derived seed vectors for each term's backward pass, including the
//!   gradient with respect to learnable physical parameters (σ, κ-profile
//!   coefficients, β-profile coefficients, γ), which enter the residuals as
//!   coefficients rather than network inputs;
//! * [`assemble_loss_tape`] — every point pushed through the scalar tape and
//!   the whole loss differentiated by reverse sweep. Orders of magnitude
//!   slower, but it contains no hand-derived calculus, so it serves as the
//!   reference the fast route is tested against (finite differences are the
//!   third, fully independent check).
//!
//! What makes the residual term asymptotic-preserving is inherited from
//! [`crate::physics`]: flux residuals are pre-multiplied by their relaxation
//! times, so the ε → 0 (or τ → 0) limit of the loss is exactly the loss of
//! the limiting diffusion system.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Tape, Values, Var};
use crate::batch::{
    backward_jets_batch, backward_values_batch, forward_jets_batch, forward_values_batch,
    BatchJets, GradStore, CHUNK,
};
use crate::network::{forward_jets_generic, record_params, NetworkArch, NetworkParams};
use crate::physics::{
    gt_coef, kinetic_from_macro, residual_gt_ap, residual_gt_standard, residual_sir_ap, sir_coef,
    BetaCoef, GtCoef, GtSpec, LearnSlots, ModelSpec, PhysicsError, SirCoef, SirSpec,
};

/// Which PDE residual the loss penalizes. `Standard` is the non-AP kinetic
/// formulation on (f⁺, f⁻), kept for the comparison study; GT only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualForm {
    Ap,
    Standard,
}

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error("residual point set is empty")]
    EmptyResidual,
    #[error("conservation quadrature needs at least 2 nodes")]
    FewQuadratureNodes,
    #[error("invalid loss weights: {0}")]
    BadWeights(String),
    #[error("dataset shape mismatch: {0}")]
    Shape(String),
    #[error("loss weights do not match the model family")]
    FamilyMismatch,
    #[error("the standard residual form applies to the GT model only")]
    StandardOnlyGt,
    #[error("the standard residual form does not support the source term")]
    StandardWithSource,
    #[error("the conservation term applies to the SIR model only")]
    ConservationOnlySir,
    #[error("tape failure: {0}")]
    Tape(String),
}

impl From<AdError> for LossError {
    fn from(e: AdError) -> Self {
        LossError::Tape(e.to_string())
    }
}

/// Measured values at scattered (x, t) points. One optional column per model
/// field; `None` marks an unobserved field (for SIR, fluxes are never
/// observed — measurements cover densities only).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DataSet {
    pub x: Vec<f64>,
    pub t: Vec<f64>,
    pub obs: Vec<Option<Vec<f64>>>,
}

/// Initial/boundary collocation points with the full state known at each.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundarySet {
    pub x: Vec<f64>,
    pub t: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

/// Interior collocation points where PDE residuals are penalized.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResidualSet {
    pub x: Vec<f64>,
    pub t: Vec<f64>,
}

/// Time levels and quadrature nodes for the total-population constraint.
/// `nodes` are uniform over the periodic domain (node spacing inferred from
/// the first two), and `q0` is the conserved total at t = 0 computed with
/// the same rectangle rule the term itself uses — on a periodic domain the
/// rectangle rule and the composite trapezoid coincide.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConservationSet {
    pub times: Vec<f64>,
    pub nodes: Vec<f64>,
    pub q0: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub data: DataSet,
    pub boundary: BoundarySet,
    pub residual: ResidualSet,
    pub conservation: Option<ConservationSet>,
}

impl Dataset {
    pub fn validate(&self, model: &ModelSpec) -> Result<(), LossError> {
        let nf = model.n_fields();
        let err = |m: String| Err(LossError::Shape(m));
        if self.data.x.len() != self.data.t.len() {
            return err("data x/t length mismatch".into());
        }
        if self.data.obs.len() != nf {
            return err(format!("data needs {nf} observation columns"));
        }
        for (f, col) in self.data.obs.iter().enumerate() {
            if let Some(col) = col {
                if col.len() != self.data.x.len() {
                    return err(format!("observation column {f} length mismatch"));
                }
            }
        }
        if self.boundary.x.len() != self.boundary.t.len() {
            return err("boundary x/t length mismatch".into());
        }
        if self.boundary.values.len() != nf {
            return err(format!("boundary needs {nf} value columns"));
        }
        for (f, col) in self.boundary.values.iter().enumerate() {
            if col.len() != self.boundary.x.len() {
                return err(format!("boundary column {f} length mismatch"));
            }
        }
        if self.residual.x.len() != self.residual.t.len() {
            return err("residual x/t length mismatch".into());
        }
        if let Some(cs) = &self.conservation {
            if cs.nodes.len() < 2 {
                return Err(LossError::FewQuadratureNodes);
            }
        }
        let finite = |vs: &[f64]| vs.iter().all(|v| v.is_finite());
        let all = self
            .data
            .x
            .iter()
            .chain(&self.data.t)
            .chain(self.data.obs.iter().flatten().flatten())
            .chain(&self.boundary.x)
            .chain(&self.boundary.t)
            .chain(self.boundary.values.iter().flatten())
            .chain(&self.residual.x)
            .chain(&self.residual.t);
        if !all.into_iter().all(|v| v.is_finite()) {
            return err("dataset contains non-finite values".into());
        }
        if let Some(cs) = &self.conservation {
            if !finite(&cs.times) || !finite(&cs.nodes) || !cs.q0.is_finite() {
                return err("conservation set contains non-finite values".into());
            }
        }
        Ok(())
    }
}

/// GT loss weights (a zero weight omits the sub-term).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtWeights {
    pub d_rho: f64,
    pub d_j: f64,
    pub b_rho: f64,
    pub b_j: f64,
    pub r_rho: f64,
    pub r_j: f64,
}

/// SIR loss weights, indexed in field order (S, I, R, J_S, J_I, J_R); a zero
/// weight omits the sub-term. `d` covers the density data terms, `c` the
/// conservation term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SirWeights {
    pub d: [f64; 3],
    pub b: [f64; 6],
    pub r: [f64; 6],
    pub c: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LossWeights {
    Gt(GtWeights),
    Sir(SirWeights),
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let check = |ws: &[f64], residual: &[f64]| -> Result<(), LossError> {
            if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(LossError::BadWeights(
                    "weights must be finite and nonnegative".into(),
                ));
            }
            if !residual.iter().any(|w| *w > 0.0) {
                return Err(LossError::BadWeights(
                    "at least one residual weight must be positive".into(),
                ));
            }
            Ok(())
        };
        match self {
            LossWeights::Gt(w) => check(
                &[w.d_rho, w.d_j, w.b_rho, w.b_j, w.r_rho, w.r_j],
                &[w.r_rho, w.r_j],
            ),
            LossWeights::Sir(w) => {
                let mut all: Vec<f64> = w.d.to_vec();
                all.extend(w.b);
                all.extend(w.r);
                all.push(w.c);
                check(&all, &w.r)
            }
        }
    }
}

/// Weighted value of every sub-term, grouped into the four buckets; `total`
/// is their sum.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub data: f64,
    pub boundary: f64,
    pub residual: f64,
    pub conservation: f64,
    /// (label, weighted value) per sub-term, in a stable order.
    pub parts: Vec<(String, f64)>,
}

#[derive(Clone, Copy)]
enum Term {
    Data,
    Boundary,
    Residual,
    Conservation,
}

impl LossBreakdown {
    fn add(&mut self, term: Term, label: String, value: f64) {
        match term {
            Term::Data => self.data += value,
            Term::Boundary => self.boundary += value,
            Term::Residual => self.residual += value,
            Term::Conservation => self.conservation += value,
        }
        self.total += value;
        self.parts.push((label, value));
    }
}

/// One observed quantity inside a data/boundary term: a fixed linear map of
/// the network outputs compared against targets under one weight.
struct ObsSpec<'a> {
    label: String,
    weight: f64,
    /// Coefficients of the observation operator over the output components.
    map: Vec<f64>,
    targets: Option<&'a [f64]>,
}

/// Shared machinery of the data and boundary terms (values-only network
/// evaluation). Returns the weighted sub-term per observable.
fn obs_term(
    arch: &NetworkArch,
    params: &NetworkParams,
    x: &[f64],
    t: &[f64],
    obs: &[ObsSpec<'_>],
    grads: &mut Option<&mut GradStore>,
) -> Vec<(String, f64)> {
    let n = x.len();
    let mut sums = vec![0.0; obs.len()];
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let m = end - start;
        let (out, stash) = forward_values_batch(arch, params, &x[start..end], &t[start..end]);
        let k = out.ncols();
        let mut bar = grads.as_ref().map(|_| Array2::<f64>::zeros((m, k)));
        for (oi, ob) in obs.iter().enumerate() {
            let targets = match (ob.weight > 0.0, ob.targets) {
                (true, Some(tg)) => tg,
                _ => continue,
            };
            let a = 2.0 * ob.weight / n as f64;
            for p in 0..m {
                let mut pred = 0.0;
                for (c, &mc) in ob.map.iter().enumerate() {
                    if mc != 0.0 {
                        pred += mc * out[[p, c]];
                    }
                }
                let diff = pred - targets[start + p];
                sums[oi] += diff * diff;
                if let Some(bar) = bar.as_mut() {
                    for (c, &mc) in ob.map.iter().enumerate() {
                        if mc != 0.0 {
                            bar[[p, c]] += a * diff * mc;
                        }
                    }
                }
            }
        }
        if let (Some(bar), Some(g)) = (bar.as_ref(), grads.as_deref_mut()) {
            backward_values_batch(arch, params, &stash, bar, g);
        }
    }
    obs.iter()
        .zip(sums)
        .map(|(ob, s)| {
            let mean = if n == 0 { 0.0 } else { s / n as f64 };
            (ob.label.clone(), ob.weight * mean)
        })
        .collect()
}

/// Total-population constraint: at each queried time level, the rectangle
/// quadrature of S+I+R over the periodic nodes is pinned to its initial
/// value.
fn conservation_term(
    arch: &NetworkArch,
    params: &NetworkParams,
    cs: &ConservationSet,
    weight: f64,
    grads: &mut Option<&mut GradStore>,
) -> f64 {
    let nc = cs.times.len();
    if nc == 0 || weight == 0.0 {
        return 0.0;
    }
    let dq = cs.nodes[1] - cs.nodes[0];
    let nq = cs.nodes.len();
    let mut tbuf = vec![0.0; nq];
    let mut sum = 0.0;
    for &tm in &cs.times {
        tbuf.fill(tm);
        let (out, stash) = forward_values_batch(arch, params, &cs.nodes, &tbuf);
        let mut q = 0.0;
        for p in 0..nq {
            q += out[[p, 0]] + out[[p, 1]] + out[[p, 2]];
        }
        let diff = dq * q - cs.q0;
        sum += diff * diff;
        if let Some(g) = grads.as_deref_mut() {
            let seed = 2.0 * weight / nc as f64 * diff * dq;
            let mut bar = Array2::<f64>::zeros(out.raw_dim());
            for p in 0..nq {
                for c in 0..3 {
                    bar[[p, c]] = seed;
                }
            }
            backward_values_batch(arch, params, &stash, &bar, g);
        }
    }
    weight * sum / nc as f64
}

struct GtLearnIdx {
    sigma: Option<usize>,
    kappa: [Option<usize>; 3],
}

impl GtLearnIdx {
    fn find(names: &[String]) -> Self {
        let pos = |n: &str| names.iter().position(|s| s == n);
        GtLearnIdx {
            sigma: pos("sigma"),
            kappa: [pos("kappa0"), pos("kappa1"), pos("kappa2")],
        }
    }
}

/// GT residual term, either form. Weights apply to the two residual
/// components in order: (ρ, j) for the AP form, (f⁺, f⁻) for the standard
/// form.
#[allow(clippy::too_many_arguments)]
fn residual_term_gt(
    arch: &NetworkArch,
    params: &NetworkParams,
    coef: &GtCoef<f64>,
    rs: &ResidualSet,
    w1: f64,
    w2: f64,
    form: ResidualForm,
    grads: &mut Option<&mut GradStore>,
) -> (f64, f64) {
    let n = rs.x.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let idx = GtLearnIdx::find(&params.learnable_names);
    let (mut s1, mut s2) = (0.0, 0.0);
    let f1 = 2.0 * w1 / n as f64;
    let f2 = 2.0 * w2 / n as f64;
    let eps2 = coef.eps * coef.eps;
    let c2 = coef.c * coef.c;
    let epc = coef.eps * coef.c;
    let sg = coef.sigma;

    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let m = end - start;
        let (out, stash) = forward_jets_batch(arch, params, &rs.x[start..end], &rs.t[start..end]);
        let mut bar = grads.as_ref().map(|_| BatchJets::zeros(m, 2));
        let mut dl_sigma = 0.0;
        let mut dl_kappa = [0.0; 3];
        for p in 0..m {
            let x = rs.x[start + p];
            let (v0, v1) = (out.val[[p, 0]], out.val[[p, 1]]);
            let (dx0, dx1) = (out.dx[[p, 0]], out.dx[[p, 1]]);
            let (dt0, dt1) = (out.dt[[p, 0]], out.dt[[p, 1]]);
            match form {
                ResidualForm::Ap => {
                    // R(ρ) = ∂tρ + ∂xj − κ(x)·ρ;  R(j) = ε²∂tj + c²∂xρ + σj.
                    let (kap, arg) = match coef.kappa {
                        Some([k0, k1, k2]) => {
                            let arg = k2 * (std::f64::consts::PI * x);
                            (k0 + k1 * arg.sin(), Some((k1, arg)))
                        }
                        None => (0.0, None),
                    };
                    let r1 = dt0 + dx1 - kap * v0;
                    let r2 = eps2 * dt1 + c2 * dx0 + sg * v1;
                    s1 += r1 * r1;
                    s2 += r2 * r2;
                    if let Some(bar) = bar.as_mut() {
                        let a1 = f1 * r1;
                        let a2 = f2 * r2;
                        bar.val[[p, 0]] = -a1 * kap;
                        bar.val[[p, 1]] = a2 * sg;
                        bar.dx[[p, 0]] = a2 * c2;
                        bar.dx[[p, 1]] = a1;
                        bar.dt[[p, 0]] = a1;
                        bar.dt[[p, 1]] = a2 * eps2;
                        if idx.sigma.is_some() {
                            dl_sigma += a2 * v1;
                        }
                        if let Some((k1, arg)) = arg {
                            dl_kappa[0] += -a1 * v0;
                            dl_kappa[1] += -a1 * v0 * arg.sin();
                            dl_kappa[2] += -a1 * v0 * k1 * arg.cos() * (std::f64::consts::PI * x);
                        }
                    }
                }
                ResidualForm::Standard => {
                    // R(f±) = ε²∂tf± ± εc∂xf± − (σ/2)(f∓ − f±).
                    let rp = eps2 * dt0 + epc * dx0 - 0.5 * sg * (v1 - v0);
                    let rm = eps2 * dt1 - epc * dx1 - 0.5 * sg * (v0 - v1);
                    s1 += rp * rp;
                    s2 += rm * rm;
                    if let Some(bar) = bar.as_mut() {
                        let a1 = f1 * rp;
                        let a2 = f2 * rm;
                        bar.val[[p, 0]] = 0.5 * sg * (a1 - a2);
                        bar.val[[p, 1]] = 0.5 * sg * (a2 - a1);
                        bar.dx[[p, 0]] = a1 * epc;
                        bar.dx[[p, 1]] = -a2 * epc;
                        bar.dt[[p, 0]] = a1 * eps2;
                        bar.dt[[p, 1]] = a2 * eps2;
                        if idx.sigma.is_some() {
                            dl_sigma += a1 * (-0.5 * (v1 - v0)) + a2 * (-0.5 * (v0 - v1));
                        }
                    }
                }
            }
        }
        if let (Some(bar), Some(g)) = (bar.as_ref(), grads.as_deref_mut()) {
            backward_jets_batch(arch, params, &stash, bar, g);
            if let Some(i) = idx.sigma {
                g.learn[i] += dl_sigma;
            }
            for (slot, dl) in idx.kappa.iter().zip(dl_kappa) {
                if let Some(i) = slot {
                    g.learn[*i] += dl;
                }
            }
        }
    }
    (w1 * s1 / n as f64, w2 * s2 / n as f64)
}

struct SirLearnIdx {
    beta: Option<usize>,
    beta0: Option<usize>,
    beta1: Option<usize>,
    zeta: Option<usize>,
    gamma: Option<usize>,
}

impl SirLearnIdx {
    fn find(names: &[String]) -> Self {
        let pos = |n: &str| names.iter().position(|s| s == n);
        SirLearnIdx {
            beta: pos("beta"),
            beta0: pos("beta0"),
            beta1: pos("beta1"),
            zeta: pos("zeta"),
            gamma: pos("gamma"),
        }
    }
}

/// SIR residual term (six AP residual components, weights in field order).
fn residual_term_sir(
    arch: &NetworkArch,
    params: &NetworkParams,
    coef: &SirCoef<f64>,
    rs: &ResidualSet,
    w: &[f64; 6],
    grads: &mut Option<&mut GradStore>,
) -> [f64; 6] {
    let n = rs.x.len();
    if n == 0 {
        return [0.0; 6];
    }
    let idx = SirLearnIdx::find(&params.learnable_names);
    let [t0, t1, t2] = coef.tau;
    let [d0, d1, d2] = coef.dcoef;
    let (ris, rri) = (coef.ratio_is, coef.ratio_ri);
    let gm = coef.gamma;
    let mut sums = [0.0; 6];
    let fac: Vec<f64> = w.iter().map(|wk| 2.0 * wk / n as f64).collect();

    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let m = end - start;
        let (out, stash) = forward_jets_batch(arch, params, &rs.x[start..end], &rs.t[start..end]);
        let mut bar = grads.as_ref().map(|_| BatchJets::zeros(m, 6));
        let mut dl_b = [0.0; 3]; // ∂L/∂(beta0|beta, beta1, zeta)
        let mut dl_g = 0.0;
        for p in 0..m {
            let x = rs.x[start + p];
            let v = |f: usize| out.val[[p, f]];
            let dxv = |f: usize| out.dx[[p, f]];
            let dtv = |f: usize| out.dt[[p, f]];
            let (s, i, ji) = (v(0), v(1), v(4));
            let js = v(3);
            // β(x) and its partials with respect to the profile parameters.
            let (b, db) = match coef.beta {
                BetaCoef::Constant(b) => (b, None),
                BetaCoef::Sinusoid { beta0, beta1, zeta } => {
                    let arg = zeta * (std::f64::consts::PI * x);
                    (
                        beta0 + beta1 * arg.sin(),
                        Some((arg.sin(), beta1 * arg.cos() * (std::f64::consts::PI * x))),
                    )
                }
            };
            let bsi = b * s * i;
            let bjsi = b * js * i;
            let r = [
                dtv(0) + dxv(3) + bsi,
                dtv(1) + dxv(4) - bsi + gm * i,
                dtv(2) + dxv(5) - gm * i,
                t0 * dtv(3) + d0 * dxv(0) + t0 * bjsi + js,
                t1 * dtv(4) + d1 * dxv(1) - t1 * ris * bjsi + t1 * gm * ji + ji,
                t2 * dtv(5) + d2 * dxv(2) - t2 * rri * gm * ji + v(5),
            ];
            for (k, rk) in r.iter().enumerate() {
                sums[k] += rk * rk;
            }
            if let Some(bar) = bar.as_mut() {
                let a: Vec<f64> = (0..6).map(|k| fac[k] * r[k]).collect();
                bar.dt[[p, 0]] = a[0];
                bar.dt[[p, 1]] = a[1];
                bar.dt[[p, 2]] = a[2];
                bar.dt[[p, 3]] = t0 * a[3];
                bar.dt[[p, 4]] = t1 * a[4];
                bar.dt[[p, 5]] = t2 * a[5];
                bar.dx[[p, 0]] = d0 * a[3];
                bar.dx[[p, 1]] = d1 * a[4];
                bar.dx[[p, 2]] = d2 * a[5];
                bar.dx[[p, 3]] = a[0];
                bar.dx[[p, 4]] = a[1];
                bar.dx[[p, 5]] = a[2];
                bar.val[[p, 0]] = (a[0] - a[1]) * b * i;
                bar.val[[p, 1]] = a[0] * b * s + a[1] * (gm - b * s) - a[2] * gm
                    + a[3] * t0 * b * js
                    - a[4] * t1 * ris * b * js;
                bar.val[[p, 3]] = a[3] * (t0 * b * i + 1.0) - a[4] * t1 * ris * b * i;
                bar.val[[p, 4]] = a[4] * (t1 * gm + 1.0) - a[5] * t2 * rri * gm;
                bar.val[[p, 5]] = a[5];
                // Learnable coefficients.
                let gb = (a[0] - a[1]) * s * i + (a[3] * t0 - a[4] * t1 * ris) * js * i;
                match db {
                    None => dl_b[0] += gb,
                    Some((sin_arg, dzeta)) => {
                        dl_b[0] += gb;
                        dl_b[1] += gb * sin_arg;
                        dl_b[2] += gb * dzeta;
                    }
                }
                dl_g += (a[1] - a[2]) * i + a[4] * t1 * ji - a[5] * t2 * rri * ji;
            }
        }
        if let (Some(bar), Some(g)) = (bar.as_ref(), grads.as_deref_mut()) {
            backward_jets_batch(arch, params, &stash, bar, g);
            if let Some(ix) = idx.beta {
                g.learn[ix] += dl_b[0];
            }
            if let Some(ix) = idx.beta0 {
                g.learn[ix] += dl_b[0];
            }
            if let Some(ix) = idx.beta1 {
                g.learn[ix] += dl_b[1];
            }
            if let Some(ix) = idx.zeta {
                g.learn[ix] += dl_b[2];
            }
            if let Some(ix) = idx.gamma {
                g.learn[ix] += dl_g;
            }
        }
    }
    let mut parts = [0.0; 6];
    for k in 0..6 {
        parts[k] = w[k] * sums[k] / n as f64;
    }
    parts
}

fn check_shapes(
    arch: &NetworkArch,
    params: &NetworkParams,
    model: &ModelSpec,
) -> Result<(), LossError> {
    crate::network::validate_params(arch, params).map_err(|e| LossError::Shape(e.to_string()))?;
    if arch.output_dim != model.n_fields() {
        return Err(LossError::Shape(format!(
            "network has {} outputs, model has {} fields",
            arch.output_dim,
            model.n_fields()
        )));
    }
    model.validate()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval_gt(
    arch: &NetworkArch,
    params: &NetworkParams,
    spec: &GtSpec,
    data: Option<&DataSet>,
    boundary: Option<&BoundarySet>,
    residual: Option<&ResidualSet>,
    w: &GtWeights,
    form: ResidualForm,
    mut grads: Option<&mut GradStore>,
) -> Result<LossBreakdown, LossError> {
    if form == ResidualForm::Standard && spec.source.is_some() {
        return Err(LossError::StandardWithSource);
    }
    let slots = LearnSlots {
        names: &params.learnable_names,
        values: &params.learnable,
    };
    let coef = gt_coef(&mut Values, spec, &slots)?;
    let mut bd = LossBreakdown::default();

    // Measured quantities are the network outputs themselves: (ρ, j) in the
    // AP form, (f⁺, f⁻) in the standard form — standard-mode datasets carry
    // kinetic targets directly.
    let data_labels = match form {
        ResidualForm::Ap => ["data_rho", "data_j"],
        ResidualForm::Standard => ["data_fplus", "data_fminus"],
    };
    if let Some(ds) = data {
        let obs = [
            ObsSpec {
                label: data_labels[0].into(),
                weight: w.d_rho,
                map: vec![1.0, 0.0],
                targets: ds.obs[0].as_deref(),
            },
            ObsSpec {
                label: data_labels[1].into(),
                weight: w.d_j,
                map: vec![0.0, 1.0],
                targets: ds.obs[1].as_deref(),
            },
        ];
        for (label, v) in obs_term(arch, params, &ds.x, &ds.t, &obs, &mut grads) {
            bd.add(Term::Data, label, v);
        }
    }

    if let Some(bs) = boundary {
        match form {
            ResidualForm::Ap => {
                let obs = [
                    ObsSpec {
                        label: "boundary_rho".into(),
                        weight: w.b_rho,
                        map: vec![1.0, 0.0],
                        targets: Some(&bs.values[0]),
                    },
                    ObsSpec {
                        label: "boundary_j".into(),
                        weight: w.b_j,
                        map: vec![0.0, 1.0],
                        targets: Some(&bs.values[1]),
                    },
                ];
                for (label, v) in obs_term(arch, params, &bs.x, &bs.t, &obs, &mut grads) {
                    bd.add(Term::Boundary, label, v);
                }
            }
            ResidualForm::Standard => {
                // Known (ρ, j) converted to kinetic targets.
                let mut fp = Vec::with_capacity(bs.x.len());
                let mut fm = Vec::with_capacity(bs.x.len());
                for p in 0..bs.x.len() {
                    let (a, b) =
                        kinetic_from_macro(bs.values[0][p], bs.values[1][p], coef.eps, coef.c);
                    fp.push(a);
                    fm.push(b);
                }
                let obs = [
                    ObsSpec {
                        label: "boundary_fplus".into(),
                        weight: w.b_rho,
                        map: vec![1.0, 0.0],
                        targets: Some(&fp),
                    },
                    ObsSpec {
                        label: "boundary_fminus".into(),
                        weight: w.b_j,
                        map: vec![0.0, 1.0],
                        targets: Some(&fm),
                    },
                ];
                for (label, v) in obs_term(arch, params, &bs.x, &bs.t, &obs, &mut grads) {
                    bd.add(Term::Boundary, label, v);
                }
            }
        }
    }

    if let Some(rs) = residual {
        let (p1, p2) = residual_term_gt(arch, params, &coef, rs, w.r_rho, w.r_j, form, &mut grads);
        let (l1, l2) = match form {
            ResidualForm::Ap => ("residual_rho", "residual_j"),
            ResidualForm::Standard => ("residual_fplus", "residual_fminus"),
        };
        bd.add(Term::Residual, l1.into(), p1);
        bd.add(Term::Residual, l2.into(), p2);
    }
    Ok(bd)
}

#[allow(clippy::too_many_arguments)]
fn eval_sir(
    arch: &NetworkArch,
    params: &NetworkParams,
    spec: &SirSpec,
    data: Option<&DataSet>,
    boundary: Option<&BoundarySet>,
    residual: Option<&ResidualSet>,
    conservation: Option<&ConservationSet>,
    w: &SirWeights,
    mut grads: Option<&mut GradStore>,
) -> Result<LossBreakdown, LossError> {
    let slots = LearnSlots {
        names: &params.learnable_names,
        values: &params.learnable,
    };
    let coef = sir_coef(&mut Values, spec, &slots)?;
    let names = ModelSpec::Sir(*spec).field_names();
    let mut bd = LossBreakdown::default();

    if let Some(ds) = data {
        for (f, col) in ds.obs.iter().enumerate().skip(3) {
            if col.is_some() {
                return Err(LossError::Shape(format!(
                    "flux observations ({}) are not part of the SIR data term",
                    names[f]
                )));
            }
        }
        let obs: Vec<ObsSpec> = (0..3)
            .map(|f| {
                let mut map = vec![0.0; 6];
                map[f] = 1.0;
                ObsSpec {
                    label: format!("data_{}", names[f]),
                    weight: w.d[f],
                    map,
                    targets: ds.obs[f].as_deref(),
                }
            })
            .collect();
        for (label, v) in obs_term(arch, params, &ds.x, &ds.t, &obs, &mut grads) {
            bd.add(Term::Data, label, v);
        }
    }

    if let Some(bs) = boundary {
        let obs: Vec<ObsSpec> = (0..6)
            .map(|f| {
                let mut map = vec![0.0; 6];
                map[f] = 1.0;
                ObsSpec {
                    label: format!("boundary_{}", names[f]),
                    weight: w.b[f],
                    map,
                    targets: Some(bs.values[f].as_slice()),
                }
            })
            .collect();
        for (label, v) in obs_term(arch, params, &bs.x, &bs.t, &obs, &mut grads) {
            bd.add(Term::Boundary, label, v);
        }
    }

    if let Some(rs) = residual {
        let parts = residual_term_sir(arch, params, &coef, rs, &w.r, &mut grads);
        for (f, p) in parts.into_iter().enumerate() {
            bd.add(Term::Residual, format!("residual_{}", names[f]), p);
        }
    }

    if let Some(cs) = conservation {
        let v = conservation_term(arch, params, cs, w.c, &mut grads);
        bd.add(Term::Conservation, "conservation".into(), v);
    }
    Ok(bd)
}

/// Assemble the full training loss (and, when `grads` is given, accumulate
/// its gradient with respect to all weights, biases, and learnable physical
/// parameters). The residual point set must be nonempty.
pub fn assemble_loss(
    arch: &NetworkArch,
    params: &NetworkParams,
    model: &ModelSpec,
    dataset: &Dataset,
    weights: &LossWeights,
    form: ResidualForm,
    grads: Option<&mut GradStore>,
) -> Result<LossBreakdown, LossError> {
    check_shapes(arch, params, model)?;
    weights.validate()?;
    dataset.validate(model)?;
    if dataset.residual.x.is_empty() {
        return Err(LossError::EmptyResidual);
    }
    match (model, weights) {
        (ModelSpec::Gt(spec), LossWeights::Gt(w)) => {
            if dataset.conservation.is_some() {
                return Err(LossError::ConservationOnlySir);
            }
            eval_gt(
                arch,
                params,
                spec,
                Some(&dataset.data),
                Some(&dataset.boundary),
                Some(&dataset.residual),
                w,
                form,
                grads,
            )
        }
        (ModelSpec::Sir(spec), LossWeights::Sir(w)) => {
            if form == ResidualForm::Standard {
                return Err(LossError::StandardOnlyGt);
            }
            eval_sir(
                arch,
                params,
                spec,
                Some(&dataset.data),
                Some(&dataset.boundary),
                Some(&dataset.residual),
                dataset.conservation.as_ref(),
                w,
                grads,
            )
        }
        _ => Err(LossError::FamilyMismatch),
    }
}

/// GT entry point (see [`assemble_loss`]).
pub fn assemble_loss_gt(
    arch: &NetworkArch,
    params: &NetworkParams,
    spec: &GtSpec,
    dataset: &Dataset,
    weights: &GtWeights,
    form: ResidualForm,
    grads: Option<&mut GradStore>,
) -> Result<LossBreakdown, LossError> {
    assemble_loss(
        arch,
        params,
        &ModelSpec::Gt(*spec),
        dataset,
        &LossWeights::Gt(*weights),
        form,
        grads,
    )
}

/// SIR entry point (see [`assemble_loss`]); quadrature nodes travel inside
/// `dataset.conservation`.
pub fn assemble_loss_sir(
    arch: &NetworkArch,
    params: &NetworkParams,
    spec: &SirSpec,
    dataset: &Dataset,
    weights: &SirWeights,
    grads: Option<&mut GradStore>,
) -> Result<LossBreakdown, LossError> {
    assemble_loss(
        arch,
        params,
        &ModelSpec::Sir(*spec),
        dataset,
        &LossWeights::Sir(*weights),
        ResidualForm::Ap,
        grads,
    )
}

/// Held-out loss: the data and residual terms only, evaluated on validation
/// point sets (which, unlike the training sets, may be empty — an empty set
/// contributes zero).
pub fn validation_loss(
    arch: &NetworkArch,
    params: &NetworkParams,
    model: &ModelSpec,
    data: &DataSet,
    residual: &ResidualSet,
    weights: &LossWeights,
    form: ResidualForm,
) -> Result<LossBreakdown, LossError> {
    check_shapes(arch, params, model)?;
    weights.validate()?;
    if data.x.len() != data.t.len()
        || data.obs.len() != model.n_fields()
        || residual.x.len() != residual.t.len()
    {
        return Err(LossError::Shape("validation set shape mismatch".into()));
    }
    match (model, weights) {
        (ModelSpec::Gt(spec), LossWeights::Gt(w)) => eval_gt(
            arch,
            params,
            spec,
            Some(data),
            None,
            Some(residual),
            w,
            form,
            None,
        ),
        (ModelSpec::Sir(spec), LossWeights::Sir(w)) => eval_sir(
            arch,
            params,
            spec,
            Some(data),
            None,
            Some(residual),
            None,
            w,
            None,
        ),
        _ => Err(LossError::FamilyMismatch),
    }
}

/// Reference implementation: the identical loss pushed through the scalar
/// tape, returning the breakdown and the gradient in canonical flat order.
/// Slow (every point re-records the network), intended for verification.
pub fn assemble_loss_tape(
    arch: &NetworkArch,
    params: &NetworkParams,
    model: &ModelSpec,
    dataset: &Dataset,
    weights: &LossWeights,
    form: ResidualForm,
) -> Result<(LossBreakdown, Vec<f64>), LossError> {
    check_shapes(arch, params, model)?;
    weights.validate()?;
    dataset.validate(model)?;
    if dataset.residual.x.is_empty() {
        return Err(LossError::EmptyResidual);
    }

    let mut tape = Tape::new();
    let (gp, leaves) = record_params(&mut tape, params);
    let slots = LearnSlots {
        names: &params.learnable_names,
        values: &gp.learnable,
    };
    let mut bd = LossBreakdown::default();
    let mut part_vars: Vec<Var> = Vec::new();

    // Mean of squared scalars, scaled by a weight.
    let mse = |tape: &mut Tape, sq: &[Var], weight: f64| -> Var {
        let mut acc = tape.constant(0.0);
        for &s in sq {
            acc = tape.add(acc, s);
        }
        tape.scale(acc, weight / sq.len().max(1) as f64)
    };

    match (model, weights) {
        (ModelSpec::Gt(spec), LossWeights::Gt(w)) => {
            if form == ResidualForm::Standard && spec.source.is_some() {
                return Err(LossError::StandardWithSource);
            }
            if dataset.conservation.is_some() {
                return Err(LossError::ConservationOnlySir);
            }
            let coef = gt_coef(&mut tape, spec, &slots)?;

            // Data: targets are on the network outputs themselves, (ρ, j) in
            // the AP form and (f⁺, f⁻) in the standard form.
            let ds = &dataset.data;
            let mut sq = [Vec::new(), Vec::new()];
            for p in 0..ds.x.len() {
                let jets = forward_jets_generic(&mut tape, &gp, arch, ds.x[p], ds.t[p]);
                for f in 0..2 {
                    if let Some(col) = &ds.obs[f] {
                        let tg = tape.constant(col[p]);
                        let d = tape.sub(jets[f].v, tg);
                        sq[f].push(tape.mul(d, d));
                    }
                }
            }
            let data_labels = match form {
                ResidualForm::Ap => ["data_rho", "data_j"],
                ResidualForm::Standard => ["data_fplus", "data_fminus"],
            };
            for (f, label) in data_labels.iter().enumerate() {
                let wgt = [w.d_rho, w.d_j][f];
                let v = mse(&mut tape, &sq[f], if sq[f].is_empty() { 0.0 } else { wgt });
                bd.add(Term::Data, label.to_string(), tape.value(v));
                part_vars.push(v);
            }

            // Boundary.
            let bs = &dataset.boundary;
            let mut sq = [Vec::new(), Vec::new()];
            for p in 0..bs.x.len() {
                let jets = forward_jets_generic(&mut tape, &gp, arch, bs.x[p], bs.t[p]);
                let targets = match form {
                    ResidualForm::Ap => (bs.values[0][p], bs.values[1][p]),
                    ResidualForm::Standard => {
                        kinetic_from_macro(bs.values[0][p], bs.values[1][p], coef.eps, coef.c)
                    }
                };
                for (f, tgt) in [targets.0, targets.1].into_iter().enumerate() {
                    let tg = tape.constant(tgt);
                    let d = tape.sub(jets[f].v, tg);
                    sq[f].push(tape.mul(d, d));
                }
            }
            let labels = match form {
                ResidualForm::Ap => ["boundary_rho", "boundary_j"],
                ResidualForm::Standard => ["boundary_fplus", "boundary_fminus"],
            };
            for (f, label) in labels.iter().enumerate() {
                let v = mse(&mut tape, &sq[f], [w.b_rho, w.b_j][f]);
                bd.add(Term::Boundary, label.to_string(), tape.value(v));
                part_vars.push(v);
            }

            // Residual.
            let rs = &dataset.residual;
            let mut sq = [Vec::new(), Vec::new()];
            for p in 0..rs.x.len() {
                let jets = forward_jets_generic(&mut tape, &gp, arch, rs.x[p], rs.t[p]);
                let (r1, r2) = match form {
                    ResidualForm::Ap => residual_gt_ap(&mut tape, jets[0], jets[1], &coef, rs.x[p]),
                    ResidualForm::Standard => {
                        residual_gt_standard(&mut tape, jets[0], jets[1], &coef)
                    }
                };
                sq[0].push(tape.mul(r1, r1));
                sq[1].push(tape.mul(r2, r2));
            }
            let labels = match form {
                ResidualForm::Ap => ["residual_rho", "residual_j"],
                ResidualForm::Standard => ["residual_fplus", "residual_fminus"],
            };
            for (f, label) in labels.iter().enumerate() {
                let v = mse(&mut tape, &sq[f], [w.r_rho, w.r_j][f]);
                bd.add(Term::Residual, label.to_string(), tape.value(v));
                part_vars.push(v);
            }
        }
        (ModelSpec::Sir(spec), LossWeights::Sir(w)) => {
            if form == ResidualForm::Standard {
                return Err(LossError::StandardOnlyGt);
            }
            let coef = sir_coef(&mut tape, spec, &slots)?;
            let names = model.field_names();

            let ds = &dataset.data;
            let mut sq = vec![Vec::new(); 3];
            for p in 0..ds.x.len() {
                let jets = forward_jets_generic(&mut tape, &gp, arch, ds.x[p], ds.t[p]);
                for f in 0..3 {
                    if let Some(col) = &ds.obs[f] {
                        let tg = tape.constant(col[p]);
                        let d = tape.sub(jets[f].v, tg);
                        sq[f].push(tape.mul(d, d));
                    }
                }
            }
            for f in 0..3 {
                let v = mse(
                    &mut tape,
                    &sq[f],
                    if sq[f].is_empty() { 0.0 } else { w.d[f] },
                );
                bd.add(Term::Data, format!("data_{}", names[f]), tape.value(v));
                part_vars.push(v);
            }

            let bs = &dataset.boundary;
            let mut sq = vec![Vec::new(); 6];
            for p in 0..bs.x.len() {
                let jets = forward_jets_generic(&mut tape, &gp, arch, bs.x[p], bs.t[p]);
                for f in 0..6 {
                    let tg = tape.constant(bs.values[f][p]);
                    let d = tape.sub(jets[f].v, tg);
                    sq[f].push(tape.mul(d, d));
                }
            }
            for f in 0..6 {
                let v = mse(&mut tape, &sq[f], w.b[f]);
                bd.add(
                    Term::Boundary,
                    format!("boundary_{}", names[f]),
                    tape.value(v),
                );
                part_vars.push(v);
            }

            let rs = &dataset.residual;
            let mut sq = vec![Vec::new(); 6];
            for p in 0..rs.x.len() {
                let jets = forward_jets_generic(&mut tape, &gp, arch, rs.x[p], rs.t[p]);
                let jets: [_; 6] = std::array::from_fn(|f| jets[f]);
                let r = residual_sir_ap(&mut tape, &jets, &coef, rs.x[p]);
                for f in 0..6 {
                    sq[f].push(tape.mul(r[f], r[f]));
                }
            }
            for f in 0..6 {
                let v = mse(&mut tape, &sq[f], w.r[f]);
                bd.add(
                    Term::Residual,
                    format!("residual_{}", names[f]),
                    tape.value(v),
                );
                part_vars.push(v);
            }

            if let Some(cs) = &dataset.conservation {
                let dq = cs.nodes[1] - cs.nodes[0];
                let mut sq = Vec::new();
                for &tm in &cs.times {
                    let mut q = tape.constant(0.0);
                    for &xq in &cs.nodes {
                        let jets = forward_jets_generic(&mut tape, &gp, arch, xq, tm);
                        let si = tape.add(jets[0].v, jets[1].v);
                        let sir = tape.add(si, jets[2].v);
                        q = tape.add(q, sir);
                    }
                    let qs = tape.scale(q, dq);
                    let q0 = tape.constant(cs.q0);
                    let d = tape.sub(qs, q0);
                    sq.push(tape.mul(d, d));
                }
                let v = mse(&mut tape, &sq, if sq.is_empty() { 0.0 } else { w.c });
                bd.add(Term::Conservation, "conservation".into(), tape.value(v));
                part_vars.push(v);
            }
        }
        _ => return Err(LossError::FamilyMismatch),
    }

    let mut total = tape.constant(0.0);
    for v in part_vars {
        total = tape.add(total, v);
    }
    let grad = tape.gradient(total, &leaves)?;
    Ok((bd, grad))
}
