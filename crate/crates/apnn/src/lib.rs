//! Asymptotic-preserving neural networks (APNNs) for multiscale hyperbolic
//! transport models — the Goldstein–Taylor model, its source-term variant, and
//! a hyperbolic SIR epidemic model — together with a second-order AP-IMEX
//! finite-volume reference solver that generates synthetic ground truth.
//!
//! The crate is organized bottom-up:
//!
//! * [`autodiff`] — scalar reverse-mode tape plus forward-mode jets (value,
//!   d/dx, d/dt), composable so PDE residual losses stay differentiable with
//!   respect to network parameters.
//! * [`network`] — feed-forward surrogate with periodic input embedding,
//!   sinusoidal or tanh activations, SIREN-style initialization, and learnable
//!   physical parameters attached for inverse problems.
//! * [`batch`] — batched evaluator for the same network: forward jets and the
//!   hand-derived reverse pass expressed as dense matrix products, used by the
//!   training loop (the tape route verifies it).
//! * [`physics`] — model specifications and the AP / standard PDE residuals,
//!   kinetic–macroscopic changes of variables, Fick closures, reproduction
//!   number and conservation diagnostics.
//! * [`loss`] — weighted multi-term losses (data, boundary, residual,
//!   conservation) with two evaluation routes: fast batched and tape-verified.
//! * [`train`] — full-batch Adam with validation split, early stopping and
//!   convergence history.
//! * [`refsolver`] — AP-IMEX finite-volume reference solver and analytic
//!   limit solutions.
//! * [`scenario`] — the experiment catalog (named configurations), dataset
//!   assembly (lattice / uniform / importance sampling) and (de)serialization.
//! * [`metrics`] — post-training reports: parameter recovery, field errors,
//!   reproduction-number series, conservation drift.

// Validation guards are written `!(x > 0.0)` on purpose: unlike `x <= 0.0`,
// the negated form also rejects NaN. Indexed loops are kept where several
// parallel arrays share one index; zipped iterators would obscure the math.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod batch;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod physics;
pub mod refsolver;
pub mod scenario;
pub mod train;
