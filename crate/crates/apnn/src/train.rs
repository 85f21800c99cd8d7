//! Full-batch Adam optimization of the composite loss, with a reproducible
//! train/validation split, per-epoch validation, early stopping, and a
//! complete per-epoch history.
//!
//! One run is sequential over epochs; everything is pinned by
//! [`TrainConfig::seed`], so identical configuration and dataset reproduce
//! the history bit-for-bit.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::GradStore;
use crate::loss::{
    assemble_loss, validation_loss, DataSet, Dataset, LossError, LossWeights, ResidualForm,
    ResidualSet,
};
use crate::network::{init_params, NetworkArch, NetworkParams};
use crate::physics::ModelSpec;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Network(#[from] crate::network::NetError),
    #[error("non-finite gradient component {index}")]
    NonFiniteGradient { index: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("history file malformed: {0}")]
    Format(String),
}

/// Optimization settings. Validation happens every epoch; `early_stop_patience`
/// counts consecutive validation evaluations without an improvement larger
/// than `early_stop_min_delta`. A `validation_fraction` of zero disables the
/// split and early stopping entirely.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub validation_fraction: f64,
    pub early_stop_patience: usize,
    pub early_stop_min_delta: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
    /// Optional max-norm gradient clip (diagnostic aid, off by default).
    pub max_grad_norm: Option<f64>,
    /// History rows are recorded every `log_stride` epochs (the final epoch
    /// is always recorded); validation still runs every epoch.
    pub log_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 1000,
            validation_fraction: 0.2,
            early_stop_patience: 500,
            early_stop_min_delta: 0.0,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
            max_grad_norm: None,
            log_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.epochs == 0 {
            return bad("epoch count must be positive");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation fraction must lie in [0, 1)");
        }
        if self.early_stop_patience == 0 {
            return bad("early-stop patience must be positive");
        }
        if !(self.early_stop_min_delta.is_finite() && self.early_stop_min_delta >= 0.0) {
            return bad("early-stop min-delta must be nonnegative");
        }
        for (v, n) in [(self.beta1, "beta1"), (self.beta2, "beta2")] {
            if !(0.0..1.0).contains(&v) {
                return Err(TrainError::Config(format!("{n} must lie in [0, 1)")));
            }
        }
        if !(self.eps_hat.is_finite() && self.eps_hat > 0.0) {
            return bad("adam epsilon must be positive");
        }
        if self.log_stride == 0 {
            return bad("log stride must be positive");
        }
        if let Some(c) = self.max_grad_norm {
            if !(c.is_finite() && c > 0.0) {
                return bad("gradient clip must be positive");
            }
        }
        Ok(())
    }
}

/// First/second moment estimates and the step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update in place:
///
/// m ← β₁m + (1−β₁)g,  v ← β₂v + (1−β₂)g²,  t ← t+1,
/// θ ← θ − lr · (m/(1−β₁ᵗ)) / (√(v/(1−β₂ᵗ)) + ε̂).
///
/// Learnable physical scalars sit at the tail of `theta` and are updated
/// identically to network weights.
pub fn adam_step(
    theta: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if theta.len() != grad.len() || state.m.len() != theta.len() {
        return Err(TrainError::Config(
            "adam buffers are shape-mismatched".into(),
        ));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient { index: i });
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = state.m[i] / bc1;
        let vh = state.v[i] / bc2;
        theta[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.eps_hat);
    }
    Ok(())
}

/// Held-out points carved from the training dataset: measured points and
/// residual collocation points (boundary/conservation sets always train).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationSet {
    pub data: DataSet,
    pub residual: ResidualSet,
}

fn pick(v: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| v[i]).collect()
}

/// Stream tag for the measured-point validation draw.
pub const DATA_SPLIT_STREAM: u64 = 0x9e3779b97f4a7c15;
/// Stream tag for the residual-point validation draw (independent of the
/// measured-point draw under the same run seed).
pub const RESIDUAL_SPLIT_STREAM: u64 = 0xd1b54a32d192ed03;

/// Sorted validation indices for a family of `n` points: `floor(fraction·n)`
/// distinct positions drawn uniformly under `ChaCha8(seed ^ stream)`. This is
/// the published split algorithm; dataset sidecar files record its output so
/// a run's held-out points can be reconstructed exactly.
pub fn validation_indices(n: usize, fraction: f64, seed: u64, stream: u64) -> Vec<usize> {
    let n_val = (fraction * n as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream);
    let mut chosen = rand::seq::index::sample(&mut rng, n.max(1), n_val.min(n)).into_vec();
    chosen.sort_unstable();
    chosen
}

/// Splits off `fraction` of the data points and, independently, of the
/// residual points (uniformly at random, reproducible under `seed`). The two
/// parts are disjoint and exhaustive; order within each part follows the
/// original order.
pub fn split_validation(
    dataset: &Dataset,
    fraction: f64,
    seed: u64,
) -> Result<(Dataset, ValidationSet), TrainError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(TrainError::Config(
            "validation fraction must lie in [0, 1)".into(),
        ));
    }
    // Independent streams for the two point families.
    let split_indices = |n: usize, stream: u64| -> (Vec<usize>, Vec<usize>) {
        let chosen = validation_indices(n, fraction, seed, stream);
        let mut mask = vec![false; n];
        for &i in &chosen {
            mask[i] = true;
        }
        let kept = (0..n).filter(|&i| !mask[i]).collect();
        (kept, chosen)
    };

    let (dk, dv) = split_indices(dataset.data.x.len(), DATA_SPLIT_STREAM);
    let (rk, rv) = split_indices(dataset.residual.x.len(), RESIDUAL_SPLIT_STREAM);

    let take_data = |idx: &[usize]| DataSet {
        x: pick(&dataset.data.x, idx),
        t: pick(&dataset.data.t, idx),
        obs: dataset
            .data
            .obs
            .iter()
            .map(|col| col.as_ref().map(|c| pick(c, idx)))
            .collect(),
    };
    let take_res = |idx: &[usize]| ResidualSet {
        x: pick(&dataset.residual.x, idx),
        t: pick(&dataset.residual.t, idx),
    };

    if !dataset.residual.x.is_empty() && rk.is_empty() {
        return Err(TrainError::Config("training residual part is empty".into()));
    }
    let train = Dataset {
        data: take_data(&dk),
        boundary: dataset.boundary.clone(),
        residual: take_res(&rk),
        conservation: dataset.conservation.clone(),
    };
    let val = ValidationSet {
        data: take_data(&dv),
        residual: take_res(&rv),
    };
    Ok((train, val))
}

/// Why a run ended.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum StopReason {
    /// Ran all configured epochs.
    MaxEpochs,
    /// Validation failed to improve for the configured patience.
    EarlyStop { epoch: usize },
    /// A loss term or gradient became non-finite; `term` names the first
    /// offending sub-term. The returned history and parameters are the last
    /// state before the update that would have consumed the bad value.
    Diverged { epoch: usize, term: String },
}

/// Per-epoch record of the run (one row per logged epoch).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<usize>,
    pub total: Vec<f64>,
    pub data: Vec<f64>,
    pub boundary: Vec<f64>,
    pub residual: Vec<f64>,
    pub conservation: Vec<f64>,
    /// Validation loss (data + residual on the held-out points); `None` when
    /// validation is disabled.
    pub validation: Vec<Option<f64>>,
    pub learnable_names: Vec<String>,
    /// One trajectory per learnable physical parameter, same row count.
    pub learnables: Vec<Vec<f64>>,
}

impl TrainHistory {
    fn push_row(
        &mut self,
        epoch: usize,
        bd: &crate::loss::LossBreakdown,
        val: Option<f64>,
        learn: &[f64],
    ) {
        self.epochs.push(epoch);
        self.total.push(bd.total);
        self.data.push(bd.data);
        self.boundary.push(bd.boundary);
        self.residual.push(bd.residual);
        self.conservation.push(bd.conservation);
        self.validation.push(val);
        for (tr, &v) in self.learnables.iter_mut().zip(learn) {
            tr.push(v);
        }
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// Writes the run as CSV: epoch, total, the four term groups, validation
    /// (empty cell when disabled), then one column per learnable parameter.
    pub fn save_csv(&self, path: &Path) -> Result<(), TrainError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        write!(
            w,
            "epoch,total,data,boundary,residual,conservation,validation"
        )?;
        for name in &self.learnable_names {
            write!(w, ",{name}")?;
        }
        writeln!(w)?;
        for r in 0..self.len() {
            write!(
                w,
                "{},{},{},{},{},{},",
                self.epochs[r],
                self.total[r],
                self.data[r],
                self.boundary[r],
                self.residual[r],
                self.conservation[r]
            )?;
            if let Some(v) = self.validation[r] {
                write!(w, "{v}")?;
            }
            for tr in &self.learnables {
                write!(w, ",{}", tr[r])?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self, TrainError> {
        let mut lines = BufReader::new(std::fs::File::open(path)?).lines();
        let header = lines
            .next()
            .ok_or_else(|| TrainError::Format("empty history file".into()))??;
        let cols: Vec<&str> = header.split(',').collect();
        const FIXED: [&str; 7] = [
            "epoch",
            "total",
            "data",
            "boundary",
            "residual",
            "conservation",
            "validation",
        ];
        if cols.len() < FIXED.len() || cols[..FIXED.len()] != FIXED {
            return Err(TrainError::Format("unexpected history header".into()));
        }
        let names: Vec<String> = cols[FIXED.len()..].iter().map(|s| s.to_string()).collect();
        let mut h = TrainHistory {
            learnable_names: names.clone(),
            learnables: vec![Vec::new(); names.len()],
            ..TrainHistory::default()
        };
        let parse = |s: &str, what: &str| -> Result<f64, TrainError> {
            s.parse::<f64>()
                .map_err(|_| TrainError::Format(format!("bad {what} value {s:?}")))
        };
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != cols.len() {
                return Err(TrainError::Format("row width mismatch".into()));
            }
            h.epochs.push(
                f[0].parse()
                    .map_err(|_| TrainError::Format(format!("bad epoch {:?}", f[0])))?,
            );
            h.total.push(parse(f[1], "total")?);
            h.data.push(parse(f[2], "data")?);
            h.boundary.push(parse(f[3], "boundary")?);
            h.residual.push(parse(f[4], "residual")?);
            h.conservation.push(parse(f[5], "conservation")?);
            h.validation.push(if f[6].is_empty() {
                None
            } else {
                Some(parse(f[6], "validation")?)
            });
            for (k, tr) in h.learnables.iter_mut().enumerate() {
                tr.push(parse(f[FIXED.len() + k], "learnable")?);
            }
        }
        Ok(h)
    }
}

/// Result of an optimization run. `params` are the parameters achieving the
/// best recorded validation loss (the final parameters when validation is
/// disabled); on divergence they are the last state before the bad update.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub history: TrainHistory,
    pub stop: StopReason,
    pub best_validation: Option<f64>,
    pub epochs_run: usize,
}

fn scatter(flat: &[f64], p: &mut NetworkParams) {
    let mut k = 0;
    for l in 0..p.weights.len() {
        for w in p.weights[l].iter_mut() {
            *w = flat[k];
            k += 1;
        }
        for b in p.biases[l].iter_mut() {
            *b = flat[k];
            k += 1;
        }
    }
    for v in p.learnable.iter_mut() {
        *v = flat[k];
        k += 1;
    }
    debug_assert_eq!(k, flat.len());
}

fn first_bad_part(bd: &crate::loss::LossBreakdown) -> Option<&str> {
    bd.parts
        .iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(l, _)| l.as_str())
}

/// Runs the full optimization: initializes the network from
/// `cfg.seed`, splits off the validation points, then iterates full-batch
/// Adam epochs with per-epoch validation and early stopping.
pub fn train(
    model: &ModelSpec,
    arch: &NetworkArch,
    dataset: &Dataset,
    weights: &LossWeights,
    form: ResidualForm,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let (train_ds, val) = split_validation(dataset, cfg.validation_fraction, cfg.seed)?;
    let learn = model.learnables();
    let mut params = init_params(arch, cfg.seed, &learn)?;
    let val_enabled =
        cfg.validation_fraction > 0.0 && (!val.data.x.is_empty() || !val.residual.x.is_empty());

    let mut history = TrainHistory {
        learnable_names: params.learnable_names.clone(),
        learnables: vec![Vec::new(); params.learnable.len()],
        ..TrainHistory::default()
    };
    let mut theta = params.flatten();
    let mut state = AdamState::new(theta.len());
    let mut grads = GradStore::zeros(arch, params.learnable.len());

    let mut best_val = f64::INFINITY;
    let mut best_params: Option<NetworkParams> = None;
    let mut patience_ref = f64::INFINITY;
    let mut streak = 0usize;
    let mut stop = StopReason::MaxEpochs;
    let mut epochs_run = 0usize;

    for epoch in 0..cfg.epochs {
        epochs_run = epoch + 1;
        grads.reset();
        let bd = assemble_loss(
            arch,
            &params,
            model,
            &train_ds,
            weights,
            form,
            Some(&mut grads),
        )?;

        let val_loss = if val_enabled {
            Some(
                validation_loss(
                    arch,
                    &params,
                    model,
                    &val.data,
                    &val.residual,
                    weights,
                    form,
                )?
                .total,
            )
        } else {
            None
        };

        let log_now = epoch % cfg.log_stride == 0 || epoch + 1 == cfg.epochs;
        if log_now {
            history.push_row(epoch, &bd, val_loss, &params.learnable);
        }

        if !bd.total.is_finite() {
            if !log_now {
                history.push_row(epoch, &bd, val_loss, &params.learnable);
            }
            let term = first_bad_part(&bd).unwrap_or("total").to_string();
            stop = StopReason::Diverged { epoch, term };
            break;
        }
        if let Some(v) = val_loss {
            if !v.is_finite() {
                stop = StopReason::Diverged {
                    epoch,
                    term: "validation".into(),
                };
                break;
            }
            if v < best_val {
                best_val = v;
                best_params = Some(params.clone());
            }
            if patience_ref - v > cfg.early_stop_min_delta {
                patience_ref = v;
                streak = 0;
            } else {
                streak += 1;
                if streak >= cfg.early_stop_patience {
                    stop = StopReason::EarlyStop { epoch };
                    break;
                }
            }
        }

        let flat = grads.to_flat();
        if let Some(i) = flat.iter().position(|g| !g.is_finite()) {
            let term = first_bad_part(&bd)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("gradient component {i}"));
            stop = StopReason::Diverged { epoch, term };
            break;
        }
        let flat = match cfg.max_grad_norm {
            Some(c) => {
                let norm = flat.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > c {
                    flat.iter().map(|g| g * c / norm).collect()
                } else {
                    flat
                }
            }
            None => flat,
        };
        adam_step(&mut theta, &flat, &mut state, cfg)?;
        scatter(&theta, &mut params);
    }

    let (params, best_validation) = match (&stop, best_params) {
        // On divergence, hand back the last healthy state we have.
        (StopReason::Diverged { .. }, Some(bp)) => (bp, Some(best_val)),
        (StopReason::Diverged { .. }, None) => (params, None),
        (_, Some(bp)) => (bp, Some(best_val)),
        (_, None) => (params, None),
    };
    Ok(TrainOutcome {
        params,
        history,
        stop,
        best_validation,
        epochs_run,
    })
}

/// Exponential moving average with smoothing 2/(window+1), seeded at the
/// first sample.
pub fn ema(xs: &[f64], window: usize) -> Vec<f64> {
    let alpha = 2.0 / (window as f64 + 1.0);
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = f64::NAN;
    for (i, &x) in xs.iter().enumerate() {
        acc = if i == 0 {
            x
        } else {
            alpha * x + (1.0 - alpha) * acc
        };
        out.push(acc);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{BoundarySet, GtWeights};
    use crate::network::Activation;
    use crate::physics::{GtSpec, Param};
    use crate::refsolver::analytic_heat_solution;
    use rand::Rng;

    fn cfg(lr: f64, epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            epochs,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut theta = vec![1.5, -2.0, 0.25];
        let grad = vec![0.0; 3];
        let mut st = AdamState::new(3);
        adam_step(&mut theta, &grad, &mut st, &cfg(0.01, 1)).unwrap();
        assert_eq!(theta, vec![1.5, -2.0, 0.25]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr_sign() {
        // Bias correction makes m̂ = g and v̂ = g² on the first step, so the
        // update is −lr·g/(|g| + ε̂) ≈ −lr·sign(g) for |g| ≫ ε̂.
        let mut theta = vec![0.0, 0.0];
        let grad = vec![0.5, -3.0e4];
        let mut st = AdamState::new(2);
        let c = cfg(0.01, 1);
        adam_step(&mut theta, &grad, &mut st, &c).unwrap();
        assert!((theta[0] + 0.01).abs() < 1e-9);
        assert!((theta[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn adam_constant_gradient_steps_are_uniform() {
        // With constant g the bias-corrected moments stay m̂ = g, v̂ = g²,
        // so every step decreases θ by ≈ lr.
        let mut theta = vec![5.0];
        let mut st = AdamState::new(1);
        let c = cfg(0.01, 1);
        let mut prev = theta[0];
        for _ in 0..10 {
            adam_step(&mut theta, &[1.0], &mut st, &c).unwrap();
            let delta = prev - theta[0];
            assert!((delta - 0.01).abs() < 1e-9, "step size {delta}");
            prev = theta[0];
        }
        assert!((theta[0] - 4.9).abs() < 1e-8);

        let err = adam_step(&mut theta, &[f64::NAN], &mut st, &c);
        assert!(matches!(
            err,
            Err(TrainError::NonFiniteGradient { index: 0 })
        ));
    }

    fn big_dataset(n: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut pts = |n: usize| -> (Vec<f64>, Vec<f64>) {
            (
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                (0..n).map(|_| rng.random_range(0.0..0.1)).collect(),
            )
        };
        let (dx, dt) = pts(n);
        let rho = dx.iter().map(|x| 6.0 + x).collect();
        let (rx, rt) = pts(n);
        Dataset {
            data: DataSet {
                x: dx,
                t: dt,
                obs: vec![Some(rho), None],
            },
            boundary: BoundarySet {
                x: vec![0.0],
                t: vec![0.0],
                values: vec![vec![6.0], vec![0.0]],
            },
            residual: ResidualSet { x: rx, t: rt },
            conservation: None,
        }
    }

    #[test]
    fn split_counts_match_the_fraction() {
        let ds = big_dataset(24000);
        let (tr, va) = split_validation(&ds, 0.2, 7).unwrap();
        assert_eq!(tr.data.x.len(), 19200);
        assert_eq!(va.data.x.len(), 4800);
        assert_eq!(tr.residual.x.len(), 19200);
        assert_eq!(va.residual.x.len(), 4800);
        // Disjoint and exhaustive: the union of x-values is the original
        // multiset (points are generic random draws, so no collisions).
        let mut union: Vec<f64> = tr.data.x.iter().chain(&va.data.x).copied().collect();
        let mut orig = ds.data.x.clone();
        union.sort_by(f64::total_cmp);
        orig.sort_by(f64::total_cmp);
        assert_eq!(union, orig);
        // Observation columns follow their points.
        for (x, r) in tr.data.x.iter().zip(tr.data.obs[0].as_ref().unwrap()) {
            assert_eq!(*r, 6.0 + x);
        }
        assert!(tr.data.obs[1].is_none());
    }

    #[test]
    fn split_fraction_zero_gives_empty_validation() {
        let ds = big_dataset(50);
        let (tr, va) = split_validation(&ds, 0.0, 1).unwrap();
        assert_eq!(tr.data.x, ds.data.x);
        assert_eq!(tr.residual.x, ds.residual.x);
        assert!(va.data.x.is_empty() && va.residual.x.is_empty());
        assert!(split_validation(&ds, 1.0, 1).is_err());
    }

    #[test]
    fn split_is_reproducible() {
        let ds = big_dataset(500);
        let (t1, v1) = split_validation(&ds, 0.2, 11).unwrap();
        let (t2, v2) = split_validation(&ds, 0.2, 11).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(v1, v2);
        let (_, v3) = split_validation(&ds, 0.2, 12).unwrap();
        assert_ne!(v1, v3);
        // Data and residual splits are independent draws.
        let val_x: Vec<f64> = v1.data.x.clone();
        assert_ne!(val_x, v1.residual.x);
    }

    fn tiny_arch(width: usize) -> NetworkArch {
        NetworkArch {
            depth: 3,
            width,
            output_dim: 2,
            activation: Activation::Tanh,
            embedding: None,
            time_rescale: 0.1,
            omega0: 1.0,
        }
    }

    /// Scattered measurements of the slow diffusive profile plus residual
    /// collocation points — a desk-size version of the σ-recovery setup.
    fn heat_dataset(seed: u64, nd: usize, nr: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = |n: usize| -> (Vec<f64>, Vec<f64>) {
            (
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                (0..n).map(|_| rng.random_range(0.0..0.1)).collect(),
            )
        };
        let (dx, dt) = pts(nd);
        let rho = dx
            .iter()
            .zip(&dt)
            .map(|(&x, &t)| analytic_heat_solution(x, t, 1.0, 4.0, 6.0, 3.0, 3.0).0)
            .collect();
        let nb = 32;
        let bx: Vec<f64> = (0..nb).map(|i| -1.0 + 2.0 * i as f64 / nb as f64).collect();
        let mut bvals = vec![Vec::with_capacity(nb), Vec::with_capacity(nb)];
        for &x in &bx {
            let (r0, j0) = analytic_heat_solution(x, 0.0, 1.0, 4.0, 6.0, 3.0, 3.0);
            bvals[0].push(r0);
            bvals[1].push(j0);
        }
        let (rx, rt) = pts(nr);
        Dataset {
            data: DataSet {
                x: dx,
                t: dt,
                obs: vec![Some(rho), None],
            },
            boundary: BoundarySet {
                x: bx,
                t: vec![0.0; nb],
                values: bvals,
            },
            residual: ResidualSet { x: rx, t: rt },
            conservation: None,
        }
    }

    fn heat_model() -> ModelSpec {
        ModelSpec::Gt(GtSpec {
            eps: 1e-4,
            c: 1.0,
            sigma: Param::Learnable {
                truth: 4.0,
                init: 2.0,
            },
            source: None,
        })
    }

    fn heat_weights() -> LossWeights {
        LossWeights::Gt(GtWeights {
            d_rho: 100.0,
            d_j: 0.0,
            b_rho: 1.0,
            b_j: 1.0,
            r_rho: 1.0,
            r_j: 1.0,
        })
    }

    #[test]
    fn zero_initial_loss_leaves_parameters_fixed() {
        // Data generated by the zero network with exact residuals: zero
        // gradient at a global minimum, so Adam must not move anything.
        let arch = tiny_arch(6);
        let model = ModelSpec::Gt(GtSpec {
            eps: 1e-2,
            c: 1.0,
            sigma: Param::Known(4.0),
            source: None,
        });
        let mut ds = big_dataset(40);
        *ds.data.obs[0].as_mut().unwrap() = vec![0.0; 40];
        ds.boundary.values = vec![vec![0.0], vec![0.0]];
        let c = TrainConfig {
            epochs: 5,
            validation_fraction: 0.25,
            ..cfg(1e-2, 5)
        };
        let out = train(&model, &arch, &ds, &heat_weights(), ResidualForm::Ap, &c).unwrap();
        // init_params draws weights but this dataset is only zero-loss for a
        // zero network; instead verify directly with a zero network:
        let mut p = init_params(&arch, c.seed, &[]).unwrap();
        for w in &mut p.weights {
            w.fill(0.0);
        }
        let bd = assemble_loss(
            &arch,
            &p,
            &model,
            &ds,
            &heat_weights(),
            ResidualForm::Ap,
            None,
        )
        .unwrap();
        assert_eq!(bd.total, 0.0);
        let mut grads = GradStore::zeros(&arch, 0);
        assemble_loss(
            &arch,
            &p,
            &model,
            &ds,
            &heat_weights(),
            ResidualForm::Ap,
            Some(&mut grads),
        )
        .unwrap();
        let flat0 = p.flatten();
        let mut theta = flat0.clone();
        let mut st = AdamState::new(theta.len());
        for _ in 0..5 {
            adam_step(&mut theta, &grads.to_flat(), &mut st, &c).unwrap();
        }
        assert_eq!(theta, flat0);
        // And the general run completed with a full history.
        assert_eq!(out.history.len(), 5);
    }

    #[test]
    fn training_reduces_the_loss() {
        let arch = tiny_arch(12);
        let model = heat_model();
        let ds = heat_dataset(3, 300, 300);
        let c = TrainConfig {
            seed: 3,
            ..cfg(1e-2, 400)
        };
        let out = train(&model, &arch, &ds, &heat_weights(), ResidualForm::Ap, &c).unwrap();
        assert_eq!(out.stop, StopReason::MaxEpochs);
        let first = out.history.total[0];
        let last = *out.history.total.last().unwrap();
        assert!(
            last < 0.2 * first,
            "loss went from {first} to {last} in 400 epochs"
        );
        // The learnable coefficient receives gradient and moves off its
        // init (full recovery takes thousands of epochs and is covered by
        // the long-run acceptance checks).
        let sigma = out.history.learnables[0].last().unwrap();
        assert!((sigma - 2.0).abs() > 1e-3, "sigma stuck at {sigma}");
        // Best-validation restoration invariant.
        let best = out.best_validation.unwrap();
        let recorded: Vec<f64> = out.history.validation.iter().flatten().copied().collect();
        let min = recorded.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(best <= min + 1e-15);
    }

    #[test]
    fn early_stopping_restores_the_best_validation_state() {
        // An impossible min-delta means no improvement ever counts, so the
        // run stops after exactly `patience` further evaluations; returned
        // parameters must still achieve the true minimum validation loss.
        let arch = tiny_arch(8);
        let model = heat_model();
        let ds = heat_dataset(5, 120, 120);
        let c = TrainConfig {
            seed: 5,
            epochs: 50,
            early_stop_patience: 3,
            early_stop_min_delta: 1e30,
            ..cfg(1e-2, 50)
        };
        let out = train(&model, &arch, &ds, &heat_weights(), ResidualForm::Ap, &c).unwrap();
        assert_eq!(out.stop, StopReason::EarlyStop { epoch: 3 });
        assert_eq!(out.epochs_run, 4);
        let vals: Vec<f64> = out.history.validation.iter().flatten().copied().collect();
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_validation.unwrap(), min);
        // Re-evaluating the returned parameters reproduces that minimum.
        let (_, va) = split_validation(&ds, c.validation_fraction, c.seed).unwrap();
        let re = validation_loss(
            &arch,
            &out.params,
            &model,
            &va.data,
            &va.residual,
            &heat_weights(),
            ResidualForm::Ap,
        )
        .unwrap();
        assert_eq!(re.total, min);
    }

    #[test]
    fn divergence_aborts_with_the_offending_term() {
        let arch = tiny_arch(6);
        let model = heat_model();
        let mut ds = heat_dataset(7, 30, 30);
        // A target beyond representable squares drives the data term to
        // infinity on the first epoch.
        ds.data.obs[0].as_mut().unwrap()[0] = 1e200;
        let c = TrainConfig {
            seed: 7,
            validation_fraction: 0.0,
            ..cfg(1e-2, 100)
        };
        let out = train(&model, &arch, &ds, &heat_weights(), ResidualForm::Ap, &c).unwrap();
        match &out.stop {
            StopReason::Diverged { epoch, term } => {
                assert_eq!(*epoch, 0);
                assert_eq!(term, "data_rho");
            }
            other => panic!("expected divergence, got {other:?}"),
        }
        assert_eq!(out.history.len(), 1);
        assert!(out.history.total[0].is_infinite());
        // Last checkpoint: the (finite) initial parameters.
        let init = init_params(&arch, 7, &model.learnables()).unwrap();
        assert_eq!(out.params.flatten(), init.flatten());
    }

    #[test]
    fn identical_seeds_give_identical_histories() {
        let arch = tiny_arch(8);
        let model = heat_model();
        let ds = heat_dataset(9, 80, 80);
        let c = TrainConfig {
            seed: 9,
            ..cfg(1e-2, 40)
        };
        let a = train(&model, &arch, &ds, &heat_weights(), ResidualForm::Ap, &c).unwrap();
        let b = train(&model, &arch, &ds, &heat_weights(), ResidualForm::Ap, &c).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params.flatten(), b.params.flatten());
        assert_eq!(a.stop, b.stop);
    }

    #[test]
    fn history_csv_round_trips() {
        let arch = tiny_arch(6);
        let model = heat_model();
        let ds = heat_dataset(11, 40, 40);
        let c = TrainConfig {
            seed: 11,
            ..cfg(1e-2, 7)
        };
        let out = train(&model, &arch, &ds, &heat_weights(), ResidualForm::Ap, &c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        out.history.save_csv(&path).unwrap();
        let back = TrainHistory::load_csv(&path).unwrap();
        assert_eq!(out.history, back);

        // A validation-free run writes empty cells that read back as None.
        let c2 = TrainConfig {
            validation_fraction: 0.0,
            ..c
        };
        let out2 = train(&model, &arch, &ds, &heat_weights(), ResidualForm::Ap, &c2).unwrap();
        assert!(out2.history.validation.iter().all(|v| v.is_none()));
        out2.history.save_csv(&path).unwrap();
        assert_eq!(TrainHistory::load_csv(&path).unwrap(), out2.history);
    }

    #[test]
    fn log_stride_thins_the_history_but_keeps_the_last_row() {
        let arch = tiny_arch(6);
        let model = heat_model();
        let ds = heat_dataset(13, 40, 40);
        let c = TrainConfig {
            seed: 13,
            log_stride: 10,
            ..cfg(1e-2, 25)
        };
        let out = train(&model, &arch, &ds, &heat_weights(), ResidualForm::Ap, &c).unwrap();
        assert_eq!(out.history.epochs, vec![0, 10, 20, 24]);
    }

    #[test]
    fn smoothed_loss_is_monotone_early() {
        // Healthy-run smoke property: the window-100 EMA of the training
        // loss does not increase over the first 1000 epochs.
        for seed in [1u64, 2, 3] {
            let arch = tiny_arch(12);
            let model = heat_model();
            let ds = heat_dataset(seed, 400, 400);
            let c = TrainConfig {
                seed,
                ..cfg(1e-2, 1000)
            };
            let out = train(&model, &arch, &ds, &heat_weights(), ResidualForm::Ap, &c).unwrap();
            let smooth = ema(&out.history.total, 100);
            for k in 1..smooth.len() {
                assert!(
                    smooth[k] <= smooth[k - 1],
                    "seed {seed}: EMA rose at epoch {k}: {} -> {}",
                    smooth[k - 1],
                    smooth[k]
                );
            }
        }
    }
}
