//! Scalar automatic differentiation: a reverse-mode tape plus forward-mode
//! jets, designed to compose.
//!
//! Two cooperating pieces:
//!
//! * [`Tape`] — a Wengert list of primitive scalar operations. Recording an
//!   expression stores, per node, the operation kind, parent indices and the
//!   local partial derivatives evaluated at the recorded values; one reverse
//!   sweep then yields the gradient of a recorded scalar with respect to every
//!   leaf.
//! * [`Jet`] — a value bundled with its derivatives with respect to the two
//!   network inputs (d/dx, d/dt). Jet arithmetic is written once, generically
//!   over an [`Algebra`], so the same dual-number rules run either on plain
//!   `f64` ([`Values`], cheap forward evaluation) or on tape variables
//!   (forward-over-reverse: input-derivatives that remain differentiable with
//!   respect to parameters).
//!
//! Derivatives of primitives use closed forms (cos for sin, `1 − tanh²` for
//! tanh, …), never numeric differencing. Everything is `f64` and
//! deterministic: identical inputs produce bit-identical outputs.

use std::sync::atomic::{AtomicU32, Ordering};

use thiserror::Error;

/// Primitive operations a tape node can represent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    /// Independent input; gradients are taken with respect to leaves.
    Leaf,
    /// Recorded constant; receives no adjoint.
    Const,
    Add,
    Mul,
    Div,
    Neg,
    Sin,
    Cos,
    Tanh,
    Exp,
    /// Integer power with the exponent folded into the stored partial.
    Powi,
}

impl Op {
    fn arity(self) -> usize {
        match self {
            Op::Leaf | Op::Const => 0,
            Op::Add | Op::Mul | Op::Div => 2,
            Op::Neg | Op::Sin | Op::Cos | Op::Tanh | Op::Exp | Op::Powi => 1,
        }
    }
}

/// One recorded operation: parents and local partials ∂node/∂parent, frozen at
/// record time.
#[derive(Clone, Copy, Debug)]
struct Node {
    op: Op,
    a: u32,
    b: u32,
    pa: f64,
    pb: f64,
}

/// Handle to a value recorded on a specific [`Tape`].
///
/// Carries the tape's identity so that accidentally mixing tapes is caught
/// instead of silently producing wrong indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    idx: u32,
    tape: u32,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AdError {
    #[error("variable was recorded on a different tape")]
    ForeignVariable,
    #[error("non-finite value produced by {op:?} at node {index}")]
    NonFinite { op: Op, index: usize },
}

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Append-only record of a scalar computation.
///
/// The node list is a DAG by construction (parents always precede children),
/// so the reverse sweep in [`Tape::gradient`] visits nodes in reverse
/// recording order, which is a valid reverse topological order.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    vals: Vec<f64>,
    first_nonfinite: Option<u32>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            vals: Vec::new(),
            first_nonfinite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Index of the first node whose recorded value is not finite, if any.
    pub fn first_nonfinite(&self) -> Option<usize> {
        self.first_nonfinite.map(|i| i as usize)
    }

    /// Value recorded for `v`. Panics if `v` belongs to another tape.
    pub fn value(&self, v: Var) -> f64 {
        self.check(v);
        self.vals[v.idx as usize]
    }

    fn check(&self, v: Var) {
        assert_eq!(
            v.tape, self.id,
            "variable used with a tape it was not recorded on"
        );
    }

    fn push(&mut self, op: Op, a: u32, b: u32, pa: f64, pb: f64, val: f64) -> Var {
        let idx = u32::try_from(self.nodes.len()).expect("tape overflow");
        if !val.is_finite() && self.first_nonfinite.is_none() {
            self.first_nonfinite = Some(idx);
        }
        self.nodes.push(Node { op, a, b, pa, pb });
        self.vals.push(val);
        Var { idx, tape: self.id }
    }

    /// Records an independent input.
    pub fn leaf(&mut self, v: f64) -> Var {
        self.push(Op::Leaf, 0, 0, 0.0, 0.0, v)
    }

    /// Records a constant (zero adjoint by definition).
    pub fn constant(&mut self, v: f64) -> Var {
        self.push(Op::Const, 0, 0, 0.0, 0.0, v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check(a);
        self.check(b);
        let v = self.vals[a.idx as usize] + self.vals[b.idx as usize];
        self.push(Op::Add, a.idx, b.idx, 1.0, 1.0, v)
    }

    /// `a − b`, composed as `a + (−b)` to stay within the primitive set.
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.check(a);
        self.check(b);
        let (va, vb) = (self.vals[a.idx as usize], self.vals[b.idx as usize]);
        self.push(Op::Mul, a.idx, b.idx, vb, va, va * vb)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.check(a);
        self.check(b);
        let (va, vb) = (self.vals[a.idx as usize], self.vals[b.idx as usize]);
        self.push(Op::Div, a.idx, b.idx, 1.0 / vb, -va / (vb * vb), va / vb)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.check(a);
        let va = self.vals[a.idx as usize];
        self.push(Op::Neg, a.idx, 0, -1.0, 0.0, -va)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.check(a);
        let va = self.vals[a.idx as usize];
        self.push(Op::Sin, a.idx, 0, va.cos(), 0.0, va.sin())
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.check(a);
        let va = self.vals[a.idx as usize];
        self.push(Op::Cos, a.idx, 0, -va.sin(), 0.0, va.cos())
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.check(a);
        let th = self.vals[a.idx as usize].tanh();
        self.push(Op::Tanh, a.idx, 0, 1.0 - th * th, 0.0, th)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.check(a);
        let e = self.vals[a.idx as usize].exp();
        self.push(Op::Exp, a.idx, 0, e, 0.0, e)
    }

    /// `a^n` for integer `n`; the local partial `n·a^(n−1)` is folded into the
    /// stored value so the node needs no payload.
    pub fn powi(&mut self, a: Var, n: i32) -> Var {
        self.check(a);
        let va = self.vals[a.idx as usize];
        let partial = if n == 0 {
            0.0
        } else {
            f64::from(n) * va.powi(n - 1)
        };
        self.push(Op::Powi, a.idx, 0, partial, 0.0, va.powi(n))
    }

    /// `k·a` for a plain constant `k` (records the constant explicitly).
    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let c = self.constant(k);
        self.mul(c, a)
    }

    /// Gradient of `output` with respect to each of `leaves`, by one reverse
    /// sweep over the tape.
    ///
    /// Any recorded variable may appear in `leaves`; a variable recorded after
    /// `output` (hence not upstream of it) gets adjoint 0. Fails if any node
    /// on the tape recorded a non-finite value, or if a variable from another
    /// tape is passed.
    pub fn gradient(&self, output: Var, leaves: &[Var]) -> Result<Vec<f64>, AdError> {
        if output.tape != self.id || leaves.iter().any(|l| l.tape != self.id) {
            return Err(AdError::ForeignVariable);
        }
        if let Some(i) = self.first_nonfinite {
            return Err(AdError::NonFinite {
                op: self.nodes[i as usize].op,
                index: i as usize,
            });
        }
        let n = output.idx as usize + 1;
        let mut adj = vec![0.0f64; n];
        adj[n - 1] = 1.0;
        for i in (0..n).rev() {
            let w = adj[i];
            if w == 0.0 {
                continue;
            }
            let node = self.nodes[i];
            match node.op.arity() {
                0 => {}
                1 => adj[node.a as usize] += node.pa * w,
                _ => {
                    adj[node.a as usize] += node.pa * w;
                    adj[node.b as usize] += node.pb * w;
                }
            }
        }
        Ok(leaves
            .iter()
            .map(|l| adj.get(l.idx as usize).copied().unwrap_or(0.0))
            .collect())
    }
}

/// A scalar backend: the operations jets and residual formulas are written
/// against. Implemented by [`Values`] (plain `f64`) and [`Tape`] (recorded
/// variables).
pub trait Algebra {
    type V: Copy;
    fn constant(&mut self, v: f64) -> Self::V;
    fn add(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn sub(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn mul(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn neg(&mut self, a: Self::V) -> Self::V;
    /// Multiplication by a plain constant.
    fn scale(&mut self, a: Self::V, k: f64) -> Self::V;
    fn sin(&mut self, a: Self::V) -> Self::V;
    fn cos(&mut self, a: Self::V) -> Self::V;
    fn tanh(&mut self, a: Self::V) -> Self::V;
    fn exp(&mut self, a: Self::V) -> Self::V;
    fn powi(&mut self, a: Self::V, n: i32) -> Self::V;
}

/// Plain-`f64` backend: evaluates immediately, records nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct Values;

impl Algebra for Values {
    type V = f64;
    fn constant(&mut self, v: f64) -> f64 {
        v
    }
    fn add(&mut self, a: f64, b: f64) -> f64 {
        a + b
    }
    fn sub(&mut self, a: f64, b: f64) -> f64 {
        a - b
    }
    fn mul(&mut self, a: f64, b: f64) -> f64 {
        a * b
    }
    fn neg(&mut self, a: f64) -> f64 {
        -a
    }
    fn scale(&mut self, a: f64, k: f64) -> f64 {
        k * a
    }
    fn sin(&mut self, a: f64) -> f64 {
        a.sin()
    }
    fn cos(&mut self, a: f64) -> f64 {
        a.cos()
    }
    fn tanh(&mut self, a: f64) -> f64 {
        a.tanh()
    }
    fn exp(&mut self, a: f64) -> f64 {
        a.exp()
    }
    fn powi(&mut self, a: f64, n: i32) -> f64 {
        a.powi(n)
    }
}

impl Algebra for Tape {
    type V = Var;
    fn constant(&mut self, v: f64) -> Var {
        Tape::constant(self, v)
    }
    fn add(&mut self, a: Var, b: Var) -> Var {
        Tape::add(self, a, b)
    }
    fn sub(&mut self, a: Var, b: Var) -> Var {
        Tape::sub(self, a, b)
    }
    fn mul(&mut self, a: Var, b: Var) -> Var {
        Tape::mul(self, a, b)
    }
    fn neg(&mut self, a: Var) -> Var {
        Tape::neg(self, a)
    }
    fn scale(&mut self, a: Var, k: f64) -> Var {
        Tape::scale(self, a, k)
    }
    fn sin(&mut self, a: Var) -> Var {
        Tape::sin(self, a)
    }
    fn cos(&mut self, a: Var) -> Var {
        Tape::cos(self, a)
    }
    fn tanh(&mut self, a: Var) -> Var {
        Tape::tanh(self, a)
    }
    fn exp(&mut self, a: Var) -> Var {
        Tape::exp(self, a)
    }
    fn powi(&mut self, a: Var, n: i32) -> Var {
        Tape::powi(self, a, n)
    }
}

/// A value carried together with its first derivatives with respect to the
/// spatial input (`dx`) and the temporal input (`dt`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet<V> {
    pub v: V,
    pub dx: V,
    pub dt: V,
}

impl<V: Copy> Jet<V> {
    pub fn new(v: V, dx: V, dt: V) -> Self {
        Jet { v, dx, dt }
    }
}

/// Jet with no input dependence: derivatives are zero.
pub fn jet_constant<A: Algebra>(alg: &mut A, v: f64) -> Jet<A::V> {
    let z = alg.constant(0.0);
    Jet::new(alg.constant(v), z, z)
}

pub fn jet_add<A: Algebra>(alg: &mut A, a: Jet<A::V>, b: Jet<A::V>) -> Jet<A::V> {
    Jet::new(alg.add(a.v, b.v), alg.add(a.dx, b.dx), alg.add(a.dt, b.dt))
}

pub fn jet_sub<A: Algebra>(alg: &mut A, a: Jet<A::V>, b: Jet<A::V>) -> Jet<A::V> {
    Jet::new(alg.sub(a.v, b.v), alg.sub(a.dx, b.dx), alg.sub(a.dt, b.dt))
}

pub fn jet_neg<A: Algebra>(alg: &mut A, a: Jet<A::V>) -> Jet<A::V> {
    Jet::new(alg.neg(a.v), alg.neg(a.dx), alg.neg(a.dt))
}

/// Product rule: `(a·b)' = a'·b + a·b'` componentwise in dx and dt.
pub fn jet_mul<A: Algebra>(alg: &mut A, a: Jet<A::V>, b: Jet<A::V>) -> Jet<A::V> {
    let v = alg.mul(a.v, b.v);
    let x1 = alg.mul(a.dx, b.v);
    let x2 = alg.mul(a.v, b.dx);
    let t1 = alg.mul(a.dt, b.v);
    let t2 = alg.mul(a.v, b.dt);
    Jet::new(v, alg.add(x1, x2), alg.add(t1, t2))
}

/// Multiplication by an input-independent scalar (e.g. a network weight):
/// avoids recording the zero-derivative cross terms of the full product rule.
pub fn jet_mul_scalar<A: Algebra>(alg: &mut A, s: A::V, a: Jet<A::V>) -> Jet<A::V> {
    Jet::new(alg.mul(s, a.v), alg.mul(s, a.dx), alg.mul(s, a.dt))
}

pub fn jet_scale<A: Algebra>(alg: &mut A, a: Jet<A::V>, k: f64) -> Jet<A::V> {
    Jet::new(alg.scale(a.v, k), alg.scale(a.dx, k), alg.scale(a.dt, k))
}

/// Chain rule through sin: derivative factor is cos of the value.
pub fn jet_sin<A: Algebra>(alg: &mut A, a: Jet<A::V>) -> Jet<A::V> {
    let v = alg.sin(a.v);
    let c = alg.cos(a.v);
    Jet::new(v, alg.mul(c, a.dx), alg.mul(c, a.dt))
}

/// Chain rule through tanh: derivative factor is `1 − tanh²`.
pub fn jet_tanh<A: Algebra>(alg: &mut A, a: Jet<A::V>) -> Jet<A::V> {
    let th = alg.tanh(a.v);
    let th2 = alg.mul(th, th);
    let one = alg.constant(1.0);
    let s = alg.sub(one, th2);
    Jet::new(th, alg.mul(s, a.dx), alg.mul(s, a.dt))
}

/// Chain rule through exp: derivative factor is the value itself.
pub fn jet_exp<A: Algebra>(alg: &mut A, a: Jet<A::V>) -> Jet<A::V> {
    let e = alg.exp(a.v);
    Jet::new(e, alg.mul(e, a.dx), alg.mul(e, a.dt))
}

/// Plain-`f64` jet. The operator impls below are sugar over the generic
/// combinators with the [`Values`] backend, so there is a single source of
/// truth for the dual-number rules.
pub type Jet2 = Jet<f64>;

impl Jet2 {
    pub fn constant(v: f64) -> Jet2 {
        Jet::new(v, 0.0, 0.0)
    }
    /// Seed for the spatial input: d_x = 1.
    pub fn seed_x(v: f64) -> Jet2 {
        Jet::new(v, 1.0, 0.0)
    }
    /// Seed for the temporal input: d_t = 1 (or `1/scale` when the input is
    /// fed rescaled).
    pub fn seed_t(v: f64) -> Jet2 {
        Jet::new(v, 0.0, 1.0)
    }
    pub fn sin(self) -> Jet2 {
        jet_sin(&mut Values, self)
    }
    pub fn cos(self) -> Jet2 {
        // cos via the chain rule directly; not a tape primitive composition.
        Jet::new(
            self.v.cos(),
            -self.v.sin() * self.dx,
            -self.v.sin() * self.dt,
        )
    }
    pub fn tanh(self) -> Jet2 {
        jet_tanh(&mut Values, self)
    }
    pub fn exp(self) -> Jet2 {
        jet_exp(&mut Values, self)
    }
}

impl std::ops::Add for Jet2 {
    type Output = Jet2;
    fn add(self, rhs: Jet2) -> Jet2 {
        jet_add(&mut Values, self, rhs)
    }
}

impl std::ops::Sub for Jet2 {
    type Output = Jet2;
    fn sub(self, rhs: Jet2) -> Jet2 {
        jet_sub(&mut Values, self, rhs)
    }
}

impl std::ops::Mul for Jet2 {
    type Output = Jet2;
    fn mul(self, rhs: Jet2) -> Jet2 {
        jet_mul(&mut Values, self, rhs)
    }
}

impl std::ops::Mul<f64> for Jet2 {
    type Output = Jet2;
    fn mul(self, k: f64) -> Jet2 {
        jet_scale(&mut Values, self, k)
    }
}

impl std::ops::Neg for Jet2 {
    type Output = Jet2;
    fn neg(self) -> Jet2 {
        jet_neg(&mut Values, self)
    }
}
