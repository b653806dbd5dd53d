//! Reverse-mode automatic differentiation over scalar expression tapes.
//!
//! An expression is recorded by running a closure over [`Var`] handles. Every
//! primitive pushes one node holding its value and the local partial
//! derivatives with respect to its operands, so the reverse sweep is a single
//! pass of multiply-accumulate over the edge list.
//!
//! Model code is written once against the [`Real`] trait and evaluated either
//! on plain `f64` or on a tape. Both paths share the scalar kernels below, so a
//! recorded value matches direct evaluation bit for bit.
//!
//! ```
//! use irt_core::diff::{record, Real};
//!
//! let tape = record(&[3.0], |x| x[0].square()).unwrap();
//! assert_eq!(tape.value(), 9.0);
//! assert_eq!(tape.backward().unwrap().partials(), &[6.0]);
//! ```

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use smallvec::SmallVec;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("domain error at node {node}: {op:?} of {input}")]
    Domain { node: usize, op: OpKind, input: f64 },
    #[error("tape has {0} outputs, backward needs exactly one scalar output")]
    NonScalarOutput(usize),
    #[error("non-finite function value at coordinate {coordinate}")]
    NonFinite { coordinate: usize },
    #[error("step must be positive, got {0}")]
    BadStep(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Input,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Log1p,
    Sigmoid,
    LogSigmoid,
    Log1mExp,
    Square,
    Sqrt,
    Min,
    Max,
    LogSumExp,
    Sum,
    Dot,
}

// ---------------------------------------------------------------------------
// Scalar kernels shared by the f64 and tape paths.
// ---------------------------------------------------------------------------

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let e = (-x.abs()).exp();
    if x >= 0.0 {
        1.0 / (1.0 + e)
    } else {
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without overflow for large `|x|`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `log(1 - exp(-x))` for `x >= 0`.
#[inline]
pub fn log1mexp(x: f64) -> f64 {
    if x <= std::f64::consts::LN_2 {
        (-(-x).exp_m1()).ln()
    } else {
        (-(-x).exp()).ln_1p()
    }
}

#[inline]
fn log_sum_exp_f64(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

#[inline]
fn sum_f64(xs: &[f64]) -> f64 {
    xs.iter().sum()
}

#[inline]
fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scalar type that model code is generic over.
///
/// `f64` evaluates directly; [`Var`] records onto a tape.
pub trait Real:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(&self) -> f64;
    /// A constant living wherever `self` lives.
    fn lift(&self, v: f64) -> Self;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn sigmoid(self) -> Self;
    fn log_sigmoid(self) -> Self;
    /// `log(1 - exp(-self))`, defined for `self >= 0`.
    fn log1mexp(self) -> Self;
    fn square(self) -> Self;
    fn sqrt(self) -> Self;
    /// Ties resolve to `self`.
    fn min(self, other: Self) -> Self;
    /// Ties resolve to `self`.
    fn max(self, other: Self) -> Self;

    /// Panics on an empty slice.
    fn log_sum_exp(xs: &[Self]) -> Self;
    /// Panics on an empty slice.
    fn sum(xs: &[Self]) -> Self;
    /// Panics on an empty slice or mismatched lengths.
    fn dot(a: &[Self], b: &[Self]) -> Self;
}

impl Real for f64 {
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn lift(&self, v: f64) -> f64 {
        v
    }
    #[inline]
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> f64 {
        f64::ln(self)
    }
    #[inline]
    fn ln_1p(self) -> f64 {
        f64::ln_1p(self)
    }
    #[inline]
    fn sigmoid(self) -> f64 {
        sigmoid(self)
    }
    #[inline]
    fn log_sigmoid(self) -> f64 {
        log_sigmoid(self)
    }
    #[inline]
    fn log1mexp(self) -> f64 {
        log1mexp(self)
    }
    #[inline]
    fn square(self) -> f64 {
        self * self
    }
    #[inline]
    fn sqrt(self) -> f64 {
        f64::sqrt(self)
    }
    #[inline]
    fn min(self, other: f64) -> f64 {
        if other < self {
            other
        } else {
            self
        }
    }
    #[inline]
    fn max(self, other: f64) -> f64 {
        if other > self {
            other
        } else {
            self
        }
    }
    fn log_sum_exp(xs: &[f64]) -> f64 {
        assert!(!xs.is_empty(), "log_sum_exp of empty slice");
        log_sum_exp_f64(xs)
    }
    fn sum(xs: &[f64]) -> f64 {
        assert!(!xs.is_empty(), "sum of empty slice");
        sum_f64(xs)
    }
    fn dot(a: &[f64], b: &[f64]) -> f64 {
        assert!(!a.is_empty() && a.len() == b.len(), "dot shape");
        dot_f64(a, b)
    }
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Node {
    kind: OpKind,
    value: f64,
    edge_start: u32,
    edge_end: u32,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    /// (operand index, local partial)
    edges: Vec<(u32, f64)>,
    error: Option<DiffError>,
}

impl Inner {
    #[inline]
    fn push(&mut self, kind: OpKind, value: f64, edges: &[(u32, f64)]) -> u32 {
        let idx = self.nodes.len();
        let start = self.edges.len() as u32;
        self.edges.extend_from_slice(edges);
        self.nodes.push(Node {
            kind,
            value,
            edge_start: start,
            edge_end: self.edges.len() as u32,
        });
        idx as u32
    }

    fn domain_error(&mut self, op: OpKind, input: f64) {
        if self.error.is_none() {
            self.error = Some(DiffError::Domain {
                node: self.nodes.len(),
                op,
                input,
            });
        }
    }
}

/// Recording context handed to expression builders.
pub struct TapeBuilder {
    inner: RefCell<Inner>,
}

impl TapeBuilder {
    fn with_capacity(nodes: usize) -> Self {
        TapeBuilder {
            inner: RefCell::new(Inner {
                nodes: Vec::with_capacity(nodes),
                edges: Vec::with_capacity(nodes * 2),
                error: None,
            }),
        }
    }

    fn input(&self, value: f64) -> Var<'_> {
        let idx = self.inner.borrow_mut().push(OpKind::Input, value, &[]);
        Var {
            tape: self,
            idx,
            value,
        }
    }

    /// Records a constant leaf that is not differentiated.
    pub fn constant(&self, value: f64) -> Var<'_> {
        let idx = self.inner.borrow_mut().push(OpKind::Const, value, &[]);
        Var {
            tape: self,
            idx,
            value,
        }
    }

    #[inline]
    fn push(&self, kind: OpKind, value: f64, edges: &[(u32, f64)]) -> Var<'_> {
        let idx = self.inner.borrow_mut().push(kind, value, edges);
        Var {
            tape: self,
            idx,
            value,
        }
    }
}

/// Handle to a node on a [`TapeBuilder`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t TapeBuilder,
    idx: u32,
    value: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({})", self.idx, self.value)
    }
}

impl<'t> Var<'t> {
    pub fn index(&self) -> usize {
        self.idx as usize
    }

    #[inline]
    fn same_tape(&self, other: &Var<'t>) {
        debug_assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    #[inline]
    fn unary(self, kind: OpKind, value: f64, partial: f64) -> Var<'t> {
        self.tape.push(kind, value, &[(self.idx, partial)])
    }

    #[inline]
    fn binary(self, other: Var<'t>, kind: OpKind, value: f64, da: f64, db: f64) -> Var<'t> {
        self.same_tape(&other);
        self.tape
            .push(kind, value, &[(self.idx, da), (other.idx, db)])
    }

    fn nary(xs: &[Var<'t>], kind: OpKind, value: f64, partial: impl Fn(usize) -> f64) -> Var<'t> {
        let tape = xs[0].tape;
        let mut inner = tape.inner.borrow_mut();
        let start = inner.edges.len() as u32;
        for (k, x) in xs.iter().enumerate() {
            inner.edges.push((x.idx, partial(k)));
        }
        let idx = inner.nodes.len() as u32;
        let end = inner.edges.len() as u32;
        inner.nodes.push(Node {
            kind,
            value,
            edge_start: start,
            edge_end: end,
        });
        Var { tape, idx, value }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, OpKind::Add, self.value + rhs.value, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, OpKind::Sub, self.value - rhs.value, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, OpKind::Mul, self.value * rhs.value, rhs.value, self.value)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.value / rhs.value;
        self.binary(rhs, OpKind::Div, v, 1.0 / rhs.value, -v / rhs.value)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn neg(self) -> Var<'t> {
        self.unary(OpKind::Neg, -self.value, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn add(self, rhs: f64) -> Var<'t> {
        self.unary(OpKind::Add, self.value + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn sub(self, rhs: f64) -> Var<'t> {
        self.unary(OpKind::Sub, self.value - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn mul(self, rhs: f64) -> Var<'t> {
        self.unary(OpKind::Mul, self.value * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn div(self, rhs: f64) -> Var<'t> {
        self.unary(OpKind::Div, self.value / rhs, 1.0 / rhs)
    }
}

impl<'t> Real for Var<'t> {
    #[inline]
    fn value(&self) -> f64 {
        self.value
    }

    #[inline]
    fn lift(&self, v: f64) -> Var<'t> {
        self.tape.constant(v)
    }

    #[inline]
    fn exp(self) -> Var<'t> {
        let v = self.value.exp();
        self.unary(OpKind::Exp, v, v)
    }

    fn ln(self) -> Var<'t> {
        if self.value < 0.0 || self.value.is_nan() {
            self.tape
                .inner
                .borrow_mut()
                .domain_error(OpKind::Log, self.value);
        }
        self.unary(OpKind::Log, self.value.ln(), 1.0 / self.value)
    }

    fn ln_1p(self) -> Var<'t> {
        if self.value < -1.0 || self.value.is_nan() {
            self.tape
                .inner
                .borrow_mut()
                .domain_error(OpKind::Log1p, self.value);
        }
        self.unary(OpKind::Log1p, self.value.ln_1p(), 1.0 / (1.0 + self.value))
    }

    #[inline]
    fn sigmoid(self) -> Var<'t> {
        let s = sigmoid(self.value);
        self.unary(OpKind::Sigmoid, s, s * (1.0 - s))
    }

    #[inline]
    fn log_sigmoid(self) -> Var<'t> {
        self.unary(
            OpKind::LogSigmoid,
            log_sigmoid(self.value),
            sigmoid(-self.value),
        )
    }

    fn log1mexp(self) -> Var<'t> {
        if self.value < 0.0 || self.value.is_nan() {
            self.tape
                .inner
                .borrow_mut()
                .domain_error(OpKind::Log1mExp, self.value);
        }
        // d/dx log(1 - e^{-x}) = 1 / expm1(x)
        self.unary(
            OpKind::Log1mExp,
            log1mexp(self.value),
            1.0 / self.value.exp_m1(),
        )
    }

    #[inline]
    fn square(self) -> Var<'t> {
        self.unary(OpKind::Square, self.value * self.value, 2.0 * self.value)
    }

    fn sqrt(self) -> Var<'t> {
        if self.value < 0.0 || self.value.is_nan() {
            self.tape
                .inner
                .borrow_mut()
                .domain_error(OpKind::Sqrt, self.value);
        }
        let r = self.value.sqrt();
        self.unary(OpKind::Sqrt, r, 0.5 / r)
    }

    fn min(self, other: Var<'t>) -> Var<'t> {
        if other.value < self.value {
            self.binary(other, OpKind::Min, other.value, 0.0, 1.0)
        } else {
            self.binary(other, OpKind::Min, self.value, 1.0, 0.0)
        }
    }

    fn max(self, other: Var<'t>) -> Var<'t> {
        if other.value > self.value {
            self.binary(other, OpKind::Max, other.value, 0.0, 1.0)
        } else {
            self.binary(other, OpKind::Max, self.value, 1.0, 0.0)
        }
    }

    fn log_sum_exp(xs: &[Var<'t>]) -> Var<'t> {
        assert!(!xs.is_empty(), "log_sum_exp of empty slice");
        let vals: SmallVec<[f64; 8]> = xs.iter().map(|x| x.value).collect();
        let v = log_sum_exp_f64(&vals);
        if v.is_infinite() {
            // all -inf (or some +inf): no finite weights to propagate
            return Var::nary(xs, OpKind::LogSumExp, v, |_| 0.0);
        }
        Var::nary(xs, OpKind::LogSumExp, v, |k| (vals[k] - v).exp())
    }

    fn sum(xs: &[Var<'t>]) -> Var<'t> {
        assert!(!xs.is_empty(), "sum of empty slice");
        let v: f64 = xs.iter().map(|x| x.value).sum();
        Var::nary(xs, OpKind::Sum, v, |_| 1.0)
    }

    fn dot(a: &[Var<'t>], b: &[Var<'t>]) -> Var<'t> {
        assert!(!a.is_empty() && a.len() == b.len(), "dot shape");
        let v: f64 = a.iter().zip(b).map(|(x, y)| x.value * y.value).sum();
        let tape = a[0].tape;
        let mut inner = tape.inner.borrow_mut();
        let start = inner.edges.len() as u32;
        for (x, y) in a.iter().zip(b) {
            inner.edges.push((x.idx, y.value));
            inner.edges.push((y.idx, x.value));
        }
        let idx = inner.nodes.len() as u32;
        let end = inner.edges.len() as u32;
        inner.nodes.push(Node {
            kind: OpKind::Dot,
            value: v,
            edge_start: start,
            edge_end: end,
        });
        Var { tape, idx, value: v }
    }
}

/// A completed recording: nodes in topological order, inputs first.
#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    edges: Vec<(u32, f64)>,
    n_inputs: usize,
    outputs: Vec<u32>,
}

/// Partial derivatives of the output with respect to each input leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(Vec<f64>);

impl GradientVector {
    pub fn partials(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Records a scalar expression over `inputs`.
pub fn record<F>(inputs: &[f64], f: F) -> Result<Tape, DiffError>
where
    F: for<'t> FnOnce(&[Var<'t>]) -> Var<'t>,
{
    record_many(inputs, |xs| vec![f(xs)])
}

/// Records an expression with any number of outputs. Only single-output tapes
/// can be differentiated.
pub fn record_many<F>(inputs: &[f64], f: F) -> Result<Tape, DiffError>
where
    F: for<'t> FnOnce(&[Var<'t>]) -> Vec<Var<'t>>,
{
    record_with_capacity(inputs, inputs.len() * 4 + 16, f)
}

pub(crate) fn record_with_capacity<F>(
    inputs: &[f64],
    capacity: usize,
    f: F,
) -> Result<Tape, DiffError>
where
    F: for<'t> FnOnce(&[Var<'t>]) -> Vec<Var<'t>>,
{
    let builder = TapeBuilder::with_capacity(capacity.max(inputs.len()));
    let vars: Vec<Var<'_>> = inputs.iter().map(|&x| builder.input(x)).collect();
    let outputs: Vec<u32> = f(&vars).iter().map(|v| v.idx).collect();
    drop(vars);
    let inner = builder.inner.into_inner();
    if let Some(err) = inner.error {
        return Err(err);
    }
    Ok(Tape {
        nodes: inner.nodes,
        edges: inner.edges,
        n_inputs: inputs.len(),
        outputs,
    })
}

impl Tape {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn kind(&self, node: usize) -> OpKind {
        self.nodes[node].kind
    }

    /// Operand indices of a node.
    pub fn operands(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        let n = &self.nodes[node];
        self.edges[n.edge_start as usize..n.edge_end as usize]
            .iter()
            .map(|(i, _)| *i as usize)
    }

    /// Values of all outputs.
    pub fn outputs(&self) -> Vec<f64> {
        self.outputs
            .iter()
            .map(|&o| self.nodes[o as usize].value)
            .collect()
    }

    /// Value of the first output.
    pub fn value(&self) -> f64 {
        self.nodes[self.outputs[0] as usize].value
    }

    pub fn backward(&self) -> Result<GradientVector, DiffError> {
        if self.outputs.len() != 1 {
            return Err(DiffError::NonScalarOutput(self.outputs.len()));
        }
        let out = self.outputs[0] as usize;
        let mut adj = vec![0.0; out + 1];
        adj[out] = 1.0;
        for k in (self.n_inputs..=out).rev() {
            let g = adj[k];
            if g == 0.0 {
                continue;
            }
            let n = &self.nodes[k];
            for &(p, d) in &self.edges[n.edge_start as usize..n.edge_end as usize] {
                adj[p as usize] += g * d;
            }
        }
        adj.truncate(self.n_inputs);
        adj.resize(self.n_inputs, 0.0);
        Ok(GradientVector(adj))
    }
}

/// Value and gradient of `f` at `x` in one recording.
pub fn value_and_gradient<F: ScalarFn + ?Sized>(
    f: &F,
    x: &[f64],
) -> Result<(f64, GradientVector), DiffError> {
    let tape = record(x, |v| f.eval(v))?;
    let g = tape.backward()?;
    Ok((tape.value(), g))
}

/// A scalar function that can be evaluated on plain numbers or on a tape.
pub trait ScalarFn {
    fn eval<R: Real>(&self, x: &[R]) -> R;
}

/// Largest relative discrepancy between reverse-mode partials and central
/// differences `(f(x+h) - f(x-h)) / 2h`.
pub fn check_gradients<F: ScalarFn + ?Sized>(
    f: &F,
    point: &[f64],
    step: f64,
) -> Result<f64, DiffError> {
    if !(step > 0.0) {
        return Err(DiffError::BadStep(step));
    }
    let (_, grad) = value_and_gradient(f, point)?;
    let mut worst: f64 = 0.0;
    let mut x = point.to_vec();
    for (k, ad) in grad.partials().iter().enumerate() {
        let orig = x[k];
        x[k] = orig + step;
        let hi = f.eval(&x);
        x[k] = orig - step;
        let lo = f.eval(&x);
        x[k] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(DiffError::NonFinite { coordinate: k });
        }
        let fd = (hi - lo) / (2.0 * step);
        worst = worst.max((ad - fd).abs() / (fd.abs() + 1e-12));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad1(x: f64, f: impl for<'t> FnOnce(Var<'t>) -> Var<'t>) -> (f64, f64) {
        let t = record(&[x], |v| f(v[0])).unwrap();
        (t.value(), t.backward().unwrap().partials()[0])
    }

    #[test]
    fn square_value_and_derivative() {
        assert_eq!(grad1(3.0, |x| x.square()), (9.0, 6.0));
        assert_eq!(grad1(3.0, |x| x * x), (9.0, 6.0));
    }

    #[test]
    fn sigmoid_at_zero() {
        assert_eq!(grad1(0.0, |x| x.sigmoid()), (0.5, 0.25));
    }

    #[test]
    fn log_sum_exp_identical_arguments() {
        let t = record(&[0.0, 0.0], |v| Real::log_sum_exp(v)).unwrap();
        assert!((t.value() - 2f64.ln()).abs() < 1e-15);
        let g = t.backward().unwrap();
        assert_eq!(g.partials(), &[0.5, 0.5]);

        let t = record(&[0.0, 0.0], |v| (v[0].exp() + v[1].exp()).ln()).unwrap();
        assert_eq!(t.value(), 2f64.ln());
    }

    #[test]
    fn log_of_negative_is_domain_error() {
        let err = record(&[-1.0], |v| v[0].ln() + 1.0).unwrap_err();
        assert_eq!(
            err,
            DiffError::Domain {
                node: 1,
                op: OpKind::Log,
                input: -1.0
            }
        );
        let err = record(&[2.0], |v| (v[0] * -1.0).sqrt()).unwrap_err();
        assert!(matches!(err, DiffError::Domain { node: 2, op: OpKind::Sqrt, .. }));
    }

    #[test]
    fn multiple_outputs_cannot_backprop() {
        let t = record_many(&[1.0, 2.0], |v| vec![v[0], v[1]]).unwrap();
        assert_eq!(t.backward(), Err(DiffError::NonScalarOutput(2)));
        assert_eq!(t.outputs(), vec![1.0, 2.0]);
    }

    #[test]
    fn max_tie_takes_first_operand() {
        let t = record(&[1.0, 1.0], |v| v[0].max(v[1])).unwrap();
        assert_eq!(t.backward().unwrap().partials(), &[1.0, 0.0]);
        let t = record(&[1.0, 1.0], |v| v[0].min(v[1])).unwrap();
        assert_eq!(t.backward().unwrap().partials(), &[1.0, 0.0]);
        let t = record(&[1.0, 2.0], |v| v[0].max(v[1])).unwrap();
        assert_eq!(t.backward().unwrap().partials(), &[0.0, 1.0]);
    }

    #[test]
    fn sigmoid_is_stable_far_out() {
        assert_eq!(sigmoid(800.0), 1.0);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert!(log_sigmoid(-800.0).is_finite());
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-12);
        let (v, d) = grad1(-800.0, |x| x.sigmoid());
        assert_eq!((v, d), (0.0, 0.0));
    }

    #[test]
    fn log1mexp_matches_naive_in_safe_range() {
        for &x in &[1e-3, 0.3, 0.69, 0.7, 2.0, 10.0] {
            let naive = (1.0 - (-x as f64).exp()).ln();
            assert!((log1mexp(x) - naive).abs() < 1e-12 * naive.abs().max(1.0));
        }
        assert_eq!(log1mexp(0.0), f64::NEG_INFINITY);
    }

    #[test]
    fn log_sum_exp_all_neg_infinity() {
        let t = record(&[f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0], |v| {
            Real::log_sum_exp(&v[..2]) + v[2]
        })
        .unwrap();
        assert_eq!(t.value(), f64::NEG_INFINITY);
        assert_eq!(t.backward().unwrap().partials(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn unused_inputs_get_zero_gradient() {
        let t = record(&[1.0, 2.0, 3.0], |v| v[1] * 2.0).unwrap();
        assert_eq!(t.backward().unwrap().partials(), &[0.0, 2.0, 0.0]);
    }

    #[test]
    fn operands_precede_nodes() {
        let t = record(&[0.3, -1.2], |v| {
            let a = v[0] * v[1];
            let b = a.exp() + v[0].sigmoid();
            Real::log_sum_exp(&[a, b, v[1]])
        })
        .unwrap();
        for k in 0..t.len() {
            for p in t.operands(k) {
                assert!(p < k);
            }
        }
        assert_eq!(t.kind(t.len() - 1), OpKind::LogSumExp);
    }

    struct Exp;
    impl ScalarFn for Exp {
        fn eval<R: Real>(&self, x: &[R]) -> R {
            x[0].exp()
        }
    }

    struct Constant;
    impl ScalarFn for Constant {
        fn eval<R: Real>(&self, x: &[R]) -> R {
            x[0] * 0.0 + 4.0
        }
    }

    struct Bilinear;
    impl ScalarFn for Bilinear {
        fn eval<R: Real>(&self, x: &[R]) -> R {
            x[0] * x[1]
        }
    }

    #[test]
    fn check_gradients_examples() {
        assert!(check_gradients(&Exp, &[1.0], 1e-5).unwrap() < 1e-7);
        assert_eq!(check_gradients(&Constant, &[0.7], 1e-5).unwrap(), 0.0);
        let (_, g) = value_and_gradient(&Bilinear, &[2.0, 3.0]).unwrap();
        assert_eq!(g.partials(), &[3.0, 2.0]);
        assert!(check_gradients(&Bilinear, &[2.0, 3.0], 1e-5).unwrap() < 1e-9);
    }

    struct LogOf;
    impl ScalarFn for LogOf {
        fn eval<R: Real>(&self, x: &[R]) -> R {
            x[0].ln()
        }
    }

    #[test]
    fn check_gradients_rejects_bad_inputs() {
        assert_eq!(
            check_gradients(&Exp, &[1.0], 0.0),
            Err(DiffError::BadStep(0.0))
        );
        // f(0 - h) = log(-h) = NaN
        assert!(matches!(
            check_gradients(&LogOf, &[1e-6], 1e-5),
            Err(DiffError::NonFinite { coordinate: 0 })
        ));
    }
}
