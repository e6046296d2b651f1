//! Scalar reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every arithmetic operation as a node holding its
//! forward value and the local partial derivatives with respect to at most
//! two parents. Nodes are appended in evaluation order, so parents always
//! precede children and the backward sweep is a single reverse pass.
//!
//! Domain violations (`ln` of a non-positive value, division by zero) do not
//! panic at the call site. The first one is recorded on the tape and
//! surfaced by [`Tape::backward`], together with any non-finite forward value.
//!
//! Model code is written once against the [`Real`] trait and runs either on
//! plain `f64` (evaluation) or on [`Var`] (training).

use std::cell::{Cell, RefCell};
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::EvalError;

const NO_PARENT: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Ln,
    Sqrt,
    Sigmoid,
    Tanh,
    Relu,
    Clamp,
    AddConst,
    MulConst,
}

impl Op {
    pub fn name(self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Exp => "exp",
            Op::Ln => "ln",
            Op::Sqrt => "sqrt",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Clamp => "clamp",
            Op::AddConst => "add_const",
            Op::MulConst => "mul_const",
        }
    }
}

#[derive(Clone, Copy)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
    value: f64,
    op: Op,
}

#[derive(Clone, Copy, Debug)]
struct Fault {
    node: usize,
    op: Op,
    operand: f64,
}

/// Append-only record of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fault: Cell<Option<Fault>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// Handle to one node of a [`Tape`]. Cheap to copy.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
    value: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{}: {})", self.idx, self.value)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(capacity)),
            fault: Cell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every node but keeps the allocation. All outstanding `Var`s
    /// must be dead, which the borrow checker enforces through `&mut self`.
    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
        self.fault.set(None);
    }

    /// New independent variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        self.push(Op::Leaf, [NO_PARENT, NO_PARENT], [0.0, 0.0], value)
    }

    /// New leaf whose gradient nobody intends to read. Identical to `var`
    /// on the tape; the separate name documents intent at the call site.
    pub fn constant(&self, value: f64) -> Var<'_> {
        self.var(value)
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    fn push(&self, op: Op, parents: [u32; 2], partials: [f64; 2], value: f64) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        assert!(idx < NO_PARENT as usize, "tape overflow");
        nodes.push(Node {
            parents,
            partials,
            value,
            op,
        });
        Var {
            tape: self,
            idx: idx as u32,
            value,
        }
    }

    fn flag(&self, node: usize, op: Op, operand: f64) {
        if self.fault.get().is_none() {
            self.fault.set(Some(Fault { node, op, operand }));
        }
    }

    /// First recorded domain violation, if any.
    pub fn check(&self) -> Result<(), EvalError> {
        match self.fault.get() {
            Some(f) => Err(EvalError::Domain {
                node: f.node,
                op: f.op.name(),
                operand: f.operand,
            }),
            None => Ok(()),
        }
    }

    /// Propagates adjoints from `output` back to every node recorded before it.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients, EvalError> {
        assert!(
            std::ptr::eq(self, output.tape),
            "backward called with a Var from another tape"
        );
        self.check()?;
        let nodes = self.nodes.borrow();
        let end = output.idx as usize + 1;
        if let Some((i, n)) = nodes[..end]
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
        {
            return Err(EvalError::NonFinite {
                node: i,
                op: n.op.name(),
                value: n.value,
            });
        }
        let mut adjoint = vec![0.0; end];
        adjoint[end - 1] = 1.0;
        for i in (0..end).rev() {
            let a = adjoint[i];
            if a == 0.0 {
                continue;
            }
            let node = &nodes[i];
            for k in 0..2 {
                let p = node.parents[k];
                if p != NO_PARENT {
                    adjoint[p as usize] += a * node.partials[k];
                }
            }
        }
        if let Some((i, g)) = adjoint.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(EvalError::NonFinite {
                node: i,
                op: "adjoint",
                value: *g,
            });
        }
        Ok(Gradients { adjoint })
    }
}

/// Result of a backward pass: `∂output/∂node` for every node up to the output.
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoint: Vec<f64>,
}

impl Gradients {
    /// Nodes recorded after the output (and so unreachable from it) read as zero.
    pub fn get(&self, v: Var<'_>) -> f64 {
        self.adjoint.get(v.idx as usize).copied().unwrap_or(0.0)
    }

    pub fn collect(&self, vars: &[Var<'_>]) -> Vec<f64> {
        vars.iter().map(|&v| self.get(v)).collect()
    }
}

impl<'t> Var<'t> {
    pub fn value(self) -> f64 {
        self.value
    }

    pub fn index(self) -> usize {
        self.idx as usize
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    fn unary(self, op: Op, partial: f64, value: f64) -> Var<'t> {
        self.tape
            .push(op, [self.idx, NO_PARENT], [partial, 0.0], value)
    }

    fn binary(self, other: Var<'t>, op: Op, partials: [f64; 2], value: f64) -> Var<'t> {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "operands on different tapes");
        self.tape.push(op, [self.idx, other.idx], partials, value)
    }

    pub fn exp(self) -> Var<'t> {
        let e = self.value.exp();
        self.unary(Op::Exp, e, e)
    }

    pub fn ln(self) -> Var<'t> {
        let x = self.value;
        if x <= 0.0 {
            let out = self.unary(Op::Ln, f64::NAN, f64::NAN);
            self.tape.flag(out.index(), Op::Ln, x);
            return out;
        }
        self.unary(Op::Ln, 1.0 / x, x.ln())
    }

    pub fn sqrt(self) -> Var<'t> {
        let x = self.value;
        if x < 0.0 {
            let out = self.unary(Op::Sqrt, f64::NAN, f64::NAN);
            self.tape.flag(out.index(), Op::Sqrt, x);
            return out;
        }
        let r = x.sqrt();
        self.unary(Op::Sqrt, 0.5 / r, r)
    }

    pub fn sigmoid(self) -> Var<'t> {
        let s = sigmoid(self.value);
        self.unary(Op::Sigmoid, s * (1.0 - s), s)
    }

    pub fn tanh(self) -> Var<'t> {
        let t = self.value.tanh();
        self.unary(Op::Tanh, 1.0 - t * t, t)
    }

    pub fn relu(self) -> Var<'t> {
        if self.value > 0.0 {
            self.unary(Op::Relu, 1.0, self.value)
        } else {
            self.unary(Op::Relu, 0.0, 0.0)
        }
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let x = self.value;
        if x < lo {
            self.unary(Op::Clamp, 0.0, lo)
        } else if x > hi {
            self.unary(Op::Clamp, 0.0, hi)
        } else {
            self.unary(Op::Clamp, 1.0, x)
        }
    }
}

/// Overflow-safe logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Add, [1.0, 1.0], self.value + rhs.value)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Sub, [1.0, -1.0], self.value - rhs.value)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Mul, [rhs.value, self.value], self.value * rhs.value)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let d = rhs.value;
        if d == 0.0 {
            let out = self.binary(rhs, Op::Div, [f64::NAN, f64::NAN], f64::NAN);
            self.tape.flag(out.index(), Op::Div, d);
            return out;
        }
        let q = self.value / d;
        self.binary(rhs, Op::Div, [1.0 / d, -q / d], q)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(Op::Neg, -1.0, -self.value)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.unary(Op::AddConst, 1.0, self.value + rhs)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.unary(Op::AddConst, 1.0, self.value - rhs)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.unary(Op::MulConst, rhs, self.value * rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Var<'t> {
        if rhs == 0.0 {
            let out = self.unary(Op::MulConst, f64::NAN, f64::NAN);
            self.tape.flag(out.index(), Op::Div, rhs);
            return out;
        }
        self.unary(Op::MulConst, 1.0 / rhs, self.value / rhs)
    }
}

/// Scalar arithmetic shared by `f64` and [`Var`], so that a model's forward
/// pass is written once.
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
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn sigmoid(self) -> Self;
    fn tanh(self) -> Self;
    fn relu(self) -> Self;
    fn clamp(self, lo: f64, hi: f64) -> Self;
}

impl Real for f64 {
    fn value(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        if self <= 0.0 {
            f64::NAN
        } else {
            f64::ln(self)
        }
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn sigmoid(self) -> Self {
        sigmoid(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn relu(self) -> Self {
        self.max(0.0)
    }
    fn clamp(self, lo: f64, hi: f64) -> Self {
        f64::clamp(self, lo, hi)
    }
}

impl Real for Var<'_> {
    fn value(self) -> f64 {
        self.value
    }
    fn exp(self) -> Self {
        Var::exp(self)
    }
    fn ln(self) -> Self {
        Var::ln(self)
    }
    fn sqrt(self) -> Self {
        Var::sqrt(self)
    }
    fn sigmoid(self) -> Self {
        Var::sigmoid(self)
    }
    fn tanh(self) -> Self {
        Var::tanh(self)
    }
    fn relu(self) -> Self {
        Var::relu(self)
    }
    fn clamp(self, lo: f64, hi: f64) -> Self {
        Var::clamp(self, lo, hi)
    }
}

/// Left fold of `+`. Panics on an empty slice.
pub fn sum<T: Real>(xs: &[T]) -> T {
    let (first, rest) = xs.split_first().expect("sum of an empty slice");
    rest.iter().fold(*first, |acc, &x| acc + x)
}

pub fn mean<T: Real>(xs: &[T]) -> T {
    sum(xs) / xs.len() as f64
}

/// Inner product of two equal-length slices. Panics when empty.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    assert_eq!(a.len(), b.len(), "dot of mismatched lengths");
    let prods: Vec<T> = a.iter().zip(b).map(|(&x, &y)| x * y).collect();
    sum(&prods)
}

/// Gradient of a scalar function evaluated on a fresh tape.
pub fn gradient<F>(f: F, point: &[f64]) -> Result<(f64, Vec<f64>), EvalError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let xs = tape.vars(point);
    let out = f(&tape, &xs);
    let grads = tape.backward(out)?;
    Ok((out.value(), grads.collect(&xs)))
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `|analytic - numeric| / max(1, |analytic|, |numeric|)` per coordinate.
    pub rel_error: Vec<f64>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares reverse-mode gradients against central differences.
///
/// The function must be generic over [`Real`] so that the finite-difference
/// side evaluates the same expression on plain `f64` without a tape.
pub fn grad_check<F>(f: F, point: &[f64], step: f64, tolerance: f64) -> Result<GradCheckReport, EvalError>
where
    F: RealFn,
{
    let tape = Tape::new();
    let xs = tape.vars(point);
    let out = f.eval(&xs);
    let analytic = tape.backward(out)?.collect(&xs);

    let mut numeric = Vec::with_capacity(point.len());
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let hi = f.eval(&probe);
        probe[i] = orig - step;
        let lo = f.eval(&probe);
        probe[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(EvalError::NonFinite {
                node: i,
                op: "finite difference",
                value: if hi.is_finite() { lo } else { hi },
            });
        }
        numeric.push((hi - lo) / (2.0 * step));
    }
    let rel_error: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / 1f64.max(a.abs()).max(n.abs()))
        .collect();
    let max_rel_error = rel_error.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        analytic,
        numeric,
        rel_error,
        max_rel_error,
        tolerance,
        passed: max_rel_error <= tolerance,
    })
}

/// A scalar function of a parameter vector, evaluable on any [`Real`].
pub trait RealFn {
    fn eval<T: Real>(&self, x: &[T]) -> T;
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grad1(f: impl for<'t> Fn(Var<'t>) -> Var<'t>, x: f64) -> f64 {
        let tape = Tape::new();
        let v = tape.var(x);
        let out = f(v);
        tape.backward(out).unwrap().get(v)
    }

    #[test]
    fn primitive_derivatives() {
        assert_relative_eq!(grad1(|x| x.sigmoid(), 0.0), 0.25);
        assert_relative_eq!(grad1(|x| x.ln(), 2.0), 0.5);
        assert_relative_eq!(grad1(|x| x.tanh(), 0.0), 1.0);
        assert_relative_eq!(grad1(|x| x.exp(), 1.0), std::f64::consts::E);
        assert_relative_eq!(grad1(|x| x.sqrt(), 4.0), 0.25);
        assert_eq!(grad1(|x| x.relu(), -1.0), 0.0);
        assert_eq!(grad1(|x| x.relu(), 2.0), 1.0);
        assert_eq!(grad1(|x| -x, 2.0), -1.0);
        assert_eq!(grad1(|x| x.clamp(-1.0, 1.0), 3.0), 0.0);
    }

    #[test]
    fn product_rule() {
        let tape = Tape::new();
        let x = tape.var(3.0);
        let y = tape.var(4.0);
        let f = x * y;
        let g = tape.backward(f).unwrap();
        assert_eq!((g.get(x), g.get(y)), (4.0, 3.0));
    }

    #[test]
    fn quotient_rule() {
        let tape = Tape::new();
        let x = tape.var(3.0);
        let y = tape.var(4.0);
        let g = tape.backward(x / y).unwrap();
        assert_relative_eq!(g.get(x), 0.25);
        assert_relative_eq!(g.get(y), -3.0 / 16.0);
    }

    #[test]
    fn constants_have_zero_gradient() {
        let tape = Tape::new();
        let x = tape.var(1.5);
        let c = tape.constant(2.0) + tape.constant(5.0);
        let _unrelated = x * 2.0;
        let g = tape.backward(c).unwrap();
        assert_eq!(g.get(x), 0.0);
    }

    #[test]
    fn reused_node_accumulates() {
        let tape = Tape::new();
        let x = tape.var(3.0);
        let f = x * x + x;
        assert_eq!(tape.backward(f).unwrap().get(x), 7.0);
    }

    #[test]
    fn ln_of_nonpositive_is_reported() {
        let tape = Tape::new();
        let x = tape.var(-1.0);
        let y = x.ln() * 2.0;
        match tape.backward(y) {
            Err(EvalError::Domain { op, node, .. }) => {
                assert_eq!(op, "ln");
                assert_eq!(node, 1);
            }
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn division_by_zero_is_reported() {
        let tape = Tape::new();
        let x = tape.var(1.0);
        let z = tape.var(0.0);
        assert!(matches!(
            tape.backward(x / z),
            Err(EvalError::Domain { op: "div", .. })
        ));
    }

    #[test]
    fn overflow_is_non_finite() {
        let tape = Tape::new();
        let x = tape.var(1000.0);
        assert!(matches!(
            tape.backward(x.exp()),
            Err(EvalError::NonFinite { .. })
        ));
    }

    #[test]
    fn clear_reuses_tape() {
        let mut tape = Tape::new();
        {
            let x = tape.var(1.0);
            let _ = x.ln() - 1.0;
        }
        tape.clear();
        assert!(tape.is_empty());
        let x = tape.var(2.0);
        let g = tape.backward(x * x).unwrap();
        assert_eq!(g.get(x), 4.0);
    }

    struct Square;
    impl RealFn for Square {
        fn eval<T: Real>(&self, x: &[T]) -> T {
            x[0] * x[0]
        }
    }

    #[test]
    fn grad_check_square() {
        let r = grad_check(Square, &[3.0], 1e-5, 1e-8).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn sigmoid_is_stable_in_both_tails() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert_relative_eq!(sigmoid(0.0), 0.5);
    }
}
