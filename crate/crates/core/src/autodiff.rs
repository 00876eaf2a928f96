//! Tape-based reverse-mode automatic differentiation over scalars.
//!
//! Operations are recorded eagerly on a [`Tape`]: every node stores its
//! forward value together with the local partial derivatives with respect
//! to its parents. Because node ids are handed out in construction order the
//! tape is a topologically sorted DAG, and a single reverse sweep computes
//! all adjoints.
//!
//! The tape is rebuilt for every evaluation. A typical cycle:
//!
//! ```
//! use neemo::autodiff::Tape;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(3.0);
//! let y = tape.leaf(4.0);
//! let z = x * y + 2.0 * x;
//!
//! assert_eq!(tape.eval(z).unwrap(), 18.0);
//! let grads = tape.backward(z).unwrap();
//! assert_eq!(grads.get(x), 6.0);
//! assert_eq!(grads.get(y), 3.0);
//! ```
//!
//! Non-differentiable points follow one rule everywhere: `max`, `min` and
//! `abs` take the derivative of their first argument at ties (`abs(x)` is
//! `max(x, -x)`, so its derivative at zero is `+1`).

use std::cell::{Cell, RefCell};
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use smallvec::SmallVec;
use thiserror::Error;

/// Primitive operation tags carried by every node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Leaf,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Max,
    Min,
    Abs,
    Sqrt,
    Pow,
    Exp,
    Sin,
    Cos,
    Sum,
    /// A node whose value and local partials were computed outside the tape,
    /// e.g. a batched network evaluation at a point held on the tape.
    External,
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Max => "max",
            Op::Min => "min",
            Op::Abs => "abs",
            Op::Sqrt => "sqrt",
            Op::Pow => "pow",
            Op::Exp => "exp",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Sum => "sum",
            Op::External => "external",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("non-finite value produced by `{op}` at node {node}")]
    NonFiniteValue { op: Op, node: usize },
    #[error("non-finite local derivative in `{op}` at node {node}")]
    NonFinitePartial { op: Op, node: usize },
    #[error("backward called on node {node} before forward evaluation")]
    NotEvaluated { node: usize },
    #[error("variable belongs to a different tape")]
    ForeignVar,
}

/// One recorded operation.
#[derive(Debug, Clone)]
pub struct Node {
    pub value: f64,
    pub parents: SmallVec<[(usize, f64); 2]>,
    pub op: Op,
}

/// Records operations for a single evaluation.
///
/// A tape is single-threaded (`!Sync`); separate tapes are independent.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fault: Cell<Option<AutodiffError>>,
    evaluated: Cell<usize>,
}

/// Handle to a node on a [`Tape`]. Cheap to copy; carries its forward value.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
    value: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("value", &self.value)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, value: f64, parents: SmallVec<[(usize, f64); 2]>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if self.fault_is_clear() {
            if !value.is_finite() {
                self.fault.set(Some(AutodiffError::NonFiniteValue { op, node: id }));
            } else if parents.iter().any(|(_, d)| !d.is_finite()) {
                self.fault
                    .set(Some(AutodiffError::NonFinitePartial { op, node: id }));
            }
        }
        // Non-finite partials are never stored; the fault above reports them.
        let parents = parents
            .into_iter()
            .map(|(p, d)| (p, if d.is_finite() { d } else { 0.0 }))
            .collect();
        nodes.push(Node { value, parents, op });
        Var {
            tape: self,
            id,
            value,
        }
    }

    fn fault_is_clear(&self) -> bool {
        let f = self.fault.take();
        let clear = f.is_none();
        self.fault.set(f);
        clear
    }

    /// A differentiable input.
    pub fn leaf(&self, value: f64) -> Var<'_> {
        self.push(Op::Leaf, value, SmallVec::new())
    }

    pub fn leaves(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.leaf(v)).collect()
    }

    /// A constant; gradients never flow into it.
    pub fn constant(&self, value: f64) -> Var<'_> {
        self.push(Op::Const, value, SmallVec::new())
    }

    /// Sum of many terms as one node.
    pub fn sum(&self, terms: &[Var<'_>]) -> Var<'_> {
        let value = terms.iter().map(|t| t.value).sum();
        let parents = terms.iter().map(|t| (t.id, 1.0)).collect();
        self.push(Op::Sum, value, parents)
    }

    /// Records a node whose value and partials were computed elsewhere.
    pub fn external(&self, value: f64, inputs: &[Var<'_>], partials: &[f64]) -> Var<'_> {
        assert_eq!(inputs.len(), partials.len(), "one partial per input");
        let parents = inputs
            .iter()
            .zip(partials)
            .map(|(v, &d)| (v.id, d))
            .collect();
        self.push(Op::External, value, parents)
    }

    /// Forward value of `root`. Fails if any node recorded so far produced a
    /// non-finite value or derivative. Marks the graph up to `root` as
    /// evaluated, which [`Tape::backward`] requires.
    pub fn eval(&self, root: Var<'_>) -> Result<f64, AutodiffError> {
        self.check_owner(root)?;
        if let Some(err) = self.fault.take() {
            self.fault.set(Some(err.clone()));
            return Err(err);
        }
        let len = self.len();
        self.evaluated.set(len);
        Ok(self.nodes.borrow()[root.id].value)
    }

    /// Reverse sweep from `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients, AutodiffError> {
        self.check_owner(root)?;
        if root.id >= self.evaluated.get() {
            return Err(AutodiffError::NotEvaluated { node: root.id });
        }
        let nodes = self.nodes.borrow();
        let mut adjoints = vec![0.0; root.id + 1];
        adjoints[root.id] = 1.0;
        for id in (0..=root.id).rev() {
            let adj = adjoints[id];
            if adj == 0.0 {
                continue;
            }
            for &(p, d) in &nodes[id].parents {
                adjoints[p] += adj * d;
            }
        }
        Ok(Gradients { adjoints })
    }

    fn check_owner(&self, v: Var<'_>) -> Result<(), AutodiffError> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(AutodiffError::ForeignVar)
        }
    }

    /// Snapshot of a recorded node.
    pub fn node(&self, v: Var<'_>) -> Node {
        self.nodes.borrow()[v.id].clone()
    }
}

/// Adjoints of every node up to the root of a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<f64>,
}

impl Gradients {
    /// Adjoint of `v`; zero for nodes the root does not depend on.
    pub fn get(&self, v: Var<'_>) -> f64 {
        self.adjoints.get(v.id).copied().unwrap_or(0.0)
    }

    pub fn wrt(&self, vars: &[Var<'_>]) -> Vec<f64> {
        vars.iter().map(|&v| self.get(v)).collect()
    }
}

impl<'t> Var<'t> {
    pub fn value(self) -> f64 {
        self.value
    }

    pub fn id(self) -> usize {
        self.id
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    fn unary(self, op: Op, value: f64, d: f64) -> Var<'t> {
        let mut parents = SmallVec::new();
        parents.push((self.id, d));
        self.tape.push(op, value, parents)
    }

    fn binary(self, other: Var<'t>, op: Op, value: f64, da: f64, db: f64) -> Var<'t> {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "mixed tapes");
        let mut parents = SmallVec::new();
        parents.push((self.id, da));
        parents.push((other.id, db));
        self.tape.push(op, value, parents)
    }

    fn lift(self, c: f64) -> Var<'t> {
        self.tape.constant(c)
    }

    /// Larger of the two; the first argument wins ties.
    pub fn max(self, other: Var<'t>) -> Var<'t> {
        if self.value >= other.value {
            self.binary(other, Op::Max, self.value, 1.0, 0.0)
        } else {
            self.binary(other, Op::Max, other.value, 0.0, 1.0)
        }
    }

    /// Smaller of the two; the first argument wins ties.
    pub fn min(self, other: Var<'t>) -> Var<'t> {
        if self.value <= other.value {
            self.binary(other, Op::Min, self.value, 1.0, 0.0)
        } else {
            self.binary(other, Op::Min, other.value, 0.0, 1.0)
        }
    }

    pub fn abs(self) -> Var<'t> {
        let d = if self.value >= 0.0 { 1.0 } else { -1.0 };
        self.unary(Op::Abs, self.value.abs(), d)
    }

    pub fn sqrt(self) -> Var<'t> {
        let v = self.value.sqrt();
        self.unary(Op::Sqrt, v, 0.5 / v)
    }

    /// `self` raised to a constant exponent.
    pub fn powf(self, exponent: f64) -> Var<'t> {
        let v = self.value.powf(exponent);
        let d = if exponent == 0.0 {
            0.0
        } else {
            exponent * self.value.powf(exponent - 1.0)
        };
        self.unary(Op::Pow, v, d)
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value.exp();
        self.unary(Op::Exp, v, v)
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(Op::Sin, self.value.sin(), self.value.cos())
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(Op::Cos, self.value.cos(), -self.value.sin())
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Add, self.value + rhs.value, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Sub, self.value - rhs.value, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Mul, self.value * rhs.value, rhs.value, self.value)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let q = self.value / rhs.value;
        self.binary(rhs, Op::Div, q, 1.0 / rhs.value, -q / rhs.value)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(Op::Neg, -self.value, -1.0)
    }
}

macro_rules! scalar_ops {
    ($($trait:ident :: $method:ident),*) => {$(
        impl<'t> $trait<f64> for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: f64) -> Var<'t> {
                let rhs = self.lift(rhs);
                $trait::$method(self, rhs)
            }
        }
        impl<'t> $trait<Var<'t>> for f64 {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                let lhs = rhs.lift(self);
                $trait::$method(lhs, rhs)
            }
        }
    )*};
}

scalar_ops!(Add::add, Sub::sub, Mul::mul, Div::div);

/// Compares reverse-mode gradients of `f` at `point` against central finite
/// differences with the given `step`.
///
/// Returns the largest `|autodiff - fd| / (|fd| + 1e-12)` over coordinates.
/// `f` must build its expression on the supplied tape from the supplied
/// leaves.
pub fn finite_diff_check<F>(f: F, point: &[f64], step: f64) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let xs = tape.leaves(point);
    let y = f(&tape, &xs);
    let analytic = match tape.eval(y).and_then(|_| tape.backward(y)) {
        Ok(g) => g.wrt(&xs),
        Err(_) => return f64::INFINITY,
    };

    let value_at = |p: &[f64]| {
        let tape = Tape::new();
        let xs = tape.leaves(p);
        f(&tape, &xs).value()
    };

    let mut worst: f64 = 0.0;
    let mut probe = point.to_vec();
    for (i, &a) in analytic.iter().enumerate() {
        let x0 = point[i];
        probe[i] = x0 + step;
        let up = value_at(&probe);
        probe[i] = x0 - step;
        let down = value_at(&probe);
        probe[i] = x0;
        let fd = (up - down) / (2.0 * step);
        let err = (a - fd).abs() / (fd.abs() + 1e-12);
        if err.is_nan() {
            return f64::INFINITY;
        }
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn affine_value_and_derivative() {
        for x0 in [-2.0, 0.0, 1.0, 7.5] {
            let tape = Tape::new();
            let x = tape.leaf(x0);
            let y = 2.0 * x + 3.0;
            assert_eq!(tape.eval(y).unwrap(), 2.0 * x0 + 3.0);
            assert_eq!(tape.backward(y).unwrap().get(x), 2.0);
        }
        let tape = Tape::new();
        let x = tape.leaf(1.0);
        assert_eq!(tape.eval(2.0 * x + 3.0).unwrap(), 5.0);
    }

    #[test]
    fn square_at_zero() {
        let tape = Tape::new();
        let x = tape.leaf(0.0);
        let y = x * x;
        assert_eq!(tape.eval(y).unwrap(), 0.0);
        assert_eq!(tape.backward(y).unwrap().get(x), 0.0);
    }

    #[test]
    fn product_rule_leaf_case() {
        let tape = Tape::new();
        let x = tape.leaf(3.0);
        let y = tape.leaf(4.0);
        let z = x * y;
        tape.eval(z).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.get(x), 4.0);
        assert_eq!(g.get(y), 3.0);
    }

    #[test]
    fn root_adjoint_is_one_and_unreachable_leaves_are_zero() {
        let tape = Tape::new();
        let x = tape.leaf(1.5);
        let unused = tape.leaf(9.0);
        let y = x.sin();
        tape.eval(y).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(y), 1.0);
        assert_eq!(g.get(unused), 0.0);
    }

    #[test]
    fn backward_before_eval_is_a_state_error() {
        let tape = Tape::new();
        let x = tape.leaf(1.0);
        let y = x * 2.0;
        assert_eq!(
            tape.backward(y).unwrap_err(),
            AutodiffError::NotEvaluated { node: y.id() }
        );
        tape.eval(y).unwrap();
        let z = y + 1.0;
        assert!(tape.backward(z).is_err());
        assert!(tape.backward(y).is_ok());
    }

    #[test]
    fn non_finite_values_name_the_op() {
        let tape = Tape::new();
        let x = tape.leaf(0.0);
        let y = 1.0 / x;
        let err = tape.eval(y).unwrap_err();
        assert_eq!(err, AutodiffError::NonFiniteValue { op: Op::Div, node: y.id() });
        assert!(err.to_string().contains("div"));

        let tape = Tape::new();
        let x = tape.leaf(0.0);
        let y = x.sqrt();
        assert!(matches!(
            tape.eval(y),
            Err(AutodiffError::NonFinitePartial { op: Op::Sqrt, .. })
        ));
        assert!(tape.node(y).parents.iter().all(|(_, d)| d.is_finite()));
    }

    #[test]
    fn tie_rules_pick_the_first_argument() {
        let tape = Tape::new();
        let a = tape.leaf(2.0);
        let b = tape.leaf(2.0);
        let hi = a.max(b);
        let lo = a.min(b);
        let s = hi + lo;
        tape.eval(s).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a), 2.0);
        assert_eq!(g.get(b), 0.0);

        let tape = Tape::new();
        let x = tape.leaf(0.0);
        let y = x.abs();
        tape.eval(y).unwrap();
        assert_eq!(tape.backward(y).unwrap().get(x), 1.0);
    }

    #[test]
    fn external_nodes_chain_through_given_partials() {
        let tape = Tape::new();
        let x = tape.leaf(2.0);
        let y = tape.leaf(-1.0);
        let u = x * 3.0;
        let e = tape.external(10.0, &[u, y], &[0.5, 4.0]);
        tape.eval(e).unwrap();
        let g = tape.backward(e).unwrap();
        assert_eq!(g.get(x), 1.5);
        assert_eq!(g.get(y), 4.0);
    }

    type Unary = for<'t> fn(Var<'t>) -> Var<'t>;
    type Binary = for<'t> fn(Var<'t>, Var<'t>) -> Var<'t>;

    #[test]
    fn every_primitive_matches_finite_differences() {
        let unary: [(&str, Unary, f64, f64); 8] = [
            ("neg", |x| -x, -3.0, 3.0),
            ("abs", |x| x.abs(), -3.0, 3.0),
            ("sqrt", |x| x.sqrt(), 0.1, 4.0),
            ("pow", |x| x.powf(2.7), 0.1, 3.0),
            ("exp", |x| x.exp(), -2.0, 2.0),
            ("sin", |x| x.sin(), -3.0, 3.0),
            ("cos", |x| x.cos(), -3.0, 3.0),
            ("square", |x| x.square(), -3.0, 3.0),
        ];
        let binary: [(&str, Binary); 6] = [
            ("add", |a, b| a + b),
            ("sub", |a, b| a - b),
            ("mul", |a, b| a * b),
            ("div", |a, b| a / b),
            ("max", |a, b| a.max(b)),
            ("min", |a, b| a.min(b)),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (name, op, lo, hi) in unary {
            for _ in 0..100 {
                let x = rng.gen_range(lo..hi);
                if name == "abs" && x.abs() < 1e-3 {
                    continue;
                }
                let err = finite_diff_check(|_, v| op(v[0]), &[x], 1e-6);
                assert!(err <= 1e-6, "{name} at {x}: {err}");
            }
        }
        for (name, op) in binary {
            for _ in 0..100 {
                let a: f64 = rng.gen_range(-3.0..3.0);
                let mut b: f64 = rng.gen_range(-3.0..3.0);
                if name == "div" && b.abs() < 0.5 {
                    b += 1.0f64.copysign(b);
                }
                if (a - b).abs() < 1e-3 {
                    continue;
                }
                let err = finite_diff_check(|_, v| op(v[0], v[1]), &[a, b], 1e-6);
                assert!(err <= 1e-6, "{name} at ({a}, {b}): {err}");
            }
        }
    }

    #[test]
    fn finite_diff_check_reference_cases() {
        let err = finite_diff_check(
            |_, v| v[0] * v[0] * 3.0 + v[0] * v[1] * 2.0 + v[1] * v[1] - v[1] * 5.0,
            &[0.7, -1.3],
            1e-5,
        );
        assert!(err <= 1e-8, "{err}");
        assert_eq!(finite_diff_check(|t, _| t.constant(4.0), &[0.2, 0.3], 1e-5), 0.0);
    }

    fn part_f<'t>(v: &[Var<'t>]) -> Var<'t> {
        (v[0] * v[1]).sin() + v[2].sqrt() * v[0]
    }

    fn part_g<'t>(v: &[Var<'t>]) -> Var<'t> {
        v[1].exp() / v[2] - v[0].abs()
    }

    fn both<'t>(v: &[Var<'t>]) -> Var<'t> {
        part_f(v) + part_g(v)
    }

    fn grad_of(h: for<'t> fn(&[Var<'t>]) -> Var<'t>, p: &[f64]) -> Vec<f64> {
        let tape = Tape::new();
        let xs = tape.leaves(p);
        let y = h(&xs);
        tape.eval(y).unwrap();
        tape.backward(y).unwrap().wrt(&xs)
    }

    #[test]
    fn gradient_of_a_sum_is_the_sum_of_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let p: Vec<f64> = (0..3).map(|_| rng.gen_range(0.5..2.0)).collect();
            let gf = grad_of(part_f, &p);
            let gg = grad_of(part_g, &p);
            let gs = grad_of(both, &p);
            for i in 0..3 {
                assert!((gs[i] - (gf[i] + gg[i])).abs() <= 1e-12 * (1.0 + gs[i].abs()));
            }
        }
    }

    #[test]
    fn evaluation_is_deterministic() {
        let build = || {
            let tape = Tape::new();
            let xs = tape.leaves(&[0.3, -1.7, 2.2]);
            let terms: Vec<_> = xs.iter().map(|&x| (x * 1.1).cos() * x).collect();
            let y = tape.sum(&terms).max(xs[0]);
            let v = tape.eval(y).unwrap();
            let g = tape.backward(y).unwrap().wrt(&xs);
            (v.to_bits(), g.iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(build(), build());
    }
}
