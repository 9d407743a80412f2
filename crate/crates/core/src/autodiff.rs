//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] records every elementary operation performed on [`Var`]s: its
//! kind, the indices of the nodes it read, and the local partial derivative
//! with respect to each of them. The reverse sweep walks the node list once,
//! from the output back to the inputs.
//!
//! Constants are represented by `Var`s without a tape; combining a constant
//! with a taped value records a single unary node.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    Input,
    Add,
    Sub,
    Mul,
    Div,
    /// `scale * x + shift`; covers negation and arithmetic with constants.
    Affine { scale: f64, shift: f64 },
    /// `c / x`.
    Recip { numer: f64 },
    Exp,
    Ln,
    Sqrt,
    Tanh,
    Ln1p,
    Powi(i32),
    /// `shift + Σ_k partial_k * parent_k`.
    Dot { shift: f64 },
    /// Identity copy of the branch chosen by a max/min comparison.
    Select,
    /// A fused operation recorded with hand-computed partials. Replay uses
    /// its first-order expansion around the recorded point.
    Precomputed,
}

#[derive(Debug, Default)]
struct TapeInner {
    kinds: Vec<OpKind>,
    values: Vec<f64>,
    starts: Vec<u32>,
    parents: Vec<u32>,
    partials: Vec<f64>,
}

impl TapeInner {
    fn push(&mut self, kind: OpKind, value: f64, parents: &[(u32, f64)]) -> u32 {
        let idx = self.kinds.len() as u32;
        self.kinds.push(kind);
        self.values.push(value);
        self.starts.push(self.parents.len() as u32);
        for &(p, w) in parents {
            self.parents.push(p);
            self.partials.push(w);
        }
        idx
    }

    fn span(&self, node: usize) -> std::ops::Range<usize> {
        let start = self.starts[node] as usize;
        let end = self
            .starts
            .get(node + 1)
            .map(|&s| s as usize)
            .unwrap_or(self.parents.len());
        start..end
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drop every node while keeping the allocations.
    pub fn clear(&self) {
        let mut t = self.inner.borrow_mut();
        t.kinds.clear();
        t.values.clear();
        t.starts.clear();
        t.parents.clear();
        t.partials.clear();
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input(&self, value: f64) -> Var<'_> {
        let idx = self.inner.borrow_mut().push(OpKind::Input, value, &[]);
        Var {
            tape: Some(self),
            idx,
            val: value,
        }
    }

    pub fn inputs(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.input(v)).collect()
    }

    fn record(&self, kind: OpKind, value: f64, parents: &[(u32, f64)]) -> Var<'_> {
        let idx = self.inner.borrow_mut().push(kind, value, parents);
        Var {
            tape: Some(self),
            idx,
            val: value,
        }
    }

    /// Adjoints of every node with respect to `output`, seeded with 1.
    pub fn adjoints(&self, output: Var<'_>) -> Vec<f64> {
        let t = self.inner.borrow();
        let mut adj = vec![0.0; t.kinds.len()];
        if output.tape.is_none() {
            return adj;
        }
        adj[output.idx as usize] = 1.0;
        for node in (0..=output.idx as usize).rev() {
            let a = adj[node];
            if a == 0.0 {
                continue;
            }
            for e in t.span(node) {
                adj[t.parents[e] as usize] += t.partials[e] * a;
            }
        }
        adj
    }

    /// Gradient of `output` with respect to the given inputs.
    pub fn gradient(&self, output: Var<'_>, inputs: &[Var<'_>]) -> Vec<f64> {
        let adj = self.adjoints(output);
        inputs
            .iter()
            .map(|v| if v.tape.is_some() { adj[v.idx as usize] } else { 0.0 })
            .collect()
    }

    /// Re-evaluate every node forward from fresh input values, reusing the
    /// recorded operations and branch selections. Input nodes receive the
    /// values in `inputs` in the order they were created.
    pub fn replay(&self, inputs: &[f64]) -> Vec<f64> {
        let t = self.inner.borrow();
        let mut vals = vec![0.0; t.kinds.len()];
        let mut next_input = 0;
        for node in 0..t.kinds.len() {
            let span = t.span(node);
            let p = |k: usize| vals[t.parents[span.start + k] as usize];
            vals[node] = match t.kinds[node] {
                OpKind::Input => {
                    let v = inputs.get(next_input).copied().unwrap_or(t.values[node]);
                    next_input += 1;
                    v
                }
                OpKind::Add => p(0) + p(1),
                OpKind::Sub => p(0) - p(1),
                OpKind::Mul => p(0) * p(1),
                OpKind::Div => p(0) / p(1),
                OpKind::Affine { scale, shift } => scale * p(0) + shift,
                OpKind::Recip { numer } => numer / p(0),
                OpKind::Exp => p(0).exp(),
                OpKind::Ln => p(0).ln(),
                OpKind::Sqrt => p(0).sqrt(),
                OpKind::Tanh => p(0).tanh(),
                OpKind::Ln1p => p(0).ln_1p(),
                OpKind::Powi(n) => p(0).powi(n),
                OpKind::Dot { shift } => {
                    let mut acc = shift;
                    for e in span.clone() {
                        acc += t.partials[e] * vals[t.parents[e] as usize];
                    }
                    acc
                }
                OpKind::Select => p(0),
                OpKind::Precomputed => {
                    let mut acc = t.values[node];
                    for e in span.clone() {
                        let parent = t.parents[e] as usize;
                        acc += t.partials[e] * (vals[parent] - t.values[parent]);
                    }
                    acc
                }
            };
        }
        vals
    }

    pub fn value(&self, node: usize) -> f64 {
        self.inner.borrow().values[node]
    }
}

/// A value that may be recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    idx: u32,
    val: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.tape {
            Some(_) => write!(f, "Var({} @{})", self.val, self.idx),
            None => write!(f, "Const({})", self.val),
        }
    }
}

impl<'t> Var<'t> {
    pub fn constant(val: f64) -> Self {
        Var {
            tape: None,
            idx: 0,
            val,
        }
    }

    pub fn index(&self) -> Option<usize> {
        self.tape.map(|_| self.idx as usize)
    }

    pub fn is_constant(&self) -> bool {
        self.tape.is_none()
    }

    fn unary(self, kind: OpKind, value: f64, partial: f64) -> Self {
        match self.tape {
            Some(t) => t.record(kind, value, &[(self.idx, partial)]),
            None => Var::constant(value),
        }
    }

    fn binary(
        self,
        other: Self,
        kind: OpKind,
        value: f64,
        d_self: f64,
        d_other: f64,
        fold_left: impl FnOnce(f64) -> OpKind,
        fold_right: impl FnOnce(f64) -> OpKind,
    ) -> Self {
        match (self.tape, other.tape) {
            (Some(t), Some(_)) => t.record(kind, value, &[(self.idx, d_self), (other.idx, d_other)]),
            (Some(t), None) => t.record(fold_left(other.val), value, &[(self.idx, d_self)]),
            (None, Some(t)) => {
                t.record(fold_right(self.val), value, &[(other.idx, d_other)])
            }
            (None, None) => Var::constant(value),
        }
    }

    /// Pass `self` through as the selected branch of a comparison.
    pub fn select(self) -> Self {
        self.unary(OpKind::Select, self.val, 1.0)
    }
}

impl PartialEq for Var<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.val == other.val
    }
}

impl PartialOrd for Var<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        self.val.partial_cmp(&other.val)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Self) -> Self {
        self.binary(
            rhs,
            OpKind::Add,
            self.val + rhs.val,
            1.0,
            1.0,
            |c| OpKind::Affine { scale: 1.0, shift: c },
            |c| OpKind::Affine { scale: 1.0, shift: c },
        )
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Self) -> Self {
        self.binary(
            rhs,
            OpKind::Sub,
            self.val - rhs.val,
            1.0,
            -1.0,
            |c| OpKind::Affine { scale: 1.0, shift: -c },
            |c| OpKind::Affine { scale: -1.0, shift: c },
        )
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Self) -> Self {
        self.binary(
            rhs,
            OpKind::Mul,
            self.val * rhs.val,
            rhs.val,
            self.val,
            |c| OpKind::Affine { scale: c, shift: 0.0 },
            |c| OpKind::Affine { scale: c, shift: 0.0 },
        )
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Self) -> Self {
        let q = self.val / rhs.val;
        self.binary(
            rhs,
            OpKind::Div,
            q,
            1.0 / rhs.val,
            -q / rhs.val,
            |c| OpKind::Affine { scale: 1.0 / c, shift: 0.0 },
            |c| OpKind::Recip { numer: c },
        )
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Self {
        self.unary(OpKind::Affine { scale: -1.0, shift: 0.0 }, -self.val, -1.0)
    }
}

impl AddAssign for Var<'_> {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl<'t> Real for Var<'t> {
    fn cst(c: f64) -> Self {
        Var::constant(c)
    }

    fn select(self) -> Self {
        Var::select(self)
    }

    fn value(self) -> f64 {
        self.val
    }

    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(OpKind::Exp, e, e)
    }

    fn ln(self) -> Self {
        self.unary(OpKind::Ln, self.val.ln(), 1.0 / self.val)
    }

    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.unary(OpKind::Sqrt, s, 0.5 / s)
    }

    fn tanh(self) -> Self {
        let th = self.val.tanh();
        self.unary(OpKind::Tanh, th, 1.0 - th * th)
    }

    fn ln_1p(self) -> Self {
        self.unary(OpKind::Ln1p, self.val.ln_1p(), 1.0 / (1.0 + self.val))
    }

    fn powi(self, n: i32) -> Self {
        let d = if n == 0 {
            0.0
        } else {
            n as f64 * self.val.powi(n - 1)
        };
        self.unary(OpKind::Powi(n), self.val.powi(n), d)
    }

    fn scale(self, c: f64) -> Self {
        self.unary(OpKind::Affine { scale: c, shift: 0.0 }, c * self.val, c)
    }

    fn offset(self, c: f64) -> Self {
        self.unary(OpKind::Affine { scale: 1.0, shift: c }, self.val + c, 1.0)
    }

    fn dot(coefs: &[f64], xs: &[Self]) -> Self {
        Self::dot_blocks(&[(coefs, xs)])
    }

    fn dot_blocks(blocks: &[(&[f64], &[Self])]) -> Self {
        let mut tape = None;
        let mut shift = 0.0;
        let mut value = 0.0;
        let mut edges: smallvec_like::Edges = smallvec_like::Edges::new();
        for (coefs, xs) in blocks {
            debug_assert_eq!(coefs.len(), xs.len());
            for (&c, x) in coefs.iter().zip(xs.iter()) {
                if c == 0.0 {
                    continue;
                }
                value += c * x.val;
                match x.tape {
                    Some(t) => {
                        tape = Some(t);
                        edges.push((x.idx, c));
                    }
                    None => shift += c * x.val,
                }
            }
        }
        match tape {
            Some(t) => t.record(OpKind::Dot { shift }, value, edges.as_slice()),
            None => Var::constant(value),
        }
    }

    fn sum(xs: &[Self]) -> Self {
        let mut tape = None;
        let mut shift = 0.0;
        let mut value = 0.0;
        let mut edges = smallvec_like::Edges::new();
        for x in xs {
            value += x.val;
            match x.tape {
                Some(t) => {
                    tape = Some(t);
                    edges.push((x.idx, 1.0));
                }
                None => shift += x.val,
            }
        }
        match tape {
            Some(t) => t.record(OpKind::Dot { shift }, value, edges.as_slice()),
            None => Var::constant(value),
        }
    }

    fn square(self) -> Self {
        self.unary(OpKind::Powi(2), self.val * self.val, 2.0 * self.val)
    }

    fn precomputed(value: f64, parents: &[(Self, f64)]) -> Self {
        let mut tape = None;
        let mut edges = smallvec_like::Edges::new();
        for (x, d) in parents {
            if let Some(t) = x.tape {
                tape = Some(t);
                if *d != 0.0 {
                    edges.push((x.idx, *d));
                }
            }
        }
        match tape {
            Some(t) => t.record(OpKind::Precomputed, value, edges.as_slice()),
            None => Var::constant(value),
        }
    }
}

mod smallvec_like {
    /// Edge buffer that stays on the stack for the short dot products that
    /// dominate the likelihood.
    pub struct Edges {
        inline: [(u32, f64); 16],
        len: usize,
        spill: Vec<(u32, f64)>,
    }

    impl Edges {
        pub fn new() -> Self {
            Edges {
                inline: [(0, 0.0); 16],
                len: 0,
                spill: Vec::new(),
            }
        }

        pub fn push(&mut self, e: (u32, f64)) {
            if self.spill.is_empty() && self.len < self.inline.len() {
                self.inline[self.len] = e;
                self.len += 1;
            } else {
                if self.spill.is_empty() {
                    self.spill.extend_from_slice(&self.inline[..self.len]);
                }
                self.spill.push(e);
            }
        }

        pub fn as_slice(&self) -> &[(u32, f64)] {
            if self.spill.is_empty() {
                &self.inline[..self.len]
            } else {
                &self.spill
            }
        }
    }
}

/// Value and gradient of `f` at `x`, using a fresh tape.
pub fn value_and_gradient<F>(x: &[f64], f: F) -> (f64, Vec<f64>)
where
    F: for<'t> FnOnce(&[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let inputs = tape.inputs(x);
    let out = f(&inputs);
    let grad = tape.gradient(out, &inputs);
    (out.value(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|k| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[k] += h;
                b[k] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    fn composite<T: Real>(x: &[T]) -> T {
        let a = x[0] * x[1] + x[2].exp();
        let b = (x[0].square() + T::one()).ln() - x[1] / (x[2].offset(3.0));
        let c = T::dot(&[0.5, -2.0, 1.5], x) + x[1].tanh() * x[0].sqrt();
        let d = T::sum(&[a, b, c]) + x[2].powi(3).scale(0.1) + (x[0] * x[0]).ln_1p();
        d - T::cst(2.0) / x[1]
    }

    #[test]
    fn quadratic_gradient_is_exact() {
        let p = [0.3, -1.2, 2.5, 0.0];
        let (v, g) = value_and_gradient(&p, |x| {
            let s: Vec<Var> = x.iter().map(|v| v.square()).collect();
            Var::sum(&s).scale(-0.5)
        });
        assert_eq!(v, -0.5 * p.iter().map(|x| x * x).sum::<f64>());
        for (gi, pi) in g.iter().zip(&p) {
            assert_eq!(*gi, -pi);
        }
    }

    #[test]
    fn composite_matches_finite_differences() {
        let x = [0.7, 1.3, -0.4];
        let (v, g) = value_and_gradient(&x, |vars| composite(vars));
        assert!((v - composite(&x[..])).abs() < 1e-14);
        let num = fd(|y| composite(y), &x, 1e-6);
        for (a, b) in g.iter().zip(&num) {
            assert!((a - b).abs() < 1e-7 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn replay_reproduces_values() {
        let tape = Tape::new();
        let x = [0.7, 1.3, -0.4];
        let inputs = tape.inputs(&x);
        let out = composite(&inputs);
        let vals = tape.replay(&x);
        assert_eq!(vals[out.index().unwrap()], out.value());

        let y = [0.9, 1.1, -0.2];
        let vals = tape.replay(&y);
        assert!((vals[out.index().unwrap()] - composite(&y[..])).abs() < 1e-12);
    }

    #[test]
    fn constants_do_not_touch_the_tape() {
        let tape = Tape::new();
        let a = Var::constant(2.0);
        let b = Var::constant(3.0);
        let c = (a * b).exp();
        assert!(c.is_constant());
        assert!(tape.is_empty());
        let x = tape.input(1.0);
        let y = x * a + b;
        assert_eq!(y.value(), 5.0);
        assert_eq!(tape.len(), 3);
        assert_eq!(tape.gradient(y, &[x]), vec![2.0]);
    }

    #[test]
    fn select_follows_the_chosen_branch() {
        let (_, g) = value_and_gradient(&[1.0, 3.0, 3.0], |x| {
            let mut best = x[0];
            for &v in &x[1..] {
                if v > best {
                    best = v;
                }
            }
            best.select().scale(2.0)
        });
        // tie between x[1] and x[2] resolves to the lower index
        assert_eq!(g, vec![0.0, 2.0, 0.0]);
    }

    #[test]
    fn long_dot_spills_to_heap() {
        let x: Vec<f64> = (0..40).map(|k| k as f64 * 0.1).collect();
        let coefs: Vec<f64> = (0..40).map(|k| (k as f64).sin()).collect();
        let (v, g) = value_and_gradient(&x, |vars| Var::dot(&coefs, vars));
        let expect: f64 = coefs.iter().zip(&x).map(|(c, v)| c * v).sum();
        assert!((v - expect).abs() < 1e-12);
        for (k, gk) in g.iter().enumerate() {
            assert_eq!(*gk, coefs[k]);
        }
    }
}
