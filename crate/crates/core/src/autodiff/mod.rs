//! Tape-based differentiation engine.
//!
//! Every tape node carries a dual value `(primal, tangent)`, where the
//! tangent is the directional derivative with respect to the seeded input
//! coordinates. Parameter gradients of a scalar loss come from a reverse
//! sweep over the dual-valued tape, which also differentiates correctly
//! *through* one level of extracted input derivative ([`Tape::tangent_of`]):
//! exactly what a first-order equation residual needs.
//!
//! The adjoint of node `i` during the reverse sweep is the pair
//! `(a_i, b_i) = (dL/d primal_i, dL/d tangent_i)`. For a node
//! `k = phi(i, ...)` the update rules are
//!
//! ```text
//! a_i += a_k * phi_i  +  b_k * Dx(phi_i)
//! b_i += b_k * phi_i
//! ```
//!
//! with `phi_i` the partial derivative of `phi` with respect to operand `i`
//! and `Dx` the forward directional derivative (available from the stored
//! duals). Nodes downstream of a `tangent_of` extraction have no valid
//! tangent of their own; the tape tracks validity and refuses a second
//! nested extraction, and the sweep never reads an invalid tangent with a
//! nonzero multiplier.

mod dual;

pub use dual::Dual;

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) u32);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Elementary operations recorded on the tape.
///
/// `Dot` and `Sum` are n-ary over scalar nodes; their operand lists live in
/// the tape's argument arena.
#[derive(Debug, Clone, Copy)]
enum Op {
    Param,
    Input,
    Const,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Neg(u32),
    Tanh(u32),
    Exp(u32),
    Ln(u32),
    Square(u32),
    /// args[off..off+len] . args[off+len..off+2len]
    Dot { off: u32, len: u32 },
    Sum { off: u32, len: u32 },
    TangentOf(u32),
}

/// Append-only record of a differentiable computation.
///
/// Topologically ordered by construction: operands always precede their
/// consumers. Single-threaded; distinct tapes may live on distinct threads.
pub struct Tape {
    ops: Vec<Op>,
    duals: Vec<Dual>,
    args: Vec<u32>,
    /// Whether the stored tangent is a genuine input derivative. False for
    /// `TangentOf` nodes and anything computed from one.
    tangent_ok: Vec<bool>,
    n_params: usize,
}

impl Tape {
    /// Start a tape whose first `params.len()` nodes are the trainable
    /// parameters, in order.
    pub fn new(params: &[f64]) -> Tape {
        let mut tape = Tape {
            ops: Vec::with_capacity(params.len() + 1024),
            duals: Vec::with_capacity(params.len() + 1024),
            args: Vec::new(),
            tangent_ok: Vec::with_capacity(params.len() + 1024),
            n_params: params.len(),
        };
        for &p in params {
            tape.push(Op::Param, Dual::constant(p), true);
        }
        tape
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    /// Node handle for trainable parameter `i`.
    pub fn param(&self, i: usize) -> NodeId {
        assert!(i < self.n_params, "parameter index out of range");
        NodeId(i as u32)
    }

    pub fn value(&self, id: NodeId) -> f64 {
        self.duals[id.index()].v
    }

    pub fn tangent(&self, id: NodeId) -> f64 {
        self.duals[id.index()].dv
    }

    #[inline]
    fn push(&mut self, op: Op, d: Dual, ok: bool) -> NodeId {
        let id = self.ops.len() as u32;
        self.ops.push(op);
        self.duals.push(d);
        self.tangent_ok.push(ok);
        NodeId(id)
    }

    #[inline]
    fn dual(&self, i: u32) -> Dual {
        self.duals[i as usize]
    }

    #[inline]
    fn ok(&self, i: u32) -> bool {
        self.tangent_ok[i as usize]
    }

    /// Record an input leaf. Seeded inputs get tangent 1, everything else 0.
    pub fn input(&mut self, value: f64, seeded: bool) -> NodeId {
        let d = if seeded { Dual::seeded(value) } else { Dual::constant(value) };
        self.push(Op::Input, d, true)
    }

    pub fn constant(&mut self, value: f64) -> NodeId {
        self.push(Op::Const, Dual::constant(value), true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.dual(a.0).add(self.dual(b.0));
        let ok = self.ok(a.0) && self.ok(b.0);
        self.push(Op::Add(a.0, b.0), d, ok)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.dual(a.0).sub(self.dual(b.0));
        let ok = self.ok(a.0) && self.ok(b.0);
        self.push(Op::Sub(a.0, b.0), d, ok)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.dual(a.0).mul(self.dual(b.0));
        let ok = self.ok(a.0) && self.ok(b.0);
        self.push(Op::Mul(a.0, b.0), d, ok)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.dual(a.0).div(self.dual(b.0));
        let ok = self.ok(a.0) && self.ok(b.0);
        self.push(Op::Div(a.0, b.0), d, ok)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let ok = self.ok(a.0);
        let d = self.dual(a.0).neg();
        self.push(Op::Neg(a.0), d, ok)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let ok = self.ok(a.0);
        let d = self.dual(a.0).tanh();
        self.push(Op::Tanh(a.0), d, ok)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let ok = self.ok(a.0);
        let d = self.dual(a.0).exp();
        self.push(Op::Exp(a.0), d, ok)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let ok = self.ok(a.0);
        let d = self.dual(a.0).ln();
        self.push(Op::Ln(a.0), d, ok)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let ok = self.ok(a.0);
        let d = self.dual(a.0).square();
        self.push(Op::Square(a.0), d, ok)
    }

    /// Inner product of two equal-length node slices.
    pub fn dot(&mut self, xs: &[NodeId], ys: &[NodeId]) -> NodeId {
        assert_eq!(xs.len(), ys.len(), "dot operand length mismatch");
        let off = self.args.len() as u32;
        let len = xs.len() as u32;
        self.args.extend(xs.iter().map(|n| n.0));
        self.args.extend(ys.iter().map(|n| n.0));
        let mut d = Dual::ZERO;
        let mut ok = true;
        for (x, y) in xs.iter().zip(ys) {
            d = d.add(self.dual(x.0).mul(self.dual(y.0)));
            ok = ok && self.ok(x.0) && self.ok(y.0);
        }
        self.push(Op::Dot { off, len }, d, ok)
    }

    pub fn sum(&mut self, xs: &[NodeId]) -> NodeId {
        let off = self.args.len() as u32;
        let len = xs.len() as u32;
        self.args.extend(xs.iter().map(|n| n.0));
        let mut d = Dual::ZERO;
        let mut ok = true;
        for x in xs {
            d = d.add(self.dual(x.0));
            ok = ok && self.ok(x.0);
        }
        self.push(Op::Sum { off, len }, d, ok)
    }

    /// Extract the input derivative of `a` as a first-class scalar node.
    ///
    /// The result is differentiable with respect to the parameters (the
    /// nesting contract) but carries no input derivative of its own; a
    /// second extraction over it is rejected.
    pub fn tangent_of(&mut self, a: NodeId) -> Result<NodeId> {
        if !self.ok(a.0) {
            return Err(Error::InvalidTangent { node: a.index() });
        }
        let d = Dual::constant(self.dual(a.0).dv);
        Ok(self.push(Op::TangentOf(a.0), d, false))
    }

    /// Reverse sweep: gradient of the scalar at `loss` with respect to all
    /// trainable parameters, in parameter order. Deterministic for a given
    /// tape.
    pub fn grad_params(&self, loss: NodeId) -> Result<Vec<f64>> {
        let n = self.ops.len();
        if loss.index() >= n {
            return Err(Error::NodeOutOfRange { node: loss.index(), len: n });
        }
        // a = dL/d(primal), b = dL/d(tangent)
        let mut a = vec![0.0f64; n];
        let mut b = vec![0.0f64; n];
        a[loss.index()] = 1.0;

        for k in (self.n_params..n).rev() {
            let ak = a[k];
            let bk = b[k];
            if ak == 0.0 && bk == 0.0 {
                continue;
            }
            match self.ops[k] {
                Op::Param | Op::Input | Op::Const => {}
                Op::Add(i, j) => {
                    a[i as usize] += ak;
                    a[j as usize] += ak;
                    b[i as usize] += bk;
                    b[j as usize] += bk;
                }
                Op::Sub(i, j) => {
                    a[i as usize] += ak;
                    a[j as usize] -= ak;
                    b[i as usize] += bk;
                    b[j as usize] -= bk;
                }
                Op::Mul(i, j) => {
                    let di = self.dual(i);
                    let dj = self.dual(j);
                    a[i as usize] += ak * dj.v + bk * dj.dv;
                    a[j as usize] += ak * di.v + bk * di.dv;
                    b[i as usize] += bk * dj.v;
                    b[j as usize] += bk * di.v;
                }
                Op::Div(i, j) => {
                    // k = i / j: phi_i = 1/j, phi_j = -k/j
                    let dj = self.dual(j);
                    let dk = self.duals[k];
                    let inv = 1.0 / dj.v;
                    let d_inv = -dj.dv * inv * inv; // Dx(1/j)
                    let phi_j = -dk.v * inv;
                    let d_phi_j = -(dk.dv * inv + dk.v * d_inv);
                    a[i as usize] += ak * inv + bk * d_inv;
                    a[j as usize] += ak * phi_j + bk * d_phi_j;
                    b[i as usize] += bk * inv;
                    b[j as usize] += bk * phi_j;
                }
                Op::Neg(i) => {
                    a[i as usize] -= ak;
                    b[i as usize] -= bk;
                }
                Op::Tanh(i) => {
                    let dk = self.duals[k];
                    let phi = 1.0 - dk.v * dk.v;
                    let d_phi = -2.0 * dk.v * dk.dv;
                    a[i as usize] += ak * phi + bk * d_phi;
                    b[i as usize] += bk * phi;
                }
                Op::Exp(i) => {
                    let dk = self.duals[k];
                    a[i as usize] += ak * dk.v + bk * dk.dv;
                    b[i as usize] += bk * dk.v;
                }
                Op::Ln(i) => {
                    let di = self.dual(i);
                    let inv = 1.0 / di.v;
                    let d_inv = -di.dv * inv * inv;
                    a[i as usize] += ak * inv + bk * d_inv;
                    b[i as usize] += bk * inv;
                }
                Op::Square(i) => {
                    let di = self.dual(i);
                    a[i as usize] += ak * 2.0 * di.v + bk * 2.0 * di.dv;
                    b[i as usize] += bk * 2.0 * di.v;
                }
                Op::Dot { off, len } => {
                    let (off, len) = (off as usize, len as usize);
                    for m in 0..len {
                        let i = self.args[off + m];
                        let j = self.args[off + len + m];
                        let di = self.dual(i);
                        let dj = self.dual(j);
                        a[i as usize] += ak * dj.v + bk * dj.dv;
                        a[j as usize] += ak * di.v + bk * di.dv;
                        b[i as usize] += bk * dj.v;
                        b[j as usize] += bk * di.v;
                    }
                }
                Op::Sum { off, len } => {
                    let (off, len) = (off as usize, len as usize);
                    for m in 0..len {
                        let i = self.args[off + m] as usize;
                        a[i] += ak;
                        b[i] += bk;
                    }
                }
                Op::TangentOf(i) => {
                    // primal(k) = tangent(i); tangent(k) is inert by fiat.
                    b[i as usize] += ak;
                }
            }
        }
        a.truncate(self.n_params);
        Ok(a)
    }

    /// Recompute every dual from the recorded ops. Used to check the
    /// bit-exact replay invariant.
    pub fn replay(&self) -> Vec<Dual> {
        let mut out: Vec<Dual> = Vec::with_capacity(self.duals.len());
        for (k, op) in self.ops.iter().enumerate() {
            let d = match *op {
                Op::Param | Op::Input | Op::Const => self.duals[k],
                Op::Add(i, j) => out[i as usize].add(out[j as usize]),
                Op::Sub(i, j) => out[i as usize].sub(out[j as usize]),
                Op::Mul(i, j) => out[i as usize].mul(out[j as usize]),
                Op::Div(i, j) => out[i as usize].div(out[j as usize]),
                Op::Neg(i) => out[i as usize].neg(),
                Op::Tanh(i) => out[i as usize].tanh(),
                Op::Exp(i) => out[i as usize].exp(),
                Op::Ln(i) => out[i as usize].ln(),
                Op::Square(i) => out[i as usize].square(),
                Op::Dot { off, len } => {
                    let (off, len) = (off as usize, len as usize);
                    let mut acc = Dual::ZERO;
                    for m in 0..len {
                        let x = out[self.args[off + m] as usize];
                        let y = out[self.args[off + len + m] as usize];
                        acc = acc.add(x.mul(y));
                    }
                    acc
                }
                Op::Sum { off, len } => {
                    let (off, len) = (off as usize, len as usize);
                    let mut acc = Dual::ZERO;
                    for m in 0..len {
                        acc = acc.add(out[self.args[off + m] as usize]);
                    }
                    acc
                }
                Op::TangentOf(i) => Dual::constant(out[i as usize].dv),
            };
            out.push(d);
        }
        out
    }
}

/// Arithmetic context abstracting over plain values, duals, and tape nodes.
///
/// Model evaluations are written once against this trait and run in three
/// modes: fast plain `f64` (validation), duals (residual values without a
/// tape), and tape recording (training).
pub trait Arith {
    type V: Copy;

    fn constant(&mut self, c: f64) -> Self::V;
    fn param(&mut self, idx: usize) -> Self::V;
    fn input(&mut self, value: f64, seeded: bool) -> Self::V;
    fn add(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn sub(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn mul(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn div(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn neg(&mut self, a: Self::V) -> Self::V;
    fn tanh(&mut self, a: Self::V) -> Self::V;
    fn exp(&mut self, a: Self::V) -> Self::V;
    fn ln(&mut self, a: Self::V) -> Self::V;
    fn square(&mut self, a: Self::V) -> Self::V;
    fn dot(&mut self, xs: &[Self::V], ys: &[Self::V]) -> Self::V;
    fn sum(&mut self, xs: &[Self::V]) -> Self::V;
    /// Extract the input derivative accumulated so far.
    fn tangent_of(&mut self, a: Self::V) -> Self::V;
    fn value(&self, a: Self::V) -> f64;
}

/// Plain `f64` evaluation over a fixed parameter vector. Panics on
/// `tangent_of`: use [`DualCtx`] or [`TapeCtx`] when a derivative is needed.
pub struct PlainCtx<'a> {
    pub params: &'a [f64],
}

impl<'a> PlainCtx<'a> {
    pub fn new(params: &'a [f64]) -> Self {
        PlainCtx { params }
    }
}

impl Arith for PlainCtx<'_> {
    type V = f64;

    #[inline]
    fn constant(&mut self, c: f64) -> f64 {
        c
    }
    #[inline]
    fn param(&mut self, idx: usize) -> f64 {
        self.params[idx]
    }
    #[inline]
    fn input(&mut self, value: f64, _seeded: bool) -> f64 {
        value
    }
    #[inline]
    fn add(&mut self, a: f64, b: f64) -> f64 {
        a + b
    }
    #[inline]
    fn sub(&mut self, a: f64, b: f64) -> f64 {
        a - b
    }
    #[inline]
    fn mul(&mut self, a: f64, b: f64) -> f64 {
        a * b
    }
    #[inline]
    fn div(&mut self, a: f64, b: f64) -> f64 {
        a / b
    }
    #[inline]
    fn neg(&mut self, a: f64) -> f64 {
        -a
    }
    #[inline]
    fn tanh(&mut self, a: f64) -> f64 {
        a.tanh()
    }
    #[inline]
    fn exp(&mut self, a: f64) -> f64 {
        a.exp()
    }
    #[inline]
    fn ln(&mut self, a: f64) -> f64 {
        a.ln()
    }
    #[inline]
    fn square(&mut self, a: f64) -> f64 {
        a * a
    }
    fn dot(&mut self, xs: &[f64], ys: &[f64]) -> f64 {
        xs.iter().zip(ys).map(|(x, y)| x * y).sum()
    }
    fn sum(&mut self, xs: &[f64]) -> f64 {
        xs.iter().sum()
    }
    fn tangent_of(&mut self, _a: f64) -> f64 {
        panic!("input derivative requested in a plain evaluation context");
    }
    #[inline]
    fn value(&self, a: f64) -> f64 {
        a
    }
}

/// Dual-number evaluation: values plus one input derivative, no tape.
pub struct DualCtx<'a> {
    pub params: &'a [f64],
}

impl<'a> DualCtx<'a> {
    pub fn new(params: &'a [f64]) -> Self {
        DualCtx { params }
    }
}

impl Arith for DualCtx<'_> {
    type V = Dual;

    #[inline]
    fn constant(&mut self, c: f64) -> Dual {
        Dual::constant(c)
    }
    #[inline]
    fn param(&mut self, idx: usize) -> Dual {
        Dual::constant(self.params[idx])
    }
    #[inline]
    fn input(&mut self, value: f64, seeded: bool) -> Dual {
        if seeded {
            Dual::seeded(value)
        } else {
            Dual::constant(value)
        }
    }
    #[inline]
    fn add(&mut self, a: Dual, b: Dual) -> Dual {
        a.add(b)
    }
    #[inline]
    fn sub(&mut self, a: Dual, b: Dual) -> Dual {
        a.sub(b)
    }
    #[inline]
    fn mul(&mut self, a: Dual, b: Dual) -> Dual {
        a.mul(b)
    }
    #[inline]
    fn div(&mut self, a: Dual, b: Dual) -> Dual {
        a.div(b)
    }
    #[inline]
    fn neg(&mut self, a: Dual) -> Dual {
        a.neg()
    }
    #[inline]
    fn tanh(&mut self, a: Dual) -> Dual {
        a.tanh()
    }
    #[inline]
    fn exp(&mut self, a: Dual) -> Dual {
        a.exp()
    }
    #[inline]
    fn ln(&mut self, a: Dual) -> Dual {
        a.ln()
    }
    #[inline]
    fn square(&mut self, a: Dual) -> Dual {
        a.square()
    }
    fn dot(&mut self, xs: &[Dual], ys: &[Dual]) -> Dual {
        let mut acc = Dual::ZERO;
        for (x, y) in xs.iter().zip(ys) {
            acc = acc.add(x.mul(*y));
        }
        acc
    }
    fn sum(&mut self, xs: &[Dual]) -> Dual {
        let mut acc = Dual::ZERO;
        for x in xs {
            acc = acc.add(*x);
        }
        acc
    }
    fn tangent_of(&mut self, a: Dual) -> Dual {
        Dual::constant(a.dv)
    }
    #[inline]
    fn value(&self, a: Dual) -> f64 {
        a.v
    }
}

/// Tape-recording context.
pub struct TapeCtx<'a> {
    pub tape: &'a mut Tape,
}

impl<'a> TapeCtx<'a> {
    pub fn new(tape: &'a mut Tape) -> Self {
        TapeCtx { tape }
    }
}

impl Arith for TapeCtx<'_> {
    type V = NodeId;

    fn constant(&mut self, c: f64) -> NodeId {
        self.tape.constant(c)
    }
    fn param(&mut self, idx: usize) -> NodeId {
        self.tape.param(idx)
    }
    fn input(&mut self, value: f64, seeded: bool) -> NodeId {
        self.tape.input(value, seeded)
    }
    fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.tape.add(a, b)
    }
    fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.tape.sub(a, b)
    }
    fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.tape.mul(a, b)
    }
    fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.tape.div(a, b)
    }
    fn neg(&mut self, a: NodeId) -> NodeId {
        self.tape.neg(a)
    }
    fn tanh(&mut self, a: NodeId) -> NodeId {
        self.tape.tanh(a)
    }
    fn exp(&mut self, a: NodeId) -> NodeId {
        self.tape.exp(a)
    }
    fn ln(&mut self, a: NodeId) -> NodeId {
        self.tape.ln(a)
    }
    fn square(&mut self, a: NodeId) -> NodeId {
        self.tape.square(a)
    }
    fn dot(&mut self, xs: &[NodeId], ys: &[NodeId]) -> NodeId {
        self.tape.dot(xs, ys)
    }
    fn sum(&mut self, xs: &[NodeId]) -> NodeId {
        self.tape.sum(xs)
    }
    fn tangent_of(&mut self, a: NodeId) -> NodeId {
        self.tape
            .tangent_of(a)
            .expect("nested input-derivative extraction is not supported")
    }
    fn value(&self, a: NodeId) -> f64 {
        self.tape.value(a)
    }
}

/// Maximum relative error between an analytic gradient and central finite
/// differences of the loss.
///
/// `f` maps a parameter vector to `(loss, gradient)`; only the loss value is
/// used at the shifted points. Components where both gradients vanish
/// (below 1e-12 in magnitude) count as exact.
pub fn check_gradient<F>(mut f: F, params: &[f64], step: f64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let (_, grad) = f(params);
    assert_eq!(grad.len(), params.len(), "gradient length mismatch");
    let mut theta = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let keep = theta[i];
        theta[i] = keep + step;
        let (lp, _) = f(&theta);
        theta[i] = keep - step;
        let (lm, _) = f(&theta);
        theta[i] = keep;
        let fd = (lp - lm) / (2.0 * step);
        let g = grad[i];
        let scale = g.abs().max(fd.abs());
        let err = if scale < 1e-12 { 0.0 } else { (g - fd).abs() / scale };
        if err > worst {
            worst = err;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_square_is_two_theta() {
        // loss = theta^2 at theta = 3 -> d/dtheta = 6
        let mut tape = Tape::new(&[3.0]);
        let p = tape.param(0);
        let loss = tape.square(p);
        let g = tape.grad_params(loss).unwrap();
        assert_eq!(g, vec![6.0]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut tape = Tape::new(&[2.0, 5.0]);
        let p = tape.param(0);
        let loss = tape.square(p);
        let g = tape.grad_params(loss).unwrap();
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn non_node_loss_is_rejected() {
        let tape = Tape::new(&[1.0]);
        assert!(matches!(
            tape.grad_params(NodeId(17)),
            Err(Error::NodeOutOfRange { .. })
        ));
    }

    #[test]
    fn tangent_tracks_seeded_input() {
        // f(x) = tanh(w x), w = 2, x = 0: df/dx = 2.
        let mut tape = Tape::new(&[2.0]);
        let w = tape.param(0);
        let x = tape.input(0.0, true);
        let wx = tape.mul(w, x);
        let y = tape.tanh(wx);
        assert_eq!(tape.tangent(y), 2.0);
    }

    #[test]
    fn nested_extraction_is_rejected() {
        let mut tape = Tape::new(&[2.0]);
        let w = tape.param(0);
        let x = tape.input(0.3, true);
        let wx = tape.mul(w, x);
        let d = tape.tangent_of(wx).unwrap();
        assert!(tape.tangent_of(d).is_err());
        let d2 = tape.square(d);
        assert!(tape.tangent_of(d2).is_err());
    }

    #[test]
    fn grad_through_extracted_tangent() {
        // u = tanh(w x); loss = (du/dx)^2 = (w sech^2(wx))^2.
        // dloss/dw at w=0.7, x=0.4 checked against central differences.
        let w0 = 0.7;
        let x0 = 0.4;
        let eval = |w: f64| {
            let mut tape = Tape::new(&[w]);
            let wp = tape.param(0);
            let x = tape.input(x0, true);
            let wx = tape.mul(wp, x);
            let u = tape.tanh(wx);
            let du = tape.tangent_of(u).unwrap();
            let loss = tape.square(du);
            let g = tape.grad_params(loss).unwrap();
            (tape.value(loss), g)
        };
        let err = check_gradient(|p| eval(p[0]), &[w0], 1e-6);
        assert!(err < 1e-7, "nesting gradient error {err}");
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut tape = Tape::new(&[0.3, -1.2, 2.5]);
        let p0 = tape.param(0);
        let p1 = tape.param(1);
        let p2 = tape.param(2);
        let x = tape.input(0.8, true);
        let a = tape.mul(p0, x);
        let b = tape.tanh(a);
        let c = tape.div(b, p2);
        let d = tape.exp(c);
        let e = tape.dot(&[a, b], &[c, d]);
        let f = tape.sub(e, p1);
        let g = tape.square(f);
        let h = tape.tangent_of(b).unwrap();
        let i = tape.mul(g, h);
        let lnarg = tape.exp(i);
        let j = tape.ln(lnarg);
        let _ = tape.sum(&[g, h, i, j]);
        let replayed = tape.replay();
        assert_eq!(replayed.len(), tape.len());
        for (k, r) in replayed.iter().enumerate() {
            assert_eq!(r.v.to_bits(), tape.duals[k].v.to_bits(), "primal {k}");
            assert_eq!(r.dv.to_bits(), tape.duals[k].dv.to_bits(), "tangent {k}");
        }
    }

    #[test]
    fn check_gradient_on_quadratic_and_constant() {
        // Quadratic: loss = sum theta_i^2, analytic grad exact.
        let quad = |p: &[f64]| {
            let loss = p.iter().map(|t| t * t).sum::<f64>();
            let grad = p.iter().map(|t| 2.0 * t).collect();
            (loss, grad)
        };
        let err = check_gradient(quad, &[0.5, -1.5, 2.0], 1e-5);
        assert!(err < 1e-9, "quadratic error {err}");

        // Constant: both gradients vanish, error defined as 0.
        let cst = |p: &[f64]| (42.0, vec![0.0; p.len()]);
        assert_eq!(check_gradient(cst, &[1.0, 2.0], 1e-5), 0.0);
    }

    #[test]
    fn gradient_is_linear_in_the_loss() {
        // grad(a L1 + b L2) = a grad(L1) + b grad(L2), componentwise to 1e-12.
        let params = [0.4, -0.9, 1.7];
        let build = |tape: &mut Tape| -> (NodeId, NodeId) {
            let p0 = tape.param(0);
            let p1 = tape.param(1);
            let p2 = tape.param(2);
            let x = tape.input(0.6, true);
            let t = tape.mul(p0, x);
            let u = tape.tanh(t);
            let l1 = tape.mul(u, p1);
            let e = tape.exp(p2);
            let l2 = tape.mul(e, u);
            (l1, l2)
        };
        let (a, b) = (1.3, -0.7);

        let mut tape = Tape::new(&params);
        let (l1, l2) = build(&mut tape);
        let g1 = tape.grad_params(l1).unwrap();
        let g2 = tape.grad_params(l2).unwrap();
        let ca = tape.constant(a);
        let cb = tape.constant(b);
        let al1 = tape.mul(ca, l1);
        let bl2 = tape.mul(cb, l2);
        let combo = tape.add(al1, bl2);
        let gc = tape.grad_params(combo).unwrap();
        for i in 0..params.len() {
            let expect = a * g1[i] + b * g2[i];
            assert!((gc[i] - expect).abs() < 1e-12, "component {i}");
        }
    }

    #[test]
    fn identical_tapes_give_bit_identical_gradients() {
        let run = || {
            let mut tape = Tape::new(&[0.2, 0.4, -0.6, 1.1]);
            let p: Vec<NodeId> = (0..4).map(|i| tape.param(i)).collect();
            let x = tape.input(0.35, true);
            let h = tape.dot(&[p[0], p[1]], &[x, x]);
            let t = tape.tanh(h);
            let u = tape.mul(t, p[2]);
            let du = tape.tangent_of(u).unwrap();
            let r = tape.sub(du, p[3]);
            let loss = tape.square(r);
            tape.grad_params(loss).unwrap()
        };
        let g1 = run();
        let g2 = run();
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
