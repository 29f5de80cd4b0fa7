//! Thread-local scalar reverse-mode tape.
//!
//! A [`Var`] is either a constant (no tape node) or a handle to a node on the
//! current thread's tape. [`reset`] starts a fresh graph; handles from an
//! earlier graph are rejected by [`gradients`].

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};
use crate::num::{sym_eigen, Mat, Real};

const CONST: u32 = u32::MAX;

#[derive(Default)]
struct Tape {
    generation: u32,
    /// End offset into `edges` for each node; node k owns
    /// `edges[ends[k-1]..ends[k]]`.
    ends: Vec<u32>,
    edges: Vec<(u32, f64)>,
}

thread_local! {
    static TAPE: RefCell<Tape> = RefCell::new(Tape::default());
}

#[derive(Clone, Copy)]
pub struct Var {
    idx: u32,
    generation: u32,
    val: f64,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.idx == CONST {
            write!(f, "Var(const {})", self.val)
        } else {
            write!(f, "Var(#{} {})", self.idx, self.val)
        }
    }
}

/// Clears the current thread's tape. Existing `Var`s become stale.
pub fn reset() {
    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        t.generation = t.generation.wrapping_add(1);
        t.ends.clear();
        t.edges.clear();
    });
}

/// Number of nodes on the current tape.
pub fn len() -> usize {
    TAPE.with(|t| t.borrow().ends.len())
}

fn push(val: f64, parents: &[(Var, f64)]) -> Var {
    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        let generation = t.generation;
        let mut any = false;
        for &(p, d) in parents {
            if p.idx != CONST {
                debug_assert_eq!(p.generation, generation, "stale Var used after tape reset");
                t.edges.push((p.idx, d));
                any = true;
            }
        }
        if !any {
            return Var::constant(val);
        }
        let idx = t.ends.len() as u32;
        let end = t.edges.len() as u32;
        t.ends.push(end);
        Var { idx, generation, val }
    })
}

impl Var {
    pub fn constant(val: f64) -> Self {
        Var {
            idx: CONST,
            generation: 0,
            val,
        }
    }

    /// A new independent variable on the current tape.
    pub fn leaf(val: f64) -> Self {
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            let idx = t.ends.len() as u32;
            let end = t.edges.len() as u32;
            t.ends.push(end);
            Var {
                idx,
                generation: t.generation,
                val,
            }
        })
    }

    pub fn is_constant(&self) -> bool {
        self.idx == CONST
    }

    pub fn value(&self) -> f64 {
        self.val
    }

    fn unary(self, val: f64, d: f64) -> Var {
        if self.idx == CONST {
            return Var::constant(val);
        }
        push(val, &[(self, d)])
    }

    /// `b + Σ w_k x_k` as a single tape node.
    pub fn affine(b: Var, w: &[Var], x: &[Var]) -> Var {
        let mut val = b.val;
        let mut parents = Vec::with_capacity(2 * w.len() + 1);
        parents.push((b, 1.0));
        for (&wk, &xk) in w.iter().zip(x) {
            val += wk.val * xk.val;
            parents.push((wk, xk.val));
            parents.push((xk, wk.val));
        }
        push(val, &parents)
    }
}

pub fn leaves(vals: &[f64]) -> Vec<Var> {
    vals.iter().map(|&v| Var::leaf(v)).collect()
}

/// Adjoints of every node with respect to one scalar output.
pub struct Gradients {
    generation: u32,
    adjoint: Vec<f64>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> f64 {
        if v.idx == CONST {
            return 0.0;
        }
        assert_eq!(v.generation, self.generation, "Var from a different tape");
        self.adjoint[v.idx as usize]
    }

    pub fn wrt_slice(&self, vs: &[Var]) -> Vec<f64> {
        vs.iter().map(|&v| self.wrt(v)).collect()
    }
}

/// Reverse sweep from `out`.
pub fn gradients(out: Var) -> Result<Gradients> {
    TAPE.with(|t| {
        let t = t.borrow();
        let mut adjoint = vec![0.0; t.ends.len()];
        if out.idx == CONST {
            return Ok(Gradients {
                generation: t.generation,
                adjoint,
            });
        }
        if out.generation != t.generation {
            return Err(Error::Autodiff("output Var belongs to a stale tape".into()));
        }
        adjoint[out.idx as usize] = 1.0;
        for k in (0..=out.idx as usize).rev() {
            let a = adjoint[k];
            if a == 0.0 {
                continue;
            }
            let start = if k == 0 { 0 } else { t.ends[k - 1] as usize };
            for &(p, d) in &t.edges[start..t.ends[k] as usize] {
                adjoint[p as usize] += a * d;
            }
        }
        Ok(Gradients {
            generation: t.generation,
            adjoint,
        })
    })
}

impl Add for Var {
    type Output = Var;
    fn add(self, o: Var) -> Var {
        push(self.val + o.val, &[(self, 1.0), (o, 1.0)])
    }
}

impl Sub for Var {
    type Output = Var;
    fn sub(self, o: Var) -> Var {
        push(self.val - o.val, &[(self, 1.0), (o, -1.0)])
    }
}

impl Mul for Var {
    type Output = Var;
    fn mul(self, o: Var) -> Var {
        push(self.val * o.val, &[(self, o.val), (o, self.val)])
    }
}

impl Div for Var {
    type Output = Var;
    fn div(self, o: Var) -> Var {
        let q = self.val / o.val;
        push(q, &[(self, 1.0 / o.val), (o, -q / o.val)])
    }
}

impl Neg for Var {
    type Output = Var;
    fn neg(self) -> Var {
        self.unary(-self.val, -1.0)
    }
}

impl AddAssign for Var {
    fn add_assign(&mut self, o: Var) {
        *self = *self + o;
    }
}

impl SubAssign for Var {
    fn sub_assign(&mut self, o: Var) {
        *self = *self - o;
    }
}

impl MulAssign for Var {
    fn mul_assign(&mut self, o: Var) {
        *self = *self * o;
    }
}

/// Eigenvalue node: `∂λ/∂a_ij = v_i v_j` for the unit eigenvector `v`.
fn eig_node(a: &Mat<Var>, top: bool) -> Var {
    let n = a.rows();
    let vals = a.values();
    let exact = sym_eigen(&vals);
    let lam = if top { exact.max_value() } else { exact.min_value() };
    // Exact ties make the eigenvector ambiguous; a tiny deterministic diagonal
    // jitter picks one.
    let mut jittered = vals.clone();
    let scale = vals.max_abs().max(1.0);
    for i in 0..n {
        jittered[(i, i)] += 1e-12 * scale * i as f64;
    }
    let e = sym_eigen(&jittered);
    let v = if top { e.max_vector() } else { e.min_vector() };
    let mut parents = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            parents.push((a[(i, j)], v[i] * v[j]));
        }
    }
    push(lam, &parents)
}

impl Real for Var {
    #[inline]
    fn cst(v: f64) -> Self {
        Var::constant(v)
    }
    #[inline]
    fn val(self) -> f64 {
        self.val
    }
    fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.unary(t, 1.0 - t * t)
    }
    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }
    fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }
    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.unary(s, 0.5 / s)
    }
    fn abs(self) -> Self {
        let d = if self.val >= 0.0 { 1.0 } else { -1.0 };
        self.unary(self.val.abs(), d)
    }
    fn softplus(self) -> Self {
        self.unary(
            crate::num::real::softplus(self.val),
            crate::num::real::sigmoid(self.val),
        )
    }
    fn max_eig(a: &Mat<Self>) -> Self {
        eig_node(a, true)
    }
    fn min_eig(a: &Mat<Self>) -> Self {
        eig_node(a, false)
    }
    fn affine(b: Self, w: &[Self], x: &[Self]) -> Self {
        Var::affine(b, w, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squared_norm_gradient() {
        reset();
        let w = leaves(&[1.0, -2.0, 0.5]);
        let mut loss = Var::constant(0.0);
        for &wi in &w {
            loss += wi * wi;
        }
        let g = gradients(loss).unwrap();
        assert_eq!(g.wrt_slice(&w), vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn constants_add_no_nodes() {
        reset();
        let a = Var::constant(2.0);
        let b = a * a + a.tanh();
        assert!(b.is_constant());
        assert_eq!(len(), 0);
    }

    #[test]
    fn elementary_derivatives() {
        type Case = (fn(Var) -> Var, fn(f64) -> f64);
        let cases: Vec<Case> = vec![
            (|x| x.tanh(), |x| x.tanh()),
            (|x| x.exp(), |x| x.exp()),
            (|x| x.ln(), |x| x.ln()),
            (|x| x.sqrt(), |x| x.sqrt()),
            (|x| x.softplus(), crate::num::real::softplus),
            (|x| Var::constant(1.0) / x, |x| 1.0 / x),
            (|x| x.powi(3), |x| x.powi(3)),
        ];
        for (fv, ff) in cases {
            for &x0 in &[0.3, 1.7] {
                reset();
                let x = Var::leaf(x0);
                let g = gradients(fv(x)).unwrap().wrt(x);
                let h = 1e-6;
                let fd = (ff(x0 + h) - ff(x0 - h)) / (2.0 * h);
                assert!((g - fd).abs() < 1e-7 * fd.abs().max(1.0), "{g} vs {fd}");
            }
        }
    }

    #[test]
    fn affine_node() {
        reset();
        let w = leaves(&[1.0, 2.0]);
        let x = leaves(&[3.0, -1.0]);
        let b = Var::leaf(0.5);
        let y = Var::affine(b, &w, &x);
        assert_eq!(y.value(), 0.5 + 3.0 - 2.0);
        let g = gradients(y).unwrap();
        assert_eq!(g.wrt_slice(&w), vec![3.0, -1.0]);
        assert_eq!(g.wrt_slice(&x), vec![1.0, 2.0]);
        assert_eq!(g.wrt(b), 1.0);
    }

    #[test]
    fn stale_output_rejected() {
        reset();
        let x = Var::leaf(1.0);
        let y = x * x;
        reset();
        assert!(gradients(y).is_err());
    }
}
