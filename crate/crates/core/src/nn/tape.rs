//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! Every operation appends a node holding its forward value and the indices of
//! its inputs, so the node vector is already in topological order and the
//! backward sweep is a single reverse pass. Local partials are evaluated
//! numerically during that sweep; to differentiate through a gradient (the R1
//! penalty does), the inner gradient is itself built from taped operations,
//! see [`crate::nn::mlp::Binding::input_gradient`].

use std::rc::Rc;

use super::matrix::{gemm, Matrix};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    /// `a + 1·b` with `b` a single row.
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Rc<[f64]>),
    Silu(Var),
    SiluPrime(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[inline]
fn silu_second(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Constants and trainable parameters both enter as leaves.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(Op::MatMulT(a, b), v)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a).add_row(self.value(row));
        self.push(Op::AddRow(a, row), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn scale_rows(&mut self, a: Var, factors: &[f64]) -> Var {
        let v = self.value(a).scale_rows(factors);
        self.push(Op::ScaleRows(a, factors.into()), v)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(silu);
        self.push(Op::Silu(a), v)
    }

    pub fn silu_prime(&mut self, a: Var) -> Var {
        let v = self.value(a).map(silu_prime);
        self.push(Op::SiluPrime(a), v)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).hcat(self.value(b));
        self.push(Op::ConcatCols(a, b), v)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice_cols(start, end);
        self.push(Op::SliceCols(a, start), v)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice_rows(start, end);
        self.push(Op::SliceRows(a, start), v)
    }

    /// Mean over every element, as a `1 × 1` node.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = Matrix::filled(1, 1, self.value(a).mean());
        self.push(Op::Mean(a), v)
    }

    /// `mean((a - b)²)` over every element.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    /// Reverse sweep from `output`, seeded with `cotangent` (same shape as the
    /// output). A tape can be swept once; a second call is an error.
    pub fn backward(&mut self, output: Var, cotangent: Matrix) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Contract("tape already consumed by a backward pass".into()));
        }
        self.value(output).ensure_same_shape(&cotangent, "backward cotangent")?;
        self.consumed = true;

        let mut grads: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(cotangent);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => grads[idx] = Some(g),
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.t_matmul(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *row, g.sum_rows());
                    accumulate(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.scale(*c)),
                Op::ScaleRows(a, f) => accumulate(&mut grads, *a, g.scale_rows(f)),
                Op::Silu(a) => {
                    let ga = g.zip_map(self.value(*a), |gi, x| gi * silu_prime(x));
                    accumulate(&mut grads, *a, ga);
                }
                Op::SiluPrime(a) => {
                    let ga = g.zip_map(self.value(*a), |gi, x| gi * silu_second(x));
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    accumulate(&mut grads, *a, g.slice_cols(0, ca));
                    accumulate(&mut grads, *b, g.slice_cols(ca, g.cols()));
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for i in 0..g.rows() {
                        ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for i in 0..g.rows() {
                        ga.row_mut(start + i).copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let src = self.value(*a);
                    let n = (src.rows() * src.cols()).max(1) as f64;
                    let ga = Matrix::filled(src.rows(), src.cols(), g.get(0, 0) / n);
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of the swept output with respect to the tape's leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient at a leaf; `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub(crate) fn add_into(&self, v: Var, out: &mut [f64]) {
        if let Some(g) = self.get(v) {
            debug_assert_eq!(g.data().len(), out.len());
            for (o, x) in out.iter_mut().zip(g.data()) {
                *o += x;
            }
        }
    }
}

/// `c = a·b` written into a preallocated buffer; used by the tape-free path so
/// both paths share the same kernel.
pub(crate) fn matmul_into(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    gemm(a, false, b, false, out, 0.0);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_chain_rule() {
        // loss = ½ (w·x)², dL/dw = w·x²
        let (w0, x0) = (1.7, -0.6);
        let mut tape = Tape::new();
        let w = tape.leaf(Matrix::filled(1, 1, w0));
        let x = tape.leaf(Matrix::filled(1, 1, x0));
        let y = tape.matmul(x, w);
        let sq = tape.mul(y, y);
        let loss = tape.scale(sq, 0.5);
        let g = tape.backward(loss, Matrix::filled(1, 1, 1.0)).unwrap();
        assert!((g.get(w).unwrap().get(0, 0) - w0 * x0 * x0).abs() < 1e-15);
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Matrix::filled(2, 2, 0.3));
        let c = tape.leaf(Matrix::filled(1, 1, 4.0));
        let out = tape.scale(c, 2.0);
        let g = tape.backward(out, Matrix::filled(1, 1, 1.0)).unwrap();
        assert!(g.get(w).is_none());
    }

    #[test]
    fn consumed_tape_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::filled(1, 1, 1.0));
        let m = tape.mean(a);
        tape.backward(m, Matrix::filled(1, 1, 1.0)).unwrap();
        assert!(matches!(tape.backward(m, Matrix::filled(1, 1, 1.0)), Err(Error::Contract(_))));
    }

    #[test]
    fn silu_derivatives_match_differences() {
        let h = 1e-5;
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let d1 = (silu(x + h) - silu(x - h)) / (2.0 * h);
            let d2 = (silu_prime(x + h) - silu_prime(x - h)) / (2.0 * h);
            assert!((d1 - silu_prime(x)).abs() < 1e-9);
            assert!((d2 - silu_second(x)).abs() < 1e-9);
        }
    }

    #[test]
    fn slices_and_concat_route_gradients() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::from_fn(3, 2, |i, j| (i + j) as f64));
        let b = tape.leaf(Matrix::from_fn(3, 1, |i, _| i as f64));
        let c = tape.concat_cols(a, b);
        let s = tape.slice_cols(c, 1, 3);
        let r = tape.slice_rows(s, 1, 2);
        let m = tape.mean(r);
        let g = tape.backward(m, Matrix::filled(1, 1, 1.0)).unwrap();
        let ga = g.get(a).unwrap();
        let gb = g.get(b).unwrap();
        assert_eq!(ga.data(), &[0.0, 0.0, 0.0, 0.5, 0.0, 0.0]);
        assert_eq!(gb.data(), &[0.0, 0.5, 0.0]);
    }
}
