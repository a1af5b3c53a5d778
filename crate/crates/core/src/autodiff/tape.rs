//! Batched reverse-mode tape.
//!
//! Values are row-major matrices whose rows are batch elements. Trainable
//! weights live in one flat parameter slice borrowed by the tape; `backward`
//! returns the gradient of a scalar output with respect to that slice.

use super::Activation;

/// Row-major batch of vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape does not match data length");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_row(row: &[f64]) -> Self {
        Self::new(1, row.len(), row.to_vec())
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(1, 1, vec![v])
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `x Wᵀ + b` with `W` (out × in, row-major) then `b` at `offset`.
    Linear {
        input: Var,
        offset: usize,
        in_dim: usize,
        out_dim: usize,
    },
    Act(Var, Activation),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Square(Var),
    SelectCols(Var, Vec<usize>),
    /// Scatters each part's columns into the listed output columns.
    MergeCols(Vec<(Var, Vec<usize>)>),
    SumCols(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p [f64],
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [f64]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p [f64] {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient flows past it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn linear(&mut self, input: Var, offset: usize, in_dim: usize, out_dim: usize) -> Var {
        let x = self.value(input);
        assert_eq!(x.cols, in_dim, "linear layer input width");
        let value = linear_forward(self.params, offset, in_dim, out_dim, x);
        self.push(
            value,
            Op::Linear {
                input,
                offset,
                in_dim,
                out_dim,
            },
        )
    }

    pub fn activation(&mut self, input: Var, act: Activation) -> Var {
        let mut value = self.value(input).clone();
        for v in &mut value.data {
            *v = act.apply(*v);
        }
        self.push(value, Op::Act(input, act))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.map(a, |x| c * x);
        self.push(value, Op::Scale(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.map(a, f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.map(a, |x| x * x);
        self.push(value, Op::Square(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Tanh)
    }

    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Var {
        let x = self.value(a);
        let mut value = Tensor::zeros(x.rows, cols.len());
        for r in 0..x.rows {
            for (j, &c) in cols.iter().enumerate() {
                value.data[r * cols.len() + j] = x.at(r, c);
            }
        }
        self.push(value, Op::SelectCols(a, cols.to_vec()))
    }

    /// Interleaves parts into a `total_cols`-wide tensor; every output
    /// column must be covered exactly once.
    pub fn merge_cols(&mut self, parts: &[(Var, &[usize])], total_cols: usize) -> Var {
        let rows = self.value(parts[0].0).rows;
        let mut value = Tensor::zeros(rows, total_cols);
        let mut covered = vec![false; total_cols];
        for (v, cols) in parts {
            let x = self.value(*v);
            assert_eq!(x.rows, rows, "merge_cols row mismatch");
            assert_eq!(x.cols, cols.len(), "merge_cols column list length");
            for (j, &c) in cols.iter().enumerate() {
                assert!(!covered[c], "column {c} covered twice");
                covered[c] = true;
                for r in 0..rows {
                    value.data[r * total_cols + c] = x.at(r, j);
                }
            }
        }
        assert!(covered.iter().all(|&c| c), "merge_cols leaves a gap");
        let parts = parts.iter().map(|(v, c)| (*v, c.to_vec())).collect();
        self.push(value, Op::MergeCols(parts))
    }

    /// Per-row sum, giving a `rows × 1` tensor.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = Tensor::zeros(x.rows, 1);
        for r in 0..x.rows {
            value.data[r] = x.row(r).iter().sum();
        }
        self.push(value, Op::SumCols(a))
    }

    /// Mean over every entry, giving a `1 × 1` tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = x.data.iter().sum::<f64>() / x.data.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        Tensor::new(x.rows, x.cols, x.data.iter().map(|&v| f(v)).collect())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let x = self.value(a);
        let y = self.value(b);
        assert!(x.same_shape(y), "elementwise op on mismatched shapes");
        Tensor::new(
            x.rows,
            x.cols,
            x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect(),
        )
    }

    /// Reverse sweep from a `1 × 1` output. Returns `d out / d params`.
    pub fn backward(&self, out: Var) -> Vec<f64> {
        let root = self.value(out);
        assert_eq!(root.data.len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Tensor::scalar(1.0));
        let mut param_grad = vec![0.0; self.params.len()];

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Linear {
                    input,
                    offset,
                    in_dim,
                    out_dim,
                } => {
                    let x = self.value(*input);
                    let w = &self.params[*offset..*offset + in_dim * out_dim];
                    let (gw, gb) =
                        param_grad[*offset..*offset + in_dim * out_dim + out_dim].split_at_mut(in_dim * out_dim);
                    let mut gx = Tensor::zeros(x.rows, *in_dim);
                    for r in 0..x.rows {
                        let xr = x.row(r);
                        let gr = g.row(r);
                        let gxr = gx.row_mut(r);
                        for o in 0..*out_dim {
                            let go = gr[o];
                            if go == 0.0 {
                                continue;
                            }
                            gb[o] += go;
                            let wrow = &w[o * in_dim..(o + 1) * in_dim];
                            let gwrow = &mut gw[o * in_dim..(o + 1) * in_dim];
                            for i in 0..*in_dim {
                                gwrow[i] += go * xr[i];
                                gxr[i] += go * wrow[i];
                            }
                        }
                    }
                    accumulate(&mut grads, *input, gx);
                }
                Op::Act(a, act) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut gx = g;
                    for ((gv, &xv), &yv) in gx.data.iter_mut().zip(&x.data).zip(&y.data) {
                        *gv *= act.derivative(xv, yv);
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    let mut neg = g.clone();
                    neg.data.iter_mut().for_each(|v| *v = -*v);
                    accumulate(&mut grads, *b, neg);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let xa = self.value(*a);
                    let xb = self.value(*b);
                    let mut ga = g.clone();
                    let mut gb = g;
                    ga.data.iter_mut().zip(&xb.data).for_each(|(v, &w)| *v *= w);
                    gb.data.iter_mut().zip(&xa.data).for_each(|(v, &w)| *v *= w);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => {
                    let mut ga = g;
                    ga.data.iter_mut().for_each(|v| *v *= c);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let mut ga = g;
                    ga.data.iter_mut().zip(&node.value.data).for_each(|(v, &y)| *v *= y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    ga.data.iter_mut().zip(&x.data).for_each(|(v, &xv)| *v *= 2.0 * xv);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SelectCols(a, cols) => {
                    let x = self.value(*a);
                    let mut ga = Tensor::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        for (j, &c) in cols.iter().enumerate() {
                            ga.data[r * x.cols + c] += g.at(r, j);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::MergeCols(parts) => {
                    for (v, cols) in parts {
                        let mut gv = Tensor::zeros(g.rows, cols.len());
                        for r in 0..g.rows {
                            for (j, &c) in cols.iter().enumerate() {
                                gv.data[r * cols.len() + j] = g.at(r, c);
                            }
                        }
                        accumulate(&mut grads, *v, gv);
                    }
                }
                Op::SumCols(a) => {
                    let x = self.value(*a);
                    let mut ga = Tensor::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        let gr = g.data[r];
                        ga.row_mut(r).iter_mut().for_each(|v| *v = gr);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    let share = g.data[0] / x.data.len() as f64;
                    accumulate(&mut grads, *a, Tensor::new(x.rows, x.cols, vec![share; x.data.len()]));
                }
            }
        }
        param_grad
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            existing.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b);
        }
        slot @ None => *slot = Some(g),
    }
}

/// `x Wᵀ + b` without recording anything.
pub(crate) fn linear_forward(params: &[f64], offset: usize, in_dim: usize, out_dim: usize, x: &Tensor) -> Tensor {
    let w = &params[offset..offset + in_dim * out_dim];
    let b = &params[offset + in_dim * out_dim..offset + in_dim * out_dim + out_dim];
    let mut out = Tensor::zeros(x.rows, out_dim);
    for r in 0..x.rows {
        let xr = x.row(r);
        let yr = out.row_mut(r);
        for o in 0..out_dim {
            let wrow = &w[o * in_dim..(o + 1) * in_dim];
            let mut acc = b[o];
            for i in 0..in_dim {
                acc += wrow[i] * xr[i];
            }
            yr[o] = acc;
        }
    }
    out
}
