//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every operation of one forward pass; `backward` walks
//! it in reverse and returns adjoints for every node. Parameters enter as
//! borrowed leaves, so recording a pass never copies the weights.

use std::borrow::Cow;

use super::tensor::{gemm_acc, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    ScaleCols(Var, Vec<f64>),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Sin(Var),
    Cos(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Huber(Var, Vec<f64>),
    Sum(Var),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the node does not influence the differentiated output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that borrows its value (weights).
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that owns its value (inputs, targets).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(false, self.value(b), false);
        self.push(out, Op::MatMul(a, b))
    }

    /// Adds the `1 x c` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (x, b) = (self.value(a), self.value(bias));
        assert_eq!(b.shape(), [1, x.cols()], "bias shape");
        let mut out = x.clone();
        let c = x.cols();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            *v += b.data()[k % c];
        }
        self.push(out, Op::AddRow(a, bias))
    }

    /// `a * w + bias`.
    pub fn linear(&mut self, a: Var, w: Var, bias: Var) -> Var {
        let y = self.matmul(a, w);
        self.add_row(y, bias)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// `s * a + c`.
    pub fn affine(&mut self, a: Var, s: f64, c: f64) -> Var {
        let out = self.value(a).map(|x| s * x + c);
        self.push(out, Op::Affine(a, s))
    }

    /// Multiplies column `j` by the constant `w[j]`.
    pub fn scale_cols(&mut self, a: Var, w: &[f64]) -> Var {
        let x = self.value(a);
        assert_eq!(w.len(), x.cols(), "column weights");
        let mut out = x.clone();
        let c = x.cols();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            *v *= w[k % c];
        }
        self.push(out, Op::ScaleCols(a, w.to_vec()))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::sin);
        self.push(out, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::cos);
        self.push(out, Op::Cos(a))
    }

    /// Per-row normalization over columns, then `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let (g, b) = (self.value(gamma), self.value(beta));
        assert_eq!(g.shape(), [1, cols], "gamma shape");
        assert_eq!(b.shape(), [1, cols], "beta shape");
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, g.data()[c] * h + b.data()[c]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.data_mut()[r * cols + offset..r * cols + offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let v = self.value(a);
        assert!(start + width <= v.cols(), "column slice out of range");
        let mut out = Tensor::zeros(v.rows(), width);
        for r in 0..v.rows() {
            out.data_mut()[r * width..(r + 1) * width].copy_from_slice(&v.row(r)[start..start + width]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / cols.max(1);
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Var {
        let v = self.value(a);
        assert!(start + count <= v.rows(), "row slice out of range");
        let c = v.cols();
        let out = Tensor::from_vec(count, c, v.data()[start * c..(start + count) * c].to_vec());
        self.push(out, Op::SliceRows(a, start))
    }

    /// Elementwise Huber penalty with a per-column transition point.
    pub fn huber(&mut self, a: Var, delta: &[f64]) -> Var {
        let x = self.value(a);
        assert_eq!(delta.len(), x.cols(), "huber deltas");
        let c = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(k, &e)| huber(e, delta[k % c]))
            .collect();
        let out = Tensor::from_vec(x.rows(), c, data);
        self.push(out, Op::Huber(a, delta.to_vec()))
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::from_vec(1, 1, vec![s]), Op::Sum(a))
    }

    /// Adjoints of the scalar node `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Usage("backward called without a recorded forward pass".into()));
        }
        if self.value(root).shape() != [1, 1] {
            return Err(Error::Usage("backward from a non-scalar node needs an explicit seed".into()));
        }
        self.backward_from(&[(root, Tensor::filled(1, 1, 1.0))])
    }

    /// Adjoints given upstream gradients for any set of recorded nodes.
    pub fn backward_from(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward called without a recorded forward pass".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            if v.0 >= self.nodes.len() {
                return Err(Error::Usage("seed refers to a node that was never recorded".into()));
            }
            if g.shape() != self.value(*v).shape() {
                return Err(Error::Usage("seed shape differs from its node".into()));
            }
            accumulate(&mut grads, *v, g.clone());
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y: &Tensor = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                gemm_acc(gy, false, bv, true, &mut ga);
                accumulate(grads, *a, ga);
                let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                gemm_acc(av, true, gy, false, &mut gb);
                accumulate(grads, *b, gb);
            }
            Op::AddRow(a, bias) => {
                let c = gy.cols();
                let mut gb = Tensor::zeros(1, c);
                for r in 0..gy.rows() {
                    for (k, v) in gy.row(r).iter().enumerate() {
                        gb.data_mut()[k] += v;
                    }
                }
                accumulate(grads, *a, gy.clone());
                accumulate(grads, *bias, gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, gy.clone());
                accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, gy.clone());
                accumulate(grads, *b, gy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, gy.zip_map(self.value(*b), |g, x| g * x));
                accumulate(grads, *b, gy.zip_map(self.value(*a), |g, x| g * x));
            }
            Op::Affine(a, s) => accumulate(grads, *a, gy.map(|g| g * s)),
            Op::ScaleCols(a, w) => {
                let c = gy.cols();
                let mut g = gy.clone();
                for (k, v) in g.data_mut().iter_mut().enumerate() {
                    *v *= w[k % c];
                }
                accumulate(grads, *a, g);
            }
            Op::Sigmoid(a) => accumulate(grads, *a, gy.zip_map(y, |g, s| g * s * (1.0 - s))),
            Op::Tanh(a) => accumulate(grads, *a, gy.zip_map(y, |g, t| g * (1.0 - t * t))),
            Op::Gelu(a) => accumulate(grads, *a, gy.zip_map(self.value(*a), |g, x| g * gelu_grad(x))),
            Op::Sin(a) => accumulate(grads, *a, gy.zip_map(self.value(*a), |g, x| g * x.cos())),
            Op::Cos(a) => accumulate(grads, *a, gy.zip_map(self.value(*a), |g, x| -g * x.sin())),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = (gy.rows(), gy.cols());
                let g = self.value(*gamma);
                let mut gx = Tensor::zeros(rows, cols);
                let mut gg = Tensor::zeros(1, cols);
                let mut gb = Tensor::zeros(1, cols);
                let mut dxhat = vec![0.0; cols];
                for r in 0..rows {
                    let (gr, hr) = (gy.row(r), xhat.row(r));
                    let (mut m1, mut m2) = (0.0, 0.0);
                    for c in 0..cols {
                        gg.data_mut()[c] += gr[c] * hr[c];
                        gb.data_mut()[c] += gr[c];
                        dxhat[c] = gr[c] * g.data()[c];
                        m1 += dxhat[c];
                        m2 += dxhat[c] * hr[c];
                    }
                    m1 /= cols as f64;
                    m2 /= cols as f64;
                    for c in 0..cols {
                        gx.set(r, c, inv_std[r] * (dxhat[c] - m1 - hr[c] * m2));
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *gamma, gg);
                accumulate(grads, *beta, gb);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    let mut g = Tensor::zeros(gy.rows(), w);
                    for r in 0..gy.rows() {
                        g.data_mut()[r * w..(r + 1) * w].copy_from_slice(&gy.row(r)[offset..offset + w]);
                    }
                    accumulate(grads, *p, g);
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut g = Tensor::zeros(src.rows(), src.cols());
                let w = gy.cols();
                let c = src.cols();
                for r in 0..gy.rows() {
                    g.data_mut()[r * c + start..r * c + start + w].copy_from_slice(gy.row(r));
                }
                accumulate(grads, *a, g);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let c = gy.cols();
                for p in parts {
                    let r = self.value(*p).rows();
                    let g = Tensor::from_vec(r, c, gy.data()[offset * c..(offset + r) * c].to_vec());
                    accumulate(grads, *p, g);
                    offset += r;
                }
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let mut g = Tensor::zeros(src.rows(), src.cols());
                let c = src.cols();
                g.data_mut()[start * c..start * c + gy.len()].copy_from_slice(gy.data());
                accumulate(grads, *a, g);
            }
            Op::Huber(a, delta) => {
                let x = self.value(*a);
                let c = x.cols();
                let data = x
                    .data()
                    .iter()
                    .zip(gy.data())
                    .enumerate()
                    .map(|(k, (&e, &g))| g * e.clamp(-delta[k % c], delta[k % c]))
                    .collect();
                accumulate(grads, *a, Tensor::from_vec(x.rows(), c, data));
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                accumulate(grads, *a, Tensor::filled(x.rows(), x.cols(), gy.data()[0]));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `e^2 / 2` inside `[-delta, delta]`, linear outside.
pub fn huber(e: f64, delta: f64) -> f64 {
    let a = e.abs();
    if a <= delta {
        0.5 * e * e
    } else {
        delta * (a - 0.5 * delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(sum(f(x) * w))/dx for a tape-built `f`.
    fn check(build: impl Fn(&mut Tape, Var) -> Var, x: Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let probe = {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let y = build(&mut t, v);
            t.value(y).shape()
        };
        let w = Tensor::uniform(probe[0], probe[1], 1.0, &mut rng);
        let eval = |x: &Tensor| {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let y = build(&mut t, v);
            t.value(y).data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let y = build(&mut t, v);
        let g = t.backward_from(&[(y, w.clone())]).unwrap();
        let analytic = g.get(v).unwrap().clone();
        let h = 1e-6;
        for k in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[k] += h;
            let mut m = x.clone();
            m.data_mut()[k] -= h;
            let fd = (eval(&p) - eval(&m)) / (2.0 * h);
            let a = analytic.data()[k];
            assert!((a - fd).abs() <= 1e-7 * (1.0 + a.abs()), "entry {k}: analytic {a} vs fd {fd}");
        }
    }

    fn input(rows: usize, cols: usize, seed: u64) -> Tensor {
        Tensor::uniform(rows, cols, 1.5, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn elementwise_ops() {
        check(|t, x| t.sigmoid(x), input(3, 4, 1));
        check(|t, x| t.tanh(x), input(3, 4, 2));
        check(|t, x| t.gelu(x), input(3, 4, 3));
        check(|t, x| t.sin(x), input(3, 4, 4));
        check(|t, x| t.cos(x), input(3, 4, 5));
        check(|t, x| t.affine(x, -2.5, 1.0), input(3, 4, 6));
        check(|t, x| t.scale_cols(x, &[1.0, -2.0, 0.5, 3.0]), input(3, 4, 7));
        check(|t, x| t.mul(x, x), input(3, 4, 8));
        check(|t, x| t.huber(x, &[0.3, 0.7, 2.0, 0.1]), input(3, 4, 9));
    }

    #[test]
    fn structural_ops() {
        check(
            |t, x| {
                let a = t.slice_cols(x, 1, 2);
                let b = t.slice_rows(x, 0, 2);
                let c = t.concat_cols(&[x, a]);
                let d = t.concat_rows(&[b, x]);
                let e = t.sum(d);
                let s = t.sum(c);
                t.sub(e, s)
            },
            input(3, 4, 10),
        );
    }

    #[test]
    fn linear_and_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Tensor::uniform(4, 5, 1.0, &mut rng);
        let b = Tensor::uniform(1, 5, 1.0, &mut rng);
        let gamma = Tensor::uniform(1, 5, 1.0, &mut rng);
        let beta = Tensor::uniform(1, 5, 1.0, &mut rng);
        check(
            |t, x| {
                let wv = t.constant(w.clone());
                let bv = t.constant(b.clone());
                let y = t.linear(x, wv, bv);
                let (g, be) = (t.constant(gamma.clone()), t.constant(beta.clone()));
                t.layer_norm(y, g, be)
            },
            input(3, 4, 12),
        );
        // and with respect to the weight itself
        let x = input(3, 4, 13);
        check(
            |t, wv| {
                let xv = t.constant(x.clone());
                t.matmul(xv, wv)
            },
            w.clone(),
        );
    }

    #[test]
    fn backward_without_forward_is_a_usage_error() {
        let t = Tape::new();
        assert!(matches!(t.backward(Var(0)), Err(Error::Usage(_))));
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(2, 2));
        assert!(matches!(t.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn huber_branches() {
        assert_eq!(huber(0.5, 1.0), 0.125);
        assert_eq!(huber(-3.0, 1.0), 2.5);
        assert_eq!(huber(1.0, 1.0), 0.5);
    }

    #[test]
    fn unused_nodes_have_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::filled(1, 1, 2.0));
        let b = t.constant(Tensor::filled(1, 1, 3.0));
        let y = t.mul(a, a);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[4.0]);
        assert!(g.get(b).is_none());
    }
}
