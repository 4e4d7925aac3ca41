//! A small reverse-mode tape over [`Matrix`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter as
//! named leaves; [`Graph::backward`] returns gradients for every leaf that
//! took part in the computation. A parameter that is never read produces no
//! gradient at all, which is how missing modalities stay isolated.

use std::collections::{BTreeMap, HashMap};

use crate::error::Result;
use crate::kernels;
use crate::params::ParamStore;
use crate::tensor::{gemm_acc, Matrix};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a 2-D convolution over a `(H·W) × C` channels-last image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// Source pixel row for output position `(oy, ox)` and kernel offset
    /// `(ky, kx)`, or `None` when it falls into the zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.padding as isize;
        let x = (ox * self.stride + kx) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some(y as usize * self.width + x as usize)
        }
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    Sigmoid(usize),
    LayerNorm {
        x: usize,
        inv_std: Vec<f64>,
    },
    MeanRows(usize),
    SumAll(usize),
    SumCols(usize),
    Transpose(usize),
    Reshape(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
    },
    MultiHeadAttention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: Vec<Matrix>,
    },
    Im2Col {
        x: usize,
        geom: ConvGeometry,
    },
    MaskedAttention {
        x: usize,
        d: usize,
    },
    LogitPool(usize, usize),
    Jsd(usize, usize),
    Orth(usize, usize),
    Mse(usize, usize),
    Bce {
        x: usize,
        targets: Vec<f64>,
    },
    MarginRank {
        x: usize,
        losses: Matrix,
        epsilon: f64,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
    param_index: HashMap<String, usize>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every parameter leaf, keyed by parameter name.
    pub fn into_param_grads(mut self, graph: &Graph) -> BTreeMap<String, Matrix> {
        graph
            .params
            .iter()
            .filter_map(|(name, idx)| self.grads[*idx].take().map(|g| (name.clone(), g)))
            .collect()
    }
}

fn elementwise(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    assert_eq!(a.shape(), b.shape(), "elementwise operands");
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("shape preserved")
}

fn broadcast_row(a: &Matrix, row: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    assert_eq!(row.rows(), 1, "broadcast operand must be a row");
    assert_eq!(a.cols(), row.cols(), "broadcast width");
    let mut out = a.clone();
    for r in 0..out.rows() {
        for (o, &b) in out.row_mut(r).iter_mut().zip(row.data()) {
            *o = f(*o, b);
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

const LAYER_NORM_EPS: f64 = 1e-5;

fn column_block(m: &Matrix, start: usize, len: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), len);
    for r in 0..m.rows() {
        out.row_mut(r)
            .copy_from_slice(&m.row(r)[start..start + len]);
    }
    out
}

fn add_column_block(dst: &mut Matrix, start: usize, block: &Matrix) {
    for r in 0..block.rows() {
        for (d, s) in dst.row_mut(r)[start..start + block.cols()]
            .iter_mut()
            .zip(block.row(r))
        {
            *d += s;
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, parents: &[usize]) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// The parameter `name` from `store`; repeated reads share one leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&idx) = self.param_index.get(name) {
            return Ok(Var(idx));
        }
        let value = store.get(name)?.clone();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        let idx = self.nodes.len() - 1;
        self.params.push((name.to_string(), idx));
        self.param_index.insert(name.to_string(), idx);
        Ok(Var(idx))
    }

    /// Names of the parameters read so far.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    /// `a × bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        self.push(value, Op::MatMulNt(a.0, b.0), &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = elementwise(self.value(a), self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = elementwise(self.value(a), self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = elementwise(self.value(a), self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = broadcast_row(self.value(a), self.value(row), |x, y| x + y);
        self.push(value, Op::AddRow(a.0, row.0), &[a.0, row.0])
    }

    /// Multiplies every row of `a` elementwise by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = broadcast_row(self.value(a), self.value(row), |x, y| x * y);
        self.push(value, Op::MulRow(a.0, row.0), &[a.0, row.0])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x * k);
        self.push(value, Op::Scale(a.0, k), &[a.0])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a.0), &[a.0])
    }

    /// Clamped logistic, see [`kernels::sigmoid`].
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let data = kernels::sigmoid(src.data())?;
        let value = Matrix::from_vec(src.rows(), src.cols(), data)?;
        Ok(self.push(value, Op::Sigmoid(a.0), &[a.0]))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut out = src.clone();
        let mut inv_std = Vec::with_capacity(src.rows());
        for r in 0..src.rows() {
            let row = out.row_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNorm { x: a.0, inv_std }, &[a.0])
    }

    /// Column means, `m × n → 1 × n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut out = vec![0.0; src.cols()];
        for r in 0..src.rows() {
            for (o, x) in out.iter_mut().zip(src.row(r)) {
                *o += x;
            }
        }
        let n = src.rows() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        self.push(Matrix::row_vector(out), Op::MeanRows(a.0), &[a.0])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Matrix::row_vector(vec![self.value(a).sum()]);
        self.push(value, Op::SumAll(a.0), &[a.0])
    }

    /// Row sums, `m × n → m × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let data = (0..src.rows()).map(|r| src.row(r).iter().sum()).collect();
        let value = Matrix::from_vec(src.rows(), 1, data).expect("column");
        self.push(value, Op::SumCols(a.0), &[a.0])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a.0), &[a.0])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(a).clone().reshaped(rows, cols)?;
        Ok(self.push(value, Op::Reshape(a.0), &[a.0]))
    }

    /// Stacks matrices of equal width vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.cols(), cols, "concat_rows width");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        let idx: Vec<usize> = parts.iter().map(|v| v.0).collect();
        let value = Matrix::from_vec(rows, cols, data).expect("stacked");
        self.push(value, Op::ConcatRows(idx.clone()), &idx)
    }

    /// Joins matrices of equal height side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut start = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.rows(), rows, "concat_cols height");
            add_column_block(&mut out, start, m);
            start += m.cols();
        }
        let idx: Vec<usize> = parts.iter().map(|v| v.0).collect();
        self.push(out, Op::ConcatCols(idx.clone()), &idx)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = self.value(a);
        assert!(start + len <= src.rows(), "slice_rows out of range");
        let cols = src.cols();
        let data = src.data()[start * cols..(start + len) * cols].to_vec();
        let value = Matrix::from_vec(len, cols, data).expect("slice");
        self.push(value, Op::SliceRows { x: a.0, start }, &[a.0])
    }

    /// Scaled dot-product attention with `heads` heads over the columns of
    /// `q`, `k`, `v`. No masking; every key is visible.
    pub fn multi_head_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let d = qm.cols();
        assert!(
            heads > 0 && d % heads == 0,
            "model width must split into heads"
        );
        assert_eq!(km.rows(), vm.rows(), "keys and values");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(qm.rows(), d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = column_block(qm, h * dh, dh);
            let kh = column_block(km, h * dh, dh);
            let vh = column_block(vm, h * dh, dh);
            let mut p = qh.matmul_nt(&kh);
            let visible = vec![true; p.cols()];
            for r in 0..p.rows() {
                let row = kernels::softmax_visible(p.row(r), &visible, scale);
                p.row_mut(r).copy_from_slice(&row);
            }
            add_column_block(&mut out, h * dh, &p.matmul(&vh));
            probs.push(p);
        }
        self.push(
            out,
            Op::MultiHeadAttention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                probs,
            },
            &[q.0, k.0, v.0],
        )
    }

    /// Unfolds image patches so a convolution becomes one matrix product.
    pub fn im2col(&mut self, a: Var, geom: ConvGeometry) -> Var {
        let src = self.value(a);
        assert_eq!(
            src.shape(),
            (geom.height * geom.width, geom.channels),
            "image layout"
        );
        let (oh, ow, c) = (geom.out_height(), geom.out_width(), geom.channels);
        let mut out = Matrix::zeros(oh * ow, geom.patch_len());
        for oy in 0..oh {
            for ox in 0..ow {
                let row = out.row_mut(oy * ow + ox);
                for ky in 0..geom.kernel {
                    for kx in 0..geom.kernel {
                        if let Some(p) = geom.source(oy, ox, ky, kx) {
                            let base = (ky * geom.kernel + kx) * c;
                            row[base..base + c].copy_from_slice(src.row(p));
                        }
                    }
                }
            }
        }
        self.push(out, Op::Im2Col { x: a.0, geom }, &[a.0])
    }

    /// Row-wise [`kernels::masked_scaled_attention`] with one additive mask
    /// shared by all rows.
    pub fn masked_attention(&mut self, scores: Var, mask: &[f64], d: usize) -> Result<Var> {
        let src = self.value(scores);
        let mut out = Matrix::zeros(src.rows(), src.cols());
        for r in 0..src.rows() {
            let row = kernels::masked_scaled_attention(src.row(r), mask, d)?;
            out.row_mut(r).copy_from_slice(&row);
        }
        Ok(self.push(out, Op::MaskedAttention { x: scores.0, d }, &[scores.0]))
    }

    pub fn logit_pool(&mut self, a: Var, b: Var) -> Result<Var> {
        let (am, bm) = (self.value(a), self.value(b));
        let data = kernels::logit_pool(am.data(), bm.data())?;
        let value = Matrix::from_vec(am.rows(), am.cols(), data)?;
        Ok(self.push(value, Op::LogitPool(a.0, b.0), &[a.0, b.0]))
    }

    pub fn jsd(&mut self, a: Var, b: Var) -> Result<Var> {
        let loss = kernels::jsd_from_logits(self.value(a).data(), self.value(b).data())?;
        Ok(self.push(
            Matrix::row_vector(vec![loss]),
            Op::Jsd(a.0, b.0),
            &[a.0, b.0],
        ))
    }

    pub fn orthogonality(&mut self, a: Var, b: Var) -> Result<Var> {
        let loss = kernels::orthogonality_penalty(self.value(a).data(), self.value(b).data())?;
        Ok(self.push(
            Matrix::row_vector(vec![loss]),
            Op::Orth(a.0, b.0),
            &[a.0, b.0],
        ))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let loss = kernels::mean_squared_error(self.value(a).data(), self.value(b).data())?;
        Ok(self.push(
            Matrix::row_vector(vec![loss]),
            Op::Mse(a.0, b.0),
            &[a.0, b.0],
        ))
    }

    /// Elementwise binary cross-entropy of probabilities `a` against constant targets.
    pub fn bce(&mut self, a: Var, targets: &[f64]) -> Result<Var> {
        let src = self.value(a);
        let data = kernels::binary_cross_entropy(targets, src.data())?;
        let value = Matrix::from_vec(src.rows(), src.cols(), data)?;
        Ok(self.push(
            value,
            Op::Bce {
                x: a.0,
                targets: targets.to_vec(),
            },
            &[a.0],
        ))
    }

    /// Attention ranking loss of `alpha` against constant per-representation losses.
    pub fn margin_rank(&mut self, alpha: Var, losses: Matrix, epsilon: f64) -> Result<Var> {
        let loss = kernels::margin_rank_attn_loss(self.value(alpha), &losses, epsilon)?;
        Ok(self.push(
            Matrix::row_vector(vec![loss]),
            Op::MarginRank {
                x: alpha.0,
                losses,
                epsilon,
            },
            &[alpha.0],
        ))
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], idx: usize, g: Matrix) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut grads[idx] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Adds `a' × b'` into the gradient slot of `idx`, allocating if needed.
    fn accumulate_product(
        &self,
        grads: &mut [Option<Matrix>],
        idx: usize,
        a: &Matrix,
        ta: bool,
        b: &Matrix,
        tb: bool,
    ) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        let shape = self.nodes[idx].value.shape();
        let slot = grads[idx].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1));
        gemm_acc(a, ta, b, tb, slot);
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let val = |j: usize| &self.nodes[j].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                self.accumulate_product(grads, *a, g, false, val(*b), true);
                self.accumulate_product(grads, *b, val(*a), true, g, false);
            }
            Op::MatMulNt(a, b) => {
                self.accumulate_product(grads, *a, g, false, val(*b), false);
                self.accumulate_product(grads, *b, g, true, val(*a), false);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, elementwise(g, val(*b), |x, y| x * y));
                self.accumulate(grads, *b, elementwise(g, val(*a), |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                let mut gr = vec![0.0; g.cols()];
                for r in 0..g.rows() {
                    for (s, x) in gr.iter_mut().zip(g.row(r)) {
                        *s += x;
                    }
                }
                self.accumulate(grads, *row, Matrix::row_vector(gr));
            }
            Op::MulRow(a, row) => {
                self.accumulate(grads, *a, broadcast_row(g, val(*row), |x, y| x * y));
                let av = val(*a);
                let mut gr = vec![0.0; g.cols()];
                for r in 0..g.rows() {
                    for ((s, x), y) in gr.iter_mut().zip(g.row(r)).zip(av.row(r)) {
                        *s += x * y;
                    }
                }
                self.accumulate(grads, *row, Matrix::row_vector(gr));
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.map(|x| x * k)),
            Op::Gelu(a) => {
                self.accumulate(grads, *a, elementwise(g, val(*a), |x, y| x * gelu_grad(y)))
            }
            Op::Sigmoid(a) => {
                let d = kernels::sigmoid_grad(val(*a).data());
                let data = g.data().iter().zip(d).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, Matrix::from_vec(g.rows(), g.cols(), data)?);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &self.nodes[i].value;
                let mut out = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let n = gr.len() as f64;
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, &gv), &yv) in out.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = inv_std[r] * (gv - mean_g - yv * mean_gy);
                    }
                }
                self.accumulate(grads, *x, out);
            }
            Op::MeanRows(a) => {
                let rows = val(*a).rows();
                let mut out = Matrix::zeros(rows, g.cols());
                let scaled: Vec<f64> = g.data().iter().map(|x| x / rows as f64).collect();
                for r in 0..rows {
                    out.row_mut(r).copy_from_slice(&scaled);
                }
                self.accumulate(grads, *a, out);
            }
            Op::SumAll(a) => {
                let (r, c) = val(*a).shape();
                self.accumulate(grads, *a, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::SumCols(a) => {
                let (r, c) = val(*a).shape();
                let mut out = Matrix::zeros(r, c);
                for row in 0..r {
                    out.row_mut(row).fill(g.get(row, 0));
                }
                self.accumulate(grads, *a, out);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Reshape(a) => {
                let (r, c) = val(*a).shape();
                self.accumulate(grads, *a, g.clone().reshaped(r, c)?);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    let data = g.data()[start * c..(start + r) * c].to_vec();
                    self.accumulate(grads, p, Matrix::from_vec(r, c, data)?);
                    start += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = val(p).cols();
                    self.accumulate(grads, p, column_block(g, start, c));
                    start += c;
                }
            }
            Op::SliceRows { x, start } => {
                let (r, c) = val(*x).shape();
                let mut out = Matrix::zeros(r, c);
                out.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, out);
            }
            Op::MultiHeadAttention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qm, km, vm) = (val(*q), val(*k), val(*v));
                let dh = qm.cols() / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = Matrix::zeros(qm.rows(), qm.cols());
                let mut gk = Matrix::zeros(km.rows(), km.cols());
                let mut gv = Matrix::zeros(vm.rows(), vm.cols());
                for (h, p) in probs.iter().enumerate() {
                    let go = column_block(g, h * dh, dh);
                    let qh = column_block(qm, h * dh, dh);
                    let kh = column_block(km, h * dh, dh);
                    let vh = column_block(vm, h * dh, dh);
                    add_column_block(&mut gv, h * dh, &p.matmul_tn(&go));
                    let gp = go.matmul_nt(&vh);
                    let mut gs = Matrix::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let row = kernels::softmax_backward(p.row(r), gp.row(r), scale);
                        gs.row_mut(r).copy_from_slice(&row);
                    }
                    add_column_block(&mut gq, h * dh, &gs.matmul(&kh));
                    add_column_block(&mut gk, h * dh, &gs.matmul_tn(&qh));
                }
                self.accumulate(grads, *q, gq);
                self.accumulate(grads, *k, gk);
                self.accumulate(grads, *v, gv);
            }
            Op::Im2Col { x, geom } => {
                let (oh, ow, c) = (geom.out_height(), geom.out_width(), geom.channels);
                let mut out = Matrix::zeros(geom.height * geom.width, c);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let row = g.row(oy * ow + ox);
                        for ky in 0..geom.kernel {
                            for kx in 0..geom.kernel {
                                if let Some(p) = geom.source(oy, ox, ky, kx) {
                                    let base = (ky * geom.kernel + kx) * c;
                                    for (d, s) in
                                        out.row_mut(p).iter_mut().zip(&row[base..base + c])
                                    {
                                        *d += s;
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, out);
            }
            Op::MaskedAttention { x, d, .. } => {
                let y = &self.nodes[i].value;
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let row = kernels::masked_scaled_attention_backward(y.row(r), g.row(r), *d);
                    out.row_mut(r).copy_from_slice(&row);
                }
                self.accumulate(grads, *x, out);
            }
            Op::LogitPool(a, b) => {
                let (ga, gb) = kernels::logit_pool_grad(val(*a).data(), val(*b).data())?;
                self.accumulate_scaled_pair(grads, *a, *b, g, ga, gb, false)?;
            }
            Op::Jsd(a, b) => {
                let (ga, gb) = kernels::jsd_from_logits_grad(val(*a).data(), val(*b).data())?;
                self.accumulate_scaled_pair(grads, *a, *b, g, ga, gb, true)?;
            }
            Op::Orth(a, b) => {
                let (ga, gb) = kernels::orthogonality_penalty_grad(val(*a).data(), val(*b).data())?;
                self.accumulate_scaled_pair(grads, *a, *b, g, ga, gb, true)?;
            }
            Op::Mse(a, b) => {
                let (ga, gb) = kernels::mean_squared_error_grad(val(*a).data(), val(*b).data())?;
                self.accumulate_scaled_pair(grads, *a, *b, g, ga, gb, true)?;
            }
            Op::Bce { x, targets } => {
                let src = val(*x);
                let d = kernels::binary_cross_entropy_grad(targets, src.data())?;
                let data = g.data().iter().zip(d).map(|(a, b)| a * b).collect();
                self.accumulate(grads, *x, Matrix::from_vec(src.rows(), src.cols(), data)?);
            }
            Op::MarginRank { x, losses, epsilon } => {
                let mut d = kernels::margin_rank_attn_loss_grad(val(*x), losses, *epsilon)?;
                d.scale_assign(g.get(0, 0));
                self.accumulate(grads, *x, d);
            }
        }
        Ok(())
    }

    /// Routes kernel gradients of a binary op. `scalar_out` marks ops whose
    /// output is `1 × 1`; otherwise the upstream gradient is elementwise.
    #[allow(clippy::too_many_arguments)]
    fn accumulate_scaled_pair(
        &self,
        grads: &mut [Option<Matrix>],
        a: usize,
        b: usize,
        g: &Matrix,
        ga: Vec<f64>,
        gb: Vec<f64>,
        scalar_out: bool,
    ) -> Result<()> {
        let (r, c) = self.nodes[a].value.shape();
        let apply = |d: Vec<f64>| -> Vec<f64> {
            if scalar_out {
                let k = g.get(0, 0);
                d.into_iter().map(|x| x * k).collect()
            } else {
                d.into_iter().zip(g.data()).map(|(x, y)| x * y).collect()
            }
        };
        self.accumulate(grads, a, Matrix::from_vec(r, c, apply(ga))?);
        self.accumulate(grads, b, Matrix::from_vec(r, c, apply(gb))?);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Checks d(loss)/d(param) for every parameter entry against central differences.
    fn check(store: &ParamStore, build: impl Fn(&mut Graph, &ParamStore) -> Var) {
        let mut g = Graph::new();
        let loss = build(&mut g, store);
        let grads = g.backward(loss).unwrap().into_param_grads(&g);
        for (name, grad) in &grads {
            for idx in 0..grad.len() {
                let eval = |delta: f64| {
                    let mut s = store.clone();
                    s.get_mut(name).unwrap().data_mut()[idx] += delta;
                    let mut g = Graph::new();
                    let l = build(&mut g, &s);
                    g.value(l).get(0, 0)
                };
                let numeric = (eval(1e-5) - eval(-1e-5)) / 2e-5;
                let analytic = grad.data()[idx];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(rel < 1e-5, "{name}[{idx}]: {analytic} vs {numeric}");
            }
        }
    }

    #[test]
    fn dense_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::default();
        store.insert("x", random(&mut rng, 4, 6));
        store.insert("w", random(&mut rng, 6, 6));
        store.insert("b", random(&mut rng, 1, 6));
        store.insert("s", random(&mut rng, 1, 6));
        check(&store, |g, s| {
            let x = g.param(s, "x").unwrap();
            let w = g.param(s, "w").unwrap();
            let b = g.param(s, "b").unwrap();
            let sc = g.param(s, "s").unwrap();
            let h = g.matmul(x, w);
            let h = g.add_row(h, b);
            let h = g.gelu(h);
            let h = g.layer_norm(h);
            let h = g.mul_row(h, sc);
            let t = g.transpose(h);
            let u = g.matmul_nt(h, x);
            let u = g.sum_all(u);
            let h2 = g.multi_head_attention(h, x, x, 2);
            let h2 = g.mul(h2, h);
            let m = g.mean_rows(h2);
            let r = g.reshape(m, 2, 3).unwrap();
            let r = g.sum_cols(r);
            let r = g.sigmoid(r).unwrap();
            let top = g.slice_rows(t, 1, 2);
            let cat = g.concat_cols(&[top, top]);
            let cat = g.concat_rows(&[cat, cat]);
            let cat = g.scale(cat, 0.3);
            let a = g.sum_all(cat);
            let c = g.sum_all(r);
            let ac = g.sub(a, c);
            g.add(ac, u)
        });
    }

    #[test]
    fn conv_and_kernel_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let geom = ConvGeometry {
            height: 5,
            width: 4,
            channels: 2,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let mut store = ParamStore::default();
        store.insert("img", random(&mut rng, 20, 2));
        store.insert("k", random(&mut rng, geom.patch_len(), 3));
        store.insert("a", random(&mut rng, 1, 3));
        store.insert("b", random(&mut rng, 1, 3));
        check(&store, |g, s| {
            let img = g.param(s, "img").unwrap();
            let k = g.param(s, "k").unwrap();
            let a = g.param(s, "a").unwrap();
            let b = g.param(s, "b").unwrap();
            let cols = g.im2col(img, geom);
            let conv = g.matmul(cols, k);
            let pooled = g.mean_rows(conv);
            let lp = g.logit_pool(pooled, a).unwrap();
            let j = g.jsd(lp, b).unwrap();
            let o = g.orthogonality(pooled, b).unwrap();
            let m = g.mse(a, b).unwrap();
            let att = g
                .masked_attention(lp, &[0.0, f64::NEG_INFINITY, 0.0], 4)
                .unwrap();
            let p = g.sigmoid(pooled).unwrap();
            let ce = g.bce(p, &[1.0, 0.0, 1.0]).unwrap();
            let ce = g.sum_all(ce);
            let losses = Matrix::row_vector(vec![0.1, 0.5, 0.3]);
            let rank = g.margin_rank(att, losses, 0.7).unwrap();
            let parts = [j, o, m, ce, rank];
            let mut total = parts[0];
            for p in &parts[1..] {
                total = g.add(total, *p);
            }
            total
        });
    }

    #[test]
    fn unread_params_get_no_gradient() {
        let mut store = ParamStore::default();
        store.insert("used", Matrix::filled(1, 2, 0.5));
        store.insert("unused", Matrix::filled(1, 2, 0.5));
        let mut g = Graph::new();
        let u = g.param(&store, "used").unwrap();
        let again = g.param(&store, "used").unwrap();
        assert_eq!(u, again);
        let s = g.sum_all(u);
        let grads = g.backward(s).unwrap().into_param_grads(&g);
        assert!(grads.contains_key("used"));
        assert!(!grads.contains_key("unused"));
    }
}
