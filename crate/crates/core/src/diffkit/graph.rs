//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its variables; calling
//! [`Graph::backward`] on a scalar result walks the tape in reverse. Graphs
//! are cheap and single-use: build one per sample, differentiate, drop it.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param,
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    UpsampleNearest(Var, usize),
    UpsampleBilinear(Var, usize),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    MaskedMeanRows(Var, Vec<bool>),
    SumRows(Var),
    Sum(Var),
    Mean(Var),
    BceProb {
        p: Var,
        target: Vec<T>,
        eps: T,
    },
    BceLogits {
        logits: Var,
        target: Vec<T>,
    },
    DiceLoss {
        logits: Var,
        target: Vec<T>,
        smooth: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Constant leaf.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    /// Leaf bound to a model parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a), data).expect("shape");
        self.push(t, Op::Add(a, b))
    }

    /// (n, m) + (m) broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let m = *self.shape(x).last().expect("rank ≥ 1");
        assert_eq!(self.shape(b), &[m], "add_row: bias length");
        let bias = self.data(b).to_vec();
        let data = self
            .data(x)
            .chunks(m)
            .flat_map(|row| row.iter().zip(&bias).map(|(&v, &c)| v + c))
            .collect();
        let t = Tensor::new(self.shape(x), data).expect("shape");
        self.push(t, Op::AddRow(x, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a), data).expect("shape");
        self.push(t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let t = self.value(x).map(|v| v * s);
        self.push(t, Op::Scale(x, s))
    }

    /// (n, k) · (k, m)
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = dims2(self.shape(a));
        let (k2, m) = dims2(self.shape(b));
        assert_eq!(k, k2, "matmul: inner dimension");
        let mut out = vec![T::zero(); n * m];
        kernels::matmul_acc(self.data(a), self.data(b), &mut out, n, k, m);
        let t = Tensor::new(&[n, m], out).expect("shape");
        self.push(t, Op::MatMul(a, b))
    }

    /// (n, k) · (m, k)ᵀ
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = dims2(self.shape(a));
        let (m, k2) = dims2(self.shape(b));
        assert_eq!(k, k2, "matmul_bt: inner dimension");
        let mut out = vec![T::zero(); n * m];
        kernels::matmul_bt_acc(self.data(a), self.data(b), &mut out, n, k, m);
        let t = Tensor::new(&[n, m], out).expect("shape");
        self.push(t, Op::MatMulBt(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (n, m) = dims2(self.shape(x));
        let src = self.data(x);
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = src[i * m + j];
            }
        }
        let t = Tensor::new(&[m, n], out).expect("shape");
        self.push(t, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self
            .value(x)
            .clone()
            .reshape(shape)
            .expect("reshape: element count");
        self.push(t, Op::Reshape(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(kernels::gelu);
        self.push(t, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(kernels::sigmoid);
        self.push(t, Op::Sigmoid(x))
    }

    /// Row-wise softmax of a rank-2 tensor. `allowed` is either one flag per
    /// entry or one flag per column (broadcast over rows); disallowed
    /// positions get weight exactly zero.
    pub fn softmax_rows(&mut self, x: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let (n, m) = dims2(self.shape(x));
        if let Some(mask) = allowed {
            if mask.len() != m && mask.len() != n * m {
                return Err(Error::Shape(format!(
                    "softmax mask of length {} for a {n}×{m} input",
                    mask.len()
                )));
            }
        }
        let keep = |i: usize, j: usize| match allowed {
            None => true,
            Some(mask) if mask.len() == m => mask[j],
            Some(mask) => mask[i * m + j],
        };
        let src = self.data(x);
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let row = &src[i * m..(i + 1) * m];
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if keep(i, j) {
                    if v.is_nan() {
                        return Err(Error::NonFinite(format!("softmax input row {i}")));
                    }
                    if v > max {
                        max = v;
                    }
                }
            }
            if max == T::neg_infinity() {
                return Err(Error::DegenerateAttention { row: i });
            }
            let mut total = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if keep(i, j) {
                    let e = (v - max).exp();
                    out[i * m + j] = e;
                    total += e;
                }
            }
            for o in &mut out[i * m..(i + 1) * m] {
                *o /= total;
            }
        }
        let t = Tensor::new(&[n, m], out).expect("shape");
        Ok(self.push(t, Op::Softmax(x)))
    }

    /// Normalizes each row of (n, d) then applies gain and bias of length d.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (n, d) = dims2(self.shape(x));
        assert_eq!(self.shape(gain), &[d]);
        assert_eq!(self.shape(bias), &[d]);
        let eps = T::lit(1e-5);
        let dn = T::lit(d as f64);
        let (src, gv, bv) = (self.data(x), self.data(gain), self.data(bias));
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * gv[j] + bv[j];
            }
        }
        let t = Tensor::new(&[n, d], out).expect("shape");
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Zero-padded convolution of x (Ci, H, W) with w (Co, Ci, k, k).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(w);
        assert_eq!(xs.len(), 3, "conv2d: input must be (C, H, W)");
        assert_eq!(ws.len(), 4, "conv2d: weight must be (Co, Ci, k, k)");
        assert_eq!(ws[1], xs[0], "conv2d: input channels");
        let geom = ConvGeom {
            channels: xs[0],
            height: xs[1],
            width: xs[2],
            kernel: ws[2],
            stride,
        };
        let co = ws[0];
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let p = ho * wo;
        let cols = kernels::im2col(self.data(x), &geom);
        let mut out = vec![T::zero(); co * p];
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[co]);
            for (c, &bv) in self.data(b).iter().enumerate() {
                out[c * p..(c + 1) * p].iter_mut().for_each(|o| *o = bv);
            }
        }
        kernels::matmul_acc(self.data(w), &cols, &mut out, co, geom.patch_len(), p);
        let t = Tensor::new(&[co, ho, wo], out).expect("shape");
        self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
        )
    }

    /// Nearest-neighbour up-sampling of (C, H, W) by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let (c, h, w) = dims3(self.shape(x));
        let (oh, ow) = (h * factor, w * factor);
        let src = self.data(x);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                let srow = &src[(ch * h + oy / factor) * w..(ch * h + oy / factor + 1) * w];
                let drow = &mut out[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow];
                for (ox, d) in drow.iter_mut().enumerate() {
                    *d = srow[ox / factor];
                }
            }
        }
        let t = Tensor::new(&[c, oh, ow], out).expect("shape");
        self.push(t, Op::UpsampleNearest(x, factor))
    }

    /// Bilinear up-sampling of (C, H, W) with half-pixel centres.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Var {
        let (c, h, w) = dims3(self.shape(x));
        let (oh, ow) = (h * factor, w * factor);
        let ty = kernels::bilinear_taps(h, factor);
        let tx = kernels::bilinear_taps(w, factor);
        let src = self.data(x);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::lit(fy);
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::lit(fx);
                    let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                    out[(ch * oh + oy) * ow + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        let t = Tensor::new(&[c, oh, ow], out).expect("shape");
        self.push(t, Op::UpsampleBilinear(x, factor))
    }

    /// Concatenation along the leading axis (channels of (C, H, W), rows of
    /// (n, d)); trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            assert_eq!(&self.shape(p)[1..], &tail[..], "concat: trailing dims");
            lead += self.shape(p)[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let t = Tensor::new(&shape, data).expect("shape");
        self.push(t, Op::Concat(parts.to_vec()))
    }

    /// Columns `start..start+len` of (n, d).
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (n, d) = dims2(self.shape(x));
        assert!(start + len <= d);
        let src = self.data(x);
        let data = (0..n)
            .flat_map(|i| src[i * d + start..i * d + start + len].iter().copied())
            .collect();
        let t = Tensor::new(&[n, len], data).expect("shape");
        self.push(t, Op::SliceCols(x, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.shape(parts[0])[0];
        let widths: Vec<usize> = parts.iter().map(|&p| dims2(self.shape(p)).1).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                assert_eq!(self.shape(p)[0], n, "concat_cols: row count");
                data.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(&[n, total], data).expect("shape");
        self.push(t, Op::ConcatCols(parts.to_vec()))
    }

    /// Rows of a (V, d) table selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let (v, d) = dims2(self.shape(table));
        let src = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "gather: id {id} out of range {v}");
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(&[ids.len(), d], data).expect("shape");
        self.push(t, Op::Gather(table, ids.to_vec()))
    }

    /// Mean of the rows of (n, d) whose flag is set.
    pub fn masked_mean_rows(&mut self, x: Var, mask: &[bool]) -> Var {
        let (n, d) = dims2(self.shape(x));
        assert_eq!(mask.len(), n);
        let count = mask.iter().filter(|&&m| m).count().max(1);
        let inv = T::one() / T::lit(count as f64);
        let src = self.data(x);
        let mut out = vec![T::zero(); d];
        for i in (0..n).filter(|&i| mask[i]) {
            for (o, &v) in out.iter_mut().zip(&src[i * d..(i + 1) * d]) {
                *o += v * inv;
            }
        }
        let t = Tensor::new(&[d], out).expect("shape");
        self.push(t, Op::MaskedMeanRows(x, mask.to_vec()))
    }

    /// (n, m) → (n) row sums.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let (n, m) = dims2(self.shape(x));
        let data = self.data(x).chunks(m).map(|r| r.iter().copied().sum()).collect();
        let t = Tensor::new(&[n], data).expect("shape");
        self.push(t, Op::SumRows(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).len() as f64);
        let s = self.data(x).iter().copied().sum::<T>() / n;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Mean binary cross-entropy of probabilities `p` against `target`, with
    /// `p` clamped to [eps, 1-eps].
    pub fn bce_prob(&mut self, p: Var, target: &[T], eps: T) -> Var {
        assert_eq!(self.value(p).len(), target.len());
        let n = T::lit(target.len() as f64);
        let hi = T::one() - eps;
        let total: T = self
            .data(p)
            .iter()
            .zip(target)
            .map(|(&pv, &y)| {
                let pc = pv.max(eps).min(hi);
                y * pc.ln() + (T::one() - y) * (T::one() - pc).ln()
            })
            .sum();
        self.push(
            Tensor::scalar(-total / n),
            Op::BceProb {
                p,
                target: target.to_vec(),
                eps,
            },
        )
    }

    /// Mean binary cross-entropy computed from logits.
    pub fn bce_logits(&mut self, logits: Var, target: &[T]) -> Var {
        assert_eq!(self.value(logits).len(), target.len());
        let n = T::lit(target.len() as f64);
        let total: T = self
            .data(logits)
            .iter()
            .zip(target)
            .map(|(&x, &y)| x.max(T::zero()) - x * y + (T::one() + (-x.abs()).exp()).ln())
            .sum();
        self.push(
            Tensor::scalar(total / n),
            Op::BceLogits {
                logits,
                target: target.to_vec(),
            },
        )
    }

    /// 1 − (2Σpy + s)/(Σp + Σy + s) with p = sigmoid(logits).
    pub fn dice_loss(&mut self, logits: Var, target: &[T], smooth: T) -> Var {
        assert_eq!(self.value(logits).len(), target.len());
        let (mut inter, mut psum, mut ysum) = (T::zero(), T::zero(), T::zero());
        for (&x, &y) in self.data(logits).iter().zip(target) {
            let p = kernels::sigmoid(x);
            inter += p * y;
            psum += p;
            ysum += y;
        }
        let dice = (T::lit(2.0) * inter + smooth) / (psum + ysum + smooth);
        self.push(
            Tensor::scalar(T::one() - dice),
            Op::DiceLoss {
                logits,
                target: target.to_vec(),
                smooth,
            },
        )
    }

    /// Reverse sweep from `root`, which must hold a single entry.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward: root must be scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Gradients { grads, params }
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Add(a, b) => {
                add_into(self.slot(grads, *a), g);
                add_into(self.slot(grads, *b), g);
            }
            Op::AddRow(x, b) => {
                add_into(self.slot(grads, *x), g);
                let m = self.value(*b).len();
                let gb = self.slot(grads, *b);
                for row in g.chunks(m) {
                    add_into(gb, row);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                for ((d, &gi), &bi) in self.slot(grads, *a).iter_mut().zip(g).zip(bv) {
                    *d += gi * bi;
                }
                for ((d, &gi), &ai) in self.slot(grads, *b).iter_mut().zip(g).zip(av) {
                    *d += gi * ai;
                }
            }
            Op::Scale(x, s) => {
                for (d, &gi) in self.slot(grads, *x).iter_mut().zip(g) {
                    *d += *s * gi;
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = dims2(self.shape(*a));
                let m = self.shape(*b)[1];
                kernels::matmul_bt_acc(g, self.data(*b), self.slot(grads, *a), n, m, k);
                kernels::matmul_at_acc(self.data(*a), g, self.slot(grads, *b), n, k, m);
            }
            Op::MatMulBt(a, b) => {
                let (n, k) = dims2(self.shape(*a));
                let m = self.shape(*b)[0];
                kernels::matmul_acc(g, self.data(*b), self.slot(grads, *a), n, m, k);
                kernels::matmul_at_acc(g, self.data(*a), self.slot(grads, *b), n, m, k);
            }
            Op::Transpose(x) => {
                let (n, m) = dims2(self.shape(*x));
                let gx = self.slot(grads, *x);
                for r in 0..n {
                    for c in 0..m {
                        gx[r * m + c] += g[c * n + r];
                    }
                }
            }
            Op::Reshape(x) => add_into(self.slot(grads, *x), g),
            Op::Gelu(x) => {
                let xv = self.data(*x);
                for ((d, &gi), &v) in self.slot(grads, *x).iter_mut().zip(g).zip(xv) {
                    *d += gi * kernels::gelu_grad(v);
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                for ((d, &gi), &yi) in self.slot(grads, *x).iter_mut().zip(g).zip(y) {
                    *d += gi * yi * (T::one() - yi);
                }
            }
            Op::Softmax(x) => {
                let m = node.value.shape()[1];
                let y = node.value.data();
                let gx = self.slot(grads, *x);
                for ((yr, gr), dr) in y.chunks(m).zip(g.chunks(m)).zip(gx.chunks_mut(m)) {
                    let s: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d += yi * (gi - s);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).len();
                let gv = self.data(*gain).to_vec();
                {
                    let gg = self.slot(grads, *gain);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                {
                    let gb = self.slot(grads, *bias);
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                }
                let dn = T::lit(d as f64);
                let gx = self.slot(grads, *x);
                for (r, ((gr, hr), dr)) in g
                    .chunks(d)
                    .zip(xhat.chunks(d))
                    .zip(gx.chunks_mut(d))
                    .enumerate()
                {
                    let dh: Vec<T> = gr.iter().zip(&gv).map(|(&a, &b)| a * b).collect();
                    let mean_dh = dh.iter().copied().sum::<T>() / dn;
                    let mean_dhh = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                    for j in 0..d {
                        dr[j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let co = self.shape(*w)[0];
                let k = geom.patch_len();
                let p = geom.out_height() * geom.out_width();
                kernels::matmul_bt_acc(g, cols, self.slot(grads, *w), co, p, k);
                if let Some(b) = b {
                    let gb = self.slot(grads, *b);
                    for (c, row) in g.chunks(p).enumerate() {
                        gb[c] += row.iter().copied().sum::<T>();
                    }
                }
                let mut dcols = vec![T::zero(); k * p];
                kernels::matmul_at_acc(self.data(*w), g, &mut dcols, co, k, p);
                kernels::col2im_acc(&dcols, geom, self.slot(grads, *x));
            }
            Op::UpsampleNearest(x, f) => {
                let (c, h, w) = dims3(self.shape(*x));
                let (oh, ow) = (h * f, w * f);
                let gx = self.slot(grads, *x);
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            gx[(ch * h + oy / f) * w + ox / f] += g[(ch * oh + oy) * ow + ox];
                        }
                    }
                }
            }
            Op::UpsampleBilinear(x, f) => {
                let (c, h, w) = dims3(self.shape(*x));
                let (oh, ow) = (h * f, w * f);
                let ty = kernels::bilinear_taps(h, *f);
                let tx = kernels::bilinear_taps(w, *f);
                let gx = self.slot(grads, *x);
                for ch in 0..c {
                    let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        let fy = T::lit(fy);
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let fx = T::lit(fx);
                            let gi = g[(ch * oh + oy) * ow + ox];
                            let top = gi * (T::one() - fy);
                            let bot = gi * fy;
                            plane[y0 * w + x0] += top * (T::one() - fx);
                            plane[y0 * w + x1] += top * fx;
                            plane[y1 * w + x0] += bot * (T::one() - fx);
                            plane[y1 * w + x1] += bot * fx;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    add_into(self.slot(grads, p), &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::SliceCols(x, start) => {
                let (n, d) = dims2(self.shape(*x));
                let len = node.value.shape()[1];
                let gx = self.slot(grads, *x);
                for r in 0..n {
                    add_into(
                        &mut gx[r * d + start..r * d + start + len],
                        &g[r * len..(r + 1) * len],
                    );
                }
            }
            Op::ConcatCols(parts) => {
                let (n, total) = dims2(node.value.shape());
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    let gp = self.slot(grads, p);
                    for r in 0..n {
                        add_into(
                            &mut gp[r * w..(r + 1) * w],
                            &g[r * total + offset..r * total + offset + w],
                        );
                    }
                    offset += w;
                }
            }
            Op::Gather(table, ids) => {
                let d = self.shape(*table)[1];
                let gt = self.slot(grads, *table);
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            Op::MaskedMeanRows(x, mask) => {
                let d = node.value.len();
                let count = mask.iter().filter(|&&m| m).count().max(1);
                let inv = T::one() / T::lit(count as f64);
                let gx = self.slot(grads, *x);
                for (r, &m) in mask.iter().enumerate() {
                    if m {
                        for (dv, &gi) in gx[r * d..(r + 1) * d].iter_mut().zip(g) {
                            *dv += gi * inv;
                        }
                    }
                }
            }
            Op::SumRows(x) => {
                let m = self.shape(*x)[1];
                let gx = self.slot(grads, *x);
                for (row, &gi) in gx.chunks_mut(m).zip(g) {
                    row.iter_mut().for_each(|d| *d += gi);
                }
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.slot(grads, *x).iter_mut().for_each(|d| *d += g0);
            }
            Op::Mean(x) => {
                let g0 = g[0] / T::lit(self.value(*x).len() as f64);
                self.slot(grads, *x).iter_mut().for_each(|d| *d += g0);
            }
            Op::BceProb { p, target, eps } => {
                let n = T::lit(target.len() as f64);
                let hi = T::one() - *eps;
                let pv = self.data(*p);
                let gp = self.slot(grads, *p);
                for ((d, &pi), &y) in gp.iter_mut().zip(pv).zip(target) {
                    if pi > *eps && pi < hi {
                        *d += -g[0] / n * (y / pi - (T::one() - y) / (T::one() - pi));
                    }
                }
            }
            Op::BceLogits { logits, target } => {
                let n = T::lit(target.len() as f64);
                let xv = self.data(*logits);
                let gx = self.slot(grads, *logits);
                for ((d, &x), &y) in gx.iter_mut().zip(xv).zip(target) {
                    *d += g[0] * (kernels::sigmoid(x) - y) / n;
                }
            }
            Op::DiceLoss {
                logits,
                target,
                smooth,
            } => {
                let xv = self.data(*logits);
                let probs: Vec<T> = xv.iter().map(|&x| kernels::sigmoid(x)).collect();
                let inter: T = probs.iter().zip(target).map(|(&p, &y)| p * y).sum();
                let psum: T = probs.iter().copied().sum();
                let ysum: T = target.iter().copied().sum();
                let num = T::lit(2.0) * inter + *smooth;
                let den = psum + ysum + *smooth;
                let gx = self.slot(grads, *logits);
                for ((d, &p), &y) in gx.iter_mut().zip(&probs).zip(target) {
                    let ddice_dp = (T::lit(2.0) * y * den - num) / (den * den);
                    *d += -g[0] * ddice_dp * p * (T::one() - p);
                }
            }
        }
    }

    #[allow(clippy::mut_from_ref)]
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut [T] {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }
}

/// Result of a reverse sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; `None` when `v` does not influence the
    /// root.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradients of every parameter that took part in the forward pass,
    /// sorted by parameter id.
    pub fn param_grads(&self) -> Vec<(ParamId, &[T])> {
        let mut out: Vec<(ParamId, &[T])> = self
            .params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].as_deref().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    assert_eq!(shape.len(), 2, "expected a matrix, got shape {shape:?}");
    (shape[0], shape[1])
}

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "expected (C, H, W), got shape {shape:?}");
    (shape[0], shape[1], shape[2])
}
