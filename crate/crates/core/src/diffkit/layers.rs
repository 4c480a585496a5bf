//! Parameterized building blocks shared by the segmenter and the detector.

use super::graph::{Graph, Var};
use super::params::{Initializer, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Identity,
}

impl Activation {
    fn apply<T: Scalar>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::Gelu => g.gelu(x),
            Activation::Identity => x,
        }
    }
}

/// y = x·W + b with W of shape (in, out).
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), init.fan_in_uniform(&[d_in, d_out], d_in))?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], T::one()))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Two-layer position-wise MLP with a GELU in between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        d: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, init, &format!("{name}.up"), d, hidden, true)?,
            down: Linear::new(store, init, &format!("{name}.down"), hidden, d, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.up.forward(g, store, x);
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }
}

/// Square-kernel convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let w = store.add(
            format!("{name}.w"),
            init.he_uniform(&[c_out, c_in, kernel, kernel], fan_in),
        )?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[c_out]))?;
        Ok(Self {
            w,
            b,
            stride,
            in_channels: c_in,
            out_channels: c_out,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, Some(b), self.stride)
    }
}

/// 3×3 convolution, pointwise nonlinearity, and stride-`s` down-sampling
/// (evaluated as a strided convolution, which is the same map).
#[derive(Clone, Debug)]
pub struct ConvStage {
    pub conv: Conv,
    pub activation: Activation,
}

impl ConvStage {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(store, init, name, c_in, c_out, 3, stride)?,
            activation: Activation::Gelu,
        })
    }

    pub fn stride(&self) -> usize {
        self.conv.stride
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let s = self.conv.stride;
        if shape.len() != 3 || shape[0] != self.conv.in_channels {
            return Err(Error::Shape(format!(
                "conv stage expects ({}, H, W), got {shape:?}",
                self.conv.in_channels
            )));
        }
        if s == 0 || shape[1] % s != 0 || shape[2] % s != 0 {
            return Err(Error::Shape(format!(
                "spatial size {}×{} is not divisible by stride {s}",
                shape[1], shape[2]
            )));
        }
        let y = self.conv.forward(g, store, x);
        Ok(self.activation.apply(g, y))
    }
}

/// U-Net decoder step: nearest ×2 up-sampling of the coarse map, channel
/// concatenation with the skip map, 3×3 convolution and GELU.
#[derive(Clone, Debug)]
pub struct UpsampleMerge {
    pub conv: Conv,
    pub low_channels: usize,
    pub skip_channels: usize,
}

impl UpsampleMerge {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        low_channels: usize,
        skip_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(
                store,
                init,
                name,
                low_channels + skip_channels,
                out_channels,
                3,
                1,
            )?,
            low_channels,
            skip_channels,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        low: Var,
        skip: Var,
    ) -> Result<Var> {
        let ls = g.shape(low).to_vec();
        let ss = g.shape(skip).to_vec();
        if ls.len() != 3 || ss.len() != 3 {
            return Err(Error::Shape("upsample_merge expects (C, H, W) maps".into()));
        }
        if ls[0] != self.low_channels || ss[0] != self.skip_channels {
            return Err(Error::Shape(format!(
                "upsample_merge channels: expected ({}, {}), got ({}, {})",
                self.low_channels, self.skip_channels, ls[0], ss[0]
            )));
        }
        if ss[1] != 2 * ls[1] || ss[2] != 2 * ls[2] {
            return Err(Error::Shape(format!(
                "skip map {}×{} is not twice the coarse map {}×{}",
                ss[1], ss[2], ls[1], ls[2]
            )));
        }
        let up = g.upsample_nearest(low, 2);
        let cat = g.concat(&[up, skip]);
        let y = self.conv.forward(g, store, cat);
        Ok(g.gelu(y))
    }
}

pub struct AttentionOutput {
    /// (n_q, d_v)
    pub output: Var,
    /// (n_q, n_k), rows sum to one.
    pub weights: Var,
}

/// softmax(QKᵀ/√d)·V. `allowed` marks attendable keys, per entry
/// (n_q·n_k) or per key (n_k); masked weights are exactly zero.
pub fn scaled_dot_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    allowed: Option<&[bool]>,
) -> Result<AttentionOutput> {
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(Error::Shape("attention operands must be matrices".into()));
    }
    let d = qs[1];
    if d == 0 || ks[1] != d {
        return Err(Error::Shape(format!(
            "query width {d} and key width {} must agree and be positive",
            ks[1]
        )));
    }
    if vs[0] != ks[0] {
        return Err(Error::Shape(format!(
            "{} keys but {} values",
            ks[0], vs[0]
        )));
    }
    let logits = g.matmul_bt(q, k);
    let logits = g.scale(logits, T::one() / T::lit(d as f64).sqrt());
    let weights = g.softmax_rows(logits, allowed)?;
    let output = g.matmul(weights, v);
    Ok(AttentionOutput { output, weights })
}

/// Multi-head attention with separate key and value inputs. The output
/// projection has no bias, so a zero value path contributes exactly zero.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub d_model: usize,
}

pub struct MultiHeadOutput {
    pub output: Var,
    /// Per head (n_q, n_k) weights.
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        d_query_in: usize,
        d_kv_in: usize,
        d_model: usize,
        d_out: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Invalid(format!(
                "{d_model} is not divisible into {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, init, &format!("{name}.q"), d_query_in, d_model, true)?,
            key: Linear::new(store, init, &format!("{name}.k"), d_kv_in, d_model, true)?,
            value: Linear::new(store, init, &format!("{name}.v"), d_kv_in, d_model, true)?,
            out: Linear::new(store, init, &format!("{name}.o"), d_model, d_out, false)?,
            heads,
            d_model,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        query_in: Var,
        key_in: Var,
        value_in: Var,
        allowed: Option<&[bool]>,
    ) -> Result<MultiHeadOutput> {
        let q = self.query.forward(g, store, query_in);
        let k = self.key.forward(g, store, key_in);
        let v = self.value.forward(g, store, value_in);
        let dh = self.d_model / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh),
                    g.slice_cols(k, h * dh, dh),
                    g.slice_cols(v, h * dh, dh),
                )
            };
            let att = scaled_dot_attention(g, qh, kh, vh, allowed)?;
            outs.push(att.output);
            weights.push(att.weights);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        };
        let output = self.out.forward(g, store, merged);
        Ok(MultiHeadOutput { output, weights })
    }
}

/// Fixed 2-D sinusoidal position features, shape (h·w, channels). The first
/// half of the channels encodes the row, the second half the column, on
/// normalized coordinates so the code is resolution independent.
pub fn sinusoid_2d<T: Scalar>(channels: usize, h: usize, w: usize) -> Tensor<T> {
    let half = channels / 2;
    let freqs = half / 2;
    let mut data = vec![T::zero(); h * w * channels];
    for y in 0..h {
        for x in 0..w {
            let row = &mut data[(y * w + x) * channels..(y * w + x + 1) * channels];
            let py = (y as f64 + 0.5) / h as f64;
            let px = (x as f64 + 0.5) / w as f64;
            for f in 0..freqs {
                let omega = std::f64::consts::PI * (f + 1) as f64;
                row[2 * f] = T::lit((omega * py).sin());
                row[2 * f + 1] = T::lit((omega * py).cos());
                row[half + 2 * f] = T::lit((omega * px).sin());
                row[half + 2 * f + 1] = T::lit((omega * px).cos());
            }
        }
    }
    Tensor::new(&[h * w, channels], data).expect("shape")
}

/// Flattens a (C, H, W) map into (H·W, C) position rows.
pub fn to_positions<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1] * s[2]]);
    g.transpose(flat)
}

/// Inverse of [`to_positions`].
pub fn from_positions<T: Scalar>(g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Var {
    let t = g.transpose(x);
    let c = g.shape(t)[0];
    g.reshape(t, &[c, h, w])
}
