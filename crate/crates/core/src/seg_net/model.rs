use super::text::{TextEncoder, TextMemory};
use super::tokenizer::{TokenSequence, Tokenizer};
use crate::config::{join_list, KeyValues};
use crate::diffkit::layers::{from_positions, to_positions};
use crate::diffkit::{
    sinusoid_2d, Conv, ConvStage, Graph, Initializer, LayerNorm, MultiHeadAttention, ParamStore,
    Tensor, UpsampleMerge, Var,
};
use crate::error::{Error, Result};
use crate::locparse::{FILLER_WORDS, LOCATION_WORDS};
use crate::scalar::Scalar;

/// Channels of the full-resolution refinement convolution.
const REFINE_WIDTH: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct SegConfig {
    pub image_size: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub text_dim: usize,
    pub heads: usize,
    pub max_tokens: usize,
    pub text_layers: usize,
    /// Inner width of the decoder's cross-modal attention.
    pub attn_dim: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            widths: vec![8, 16, 32, 64],
            strides: vec![4, 2, 2, 2],
            text_dim: 32,
            heads: 4,
            max_tokens: 24,
            text_layers: 2,
            attn_dim: 32,
        }
    }
}

impl SegConfig {
    pub const KEYS: [&'static str; 8] = [
        "image_size",
        "widths",
        "strides",
        "text_dim",
        "heads",
        "max_tokens",
        "text_layers",
        "attn_dim",
    ];

    /// Total down-sampling factor of the encoder.
    pub fn reduction(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.widths.len() != self.strides.len() || self.widths.len() < 2 {
            return bad("segmenter needs matching widths and strides, at least two stages".into());
        }
        if self.widths.windows(2).any(|w| w[1] < w[0]) || self.widths.contains(&0) {
            return bad(format!("stage widths {:?} must be positive and non-decreasing", self.widths));
        }
        if self.strides.contains(&0) {
            return bad("strides must be positive".into());
        }
        if self.image_size == 0 || self.image_size % self.reduction() != 0 {
            return bad(format!(
                "image size {} is not divisible by {}",
                self.image_size,
                self.reduction()
            ));
        }
        for (what, d) in [("text_dim", self.text_dim), ("attn_dim", self.attn_dim)] {
            if self.heads == 0 || d == 0 || d % self.heads != 0 {
                return bad(format!("{what} {d} is not divisible into {} heads", self.heads));
            }
        }
        if self.max_tokens < 1 {
            return bad("max_tokens must be at least 1".into());
        }
        Ok(())
    }

    pub fn to_kv(&self, kv: &mut KeyValues, prefix: &str) {
        kv.set(&format!("{prefix}image_size"), self.image_size);
        kv.set(&format!("{prefix}widths"), join_list(&self.widths));
        kv.set(&format!("{prefix}strides"), join_list(&self.strides));
        kv.set(&format!("{prefix}text_dim"), self.text_dim);
        kv.set(&format!("{prefix}heads"), self.heads);
        kv.set(&format!("{prefix}max_tokens"), self.max_tokens);
        kv.set(&format!("{prefix}text_layers"), self.text_layers);
        kv.set(&format!("{prefix}attn_dim"), self.attn_dim);
    }

    pub fn from_kv(kv: &KeyValues, prefix: &str) -> Result<Self> {
        let mut c = Self::default();
        kv.read(&format!("{prefix}image_size"), &mut c.image_size)?;
        kv.read_list(&format!("{prefix}widths"), &mut c.widths)?;
        kv.read_list(&format!("{prefix}strides"), &mut c.strides)?;
        kv.read(&format!("{prefix}text_dim"), &mut c.text_dim)?;
        kv.read(&format!("{prefix}heads"), &mut c.heads)?;
        kv.read(&format!("{prefix}max_tokens"), &mut c.max_tokens)?;
        kv.read(&format!("{prefix}text_layers"), &mut c.text_layers)?;
        kv.read(&format!("{prefix}attn_dim"), &mut c.attn_dim)?;
        c.validate()?;
        Ok(c)
    }
}

/// Encoder feature maps, finest first; each is (C, H, W).
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    pub stages: Vec<Tensor<T>>,
    /// (1, S, S) input, reused by the full-resolution refinement.
    pub image: Tensor<T>,
}

/// Per-pixel logits at input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SegLogits<T> {
    pub height: usize,
    pub width: usize,
    pub logits: Vec<T>,
}

impl<T: Scalar> SegLogits<T> {
    pub fn probabilities(&self) -> Vec<T> {
        self.logits
            .iter()
            .map(|&x| crate::diffkit::kernels::sigmoid(x))
            .collect()
    }

    /// Binary mask of sigmoid(logit) ≥ threshold.
    pub fn binarize(&self, threshold: f64) -> Vec<u8> {
        self.probabilities()
            .iter()
            .map(|p| (p.as_f64() >= threshold) as u8)
            .collect()
    }
}

/// Attention mass per report token at the coarsest decoder stage.
#[derive(Clone, Debug, PartialEq)]
pub struct WordImportance {
    pub tokens: Vec<String>,
    pub scores: Vec<f64>,
}

impl WordImportance {
    fn mean_over(&self, set: &[&str]) -> Option<f64> {
        let picked: Vec<f64> = self
            .tokens
            .iter()
            .zip(&self.scores)
            .filter(|(t, _)| set.contains(&t.as_str()))
            .map(|(_, &s)| s)
            .collect();
        (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
    }

    /// Mean score of location words and of filler words, when both occur.
    pub fn location_vs_filler(&self) -> Option<(f64, f64)> {
        Some((self.mean_over(&LOCATION_WORDS)?, self.mean_over(&FILLER_WORDS)?))
    }
}

#[derive(Clone, Debug)]
struct DecoderStep {
    norm: LayerNorm,
    cross: MultiHeadAttention,
    merge: Option<UpsampleMerge>,
}

/// Parameter layout of the segmenter, independent of the scalar type.
#[derive(Clone, Debug)]
struct Arch {
    stages: Vec<ConvStage>,
    text: TextEncoder,
    /// Coarsest first.
    decoder: Vec<DecoderStep>,
    head: Conv,
    refine: [Conv; 2],
}

/// Language-guided U-Net: conv encoder, transformer text encoder, and a
/// decoder whose pixel features attend to the report tokens at every scale.
#[derive(Clone, Debug)]
pub struct SegNet<T: Scalar> {
    pub config: SegConfig,
    pub store: ParamStore<T>,
    pub tokenizer: Tokenizer,
    arch: Arch,
}

/// Graph handles of one forward pass.
pub struct SegTrace {
    pub logits: Var,
    pub pyramid: Vec<Var>,
    pub text: Var,
    /// Cross-attention weights per decoder step (coarsest first), per head.
    pub cross_weights: Vec<Vec<Var>>,
    /// (h, w) of each decoder step.
    pub step_sizes: Vec<(usize, usize)>,
}

impl<T: Scalar> SegNet<T> {
    pub fn new(config: SegConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let tokenizer = Tokenizer::new(config.max_tokens);
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let w = &config.widths;
        let mut stages = Vec::new();
        let mut c_in = 1;
        for (i, (&c, &s)) in w.iter().zip(&config.strides).enumerate() {
            stages.push(ConvStage::new(&mut store, &mut init, &format!("enc.{i}"), c_in, c, s)?);
            c_in = c;
        }
        let text = TextEncoder::new(
            &mut store,
            &mut init,
            "text",
            tokenizer.vocab_size(),
            config.max_tokens,
            config.text_dim,
            config.heads,
            config.text_layers,
        )?;
        let n = w.len();
        let mut decoder = Vec::new();
        for s in (0..n).rev() {
            // After merging, the feature width at step s is w[s].
            let name = format!("dec.{s}");
            decoder.push(DecoderStep {
                norm: LayerNorm::new(&mut store, &format!("{name}.norm"), w[s])?,
                cross: MultiHeadAttention::new(
                    &mut store,
                    &mut init,
                    &format!("{name}.cross"),
                    w[s],
                    config.text_dim,
                    config.attn_dim,
                    w[s],
                    config.heads,
                )?,
                merge: if s > 0 {
                    Some(UpsampleMerge::new(
                        &mut store,
                        &mut init,
                        &format!("{name}.merge"),
                        w[s],
                        w[s - 1],
                        w[s - 1],
                    )?)
                } else {
                    None
                },
            });
        }
        let head = Conv::new(&mut store, &mut init, "head", w[0], 1, 3, 1)?;
        let refine = [
            Conv::new(&mut store, &mut init, "refine.0", 2, REFINE_WIDTH, 3, 1)?,
            Conv::new(&mut store, &mut init, "refine.1", REFINE_WIDTH, 1, 3, 1)?,
        ];
        Ok(Self {
            config,
            store,
            tokenizer,
            arch: Arch {
                stages,
                text,
                decoder,
                head,
                refine,
            },
        })
    }

    pub fn cast<U: Scalar>(&self) -> SegNet<U> {
        SegNet {
            config: self.config.clone(),
            store: self.store.cast(),
            tokenizer: self.tokenizer.clone(),
            arch: self.arch.clone(),
        }
    }

    pub fn tokenize(&self, report: &str) -> TokenSequence {
        self.tokenizer.encode(report)
    }

    /// Wraps a row-major square image as a (1, S, S) tensor after checking
    /// the side length.
    pub fn image_tensor(&self, image: &[T]) -> Result<Tensor<T>> {
        let side = (image.len() as f64).sqrt().round() as usize;
        if side * side != image.len() || side == 0 {
            return Err(Error::Shape(format!("{} pixels is not a square image", image.len())));
        }
        if side % self.config.reduction() != 0 {
            return Err(Error::Shape(format!(
                "image side {side} is not divisible by {}",
                self.config.reduction()
            )));
        }
        Tensor::new(&[1, side, side], image.to_vec())
    }

    fn encode_image_graph(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Vec<Var>> {
        let mut maps = Vec::new();
        let mut h = x;
        for st in &self.arch.stages {
            h = st.forward(g, store, h)?;
            maps.push(h);
        }
        Ok(maps)
    }

    fn decode_graph(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: Var,
        pyramid: &[Var],
        text: Var,
        mask: &[bool],
    ) -> Result<(Var, Vec<Vec<Var>>, Vec<(usize, usize)>)> {
        let n = pyramid.len();
        let mut x = pyramid[n - 1];
        let mut weights = Vec::new();
        let mut sizes = Vec::new();
        for (k, step) in self.arch.decoder.iter().enumerate() {
            let s = n - 1 - k;
            let shape = g.shape(x).to_vec();
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            let pos = to_positions(g, x);
            let normed = step.norm.forward(g, store, pos);
            let pe = g.input(sinusoid_2d(c, h, w));
            let q = g.add(normed, pe);
            let att = step.cross.forward(g, store, q, text, text, Some(mask))?;
            let fused = g.add(pos, att.output);
            x = from_positions(g, fused, h, w);
            weights.push(att.weights);
            sizes.push((h, w));
            if let Some(merge) = &step.merge {
                x = merge.forward(g, store, x, pyramid[s - 1])?;
            }
        }
        let y = self.arch.head.forward(g, store, x);
        let coarse = g.upsample_bilinear(y, self.config.strides[0]);
        // Residual correction at input resolution from the logit and the pixels.
        let both = g.concat(&[coarse, image]);
        let r = self.arch.refine[0].forward(g, store, both);
        let r = g.gelu(r);
        let r = self.arch.refine[1].forward(g, store, r);
        let logits = g.add(coarse, r);
        Ok((logits, weights, sizes))
    }

    /// Full forward pass on graph leaves, using `store` for parameters.
    pub fn trace(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: Var,
        tokens: &TokenSequence,
    ) -> Result<SegTrace> {
        let pyramid = self.encode_image_graph(g, store, image)?;
        let text = self.arch.text.forward(g, store, tokens)?;
        let (logits, cross_weights, step_sizes) =
            self.decode_graph(g, store, image, &pyramid, text, &tokens.mask)?;
        Ok(SegTrace {
            logits,
            pyramid,
            text,
            cross_weights,
            step_sizes,
        })
    }

    /// Dice plus pixel BCE of the logits against a {0,1} mask.
    pub fn loss_graph(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: Var,
        tokens: &TokenSequence,
        target: &[T],
        weights: (f64, f64),
    ) -> Result<Var> {
        let tr = self.trace(g, store, image, tokens)?;
        let dice = g.dice_loss(tr.logits, target, T::one());
        let bce = g.bce_logits(tr.logits, target);
        let dice = g.scale(dice, T::lit(weights.0));
        let bce = g.scale(bce, T::lit(weights.1));
        Ok(g.add(dice, bce))
    }

    pub fn encode_image(&self, image: &[T]) -> Result<FeaturePyramid<T>> {
        let mut g = Graph::new();
        let x = g.input(self.image_tensor(image)?);
        let maps = self.encode_image_graph(&mut g, &self.store, x)?;
        Ok(FeaturePyramid {
            stages: maps.iter().map(|&m| g.value(m).clone()).collect(),
            image: g.value(x).clone(),
        })
    }

    pub fn encode_text(&self, report: &str) -> Result<TextMemory<T>> {
        let seq = self.tokenize(report);
        let mut g = Graph::new();
        let t = self.arch.text.forward(&mut g, &self.store, &seq)?;
        let pooled = g.masked_mean_rows(t, &seq.mask);
        Ok(TextMemory {
            tokens: g.value(t).clone(),
            pooled: g.value(pooled).clone(),
            mask: seq.mask,
        })
    }

    pub fn guided_decode(&self, pyramid: &FeaturePyramid<T>, text: &TextMemory<T>) -> Result<SegLogits<T>> {
        if pyramid.stages.len() != self.arch.stages.len() {
            return Err(Error::Shape(format!(
                "pyramid has {} stages, model expects {}",
                pyramid.stages.len(),
                self.arch.stages.len()
            )));
        }
        let mut g = Graph::new();
        let maps: Vec<Var> = pyramid.stages.iter().map(|m| g.input(m.clone())).collect();
        let image = g.input(pyramid.image.clone());
        let t = g.input(text.tokens.clone());
        let (logits, _, _) = self.decode_graph(&mut g, &self.store, image, &maps, t, &text.mask)?;
        Ok(self.logits_of(&g, logits))
    }

    fn logits_of(&self, g: &Graph<T>, logits: Var) -> SegLogits<T> {
        let s = g.shape(logits);
        SegLogits {
            height: s[1],
            width: s[2],
            logits: g.value(logits).data().to_vec(),
        }
    }

    fn run(&self, image: &[T], report: &str) -> Result<(Graph<T>, SegTrace, TokenSequence)> {
        let seq = self.tokenize(report);
        let mut g = Graph::new();
        let x = g.input(self.image_tensor(image)?);
        let tr = self.trace(&mut g, &self.store, x, &seq)?;
        g.value(tr.logits).ensure_finite("segmentation logits")?;
        Ok((g, tr, seq))
    }

    pub fn segment(&self, image: &[T], report: &str) -> Result<SegLogits<T>> {
        let (g, tr, _) = self.run(image, report)?;
        Ok(self.logits_of(&g, tr.logits))
    }

    /// Segmentation plus the two attention read-outs, from one forward pass.
    pub fn segment_with_attention(
        &self,
        image: &[T],
        report: &str,
    ) -> Result<(SegLogits<T>, WordImportance, AttentionField)> {
        let (g, tr, seq) = self.run(image, report)?;
        let wi = self.importance_from(&g, &tr, &seq, report);
        let field = self.field_from(&g, &tr, &seq);
        Ok((self.logits_of(&g, tr.logits), wi, field))
    }

    /// Attention of the coarsest decoder step, averaged over pixels and
    /// heads, restricted to the report tokens and renormalized.
    pub fn word_importance(&self, image: &[T], report: &str) -> Result<WordImportance> {
        let (g, tr, seq) = self.run(image, report)?;
        Ok(self.importance_from(&g, &tr, &seq, report))
    }

    fn importance_from(&self, g: &Graph<T>, tr: &SegTrace, seq: &TokenSequence, report: &str) -> WordImportance {
        let tokens = self.tokenizer.report_tokens(report);
        let l = seq.len();
        let mut mass = vec![0.0; l];
        for &w in &tr.cross_weights[0] {
            let data = g.value(w).data();
            for row in data.chunks(l) {
                for (m, v) in mass.iter_mut().zip(row) {
                    *m += v.as_f64();
                }
            }
        }
        let real = &mass[1..1 + tokens.len()];
        let total: f64 = real.iter().sum();
        let scores = if total > 0.0 {
            real.iter().map(|m| m / total).collect()
        } else {
            vec![1.0 / tokens.len().max(1) as f64; tokens.len()]
        };
        WordImportance { tokens, scores }
    }

    /// Per-pixel attention mass on the report tokens at the finest decoder
    /// step, averaged over heads and repeated up to input resolution.
    pub fn attention_field(&self, image: &[T], report: &str) -> Result<AttentionField> {
        let (g, tr, seq) = self.run(image, report)?;
        Ok(self.field_from(&g, &tr, &seq))
    }

    fn field_from(&self, g: &Graph<T>, tr: &SegTrace, seq: &TokenSequence) -> AttentionField {
        let last = tr.cross_weights.len() - 1;
        let (h, w) = tr.step_sizes[last];
        let l = seq.len();
        let heads = tr.cross_weights[last].len() as f64;
        let mut coarse = vec![0.0; h * w];
        for &wv in &tr.cross_weights[last] {
            for (p, row) in g.value(wv).data().chunks(l).enumerate() {
                coarse[p] += row[1..].iter().map(|v| v.as_f64()).sum::<f64>() / heads;
            }
        }
        let f = self.config.strides[0];
        let (oh, ow) = (h * f, w * f);
        let values = (0..oh * ow)
            .map(|i| coarse[(i / ow / f) * w + (i % ow) / f])
            .collect();
        AttentionField {
            height: oh,
            width: ow,
            values,
        }
    }

    /// Zeroes the value projections of every decoder cross-attention, which
    /// cuts the text path.
    pub fn zero_text_values(&mut self) {
        for p in self.store.iter_mut() {
            if p.name.starts_with("dec.") && p.name.contains(".cross.v.") {
                p.value.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionField {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}
