use crate::config::{join_list, KeyValues};
use crate::diffkit::layers::to_positions;
use crate::diffkit::{
    sinusoid_2d, ConvStage, FeedForward, Graph, Initializer, LayerNorm, Linear,
    MultiHeadAttention, ParamId, ParamStore, Tensor, UpsampleMerge, Var,
};
use crate::error::{Error, Result};
use crate::locparse::{synthesize_report, LocationLabel};
use crate::scalar::Scalar;

/// Probability clamp of the region BCE.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct DetConfig {
    pub image_size: usize,
    /// Widths of the three backbone stages.
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    /// Channels of the fused map.
    pub fused: usize,
    /// Width of object predictions and queries.
    pub d_q: usize,
    pub n_queries: usize,
    pub heads: usize,
    pub decoder_layers: usize,
}

impl Default for DetConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            widths: vec![8, 16, 32],
            strides: vec![4, 2, 2],
            fused: 32,
            d_q: 64,
            n_queries: 10,
            heads: 4,
            decoder_layers: 2,
        }
    }
}

impl DetConfig {
    pub const KEYS: [&'static str; 8] = [
        "image_size",
        "widths",
        "strides",
        "fused",
        "d_q",
        "n_queries",
        "heads",
        "decoder_layers",
    ];

    pub fn reduction(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.widths.len() != 3 || self.strides.len() != 3 {
            return bad("detector backbone has exactly three stages".into());
        }
        if self.widths.contains(&0) || self.strides.contains(&0) {
            return bad("widths and strides must be positive".into());
        }
        if self.strides[2] != 2 {
            return bad("last backbone stride must be 2 for cross-scale fusion".into());
        }
        if self.image_size == 0 || self.image_size % self.reduction() != 0 {
            return bad(format!(
                "image size {} is not divisible by {}",
                self.image_size,
                self.reduction()
            ));
        }
        for (what, d) in [("widths[2]", self.widths[2]), ("fused", self.fused), ("d_q", self.d_q)] {
            if self.heads == 0 || d % self.heads != 0 {
                return bad(format!("{what} {d} is not divisible into {} heads", self.heads));
            }
        }
        if self.n_queries == 0 {
            return bad("need at least one object query".into());
        }
        Ok(())
    }

    pub fn to_kv(&self, kv: &mut KeyValues, prefix: &str) {
        kv.set(&format!("{prefix}image_size"), self.image_size);
        kv.set(&format!("{prefix}widths"), join_list(&self.widths));
        kv.set(&format!("{prefix}strides"), join_list(&self.strides));
        kv.set(&format!("{prefix}fused"), self.fused);
        kv.set(&format!("{prefix}d_q"), self.d_q);
        kv.set(&format!("{prefix}n_queries"), self.n_queries);
        kv.set(&format!("{prefix}heads"), self.heads);
        kv.set(&format!("{prefix}decoder_layers"), self.decoder_layers);
    }

    pub fn from_kv(kv: &KeyValues, prefix: &str) -> Result<Self> {
        let mut c = Self::default();
        kv.read(&format!("{prefix}image_size"), &mut c.image_size)?;
        kv.read_list(&format!("{prefix}widths"), &mut c.widths)?;
        kv.read_list(&format!("{prefix}strides"), &mut c.strides)?;
        kv.read(&format!("{prefix}fused"), &mut c.fused)?;
        kv.read(&format!("{prefix}d_q"), &mut c.d_q)?;
        kv.read(&format!("{prefix}n_queries"), &mut c.n_queries)?;
        kv.read(&format!("{prefix}heads"), &mut c.heads)?;
        kv.read(&format!("{prefix}decoder_layers"), &mut c.decoder_layers)?;
        c.validate()?;
        Ok(c)
    }
}

/// Region probabilities and their thresholded label.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorOutput {
    pub probabilities: [f64; 6],
    pub label: LocationLabel,
}

impl DetectorOutput {
    pub fn from_probabilities(probabilities: [f64; 6], tau: f64) -> Self {
        let mut bits = [false; 6];
        for (b, &p) in bits.iter_mut().zip(&probabilities) {
            *b = p >= tau;
        }
        Self {
            probabilities,
            label: LocationLabel::new(bits),
        }
    }
}

/// Location-based aggregation on the tape: for each region query q_r,
/// w = softmax(X·q_r) over object rows and A_r = wᵀX. Returns (A, W).
pub fn aggregate<T: Scalar>(g: &mut Graph<T>, x: Var, queries: Var) -> Result<(Var, Var)> {
    let xs = g.shape(x).to_vec();
    let qs = g.shape(queries).to_vec();
    if xs.len() != 2 || qs.len() != 2 || xs[1] != qs[1] {
        return Err(Error::Shape(format!(
            "aggregate: predictions {xs:?} and queries {qs:?} must share width"
        )));
    }
    let logits = g.matmul_bt(queries, x);
    let w = g.softmax_rows(logits, None)?;
    Ok((g.matmul(w, x), w))
}

/// Plain-value form of [`aggregate`].
pub fn aggregate_values<T: Scalar>(x: &Tensor<T>, queries: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let qv = g.input(queries.clone());
    let (a, _) = aggregate(&mut g, xv, qv)?;
    Ok(g.value(a).clone())
}

/// Mean BCE over the six regions with probabilities clamped to
/// [ε, 1−ε]. Targets must be 0 or 1.
pub fn bce_loss(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() || p.is_empty() {
        return Err(Error::Shape(format!("{} probabilities, {} targets", p.len(), y.len())));
    }
    if let Some(v) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Invalid(format!("target {v} is not binary")));
    }
    let total: f64 = p
        .iter()
        .zip(y)
        .map(|(&pv, &yv)| {
            let pc = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
            yv * pc.ln() + (1.0 - yv) * (1.0 - pc).ln()
        })
        .sum();
    Ok(-total / p.len() as f64)
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct Arch {
    stages: Vec<ConvStage>,
    intra_norm: LayerNorm,
    intra: MultiHeadAttention,
    intra_ln_ffn: LayerNorm,
    intra_ffn: FeedForward,
    ccfm: UpsampleMerge,
    memory: Linear,
    select: Linear,
    queries: ParamId,
    decoder: Vec<DecoderLayer>,
    out_norm: LayerNorm,
    region_queries: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

/// Graph handles of one detector pass.
pub struct DetTrace {
    /// (n_queries, d_q) object predictions.
    pub predictions: Var,
    /// (6, n_queries) aggregation weights.
    pub weights: Var,
    /// (6, d_q) aggregated features.
    pub aggregated: Var,
    /// (6) region probabilities.
    pub probabilities: Var,
    /// (N, 1) memory token scores used for query selection.
    pub token_scores: Var,
    /// (6) per-zone pooled token scores, trained by the auxiliary loss.
    pub zone_logits: Var,
}

/// Token cells of an h×w memory grid over a `side`-pixel image that
/// overlap each zone; (6, h·w) row-major flags.
pub fn zone_token_mask(side: usize, h: usize, w: usize) -> Vec<bool> {
    let layout = crate::data_forge::ZoneLayout::new(side);
    let (ch, cw) = (side / h, side / w);
    let mut out = vec![false; 6 * h * w];
    for (r, region) in crate::data_forge::LungRegion::ALL.iter().enumerate() {
        let z = layout.zone(*region);
        for i in 0..h {
            for j in 0..w {
                let (top, left) = (i * ch, j * cw);
                let overlaps = top < z.bottom && z.top < top + ch && left < z.right && z.left < left + cw;
                out[r * h * w + i * w + j] = overlaps;
            }
        }
    }
    out
}

/// Handles shared by [`Detector::detect_graph`] and [`Detector::trace`].
struct Decoded {
    predictions: Var,
    token_scores: Var,
    grid: (usize, usize),
}

/// Conv backbone, intra-scale self-attention, cross-scale fusion, and a
/// query decoder, followed by location aggregation and a per-region head.
#[derive(Clone, Debug)]
pub struct Detector<T: Scalar> {
    pub config: DetConfig,
    pub store: ParamStore<T>,
    arch: Arch,
}

impl<T: Scalar> Detector<T> {
    pub fn new(config: DetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let s = &mut store;
        let i = &mut init;
        let w = &config.widths;
        let mut stages = Vec::new();
        let mut c_in = 1;
        for (k, (&c, &st)) in w.iter().zip(&config.strides).enumerate() {
            stages.push(ConvStage::new(s, i, &format!("bb.{k}"), c_in, c, st)?);
            c_in = c;
        }
        let (d, h) = (config.d_q, config.heads);
        let c2 = w[2];
        let intra_norm = LayerNorm::new(s, "intra.norm", c2)?;
        let intra = MultiHeadAttention::new(s, i, "intra.attn", c2, c2, c2, c2, h)?;
        let intra_ln_ffn = LayerNorm::new(s, "intra.ln_ffn", c2)?;
        let intra_ffn = FeedForward::new(s, i, "intra.ffn", c2, 2 * c2)?;
        let ccfm = UpsampleMerge::new(s, i, "ccfm", c2, w[1], config.fused)?;
        let memory = Linear::new(s, i, "memory", config.fused, d, true)?;
        let select = Linear::new(s, i, "select", d, 1, true)?;
        let queries = s.add("queries", i.uniform(&[config.n_queries, d], 1.0))?;
        let decoder = (0..config.decoder_layers)
            .map(|k| {
                let n = format!("dec.{k}");
                Ok(DecoderLayer {
                    ln_self: LayerNorm::new(s, &format!("{n}.ln_self"), d)?,
                    self_attn: MultiHeadAttention::new(s, i, &format!("{n}.self"), d, d, d, d, h)?,
                    ln_cross: LayerNorm::new(s, &format!("{n}.ln_cross"), d)?,
                    cross: MultiHeadAttention::new(s, i, &format!("{n}.cross"), d, d, d, d, h)?,
                    ln_ffn: LayerNorm::new(s, &format!("{n}.ln_ffn"), d)?,
                    ffn: FeedForward::new(s, i, &format!("{n}.ffn"), d, 2 * d)?,
                })
            })
            .collect::<Result<_>>()?;
        let out_norm = LayerNorm::new(s, "out_norm", d)?;
        let region_queries = s.add("region_queries", i.uniform(&[6, d], 1.0))?;
        let head_w = s.add("head.w", i.fan_in_uniform(&[6, d], d))?;
        let head_b = s.add("head.b", Tensor::zeros(&[6]))?;
        Ok(Self {
            config,
            store,
            arch: Arch {
                stages,
                intra_norm,
                intra,
                intra_ln_ffn,
                intra_ffn,
                ccfm,
                memory,
                select,
                queries,
                decoder,
                out_norm,
                region_queries,
                head_w,
                head_b,
            },
        })
    }

    pub fn cast<U: Scalar>(&self) -> Detector<U> {
        Detector {
            config: self.config.clone(),
            store: self.store.cast(),
            arch: self.arch.clone(),
        }
    }

    pub fn image_tensor(&self, image: &[T]) -> Result<Tensor<T>> {
        let side = (image.len() as f64).sqrt().round() as usize;
        if side == 0 || side * side != image.len() {
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

    /// Object predictions X of shape (n_queries, d_q).
    pub fn detect_graph(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var) -> Result<Var> {
        Ok(self.decode(g, store, image)?.predictions)
    }

    fn decode(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var) -> Result<Decoded> {
        let a = &self.arch;
        let mut maps = Vec::new();
        let mut h = image;
        for st in &a.stages {
            h = st.forward(g, store, h)?;
            maps.push(h);
        }
        // Intra-scale interaction on the coarsest map.
        let s = g.shape(maps[2]).to_vec();
        let pos = to_positions(g, maps[2]);
        let pe = g.input(sinusoid_2d(s[0], s[1], s[2]));
        let n = a.intra_norm.forward(g, store, pos);
        let qk = g.add(n, pe);
        let att = a.intra.forward(g, store, qk, qk, n, None)?;
        let x = g.add(pos, att.output);
        let n = a.intra_ln_ffn.forward(g, store, x);
        let f = a.intra_ffn.forward(g, store, n);
        let x = g.add(x, f);
        let coarse = crate::diffkit::layers::from_positions(g, x, s[1], s[2]);
        // Cross-scale fusion with the middle stage.
        let fused = a.ccfm.forward(g, store, coarse, maps[1])?;
        let fs = g.shape(fused).to_vec();
        let fpos = to_positions(g, fused);
        let mem = a.memory.forward(g, store, fpos);
        let mpe = g.input(sinusoid_2d(self.config.d_q, fs[1], fs[2]));
        let mem_k = g.add(mem, mpe);
        // Query selection: the best-scoring memory tokens, gated by their
        // score, are added to the learned queries.
        let scores = a.select.forward(g, store, mem);
        let k = self.config.n_queries;
        if fs[1] * fs[2] < k {
            return Err(Error::Shape(format!(
                "{}x{} memory tokens cannot seed {k} queries",
                fs[1], fs[2]
            )));
        }
        let sv = g.value(scores).data();
        let mut order: Vec<usize> = (0..sv.len()).collect();
        order.sort_by(|&x, &y| sv[y].as_f64().total_cmp(&sv[x].as_f64()).then(x.cmp(&y)));
        order.truncate(k);
        let picked = g.gather(mem_k, &order);
        let gate = g.gather(scores, &order);
        let gate = g.sigmoid(gate);
        let ones = g.input(Tensor::full(&[1, self.config.d_q], T::one()));
        let gate = g.matmul(gate, ones);
        let seeded = g.mul(picked, gate);
        let learned = g.param(store, a.queries);
        let mut q = g.add(learned, seeded);
        for layer in &a.decoder {
            let n = layer.ln_self.forward(g, store, q);
            let sa = layer.self_attn.forward(g, store, n, n, n, None)?;
            q = g.add(q, sa.output);
            let n = layer.ln_cross.forward(g, store, q);
            let ca = layer.cross.forward(g, store, n, mem_k, mem, None)?;
            q = g.add(q, ca.output);
            let n = layer.ln_ffn.forward(g, store, q);
            let f = layer.ffn.forward(g, store, n);
            q = g.add(q, f);
        }
        Ok(Decoded {
            predictions: a.out_norm.forward(g, store, q),
            token_scores: scores,
            grid: (fs[1], fs[2]),
        })
    }

    /// Soft maximum of the token scores inside each zone: (6) logits.
    fn zone_logits(&self, g: &mut Graph<T>, scores: Var, side: usize, grid: (usize, usize)) -> Result<Var> {
        let mask = zone_token_mask(side, grid.0, grid.1);
        let row = g.transpose(scores);
        let ones = g.input(Tensor::full(&[6, 1], T::one()));
        let rows = g.matmul(ones, row);
        let w = g.softmax_rows(rows, Some(&mask))?;
        let pooled = g.mul(w, rows);
        Ok(g.sum_rows(pooled))
    }

    pub fn trace(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var) -> Result<DetTrace> {
        let side = g.shape(image)[1];
        let d = self.decode(g, store, image)?;
        let x = d.predictions;
        let rq = g.param(store, self.arch.region_queries);
        let (agg, weights) = aggregate(g, x, rq)?;
        let probabilities = self.head_graph(g, store, agg);
        let zone_logits = self.zone_logits(g, d.token_scores, side, d.grid)?;
        Ok(DetTrace {
            predictions: x,
            weights,
            aggregated: agg,
            probabilities,
            token_scores: d.token_scores,
            zone_logits,
        })
    }

    /// p_r = sigmoid(⟨A_r, w_r⟩ + b_r)
    pub fn head_graph(&self, g: &mut Graph<T>, store: &ParamStore<T>, agg: Var) -> Var {
        let w = g.param(store, self.arch.head_w);
        let b = g.param(store, self.arch.head_b);
        let prod = g.mul(agg, w);
        let logits = g.sum_rows(prod);
        let logits = g.add(logits, b);
        g.sigmoid(logits)
    }

    /// Region BCE of the head, plus the same targets on the zone-pooled
    /// token scores so that query selection learns where lesions are.
    pub fn loss_graph(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: Var,
        label: &LocationLabel,
    ) -> Result<Var> {
        let tr = self.trace(g, store, image)?;
        let y: Vec<T> = label.targets().iter().map(|&v| T::lit(v)).collect();
        let main = g.bce_prob(tr.probabilities, &y, T::lit(BCE_EPS));
        let aux = g.bce_logits(tr.zone_logits, &y);
        Ok(g.add(main, aux))
    }

    pub fn detect(&self, image: &[T]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.input(self.image_tensor(image)?);
        let out = self.detect_graph(&mut g, &self.store, x)?;
        Ok(g.value(out).clone())
    }

    pub fn region_queries(&self) -> &Tensor<T> {
        self.store.value(self.arch.region_queries)
    }

    pub fn probabilities(&self, image: &[T]) -> Result<[f64; 6]> {
        let mut g = Graph::new();
        let x = g.input(self.image_tensor(image)?);
        let tr = self.trace(&mut g, &self.store, x)?;
        let p = g.value(tr.probabilities);
        p.ensure_finite("region probabilities")?;
        let mut out = [0.0; 6];
        for (o, v) in out.iter_mut().zip(p.data()) {
            *o = v.as_f64();
        }
        Ok(out)
    }

    pub fn predict_labels(&self, image: &[T], tau: f64) -> Result<DetectorOutput> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::Invalid(format!("threshold {tau} is outside (0, 1)")));
        }
        Ok(DetectorOutput::from_probabilities(self.probabilities(image)?, tau))
    }

    pub fn generate_report(&self, image: &[T], tau: f64) -> Result<String> {
        Ok(synthesize_report(&self.predict_labels(image, tau)?.label))
    }
}
