use super::tokenizer::TokenSequence;
use crate::diffkit::{
    FeedForward, Graph, Initializer, LayerNorm, MultiHeadAttention, ParamId, ParamStore, Tensor,
    Var,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
struct TextLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

/// Token plus position embeddings followed by pre-norm transformer layers.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    tok: ParamId,
    pos: ParamId,
    layers: Vec<TextLayer>,
    ln_f: LayerNorm,
    pub dim: usize,
    pub max_len: usize,
}

impl TextEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        vocab: usize,
        max_len: usize,
        dim: usize,
        heads: usize,
        layers: usize,
    ) -> Result<Self> {
        let tok = store.add(format!("{name}.tok"), init.uniform(&[vocab, dim], 0.5))?;
        let pos = store.add(format!("{name}.pos"), init.uniform(&[max_len, dim], 0.1))?;
        let layers = (0..layers)
            .map(|i| {
                let n = format!("{name}.layer{i}");
                Ok(TextLayer {
                    ln1: LayerNorm::new(store, &format!("{n}.ln1"), dim)?,
                    attn: MultiHeadAttention::new(
                        store,
                        init,
                        &format!("{n}.attn"),
                        dim,
                        dim,
                        dim,
                        dim,
                        heads,
                    )?,
                    ln2: LayerNorm::new(store, &format!("{n}.ln2"), dim)?,
                    ffn: FeedForward::new(store, init, &format!("{n}.ffn"), dim, 2 * dim)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            tok,
            pos,
            layers,
            ln_f: LayerNorm::new(store, &format!("{name}.ln_f"), dim)?,
            dim,
            max_len,
        })
    }

    /// (L, d) token memory. Padded rows are computed but never attended to.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        seq: &TokenSequence,
    ) -> Result<Var> {
        if seq.len() != self.max_len {
            return Err(Error::Shape(format!(
                "token sequence of length {}, expected {}",
                seq.len(),
                self.max_len
            )));
        }
        let table = g.param(store, self.tok);
        let pos = g.param(store, self.pos);
        let emb = g.gather(table, &seq.ids);
        let mut x = g.add(emb, pos);
        for layer in &self.layers {
            let h = layer.ln1.forward(g, store, x);
            let a = layer.attn.forward(g, store, h, h, h, Some(&seq.mask))?;
            x = g.add(x, a.output);
            let h = layer.ln2.forward(g, store, x);
            let f = layer.ffn.forward(g, store, h);
            x = g.add(x, f);
        }
        Ok(self.ln_f.forward(g, store, x))
    }
}

/// Per-token embeddings of a report and their masked mean.
#[derive(Clone, Debug, PartialEq)]
pub struct TextMemory<T> {
    pub tokens: Tensor<T>,
    pub pooled: Tensor<T>,
    pub mask: Vec<bool>,
}
