use super::params::{Init, ParamId, ParamStore, Pass};
use crate::error::Result;
use crate::tensor::{Tensor, Var};

pub const NORM_EPS: f32 = 1e-5;

/// Affine map `x·W + b` with `W[in×out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(&format!("{name}.w"), init.normal(&[fan_in, fan_out]));
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Linear { w, b }
    }

    pub fn forward(&self, pass: &mut Pass, x: Var) -> Result<Var> {
        let (w, b) = (pass.p(self.w), pass.p(self.b));
        pass.tape.linear(x, w, b)
    }

    pub fn param_count(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(&[dim]));
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, pass: &mut Pass, x: Var) -> Result<Var> {
        let (g, b) = (pass.p(self.gamma), pass.p(self.beta));
        pass.tape.layer_norm(x, g, b, NORM_EPS)
    }
}

/// Multi-head self-attention with separate query/key/value projections
/// to `heads·head_dim` and an output projection back to the model width.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, heads: usize, head_dim: usize) -> Self {
        let inner = heads * head_dim;
        let proj = |store: &mut ParamStore, init: &mut Init, tag: &str| {
            let w = store.add(&format!("{name}.w{tag}"), init.normal(&[dim, inner]));
            let b = store.add(&format!("{name}.b{tag}"), Tensor::zeros(&[inner]));
            Linear { w, b }
        };
        let query = proj(store, init, "q");
        let key = proj(store, init, "k");
        let value = proj(store, init, "v");
        let w = store.add(&format!("{name}.wo"), init.normal(&[inner, dim]));
        let b = store.add(&format!("{name}.bo"), Tensor::zeros(&[dim]));
        SelfAttention { query, key, value, out: Linear { w, b }, heads, head_dim }
    }

    /// Returns the projected output and the attention node (whose
    /// probabilities can be read back from the tape).
    pub fn forward(&self, pass: &mut Pass, x: Var) -> Result<(Var, Var)> {
        let q = self.query.forward(pass, x)?;
        let k = self.key.forward(pass, x)?;
        let v = self.value.forward(pass, x)?;
        let attn = pass.tape.attention(q, k, v, self.heads, self.head_dim, pass.dropout.as_mut())?;
        Ok((self.out.forward(pass, attn)?, attn))
    }

    pub fn param_count(dim: usize, heads: usize, head_dim: usize) -> usize {
        let inner = heads * head_dim;
        3 * Linear::param_count(dim, inner) + Linear::param_count(inner, dim)
    }
}

/// Post-norm transformer block:
/// `x ← norm1(x + attn(x))`, `x ← norm2(x + ffn(x))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attn: SelfAttention,
    pub norm1: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm2: LayerNorm,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
        head_dim: usize,
        ffn_dim: usize,
    ) -> Self {
        EncoderBlock {
            attn: SelfAttention::new(store, init, &format!("{name}.attn"), dim, heads, head_dim),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            ffn_in: Linear::new(store, init, &format!("{name}.ffn.in"), dim, ffn_dim),
            ffn_out: Linear::new(store, init, &format!("{name}.ffn.out"), ffn_dim, dim),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
        }
    }

    pub fn forward(&self, pass: &mut Pass, x: Var) -> Result<(Var, Var)> {
        let (a, attn) = self.attn.forward(pass, x)?;
        let h = pass.tape.add(x, a)?;
        let h = self.norm1.forward(pass, h)?;
        let f = self.ffn_in.forward(pass, h)?;
        let f = pass.tape.gelu(f);
        let f = self.ffn_out.forward(pass, f)?;
        let f = pass.tape.dropout(f, pass.dropout.as_mut());
        let y = pass.tape.add(h, f)?;
        Ok((self.norm2.forward(pass, y)?, attn))
    }

    pub fn param_count(dim: usize, heads: usize, head_dim: usize, ffn_dim: usize) -> usize {
        SelfAttention::param_count(dim, heads, head_dim)
            + Linear::param_count(dim, ffn_dim)
            + Linear::param_count(ffn_dim, dim)
            + 4 * dim
    }
}

/// Stack of encoder blocks.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub blocks: Vec<EncoderBlock>,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        layers: usize,
        dim: usize,
        heads: usize,
        head_dim: usize,
        ffn_dim: usize,
    ) -> Self {
        let blocks = (0..layers)
            .map(|i| EncoderBlock::new(store, init, &format!("{name}.block{i}"), dim, heads, head_dim, ffn_dim))
            .collect();
        Encoder { blocks }
    }

    /// Runs every block; returns the output tokens and each block's
    /// attention node.
    pub fn forward(&self, pass: &mut Pass, mut x: Var) -> Result<(Var, Vec<Var>)> {
        let mut attn = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, a) = block.forward(pass, x)?;
            x = y;
            attn.push(a);
        }
        Ok((x, attn))
    }
}
