//! The actigraphy transformer: patching, patch embedding, fixed positional
//! embeddings and the encoder stack.

mod config;
mod layers;
mod params;

pub use config::{EmbedMode, KvMap, ModelConfig, SizeTag, WEEK_MINUTES};
pub use layers::{Encoder, EncoderBlock, LayerNorm, Linear, SelfAttention, NORM_EPS};
pub use params::{Init, Optimizer, ParamId, ParamStore, Pass};

use crate::error::{contract_err, shape_err, Result};
use crate::tensor::{Tape, Tensor, Var};

/// A series cut into non-overlapping patches, one row per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    patch_size: usize,
    data: Vec<f32>,
}

impl PatchSequence {
    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.data.len() / self.patch_size
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.patch_size..(i + 1) * self.patch_size]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks(self.patch_size)
    }

    /// Rows in order, concatenated back into the series.
    pub fn as_flat(&self) -> &[f32] {
        &self.data
    }

    /// Copies the selected rows into a `[rows.len() × S]` buffer.
    pub fn gather(&self, rows: &[usize]) -> Vec<f32> {
        let mut out = Vec::with_capacity(rows.len() * self.patch_size);
        for &r in rows {
            out.extend_from_slice(self.row(r));
        }
        out
    }
}

/// Splits `series` into `series.len() / patch_size` consecutive patches.
pub fn patchify(series: &[f32], patch_size: usize) -> Result<PatchSequence> {
    if patch_size == 0 || series.is_empty() || !series.len().is_multiple_of(patch_size) {
        return contract_err(format!(
            "series of length {} is not divisible into patches of {patch_size}",
            series.len()
        ));
    }
    Ok(PatchSequence { patch_size, data: series.to_vec() })
}

/// Fixed sinusoidal table: `PE[pos, 2i] = sin(pos / 10000^(2i/D))`,
/// `PE[pos, 2i+1] = cos(pos / 10000^(2i/D))`. Row-major `[count × dim]`.
pub fn positional_embedding(count: usize, dim: usize) -> Result<Vec<f32>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return contract_err(format!("positional embedding width {dim} must be even"));
    }
    let mut out = vec![0.0f32; count * dim];
    for pos in 0..count {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
            out[pos * dim + 2 * i] = angle.sin() as f32;
            out[pos * dim + 2 * i + 1] = angle.cos() as f32;
        }
    }
    Ok(out)
}

/// Maps each patch to a `D`-dimensional token.
#[derive(Clone, Debug)]
pub enum PatchEmbedding {
    /// One shared affine map `S → D`.
    Linear(Linear),
    /// Two same-padded kernel-3 convolutions within each patch (GELU
    /// between), flattened and projected to `D`.
    Conv { conv1: (ParamId, ParamId), conv2: (ParamId, ParamId), proj: Linear, channels: usize },
}

pub const CONV_KERNEL: usize = 3;

impl PatchEmbedding {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &ModelConfig) -> Self {
        let (s, d) = (cfg.patch_size, cfg.embed_dim);
        match cfg.embed_mode {
            EmbedMode::Linear => PatchEmbedding::Linear(Linear::new(store, init, "embed.proj", s, d)),
            EmbedMode::Conv => {
                let c = cfg.conv_channels;
                let conv1 = (
                    store.add("embed.conv1.w", init.normal(&[c, 1, CONV_KERNEL])),
                    store.add("embed.conv1.b", Tensor::zeros(&[c])),
                );
                let conv2 = (
                    store.add("embed.conv2.w", init.normal(&[c, c, CONV_KERNEL])),
                    store.add("embed.conv2.b", Tensor::zeros(&[c])),
                );
                let proj = Linear::new(store, init, "embed.proj", c * s, d);
                PatchEmbedding::Conv { conv1, conv2, proj, channels: c }
            }
        }
    }

    /// `x` is `[rows × S]`; returns `[rows × D]`.
    pub fn forward(&self, pass: &mut Pass, x: Var) -> Result<Var> {
        match self {
            PatchEmbedding::Linear(lin) => lin.forward(pass, x),
            PatchEmbedding::Conv { conv1, conv2, proj, channels } => {
                let (rows, s) = match pass.tape.shape(x) {
                    [r, s] => (*r, *s),
                    other => return shape_err(format!("patch matrix expected, got {other:?}")),
                };
                let h = pass.tape.reshape(x, &[rows, 1, s])?;
                let (w1, b1) = (pass.p(conv1.0), pass.p(conv1.1));
                let h = pass.tape.conv1d(h, w1, b1)?;
                let h = pass.tape.gelu(h);
                let (w2, b2) = (pass.p(conv2.0), pass.p(conv2.1));
                let h = pass.tape.conv1d(h, w2, b2)?;
                let h = pass.tape.reshape(h, &[rows, channels * s])?;
                proj.forward(pass, h)
            }
        }
    }

    pub fn param_count(cfg: &ModelConfig) -> usize {
        let (s, d) = (cfg.patch_size, cfg.embed_dim);
        match cfg.embed_mode {
            EmbedMode::Linear => Linear::param_count(s, d),
            EmbedMode::Conv => {
                let c = cfg.conv_channels;
                (c * CONV_KERNEL + c) + (c * c * CONV_KERNEL + c) + Linear::param_count(c * s, d)
            }
        }
    }
}

/// Eagerly embeds every patch of `p`, returning `[N × D]`.
pub fn embed_patches(
    p: &PatchSequence,
    cfg: &ModelConfig,
    store: &ParamStore,
    embed: &PatchEmbedding,
) -> Result<Tensor> {
    if p.patch_size() != cfg.patch_size {
        return shape_err(format!(
            "patches of size {} do not match configured patch size {}",
            p.patch_size(),
            cfg.patch_size
        ));
    }
    let mut pass = Pass::new(store, None);
    let x = pass.tape.constant(&[p.num_patches(), p.patch_size()], p.as_flat().to_vec())?;
    let y = embed.forward(&mut pass, x)?;
    Ok(pass.tape.tensor(y))
}

/// Patch embedding plus encoder: the part that is pretrained and reused.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: ModelConfig,
    pub embed: PatchEmbedding,
    pub encoder: Encoder,
    positions: Vec<f32>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let embed = PatchEmbedding::new(store, init, cfg);
        let encoder = Encoder::new(
            store,
            init,
            "encoder",
            cfg.num_layers,
            cfg.embed_dim,
            cfg.num_heads,
            cfg.head_dim,
            cfg.ffn_dim,
        );
        let positions = positional_embedding(cfg.num_patches, cfg.embed_dim)?;
        Ok(Backbone { cfg: cfg.clone(), embed, encoder, positions })
    }

    /// Embeds the patches listed in `rows` and adds their positional rows.
    pub fn tokens(&self, pass: &mut Pass, patches: &PatchSequence, rows: &[usize]) -> Result<Var> {
        if patches.num_patches() != self.cfg.num_patches || patches.patch_size() != self.cfg.patch_size {
            return shape_err(format!(
                "expected {} patches of {} minutes, got {} of {}",
                self.cfg.num_patches,
                self.cfg.patch_size,
                patches.num_patches(),
                patches.patch_size()
            ));
        }
        let d = self.cfg.embed_dim;
        let x = pass.tape.constant(&[rows.len(), patches.patch_size()], patches.gather(rows))?;
        let e = self.embed.forward(pass, x)?;
        let mut pos = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            pos.extend_from_slice(&self.positions[r * d..(r + 1) * d]);
        }
        let pos = pass.tape.constant(&[rows.len(), d], pos)?;
        pass.tape.add(e, pos)
    }

    /// Embeds and encodes the selected patches.
    pub fn forward(&self, pass: &mut Pass, patches: &PatchSequence, rows: &[usize]) -> Result<(Var, Vec<Var>)> {
        let x = self.tokens(pass, patches, rows)?;
        self.encoder.forward(pass, x)
    }

    pub fn positions(&self) -> &[f32] {
        &self.positions
    }
}

/// Runs the encoder stack on `tokens` (`[N' × D]`, positional embeddings
/// already added) without dropout.
pub fn encoder_forward(
    tokens: &Tensor,
    encoder: &Encoder,
    store: &ParamStore,
    capture: bool,
) -> Result<(Tensor, Option<AttentionBundle>)> {
    if tokens.shape().len() != 2 || tokens.shape()[0] == 0 {
        return shape_err(format!("encoder expects [tokens, dim], got {:?}", tokens.shape()));
    }
    let mut pass = Pass::new(store, None);
    let x = pass.tape.constant(tokens.shape(), tokens.data().to_vec())?;
    let (y, attn) = encoder.forward(&mut pass, x)?;
    let bundle = capture.then(|| AttentionBundle::from_tape(&pass.tape, &attn));
    Ok((pass.tape.tensor(y), bundle))
}

/// Row-stochastic attention matrices of one layer, `heads × tokens × tokens`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAttention {
    pub heads: usize,
    pub tokens: usize,
    pub probs: Vec<f32>,
}

impl LayerAttention {
    pub fn head(&self, h: usize) -> &[f32] {
        let nn = self.tokens * self.tokens;
        &self.probs[h * nn..(h + 1) * nn]
    }
}

/// Attention matrices captured during one forward pass, per layer and head.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionBundle {
    pub layers: Vec<LayerAttention>,
}

impl AttentionBundle {
    pub fn from_tape(tape: &Tape, attn: &[Var]) -> Self {
        let layers = attn
            .iter()
            .map(|&v| {
                let shape = tape.shape(v);
                let tokens = shape[0];
                let probs = tape.attention_probs(v).expect("attention node").to_vec();
                let heads = probs.len() / (tokens * tokens);
                LayerAttention { heads, tokens, probs }
            })
            .collect();
        AttentionBundle { layers }
    }

    pub fn last(&self) -> Option<&LayerAttention> {
        self.layers.last()
    }
}

/// Trainable scalars in the patch embedding plus encoder, excluding any
/// task head or decoder.
pub fn count_parameters(cfg: &ModelConfig) -> usize {
    PatchEmbedding::param_count(cfg)
        + cfg.num_layers * EncoderBlock::param_count(cfg.embed_dim, cfg.num_heads, cfg.head_dim, cfg.ffn_dim)
}
