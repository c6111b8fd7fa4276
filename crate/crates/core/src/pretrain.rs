//! Masked-autoencoder pretraining.
//!
//! The encoder only ever sees the visible patches. Its output tokens are
//! projected to the decoder width, realigned with a shared learned mask
//! token at the hidden positions, given positional embeddings again, decoded
//! by a lightweight transformer and projected back to minutes.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, shape_err, PatError, Result};
use crate::model::{
    patchify, positional_embedding, Backbone, Encoder, Init, KvMap, Linear, ModelConfig, Optimizer, ParamId,
    ParamStore, Pass,
};
use crate::tensor::{AdamConfig, Dropout, Tensor, Var};

/// Visible/masked partition of patch indices for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    pub mask_ratio: f32,
}

impl MaskPlan {
    pub fn num_patches(&self) -> usize {
        self.visible.len() + self.masked.len()
    }

    /// Number of masked patches for `n` patches: `round(ratio·n)`, half up.
    pub fn masked_count(n: usize, ratio: f32) -> usize {
        (ratio as f64 * n as f64 + 0.5).floor() as usize
    }
}

/// Draws `round(ratio·n)` patches to hide, uniformly without replacement.
pub fn sample_mask<R: Rng + ?Sized>(n: usize, ratio: f32, rng: &mut R) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return contract_err(format!("mask ratio {ratio} outside (0, 1)"));
    }
    if n < 2 {
        return contract_err(format!("masking needs at least 2 patches, got {n}"));
    }
    let k = MaskPlan::masked_count(n, ratio);
    if k == 0 || k == n {
        return contract_err(format!("mask ratio {ratio} over {n} patches leaves one side empty"));
    }
    let mut masked = index::sample(rng, n, k).into_vec();
    masked.sort_unstable();
    let mut is_masked = vec![false; n];
    masked.iter().for_each(|&i| is_masked[i] = true);
    let visible = (0..n).filter(|&i| !is_masked[i]).collect();
    Ok(MaskPlan { visible, masked, mask_ratio: ratio })
}

/// Which minutes contribute to the reconstruction loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    All,
    MaskedOnly,
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::All => "all",
            LossMode::MaskedOnly => "masked",
        })
    }
}

impl FromStr for LossMode {
    type Err = PatError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(LossMode::All),
            "masked" | "masked_only" => Ok(LossMode::MaskedOnly),
            other => contract_err(format!("unknown loss mode {other:?} (expected all or masked)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaeConfig {
    pub mask_ratio: f32,
    pub loss_mode: LossMode,
    pub decoder_dim: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub decoder_ffn: usize,
    pub smooth: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for MaeConfig {
    fn default() -> Self {
        MaeConfig {
            mask_ratio: 0.90,
            loss_mode: LossMode::All,
            decoder_dim: 64,
            decoder_layers: 1,
            decoder_heads: 4,
            decoder_ffn: 128,
            smooth: false,
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl MaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return contract_err(format!("mask ratio {} outside (0, 1)", self.mask_ratio));
        }
        if self.decoder_dim == 0 || !self.decoder_dim.is_multiple_of(2) {
            return contract_err(format!("decoder width {} must be positive and even", self.decoder_dim));
        }
        if self.decoder_heads == 0 || !self.decoder_dim.is_multiple_of(self.decoder_heads) {
            return contract_err("decoder heads must divide the decoder width");
        }
        if self.batch_size == 0 {
            return contract_err("batch size must be positive");
        }
        Ok(())
    }

    pub(crate) fn write_kv(&self, out: &mut String) {
        let pairs: [(&str, String); 11] = [
            ("mask_ratio", self.mask_ratio.to_string()),
            ("loss_mode", self.loss_mode.to_string()),
            ("decoder_dim", self.decoder_dim.to_string()),
            ("decoder_layers", self.decoder_layers.to_string()),
            ("decoder_heads", self.decoder_heads.to_string()),
            ("decoder_ffn", self.decoder_ffn.to_string()),
            ("smooth", self.smooth.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("seed", self.seed.to_string()),
        ];
        for (k, v) in pairs {
            out.push_str(&format!("mae.{k}={v}\n"));
        }
    }

    pub(crate) fn from_kv(kv: &KvMap) -> Result<Self> {
        let cfg = MaeConfig {
            mask_ratio: kv.parse("mae.mask_ratio")?,
            loss_mode: kv.get("mae.loss_mode")?.parse()?,
            decoder_dim: kv.parse("mae.decoder_dim")?,
            decoder_layers: kv.parse("mae.decoder_layers")?,
            decoder_heads: kv.parse("mae.decoder_heads")?,
            decoder_ffn: kv.parse("mae.decoder_ffn")?,
            smooth: kv.parse("mae.smooth")?,
            epochs: kv.parse("mae.epochs")?,
            batch_size: kv.parse("mae.batch_size")?,
            lr: kv.parse("mae.lr")?,
            seed: kv.parse("mae.seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Lightweight reconstruction decoder.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub embed: Linear,
    pub mask_token: ParamId,
    pub blocks: Encoder,
    pub out: Linear,
    positions: Vec<f32>,
    dim: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, model: &ModelConfig, mae: &MaeConfig) -> Result<Self> {
        let dim = mae.decoder_dim;
        let embed = Linear::new(store, init, "decoder.embed", model.embed_dim, dim);
        let mask_token = store.add("decoder.mask_token", init.normal(&[dim]));
        let blocks = Encoder::new(
            store,
            init,
            "decoder",
            mae.decoder_layers,
            dim,
            mae.decoder_heads,
            dim / mae.decoder_heads,
            mae.decoder_ffn,
        );
        let out = Linear::new(store, init, "decoder.out", dim, model.patch_size);
        let positions = positional_embedding(model.num_patches, dim)?;
        Ok(Decoder { embed, mask_token, blocks, out, positions, dim })
    }

    /// Decodes encoder tokens for `plan.visible` into `[N × S]` patch values.
    pub fn forward(&self, pass: &mut Pass, latent: Var, plan: &MaskPlan) -> Result<Var> {
        let n = plan.num_patches();
        let v = plan.visible.len();
        let h = self.embed.forward(pass, latent)?;
        let token = pass.p(self.mask_token);
        let stacked = pass.tape.concat_rows(h, token)?;
        // position p reads its encoder row if visible, else the mask token row
        let mut order = vec![v; n];
        for (j, &p) in plan.visible.iter().enumerate() {
            order[p] = j;
        }
        let seq = pass.tape.gather_rows(stacked, &order)?;
        let pos = pass.tape.constant(&[n, self.dim], self.positions.clone())?;
        let seq = pass.tape.add(seq, pos)?;
        let (seq, _) = self.blocks.forward(pass, seq)?;
        self.out.forward(pass, seq)
    }
}

/// Backbone plus decoder.
#[derive(Clone, Debug)]
pub struct MaeModel {
    pub cfg: ModelConfig,
    pub mae: MaeConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub decoder: Decoder,
}

/// Output of one masked-autoencoder forward pass.
pub struct MaeOutput {
    /// Reconstructed series, length `T`.
    pub recon: Var,
    /// Encoder output for the visible patches, `[|visible| × D]`.
    pub latent: Var,
}

impl MaeModel {
    pub fn new(cfg: &ModelConfig, mae: &MaeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        mae.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let backbone = Backbone::new(&mut store, &mut init, cfg)?;
        let decoder = Decoder::new(&mut store, &mut init, cfg, mae)?;
        Ok(MaeModel { cfg: cfg.clone(), mae: mae.clone(), store, backbone, decoder })
    }

    /// Records the full masked-autoencoder pass on `pass`.
    pub fn forward(&self, pass: &mut Pass, series: &[f32], plan: &MaskPlan) -> Result<MaeOutput> {
        if series.len() != self.cfg.series_len {
            return shape_err(format!("series has {} minutes, model expects {}", series.len(), self.cfg.series_len));
        }
        if plan.num_patches() != self.cfg.num_patches {
            return shape_err(format!(
                "mask plan covers {} patches, model has {}",
                plan.num_patches(),
                self.cfg.num_patches
            ));
        }
        let patches = patchify(series, self.cfg.patch_size)?;
        let (latent, _) = self.backbone.forward(pass, &patches, &plan.visible)?;
        let decoded = self.decoder.forward(pass, latent, plan)?;
        let recon = pass.tape.reshape(decoded, &[self.cfg.series_len])?;
        Ok(MaeOutput { recon, latent })
    }

    /// Reconstruction without dropout, returned as plain values.
    pub fn reconstruct(&self, series: &[f32], plan: &MaskPlan) -> Result<(Vec<f32>, Tensor)> {
        let mut pass = Pass::new(&self.store, None);
        let out = self.forward(&mut pass, series, plan)?;
        Ok((pass.tape.value(out.recon).to_vec(), pass.tape.tensor(out.latent)))
    }
}

/// Per-minute loss weights: 1 everywhere, or 1 only on masked patches.
pub fn minute_weights(plan: &MaskPlan, patch_size: usize, mode: LossMode) -> Vec<f32> {
    let n = plan.num_patches();
    match mode {
        LossMode::All => vec![1.0; n * patch_size],
        LossMode::MaskedOnly => {
            let mut w = vec![0.0; n * patch_size];
            for &p in &plan.masked {
                w[p * patch_size..(p + 1) * patch_size].fill(1.0);
            }
            w
        }
    }
}

/// Minute-level mean squared error between the input and its reconstruction.
pub fn reconstruction_loss(input: &[f32], recon: &[f32], plan: &MaskPlan, mode: LossMode) -> Result<f64> {
    if input.len() != recon.len() {
        return shape_err(format!("input has {} minutes, reconstruction {}", input.len(), recon.len()));
    }
    let n = plan.num_patches();
    if n == 0 || !input.len().is_multiple_of(n) {
        return shape_err(format!("{} minutes cannot be split over {n} patches", input.len()));
    }
    let weights = minute_weights(plan, input.len() / n, mode);
    let mut acc = 0.0f64;
    let mut total = 0.0f64;
    for ((&x, &r), &w) in input.iter().zip(recon).zip(&weights) {
        let d = x as f64 - r as f64;
        acc += w as f64 * d * d;
        total += w as f64;
    }
    Ok(acc / total)
}

/// Result of [`pretrain_loop`].
pub struct Pretrained {
    pub model: MaeModel,
    /// Mean training loss of each epoch.
    pub history: Vec<f64>,
}

/// Trains a masked autoencoder on standardized series.
///
/// Every epoch visits the examples in a fresh random order, draws a fresh
/// mask per example, and applies one Adam update per mini-batch.
pub fn pretrain_loop(data: &[Vec<f32>], cfg: &MaeConfig, model_cfg: &ModelConfig) -> Result<Pretrained> {
    pretrain_with_progress(data, cfg, model_cfg, |_, _| {})
}

pub fn pretrain_with_progress(
    data: &[Vec<f32>],
    cfg: &MaeConfig,
    model_cfg: &ModelConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Pretrained> {
    if data.is_empty() {
        return contract_err("pretraining needs at least one series");
    }
    if let Some(s) = data.iter().find(|s| s.len() != model_cfg.series_len) {
        return contract_err(format!("series has {} minutes, model expects {}", s.len(), model_cfg.series_len));
    }
    let mut model = MaeModel::new(model_cfg, cfg, cfg.seed)?;
    let mut opt = Optimizer::new(&model.store, AdamConfig::with_lr(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d61_655f_7472_6169);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f32;
            for &i in batch {
                let plan = sample_mask(model_cfg.num_patches, cfg.mask_ratio, &mut rng)?;
                let dropout = Dropout::new(model_cfg.dropout, ChaCha8Rng::seed_from_u64(rng.random()));
                let mut pass = Pass::new(&model.store, Some(dropout));
                let out = model.forward(&mut pass, &data[i], &plan)?;
                let weights = minute_weights(&plan, model_cfg.patch_size, cfg.loss_mode);
                let loss = pass.tape.weighted_mse(out.recon, &data[i], &weights)?;
                epoch_loss += pass.tape.value(loss)[0] as f64;
                let grads = pass.tape.backward(loss)?;
                drop(pass);
                model.store.accumulate(&grads, scale)?;
            }
            opt.step(&mut model.store)?;
        }
        let mean = epoch_loss / data.len() as f64;
        if !mean.is_finite() {
            return contract_err(format!("training loss became non-finite at epoch {}", epoch + 1));
        }
        on_epoch(epoch, mean);
        history.push(mean);
    }
    Ok(Pretrained { model, history })
}
