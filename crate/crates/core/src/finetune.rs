//! Binary classification on top of the (optionally pretrained) backbone.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::{labels_of, ActigraphyRecord};
use crate::error::{contract_err, shape_err, PatError, Result};
use crate::eval::auc;
use crate::model::{patchify, AttentionBundle, Backbone, Init, Linear, ModelConfig, Optimizer, ParamStore, Pass};
use crate::tensor::{AdamConfig, Dropout, Tensor, Var};

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` inside the loss.
pub const PROB_CLAMP: f64 = 1e-7;

/// Mean of `−[y·ln p + (1−y)·ln(1−p)]` with clamped `p`.
pub fn binary_cross_entropy(p: &[f32], y: &[f32]) -> f64 {
    let total: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = (p as f64).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let y = y as f64;
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / p.len().max(1) as f64
}

/// End-to-end fine-tuning or linear probing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneMode {
    FT,
    LP,
}

impl fmt::Display for FinetuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FinetuneMode::FT => "FT",
            FinetuneMode::LP => "LP",
        })
    }
}

impl FromStr for FinetuneMode {
    type Err = PatError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "FT" => Ok(FinetuneMode::FT),
            "LP" => Ok(FinetuneMode::LP),
            other => contract_err(format!("unknown fine-tuning mode {other:?} (expected FT or LP)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    pub early_stop_patience: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            mode: FinetuneMode::FT,
            epochs: 50,
            batch_size: 32,
            lr: 1e-4,
            seed: 0,
            early_stop_patience: 10,
        }
    }
}

/// Backbone, mean pooling over tokens, affine `D → 1`, sigmoid.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub head: Linear,
}

pub const BACKBONE_PREFIXES: [&str; 2] = ["embed.", "encoder."];

impl Classifier {
    /// Randomly initialised classifier.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let backbone = Backbone::new(&mut store, &mut init, cfg)?;
        let head = Linear::new(&mut store, &mut init, "head", cfg.embed_dim, 1);
        Ok(Classifier { cfg: cfg.clone(), store, backbone, head })
    }

    /// Restores a classifier saved with [`Checkpoint::from_classifier`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Classifier::new(&ckpt.model, 0)?;
        for (name, _) in model.store.iter().map(|(n, t)| (n.to_string(), t.len())).collect::<Vec<_>>() {
            let t =
                ckpt.tensor(&name).ok_or_else(|| PatError::Checkpoint(format!("checkpoint lacks tensor {name:?}")))?;
            model.store.load(&name, t)?;
        }
        Ok(model)
    }

    /// Number of weights in the head alone.
    pub fn head_params(&self) -> usize {
        self.store.numel_with_prefix("head.")
    }

    fn check_len(&self, series: &[f32]) -> Result<()> {
        if series.len() != self.cfg.series_len {
            return shape_err(format!("series has {} minutes, model expects {}", series.len(), self.cfg.series_len));
        }
        Ok(())
    }

    /// Mean-pooled encoder output `[1 × D]` and the per-block attention nodes.
    pub fn pooled(&self, pass: &mut Pass, series: &[f32]) -> Result<(Var, Vec<Var>)> {
        self.check_len(series)?;
        let patches = patchify(series, self.cfg.patch_size)?;
        let rows: Vec<usize> = (0..self.cfg.num_patches).collect();
        let (tokens, attn) = self.backbone.forward(pass, &patches, &rows)?;
        let pooled = pass.tape.mean_rows(tokens)?;
        Ok((pass.tape.reshape(pooled, &[1, self.cfg.embed_dim])?, attn))
    }

    fn head_forward(&self, pass: &mut Pass, pooled: Var) -> Result<Var> {
        let logit = self.head.forward(pass, pooled)?;
        let p = pass.tape.sigmoid(logit);
        pass.tape.reshape(p, &[1])
    }

    /// Probability output recorded on `pass`.
    pub fn forward(&self, pass: &mut Pass, series: &[f32]) -> Result<Var> {
        let (pooled, _) = self.pooled(pass, series)?;
        self.head_forward(pass, pooled)
    }

    /// Inference-mode probability for one standardized series.
    pub fn predict(&self, series: &[f32]) -> Result<f32> {
        let mut pass = Pass::new(&self.store, None);
        let p = self.forward(&mut pass, series)?;
        Ok(pass.tape.value(p)[0])
    }

    pub fn predict_many<S: AsRef<[f32]>>(&self, series: &[S]) -> Result<Vec<f32>> {
        series.iter().map(|s| self.predict(s.as_ref())).collect()
    }

    /// Inference pass that also returns every block's attention matrices.
    pub fn predict_with_attention(&self, series: &[f32]) -> Result<(f32, AttentionBundle)> {
        let mut pass = Pass::new(&self.store, None);
        let (pooled, attn) = self.pooled(&mut pass, series)?;
        let p = self.head_forward(&mut pass, pooled)?;
        let bundle = AttentionBundle::from_tape(&pass.tape, &attn);
        Ok((pass.tape.value(p)[0], bundle))
    }

    fn pooled_features(&self, series: &[f32]) -> Result<Vec<f32>> {
        let mut pass = Pass::new(&self.store, None);
        let (pooled, _) = self.pooled(&mut pass, series)?;
        Ok(pass.tape.value(pooled).to_vec())
    }
}

/// Attaches a fresh classification head to the embedder and encoder stored
/// in `ckpt`.
pub fn attach_head(ckpt: &Checkpoint, cfg: &ModelConfig, seed: u64) -> Result<Classifier> {
    if let Some(field) = ckpt.model.first_mismatch(cfg) {
        return Err(PatError::Checkpoint(format!("checkpoint config differs from requested config in {field}")));
    }
    let mut model = Classifier::new(cfg, seed)?;
    let names: Vec<String> = model
        .store
        .iter()
        .map(|(n, _)| n.to_string())
        .filter(|n| BACKBONE_PREFIXES.iter().any(|p| n.starts_with(p)))
        .collect();
    for name in names {
        let t = ckpt.tensor(&name).ok_or_else(|| PatError::Checkpoint(format!("checkpoint lacks tensor {name:?}")))?;
        model.store.load(&name, t)?;
    }
    Ok(model)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub train_loss: f64,
    pub val_auc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneHistory {
    pub epochs: Vec<EpochStats>,
    /// Zero-based index into `epochs` whose weights were kept.
    pub best_epoch: usize,
    pub best_val_auc: f64,
}

fn example_dropout(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Dropout {
    Dropout::new(cfg.dropout, ChaCha8Rng::seed_from_u64(rng.random()))
}

/// Trains the classifier with Adam, keeping the weights of the epoch with
/// the best validation AUC and stopping after `early_stop_patience` epochs
/// without improvement.
///
/// In LP mode the embedder and encoder are frozen; their pooled outputs are
/// computed once in inference mode and only the head is trained.
pub fn finetune(
    mut model: Classifier,
    train: &[ActigraphyRecord],
    val: &[ActigraphyRecord],
    cfg: &FinetuneConfig,
) -> Result<(Classifier, FinetuneHistory)> {
    let train_y = labels_of(train)?;
    let val_y = labels_of(val)?;
    if train_y.iter().all(|&y| y == train_y[0]) {
        return contract_err("training set contains a single class");
    }
    if val_y.is_empty() || val_y.iter().all(|&y| y == val_y[0]) {
        return contract_err("validation set must contain both classes");
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return contract_err("epochs and batch size must be positive");
    }

    let lp = cfg.mode == FinetuneMode::LP;
    model.store.set_trainable(&BACKBONE_PREFIXES, !lp);
    let features = if lp {
        let f =
            |set: &[ActigraphyRecord]| set.iter().map(|r| model.pooled_features(&r.series)).collect::<Result<Vec<_>>>();
        Some((f(train)?, f(val)?))
    } else {
        None
    };

    let mut opt = Optimizer::new(&model.store, AdamConfig::with_lr(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6669_6e65_7475_6e65);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut epochs = Vec::new();
    let mut stale = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f32;
            for &i in batch {
                let y = [train_y[i] as f32];
                let grads = match &features {
                    Some((tf, _)) => {
                        let mut pass = Pass::new(&model.store, None);
                        let x = pass.tape.constant(&[1, model.cfg.embed_dim], tf[i].clone())?;
                        let p = model.head_forward(&mut pass, x)?;
                        let loss = pass.tape.binary_cross_entropy(p, &y)?;
                        loss_sum += pass.tape.value(loss)[0] as f64;
                        pass.tape.backward(loss)?
                    }
                    None => {
                        let mut pass = Pass::new(&model.store, Some(example_dropout(&model.cfg, &mut rng)));
                        let p = model.forward(&mut pass, &train[i].series)?;
                        let loss = pass.tape.binary_cross_entropy(p, &y)?;
                        loss_sum += pass.tape.value(loss)[0] as f64;
                        pass.tape.backward(loss)?
                    }
                };
                model.store.accumulate(&grads, scale)?;
            }
            opt.step(&mut model.store)?;
        }

        let scores = match &features {
            Some((_, vf)) => vf
                .iter()
                .map(|f| {
                    let mut pass = Pass::new(&model.store, None);
                    let x = pass.tape.constant(&[1, model.cfg.embed_dim], f.clone())?;
                    let p = model.head_forward(&mut pass, x)?;
                    Ok(pass.tape.value(p)[0] as f64)
                })
                .collect::<Result<Vec<_>>>()?,
            None => val.iter().map(|r| model.predict(&r.series).map(f64::from)).collect::<Result<Vec<_>>>()?,
        };
        let val_auc = auc(&scores, &val_y)?;
        epochs.push(EpochStats { train_loss: loss_sum / train.len() as f64, val_auc });

        if best.as_ref().is_none_or(|(b, _, _)| val_auc > *b) {
            best = Some((val_auc, epoch, model.store.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                break;
            }
        }
    }

    let (best_val_auc, best_epoch, store) = best.expect("at least one epoch ran");
    model.store = store;
    model.store.set_trainable(&BACKBONE_PREFIXES, true);
    Ok((model, FinetuneHistory { epochs, best_epoch, best_val_auc }))
}

/// Copy of every weight tensor whose name starts with one of `prefixes`.
pub fn snapshot(store: &ParamStore, prefixes: &[&str]) -> Vec<(String, Tensor)> {
    store
        .iter()
        .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_examples() {
        for y in [0.0, 1.0] {
            assert!((binary_cross_entropy(&[0.5], &[y]) - std::f64::consts::LN_2).abs() < 1e-4);
        }
        assert!(binary_cross_entropy(&[1.0 - 1e-7], &[1.0]) < 1e-6);
        assert!(binary_cross_entropy(&[0.0], &[0.0]) < 1e-6);
        let pair = binary_cross_entropy(&[0.5, 0.5], &[0.0, 1.0]);
        assert!((pair - binary_cross_entropy(&[0.5], &[1.0])).abs() < 1e-12);
        // clamping keeps the loss finite
        assert!(binary_cross_entropy(&[0.0], &[1.0]).is_finite());
    }

    #[test]
    fn bce_matches_direct_logs_on_grid() {
        for k in 1..100 {
            let p = k as f64 / 100.0;
            for y in [0.0f64, 1.0] {
                let direct = if y == 1.0 { -p.ln() } else { -(1.0 - p).ln() };
                let got = binary_cross_entropy(&[p as f32], &[y as f32]);
                let direct_f32 = if y == 1.0 { -((p as f32) as f64).ln() } else { -(1.0 - (p as f32) as f64).ln() };
                assert!((got - direct_f32).abs() < 1e-6, "p={p} y={y}");
                assert!((got - direct).abs() < 1e-6 * 10.0);
            }
        }
    }

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::default().with_patching(64, 8).unwrap();
        cfg.embed_dim = 8;
        cfg.num_heads = 2;
        cfg.head_dim = 4;
        cfg.ffn_dim = 16;
        cfg.num_layers = 1;
        cfg
    }

    #[test]
    fn zero_head_gives_one_half() {
        let mut m = Classifier::new(&tiny_cfg(), 4).unwrap();
        assert_eq!(m.head_params(), 9);
        let (w, b) = (m.head.w, m.head.b);
        m.store.get_mut(w).data_mut().fill(0.0);
        m.store.get_mut(b).data_mut().fill(0.0);
        let series: Vec<f32> = (0..64).map(|i| (i as f32).sin() * 3.0).collect();
        assert_eq!(m.predict(&series).unwrap(), 0.5);
    }

    #[test]
    fn head_param_count_for_default_width() {
        let m = Classifier::new(&ModelConfig::preset(crate::model::SizeTag::Small, crate::model::EmbedMode::Linear), 0)
            .unwrap();
        assert_eq!(m.head_params(), 97);
    }

    #[test]
    fn predictions_are_probabilities_and_repeatable() {
        let m = Classifier::new(&tiny_cfg(), 2).unwrap();
        let series: Vec<f32> = (0..64).map(|i| (i as f32 * 0.3).cos()).collect();
        let p = m.predict(&series).unwrap();
        assert!(p > 0.0 && p < 1.0);
        assert_eq!(p, m.predict(&series).unwrap());
        assert!(m.predict(&series[..63]).is_err());
    }

    #[test]
    fn single_class_training_set_is_rejected() {
        let m = Classifier::new(&tiny_cfg(), 2).unwrap();
        let recs: Vec<ActigraphyRecord> = (0..4)
            .map(|i| ActigraphyRecord { participant_id: format!("p{i}"), series: vec![i as f32; 64], label: Some(1) })
            .collect();
        let mut val = recs.clone();
        val[0].label = Some(0);
        assert!(finetune(m, &recs, &val, &FinetuneConfig::default()).is_err());
    }
}
