mod common;

use pat_core::checkpoint::Checkpoint;
use pat_core::data::{standardize_per_minute, synth_generate_with_len, ActigraphyRecord, STANDARDIZE_EPS};
use pat_core::eval::auc;
use pat_core::finetune::{attach_head, finetune, Classifier, FinetuneConfig, FinetuneMode};
use pat_core::model::ModelConfig;
use pat_core::pretrain::{pretrain_loop, MaeConfig};

fn cohort(n: usize, seed: u64, effect: f64) -> Vec<ActigraphyRecord> {
    let recs = synth_generate_with_len(n, seed, effect, 1440).unwrap();
    standardize_per_minute(&recs, STANDARDIZE_EPS).unwrap().0
}

fn small() -> ModelConfig {
    common::compact_config(1440, 48, 16, 2, 1)
}

fn cfg(mode: FinetuneMode, epochs: usize) -> FinetuneConfig {
    FinetuneConfig { mode, epochs, batch_size: 8, lr: 3e-3, seed: 1, early_stop_patience: 10 }
}

fn bits(c: &Classifier, prefix: &str) -> Vec<u32> {
    c.store
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
        .collect()
}

fn pretrained() -> Checkpoint {
    let mae = MaeConfig {
        decoder_dim: 8,
        decoder_heads: 2,
        decoder_ffn: 16,
        epochs: 2,
        batch_size: 8,
        ..MaeConfig::default()
    };
    let data: Vec<Vec<f32>> = cohort(16, 3, 1.0).into_iter().map(|r| r.series).collect();
    Checkpoint::from_mae(&pretrain_loop(&data, &mae, &small()).unwrap().model)
}

#[test]
fn full_finetuning_moves_the_encoder() {
    let model = Classifier::new(&small(), 2).unwrap();
    let before = bits(&model, "encoder.");
    let (model, _) = finetune(model, &cohort(32, 5, 1.0), &cohort(10, 6, 1.0), &cfg(FinetuneMode::FT, 2)).unwrap();
    assert_ne!(before, bits(&model, "encoder."));
}

#[test]
fn linear_probe_moves_only_the_head() {
    let ckpt = pretrained();
    let model = attach_head(&ckpt, &small(), 2).unwrap();
    let (enc, head) = (bits(&model, "encoder."), bits(&model, "head."));
    let (model, _) = finetune(model, &cohort(32, 5, 1.0), &cohort(10, 6, 1.0), &cfg(FinetuneMode::LP, 3)).unwrap();
    assert_eq!(enc, bits(&model, "encoder."));
    assert_ne!(head, bits(&model, "head."));
}

#[test]
fn seeded_finetuning_is_deterministic() {
    let run = || {
        let model = Classifier::new(&small(), 2).unwrap();
        let (model, history) =
            finetune(model, &cohort(24, 5, 1.0), &cohort(10, 6, 1.0), &cfg(FinetuneMode::FT, 3)).unwrap();
        (bits(&model, ""), history.epochs.iter().map(|e| e.train_loss.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn separable_cohort_is_learned() {
    let model = Classifier::new(&small(), 7).unwrap();
    let (model, history) =
        finetune(model, &cohort(120, 8, 1.0), &cohort(60, 9, 1.0), &cfg(FinetuneMode::FT, 20)).unwrap();
    let test = cohort(60, 10, 1.0);
    let scores: Vec<f64> = test.iter().map(|r| model.predict(&r.series).unwrap() as f64).collect();
    let labels: Vec<u8> = test.iter().map(|r| r.label.unwrap()).collect();
    let a = auc(&scores, &labels).unwrap();
    assert!(a >= 0.95, "test AUC {a}, best validation AUC {}", history.best_val_auc);
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let ckpt = pretrained();
    let mut other = small();
    other.embed_dim = 24;
    let err = attach_head(&ckpt, &other, 0).unwrap_err().to_string();
    assert!(err.contains("embed_dim"), "{err}");
}
