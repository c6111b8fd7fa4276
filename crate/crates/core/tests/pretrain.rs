mod common;

use pat_core::data::{standardize_per_minute, synth_generate_with_len, STANDARDIZE_EPS};
use pat_core::pretrain::{pretrain_loop, MaeConfig};

fn tiny_data(n: usize) -> Vec<Vec<f32>> {
    let recs = synth_generate_with_len(n, 12, 1.0, 1440).unwrap();
    standardize_per_minute(&recs, STANDARDIZE_EPS).unwrap().0.into_iter().map(|r| r.series).collect()
}

fn tiny_mae(epochs: usize) -> MaeConfig {
    MaeConfig { decoder_dim: 16, decoder_heads: 2, decoder_ffn: 32, epochs, batch_size: 4, ..MaeConfig::default() }
}

#[test]
fn early_epochs_reduce_the_loss() {
    let cfg = common::compact_config(1440, 48, 16, 2, 1);
    let history = pretrain_loop(&tiny_data(16), &tiny_mae(6), &cfg).unwrap().history;
    let rises = history.windows(2).filter(|w| w[1] >= w[0]).count();
    assert!(rises <= 1, "{history:?}");
}

#[test]
fn long_run_stays_finite() {
    let cfg = common::compact_config(1440, 48, 16, 2, 2);
    let history = pretrain_loop(&tiny_data(8), &tiny_mae(50), &cfg).unwrap().history;
    assert_eq!(history.len(), 50);
    assert!(history.iter().all(|l| l.is_finite()));
}

#[test]
fn empty_or_ragged_data_is_rejected() {
    let cfg = common::compact_config(1440, 48, 16, 2, 1);
    assert!(pretrain_loop(&[], &tiny_mae(1), &cfg).is_err());
    let mut data = tiny_data(2);
    data[1].pop();
    assert!(pretrain_loop(&data, &tiny_mae(1), &cfg).is_err());
}
