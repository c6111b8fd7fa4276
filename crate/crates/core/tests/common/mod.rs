//! Test-only oracles: a plain f64 re-implementation of the model forward
//! passes, central finite differences, and brute-force reference metrics.
#![allow(dead_code)]

use std::collections::HashMap;

use pat_core::model::{EmbedMode, ModelConfig, ParamStore};
use pat_core::pretrain::{LossMode, MaeConfig, MaskPlan};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Parameter values by name, in f64.
#[derive(Clone)]
pub struct RefParams {
    pub values: HashMap<String, (Vec<usize>, Vec<f64>)>,
    pub order: Vec<String>,
}

impl RefParams {
    pub fn from_store(store: &ParamStore) -> Self {
        let mut values = HashMap::new();
        let mut order = Vec::new();
        for (name, t) in store.iter() {
            values.insert(name.to_string(), (t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect()));
            order.push(name.to_string());
        }
        RefParams { values, order }
    }

    pub fn get(&self, name: &str) -> &[f64] {
        &self.values.get(name).unwrap_or_else(|| panic!("missing parameter {name}")).1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Vec<f64> {
        &mut self.values.get_mut(name).unwrap().1
    }
}

/// Overwrites every parameter with well-scaled random values so that the
/// gradient check exercises the nonlinearities.
pub fn randomize_store<R: Rng>(store: &mut ParamStore, rng: &mut R) {
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    let weights = Normal::new(0.0f32, 0.4).unwrap();
    for name in names {
        let id = store.id(&name).unwrap();
        let t = store.get_mut(id);
        let gamma = name.ends_with("gamma");
        for v in t.data_mut() {
            let r = weights.sample(rng);
            *v = if gamma { 1.0 + 0.5 * r } else { r };
        }
    }
}

// ---- f64 building blocks --------------------------------------------------

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// `x[rows × inp] · W[inp × out] + b`.
fn linear(p: &RefParams, name: &str, x: &[f64], rows: usize, inp: usize) -> Vec<f64> {
    let w = p.get(&format!("{name}.w"));
    let b = p.get(&format!("{name}.b"));
    let out = b.len();
    assert_eq!(w.len(), inp * out, "{name}");
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        for o in 0..out {
            let mut s = b[o];
            for i in 0..inp {
                s += x[r * inp + i] * w[i * out + o];
            }
            y[r * out + o] = s;
        }
    }
    y
}

fn layer_norm(p: &RefParams, name: &str, x: &[f64], d: usize) -> Vec<f64> {
    let g = p.get(&format!("{name}.gamma"));
    let b = p.get(&format!("{name}.beta"));
    let mut y = vec![0.0; x.len()];
    for (xr, yr) in x.chunks(d).zip(y.chunks_mut(d)) {
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + 1e-5).sqrt();
        for j in 0..d {
            yr[j] = (xr[j] - mean) * rstd * g[j] + b[j];
        }
    }
    y
}

fn attention(q: &[f64], k: &[f64], v: &[f64], n: usize, heads: usize, hd: usize) -> Vec<f64> {
    let width = heads * hd;
    let mut out = vec![0.0; n * width];
    let scale = 1.0 / (hd as f64).sqrt();
    for h in 0..heads {
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| (0..hd).map(|c| q[i * width + h * hd + c] * k[j * width + h * hd + c]).sum::<f64>() * scale)
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..hd {
                out[i * width + h * hd + c] = (0..n).map(|j| e[j] / z * v[j * width + h * hd + c]).sum();
            }
        }
    }
    out
}

fn block(p: &RefParams, name: &str, x: &[f64], n: usize, d: usize, heads: usize, hd: usize) -> Vec<f64> {
    let a = format!("{name}.attn");
    let lin = |tag: &str| {
        let (w, b) = (p.get(&format!("{a}.w{tag}")), p.get(&format!("{a}.b{tag}")));
        let out = b.len();
        let mut y = vec![0.0; n * out];
        for r in 0..n {
            for o in 0..out {
                y[r * out + o] = b[o] + (0..d).map(|i| x[r * d + i] * w[i * out + o]).sum::<f64>();
            }
        }
        y
    };
    let (q, k, v) = (lin("q"), lin("k"), lin("v"));
    let ctx = attention(&q, &k, &v, n, heads, hd);
    let (wo, bo) = (p.get(&format!("{a}.wo")), p.get(&format!("{a}.bo")));
    let width = heads * hd;
    let mut h = vec![0.0; n * d];
    for r in 0..n {
        for o in 0..d {
            h[r * d + o] = x[r * d + o] + bo[o] + (0..width).map(|i| ctx[r * width + i] * wo[i * d + o]).sum::<f64>();
        }
    }
    let h = layer_norm(p, &format!("{name}.norm1"), &h, d);
    let ffn = p.get(&format!("{name}.ffn.in.b")).len();
    let f: Vec<f64> = linear(p, &format!("{name}.ffn.in"), &h, n, d).into_iter().map(gelu).collect();
    let f = linear(p, &format!("{name}.ffn.out"), &f, n, ffn);
    let y: Vec<f64> = h.iter().zip(&f).map(|(a, b)| a + b).collect();
    layer_norm(p, &format!("{name}.norm2"), &y, d)
}

fn positions(count: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; count * dim];
    for pos in 0..count {
        for c in 0..dim {
            let i = (c / 2) as f64;
            let angle = pos as f64 * (-(2.0 * i / dim as f64) * 10_000f64.ln()).exp();
            out[pos * dim + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

fn conv_same(p: &RefParams, name: &str, x: &[f64], cin: usize, len: usize) -> Vec<f64> {
    let w = p.get(&format!("{name}.w"));
    let b = p.get(&format!("{name}.b"));
    let cout = b.len();
    let k = w.len() / (cout * cin);
    let pad = (k / 2) as isize;
    let mut y = vec![0.0; cout * len];
    for co in 0..cout {
        for t in 0..len {
            let mut s = b[co];
            for ci in 0..cin {
                for kk in 0..k {
                    let src = t as isize + kk as isize - pad;
                    if src >= 0 && (src as usize) < len {
                        s += w[(co * cin + ci) * k + kk] * x[ci * len + src as usize];
                    }
                }
            }
            y[co * len + t] = s;
        }
    }
    y
}

fn embed(cfg: &ModelConfig, p: &RefParams, patches: &[f64], rows: usize) -> Vec<f64> {
    let s = cfg.patch_size;
    match cfg.embed_mode {
        EmbedMode::Linear => linear(p, "embed.proj", patches, rows, s),
        EmbedMode::Conv => {
            let c = cfg.conv_channels;
            let mut flat = Vec::with_capacity(rows * c * s);
            for r in 0..rows {
                let h = conv_same(p, "embed.conv1", &patches[r * s..(r + 1) * s], 1, s);
                let h: Vec<f64> = h.into_iter().map(gelu).collect();
                flat.extend(conv_same(p, "embed.conv2", &h, c, s));
            }
            linear(p, "embed.proj", &flat, rows, c * s)
        }
    }
}

/// Encoder output for the patches listed in `rows`.
pub fn backbone(cfg: &ModelConfig, p: &RefParams, series: &[f64], rows: &[usize]) -> Vec<f64> {
    let (s, d) = (cfg.patch_size, cfg.embed_dim);
    let mut patches = Vec::with_capacity(rows.len() * s);
    for &r in rows {
        patches.extend_from_slice(&series[r * s..(r + 1) * s]);
    }
    let mut x = embed(cfg, p, &patches, rows.len());
    let pe = positions(cfg.num_patches, d);
    for (i, &r) in rows.iter().enumerate() {
        for c in 0..d {
            x[i * d + c] += pe[r * d + c];
        }
    }
    for l in 0..cfg.num_layers {
        x = block(p, &format!("encoder.block{l}"), &x, rows.len(), d, cfg.num_heads, cfg.head_dim);
    }
    x
}

/// Classifier probability: mean-pooled tokens, affine head, sigmoid.
pub fn classifier_prob(cfg: &ModelConfig, p: &RefParams, series: &[f64]) -> f64 {
    let rows: Vec<usize> = (0..cfg.num_patches).collect();
    let x = backbone(cfg, p, series, &rows);
    let d = cfg.embed_dim;
    let pooled: Vec<f64> =
        (0..d).map(|c| (0..rows.len()).map(|r| x[r * d + c]).sum::<f64>() / rows.len() as f64).collect();
    let logit = linear(p, "head", &pooled, 1, d)[0];
    1.0 / (1.0 + (-logit).exp())
}

pub fn classifier_loss(cfg: &ModelConfig, p: &RefParams, series: &[f64], y: f64) -> f64 {
    let prob = classifier_prob(cfg, p, series).clamp(1e-7, 1.0 - 1e-7);
    -(y * prob.ln() + (1.0 - y) * (1.0 - prob).ln())
}

/// Masked-autoencoder reconstruction loss.
pub fn mae_loss(
    cfg: &ModelConfig,
    mae: &MaeConfig,
    p: &RefParams,
    series: &[f64],
    plan: &MaskPlan,
    mode: LossMode,
) -> f64 {
    let (n, s, dd) = (cfg.num_patches, cfg.patch_size, mae.decoder_dim);
    let latent = backbone(cfg, p, series, &plan.visible);
    let h = linear(p, "decoder.embed", &latent, plan.visible.len(), cfg.embed_dim);
    let token = p.get("decoder.mask_token");
    let pe = positions(n, dd);
    let mut seq = vec![0.0; n * dd];
    for pos in 0..n {
        let src: &[f64] = match plan.visible.iter().position(|&v| v == pos) {
            Some(j) => &h[j * dd..(j + 1) * dd],
            None => token,
        };
        for c in 0..dd {
            seq[pos * dd + c] = src[c] + pe[pos * dd + c];
        }
    }
    for l in 0..mae.decoder_layers {
        seq = block(p, &format!("decoder.block{l}"), &seq, n, dd, mae.decoder_heads, dd / mae.decoder_heads);
    }
    let recon = linear(p, "decoder.out", &seq, n, dd);
    let mut acc = 0.0;
    let mut count = 0.0;
    for pos in 0..n {
        let w = match mode {
            LossMode::All => 1.0,
            LossMode::MaskedOnly => plan.masked.contains(&pos) as u8 as f64,
        };
        for m in pos * s..(pos + 1) * s {
            acc += w * (recon[m] - series[m]).powi(2);
            count += w;
        }
    }
    acc / count
}

/// Central-difference gradient of `f` with respect to every parameter.
pub fn numeric_grad(p: &RefParams, h: f64, f: impl Fn(&RefParams) -> f64) -> HashMap<String, Vec<f64>> {
    let mut work = p.clone();
    let mut out = HashMap::new();
    for name in &p.order {
        let len = p.get(name).len();
        let mut g = vec![0.0; len];
        for i in 0..len {
            let orig = work.get(name)[i];
            work.get_mut(name)[i] = orig + h;
            let up = f(&work);
            work.get_mut(name)[i] = orig - h;
            let down = f(&work);
            work.get_mut(name)[i] = orig;
            g[i] = (up - down) / (2.0 * h);
        }
        out.insert(name.clone(), g);
    }
    out
}

/// Largest `|a − n| / max(|a|, |n|, floor)` over all entries, where the
/// floor is `1e-3 · max|n|` so that entries that are exactly zero do not
/// divide by zero.
pub fn max_relative_error(store: &ParamStore, numeric: &HashMap<String, Vec<f64>>) -> (f64, String) {
    let scale = numeric.values().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    let mut worst = (0.0, String::new());
    for (name, t) in store.iter() {
        let n = &numeric[name];
        let zeros = vec![0.0f32; t.len()];
        let a = t.grad().unwrap_or(&zeros);
        for (i, (&a, &n)) in a.iter().zip(n).enumerate() {
            let a = a as f64;
            let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            if err > worst.0 {
                worst = (err, format!("{name}[{i}] analytic {a:.6e} numeric {n:.6e}"));
            }
        }
    }
    worst
}

/// O(n²) Mann–Whitney count with ties as one half.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0f64;
    let mut pairs = 0.0f64;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Small model config for fast end-to-end tests.
pub fn compact_config(series_len: usize, patch: usize, dim: usize, heads: usize, layers: usize) -> ModelConfig {
    let mut cfg = ModelConfig::default().with_patching(series_len, patch).unwrap();
    cfg.embed_dim = dim;
    cfg.num_heads = heads;
    cfg.head_dim = dim / heads;
    cfg.ffn_dim = 2 * dim;
    cfg.num_layers = layers;
    cfg.size_tag = pat_core::model::SizeTag::Custom;
    cfg
}

/// Random 2-block micro-model with `N ≤ 8`, `D ≤ 16`.
pub fn micro_config<R: Rng>(rng: &mut R) -> ModelConfig {
    let n = rng.random_range(2..=8);
    let s = rng.random_range(2..=5);
    let dim = [4, 8, 12, 16][rng.random_range(0..4)];
    let heads = [1, 2, 4][rng.random_range(0..3)];
    let mut cfg = ModelConfig::default().with_patching(n * s, s).unwrap();
    cfg.embed_dim = dim;
    cfg.num_heads = heads;
    cfg.head_dim = rng.random_range(2..=6);
    cfg.ffn_dim = rng.random_range(4..=16);
    cfg.num_layers = 2;
    if rng.random_bool(0.5) {
        cfg.embed_mode = EmbedMode::Conv;
        cfg.conv_channels = rng.random_range(1..=3);
    }
    cfg.validate().unwrap();
    cfg
}

/// Analytic (tape) versus numeric (f64 reference) gradients of the
/// classification loss on one random micro-model.
pub fn classifier_gradcheck(seed: u64) -> (f64, String) {
    use pat_core::finetune::Classifier;
    use pat_core::model::Pass;
    use rand::SeedableRng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let cfg = micro_config(&mut rng);
    let mut model = Classifier::new(&cfg, seed).unwrap();
    randomize_store(&mut model.store, &mut rng);
    let series: Vec<f32> = (0..cfg.series_len).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y = rng.random_range(0..2) as f32;

    let grads = {
        let mut pass = Pass::new(&model.store, None);
        let p = model.forward(&mut pass, &series).unwrap();
        let loss = pass.tape.binary_cross_entropy(p, &[y]).unwrap();
        pass.tape.backward(loss).unwrap()
    };
    model.store.accumulate(&grads, 1.0).unwrap();

    let reference = RefParams::from_store(&model.store);
    let x: Vec<f64> = series.iter().map(|&v| v as f64).collect();
    let numeric = numeric_grad(&reference, 1e-5, |p| classifier_loss(&cfg, p, &x, y as f64));
    max_relative_error(&model.store, &numeric)
}

/// Same check for the masked-autoencoder reconstruction loss.
pub fn mae_gradcheck(seed: u64, mode: LossMode) -> (f64, String) {
    use pat_core::model::Pass;
    use pat_core::pretrain::{minute_weights, sample_mask, MaeModel};
    use rand::SeedableRng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = micro_config(&mut rng);
    if cfg.num_patches < 3 {
        cfg = cfg.clone().with_patching(3 * cfg.patch_size, cfg.patch_size).unwrap();
    }
    let mae = MaeConfig { decoder_dim: 4, decoder_heads: 2, decoder_ffn: 6, mask_ratio: 0.5, ..MaeConfig::default() };
    let mut model = MaeModel::new(&cfg, &mae, seed).unwrap();
    randomize_store(&mut model.store, &mut rng);
    let series: Vec<f32> = (0..cfg.series_len).map(|_| rng.random_range(-2.0..2.0)).collect();
    let plan = sample_mask(cfg.num_patches, mae.mask_ratio, &mut rng).unwrap();

    let grads = {
        let mut pass = Pass::new(&model.store, None);
        let out = model.forward(&mut pass, &series, &plan).unwrap();
        let w = minute_weights(&plan, cfg.patch_size, mode);
        let loss = pass.tape.weighted_mse(out.recon, &series, &w).unwrap();
        pass.tape.backward(loss).unwrap()
    };
    model.store.accumulate(&grads, 1.0).unwrap();

    let reference = RefParams::from_store(&model.store);
    let x: Vec<f64> = series.iter().map(|&v| v as f64).collect();
    let numeric = numeric_grad(&reference, 1e-5, |p| mae_loss(&cfg, &mae, p, &x, &plan, mode));
    max_relative_error(&model.store, &numeric)
}
