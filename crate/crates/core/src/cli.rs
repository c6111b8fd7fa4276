//! Command-line front end for the `pat` binary.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::Checkpoint;
use crate::data::{
    format_sig6, load_csv, save_csv, smooth_records, standardize_per_minute, stratified_subsets,
    synth_generate_with_len, ActigraphyRecord, SplitSpec, SubsetSize, SAVGOL_POLY, SAVGOL_WINDOW, STANDARDIZE_EPS,
};
use crate::error::{contract_err, PatError, Result};
use crate::eval::{auc, render_csv, render_table, run_benchmark_on, Recipe, StandardizeScope};
use crate::explain::{aggregate_importance_with, expand_to_minutes, export_heatmap, extract_attention, Aggregation};
use crate::finetune::{attach_head, finetune, Classifier, FinetuneConfig, FinetuneMode};
use crate::model::{count_parameters, EmbedMode, KvMap, ModelConfig, SizeTag, WEEK_MINUTES};
use crate::pretrain::{pretrain_with_progress, LossMode, MaeConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "pat", version, about = "Patch transformer for week-long actigraphy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labeled cohort.
    Synth(SynthArgs),
    /// Masked-autoencoder pretraining.
    Pretrain(PretrainArgs),
    /// Train a classifier, optionally from a pretrained checkpoint.
    Finetune(FinetuneArgs),
    /// Score every participant with a trained classifier.
    Predict(PredictArgs),
    /// Write attention importance heatmaps.
    Explain(ExplainArgs),
    /// Size-graded training and test AUC report.
    Benchmark(BenchmarkArgs),
    /// Print a checkpoint's config and tensor table.
    InspectCkpt(InspectArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SizeArg {
    #[value(name = "S")]
    S,
    #[value(name = "M")]
    M,
    #[value(name = "L")]
    L,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EmbedArg {
    Linear,
    Conv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum LossArg {
    All,
    Masked,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    #[value(name = "FT")]
    Ft,
    #[value(name = "LP")]
    Lp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum AggregationArg {
    Column,
    Row,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1.0)]
    effect: f64,
    #[arg(long, default_value_t = WEEK_MINUTES)]
    minutes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Architecture flags shared by every training command.
#[derive(Args, Debug, Default)]
struct ArchArgs {
    #[arg(long, value_enum)]
    size: Option<SizeArg>,
    #[arg(long, value_enum)]
    embed: Option<EmbedArg>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    head_dim: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    #[arg(long)]
    dropout: Option<f32>,
}

impl ArchArgs {
    fn any_set(&self) -> bool {
        self.size.is_some()
            || self.embed.is_some()
            || self.patch_size.is_some()
            || self.embed_dim.is_some()
            || self.layers.is_some()
            || self.heads.is_some()
            || self.head_dim.is_some()
            || self.ffn_dim.is_some()
            || self.dropout.is_some()
    }

    fn config(&self, series_len: usize) -> Result<ModelConfig> {
        let size = match self.size.unwrap_or(SizeArg::M) {
            SizeArg::S => SizeTag::Small,
            SizeArg::M => SizeTag::Medium,
            SizeArg::L => SizeTag::Large,
        };
        let embed = match self.embed.unwrap_or(EmbedArg::Linear) {
            EmbedArg::Linear => EmbedMode::Linear,
            EmbedArg::Conv => EmbedMode::Conv,
        };
        let mut cfg = ModelConfig::preset(size, embed);
        let custom = [self.embed_dim, self.layers, self.heads, self.head_dim, self.ffn_dim].iter().any(Option::is_some)
            || self.patch_size.is_some_and(|p| p != cfg.patch_size);
        if let Some(v) = self.embed_dim {
            cfg.embed_dim = v;
            cfg.head_dim = self.head_dim.unwrap_or(v);
        }
        if let Some(v) = self.layers {
            cfg.num_layers = v;
        }
        if let Some(v) = self.heads {
            cfg.num_heads = v;
        }
        if let Some(v) = self.head_dim {
            cfg.head_dim = v;
        }
        if let Some(v) = self.ffn_dim {
            cfg.ffn_dim = v;
        }
        if let Some(v) = self.dropout {
            cfg.dropout = v;
        }
        if custom {
            cfg.size_tag = SizeTag::Custom;
        }
        let patch = self.patch_size.unwrap_or(cfg.patch_size);
        cfg.with_patching(series_len, patch)
    }
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Accept rows whose label cell is empty.
    #[arg(long)]
    labels_optional: bool,
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long, default_value_t = 0.9)]
    mask_ratio: f32,
    #[arg(long, value_enum, default_value_t = LossArg::All)]
    loss: LossArg,
    #[arg(long, value_enum, default_value_t = Toggle::Off)]
    smooth: Toggle,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    #[arg(long)]
    decoder_dim: Option<usize>,
    #[arg(long)]
    decoder_heads: Option<usize>,
    #[arg(long)]
    decoder_ffn: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum, default_value_t = ModeArg::Ft)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value_t = Toggle::Off)]
    smooth: Toggle,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f32,
    /// Epochs without validation AUC improvement before stopping.
    #[arg(long, default_value_t = 10)]
    patience: usize,
    /// Standardize validation/test with training moments instead of their own.
    #[arg(long)]
    train_stats: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TrainArgs {
    fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            mode: match self.mode {
                ModeArg::Ft => FinetuneMode::FT,
                ModeArg::Lp => FinetuneMode::LP,
            },
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            early_stop_patience: self.patience,
        }
    }

    fn scope(&self) -> StandardizeScope {
        if self.train_stats {
            StandardizeScope::TrainStats
        } else {
            StandardizeScope::PerSplit
        }
    }
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    data: PathBuf,
    /// Pretrained checkpoint; omitted means training from scratch.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[command(flatten)]
    arch: ArchArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    labels_optional: bool,
    #[arg(long, value_enum, default_value_t = Toggle::Off)]
    smooth: Toggle,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExplainArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    labels_optional: bool,
    #[arg(long, value_enum, default_value_t = Toggle::Off)]
    smooth: Toggle,
    /// Only explain this participant.
    #[arg(long)]
    participant: Option<String>,
    #[arg(long, value_enum, default_value_t = AggregationArg::Column)]
    aggregation: AggregationArg,
    /// Output directory, one CSV and one SVG per participant.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchmarkArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[command(flatten)]
    arch: ArchArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, value_delimiter = ',', default_value = "500,1000,2500,N", value_parser = parse_subset_size)]
    sizes: Vec<SubsetSize>,
    #[arg(long, default_value_t = 2000)]
    test_size: usize,
    /// Leave the seconds column empty so reruns are byte-identical.
    #[arg(long)]
    no_timing: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InspectArgs {
    path: PathBuf,
}

fn parse_subset_size(s: &str) -> std::result::Result<SubsetSize, String> {
    match s.trim() {
        "N" | "all" => Ok(SubsetSize::All),
        t => t.parse::<usize>().map(SubsetSize::Count).map_err(|_| format!("{t:?} is neither a count nor N")),
    }
}

/// Flags that take no value when supplied through a config file.
const SWITCHES: [&str; 3] = ["labels-optional", "train-stats", "no-timing"];

/// Appends `--key value` for every config-file entry not already given on
/// the command line.
fn merge_config_file(mut argv: Vec<OsString>) -> std::result::Result<Vec<OsString>, String> {
    let Some(pos) = argv.iter().position(|a| a == "--config") else {
        return Ok(argv);
    };
    let path = argv.get(pos + 1).cloned().ok_or("--config needs a file path")?;
    argv.drain(pos..pos + 2);
    let text = fs::read_to_string(&path).map_err(|e| format!("cannot read config {}: {e}", path.to_string_lossy()))?;
    let kv = KvMap::parse_text(&text).map_err(|e| e.to_string())?;
    for (key, value) in kv.pairs() {
        let key = key.replace('_', "-");
        let flag = format!("--{key}");
        if argv.iter().any(|a| a.to_str().is_some_and(|s| s == flag || s.starts_with(&format!("{flag}=")))) {
            continue;
        }
        if SWITCHES.contains(&key.as_str()) {
            if value == "true" {
                argv.push(flag.into());
            }
        } else {
            argv.push(format!("{flag}={value}").into());
        }
    }
    Ok(argv)
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv = match merge_config_file(argv.into_iter().map(Into::into).collect()) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Explain(a) => explain(a),
        Command::Benchmark(a) => benchmark(a),
        Command::InspectCkpt(a) => inspect(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let records = synth_generate_with_len(a.n, a.seed, a.effect, a.minutes)?;
    save_csv(&a.out, &records)
}

fn load(path: &Path, labels_optional: bool, smooth: Toggle) -> Result<Vec<ActigraphyRecord>> {
    let mut records = load_csv(path)?;
    if records.is_empty() {
        return contract_err(format!("{} has no data rows", path.display()));
    }
    if !labels_optional {
        if let Some(r) = records.iter().find(|r| r.label.is_none()) {
            return contract_err(format!(
                "participant {} has no label (pass --labels-optional to allow this)",
                r.participant_id
            ));
        }
    }
    if smooth == Toggle::On {
        smooth_records(&mut records, SAVGOL_WINDOW, SAVGOL_POLY)?;
    }
    Ok(records)
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let records = load(&a.data, a.labels_optional, a.smooth)?;
    let cfg = a.arch.config(records[0].series.len())?;
    let (standardized, _) = standardize_per_minute(&records, STANDARDIZE_EPS)?;
    let series: Vec<Vec<f32>> = standardized.into_iter().map(|r| r.series).collect();
    let defaults = MaeConfig::default();
    let mae = MaeConfig {
        mask_ratio: a.mask_ratio,
        loss_mode: match a.loss {
            LossArg::All => LossMode::All,
            LossArg::Masked => LossMode::MaskedOnly,
        },
        decoder_dim: a.decoder_dim.unwrap_or(defaults.decoder_dim),
        decoder_heads: a.decoder_heads.unwrap_or(defaults.decoder_heads),
        decoder_ffn: a.decoder_ffn.unwrap_or(defaults.decoder_ffn),
        smooth: a.smooth == Toggle::On,
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: a.seed,
        ..defaults
    };
    let trained = pretrain_with_progress(&series, &mae, &cfg, |epoch, loss| {
        eprintln!("epoch {:>4}  loss {loss:.6}", epoch + 1);
    })?;
    Checkpoint::from_mae(&trained.model).save(&a.out)
}

/// Classifier for `records`: the checkpoint's architecture unless flags
/// request a specific one, which must then match the checkpoint.
fn classifier_config(ckpt: Option<&Checkpoint>, arch: &ArchArgs, series_len: usize) -> Result<ModelConfig> {
    match ckpt {
        Some(c) if !arch.any_set() => Ok(c.model.clone()),
        _ => arch.config(series_len),
    }
}

fn finetune_cmd(a: FinetuneArgs) -> Result<()> {
    let records = load(&a.data, false, a.train.smooth)?;
    let ckpt = a.ckpt.as_deref().map(Checkpoint::load).transpose()?;
    let cfg = classifier_config(ckpt.as_ref(), &a.arch, records[0].series.len())?;
    let spec = SplitSpec {
        test_size: 0,
        subset_sizes: vec![SubsetSize::All],
        val_fraction: a.val_fraction,
        seed: a.train.seed,
    };
    let split = stratified_subsets(&records, &spec)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    let (train_raw, val_raw) = (pick(&split.subsets[0].train), pick(&split.subsets[0].val));
    let (train, val) = match a.train.scope() {
        StandardizeScope::PerSplit => (
            standardize_per_minute(&train_raw, STANDARDIZE_EPS)?.0,
            standardize_per_minute(&val_raw, STANDARDIZE_EPS)?.0,
        ),
        StandardizeScope::TrainStats => {
            let (train, stats) = standardize_per_minute(&train_raw, STANDARDIZE_EPS)?;
            let val = val_raw
                .iter()
                .map(|r| Ok(ActigraphyRecord { series: stats.apply(&r.series, STANDARDIZE_EPS)?, ..r.clone() }))
                .collect::<Result<Vec<_>>>()?;
            (train, val)
        }
    };
    let model = match &ckpt {
        Some(c) => attach_head(c, &cfg, a.train.seed)?,
        None => Classifier::new(&cfg, a.train.seed)?,
    };
    let (model, history) = finetune(model, &train, &val, &a.train.finetune_config())?;
    for (i, e) in history.epochs.iter().enumerate() {
        eprintln!("epoch {:>4}  loss {:.6}  val AUC {:.4}", i + 1, e.train_loss, e.val_auc);
    }
    eprintln!("kept epoch {} (val AUC {:.4})", history.best_epoch + 1, history.best_val_auc);
    Checkpoint::from_classifier(&model, ckpt.as_ref().and_then(|c| c.mae.as_ref())).save(&a.out)
}

fn load_classifier(path: &Path) -> Result<Classifier> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.kind != crate::checkpoint::CheckpointKind::Classifier {
        return Err(PatError::Checkpoint(format!("{} holds a {} model, not a classifier", path.display(), ckpt.kind)));
    }
    Classifier::from_checkpoint(&ckpt)
}

fn predict(a: PredictArgs) -> Result<()> {
    let model = load_classifier(&a.ckpt)?;
    let records = load(&a.data, a.labels_optional, a.smooth)?;
    let (standardized, _) = standardize_per_minute(&records, STANDARDIZE_EPS)?;
    let probs = model.predict_many(&standardized.iter().map(|r| r.series.as_slice()).collect::<Vec<_>>())?;
    let mut out = String::from("participant_id,probability\n");
    for (r, p) in records.iter().zip(&probs) {
        let _ = writeln!(out, "{},{}", r.participant_id, format_sig6(*p));
    }
    fs::write(&a.out, out)?;
    let labels: Option<Vec<u8>> = records.iter().map(|r| r.label).collect();
    if let Some(labels) = labels {
        let scores: Vec<f64> = probs.iter().map(|&p| p as f64).collect();
        if let Ok(v) = auc(&scores, &labels) {
            println!("AUC {v:.4}");
        }
    }
    Ok(())
}

fn explain(a: ExplainArgs) -> Result<()> {
    let model = load_classifier(&a.ckpt)?;
    let records = load(&a.data, a.labels_optional, a.smooth)?;
    let (standardized, _) = standardize_per_minute(&records, STANDARDIZE_EPS)?;
    let mode = match a.aggregation {
        AggregationArg::Column => Aggregation::Column,
        AggregationArg::Row => Aggregation::Row,
    };
    fs::create_dir_all(&a.out)?;
    let mut written = 0;
    for (raw, z) in records.iter().zip(&standardized) {
        if a.participant.as_ref().is_some_and(|p| *p != raw.participant_id) {
            continue;
        }
        let bundle = extract_attention(&model, &z.series)?;
        let scores = aggregate_importance_with(&bundle, mode)?;
        let minutes = expand_to_minutes(&scores, model.cfg.patch_size);
        let files = export_heatmap(&raw.series, &minutes, &a.out.join(&raw.participant_id))?;
        println!("{}", files.svg.display());
        written += 1;
    }
    if written == 0 {
        return contract_err(format!("participant {:?} not found", a.participant.unwrap_or_default()));
    }
    Ok(())
}

fn benchmark(a: BenchmarkArgs) -> Result<()> {
    let records = load(&a.data, false, Toggle::Off)?;
    let ckpt = a.ckpt.as_deref().map(Checkpoint::load).transpose()?;
    let cfg = classifier_config(ckpt.as_ref(), &a.arch, records[0].series.len())?;
    let recipe = Recipe {
        model: cfg,
        pretrained: ckpt,
        finetune: a.train.finetune_config(),
        smooth: a.train.smooth == Toggle::On,
        standardize: a.train.scope(),
    };
    let spec = SplitSpec { test_size: a.test_size, subset_sizes: a.sizes, seed: a.train.seed, ..SplitSpec::default() };
    let report = run_benchmark_on(records, &recipe, &spec)?;
    print!("{}", render_table(&report));
    fs::write(&a.out, render_csv(&report, !a.no_timing))?;
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.path)?;
    let mut out = String::new();
    out.push_str(&ckpt.config_text());
    out.push('\n');
    for (name, t) in &ckpt.tensors {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let _ = writeln!(out, "{name:<40} [{}]", dims.join(", "));
    }
    let backbone = ckpt.param_count_with_prefix("embed.") + ckpt.param_count_with_prefix("encoder.");
    let _ = writeln!(out, "\ntensors: {}", ckpt.tensors.len());
    let _ = writeln!(out, "total parameters: {}", ckpt.param_count());
    let _ = writeln!(out, "embedder+encoder parameters: {backbone}");
    let _ = writeln!(out, "count_parameters(config): {}", count_parameters(&ckpt.model));
    print!("{out}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subset_sizes_parse() {
        assert_eq!(parse_subset_size("500"), Ok(SubsetSize::Count(500)));
        assert_eq!(parse_subset_size("N"), Ok(SubsetSize::All));
        assert!(parse_subset_size("x").is_err());
    }

    #[test]
    fn arch_flags_build_configs() {
        let a = ArchArgs { size: Some(SizeArg::L), ..ArchArgs::default() };
        let cfg = a.config(WEEK_MINUTES).unwrap();
        assert_eq!((cfg.num_layers, cfg.num_patches, cfg.size_tag), (4, 560, SizeTag::Large));
        let custom = ArchArgs { patch_size: Some(144), embed_dim: Some(32), heads: Some(2), ..ArchArgs::default() };
        let cfg = custom.config(WEEK_MINUTES).unwrap();
        assert_eq!((cfg.num_patches, cfg.head_dim, cfg.size_tag), (70, 32, SizeTag::Custom));
        assert!(ArchArgs::default().config(1000).is_err());
    }

    #[test]
    fn config_file_fills_missing_flags_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "# comment\nseed=5\nmask_ratio=0.5\nlabels-optional=true\n").unwrap();
        let argv: Vec<OsString> =
            ["pat", "pretrain", "--seed", "9", "--config", path.to_str().unwrap()].iter().map(OsString::from).collect();
        let merged = merge_config_file(argv).unwrap();
        let merged: Vec<&str> = merged.iter().map(|a| a.to_str().unwrap()).collect();
        assert_eq!(merged, ["pat", "pretrain", "--seed", "9", "--mask-ratio=0.5", "--labels-optional"]);
    }
}
