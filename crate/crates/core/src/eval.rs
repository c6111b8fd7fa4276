//! AUC and the size-graded benchmark harness.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::checkpoint::Checkpoint;
use crate::data::{
    labels_of, load_csv, smooth_records, standardize_per_minute, stratified_subsets, ActigraphyRecord, MinuteStats,
    SplitSpec, SubsetSize, SAVGOL_POLY, SAVGOL_WINDOW, STANDARDIZE_EPS,
};
use crate::error::{contract_err, Result};
use crate::finetune::{attach_head, finetune, Classifier, FinetuneConfig};
use crate::model::{count_parameters, ModelConfig};

/// Area under the ROC curve via midranks: the probability that a random
/// positive outscores a random negative, ties counting one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return contract_err(format!("{} scores but {} labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return contract_err("scores contain NaN");
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.iter().filter(|&&l| l == 0).count();
    if n_pos + n_neg != labels.len() {
        return contract_err("labels must be 0 or 1");
    }
    if n_pos == 0 || n_neg == 0 {
        return contract_err("AUC needs both classes present");
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of 1-based midranks of the positives, kept in half units to stay exact
    let mut pos_rank_x2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank_x2 = (i + 1 + j) as u128;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        pos_rank_x2 += midrank_x2 * pos_in_group;
        i = j;
    }
    let (p, q) = (n_pos as u128, n_neg as u128);
    let u_x2 = pos_rank_x2 - p * (p + 1);
    Ok(u_x2 as f64 / 2.0 / (p * q) as f64)
}

/// How splits are standardized before training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StandardizeScope {
    /// Every split uses its own per-minute moments.
    #[default]
    PerSplit,
    /// Training moments are applied to validation and test.
    TrainStats,
}

/// Everything that decides how one benchmark entry is trained.
#[derive(Clone, Debug)]
pub struct Recipe {
    pub model: ModelConfig,
    /// Embedder and encoder weights to start from; `None` trains from scratch.
    pub pretrained: Option<Checkpoint>,
    pub finetune: FinetuneConfig,
    pub smooth: bool,
    pub standardize: StandardizeScope,
}

impl Recipe {
    pub fn label(&self) -> String {
        format!(
            "{}-{}-{}",
            if self.pretrained.is_some() { "pretrained" } else { "scratch" },
            self.finetune.mode,
            if self.smooth { "smooth" } else { "raw" }
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SizeResult {
    pub size: SubsetSize,
    /// Participants actually drawn (train + val).
    pub participants: usize,
    pub auc: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkReport {
    pub model: String,
    pub recipe: String,
    pub params: usize,
    pub seed: u64,
    pub test_size: usize,
    pub config: ModelConfig,
    pub rows: Vec<SizeResult>,
    pub avg_auc: f64,
}

impl BenchmarkReport {
    /// Equality of everything except wall-clock timings.
    pub fn same_results(&self, other: &BenchmarkReport) -> bool {
        let strip = |r: &BenchmarkReport| {
            let mut r = r.clone();
            r.rows.iter_mut().for_each(|row| row.seconds = 0.0);
            r
        };
        strip(self) == strip(other)
    }

    pub fn total_seconds(&self) -> f64 {
        self.rows.iter().map(|r| r.seconds).sum()
    }
}

fn standardize_splits(
    train: &[ActigraphyRecord],
    val: &[ActigraphyRecord],
    test: &[ActigraphyRecord],
    scope: StandardizeScope,
) -> Result<[Vec<ActigraphyRecord>; 3]> {
    match scope {
        StandardizeScope::PerSplit => Ok([
            standardize_per_minute(train, STANDARDIZE_EPS)?.0,
            standardize_per_minute(val, STANDARDIZE_EPS)?.0,
            standardize_per_minute(test, STANDARDIZE_EPS)?.0,
        ]),
        StandardizeScope::TrainStats => {
            let stats = MinuteStats::fit(train)?;
            let apply = |set: &[ActigraphyRecord]| {
                set.iter()
                    .map(|r| Ok(ActigraphyRecord { series: stats.apply(&r.series, STANDARDIZE_EPS)?, ..r.clone() }))
                    .collect::<Result<Vec<_>>>()
            };
            Ok([apply(train)?, apply(val)?, apply(test)?])
        }
    }
}

fn pick(records: &[ActigraphyRecord], idx: &[usize]) -> Vec<ActigraphyRecord> {
    idx.iter().map(|&i| records[i].clone()).collect()
}

/// Loads the dataset and runs [`run_benchmark_on`].
pub fn run_benchmark(dataset: &Path, recipe: &Recipe, spec: &SplitSpec) -> Result<BenchmarkReport> {
    run_benchmark_on(load_csv(dataset)?, recipe, spec)
}

/// Trains one model per subset size and scores each on the shared test set.
pub fn run_benchmark_on(
    mut records: Vec<ActigraphyRecord>,
    recipe: &Recipe,
    spec: &SplitSpec,
) -> Result<BenchmarkReport> {
    recipe.model.validate()?;
    if let Some(r) = records.iter().find(|r| r.series.len() != recipe.model.series_len) {
        return contract_err(format!(
            "participant {} has {} minutes, model expects {}",
            r.participant_id,
            r.series.len(),
            recipe.model.series_len
        ));
    }
    labels_of(&records)?;
    if recipe.smooth {
        smooth_records(&mut records, SAVGOL_WINDOW, SAVGOL_POLY)?;
    }
    let splits = stratified_subsets(&records, spec)?;
    let test_raw = pick(&records, &splits.test);

    let mut rows = Vec::with_capacity(splits.subsets.len());
    for subset in &splits.subsets {
        let start = Instant::now();
        let size = subset.size;
        let run = || -> Result<f64> {
            let [train, val, test] = standardize_splits(
                &pick(&records, &subset.train),
                &pick(&records, &subset.val),
                &test_raw,
                recipe.standardize,
            )?;
            let seed = recipe.finetune.seed;
            let model = match &recipe.pretrained {
                Some(ckpt) => attach_head(ckpt, &recipe.model, seed)?,
                None => Classifier::new(&recipe.model, seed)?,
            };
            let (model, _) = finetune(model, &train, &val, &recipe.finetune)?;
            let scores: Vec<f64> = model
                .predict_many(&test.iter().map(|r| r.series.as_slice()).collect::<Vec<_>>())?
                .into_iter()
                .map(f64::from)
                .collect();
            auc(&scores, &labels_of(&test)?)
        };
        let auc = run().map_err(|e| e.context(format!("subset size {size}")))?;
        rows.push(SizeResult { size, participants: subset.total(), auc, seconds: start.elapsed().as_secs_f64() });
    }
    let avg_auc = rows.iter().map(|r| r.auc).sum::<f64>() / rows.len().max(1) as f64;
    Ok(BenchmarkReport {
        model: recipe.model.model_name(),
        recipe: recipe.label(),
        params: count_parameters(&recipe.model),
        seed: recipe.finetune.seed,
        test_size: splits.test.len(),
        config: recipe.model.clone(),
        rows,
        avg_auc,
    })
}

/// Parameter count in the style of the results tables: `285 K`, `1.00 M`.
pub fn human_params(n: usize) -> String {
    if n >= 1_000_000 {
        format!("{:.2} M", n as f64 / 1e6)
    } else {
        format!("{:.0} K", n as f64 / 1e3)
    }
}

fn size_header(size: SubsetSize) -> String {
    format!("n={size}")
}

/// Fixed-width table: model, average AUC, one column per size, parameters.
pub fn render_table(report: &BenchmarkReport) -> String {
    let mut header = vec!["Model".to_string(), "Avg AUC".to_string()];
    header.extend(report.rows.iter().map(|r| size_header(r.size)));
    header.push("Params".to_string());
    let mut cells = vec![report.model.clone(), format!("{:.3}", report.avg_auc)];
    cells.extend(report.rows.iter().map(|r| format!("{:.3}", r.auc)));
    cells.push(human_params(report.params));

    let widths: Vec<usize> = header.iter().zip(&cells).map(|(h, c)| h.len().max(c.len())).collect();
    let line = |row: &[String]| {
        let mut s = String::new();
        for (i, (cell, w)) in row.iter().zip(&widths).enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            if i == 0 {
                let _ = write!(s, "{cell:<w$}");
            } else {
                let _ = write!(s, "{cell:>w$}");
            }
        }
        s.push('\n');
        s
    };
    let mut out = line(&header);
    out.push_str(&widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    out.push_str(&line(&cells));
    out
}

pub const REPORT_CSV_HEADER: &str = "model,recipe,size,auc,avg_auc,params,seed,seconds";

/// One row per subset size plus a final `avg` row. With `timing` off the
/// seconds column is left empty so reruns produce identical bytes.
pub fn render_csv(report: &BenchmarkReport, timing: bool) -> String {
    let mut out = String::new();
    out.push_str(REPORT_CSV_HEADER);
    out.push('\n');
    let secs = |s: f64| if timing { format!("{s:.3}") } else { String::new() };
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{},{},{}",
            report.model,
            report.recipe,
            r.size,
            r.auc,
            report.avg_auc,
            report.params,
            report.seed,
            secs(r.seconds)
        );
    }
    let _ = writeln!(
        out,
        "{},{},avg,{:.6},{:.6},{},{},{}",
        report.model,
        report.recipe,
        report.avg_auc,
        report.avg_auc,
        report.params,
        report.seed,
        secs(report.total_seconds())
    );
    out
}

/// Fixed-width table followed by the CSV rendering.
pub fn render_report(report: &BenchmarkReport) -> String {
    format!("{}\n{}", render_table(report), render_csv(report, true))
}
