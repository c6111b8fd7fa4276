//! Attention-based importance maps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::format_sig6;
use crate::error::{contract_err, shape_err, PatError, Result};
use crate::finetune::Classifier;
use crate::model::AttentionBundle;

pub const DAY_MINUTES: usize = 1440;

/// How attention matrices are reduced to one score per patch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Aggregation {
    /// Attention received: sum over queries for each key.
    #[default]
    Column,
    /// Sum over keys for each query. Every row of a softmax sums to one, so
    /// this always yields the constant vector `1/N`.
    Row,
}

impl FromStr for Aggregation {
    type Err = PatError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "column" => Ok(Aggregation::Column),
            "row" => Ok(Aggregation::Row),
            other => contract_err(format!("unknown aggregation {other:?} (expected column or row)")),
        }
    }
}

/// Inference pass over a full series, capturing every block's attention.
pub fn extract_attention(model: &Classifier, series: &[f32]) -> Result<AttentionBundle> {
    Ok(model.predict_with_attention(series)?.1)
}

/// Column-sum importance of the last layer, averaged over heads and
/// normalized to sum to one.
pub fn aggregate_importance(bundle: &AttentionBundle) -> Result<Vec<f32>> {
    aggregate_importance_with(bundle, Aggregation::Column)
}

pub fn aggregate_importance_with(bundle: &AttentionBundle, mode: Aggregation) -> Result<Vec<f32>> {
    let Some(layer) = bundle.last() else {
        return contract_err("attention bundle is empty");
    };
    let n = layer.tokens;
    if n == 0 || layer.heads == 0 || layer.probs.len() != layer.heads * n * n {
        return shape_err(format!(
            "attention layer holds {} values, expected {} heads of {n}×{n}",
            layer.probs.len(),
            layer.heads
        ));
    }
    let mut acc = vec![0.0f64; n];
    for h in 0..layer.heads {
        let m = layer.head(h);
        for q in 0..n {
            let row = &m[q * n..(q + 1) * n];
            match mode {
                Aggregation::Column => {
                    for (a, &p) in acc.iter_mut().zip(row) {
                        *a += p as f64;
                    }
                }
                Aggregation::Row => acc[q] += row.iter().map(|&p| p as f64).sum::<f64>(),
            }
        }
    }
    // dividing by the head count averages; the final normalization makes it moot
    let total: f64 = acc.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Ok(vec![1.0 / n as f32; n]);
    }
    Ok(acc.iter().map(|&a| (a / total) as f32).collect())
}

/// Repeats each patch score `patch_size` times.
pub fn expand_to_minutes(scores: &[f32], patch_size: usize) -> Vec<f32> {
    scores.iter().flat_map(|&s| std::iter::repeat_n(s, patch_size)).collect()
}

/// Minute-level importance for one standardized series.
pub fn explain_series(model: &Classifier, series: &[f32], mode: Aggregation) -> Result<Vec<f32>> {
    let bundle = extract_attention(model, series)?;
    let scores = aggregate_importance_with(&bundle, mode)?;
    Ok(expand_to_minutes(&scores, model.cfg.patch_size))
}

/// Mean over aligned days: output minute `m` averages minutes `m`, `m+1440`, ….
pub fn day_average(x: &[f32]) -> Result<Vec<f32>> {
    if x.is_empty() || !x.len().is_multiple_of(DAY_MINUTES) {
        return shape_err(format!("{} minutes is not a whole number of days", x.len()));
    }
    let days = x.len() / DAY_MINUTES;
    Ok((0..DAY_MINUTES)
        .map(|m| (0..days).map(|d| x[d * DAY_MINUTES + m] as f64).sum::<f64>() / days as f64)
        .map(|v| v as f32)
        .collect())
}

/// Affine map onto `[0, 1]`; a constant input maps to zeros.
pub fn min_max_scale(x: &[f32]) -> Vec<f32> {
    let lo = x.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    if span.is_nan() || span <= 0.0 {
        return vec![0.0; x.len()];
    }
    x.iter().map(|&v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
}

/// Paths written by [`export_heatmap`].
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapFiles {
    pub csv: PathBuf,
    pub svg: PathBuf,
}

/// Writes `<stem>.csv` (minute, activity, importance) and `<stem>.svg`
/// (week trace over an importance color band, plus the day-averaged view
/// when the series covers whole days).
pub fn export_heatmap(series: &[f32], importance: &[f32], stem: &Path) -> Result<HeatmapFiles> {
    if series.len() != importance.len() {
        return shape_err(format!("series has {} minutes, importance {}", series.len(), importance.len()));
    }
    if series.is_empty() {
        return contract_err("cannot export an empty series");
    }
    let csv = stem.with_extension("csv");
    let svg = stem.with_extension("svg");
    fs::write(&csv, heatmap_csv(series, importance))?;
    fs::write(&svg, heatmap_svg(series, importance))?;
    Ok(HeatmapFiles { csv, svg })
}

pub fn heatmap_csv(series: &[f32], importance: &[f32]) -> String {
    let mut out = String::with_capacity(series.len() * 24);
    out.push_str("minute,activity,importance\n");
    for (m, (&a, &i)) in series.iter().zip(importance).enumerate() {
        let _ = writeln!(out, "{m},{},{}", format_sig6(a), format_sig6(i));
    }
    out
}

const WIDTH: f64 = 1200.0;
const PANEL: f64 = 160.0;
const MARGIN: f64 = 30.0;

/// Blue (low) through pale grey to red (high).
fn color(t: f32) -> String {
    let stops = [(59.0, 76.0, 192.0), (221.0, 221.0, 221.0), (180.0, 4.0, 38.0)];
    let t = t.clamp(0.0, 1.0) as f64 * 2.0;
    let (a, b, f) = if t <= 1.0 { (stops[0], stops[1], t) } else { (stops[1], stops[2], t - 1.0) };
    let mix = |x: f64, y: f64| (x + (y - x) * f).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

fn panel(out: &mut String, top: f64, title: &str, series: &[f32], importance: &[f32]) {
    let n = series.len();
    let dx = WIDTH / n as f64;
    let _ = writeln!(out, r#"<text x="0" y="{:.1}" font-family="sans-serif" font-size="14">{title}</text>"#, top - 8.0);
    let scaled = min_max_scale(importance);
    let mut start = 0;
    while start < n {
        let c = color(scaled[start]);
        let mut end = start + 1;
        while end < n && color(scaled[end]) == c {
            end += 1;
        }
        let _ = writeln!(
            out,
            r#"<rect x="{:.2}" y="{top:.1}" width="{:.2}" height="{PANEL:.1}" fill="{c}"/>"#,
            start as f64 * dx,
            (end - start) as f64 * dx
        );
        start = end;
    }
    let level = min_max_scale(series);
    let mut points = String::with_capacity(n * 14);
    for (m, &v) in level.iter().enumerate() {
        let _ = write!(points, "{:.1},{:.1} ", (m as f64 + 0.5) * dx, top + PANEL * (1.0 - v as f64));
    }
    let _ =
        writeln!(out, r#"<polyline fill="none" stroke="black" stroke-width="0.6" points="{}"/>"#, points.trim_end());
}

pub fn heatmap_svg(series: &[f32], importance: &[f32]) -> String {
    let day = day_average(series).ok().zip(day_average(importance).ok());
    let panels = if day.is_some() { 2.0 } else { 1.0 };
    let height = panels * (PANEL + MARGIN) + MARGIN;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">"#
    );
    panel(
        &mut out,
        MARGIN,
        &format!("activity over {} minutes, colored by attention importance", series.len()),
        series,
        importance,
    );
    if let Some((s, i)) = day {
        panel(&mut out, 2.0 * MARGIN + PANEL, "averaged into one day", &s, &i);
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerAttention;

    fn bundle(heads: usize, tokens: usize, probs: Vec<f32>) -> AttentionBundle {
        AttentionBundle { layers: vec![LayerAttention { heads, tokens, probs }] }
    }

    #[test]
    fn column_sums_hand_example() {
        let b = bundle(1, 2, vec![1.0, 0.0, 1.0, 0.0]);
        assert_eq!(aggregate_importance(&b).unwrap(), vec![1.0, 0.0]);
        assert_eq!(aggregate_importance_with(&b, Aggregation::Row).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn uniform_attention_gives_one_over_n() {
        let n = 7;
        let b = bundle(3, n, vec![1.0 / n as f32; 3 * n * n]);
        for v in aggregate_importance(&b).unwrap() {
            assert!((v - 1.0 / n as f32).abs() < 1e-7);
        }
    }

    #[test]
    fn only_the_last_layer_counts() {
        let mut b = bundle(1, 2, vec![0.5; 4]);
        b.layers.push(LayerAttention { heads: 1, tokens: 2, probs: vec![0.0, 1.0, 0.0, 1.0] });
        assert_eq!(aggregate_importance(&b).unwrap(), vec![0.0, 1.0]);
        assert!(aggregate_importance(&AttentionBundle::default()).is_err());
    }

    #[test]
    fn expansion_examples() {
        assert_eq!(expand_to_minutes(&[1.0, 0.0], 3), vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(expand_to_minutes(&vec![0.0; 560], 18).len(), 10_080);
    }

    #[test]
    fn day_average_over_aligned_days() {
        let x: Vec<f32> = (0..7 * DAY_MINUTES).map(|m| (m / DAY_MINUTES) as f32).collect();
        let d = day_average(&x).unwrap();
        assert_eq!(d.len(), DAY_MINUTES);
        assert!(d.iter().all(|&v| (v - 3.0).abs() < 1e-6));
        assert!(day_average(&x[1..]).is_err());
    }

    #[test]
    fn scaling_and_colors() {
        assert_eq!(min_max_scale(&[2.0, 4.0, 3.0]), vec![0.0, 1.0, 0.5]);
        assert_eq!(min_max_scale(&[1.0, 1.0]), vec![0.0, 0.0]);
        assert_eq!(color(0.0), "#3b4cc0");
        assert_eq!(color(1.0), "#b40426");
    }

    #[test]
    fn csv_has_header_plus_one_line_per_minute() {
        let text = heatmap_csv(&[1.0, 2.5], &[0.25, 0.75]);
        assert_eq!(text, "minute,activity,importance\n0,1,0.25\n1,2.5,0.75\n");
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let s: Vec<f32> = (0..DAY_MINUTES * 2).map(|m| (m as f32 / 100.0).sin()).collect();
        let imp = expand_to_minutes(&vec![1.0 / 160.0; 160], 18);
        let svg = heatmap_svg(&s, &imp);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
    }
}
