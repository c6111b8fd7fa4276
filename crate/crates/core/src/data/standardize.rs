use super::ActigraphyRecord;
use crate::error::{contract_err, Result};

pub const STANDARDIZE_EPS: f64 = 1e-8;

/// Per-minute population moments of a cohort.
#[derive(Clone, Debug, PartialEq)]
pub struct MinuteStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl MinuteStats {
    pub fn fit(records: &[ActigraphyRecord]) -> Result<Self> {
        if records.len() < 2 {
            return contract_err(format!("standardization needs at least 2 records, got {}", records.len()));
        }
        let t = records[0].series.len();
        if let Some(r) = records.iter().find(|r| r.series.len() != t) {
            return contract_err(format!(
                "participant {} has {} minutes, expected {t}",
                r.participant_id,
                r.series.len()
            ));
        }
        let n = records.len() as f64;
        let mut mean = vec![0.0f64; t];
        for r in records {
            for (m, &v) in mean.iter_mut().zip(&r.series) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0f64; t];
        for r in records {
            for ((s, &v), &m) in var.iter_mut().zip(&r.series).zip(&mean) {
                let d = v as f64 - m;
                *s += d * d;
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
        Ok(MinuteStats { mean, std })
    }

    /// z-scores a series; minutes whose spread is below `eps` map to 0.
    pub fn apply(&self, series: &[f32], eps: f64) -> Result<Vec<f32>> {
        if series.len() != self.mean.len() {
            return contract_err(format!(
                "series of {} minutes does not match statistics over {}",
                series.len(),
                self.mean.len()
            ));
        }
        Ok(series
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &s))| if s < eps { 0.0 } else { ((v as f64 - m) / s) as f32 })
            .collect())
    }
}

/// z-scores every minute position across participants.
pub fn standardize_per_minute(records: &[ActigraphyRecord], eps: f64) -> Result<(Vec<ActigraphyRecord>, MinuteStats)> {
    let stats = MinuteStats::fit(records)?;
    let out = records
        .iter()
        .map(|r| Ok(ActigraphyRecord { series: stats.apply(&r.series, eps)?, ..r.clone() }))
        .collect::<Result<Vec<_>>>()?;
    Ok((out, stats))
}
