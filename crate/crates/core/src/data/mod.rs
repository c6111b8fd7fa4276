//! Dataset I/O and preprocessing.

mod csv;
mod savgol;
mod split;
mod standardize;
mod synth;

pub use csv::{format_sig6, load_csv, parse_csv, save_csv, write_csv};
pub use savgol::{savgol_coefficients, savgol_smooth, SAVGOL_POLY, SAVGOL_WINDOW};
pub use split::{read_manifest, stratified_subsets, write_manifest, SplitSpec, SubsetSize, SubsetSplit, Subsets};
pub use standardize::{standardize_per_minute, MinuteStats, STANDARDIZE_EPS};
pub use synth::{synth_generate, synth_generate_with_len};

use crate::error::{contract_err, Result};

/// One participant's minute-level activity series.
#[derive(Clone, Debug, PartialEq)]
pub struct ActigraphyRecord {
    pub participant_id: String,
    pub series: Vec<f32>,
    pub label: Option<u8>,
}

impl ActigraphyRecord {
    pub fn new(participant_id: impl Into<String>, series: Vec<f32>, label: Option<u8>) -> Result<Self> {
        let rec = ActigraphyRecord { participant_id: participant_id.into(), series, label };
        rec.validate(None)?;
        Ok(rec)
    }

    pub fn validate(&self, expected_len: Option<usize>) -> Result<()> {
        if let Some(t) = expected_len {
            if self.series.len() != t {
                return contract_err(format!(
                    "participant {} has {} minutes, expected {t}",
                    self.participant_id,
                    self.series.len()
                ));
            }
        }
        if let Some(i) = self.series.iter().position(|v| !v.is_finite()) {
            return contract_err(format!("participant {} has a non-finite value at minute {i}", self.participant_id));
        }
        if let Some(l) = self.label {
            if l > 1 {
                return contract_err(format!("participant {} has label {l}, expected 0 or 1", self.participant_id));
            }
        }
        Ok(())
    }
}

/// Labels of every record, failing on the first unlabeled one.
pub fn labels_of(records: &[ActigraphyRecord]) -> Result<Vec<u8>> {
    records
        .iter()
        .map(|r| match r.label {
            Some(l) => Ok(l),
            None => contract_err(format!("participant {} has no label", r.participant_id)),
        })
        .collect()
}

/// Applies the smoother to every record in place.
pub fn smooth_records(records: &mut [ActigraphyRecord], window: usize, poly: usize) -> Result<()> {
    for r in records {
        r.series = savgol_smooth(&r.series, window, poly)?;
    }
    Ok(())
}
