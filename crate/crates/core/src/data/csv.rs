use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::ActigraphyRecord;
use crate::error::{PatError, Result};

fn parse_err<T>(line: usize, message: impl Into<String>) -> Result<T> {
    Err(PatError::Parse { line, message: message.into() })
}

/// Reads a dataset file with header `participant_id,label,m0,...,m{T-1}`.
pub fn load_csv(path: &Path) -> Result<Vec<ActigraphyRecord>> {
    let ctx = || path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| PatError::from(e).context(ctx()))?;
    parse_csv(&text).map_err(|e| e.context(ctx()))
}

pub fn parse_csv(text: &str) -> Result<Vec<ActigraphyRecord>> {
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return parse_err(1, "empty file");
    };
    let cols: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
    if cols.len() < 3 || cols[0] != "participant_id" || cols[1] != "label" {
        return parse_err(1, "header must start with participant_id,label,m0");
    }
    for (i, c) in cols[2..].iter().enumerate() {
        if *c != format!("m{i}") {
            return parse_err(1, format!("header column {} is {c:?}, expected \"m{i}\"", i + 2));
        }
    }
    let minutes = cols.len() - 2;

    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != minutes + 2 {
            return parse_err(
                line_no,
                format!("row has {} values, expected {minutes} (plus id and label)", cells.len().saturating_sub(2)),
            );
        }
        let id = cells[0].to_string();
        if id.is_empty() {
            return parse_err(line_no, "empty participant_id");
        }
        if !seen.insert(id.clone()) {
            return parse_err(line_no, format!("duplicate participant_id {id:?}"));
        }
        let label = match cells[1].trim() {
            "" => None,
            "0" => Some(0),
            "1" => Some(1),
            other => return parse_err(line_no, format!("label must be 0, 1 or empty, got {other:?}")),
        };
        let mut series = Vec::with_capacity(minutes);
        for (m, cell) in cells[2..].iter().enumerate() {
            match cell.trim().parse::<f32>() {
                Ok(v) if v.is_finite() => series.push(v),
                _ => return parse_err(line_no, format!("minute m{m} is not a finite number: {cell:?}")),
            }
        }
        records.push(ActigraphyRecord { participant_id: id, series, label });
    }
    Ok(records)
}

/// Formats like C's `%.6g`: six significant digits, trailing zeros dropped.
pub fn format_sig6(x: f32) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    let x = x as f64;
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..6).contains(&exp) {
        let mantissa = trim_zeros(mantissa);
        return format!("{mantissa}e{exp}");
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn write_csv<W: Write>(out: W, records: &[ActigraphyRecord]) -> Result<()> {
    let mut w = BufWriter::new(out);
    let minutes = records.first().map_or(0, |r| r.series.len());
    write!(w, "participant_id,label")?;
    for m in 0..minutes {
        write!(w, ",m{m}")?;
    }
    writeln!(w)?;
    for r in records {
        if r.series.len() != minutes {
            return Err(PatError::Contract(format!(
                "participant {} has {} minutes, expected {minutes}",
                r.participant_id,
                r.series.len()
            )));
        }
        write!(w, "{},", r.participant_id)?;
        if let Some(l) = r.label {
            write!(w, "{l}")?;
        }
        for v in &r.series {
            write!(w, ",{}", format_sig6(*v))?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(path: &Path, records: &[ActigraphyRecord]) -> Result<()> {
    write_csv(fs::File::create(path)?, records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, series: &[f32], label: Option<u8>) -> ActigraphyRecord {
        ActigraphyRecord::new(id, series.to_vec(), label).unwrap()
    }

    fn header(t: usize) -> String {
        let mut h = "participant_id,label".to_string();
        for m in 0..t {
            h.push_str(&format!(",m{m}"));
        }
        h
    }

    #[test]
    fn reads_three_rows_with_optional_label() {
        let text = format!("{}\na,1,1,2,3\nb,,0.5,0.25,-1\nc,0,0,0,0\n", header(3));
        let recs = parse_csv(&text).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[1].label, None);
        assert_eq!(recs[1].series, vec![0.5, 0.25, -1.0]);
    }

    #[test]
    fn short_row_is_named() {
        let mut text = header(10_080);
        text.push_str("\np1,0");
        for _ in 0..10_079 {
            text.push_str(",1");
        }
        text.push('\n');
        match parse_csv(&text) {
            Err(PatError::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("10079"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_cells_and_duplicates_are_rejected() {
        let bad = format!("{}\na,1,1,x,3\n", header(3));
        assert!(matches!(parse_csv(&bad), Err(PatError::Parse { line: 2, .. })));
        let dup = format!("{}\na,1,1,2,3\na,0,1,2,3\n", header(3));
        assert!(matches!(parse_csv(&dup), Err(PatError::Parse { line: 3, .. })));
        let label = format!("{}\na,2,1,2,3\n", header(3));
        assert!(parse_csv(&label).is_err());
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(1.0), "1");
        assert_eq!(format_sig6(-2.5), "-2.5");
        assert_eq!(format_sig6(123456.7), "123457");
        assert_eq!(format_sig6(0.000_123_456_79), "0.000123457");
        assert_eq!(format_sig6(1.5e-7), "1.5e-7");
        assert_eq!(format_sig6(3.25e9), "3.25e9");
    }

    #[test]
    fn save_load_round_trip_is_exact_for_six_digit_values() {
        let recs = vec![
            record("p0", &[0.123457, -4.5, 1000.0, 7.0e-5], Some(1)),
            record("p1", &[12.3456, 0.0, -0.5, 99999.9], None),
        ];
        let mut buf = Vec::new();
        write_csv(&mut buf, &recs).unwrap();
        let back = parse_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, recs);
    }
}
