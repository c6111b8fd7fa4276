use crate::error::{contract_err, Result};

pub const SAVGOL_WINDOW: usize = 51;
pub const SAVGOL_POLY: usize = 3;

/// Convolution weights that evaluate, at the window centre, the
/// least-squares polynomial of degree `poly` fitted to `window` samples.
pub fn savgol_coefficients(window: usize, poly: usize) -> Result<Vec<f64>> {
    if window.is_multiple_of(2) {
        return contract_err(format!("Savitzky-Golay window must be odd, got {window}"));
    }
    if poly >= window {
        return contract_err(format!("polynomial order {poly} must be below window {window}"));
    }
    let half = (window / 2) as i64;
    let terms = poly + 1;
    // normal matrix AᵀA with A[j][k] = j^k over j = -half..=half
    let mut gram = vec![vec![0.0f64; terms + 1]; terms];
    for (r, row) in gram.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().take(terms).enumerate() {
            *cell = (-half..=half).map(|j| (j as f64).powi((r + c) as i32)).sum();
        }
        row[terms] = if r == 0 { 1.0 } else { 0.0 };
    }
    let z = solve(gram)?;
    Ok((-half..=half).map(|j| z.iter().enumerate().map(|(k, zk)| zk * (j as f64).powi(k as i32)).sum()).collect())
}

/// Gauss-Jordan elimination with partial pivoting on an augmented matrix.
fn solve(mut m: Vec<Vec<f64>>) -> Result<Vec<f64>> {
    let n = m.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())).expect("non-empty");
        if m[pivot][col].abs() < 1e-300 {
            return contract_err("singular least-squares system");
        }
        m.swap(col, pivot);
        let p = m[col][col];
        m[col].iter_mut().for_each(|v| *v /= p);
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    let pivot_row = m[col].clone();
                    m[r].iter_mut().zip(&pivot_row).for_each(|(v, &pv)| *v -= f * pv);
                }
            }
        }
    }
    Ok(m.into_iter().map(|row| row[n]).collect())
}

/// Savitzky-Golay smoothing. Edges are extended by point reflection about
/// the end samples (`x[-k] = 2·x[0] − x[k]`), which keeps straight lines
/// straight.
pub fn savgol_smooth(series: &[f32], window: usize, poly: usize) -> Result<Vec<f32>> {
    let coeffs = savgol_coefficients(window, poly)?;
    let t = series.len();
    if t < window {
        return contract_err(format!("series of length {t} is shorter than the window {window}"));
    }
    let half = window / 2;
    let first = series[0] as f64;
    let last = series[t - 1] as f64;
    let mut padded = Vec::with_capacity(t + 2 * half);
    for k in (1..=half).rev() {
        padded.push(2.0 * first - series[k] as f64);
    }
    padded.extend(series.iter().map(|&v| v as f64));
    for k in 1..=half {
        padded.push(2.0 * last - series[t - 1 - k] as f64);
    }
    Ok((0..t).map(|i| padded[i..i + window].iter().zip(&coeffs).map(|(x, c)| x * c).sum::<f64>() as f32).collect())
}
