use serde::{Deserialize, Serialize};

use super::{check_lengths, UqError};

/// MAE of retained points after removing the `p`% most uncertain
/// (`p = 0..=99`), with the error-ordered oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceCurve {
    pub percentiles: Vec<u32>,
    pub mae: Vec<f64>,
    pub oracle_mae: Vec<f64>,
    /// `sum_p (mae_p - oracle_p) / 100`, signed.
    pub auco: f64,
}

/// Mean of the retained errors, summed in ascending order so that equal
/// multisets give bit-identical results.
fn retained_mae(errors: &[f64], order: &[usize], drop: usize) -> f64 {
    let mut kept: Vec<f64> = order[drop..].iter().map(|&i| errors[i]).collect();
    kept.sort_by(f64::total_cmp);
    kept.iter().sum::<f64>() / kept.len() as f64
}

fn descending_by(key: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..key.len()).collect();
    order.sort_by(|&i, &j| key[j].total_cmp(&key[i]).then(i.cmp(&j)));
    order
}

pub fn confidence_curve(mu: &[f64], var: &[f64], y: &[f64]) -> Result<ConfidenceCurve, UqError> {
    check_lengths(mu, var, y)?;
    let n = y.len();
    if n == 0 {
        return Err(UqError::LengthMismatch("no samples".into()));
    }
    let errors: Vec<f64> = mu.iter().zip(y).map(|(m, t)| (m - t).abs()).collect();
    let by_unc = descending_by(var);
    let by_err = descending_by(&errors);
    let percentiles: Vec<u32> = (0..100).collect();
    let mut mae = Vec::with_capacity(100);
    let mut oracle_mae = Vec::with_capacity(100);
    for &p in &percentiles {
        let drop = (p as usize * n) / 100;
        mae.push(retained_mae(&errors, &by_unc, drop));
        oracle_mae.push(retained_mae(&errors, &by_err, drop));
    }
    let auco = mae.iter().zip(&oracle_mae).map(|(c, o)| c - o).sum::<f64>() / 100.0;
    Ok(ConfidenceCurve {
        percentiles,
        mae,
        oracle_mae,
        auco,
    })
}
