use serde::{Deserialize, Serialize};

use super::normal::inverse_normal_cdf;
use super::{check_lengths, check_variance, EnsembleSummary, UqError};
use crate::diffcore::nll_value;

/// Number of interior confidence levels (`i / 100`, `i = 1..=99`).
pub const LEVELS: usize = 99;

/// Calibration curve over the interior levels with its summary gaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub levels: Vec<f64>,
    pub fractions: Vec<f64>,
    pub mca: f64,
    pub ece: f64,
    pub mce: f64,
}

/// Affine variance correction `a * var + b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub a: f64,
    pub b: f64,
}

impl CalibrationParams {
    pub fn apply(&self, var: &[f64]) -> Vec<f64> {
        var.iter().map(|v| self.a * v + self.b).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecalibrationResult {
    /// Factor on standard deviations.
    pub a: f64,
    pub pre_mca: f64,
    pub post_mca: f64,
}

/// Standardized absolute errors `|mu - y| / sigma`, sorted ascending.
fn sorted_z(mu: &[f64], var: &[f64], y: &[f64]) -> Vec<f64> {
    let mut z: Vec<f64> = (0..y.len())
        .map(|i| (mu[i] - y[i]).abs() / var[i].sqrt())
        .collect();
    z.sort_by(f64::total_cmp);
    z
}

fn fraction_within(z: &[f64], bound: f64) -> f64 {
    z.partition_point(|&v| v <= bound) as f64 / z.len() as f64
}

fn curve_from_z(z: &[f64]) -> CalibrationCurve {
    let levels: Vec<f64> = (1..=LEVELS).map(|i| i as f64 / 100.0).collect();
    let fractions: Vec<f64> = levels
        .iter()
        .map(|&c| fraction_within(z, inverse_normal_cdf((1.0 + c) / 2.0)))
        .collect();
    let gaps: Vec<f64> = levels
        .iter()
        .zip(&fractions)
        .map(|(c, f)| (f - c).abs())
        .collect();
    let ece = gaps.iter().sum::<f64>() / LEVELS as f64;
    let mce = gaps.iter().cloned().fold(0.0, f64::max);
    // The c = 0 interval is the single point mu; the c = 1 interval is the real line.
    let mut xs = Vec::with_capacity(LEVELS + 2);
    let mut gs = Vec::with_capacity(LEVELS + 2);
    xs.push(0.0);
    gs.push(fraction_within(z, 0.0));
    xs.extend_from_slice(&levels);
    gs.extend_from_slice(&gaps);
    xs.push(1.0);
    gs.push(0.0);
    let mca = xs
        .windows(2)
        .zip(gs.windows(2))
        .map(|(x, g)| 0.5 * (x[1] - x[0]) * (g[0] + g[1]))
        .sum();
    CalibrationCurve {
        levels,
        fractions,
        mca,
        ece,
        mce,
    }
}

/// Empirical coverage of central Gaussian intervals at levels `0.01..0.99`.
pub fn calibration_curve(mu: &[f64], var: &[f64], y: &[f64]) -> Result<CalibrationCurve, UqError> {
    check_lengths(mu, var, y)?;
    if y.is_empty() {
        return Err(UqError::LengthMismatch("no samples".into()));
    }
    check_variance(var)?;
    Ok(curve_from_z(&sorted_z(mu, var, y)))
}

pub fn miscalibration_area(mu: &[f64], var: &[f64], y: &[f64]) -> Result<f64, UqError> {
    calibration_curve(mu, var, y).map(|c| c.mca)
}

fn penalized_nll(mu: &[f64], var: &[f64], y: &[f64], a: f64, b: f64) -> f64 {
    if a < 0.0 {
        return f64::INFINITY;
    }
    let adj: Vec<f64> = var.iter().map(|v| a * v + b).collect();
    if adj.iter().any(|&v| !(v > 1e-12)) {
        return f64::INFINITY;
    }
    nll_value(mu, &adj, y)
}

fn nelder_mead(f: impl Fn([f64; 2]) -> f64, start: [f64; 2], steps: [f64; 2]) -> [f64; 2] {
    let mut simplex = [
        start,
        [start[0] + steps[0], start[1]],
        [start[0], start[1] + steps[1]],
    ];
    let mut vals = simplex.map(&f);
    for _ in 0..2000 {
        let mut idx = [0usize, 1, 2];
        idx.sort_by(|&i, &j| vals[i].total_cmp(&vals[j]));
        simplex = idx.map(|i| simplex[i]);
        vals = idx.map(|i| vals[i]);
        if (vals[2] - vals[0]).abs() <= 1e-10 * (1.0 + vals[0].abs()) {
            break;
        }
        let c = [
            0.5 * (simplex[0][0] + simplex[1][0]),
            0.5 * (simplex[0][1] + simplex[1][1]),
        ];
        let along = |t: f64| [c[0] + t * (simplex[2][0] - c[0]), c[1] + t * (simplex[2][1] - c[1])];
        let xr = along(-1.0);
        let fr = f(xr);
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = f(xe);
            if fe < fr {
                simplex[2] = xe;
                vals[2] = fe;
            } else {
                simplex[2] = xr;
                vals[2] = fr;
            }
        } else if fr < vals[1] {
            simplex[2] = xr;
            vals[2] = fr;
        } else {
            let xc = if fr < vals[2] { along(-0.5) } else { along(0.5) };
            let fc = f(xc);
            if fc < vals[2].min(fr) {
                simplex[2] = xc;
                vals[2] = fc;
            } else {
                for k in 1..3 {
                    simplex[k] = [
                        0.5 * (simplex[0][0] + simplex[k][0]),
                        0.5 * (simplex[0][1] + simplex[k][1]),
                    ];
                    vals[k] = f(simplex[k]);
                }
            }
        }
    }
    let best = (0..3).min_by(|&i, &j| vals[i].total_cmp(&vals[j])).unwrap();
    simplex[best]
}

/// Fits `a * var + b` on validation by Nelder-Mead from `(1, 0)` and returns
/// the parameters with the corrected NLL on the test split.
pub fn calibrated_nll(
    val: &EnsembleSummary,
    test: &EnsembleSummary,
    y_val: &[f64],
    y_test: &[f64],
) -> Result<(CalibrationParams, f64), UqError> {
    if y_val.is_empty() {
        return Err(UqError::EmptyValidation);
    }
    check_lengths(&val.mu, &val.total, y_val)?;
    check_lengths(&test.mu, &test.total, y_test)?;
    check_variance(&val.total)?;
    let mean_var = val.total.iter().sum::<f64>() / val.total.len() as f64;
    let f = |p: [f64; 2]| penalized_nll(&val.mu, &val.total, y_val, p[0], p[1]);
    let [a, b] = nelder_mead(f, [1.0, 0.0], [0.1, 0.1 * mean_var]);
    let params = CalibrationParams { a, b };
    let adj = params.apply(&test.total);
    let cnll = if adj.iter().all(|&v| v > 0.0) {
        nll_value(&test.mu, &adj, y_test)
    } else {
        f64::INFINITY
    };
    Ok((params, cnll))
}

fn mca_at(z: &[f64], a: f64) -> f64 {
    let scaled: Vec<f64> = z.iter().map(|v| v / a).collect();
    curve_from_z(&scaled).mca
}

/// Scales standard deviations by the `a` minimizing validation MCA and
/// applies it to the test summary.
pub fn recalibrate(
    val: &EnsembleSummary,
    test: &EnsembleSummary,
    y_val: &[f64],
) -> Result<(RecalibrationResult, EnsembleSummary), UqError> {
    if y_val.is_empty() {
        return Err(UqError::EmptyValidation);
    }
    check_lengths(&val.mu, &val.total, y_val)?;
    check_variance(&val.total)?;
    let z = sorted_z(&val.mu, &val.total, y_val);
    let pre_mca = curve_from_z(&z).mca;

    const GRID: usize = 400;
    let (lo, hi) = (1e-3f64.ln(), 1e3f64.ln());
    let grid: Vec<f64> = (0..GRID)
        .map(|i| (lo + (hi - lo) * i as f64 / (GRID - 1) as f64).exp())
        .collect();
    let mut best_a = 1.0;
    let mut best = pre_mca;
    let mut best_i = None;
    for (i, &a) in grid.iter().enumerate() {
        let m = mca_at(&z, a);
        if m < best {
            best = m;
            best_a = a;
            best_i = Some(i);
        }
    }
    if let Some(i) = best_i {
        let mut l = grid[i.saturating_sub(1)].ln();
        let mut r = grid[(i + 1).min(GRID - 1)].ln();
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut x1 = r - phi * (r - l);
        let mut x2 = l + phi * (r - l);
        let mut f1 = mca_at(&z, x1.exp());
        let mut f2 = mca_at(&z, x2.exp());
        while r - l > 1e-6 {
            if f1 <= f2 {
                r = x2;
                x2 = x1;
                f2 = f1;
                x1 = r - phi * (r - l);
                f1 = mca_at(&z, x1.exp());
            } else {
                l = x1;
                x1 = x2;
                f1 = f2;
                x2 = l + phi * (r - l);
                f2 = mca_at(&z, x2.exp());
            }
        }
        let (xa, fa) = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
        if fa < best {
            best = fa;
            best_a = xa.exp();
        }
    }
    Ok((
        RecalibrationResult {
            a: best_a,
            pre_mca,
            post_mca: best,
        },
        test.scaled(best_a),
    ))
}
