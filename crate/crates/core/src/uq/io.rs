use std::path::Path;

use super::{CalibrationCurve, ConfidenceCurve, EnsembleSummary, Member, PredictionSet, UqError};

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> UqError + '_ {
    move |source| UqError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> UqError + '_ {
    move |e| UqError::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>, UqError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    Ok(csv::Writer::from_writer(file))
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<(), UqError> {
    w.flush().map_err(io_err(path))
}

/// Columns `id, y, mu_<name>, var_<name>, ...`.
pub fn write_predictions_csv(path: &Path, preds: &PredictionSet) -> Result<(), UqError> {
    preds.validate()?;
    let mut w = writer(path)?;
    let mut header = vec!["id".to_string(), "y".to_string()];
    for m in &preds.members {
        header.push(format!("mu_{}", m.name));
        header.push(format!("var_{}", m.name));
    }
    w.write_record(&header).map_err(csv_err(path))?;
    for i in 0..preds.len() {
        let mut row = vec![preds.ids[i].to_string(), preds.y[i].to_string()];
        for m in &preds.members {
            row.push(m.mu[i].to_string());
            row.push(m.var[i].to_string());
        }
        w.write_record(&row).map_err(csv_err(path))?;
    }
    finish(w, path)
}

pub fn read_predictions_csv(path: &Path) -> Result<PredictionSet, UqError> {
    let bad = |message: String| UqError::Format {
        path: path.display().to_string(),
        message,
    };
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut r = csv::Reader::from_reader(file);
    let header = r.headers().map_err(csv_err(path))?.clone();
    if header.len() < 4 || header.len() % 2 != 0 || &header[0] != "id" || &header[1] != "y" {
        return Err(bad("expected columns id, y, then mu_*/var_* pairs".into()));
    }
    let mut members = Vec::new();
    for k in (2..header.len()).step_by(2) {
        let name = header[k]
            .strip_prefix("mu_")
            .ok_or_else(|| bad(format!("column {} should start with mu_", k + 1)))?;
        if header[k + 1].strip_prefix("var_") != Some(name) {
            return Err(bad(format!("column {} should be var_{name}", k + 2)));
        }
        members.push(Member {
            name: name.to_string(),
            mu: Vec::new(),
            var: Vec::new(),
        });
    }
    let mut ids = Vec::new();
    let mut y = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let num = |k: usize| -> Result<f64, UqError> {
            rec[k]
                .trim()
                .parse::<f64>()
                .map_err(|_| bad(format!("row {}: bad number {:?}", line + 2, &rec[k])))
        };
        ids.push(
            rec[0]
                .trim()
                .parse::<usize>()
                .map_err(|_| bad(format!("row {}: bad id {:?}", line + 2, &rec[0])))?,
        );
        y.push(num(1)?);
        for (j, m) in members.iter_mut().enumerate() {
            m.mu.push(num(2 + 2 * j)?);
            m.var.push(num(3 + 2 * j)?);
        }
    }
    let set = PredictionSet { ids, y, members };
    set.validate()?;
    Ok(set)
}

pub fn write_calibration_csv(path: &Path, curve: &CalibrationCurve) -> Result<(), UqError> {
    let mut w = writer(path)?;
    w.write_record(["level", "empirical_fraction"]).map_err(csv_err(path))?;
    for (c, f) in curve.levels.iter().zip(&curve.fractions) {
        w.write_record([c.to_string(), f.to_string()]).map_err(csv_err(path))?;
    }
    finish(w, path)
}

pub fn write_confidence_csv(path: &Path, curve: &ConfidenceCurve) -> Result<(), UqError> {
    let mut w = writer(path)?;
    w.write_record(["percentile", "mae", "oracle_mae"]).map_err(csv_err(path))?;
    for i in 0..curve.percentiles.len() {
        w.write_record([
            curve.percentiles[i].to_string(),
            curve.mae[i].to_string(),
            curve.oracle_mae[i].to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    finish(w, path)
}

/// Per-sample decomposition: `id, y, mu, aleatoric, epistemic, total`.
pub fn write_summary_csv(
    path: &Path,
    ids: &[usize],
    y: &[f64],
    s: &EnsembleSummary,
) -> Result<(), UqError> {
    let mut w = writer(path)?;
    w.write_record(["id", "y", "mu", "aleatoric", "epistemic", "total"])
        .map_err(csv_err(path))?;
    for i in 0..s.len() {
        w.write_record([
            ids[i].to_string(),
            y[i].to_string(),
            s.mu[i].to_string(),
            s.aleatoric[i].to_string(),
            s.epistemic[i].to_string(),
            s.total[i].to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    finish(w, path)
}
