//! Dataset loading, deterministic splitting and target standardization.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::features::{featurize, MolGraph};
use super::smiles::{parse_smiles, MolSpec, SmilesError};
use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("column {0:?} not found in header")]
    MissingColumn(String),
    #[error("no valid rows in {0}")]
    NoValidRows(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("split ratios must have a positive sum")]
    InvalidRatios,
    #[error("training targets are degenerate (need at least two distinct values)")]
    DegenerateTargets,
}

#[derive(Debug, Clone)]
pub struct Record {
    pub smiles: String,
    pub y: f64,
    pub mol: MolSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub target: String,
    pub unit: String,
    pub n_max: usize,
    pub e_max: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<Record>,
    pub meta: DatasetMeta,
}

/// Why a CSV row was skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct RowDiagnostic {
    /// 1-based data row number (header excluded).
    pub row: usize,
    pub smiles: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct LoadReport {
    pub dataset: Dataset,
    pub rejected: Vec<RowDiagnostic>,
}

impl Dataset {
    /// Builds a dataset from already-parsed records; padding sizes are
    /// computed over all of them.
    pub fn from_records(records: Vec<Record>, target: &str, unit: &str) -> Result<Self, DatasetError> {
        if records.is_empty() {
            return Err(DatasetError::EmptyDataset);
        }
        let n_max = records.iter().map(|r| r.mol.atom_count()).max().unwrap_or(0);
        let e_max = records
            .iter()
            .map(|r| r.mol.directed_edge_count())
            .max()
            .unwrap_or(0);
        Ok(Dataset {
            records,
            meta: DatasetMeta {
                target: target.to_string(),
                unit: unit.to_string(),
                n_max,
                e_max,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.y).collect()
    }

    /// Featurizes every record at the dataset-wide padding.
    pub fn graphs(&self) -> Vec<MolGraph> {
        self.records
            .iter()
            .map(|r| {
                featurize(&r.mol, self.meta.n_max, self.meta.e_max)
                    .expect("padding computed over all records")
            })
            .collect()
    }
}

/// Loads a dataset CSV. Rows whose SMILES fail to parse (or whose target is
/// not a finite number) are skipped and reported.
pub fn load_dataset(
    path: impl AsRef<Path>,
    smiles_column: &str,
    target_column: &str,
) -> Result<LoadReport, DatasetError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: display.clone(),
        source,
    })?;
    let mut reader = csv::Reader::from_reader(file);
    let header = reader.headers()?.clone();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DatasetError::MissingColumn(name.to_string()))
    };
    let smiles_idx = find(smiles_column)?;
    let target_idx = find(target_column)?;

    let mut records = Vec::new();
    let mut rejected = Vec::new();
    for (row, result) in reader.records().enumerate() {
        let row = row + 1;
        let rec = result?;
        let smiles = rec.get(smiles_idx).unwrap_or("").trim().to_string();
        let y = rec.get(target_idx).unwrap_or("").trim().parse::<f64>();
        let y = match y {
            Ok(v) if v.is_finite() => v,
            _ => {
                rejected.push(RowDiagnostic {
                    row,
                    smiles,
                    reason: format!("target {:?} is not a finite number", rec.get(target_idx)),
                });
                continue;
            }
        };
        match parse_smiles(&smiles) {
            Ok(mol) => records.push(Record { smiles, y, mol }),
            Err(e) => {
                let reason = describe(&e);
                rejected.push(RowDiagnostic { row, smiles, reason });
            }
        }
    }
    for d in &rejected {
        log::warn!("{display}: row {} rejected ({}): {}", d.row, d.smiles, d.reason);
    }
    if !rejected.is_empty() {
        log::warn!("{display}: {} row(s) rejected, {} accepted", rejected.len(), records.len());
    }
    if records.is_empty() {
        return Err(DatasetError::NoValidRows(display));
    }
    let dataset = Dataset::from_records(records, target_column, "")?;
    Ok(LoadReport { dataset, rejected })
}

fn describe(e: &SmilesError) -> String {
    e.to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: [u32; 3],
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(ratios: [u32; 3], seed: u64) -> Self {
        Self { ratios, seed }
    }
}

/// Train/validation/test index lists. Serializes to the split-file schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub seed: u64,
    pub ratios: [u32; 3],
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }

    /// Checks that the three lists partition `0..n`.
    pub fn is_partition_of(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        seen.into_iter().all(|s| s)
    }
}

/// Shuffles `0..n` with splitmix64 Fisher-Yates and cuts it into
/// train/val/test. Validation and test sizes are floored; the remainder goes
/// to train.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<Split, DatasetError> {
    if n == 0 {
        return Err(DatasetError::EmptyDataset);
    }
    let total: u64 = spec.ratios.iter().map(|&r| r as u64).sum();
    if total == 0 {
        return Err(DatasetError::InvalidRatios);
    }
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::new(spec.seed).shuffle(&mut order);
    let n_val = (n as u64 * spec.ratios[1] as u64 / total) as usize;
    let n_test = (n as u64 * spec.ratios[2] as u64 / total) as usize;
    let n_train = n - n_val - n_test;
    Ok(Split {
        seed: spec.seed,
        ratios: spec.ratios,
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    })
}

pub fn split_dataset(ds: &Dataset, spec: &SplitSpec) -> Result<Split, DatasetError> {
    split_indices(ds.len(), spec)
}

/// Standardizes targets; fit on the training split only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub mean: f64,
    pub std: f64,
}

impl TargetScaler {
    pub const IDENTITY: TargetScaler = TargetScaler { mean: 0.0, std: 1.0 };

    /// Population mean and standard deviation.
    pub fn fit(targets: &[f64]) -> Result<Self, DatasetError> {
        if targets.len() < 2 {
            return Err(DatasetError::DegenerateTargets);
        }
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 0.0) || !std.is_finite() {
            return Err(DatasetError::DegenerateTargets);
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn invert(&self, y: f64) -> f64 {
        y * self.std + self.mean
    }

    /// Maps a standardized-space prediction back to target units.
    pub fn invert_prediction(&self, mu: f64, var: f64) -> (f64, f64) {
        (mu * self.std + self.mean, var * self.std * self.std)
    }
}
