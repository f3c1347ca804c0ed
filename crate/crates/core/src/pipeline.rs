//! End-to-end steps shared by the CLI: data preparation, ensemble training,
//! prediction and evaluation.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archspace::{Genome, GenomeError, SearchSpace};
use crate::evolver::{init_seed_for, CatalogRecord, SearchError};
use crate::molgraph::{
    load_dataset, split_dataset, Dataset, DatasetError, MolGraph, Split, SplitSpec, TargetScaler,
    EDGE_FEATURES, NODE_FEATURES,
};
use crate::mpnn::{Model, ModelError};
use crate::rng::derive_seed2;
use crate::trainer::{mc_dropout_predict, train, TrainConfig, TrainData, TrainError, TrainHistory};
use crate::uq::{
    calibrated_nll, calibration_curve, confidence_curve, ensemble_summary, recalibrate,
    split_metrics, CalibrationCurve, ConfidenceCurve, EnsembleSummary, Member, PredictionSet,
    SplitReport, UqError,
};

const POSTTRAIN_DOMAIN: u64 = 0x504f_5354;
const MCD_DOMAIN: u64 = 0x4d43_4454;

pub const MANIFEST: &str = "ensemble.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Genome(#[from] GenomeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Uq(#[from] UqError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

pub fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_error(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(io_error(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl FromStr for SplitName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" | "valid" | "validation" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            _ => Err(format!("unknown split {s:?} (expected train, val or test)")),
        }
    }
}

/// Parses `a:b:c` split ratios.
pub fn parse_ratios(text: &str) -> Result<[u32; 3], String> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        return Err(format!("ratios {text:?} should look like 5:2:3"));
    }
    let mut out = [0u32; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p
            .trim()
            .parse()
            .map_err(|_| format!("ratio {p:?} is not a non-negative integer"))?;
    }
    if out.iter().all(|&r| r == 0) {
        return Err("ratios must not all be zero".into());
    }
    Ok(out)
}

/// A featurized dataset with its split and training-set target scaler.
pub struct Prepared {
    pub dataset: Dataset,
    pub graphs: Vec<MolGraph>,
    pub y: Vec<f64>,
    pub split: Split,
    pub scaler: TargetScaler,
}

impl Prepared {
    pub fn new(dataset: Dataset, split: Split) -> Result<Self> {
        if !split.is_partition_of(dataset.len()) {
            return Err(PipelineError::Invalid(format!(
                "split does not partition the {} dataset rows",
                dataset.len()
            )));
        }
        let graphs = dataset.graphs();
        let y = dataset.targets();
        let train_y: Vec<f64> = split.train.iter().map(|&i| y[i]).collect();
        let scaler = TargetScaler::fit(&train_y)?;
        Ok(Self {
            dataset,
            graphs,
            y,
            split,
            scaler,
        })
    }

    /// Loads `data` and either reads `split_file` or splits with `spec`.
    pub fn load(
        data: &Path,
        smiles_column: &str,
        target_column: &str,
        split_file: Option<&Path>,
        spec: SplitSpec,
    ) -> Result<Self> {
        let dataset = load_dataset(data, smiles_column, target_column)?.dataset;
        let split = match split_file {
            Some(p) => read_json(p)?,
            None => split_dataset(&dataset, &spec)?,
        };
        Self::new(dataset, split)
    }

    pub fn n_max(&self) -> usize {
        self.dataset.meta.n_max
    }

    pub fn indices(&self, which: SplitName) -> &[usize] {
        match which {
            SplitName::Train => &self.split.train,
            SplitName::Val => &self.split.val,
            SplitName::Test => &self.split.test,
        }
    }

    /// Graphs and standardized targets of one split.
    pub fn train_data(&self, which: SplitName) -> TrainData<'_> {
        let idx = self.indices(which);
        TrainData::new(
            idx.iter().map(|&i| &self.graphs[i]).collect(),
            idx.iter().map(|&i| self.scaler.apply(self.y[i])).collect(),
        )
        .expect("lengths agree")
    }
}

/// One trained ensemble member.
pub struct TrainedMember {
    pub name: String,
    pub eval_id: Option<usize>,
    pub seed: u64,
    pub model: Model,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub checkpoint: String,
    pub eval_id: Option<usize>,
    pub seed: u64,
    pub genome: Genome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub members: Vec<ManifestEntry>,
}

/// Candidate architecture for an ensemble slot.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub genome: Genome,
    pub eval_id: Option<usize>,
}

impl From<&CatalogRecord> for Candidate {
    fn from(r: &CatalogRecord) -> Self {
        Self {
            genome: r.genome.clone(),
            eval_id: Some(r.eval_id),
        }
    }
}

/// Trains candidates from scratch, in order, until `k` have finished
/// without diverging. Candidate `i` trains with a seed derived from
/// `(seed, i)`.
pub fn train_ensemble(
    space: &SearchSpace,
    data: &Prepared,
    candidates: &[Candidate],
    k: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<TrainedMember>> {
    let tr = data.train_data(SplitName::Train);
    let va = data.train_data(SplitName::Val);
    let mut members = Vec::with_capacity(k);
    for (i, c) in candidates.iter().enumerate() {
        if members.len() == k {
            break;
        }
        let member_seed = derive_seed2(seed, i as u64, POSTTRAIN_DOMAIN);
        let model = Model::instantiate(
            space,
            &c.genome,
            data.n_max(),
            NODE_FEATURES,
            EDGE_FEATURES,
            init_seed_for(member_seed),
        )?;
        let run = TrainConfig {
            seed: member_seed,
            ..cfg.clone()
        };
        match train(&model, &tr, &va, &run) {
            Ok((model, history)) => {
                log::info!(
                    "member {} (candidate {i}) final val NLL {:.4}",
                    members.len(),
                    history.val_nll.last().copied().unwrap_or(f64::NAN)
                );
                members.push(TrainedMember {
                    name: format!("m{}", members.len()),
                    eval_id: c.eval_id,
                    seed: member_seed,
                    model,
                    history,
                });
            }
            Err(TrainError::DivergedLoss { epoch, .. }) => {
                log::warn!("candidate {i} diverged at epoch {epoch}; trying the next one");
            }
            Err(e) => return Err(e.into()),
        }
    }
    if members.len() < k {
        return Err(PipelineError::Invalid(format!(
            "only {} of {k} ensemble members trained without diverging",
            members.len()
        )));
    }
    Ok(members)
}

/// Writes `<name>.guqw`, its sidecar, `<name>_history.csv` and the manifest.
pub fn save_ensemble(dir: &Path, members: &[TrainedMember], scaler: TargetScaler) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_error(dir))?;
    let mut entries = Vec::new();
    for m in members {
        let file = format!("{}.guqw", m.name);
        m.model.save(&dir.join(&file), scaler)?;
        let hist = dir.join(format!("{}_history.csv", m.name));
        m.history.write_csv(&hist).map_err(io_error(&hist))?;
        entries.push(ManifestEntry {
            name: m.name.clone(),
            checkpoint: file,
            eval_id: m.eval_id,
            seed: m.seed,
            genome: m.model.genome().clone(),
        });
    }
    write_json(&dir.join(MANIFEST), &Manifest { members: entries })
}

/// A loaded ensemble member with its target scaler.
pub struct LoadedMember {
    pub name: String,
    pub model: Model,
    pub scaler: TargetScaler,
}

pub fn load_ensemble(dir: &Path) -> Result<Vec<LoadedMember>> {
    let manifest_path = dir.join(MANIFEST);
    let manifest: Manifest = read_json(&manifest_path)?;
    if manifest.members.is_empty() {
        return Err(PipelineError::Format {
            path: manifest_path.display().to_string(),
            message: "manifest lists no members".into(),
        });
    }
    manifest
        .members
        .iter()
        .map(|e| {
            let (model, scaler) = Model::load(&dir.join(&e.checkpoint))?;
            Ok(LoadedMember {
                name: e.name.clone(),
                model,
                scaler,
            })
        })
        .collect()
}

fn graphs_for<'a>(
    data: &'a Prepared,
    idx: &[usize],
    n_max: usize,
    owned: &'a mut Vec<MolGraph>,
) -> Result<Vec<&'a MolGraph>> {
    if n_max == data.n_max() {
        return Ok(idx.iter().map(|&i| &data.graphs[i]).collect());
    }
    *owned = idx
        .iter()
        .map(|&i| {
            let g = &data.graphs[i];
            g.repad(n_max, g.e_max)
        })
        .collect::<Result<_, _>>()
        .map_err(ModelError::from)?;
    Ok(owned.iter().collect())
}

/// Member predictions over one split, in target units.
pub fn predict_split(
    members: &[(&str, &Model, TargetScaler)],
    data: &Prepared,
    which: SplitName,
) -> Result<PredictionSet> {
    let idx = data.indices(which);
    let mut out = Vec::with_capacity(members.len());
    for &(name, model, scaler) in members {
        let mut owned = Vec::new();
        let graphs = graphs_for(data, idx, model.dims().n_max, &mut owned)?;
        let preds = model.predict(&graphs)?;
        let (mu, var) = preds
            .iter()
            .map(|p| scaler.invert_prediction(p.mu, p.var))
            .unzip();
        out.push(Member {
            name: name.to_string(),
            mu,
            var,
        });
    }
    Ok(PredictionSet {
        ids: idx.to_vec(),
        y: idx.iter().map(|&i| data.y[i]).collect(),
        members: out,
    })
}

/// `passes` dropout passes of one model, each reported as a member.
pub fn predict_mc_dropout(
    model: &Model,
    scaler: TargetScaler,
    data: &Prepared,
    which: SplitName,
    rate: f64,
    passes: usize,
    seed: u64,
) -> Result<PredictionSet> {
    let idx = data.indices(which);
    let mut owned = Vec::new();
    let graphs = graphs_for(data, idx, model.dims().n_max, &mut owned)?;
    let stream = derive_seed2(seed, which as u64, MCD_DOMAIN);
    let runs = mc_dropout_predict(model, &graphs, rate, passes, stream)?;
    let members = runs
        .into_iter()
        .enumerate()
        .map(|(k, preds)| {
            let (mu, var) = preds
                .iter()
                .map(|p| scaler.invert_prediction(p.mu, p.var))
                .unzip();
            Member {
                name: format!("pass{k}"),
                mu,
                var,
            }
        })
        .collect();
    Ok(PredictionSet {
        ids: idx.to_vec(),
        y: idx.iter().map(|&i| data.y[i]).collect(),
        members,
    })
}

/// Report JSON: one entry per split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub test: SplitReport,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val: Option<SplitReport>,
}

pub struct Evaluation {
    pub report: Report,
    pub summary: EnsembleSummary,
    pub calibration: CalibrationCurve,
    pub confidence: ConfidenceCurve,
    /// Curve of the recalibrated test predictions.
    pub recalibrated: Option<CalibrationCurve>,
}

/// Metrics for `test`; with `val`, adds cNLL (and recalibration if asked).
pub fn evaluate(
    test: &PredictionSet,
    val: Option<&PredictionSet>,
    recal: bool,
) -> Result<Evaluation> {
    let summary = ensemble_summary(test)?;
    let mut report = split_metrics(&summary, &test.y, test.members.len())?;
    let calibration = calibration_curve(&summary.mu, &summary.total, &test.y)?;
    let confidence = confidence_curve(&summary.mu, &summary.total, &test.y)?;
    let mut val_report = None;
    let mut recalibrated = None;
    if let Some(val) = val {
        let vs = ensemble_summary(val)?;
        let (params, cnll) = calibrated_nll(&vs, &summary, &val.y, &test.y)?;
        if !cnll.is_finite() {
            log::warn!("fitted variance correction is non-positive on some test rows; cNLL undefined");
        }
        report.cnll = cnll.is_finite().then_some(cnll);
        report.a = Some(params.a);
        report.b = Some(params.b);
        let mut vr = split_metrics(&vs, &val.y, val.members.len())?;
        let (vparams, vcnll) = calibrated_nll(&vs, &vs, &val.y, &val.y)?;
        vr.cnll = Some(vcnll);
        vr.a = Some(vparams.a);
        vr.b = Some(vparams.b);
        if recal {
            let (r, scaled) = recalibrate(&vs, &summary, &val.y)?;
            let curve = calibration_curve(&scaled.mu, &scaled.total, &test.y)?;
            report.recal_a = Some(r.a);
            report.recal_mca = Some(curve.mca);
            vr.recal_a = Some(r.a);
            vr.recal_mca = Some(r.post_mca);
            recalibrated = Some(curve);
        }
        val_report = Some(vr);
    } else if recal {
        return Err(PipelineError::Invalid(
            "recalibration needs validation predictions".into(),
        ));
    }
    Ok(Evaluation {
        report: Report {
            test: report,
            val: val_report,
        },
        summary,
        calibration,
        confidence,
        recalibrated,
    })
}

/// Paths of the files written next to a report.
pub fn report_siblings(report: &Path) -> [PathBuf; 4] {
    let stem = report
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "report".into());
    let dir = report.parent().unwrap_or_else(|| Path::new("."));
    [
        dir.join(format!("{stem}_calibration.csv")),
        dir.join(format!("{stem}_confidence.csv")),
        dir.join(format!("{stem}_summary.csv")),
        dir.join(format!("{stem}_recalibrated_calibration.csv")),
    ]
}

pub fn write_evaluation(report_path: &Path, test: &PredictionSet, ev: &Evaluation) -> Result<()> {
    if let Some(dir) = report_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_error(dir))?;
    }
    write_json(report_path, &ev.report)?;
    let [cal, conf, summ, recal] = report_siblings(report_path);
    crate::uq::write_calibration_csv(&cal, &ev.calibration)?;
    crate::uq::write_confidence_csv(&conf, &ev.confidence)?;
    crate::uq::write_summary_csv(&summ, &test.ids, &test.y, &ev.summary)?;
    if let Some(curve) = &ev.recalibrated {
        crate::uq::write_calibration_csv(&recal, curve)?;
    }
    Ok(())
}
