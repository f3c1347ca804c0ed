//! Aging-evolution search with asynchronous workers and a JSON-lines catalog.

use std::collections::{HashSet, VecDeque};
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::mpsc;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archspace::{Genome, SearchSpace, SPACE_VERSION};
use crate::molgraph::{EDGE_FEATURES, NODE_FEATURES};
use crate::mpnn::Model;
use crate::rng::{derive_seed, derive_seed2, SplitMix64};
use crate::trainer::{train, TrainConfig, TrainData, TrainError};

const PROPOSE_DOMAIN: u64 = 0x5052_4f50;
const INIT_DOMAIN: u64 = 0x494e_4954;
const BASELINE_DOMAIN: u64 = 0x5241_4e44;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    Config(String),
    #[error("catalog {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("catalog {path} line {line}: {message}")]
    BadCatalog {
        path: String,
        line: usize,
        message: String,
    },
    #[error("catalog was written for a different search space: {0}")]
    ResumeMismatch(String),
    #[error("need {needed} records with a finite loss, found {found}")]
    InsufficientRecords { needed: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub total_evals: usize,
    pub population_size: usize,
    pub sample_size: usize,
    pub workers: usize,
    pub train: TrainConfig,
    pub seed: u64,
    /// Store wall-clock training time; off for byte-reproducible catalogs.
    pub record_timing: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            total_evals: 1000,
            population_size: 100,
            sample_size: 10,
            workers: 1,
            train: TrainConfig::default(),
            seed: 0,
            record_timing: true,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::Config(m.to_string()));
        if self.total_evals == 0 || self.population_size == 0 || self.sample_size == 0 {
            return bad("evals, population and sample must be positive");
        }
        if self.sample_size > self.population_size {
            return bad("sample size exceeds population size");
        }
        if self.population_size > self.total_evals {
            return bad("population size exceeds the evaluation budget");
        }
        if self.workers == 0 {
            return bad("workers must be positive");
        }
        self.train
            .validate()
            .map_err(|e| SearchError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalStatus {
    Ok,
    Failed,
}

/// One line of the catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogRecord {
    pub eval_id: usize,
    pub genome: Genome,
    /// `None` for failed evaluations, which rank as `+inf`.
    pub val_nll: Option<f64>,
    pub status: EvalStatus,
    pub train_seconds: f64,
    pub worker_id: usize,
    pub parent_eval_id: Option<usize>,
}

impl CatalogRecord {
    pub fn loss(&self) -> f64 {
        match (self.status, self.val_nll) {
            (EvalStatus::Ok, Some(v)) if v.is_finite() => v,
            _ => f64::INFINITY,
        }
    }
}

/// Scores a genome; lower is better. Errors mark the evaluation failed.
pub trait Evaluator: Sync {
    fn evaluate(&self, genome: &Genome, seed: u64) -> Result<f64, String>;
}

impl<F> Evaluator for F
where
    F: Fn(&Genome, u64) -> Result<f64, String> + Sync,
{
    fn evaluate(&self, genome: &Genome, seed: u64) -> Result<f64, String> {
        self(genome, seed)
    }
}

/// Trains a freshly initialized model and reports its final validation NLL.
pub struct TrainingEvaluator<'a> {
    pub space: &'a SearchSpace,
    pub train: &'a TrainData<'a>,
    pub val: &'a TrainData<'a>,
    pub n_max: usize,
    pub config: TrainConfig,
}

/// Initialization seed for the model trained under evaluation seed `seed`.
pub fn init_seed_for(seed: u64) -> u64 {
    derive_seed2(seed, 0, INIT_DOMAIN)
}

impl TrainingEvaluator<'_> {
    pub fn fit(&self, genome: &Genome, seed: u64) -> Result<(Model, crate::trainer::TrainHistory), TrainError> {
        let model = Model::instantiate(
            self.space,
            genome,
            self.n_max,
            NODE_FEATURES,
            EDGE_FEATURES,
            init_seed_for(seed),
        )?;
        let cfg = TrainConfig {
            seed,
            ..self.config.clone()
        };
        train(&model, self.train, self.val, &cfg)
    }
}

impl Evaluator for TrainingEvaluator<'_> {
    fn evaluate(&self, genome: &Genome, seed: u64) -> Result<f64, String> {
        let (_, history) = self.fit(genome, seed).map_err(|e| e.to_string())?;
        let loss = if self.config.keep_best_on_val {
            history.val_nll.iter().cloned().fold(f64::INFINITY, f64::min)
        } else {
            history.val_nll.last().copied().unwrap_or(f64::NAN)
        };
        if loss.is_finite() {
            Ok(loss)
        } else {
            Err(format!("validation NLL is {loss}"))
        }
    }
}

/// A deterministic, training-free score: weighted distance of a genome from
/// a hidden target genome plus a pairwise interaction term.
#[derive(Debug, Clone)]
pub struct SurrogateEvaluator {
    target: Vec<u32>,
    weights: Vec<f64>,
}

impl SurrogateEvaluator {
    pub fn new(space: &SearchSpace, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let target = space.random_genome(&mut rng).genes;
        let weights = (0..target.len()).map(|_| rng.uniform(0.5, 1.5)).collect();
        Self { target, weights }
    }

    pub fn score(&self, genome: &Genome) -> f64 {
        let miss: Vec<f64> = genome
            .genes
            .iter()
            .zip(&self.target)
            .map(|(g, t)| (g != t) as u8 as f64)
            .collect();
        let linear: f64 = miss.iter().zip(&self.weights).map(|(m, w)| m * w).sum();
        let pairs: f64 = miss.windows(2).map(|p| 0.25 * p[0] * p[1]).sum();
        linear + pairs
    }
}

impl Evaluator for SurrogateEvaluator {
    fn evaluate(&self, genome: &Genome, _seed: u64) -> Result<f64, String> {
        Ok(self.score(genome))
    }
}

/// Reads a catalog, checking that eval ids are dense and genomes fit `space`.
pub fn read_catalog(path: &Path, space: &SearchSpace) -> Result<Vec<CatalogRecord>, SearchError> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| SearchError::Io {
        path: display.clone(),
        source,
    })?;
    let mut records = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| SearchError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| SearchError::BadCatalog {
            path: display.clone(),
            line: i + 1,
            message,
        };
        let rec: CatalogRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if rec.genome.space_version != SPACE_VERSION {
            return Err(SearchError::ResumeMismatch(format!(
                "record {} has space version {}, expected {SPACE_VERSION}",
                rec.eval_id, rec.genome.space_version
            )));
        }
        space
            .validate(&rec.genome)
            .map_err(|e| SearchError::ResumeMismatch(format!("record {}: {e}", rec.eval_id)))?;
        records.push(rec);
    }
    let mut ids: Vec<usize> = records.iter().map(|r| r.eval_id).collect();
    ids.sort_unstable();
    if ids.iter().enumerate().any(|(i, &id)| i != id) {
        return Err(SearchError::BadCatalog {
            path: display,
            line: 0,
            message: "eval ids are not 0..n without gaps".into(),
        });
    }
    Ok(records)
}

struct Member {
    eval_id: usize,
    genome: Genome,
    loss: f64,
}

struct Job {
    eval_id: usize,
    genome: Genome,
    parent: Option<usize>,
    seed: u64,
}

/// Population with one-in-one-out aging.
struct Population {
    members: VecDeque<Member>,
    capacity: usize,
}

impl Population {
    fn insert(&mut self, rec: &CatalogRecord) {
        self.members.push_back(Member {
            eval_id: rec.eval_id,
            genome: rec.genome.clone(),
            loss: rec.loss(),
        });
        if self.members.len() > self.capacity {
            self.members.pop_front();
        }
    }

    /// Best of `s` members drawn without replacement; ties go to the older eval.
    fn tournament(&self, s: usize, rng: &mut SplitMix64) -> &Member {
        let mut idx: Vec<usize> = (0..self.members.len()).collect();
        for i in 0..s {
            let j = i + rng.below(idx.len() - i);
            idx.swap(i, j);
        }
        idx[..s]
            .iter()
            .map(|&i| &self.members[i])
            .min_by(|a, b| a.loss.total_cmp(&b.loss).then(a.eval_id.cmp(&b.eval_id)))
            .expect("sample is non-empty")
    }
}

fn propose(
    space: &SearchSpace,
    cfg: &SearchConfig,
    pop: &Population,
    eval_id: usize,
) -> Job {
    let mut rng = SplitMix64::new(derive_seed2(cfg.seed, eval_id as u64, PROPOSE_DOMAIN));
    let seed = derive_seed(cfg.seed, eval_id as u64);
    if eval_id < cfg.population_size {
        Job {
            eval_id,
            genome: space.random_genome(&mut rng),
            parent: None,
            seed,
        }
    } else {
        let parent = pop.tournament(cfg.sample_size, &mut rng);
        Job {
            eval_id,
            genome: space.mutate(&parent.genome, &mut rng),
            parent: Some(parent.eval_id),
            seed,
        }
    }
}

/// Runs the search, appending each finished evaluation to `catalog` (when
/// given) and passing it to `observer` with the population size after
/// insertion. An existing catalog is replayed and the search continues from
/// where it stopped. Returns records in completion order.
pub fn run_search(
    space: &SearchSpace,
    cfg: &SearchConfig,
    evaluator: &dyn Evaluator,
    catalog: Option<&Path>,
    mut observer: impl FnMut(&CatalogRecord, usize),
) -> Result<Vec<CatalogRecord>, SearchError> {
    cfg.validate()?;
    let mut records = match catalog {
        Some(p) if p.exists() => read_catalog(p, space)?,
        _ => Vec::new(),
    };
    let mut pop = Population {
        members: VecDeque::with_capacity(cfg.population_size + 1),
        capacity: cfg.population_size,
    };
    for r in &records {
        pop.insert(r);
    }
    if records.len() >= cfg.total_evals {
        return Ok(records);
    }
    let mut sink = match catalog {
        Some(p) => {
            let display = p.display().to_string();
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|source| SearchError::Io {
                    path: display.clone(),
                    source,
                })?;
            Some((file, display))
        }
        None => None,
    };

    let (job_tx, job_rx) = mpsc::channel::<Job>();
    let job_rx = Mutex::new(job_rx);
    let (done_tx, done_rx) = mpsc::channel::<CatalogRecord>();
    let record_timing = cfg.record_timing;

    std::thread::scope(|scope| -> Result<(), SearchError> {
        for worker_id in 0..cfg.workers {
            let job_rx = &job_rx;
            let done_tx = done_tx.clone();
            scope.spawn(move || loop {
                let job = match job_rx.lock().expect("job queue poisoned").recv() {
                    Ok(job) => job,
                    Err(_) => break,
                };
                let start = Instant::now();
                let result = evaluator.evaluate(&job.genome, job.seed);
                let seconds = start.elapsed().as_secs_f64();
                let (val_nll, status) = match result {
                    Ok(v) if v.is_finite() => (Some(v), EvalStatus::Ok),
                    Ok(v) => {
                        log::warn!("eval {} produced loss {v}", job.eval_id);
                        (None, EvalStatus::Failed)
                    }
                    Err(e) => {
                        log::warn!("eval {} failed: {e}", job.eval_id);
                        (None, EvalStatus::Failed)
                    }
                };
                let rec = CatalogRecord {
                    eval_id: job.eval_id,
                    genome: job.genome,
                    val_nll,
                    status,
                    train_seconds: if record_timing { seconds } else { 0.0 },
                    worker_id,
                    parent_eval_id: job.parent,
                };
                if done_tx.send(rec).is_err() {
                    break;
                }
            });
        }
        drop(done_tx);

        let mut next_id = records.len();
        let mut in_flight = 0usize;
        let outcome = loop {
            while in_flight < cfg.workers
                && next_id < cfg.total_evals
                && (next_id < cfg.population_size || pop.members.len() >= cfg.population_size)
            {
                let job = propose(space, cfg, &pop, next_id);
                job_tx.send(job).expect("workers alive");
                next_id += 1;
                in_flight += 1;
            }
            if in_flight == 0 {
                break Ok(());
            }
            let rec = done_rx.recv().expect("workers alive");
            in_flight -= 1;
            if let Some((file, display)) = sink.as_mut() {
                let line = serde_json::to_string(&rec).expect("record serializes");
                if let Err(source) = writeln!(file, "{line}").and_then(|_| file.flush()) {
                    break Err(SearchError::Io {
                        path: display.clone(),
                        source,
                    });
                }
            }
            pop.insert(&rec);
            observer(&rec, pop.members.len());
            records.push(rec);
        };
        drop(job_tx);
        outcome
    })?;
    Ok(records)
}

/// Finished records with distinct genomes, best first; ties go to the
/// smaller eval id. Repeated genomes keep only their first occurrence.
pub fn ranked(records: &[CatalogRecord]) -> Vec<CatalogRecord> {
    let mut by_id: Vec<&CatalogRecord> = records.iter().collect();
    by_id.sort_by_key(|r| r.eval_id);
    let mut seen = HashSet::new();
    let mut out: Vec<&CatalogRecord> = by_id
        .into_iter()
        .filter(|r| seen.insert(&r.genome))
        .filter(|r| r.loss().is_finite())
        .collect();
    out.sort_by(|a, b| a.loss().total_cmp(&b.loss()).then(a.eval_id.cmp(&b.eval_id)));
    out.into_iter().cloned().collect()
}

/// The first `k` of [`ranked`].
pub fn select_top_k(records: &[CatalogRecord], k: usize) -> Result<Vec<CatalogRecord>, SearchError> {
    let mut all = ranked(records);
    if all.len() < k {
        return Err(SearchError::InsufficientRecords {
            needed: k,
            found: all.len(),
        });
    }
    all.truncate(k);
    Ok(all)
}

/// `k` distinct uniformly random genomes (fewer if the space is smaller).
pub fn random_baseline(space: &SearchSpace, k: usize, seed: u64) -> Vec<Genome> {
    let k = match usize::try_from(space.cardinality()) {
        Ok(c) => k.min(c),
        Err(_) => k,
    };
    let mut rng = SplitMix64::new(derive_seed2(seed, 0, BASELINE_DOMAIN));
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let g = space.random_genome(&mut rng);
        if seen.insert(g.clone()) {
            out.push(g);
        }
    }
    out
}
