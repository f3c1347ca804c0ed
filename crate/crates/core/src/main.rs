use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use gnnuq_core::archspace::SearchSpace;
use gnnuq_core::evolver::{
    random_baseline, ranked, read_catalog, run_search, select_top_k, SearchConfig, TrainingEvaluator,
};
use gnnuq_core::molgraph::{load_dataset, split_dataset, SplitSpec};
use gnnuq_core::pipeline::{
    evaluate, io_error, load_ensemble, parse_ratios, predict_mc_dropout, predict_split,
    read_json, save_ensemble, train_ensemble, write_evaluation, write_json, Candidate,
    PipelineError, Prepared, SplitName,
};
use gnnuq_core::trainer::TrainConfig;
use gnnuq_core::uq::{read_predictions_csv, write_predictions_csv};

type Result<T> = std::result::Result<T, PipelineError>;

/// Evolutionary GNN architecture search with ensemble uncertainty
/// quantification for molecular property regression.
#[derive(Parser)]
#[command(name = "gnnuq", version)]
struct Cli {
    /// JSON run configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a deterministic train/validation/test split.
    Split(SplitArgs),
    /// Run the architecture search, appending to a JSON-lines catalog.
    Search(SearchArgs),
    /// Train the top-K catalog architectures from scratch.
    Posttrain(PosttrainArgs),
    /// Write per-member predictions for one split.
    Predict(PredictArgs),
    /// Compute uncertainty metrics and curves from prediction files.
    Evaluate(EvaluateArgs),
    /// Train an MC-dropout or random-ensemble baseline.
    Baseline(BaselineArgs),
    /// Describe the architecture search space.
    Space(SpaceArgs),
}

#[derive(Args, Default)]
struct DataArgs {
    /// Dataset CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// SMILES column name [default: smiles].
    #[arg(long)]
    smiles_column: Option<String>,
    /// Target column name [default: y].
    #[arg(long)]
    target_column: Option<String>,
}

#[derive(Args, Default)]
struct SplitSource {
    /// Split JSON written by `gnnuq split`; without it the data are split with --ratios/--split-seed.
    #[arg(long)]
    splits: Option<PathBuf>,
    /// Split ratios train:val:test [default: 5:2:3].
    #[arg(long)]
    ratios: Option<String>,
    /// Seed for on-the-fly splitting [default: 0].
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Args)]
struct SplitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Split ratios train:val:test [default: 5:2:3].
    #[arg(long)]
    ratios: Option<String>,
    /// Shuffle seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Output JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Default)]
struct TrainArgs {
    /// Training epochs per model.
    #[arg(long)]
    epochs: Option<usize>,
    /// Minibatch size [default: 32].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate [default: 0.001].
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    split: SplitSource,
    #[command(flatten)]
    train: TrainArgs,
    /// Total evaluations [default: 1000].
    #[arg(long)]
    evals: Option<usize>,
    /// Population size P [default: 100].
    #[arg(long)]
    population: Option<usize>,
    /// Tournament sample size S [default: 10].
    #[arg(long)]
    sample: Option<usize>,
    /// Concurrent evaluations [default: 1].
    #[arg(long, env = "GNNUQ_THREADS")]
    workers: Option<usize>,
    /// Search seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Catalog path; an existing catalog is resumed.
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Record train_seconds as 0 so catalogs are byte-reproducible.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args)]
struct PosttrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    split: SplitSource,
    #[command(flatten)]
    train: TrainArgs,
    /// Catalog written by `gnnuq search`.
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Ensemble size K [default: 10].
    #[arg(long)]
    top_k: Option<usize>,
    /// Keep the epoch with the lowest validation NLL.
    #[arg(long)]
    keep_best: bool,
    /// Seed for member initialization and shuffling [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for checkpoints, histories and the manifest.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// Directory holding an ensemble manifest and checkpoints.
    #[arg(long)]
    models: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    split: SplitSource,
    /// Which split to predict: train, val or test.
    #[arg(long = "split", default_value = "test")]
    split_name: SplitName,
    /// Output predictions CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predictions CSV of the evaluated split.
    #[arg(long)]
    preds: PathBuf,
    /// Validation predictions CSV, for cNLL and recalibration.
    #[arg(long)]
    val_preds: Option<PathBuf>,
    /// Rescale uncertainties to minimize validation miscalibration area.
    #[arg(long)]
    recalibrate: bool,
    /// Report JSON path; curve CSVs are written next to it.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    Mcdropout,
    Random,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long, value_enum)]
    kind: BaselineKind,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    split: SplitSource,
    #[command(flatten)]
    train: TrainArgs,
    /// Catalog whose best architecture the MC-dropout model uses.
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Dropout rate for MC dropout.
    #[arg(long, default_value_t = 0.1)]
    rate: f64,
    /// Stochastic passes for MC dropout.
    #[arg(long, default_value_t = 10)]
    passes: usize,
    /// Random-ensemble size.
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Keep the epoch with the lowest validation NLL.
    #[arg(long)]
    keep_best: bool,
    /// Baseline seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for models and val/test prediction CSVs.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SpaceArgs {
    /// Print only the exact number of architectures.
    #[arg(long)]
    cardinality: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    data: DataConfig,
    split: SplitConfig,
    search: SearchSection,
    posttrain: PosttrainSection,
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DataConfig {
    path: Option<PathBuf>,
    smiles_column: Option<String>,
    target_column: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SplitConfig {
    file: Option<PathBuf>,
    ratios: Option<String>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SearchSection {
    evals: Option<usize>,
    population: Option<usize>,
    sample: Option<usize>,
    workers: Option<usize>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    catalog: Option<PathBuf>,
    record_timing: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PosttrainSection {
    top_k: Option<usize>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    keep_best: Option<bool>,
    seed: Option<u64>,
}

fn invalid(msg: impl Into<String>) -> PipelineError {
    PipelineError::Invalid(msg.into())
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| invalid(format!("missing --{flag} (or the matching config entry)")))
}

fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    required(flag.or_else(|| cfg.output_dir.clone()), "out-dir")
}

fn prepare(data: &DataArgs, split: &SplitSource, cfg: &RunConfig) -> Result<Prepared> {
    let path = required(data.data.clone().or_else(|| cfg.data.path.clone()), "data")?;
    let smiles = data
        .smiles_column
        .clone()
        .or_else(|| cfg.data.smiles_column.clone())
        .unwrap_or_else(|| "smiles".into());
    let target = data
        .target_column
        .clone()
        .or_else(|| cfg.data.target_column.clone())
        .unwrap_or_else(|| "y".into());
    let file = split.splits.clone().or_else(|| cfg.split.file.clone());
    let ratios = split
        .ratios
        .clone()
        .or_else(|| cfg.split.ratios.clone())
        .unwrap_or_else(|| "5:2:3".into());
    let ratios = parse_ratios(&ratios).map_err(invalid)?;
    let seed = split.split_seed.or(cfg.split.seed).unwrap_or(0);
    Prepared::load(
        &path,
        &smiles,
        &target,
        file.as_deref(),
        SplitSpec::new(ratios, seed),
    )
}

fn cmd_split(a: SplitArgs, cfg: &RunConfig) -> Result<()> {
    let path = required(a.data.data.or_else(|| cfg.data.path.clone()), "data")?;
    let smiles = a
        .data
        .smiles_column
        .or_else(|| cfg.data.smiles_column.clone())
        .unwrap_or_else(|| "smiles".into());
    let target = a
        .data
        .target_column
        .or_else(|| cfg.data.target_column.clone())
        .unwrap_or_else(|| "y".into());
    let ratios = a
        .ratios
        .or_else(|| cfg.split.ratios.clone())
        .unwrap_or_else(|| "5:2:3".into());
    let ratios = parse_ratios(&ratios).map_err(invalid)?;
    let seed = a.seed.or(cfg.split.seed).unwrap_or(0);
    let report = load_dataset(&path, &smiles, &target)?;
    let split = split_dataset(&report.dataset, &SplitSpec::new(ratios, seed))?;
    write_json(&a.out, &split)?;
    let (tr, va, te) = split.sizes();
    println!("split {} rows: train {tr}, val {va}, test {te}", report.dataset.len());
    Ok(())
}

fn cmd_search(a: SearchArgs, cfg: &RunConfig) -> Result<()> {
    let data = prepare(&a.data, &a.split, cfg)?;
    let s = &cfg.search;
    let catalog = required(a.catalog.or_else(|| s.catalog.clone()), "catalog")?;
    let train = TrainConfig {
        epochs: a.train.epochs.or(s.epochs).unwrap_or(30),
        batch_size: a.train.batch_size.or(s.batch_size).unwrap_or(32),
        learning_rate: a.train.lr.or(s.lr).unwrap_or(1e-3),
        ..TrainConfig::default()
    };
    let search = SearchConfig {
        total_evals: a.evals.or(s.evals).unwrap_or(1000),
        population_size: a.population.or(s.population).unwrap_or(100),
        sample_size: a.sample.or(s.sample).unwrap_or(10),
        workers: a.workers.or(s.workers).unwrap_or(1),
        train: train.clone(),
        seed: a.seed.or(s.seed).unwrap_or(0),
        record_timing: !a.no_timing && s.record_timing.unwrap_or(true),
    };
    let space = SearchSpace::default();
    let tr = data.train_data(SplitName::Train);
    let va = data.train_data(SplitName::Val);
    let evaluator = TrainingEvaluator {
        space: &space,
        train: &tr,
        val: &va,
        n_max: data.n_max(),
        config: train,
    };
    let mut recent: Vec<f64> = Vec::new();
    let mut best = f64::INFINITY;
    let records = run_search(&space, &search, &evaluator, Some(&catalog), |rec, _| {
        best = best.min(rec.loss());
        if rec.loss().is_finite() {
            recent.push(-rec.loss());
        }
        if (rec.eval_id + 1) % 10 == 0 {
            let window = &recent[recent.len().saturating_sub(10)..];
            let mean = window.iter().sum::<f64>() / window.len().max(1) as f64;
            println!(
                "eval {}: mean reward (last 10 finite) {mean:.4}, best val NLL {best:.4}",
                rec.eval_id + 1
            );
        }
    })?;
    let failed = records.iter().filter(|r| !r.loss().is_finite()).count();
    println!(
        "catalog {}: {} records ({} failed)",
        catalog.display(),
        records.len(),
        failed
    );
    Ok(())
}

fn train_config(t: &TrainArgs, epochs: usize, batch: Option<usize>, lr: Option<f64>, keep_best: bool) -> TrainConfig {
    TrainConfig {
        epochs: t.epochs.unwrap_or(epochs),
        batch_size: t.batch_size.or(batch).unwrap_or(32),
        learning_rate: t.lr.or(lr).unwrap_or(1e-3),
        keep_best_on_val: keep_best,
        ..TrainConfig::default()
    }
}

fn cmd_posttrain(a: PosttrainArgs, cfg: &RunConfig) -> Result<()> {
    let data = prepare(&a.data, &a.split, cfg)?;
    let p = &cfg.posttrain;
    let catalog = required(a.catalog.or_else(|| cfg.search.catalog.clone()), "catalog")?;
    let dir = out_dir(a.out_dir, cfg)?;
    let k = a.top_k.or(p.top_k).unwrap_or(10);
    let space = SearchSpace::default();
    let records = read_catalog(&catalog, &space)?;
    select_top_k(&records, k)?;
    // Lower-ranked records stand by in case a member diverges.
    let candidates: Vec<Candidate> = ranked(&records).iter().map(Candidate::from).collect();
    let tc = train_config(
        &a.train,
        p.epochs.unwrap_or(1000),
        p.batch_size,
        p.lr,
        a.keep_best || p.keep_best.unwrap_or(false),
    );
    let seed = a.seed.or(p.seed).unwrap_or(0);
    let members = train_ensemble(&space, &data, &candidates, k, &tc, seed)?;
    save_ensemble(&dir, &members, data.scaler)?;
    println!("wrote {} checkpoints to {}", members.len(), dir.display());
    Ok(())
}

fn cmd_predict(a: PredictArgs, cfg: &RunConfig) -> Result<()> {
    let data = prepare(&a.data, &a.split, cfg)?;
    let members = load_ensemble(&a.models)?;
    let refs: Vec<_> = members
        .iter()
        .map(|m| (m.name.as_str(), &m.model, m.scaler))
        .collect();
    let preds = predict_split(&refs, &data, a.split_name)?;
    write_predictions_csv(&a.out, &preds)?;
    println!("wrote {} rows x {} members to {}", preds.len(), refs.len(), a.out.display());
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let test = read_predictions_csv(&a.preds)?;
    let val = a.val_preds.as_deref().map(read_predictions_csv).transpose()?;
    let ev = evaluate(&test, val.as_ref(), a.recalibrate)?;
    write_evaluation(&a.report, &test, &ev)?;
    let r = &ev.report.test;
    println!(
        "n {} members {}: MAE {:.4} RMSE {:.4} NLL {:.4} MCA {:.4} AUCO {:.4}",
        r.n, r.members, r.mae, r.rmse, r.nll, r.mca, r.auco
    );
    Ok(())
}

fn write_split_predictions(dir: &Path, val: &gnnuq_core::uq::PredictionSet, test: &gnnuq_core::uq::PredictionSet) -> Result<()> {
    write_predictions_csv(&dir.join("val_predictions.csv"), val)?;
    write_predictions_csv(&dir.join("test_predictions.csv"), test)?;
    Ok(())
}

fn cmd_baseline(a: BaselineArgs, cfg: &RunConfig) -> Result<()> {
    let data = prepare(&a.data, &a.split, cfg)?;
    let p = &cfg.posttrain;
    let dir = out_dir(a.out_dir, cfg)?;
    std::fs::create_dir_all(&dir).map_err(io_error(&dir))?;
    let seed = a.seed.or(p.seed).unwrap_or(0);
    let space = SearchSpace::default();
    let keep_best = a.keep_best || p.keep_best.unwrap_or(false);
    match a.kind {
        BaselineKind::Mcdropout => {
            let catalog = required(a.catalog.or_else(|| cfg.search.catalog.clone()), "catalog")?;
            let records = read_catalog(&catalog, &space)?;
            let best = select_top_k(&records, 1)
                .map_err(|_| invalid(format!("catalog {} has no finished evaluation", catalog.display())))?;
            let mut tc = train_config(&a.train, p.epochs.unwrap_or(1000), p.batch_size, p.lr, keep_best);
            tc.dropout = a.rate;
            let member = train_ensemble(&space, &data, &[Candidate::from(&best[0])], 1, &tc, seed)?
                .pop()
                .expect("one member");
            save_ensemble(&dir, std::slice::from_ref(&member), data.scaler)?;
            let run = |which| {
                predict_mc_dropout(&member.model, data.scaler, &data, which, a.rate, a.passes, seed)
            };
            write_split_predictions(&dir, &run(SplitName::Val)?, &run(SplitName::Test)?)?;
        }
        BaselineKind::Random => {
            let candidates: Vec<Candidate> = random_baseline(&space, a.k, seed)
                .into_iter()
                .map(|genome| Candidate { genome, eval_id: None })
                .collect();
            let tc = train_config(&a.train, p.epochs.unwrap_or(1000), p.batch_size, p.lr, keep_best);
            let members = train_ensemble(&space, &data, &candidates, a.k, &tc, seed)?;
            save_ensemble(&dir, &members, data.scaler)?;
            let refs: Vec<_> = members
                .iter()
                .map(|m| (m.name.as_str(), &m.model, data.scaler))
                .collect();
            write_split_predictions(
                &dir,
                &predict_split(&refs, &data, SplitName::Val)?,
                &predict_split(&refs, &data, SplitName::Test)?,
            )?;
        }
    }
    println!("wrote baseline to {}", dir.display());
    Ok(())
}

fn cmd_space(a: SpaceArgs) {
    let space = SearchSpace::default();
    if a.cardinality {
        println!("{}", space.cardinality());
        return;
    }
    println!("genes: {}", space.genome_len());
    println!("options per gene: {:?}", space.options());
    println!("architectures: {}", space.cardinality());
}

fn run(cli: Cli) -> Result<()> {
    let cfg: RunConfig = match &cli.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Split(a) => cmd_split(a, &cfg),
        Command::Search(a) => cmd_search(a, &cfg),
        Command::Posttrain(a) => cmd_posttrain(a, &cfg),
        Command::Predict(a) => cmd_predict(a, &cfg),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Baseline(a) => cmd_baseline(a, &cfg),
        Command::Space(a) => {
            cmd_space(a);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
