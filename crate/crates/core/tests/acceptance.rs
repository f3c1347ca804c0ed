//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs the full desk-scale FreeSolv and ESOL pipelines, so expect tens of
//! minutes on a single core.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::rc::Rc;
use std::time::Instant;

use gnnuq_core::archspace::{Genome, SearchSpace};
use gnnuq_core::diffcore::{
    finite_diff_check, gru_cell, Activation, DiffError, GruVars, Reduce, Tape, Tensor, Var,
};
use gnnuq_core::evolver::{
    random_baseline, run_search, select_top_k, CatalogRecord, SearchConfig, SurrogateEvaluator,
    TrainingEvaluator,
};
use gnnuq_core::molgraph::{
    featurize, load_dataset, parse_smiles, split_dataset, MolGraph, SplitSpec, EDGE_FEATURES,
    NODE_FEATURES,
};
use gnnuq_core::mpnn::{Model, ModelError, PackedBatch};
use gnnuq_core::pipeline::{
    evaluate, predict_mc_dropout, predict_split, train_ensemble, Candidate, Evaluation, Prepared,
    SplitName, TrainedMember,
};
use gnnuq_core::rng::SplitMix64;
use gnnuq_core::trainer::{nll_loss, TrainConfig};
use gnnuq_core::uq::{
    calibrated_nll, calibration_curve, confidence_curve, coverage, ensemble_summary, metric_nll,
    recalibrate, spearman, EnsembleSummary, Member, PredictionSet,
};

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const PAD_TOL: f64 = 1e-12;
const PERM_TOL: f64 = 1e-8;
const DECOMP_TOL: f64 = 1e-12;
const ORACLE_TOL: f64 = 1e-12;

const DESK_EVALS: usize = 50;
const DESK_POPULATION: usize = 20;
const DESK_SAMPLE: usize = 5;
const DESK_SEARCH_EPOCHS: usize = 30;
const DESK_TOP_K: usize = 5;
const DESK_POST_EPOCHS: usize = 300;

struct Report {
    failures: Vec<String>,
}

impl Report {
    fn line(&mut self, id: &str, pass: bool, detail: String) {
        println!("[{}] {id}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failures.push(id.to_string());
        }
    }

    fn info(&self, id: &str, detail: String) {
        println!("[INFO] {id}: {detail}");
    }
}

fn data_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn rand_tensor(rng: &mut SplitMix64, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

fn criterion_1(r: &mut Report) {
    let t = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_gnnuq"))
        .args(["space", "--cardinality"])
        .output()
        .unwrap();
    let secs = t.elapsed().as_secs_f64();
    let text = String::from_utf8_lossy(&out.stdout).trim().to_string();
    r.line(
        "1 cardinality",
        out.status.success() && text == "12259638116352" && secs < 1.0,
        format!("printed {text} in {secs:.3} s (expect 12259638116352, < 1 s)"),
    );
}

type Loss = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>>;

fn primitive_cases() -> (Vec<(&'static str, Loss)>, Vec<Tensor>) {
    let mut rng = SplitMix64::new(7);
    let seg: Rc<[usize]> = Rc::from(vec![0usize, 2, 0, 1, 2, 2]);
    let mask: Rc<[bool]> = Rc::from(vec![true, true, false, true, true, true]);
    let feats = Rc::new(rand_tensor(&mut rng, &[6, 2]));
    let y: Rc<[f64]> = Rc::from(vec![0.3, -0.2, 0.5]);
    let params = vec![
        rand_tensor(&mut rng, &[6, 3]),
        rand_tensor(&mut rng, &[3, 3]),
        rand_tensor(&mut rng, &[3]),
        rand_tensor(&mut rng, &[6, 1]),
        rand_tensor(&mut rng, &[6, 9]),
    ];
    let sq = |t: &mut Tape, x: Var| -> Result<Var, DiffError> {
        let x = t.mul(x, x)?;
        t.sum_all(x)
    };
    let mut cases: Vec<(&'static str, Loss)> = vec![
        ("matmul, add_row", Box::new(move |t: &mut Tape, v: &[Var]| {
            let a = t.matmul(v[0], v[1])?;
            let a = t.add_row(a, v[2])?;
            sq(t, a)
        })),
        ("mul_row, mul_col, affine, sub, add", Box::new(move |t: &mut Tape, v: &[Var]| {
            let a = t.mul_row(v[0], v[2])?;
            let a = t.mul_col(a, v[3])?;
            let b = t.affine(v[0], 0.5, 1.0)?;
            let c = t.sub(a, b)?;
            let c = t.add(c, v[0])?;
            sq(t, c)
        })),
        ("concat, slice_cols, reshape", Box::new(move |t: &mut Tape, v: &[Var]| {
            let c = t.concat(&[v[0], v[3], v[0]])?;
            let s = t.slice_cols(c, 2, 6)?;
            let r = t.reshape(s, &[12, 2])?;
            sq(t, r)
        })),
        ("gather_rows", Box::new(move |t: &mut Tape, v: &[Var]| {
            let g = t.gather_rows(v[0], Rc::from(vec![1usize, 1, 5, 0]))?;
            sq(t, g)
        })),
        ("row_reduce, row_dot", Box::new(move |t: &mut Tape, v: &[Var]| {
            let a = t.row_reduce(v[0], Reduce::Sum)?;
            let b = t.row_reduce(v[0], Reduce::Mean)?;
            let c = t.row_reduce(v[0], Reduce::Max)?;
            let d = t.row_dot(v[0], v[0])?;
            let s = t.concat(&[a, b, c, d])?;
            sq(t, s)
        })),
        ("edge_mix", Box::new(move |t: &mut Tape, v: &[Var]| {
            let m = t.edge_mix(v[4], feats.clone())?;
            sq(t, m)
        })),
        ("gaussian_nll", Box::new(move |t: &mut Tape, v: &[Var]| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.gather_rows(h, Rc::from(vec![0usize, 3, 5]))?;
            let mu = t.slice_cols(h, 0, 1)?;
            let raw = t.slice_cols(h, 1, 2)?;
            let var = t.activation(raw, Activation::Softplus)?;
            let var = t.affine(var, 1.0, 1e-6)?;
            t.gaussian_nll(mu, var, y.clone())
        })),
        ("gru_cell", Box::new(move |t: &mut Tape, v: &[Var]| {
            let state = t.slice_cols(v[4], 0, 3)?;
            let w = t.concat(&[v[1], v[1], v[1]])?;
            let u_zr = t.concat(&[v[1], v[1]])?;
            let b = t.concat(&[v[2], v[2], v[2]])?;
            let b = t.reshape(b, &[9])?;
            let p = GruVars { w, u_zr, u_h: v[1], b };
            let h = gru_cell(t, state, v[0], &p)?;
            sq(t, h)
        })),
        ("segment_softmax", Box::new({
            let (seg, mask) = (seg.clone(), mask.clone());
            move |t: &mut Tape, v: &[Var]| {
                let a = t.segment_softmax(v[3], seg.clone(), 3, Some(mask.clone()))?;
                let w = t.mul_col(v[0], a)?;
                sq(t, w)
            }
        })),
    ];
    for (name, kind) in [("segment_reduce sum", Reduce::Sum), ("segment_reduce mean", Reduce::Mean), ("segment_reduce max", Reduce::Max)] {
        let (seg, mask) = (seg.clone(), mask.clone());
        cases.push((name, Box::new(move |t: &mut Tape, v: &[Var]| {
            let s = t.segment_reduce(v[0], seg.clone(), 4, kind, Some(mask.clone()))?;
            sq(t, s)
        })));
    }
    (cases, params)
}

const COVERING: [[u32; 22]; 5] = [
    [0, 0, 1, 0, 1, 0, 0, 1, 0, 1, 0, 1, 1, 2, 1, 2, 4, 0, 1, 1, 2, 3],
    [0, 4, 0, 1, 1, 1, 0, 3, 0, 2, 7, 1, 0, 0, 0, 1, 1, 0, 0, 2, 1, 9],
    [0, 5, 0, 1, 1, 1, 1, 1, 0, 1, 1, 1, 0, 3, 0, 0, 4, 0, 2, 0, 1, 6],
    [0, 2, 0, 1, 0, 0, 0, 0, 0, 2, 1, 1, 0, 4, 0, 1, 7, 1, 1, 1, 1, 0],
    [0, 1, 1, 0, 1, 1, 0, 2, 0, 0, 3, 0, 0, 0, 0, 1, 1, 0, 0, 0, 0, 10],
];
const FD_SMILES: [&str; 6] = ["CCO", "c1ccccc1O", "CC(=O)N", "C", "ClC(Cl)Cl", "C1CC1C#N"];

fn criterion_2(r: &mut Report) {
    let t = Instant::now();
    let (cases, params) = primitive_cases();
    let mut worst_prim = 0.0f64;
    let mut worst_name = "";
    for (name, f) in &cases {
        let e = finite_diff_check(f, &params, FD_STEP).unwrap();
        if e > worst_prim {
            worst_prim = e;
            worst_name = name;
        }
    }
    for act in Activation::ALL {
        let x = Tensor::vector(vec![-2.3, -0.7, 0.4, 1.9, 5.2, 7.1]);
        let e = finite_diff_check(
            |t, v| {
                let a = t.activation(v[0], act)?;
                let a = t.mul(a, a)?;
                t.sum_all(a)
            },
            &[x],
            FD_STEP,
        )
        .unwrap();
        worst_prim = worst_prim.max(e);
    }

    let space = SearchSpace::default();
    let graphs: Vec<MolGraph> = FD_SMILES
        .iter()
        .map(|s| featurize(&parse_smiles(s).unwrap(), 8, 24).unwrap())
        .collect();
    let refs: Vec<&MolGraph> = graphs.iter().collect();
    let batch = PackedBatch::pack(&refs, NODE_FEATURES, EDGE_FEATURES).unwrap();
    let mut worst_model = 0.0f64;
    let (mut attn, mut upd, mut agg, mut gat) = (HashSet::new(), HashSet::new(), HashSet::new(), HashSet::new());
    for (i, genes) in COVERING.iter().enumerate() {
        let genome = Genome::new(genes.to_vec());
        let arch = space.decode(&genome).unwrap();
        for s in &arch.stages {
            attn.insert(format!("{:?}", s.attention));
            upd.insert(format!("{:?}", s.update));
            agg.insert(format!("{:?}", s.aggregate));
        }
        gat.insert(format!("{:?}", arch.gather));
        let m = Model::instantiate(&space, &genome, 8, NODE_FEATURES, EDGE_FEATURES, 100 + i as u64).unwrap();
        let y: Rc<[f64]> = m
            .predict(&refs)
            .unwrap()
            .iter()
            .enumerate()
            .map(|(k, p)| p.mu + (k as f64 - 2.5) * 0.2 * p.var.sqrt())
            .collect();
        let e = finite_diff_check(
            |tape, vars| {
                let o = m.forward(tape, vars, &batch, None).map_err(|e| match e {
                    ModelError::Diff(d) => d,
                    other => panic!("{other}"),
                })?;
                tape.gaussian_nll(o.mu, o.var, y.clone())
            },
            m.params(),
            FD_STEP,
        )
        .unwrap();
        worst_model = worst_model.max(e);
    }
    let secs = t.elapsed().as_secs_f64();
    let covered = attn.len() == 6 && upd.len() == 2 && agg.len() == 3 && gat.len() >= 4;
    r.line(
        "2 gradient suite",
        worst_prim < FD_TOL && worst_model < FD_TOL && covered && secs < 300.0,
        format!(
            "{} primitive cases + {} activations worst rel. err {worst_prim:.2e} ({worst_name}); \
             5 full models worst {worst_model:.2e}; coverage attention {} update {} aggregate {} gather {}; \
             {secs:.1} s (tol {FD_TOL:e}, < 300 s)",
            cases.len(),
            Activation::ALL.len(),
            attn.len(),
            upd.len(),
            agg.len(),
            gat.len()
        ),
    );
}

fn criterion_3(r: &mut Report, graphs: &[MolGraph]) {
    let space = SearchSpace::default();
    let mut rng = SplitMix64::new(2024);
    let (mut worst_pad, mut worst_perm) = (0.0f64, 0.0f64);
    let mut perm_checked = 0;
    let n_max = graphs[0].n_max;
    for trial in 0..50 {
        let genome = space.random_genome(&mut rng);
        let model = Model::instantiate(&space, &genome, n_max + 6, NODE_FEATURES, EDGE_FEATURES, trial).unwrap();
        let small: Vec<MolGraph> = (0..4).map(|_| graphs[rng.below(graphs.len())].clone()).collect();
        let large: Vec<MolGraph> = small.iter().map(|g| g.repad(n_max + 6, g.e_max + 30).unwrap()).collect();
        let a = model.predict(&small.iter().collect::<Vec<_>>()).unwrap();
        let b = model.predict(&large.iter().collect::<Vec<_>>()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            worst_pad = worst_pad.max((x.mu - y.mu).abs()).max((x.var - y.var).abs());
        }
        if model.architecture().gather != gnnuq_core::archspace::Gather::Flatten {
            perm_checked += 1;
            let permuted: Vec<MolGraph> = small
                .iter()
                .map(|g| {
                    let mut perm: Vec<usize> = (0..g.n_max).collect();
                    rng.shuffle(&mut perm);
                    g.permute_nodes(&perm)
                })
                .collect();
            let c = model.predict(&permuted.iter().collect::<Vec<_>>()).unwrap();
            for (x, y) in a.iter().zip(&c) {
                worst_perm = worst_perm.max((x.mu - y.mu).abs()).max((x.var - y.var).abs());
            }
        }
    }
    r.line(
        "3 structural invariance",
        worst_pad <= PAD_TOL && worst_perm <= PERM_TOL,
        format!(
            "50 random genomes x 4 molecules: padding max diff {worst_pad:.1e} (tol {PAD_TOL:e}); \
             permutation max diff {worst_perm:.1e} over {perm_checked} non-flatten genomes (tol {PERM_TOL:e})"
        ),
    );
}

fn random_set(rng: &mut SplitMix64, k: usize, n: usize, identical: bool) -> PredictionSet {
    let base_mu: Vec<f64> = (0..n).map(|_| 3.0 * rng.normal()).collect();
    let base_var: Vec<f64> = (0..n).map(|_| rng.uniform(0.01, 4.0)).collect();
    let members = (0..k)
        .map(|j| Member {
            name: j.to_string(),
            mu: if identical { base_mu.clone() } else { (0..n).map(|_| 3.0 * rng.normal()).collect() },
            var: if identical { base_var.clone() } else { (0..n).map(|_| rng.uniform(0.01, 4.0)).collect() },
        })
        .collect();
    PredictionSet {
        ids: (0..n).collect(),
        y: (0..n).map(|_| rng.normal()).collect(),
        members,
    }
}

fn criterion_4(r: &mut Report) {
    let mut rng = SplitMix64::new(4);
    let mut worst = 0.0f64;
    let mut identical_ok = true;
    let mut sets = 0;
    for k in [1, 2, 5, 10] {
        for _ in 0..50 {
            let s = ensemble_summary(&random_set(&mut rng, k, 40, false)).unwrap();
            for i in 0..s.len() {
                worst = worst.max((s.total[i] - s.aleatoric[i] - s.epistemic[i]).abs());
            }
            let p = random_set(&mut rng, k, 40, true);
            let s = ensemble_summary(&p).unwrap();
            identical_ok &= s.epistemic.iter().all(|&e| e == 0.0);
            identical_ok &= s.aleatoric == p.members[0].var;
            sets += 2;
        }
    }
    r.line(
        "4 decomposition identity",
        worst <= DECOMP_TOL && identical_ok,
        format!(
            "{sets} sets, K in {{1,2,5,10}}: max |total - alea - epi| {worst:.1e} (tol {DECOMP_TOL:e}); \
             identical members give epistemic == 0: {identical_ok}"
        ),
    );
}

fn brute_spearman(a: &[f64], b: &[f64]) -> f64 {
    let ranks = |x: &[f64]| -> Vec<f64> {
        x.iter()
            .map(|&v| {
                let less = x.iter().filter(|&&w| w < v).count() as f64;
                let eq = x.iter().filter(|&&w| w == v).count() as f64;
                less + (eq + 1.0) / 2.0
            })
            .collect()
    };
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>();
    let sa = ra.iter().map(|x| (x - ma).powi(2)).sum::<f64>().sqrt();
    let sb = rb.iter().map(|y| (y - mb).powi(2)).sum::<f64>().sqrt();
    cov / (sa * sb)
}

fn criterion_5(r: &mut Report) {
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let cases = [
        (metric_nll(&[1.0], &[1.0], &[1.0]).unwrap(), half_ln_2pi),
        (metric_nll(&[0.0], &[1.0], &[1.0]).unwrap(), half_ln_2pi + 0.5),
        (metric_nll(&[2.0], &[std::f64::consts::E], &[2.0]).unwrap(), half_ln_2pi + 0.5),
        (
            metric_nll(&[0.0, 0.0], &[1.0, 2.0], &[0.0, 0.0]).unwrap(),
            half_ln_2pi + 0.25 * 2f64.ln(),
        ),
        (nll_loss(&[3.0], &[4.0], &[1.0]).unwrap(), half_ln_2pi + 0.5 * 4f64.ln() + 0.5),
    ];
    let nll_err = cases.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let mut rng = SplitMix64::new(55);
    let mut sp_err = 0.0f64;
    let mut checked = 0;
    while checked < 1000 {
        let n = 2 + rng.below(60);
        let levels = 1 + rng.below(10);
        let a: Vec<f64> = (0..n).map(|_| rng.below(levels) as f64).collect();
        let b: Vec<f64> = (0..n).map(|_| (rng.normal() * 2.0).round()).collect();
        if let Ok(v) = spearman(&a, &b) {
            sp_err = sp_err.max((v - brute_spearman(&a, &b)).abs());
            checked += 1;
        }
    }

    let mut mce_ge_ece = true;
    for seed in 0..200 {
        let p = random_set(&mut SplitMix64::new(seed), 1, 30, false);
        let c = calibration_curve(&p.members[0].mu, &p.members[0].var, &p.y).unwrap();
        mce_ge_ece &= c.mce >= c.ece;
    }

    let y: Vec<f64> = (0..50).map(|i| (i as f64 * 0.7).cos()).collect();
    let var: Vec<f64> = (0..50).map(|i| 0.1 + i as f64 * 0.05).collect();
    let all_correct = calibration_curve(&y, &var, &y).unwrap().mca;

    let mu: Vec<f64> = y.iter().enumerate().map(|(i, v)| v + (i as f64 * 1.3).sin()).collect();
    let errs: Vec<f64> = mu.iter().zip(&y).map(|(m, t)| (m - t).abs()).collect();
    let oracle = confidence_curve(&mu, &errs.iter().map(|e| e * e + 0.01).collect::<Vec<_>>(), &y).unwrap();

    r.line(
        "5 metric oracles",
        nll_err <= ORACLE_TOL && sp_err <= ORACLE_TOL && mce_ge_ece && all_correct == 0.5 && oracle.auco == 0.0,
        format!(
            "NLL closed forms max err {nll_err:.1e}; Spearman vs brute force max err {sp_err:.1e} over 1000 vectors; \
             MCE >= ECE on 200 sets: {mce_ge_ece}; all-correct MCA = {all_correct}; oracle-ordered AUCO = {}",
            oracle.auco
        ),
    );
}

fn gaussian(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = SplitMix64::new(seed);
    let (mut mu, mut var, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let m = 3.0 * rng.normal();
        let s = rng.uniform(0.2, 2.0);
        mu.push(m);
        var.push(s * s);
        y.push(m + s * rng.normal());
    }
    (mu, var, y)
}

fn single(mu: Vec<f64>, var: Vec<f64>) -> EnsembleSummary {
    EnsembleSummary {
        mu,
        aleatoric: var.clone(),
        epistemic: vec![0.0; var.len()],
        total: var,
    }
}

fn criterion_6(r: &mut Report) {
    let (mu, var, y) = gaussian(100_000, 61);
    let mca = calibration_curve(&mu, &var, &y).unwrap().mca;
    let (c1, c2) = coverage(&mu, &var, &y).unwrap();

    let inflated = single(mu.clone(), var.iter().map(|v| 9.0 * v).collect());
    let (rec, _) = recalibrate(&inflated, &inflated, &y).unwrap();

    let (mu_c, var_c, y_c) = gaussian(10_000, 62);
    let under = single(mu_c.clone(), var_c.iter().map(|v| v / 4.0).collect());
    let (params, _) = calibrated_nll(&under, &under, &y_c, &y_c).unwrap();

    let mut cnll_ok = true;
    for seed in 0..30 {
        let (m, v, t) = gaussian(300, 100 + seed);
        let f = [0.1, 0.5, 1.0, 3.0, 10.0][seed as usize % 5];
        let s = single(m, v.iter().map(|x| x * f).collect());
        let (p, _) = calibrated_nll(&s, &s, &t, &t).unwrap();
        let fitted = metric_nll(&s.mu, &p.apply(&s.total), &t).unwrap();
        cnll_ok &= fitted <= metric_nll(&s.mu, &s.total, &t).unwrap() + 1e-9;
    }

    let pass = mca < 0.02
        && (c1 - 0.683).abs() <= 0.01
        && (c2 - 0.954).abs() <= 0.01
        && (0.30..=0.37).contains(&rec.a)
        && rec.post_mca < 0.02
        && (3.8..=4.2).contains(&params.a)
        && cnll_ok;
    r.line(
        "6 synthetic calibration",
        pass,
        format!(
            "1e5 samples: MCA {mca:.4} (< 0.02), coverage ({c1:.4}, {c2:.4}) (0.683/0.954 +- 0.01); \
             3x sigma: a {:.4} in [0.30, 0.37], post-MCA {:.4}; 4x var underestimate: cNLL a {:.3} in [3.8, 4.2], b {:.4}; \
             cNLL_val <= NLL_val on 30 sets: {cnll_ok}",
            rec.a, rec.post_mca, params.a, params.b
        ),
    );
}

fn criterion_7(r: &mut Report) {
    let t = Instant::now();
    let space = SearchSpace::default();
    let (p, s, evals) = (20usize, 5usize, 300usize);
    let mut non_degrading = 0;
    let mut beats_random = 0;
    let mut pop_ok = true;
    let mut hamming_ok = true;
    for trial in 0..20u64 {
        let surrogate = SurrogateEvaluator::new(&space, 1000 + trial);
        let cfg = SearchConfig {
            total_evals: evals,
            population_size: p,
            sample_size: s,
            seed: trial,
            record_timing: false,
            ..SearchConfig::default()
        };
        let mut sizes = Vec::new();
        let recs = run_search(&space, &cfg, &surrogate, None, |_, n| sizes.push(n)).unwrap();
        pop_ok &= sizes[p - 1..].iter().all(|&n| n == p) && sizes.iter().all(|&n| n <= p);
        for rec in &recs {
            if let Some(parent) = rec.parent_eval_id {
                hamming_ok &= rec.genome.hamming(&recs[parent].genome) == 1;
            }
        }
        let mean = |rs: &[CatalogRecord]| rs.iter().map(|r| -r.loss()).sum::<f64>() / rs.len() as f64;
        if mean(&recs[evals - p..]) >= mean(&recs[..p]) {
            non_degrading += 1;
        }
        let best = recs.iter().map(|r| -r.loss()).fold(f64::NEG_INFINITY, f64::max);
        let mut rng = SplitMix64::new(9000 + trial);
        let random_best = (0..evals)
            .map(|_| -surrogate.score(&space.random_genome(&mut rng)))
            .fold(f64::NEG_INFINITY, f64::max);
        if best >= random_best {
            beats_random += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    r.line(
        "7 evolution suite",
        pop_ok && hamming_ok && non_degrading == 20 && beats_random >= 16 && secs < 60.0,
        format!(
            "population = P after warmup: {pop_ok}; children at Hamming 1: {hamming_ok}; \
             final >= initial mean reward {non_degrading}/20; best >= random-300 best {beats_random}/20 (need 16); {secs:.2} s"
        ),
    );
}

struct DeskRun {
    data: Prepared,
    catalog: Vec<CatalogRecord>,
    members: Vec<TrainedMember>,
    val: PredictionSet,
    test: PredictionSet,
    eval: Evaluation,
    seconds: f64,
}

fn desk_run(path: &Path) -> DeskRun {
    let t = Instant::now();
    let dataset = load_dataset(path, "smiles", "y").unwrap().dataset;
    let split = split_dataset(&dataset, &SplitSpec::new([5, 2, 3], 0)).unwrap();
    let data = Prepared::new(dataset, split).unwrap();
    let space = SearchSpace::default();
    let search_train = TrainConfig {
        epochs: DESK_SEARCH_EPOCHS,
        ..TrainConfig::default()
    };
    let catalog = {
        let tr = data.train_data(SplitName::Train);
        let va = data.train_data(SplitName::Val);
        let evaluator = TrainingEvaluator {
            space: &space,
            train: &tr,
            val: &va,
            n_max: data.n_max(),
            config: search_train.clone(),
        };
        let cfg = SearchConfig {
            total_evals: DESK_EVALS,
            population_size: DESK_POPULATION,
            sample_size: DESK_SAMPLE,
            workers: 1,
            train: search_train,
            seed: 0,
            record_timing: true,
        };
        run_search(&space, &cfg, &evaluator, None, |_, _| {}).unwrap()
    };
    let candidates: Vec<Candidate> = gnnuq_core::evolver::ranked(&catalog)
        .iter()
        .map(Candidate::from)
        .collect();
    let post = TrainConfig {
        epochs: DESK_POST_EPOCHS,
        keep_best_on_val: true,
        ..TrainConfig::default()
    };
    let members = train_ensemble(&space, &data, &candidates, DESK_TOP_K, &post, 0).unwrap();
    let refs: Vec<_> = members
        .iter()
        .map(|m| (m.name.as_str(), &m.model, data.scaler))
        .collect();
    let val = predict_split(&refs, &data, SplitName::Val).unwrap();
    let test = predict_split(&refs, &data, SplitName::Test).unwrap();
    let eval = evaluate(&test, Some(&val), true).unwrap();
    DeskRun {
        data,
        catalog,
        members,
        val,
        test,
        eval,
        seconds: t.elapsed().as_secs_f64(),
    }
}

fn describe(run: &DeskRun) -> String {
    let t = &run.eval.report.test;
    format!(
        "{} molecules, {} evals ({} failed), top-{} x {} epochs: test MAE {:.3}, RMSE {:.3}, NLL {:.3}, cNLL {}, \
         Spearman {}, MCA {:.3}, recal MCA {:.3} (a {:.3}), cov1 {:.3}, cov2 {:.3}, AUCO {:.3}; {:.1} min",
        run.data.dataset.len(),
        run.catalog.len(),
        run.catalog.iter().filter(|r| !r.loss().is_finite()).count(),
        run.members.len(),
        DESK_POST_EPOCHS,
        t.mae,
        t.rmse,
        t.nll,
        t.cnll.map_or("undefined".into(), |v| format!("{v:.3}")),
        t.spearman.map_or("undefined".into(), |v| format!("{v:.3}")),
        t.mca,
        t.recal_mca.unwrap_or(f64::NAN),
        t.recal_a.unwrap_or(f64::NAN),
        t.cov1,
        t.cov2,
        t.auco,
        run.seconds / 60.0
    )
}

fn criterion_8(r: &mut Report) -> DeskRun {
    let run = desk_run(&data_path("freesolv.csv"));
    let t = &run.eval.report.test;
    let recal = t.recal_mca.unwrap_or(f64::INFINITY);
    r.line(
        "8 FreeSolv desk run",
        t.mae <= 2.5 && t.nll <= 3.0 && recal <= 0.10 && run.seconds <= 3600.0,
        format!(
            "{} (need MAE <= 2.5 kcal/mol, NLL <= 3.0, recal MCA <= 0.10, <= 60 min)",
            describe(&run)
        ),
    );
    r.info(
        "8 FreeSolv coverage",
        format!("1-std coverage {:.1}%, {} molecules loaded (reference count 643)", 100.0 * t.cov1, run.data.dataset.len()),
    );
    run
}

fn criterion_9(r: &mut Report) {
    let run = desk_run(&data_path("esol.csv"));
    let t = &run.eval.report.test;
    r.line(
        "9 ESOL desk run",
        t.mae <= 1.5 && (0.60..=0.95).contains(&t.cov1) && run.seconds <= 5400.0,
        format!(
            "{} (need MAE <= 1.5 log mol/L, cov1 in [0.60, 0.95], <= 90 min)",
            describe(&run)
        ),
    );
}

fn criterion_10(r: &mut Report, run: &DeskRun) {
    let t = Instant::now();
    let space = SearchSpace::default();
    let data = &run.data;
    let best = select_top_k(&run.catalog, 1).unwrap();
    let zero = predict_mc_dropout(&run.members[0].model, data.scaler, data, SplitName::Test, 0.0, 10, 0).unwrap();
    let zero_epi = ensemble_summary(&zero).unwrap().epistemic.iter().all(|&e| e == 0.0);

    let mc_cfg = TrainConfig {
        epochs: DESK_POST_EPOCHS,
        keep_best_on_val: true,
        dropout: 0.1,
        ..TrainConfig::default()
    };
    let mc_member = train_ensemble(&space, data, &[Candidate::from(&best[0])], 1, &mc_cfg, 0)
        .unwrap()
        .pop()
        .unwrap();
    let mc_test = predict_mc_dropout(&mc_member.model, data.scaler, data, SplitName::Test, 0.1, 10, 0).unwrap();
    let mc_val = predict_mc_dropout(&mc_member.model, data.scaler, data, SplitName::Val, 0.1, 10, 0).unwrap();
    let mc = evaluate(&mc_test, Some(&mc_val), true).unwrap().report.test;
    let ens_mae = run.eval.report.test.mae;
    let ratio = mc.mae / ens_mae;
    r.line(
        "10 MC dropout baseline",
        zero_epi && ratio <= 1.5,
        format!(
            "rate 0 epistemic == 0: {zero_epi}; rate 0.1, N=10: test MAE {:.3} vs ensemble {ens_mae:.3} (ratio {ratio:.2}, need <= 1.5), NLL {:.3}",
            mc.mae, mc.nll
        ),
    );

    let post = TrainConfig {
        epochs: DESK_POST_EPOCHS,
        keep_best_on_val: true,
        ..TrainConfig::default()
    };
    let candidates: Vec<Candidate> = random_baseline(&space, DESK_TOP_K * 2, 0)
        .into_iter()
        .map(|genome| Candidate { genome, eval_id: None })
        .collect();
    let members = train_ensemble(&space, data, &candidates, DESK_TOP_K, &post, 0).unwrap();
    let refs: Vec<_> = members
        .iter()
        .map(|m| (m.name.as_str(), &m.model, data.scaler))
        .collect();
    let test = predict_split(&refs, data, SplitName::Test).unwrap();
    let rnd = evaluate(&test, None, false).unwrap().report.test;
    r.info(
        "10 random ensemble (report only)",
        format!(
            "random top-{DESK_TOP_K} test MAE {:.3}, NLL {:.3} vs searched ensemble MAE {ens_mae:.3}, NLL {:.3}; \
             random >= searched: {}; baselines {:.1} min",
            rnd.mae,
            rnd.nll,
            run.eval.report.test.nll,
            rnd.mae >= ens_mae,
            t.elapsed().as_secs_f64() / 60.0
        ),
    );
    let _ = (&run.val, &run.test);
}

fn pipeline_once(dir: &Path, data: &Path) -> Vec<(String, Vec<u8>)> {
    let bin = env!("CARGO_BIN_EXE_gnnuq");
    let run = |args: &[&str]| {
        let out = Command::new(bin)
            .args(args)
            .current_dir(dir)
            .env("RUST_LOG", "error")
            .env_remove("GNNUQ_THREADS")
            .output()
            .unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    let d = data.to_str().unwrap();
    run(&["split", "--data", d, "--seed", "3", "--out", "split.json"]);
    run(&["search", "--data", d, "--splits", "split.json", "--evals", "8", "--population", "4",
          "--sample", "2", "--workers", "1", "--epochs", "3", "--seed", "5", "--no-timing",
          "--catalog", "catalog.jsonl"]);
    run(&["posttrain", "--data", d, "--splits", "split.json", "--catalog", "catalog.jsonl",
          "--top-k", "2", "--epochs", "4", "--keep-best", "--seed", "5", "--out-dir", "models"]);
    for split in ["val", "test"] {
        run(&["predict", "--models", "models", "--data", d, "--splits", "split.json", "--split", split,
              "--out", &format!("{split}.csv")]);
    }
    run(&["evaluate", "--preds", "test.csv", "--val-preds", "val.csv", "--recalibrate", "--report", "report.json"]);
    let mut files: Vec<String> = vec!["catalog.jsonl".into(), "report.json".into(), "test.csv".into()];
    let mut models: Vec<String> = std::fs::read_dir(dir.join("models"))
        .unwrap()
        .map(|e| format!("models/{}", e.unwrap().file_name().to_string_lossy()))
        .collect();
    models.sort();
    files.extend(models);
    files
        .into_iter()
        .map(|f| {
            let bytes = std::fs::read(dir.join(&f)).unwrap();
            (f, bytes)
        })
        .collect()
}

fn criterion_11(r: &mut Report) {
    let tmp = std::env::temp_dir().join(format!("gnnuq-acceptance-{}", std::process::id()));
    let (a, b) = (tmp.join("a"), tmp.join("b"));
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    let text = std::fs::read_to_string(data_path("freesolv.csv")).unwrap();
    let subset: Vec<&str> = text.lines().take(81).collect();
    let data = tmp.join("subset.csv");
    std::fs::write(&data, subset.join("\n") + "\n").unwrap();
    let first = pipeline_once(&a, &data);
    let second = pipeline_once(&b, &data);
    let identical = first == second;
    let checkpoints = first.iter().filter(|(f, _)| f.ends_with(".guqw")).count();
    r.line(
        "11 determinism",
        identical && checkpoints == 2,
        format!(
            "two workers=1 CLI runs (split, search, posttrain, predict, evaluate): {} files compared incl. catalog, \
             {checkpoints} checkpoints and report; byte-identical: {identical}",
            first.len()
        ),
    );
    let _ = std::fs::remove_dir_all(&tmp);
}

fn main() {
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |c: u32| only.is_empty() || only.contains(&c);
    let mut r = Report { failures: Vec::new() };
    let started = Instant::now();
    if want(1) {
        criterion_1(&mut r);
    }
    if want(2) {
        criterion_2(&mut r);
    }
    if want(3) {
        let freesolv = load_dataset(data_path("freesolv.csv"), "smiles", "y").unwrap().dataset.graphs();
        criterion_3(&mut r, &freesolv);
    }
    if want(4) {
        criterion_4(&mut r);
    }
    if want(5) {
        criterion_5(&mut r);
    }
    if want(6) {
        criterion_6(&mut r);
    }
    if want(7) {
        criterion_7(&mut r);
    }
    if want(11) {
        criterion_11(&mut r);
    }
    if want(8) || want(10) {
        let run = criterion_8(&mut r);
        if want(10) {
            criterion_10(&mut r, &run);
        }
    }
    if want(9) {
        criterion_9(&mut r);
    }
    println!(
        "acceptance: {} failed criteria in {:.1} min",
        r.failures.len(),
        started.elapsed().as_secs_f64() / 60.0
    );
    if !r.failures.is_empty() {
        eprintln!("failed: {}", r.failures.join(", "));
        std::process::exit(1);
    }
}
