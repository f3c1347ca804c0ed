use proptest::prelude::*;

use super::*;
use crate::rng::SplitMix64;
use crate::trainer::nll_loss;

fn set(mus: &[&[f64]], vars: &[&[f64]], y: &[f64]) -> PredictionSet {
    PredictionSet {
        ids: (0..y.len()).collect(),
        y: y.to_vec(),
        members: mus
            .iter()
            .zip(vars)
            .enumerate()
            .map(|(k, (m, v))| Member {
                name: k.to_string(),
                mu: m.to_vec(),
                var: v.to_vec(),
            })
            .collect(),
    }
}

/// Synthetic regression with known per-sample noise.
fn gaussian(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = SplitMix64::new(seed);
    let mut mu = Vec::with_capacity(n);
    let mut var = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
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

#[test]
fn decomposition_examples() {
    let s = ensemble_summary(&set(&[&[0.0], &[2.0]], &[&[1.0], &[1.0]], &[0.0])).unwrap();
    assert_eq!((s.mu[0], s.aleatoric[0], s.epistemic[0], s.total[0]), (1.0, 1.0, 2.0, 3.0));

    let s = ensemble_summary(&set(&[&[1.5, 2.0][..]; 3], &[&[0.4, 0.7][..]; 3], &[0.0, 0.0])).unwrap();
    assert_eq!(s.epistemic, vec![0.0, 0.0]);
    assert!((s.aleatoric[0] - 0.4).abs() < 1e-15);

    let s = ensemble_summary(&set(&[&[1.0, 2.0]], &[&[0.5, 0.25]], &[0.0, 0.0])).unwrap();
    assert_eq!(s.epistemic, vec![0.0, 0.0]);
    assert_eq!(s.total, vec![0.5, 0.25]);
}

#[test]
fn prediction_set_errors() {
    let mut p = set(&[&[0.0, 1.0]], &[&[1.0, 1.0]], &[0.0, 1.0]);
    p.members[0].var[1] = 0.0;
    assert!(matches!(ensemble_summary(&p), Err(UqError::NonPositiveVariance)));
    p.members[0].var.pop();
    assert!(matches!(ensemble_summary(&p), Err(UqError::LengthMismatch(_))));
    p.members.clear();
    assert!(matches!(ensemble_summary(&p), Err(UqError::NoMembers)));
}

#[test]
fn nll_examples() {
    let v = metric_nll(&[1.0], &[1.0], &[1.0]).unwrap();
    assert!((v - 0.918_938_533_204_672_7).abs() < 1e-12);
    let d = metric_nll(&[1.0], &[2.0], &[1.0]).unwrap() - v;
    assert!((d - 0.5 * 2f64.ln()).abs() < 1e-12);
    assert!(matches!(metric_nll(&[0.0], &[0.0], &[0.0]), Err(UqError::NonPositiveVariance)));

    let (mu, var, y) = gaussian(500, 9);
    let a = metric_nll(&mu, &var, &y).unwrap();
    let b = nll_loss(&mu, &var, &y).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn spearman_examples() {
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
    assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
    assert!(matches!(spearman(&[1.0, 1.0], &[1.0, 2.0]), Err(UqError::DegenerateInput)));
    assert!(matches!(spearman(&[1.0], &[1.0]), Err(UqError::DegenerateInput)));
    assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
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
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
    let sa = (ra.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n).sqrt();
    let sb = (rb.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / n).sqrt();
    cov / (sa * sb)
}

#[test]
fn spearman_matches_brute_force_with_ties() {
    let mut rng = SplitMix64::new(17);
    let mut checked = 0;
    while checked < 1000 {
        let n = 2 + rng.below(60);
        let levels = 1 + rng.below(12);
        let a: Vec<f64> = (0..n).map(|_| rng.below(levels) as f64).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let b: Vec<f64> = if checked % 2 == 0 {
            b.iter().map(|v| (v * 2.0).round()).collect()
        } else {
            b
        };
        match spearman(&a, &b) {
            Ok(r) => {
                assert!((r - brute_spearman(&a, &b)).abs() < 1e-12);
                checked += 1;
            }
            Err(UqError::DegenerateInput) => {}
            Err(e) => panic!("{e}"),
        }
    }
}

#[test]
fn all_correct_predictions() {
    let y = [1.0, -2.0, 0.5, 4.0];
    let c = calibration_curve(&y, &[0.3, 1.0, 2.0, 0.1], &y).unwrap();
    assert!(c.fractions.iter().all(|&f| f == 1.0));
    assert_eq!(c.mca, 0.5);
    assert!(c.mce >= c.ece);
    assert_eq!(coverage(&y, &[1.0; 4], &y).unwrap(), (1.0, 1.0));
}

#[test]
fn synthetic_gaussian_calibration() {
    let (mu, var, y) = gaussian(100_000, 1);
    let c = calibration_curve(&mu, &var, &y).unwrap();
    assert!(c.mca < 0.02, "mca {}", c.mca);
    let (c1, c2) = coverage(&mu, &var, &y).unwrap();
    assert!((c1 - 0.683).abs() <= 0.01 && (c2 - 0.954).abs() <= 0.01, "{c1} {c2}");
}

#[test]
fn recalibration_recovers_inflation() {
    let (mu, var, y) = gaussian(100_000, 2);
    let inflated: Vec<f64> = var.iter().map(|v| 9.0 * v).collect();
    let val = single(mu.clone(), inflated.clone());
    let (r, test) = recalibrate(&val, &val, &y).unwrap();
    assert!((0.30..=0.37).contains(&r.a), "a {}", r.a);
    assert!(r.post_mca < 0.02 && r.post_mca <= r.pre_mca);
    assert!((test.total[0] - inflated[0] * r.a * r.a).abs() < 1e-12);

    let calibrated = single(mu, var);
    let (r, _) = recalibrate(&calibrated, &calibrated, &y).unwrap();
    assert!((0.9..=1.1).contains(&r.a), "a {}", r.a);
}

#[test]
fn calibrated_nll_recovers_underestimate() {
    let (mu, var, y) = gaussian(10_000, 3);
    let under: Vec<f64> = var.iter().map(|v| v / 4.0).collect();
    let s = single(mu.clone(), under);
    let (p, cnll) = calibrated_nll(&s, &s, &y, &y).unwrap();
    assert!((3.8..=4.2).contains(&p.a), "a {}", p.a);
    assert!(p.b.abs() < 0.05, "b {}", p.b);
    assert!(cnll <= metric_nll(&s.mu, &s.total, &y).unwrap());

    let s = single(mu, var);
    let (p, _) = calibrated_nll(&s, &s, &y, &y).unwrap();
    assert!((0.9..=1.1).contains(&p.a), "a {}", p.a);
}

#[test]
fn empty_validation_is_rejected() {
    let e = single(vec![], vec![]);
    let t = single(vec![0.0], vec![1.0]);
    assert!(matches!(recalibrate(&e, &t, &[]), Err(UqError::EmptyValidation)));
    assert!(matches!(calibrated_nll(&e, &t, &[], &[0.0]), Err(UqError::EmptyValidation)));
}

#[test]
fn confidence_curve_cases() {
    let y = vec![0.0; 50];
    let mu: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
    let errors: Vec<f64> = mu.iter().map(|m| m.abs()).collect();
    let ordered = confidence_curve(&mu, &errors.iter().map(|e| e + 0.1).collect::<Vec<_>>(), &y).unwrap();
    assert_eq!(ordered.auco, 0.0);
    assert_eq!(ordered.mae, ordered.oracle_mae);
    assert_eq!(ordered.percentiles.len(), 100);

    let flat = confidence_curve(&[1.0; 30], &(1..=30).map(|i| i as f64).collect::<Vec<_>>(), &[0.0; 30]).unwrap();
    assert_eq!(flat.auco, 0.0);
    assert!(flat.mae.iter().all(|&m| m == flat.mae[0]));

    // 20 points whose uncertainty ranks are the reverse of their error ranks.
    let mu: Vec<f64> = (1..=20).map(|i| i as f64).collect();
    let var: Vec<f64> = (1..=20).map(|i| 1.0 / i as f64).collect();
    let anti = confidence_curve(&mu, &var, &[0.0; 20]).unwrap();
    let brute: f64 = (0..100)
        .map(|p| {
            let drop = p * 20 / 100;
            let curve = (drop + 1..=20).map(|e| e as f64).sum::<f64>() / (20 - drop) as f64;
            let oracle = (1..=20 - drop).map(|e| e as f64).sum::<f64>() / (20 - drop) as f64;
            curve - oracle
        })
        .sum::<f64>()
        / 100.0;
    assert!(anti.auco > 0.0);
    assert!((anti.auco - brute).abs() < 1e-12, "{} vs {}", anti.auco, brute);
}

#[test]
fn csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = set(&[&[0.5, 1.25], &[0.75, -1.0]], &[&[0.1, 0.2], &[0.3, 0.4]], &[1.0, 2.0]);
    let path = dir.path().join("preds.csv");
    write_predictions_csv(&path, &p).unwrap();
    assert_eq!(read_predictions_csv(&path).unwrap(), p);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("id,y,mu_0,var_0,mu_1,var_1\n"));

    std::fs::write(&path, "id,y,mu_a,var_b\n0,1,2,3\n").unwrap();
    assert!(matches!(read_predictions_csv(&path), Err(UqError::Format { .. })));
    std::fs::write(&path, "id,y,mu_a,var_a\n0,1,x,3\n").unwrap();
    assert!(matches!(read_predictions_csv(&path), Err(UqError::Format { .. })));
}

#[test]
fn report_omits_recalibration_fields_when_absent() {
    let (mu, var, y) = gaussian(300, 4);
    let r = split_metrics(&single(mu, var), &y, 1).unwrap();
    let json = serde_json::to_string(&r).unwrap();
    assert!(!json.contains("recal_"));
    assert!(json.contains("\"auco\""));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metric_ranges(seed in any::<u64>(), n in 2usize..200) {
        let (mu, var, y) = gaussian(n, seed);
        let c = calibration_curve(&mu, &var, &y).unwrap();
        prop_assert!((0.0..=0.5).contains(&c.mca));
        prop_assert!((0.0..=1.0).contains(&c.ece));
        prop_assert!(c.mce >= c.ece);
    }

    #[test]
    fn decomposition_identity(seed in any::<u64>(), k in 1usize..6, n in 1usize..40) {
        let mut rng = SplitMix64::new(seed);
        let members: Vec<Member> = (0..k)
            .map(|j| Member {
                name: j.to_string(),
                mu: (0..n).map(|_| rng.normal()).collect(),
                var: (0..n).map(|_| rng.uniform(0.01, 3.0)).collect(),
            })
            .collect();
        let p = PredictionSet { ids: (0..n).collect(), y: vec![0.0; n], members };
        let s = ensemble_summary(&p).unwrap();
        for i in 0..n {
            prop_assert!((s.total[i] - s.aleatoric[i] - s.epistemic[i]).abs() < 1e-12);
            prop_assert!(s.epistemic[i] >= 0.0 && s.aleatoric[i] > 0.0);
        }
    }

    #[test]
    fn scaling_preserves_ranking_metrics(seed in any::<u64>(), a in 0.01f64..100.0) {
        let (mu, var, y) = gaussian(150, seed);
        let s = single(mu, var);
        let t = s.scaled(a);
        let base = split_metrics(&s, &y, 1).unwrap();
        let scaled = split_metrics(&t, &y, 1).unwrap();
        prop_assert!((base.spearman.unwrap() - scaled.spearman.unwrap()).abs() < 1e-12);
        prop_assert!((base.auco - scaled.auco).abs() < 1e-12);
    }

    #[test]
    fn cnll_never_worse_on_validation(seed in any::<u64>(), f in 0.05f64..20.0) {
        let (mu, var, y) = gaussian(200, seed);
        let s = single(mu, var.iter().map(|v| v * f).collect());
        let (p, _) = calibrated_nll(&s, &s, &y, &y).unwrap();
        let fitted = metric_nll(&s.mu, &p.apply(&s.total), &y).unwrap();
        prop_assert!(fitted <= metric_nll(&s.mu, &s.total, &y).unwrap() + 1e-9);
    }

    #[test]
    fn recalibration_never_worse_on_validation(seed in any::<u64>(), f in 0.05f64..20.0) {
        let (mu, var, y) = gaussian(200, seed);
        let s = single(mu, var.iter().map(|v| v * f).collect());
        let (r, _) = recalibrate(&s, &s, &y).unwrap();
        prop_assert!(r.post_mca <= r.pre_mca);
        let direct = miscalibration_area(&s.mu, &s.scaled(r.a).total, &y).unwrap();
        prop_assert!((direct - r.post_mca).abs() < 1e-9);
    }
}
