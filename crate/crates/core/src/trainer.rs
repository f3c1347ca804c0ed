//! Gaussian-likelihood training with Adam, and MC-dropout prediction.

use std::io::Write;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{nll_value, DiffError, Tape, Tensor};
use crate::molgraph::MolGraph;
use crate::mpnn::{Dropout, Model, ModelError, PackedBatch, Prediction};
use crate::rng::{derive_seed, derive_seed2, SplitMix64};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub keep_best_on_val: bool,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Dropout rate used while training (MC-dropout models).
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            keep_best_on_val: false,
            clip_norm: Some(5.0),
            dropout: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TrainError::Config("dropout must lie in [0, 1)".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(TrainError::Config("clip_norm must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Per-epoch losses, both in standardized target units.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_nll: Vec<f64>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.train_loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_loss.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "epoch,train_loss,val_nll")?;
        for (e, (t, v)) in self.train_loss.iter().zip(&self.val_nll).enumerate() {
            writeln!(f, "{},{t},{v}", e + 1)?;
        }
        f.flush()
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("loss diverged at epoch {epoch}")]
    DivergedLoss { epoch: usize, history: TrainHistory },
    #[error("training split is empty")]
    EmptySplit,
    #[error("{0} graphs but {1} targets")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<DiffError> for TrainError {
    fn from(e: DiffError) -> Self {
        TrainError::Model(ModelError::Diff(e))
    }
}

/// Graphs with standardized targets.
#[derive(Debug, Clone)]
pub struct TrainData<'a> {
    pub graphs: Vec<&'a MolGraph>,
    pub y: Vec<f64>,
}

impl<'a> TrainData<'a> {
    pub fn new(graphs: Vec<&'a MolGraph>, y: Vec<f64>) -> Result<Self, TrainError> {
        if graphs.len() != y.len() {
            return Err(TrainError::LengthMismatch(graphs.len(), y.len()));
        }
        Ok(Self { graphs, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Mean Gaussian negative log-likelihood
/// `1/(2n) * sum(ln 2pi + ln var + (mu - y)^2 / var)`.
pub fn nll_loss(mu: &[f64], var: &[f64], y: &[f64]) -> Result<f64, DiffError> {
    if mu.len() != y.len() || var.len() != y.len() || y.is_empty() {
        return Err(DiffError::ShapeMismatch(format!(
            "nll_loss lengths {} {} {}",
            mu.len(),
            var.len(),
            y.len()
        )));
    }
    if var.iter().any(|&v| !(v > 0.0)) {
        return Err(DiffError::NonPositiveVariance);
    }
    Ok(nll_value(mu, var, y))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        Self {
            lr,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * gk;
                v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                *w -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
    }
}

fn clip(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Mean NLL of `model` on `data`.
pub fn evaluate_nll(model: &Model, data: &TrainData) -> Result<f64, TrainError> {
    let preds = model.predict(&data.graphs)?;
    let mu: Vec<f64> = preds.iter().map(|p| p.mu).collect();
    let var: Vec<f64> = preds.iter().map(|p| p.var).collect();
    Ok(nll_loss(&mu, &var, &data.y)?)
}

/// Trains a copy of `model`. Each epoch reshuffles the training set with a
/// stream derived from `cfg.seed`.
pub fn train(
    model: &Model,
    train: &TrainData,
    val: &TrainData,
    cfg: &TrainConfig,
) -> Result<(Model, TrainHistory), TrainError> {
    cfg.validate()?;
    let mut history = TrainHistory::default();
    let mut current = model.clone();
    if cfg.epochs == 0 {
        return Ok((current, history));
    }
    if train.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let dims = model.dims();
    let mut adam = Adam::new(current.params(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = SplitMix64::new(derive_seed(cfg.seed, 0));
    let mut drop_rng = SplitMix64::new(derive_seed(cfg.seed, 1));
    let mut best: Option<(f64, Model)> = None;
    for epoch in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let graphs: Vec<&MolGraph> = chunk.iter().map(|&i| train.graphs[i]).collect();
            let y: Rc<[f64]> = chunk.iter().map(|&i| train.y[i]).collect();
            let batch = PackedBatch::pack(&graphs, dims.f_n, dims.f_e)?;
            let mut tape = Tape::new();
            let vars = current.bind(&mut tape, true);
            let mut dr = Dropout {
                rate: cfg.dropout,
                rng: &mut drop_rng,
            };
            let dropout = (cfg.dropout > 0.0).then_some(&mut dr);
            let out = current.forward(&mut tape, &vars, &batch, dropout)?;
            let loss = tape.gaussian_nll(out.mu, out.var, y)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(TrainError::DivergedLoss {
                    epoch: epoch + 1,
                    history,
                });
            }
            loss_sum += value * chunk.len() as f64;
            let mut gs = tape.backward(loss)?;
            let mut grads: Vec<Tensor> = vars
                .iter()
                .zip(current.params())
                .map(|(&v, p)| gs.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            drop(tape);
            if grads.iter().any(|g| g.data().iter().any(|x| !x.is_finite())) {
                return Err(TrainError::DivergedLoss {
                    epoch: epoch + 1,
                    history,
                });
            }
            if let Some(c) = cfg.clip_norm {
                clip(&mut grads, c);
            }
            adam.step(current.params_mut(), &grads);
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_nll = if val.is_empty() {
            f64::NAN
        } else {
            match evaluate_nll(&current, val) {
                Ok(v) if v.is_finite() => v,
                Ok(_) | Err(TrainError::Model(ModelError::Diff(DiffError::NonPositiveVariance))) => {
                    history.train_loss.push(train_loss);
                    history.val_nll.push(f64::NAN);
                    return Err(TrainError::DivergedLoss {
                        epoch: epoch + 1,
                        history,
                    });
                }
                Err(e) => return Err(e),
            }
        };
        log::debug!("epoch {} train {train_loss:.4} val {val_nll:.4}", epoch + 1);
        history.train_loss.push(train_loss);
        history.val_nll.push(val_nll);
        if cfg.keep_best_on_val && val_nll.is_finite() {
            if best.as_ref().map_or(true, |(b, _)| val_nll < *b) {
                best = Some((val_nll, current.clone()));
            }
        }
    }
    let final_model = match best {
        Some((_, m)) => m,
        None => current,
    };
    Ok((final_model, history))
}

/// `n_passes` stochastic forward passes with dropout `rate`. Pass `k` draws
/// its masks from a stream derived from `(seed, k)`.
pub fn mc_dropout_predict(
    model: &Model,
    graphs: &[&MolGraph],
    rate: f64,
    n_passes: usize,
    seed: u64,
) -> Result<Vec<Vec<Prediction>>, TrainError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TrainError::Config("dropout rate must lie in [0, 1)".into()));
    }
    (0..n_passes)
        .map(|k| {
            let mut rng = SplitMix64::new(derive_seed2(seed, k as u64, 0x4d43));
            Ok(model.predict_with_dropout(graphs, rate, &mut rng)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archspace::{Genome, SearchSpace};
    use crate::molgraph::{featurize, parse_smiles, TargetScaler, EDGE_FEATURES, NODE_FEATURES};

    const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

    #[test]
    fn nll_hand_cases() {
        for n in [1, 3, 10] {
            let y = vec![0.7; n];
            assert!((nll_loss(&y, &vec![1.0; n], &y).unwrap() - HALF_LN_2PI).abs() < 1e-12);
        }
        let v = nll_loss(&[1.0], &[1.0], &[0.0]).unwrap();
        assert!((v - (HALF_LN_2PI + 0.5)).abs() < 1e-12);
        let e = std::f64::consts::E;
        let v = nll_loss(&[2.0], &[e], &[2.0]).unwrap();
        assert!((v - 1.418_938_533_204_672_7).abs() < 1e-12);
        assert_eq!(nll_loss(&[0.0], &[0.0], &[0.0]), Err(DiffError::NonPositiveVariance));
    }

    #[test]
    fn nll_gradient_vanishes_at_target() {
        let err = crate::diffcore::finite_diff_check(
            |tape, v| {
                let var = tape.constant(Tensor::vector(vec![0.5, 2.0]));
                tape.gaussian_nll(v[0], var, Rc::from(vec![1.0, -1.0]))
            },
            &[Tensor::vector(vec![1.0, -1.0])],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6);
        let mut tape = Tape::new();
        let mu = tape.param(Tensor::vector(vec![1.0, -1.0]));
        let var = tape.constant(Tensor::vector(vec![0.5, 2.0]));
        let l = tape.gaussian_nll(mu, var, Rc::from(vec![1.0, -1.0])).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(mu).unwrap().data().iter().all(|&x| x == 0.0));
    }

    fn synthetic(n: usize, seed: u64) -> (Vec<MolGraph>, Vec<f64>) {
        let mut rng = SplitMix64::new(seed);
        let atoms = ["C", "N", "O", "Cl", "F"];
        let mut graphs = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let len = 1 + rng.below(7);
            let smiles: String = (0..len).map(|_| atoms[rng.below(atoms.len())]).collect();
            let g = featurize(&parse_smiles(&smiles).unwrap(), 8, 16).unwrap();
            let target = g.nodes.iter().sum::<f64>() + 0.5 * rng.normal();
            graphs.push(g);
            y.push(target);
        }
        (graphs, y)
    }

    fn small_model(seed: u64) -> Model {
        let mut genes = vec![0u32; 22];
        genes[21] = 3; // gather-sum
        Model::instantiate(
            &SearchSpace::default(),
            &Genome::new(genes),
            8,
            NODE_FEATURES,
            EDGE_FEATURES,
            seed,
        )
        .unwrap()
    }

    fn data<'a>(graphs: &'a [MolGraph], y: &[f64], scaler: TargetScaler) -> TrainData<'a> {
        let ys = y.iter().map(|&v| scaler.apply(v)).collect();
        TrainData::new(graphs.iter().collect(), ys).unwrap()
    }

    #[test]
    fn learns_a_synthetic_target() {
        let (g, y) = synthetic(200, 5);
        let scaler = TargetScaler::fit(&y[..150]).unwrap();
        let tr = data(&g[..150], &y[..150], scaler);
        let va = data(&g[150..], &y[150..], scaler);
        let model = small_model(3);
        let before = evaluate_nll(&model, &va).unwrap();
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 32,
            seed: 7,
            ..TrainConfig::default()
        };
        let (trained, hist) = train(&model, &tr, &va, &cfg).unwrap();
        assert_eq!(hist.len(), 200);
        let after = evaluate_nll(&trained, &va).unwrap();
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn training_is_bit_deterministic() {
        let (g, y) = synthetic(40, 9);
        let tr = data(&g[..30], &y[..30], TargetScaler::fit(&y).unwrap());
        let va = data(&g[30..], &y[30..], TargetScaler::fit(&y).unwrap());
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            keep_best_on_val: true,
            ..TrainConfig::default()
        };
        let (a, ha) = train(&small_model(1), &tr, &va, &cfg).unwrap();
        let (b, hb) = train(&small_model(1), &tr, &va, &cfg).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(ha, hb);
    }

    #[test]
    fn keep_best_returns_lowest_validation_checkpoint() {
        let (g, y) = synthetic(60, 2);
        let s = TargetScaler::fit(&y).unwrap();
        let tr = data(&g[..40], &y[..40], s);
        let va = data(&g[40..], &y[40..], s);
        let cfg = TrainConfig {
            epochs: 8,
            batch_size: 8,
            learning_rate: 0.05,
            keep_best_on_val: true,
            ..TrainConfig::default()
        };
        let (m, h) = train(&small_model(4), &tr, &va, &cfg).unwrap();
        let best = h.val_nll.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((evaluate_nll(&m, &va).unwrap() - best).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let (g, y) = synthetic(4, 1);
        let refs: Vec<&MolGraph> = g.iter().collect();
        let tr = TrainData::new(refs.clone(), y.clone()).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let m = small_model(2);
        let (out, h) = train(&m, &tr, &tr, &cfg).unwrap();
        assert!(h.is_empty());
        assert_eq!(out.params(), m.params());
    }

    #[test]
    fn bad_config_is_rejected() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(TrainError::Config(_))));
    }

    #[test]
    fn history_csv_has_header_and_rows() {
        let h = TrainHistory {
            train_loss: vec![1.0, 0.5],
            val_nll: vec![1.2, 0.9],
        };
        let f = tempfile::NamedTempFile::new().unwrap();
        h.write_csv(f.path()).unwrap();
        let text = std::fs::read_to_string(f.path()).unwrap();
        assert_eq!(text, "epoch,train_loss,val_nll\n1,1,1.2\n2,0.5,0.9\n");
    }

    #[test]
    fn mc_dropout_passes() {
        let (g, _) = synthetic(10, 3);
        let refs: Vec<&MolGraph> = g.iter().collect();
        let m = small_model(5);
        let zero = mc_dropout_predict(&m, &refs, 0.0, 4, 1).unwrap();
        assert!(zero.windows(2).all(|w| w[0] == w[1]));
        let noisy = mc_dropout_predict(&m, &refs, 0.1, 10, 1).unwrap();
        assert_eq!(noisy.len(), 10);
        let distinct = (1..10).filter(|&k| noisy[k] != noisy[0]).count();
        assert!(distinct >= 8);
        assert_eq!(noisy, mc_dropout_predict(&m, &refs, 0.1, 10, 1).unwrap());
    }
}
