use std::rc::Rc;

use crate::archspace::Gather;
use crate::diffcore::{gru_cell, Activation, GruVars, Reduce, Tape, Tensor, Var};
use crate::molgraph::{FeaturizeError, MolGraph};
use crate::rng::SplitMix64;

use super::{AttnParams, Dense, GatherParams, Model, ModelError, PackedBatch, UpdateParams, VARIANCE_FLOOR};

/// Graphs per forward pass during inference.
pub const PREDICT_CHUNK: usize = 64;

/// Inverted dropout applied before every message stage and tail layer.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut SplitMix64,
}

/// Mean and variance in the model's (standardized) target space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mu: f64,
    pub var: f64,
}

/// Handles produced by one forward pass.
pub struct ForwardOutput {
    pub mu: Var,
    pub var: Var,
    pub node_states: Vec<Var>,
}

fn dense(tape: &mut Tape, p: &[Var], d: Dense, x: Var) -> Result<Var, ModelError> {
    let y = tape.matmul(x, p[d.w])?;
    Ok(tape.add_row(y, p[d.b])?)
}

fn drop(tape: &mut Tape, x: Var, dropout: &mut Option<&mut Dropout>) -> Var {
    let Some(dr) = dropout.as_deref_mut() else {
        return x;
    };
    if dr.rate <= 0.0 {
        return x;
    }
    let keep = 1.0 / (1.0 - dr.rate);
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).len();
    let mask = (0..n)
        .map(|_| if dr.rng.next_f64() < dr.rate { 0.0 } else { keep })
        .collect();
    let m = tape.constant(Tensor::new(shape, mask).expect("same shape"));
    tape.mul(x, m).expect("same shape")
}

pub(crate) fn scores(
    tape: &mut Tape,
    p: &[Var],
    attn: AttnParams,
    h: Var,
    b: &PackedBatch,
) -> Result<Option<Var>, ModelError> {
    let leaky = Activation::LeakyRelu;
    let s = match attn {
        AttnParams::Constant => return Ok(None),
        AttnParams::Gat { l, r } => {
            let hl = tape.matmul(h, p[l])?;
            let hr = tape.matmul(h, p[r])?;
            let sv = tape.gather_rows(hl, b.dst.clone())?;
            let sw = tape.gather_rows(hr, b.src.clone())?;
            let s = tape.add(sv, sw)?;
            tape.activation(s, leaky)?
        }
        AttnParams::SymGat { l, r } => {
            let hl = tape.matmul(h, p[l])?;
            let hr = tape.matmul(h, p[r])?;
            let a = tape.gather_rows(hl, b.dst.clone())?;
            let c = tape.gather_rows(hr, b.src.clone())?;
            let fwd = tape.add(a, c)?;
            let fwd = tape.activation(fwd, leaky)?;
            let a = tape.gather_rows(hl, b.src.clone())?;
            let c = tape.gather_rows(hr, b.dst.clone())?;
            let rev = tape.add(a, c)?;
            let rev = tape.activation(rev, leaky)?;
            tape.add(fwd, rev)?
        }
        AttnParams::Cos { l, r } => {
            let hv = tape.gather_rows(h, b.dst.clone())?;
            let hw = tape.gather_rows(h, b.src.clone())?;
            let hv = tape.mul_row(hv, p[l])?;
            let hw = tape.mul_row(hw, p[r])?;
            tape.row_dot(hv, hw)?
        }
        AttnParams::Linear { r } => {
            let hr = tape.matmul(h, p[r])?;
            let sw = tape.gather_rows(hr, b.src.clone())?;
            tape.activation(sw, Activation::Tanh)?
        }
        AttnParams::GenLinear { wl, wr, g } => {
            let hl = tape.matmul(h, p[wl])?;
            let hr = tape.matmul(h, p[wr])?;
            let a = tape.gather_rows(hl, b.dst.clone())?;
            let c = tape.gather_rows(hr, b.src.clone())?;
            let t = tape.add(a, c)?;
            let t = tape.activation(t, Activation::Tanh)?;
            tape.matmul(t, p[g])?
        }
    };
    let n = b.node_count();
    Ok(Some(tape.segment_softmax(s, b.dst.clone(), n, None)?))
}

/// Per-graph ranks of node scalars, ascending, ties by position.
fn sorted_slots(values: &[f64], b: &PackedBatch, n_max: usize) -> Rc<[usize]> {
    let mut ids = vec![0; values.len()];
    for g in 0..b.graphs {
        let (lo, hi) = (b.offsets[g], b.offsets[g + 1]);
        let mut order: Vec<usize> = (lo..hi).collect();
        order.sort_by(|&i, &j| values[i].total_cmp(&values[j]).then(i.cmp(&j)));
        for (rank, i) in order.into_iter().enumerate() {
            ids[i] = g * n_max + rank;
        }
    }
    ids.into()
}

impl Model {
    /// Registers the weights on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    /// Records a forward pass over `b` with weights `p` from [`Model::bind`].
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        b: &PackedBatch,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<ForwardOutput, ModelError> {
        let n_max = self.dims.n_max;
        if b.max_atoms() > n_max {
            return Err(FeaturizeError::CapacityExceeded {
                what: "node",
                needed: b.max_atoms(),
                capacity: n_max,
            }
            .into());
        }
        let n = b.node_count();
        let l = &self.layout;
        let x = tape.constant(b.nodes.clone());
        let mut outs = vec![dense(tape, p, l.input, x)?];
        for (s, (sp, spec)) in l.stages.iter().zip(&self.arch.stages).enumerate() {
            let h_in = drop(tape, outs[s], &mut dropout);
            let h = match sp.proj {
                Some(d) => dense(tape, p, d, h_in)?,
                None => h_in,
            };
            let mut agg: Option<Var> = None;
            for head in &sp.heads {
                let y = tape.matmul(h, p[head.edge])?;
                let y = tape.gather_rows(y, b.src.clone())?;
                let mut m = tape.edge_mix(y, b.edge_feats.clone())?;
                if let Some(alpha) = scores(tape, p, head.attn, h, b)? {
                    m = tape.mul_col(m, alpha)?;
                }
                let a = tape.segment_reduce(m, b.dst.clone(), n, spec.aggregate, None)?;
                agg = Some(match agg {
                    Some(acc) => tape.add(acc, a)?,
                    None => a,
                });
            }
            let mut agg = agg.expect("at least one head");
            if sp.heads.len() > 1 {
                agg = tape.affine(agg, 1.0 / sp.heads.len() as f64, 0.0)?;
            }
            let u = match sp.update {
                UpdateParams::Gru { w, u_zr, u_h, b: bias } => {
                    let vars = GruVars {
                        w: p[w],
                        u_zr: p[u_zr],
                        u_h: p[u_h],
                        b: p[bias],
                    };
                    gru_cell(tape, h, agg, &vars)?
                }
                UpdateParams::Mlp(d) => {
                    let c = tape.concat(&[h, agg])?;
                    dense(tape, p, d, c)?
                }
            };
            let mut u = tape.activation(u, spec.activation)?;
            if let Some((src, d)) = sp.skip {
                let r = dense(tape, p, d, outs[src])?;
                u = tape.add(u, r)?;
            }
            outs.push(u);
        }
        let h = *outs.last().unwrap();
        let g = self.readout(tape, p, h, b)?;
        let mut z = g;
        for d in l.tail {
            let zi = drop(tape, z, &mut dropout);
            let zi = dense(tape, p, d, zi)?;
            z = tape.activation(zi, Activation::Relu)?;
        }
        let z = drop(tape, z, &mut dropout);
        let o = dense(tape, p, l.out, z)?;
        let mu = tape.slice_cols(o, 0, 1)?;
        let raw = tape.slice_cols(o, 1, 2)?;
        let sp = tape.activation(raw, Activation::Softplus)?;
        let var = tape.affine(sp, 1.0, VARIANCE_FLOOR)?;
        Ok(ForwardOutput {
            mu,
            var,
            node_states: outs,
        })
    }

    /// Collapses node states `h` of a packed batch into one row per graph.
    pub fn readout(
        &self,
        tape: &mut Tape,
        p: &[Var],
        h: Var,
        b: &PackedBatch,
    ) -> Result<Var, ModelError> {
        let n_max = self.dims.n_max;
        let l = &self.layout;
        let graphs = b.graphs;
        Ok(match self.arch.gather {
            Gather::PoolSum | Gather::PoolMean | Gather::PoolMax => {
                let kind = match self.arch.gather {
                    Gather::PoolSum => Reduce::Sum,
                    Gather::PoolMean => Reduce::Mean,
                    _ => Reduce::Max,
                };
                let v = tape.row_reduce(h, kind)?;
                let ids = sorted_slots(tape.value(v).data(), b, n_max);
                let s = tape.segment_reduce(v, ids, graphs * n_max, Reduce::Sum, None)?;
                tape.reshape(s, &[graphs, n_max])?
            }
            Gather::GatherSum | Gather::GatherMean | Gather::GatherMax => {
                let kind = match self.arch.gather {
                    Gather::GatherSum => Reduce::Sum,
                    Gather::GatherMean => Reduce::Mean,
                    _ => Reduce::Max,
                };
                tape.segment_reduce(h, b.node_graph.clone(), graphs, kind, None)?
            }
            Gather::AttnPool16 | Gather::AttnPool32 | Gather::AttnPool64 => {
                let GatherParams::AttnPool { gate, value } = l.gather else {
                    unreachable!("attention pool parameters")
                };
                let gt = dense(tape, p, gate, h)?;
                let gt = tape.activation(gt, Activation::Sigmoid)?;
                let v = dense(tape, p, value, h)?;
                let z = tape.mul(gt, v)?;
                tape.segment_reduce(z, b.node_graph.clone(), graphs, Reduce::Sum, None)?
            }
            Gather::AttnSumPool => {
                let GatherParams::AttnSum { a } = l.gather else {
                    unreachable!("attention sum parameters")
                };
                let s = tape.matmul(h, p[a])?;
                let alpha = tape.segment_softmax(s, b.node_graph.clone(), graphs, None)?;
                let z = tape.mul_col(h, alpha)?;
                tape.segment_reduce(z, b.node_graph.clone(), graphs, Reduce::Sum, None)?
            }
            Gather::Flatten => {
                let width = tape.value(h).cols();
                let ids: Rc<[usize]> = b
                    .node_graph
                    .iter()
                    .zip(&b.slot)
                    .map(|(&g, &s)| g * n_max + s)
                    .collect();
                let s = tape.segment_reduce(h, ids, graphs * n_max, Reduce::Sum, None)?;
                tape.reshape(s, &[graphs, n_max * width])?
            }
        })
    }

    /// Deterministic predictions.
    pub fn predict(&self, graphs: &[&MolGraph]) -> Result<Vec<Prediction>, ModelError> {
        self.predict_inner(graphs, None)
    }

    /// One stochastic pass with inverted dropout masks drawn from `rng`.
    pub fn predict_with_dropout(
        &self,
        graphs: &[&MolGraph],
        rate: f64,
        rng: &mut SplitMix64,
    ) -> Result<Vec<Prediction>, ModelError> {
        let mut d = Dropout { rate, rng };
        self.predict_inner(graphs, Some(&mut d))
    }

    fn predict_inner(
        &self,
        graphs: &[&MolGraph],
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Vec<Prediction>, ModelError> {
        let mut out = Vec::with_capacity(graphs.len());
        for chunk in graphs.chunks(PREDICT_CHUNK) {
            let batch = PackedBatch::pack(chunk, self.dims.f_n, self.dims.f_e)?;
            let mut tape = Tape::new();
            let p = self.bind(&mut tape, false);
            let o = self.forward(&mut tape, &p, &batch, dropout.as_deref_mut())?;
            let (mu, var) = (tape.value(o.mu).data(), tape.value(o.var).data());
            out.extend(mu.iter().zip(var).map(|(&mu, &var)| Prediction { mu, var }));
        }
        Ok(out)
    }

    /// Final node states of each graph, one `[atoms, width]` tensor per graph.
    pub fn node_states(&self, graphs: &[&MolGraph]) -> Result<Vec<Tensor>, ModelError> {
        let batch = PackedBatch::pack(graphs, self.dims.f_n, self.dims.f_e)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let o = self.forward(&mut tape, &p, &batch, None)?;
        let h = tape.value(*o.node_states.last().unwrap());
        let w = h.cols();
        Ok(batch
            .offsets
            .windows(2)
            .map(|r| {
                let data = h.data()[r[0] * w..r[1] * w].to_vec();
                Tensor::new(vec![r[1] - r[0], w], data).expect("slice shape")
            })
            .collect())
    }
}
