//! Differentiable message-passing models built from genomes.
//!
//! A model is an input projection, three message-passing stages with
//! optional projected skip connections, a readout, two ReLU dense layers of
//! 32 units and a two-unit head giving a mean and a positive variance.

mod batch;
mod checkpoint;
mod forward;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archspace::{
    Architecture, Attention, Gather, Genome, GenomeError, SearchSpace, Update, STAGES, TAIL_UNITS,
};
use crate::diffcore::{DiffError, Tensor};
use crate::molgraph::{FeaturizeError, TargetScaler};
use crate::rng::SplitMix64;

pub use batch::PackedBatch;
pub use checkpoint::{read_weights, write_weights, CheckpointMeta};
pub use forward::{Dropout, ForwardOutput, Prediction, PREDICT_CHUNK};

/// Floor added to the softplus variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Genome(#[from] GenomeError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Capacity(#[from] FeaturizeError),
    #[error("graph feature widths {found:?} do not match the model's {expected:?}")]
    FeatureWidth {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("edge {edge} of graph {graph} touches a padded node")]
    DanglingEdge { graph: usize, edge: usize },
    #[error("checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {reason}")]
    BadCheckpoint { path: String, reason: String },
}

/// Shapes a model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_max: usize,
    pub f_n: usize,
    pub f_e: usize,
    pub hidden: [usize; STAGES],
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Dense {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum AttnParams {
    Constant,
    Gat { l: usize, r: usize },
    SymGat { l: usize, r: usize },
    Cos { l: usize, r: usize },
    Linear { r: usize },
    GenLinear { wl: usize, wr: usize, g: usize },
}

#[derive(Debug, Clone)]
pub(crate) struct HeadParams {
    pub edge: usize,
    pub attn: AttnParams,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum UpdateParams {
    Gru {
        w: usize,
        u_zr: usize,
        u_h: usize,
        b: usize,
    },
    Mlp(Dense),
}

#[derive(Debug, Clone)]
pub(crate) struct StageParams {
    pub proj: Option<Dense>,
    pub heads: Vec<HeadParams>,
    pub update: UpdateParams,
    pub skip: Option<(usize, Dense)>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum GatherParams {
    Plain,
    AttnPool { gate: Dense, value: Dense },
    AttnSum { a: usize },
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub input: Dense,
    pub stages: Vec<StageParams>,
    pub gather: GatherParams,
    pub tail: [Dense; 2],
    pub out: Dense,
}

struct Builder {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: SplitMix64,
}

impl Builder {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn glorot(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| self.rng.uniform(-limit, limit))
            .collect();
        let t = Tensor::new(vec![rows, cols], data).expect("consistent shape");
        self.push(name, t)
    }

    fn zeros(&mut self, name: String, len: usize) -> usize {
        self.push(name, Tensor::zeros(&[len]))
    }

    fn dense(&mut self, prefix: &str, rows: usize, cols: usize) -> Dense {
        Dense {
            w: self.glorot(format!("{prefix}.w"), rows, cols),
            b: self.zeros(format!("{prefix}.b"), cols),
        }
    }
}

/// A genome resolved into concrete weights.
#[derive(Debug, Clone)]
pub struct Model {
    genome: Genome,
    arch: Architecture,
    dims: ModelDims,
    init_seed: u64,
    names: Vec<String>,
    params: Vec<Tensor>,
    pub(crate) layout: Layout,
}

impl Model {
    /// Builds a model with Glorot-uniform weights drawn from
    /// `SplitMix64::new(init_seed)` in parameter order and zero biases.
    pub fn instantiate(
        space: &SearchSpace,
        genome: &Genome,
        n_max: usize,
        f_n: usize,
        f_e: usize,
        init_seed: u64,
    ) -> Result<Model, ModelError> {
        let arch = space.decode(genome)?;
        let hidden = std::array::from_fn(|s| arch.stages[s].hidden);
        let dims = ModelDims {
            n_max,
            f_n,
            f_e,
            hidden,
        };
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            rng: SplitMix64::new(init_seed),
        };
        let input = b.dense("input", f_n, hidden[0]);
        let mut widths = vec![hidden[0]];
        let mut stages = Vec::with_capacity(STAGES);
        for (s, spec) in arch.stages.iter().enumerate() {
            let p = format!("stage{}", s + 1);
            let d_prev = widths[s];
            let d = spec.hidden;
            let proj = (d_prev != d).then(|| b.dense(&format!("{p}.proj"), d_prev, d));
            let heads = (0..spec.heads)
                .map(|k| {
                    let hp = format!("{p}.head{k}");
                    let edge = b.glorot(format!("{hp}.edge"), d, (f_e + 1) * d);
                    let attn = match spec.attention {
                        Attention::Constant => AttnParams::Constant,
                        Attention::Gat => AttnParams::Gat {
                            l: b.glorot(format!("{hp}.att_l"), d, 1),
                            r: b.glorot(format!("{hp}.att_r"), d, 1),
                        },
                        Attention::SymGat => AttnParams::SymGat {
                            l: b.glorot(format!("{hp}.att_l"), d, 1),
                            r: b.glorot(format!("{hp}.att_r"), d, 1),
                        },
                        Attention::Cos => AttnParams::Cos {
                            l: b.glorot(format!("{hp}.att_l"), d, 1),
                            r: b.glorot(format!("{hp}.att_r"), d, 1),
                        },
                        Attention::Linear => AttnParams::Linear {
                            r: b.glorot(format!("{hp}.att_r"), d, 1),
                        },
                        Attention::GenLinear => AttnParams::GenLinear {
                            wl: b.glorot(format!("{hp}.att_wl"), d, d),
                            wr: b.glorot(format!("{hp}.att_wr"), d, d),
                            g: b.glorot(format!("{hp}.att_g"), d, 1),
                        },
                    };
                    HeadParams { edge, attn }
                })
                .collect();
            let update = match spec.update {
                Update::Gru => UpdateParams::Gru {
                    w: b.glorot(format!("{p}.gru.w"), d, 3 * d),
                    u_zr: b.glorot(format!("{p}.gru.u_zr"), d, 2 * d),
                    u_h: b.glorot(format!("{p}.gru.u_h"), d, d),
                    b: b.zeros(format!("{p}.gru.b"), 3 * d),
                },
                Update::Mlp => UpdateParams::Mlp(b.dense(&format!("{p}.mlp"), 2 * d, d)),
            };
            let skip = arch
                .skip_source(s)
                .map(|src| (src, b.dense(&format!("{p}.skip"), widths[src], d)));
            stages.push(StageParams {
                proj,
                heads,
                update,
                skip,
            });
            widths.push(d);
        }
        let width = hidden[STAGES - 1];
        let gather = match arch.gather {
            Gather::AttnPool16 | Gather::AttnPool32 | Gather::AttnPool64 => {
                let f = arch.gather.output_len(n_max, width);
                GatherParams::AttnPool {
                    gate: b.dense("gather.gate", width, f),
                    value: b.dense("gather.value", width, f),
                }
            }
            Gather::AttnSumPool => GatherParams::AttnSum {
                a: b.glorot("gather.a".into(), width, 1),
            },
            _ => GatherParams::Plain,
        };
        let tail_in = arch.gather.output_len(n_max, width);
        let tail = [
            b.dense("tail1", tail_in, TAIL_UNITS),
            b.dense("tail2", TAIL_UNITS, TAIL_UNITS),
        ];
        let out = b.dense("out", TAIL_UNITS, 2);
        Ok(Model {
            genome: genome.clone(),
            arch,
            dims,
            init_seed,
            names: b.names,
            params: b.tensors,
            layout: Layout {
                input,
                stages,
                gather,
                tail,
                out,
            },
        })
    }

    pub fn genome(&self) -> &Genome {
        &self.genome
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Length of the vector entering the first tail layer.
    pub fn tail_input_len(&self) -> usize {
        self.arch
            .gather
            .output_len(self.dims.n_max, self.dims.hidden[STAGES - 1])
    }

    /// Writes the weights to `path` and a JSON sidecar next to it.
    pub fn save(&self, path: &std::path::Path, scaler: TargetScaler) -> Result<(), ModelError> {
        checkpoint::save(self, path, scaler)
    }

    /// Rebuilds a model from a weight file and its sidecar.
    pub fn load(path: &std::path::Path) -> Result<(Model, TargetScaler), ModelError> {
        checkpoint::load(path)
    }
}
