//! The architecture search space and its genome encoding.
//!
//! Three message-passing stages each expose six genes (hidden size,
//! attention, heads, aggregate, activation, update). Three skip genes pick
//! whether a stage output receives a projected residual from one or two
//! stages back. One gather gene selects the readout. A fixed tail of two
//! 32-unit dense layers feeds the mean/variance output.

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{Activation, Reduce};
use crate::rng::SplitMix64;

pub const SPACE_VERSION: u32 = 1;
pub const STAGES: usize = 3;
pub const GENES_PER_STAGE: usize = 6;
pub const TAIL_UNITS: usize = 32;

pub const HIDDEN_DIMS: [usize; 4] = [8, 16, 32, 64];
pub const HEAD_COUNTS: [usize; 3] = [1, 2, 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Attention {
    Constant,
    Gat,
    SymGat,
    Cos,
    Linear,
    GenLinear,
}

impl Attention {
    pub const ALL: [Attention; 6] = [
        Attention::Constant,
        Attention::Gat,
        Attention::SymGat,
        Attention::Cos,
        Attention::Linear,
        Attention::GenLinear,
    ];
}

pub const AGGREGATES: [Reduce; 3] = [Reduce::Mean, Reduce::Sum, Reduce::Max];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Update {
    Gru,
    Mlp,
}

impl Update {
    pub const ALL: [Update; 2] = [Update::Gru, Update::Mlp];
}

/// Where a stage's residual comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Skip {
    None,
    OneBack,
    TwoBack,
}

impl Skip {
    pub const ALL: [Skip; 3] = [Skip::None, Skip::OneBack, Skip::TwoBack];
}

/// Graph readouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Gather {
    PoolSum,
    PoolMean,
    PoolMax,
    GatherSum,
    GatherMean,
    GatherMax,
    AttnPool16,
    AttnPool32,
    AttnPool64,
    AttnSumPool,
    Flatten,
}

impl Gather {
    pub const ALL: [Gather; 11] = [
        Gather::PoolSum,
        Gather::PoolMean,
        Gather::PoolMax,
        Gather::GatherSum,
        Gather::GatherMean,
        Gather::GatherMax,
        Gather::AttnPool16,
        Gather::AttnPool32,
        Gather::AttnPool64,
        Gather::AttnSumPool,
        Gather::Flatten,
    ];

    /// Length of the graph vector produced from `n_max x width` node states.
    pub fn output_len(self, n_max: usize, width: usize) -> usize {
        match self {
            Gather::PoolSum | Gather::PoolMean | Gather::PoolMax => n_max,
            Gather::GatherSum | Gather::GatherMean | Gather::GatherMax | Gather::AttnSumPool => {
                width
            }
            Gather::AttnPool16 => 16,
            Gather::AttnPool32 => 32,
            Gather::AttnPool64 => 64,
            Gather::Flatten => n_max * width,
        }
    }
}

/// Option counts of every gene, in genome order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchSpace {
    options: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        let mut options = Vec::with_capacity(22);
        for _ in 0..STAGES {
            options.extend([
                HIDDEN_DIMS.len(),
                Attention::ALL.len(),
                HEAD_COUNTS.len(),
                AGGREGATES.len(),
                Activation::ALL.len(),
                Update::ALL.len(),
            ]);
        }
        options.extend([Skip::ALL.len(); STAGES]);
        options.push(Gather::ALL.len());
        Self { options }
    }
}

impl SearchSpace {
    /// An arbitrary space given per-gene option counts (each at least 1).
    pub fn from_options(options: Vec<usize>) -> Self {
        assert!(options.iter().all(|&k| k >= 1), "every gene needs an option");
        Self { options }
    }

    pub fn options(&self) -> &[usize] {
        &self.options
    }

    pub fn genome_len(&self) -> usize {
        self.options.len()
    }

    /// Exact number of distinct genomes.
    pub fn cardinality(&self) -> BigUint {
        self.options
            .iter()
            .fold(BigUint::from(1u32), |acc, &k| acc * BigUint::from(k))
    }

    pub fn validate(&self, genome: &Genome) -> Result<(), GenomeError> {
        if genome.space_version != SPACE_VERSION {
            return Err(GenomeError::VersionMismatch {
                expected: SPACE_VERSION,
                found: genome.space_version,
            });
        }
        if genome.genes.len() != self.options.len() {
            return Err(GenomeError::WrongLength {
                expected: self.options.len(),
                found: genome.genes.len(),
            });
        }
        for (index, (&g, &k)) in genome.genes.iter().zip(&self.options).enumerate() {
            if g as usize >= k {
                return Err(GenomeError::GeneOutOfRange {
                    index,
                    value: g,
                    options: k,
                });
            }
        }
        Ok(())
    }

    /// Every gene drawn uniformly.
    pub fn random_genome(&self, rng: &mut SplitMix64) -> Genome {
        Genome {
            space_version: SPACE_VERSION,
            genes: self.options.iter().map(|&k| rng.below(k) as u32).collect(),
        }
    }

    /// Picks one gene uniformly and resamples it uniformly among its other
    /// options. Genes with a single option are never picked; if no gene has
    /// more than one option the parent is returned unchanged.
    pub fn mutate(&self, parent: &Genome, rng: &mut SplitMix64) -> Genome {
        let mutable: Vec<usize> = (0..self.options.len())
            .filter(|&i| self.options[i] > 1)
            .collect();
        let mut child = parent.clone();
        if mutable.is_empty() {
            return child;
        }
        let gene = mutable[rng.below(mutable.len())];
        let k = self.options[gene];
        let current = parent.genes[gene] as usize;
        let mut pick = rng.below(k - 1);
        if pick >= current {
            pick += 1;
        }
        child.genes[gene] = pick as u32;
        child
    }

    pub fn decode(&self, genome: &Genome) -> Result<Architecture, GenomeError> {
        self.validate(genome)?;
        if self.options != SearchSpace::default().options {
            return Err(GenomeError::Malformed(
                "only the default space decodes into an architecture".into(),
            ));
        }
        let g = &genome.genes;
        let stages = std::array::from_fn(|s| {
            let o = s * GENES_PER_STAGE;
            StageSpec {
                hidden: HIDDEN_DIMS[g[o] as usize],
                attention: Attention::ALL[g[o + 1] as usize],
                heads: HEAD_COUNTS[g[o + 2] as usize],
                aggregate: AGGREGATES[g[o + 3] as usize],
                activation: Activation::ALL[g[o + 4] as usize],
                update: Update::ALL[g[o + 5] as usize],
            }
        });
        let base = STAGES * GENES_PER_STAGE;
        let skips = std::array::from_fn(|s| Skip::ALL[g[base + s] as usize]);
        Ok(Architecture {
            stages,
            skips,
            gather: Gather::ALL[g[base + STAGES] as usize],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GenomeError {
    #[error("malformed genome JSON: {0}")]
    Malformed(String),
    #[error("genome space_version {found} does not match {expected}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("genome has {found} genes, expected {expected}")]
    WrongLength { expected: usize, found: usize },
    #[error("gene {index} = {value} is out of range for {options} options")]
    GeneOutOfRange {
        index: usize,
        value: u32,
        options: usize,
    },
}

/// One option index per gene.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Genome {
    pub space_version: u32,
    pub genes: Vec<u32>,
}

impl Genome {
    pub fn new(genes: Vec<u32>) -> Self {
        Self {
            space_version: SPACE_VERSION,
            genes,
        }
    }

    pub fn hamming(&self, other: &Genome) -> usize {
        self.genes
            .iter()
            .zip(&other.genes)
            .filter(|(a, b)| a != b)
            .count()
            + self.genes.len().abs_diff(other.genes.len())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("genome serializes")
    }

    /// Parses and validates a genome against `space`.
    pub fn from_json(text: &str, space: &SearchSpace) -> Result<Genome, GenomeError> {
        let g: Genome =
            serde_json::from_str(text).map_err(|e| GenomeError::Malformed(e.to_string()))?;
        space.validate(&g)?;
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StageSpec {
    pub hidden: usize,
    pub attention: Attention,
    pub heads: usize,
    #[serde(with = "reduce_name")]
    pub aggregate: Reduce,
    #[serde(with = "activation_name")]
    pub activation: Activation,
    pub update: Update,
}

/// A decoded genome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub stages: [StageSpec; STAGES],
    pub skips: [Skip; STAGES],
    pub gather: Gather,
}

impl Architecture {
    /// Skip source for stage `s` (0-based) as an index into the list
    /// `[projected input, stage 1 output, stage 2 output, ...]`, or `None`
    /// when the gene is off or the source does not exist.
    pub fn skip_source(&self, s: usize) -> Option<usize> {
        let back = match self.skips[s] {
            Skip::None => return None,
            Skip::OneBack => 1,
            Skip::TwoBack => 2,
        };
        // Stage s reads outputs[s]; "one back" is that same input.
        (s + 1).checked_sub(back)
    }
}

mod reduce_name {
    use super::Reduce;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &Reduce, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(match r {
            Reduce::Sum => "sum",
            Reduce::Mean => "mean",
            Reduce::Max => "max",
        })
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Reduce, D::Error> {
        match String::deserialize(d)?.as_str() {
            "sum" => Ok(Reduce::Sum),
            "mean" => Ok(Reduce::Mean),
            "max" => Ok(Reduce::Max),
            other => Err(serde::de::Error::custom(format!("unknown aggregate {other}"))),
        }
    }
}

mod activation_name {
    use super::Activation;
    use serde::{Deserialize, Deserializer, Serializer};

    const NAMES: [&str; 8] = [
        "sigmoid", "tanh", "relu", "linear", "softplus", "leakyrelu", "relu6", "elu",
    ];

    pub fn serialize<S: Serializer>(a: &Activation, s: S) -> Result<S::Ok, S::Error> {
        let i = Activation::ALL.iter().position(|x| x == a).expect("known activation");
        s.serialize_str(NAMES[i])
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Activation, D::Error> {
        let name = String::deserialize(d)?;
        NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| Activation::ALL[i])
            .ok_or_else(|| serde::de::Error::custom(format!("unknown activation {name}")))
    }
}
