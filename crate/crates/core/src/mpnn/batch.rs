use std::rc::Rc;

use crate::diffcore::Tensor;
use crate::molgraph::MolGraph;

use super::ModelError;

/// Several padded graphs flattened into one disjoint-union graph holding
/// only real nodes and edges.
///
/// Nodes keep their relative order within each graph; `slot[i]` is the
/// rank of node `i` among the real nodes of its graph.
#[derive(Debug, Clone)]
pub struct PackedBatch {
    pub graphs: usize,
    /// `[N, f_n]`
    pub nodes: Tensor,
    /// `[E, f_e]`
    pub edge_feats: Rc<Tensor>,
    pub src: Rc<[usize]>,
    pub dst: Rc<[usize]>,
    pub node_graph: Rc<[usize]>,
    pub slot: Vec<usize>,
    /// Start of each graph's node range, plus the total at the end.
    pub offsets: Vec<usize>,
}

impl PackedBatch {
    pub fn pack(graphs: &[&MolGraph], f_n: usize, f_e: usize) -> Result<Self, ModelError> {
        let mut nodes = Vec::new();
        let mut edge_feats = Vec::new();
        let (mut src, mut dst, mut node_graph, mut slot) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut offsets = vec![0];
        for (g, mol) in graphs.iter().enumerate() {
            if mol.f_n != f_n || mol.f_e != f_e {
                return Err(ModelError::FeatureWidth {
                    expected: (f_n, f_e),
                    found: (mol.f_n, mol.f_e),
                });
            }
            let base = *offsets.last().unwrap();
            let mut local = vec![usize::MAX; mol.n_max];
            let mut rank = 0;
            for i in 0..mol.n_max {
                if mol.node_mask[i] == 1 {
                    local[i] = base + rank;
                    nodes.extend_from_slice(mol.node_row(i));
                    node_graph.push(g);
                    slot.push(rank);
                    rank += 1;
                }
            }
            for k in 0..mol.e_max {
                if mol.edge_mask[k] == 1 {
                    let [s, t] = mol.pairs[k];
                    let (s, t) = (local[s], local[t]);
                    if s == usize::MAX || t == usize::MAX {
                        return Err(ModelError::DanglingEdge { graph: g, edge: k });
                    }
                    src.push(s);
                    dst.push(t);
                    edge_feats.extend_from_slice(mol.edge_row(k));
                }
            }
            offsets.push(base + rank);
        }
        let n = *offsets.last().unwrap();
        let e = src.len();
        Ok(Self {
            graphs: graphs.len(),
            nodes: Tensor::new(vec![n, f_n], nodes)?,
            edge_feats: Rc::new(Tensor::new(vec![e, f_e], edge_feats)?),
            src: src.into(),
            dst: dst.into(),
            node_graph: node_graph.into(),
            slot,
            offsets,
        })
    }

    pub fn node_count(&self) -> usize {
        self.slot.len()
    }

    pub fn max_atoms(&self) -> usize {
        self.offsets
            .windows(2)
            .map(|w| w[1] - w[0])
            .max()
            .unwrap_or(0)
    }
}
