//! Simple atom/bond featurization into padded fixed-shape arrays.

use thiserror::Error;

use super::smiles::{BondOrder, MolSpec};

/// Node feature width: 10 element one-hots, aromatic flag, Z/100.
pub const NODE_FEATURES: usize = 12;
/// Edge feature width: one-hot over orders {1, 2, 3} plus the aromatic flag.
pub const EDGE_FEATURES: usize = 4;

const ONE_HOT_ELEMENTS: [u8; 10] = [5, 6, 7, 8, 9, 15, 16, 17, 35, 53];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FeaturizeError {
    #[error("molecule needs {needed} {what} slots but only {capacity} are available")]
    CapacityExceeded {
        what: &'static str,
        needed: usize,
        capacity: usize,
    },
}

/// A molecule padded to `n_max` nodes and `e_max` directed edges.
///
/// Row `k` of `pairs` is `[source, target]`: the message along edge `k`
/// flows from `source` into `target`. Each undirected bond contributes both
/// directions. All matrices are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MolGraph {
    pub n_max: usize,
    pub e_max: usize,
    /// Node feature width (`NODE_FEATURES` unless precomputed features are loaded).
    pub f_n: usize,
    pub f_e: usize,
    /// `n_max x f_n`
    pub nodes: Vec<f64>,
    /// `e_max x f_e`
    pub edges: Vec<f64>,
    /// `e_max x 2`
    pub pairs: Vec<[usize; 2]>,
    pub node_mask: Vec<u8>,
    pub edge_mask: Vec<u8>,
}

impl MolGraph {
    pub fn atom_count(&self) -> usize {
        self.node_mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn node_row(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.f_n..(i + 1) * self.f_n]
    }

    pub fn edge_row(&self, k: usize) -> &[f64] {
        &self.edges[k * self.f_e..(k + 1) * self.f_e]
    }

    /// Re-pads this graph to larger capacities. Real rows keep their indices.
    pub fn repad(&self, n_max: usize, e_max: usize) -> Result<MolGraph, FeaturizeError> {
        check_capacity("node", self.atom_count(), n_max)?;
        check_capacity("edge", self.edge_count(), e_max)?;
        let (f_n, f_e) = (self.f_n, self.f_e);
        let mut g = MolGraph::empty(n_max, e_max, f_n, f_e);
        for i in 0..self.n_max.min(n_max) {
            if self.node_mask[i] == 1 {
                g.node_mask[i] = 1;
                g.nodes[i * f_n..(i + 1) * f_n].copy_from_slice(self.node_row(i));
            }
        }
        let mut k_out = 0;
        for k in 0..self.e_max {
            if self.edge_mask[k] == 1 {
                g.edge_mask[k_out] = 1;
                g.pairs[k_out] = self.pairs[k];
                g.edges[k_out * f_e..(k_out + 1) * f_e].copy_from_slice(self.edge_row(k));
                k_out += 1;
            }
        }
        Ok(g)
    }

    /// Relabels nodes: old node `i` moves to position `perm[i]`. Edges keep
    /// their rows with endpoints renamed.
    pub fn permute_nodes(&self, perm: &[usize]) -> MolGraph {
        assert_eq!(perm.len(), self.n_max, "permutation length");
        let f_n = self.f_n;
        let mut g = self.clone();
        for (i, &j) in perm.iter().enumerate() {
            g.node_mask[j] = self.node_mask[i];
            g.nodes[j * f_n..(j + 1) * f_n].copy_from_slice(self.node_row(i));
        }
        for k in 0..self.e_max {
            if self.edge_mask[k] == 1 {
                let [s, t] = self.pairs[k];
                g.pairs[k] = [perm[s], perm[t]];
            }
        }
        g
    }

    pub(crate) fn empty(n_max: usize, e_max: usize, f_n: usize, f_e: usize) -> MolGraph {
        MolGraph {
            n_max,
            e_max,
            f_n,
            f_e,
            nodes: vec![0.0; n_max * f_n],
            edges: vec![0.0; e_max * f_e],
            pairs: vec![[0, 0]; e_max],
            node_mask: vec![0; n_max],
            edge_mask: vec![0; e_max],
        }
    }
}

fn check_capacity(what: &'static str, needed: usize, capacity: usize) -> Result<(), FeaturizeError> {
    if needed > capacity {
        Err(FeaturizeError::CapacityExceeded {
            what,
            needed,
            capacity,
        })
    } else {
        Ok(())
    }
}

/// Node features for one atom.
pub fn atom_features(atomic_number: u8, aromatic: bool) -> [f64; NODE_FEATURES] {
    let mut f = [0.0; NODE_FEATURES];
    if let Some(k) = ONE_HOT_ELEMENTS.iter().position(|&z| z == atomic_number) {
        f[k] = 1.0;
    }
    f[10] = if aromatic { 1.0 } else { 0.0 };
    f[11] = atomic_number as f64 / 100.0;
    f
}

/// Edge features for one bond order. Aromatic bonds set only the flag.
pub fn bond_features(order: BondOrder) -> [f64; EDGE_FEATURES] {
    let mut f = [0.0; EDGE_FEATURES];
    match order {
        BondOrder::Single => f[0] = 1.0,
        BondOrder::Double => f[1] = 1.0,
        BondOrder::Triple => f[2] = 1.0,
        BondOrder::Aromatic => f[3] = 1.0,
    }
    f
}

/// Featurizes a molecule into a padded [`MolGraph`].
pub fn featurize(spec: &MolSpec, n_max: usize, e_max: usize) -> Result<MolGraph, FeaturizeError> {
    check_capacity("node", spec.atom_count(), n_max)?;
    check_capacity("edge", spec.directed_edge_count(), e_max)?;
    let mut g = MolGraph::empty(n_max, e_max, NODE_FEATURES, EDGE_FEATURES);
    for (i, atom) in spec.atoms.iter().enumerate() {
        g.node_mask[i] = 1;
        g.nodes[i * NODE_FEATURES..(i + 1) * NODE_FEATURES]
            .copy_from_slice(&atom_features(atom.atomic_number, atom.aromatic));
    }
    for (b, bond) in spec.bonds.iter().enumerate() {
        let feats = bond_features(bond.order);
        for (k, pair) in [(2 * b, [bond.i, bond.j]), (2 * b + 1, [bond.j, bond.i])] {
            g.edge_mask[k] = 1;
            g.pairs[k] = pair;
            g.edges[k * EDGE_FEATURES..(k + 1) * EDGE_FEATURES].copy_from_slice(&feats);
        }
    }
    Ok(g)
}
