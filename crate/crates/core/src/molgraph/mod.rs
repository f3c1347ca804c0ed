//! Molecules as padded graphs: SMILES parsing, featurization, datasets.

mod dataset;
mod features;
mod smiles;

pub use dataset::{
    load_dataset, split_dataset, split_indices, Dataset, DatasetError, DatasetMeta, LoadReport,
    Record, RowDiagnostic, Split, SplitSpec, TargetScaler,
};
pub use features::{
    atom_features, bond_features, featurize, FeaturizeError, MolGraph, EDGE_FEATURES,
    NODE_FEATURES,
};
pub use smiles::{parse_smiles, Atom, Bond, BondOrder, MolSpec, SmilesError};
