//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export takes plain values and returns a JSON string, so the page
//! needs no generated TypeScript types. The `*_json` functions hold the logic
//! and are what the native tests exercise.

use gnnuq_core::archspace::{Genome, SearchSpace};
use gnnuq_core::molgraph::{featurize, parse_smiles, BondOrder, EDGE_FEATURES, NODE_FEATURES};
use gnnuq_core::rng::SplitMix64;
use gnnuq_core::uq::{calibration_curve, coverage, recalibrate, EnsembleSummary};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const ELEMENTS: [(u8, &str); 10] = [
    (5, "B"),
    (6, "C"),
    (7, "N"),
    (8, "O"),
    (9, "F"),
    (15, "P"),
    (16, "S"),
    (17, "Cl"),
    (35, "Br"),
    (53, "I"),
];

fn symbol(z: u8) -> String {
    ELEMENTS
        .iter()
        .find(|(n, _)| *n == z)
        .map_or_else(|| format!("Z{z}"), |(_, s)| s.to_string())
}

fn order_name(o: BondOrder) -> &'static str {
    match o {
        BondOrder::Single => "single",
        BondOrder::Aromatic => "aromatic",
        BondOrder::Double => "double",
        BondOrder::Triple => "triple",
    }
}

/// Parses a SMILES string into atoms, bonds and padded feature sizes.
pub fn smiles_graph_json(smiles: &str) -> Result<String, String> {
    let mol = parse_smiles(smiles).map_err(|e| e.to_string())?;
    let n = mol.atom_count();
    let graph = featurize(&mol, n, 2 * mol.bonds.len()).map_err(|e| e.to_string())?;
    let atoms: Vec<Value> = mol
        .atoms
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let degree = mol.bonds.iter().filter(|b| b.i == i || b.j == i).count();
            json!({
                "index": i,
                "symbol": symbol(a.atomic_number),
                "aromatic": a.aromatic,
                "degree": degree,
                "features": graph.node_row(i),
            })
        })
        .collect();
    let bonds: Vec<Value> = mol
        .bonds
        .iter()
        .map(|b| json!({"i": b.i, "j": b.j, "order": order_name(b.order)}))
        .collect();
    Ok(json!({
        "atoms": atoms,
        "bonds": bonds,
        "directed_edges": graph.edge_count(),
        "node_features": NODE_FEATURES,
        "edge_features": EDGE_FEATURES,
    })
    .to_string())
}

fn synthetic(n: usize, sigma_scale: f64, rng: &mut SplitMix64) -> (EnsembleSummary, Vec<f64>) {
    let (mut mu, mut var, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let m = 2.0 * rng.normal();
        let s = rng.uniform(0.3, 1.5);
        mu.push(m);
        y.push(m + s * rng.normal());
        var.push((s * sigma_scale).powi(2));
    }
    let summary = EnsembleSummary {
        mu,
        aleatoric: var.clone(),
        epistemic: vec![0.0; n],
        total: var,
    };
    (summary, y)
}

/// Draws a validation and a test set whose true noise is `sigma_scale`
/// times smaller than the reported one, then recalibrates on validation.
pub fn calibration_json(n: usize, sigma_scale: f64, seed: u64) -> Result<String, String> {
    if !(2..=200_000).contains(&n) {
        return Err("sample size must be between 2 and 200000".into());
    }
    if !(sigma_scale.is_finite() && sigma_scale > 0.0) {
        return Err("sigma scale must be positive".into());
    }
    let mut rng = SplitMix64::new(seed);
    let (val, y_val) = synthetic(n, sigma_scale, &mut rng);
    let (test, y_test) = synthetic(n, sigma_scale, &mut rng);
    let e = |e: gnnuq_core::uq::UqError| e.to_string();
    let before = calibration_curve(&test.mu, &test.total, &y_test).map_err(e)?;
    let (rec, fixed) = recalibrate(&val, &test, &y_val).map_err(e)?;
    let after = calibration_curve(&fixed.mu, &fixed.total, &y_test).map_err(e)?;
    let (cov1, cov2) = coverage(&test.mu, &test.total, &y_test).map_err(e)?;
    let (rcov1, rcov2) = coverage(&fixed.mu, &fixed.total, &y_test).map_err(e)?;
    Ok(json!({
        "levels": before.levels,
        "before": {"fractions": before.fractions, "mca": before.mca, "ece": before.ece,
                   "mce": before.mce, "cov1": cov1, "cov2": cov2},
        "after": {"fractions": after.fractions, "mca": after.mca, "ece": after.ece,
                  "mce": after.mce, "cov1": rcov1, "cov2": rcov2},
        "a": rec.a,
    })
    .to_string())
}

fn describe_genome(space: &SearchSpace, genome: &Genome, parent: Option<&Genome>) -> Result<String, String> {
    let arch = space.decode(genome).map_err(|e| e.to_string())?;
    let changed: Vec<usize> = match parent {
        Some(p) => (0..genome.genes.len())
            .filter(|&i| genome.genes[i] != p.genes[i])
            .collect(),
        None => Vec::new(),
    };
    Ok(json!({
        "genes": genome.genes,
        "options": space.options(),
        "changed": changed,
        "architecture": arch,
        "cardinality": space.cardinality().to_string(),
    })
    .to_string())
}

/// Samples a genome uniformly from the default search space.
pub fn random_architecture_json(seed: u64) -> Result<String, String> {
    let space = SearchSpace::default();
    let genome = space.random_genome(&mut SplitMix64::new(seed));
    describe_genome(&space, &genome, None)
}

/// Applies one mutation to a comma-separated gene list.
pub fn mutate_architecture_json(genes: &str, seed: u64) -> Result<String, String> {
    let space = SearchSpace::default();
    let genes: Vec<u32> = genes
        .split(',')
        .map(|g| g.trim().parse().map_err(|_| format!("bad gene {g:?}")))
        .collect::<Result<_, _>>()?;
    let parent = Genome::new(genes);
    space.validate(&parent).map_err(|e| e.to_string())?;
    let child = space.mutate(&parent, &mut SplitMix64::new(seed));
    describe_genome(&space, &child, Some(&parent))
}

fn js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn smiles_graph(smiles: &str) -> Result<String, JsValue> {
    js(smiles_graph_json(smiles))
}

#[wasm_bindgen]
pub fn calibration(n: u32, sigma_scale: f64, seed: u32) -> Result<String, JsValue> {
    js(calibration_json(n as usize, sigma_scale, seed as u64))
}

#[wasm_bindgen]
pub fn random_architecture(seed: u32) -> Result<String, JsValue> {
    js(random_architecture_json(seed as u64))
}

#[wasm_bindgen]
pub fn mutate_architecture(genes: &str, seed: u32) -> Result<String, JsValue> {
    js(mutate_architecture_json(genes, seed as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn phenol_graph() {
        let v = parse(&smiles_graph_json("c1ccccc1O").unwrap());
        assert_eq!(v["atoms"].as_array().unwrap().len(), 7);
        assert_eq!(v["bonds"].as_array().unwrap().len(), 7);
        assert_eq!(v["directed_edges"], 14);
        assert_eq!(v["atoms"][6]["symbol"], "O");
        assert_eq!(v["atoms"][0]["aromatic"], true);
        assert_eq!(v["bonds"][0]["order"], "aromatic");
    }

    #[test]
    fn bad_smiles_is_an_error() {
        assert!(smiles_graph_json("C1CC").is_err());
        assert!(smiles_graph_json("").is_err());
    }

    #[test]
    fn recalibration_shrinks_inflated_sigma() {
        let v = parse(&calibration_json(5000, 3.0, 1).unwrap());
        let a = v["a"].as_f64().unwrap();
        assert!((0.30..=0.37).contains(&a), "{a}");
        assert!(v["after"]["mca"].as_f64().unwrap() < v["before"]["mca"].as_f64().unwrap());
        assert_eq!(v["levels"].as_array().unwrap().len(), 99);
        assert!(calibration_json(1, 1.0, 0).is_err());
        assert!(calibration_json(10, -1.0, 0).is_err());
    }

    #[test]
    fn mutation_changes_one_gene() {
        let v = parse(&random_architecture_json(5).unwrap());
        assert_eq!(v["cardinality"], "12259638116352");
        let genes: Vec<String> = v["genes"]
            .as_array()
            .unwrap()
            .iter()
            .map(|g| g.to_string())
            .collect();
        let child = parse(&mutate_architecture_json(&genes.join(","), 9).unwrap());
        assert_eq!(child["changed"].as_array().unwrap().len(), 1);
        assert!(mutate_architecture_json("1,2,3", 0).is_err());
        assert!(mutate_architecture_json("x", 0).is_err());
    }
}
