//! Synthetic datasets: valence-respecting toy molecules, Erdos-Renyi and
//! stochastic-block-model graphs, and a graph-level regression task.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{read_graphs, Graph, NO_EDGE};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomValence {
    pub symbol: String,
    pub valence: u32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelFn {
    /// Sum of node feature channel 0 plus `0.1 * edge_count`.
    #[default]
    SumChannel0PlusEdges,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    ToyMolecule {
        size: usize,
        seed: u64,
        #[serde(default = "default_min_atoms")]
        min_nodes: usize,
        #[serde(default = "default_max_atoms")]
        max_nodes: usize,
        #[serde(default = "default_valences")]
        valences: Vec<AtomValence>,
        #[serde(default = "default_ring_prob")]
        ring_prob: f64,
        #[serde(default = "default_multi_bond_prob")]
        multi_bond_prob: f64,
    },
    Sbm {
        size: usize,
        seed: u64,
        block_sizes: Vec<usize>,
        p_in: f64,
        p_out: f64,
    },
    Er {
        size: usize,
        seed: u64,
        min_nodes: usize,
        max_nodes: usize,
        p: f64,
    },
    RegressionSynthetic {
        size: usize,
        seed: u64,
        #[serde(default = "default_reg_min")]
        min_nodes: usize,
        #[serde(default = "default_reg_max")]
        max_nodes: usize,
        #[serde(default)]
        label_fn: LabelFn,
    },
    File {
        path: String,
    },
}

fn default_min_atoms() -> usize {
    3
}
fn default_max_atoms() -> usize {
    8
}
fn default_ring_prob() -> f64 {
    0.1
}
fn default_multi_bond_prob() -> f64 {
    0.2
}
fn default_reg_min() -> usize {
    4
}
fn default_reg_max() -> usize {
    10
}

pub fn default_valences() -> Vec<AtomValence> {
    [("C", 4), ("N", 3), ("O", 2)]
        .into_iter()
        .map(|(s, v)| AtomValence {
            symbol: s.to_string(),
            valence: v,
        })
        .collect()
}

pub const MOLECULE_EDGE_VOCAB: [&str; 5] = ["none", "single", "double", "triple", "mask"];
pub const PLAIN_EDGE_VOCAB: [&str; 3] = ["none", "edge", "mask"];

impl DatasetSpec {
    /// The default synthetic regression task: 500 graphs with 4 to 10 nodes.
    pub fn regression(size: usize, seed: u64) -> Self {
        DatasetSpec::RegressionSynthetic {
            size,
            seed,
            min_nodes: default_reg_min(),
            max_nodes: default_reg_max(),
            label_fn: LabelFn::default(),
        }
    }

    pub fn toy_molecules(size: usize, seed: u64) -> Self {
        DatasetSpec::ToyMolecule {
            size,
            seed,
            min_nodes: default_min_atoms(),
            max_nodes: default_max_atoms(),
            valences: default_valences(),
            ring_prob: default_ring_prob(),
            multi_bond_prob: default_multi_bond_prob(),
        }
    }

    /// Valence table for molecule datasets, indexed by node category.
    pub fn valence_table(&self) -> Option<Vec<u32>> {
        match self {
            DatasetSpec::ToyMolecule { valences, .. } => {
                Some(valences.iter().map(|a| a.valence).collect())
            }
            _ => None,
        }
    }
}

fn check_range(min: usize, max: usize) -> Result<()> {
    if min == 0 || min > max {
        return Err(invalid(format!(
            "node range [{min}, {max}] is empty or contains 0"
        )));
    }
    Ok(())
}

fn check_prob(p: f64, name: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("{name} = {p} is not a probability")));
    }
    Ok(())
}

/// Graphs described by `spec`; file specs read from disk.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<Graph>> {
    match spec {
        DatasetSpec::ToyMolecule { .. } => generate_toy_molecules(spec),
        DatasetSpec::Sbm { .. } => generate_sbm(spec),
        DatasetSpec::Er { .. } => generate_er(spec),
        DatasetSpec::RegressionSynthetic { .. } => Ok(generate_regression_set(spec)?
            .into_iter()
            .map(|(g, _)| g)
            .collect()),
        DatasetSpec::File { path } => read_graphs(path),
    }
}

pub fn generate_toy_molecules(spec: &DatasetSpec) -> Result<Vec<Graph>> {
    let DatasetSpec::ToyMolecule {
        size,
        seed,
        min_nodes,
        max_nodes,
        valences,
        ring_prob,
        multi_bond_prob,
    } = spec
    else {
        return Err(invalid("expected a toy-molecule dataset spec"));
    };
    check_range(*min_nodes, *max_nodes)?;
    check_prob(*ring_prob, "ring_prob")?;
    check_prob(*multi_bond_prob, "multi_bond_prob")?;
    if valences.is_empty() || valences.iter().any(|a| a.valence == 0) {
        return Err(invalid(
            "valence table must be non-empty with positive valences",
        ));
    }
    if *max_nodes > 2 && valences.iter().all(|a| a.valence < 2) {
        return Err(invalid(
            "molecules with more than two atoms need an atom of valence >= 2",
        ));
    }
    let mut node_vocab: Vec<&str> = valences.iter().map(|a| a.symbol.as_str()).collect();
    node_vocab.push("*");
    let mut rng = ChaCha8Rng::seed_from_u64(*seed);
    let mut out = Vec::with_capacity(*size);
    while out.len() < *size {
        let n = rng.gen_range(*min_nodes..=*max_nodes);
        if let Some((types, edges)) =
            try_molecule(n, valences, *ring_prob, *multi_bond_prob, &mut rng)
        {
            out.push(Graph::from_categories(
                &types,
                &edges,
                &node_vocab,
                &MOLECULE_EDGE_VOCAB,
                vec![],
            )?);
        }
    }
    Ok(out)
}

fn try_molecule(
    n: usize,
    valences: &[AtomValence],
    ring_prob: f64,
    multi_bond_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Option<(Vec<usize>, Vec<(usize, usize, usize)>)> {
    let mut types = Vec::with_capacity(n);
    let mut free: Vec<u32> = Vec::with_capacity(n);
    let mut order = vec![vec![0usize; n]; n];
    for k in 0..n {
        let t = rng.gen_range(0..valences.len());
        let v = valences[t].valence;
        if k > 0 {
            let open: Vec<usize> = (0..k).filter(|&i| free[i] > 0).collect();
            let &parent = open.choose(rng)?;
            // a saturated newcomer must not close off the growing tree
            if v == 1 && k + 1 < n && open.len() == 1 && free[parent] == 1 {
                return None;
            }
            order[parent][k] = 1;
            order[k][parent] = 1;
            free[parent] -= 1;
            types.push(t);
            free.push(v - 1);
        } else {
            types.push(t);
            free.push(v);
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            if order[i][j] == 0 && free[i] > 0 && free[j] > 0 && rng.gen_bool(ring_prob) {
                order[i][j] = 1;
                order[j][i] = 1;
                free[i] -= 1;
                free[j] -= 1;
            }
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            while order[i][j] > 0
                && order[i][j] < 3
                && free[i] > 0
                && free[j] > 0
                && rng.gen_bool(multi_bond_prob)
            {
                order[i][j] += 1;
                order[j][i] += 1;
                free[i] -= 1;
                free[j] -= 1;
            }
        }
    }
    let edges = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|&(i, j)| order[i][j] > 0)
        .map(|(i, j)| (i, j, order[i][j]))
        .collect();
    Some((types, edges))
}

pub fn generate_er(spec: &DatasetSpec) -> Result<Vec<Graph>> {
    let DatasetSpec::Er {
        size,
        seed,
        min_nodes,
        max_nodes,
        p,
    } = spec
    else {
        return Err(invalid("expected an er dataset spec"));
    };
    check_range(*min_nodes, *max_nodes)?;
    check_prob(*p, "p")?;
    let mut rng = ChaCha8Rng::seed_from_u64(*seed);
    (0..*size)
        .map(|_| {
            let n = rng.gen_range(*min_nodes..=*max_nodes);
            let edges: Vec<_> = (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .collect::<Vec<_>>()
                .into_iter()
                .filter(|_| rng.gen_bool(*p))
                .map(|(i, j)| (i, j, 1))
                .collect();
            Graph::from_categories(&vec![0; n], &edges, &["v", "*"], &PLAIN_EDGE_VOCAB, vec![])
        })
        .collect()
}

pub fn generate_sbm(spec: &DatasetSpec) -> Result<Vec<Graph>> {
    let DatasetSpec::Sbm {
        size,
        seed,
        block_sizes,
        p_in,
        p_out,
    } = spec
    else {
        return Err(invalid("expected an sbm dataset spec"));
    };
    check_prob(*p_in, "p_in")?;
    check_prob(*p_out, "p_out")?;
    if block_sizes.is_empty() || block_sizes.contains(&0) {
        return Err(invalid("sbm block sizes must be positive"));
    }
    let blocks: Vec<usize> = block_sizes
        .iter()
        .enumerate()
        .flat_map(|(b, &s)| std::iter::repeat(b).take(s))
        .collect();
    let mut vocab: Vec<String> = (0..block_sizes.len()).map(|b| format!("b{b}")).collect();
    vocab.push("*".into());
    let vocab: Vec<&str> = vocab.iter().map(String::as_str).collect();
    let n = blocks.len();
    let mut rng = ChaCha8Rng::seed_from_u64(*seed);
    (0..*size)
        .map(|_| {
            let mut edges = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    let p = if blocks[i] == blocks[j] {
                        *p_in
                    } else {
                        *p_out
                    };
                    if rng.gen_bool(p) {
                        edges.push((i, j, 1));
                    }
                }
            }
            Graph::from_categories(&blocks, &edges, &vocab, &PLAIN_EDGE_VOCAB, vec![])
        })
        .collect()
}

/// Evaluates the declared label function.
pub fn regression_label(graph: &Graph, label_fn: LabelFn) -> f64 {
    match label_fn {
        LabelFn::SumChannel0PlusEdges => {
            let s: f64 = (0..graph.n).map(|i| graph.x.get(i, 0)).sum();
            s + 0.1 * graph.edge_count() as f64
        }
    }
}

/// Connected graphs with real node features `[value, sign]`, where `value`
/// is an integer in `0..=3` and `sign` is `+-1`; the label is stored in `g`.
pub fn generate_regression_set(spec: &DatasetSpec) -> Result<Vec<(Graph, f64)>> {
    let DatasetSpec::RegressionSynthetic {
        size,
        seed,
        min_nodes,
        max_nodes,
        label_fn,
    } = spec
    else {
        return Err(invalid("expected a regression-synthetic dataset spec"));
    };
    check_range(*min_nodes, *max_nodes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(*seed);
    let edge_vocab: Vec<String> = PLAIN_EDGE_VOCAB.iter().map(|s| s.to_string()).collect();
    (0..*size)
        .map(|_| {
            let n = rng.gen_range(*min_nodes..=*max_nodes);
            let mut x = Tensor::zeros(n, 2);
            for i in 0..n {
                x.set(i, 0, rng.gen_range(0..=3) as f64);
                x.set(i, 1, if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
            }
            let mut a_type = vec![NO_EDGE; n * n];
            for k in 1..n {
                let parent = rng.gen_range(0..k);
                a_type[parent * n + k] = 1;
                a_type[k * n + parent] = 1;
            }
            for i in 0..n {
                for j in i + 1..n {
                    if a_type[i * n + j] == NO_EDGE && rng.gen_bool(0.15) {
                        a_type[i * n + j] = 1;
                        a_type[j * n + i] = 1;
                    }
                }
            }
            let mut graph = Graph::new(x, a_type, None, vec![0.0], vec![], edge_vocab.clone())?;
            let y = regression_label(&graph, *label_fn);
            graph.g = vec![y];
            Ok((graph, y))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn er_with_zero_probability_is_edgeless() {
        let spec = DatasetSpec::Er {
            size: 20,
            seed: 3,
            min_nodes: 2,
            max_nodes: 6,
            p: 0.0,
        };
        for g in generate_er(&spec).unwrap() {
            assert!(g.a_type.iter().all(|&c| c == NO_EDGE));
        }
    }

    #[test]
    fn regression_label_of_weighted_path() {
        let x = Tensor::from_rows(&[vec![1.0, 1.0], vec![2.0, -1.0], vec![3.0, 1.0]]).unwrap();
        let a = vec![0, 1, 0, 1, 0, 1, 0, 1, 0];
        let g = Graph::new(
            x,
            a,
            None,
            vec![],
            vec![],
            PLAIN_EDGE_VOCAB.iter().map(|s| s.to_string()).collect(),
        )
        .unwrap();
        let y = regression_label(&g, LabelFn::SumChannel0PlusEdges);
        assert!((y - 6.2).abs() < 1e-12);
    }

    #[test]
    fn generators_are_deterministic_per_seed() {
        let spec = DatasetSpec::toy_molecules(30, 9);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let reg = DatasetSpec::regression(10, 4);
        let a = generate_regression_set(&reg).unwrap();
        for (g, y) in &a {
            assert_eq!(g.g, vec![*y]);
            assert!(g.is_connected());
        }
    }

    #[test]
    fn sbm_sizes() {
        let spec = DatasetSpec::Sbm {
            size: 3,
            seed: 1,
            block_sizes: vec![2, 3],
            p_in: 1.0,
            p_out: 0.0,
        };
        let gs = generate_sbm(&spec).unwrap();
        assert_eq!(gs[0].n, 5);
        assert_eq!(gs[0].edge_count(), 1 + 3);
    }
}
