//! Graphs with augmented edges.
//!
//! Every ordered node pair carries an edge category; category `0` is the
//! reserved "no edge" type and the last category of each vocabulary is the
//! reserved MASK token. Graphs are undirected: `a_type[i][j] == a_type[j][i]`.

mod generators;
mod io;

pub use generators::{
    generate, generate_er, generate_regression_set, generate_sbm, generate_toy_molecules,
    regression_label, AtomValence, DatasetSpec, LabelFn, MOLECULE_EDGE_VOCAB, PLAIN_EDGE_VOCAB,
};
pub use io::{parse_graphs, read_graphs, write_graphs, write_graphs_to};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Reserved edge category meaning "no edge is observed between i and j".
pub const NO_EDGE: usize = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub n: usize,
    /// Node features `[n, d_v]`; one-hot rows when `node_vocab` is non-empty.
    pub x: Tensor,
    /// Edge categories, row-major `n * n`.
    pub a_type: Vec<usize>,
    /// Optional real edge features `[n * n, d_f]`.
    pub a_feat: Option<Tensor>,
    /// Graph attribute; empty means "derive by readout".
    pub g: Vec<f64>,
    pub node_vocab: Vec<String>,
    pub edge_vocab: Vec<String>,
}

impl Graph {
    pub fn new(
        x: Tensor,
        a_type: Vec<usize>,
        a_feat: Option<Tensor>,
        g: Vec<f64>,
        node_vocab: Vec<String>,
        edge_vocab: Vec<String>,
    ) -> Result<Self> {
        let graph = Self {
            n: x.rows,
            x,
            a_type,
            a_feat,
            g,
            node_vocab,
            edge_vocab,
        };
        graph.validate()?;
        Ok(graph)
    }

    /// Builds a categorical graph from node categories and an undirected
    /// list of `(i, j, edge_category)`.
    pub fn from_categories(
        node_types: &[usize],
        edges: &[(usize, usize, usize)],
        node_vocab: &[&str],
        edge_vocab: &[&str],
        g: Vec<f64>,
    ) -> Result<Self> {
        let n = node_types.len();
        let mut x = Tensor::zeros(n, node_vocab.len());
        for (i, &t) in node_types.iter().enumerate() {
            if t >= node_vocab.len() {
                return Err(invalid(format!("node category {t} outside vocabulary")));
            }
            x.set(i, t, 1.0);
        }
        let mut a_type = vec![NO_EDGE; n * n];
        for &(i, j, c) in edges {
            if i >= n || j >= n {
                return Err(invalid(format!(
                    "edge ({i}, {j}) out of bounds for n = {n}"
                )));
            }
            a_type[i * n + j] = c;
            a_type[j * n + i] = c;
        }
        Graph::new(
            x,
            a_type,
            None,
            g,
            node_vocab.iter().map(|s| s.to_string()).collect(),
            edge_vocab.iter().map(|s| s.to_string()).collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        if n == 0 {
            return Err(invalid("graph must have at least one node"));
        }
        if self.x.rows != n {
            return Err(invalid("node feature rows do not match n"));
        }
        if self.a_type.len() != n * n {
            return Err(invalid(format!("a_type must have n*n = {} entries", n * n)));
        }
        if self.edge_vocab.len() < 2 {
            return Err(invalid(
                "edge vocabulary needs at least the no-edge and MASK entries",
            ));
        }
        if let Some(&bad) = self.a_type.iter().find(|&&c| c >= self.edge_vocab.len()) {
            return Err(invalid(format!("unknown edge category {bad}")));
        }
        if let Some(f) = &self.a_feat {
            if f.rows != n * n {
                return Err(invalid("a_feat must have n*n rows"));
            }
            if !f.is_finite() {
                return Err(invalid("a_feat contains non-finite values"));
            }
        }
        if !self.x.is_finite() || self.g.iter().any(|v| !v.is_finite()) {
            return Err(invalid("graph contains non-finite values"));
        }
        if !self.node_vocab.is_empty() {
            if self.node_vocab.len() < 2 {
                return Err(invalid("node vocabulary needs at least one type plus MASK"));
            }
            if self.x.cols != self.node_vocab.len() {
                return Err(invalid(
                    "categorical node features must be one-hot over node_vocab",
                ));
            }
            for i in 0..n {
                let row = self.x.row(i);
                let ones = row.iter().filter(|&&v| v == 1.0).count();
                let zeros = row.iter().filter(|&&v| v == 0.0).count();
                if ones != 1 || zeros != row.len() - 1 {
                    return Err(invalid(format!("node {i} is not a one-hot category")));
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                if self.a_type[i * n + j] != self.a_type[j * n + i] {
                    return Err(invalid(format!("a_type is not symmetric at ({i}, {j})")));
                }
                if let Some(f) = &self.a_feat {
                    if f.row(i * n + j) != f.row(j * n + i) {
                        return Err(invalid(format!("a_feat is not symmetric at ({i}, {j})")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn d_v(&self) -> usize {
        self.x.cols
    }

    pub fn is_categorical(&self) -> bool {
        !self.node_vocab.is_empty()
    }

    pub fn node_mask_id(&self) -> Option<usize> {
        self.node_vocab
            .len()
            .checked_sub(1)
            .filter(|_| self.is_categorical())
    }

    pub fn edge_mask_id(&self) -> usize {
        self.edge_vocab.len() - 1
    }

    pub fn edge(&self, i: usize, j: usize) -> usize {
        self.a_type[i * self.n + j]
    }

    /// Category index of node `i` for categorical graphs.
    pub fn node_category(&self, i: usize) -> Option<usize> {
        if !self.is_categorical() {
            return None;
        }
        self.x.row(i).iter().position(|&v| v == 1.0)
    }

    /// Undirected edge count (pairs `i < j` whose category is not `NO_EDGE`).
    pub fn edge_count(&self) -> usize {
        let n = self.n;
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.a_type[i * n + j] != NO_EDGE)
            .count()
    }

    /// Augmented edge features: one-hot category followed by `a_feat`.
    pub fn edge_features(&self) -> Tensor {
        let v = self.edge_vocab.len();
        let f = self.a_feat.as_ref().map_or(0, |t| t.cols);
        let mut out = Tensor::zeros(self.n * self.n, v + f);
        for r in 0..self.n * self.n {
            out.set(r, self.a_type[r], 1.0);
            if let Some(feat) = &self.a_feat {
                out.row_mut(r)[v..].copy_from_slice(feat.row(r));
            }
        }
        out
    }

    pub fn degree(&self, i: usize) -> usize {
        (0..self.n)
            .filter(|&j| j != i && self.edge(i, j) != NO_EDGE)
            .count()
    }

    pub fn is_connected(&self) -> bool {
        let n = self.n;
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if !seen[j] && j != i && self.edge(i, j) != NO_EDGE {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Checks that `perm` is a bijection on `0..n`.
pub fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(invalid(format!(
            "permutation has length {}, expected {n}",
            perm.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(invalid("permutation is not a bijection"));
        }
        seen[p] = true;
    }
    Ok(())
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Row `i` of the result is row `perm[i]` of `t`.
pub fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    t.gather_rows(perm)
}

/// Pair tensor `[n*n, c]` relabelled so `out[i, j] = t[perm[i], perm[j]]`.
pub fn permute_pairs(t: &Tensor, perm: &[usize]) -> Tensor {
    let n = perm.len();
    let idx: Vec<usize> = (0..n * n).map(|r| perm[r / n] * n + perm[r % n]).collect();
    t.gather_rows(&idx)
}

/// Relabels nodes: `X'[i] = X[perm[i]]`, `A'[i, j] = A[perm[i], perm[j]]`.
///
/// Composition: `permute(&permute(g, p), q) == permute(g, r)` with
/// `r[i] = p[q[i]]`.
pub fn permute(graph: &Graph, perm: &[usize]) -> Result<Graph> {
    check_permutation(perm, graph.n)?;
    let n = graph.n;
    Ok(Graph {
        n,
        x: permute_rows(&graph.x, perm),
        a_type: (0..n * n)
            .map(|r| graph.a_type[perm[r / n] * n + perm[r % n]])
            .collect(),
        a_feat: graph.a_feat.as_ref().map(|f| permute_pairs(f, perm)),
        g: graph.g.clone(),
        node_vocab: graph.node_vocab.clone(),
        edge_vocab: graph.edge_vocab.clone(),
    })
}

/// Positions selected for masking.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskTargets {
    pub nodes: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
    pub graph: bool,
}

impl MaskTargets {
    pub fn graph_only() -> Self {
        Self {
            graph: true,
            ..Default::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty() && self.edges.is_empty() && !self.graph
    }
}

/// A graph whose selected positions hold the MASK token.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedGraph {
    pub base: Graph,
    pub node_mask: Vec<bool>,
    /// Row-major `n * n`; symmetric.
    pub edge_mask: Vec<bool>,
    pub graph_mask: bool,
}

/// The values removed by masking, enough to restore the original graph.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedValues {
    pub nodes: Vec<(usize, Vec<f64>)>,
    pub edges: Vec<(usize, usize, usize, Option<Vec<f64>>)>,
    pub graph: Option<Vec<f64>>,
}

fn mask_node_row(graph: &mut Graph, i: usize) {
    let mask_id = graph.node_mask_id();
    let row = graph.x.row_mut(i);
    row.iter_mut().for_each(|v| *v = 0.0);
    if let Some(m) = mask_id {
        row[m] = 1.0;
    }
}

/// Replaces the selected positions with the MASK token. Masking edge `(i, j)`
/// masks `(j, i)` as well.
pub fn mask_graph(graph: &Graph, targets: &MaskTargets) -> Result<MaskedGraph> {
    Ok(split_masked(graph, targets)?.0)
}

/// Like [`mask_graph`], also returning the removed values.
pub fn split_masked(graph: &Graph, targets: &MaskTargets) -> Result<(MaskedGraph, MaskedValues)> {
    let n = graph.n;
    let mut base = graph.clone();
    let mut node_mask = vec![false; n];
    let mut edge_mask = vec![false; n * n];
    let mut values = MaskedValues {
        nodes: Vec::new(),
        edges: Vec::new(),
        graph: None,
    };
    for &i in &targets.nodes {
        if i >= n {
            return Err(invalid(format!(
                "node target {i} out of bounds for n = {n}"
            )));
        }
        if !node_mask[i] {
            values.nodes.push((i, graph.x.row(i).to_vec()));
            node_mask[i] = true;
            mask_node_row(&mut base, i);
        }
    }
    let edge_mask_id = graph.edge_mask_id();
    for &(i, j) in &targets.edges {
        if i >= n || j >= n {
            return Err(invalid(format!(
                "edge target ({i}, {j}) out of bounds for n = {n}"
            )));
        }
        for (a, b) in [(i, j), (j, i)] {
            let r = a * n + b;
            if edge_mask[r] {
                continue;
            }
            edge_mask[r] = true;
            values.edges.push((
                a,
                b,
                graph.a_type[r],
                graph.a_feat.as_ref().map(|f| f.row(r).to_vec()),
            ));
            base.a_type[r] = edge_mask_id;
            if let Some(f) = &mut base.a_feat {
                f.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    if targets.graph {
        values.graph = Some(graph.g.clone());
        base.g.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok((
        MaskedGraph {
            base,
            node_mask,
            edge_mask,
            graph_mask: targets.graph,
        },
        values,
    ))
}

impl MaskedGraph {
    /// An unmasked view of a graph.
    pub fn unmasked(graph: &Graph) -> Self {
        Self {
            base: graph.clone(),
            node_mask: vec![false; graph.n],
            edge_mask: vec![false; graph.n * graph.n],
            graph_mask: false,
        }
    }

    pub fn n(&self) -> usize {
        self.base.n
    }

    pub fn targets(&self) -> MaskTargets {
        let n = self.n();
        MaskTargets {
            nodes: (0..n).filter(|&i| self.node_mask[i]).collect(),
            edges: (0..n * n)
                .filter(|&r| self.edge_mask[r] && r / n <= r % n)
                .map(|r| (r / n, r % n))
                .collect(),
            graph: self.graph_mask,
        }
    }

    /// Re-applying the same masks is a no-op.
    pub fn remask(&self) -> Result<MaskedGraph> {
        let mut again = mask_graph(&self.base, &self.targets())?;
        // masks recorded by the original call, not re-derived from tokens
        again.node_mask.clone_from(&self.node_mask);
        again.edge_mask.clone_from(&self.edge_mask);
        Ok(again)
    }

    /// Substitutes the removed values back in.
    pub fn restore(&self, values: &MaskedValues) -> Graph {
        let mut g = self.base.clone();
        let n = g.n;
        for (i, row) in &values.nodes {
            g.x.row_mut(*i).copy_from_slice(row);
        }
        for (i, j, c, feat) in &values.edges {
            g.a_type[i * n + j] = *c;
            if let (Some(f), Some(v)) = (&mut g.a_feat, feat) {
                f.row_mut(i * n + j).copy_from_slice(v);
            }
        }
        if let Some(v) = &values.graph {
            g.g.clone_from(v);
        }
        g
    }

    pub fn permute(&self, perm: &[usize]) -> Result<MaskedGraph> {
        let n = self.n();
        Ok(MaskedGraph {
            base: permute(&self.base, perm)?,
            node_mask: perm.iter().map(|&p| self.node_mask[p]).collect(),
            edge_mask: (0..n * n)
                .map(|r| self.edge_mask[perm[r / n] * n + perm[r % n]])
                .collect(),
            graph_mask: self.graph_mask,
        })
    }
}

/// Graphs padded to a common size.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphBatch {
    pub graphs: Vec<Graph>,
    /// `node_pad_mask[b][i]` is true for real (unpadded) nodes.
    pub node_pad_mask: Vec<Vec<bool>>,
    pub sizes: Vec<usize>,
    pub n_max: usize,
}

/// Pads node rows with zeros and pairs with the no-edge category.
pub fn pad_graph(graph: &Graph, n_max: usize) -> Graph {
    let n = graph.n;
    let mut x = Tensor::zeros(n_max, graph.x.cols);
    for i in 0..n {
        x.row_mut(i).copy_from_slice(graph.x.row(i));
    }
    let mut a_type = vec![NO_EDGE; n_max * n_max];
    let mut a_feat = graph
        .a_feat
        .as_ref()
        .map(|f| Tensor::zeros(n_max * n_max, f.cols));
    for i in 0..n {
        for j in 0..n {
            a_type[i * n_max + j] = graph.a_type[i * n + j];
            if let (Some(dst), Some(src)) = (&mut a_feat, &graph.a_feat) {
                dst.row_mut(i * n_max + j)
                    .copy_from_slice(src.row(i * n + j));
            }
        }
    }
    Graph {
        n: n_max,
        x,
        a_type,
        a_feat,
        g: graph.g.clone(),
        node_vocab: graph.node_vocab.clone(),
        edge_vocab: graph.edge_vocab.clone(),
    }
}

fn truncate_graph(graph: &Graph, n: usize) -> Graph {
    let m = graph.n;
    let idx: Vec<usize> = (0..n).collect();
    let pairs: Vec<usize> = (0..n * n).map(|r| (r / n) * m + r % n).collect();
    Graph {
        n,
        x: graph.x.gather_rows(&idx),
        a_type: pairs.iter().map(|&r| graph.a_type[r]).collect(),
        a_feat: graph.a_feat.as_ref().map(|f| f.gather_rows(&pairs)),
        g: graph.g.clone(),
        node_vocab: graph.node_vocab.clone(),
        edge_vocab: graph.edge_vocab.clone(),
    }
}

pub fn batch(graphs: &[Graph]) -> Result<GraphBatch> {
    let n_max = graphs
        .iter()
        .map(|g| g.n)
        .max()
        .ok_or_else(|| invalid("cannot batch an empty list of graphs"))?;
    Ok(GraphBatch {
        graphs: graphs.iter().map(|g| pad_graph(g, n_max)).collect(),
        node_pad_mask: graphs
            .iter()
            .map(|g| (0..n_max).map(|i| i < g.n).collect())
            .collect(),
        sizes: graphs.iter().map(|g| g.n).collect(),
        n_max,
    })
}

impl GraphBatch {
    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn unbatch(&self) -> Vec<Graph> {
        self.graphs
            .iter()
            .zip(&self.sizes)
            .map(|(g, &n)| truncate_graph(g, n))
            .collect()
    }
}
