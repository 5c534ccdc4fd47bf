//! Generation and prediction metrics.

pub mod canonical;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::graph::Graph;

pub use canonical::{canonical_form, count_classes_brute_force, isomorphic_brute_force};

/// Maximum bond-order-weighted degree per node category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValenceTable(pub Vec<u32>);

/// Bond order of an edge category: its index for the bond categories
/// (1 single, 2 double, 3 triple); `None` for the MASK category.
fn bond_order(g: &Graph, category: usize) -> Option<u32> {
    if category == g.edge_mask_id() {
        None
    } else {
        Some(category as u32)
    }
}

/// Connected, and every node's bond-order-weighted degree is at most its
/// valence. Masked or unknown categories are invalid.
pub fn is_valid(g: &Graph, table: &ValenceTable) -> bool {
    if !g.is_connected() {
        return false;
    }
    (0..g.n).all(|i| {
        let Some(cat) = g.node_category(i) else {
            return false;
        };
        let Some(&valence) = table.0.get(cat) else {
            return false;
        };
        let mut used = 0;
        for j in (0..g.n).filter(|&j| j != i) {
            match bond_order(g, g.edge(i, j)) {
                Some(o) => used += o,
                None => return false,
            }
        }
        used <= valence
    })
}

fn fraction(k: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        k as f64 / total as f64
    }
}

pub fn validity(graphs: &[Graph], table: &ValenceTable) -> f64 {
    fraction(
        graphs.iter().filter(|g| is_valid(g, table)).count(),
        graphs.len(),
    )
}

/// Number of distinct canonical forms.
pub fn count_classes(graphs: &[Graph]) -> usize {
    graphs
        .iter()
        .map(canonical_form)
        .collect::<BTreeSet<_>>()
        .len()
}

pub fn uniqueness(graphs: &[Graph]) -> f64 {
    fraction(count_classes(graphs), graphs.len())
}

/// Fraction of the isomorphism classes of `graphs` absent from `train`.
pub fn novelty(graphs: &[Graph], train: &[Graph]) -> f64 {
    let seen: BTreeSet<Vec<u64>> = train.iter().map(canonical_form).collect();
    let classes: BTreeSet<Vec<u64>> = graphs.iter().map(canonical_form).collect();
    fraction(
        classes.iter().filter(|c| !seen.contains(*c)).count(),
        classes.len(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub mae: f64,
    pub mse: f64,
}

pub fn regression_metrics(preds: &[f64], labels: &[f64]) -> Result<RegressionMetrics> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(invalid(
            "predictions and labels must be non-empty and equally long",
        ));
    }
    let k = preds.len() as f64;
    let mae = preds
        .iter()
        .zip(labels)
        .map(|(p, y)| (p - y).abs())
        .sum::<f64>()
        / k;
    let mse = preds
        .iter()
        .zip(labels)
        .map(|(p, y)| (p - y).powi(2))
        .sum::<f64>()
        / k;
    Ok(RegressionMetrics { mae, mse })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub auc: f64,
}

/// Area under the ROC curve via the Mann-Whitney statistic; ties count 1/2.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(invalid("scores and labels differ in length"));
    }
    let pos: Vec<f64> = scores
        .iter()
        .zip(positive)
        .filter(|(_, &p)| p)
        .map(|(s, _)| *s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(positive)
        .filter(|(_, &p)| !p)
        .map(|(s, _)| *s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(invalid("AUC needs both positive and negative examples"));
    }
    let mut wins = 0.0;
    for p in &pos {
        for q in &neg {
            wins += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

/// `scores[r]` holds per-class scores. Accuracy uses the argmax; AUC is the
/// binary AUC of class 1 for two classes, else the macro one-vs-rest mean
/// over classes present with both outcomes.
pub fn classification_metrics(
    scores: &[Vec<f64>],
    labels: &[usize],
) -> Result<ClassificationMetrics> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(invalid(
            "scores and labels must be non-empty and equally long",
        ));
    }
    let classes = scores[0].len();
    if classes < 2
        || scores.iter().any(|s| s.len() != classes)
        || labels.iter().any(|&l| l >= classes)
    {
        return Err(invalid("inconsistent class scores"));
    }
    let argmax = |s: &[f64]| {
        s.iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |b, (k, &v)| if v > b.1 { (k, v) } else { b },
            )
            .0
    };
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(s, &l)| argmax(s) == l)
        .count();
    let accuracy = fraction(correct, labels.len());
    let auc_of = |c: usize| {
        let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        binary_auc(&col, &pos)
    };
    let auc = if classes == 2 {
        auc_of(1)?
    } else {
        let aucs: Vec<f64> = (0..classes).filter_map(|c| auc_of(c).ok()).collect();
        if aucs.is_empty() {
            return Err(invalid("AUC needs both outcomes for some class"));
        }
        aucs.iter().sum::<f64>() / aucs.len() as f64
    };
    Ok(ClassificationMetrics { accuracy, auc })
}

fn degree_histogram(graphs: &[Graph]) -> BTreeMap<usize, f64> {
    let mut h = BTreeMap::new();
    let mut total = 0.0;
    for g in graphs {
        for i in 0..g.n {
            *h.entry(g.degree(i)).or_insert(0.0) += 1.0;
            total += 1.0;
        }
    }
    for v in h.values_mut() {
        *v /= total;
    }
    h
}

/// Total-variation distance between the normalized node-degree histograms.
pub fn degree_histogram_distance(generated: &[Graph], reference: &[Graph]) -> f64 {
    let (p, q) = (degree_histogram(generated), degree_histogram(reference));
    let keys: BTreeSet<usize> = p.keys().chain(q.keys()).copied().collect();
    0.5 * keys
        .into_iter()
        .map(|k| (p.get(&k).unwrap_or(&0.0) - q.get(&k).unwrap_or(&0.0)).abs())
        .sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationMetrics {
    pub count: usize,
    pub validity: Option<f64>,
    pub uniqueness: f64,
    pub novelty: f64,
    pub degree_tv: f64,
}

pub fn generation_metrics(
    generated: &[Graph],
    train: &[Graph],
    table: Option<&ValenceTable>,
) -> GenerationMetrics {
    GenerationMetrics {
        count: generated.len(),
        validity: table.map(|t| validity(generated, t)),
        uniqueness: uniqueness(generated),
        novelty: novelty(generated, train),
        degree_tv: degree_histogram_distance(generated, train),
    }
}
