//! Isomorphism-invariant graph keys.
//!
//! Graphs with at most [`EXHAUSTIVE_LIMIT`] nodes get an exact canonical
//! form: the lexicographically smallest encoding over all node orders that
//! list nodes by a refined invariant (label, degree, neighbour labels).
//! Ordering by an invariant first keeps the form canonical while pruning
//! most permutations. Larger graphs get a 3-round Weisfeiler-Lehman hash,
//! which can collide for non-isomorphic graphs.

use sha2::{Digest, Sha256};

use crate::graph::{Graph, NO_EDGE};

pub const EXHAUSTIVE_LIMIT: usize = 8;
pub const WL_ROUNDS: usize = 3;

/// Exact node label: the category, or the raw feature bits for real nodes.
fn node_label(g: &Graph, i: usize) -> Vec<u64> {
    match g.node_category(i) {
        Some(c) => vec![c as u64],
        None => g.x.row(i).iter().map(|v| v.to_bits()).collect(),
    }
}

fn encode(g: &Graph, order: &[usize], labels: &[Vec<u64>]) -> Vec<u64> {
    let mut out = Vec::with_capacity(order.len() * (order.len() + 2));
    out.push(order.len() as u64);
    for &i in order {
        out.push(labels[i].len() as u64);
        out.extend(&labels[i]);
    }
    for &i in order {
        for &j in order {
            out.push(g.edge(i, j) as u64);
        }
    }
    out
}

/// Smallest encoding over orders that permute nodes only within invariant
/// classes, classes taken in sorted order.
pub fn exhaustive_form(g: &Graph) -> Vec<u64> {
    let n = g.n;
    let labels: Vec<Vec<u64>> = (0..n).map(|i| node_label(g, i)).collect();
    let invariant = |i: usize| {
        let mut neigh: Vec<(u64, Vec<u64>)> = (0..n)
            .filter(|&j| j != i && g.edge(i, j) != NO_EDGE)
            .map(|j| (g.edge(i, j) as u64, labels[j].clone()))
            .collect();
        neigh.sort();
        (labels[i].clone(), g.degree(i), neigh)
    };
    let mut nodes: Vec<usize> = (0..n).collect();
    let keys: Vec<_> = (0..n).map(invariant).collect();
    nodes.sort_by(|&a, &b| keys[a].cmp(&keys[b]));
    let mut classes: Vec<Vec<usize>> = Vec::new();
    for &i in &nodes {
        match classes.last_mut() {
            Some(c) if keys[c[0]] == keys[i] => c.push(i),
            _ => classes.push(vec![i]),
        }
    }
    let mut best: Option<Vec<u64>> = None;
    let mut order = Vec::with_capacity(n);
    search(g, &labels, &mut classes, 0, &mut order, &mut best);
    best.expect("at least one order")
}

fn search(
    g: &Graph,
    labels: &[Vec<u64>],
    classes: &mut [Vec<usize>],
    class: usize,
    order: &mut Vec<usize>,
    best: &mut Option<Vec<u64>>,
) {
    if class == classes.len() {
        let code = encode(g, order, labels);
        if best.as_ref().map_or(true, |b| code < *b) {
            *best = Some(code);
        }
        return;
    }
    let members = classes[class].clone();
    permute_all(&members, &mut |perm| {
        let len = order.len();
        order.extend_from_slice(perm);
        search(g, labels, classes, class + 1, order, best);
        order.truncate(len);
    });
}

/// Calls `f` on every permutation of `items` (Heap's algorithm).
pub fn permute_all(items: &[usize], f: &mut dyn FnMut(&[usize])) {
    let mut a = items.to_vec();
    let n = a.len();
    let mut c = vec![0; n];
    f(&a);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            f(&a);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

fn digest(parts: &[u8]) -> String {
    hex::encode(&Sha256::digest(parts)[..16])
}

pub fn wl_hash(g: &Graph) -> Vec<u64> {
    let n = g.n;
    let mut colors: Vec<String> = (0..n)
        .map(|i| digest(format!("{:?}", node_label(g, i)).as_bytes()))
        .collect();
    for _ in 0..WL_ROUNDS {
        colors = (0..n)
            .map(|i| {
                let mut neigh: Vec<String> = (0..n)
                    .filter(|&j| j != i && g.edge(i, j) != NO_EDGE)
                    .map(|j| format!("{}:{}", g.edge(i, j), colors[j]))
                    .collect();
                neigh.sort();
                digest(format!("{}|{}", colors[i], neigh.join(",")).as_bytes())
            })
            .collect();
    }
    colors.sort();
    let d = Sha256::digest(format!("{n}|{}|{}", g.edge_count(), colors.join(",")).as_bytes());
    // tag distinguishes hashes from exact forms
    let mut out = vec![u64::MAX];
    out.extend(
        d.chunks(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes"))),
    );
    out
}

/// Canonical key: exact for small graphs, WL hash beyond.
pub fn canonical_form(g: &Graph) -> Vec<u64> {
    if g.n <= EXHAUSTIVE_LIMIT {
        exhaustive_form(g)
    } else {
        wl_hash(g)
    }
}

/// Brute-force isomorphism test over all `n!` node maps.
pub fn isomorphic_brute_force(a: &Graph, b: &Graph) -> bool {
    if a.n != b.n {
        return false;
    }
    let n = a.n;
    let la: Vec<Vec<u64>> = (0..n).map(|i| node_label(a, i)).collect();
    let lb: Vec<Vec<u64>> = (0..n).map(|i| node_label(b, i)).collect();
    let profile = |g: &Graph, labels: &[Vec<u64>]| {
        let mut p: Vec<(Vec<u64>, Vec<usize>)> = (0..n)
            .map(|i| {
                let mut row: Vec<usize> = (0..n).map(|j| g.edge(i, j)).collect();
                row.sort_unstable();
                (labels[i].clone(), row)
            })
            .collect();
        p.sort();
        p
    };
    // necessary condition: same multiset of (label, sorted edge row)
    if profile(a, &la) != profile(b, &lb) {
        return false;
    }
    let ids: Vec<usize> = (0..n).collect();
    let mut found = false;
    permute_all(&ids, &mut |p| {
        if found {
            return;
        }
        let ok = (0..n).all(|i| la[i] == lb[p[i]])
            && (0..n).all(|i| (0..n).all(|j| a.edge(i, j) == b.edge(p[i], p[j])));
        if ok {
            found = true;
        }
    });
    found
}

/// Number of isomorphism classes by pairwise brute-force comparison.
pub fn count_classes_brute_force(graphs: &[Graph]) -> usize {
    let mut reps: Vec<&Graph> = Vec::new();
    for g in graphs {
        if !reps.iter().any(|r| isomorphic_brute_force(r, g)) {
            reps.push(g);
        }
    }
    reps.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate, permute, DatasetSpec};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn heap_visits_every_permutation_once() {
        let mut seen = std::collections::BTreeSet::new();
        permute_all(&[0, 1, 2, 3], &mut |p| {
            seen.insert(p.to_vec());
        });
        assert_eq!(seen.len(), 24);
    }

    #[test]
    fn forms_are_permutation_invariant() {
        let graphs = generate(&DatasetSpec::toy_molecules(20, 4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for g in &graphs {
            let mut p: Vec<usize> = (0..g.n).collect();
            p.shuffle(&mut rng);
            let h = permute(g, &p).unwrap();
            assert_eq!(canonical_form(g), canonical_form(&h));
            assert_eq!(wl_hash(g), wl_hash(&h));
            assert!(isomorphic_brute_force(g, &h));
        }
    }
}
