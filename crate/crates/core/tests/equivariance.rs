//! Node permutations commute with every layer, the denoiser, encoding and
//! prediction: all permutations of 4 nodes, 100 random ones of 6.

mod common;

use common::equivariance as eq;

const TOL: f64 = 1e-8;

#[test]
fn edge_self_attention() {
    let d = eq::self_attention();
    assert!(d <= TOL, "{d:e}");
}

#[test]
fn graph_cross_attention() {
    let d = eq::graph_cross_attention();
    assert!(d <= TOL, "{d:e}");
}

#[test]
fn general_cross_attention() {
    let d = eq::general_cross_attention();
    assert!(d <= TOL, "{d:e}");
}

#[test]
fn denoiser() {
    let d = eq::denoiser();
    assert!(d <= TOL, "{d:e}");
}

#[test]
fn encode() {
    let d = eq::encode();
    assert!(d <= TOL, "{d:e}");
}

#[test]
fn predict() {
    let d = eq::predict();
    assert!(d <= TOL, "{d:e}");
}
