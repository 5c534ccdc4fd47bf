//! Permutation checks shared by the equivariance tests and the acceptance
//! run. Each check returns the largest absolute deviation between
//! "permute then apply" and "apply then permute".

use lgd::autoencoder::{Autoencoder, DataMeta, EncoderConfig, Regularization};
use lgd::diffusion::{adjacency_of, DiffusionConfig, NodeValue, Pipeline, Prediction, Sampler};
use lgd::graph::{
    generate, mask_graph, permute_pairs, permute_rows, DatasetSpec, Graph, MaskTargets,
};
use lgd::nn::{
    AttentionOptions, Backbone, Condition, ConditioningMode, Denoiser, DenoiserConfig,
    DenoiserInput, EdgeSelfAttention, GeneralCrossAttention, GraphCrossAttention, Kernel,
};
use lgd::params::{Binder, ParamStore};
use lgd::{LatentGraph, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

pub fn scramble(store: &mut ParamStore, scale: f64, rng: &mut ChaCha8Rng) {
    for t in store.tensors_mut() {
        for v in &mut t.data {
            *v = scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in all_permutations(n - 1) {
        for pos in 0..n {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Every permutation of 4 nodes and 100 seeded random permutations of 6.
pub fn permutation_sets() -> Vec<(usize, Vec<Vec<usize>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let random6 = (0..100)
        .map(|_| {
            let mut p: Vec<usize> = (0..6).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    vec![(4, all_permutations(4)), (6, random6)]
}

fn dev(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!((a.rows, a.cols), (b.rows, b.cols));
    a.max_abs_diff(b)
}

fn opts() -> Vec<AttentionOptions> {
    vec![
        AttentionOptions::default(),
        AttentionOptions {
            kernel: Kernel::Add,
            heads: 2,
            use_rho: false,
            ..Default::default()
        },
    ]
}

fn graph_of_size(n: usize, seed: u64) -> Graph {
    let spec = DatasetSpec::RegressionSynthetic {
        size: 1,
        seed,
        min_nodes: n,
        max_nodes: n,
        label_fn: Default::default(),
    };
    generate(&spec).unwrap().remove(0)
}

fn permuted_adjacency(adj: &[bool], full: &[usize]) -> Vec<bool> {
    let m = full.len();
    (0..m * m)
        .map(|r| adj[full[r / m] * m + full[r % m]])
        .collect()
}

pub fn self_attention() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for o in opts() {
        let layer = EdgeSelfAttention::new("a", 3, 4, o);
        let mut store = ParamStore::new();
        layer.register(&mut store, &mut rng);
        for (n, perms) in permutation_sets() {
            let (x, e) = (random(n, 3, &mut rng), random(n * n, 3, &mut rng));
            let mask: Vec<bool> = (0..n).map(|i| i != 1).collect();
            let run = |x: &Tensor, e: &Tensor, m: Option<&[bool]>| {
                let mut b = Binder::new(&store, false);
                let (xv, ev) = (b.constant(x.clone()), b.constant(e.clone()));
                let (xo, eo) = layer.forward(&mut b, xv, ev, m).unwrap();
                (b.value(xo).clone(), b.value(eo).clone())
            };
            for masked in [false, true] {
                let m = masked.then_some(&mask[..]);
                let (xo, eo) = run(&x, &e, m);
                for p in &perms {
                    let pm: Vec<bool> = p.iter().map(|&i| mask[i]).collect();
                    let (xp, ep) = run(
                        &permute_rows(&x, p),
                        &permute_pairs(&e, p),
                        masked.then_some(&pm[..]),
                    );
                    worst = worst
                        .max(dev(&permute_rows(&xo, p), &xp))
                        .max(dev(&permute_pairs(&eo, p), &ep));
                }
            }
        }
    }
    worst
}

pub fn graph_cross_attention() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for o in opts() {
        let layer = GraphCrossAttention::new("c", 3, 4, o);
        let mut store = ParamStore::new();
        layer.register(&mut store, &mut rng);
        for (n, perms) in permutation_sets() {
            let (x, e) = (random(n, 3, &mut rng), random(n * n, 3, &mut rng));
            let (xc, ec, gc) = (
                random(n, 3, &mut rng),
                random(n * n, 3, &mut rng),
                random(1, 3, &mut rng),
            );
            let run = |x: &Tensor, e: &Tensor, xc: &Tensor, ec: &Tensor| {
                let mut b = Binder::new(&store, false);
                let v = [x, e, xc, ec, &gc].map(|t| b.constant(t.clone()));
                let (xo, eo) = layer
                    .forward(&mut b, v[0], v[1], v[2], v[3], v[4], None)
                    .unwrap();
                (b.value(xo).clone(), b.value(eo).clone())
            };
            let (xo, eo) = run(&x, &e, &xc, &ec);
            for p in &perms {
                let (xp, ep) = run(
                    &permute_rows(&x, p),
                    &permute_pairs(&e, p),
                    &permute_rows(&xc, p),
                    &permute_pairs(&ec, p),
                );
                worst = worst
                    .max(dev(&permute_rows(&xo, p), &xp))
                    .max(dev(&permute_pairs(&eo, p), &ep));
            }
        }
    }
    worst
}

pub fn general_cross_attention() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let layer = GeneralCrossAttention::new("g", 3, 2, 4);
    let mut store = ParamStore::new();
    layer.register(&mut store, &mut rng);
    let mut worst: f64 = 0.0;
    for (n, perms) in permutation_sets() {
        let (x, e, tau) = (
            random(n, 3, &mut rng),
            random(n * n, 3, &mut rng),
            random(3, 2, &mut rng),
        );
        let run = |x: &Tensor, e: &Tensor| {
            let mut b = Binder::new(&store, false);
            let (xv, ev, tv) = (
                b.constant(x.clone()),
                b.constant(e.clone()),
                b.constant(tau.clone()),
            );
            let (xo, eo) = layer.forward(&mut b, xv, ev, tv).unwrap();
            (b.value(xo).clone(), b.value(eo).clone())
        };
        let (xo, eo) = run(&x, &e);
        for p in &perms {
            let (xp, ep) = run(&permute_rows(&x, p), &permute_pairs(&e, p));
            worst = worst
                .max(dev(&permute_rows(&xo, p), &xp))
                .max(dev(&permute_pairs(&eo, p), &ep));
        }
    }
    worst
}

fn denoiser_config(conditioning: ConditioningMode, backbone: Backbone) -> DenoiserConfig {
    DenoiserConfig {
        latent_dim: 3,
        hidden: 4,
        depth: 1,
        time_embed_dim: 4,
        ffn_mult: 2,
        conditioning,
        cond_dim: 2,
        tau_dim: 3,
        backbone,
        attention: AttentionOptions {
            heads: 2,
            ..Default::default()
        },
        ..Default::default()
    }
}

pub fn denoiser() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let cases = [
        (ConditioningMode::None, Backbone::EdgeTransformer),
        (ConditioningMode::General, Backbone::EdgeTransformer),
        (ConditioningMode::MaskedGraph, Backbone::EdgeTransformer),
        (ConditioningMode::Additive, Backbone::EdgeTransformer),
        (ConditioningMode::None, Backbone::Mpnn),
    ];
    for (mode, backbone) in cases {
        let den = Denoiser::new(denoiser_config(mode, backbone)).unwrap();
        let mut params = den.init(&mut rng);
        scramble(&mut params, 0.3, &mut rng);
        for (n, perms) in permutation_sets() {
            let m = n + 1;
            let h = LatentGraph::gaussian(m, 3, true, &mut rng);
            let cond_latent = LatentGraph::gaussian(m, 3, true, &mut rng);
            let vectors = random(2, 2, &mut rng);
            let adjacency = adjacency_of(&graph_of_size(n, 7), true);
            let condition_for = |perm: Option<&[usize]>| match mode {
                ConditioningMode::None => Condition::None,
                ConditioningMode::General => Condition::Vectors(vectors.clone()),
                _ => Condition::Latent(match perm {
                    Some(p) => cond_latent.permute(p).unwrap(),
                    None => cond_latent.clone(),
                }),
            };
            let run = |h: &LatentGraph, condition: &Condition, adj: &[bool]| {
                den.predict(
                    &params,
                    &DenoiserInput {
                        h,
                        t: 137,
                        condition,
                        node_mask: None,
                        adjacency: Some(adj),
                    },
                )
                .unwrap()
            };
            let base = run(&h, &condition_for(None), &adjacency);
            for p in &perms {
                let full = h.full_permutation(p).unwrap();
                let out = run(
                    &h.permute(p).unwrap(),
                    &condition_for(Some(p)),
                    &permuted_adjacency(&adjacency, &full),
                );
                worst = worst.max(base.permute(p).unwrap().max_abs_diff(&out));
            }
        }
    }
    worst
}

fn encoder_configs() -> Vec<EncoderConfig> {
    let base = EncoderConfig {
        depth: 1,
        hidden: 4,
        latent_dim: 3,
        ..Default::default()
    };
    vec![
        base.clone(),
        EncoderConfig {
            regularization: Regularization::Kl,
            attention: AttentionOptions {
                kernel: Kernel::Add,
                heads: 2,
                ..Default::default()
            },
            ..base.clone()
        },
        EncoderConfig {
            backbone: Backbone::Mpnn,
            ..base
        },
    ]
}

fn masked_targets(n: usize) -> MaskTargets {
    MaskTargets {
        nodes: vec![1],
        edges: vec![(0, n - 1)],
        graph: true,
    }
}

pub fn encode() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for config in encoder_configs() {
        for (n, perms) in permutation_sets() {
            let g = graph_of_size(n, 11);
            let ae = Autoencoder::new(
                config.clone(),
                DataMeta::from_graphs(std::slice::from_ref(&g)).unwrap(),
            )
            .unwrap();
            let mut params = ae.init(&mut rng);
            scramble(&mut params, 0.3, &mut rng);
            let mg = mask_graph(&g, &masked_targets(n)).unwrap();
            let base = ae.encode(&params, &mg).unwrap();
            for p in &perms {
                let out = ae.encode(&params, &mg.permute(p).unwrap()).unwrap();
                worst = worst.max(base.permute(p).unwrap().max_abs_diff(&out));
            }
        }
    }
    worst
}

fn prediction_dev(base: &Prediction, permuted: &Prediction, p: &[usize]) -> f64 {
    let mut worst: f64 = 0.0;
    let (a, b) = (
        base.graph.as_ref().unwrap(),
        permuted.graph.as_ref().unwrap(),
    );
    for (x, y) in a.iter().zip(b) {
        worst = worst.max((x - y).abs());
    }
    assert_eq!(base.nodes.len(), permuted.nodes.len());
    for (i, v) in &permuted.nodes {
        let (_, u) = base
            .nodes
            .iter()
            .find(|(j, _)| *j == p[*i])
            .expect("node predicted");
        match (u, v) {
            (NodeValue::Values(u), NodeValue::Values(v)) => {
                for (x, y) in u.iter().zip(v) {
                    worst = worst.max((x - y).abs());
                }
            }
            (u, v) => worst = worst.max(if u == v { 0.0 } else { f64::INFINITY }),
        }
    }
    assert_eq!(base.edges.len(), permuted.edges.len());
    for &(i, j, c) in &permuted.edges {
        let (a, b) = (p[i].min(p[j]), p[i].max(p[j]));
        let found = base
            .edges
            .iter()
            .any(|&(x, y, d)| x == a && y == b && d == c);
        worst = worst.max(if found { 0.0 } else { f64::INFINITY });
    }
    worst
}

pub fn predict() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    let config = DiffusionConfig {
        sampler: Sampler::Ddim,
        ddim_steps: 5,
        ..Default::default()
    };
    let schedule = config.schedule.build().unwrap();
    for mode in [ConditioningMode::Additive, ConditioningMode::MaskedGraph] {
        for (n, perms) in permutation_sets() {
            let g = graph_of_size(n, 13);
            let enc = encoder_configs().remove(0);
            let ae = Autoencoder::new(
                enc,
                DataMeta::from_graphs(std::slice::from_ref(&g)).unwrap(),
            )
            .unwrap();
            let mut ae_params = ae.init(&mut rng);
            scramble(&mut ae_params, 0.3, &mut rng);
            let den = Denoiser::new(denoiser_config(mode, Backbone::EdgeTransformer)).unwrap();
            let mut den_params = den.init(&mut rng);
            scramble(&mut den_params, 0.3, &mut rng);
            let pipe = Pipeline {
                ae: &ae,
                ae_params: &ae_params,
                denoiser: &den,
                den_params: &den_params,
                schedule: &schedule,
                config: &config,
            };
            let mg = mask_graph(&g, &masked_targets(n)).unwrap();
            let init = LatentGraph::gaussian(n + 1, 3, true, &mut rng);
            let base = pipe
                .predict_from_noise(&mg, &[init.clone()], &mut rng)
                .unwrap();
            for p in &perms {
                let out = pipe
                    .predict_from_noise(
                        &mg.permute(p).unwrap(),
                        &[init.permute(p).unwrap()],
                        &mut rng,
                    )
                    .unwrap();
                worst = worst.max(prediction_dev(&base, &out, p));
            }
        }
    }
    worst
}

/// `(component, max deviation)` for the whole suite.
pub fn suite() -> Vec<(&'static str, f64)> {
    vec![
        ("edge self-attention", self_attention()),
        ("graph cross-attention", graph_cross_attention()),
        ("general cross-attention", general_cross_attention()),
        ("denoiser", denoiser()),
        ("encode", encode()),
        ("predict", predict()),
    ]
}
