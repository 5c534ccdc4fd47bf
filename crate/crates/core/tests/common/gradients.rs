//! Central finite differences against the tape's analytic gradients.
//!
//! Each case reduces its outputs to a scalar through a fixed random
//! projection and compares, per parameter tensor, the relative error
//! `|g_fd - g| / max(|g_fd|, |g|)` in the Euclidean norm.

use lgd::autoencoder::{Autoencoder, DataMeta, EncoderConfig, Regularization};
use lgd::autograd::Var;
use lgd::diffusion::{diffusion_loss, DiffusionConfig, DiffusionExample, Parameterization};
use lgd::graph::{generate, DatasetSpec, MaskedGraph};
use lgd::nn::{
    AttentionOptions, Backbone, Condition, ConditioningMode, Denoiser, DenoiserConfig,
    EdgeSelfAttention, GeneralCrossAttention, GraphCrossAttention, Kernel,
};
use lgd::params::{Binder, ParamStore};
use lgd::{LatentGraph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Replaces every parameter with fresh N(0, scale^2) values so that no
/// gradient is trivially zero (output projections start at zero).
fn scramble(store: &mut ParamStore, scale: f64, rng: &mut ChaCha8Rng) {
    for t in store.tensors_mut() {
        for v in &mut t.data {
            *v = scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn project(b: &mut Binder, outputs: &[(Var, &Tensor)]) -> Var {
    let mut total: Option<Var> = None;
    for &(v, r) in outputs {
        let rv = b.constant(r.clone());
        let m = b.tape.mul(v, rv);
        let s = b.tape.sum_all(m);
        total = Some(match total {
            None => s,
            Some(t) => b.tape.add(t, s),
        });
    }
    total.expect("at least one output")
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Returns `(name, relative error)` for every parameter tensor.
fn check(params: &ParamStore, loss: impl Fn(&mut Binder) -> Var) -> Vec<(String, f64)> {
    let analytic = {
        let mut b = Binder::new(params, true);
        let l = loss(&mut b);
        b.gradients(l)
    };
    let eval = |p: &ParamStore| {
        let mut b = Binder::new(p, false);
        let l = loss(&mut b);
        b.value(l).data[0]
    };
    let mut out = Vec::new();
    for (idx, name) in params.names().iter().enumerate() {
        let len = params.tensors()[idx].data.len();
        let mut fd = vec![0.0; len];
        for (k, g) in fd.iter_mut().enumerate() {
            let mut plus = params.clone();
            plus.tensors_mut()[idx].data[k] += H;
            let mut minus = params.clone();
            minus.tensors_mut()[idx].data[k] -= H;
            *g = (eval(&plus) - eval(&minus)) / (2.0 * H);
        }
        let an = &analytic.tensors[idx].data;
        let diff: Vec<f64> = fd.iter().zip(an).map(|(a, b)| a - b).collect();
        let scale = norm(&fd).max(norm(an)).max(1e-12);
        out.push((name.clone(), norm(&diff) / scale));
    }
    out
}

/// Largest relative error of one case, labelled with the worst tensor.
fn worst(label: &str, errors: &[(String, f64)]) -> (String, f64) {
    assert!(!errors.is_empty(), "{label}: no parameters");
    let (name, err) = errors.iter().fold((String::new(), 0.0f64), |acc, (n, e)| {
        if *e >= acc.1 {
            (n.clone(), *e)
        } else {
            acc
        }
    });
    (format!("{label} [{name}]"), err)
}

fn variants() -> Vec<AttentionOptions> {
    vec![
        AttentionOptions::default(),
        AttentionOptions {
            kernel: Kernel::Add,
            heads: 2,
            ..Default::default()
        },
        AttentionOptions {
            use_rho: false,
            ..Default::default()
        },
    ]
}

pub fn edge_self_attention() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for opts in variants() {
        let layer = EdgeSelfAttention::new("a", 3, 4, opts.clone());
        let mut store = ParamStore::new();
        layer.register(&mut store, &mut rng);
        let n = 4;
        let (x, e) = (random(n, 3, &mut rng), random(n * n, 3, &mut rng));
        let (rx, re) = (random(n, 4, &mut rng), random(n * n, 4, &mut rng));
        let mask = [true, true, false, true];
        for m in [None, Some(&mask[..])] {
            let errors = check(&store, |b| {
                let (xv, ev) = (b.constant(x.clone()), b.constant(e.clone()));
                let (xo, eo) = layer.forward(b, xv, ev, m).unwrap();
                project(b, &[(xo, &rx), (eo, &re)])
            });
            out.push(worst(
                &format!("self attention {opts:?} mask {m:?}"),
                &errors,
            ));
        }
    }
    out
}

pub fn graph_cross_attention() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for opts in variants() {
        let layer = GraphCrossAttention::new("c", 3, 4, opts.clone());
        let mut store = ParamStore::new();
        layer.register(&mut store, &mut rng);
        let n = 4;
        let (x, e) = (random(n, 3, &mut rng), random(n * n, 3, &mut rng));
        let (xc, ec, gc) = (
            random(n, 3, &mut rng),
            random(n * n, 3, &mut rng),
            random(1, 3, &mut rng),
        );
        let (rx, re) = (random(n, 4, &mut rng), random(n * n, 4, &mut rng));
        let errors = check(&store, |b| {
            let vars =
                [x.clone(), e.clone(), xc.clone(), ec.clone(), gc.clone()].map(|t| b.constant(t));
            let (xo, eo) = layer
                .forward(b, vars[0], vars[1], vars[2], vars[3], vars[4], None)
                .unwrap();
            project(b, &[(xo, &rx), (eo, &re)])
        });
        out.push(worst(&format!("graph cross attention {opts:?}"), &errors));
    }
    out
}

pub fn general_cross_attention() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let layer = GeneralCrossAttention::new("g", 3, 2, 4);
    let mut store = ParamStore::new();
    layer.register(&mut store, &mut rng);
    let n = 4;
    let (x, e, tau) = (
        random(n, 3, &mut rng),
        random(n * n, 3, &mut rng),
        random(3, 2, &mut rng),
    );
    let (rx, re) = (random(n, 4, &mut rng), random(n * n, 4, &mut rng));
    let errors = check(&store, |b| {
        let (xv, ev, tv) = (
            b.constant(x.clone()),
            b.constant(e.clone()),
            b.constant(tau.clone()),
        );
        let (xo, eo) = layer.forward(b, xv, ev, tv).unwrap();
        project(b, &[(xo, &rx), (eo, &re)])
    });
    out.push(worst("general cross attention", &errors));
    out
}

fn small_denoiser(conditioning: ConditioningMode, backbone: Backbone) -> DenoiserConfig {
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

pub fn diffusion_training_loss() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let schedule = DiffusionConfig::default().schedule.build().unwrap();
    let m = 4;
    let cases = [
        (ConditioningMode::None, Backbone::EdgeTransformer),
        (ConditioningMode::General, Backbone::EdgeTransformer),
        (ConditioningMode::MaskedGraph, Backbone::EdgeTransformer),
        (ConditioningMode::Additive, Backbone::EdgeTransformer),
        (ConditioningMode::None, Backbone::Mpnn),
    ];
    for (mode, backbone) in cases {
        let den = Denoiser::new(small_denoiser(mode, backbone)).unwrap();
        let mut params = den.init(&mut rng);
        scramble(&mut params, 0.5, &mut rng);
        let h0 =
            LatentGraph::new(random(m, 3, &mut rng), random(m * m, 3, &mut rng), true).unwrap();
        let condition = match mode {
            ConditioningMode::None => Condition::None,
            ConditioningMode::General => Condition::Vectors(random(m, 2, &mut rng)),
            _ => Condition::Latent(LatentGraph::gaussian(m, 3, true, &mut rng)),
        };
        let adjacency = (backbone == Backbone::Mpnn).then(|| {
            (0..m * m)
                .map(|r| r / m != r % m && (r / m + r % m) % 2 == 1)
                .collect()
        });
        let example = DiffusionExample {
            h0,
            condition,
            adjacency,
        };
        let eps = LatentGraph::gaussian(m, 3, true, &mut rng);
        for param in [Parameterization::X0, Parameterization::Eps] {
            let errors = check(&params, |b| {
                diffusion_loss(b, &den, &schedule, param, &example, 250, &eps).unwrap()
            });
            out.push(worst(
                &format!("diffusion loss {mode:?} {backbone:?} {param:?}"),
                &errors,
            ));
        }
    }
    out
}

// Vector quantization trains through a straight-through estimator, which is
// not the derivative of its forward pass, so it has no finite-difference
// oracle.
pub fn autoencoder_training_loss() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let graphs = generate(&DatasetSpec::regression(3, 4)).unwrap();
    let meta = DataMeta::from_graphs(&graphs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for regularization in [
        Regularization::LatentLayernorm,
        Regularization::Kl,
        Regularization::None,
    ] {
        let config = EncoderConfig {
            depth: 1,
            hidden: 4,
            latent_dim: 3,
            regularization,
            kl_weight: 0.1,
            codebook_size: 5,
            ..Default::default()
        };
        let ae = Autoencoder::new(config, meta.clone()).unwrap();
        let mut params = ae.init(&mut rng);
        scramble(&mut params, 0.5, &mut rng);
        let g = &graphs[0];
        let input = MaskedGraph::unmasked(g);
        let errors = check(&params, |b| {
            let mut noise = ChaCha8Rng::seed_from_u64(99);
            ae.loss(b, &input, g, &mut noise).unwrap()
        });
        out.push(worst(
            &format!("autoencoder loss {regularization:?}"),
            &errors,
        ));
    }
    out
}
