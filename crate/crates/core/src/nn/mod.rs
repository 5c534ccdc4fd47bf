//! Layers built on the autograd tape.

pub mod attention;
pub mod denoiser;
pub mod mpnn;
pub mod time;

use rand::Rng;

use crate::autograd::Var;
use crate::params::{Binder, Init, ParamStore};

pub use attention::{
    Activation, AttentionOptions, EdgeSelfAttention, GeneralCrossAttention, GraphCrossAttention,
    Kernel,
};
pub use denoiser::{
    Backbone, Condition, ConditioningMode, Denoiser, DenoiserConfig, DenoiserInput, Readout,
};
pub use time::sinusoidal_embedding;

/// `(W + W^T) / 2` over the pair rows of an `n`-node graph.
pub fn symmetrize_pairs(b: &mut Binder, w: Var, n: usize) -> Var {
    let t = b.tape.gather_rows(w, crate::latent::pair_transpose(n));
    let s = b.tape.add(w, t);
    b.tape.scale(s, 0.5)
}

pub const LN_EPS: f64 = 1e-5;

/// `{prefix}.weight` is `[out, in]`; `{prefix}.bias` is `[1, out]`.
pub fn register_linear(
    store: &mut ParamStore,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
    bias: bool,
    init: Init,
    rng: &mut impl Rng,
) {
    store.init(format!("{prefix}.weight"), out_dim, in_dim, init, rng);
    if bias {
        store.init(format!("{prefix}.bias"), 1, out_dim, Init::Zeros, rng);
    }
}

pub fn linear(b: &mut Binder, x: Var, prefix: &str) -> Var {
    let w = b.p(&format!("{prefix}.weight"));
    let y = b.tape.matmul_nt(x, w);
    let bias = format!("{prefix}.bias");
    if b.has(&bias) {
        let bv = b.p(&bias);
        b.tape.add_row(y, bv)
    } else {
        y
    }
}

pub fn register_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut impl Rng) {
    store.init(format!("{prefix}.gain"), 1, dim, Init::Ones, rng);
    store.init(format!("{prefix}.bias"), 1, dim, Init::Zeros, rng);
}

pub fn layer_norm(b: &mut Binder, x: Var, prefix: &str) -> Var {
    let y = b.tape.layer_norm(x, LN_EPS);
    let gain = b.p(&format!("{prefix}.gain"));
    let bias = b.p(&format!("{prefix}.bias"));
    let y = b.tape.mul_row(y, gain);
    b.tape.add_row(y, bias)
}

/// Two-layer perceptron with ReLU; the second layer is zero-initialized when
/// `zero_out` is set.
pub fn register_ffn(
    store: &mut ParamStore,
    prefix: &str,
    dim: usize,
    hidden: usize,
    zero_out: bool,
    rng: &mut impl Rng,
) {
    register_linear(
        store,
        &format!("{prefix}.0"),
        dim,
        hidden,
        true,
        Init::Xavier,
        rng,
    );
    let init = if zero_out { Init::Zeros } else { Init::Xavier };
    register_linear(store, &format!("{prefix}.1"), hidden, dim, true, init, rng);
}

pub fn ffn(b: &mut Binder, x: Var, prefix: &str) -> Var {
    let h = linear(b, x, &format!("{prefix}.0"));
    let h = b.tape.relu(h);
    linear(b, h, &format!("{prefix}.1"))
}

/// Readout weights over rows: `1/n_valid` (mean) or `1` (sum) on valid rows.
pub fn pool_weights(rows: usize, mask: Option<&[bool]>, mean: bool) -> Vec<f64> {
    let valid: Vec<bool> = (0..rows).map(|i| mask.map_or(true, |m| m[i])).collect();
    let count = valid.iter().filter(|&&v| v).count().max(1) as f64;
    valid
        .into_iter()
        .map(|v| {
            if !v {
                0.0
            } else if mean {
                1.0 / count
            } else {
                1.0
            }
        })
        .collect()
}
