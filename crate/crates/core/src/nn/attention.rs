//! Attention over nodes with augmented (all-pairs) edge channels.
//!
//! Node streams are `[n, d]`, pair streams `[n * n, d]`. With `h` heads the
//! `d'` output channels split into `h` contiguous blocks: the attention
//! logit of head `k` sums `W_A[c] * e'[c]` over the channels `c` of block
//! `k`, and the messages of block `k` are weighted by head `k`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{invalid, Result};
use crate::params::{Binder, Init, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kernel {
    Add,
    #[default]
    Hadamard,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionOptions {
    #[serde(default)]
    pub kernel: Kernel,
    #[serde(default = "yes")]
    pub use_rho: bool,
    #[serde(default)]
    pub activation: Activation,
    /// `W_A` fixed to ones and `E_v` to the identity.
    #[serde(default)]
    pub simplified: bool,
    #[serde(default = "one")]
    pub heads: usize,
}

fn yes() -> bool {
    true
}
fn one() -> usize {
    1
}

impl Default for AttentionOptions {
    fn default() -> Self {
        Self {
            kernel: Kernel::Hadamard,
            use_rho: true,
            activation: Activation::Relu,
            simplified: false,
            heads: 1,
        }
    }
}

impl AttentionOptions {
    pub fn validate(&self, out_dim: usize) -> Result<()> {
        if self.heads == 0 || out_dim % self.heads != 0 {
            return Err(invalid(format!(
                "{} heads do not divide width {out_dim}",
                self.heads
            )));
        }
        Ok(())
    }
}

fn kernel(b: &mut Binder, kind: Kernel, q: Var, k: Var) -> Var {
    let qi = b.tape.pair_rows(q);
    let kj = b.tape.pair_cols(k);
    match kind {
        Kernel::Hadamard => b.tape.mul(qi, kj),
        Kernel::Add => b.tape.add(qi, kj),
    }
}

fn activate(b: &mut Binder, kind: Activation, x: Var) -> Var {
    match kind {
        Activation::Relu => b.tape.relu(x),
        Activation::Identity => x,
    }
}

fn check_nodes(n: usize, mask: Option<&[bool]>) -> Result<()> {
    if n == 0 {
        return Err(invalid("attention needs at least one node"));
    }
    if let Some(m) = mask {
        if m.len() != n {
            return Err(invalid("node mask length differs from node count"));
        }
        if !m.iter().any(|&v| v) {
            return Err(invalid("attention needs at least one unpadded node"));
        }
    }
    Ok(())
}

/// Shared tail of both graph attentions: logits from `e'`, softmax over `j`,
/// and aggregation of `values_j + E_v e'_ij`.
fn attend(
    b: &mut Binder,
    prefix: &str,
    opts: &AttentionOptions,
    e_new: Var,
    values: Var,
    width: usize,
    mask: Option<&[bool]>,
) -> Var {
    let (w_a, e_v) = if opts.simplified {
        let ones = b.constant(Tensor::filled(1, width, 1.0));
        let eye = b.constant(Tensor::identity(width));
        (ones, eye)
    } else {
        (b.p(&format!("{prefix}.W_A")), b.p(&format!("{prefix}.E_v")))
    };
    let weighted = b.tape.mul_row(e_new, w_a);
    let logits = b.tape.group_sum(weighted, opts.heads);
    let alpha = b.tape.pair_softmax(logits, mask);
    let vj = b.tape.pair_cols(values);
    let edge_msg = b.tape.matmul_nt(e_new, e_v);
    let msg = b.tape.add(vj, edge_msg);
    b.tape.pair_aggregate(alpha, msg)
}

fn register_attend(
    store: &mut ParamStore,
    prefix: &str,
    width: usize,
    opts: &AttentionOptions,
    rng: &mut impl Rng,
) {
    if !opts.simplified {
        store.init(format!("{prefix}.W_A"), 1, width, Init::Xavier, rng);
        store.init(format!("{prefix}.E_v"), width, width, Init::Xavier, rng);
    }
}

/// Self-attention with augmented edges:
///
/// ```text
/// e'_ij = act(rho(kernel(Q x_i, K x_j) * E_w e_ij) + E_b e_ij)
/// a_ij  = softmax_j(W_A e'_ij)
/// x'_i  = sum_j a_ij (V x_j + E_v e'_ij)
/// ```
#[derive(Clone, Debug)]
pub struct EdgeSelfAttention {
    pub prefix: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub opts: AttentionOptions,
}

impl EdgeSelfAttention {
    pub fn new(
        prefix: impl Into<String>,
        in_dim: usize,
        out_dim: usize,
        opts: AttentionOptions,
    ) -> Self {
        Self {
            prefix: prefix.into(),
            in_dim,
            out_dim,
            opts,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for m in ["Q", "K", "V", "E_w", "E_b"] {
            store.init(
                format!("{}.{m}", self.prefix),
                self.out_dim,
                self.in_dim,
                Init::Xavier,
                rng,
            );
        }
        register_attend(store, &self.prefix, self.out_dim, &self.opts, rng);
    }

    fn w(&self, b: &mut Binder, m: &str) -> Var {
        b.p(&format!("{}.{m}", self.prefix))
    }

    /// Returns `(x', e')` with shapes `[n, d']` and `[n*n, d']`.
    pub fn forward(
        &self,
        b: &mut Binder,
        x: Var,
        e: Var,
        mask: Option<&[bool]>,
    ) -> Result<(Var, Var)> {
        let n = b.value(x).rows;
        check_nodes(n, mask)?;
        if b.value(e).rows != n * n {
            return Err(invalid("edge stream must have n*n rows"));
        }
        let (wq, wk, wv, ew, eb) = (
            self.w(b, "Q"),
            self.w(b, "K"),
            self.w(b, "V"),
            self.w(b, "E_w"),
            self.w(b, "E_b"),
        );
        let q = b.tape.matmul_nt(x, wq);
        let k = b.tape.matmul_nt(x, wk);
        let kern = kernel(b, self.opts.kernel, q, k);
        let gate = b.tape.matmul_nt(e, ew);
        let mut h = b.tape.mul(kern, gate);
        if self.opts.use_rho {
            h = b.tape.signed_sqrt(h);
        }
        let bias = b.tape.matmul_nt(e, eb);
        let h = b.tape.add(h, bias);
        let e_new = activate(b, self.opts.activation, h);
        let v = b.tape.matmul_nt(x, wv);
        let x_new = attend(b, &self.prefix, &self.opts, e_new, v, self.out_dim, mask);
        Ok((x_new, e_new))
    }
}

/// Cross-attention onto a condition graph with the same node set. Keys and
/// values come from the condition; condition node, edge and graph features
/// are also added node-wise and edge-wise:
///
/// ```text
/// e'_ij = act(rho(kernel(Q x_i, K xc_j) * E_w (e_ij + ec_ij)) + E_b ec_ij + G_e gc)
/// a_ij  = softmax_j(W_A e'_ij)
/// x'_i  = sum_j a_ij (V xc_j + E_v e'_ij) + W_h xc_i + G_h gc
/// ```
#[derive(Clone, Debug)]
pub struct GraphCrossAttention {
    pub prefix: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub opts: AttentionOptions,
}

impl GraphCrossAttention {
    pub fn new(
        prefix: impl Into<String>,
        in_dim: usize,
        out_dim: usize,
        opts: AttentionOptions,
    ) -> Self {
        Self {
            prefix: prefix.into(),
            in_dim,
            out_dim,
            opts,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for m in ["Q", "K", "V", "E_w", "E_b", "G_e", "G_h", "W_h"] {
            store.init(
                format!("{}.{m}", self.prefix),
                self.out_dim,
                self.in_dim,
                Init::Xavier,
                rng,
            );
        }
        register_attend(store, &self.prefix, self.out_dim, &self.opts, rng);
    }

    fn w(&self, b: &mut Binder, m: &str) -> Var {
        b.p(&format!("{}.{m}", self.prefix))
    }

    /// `gc` is a `[1, d]` row.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        b: &mut Binder,
        x: Var,
        e: Var,
        xc: Var,
        ec: Var,
        gc: Var,
        mask: Option<&[bool]>,
    ) -> Result<(Var, Var)> {
        let n = b.value(x).rows;
        check_nodes(n, mask)?;
        if b.value(xc).rows != n || b.value(ec).rows != n * n || b.value(e).rows != n * n {
            return Err(invalid(
                "condition graph must match the main graph's node set",
            ));
        }
        if b.value(gc).rows != 1 {
            return Err(invalid("graph-level condition must be a single row"));
        }
        let q = {
            let w = self.w(b, "Q");
            b.tape.matmul_nt(x, w)
        };
        let k = {
            let w = self.w(b, "K");
            b.tape.matmul_nt(xc, w)
        };
        let kern = kernel(b, self.opts.kernel, q, k);
        let e_sum = b.tape.add(e, ec);
        let ew = self.w(b, "E_w");
        let gate = b.tape.matmul_nt(e_sum, ew);
        let mut h = b.tape.mul(kern, gate);
        if self.opts.use_rho {
            h = b.tape.signed_sqrt(h);
        }
        let eb = self.w(b, "E_b");
        let bias = b.tape.matmul_nt(ec, eb);
        let h = b.tape.add(h, bias);
        let ge = self.w(b, "G_e");
        let g_edge = b.tape.matmul_nt(gc, ge);
        let h = b.tape.add_row(h, g_edge);
        let e_new = activate(b, self.opts.activation, h);
        let wv = self.w(b, "V");
        let v = b.tape.matmul_nt(xc, wv);
        let agg = attend(b, &self.prefix, &self.opts, e_new, v, self.out_dim, mask);
        let wh = self.w(b, "W_h");
        let skip = b.tape.matmul_nt(xc, wh);
        let x_new = b.tape.add(agg, skip);
        let gh = self.w(b, "G_h");
        let g_node = b.tape.matmul_nt(gc, gh);
        let x_new = b.tape.add_row(x_new, g_node);
        Ok((x_new, e_new))
    }
}

/// Nodes and edges each attend over `m` condition vectors `tau`:
///
/// ```text
/// x'_i  = softmax((Q_h x_i)(K_h tau)^T / sqrt(d')) V_h tau
/// e'_ij = softmax((Q_e e_ij)(K_e tau)^T / sqrt(d')) V_e tau
/// ```
#[derive(Clone, Debug)]
pub struct GeneralCrossAttention {
    pub prefix: String,
    pub in_dim: usize,
    pub cond_dim: usize,
    pub out_dim: usize,
}

impl GeneralCrossAttention {
    pub fn new(prefix: impl Into<String>, in_dim: usize, cond_dim: usize, out_dim: usize) -> Self {
        Self {
            prefix: prefix.into(),
            in_dim,
            cond_dim,
            out_dim,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for m in ["Q_h", "Q_e"] {
            store.init(
                format!("{}.{m}", self.prefix),
                self.out_dim,
                self.in_dim,
                Init::Xavier,
                rng,
            );
        }
        for m in ["K_h", "V_h", "K_e", "V_e"] {
            store.init(
                format!("{}.{m}", self.prefix),
                self.out_dim,
                self.cond_dim,
                Init::Xavier,
                rng,
            );
        }
    }

    fn channel(&self, b: &mut Binder, x: Var, tau: Var, q: &str, k: &str, v: &str) -> Var {
        let wq = b.p(&format!("{}.{q}", self.prefix));
        let wk = b.p(&format!("{}.{k}", self.prefix));
        let wv = b.p(&format!("{}.{v}", self.prefix));
        let qx = b.tape.matmul_nt(x, wq);
        let kt = b.tape.matmul_nt(tau, wk);
        let vt = b.tape.matmul_nt(tau, wv);
        let scores = b.tape.matmul_nt(qx, kt);
        let scores = b.tape.scale(scores, 1.0 / (self.out_dim as f64).sqrt());
        let attn = b.tape.row_softmax(scores);
        b.tape.matmul(attn, vt)
    }

    /// `tau` is `[m, d_tau]` with `m >= 1`.
    pub fn forward(&self, b: &mut Binder, x: Var, e: Var, tau: Var) -> Result<(Var, Var)> {
        let t = b.value(tau);
        if t.rows == 0 {
            return Err(invalid(
                "cross-attention needs at least one condition vector",
            ));
        }
        if t.cols != self.cond_dim {
            return Err(invalid(format!(
                "condition width {} != {}",
                t.cols, self.cond_dim
            )));
        }
        let x_new = self.channel(b, x, tau, "Q_h", "K_h", "V_h");
        let e_new = self.channel(b, e, tau, "Q_e", "K_e", "V_e");
        Ok((x_new, e_new))
    }
}
