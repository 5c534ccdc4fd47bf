//! The time-conditional denoising network over latent graphs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::{
    AttentionOptions, EdgeSelfAttention, GeneralCrossAttention, GraphCrossAttention,
};
use super::{
    ffn, layer_norm, linear, mpnn, pool_weights, register_ffn, register_layer_norm,
    register_linear, symmetrize_pairs,
};
use crate::autograd::Var;
use crate::error::{invalid, LgdError, Result};
use crate::latent::LatentGraph;
use crate::params::{Binder, Init, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditioningMode {
    #[default]
    None,
    /// Cross-attention onto encoded condition vectors.
    General,
    /// Graph cross-attention onto the latent of a masked graph.
    MaskedGraph,
    /// The condition latent is added to the network output.
    Additive,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    #[default]
    EdgeTransformer,
    Mpnn,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Readout {
    #[default]
    VirtualNode,
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    pub ffn_mult: usize,
    pub conditioning: ConditioningMode,
    /// Width of raw condition vectors in `general` mode.
    pub cond_dim: usize,
    /// Width of the encoded condition vectors in `general` mode.
    pub tau_dim: usize,
    pub backbone: Backbone,
    pub readout: Readout,
    pub attention: AttentionOptions,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            hidden: 32,
            depth: 2,
            time_embed_dim: 32,
            ffn_mult: 4,
            conditioning: ConditioningMode::None,
            cond_dim: 1,
            tau_dim: 16,
            backbone: Backbone::EdgeTransformer,
            readout: Readout::VirtualNode,
            attention: AttentionOptions::default(),
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LgdError::Config(m));
        if self.latent_dim == 0 || self.hidden == 0 {
            return bad("latent_dim and hidden must be positive".into());
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return bad("time_embed_dim must be even and positive".into());
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult must be positive".into());
        }
        if self.conditioning == ConditioningMode::General
            && (self.cond_dim == 0 || self.tau_dim == 0)
        {
            return bad("general conditioning needs cond_dim and tau_dim".into());
        }
        if self.backbone == Backbone::Mpnn
            && !matches!(
                self.conditioning,
                ConditioningMode::None | ConditioningMode::Additive
            )
        {
            return bad("the mpnn backbone supports only none or additive conditioning".into());
        }
        self.attention
            .validate(self.hidden)
            .map_err(|e| LgdError::Config(e.to_string()))
    }

    fn cross_layers(&self) -> bool {
        matches!(
            self.conditioning,
            ConditioningMode::General | ConditioningMode::MaskedGraph
        )
    }
}

const NODE_ROLES: usize = 1;
const PAIR_ROLES: usize = 2;

/// Fixed structural flags appended to the latent rows: the virtual node for
/// nodes; self pairs and pairs touching the virtual node for pairs.
fn role_flags(h: &LatentGraph) -> (Tensor, Tensor) {
    let m = h.n();
    let vn = |i: usize| h.virtual_node && i == m - 1;
    let mut nodes = Tensor::zeros(m, NODE_ROLES);
    let mut pairs = Tensor::zeros(m * m, PAIR_ROLES);
    for i in 0..m {
        nodes.set(i, 0, f64::from(u8::from(vn(i))));
        for j in 0..m {
            pairs.set(i * m + j, 0, f64::from(u8::from(i == j)));
            pairs.set(i * m + j, 1, f64::from(u8::from(vn(i) || vn(j))));
        }
    }
    (nodes, pairs)
}

/// What the denoiser is conditioned on.
#[derive(Clone, Debug)]
pub enum Condition {
    None,
    /// Raw condition vectors `[m, cond_dim]`.
    Vectors(Tensor),
    /// Encoder latent of the (masked) condition graph.
    Latent(LatentGraph),
}

pub struct DenoiserInput<'a> {
    pub h: &'a LatentGraph,
    pub t: usize,
    pub condition: &'a Condition,
    /// `false` rows are padding.
    pub node_mask: Option<&'a [bool]>,
    /// `[n*n]` structure for the mpnn backbone.
    pub adjacency: Option<&'a [bool]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BlockKind {
    SelfAttn,
    Cross,
}

struct CrossContext {
    graph: Option<(Var, Var, Var)>,
    tau: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    fn layout(&self) -> Vec<BlockKind> {
        let mut out = Vec::new();
        for _ in 0..self.config.depth {
            if self.config.cross_layers() {
                out.extend([BlockKind::SelfAttn, BlockKind::Cross, BlockKind::SelfAttn]);
            } else {
                out.push(BlockKind::SelfAttn);
            }
        }
        out
    }

    fn self_attn(&self, k: usize) -> EdgeSelfAttention {
        let h = self.config.hidden;
        EdgeSelfAttention::new(
            format!("block{k}.self_attn"),
            h,
            h,
            self.config.attention.clone(),
        )
    }

    fn graph_cross(&self, k: usize) -> GraphCrossAttention {
        let h = self.config.hidden;
        GraphCrossAttention::new(
            format!("block{k}.cross_attn"),
            h,
            h,
            self.config.attention.clone(),
        )
    }

    fn general_cross(&self, k: usize) -> GeneralCrossAttention {
        let h = self.config.hidden;
        GeneralCrossAttention::new(format!("block{k}.cross_attn"), h, self.config.tau_dim, h)
    }

    pub fn init(&self, rng: &mut impl Rng) -> ParamStore {
        let c = &self.config;
        let (d, h) = (c.latent_dim, c.hidden);
        let mut s = ParamStore::new();
        register_linear(
            &mut s,
            "in_node",
            d + NODE_ROLES,
            h,
            true,
            Init::Xavier,
            rng,
        );
        register_linear(
            &mut s,
            "in_edge",
            d + PAIR_ROLES,
            h,
            true,
            Init::Xavier,
            rng,
        );
        register_linear(
            &mut s,
            "time.0",
            c.time_embed_dim,
            h,
            true,
            Init::Xavier,
            rng,
        );
        register_linear(&mut s, "time.1", h, h, true, Init::Xavier, rng);
        match c.conditioning {
            ConditioningMode::MaskedGraph => {
                register_linear(&mut s, "cond_node", d, h, true, Init::Xavier, rng);
                register_linear(&mut s, "cond_edge", d, h, true, Init::Xavier, rng);
            }
            ConditioningMode::General => {
                register_linear(
                    &mut s,
                    "tau.0",
                    c.cond_dim,
                    c.tau_dim,
                    true,
                    Init::Xavier,
                    rng,
                );
                register_linear(
                    &mut s,
                    "tau.1",
                    c.tau_dim,
                    c.tau_dim,
                    true,
                    Init::Xavier,
                    rng,
                );
            }
            _ => {}
        }
        match c.backbone {
            Backbone::EdgeTransformer => {
                for (k, kind) in self.layout().into_iter().enumerate() {
                    let p = format!("block{k}");
                    register_linear(
                        &mut s,
                        &format!("{p}.time_node"),
                        h,
                        h,
                        true,
                        Init::Xavier,
                        rng,
                    );
                    register_linear(
                        &mut s,
                        &format!("{p}.time_edge"),
                        h,
                        h,
                        true,
                        Init::Xavier,
                        rng,
                    );
                    for ln in ["ln1_node", "ln1_edge", "ln2_node", "ln2_edge"] {
                        register_layer_norm(&mut s, &format!("{p}.{ln}"), h, rng);
                    }
                    match (kind, c.conditioning) {
                        (BlockKind::SelfAttn, _) => self.self_attn(k).register(&mut s, rng),
                        (BlockKind::Cross, ConditioningMode::General) => {
                            self.general_cross(k).register(&mut s, rng)
                        }
                        (BlockKind::Cross, _) => self.graph_cross(k).register(&mut s, rng),
                    }
                    register_linear(
                        &mut s,
                        &format!("{p}.out_node"),
                        h,
                        h,
                        true,
                        Init::Zeros,
                        rng,
                    );
                    register_linear(
                        &mut s,
                        &format!("{p}.out_edge"),
                        h,
                        h,
                        true,
                        Init::Zeros,
                        rng,
                    );
                    register_ffn(
                        &mut s,
                        &format!("{p}.ffn_node"),
                        h,
                        c.ffn_mult * h,
                        true,
                        rng,
                    );
                    register_ffn(
                        &mut s,
                        &format!("{p}.ffn_edge"),
                        h,
                        c.ffn_mult * h,
                        true,
                        rng,
                    );
                }
            }
            Backbone::Mpnn => mpnn::register(&mut s, h, rng),
        }
        register_layer_norm(&mut s, "final_ln_node", h, rng);
        register_layer_norm(&mut s, "final_ln_edge", h, rng);
        register_linear(&mut s, "out_node", h, d, true, Init::Xavier, rng);
        register_linear(&mut s, "out_edge", h, d, true, Init::Xavier, rng);
        s
    }

    fn check(&self, input: &DenoiserInput) -> Result<()> {
        let c = &self.config;
        let h = input.h;
        if h.dim() != c.latent_dim {
            return Err(LgdError::Config(format!(
                "latent width {} does not match denoiser latent_dim {}",
                h.dim(),
                c.latent_dim
            )));
        }
        if let Some(m) = input.node_mask {
            if m.len() != h.n() {
                return Err(invalid("node mask length differs from node count"));
            }
        }
        match (c.conditioning, input.condition) {
            (ConditioningMode::None, Condition::None) => {}
            (ConditioningMode::General, Condition::Vectors(v)) => {
                if v.rows == 0 || v.cols != c.cond_dim {
                    return Err(invalid(format!(
                        "condition vectors {:?} vs cond_dim {}",
                        v.shape(),
                        c.cond_dim
                    )));
                }
            }
            (ConditioningMode::MaskedGraph | ConditioningMode::Additive, Condition::Latent(l)) => {
                if !l.same_shape(h) {
                    return Err(invalid(
                        "condition latent must match the noisy latent's shape",
                    ));
                }
            }
            (mode, _) => {
                return Err(invalid(format!(
                    "condition does not match {mode:?} conditioning"
                )))
            }
        }
        if c.backbone == Backbone::Mpnn && input.adjacency.map(|a| a.len()) != Some(h.n() * h.n()) {
            return Err(invalid("the mpnn backbone needs an n*n adjacency"));
        }
        Ok(())
    }

    /// Tape forward; returns the predicted `(Z, W)`.
    pub fn forward(&self, b: &mut Binder, input: &DenoiserInput) -> Result<(Var, Var)> {
        self.check(input)?;
        let c = &self.config;
        let mask = input.node_mask;
        let (node_roles, pair_roles) = role_flags(input.h);
        let z = b.constant(input.h.z.concat_cols(&node_roles));
        let w = b.constant(input.h.w.concat_cols(&pair_roles));
        let x = linear(b, z, "in_node");
        let e = linear(b, w, "in_edge");
        let temb = b.constant(super::sinusoidal_embedding(input.t, c.time_embed_dim)?);
        let temb = linear(b, temb, "time.0");
        let temb = b.tape.relu(temb);
        let temb = linear(b, temb, "time.1");

        let (x, e) = match c.backbone {
            Backbone::EdgeTransformer => {
                let ctx = self.cross_context(b, input)?;
                let (mut x, mut e) = (x, e);
                for (k, kind) in self.layout().into_iter().enumerate() {
                    (x, e) = self.block(b, k, kind, x, e, temb, &ctx, mask)?;
                }
                (x, e)
            }
            Backbone::Mpnn => {
                let adjacency = input.adjacency.expect("checked");
                (mpnn::forward(b, x, e, temb, adjacency, mask), e)
            }
        };
        let x = layer_norm(b, x, "final_ln_node");
        let e = layer_norm(b, e, "final_ln_edge");
        let mut out_z = linear(b, x, "out_node");
        let out_w = linear(b, e, "out_edge");
        let mut out_w = symmetrize_pairs(b, out_w, input.h.n());
        if c.conditioning == ConditioningMode::Additive {
            if let Condition::Latent(l) = input.condition {
                let cz = b.constant(l.z.clone());
                let cw = b.constant(l.w.clone());
                out_z = b.tape.add(out_z, cz);
                out_w = b.tape.add(out_w, cw);
            }
        }
        Ok((out_z, out_w))
    }

    fn cross_context(&self, b: &mut Binder, input: &DenoiserInput) -> Result<CrossContext> {
        let mut ctx = CrossContext {
            graph: None,
            tau: None,
        };
        match (self.config.conditioning, input.condition) {
            (ConditioningMode::MaskedGraph, Condition::Latent(l)) => {
                let zc = b.constant(l.z.clone());
                let wc = b.constant(l.w.clone());
                let xc = linear(b, zc, "cond_node");
                let ec = linear(b, wc, "cond_edge");
                let gc = match self.config.readout {
                    Readout::VirtualNode => {
                        if !l.virtual_node {
                            return Err(LgdError::Config(
                                "virtual-node readout needs a virtual node".into(),
                            ));
                        }
                        b.tape.gather_rows(xc, vec![l.n() - 1])
                    }
                    Readout::Mean | Readout::Sum => {
                        let weights = pool_weights(
                            l.n(),
                            input.node_mask,
                            self.config.readout == Readout::Mean,
                        );
                        b.tape.weighted_row_sum(xc, weights)
                    }
                };
                ctx.graph = Some((xc, ec, gc));
            }
            (ConditioningMode::General, Condition::Vectors(v)) => {
                let y = b.constant(v.clone());
                let t = linear(b, y, "tau.0");
                let t = b.tape.relu(t);
                ctx.tau = Some(linear(b, t, "tau.1"));
            }
            _ => {}
        }
        Ok(ctx)
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        b: &mut Binder,
        k: usize,
        kind: BlockKind,
        x: Var,
        e: Var,
        temb: Var,
        ctx: &CrossContext,
        mask: Option<&[bool]>,
    ) -> Result<(Var, Var)> {
        let p = format!("block{k}");
        let tn = linear(b, temb, &format!("{p}.time_node"));
        let te = linear(b, temb, &format!("{p}.time_edge"));
        let x = b.tape.add_row(x, tn);
        let e = b.tape.add_row(e, te);
        let xn = layer_norm(b, x, &format!("{p}.ln1_node"));
        let en = layer_norm(b, e, &format!("{p}.ln1_edge"));
        let (ax, ae) = match kind {
            BlockKind::SelfAttn => self.self_attn(k).forward(b, xn, en, mask)?,
            BlockKind::Cross => match (ctx.graph, ctx.tau) {
                (Some((xc, ec, gc)), _) => {
                    self.graph_cross(k).forward(b, xn, en, xc, ec, gc, mask)?
                }
                (None, Some(tau)) => self.general_cross(k).forward(b, xn, en, tau)?,
                (None, None) => return Err(invalid("cross-attention block without a condition")),
            },
        };
        let ox = linear(b, ax, &format!("{p}.out_node"));
        let oe = linear(b, ae, &format!("{p}.out_edge"));
        let x = b.tape.add(x, ox);
        let e = b.tape.add(e, oe);
        let xn = layer_norm(b, x, &format!("{p}.ln2_node"));
        let en = layer_norm(b, e, &format!("{p}.ln2_edge"));
        let fx = ffn(b, xn, &format!("{p}.ffn_node"));
        let fe = ffn(b, en, &format!("{p}.ffn_edge"));
        Ok((b.tape.add(x, fx), b.tape.add(e, fe)))
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, params: &ParamStore, input: &DenoiserInput) -> Result<LatentGraph> {
        let mut b = Binder::new(params, false);
        let (z, w) = self.forward(&mut b, input)?;
        Ok(LatentGraph {
            z: b.value(z).clone(),
            w: b.value(w).clone(),
            virtual_node: input.h.virtual_node,
        })
    }
}
