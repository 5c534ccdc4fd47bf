//! Graph encoder into `H = (Z, W)` and single-linear-layer decoder heads.
//!
//! Encoder inputs per node are `x_i ++ [masked]`; per pair they are
//! `onehot(a_type) ++ a_feat ++ [masked]`. With a virtual node, row `n` of
//! the latent carries the graph attribute: its input is the normalized `g`
//! (zeros when masked) `++ [masked]`, and its pairs use two learned vectors.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::autograd::Var;
use crate::error::{invalid, LgdError, Result};
use crate::graph::{mask_graph, Graph, MaskTargets, MaskedGraph, NO_EDGE};
use crate::latent::symmetric_pair_noise;
use crate::latent::LatentGraph;
use crate::nn::attention::{AttentionOptions, EdgeSelfAttention};
use crate::nn::denoiser::{Backbone, Readout};
use crate::nn::{
    ffn, layer_norm, linear, mpnn, pool_weights, register_ffn, register_layer_norm,
    register_linear, symmetrize_pairs,
};
use crate::params::{Adam, Binder, Init, OptimizerConfig, ParamGrads, ParamStore};
use crate::tensor::Tensor;
use rand::SeedableRng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regularization {
    None,
    Kl,
    Vq,
    #[default]
    LatentLayernorm,
}

/// Optional reconstruction tasks beyond nodes-from-Z and edges-from-W.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconTasks {
    /// `e_ij` from `Z_i ++ Z_j`.
    pub pair_to_edge: bool,
    /// `x_i` from the mean of row `W_i.`.
    pub edge_row_to_node: bool,
    /// `(x_i, x_j)` from `W_ij`.
    pub edge_to_pair: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub backbone: Backbone,
    pub depth: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    pub ffn_mult: usize,
    pub regularization: Regularization,
    pub kl_weight: f64,
    pub codebook_size: usize,
    pub commitment: f64,
    pub label_mask_prob: f64,
    pub virtual_node: bool,
    pub readout: Readout,
    pub tasks: ReconTasks,
    pub attention: AttentionOptions,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::EdgeTransformer,
            depth: 2,
            hidden: 32,
            latent_dim: 8,
            ffn_mult: 2,
            regularization: Regularization::LatentLayernorm,
            kl_weight: 1e-5,
            codebook_size: 64,
            commitment: 0.25,
            label_mask_prob: 0.5,
            virtual_node: true,
            readout: Readout::VirtualNode,
            tasks: ReconTasks::default(),
            attention: AttentionOptions::default(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LgdError::Config(m.to_string()));
        if self.latent_dim == 0 || self.hidden == 0 || self.ffn_mult == 0 {
            return bad("latent_dim, hidden and ffn_mult must be positive");
        }
        if !(0.0..=1.0).contains(&self.label_mask_prob) {
            return bad("label_mask_prob must lie in [0, 1]");
        }
        if self.readout == Readout::VirtualNode && !self.virtual_node {
            return bad("virtual-node readout needs virtual_node = true");
        }
        if self.regularization == Regularization::Vq && self.codebook_size == 0 {
            return bad("vq regularization needs a codebook");
        }
        if self.kl_weight < 0.0 || self.commitment < 0.0 {
            return bad("regularization weights must be non-negative");
        }
        self.attention
            .validate(self.hidden)
            .map_err(|e| LgdError::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(LgdError::Config("batch_size must be positive".into()));
        }
        self.optimizer.validate()
    }
}

/// Dataset-level shapes, vocabularies and label statistics fixed at
/// pretraining time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataMeta {
    pub node_vocab: Vec<String>,
    pub edge_vocab: Vec<String>,
    pub node_dim: usize,
    pub edge_feat_dim: usize,
    pub graph_dim: usize,
    pub label_mean: Vec<f64>,
    pub label_std: Vec<f64>,
}

impl DataMeta {
    pub fn from_graphs(graphs: &[Graph]) -> Result<Self> {
        let first = graphs.first().ok_or_else(|| invalid("dataset is empty"))?;
        let mut meta = DataMeta {
            node_vocab: first.node_vocab.clone(),
            edge_vocab: first.edge_vocab.clone(),
            node_dim: first.d_v(),
            edge_feat_dim: first.a_feat.as_ref().map_or(0, |f| f.cols),
            graph_dim: first.g.len(),
            label_mean: vec![],
            label_std: vec![],
        };
        for g in graphs {
            meta.check(g)?;
        }
        let d = meta.graph_dim;
        let count = graphs.len() as f64;
        meta.label_mean = (0..d)
            .map(|k| graphs.iter().map(|g| g.g[k]).sum::<f64>() / count)
            .collect();
        meta.label_std = (0..d)
            .map(|k| {
                let m = meta.label_mean[k];
                let var = graphs.iter().map(|g| (g.g[k] - m).powi(2)).sum::<f64>() / count;
                if var.sqrt() > 1e-8 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(meta)
    }

    pub fn check(&self, g: &Graph) -> Result<()> {
        if g.node_vocab != self.node_vocab || g.edge_vocab != self.edge_vocab {
            return Err(invalid(
                "graph vocabularies differ from the training vocabularies",
            ));
        }
        if g.d_v() != self.node_dim
            || g.a_feat.as_ref().map_or(0, |f| f.cols) != self.edge_feat_dim
            || g.g.len() != self.graph_dim
        {
            return Err(invalid(
                "graph feature widths differ from the training data",
            ));
        }
        Ok(())
    }

    pub fn categorical_nodes(&self) -> bool {
        !self.node_vocab.is_empty()
    }

    pub fn edge_classes(&self) -> usize {
        self.edge_vocab.len()
    }

    pub fn normalize_label(&self, g: &[f64]) -> Vec<f64> {
        g.iter()
            .enumerate()
            .map(|(k, v)| (v - self.label_mean[k]) / self.label_std[k])
            .collect()
    }

    pub fn denormalize_label(&self, g: &[f64]) -> Vec<f64> {
        g.iter()
            .enumerate()
            .map(|(k, v)| v * self.label_std[k] + self.label_mean[k])
            .collect()
    }
}

/// Tape handles for an encoded graph. `z` / `w` include the virtual node.
pub struct Encoded {
    pub z: Var,
    pub w: Var,
    pub reg: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub config: EncoderConfig,
    pub meta: DataMeta,
}

fn mse(b: &mut Binder, pred: Var, target: Tensor) -> Var {
    let count = target.data.len().max(1) as f64;
    let t = b.constant(target);
    let d = b.tape.sub(pred, t);
    let sq = b.tape.mul(d, d);
    let s = b.tape.sum_all(sq);
    b.tape.scale(s, 1.0 / count)
}

fn argmax_excluding(row: &[f64], skip: Option<usize>) -> usize {
    let mut best = None;
    for (k, &v) in row.iter().enumerate() {
        if Some(k) == skip {
            continue;
        }
        match best {
            Some((_, bv)) if bv >= v => {}
            _ => best = Some((k, v)),
        }
    }
    best.map_or(0, |(k, _)| k)
}

/// Row indices into `[pairs ++ vnode_edge ++ vnode_self]` laying out the
/// `(n+1)^2` pair stream with the virtual node last.
fn virtual_pair_index(n: usize) -> Vec<usize> {
    let m = n + 1;
    let mut idx = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            idx.push(match (i == n, j == n) {
                (false, false) => i * n + j,
                (true, true) => n * n + 1,
                _ => n * n,
            });
        }
    }
    idx
}

fn real_pair_index(n: usize, total: usize) -> Vec<usize> {
    (0..n)
        .flat_map(|i| (0..n).map(move |j| i * total + j))
        .collect()
}

impl Autoencoder {
    pub fn new(config: EncoderConfig, meta: DataMeta) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, meta })
    }

    fn node_in(&self) -> usize {
        self.meta.node_dim + 1
    }

    fn edge_in(&self) -> usize {
        self.meta.edge_classes() + self.meta.edge_feat_dim + 1
    }

    fn node_out(&self) -> usize {
        self.meta.node_dim
    }

    fn attn(&self, k: usize) -> EdgeSelfAttention {
        let h = self.config.hidden;
        EdgeSelfAttention::new(
            format!("enc{k}.self_attn"),
            h,
            h,
            self.config.attention.clone(),
        )
    }

    pub fn init(&self, rng: &mut impl Rng) -> ParamStore {
        let c = &self.config;
        let (h, d) = (c.hidden, c.latent_dim);
        let mut s = ParamStore::new();
        register_linear(
            &mut s,
            "embed_node",
            self.node_in(),
            h,
            true,
            Init::Xavier,
            rng,
        );
        register_linear(
            &mut s,
            "embed_edge",
            self.edge_in(),
            h,
            true,
            Init::Xavier,
            rng,
        );
        if c.virtual_node {
            register_linear(
                &mut s,
                "embed_vnode",
                self.meta.graph_dim + 1,
                h,
                true,
                Init::Xavier,
                rng,
            );
            s.init("vnode_edge", 1, h, Init::Xavier, rng);
            s.init("vnode_self", 1, h, Init::Xavier, rng);
        }
        match c.backbone {
            Backbone::EdgeTransformer => {
                for k in 0..c.depth {
                    let p = format!("enc{k}");
                    for ln in ["ln1_node", "ln1_edge", "ln2_node", "ln2_edge"] {
                        register_layer_norm(&mut s, &format!("{p}.{ln}"), h, rng);
                    }
                    self.attn(k).register(&mut s, rng);
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
        register_linear(&mut s, "latent_node", h, d, true, Init::Xavier, rng);
        register_linear(&mut s, "latent_edge", h, d, true, Init::Xavier, rng);
        match c.regularization {
            Regularization::Kl => {
                register_linear(&mut s, "logvar_node", h, d, true, Init::Zeros, rng);
                register_linear(&mut s, "logvar_edge", h, d, true, Init::Zeros, rng);
            }
            Regularization::Vq => s.init("codebook", c.codebook_size, d, Init::Xavier, rng),
            _ => {}
        }
        register_linear(
            &mut s,
            "head_node",
            d,
            self.node_out(),
            true,
            Init::Xavier,
            rng,
        );
        register_linear(
            &mut s,
            "head_edge",
            d,
            self.meta.edge_classes(),
            true,
            Init::Xavier,
            rng,
        );
        if self.meta.edge_feat_dim > 0 {
            register_linear(
                &mut s,
                "head_edge_feat",
                d,
                self.meta.edge_feat_dim,
                true,
                Init::Xavier,
                rng,
            );
        }
        if self.meta.graph_dim > 0 {
            register_linear(
                &mut s,
                "head_graph",
                d,
                self.meta.graph_dim,
                true,
                Init::Xavier,
                rng,
            );
        }
        if c.tasks.pair_to_edge {
            register_linear(
                &mut s,
                "head_pair_edge",
                2 * d,
                self.meta.edge_classes(),
                true,
                Init::Xavier,
                rng,
            );
        }
        if c.tasks.edge_row_to_node {
            register_linear(
                &mut s,
                "head_row_node",
                d,
                self.node_out(),
                true,
                Init::Xavier,
                rng,
            );
        }
        if c.tasks.edge_to_pair {
            register_linear(
                &mut s,
                "head_edge_pair.src",
                d,
                self.node_out(),
                true,
                Init::Xavier,
                rng,
            );
            register_linear(
                &mut s,
                "head_edge_pair.dst",
                d,
                self.node_out(),
                true,
                Init::Xavier,
                rng,
            );
        }
        s
    }

    fn input_tensors(&self, mg: &MaskedGraph) -> (Tensor, Tensor, Option<Tensor>) {
        let g = &mg.base;
        let n = g.n;
        let mut nodes = Tensor::zeros(n, self.node_in());
        for i in 0..n {
            let row = nodes.row_mut(i);
            row[..self.meta.node_dim].copy_from_slice(g.x.row(i));
            row[self.meta.node_dim] = f64::from(u8::from(mg.node_mask[i]));
        }
        let feats = g.edge_features();
        let mut edges = Tensor::zeros(n * n, self.edge_in());
        for r in 0..n * n {
            let row = edges.row_mut(r);
            row[..feats.cols].copy_from_slice(feats.row(r));
            row[feats.cols] = f64::from(u8::from(mg.edge_mask[r]));
        }
        let vnode = self.config.virtual_node.then(|| {
            let mut v = Tensor::zeros(1, self.meta.graph_dim + 1);
            if !mg.graph_mask {
                let normed = self.meta.normalize_label(&g.g);
                v.data[..self.meta.graph_dim].copy_from_slice(&normed);
            }
            v.data[self.meta.graph_dim] = f64::from(u8::from(mg.graph_mask));
            v
        });
        (nodes, edges, vnode)
    }

    /// Builds the encoder on the tape. `noise` draws the KL posterior sample
    /// during training; without it the posterior mean is returned.
    pub fn encode_vars(
        &self,
        b: &mut Binder,
        mg: &MaskedGraph,
        noise: Option<&mut ChaCha8Rng>,
    ) -> Result<Encoded> {
        self.meta.check(&mg.base)?;
        let c = &self.config;
        let n = mg.base.n;
        let (nodes, edges, vnode) = self.input_tensors(mg);
        let nv = b.constant(nodes);
        let ev = b.constant(edges);
        let mut x = linear(b, nv, "embed_node");
        let mut e = linear(b, ev, "embed_edge");
        if let Some(v) = vnode {
            let vv = b.constant(v);
            let vx = linear(b, vv, "embed_vnode");
            x = b.tape.concat_rows(x, vx);
            let ve = b.p("vnode_edge");
            let vs = b.p("vnode_self");
            let stacked = b.tape.concat_rows(e, ve);
            let stacked = b.tape.concat_rows(stacked, vs);
            e = b.tape.gather_rows(stacked, virtual_pair_index(n));
        }
        let total = n + usize::from(c.virtual_node);
        match c.backbone {
            Backbone::EdgeTransformer => {
                for k in 0..c.depth {
                    (x, e) = self.block(b, k, x, e)?;
                }
            }
            Backbone::Mpnn => {
                let mut adjacency = vec![false; total * total];
                for i in 0..total {
                    for j in 0..total {
                        adjacency[i * total + j] = if i < n && j < n {
                            let t = mg.base.edge(i, j);
                            t != NO_EDGE && t != mg.base.edge_mask_id()
                        } else {
                            true
                        };
                    }
                }
                let temb = b.constant(Tensor::zeros(1, c.hidden));
                x = mpnn::forward(b, x, e, temb, &adjacency, None);
            }
        }
        let z = linear(b, x, "latent_node");
        let w = linear(b, e, "latent_edge");
        let w = symmetrize_pairs(b, w, total);
        Ok(match c.regularization {
            Regularization::None => Encoded { z, w, reg: None },
            Regularization::LatentLayernorm => Encoded {
                z: b.tape.layer_norm(z, crate::nn::LN_EPS),
                w: b.tape.layer_norm(w, crate::nn::LN_EPS),
                reg: None,
            },
            Regularization::Kl => {
                let lz = linear(b, x, "logvar_node");
                let lw = linear(b, e, "logvar_edge");
                let lw = symmetrize_pairs(b, lw, total);
                let kl_z = kl_term(b, z, lz);
                let kl_w = kl_term(b, w, lw);
                let kl = b.tape.add(kl_z, kl_w);
                let reg = Some(b.tape.scale(kl, c.kl_weight));
                match noise {
                    Some(rng) => {
                        let z = reparameterize(b, z, lz, false, rng);
                        let w = reparameterize(b, w, lw, true, rng);
                        Encoded { z, w, reg }
                    }
                    None => Encoded { z, w, reg },
                }
            }
            Regularization::Vq => {
                let (z, rz) = self.quantize(b, z);
                let (w, rw) = self.quantize(b, w);
                Encoded {
                    z,
                    w,
                    reg: Some(b.tape.add(rz, rw)),
                }
            }
        })
    }

    fn block(&self, b: &mut Binder, k: usize, x: Var, e: Var) -> Result<(Var, Var)> {
        let p = format!("enc{k}");
        let xn = layer_norm(b, x, &format!("{p}.ln1_node"));
        let en = layer_norm(b, e, &format!("{p}.ln1_edge"));
        let (ax, ae) = self.attn(k).forward(b, xn, en, None)?;
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

    /// Nearest-codeword lookup with a straight-through gradient; returns the
    /// quantized latents and `|sg(z) - q|^2 + beta |z - sg(q)|^2` (means).
    fn quantize(&self, b: &mut Binder, z: Var) -> (Var, Var) {
        let book = b.p("codebook");
        let zv = b.value(z).clone();
        let codes = b.value(book).clone();
        let idx: Vec<usize> = (0..zv.rows)
            .map(|r| nearest_code(zv.row(r), &codes))
            .collect();
        let q = b.tape.gather_rows(book, idx);
        let qv = b.value(q).clone();
        let codebook_loss = mse(b, q, zv.clone());
        let commit = mse(b, z, qv.clone());
        let commit = b.tape.scale(commit, self.config.commitment);
        let reg = b.tape.add(codebook_loss, commit);
        let shift = b.constant(qv.zip_map(&zv, |a, c| a - c));
        (b.tape.add(z, shift), reg)
    }

    /// Deterministic encoding (posterior mean for KL, codewords for VQ).
    pub fn encode(&self, params: &ParamStore, mg: &MaskedGraph) -> Result<LatentGraph> {
        let mut b = Binder::new(params, false);
        let enc = self.encode_vars(&mut b, mg, None)?;
        LatentGraph::new(
            b.value(enc.z).clone(),
            b.value(enc.w).clone(),
            self.config.virtual_node,
        )
    }

    pub fn encode_graph(&self, params: &ParamStore, g: &Graph) -> Result<LatentGraph> {
        self.encode(params, &MaskedGraph::unmasked(g))
    }

    fn real_rows(&self, b: &mut Binder, z: Var, w: Var, n: usize) -> (Var, Var) {
        if !self.config.virtual_node {
            return (z, w);
        }
        let zr = b.tape.gather_rows(z, (0..n).collect());
        let wr = b.tape.gather_rows(w, real_pair_index(n, n + 1));
        (zr, wr)
    }

    fn readout(&self, b: &mut Binder, z: Var, n: usize) -> Var {
        match self.config.readout {
            Readout::VirtualNode => b.tape.gather_rows(z, vec![n]),
            Readout::Mean | Readout::Sum => {
                let total = b.value(z).rows;
                let mask: Vec<bool> = (0..total).map(|i| i < n).collect();
                let weights =
                    pool_weights(total, Some(&mask), self.config.readout == Readout::Mean);
                b.tape.weighted_row_sum(z, weights)
            }
        }
    }

    /// Normalized graph-head output for a latent on the tape.
    pub fn graph_head(&self, b: &mut Binder, z: Var, n: usize) -> Var {
        let r = self.readout(b, z, n);
        linear(b, r, "head_graph")
    }

    /// Reconstruction losses of `target` from latents on the tape, keyed by
    /// task name. Categorical targets use mean cross-entropy, real ones MSE.
    pub fn reconstruction_losses(
        &self,
        b: &mut Binder,
        target: &Graph,
        z: Var,
        w: Var,
    ) -> BTreeMap<&'static str, Var> {
        let n = target.n;
        let (zr, wr) = self.real_rows(b, z, w, n);
        let mut out = BTreeMap::new();
        let node_pred = linear(b, zr, "head_node");
        out.insert("node", self.node_loss(b, target, node_pred));
        let edge_logits = linear(b, wr, "head_edge");
        let edge_targets: Vec<Option<usize>> = target.a_type.iter().map(|&t| Some(t)).collect();
        let ce = b.tape.cross_entropy(edge_logits, edge_targets.clone());
        out.insert("edge", b.tape.scale(ce, 1.0 / (n * n) as f64));
        if let Some(feat) = &target.a_feat {
            let pred = linear(b, wr, "head_edge_feat");
            out.insert("edge_feat", mse(b, pred, feat.clone()));
        }
        if self.meta.graph_dim > 0 {
            let pred = self.graph_head(b, z, n);
            let t = Tensor::from_vec(1, self.meta.graph_dim, self.meta.normalize_label(&target.g))
                .expect("sized");
            out.insert("graph", mse(b, pred, t));
        }
        if self.config.tasks.pair_to_edge {
            let zi = b.tape.pair_rows(zr);
            let zj = b.tape.pair_cols(zr);
            let pair = b.tape.concat_cols(zi, zj);
            let logits = linear(b, pair, "head_pair_edge");
            let ce = b.tape.cross_entropy(logits, edge_targets);
            out.insert("pair_to_edge", b.tape.scale(ce, 1.0 / (n * n) as f64));
        }
        if self.config.tasks.edge_row_to_node {
            let avg = b.constant(Tensor::filled(n * n, 1, 1.0 / n as f64));
            let rows = b.tape.pair_aggregate(avg, wr);
            let pred = linear(b, rows, "head_row_node");
            out.insert("edge_row_to_node", self.node_loss(b, target, pred));
        }
        if self.config.tasks.edge_to_pair {
            let src = linear(b, wr, "head_edge_pair.src");
            let dst = linear(b, wr, "head_edge_pair.dst");
            let src_idx: Vec<usize> = (0..n * n).map(|r| r / n).collect();
            let dst_idx: Vec<usize> = (0..n * n).map(|r| r % n).collect();
            let ls = self.node_loss_indexed(b, target, src, &src_idx);
            let ld = self.node_loss_indexed(b, target, dst, &dst_idx);
            out.insert("edge_to_pair", b.tape.add(ls, ld));
        }
        out
    }

    fn node_loss(&self, b: &mut Binder, target: &Graph, pred: Var) -> Var {
        let idx: Vec<usize> = (0..target.n).collect();
        self.node_loss_indexed(b, target, pred, &idx)
    }

    /// Row `r` of `pred` predicts node `idx[r]`.
    fn node_loss_indexed(&self, b: &mut Binder, target: &Graph, pred: Var, idx: &[usize]) -> Var {
        if self.meta.categorical_nodes() {
            let t: Vec<Option<usize>> = idx.iter().map(|&i| target.node_category(i)).collect();
            let ce = b.tape.cross_entropy(pred, t);
            b.tape.scale(ce, 1.0 / idx.len() as f64)
        } else {
            mse(b, pred, target.x.gather_rows(idx))
        }
    }

    /// Total training objective for one example: reconstruction of
    /// `target` from the encoding of `input`, plus regularization.
    pub fn loss(
        &self,
        b: &mut Binder,
        input: &MaskedGraph,
        target: &Graph,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let enc = self.encode_vars(b, input, Some(rng))?;
        let losses = self.reconstruction_losses(b, target, enc.z, enc.w);
        let mut total = None;
        for (_, v) in losses {
            total = Some(match total {
                None => v,
                Some(t) => b.tape.add(t, v),
            });
        }
        let mut total = total.expect("node and edge losses always present");
        if let Some(r) = enc.reg {
            total = b.tape.add(total, r);
        }
        Ok(total)
    }

    /// Denormalized graph-level prediction from a latent.
    pub fn predict_graph(&self, params: &ParamStore, h: &LatentGraph) -> Result<Vec<f64>> {
        if self.meta.graph_dim == 0 {
            return Err(LgdError::Config("the autoencoder has no graph head".into()));
        }
        self.check_latent(h)?;
        let mut b = Binder::new(params, false);
        let z = b.constant(h.z.clone());
        let out = self.graph_head(&mut b, z, h.real_nodes());
        Ok(self.meta.denormalize_label(&b.value(out).data))
    }

    fn check_latent(&self, h: &LatentGraph) -> Result<()> {
        if h.dim() != self.config.latent_dim || h.virtual_node != self.config.virtual_node {
            return Err(LgdError::Config(
                "latent does not match the autoencoder's latent layout".into(),
            ));
        }
        Ok(())
    }

    /// Node head outputs `[n, d_v]` (logits or values) and symmetrized edge
    /// logits `[n*n, classes]` for the real nodes of `h`.
    pub fn head_outputs(&self, params: &ParamStore, h: &LatentGraph) -> Result<(Tensor, Tensor)> {
        self.check_latent(h)?;
        let n = h.real_nodes();
        let mut b = Binder::new(params, false);
        let z = b.constant(h.z.clone());
        let w = b.constant(h.w.clone());
        let (zr, wr) = self.real_rows(&mut b, z, w, n);
        let nodes = linear(&mut b, zr, "head_node");
        let edges = linear(&mut b, wr, "head_edge");
        let edges = b.value(edges);
        let mut sym = edges.clone();
        for i in 0..n {
            for j in 0..n {
                for c in 0..edges.cols {
                    sym.set(
                        i * n + j,
                        c,
                        0.5 * (edges.get(i * n + j, c) + edges.get(j * n + i, c)),
                    );
                }
            }
        }
        Ok((b.value(nodes).clone(), sym))
    }

    /// Decodes a latent to a graph: argmax categories (never the MASK id),
    /// symmetrized edges, no self-loops.
    pub fn decode(&self, params: &ParamStore, h: &LatentGraph) -> Result<Graph> {
        let n = h.real_nodes();
        let (nodes, edges) = self.head_outputs(params, h)?;
        let edge_mask = self.meta.edge_vocab.len() - 1;
        let mut a_type = vec![NO_EDGE; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    a_type[i * n + j] = argmax_excluding(edges.row(i * n + j), Some(edge_mask));
                }
            }
        }
        let x = if self.meta.categorical_nodes() {
            let mask_id = self.meta.node_vocab.len() - 1;
            let mut x = Tensor::zeros(n, self.meta.node_dim);
            for i in 0..n {
                x.set(i, argmax_excluding(nodes.row(i), Some(mask_id)), 1.0);
            }
            x
        } else {
            nodes
        };
        let a_feat = if self.meta.edge_feat_dim > 0 {
            let mut b = Binder::new(params, false);
            let w = b.constant(h.w.clone());
            let z = b.constant(h.z.clone());
            let (_, wr) = self.real_rows(&mut b, z, w, n);
            let f = linear(&mut b, wr, "head_edge_feat");
            let f = b.value(f);
            let mut sym = f.clone();
            for i in 0..n {
                for j in 0..n {
                    for c in 0..f.cols {
                        sym.set(
                            i * n + j,
                            c,
                            0.5 * (f.get(i * n + j, c) + f.get(j * n + i, c)),
                        );
                    }
                }
            }
            Some(sym)
        } else {
            None
        };
        let g = if self.meta.graph_dim > 0 {
            self.predict_graph(params, h)?
        } else {
            vec![]
        };
        Graph::new(
            x,
            a_type,
            a_feat,
            g,
            self.meta.node_vocab.clone(),
            self.meta.edge_vocab.clone(),
        )
    }
}

fn nearest_code(v: &[f64], codes: &Tensor) -> usize {
    let mut best = (0, f64::INFINITY);
    for k in 0..codes.rows {
        let d: f64 = codes
            .row(k)
            .iter()
            .zip(v)
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// Mean over rows of `0.5 * sum(mu^2 + exp(lv) - 1 - lv)`.
fn kl_term(b: &mut Binder, mu: Var, logvar: Var) -> Var {
    let rows = b.value(mu).rows.max(1) as f64;
    let mu2 = b.tape.mul(mu, mu);
    let var = b.tape.exp(logvar);
    let s = b.tape.add(mu2, var);
    let s = b.tape.sub(s, logvar);
    let total = b.tape.sum_all(s);
    let cols = b.value(mu).cols as f64;
    let total = b.tape.scale(total, 0.5 / rows);
    let offset = b.constant(Tensor::filled(1, 1, -0.5 * cols));
    b.tape.add(total, offset)
}

/// Gaussian KL of a diagonal posterior against the standard normal, averaged
/// over vectors.
pub fn gaussian_kl(mu: &Tensor, logvar: &Tensor) -> f64 {
    let rows = mu.rows.max(1) as f64;
    mu.data
        .iter()
        .zip(&logvar.data)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum::<f64>()
        / rows
}

fn reparameterize(b: &mut Binder, mu: Var, logvar: Var, pairs: bool, rng: &mut ChaCha8Rng) -> Var {
    let (rows, cols) = b.value(mu).shape();
    let eps = if pairs {
        symmetric_pair_noise((rows as f64).sqrt().round() as usize, cols, rng)
    } else {
        Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.sample(StandardNormal))
                .collect(),
        )
        .expect("sized")
    };
    let half = b.tape.scale(logvar, 0.5);
    let std = b.tape.exp(half);
    let eps = b.constant(eps);
    let noise = b.tape.mul(std, eps);
    b.tape.add(mu, noise)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

/// Joint encoder/decoder training with label masking: each drawn example has
/// its graph attribute masked with probability `label_mask_prob`.
pub fn pretrain_autoencoder(
    graphs: &[Graph],
    config: &EncoderConfig,
    training: &TrainingConfig,
    seed: u64,
    quantize_f32: bool,
) -> Result<(Autoencoder, ParamStore, TrainLog)> {
    training.validate()?;
    let meta = DataMeta::from_graphs(graphs)?;
    let ae = Autoencoder::new(config.clone(), meta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ae.init(&mut rng);
    if quantize_f32 {
        params.quantize_f32();
    }
    let mut adam = Adam::new(training.optimizer.clone(), &params);
    let mut log = TrainLog::default();
    let label_mask = MaskTargets::graph_only();
    for step in 0..training.steps {
        let mut grads = ParamGrads::zeros_for(&params);
        let mut total = 0.0;
        for _ in 0..training.batch_size {
            let g = &graphs[rng.gen_range(0..graphs.len())];
            let masked = ae.meta.graph_dim > 0 && rng.gen::<f64>() < config.label_mask_prob;
            let input = if masked {
                mask_graph(g, &label_mask)?
            } else {
                MaskedGraph::unmasked(g)
            };
            let mut b = Binder::new(&params, true);
            let loss = ae.loss(&mut b, &input, g, &mut rng)?;
            total += b.value(loss).data[0];
            grads.add_assign(&b.gradients(loss));
        }
        let inv = 1.0 / training.batch_size as f64;
        grads.scale(inv);
        let mean = total * inv;
        if !mean.is_finite() || !grads.is_finite() {
            return Err(LgdError::Divergence(format!(
                "autoencoder loss became {mean} at step {step}"
            )));
        }
        adam.step(&mut params, &mut grads, training.steps);
        if quantize_f32 {
            params.quantize_f32();
        }
        log.losses.push(mean);
    }
    Ok((ae, params, log))
}
