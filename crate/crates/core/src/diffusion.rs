//! Latent diffusion: training objective, samplers, unconditional generation
//! and prediction as conditional generation of masked graph positions.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{Autoencoder, TrainLog, TrainingConfig};
use crate::autograd::Var;
use crate::error::{invalid, LgdError, Result};
use crate::graph::{mask_graph, Graph, MaskTargets, MaskedGraph, NO_EDGE};
use crate::latent::LatentGraph;
use crate::nn::denoiser::{
    Backbone, Condition, ConditioningMode, Denoiser, DenoiserConfig, DenoiserInput,
};
use crate::params::{Adam, Binder, ParamGrads, ParamStore};
use crate::schedule::{ddim_subsequence, NoiseSchedule, ScheduleSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parameterization {
    #[default]
    X0,
    Eps,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampler {
    Ddpm,
    #[default]
    Ddim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub schedule: ScheduleSpec,
    pub parameterization: Parameterization,
    pub sampler: Sampler,
    pub ddim_steps: usize,
    pub ensemble_k: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleSpec::default(),
            parameterization: Parameterization::X0,
            sampler: Sampler::Ddim,
            ddim_steps: 200,
            ensemble_k: 1,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ensemble_k == 0 {
            return Err(LgdError::Config("ensemble_k must be at least 1".into()));
        }
        if self.sampler == Sampler::Ddim
            && (self.ddim_steps == 0 || self.ddim_steps > self.schedule.steps)
        {
            return Err(LgdError::Config(format!(
                "ddim_steps must lie in [1, {}], got {}",
                self.schedule.steps, self.ddim_steps
            )));
        }
        self.schedule.build().map(|_| ())
    }

    /// Reverse-process step indices, ending at 1.
    pub fn steps(&self) -> Result<Vec<usize>> {
        match self.sampler {
            Sampler::Ddpm => Ok((1..=self.schedule.steps).rev().collect()),
            Sampler::Ddim => ddim_subsequence(self.schedule.steps, self.ddim_steps),
        }
    }
}

/// One training pair for the denoiser: the clean latent and what it is
/// conditioned on.
#[derive(Clone, Debug)]
pub struct DiffusionExample {
    pub h0: LatentGraph,
    pub condition: Condition,
    pub adjacency: Option<Vec<bool>>,
}

pub fn adjacency_of(g: &Graph, virtual_node: bool) -> Vec<bool> {
    let n = g.n;
    let total = n + usize::from(virtual_node);
    let mut adj = vec![false; total * total];
    for i in 0..total {
        for j in 0..total {
            adj[i * total + j] = if i < n && j < n {
                let t = g.edge(i, j);
                t != NO_EDGE && t != g.edge_mask_id()
            } else {
                i != j
            };
        }
    }
    adj
}

/// Encodes a dataset with the frozen autoencoder. Under masked-graph or
/// additive conditioning the condition is the encoding of the graph with
/// `targets` masked; under general conditioning it is the normalized graph
/// attribute as a single condition vector.
pub fn diffusion_examples(
    ae: &Autoencoder,
    ae_params: &ParamStore,
    graphs: &[Graph],
    mode: ConditioningMode,
    targets: &MaskTargets,
) -> Result<Vec<DiffusionExample>> {
    graphs
        .iter()
        .map(|g| {
            let h0 = ae.encode_graph(ae_params, g)?;
            let condition = match mode {
                ConditioningMode::None => Condition::None,
                ConditioningMode::General => {
                    if g.g.is_empty() {
                        return Err(LgdError::Config(
                            "general conditioning needs graph attributes".into(),
                        ));
                    }
                    let y = ae.meta.normalize_label(&g.g);
                    Condition::Vectors(Tensor::from_vec(1, y.len(), y)?)
                }
                ConditioningMode::MaskedGraph | ConditioningMode::Additive => {
                    Condition::Latent(ae.encode(ae_params, &mask_graph(g, targets)?)?)
                }
            };
            Ok(DiffusionExample {
                h0,
                condition,
                adjacency: Some(adjacency_of(g, ae.config.virtual_node)),
            })
        })
        .collect()
}

fn sq_err_mean(b: &mut Binder, pred: Var, target: &Tensor) -> Var {
    let rows = target.rows.max(1) as f64;
    let t = b.constant(target.clone());
    let d = b.tape.sub(pred, t);
    let sq = b.tape.mul(d, d);
    let s = b.tape.sum_all(sq);
    b.tape.scale(s, 1.0 / rows)
}

/// Mean squared-norm error per node plus per pair between the denoiser
/// output and its target (`H_0` or the drawn noise). The mpnn backbone only
/// generates node latents, so its pair term is dropped.
pub fn diffusion_loss(
    b: &mut Binder,
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    parameterization: Parameterization,
    example: &DiffusionExample,
    t: usize,
    eps: &LatentGraph,
) -> Result<Var> {
    let h0 = &example.h0;
    if !eps.same_shape(h0) {
        return Err(invalid("noise shape differs from the latent"));
    }
    let h_t = LatentGraph {
        z: schedule.q_sample(&h0.z, t, &eps.z)?,
        w: schedule.q_sample(&h0.w, t, &eps.w)?,
        virtual_node: h0.virtual_node,
    };
    let input = DenoiserInput {
        h: &h_t,
        t,
        condition: &example.condition,
        node_mask: None,
        adjacency: example.adjacency.as_deref(),
    };
    let (pz, pw) = denoiser.forward(b, &input)?;
    let target = match parameterization {
        Parameterization::X0 => h0,
        Parameterization::Eps => eps,
    };
    let lz = sq_err_mean(b, pz, &target.z);
    if denoiser.config.backbone == Backbone::Mpnn {
        return Ok(lz);
    }
    let lw = sq_err_mean(b, pw, &target.w);
    Ok(b.tape.add(lz, lw))
}

pub fn train_diffusion(
    examples: &[DiffusionExample],
    config: &DenoiserConfig,
    diffusion: &DiffusionConfig,
    training: &TrainingConfig,
    seed: u64,
    quantize_f32: bool,
) -> Result<(Denoiser, ParamStore, TrainLog)> {
    if examples.is_empty() {
        return Err(invalid("no diffusion training examples"));
    }
    training.validate()?;
    diffusion.validate()?;
    let schedule = diffusion.schedule.build()?;
    let denoiser = Denoiser::new(config.clone())?;
    if examples[0].h0.dim() != config.latent_dim {
        return Err(LgdError::Config(format!(
            "encoder latent_dim {} differs from denoiser latent_dim {}",
            examples[0].h0.dim(),
            config.latent_dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = denoiser.init(&mut rng);
    if quantize_f32 {
        params.quantize_f32();
    }
    let mut adam = Adam::new(training.optimizer.clone(), &params);
    let mut log = TrainLog::default();
    for step in 0..training.steps {
        let mut grads = ParamGrads::zeros_for(&params);
        let mut total = 0.0;
        for _ in 0..training.batch_size {
            let ex = &examples[rng.gen_range(0..examples.len())];
            let t = rng.gen_range(1..=schedule.steps());
            let eps = LatentGraph::gaussian(ex.h0.n(), ex.h0.dim(), ex.h0.virtual_node, &mut rng);
            let mut b = Binder::new(&params, true);
            let loss = diffusion_loss(
                &mut b,
                &denoiser,
                &schedule,
                diffusion.parameterization,
                ex,
                t,
                &eps,
            )?;
            total += b.value(loss).data[0];
            grads.add_assign(&b.gradients(loss));
        }
        let inv = 1.0 / training.batch_size as f64;
        grads.scale(inv);
        let mean = total * inv;
        if !mean.is_finite() || !grads.is_finite() {
            return Err(LgdError::Divergence(format!(
                "diffusion loss became {mean} at step {step}"
            )));
        }
        adam.step(&mut params, &mut grads, training.steps);
        if quantize_f32 {
            params.quantize_f32();
        }
        log.losses.push(mean);
    }
    Ok((denoiser, params, log))
}

/// Empirical distribution of training-set node counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeCountSampler {
    pub counts: BTreeMap<usize, usize>,
}

impl NodeCountSampler {
    pub fn from_graphs(graphs: &[Graph]) -> Result<Self> {
        if graphs.is_empty() {
            return Err(invalid(
                "cannot build a node-count histogram from no graphs",
            ));
        }
        let mut counts = BTreeMap::new();
        for g in graphs {
            *counts.entry(g.n).or_insert(0) += 1;
        }
        Ok(Self { counts })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let sizes: Vec<usize> = self.counts.keys().copied().collect();
        let dist = WeightedIndex::new(self.counts.values().copied()).expect("non-empty histogram");
        sizes[dist.sample(rng)]
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum NodeValue {
    Class(usize),
    Values(Vec<f64>),
}

/// Predicted values at the masked positions of a graph.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub graph: Option<Vec<f64>>,
    pub nodes: Vec<(usize, NodeValue)>,
    pub edges: Vec<(usize, usize, usize)>,
}

/// Frozen autoencoder and denoiser with their sampling settings.
pub struct Pipeline<'a> {
    pub ae: &'a Autoencoder,
    pub ae_params: &'a ParamStore,
    pub denoiser: &'a Denoiser,
    pub den_params: &'a ParamStore,
    pub schedule: &'a NoiseSchedule,
    pub config: &'a DiffusionConfig,
}

impl Pipeline<'_> {
    pub fn check(&self) -> Result<()> {
        if self.ae.config.latent_dim != self.denoiser.config.latent_dim {
            return Err(LgdError::Config(format!(
                "autoencoder latent_dim {} differs from denoiser latent_dim {}",
                self.ae.config.latent_dim, self.denoiser.config.latent_dim
            )));
        }
        if self.schedule.spec() != &self.config.schedule {
            return Err(LgdError::Config(
                "schedule differs from the diffusion config".into(),
            ));
        }
        self.config.validate()
    }

    /// Runs the reverse process from `init`. DDPM draws its per-step noise
    /// from `rng`; DDIM is deterministic.
    pub fn sample_from_noise(
        &self,
        init: &LatentGraph,
        condition: &Condition,
        adjacency: Option<&[bool]>,
        rng: &mut impl Rng,
    ) -> Result<LatentGraph> {
        let steps = self.config.steps()?;
        let mut x = init.clone();
        for (k, &t) in steps.iter().enumerate() {
            let t_prev = steps.get(k + 1).copied().unwrap_or(0);
            let pred = self.denoiser.predict(
                self.den_params,
                &DenoiserInput {
                    h: &x,
                    t,
                    condition,
                    node_mask: None,
                    adjacency,
                },
            )?;
            let x0 = match self.config.parameterization {
                Parameterization::X0 => pred,
                Parameterization::Eps => LatentGraph {
                    z: self.schedule.x0_from_eps(&x.z, &pred.z, t)?,
                    w: self.schedule.x0_from_eps(&x.w, &pred.w, t)?,
                    virtual_node: x.virtual_node,
                },
            };
            let sigma = match self.config.sampler {
                Sampler::Ddpm => self.schedule.ddpm_sigma(t)?,
                Sampler::Ddim => 0.0,
            };
            let noise =
                (sigma > 0.0).then(|| LatentGraph::gaussian(x.n(), x.dim(), x.virtual_node, rng));
            x = LatentGraph {
                z: self.schedule.ddim_step(
                    &x.z,
                    &x0.z,
                    t,
                    t_prev,
                    sigma,
                    noise.as_ref().map(|e| &e.z),
                )?,
                w: self.schedule.ddim_step(
                    &x.w,
                    &x0.w,
                    t,
                    t_prev,
                    sigma,
                    noise.as_ref().map(|e| &e.w),
                )?,
                virtual_node: x.virtual_node,
            };
        }
        Ok(x)
    }

    fn fresh_noise(&self, real_nodes: usize, rng: &mut impl Rng) -> LatentGraph {
        let vn = self.ae.config.virtual_node;
        LatentGraph::gaussian(
            real_nodes + usize::from(vn),
            self.ae.config.latent_dim,
            vn,
            rng,
        )
    }

    /// Unconditional generation of `count` graphs with sizes drawn from
    /// `sizes`.
    pub fn generate(
        &self,
        count: usize,
        sizes: &NodeCountSampler,
        rng: &mut impl Rng,
    ) -> Result<Vec<Graph>> {
        self.check()?;
        if self.denoiser.config.conditioning != ConditioningMode::None {
            return Err(LgdError::Config(
                "unconditional generation needs an unconditional denoiser".into(),
            ));
        }
        (0..count)
            .map(|_| {
                let n = sizes.sample(rng);
                let init = self.fresh_noise(n, rng);
                let h = self.sample_from_noise(&init, &Condition::None, None, rng)?;
                self.ae.decode(self.ae_params, &h)
            })
            .collect()
    }

    /// Generation conditioned on property vectors `y` (general mode).
    pub fn generate_conditional(&self, y: &[f64], n: usize, rng: &mut impl Rng) -> Result<Graph> {
        self.check()?;
        let y = self.ae.meta.normalize_label(y);
        let cond = Condition::Vectors(Tensor::from_vec(1, y.len(), y)?);
        let init = self.fresh_noise(n, rng);
        let h = self.sample_from_noise(&init, &cond, None, rng)?;
        self.ae.decode(self.ae_params, &h)
    }

    fn condition_for(&self, masked: &MaskedGraph) -> Result<Condition> {
        match self.denoiser.config.conditioning {
            ConditioningMode::MaskedGraph | ConditioningMode::Additive => {
                Ok(Condition::Latent(self.ae.encode(self.ae_params, masked)?))
            }
            mode => Err(LgdError::Config(format!(
                "prediction needs masked-graph or additive conditioning, not {mode:?}"
            ))),
        }
    }

    /// Predicts the masked positions with `ensemble_k` fresh noise draws.
    pub fn predict(&self, masked: &MaskedGraph, rng: &mut impl Rng) -> Result<Prediction> {
        let inits: Vec<LatentGraph> = (0..self.config.ensemble_k)
            .map(|_| self.fresh_noise(masked.n(), rng))
            .collect();
        self.predict_from_noise(masked, &inits, rng)
    }

    /// Prediction from explicit initial noise, one ensemble member per
    /// entry of `inits`.
    pub fn predict_from_noise(
        &self,
        masked: &MaskedGraph,
        inits: &[LatentGraph],
        rng: &mut impl Rng,
    ) -> Result<Prediction> {
        self.check()?;
        if inits.is_empty() {
            return Err(invalid("at least one ensemble member is required"));
        }
        if masked.graph_mask && self.ae.meta.graph_dim == 0 {
            return Err(LgdError::Config(
                "graph target but the autoencoder has no graph head".into(),
            ));
        }
        let condition = self.condition_for(masked)?;
        let adjacency = adjacency_of(&masked.base, self.ae.config.virtual_node);
        let mut members = Vec::with_capacity(inits.len());
        for init in inits {
            let h = self.sample_from_noise(init, &condition, Some(&adjacency), rng)?;
            members.push(self.read_prediction(masked, &h)?);
        }
        Ok(combine(&members))
    }

    /// Decodes only the masked positions of `masked` from a latent.
    pub fn read_prediction(&self, masked: &MaskedGraph, h: &LatentGraph) -> Result<Prediction> {
        let n = masked.n();
        if h.real_nodes() != n {
            return Err(invalid("latent node count differs from the masked graph"));
        }
        let mut out = Prediction::default();
        if masked.graph_mask {
            out.graph = Some(self.ae.predict_graph(self.ae_params, h)?);
        }
        let needs_heads = masked.node_mask.iter().chain(&masked.edge_mask).any(|&m| m);
        if needs_heads {
            let (nodes, edges) = self.ae.head_outputs(self.ae_params, h)?;
            let categorical = self.ae.meta.categorical_nodes();
            let node_skip = categorical.then(|| self.ae.meta.node_vocab.len() - 1);
            for i in (0..n).filter(|&i| masked.node_mask[i]) {
                let v = if categorical {
                    NodeValue::Class(argmax_skip(nodes.row(i), node_skip))
                } else {
                    NodeValue::Values(nodes.row(i).to_vec())
                };
                out.nodes.push((i, v));
            }
            let edge_skip = Some(self.ae.meta.edge_vocab.len() - 1);
            for i in 0..n {
                for j in i..n {
                    if masked.edge_mask[i * n + j] {
                        let c = if i == j {
                            NO_EDGE
                        } else {
                            argmax_skip(edges.row(i * n + j), edge_skip)
                        };
                        out.edges.push((i, j, c));
                    }
                }
            }
        }
        Ok(out)
    }
}

fn argmax_skip(row: &[f64], skip: Option<usize>) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (k, &v) in row.iter().enumerate() {
        if Some(k) == skip {
            continue;
        }
        if best.map_or(true, |(_, bv)| v > bv) {
            best = Some((k, v));
        }
    }
    best.map_or(0, |(k, _)| k)
}

/// Median of the values; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Most frequent class; ties go to the lowest index.
pub fn majority_vote(classes: &[usize]) -> usize {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in classes {
        *counts.entry(c).or_insert(0) += 1;
    }
    let mut best = (usize::MAX, 0);
    for (c, k) in counts {
        if k > best.1 {
            best = (c, k);
        }
    }
    best.0
}

/// Elementwise median for real values, majority vote for categories.
pub fn combine(members: &[Prediction]) -> Prediction {
    if members.len() == 1 {
        return members[0].clone();
    }
    let first = &members[0];
    let graph = first.graph.as_ref().map(|g| {
        (0..g.len())
            .map(|k| {
                median(
                    &members
                        .iter()
                        .map(|m| m.graph.as_ref().expect("same layout")[k])
                        .collect::<Vec<_>>(),
                )
            })
            .collect()
    });
    let nodes = first
        .nodes
        .iter()
        .enumerate()
        .map(|(r, (i, v))| {
            let value = match v {
                NodeValue::Class(_) => NodeValue::Class(majority_vote(
                    &members
                        .iter()
                        .map(|m| match m.nodes[r].1 {
                            NodeValue::Class(c) => c,
                            NodeValue::Values(_) => unreachable!("same layout"),
                        })
                        .collect::<Vec<_>>(),
                )),
                NodeValue::Values(vals) => NodeValue::Values(
                    (0..vals.len())
                        .map(|k| {
                            median(
                                &members
                                    .iter()
                                    .map(|m| match &m.nodes[r].1 {
                                        NodeValue::Values(v) => v[k],
                                        NodeValue::Class(_) => unreachable!("same layout"),
                                    })
                                    .collect::<Vec<_>>(),
                            )
                        })
                        .collect(),
                ),
            };
            (*i, value)
        })
        .collect();
    let edges = first
        .edges
        .iter()
        .enumerate()
        .map(|(r, &(i, j, _))| {
            (
                i,
                j,
                majority_vote(&members.iter().map(|m| m.edges[r].2).collect::<Vec<_>>()),
            )
        })
        .collect();
    Prediction {
        graph,
        nodes,
        edges,
    }
}
