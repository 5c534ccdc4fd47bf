//! Experiment commands. Each writes `<name>.metrics.json` (deterministic
//! given config and seed) and `<name>.manifest.json` (adds wall time)
//! under the output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::autoencoder::{pretrain_autoencoder, Autoencoder};
use crate::checkpoint::{Checkpoint, Model};
use crate::config::{ExperimentConfig, Task};
use crate::diffusion::{diffusion_examples, train_diffusion, NodeCountSampler, Pipeline};
use crate::error::{LgdError, Result};
use crate::eval::{self, ValenceTable};
use crate::graph::{generate, mask_graph, read_graphs, write_graphs, Graph, MaskTargets};
use crate::nn::{ConditioningMode, Denoiser};
use crate::params::ParamStore;
use crate::schedule::NoiseSchedule;
use crate::theory;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    PretrainAe,
    TrainDiffusion,
    Sample,
    Predict,
    Evaluate,
    Theory,
    GenData,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::PretrainAe => "pretrain-ae",
            Command::TrainDiffusion => "train-diffusion",
            Command::Sample => "sample",
            Command::Predict => "predict",
            Command::Evaluate => "evaluate",
            Command::Theory => "theory",
            Command::GenData => "gen-data",
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub metrics_path: PathBuf,
    pub manifest_path: PathBuf,
    pub metrics: Value,
}

struct Run<'c> {
    cfg: &'c ExperimentConfig,
    checkpoints: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl Run<'_> {
    fn out(&mut self, file: &str) -> PathBuf {
        self.outputs.push(file.to_string());
        self.cfg.output_dir.join(file)
    }

    fn load_ae(&mut self) -> Result<(Autoencoder, ParamStore, String)> {
        let (ck, hash) = Checkpoint::load(self.cfg.autoencoder_path())?;
        let Model::Autoencoder { encoder, meta } = ck.manifest.model else {
            return Err(LgdError::Config(
                "expected an autoencoder checkpoint".into(),
            ));
        };
        if encoder.latent_dim != self.cfg.denoiser.latent_dim {
            return Err(LgdError::Config(format!(
                "autoencoder checkpoint latent_dim {} differs from denoiser latent_dim {}",
                encoder.latent_dim, self.cfg.denoiser.latent_dim
            )));
        }
        self.checkpoints.insert("autoencoder".into(), hash.clone());
        Ok((Autoencoder::new(encoder, meta)?, ck.params, hash))
    }

    fn load_all(&mut self) -> Result<Loaded> {
        let (ae, ae_params, ae_hash) = self.load_ae()?;
        let (ck, hash) = Checkpoint::load(self.cfg.denoiser_path())?;
        let Model::Denoiser {
            denoiser,
            diffusion: _,
            node_counts,
            autoencoder_hash,
        } = ck.manifest.model
        else {
            return Err(LgdError::Config("expected a denoiser checkpoint".into()));
        };
        if autoencoder_hash != ae_hash {
            return Err(LgdError::Config(
                "denoiser checkpoint was trained on a different autoencoder".into(),
            ));
        }
        if denoiser.latent_dim != ae.config.latent_dim {
            return Err(LgdError::Config("checkpoint latent_dim mismatch".into()));
        }
        self.checkpoints.insert("denoiser".into(), hash);
        let schedule = self.cfg.diffusion.schedule.build()?;
        Ok(Loaded {
            ae,
            ae_params,
            denoiser: Denoiser::new(denoiser)?,
            den_params: ck.params,
            node_counts,
            schedule,
        })
    }
}

struct Loaded {
    ae: Autoencoder,
    ae_params: ParamStore,
    denoiser: Denoiser,
    den_params: ParamStore,
    node_counts: NodeCountSampler,
    schedule: NoiseSchedule,
}

impl Loaded {
    fn pipeline<'a>(&'a self, cfg: &'a ExperimentConfig) -> Pipeline<'a> {
        Pipeline {
            ae: &self.ae,
            ae_params: &self.ae_params,
            denoiser: &self.denoiser,
            den_params: &self.den_params,
            schedule: &self.schedule,
            config: &cfg.diffusion,
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn tail_mean(losses: &[f64]) -> Option<f64> {
    let k = (losses.len() / 10).max(1).min(losses.len());
    (k > 0).then(|| losses[losses.len() - k..].iter().sum::<f64>() / k as f64)
}

fn eval_graphs(cfg: &ExperimentConfig) -> Result<Vec<Graph>> {
    generate(cfg.eval_dataset.as_ref().unwrap_or(&cfg.dataset))
}

/// Runs `cmd` and writes its metrics and manifest.
pub fn run(cmd: Command, cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut run = Run {
        cfg,
        checkpoints: BTreeMap::new(),
        outputs: Vec::new(),
    };
    let metrics = match cmd {
        Command::PretrainAe => pretrain_ae(&mut run)?,
        Command::TrainDiffusion => train_denoiser(&mut run)?,
        Command::Sample => sample(&mut run)?,
        Command::Predict => predict(&mut run)?,
        Command::Evaluate => evaluate(&mut run)?,
        Command::Theory => theory_report(&mut run)?,
        Command::GenData => gen_data(&mut run)?,
    };
    let metrics_path = run.out(&format!("{}.metrics.json", cmd.name()));
    write_json(&metrics_path, &metrics)?;
    let manifest_path = cfg.output_dir.join(format!("{}.manifest.json", cmd.name()));
    let manifest = json!({
        "command": cmd.name(),
        "config_hash": cfg.hash()?,
        "seed": cfg.seed,
        "precision": cfg.precision,
        "device": cfg.device,
        "checkpoints": run.checkpoints,
        "outputs": run.outputs,
        "wall_time_s": start.elapsed().as_secs_f64(),
    });
    write_json(&manifest_path, &manifest)?;
    Ok(RunOutput {
        metrics_path,
        manifest_path,
        metrics,
    })
}

fn pretrain_ae(run: &mut Run) -> Result<Value> {
    let cfg = run.cfg;
    let graphs = generate(&cfg.dataset)?;
    let (ae, params, log) = pretrain_autoencoder(
        &graphs,
        &cfg.encoder,
        &cfg.ae_training,
        cfg.seed,
        cfg.quantize(),
    )?;
    let assumption1 = if ae.meta.graph_dim > 0 {
        Some(theory::estimate_assumption1(&graphs, &ae, &params)?)
    } else {
        None
    };
    let mut exact = 0;
    for g in &graphs {
        let back = ae.decode(&params, &ae.encode_graph(&params, g)?)?;
        exact += usize::from(back.a_type == g.a_type && back.x == g.x);
    }
    let model = Model::Autoencoder {
        encoder: ae.config.clone(),
        meta: ae.meta.clone(),
    };
    let ck = Checkpoint::new(
        model,
        cfg.ae_training.clone(),
        cfg.precision,
        cfg.seed,
        params,
    );
    let path = run.out("autoencoder.ckpt");
    let hash = ck.save(&path)?;
    run.checkpoints.insert("autoencoder".into(), hash);
    Ok(json!({
        "graphs": graphs.len(),
        "steps": log.losses.len(),
        "final_loss": log.losses.last(),
        "tail_mean_loss": tail_mean(&log.losses),
        "assumption1": assumption1,
        "exact_reconstruction": exact as f64 / graphs.len() as f64,
    }))
}

fn train_denoiser(run: &mut Run) -> Result<Value> {
    let cfg = run.cfg;
    let (ae, ae_params, ae_hash) = run.load_ae()?;
    let graphs = generate(&cfg.dataset)?;
    let targets = cfg.task.mask_targets();
    let examples = diffusion_examples(
        &ae,
        &ae_params,
        &graphs,
        cfg.denoiser.conditioning,
        &targets,
    )?;
    let (_, params, log) = train_diffusion(
        &examples,
        &cfg.denoiser,
        &cfg.diffusion,
        &cfg.diffusion_training,
        cfg.seed,
        cfg.quantize(),
    )?;
    let model = Model::Denoiser {
        denoiser: cfg.denoiser.clone(),
        diffusion: cfg.diffusion.clone(),
        node_counts: NodeCountSampler::from_graphs(&graphs)?,
        autoencoder_hash: ae_hash,
    };
    let ck = Checkpoint::new(
        model,
        cfg.diffusion_training.clone(),
        cfg.precision,
        cfg.seed,
        params,
    );
    let path = run.out("denoiser.ckpt");
    let hash = ck.save(&path)?;
    run.checkpoints.insert("denoiser".into(), hash);
    Ok(json!({
        "examples": examples.len(),
        "steps": log.losses.len(),
        "final_loss": log.losses.last(),
        "tail_mean_loss": tail_mean(&log.losses),
    }))
}

fn generation_report(cfg: &ExperimentConfig, generated: &[Graph], train: &[Graph]) -> Value {
    let table = cfg.dataset.valence_table().map(ValenceTable);
    let m = eval::generation_metrics(generated, train, table.as_ref());
    let small: Vec<Graph> = generated.iter().filter(|g| g.n <= 8).cloned().collect();
    let oracle_agrees =
        small.is_empty() || eval::count_classes(&small) == eval::count_classes_brute_force(&small);
    json!({
        "generation": m,
        "uniqueness_small_oracle_agrees": oracle_agrees,
    })
}

fn sample(run: &mut Run) -> Result<Value> {
    let cfg = run.cfg;
    if cfg.task != Task::Generation {
        return Err(LgdError::Config("sample needs task = generation".into()));
    }
    let loaded = run.load_all()?;
    let pipe = loaded.pipeline(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = generate(&cfg.dataset)?;
    let generated = match cfg.denoiser.conditioning {
        ConditioningMode::General => {
            let labelled: Vec<&Graph> = train.iter().filter(|g| !g.g.is_empty()).collect();
            if labelled.is_empty() {
                return Err(LgdError::Config(
                    "general conditioning needs labelled graphs".into(),
                ));
            }
            (0..cfg.sample.count)
                .map(|k| {
                    let src = labelled[k % labelled.len()];
                    pipe.generate_conditional(&src.g, src.n, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?
        }
        _ => pipe.generate(cfg.sample.count, &loaded.node_counts, &mut rng)?,
    };
    let path = run.out("samples.jsonl");
    write_graphs(&generated, &path)?;
    Ok(generation_report(cfg, &generated, &train))
}

fn predict(run: &mut Run) -> Result<Value> {
    let cfg = run.cfg;
    if cfg.task != Task::GraphRegression {
        return Err(LgdError::Config(
            "predict needs task = graph-regression".into(),
        ));
    }
    let loaded = run.load_all()?;
    let pipe = loaded.pipeline(cfg);
    let graphs = eval_graphs(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut preds = Vec::new();
    let mut baseline = Vec::new();
    let mut labels = Vec::new();
    let mut lines = String::new();
    for (i, g) in graphs.iter().enumerate() {
        let masked = mask_graph(g, &MaskTargets::graph_only())?;
        let p = pipe.predict(&masked, &mut rng)?;
        let y = p.graph.clone().unwrap_or_default();
        let b = loaded.ae.predict_graph(
            &loaded.ae_params,
            &loaded.ae.encode(&loaded.ae_params, &masked)?,
        )?;
        lines.push_str(&serde_json::to_string(
            &json!({"index": i, "prediction": y, "baseline": b, "label": g.g}),
        )?);
        lines.push('\n');
        preds.extend(y);
        baseline.extend(b);
        labels.extend(g.g.iter().copied());
    }
    std::fs::write(run.out("predictions.jsonl"), lines)?;
    Ok(json!({
        "graphs": graphs.len(),
        "sampler": cfg.diffusion.sampler,
        "steps": cfg.diffusion.steps()?.len(),
        "ensemble_k": cfg.diffusion.ensemble_k,
        "lgd": eval::regression_metrics(&preds, &labels)?,
        "baseline_head": eval::regression_metrics(&baseline, &labels)?,
    }))
}

fn evaluate(run: &mut Run) -> Result<Value> {
    let cfg = run.cfg;
    let generated = read_graphs(cfg.samples_path())?;
    let train = generate(&cfg.dataset)?;
    Ok(generation_report(cfg, &generated, &train))
}

fn theory_report(run: &mut Run) -> Result<Value> {
    let cfg = run.cfg;
    let loaded = run.load_all()?;
    let graphs = eval_graphs(cfg)?;
    let a1 = theory::estimate_assumption1(&graphs, &loaded.ae, &loaded.ae_params)?;
    let corollary = theory::corollary_check(&graphs, &loaded.ae, &loaded.ae_params, 20, cfg.seed)?;
    let band = cfg.theory.band_fraction * loaded.ae.meta.label_std.first().copied().unwrap_or(1.0);
    let sweep = theory::mae_vs_steps_sweep(
        &loaded.pipeline(cfg),
        &graphs,
        &cfg.theory.ddim_steps,
        &cfg.theory.seeds,
        band,
    )?;
    let report = theory::bound_report(&theory::BoundTerms {
        assumption1: a1,
        latent_dim: loaded.ae.config.latent_dim,
        schedule: cfg.diffusion.schedule.clone(),
        observed: sweep.rows.iter().map(|r| (r.steps, r.median_mae)).collect(),
    })?;
    write_json(&run.out("bound_report.json"), &report)?;
    Ok(json!({
        "assumption1": a1,
        "corollary": corollary,
        "sweep": sweep,
    }))
}

fn gen_data(run: &mut Run) -> Result<Value> {
    let graphs = generate(&run.cfg.dataset)?;
    write_graphs(&graphs, run.out("data.jsonl"))?;
    let nodes: usize = graphs.iter().map(|g| g.n).sum();
    Ok(json!({
        "graphs": graphs.len(),
        "mean_nodes": nodes as f64 / graphs.len().max(1) as f64,
    }))
}

/// Machine-readable error record.
pub fn error_record(err: &LgdError) -> Value {
    json!({"error": {"kind": err.kind(), "message": err.to_string()}})
}
