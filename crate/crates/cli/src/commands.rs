use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rtgnn::dynamics::{ControlInput, MotionPrimitiveSet};
use rtgnn::gnn::{GnnConfig, Rtgnn, REFERENCE_PARAMETER_COUNT};
use rtgnn::graph::condition_on_ego;
use rtgnn::metrics::{eval_csv, eval_text_table, EvalAccumulator, MethodPrediction, Trajectory};
use rtgnn::render::{render_svg, RenderSet};
use rtgnn::rollout::{
    constant_velocity_predict, evaluate_corpus, group_predictions, min_k_method, prediction_records,
    read_controls, read_predictions, rollout, scene_graph, scored_agents, truth_trajectory, write_predictions,
    ControlRecord, EvalPlan, FrozenRtgnn, PredictionRecord, RolloutConfig, BASELINE_METHOD, ML_LABEL, ML_METHOD,
};
use rtgnn::scenario::{generate_corpus, generate_scene, ScenarioKind, ScenarioSpec};
use rtgnn::scene::{read_scenes, write_scenes, SceneSequence};
use rtgnn::training::{
    load_checkpoint, sequence_loss, train, Checkpoint, LossContext, TrainOutput, TrainState, TrainingSample,
};
use rtgnn_autodiff::{finite_difference_check, GradCheckConfig, TensorError};
use sha2::{Digest, Sha256};

use crate::config::{read_input, required, RunConfig};
use crate::{Cli, Command, EvalArgs, GenArgs, GradcheckArgs, PlotArgs, PredictArgs, TrainArgs, Usage};

pub fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let seed = cfg.seed(cli.seed);
    let out_dir = cfg.out_dir(cli.out_dir.as_deref());
    match cli.command {
        Command::Gen(a) => gen(&cfg, a, seed, &out_dir),
        Command::Train(a) => train_cmd(&cfg, a, seed, &out_dir),
        Command::Predict(a) => predict(&cfg, a, seed, &out_dir),
        Command::Eval(a) => eval(&cfg, a, seed),
        Command::Plot(a) => plot(&cfg, a, seed, &out_dir),
        Command::Gradcheck(a) => gradcheck(&cfg, a, seed),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(index.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_scene_file(path: &Path) -> Result<Vec<SceneSequence>> {
    let bytes = read_input(path)?;
    read_scenes(bytes.as_slice()).with_context(|| format!("reading {}", path.display()))
}

fn load_model(path: &Path) -> Result<(Rtgnn, Checkpoint)> {
    read_input(path)?;
    let ckpt = load_checkpoint(path, None).with_context(|| format!("loading {}", path.display()))?;
    let model = Rtgnn::new(ckpt.model.clone())?;
    Ok((model, ckpt))
}

fn log_parameter_count(config: &GnnConfig) {
    log::info!(
        "model has {} parameters (reference network: {REFERENCE_PARAMETER_COUNT})",
        config.parameter_count()
    );
}

fn gen(cfg: &RunConfig, a: GenArgs, seed: u64, out_dir: &Path) -> Result<()> {
    let mut g = cfg.generate.clone();
    if let Some(n) = a.sequences {
        g.sequences = n;
    }
    if let Some(k) = a.kinds {
        g.kinds = k;
    }
    if a.steps.is_some() {
        g.steps = a.steps;
    }
    if g.sequences == 0 {
        return Err(Usage("--sequences must be at least 1".into()).into());
    }
    let prims = MotionPrimitiveSet::new(cfg.model.config().lattice)?;
    let scenes = generate_corpus(&g.specs(), g.sequences, seed, &prims).map_err(|e| Usage(e.to_string()))?;
    let mut bytes = Vec::new();
    write_scenes(&mut bytes, &scenes)?;
    let path = a.out.unwrap_or_else(|| out_dir.join("corpus.jsonl"));
    write_output(&path, &bytes)?;
    println!("{} scenes -> {} (sha256 {})", scenes.len(), path.display(), hex(&Sha256::digest(&bytes)));
    Ok(())
}

fn train_cmd(cfg: &RunConfig, a: TrainArgs, seed: u64, out_dir: &Path) -> Result<()> {
    let corpus = load_scene_file(&required(a.corpus, &cfg.paths.corpus, "corpus")?)?;
    let validation = match a.validation.or_else(|| cfg.paths.validation.clone()) {
        Some(p) => load_scene_file(&p)?,
        None => Vec::new(),
    };
    let (model, mut tcfg, state) = match a.resume {
        Some(p) => {
            let (model, ckpt) = load_model(&p)?;
            log::info!("resuming after epoch {}", ckpt.state.epochs_done);
            (model, ckpt.train, ckpt.state)
        }
        None => {
            let model = Rtgnn::new(a.model.unwrap_or(cfg.model).config())?;
            let mut tcfg = cfg.train.clone();
            tcfg.seed = seed;
            let state = TrainState::new(model.init_parameters(seed), &tcfg);
            (model, tcfg, state)
        }
    };
    if let Some(e) = a.epochs {
        tcfg.epochs = e;
    }
    log_parameter_count(model.config());
    let prims = model.prims().clone();
    let to_samples = |scenes: &[SceneSequence]| -> Result<Vec<TrainingSample>> {
        scenes
            .iter()
            .map(|s| Ok(TrainingSample::from_scene(s, tcfg.sequence_length, &tcfg.region, &prims)?))
            .collect()
    };
    let train_set = to_samples(&corpus)?;
    let val_set = to_samples(&validation)?;
    let out = TrainOutput {
        dir: a.out.unwrap_or_else(|| out_dir.join("run")),
    };
    let (state, history) = train(&model, state, &train_set, &val_set, &tcfg, Some(&out))?;
    if let Some(last) = history.last() {
        println!(
            "epoch {}: train {:.4} validation {:.4}; best epoch {} -> {}",
            last.epoch,
            last.train_loss,
            last.validation_loss,
            state.best_epoch,
            out.best_checkpoint().display()
        );
    } else {
        println!("nothing to do: {} epochs already done", state.epochs_done);
    }
    Ok(())
}

/// Ego controls per scene, ordered by step.
fn load_controls(path: &Path) -> Result<BTreeMap<String, Vec<ControlRecord>>> {
    let bytes = read_input(path)?;
    let mut out: BTreeMap<String, Vec<ControlRecord>> = BTreeMap::new();
    for r in read_controls(bytes.as_slice()).with_context(|| format!("reading {}", path.display()))? {
        out.entry(r.scene_id.clone()).or_default().push(r);
    }
    for v in out.values_mut() {
        v.sort_by_key(|r| r.step);
    }
    Ok(out)
}

fn plan_for(controls: &BTreeMap<String, Vec<ControlRecord>>, scene: &str, start: usize, horizon: usize) -> Result<Vec<ControlInput>> {
    let rows = controls.get(scene).ok_or_else(|| anyhow!("no ego controls for scene {scene}"))?;
    let plan: Vec<ControlInput> = (start..start + horizon)
        .map(|t| {
            rows.iter()
                .find(|r| r.step == t)
                .map(|r| ControlInput::new(r.a, r.omega))
                .ok_or_else(|| anyhow!("scene {scene}: no ego control for step {t}"))
        })
        .collect::<Result<_>>()?;
    Ok(plan)
}

fn predict(cfg: &RunConfig, a: PredictArgs, seed: u64, out_dir: &Path) -> Result<()> {
    let scenes = load_scene_file(&required(a.scenes, &cfg.paths.corpus, "scenes")?)?;
    let (model, ckpt) = load_model(&required(a.checkpoint, &cfg.paths.checkpoint, "checkpoint")?)?;
    let controls = a.conditional.as_deref().map(load_controls).transpose()?;
    let horizon = a.horizon.unwrap_or(cfg.rollout.horizon);
    let samples = a.samples.unwrap_or(0);
    let ml = a.ml || samples == 0;
    let prims = model.prims();
    let frozen = FrozenRtgnn {
        model: &model,
        params: &ckpt.state.params,
    };
    let mut records: Vec<PredictionRecord> = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        if scene.ego_id().is_none() {
            bail!("scene {} has no ego", scene.id);
        }
        let mut g = scene_graph(scene, a.start, &ckpt.train.region, prims)?;
        let plan = match &controls {
            Some(c) => {
                let plan = plan_for(c, &scene.id, a.start, horizon)?;
                g = condition_on_ego(&g, &plan[0], prims)?;
                Some(plan)
            }
            None => None,
        };
        let with_plan = |c: RolloutConfig| match &plan {
            Some(p) => c.with_plan(p.clone()),
            None => c,
        };
        if ml {
            let t = rollout(&frozen, &g, &scene.map, &with_plan(RolloutConfig::max_likelihood(horizon)))?;
            records.extend(prediction_records(&scene.id, ML_LABEL, &t[0]));
        }
        if samples > 0 {
            let c = with_plan(RolloutConfig::sampled(horizon, samples, derive_seed(seed, i as u64)));
            for (k, t) in rollout(&frozen, &g, &scene.map, &c)?.iter().enumerate() {
                records.extend(prediction_records(&scene.id, &k.to_string(), t));
            }
        }
    }
    let mut bytes = Vec::new();
    write_predictions(&mut bytes, &records)?;
    let path = a.out.unwrap_or_else(|| out_dir.join("predictions.csv"));
    write_output(&path, &bytes)?;
    println!("{} scenes, {} waypoints -> {}", scenes.len(), records.len(), path.display());
    Ok(())
}

/// Sampled rollouts of one scene from a prediction file, in label order.
fn sample_set(labels: &BTreeMap<String, Trajectory>) -> Vec<Trajectory> {
    let mut numbered: Vec<(usize, &Trajectory)> = labels
        .iter()
        .filter_map(|(l, t)| l.parse::<usize>().ok().map(|k| (k, t)))
        .collect();
    numbered.sort_by_key(|(k, _)| *k);
    numbered.into_iter().map(|(_, t)| t.clone()).collect()
}

fn eval(cfg: &RunConfig, a: EvalArgs, seed: u64) -> Result<()> {
    let scenes = load_scene_file(&required(a.scenes, &cfg.paths.corpus, "scenes")?)?;
    let horizons = a.horizons.unwrap_or_else(|| cfg.rollout.horizons.clone());
    if horizons.is_empty() || horizons.contains(&0) {
        return Err(Usage("horizons must be positive step counts".into()).into());
    }
    let horizon = *horizons.iter().max().expect("non-empty");
    let k = cfg.rollout.k;
    let rows = if let Some(path) = a.predictions {
        let bytes = read_input(&path)?;
        let records = read_predictions(bytes.as_slice()).with_context(|| format!("reading {}", path.display()))?;
        let grouped = group_predictions(&records)?;
        let prims = MotionPrimitiveSet::new(cfg.model.config().lattice)?;
        let region = &cfg.train.region;
        let mut acc = EvalAccumulator::new();
        for scene in &scenes {
            let Some(labels) = grouped.get(&scene.id) else {
                log::warn!("no predictions for scene {}", scene.id);
                continue;
            };
            let g0 = scene_graph(scene, 0, region, &prims)?;
            let truth = truth_trajectory(scene, 0, &scored_agents(&g0), horizon)?;
            let predicted: BTreeSet<u64> = labels.values().flat_map(|t| t.ids()).collect();
            let ids: Vec<u64> = truth.ids().into_iter().filter(|id| predicted.contains(id)).collect();
            if ids.is_empty() {
                continue;
            }
            let truth = truth.restricted(&ids);
            let fit = |t: &Trajectory| -> Result<Trajectory> {
                if t.horizon() < horizon {
                    bail!("scene {}: predictions cover {} steps, need {horizon}", scene.id, t.horizon());
                }
                Ok(t.truncated(horizon).restricted(&ids))
            };
            if a.baseline {
                let cv = constant_velocity_predict(&g0, horizon, prims.dt()).restricted(&ids);
                acc.add_scene(BASELINE_METHOD, &MethodPrediction::Single(cv), &truth, &horizons)?;
            }
            if let Some(t) = labels.get(ML_LABEL) {
                acc.add_scene(ML_METHOD, &MethodPrediction::Single(fit(t)?), &truth, &horizons)?;
            }
            let samples = sample_set(labels);
            if samples.len() >= k {
                let s = samples.iter().map(fit).collect::<Result<Vec<_>>>()?;
                acc.add_scene(&min_k_method(k), &MethodPrediction::Samples(s, k), &truth, &horizons)?;
            }
        }
        acc.rows(prims.dt())
    } else if let Some(path) = a.checkpoint.or_else(|| cfg.paths.checkpoint.clone()) {
        let (model, ckpt) = load_model(&path)?;
        let frozen = FrozenRtgnn {
            model: &model,
            params: &ckpt.state.params,
        };
        let plan = EvalPlan {
            horizons,
            samples: cfg.rollout.samples,
            k,
            seed,
        };
        let rows = evaluate_corpus(Some(&frozen), &scenes, &ckpt.train.region, model.prims(), &plan)?;
        rows.into_iter().filter(|r| a.baseline || r.method != BASELINE_METHOD).collect()
    } else if a.baseline {
        let prims = MotionPrimitiveSet::new(cfg.model.config().lattice)?;
        let plan = EvalPlan {
            horizons,
            samples: 0,
            k,
            seed,
        };
        evaluate_corpus(None, &scenes, &cfg.train.region, &prims, &plan)?
    } else {
        return Err(Usage("eval needs --predictions, --checkpoint or --baseline".into()).into());
    };
    if rows.is_empty() {
        bail!("no scene had a scored agent with predictions");
    }
    print!("{}", eval_text_table(&rows));
    if let Some(out) = a.out {
        write_output(&out, eval_csv(&rows).as_bytes())?;
    }
    Ok(())
}

fn plot(cfg: &RunConfig, a: PlotArgs, seed: u64, out_dir: &Path) -> Result<()> {
    let scenes = load_scene_file(&required(a.scenes, &cfg.paths.corpus, "scenes")?)?;
    let scene = match &a.scene {
        Some(id) => scenes
            .iter()
            .find(|s| &s.id == id)
            .ok_or_else(|| Usage(format!("no scene `{id}`")))?,
        None => scenes.first().ok_or_else(|| anyhow!("the scene file is empty"))?,
    };
    let horizon = a.horizon.unwrap_or(cfg.rollout.horizon);
    let horizon = horizon.min(scene.steps.len().saturating_sub(a.start + 1));
    if horizon == 0 {
        bail!("scene {} has no steps after step {}", scene.id, a.start);
    }
    let checkpoint = a.checkpoint.map(|p| load_model(&p)).transpose()?;
    let region = checkpoint.as_ref().map_or(cfg.train.region, |(_, c)| c.train.region);
    let prims = match &checkpoint {
        Some((m, _)) => m.prims().clone(),
        None => MotionPrimitiveSet::new(cfg.model.config().lattice)?,
    };
    let g0 = scene_graph(scene, a.start, &region, &prims)?;
    let ids: Vec<u64> = g0.nodes().iter().map(|n| n.agent.id).collect();
    let mut set = RenderSet {
        truth: Some(truth_trajectory(scene, a.start, &ids, horizon)?),
        baseline: Some(constant_velocity_predict(&g0, horizon, prims.dt())),
        start_step: a.start,
        ..RenderSet::default()
    };
    if let Some((model, ckpt)) = &checkpoint {
        let frozen = FrozenRtgnn {
            model,
            params: &ckpt.state.params,
        };
        set.ml = Some(rollout(&frozen, &g0, &scene.map, &RolloutConfig::max_likelihood(horizon))?.remove(0));
        let c = RolloutConfig::sampled(horizon, cfg.rollout.samples, seed);
        set.samples = rollout(&frozen, &g0, &scene.map, &c)?;
    } else if let Some(path) = a.predictions {
        let bytes = read_input(&path)?;
        let grouped = group_predictions(&read_predictions(bytes.as_slice())?)?;
        if let Some(labels) = grouped.get(&scene.id) {
            set.ml = labels.get(ML_LABEL).cloned();
            set.samples = sample_set(labels);
        }
    }
    let path = a.out.unwrap_or_else(|| out_dir.join(format!("{}.svg", scene.id)));
    write_output(&path, render_svg(scene, &set).as_bytes())?;
    println!("{} -> {}", scene.id, path.display());
    Ok(())
}

fn gradcheck(cfg: &RunConfig, a: GradcheckArgs, seed: u64) -> Result<()> {
    let model = Rtgnn::new(a.model.unwrap_or(cfg.model).config())?;
    log_parameter_count(model.config());
    let params = model.init_parameters(seed);
    let prims = model.prims();
    let spec = ScenarioSpec {
        vehicles: [2, 2],
        steps: 3,
        ..ScenarioSpec::new(ScenarioKind::CarFollowing)
    };
    let scene = generate_scene(&spec, "gradcheck".into(), seed, prims)?;
    let tcfg = &cfg.train;
    let sample = TrainingSample::from_scene(&scene, 3, &tcfg.region, prims)?;
    let dynamics = rtgnn::dynamics::Unicycle::default();
    let ctx = LossContext {
        target: tcfg.target,
        sigma: &tcfg.sigma,
        radius: tcfg.region.radius,
        dynamics: &dynamics,
    };
    let report = finite_difference_check(
        &params,
        |p| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = sequence_loss(&model, p, &sample, 0.0, &mut rng, &ctx)
                .map_err(|e| TensorError::Shape { layer: "loss", detail: e.to_string() })?;
            Ok((s.loss, s.grads))
        },
        GradCheckConfig {
            max_coords_per_tensor: a.coords.max(1),
            seed,
            ..GradCheckConfig::default()
        },
    )?;
    println!(
        "max relative error {:.3e} over {} coordinates (worst: {}[{}])",
        report.max_rel_error, report.coords_checked, report.worst_parameter, report.worst_index
    );
    if report.max_rel_error >= a.tolerance {
        bail!("gradient check failed: {:.3e} >= {:.1e}", report.max_rel_error, a.tolerance);
    }
    Ok(())
}
