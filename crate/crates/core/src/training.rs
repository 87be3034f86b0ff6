//! Target intentions, recurrent sequence loss with scheduled sampling, the
//! Adam training loop and checkpoints.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtgnn_autodiff::{
    read_container, write_container, AdamConfig, AdamState, Container, GradientMap, ParameterStore, Tape,
    Tensor, TensorError, Var,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dynamics::{wrap_angle, MotionPrimitiveSet, Unicycle, VehicleState};
use crate::gnn::{GnnConfig, GnnInputs, Rtgnn, StepModel};
use crate::graph::build_graph_with;
use crate::map::SemanticMap;
use crate::scene::SceneSequence;
use crate::traffic::{select_local_agents, AgentKind, AgentState, Intention, RegionConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("sequence `{0}` has fewer than 2 steps")]
    TooShort(String),
    #[error("sequence `{0}` has no ego")]
    NoEgo(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("non-finite loss on sample `{0}`")]
    NonFiniteLoss(String),
    #[error("checkpoint was written for a different model config")]
    DigestMismatch,
    #[error("checkpoint metadata: {0}")]
    Metadata(String),
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Per-component standard deviations of the target distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSigma {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
}

impl Default for TargetSigma {
    fn default() -> Self {
        Self {
            x: 5e-2,
            y: 5e-2,
            theta: 1.75e-2,
            v: 0.1,
        }
    }
}

impl TargetSigma {
    /// Squared Σ-weighted distance with the heading difference wrapped.
    pub fn distance_sq(&self, a: &VehicleState, b: &VehicleState) -> f64 {
        let dx = (a.x - b.x) / self.x;
        let dy = (a.y - b.y) / self.y;
        let dt = wrap_angle(a.theta - b.theta) / self.theta;
        let dv = (a.v - b.v) / self.v;
        dx * dx + dy * dy + dt * dt + dv * dv
    }
}

/// Squared Σ-distance from `next` to the successor of `current` under each
/// primitive.
pub fn primitive_distances(
    current: &VehicleState,
    next: &VehicleState,
    prims: &MotionPrimitiveSet,
    sigma: &TargetSigma,
    dynamics: &Unicycle,
) -> Vec<f64> {
    (0..prims.len())
        .map(|i| sigma.distance_sq(next, &dynamics.integrate(current, &prims.control(i), prims.dt())))
        .collect()
}

fn argmin(d: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in d.iter().enumerate() {
        if v < d[best] {
            best = i;
        }
    }
    best
}

/// One-hot target: all mass on the primitive that best explains the transition.
pub fn target_intention_onehot(
    current: &VehicleState,
    next: &VehicleState,
    prims: &MotionPrimitiveSet,
    sigma: &TargetSigma,
    dynamics: &Unicycle,
) -> Intention {
    let d = primitive_distances(current, next, prims, sigma, dynamics);
    Intention::one_hot(prims.len(), argmin(&d))
}

/// Gaussian target: `q(i) ∝ exp(-½ d_i²)`. Falls back to the one-hot target when
/// every weight underflows.
pub fn target_intention_gaussian(
    current: &VehicleState,
    next: &VehicleState,
    prims: &MotionPrimitiveSet,
    sigma: &TargetSigma,
    dynamics: &Unicycle,
) -> Intention {
    let d = primitive_distances(current, next, prims, sigma, dynamics);
    let w: Vec<f64> = d.iter().map(|&d2| (-0.5 * d2).exp()).collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        log::warn!("Gaussian target underflowed; using the one-hot target");
        return Intention::one_hot(prims.len(), argmin(&d));
    }
    Intention::new(w.into_iter().map(|v| v / total).collect()).expect("normalized weights")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    OneHot,
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Steps per training sequence `T`.
    pub sequence_length: usize,
    pub sampling_start_epoch: usize,
    pub sampling_end_epoch: usize,
    pub sampling_max_rate: f64,
    pub seed: u64,
    pub target: TargetKind,
    pub sigma: TargetSigma,
    pub region: RegionConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-3,
            batch_size: 16,
            epochs: 50,
            sequence_length: 8,
            sampling_start_epoch: 10,
            sampling_end_epoch: 30,
            sampling_max_rate: 0.5,
            seed: 0,
            target: TargetKind::Gaussian,
            sigma: TargetSigma::default(),
            region: RegionConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(serde_json::to_vec(self).expect("config serializes")).into()
    }
}

/// Scheduled-sampling rate: 0 up to the start epoch, linear to the maximum
/// at the end epoch, constant afterwards.
pub fn sampling_rate(epoch: usize, cfg: &TrainConfig) -> f64 {
    let (s, e) = (cfg.sampling_start_epoch, cfg.sampling_end_epoch);
    if epoch <= s {
        0.0
    } else if epoch >= e {
        cfg.sampling_max_rate
    } else {
        cfg.sampling_max_rate * (epoch - s) as f64 / (e - s) as f64
    }
}

/// A scene restricted, step by step, to the ego's local region.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub id: String,
    pub map: SemanticMap,
    /// Ground-truth agents inside the region at each step.
    pub steps: Vec<Vec<AgentState>>,
}

impl TrainingSample {
    /// Uses the first `max_steps` steps of `scene`.
    pub fn from_scene(
        scene: &SceneSequence,
        max_steps: usize,
        region: &RegionConfig,
        prims: &MotionPrimitiveSet,
    ) -> Result<Self> {
        let ego_id = scene.ego_id().ok_or_else(|| TrainError::NoEgo(scene.id.clone()))?;
        let steps = (0..scene.steps.len().min(max_steps))
            .map(|t| {
                let agents = scene.agents_at(t, prims);
                match agents.iter().find(|a| a.id == ego_id) {
                    Some(ego) => select_local_agents(&agents, ego, region),
                    None => Vec::new(),
                }
            })
            .collect();
        Ok(Self {
            id: scene.id.clone(),
            map: scene.map.clone(),
            steps,
        })
    }

    /// First and last step at which each agent is present.
    pub fn lifetimes(&self) -> BTreeMap<u64, (usize, usize)> {
        let mut out = BTreeMap::new();
        for (t, agents) in self.steps.iter().enumerate() {
            for a in agents {
                out.entry(a.id).and_modify(|l: &mut (usize, usize)| l.1 = t).or_insert((t, t));
            }
        }
        out
    }
}

/// Everything the recurrent unroll needs besides the model.
#[derive(Clone, Debug)]
pub struct LossContext<'a> {
    pub target: TargetKind,
    pub sigma: &'a TargetSigma,
    pub radius: f64,
    pub dynamics: &'a Unicycle,
}

#[derive(Clone, Copy, Debug)]
pub struct SequenceOutput {
    /// Sum of all cross-entropy terms.
    pub loss: Var,
    /// Number of (agent, step) target terms.
    pub terms: usize,
}

fn target_for(ctx: &LossContext, prims: &MotionPrimitiveSet, a: &VehicleState, b: &VehicleState) -> Intention {
    match ctx.target {
        TargetKind::OneHot => target_intention_onehot(a, b, prims, ctx.sigma, ctx.dynamics),
        TargetKind::Gaussian => target_intention_gaussian(a, b, prims, ctx.sigma, ctx.dynamics),
    }
}

/// Unrolls `model` over the sample, feeding predicted intentions
/// forward. With probability `rate` a vehicle's input state is replaced by
/// one rolled from its previous input state under a control drawn from its
/// predicted intention. No random numbers are drawn when `rate` is 0.
pub fn sequence_forward(
    tape: &mut Tape,
    model: &dyn StepModel,
    sample: &TrainingSample,
    rate: f64,
    rng: &mut ChaCha8Rng,
    ctx: &LossContext,
) -> Result<SequenceOutput> {
    if sample.steps.len() < 2 {
        return Err(TrainError::TooShort(sample.id.clone()));
    }
    let prims = model.prims();
    let m = prims.len();
    let zero_row = Intention::zero_control(prims).probabilities().to_vec();
    let mut prev: Option<(Vec<u64>, Var, Vec<VehicleState>)> = None;
    let mut total: Option<Var> = None;
    let mut terms = 0;
    for t in 0..sample.steps.len() - 1 {
        let truth = &sample.steps[t];
        if truth.is_empty() {
            prev = None;
            continue;
        }
        let mut agents: Vec<AgentState> = truth.clone();
        let mut order = Vec::with_capacity(agents.len());
        let mut new_rows = Vec::new();
        for a in agents.iter_mut() {
            let carried = prev
                .as_ref()
                .and_then(|(ids, q, states)| ids.iter().position(|&id| id == a.id).map(|r| (r, *q, states[r])));
            match carried {
                Some((r, q, input_state)) => {
                    order.push(r);
                    if rate > 0.0 && a.kind.is_vehicle() && rng.random::<f64>() < rate {
                        let row = &tape.value(q).data()[r * m..(r + 1) * m];
                        let probs = Intention::new(row.to_vec()).unwrap_or_else(|_| Intention::uniform(m));
                        let i = probs.sample_with(rng.random::<f64>());
                        a.state = ctx.dynamics.integrate(&input_state, &prims.control(i), prims.dt());
                    }
                }
                None => {
                    order.push(usize::MAX);
                    new_rows.push(zero_row.clone());
                }
            }
        }
        let prev_rows = prev.as_ref().map_or(0, |(ids, _, _)| ids.len());
        let mut next_new = prev_rows;
        for r in order.iter_mut() {
            if *r == usize::MAX {
                *r = next_new;
                next_new += 1;
            }
        }
        let q_in = match (&prev, new_rows.is_empty()) {
            (Some((_, q, _)), true) => tape.gather_rows(*q, &order)?,
            (Some((_, q, _)), false) => {
                let fresh = tape.constant(Tensor::from_rows(&new_rows)?);
                let all = tape.concat_rows(&[*q, fresh])?;
                tape.gather_rows(all, &order)?
            }
            (None, _) => tape.constant(Tensor::from_rows(&new_rows)?),
        };

        let graph = build_graph_with(&agents, prims, &sample.map, ctx.radius, ctx.dynamics)?;
        let inputs = GnnInputs::from_graph(&graph, model.feature_scale());
        let pred = model.step(tape, &inputs, q_in)?;

        let next = &sample.steps[t + 1];
        let mut target = vec![0.0; agents.len() * m];
        let mut step_terms = 0;
        for (r, a) in truth.iter().enumerate() {
            if a.kind == AgentKind::Pedestrian {
                continue;
            }
            if let Some(b) = next.iter().find(|b| b.id == a.id) {
                let q = target_for(ctx, prims, &a.state, &b.state);
                target[r * m..(r + 1) * m].copy_from_slice(q.probabilities());
                step_terms += 1;
            }
        }
        if step_terms > 0 {
            let ce = tape.cross_entropy(pred.log_q, Tensor::new(vec![agents.len(), m], target)?)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, ce)?,
                None => ce,
            });
            terms += step_terms;
        }
        prev = Some((
            agents.iter().map(|a| a.id).collect(),
            pred.q,
            agents.iter().map(|a| a.state).collect(),
        ));
    }
    let loss = match total {
        Some(l) => l,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    Ok(SequenceOutput { loss, terms })
}

/// Loss, term count and parameter gradients of one sample.
#[derive(Clone, Debug)]
pub struct SampleLoss {
    pub loss: f64,
    pub terms: usize,
    pub grads: GradientMap,
}

pub fn sequence_loss(
    model: &Rtgnn,
    params: &ParameterStore,
    sample: &TrainingSample,
    rate: f64,
    rng: &mut ChaCha8Rng,
    ctx: &LossContext,
) -> Result<SampleLoss> {
    let mut tape = Tape::new();
    let bound = model.bind_trainable(params, &mut tape)?;
    let out = sequence_forward(&mut tape, &bound, sample, rate, rng, ctx)?;
    let grads = tape.backward(out.loss)?;
    Ok(SampleLoss {
        loss: tape.value(out.loss).item(),
        terms: out.terms,
        grads: bound.vars().collect(&tape, &grads),
    })
}

/// Loss without gradients, at sampling rate 0.
pub fn evaluate_loss(
    model: &Rtgnn,
    params: &ParameterStore,
    sample: &TrainingSample,
    ctx: &LossContext,
) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let bound = model.bind_frozen(params, &mut tape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = sequence_forward(&mut tape, &bound, sample, 0.0, &mut rng, ctx)?;
    Ok((tape.value(out.loss).item(), out.terms))
}

fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Model, optimizer and progress after some number of completed epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParameterStore,
    pub adam: AdamState,
    pub epochs_done: usize,
    pub best_validation: f64,
    pub best_epoch: usize,
}

impl TrainState {
    pub fn new(params: ParameterStore, cfg: &TrainConfig) -> Self {
        let adam = AdamState::new(
            &params,
            AdamConfig {
                lr: cfg.learning_rate,
                ..AdamConfig::default()
            },
        );
        Self {
            params,
            adam,
            epochs_done: 0,
            best_validation: f64::INFINITY,
            best_epoch: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub wall_time: f64,
    pub sampling_rate: f64,
}

/// Where `train` writes checkpoints and the metrics log.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch:03}.ckpt"))
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
}

fn mean_loss(total: f64, terms: usize) -> f64 {
    if terms == 0 {
        0.0
    } else {
        total / terms as f64
    }
}

/// Validation loss per target term at sampling rate 0.
pub fn validation_loss(
    model: &Rtgnn,
    params: &ParameterStore,
    samples: &[TrainingSample],
    ctx: &LossContext,
) -> Result<f64> {
    use rayon::prelude::*;
    let parts: Vec<(f64, usize)> = samples
        .par_iter()
        .map(|s| evaluate_loss(model, params, s, ctx))
        .collect::<Result<_>>()?;
    let (total, terms) = parts.iter().fold((0.0, 0), |(a, n), (l, t)| (a + l, n + t));
    Ok(mean_loss(total, terms))
}

/// Runs one epoch of mini-batch Adam. `epoch` is 1-based.
pub fn train_epoch(
    model: &Rtgnn,
    state: &mut TrainState,
    samples: &[TrainingSample],
    cfg: &TrainConfig,
    epoch: usize,
    ctx: &LossContext,
) -> Result<f64> {
    use rand::seq::SliceRandom;
    use rayon::prelude::*;
    let rate = sampling_rate(epoch, cfg);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, epoch as u64])));
    let (mut total, mut terms) = (0.0, 0);
    for batch in order.chunks(cfg.batch_size.max(1)) {
        let params = &state.params;
        let results: Vec<SampleLoss> = batch
            .par_iter()
            .map(|&i| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, epoch as u64, i as u64]));
                sequence_loss(model, params, &samples[i], rate, &mut rng, ctx)
            })
            .collect::<Result<_>>()?;
        let mut grads: GradientMap = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect();
        let mut batch_terms = 0;
        for (r, &i) in results.iter().zip(batch) {
            if !r.loss.is_finite() {
                return Err(TrainError::NonFiniteLoss(samples[i].id.clone()));
            }
            rtgnn_autodiff::accumulate_gradients(&mut grads, &r.grads);
            total += r.loss;
            batch_terms += r.terms;
        }
        terms += batch_terms;
        if batch_terms == 0 {
            continue;
        }
        for g in grads.values_mut() {
            g.scale(1.0 / batch_terms as f64);
        }
        state.adam.step(&mut state.params, &grads)?;
    }
    Ok(mean_loss(total, terms))
}

/// Trains until `cfg.epochs` epochs are done, continuing from `state`.
/// Each epoch is checkpointed; the best-validation parameters are also
/// written to `best.ckpt`.
pub fn train(
    model: &Rtgnn,
    mut state: TrainState,
    train_set: &[TrainingSample],
    validation_set: &[TrainingSample],
    cfg: &TrainConfig,
    out: Option<&TrainOutput>,
) -> Result<(TrainState, Vec<EpochRecord>)> {
    if train_set.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let dynamics = Unicycle::default();
    let ctx = LossContext {
        target: cfg.target,
        sigma: &cfg.sigma,
        radius: cfg.region.radius,
        dynamics: &dynamics,
    };
    if let Some(o) = out {
        std::fs::create_dir_all(&o.dir)?;
        if state.epochs_done == 0 || !o.metrics().exists() {
            std::fs::write(o.metrics(), "epoch,split,loss,wall_time,sampling_rate\n")?;
        }
    }
    let mut history = Vec::new();
    for epoch in state.epochs_done + 1..=cfg.epochs {
        let start = Instant::now();
        let train_loss = train_epoch(model, &mut state, train_set, cfg, epoch, &ctx)?;
        let validation = if validation_set.is_empty() {
            train_loss
        } else {
            validation_loss(model, &state.params, validation_set, &ctx)?
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            validation_loss: validation,
            wall_time: start.elapsed().as_secs_f64(),
            sampling_rate: sampling_rate(epoch, cfg),
        };
        log::info!(
            "epoch {epoch}: train {train_loss:.4} validation {validation:.4} ({:.1} s)",
            record.wall_time
        );
        state.epochs_done = epoch;
        let improved = validation < state.best_validation;
        if improved {
            state.best_validation = validation;
            state.best_epoch = epoch;
        }
        if let Some(o) = out {
            let mut f = std::fs::OpenOptions::new().append(true).open(o.metrics())?;
            writeln!(f, "{epoch},train,{train_loss},{},{}", record.wall_time, record.sampling_rate)?;
            writeln!(f, "{epoch},validation,{validation},{},{}", record.wall_time, record.sampling_rate)?;
            save_checkpoint(&o.epoch_checkpoint(epoch), model.config(), cfg, &state)?;
            if improved {
                save_checkpoint(&o.best_checkpoint(), model.config(), cfg, &state)?;
            }
        }
        history.push(record);
    }
    Ok((state, history))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    model: GnnConfig,
    train: TrainConfig,
    train_digest: String,
    epochs_done: usize,
    adam_step: u64,
    best_validation: Option<f64>,
    best_epoch: usize,
}

const PARAM_PREFIX: &str = "param/";
const M1_PREFIX: &str = "adam_m/";
const M2_PREFIX: &str = "adam_v/";

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serializes a training state to the checkpoint container.
pub fn checkpoint_bytes(model: &GnnConfig, train: &TrainConfig, state: &TrainState) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        model: model.clone(),
        train: train.clone(),
        train_digest: hex(&train.digest()),
        epochs_done: state.epochs_done,
        adam_step: state.adam.step,
        best_validation: state.best_validation.is_finite().then_some(state.best_validation),
        best_epoch: state.best_epoch,
    };
    let mut tensors = BTreeMap::new();
    for (prefix, store) in [
        (PARAM_PREFIX, &state.params),
        (M1_PREFIX, &state.adam.first_moment),
        (M2_PREFIX, &state.adam.second_moment),
    ] {
        for (name, t) in store.iter() {
            tensors.insert(format!("{prefix}{name}"), t.clone());
        }
    }
    let container = Container {
        digest: model.digest(),
        metadata: serde_json::to_string(&meta).expect("metadata serializes"),
        tensors,
    };
    let mut buf = Vec::new();
    write_container(&mut buf, &container)?;
    Ok(buf)
}

pub fn save_checkpoint(path: &Path, model: &GnnConfig, train: &TrainConfig, state: &TrainState) -> Result<()> {
    let bytes = checkpoint_bytes(model, train, state)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

/// A decoded checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: GnnConfig,
    pub train: TrainConfig,
    pub state: TrainState,
}

/// Decodes a checkpoint, requiring its model digest to equal `expected`'s
/// when one is given.
pub fn checkpoint_from_bytes(bytes: &[u8], expected: Option<&GnnConfig>) -> Result<Checkpoint> {
    let c = read_container(&mut &bytes[..])?;
    let meta: CheckpointMeta =
        serde_json::from_str(&c.metadata).map_err(|e| TrainError::Metadata(e.to_string()))?;
    if c.digest != meta.model.digest() {
        return Err(TrainError::DigestMismatch);
    }
    if let Some(cfg) = expected {
        if cfg.digest() != c.digest {
            return Err(TrainError::DigestMismatch);
        }
    }
    let mut stores = [ParameterStore::new(), ParameterStore::new(), ParameterStore::new()];
    for (name, t) in c.tensors {
        let slot = [PARAM_PREFIX, M1_PREFIX, M2_PREFIX]
            .iter()
            .position(|p| name.starts_with(p))
            .ok_or_else(|| TrainError::Metadata(format!("unexpected tensor `{name}`")))?;
        let short = name.split_once('/').expect("prefixed").1.to_string();
        stores[slot].insert(short, t);
    }
    let [params, first_moment, second_moment] = stores;
    let model = Rtgnn::new(meta.model.clone()).map_err(|e| TrainError::Metadata(e.to_string()))?;
    model.check_parameters(&params)?;
    let adam = AdamState {
        config: AdamConfig {
            lr: meta.train.learning_rate,
            ..AdamConfig::default()
        },
        step: meta.adam_step,
        first_moment,
        second_moment,
    };
    Ok(Checkpoint {
        model: meta.model,
        train: meta.train,
        state: TrainState {
            params,
            adam,
            epochs_done: meta.epochs_done,
            best_validation: meta.best_validation.unwrap_or(f64::INFINITY),
            best_epoch: meta.best_epoch,
        },
    })
}

pub fn load_checkpoint(path: &Path, expected: Option<&GnnConfig>) -> Result<Checkpoint> {
    checkpoint_from_bytes(&std::fs::read(path)?, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{build_primitive_set, ControlInput, LatticeConfig};

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn schedule_breakpoints() {
        let c = cfg();
        assert_eq!(sampling_rate(0, &c), 0.0);
        assert_eq!(sampling_rate(10, &c), 0.0);
        assert_eq!(sampling_rate(20, &c), 0.25);
        assert_eq!(sampling_rate(30, &c), 0.5);
        assert_eq!(sampling_rate(45, &c), 0.5);
    }

    #[test]
    fn onehot_recovers_lattice_primitives() {
        let prims = build_primitive_set(LatticeConfig::default()).unwrap();
        let dynamics = Unicycle::default();
        let sigma = TargetSigma::default();
        let x = VehicleState::new(1.0, 2.0, 0.3, 6.0);
        for (a, w) in [(0.0, 0.0), (0.8, 0.05)] {
            let u = ControlInput::new(a, w);
            let next = dynamics.integrate(&x, &u, 0.5);
            let q = target_intention_onehot(&x, &next, &prims, &sigma, &dynamics);
            assert_eq!(q.argmax(), prims.nearest_index(&u));
        }
        let next = dynamics.integrate(&x, &ControlInput::ZERO, 0.5);
        assert_eq!(target_intention_onehot(&x, &next, &prims, &sigma, &dynamics).argmax(), 220);
    }

    #[test]
    fn gaussian_ratio_on_two_primitives() {
        let prims = build_primitive_set(LatticeConfig {
            accel_min: -1.0,
            accel_max: 1.0,
            accel_count: 1,
            omega_min: -0.1,
            omega_max: 0.1,
            omega_count: 3,
            dt: 0.5,
        })
        .unwrap();
        let dynamics = Unicycle::default();
        let sigma = TargetSigma {
            x: 1.0,
            y: 1.0,
            theta: 0.1,
            v: 1.0,
        };
        let x = VehicleState::new(0.0, 0.0, 0.0, 2.0);
        let next = VehicleState::new(1.0, 0.01, 0.02, 2.0);
        let d = primitive_distances(&x, &next, &prims, &sigma, &dynamics);
        let q = target_intention_gaussian(&x, &next, &prims, &sigma, &dynamics);
        let p = q.probabilities();
        assert!((p[0] / p[1] - (-0.5 * (d[0] - d[1])).exp()).abs() < 1e-12);
    }

    #[test]
    fn wide_sigma_is_nearly_uniform() {
        let prims = build_primitive_set(LatticeConfig::default()).unwrap();
        let dynamics = Unicycle::default();
        let s = TargetSigma::default();
        let wide = TargetSigma {
            x: s.x * 1e6,
            y: s.y * 1e6,
            theta: s.theta * 1e6,
            v: s.v * 1e6,
        };
        let x = VehicleState::new(0.0, 0.0, 0.0, 5.0);
        let next = VehicleState::new(2.4, 0.1, 0.05, 5.3);
        let q = target_intention_gaussian(&x, &next, &prims, &wide, &dynamics);
        let max = q.probabilities().iter().copied().fold(f64::MIN, f64::max);
        let min = q.probabilities().iter().copied().fold(f64::MAX, f64::min);
        assert!(max - min < 1e-6);
    }

    #[test]
    fn underflow_falls_back_to_onehot() {
        let prims = build_primitive_set(LatticeConfig::toy()).unwrap();
        let dynamics = Unicycle::default();
        let x = VehicleState::new(0.0, 0.0, 0.0, 5.0);
        let far = VehicleState::new(500.0, 0.0, 0.0, 5.0);
        let q = target_intention_gaussian(&x, &far, &prims, &TargetSigma::default(), &dynamics);
        let one = target_intention_onehot(&x, &far, &prims, &TargetSigma::default(), &dynamics);
        assert_eq!(q, one);
    }
}
