//! Recurrent multi-step prediction and the constant-velocity baseline.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rtgnn_autodiff::{ParameterStore, Tape, Tensor, TensorError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dynamics::{ControlInput, MotionPrimitiveSet, Unicycle, VehicleState};
use crate::gnn::{intention_tensor, GnnInputs, Rtgnn};
use crate::graph::{build_graph_with, condition_on_ego, GraphError, TrafficGraph};
use crate::map::SemanticMap;
use crate::metrics::{EvalAccumulator, EvalRow, MethodPrediction, MetricError, Trajectory};
use crate::scene::SceneSequence;
use crate::traffic::{select_local_agents, AgentKind, Intention, RegionConfig};
use crate::training::{target_intention_onehot, TargetSigma};

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("conditional rollout needs an ego-conditioned graph")]
    NotConditioned,
    #[error("{found} planned controls for a horizon of {horizon}")]
    PlanLength { found: usize, horizon: usize },
    #[error("sampled rollout needs at least one sample")]
    NoSamples,
    #[error("scene {0} has no ego")]
    NoEgo(String),
    #[error("scene {scene} has {steps} steps, need {needed}")]
    TooShort { scene: String, steps: usize, needed: usize },
    #[error("model returned invalid intentions: {0}")]
    Intention(String),
}

pub type Result<T> = std::result::Result<T, RolloutError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RolloutMode {
    MaxLikelihood,
    Sampled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutConfig {
    pub horizon: usize,
    pub mode: RolloutMode,
    /// Planned ego controls, one per step.
    pub conditional: Option<Vec<ControlInput>>,
    pub seed: u64,
    pub samples: usize,
}

impl RolloutConfig {
    pub fn max_likelihood(horizon: usize) -> Self {
        Self {
            horizon,
            mode: RolloutMode::MaxLikelihood,
            conditional: None,
            seed: 0,
            samples: 1,
        }
    }

    pub fn sampled(horizon: usize, samples: usize, seed: u64) -> Self {
        Self {
            horizon,
            mode: RolloutMode::Sampled,
            conditional: None,
            seed,
            samples,
        }
    }

    pub fn with_plan(mut self, plan: Vec<ControlInput>) -> Self {
        self.conditional = Some(plan);
        self
    }
}

/// Maps the current graph and incoming intentions `[n, M]` to the next
/// intentions.
pub trait IntentionModel: Sync {
    fn prims(&self) -> &MotionPrimitiveSet;

    fn predict(&self, g: &TrafficGraph, q: &Tensor) -> Result<Tensor>;
}

/// A trained network with fixed parameters.
pub struct FrozenRtgnn<'a> {
    pub model: &'a Rtgnn,
    pub params: &'a ParameterStore,
}

impl IntentionModel for FrozenRtgnn<'_> {
    fn prims(&self) -> &MotionPrimitiveSet {
        self.model.prims()
    }

    fn predict(&self, g: &TrafficGraph, q: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params.register_constants(&mut tape);
        self.model.check_parameters(self.params)?;
        let inputs = GnnInputs::from_graph(g, self.model.config().feature_scale);
        let q_in = tape.constant(q.clone());
        let pred = self.model.forward(&mut tape, &vars, &inputs, q_in)?;
        Ok(tape.value(pred.q).clone())
    }
}

fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(index.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn single_rollout(
    model: &dyn IntentionModel,
    g0: &TrafficGraph,
    map: &SemanticMap,
    cfg: &RolloutConfig,
    mut rng: Option<ChaCha8Rng>,
) -> Result<Trajectory> {
    let prims = model.prims();
    let dynamics = Unicycle::default();
    let ego = g0.ego_index();
    let mut g = g0.clone();
    let mut q = intention_tensor(&g);
    let mut tracks: Vec<Vec<[f64; 2]>> = vec![Vec::with_capacity(cfg.horizon); g.len()];
    for h in 0..cfg.horizon {
        if let (Some(plan), Some(_)) = (&cfg.conditional, ego) {
            g = condition_on_ego(&g, &plan[h], prims)?;
            q = intention_tensor(&g);
        }
        let next = model.predict(&g, &q)?;
        let mut states = Vec::with_capacity(g.len());
        for (i, node) in g.nodes().iter().enumerate() {
            let control = match (&cfg.conditional, node.agent.kind) {
                (Some(plan), AgentKind::Ego) => plan[h],
                (_, AgentKind::Pedestrian) => ControlInput::ZERO,
                _ => {
                    let row = Intention::new(next.row(i).to_vec()).map_err(|e| RolloutError::Intention(e.to_string()))?;
                    let idx = match rng.as_mut() {
                        Some(r) => row.sample_with(r.random::<f64>()),
                        None => row.argmax(),
                    };
                    prims.control(idx)
                }
            };
            let s = dynamics.integrate(&node.agent.state, &control, prims.dt());
            tracks[i].push(s.position());
            states.push(s);
        }
        let intentions = (0..g.len())
            .map(|i| Intention::new(next.row(i).to_vec()).map_err(|e| RolloutError::Intention(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        g = g.relocated(&states, prims, map, &dynamics)?;
        g.set_intentions(intentions);
        q = intention_tensor(&g);
    }
    let ids = g0.nodes().iter().map(|n| n.agent.id);
    Ok(Trajectory::new(cfg.horizon, ids.zip(tracks).collect())?)
}

/// Applies the model recurrently for `cfg.horizon` steps. The node and edge
/// sets of `g0` are kept for the whole horizon. Returns one trajectory in
/// max-likelihood mode and `cfg.samples` in sampled mode.
pub fn rollout(
    model: &dyn IntentionModel,
    g0: &TrafficGraph,
    map: &SemanticMap,
    cfg: &RolloutConfig,
) -> Result<Vec<Trajectory>> {
    if let Some(plan) = &cfg.conditional {
        if !g0.is_ego_conditioned() {
            return Err(RolloutError::NotConditioned);
        }
        if plan.len() != cfg.horizon {
            return Err(RolloutError::PlanLength {
                found: plan.len(),
                horizon: cfg.horizon,
            });
        }
    }
    match cfg.mode {
        RolloutMode::MaxLikelihood => Ok(vec![single_rollout(model, g0, map, cfg, None)?]),
        RolloutMode::Sampled => {
            if cfg.samples == 0 {
                return Err(RolloutError::NoSamples);
            }
            (0..cfg.samples)
                .into_par_iter()
                .map(|k| {
                    let rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, k as u64));
                    single_rollout(model, g0, map, cfg, Some(rng))
                })
                .collect()
        }
    }
}

/// Every agent of `g0` driven straight at its initial speed and heading.
pub fn constant_velocity_predict(g0: &TrafficGraph, horizon: usize, dt: f64) -> Trajectory {
    let dynamics = Unicycle::default();
    let tracks: BTreeMap<u64, Vec<[f64; 2]>> = g0
        .nodes()
        .iter()
        .map(|n| {
            let mut s = n.agent.state;
            let pts = (0..horizon)
                .map(|_| {
                    s = dynamics.integrate(&s, &ControlInput::ZERO, dt);
                    s.position()
                })
                .collect();
            (n.agent.id, pts)
        })
        .collect();
    Trajectory::new(horizon, tracks).expect("finite states give finite waypoints")
}

/// Integrates `plan` from `start`, returning the positions after each step.
pub fn integrate_plan(start: &VehicleState, plan: &[ControlInput], dt: f64) -> Vec<[f64; 2]> {
    let dynamics = Unicycle::default();
    let mut s = *start;
    plan.iter()
        .map(|u| {
            s = dynamics.integrate(&s, u, dt);
            s.position()
        })
        .collect()
}

/// Initial graph of a scene: agents inside the ego's region at `step`.
pub fn scene_graph(
    scene: &SceneSequence,
    step: usize,
    region: &RegionConfig,
    prims: &MotionPrimitiveSet,
) -> Result<TrafficGraph> {
    let ego_id = scene.ego_id().ok_or_else(|| RolloutError::NoEgo(scene.id.clone()))?;
    let agents = scene.agents_at(step, prims);
    let ego = agents
        .iter()
        .find(|a| a.id == ego_id)
        .ok_or_else(|| RolloutError::NoEgo(scene.id.clone()))?;
    let local = select_local_agents(&agents, ego, region);
    Ok(build_graph_with(&local, prims, &scene.map, region.radius, &Unicycle::default())?)
}

/// Recorded positions over steps `step+1 ..= step+horizon` of the given
/// agents that are present throughout.
pub fn truth_trajectory(scene: &SceneSequence, step: usize, ids: &[u64], horizon: usize) -> Result<Trajectory> {
    let needed = step + horizon + 1;
    if scene.steps.len() < needed {
        return Err(RolloutError::TooShort {
            scene: scene.id.clone(),
            steps: scene.steps.len(),
            needed,
        });
    }
    let tracks = ids
        .iter()
        .filter_map(|&id| {
            let pts: Option<Vec<[f64; 2]>> = (step + 1..needed)
                .map(|t| scene.record(t, id).map(|r| [r.x, r.y]))
                .collect();
            pts.map(|p| (id, p))
        })
        .collect();
    Ok(Trajectory::new(horizon, tracks)?)
}

/// The ego's recorded motion as lattice controls: at each step the
/// primitive nearest (in Σ-distance) to the recorded next state.
pub fn recorded_ego_plan(
    scene: &SceneSequence,
    step: usize,
    horizon: usize,
    prims: &MotionPrimitiveSet,
) -> Result<Vec<ControlInput>> {
    let ego = scene.ego_id().ok_or_else(|| RolloutError::NoEgo(scene.id.clone()))?;
    let sigma = TargetSigma::default();
    let dynamics = Unicycle::default();
    (step..step + horizon)
        .map(|t| {
            let a = scene.record(t, ego);
            let b = scene.record(t + 1, ego);
            match (a, b) {
                (Some(a), Some(b)) => {
                    let q = target_intention_onehot(&a.state(), &b.state(), prims, &sigma, &dynamics);
                    Ok(prims.control(q.argmax()))
                }
                _ => Err(RolloutError::TooShort {
                    scene: scene.id.clone(),
                    steps: scene.steps.len(),
                    needed: step + horizon + 1,
                }),
            }
        })
        .collect()
}

/// Agents whose predictions are scored: vehicles other than the ego.
pub fn scored_agents(g: &TrafficGraph) -> Vec<u64> {
    g.nodes()
        .iter()
        .filter(|n| n.agent.kind == AgentKind::Vehicle)
        .map(|n| n.agent.id)
        .collect()
}

pub const BASELINE_METHOD: &str = "const_vel";
pub const ML_METHOD: &str = "rtgnn_ml";

pub fn min_k_method(k: usize) -> String {
    format!("rtgnn_min{k}")
}

/// What `evaluate_corpus` runs besides the baseline.
#[derive(Clone, Debug)]
pub struct EvalPlan {
    pub horizons: Vec<usize>,
    pub samples: usize,
    pub k: usize,
    pub seed: u64,
}

impl Default for EvalPlan {
    fn default() -> Self {
        Self {
            horizons: vec![2, 4, 6, 8],
            samples: 5,
            k: 5,
            seed: 0,
        }
    }
}

/// Rolls out every scene from step 0 and scores the constant-velocity
/// baseline and, when given, the model (max-likelihood and min-k over
/// samples). Scenes without a scored agent present over the longest
/// horizon are skipped.
pub fn evaluate_corpus(
    model: Option<&dyn IntentionModel>,
    scenes: &[SceneSequence],
    region: &RegionConfig,
    prims: &MotionPrimitiveSet,
    plan: &EvalPlan,
) -> Result<Vec<EvalRow>> {
    let horizon = plan.horizons.iter().copied().max().unwrap_or(0);
    let per_scene: Vec<Option<Vec<(String, MethodPrediction, Trajectory)>>> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| {
            let g0 = scene_graph(scene, 0, region, prims)?;
            let truth = truth_trajectory(scene, 0, &scored_agents(&g0), horizon)?;
            let ids = truth.ids();
            if ids.is_empty() {
                return Ok(None);
            }
            let mut out = vec![(
                BASELINE_METHOD.to_string(),
                MethodPrediction::Single(constant_velocity_predict(&g0, horizon, prims.dt()).restricted(&ids)),
                truth.clone(),
            )];
            if let Some(m) = model {
                let ml = rollout(m, &g0, &scene.map, &RolloutConfig::max_likelihood(horizon))?;
                out.push((ML_METHOD.to_string(), MethodPrediction::Single(ml[0].restricted(&ids)), truth.clone()));
                if plan.samples > 0 {
                    let cfg = RolloutConfig::sampled(horizon, plan.samples, derive_seed(plan.seed, i as u64));
                    let s = rollout(m, &g0, &scene.map, &cfg)?.iter().map(|t| t.restricted(&ids)).collect();
                    out.push((min_k_method(plan.k), MethodPrediction::Samples(s, plan.k), truth));
                }
            }
            Ok(Some(out))
        })
        .collect::<Result<_>>()?;
    let mut acc = EvalAccumulator::new();
    for (method, pred, truth) in per_scene.into_iter().flatten().flatten() {
        acc.add_scene(&method, &pred, &truth, &plan.horizons)?;
    }
    Ok(acc.rows(prims.dt()))
}

/// Sample label of max-likelihood rows in prediction files.
pub const ML_LABEL: &str = "ml";

/// One waypoint of a prediction file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub scene_id: String,
    pub agent_id: u64,
    /// `ml` or the sample number.
    pub sample: String,
    /// Steps after the start, from 1.
    pub step: usize,
    pub x: f64,
    pub y: f64,
}

pub fn prediction_records(scene_id: &str, label: &str, t: &Trajectory) -> Vec<PredictionRecord> {
    t.tracks()
        .iter()
        .flat_map(|(&id, pts)| {
            pts.iter().enumerate().map(move |(k, p)| PredictionRecord {
                scene_id: scene_id.to_string(),
                agent_id: id,
                sample: label.to_string(),
                step: k + 1,
                x: p[0],
                y: p[1],
            })
        })
        .collect()
}

pub fn write_predictions<W: std::io::Write>(w: W, records: &[PredictionRecord]) -> std::result::Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_predictions<R: std::io::Read>(r: R) -> std::result::Result<Vec<PredictionRecord>, csv::Error> {
    csv::Reader::from_reader(r).deserialize().collect()
}

#[allow(clippy::type_complexity)]
/// Regroups prediction records into trajectories keyed by scene and label.
pub fn group_predictions(
    records: &[PredictionRecord],
) -> Result<BTreeMap<String, BTreeMap<String, Trajectory>>> {
    // (scene, label) -> agent -> step -> waypoint
    let mut raw: BTreeMap<(String, String), BTreeMap<u64, BTreeMap<usize, [f64; 2]>>> = BTreeMap::new();
    for r in records {
        raw.entry((r.scene_id.clone(), r.sample.clone()))
            .or_default()
            .entry(r.agent_id)
            .or_default()
            .insert(r.step, [r.x, r.y]);
    }
    let mut out: BTreeMap<String, BTreeMap<String, Trajectory>> = BTreeMap::new();
    for ((scene, label), agents) in raw {
        let horizon = agents.values().map(|s| s.len()).max().unwrap_or(0);
        let mut tracks = BTreeMap::new();
        for (id, steps) in agents {
            if !steps.keys().copied().eq(1..=steps.len()) {
                return Err(RolloutError::Intention(format!(
                    "scene {scene} agent {id}: prediction steps must run 1..=H"
                )));
            }
            tracks.insert(id, steps.into_values().collect());
        }
        out.entry(scene).or_default().insert(label, Trajectory::new(horizon, tracks)?);
    }
    Ok(out)
}

/// One planned ego control of a conditional-inference file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlRecord {
    pub scene_id: String,
    /// From 0.
    pub step: usize,
    pub a: f64,
    pub omega: f64,
}

pub fn read_controls<R: std::io::Read>(r: R) -> std::result::Result<Vec<ControlRecord>, csv::Error> {
    csv::Reader::from_reader(r).deserialize().collect()
}

pub fn write_controls<W: std::io::Write>(w: W, records: &[ControlRecord]) -> std::result::Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
