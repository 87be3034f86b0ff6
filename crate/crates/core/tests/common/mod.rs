#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rtgnn::dynamics::{MotionPrimitiveSet, Pose2, VehicleState};
use rtgnn::gnn::{intention_tensor, GnnInputs, Rtgnn};
use rtgnn::graph::{build_graph, TrafficGraph};
use rtgnn::map::{Lane, SemanticMap};
use rtgnn::traffic::{AgentKind, AgentState, Intention};
use rtgnn_autodiff::{ParameterStore, Tape, Tensor};

/// Two eastbound lanes with a crossing road at x = 20.
pub fn road_map() -> SemanticMap {
    SemanticMap {
        drivable: vec![
            vec![[-60.0, -1.75], [60.0, -1.75], [60.0, 5.25], [-60.0, 5.25]],
            vec![[16.5, -40.0], [23.5, -40.0], [23.5, 40.0], [16.5, 40.0]],
        ],
        lanes: vec![
            Lane::new(vec![[-60.0, 0.0], [0.0, 0.0], [60.0, 0.0]]),
            Lane::new(vec![[-60.0, 3.5], [60.0, 3.5]]),
            Lane::new(vec![[18.25, -40.0], [18.25, 40.0]]),
        ],
    }
}

pub fn random_distribution(rng: &mut ChaCha8Rng, m: usize) -> Intention {
    let w: Vec<f64> = (0..m).map(|_| rng.random::<f64>().powi(4)).collect();
    let s: f64 = w.iter().sum();
    Intention::new(w.into_iter().map(|v| v / s).collect()).unwrap()
}

/// `n` agents within 20 m of the origin: node 0 is the ego, roughly a
/// quarter are pedestrians, vehicles carry random intentions.
pub fn random_agents(rng: &mut ChaCha8Rng, n: usize, prims: &MotionPrimitiveSet) -> Vec<AgentState> {
    (0..n)
        .map(|i| {
            let kind = if i == 0 {
                AgentKind::Ego
            } else if rng.random_bool(0.25) {
                AgentKind::Pedestrian
            } else {
                AgentKind::Vehicle
            };
            let s = VehicleState::new(
                rng.random_range(-20.0..20.0),
                rng.random_range(-12.0..12.0),
                rng.random_range(-3.1..3.1),
                rng.random_range(0.0..12.0),
            );
            let mut a = AgentState::new(i as u64 * 3 + 1, kind, s, prims);
            if kind != AgentKind::Pedestrian {
                a.intention = random_distribution(rng, prims.len());
            }
            a
        })
        .collect()
}

pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, prims: &MotionPrimitiveSet, map: &SemanticMap) -> TrafficGraph {
    build_graph(&random_agents(rng, n, prims), prims, map, 25.0).unwrap()
}

/// One network step on `g` with its stored intentions as input.
pub fn forward(model: &Rtgnn, params: &ParameterStore, g: &TrafficGraph) -> Tensor {
    let mut tape = Tape::new();
    let bound = model.bind_frozen(params, &mut tape).unwrap();
    let inputs = GnnInputs::from_graph(g, model.config().feature_scale);
    let q = tape.constant(intention_tensor(g));
    let pred = model.forward(&mut tape, bound.vars(), &inputs, q).unwrap();
    tape.value(pred.q).clone()
}

pub fn transform_agents(agents: &[AgentState], t: &Pose2) -> Vec<AgentState> {
    agents
        .iter()
        .map(|a| {
            let mut b = a.clone();
            let [x, y] = t.point_from_frame(a.state.position());
            b.state = VehicleState::new(x, y, a.state.theta + t.theta, a.state.v);
            b
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
