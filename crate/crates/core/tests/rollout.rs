mod common;

use std::collections::BTreeMap;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtgnn::dynamics::{integrate_unicycle, ControlInput, VehicleState};
use rtgnn::gnn::{GnnConfig, Rtgnn};
use rtgnn::graph::{build_graph, condition_on_ego};
use rtgnn::metrics::*;
use rtgnn::rollout::*;
use rtgnn::traffic::{AgentKind, AgentState};

fn tracks(n_agents: usize, horizon: usize) -> impl Strategy<Value = Trajectory> {
    prop::collection::vec(prop::collection::vec((-50.0..50.0f64, -50.0..50.0f64), horizon), n_agents).prop_map(
        move |agents| {
            let t: BTreeMap<u64, Vec<[f64; 2]>> = agents
                .into_iter()
                .enumerate()
                .map(|(i, pts)| (i as u64, pts.into_iter().map(|(x, y)| [x, y]).collect()))
                .collect();
            Trajectory::new(horizon, t).unwrap()
        },
    )
}

fn shifted(t: &Trajectory, dx: f64, dy: f64) -> Trajectory {
    let moved = t
        .tracks()
        .iter()
        .map(|(&id, p)| (id, p.iter().map(|q| [q[0] + dx, q[1] + dy]).collect()))
        .collect();
    Trajectory::new(t.horizon(), moved).unwrap()
}

proptest! {
    #[test]
    fn exact_match_scores_zero(t in tracks(3, 6)) {
        prop_assert_eq!(ade(&t, &t).unwrap(), 0.0);
        prop_assert_eq!(fde(&t, &t).unwrap(), 0.0);
        prop_assert_eq!(min_k_ade(&[t.clone(), t.clone()], &t, 2).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_scores_its_length(t in tracks(2, 5), angle in 0.0..std::f64::consts::TAU, r in 0.0..10.0f64) {
        let p = shifted(&t, r * angle.cos(), r * angle.sin());
        prop_assert!((ade(&p, &t).unwrap() - r).abs() < 1e-9);
        prop_assert!((fde(&p, &t).unwrap() - r).abs() < 1e-9);
    }

    #[test]
    fn metrics_are_symmetric(a in tracks(3, 4), b in tracks(3, 4)) {
        prop_assert_eq!(ade(&a, &b).unwrap(), ade(&b, &a).unwrap());
        prop_assert_eq!(fde(&a, &b).unwrap(), fde(&b, &a).unwrap());
    }

    #[test]
    fn min_k_is_monotone_and_bounded(truth in tracks(2, 4), samples in prop::collection::vec(tracks(2, 4), 6)) {
        let mut prev = f64::INFINITY;
        for k in 1..=6 {
            let m = min_k_ade(&samples, &truth, k).unwrap();
            prop_assert!(m <= prev);
            prev = m;
            let mf = min_k_fde(&samples, &truth, k).unwrap();
            for s in &samples[..k] {
                prop_assert!(m <= ade(s, &truth).unwrap() + 1e-12);
                prop_assert!(mf <= fde(s, &truth).unwrap() + 1e-12);
            }
        }
    }

    #[test]
    fn identical_samples_equal_plain_ade(truth in tracks(2, 4), s in tracks(2, 4)) {
        let k5 = vec![s.clone(); 5];
        prop_assert!((min_k_ade(&k5, &truth, 5).unwrap() - ade(&s, &truth).unwrap()).abs() < 1e-12);
        prop_assert!((min_k_fde(&k5, &truth, 5).unwrap() - fde(&s, &truth).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn one_exact_sample_zeroes_min_k(truth in tracks(2, 4), others in prop::collection::vec(tracks(2, 4), 4), slot in 0usize..5) {
        let mut set = others;
        set.insert(slot, truth.clone());
        prop_assert_eq!(min_k_ade(&set, &truth, 5).unwrap(), 0.0);
        prop_assert_eq!(min_k_fde(&set, &truth, 5).unwrap(), 0.0);
    }
}

fn agents(prims: &rtgnn::dynamics::MotionPrimitiveSet) -> Vec<AgentState> {
    vec![
        AgentState::new(0, AgentKind::Ego, VehicleState::new(0.0, 0.0, 0.0, 6.0), prims),
        AgentState::new(1, AgentKind::Vehicle, VehicleState::new(-9.0, 0.0, 0.0, 7.0), prims),
        AgentState::new(2, AgentKind::Vehicle, VehicleState::new(12.0, 3.5, 0.0, 5.0), prims),
        AgentState::new(3, AgentKind::Pedestrian, VehicleState::new(18.0, -4.0, 1.57, 1.2), prims),
    ]
}

#[test]
fn straight_truth_matches_constant_velocity() {
    let model = Rtgnn::new(GnnConfig::toy()).unwrap();
    let prims = model.prims();
    let g = build_graph(&agents(prims), prims, &road_map(), 25.0).unwrap();
    let cv = constant_velocity_predict(&g, 8, 0.5);
    let truth: BTreeMap<u64, Vec<[f64; 2]>> = g
        .nodes()
        .iter()
        .map(|n| {
            let s = n.agent.state;
            let pts = (1..=8)
                .map(|k| {
                    let d = s.v * 0.5 * k as f64;
                    [s.x + d * s.theta.cos(), s.y + d * s.theta.sin()]
                })
                .collect();
            (n.agent.id, pts)
        })
        .collect();
    let truth = Trajectory::new(8, truth).unwrap();
    assert!(ade(&cv, &truth).unwrap() < 1e-12);
    assert!(fde(&cv, &truth).unwrap() < 1e-12);
}

#[test]
fn conditioned_ego_follows_plan_exactly() {
    let model = Rtgnn::new(GnnConfig::toy()).unwrap();
    let params = model.init_parameters(1);
    let prims = model.prims().clone();
    let frozen = FrozenRtgnn { model: &model, params: &params };
    let g = build_graph(&agents(&prims), &prims, &road_map(), 25.0).unwrap();
    // off-lattice controls: the ego must still integrate them exactly
    let plan: Vec<ControlInput> = (0..6).map(|k| ControlInput::new(1.3 - 0.4 * k as f64, 0.07 * k as f64)).collect();
    let gc = condition_on_ego(&g, &plan[0], &prims).unwrap();
    let cfg = RolloutConfig::max_likelihood(6).with_plan(plan.clone());
    let ml = &rollout(&frozen, &gc, &road_map(), &cfg).unwrap()[0];
    let expect = integrate_plan(&g.nodes()[0].agent.state, &plan, 0.5);
    assert_eq!(ml.track(0).unwrap(), expect.as_slice());
    let sampled = rollout(&frozen, &gc, &road_map(), &RolloutConfig::sampled(6, 3, 4).with_plan(plan)).unwrap();
    for s in &sampled {
        assert_eq!(s.track(0).unwrap(), expect.as_slice());
    }
}

#[test]
fn pedestrians_keep_constant_velocity() {
    let model = Rtgnn::new(GnnConfig::toy()).unwrap();
    let params = model.init_parameters(2);
    let prims = model.prims().clone();
    let g = build_graph(&agents(&prims), &prims, &road_map(), 25.0).unwrap();
    let frozen = FrozenRtgnn { model: &model, params: &params };
    let ml = &rollout(&frozen, &g, &road_map(), &RolloutConfig::max_likelihood(4)).unwrap()[0];
    let cv = constant_velocity_predict(&g, 4, 0.5);
    assert_eq!(ml.track(3), cv.track(3));
}

#[test]
fn sampling_is_seeded() {
    let model = Rtgnn::new(GnnConfig::toy()).unwrap();
    let params = model.init_parameters(3);
    let prims = model.prims().clone();
    let g = build_graph(&agents(&prims), &prims, &road_map(), 25.0).unwrap();
    let frozen = FrozenRtgnn { model: &model, params: &params };
    let run = |seed| rollout(&frozen, &g, &road_map(), &RolloutConfig::sampled(4, 2, seed)).unwrap();
    let a = run(10);
    assert_eq!(a, run(10));
    assert_ne!(a, run(11));
}

#[test]
fn rollouts_depend_only_on_the_graph() {
    let model = Rtgnn::new(GnnConfig::toy()).unwrap();
    let params = model.init_parameters(4);
    let prims = model.prims().clone();
    let map = road_map();
    let now = agents(&prims);
    let g_direct = build_graph(&now, &prims, &map, 25.0).unwrap();

    // reach the same graph by relocating an earlier snapshot
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let earlier: Vec<AgentState> = now
        .iter()
        .map(|a| {
            let mut b = a.clone();
            b.state.x -= rng.random_range(0.0..1.0);
            b.intention = random_distribution(&mut rng, prims.len());
            b
        })
        .collect();
    let g_old = build_graph(&earlier, &prims, &map, 25.0).unwrap();
    let states: Vec<VehicleState> = now.iter().map(|a| a.state).collect();
    let mut g_moved = g_old.relocated(&states, &prims, &map, &rtgnn::dynamics::Unicycle::default()).unwrap();
    g_moved.set_intentions(now.iter().map(|a| a.intention.clone()).collect());
    assert_eq!(g_moved, g_direct);

    let frozen = FrozenRtgnn { model: &model, params: &params };
    let cfg = RolloutConfig::sampled(5, 2, 9);
    assert_eq!(
        rollout(&frozen, &g_moved, &map, &cfg).unwrap(),
        rollout(&frozen, &g_direct, &map, &cfg).unwrap()
    );
}

#[test]
fn prediction_files_round_trip() {
    let t = Trajectory::new(2, BTreeMap::from([(4, vec![[1.0, 2.0], [3.0, 4.5]]), (9, vec![[0.0, 0.0], [-1.0, 0.25]])])).unwrap();
    let mut recs = prediction_records("s1", ML_LABEL, &t);
    recs.extend(prediction_records("s1", "0", &t));
    let mut buf = Vec::new();
    write_predictions(&mut buf, &recs).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(text.lines().next(), Some("scene_id,agent_id,sample,step,x,y"));
    let back = read_predictions(buf.as_slice()).unwrap();
    assert_eq!(back, recs);
    let grouped = group_predictions(&back).unwrap();
    assert_eq!(grouped["s1"][ML_LABEL], t);
    assert_eq!(grouped["s1"]["0"], t);
}

#[test]
fn ego_plan_recovers_lattice_controls() {
    let prims = rtgnn::dynamics::build_primitive_set(rtgnn::dynamics::LatticeConfig::default()).unwrap();
    let scene = rtgnn::scenario::generate_scene(
        &rtgnn::scenario::ScenarioSpec::new(rtgnn::scenario::ScenarioKind::Intersection),
        "x".into(),
        5,
        &prims,
    )
    .unwrap();
    let plan = recorded_ego_plan(&scene, 0, 8, &prims).unwrap();
    let ego = scene.ego_id().unwrap();
    let mut s = scene.record(0, ego).unwrap().state();
    for (k, u) in plan.iter().enumerate() {
        s = integrate_unicycle(&s, u, 0.5);
        let r = scene.record(k + 1, ego).unwrap();
        assert!((s.x - r.x).hypot(s.y - r.y) < 1e-9);
    }
}
