use rtgnn::dynamics::{build_primitive_set, integrate_unicycle, LatticeConfig, MotionPrimitiveSet};
use rtgnn::scenario::{generate_corpus, generate_scene, ScenarioError, ScenarioKind, ScenarioSpec};
use rtgnn::scene::{read_scenes, write_scenes, SceneSequence};
use rtgnn::traffic::AgentKind;
use rtgnn::training::TargetSigma;

fn prims() -> MotionPrimitiveSet {
    build_primitive_set(LatticeConfig::default()).unwrap()
}

/// Smallest Σ-distance from a recorded transition to any primitive,
/// by exhaustive search.
fn best_residual(scene: &SceneSequence, prims: &MotionPrimitiveSet) -> f64 {
    let sigma = TargetSigma::default();
    let mut worst: f64 = 0.0;
    for t in 0..scene.steps.len() - 1 {
        for a in &scene.steps[t].agents {
            let Some(b) = scene.record(t + 1, a.id) else { continue };
            let best = (0..prims.len())
                .map(|i| {
                    let p = integrate_unicycle(&a.state(), &prims.control(i), 0.5);
                    let dth = (p.theta - b.theta).sin().atan2((p.theta - b.theta).cos());
                    (((p.x - b.x) / sigma.x).powi(2)
                        + ((p.y - b.y) / sigma.y).powi(2)
                        + (dth / sigma.theta).powi(2)
                        + ((p.v - b.v) / sigma.v).powi(2))
                    .sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            worst = worst.max(best);
        }
    }
    worst
}

#[test]
fn generated_transitions_are_near_the_lattice() {
    let prims = prims();
    let scenes = generate_corpus(&ScenarioSpec::all_kinds(), 40, 17, &prims).unwrap();
    for s in &scenes {
        s.validate().unwrap();
        assert!(best_residual(s, &prims) < 3.0, "{}", s.id);
    }
}

#[test]
fn same_seed_gives_identical_bytes() {
    let prims = prims();
    let bytes = |seed| {
        let mut buf = Vec::new();
        write_scenes(&mut buf, &generate_corpus(&ScenarioSpec::all_kinds(), 10, seed, &prims).unwrap()).unwrap();
        buf
    };
    let a = bytes(7);
    assert_eq!(a, bytes(7));
    assert_ne!(a, bytes(8));
    assert_eq!(read_scenes(a.as_slice()).unwrap().len(), 10);
}

#[test]
fn followers_never_pass_their_leader() {
    let prims = prims();
    let spec = ScenarioSpec {
        vehicles: [2, 2],
        ..ScenarioSpec::new(ScenarioKind::CarFollowing)
    };
    for seed in 0..40 {
        let scene = generate_scene(&spec, format!("cf{seed}"), seed, &prims).unwrap();
        let first = &scene.steps[0].agents;
        assert_eq!(first.len(), 2);
        let (lead, follow) = if first[0].x > first[1].x { (first[0].id, first[1].id) } else { (first[1].id, first[0].id) };
        for t in 0..scene.steps.len() {
            let l = scene.record(t, lead).unwrap();
            let f = scene.record(t, follow).unwrap();
            assert!(l.x - f.x > 4.5, "seed {seed} step {t}: gap {}", l.x - f.x);
        }
    }
}

#[test]
fn every_scene_has_ego_zero() {
    let prims = prims();
    for kind in ScenarioKind::ALL {
        let scene = generate_scene(&ScenarioSpec::new(kind), "k".into(), 3, &prims).unwrap();
        assert_eq!(scene.ego_id(), Some(0));
        assert_eq!(scene.scenario, kind.name());
        assert_eq!(scene.steps.len(), 9);
        let ped = scene.steps[0].agents.iter().any(|a| a.kind == AgentKind::Pedestrian);
        assert_eq!(ped, kind == ScenarioKind::PedestrianCross);
    }
}

#[test]
fn bad_specs_rejected() {
    let prims = prims();
    let fast = ScenarioSpec {
        speed: [5.0, 25.0],
        ..ScenarioSpec::new(ScenarioKind::LaneChange)
    };
    assert!(matches!(generate_scene(&fast, "x".into(), 0, &prims), Err(ScenarioError::Speed(..))));
    let short = ScenarioSpec {
        steps: 1,
        ..ScenarioSpec::new(ScenarioKind::LaneChange)
    };
    assert!(generate_scene(&short, "x".into(), 0, &prims).is_err());
    assert!(matches!(generate_corpus(&[], 3, 0, &prims), Err(ScenarioError::NoSpecs)));
}
