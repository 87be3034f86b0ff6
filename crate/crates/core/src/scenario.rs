//! Synthetic scene generator.
//!
//! Vehicles follow fixed routes with a pure-pursuit steering law and an
//! IDM-style longitudinal law. Both outputs are snapped to the primitive
//! lattice before integration, so every recorded transition is exactly one
//! primitive. Pedestrians walk at constant velocity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dynamics::{wrap_angle, ControlInput, MotionPrimitiveSet, Unicycle, VehicleState};
use crate::map::{Lane, SemanticMap};
use crate::scene::{AgentRecord, SceneSequence, StepRecord, SCENE_HZ, SCENE_VERSION};
use crate::traffic::AgentKind;

const LANE_WIDTH: f64 = 3.5;
const ROUTE_STEP: f64 = 0.5;
const VEHICLE_LENGTH: f64 = 4.5;
const MAX_SPEED: f64 = 20.0;
/// Highest turn rate the speed planner allows on curves.
const CURVE_OMEGA: f64 = 0.4;
const COMFORT_DECEL: f64 = 2.5;
/// Look-ahead of the speed planner and leader detection, matching the
/// graph radius.
const SENSING_RANGE: f64 = 25.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    CarFollowing,
    Intersection,
    LaneChange,
    ParkedMerge,
    PedestrianCross,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 5] = [
        ScenarioKind::CarFollowing,
        ScenarioKind::Intersection,
        ScenarioKind::LaneChange,
        ScenarioKind::ParkedMerge,
        ScenarioKind::PedestrianCross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::CarFollowing => "car_following",
            ScenarioKind::Intersection => "intersection",
            ScenarioKind::LaneChange => "lane_change",
            ScenarioKind::ParkedMerge => "parked_merge",
            ScenarioKind::PedestrianCross => "pedestrian_cross",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    /// Inclusive range of moving vehicles, ego included.
    pub vehicles: [usize; 2],
    /// Inclusive range of initial and desired speeds, m/s.
    pub speed: [f64; 2],
    /// Recorded steps at 2 Hz.
    pub steps: usize,
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind) -> Self {
        Self {
            kind,
            vehicles: [2, 3],
            speed: [5.0, 12.0],
            steps: 9,
        }
    }

    /// One default spec per scenario kind.
    pub fn all_kinds() -> Vec<ScenarioSpec> {
        ScenarioKind::ALL.iter().map(|&k| Self::new(k)).collect()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let [lo, hi] = self.speed;
        if !(0.0..=MAX_SPEED).contains(&lo) || !(lo..=MAX_SPEED).contains(&hi) {
            return Err(ScenarioError::Speed(lo, hi));
        }
        if self.vehicles[0] == 0 || self.vehicles[0] > self.vehicles[1] || self.vehicles[1] > 6 {
            return Err(ScenarioError::Count(self.vehicles));
        }
        if self.steps < 2 {
            return Err(ScenarioError::Steps(self.steps));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("speed range [{0}, {1}] is outside the reachable envelope [0, 20] m/s")]
    Speed(f64, f64),
    #[error("vehicle count range {0:?} must be increasing within 1..=6")]
    Count([usize; 2]),
    #[error("scenes need at least 2 steps, got {0}")]
    Steps(usize),
    #[error("no scenario specs given")]
    NoSpecs,
}

/// Densely sampled path with arc length and heading per point.
#[derive(Clone, Debug)]
struct Route {
    pts: Vec<[f64; 2]>,
    s: Vec<f64>,
    heading: Vec<f64>,
    curvature: Vec<f64>,
}

/// Turtle-style path builder.
struct RouteBuilder {
    pts: Vec<[f64; 2]>,
    heading: f64,
}

impl RouteBuilder {
    fn new(start: [f64; 2], heading: f64) -> Self {
        Self {
            pts: vec![start],
            heading,
        }
    }

    fn last(&self) -> [f64; 2] {
        *self.pts.last().expect("non-empty")
    }

    fn straight(mut self, length: f64) -> Self {
        let n = (length / ROUTE_STEP).round().max(1.0) as usize;
        let p = self.last();
        let (s, c) = self.heading.sin_cos();
        for k in 1..=n {
            let d = length * k as f64 / n as f64;
            self.pts.push([p[0] + c * d, p[1] + s * d]);
        }
        self
    }

    /// Circular arc; positive `angle` turns left.
    fn arc(mut self, radius: f64, angle: f64) -> Self {
        let n = (radius * angle.abs() / ROUTE_STEP).round().max(1.0) as usize;
        let p = self.last();
        let side = angle.signum();
        let (s, c) = self.heading.sin_cos();
        let center = [p[0] - side * s * radius, p[1] + side * c * radius];
        let start = self.heading - side * std::f64::consts::FRAC_PI_2;
        for k in 1..=n {
            let a = start + angle * k as f64 / n as f64;
            self.pts.push([center[0] + radius * a.cos(), center[1] + radius * a.sin()]);
        }
        self.heading += angle;
        self
    }

    /// Smooth lateral shift by `offset` (positive to the left) over `length`.
    fn shift(mut self, length: f64, offset: f64) -> Self {
        let n = (length / ROUTE_STEP).round().max(1.0) as usize;
        let p = self.last();
        let (s, c) = self.heading.sin_cos();
        for k in 1..=n {
            let u = k as f64 / n as f64;
            let lat = offset * (1.0 - (std::f64::consts::PI * u).cos()) / 2.0;
            let d = length * u;
            self.pts.push([p[0] + c * d - s * lat, p[1] + s * d + c * lat]);
        }
        self
    }

    fn build(self) -> Route {
        Route::new(self.pts)
    }
}

impl Route {
    fn new(pts: Vec<[f64; 2]>) -> Self {
        let n = pts.len();
        let mut s = vec![0.0; n];
        for i in 1..n {
            s[i] = s[i - 1] + (pts[i][0] - pts[i - 1][0]).hypot(pts[i][1] - pts[i - 1][1]);
        }
        let heading: Vec<f64> = (0..n)
            .map(|i| {
                let (a, b) = if i + 1 < n { (i, i + 1) } else { (i - 1, i) };
                (pts[b][1] - pts[a][1]).atan2(pts[b][0] - pts[a][0])
            })
            .collect();
        let curvature = (0..n)
            .map(|i| {
                if i == 0 || i + 1 >= n {
                    return 0.0;
                }
                let ds = s[i + 1] - s[i - 1];
                wrap_angle(heading[i + 1] - heading[i - 1]) / ds.max(1e-9)
            })
            .collect();
        Self {
            pts,
            s,
            heading,
            curvature,
        }
    }

    fn length(&self) -> f64 {
        *self.s.last().expect("non-empty")
    }

    /// Arc length of the closest point and signed lateral offset (left
    /// positive).
    fn project(&self, p: [f64; 2]) -> (f64, f64) {
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..self.pts.len() - 1 {
            let a = self.pts[i];
            let b = self.pts[i + 1];
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let len2 = dx * dx + dy * dy;
            let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0);
            let (ex, ey) = (p[0] - a[0] - t * dx, p[1] - a[1] - t * dy);
            let d2 = ex * ex + ey * ey;
            if d2 < best.0 {
                let side = (dx * ey - dy * ex).signum();
                best = (d2, self.s[i] + t * len2.sqrt(), side * d2.sqrt());
            }
        }
        (best.1, best.2)
    }

    fn index_at(&self, s: f64) -> usize {
        self.s.partition_point(|&v| v < s).min(self.pts.len() - 1)
    }

    /// Pose at arc length `s`, extrapolating straight past the end.
    fn pose_at(&self, s: f64) -> ([f64; 2], f64) {
        if s >= self.length() {
            let h = *self.heading.last().expect("non-empty");
            let p = *self.pts.last().expect("non-empty");
            let d = s - self.length();
            return ([p[0] + h.cos() * d, p[1] + h.sin() * d], h);
        }
        let i = self.index_at(s.max(0.0));
        (self.pts[i], self.heading[i])
    }

    fn heading_at(&self, s: f64) -> f64 {
        self.pose_at(s).1
    }

    /// Speed limit from upcoming curvature within `horizon` meters.
    fn curve_speed(&self, s: f64, horizon: f64) -> f64 {
        let mut limit = f64::INFINITY;
        let i0 = self.index_at(s.max(0.0));
        for i in i0..self.pts.len() {
            let d = self.s[i] - s;
            if d > horizon {
                break;
            }
            let k = self.curvature[i].abs();
            if k > 1e-6 {
                let v = CURVE_OMEGA / k;
                limit = limit.min((v * v + 2.0 * COMFORT_DECEL * d.max(0.0)).sqrt());
            }
        }
        limit
    }

    fn lane(&self, spacing: f64) -> Lane {
        let stride = (spacing / ROUTE_STEP).round().max(1.0) as usize;
        let mut pts: Vec<[f64; 2]> = self.pts.iter().step_by(stride).copied().collect();
        let last = *self.pts.last().expect("non-empty");
        if *pts.last().expect("non-empty") != last {
            pts.push(last);
        }
        Lane::new(pts)
    }
}

#[derive(Clone, Debug)]
struct SimAgent {
    id: u64,
    kind: AgentKind,
    state: VehicleState,
    /// `None` for pedestrians and parked vehicles.
    route: Option<Route>,
    desired_speed: f64,
}

fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<[f64; 2]> {
    vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]]
}

fn state_on(route: &Route, s: f64, v: f64) -> VehicleState {
    let (p, h) = route.pose_at(s);
    VehicleState::new(p[0], p[1], h, v)
}

struct Controller<'a> {
    prims: &'a MotionPrimitiveSet,
}

impl Controller<'_> {
    fn control(&self, me: &SimAgent, all: &[SimAgent]) -> ControlInput {
        let Some(route) = &me.route else {
            return ControlInput::ZERO;
        };
        let x = &me.state;
        let (s, _) = route.project(x.position());

        let lookahead = (0.8 * x.v + 4.0).clamp(5.0, 20.0);
        let (target, _) = route.pose_at(s + lookahead);
        let alpha = wrap_angle((target[1] - x.y).atan2(target[0] - x.x) - x.theta);
        let omega = x.v.max(1.0) * 2.0 * alpha.sin() / lookahead;

        let v0 = me.desired_speed.min(route.curve_speed(s, SENSING_RANGE));
        let mut gap = f64::INFINITY;
        let mut lead_v = 0.0;
        for other in all.iter().filter(|o| o.id != me.id) {
            let (so, lat) = route.project(other.state.position());
            let ahead = so - s;
            let width = if other.kind == AgentKind::Pedestrian { 2.5 } else { 2.0 };
            if ahead > 0.0 && ahead < SENSING_RANGE && lat.abs() < width && so < route.length() + 20.0 {
                let length = if other.kind == AgentKind::Pedestrian { 1.0 } else { VEHICLE_LENGTH };
                let g = (ahead - length).max(0.1);
                if g < gap {
                    gap = g;
                    lead_v = other.state.v * (other.state.theta - route.heading_at(so)).cos();
                }
            }
        }
        let (a_max, b, s0, headway) = (2.0, 3.0, 2.0, 1.2);
        let mut a = a_max * (1.0 - (x.v / v0.max(0.1)).powi(4));
        if gap.is_finite() {
            let dv = x.v - lead_v;
            let s_star = s0 + x.v * headway + x.v * dv / (2.0 * (a_max * b).sqrt());
            a -= a_max * (s_star.max(0.0) / gap).powi(2);
        }
        let snapped = self.prims.control(self.prims.nearest_index(&ControlInput::new(a, omega)));
        ControlInput::new(snapped.a, snapped.omega)
    }
}

fn straight_road_map(lanes: Vec<Lane>, x0: f64, x1: f64) -> SemanticMap {
    SemanticMap {
        drivable: vec![rect(x0, -LANE_WIDTH / 2.0, x1, 1.5 * LANE_WIDTH)],
        lanes,
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..=range[1])
    } else {
        range[0]
    }
}

fn vehicle(id: u64, route: Route, s: f64, v: f64, desired: f64) -> SimAgent {
    SimAgent {
        id,
        kind: if id == 0 { AgentKind::Ego } else { AgentKind::Vehicle },
        state: state_on(&route, s, v),
        route: Some(route),
        desired_speed: desired,
    }
}

/// Places `count` vehicles on one route, spaced backwards from `front`.
fn platoon(
    rng: &mut ChaCha8Rng,
    spec: &ScenarioSpec,
    route: &Route,
    first_id: u64,
    count: usize,
    front: f64,
) -> Vec<SimAgent> {
    let mut s = front;
    (0..count)
        .map(|k| {
            let v = uniform(rng, spec.speed);
            let a = vehicle(first_id + k as u64, route.clone(), s, v, v);
            s -= rng.random_range(10.0..18.0) + 0.8 * v;
            a
        })
        .collect()
}

fn ego_first(mut agents: Vec<SimAgent>, ego_slot: usize) -> Vec<SimAgent> {
    let ego_slot = ego_slot.min(agents.len() - 1);
    let ids: Vec<u64> = agents.iter().map(|a| a.id).collect();
    for (k, a) in agents.iter_mut().enumerate() {
        a.id = if k == ego_slot {
            0
        } else if ids[k] == 0 {
            ids[ego_slot]
        } else {
            ids[k]
        };
        if a.kind != AgentKind::Pedestrian && a.route.is_some() {
            a.kind = if a.id == 0 { AgentKind::Ego } else { AgentKind::Vehicle };
        }
    }
    agents.sort_by_key(|a| a.id);
    agents
}

fn setup(rng: &mut ChaCha8Rng, spec: &ScenarioSpec) -> (SemanticMap, Vec<SimAgent>) {
    let n = rng.random_range(spec.vehicles[0]..=spec.vehicles[1]);
    match spec.kind {
        ScenarioKind::CarFollowing => {
            let lane_y = if rng.random_bool(0.5) { 0.0 } else { LANE_WIDTH };
            let route = RouteBuilder::new([-100.0, lane_y], 0.0).straight(400.0).build();
            let other = RouteBuilder::new([-100.0, LANE_WIDTH - lane_y], 0.0).straight(400.0).build();
            let map = straight_road_map(vec![route.lane(2.0), other.lane(2.0)], -100.0, 300.0);
            let front = 100.0 + rng.random_range(0.0..20.0);
            let agents = platoon(rng, spec, &route, 0, n, front);
            let ego_slot = rng.random_range(0..n);
            (map, ego_first(agents, ego_slot))
        }
        ScenarioKind::LaneChange => {
            let merge_at = rng.random_range(100.0..125.0);
            let length = rng.random_range(25.0..40.0);
            let merging = RouteBuilder::new([-100.0, 0.0], 0.0)
                .straight(merge_at + 100.0)
                .shift(length, LANE_WIDTH)
                .straight(300.0 - merge_at - length)
                .build();
            let through = RouteBuilder::new([-100.0, LANE_WIDTH], 0.0).straight(400.0).build();
            let map = straight_road_map(vec![merging.lane(2.0), through.lane(2.0)], -100.0, 300.0);
            let n_merge = rng.random_range(1..=n);
            let front = merge_at + 100.0 - rng.random_range(5.0..25.0);
            let mut agents = platoon(rng, spec, &merging, 0, n_merge, front);
            let front = merge_at + 100.0 - rng.random_range(-5.0..25.0);
            agents.extend(platoon(rng, spec, &through, n_merge as u64, n - n_merge, front));
            let ego_slot = rng.random_range(0..n);
            (map, ego_first(agents, ego_slot))
        }
        ScenarioKind::ParkedMerge => {
            let parked_at = rng.random_range(120.0..140.0);
            let shift_len = 22.0;
            let start_shift = parked_at - 26.0;
            let around = RouteBuilder::new([-100.0, 0.0], 0.0)
                .straight(start_shift + 100.0)
                .shift(shift_len, LANE_WIDTH)
                .straight(300.0 - start_shift - shift_len)
                .build();
            let lane_a = RouteBuilder::new([-100.0, 0.0], 0.0).straight(400.0).build();
            let lane_b = RouteBuilder::new([-100.0, LANE_WIDTH], 0.0).straight(400.0).build();
            let map = straight_road_map(vec![lane_a.lane(2.0), lane_b.lane(2.0)], -100.0, 300.0);
            let movers = n.max(1);
            let front = start_shift + 100.0 - rng.random_range(0.0..20.0);
            let mut agents = platoon(rng, spec, &around, 0, movers, front);
            agents.push(SimAgent {
                id: movers as u64,
                kind: AgentKind::Vehicle,
                state: VehicleState::new(parked_at, 0.0, 0.0, 0.0),
                route: None,
                desired_speed: 0.0,
            });
            let ego_slot = rng.random_range(0..movers);
            (map, ego_first(agents, ego_slot))
        }
        ScenarioKind::PedestrianCross => {
            let route = RouteBuilder::new([-100.0, 0.0], 0.0).straight(400.0).build();
            let lane_b = RouteBuilder::new([-100.0, LANE_WIDTH], 0.0).straight(400.0).build();
            let map = straight_road_map(vec![route.lane(2.0), lane_b.lane(2.0)], -100.0, 300.0);
            let cross_x = rng.random_range(125.0..145.0);
            let front = cross_x + 100.0 - rng.random_range(25.0..45.0);
            let mut agents = platoon(rng, spec, &route, 0, n, front);
            let walk = rng.random_range(1.0..1.6);
            let start_y = -rng.random_range(4.0..7.0);
            agents.push(SimAgent {
                id: n as u64,
                kind: AgentKind::Pedestrian,
                state: VehicleState::new(cross_x, start_y, std::f64::consts::FRAC_PI_2, walk),
                route: None,
                desired_speed: walk,
            });
            let ego_slot = rng.random_range(0..n);
            (map, ego_first(agents, ego_slot))
        }
        ScenarioKind::Intersection => intersection(rng, spec, n),
    }
}

/// Four-way crossing centred at the origin with right-hand traffic. Each
/// approach lane allows one movement, drawn per scene.
fn intersection(rng: &mut ChaCha8Rng, spec: &ScenarioSpec, n: usize) -> (SemanticMap, Vec<SimAgent>) {
    use std::f64::consts::FRAC_PI_2;
    let half = LANE_WIDTH / 2.0;
    let reach = 120.0;
    let (right_r, left_r) = (10.0, 14.0);
    let mut routes = Vec::new();
    let mut lanes = Vec::new();
    for k in 0..4 {
        let heading = k as f64 * FRAC_PI_2;
        let rot = |p: [f64; 2]| {
            let (s, c) = heading.sin_cos();
            [c * p[0] - s * p[1], s * p[0] + c * p[1]]
        };
        // canonical approach: eastbound at y = -half, from the west
        let movement = rng.random_range(0..3);
        let b = match movement {
            0 => RouteBuilder::new(rot([-reach, -half]), heading)
                .straight(reach - half - right_r)
                .arc(right_r, -FRAC_PI_2)
                .straight(reach),
            1 => RouteBuilder::new(rot([-reach, -half]), heading).straight(2.0 * reach),
            _ => RouteBuilder::new(rot([-reach, -half]), heading)
                .straight(reach + half - left_r)
                .arc(left_r, FRAC_PI_2)
                .straight(reach),
        };
        let route = b.build();
        lanes.push(route.lane(1.0));
        let outbound = RouteBuilder::new(rot([half, -half]), heading).straight(reach).build();
        lanes.push(outbound.lane(4.0));
        routes.push(route);
    }
    let map = SemanticMap {
        drivable: vec![
            rect(-reach, -LANE_WIDTH, reach, LANE_WIDTH),
            rect(-LANE_WIDTH, -reach, LANE_WIDTH, reach),
        ],
        lanes,
    };
    let ego_approach = rng.random_range(0..4);
    let mut agents = Vec::new();
    let ego_start = reach - rng.random_range(20.0..40.0);
    let speed = [spec.speed[0], spec.speed[1].min(10.0)];
    let v = uniform(rng, speed);
    agents.push(vehicle(0, routes[ego_approach].clone(), ego_start, v, v));
    for id in 1..n as u64 {
        let approach = if rng.random_bool(0.4) {
            ego_approach
        } else {
            (ego_approach + rng.random_range(1..4)) % 4
        };
        let s = if approach == ego_approach {
            if rng.random_bool(0.5) {
                ego_start + rng.random_range(12.0..22.0)
            } else {
                ego_start - rng.random_range(6.0..9.0)
            }
        } else {
            reach - rng.random_range(15.0..45.0)
        };
        let v = uniform(rng, speed);
        agents.push(vehicle(id, routes[approach].clone(), s, v, v));
    }
    (map, agents)
}

fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(index.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Generates one scene. Deterministic in `(spec, seed)`.
pub fn generate_scene(
    spec: &ScenarioSpec,
    id: String,
    seed: u64,
    prims: &MotionPrimitiveSet,
) -> Result<SceneSequence, ScenarioError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (map, mut agents) = setup(&mut rng, spec);
    let controller = Controller { prims };
    let dynamics = Unicycle::default();
    let warmup = rng.random_range(0..4);
    let mut steps = Vec::with_capacity(spec.steps);
    for k in 0..warmup + spec.steps {
        if k >= warmup {
            let t = (k - warmup) as f64 / SCENE_HZ as f64;
            steps.push(StepRecord {
                t,
                agents: agents
                    .iter()
                    .map(|a| AgentRecord::from_state(a.id, a.kind, &a.state))
                    .collect(),
            });
        }
        let controls: Vec<ControlInput> = agents.iter().map(|a| controller.control(a, &agents)).collect();
        for (a, u) in agents.iter_mut().zip(&controls) {
            a.state = dynamics.integrate(&a.state, u, prims.dt());
        }
    }
    Ok(SceneSequence {
        version: SCENE_VERSION,
        id,
        scenario: spec.kind.name().to_string(),
        hz: SCENE_HZ,
        map,
        steps,
    })
}

/// `n_sequences` scenes cycling through `specs`; scene `i` uses a seed
/// derived from `(seed, i)`.
pub fn generate_corpus(
    specs: &[ScenarioSpec],
    n_sequences: usize,
    seed: u64,
    prims: &MotionPrimitiveSet,
) -> Result<Vec<SceneSequence>, ScenarioError> {
    use rayon::prelude::*;
    if specs.is_empty() {
        return Err(ScenarioError::NoSpecs);
    }
    for s in specs {
        s.validate()?;
    }
    (0..n_sequences)
        .into_par_iter()
        .map(|i| {
            let spec = &specs[i % specs.len()];
            generate_scene(spec, format!("{}-{i:05}", spec.kind.name()), derive_seed(seed, i as u64), prims)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{build_primitive_set, LatticeConfig};

    #[test]
    fn routes_are_continuous() {
        let r = RouteBuilder::new([0.0, 0.0], 0.0)
            .straight(10.0)
            .arc(10.0, std::f64::consts::FRAC_PI_2)
            .shift(20.0, 3.5)
            .build();
        for w in r.pts.windows(2) {
            let d = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
            assert!(d < 0.6, "gap {d}");
        }
        let end = r.pts.last().unwrap();
        assert!((end[0] - 16.5).abs() < 1e-9 && (end[1] - 30.0).abs() < 1e-9, "{end:?}");
        let (s, lat) = r.project([5.0, 1.0]);
        assert!((s - 5.0).abs() < 1e-9 && (lat - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_unreachable_speeds() {
        let mut spec = ScenarioSpec::new(ScenarioKind::CarFollowing);
        spec.speed = [5.0, 40.0];
        let prims = build_primitive_set(LatticeConfig::default()).unwrap();
        assert_eq!(
            generate_scene(&spec, "x".into(), 0, &prims).unwrap_err(),
            ScenarioError::Speed(5.0, 40.0)
        );
    }

    #[test]
    fn scenes_validate_and_have_one_ego() {
        let prims = build_primitive_set(LatticeConfig::default()).unwrap();
        for (i, spec) in ScenarioSpec::all_kinds().iter().enumerate() {
            let scene = generate_scene(spec, format!("s{i}"), i as u64, &prims).unwrap();
            scene.validate().unwrap();
            assert_eq!(scene.ego_id(), Some(0));
            assert_eq!(scene.steps.len(), spec.steps);
        }
    }
}
