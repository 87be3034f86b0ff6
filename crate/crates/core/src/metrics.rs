//! Displacement-error metrics and the evaluation table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("horizon mismatch: {0} vs {1} steps")]
    Horizon(usize, usize),
    #[error("agent sets differ")]
    Agents,
    #[error("no agents to score")]
    Empty,
    #[error("need at least k = {k} trajectories, got {n}")]
    TooFewSamples { n: usize, k: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("agent {0} has a non-finite waypoint")]
    NonFinite(u64),
    #[error("agent {id} has {found} waypoints, expected {expected}")]
    Length { id: u64, found: usize, expected: usize },
}

/// Waypoints `t = 1..=H` (the start position excluded) per agent id.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    horizon: usize,
    tracks: BTreeMap<u64, Vec<[f64; 2]>>,
}

impl Trajectory {
    pub fn new(horizon: usize, tracks: BTreeMap<u64, Vec<[f64; 2]>>) -> Result<Self, MetricError> {
        for (&id, pts) in &tracks {
            if pts.len() != horizon {
                return Err(MetricError::Length {
                    id,
                    found: pts.len(),
                    expected: horizon,
                });
            }
            if !pts.iter().all(|p| p[0].is_finite() && p[1].is_finite()) {
                return Err(MetricError::NonFinite(id));
            }
        }
        Ok(Self { horizon, tracks })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn tracks(&self) -> &BTreeMap<u64, Vec<[f64; 2]>> {
        &self.tracks
    }

    pub fn track(&self, id: u64) -> Option<&[[f64; 2]]> {
        self.tracks.get(&id).map(Vec::as_slice)
    }

    pub fn ids(&self) -> Vec<u64> {
        self.tracks.keys().copied().collect()
    }

    /// The first `h` steps of every track.
    pub fn truncated(&self, h: usize) -> Trajectory {
        let h = h.min(self.horizon);
        Trajectory {
            horizon: h,
            tracks: self.tracks.iter().map(|(&id, p)| (id, p[..h].to_vec())).collect(),
        }
    }

    /// Only the given agents; unknown ids are ignored.
    pub fn restricted(&self, ids: &[u64]) -> Trajectory {
        Trajectory {
            horizon: self.horizon,
            tracks: ids
                .iter()
                .filter_map(|id| self.tracks.get(id).map(|p| (*id, p.clone())))
                .collect(),
        }
    }
}

fn check(pred: &Trajectory, truth: &Trajectory) -> Result<(), MetricError> {
    if pred.horizon != truth.horizon {
        return Err(MetricError::Horizon(pred.horizon, truth.horizon));
    }
    if !pred.tracks.keys().eq(truth.tracks.keys()) {
        return Err(MetricError::Agents);
    }
    if truth.tracks.is_empty() || truth.horizon == 0 {
        return Err(MetricError::Empty);
    }
    Ok(())
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Per-agent mean waypoint distance.
pub fn agent_ade(pred: &Trajectory, truth: &Trajectory) -> Result<BTreeMap<u64, f64>, MetricError> {
    check(pred, truth)?;
    Ok(truth
        .tracks
        .iter()
        .map(|(id, t)| {
            let p = &pred.tracks[id];
            let sum: f64 = p.iter().zip(t).map(|(a, b)| dist(*a, *b)).sum();
            (*id, sum / truth.horizon as f64)
        })
        .collect())
}

/// Per-agent final-waypoint distance.
pub fn agent_fde(pred: &Trajectory, truth: &Trajectory) -> Result<BTreeMap<u64, f64>, MetricError> {
    check(pred, truth)?;
    let last = truth.horizon - 1;
    Ok(truth
        .tracks
        .iter()
        .map(|(id, t)| (*id, dist(pred.tracks[id][last], t[last])))
        .collect())
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}

/// Mean over steps and agents of the waypoint distance.
pub fn ade(pred: &Trajectory, truth: &Trajectory) -> Result<f64, MetricError> {
    Ok(mean(agent_ade(pred, truth)?.into_values()))
}

/// Mean over agents of the final-waypoint distance.
pub fn fde(pred: &Trajectory, truth: &Trajectory) -> Result<f64, MetricError> {
    Ok(mean(agent_fde(pred, truth)?.into_values()))
}

type PerAgent = fn(&Trajectory, &Trajectory) -> Result<BTreeMap<u64, f64>, MetricError>;

fn min_k(
    preds: &[Trajectory],
    truth: &Trajectory,
    k: usize,
    per_agent: PerAgent,
) -> Result<f64, MetricError> {
    if k == 0 {
        return Err(MetricError::ZeroK);
    }
    if preds.len() < k {
        return Err(MetricError::TooFewSamples { n: preds.len(), k });
    }
    let mut best: BTreeMap<u64, f64> = BTreeMap::new();
    for p in &preds[..k] {
        for (id, e) in per_agent(p, truth)? {
            let b = best.entry(id).or_insert(f64::INFINITY);
            *b = b.min(e);
        }
    }
    Ok(mean(best.into_values()))
}

/// Per agent, the smallest ADE among the first `k` trajectories, averaged
/// over agents.
pub fn min_k_ade(preds: &[Trajectory], truth: &Trajectory, k: usize) -> Result<f64, MetricError> {
    min_k(preds, truth, k, agent_ade)
}

pub fn min_k_fde(preds: &[Trajectory], truth: &Trajectory, k: usize) -> Result<f64, MetricError> {
    min_k(preds, truth, k, agent_fde)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VelocityEstimate {
    pub v: f64,
    pub theta: f64,
    /// Set when there was too little history and the fallback was used.
    pub flagged: bool,
}

/// Backward difference over the last second of 2 Hz positions (the last
/// two intervals, or one if only two positions exist). With fewer than two
/// positions the agent is stationary with `fallback_heading`.
pub fn estimate_velocity(positions: &[[f64; 2]], dt: f64, fallback_heading: f64) -> VelocityEstimate {
    let n = positions.len();
    if n < 2 {
        return VelocityEstimate {
            v: 0.0,
            theta: fallback_heading,
            flagged: true,
        };
    }
    let steps = (n - 1).min(2);
    let a = positions[n - 1 - steps];
    let b = positions[n - 1];
    let d = dist(a, b);
    let theta = if d > 0.0 {
        (b[1] - a[1]).atan2(b[0] - a[0])
    } else {
        fallback_heading
    };
    VelocityEstimate {
        v: d / (steps as f64 * dt),
        theta,
        flagged: false,
    }
}

/// One row of the evaluation table: a method's error at one horizon,
/// pooled over agents within each scene and then averaged over scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub method: String,
    pub horizon_steps: usize,
    pub seconds: f64,
    pub ade: f64,
    pub fde: f64,
    pub scenes: usize,
}

/// Predictions of one method for one scene.
#[derive(Clone, Debug)]
pub enum MethodPrediction {
    Single(Trajectory),
    /// Scored with min-k.
    Samples(Vec<Trajectory>, usize),
}

#[derive(Clone, Debug, Default)]
pub struct EvalAccumulator {
    // method -> horizon -> (ade sum, fde sum, scenes)
    sums: BTreeMap<String, BTreeMap<usize, (f64, f64, usize)>>,
    order: Vec<String>,
}

impl EvalAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one scene. `truth` must cover the longest horizon.
    pub fn add_scene(
        &mut self,
        method: &str,
        prediction: &MethodPrediction,
        truth: &Trajectory,
        horizons: &[usize],
    ) -> Result<(), MetricError> {
        if !self.sums.contains_key(method) {
            self.order.push(method.to_string());
        }
        let entry = self.sums.entry(method.to_string()).or_default();
        for &h in horizons {
            let t = truth.truncated(h);
            if t.horizon() != h {
                return Err(MetricError::Horizon(h, truth.horizon()));
            }
            let (a, f) = match prediction {
                MethodPrediction::Single(p) => {
                    let p = p.truncated(h);
                    (ade(&p, &t)?, fde(&p, &t)?)
                }
                MethodPrediction::Samples(ps, k) => {
                    let ps: Vec<Trajectory> = ps.iter().map(|p| p.truncated(h)).collect();
                    (min_k_ade(&ps, &t, *k)?, min_k_fde(&ps, &t, *k)?)
                }
            };
            let s = entry.entry(h).or_insert((0.0, 0.0, 0));
            s.0 += a;
            s.1 += f;
            s.2 += 1;
        }
        Ok(())
    }

    pub fn rows(&self, dt: f64) -> Vec<EvalRow> {
        let mut out = Vec::new();
        for m in &self.order {
            for (&h, &(a, f, n)) in &self.sums[m] {
                out.push(EvalRow {
                    method: m.clone(),
                    horizon_steps: h,
                    seconds: h as f64 * dt,
                    ade: a / n as f64,
                    fde: f / n as f64,
                    scenes: n,
                });
            }
        }
        out
    }
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from("method,horizon_s,ade,fde,scenes\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.6},{:.6},{}", r.method, r.seconds, r.ade, r.fde, r.scenes);
    }
    s
}

/// Methods as rows, `ADE/FDE` per horizon as columns.
pub fn eval_text_table(rows: &[EvalRow]) -> String {
    let mut horizons: Vec<usize> = rows.iter().map(|r| r.horizon_steps).collect();
    horizons.sort_unstable();
    horizons.dedup();
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let mut s = format!("{:<14}", "method");
    for h in &horizons {
        let secs = rows.iter().find(|r| r.horizon_steps == *h).map_or(0.0, |r| r.seconds);
        let _ = write!(s, " {:>13}", format!("{secs}s ADE/FDE"));
    }
    s.push('\n');
    for m in methods {
        let _ = write!(s, "{m:<14}");
        for h in &horizons {
            match rows.iter().find(|r| r.method == m && r.horizon_steps == *h) {
                Some(r) => {
                    let _ = write!(s, " {:>13}", format!("{:.2}/{:.2}", r.ade, r.fde));
                }
                None => {
                    let _ = write!(s, " {:>13}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(tracks: &[(u64, Vec<[f64; 2]>)]) -> Trajectory {
        let h = tracks[0].1.len();
        Trajectory::new(h, tracks.iter().cloned().collect()).unwrap()
    }

    #[test]
    fn lateral_offset_gives_unit_error() {
        let t = traj(&[(1, vec![[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])]);
        let p = traj(&[(1, vec![[1.0, 1.0], [2.0, 1.0], [3.0, 1.0]])]);
        assert_eq!(ade(&p, &t).unwrap(), 1.0);
        assert_eq!(fde(&p, &t).unwrap(), 1.0);
        assert_eq!(ade(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn mismatches_rejected() {
        let t = traj(&[(1, vec![[0.0, 0.0]])]);
        let p = traj(&[(2, vec![[0.0, 0.0]])]);
        assert_eq!(ade(&p, &t), Err(MetricError::Agents));
        let long = traj(&[(1, vec![[0.0, 0.0], [0.0, 0.0]])]);
        assert_eq!(fde(&long, &t), Err(MetricError::Horizon(2, 1)));
        assert_eq!(
            min_k_ade(std::slice::from_ref(&t), &t, 5),
            Err(MetricError::TooFewSamples { n: 1, k: 5 })
        );
    }

    #[test]
    fn velocity_examples() {
        let e = estimate_velocity(&[[0.0, 0.0], [0.5, 0.0], [1.0, 0.0]], 0.5, 0.3);
        assert!((e.v - 1.0).abs() < 1e-12 && e.theta == 0.0 && !e.flagged);
        let still = estimate_velocity(&[[2.0, 1.0]; 4], 0.5, 0.3);
        assert_eq!((still.v, still.theta), (0.0, 0.3));
        let one = estimate_velocity(&[[2.0, 1.0]], 0.5, 0.7);
        assert!(one.flagged && one.v == 0.0 && one.theta == 0.7);
    }

    #[test]
    fn velocity_uses_last_window_chord() {
        // quarter circle of radius 10 sampled at 8 points
        let pts: Vec<[f64; 2]> = (0..8)
            .map(|k| {
                let a = std::f64::consts::FRAC_PI_2 * k as f64 / 7.0;
                [10.0 * a.sin(), 10.0 - 10.0 * a.cos()]
            })
            .collect();
        let e = estimate_velocity(&pts, 0.5, 0.0);
        let a5 = std::f64::consts::FRAC_PI_2 * 5.0 / 7.0;
        let a7 = std::f64::consts::FRAC_PI_2;
        // chord direction bisects the two tangent angles
        assert!((e.theta - (a5 + a7) / 2.0).abs() < 1e-12);
        let chord = 2.0 * 10.0 * ((a7 - a5) / 2.0).sin();
        assert!((e.v - chord).abs() < 1e-12);
    }

    #[test]
    fn table_layout() {
        let t = traj(&[(1, vec![[1.0, 0.0], [2.0, 0.0]])]);
        let p = traj(&[(1, vec![[1.0, 0.5], [2.0, 1.0]])]);
        let mut acc = EvalAccumulator::new();
        acc.add_scene("cv", &MethodPrediction::Single(p), &t, &[1, 2]).unwrap();
        let rows = acc.rows(0.5);
        assert_eq!(rows.len(), 2);
        assert_eq!((rows[1].ade, rows[1].fde), (0.75, 1.0));
        let csv = eval_csv(&rows);
        assert_eq!(csv.lines().nth(1), Some("cv,0.5,0.500000,0.500000,1"));
    }
}
