//! Agents, intentions and the ego-centred local region.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{MotionPrimitiveSet, VehicleState};

#[derive(Debug, Error, PartialEq)]
pub enum IntentionError {
    #[error("intention has {found} entries, lattice has {expected}")]
    Length { expected: usize, found: usize },
    #[error("intention entry {index} is {value}, not a probability")]
    Negative { index: usize, value: f64 },
    #[error("intention sums to {0}, not 1")]
    NotNormalized(f64),
}

/// Tolerance on the total mass of an [`Intention`].
pub const INTENTION_SUM_TOL: f64 = 1e-9;

/// Probability distribution over the primitive lattice, in primitive-index
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct Intention(Vec<f64>);

impl Intention {
    pub fn new(probabilities: Vec<f64>) -> Result<Self, IntentionError> {
        if let Some((index, &value)) = probabilities
            .iter()
            .enumerate()
            .find(|(_, p)| !(**p >= 0.0) || !p.is_finite())
        {
            return Err(IntentionError::Negative { index, value });
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > INTENTION_SUM_TOL {
            return Err(IntentionError::NotNormalized(total));
        }
        Ok(Self(probabilities))
    }

    /// Like [`Intention::new`], also checking the length against a lattice.
    pub fn for_lattice(
        probabilities: Vec<f64>,
        prims: &MotionPrimitiveSet,
    ) -> Result<Self, IntentionError> {
        if probabilities.len() != prims.len() {
            return Err(IntentionError::Length {
                expected: prims.len(),
                found: probabilities.len(),
            });
        }
        Self::new(probabilities)
    }

    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut p = vec![0.0; len];
        p[index] = 1.0;
        Self(p)
    }

    pub fn uniform(len: usize) -> Self {
        Self(vec![1.0 / len as f64; len])
    }

    /// All mass on the zero-control primitive.
    pub fn zero_control(prims: &MotionPrimitiveSet) -> Self {
        Self::one_hot(prims.len(), prims.zero_index())
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Most likely primitive; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }

    /// Inverse-CDF draw from the distribution given `u` in `[0, 1)`.
    pub fn sample_with(&self, u: f64) -> usize {
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > 0.0 {
                last_positive = i;
                acc += p;
                if u < acc {
                    return i;
                }
            }
        }
        last_positive
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Vehicle,
    Pedestrian,
    Ego,
}

impl AgentKind {
    /// Vehicles and the ego carry learned intentions.
    pub fn is_vehicle(self) -> bool {
        matches!(self, AgentKind::Vehicle | AgentKind::Ego)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentState {
    pub id: u64,
    pub kind: AgentKind,
    pub state: VehicleState,
    pub intention: Intention,
}

impl AgentState {
    /// Agent with the default intention: pedestrians and newly observed
    /// vehicles start with all mass on zero control.
    pub fn new(id: u64, kind: AgentKind, state: VehicleState, prims: &MotionPrimitiveSet) -> Self {
        Self {
            id,
            kind,
            state,
            intention: Intention::zero_control(prims),
        }
    }
}

/// Ego-aligned rectangle that bounds the modeled traffic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionConfig {
    pub ahead: f64,
    pub behind: f64,
    pub side: f64,
    /// Edge radius of the proximity graph.
    pub radius: f64,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self {
            ahead: 40.0,
            behind: 10.0,
            side: 25.0,
            radius: 25.0,
        }
    }
}

impl RegionConfig {
    /// Boundary-inclusive membership test in the ego frame.
    pub fn contains(&self, ego: &VehicleState, other: &VehicleState) -> bool {
        let [x, y] = ego.pose().point_to_frame(other.position());
        (-self.behind..=self.ahead).contains(&x) && (-self.side..=self.side).contains(&y)
    }
}

/// Agents inside the ego's rectangle, in input order. The ego is always kept.
pub fn select_local_agents(
    snapshot: &[AgentState],
    ego: &AgentState,
    region: &RegionConfig,
) -> Vec<AgentState> {
    snapshot
        .iter()
        .filter(|a| a.id == ego.id || region.contains(&ego.state, &a.state))
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{build_primitive_set, LatticeConfig};

    fn agent(id: u64, kind: AgentKind, x: f64, y: f64) -> AgentState {
        let prims = build_primitive_set(LatticeConfig::toy()).unwrap();
        AgentState::new(id, kind, VehicleState::new(x, y, 0.0, 1.0), &prims)
    }

    #[test]
    fn region_membership() {
        let ego = agent(0, AgentKind::Ego, 0.0, 0.0);
        let others = vec![
            ego.clone(),
            agent(1, AgentKind::Vehicle, 30.0, 0.0),
            agent(2, AgentKind::Vehicle, -15.0, 0.0),
            agent(3, AgentKind::Pedestrian, 0.0, 25.0),
            agent(4, AgentKind::Vehicle, 40.0, -25.0),
            agent(5, AgentKind::Vehicle, 40.5, 0.0),
        ];
        let ids: Vec<u64> = select_local_agents(&others, &ego, &RegionConfig::default())
            .iter()
            .map(|a| a.id)
            .collect();
        assert_eq!(ids, vec![0, 1, 3, 4]);
    }

    #[test]
    fn region_rotates_with_ego() {
        let mut ego = agent(0, AgentKind::Ego, 0.0, 0.0);
        ego.state.theta = std::f64::consts::FRAC_PI_2;
        let ahead = agent(1, AgentKind::Vehicle, 0.0, 35.0);
        let behind = agent(2, AgentKind::Vehicle, 0.0, -35.0);
        let r = RegionConfig::default();
        assert!(r.contains(&ego.state, &ahead.state));
        assert!(!r.contains(&ego.state, &behind.state));
    }

    #[test]
    fn intention_validation() {
        assert!(Intention::new(vec![0.5, 0.5]).is_ok());
        assert!(matches!(
            Intention::new(vec![0.5, 0.6]),
            Err(IntentionError::NotNormalized(_))
        ));
        assert!(matches!(
            Intention::new(vec![1.5, -0.5]),
            Err(IntentionError::Negative { index: 1, .. })
        ));
        let prims = build_primitive_set(LatticeConfig::toy()).unwrap();
        assert!(matches!(
            Intention::for_lattice(vec![1.0], &prims),
            Err(IntentionError::Length { expected: 81, found: 1 })
        ));
    }

    #[test]
    fn argmax_and_sampling() {
        let q = Intention::new(vec![0.25, 0.25, 0.5]).unwrap();
        assert_eq!(q.argmax(), 2);
        assert_eq!(Intention::uniform(4).argmax(), 0);
        assert_eq!(q.sample_with(0.0), 0);
        assert_eq!(q.sample_with(0.3), 1);
        assert_eq!(q.sample_with(0.999), 2);
        let onehot = Intention::one_hot(5, 3);
        for u in [0.0, 0.5, 0.9999] {
            assert_eq!(onehot.sample_with(u), 3);
        }
    }
}
