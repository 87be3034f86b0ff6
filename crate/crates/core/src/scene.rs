//! Scene files: one JSON object per line, each a labeled sequence of
//! snapshots at 2 Hz.
//!
//! ```json
//! {"version":1,"id":"s0","scenario":"car_following","hz":2,
//!  "map":{"drivable":[[[x,y],...]],"lanes":[[[x,y],...]]},
//!  "steps":[{"t":0.0,"agents":[{"id":0,"kind":"ego","x":0,"y":0,"theta":0,"v":5}]}]}
//! ```

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{MotionPrimitiveSet, VehicleState};
use crate::map::SemanticMap;
use crate::traffic::{AgentKind, AgentState};

pub const SCENE_VERSION: u32 = 1;
pub const SCENE_HZ: u32 = 2;
const TIME_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn invalid(line: usize, message: impl Into<String>) -> SceneError {
    SceneError::Invalid {
        line,
        message: message.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentRecord {
    pub id: u64,
    pub kind: AgentKind,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
}

impl AgentRecord {
    pub fn state(&self) -> VehicleState {
        VehicleState::new(self.x, self.y, self.theta, self.v)
    }

    pub fn from_state(id: u64, kind: AgentKind, s: &VehicleState) -> Self {
        Self {
            id,
            kind,
            x: s.x,
            y: s.y,
            theta: s.theta,
            v: s.v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub t: f64,
    pub agents: Vec<AgentRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSequence {
    pub version: u32,
    pub id: String,
    pub scenario: String,
    pub hz: u32,
    pub map: SemanticMap,
    pub steps: Vec<StepRecord>,
}

impl SceneSequence {
    pub fn validate(&self) -> Result<(), String> {
        if self.version != SCENE_VERSION {
            return Err(format!("unsupported version {}, expected {SCENE_VERSION}", self.version));
        }
        if self.hz != SCENE_HZ {
            return Err(format!("hz must be {SCENE_HZ} to match the primitive duration, got {}", self.hz));
        }
        if self.steps.is_empty() {
            return Err("scene has no steps".into());
        }
        self.map.validate().map_err(|e| e.to_string())?;
        let dt = 1.0 / SCENE_HZ as f64;
        for (k, w) in self.steps.windows(2).enumerate() {
            if !(w[1].t > w[0].t) {
                return Err(format!("timestamps not increasing at step {}", k + 1));
            }
            if (w[1].t - w[0].t - dt).abs() > TIME_TOL {
                return Err(format!("step {} is {} s after the previous, expected {dt}", k + 1, w[1].t - w[0].t));
            }
        }
        let mut egos = BTreeSet::new();
        for (k, step) in self.steps.iter().enumerate() {
            if !step.t.is_finite() {
                return Err(format!("step {k} has a non-finite time"));
            }
            let mut ids = BTreeSet::new();
            for a in &step.agents {
                if !ids.insert(a.id) {
                    return Err(format!("step {k} repeats agent {}", a.id));
                }
                if ![a.x, a.y, a.theta, a.v].iter().all(|v| v.is_finite()) {
                    return Err(format!("step {k} agent {} has a non-finite state", a.id));
                }
                if a.kind == AgentKind::Ego {
                    egos.insert(a.id);
                }
            }
        }
        if egos.len() > 1 {
            return Err(format!("scene has {} different ego ids", egos.len()));
        }
        Ok(())
    }

    pub fn ego_id(&self) -> Option<u64> {
        self.steps
            .iter()
            .flat_map(|s| &s.agents)
            .find(|a| a.kind == AgentKind::Ego)
            .map(|a| a.id)
    }

    pub fn record(&self, step: usize, id: u64) -> Option<&AgentRecord> {
        self.steps.get(step)?.agents.iter().find(|a| a.id == id)
    }

    /// Agents of one step with default intentions.
    pub fn agents_at(&self, step: usize, prims: &MotionPrimitiveSet) -> Vec<AgentState> {
        self.steps[step]
            .agents
            .iter()
            .map(|a| AgentState::new(a.id, a.kind, a.state(), prims))
            .collect()
    }
}

/// Parses and validates a JSON-lines scene stream. Blank lines are skipped.
pub fn read_scenes<R: BufRead>(reader: R) -> Result<Vec<SceneSequence>, SceneError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: SceneSequence = serde_json::from_str(&line).map_err(|e| invalid(line_no, e.to_string()))?;
        scene.validate().map_err(|e| invalid(line_no, e))?;
        out.push(scene);
    }
    Ok(out)
}

pub fn load_scenes(path: &std::path::Path) -> Result<Vec<SceneSequence>, SceneError> {
    let file = std::fs::File::open(path)?;
    read_scenes(std::io::BufReader::new(file))
}

pub fn write_scenes<W: Write>(mut w: W, scenes: &[SceneSequence]) -> Result<(), SceneError> {
    for s in scenes {
        serde_json::to_writer(&mut w, s).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
