//! Proximity graph over the agents of one traffic snapshot.

use rayon::prelude::*;
use thiserror::Error;

use crate::dynamics::{future_states, ControlInput, FutureStates, MotionPrimitiveSet, Unicycle, VehicleState};
use crate::map::{rasterize_map, MapRaster, SemanticMap};
use crate::traffic::{AgentKind, AgentState, Intention};

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("a traffic graph needs at least one agent")]
    Empty,
    #[error("graph has no ego node")]
    NoEgo,
    #[error("expected {expected} states, got {found}")]
    StateCount { expected: usize, found: usize },
}

/// Directed edge `src → dst`; messages flow from `src` into `dst`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphNode {
    pub agent: AgentState,
    /// Global-frame states under every primitive.
    pub future: FutureStates,
    pub raster: MapRaster,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrafficGraph {
    nodes: Vec<GraphNode>,
    edges: Vec<Edge>,
    ego_conditioned: bool,
}

fn make_node(
    mut agent: AgentState,
    prims: &MotionPrimitiveSet,
    map: &SemanticMap,
    dynamics: &Unicycle,
) -> GraphNode {
    if agent.kind == AgentKind::Pedestrian {
        agent.intention = Intention::zero_control(prims);
    }
    let future = future_states(&agent.state, prims, dynamics);
    let raster = rasterize_map(map, &agent.state.pose());
    GraphNode {
        agent,
        future,
        raster,
    }
}

/// Graph with an edge pair between every two agents at most `radius` apart.
pub fn build_graph(
    agents: &[AgentState],
    prims: &MotionPrimitiveSet,
    map: &SemanticMap,
    radius: f64,
) -> Result<TrafficGraph, GraphError> {
    build_graph_with(agents, prims, map, radius, &Unicycle::default())
}

pub fn build_graph_with(
    agents: &[AgentState],
    prims: &MotionPrimitiveSet,
    map: &SemanticMap,
    radius: f64,
    dynamics: &Unicycle,
) -> Result<TrafficGraph, GraphError> {
    if agents.is_empty() {
        return Err(GraphError::Empty);
    }
    let nodes: Vec<GraphNode> = agents
        .par_iter()
        .map(|a| make_node(a.clone(), prims, map, dynamics))
        .collect();
    let mut edges = Vec::new();
    for dst in 0..nodes.len() {
        for src in 0..nodes.len() {
            if src != dst && nodes[src].agent.state.distance_to(&nodes[dst].agent.state) <= radius {
                edges.push(Edge { src, dst });
            }
        }
    }
    Ok(TrafficGraph {
        nodes,
        edges,
        ego_conditioned: false,
    })
}

/// Fixes the ego intention to the primitive nearest `ego_control` and drops
/// every edge into the ego, so influence only flows out of it.
pub fn condition_on_ego(
    g: &TrafficGraph,
    ego_control: &ControlInput,
    prims: &MotionPrimitiveSet,
) -> Result<TrafficGraph, GraphError> {
    let ego = g.ego_index().ok_or(GraphError::NoEgo)?;
    let mut out = g.clone();
    out.edges.retain(|e| e.dst != ego);
    out.nodes[ego].agent.intention = Intention::one_hot(prims.len(), prims.nearest_index(ego_control));
    out.ego_conditioned = true;
    Ok(out)
}

impl TrafficGraph {
    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_ego_conditioned(&self) -> bool {
        self.ego_conditioned
    }

    pub fn ego_index(&self) -> Option<usize> {
        self.nodes.iter().position(|n| n.agent.kind == AgentKind::Ego)
    }

    pub fn node_index(&self, id: u64) -> Option<usize> {
        self.nodes.iter().position(|n| n.agent.id == id)
    }

    pub fn in_degree(&self, node: usize) -> usize {
        self.edges.iter().filter(|e| e.dst == node).count()
    }

    pub fn out_degree(&self, node: usize) -> usize {
        self.edges.iter().filter(|e| e.src == node).count()
    }

    /// Whether the node's intention is held constant by the network:
    /// pedestrians always, the ego once conditioned.
    pub fn is_fixed(&self, node: usize) -> bool {
        match self.nodes[node].agent.kind {
            AgentKind::Pedestrian => true,
            AgentKind::Ego => self.ego_conditioned,
            AgentKind::Vehicle => false,
        }
    }

    pub fn intentions(&self) -> Vec<Intention> {
        self.nodes.iter().map(|n| n.agent.intention.clone()).collect()
    }

    /// Replaces the intentions of all non-fixed nodes.
    pub fn set_intentions(&mut self, intentions: Vec<Intention>) {
        for (i, q) in intentions.into_iter().enumerate() {
            if !self.is_fixed(i) {
                self.nodes[i].agent.intention = q;
            }
        }
    }

    /// Moves every node to a new state and recomputes its features. The
    /// node set, edge set and intentions are kept.
    pub fn relocated(
        &self,
        states: &[VehicleState],
        prims: &MotionPrimitiveSet,
        map: &SemanticMap,
        dynamics: &Unicycle,
    ) -> Result<TrafficGraph, GraphError> {
        if states.len() != self.nodes.len() {
            return Err(GraphError::StateCount {
                expected: self.nodes.len(),
                found: states.len(),
            });
        }
        let nodes = self
            .nodes
            .par_iter()
            .zip(states.par_iter())
            .map(|(n, s)| {
                let mut agent = n.agent.clone();
                agent.state = *s;
                make_node(agent, prims, map, dynamics)
            })
            .collect();
        Ok(TrafficGraph {
            nodes,
            edges: self.edges.clone(),
            ego_conditioned: self.ego_conditioned,
        })
    }

    /// The same graph with nodes reordered so that new node `i` is old node
    /// `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> TrafficGraph {
        let mut inverse = vec![0; order.len()];
        for (new, &old) in order.iter().enumerate() {
            inverse[old] = new;
        }
        let mut edges: Vec<Edge> = self
            .edges
            .iter()
            .map(|e| Edge {
                src: inverse[e.src],
                dst: inverse[e.dst],
            })
            .collect();
        edges.sort_by_key(|e| (e.dst, e.src));
        TrafficGraph {
            nodes: order.iter().map(|&i| self.nodes[i].clone()).collect(),
            edges,
            ego_conditioned: self.ego_conditioned,
        }
    }
}
