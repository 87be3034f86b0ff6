//! The intention network: primitive-image and map encoders, per-edge
//! messages, element-wise max aggregation and the intention decoder,
//! iterated `K` times per step.
//!
//! Default size chain:
//!
//! ```text
//! CNN_w  6x21x21   conv5 16x17x17  pool 16x8x8   conv5 32x4x4  pool 32x2x2  global max -> 32
//! CNN_m  3x100x100 conv5 4x96x96   pool 4x48x48  conv5 8x44x44 pool 8x22x22
//!                  conv3 16x20x20  pool 16x10x10 max over (behind, ahead) halves -> 32
//! MLP_m  70 -> 64 -> 32 -> 16      input v_a | c_a | rel(b in a) | c_b
//! MLP_q  81 -> 64 -> 128 -> 441    input v_a | c_a | p_a | m_a
//! ```
//!
//! A 2x2 pool follows a convolution whenever the map is at least 2x2.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtgnn_autodiff::{ParamVars, ParameterStore, Result, Tape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{LatticeConfig, MotionPrimitiveSet, VehicleState};
use crate::graph::TrafficGraph;
use crate::map::{RASTER_CHANNELS, RASTER_SIZE};

/// Channels of a primitive image besides the intention: x, y, cos θ, sin θ, v.
pub const STATE_CHANNELS: usize = 5;

/// Parameter total quoted for the reference network. The computed count is
/// larger because `MLP_q` reads an 81-wide input rather than 68.
pub const REFERENCE_PARAMETER_COUNT: usize = 94_105;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub layers: Vec<ConvSpec>,
    pub activation: Activation,
    /// Final adaptive max-pool grid.
    pub out_grid: [usize; 2],
}

impl CnnConfig {
    /// `[channels, height, width]` after the input and every conv and pool.
    pub fn size_chain(&self) -> std::result::Result<Vec<[usize; 3]>, String> {
        let (mut h, mut w) = (self.height, self.width);
        let mut chain = vec![[self.in_channels, h, w]];
        for (i, l) in self.layers.iter().enumerate() {
            if l.kernel == 0 || l.kernel > h || l.kernel > w {
                return Err(format!("conv{i}: kernel {} does not fit {h}x{w}", l.kernel));
            }
            h = h - l.kernel + 1;
            w = w - l.kernel + 1;
            chain.push([l.filters, h, w]);
            if h >= 2 && w >= 2 {
                h /= 2;
                w /= 2;
                chain.push([l.filters, h, w]);
            }
        }
        let [oh, ow] = self.out_grid;
        if oh == 0 || ow == 0 || oh > h || ow > w {
            return Err(format!("cannot pool {h}x{w} onto {oh}x{ow}"));
        }
        let filters = self.layers.last().map_or(self.in_channels, |l| l.filters);
        chain.push([filters, oh, ow]);
        Ok(chain)
    }

    pub fn output_width(&self) -> usize {
        let filters = self.layers.last().map_or(self.in_channels, |l| l.filters);
        filters * self.out_grid[0] * self.out_grid[1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnnConfig {
    pub lattice: LatticeConfig,
    /// Message-passing iterations `K`.
    pub iterations: usize,
    pub cnn_w: CnnConfig,
    pub cnn_m: CnnConfig,
    pub mlp_m_hidden: Vec<usize>,
    pub message_width: usize,
    pub mlp_q_hidden: Vec<usize>,
    pub leaky_slope: f64,
    /// Aggregated message of a node without in-edges.
    pub empty_message: f64,
    /// Multiplier on positions and speeds before they enter the network.
    pub feature_scale: f64,
}

impl Default for GnnConfig {
    fn default() -> Self {
        let lattice = LatticeConfig::default();
        Self {
            lattice,
            iterations: 2,
            cnn_w: CnnConfig {
                in_channels: STATE_CHANNELS + 1,
                height: lattice.accel_count,
                width: lattice.omega_count,
                layers: vec![ConvSpec { filters: 16, kernel: 5 }, ConvSpec { filters: 32, kernel: 5 }],
                activation: Activation::LeakyRelu,
                out_grid: [1, 1],
            },
            cnn_m: CnnConfig {
                in_channels: RASTER_CHANNELS,
                height: RASTER_SIZE,
                width: RASTER_SIZE,
                layers: vec![
                    ConvSpec { filters: 4, kernel: 5 },
                    ConvSpec { filters: 8, kernel: 5 },
                    ConvSpec { filters: 16, kernel: 3 },
                ],
                activation: Activation::Relu,
                out_grid: [1, 2],
            },
            mlp_m_hidden: vec![64, 32],
            message_width: 16,
            mlp_q_hidden: vec![64, 128],
            leaky_slope: 0.01,
            empty_message: 0.0,
            feature_scale: 0.1,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("invalid network config: {0}")]
pub struct ConfigError(pub String);

impl GnnConfig {
    /// 9x9 lattice with slimmer encoders, for fast tests.
    pub fn toy() -> Self {
        let lattice = LatticeConfig::toy();
        let base = Self::default();
        Self {
            lattice,
            cnn_w: CnnConfig {
                height: lattice.accel_count,
                width: lattice.omega_count,
                layers: vec![ConvSpec { filters: 8, kernel: 3 }, ConvSpec { filters: 16, kernel: 3 }],
                ..base.cnn_w.clone()
            },
            cnn_m: CnnConfig {
                layers: vec![
                    ConvSpec { filters: 2, kernel: 5 },
                    ConvSpec { filters: 4, kernel: 5 },
                    ConvSpec { filters: 4, kernel: 3 },
                ],
                ..base.cnn_m.clone()
            },
            mlp_m_hidden: vec![16],
            message_width: 8,
            mlp_q_hidden: vec![32],
            ..base
        }
    }

    pub fn primitive_count(&self) -> usize {
        self.lattice.accel_count * self.lattice.omega_count
    }

    pub fn message_input_width(&self) -> usize {
        1 + self.cnn_w.output_width() + STATE_CHANNELS + self.cnn_w.output_width()
    }

    pub fn update_input_width(&self) -> usize {
        1 + self.cnn_w.output_width() + self.cnn_m.output_width() + self.message_width
    }

    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError(m));
        if self.iterations == 0 {
            return err("iterations must be at least 1".into());
        }
        let w = &self.cnn_w;
        if w.in_channels != STATE_CHANNELS + 1
            || w.height != self.lattice.accel_count
            || w.width != self.lattice.omega_count
        {
            return err(format!(
                "CNN_w input must be {}x{}x{}",
                STATE_CHANNELS + 1,
                self.lattice.accel_count,
                self.lattice.omega_count
            ));
        }
        let m = &self.cnn_m;
        if m.in_channels != RASTER_CHANNELS || m.height != RASTER_SIZE || m.width != RASTER_SIZE {
            return err(format!("CNN_m input must be {RASTER_CHANNELS}x{RASTER_SIZE}x{RASTER_SIZE}"));
        }
        w.size_chain().map_err(|e| ConfigError(format!("CNN_w {e}")))?;
        m.size_chain().map_err(|e| ConfigError(format!("CNN_m {e}")))?;
        if self.message_width == 0 || self.mlp_m_hidden.contains(&0) || self.mlp_q_hidden.contains(&0) {
            return err("layer widths must be positive".into());
        }
        Ok(())
    }

    /// Name and shape of every parameter tensor.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (prefix, cnn) in [("cnn_w", &self.cnn_w), ("cnn_m", &self.cnn_m)] {
            let mut c = cnn.in_channels;
            for (i, l) in cnn.layers.iter().enumerate() {
                out.push((format!("{prefix}.conv{i}.weight"), vec![l.filters, c, l.kernel, l.kernel]));
                out.push((format!("{prefix}.conv{i}.bias"), vec![l.filters]));
                c = l.filters;
            }
        }
        let mlps = [
            ("mlp_m", self.message_input_width(), &self.mlp_m_hidden, self.message_width),
            ("mlp_q", self.update_input_width(), &self.mlp_q_hidden, self.primitive_count()),
        ];
        for (prefix, input, hidden, output) in mlps {
            let widths: Vec<usize> = std::iter::once(input)
                .chain(hidden.iter().copied())
                .chain(std::iter::once(output))
                .collect();
            for (i, w) in widths.windows(2).enumerate() {
                out.push((format!("{prefix}.fc{i}.weight"), vec![w[1], w[0]]));
                out.push((format!("{prefix}.fc{i}.bias"), vec![w[1]]));
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(json).into()
    }
}

/// Total number of scalars in a parameter table.
pub fn parameter_count(params: &ParameterStore) -> usize {
    params.parameter_count()
}

/// Constant network inputs for one traffic snapshot.
#[derive(Clone, Debug)]
pub struct GnnInputs {
    pub num_nodes: usize,
    /// `[n, 1]` scaled own speed.
    pub speeds: Tensor,
    /// `[n, 5·M]` own future states in the own frame, channel-major.
    pub own_futures: Tensor,
    /// `[n, 3, 100, 100]`
    pub rasters: Tensor,
    pub edge_src: Vec<usize>,
    pub edge_dst: Vec<usize>,
    /// `[E, 5·M]` future states of `src` in the frame of `dst`.
    pub edge_futures: Tensor,
    /// `[E, 5]` current state of `src` in the frame of `dst`.
    pub edge_rel: Tensor,
    pub fixed_rows: Vec<usize>,
    /// `[fixed_rows.len(), M]`
    pub fixed_values: Tensor,
}

fn state_features(s: &VehicleState, scale: f64) -> [f64; STATE_CHANNELS] {
    let (sin, cos) = s.theta.sin_cos();
    [s.x * scale, s.y * scale, cos, sin, s.v * scale]
}

fn image_rows(states: &[VehicleState], scale: f64, out: &mut Vec<f64>) {
    let m = states.len();
    let start = out.len();
    out.resize(start + STATE_CHANNELS * m, 0.0);
    for (i, s) in states.iter().enumerate() {
        for (c, f) in state_features(s, scale).into_iter().enumerate() {
            out[start + c * m + i] = f;
        }
    }
}

impl GnnInputs {
    pub fn from_graph(g: &TrafficGraph, feature_scale: f64) -> Self {
        let n = g.len();
        let m = g.nodes()[0].future.states().len();
        let mut speeds = Vec::with_capacity(n);
        let mut own = Vec::with_capacity(n * STATE_CHANNELS * m);
        let mut rasters = Vec::with_capacity(n * RASTER_CHANNELS * RASTER_SIZE * RASTER_SIZE);
        for node in g.nodes() {
            let pose = node.agent.state.pose();
            speeds.push(node.agent.state.v * feature_scale);
            image_rows(node.future.to_frame(&pose).states(), feature_scale, &mut own);
            rasters.extend_from_slice(node.raster.data());
        }
        let e = g.edges().len();
        let mut edge_futures = Vec::with_capacity(e * STATE_CHANNELS * m);
        let mut edge_rel = Vec::with_capacity(e * STATE_CHANNELS);
        for edge in g.edges() {
            let frame = g.nodes()[edge.dst].agent.state.pose();
            let src = &g.nodes()[edge.src];
            image_rows(src.future.to_frame(&frame).states(), feature_scale, &mut edge_futures);
            edge_rel.extend(state_features(&frame.to_frame(&src.agent.state), feature_scale));
        }
        let fixed_rows: Vec<usize> = (0..n).filter(|&i| g.is_fixed(i)).collect();
        let fixed_values: Vec<f64> = fixed_rows
            .iter()
            .flat_map(|&i| g.nodes()[i].agent.intention.probabilities().to_vec())
            .collect();
        let t = |shape: Vec<usize>, data: Vec<f64>| Tensor::new(shape, data).expect("consistent sizes");
        Self {
            num_nodes: n,
            speeds: t(vec![n, 1], speeds),
            own_futures: t(vec![n, STATE_CHANNELS * m], own),
            rasters: t(vec![n, RASTER_CHANNELS, RASTER_SIZE, RASTER_SIZE], rasters),
            edge_src: g.edges().iter().map(|e| e.src).collect(),
            edge_dst: g.edges().iter().map(|e| e.dst).collect(),
            edge_futures: t(vec![e, STATE_CHANNELS * m], edge_futures),
            edge_rel: t(vec![e, STATE_CHANNELS], edge_rel),
            fixed_values: t(vec![fixed_rows.len(), m], fixed_values),
            fixed_rows,
        }
    }

    pub fn num_edges(&self) -> usize {
        self.edge_src.len()
    }
}

/// Output intentions of one step, `[n, M]` each. Fixed rows of `q` hold the
/// fixed intentions; the matching rows of `log_q` are the network's own and
/// carry no meaning.
#[derive(Clone, Copy, Debug)]
pub struct Prediction {
    pub q: Var,
    pub log_q: Var,
}

/// One step of intention dynamics, `q_{t+1} = f_q(Y_t, m)`.
pub trait StepModel {
    fn prims(&self) -> &MotionPrimitiveSet;

    fn feature_scale(&self) -> f64;

    /// `q_in` is `[n, M]`, one row per node of `inputs`.
    fn step(&self, tape: &mut Tape, inputs: &GnnInputs, q_in: Var) -> Result<Prediction>;
}

/// The network definition; parameters live in a separate [`ParameterStore`].
#[derive(Clone, Debug)]
pub struct Rtgnn {
    config: GnnConfig,
    prims: MotionPrimitiveSet,
}

impl Rtgnn {
    pub fn new(config: GnnConfig) -> std::result::Result<Self, ConfigError> {
        config.validate()?;
        let prims = MotionPrimitiveSet::new(config.lattice).map_err(|e| ConfigError(e.to_string()))?;
        Ok(Self { config, prims })
    }

    pub fn config(&self) -> &GnnConfig {
        &self.config
    }

    pub fn prims(&self) -> &MotionPrimitiveSet {
        &self.prims
    }

    /// Uniform `±1/√fan_in` initialization, drawn in parameter-name order.
    pub fn init_parameters(&self, seed: u64) -> ParameterStore {
        let mut shapes = self.config.parameter_shapes();
        shapes.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        for (name, shape) in shapes {
            let layer = name.rsplit_once('.').map_or(name.as_str(), |(l, _)| l);
            let weight_shape = self
                .config
                .parameter_shapes()
                .into_iter()
                .find(|(n, _)| *n == format!("{layer}.weight"))
                .map(|(_, s)| s)
                .expect("every layer has a weight");
            let fan_in: usize = weight_shape[1..].iter().product();
            let bound = 1.0 / (fan_in as f64).sqrt();
            let numel: usize = shape.iter().product();
            let data = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
            store.insert(name, Tensor::new(shape, data).expect("shape matches"));
        }
        store
    }

    /// Checks that `params` holds exactly the tensors this config needs.
    pub fn check_parameters(&self, params: &ParameterStore) -> Result<()> {
        let shapes = self.config.parameter_shapes();
        for (name, shape) in &shapes {
            match params.get(name) {
                None => return Err(TensorError::MissingGradient(name.clone())),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(TensorError::Shape {
                        layer: "parameters",
                        detail: format!("`{name}` is {:?}, config needs {shape:?}", t.shape()),
                    })
                }
                Some(_) => {}
            }
        }
        if params.len() != shapes.len() {
            return Err(TensorError::Shape {
                layer: "parameters",
                detail: format!("{} tensors, config needs {}", params.len(), shapes.len()),
            });
        }
        Ok(())
    }

    /// Binds parameters as trainable leaves of `tape`.
    pub fn bind_trainable<'a>(&'a self, params: &ParameterStore, tape: &mut Tape) -> Result<BoundRtgnn<'a>> {
        self.check_parameters(params)?;
        Ok(BoundRtgnn {
            model: self,
            vars: params.register(tape),
        })
    }

    /// Binds parameters as constants of `tape`.
    pub fn bind_frozen<'a>(&'a self, params: &ParameterStore, tape: &mut Tape) -> Result<BoundRtgnn<'a>> {
        self.check_parameters(params)?;
        Ok(BoundRtgnn {
            model: self,
            vars: params.register_constants(tape),
        })
    }

    fn cnn(&self, tape: &mut Tape, vars: &ParamVars, prefix: &str, cfg: &CnnConfig, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..cfg.layers.len() {
            let w = vars.get(&format!("{prefix}.conv{i}.weight"));
            let b = vars.get(&format!("{prefix}.conv{i}.bias"));
            h = tape.conv2d(h, w, b)?;
            h = match cfg.activation {
                Activation::Relu => tape.relu(h),
                Activation::LeakyRelu => tape.leaky_relu(h, self.config.leaky_slope),
            };
            let s = tape.value(h).shape();
            if s[2] >= 2 && s[3] >= 2 {
                h = tape.maxpool2d(h)?;
            }
        }
        h = tape.adaptive_maxpool2d(h, cfg.out_grid[0], cfg.out_grid[1])?;
        let n = tape.value(h).shape()[0];
        tape.reshape(h, &[n, cfg.output_width()])
    }

    fn mlp(&self, tape: &mut Tape, vars: &ParamVars, prefix: &str, layers: usize, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..layers {
            let w = vars.get(&format!("{prefix}.fc{i}.weight"));
            let b = vars.get(&format!("{prefix}.fc{i}.bias"));
            h = tape.linear(h, w, b)?;
            if i + 1 < layers {
                h = tape.leaky_relu(h, self.config.leaky_slope);
            }
        }
        Ok(h)
    }

    /// `K` synchronous rounds of messages and node updates.
    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, inputs: &GnnInputs, q_in: Var) -> Result<Prediction> {
        let cfg = &self.config;
        let n = inputs.num_nodes;
        let m = cfg.primitive_count();
        let q_shape = tape.value(q_in).shape().to_vec();
        if q_shape != [n, m] {
            return Err(TensorError::Shape {
                layer: "gnn_forward",
                detail: format!("intentions {q_shape:?} for {n} nodes and {m} primitives"),
            });
        }
        let e = inputs.num_edges();
        let (ha, wa) = (cfg.cnn_w.height, cfg.cnn_w.width);
        let speeds = tape.constant(inputs.speeds.clone());
        let own = tape.constant(inputs.own_futures.clone());
        let raster = tape.constant(inputs.rasters.clone());
        let p = self.cnn(tape, vars, "cnn_m", &cfg.cnn_m, raster)?;
        let edge_parts = if e > 0 {
            let fut = tape.constant(inputs.edge_futures.clone());
            let rel = tape.constant(inputs.edge_rel.clone());
            let speed_dst = tape.gather_rows(speeds, &inputs.edge_dst)?;
            Some((fut, rel, speed_dst))
        } else {
            None
        };
        let node_rows: Vec<usize> = (0..n).collect();
        let edge_rows: Vec<usize> = (n..n + e).collect();
        let msg_layers = cfg.mlp_m_hidden.len() + 1;
        let upd_layers = cfg.mlp_q_hidden.len() + 1;

        let mut q = tape.override_rows(q_in, &inputs.fixed_rows, &inputs.fixed_values)?;
        let mut log_q = None;
        for _ in 0..cfg.iterations {
            let node_img = tape.concat_cols(&[own, q])?;
            let (c_self, agg) = match edge_parts {
                Some((fut, rel, speed_dst)) => {
                    let q_src = tape.gather_rows(q, &inputs.edge_src)?;
                    let edge_img = tape.concat_cols(&[fut, q_src])?;
                    let all = tape.concat_rows(&[node_img, edge_img])?;
                    let img = tape.reshape(all, &[n + e, STATE_CHANNELS + 1, ha, wa])?;
                    let c_all = self.cnn(tape, vars, "cnn_w", &cfg.cnn_w, img)?;
                    let c_self = tape.gather_rows(c_all, &node_rows)?;
                    let c_src = tape.gather_rows(c_all, &edge_rows)?;
                    let c_dst = tape.gather_rows(c_self, &inputs.edge_dst)?;
                    let msg_in = tape.concat_cols(&[speed_dst, c_dst, rel, c_src])?;
                    let msg = self.mlp(tape, vars, "mlp_m", msg_layers, msg_in)?;
                    let agg = tape.segment_max_or(msg, &inputs.edge_dst, n, cfg.empty_message)?;
                    (c_self, agg)
                }
                None => {
                    let img = tape.reshape(node_img, &[n, STATE_CHANNELS + 1, ha, wa])?;
                    let c_self = self.cnn(tape, vars, "cnn_w", &cfg.cnn_w, img)?;
                    let agg = tape.constant(Tensor::full(&[n, cfg.message_width], cfg.empty_message));
                    (c_self, agg)
                }
            };
            let upd_in = tape.concat_cols(&[speeds, c_self, p, agg])?;
            let logits = self.mlp(tape, vars, "mlp_q", upd_layers, upd_in)?;
            log_q = Some(tape.log_softmax(logits)?);
            let soft = tape.softmax(logits)?;
            q = tape.override_rows(soft, &inputs.fixed_rows, &inputs.fixed_values)?;
        }
        Ok(Prediction {
            q,
            log_q: log_q.expect("at least one iteration"),
        })
    }
}

/// An [`Rtgnn`] with its parameters placed on one tape.
pub struct BoundRtgnn<'a> {
    model: &'a Rtgnn,
    vars: ParamVars,
}

impl BoundRtgnn<'_> {
    pub fn vars(&self) -> &ParamVars {
        &self.vars
    }
}

impl StepModel for BoundRtgnn<'_> {
    fn prims(&self) -> &MotionPrimitiveSet {
        &self.model.prims
    }

    fn feature_scale(&self) -> f64 {
        self.model.config.feature_scale
    }

    fn step(&self, tape: &mut Tape, inputs: &GnnInputs, q_in: Var) -> Result<Prediction> {
        self.model.forward(tape, &self.vars, inputs, q_in)
    }
}

/// Builds the `[n, M]` intention tensor of a graph.
pub fn intention_tensor(g: &TrafficGraph) -> Tensor {
    let rows: Vec<Vec<f64>> = g
        .nodes()
        .iter()
        .map(|n| n.agent.intention.probabilities().to_vec())
        .collect();
    Tensor::from_rows(&rows).expect("equal lengths")
}
