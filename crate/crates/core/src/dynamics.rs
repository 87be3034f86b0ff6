//! Unicycle kinematics, the motion-primitive lattice and planar frames.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use std::f64::consts::PI;

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let r = theta.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Pose and speed of one agent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, theta: f64, v: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
            v,
        }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn distance_to(&self, other: &VehicleState) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite() && self.v.is_finite()
    }

    /// The frame attached to this agent.
    pub fn pose(&self) -> Pose2 {
        Pose2::new(self.x, self.y, self.theta)
    }
}

/// Linear acceleration (m/s²) and angular velocity (rad/s).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub a: f64,
    pub omega: f64,
}

impl ControlInput {
    pub const ZERO: ControlInput = ControlInput { a: 0.0, omega: 0.0 };

    pub fn new(a: f64, omega: f64) -> Self {
        Self { a, omega }
    }
}

/// Dynamically extended unicycle with piecewise-constant controls.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Unicycle {
    /// Stop at zero speed instead of reversing.
    pub clamp_nonnegative_speed: bool,
}

impl Default for Unicycle {
    fn default() -> Self {
        Self {
            clamp_nonnegative_speed: true,
        }
    }
}

/// Below this turn rate the displacement integrals use their Taylor series.
pub const SMALL_OMEGA: f64 = 1e-6;

type Complex = (f64, f64);

/// `(∫₀¹ e^{isu} du, ∫₀¹ u e^{isu} du)` by Taylor series, for small `s`.
fn phase_integrals_series(s: f64) -> (Complex, Complex) {
    let s2 = s * s;
    (
        (1.0 - s2 / 6.0, s / 2.0 - s * s2 / 24.0),
        (0.5 - s2 / 8.0, s / 3.0 - s * s2 / 30.0),
    )
}

/// Closed form of [`phase_integrals_series`]; `s` must be nonzero.
fn phase_integrals_exact(s: f64) -> (Complex, Complex) {
    let (sin, cos) = s.sin_cos();
    let half = (0.5 * s).sin();
    let one_minus_cos = 2.0 * half * half;
    let e1 = (sin / s, one_minus_cos / s);
    let e2 = ((sin - e1.1) / s, (e1.0 - cos) / s);
    (e1, e2)
}

impl Unicycle {
    /// Exact state after holding `u` for `dt` seconds.
    ///
    /// Position integrates `(v + a t)(cos, sin)(θ + ω t)` in closed form. With
    /// clamping on, a braking agent stops when its speed reaches zero while
    /// the heading keeps turning.
    pub fn integrate(&self, x: &VehicleState, u: &ControlInput, dt: f64) -> VehicleState {
        let mut v1 = x.v + u.a * dt;
        let mut move_time = dt;
        if self.clamp_nonnegative_speed && v1 < 0.0 {
            v1 = 0.0;
            move_time = if u.a < 0.0 {
                (-x.v / u.a).clamp(0.0, dt)
            } else {
                0.0
            };
        }
        let (dx, dy) = displacement(x.theta, x.v, u.a, u.omega, move_time);
        VehicleState {
            x: x.x + dx,
            y: x.y + dy,
            theta: wrap_angle(x.theta + u.omega * dt),
            v: v1,
        }
    }
}

/// `∫₀ᵗ (v + a τ) (cos, sin)(θ + ω τ) dτ`.
fn displacement(theta: f64, v: f64, a: f64, omega: f64, t: f64) -> (f64, f64) {
    if t <= 0.0 {
        return (0.0, 0.0);
    }
    let integrals = if omega.abs() < SMALL_OMEGA {
        phase_integrals_series(omega * t)
    } else {
        phase_integrals_exact(omega * t)
    };
    rotate_displacement(theta, v, a, t, integrals)
}

fn rotate_displacement(theta: f64, v: f64, a: f64, t: f64, integrals: (Complex, Complex)) -> (f64, f64) {
    let ((e1r, e1i), (e2r, e2i)) = integrals;
    // (v t E1 + a t² E2) rotated by θ.
    let re = v * t * e1r + a * t * t * e2r;
    let im = v * t * e1i + a * t * t * e2i;
    let (s, c) = theta.sin_cos();
    (re * c - im * s, re * s + im * c)
}

/// [`Unicycle::integrate`] with the default speed clamp.
pub fn integrate_unicycle(x: &VehicleState, u: &ControlInput, dt: f64) -> VehicleState {
    Unicycle::default().integrate(x, u, dt)
}

#[derive(Debug, Error, PartialEq)]
pub enum LatticeError {
    #[error("{axis} count {count} must be odd and at least 1 so zero control lies on the lattice")]
    EvenCount { axis: &'static str, count: usize },
    #[error("{axis} range [{min}, {max}] must be increasing and symmetric about zero")]
    BadRange {
        axis: &'static str,
        min: f64,
        max: f64,
    },
    #[error("primitive duration must be positive, got {0}")]
    BadDuration(f64),
}

/// Axis layout of the motion-primitive lattice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeConfig {
    pub accel_min: f64,
    pub accel_max: f64,
    pub accel_count: usize,
    pub omega_min: f64,
    pub omega_max: f64,
    pub omega_count: usize,
    pub dt: f64,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        Self {
            accel_min: -8.0,
            accel_max: 8.0,
            accel_count: 21,
            omega_min: -0.5,
            omega_max: 0.5,
            omega_count: 21,
            dt: 0.5,
        }
    }
}

impl LatticeConfig {
    /// A 9x9 lattice over the same control ranges, for fast tests.
    pub fn toy() -> Self {
        Self {
            accel_count: 9,
            omega_count: 9,
            ..Self::default()
        }
    }
}

/// Discrete set of `(a, ω)` primitives held for `dt`.
///
/// Primitive `i` has acceleration index `i / omega_count` and angular
/// velocity index `i % omega_count`.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionPrimitiveSet {
    config: LatticeConfig,
    accelerations: Vec<f64>,
    angular_velocities: Vec<f64>,
}

fn axis(min: f64, max: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![0.0];
    }
    (0..count)
        .map(|k| min + (max - min) * k as f64 / (count - 1) as f64)
        .collect()
}

impl MotionPrimitiveSet {
    pub fn new(config: LatticeConfig) -> Result<Self, LatticeError> {
        for (name, count) in [
            ("acceleration", config.accel_count),
            ("angular velocity", config.omega_count),
        ] {
            if count % 2 == 0 {
                return Err(LatticeError::EvenCount { axis: name, count });
            }
        }
        for (name, min, max) in [
            ("acceleration", config.accel_min, config.accel_max),
            ("angular velocity", config.omega_min, config.omega_max),
        ] {
            if !(min < max) || (min + max).abs() > 1e-12 * max.abs().max(1.0) {
                return Err(LatticeError::BadRange {
                    axis: name,
                    min,
                    max,
                });
            }
        }
        if !(config.dt > 0.0) {
            return Err(LatticeError::BadDuration(config.dt));
        }
        let mut accelerations = axis(config.accel_min, config.accel_max, config.accel_count);
        let mut angular_velocities = axis(config.omega_min, config.omega_max, config.omega_count);
        // symmetric ranges put zero exactly at the center
        accelerations[config.accel_count / 2] = 0.0;
        angular_velocities[config.omega_count / 2] = 0.0;
        Ok(Self {
            config,
            accelerations,
            angular_velocities,
        })
    }

    pub fn config(&self) -> &LatticeConfig {
        &self.config
    }

    pub fn accelerations(&self) -> &[f64] {
        &self.accelerations
    }

    pub fn angular_velocities(&self) -> &[f64] {
        &self.angular_velocities
    }

    pub fn dt(&self) -> f64 {
        self.config.dt
    }

    pub fn accel_count(&self) -> usize {
        self.accelerations.len()
    }

    pub fn omega_count(&self) -> usize {
        self.angular_velocities.len()
    }

    /// Number of primitives, `M`.
    pub fn len(&self) -> usize {
        self.accelerations.len() * self.angular_velocities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, accel_index: usize, omega_index: usize) -> usize {
        accel_index * self.omega_count() + omega_index
    }

    pub fn split_index(&self, i: usize) -> (usize, usize) {
        (i / self.omega_count(), i % self.omega_count())
    }

    pub fn control(&self, i: usize) -> ControlInput {
        let (ai, wi) = self.split_index(i);
        ControlInput::new(self.accelerations[ai], self.angular_velocities[wi])
    }

    /// The `(0, 0)` primitive.
    pub fn zero_index(&self) -> usize {
        self.index(self.accel_count() / 2, self.omega_count() / 2)
    }

    pub fn accel_spacing(&self) -> f64 {
        (self.config.accel_max - self.config.accel_min) / (self.accel_count() - 1).max(1) as f64
    }

    pub fn omega_spacing(&self) -> f64 {
        (self.config.omega_max - self.config.omega_min) / (self.omega_count() - 1).max(1) as f64
    }

    /// Nearest primitive after normalizing each axis by its spacing.
    /// Exact half-way ties go to the lower index.
    pub fn nearest_index(&self, u: &ControlInput) -> usize {
        let snap = |value: f64, min: f64, spacing: f64, count: usize| -> usize {
            let pos = (value - min) / spacing;
            ((pos - 0.5).ceil().max(0.0) as usize).min(count - 1)
        };
        let ai = snap(
            u.a,
            self.config.accel_min,
            self.accel_spacing(),
            self.accel_count(),
        );
        let wi = snap(
            u.omega,
            self.config.omega_min,
            self.omega_spacing(),
            self.omega_count(),
        );
        self.index(ai, wi)
    }
}

/// Builds and validates the primitive lattice.
pub fn build_primitive_set(config: LatticeConfig) -> Result<MotionPrimitiveSet, LatticeError> {
    MotionPrimitiveSet::new(config)
}

/// States reached from one start state under every primitive, stored in
/// primitive-index order.
#[derive(Clone, Debug, PartialEq)]
pub struct FutureStates {
    accel_count: usize,
    omega_count: usize,
    states: Vec<VehicleState>,
}

impl FutureStates {
    pub fn get(&self, accel_index: usize, omega_index: usize) -> &VehicleState {
        &self.states[accel_index * self.omega_count + omega_index]
    }

    pub fn states(&self) -> &[VehicleState] {
        &self.states
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.accel_count, self.omega_count)
    }

    /// Every entry expressed in frame `pose`.
    pub fn to_frame(&self, pose: &Pose2) -> FutureStates {
        FutureStates {
            accel_count: self.accel_count,
            omega_count: self.omega_count,
            states: self.states.iter().map(|s| pose.to_frame(s)).collect(),
        }
    }
}

pub fn future_states(
    x: &VehicleState,
    prims: &MotionPrimitiveSet,
    dynamics: &Unicycle,
) -> FutureStates {
    let states = (0..prims.len())
        .map(|i| dynamics.integrate(x, &prims.control(i), prims.dt()))
        .collect();
    FutureStates {
        accel_count: prims.accel_count(),
        omega_count: prims.omega_count(),
        states,
    }
}

/// A rigid planar frame: origin and orientation in the global frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2 {
    pub const IDENTITY: Pose2 = Pose2 {
        x: 0.0,
        y: 0.0,
        theta: 0.0,
    };

    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    /// `self ∘ other`: `other` expressed relative to `self`, mapped to global.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            -(c * self.x + s * self.y),
            s * self.x - c * self.y,
            -self.theta,
        )
    }

    /// Global point into this frame.
    pub fn point_to_frame(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy]
    }

    /// Point in this frame into the global frame.
    pub fn point_from_frame(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    /// Expresses `state` in this frame; speed is unchanged.
    pub fn to_frame(&self, state: &VehicleState) -> VehicleState {
        let [x, y] = self.point_to_frame(state.position());
        VehicleState {
            x,
            y,
            theta: wrap_angle(state.theta - self.theta),
            v: state.v,
        }
    }
}
