//! Velocity-obstacle constraint and the sampled distribution of its violation.

use std::fmt;

use nalgebra::Vector2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dynamics::{realized_velocity, ControlInput, Disturbance, RobotState};
use crate::error::{Error, Result};
use crate::noise::SampleSet;

/// Relative speeds below this (squared) are treated as "at rest".
pub const STATIC_SPEED_SQ: f64 = 1e-12;

/// Signed constraint values together with the `(robot, obstacle)` sample
/// pair behind each one.
pub type ConstraintValues = (Vec<f64>, Vec<(usize, usize)>);

/// Velocity-obstacle constraint value `f`; `f <= 0` means the relative
/// velocity points outside the collision cone.
pub fn vo_constraint(
    x_r: Vector2<f64>,
    v_r: Vector2<f64>,
    x_o: Vector2<f64>,
    v_o: Vector2<f64>,
    radius: f64,
) -> Result<f64> {
    if !(radius > 0.0) {
        return Err(Error::Argument(format!("combined radius must be positive, got {radius}")));
    }
    Ok(vo_value(x_r - x_o, v_r - v_o, radius * radius))
}

/// `(r·v)²/‖v‖² − ‖r‖² + R²`, or `R² − ‖r‖²` when the relative velocity
/// vanishes.
#[inline]
pub(crate) fn vo_value(r: Vector2<f64>, v: Vector2<f64>, radius_sq: f64) -> f64 {
    let vv = v.norm_squared();
    let rr = r.norm_squared();
    if vv < STATIC_SPEED_SQ {
        return radius_sq - rr;
    }
    let rv = r.dot(&v);
    rv * rv / vv - rr + radius_sq
}

/// Shape of the collision cone.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cone {
    /// The plain constraint: any relative velocity whose supporting line
    /// crosses the disk violates, including when the agents separate.
    #[default]
    Line,
    /// Only approaching relative velocities (`r·v < 0`) are tested against
    /// the cone; separating ones violate only while the disks overlap.
    Forward,
}

impl Cone {
    /// Constraint value for relative position `r = x_r − x_o` and relative
    /// velocity `v = v_r − v_o`.
    #[inline]
    pub fn value(self, r: Vector2<f64>, v: Vector2<f64>, radius_sq: f64) -> f64 {
        match self {
            Cone::Forward if r.dot(&v) >= 0.0 => radius_sq - r.norm_squared(),
            _ => vo_value(r, v, radius_sq),
        }
    }
}

#[inline]
pub fn violation(f: f64) -> f64 {
    f.max(0.0)
}

/// How many (robot, obstacle) sample pairs enter a violation vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairBudget {
    All,
    Limit(usize),
}

impl PairBudget {
    fn effective(self, total: usize) -> usize {
        match self {
            PairBudget::All => total,
            PairBudget::Limit(n) => n.min(total),
        }
    }
}

impl Serialize for PairBudget {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            PairBudget::All => s.serialize_str("all"),
            PairBudget::Limit(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for PairBudget {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(usize),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(0) => Err(serde::de::Error::custom("pair_budget must be at least 1")),
            Raw::Count(n) => Ok(PairBudget::Limit(n)),
            Raw::Word(w) if w == "all" => Ok(PairBudget::All),
            Raw::Word(w) => Err(serde::de::Error::custom(format!("pair_budget must be a count or \"all\", got {w:?}"))),
        }
    }
}

impl fmt::Display for PairBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PairBudget::All => f.write_str("all"),
            PairBudget::Limit(n) => write!(f, "{n}"),
        }
    }
}

/// Chooses the (robot, obstacle) index pairs for one violation vector.
///
/// A budget covering the full product yields every pair in row-major order.
/// Smaller budgets draw that many distinct pairs uniformly, reported in
/// row-major order.
pub fn select_pairs(n_robot: usize, n_obstacle: usize, budget: PairBudget, seed: u64) -> Vec<(usize, usize)> {
    let total = n_robot * n_obstacle;
    let take = budget.effective(total);
    if take == total {
        return (0..total).map(|p| (p / n_obstacle, p % n_obstacle)).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flat = rand::seq::index::sample(&mut rng, total, take).into_vec();
    flat.sort_unstable();
    flat.into_iter().map(|p| (p / n_obstacle, p % n_obstacle)).collect()
}

/// Sampled violations `h_p` with their weights `a_p`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViolationVector {
    h: Vec<f64>,
    weights: Vec<f64>,
    pair_index: Vec<(usize, usize)>,
}

impl ViolationVector {
    /// Builds a vector from raw values; weights are normalized to sum to one.
    pub fn new(h: Vec<f64>, weights: Vec<f64>, pair_index: Vec<(usize, usize)>) -> Result<Self> {
        if h.len() != weights.len() || h.len() != pair_index.len() {
            return Err(Error::Argument(format!(
                "length mismatch: {} violations, {} weights, {} pairs",
                h.len(),
                weights.len(),
                pair_index.len()
            )));
        }
        if h.is_empty() {
            return Err(Error::Argument("violation vector is empty".into()));
        }
        if h.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Argument("violations must be finite and non-negative".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Argument("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Argument("weights sum to zero".into()));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { h, weights, pair_index })
    }

    /// Uniform weights; pair indices default to `(p, 0)`.
    pub fn uniform(h: Vec<f64>) -> Result<Self> {
        let n = h.len();
        let pairs = (0..n).map(|p| (p, 0)).collect();
        Self::new(h, vec![1.0; n], pairs)
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn pair_index(&self) -> &[(usize, usize)] {
        &self.pair_index
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }
}

/// Robot-side sample: pose `(x, y, θ)` paired with its own actuation draw.
pub(crate) fn robot_velocities(
    robot_samples: &SampleSet,
    control_noise: &SampleSet,
    control: ControlInput,
    dt: f64,
    out: &mut Vec<Vector2<f64>>,
) {
    out.clear();
    out.extend(robot_samples.rows().zip(control_noise.rows()).map(|(pose, eps)| {
        let state = RobotState::new(pose[0], pose[1], pose[2]);
        realized_velocity(&state, control, Disturbance::new(eps[0], eps[1]), dt)
    }));
}

/// Raw constraint values `f` over `pairs`, written to `out` in pair order.
pub(crate) fn constraint_values(
    robot_samples: &SampleSet,
    robot_vel: &[Vector2<f64>],
    obstacle_samples: &SampleSet,
    pairs: &[(usize, usize)],
    radius_sq: f64,
    cone: Cone,
    out: &mut Vec<f64>,
) {
    out.clear();
    out.extend(pairs.iter().map(|&(i, j)| {
        let pose = robot_samples.row(i);
        let obs = obstacle_samples.row(j);
        let r = Vector2::new(pose[0] - obs[0], pose[1] - obs[1]);
        let v = Vector2::new(robot_vel[i].x - obs[2], robot_vel[i].y - obs[3]);
        cone.value(r, v, radius_sq)
    }));
}

pub(crate) fn check_sample_shapes(
    robot_samples: &SampleSet,
    control_noise: &SampleSet,
    obstacle_samples: &SampleSet,
) -> Result<()> {
    if robot_samples.dim() != 3 {
        return Err(Error::Argument(format!(
            "robot samples must be (x, y, theta), got dimension {}",
            robot_samples.dim()
        )));
    }
    if control_noise.dim() != 2 {
        return Err(Error::Argument(format!(
            "control noise samples must be (eps_v, eps_omega), got dimension {}",
            control_noise.dim()
        )));
    }
    if obstacle_samples.dim() != 4 {
        return Err(Error::Argument(format!(
            "obstacle samples must be (x, y, vx, vy), got dimension {}",
            obstacle_samples.dim()
        )));
    }
    if robot_samples.len() != control_noise.len() {
        return Err(Error::Argument(format!(
            "{} robot samples but {} control noise samples",
            robot_samples.len(),
            control_noise.len()
        )));
    }
    Ok(())
}

/// Signed constraint values `f` for every selected pair, in pair order.
#[allow(clippy::too_many_arguments)]
pub fn constraint_vector(
    robot_samples: &SampleSet,
    control: ControlInput,
    control_noise: &SampleSet,
    obstacle_samples: &SampleSet,
    radius: f64,
    dt: f64,
    pair_budget: PairBudget,
    seed: u64,
) -> Result<ConstraintValues> {
    constraint_vector_with_cone(
        robot_samples,
        control,
        control_noise,
        obstacle_samples,
        radius,
        dt,
        pair_budget,
        seed,
        Cone::Line,
    )
}

/// [`constraint_vector`] for a chosen cone shape.
#[allow(clippy::too_many_arguments)]
pub fn constraint_vector_with_cone(
    robot_samples: &SampleSet,
    control: ControlInput,
    control_noise: &SampleSet,
    obstacle_samples: &SampleSet,
    radius: f64,
    dt: f64,
    pair_budget: PairBudget,
    seed: u64,
    cone: Cone,
) -> Result<ConstraintValues> {
    check_sample_shapes(robot_samples, control_noise, obstacle_samples)?;
    if !(radius > 0.0) {
        return Err(Error::Argument(format!("combined radius must be positive, got {radius}")));
    }
    if !(dt > 0.0) {
        return Err(Error::Argument(format!("time step must be positive, got {dt}")));
    }
    let pairs = select_pairs(robot_samples.len(), obstacle_samples.len(), pair_budget, seed);
    let mut vel = Vec::new();
    robot_velocities(robot_samples, control_noise, control, dt, &mut vel);
    let mut f = Vec::new();
    constraint_values(robot_samples, &vel, obstacle_samples, &pairs, radius * radius, cone, &mut f);
    Ok((f, pairs))
}

/// Violations `max(0, f)` over robot × obstacle sample pairs with uniform
/// weights.
///
/// `robot_samples` rows are `(x, y, θ)`, `control_noise` rows `(ε_v, ε_ω)`
/// (index-aligned with the robot samples) and `obstacle_samples` rows
/// `(x, y, vx, vy)`.
#[allow(clippy::too_many_arguments)]
pub fn violation_vector(
    robot_samples: &SampleSet,
    control: ControlInput,
    control_noise: &SampleSet,
    obstacle_samples: &SampleSet,
    radius: f64,
    dt: f64,
    pair_budget: PairBudget,
    seed: u64,
) -> Result<ViolationVector> {
    violation_vector_with_cone(
        robot_samples,
        control,
        control_noise,
        obstacle_samples,
        radius,
        dt,
        pair_budget,
        seed,
        Cone::Line,
    )
}

/// [`violation_vector`] for a chosen cone shape.
#[allow(clippy::too_many_arguments)]
pub fn violation_vector_with_cone(
    robot_samples: &SampleSet,
    control: ControlInput,
    control_noise: &SampleSet,
    obstacle_samples: &SampleSet,
    radius: f64,
    dt: f64,
    pair_budget: PairBudget,
    seed: u64,
    cone: Cone,
) -> Result<ViolationVector> {
    let (f, pairs) = constraint_vector_with_cone(
        robot_samples,
        control,
        control_noise,
        obstacle_samples,
        radius,
        dt,
        pair_budget,
        seed,
        cone,
    )?;
    let n = f.len();
    let h = f.into_iter().map(violation).collect();
    ViolationVector::new(h, vec![1.0; n], pairs)
}
