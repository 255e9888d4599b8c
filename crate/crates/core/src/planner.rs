//! One-step sampling planner over a fixed control grid.
//!
//! Every grid candidate is scored by the sum over obstacles of the MMD
//! between its violation distribution and the point mass at zero, plus a
//! velocity-tracking term and a control regularizer. The cheapest
//! candidate wins.

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{realized_velocity, ControlInput, Disturbance, RobotState};
use crate::error::{Error, Result};
use crate::mmd::{mmd_slices, KernelConfig};
use crate::noise::SampleSet;
use crate::vo::{check_sample_shapes, constraint_values, robot_velocities, select_pairs, violation, Cone, PairBudget};

const ARRIVAL_DIST: f64 = 1e-6;
/// Slack on the grid bounds when checking a control for feasibility.
const BOUND_SLACK: f64 = 1e-9;

/// Box of feasible controls, tiled uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlGrid {
    pub v_min: f64,
    pub v_max: f64,
    pub omega_max: f64,
    pub v_resolution: usize,
    pub omega_resolution: usize,
}

impl Default for ControlGrid {
    fn default() -> Self {
        Self { v_min: 0.0, v_max: 1.5, omega_max: 1.0, v_resolution: 25, omega_resolution: 25 }
    }
}

fn axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| if i == n - 1 { hi } else { lo + step * i as f64 }).collect()
}

impl ControlGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_min.is_finite() && self.v_max.is_finite() && self.v_min < self.v_max) {
            return Err(Error::Config(format!("grid needs v_min < v_max, got [{}, {}]", self.v_min, self.v_max)));
        }
        if !(self.omega_max > 0.0 && self.omega_max.is_finite()) {
            return Err(Error::Config(format!("grid omega_max must be positive, got {}", self.omega_max)));
        }
        if self.v_resolution == 0 || self.omega_resolution == 0 {
            return Err(Error::Config("grid resolution must be at least 1 per axis".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.v_resolution * self.omega_resolution
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Candidates in enumeration order: speed-major, then angular rate.
    pub fn candidates(&self) -> Vec<ControlInput> {
        let vs = axis(self.v_min, self.v_max, self.v_resolution);
        let ws = axis(-self.omega_max, self.omega_max, self.omega_resolution);
        vs.iter().flat_map(|&v| ws.iter().map(move |&w| ControlInput::new(v, w))).collect()
    }

    pub fn contains(&self, u: ControlInput) -> bool {
        u.v >= self.v_min - BOUND_SLACK
            && u.v <= self.v_max + BOUND_SLACK
            && u.omega.abs() <= self.omega_max + BOUND_SLACK
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    /// Velocity tracking.
    pub w1: f64,
    /// Control magnitude.
    pub w2: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { w1: 1.0, w2: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub grid: ControlGrid,
    pub weights: CostWeights,
    pub gamma: f64,
    pub pair_budget: PairBudget,
    /// Required probability of constraint satisfaction. Only used when
    /// reporting success; the cost itself has no chance constraint.
    pub eta: f64,
    pub v_max_desired: f64,
    /// Collision-cone shape; the plain line cone unless set.
    pub cone: Cone,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            grid: ControlGrid::default(),
            weights: CostWeights::default(),
            gamma: 0.1,
            pair_budget: PairBudget::Limit(500),
            eta: 0.9,
            v_max_desired: 1.0,
            cone: Cone::Line,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        KernelConfig::new(self.gamma)?;
        let CostWeights { w1, w2 } = self.weights;
        if !(w1 >= 0.0 && w2 >= 0.0 && w1.is_finite() && w2.is_finite()) {
            return Err(Error::Config(format!("cost weights must be non-negative, got ({w1}, {w2})")));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::Config(format!("eta must lie in (0, 1], got {}", self.eta)));
        }
        if !(self.v_max_desired >= 0.0 && self.v_max_desired.is_finite()) {
            return Err(Error::Config(format!("v_max_desired must be non-negative, got {}", self.v_max_desired)));
        }
        Ok(())
    }

    pub fn kernel(&self) -> KernelConfig {
        KernelConfig { gamma: self.gamma }
    }
}

/// Goal-seeking velocity of magnitude `v_max_desired`; zero at the goal.
pub fn desired_velocity(x: Vector2<f64>, goal: Vector2<f64>, v_max_desired: f64) -> Vector2<f64> {
    let d = goal - x;
    let dist = d.norm();
    if dist > ARRIVAL_DIST {
        d * (v_max_desired / dist)
    } else {
        Vector2::zeros()
    }
}

/// Noise-free velocity of `control` from the nominal state.
pub fn nominal_velocity(state: &RobotState, control: ControlInput, dt: f64) -> Vector2<f64> {
    realized_velocity(state, control, Disturbance::default(), dt)
}

/// Belief about the robot and obstacles at one planning instant.
///
/// Robot rows are `(x, y, θ)`, control noise rows `(ε_v, ε_ω)` and each
/// obstacle's rows `(x, y, vx, vy)`.
#[derive(Debug, Clone, Copy)]
pub struct PlanningSamples<'a> {
    pub robot: &'a SampleSet,
    pub control_noise: &'a SampleSet,
    pub obstacles: &'a [SampleSet],
}

impl PlanningSamples<'_> {
    fn validate(&self) -> Result<()> {
        for obs in self.obstacles {
            check_sample_shapes(self.robot, self.control_noise, obs)?;
        }
        if self.obstacles.is_empty() && (self.robot.dim() != 3 || self.control_noise.dim() != 2) {
            return Err(Error::Argument("robot samples must be (x, y, theta) and noise (eps_v, eps_omega)".into()));
        }
        if self.robot.len() != self.control_noise.len() {
            return Err(Error::Argument(format!(
                "{} robot samples but {} control noise samples",
                self.robot.len(),
                self.control_noise.len()
            )));
        }
        Ok(())
    }
}

/// Per-plan state shared by all candidates: the sample pairs of every
/// obstacle and their uniform weights.
struct CostModel<'a> {
    samples: PlanningSamples<'a>,
    pairs: Vec<Vec<(usize, usize)>>,
    weights: Vec<Vec<f64>>,
    state: RobotState,
    v_d: Vector2<f64>,
    config: &'a PlannerConfig,
    radius_sq: f64,
    dt: f64,
}

/// Seed for the pair subset of obstacle `j` within one plan call.
pub fn pair_seed(seed: u64, obstacle: usize) -> u64 {
    seed.wrapping_add((obstacle as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

impl<'a> CostModel<'a> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        samples: PlanningSamples<'a>,
        state: RobotState,
        v_d: Vector2<f64>,
        config: &'a PlannerConfig,
        radius: f64,
        dt: f64,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        samples.validate()?;
        if !(radius > 0.0) {
            return Err(Error::Argument(format!("combined radius must be positive, got {radius}")));
        }
        if !(dt > 0.0) {
            return Err(Error::Argument(format!("time step must be positive, got {dt}")));
        }
        if samples.obstacles.is_empty() && config.weights.w1 == 0.0 && config.weights.w2 == 0.0 {
            return Err(Error::Config("w1 and w2 are both zero with no obstacles to avoid".into()));
        }
        let pairs: Vec<_> = samples
            .obstacles
            .iter()
            .enumerate()
            .map(|(j, obs)| select_pairs(samples.robot.len(), obs.len(), config.pair_budget, pair_seed(seed, j)))
            .collect();
        let weights = pairs.iter().map(|p| vec![1.0 / p.len() as f64; p.len()]).collect();
        Ok(Self { samples, pairs, weights, state, v_d, config, radius_sq: radius * radius, dt })
    }

    fn tracking(&self, control: ControlInput) -> f64 {
        let CostWeights { w1, w2 } = self.config.weights;
        let v = nominal_velocity(&self.state, control, self.dt);
        w1 * (v - self.v_d).norm_squared() + w2 * control.norm_squared()
    }

    fn distribution_terms(&self, control: ControlInput, out: &mut Vec<f64>) {
        out.clear();
        if self.samples.obstacles.is_empty() {
            return;
        }
        let mut vel = Vec::with_capacity(self.samples.robot.len());
        robot_velocities(self.samples.robot, self.samples.control_noise, control, self.dt, &mut vel);
        let mut h = Vec::new();
        for ((obs, pairs), weights) in self.samples.obstacles.iter().zip(&self.pairs).zip(&self.weights) {
            constraint_values(self.samples.robot, &vel, obs, pairs, self.radius_sq, self.config.cone, &mut h);
            h.iter_mut().for_each(|f| *f = violation(*f));
            out.push(mmd_slices(&h, weights, self.config.gamma));
        }
    }

    fn cost(&self, control: ControlInput) -> f64 {
        let mut terms = Vec::with_capacity(self.samples.obstacles.len());
        self.distribution_terms(control, &mut terms);
        terms.iter().sum::<f64>() + self.tracking(control)
    }
}

/// Full cost of one control: MMD terms summed over obstacles, plus tracking
/// and regularization.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_cost(
    control: ControlInput,
    samples: PlanningSamples<'_>,
    v_d: Vector2<f64>,
    state_nominal: &RobotState,
    config: &PlannerConfig,
    radius: f64,
    dt: f64,
    seed: u64,
) -> Result<f64> {
    if !config.grid.contains(control) {
        return Err(Error::Argument(format!(
            "control ({}, {}) lies outside the grid bounds",
            control.v, control.omega
        )));
    }
    let model = CostModel::new(samples, *state_nominal, v_d, config, radius, dt, seed)?;
    Ok(model.cost(control))
}

/// Breakdown of one candidate's cost.
#[derive(Debug, Clone, PartialEq)]
pub struct CostBreakdown {
    pub per_obstacle: Vec<f64>,
    pub tracking: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.per_obstacle.iter().sum::<f64>() + self.tracking
    }
}

#[allow(clippy::too_many_arguments)]
pub fn cost_breakdown(
    control: ControlInput,
    samples: PlanningSamples<'_>,
    v_d: Vector2<f64>,
    state_nominal: &RobotState,
    config: &PlannerConfig,
    radius: f64,
    dt: f64,
    seed: u64,
) -> Result<CostBreakdown> {
    let model = CostModel::new(samples, *state_nominal, v_d, config, radius, dt, seed)?;
    let mut per_obstacle = Vec::new();
    model.distribution_terms(control, &mut per_obstacle);
    Ok(CostBreakdown { per_obstacle, tracking: model.tracking(control) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    pub control: ControlInput,
    /// Enumeration index of `control` in the grid.
    pub index: usize,
    pub cost: f64,
    /// Cost of every grid candidate, in enumeration order.
    pub costs: Vec<f64>,
}

/// Scores every grid candidate and returns the cheapest, breaking ties by
/// the lowest enumeration index. Candidates are scored in parallel on the
/// current rayon pool; the result does not depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn plan(
    state_nominal: &RobotState,
    samples: PlanningSamples<'_>,
    goal: Vector2<f64>,
    config: &PlannerConfig,
    radius: f64,
    dt: f64,
    seed: u64,
) -> Result<PlanResult> {
    let v_d = desired_velocity(state_nominal.position, goal, config.v_max_desired);
    let model = CostModel::new(samples, *state_nominal, v_d, config, radius, dt, seed)?;
    let candidates = config.grid.candidates();
    let costs: Vec<f64> = candidates.par_iter().map(|&u| model.cost(u)).collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, &c) in costs.iter().enumerate() {
        if c.is_finite() && best.is_none_or(|(_, b)| c < b) {
            best = Some((i, c));
        }
    }
    let (index, cost) = best.ok_or(Error::PlanningFailure)?;
    Ok(PlanResult { control: candidates[index], index, cost, costs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mmd::{mmd_cost, DeltaWeights};
    use crate::vo::violation_vector;
    use approx::assert_abs_diff_eq;

    fn point_samples(state: &RobotState, n: usize) -> (SampleSet, SampleSet) {
        let robot =
            SampleSet::new((0..n).flat_map(|_| [state.position.x, state.position.y, state.heading]).collect(), 3)
                .unwrap();
        (robot, SampleSet::new(vec![0.0; 2 * n], 2).unwrap())
    }

    fn obstacle_points(x: f64, y: f64, n: usize) -> SampleSet {
        SampleSet::new((0..n).flat_map(|_| [x, y, 0.0, 0.0]).collect(), 4).unwrap()
    }

    #[test]
    fn desired_velocity_cases() {
        let z = Vector2::zeros();
        assert_eq!(desired_velocity(z, Vector2::new(10.0, 0.0), 1.0), Vector2::new(1.0, 0.0));
        assert_eq!(desired_velocity(Vector2::new(3.0, 3.0), Vector2::new(3.0, 3.0), 1.0), z);
        let v = desired_velocity(z, Vector2::new(3.0, 4.0), 2.0);
        assert_abs_diff_eq!(v, Vector2::new(1.2, 1.6), epsilon = 1e-15);
    }

    #[test]
    fn grid_enumeration() {
        let g = ControlGrid::default();
        let c = g.candidates();
        assert_eq!(c.len(), 625);
        assert_eq!(c[0], ControlInput::new(0.0, -1.0));
        assert_eq!(c[1].v, 0.0);
        assert_eq!(c[25].v, 0.0625);
        assert_eq!(c[624], ControlInput::new(1.5, 1.0));
        assert!(c.contains(&ControlInput::new(1.0, 0.0)));
        let single = ControlGrid { v_resolution: 1, omega_resolution: 1, ..g };
        assert_eq!(single.candidates(), vec![ControlInput::new(0.75, 0.0)]);
        assert!(ControlGrid { v_min: 2.0, ..ControlGrid::default() }.validate().is_err());
        assert!(ControlGrid { omega_resolution: 0, ..ControlGrid::default() }.validate().is_err());
    }

    #[test]
    fn tracking_only_costs() {
        let state = RobotState::new(0.0, 0.0, 0.0);
        let (robot, eps) = point_samples(&state, 3);
        let samples = PlanningSamples { robot: &robot, control_noise: &eps, obstacles: &[] };
        let config = PlannerConfig { weights: CostWeights { w1: 1.0, w2: 0.0 }, ..Default::default() };
        let v_d = Vector2::new(1.0, 0.0);
        let exact = evaluate_cost(ControlInput::new(1.0, 0.0), samples, v_d, &state, &config, 1.0, 0.1, 0).unwrap();
        assert_eq!(exact, 0.0);
        let half = evaluate_cost(ControlInput::new(0.5, 0.0), samples, v_d, &state, &config, 1.0, 0.1, 0).unwrap();
        assert_abs_diff_eq!(half, 0.25, epsilon = 1e-15);
        let outside = evaluate_cost(ControlInput::new(3.0, 0.0), samples, v_d, &state, &config, 1.0, 0.1, 0);
        assert!(matches!(outside, Err(Error::Argument(_))));
    }

    #[test]
    fn head_on_cost_is_single_value_mmd() {
        let state = RobotState::new(0.0, 0.0, 0.0);
        let (robot, eps) = point_samples(&state, 4);
        let obs = [obstacle_points(5.0, 0.0, 4)];
        let samples = PlanningSamples { robot: &robot, control_noise: &eps, obstacles: &obs };
        let config = PlannerConfig { weights: CostWeights { w1: 0.0, w2: 0.0 }, ..Default::default() };
        let c = evaluate_cost(ControlInput::new(1.0, 0.0), samples, Vector2::zeros(), &state, &config, 1.0, 0.1, 0)
            .unwrap();
        assert_abs_diff_eq!(c, 0.190_325, epsilon = 1e-6);
    }

    #[test]
    fn obstacle_terms_add_up() {
        let state = RobotState::new(0.0, 0.0, 0.3);
        let (robot, eps) = point_samples(&state, 5);
        let o1 = obstacle_points(4.0, 1.0, 6);
        let o2 = obstacle_points(3.0, 1.2, 6);
        let both = [o1.clone(), o2.clone()];
        let config = PlannerConfig::default();
        let u = ControlInput::new(1.0, 0.25);
        let v_d = Vector2::new(1.0, 0.0);
        let cost_with = |obs: &[SampleSet]| {
            let samples = PlanningSamples { robot: &robot, control_noise: &eps, obstacles: obs };
            cost_breakdown(u, samples, v_d, &state, &config, 1.0, 0.1, 3).unwrap()
        };
        let none = cost_with(&[]);
        let all = cost_with(&both);
        // pair subsets are seeded per obstacle slot, so single-obstacle runs
        // must keep the obstacle in its slot for a like-for-like comparison
        let only_first = cost_with(&both[..1]);
        assert_eq!(all.tracking, none.tracking);
        assert_eq!(all.per_obstacle[0], only_first.per_obstacle[0]);
        assert_abs_diff_eq!(all.total(), none.tracking + all.per_obstacle[0] + all.per_obstacle[1], epsilon = 1e-15);
        assert!(all.per_obstacle.iter().all(|&c| c > 0.0));
    }

    #[test]
    fn returns_tracking_minimizer_without_obstacles() {
        let state = RobotState::new(0.0, 0.0, 0.0);
        let (robot, eps) = point_samples(&state, 2);
        let samples = PlanningSamples { robot: &robot, control_noise: &eps, obstacles: &[] };
        let config = PlannerConfig { weights: CostWeights { w1: 1.0, w2: 0.0 }, ..Default::default() };
        let r = plan(&state, samples, Vector2::new(10.0, 0.0), &config, 1.0, 0.1, 0).unwrap();
        assert_eq!(r.control, ControlInput::new(1.0, 0.0));
        assert_eq!(r.cost, 0.0);
        assert_eq!(r.costs.len(), 625);
        assert!(r.costs.iter().all(|&c| r.cost <= c));
    }

    #[test]
    fn regularizer_prefers_smaller_controls() {
        // at the goal every candidate tracks equally badly only through its
        // speed; w2 then tips ties toward the smallest control
        let state = RobotState::new(0.0, 0.0, 0.0);
        let (robot, eps) = point_samples(&state, 2);
        let samples = PlanningSamples { robot: &robot, control_noise: &eps, obstacles: &[] };
        let flat = PlannerConfig { weights: CostWeights { w1: 1.0, w2: 0.0 }, ..Default::default() };
        let reg = PlannerConfig { weights: CostWeights { w1: 1.0, w2: 0.1 }, ..Default::default() };
        let goal = Vector2::zeros();
        let a = plan(&state, samples, goal, &flat, 1.0, 0.1, 0).unwrap();
        let b = plan(&state, samples, goal, &reg, 1.0, 0.1, 0).unwrap();
        assert!(b.control.norm_squared() <= a.control.norm_squared());
        assert_eq!(b.control, ControlInput::new(0.0, 0.0));
    }

    #[test]
    fn deterministic_avoidance_reaches_zero_violation() {
        let state = RobotState::new(0.0, 0.0, 0.0);
        let (robot, eps) = point_samples(&state, 3);
        let obs = [obstacle_points(5.0, 0.0, 3)];
        let samples = PlanningSamples { robot: &robot, control_noise: &eps, obstacles: &obs };
        let config = PlannerConfig { weights: CostWeights { w1: 0.05, w2: 0.0 }, ..Default::default() };
        let r = plan(&state, samples, Vector2::new(10.0, 0.0), &config, 1.0, 1.0, 7).unwrap();
        let vv = violation_vector(&robot, r.control, &eps, &obs[0], 1.0, 1.0, config.pair_budget, 0).unwrap();
        assert!(vv.h().iter().all(|&h| h == 0.0), "{:?} -> {:?}", r.control, vv.h());
        // brute force: some candidate clears the cone, and the winner is one of them
        let clears = config.grid.candidates().into_iter().any(|u| {
            violation_vector(&robot, u, &eps, &obs[0], 1.0, 1.0, PairBudget::All, 0)
                .unwrap()
                .h()
                .iter()
                .all(|&h| h == 0.0)
        });
        assert!(clears);
    }

    #[test]
    fn uses_mmd_of_violation_vector() {
        let state = RobotState::new(0.0, 0.0, 0.1);
        let robot = SampleSet::from_rows(&[[0.0, 0.1, 0.1], [0.05, -0.1, 0.0], [0.0, 0.0, 0.2]]).unwrap();
        let eps = SampleSet::from_rows(&[[0.05, 0.0], [-0.1, 0.1], [0.0, -0.2]]).unwrap();
        let obs = [SampleSet::from_rows(&[[4.0, 0.2, -0.5, 0.0], [4.2, -0.1, -0.4, 0.1]]).unwrap()];
        let samples = PlanningSamples { robot: &robot, control_noise: &eps, obstacles: &obs };
        let config = PlannerConfig { weights: CostWeights { w1: 0.0, w2: 0.0 }, ..Default::default() };
        let u = ControlInput::new(0.8, 0.5);
        let c = evaluate_cost(u, samples, Vector2::zeros(), &state, &config, 1.2, 0.2, 11).unwrap();
        let vv = violation_vector(&robot, u, &eps, &obs[0], 1.2, 0.2, config.pair_budget, pair_seed(11, 0)).unwrap();
        let expected = mmd_cost(&vv, &DeltaWeights::uniform(vv.len()), &config.kernel());
        assert_abs_diff_eq!(c, expected, epsilon = 1e-15);
    }

    #[test]
    fn rejects_degenerate_weights_without_obstacles() {
        let state = RobotState::new(0.0, 0.0, 0.0);
        let (robot, eps) = point_samples(&state, 2);
        let samples = PlanningSamples { robot: &robot, control_noise: &eps, obstacles: &[] };
        let config = PlannerConfig { weights: CostWeights { w1: 0.0, w2: 0.0 }, ..Default::default() };
        assert!(matches!(plan(&state, samples, Vector2::zeros(), &config, 1.0, 0.1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn config_json_round_trip() {
        let json = r#"{"grid":{"v_min":0.0,"v_max":1.5,"omega_max":1.0,"v_resolution":25,"omega_resolution":25},
            "weights":{"w1":1.0,"w2":0.02},"gamma":0.1,"pair_budget":500,"eta":0.9,"v_max_desired":1.0}"#;
        let c: PlannerConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c, PlannerConfig::default());
        let partial: PlannerConfig = serde_json::from_str(r#"{"pair_budget":"all"}"#).unwrap();
        assert_eq!(partial.pair_budget, PairBudget::All);
        assert!(serde_json::from_str::<PlannerConfig>(r#"{"gama":0.1}"#).is_err());
        let bad = PlannerConfig { eta: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
