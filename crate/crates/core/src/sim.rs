//! Closed-loop episodes, Monte-Carlo batches and trajectory metrics.
//!
//! Each step re-centers fresh perception samples on the nominal states,
//! plans, applies one actuation disturbance drawn from the true noise model
//! and advances the obstacles. The planner may see different noise models
//! (its belief) than the ones driving the world; see [`crate::baseline`].

use std::fmt;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{step_obstacle, step_robot, ControlInput, Disturbance, ObstacleState, RobotState};
use crate::error::{Error, Result};
use crate::noise::{MixtureModel, SampleSet};
use crate::planner::{plan, PlanResult, PlannerConfig, PlanningSamples};

pub const DEFAULT_GOAL_TOLERANCE: f64 = 0.2;
const SIDE_EPS: f64 = 1e-9;

/// Side on which the robot passes an obstacle, relative to the start→goal
/// direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
    None,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Left => "left",
            Side::Right => "right",
            Side::None => "none",
        })
    }
}

fn zero_model() -> MixtureModel {
    MixtureModel::zero()
}

/// Nominal obstacle state with its perception-noise models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSpec {
    pub position: Vector2<f64>,
    pub velocity: Vector2<f64>,
    #[serde(default = "zero_model")]
    pub position_noise: MixtureModel,
    #[serde(default = "zero_model")]
    pub velocity_noise: MixtureModel,
}

impl ObstacleSpec {
    pub fn new(position: [f64; 2], velocity: [f64; 2]) -> Self {
        let s = ObstacleState::new(position, velocity);
        Self { position: s.position, velocity: s.velocity, position_noise: zero_model(), velocity_noise: zero_model() }
    }

    pub fn state(&self) -> ObstacleState {
        ObstacleState { position: self.position, velocity: self.velocity }
    }
}

fn default_tolerance() -> f64 {
    DEFAULT_GOAL_TOLERANCE
}

fn default_side() -> Side {
    Side::None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub start: RobotState,
    pub goal: Vector2<f64>,
    #[serde(default)]
    pub obstacles: Vec<ObstacleSpec>,
    /// Combined robot + obstacle radius (m).
    pub radius: f64,
    /// Extra clearance added to `radius` when planning; collisions are
    /// still counted at `radius`.
    #[serde(default)]
    pub safety_margin: f64,
    pub dt: f64,
    pub horizon: usize,
    /// Offsets of the perceived robot position around the nominal one.
    #[serde(default = "zero_model")]
    pub robot_position_noise: MixtureModel,
    /// Standard deviation of Gaussian heading perception noise (rad).
    #[serde(default)]
    pub robot_heading_std: f64,
    /// Additive disturbance on the commanded (v, ω).
    #[serde(default = "zero_model")]
    pub actuation_noise: MixtureModel,
    pub n_robot: usize,
    pub n_obstacle: usize,
    #[serde(default = "default_side")]
    pub favorable_side: Side,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tolerance")]
    pub goal_tolerance: f64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) {
            return Err(Error::Config(format!("radius must be positive, got {}", self.radius)));
        }
        if !(self.safety_margin >= 0.0 && self.safety_margin.is_finite()) {
            return Err(Error::Config(format!("safety_margin must be non-negative, got {}", self.safety_margin)));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1 step".into()));
        }
        if self.n_robot == 0 || self.n_obstacle == 0 {
            return Err(Error::Config("sample counts must be at least 1".into()));
        }
        if !(self.robot_heading_std >= 0.0 && self.robot_heading_std.is_finite()) {
            return Err(Error::Config("robot_heading_std must be non-negative".into()));
        }
        if !(self.goal_tolerance > 0.0) {
            return Err(Error::Config("goal_tolerance must be positive".into()));
        }
        Ok(())
    }

    /// Radius the planner keeps clear of.
    pub fn planning_radius(&self) -> f64 {
        self.radius + self.safety_margin
    }

    /// Noise models as the scenario states them.
    pub fn belief(&self) -> Belief {
        Belief {
            robot_position: self.robot_position_noise.clone(),
            robot_heading_std: self.robot_heading_std,
            actuation: self.actuation_noise.clone(),
            obstacle_position: self.obstacles.iter().map(|o| o.position_noise.clone()).collect(),
            obstacle_velocity: self.obstacles.iter().map(|o| o.velocity_noise.clone()).collect(),
        }
    }
}

/// Noise models used to draw the planner's samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    pub robot_position: MixtureModel,
    pub robot_heading_std: f64,
    pub actuation: MixtureModel,
    pub obstacle_position: Vec<MixtureModel>,
    pub obstacle_velocity: Vec<MixtureModel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub state: RobotState,
    pub control: ControlInput,
    pub disturbance: Disturbance,
    pub obstacles: Vec<ObstacleState>,
    pub collision_fraction: f64,
    /// Cost of the chosen control, the minimum over the grid.
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub steps: Vec<StepRecord>,
    pub final_state: RobotState,
    pub final_obstacles: Vec<ObstacleState>,
    pub reached_goal: bool,
}

impl TrajectoryLog {
    /// Nominal robot positions including the final one.
    pub fn positions(&self) -> impl Iterator<Item = Vector2<f64>> + '_ {
        self.steps.iter().map(|s| s.state.position).chain(std::iter::once(self.final_state.position))
    }

    pub fn max_collision_fraction(&self) -> f64 {
        self.steps.iter().map(|s| s.collision_fraction).fold(0.0, f64::max)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let n_obs = self.final_obstacles.len();
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> =
            ["step", "x", "y", "theta", "v_cmd", "w_cmd", "eps_v", "eps_w", "cost", "coll_frac"]
                .iter()
                .map(|s| s.to_string())
                .collect();
        for j in 0..n_obs {
            header.push(format!("obs{j}_x"));
            header.push(format!("obs{j}_y"));
        }
        w.write_record(&header)?;
        for s in &self.steps {
            let mut row = vec![
                s.step.to_string(),
                s.state.position.x.to_string(),
                s.state.position.y.to_string(),
                s.state.heading.to_string(),
                s.control.v.to_string(),
                s.control.omega.to_string(),
                s.disturbance.v.to_string(),
                s.disturbance.omega.to_string(),
                s.cost.to_string(),
                s.collision_fraction.to_string(),
            ];
            for o in &s.obstacles {
                row.push(o.position.x.to_string());
                row.push(o.position.y.to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Everything the planner saw at one step, handed to episode observers.
pub struct StepView<'a> {
    pub step: usize,
    pub state: &'a RobotState,
    pub robot_samples: &'a SampleSet,
    pub control_noise: &'a SampleSet,
    pub obstacle_samples: &'a [SampleSet],
    pub plan: &'a PlanResult,
    pub plan_seed: u64,
}

/// Independent random streams of one episode.
struct Streams {
    belief: ChaCha8Rng,
    world: ChaCha8Rng,
    eval: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |k| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self { belief: stream(1), world: stream(2), eval: stream(3) }
    }
}

fn robot_samples(
    state: &RobotState,
    position: &MixtureModel,
    heading_std: f64,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> SampleSet {
    let offsets = position.sample_with(n, rng);
    let data = offsets
        .rows()
        .flat_map(|d| {
            let dth: f64 = rng.sample(StandardNormal);
            [state.position.x + d[0], state.position.y + d[1], state.heading + heading_std * dth]
        })
        .collect::<Vec<_>>();
    SampleSet::new(data, 3).expect("finite robot samples")
}

fn obstacle_samples(
    state: &ObstacleState,
    position: &MixtureModel,
    velocity: &MixtureModel,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> SampleSet {
    let dp = position.sample_with(n, rng);
    let dv = velocity.sample_with(n, rng);
    let data = dp
        .rows()
        .zip(dv.rows())
        .flat_map(|(p, v)| {
            [state.position.x + p[0], state.position.y + p[1], state.velocity.x + v[0], state.velocity.y + v[1]]
        })
        .collect::<Vec<_>>();
    SampleSet::new(data, 4).expect("finite obstacle samples")
}

fn position_samples(center: Vector2<f64>, noise: &MixtureModel, n: usize, rng: &mut ChaCha8Rng) -> SampleSet {
    let d = noise.sample_with(n, rng);
    let data = d.rows().flat_map(|r| [center.x + r[0], center.y + r[1]]).collect();
    SampleSet::new(data, 2).expect("finite position samples")
}

/// Fraction of (robot, obstacle) position-sample pairs closer than
/// `radius`, for the worst obstacle. Only the first two columns of each
/// sample set are read.
pub fn collision_sample_fraction(robot: &SampleSet, obstacles: &[SampleSet], radius: f64) -> f64 {
    let r2 = radius * radius;
    obstacles
        .iter()
        .map(|obs| {
            let mut hits = 0usize;
            for a in robot.rows() {
                for b in obs.rows() {
                    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
                    if dx * dx + dy * dy < r2 {
                        hits += 1;
                    }
                }
            }
            hits as f64 / (robot.len() * obs.len()) as f64
        })
        .fold(0.0, f64::max)
}

/// Runs one episode with the scenario's own noise models as belief.
pub fn run_episode(scenario: &Scenario, config: &PlannerConfig) -> Result<TrajectoryLog> {
    run_episode_with(scenario, &scenario.belief(), config, scenario.seed, |_| {})
}

/// Runs one episode. The world evolves under `scenario`'s noise models while
/// the planner draws its samples from `belief`. `observe` sees every step
/// after planning.
pub fn run_episode_with<F>(
    scenario: &Scenario,
    belief: &Belief,
    config: &PlannerConfig,
    seed: u64,
    mut observe: F,
) -> Result<TrajectoryLog>
where
    F: FnMut(&StepView<'_>),
{
    scenario.validate()?;
    config.validate()?;
    let n_obs = scenario.obstacles.len();
    if belief.obstacle_position.len() != n_obs || belief.obstacle_velocity.len() != n_obs {
        return Err(Error::Config(format!(
            "belief describes {} obstacles, scenario has {n_obs}",
            belief.obstacle_position.len()
        )));
    }
    let mut rng = Streams::new(seed);
    let mut state = scenario.start;
    let mut obstacles: Vec<ObstacleState> = scenario.obstacles.iter().map(ObstacleSpec::state).collect();
    let mut steps = Vec::new();
    let mut reached_goal = (state.position - scenario.goal).norm() <= scenario.goal_tolerance;

    for step in 0..scenario.horizon {
        if reached_goal {
            break;
        }
        let robot =
            robot_samples(&state, &belief.robot_position, belief.robot_heading_std, scenario.n_robot, &mut rng.belief);
        let noise = belief.actuation.sample_with(scenario.n_robot, &mut rng.belief);
        let obs_samples: Vec<SampleSet> = obstacles
            .iter()
            .enumerate()
            .map(|(j, o)| {
                obstacle_samples(
                    o,
                    &belief.obstacle_position[j],
                    &belief.obstacle_velocity[j],
                    scenario.n_obstacle,
                    &mut rng.belief,
                )
            })
            .collect();
        let plan_seed: u64 = rng.belief.gen();

        let samples = PlanningSamples { robot: &robot, control_noise: &noise, obstacles: &obs_samples };
        let result = plan(&state, samples, scenario.goal, config, scenario.planning_radius(), scenario.dt, plan_seed)
            .map_err(|e| Error::EpisodeFailure { step, source: Box::new(e) })?;
        observe(&StepView {
            step,
            state: &state,
            robot_samples: &robot,
            control_noise: &noise,
            obstacle_samples: &obs_samples,
            plan: &result,
            plan_seed,
        });

        // collision statistics always use the true perception models
        let true_robot =
            position_samples(state.position, &scenario.robot_position_noise, scenario.n_robot, &mut rng.eval);
        let true_obs: Vec<SampleSet> = obstacles
            .iter()
            .zip(&scenario.obstacles)
            .map(|(o, spec)| position_samples(o.position, &spec.position_noise, scenario.n_obstacle, &mut rng.eval))
            .collect();
        let collision_fraction = collision_sample_fraction(&true_robot, &true_obs, scenario.radius);

        let d = scenario.actuation_noise.sample_with(1, &mut rng.world);
        let disturbance = Disturbance::new(d.row(0)[0], d.row(0)[1]);
        steps.push(StepRecord {
            step,
            state,
            control: result.control,
            disturbance,
            obstacles: obstacles.clone(),
            collision_fraction,
            cost: result.cost,
        });
        state = step_robot(&state, result.control, disturbance, scenario.dt);
        obstacles.iter_mut().for_each(|o| *o = step_obstacle(o, scenario.dt));
        reached_goal = (state.position - scenario.goal).norm() <= scenario.goal_tolerance;
    }
    Ok(TrajectoryLog { steps, final_state: state, final_obstacles: obstacles, reached_goal })
}

/// Side of the obstacle the robot passes at closest approach.
pub fn homotopy_side(log: &TrajectoryLog, scenario: &Scenario) -> Result<Side> {
    if scenario.obstacles.len() != 1 {
        return Err(Error::Unsupported(format!(
            "homotopy side needs exactly one obstacle, scenario has {}",
            scenario.obstacles.len()
        )));
    }
    let pairs = log
        .steps
        .iter()
        .map(|s| (s.state.position, s.obstacles[0].position))
        .chain(std::iter::once((log.final_state.position, log.final_obstacles[0].position)));
    let (robot, obstacle) = pairs
        .min_by(|a, b| (a.0 - a.1).norm_squared().total_cmp(&(b.0 - b.1).norm_squared()))
        .expect("log holds at least the final state");
    let dir = scenario.goal - scenario.start.position;
    let rel = robot - obstacle;
    let cross = dir.x * rel.y - dir.y * rel.x;
    Ok(if cross.abs() < SIDE_EPS {
        Side::None
    } else if cross > 0.0 {
        Side::Left
    } else {
        Side::Right
    })
}

/// Sum of squared control changes between consecutive steps.
pub fn smoothness(log: &TrajectoryLog) -> f64 {
    log.steps
        .windows(2)
        .map(|w| {
            let dv = w[1].control.v - w[0].control.v;
            let dw = w[1].control.omega - w[0].control.omega;
            dv * dv + dw * dw
        })
        .sum()
}

fn segment_distance(p: Vector2<f64>, a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let ap = p - a;
    let t = ap.dot(&ab) / len2;
    if t <= 0.0 {
        ap.norm()
    } else if t >= 1.0 {
        (p - b).norm()
    } else {
        (ab.x * ap.y - ab.y * ap.x).abs() / len2.sqrt()
    }
}

/// Mean distance of the nominal positions from the start→goal segment.
pub fn deviation(log: &TrajectoryLog, scenario: &Scenario) -> f64 {
    let (sum, n) = log
        .positions()
        .fold((0.0, 0usize), |(s, n), p| (s + segment_distance(p, scenario.start.position, scenario.goal), n + 1));
    sum / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub success: bool,
    pub reached_goal: bool,
    pub steps: usize,
    pub smoothness: f64,
    pub deviation: f64,
    pub max_collision_fraction: f64,
    /// Only defined for single-obstacle scenarios.
    pub homotopy: Option<Side>,
}

pub fn metrics(log: &TrajectoryLog, scenario: &Scenario, config: &PlannerConfig) -> Metrics {
    let max_collision_fraction = log.max_collision_fraction();
    Metrics {
        success: log.reached_goal && max_collision_fraction <= 1.0 - config.eta,
        reached_goal: log.reached_goal,
        steps: log.steps.len(),
        smoothness: smoothness(log),
        deviation: deviation(log, scenario),
        max_collision_fraction,
        homotopy: homotopy_side(log, scenario).ok(),
    }
}

/// Which noise models the planner uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlannerMode {
    /// The true models.
    Exact,
    /// Moment-matched single-Gaussian approximations of the true models.
    Gaussian,
}

impl fmt::Display for PlannerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlannerMode::Exact => "exact",
            PlannerMode::Gaussian => "gaussian",
        })
    }
}

/// Outcome of one Monte-Carlo episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub seed: u64,
    pub metrics: Option<Metrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub mode: PlannerMode,
    pub runs: usize,
    pub base_seed: u64,
    pub failures: usize,
    pub success_rate: f64,
    pub mean_smoothness: f64,
    pub mean_deviation: f64,
    pub mean_max_collision_fraction: f64,
    pub mean_steps: f64,
    pub favorable_side: Side,
    /// `None` when the scenario names no favorable side or has several
    /// obstacles.
    pub favorable_freq: Option<f64>,
    pub unfavorable_freq: Option<f64>,
    pub left_freq: f64,
    pub right_freq: f64,
    pub none_freq: f64,
    pub outcomes: Vec<RunOutcome>,
}

impl MonteCarloReport {
    fn aggregate(scenario: &Scenario, mode: PlannerMode, base_seed: u64, outcomes: Vec<RunOutcome>) -> Self {
        let runs = outcomes.len();
        let done: Vec<&Metrics> = outcomes.iter().filter_map(|o| o.metrics.as_ref()).collect();
        let failures = runs - done.len();
        let mean = |f: &dyn Fn(&Metrics) -> f64| {
            if done.is_empty() {
                0.0
            } else {
                done.iter().map(|m| f(m)).sum::<f64>() / done.len() as f64
            }
        };
        let success_rate = done.iter().filter(|m| m.success).count() as f64 / runs as f64;
        let sides: Vec<Side> = done.iter().filter_map(|m| m.homotopy).collect();
        let freq = |side: Side| {
            if sides.is_empty() {
                0.0
            } else {
                sides.iter().filter(|&&s| s == side).count() as f64 / sides.len() as f64
            }
        };
        let (left_freq, right_freq, none_freq) = (freq(Side::Left), freq(Side::Right), freq(Side::None));
        let (favorable_freq, unfavorable_freq) = match scenario.favorable_side {
            Side::None => (None, None),
            _ if sides.is_empty() => (None, None),
            Side::Left => (Some(left_freq), Some(right_freq)),
            Side::Right => (Some(right_freq), Some(left_freq)),
        };
        Self {
            mode,
            runs,
            base_seed,
            failures,
            success_rate,
            mean_smoothness: mean(&|m| m.smoothness),
            mean_deviation: mean(&|m| m.deviation),
            mean_max_collision_fraction: mean(&|m| m.max_collision_fraction),
            mean_steps: mean(&|m| m.steps as f64),
            favorable_side: scenario.favorable_side,
            favorable_freq,
            unfavorable_freq,
            left_freq,
            right_freq,
            none_freq,
            outcomes,
        }
    }
}

/// Runs `runs` episodes with seeds `base_seed..base_seed + runs`, in
/// parallel on the current rayon pool. Episode failures are recorded in
/// the report rather than aborting the batch.
pub fn monte_carlo(
    scenario: &Scenario,
    config: &PlannerConfig,
    runs: usize,
    base_seed: u64,
    mode: PlannerMode,
) -> Result<MonteCarloReport> {
    if runs == 0 {
        return Err(Error::Argument("runs must be at least 1".into()));
    }
    scenario.validate()?;
    config.validate()?;
    let belief = match mode {
        PlannerMode::Exact => scenario.belief(),
        PlannerMode::Gaussian => crate::baseline::gaussianize_scenario(scenario, base_seed)?.belief(),
    };
    let outcomes: Vec<RunOutcome> = (0..runs as u64)
        .into_par_iter()
        .map(|i| {
            let seed = base_seed.wrapping_add(i);
            match run_episode_with(scenario, &belief, config, seed, |_| {}) {
                Ok(log) => RunOutcome { seed, metrics: Some(metrics(&log, scenario, config)), error: None },
                Err(e) => RunOutcome { seed, metrics: None, error: Some(e.to_string()) },
            }
        })
        .collect();
    Ok(MonteCarloReport::aggregate(scenario, mode, base_seed, outcomes))
}
