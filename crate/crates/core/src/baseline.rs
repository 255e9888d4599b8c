//! Moment-matched Gaussian ablation.
//!
//! Every mixture in a scenario is replaced by the single Gaussian fitted to
//! a large batch of its own draws. Running the planner with the result as
//! its belief, while the world keeps the original mixtures, isolates the
//! cost of the approximation.

use crate::error::Result;
use crate::noise::{gaussian_approximation, sample_mixture, MixtureModel};
use crate::sim::Scenario;

/// Draws per mixture when fitting its Gaussian approximation.
pub const GAUSSIANIZE_DRAWS: usize = 10_000;

fn stream_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_add(k.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Single-Gaussian fit of `model` from [`GAUSSIANIZE_DRAWS`] draws.
pub fn gaussianize(model: &MixtureModel, seed: u64) -> Result<MixtureModel> {
    let draws = sample_mixture(model, GAUSSIANIZE_DRAWS, seed)?;
    gaussian_approximation(&draws)
}

/// Copy of `scenario` with every noise mixture Gaussianized. The scalar
/// heading noise is already Gaussian and is kept as is.
pub fn gaussianize_scenario(scenario: &Scenario, seed: u64) -> Result<Scenario> {
    let mut out = scenario.clone();
    out.robot_position_noise = gaussianize(&scenario.robot_position_noise, stream_seed(seed, 0))?;
    out.actuation_noise = gaussianize(&scenario.actuation_noise, stream_seed(seed, 1))?;
    for (j, o) in out.obstacles.iter_mut().enumerate() {
        let k = 2 + 2 * j as u64;
        o.position_noise = gaussianize(&o.position_noise, stream_seed(seed, k))?;
        o.velocity_noise = gaussianize(&o.velocity_noise, stream_seed(seed, k + 1))?;
    }
    Ok(out)
}
