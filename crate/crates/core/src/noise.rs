//! Non-parametric disturbance sources.
//!
//! Disturbances are described as finite mixtures of 2-D Gaussians and are
//! only ever consumed through samples drawn from them. Raw sample sets can
//! also be loaded from CSV when no parametric description exists.

use std::path::Path;

use nalgebra::{Matrix2, SymmetricEigen, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const WEIGHT_SUM_TOL: f64 = 1e-9;
const PSD_TOL: f64 = -1e-12;

/// One weighted Gaussian of a [`MixtureModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

impl MixtureComponent {
    pub fn new(weight: f64, mean: [f64; 2], cov: [[f64; 2]; 2]) -> Self {
        Self { weight, mean, cov }
    }

    /// Isotropic component with standard deviation `std` on both axes.
    pub fn isotropic(weight: f64, mean: [f64; 2], std: f64) -> Self {
        let var = std * std;
        Self::new(weight, mean, [[var, 0.0], [0.0, var]])
    }

    pub fn mean_vector(&self) -> Vector2<f64> {
        Vector2::new(self.mean[0], self.mean[1])
    }

    pub fn cov_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.cov[0][0], self.cov[0][1], self.cov[1][0], self.cov[1][1])
    }

    fn validate(&self, index: usize) -> Result<()> {
        let finite = self.weight.is_finite()
            && self.mean.iter().all(|v| v.is_finite())
            && self.cov.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config(format!("component {index} has non-finite entries")));
        }
        if !(0.0..=1.0).contains(&self.weight) {
            return Err(Error::Config(format!("component {index} weight {} outside [0, 1]", self.weight)));
        }
        if self.cov[0][1] != self.cov[1][0] {
            return Err(Error::Config(format!("component {index} covariance is not symmetric")));
        }
        let eig = SymmetricEigen::new(self.cov_matrix());
        if eig.eigenvalues.iter().any(|&l| l < PSD_TOL) {
            return Err(Error::Config(format!("component {index} covariance is not positive semi-definite")));
        }
        Ok(())
    }

    /// Matrix `L` with `L Lᵀ = cov`; works for singular covariances.
    fn factor(&self) -> Matrix2<f64> {
        let eig = SymmetricEigen::new(self.cov_matrix());
        let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        eig.eigenvectors * Matrix2::from_diagonal(&sqrt)
    }
}

/// A finite mixture of 2-D Gaussians. Always holds at least one component
/// and its weights sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMixture", into = "RawMixture")]
pub struct MixtureModel {
    components: Vec<MixtureComponent>,
}

#[derive(Serialize, Deserialize)]
struct RawMixture {
    components: Vec<MixtureComponent>,
}

impl TryFrom<RawMixture> for MixtureModel {
    type Error = Error;

    fn try_from(raw: RawMixture) -> Result<Self> {
        MixtureModel::new(raw.components)
    }
}

impl From<MixtureModel> for RawMixture {
    fn from(model: MixtureModel) -> Self {
        RawMixture { components: model.components }
    }
}

impl MixtureModel {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Config("mixture model needs at least one component".into()));
        }
        for (i, c) in components.iter().enumerate() {
            c.validate(i)?;
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::Config(format!("mixture weights sum to {total}, expected 1")));
        }
        Ok(Self { components })
    }

    pub fn gaussian(mean: [f64; 2], cov: [[f64; 2]; 2]) -> Result<Self> {
        Self::new(vec![MixtureComponent::new(1.0, mean, cov)])
    }

    /// Point mass at the origin.
    pub fn zero() -> Self {
        Self { components: vec![MixtureComponent::new(1.0, [0.0; 2], [[0.0; 2]; 2])] }
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn mean(&self) -> Vector2<f64> {
        self.components.iter().map(|c| c.weight * c.mean_vector()).sum()
    }

    /// Covariance of the mixture by the law of total covariance.
    pub fn covariance(&self) -> Matrix2<f64> {
        let mu = self.mean();
        self.components
            .iter()
            .map(|c| {
                let d = c.mean_vector() - mu;
                c.weight * (c.cov_matrix() + d * d.transpose())
            })
            .sum()
    }

    /// Same shape, translated so that the mixture mean is the origin.
    pub fn centered(&self) -> Self {
        let mu = self.mean();
        let components = self
            .components
            .iter()
            .map(|c| MixtureComponent { mean: [c.mean[0] - mu.x, c.mean[1] - mu.y], ..c.clone() })
            .collect();
        Self { components }
    }

    /// True when every component is a point mass at the origin.
    pub fn is_zero(&self) -> bool {
        self.components.iter().all(|c| c.mean == [0.0; 2] && c.cov == [[0.0; 2]; 2])
    }

    /// Draws `n` samples using `rng`. Each draw consumes one uniform and two
    /// standard normals regardless of the model, so streams stay aligned
    /// across models with different shapes.
    pub fn sample_with<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> SampleSet {
        let factors: Vec<Matrix2<f64>> = self.components.iter().map(|c| c.factor()).collect();
        let mut data = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let u: f64 = rng.gen();
            let z = Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
            let k = self.pick(u);
            let x = self.components[k].mean_vector() + factors[k] * z;
            data.push(x.x);
            data.push(x.y);
        }
        SampleSet { data, dim: 2 }
    }

    fn pick(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                return i;
            }
        }
        // u landed in the rounding gap above the last cumulative weight
        self.components.iter().rposition(|c| c.weight > 0.0).unwrap_or(0)
    }

    pub fn from_json_str(s: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// `n` i.i.d. draws from `model`, reproducible for a fixed `seed`.
pub fn sample_mixture(model: &MixtureModel, n: usize, seed: u64) -> Result<SampleSet> {
    if n == 0 {
        return Err(Error::Argument("sample count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(model.sample_with(n, &mut rng))
}

/// Moment-matched single Gaussian (maximum-likelihood covariance, divisor n).
pub fn gaussian_approximation(samples: &SampleSet) -> Result<MixtureModel> {
    if samples.dim() != 2 {
        return Err(Error::Argument(format!(
            "gaussian approximation needs 2-D samples, got dimension {}",
            samples.dim()
        )));
    }
    let n = samples.len();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let mut mean = Vector2::zeros();
    for row in samples.rows() {
        mean += Vector2::new(row[0], row[1]);
    }
    mean /= n as f64;
    let mut cov = Matrix2::zeros();
    for row in samples.rows() {
        let d = Vector2::new(row[0], row[1]) - mean;
        cov += d * d.transpose();
    }
    cov /= n as f64;
    // exact symmetry; the two off-diagonal sums can differ in the last ulp
    let off = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
    MixtureModel::gaussian([mean.x, mean.y], [[cov[(0, 0)].max(0.0), off], [off, cov[(1, 1)].max(0.0)]])
}

/// Parameters of the Gaussian-to-bimodal family used in the bias sweep.
///
/// Level `k` has a main mode of weight `1 - beta_k` at the origin and a
/// second mode of weight `beta_k` shifted along +x, with
/// `beta_k = weight_step * (k - 1)` and shift `offset_step * (k - 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiasSweep {
    pub levels: u32,
    pub weight_step: f64,
    pub offset_step: f64,
    pub main_std: f64,
    pub side_std: f64,
}

impl Default for BiasSweep {
    fn default() -> Self {
        Self { levels: 8, weight_step: 0.06, offset_step: 0.12, main_std: 0.05, side_std: 0.08 }
    }
}

impl BiasSweep {
    pub fn model(&self, k: u32) -> Result<MixtureModel> {
        if k < 1 || k > self.levels {
            return Err(Error::Argument(format!("bias level {k} outside 1..={}", self.levels)));
        }
        let step = f64::from(k - 1);
        let beta = self.weight_step * step;
        MixtureModel::new(vec![
            MixtureComponent::isotropic(1.0 - beta, [0.0, 0.0], self.main_std),
            MixtureComponent::isotropic(beta, [self.offset_step * step, 0.0], self.side_std),
        ])
    }
}

/// Level `k` (1..=8) of the default bias sweep.
pub fn bias_sweep_model(k: u32) -> Result<MixtureModel> {
    BiasSweep::default().model(k)
}

/// Row-major matrix of samples, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    data: Vec<f64>,
    dim: usize,
}

impl SampleSet {
    pub fn new(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(Error::Argument(format!("{} values do not form rows of dimension {dim}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("sample set contains non-finite values".into()));
        }
        Ok(Self { data, dim })
    }

    pub fn from_rows<const D: usize>(rows: &[[f64; D]]) -> Result<Self> {
        Self::new(rows.iter().flatten().copied().collect(), D)
    }

    /// Reads a headerless CSV with one sample per line.
    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let parse_err = |message: String| Error::Parse { path: path.to_path_buf(), message };
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| parse_err(e.to_string()))?;
        let mut data = Vec::new();
        let mut dim = None;
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| parse_err(e.to_string()))?;
            if *dim.get_or_insert(record.len()) != record.len() {
                return Err(parse_err(format!("row {} has {} columns", line + 1, record.len())));
            }
            for field in record.iter() {
                let v: f64 = field.parse().map_err(|_| parse_err(format!("row {}: bad number {field:?}", line + 1)))?;
                data.push(v);
            }
        }
        let dim = dim.ok_or_else(|| parse_err("no samples".into()))?;
        Self::new(data, dim).map_err(|e| parse_err(e.to_string()))
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn column_mean(&self) -> Vec<f64> {
        let n = self.len() as f64;
        (0..self.dim).map(|j| self.rows().map(|r| r[j]).sum::<f64>() / n).collect()
    }
}
