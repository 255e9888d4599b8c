//! Squared MMD between the sampled violation distribution and a point mass
//! at zero, under an RBF kernel on violation values.
//!
//! With `κ_p = k(h_p, 0)` the three kernel terms reduce to
//!
//! ```text
//! M_cc = aᵀ K_cc a,   M_c0 = (aᵀκ)(Σb),   M_00 = (Σb)²
//! ```
//!
//! because every column of `K_c0` equals `κ` and `K_00` is all ones, so
//! neither matrix is ever built. `M_cc` is evaluated as
//! `(aᵀκ)² + aᵀ(K_cc − κκᵀ)a`, which gives
//!
//! ```text
//! M_cc − 2 M_c0 + M_00 = (Σb − aᵀκ)² + aᵀ(K_cc − κκᵀ)a
//! ```
//!
//! Both summands are non-negative (`K_cc − κκᵀ` has entries
//! `κ_p κ_q (exp(2γ h_p h_q) − 1) ≥ 0`), so the result never goes negative
//! through cancellation and is exactly zero when every `h_p` is zero.
//!
//! The excess quadratic form is computed either over the upper triangle of
//! the Gram matrix or, when violations are small relative to the bandwidth,
//! through the power series of `exp(2γ h_p h_q)`, which factorizes into
//! weighted moments and costs O(N) per term instead of O(N²).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vo::ViolationVector;

const SUM_TOL: f64 = 1e-9;
/// Absolute truncation bound on the dropped tail of the series.
const SERIES_TAIL: f64 = 1e-18;
const MAX_SERIES_TERMS: usize = 4096;

/// RBF bandwidth over violation values (units 1/m⁴).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub gamma: f64,
}

impl KernelConfig {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Config(format!("kernel gamma must be positive, got {gamma}")));
        }
        Ok(Self { gamma })
    }
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self { gamma: 0.1 }
    }
}

/// Weights of the point-mass samples. Every sample sits at zero, so only
/// their total enters the cost.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaWeights {
    b: Vec<f64>,
}

impl DeltaWeights {
    pub fn new(b: Vec<f64>) -> Result<Self> {
        if b.is_empty() {
            return Err(Error::Argument("delta weights are empty".into()));
        }
        if b.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Argument("delta weights must be finite and non-negative".into()));
        }
        let total: f64 = b.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::Argument(format!("delta weights sum to {total}, expected 1")));
        }
        Ok(Self { b })
    }

    pub fn uniform(n: usize) -> Self {
        let n = n.max(1);
        Self { b: vec![1.0 / n as f64; n] }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.b
    }

    pub fn total(&self) -> f64 {
        self.b.iter().sum()
    }
}

#[inline]
pub fn rbf(c1: f64, c2: f64, gamma: f64) -> f64 {
    let d = c1 - c2;
    (-gamma * d * d).exp()
}

/// How the excess quadratic form `aᵀ(K_cc − κκᵀ)a` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GramRoute {
    /// Pick whichever of the two is cheaper for the given values.
    Auto,
    UpperTriangle,
    Series,
}

/// The three kernel terms of the squared MMD.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmdTerms {
    pub m_cc: f64,
    pub m_c0: f64,
    pub m_00: f64,
    /// `M_cc − 2 M_c0 + M_00`, evaluated in its cancellation-free form.
    pub mmd: f64,
}

pub fn mmd_cost(viol: &ViolationVector, delta: &DeltaWeights, kernel: &KernelConfig) -> f64 {
    mmd_terms(viol, delta, kernel, GramRoute::Auto).mmd
}

pub fn mmd_terms(viol: &ViolationVector, delta: &DeltaWeights, kernel: &KernelConfig, route: GramRoute) -> MmdTerms {
    let total_b = delta.total();
    // viol weights are normalized; Σa and Σb are both one, so the mass gap
    // between the two embeddings is carried by aᵀ(1 − κ) alone.
    let k = KappaSummary::new(viol.h(), viol.weights(), kernel.gamma);
    let excess = gram_excess(&k.active, kernel.gamma, route);
    MmdTerms {
        m_cc: k.a_kappa * k.a_kappa + excess,
        m_c0: k.a_kappa * total_b,
        m_00: total_b * total_b,
        mmd: k.gap * k.gap + excess,
    }
}

/// Squared MMD for raw slices; `weights` must sum to one.
pub(crate) fn mmd_slices(h: &[f64], weights: &[f64], gamma: f64) -> f64 {
    let k = KappaSummary::new(h, weights, gamma);
    k.gap * k.gap + gram_excess(&k.active, gamma, GramRoute::Auto)
}

/// One pass over the violations: `Σ a(1 − κ)`, `Σ aκ` and the entries with
/// non-zero violation and weight.
struct KappaSummary {
    gap: f64,
    a_kappa: f64,
    active: Vec<Active>,
}

impl KappaSummary {
    fn new(h: &[f64], a: &[f64], gamma: f64) -> Self {
        let mut gap = 0.0;
        let mut a_kappa = 0.0;
        let mut active = Vec::new();
        for (&hp, &ap) in h.iter().zip(a) {
            if hp == 0.0 {
                a_kappa += ap;
                continue;
            }
            let x = -gamma * hp * hp;
            let em1 = x.exp_m1();
            // 1 + expm1 loses relative precision once κ gets small
            let kappa = if em1 > -0.5 { 1.0 + em1 } else { x.exp() };
            gap -= ap * em1;
            a_kappa += ap * kappa;
            if ap != 0.0 {
                active.push(Active { h: hp, a: ap, kappa });
            }
        }
        Self { gap, a_kappa, active }
    }
}

/// `Σ_pq a_p a_q κ_p κ_q (exp(2γ h_p h_q) − 1)` over the active entries.
fn gram_excess(active: &[Active], gamma: f64, route: GramRoute) -> f64 {
    if active.is_empty() {
        return 0.0;
    }
    let h_max = active.iter().fold(0.0f64, |m, e| m.max(e.h));
    let x = 2.0 * gamma * h_max * h_max;
    let terms = series_terms(x);
    let use_series = match route {
        GramRoute::UpperTriangle => false,
        GramRoute::Series => terms.is_some(),
        GramRoute::Auto => terms.is_some_and(|t| t <= active.len()),
    };
    match terms {
        Some(t) if use_series => excess_series(active, h_max, x, t),
        _ => excess_upper_triangle(active, gamma),
    }
}

#[derive(Debug, Clone, Copy)]
struct Active {
    h: f64,
    a: f64,
    kappa: f64,
}

/// Number of series terms needed so the dropped tail is below
/// [`SERIES_TAIL`], assuming `Σ a κ ≤ 1`.
fn series_terms(x: f64) -> Option<usize> {
    if !x.is_finite() || x > 600.0 {
        return None;
    }
    // term_k bound: x^k / k!
    let mut term = 1.0;
    for k in 1..MAX_SERIES_TERMS {
        term *= x / k as f64;
        let next_ratio = x / (k + 1) as f64;
        if next_ratio < 1.0 && term * next_ratio / (1.0 - next_ratio) < SERIES_TAIL {
            return Some(k);
        }
    }
    None
}

fn excess_series(active: &[Active], h_max: f64, x: f64, terms: usize) -> f64 {
    // moments of y = h / h_max keep every power within [0, 1], so each
    // moment bounds all later ones and the tail can be cut early
    let mut w: Vec<f64> = active.iter().map(|e| e.a * e.kappa).collect();
    let y: Vec<f64> = active.iter().map(|e| e.h / h_max).collect();
    let mut coeff = 1.0;
    let mut total = 0.0;
    for k in 1..=terms {
        coeff *= x / k as f64;
        let moment = scale_and_sum(&mut w, &y);
        total += coeff * moment * moment;
        let ratio = x / (k + 1) as f64;
        if ratio < 1.0 && coeff * ratio / (1.0 - ratio) * moment * moment < SERIES_TAIL {
            break;
        }
    }
    total
}

/// `w ← w ∘ y`, returning the new sum. Four lanes so the loop vectorizes.
#[inline]
fn scale_and_sum(w: &mut [f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let mut wc = w.chunks_exact_mut(4);
    let mut yc = y.chunks_exact(4);
    for (wq, yq) in (&mut wc).zip(&mut yc) {
        for l in 0..4 {
            wq[l] *= yq[l];
            acc[l] += wq[l];
        }
    }
    let mut rest = 0.0;
    for (wp, &yp) in wc.into_remainder().iter_mut().zip(yc.remainder()) {
        *wp *= yp;
        rest += *wp;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + rest
}

/// `K_pq − κ_p κ_q`, accurate for small and for large arguments.
#[inline]
fn excess_entry(p: &Active, q: &Active, gamma: f64) -> f64 {
    let s = 2.0 * gamma * p.h * q.h;
    if s < 1.0 {
        p.kappa * q.kappa * s.exp_m1()
    } else {
        let d = p.h - q.h;
        (-gamma * d * d).exp() - p.kappa * q.kappa
    }
}

fn excess_upper_triangle(active: &[Active], gamma: f64) -> f64 {
    // the diagonal, then twice the strict upper triangle
    let mut diag = 0.0;
    let mut upper = 0.0;
    for (i, p) in active.iter().enumerate() {
        diag += p.a * p.a * excess_entry(p, p, gamma);
        let mut row = 0.0;
        for q in &active[i + 1..] {
            row += q.a * excess_entry(p, q, gamma);
        }
        upper += p.a * row;
    }
    diag + 2.0 * upper
}

/// Reference evaluation by explicit double sums over the three kernel
/// inner products, with no matrix shortcuts. Quadratic in both the number
/// of violations and the number of delta weights; meant for small inputs.
pub fn mmd_direct(viol: &ViolationVector, delta: &DeltaWeights, kernel: &KernelConfig) -> f64 {
    let h = viol.h();
    let a = viol.weights();
    let b = delta.as_slice();
    let g = kernel.gamma;
    let mut m_cc = 0.0;
    for p in 0..h.len() {
        for q in 0..h.len() {
            m_cc += a[p] * a[q] * rbf(h[p], h[q], g);
        }
    }
    let mut m_c0 = 0.0;
    for p in 0..h.len() {
        for &bq in b {
            m_c0 += a[p] * bq * rbf(h[p], 0.0, g);
        }
    }
    let mut m_00 = 0.0;
    for &bp in b {
        for &bq in b {
            m_00 += bp * bq * rbf(0.0, 0.0, g);
        }
    }
    m_cc - 2.0 * m_c0 + m_00
}
