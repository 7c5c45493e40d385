//! Exponential natural evolution strategy (xNES) over gradient coefficients.
//!
//! The search distribution is `N(mu, sigma^2 B B^T)` with `det(B) = 1`.
//! Updates are driven only by the ranking of the samples, so any monotone
//! transformation of the improvement values yields the same state.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::Rng;

#[derive(Debug, Error, PartialEq)]
pub enum NesError {
    #[error("non-finite improvement value at sample {index}: {value}")]
    NonFiniteDelta { index: usize, value: f64 },
    #[error("batch has {samples} samples, {noise} noise vectors and {deltas} improvements")]
    RaggedBatch { samples: usize, noise: usize, deltas: usize },
    #[error("ordering is not a permutation of 0..{0}")]
    BadOrder(usize),
    #[error("sample dimension {got} does not match strategy dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("batch needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
}

/// How branched solutions are ordered before the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RankingMode {
    /// Sort by improvement only.
    #[default]
    Flat,
    /// Solutions that filled a new cell first, then the rest; each group by improvement.
    TwoStage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NesState {
    pub mu: DVector<f64>,
    pub sigma: f64,
    /// Normalized covariance factor, `det = 1`.
    pub b_factor: DMatrix<f64>,
    pub eta_mu: f64,
    pub eta_sigma: f64,
    pub eta_b: f64,
    pub lambda: usize,
    pub sigma_init: f64,
}

/// Samples drawn by [`NesState::ask`] together with their standard-normal noise.
#[derive(Debug, Clone, PartialEq)]
pub struct AskBatch {
    pub samples: Vec<DVector<f64>>,
    pub noise: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedBatch {
    pub samples: Vec<DVector<f64>>,
    pub noise: Vec<DVector<f64>>,
    pub deltas: Vec<f64>,
    /// Sample indices, best first.
    pub order: Vec<usize>,
}

impl RankedBatch {
    /// Ranks by descending improvement; ties keep sample order.
    pub fn rank(batch: AskBatch, deltas: Vec<f64>) -> Result<Self, NesError> {
        let new_cells = vec![false; deltas.len()];
        Self::rank_with(batch, deltas, &new_cells, RankingMode::Flat)
    }

    pub fn rank_with(
        batch: AskBatch,
        deltas: Vec<f64>,
        new_cells: &[bool],
        mode: RankingMode,
    ) -> Result<Self, NesError> {
        let n = batch.samples.len();
        if batch.noise.len() != n || deltas.len() != n || new_cells.len() != n {
            return Err(NesError::RaggedBatch { samples: n, noise: batch.noise.len(), deltas: deltas.len() });
        }
        if let Some((index, &value)) = deltas.iter().enumerate().find(|(_, d)| !d.is_finite()) {
            return Err(NesError::NonFiniteDelta { index, value });
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            let group = match mode {
                RankingMode::Flat => std::cmp::Ordering::Equal,
                RankingMode::TwoStage => new_cells[b].cmp(&new_cells[a]),
            };
            group.then(deltas[b].total_cmp(&deltas[a]))
        });
        Ok(Self { samples: batch.samples, noise: batch.noise, deltas, order })
    }
}

/// Rank-based utility weights, best rank first: positive part of
/// `ln(lambda/2 + 1) - ln(rank)` normalized to sum 1, shifted to sum 0.
pub fn utilities(lambda: usize) -> Vec<f64> {
    let raw = recombination_weights(lambda);
    raw.iter().map(|w| w - 1.0 / lambda as f64).collect()
}

/// Non-negative weights summing to one, best rank first. These are the
/// utilities before the zero-sum shift.
pub fn recombination_weights(lambda: usize) -> Vec<f64> {
    let base = (lambda as f64 / 2.0 + 1.0).ln();
    let raw: Vec<f64> = (1..=lambda).map(|r| (base - (r as f64).ln()).max(0.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w / total).collect()
}

/// Default step-size and shape learning rate for dimension `d`.
pub fn default_eta(d: usize) -> f64 {
    let d = d as f64;
    (9.0 + 3.0 * d.ln()) / (5.0 * d * d.sqrt())
}

/// Matrix exponential by scaling and squaring with a truncated Taylor series.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a.column_iter().map(|c| c.abs().sum()).fold(0.0, f64::max);
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let scaled = a / 2f64.powi(squarings);
    let mut result = DMatrix::<f64>::identity(n, n);
    let mut term = DMatrix::<f64>::identity(n, n);
    for j in 1..=30 {
        term = &term * &scaled / j as f64;
        result += &term;
        if term.abs().max() < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

impl NesState {
    /// Fresh strategy at `mu = 0`, `Sigma = sigma_init^2 I` with default learning rates.
    pub fn new(dim: usize, sigma_init: f64, lambda: usize) -> Self {
        let eta = default_eta(dim);
        Self {
            mu: DVector::zeros(dim),
            sigma: sigma_init,
            b_factor: DMatrix::identity(dim, dim),
            eta_mu: 1.0,
            eta_sigma: eta,
            eta_b: eta,
            lambda,
            sigma_init,
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Full covariance `sigma^2 B B^T`.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.b_factor * self.b_factor.transpose() * (self.sigma * self.sigma)
    }

    pub fn ask(&self, rng: &mut Rng, lambda: usize) -> AskBatch {
        let d = self.dim();
        let mut samples = Vec::with_capacity(lambda);
        let mut noise = Vec::with_capacity(lambda);
        for _ in 0..lambda {
            let z = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
            samples.push(&self.mu + &self.b_factor * &z * self.sigma);
            noise.push(z);
        }
        AskBatch { samples, noise }
    }

    /// One xNES update from a ranked batch.
    pub fn tell(&self, batch: &RankedBatch) -> Result<NesState, NesError> {
        let n = batch.samples.len();
        if batch.noise.len() != n || batch.deltas.len() != n {
            return Err(NesError::RaggedBatch { samples: n, noise: batch.noise.len(), deltas: batch.deltas.len() });
        }
        if n < 2 {
            return Err(NesError::TooFewSamples(n));
        }
        if let Some((index, &value)) = batch.deltas.iter().enumerate().find(|(_, d)| !d.is_finite()) {
            return Err(NesError::NonFiniteDelta { index, value });
        }
        let mut seen = vec![false; n];
        if batch.order.len() != n || batch.order.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
            return Err(NesError::BadOrder(n));
        }
        let d = self.dim();
        if let Some(z) = batch.noise.iter().find(|z| z.len() != d) {
            return Err(NesError::DimensionMismatch { expected: d, got: z.len() });
        }

        let u = utilities(n);
        let eye = DMatrix::<f64>::identity(d, d);
        let mut g_delta = DVector::<f64>::zeros(d);
        let mut g_m = DMatrix::<f64>::zeros(d, d);
        for (rank, &i) in batch.order.iter().enumerate() {
            let z = &batch.noise[i];
            g_delta += z * u[rank];
            g_m += (z * z.transpose() - &eye) * u[rank];
        }
        let g_sigma = g_m.trace() / d as f64;
        let g_b = &g_m - &eye * g_sigma;

        let mu = &self.mu + &self.b_factor * &g_delta * (self.eta_mu * self.sigma);
        let sigma = self.sigma * (self.eta_sigma / 2.0 * g_sigma).exp();
        let mut b_factor = &self.b_factor * expm(&(g_b * (self.eta_b / 2.0)));
        let det = b_factor.determinant();
        if det.is_finite() && det.abs() > 0.0 {
            b_factor /= det.abs().powf(1.0 / d as f64);
        }
        Ok(NesState { mu, sigma, b_factor, ..self.clone() })
    }

    /// `mu = 0`, `sigma = sigma_init`, `B = I`; learning rates and population kept.
    pub fn restart(&self) -> NesState {
        let d = self.dim();
        NesState {
            mu: DVector::zeros(d),
            sigma: self.sigma_init,
            b_factor: DMatrix::identity(d, d),
            ..self.clone()
        }
    }

    /// Flat little-endian f64 encoding: header `[d, lambda]` as f64, then
    /// `eta_mu, eta_sigma, eta_b, sigma_init, sigma`, `mu`, row-major `B`.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let d = self.dim();
        let mut values = vec![
            d as f64,
            self.lambda as f64,
            self.eta_mu,
            self.eta_sigma,
            self.eta_b,
            self.sigma_init,
            self.sigma,
        ];
        values.extend(self.mu.iter());
        for r in 0..d {
            values.extend(self.b_factor.row(r).iter());
        }
        crate::io::f64s_to_le_bytes(&values)
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Option<NesState> {
        let v = crate::io::le_bytes_to_f64s(bytes)?;
        let d = *v.first()? as usize;
        if v.len() != 7 + d + d * d {
            return None;
        }
        Some(NesState {
            lambda: v[1] as usize,
            eta_mu: v[2],
            eta_sigma: v[3],
            eta_b: v[4],
            sigma_init: v[5],
            sigma: v[6],
            mu: DVector::from_column_slice(&v[7..7 + d]),
            b_factor: DMatrix::from_row_slice(d, d, &v[7 + d..]),
        })
    }
}
