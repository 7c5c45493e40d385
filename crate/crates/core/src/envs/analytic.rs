use serde::{Deserialize, Serialize};

use super::EnvError;

/// Sphere objective `f = -|theta|^2` with clipped linear measures
/// `m_i = clip(w_i . theta / n, 0, 1)` for sparse weight vectors `w_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticProblem {
    dim: usize,
    /// Sparse `(index, weight)` entries of each measure map.
    weights: Vec<Vec<(usize, f64)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticEval {
    pub objective: f64,
    pub grad_objective: Vec<f64>,
    pub measures: Vec<f64>,
    /// One gradient row per measure; zero where the clip saturates.
    pub grad_measures: Vec<Vec<f64>>,
}

impl AnalyticProblem {
    pub fn new(dim: usize, weights: Vec<Vec<(usize, f64)>>) -> Result<Self, EnvError> {
        if dim == 0 || weights.is_empty() {
            return Err(EnvError::InvalidConfig("analytic problem needs dim >= 1 and >= 1 measure".into()));
        }
        if weights.iter().flatten().any(|&(i, w)| i >= dim || !w.is_finite()) {
            return Err(EnvError::InvalidConfig("measure weight index out of range or non-finite".into()));
        }
        Ok(Self { dim, weights })
    }

    /// `k` measures, each the mean of one contiguous block of coordinates
    /// (weight `n / block_len` on its block).
    pub fn sphere_blocks(dim: usize, k: usize) -> Result<Self, EnvError> {
        if k == 0 || dim < k {
            return Err(EnvError::InvalidConfig(format!("cannot split {dim} coordinates into {k} blocks")));
        }
        let weights = (0..k)
            .map(|i| {
                let (start, end) = (i * dim / k, (i + 1) * dim / k);
                let w = dim as f64 / (end - start) as f64;
                (start..end).map(|j| (j, w)).collect()
            })
            .collect();
        Self::new(dim, weights)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_measures(&self) -> usize {
        self.weights.len()
    }

    /// Lowest objective over the box where every measure lies in `[0, 1]`
    /// for the block construction; used as the QD-score offset.
    pub fn objective_floor(&self) -> f64 {
        -(self.dim as f64)
    }

    pub fn eval(&self, theta: &[f64]) -> AnalyticEval {
        assert_eq!(theta.len(), self.dim, "parameter dimension mismatch");
        let n = self.dim as f64;
        let objective = -theta.iter().map(|t| t * t).sum::<f64>();
        let grad_objective = theta.iter().map(|t| -2.0 * t).collect();
        let mut measures = Vec::with_capacity(self.weights.len());
        let mut grad_measures = Vec::with_capacity(self.weights.len());
        for w in &self.weights {
            let raw = w.iter().map(|&(i, wi)| wi * theta[i]).sum::<f64>() / n;
            measures.push(raw.clamp(0.0, 1.0));
            let mut g = vec![0.0; self.dim];
            if (0.0..=1.0).contains(&raw) {
                for &(i, wi) in w {
                    g[i] += wi / n;
                }
            }
            grad_measures.push(g);
        }
        AnalyticEval { objective, grad_objective, measures, grad_measures }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_for;
    use rand::Rng as _;

    #[test]
    fn origin_is_flat_optimum() {
        let p = AnalyticProblem::sphere_blocks(6, 2).unwrap();
        let e = p.eval(&[0.0; 6]);
        assert_eq!(e.objective, 0.0);
        assert!(e.grad_objective.iter().all(|&g| g == 0.0));
        assert_eq!(e.measures, vec![0.0, 0.0]);
    }

    #[test]
    fn sparse_weight_example() {
        let p = AnalyticProblem::new(2, vec![vec![(0, 2.0)]]).unwrap();
        let e = p.eval(&[0.3, 0.9]);
        assert!((e.measures[0] - 0.3).abs() < 1e-15);
        assert_eq!(AnalyticProblem::sphere_blocks(2, 2).unwrap().weights[0], vec![(0, 2.0)]);
    }

    #[test]
    fn saturated_measures_have_zero_gradient() {
        let p = AnalyticProblem::sphere_blocks(4, 2).unwrap();
        let e = p.eval(&[2.0, 2.0, -1.0, -1.0]);
        assert_eq!(e.measures, vec![1.0, 0.0]);
        assert!(e.grad_measures.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn gradients_match_central_differences() {
        let p = AnalyticProblem::sphere_blocks(10, 2).unwrap();
        let mut rng = rng_for(21, &[]);
        let h = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
        let mut checked = 0;
        while checked < 100 {
            let theta: Vec<f64> = (0..10).map(|_| rng.random::<f64>()).collect();
            let base = p.eval(&theta);
            // Stay clear of the clip kinks where the derivative is one-sided.
            let raw_ok = base.measures.iter().all(|&m| m > 1e-3 && m < 1.0 - 1e-3);
            if !raw_ok {
                continue;
            }
            checked += 1;
            for j in 0..10 {
                let mut plus = theta.clone();
                let mut minus = theta.clone();
                plus[j] += h;
                minus[j] -= h;
                let (ep, em) = (p.eval(&plus), p.eval(&minus));
                let fd = (ep.objective - em.objective) / (2.0 * h);
                assert!(rel(fd, base.grad_objective[j]) <= 1e-6);
                for i in 0..2 {
                    let fd = (ep.measures[i] - em.measures[i]) / (2.0 * h);
                    let g = base.grad_measures[i][j];
                    assert!((fd - g).abs() <= 1e-6 * g.abs().max(1e-3), "{fd} vs {g}");
                }
            }
        }
    }
}
