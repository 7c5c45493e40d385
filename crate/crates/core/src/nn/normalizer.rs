/// Running mean/variance per component, merged batch-wise
/// (parallel-variance formula). Starts from mean 0, variance 1 and a tiny
/// pseudo-count so the first batch dominates immediately.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningNormalizer {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: f64,
}

const INIT_COUNT: f64 = 1e-4;
const NORM_EPS: f64 = 1e-8;

impl RunningNormalizer {
    pub fn new(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], var: vec![1.0; dim], count: INIT_COUNT }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Absorbs a batch of rows (`rows x dim`, row-major).
    pub fn update(&mut self, rows: &[f32]) {
        let d = self.dim();
        assert_eq!(rows.len() % d, 0);
        let n = rows.len() / d;
        if n == 0 {
            return;
        }
        let mut batch_mean = vec![0.0f64; d];
        for r in rows.chunks_exact(d) {
            batch_mean.iter_mut().zip(r).for_each(|(m, &x)| *m += x as f64);
        }
        batch_mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut batch_var = vec![0.0f64; d];
        for r in rows.chunks_exact(d) {
            batch_var
                .iter_mut()
                .zip(r.iter().zip(&batch_mean))
                .for_each(|(v, (&x, m))| *v += (x as f64 - m).powi(2));
        }
        batch_var.iter_mut().for_each(|v| *v /= n as f64);
        self.merge(&batch_mean, &batch_var, n as f64);
    }

    fn merge(&mut self, batch_mean: &[f64], batch_var: &[f64], batch_count: f64) {
        let total = self.count + batch_count;
        for i in 0..self.dim() {
            let delta = batch_mean[i] - self.mean[i];
            let m2 = self.var[i] * self.count + batch_var[i] * batch_count + delta * delta * self.count * batch_count / total;
            self.mean[i] += delta * batch_count / total;
            self.var[i] = m2 / total;
        }
        self.count = total;
    }

    pub fn snapshot(&self, clip: f32) -> NormalizerSnapshot {
        NormalizerSnapshot {
            mean: self.mean.iter().map(|&m| m as f32).collect(),
            var: self.var.iter().map(|&v| v as f32).collect(),
            clip,
        }
    }

    /// Overwrites the statistics with those of a frozen snapshot, keeping the count.
    pub fn load_snapshot(&mut self, snap: &NormalizerSnapshot) {
        self.mean = snap.mean.iter().map(|&m| m as f64).collect();
        self.var = snap.var.iter().map(|&v| v as f64).collect();
    }
}

/// Frozen observation statistics applied as `clip((x - mean) / sqrt(var + eps))`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizerSnapshot {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub clip: f32,
}

impl NormalizerSnapshot {
    /// Mean 0, variance 1, no clipping: normalization is the identity.
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], var: vec![1.0; dim], clip: f32::INFINITY }
    }

    pub fn is_identity(&self) -> bool {
        self.clip == f32::INFINITY && self.mean.iter().all(|&m| m == 0.0) && self.var.iter().all(|&v| v == 1.0)
    }

    pub fn apply(&self, rows: &[f32]) -> Vec<f32> {
        if self.is_identity() {
            return rows.to_vec();
        }
        let d = self.mean.len();
        let scale: Vec<f32> = self.var.iter().map(|&v| 1.0 / ((v as f64 + NORM_EPS).sqrt() as f32)).collect();
        rows.chunks_exact(d)
            .flat_map(|r| {
                r.iter()
                    .zip(self.mean.iter().zip(&scale))
                    .map(|(&x, (&m, &s))| ((x - m) * s).clamp(-self.clip, self.clip))
            })
            .collect()
    }
}

/// Scales rewards by the running standard deviation of the discounted return,
/// one accumulator per environment.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardNormalizer {
    pub gamma: f64,
    pub clip: f64,
    returns: Vec<f64>,
    stats: RunningNormalizer,
}

impl RewardNormalizer {
    pub fn new(num_envs: usize, gamma: f64, clip: f64) -> Self {
        Self { gamma, clip, returns: vec![0.0; num_envs], stats: RunningNormalizer::new(1) }
    }

    pub fn num_envs(&self) -> usize {
        self.returns.len()
    }

    pub fn variance(&self) -> f64 {
        self.stats.var[0]
    }

    /// Clears the per-env discounted returns (new environment batch), keeping statistics.
    pub fn reset_returns(&mut self) {
        self.returns.fill(0.0);
    }

    /// Normalizes one step of rewards for all envs and advances the
    /// discounted-return accumulators.
    pub fn normalize(&mut self, rewards: &[f64], dones: &[bool]) -> Vec<f64> {
        assert_eq!(rewards.len(), self.returns.len());
        for (g, &r) in self.returns.iter_mut().zip(rewards) {
            *g = *g * self.gamma + r;
        }
        let n = self.returns.len() as f64;
        let mean = self.returns.iter().sum::<f64>() / n;
        let var = self.returns.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n;
        self.stats.merge(&[mean], &[var], n);
        let scale = 1.0 / (self.stats.var[0] + NORM_EPS).sqrt();
        for (g, &d) in self.returns.iter_mut().zip(dones) {
            if d {
                *g = 0.0;
            }
        }
        rewards.iter().map(|r| (r * scale).clamp(-self.clip, self.clip)).collect()
    }

    /// `[count, mean, var, gamma, clip, returns...]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.stats.count, self.stats.mean[0], self.stats.var[0], self.gamma, self.clip];
        v.extend(&self.returns);
        v
    }

    pub fn from_slice(v: &[f64]) -> Option<Self> {
        if v.len() < 5 {
            return None;
        }
        Some(Self {
            gamma: v[3],
            clip: v[4],
            returns: v[5..].to_vec(),
            stats: RunningNormalizer { mean: vec![v[1]], var: vec![v[2]], count: v[0] },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_for;
    use rand::Rng as _;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn running_stats_converge() {
        let (mu, sigma) = (3.0, 2.0);
        let dist = Normal::new(mu, sigma).unwrap();
        let mut rng = rng_for(7, &[]);
        let mut norm = RunningNormalizer::new(1);
        let n = 20_000;
        for _ in 0..n / 100 {
            let batch: Vec<f32> = (0..100).map(|_| dist.sample(&mut rng) as f32).collect();
            norm.update(&batch);
        }
        let tol = 5.0 / (n as f64).sqrt();
        assert!((norm.mean[0] - mu).abs() < tol * sigma);
        assert!((norm.var[0].sqrt() - sigma).abs() < tol * sigma);
        assert!(norm.var[0] >= 0.0);
    }

    #[test]
    fn batched_update_matches_single_pass() {
        let mut rng = rng_for(8, &[]);
        let data: Vec<f32> = (0..600).map(|_| rng.random::<f32>() * 4.0 - 1.0).collect();
        let mut a = RunningNormalizer::new(3);
        a.update(&data);
        let mut b = RunningNormalizer::new(3);
        for chunk in data.chunks(30) {
            b.update(chunk);
        }
        for i in 0..3 {
            assert!((a.mean[i] - b.mean[i]).abs() < 1e-9);
            assert!((a.var[i] - b.var[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_snapshot_is_noop() {
        let s = NormalizerSnapshot::identity(2);
        let rows = vec![1e6f32, -3.0, 0.5, 7.0];
        assert_eq!(s.apply(&rows), rows);
    }

    #[test]
    fn reward_scaling_is_invariant_after_burn_in() {
        let mut rng = rng_for(9, &[]);
        let envs = 8;
        let mut a = RewardNormalizer::new(envs, 0.99, 10.0);
        let mut b = RewardNormalizer::new(envs, 0.99, 10.0);
        let mut worst: f64 = 0.0;
        for t in 0..3000 {
            let r: Vec<f64> = (0..envs).map(|_| rng.random::<f64>() - 0.3).collect();
            let r10: Vec<f64> = r.iter().map(|x| 10.0 * x).collect();
            let dones = vec![t % 200 == 199; envs];
            let na = a.normalize(&r, &dones);
            let nb = b.normalize(&r10, &dones);
            if t >= 1000 {
                for (x, y) in na.iter().zip(&nb) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
        assert!(worst < 1e-3, "{worst}");
    }

    #[test]
    fn reward_normalizer_serializes() {
        let mut a = RewardNormalizer::new(3, 0.99, 10.0);
        a.normalize(&[1.0, 2.0, 3.0], &[false, true, false]);
        assert_eq!(RewardNormalizer::from_slice(&a.to_vec()).unwrap(), a);
    }
}
