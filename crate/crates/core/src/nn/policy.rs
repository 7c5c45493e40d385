use ndarray::{Array2, ArrayView2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Mlp, NetError, NormalizerSnapshot};
use crate::seeding::Rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Whether the action standard deviation is trained or held at 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StdMode {
    /// `log_std` is reset to 0 at every outer iteration and never trained.
    #[default]
    Fixed,
    Adaptive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActOutput {
    /// `n x action_dim`, before any clipping to the action bounds.
    pub actions: Vec<f32>,
    pub log_probs: Vec<f64>,
    pub entropies: Vec<f64>,
}

/// Diagonal-Gaussian actor with a state-independent `log_std` and a frozen
/// observation normalizer.
///
/// The *flat parameters* are the MLP parameters followed by `log_std`. The
/// *solution vector* stored in archives appends the normalizer mean and
/// variance, so a stored elite reproduces its behaviour on its own.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorPolicy {
    net: Mlp,
    pub log_std: Vec<f32>,
    pub std_mode: StdMode,
    pub obs_norm: NormalizerSnapshot,
}

/// JSON header of a policy checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyHeader {
    pub layer_sizes: Vec<usize>,
    pub std_mode: StdMode,
    pub log_std: Vec<f32>,
    pub obs_clip: f32,
    pub solution_len: usize,
}

impl ActorPolicy {
    pub fn new(obs_dim: usize, action_dim: usize, hidden: &[usize], std_mode: StdMode, rng: &mut Rng) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(action_dim);
        Self {
            net: Mlp::new(&sizes, 2f64.sqrt(), 0.01, rng),
            log_std: vec![0.0; action_dim],
            std_mode,
            obs_norm: NormalizerSnapshot::identity(obs_dim),
        }
    }

    pub fn from_parts(net: Mlp, log_std: Vec<f32>, std_mode: StdMode, obs_norm: NormalizerSnapshot) -> Self {
        assert_eq!(log_std.len(), net.output_dim());
        assert_eq!(obs_norm.mean.len(), net.input_dim());
        Self { net, log_std, std_mode, obs_norm }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn obs_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params() + self.log_std.len()
    }

    pub fn solution_len(&self) -> usize {
        self.num_params() + 2 * self.obs_dim()
    }

    /// Sets `log_std` back to `ln(1) = 0`.
    pub fn reset_std(&mut self) {
        self.log_std.fill(0.0);
    }

    /// Normalized observations, `n x obs_dim`.
    pub fn normalize(&self, obs: &[f32]) -> Result<Array2<f32>, NetError> {
        let d = self.obs_dim();
        if obs.len() % d != 0 {
            return Err(NetError::InputShape { expected: d, got: obs.len() % d });
        }
        let rows = self.obs_norm.apply(obs);
        Ok(Array2::from_shape_vec((obs.len() / d, d), rows).expect("shape checked"))
    }

    /// Action means for already-normalized observations.
    pub fn mean(&self, normalized: ArrayView2<f32>) -> Result<Array2<f32>, NetError> {
        self.net.forward(normalized)
    }

    /// Samples `mean + std * z` for every row of raw observations.
    pub fn act(&self, obs: &[f32], rng: &mut Rng) -> Result<ActOutput, NetError> {
        let x = self.normalize(obs)?;
        let means = self.mean(x.view())?;
        Ok(self.sample(&means, rng))
    }

    pub fn sample(&self, means: &Array2<f32>, rng: &mut Rng) -> ActOutput {
        let std: Vec<f32> = self.log_std.iter().map(|l| l.exp()).collect();
        let mut actions = Vec::with_capacity(means.len());
        let mut log_probs = Vec::with_capacity(means.nrows());
        for row in means.rows() {
            let start = actions.len();
            for (j, &m) in row.iter().enumerate() {
                let z: f64 = StandardNormal.sample(rng);
                actions.push(m + std[j] * z as f32);
            }
            log_probs.push(self.log_prob(row.as_slice().expect("standard layout"), &actions[start..]));
        }
        let entropy = self.entropy();
        ActOutput { actions, log_probs, entropies: vec![entropy; means.nrows()] }
    }

    /// Log density of `action` under `N(mean, diag(exp(log_std))^2)`.
    pub fn log_prob(&self, mean: &[f32], action: &[f32]) -> f64 {
        mean.iter()
            .zip(action)
            .zip(&self.log_std)
            .map(|((&m, &a), &ls)| {
                let ls = ls as f64;
                let z = (a as f64 - m as f64) / ls.exp();
                -0.5 * z * z - ls - 0.5 * LN_2PI
            })
            .sum()
    }

    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|&ls| 0.5 * (LN_2PI + 1.0) + ls as f64).sum()
    }

    pub fn get_flat(&self) -> Vec<f32> {
        let mut flat = self.net.get_flat();
        flat.extend_from_slice(&self.log_std);
        flat
    }

    pub fn set_flat(&mut self, flat: &[f32]) -> Result<(), NetError> {
        if flat.len() != self.num_params() {
            return Err(NetError::LengthMismatch { expected: self.num_params(), got: flat.len() });
        }
        let n = self.net.num_params();
        self.net.set_flat(&flat[..n])?;
        self.log_std.copy_from_slice(&flat[n..]);
        Ok(())
    }

    pub fn to_solution(&self) -> Vec<f32> {
        let mut s = self.get_flat();
        s.extend_from_slice(&self.obs_norm.mean);
        s.extend_from_slice(&self.obs_norm.var);
        s
    }

    pub fn set_solution(&mut self, solution: &[f32]) -> Result<(), NetError> {
        if solution.len() != self.solution_len() {
            return Err(NetError::LengthMismatch { expected: self.solution_len(), got: solution.len() });
        }
        let (n, d) = (self.num_params(), self.obs_dim());
        self.set_flat(&solution[..n])?;
        self.obs_norm.mean.copy_from_slice(&solution[n..n + d]);
        self.obs_norm.var.copy_from_slice(&solution[n + d..]);
        Ok(())
    }

    pub fn header(&self) -> PolicyHeader {
        PolicyHeader {
            layer_sizes: self.net.sizes(),
            std_mode: self.std_mode,
            log_std: self.log_std.clone(),
            obs_clip: self.obs_norm.clip,
            solution_len: self.solution_len(),
        }
    }

    /// Checkpoint bytes: `u32` LE header length, JSON header, then the
    /// solution vector as little-endian `f32`.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let mut out = (header.len() as u32).to_le_bytes().to_vec();
        out.extend(header);
        out.extend(crate::io::f32s_to_le_bytes(&self.to_solution()));
        out
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self, NetError> {
        let bad = |m: &str| NetError::Checkpoint(m.to_string());
        let len = u32::from_le_bytes(bytes.get(..4).ok_or_else(|| bad("truncated"))?.try_into().unwrap()) as usize;
        let header: PolicyHeader = serde_json::from_slice(bytes.get(4..4 + len).ok_or_else(|| bad("truncated header"))?)
            .map_err(|e| NetError::Checkpoint(e.to_string()))?;
        let solution = crate::io::le_bytes_to_f32s(&bytes[4 + len..]).ok_or_else(|| bad("ragged parameter blob"))?;
        let sizes = &header.layer_sizes;
        if sizes.len() < 2 {
            return Err(bad("need at least two layer sizes"));
        }
        let layers = sizes.windows(2).map(|w| super::Dense::zeros(w[0], w[1])).collect();
        let obs_dim = sizes[0];
        let mut policy = Self {
            net: Mlp::from_layers(layers),
            log_std: vec![0.0; *sizes.last().unwrap()],
            std_mode: header.std_mode,
            obs_norm: NormalizerSnapshot { mean: vec![0.0; obs_dim], var: vec![1.0; obs_dim], clip: header.obs_clip },
        };
        policy.set_solution(&solution)?;
        if policy.log_std != header.log_std {
            return Err(bad("header log_std disagrees with parameters"));
        }
        Ok(policy)
    }
}

/// State-value network `obs -> hidden... -> 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueCritic {
    net: Mlp,
}

impl ValueCritic {
    pub fn new(obs_dim: usize, hidden: &[usize], rng: &mut Rng) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Self { net: Mlp::new(&sizes, 2f64.sqrt(), 1.0, rng) }
    }

    pub fn from_net(net: Mlp) -> Self {
        assert_eq!(net.output_dim(), 1);
        Self { net }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    /// Values of already-normalized observations.
    pub fn values(&self, normalized: ArrayView2<f32>) -> Result<Vec<f32>, NetError> {
        Ok(self.net.forward(normalized)?.into_raw_vec_and_offset().0)
    }

    pub fn get_flat(&self) -> Vec<f32> {
        self.net.get_flat()
    }

    pub fn set_flat(&mut self, flat: &[f32]) -> Result<(), NetError> {
        self.net.set_flat(flat)
    }
}
