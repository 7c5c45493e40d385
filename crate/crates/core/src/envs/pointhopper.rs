use serde::{Deserialize, Serialize};

use super::EnvError;

/// Parameters of the point-hopper MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PointHopperConfig {
    /// Number of legs; also the number of measures `k`.
    pub num_legs: usize,
    pub episode_length: usize,
    pub dt: f64,
    pub ctrl_cost: f64,
}

impl Default for PointHopperConfig {
    fn default() -> Self {
        Self { num_legs: 2, episode_length: 200, dt: 0.05, ctrl_cost: 0.05 }
    }
}

impl PointHopperConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.num_legs == 0 || self.episode_length == 0 {
            return Err(EnvError::InvalidConfig("num_legs and episode_length must be >= 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) || !(self.ctrl_cost >= 0.0 && self.ctrl_cost.is_finite()) {
            return Err(EnvError::InvalidConfig("dt must be positive and ctrl_cost non-negative".into()));
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        2 + self.num_legs
    }

    pub fn action_dim(&self) -> usize {
        1 + self.num_legs
    }

    /// Reward channels: the task reward followed by one contact proxy per leg.
    pub fn num_channels(&self) -> usize {
        1 + self.num_legs
    }

    /// Lowest achievable episode return (full reverse thrust at maximum control cost).
    pub fn min_return(&self) -> f64 {
        -(self.dt + self.ctrl_cost * self.action_dim() as f64) * self.episode_length as f64
    }
}

/// Summary of a finished episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeEnd {
    pub env: usize,
    pub total_return: f64,
    /// Per-leg contact fractions, `sum(proxy_i) / T`.
    pub measures: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    /// `E x obs_dim`, row-major. Rows of finished envs already hold the reset observation.
    pub obs: Vec<f32>,
    /// `E x (k + 1)`, row-major: task reward then contact proxies.
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub episodes: Vec<EpisodeEnd>,
}

/// A batch of independent point-hopper environments.
///
/// Per env and step, with actions clipped to `[-1, 1]`:
///
/// ```text
/// contact_i = a_i > 0                  (i = 1..k)
/// push      = any contact
/// v'        = 0.9 v + 0.1 a_0 push
/// x'        = x + v' dt
/// R         = v' dt - ctrl_cost |a|^2
/// ```
///
/// Observations are `(x mod 10, v, contacts of the previous step)`.
#[derive(Debug, Clone)]
pub struct PointHopper {
    config: PointHopperConfig,
    num_envs: usize,
    x: Vec<f64>,
    v: Vec<f64>,
    contacts: Vec<f64>,
    steps: Vec<usize>,
    sums: Vec<f64>,
}

impl PointHopper {
    pub fn new(config: PointHopperConfig, num_envs: usize) -> Result<Self, EnvError> {
        config.validate()?;
        let k = config.num_legs;
        Ok(Self {
            num_envs,
            x: vec![0.0; num_envs],
            v: vec![0.0; num_envs],
            contacts: vec![0.0; num_envs * k],
            steps: vec![0; num_envs],
            sums: vec![0.0; num_envs * (k + 1)],
            config,
        })
    }

    pub fn config(&self) -> &PointHopperConfig {
        &self.config
    }

    pub fn num_envs(&self) -> usize {
        self.num_envs
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    fn reset_env(&mut self, e: usize) {
        let k = self.config.num_legs;
        self.x[e] = 0.0;
        self.v[e] = 0.0;
        self.steps[e] = 0;
        self.contacts[e * k..(e + 1) * k].fill(0.0);
        self.sums[e * (k + 1)..(e + 1) * (k + 1)].fill(0.0);
    }

    fn write_obs(&self, e: usize, out: &mut [f32]) {
        let k = self.config.num_legs;
        out[0] = self.x[e].rem_euclid(10.0) as f32;
        out[1] = self.v[e] as f32;
        for i in 0..k {
            out[2 + i] = self.contacts[e * k + i] as f32;
        }
    }

    /// Observations of all envs, `E x obs_dim`.
    pub fn observe(&self) -> Vec<f32> {
        let d = self.config.obs_dim();
        let mut obs = vec![0.0; self.num_envs * d];
        for e in 0..self.num_envs {
            self.write_obs(e, &mut obs[e * d..(e + 1) * d]);
        }
        obs
    }

    pub fn step(&mut self, actions: &[f32]) -> Result<StepResult, EnvError> {
        let k = self.config.num_legs;
        let a_dim = k + 1;
        if actions.len() != self.num_envs * a_dim {
            return Err(EnvError::ActionShape { expected: self.num_envs * a_dim, got: actions.len() });
        }
        if let Some(pos) = actions.iter().position(|a| !a.is_finite()) {
            return Err(EnvError::NonFiniteAction { env: pos / a_dim });
        }
        let (dt, c) = (self.config.dt, self.config.ctrl_cost);
        let mut rewards = vec![0.0; self.num_envs * a_dim];
        let mut dones = vec![false; self.num_envs];
        let mut episodes = Vec::new();
        for e in 0..self.num_envs {
            let a: Vec<f64> = actions[e * a_dim..(e + 1) * a_dim]
                .iter()
                .map(|&v| (v as f64).clamp(-1.0, 1.0))
                .collect();
            let row = &mut rewards[e * a_dim..(e + 1) * a_dim];
            let mut push = 0.0;
            for i in 0..k {
                let contact = if a[1 + i] > 0.0 { 1.0 } else { 0.0 };
                self.contacts[e * k + i] = contact;
                row[1 + i] = contact;
                if contact > 0.0 {
                    push = 1.0;
                }
            }
            let v = 0.9 * self.v[e] + 0.1 * a[0] * push;
            self.v[e] = v;
            self.x[e] += v * dt;
            row[0] = v * dt - c * a.iter().map(|x| x * x).sum::<f64>();

            let sums = &mut self.sums[e * a_dim..(e + 1) * a_dim];
            sums.iter_mut().zip(row.iter()).for_each(|(s, r)| *s += r);
            self.steps[e] += 1;
            if self.steps[e] == self.config.episode_length {
                let t = self.config.episode_length as f64;
                episodes.push(EpisodeEnd {
                    env: e,
                    total_return: sums[0],
                    measures: sums[1..].iter().map(|s| s / t).collect(),
                });
                dones[e] = true;
                self.reset_env(e);
            }
        }
        Ok(StepResult { obs: self.observe(), rewards, dones, episodes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(k: usize, n: usize) -> PointHopper {
        PointHopper::new(PointHopperConfig { num_legs: k, ..Default::default() }, n).unwrap()
    }

    #[test]
    fn single_step_by_hand() {
        let mut e = env(2, 1);
        let r = e.step(&[1.0, 1.0, -1.0]).unwrap();
        assert!((r.rewards[0] - (0.005 - 0.05 * 3.0)).abs() < 1e-12);
        assert_eq!(&r.rewards[1..], &[1.0, 0.0]);
        assert!((e.v[0] - 0.1).abs() < 1e-15);
        assert!((e.x[0] - 0.005).abs() < 1e-15);
        assert_eq!(r.obs, vec![0.005f64 as f32, 0.1f64 as f32, 1.0, 0.0]);
    }

    #[test]
    fn no_contact_means_no_thrust() {
        let mut e = env(2, 1);
        e.v[0] = 0.5;
        e.step(&[1.0, -1.0, -1.0]).unwrap();
        assert!((e.v[0] - 0.45).abs() < 1e-15);
        // Zero is not contact.
        e.step(&[1.0, 0.0, 0.0]).unwrap();
        assert!((e.v[0] - 0.405).abs() < 1e-15);
    }

    #[test]
    fn constant_full_gait_converges() {
        let cfg = PointHopperConfig { episode_length: 400, ..Default::default() };
        let mut e = PointHopper::new(cfg, 1).unwrap();
        let mut last = None;
        for _ in 0..400 {
            let r = e.step(&[1.0, 1.0, 1.0]).unwrap();
            if let Some(ep) = r.episodes.first() {
                last = Some(ep.clone());
            } else {
                assert!((r.rewards[0] - (0.05 * e.v[0] - 0.15)).abs() < 1e-12);
            }
        }
        let ep = last.unwrap();
        assert_eq!(ep.measures, vec![1.0, 1.0]);
        // Fixed point of v' = 0.9 v + 0.1 is v = 1; reward tends to dt - 0.15.
        let mut check = PointHopper::new(PointHopperConfig { episode_length: 1000, ..Default::default() }, 1).unwrap();
        for _ in 0..300 {
            check.step(&[1.0, 1.0, 1.0]).unwrap();
        }
        assert!((check.v[0] - 1.0).abs() < 1e-12);
        let r = check.step(&[1.0, 1.0, 1.0]).unwrap();
        assert!((r.rewards[0] - (0.05 - 0.15)).abs() < 1e-12);
    }

    #[test]
    fn actions_are_clipped() {
        let mut a = env(1, 1);
        let mut b = env(1, 1);
        let ra = a.step(&[5.0, 3.0]).unwrap();
        let rb = b.step(&[1.0, 1.0]).unwrap();
        assert_eq!(ra, rb);
    }

    #[test]
    fn nan_action_names_env() {
        let mut e = env(2, 3);
        let mut actions = vec![0.0f32; 9];
        actions[7] = f32::NAN;
        assert_eq!(e.step(&actions).unwrap_err(), EnvError::NonFiniteAction { env: 2 });
        assert!(matches!(e.step(&[0.0; 4]), Err(EnvError::ActionShape { .. })));
    }

    #[test]
    fn episodes_end_and_reset_at_fixed_length() {
        let cfg = PointHopperConfig { episode_length: 5, ..Default::default() };
        let mut e = PointHopper::new(cfg, 2).unwrap();
        for t in 0..12 {
            let r = e.step(&[0.5, 1.0, -1.0, 0.5, -1.0, -1.0]).unwrap();
            let should_end = (t + 1) % 5 == 0;
            assert_eq!(r.dones, vec![should_end; 2]);
            if should_end {
                assert_eq!(&r.obs[0..4], &[0.0, 0.0, 0.0, 0.0]);
                assert_eq!(r.episodes[0].measures, vec![1.0, 0.0]);
                assert_eq!(r.episodes[1].measures, vec![0.0, 0.0]);
            }
            assert!(e.steps().iter().all(|&s| s < 5));
        }
    }

    #[test]
    fn duty_cycle_gaits_hit_target_measures() {
        let cfg = PointHopperConfig { episode_length: 200, ..Default::default() };
        for (num, den) in [(0, 4), (1, 4), (2, 4), (3, 4), (4, 4)] {
            let mut e = PointHopper::new(cfg.clone(), 1).unwrap();
            let mut end = None;
            for t in 0..200 {
                let on = if t % den < num { 1.0 } else { -1.0 };
                let r = e.step(&[1.0, on, -on]).unwrap();
                end = r.episodes.into_iter().next().or(end);
            }
            let m = end.unwrap().measures;
            let target = num as f64 / den as f64;
            assert!((m[0] - target).abs() <= 1.0 / 200.0);
            assert!((m[1] - (1.0 - target)).abs() <= 1.0 / 200.0);
        }
    }

    #[test]
    fn min_return_bounds_worst_case() {
        let cfg = PointHopperConfig::default();
        let mut e = PointHopper::new(cfg.clone(), 1).unwrap();
        let mut total = 0.0;
        for _ in 0..cfg.episode_length {
            total += e.step(&[-1.0, 1.0, 1.0]).unwrap().rewards[0];
        }
        assert!(total >= cfg.min_return());
    }
}
