//! Vectorized PPO: one actor replica per reward channel, trained in lockstep,
//! whose parameter displacements form the objective-measure Jacobian; plus a
//! single-policy walk on a weighted reward.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{EnvError, PointHopper, PointHopperConfig};
use crate::nn::{ActorPolicy, Adam, NetError, RewardNormalizer, RunningNormalizer, StdMode, ValueCritic};
use crate::seeding::{rng_for, Rng};

#[derive(Debug, Error)]
pub enum VppoError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error("non-finite PPO loss (policy {policy_loss}, value {value_loss}, approx kl {approx_kl})")]
    NonFiniteLoss { policy_loss: f64, value_loss: f64, approx_kl: f64 },
    #[error("Jacobian row {row} has zero norm")]
    DegenerateGradient { row: usize },
    #[error("invalid PPO config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    /// Parallel environments per replica (`E`).
    pub num_envs: usize,
    /// Steps collected per environment per iteration (`L`).
    pub rollout_len: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_coef: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub learning_rate: f32,
    pub vf_coef: f64,
    pub ent_coef: f64,
    pub max_grad_norm: f64,
    pub normalize_advantages: bool,
    pub normalize_rewards: bool,
    pub reward_clip: f64,
    pub obs_clip: f32,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            num_envs: 64,
            rollout_len: 128,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_coef: 0.2,
            epochs: 4,
            minibatches: 8,
            learning_rate: 3e-4,
            vf_coef: 0.5,
            ent_coef: 0.0,
            max_grad_norm: 0.5,
            normalize_advantages: true,
            normalize_rewards: true,
            reward_clip: 10.0,
            obs_clip: 10.0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), VppoError> {
        let bad = |m: &str| Err(VppoError::Config(m.to_string()));
        if self.num_envs == 0 || self.rollout_len == 0 || self.epochs == 0 || self.minibatches == 0 {
            return bad("num_envs, rollout_len, epochs and minibatches must be >= 1");
        }
        if self.minibatches > self.num_envs * self.rollout_len {
            return bad("more minibatches than samples per iteration");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gamma and gae_lambda must lie in [0, 1]");
        }
        if !(self.clip_coef > 0.0) || !(self.learning_rate >= 0.0) || !(self.max_grad_norm > 0.0) {
            return bad("clip_coef and max_grad_norm must be positive, learning_rate non-negative");
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.num_envs * self.rollout_len
    }
}

/// Generalized advantage estimation over one trajectory segment.
///
/// `dones[t]` marks that the episode ended with transition `t`; the value of
/// the following state is then not bootstrapped. `bootstrap` is the value of
/// the state after the last transition.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lam: f64,
) -> Result<(Vec<f64>, Vec<f64>), VppoError> {
    let n = rewards.len();
    for (what, got) in [("values", values.len()), ("dones", dones.len())] {
        if got != n {
            return Err(VppoError::Shape { what, expected: n, got });
        }
    }
    let mut adv = vec![0.0; n];
    let mut last = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 == n { bootstrap } else { values[t + 1] };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        last = delta + gamma * lam * live * last;
        adv[t] = last;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Training data for one PPO update. Rows are samples.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Normalized observations, `N x obs_dim`.
    pub obs: Array2<f32>,
    /// Pre-clip actions, `N x action_dim`.
    pub actions: Vec<f32>,
    pub log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.obs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.nrows() == 0
    }
}

/// Averages over all minibatches of one update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    /// Mean return of training episodes finished during the rollout, if any.
    pub episode_return: Option<f64>,
}

/// `d(-min(r A, clip(r) A)) / d(log pi)` for one sample, before averaging.
pub fn surrogate_grad(advantage: f64, ratio: f64, clip: f64) -> f64 {
    let unclipped = -advantage * ratio;
    let clipped = -advantage * ratio.clamp(1.0 - clip, 1.0 + clip);
    if unclipped >= clipped {
        -advantage * ratio
    } else {
        0.0
    }
}

/// Adam state for one actor/critic pair.
#[derive(Debug, Clone)]
pub struct Optimizers {
    pub actor: Adam,
    pub critic: Adam,
}

impl Optimizers {
    pub fn new(actor: &ActorPolicy, critic: &ValueCritic, lr: f32) -> Self {
        Self { actor: Adam::new(actor.num_params(), lr), critic: Adam::new(critic.net().num_params(), lr) }
    }
}

/// Clipped-surrogate PPO: `epochs` passes over `minibatches` shuffled
/// minibatches, joint gradient-norm clipping across actor and critic.
pub fn ppo_update(
    actor: &mut ActorPolicy,
    critic: &mut ValueCritic,
    batch: &Batch,
    config: &PpoConfig,
    opt: &mut Optimizers,
    rng: &mut Rng,
) -> Result<PpoStats, VppoError> {
    let n = batch.len();
    let a_dim = actor.action_dim();
    for (what, expected, got) in [
        ("actions", n * a_dim, batch.actions.len()),
        ("log_probs", n, batch.log_probs.len()),
        ("advantages", n, batch.advantages.len()),
        ("returns", n, batch.returns.len()),
    ] {
        if expected != got {
            return Err(VppoError::Shape { what, expected, got });
        }
    }
    let mb_size = n / config.minibatches;
    if mb_size == 0 {
        return Err(VppoError::Config("minibatch would be empty".into()));
    }
    let adaptive = actor.std_mode == StdMode::Adaptive;
    let mut stats = PpoStats::default();
    let mut count = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for idx in order.chunks_exact(mb_size) {
            let m = idx.len() as f64;
            let obs = batch.obs.select(Axis(0), idx);
            let means = actor.net_mut().forward_train(obs.view())?;
            let values = critic.net_mut().forward_train(obs.view())?;

            let mut adv: Vec<f64> = idx.iter().map(|&i| batch.advantages[i]).collect();
            if config.normalize_advantages && adv.len() > 1 {
                let mean = adv.iter().sum::<f64>() / m;
                let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
                adv.iter_mut().for_each(|a| *a = (*a - mean) / (std + 1e-8));
            }

            let std: Vec<f64> = actor.log_std.iter().map(|&l| (l as f64).exp()).collect();
            let mut grad_means = Array2::<f32>::zeros((idx.len(), a_dim));
            let mut grad_log_std = vec![0.0f64; a_dim];
            let (mut pg_loss, mut kl, mut clipped) = (0.0, 0.0, 0.0);
            for (r, &i) in idx.iter().enumerate() {
                let mean_row = means.row(r);
                let action = &batch.actions[i * a_dim..(i + 1) * a_dim];
                let new_lp = actor.log_prob(mean_row.as_slice().expect("standard layout"), action);
                let log_ratio = new_lp - batch.log_probs[i];
                let ratio = log_ratio.exp();
                pg_loss += (-adv[r] * ratio).max(-adv[r] * ratio.clamp(1.0 - config.clip_coef, 1.0 + config.clip_coef));
                kl += (ratio - 1.0) - log_ratio;
                if (ratio - 1.0).abs() > config.clip_coef {
                    clipped += 1.0;
                }
                let g = surrogate_grad(adv[r], ratio, config.clip_coef) / m;
                if g == 0.0 {
                    continue;
                }
                for j in 0..a_dim {
                    let z = (action[j] as f64 - mean_row[j] as f64) / std[j];
                    grad_means[[r, j]] = (g * z / std[j]) as f32;
                    grad_log_std[j] += g * (z * z - 1.0);
                }
            }
            let entropy = actor.entropy();
            let mut v_loss = 0.0;
            let mut grad_values = Array2::<f32>::zeros((idx.len(), 1));
            for (r, &i) in idx.iter().enumerate() {
                let err = values[[r, 0]] as f64 - batch.returns[i];
                v_loss += 0.5 * err * err;
                grad_values[[r, 0]] = (config.vf_coef * err / m) as f32;
            }
            let (pg_loss, v_loss, kl) = (pg_loss / m, v_loss / m, kl / m);
            if !(pg_loss.is_finite() && v_loss.is_finite() && kl.is_finite()) {
                return Err(VppoError::NonFiniteLoss { policy_loss: pg_loss, value_loss: v_loss, approx_kl: kl });
            }

            let mut g_actor = actor.net().backward(grad_means.view())?;
            if adaptive {
                g_actor.extend(grad_log_std.iter().map(|&g| (g - config.ent_coef) as f32));
            } else {
                g_actor.extend(std::iter::repeat_n(0.0f32, a_dim));
            }
            let mut g_critic = critic.net().backward(grad_values.view())?;
            let norm = g_actor.iter().chain(&g_critic).map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(VppoError::NonFiniteLoss { policy_loss: pg_loss, value_loss: v_loss, approx_kl: kl });
            }
            if norm > config.max_grad_norm {
                let scale = (config.max_grad_norm / (norm + 1e-6)) as f32;
                g_actor.iter_mut().chain(g_critic.iter_mut()).for_each(|g| *g *= scale);
            }

            let mut flat = actor.get_flat();
            opt.actor.step(&mut flat, &g_actor);
            actor.set_flat(&flat)?;
            let mut flat = critic.get_flat();
            opt.critic.step(&mut flat, &g_critic);
            critic.set_flat(&flat)?;

            stats.policy_loss += pg_loss;
            stats.value_loss += v_loss;
            stats.entropy += entropy;
            stats.approx_kl += kl;
            stats.clip_fraction += clipped / m;
            count += 1.0;
        }
    }
    stats.policy_loss /= count;
    stats.value_loss /= count;
    stats.entropy /= count;
    stats.approx_kl /= count;
    stats.clip_fraction /= count;
    Ok(stats)
}

/// Critic and reward normalizer of one reward channel. Both persist across
/// outer iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelLearner {
    pub critic: ValueCritic,
    pub reward_norm: RewardNormalizer,
}

/// One actor replica with its own environments, optimizer state and random
/// stream for the duration of a phase.
struct Replica {
    actor: ActorPolicy,
    env: PointHopper,
    opt: Optimizers,
    rng: Rng,
    raw_obs: Vec<f32>,
}

impl Replica {
    fn new(
        actor: &ActorPolicy,
        learner: &mut ChannelLearner,
        env: &PointHopperConfig,
        config: &PpoConfig,
        rng: Rng,
    ) -> Result<Self, VppoError> {
        learner.reward_norm.reset_returns();
        Ok(Self {
            opt: Optimizers::new(actor, &learner.critic, config.learning_rate),
            actor: actor.clone(),
            env: PointHopper::new(env.clone(), config.num_envs)?,
            rng,
            raw_obs: Vec::new(),
        })
    }

    /// Rollout of `L` steps on the reward `weights . channels`, then one PPO update.
    fn iterate(&mut self, learner: &mut ChannelLearner, weights: &[f64], config: &PpoConfig) -> Result<PpoStats, VppoError> {
        let (e, l) = (config.num_envs, config.rollout_len);
        let (d, a_dim) = (self.actor.obs_dim(), self.actor.action_dim());
        let channels = weights.len();
        let mut obs = Array2::<f32>::zeros((l * e, d));
        let mut actions = Vec::with_capacity(l * e * a_dim);
        let mut log_probs = Vec::with_capacity(l * e);
        let mut values = Vec::with_capacity(l * e);
        let mut rewards = Vec::with_capacity(l * e);
        let mut dones = Vec::with_capacity(l * e);
        let mut finished = Vec::new();
        let mut raw = self.env.observe();
        for t in 0..l {
            self.raw_obs.extend_from_slice(&raw);
            let x = self.actor.normalize(&raw)?;
            let means = self.actor.mean(x.view())?;
            let out = self.actor.sample(&means, &mut self.rng);
            values.extend(learner.critic.values(x.view())?.iter().map(|&v| v as f64));
            obs.slice_mut(ndarray::s![t * e..(t + 1) * e, ..]).assign(&x);
            let step = self.env.step(&out.actions)?;
            if step.rewards.len() != e * channels {
                return Err(VppoError::Shape { what: "reward weights", expected: step.rewards.len() / e, got: channels });
            }
            let r: Vec<f64> = step
                .rewards
                .chunks_exact(channels)
                .map(|row| row.iter().zip(weights).map(|(r, w)| r * w).sum())
                .collect();
            let r = if config.normalize_rewards { learner.reward_norm.normalize(&r, &step.dones) } else { r };
            rewards.extend(r);
            dones.extend_from_slice(&step.dones);
            actions.extend(out.actions);
            log_probs.extend(out.log_probs);
            finished.extend(step.episodes.iter().map(|ep| ep.total_return));
            raw = step.obs;
        }
        let bootstrap = learner.critic.values(self.actor.normalize(&raw)?.view())?;

        let mut advantages = vec![0.0; l * e];
        let mut returns = vec![0.0; l * e];
        for env in 0..e {
            let col = |v: &[f64]| (0..l).map(|t| v[t * e + env]).collect::<Vec<_>>();
            let done_col: Vec<bool> = (0..l).map(|t| dones[t * e + env]).collect();
            let (adv, ret) =
                gae(&col(&rewards), &col(&values), &done_col, bootstrap[env] as f64, config.gamma, config.gae_lambda)?;
            for t in 0..l {
                advantages[t * e + env] = adv[t];
                returns[t * e + env] = ret[t];
            }
        }
        let batch = Batch { obs, actions, log_probs, advantages, returns };
        let mut stats = ppo_update(&mut self.actor, &mut learner.critic, &batch, config, &mut self.opt, &mut self.rng)?;
        if !finished.is_empty() {
            stats.episode_return = Some(finished.iter().sum::<f64>() / finished.len() as f64);
        }
        Ok(stats)
    }
}

/// Mean episodic return and measures of a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub objective: f64,
    pub measures: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Runs `episodes` full episodes in parallel environments. In deterministic
/// mode actions are the Gaussian means.
pub fn evaluate(
    policy: &ActorPolicy,
    env: &PointHopperConfig,
    episodes: usize,
    deterministic: bool,
    rng: &mut Rng,
) -> Result<Evaluation, VppoError> {
    if episodes == 0 {
        return Err(VppoError::Config("evaluation needs at least one episode".into()));
    }
    let mut sim = PointHopper::new(env.clone(), episodes)?;
    let mut ends = Vec::with_capacity(episodes);
    let mut raw = sim.observe();
    for _ in 0..env.episode_length {
        let means = policy.mean(policy.normalize(&raw)?.view())?;
        let actions = if deterministic { means.into_raw_vec_and_offset().0 } else { policy.sample(&means, rng).actions };
        let step = sim.step(&actions)?;
        ends.extend(step.episodes);
        raw = step.obs;
    }
    let n = ends.len() as f64;
    let mut measures = vec![0.0; env.num_legs];
    for end in &ends {
        measures.iter_mut().zip(&end.measures).for_each(|(m, v)| *m += v / n);
    }
    let returns: Vec<f64> = ends.iter().map(|e| e.total_return).collect();
    Ok(Evaluation { objective: returns.iter().sum::<f64>() / n, measures, returns })
}

/// Result of a gradient-estimation phase.
#[derive(Debug, Clone)]
pub struct Jacobian {
    /// Row 0 estimates the objective gradient, rows `1..=k` the measure
    /// gradients; each has unit Euclidean norm.
    pub rows: Vec<Vec<f32>>,
    /// Norms of the raw parameter displacements.
    pub raw_norms: Vec<f64>,
    /// `stats[replica][iteration]`.
    pub stats: Vec<Vec<PpoStats>>,
}

/// Row `i` = `flat(replica_i) - flat(search)`, scaled to unit norm.
fn displacement_row(search: &[f32], trained: &ActorPolicy, row: usize) -> Result<(Vec<f32>, f64), VppoError> {
    let diff: Vec<f32> = trained.get_flat().iter().zip(search).map(|(a, b)| a - b).collect();
    let norm = diff.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(VppoError::DegenerateGradient { row });
    }
    Ok((diff.iter().map(|&v| (v as f64 / norm) as f32).collect(), norm))
}

/// Per-channel critics and reward normalizers, the walking critic, and the
/// shared observation statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Vppo {
    pub config: PpoConfig,
    pub env: PointHopperConfig,
    pub channels: Vec<ChannelLearner>,
    pub walker: ChannelLearner,
    pub obs_stats: RunningNormalizer,
}

impl Vppo {
    pub fn new(config: PpoConfig, env: PointHopperConfig, critic_hidden: &[usize], rng: &mut Rng) -> Result<Self, VppoError> {
        config.validate()?;
        env.validate()?;
        let learner = |rng: &mut Rng| ChannelLearner {
            critic: ValueCritic::new(env.obs_dim(), critic_hidden, rng),
            reward_norm: RewardNormalizer::new(config.num_envs, config.gamma, config.reward_clip),
        };
        let channels = (0..env.num_channels()).map(|_| learner(rng)).collect();
        let walker = learner(rng);
        Ok(Self { obs_stats: RunningNormalizer::new(env.obs_dim()), config, env, channels, walker })
    }

    /// Current observation statistics as a frozen snapshot.
    pub fn obs_snapshot(&self) -> crate::nn::NormalizerSnapshot {
        self.obs_stats.snapshot(self.config.obs_clip)
    }

    /// Trains `k + 1` replicas of `search` for `n1` iterations, replica `i`
    /// on reward channel `i`, in lockstep. `search` is not modified. Replica
    /// `i` draws from the stream `(seed, i)`.
    pub fn compute_jacobian(&mut self, search: &ActorPolicy, n1: usize, seed: u64) -> Result<Jacobian, VppoError> {
        let ones = vec![1.0; self.channels.len()];
        self.compute_jacobian_scaled(search, n1, seed, &ones)
    }

    /// [`Vppo::compute_jacobian`] with replica `i` trained on `scales[i]`
    /// times channel `i`.
    pub fn compute_jacobian_scaled(
        &mut self,
        search: &ActorPolicy,
        n1: usize,
        seed: u64,
        scales: &[f64],
    ) -> Result<Jacobian, VppoError> {
        if scales.len() != self.channels.len() {
            return Err(VppoError::Shape { what: "channel scales", expected: self.channels.len(), got: scales.len() });
        }
        if n1 == 0 {
            return Err(VppoError::Config("N1 must be >= 1".into()));
        }
        let channels = self.channels.len();
        let mut replicas = Vec::with_capacity(channels);
        for (i, learner) in self.channels.iter_mut().enumerate() {
            replicas.push(Replica::new(search, learner, &self.env, &self.config, rng_for(seed, &[i as u64]))?);
        }
        let mut stats = vec![Vec::with_capacity(n1); channels];
        for _ in 0..n1 {
            for (i, (replica, learner)) in replicas.iter_mut().zip(self.channels.iter_mut()).enumerate() {
                let mut weights = vec![0.0; channels];
                weights[i] = scales[i];
                stats[i].push(replica.iterate(learner, &weights, &self.config)?);
            }
        }
        let base = search.get_flat();
        let mut rows = Vec::with_capacity(channels);
        let mut raw_norms = Vec::with_capacity(channels);
        for (i, replica) in replicas.iter().enumerate() {
            let (row, norm) = displacement_row(&base, &replica.actor, i)?;
            rows.push(row);
            raw_norms.push(norm);
        }
        for replica in &replicas {
            self.obs_stats.update(&replica.raw_obs);
        }
        Ok(Jacobian { rows, raw_norms, stats })
    }

    /// Trains one replica on channel `channel` alone for `n1` iterations with
    /// the stream `(seed, channel)`, returning its unit displacement row.
    /// Reference for [`Vppo::compute_jacobian`]; leaves observation statistics untouched.
    pub fn train_single_channel(
        &mut self,
        search: &ActorPolicy,
        channel: usize,
        n1: usize,
        seed: u64,
    ) -> Result<(Vec<f32>, Vec<PpoStats>), VppoError> {
        let channels = self.channels.len();
        let learner = &mut self.channels[channel];
        let mut replica = Replica::new(search, learner, &self.env, &self.config, rng_for(seed, &[channel as u64]))?;
        let mut weights = vec![0.0; channels];
        weights[channel] = 1.0;
        let stats = (0..n1).map(|_| replica.iterate(learner, &weights, &self.config)).collect::<Result<Vec<_>, _>>()?;
        Ok((displacement_row(&search.get_flat(), &replica.actor, channel)?.0, stats))
    }

    /// `n2` PPO iterations of `search` on the reward `weights . channels`
    /// with the walking critic; returns the moved policy.
    pub fn walk(&mut self, search: &ActorPolicy, weights: &[f64], n2: usize, seed: u64) -> Result<(ActorPolicy, Vec<PpoStats>), VppoError> {
        if weights.len() != self.channels.len() {
            return Err(VppoError::Shape { what: "walk coefficients", expected: self.channels.len(), got: weights.len() });
        }
        let mut replica = Replica::new(search, &mut self.walker, &self.env, &self.config, rng_for(seed, &[]))?;
        let stats = (0..n2).map(|_| replica.iterate(&mut self.walker, weights, &self.config)).collect::<Result<Vec<_>, _>>()?;
        self.obs_stats.update(&replica.raw_obs);
        Ok((replica.actor, stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn brute_force(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap: f64, g: f64, l: f64) -> Vec<f64> {
        let n = rewards.len();
        let v_next = |t: usize| if t + 1 == n { bootstrap } else { values[t + 1] };
        let delta = |t: usize| rewards[t] + g * v_next(t) * if dones[t] { 0.0 } else { 1.0 } - values[t];
        (0..n)
            .map(|t| {
                let mut sum = 0.0;
                let mut w = 1.0;
                for j in t..n {
                    sum += w * delta(j);
                    if dones[j] {
                        break;
                    }
                    w *= g * l;
                }
                sum
            })
            .collect()
    }

    #[test]
    fn gae_examples() {
        let (adv, ret) = gae(&[1.0, 1.0, 1.0], &[0.0; 3], &[false; 3], 0.0, 1.0, 1.0).unwrap();
        assert_eq!(adv, vec![3.0, 2.0, 1.0]);
        assert_eq!(ret, adv);
        let (adv, _) = gae(&[0.0; 5], &[0.0; 5], &[false; 5], 0.0, 0.99, 0.95).unwrap();
        assert!(adv.iter().all(|&a| a == 0.0));
        assert!(matches!(gae(&[0.0; 2], &[0.0; 3], &[false; 2], 0.0, 0.9, 0.9), Err(VppoError::Shape { .. })));
    }

    #[test]
    fn gae_matches_brute_force() {
        let mut rng = rng_for(1, &[]);
        let n = 100;
        let r: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let d: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.05).collect();
        let (adv, ret) = gae(&r, &v, &d, 0.3, 0.99, 0.95).unwrap();
        for (t, expect) in brute_force(&r, &v, &d, 0.3, 0.99, 0.95).iter().enumerate() {
            assert!((adv[t] - expect).abs() < 1e-9);
            assert!((ret[t] - adv[t] - v[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn surrogate_clipping() {
        // Identical policies: plain advantage-weighted score.
        assert_eq!(surrogate_grad(2.0, 1.0, 0.2), -2.0);
        assert_eq!(surrogate_grad(-2.0, 1.0, 0.2), 2.0);
        // A > 0, r = 1.3: the 1.2 A term is active and flat in r.
        assert_eq!(surrogate_grad(1.0, 1.3, 0.2), 0.0);
        assert_eq!(surrogate_grad(-1.0, 0.7, 0.2), 0.0);
        // Outside the clip range on the pessimistic side the gradient survives.
        assert_eq!(surrogate_grad(-1.0, 1.3, 0.2), 1.3);
        assert_eq!(surrogate_grad(1.0, 0.7, 0.2), -0.7);
    }

    fn bandit_batch(actor: &ActorPolicy, critic: &ValueCritic, n: usize, rng: &mut Rng) -> Batch {
        let obs = Array2::<f32>::ones((n, 1));
        let out = actor.act(obs.as_slice().unwrap(), rng).unwrap();
        let values = critic.values(obs.view()).unwrap();
        let returns: Vec<f64> = out.actions.iter().map(|&a| -((a as f64 - 2.0).powi(2))).collect();
        let advantages = returns.iter().zip(&values).map(|(r, &v)| r - v as f64).collect();
        Batch { obs, actions: out.actions, log_probs: out.log_probs, advantages, returns }
    }

    #[test]
    fn bandit_mean_reaches_optimum() {
        let mut rng = rng_for(2, &[]);
        let mut actor = ActorPolicy::new(1, 1, &[16], StdMode::Adaptive, &mut rng);
        let mut critic = ValueCritic::new(1, &[16], &mut rng);
        let config = PpoConfig { minibatches: 4, learning_rate: 3e-3, ..PpoConfig::default() };
        let mut opt = Optimizers::new(&actor, &critic, config.learning_rate);
        for _ in 0..200 {
            let batch = bandit_batch(&actor, &critic, 256, &mut rng);
            ppo_update(&mut actor, &mut critic, &batch, &config, &mut opt, &mut rng).unwrap();
        }
        let mean = actor.mean(Array2::ones((1, 1)).view()).unwrap()[[0, 0]];
        assert!((mean - 2.0).abs() < 0.2, "{mean}");
    }

    #[test]
    fn zero_learning_rate_is_degenerate() {
        let mut rng = rng_for(3, &[]);
        let env = PointHopperConfig::default();
        let config = PpoConfig { num_envs: 4, rollout_len: 16, minibatches: 2, learning_rate: 0.0, ..PpoConfig::default() };
        let mut vppo = Vppo::new(config, env.clone(), &[8], &mut rng).unwrap();
        let actor = ActorPolicy::new(env.obs_dim(), env.action_dim(), &[8], StdMode::Fixed, &mut rng);
        assert!(matches!(vppo.compute_jacobian(&actor, 2, 9), Err(VppoError::DegenerateGradient { row: 0 })));
    }

    #[test]
    fn evaluation_of_constant_gait() {
        // Zero weights and a bias of +1 on every output give the all-ones action.
        let env = PointHopperConfig::default();
        let mut rng = rng_for(4, &[]);
        let mut actor = ActorPolicy::new(env.obs_dim(), env.action_dim(), &[8], StdMode::Fixed, &mut rng);
        let mut flat = vec![0.0; actor.num_params()];
        let n_net = actor.net().num_params();
        flat[n_net - 3..n_net].fill(1.0);
        actor.set_flat(&flat).unwrap();
        let eval = evaluate(&actor, &env, 3, true, &mut rng).unwrap();
        assert_eq!(eval.measures, vec![1.0, 1.0]);
        let mut v = 0.0;
        let mut ret = 0.0;
        for _ in 0..env.episode_length {
            v = 0.9 * v + 0.1;
            ret += v * env.dt - env.ctrl_cost * 3.0;
        }
        assert!((eval.objective - ret).abs() < 1e-9);
    }
}
