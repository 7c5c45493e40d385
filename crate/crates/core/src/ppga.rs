//! The outer quality-diversity loop: estimate objective and measure
//! gradients at the search point, branch a population of candidates along
//! sampled gradient combinations, rank them by archive improvement, adapt the
//! coefficient distribution, and move the search point.

use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::{ArchiveError, ArchiveMetrics, ArchiveSpec, GridArchive};
use crate::envs::{AnalyticProblem, EnvError, PointHopperConfig};
use crate::nn::{ActorPolicy, StdMode};
use crate::seeding::{derive_seed, rng_for, stream};
use crate::vppo::{evaluate, PpoConfig, PpoStats, Vppo, VppoError};
use crate::xnes::{recombination_weights, NesError, NesState, RankedBatch, RankingMode};

#[derive(Debug, Error)]
pub enum PpgaError {
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Nes(#[from] NesError),
    #[error(transparent)]
    Vppo(#[from] VppoError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("degenerate gradient: row {row} has zero norm")]
    DegenerateGradient { row: usize },
    #[error("branch dimension mismatch: {0}")]
    Dimension(String),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: std::path::PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PpgaError {
    fn is_degenerate(&self) -> bool {
        matches!(self, PpgaError::DegenerateGradient { .. } | PpgaError::Vppo(VppoError::DegenerateGradient { .. }))
    }
}

/// How the search point moves after the coefficient distribution is updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WalkMode {
    /// `N2` PPO iterations on the reward weighted by the new coefficient mean.
    #[default]
    VppoWalk,
    /// One step along the rank-weighted sum of the sampled branch steps.
    WeightedRecombination,
}

/// Sphere objective with block-mean measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyticConfig {
    pub dim: usize,
    pub num_measures: usize,
    /// Every coordinate of the initial search point.
    pub init_value: f64,
}

impl Default for AnalyticConfig {
    fn default() -> Self {
        Self { dim: 100, num_measures: 2, init_value: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvSpec {
    #[serde(rename = "pointhopper")]
    PointHopper(PointHopperConfig),
    Analytic(AnalyticConfig),
}

impl EnvSpec {
    pub fn num_measures(&self) -> usize {
        match self {
            EnvSpec::PointHopper(c) => c.num_legs,
            EnvSpec::Analytic(c) => c.num_measures,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Outer iterations `N_Q`.
    pub iterations: usize,
    /// PPO iterations per gradient estimate.
    pub n1: usize,
    /// PPO iterations per walk.
    pub n2: usize,
    /// Branches per iteration.
    pub lambda: usize,
    /// Episodes per branch evaluation.
    pub episodes_per_eval: usize,
    /// Episodes of the evaluation that measures the search policy's `f` and `m`.
    pub search_eval_episodes: usize,
    /// Step size of a fresh or restarted coefficient distribution.
    pub sigma_g: f64,
    pub walk_mode: WalkMode,
    pub std_mode: StdMode,
    pub ranking_mode: RankingMode,
    /// Use `|c_0|` for the objective coefficient of branches and walks.
    pub abs_objective_coeff: bool,
    /// Evaluate and insert the walked policy each iteration.
    pub insert_walked: bool,
    /// Evaluate policies with their mean action instead of sampling.
    pub eval_deterministic: bool,
    /// Zero wall-clock fields so same-seed outputs are byte-identical.
    pub deterministic: bool,
    /// Checkpoint interval in iterations; 0 disables checkpoints.
    pub checkpoint_every: usize,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub archive: ArchiveSpec,
    pub env: EnvSpec,
    pub ppo: PpoConfig,
}

impl RunConfig {
    /// Desk-scale settings around the given archive and environment.
    pub fn desk(archive: ArchiveSpec, env: EnvSpec) -> Self {
        Self {
            seed: 0,
            iterations: 50,
            n1: 10,
            n2: 10,
            lambda: 32,
            episodes_per_eval: 3,
            search_eval_episodes: 10,
            sigma_g: 1.0,
            walk_mode: WalkMode::VppoWalk,
            std_mode: StdMode::Fixed,
            ranking_mode: RankingMode::Flat,
            abs_objective_coeff: true,
            insert_walked: true,
            eval_deterministic: false,
            deterministic: false,
            checkpoint_every: 0,
            actor_hidden: vec![32, 32],
            critic_hidden: vec![32, 32],
            archive,
            env,
            ppo: PpoConfig::default(),
        }
    }

    /// Paper-scale population, evaluation budget and network sizes.
    pub fn paper(archive: ArchiveSpec, env: EnvSpec) -> Self {
        Self {
            iterations: 2000,
            lambda: 300,
            episodes_per_eval: 10,
            actor_hidden: vec![128, 128],
            critic_hidden: vec![256, 256],
            ppo: PpoConfig { num_envs: 3000, ..PpoConfig::default() },
            ..Self::desk(archive, env)
        }
    }

    /// `res^k` grid over `[0, 1]^k` for a `k`-legged point hopper, offset at the
    /// lowest achievable return.
    pub fn pointhopper_archive(env: &PointHopperConfig, res: usize, alpha: f64) -> ArchiveSpec {
        let k = env.num_legs;
        ArchiveSpec {
            resolution: vec![res; k],
            lower_bounds: vec![0.0; k],
            upper_bounds: vec![1.0; k],
            alpha,
            threshold_min: env.min_return(),
            score_offset: env.min_return(),
        }
    }

    pub fn validate(&self) -> Result<(), PpgaError> {
        let bad = |m: String| Err(PpgaError::Config(m));
        for (name, v) in [
            ("n1", self.n1),
            ("n2", self.n2),
            ("lambda", self.lambda),
            ("episodes_per_eval", self.episodes_per_eval),
            ("search_eval_episodes", self.search_eval_episodes),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.lambda < 2 && self.walk_mode == WalkMode::WeightedRecombination {
            return bad("weighted recombination needs lambda >= 2".into());
        }
        if !(self.sigma_g > 0.0 && self.sigma_g.is_finite()) {
            return bad(format!("sigma_g must be positive and finite, got {}", self.sigma_g));
        }
        self.archive.validate()?;
        if self.archive.dims() != self.env.num_measures() {
            return bad(format!(
                "archive has {} dimensions but the environment has {} measures",
                self.archive.dims(),
                self.env.num_measures()
            ));
        }
        match &self.env {
            EnvSpec::PointHopper(env) => {
                env.validate()?;
                self.ppo.validate()?;
            }
            EnvSpec::Analytic(a) => {
                AnalyticProblem::sphere_blocks(a.dim, a.num_measures)?;
                if self.walk_mode == WalkMode::VppoWalk {
                    return bad("the analytic domain supports walk_mode = weighted_recombination only".into());
                }
            }
        }
        Ok(())
    }
}

/// `theta + |c_0| g_0 + sum_j c_j g_j` on the leading `rows[0].len()`
/// entries of `theta`; trailing entries (normalizer statistics) are copied.
pub fn branch(theta: &[f32], rows: &[Vec<f32>], coeffs: &[f64], abs_objective: bool) -> Result<Vec<f32>, PpgaError> {
    if rows.len() != coeffs.len() || rows.is_empty() {
        return Err(PpgaError::Dimension(format!("{} gradient rows, {} coefficients", rows.len(), coeffs.len())));
    }
    let n = rows[0].len();
    if rows.iter().any(|r| r.len() != n) || theta.len() < n {
        return Err(PpgaError::Dimension(format!("rows of length {n} against a solution of length {}", theta.len())));
    }
    let mut out = theta.to_vec();
    for (j, (row, &c)) in rows.iter().zip(coeffs).enumerate() {
        let c = if j == 0 && abs_objective { c.abs() } else { c };
        if c == 0.0 {
            continue;
        }
        for (o, &g) in out[..n].iter_mut().zip(row) {
            *o = (*o as f64 + c * g as f64) as f32;
        }
    }
    Ok(out)
}

/// Mean PPO diagnostics over the replicas and iterations of one phase.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoSummary {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

impl PpoSummary {
    fn from_stats<'a>(stats: impl IntoIterator<Item = &'a PpoStats>) -> Option<Self> {
        let mut s = Self::default();
        let mut n = 0.0;
        for st in stats {
            s.policy_loss += st.policy_loss;
            s.value_loss += st.value_loss;
            s.approx_kl += st.approx_kl;
            s.clip_fraction += st.clip_fraction;
            n += 1.0;
        }
        (n > 0.0).then(|| Self {
            policy_loss: s.policy_loss / n,
            value_loss: s.value_loss / n,
            approx_kl: s.approx_kl / n,
            clip_fraction: s.clip_fraction / n,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    /// Objective and measures of the search policy at the start of the iteration.
    pub objective: f64,
    pub measures: Vec<f64>,
    /// Archive improvement of each branch, in sample order.
    pub deltas: Vec<f64>,
    /// Accepted insertions among the search policy and the branches.
    pub insertions: usize,
    pub new_cells: usize,
    pub walked_inserted: bool,
    pub metrics: ArchiveMetrics,
    pub sigma: f64,
    pub restarted: bool,
    pub degenerate: bool,
    pub jacobian_ppo: Option<PpoSummary>,
    pub walk_ppo: Option<PpoSummary>,
    pub wall_time: f64,
}

/// Evaluation and gradient source behind the loop.
#[derive(Debug, Clone)]
pub enum Domain {
    Rl(RlDomain),
    Analytic(AnalyticProblem),
}

/// Point-hopper policies trained and evaluated with vectorized PPO.
#[derive(Debug, Clone)]
pub struct RlDomain {
    pub vppo: Vppo,
    /// Architecture template; its parameters are overwritten on use.
    pub template: ActorPolicy,
    pub eval_deterministic: bool,
}

impl RlDomain {
    pub fn policy(&self, solution: &[f32]) -> Result<ActorPolicy, PpgaError> {
        let mut p = self.template.clone();
        p.set_solution(solution).map_err(VppoError::from)?;
        Ok(p)
    }
}

impl Domain {
    fn build(config: &RunConfig) -> Result<(Domain, Vec<f32>), PpgaError> {
        match &config.env {
            EnvSpec::PointHopper(env) => {
                let mut rng = rng_for(config.seed, &[stream::INIT]);
                let vppo = Vppo::new(config.ppo.clone(), env.clone(), &config.critic_hidden, &mut rng)?;
                let mut actor =
                    ActorPolicy::new(env.obs_dim(), env.action_dim(), &config.actor_hidden, config.std_mode, &mut rng);
                actor.obs_norm = vppo.obs_snapshot();
                let search = actor.to_solution();
                Ok((Domain::Rl(RlDomain { vppo, template: actor, eval_deterministic: config.eval_deterministic }), search))
            }
            EnvSpec::Analytic(a) => {
                let problem = AnalyticProblem::sphere_blocks(a.dim, a.num_measures)?;
                Ok((Domain::Analytic(problem), vec![a.init_value as f32; a.dim]))
            }
        }
    }

    /// Refreshes the search point's normalizer snapshot and, in fixed-std
    /// mode, resets `log_std` to zero.
    fn prepare(&self, search: &mut [f32]) -> Result<(), PpgaError> {
        if let Domain::Rl(rl) = self {
            let mut p = rl.policy(search)?;
            p.obs_norm = rl.vppo.obs_snapshot();
            if p.std_mode == StdMode::Fixed {
                p.reset_std();
            }
            search.copy_from_slice(&p.to_solution());
        }
        Ok(())
    }

    /// Objective and measures of a solution.
    pub fn evaluate(&self, solution: &[f32], episodes: usize, seed: u64) -> Result<(f64, Vec<f64>), PpgaError> {
        match self {
            Domain::Rl(rl) => {
                let p = rl.policy(solution)?;
                let e = evaluate(&p, &rl.vppo.env, episodes, rl.eval_deterministic, &mut rng_for(seed, &[]))?;
                Ok((e.objective, e.measures))
            }
            Domain::Analytic(problem) => {
                let theta: Vec<f64> = solution.iter().map(|&v| v as f64).collect();
                let e = problem.eval(&theta);
                Ok((e.objective, e.measures))
            }
        }
    }

    /// Unit gradient rows (objective first) at `search`.
    fn gradients(&mut self, search: &[f32], n1: usize, seed: u64) -> Result<(Vec<Vec<f32>>, Option<PpoSummary>), PpgaError> {
        match self {
            Domain::Rl(rl) => {
                let p = rl.policy(search)?;
                let jac = rl.vppo.compute_jacobian(&p, n1, seed)?;
                let summary = PpoSummary::from_stats(jac.stats.iter().flatten());
                Ok((jac.rows, summary))
            }
            Domain::Analytic(problem) => {
                let theta: Vec<f64> = search.iter().map(|&v| v as f64).collect();
                let e = problem.eval(&theta);
                let rows = std::iter::once(e.grad_objective)
                    .chain(e.grad_measures)
                    .enumerate()
                    .map(|(row, g)| {
                        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if !(norm > 0.0) || !norm.is_finite() {
                            return Err(PpgaError::DegenerateGradient { row });
                        }
                        Ok(g.iter().map(|v| (v / norm) as f32).collect())
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok((rows, None))
            }
        }
    }

    fn walk(&mut self, search: &[f32], weights: &[f64], n2: usize, seed: u64) -> Result<(Vec<f32>, Option<PpoSummary>), PpgaError> {
        match self {
            Domain::Rl(rl) => {
                let p = rl.policy(search)?;
                let (walked, stats) = rl.vppo.walk(&p, weights, n2, seed)?;
                Ok((walked.to_solution(), PpoSummary::from_stats(&stats)))
            }
            Domain::Analytic(_) => Err(PpgaError::Config("the analytic domain cannot walk with PPO".into())),
        }
    }

    /// Adopts the normalizer statistics stored with a teleport target.
    fn teleport(&mut self, solution: &[f32]) -> Result<(), PpgaError> {
        if let Domain::Rl(rl) = self {
            let p = rl.policy(solution)?;
            rl.vppo.obs_stats.load_snapshot(&p.obs_norm);
        }
        Ok(())
    }
}

/// Complete state of a run between iterations.
#[derive(Debug, Clone)]
pub struct Ppga {
    pub config: RunConfig,
    pub archive: GridArchive,
    pub nes: NesState,
    /// Search point as a solution vector.
    pub search: Vec<f32>,
    pub domain: Domain,
    /// Number of completed iterations.
    pub iteration: usize,
}

impl Ppga {
    pub fn new(config: RunConfig) -> Result<Self, PpgaError> {
        config.validate()?;
        let (domain, search) = Domain::build(&config)?;
        Ok(Self {
            archive: GridArchive::new(config.archive.clone())?,
            nes: NesState::new(config.env.num_measures() + 1, config.sigma_g, config.lambda),
            search,
            domain,
            iteration: 0,
            config,
        })
    }

    fn coefficients(&self, c: &[f64]) -> Vec<f64> {
        let mut c = c.to_vec();
        if self.config.abs_objective_coeff {
            c[0] = c[0].abs();
        }
        c
    }

    fn restart(&mut self, it: u64) -> Result<(), PpgaError> {
        self.nes = self.nes.restart();
        if !self.archive.is_empty() {
            let elite = self.archive.sample_elite(&mut rng_for(self.config.seed, &[stream::RESTART, it]))?;
            self.search = elite.params;
            self.domain.teleport(&self.search)?;
        }
        Ok(())
    }

    /// One outer iteration.
    pub fn step(&mut self) -> Result<IterationReport, PpgaError> {
        let start = Instant::now();
        let it = self.iteration as u64;
        let seed = self.config.seed;
        let k = self.config.env.num_measures();

        self.domain.prepare(&mut self.search)?;
        let (objective, measures) = self.domain.evaluate(
            &self.search,
            self.config.search_eval_episodes,
            derive_seed(seed, &[stream::SEARCH_EVAL, it]),
        )?;
        let grads = self.domain.gradients(&self.search, self.config.n1, derive_seed(seed, &[stream::JACOBIAN, it]));
        let search_insert = self.archive.insert(&self.search, objective, &measures)?;
        let mut insertions = usize::from(search_insert.accepted);
        let mut new_cells = usize::from(search_insert.new_cell);

        let mut report = IterationReport {
            iteration: self.iteration,
            objective,
            measures,
            deltas: Vec::new(),
            insertions,
            new_cells,
            walked_inserted: false,
            metrics: self.archive.metrics(),
            sigma: self.nes.sigma,
            restarted: false,
            degenerate: false,
            jacobian_ppo: None,
            walk_ppo: None,
            wall_time: 0.0,
        };

        let rows = match grads {
            Ok((rows, summary)) => {
                report.jacobian_ppo = summary;
                rows
            }
            Err(e) if e.is_degenerate() => {
                log::warn!("iteration {}: {e}; restarting", self.iteration);
                self.restart(it)?;
                report.restarted = true;
                report.degenerate = true;
                return Ok(self.finish(report, start));
            }
            Err(e) => return Err(e),
        };

        let batch = self.nes.ask(&mut rng_for(seed, &[stream::XNES, it]), self.config.lambda);
        let branches = batch
            .samples
            .iter()
            .map(|c| branch(&self.search, &rows, c.as_slice(), self.config.abs_objective_coeff))
            .collect::<Result<Vec<_>, _>>()?;
        let domain = &self.domain;
        let episodes = self.config.episodes_per_eval;
        let evals = branches
            .par_iter()
            .enumerate()
            .map(|(i, b)| domain.evaluate(b, episodes, derive_seed(seed, &[stream::BRANCH_EVAL, it, i as u64])))
            .collect::<Result<Vec<_>, _>>()?;
        let mut deltas = Vec::with_capacity(branches.len());
        let mut new_flags = Vec::with_capacity(branches.len());
        for (b, (f, m)) in branches.iter().zip(&evals) {
            let imp = self.archive.insert(b, *f, m)?;
            deltas.push(imp.delta);
            new_flags.push(imp.new_cell);
            insertions += usize::from(imp.accepted);
            new_cells += usize::from(imp.new_cell);
        }
        let ranked = RankedBatch::rank_with(batch, deltas.clone(), &new_flags, self.config.ranking_mode)?;
        let nes = self.nes.tell(&ranked)?;

        match self.config.walk_mode {
            WalkMode::VppoWalk => {
                let weights = self.coefficients(nes.mu.as_slice());
                let (walked, summary) =
                    self.domain.walk(&self.search, &weights, self.config.n2, derive_seed(seed, &[stream::WALK, it]))?;
                self.search = walked;
                report.walk_ppo = summary;
            }
            WalkMode::WeightedRecombination => {
                let w = recombination_weights(ranked.samples.len());
                let mut combined = DVector::<f64>::zeros(k + 1);
                for (rank, &i) in ranked.order.iter().enumerate() {
                    combined += DVector::from_vec(self.coefficients(ranked.samples[i].as_slice())) * w[rank];
                }
                self.search = branch(&self.search, &rows, combined.as_slice(), false)?;
            }
        }
        self.nes = nes;

        if self.config.insert_walked {
            let (f, m) = self.domain.evaluate(
                &self.search,
                self.config.episodes_per_eval,
                derive_seed(seed, &[stream::WALKED_EVAL, it]),
            )?;
            let imp = self.archive.insert(&self.search, f, &m)?;
            report.walked_inserted = imp.accepted;
            new_cells += usize::from(imp.new_cell);
        }

        report.deltas = deltas;
        report.insertions = insertions;
        report.new_cells = new_cells;
        if insertions == 0 && !report.walked_inserted {
            self.restart(it)?;
            report.restarted = true;
        }
        Ok(self.finish(report, start))
    }

    fn finish(&mut self, mut report: IterationReport, start: Instant) -> IterationReport {
        report.metrics = self.archive.metrics();
        report.sigma = self.nes.sigma;
        report.wall_time = if self.config.deterministic { 0.0 } else { start.elapsed().as_secs_f64() };
        self.iteration += 1;
        report
    }

    /// Runs until `config.iterations` iterations are complete, calling
    /// `on_iteration` after each one.
    pub fn run_with<F, E>(&mut self, mut on_iteration: F) -> Result<(), E>
    where
        F: FnMut(&Ppga, &IterationReport) -> Result<(), E>,
        E: From<PpgaError>,
    {
        while self.iteration < self.config.iterations {
            let report = self.step()?;
            on_iteration(self, &report)?;
        }
        Ok(())
    }
}

/// Runs a fresh search to completion and returns the final state and all reports.
pub fn run(config: RunConfig) -> Result<(Ppga, Vec<IterationReport>), PpgaError> {
    let mut ppga = Ppga::new(config)?;
    let mut reports = Vec::new();
    ppga.run_with(|_, r| {
        reports.push(r.clone());
        Ok::<_, PpgaError>(())
    })?;
    Ok((ppga, reports))
}
