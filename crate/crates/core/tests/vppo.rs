use ppga::envs::PointHopperConfig;
use ppga::nn::{ActorPolicy, StdMode};
use ppga::seeding::{rng_for, Rng};
use ppga::vppo::{evaluate, PpoConfig, Vppo};

const HIDDEN: [usize; 2] = [16, 16];

fn small_config() -> PpoConfig {
    PpoConfig { num_envs: 8, rollout_len: 32, minibatches: 4, ..PpoConfig::default() }
}

fn setup(config: PpoConfig, seed: u64) -> (Vppo, ActorPolicy) {
    let env = PointHopperConfig::default();
    let mut rng: Rng = rng_for(seed, &[]);
    let vppo = Vppo::new(config, env.clone(), &HIDDEN, &mut rng).unwrap();
    let mut actor = ActorPolicy::new(env.obs_dim(), env.action_dim(), &HIDDEN, StdMode::Fixed, &mut rng);
    actor.obs_norm = vppo.obs_snapshot();
    (vppo, actor)
}

#[test]
fn jacobian_matches_sequential_single_channel_runs() {
    let (mut vppo, actor) = setup(small_config(), 1);
    let mut reference = vppo.clone();
    let jac = vppo.compute_jacobian(&actor, 3, 77).unwrap();
    for channel in 0..3 {
        let (row, stats) = reference.train_single_channel(&actor, channel, 3, 77).unwrap();
        assert_eq!(row, jac.rows[channel]);
        assert_eq!(stats, jac.stats[channel]);
        assert_eq!(reference.channels[channel], vppo.channels[channel]);
    }
}

#[test]
fn jacobian_rows_are_unit_and_search_policy_untouched() {
    let (mut vppo, actor) = setup(small_config(), 2);
    let before = actor.clone();
    let jac = vppo.compute_jacobian(&actor, 2, 5).unwrap();
    assert_eq!(actor, before);
    assert_eq!(jac.rows.len(), 3);
    for row in &jac.rows {
        assert_eq!(row.len(), actor.num_params());
        let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-6, "{norm}");
    }
    assert!(jac.raw_norms.iter().all(|&n| n > 0.0));
}

#[test]
fn zeroing_one_channel_changes_only_its_row() {
    let (vppo, actor) = setup(small_config(), 3);
    let base = vppo.clone().compute_jacobian(&actor, 2, 11).unwrap();
    let zeroed = vppo.clone().compute_jacobian_scaled(&actor, 2, 11, &[1.0, 0.0, 1.0]).unwrap();
    assert_eq!(base.rows[0], zeroed.rows[0]);
    assert_eq!(base.rows[2], zeroed.rows[2]);
    assert_ne!(base.rows[1], zeroed.rows[1]);
}

#[test]
fn zero_coefficients_with_zero_critic_leave_policy_unchanged() {
    let (mut vppo, actor) = setup(small_config(), 4);
    let zeros = vec![0.0; vppo.walker.critic.net().num_params()];
    vppo.walker.critic.set_flat(&zeros).unwrap();
    let (walked, stats) = vppo.walk(&actor, &[0.0, 0.0, 0.0], 3, 8).unwrap();
    assert_eq!(walked.get_flat(), actor.get_flat());
    assert!(stats.iter().all(|s| s.policy_loss == 0.0 && s.value_loss == 0.0));
}

#[test]
fn walking_on_a_contact_channel_raises_that_measure() {
    let (mut vppo, actor) = setup(PpoConfig::default(), 5);
    let env = vppo.env.clone();
    let m = |p: &ActorPolicy| evaluate(p, &env, 10, false, &mut rng_for(99, &[])).unwrap().measures[0];
    let (w10, _) = vppo.walk(&actor, &[0.0, 1.0, 0.0], 10, 1).unwrap();
    let (w20, _) = vppo.walk(&w10, &[0.0, 1.0, 0.0], 10, 2).unwrap();
    let (m0, m10, m20) = (m(&actor), m(&w10), m(&w20));
    assert!(m0 < m10 && m10 < m20, "{m0} {m10} {m20}");
    assert!(m20 >= 0.9, "{m20}");
}

#[test]
fn walking_on_the_task_reward_improves_return() {
    // One-sided paired t-test over 5 seeds, alpha = 0.05 (t_{0.95, 4} = 2.132).
    let mut gains = Vec::new();
    for seed in 0..5 {
        let (mut vppo, actor) = setup(PpoConfig::default(), 100 + seed);
        let env = vppo.env.clone();
        let ret = |p: &ActorPolicy| evaluate(p, &env, 20, false, &mut rng_for(99, &[seed])).unwrap().objective;
        let before = ret(&actor);
        let (walked, _) = vppo.walk(&actor, &[1.0, 0.0, 0.0], 50, seed).unwrap();
        gains.push(ret(&walked) - before);
    }
    let n = gains.len() as f64;
    let mean = gains.iter().sum::<f64>() / n;
    let sd = (gains.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = mean / (sd / n.sqrt());
    assert!(t > 2.132, "gains {gains:?}, t = {t}");
}
