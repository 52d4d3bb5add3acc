mod common;

use ampo::dyna::Transition;
use ampo::envs::EnvSpec;
use ampo::numcore::{Activation, Adam, Matrix, ParamStore, Tape, Var};
use ampo::rng;
use ampo::sac::{
    actor_loss_grads, bellman_target, policy_update, temperature_gradient, ActionValue, GaussianPolicy, SacBatch, SacConfig, Temperature,
    TwinQ,
};

use common::{fd_max_rel_error, ident, relu, scripted_forward};

const HALF_LOG_TWO_PI: f64 = 0.918_938_533_204_672_8;

fn tanh_cfg() -> SacConfig {
    SacConfig { hidden: vec![8, 8], activation: Activation::Tanh, ..SacConfig::default() }
}

/// Policy whose head ignores the observation: output layer weights zero,
/// bias `(mean, log_std)`.
fn constant_head(env: &EnvSpec, mean: f64, log_std: f64) -> GaussianPolicy {
    let mut p = GaussianPolicy::new(env, &tanh_cfg(), &mut rng::stream(0));
    let last = p.spec.n_layers() - 1;
    let w = p.params.get_mut(&format!("w{last}")).unwrap();
    *w = Matrix::zeros(w.rows(), w.cols());
    *p.params.get_mut(&format!("b{last}")).unwrap() = Matrix::from_vec(1, 2, vec![mean, log_std]);
    p
}

#[test]
fn squashed_density_integrates_to_one() {
    let env = EnvSpec::pendulum();
    let (lo, hi) = (env.action_low[0], env.action_high[0]);
    for (mean, log_std) in [(0.0, 0.0), (0.4, -0.7), (-1.0, 0.3)] {
        let p = constant_head(&env, mean, log_std);
        // Evaluate the density at grid actions by inverting the squash.
        let n = 20_000;
        let h = (hi - lo) / n as f64;
        let obs = Matrix::zeros(n, env.obs_dim);
        let mut noise = Matrix::zeros(n, 1);
        for i in 0..n {
            let a = lo + (i as f64 + 0.5) * h;
            let u = ((a - 0.5 * (lo + hi)) / (0.5 * (hi - lo))).atanh();
            noise.set(i, 0, (u - mean) / log_std.exp());
        }
        let out = p.sample_with_noise(&obs, &noise);
        let mass: f64 = out.log_prob.as_slice().iter().map(|lp| lp.exp() * h).sum();
        assert!((mass - 1.0).abs() < 1e-3, "mean {mean} log_std {log_std}: mass {mass}");
    }
}

#[test]
fn bellman_target_matches_scripted_computation() {
    let env = EnvSpec::pendulum();
    let cfg = SacConfig { hidden: vec![6, 5], ..SacConfig::default() };
    let mut r = rng::stream(21);
    let policy = GaussianPolicy::new(&env, &cfg, &mut r);
    let mut q = TwinQ::new(&env, &cfg, &mut r);
    // Give the targets distinct values so the minimum is exercised.
    q.target2 = q.target2.map_values(|v| 1.3 * v + 0.01);
    let t = Transition::real(vec![0.6, -0.8, 1.1], vec![0.4], vec![0.5, -0.86, 0.9], -1.7, false);
    let batch = SacBatch::from_transitions(std::slice::from_ref(&t)).unwrap();
    let (alpha, gamma, xi) = (0.2, 0.99, 0.37);
    let y = bellman_target(&q, &policy, alpha, &batch, gamma, &Matrix::scalar(xi)).item();

    let out = scripted_forward(&policy.params, &[relu, relu, ident], &t.s_next);
    let (mu, log_std) = (out[0], out[1].clamp(-20.0, 2.0));
    let u = mu + log_std.exp() * xi;
    let a = 2.0 * u.tanh();
    let log_prob = -0.5 * xi * xi - log_std - HALF_LOG_TWO_PI - (1.0 - u.tanh().powi(2)).ln() - 2f64.ln();
    let mut x = t.s_next.clone();
    x.push(a);
    let q1 = scripted_forward(&q.target1, &[relu, relu, ident], &x)[0];
    let q2 = scripted_forward(&q.target2, &[relu, relu, ident], &x)[0];
    let want = t.r + gamma * (q1.min(q2) - alpha * log_prob);
    assert!((y - want).abs() < 1e-10, "{y} vs {want}");
}

struct ZeroQ;

impl ActionValue for ZeroQ {
    fn value_on_tape(&self, t: &mut Tape, obs: Var, _act: Var) -> Var {
        let n = t.value(obs).rows();
        t.constant(Matrix::zeros(n, 1))
    }
}

#[test]
fn zero_critic_gives_pure_entropy_gradient() {
    let env = EnvSpec::pointmass2d();
    let mut r = rng::stream(4);
    let policy = GaussianPolicy::new(&env, &tanh_cfg(), &mut r);
    let obs = common::random_matrix(16, env.obs_dim, 1.0, &mut r);
    let noise = common::random_matrix(16, env.act_dim, 1.0, &mut r);
    let alpha = 0.3;
    let (_, grads, _) = actor_loss_grads(&policy, &ZeroQ, alpha, &obs, &noise).unwrap();
    let entropy_loss = |p: &ParamStore| {
        let pol = GaussianPolicy { params: p.clone(), ..policy.clone() };
        let lp = pol.sample_with_noise(&obs, &noise).log_prob;
        alpha * lp.sum() / lp.rows() as f64
    };
    let err = fd_max_rel_error(&policy.params, &grads, 1e-5, 1e-6, entropy_loss);
    assert!(err < 1e-4, "relative error {err}");
}

/// `Q(s, a) = −a²`, best action 0.
struct Bandit;

impl ActionValue for Bandit {
    fn value_on_tape(&self, t: &mut Tape, _obs: Var, act: Var) -> Var {
        let sq = t.square(act);
        t.neg(sq)
    }
}

#[test]
fn bandit_with_vanishing_temperature_converges_to_best_action() {
    let env = EnvSpec::pendulum();
    let mut policy = constant_head(&env, 1.0, -1.0);
    let temp = Temperature::new(1e-6, -1.0, false);
    let opt = Adam::new(3e-3);
    let obs = Matrix::filled(32, env.obs_dim, 0.5);
    let mut r = rng::stream(9);
    let start = policy.sample_with_noise(&obs.select_rows(&[0]), &Matrix::zeros(1, 1)).action.item();
    for _ in 0..1500 {
        policy_update(&mut policy, &Bandit, &temp, &obs, &opt, &mut r).unwrap();
    }
    let end = policy.sample_with_noise(&obs.select_rows(&[0]), &Matrix::zeros(1, 1)).action.item();
    assert!(start > 1.0, "start {start}");
    assert!(end.abs() < 0.05, "deterministic action {end}");
}

#[test]
fn temperature_gradient_matches_formula() {
    let lp = [-0.3, 1.2, 0.4, -2.0];
    let target = -1.0;
    let want = -(lp.iter().sum::<f64>() / 4.0 + target);
    assert!((temperature_gradient(&lp, target) - want).abs() < 1e-10);
}
