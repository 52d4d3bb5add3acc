//! Soft actor-critic: squashed Gaussian policy, twin Q critics with target
//! copies, and an auto-tuned entropy temperature.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dyna::{ActionSource, Transition};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::numcore::{adam_step, Activation, Adam, Bound, Grads, Matrix, MlpSpec, ParamStore, Tape, Var};
use crate::rng::{self, StreamRng};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LOG_TWO_PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub temperature_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub init_temperature: f64,
    pub auto_temperature: bool,
    /// Defaults to `-act_dim`.
    pub target_entropy: Option<f64>,
}

impl Default for SacConfig {
    fn default() -> Self {
        SacConfig {
            hidden: vec![256, 256],
            activation: Activation::Relu,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            temperature_lr: 3e-4,
            gamma: 0.99,
            tau: 0.005,
            batch_size: 256,
            init_temperature: 0.2,
            auto_temperature: true,
            target_entropy: None,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("sac.hidden needs at least one positive width"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config("gamma must lie in [0, 1)"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::config("tau must lie in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("sac.batch_size must be positive"));
        }
        if self.init_temperature <= 0.0 {
            return Err(Error::config("init_temperature must be positive"));
        }
        for lr in [self.actor_lr, self.critic_lr, self.temperature_lr] {
            if lr <= 0.0 || !lr.is_finite() {
                return Err(Error::config("learning rates must be positive"));
            }
        }
        Ok(())
    }
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    sizes
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub spec: MlpSpec,
    pub params: ParamStore,
    pub center: Vec<f64>,
    pub half_range: Vec<f64>,
}

/// Squashed sample for a batch of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySample {
    pub action: Matrix,
    /// n×1 log-densities of `action`.
    pub log_prob: Matrix,
}

/// `log(1 − tanh(u)²)` in a form that stays finite for large `|u|`.
fn log_squash_jacobian(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - Activation::Softplus.apply(-2.0 * u))
}

impl GaussianPolicy {
    pub fn new<R: Rng + ?Sized>(env: &EnvSpec, cfg: &SacConfig, rng: &mut R) -> Self {
        let spec = MlpSpec::new(&widths(env.obs_dim, &cfg.hidden, 2 * env.act_dim), cfg.activation);
        let params = spec.init_params(rng);
        let (center, half_range) = env.action_center_scale();
        GaussianPolicy { spec, params, center, half_range }
    }

    pub fn act_dim(&self) -> usize {
        self.center.len()
    }

    fn log_scale_sum(&self) -> f64 {
        self.half_range.iter().map(|h| h.ln()).sum()
    }

    /// `(mean, clamped log_std)` of the pre-squash Gaussian.
    pub fn head(&self, obs: &Matrix) -> (Matrix, Matrix) {
        let out = self.spec.eval(&self.params, obs).expect("policy shapes fixed at construction");
        let d = self.act_dim();
        (out.slice_cols(0, d), out.slice_cols(d, 2 * d).map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)))
    }

    /// Squashed sample from explicit standard-normal noise (`noise = 0` gives
    /// the deterministic action).
    pub fn sample_with_noise(&self, obs: &Matrix, noise: &Matrix) -> PolicySample {
        let (mean, log_std) = self.head(obs);
        let d = self.act_dim();
        let mut action = Matrix::zeros(obs.rows(), d);
        let mut log_prob = Matrix::zeros(obs.rows(), 1);
        let log_scale = self.log_scale_sum();
        for r in 0..obs.rows() {
            let mut lp = -log_scale;
            for c in 0..d {
                let xi = noise.get(r, c);
                let ls = log_std.get(r, c);
                let u = mean.get(r, c) + ls.exp() * xi;
                lp += -0.5 * xi * xi - ls - HALF_LOG_TWO_PI - log_squash_jacobian(u);
                action.set(r, c, self.center[c] + self.half_range[c] * u.tanh());
            }
            log_prob.set(r, 0, lp);
        }
        PolicySample { action, log_prob }
    }

    /// Records the reparameterized sample on a tape; returns `(action, log_prob)`.
    pub(crate) fn sample_on_tape(&self, t: &mut Tape, params: &Bound, obs: Var, noise: &Matrix) -> (Var, Var) {
        let d = self.act_dim();
        let n = noise.rows();
        let out = self.spec.on_tape(t, params, obs);
        let mean = t.slice_cols(out, 0, d);
        let raw = t.slice_cols(out, d, 2 * d);
        let log_std = t.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
        let std = t.exp(log_std);
        let xi = t.constant(noise.clone());
        let shift = t.mul(std, xi);
        let u = t.add(mean, shift);
        let squashed = t.tanh(u);
        let scale = t.constant(Matrix::from_vec(1, d, self.half_range.clone()));
        let scale = t.broadcast_rows(scale, n);
        let centre = t.constant(Matrix::from_vec(1, d, self.center.clone()));
        let centre = t.broadcast_rows(centre, n);
        let scaled = t.mul(squashed, scale);
        let action = t.add(scaled, centre);

        // −½ξ² − log σ − ½log 2π − 2(log 2 − u − softplus(−2u)) − log h
        let gauss = noise.map(|x| -0.5 * x * x - HALF_LOG_TWO_PI);
        let gauss = t.constant(gauss);
        let neg2u = t.scale(u, -2.0);
        let sp = t.softplus(neg2u);
        let u_plus_sp = t.add(u, sp);
        let jac = t.affine(u_plus_sp, -2.0, 2.0 * std::f64::consts::LN_2);
        let a = t.sub(gauss, log_std);
        let per_dim = t.sub(a, jac);
        let summed = t.sum_cols(per_dim);
        let log_prob = t.affine(summed, 1.0, -self.log_scale_sum());
        (action, log_prob)
    }
}

/// `sample_action` for one observation: `(a, log_prob)`.
pub fn sample_action(policy: &GaussianPolicy, s: &[f64], rng: &mut StreamRng, deterministic: bool) -> (Vec<f64>, f64) {
    let d = policy.act_dim();
    let noise = if deterministic {
        Matrix::zeros(1, d)
    } else {
        Matrix::from_vec(1, d, rng::normals(rng, d))
    };
    let out = policy.sample_with_noise(&Matrix::row_vector(s), &noise);
    (out.action.into_vec(), out.log_prob.item())
}

impl ActionSource for GaussianPolicy {
    fn act(&self, obs: &Matrix, rng: &mut StreamRng) -> Matrix {
        let noise = Matrix::from_vec(obs.rows(), self.act_dim(), rng::normals(rng, obs.rows() * self.act_dim()));
        self.sample_with_noise(obs, &noise).action
    }
}

/// Deterministic policy action (`tanh` of the mean).
pub struct Deterministic<'a>(pub &'a GaussianPolicy);

impl ActionSource for Deterministic<'_> {
    fn act(&self, obs: &Matrix, _rng: &mut StreamRng) -> Matrix {
        self.0.sample_with_noise(obs, &Matrix::zeros(obs.rows(), self.0.act_dim())).action
    }
}

/// A critic usable for the actor update, with its own parameters held fixed.
pub trait ActionValue {
    /// n×1 values.
    fn value_on_tape(&self, t: &mut Tape, obs: Var, act: Var) -> Var;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwinQ {
    pub spec: MlpSpec,
    pub q1: ParamStore,
    pub q2: ParamStore,
    pub target1: ParamStore,
    pub target2: ParamStore,
    pub tau: f64,
}

impl TwinQ {
    pub fn new<R: Rng + ?Sized>(env: &EnvSpec, cfg: &SacConfig, rng: &mut R) -> Self {
        let spec = MlpSpec::new(&widths(env.obs_dim + env.act_dim, &cfg.hidden, 1), cfg.activation);
        let q1 = spec.init_params(rng);
        let q2 = spec.init_params(rng);
        TwinQ {
            target1: q1.fresh_copy(),
            target2: q2.fresh_copy(),
            spec,
            q1,
            q2,
            tau: cfg.tau,
        }
    }

    fn eval(&self, p: &ParamStore, obs: &Matrix, act: &Matrix) -> Matrix {
        self.spec.eval(p, &obs.concat_cols(act)).expect("critic shapes fixed at construction")
    }

    pub fn online(&self, obs: &Matrix, act: &Matrix) -> (Matrix, Matrix) {
        (self.eval(&self.q1, obs, act), self.eval(&self.q2, obs, act))
    }

    /// Element-wise minimum of the two target networks.
    pub fn target_min(&self, obs: &Matrix, act: &Matrix) -> Matrix {
        let a = self.eval(&self.target1, obs, act);
        let b = self.eval(&self.target2, obs, act);
        a.zip_map(&b, f64::min)
    }

    pub fn soft_update(&mut self) {
        self.target1.soft_update_from(&self.q1, self.tau);
        self.target2.soft_update_from(&self.q2, self.tau);
    }
}

impl ActionValue for TwinQ {
    fn value_on_tape(&self, t: &mut Tape, obs: Var, act: Var) -> Var {
        let x = t.concat_cols(obs, act);
        let b1 = self.q1.bind(t, false);
        let b2 = self.q2.bind(t, false);
        let v1 = self.spec.on_tape(t, &b1, x);
        let v2 = self.spec.on_tape(t, &b2, x);
        t.minimum(v1, v2)
    }
}

pub const LOG_ALPHA: &str = "log_alpha";

#[derive(Debug, Clone, PartialEq)]
pub struct Temperature {
    pub store: ParamStore,
    pub target_entropy: f64,
    pub learnable: bool,
}

impl Temperature {
    pub fn new(init: f64, target_entropy: f64, learnable: bool) -> Self {
        let mut store = ParamStore::new();
        store.insert(LOG_ALPHA, Matrix::scalar(init.ln()));
        Temperature { store, target_entropy, learnable }
    }

    pub fn log_alpha(&self) -> f64 {
        self.store.get(LOG_ALPHA).expect("temperature param").item()
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha().exp()
    }
}

/// Gradient of `−log α · mean(log π + target)` with respect to `log α`.
pub fn temperature_gradient(log_probs: &[f64], target_entropy: f64) -> f64 {
    -log_probs.iter().map(|lp| lp + target_entropy).sum::<f64>() / log_probs.len() as f64
}

/// One step on `log α` toward the target entropy. Returns the gradient used.
pub fn temperature_update(temp: &mut Temperature, log_probs: &[f64], opt: &Adam) -> Result<f64> {
    let g = temperature_gradient(log_probs, temp.target_entropy);
    if temp.learnable {
        let mut grads = Grads::default();
        grads.insert(LOG_ALPHA, Matrix::scalar(g));
        adam_step(&mut temp.store, &grads, opt)?;
    }
    Ok(g)
}

/// Stacked transition batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SacBatch {
    pub obs: Matrix,
    pub act: Matrix,
    pub reward: Matrix,
    pub next_obs: Matrix,
    pub done: Matrix,
}

impl SacBatch {
    pub fn from_transitions(batch: &[Transition]) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::usage("empty SAC batch"));
        }
        let stack = |f: &dyn Fn(&Transition) -> &[f64]| {
            let rows: Vec<Vec<f64>> = batch.iter().map(|t| f(t).to_vec()).collect();
            Matrix::from_rows(&rows)
        };
        Ok(SacBatch {
            obs: stack(&|t| &t.s),
            act: stack(&|t| &t.a),
            next_obs: stack(&|t| &t.s_next),
            reward: Matrix::from_vec(batch.len(), 1, batch.iter().map(|t| t.r).collect()),
            done: Matrix::from_vec(batch.len(), 1, batch.iter().map(|t| if t.done { 1.0 } else { 0.0 }).collect()),
        })
    }

    pub fn len(&self) -> usize {
        self.obs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Soft Bellman targets given the next-state policy noise.
pub fn bellman_target(q: &TwinQ, policy: &GaussianPolicy, alpha: f64, batch: &SacBatch, gamma: f64, noise: &Matrix) -> Matrix {
    let next = policy.sample_with_noise(&batch.next_obs, noise);
    let qmin = q.target_min(&batch.next_obs, &next.action);
    let mut y = Matrix::zeros(batch.len(), 1);
    for r in 0..batch.len() {
        let soft = qmin.get(r, 0) - alpha * next.log_prob.get(r, 0);
        y.set(r, 0, batch.reward.get(r, 0) + gamma * (1.0 - batch.done.get(r, 0)) * soft);
    }
    y
}

/// Squared-error loss of both critics against fixed targets `y`, with gradients.
pub fn critic_loss_grads(q: &TwinQ, batch: &SacBatch, y: &Matrix) -> Result<(f64, Grads, Grads)> {
    let mut t = Tape::new();
    let b1 = q.q1.bind(&mut t, true);
    let b2 = q.q2.bind(&mut t, true);
    let x = t.constant(batch.obs.concat_cols(&batch.act));
    let y = t.constant(y.clone());
    let mut total = None;
    for b in [&b1, &b2] {
        let v = q.spec.on_tape(&mut t, b, x);
        let e = t.sub(v, y);
        let e2 = t.square(e);
        let l = t.mean(e2);
        total = Some(match total {
            None => l,
            Some(acc) => t.add(acc, l),
        });
    }
    let total = total.expect("two critics");
    let loss = t.value(total).item();
    let g = t.gradients(total, None)?;
    Ok((loss, b1.collect(&t, &g), b2.collect(&t, &g)))
}

/// One critic regression step plus a soft target update. Returns the loss.
pub fn q_update(
    q: &mut TwinQ,
    policy: &GaussianPolicy,
    temp: &Temperature,
    batch: &SacBatch,
    gamma: f64,
    opt: &Adam,
    rng: &mut StreamRng,
) -> Result<f64> {
    let noise = Matrix::from_vec(batch.len(), policy.act_dim(), rng::normals(rng, batch.len() * policy.act_dim()));
    let y = bellman_target(q, policy, temp.alpha(), batch, gamma, &noise);
    if !y.is_finite() {
        return Err(Error::training("q_target", "non-finite Bellman target"));
    }
    let (loss, g1, g2) = critic_loss_grads(q, batch, &y)?;
    adam_step(&mut q.q1, &g1, opt)?;
    adam_step(&mut q.q2, &g2, opt)?;
    q.soft_update();
    Ok(loss)
}

/// Actor surrogate `mean(α log π(ã|s) − Q(s, ã))` and its policy gradient.
/// Also returns the per-sample log-probabilities.
pub fn actor_loss_grads<C: ActionValue>(
    policy: &GaussianPolicy,
    critic: &C,
    alpha: f64,
    obs: &Matrix,
    noise: &Matrix,
) -> Result<(f64, Grads, Vec<f64>)> {
    let mut t = Tape::new();
    let bound = policy.params.bind(&mut t, true);
    let o = t.constant(obs.clone());
    let (action, log_prob) = policy.sample_on_tape(&mut t, &bound, o, noise);
    let qv = critic.value_on_tape(&mut t, o, action);
    let ent = t.scale(log_prob, alpha);
    let diff = t.sub(ent, qv);
    let loss = t.mean(diff);
    let value = t.value(loss).item();
    let lp = t.value(log_prob).as_slice().to_vec();
    let g = t.gradients(loss, None)?;
    Ok((value, bound.collect(&t, &g), lp))
}

/// One reparameterized actor step. Returns the loss and the sampled log-probs.
pub fn policy_update<C: ActionValue>(
    policy: &mut GaussianPolicy,
    critic: &C,
    temp: &Temperature,
    obs: &Matrix,
    opt: &Adam,
    rng: &mut StreamRng,
) -> Result<(f64, Vec<f64>)> {
    let noise = Matrix::from_vec(obs.rows(), policy.act_dim(), rng::normals(rng, obs.rows() * policy.act_dim()));
    let (loss, grads, lp) = actor_loss_grads(policy, critic, temp.alpha(), obs, &noise)?;
    if !loss.is_finite() {
        return Err(Error::training("policy", "non-finite actor loss"));
    }
    adam_step(&mut policy.params, &grads, opt)?;
    Ok((loss, lp))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct SacAgent {
    pub policy: GaussianPolicy,
    pub q: TwinQ,
    pub temperature: Temperature,
    pub config: SacConfig,
    actor_opt: Adam,
    critic_opt: Adam,
    temp_opt: Adam,
}

impl SacAgent {
    pub fn new(env: &EnvSpec, cfg: &SacConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(seed);
        let policy = GaussianPolicy::new(env, cfg, &mut r);
        let q = TwinQ::new(env, cfg, &mut r);
        let target = cfg.target_entropy.unwrap_or(-(env.act_dim as f64));
        Ok(SacAgent {
            policy,
            q,
            temperature: Temperature::new(cfg.init_temperature, target, cfg.auto_temperature),
            actor_opt: Adam::new(cfg.actor_lr),
            critic_opt: Adam::new(cfg.critic_lr),
            temp_opt: Adam::new(cfg.temperature_lr),
            config: cfg.clone(),
        })
    }

    /// Critic, actor and temperature step on one batch.
    pub fn update(&mut self, batch: &[Transition], rng: &mut StreamRng) -> Result<UpdateStats> {
        let b = SacBatch::from_transitions(batch)?;
        let critic_loss = q_update(&mut self.q, &self.policy, &self.temperature, &b, self.config.gamma, &self.critic_opt, rng)?;
        let (actor_loss, lp) = policy_update(&mut self.policy, &self.q, &self.temperature, &b.obs, &self.actor_opt, rng)?;
        temperature_update(&mut self.temperature, &lp, &self.temp_opt)?;
        Ok(UpdateStats {
            critic_loss,
            actor_loss,
            alpha: self.temperature.alpha(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (EnvSpec, SacConfig) {
        let cfg = SacConfig { hidden: vec![16, 16], activation: Activation::Tanh, ..SacConfig::default() };
        (EnvSpec::pendulum(), cfg)
    }

    #[test]
    fn zero_mean_deterministic_is_centre() {
        let (env, cfg) = small();
        let mut p = GaussianPolicy::new(&env, &cfg, &mut rng::stream(0));
        for (name, v) in p.params.clone().iter() {
            *p.params.get_mut(name).unwrap() = Matrix::zeros(v.rows(), v.cols());
        }
        let (a, _) = sample_action(&p, &[1.0, 0.0, 0.0], &mut rng::stream(1), true);
        assert_eq!(a, p.center);
    }

    #[test]
    fn actions_stay_in_bounds() {
        let (env, cfg) = small();
        let p = GaussianPolicy::new(&env, &cfg, &mut rng::stream(2));
        let mut r = rng::stream(3);
        for _ in 0..10_000 {
            let (a, lp) = sample_action(&p, &[0.3, -0.9, 4.0], &mut r, false);
            assert!(a[0] > env.action_low[0] && a[0] < env.action_high[0]);
            assert!(lp.is_finite());
        }
    }

    #[test]
    fn myopic_and_terminal_targets_equal_reward() {
        let (env, cfg) = small();
        let mut r = rng::stream(4);
        let p = GaussianPolicy::new(&env, &cfg, &mut r);
        let q = TwinQ::new(&env, &cfg, &mut r);
        let t = Transition::real(vec![1.0, 0.0, 0.0], vec![0.5], vec![0.9, 0.1, 0.2], -1.25, false);
        let mut b = SacBatch::from_transitions(&[t]).unwrap();
        let noise = Matrix::from_vec(1, 1, vec![0.3]);
        assert_eq!(bellman_target(&q, &p, 0.2, &b, 0.0, &noise).item(), -1.25);
        b.done.set(0, 0, 1.0);
        assert_eq!(bellman_target(&q, &p, 0.2, &b, 0.99, &noise).item(), -1.25);
    }

    #[test]
    fn temperature_fixed_point_and_sign() {
        assert_eq!(temperature_gradient(&[1.0, 1.0], -1.0), 0.0);
        let mut temp = Temperature::new(0.2, -1.0, true);
        let before = temp.alpha();
        temperature_update(&mut temp, &[3.0, 4.0], &Adam::new(0.01)).unwrap();
        assert!(temp.alpha() > before);
    }

    #[test]
    fn unit_tau_copies_online() {
        let (env, cfg) = small();
        let mut q = TwinQ::new(&env, &SacConfig { tau: 1.0, ..cfg }, &mut rng::stream(5));
        q.q1 = q.q1.map_values(|v| v * 1.5);
        q.soft_update();
        assert!(q.target1.values_equal(&q.q1) && q.target2.values_equal(&q.q2));
    }
}
