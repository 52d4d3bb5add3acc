//! Exact checks of the return lower bounds on finite MDPs. Occupancies and
//! values come from dense linear solves, so every quantity in the bounds is
//! computed exactly up to floating-point error.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::Exp1;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::parallel::{self, Execution};
use crate::rng;

pub const SLACK_TOLERANCE: f64 = 1e-9;
const ROW_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TabularMDP {
    pub n_states: usize,
    pub n_actions: usize,
    /// `T[s][a][s']`, flattened.
    pub transition: Vec<f64>,
    /// `r[s][a]`, flattened.
    pub reward: Vec<f64>,
    pub gamma: f64,
    pub init_dist: Vec<f64>,
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    let s: f64 = p.iter().sum();
    if p.iter().any(|x| !(*x >= 0.0)) || (s - 1.0).abs() > ROW_TOLERANCE {
        return Err(Error::Input(format!("{what} is not a probability vector (sum {s})")));
    }
    Ok(())
}

impl TabularMDP {
    pub fn new(n_states: usize, n_actions: usize, transition: Vec<f64>, reward: Vec<f64>, gamma: f64, init_dist: Vec<f64>) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::Input("an MDP needs at least one state and one action".into()));
        }
        if transition.len() != n_states * n_actions * n_states || reward.len() != n_states * n_actions || init_dist.len() != n_states {
            return Err(Error::Input("MDP table sizes do not match the declared spaces".into()));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Input(format!("gamma {gamma} outside (0, 1)")));
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::Input("rewards must be finite".into()));
        }
        for sa in 0..n_states * n_actions {
            check_distribution(&transition[sa * n_states..(sa + 1) * n_states], "transition row")?;
        }
        check_distribution(&init_dist, "initial distribution")?;
        Ok(TabularMDP { n_states, n_actions, transition, reward, gamma, init_dist })
    }

    pub fn t(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + s2]
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let i = (s * self.n_actions + a) * self.n_states;
        &self.transition[i..i + self.n_states]
    }

    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    /// `max |r|`.
    pub fn r_max(&self) -> f64 {
        self.reward.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    /// Copy with another transition tensor.
    pub fn with_transition(&self, transition: Vec<f64>) -> Result<Self> {
        TabularMDP::new(self.n_states, self.n_actions, transition, self.reward.clone(), self.gamma, self.init_dist.clone())
    }

    fn same_spaces(&self, other: &TabularMDP) -> Result<()> {
        if self.n_states != other.n_states || self.n_actions != other.n_actions {
            return Err(Error::usage("the two MDPs have different state or action spaces"));
        }
        if self.init_dist != other.init_dist {
            return Err(Error::usage("the two MDPs need the same initial distribution"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    pub n_states: usize,
    pub n_actions: usize,
    /// `π[s][a]`, flattened.
    pub probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::Input("policy table size mismatch".into()));
        }
        for s in 0..n_states {
            check_distribution(&probs[s * n_actions..(s + 1) * n_actions], "policy row")?;
        }
        Ok(TabularPolicy { n_states, n_actions, probs })
    }

    pub fn p(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    fn fits(&self, mdp: &TabularMDP) -> Result<()> {
        if self.n_states != mdp.n_states || self.n_actions != mdp.n_actions {
            return Err(Error::usage("policy and MDP spaces differ"));
        }
        Ok(())
    }
}

/// Normalized discounted occupancies.
#[derive(Debug, Clone, PartialEq)]
pub struct Occupancy {
    /// ν over states.
    pub state: Vec<f64>,
    /// ρ over (state, action), flattened.
    pub state_action: Vec<f64>,
}

fn policy_transition(mdp: &TabularMDP, pi: &TabularPolicy) -> DMatrix<f64> {
    let n = mdp.n_states;
    DMatrix::from_fn(n, n, |s, s2| (0..mdp.n_actions).map(|a| pi.p(s, a) * mdp.t(s, a, s2)).sum())
}

fn solve(a: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    a.lu().solve(&b).ok_or_else(|| Error::Numerical("singular linear system".into()))
}

/// Solves `(I − γ P_πᵀ) ν = (1 − γ) μ₀` and sets `ρ(s, a) = ν(s) π(a|s)`.
pub fn occupancy(mdp: &TabularMDP, pi: &TabularPolicy) -> Result<Occupancy> {
    pi.fits(mdp)?;
    let n = mdp.n_states;
    let p = policy_transition(mdp, pi);
    let a = DMatrix::identity(n, n) - p.transpose() * mdp.gamma;
    let b = DVector::from_iterator(n, mdp.init_dist.iter().map(|m| (1.0 - mdp.gamma) * m));
    let nu = solve(a, b)?;
    let total: f64 = nu.iter().sum();
    let state: Vec<f64> = nu.iter().map(|v| v / total).collect();
    let mut state_action = vec![0.0; n * mdp.n_actions];
    for s in 0..n {
        for a in 0..mdp.n_actions {
            state_action[s * mdp.n_actions + a] = state[s] * pi.p(s, a);
        }
    }
    Ok(Occupancy { state, state_action })
}

/// Exact policy evaluation: solves `(I − γ P_π) V = r_π`.
pub fn state_values(mdp: &TabularMDP, pi: &TabularPolicy) -> Result<Vec<f64>> {
    pi.fits(mdp)?;
    let n = mdp.n_states;
    let a = DMatrix::identity(n, n) - policy_transition(mdp, pi) * mdp.gamma;
    let b = DVector::from_fn(n, |s, _| (0..mdp.n_actions).map(|a| pi.p(s, a) * mdp.r(s, a)).sum());
    Ok(solve(a, b)?.iter().copied().collect())
}

/// Normalized return `Σ ρ(s, a) r(s, a)`.
pub fn normalized_return(mdp: &TabularMDP, occ: &Occupancy) -> f64 {
    occ.state_action.iter().zip(&mdp.reward).map(|(p, r)| p * r).sum()
}

/// `½ Σ |p − q|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::usage(format!("tv_distance shape mismatch: {} vs {}", p.len(), q.len())));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// `KL(p ‖ q)`; `None` when `p` puts mass where `q` has none.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Option<f64> {
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return None;
            }
            total += a * (a / b).ln();
        }
    }
    Some(total.max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub holds: bool,
}

/// Per-state visit-discrepancy bound with the sup-norm witness class
/// `d_F(s') = 2·max T̂(s'|·,·)·d_TV(ρ_D, ρ̂)`.
pub fn lemma1_check(truth: &TabularMDP, model: &TabularMDP, pi: &TabularPolicy, pi_d: &TabularPolicy) -> Result<Vec<StateCheck>> {
    truth.same_spaces(model)?;
    let real = occupancy(truth, pi_d)?;
    let sim = occupancy(model, pi)?;
    let tv = tv_distance(&real.state_action, &sim.state_action)?;
    let (ns, na) = (truth.n_states, truth.n_actions);
    let mut out = Vec::with_capacity(ns);
    for s2 in 0..ns {
        let lhs = (real.state[s2] - sim.state[s2]).abs();
        let mut c: f64 = 0.0;
        let mut model_err = 0.0;
        for s in 0..ns {
            for a in 0..na {
                c = c.max(model.t(s, a, s2));
                model_err += real.state_action[s * na + a] * (truth.t(s, a, s2) - model.t(s, a, s2)).abs();
            }
        }
        let rhs = truth.gamma * 2.0 * c * tv + truth.gamma * model_err;
        let slack = rhs - lhs;
        out.push(StateCheck { lhs, rhs, slack, holds: slack >= -SLACK_TOLERANCE });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub lhs: f64,
    pub eta_hat: f64,
    pub policy_shift: f64,
    pub ipm_term: f64,
    pub kl_term: f64,
    pub holds: bool,
    pub slack: f64,
    /// The KL term was undefined and replaced by an infinite penalty.
    pub kl_undefined: bool,
}

impl BoundReport {
    fn new(lhs: f64, eta_hat: f64, policy_shift: f64, ipm_term: f64, kl_term: f64, kl_undefined: bool) -> Self {
        let slack = lhs - (eta_hat - policy_shift - ipm_term - kl_term);
        BoundReport {
            lhs,
            eta_hat,
            policy_shift,
            ipm_term,
            kl_term,
            holds: kl_undefined || slack >= -SLACK_TOLERANCE,
            slack,
            kl_undefined,
        }
    }
}

/// `η ≥ η̂ − R·ε_π − γR·d_F·|S| − γR·E_{ρ_D}√(2 KL(T ‖ T̂))`.
pub fn theorem1_check(truth: &TabularMDP, model: &TabularMDP, pi: &TabularPolicy, pi_d: &TabularPolicy) -> Result<BoundReport> {
    truth.same_spaces(model)?;
    let (ns, na, g) = (truth.n_states, truth.n_actions, truth.gamma);
    let on_truth = occupancy(truth, pi)?;
    let on_model = occupancy(model, pi)?;
    let behaviour = occupancy(truth, pi_d)?;
    let eta = normalized_return(truth, &on_truth);
    let eta_hat = normalized_return(model, &on_model);
    let r = truth.r_max();
    let eps_pi = 2.0 * tv_distance(&on_truth.state, &behaviour.state)?;
    let c = model.transition.iter().fold(0.0f64, |m, t| m.max(*t));
    let d_f = 2.0 * c * tv_distance(&behaviour.state_action, &on_model.state_action)?;
    let mut kl_expect = 0.0;
    let mut undefined = false;
    for s in 0..ns {
        for a in 0..na {
            match kl_divergence(truth.row(s, a), model.row(s, a)) {
                Some(kl) => kl_expect += behaviour.state_action[s * na + a] * (2.0 * kl).sqrt(),
                None => undefined = true,
            }
        }
    }
    let kl_term = if undefined { f64::INFINITY } else { g * r * kl_expect };
    Ok(BoundReport::new(eta, eta_hat, r * eps_pi, g * r * d_f * ns as f64, kl_term, undefined))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlternativeReport {
    /// `|(η̂ − η) − γ E_{ρ̂}[G]|`.
    pub identity_residual: f64,
    pub bound: BoundReport,
}

/// Telescoping identity `η̂ − η = γ E_{ρ̂}[G]` and the bound built on it.
pub fn appendix_e_check(truth: &TabularMDP, model: &TabularMDP, pi: &TabularPolicy, pi_d: &TabularPolicy) -> Result<AlternativeReport> {
    truth.same_spaces(model)?;
    let (ns, na, g) = (truth.n_states, truth.n_actions, truth.gamma);
    let v = state_values(truth, pi)?;
    let on_truth = occupancy(truth, pi)?;
    let on_model = occupancy(model, pi)?;
    let behaviour = occupancy(truth, pi_d)?;
    let eta = normalized_return(truth, &on_truth);
    let eta_hat = normalized_return(model, &on_model);

    let dot = |row: &[f64]| row.iter().zip(&v).map(|(p, x)| p * x).sum::<f64>();
    let mut gap = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            gap[s * na + a] = dot(model.row(s, a)) - dot(truth.row(s, a));
        }
    }
    let expected_gap: f64 = on_model.state_action.iter().zip(&gap).map(|(p, x)| p * x).sum();
    let identity_residual = ((eta_hat - eta) - g * expected_gap).abs();

    let g_max = gap.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let v_max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let d_f1 = 2.0 * g_max * tv_distance(&behaviour.state_action, &on_model.state_action)?;
    let mut d_f2 = 0.0;
    for s in 0..ns {
        for a in 0..na {
            d_f2 += behaviour.state_action[s * na + a] * 2.0 * v_max * tv_distance(model.row(s, a), truth.row(s, a))?;
        }
    }
    Ok(AlternativeReport {
        identity_residual,
        bound: BoundReport::new(eta, eta_hat, 0.0, g * d_f1, g * d_f2, false),
    })
}

/// A random problem: true MDP, perturbed model, evaluated and behaviour policies.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub truth: TabularMDP,
    pub model: TabularMDP,
    pub pi: TabularPolicy,
    pub pi_d: TabularPolicy,
    pub epsilon: f64,
}

fn dirichlet_one<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|d| d / total).collect()
}

fn renormalize(row: &mut [f64]) {
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|x| *x /= s);
}

/// Dirichlet(1) rows for `T`; `T̂ = normalize(T + ε·Dirichlet noise)`.
pub fn random_instance(seed: u64, n_states: usize, n_actions: usize, epsilon: f64, gamma: f64) -> Result<Instance> {
    let mut r = rng::stream(seed);
    let (ns, na) = (n_states, n_actions);
    let mut t = Vec::with_capacity(ns * na * ns);
    let mut t_hat = Vec::with_capacity(ns * na * ns);
    for _ in 0..ns * na {
        let row = dirichlet_one(&mut r, ns);
        let noise = dirichlet_one(&mut r, ns);
        let mut pert: Vec<f64> = row.iter().zip(&noise).map(|(a, b)| a + epsilon * b).collect();
        if epsilon == 0.0 {
            pert.copy_from_slice(&row);
        } else {
            renormalize(&mut pert);
        }
        t.extend(row);
        t_hat.extend(pert);
    }
    let reward: Vec<f64> = (0..ns * na).map(|_| r.random_range(-1.0..=1.0)).collect();
    let mu0 = dirichlet_one(&mut r, ns);
    let truth = TabularMDP::new(ns, na, t, reward, gamma, mu0)?;
    let model = truth.with_transition(t_hat)?;
    let mut policy = || -> Result<TabularPolicy> {
        let probs = (0..ns).flat_map(|_| dirichlet_one(&mut r, na)).collect();
        TabularPolicy::new(ns, na, probs)
    };
    let pi = policy()?;
    let pi_d = policy()?;
    Ok(Instance { truth, model, pi, pi_d, epsilon })
}

pub const EPSILONS: [f64; 3] = [0.0, 0.05, 0.3];
pub const GAMMAS: [f64; 3] = [0.5, 0.9, 0.99];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteConfig {
    pub instances: usize,
    pub seed: u64,
    pub max_states: usize,
    pub max_actions: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig { instances: 500, seed: 0, max_states: 10, max_actions: 4 }
    }
}

/// One CSV row of the randomized suite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceResult {
    pub instance: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub epsilon: f64,
    pub gamma: f64,
    pub lemma1_min_slack: f64,
    pub theorem1_slack: f64,
    pub appendix_e_residual: f64,
    pub appendix_e_slack: f64,
    pub pinsker_ok: bool,
    pub kl_undefined: bool,
    pub lemma1_holds: bool,
    pub theorem1_holds: bool,
    pub appendix_e_holds: bool,
}

impl InstanceResult {
    pub fn all_hold(&self) -> bool {
        self.lemma1_holds && self.theorem1_holds && self.appendix_e_holds && self.pinsker_ok
    }
}

/// Runs all three checks on one instance.
pub fn check_instance(index: usize, inst: &Instance) -> Result<InstanceResult> {
    let lemma = lemma1_check(&inst.truth, &inst.model, &inst.pi, &inst.pi_d)?;
    let thm = theorem1_check(&inst.truth, &inst.model, &inst.pi, &inst.pi_d)?;
    let alt = appendix_e_check(&inst.truth, &inst.model, &inst.pi, &inst.pi_d)?;
    let (ns, na) = (inst.truth.n_states, inst.truth.n_actions);
    let mut pinsker_ok = true;
    for s in 0..ns {
        for a in 0..na {
            let (p, q) = (inst.truth.row(s, a), inst.model.row(s, a));
            if let Some(kl) = kl_divergence(p, q) {
                let tv = tv_distance(p, q)?;
                pinsker_ok &= 2.0 * tv * tv <= kl + SLACK_TOLERANCE;
            }
        }
    }
    let lemma1_min_slack = lemma.iter().map(|c| c.slack).fold(f64::INFINITY, f64::min);
    Ok(InstanceResult {
        instance: index,
        n_states: ns,
        n_actions: na,
        epsilon: inst.epsilon,
        gamma: inst.truth.gamma,
        lemma1_min_slack,
        theorem1_slack: thm.slack,
        appendix_e_residual: alt.identity_residual,
        appendix_e_slack: alt.bound.slack,
        pinsker_ok,
        kl_undefined: thm.kl_undefined,
        lemma1_holds: lemma.iter().all(|c| c.holds),
        theorem1_holds: thm.holds,
        appendix_e_holds: alt.bound.holds && alt.identity_residual < SLACK_TOLERANCE,
    })
}

/// Instance `i` cycles through the three model-error regimes and, every
/// three instances, through the three discounts.
pub fn suite_instance(cfg: &SuiteConfig, i: usize) -> Result<Instance> {
    let mut r = rng::stream(rng::derive(cfg.seed, i as u64));
    let ns = r.random_range(1..=cfg.max_states.max(1));
    let na = r.random_range(1..=cfg.max_actions.max(1));
    random_instance(r.random(), ns, na, EPSILONS[i % 3], GAMMAS[(i / 3) % 3])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub results: Vec<InstanceResult>,
}

impl SuiteReport {
    pub fn violations(&self) -> usize {
        self.results.iter().filter(|r| !r.all_hold()).count()
    }

    pub fn max_identity_residual(&self) -> f64 {
        self.results.iter().map(|r| r.appendix_e_residual).fold(0.0, f64::max)
    }
}

pub fn run_suite(cfg: &SuiteConfig, exec: Execution) -> Result<SuiteReport> {
    if cfg.max_states == 0 || cfg.max_actions == 0 {
        return Err(Error::usage("max_states and max_actions must be positive"));
    }
    let idx: Vec<usize> = (0..cfg.instances).collect();
    let results = parallel::map(exec, &idx, |&i| suite_instance(cfg, i).and_then(|inst| check_instance(i, &inst)));
    Ok(SuiteReport { results: results.into_iter().collect::<Result<_>>()? })
}
