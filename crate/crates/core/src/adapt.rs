//! Unsupervised model adaptation: pulls the simulated-input feature
//! distribution toward the real-input one, either through a Wasserstein-1
//! critic with gradient penalty or through a kernel MMD.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dyna::Scheduled;
use crate::dynamics::SplitNetwork;
use crate::error::{Error, Result};
use crate::numcore::{adam_step, input_gradient_norm_grad, Activation, Adam, Bound, Grads, Matrix, MlpSpec, ParamStore, Tape, Var};
use crate::parallel::{self, Execution};
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    Wasserstein1,
    Mmd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Separate real and simulated extractors, both trained.
    Asymmetric,
    /// One extractor for both inputs.
    SharedWeights,
    /// Separate extractors; the real side never moves.
    FixedReal,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Asymmetric => "asymmetric",
            Strategy::SharedWeights => "shared_weights",
            Strategy::FixedReal => "fixed_real",
        })
    }
}

pub const DEFAULT_BANDWIDTHS: [f64; 8] = [0.001, 0.005, 0.01, 0.05, 0.1, 1.0, 5.0, 10.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationConfig {
    pub enabled: bool,
    pub divergence: Divergence,
    pub strategy: Strategy,
    /// Gradient-penalty weight.
    pub alpha: f64,
    pub critic_steps: usize,
    /// Extractor updates per adaptation event.
    pub g2: Scheduled,
    /// No adaptation from this epoch on.
    pub stop_epoch: u64,
    pub mmd_bandwidths: Vec<f64>,
    pub critic_hidden: Vec<usize>,
    pub critic_lr: f64,
    pub extractor_lr: f64,
    pub batch_size: usize,
    /// One critic for every member instead of one each.
    pub shared_critic: bool,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            enabled: true,
            divergence: Divergence::Wasserstein1,
            strategy: Strategy::Asymmetric,
            alpha: 10.0,
            critic_steps: 5,
            g2: Scheduled::Constant(20),
            stop_epoch: 60,
            mmd_bandwidths: DEFAULT_BANDWIDTHS.to_vec(),
            critic_hidden: vec![64, 64],
            critic_lr: 1e-3,
            extractor_lr: 1e-4,
            batch_size: 128,
            shared_critic: false,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::config("adaptation.alpha must be non-negative"));
        }
        if self.critic_steps == 0 {
            return Err(Error::config("adaptation.critic_steps must be at least 1"));
        }
        if self.mmd_bandwidths.is_empty() || self.mmd_bandwidths.iter().any(|b| !(*b > 0.0)) {
            return Err(Error::config("mmd_bandwidths must be non-empty and strictly positive"));
        }
        if self.critic_hidden.contains(&0) {
            return Err(Error::config("critic_hidden widths must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("adaptation.batch_size must be at least 2"));
        }
        if !(self.critic_lr > 0.0 && self.extractor_lr > 0.0) {
            return Err(Error::config("adaptation learning rates must be positive"));
        }
        self.g2.validate()
    }

    /// Whether an adaptation event runs at `epoch`.
    pub fn active_at(&self, epoch: u64) -> bool {
        self.enabled && epoch < self.stop_epoch && self.g2.eval(epoch) > 0
    }
}

/// Scalar-output network over feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    pub spec: MlpSpec,
    pub params: ParamStore,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![feature_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let spec = MlpSpec::new(&sizes, Activation::Tanh);
        let params = spec.init_params(rng);
        Critic { spec, params }
    }

    pub fn eval(&self, h: &Matrix) -> Matrix {
        self.spec.eval(&self.params, h).expect("critic shapes fixed at construction")
    }

    /// Replaces `f` by `−f`. The penalty is unchanged and the objective
    /// changes sign.
    pub fn negate(&mut self) {
        let last = self.spec.n_layers() - 1;
        for name in [format!("w{last}"), format!("b{last}")] {
            self.params.negate(&name).expect("critic output layer");
        }
    }
}

/// Extractor parameters for the two input streams.
#[derive(Debug, Clone, PartialEq)]
pub enum Extractors {
    Split { real: ParamStore, sim: ParamStore },
    /// Both streams read and write this one store.
    Shared(ParamStore),
}

impl Extractors {
    pub fn real(&self) -> &ParamStore {
        match self {
            Extractors::Split { real, .. } => real,
            Extractors::Shared(p) => p,
        }
    }

    pub fn sim(&self) -> &ParamStore {
        match self {
            Extractors::Split { sim, .. } => sim,
            Extractors::Shared(p) => p,
        }
    }

    pub fn sim_mut(&mut self) -> &mut ParamStore {
        match self {
            Extractors::Split { sim, .. } => sim,
            Extractors::Shared(p) => p,
        }
    }

    pub fn real_mut(&mut self) -> &mut ParamStore {
        match self {
            Extractors::Split { real, .. } => real,
            Extractors::Shared(p) => p,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationState {
    pub spec: MlpSpec,
    pub extractors: Extractors,
    pub critic: Critic,
    pub strategy: Strategy,
    pub steps: usize,
}

/// Copies the member's extractor into both streams per `strategy`. The critic
/// is warm-started when one is supplied.
pub fn begin_adaptation(
    member: &SplitNetwork,
    cfg: &AdaptationConfig,
    critic: Option<Critic>,
    rng: &mut StreamRng,
) -> AdaptationState {
    let extractors = match cfg.strategy {
        Strategy::SharedWeights => Extractors::Shared(member.extractor.fresh_copy()),
        Strategy::Asymmetric | Strategy::FixedReal => Extractors::Split {
            real: member.extractor.fresh_copy(),
            sim: member.extractor.fresh_copy(),
        },
    };
    let critic = critic.unwrap_or_else(|| Critic::new(member.feature_dim(), &cfg.critic_hidden, rng));
    AdaptationState {
        spec: member.extractor_spec.clone(),
        extractors,
        critic,
        strategy: cfg.strategy,
        steps: 0,
    }
}

/// `mean f_c(h_e) − mean f_c(h_m)`.
pub fn critic_objective(critic: &Critic, h_e: &Matrix, h_m: &Matrix) -> f64 {
    let a = critic.eval(h_e);
    let b = critic.eval(h_m);
    a.sum() / a.rows() as f64 - b.sum() / b.rows() as f64
}

/// The logged W1 estimate: the critic objective at the current critic.
pub fn estimate_w1_metric(critic: &Critic, h_e: &Matrix, h_m: &Matrix) -> f64 {
    critic_objective(critic, h_e, h_m)
}

/// Random interpolates `u·h_e + (1 − u)·h_m`, pairing rows by index over the
/// common prefix.
pub fn interpolates<R: Rng + ?Sized>(h_e: &Matrix, h_m: &Matrix, rng: &mut R) -> Matrix {
    let n = h_e.rows().min(h_m.rows());
    let mut out = Matrix::zeros(n, h_e.cols());
    for r in 0..n {
        let u: f64 = rng.random();
        for c in 0..h_e.cols() {
            out.set(r, c, u * h_e.get(r, c) + (1.0 - u) * h_m.get(r, c));
        }
    }
    out
}

/// Penalty value and its critic-parameter gradient at random interpolates.
pub fn gradient_penalty<R: Rng + ?Sized>(critic: &Critic, h_e: &Matrix, h_m: &Matrix, rng: &mut R) -> Result<(f64, Grads)> {
    let hat = interpolates(h_e, h_m, rng);
    let (_, penalty, grads) = input_gradient_norm_grad(&critic.spec, &critic.params, &hat)?;
    Ok((penalty, grads))
}

fn critic_objective_grads(critic: &Critic, h_e: &Matrix, h_m: &Matrix) -> Result<(f64, Grads)> {
    let mut t = Tape::new();
    let b = critic.params.bind(&mut t, true);
    let xe = t.constant(h_e.clone());
    let xm = t.constant(h_m.clone());
    let fe = critic.spec.on_tape(&mut t, &b, xe);
    let fm = critic.spec.on_tape(&mut t, &b, xm);
    let me = t.mean(fe);
    let mm = t.mean(fm);
    let l = t.sub(me, mm);
    let v = t.value(l).item();
    let g = t.gradients(l, None)?;
    Ok((v, b.collect(&t, &g)))
}

/// One critic ascent step on `L_WD − α·L_gp`. Returns `(L_WD, L_gp)`.
pub fn critic_step<R: Rng + ?Sized>(critic: &mut Critic, h_e: &Matrix, h_m: &Matrix, alpha: f64, opt: &Adam, rng: &mut R) -> Result<(f64, f64)> {
    let (mut wd, mut g) = critic_objective_grads(critic, h_e, h_m)?;
    // The critic class is closed under negation. A critic stuck on the wrong
    // sign cannot cross the zero-gradient region the penalty guards, so jump.
    if wd < 0.0 {
        critic.negate();
        (wd, g) = critic_objective_grads(critic, h_e, h_m)?;
    }
    let (gp, g_gp) = gradient_penalty(critic, h_e, h_m, rng)?;
    if !(wd.is_finite() && gp.is_finite()) {
        return Err(Error::training("critic", format!("non-finite critic objective (wd={wd}, gp={gp})")));
    }
    // Descent on −L_WD + α·L_gp.
    g.scale(-1.0);
    let mut g_gp = g_gp;
    g_gp.scale(alpha);
    g.accumulate(&g_gp);
    adam_step(&mut critic.params, &g, opt)?;
    Ok((wd, gp))
}

/// Trains `critic` on fixed feature pools, drawing `batch` rows per side each
/// step. Returns the final `(L_WD, L_gp)`.
pub fn fit_critic(
    critic: &mut Critic,
    pool_e: &Matrix,
    pool_m: &Matrix,
    steps: usize,
    batch: usize,
    alpha: f64,
    opt: &Adam,
    rng: &mut StreamRng,
) -> Result<(f64, f64)> {
    let mut last = (0.0, 0.0);
    for _ in 0..steps {
        let he = sample_rows(pool_e, batch, rng);
        let hm = sample_rows(pool_m, batch, rng);
        last = critic_step(critic, &he, &hm, alpha, opt, rng)?;
    }
    Ok(last)
}

/// `n` rows of `pool` drawn uniformly with replacement.
pub fn sample_rows<R: Rng + ?Sized>(pool: &Matrix, n: usize, rng: &mut R) -> Matrix {
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..pool.rows())).collect();
    pool.select_rows(&idx)
}

/// Pairwise `exp(−‖x − y‖² / bw)` summed over bandwidths, recorded on `t`.
fn kernel_sum_on_tape(t: &mut Tape, x: Var, y: Var, bandwidths: &[f64]) -> Var {
    let (n, m) = (t.value(x).rows(), t.value(y).rows());
    let x2 = t.square(x);
    let xn = t.sum_cols(x2);
    let xn = t.broadcast_cols(xn, m);
    let y2 = t.square(y);
    let yn = t.sum_cols(y2);
    let yn = t.transpose(yn);
    let yn = t.broadcast_rows(yn, n);
    let cross = t.matmul_nt(x, y);
    let cross = t.scale(cross, -2.0);
    let d = t.add(xn, yn);
    let d = t.add(d, cross);
    let d = t.clamp(d, 0.0, f64::INFINITY);
    let mut total = None;
    for &bw in bandwidths {
        let s = t.scale(d, -1.0 / bw);
        let k = t.exp(s);
        total = Some(match total {
            None => k,
            Some(acc) => t.add(acc, k),
        });
    }
    total.expect("at least one bandwidth")
}

/// Unbiased MMD² between the rows of `h_e` and `h_m`, recorded on `t`.
pub fn mmd2_on_tape(t: &mut Tape, h_e: Var, h_m: Var, bandwidths: &[f64]) -> Result<Var> {
    let (ne, nm) = (t.value(h_e).rows(), t.value(h_m).rows());
    if ne < 2 || nm < 2 {
        return Err(Error::usage(format!("unbiased MMD needs at least two rows per side, got {ne} and {nm}")));
    }
    if bandwidths.is_empty() {
        return Err(Error::usage("MMD needs at least one bandwidth"));
    }
    let off_diag = |n: usize| {
        let mut m = Matrix::filled(n, n, 1.0);
        for i in 0..n {
            m.set(i, i, 0.0);
        }
        m
    };
    let kee = kernel_sum_on_tape(t, h_e, h_e, bandwidths);
    let mask = t.constant(off_diag(ne));
    let kee = t.mul(kee, mask);
    let see = t.sum(kee);
    let see = t.scale(see, 1.0 / (ne * (ne - 1)) as f64);
    let kmm = kernel_sum_on_tape(t, h_m, h_m, bandwidths);
    let mask = t.constant(off_diag(nm));
    let kmm = t.mul(kmm, mask);
    let smm = t.sum(kmm);
    let smm = t.scale(smm, 1.0 / (nm * (nm - 1)) as f64);
    let kem = kernel_sum_on_tape(t, h_e, h_m, bandwidths);
    let sem = t.sum(kem);
    let sem = t.scale(sem, -2.0 / (ne * nm) as f64);
    let a = t.add(see, smm);
    Ok(t.add(a, sem))
}

/// Unbiased MMD² with a mixture of RBF kernels `exp(−‖x − y‖² / bw)`.
pub fn mmd2_unbiased(h_e: &Matrix, h_m: &Matrix, bandwidths: &[f64]) -> Result<f64> {
    let mut t = Tape::new();
    let a = t.constant(h_e.clone());
    let b = t.constant(h_m.clone());
    let v = mmd2_on_tape(&mut t, a, b, bandwidths)?;
    Ok(t.value(v).item())
}

/// Logged values of one adaptation step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLog {
    /// Critic objective (W1) or MMD² before the extractor update.
    pub divergence: f64,
    /// Gradient penalty of the last critic step (0 for MMD).
    pub penalty: f64,
}

struct BoundExtractors {
    real: Bound,
    sim: Bound,
}

fn bind_extractors(state: &AdaptationState, t: &mut Tape) -> BoundExtractors {
    match (&state.extractors, state.strategy) {
        (Extractors::Shared(p), _) => {
            let b = p.bind(t, true);
            BoundExtractors { real: b.clone(), sim: b }
        }
        (Extractors::Split { real, sim }, s) => BoundExtractors {
            real: real.bind(t, s != Strategy::FixedReal),
            sim: sim.bind(t, true),
        },
    }
}

/// Descent step on `loss` over the extractors allowed by the strategy.
fn extractor_step(state: &mut AdaptationState, t: &mut Tape, b: &BoundExtractors, loss: Var, opt: &Adam) -> Result<()> {
    let g = t.gradients(loss, None)?;
    match state.strategy {
        Strategy::SharedWeights => {
            let grads = b.sim.collect(t, &g);
            adam_step(state.extractors.sim_mut(), &grads, opt)?;
        }
        Strategy::FixedReal => {
            let grads = b.sim.collect(t, &g);
            adam_step(state.extractors.sim_mut(), &grads, opt)?;
        }
        Strategy::Asymmetric => {
            let gr = b.real.collect(t, &g);
            let gs = b.sim.collect(t, &g);
            adam_step(state.extractors.real_mut(), &gr, opt)?;
            adam_step(state.extractors.sim_mut(), &gs, opt)?;
        }
    }
    Ok(())
}

/// Optimizers for one adaptation event.
#[derive(Debug, Clone, Copy)]
pub struct AdaptOptimizers {
    pub critic: Adam,
    pub extractor: Adam,
}

impl AdaptOptimizers {
    pub fn from_config(cfg: &AdaptationConfig) -> Self {
        AdaptOptimizers {
            critic: Adam::new(cfg.critic_lr),
            extractor: Adam::new(cfg.extractor_lr),
        }
    }
}

/// One adaptation update drawing inputs from the normalized real and
/// simulated `(s, a)` pools.
pub fn adapt_step(
    state: &mut AdaptationState,
    real_pool: &Matrix,
    sim_pool: &Matrix,
    cfg: &AdaptationConfig,
    opts: &AdaptOptimizers,
    rng: &mut StreamRng,
) -> Result<StepLog> {
    let n = cfg.batch_size;
    let mut log = StepLog::default();
    if cfg.divergence == Divergence::Wasserstein1 {
        for _ in 0..cfg.critic_steps {
            let xe = sample_rows(real_pool, n, rng);
            let xm = sample_rows(sim_pool, n, rng);
            let he = state.spec.eval(state.extractors.real(), &xe)?;
            let hm = state.spec.eval(state.extractors.sim(), &xm)?;
            let (wd, gp) = critic_step(&mut state.critic, &he, &hm, cfg.alpha, &opts.critic, rng)?;
            log = StepLog { divergence: wd, penalty: gp };
        }
    }
    let xe = sample_rows(real_pool, n, rng);
    let xm = sample_rows(sim_pool, n, rng);
    let mut t = Tape::new();
    let b = bind_extractors(state, &mut t);
    let xe = t.constant(xe);
    let xm = t.constant(xm);
    let he = state.spec.on_tape(&mut t, &b.real, xe);
    let hm = state.spec.on_tape(&mut t, &b.sim, xm);
    let loss = match cfg.divergence {
        Divergence::Wasserstein1 => {
            let cb = state.critic.params.bind(&mut t, false);
            let fe = state.critic.spec.on_tape(&mut t, &cb, he);
            let fm = state.critic.spec.on_tape(&mut t, &cb, hm);
            let me = t.mean(fe);
            let mm = t.mean(fm);
            t.sub(me, mm)
        }
        Divergence::Mmd => {
            let l = mmd2_on_tape(&mut t, he, hm, &cfg.mmd_bandwidths)?;
            log.divergence = t.value(l).item();
            l
        }
    };
    let v = t.value(loss).item();
    if !v.is_finite() {
        return Err(Error::training("extractor", "non-finite adaptation loss"));
    }
    extractor_step(state, &mut t, &b, loss, &opts.extractor)?;
    state.steps += 1;
    Ok(log)
}

/// Writes the simulated-stream extractor back into `member`. The decoder is
/// left alone.
pub fn finish_adaptation(state: &AdaptationState, member: &mut SplitNetwork) {
    if state.steps > 0 {
        member.extractor.copy_values_from(state.extractors.sim());
    }
}

/// Outcome of adapting every member once.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EventReport {
    pub steps: usize,
    pub divergence: f64,
    pub penalty: f64,
    pub aborted: usize,
}

/// Runs `g2` adaptation steps on every member. `critics` carries the warm
/// critics between events (one per member, or one in total when shared).
/// A member whose losses diverge is left unadapted.
pub fn adapt_members(
    members: &mut [SplitNetwork],
    critics: &mut Vec<Critic>,
    real_pool: &Matrix,
    sim_pool: &Matrix,
    cfg: &AdaptationConfig,
    g2: usize,
    seed: u64,
    exec: Execution,
) -> Result<EventReport> {
    let opts = AdaptOptimizers::from_config(cfg);
    let run_one = |i: usize, member: &mut SplitNetwork, critic: Option<Critic>| -> (Option<Critic>, Option<StepLog>) {
        let mut r = rng::stream(rng::derive(seed, i as u64));
        let mut state = begin_adaptation(member, cfg, critic.clone(), &mut r);
        let mut last = StepLog::default();
        for _ in 0..g2 {
            match adapt_step(&mut state, real_pool, sim_pool, cfg, &opts, &mut r) {
                Ok(l) => last = l,
                Err(e) => {
                    log::warn!("adaptation of member {i} aborted: {e}");
                    return (critic, None);
                }
            }
        }
        finish_adaptation(&state, member);
        (Some(state.critic), Some(last))
    };

    let logs: Vec<Option<StepLog>> = if cfg.shared_critic {
        let mut critic = critics.pop();
        let mut logs = Vec::with_capacity(members.len());
        for (i, m) in members.iter_mut().enumerate() {
            let (c, l) = run_one(i, m, critic.take());
            critic = c;
            logs.push(l);
        }
        critics.clear();
        critics.extend(critic);
        logs
    } else {
        let mut slots: Vec<(SplitNetwork, Option<Critic>, Option<StepLog>)> = members
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), critics.get(i).cloned(), None))
            .collect();
        parallel::for_each_mut(exec, &mut slots, |i, (m, c, l)| {
            let (nc, nl) = run_one(i, m, c.take());
            *c = nc;
            *l = nl;
        });
        critics.clear();
        let mut logs = Vec::with_capacity(slots.len());
        for (dst, (m, c, l)) in members.iter_mut().zip(slots) {
            *dst = m;
            critics.extend(c);
            logs.push(l);
        }
        logs
    };
    let done: Vec<&StepLog> = logs.iter().flatten().collect();
    let k = done.len().max(1) as f64;
    Ok(EventReport {
        steps: g2 * done.len(),
        divergence: done.iter().map(|l| l.divergence).sum::<f64>() / k,
        penalty: done.iter().map(|l| l.penalty).sum::<f64>() / k,
        aborted: logs.len() - done.len(),
    })
}
