//! Replay storage, rollout-length schedules and branched model rollouts.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{self, EnvSpec};
use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Real,
    Simulated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub s_next: Vec<f64>,
    pub r: f64,
    pub done: bool,
    pub source: Source,
}

impl Transition {
    pub fn real(s: Vec<f64>, a: Vec<f64>, s_next: Vec<f64>, r: f64, done: bool) -> Self {
        Transition { s, a, s_next, r, done, source: Source::Real }
    }
}

/// Bounded FIFO of transitions with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    storage: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        ReplayBuffer {
            capacity,
            storage: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.storage.len() == self.capacity {
            self.storage.pop_front();
        }
        self.storage.push_back(t);
    }

    pub fn extend(&mut self, ts: impl IntoIterator<Item = Transition>) {
        for t in ts {
            self.push(t);
        }
    }

    /// Changes the capacity, evicting the oldest entries if it shrinks.
    pub fn set_capacity(&mut self, capacity: usize) {
        assert!(capacity > 0, "buffer capacity must be positive");
        self.capacity = capacity;
        while self.storage.len() > capacity {
            self.storage.pop_front();
        }
    }

    pub fn clear(&mut self) {
        self.storage.clear();
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.storage[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.storage.iter()
    }

    pub fn sample_indices<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<usize> {
        let len = self.storage.len();
        (0..n).map(|_| rng.random_range(0..len)).collect()
    }

    /// `n` transitions drawn uniformly with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Vec<Transition>> {
        if self.storage.is_empty() {
            return Err(Error::usage("cannot sample from an empty buffer"));
        }
        Ok(self
            .sample_indices(rng, n)
            .into_iter()
            .map(|i| self.storage[i].clone())
            .collect())
    }
}

/// Linear ramp from length `x` at epoch `a` to `y` at epoch `b`, written `[a, b, x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct RolloutSchedule {
    pub a: u32,
    pub b: u32,
    pub x: u32,
    pub y: u32,
}

impl From<[u32; 4]> for RolloutSchedule {
    fn from(v: [u32; 4]) -> Self {
        RolloutSchedule { a: v[0], b: v[1], x: v[2], y: v[3] }
    }
}

impl From<RolloutSchedule> for [u32; 4] {
    fn from(s: RolloutSchedule) -> Self {
        [s.a, s.b, s.x, s.y]
    }
}

impl RolloutSchedule {
    pub fn new(a: u32, b: u32, x: u32, y: u32) -> Result<Self> {
        let s = RolloutSchedule { a, b, x, y };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.a >= self.b {
            return Err(Error::config(format!("schedule needs a < b, got {:?}", <[u32; 4]>::from(*self))));
        }
        if self.x > self.y {
            return Err(Error::config(format!("schedule needs x <= y, got {:?}", <[u32; 4]>::from(*self))));
        }
        Ok(())
    }

    /// `clamp(round(x + (epoch − a)(y − x)/(b − a)), x, y)`
    pub fn eval(&self, epoch: u64) -> u32 {
        let (a, b, x, y) = (self.a as f64, self.b as f64, self.x as f64, self.y as f64);
        let raw = x + (epoch as f64 - a) * (y - x) / (b - a);
        raw.round().clamp(x, y) as u32
    }
}

/// A quantity that is either fixed or follows a [`RolloutSchedule`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scheduled {
    Constant(u32),
    Linear(RolloutSchedule),
}

impl Scheduled {
    pub fn eval(&self, epoch: u64) -> u32 {
        match self {
            Scheduled::Constant(v) => *v,
            Scheduled::Linear(s) => s.eval(epoch),
        }
    }

    pub fn max_value(&self) -> u32 {
        match self {
            Scheduled::Constant(v) => *v,
            Scheduled::Linear(s) => s.y,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Scheduled::Constant(_) => Ok(()),
            Scheduled::Linear(s) => s.validate(),
        }
    }
}

/// Length of a rollout at `epoch`.
pub fn schedule_eval(sched: &RolloutSchedule, epoch: u64) -> u32 {
    sched.eval(epoch)
}

/// A (possibly stochastic) one-step model over batches of observations.
pub trait TransitionModel {
    fn n_members(&self) -> usize;

    /// Draws next observations and rewards from member `member` for every row.
    fn sample_step(&self, member: usize, obs: &Matrix, act: &Matrix, rng: &mut StreamRng) -> Result<(Matrix, Vec<f64>)>;

    /// Deterministic next-observation prediction used for open-loop probes.
    fn mean_step(&self, obs: &Matrix, act: &Matrix) -> Result<Matrix>;
}

/// Chooses actions for a batch of observations.
pub trait ActionSource {
    fn act(&self, obs: &Matrix, rng: &mut StreamRng) -> Matrix;
}

/// The true simulator exposed through the model interface.
#[derive(Debug, Clone)]
pub struct GroundTruthModel {
    pub spec: EnvSpec,
    pub members: usize,
}

impl GroundTruthModel {
    pub fn new(spec: EnvSpec, members: usize) -> Self {
        GroundTruthModel { spec, members: members.max(1) }
    }

    fn step_rows(&self, obs: &Matrix, act: &Matrix) -> (Matrix, Vec<f64>) {
        let mut next = Matrix::zeros(obs.rows(), obs.cols());
        let mut rewards = Vec::with_capacity(obs.rows());
        for i in 0..obs.rows() {
            let (a, _) = envs::clip_action(&self.spec, act.row(i));
            let (s, r) = envs::transition(&self.spec, obs.row(i), &a);
            next.row_mut(i).copy_from_slice(&s);
            rewards.push(r);
        }
        (next, rewards)
    }
}

impl TransitionModel for GroundTruthModel {
    fn n_members(&self) -> usize {
        self.members
    }

    fn sample_step(&self, _member: usize, obs: &Matrix, act: &Matrix, _rng: &mut StreamRng) -> Result<(Matrix, Vec<f64>)> {
        Ok(self.step_rows(obs, act))
    }

    fn mean_step(&self, obs: &Matrix, act: &Matrix) -> Result<Matrix> {
        Ok(self.step_rows(obs, act).0)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RolloutReport {
    pub produced: usize,
    /// Member chosen for each generated transition, step-major.
    pub members: Vec<usize>,
}

/// Starts `batch` rollouts at states drawn uniformly from `env_buffer` and
/// rolls each `k` steps under the model, picking an ensemble member uniformly
/// at random for every generated transition. Results go to `model_buffer`.
pub fn branched_rollout<M, P>(
    model: &M,
    policy: &P,
    env_buffer: &ReplayBuffer,
    model_buffer: &mut ReplayBuffer,
    k: u32,
    batch: usize,
    rng: &mut StreamRng,
) -> Result<RolloutReport>
where
    M: TransitionModel + ?Sized,
    P: ActionSource + ?Sized,
{
    if env_buffer.is_empty() {
        return Err(Error::usage("branched rollout needs a non-empty environment buffer"));
    }
    if batch == 0 || k == 0 {
        return Ok(RolloutReport::default());
    }
    let starts = env_buffer.sample_indices(rng, batch);
    let obs_dim = env_buffer.get(0).s.len();
    let mut obs = Matrix::zeros(batch, obs_dim);
    for (row, &i) in starts.iter().enumerate() {
        obs.row_mut(row).copy_from_slice(&env_buffer.get(i).s);
    }
    let n_members = model.n_members();
    let mut report = RolloutReport::default();
    for _ in 0..k {
        let act = policy.act(&obs, rng);
        let choice: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n_members)).collect();
        let mut next = Matrix::zeros(batch, obs_dim);
        let mut rewards = vec![0.0; batch];
        for m in 0..n_members {
            let rows: Vec<usize> = (0..batch).filter(|&i| choice[i] == m).collect();
            if rows.is_empty() {
                continue;
            }
            let (n, r) = model.sample_step(m, &obs.select_rows(&rows), &act.select_rows(&rows), rng)?;
            for (j, &i) in rows.iter().enumerate() {
                next.row_mut(i).copy_from_slice(n.row(j));
                rewards[i] = r[j];
            }
        }
        for i in 0..batch {
            model_buffer.push(Transition {
                s: obs.row(i).to_vec(),
                a: act.row(i).to_vec(),
                s_next: next.row(i).to_vec(),
                r: rewards[i],
                done: false,
                source: Source::Simulated,
            });
        }
        report.produced += batch;
        report.members.extend_from_slice(&choice);
        obs = next;
    }
    Ok(report)
}

/// Number of real transitions in a mixed batch: `⌈real_ratio · batch⌉`.
pub fn real_count(batch: usize, real_ratio: f64) -> usize {
    // The epsilon absorbs representation error such as 0.1 * 30 = 3.0000000000000004.
    ((real_ratio * batch as f64 - 1e-9).ceil().max(0.0) as usize).min(batch)
}

/// Mixed batch: `⌈real_ratio·batch⌉` real transitions, the rest simulated.
pub fn sample_mixed(
    env_buffer: &ReplayBuffer,
    model_buffer: &ReplayBuffer,
    batch: usize,
    real_ratio: f64,
    rng: &mut StreamRng,
) -> Result<Vec<Transition>> {
    if !(0.0..=1.0).contains(&real_ratio) {
        return Err(Error::config("real_ratio must lie in [0, 1]"));
    }
    let n_real = real_count(batch, real_ratio);
    let n_sim = batch - n_real;
    if n_real > 0 && env_buffer.is_empty() {
        return Err(Error::usage("environment buffer is empty"));
    }
    if n_sim > 0 && model_buffer.is_empty() {
        return Err(Error::usage("model buffer is empty"));
    }
    let mut out = Vec::with_capacity(batch);
    if n_real > 0 {
        out.extend(env_buffer.sample(rng, n_real)?);
    }
    if n_sim > 0 {
        out.extend(model_buffer.sample(rng, n_sim)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn tr(i: usize, source: Source) -> Transition {
        Transition {
            s: vec![i as f64],
            a: vec![0.0],
            s_next: vec![i as f64 + 1.0],
            r: 0.0,
            done: false,
            source,
        }
    }

    #[test]
    fn schedule_examples() {
        let s = RolloutSchedule::new(20, 100, 1, 15).unwrap();
        assert_eq!(schedule_eval(&s, 20), 1);
        assert_eq!(schedule_eval(&s, 150), 15);
        assert_eq!(schedule_eval(&s, 0), 1);
        assert_eq!(schedule_eval(&s, 60), 8);
        let c = RolloutSchedule::new(0, 10, 4, 4).unwrap();
        assert!((0..30).all(|e| c.eval(e) == 4));
        assert!(RolloutSchedule::new(5, 5, 1, 2).is_err());
        assert!(RolloutSchedule::new(1, 5, 3, 2).is_err());
    }

    #[test]
    fn fifo_eviction_drops_oldest() {
        let mut b = ReplayBuffer::new(10);
        for i in 0..13 {
            b.push(tr(i, Source::Real));
        }
        assert_eq!(b.len(), 10);
        let kept: Vec<f64> = b.iter().map(|t| t.s[0]).collect();
        assert_eq!(kept, (3..13).map(|i| i as f64).collect::<Vec<_>>());
        b.set_capacity(4);
        assert_eq!(b.iter().map(|t| t.s[0]).collect::<Vec<_>>(), vec![9.0, 10.0, 11.0, 12.0]);
    }

    #[test]
    fn uniform_sampling_passes_chi_square() {
        let mut b = ReplayBuffer::new(100);
        for i in 0..100 {
            b.push(tr(i, Source::Real));
        }
        let mut r = rng::stream(11);
        let mut counts = [0usize; 100];
        for i in b.sample_indices(&mut r, 10_000) {
            counts[i] += 1;
        }
        let expected = 100.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99 degrees of freedom; 0.999 quantile is about 148.2.
        assert!(chi2 < 148.2, "chi2 = {chi2}");
    }

    #[test]
    fn mixed_batch_counts() {
        let mut real = ReplayBuffer::new(50);
        let mut sim = ReplayBuffer::new(50);
        for i in 0..20 {
            real.push(tr(i, Source::Real));
            sim.push(tr(i, Source::Simulated));
        }
        let mut r = rng::stream(0);
        let all_real = sample_mixed(&real, &sim, 64, 1.0, &mut r).unwrap();
        assert!(all_real.iter().all(|t| t.source == Source::Real));
        let all_sim = sample_mixed(&real, &sim, 64, 0.0, &mut r).unwrap();
        assert!(all_sim.iter().all(|t| t.source == Source::Simulated));
        let mixed = sample_mixed(&real, &sim, 256, 0.05, &mut r).unwrap();
        let n_real = mixed.iter().filter(|t| t.source == Source::Real).count();
        assert_eq!((n_real, mixed.len() - n_real), (13, 243));
        assert_eq!(real_count(30, 0.1), 3);

        let empty = ReplayBuffer::new(5);
        assert!(matches!(sample_mixed(&real, &empty, 8, 0.5, &mut r), Err(Error::Usage(_))));
        assert!(sample_mixed(&real, &empty, 8, 1.0, &mut r).is_ok());
    }
}
