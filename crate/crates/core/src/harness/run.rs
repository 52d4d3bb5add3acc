use std::path::Path;
use std::time::Instant;

use rand::Rng;

use super::config::{ModelKind, RunConfig};
use super::metrics::{CsvSink, MetricsRecord};
use crate::adapt::{self, AdaptOptimizers, Critic};
use crate::dyna::{branched_rollout, sample_mixed, GroundTruthModel, ReplayBuffer, Transition, TransitionModel};
use crate::dynamics::{DynamicsEnsemble, TrainingReport};
use crate::envs::{self, EnvSpec, EnvState};
use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::rng::{self, StreamRng};
use crate::sac::{sample_action, Deterministic, SacAgent};

/// Horizons reported as compounding errors.
pub const HORIZONS: [usize; 3] = [5, 10, 20];
/// Spacing of compounding-error start points along the evaluation episode.
const PROBE_STRIDE: usize = 20;

/// `(1/h) Σ ‖ŝ_i − s_i‖²` over an open-loop model rollout of `actions`
/// against the true trajectory, both started from `start`.
pub fn compounding_error<M: TransitionModel + ?Sized>(model: &M, env: &EnvSpec, start: &[f64], actions: &[Vec<f64>]) -> Result<f64> {
    if actions.is_empty() {
        return Err(Error::usage("compounding error needs at least one action"));
    }
    let mut s = start.to_vec();
    let mut s_hat = Matrix::row_vector(start);
    let mut total = 0.0;
    for a in actions {
        s = envs::transition(env, &s, a).0;
        s_hat = model.mean_step(&s_hat, &Matrix::row_vector(a))?;
        total += s.iter().zip(s_hat.as_slice()).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    }
    Ok(total / actions.len() as f64)
}

/// Mean `ε_h` over start points spaced along a recorded trajectory.
pub fn trajectory_compounding_error<M: TransitionModel + ?Sized>(
    model: &M,
    env: &EnvSpec,
    states: &[Vec<f64>],
    actions: &[Vec<f64>],
    h: usize,
) -> Result<f64> {
    let mut errs = Vec::new();
    let mut i = 0;
    while i + h <= actions.len() {
        errs.push(compounding_error(model, env, &states[i], &actions[i..i + h])?);
        i += PROBE_STRIDE;
    }
    if errs.is_empty() {
        return Ok(f64::NAN);
    }
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

enum Model {
    Learned(Box<DynamicsEnsemble>),
    Truth(GroundTruthModel),
}

impl Model {
    fn transition_model(&self) -> &dyn TransitionModel {
        match self {
            Model::Learned(m) => m.as_ref(),
            Model::Truth(m) => m,
        }
    }
}

struct Runner<'a> {
    cfg: &'a RunConfig,
    env: EnvSpec,
    seed: u64,
    agent: SacAgent,
    model: Model,
    env_buffer: ReplayBuffer,
    model_buffer: ReplayBuffer,
    state: EnvState,
    env_rng: StreamRng,
    act_rng: StreamRng,
    model_rng: StreamRng,
    sac_rng: StreamRng,
    critics: Vec<Critic>,
    probe: Option<Critic>,
    last_training: Option<TrainingReport>,
    last_penalty: f64,
    adaptation_steps: u64,
    events: u64,
    logs: u64,
    started: Instant,
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a RunConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let env = cfg.env_spec();
        let agent = SacAgent::new(&env, &cfg.sac, rng::derive(seed, 1))?;
        let model = match cfg.model_kind {
            ModelKind::Learned => {
                let mut e = DynamicsEnsemble::new(env.obs_dim, env.act_dim, &cfg.model, rng::derive(seed, 2))?;
                e.execution = cfg.execution;
                Model::Learned(Box::new(e))
            }
            ModelKind::GroundTruth => Model::Truth(GroundTruthModel::new(env.clone(), 1)),
        };
        let mut env_rng = rng::stream(rng::derive(seed, 3));
        let state = envs::reset_with(&env, &mut env_rng);
        Ok(Runner {
            cfg,
            agent,
            model,
            env_buffer: ReplayBuffer::new(cfg.env_buffer_capacity),
            model_buffer: ReplayBuffer::new(cfg.model_buffer_capacity(cfg.rollout_length.eval(0))),
            state,
            env_rng,
            act_rng: rng::stream(rng::derive(seed, 4)),
            model_rng: rng::stream(rng::derive(seed, 5)),
            sac_rng: rng::stream(rng::derive(seed, 6)),
            critics: Vec::new(),
            probe: None,
            last_training: None,
            last_penalty: f64::NAN,
            adaptation_steps: 0,
            events: 0,
            logs: 0,
            started: Instant::now(),
            env,
            seed,
        })
    }

    /// Algorithm step: act once in the environment and store the sample.
    fn env_step(&mut self, action: Vec<f64>) -> Result<()> {
        let out = envs::step(&self.env, &self.state, &action)?;
        // Time-limit truncation is not a terminal state.
        self.env_buffer
            .push(Transition::real(self.state.obs.clone(), action, out.next.obs.clone(), out.reward, false));
        self.state = if out.done { envs::reset_with(&self.env, &mut self.env_rng) } else { out.next };
        Ok(())
    }

    fn random_action(&mut self) -> Vec<f64> {
        (0..self.env.act_dim)
            .map(|i| self.act_rng.random_range(self.env.action_low[i]..=self.env.action_high[i]))
            .collect()
    }

    fn train_model(&mut self) -> Result<()> {
        if let Model::Learned(ens) = &mut self.model {
            let report = ens.train(&self.env_buffer, self.cfg.validation_fraction, &mut self.model_rng)?;
            self.last_training = Some(report);
        }
        Ok(())
    }

    /// Every-E block: model training, branched rollouts, adaptation.
    fn model_event(&mut self, epoch: u64) -> Result<()> {
        self.train_model()?;
        let k = self.cfg.rollout_length.eval(epoch).max(1);
        self.model_buffer.set_capacity(self.cfg.model_buffer_capacity(k));
        branched_rollout(
            self.model.transition_model(),
            &self.agent.policy,
            &self.env_buffer,
            &mut self.model_buffer,
            k,
            self.cfg.rollout_batch,
            &mut self.model_rng,
        )?;
        let acfg = &self.cfg.adaptation;
        if let Model::Learned(ens) = &mut self.model {
            if acfg.active_at(epoch) {
                let g2 = acfg.g2.eval(epoch) as usize;
                let real = ens.normalizer.apply(&inputs(&self.env_buffer));
                let sim = ens.normalizer.apply(&inputs(&self.model_buffer));
                let exec = ens.execution;
                let report = adapt::adapt_members(
                    &mut ens.members,
                    &mut self.critics,
                    &real,
                    &sim,
                    acfg,
                    g2,
                    rng::derive(self.seed, 1_000 + self.events),
                    exec,
                )?;
                self.adaptation_steps += g2 as u64;
                self.last_penalty = report.penalty;
                if report.aborted > 0 {
                    log::warn!("epoch {epoch}: {} member(s) left unadapted", report.aborted);
                }
            }
        }
        self.events += 1;
        Ok(())
    }

    fn policy_updates(&mut self) -> Result<()> {
        for _ in 0..self.cfg.policy_updates {
            let batch = sample_mixed(
                &self.env_buffer,
                &self.model_buffer,
                self.cfg.sac.batch_size,
                self.cfg.real_ratio,
                &mut self.sac_rng,
            )?;
            self.agent.update(&batch, &mut self.sac_rng)?;
        }
        Ok(())
    }

    /// Deterministic evaluation episodes; the first one's trajectory is kept
    /// for the compounding-error probe.
    fn evaluate(&mut self, r: &mut StreamRng) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut total = 0.0;
        let (mut states, mut actions) = (Vec::new(), Vec::new());
        let det = Deterministic(&self.agent.policy);
        for ep in 0..self.cfg.eval_episodes {
            let mut st = envs::reset_with(&self.env, r);
            loop {
                let a = crate::dyna::ActionSource::act(&det, &Matrix::row_vector(&st.obs), r).into_vec();
                if ep == 0 {
                    states.push(st.obs.clone());
                    actions.push(a.clone());
                }
                let out = envs::step(&self.env, &st, &a)?;
                total += out.reward;
                if out.done {
                    break;
                }
                st = out.next;
            }
        }
        Ok((total / self.cfg.eval_episodes as f64, states, actions))
    }

    /// Logging-only W1 estimate between member-0 features of real and
    /// simulated inputs, from a warm-started probe critic.
    fn w1_probe(&mut self, r: &mut StreamRng) -> Result<f64> {
        let Model::Learned(ens) = &self.model else { return Ok(f64::NAN) };
        if self.model_buffer.is_empty() || !ens.is_trained() || self.cfg.w1_probe_steps == 0 {
            return Ok(f64::NAN);
        }
        let member = &ens.members[0];
        let feats = |buf: &ReplayBuffer| member.features(&ens.normalizer.apply(&inputs(buf)));
        let (he, hm) = (feats(&self.env_buffer), feats(&self.model_buffer));
        let acfg = &self.cfg.adaptation;
        let critic = self
            .probe
            .get_or_insert_with(|| Critic::new(member.feature_dim(), &acfg.critic_hidden, &mut rng::stream(rng::derive(self.seed, 7))));
        let opts = AdaptOptimizers::from_config(acfg);
        adapt::fit_critic(critic, &he, &hm, self.cfg.w1_probe_steps, acfg.batch_size, acfg.alpha, &opts.critic, r)?;
        let n = acfg.batch_size.max(256);
        Ok(adapt::estimate_w1_metric(critic, &adapt::sample_rows(&he, n, r), &adapt::sample_rows(&hm, n, r)))
    }

    fn record(&mut self, real_step: u64, epoch: u64) -> Result<MetricsRecord> {
        let mut r = rng::stream(rng::derive(self.seed, 10_000 + self.logs));
        self.logs += 1;
        let (eval_return, states, actions) = self.evaluate(&mut r)?;
        let mut ce = [f64::NAN; 3];
        let trained = match &self.model {
            Model::Learned(e) => e.is_trained(),
            Model::Truth(_) => true,
        };
        if trained {
            for (slot, &h) in ce.iter_mut().zip(&HORIZONS) {
                *slot = trajectory_compounding_error(self.model.transition_model(), &self.env, &states, &actions, h)?;
            }
        }
        let w1 = self.w1_probe(&mut r)?;
        let (train_loss, val_loss) = self
            .last_training
            .as_ref()
            .map_or((f64::NAN, f64::NAN), |t| (t.mean_train_loss(), t.mean_val_loss()));
        Ok(MetricsRecord {
            real_step,
            epoch,
            eval_return,
            model_train_loss: train_loss,
            model_val_loss: val_loss,
            compounding_error_5: ce[0],
            compounding_error_10: ce[1],
            compounding_error_20: ce[2],
            w1_estimate: w1,
            gradient_penalty: self.last_penalty,
            adaptation_steps: self.adaptation_steps,
            wall_clock_seconds: if self.cfg.record_wall_clock { self.started.elapsed().as_secs_f64() } else { 0.0 },
        })
    }
}

/// `(s, a)` rows of a buffer.
fn inputs(buf: &ReplayBuffer) -> Matrix {
    let rows: Vec<Vec<f64>> = buf.iter().map(|t| t.s.iter().chain(&t.a).copied().collect()).collect();
    Matrix::from_rows(&rows)
}

/// Runs one seed end to end, handing each record to `sink` as it is produced.
pub fn run(cfg: &RunConfig, seed: u64, mut sink: impl FnMut(&MetricsRecord) -> Result<()>) -> Result<Vec<MetricsRecord>> {
    let mut rn = Runner::new(cfg, seed)?;
    let mut out = Vec::new();
    let mut emit = |rec: MetricsRecord, out: &mut Vec<MetricsRecord>| -> Result<()> {
        log::info!(
            "seed {seed} step {} return {:.1} val {:.3} ce10 {:.4}",
            rec.real_step,
            rec.eval_return,
            rec.model_val_loss,
            rec.compounding_error_10
        );
        sink(&rec)?;
        out.push(rec);
        Ok(())
    };

    // Random-policy data to pre-train the model.
    for _ in 0..cfg.pretrain_random_steps {
        let a = rn.random_action();
        rn.env_step(a)?;
    }
    let mut real_step = cfg.pretrain_random_steps;
    if cfg.model_kind == ModelKind::Learned {
        rn.train_model()?;
    }
    let rec = rn.record(real_step, 0)?;
    emit(rec, &mut out)?;

    for t in 0..cfg.total_real_steps {
        let epoch = t / cfg.train_every;
        let obs = rn.state.obs.clone();
        let (a, _) = sample_action(&rn.agent.policy, &obs, &mut rn.act_rng, false);
        rn.env_step(a)?;
        if t % cfg.train_every == 0 {
            rn.model_event(epoch)?;
        }
        rn.policy_updates()?;
        real_step += 1;
        if (t + 1) % cfg.log_interval == 0 {
            let rec = rn.record(real_step, (t + 1) / cfg.train_every)?;
            emit(rec, &mut out)?;
        }
    }
    Ok(out)
}

/// [`run`] streaming into a CSV at `path`; on failure the rows logged so far
/// stay in the file followed by an error line.
pub fn run_to_csv(cfg: &RunConfig, seed: u64, path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut sink = CsvSink::create(path)?;
    let result = run(cfg, seed, |r| sink.write(r));
    match result {
        Ok(v) => Ok(v),
        Err(e) => {
            sink.append_error(&e)?;
            Err(e)
        }
    }
}
