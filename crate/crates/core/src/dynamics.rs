//! Bootstrapped ensemble of probabilistic dynamics models.
//!
//! Each member is split into a feature extractor `f_g` (every hidden layer)
//! and a decoder `f_d` (one linear layer emitting a diagonal Gaussian over
//! `(Δs, r)`), so the prediction is exactly `f_d ∘ f_g`. The adaptation module
//! works on the extractor alone.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dyna::{ReplayBuffer, TransitionModel};
use crate::error::{Error, Result};
use crate::numcore::{adam_step, Activation, Adam, Bound, Grads, Matrix, MlpSpec, ParamStore, Tape, Var};
use crate::parallel::{self, Execution};
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Ensemble size B.
    pub ensemble_size: usize,
    /// Extractor hidden widths; the last one is the feature dimension.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub logvar_min: f64,
    pub logvar_max: f64,
    /// Weight on `Σ max_logvar − Σ min_logvar` in the training loss.
    pub logvar_bound_penalty: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Validation checks without improvement before training stops.
    pub patience: usize,
    /// Gradient steps between validation checks.
    pub validation_interval: usize,
    pub validation_fraction: f64,
    pub max_validation: usize,
    pub max_steps: usize,
    pub min_samples: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            ensemble_size: 5,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            logvar_min: -10.0,
            logvar_max: 0.5,
            logvar_bound_penalty: 0.01,
            lr: 1e-3,
            batch_size: 64,
            patience: 5,
            validation_interval: 1,
            validation_fraction: 0.1,
            max_validation: 256,
            max_steps: 500,
            min_samples: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size == 0 {
            return Err(Error::config("ensemble_size must be at least 1"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("model.hidden needs at least one positive width"));
        }
        if self.logvar_min >= self.logvar_max {
            return Err(Error::config("logvar_min must be below logvar_max"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("validation_fraction must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.patience == 0 || self.validation_interval == 0 {
            return Err(Error::config("batch_size, patience and validation_interval must be positive"));
        }
        if self.min_samples < 2 {
            return Err(Error::config("min_samples must be at least 2"));
        }
        Ok(())
    }
}

/// Per-dimension standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Statistics of the rows of `x`. Dimensions with (near) zero spread are
    /// left unnormalized.
    pub fn fit(x: &Matrix) -> Self {
        let n = x.rows().max(1) as f64;
        let mean: Vec<f64> = x.sum_rows().as_slice().iter().map(|s| s / n).collect();
        let mut var = vec![0.0; x.cols()];
        for r in 0..x.rows() {
            for (c, v) in x.row(r).iter().enumerate() {
                var[c] += (v - mean[c]).powi(2);
            }
        }
        let mut mean = mean;
        let std = var
            .iter()
            .enumerate()
            .map(|(c, v)| {
                let s = (v / n).sqrt();
                if s < 1e-12 {
                    log::warn!("dimension {c} has zero spread; leaving it unnormalized");
                    mean[c] = 0.0;
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Normalizer { mean, std }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        out
    }

    /// Maps a Gaussian `(mean, logvar)` in standardized units back to raw units.
    pub fn unapply_gaussian(&self, mean: &Matrix, logvar: &Matrix) -> (Matrix, Matrix) {
        let mut m = mean.clone();
        let mut lv = logvar.clone();
        for r in 0..m.rows() {
            for (c, v) in m.row_mut(r).iter_mut().enumerate() {
                *v = *v * self.std[c] + self.mean[c];
            }
            for (c, v) in lv.row_mut(r).iter_mut().enumerate() {
                *v += 2.0 * self.std[c].ln();
            }
        }
        (m, lv)
    }
}

/// Diagonal Gaussian over `(Δs, r)` for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHead {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

impl GaussianHead {
    pub fn variance(&self) -> Vec<f64> {
        self.log_variance.iter().map(|l| l.exp()).collect()
    }

    /// Raw draw over `(Δs, r)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_variance)
            .map(|(m, lv)| m + (0.5 * lv).exp() * rng::normal(rng))
            .collect()
    }
}

/// Draws `(s_next, r)` from `head` for current observation `s`.
pub fn sample_next(head: &GaussianHead, s: &[f64], seed: u64) -> (Vec<f64>, f64) {
    let mut r = rng::stream(seed);
    let d = head.sample(&mut r);
    let obs_dim = s.len();
    let next = s.iter().zip(&d[..obs_dim]).map(|(a, b)| a + b).collect();
    (next, d[obs_dim])
}

/// Gaussian NLL summed over dimensions and averaged over rows:
/// `Σ_d (μ − t)² e^{−lv} + lv`, averaged over the batch.
pub fn gaussian_nll(mean: &Matrix, logvar: &Matrix, target: &Matrix) -> f64 {
    let mut total = 0.0;
    for r in 0..mean.rows() {
        for c in 0..mean.cols() {
            let e = mean.get(r, c) - target.get(r, c);
            let lv = logvar.get(r, c);
            total += e * e * (-lv).exp() + lv;
        }
    }
    total / mean.rows() as f64
}

pub const MAX_LOGVAR: &str = "max_logvar";
pub const MIN_LOGVAR: &str = "min_logvar";

/// One ensemble member: `f_d ∘ f_g`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitNetwork {
    pub extractor_spec: MlpSpec,
    pub decoder_spec: MlpSpec,
    pub extractor: ParamStore,
    pub decoder: ParamStore,
}

/// Decoder outputs as tape nodes.
pub(crate) struct HeadVars {
    pub mean: Var,
    pub logvar: Var,
}

impl SplitNetwork {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut sizes = vec![in_dim];
        sizes.extend_from_slice(&cfg.hidden);
        let extractor_spec = MlpSpec::uniform(&sizes, cfg.activation);
        let feat = *cfg.hidden.last().expect("validated");
        let decoder_spec = MlpSpec::new(&[feat, 2 * out_dim], Activation::Identity);
        let extractor = extractor_spec.init_params(rng);
        let mut decoder = decoder_spec.init_params(rng);
        decoder.insert(MAX_LOGVAR, Matrix::filled(1, out_dim, cfg.logvar_max));
        decoder.insert(MIN_LOGVAR, Matrix::filled(1, out_dim, cfg.logvar_min));
        SplitNetwork { extractor_spec, decoder_spec, extractor, decoder }
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor_spec.output_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.decoder_spec.output_dim() / 2
    }

    /// `f_g` on already-normalized inputs.
    pub fn features(&self, x_norm: &Matrix) -> Matrix {
        self.extractor_spec.eval(&self.extractor, x_norm).expect("member shapes are fixed at construction")
    }

    /// `f_d` on features: `(mean, logvar)`.
    pub fn decode(&self, h: &Matrix) -> (Matrix, Matrix) {
        let out = self.decoder_spec.eval(&self.decoder, h).expect("member shapes are fixed at construction");
        let d = self.out_dim();
        let mean = out.slice_cols(0, d);
        let raw = out.slice_cols(d, 2 * d);
        let max = self.decoder.get(MAX_LOGVAR).expect("decoder bound");
        let min = self.decoder.get(MIN_LOGVAR).expect("decoder bound");
        let mut lv = raw.clone();
        for r in 0..lv.rows() {
            for (c, v) in lv.row_mut(r).iter_mut().enumerate() {
                *v = soft_clamp(*v, min.get(0, c), max.get(0, c));
            }
        }
        (mean, lv)
    }

    pub fn predict_normalized(&self, x_norm: &Matrix) -> (Matrix, Matrix) {
        self.decode(&self.features(x_norm))
    }

    /// Records the decoder, including the soft log-variance clamp, on a tape.
    pub(crate) fn decode_on_tape(&self, t: &mut Tape, dec: &Bound, h: Var) -> HeadVars {
        let out = self.decoder_spec.on_tape(t, dec, h);
        let d = self.out_dim();
        let n = t.value(h).rows();
        let mean = t.slice_cols(out, 0, d);
        let raw = t.slice_cols(out, d, 2 * d);
        let max = t.broadcast_rows(dec.var(MAX_LOGVAR), n);
        let min = t.broadcast_rows(dec.var(MIN_LOGVAR), n);
        let gap = t.sub(max, raw);
        let sp = t.softplus(gap);
        let upper = t.sub(max, sp);
        let above = t.sub(upper, min);
        let sp2 = t.softplus(above);
        let soft = t.add(min, sp2);
        let logvar = t.minimum(soft, max);
        HeadVars { mean, logvar }
    }

    /// Records the training loss: NLL averaged over rows plus the bound penalty.
    /// Returns `(total_loss, nll)` nodes.
    pub(crate) fn loss_on_tape(
        &self,
        t: &mut Tape,
        ext: &Bound,
        dec: &Bound,
        x: Var,
        target: Var,
        bound_penalty: f64,
    ) -> (Var, Var) {
        let h = self.extractor_spec.on_tape(t, ext, x);
        let head = self.decode_on_tape(t, dec, h);
        let n = t.value(x).rows() as f64;
        let err = t.sub(head.mean, target);
        let err2 = t.square(err);
        let neg_lv = t.neg(head.logvar);
        let inv_var = t.exp(neg_lv);
        let mahal = t.mul(err2, inv_var);
        let per = t.add(mahal, head.logvar);
        let s = t.sum(per);
        let nll = t.scale(s, 1.0 / n);
        let smax = t.sum(dec.var(MAX_LOGVAR));
        let smin = t.sum(dec.var(MIN_LOGVAR));
        let spread = t.sub(smax, smin);
        let reg = t.scale(spread, bound_penalty);
        let total = t.add(nll, reg);
        (total, nll)
    }
}

/// `min(min + softplus(max − softplus(max − x) − min), max)`; the outer
/// minimum only trims rounding overshoot near the upper bound.
fn soft_clamp(x: f64, min: f64, max: f64) -> f64 {
    use crate::numcore::Activation::Softplus;
    let upper = max - Softplus.apply(max - x);
    (min + Softplus.apply(upper - min)).min(max)
}

/// Loss value plus parameter gradients for one batch.
#[derive(Debug, Clone)]
pub struct NllResult {
    pub loss: f64,
    pub nll: f64,
    pub extractor_grads: Grads,
    pub decoder_grads: Grads,
}

/// Gaussian NLL of `member` on normalized inputs and `(Δs, r)` targets, with
/// gradients through both extractor and decoder.
pub fn nll_loss(member: &SplitNetwork, x_norm: &Matrix, target: &Matrix, bound_penalty: f64) -> Result<NllResult> {
    let mut t = Tape::new();
    let ext = member.extractor.bind(&mut t, true);
    let dec = member.decoder.bind(&mut t, true);
    let x = t.constant(x_norm.clone());
    let y = t.constant(target.clone());
    let (total, nll) = member.loss_on_tape(&mut t, &ext, &dec, x, y, bound_penalty);
    let loss = t.value(total).item();
    if !loss.is_finite() {
        return Err(Error::training(
            "dynamics",
            format!("non-finite model loss on a batch of {} rows", x_norm.rows()),
        ));
    }
    let g = t.gradients(total, None)?;
    Ok(NllResult {
        loss,
        nll: t.value(nll).item(),
        extractor_grads: ext.collect(&t, &g),
        decoder_grads: dec.collect(&t, &g),
    })
}

/// Per-member outcome of one training event.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberReport {
    pub train_loss: f64,
    pub val_before: f64,
    pub val_after: f64,
    pub steps: usize,
    pub regressed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    pub members: Vec<MemberReport>,
    pub n_train: usize,
    pub n_validation: usize,
}

impl TrainingReport {
    pub fn mean_train_loss(&self) -> f64 {
        self.members.iter().map(|m| m.train_loss).sum::<f64>() / self.members.len() as f64
    }

    pub fn mean_val_loss(&self) -> f64 {
        self.members.iter().map(|m| m.val_after).sum::<f64>() / self.members.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsEnsemble {
    pub members: Vec<SplitNetwork>,
    pub normalizer: Normalizer,
    /// Target `(Δs, r)` statistics; members predict in these units.
    pub target_normalizer: Normalizer,
    /// Indices into the environment-buffer snapshot used for each member's
    /// most recent bootstrap resample.
    pub bootstrap_assignments: Vec<Vec<usize>>,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub config: ModelConfig,
    pub execution: Execution,
    trained: bool,
}

/// Inputs `(s, a)` and targets `(s' − s, r)` for every transition in `buf`.
pub fn dataset(buf: &ReplayBuffer) -> (Matrix, Matrix) {
    let n = buf.len();
    let (od, ad) = (buf.get(0).s.len(), buf.get(0).a.len());
    let mut x = Matrix::zeros(n, od + ad);
    let mut y = Matrix::zeros(n, od + 1);
    for (i, t) in buf.iter().enumerate() {
        let xr = x.row_mut(i);
        xr[..od].copy_from_slice(&t.s);
        xr[od..].copy_from_slice(&t.a);
        let yr = y.row_mut(i);
        for d in 0..od {
            yr[d] = t.s_next[d] - t.s[d];
        }
        yr[od] = t.r;
    }
    (x, y)
}

/// Concatenates observation and action rows.
pub fn join_inputs(obs: &Matrix, act: &Matrix) -> Matrix {
    obs.concat_cols(act)
}

impl DynamicsEnsemble {
    pub fn new(obs_dim: usize, act_dim: usize, config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let members = (0..config.ensemble_size)
            .map(|i| {
                let mut r = rng::stream(rng::derive(seed, i as u64));
                SplitNetwork::new(obs_dim + act_dim, obs_dim + 1, config, &mut r)
            })
            .collect();
        Ok(DynamicsEnsemble {
            members,
            normalizer: Normalizer::identity(obs_dim + act_dim),
            target_normalizer: Normalizer::identity(obs_dim + 1),
            bootstrap_assignments: vec![Vec::new(); config.ensemble_size],
            obs_dim,
            act_dim,
            config: config.clone(),
            execution: Execution::default(),
            trained: false,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    fn check_member(&self, member: usize) -> Result<()> {
        if member >= self.members.len() {
            return Err(Error::usage(format!(
                "member index {member} out of range for an ensemble of {}",
                self.members.len()
            )));
        }
        Ok(())
    }

    /// Batch prediction `(mean, logvar)` over `(Δs, r)` for one member, in raw
    /// units.
    pub fn predict_batch(&self, member: usize, obs: &Matrix, act: &Matrix) -> Result<(Matrix, Matrix)> {
        self.check_member(member)?;
        let x = self.normalizer.apply(&join_inputs(obs, act));
        let (m, lv) = self.members[member].predict_normalized(&x);
        Ok(self.target_normalizer.unapply_gaussian(&m, &lv))
    }

    /// Gaussian head for a single `(s, a)`.
    pub fn predict(&self, member: usize, s: &[f64], a: &[f64]) -> Result<GaussianHead> {
        let (mean, lv) = self.predict_batch(member, &Matrix::row_vector(s), &Matrix::row_vector(a))?;
        Ok(GaussianHead {
            mean: mean.into_vec(),
            log_variance: lv.into_vec(),
        })
    }

    /// Extractor output for raw `(s, a)` rows.
    pub fn extract_features(&self, member: usize, obs: &Matrix, act: &Matrix) -> Result<Matrix> {
        self.check_member(member)?;
        let x = self.normalizer.apply(&join_inputs(obs, act));
        Ok(self.members[member].features(&x))
    }

    /// Mean NLL of one member on raw inputs and targets, measured in
    /// standardized target units like the training loss.
    pub fn member_loss(&self, member: usize, x_raw: &Matrix, target: &Matrix) -> f64 {
        let (m, lv) = self.members[member].predict_normalized(&self.normalizer.apply(x_raw));
        gaussian_nll(&m, &lv, &self.target_normalizer.apply(target))
    }

    /// Trains every member on its own bootstrap resample of `env_buffer`,
    /// early-stopping on a freshly drawn validation split.
    pub fn train(&mut self, env_buffer: &ReplayBuffer, validation_fraction: f64, rng: &mut StreamRng) -> Result<TrainingReport> {
        let cfg = self.config.clone();
        if env_buffer.len() < cfg.min_samples {
            return Err(Error::usage(format!(
                "model training needs at least {} samples, buffer has {}",
                cfg.min_samples,
                env_buffer.len()
            )));
        }
        let (x_raw, y_raw) = dataset(env_buffer);
        self.normalizer = Normalizer::fit(&x_raw);
        self.target_normalizer = Normalizer::fit(&y_raw);
        let x = self.normalizer.apply(&x_raw);
        let y = self.target_normalizer.apply(&y_raw);
        let n = x.rows();

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let n_val = ((validation_fraction * n as f64).round() as usize).clamp(1, cfg.max_validation.max(1)).min(n - 1);
        let (val_idx, pool) = order.split_at(n_val);
        let x_val = x.select_rows(val_idx);
        let y_val = y.select_rows(val_idx);

        let seeds: Vec<u64> = (0..self.members.len()).map(|_| rng.random()).collect();
        let mut work: Vec<(SplitNetwork, Vec<usize>, Option<Result<MemberReport>>)> = self
            .members
            .drain(..)
            .map(|m| (m, Vec::new(), None))
            .collect();
        parallel::for_each_mut(self.execution, &mut work, |i, (member, boot, report)| {
            let mut r = rng::stream(seeds[i]);
            *boot = (0..pool.len()).map(|_| pool[r.random_range(0..pool.len())]).collect();
            *report = Some(train_member(member, &x, &y, boot, &x_val, &y_val, &cfg, &mut r));
        });
        let mut reports = Vec::with_capacity(work.len());
        for (i, (member, boot, report)) in work.into_iter().enumerate() {
            self.members.push(member);
            self.bootstrap_assignments[i] = boot;
            reports.push(report.expect("every member trained")?);
        }
        self.trained = true;
        for (i, r) in reports.iter().enumerate() {
            if r.regressed {
                log::warn!("member {i}: validation loss regressed ({} -> {})", r.val_before, r.val_after);
            }
        }
        Ok(TrainingReport {
            members: reports,
            n_train: pool.len(),
            n_validation: n_val,
        })
    }
}

fn train_member(
    member: &mut SplitNetwork,
    x: &Matrix,
    y: &Matrix,
    boot: &[usize],
    x_val: &Matrix,
    y_val: &Matrix,
    cfg: &ModelConfig,
    rng: &mut StreamRng,
) -> Result<MemberReport> {
    let val_loss = |m: &SplitNetwork| {
        let (mean, lv) = m.predict_normalized(x_val);
        gaussian_nll(&mean, &lv, y_val)
    };
    let opt = Adam::new(cfg.lr);
    let val_before = val_loss(member);
    let mut best = val_before;
    let mut best_params = (member.extractor.clone(), member.decoder.clone());
    let mut stale = 0;
    let mut steps = 0;
    let bs = cfg.batch_size.min(boot.len()).max(1);
    while steps < cfg.max_steps {
        let idx: Vec<usize> = (0..bs).map(|_| boot[rng.random_range(0..boot.len())]).collect();
        let res = nll_loss(member, &x.select_rows(&idx), &y.select_rows(&idx), cfg.logvar_bound_penalty)?;
        adam_step(&mut member.extractor, &res.extractor_grads, &opt)?;
        adam_step(&mut member.decoder, &res.decoder_grads, &opt)?;
        steps += 1;
        if steps % cfg.validation_interval == 0 {
            let v = val_loss(member);
            if v < best {
                best = v;
                best_params = (member.extractor.clone(), member.decoder.clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    member.extractor = best_params.0;
    member.decoder = best_params.1;
    let val_after = val_loss(member);
    let sub: Vec<usize> = boot.iter().take(1024).copied().collect();
    let (mean, lv) = member.predict_normalized(&x.select_rows(&sub));
    let train_loss = gaussian_nll(&mean, &lv, &y.select_rows(&sub));
    Ok(MemberReport {
        train_loss,
        val_before,
        val_after,
        steps,
        regressed: val_after > val_before,
    })
}

impl TransitionModel for DynamicsEnsemble {
    fn n_members(&self) -> usize {
        self.members.len()
    }

    fn sample_step(&self, member: usize, obs: &Matrix, act: &Matrix, rng: &mut StreamRng) -> Result<(Matrix, Vec<f64>)> {
        let (mean, lv) = self.predict_batch(member, obs, act)?;
        let od = self.obs_dim;
        let mut next = obs.clone();
        let mut rewards = Vec::with_capacity(obs.rows());
        for r in 0..obs.rows() {
            for c in 0..=od {
                let draw = mean.get(r, c) + (0.5 * lv.get(r, c)).exp() * rng::normal(rng);
                if c < od {
                    next.row_mut(r)[c] += draw;
                } else {
                    rewards.push(draw);
                }
            }
        }
        Ok((next, rewards))
    }

    fn mean_step(&self, obs: &Matrix, act: &Matrix) -> Result<Matrix> {
        let od = self.obs_dim;
        let mut delta = Matrix::zeros(obs.rows(), od);
        for m in 0..self.members.len() {
            let (mean, _) = self.predict_batch(m, obs, act)?;
            delta.add_assign(&mean.slice_cols(0, od));
        }
        let k = self.members.len() as f64;
        Ok(obs.zip_map(&delta, |s, d| s + d / k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    #[test]
    fn nll_examples() {
        let t = Matrix::from_vec(1, 2, vec![0.3, -1.0]);
        assert_eq!(gaussian_nll(&t, &Matrix::zeros(1, 2), &t), 0.0);
        let lv = Matrix::from_vec(1, 2, vec![(E * E).ln(), (E * E).ln()]);
        assert!((gaussian_nll(&t, &lv, &t) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn logvar_clamp_holds_for_extreme_outputs() {
        let cfg = ModelConfig { hidden: vec![4], ..ModelConfig::default() };
        let mut m = SplitNetwork::new(2, 2, &cfg, &mut rng::stream(0));
        *m.decoder.get_mut("b0").unwrap() = Matrix::row_vector(&[0.0, 0.0, 1e6, -1e6]);
        let (_, lv) = m.predict_normalized(&Matrix::zeros(1, 2));
        for &l in lv.as_slice() {
            assert!(l >= cfg.logvar_min - 1e-9 && l <= cfg.logvar_max + 1e-9, "{l}");
        }
    }

    #[test]
    fn composition_is_exact() {
        let cfg = ModelConfig { hidden: vec![8, 6], ..ModelConfig::default() };
        let ens = DynamicsEnsemble::new(3, 1, &cfg, 4).unwrap();
        let obs = Matrix::from_vec(2, 3, vec![0.1, 0.2, 0.3, -1.0, 0.5, 2.0]);
        let act = Matrix::from_vec(2, 1, vec![0.7, -0.2]);
        let h = ens.extract_features(1, &obs, &act).unwrap();
        assert_eq!(h.cols(), 6);
        let (m1, l1) = ens.members[1].decode(&h);
        let (m2, l2) = ens.predict_batch(1, &obs, &act).unwrap();
        assert_eq!((m1, l1), (m2, l2));
        assert!(matches!(ens.predict(5, &[0.0; 3], &[0.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn degenerate_dimension_is_left_alone() {
        let x = Matrix::from_vec(3, 2, vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
        let n = Normalizer::fit(&x);
        assert_eq!(n.std[1], 1.0);
        assert_eq!(n.apply(&x).get(0, 1), 5.0);
    }

    #[test]
    fn sample_next_examples() {
        let head = GaussianHead { mean: vec![0.5, -1.0], log_variance: vec![-10.0, -10.0] };
        let (s, r) = sample_next(&head, &[1.0], 3);
        let tol = (-5.0f64).exp() * 6.0;
        assert!((s[0] - 1.5).abs() < tol && (r + 1.0).abs() < tol);
        assert_eq!(sample_next(&head, &[1.0], 3), sample_next(&head, &[1.0], 3));
    }
}
