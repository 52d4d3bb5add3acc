use std::path::Path;
use std::process::Command;

use ampo::dyna::{Scheduled, TransitionModel};
use ampo::envs::{self, EnvSpec};
use ampo::harness::{compounding_error, read_csv, run_to_csv, RunConfig};
use ampo::numcore::Matrix;
use ampo::rng::StreamRng;
use ampo::Result;

/// True point-mass dynamics plus a constant observation bias per step.
struct Biased {
    spec: EnvSpec,
    bias: Vec<f64>,
}

impl TransitionModel for Biased {
    fn n_members(&self) -> usize {
        1
    }

    fn sample_step(&self, _m: usize, obs: &Matrix, act: &Matrix, _r: &mut StreamRng) -> Result<(Matrix, Vec<f64>)> {
        Ok((self.mean_step(obs, act)?, vec![0.0; obs.rows()]))
    }

    fn mean_step(&self, obs: &Matrix, act: &Matrix) -> Result<Matrix> {
        let (mut next, _) = envs::transition(&self.spec, obs.row(0), act.row(0));
        next.iter_mut().zip(&self.bias).for_each(|(x, b)| *x += b);
        Ok(Matrix::row_vector(&next))
    }
}

#[test]
fn linear_bias_accumulates_in_closed_form() {
    let spec = EnvSpec::pointmass2d();
    let dt = spec.dt;
    let bias = vec![1e-3, -2e-3, 5e-4, 1e-3];
    let model = Biased { spec: spec.clone(), bias: bias.clone() };
    let start = [0.1, -0.2, 0.0, 0.0];
    for h in [1usize, 5, 10, 20] {
        let actions = vec![vec![0.1, -0.1]; h];
        let got = compounding_error(&model, &spec, &start, &actions).unwrap();
        // Errors obey e' = F e + b with position += dt · velocity'.
        let mut e = [0.0f64; 4];
        let mut total = 0.0;
        for _ in 0..h {
            let v = [e[2], e[3]];
            e = [e[0] + dt * v[0] + bias[0], e[1] + dt * v[1] + bias[1], v[0] + bias[2], v[1] + bias[3]];
            total += e.iter().map(|x| x * x).sum::<f64>();
        }
        let want = total / h as f64;
        assert!((got - want).abs() < 1e-12 * want.max(1e-12) + 1e-15, "h {h}: {got} vs {want}");
    }
}

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seeds = vec![3];
    cfg.pretrain_random_steps = 200;
    cfg.total_real_steps = 0;
    cfg.train_every = 100;
    cfg.rollout_batch = 50;
    cfg.policy_updates = 1;
    cfg.log_interval = 100;
    cfg.eval_episodes = 1;
    cfg.model.hidden = vec![8, 8];
    cfg.model.ensemble_size = 2;
    cfg.model.max_steps = 20;
    cfg.sac.hidden = vec![8, 8];
    cfg.sac.batch_size = 16;
    cfg.adaptation.critic_hidden = vec![8];
    cfg.adaptation.batch_size = 16;
    cfg.adaptation.g2 = Scheduled::Constant(2);
    cfg
}

#[test]
fn zero_loop_steps_log_only_pretraining() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("zero.csv");
    let recs = run_to_csv(&tiny(), 3, &path).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].real_step, 200);
    // NaN fields rule out direct equality.
    assert_eq!(format!("{:?}", read_csv(&path).unwrap()), format!("{recs:?}"));
}

fn ampo(out: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ampo")).env("AMPO_OUT_DIR", out).args(args).output().unwrap()
}

#[test]
fn cli_version_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ampo(dir.path(), &["version"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ampo "));

    assert_eq!(ampo(dir.path(), &["no-such-command"]).status.code(), Some(3));
    assert_eq!(ampo(dir.path(), &["train", "/nonexistent/config.toml"]).status.code(), Some(2));

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "bogus_key = 1\n").unwrap();
    let out = ampo(dir.path(), &["train", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error [config]"));

    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, tiny().to_toml().unwrap()).unwrap();
    let out = ampo(dir.path(), &["sweep", cfg.to_str().unwrap(), "--axis", "no_such_axis", "--values", "1,2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("valid axes"));
}

#[test]
fn cli_writes_into_env_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, tiny().to_toml().unwrap()).unwrap();
    let runs = dir.path().join("runs");
    let out = ampo(&runs, &["train", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_csv(&runs.join("tiny_seed3.csv")).unwrap().len(), 1);

    let out = ampo(&runs, &["theory-check", "--instances", "18"]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(runs.join("theory_slacks.csv")).unwrap();
    assert_eq!(text.lines().count(), 19);
}
