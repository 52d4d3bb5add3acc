mod common;

use ampo::dyna::{ReplayBuffer, Transition};
use ampo::dynamics::{gaussian_nll, nll_loss, DynamicsEnsemble, GaussianHead, ModelConfig, SplitNetwork};
use ampo::numcore::Matrix;
use ampo::rng;

use common::{random_matrix, scripted_forward};

fn small_cfg() -> ModelConfig {
    ModelConfig { ensemble_size: 2, hidden: vec![16, 16], max_steps: 800, validation_interval: 20, ..ModelConfig::default() }
}

#[test]
fn loss_matches_scripted_nll() {
    let mut r = rng::stream(2);
    let member = SplitNetwork::new(5, 4, &small_cfg(), &mut r);
    let x = random_matrix(7, 5, 1.0, &mut r);
    let y = random_matrix(7, 4, 1.0, &mut r);
    let (mean, lv) = member.predict_normalized(&x);
    let mut want = 0.0;
    for i in 0..7 {
        for d in 0..4 {
            let e = mean.get(i, d) - y.get(i, d);
            want += e * e / lv.get(i, d).exp() + lv.get(i, d);
        }
    }
    want /= 7.0;
    let res = nll_loss(&member, &x, &y, 0.0).unwrap();
    assert!((res.nll - want).abs() < 1e-10, "{} vs {want}", res.nll);
    assert!((gaussian_nll(&mean, &lv, &y) - want).abs() < 1e-10);
}

#[test]
fn features_match_scripted_extractor() {
    let mut r = rng::stream(8);
    let member = SplitNetwork::new(3, 2, &small_cfg(), &mut r);
    let x = [0.2, -0.4, 1.3];
    let got = member.features(&Matrix::row_vector(&x));
    let want = scripted_forward(&member.extractor, &[f64::tanh, f64::tanh], &x);
    for (g, w) in got.as_slice().iter().zip(&want) {
        assert!((g - w).abs() < 1e-14);
    }
}

#[test]
fn head_samples_match_moments() {
    let head = GaussianHead { mean: vec![0.5, -1.0, 2.0], log_variance: vec![-1.0, 0.0, 0.7] };
    let n = 10_000;
    let mut r = rng::stream(12);
    let draws: Vec<Vec<f64>> = (0..n).map(|_| head.sample(&mut r)).collect();
    for (d, var) in head.variance().iter().enumerate() {
        let m = draws.iter().map(|x| x[d]).sum::<f64>() / n as f64;
        let v = draws.iter().map(|x| (x[d] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((m - head.mean[d]).abs() < 4.0 * (var / n as f64).sqrt(), "dim {d} mean {m}");
        // Sample variance has standard error var·√(2/(n−1)).
        assert!((v - var).abs() < 4.0 * var * (2.0 / (n - 1) as f64).sqrt(), "dim {d} var {v} vs {var}");
    }
    let cov = draws.iter().map(|x| (x[0] - 0.5) * (x[1] + 1.0)).sum::<f64>() / n as f64;
    assert!(cov.abs() < 4.0 * (head.variance()[0] * head.variance()[1] / n as f64).sqrt());
}

#[test]
fn constant_system_predicts_zero_change() {
    let mut r = rng::stream(5);
    let mut buf = ReplayBuffer::new(2000);
    for _ in 0..2000 {
        let s = rng::normals(&mut r, 3);
        let a = rng::normals(&mut r, 1);
        let rew = rng::normal(&mut r);
        buf.push(Transition::real(s.clone(), a, s, rew, false));
    }
    let mut model = DynamicsEnsemble::new(3, 1, &small_cfg(), 1).unwrap();
    model.train(&buf, 0.1, &mut rng::stream(6)).unwrap();
    for i in 0..20 {
        let t = buf.get(i);
        for m in 0..model.len() {
            let head = model.predict(m, &t.s, &t.a).unwrap();
            for d in 0..3 {
                let sd = (0.5 * head.log_variance[d]).exp();
                assert!(head.mean[d].abs() <= 3.0 * sd, "member {m} dim {d}: mean {} sd {sd}", head.mean[d]);
            }
        }
    }
}

#[test]
fn bootstrap_leaves_out_about_one_over_e() {
    let mut r = rng::stream(3);
    let mut buf = ReplayBuffer::new(4000);
    for _ in 0..4000 {
        let s = rng::normals(&mut r, 2);
        let next: Vec<f64> = s.iter().map(|x| 0.9 * x).collect();
        buf.push(Transition::real(s, vec![0.0], next, 0.0, false));
    }
    let cfg = ModelConfig { ensemble_size: 3, hidden: vec![4], max_steps: 1, ..ModelConfig::default() };
    let mut model = DynamicsEnsemble::new(2, 1, &cfg, 0).unwrap();
    let report = model.train(&buf, 0.1, &mut rng::stream(4)).unwrap();
    let pool = report.n_train;
    for boot in &model.bootstrap_assignments {
        assert_eq!(boot.len(), pool);
        let mut seen = std::collections::BTreeSet::new();
        seen.extend(boot.iter().copied());
        let missing = 1.0 - seen.len() as f64 / pool as f64;
        // Binomial-style spread of the left-out fraction is about √(e⁻¹(1 − e⁻¹)/n).
        let sd = ((-1f64).exp() * (1.0 - (-1f64).exp()) / pool as f64).sqrt();
        assert!((missing - (-1f64).exp()).abs() < 5.0 * sd, "left out {missing}");
    }
}
