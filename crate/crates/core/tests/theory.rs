use ampo::theory::{lemma1_check, normalized_return, occupancy, random_instance, state_values, tv_distance, TabularMDP};

/// `(1 − γ) Σ_{t ≤ 200} γᵗ μ₀ P_πᵗ` by repeated vector-matrix products.
fn power_series(mdp: &TabularMDP, pi: &ampo::theory::TabularPolicy) -> Vec<f64> {
    let n = mdp.n_states;
    let mut dist = mdp.init_dist.clone();
    let mut acc = vec![0.0; n];
    let mut g = 1.0;
    for _ in 0..=200 {
        for s in 0..n {
            acc[s] += (1.0 - mdp.gamma) * g * dist[s];
        }
        let mut next = vec![0.0; n];
        for s in 0..n {
            for a in 0..mdp.n_actions {
                for s2 in 0..n {
                    next[s2] += dist[s] * pi.p(s, a) * mdp.t(s, a, s2);
                }
            }
        }
        dist = next;
        g *= mdp.gamma;
    }
    acc
}

#[test]
fn occupancy_matches_truncated_power_series() {
    for seed in 0..5 {
        let inst = random_instance(seed, 6, 3, 0.0, 0.9).unwrap();
        let occ = occupancy(&inst.truth, &inst.pi).unwrap();
        let want = power_series(&inst.truth, &inst.pi);
        for (a, b) in occ.state.iter().zip(&want) {
            assert!((a - b).abs() < 1e-8, "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn normalized_return_agrees_with_policy_evaluation() {
    let inst = random_instance(11, 7, 4, 0.0, 0.95).unwrap();
    let occ = occupancy(&inst.truth, &inst.pi).unwrap();
    let v = state_values(&inst.truth, &inst.pi).unwrap();
    let via_values: f64 = (1.0 - 0.95) * inst.truth.init_dist.iter().zip(&v).map(|(m, v)| m * v).sum::<f64>();
    assert!((normalized_return(&inst.truth, &occ) - via_values).abs() < 1e-12);
}

#[test]
fn tv_is_half_l1() {
    let p = [0.1, 0.25, 0.4, 0.25];
    let q = [0.3, 0.3, 0.1, 0.3];
    let want = 0.5 * (0.2 + 0.05 + 0.3 + 0.05);
    assert!((tv_distance(&p, &q).unwrap() - want).abs() < 1e-12);
}

#[test]
fn exact_model_reduces_to_policy_shift_bound() {
    for seed in 0..50 {
        let inst = random_instance(100 + seed, 5, 3, 0.0, 0.9).unwrap();
        assert_eq!(inst.truth.transition, inst.model.transition);
        let real = power_series(&inst.truth, &inst.pi_d);
        let sim = power_series(&inst.truth, &inst.pi);
        let rho = |nu: &[f64], pi: &ampo::theory::TabularPolicy| -> Vec<f64> {
            (0..5).flat_map(|s| (0..3).map(move |a| (s, a))).map(|(s, a)| nu[s] * pi.p(s, a)).collect()
        };
        let tv = tv_distance(&rho(&real, &inst.pi_d), &rho(&sim, &inst.pi)).unwrap();
        let checks = lemma1_check(&inst.truth, &inst.model, &inst.pi, &inst.pi_d).unwrap();
        for (s2, c) in checks.iter().enumerate() {
            let cmax = (0..5).flat_map(|s| (0..3).map(move |a| (s, a))).map(|(s, a)| inst.model.t(s, a, s2)).fold(0.0, f64::max);
            let rhs = 2.0 * 0.9 * cmax * tv;
            assert!((c.rhs - rhs).abs() < 1e-8, "seed {seed} state {s2}: rhs {} vs {rhs}", c.rhs);
            assert!((real[s2] - sim[s2]).abs() <= rhs + 1e-9);
            assert!(c.holds);
        }
    }
}
