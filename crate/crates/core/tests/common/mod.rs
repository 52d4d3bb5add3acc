//! Shared oracles for the integration tests.
#![allow(dead_code)]

use ampo::dyna::{ReplayBuffer, Transition};
use ampo::numcore::{Grads, Matrix, ParamStore};
use ampo::rng::{self, StreamRng};

/// Largest relative error between `grads` and central differences of `f`
/// over every entry of `params`. Entries whose analytic and numerical values
/// are both below `floor` are compared on the absolute scale `floor`.
pub fn fd_max_rel_error(params: &ParamStore, grads: &Grads, h: f64, floor: f64, f: impl Fn(&ParamStore) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let len = params.get(&name).unwrap().len();
        let g = grads.get(&name);
        for i in 0..len {
            let mut plus = params.clone();
            plus.get_mut(&name).unwrap().as_mut_slice()[i] += h;
            let mut minus = params.clone();
            minus.get_mut(&name).unwrap().as_mut_slice()[i] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let an = g.map_or(0.0, |m| m.as_slice()[i]);
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    worst
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, r: &mut StreamRng) -> Matrix {
    Matrix::from_vec(rows, cols, rng::normals(r, rows * cols).into_iter().map(|x| x * scale).collect())
}

/// W1 between two 1-D empirical distributions of equal size: mean absolute
/// difference of sorted samples.
pub fn quantile_w1(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Linear-Gaussian system `s' = A s + B a + σ ξ`, reward `c·s`.
pub struct LinearSystem {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Vec<f64>,
    pub noise: f64,
}

impl LinearSystem {
    pub fn standard(noise: f64) -> Self {
        LinearSystem {
            a: Matrix::from_rows(&[vec![0.9, 0.1], vec![-0.2, 0.8]]),
            b: Matrix::from_rows(&[vec![0.5], vec![-0.3]]),
            c: vec![1.0, -0.5],
            noise,
        }
    }

    pub fn mean_next(&self, s: &[f64], u: &[f64]) -> Vec<f64> {
        (0..s.len())
            .map(|i| {
                (0..s.len()).map(|j| self.a.get(i, j) * s[j]).sum::<f64>()
                    + (0..u.len()).map(|j| self.b.get(i, j) * u[j]).sum::<f64>()
            })
            .collect()
    }

    /// `n` transitions from independent standard-normal states and actions.
    pub fn buffer(&self, n: usize, seed: u64) -> ReplayBuffer {
        let mut r = rng::stream(seed);
        let mut buf = ReplayBuffer::new(n);
        for _ in 0..n {
            let s = rng::normals(&mut r, 2);
            let u = rng::normals(&mut r, 1);
            let m = self.mean_next(&s, &u);
            let next: Vec<f64> = m.iter().map(|x| x + self.noise * rng::normal(&mut r)).collect();
            let rew = self.c.iter().zip(&s).map(|(c, x)| c * x).sum();
            buf.push(Transition::real(s, u, next, rew, false));
        }
        buf
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Forward pass of one row through `w{l}`, `b{l}` with explicit loops.
/// `acts[l]` is applied after layer `l`.
pub fn scripted_forward(params: &ParamStore, acts: &[fn(f64) -> f64], x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (l, act) in acts.iter().enumerate() {
        let w = params.get(&format!("w{l}")).unwrap();
        let b = params.get(&format!("b{l}")).unwrap();
        h = (0..w.cols())
            .map(|j| act((0..w.rows()).map(|i| h[i] * w.get(i, j)).sum::<f64>() + b.get(0, j)))
            .collect();
    }
    h
}

pub fn ident(x: f64) -> f64 {
    x
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}
