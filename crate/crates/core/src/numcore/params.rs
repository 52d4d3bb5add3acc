use std::collections::BTreeMap;

use super::matrix::Matrix;
use super::tape::{Gradients, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    value: Matrix,
    m: Matrix,
    v: Matrix,
    step: u64,
}

/// Named parameters plus their Adam moment accumulators.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    slots: BTreeMap<String, Slot>,
}

/// Per-parameter gradient matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grads(pub BTreeMap<String, Matrix>);

impl Grads {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.0.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, g: Matrix) {
        self.0.insert(name.into(), g);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.0.iter()
    }

    /// Sum of `other` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: &Grads) {
        for (k, g) in &other.0 {
            match self.0.get_mut(k) {
                Some(existing) => existing.add_assign(g),
                None => {
                    self.0.insert(k.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.0.values_mut() {
            for x in g.as_mut_slice() {
                *x *= c;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.0
            .values()
            .map(|g| g.as_slice().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Parameter handles bound onto one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    /// Reads every parameter's adjoint; parameters the output does not depend
    /// on get zero gradients.
    pub fn collect(&self, tape: &Tape, grads: &Gradients) -> Grads {
        let mut out = Grads::default();
        for (name, &v) in &self.vars {
            let g = match grads.get(v) {
                Some(a) => tape.value(a).clone(),
                None => {
                    let (r, c) = tape.value(v).shape();
                    Matrix::zeros(r, c)
                }
            };
            out.insert(name.clone(), g);
        }
        out
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter. Panics on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        let name = name.into();
        let (r, c) = value.shape();
        let prev = self.slots.insert(
            name.clone(),
            Slot {
                value,
                m: Matrix::zeros(r, c),
                v: Matrix::zeros(r, c),
                step: 0,
            },
        );
        assert!(prev.is_none(), "duplicate parameter `{name}`");
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.slots.get_mut(name).map(|s| &mut s.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.slots.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.slots.iter().map(|(k, s)| (k, &s.value))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    /// Optimizer step counter for one parameter.
    pub fn step_count(&self, name: &str) -> Option<u64> {
        self.slots.get(name).map(|s| s.step)
    }

    /// Places every parameter on `tape`, as variables when `trainable` and as
    /// constants otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .slots
            .iter()
            .map(|(k, s)| {
                let v = if trainable {
                    tape.variable(s.value.clone())
                } else {
                    tape.constant(s.value.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Replaces values from `other` for every name both stores share; moment
    /// accumulators are reset.
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        for (k, s) in self.slots.iter_mut() {
            if let Some(o) = other.slots.get(k) {
                s.value = o.value.clone();
                let (r, c) = s.value.shape();
                s.m = Matrix::zeros(r, c);
                s.v = Matrix::zeros(r, c);
                s.step = 0;
            }
        }
    }

    /// Copy of the values with fresh optimizer state.
    pub fn fresh_copy(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, s) in &self.slots {
            out.insert(k.clone(), s.value.clone());
        }
        out
    }

    /// Polyak averaging: `self ← (1 − tau)·self + tau·source`.
    pub fn soft_update_from(&mut self, source: &ParamStore, tau: f64) {
        for (k, s) in self.slots.iter_mut() {
            let src = &source.slots[k].value;
            if tau == 1.0 {
                s.value = src.clone();
            } else {
                for (t, &o) in s.value.as_mut_slice().iter_mut().zip(src.as_slice()) {
                    *t = (1.0 - tau) * *t + tau * o;
                }
            }
        }
    }

    /// Negates a parameter together with its first Adam moment, so the
    /// optimizer continues as if it had been trained at the negated value.
    pub fn negate(&mut self, name: &str) -> Result<()> {
        let s = self.slots.get_mut(name).ok_or_else(|| Error::usage(format!("no parameter `{name}`")))?;
        s.value = s.value.map(|x| -x);
        s.m = s.m.map(|x| -x);
        Ok(())
    }

    /// Copy with every value transformed element-wise and fresh optimizer state.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, s) in &self.slots {
            out.insert(k.clone(), s.value.map(&f));
        }
        out
    }

    /// Values only, for bitwise comparisons.
    pub fn values_equal(&self, other: &ParamStore) -> bool {
        self.slots.len() == other.slots.len()
            && self
                .slots
                .iter()
                .all(|(k, s)| other.slots.get(k).is_some_and(|o| o.value == s.value))
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter in `params`.
pub fn adam_step(params: &mut ParamStore, grads: &Grads, opt: &Adam) -> Result<()> {
    for (name, slot) in &params.slots {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::training(name.clone(), "missing gradient"))?;
        if g.shape() != slot.value.shape() {
            return Err(Error::training(name.clone(), "gradient shape mismatch"));
        }
        if !g.is_finite() {
            return Err(Error::training(name.clone(), "non-finite gradient"));
        }
    }
    for (name, slot) in params.slots.iter_mut() {
        let g = &grads.0[name];
        slot.step += 1;
        let t = slot.step as i32;
        let bc1 = 1.0 - opt.beta1.powi(t);
        let bc2 = 1.0 - opt.beta2.powi(t);
        let m = slot.m.as_mut_slice();
        let v = slot.v.as_mut_slice();
        let w = slot.value.as_mut_slice();
        for i in 0..w.len() {
            let gi = g.as_slice()[i];
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * gi;
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            w[i] -= opt.lr * mhat / (vhat.sqrt() + opt.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_store(x: f64, y: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("theta", Matrix::row_vector(&[x, y]));
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = quad_store(1.0, -2.0);
        let mut g = Grads::default();
        g.insert("theta", Matrix::zeros(1, 2));
        adam_step(&mut p, &g, &Adam::new(0.1)).unwrap();
        assert_eq!(p.get("theta").unwrap().as_slice(), &[1.0, -2.0]);
        assert_eq!(p.step_count("theta"), Some(1));
    }

    #[test]
    fn single_step_descends_on_square() {
        let mut p = ParamStore::new();
        p.insert("theta", Matrix::scalar(1.0));
        let mut g = Grads::default();
        g.insert("theta", Matrix::scalar(2.0));
        adam_step(&mut p, &g, &Adam::new(0.1)).unwrap();
        assert!(p.get("theta").unwrap().item() < 1.0);
    }

    #[test]
    fn ten_steps_match_scripted_update() {
        // f(x, y) = (x - 1)^2 + 4 (y + 0.5)^2
        let grad = |x: f64, y: f64| (2.0 * (x - 1.0), 8.0 * (y + 0.5));
        let mut p = quad_store(3.0, 2.0);
        let opt = Adam::new(0.1);
        for _ in 0..10 {
            let w = p.get("theta").unwrap().as_slice().to_vec();
            let (gx, gy) = grad(w[0], w[1]);
            let mut g = Grads::default();
            g.insert("theta", Matrix::row_vector(&[gx, gy]));
            adam_step(&mut p, &g, &opt).unwrap();
        }
        // Independent scalar re-statement of the update rule.
        let (mut x, mut y) = (3.0f64, 2.0f64);
        let (mut mx, mut my, mut vx, mut vy) = (0.0, 0.0, 0.0, 0.0);
        for t in 1..=10 {
            let (gx, gy) = grad(x, y);
            mx = 0.9 * mx + 0.1 * gx;
            my = 0.9 * my + 0.1 * gy;
            vx = 0.999 * vx + 0.001 * gx * gx;
            vy = 0.999 * vy + 0.001 * gy * gy;
            let c1 = 1.0 - 0.9f64.powi(t);
            let c2 = 1.0 - 0.999f64.powi(t);
            x -= 0.1 * (mx / c1) / ((vx / c2).sqrt() + 1e-8);
            y -= 0.1 * (my / c1) / ((vy / c2).sqrt() + 1e-8);
        }
        let w = p.get("theta").unwrap().as_slice();
        assert!((w[0] - x).abs() < 1e-12 && (w[1] - y).abs() < 1e-12);
        let start = ((3.0f64 - 1.0).powi(2) + (2.5f64).powi(2)).sqrt();
        let end = ((w[0] - 1.0).powi(2) + (w[1] + 0.5).powi(2)).sqrt();
        assert!(end < start);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = quad_store(0.0, 0.0);
        let mut g = Grads::default();
        g.insert("theta", Matrix::row_vector(&[f64::NAN, 0.0]));
        match adam_step(&mut p, &g, &Adam::new(0.1)) {
            Err(Error::Training { param, .. }) => assert_eq!(param, "theta"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn soft_update_with_unit_rate_copies_exactly() {
        let src = quad_store(0.123456789, -9.87654321);
        let mut dst = quad_store(5.0, 5.0);
        dst.soft_update_from(&src, 1.0);
        assert!(dst.values_equal(&src));
    }
}
