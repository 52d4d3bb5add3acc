use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::params::{Bound, Grads, ParamStore};
use super::tape::{self, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Softplus,
    /// Piecewise linear. Usable for first-order training only.
    Relu,
}

impl Activation {
    pub fn is_smooth(self) -> bool {
        !matches!(self, Activation::Relu)
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Softplus => tape::softplus(x),
            Activation::Relu => x.clamp(0.0, f64::INFINITY),
        }
    }

    pub fn on_tape(self, t: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Tanh => t.tanh(x),
            Activation::Softplus => t.softplus(x),
            Activation::Relu => t.relu(x),
        }
    }
}

/// Layer widths plus one activation per weight layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activations: Vec<Activation>,
}

pub(crate) fn weight_name(layer: usize) -> String {
    format!("w{layer}")
}

pub(crate) fn bias_name(layer: usize) -> String {
    format!("b{layer}")
}

impl MlpSpec {
    /// `hidden` on every hidden layer, identity on the output layer.
    pub fn new(layer_sizes: &[usize], hidden: Activation) -> Self {
        let n = layer_sizes.len().saturating_sub(1);
        let mut activations = vec![hidden; n];
        if let Some(last) = activations.last_mut() {
            *last = Activation::Identity;
        }
        MlpSpec {
            layer_sizes: layer_sizes.to_vec(),
            activations,
        }
    }

    /// Every layer uses `act`, including the last one. Used for feature
    /// extractors whose output is a hidden representation.
    pub fn uniform(layer_sizes: &[usize], act: Activation) -> Self {
        MlpSpec {
            layer_sizes: layer_sizes.to_vec(),
            activations: vec![act; layer_sizes.len().saturating_sub(1)],
        }
    }

    pub fn n_layers(&self) -> usize {
        self.activations.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::config("an MLP needs at least input and output layers"));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::config("layer sizes must be positive"));
        }
        if self.activations.len() != self.layer_sizes.len() - 1 {
            return Err(Error::config("one activation per weight layer is required"));
        }
        Ok(())
    }

    pub fn is_smooth(&self) -> bool {
        self.activations.iter().all(|a| a.is_smooth())
    }

    /// Xavier-uniform weights, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut p = ParamStore::new();
        for l in 0..self.n_layers() {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            p.insert(weight_name(l), Matrix::from_vec(fan_in, fan_out, w));
            p.insert(bias_name(l), Matrix::zeros(1, fan_out));
        }
        p
    }

    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        self.validate()?;
        for l in 0..self.n_layers() {
            let want_w = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let want_b = (1, self.layer_sizes[l + 1]);
            let w = params.get(&weight_name(l)).ok_or_else(|| Error::Shape {
                layer: l,
                detail: "missing weight".into(),
            })?;
            let b = params.get(&bias_name(l)).ok_or_else(|| Error::Shape {
                layer: l,
                detail: "missing bias".into(),
            })?;
            if w.shape() != want_w || b.shape() != want_b {
                return Err(Error::Shape {
                    layer: l,
                    detail: format!(
                        "expected weight {want_w:?} and bias {want_b:?}, got {:?} and {:?}",
                        w.shape(),
                        b.shape()
                    ),
                });
            }
        }
        Ok(())
    }

    fn check_input(&self, input: &Matrix) -> Result<()> {
        if input.cols() != self.input_dim() {
            return Err(Error::Shape {
                layer: 0,
                detail: format!(
                    "input has {} columns, network expects {}",
                    input.cols(),
                    self.input_dim()
                ),
            });
        }
        Ok(())
    }

    /// Tape-free evaluation. Uses the same kernels as [`MlpSpec::on_tape`],
    /// so the two agree bit for bit.
    pub fn eval(&self, params: &ParamStore, input: &Matrix) -> Result<Matrix> {
        self.check_params(params)?;
        self.check_input(input)?;
        Ok(self.eval_unchecked(params, input))
    }

    pub(crate) fn eval_unchecked(&self, params: &ParamStore, input: &Matrix) -> Matrix {
        let mut x = input.clone();
        for (l, act) in self.activations.iter().enumerate() {
            let w = params.get(&weight_name(l)).expect("checked");
            let b = params.get(&bias_name(l)).expect("checked");
            x = x.matmul(w).add_row(b);
            if *act != Activation::Identity {
                x = x.map(|v| act.apply(v));
            }
        }
        x
    }

    /// Records the forward pass on `t` using already-bound parameters.
    pub fn on_tape(&self, t: &mut Tape, params: &Bound, input: Var) -> Var {
        let mut x = input;
        for (l, act) in self.activations.iter().enumerate() {
            let w = params.var(&weight_name(l));
            let b = params.var(&bias_name(l));
            let z = t.matmul(x, w);
            let z = t.add_row(z, b);
            x = act.on_tape(t, z);
        }
        x
    }
}

/// A recorded forward pass that can be swept backward once.
#[derive(Debug)]
pub struct ForwardPass {
    tape: Tape,
    params: Bound,
    input: Var,
    output: Var,
    consumed: bool,
}

impl ForwardPass {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }
}

/// Forward pass that records a tape for a later [`backward`].
pub fn forward(spec: &MlpSpec, params: &ParamStore, input: &Matrix) -> Result<(Matrix, ForwardPass)> {
    spec.check_params(params)?;
    spec.check_input(input)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let x = tape.variable(input.clone());
    let y = spec.on_tape(&mut tape, &bound, x);
    let out = tape.value(y).clone();
    Ok((
        out,
        ForwardPass {
            tape,
            params: bound,
            input: x,
            output: y,
            consumed: false,
        },
    ))
}

/// Gradients of `⟨adjoint, output⟩` with respect to every parameter and the input.
pub fn backward(pass: &mut ForwardPass, output_adjoint: &Matrix) -> Result<(Grads, Matrix)> {
    if pass.consumed {
        return Err(Error::usage("tape already swept backward"));
    }
    pass.consumed = true;
    let g = pass.tape.gradients(pass.output, Some(output_adjoint.clone()))?;
    let grads = pass.params.collect(&pass.tape, &g);
    let dx = match g.get(pass.input) {
        Some(v) => pass.tape.value(v).clone(),
        None => Matrix::zeros(pass.tape.value(pass.input).rows(), pass.tape.value(pass.input).cols()),
    };
    Ok((grads, dx))
}

/// Records `‖∇ₓ f(x)‖₂` per row of `input` and the mean penalty
/// `(‖∇ₓ f‖ − 1)²` on `t`. Returns `(norms, penalty)`.
pub fn penalty_on_tape(spec: &MlpSpec, t: &mut Tape, params: &Bound, input: Var) -> Result<(Var, Var)> {
    if !spec.is_smooth() {
        return Err(Error::Unsupported(
            "gradient penalty needs a twice-differentiable network".into(),
        ));
    }
    if spec.output_dim() != 1 {
        return Err(Error::Unsupported("gradient penalty needs a scalar-output network".into()));
    }
    let out = spec.on_tape(t, params, input);
    let total = t.sum(out);
    let g = t.gradients(total, None)?;
    let dx = match g.get(input) {
        Some(v) => v,
        None => {
            let (r, c) = t.value(input).shape();
            t.constant(Matrix::zeros(r, c))
        }
    };
    let sq = t.square(dx);
    let row_sq = t.sum_cols(sq);
    // Keeps the norm differentiable where the input gradient vanishes.
    let row_sq = t.affine(row_sq, 1.0, 1e-12);
    let norms = t.sqrt(row_sq);
    let dev = t.affine(norms, 1.0, -1.0);
    let dev_sq = t.square(dev);
    let penalty = t.mean(dev_sq);
    Ok((norms, penalty))
}

/// Input-gradient norms of a scalar network at each row of `input`, the mean
/// penalty `(‖∇ₓ f‖ − 1)²`, and its exact parameter gradient.
pub fn input_gradient_norm_grad(
    spec: &MlpSpec,
    params: &ParamStore,
    input: &Matrix,
) -> Result<(Vec<f64>, f64, Grads)> {
    spec.check_params(params)?;
    spec.check_input(input)?;
    let mut t = Tape::new();
    let bound = params.bind(&mut t, true);
    let x = t.variable(input.clone());
    let (norms, penalty) = penalty_on_tape(spec, &mut t, &bound, x)?;
    let g = t.gradients(penalty, None)?;
    let grads = bound.collect(&t, &g);
    Ok((t.value(norms).as_slice().to_vec(), t.value(penalty).item(), grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_network_passes_input_through() {
        let spec = MlpSpec::new(&[2, 2], Activation::Identity);
        let mut p = ParamStore::new();
        p.insert("w0", Matrix::identity(2));
        p.insert("b0", Matrix::zeros(1, 2));
        let (out, _) = forward(&spec, &p, &Matrix::row_vector(&[1.0, 2.0])).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn zero_tanh_unit_outputs_zero() {
        let spec = MlpSpec::uniform(&[3, 1], Activation::Tanh);
        let mut p = ParamStore::new();
        p.insert("w0", Matrix::zeros(3, 1));
        p.insert("b0", Matrix::zeros(1, 1));
        let out = spec.eval(&p, &Matrix::row_vector(&[5.0, -2.0, 9.0])).unwrap();
        assert_eq!(out.item(), 0.0);
    }

    #[test]
    fn shape_error_names_layer() {
        let spec = MlpSpec::new(&[2, 4, 1], Activation::Tanh);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = spec.init_params(&mut rng);
        *p.get_mut("w1").unwrap() = Matrix::zeros(3, 1);
        match spec.eval(&p, &Matrix::zeros(1, 2)) {
            Err(Error::Shape { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("unexpected {other:?}"),
        }
        let p = spec.init_params(&mut rng);
        assert!(matches!(
            spec.eval(&p, &Matrix::zeros(1, 3)),
            Err(Error::Shape { layer: 0, .. })
        ));
    }

    #[test]
    fn reused_tape_is_rejected() {
        let spec = MlpSpec::new(&[2, 3, 1], Activation::Tanh);
        let p = spec.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let (_, mut pass) = forward(&spec, &p, &Matrix::zeros(4, 2)).unwrap();
        backward(&mut pass, &Matrix::filled(4, 1, 1.0)).unwrap();
        assert!(matches!(
            backward(&mut pass, &Matrix::filled(4, 1, 1.0)),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn eval_and_tape_forward_agree_bitwise() {
        let spec = MlpSpec::new(&[3, 8, 8, 2], Activation::Softplus);
        let p = spec.init_params(&mut ChaCha8Rng::seed_from_u64(3));
        let x = Matrix::from_vec(2, 3, vec![0.1, -0.4, 2.0, 1.5, 0.0, -3.0]);
        let (a, _) = forward(&spec, &p, &x).unwrap();
        assert_eq!(a, spec.eval(&p, &x).unwrap());
        assert_eq!(spec.eval(&p, &x).unwrap(), spec.eval(&p, &x).unwrap());
    }

    #[test]
    fn penalty_on_linear_critic() {
        let spec = MlpSpec::new(&[2, 1], Activation::Identity);
        let mut p = ParamStore::new();
        p.insert("w0", Matrix::from_vec(2, 1, vec![0.6, 0.8]));
        p.insert("b0", Matrix::scalar(0.3));
        let x = Matrix::from_vec(3, 2, vec![1.0, 2.0, -1.0, 0.5, 0.0, 0.0]);
        let (norms, pen, grads) = input_gradient_norm_grad(&spec, &p, &x).unwrap();
        assert!(norms.iter().all(|n| (n - 1.0).abs() < 1e-10));
        assert!(pen < 1e-20);
        assert!(grads.norm() < 1e-10);

        *p.get_mut("w0").unwrap() = Matrix::from_vec(2, 1, vec![1.2, 1.6]);
        let (_, pen, _) = input_gradient_norm_grad(&spec, &p, &x).unwrap();
        assert!((pen - 1.0).abs() < 1e-10);
    }

    #[test]
    fn penalty_rejects_relu() {
        let spec = MlpSpec::new(&[2, 4, 1], Activation::Relu);
        let p = spec.init_params(&mut ChaCha8Rng::seed_from_u64(5));
        assert!(matches!(
            input_gradient_norm_grad(&spec, &p, &Matrix::zeros(1, 2)),
            Err(Error::Unsupported(_))
        ));
    }
}
