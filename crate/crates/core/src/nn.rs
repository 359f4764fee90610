//! Dense feed-forward networks with hand-written reverse-mode gradients.
//!
//! Batches are row-major: one sample per row. Layer `l` computes
//! `z = x W_l^T + b_l` with `W_l` shaped `(out, in)`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Linear => {}
        }
    }

    /// Multiplies `grad` in place by the activation derivative, given the
    /// activation's output `y`.
    fn backprop(self, y: &Array2<f64>, grad: &mut Array2<f64>) {
        match self {
            Activation::Relu => Zip::from(grad).and(y).for_each(|g, &y| {
                if y <= 0.0 {
                    *g = 0.0;
                }
            }),
            Activation::Tanh => Zip::from(grad).and(y).for_each(|g, &y| *g *= 1.0 - y * y),
            Activation::Linear => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    hidden: Activation,
    output: Activation,
}

/// Layer outputs recorded by [`Mlp::forward_cached`]; `outputs[0]` is the input.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub outputs: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.outputs.last().expect("cache holds at least the input")
    }
}

/// Parameter gradients with the same layout as the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|&v| v == 0.0))
            && self.biases.iter().all(|b| b.iter().all(|&v| v == 0.0))
    }
}

impl Mlp {
    /// Uniform fan-in initialisation: every parameter of a layer with `n`
    /// inputs is drawn from `U(-1/sqrt(n), 1/sqrt(n))`.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let mut net = Self::zeros(sizes, hidden, output)?;
        for (w, b) in net.weights.iter_mut().zip(net.biases.iter_mut()) {
            let bound = 1.0 / (w.ncols() as f64).sqrt();
            w.mapv_inplace(|_| rng.random_range(-bound..bound));
            b.mapv_inplace(|_| rng.random_range(-bound..bound));
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize], hidden: Activation, output: Activation) -> Result<Self, NnError> {
        if sizes.len() < 2 {
            return Err(NnError::InvalidArchitecture(
                "need at least an input and an output layer".into(),
            ));
        }
        if sizes.contains(&0) {
            return Err(NnError::InvalidArchitecture("layer sizes must be positive".into()));
        }
        let weights = sizes
            .windows(2)
            .map(|p| Array2::zeros((p[1], p[0])))
            .collect();
        let biases = sizes[1..].iter().map(|&n| Array1::zeros(n)).collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            weights,
            biases,
            hidden,
            output,
        })
    }

    /// Builds a network from explicit parameters, checking shapes and finiteness.
    pub fn from_parts(
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
        hidden: Activation,
        output: Activation,
    ) -> Result<Self, NnError> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(NnError::InvalidArchitecture(
                "weights and biases must be non-empty and of equal count".into(),
            ));
        }
        let mut sizes = vec![weights[0].ncols()];
        for (w, b) in weights.iter().zip(&biases) {
            let prev = *sizes.last().unwrap();
            if w.ncols() != prev {
                return Err(NnError::DimensionMismatch {
                    expected: prev,
                    got: w.ncols(),
                });
            }
            if b.len() != w.nrows() {
                return Err(NnError::DimensionMismatch {
                    expected: w.nrows(),
                    got: b.len(),
                });
            }
            sizes.push(w.nrows());
        }
        let net = Self {
            sizes,
            weights,
            biases,
            hidden,
            output,
        };
        if !net.is_finite() {
            return Err(NnError::InvalidArchitecture("non-finite parameter".into()));
        }
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Array1<f64>] {
        &mut self.biases
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.weights.len() {
            self.output
        } else {
            self.hidden
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        self.check_input(input.ncols())?;
        let mut x = input.to_owned();
        for l in 0..self.weights.len() {
            x = self.layer(l, &x);
        }
        Ok(x)
    }

    pub fn forward_cached(&self, input: ArrayView2<f64>) -> Result<ForwardCache, NnError> {
        self.check_input(input.ncols())?;
        let mut outputs = Vec::with_capacity(self.weights.len() + 1);
        outputs.push(input.to_owned());
        for l in 0..self.weights.len() {
            let next = self.layer(l, outputs.last().unwrap());
            outputs.push(next);
        }
        Ok(ForwardCache { outputs })
    }

    fn layer(&self, l: usize, x: &Array2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weights[l].t());
        z += &self.biases[l];
        self.activation(l).apply(&mut z);
        z
    }

    fn check_input(&self, got: usize) -> Result<(), NnError> {
        if got != self.input_dim() {
            return Err(NnError::DimensionMismatch {
                expected: self.input_dim(),
                got,
            });
        }
        Ok(())
    }

    /// Reverse pass for the scalar `sum(output .* output_grad)`.
    ///
    /// Returns parameter gradients summed over the batch and the gradient
    /// with respect to the input batch.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: ArrayView2<f64>,
    ) -> Result<(Gradients, Array2<f64>), NnError> {
        let out = cache.output();
        if output_grad.dim() != out.dim() {
            return Err(NnError::DimensionMismatch {
                expected: out.ncols(),
                got: output_grad.ncols(),
            });
        }
        let n = self.weights.len();
        let mut dw = Vec::with_capacity(n);
        let mut db = Vec::with_capacity(n);
        let mut delta = output_grad.to_owned();
        for l in (0..n).rev() {
            self.activation(l).backprop(&cache.outputs[l + 1], &mut delta);
            dw.push(delta.t().dot(&cache.outputs[l]));
            db.push(delta.sum_axis(Axis(0)));
            delta = delta.dot(&self.weights[l]);
        }
        dw.reverse();
        db.reverse();
        Ok((
            Gradients {
                weights: dw,
                biases: db,
            },
            delta,
        ))
    }

    /// Single-sample forward and backward pass.
    pub fn backward_single(
        &self,
        input: &[f64],
        output_grad: &[f64],
    ) -> Result<(Gradients, Vec<f64>), NnError> {
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        let g = ArrayView2::from_shape((1, output_grad.len()), output_grad).expect("row vector");
        let cache = self.forward_cached(x)?;
        let (grads, dx) = self.backward(&cache, g)?;
        Ok((grads, dx.into_raw_vec_and_offset().0))
    }

    /// `self <- self + tau * (online - self)`, which stays within `[self, online]` under rounding.
    pub fn soft_update_from(&mut self, online: &Mlp, tau: f64) {
        if tau == 1.0 {
            self.clone_from(online);
            return;
        }
        for (t, o) in self.weights.iter_mut().zip(&online.weights) {
            Zip::from(t).and(o).for_each(|t, &o| *t += tau * (o - *t));
        }
        for (t, o) in self.biases.iter_mut().zip(&online.biases) {
            Zip::from(t).and(o).for_each(|t, &o| *t += tau * (o - *t));
        }
    }

    /// All parameters flattened in layer order, weights row-major then biases.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment estimates for one network.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    t: i32,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(net: &Mlp, cfg: AdamConfig) -> Self {
        let zeros = || Gradients {
            weights: net.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        };
        Self {
            cfg,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Descends along `grads`.
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) {
        self.t += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        let step_size = learning_rate / bc1;
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= step_size * *m / ((*v / bc2).sqrt() + epsilon);
        };
        for l in 0..net.weights.len() {
            Zip::from(&mut net.weights[l])
                .and(&mut self.m.weights[l])
                .and(&mut self.v.weights[l])
                .and(&grads.weights[l])
                .for_each(|p, m, v, &g| update(p, m, v, g));
            Zip::from(&mut net.biases[l])
                .and(&mut self.m.biases[l])
                .and(&mut self.v.biases[l])
                .and(&grads.biases[l])
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_net_tanh_head_outputs_zero() {
        let net = Mlp::zeros(&[4, 8, 3], Activation::Relu, Activation::Tanh).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_linear_layer() {
        let net = Mlp::from_parts(
            vec![Array2::eye(3)],
            vec![Array1::zeros(3)],
            Activation::Relu,
            Activation::Linear,
        )
        .unwrap();
        assert_eq!(net.forward(&[1.5, -2.0, 0.25]).unwrap(), vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn dimension_mismatch() {
        let net = Mlp::zeros(&[4, 3], Activation::Relu, Activation::Tanh).unwrap();
        assert_eq!(
            net.forward(&[1.0]).unwrap_err(),
            NnError::DimensionMismatch { expected: 4, got: 1 }
        );
        assert!(net.backward_single(&[0.0; 4], &[1.0]).is_err());
        assert!(Mlp::zeros(&[3], Activation::Relu, Activation::Tanh).is_err());
        assert!(Mlp::zeros(&[3, 0, 1], Activation::Relu, Activation::Tanh).is_err());
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[5, 7, 2], Activation::Relu, Activation::Tanh, &mut rng).unwrap();
        let (g, dx) = net.backward_single(&[0.1, 0.2, -0.3, 0.4, 0.5], &[0.0, 0.0]).unwrap();
        assert!(g.is_zero());
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_linear_layers_closed_form() {
        // f(x) = W2 (W1 x + b1) + b2; d(g.f)/dx = W1^T W2^T g, d/dW1 = (W2^T g) x^T
        let w1 = array![[1.0, 2.0], [3.0, -1.0]];
        let w2 = array![[0.5, -2.0], [1.0, 4.0]];
        let net = Mlp::from_parts(
            vec![w1.clone(), w2.clone()],
            vec![array![0.1, 0.2], array![-0.3, 0.0]],
            Activation::Linear,
            Activation::Linear,
        )
        .unwrap();
        let x = [0.7, -1.3];
        let g = [2.0, -1.0];
        let (grads, dx) = net.backward_single(&x, &g).unwrap();
        // hand algebra: W2^T g = [0.5*2 + 1*(-1), -2*2 + 4*(-1)] = [0, -8]
        // dx = W1^T [0, -8] = [3*(-8), -1*(-8)] = [-24, 8]
        assert_abs_diff_eq!(dx[0], -24.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dx[1], 8.0, epsilon = 1e-12);
        let expected_dw1 = array![[0.0, 0.0], [-5.6, 10.4]];
        for (a, b) in grads.weights[0].iter().zip(expected_dw1.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        // h1 = W1 x + b1 = [0.7 - 2.6 + 0.1, 2.1 + 1.3 + 0.2] = [-1.8, 3.6]
        let expected_dw2 = array![[-3.6, 7.2], [1.8, -3.6]];
        for (a, b) in grads.weights[1].iter().zip(expected_dw2.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        assert_eq!(grads.biases[1], array![2.0, -1.0]);
    }

    #[test]
    fn soft_update_identity_at_tau_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Mlp::new(&[3, 4, 2], Activation::Relu, Activation::Tanh, &mut rng).unwrap();
        let mut b = Mlp::new(&[3, 4, 2], Activation::Relu, Activation::Tanh, &mut rng).unwrap();
        b.soft_update_from(&a, 1.0);
        assert_eq!(a, b);
    }

    #[test]
    fn adam_minimises_quadratic() {
        // single linear unit fitting y = 2x + 1
        let mut net = Mlp::zeros(&[1, 1], Activation::Relu, Activation::Linear).unwrap();
        let mut opt = Adam::new(
            &net,
            AdamConfig {
                learning_rate: 0.05,
                ..AdamConfig::default()
            },
        );
        let xs = array![[-1.0], [0.0], [1.0], [2.0]];
        let ys = xs.mapv(|x| 2.0 * x + 1.0);
        for _ in 0..2000 {
            let cache = net.forward_cached(xs.view()).unwrap();
            let grad = (cache.output() - &ys) * (2.0 / 4.0);
            let (g, _) = net.backward(&cache, grad.view()).unwrap();
            opt.step(&mut net, &g);
        }
        assert_abs_diff_eq!(net.weights()[0][[0, 0]], 2.0, epsilon = 1e-3);
        assert_abs_diff_eq!(net.biases()[0][0], 1.0, epsilon = 1e-3);
    }
}
