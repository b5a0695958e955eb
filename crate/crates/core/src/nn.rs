//! Multi-layer perceptrons and the Adam optimizer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Default slope for hidden leaky-ReLU layers.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    LeakyRelu(f64),
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply<T: Scalar>(self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::LeakyRelu(s) => tape.leaky_relu(x, s),
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }

    pub fn name(self) -> String {
        match self {
            Activation::Identity => "identity".into(),
            Activation::LeakyRelu(s) => format!("leaky_relu:{s}"),
            Activation::Relu => "relu".into(),
            Activation::Tanh => "tanh".into(),
            Activation::Sigmoid => "sigmoid".into(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "identity" => Activation::Identity,
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            "sigmoid" => Activation::Sigmoid,
            _ => Activation::LeakyRelu(s.strip_prefix("leaky_relu:")?.parse().ok()?),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    /// `[in × out]`
    pub weight: Tensor<T>,
    /// `[1 × out]`
    pub bias: Tensor<T>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Layer<T>>,
}

/// Tape handles for one MLP's parameters.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    vars: Vec<(Var, Var)>,
}

impl BoundMlp {
    /// Gradients in [`Mlp::params`] order.
    pub fn grads<T: Scalar>(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .flat_map(|&(w, b)| [grads.get(w), grads.get(b)])
            .collect()
    }

    /// Swaps parameter `index` (in [`Mlp::params`] order) for another tape variable.
    pub fn replace(&mut self, index: usize, v: Var) {
        let (w, b) = &mut self.vars[index / 2];
        if index.is_multiple_of(2) {
            *w = v;
        } else {
            *b = v;
        }
    }
}

/// Hidden layers use leaky ReLU; the last layer gets `output`.
pub fn standard_activations(n_layers: usize, output: Activation) -> Vec<Activation> {
    let mut acts = vec![Activation::LeakyRelu(LEAKY_SLOPE); n_layers.saturating_sub(1)];
    acts.push(output);
    acts
}

/// Layer widths for an MLP with `depth` affine layers of hidden width `width`.
pub fn layer_dims(input: usize, width: usize, depth: usize, output: usize) -> Vec<usize> {
    let mut dims = vec![input];
    dims.extend(std::iter::repeat_n(width, depth.saturating_sub(1)));
    dims.push(output);
    dims
}

/// Kaiming-uniform weights, `U(−√(6/fan_in), √(6/fan_in))`, zero biases.
pub fn init_mlp<T: Scalar>(dims: &[usize], activations: &[Activation], seed: u64) -> Result<Mlp<T>> {
    if dims.len() < 2 {
        return Err(Error::Invalid(format!("MLP needs at least two dims, got {dims:?}")));
    }
    if let Some(i) = dims.iter().position(|&d| d == 0) {
        return Err(Error::Invalid(format!("MLP dim {i} is zero in {dims:?}")));
    }
    if activations.len() != dims.len() - 1 {
        return Err(Error::Invalid(format!(
            "{} layers but {} activations",
            dims.len() - 1,
            activations.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = dims
        .windows(2)
        .zip(activations)
        .map(|(w, &activation)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| T::from_f64(rng.random_range(-bound..bound)))
                .collect();
            Layer {
                weight: Tensor::new(vec![fan_in, fan_out], data).expect("sized"),
                bias: Tensor::zeros(&[1, fan_out]),
                activation,
            }
        })
        .collect();
    Ok(Mlp { layers })
}

impl<T: Scalar> Mlp<T> {
    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.shape()[1]
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.weight.shape()[1]));
        d
    }

    /// Weight, bias, weight, bias, ... in layer order.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// `(name suffix, tensor)` pairs, e.g. `0.weight`.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| [(format!("{i}.weight"), &l.weight), (format!("{i}.bias"), &l.bias)])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Registers the parameters on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundMlp {
        let vars = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (tape.param(l.weight.clone()), tape.param(l.bias.clone()))
                } else {
                    (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
                }
            })
            .collect();
        BoundMlp { vars }
    }

    pub fn forward(&self, tape: &mut Tape<T>, bound: &BoundMlp, x: Var) -> Result<Var> {
        let width = tape.value(x).shape();
        if width.len() != 2 || width[1] != self.input_dim() {
            return Err(Error::shape("mlp_forward", width, &[0, self.input_dim()]));
        }
        let mut h = x;
        for (layer, &(w, b)) in self.layers.iter().zip(&bound.vars) {
            let a = tape.matmul(h, w)?;
            let a = tape.add_row(a, b)?;
            h = layer.activation.apply(tape, a)?;
        }
        Ok(h)
    }

    /// Forward pass without gradients.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &bound, xv)?;
        Ok(tape.value(y).clone())
    }

    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                    activation: l.activation,
                })
                .collect(),
        }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.activation == b.activation && a.weight.bit_eq(&b.weight) && a.bias.bit_eq(&b.bias)
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// Settings for the adversarial pairs (critics, latent generator).
    pub fn adversarial() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Settings for the autoencoder.
    pub fn autoencoder() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &[&Tensor<T>]) -> Self {
        let zeros: Vec<_> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One bias-corrected Adam update; increments `t`.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Invalid(format!(
                "adam: {} moment slots, {} params, {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
        }
        self.t += 1;
        let c = self.config;
        let t = self.t as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let step_size = T::from_f64(c.lr / bc1);
        let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(c.eps);

        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            for (mj, &gj) in m.iter_mut().zip(g) {
                *mj = b1 * *mj + one_b1 * gj;
            }
            let v = self.v[i].data_mut();
            for (vj, &gj) in v.iter_mut().zip(g) {
                *vj = b2 * *vj + one_b2 * gj * gj;
            }
            let (m, v) = (self.m[i].data(), self.v[i].data());
            for ((pj, &mj), &vj) in p.data_mut().iter_mut().zip(m).zip(v) {
                *pj = *pj - step_size * mj / (vj.sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}

/// An MLP paired with its optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainable<T> {
    pub net: Mlp<T>,
    pub opt: AdamState<T>,
}

impl<T: Scalar> Trainable<T> {
    pub fn new(net: Mlp<T>, config: AdamConfig) -> Self {
        let opt = AdamState::new(config, &net.params());
        Trainable { net, opt }
    }

    pub fn apply(&mut self, grads: &[Tensor<T>]) -> Result<()> {
        let mut params = self.net.params_mut();
        self.opt.step(&mut params, grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn acts(n: usize) -> Vec<Activation> {
        standard_activations(n, Activation::Identity)
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_mlp::<f32>(&[2, 64, 64, 2], &acts(3), 7).unwrap();
        let b = init_mlp::<f32>(&[2, 64, 64, 2], &acts(3), 7).unwrap();
        assert!(a.bit_eq(&b));
        let c = init_mlp::<f32>(&[2, 64, 64, 2], &acts(3), 8).unwrap();
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn init_biases_zero_weights_within_bound() {
        let net = init_mlp::<f64>(&[2, 64, 64, 2], &acts(3), 7).unwrap();
        for l in &net.layers {
            assert!(l.bias.data().iter().all(|&b| b == 0.0));
            let bound = (6.0 / l.weight.shape()[0] as f64).sqrt();
            assert!(l.weight.data().iter().all(|w| w.abs() <= bound));
            // uniform(−b, b) has variance b²/3 = 2/fan_in
            let n = l.weight.len() as f64;
            let var = l.weight.data().iter().map(|w| w * w).sum::<f64>() / n;
            let expected = bound * bound / 3.0;
            assert!((var - expected).abs() < 0.25 * expected, "{var} vs {expected}");
        }
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(init_mlp::<f32>(&[2], &[], 0).is_err());
        assert!(init_mlp::<f32>(&[2, 0, 1], &acts(2), 0).is_err());
        assert!(init_mlp::<f32>(&[2, 3, 1], &acts(1), 0).is_err());
    }

    #[test]
    fn zero_net_outputs_zero() {
        let mut net = init_mlp::<f32>(&[3, 5, 2], &acts(2), 1).unwrap();
        for p in net.params_mut() {
            p.data_mut().fill(0.0);
        }
        let x = Tensor::from_f64_slice(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        assert!(net.infer(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut net = init_mlp::<f64>(&[3, 3], &[Activation::Identity], 1).unwrap();
        let eye: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        net.layers[0].weight = Tensor::from_f64_slice(&[3, 3], &eye).unwrap();
        let x = Tensor::from_f64_slice(&[2, 3], &[1., -2., 3., 0.5, 0., 9.]).unwrap();
        assert_eq!(net.infer(&x).unwrap(), x);
    }

    #[test]
    fn forward_rejects_width_mismatch() {
        let net = init_mlp::<f32>(&[3, 4, 1], &acts(2), 1).unwrap();
        assert!(net.infer(&Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn forward_is_row_separable() {
        let net = init_mlp::<f64>(&[3, 16, 16, 2], &acts(3), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ta = Tensor::from_f64_slice(&[5, 3], &a).unwrap();
        let tb = Tensor::from_f64_slice(&[3, 3], &b).unwrap();
        let joint = net.infer(&Tensor::concat_rows(&[&ta, &tb]).unwrap()).unwrap();
        let split = Tensor::concat_rows(&[&net.infer(&ta).unwrap(), &net.infer(&tb).unwrap()]).unwrap();
        assert!(joint.max_abs_diff(&split) < 1e-12);
    }

    #[test]
    fn mlp_loss_matches_finite_differences() {
        let net = init_mlp::<f64>(&[3, 8, 1], &standard_activations(2, Activation::Tanh), 11).unwrap();
        let x = Tensor::from_f64_slice(&[4, 3], &[0.1, -0.4, 0.9, 0.3, 0.2, -0.8, -0.5, 0.7, 0.05, 0.6, -0.3, 0.4]).unwrap();
        // check w.r.t. the first layer's weights
        let w0 = net.layers[0].weight.clone();
        let r = grad_check(
            |tape, w| {
                let mut n = net.clone();
                n.layers[0].weight = tape.value(w).clone();
                let bound = n.bind(tape, false);
                // splice the checked leaf in place of the constant weight
                let bound = BoundMlp {
                    vars: std::iter::once((w, bound.vars[0].1)).chain(bound.vars[1..].iter().copied()).collect(),
                };
                let xv = tape.constant(x.clone());
                let y = n.forward(tape, &bound, xv)?;
                tape.mean_sq(y)
            },
            &w0,
            1e-5,
        )
        .unwrap();
        assert!(r.passed(1e-4), "{r:?}");
    }

    #[test]
    fn adam_first_step_hand_value() {
        let mut p = Tensor::<f64>::zeros(&[3]);
        let mut st = AdamState::new(
            AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            &[&p],
        );
        st.step(&mut [&mut p], &[Tensor::full(&[3], 1.0)]).unwrap();
        for &v in p.data() {
            assert!((v - (-9.9999999e-4)).abs() < 1e-12, "{v}");
        }
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = Tensor::<f32>::from_f64_slice(&[2], &[0.5, -0.25]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(AdamConfig::adversarial(), &[&p]);
        st.step(&mut [&mut p], &[Tensor::zeros(&[2])]).unwrap();
        assert!(p.bit_eq(&before));
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_symmetric_histories_give_identical_updates() {
        let mut a = Tensor::<f32>::full(&[4], 0.3);
        let mut b = Tensor::<f32>::full(&[4], 0.3);
        let mut st = AdamState::new(AdamConfig::autoencoder(), &[&a, &b]);
        for k in 0..20 {
            let g = Tensor::full(&[4], (k as f32 * 0.7).sin());
            st.step(&mut [&mut a, &mut b], &[g.clone(), g]).unwrap();
        }
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = Tensor::<f32>::zeros(&[2]);
        let mut st = AdamState::new(AdamConfig::adversarial(), &[&p]);
        assert!(st.step(&mut [&mut p], &[Tensor::zeros(&[3])]).is_err());
    }

    #[test]
    fn adam_update_bounded_for_random_gradient_streams() {
        let cfg = AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let scale: f64 = rng.random_range(1e-3..1e3);
            let mut p = Tensor::<f64>::zeros(&[16]);
            let mut st = AdamState::new(cfg, &[&p]);
            for _ in 0..500 {
                let g: Vec<f64> = (0..16).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
                let before = p.clone();
                st.step(&mut [&mut p], &[Tensor::from_f64_slice(&[16], &g).unwrap()]).unwrap();
                assert!(p.max_abs_diff(&before) <= 2.0 * cfg.lr);
            }
        }
    }

    #[test]
    fn activation_names_round_trip() {
        for a in [Activation::Identity, Activation::Relu, Activation::Tanh, Activation::Sigmoid, Activation::LeakyRelu(0.2)] {
            assert_eq!(Activation::parse(&a.name()), Some(a));
        }
    }
}
