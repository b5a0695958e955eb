//! The five networks, latent batch normalization and the four training losses.
//!
//! Data flow: `x → E → z → BN(z) → ẑ → G → x̂`. The interpolation critic `d`
//! scores data-space points; the latent generator `g` maps prior draws into
//! the (post-BN) embedding space, where the latent critic `D` separates them
//! from real embeddings. Samples are `G(g(z))`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::normal_tensor;
use crate::error::{Error, Result};
use crate::nn::{
    init_mlp, layer_dims, standard_activations, Activation, AdamConfig, BoundMlp, Mlp, Trainable,
};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hyperparams {
    /// Critic target offset for the real/reconstruction mix.
    pub lambda: f64,
    /// Real/reconstruction mixing coefficient.
    pub gamma: f64,
    /// Weight of the interpolant regularizer in the autoencoder loss.
    pub omega1: f64,
    /// Weight of the reconstruction regularizer in the autoencoder loss.
    pub omega2: f64,
    /// Upper end of the interpolation coefficient range `U[0, mu_max]`.
    pub mu_max: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            lambda: 0.2,
            gamma: 0.2,
            omega1: 0.5,
            omega2: 0.5,
            mu_max: 0.5,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Invalid(what.to_string()));
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return bad(&format!("lambda must lie in (0,1), got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(&format!("gamma must lie in [0,1], got {}", self.gamma));
        }
        if !(self.omega1 >= 0.0 && self.omega2 >= 0.0) {
            return bad("omega1 and omega2 must be ≥ 0");
        }
        if !(self.mu_max > 0.0 && self.mu_max <= 1.0) {
            return bad(&format!("mu_max must lie in (0,1], got {}", self.mu_max));
        }
        Ok(())
    }
}

/// Latent batch normalization with running statistics and no affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
    /// Number of running-statistic updates so far; zero means never trained.
    pub updates: u64,
}

impl<T: Scalar> BnState<T> {
    pub fn new(dim: usize, momentum: f64, eps: f64) -> Self {
        BnState {
            running_mean: Tensor::zeros(&[1, dim]),
            running_var: Tensor::full(&[1, dim], T::one()),
            momentum,
            eps,
            updates: 0,
        }
    }

    /// Batch-statistics normalization recorded on `tape`.
    pub fn normalize_batch(&self, tape: &mut Tape<T>, z: Var) -> Result<Var> {
        tape.batch_norm(z, self.eps)
    }

    /// `running ← ρ·running + (1 − ρ)·batch` for mean and population variance.
    pub fn update(&mut self, z: &Tensor<T>) {
        let rho = T::from_f64(self.momentum);
        let one_rho = T::from_f64(1.0 - self.momentum);
        let (mean, var) = (z.col_mean(), z.col_var());
        for (r, &m) in self.running_mean.data_mut().iter_mut().zip(mean.data()) {
            *r = rho * *r + one_rho * m;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(var.data()) {
            *r = rho * *r + one_rho * v;
        }
        self.updates += 1;
    }

    /// Normalizes with the stored running statistics.
    pub fn normalize_running(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        if z.shape().len() != 2 || z.cols() != self.running_mean.cols() {
            return Err(Error::shape("latent_bn", z.shape(), self.running_mean.shape()));
        }
        let eps = T::from_f64(self.eps);
        let inv: Vec<T> = self
            .running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let n = z.cols();
        let mut out = z.clone();
        for chunk in out.data_mut().chunks_mut(n.max(1)) {
            for ((x, &m), &s) in chunk.iter_mut().zip(self.running_mean.data()).zip(&inv) {
                *x = (*x - m) * s;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Batch,
    Running,
}

/// Batch-statistics BN on a concrete batch, optionally updating the running statistics.
pub fn latent_bn<T: Scalar>(z: &Tensor<T>, state: &mut BnState<T>, mode: BnMode) -> Result<Tensor<T>> {
    match mode {
        BnMode::Batch => {
            let mut tape = Tape::new();
            let zv = tape.constant(z.clone());
            let out = state.normalize_batch(&mut tape, zv)?;
            state.update(z);
            Ok(tape.value(out).clone())
        }
        BnMode::Running => state.normalize_running(z),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub data_dim: usize,
    pub latent_dim: usize,
    pub width: usize,
    /// Number of affine layers per network.
    pub depth: usize,
    pub decoder_output: Activation,
    /// Apply batch normalization to the embedding.
    pub latent_bn: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl ModelConfig {
    pub fn new(data_dim: usize, latent_dim: usize) -> Self {
        ModelConfig {
            data_dim,
            latent_dim,
            width: 256,
            depth: 4,
            decoder_output: Activation::Identity,
            latent_bn: true,
            bn_momentum: 0.99,
            bn_eps: 1e-5,
        }
    }
}

/// Something that maps a `[B×in]` batch to a `[B×out]` batch on a tape.
pub trait Network<T: Scalar> {
    fn apply(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;
}

impl<T: Scalar, F: Fn(&mut Tape<T>, Var) -> Result<Var>> Network<T> for F {
    fn apply(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self(tape, x)
    }
}

/// An MLP whose parameters are registered on a tape.
pub struct Bound<'a, T> {
    pub net: &'a Mlp<T>,
    pub vars: BoundMlp,
}

impl<'a, T: Scalar> Bound<'a, T> {
    pub fn new(net: &'a Mlp<T>, tape: &mut Tape<T>, trainable: bool) -> Self {
        Bound {
            net,
            vars: net.bind(tape, trainable),
        }
    }
}

impl<T: Scalar> Network<T> for Bound<'_, T> {
    fn apply(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.net.forward(tape, &self.vars, x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<T> {
    pub config: ModelConfig,
    pub hp: Hyperparams,
    pub encoder: Trainable<T>,
    pub decoder: Trainable<T>,
    pub critic: Trainable<T>,
    pub mapper: Trainable<T>,
    pub latent_critic: Trainable<T>,
    pub bn: BnState<T>,
}

/// Names used for the five networks in checkpoints and logs.
pub const NETWORK_NAMES: [&str; 5] = ["encoder", "decoder", "critic", "mapper", "latent_critic"];

impl<T: Scalar> ModelBundle<T> {
    pub fn new(
        config: ModelConfig,
        hp: Hyperparams,
        ae_opt: AdamConfig,
        adv_opt: AdamConfig,
        seed: u64,
    ) -> Result<Self> {
        hp.validate()?;
        let (dx, dz, w, depth) = (config.data_dim, config.latent_dim, config.width, config.depth);
        if dx == 0 || dz == 0 || w == 0 || depth == 0 {
            return Err(Error::Invalid(format!("degenerate model config {config:?}")));
        }
        let mk = |input, output, act, k: u64| -> Result<Mlp<T>> {
            init_mlp(
                &layer_dims(input, w, depth, output),
                &standard_activations(depth, act),
                seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k),
            )
        };
        Ok(ModelBundle {
            config,
            hp,
            encoder: Trainable::new(mk(dx, dz, Activation::Identity, 1)?, ae_opt),
            decoder: Trainable::new(mk(dz, dx, config.decoder_output, 2)?, ae_opt),
            critic: Trainable::new(mk(dx, 1, Activation::Identity, 3)?, adv_opt),
            mapper: Trainable::new(mk(dz, dz, Activation::Identity, 4)?, adv_opt),
            latent_critic: Trainable::new(mk(dz, 1, Activation::Identity, 5)?, adv_opt),
            bn: BnState::new(dz, config.bn_momentum, config.bn_eps),
        })
    }

    pub fn networks(&self) -> [(&'static str, &Trainable<T>); 5] {
        [
            ("encoder", &self.encoder),
            ("decoder", &self.decoder),
            ("critic", &self.critic),
            ("mapper", &self.mapper),
            ("latent_critic", &self.latent_critic),
        ]
    }

    pub fn networks_mut(&mut self) -> [(&'static str, &mut Trainable<T>); 5] {
        [
            ("encoder", &mut self.encoder),
            ("decoder", &mut self.decoder),
            ("critic", &mut self.critic),
            ("mapper", &mut self.mapper),
            ("latent_critic", &mut self.latent_critic),
        ]
    }

    fn check_width(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.config.data_dim {
            return Err(Error::shape("bundle input", x.shape(), &[0, self.config.data_dim]));
        }
        Ok(())
    }

    /// Encoder output before normalization.
    pub fn encode_raw(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_width(x)?;
        self.encoder.net.infer(x)
    }

    /// Embedding `BN_run(E(x))` (or `E(x)` with BN disabled).
    pub fn embed(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let z = self.encode_raw(x)?;
        if self.config.latent_bn {
            self.bn.normalize_running(&z)
        } else {
            Ok(z)
        }
    }

    /// `x̂ = G(BN_run(E(x)))`.
    pub fn reconstruct(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let z = self.embed(x)?;
        self.decoder.net.infer(&z)
    }

    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.decoder.net.infer(z)
    }

    /// `g(z)` for prior samples `z`.
    pub fn map_prior(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.mapper.net.infer(z)
    }

    /// `n` samples `G(g(z))`, `z ~ N(0, I)` drawn from `seed`.
    pub fn generate(&self, n: usize, seed: u64) -> Result<Tensor<T>> {
        if self.config.latent_bn && self.bn.updates == 0 {
            return Err(Error::UntrainedBn);
        }
        if n == 0 {
            return Ok(Tensor::zeros(&[0, self.config.data_dim]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = normal_tensor(&mut rng, n, self.config.latent_dim);
        self.decode(&self.map_prior(&z)?)
    }

    /// Batch-normalized latent for a training batch, on `tape`.
    pub fn latent_on_tape(&self, tape: &mut Tape<T>, enc: &dyn Network<T>, x: Var) -> Result<Var> {
        let z = enc.apply(tape, x)?;
        if self.config.latent_bn {
            self.bn.normalize_batch(tape, z)
        } else {
            Ok(z)
        }
    }

    /// Interpolants `x_μ = G(μ·ẑ₁ + (1 − μ)·ẑ₂)` with `ẑ = BN_batch(E(x))` per batch.
    pub fn make_interpolants(&self, x1: &Tensor<T>, x2: &Tensor<T>, mu: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_width(x1)?;
        if x1.shape() != x2.shape() {
            return Err(Error::shape("make_interpolants", x1.shape(), x2.shape()));
        }
        check_mu(mu, x1.rows(), self.hp.mu_max)?;
        let mut tape = Tape::new();
        let enc = Bound::new(&self.encoder.net, &mut tape, false);
        let dec = Bound::new(&self.decoder.net, &mut tape, false);
        let a = tape.constant(x1.clone());
        let b = tape.constant(x2.clone());
        let za = self.latent_on_tape(&mut tape, &enc, a)?;
        let zb = self.latent_on_tape(&mut tape, &enc, b)?;
        let m = tape.constant(mu.clone());
        let zm = tape.lerp_rows(za, zb, m)?;
        let out = dec.apply(&mut tape, zm)?;
        Ok(tape.value(out).clone())
    }
}

/// Tape handles produced by [`ae_forward`].
#[derive(Clone, Copy, Debug)]
pub struct AeForward {
    /// Encoder output before normalization.
    pub raw: Var,
    /// Latent fed to the decoder.
    pub z: Var,
    pub x_hat: Var,
    /// Decoded interpolants between each row and its mirror `B − 1 − i`.
    pub x_mu: Option<Var>,
}

/// Stage-A forward pass: `ẑ = BN_batch(E(x))` (or `E(x)` when `bn_eps` is `None`),
/// `x̂ = G(ẑ)`, and with `mu` given `x_μ = G(μ·ẑ + (1 − μ)·ẑ_rev)`, pairing the
/// batch with itself reversed.
pub fn ae_forward<T: Scalar>(
    tape: &mut Tape<T>,
    enc: &dyn Network<T>,
    dec: &dyn Network<T>,
    x: Var,
    mu: Option<&Tensor<T>>,
    bn_eps: Option<f64>,
) -> Result<AeForward> {
    let raw = enc.apply(tape, x)?;
    let z = match bn_eps {
        Some(eps) => tape.batch_norm(raw, eps)?,
        None => raw,
    };
    let x_hat = dec.apply(tape, z)?;
    let x_mu = match mu {
        Some(mu) => {
            let rows = tape.value(z).rows();
            let rev: Vec<usize> = (0..rows).rev().collect();
            let z_rev = tape.select_rows(z, &rev)?;
            let m = tape.constant(mu.clone());
            let z_mu = tape.lerp_rows(z, z_rev, m)?;
            Some(dec.apply(tape, z_mu)?)
        }
        None => None,
    };
    Ok(AeForward { raw, z, x_hat, x_mu })
}

/// Checks that `mu` is `[rows × 1]` with entries in `[0, mu_max]`.
pub fn check_mu<T: Scalar>(mu: &Tensor<T>, rows: usize, mu_max: f64) -> Result<()> {
    if mu.shape() != [rows, 1] {
        return Err(Error::shape("interpolation coefficients", mu.shape(), &[rows, 1]));
    }
    let max = T::from_f64(mu_max);
    if let Some(i) = mu.data().iter().position(|&m| !(m >= T::zero() && m <= max)) {
        return Err(Error::Invalid(format!(
            "interpolation coefficient {:?} at row {i} outside [0, {mu_max}]",
            mu.data()[i]
        )));
    }
    Ok(())
}

/// Interpolation-critic objective
/// `‖d(x)‖² + ‖d(γx + (1−γ)x̂) − λ‖² + ‖d(x_μ) − μ − λ‖²`, each term a batch mean.
///
/// `x̂`, `x_μ` and `μ` are treated as constants; only `critic` receives gradient.
#[allow(clippy::too_many_arguments)]
pub fn critic_loss<T: Scalar>(
    tape: &mut Tape<T>,
    critic: &dyn Network<T>,
    x: &Tensor<T>,
    x_hat: &Tensor<T>,
    x_mu: &Tensor<T>,
    mu: &Tensor<T>,
    gamma: f64,
    lambda: f64,
) -> Result<Var> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape("critic_loss", x.shape(), x_hat.shape()));
    }
    if x.shape() != x_mu.shape() {
        return Err(Error::shape("critic_loss", x.shape(), x_mu.shape()));
    }
    check_mu(mu, x.rows(), 1.0)?;
    let g = T::from_f64(gamma);
    let mix = x.zip_map(x_hat, "critic_loss", |a, b| g * a + (T::one() - g) * b)?;
    let target = mu.map(|m| m + T::from_f64(lambda));

    let xv = tape.constant(x.clone());
    let real = critic.apply(tape, xv)?;
    let real_term = tape.mean_sq(real)?;

    let mv = tape.constant(mix);
    let mixed = critic.apply(tape, mv)?;
    let mixed = tape.add_scalar(mixed, -lambda)?;
    let mix_term = tape.mean_sq(mixed)?;

    let iv = tape.constant(x_mu.clone());
    let interp = critic.apply(tape, iv)?;
    let tv = tape.constant(target);
    let interp = tape.sub(interp, tv)?;
    let interp_term = tape.mean_sq(interp)?;

    let s = tape.add(real_term, mix_term)?;
    tape.add(s, interp_term)
}

/// Autoencoder objective `‖x − x̂‖² + ω₁‖d(x_μ)‖² + ω₂‖d(x̂)‖²` from tape values.
///
/// `x_hat` and `x_mu` must already be on the tape (so gradients reach `E` and `G`);
/// `critic` should be bound as constant. Zero weights skip their critic pass.
pub fn ae_loss_terms<T: Scalar>(
    tape: &mut Tape<T>,
    critic: &dyn Network<T>,
    x: Var,
    x_hat: Var,
    x_mu: Var,
    omega1: f64,
    omega2: f64,
) -> Result<Var> {
    let diff = tape.sub(x, x_hat)?;
    let mut loss = tape.mean_sq(diff)?;
    if omega1 != 0.0 {
        let s = critic.apply(tape, x_mu)?;
        let t = tape.mean_sq(s)?;
        let t = tape.scale(t, omega1)?;
        loss = tape.add(loss, t)?;
    }
    if omega2 != 0.0 {
        let s = critic.apply(tape, x_hat)?;
        let t = tape.mean_sq(s)?;
        let t = tape.scale(t, omega2)?;
        loss = tape.add(loss, t)?;
    }
    Ok(loss)
}

/// Hinge discriminator objective `E[relu(1 − D(real))] + E[relu(1 + D(fake))]`.
pub fn latent_disc_loss<T: Scalar>(
    tape: &mut Tape<T>,
    disc: &dyn Network<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
) -> Result<Var> {
    if real.shape().len() != 2 || fake.shape().len() != 2 || real.cols() != fake.cols() {
        return Err(Error::shape("latent_disc_loss", real.shape(), fake.shape()));
    }
    let rv = tape.constant(real.clone());
    let fv = tape.constant(fake.clone());
    let rs = disc.apply(tape, rv)?;
    let fs = disc.apply(tape, fv)?;
    hinge_terms(tape, rs, fs)
}

/// Hinge terms on precomputed score columns.
pub fn hinge_terms<T: Scalar>(tape: &mut Tape<T>, real_scores: Var, fake_scores: Var) -> Result<Var> {
    let r = tape.neg(real_scores)?;
    let r = tape.add_scalar(r, 1.0)?;
    let r = tape.relu(r)?;
    let r = tape.mean(r)?;
    let f = tape.add_scalar(fake_scores, 1.0)?;
    let f = tape.relu(f)?;
    let f = tape.mean(f)?;
    tape.add(r, f)
}

/// Generator objective `E[−D(g(z))]`.
pub fn latent_gen_loss<T: Scalar>(
    tape: &mut Tape<T>,
    mapper: &dyn Network<T>,
    disc: &dyn Network<T>,
    z: &Tensor<T>,
) -> Result<Var> {
    let zv = tape.constant(z.clone());
    let fake = mapper.apply(tape, zv)?;
    let scores = disc.apply(tape, fake)?;
    let m = tape.mean(scores)?;
    tape.neg(m)
}

/// Constant-output network, for fixtures and probes.
pub fn constant_network<T: Scalar>(value: f64) -> impl Fn(&mut Tape<T>, Var) -> Result<Var> {
    move |tape: &mut Tape<T>, x: Var| {
        let rows = tape.value(x).rows();
        let c = tape.constant(Tensor::full(&[rows, 1], T::from_f64(value)));
        // keep a dependency on x so gradients (all zero) still reach it
        let zero = tape.scale(x, 0.0)?;
        let zero = tape.sum_cols(zero)?;
        tape.add(c, zero)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape, v).unwrap()
    }

    fn small_bundle(seed: u64) -> ModelBundle<f64> {
        let mut cfg = ModelConfig::new(3, 2);
        cfg.width = 8;
        cfg.depth = 3;
        ModelBundle::new(cfg, Hyperparams::default(), AdamConfig::autoencoder(), AdamConfig::adversarial(), seed).unwrap()
    }

    fn batch(rows: usize, seed: u64) -> Tensor<f64> {
        crate::data::sample_swiss_roll(rows, crate::data::SwissRollVariant::Ambient3d, 0.0, seed)
    }

    #[test]
    fn bn_two_point_column() {
        let mut st = BnState::<f64>::new(1, 0.99, 1e-12);
        let out = latent_bn(&t64(&[2, 1], &[1., 3.]), &mut st, BnMode::Batch).unwrap();
        assert!((out.data()[0] + 1.0).abs() < 1e-9 && (out.data()[1] - 1.0).abs() < 1e-9);
        assert_eq!(st.updates, 1);
    }

    #[test]
    fn bn_normalized_input_unchanged() {
        let z = t64(&[4, 1], &[-1., 1., -1., 1.]);
        let mut st = BnState::<f64>::new(1, 0.99, 1e-5);
        let out = latent_bn(&z, &mut st, BnMode::Batch).unwrap();
        assert!(out.max_abs_diff(&z) < 1e-5);
    }

    #[test]
    fn bn_output_moments() {
        let eps = 1e-5;
        let mut st = BnState::<f64>::new(3, 0.99, eps);
        // population variance of each column is well above eps
        let z = crate::data::sample_prior::<f64>(256, 3, 17).map(|v| 1.5 * v + 0.7);
        let out = latent_bn(&z, &mut st, BnMode::Batch).unwrap();
        let var_in = z.col_var();
        for j in 0..3 {
            assert!(out.col_mean().data()[j].abs() < 1e-6);
            let expected = var_in.data()[j] / (var_in.data()[j] + eps);
            assert!((out.col_var().data()[j] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn bn_rejects_single_row_batch() {
        let mut st = BnState::<f32>::new(2, 0.99, 1e-5);
        assert!(latent_bn(&Tensor::zeros(&[1, 2]), &mut st, BnMode::Batch).is_err());
    }

    #[test]
    fn bn_running_update_rule() {
        let mut st = BnState::<f64>::new(1, 0.9, 1e-5);
        st.update(&t64(&[2, 1], &[1., 3.]));
        assert!((st.running_mean.data()[0] - 0.2).abs() < 1e-12);
        assert!((st.running_var.data()[0] - (0.9 + 0.1 * 1.0)).abs() < 1e-12);
        let out = latent_bn(&t64(&[1, 1], &[0.2]), &mut st, BnMode::Running).unwrap();
        assert!(out.data()[0].abs() < 1e-12);
        assert_eq!(st.updates, 1);
    }

    #[test]
    fn interpolant_endpoints() {
        let b = small_bundle(1);
        let x1 = batch(6, 2);
        let x2 = batch(6, 3);
        let zero = Tensor::zeros(&[6, 1]);
        let xm = b.make_interpolants(&x1, &x2, &zero).unwrap();
        // μ = 0 reproduces the batch-stats reconstruction of x₂
        let recon2 = b.make_interpolants(&x2, &x2, &Tensor::full(&[6, 1], 0.3)).unwrap();
        assert!(xm.max_abs_diff(&recon2) < 1e-12);

        let half = Tensor::full(&[6, 1], 0.5);
        let same = b.make_interpolants(&x1, &x1, &half).unwrap();
        let recon1 = b.make_interpolants(&x1, &x1, &zero).unwrap();
        assert!(same.max_abs_diff(&recon1) < 1e-12);
    }

    #[test]
    fn interpolant_latent_is_affine_combination() {
        let b = small_bundle(4);
        let x1 = batch(8, 5);
        let x2 = x1.reversed_rows();
        let mu = t64(&[8, 1], &[0.0, 0.1, 0.2, 0.25, 0.3, 0.4, 0.45, 0.5]);
        let mut st = b.bn.clone();
        let z1 = latent_bn(&b.encode_raw(&x1).unwrap(), &mut st, BnMode::Batch).unwrap();
        let z2 = latent_bn(&b.encode_raw(&x2).unwrap(), &mut st, BnMode::Batch).unwrap();
        let mut mixed = z1.clone();
        for r in 0..8 {
            let m = mu.data()[r];
            for c in 0..2 {
                mixed.data_mut()[r * 2 + c] = m * z1.get(r, c) + (1.0 - m) * z2.get(r, c);
            }
        }
        let expected = b.decode(&mixed).unwrap();
        let got = b.make_interpolants(&x1, &x2, &mu).unwrap();
        assert!(got.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn interpolant_rejects_mu_out_of_range() {
        let b = small_bundle(1);
        let x = batch(4, 2);
        let mu = t64(&[4, 1], &[0.1, 0.6, 0.2, 0.0]);
        assert!(b.make_interpolants(&x, &x, &mu).is_err());
        let mu = t64(&[4, 1], &[0.1, -0.01, 0.2, 0.0]);
        assert!(b.make_interpolants(&x, &x, &mu).is_err());
    }

    fn identity_critic() -> impl Fn(&mut Tape<f64>, Var) -> Result<Var> {
        |_tape: &mut Tape<f64>, x: Var| Ok(x)
    }

    #[test]
    fn critic_loss_exact_zero() {
        let (lambda, gamma, mu) = (0.2, 0.2, 0.3);
        // 1-D data, d(v) = v: d(x) = 0, d(γx + (1−γ)x̂) = λ, d(x_μ) = μ + λ
        let x = t64(&[2, 1], &[0., 0.]);
        let x_hat = Tensor::full(&[2, 1], lambda / (1.0 - gamma));
        let x_mu = Tensor::full(&[2, 1], mu + lambda);
        let mut tape = Tape::new();
        let l = critic_loss(&mut tape, &identity_critic(), &x, &x_hat, &x_mu, &Tensor::full(&[2, 1], mu), gamma, lambda).unwrap();
        assert!(tape.value(l).item().abs() < 1e-15);
    }

    #[test]
    fn critic_loss_zero_critic_hand_value() {
        let x = batch(5, 1);
        let mut tape = Tape::new();
        let d0 = constant_network::<f64>(0.0);
        let l = critic_loss(&mut tape, &d0, &x, &x, &x, &Tensor::full(&[5, 1], 0.3), 0.2, 0.2).unwrap();
        assert!((tape.value(l).item() - 0.29).abs() < 1e-12);
    }

    #[test]
    fn critic_loss_gamma_one_ignores_reconstruction() {
        let x = t64(&[3, 1], &[0.1, -0.2, 0.4]);
        let junk = t64(&[3, 1], &[9.0, -7.0, 3.0]);
        let mu = Tensor::full(&[3, 1], 0.1);
        let run = |x_hat: &Tensor<f64>| {
            let mut tape = Tape::new();
            let l = critic_loss(&mut tape, &identity_critic(), &x, x_hat, &x, &mu, 1.0, 0.2).unwrap();
            tape.value(l).item()
        };
        assert_eq!(run(&x), run(&junk));
        // second term equals ‖d(x) − λ‖²
        let expected: f64 = x.data().iter().map(|v| v * v).sum::<f64>() / 3.0
            + x.data().iter().map(|v| (v - 0.2).powi(2)).sum::<f64>() / 3.0
            + x.data().iter().map(|v| (v - 0.3).powi(2)).sum::<f64>() / 3.0;
        assert!((run(&junk) - expected).abs() < 1e-12);
    }

    #[test]
    fn critic_loss_shape_mismatch() {
        let mut tape = Tape::new();
        let r = critic_loss(&mut tape, &identity_critic(), &Tensor::zeros(&[2, 1]), &Tensor::zeros(&[3, 1]), &Tensor::zeros(&[2, 1]), &Tensor::zeros(&[2, 1]), 0.2, 0.2);
        assert!(r.is_err());
    }

    #[test]
    fn ae_loss_regularizer_arithmetic() {
        let x = t64(&[2, 2], &[0.1, 0.2, 0.3, 0.4]);
        let x_hat = t64(&[2, 2], &[0.0, 0.2, 0.5, 0.4]);
        let mse = (0.01 + 0.04) / 4.0;
        for (w1, w2, c) in [(0.0, 0.0, 3.0), (0.5, 0.5, 0.7), (0.1, 0.9, -2.0)] {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let hv = tape.constant(x_hat.clone());
            let mv = tape.constant(x.clone());
            let l = ae_loss_terms(&mut tape, &constant_network::<f64>(c), xv, hv, mv, w1, w2).unwrap();
            let expected = mse + (w1 + w2) * c * c;
            assert!((tape.value(l).item() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn ae_loss_perfect_autoencoder_is_zero() {
        let x = batch(4, 9);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let hv = tape.constant(x.clone());
        let l = ae_loss_terms(&mut tape, &constant_network::<f64>(0.0), xv, hv, hv, 0.5, 0.5).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn hinge_cases() {
        let check = |real: &[f64], fake: &[f64], expected: f64| {
            let mut tape = Tape::<f64>::new();
            let r = tape.constant(Tensor::from_f64_slice(&[real.len(), 1], real).unwrap());
            let f = tape.constant(Tensor::from_f64_slice(&[fake.len(), 1], fake).unwrap());
            let l = hinge_terms(&mut tape, r, f).unwrap();
            assert!((tape.value(l).item() - expected).abs() < 1e-12);
        };
        check(&[1.0, 1.0], &[-1.0, -1.0], 0.0);
        check(&[0.0, 0.0], &[0.0, 0.0], 2.0);
        check(&[0.5, 2.0], &[-2.0, 0.3], 0.9);
    }

    #[test]
    fn disc_loss_with_constant_critic() {
        let real = Tensor::<f64>::zeros(&[4, 2]);
        let fake = Tensor::<f64>::zeros(&[4, 2]);
        let mut tape = Tape::new();
        let l = latent_disc_loss(&mut tape, &constant_network::<f64>(0.0), &real, &fake).unwrap();
        assert_eq!(tape.value(l).item(), 2.0);
    }

    #[test]
    fn gen_loss_constant_critic() {
        let z = Tensor::<f64>::zeros(&[4, 2]);
        let id = |_t: &mut Tape<f64>, x: Var| Ok(x);
        for (c, expected) in [(0.0, 0.0), (5.0, -5.0)] {
            let mut tape = Tape::new();
            let l = latent_gen_loss(&mut tape, &id, &constant_network::<f64>(c), &z).unwrap();
            assert_eq!(tape.value(l).item(), expected);
        }
    }

    #[test]
    fn generate_requires_trained_bn() {
        let b = small_bundle(2);
        assert!(matches!(b.generate(4, 0), Err(Error::UntrainedBn)));
    }

    #[test]
    fn generate_edge_cases() {
        let mut b = small_bundle(2);
        b.bn.update(&b.encode_raw(&batch(8, 1)).unwrap());
        let empty = b.generate(0, 1).unwrap();
        assert_eq!(empty.shape(), &[0, 3]);
        assert!(b.generate(10, 7).unwrap().bit_eq(&b.generate(10, 7).unwrap()));
    }

    #[test]
    fn constant_decoder_reconstruction_is_constant() {
        let mut b = small_bundle(3);
        for l in &mut b.decoder.net.layers {
            l.weight.data_mut().fill(0.0);
        }
        b.decoder.net.layers.last_mut().unwrap().bias.data_mut().copy_from_slice(&[0.1, 0.2, 0.3]);
        let out = b.reconstruct(&batch(16, 4)).unwrap();
        for r in 0..16 {
            assert_eq!(out.row(r), &[0.1, 0.2, 0.3]);
        }
    }

    #[test]
    fn reconstruct_rejects_width_mismatch() {
        let b = small_bundle(3);
        assert!(b.reconstruct(&Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn hyperparam_validation() {
        let mut hp = Hyperparams::default();
        assert!(hp.validate().is_ok());
        hp.lambda = 1.0;
        assert!(hp.validate().is_err());
        hp = Hyperparams { gamma: 1.5, ..Hyperparams::default() };
        assert!(hp.validate().is_err());
        hp = Hyperparams { omega1: -0.1, ..Hyperparams::default() };
        assert!(hp.validate().is_err());
    }
}
