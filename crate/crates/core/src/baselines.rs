//! VAE and plain-autoencoder baselines and the probes that exercise the
//! posterior-collapse / KL-blowup trade-off numerically.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::{normal_tensor, BatchIterator};
use crate::error::{Error, Result};
use crate::model::{Bound, ModelBundle, Network};
use crate::nn::{init_mlp, layer_dims, standard_activations, Activation, AdamConfig, Trainable};
use crate::tensor::{Scalar, Tensor};

/// Range applied to the log-variance head.
pub const LOGVAR_CLAMP: (f64, f64) = (-10.0, 10.0);

/// Per-sample `½ Σ_j (μ_j² + σ_j² − 1 − log σ_j²)` as a `[B×1]` column.
pub fn kl_diag_gaussian<T: Scalar>(tape: &mut Tape<T>, mu: Var, logvar: Var) -> Result<Var> {
    let m2 = tape.square(mu)?;
    let s2 = tape.exp(logvar)?;
    let a = tape.add(m2, s2)?;
    let a = tape.sub(a, logvar)?;
    let a = tape.add_scalar(a, -1.0)?;
    let a = tape.sum_cols(a)?;
    tape.scale(a, 0.5)
}

/// Tensor form of [`kl_diag_gaussian`]; non-finite results are flagged.
pub fn kl_per_sample<T: Scalar>(mu: &Tensor<T>, logvar: &Tensor<T>) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let m = tape.constant(mu.clone());
    let l = tape.constant(logvar.clone());
    let k = kl_diag_gaussian(&mut tape, m, l)?;
    Ok(tape.value(k).to_f64_vec())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeConfig {
    pub data_dim: usize,
    pub latent_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeBundle<T> {
    pub config: VaeConfig,
    /// Outputs `[μ | log σ²]`, `2·latent_dim` columns.
    pub encoder: Trainable<T>,
    pub decoder: Trainable<T>,
}

/// Loss and its two parts for one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeTerms {
    pub loss: Var,
    pub mse: Var,
    pub kl: Var,
}

/// Negative ELBO (MSE reconstruction) on a tape, with the noise `eps` supplied.
pub fn vae_terms<T: Scalar>(
    tape: &mut Tape<T>,
    enc: &dyn Network<T>,
    dec: &dyn Network<T>,
    x: Var,
    eps: &Tensor<T>,
    latent_dim: usize,
    beta: f64,
) -> Result<VaeTerms> {
    let h = enc.apply(tape, x)?;
    if tape.value(h).cols() != 2 * latent_dim {
        return Err(Error::shape("vae encoder", tape.value(h).shape(), &[0, 2 * latent_dim]));
    }
    let mu = tape.slice_cols(h, 0, latent_dim)?;
    let lv = tape.slice_cols(h, latent_dim, 2 * latent_dim)?;
    let lv = tape.clamp(lv, LOGVAR_CLAMP.0, LOGVAR_CLAMP.1)?;
    let half = tape.scale(lv, 0.5)?;
    let sigma = tape.exp(half)?;
    let e = tape.constant(eps.clone());
    let noise = tape.mul(sigma, e)?;
    let z = tape.add(mu, noise)?;
    let x_hat = dec.apply(tape, z)?;
    let diff = tape.sub(x, x_hat)?;
    let mse = tape.mean_sq(diff)?;
    let kl = kl_diag_gaussian(tape, mu, lv)?;
    let kl = tape.mean(kl)?;
    let weighted = tape.scale(kl, beta)?;
    let loss = tape.add(mse, weighted)?;
    Ok(VaeTerms { loss, mse, kl })
}

impl<T: Scalar> VaeBundle<T> {
    pub fn new(config: VaeConfig, opt: AdamConfig, seed: u64) -> Result<Self> {
        let (dx, dz, w, depth) = (config.data_dim, config.latent_dim, config.width, config.depth);
        if dx == 0 || dz == 0 || w == 0 || depth == 0 || !(config.beta >= 0.0) {
            return Err(Error::Invalid(format!("degenerate vae config {config:?}")));
        }
        let acts = standard_activations(depth, Activation::Identity);
        let base = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        Ok(VaeBundle {
            config,
            encoder: Trainable::new(init_mlp(&layer_dims(dx, w, depth, 2 * dz), &acts, base.wrapping_add(11))?, opt),
            decoder: Trainable::new(init_mlp(&layer_dims(dz, w, depth, dx), &acts, base.wrapping_add(12))?, opt),
        })
    }

    /// Posterior means and (clamped) log-variances.
    pub fn moments(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let h = self.encoder.net.infer(x)?;
        let dz = self.config.latent_dim;
        let (lo, hi) = (T::from_f64(LOGVAR_CLAMP.0), T::from_f64(LOGVAR_CLAMP.1));
        let mut mu = Vec::with_capacity(h.rows() * dz);
        let mut lv = Vec::with_capacity(h.rows() * dz);
        for r in 0..h.rows() {
            let row = h.row(r);
            mu.extend_from_slice(&row[..dz]);
            lv.extend(row[dz..].iter().map(|&v| v.max(lo).min(hi)));
        }
        Ok((
            Tensor::new(vec![h.rows(), dz], mu)?,
            Tensor::new(vec![h.rows(), dz], lv)?,
        ))
    }

    /// Decodes the posterior mean.
    pub fn reconstruct(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (mu, _) = self.moments(x)?;
        self.decoder.net.infer(&mu)
    }

    /// Decodes `n` prior draws.
    pub fn generate(&self, n: usize, seed: u64) -> Result<Tensor<T>> {
        if n == 0 {
            return Ok(Tensor::zeros(&[0, self.config.data_dim]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.decoder.net.infer(&normal_tensor(&mut rng, n, self.config.latent_dim))
    }

    /// One Adam step on both networks; returns `(loss, mse, mean kl)`.
    pub fn train_step(&mut self, x: &Tensor<T>, eps: &Tensor<T>) -> Result<(f64, f64, f64)> {
        let mut tape = Tape::new();
        let enc = Bound::new(&self.encoder.net, &mut tape, true);
        let dec = Bound::new(&self.decoder.net, &mut tape, true);
        let xv = tape.constant(x.clone());
        let t = vae_terms(&mut tape, &enc, &dec, xv, eps, self.config.latent_dim, self.config.beta)?;
        let grads = tape.backward(t.loss)?;
        let ge = enc.vars.grads(&grads);
        let gd = dec.vars.grads(&grads);
        let out = (
            tape.value(t.loss).item().as_f64(),
            tape.value(t.mse).item().as_f64(),
            tape.value(t.kl).item().as_f64(),
        );
        self.encoder.apply(&ge)?;
        self.decoder.apply(&gd)?;
        Ok(out)
    }
}

/// Negative ELBO of `bundle` on `x` with noise drawn from `seed`.
pub fn vae_loss<T: Scalar>(x: &Tensor<T>, bundle: &VaeBundle<T>, beta: f64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = normal_tensor(&mut rng, x.rows(), bundle.config.latent_dim);
    let mut tape = Tape::new();
    let enc = Bound::new(&bundle.encoder.net, &mut tape, false);
    let dec = Bound::new(&bundle.decoder.net, &mut tape, false);
    let xv = tape.constant(x.clone());
    let t = vae_terms(&mut tape, &enc, &dec, xv, &eps, bundle.config.latent_dim, beta)?;
    Ok(tape.value(t.loss).item().as_f64())
}

/// Trains `bundle` for `steps` minibatch steps; returns the per-step losses.
///
/// Aborts with [`Error::Diverged`] on the first non-finite loss.
pub fn train_vae<T: Scalar>(
    bundle: &mut VaeBundle<T>,
    data: &Tensor<T>,
    batch: usize,
    steps: u64,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut it = BatchIterator::new(data.rows(), batch, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5641_4500);
    let mut losses = Vec::with_capacity(steps as usize);
    for step in 0..steps {
        let x = it.next_batch(data);
        let eps = normal_tensor(&mut rng, batch, bundle.config.latent_dim);
        let (loss, _, _) = bundle
            .train_step(&x, &eps)
            .map_err(|e| diverged(e, "vae_loss", step))?;
        if !loss.is_finite() {
            return Err(Error::Diverged { key: "vae_loss".into(), step });
        }
        losses.push(loss);
    }
    Ok(losses)
}

fn diverged(e: Error, key: &str, step: u64) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { key: key.into(), step },
        other => other,
    }
}

/// Plain autoencoder on `E`, `G` and latent BN of `bundle`, trained on MSE alone.
///
/// Uses the same batch order, BN handling and optimizer as stage A, so with the
/// critic disabled and zero regularizer weights the two trajectories coincide.
pub fn train_plain_ae(
    bundle: &mut ModelBundle<f32>,
    data: &Tensor<f32>,
    batch: usize,
    steps: u64,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut it = BatchIterator::new(data.rows(), batch, seed)?;
    let mut losses = Vec::with_capacity(steps as usize);
    for step in 0..steps {
        let x = it.next_batch(data);
        let loss = plain_ae_step(bundle, &x).map_err(|e| diverged(e, "ae_mse", step))?;
        losses.push(loss);
    }
    Ok(losses)
}

fn plain_ae_step(bundle: &mut ModelBundle<f32>, x: &Tensor<f32>) -> Result<f64> {
    let mut tape = Tape::new();
    let enc = Bound::new(&bundle.encoder.net, &mut tape, true);
    let dec = Bound::new(&bundle.decoder.net, &mut tape, true);
    let xv = tape.constant(x.clone());
    let raw = enc.apply(&mut tape, xv)?;
    let z = if bundle.config.latent_bn {
        bundle.bn.normalize_batch(&mut tape, raw)?
    } else {
        raw
    };
    let x_hat = dec.apply(&mut tape, z)?;
    let diff = tape.sub(xv, x_hat)?;
    let loss = tape.mean_sq(diff)?;
    let grads = tape.backward(loss)?;
    let (ge, gd) = (enc.vars.grads(&grads), dec.vars.grads(&grads));
    let raw = tape.value(raw).clone();
    let out = tape.value(loss).item().as_f64();
    drop(tape);
    bundle.encoder.apply(&ge)?;
    bundle.decoder.apply(&gd)?;
    if bundle.config.latent_bn {
        bundle.bn.update(&raw);
    }
    Ok(out)
}

/// One row of the KL-blowup probe.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub beta: f64,
    pub max_kl: f64,
    pub mean_kl: f64,
    pub mse: f64,
    /// Set when training produced a non-finite loss; the other fields are NaN.
    pub diverged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeBudget {
    pub width: usize,
    pub depth: usize,
    pub latent_dim: usize,
    pub batch: usize,
    pub steps: u64,
}

/// Trains one VAE per `β` (descending) on `data` and reports the largest
/// per-sample KL over the data set and the posterior-mean reconstruction MSE.
pub fn kl_blowup_probe(data: &Tensor<f32>, betas: &[f64], budget: ProbeBudget, seed: u64) -> Result<Vec<ProbeRow>> {
    if betas.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(Error::Invalid(format!("beta grid must be strictly descending, got {betas:?}")));
    }
    let mut rows = Vec::with_capacity(betas.len());
    for &beta in betas {
        let config = VaeConfig {
            data_dim: data.cols(),
            latent_dim: budget.latent_dim,
            width: budget.width,
            depth: budget.depth,
            beta,
        };
        let mut vae = VaeBundle::<f32>::new(config, AdamConfig::autoencoder(), seed)?;
        let row = match train_vae(&mut vae, data, budget.batch, budget.steps, seed) {
            Ok(_) => {
                let (mu, lv) = vae.moments(data)?;
                let kl = kl_per_sample(&mu, &lv)?;
                let mse = crate::metrics::mse_metric(data, &vae.reconstruct(data)?)?;
                ProbeRow {
                    beta,
                    max_kl: kl.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    mean_kl: kl.iter().sum::<f64>() / kl.len() as f64,
                    mse,
                    diverged: false,
                }
            }
            Err(Error::Diverged { .. }) => ProbeRow {
                beta,
                max_kl: f64::NAN,
                mean_kl: f64::NAN,
                mse: f64::NAN,
                diverged: true,
            },
            Err(e) => return Err(e),
        };
        rows.push(row);
    }
    Ok(rows)
}

pub const PROBE_HEADER: &str = "beta,max_kl,mean_kl,mse";

pub fn probe_csv(rows: &[ProbeRow]) -> String {
    let mut out = format!("{PROBE_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{:e},{:e},{:e}", r.beta, r.max_kl, r.mean_kl, r.mse);
    }
    out
}

/// Spearman rank correlation (no tie handling beyond stable index order).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        for (k, &i) in idx.iter().enumerate() {
            r[i] = k as f64;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

/// Result of training a decoder behind an encoder pinned to the prior.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollapseProbe {
    /// Largest per-coordinate variance of decoder outputs across distinct inputs.
    pub output_variance: f64,
    /// Reconstruction MSE of the collapsed model.
    pub mse: f64,
    /// Per-coordinate variance of the data, the best an input-blind decoder can do.
    pub data_variance: f64,
}

/// Encoder outputs fixed to `μ = 0, log σ² = 0`, so every posterior equals the
/// prior and the KL term vanishes. The decoder is trained on the ELBO and then
/// evaluated on distinct inputs sharing one noise draw.
pub fn collapse_probe(data: &Tensor<f32>, budget: ProbeBudget, seed: u64) -> Result<CollapseProbe> {
    let dz = budget.latent_dim;
    let acts = standard_activations(budget.depth, Activation::Identity);
    let dec_net = init_mlp::<f32>(&layer_dims(dz, budget.width, budget.depth, data.cols()), &acts, seed)?;
    let mut dec = Trainable::new(dec_net, AdamConfig::autoencoder());
    let pinned = |tape: &mut Tape<f32>, x: Var| -> Result<Var> {
        let rows = tape.value(x).rows();
        Ok(tape.constant(Tensor::zeros(&[rows, 2 * dz])))
    };
    let mut it = BatchIterator::new(data.rows(), budget.batch, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC011_A95E);
    for step in 0..budget.steps {
        let x = it.next_batch(data);
        let eps = normal_tensor::<f32, _>(&mut rng, budget.batch, dz);
        let mut tape = Tape::new();
        let bound = Bound::new(&dec.net, &mut tape, true);
        let xv = tape.constant(x);
        let t = vae_terms(&mut tape, &pinned, &bound, xv, &eps, dz, 1.0)
            .map_err(|e| diverged(e, "collapse_loss", step))?;
        let grads = tape.backward(t.loss)?;
        let g = bound.vars.grads(&grads);
        drop(tape);
        dec.apply(&g)?;
    }
    // the decoder input is the same for every x once the encoder is pinned
    let eps = normal_tensor::<f32, _>(&mut rng, 1, dz);
    let z = Tensor::concat_rows(&vec![&eps; data.rows()])?;
    let x_hat = dec.net.infer(&z)?;
    let max_var = |t: &Tensor<f32>| t.cast::<f64>().col_var().data().iter().copied().fold(0.0, f64::max);
    Ok(CollapseProbe {
        output_variance: max_var(&x_hat),
        mse: crate::metrics::mse_metric(data, &x_hat)?,
        data_variance: max_var(data),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::data::{sample_uniform_1d, standard_normal};

    fn kl(mu: &[f64], lv: &[f64], d: usize) -> Vec<f64> {
        let n = mu.len() / d;
        kl_per_sample(
            &Tensor::<f64>::from_f64_slice(&[n, d], mu).unwrap(),
            &Tensor::<f64>::from_f64_slice(&[n, d], lv).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl(&[0.0, 0.0], &[0.0, 0.0], 2), vec![0.0]);
        assert!((kl(&[1.0], &[0.0], 1)[0] - 0.5).abs() < 1e-15);
        assert_eq!(kl(&[0.0, 1.0], &[0.0, 0.0], 1), vec![0.0, 0.5]);
    }

    #[test]
    fn kl_flags_non_finite() {
        assert!(kl_per_sample(
            &Tensor::<f64>::from_f64_slice(&[1, 1], &[f64::NAN]).unwrap(),
            &Tensor::<f64>::from_f64_slice(&[1, 1], &[0.0]).unwrap(),
        )
        .is_err());
    }

    #[test]
    fn kl_matches_monte_carlo() {
        // E_q[log q(z) − log p(z)] with z ~ q
        let (mu, lv) = ([0.7, -1.2, 0.1], [-0.5, 0.8, 0.0]);
        let exact = kl(&mu, &lv, 3)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let mut v = 0.0;
            for j in 0..3 {
                let sd = (0.5 * lv[j]).exp();
                let e = standard_normal(&mut rng);
                let z = mu[j] + sd * e;
                v += -0.5 * e * e - 0.5 * lv[j] + 0.5 * z * z;
            }
            s += v;
            s2 += v * v;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[allow(clippy::type_complexity)]
    fn identity_fixture(d: usize) -> (impl Fn(&mut Tape<f64>, Var) -> Result<Var>, impl Fn(&mut Tape<f64>, Var) -> Result<Var>) {
        let enc = move |tape: &mut Tape<f64>, x: Var| -> Result<Var> {
            // [x | -inf] with the log-variance clamped to -10 downstream
            let rows = tape.value(x).rows();
            let pad = tape.constant(Tensor::full(&[d, 2 * d], 0.0));
            let mut eye = Tensor::zeros(&[d, 2 * d]);
            for i in 0..d {
                eye.data_mut()[i * 2 * d + i] = 1.0;
            }
            let sel = tape.constant(eye);
            let sel = tape.add(sel, pad)?;
            let mu = tape.matmul(x, sel)?;
            let mut lv = Tensor::zeros(&[rows, 2 * d]);
            for r in 0..rows {
                for j in d..2 * d {
                    lv.data_mut()[r * 2 * d + j] = -1e6;
                }
            }
            let lv = tape.constant(lv);
            tape.add(mu, lv)
        };
        let dec = |_: &mut Tape<f64>, z: Var| -> Result<Var> { Ok(z) };
        (enc, dec)
    }

    #[test]
    fn vae_loss_identity_fixture_is_near_zero() {
        let (enc, dec) = identity_fixture(2);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_f64_slice(&[3, 2], &[0.1, -2.0, 3.0, 0.5, 0.0, 1.0]).unwrap());
        let eps = Tensor::from_f64_slice(&[3, 2], &[1.0, -1.0, 0.5, 2.0, -0.3, 0.0]).unwrap();
        let t = vae_terms(&mut tape, &enc, &dec, x, &eps, 2, 0.0).unwrap();
        // residual is σ·ε with σ = e^{-5}
        assert!(tape.value(t.loss).item() < 1e-4);
    }

    #[test]
    fn beta_zero_is_mse_on_sample() {
        let cfg = VaeConfig { data_dim: 2, latent_dim: 2, width: 8, depth: 2, beta: 0.0 };
        let vae = VaeBundle::<f64>::new(cfg, AdamConfig::autoencoder(), 1).unwrap();
        let x = Tensor::from_f64_slice(&[2, 2], &[0.3, -0.1, 0.5, 0.9]).unwrap();
        let eps = Tensor::from_f64_slice(&[2, 2], &[0.2, -0.4, 1.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let enc = Bound::new(&vae.encoder.net, &mut tape, false);
        let dec = Bound::new(&vae.decoder.net, &mut tape, false);
        let xv = tape.constant(x.clone());
        let t = vae_terms(&mut tape, &enc, &dec, xv, &eps, 2, 0.0).unwrap();
        let (mu, lv) = vae.moments(&x).unwrap();
        let mut z = mu.clone();
        for (i, v) in z.data_mut().iter_mut().enumerate() {
            *v += (0.5 * lv.data()[i]).exp() * eps.data()[i];
        }
        let x_hat = vae.decoder.net.infer(&z).unwrap();
        let mse = crate::metrics::mse_metric(&x, &x_hat).unwrap();
        assert!((tape.value(t.loss).item() - mse).abs() < 1e-12);
    }

    #[test]
    fn vae_loss_gradient_with_frozen_noise() {
        let cfg = VaeConfig { data_dim: 2, latent_dim: 1, width: 5, depth: 2, beta: 0.7 };
        let vae = VaeBundle::<f64>::new(cfg, AdamConfig::autoencoder(), 3).unwrap();
        let eps = Tensor::from_f64_slice(&[3, 1], &[0.4, -1.1, 0.2]).unwrap();
        let x = Tensor::from_f64_slice(&[3, 2], &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6]).unwrap();
        let check = grad_check(
            |tape, xv| {
                let enc = Bound::new(&vae.encoder.net, tape, false);
                let dec = Bound::new(&vae.decoder.net, tape, false);
                Ok(vae_terms(tape, &enc, &dec, xv, &eps, 1, 0.7)?.loss)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(check.passed(1e-7), "{check:?}");
    }

    #[test]
    fn vae_training_reduces_loss() {
        let data = sample_uniform_1d::<f32>(512, 2);
        let cfg = VaeConfig { data_dim: 1, latent_dim: 1, width: 32, depth: 3, beta: 0.1 };
        let mut vae = VaeBundle::new(cfg, AdamConfig::autoencoder(), 5).unwrap();
        let losses = train_vae(&mut vae, &data, 64, 300, 5).unwrap();
        let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = losses[280..].iter().sum::<f64>() / 20.0;
        assert!(tail < 0.5 * head, "{head} -> {tail}");
        let a = vae_loss(&data, &vae, 0.1, 9).unwrap();
        assert_eq!(a, vae_loss(&data, &vae, 0.1, 9).unwrap());
    }

    #[test]
    fn probe_rejects_ascending_grid() {
        let data = sample_uniform_1d::<f32>(64, 2);
        let budget = ProbeBudget { width: 4, depth: 2, latent_dim: 1, batch: 16, steps: 1 };
        assert!(kl_blowup_probe(&data, &[0.1, 1.0], budget, 0).is_err());
    }

    #[test]
    fn probe_csv_shape() {
        let rows = vec![ProbeRow { beta: 1.0, max_kl: 0.5, mean_kl: 0.25, mse: 0.01, diverged: false }];
        assert_eq!(probe_csv(&rows), "beta,max_kl,mean_kl,mse\n1,5e-1,2.5e-1,1e-2\n");
    }

    #[test]
    fn spearman_cases() {
        assert_eq!(spearman(&[1., 2., 3.], &[10., 20., 30.]), 1.0);
        assert_eq!(spearman(&[1., 2., 3.], &[3., 2., 1.]), -1.0);
    }

    #[test]
    fn collapse_probe_decoder_ignores_input() {
        let data = sample_uniform_1d::<f32>(256, 1);
        let budget = ProbeBudget { width: 16, depth: 2, latent_dim: 1, batch: 64, steps: 50 };
        let p = collapse_probe(&data, budget, 2).unwrap();
        assert!(p.output_variance < 1e-8, "{p:?}");
        assert!(p.mse >= p.data_variance - 1e-9, "{p:?}");
    }
}
