//! Two-stage schedule: stage A trains the autoencoder against the interpolation
//! critic, stage B fits the latent generator to the frozen embedding.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::checkpoint::{restore_bundle, store_bundle, Checkpoint};
use crate::data::{normal_tensor, sample_prior, BatchIterator, DatasetKind, DatasetSpec};
use crate::error::{Error, Result};
use crate::metrics::{latent_moments, mse_metric, sliced_w2, trustworthiness_continuity, MetricReport};
use crate::model::{
    ae_forward, ae_loss_terms, critic_loss, hinge_terms, latent_gen_loss, Bound, Hyperparams, ModelBundle, ModelConfig, Network,
};
use crate::nn::{AdamConfig, Trainable};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    /// Steps between periodic evaluations (and checkpoints).
    pub interval: u64,
    pub n_proj: usize,
    /// Neighbourhood size for trustworthiness / continuity.
    pub k: usize,
    /// Held-out points used for the neighbourhood scores (0 = all).
    pub n_topo: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            interval: 500,
            n_proj: 128,
            k: 10,
            n_topo: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub data: DatasetSpec,
    /// Held-out evaluation points, drawn independently of the training set.
    pub heldout: usize,
    pub model: ModelConfig,
    pub hp: Hyperparams,
    pub ae_opt: AdamConfig,
    pub adv_opt: AdamConfig,
    pub batch: usize,
    pub stage_a_steps: u64,
    pub stage_b_steps: u64,
    /// Critic updates per autoencoder update; 0 switches the critic off.
    pub critic_steps: usize,
    /// Latent-critic updates per generator update.
    pub d_steps: usize,
    /// Per-network global gradient-norm bound.
    pub grad_clip: Option<f64>,
    pub eval: EvalConfig,
    pub seed: u64,
    /// Periodic checkpoint target.
    pub checkpoint: Option<PathBuf>,
}

impl TrainConfig {
    /// 5000-point 3-D swiss roll, `B = 256`, 4000 + 4000 steps.
    pub fn swiss_roll(seed: u64) -> Self {
        TrainConfig {
            data: DatasetSpec::swiss_roll_3d(5000, 0),
            heldout: 1000,
            model: ModelConfig::new(3, 2),
            hp: Hyperparams::default(),
            ae_opt: AdamConfig::autoencoder(),
            adv_opt: AdamConfig::adversarial(),
            batch: 256,
            stage_a_steps: 4000,
            stage_b_steps: 4000,
            critic_steps: 1,
            d_steps: 1,
            grad_clip: None,
            eval: EvalConfig::default(),
            seed,
            checkpoint: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.hp.validate()?;
        let bad = |m: String| Err(Error::Invalid(m));
        if self.stage_a_steps == 0 || self.stage_b_steps == 0 {
            return bad("stage step counts must be positive".into());
        }
        if self.d_steps == 0 {
            return bad("d_steps must be ≥ 1".into());
        }
        if self.batch < 2 {
            return bad(format!("batch size must be ≥ 2 for batch statistics, got {}", self.batch));
        }
        if self.heldout < 2 {
            return bad(format!("need at least 2 held-out points, got {}", self.heldout));
        }
        if self.eval.interval == 0 || self.eval.n_proj == 0 {
            return bad("eval interval and projection count must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        if let Some(d) = self.data.dim() {
            if d != self.model.data_dim {
                return bad(format!("dataset dimension {d} but model.dx = {}", self.model.data_dim));
            }
        }
        Ok(())
    }

    /// Training and held-out sets. Synthetic held-out points come from a derived
    /// seed; file data is split at the tail.
    pub fn datasets(&self) -> Result<(Tensor<f32>, Tensor<f32>)> {
        if let DatasetKind::Idx(_) = self.data.kind {
            let mut spec = self.data.clone();
            spec.n = spec.n.saturating_add(self.heldout);
            let all = spec.generate::<f32>()?;
            if all.rows() <= self.heldout + self.batch {
                return Err(Error::Invalid(format!(
                    "file has {} rows, too few for {} held-out plus a batch of {}",
                    all.rows(),
                    self.heldout,
                    self.batch
                )));
            }
            let cut = all.rows() - self.heldout;
            return Ok((all.slice_rows(0, cut), all.slice_rows(cut, all.rows())));
        }
        let train = self.data.generate::<f32>()?;
        let mut held = self.data.clone();
        held.n = self.heldout;
        held.seed = self.data.seed ^ HELDOUT_SALT;
        Ok((train, held.generate()?))
    }
}

const HELDOUT_SALT: u64 = 0x4845_4C44_4F55_5400;
const EVAL_SALT: u64 = 0x4556_414C_0000_0001;
const SAMPLE_SALT: u64 = 0x5341_4D50_0000_0002;

#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub step: u64,
    pub key: String,
    pub value: f64,
}

/// Loss time series plus periodic metric reports.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub entries: Vec<LogEntry>,
    pub reports: Vec<(u64, MetricReport)>,
    /// Set once a non-finite value was offered.
    pub failed: Option<String>,
}

pub const RUNLOG_HEADER: &str = "step,key,value";

impl RunLog {
    /// Appends an entry; steps must not decrease and values must be finite.
    pub fn push(&mut self, step: u64, key: &str, value: f64) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if step < last.step {
                return Err(Error::Invalid(format!("log step {step} after {}", last.step)));
            }
        }
        if !value.is_finite() {
            self.failed = Some(format!("{key} = {value} at step {step}"));
            return Err(Error::Diverged { key: key.to_string(), step });
        }
        self.entries.push(LogEntry { step, key: key.to_string(), value });
        Ok(())
    }

    pub fn series(&self, key: &str) -> Vec<(u64, f64)> {
        self.entries
            .iter()
            .filter(|e| e.key == key)
            .map(|e| (e.step, e.value))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{RUNLOG_HEADER}\n");
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{:e}", e.step, e.key, e.value);
        }
        out
    }
}

/// Worst-case post-BN moments over all training batches seen.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BnAudit {
    pub batches: u64,
    /// `max |mean_j|` over batches and dimensions.
    pub worst_mean: f64,
    /// `max |var_j − 1/(1+ε)|` over batches and dimensions.
    pub worst_var_dev: f64,
    /// Smallest pre-BN per-dimension variance seen.
    pub min_raw_var: f64,
}

/// Per-dimension `(max |mean|, max |var − 1/(1+ε)|)` of a normalized batch.
pub fn bn_batch_moments(z_hat: &Tensor<f32>, eps: f64) -> (f64, f64) {
    let z = z_hat.cast::<f64>();
    let target = 1.0 / (1.0 + eps);
    let m = z.col_mean().data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let v = z.col_var().data().iter().fold(0.0f64, |a, v| a.max((v - target).abs()));
    (m, v)
}

/// Scales `grads` so their joint L2 norm is at most `max`.
pub fn clip_grad_norm(grads: &mut [Tensor<f32>], max: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let s = (max / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageALosses {
    /// Last critic loss of the iteration (NaN when the critic is off).
    pub critic: f64,
    pub ae: f64,
    pub mse: f64,
    /// Post-BN batch moments, see [`bn_batch_moments`].
    pub bn: Option<(f64, f64)>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageBLosses {
    pub d: f64,
    pub g: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    A,
    B,
    Done,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub bundle: ModelBundle<f32>,
    pub train: Tensor<f32>,
    pub heldout: Tensor<f32>,
    pub log: RunLog,
    pub bn_audit: BnAudit,
    iter: BatchIterator,
    rng: ChaCha8Rng,
    step: u64,
    embeddings: Option<Tensor<f32>>,
}

fn critic_update(
    critic: &mut Trainable<f32>,
    hp: Hyperparams,
    clip: Option<f64>,
    x: &Tensor<f32>,
    x_hat: &Tensor<f32>,
    x_mu: &Tensor<f32>,
    mu: &Tensor<f32>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = Bound::new(&critic.net, &mut tape, true);
    let loss = critic_loss(&mut tape, &bound, x, x_hat, x_mu, mu, hp.gamma, hp.lambda)?;
    let grads = tape.backward(loss)?;
    let mut g = bound.vars.grads(&grads);
    let value = tape.value(loss).item() as f64;
    drop(tape);
    if let Some(c) = clip {
        clip_grad_norm(&mut g, c);
    }
    critic.apply(&g)?;
    Ok(value)
}

fn to_diverged(e: Error, key: &str, step: u64) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { key: key.to_string(), step },
        other => other,
    }
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (train, heldout) = config.datasets()?;
        if train.cols() != config.model.data_dim {
            return Err(Error::Invalid(format!(
                "data has {} columns but model.dx = {}",
                train.cols(),
                config.model.data_dim
            )));
        }
        let bundle = ModelBundle::new(config.model, config.hp, config.ae_opt, config.adv_opt, config.seed)?;
        let iter = BatchIterator::new(train.rows(), config.batch, config.seed)?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer {
            config,
            bundle,
            train,
            heldout,
            log: RunLog::default(),
            bn_audit: BnAudit {
                min_raw_var: f64::INFINITY,
                ..Default::default()
            },
            iter,
            rng,
            step: 0,
            embeddings: None,
        })
    }

    /// Completed iterations across both stages.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn stage(&self) -> Stage {
        let c = &self.config;
        if self.step < c.stage_a_steps {
            Stage::A
        } else if self.step < c.stage_a_steps + c.stage_b_steps {
            Stage::B
        } else {
            Stage::Done
        }
    }

    fn uniform_mu(&mut self, rows: usize) -> Tensor<f32> {
        let hi = self.config.hp.mu_max;
        let data = (0..rows).map(|_| (self.rng.random::<f64>() * hi) as f32).collect();
        Tensor::new(vec![rows, 1], data).expect("sized")
    }

    fn clip(&self, grads: &mut [Tensor<f32>]) {
        if let Some(c) = self.config.grad_clip {
            clip_grad_norm(grads, c);
        }
    }

    /// One critic update on `L_dis` with the autoencoder outputs held fixed.
    pub fn critic_step(
        &mut self,
        x: &Tensor<f32>,
        x_hat: &Tensor<f32>,
        x_mu: &Tensor<f32>,
        mu: &Tensor<f32>,
    ) -> Result<f64> {
        let (hp, clip) = (self.config.hp, self.config.grad_clip);
        critic_update(&mut self.bundle.critic, hp, clip, x, x_hat, x_mu, mu)
    }

    /// Critic update(s) followed by one autoencoder update on the same batch.
    pub fn stage_a_step(&mut self) -> Result<StageALosses> {
        let step = self.step;
        let out = self.stage_a_inner().map_err(|e| to_diverged(e, "stage_a", step))?;
        self.log.push(step, "ae_loss", out.ae)?;
        self.log.push(step, "ae_mse", out.mse)?;
        if let Some((m, v)) = out.bn {
            self.log.push(step, "bn_mean_max", m)?;
            self.log.push(step, "bn_var_dev", v)?;
        }
        if self.config.critic_steps > 0 {
            self.log.push(step, "critic_loss", out.critic)?;
        }
        self.step += 1;
        Ok(out)
    }

    fn stage_a_inner(&mut self) -> Result<StageALosses> {
        let x = self.iter.next_batch(&self.train);
        let rows = x.rows();
        let mu = self.uniform_mu(rows);
        let hp = self.config.hp;
        let need_interp = self.config.critic_steps > 0 || hp.omega1 != 0.0;
        let use_bn = self.config.model.latent_bn;

        let mut tape = Tape::new();
        let enc = Bound::new(&self.bundle.encoder.net, &mut tape, true);
        let dec = Bound::new(&self.bundle.decoder.net, &mut tape, true);
        let xv = tape.constant(x.clone());
        let bn_eps = use_bn.then_some(self.config.model.bn_eps);
        let fwd = ae_forward(&mut tape, &enc, &dec, xv, need_interp.then_some(&mu), bn_eps)?;
        let (raw, z, x_hat, x_mu) = (fwd.raw, fwd.z, fwd.x_hat, fwd.x_mu);

        let mut bn = None;
        if use_bn {
            let (m, v) = bn_batch_moments(tape.value(z), self.config.model.bn_eps);
            bn = Some((m, v));
            let raw_var = tape
                .value(raw)
                .cast::<f64>()
                .col_var()
                .data()
                .iter()
                .fold(f64::INFINITY, |a, &b| a.min(b));
            let a = &mut self.bn_audit;
            a.batches += 1;
            a.worst_mean = a.worst_mean.max(m);
            a.worst_var_dev = a.worst_var_dev.max(v);
            a.min_raw_var = a.min_raw_var.min(raw_var);
        }

        let mut critic_value = f64::NAN;
        if self.config.critic_steps > 0 {
            let xh = tape.value(x_hat).clone();
            let xm = tape.value(x_mu.expect("interpolants computed")).clone();
            for _ in 0..self.config.critic_steps {
                critic_value = critic_update(
                    &mut self.bundle.critic,
                    hp,
                    self.config.grad_clip,
                    &x,
                    &xh,
                    &xm,
                    &mu,
                )?;
            }
        }

        let critic = Bound::new(&self.bundle.critic.net, &mut tape, false);
        let diff = tape.sub(xv, x_hat)?;
        let mse = tape.mean_sq(diff)?;
        let loss = ae_loss_terms(
            &mut tape,
            &critic,
            xv,
            x_hat,
            x_mu.unwrap_or(x_hat),
            hp.omega1,
            hp.omega2,
        )?;
        let grads = tape.backward(loss)?;
        let mut ge = enc.vars.grads(&grads);
        let mut gd = dec.vars.grads(&grads);
        let raw_value = tape.value(raw).clone();
        let out = StageALosses {
            critic: critic_value,
            ae: tape.value(loss).item() as f64,
            mse: tape.value(mse).item() as f64,
            bn,
        };
        drop(tape);
        self.clip(&mut ge);
        self.clip(&mut gd);
        self.bundle.encoder.apply(&ge)?;
        self.bundle.decoder.apply(&gd)?;
        if use_bn {
            self.bundle.bn.update(&raw_value);
        }
        Ok(out)
    }

    /// `BN_run(E(x))` over the training set, cached for stage B.
    pub fn embeddings(&mut self) -> Result<&Tensor<f32>> {
        if self.embeddings.is_none() {
            self.embeddings = Some(self.bundle.embed(&self.train)?);
        }
        Ok(self.embeddings.as_ref().expect("just set"))
    }

    /// Latent-critic update(s) then one generator update.
    pub fn stage_b_step(&mut self) -> Result<StageBLosses> {
        let step = self.step;
        let out = self.stage_b_inner().map_err(|e| to_diverged(e, "stage_b", step))?;
        self.log.push(step, "d_loss", out.d)?;
        self.log.push(step, "g_loss", out.g)?;
        self.step += 1;
        Ok(out)
    }

    fn stage_b_inner(&mut self) -> Result<StageBLosses> {
        self.embeddings()?;
        let (b, dz) = (self.config.batch, self.config.model.latent_dim);
        let mut d_value = f64::NAN;
        for _ in 0..self.config.d_steps {
            let idx = self.iter.next_indices();
            let real = self.embeddings.as_ref().expect("cached").select_rows(&idx);
            let z = normal_tensor::<f32, _>(&mut self.rng, b, dz);
            let fake = self.bundle.map_prior(&z)?;
            let mut tape = Tape::new();
            let disc = Bound::new(&self.bundle.latent_critic.net, &mut tape, true);
            let rv = tape.constant(real);
            let fv = tape.constant(fake);
            let rs = disc.apply(&mut tape, rv)?;
            let fs = disc.apply(&mut tape, fv)?;
            let loss = hinge_terms(&mut tape, rs, fs)?;
            let grads = tape.backward(loss)?;
            let mut g = disc.vars.grads(&grads);
            d_value = tape.value(loss).item() as f64;
            drop(tape);
            self.clip(&mut g);
            self.bundle.latent_critic.apply(&g)?;
        }
        let z = normal_tensor::<f32, _>(&mut self.rng, b, dz);
        let mut tape = Tape::new();
        let mapper = Bound::new(&self.bundle.mapper.net, &mut tape, true);
        let disc = Bound::new(&self.bundle.latent_critic.net, &mut tape, false);
        let loss = latent_gen_loss(&mut tape, &mapper, &disc, &z)?;
        let grads = tape.backward(loss)?;
        let mut g = mapper.vars.grads(&grads);
        let g_value = tape.value(loss).item() as f64;
        drop(tape);
        self.clip(&mut g);
        self.bundle.mapper.apply(&g)?;
        Ok(StageBLosses { d: d_value, g: g_value })
    }

    /// Sliced W₂ between `g(z)` for a fixed prior draw and the training embeddings.
    pub fn latent_sw2(&mut self) -> Result<f64> {
        let n = self.train.rows();
        let z = sample_prior::<f32>(n, self.config.model.latent_dim, self.config.seed ^ EVAL_SALT);
        let mapped = self.bundle.map_prior(&z)?;
        let (n_proj, seed) = (self.config.eval.n_proj, self.config.seed);
        sliced_w2(&mapped, self.embeddings()?, n_proj, seed ^ EVAL_SALT)
    }

    fn maybe_checkpoint(&self) -> Result<()> {
        if let Some(path) = &self.config.checkpoint {
            self.to_checkpoint().save(path)?;
        }
        Ok(())
    }

    /// Runs stage A to completion.
    pub fn run_stage_a(&mut self) -> Result<()> {
        while self.stage() == Stage::A {
            self.stage_a_step()?;
            if self.step.is_multiple_of(self.config.eval.interval) {
                self.maybe_checkpoint()?;
            }
        }
        Ok(())
    }

    /// Runs stage B to completion, logging `sw2_latent` at its start and periodically.
    pub fn run_stage_b(&mut self) -> Result<()> {
        let start = self.config.stage_a_steps;
        if self.step == start {
            let v = self.latent_sw2()?;
            self.log.push(self.step, "sw2_latent", v)?;
        }
        while self.stage() == Stage::B {
            self.stage_b_step()?;
            if (self.step - start).is_multiple_of(self.config.eval.interval) {
                let v = self.latent_sw2()?;
                self.log.push(self.step, "sw2_latent", v)?;
                self.maybe_checkpoint()?;
            }
        }
        Ok(())
    }

    /// Both stages, then the final report (also appended to the log).
    pub fn run(&mut self) -> Result<MetricReport> {
        self.run_stage_a()?;
        self.run_stage_b()?;
        let report = self.evaluate()?;
        self.log.reports.push((self.step, report.clone()));
        self.maybe_checkpoint()?;
        Ok(report)
    }

    /// Held-out metrics for the current model.
    pub fn evaluate(&mut self) -> Result<MetricReport> {
        let cfg = self.config.clone();
        let mut r = MetricReport::new(cfg.seed);
        let held = self.heldout.clone();
        let n = held.rows();

        r.set("mse", mse_metric(&held, &self.bundle.reconstruct(&held)?)?);
        let z = self.bundle.embed(&held)?;
        let (mean_norm, var_dev) = latent_moments(&z)?;
        r.set("latent_mean_norm", mean_norm);
        r.set("latent_var_dev", var_dev);

        let samples = self.bundle.generate(n, cfg.seed ^ SAMPLE_SALT)?;
        r.set("sw2_data", sliced_w2(&samples, &held, cfg.eval.n_proj, cfg.seed ^ EVAL_SALT)?);
        r.set("sw2_latent", self.latent_sw2()?);

        // midpoints between each held-out embedding and its mirror in the batch
        let mid = z.zip_map(&z.reversed_rows(), "interp", |a, b| 0.5 * a + 0.5 * b)?;
        let interp = self.bundle.decode(&mid)?;
        r.set("interp_sw2", sliced_w2(&interp, &held, cfg.eval.n_proj, cfg.seed ^ EVAL_SALT)?);

        let n_topo = if cfg.eval.n_topo == 0 { n } else { cfg.eval.n_topo.min(n) };
        let (tw, co) = trustworthiness_continuity(&held.slice_rows(0, n_topo), &z.slice_rows(0, n_topo), cfg.eval.k)?;
        r.set("trustworthiness", tw);
        r.set("continuity", co);

        r.count("train", self.train.rows());
        r.count("heldout", n);
        r.count("topo", n_topo);
        r.count("proj", cfg.eval.n_proj);
        r.count("k", cfg.eval.k);
        if !r.all_finite() {
            return Err(Error::Diverged { key: "report".into(), step: self.step });
        }
        Ok(r)
    }

    /// Full resumable state: parameters, optimizer moments, BN, RNG and iterator positions.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        store_bundle(&self.bundle, &mut ck);
        ck.set_meta("step", self.step);
        let (epoch, cursor) = self.iter.position();
        ck.set_meta("iter.epoch", epoch);
        ck.set_meta("iter.cursor", cursor);
        ck.set_meta("rng.word_pos", self.rng.get_word_pos());
        ck.set_meta("rng.stream", self.rng.get_stream());
        for (k, v) in crate::config::to_pairs(&self.config) {
            ck.set_meta(&format!("config.{k}"), v);
        }
        ck
    }

    /// Rebuilds a trainer from `config` and a checkpoint written by [`Trainer::to_checkpoint`].
    pub fn resume(config: TrainConfig, ck: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(config)?;
        restore_bundle(&mut t.bundle, ck)?;
        t.step = ck.meta_parse("step")?;
        t.iter.seek(ck.meta_parse("iter.epoch")?, ck.meta_parse("iter.cursor")?);
        t.rng.set_stream(ck.meta_parse("rng.stream")?);
        t.rng.set_word_pos(ck.meta_parse("rng.word_pos")?);
        Ok(t)
    }
}

/// Trains with `config` and returns the trainer (log, bundle) and final report.
pub fn run_experiment(config: TrainConfig) -> Result<(Trainer, MetricReport)> {
    let mut t = Trainer::new(config)?;
    let report = t.run()?;
    Ok((t, report))
}
