//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored; every other line must be a known
//! key. Keys not mentioned keep the swiss-roll defaults. Unless `model.dx` is
//! given it follows the dataset's dimension.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::{DatasetKind, SwissRollVariant};
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::training::TrainConfig;

/// Every accepted key, in canonical order.
pub const KEYS: &[&str] = &[
    "seed",
    "data.kind",
    "data.path",
    "data.n",
    "data.noise",
    "data.seed",
    "data.normalize",
    "data.components",
    "data.radius",
    "data.heldout",
    "model.dx",
    "model.dz",
    "model.width",
    "model.depth",
    "model.decoder_output",
    "model.latent_bn",
    "bn.momentum",
    "bn.eps",
    "hp.lambda",
    "hp.gamma",
    "hp.omega1",
    "hp.omega2",
    "hp.mu_max",
    "optim.ae.lr",
    "optim.ae.beta1",
    "optim.ae.beta2",
    "optim.ae.eps",
    "optim.adv.lr",
    "optim.adv.beta1",
    "optim.adv.beta2",
    "optim.adv.eps",
    "train.batch",
    "train.stage_a_steps",
    "train.stage_b_steps",
    "train.critic_steps",
    "train.d_steps",
    "train.grad_clip",
    "train.checkpoint",
    "eval.interval",
    "eval.n_proj",
    "eval.k",
    "eval.n_topo",
];

/// Shorthand that sets both optimizers' learning rates.
const LR_ALIAS: &str = "optim.lr";

fn parse_num<V: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<V, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
}

fn parse_bool(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("{key}: expected true/false, got {v:?}")),
    }
}

fn parse_optional<V: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<Option<V>, String> {
    if v == "none" {
        Ok(None)
    } else {
        parse_num(key, v).map(Some)
    }
}

/// Applies one key to `c`. The `Err` string names the key and the problem.
fn set(c: &mut TrainConfig, key: &str, v: &str) -> std::result::Result<(), String> {
    match key {
        "seed" => c.seed = parse_num(key, v)?,
        "data.kind" => {
            c.data.kind = match v {
                "swiss-roll-3d" => DatasetKind::SwissRoll(SwissRollVariant::Ambient3d),
                "swiss-roll-2d" => DatasetKind::SwissRoll(SwissRollVariant::Planar),
                "gaussian-mixture" => match c.data.kind {
                    DatasetKind::GaussianMixture { .. } => c.data.kind.clone(),
                    _ => DatasetKind::GaussianMixture { components: 8, radius: 1.0 },
                },
                "uniform-1d" => DatasetKind::Uniform1d,
                "idx" => match &c.data.kind {
                    DatasetKind::Idx(_) => c.data.kind.clone(),
                    _ => DatasetKind::Idx(String::new()),
                },
                _ => return Err(format!("{key}: unknown dataset {v:?}")),
            }
        }
        "data.path" => match &mut c.data.kind {
            DatasetKind::Idx(p) => *p = v.to_string(),
            _ => return Err(format!("{key} only applies to data.kind = idx (set data.kind first)")),
        },
        "data.n" => c.data.n = parse_num(key, v)?,
        "data.noise" => c.data.noise = parse_num(key, v)?,
        "data.seed" => c.data.seed = parse_num(key, v)?,
        "data.normalize" => c.data.normalize = parse_bool(key, v)?,
        "data.components" | "data.radius" => match &mut c.data.kind {
            DatasetKind::GaussianMixture { components, radius } => {
                if key == "data.components" {
                    *components = parse_num(key, v)?;
                } else {
                    *radius = parse_num(key, v)?;
                }
            }
            _ => return Err(format!("{key} only applies to data.kind = gaussian-mixture")),
        },
        "data.heldout" => c.heldout = parse_num(key, v)?,
        "model.dx" => c.model.data_dim = parse_num(key, v)?,
        "model.dz" => c.model.latent_dim = parse_num(key, v)?,
        "model.width" => c.model.width = parse_num(key, v)?,
        "model.depth" => c.model.depth = parse_num(key, v)?,
        "model.decoder_output" => {
            c.model.decoder_output = Activation::parse(v).ok_or_else(|| format!("{key}: unknown activation {v:?}"))?
        }
        "model.latent_bn" => c.model.latent_bn = parse_bool(key, v)?,
        "bn.momentum" => c.model.bn_momentum = parse_num(key, v)?,
        "bn.eps" => c.model.bn_eps = parse_num(key, v)?,
        "hp.lambda" => c.hp.lambda = parse_num(key, v)?,
        "hp.gamma" => c.hp.gamma = parse_num(key, v)?,
        "hp.omega1" => c.hp.omega1 = parse_num(key, v)?,
        "hp.omega2" => c.hp.omega2 = parse_num(key, v)?,
        "hp.mu_max" => c.hp.mu_max = parse_num(key, v)?,
        LR_ALIAS => {
            let lr = parse_num(key, v)?;
            c.ae_opt.lr = lr;
            c.adv_opt.lr = lr;
        }
        "optim.ae.lr" => c.ae_opt.lr = parse_num(key, v)?,
        "optim.ae.beta1" => c.ae_opt.beta1 = parse_num(key, v)?,
        "optim.ae.beta2" => c.ae_opt.beta2 = parse_num(key, v)?,
        "optim.ae.eps" => c.ae_opt.eps = parse_num(key, v)?,
        "optim.adv.lr" => c.adv_opt.lr = parse_num(key, v)?,
        "optim.adv.beta1" => c.adv_opt.beta1 = parse_num(key, v)?,
        "optim.adv.beta2" => c.adv_opt.beta2 = parse_num(key, v)?,
        "optim.adv.eps" => c.adv_opt.eps = parse_num(key, v)?,
        "train.batch" => c.batch = parse_num(key, v)?,
        "train.stage_a_steps" => c.stage_a_steps = parse_num(key, v)?,
        "train.stage_b_steps" => c.stage_b_steps = parse_num(key, v)?,
        "train.critic_steps" => c.critic_steps = parse_num(key, v)?,
        "train.d_steps" => c.d_steps = parse_num(key, v)?,
        "train.grad_clip" => c.grad_clip = parse_optional(key, v)?,
        "train.checkpoint" => c.checkpoint = if v == "none" { None } else { Some(PathBuf::from(v)) },
        "eval.interval" => c.eval.interval = parse_num(key, v)?,
        "eval.n_proj" => c.eval.n_proj = parse_num(key, v)?,
        "eval.k" => c.eval.k = parse_num(key, v)?,
        "eval.n_topo" => c.eval.n_topo = parse_num(key, v)?,
        _ => return Err(format!("unknown key {key:?}")),
    }
    Ok(())
}

/// Splits `key=value` and trims both sides.
pub fn split_pair(line: &str) -> Option<(&str, &str)> {
    let (k, v) = line.split_once('=')?;
    let (k, v) = (k.trim(), v.trim());
    (!k.is_empty()).then_some((k, v))
}

/// Builder that applies file lines and command-line overrides in order.
#[derive(Clone, Debug)]
pub struct ConfigBuilder {
    config: TrainConfig,
    dx_given: bool,
}

impl Default for ConfigBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl ConfigBuilder {
    pub fn new() -> Self {
        ConfigBuilder {
            config: TrainConfig::swiss_roll(0),
            dx_given: false,
        }
    }

    fn apply(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        set(&mut self.config, key, value)?;
        self.dx_given |= key == "model.dx";
        Ok(())
    }

    /// Parses a whole file; errors carry the 1-based line number.
    pub fn parse_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = split_pair(line).ok_or_else(|| Error::Config {
                line: i + 1,
                detail: format!("expected key=value, found {:?}", raw.trim()),
            })?;
            self.apply(k, v).map_err(|detail| Error::Config { line: i + 1, detail })?;
        }
        Ok(())
    }

    pub fn parse_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.parse_text(&text)
    }

    /// A `key=value` override from the command line.
    pub fn set_override(&mut self, pair: &str) -> Result<()> {
        let (k, v) = split_pair(pair).ok_or_else(|| Error::Invalid(format!("override {pair:?} is not key=value")))?;
        self.apply(k, v)
            .map_err(|detail| Error::Invalid(format!("override {pair:?}: {detail}")))
    }

    pub fn finish(mut self) -> Result<TrainConfig> {
        if !self.dx_given {
            match self.config.data.dim() {
                Some(d) => self.config.model.data_dim = d,
                None => {
                    return Err(Error::Invalid(
                        "model.dx must be set explicitly for file-backed datasets".into(),
                    ))
                }
            }
        }
        if let DatasetKind::Idx(p) = &self.config.data.kind {
            if p.is_empty() {
                return Err(Error::Invalid("data.kind = idx needs data.path".into()));
            }
        }
        self.config.validate()?;
        Ok(self.config)
    }
}

/// Parses configuration text on top of the defaults.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut b = ConfigBuilder::new();
    b.parse_text(text)?;
    b.finish()
}

/// Canonical `(key, value)` pairs covering every field of `c`.
pub fn to_pairs(c: &TrainConfig) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    let mut put = |k: &str, v: String| out.push((k.to_string(), v));
    put("seed", c.seed.to_string());
    put("data.kind", c.data.kind.name().replace("idx-file", "idx"));
    match &c.data.kind {
        DatasetKind::Idx(p) => put("data.path", p.clone()),
        DatasetKind::GaussianMixture { components, radius } => {
            put("data.components", components.to_string());
            put("data.radius", radius.to_string());
        }
        _ => {}
    }
    put("data.n", c.data.n.to_string());
    put("data.noise", c.data.noise.to_string());
    put("data.seed", c.data.seed.to_string());
    put("data.normalize", c.data.normalize.to_string());
    put("data.heldout", c.heldout.to_string());
    put("model.dx", c.model.data_dim.to_string());
    put("model.dz", c.model.latent_dim.to_string());
    put("model.width", c.model.width.to_string());
    put("model.depth", c.model.depth.to_string());
    put("model.decoder_output", c.model.decoder_output.name());
    put("model.latent_bn", c.model.latent_bn.to_string());
    put("bn.momentum", c.model.bn_momentum.to_string());
    put("bn.eps", c.model.bn_eps.to_string());
    put("hp.lambda", c.hp.lambda.to_string());
    put("hp.gamma", c.hp.gamma.to_string());
    put("hp.omega1", c.hp.omega1.to_string());
    put("hp.omega2", c.hp.omega2.to_string());
    put("hp.mu_max", c.hp.mu_max.to_string());
    for (prefix, o) in [("optim.ae", c.ae_opt), ("optim.adv", c.adv_opt)] {
        put(&format!("{prefix}.lr"), o.lr.to_string());
        put(&format!("{prefix}.beta1"), o.beta1.to_string());
        put(&format!("{prefix}.beta2"), o.beta2.to_string());
        put(&format!("{prefix}.eps"), o.eps.to_string());
    }
    put("train.batch", c.batch.to_string());
    put("train.stage_a_steps", c.stage_a_steps.to_string());
    put("train.stage_b_steps", c.stage_b_steps.to_string());
    put("train.critic_steps", c.critic_steps.to_string());
    put("train.d_steps", c.d_steps.to_string());
    put("train.grad_clip", c.grad_clip.map_or("none".into(), |v| v.to_string()));
    put(
        "train.checkpoint",
        c.checkpoint.as_ref().map_or("none".into(), |p| p.display().to_string()),
    );
    put("eval.interval", c.eval.interval.to_string());
    put("eval.n_proj", c.eval.n_proj.to_string());
    put("eval.k", c.eval.k.to_string());
    put("eval.n_topo", c.eval.n_topo.to_string());
    out
}

/// Canonical file text; parses back to an equal config.
pub fn to_text(c: &TrainConfig) -> String {
    to_pairs(c).into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Rebuilds a config from `config.*` checkpoint metadata.
pub fn from_checkpoint_meta(ck: &crate::checkpoint::Checkpoint) -> Result<TrainConfig> {
    let mut b = ConfigBuilder::new();
    let mut any = false;
    // data.kind must precede the keys that depend on it
    let mut pairs: Vec<(&str, &str)> = ck
        .meta
        .iter()
        .filter_map(|(k, v)| Some((k.strip_prefix("config.")?, v.as_str())))
        .collect();
    pairs.sort_by_key(|(k, _)| KEYS.iter().position(|x| x == k).unwrap_or(usize::MAX));
    for (k, v) in pairs {
        b.apply(k, v).map_err(|detail| Error::CkptHeader { line: 0, detail })?;
        any = true;
    }
    if !any {
        return Err(Error::CkptMissing("@config.*".into()));
    }
    b.finish()
}

/// Content-addressed run directory name: hash of the canonical config (which
/// includes the seed) plus the seed.
pub fn run_dir_name(c: &TrainConfig) -> String {
    let digest = Sha256::digest(to_text(c).as_bytes());
    let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
    format!("{hex}-s{}", c.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_comments() {
        let c = parse_config("# nothing\n\n  seed = 4 # trailing\n").unwrap();
        let mut d = TrainConfig::swiss_roll(4);
        d.model.data_dim = 3;
        assert_eq!(c, d);
    }

    #[test]
    fn unknown_key_names_line() {
        let err = parse_config("seed = 1\nhp.lamda = 0.3\n").unwrap_err();
        match err {
            Error::Config { line, detail } => {
                assert_eq!(line, 2);
                assert!(detail.contains("hp.lamda"), "{detail}");
            }
            e => panic!("{e}"),
        }
        assert!(matches!(parse_config("just words").unwrap_err(), Error::Config { line: 1, .. }));
        assert!(matches!(parse_config("\n\ntrain.batch = x").unwrap_err(), Error::Config { line: 3, .. }));
    }

    #[test]
    fn every_key_is_reachable_and_round_trips() {
        let text = "data.kind = gaussian-mixture\ndata.components = 5\ndata.radius = 2.5\nhp.lambda = 0.3\n\
                    hp.gamma = 0.1\nhp.omega1 = 0.25\nhp.omega2 = 0\nhp.mu_max = 0.4\nmodel.dz = 4\n\
                    model.latent_bn = false\ntrain.grad_clip = 5\noptim.adv.beta1 = 0.6\nseed = 12\n";
        let c = parse_config(text).unwrap();
        assert_eq!(c.hp.lambda, 0.3);
        assert_eq!(c.hp.omega2, 0.0);
        assert_eq!(c.model.data_dim, 2);
        assert_eq!(parse_config(&to_text(&c)).unwrap(), c);
        let keys: Vec<String> = to_pairs(&c).into_iter().map(|(k, _)| k).collect();
        for k in &keys {
            assert!(KEYS.contains(&k.as_str()), "{k}");
        }
    }

    #[test]
    fn idx_requires_path_and_dx() {
        assert!(parse_config("data.kind = idx\nmodel.dx = 784").is_err());
        assert!(parse_config("data.kind = idx\ndata.path = /x").is_err());
        let c = parse_config("data.kind = idx\ndata.path = /x\nmodel.dx = 784").unwrap();
        assert_eq!(c.data.kind, DatasetKind::Idx("/x".into()));
        assert!(parse_config("data.path = /x").is_err());
    }

    #[test]
    fn overrides_beat_file() {
        let mut b = ConfigBuilder::new();
        b.parse_text("seed = 3\n").unwrap();
        b.set_override("seed=9").unwrap();
        assert_eq!(b.finish().unwrap().seed, 9);
        assert!(ConfigBuilder::new().set_override("nope=1").is_err());
        assert!(ConfigBuilder::new().set_override("seed").is_err());
    }

    #[test]
    fn lr_alias_sets_both() {
        let c = parse_config("optim.lr = 0.01").unwrap();
        assert_eq!((c.ae_opt.lr, c.adv_opt.lr), (0.01, 0.01));
    }

    #[test]
    fn run_dir_is_content_addressed() {
        let a = parse_config("seed = 1").unwrap();
        let b = parse_config("# same\nseed=1\n").unwrap();
        let c = parse_config("seed = 2").unwrap();
        assert_eq!(run_dir_name(&a), run_dir_name(&b));
        assert_ne!(run_dir_name(&a), run_dir_name(&c));
        assert!(run_dir_name(&c).ends_with("-s2"));
    }
}
