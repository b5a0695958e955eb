//! Versioned checkpoint container.
//!
//! ```text
//! LMCKPT v1
//! encoder.0.weight 3 256 0
//! encoder.0.bias 1 256 3072
//! @bn.updates 4000
//! ...
//! <blank line>
//! <little-endian f32 payloads>
//! ```
//!
//! Tensor lines are `name dims... byte_offset`, with offsets relative to the
//! start of the payload; they are authoritative, so header order is free.
//! Lines starting with `@` carry scalar metadata (`@key value`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::tensor::Tensor;

pub const MAGIC: &str = "LMCKPT";
pub const VERSION: &str = "v1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub meta: BTreeMap<String, String>,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && !name.starts_with('@') && !name.chars().any(char::is_whitespace)
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor<f32>) {
        assert!(valid_name(name), "bad tensor name {name:?}");
        assert!(self.tensor(name).is_none(), "duplicate tensor {name}");
        self.tensors.push((name.to_string(), t));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensor(name).ok_or_else(|| Error::CkptMissing(name.to_string()))
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        assert!(valid_name(key), "bad meta key {key:?}");
        let value = value.to_string();
        assert!(!value.contains('\n'), "meta value for {key} spans lines");
        self.meta.insert(key.to_string(), value);
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::CkptMissing(format!("@{key}")))
    }

    pub fn meta_parse<V: FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.meta(key)?;
        raw.parse().map_err(|_| Error::CkptHeader {
            line: 0,
            detail: format!("metadata @{key} has unparsable value {raw:?}"),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC} {VERSION}\n");
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(header, "{name} {} {offset}", dims.join(" "));
            offset += 4 * t.len();
        }
        for (k, v) in &self.meta {
            let _ = writeln!(header, "@{k} {v}");
        }
        header.push('\n');
        let mut out = header.into_bytes();
        out.reserve(offset);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| Error::CkptHeader {
                line: 1,
                detail: "no blank line terminating the header".into(),
            })?;
        let header = std::str::from_utf8(&bytes[..split]).map_err(|e| Error::CkptHeader {
            line: 1 + bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count(),
            detail: "header is not valid UTF-8".into(),
        })?;
        let payload = &bytes[split + 2..];
        let mut lines = header.lines().enumerate();

        let (_, first) = lines.next().unwrap_or((0, ""));
        match first.split_once(' ') {
            Some((MAGIC, VERSION)) => {}
            Some((MAGIC, found)) => {
                return Err(Error::CkptVersion {
                    found: found.to_string(),
                    expected: VERSION.to_string(),
                })
            }
            _ => {
                return Err(Error::CkptHeader {
                    line: 1,
                    detail: format!("expected \"{MAGIC} {VERSION}\", found {first:?}"),
                })
            }
        }

        let mut ck = Checkpoint::new();
        let mut regions: Vec<(usize, usize, usize)> = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            let bad = |detail: String| Error::CkptHeader { line: lineno, detail };
            if let Some(rest) = line.strip_prefix('@') {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                if !valid_name(k) || ck.meta.contains_key(k) {
                    return Err(bad(format!("bad or duplicate metadata key {k:?}")));
                }
                ck.meta.insert(k.to_string(), v.to_string());
                continue;
            }
            let fields: Vec<&str> = line.split(' ').collect();
            if fields.len() < 3 || !valid_name(fields[0]) {
                return Err(bad(format!("expected \"name dims... offset\", found {line:?}")));
            }
            let nums: std::result::Result<Vec<usize>, _> = fields[1..].iter().map(|f| f.parse::<usize>()).collect();
            let nums = nums.map_err(|_| bad(format!("non-numeric shape or offset in {line:?}")))?;
            let (dims, offset) = nums.split_at(nums.len() - 1);
            let name = fields[0];
            if ck.tensor(name).is_some() {
                return Err(bad(format!("tensor {name} listed twice")));
            }
            let count = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|c| c.checked_mul(4))
                .ok_or_else(|| bad(format!("shape of {name} overflows")))?;
            let start = offset[0];
            let end = start.checked_add(count).ok_or_else(|| bad(format!("offset of {name} overflows")))?;
            if end > payload.len() {
                return Err(Error::CkptOverrun {
                    name: name.to_string(),
                    start,
                    end,
                    size: payload.len(),
                });
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            regions.push((start, end, lineno));
            ck.tensors.push((name.to_string(), Tensor::new(dims.to_vec(), data)?));
        }

        regions.sort();
        for w in regions.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::CkptHeader {
                    line: w[1].2,
                    detail: "tensor payload overlaps another tensor".into(),
                });
            }
        }
        let expected = regions.iter().map(|r| r.1).max().unwrap_or(0);
        if payload.len() > expected {
            return Err(Error::CkptTrailing {
                expected,
                extra: payload.len() - expected,
            });
        }
        Ok(ck)
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Same names, same order, bit-identical tensors and equal metadata.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.meta == other.meta
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((a, x), (b, y))| a == b && x.bit_eq(y))
    }
}

/// Stores every network parameter, the Adam moments and counters and the BN state.
pub fn store_bundle(bundle: &ModelBundle<f32>, ck: &mut Checkpoint) {
    for (net, tr) in bundle.networks() {
        for (pname, t) in tr.net.named_params() {
            ck.insert(&format!("{net}.{pname}"), t.clone());
        }
        for (i, (m, v)) in tr.opt.m.iter().zip(&tr.opt.v).enumerate() {
            ck.insert(&format!("{net}.adam_m.{i}"), m.clone());
            ck.insert(&format!("{net}.adam_v.{i}"), v.clone());
        }
        ck.set_meta(&format!("{net}.adam_t"), tr.opt.t);
    }
    ck.insert("bn.running_mean", bundle.bn.running_mean.clone());
    ck.insert("bn.running_var", bundle.bn.running_var.clone());
    ck.set_meta("bn.updates", bundle.bn.updates);
}

fn fill(dst: &mut Tensor<f32>, ck: &Checkpoint, name: &str) -> Result<()> {
    let src = ck.require(name)?;
    if src.shape() != dst.shape() {
        return Err(Error::shape("checkpoint tensor", src.shape(), dst.shape()));
    }
    dst.data_mut().copy_from_slice(src.data());
    Ok(())
}

/// Overwrites `bundle`'s state from `ck`; shapes must match the bundle's architecture.
pub fn restore_bundle(bundle: &mut ModelBundle<f32>, ck: &Checkpoint) -> Result<()> {
    for (net, tr) in bundle.networks_mut() {
        let names: Vec<String> = tr.net.named_params().into_iter().map(|(n, _)| n).collect();
        for (pname, dst) in names.iter().zip(tr.net.params_mut()) {
            fill(dst, ck, &format!("{net}.{pname}"))?;
        }
        for (i, m) in tr.opt.m.iter_mut().enumerate() {
            fill(m, ck, &format!("{net}.adam_m.{i}"))?;
        }
        for (i, v) in tr.opt.v.iter_mut().enumerate() {
            fill(v, ck, &format!("{net}.adam_v.{i}"))?;
        }
        tr.opt.t = ck.meta_parse(&format!("{net}.adam_t"))?;
    }
    fill(&mut bundle.bn.running_mean, ck, "bn.running_mean")?;
    fill(&mut bundle.bn.running_var, ck, "bn.running_var")?;
    bundle.bn.updates = ck.meta_parse("bn.updates")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert("a", Tensor::from_f64_slice(&[2, 2], &[1.0, -2.5, 3.25, f64::from(f32::MIN_POSITIVE)]).unwrap());
        ck.insert("b.c", Tensor::from_f64_slice(&[3], &[0.1, 0.2, 0.3]).unwrap());
        ck.set_meta("step", 12);
        ck.set_meta("note", "two words");
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert!(ck.bit_eq(&back));
        assert_eq!(back.meta("note").unwrap(), "two words");
        assert_eq!(back.meta_parse::<u64>("step").unwrap(), 12);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        let text = String::from_utf8_lossy(&bytes[..bytes.windows(2).position(|w| w == b"\n\n").unwrap()]).to_string();
        assert_eq!(text, "LMCKPT v1\na 2 2 0\nb.c 3 16\n@note two words\n@step 12");
        assert_eq!(bytes.len(), text.len() + 2 + 4 * 7);
    }

    #[test]
    fn truncated_payload_names_expected_size() {
        let bytes = sample().to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::CkptOverrun { end: 28, size: 27, .. }), "{err}");
        assert!(err.to_string().contains("28"));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = sample().to_bytes();
        bytes.extend_from_slice(&[0, 0]);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes).unwrap_err(),
            Error::CkptTrailing { expected: 28, extra: 2 }
        ));
    }

    fn edit_header(bytes: &[u8], f: impl Fn(&str) -> String) -> Vec<u8> {
        let split = bytes.windows(2).position(|w| w == b"\n\n").unwrap();
        let mut out = f(std::str::from_utf8(&bytes[..split]).unwrap()).into_bytes();
        out.extend_from_slice(&bytes[split..]);
        out
    }

    #[test]
    fn version_and_header_errors_are_distinct() {
        let bytes = sample().to_bytes();
        match Checkpoint::from_bytes(&edit_header(&bytes, |h| h.replacen("v1", "v2", 1))).unwrap_err() {
            Error::CkptVersion { found, expected } => assert_eq!((found.as_str(), expected.as_str()), ("v2", "v1")),
            e => panic!("{e}"),
        }
        let junk = edit_header(&bytes, |h| h.replacen("LMCKPT", "XMCKPT", 1));
        assert!(matches!(Checkpoint::from_bytes(&junk).unwrap_err(), Error::CkptHeader { line: 1, .. }));
        let broken = edit_header(&bytes, |h| h.replacen("b.c 3 16", "b.c x 16", 1));
        assert!(matches!(
            Checkpoint::from_bytes(&broken).unwrap_err(),
            Error::CkptHeader { line: 3, .. }
        ));
    }

    #[test]
    fn permuted_header_still_loads() {
        let ck = sample();
        let edited = edit_header(&ck.to_bytes(), |h| {
            let mut lines: Vec<&str> = h.lines().collect();
            lines.swap(1, 2);
            lines.join("\n")
        });
        let back = Checkpoint::from_bytes(&edited).unwrap();
        assert!(back.require("a").unwrap().bit_eq(ck.require("a").unwrap()));
        assert!(back.require("b.c").unwrap().bit_eq(ck.require("b.c").unwrap()));
    }

    #[test]
    fn overlapping_regions_rejected() {
        let edited = edit_header(&sample().to_bytes(), |h| h.replacen("b.c 3 16", "b.c 3 4", 1));
        assert!(matches!(Checkpoint::from_bytes(&edited).unwrap_err(), Error::CkptHeader { line: 3, .. }));
    }

    #[test]
    fn missing_entries_are_named() {
        let ck = sample();
        assert_eq!(ck.require("zzz").unwrap_err().to_string(), "checkpoint missing tensor zzz");
        assert!(matches!(ck.meta("nope"), Err(Error::CkptMissing(_))));
    }
}
