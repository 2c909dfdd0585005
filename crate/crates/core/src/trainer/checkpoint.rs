//! Binary checkpoint files.
//!
//! ```text
//! "LIOC"  u32 version
//! u32 header length, header bytes (UTF-8 `key=value` lines)
//! u32 tensor count
//! per tensor: u16 name length, name, u8 dtype (0 = f64), u8 rank,
//!             rank x u32 extents, little-endian payload
//! ```
//!
//! All integers are little-endian. Tensors are stored in name order, so
//! identical state always produces identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::warn;

use super::{LrDecay, TrainConfig};
use crate::backbone::{is_backbone_param, BackboneConfig};
use crate::error::{Error, Result};
use crate::heads::{is_head_param, HeadConfig};
use crate::params::Params;
use crate::rng::{RngState, ALGORITHM};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LIOC";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: Params,
    /// Completed epochs.
    pub epoch: usize,
    /// Generator positions at save time.
    pub rng: Vec<RngState>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        decode(&fs::read(path)?, path, true)
    }

    /// Loads only what inference needs. Head tensors are dropped with a
    /// single warning.
    pub fn load_backbone(path: &Path) -> Result<Checkpoint> {
        decode(&fs::read(path)?, path, false)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut header = String::new();
        for (k, v) in self.header_entries() {
            header.push_str(&format!("{k}={v}\n"));
        }
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            let name_len = u16::try_from(name.len()).map_err(|_| Error::contract(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.push(t.rank() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    fn header_entries(&self) -> Vec<(String, String)> {
        let mut kv = config_entries(&self.config);
        kv.push(("epoch".into(), self.epoch.to_string()));
        kv.push(("rng.algorithm".into(), ALGORITHM.into()));
        for (i, s) in self.rng.iter().enumerate() {
            kv.push((format!("rng.{i}"), format!("{},{},{}", s.seed, s.stream, s.word_pos)));
        }
        kv
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// `key=value` form of a training config.
pub fn config_entries(c: &TrainConfig) -> Vec<(String, String)> {
    let b = &c.backbone;
    let mut kv: Vec<(String, String)> = vec![
        ("backbone.input_size".into(), b.input_size.to_string()),
        ("backbone.channels".into(), join(&b.channels)),
        ("backbone.stem_stride".into(), b.stem_stride.to_string()),
        ("backbone.stage_strides".into(), join(&b.stage_strides)),
        ("backbone.num_classes".into(), b.num_classes.to_string()),
        ("backbone.seed".into(), b.seed.to_string()),
    ];
    if let Some(h) = &c.heads {
        kv.push(("heads.stages".into(), join(&h.stages)));
        kv.push(("heads.proj_channels".into(), h.proj_channels.to_string()));
    }
    kv.extend([
        ("train.alpha".into(), c.alpha.to_string()),
        ("train.beta".into(), c.beta.to_string()),
        ("train.positives".into(), c.positives.to_string()),
        ("train.batch_size".into(), c.batch_size.to_string()),
        ("train.epochs".into(), c.epochs.to_string()),
        ("train.lr".into(), c.lr.to_string()),
        ("train.momentum".into(), c.momentum.to_string()),
        ("train.seed".into(), c.seed.to_string()),
        ("train.gt_mask".into(), c.gt_mask.to_string()),
    ]);
    if let Some(clip) = c.grad_clip {
        kv.push(("train.grad_clip".into(), clip.to_string()));
    }
    if let Some(d) = c.lr_decay {
        kv.push(("train.lr_decay".into(), format!("{},{}", d.every, d.factor)));
    }
    kv
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> std::result::Result<BTreeMap<String, String>, String> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value", n + 1))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

struct Fields<'a> {
    map: &'a BTreeMap<String, String>,
}

impl Fields<'_> {
    fn raw(&self, key: &str) -> std::result::Result<&str, String> {
        self.map.get(key).map(String::as_str).ok_or_else(|| format!("missing header key `{key}`"))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> std::result::Result<T, String> {
        let v = self.raw(key)?;
        v.parse().map_err(|_| format!("bad value `{v}` for `{key}`"))
    }

    fn list(&self, key: &str) -> std::result::Result<Vec<usize>, String> {
        let v = self.raw(key)?;
        v.split(',')
            .map(|s| s.trim().parse().map_err(|_| format!("bad list `{v}` for `{key}`")))
            .collect()
    }
}

fn config_from(map: &BTreeMap<String, String>) -> std::result::Result<TrainConfig, String> {
    let f = Fields { map };
    let backbone = BackboneConfig {
        input_size: f.parse("backbone.input_size")?,
        channels: f.list("backbone.channels")?,
        stem_stride: f.parse("backbone.stem_stride")?,
        stage_strides: f.list("backbone.stage_strides")?,
        num_classes: f.parse("backbone.num_classes")?,
        seed: f.parse("backbone.seed")?,
    };
    let heads = if map.contains_key("heads.stages") {
        Some(HeadConfig {
            stages: f.list("heads.stages")?,
            proj_channels: f.parse("heads.proj_channels")?,
        })
    } else {
        None
    };
    let lr_decay = match map.get("train.lr_decay") {
        Some(v) => {
            let (a, b) = v.split_once(',').ok_or("bad `train.lr_decay`")?;
            Some(LrDecay {
                every: a.parse().map_err(|_| "bad `train.lr_decay`")?,
                factor: b.parse().map_err(|_| "bad `train.lr_decay`")?,
            })
        }
        None => None,
    };
    Ok(TrainConfig {
        backbone,
        heads,
        alpha: f.parse("train.alpha")?,
        beta: f.parse("train.beta")?,
        positives: f.parse("train.positives")?,
        batch_size: f.parse("train.batch_size")?,
        epochs: f.parse("train.epochs")?,
        lr: f.parse("train.lr")?,
        momentum: f.parse("train.momentum")?,
        lr_decay,
        grad_clip: match map.get("train.grad_clip") {
            Some(_) => Some(f.parse("train.grad_clip")?),
            None => None,
        },
        seed: f.parse("train.seed")?,
        gt_mask: f.parse("train.gt_mask")?,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        if self.bytes.len() - self.pos < n {
            return Err(format!("file truncated while reading {what} at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> std::result::Result<u8, String> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses a whole checkpoint; nothing is returned unless every byte checks out.
pub fn decode(bytes: &[u8], path: &Path, include_heads: bool) -> Result<Checkpoint> {
    let fmt = |detail: String| Error::format(path, detail);
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4, "magic").map_err(fmt)?;
    if magic != MAGIC {
        return Err(fmt(format!("bad magic {:?}, expected \"LIOC\"", String::from_utf8_lossy(magic))));
    }
    let version = c.u32("version").map_err(fmt)?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let header_len = c.u32("header length").map_err(fmt)? as usize;
    let header = std::str::from_utf8(c.take(header_len, "header").map_err(fmt)?)
        .map_err(|e| fmt(format!("header is not UTF-8: {e}")))?;
    let map = parse_key_values(header).map_err(fmt)?;
    let config = config_from(&map).map_err(fmt)?;
    let epoch = Fields { map: &map }.parse("epoch").map_err(fmt)?;
    let mut rng = Vec::new();
    for i in 0.. {
        let Some(v) = map.get(&format!("rng.{i}")) else { break };
        let parts: Vec<&str> = v.split(',').collect();
        let bad = || fmt(format!("bad rng state `{v}`"));
        if parts.len() != 3 {
            return Err(bad());
        }
        rng.push(RngState {
            seed: parts[0].parse().map_err(|_| bad())?,
            stream: parts[1].parse().map_err(|_| bad())?,
            word_pos: parts[2].parse().map_err(|_| bad())?,
        });
    }

    let count = c.u32("tensor count").map_err(fmt)?;
    let mut params = Params::new();
    let mut ignored = 0;
    for _ in 0..count {
        let name_len = c.u16("tensor name length").map_err(fmt)? as usize;
        let name = std::str::from_utf8(c.take(name_len, "tensor name").map_err(fmt)?)
            .map_err(|_| fmt("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = c.u8("dtype").map_err(fmt)?;
        if dtype != DTYPE_F64 {
            return Err(fmt(format!("tensor `{name}` has unknown dtype code {dtype}")));
        }
        let rank = c.u8("rank").map_err(fmt)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("extent").map_err(fmt)? as usize);
        }
        let len: usize = shape.iter().product();
        let payload = c.take(len * 8, &format!("payload of `{name}`")).map_err(fmt)?;
        let data = payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        if !include_heads && !is_backbone_param(&name) {
            ignored += 1;
            continue;
        }
        params.insert(name, Tensor::new(shape, data)?);
    }
    if c.pos != bytes.len() {
        return Err(fmt(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    if ignored > 0 {
        warn!("{}: ignoring {ignored} head tensors (not used at inference)", path.display());
    }
    debug_assert!(include_heads || params.names().all(|n| !is_head_param(n)));
    Ok(Checkpoint {
        config,
        params,
        epoch,
        rng,
    })
}
