//! `CKP1` checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "CKP1" | u32 version | u8 stage tag
//! u32 n | n x (u16 name length, name bytes, STF tensor)        parameters
//! u64 t | u32 n | n x (u16 name length, name, STF m, STF v)    Adam state
//! u32 length | UTF-8 key=value lines                           configuration
//! 4 x u64                                                      RNG state
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{AdamState, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{parse_num, Arch, ModelParams, NetConfig};
use crate::tensor::{write_stf_bytes, Cursor, Rng, Tensor};

pub const CKP_MAGIC: &[u8; 4] = b"CKP1";
pub const CKP_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Classification pre-training of the attention and classifier.
    Stage1,
    /// Joint training with the decoder.
    Stage2,
}

impl Stage {
    fn tag(self) -> u8 {
        match self {
            Stage::Stage1 => 1,
            Stage::Stage2 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }
}

/// Complete training state: resuming from it continues bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Iterations completed within `stage`.
    pub iteration: u64,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    pub rng: Rng,
}

impl Checkpoint {
    /// Whether every iteration of the current stage has run.
    pub fn stage_complete(&self) -> bool {
        let total = match self.stage {
            Stage::Stage1 => self.train.stage1_iters,
            Stage::Stage2 => self.train.stage2_iters,
        };
        self.iteration >= total
    }
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn config_text(ck: &Checkpoint) -> String {
    let mut lines = vec![format!("arch={}", ck.params.arch().as_str()), format!("iteration={}", ck.iteration)];
    lines.extend(ck.net.entries().into_iter().map(|(k, v)| format!("{k}={v}")));
    lines.extend(ck.train.entries().into_iter().map(|(k, v)| format!("{k}={v}")));
    lines.join("\n") + "\n"
}

pub fn checkpoint_to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKP_MAGIC);
    out.extend_from_slice(&CKP_VERSION.to_le_bytes());
    out.push(ck.stage.tag());

    let named = ck.params.named();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, _, t) in &named {
        put_name(&mut out, name);
        out.extend_from_slice(&write_stf_bytes(t));
    }

    out.extend_from_slice(&ck.adam.t.to_le_bytes());
    out.extend_from_slice(&(ck.adam.names.len() as u32).to_le_bytes());
    for ((name, m), v) in ck.adam.names.iter().zip(&ck.adam.m).zip(&ck.adam.v) {
        put_name(&mut out, name);
        out.extend_from_slice(&write_stf_bytes(m));
        out.extend_from_slice(&write_stf_bytes(v));
    }

    let text = config_text(ck);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());

    for w in ck.rng.state() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

fn name(c: &mut Cursor<'_>) -> Result<String> {
    let at = c.offset();
    let n = c.u16()? as usize;
    String::from_utf8(c.take(n)?.to_vec()).map_err(|_| Error::format(at, "tensor name is not UTF-8"))
}

pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor::new(buf, 0);
    c.expect_magic(CKP_MAGIC)?;
    let at = c.offset();
    let version = c.u32()?;
    if version != CKP_VERSION {
        return Err(Error::format(at, format!("unsupported checkpoint version {version}, expected {CKP_VERSION}")));
    }
    let at = c.offset();
    let stage = match c.u8()? {
        1 => Stage::Stage1,
        2 => Stage::Stage2,
        t => return Err(Error::format(at, format!("unknown stage tag {t}"))),
    };

    let n = c.u32()? as usize;
    let mut tensors: Vec<(String, u64, Tensor)> = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let at = c.offset();
        let nm = name(&mut c)?;
        tensors.push((nm, at, c.tensor()?));
    }

    let t = c.u64()?;
    let n = c.u32()? as usize;
    let mut adam = AdamState { t, names: Vec::new(), m: Vec::new(), v: Vec::new() };
    for _ in 0..n {
        adam.names.push(name(&mut c)?);
        adam.m.push(c.tensor()?);
        adam.v.push(c.tensor()?);
    }

    let text_at = c.offset();
    let len = c.u32()? as usize;
    let text = std::str::from_utf8(c.take(len)?).map_err(|_| Error::format(text_at, "configuration is not UTF-8"))?;
    let mut state = [0u64; 4];
    for w in &mut state {
        *w = c.u64()?;
    }
    if !c.is_at_end() {
        return Err(Error::format(c.offset(), "trailing bytes after checkpoint"));
    }

    let fmt = |e: Error| Error::format(text_at, e.to_string());
    let mut net = NetConfig::default();
    let mut train = TrainConfig::default();
    let mut arch = None;
    let mut iteration = None;
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::format(text_at, format!("bad config line {line:?}")))?;
        match k {
            "arch" => arch = Some(Arch::parse(v).map_err(fmt)?),
            "iteration" => iteration = Some(parse_num(v).map_err(fmt)?),
            _ => {
                if !net.set(k, v).map_err(fmt)? && !train.set(k, v).map_err(fmt)? {
                    return Err(Error::format(text_at, format!("unknown config key {k:?}")));
                }
            }
        }
    }
    let (Some(arch), Some(iteration)) = (arch, iteration) else {
        return Err(Error::format(text_at, "configuration lacks arch or iteration"));
    };
    net.validate().map_err(fmt)?;

    let mut params = ModelParams::init(arch, &net, &mut Rng::new(0)).map_err(fmt)?;
    let expected: Vec<String> = params.named().into_iter().map(|(n, _, _)| n).collect();
    if expected.len() != tensors.len() {
        return Err(Error::format(8, format!("{} tensors stored, model needs {}", tensors.len(), expected.len())));
    }
    let mut by_name: HashMap<&str, (u64, &Tensor)> = HashMap::new();
    for (nm, at, t) in &tensors {
        by_name.insert(nm.as_str(), (*at, t));
    }
    for ((_, slot), nm) in params.named_mut().into_iter().zip(&expected) {
        let &(at, t) = by_name.get(nm.as_str()).ok_or_else(|| Error::format(8, format!("missing tensor {nm}")))?;
        if t.shape() != slot.shape() {
            return Err(Error::format(at, format!("{nm} has shape {:?}, expected {:?}", t.shape(), slot.shape())));
        }
        *slot = t.clone();
    }

    Ok(Checkpoint { stage, iteration, net, train, params, adam, rng: Rng::from_state(state) })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, checkpoint_to_bytes(ck))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    checkpoint_from_bytes(&fs::read(path)?)
}

/// Loads a checkpoint and insists that its network configuration equals
/// `expected`; nothing is returned on mismatch.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &NetConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if &ck.net != expected {
        let theirs = ck.net.entries();
        let diff: Vec<String> = expected
            .entries()
            .into_iter()
            .zip(theirs)
            .filter(|(a, b)| a != b)
            .map(|((k, want), (_, got))| format!("{k}: checkpoint {got}, expected {want}"))
            .collect();
        return Err(Error::config(format!("checkpoint network configuration differs ({})", diff.join("; "))));
    }
    Ok(ck)
}
