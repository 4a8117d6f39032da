//! Binary checkpoint codec.
//!
//! Layout: `"SEGF"`, a little-endian `u16` version, then sections of
//! `tag[4] | u64 length | payload`, then the CRC-32 of every prior byte.
//!
//! | tag    | payload                                                        |
//! |--------|----------------------------------------------------------------|
//! | `CONF` | UTF-8 `key=value` lines: model configuration plus caller metadata |
//! | `PARM` | `u32` count, then per tensor: `u16` name length, name, `u8` rank, `u32` dims, f32 data |
//! | `ADAM` | `u64` step, first moments, second moments (unnamed tensor lists) |
//! | `HIST` | history CSV                                                    |
//! | `STAT` | `key=value` lines: early-stopping counters, best Dice          |
//! | `BEST` | best-validation parameters (unnamed tensor list), optional     |

use alloc::borrow::ToOwned;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{AdamState, History, TrainState};
use crate::autodiff::{Shape, Tensor};
use crate::model::{build_unet, ModelConfig, ModelError};

pub const MAGIC: &[u8; 4] = b"SEGF";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {FORMAT_VERSION})")]
    VersionMismatch { found: u16 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn corrupt(s: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt(s.into())
}

/// A decoded checkpoint: the full training state plus free-form metadata
/// stored alongside the model configuration.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub state: TrainState,
    pub meta: Vec<(String, String)>,
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.push(4);
    for d in t.shape().dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_tensors<'a>(out: &mut Vec<u8>, ts: impl ExactSizeIterator<Item = &'a Tensor>) {
    out.extend_from_slice(&(ts.len() as u32).to_le_bytes());
    for t in ts {
        put_tensor(out, t);
    }
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn model_keys(c: &ModelConfig) -> Vec<(&'static str, String)> {
    alloc::vec![
        ("model.depth", format!("{}", c.depth)),
        ("model.base_channels", format!("{}", c.base_channels)),
        ("model.in_channels", format!("{}", c.in_channels)),
        ("model.input_height", format!("{}", c.input_size.0)),
        ("model.input_width", format!("{}", c.input_size.1)),
        ("model.attention", format!("{}", c.attention_enabled)),
        ("model.init_seed", format!("{}", c.init_seed)),
    ]
}

/// Encode `state`; `meta` keys must not contain `=` or newlines.
pub fn save_checkpoint(state: &TrainState, meta: &[(String, String)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());

    let mut conf = String::new();
    for (k, v) in model_keys(state.model.config()) {
        conf.push_str(&format!("{k}={v}\n"));
    }
    for (k, v) in meta {
        debug_assert!(!k.contains('=') && !k.contains('\n') && !v.contains('\n'));
        conf.push_str(&format!("{k}={v}\n"));
    }
    section(&mut out, b"CONF", conf.as_bytes());

    let mut parm = Vec::new();
    parm.extend_from_slice(&(state.model.params().len() as u32).to_le_bytes());
    for (name, t) in state.model.names().iter().zip(state.model.params()) {
        parm.extend_from_slice(&(name.len() as u16).to_le_bytes());
        parm.extend_from_slice(name.as_bytes());
        put_tensor(&mut parm, t);
    }
    section(&mut out, b"PARM", &parm);

    let mut adam = Vec::new();
    adam.extend_from_slice(&state.adam.t.to_le_bytes());
    put_tensors(&mut adam, state.adam.m.iter());
    put_tensors(&mut adam, state.adam.v.iter());
    section(&mut out, b"ADAM", &adam);

    section(&mut out, b"HIST", state.history.to_csv().as_bytes());

    let mut stat = format!("stale_epochs={}\nstopped={}\n", state.stale_epochs, state.stopped);
    if let Some((dice, params)) = &state.best {
        stat.push_str(&format!("best_dice={dice}\n"));
        let mut best = Vec::new();
        put_tensors(&mut best, params.iter());
        section(&mut out, b"STAT", stat.as_bytes());
        section(&mut out, b"BEST", &best);
    } else {
        section(&mut out, b"STAT", stat.as_bytes());
    }

    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn tensor(&mut self) -> Result<Tensor, CheckpointError> {
        if self.u8()? != 4 {
            return Err(corrupt("tensor rank is not 4"));
        }
        let mut d = [0usize; 4];
        for x in &mut d {
            *x = self.u32()? as usize;
        }
        let shape = Shape::from_dims(d);
        let bytes = self.take(shape.len().checked_mul(4).ok_or_else(|| corrupt("tensor too large"))?)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(shape, data).map_err(|_| corrupt("tensor length"))
    }

    fn tensors(&mut self) -> Result<Vec<Tensor>, CheckpointError> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.tensor()).collect()
    }
}

fn key_values(payload: &[u8]) -> Result<Vec<(String, String)>, CheckpointError> {
    let text = core::str::from_utf8(payload).map_err(|_| corrupt("text section is not UTF-8"))?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (k, v) = l.split_once('=').ok_or_else(|| corrupt(format!("bad line {l:?}")))?;
            Ok((k.to_owned(), v.to_owned()))
        })
        .collect()
}

fn take_key<T: core::str::FromStr>(kv: &mut Vec<(String, String)>, key: &str) -> Result<T, CheckpointError> {
    let i = kv.iter().position(|(k, _)| k == key).ok_or_else(|| corrupt(format!("missing {key}")))?;
    let (_, v) = kv.remove(i);
    v.parse().map_err(|_| corrupt(format!("bad value for {key}: {v:?}")))
}

fn same_shapes(a: &[Tensor], b: &[Tensor]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape())
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 10 {
        return Err(corrupt("truncated"));
    }
    let found = u16::from_le_bytes([bytes[4], bytes[5]]);
    if found != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch { found });
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(corrupt("checksum mismatch"));
    }

    let mut r = Reader { buf: body, pos: 6 };
    let mut sections: Vec<([u8; 4], &[u8])> = Vec::new();
    while !r.done() {
        let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
        let len = usize::try_from(r.u64()?).map_err(|_| corrupt("section too large"))?;
        if sections.iter().any(|(t, _)| *t == tag) {
            return Err(corrupt("duplicate section"));
        }
        sections.push((tag, r.take(len)?));
    }
    let get = |tag: &[u8; 4]| sections.iter().find(|(t, _)| t == tag).map(|(_, p)| *p);
    let need = |tag: &[u8; 4]| get(tag).ok_or_else(|| corrupt(format!("missing {} section", String::from_utf8_lossy(tag))));
    if let Some((t, _)) = sections.iter().find(|(t, _)| !matches!(t, b"CONF" | b"PARM" | b"ADAM" | b"HIST" | b"STAT" | b"BEST")) {
        return Err(corrupt(format!("unknown section {}", String::from_utf8_lossy(t))));
    }

    let mut conf = key_values(need(b"CONF")?)?;
    let cfg = ModelConfig {
        depth: take_key(&mut conf, "model.depth")?,
        base_channels: take_key(&mut conf, "model.base_channels")?,
        in_channels: take_key(&mut conf, "model.in_channels")?,
        input_size: (take_key(&mut conf, "model.input_height")?, take_key(&mut conf, "model.input_width")?),
        attention_enabled: take_key(&mut conf, "model.attention")?,
        init_seed: take_key(&mut conf, "model.init_seed")?,
    };
    let mut model = build_unet(&cfg)?;

    let mut pr = Reader { buf: need(b"PARM")?, pos: 0 };
    let n = pr.u32()? as usize;
    if n != model.params().len() {
        return Err(corrupt(format!("{n} parameter tensors, model has {}", model.params().len())));
    }
    let mut params = Vec::with_capacity(n);
    for i in 0..n {
        let len = pr.u16()? as usize;
        let name = core::str::from_utf8(pr.take(len)?).map_err(|_| corrupt("parameter name"))?;
        if name != model.names()[i] {
            return Err(corrupt(format!("parameter {i} is {name:?}, expected {:?}", model.names()[i])));
        }
        params.push(pr.tensor()?);
    }
    if !pr.done() {
        return Err(corrupt("trailing bytes in PARM"));
    }
    model.set_params(params).map_err(|e| corrupt(format!("{e}")))?;

    let mut ar = Reader { buf: need(b"ADAM")?, pos: 0 };
    let t = ar.u64()?;
    let (m, v) = (ar.tensors()?, ar.tensors()?);
    if !ar.done() || !same_shapes(&m, model.params()) || !same_shapes(&v, model.params()) {
        return Err(corrupt("optimizer moments do not match the parameters"));
    }

    let hist_text = core::str::from_utf8(need(b"HIST")?).map_err(|_| corrupt("history is not UTF-8"))?;
    let history = History::from_csv(hist_text).ok_or_else(|| corrupt("history CSV"))?;

    let mut stat = key_values(need(b"STAT")?)?;
    let stale_epochs = take_key(&mut stat, "stale_epochs")?;
    let stopped = take_key(&mut stat, "stopped")?;
    let best = match (stat.iter().any(|(k, _)| k == "best_dice"), get(b"BEST")) {
        (true, Some(payload)) => {
            let dice: f64 = take_key(&mut stat, "best_dice")?;
            let mut br = Reader { buf: payload, pos: 0 };
            let p = br.tensors()?;
            if !br.done() || !same_shapes(&p, model.params()) {
                return Err(corrupt("best parameters do not match the model"));
            }
            Some((dice, p))
        }
        (false, None) => None,
        _ => return Err(corrupt("best Dice and best parameters must appear together")),
    };

    let state = TrainState { model, adam: AdamState { m, v, t }, history, best, stale_epochs, stopped };
    Ok(Checkpoint { state, meta: conf })
}
