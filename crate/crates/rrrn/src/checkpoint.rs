//! Versioned checkpoint container.
//!
//! Layout, little-endian: magic `RRNC`, version u32, run configuration text
//! (u32 length + UTF-8 `key = value` lines), training state (epoch u32,
//! optimizer step u64, five f64 epoch means), normalizer (four f64), tensor
//! count u32, then per tensor: name (u16 length + UTF-8), rank u8, dims u32
//! each, values f32.

use std::fs;
use std::path::Path;

use rrrn_core::flow::FlowStats;
use rrrn_core::nn::RrrnModel;
use rrrn_core::protocol::{EpochLog, RunConfig};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RRNC";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainingState {
    /// Completed epochs.
    pub epoch: usize,
    pub optimizer_step: u64,
    pub last: Option<EpochLog>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub state: TrainingState,
    pub model: RrrnModel,
}

pub fn run_config_text(run: &RunConfig) -> String {
    run.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn encode(run: &RunConfig, state: &TrainingState, model: &RrrnModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = run_config_text(run);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(state.epoch as u32).to_le_bytes());
    out.extend_from_slice(&state.optimizer_step.to_le_bytes());
    let l = state.last.unwrap_or(EpochLog {
        epoch: 0,
        cls: f64::NAN,
        rb: f64::NAN,
        cor: f64::NAN,
        total: f64::NAN,
        accuracy: f64::NAN,
    });
    for v in [l.cls, l.rb, l.cor, l.total, l.accuracy] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let n = &model.normalizer;
    for v in [n.vertical_mean, n.vertical_std, n.horizontal_mean, n.horizontal_std] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let tensors = model.named_tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(self.path, "string is not UTF-8"))
    }
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, at: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "not a checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let text = r.string(len)?;
    let mut run = RunConfig::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("bad config line `{line}`")))?;
        if !run.set(k.trim(), v.trim())? {
            return Err(Error::format(path, format!("unknown config key `{}`", k.trim())));
        }
    }
    let epoch = r.u32()? as usize;
    let optimizer_step = r.u64()?;
    let m = [r.f64()?, r.f64()?, r.f64()?, r.f64()?, r.f64()?];
    let last = (epoch > 0).then_some(EpochLog {
        epoch,
        cls: m[0],
        rb: m[1],
        cor: m[2],
        total: m[3],
        accuracy: m[4],
    });
    let normalizer = FlowStats {
        vertical_mean: r.f64()?,
        vertical_std: r.f64()?,
        horizontal_mean: r.f64()?,
        horizontal_std: r.f64()?,
    };
    let mut model = RrrnModel::new(run.model, run.seed)?;
    model.normalizer = normalizer;
    let count = r.u32()? as usize;
    let expected = model.named_tensors().len();
    if count != expected {
        return Err(Error::format(path, format!("{count} tensors, model has {expected}")));
    }
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = r.string(len)?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::format(path, "tensor too large"))?)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        model.set_tensor(&name, &shape, &data)?;
    }
    if r.at != bytes.len() {
        return Err(Error::format(path, "trailing bytes"));
    }
    Ok(Checkpoint {
        run,
        state: TrainingState {
            epoch,
            optimizer_step,
            last,
        },
        model,
    })
}

pub fn write(path: &Path, run: &RunConfig, state: &TrainingState, model: &RrrnModel) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let tmp = path.with_extension("part");
    fs::write(&tmp, encode(run, state, model)).map_err(Error::io(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io(path))
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode(path, &bytes)
}

/// Copies every backbone tensor of `source` with a matching name and shape.
/// Returns how many were copied.
pub fn copy_backbone(source: &RrrnModel, target: &mut RrrnModel) -> usize {
    let mut copied = 0;
    for (name, t) in source.named_tensors() {
        if !(name.starts_with("vertical.") || name.starts_with("horizontal.")) {
            continue;
        }
        if target.set_tensor(&name, &t.shape, &t.data).is_ok() {
            copied += 1;
        }
    }
    copied
}
