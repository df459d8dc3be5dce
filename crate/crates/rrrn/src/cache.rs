//! Flow cache records: a 16-byte header (`RRN1`, S, K+1, reserved; u32 LE)
//! followed by the vertical then the horizontal grids as f32 LE, row-major.

use std::fs;
use std::path::{Path, PathBuf};

use rrrn_core::flow::{RegionStack, REGIONS};
use rrrn_core::image::Plane;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RRN1";
pub const HEADER_LEN: usize = 16;

pub fn encode_stack(stack: &RegionStack) -> Vec<u8> {
    let s = stack.size();
    let mut out = Vec::with_capacity(HEADER_LEN + 2 * REGIONS * s * s * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(s as u32).to_le_bytes());
    out.extend_from_slice(&(stack.vertical.len() as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for plane in stack.vertical.iter().chain(&stack.horizontal) {
        for &v in plane.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

fn u32_at(bytes: &[u8], at: usize) -> usize {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize
}

pub fn decode_stack(path: &Path, bytes: &[u8]) -> Result<RegionStack> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "not a flow cache record"));
    }
    let (s, k1) = (u32_at(bytes, 4), u32_at(bytes, 8));
    if k1 != REGIONS || s == 0 {
        return Err(Error::format(path, format!("unsupported shape S={s}, regions={k1}")));
    }
    let expected = HEADER_LEN + 2 * k1 * s * s * 4;
    if bytes.len() != expected {
        return Err(Error::format(path, format!("{} bytes, expected {expected}", bytes.len())));
    }
    let mut values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))));
    let mut planes = (0..2 * k1).map(|_| Plane::from_vec(s, s, values.by_ref().take(s * s).collect()));
    let vertical: Vec<Plane> = planes.by_ref().take(k1).collect();
    let horizontal: Vec<Plane> = planes.collect();
    Ok(RegionStack::new(vertical, horizontal)?)
}

pub fn write_stack(path: &Path, stack: &RegionStack) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let tmp = path.with_extension("rrn.part");
    fs::write(&tmp, encode_stack(stack)).map_err(Error::io(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io(path))
}

pub fn read_stack(path: &Path) -> Result<RegionStack> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode_stack(path, &bytes)
}

/// Where base and augmented records of each sample live.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheLayout {
    pub root: PathBuf,
}

impl CacheLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn base(&self, sample_id: &str) -> PathBuf {
        self.root.join("base").join(format!("{sample_id}.rrn"))
    }

    pub fn augmented_dir(&self, sample_id: &str) -> PathBuf {
        self.root.join("aug").join(sample_id)
    }

    pub fn augmented(&self, sample_id: &str, index: usize) -> PathBuf {
        self.augmented_dir(sample_id).join(format!("{index:02}.rrn"))
    }

    /// Augmented records of one sample in index order.
    pub fn augmented_paths(&self, sample_id: &str) -> Result<Vec<PathBuf>> {
        let dir = self.augmented_dir(sample_id);
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(Error::io(&dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "rrn"))
            .collect();
        paths.sort();
        Ok(paths)
    }
}
