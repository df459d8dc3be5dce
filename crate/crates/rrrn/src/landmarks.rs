//! Landmark files: `<dir>/<sample_id>.txt`, one line per frame holding 68
//! space-separated `x,y` pairs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rrrn_core::occlusion::{LandmarkSet, Landmarks, LANDMARK_COUNT};

use crate::error::{Error, Result};

pub fn landmark_path(dir: &Path, sample_id: &str) -> PathBuf {
    dir.join(format!("{sample_id}.txt"))
}

pub fn parse_landmarks(path: &Path, text: &str) -> Result<LandmarkSet> {
    let mut frames = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::format(path, format!("line {}: {reason}", no + 1));
        let mut points = Vec::with_capacity(LANDMARK_COUNT);
        for pair in line.split_whitespace() {
            let (x, y) = pair.split_once(',').ok_or_else(|| bad(format!("`{pair}` is not an x,y pair")))?;
            let x: f64 = x.parse().map_err(|_| bad(format!("bad x in `{pair}`")))?;
            let y: f64 = y.parse().map_err(|_| bad(format!("bad y in `{pair}`")))?;
            points.push([x, y]);
        }
        frames.push(Landmarks::new(points).map_err(|e| bad(e.to_string()))?);
    }
    Ok(LandmarkSet { frames })
}

pub fn read_landmarks(dir: &Path, sample_id: &str) -> Result<LandmarkSet> {
    let path = landmark_path(dir, sample_id);
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    parse_landmarks(&path, &text)
}

pub fn format_landmarks(set: &LandmarkSet) -> String {
    let mut out = String::new();
    for lm in &set.frames {
        let line: Vec<String> = lm.points.iter().map(|[x, y]| format!("{x},{y}")).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

pub fn write_landmarks(dir: &Path, sample_id: &str, set: &LandmarkSet) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let path = landmark_path(dir, sample_id);
    fs::write(&path, format_landmarks(set)).map_err(Error::io(&path))
}
