//! Frame sequences stored as one PNG per frame; frame `i` is the `i`-th
//! file in name order.

use std::fs;
use std::path::{Path, PathBuf};

use rrrn_core::image::RgbImage;

use crate::error::{Error, Result};

pub fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(Error::io(dir))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(Error::io(dir))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

pub fn read_frame(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|source| match source {
            image::ImageError::IoError(e) => Error::io(path)(e),
            source => Error::Image {
                path: path.to_path_buf(),
                source,
            },
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(RgbImage {
        width: w,
        height: h,
        pixels: img.pixels().map(|p| p.0).collect(),
    })
}

pub fn write_frame(path: &Path, frame: &RgbImage) -> Result<()> {
    let raw: Vec<u8> = frame.pixels.iter().flatten().copied().collect();
    let img = image::RgbImage::from_raw(frame.width as u32, frame.height as u32, raw)
        .ok_or_else(|| Error::format(path, "pixel buffer does not match the frame size"))?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_sequence(dir: &Path) -> Result<Vec<RgbImage>> {
    let paths = frame_paths(dir)?;
    if paths.is_empty() {
        return Err(Error::format(dir, "no PNG frames"));
    }
    paths.iter().map(|p| read_frame(p)).collect()
}

/// Reads only the frames at `indices`, in that order.
pub fn read_frames_at(dir: &Path, indices: &[usize]) -> Result<Vec<RgbImage>> {
    let paths = frame_paths(dir)?;
    indices
        .iter()
        .map(|&i| {
            let path = paths
                .get(i)
                .ok_or_else(|| Error::format(dir, format!("frame {i} requested, {} present", paths.len())))?;
            read_frame(path)
        })
        .collect()
}

pub fn frame_name(index: usize) -> String {
    format!("{index:04}.png")
}

pub fn write_sequence(dir: &Path, frames: &[RgbImage]) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    for (i, f) in frames.iter().enumerate() {
        write_frame(&dir.join(frame_name(i)), f)?;
    }
    Ok(())
}
