//! Accessory assets: numbered RGBA PNGs (`00.png`, `01.png`, ...) each with
//! a sidecar `00.txt` holding the two anchors as `x1,y1 x2,y2`.

use std::fs;
use std::path::{Path, PathBuf};

use rrrn_core::image::RgbaImage;
use rrrn_core::occlusion::{AssetKind, OcclusionAsset};

use crate::error::{Error, Result};

fn parse_anchors(path: &Path, text: &str) -> Result<[[f64; 2]; 2]> {
    let pts: Vec<[f64; 2]> = text
        .split_whitespace()
        .map(|pair| {
            let (x, y) = pair.split_once(',')?;
            Some([x.parse().ok()?, y.parse().ok()?])
        })
        .collect::<Option<_>>()
        .ok_or_else(|| Error::format(path, "expected `x1,y1 x2,y2`"))?;
    match pts.as_slice() {
        [a, b] => Ok([*a, *b]),
        _ => Err(Error::format(path, format!("expected 2 anchors, found {}", pts.len()))),
    }
}

pub fn read_asset(png: &Path, kind: AssetKind) -> Result<OcclusionAsset> {
    let sidecar = png.with_extension("txt");
    let text = fs::read_to_string(&sidecar).map_err(Error::io(&sidecar))?;
    let anchors = parse_anchors(&sidecar, &text)?;
    let decoded = image::open(png).map_err(|source| Error::Image {
        path: png.to_path_buf(),
        source,
    })?;
    if !decoded.color().has_alpha() {
        return Err(Error::format(png, "asset has no alpha channel"));
    }
    let img = decoded.to_rgba8();
    let image = RgbaImage {
        width: img.width() as usize,
        height: img.height() as usize,
        pixels: img.pixels().map(|p| p.0).collect(),
    };
    OcclusionAsset::new(image, kind, anchors).map_err(|e| Error::format(png, e.to_string()))
}

/// All assets of `dir` in index order.
pub fn read_assets(dir: &Path, kind: AssetKind) -> Result<Vec<OcclusionAsset>> {
    let mut pngs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(Error::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    pngs.sort();
    if pngs.is_empty() {
        return Err(Error::format(dir, "no asset images"));
    }
    pngs.iter().map(|p| read_asset(p, kind)).collect()
}

pub fn write_asset(dir: &Path, index: usize, asset: &OcclusionAsset) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let png = dir.join(format!("{index:02}.png"));
    let raw: Vec<u8> = asset.image.pixels.iter().flatten().copied().collect();
    let img = image::RgbaImage::from_raw(asset.image.width as u32, asset.image.height as u32, raw)
        .ok_or_else(|| Error::format(&png, "pixel buffer does not match the asset size"))?;
    img.save(&png).map_err(|source| Error::Image {
        path: png.clone(),
        source,
    })?;
    let [[x1, y1], [x2, y2]] = asset.anchors;
    let sidecar = png.with_extension("txt");
    fs::write(&sidecar, format!("{x1},{y1} {x2},{y2}\n")).map_err(Error::io(&sidecar))
}

/// A plain surgical-style mask; anchors at the nose bridge and the chin.
pub fn procedural_mask(color: [u8; 3]) -> OcclusionAsset {
    let (w, h) = (64usize, 56usize);
    let mut image = RgbaImage::filled(w, h, [0, 0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5 - 32.0) / 32.0;
            let v = (y as f64 + 0.5 - 30.0) / 26.0;
            if u * u + v * v * v * v <= 1.0 {
                let pleat = if (y / 6) % 3 == 2 { 20 } else { 0 };
                image.set(x, y, [color[0].saturating_sub(pleat), color[1].saturating_sub(pleat), color[2].saturating_sub(pleat), 255]);
            }
        }
    }
    OcclusionAsset::new(image, AssetKind::Mask, [[32.0, 6.0], [32.0, 54.0]]).expect("static asset is valid")
}

/// Dark round sunglasses; anchors at the outer lens edges.
pub fn procedural_glasses(tint: u8) -> OcclusionAsset {
    let (w, h) = (80usize, 24usize);
    let mut image = RgbaImage::filled(w, h, [0, 0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let lens = [20.0, 60.0].iter().any(|cx| (fx - cx).powi(2) + (fy - 12.0).powi(2) <= 144.0);
            let bridge = (36.0..44.0).contains(&fx) && (9.0..12.0).contains(&fy);
            if lens || bridge {
                image.set(x, y, [tint, tint, tint, 240]);
            }
        }
    }
    OcclusionAsset::new(image, AssetKind::Glasses, [[8.0, 12.0], [72.0, 12.0]]).expect("static asset is valid")
}
