//! Synthetic occlusion: face masks and sunglasses composited along facial
//! landmarks, and solid random blocks covering a fixed share of the face.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::OcclusionTag;
use crate::image::{Rect, RgbImage, RgbaImage};
use crate::math;

/// Points per frame in the 68-point landmark convention.
pub const LANDMARK_COUNT: usize = 68;

/// Landmark indices used as accessory anchors.
pub mod landmark {
    pub const JAW_RIGHT: usize = 0;
    pub const CHIN: usize = 8;
    pub const JAW_LEFT: usize = 16;
    pub const NOSE_BRIDGE_TOP: usize = 27;
    pub const NOSE_TIP: usize = 30;
    pub const RIGHT_EYE_OUTER: usize = 36;
    pub const LEFT_EYE_OUTER: usize = 45;
}

/// Masks are scaled to this multiple of the jaw width.
pub const MASK_JAW_WIDTH_RATIO: f64 = 1.15;

/// Random blocks are filled with this gray level.
pub const BLOCK_GRAY: u8 = 128;

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum OcclusionError {
    #[error("anchor landmarks coincide")]
    DegenerateLandmarks,
    #[error("occlusion ratio {0} outside (0, 0.5]")]
    RatioOutOfRange(f64),
    #[error("invalid occlusion asset: {0}")]
    InvalidAsset(String),
    #[error("invalid landmarks: {0}")]
    InvalidLandmarks(String),
    #[error("no landmarks for sample `{0}`")]
    MissingLandmarks(String),
    #[error("invalid occlusion spec: {0}")]
    InvalidSpec(String),
}

/// The 68 landmark points of one frame, in pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Landmarks {
    pub points: Vec<[f64; 2]>,
}

impl Landmarks {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self, OcclusionError> {
        if points.len() != LANDMARK_COUNT {
            return Err(OcclusionError::InvalidLandmarks(format!(
                "expected {LANDMARK_COUNT} points, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(OcclusionError::InvalidLandmarks("non-finite coordinate".into()));
        }
        Ok(Self { points })
    }

    pub fn point(&self, index: usize) -> [f64; 2] {
        self.points[index]
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            points: self.points.iter().map(|[x, y]| [x + dx, y + dy]).collect(),
        }
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.points
            .iter()
            .all(|&[x, y]| x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64)
    }

    /// Tight integer box around all points, clipped to the frame.
    pub fn bounding_box(&self, width: usize, height: usize) -> Rect {
        let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &[x, y] in &self.points {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        let clamp_x = |v: f64| (v.max(0.0) as usize).min(width - 1);
        let clamp_y = |v: f64| (v.max(0.0) as usize).min(height - 1);
        let (ax, ay) = (clamp_x(math::floor(x0)), clamp_y(math::floor(y0)));
        let (bx, by) = (clamp_x(math::floor(x1)), clamp_y(math::floor(y1)));
        Rect::new(ax, ay, bx - ax + 1, by - ay + 1)
    }
}

/// Landmarks for every frame of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    pub frames: Vec<Landmarks>,
}

impl LandmarkSet {
    pub fn validate(&self, width: usize, height: usize) -> Result<(), OcclusionError> {
        for (i, lm) in self.frames.iter().enumerate() {
            if !lm.within(width, height) {
                return Err(OcclusionError::InvalidLandmarks(format!("frame {i} has points outside the frame")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AssetKind {
    Mask,
    Glasses,
}

/// An accessory image with two anchor points in its own pixel coordinates:
/// outer lens edges for glasses, nose bridge then chin for masks.
#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionAsset {
    pub image: RgbaImage,
    pub kind: AssetKind,
    pub anchors: [[f64; 2]; 2],
}

impl OcclusionAsset {
    pub fn new(image: RgbaImage, kind: AssetKind, anchors: [[f64; 2]; 2]) -> Result<Self, OcclusionError> {
        if image.width == 0 || image.height == 0 || image.pixels.len() != image.width * image.height {
            return Err(OcclusionError::InvalidAsset("empty or inconsistent image".into()));
        }
        for &[x, y] in &anchors {
            if !(x >= 0.0 && y >= 0.0 && x <= image.width as f64 && y <= image.height as f64) {
                return Err(OcclusionError::InvalidAsset(format!("anchor ({x}, {y}) outside the asset")));
            }
        }
        if distance(anchors[0], anchors[1]) < 1e-6 {
            return Err(OcclusionError::InvalidAsset("anchors coincide".into()));
        }
        Ok(Self { image, kind, anchors })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OcclusionKind {
    Mask,
    Glass,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionSpec {
    pub kind: OcclusionKind,
    /// Share of the face box to cover; only for [`OcclusionKind::Random`].
    pub ratio: Option<f64>,
    pub seed: u64,
    /// Fixed accessory; `None` picks one per sample from the seeded stream.
    pub asset_index: Option<usize>,
}

impl OcclusionSpec {
    pub fn validate(&self) -> Result<(), OcclusionError> {
        match (self.kind, self.ratio) {
            (OcclusionKind::Random, Some(r)) => self.tag().map(|_| ()).ok_or(OcclusionError::RatioOutOfRange(r)),
            (OcclusionKind::Random, None) => Err(OcclusionError::InvalidSpec("random occlusion needs a ratio".into())),
            (_, Some(_)) => Err(OcclusionError::InvalidSpec("ratio only applies to random occlusion".into())),
            (_, None) => Ok(()),
        }
    }

    /// Manifest tag for the occluded database; `None` for ratios that are not
    /// a multiple of 5% in [5%, 50%].
    pub fn tag(&self) -> Option<OcclusionTag> {
        match self.kind {
            OcclusionKind::Mask => Some(OcclusionTag::Mask),
            OcclusionKind::Glass => Some(OcclusionTag::Glass),
            OcclusionKind::Random => {
                let r = self.ratio?;
                let pct = math::round(r * 100.0);
                if (r * 100.0 - pct).abs() > 1e-6 {
                    return None;
                }
                OcclusionTag::random(pct as u8)
            }
        }
    }
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    math::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]))
}

fn midpoint(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0]
}

/// Maps asset coordinates to frame coordinates: `p = scale * R(angle) * (a - origin) + target`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub scale: f64,
    /// Radians, counter-clockwise in image axes.
    pub angle: f64,
    pub origin: [f64; 2],
    pub target: [f64; 2],
}

impl Placement {
    pub fn apply(&self, a: [f64; 2]) -> [f64; 2] {
        let (s, c) = (math::sin(self.angle), math::cos(self.angle));
        let (dx, dy) = (a[0] - self.origin[0], a[1] - self.origin[1]);
        [
            self.scale * (c * dx - s * dy) + self.target[0],
            self.scale * (s * dx + c * dy) + self.target[1],
        ]
    }

    pub fn invert(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = (math::sin(self.angle), math::cos(self.angle));
        let (dx, dy) = (p[0] - self.target[0], p[1] - self.target[1]);
        [
            (c * dx + s * dy) / self.scale + self.origin[0],
            (-s * dx + c * dy) / self.scale + self.origin[1],
        ]
    }
}

/// Similarity transform placing `asset` on the face described by `landmarks`.
pub fn placement(landmarks: &Landmarks, asset: &OcclusionAsset) -> Result<Placement, OcclusionError> {
    use landmark::*;
    let (l0, l1) = match asset.kind {
        AssetKind::Glasses => (landmarks.point(RIGHT_EYE_OUTER), landmarks.point(LEFT_EYE_OUTER)),
        AssetKind::Mask => (
            midpoint(landmarks.point(NOSE_BRIDGE_TOP), landmarks.point(NOSE_TIP)),
            landmarks.point(CHIN),
        ),
    };
    let [a0, a1] = asset.anchors;
    let face_span = distance(l0, l1);
    if face_span < 1e-6 {
        return Err(OcclusionError::DegenerateLandmarks);
    }
    let scale = match asset.kind {
        AssetKind::Glasses => face_span / distance(a0, a1),
        AssetKind::Mask => {
            let jaw = distance(landmarks.point(JAW_RIGHT), landmarks.point(JAW_LEFT));
            if jaw < 1e-6 {
                return Err(OcclusionError::DegenerateLandmarks);
            }
            MASK_JAW_WIDTH_RATIO * jaw / asset.image.width as f64
        }
    };
    let angle = math::atan2(l1[1] - l0[1], l1[0] - l0[0]) - math::atan2(a1[1] - a0[1], a1[0] - a0[0]);
    Ok(Placement {
        scale,
        angle,
        origin: a0,
        target: l0,
    })
}

/// Premultiplied bilinear sample: `(r*a, g*a, b*a, a)` with `a` in `[0, 1]`.
fn sample_premultiplied(img: &RgbaImage, x: f64, y: f64) -> [f64; 4] {
    let x0 = math::floor(x);
    let y0 = math::floor(y);
    let (fx, fy) = (x - x0, y - y0);
    let (xi, yi) = (x0 as isize, y0 as isize);
    let mut out = [0.0; 4];
    for (dx, dy, w) in [
        (0, 0, (1.0 - fx) * (1.0 - fy)),
        (1, 0, fx * (1.0 - fy)),
        (0, 1, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ] {
        let (px, py) = (xi + dx, yi + dy);
        if w == 0.0 || px < 0 || py < 0 || px >= img.width as isize || py >= img.height as isize {
            continue;
        }
        let [r, g, b, a] = img.get(px as usize, py as usize);
        let a = f64::from(a) / 255.0;
        out[0] += w * a * f64::from(r);
        out[1] += w * a * f64::from(g);
        out[2] += w * a * f64::from(b);
        out[3] += w * a;
    }
    out
}

/// Alpha-composites the accessory onto one frame. Pixels where the placed
/// asset is fully transparent are left untouched.
pub fn overlay_accessory(frame: &RgbImage, landmarks: &Landmarks, asset: &OcclusionAsset) -> Result<RgbImage, OcclusionError> {
    let place = placement(landmarks, asset)?;
    let (aw, ah) = (asset.image.width as f64, asset.image.height as f64);
    let corners = [[-1.0, -1.0], [aw, -1.0], [-1.0, ah], [aw, ah]].map(|c| place.apply(c));
    let min_x = corners.iter().map(|c| c[0]).fold(f64::INFINITY, f64::min);
    let max_x = corners.iter().map(|c| c[0]).fold(f64::NEG_INFINITY, f64::max);
    let min_y = corners.iter().map(|c| c[1]).fold(f64::INFINITY, f64::min);
    let max_y = corners.iter().map(|c| c[1]).fold(f64::NEG_INFINITY, f64::max);
    let mut out = frame.clone();
    if max_x < 0.0 || max_y < 0.0 || min_x >= frame.width as f64 || min_y >= frame.height as f64 {
        return Ok(out);
    }
    let x0 = math::floor(min_x).max(0.0) as usize;
    let y0 = math::floor(min_y).max(0.0) as usize;
    let x1 = (math::floor(max_x) as usize + 1).min(frame.width);
    let y1 = (math::floor(max_y) as usize + 1).min(frame.height);
    for y in y0..y1 {
        for x in x0..x1 {
            let [ax, ay] = place.invert([x as f64, y as f64]);
            let [pr, pg, pb, alpha] = sample_premultiplied(&asset.image, ax, ay);
            if alpha <= 0.0 {
                continue;
            }
            let base = frame.get(x, y);
            let mix = |pre: f64, under: u8| math::round(pre + (1.0 - alpha) * f64::from(under)).clamp(0.0, 255.0) as u8;
            out.set(x, y, [mix(pr, base[0]), mix(pg, base[1]), mix(pb, base[2])]);
        }
    }
    Ok(out)
}

/// Block width and height for `ratio` of `face_box`. Among sizes whose area
/// is within 0.5% of the target, the one closest to the box's aspect ratio
/// wins; otherwise the closest area.
pub fn block_size(face_box: &Rect, ratio: f64) -> Result<(usize, usize), OcclusionError> {
    if !(ratio > 0.0 && ratio <= 0.5) {
        return Err(OcclusionError::RatioOutOfRange(ratio));
    }
    let target = ratio * face_box.area() as f64;
    let box_aspect = face_box.width as f64 / face_box.height as f64;
    let mut best: Option<((bool, f64, f64), (usize, usize))> = None;
    for w in 1..=face_box.width {
        let h = (math::round(target / w as f64) as usize).clamp(1, face_box.height);
        let err = (w as f64 * h as f64 - target).abs();
        let aspect_gap = libm::fabs(libm::log((w as f64 / h as f64) / box_aspect));
        let key = (err > 0.005 * target, if err > 0.005 * target { err } else { aspect_gap }, err);
        if best.map_or(true, |(k, _)| key < k) {
            best = Some((key, (w, h)));
        }
    }
    Ok(best.map(|(_, wh)| wh).unwrap_or((1, 1)))
}

/// Places a block of `ratio` of the face box uniformly at random inside it.
pub fn random_block_rect<R: Rng + ?Sized>(face_box: &Rect, ratio: f64, rng: &mut R) -> Result<Rect, OcclusionError> {
    let (w, h) = block_size(face_box, ratio)?;
    let x = face_box.x + rng.gen_range(0..=face_box.width - w);
    let y = face_box.y + rng.gen_range(0..=face_box.height - h);
    Ok(Rect::new(x, y, w, h))
}

pub fn fill_block(frame: &RgbImage, block: &Rect) -> RgbImage {
    let mut out = frame.clone();
    for y in block.y..(block.y + block.height).min(frame.height) {
        for x in block.x..(block.x + block.width).min(frame.width) {
            out.set(x, y, [BLOCK_GRAY; 3]);
        }
    }
    out
}

/// One random gray block covering `ratio` of `face_box`.
pub fn overlay_random_block<R: Rng + ?Sized>(
    frame: &RgbImage,
    face_box: &Rect,
    ratio: f64,
    rng: &mut R,
) -> Result<RgbImage, OcclusionError> {
    if !frame.bounds().contains_rect(face_box) || face_box.area() == 0 {
        return Err(OcclusionError::InvalidSpec("face box outside the frame".into()));
    }
    let block = random_block_rect(face_box, ratio, rng)?;
    Ok(fill_block(frame, &block))
}

/// Occludes every frame of a clip. Accessories follow the per-frame
/// landmarks; a random block is drawn once and reused on every frame.
pub fn occlude_sequence<R: Rng + ?Sized>(
    sample_id: &str,
    frames: &[RgbImage],
    landmarks: Option<&LandmarkSet>,
    spec: &OcclusionSpec,
    asset: Option<&OcclusionAsset>,
    rng: &mut R,
) -> Result<Vec<RgbImage>, OcclusionError> {
    spec.validate()?;
    let Some(first) = frames.first() else {
        return Ok(Vec::new());
    };
    match spec.kind {
        OcclusionKind::Random => {
            let face_box = match landmarks.and_then(|l| l.frames.first()) {
                Some(lm) => lm.bounding_box(first.width, first.height),
                None => first.bounds(),
            };
            let block = random_block_rect(&face_box, spec.ratio.unwrap_or_default(), rng)?;
            Ok(frames.iter().map(|f| fill_block(f, &block)).collect())
        }
        OcclusionKind::Mask | OcclusionKind::Glass => {
            let lms = landmarks.ok_or_else(|| OcclusionError::MissingLandmarks(sample_id.into()))?;
            if lms.frames.len() != frames.len() {
                return Err(OcclusionError::InvalidLandmarks(format!(
                    "{} landmark frames for {} image frames",
                    lms.frames.len(),
                    frames.len()
                )));
            }
            let asset = asset.ok_or_else(|| OcclusionError::InvalidAsset("no accessory supplied".into()))?;
            let expected = if spec.kind == OcclusionKind::Mask { AssetKind::Mask } else { AssetKind::Glasses };
            if asset.kind != expected {
                return Err(OcclusionError::InvalidAsset(format!("{:?} asset for {:?} occlusion", asset.kind, spec.kind)));
            }
            frames
                .iter()
                .zip(&lms.frames)
                .map(|(f, lm)| overlay_accessory(f, lm, asset))
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn block_area_within_one_percent() {
        for (w, h) in [(100, 100), (80, 120), (57, 91)] {
            let face = Rect::new(3, 4, w, h);
            for pct in (5..=50).step_by(5) {
                let ratio = pct as f64 / 100.0;
                let (bw, bh) = block_size(&face, ratio).unwrap();
                let target = ratio * (w * h) as f64;
                assert!(((bw * bh) as f64 - target).abs() <= 0.01 * target, "{w}x{h} {pct}%: {bw}x{bh}");
                assert!(bw <= w && bh <= h);
            }
        }
    }

    #[test]
    fn ratio_bounds() {
        let face = Rect::new(0, 0, 10, 10);
        assert_eq!(block_size(&face, 0.0), Err(OcclusionError::RatioOutOfRange(0.0)));
        assert_eq!(block_size(&face, 0.51), Err(OcclusionError::RatioOutOfRange(0.51)));
    }

    #[test]
    fn block_stays_in_face_box_and_is_seeded() {
        let face = Rect::new(10, 20, 60, 50);
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let ra = random_block_rect(&face, 0.3, &mut a).unwrap();
            assert_eq!(ra, random_block_rect(&face, 0.3, &mut b).unwrap());
            assert!(face.contains_rect(&ra));
        }
    }

    #[test]
    fn spec_tags() {
        let spec = |kind, ratio| OcclusionSpec { kind, ratio, seed: 0, asset_index: None };
        assert_eq!(spec(OcclusionKind::Random, Some(0.05)).tag(), Some(OcclusionTag::Random(5)));
        assert_eq!(spec(OcclusionKind::Mask, None).tag(), Some(OcclusionTag::Mask));
        assert!(spec(OcclusionKind::Random, None).validate().is_err());
        assert!(spec(OcclusionKind::Glass, Some(0.1)).validate().is_err());
        assert!(spec(OcclusionKind::Random, Some(0.07)).validate().is_err());
    }

    #[test]
    fn placement_round_trip() {
        let p = Placement { scale: 1.7, angle: 0.3, origin: [4.0, 2.0], target: [40.0, 33.0] };
        let q = p.invert(p.apply([9.5, -3.25]));
        assert!((q[0] - 9.5).abs() < 1e-12 && (q[1] + 3.25).abs() < 1e-12);
        assert_eq!(p.apply([4.0, 2.0]), [40.0, 33.0]);
    }
}
