//! Seeded stand-in clips: a smooth random texture whose central face area
//! moves in a class-dependent direction, peaking at the apex frame.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{representative_au_code, AnnotationRecord, DatabaseId, ObjectiveClass, OcclusionTag, NUM_CLASSES};
use crate::image::{Plane, RgbImage};
use crate::math;
use crate::occlusion::{LandmarkSet, Landmarks};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub onset: usize,
    pub apex: usize,
    pub offset: usize,
    /// Peak displacement in pixels at the apex.
    pub amplitude: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            frames: 21,
            onset: 0,
            apex: 10,
            offset: 20,
            amplitude: 1.5,
        }
    }
}

/// Sum of random plane waves on a mid-gray base.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    waves: Vec<[f64; 4]>,
}

impl Texture {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let waves = (0..8)
            .map(|_| {
                let angle = rng.gen_range(0.0..2.0 * PI);
                let freq = rng.gen_range(0.15..0.6);
                [freq * math::cos(angle), freq * math::sin(angle), rng.gen_range(0.0..2.0 * PI), rng.gen_range(8.0..20.0)]
            })
            .collect();
        Self { waves }
    }

    pub fn value(&self, x: f64, y: f64) -> f64 {
        let v: f64 = self
            .waves
            .iter()
            .map(|&[fx, fy, phase, amp]| amp * math::sin(fx * x + fy * y + phase))
            .sum();
        (128.0 + v).clamp(0.0, 255.0)
    }
}

/// Unit motion direction of a class: evenly spaced angles, class I pointing
/// right.
pub fn motion_direction(class: ObjectiveClass) -> [f64; 2] {
    let angle = 2.0 * PI * class.index() as f64 / NUM_CLASSES as f64;
    [math::cos(angle), math::sin(angle)]
}

/// Motion intensity in `[0, 1]`: linear rise to the apex, linear fall to
/// the offset, zero outside.
pub fn intensity(t: usize, onset: usize, apex: usize, offset: usize) -> f64 {
    if t <= onset || t >= offset {
        if t == apex {
            return 1.0;
        }
        return 0.0;
    }
    if t <= apex {
        (t - onset) as f64 / (apex - onset).max(1) as f64
    } else {
        (offset - t) as f64 / (offset - apex).max(1) as f64
    }
}

/// A 68-point face layout filling `[x0, x0 + w] x [y0, y0 + h]`.
pub fn template_landmarks(x0: f64, y0: f64, w: f64, h: f64) -> Landmarks {
    let mut unit: Vec<[f64; 2]> = Vec::with_capacity(68);
    for i in 0..17 {
        let t = PI - i as f64 * PI / 16.0;
        unit.push([0.5 + 0.45 * math::cos(t), 0.45 + 0.5 * math::sin(t)]);
    }
    for side in [0.18, 0.58] {
        for i in 0..5 {
            let x = side + 0.06 * i as f64;
            unit.push([x, 0.28 - 0.03 * math::sin(PI * i as f64 / 4.0)]);
        }
    }
    for i in 0..4 {
        unit.push([0.5, 0.36 + 0.07 * i as f64]);
    }
    for i in 0..5 {
        unit.push([0.42 + 0.04 * i as f64, 0.62 + 0.02 * math::sin(PI * i as f64 / 4.0)]);
    }
    let eye = |cx: f64, start: f64, out: &mut Vec<[f64; 2]>| {
        for i in 0..6 {
            let t = start - i as f64 * PI / 3.0;
            out.push([cx + 0.08 * math::cos(t), 0.4 - 0.03 * math::sin(t)]);
        }
    };
    eye(0.3, PI, &mut unit);
    // Starting at the left corner makes 42 the inner and 45 the outer corner.
    eye(0.7, PI, &mut unit);
    for i in 0..12 {
        let t = PI - i as f64 * PI / 6.0;
        unit.push([0.5 + 0.16 * math::cos(t), 0.76 - 0.06 * math::sin(t)]);
    }
    for i in 0..8 {
        let t = PI - i as f64 * PI / 4.0;
        unit.push([0.5 + 0.1 * math::cos(t), 0.76 - 0.025 * math::sin(t)]);
    }
    Landmarks {
        points: unit.into_iter().map(|[u, v]| [x0 + u * w, y0 + v * h]).collect(),
    }
}

/// One generated clip with its annotation and per-frame landmarks.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub record: AnnotationRecord,
    pub frames: Vec<Plane>,
    pub landmarks: LandmarkSet,
}

impl SyntheticClip {
    pub fn rgb_frames(&self) -> Vec<RgbImage> {
        self.frames
            .iter()
            .map(|p| {
                RgbImage::from_fn(p.width(), p.height(), |x, y| {
                    let v = math::round(p.get(x, y)).clamp(0.0, 255.0) as u8;
                    [v, v, v]
                })
            })
            .collect()
    }
}

/// Renders a clip whose face area drifts along the class direction. The
/// displacement is weighted by a Gaussian bump centered on the face so the
/// border stays still.
pub fn synthesize_clip<R: Rng + ?Sized>(
    sample_id: &str,
    subject_id: &str,
    class: ObjectiveClass,
    cfg: &SyntheticConfig,
    rng: &mut R,
) -> SyntheticClip {
    let texture = Texture::random(rng);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let (cx, cy) = (w / 2.0 + rng.gen_range(-0.05..0.05) * w, h / 2.0 + rng.gen_range(-0.05..0.05) * h);
    let sigma = 0.3 * w.min(h);
    let dir = motion_direction(class);
    let frames = (0..cfg.frames)
        .map(|t| {
            let a = cfg.amplitude * intensity(t, cfg.onset, cfg.apex, cfg.offset);
            Plane::from_fn(cfg.width, cfg.height, |x, y| {
                let (xf, yf) = (x as f64, y as f64);
                let r2 = (xf - cx) * (xf - cx) + (yf - cy) * (yf - cy);
                let bump = math::exp(-r2 / (2.0 * sigma * sigma));
                texture.value(xf - a * bump * dir[0], yf - a * bump * dir[1])
            })
        })
        .collect();
    let face = template_landmarks(0.15 * w, 0.1 * h, 0.7 * w, 0.8 * h);
    let record = AnnotationRecord {
        sample_id: sample_id.to_string(),
        database_id: DatabaseId::Synthetic,
        subject_id: subject_id.to_string(),
        frames_dir: format!("frames/{sample_id}"),
        onset_idx: cfg.onset,
        apex_idx: cfg.apex,
        offset_idx: cfg.offset,
        au_code: representative_au_code(class).to_string(),
        objective_class: Some(class),
        occlusion_tag: OcclusionTag::None,
    };
    SyntheticClip {
        record,
        frames,
        landmarks: LandmarkSet {
            frames: (0..cfg.frames).map(|_| face.clone()).collect(),
        },
    }
}

/// Sample id of the `index`-th clip of `subject`.
pub fn sample_name(subject: usize, index: usize) -> String {
    format!("syn_s{subject:02}_{index:02}")
}
