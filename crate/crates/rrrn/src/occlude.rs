//! Writes an occluded copy of a database: frames, landmarks and a manifest
//! whose records carry the occlusion tag.

use std::path::Path;

use rand::Rng;
use rrrn_core::dataset::DatasetManifest;
use rrrn_core::occlusion::{occlude_sequence, OcclusionAsset, OcclusionError, OcclusionKind, OcclusionSpec};
use rrrn_core::seed;

use crate::error::{Error, Result};
use crate::frames::{read_sequence, write_sequence};
use crate::landmarks::{read_landmarks, write_landmarks};
use crate::manifest_io::{write_manifest, ManifestFile};

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Occludes every record of `input` into `out_dir`. Each sample draws from
/// its own stream derived from the spec seed and its id, so the result does
/// not depend on record order.
pub fn synthesize_database(
    input: &ManifestFile,
    landmarks_dir: Option<&Path>,
    assets: &[OcclusionAsset],
    spec: &OcclusionSpec,
    out_dir: &Path,
) -> Result<ManifestFile> {
    spec.validate()?;
    let tag = spec.tag().ok_or(OcclusionError::RatioOutOfRange(spec.ratio.unwrap_or_default()))?;
    let accessory = spec.kind != OcclusionKind::Random;
    if accessory && assets.is_empty() {
        return Err(OcclusionError::InvalidAsset("no accessory assets".into()).into());
    }
    if let Some(i) = spec.asset_index.filter(|&i| i >= assets.len()) {
        return Err(OcclusionError::InvalidSpec(format!("asset index {i} out of {} assets", assets.len())).into());
    }
    let mut records = Vec::with_capacity(input.manifest.len());
    for record in &input.manifest.records {
        let frames = read_sequence(&input.frames_dir(record))?;
        let landmarks = match landmarks_dir {
            Some(dir) => Some(read_landmarks(dir, &record.sample_id)?),
            None if accessory => return Err(OcclusionError::MissingLandmarks(record.sample_id.clone()).into()),
            None => None,
        };
        let mut rng = seed::rng_for(spec.seed, &record.sample_id);
        let asset = if accessory {
            let index = spec.asset_index.unwrap_or_else(|| rng.gen_range(0..assets.len()));
            Some(&assets[index])
        } else {
            None
        };
        let occluded = occlude_sequence(&record.sample_id, &frames, landmarks.as_ref(), spec, asset, &mut rng)
            .map_err(|e| Error::Sample {
                sample_id: record.sample_id.clone(),
                reason: e.to_string(),
            })?;
        let frames_dir = format!("frames/{}", record.sample_id);
        write_sequence(&out_dir.join(&frames_dir), &occluded)?;
        if let Some(lm) = &landmarks {
            write_landmarks(&out_dir.join("landmarks"), &record.sample_id, lm)?;
        }
        let mut out = record.clone();
        out.frames_dir = frames_dir;
        out.occlusion_tag = tag;
        records.push(out);
    }
    let note = format!("{} occluded with {tag}, seed {}", input.manifest.source_note, spec.seed);
    let manifest = DatasetManifest::new(records, note.trim()).map_err(|source| Error::Manifest {
        path: out_dir.join(MANIFEST_NAME),
        source,
    })?;
    write_manifest(&out_dir.join(MANIFEST_NAME), &manifest)?;
    Ok(ManifestFile {
        manifest,
        root: out_dir.to_path_buf(),
    })
}
