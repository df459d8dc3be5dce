//! Seeded stand-in databases for trying the pipeline without the licensed
//! corpora.

use std::path::Path;

use rrrn_core::dataset::{DatasetManifest, ObjectiveClass};
use rrrn_core::seed;
use rrrn_core::synthetic::{sample_name, synthesize_clip, SyntheticConfig};

use crate::assets::{procedural_glasses, procedural_mask, write_asset};
use crate::error::{Error, Result};
use crate::frames::write_sequence;
use crate::landmarks::write_landmarks;
use crate::manifest_io::{write_manifest, ManifestFile};
use crate::occlude::MANIFEST_NAME;

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateSpec {
    pub subjects: usize,
    pub per_subject: usize,
    /// Cycled through within each subject.
    pub classes: Vec<ObjectiveClass>,
    pub clip: SyntheticConfig,
    pub seed: u64,
    /// Offset added to subject numbers, so two databases can be disjoint.
    pub first_subject: usize,
}

impl Default for GenerateSpec {
    fn default() -> Self {
        Self {
            subjects: 10,
            per_subject: 6,
            classes: vec![ObjectiveClass::I, ObjectiveClass::III],
            clip: SyntheticConfig::default(),
            seed: 0,
            first_subject: 0,
        }
    }
}

/// Writes `manifest.tsv`, `frames/<id>/`, `landmarks/<id>.txt` and a small
/// set of accessory assets under `out_dir`.
pub fn generate_database(spec: &GenerateSpec, out_dir: &Path) -> Result<ManifestFile> {
    if spec.classes.is_empty() || spec.subjects == 0 || spec.per_subject == 0 {
        return Err(Error::format(out_dir, "generation needs at least one class, subject and clip"));
    }
    let mut records = Vec::with_capacity(spec.subjects * spec.per_subject);
    for s in spec.first_subject..spec.first_subject + spec.subjects {
        let subject = format!("s{s:02}");
        for i in 0..spec.per_subject {
            let id = sample_name(s, i);
            let class = spec.classes[i % spec.classes.len()];
            let mut rng = seed::rng_for(spec.seed, &id);
            let clip = synthesize_clip(&id, &subject, class, &spec.clip, &mut rng);
            write_sequence(&out_dir.join(&clip.record.frames_dir), &clip.rgb_frames())?;
            write_landmarks(&out_dir.join("landmarks"), &id, &clip.landmarks)?;
            records.push(clip.record);
        }
    }
    write_default_assets(&out_dir.join("assets"))?;
    let manifest = DatasetManifest::new(records, format!("synthetic, seed {}", spec.seed)).map_err(|source| Error::Manifest {
        path: out_dir.join(MANIFEST_NAME),
        source,
    })?;
    write_manifest(&out_dir.join(MANIFEST_NAME), &manifest)?;
    Ok(ManifestFile {
        manifest,
        root: out_dir.to_path_buf(),
    })
}

/// Two masks and two pairs of glasses under `masks/` and `glasses/`.
pub fn write_default_assets(dir: &Path) -> Result<()> {
    write_asset(&dir.join("masks"), 0, &procedural_mask([120, 170, 210]))?;
    write_asset(&dir.join("masks"), 1, &procedural_mask([235, 235, 235]))?;
    write_asset(&dir.join("glasses"), 0, &procedural_glasses(20))?;
    write_asset(&dir.join("glasses"), 1, &procedural_glasses(60))?;
    Ok(())
}
