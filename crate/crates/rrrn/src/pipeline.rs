//! Preprocessing, augmentation, training and evaluation over on-disk data.

use std::borrow::Cow;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rrrn_core::augment::{augment_sample, AugmentationPlan};
use rrrn_core::dataset::{AnnotationRecord, DatasetManifest, OcclusionTag};
use rrrn_core::flow::{compute_flow, crop_regions, RegionCropSpec, RegionStack};
use rrrn_core::image::Plane;
use rrrn_core::occlusion::{AssetKind, OcclusionKind, OcclusionSpec};
use rrrn_core::protocol::{
    evaluate, hde_folds, initial_model, loso_folds, train, EvalReport, Example, ExampleSource, Fold, FoldReport, ProtocolError, Task,
    TrainOutcome,
};
use rrrn_core::seed;

use crate::assets::read_assets;
use crate::cache::{read_stack, write_stack, CacheLayout};
use crate::checkpoint::{self, TrainingState};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::frames::{read_frames_at, read_sequence};
use crate::manifest_io::{read_manifest, ManifestFile};
use crate::occlude::synthesize_database;
use crate::report::write_report;

/// Training sets larger than this are streamed from the cache instead of
/// being held in memory.
const IN_MEMORY_BUDGET: usize = 1 << 30;

/// Which occluded variant of the data an experiment runs on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Occlusion {
    None,
    Mask,
    Glass,
    /// Share of the face box, a multiple of 0.05 in [0.05, 0.5].
    Random(f64),
}

impl Occlusion {
    pub fn tag(self) -> OcclusionTag {
        match self {
            Occlusion::None => OcclusionTag::None,
            Occlusion::Mask => OcclusionTag::Mask,
            Occlusion::Glass => OcclusionTag::Glass,
            Occlusion::Random(r) => OcclusionTag::random((r * 100.0).round() as u8).unwrap_or(OcclusionTag::None),
        }
    }

    pub fn spec(self, seed: u64, asset_index: Option<usize>) -> Option<OcclusionSpec> {
        let (kind, ratio) = match self {
            Occlusion::None => return None,
            Occlusion::Mask => (OcclusionKind::Mask, None),
            Occlusion::Glass => (OcclusionKind::Glass, None),
            Occlusion::Random(r) => (OcclusionKind::Random, Some(r)),
        };
        Some(OcclusionSpec {
            kind,
            ratio,
            seed,
            asset_index: asset_index.filter(|_| ratio.is_none()),
        })
    }
}

impl std::str::FromStr for Occlusion {
    type Err = String;

    /// `none`, `mask`, `glass`, or `randomNN` with NN the percentage.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "none" => Ok(Occlusion::None),
            "mask" => Ok(Occlusion::Mask),
            "glass" | "glasses" => Ok(Occlusion::Glass),
            _ => s
                .strip_prefix("random")
                .map(|p| p.trim_start_matches(['_', ':']))
                .and_then(|p| p.parse::<u8>().ok())
                .and_then(OcclusionTag::random)
                .map(|t| match t {
                    OcclusionTag::Random(p) => Occlusion::Random(f64::from(p) / 100.0),
                    _ => unreachable!(),
                })
                .ok_or_else(|| format!("unknown occlusion `{s}` (none, mask, glass, random05..random50)")),
        }
    }
}

pub fn to_luma(frames: &[rrrn_core::image::RgbImage]) -> Vec<Plane> {
    frames.iter().map(|f| f.to_luma()).collect()
}

/// Training examples kept on disk and read on demand.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CachedExamples {
    entries: Vec<(String, PathBuf, usize, bool)>,
}

impl CachedExamples {
    pub fn push(&mut self, sample_id: &str, path: PathBuf, label: usize, augmented: bool) {
        self.entries.push((sample_id.to_string(), path, label, augmented));
    }

    pub fn load_all(&self) -> Result<Vec<Example>> {
        (0..self.entries.len()).map(|i| Ok(self.example(i)?.into_owned())).collect()
    }
}

impl ExampleSource for CachedExamples {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn example(&self, index: usize) -> Result<Cow<'_, Example>, ProtocolError> {
        let (id, path, label, augmented) = &self.entries[index];
        let stack = read_stack(path).map_err(|_| ProtocolError::CacheMiss(id.clone()))?;
        Ok(Cow::Owned(Example {
            sample_id: id.clone(),
            stack,
            label: *label,
            augmented: *augmented,
        }))
    }
}

fn label_of(record: &AnnotationRecord) -> Result<usize> {
    record
        .objective_class
        .map(|c| c.index())
        .ok_or_else(|| ProtocolError::UnmappedRecord(record.sample_id.clone()).into())
}

fn usable(path: &Path, size: usize) -> bool {
    read_stack(path).is_ok_and(|s| s.size() == size)
}

/// Keeps only records with an objective class.
pub fn mapped_only(file: &ManifestFile) -> Result<(ManifestFile, usize)> {
    let records: Vec<_> = file.manifest.mapped().cloned().collect();
    let dropped = file.manifest.len() - records.len();
    let manifest = DatasetManifest::new(records, file.manifest.source_note.clone()).map_err(|source| Error::Manifest {
        path: file.root.clone(),
        source,
    })?;
    Ok((
        ManifestFile {
            manifest,
            root: file.root.clone(),
        },
        dropped,
    ))
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub verbose: bool,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> Self {
        Self { cfg, verbose: false }
    }

    fn note(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    pub fn crop_spec(&self) -> RegionCropSpec {
        RegionCropSpec::with_output_size(self.cfg.run.model.backbone.input_size)
    }

    fn flow_stack(&self, onset: &Plane, apex: &Plane) -> Result<RegionStack> {
        let flow = compute_flow(onset, apex, &self.cfg.flow)?;
        Ok(crop_regions(&flow, &self.crop_spec())?)
    }

    /// Region stack of the original onset/apex pair.
    pub fn base_stack(&self, file: &ManifestFile, record: &AnnotationRecord) -> Result<RegionStack> {
        let frames = read_frames_at(&file.frames_dir(record), &[record.onset_idx, record.apex_idx])?;
        let planes = to_luma(&frames);
        self.flow_stack(&planes[0], &planes[1]).map_err(|e| Error::Sample {
            sample_id: record.sample_id.clone(),
            reason: e.to_string(),
        })
    }

    /// Region stacks of every augmented pair, in plan order.
    pub fn augmented_stacks(&self, file: &ManifestFile, record: &AnnotationRecord) -> Result<Vec<RegionStack>> {
        let frames = to_luma(&read_sequence(&file.frames_dir(record))?);
        let pairs = augment_sample(record, &frames)?;
        pairs.iter().map(|p| self.flow_stack(&p.onset, &p.apex)).collect()
    }

    /// Writes the base record of every sample missing from the cache.
    /// Returns how many were computed.
    pub fn preprocess(&self, file: &ManifestFile, cache: &CacheLayout) -> Result<usize> {
        let size = self.cfg.run.model.backbone.input_size;
        let mut computed = 0;
        for (i, record) in file.manifest.records.iter().enumerate() {
            let path = cache.base(&record.sample_id);
            if usable(&path, size) {
                continue;
            }
            write_stack(&path, &self.base_stack(file, record)?)?;
            computed += 1;
            self.note(format!("preprocess {}/{} {}", i + 1, file.manifest.len(), record.sample_id));
        }
        Ok(computed)
    }

    /// Writes the augmented records of the samples in `only` (all when
    /// `None`). Returns how many samples were computed.
    pub fn augment(&self, file: &ManifestFile, only: Option<&BTreeSet<String>>, cache: &CacheLayout) -> Result<usize> {
        let size = self.cfg.run.model.backbone.input_size;
        let mut computed = 0;
        let records: Vec<_> = file
            .manifest
            .records
            .iter()
            .filter(|r| only.is_none_or(|ids| ids.contains(&r.sample_id)))
            .collect();
        for (i, record) in records.iter().enumerate() {
            let expected = AugmentationPlan::for_record(record)?.len();
            let existing = cache.augmented_paths(&record.sample_id).unwrap_or_default();
            if existing.len() == expected && existing.iter().all(|p| usable(p, size)) {
                continue;
            }
            let dir = cache.augmented_dir(&record.sample_id);
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(Error::io(&dir))?;
            }
            for (n, stack) in self.augmented_stacks(file, record)?.iter().enumerate() {
                write_stack(&cache.augmented(&record.sample_id, n), stack)?;
            }
            computed += 1;
            self.note(format!("augment {}/{} {} ({expected} pairs)", i + 1, records.len(), record.sample_id));
        }
        Ok(computed)
    }

    /// Cache entries of the training side of `fold`: augmented copies when
    /// augmentation is enabled, else the base records.
    pub fn training_set(&self, labels: &DatasetManifest, fold: &Fold, cache: &CacheLayout) -> Result<CachedExamples> {
        let mut set = CachedExamples::default();
        for id in &fold.train_ids {
            let record = labels.get(id).ok_or_else(|| ProtocolError::CacheMiss(id.clone()))?;
            let label = label_of(record)?;
            if self.cfg.run.augmentation_enabled {
                let paths = cache.augmented_paths(id).map_err(|_| ProtocolError::CacheMiss(id.clone()))?;
                if paths.is_empty() {
                    return Err(ProtocolError::CacheMiss(id.clone()).into());
                }
                for p in paths {
                    set.push(id, p, label, true);
                }
            } else {
                let path = cache.base(id);
                if !path.exists() {
                    return Err(ProtocolError::CacheMiss(id.clone()).into());
                }
                set.push(id, path, label, false);
            }
        }
        Ok(set)
    }

    /// Base records of the test side of `fold`; never augmented.
    pub fn test_examples(&self, labels: &DatasetManifest, fold: &Fold, cache: &CacheLayout) -> Result<Vec<Example>> {
        fold.test_ids
            .iter()
            .map(|id| {
                let record = labels.get(id).ok_or_else(|| ProtocolError::CacheMiss(id.clone()))?;
                let stack = read_stack(&cache.base(id)).map_err(|_| ProtocolError::CacheMiss(id.clone()))?;
                Ok(Example {
                    sample_id: id.clone(),
                    stack,
                    label: label_of(record)?,
                    augmented: false,
                })
            })
            .collect()
    }

    /// Trains on the training side of `fold`. `latest.ckpt` in `dir` is
    /// rewritten after every epoch, `final.ckpt` holds the last one, and
    /// `train_log.tsv` the per-epoch loss means.
    pub fn train_fold(&self, labels: &DatasetManifest, fold: &Fold, cache: &CacheLayout, dir: &Path) -> Result<TrainOutcome> {
        let run = &self.cfg.run;
        let set = self.training_set(labels, fold, cache)?;
        let size = run.model.backbone.input_size;
        let in_memory = set.len().saturating_mul(12 * size * size * 8) <= IN_MEMORY_BUDGET;
        let loaded = if in_memory { Some(set.load_all()?) } else { None };
        let source: &dyn ExampleSource = match &loaded {
            Some(v) => v,
            None => &set,
        };
        let mut model = initial_model(run, source)?;
        if run.model.backbone.pretrained_init {
            let path = self.cfg.data.pretrained.as_deref().ok_or_else(|| Error::Config {
                line: 0,
                reason: "backbone.pretrained_init needs data.pretrained".into(),
            })?;
            let copied = checkpoint::copy_backbone(&checkpoint::read(path)?.model, &mut model);
            self.note(format!("{}: {copied} backbone tensors from {}", fold.name, path.display()));
        }
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let latest = dir.join("latest.ckpt");
        let mut log_text = String::from("epoch\tcls\trb\tcor\ttotal\taccuracy\n");
        let mut failure: Option<Error> = None;
        self.note(format!("{}: training on {} examples", fold.name, source.len()));
        let outcome = train(model, source, run, &mut |end| {
            let l = end.log;
            let _ = writeln!(log_text, "{}\t{}\t{}\t{}\t{}\t{}", l.epoch, l.cls, l.rb, l.cor, l.total, l.accuracy);
            self.note(format!(
                "{} epoch {:>3}  cls {:.4}  rb {:.4}  cor {:.4}  acc {:.3}",
                fold.name, l.epoch, l.cls, l.rb, l.cor, l.accuracy
            ));
            if failure.is_none() {
                let state = TrainingState {
                    epoch: l.epoch,
                    optimizer_step: end.optimizer.step,
                    last: Some(*l),
                };
                failure = checkpoint::write(&latest, run, &state, end.model).err();
            }
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        let log_path = dir.join("train_log.tsv");
        fs::write(&log_path, log_text).map_err(Error::io(&log_path))?;
        let final_path = dir.join("final.ckpt");
        fs::copy(&latest, &final_path).map_err(Error::io(&final_path))?;
        Ok(outcome)
    }

    pub fn evaluate_fold(&self, checkpoint_path: &Path, labels: &DatasetManifest, fold: &Fold, cache: &CacheLayout) -> Result<FoldReport> {
        let ckpt = checkpoint::read(checkpoint_path)?;
        let examples = self.test_examples(labels, fold, cache)?;
        Ok(evaluate(&ckpt.model, fold, &examples)?)
    }

    /// Stable hash of the training and flow settings.
    pub fn fingerprint(&self) -> String {
        format!("{:016x}", seed::fnv1a(self.cfg.to_text().as_bytes()))
    }

    fn databases(&self, task: Task) -> Result<Vec<PathBuf>> {
        let missing = |key: &str| Error::Config {
            line: 0,
            reason: format!("task {} needs `{key}`", task.as_str()),
        };
        let d = &self.cfg.data;
        Ok(match task {
            Task::Cde => vec![d.manifest.clone().ok_or_else(|| missing("data.manifest"))?],
            Task::Hde => vec![
                d.hde_first.clone().ok_or_else(|| missing("data.hde_first"))?,
                d.hde_second.clone().ok_or_else(|| missing("data.hde_second"))?,
            ],
        })
    }

    /// Loads the task's manifests and, for occluded variants, writes the
    /// occluded databases under `out_dir/occluded/`.
    pub fn prepare_databases(&self, task: Task, occlusion: Occlusion, out_dir: &Path) -> Result<Vec<ManifestFile>> {
        let mut files = Vec::new();
        for (i, path) in self.databases(task)?.iter().enumerate() {
            let (file, dropped) = mapped_only(&read_manifest(path)?)?;
            if dropped > 0 {
                self.note(format!("{}: {dropped} records without an objective class left out", path.display()));
            }
            let Some(spec) = occlusion.spec(self.cfg.run.seed, self.cfg.asset_index) else {
                files.push(file);
                continue;
            };
            let assets = match spec.kind {
                OcclusionKind::Random => Vec::new(),
                kind => {
                    let root = self.cfg.data.assets.as_deref().ok_or_else(|| Error::Config {
                        line: 0,
                        reason: "accessory occlusion needs `data.assets`".into(),
                    })?;
                    let (sub, asset_kind) = if kind == OcclusionKind::Mask {
                        ("masks", AssetKind::Mask)
                    } else {
                        ("glasses", AssetKind::Glasses)
                    };
                    read_assets(&root.join(sub), asset_kind)?
                }
            };
            let target = out_dir.join("occluded").join(occlusion.tag().to_string().to_ascii_lowercase()).join(format!("db{i}"));
            self.note(format!("synthesizing {} into {}", occlusion.tag(), target.display()));
            files.push(synthesize_database(&file, self.cfg.data.landmarks.as_deref(), &assets, &spec, &target)?);
        }
        Ok(files)
    }

    /// Full experiment: occlusion synthesis, flow caches, training and
    /// evaluation of every fold, then `report.json` in `out_dir`.
    pub fn run(&self, task: Task, occlusion: Occlusion, out_dir: &Path) -> Result<EvalReport> {
        let files = self.prepare_databases(task, occlusion, out_dir)?;
        let cache = CacheLayout::new(out_dir.join("cache").join(occlusion.tag().to_string().to_ascii_lowercase()));
        for file in &files {
            self.preprocess(file, &cache)?;
            if self.cfg.run.augmentation_enabled {
                self.augment(file, None, &cache)?;
            }
        }
        let parts: Vec<&DatasetManifest> = files.iter().map(|f| &f.manifest).collect();
        let labels = DatasetManifest::merge(&parts, "").map_err(|source| Error::Manifest {
            path: out_dir.to_path_buf(),
            source,
        })?;
        let folds = match task {
            Task::Hde => hde_folds(&files[0].manifest, &files[1].manifest)?.to_vec(),
            Task::Cde => loso_folds(&labels)?,
        };
        let mut reports = Vec::with_capacity(folds.len());
        for fold in &folds {
            let dir = out_dir.join("checkpoints").join(&fold.name);
            self.train_fold(&labels, fold, &cache, &dir)?;
            let report = self.evaluate_fold(&dir.join("final.ckpt"), &labels, fold, &cache)?;
            self.note(format!("{}: WAR {:.4} UAR {:.4}", fold.name, report.war, report.uar));
            reports.push(report);
        }
        let report = EvalReport::new(task, occlusion.tag().to_string(), reports, self.fingerprint())?;
        write_report(&out_dir.join("report.json"), &report)?;
        Ok(report)
    }
}
