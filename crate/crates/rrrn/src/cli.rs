//! Command-line interface.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rrrn_core::dataset::{DatasetManifest, ObjectiveClass};
use rrrn_core::occlusion::{AssetKind, OcclusionKind, OcclusionSpec};
use rrrn_core::protocol::{hde_folds, loso_folds, EvalReport, Fold, Task};
use rrrn_core::synthetic::SyntheticConfig;

use crate::assets::read_assets;
use crate::cache::CacheLayout;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::generate::{generate_database, GenerateSpec};
use crate::manifest_io::{read_manifest, write_manifest, ManifestFile};
use crate::occlude::synthesize_database;
use crate::pipeline::{mapped_only, Occlusion, Pipeline};
use crate::report::{read_report, summary, write_report};

#[derive(Debug, Parser)]
#[command(name = "rrrn", version, about = "Occlusion-robust micro-expression recognition on optical-flow regions")]
pub struct Cli {
    /// Suppress progress messages.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Hde,
    Cde,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Hde => Task::Hde,
            TaskArg::Cde => Task::Cde,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Mask,
    Glass,
    Random,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Experiment configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Manifest; give two for HDE.
    #[arg(long = "in", required = true)]
    pub manifests: Vec<PathBuf>,
    /// Flow cache directory.
    #[arg(long)]
    pub cache: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a manifest, map AU codes and print the class distribution.
    Ingest {
        #[arg(long = "in")]
        input: PathBuf,
        /// Write the class-mapped records here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a seeded synthetic database with landmarks and accessory assets.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        subjects: usize,
        #[arg(long, default_value_t = 6)]
        per_subject: usize,
        /// Comma-separated objective classes cycled within each subject.
        #[arg(long, default_value = "I,III", value_delimiter = ',')]
        classes: Vec<String>,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        first_subject: usize,
    },
    /// Build an occluded copy of a database.
    Synth {
        #[arg(long, value_enum)]
        kind: KindArg,
        /// Face-box share for random blocks, 0.05 to 0.50 in steps of 0.05.
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Accessory directory with numbered PNGs and anchor sidecars.
        #[arg(long)]
        assets: Option<PathBuf>,
        /// Use one accessory for every sample instead of drawing per sample.
        #[arg(long)]
        asset_index: Option<usize>,
        #[arg(long)]
        landmarks: Option<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the onset/apex flow region stacks into the cache.
    Preprocess(DataArgs),
    /// Compute the augmented flow region stacks into the cache.
    Augment(DataArgs),
    /// Train one fold or all folds.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum)]
        task: TaskArg,
        /// Fold name, or `all`.
        #[arg(long, default_value = "all")]
        fold: String,
        /// Checkpoints go to `<out>/<fold>/`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate trained folds and write a report.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long, default_value = "all")]
        fold: String,
        /// Directory holding `<fold>/final.ckpt`.
        #[arg(long)]
        checkpoints: PathBuf,
        /// Occlusion label written into the report.
        #[arg(long, default_value = "NONE")]
        occlusion: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize, preprocess, augment, train and evaluate a whole task.
    Run {
        #[arg(long, value_enum)]
        task: TaskArg,
        /// none, mask, glass or random05..random50.
        #[arg(long, default_value = "none")]
        occlusion: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check reports and print their metrics.
    Report {
        #[arg(long = "in", required = true)]
        reports: Vec<PathBuf>,
    },
}

fn usage(reason: impl Into<String>) -> Error {
    Error::Usage(reason.into())
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    path.map_or_else(|| Ok(ExperimentConfig::default()), ExperimentConfig::read)
}

fn load_data(data: &DataArgs, quiet: bool) -> Result<(Pipeline, Vec<ManifestFile>, CacheLayout)> {
    let mut pipeline = Pipeline::new(load_config(data.config.as_deref())?);
    pipeline.verbose = !quiet;
    let files = data
        .manifests
        .iter()
        .map(|p| Ok(mapped_only(&read_manifest(p)?)?.0))
        .collect::<Result<Vec<_>>>()?;
    Ok((pipeline, files, CacheLayout::new(&data.cache)))
}

fn folds_for(task: Task, files: &[ManifestFile], which: &str) -> Result<(DatasetManifest, Vec<Fold>)> {
    let parts: Vec<&DatasetManifest> = files.iter().map(|f| &f.manifest).collect();
    let labels = DatasetManifest::merge(&parts, "").map_err(|source| Error::Manifest {
        path: PathBuf::new(),
        source,
    })?;
    let folds = match (task, files) {
        (Task::Hde, [a, b]) => hde_folds(&a.manifest, &b.manifest)?.to_vec(),
        (Task::Hde, _) => return Err(usage("hde needs exactly two --in manifests")),
        (Task::Cde, _) => loso_folds(&labels)?,
    };
    if which == "all" {
        return Ok((labels, folds));
    }
    let chosen: Vec<Fold> = folds.into_iter().filter(|f| f.name == which).collect();
    if chosen.is_empty() {
        return Err(usage(format!("no fold named `{which}`")));
    }
    Ok((labels, chosen))
}

pub fn execute(cli: Cli) -> Result<()> {
    let quiet = cli.quiet;
    match cli.command {
        Command::Ingest { input, out } => {
            let (file, dropped) = mapped_only(&read_manifest(&input)?)?;
            let dist = file.manifest.class_distribution().map_err(|e| usage(e.to_string()))?;
            println!("{} records kept, {dropped} without an objective class, {} subjects", dist.total, dist.subjects);
            for (i, n) in dist.counts.iter().enumerate() {
                let class = ObjectiveClass::from_index(i).expect("class index");
                println!("class {:<4} {n}", class.as_str());
            }
            if let Some(out) = out {
                write_manifest(&out, &file.manifest)?;
            }
        }
        Command::Generate {
            out,
            subjects,
            per_subject,
            classes,
            size,
            seed,
            first_subject,
        } => {
            let classes = classes
                .iter()
                .map(|c| c.trim().parse::<ObjectiveClass>().map_err(usage))
                .collect::<Result<Vec<_>>>()?;
            let spec = GenerateSpec {
                subjects,
                per_subject,
                classes,
                clip: SyntheticConfig {
                    width: size,
                    height: size,
                    ..SyntheticConfig::default()
                },
                seed,
                first_subject,
            };
            let file = generate_database(&spec, &out)?;
            if !quiet {
                eprintln!("wrote {} clips to {}", file.manifest.len(), out.display());
            }
        }
        Command::Synth {
            kind,
            ratio,
            seed,
            assets,
            asset_index,
            landmarks,
            input,
            out,
        } => {
            let kind = match kind {
                KindArg::Mask => OcclusionKind::Mask,
                KindArg::Glass => OcclusionKind::Glass,
                KindArg::Random => OcclusionKind::Random,
            };
            let spec = OcclusionSpec {
                kind,
                ratio,
                seed,
                asset_index,
            };
            spec.validate()?;
            let loaded = match (kind, assets) {
                (OcclusionKind::Random, _) => Vec::new(),
                (_, None) => return Err(usage("--assets is required for mask and glass")),
                (OcclusionKind::Mask, Some(dir)) => read_assets(&dir, AssetKind::Mask)?,
                (_, Some(dir)) => read_assets(&dir, AssetKind::Glasses)?,
            };
            let file = synthesize_database(&read_manifest(&input)?, landmarks.as_deref(), &loaded, &spec, &out)?;
            if !quiet {
                eprintln!("wrote {} occluded clips to {}", file.manifest.len(), out.display());
            }
        }
        Command::Preprocess(data) => {
            let (pipeline, files, cache) = load_data(&data, quiet)?;
            for f in &files {
                pipeline.preprocess(f, &cache)?;
            }
        }
        Command::Augment(data) => {
            let (pipeline, files, cache) = load_data(&data, quiet)?;
            for f in &files {
                pipeline.augment(f, None, &cache)?;
            }
        }
        Command::Train { data, task, fold, out } => {
            let (pipeline, files, cache) = load_data(&data, quiet)?;
            let (labels, folds) = folds_for(task.into(), &files, &fold)?;
            for f in &folds {
                pipeline.train_fold(&labels, f, &cache, &out.join(&f.name))?;
            }
        }
        Command::Eval {
            data,
            task,
            fold,
            checkpoints,
            occlusion,
            out,
        } => {
            let (pipeline, files, cache) = load_data(&data, quiet)?;
            let (labels, folds) = folds_for(task.into(), &files, &fold)?;
            let reports = folds
                .iter()
                .map(|f| pipeline.evaluate_fold(&checkpoints.join(&f.name).join("final.ckpt"), &labels, f, &cache))
                .collect::<Result<Vec<_>>>()?;
            let report = EvalReport::new(task.into(), occlusion, reports, pipeline.fingerprint())?;
            write_report(&out, &report)?;
            print!("{}", summary(&report));
        }
        Command::Run {
            task,
            occlusion,
            config,
            out,
        } => {
            let occlusion: Occlusion = occlusion.parse().map_err(usage)?;
            let mut pipeline = Pipeline::new(ExperimentConfig::read(&config)?);
            pipeline.verbose = !quiet;
            let report = pipeline.run(task.into(), occlusion, &out)?;
            print!("{}", summary(&report));
        }
        Command::Report { reports } => {
            for path in reports {
                print!("{}", summary(&read_report(&path)?));
            }
        }
    }
    Ok(())
}

/// Parses `args` and runs the command. Returns the process exit code: 0 on
/// success, 1 on runtime failure, 2 on usage errors.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            e.exit_code()
        }
    }
}
