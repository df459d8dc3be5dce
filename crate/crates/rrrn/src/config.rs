//! Flat `key = value` configuration files. Blank lines and `#` comments are
//! ignored; relative paths resolve against the file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use rrrn_core::flow::TvL1;
use rrrn_core::protocol::RunConfig;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DataPaths {
    /// Composite manifest for CDE.
    pub manifest: Option<PathBuf>,
    /// The two databases for HDE.
    pub hde_first: Option<PathBuf>,
    pub hde_second: Option<PathBuf>,
    pub landmarks: Option<PathBuf>,
    /// Holds `masks/` and `glasses/`.
    pub assets: Option<PathBuf>,
    /// Checkpoint whose backbone seeds `backbone.pretrained_init`.
    pub pretrained: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub flow: TvL1,
    pub data: DataPaths,
    /// Fixed accessory for mask/glass synthesis; unset draws one per sample.
    pub asset_index: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run: RunConfig::default(),
            flow: TvL1::default(),
            data: DataPaths::default(),
            asset_index: None,
        }
    }
}

fn parse<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        line,
        reason: format!("bad value `{value}` for `{key}`"),
    })
}

impl ExperimentConfig {
    pub fn parse_str(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = no + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                reason: format!("expected `key = value`, found `{content}`"),
            })?;
            cfg.set(line, key.trim(), value.trim(), base)?;
        }
        cfg.run.validate()?;
        if cfg.run.model.backbone.pretrained_init && cfg.data.pretrained.is_none() {
            return Err(Error::Config {
                line: 0,
                reason: "backbone.pretrained_init needs data.pretrained".into(),
            });
        }
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse_str(&text, path.parent().unwrap_or(Path::new("")))
    }

    fn set(&mut self, line: usize, key: &str, value: &str, base: &Path) -> Result<()> {
        let path = || Some(base.join(value));
        match key {
            "data.manifest" => self.data.manifest = path(),
            "data.hde_first" => self.data.hde_first = path(),
            "data.hde_second" => self.data.hde_second = path(),
            "data.landmarks" => self.data.landmarks = path(),
            "data.assets" => self.data.assets = path(),
            "data.pretrained" => self.data.pretrained = path(),
            "occlusion.asset_index" => self.asset_index = Some(parse(line, key, value)?),
            "flow.preset" => {
                self.flow = match value {
                    "standard" => TvL1::default(),
                    "fast" => TvL1::fast(),
                    _ => {
                        return Err(Error::Config {
                            line,
                            reason: format!("unknown flow preset `{value}`"),
                        })
                    }
                }
            }
            "flow.tau" => self.flow.tau = parse(line, key, value)?,
            "flow.lambda" => self.flow.lambda = parse(line, key, value)?,
            "flow.theta" => self.flow.theta = parse(line, key, value)?,
            "flow.scales" => self.flow.scales = parse(line, key, value)?,
            "flow.min_size" => self.flow.min_size = parse(line, key, value)?,
            "flow.warps" => self.flow.warps = parse(line, key, value)?,
            "flow.epsilon" => self.flow.epsilon = parse(line, key, value)?,
            "flow.max_iterations" => self.flow.max_iterations = parse(line, key, value)?,
            _ => {
                let known = self.run.set(key, value).map_err(|e| Error::Config { line, reason: e.to_string() })?;
                if !known {
                    return Err(Error::Config {
                        line,
                        reason: format!("unknown key `{key}`"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Canonical rendering of the training and flow settings.
    pub fn to_text(&self) -> String {
        let f = &self.flow;
        let mut out = String::new();
        for (k, v) in self.run.to_pairs() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        for (k, v) in [
            ("flow.tau", f.tau.to_string()),
            ("flow.lambda", f.lambda.to_string()),
            ("flow.theta", f.theta.to_string()),
            ("flow.scales", f.scales.to_string()),
            ("flow.min_size", f.min_size.to_string()),
            ("flow.warps", f.warps.to_string()),
            ("flow.epsilon", f.epsilon.to_string()),
            ("flow.max_iterations", f.max_iterations.to_string()),
        ] {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_comments_and_paths() {
        let text = "# demo\nepochs = 3\nbackbone.variant = TOY_CNN # inline\n\ndata.manifest = m.tsv\nflow.preset = fast\nflow.warps = 2\n";
        let cfg = ExperimentConfig::parse_str(text, Path::new("/tmp/x")).unwrap();
        assert_eq!(cfg.run.epochs, 3);
        assert_eq!(cfg.data.manifest.as_deref(), Some(Path::new("/tmp/x/m.tsv")));
        assert_eq!(cfg.flow.warps, 2);
        assert_eq!(cfg.flow.max_iterations, TvL1::fast().max_iterations);
    }

    #[test]
    fn rejects_unknown_keys_with_line_numbers() {
        let err = ExperimentConfig::parse_str("epochs = 2\nnope = 1\n", Path::new("")).unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }), "{err}");
        let err = ExperimentConfig::parse_str("epochs = many\n", Path::new("")).unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, .. }), "{err}");
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.run.learning_rate = 0.001;
        cfg.flow = TvL1::fast();
        let back = ExperimentConfig::parse_str(&cfg.to_text(), Path::new("")).unwrap();
        assert_eq!(back.run, cfg.run);
        assert_eq!(back.flow, cfg.flow);
    }
}
