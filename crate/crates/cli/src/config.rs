use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fdylka_core::data_io::desed_classes;
use fdylka_core::embeddings::{AlignMethod, EmbeddingSource};
use fdylka_core::eval::DecodeConfig;
use fdylka_core::model::ModelConfig;
use fdylka_core::pseudolabel::PseudoConfig;
use fdylka_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Everything a pipeline run needs. Relative paths in a config file are
/// resolved against the file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub classes: Vec<String>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub pseudo: PseudoConfig,
    pub align: AlignMethod,
    pub stage: u32,
    pub workers: usize,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            classes: desed_classes(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            pseudo: PseudoConfig::default(),
            align: AlignMethod::default(),
            stage: 1,
            workers: 1,
            paths: PathsConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub audio_dir: Option<PathBuf>,
    pub feature_dir: Option<PathBuf>,
    pub embeddings: Option<EmbeddingSource>,
    pub strong: Vec<PathBuf>,
    pub weak: Vec<PathBuf>,
    pub unlabeled: Vec<PathBuf>,
    /// Strong manifest scored after validation epochs; defaults to the
    /// strong training manifests.
    pub validation: Option<PathBuf>,
    pub pseudo_labels: Vec<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl PathsConfig {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.audio_dir, &mut self.feature_dir, &mut self.validation, &mut self.output_dir]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        for list in [&mut self.strong, &mut self.weak, &mut self.unlabeled, &mut self.pseudo_labels] {
            list.iter_mut().for_each(fix);
        }
        if let Some(EmbeddingSource::File { dir }) = &mut self.embeddings {
            fix(dir);
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.paths.resolve(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() != self.model.class_count {
            bail!(
                "config lists {} classes but model.class_count is {}",
                self.classes.len(),
                self.model.class_count
            );
        }
        if !matches!(self.stage, 1 | 2) {
            bail!("stage must be 1 or 2, got {}", self.stage);
        }
        self.model.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        Ok(())
    }

    /// Write the fully materialized config next to the run's outputs.
    pub fn echo(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(name);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
