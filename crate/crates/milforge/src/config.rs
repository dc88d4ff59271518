//! Project configuration (TOML) and the slide label table (CSV).

use crate::error::{Error, Result};
use crate::features::LabelSpace;
use crate::heatmap::HeatmapSpec;
use crate::tiling::SegmentationConfig;
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectConfig {
    pub schema_version: u32,
    /// Class names, in label-index order.
    pub classes: Vec<String>,
    pub slides_dir: PathBuf,
    pub manifest_dir: PathBuf,
    pub embeddings_dir: PathBuf,
    pub labels_file: PathBuf,
    pub out_dir: PathBuf,
    pub train: TrainConfig,
    pub heatmap: HeatmapSpec,
    pub segmentation: SegmentationConfig,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        ProjectConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            classes: vec![],
            slides_dir: "slides".into(),
            manifest_dir: "manifests".into(),
            embeddings_dir: "embeddings".into(),
            labels_file: "labels.csv".into(),
            out_dir: "out".into(),
            train: TrainConfig::default(),
            heatmap: HeatmapSpec::default(),
            segmentation: SegmentationConfig::default(),
        }
    }
}

impl ProjectConfig {
    pub fn parse(text: &str) -> Result<ProjectConfig> {
        let cfg: ProjectConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported config schema version {}",
                cfg.schema_version
            )));
        }
        cfg.train.validate()?;
        cfg.heatmap.validate()?;
        Ok(cfg)
    }

    /// Load a config file and resolve its relative paths against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<ProjectConfig> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for p in [
            &mut cfg.slides_dir,
            &mut cfg.manifest_dir,
            &mut cfg.embeddings_dir,
            &mut cfg.labels_file,
            &mut cfg.out_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&p);
            }
        }
        Ok(cfg)
    }

    pub fn label_space(&self) -> Result<LabelSpace> {
        LabelSpace::new(self.classes.clone())
    }
}

/// Parse a `slide_id,label` CSV using the configured class names.
/// Returns (slide_id, class index) rows in file order.
pub fn parse_labels(text: &str, labels: &LabelSpace) -> Result<Vec<(String, usize)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "slide_id,label" => {}
        Some((_, header)) => {
            return Err(Error::Format(format!(
                "labels file must start with 'slide_id,label', got '{}'",
                header.trim()
            )))
        }
        None => return Err(Error::Format("labels file is empty".into())),
    }
    let mut out: Vec<(String, usize)> = Vec::new();
    for (lineno, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (id, name) = line.split_once(',').ok_or_else(|| {
            Error::Format(format!("labels line {}: expected 'slide_id,label'", lineno + 1))
        })?;
        let id = id.trim();
        let name = name.trim();
        if id.is_empty() {
            return Err(Error::Format(format!("labels line {}: empty slide id", lineno + 1)));
        }
        let class = labels.id(name).ok_or_else(|| {
            Error::Format(format!("labels line {}: unknown class '{name}'", lineno + 1))
        })?;
        if out.iter().any(|(existing, _)| existing == id) {
            return Err(Error::Format(format!(
                "labels line {}: duplicate slide id '{id}'",
                lineno + 1
            )));
        }
        out.push((id.to_string(), class));
    }
    if out.is_empty() {
        return Err(Error::Format("labels file has no rows".into()));
    }
    Ok(out)
}

pub fn read_labels(path: &Path, labels: &LabelSpace) -> Result<Vec<(String, usize)>> {
    parse_labels(&std::fs::read_to_string(path)?, labels)
}
