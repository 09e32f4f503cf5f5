//! Run configurations: optional TOML/JSON file, then command-line overrides, then written back
//! next to the outputs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use haba_core::distill::DistillConfig;
use haba_core::ddmatch::ExpertConfig;
use haba_core::evalharness::{BaselineMode, EvalConfig};
use haba_core::nets::{Arch, NetConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub dataset: String,
    pub root: PathBuf,
    /// Fit ZCA on the training split (ignored when `zca_stats` is given).
    pub zca: bool,
    pub zca_epsilon: f64,
    /// Previously saved statistics to whiten with.
    pub zca_stats: Option<PathBuf>,
    /// Class-balanced training subset of this many images per class.
    pub train_per_class: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: "blobs".into(),
            root: PathBuf::from("data"),
            zca: false,
            zca_epsilon: haba_core::dataio::DEFAULT_ZCA_EPSILON,
            zca_stats: None,
            train_per_class: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertRun {
    pub data: DataConfig,
    pub net: NetConfig,
    pub expert: ExpertConfig,
    /// Trajectories are recorded for seeds `seed .. seed + count`.
    pub seed: u64,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillRun {
    pub data: DataConfig,
    pub distill: DistillConfig,
    pub trajectory: Option<PathBuf>,
    /// Write `fd.haba` every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalRun {
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub fd: Option<PathBuf>,
    /// Architectures to evaluate; empty uses `eval.net.arch`.
    pub archs: Vec<Arch>,
    pub method: String,
    pub baseline: Option<BaselineMode>,
    /// Config of the distillation stub baseline.
    pub stub: Option<DistillConfig>,
    pub stub_trajectory: Option<PathBuf>,
}

impl Default for EvalRun {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            fd: None,
            archs: Vec::new(),
            method: "haba".into(),
            baseline: None,
            stub: None,
            stub_trajectory: None,
        }
    }
}

/// Reads `path` as TOML, or JSON when the extension is `.json`.
pub fn load_file<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).with_context(|| format!("parsing JSON config {}", path.display()))
    } else {
        toml::from_str(&text).with_context(|| format!("parsing TOML config {}", path.display()))
    }
}

/// Resolved config plus the fingerprints of everything the run read.
#[derive(Serialize)]
pub struct Resolved<'a, T: Serialize> {
    pub command: &'a str,
    pub version: &'a str,
    pub config: &'a T,
    pub inputs: std::collections::BTreeMap<String, String>,
}

pub fn write_resolved<T: Serialize>(out: &Path, command: &str, config: &T, inputs: Vec<(String, String)>) -> Result<PathBuf> {
    let resolved = Resolved { command, version: env!("CARGO_PKG_VERSION"), config, inputs: inputs.into_iter().collect() };
    let text = toml::to_string_pretty(&resolved).context("serializing resolved config")?;
    let path = out.join(format!("{command}.resolved.toml"));
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(&Sha256::digest(&bytes)[..16]))
}

/// Parses a snake_case enum name through its serde representation.
pub fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|e| e.to_string())
}

pub fn parse_archs(s: &str) -> Result<Vec<Arch>> {
    let archs: Result<Vec<Arch>, _> = s.split(',').map(|a| a.trim().parse()).collect();
    let archs = archs?;
    if archs.is_empty() {
        bail!("empty architecture list");
    }
    Ok(archs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_files_fill_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("run.toml");
        std::fs::write(&t, "[distill]\niterations = 7\n[distill.factor]\nbases_per_class = 3\n").unwrap();
        let run: DistillRun = load_file(Some(&t)).unwrap();
        assert_eq!((run.distill.iterations, run.distill.factor.bases_per_class), (7, 3));
        assert_eq!(run.data, DataConfig::default());
        let j = dir.path().join("run.json");
        std::fs::write(&j, r#"{"seed": 9, "count": 2}"#).unwrap();
        let run: ExpertRun = load_file(Some(&j)).unwrap();
        assert_eq!((run.seed, run.count), (9, 2));
        std::fs::write(&t, "[distill]\niterations = \"many\"\n").unwrap();
        assert!(load_file::<DistillRun>(Some(&t)).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let run = EvalRun { archs: vec![Arch::Convnet], ..Default::default() };
        let path = write_resolved(dir.path(), "eval", &run, vec![("fd".into(), "abc".into())]).unwrap();
        let value: toml::Value = toml::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        assert_eq!(value["inputs"]["fd"].as_str(), Some("abc"));
        let back: EvalRun = value["config"].clone().try_into().unwrap();
        assert_eq!(back, run);
    }

    #[test]
    fn enum_and_arch_parsing() {
        assert_eq!(parse_enum::<BaselineMode>("random-real").unwrap(), BaselineMode::RandomReal);
        assert!(parse_enum::<BaselineMode>("best").is_err());
        assert_eq!(parse_archs("convnet, convnet").unwrap().len(), 2);
        assert!(parse_archs("convnet,nope").is_err());
    }
}
