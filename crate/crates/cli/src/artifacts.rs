//! Reading and writing run artifacts: datasets, model checkpoints, run manifests.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use phaseda::io::{read_checkpoint, write_checkpoint, Checkpoint};
use phaseda::models::{build_cpn, build_segnet, build_translator, CpnModel, Net, SegModel, TranslatorModel};
use phaseda::synthdata::{Dataset, DatasetReader, SceneConfig, MANIFEST};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::json;

pub const DATASET_INFO: &str = "dataset.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub seed: u64,
    pub scenes: usize,
    pub config: SceneConfig,
}

pub fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("input file not found: {}", path.display());
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(Dataset, Vec<PathBuf>)> {
    let info_path = dir.join(DATASET_INFO);
    require_file(&info_path)?;
    require_file(&dir.join(MANIFEST))?;
    let info: DatasetInfo = serde_json::from_str(&std::fs::read_to_string(&info_path)?)
        .with_context(|| format!("malformed {}", info_path.display()))?;
    let reader = DatasetReader::open(dir)?;
    let ds = reader.load(info.config, info.seed)?;
    Ok((ds, vec![info_path, dir.join(MANIFEST)]))
}

/// Which network a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Translator,
    Discriminator,
    Segmenter,
    Prior,
}

pub fn save_model(path: &Path, kind: Kind, net: &Net, config: impl Serialize, classes: Option<usize>, seed: u64) -> Result<()> {
    let meta = json!({
        "kind": kind,
        "prefix": net.prefix(),
        "config": config,
        "classes": classes,
        "seed": seed,
    });
    write_checkpoint(path, &Checkpoint::from_params(net.params(), meta))?;
    Ok(())
}

struct Loaded<C> {
    config: C,
    classes: Option<usize>,
    prefix: String,
    checkpoint: Checkpoint,
}

fn load<C: DeserializeOwned>(path: &Path, kind: Kind) -> Result<Loaded<C>> {
    require_file(path)?;
    let checkpoint = read_checkpoint(path)?;
    let meta = &checkpoint.metadata;
    let found: Kind = serde_json::from_value(meta["kind"].clone()).map_err(|_| anyhow!("{}: missing model kind", path.display()))?;
    if found != kind {
        bail!("{}: expected a {kind:?} checkpoint, found {found:?}", path.display());
    }
    let config = serde_json::from_value(meta["config"].clone()).with_context(|| format!("{}: bad model config", path.display()))?;
    let classes = meta["classes"].as_u64().map(|k| k as usize);
    let prefix = meta["prefix"].as_str().ok_or_else(|| anyhow!("{}: missing prefix", path.display()))?.to_string();
    Ok(Loaded { config, classes, prefix, checkpoint })
}

fn classes_of(path: &Path, k: Option<usize>) -> Result<usize> {
    k.ok_or_else(|| anyhow!("{}: missing class count", path.display()))
}

/// Loaded models come back frozen.
pub fn load_translator(path: &Path) -> Result<TranslatorModel> {
    let l = load(path, Kind::Translator)?;
    let mut m = build_translator(&l.config, 0, &l.prefix)?;
    m.net.load(l.checkpoint.into_params())?;
    m.net.params_mut().freeze();
    Ok(m)
}

pub fn load_segmenter(path: &Path) -> Result<SegModel> {
    let l = load(path, Kind::Segmenter)?;
    let mut m = build_segnet(&l.config, classes_of(path, l.classes)?, 0, &l.prefix)?;
    m.net.load(l.checkpoint.into_params())?;
    m.net.params_mut().freeze();
    Ok(m)
}

pub fn load_prior(path: &Path) -> Result<CpnModel> {
    let l = load(path, Kind::Prior)?;
    let mut m = build_cpn(&l.config, classes_of(path, l.classes)?, 0, &l.prefix)?;
    m.net.load(l.checkpoint.into_params())?;
    m.net.params_mut().freeze();
    Ok(m)
}

/// Record of one CLI invocation, written as `run.json` in the output directory.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("run.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }
}
