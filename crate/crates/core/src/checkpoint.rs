//! Checkpoint directories: `manifest.txt`, `params.bin` and `config.txt`.
//!
//! The manifest lists the stage tag, the config hash, free-form metadata and
//! one `param <name> <rows> <cols> <offset>` line per array. `params.bin`
//! holds the arrays back to back as little-endian `f64`, row-major.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use thiserror::Error;

use crate::config::{ConfigError, TrainConfig};
use crate::model::init_backbone;
use crate::params::{ParamGroup, ParamStore};

const MAGIC: &str = "stgp-checkpoint 1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("config hash mismatch: manifest {manifest}, config {actual}")]
    HashMismatch { manifest: String, actual: String },
    #[error("parameter `{name}` has shape {found:?}, config expects {expected:?}")]
    Shape { name: String, found: (usize, usize), expected: (usize, usize) },
    #[error("parameter `{0}` missing from checkpoint")]
    Missing(String),
    #[error("checkpoint stage is `{found}`, expected {expected}")]
    WrongStage { found: String, expected: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stage {
    Pretrained,
    DomainPrompted,
    TaskPrompted(String),
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Pretrained => f.write_str("pretrained"),
            Self::DomainPrompted => f.write_str("domain_prompted"),
            Self::TaskPrompted(t) => write!(f, "task_prompted:{t}"),
        }
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pretrained" => Ok(Self::Pretrained),
            "domain_prompted" => Ok(Self::DomainPrompted),
            other => other
                .strip_prefix("task_prompted:")
                .filter(|t| !t.is_empty())
                .map(|t| Self::TaskPrompted(t.to_string()))
                .ok_or_else(|| format!("unknown stage `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: TrainConfig,
    pub params: ParamStore,
    /// Free-form single-line metadata (node ids, split bounds, ...).
    pub meta: BTreeMap<String, String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

impl Checkpoint {
    pub fn new(stage: Stage, config: TrainConfig, params: ParamStore) -> Self {
        Self { stage, config, params, meta: BTreeMap::new() }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut manifest = format!("{MAGIC}\nstage {}\nconfig_hash {}\n", self.stage, self.config.hash());
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(CheckpointError::Manifest(format!("meta entry `{k}` is not single-line")));
            }
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        let mut payload = Vec::new();
        for (name, arr) in self.params.iter() {
            manifest.push_str(&format!("param {name} {} {} {}\n", arr.nrows(), arr.ncols(), payload.len()));
            for &x in arr.iter() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        for (file, bytes) in [("manifest.txt", manifest.into_bytes()), ("params.bin", payload), ("config.txt", self.config.to_text().into_bytes())] {
            let path = dir.join(file);
            fs::write(&path, bytes).map_err(io_err(&path))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let dir = dir.as_ref();
        let read = |file: &str| {
            let path = dir.join(file);
            fs::read(&path).map_err(io_err(&path))
        };
        let manifest = String::from_utf8(read("manifest.txt")?).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        let payload = read("params.bin")?;
        let config = TrainConfig::parse(&String::from_utf8_lossy(&read("config.txt")?))?;

        let mut lines = manifest.lines();
        if lines.next() != Some(MAGIC) {
            return Err(CheckpointError::Manifest("missing header".into()));
        }
        let mut stage = None;
        let mut hash = None;
        let mut meta = BTreeMap::new();
        let mut params = ParamStore::new();
        for line in lines {
            let (kind, rest) = line.split_once(' ').ok_or_else(|| CheckpointError::Manifest(format!("bad line `{line}`")))?;
            match kind {
                "stage" => stage = Some(rest.parse::<Stage>().map_err(CheckpointError::Manifest)?),
                "config_hash" => hash = Some(rest.to_string()),
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    meta.insert(k.to_string(), v.to_string());
                }
                "param" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    let bad = || CheckpointError::Manifest(format!("bad param line `{line}`"));
                    if f.len() != 4 {
                        return Err(bad());
                    }
                    let rows: usize = f[1].parse().map_err(|_| bad())?;
                    let cols: usize = f[2].parse().map_err(|_| bad())?;
                    let offset: usize = f[3].parse().map_err(|_| bad())?;
                    let end = offset + rows * cols * 8;
                    let bytes = payload.get(offset..end).ok_or_else(bad)?;
                    let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                    params.insert(f[0], Array2::from_shape_vec((rows, cols), values).map_err(|_| bad())?);
                }
                other => return Err(CheckpointError::Manifest(format!("unknown entry `{other}`"))),
            }
        }
        let stage = stage.ok_or_else(|| CheckpointError::Manifest("missing stage".into()))?;
        let manifest_hash = hash.ok_or_else(|| CheckpointError::Manifest("missing config_hash".into()))?;
        if manifest_hash != config.hash() {
            return Err(CheckpointError::HashMismatch { manifest: manifest_hash, actual: config.hash() });
        }
        let ckpt = Self { stage, config, params, meta };
        ckpt.verify_shapes()?;
        Ok(ckpt)
    }

    /// Checks every array against the shapes implied by the config.
    pub fn verify_shapes(&self) -> Result<(), CheckpointError> {
        let reference = init_backbone(&self.config, 0);
        for (name, expected) in reference.iter() {
            let found = self.params.get(name).ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            if found.dim() != expected.dim() {
                return Err(CheckpointError::Shape { name: name.clone(), found: found.dim(), expected: expected.dim() });
            }
        }
        for (name, arr) in self.params.iter() {
            let expected = match ParamGroup::of(name) {
                ParamGroup::DomainPrompts | ParamGroup::TaskPrompts(_) => (self.config.num_prompts, self.config.d_hidden),
                ParamGroup::Buffer => (2, self.config.num_channels),
                _ if reference.contains(name) => continue,
                _ => return Err(CheckpointError::Manifest(format!("unexpected parameter `{name}`"))),
            };
            if arr.dim() != expected {
                return Err(CheckpointError::Shape { name: name.clone(), found: arr.dim(), expected });
            }
        }
        Ok(())
    }

    pub fn expect_stage(&self, ok: impl Fn(&Stage) -> bool, expected: &str) -> Result<(), CheckpointError> {
        if ok(&self.stage) {
            Ok(())
        } else {
            Err(CheckpointError::WrongStage { found: self.stage.to_string(), expected: expected.to_string() })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::bitwise_eq;

    fn small() -> TrainConfig {
        TrainConfig { d_hidden: 8, heads: 2, enc_layers_spatial: 1, enc_layers_temporal: 1, dec_layers: 1, d_dec: 4, head_hidden: 4, head_hidden2: 4, num_prompts: 3, ..TrainConfig::default() }
    }

    #[test]
    fn save_load_is_bitwise() {
        let cfg = small();
        let mut params = init_backbone(&cfg, 1);
        params.insert("domain.spatial", Array2::from_elem((3, 8), -0.0));
        params.insert("norm.target", ndarray::array![[1.5], [f64::MIN_POSITIVE]]);
        let mut ck = Checkpoint::new(Stage::TaskPrompted("kriging".into()), cfg, params);
        ck.meta.insert("node_ids".into(), "a,b,c".into());
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.stage, ck.stage);
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.params.len(), ck.params.len());
        for (name, arr) in ck.params.iter() {
            assert!(bitwise_eq(arr, back.params.expect(name)), "{name}");
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cfg = small();
        let mut params = init_backbone(&cfg, 1);
        params.insert("encoder.pe", Array2::zeros((3, 8)));
        let dir = tempfile::tempdir().unwrap();
        Checkpoint::new(Stage::Pretrained, cfg, params).save(dir.path()).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(CheckpointError::Shape { .. })));
    }

    #[test]
    fn edited_config_rejected() {
        let cfg = small();
        let dir = tempfile::tempdir().unwrap();
        Checkpoint::new(Stage::Pretrained, cfg.clone(), init_backbone(&cfg, 1)).save(dir.path()).unwrap();
        let path = dir.path().join("config.txt");
        let text = fs::read_to_string(&path).unwrap().replace("seed=0", "seed=5");
        fs::write(&path, text).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(CheckpointError::HashMismatch { .. })));
    }

    #[test]
    fn stage_tags() {
        for s in [Stage::Pretrained, Stage::DomainPrompted, Stage::TaskPrompted("forecast".into())] {
            assert_eq!(s.to_string().parse::<Stage>().unwrap(), s);
        }
        assert!("task_prompted:".parse::<Stage>().is_err());
    }
}
