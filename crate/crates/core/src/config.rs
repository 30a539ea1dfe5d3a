//! Run configuration: one TOML file covering data locations, model, optimizer
//! and training options. Command-line `key.path=value` overrides are applied
//! to the parsed tree before it is typed, so they follow the same rules as the
//! file itself.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{OptimConfig, TrainOptions};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    pub eval: Option<PathBuf>,
    /// Directory holding `entities.tsv` and `priors.tsv`.
    pub kb: PathBuf,
    pub vocab: PathBuf,
    /// Receives `metrics.jsonl`, `model.ckpt` and `config.toml`.
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub train: TrainOptions,
}

impl RunConfig {
    /// Parses `path`, applies `overrides` (`a.b=value`), and resolves relative
    /// data paths against the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let body = fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&body, overrides)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.data.resolve(base);
        Ok(cfg)
    }

    pub fn from_toml(body: &str, overrides: &[String]) -> Result<Self> {
        let mut tree: toml::Table = toml::from_str(body).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.optim.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

impl DataConfig {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.train);
        fix(&mut self.kb);
        fix(&mut self.vocab);
        fix(&mut self.out_dir);
        if let Some(e) = self.eval.as_mut() {
            fix(e);
        }
    }
}

/// Sets `key.path` in `tree`. The value is read as a TOML literal when it
/// parses as one and as a bare string otherwise.
pub fn apply_override(tree: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut node = tree;
    for p in parents {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TextBranch;

    const SAMPLE: &str = r#"
seed = 3
[data]
train = "train.tsv"
kb = "kb"
vocab = "vocab.txt"
out_dir = "/tmp/run"
[model]
dim = 16
num_classes = 4
[model.encoder]
vocab_size = 10
[optim]
learning_rate = 0.001
"#;

    #[test]
    fn defaults_fill_missing_keys() {
        let c = RunConfig::from_toml(SAMPLE, &[]).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.model.encoder.num_layers, 4);
        assert_eq!(c.optim.weight_decay, 0.01);
        assert_eq!(c.model.text_branch, TextBranch::Knowledge);
    }

    #[test]
    fn overrides_win_and_parse_types() {
        let o = vec![
            "optim.learning_rate=0.5".to_string(),
            "model.text_branch=static".to_string(),
            "seed=9".to_string(),
        ];
        let c = RunConfig::from_toml(SAMPLE, &o).unwrap();
        assert_eq!(c.optim.learning_rate, 0.5);
        assert_eq!(c.model.text_branch, TextBranch::Static);
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml(SAMPLE, &["optim.lr=1".into()]).is_err());
        assert!(RunConfig::from_toml(SAMPLE, &["noequals".into()]).is_err());
        assert!(RunConfig::from_toml(SAMPLE, &["seed.x=1".into()]).is_err());
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(&p, SAMPLE).unwrap();
        let c = RunConfig::load(&p, &[]).unwrap();
        assert_eq!(c.data.train, dir.path().join("train.tsv"));
        assert_eq!(c.data.out_dir, PathBuf::from("/tmp/run"));
        assert_eq!(c.data.eval, None);
        let again = RunConfig::from_toml(&c.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(again, c);
    }
}
