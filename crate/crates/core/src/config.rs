//! Flat `key = value` configuration files.
//!
//! Every tunable of the model, trainer, cepstral front-end and GMM baseline
//! lives in one namespace. Unknown keys are errors, and [`RunConfig::to_text`]
//! renders the fully resolved configuration, defaults included.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::gmm::GmmConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// One configuration namespace that can absorb keys and list its values.
pub trait ConfigSection {
    /// Applies `key = value`. Returns `Ok(false)` if the key is not ours.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;
    fn entries(&self) -> Vec<(&'static str, String)>;
}

/// Parses `key = value` lines; `#` starts a comment line.
pub fn parse_kv(text: &str, source: &Path) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: source.to_path_buf(),
            line: i + 1,
            msg: format!("expected key = value, got '{line}'"),
        })?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value}: {e}")))
}

pub(crate) fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(|s| parse_value(key, s.trim()))
        .collect()
}

pub(crate) fn fmt_list<T: Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub features: FeatureConfig,
    pub gmm: GmmConfig,
}

impl RunConfig {
    /// `preset = cldnn1 | cldnn2` is applied before the other keys wherever
    /// it appears in the file.
    /// Problems in the file itself surface as [`Error::Config`] with the
    /// offending `path:line`.
    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        Self::parse_located(text, source).map_err(|e| match e {
            Error::Parse { .. } => Error::Config(e.to_string()),
            other => other,
        })
    }

    fn parse_located(text: &str, source: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let pairs = parse_kv(text, source)?;
        let mut seen = std::collections::HashSet::new();
        for (line, k, _) in &pairs {
            if !seen.insert(k.as_str()) {
                return Err(Error::Parse {
                    path: source.to_path_buf(),
                    line: *line,
                    msg: format!("duplicate key '{k}'"),
                });
            }
        }
        if let Some((_, _, v)) = pairs.iter().find(|(_, k, _)| k == "preset") {
            cfg.model = ModelConfig::preset(v)?;
        }
        for (line, k, v) in pairs.iter().filter(|(_, k, _)| k != "preset") {
            let wrap = |e: Error| Error::Parse {
                path: source.to_path_buf(),
                line: *line,
                msg: e.to_string(),
            };
            let known = cfg.model.set(k, v).map_err(wrap)?
                || cfg.train.set(k, v).map_err(wrap)?
                || cfg.features.set(k, v).map_err(wrap)?
                || cfg.gmm.set(k, v).map_err(wrap)?;
            if !known {
                return Err(Error::Parse {
                    path: source.to_path_buf(),
                    line: *line,
                    msg: format!("unknown key '{k}'"),
                });
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.features.validate()?;
        self.gmm.validate()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let sections: [(&str, &dyn ConfigSection); 4] = [
            ("model", &self.model),
            ("training", &self.train),
            ("features", &self.features),
            ("gmm", &self.gmm),
        ];
        for (name, section) in sections {
            out.push_str(&format!("# {name}\n"));
            for (k, v) in section.entries() {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }
}
