//! Flat `key = value` run configuration.
//!
//! A run starts from built-in defaults, then the `--config` file, then
//! command-line flags. Each command accepts a fixed key set and rejects
//! anything else. The merged result is written to `config.txt` in the run
//! directory and can be fed back with `--config`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::Context;

use crate::exit::{CliError, ExitKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Evaluate,
    Analyze,
    Synth,
    Baseline,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Analyze => "analyze",
            Command::Synth => "synth",
            Command::Baseline => "baseline",
        }
    }

    /// Accepted keys with their defaults. An empty default means unset.
    pub fn keys(self) -> &'static [(&'static str, &'static str)] {
        match self {
            Command::Train => &[
                ("events", ""),
                ("assoc", ""),
                ("nodes", ""),
                ("train_until", ""),
                ("min_prob", "0.5"),
                ("attention", "ldg-learned"),
                ("prior", "sparse"),
                ("interaction", "bilinear"),
                ("edge_types", "2"),
                ("dim", "32"),
                ("embedding_init", "zero"),
                ("epochs", "5"),
                ("lr", "0.0002"),
                ("batch", "200"),
                ("nonevent_multiplier", "5"),
                ("validation_fraction", "0.1"),
                ("patience", ""),
                ("seed", "0"),
                ("record_wall_time", "false"),
                ("out", "runs"),
            ],
            Command::Evaluate => &[
                ("checkpoint", ""),
                ("events", ""),
                ("min_prob", "0.5"),
                ("blend_freq", ""),
                ("dump_scores", "false"),
                ("seed", "0"),
                ("out", "runs"),
            ],
            Command::Analyze => &[
                ("checkpoint", ""),
                ("assoc", ""),
                ("planted", ""),
                ("out", "runs"),
            ],
            Command::Synth => &[
                ("nodes", "20"),
                ("events", "5000"),
                ("density", "0.1"),
                ("rho", "8"),
                ("horizon", "100"),
                ("init_fraction", "0.25"),
                ("reveal_fraction", "0.25"),
                ("seed", "0"),
                ("out", "runs"),
            ],
            Command::Baseline => &[
                ("events", ""),
                ("assoc", ""),
                ("nodes", ""),
                ("train_until", ""),
                ("min_prob", "0.5"),
                ("variant", "no-learn"),
                ("out", "runs"),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    command: Command,
    values: BTreeMap<String, String>,
}

fn config_error(msg: String) -> anyhow::Error {
    CliError::new(ExitKind::Config, msg).into()
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_pairs(text: &str) -> anyhow::Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_error(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn defaults(command: Command) -> Self {
        let values = command
            .keys()
            .iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        RunConfig { command, values }
    }

    /// Defaults, then the file at `path` (if any), then `overrides`.
    pub fn load(command: Command, path: Option<&Path>, overrides: Vec<(String, String)>) -> anyhow::Result<Self> {
        let mut cfg = Self::defaults(command);
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| {
                let kind = if e.kind() == std::io::ErrorKind::NotFound { ExitKind::MissingFile } else { ExitKind::Other };
                CliError::new(kind, format!("cannot read config {}: {e}", p.display()))
            })?;
            for (k, v) in parse_pairs(&text).with_context(|| format!("in {}", p.display()))? {
                cfg.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> anyhow::Result<()> {
        if !self.command.keys().iter().any(|(k, _)| *k == key) {
            let known: Vec<&str> = self.command.keys().iter().map(|(k, _)| *k).collect();
            return Err(config_error(format!(
                "unknown key {key:?} for {}; accepted keys: {}",
                self.command.name(),
                known.join(", ")
            )));
        }
        if value.is_empty() {
            self.values.remove(key);
        } else {
            self.values.insert(key.to_string(), value.to_string());
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> anyhow::Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| config_error(format!("bad value {v:?} for {key}: {e}")))
            })
            .transpose()
    }

    pub fn require<T: FromStr>(&self, key: &str) -> anyhow::Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)?
            .ok_or_else(|| config_error(format!("{} needs {key}", self.command.name())))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(PathBuf::from)
    }

    /// Canonical text form, keys sorted.
    pub fn to_text(&self) -> String {
        let mut out = format!("# ldg {} run configuration\n", self.command.name());
        for (k, v) in &self.values {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }
}
