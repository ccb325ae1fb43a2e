//! Flat `key = value` configuration. File values are read first, then
//! command-line flags overwrite them.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

/// Every key the tool understands, with its default (empty = unset).
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("out", "run"),
    ("train.estimator", "vimco"),
    ("train.k", "5"),
    ("train.lr", "0.001"),
    ("train.batch_size", "24"),
    ("train.epochs", "10"),
    ("train.max_steps", ""),
    ("train.mean", "geometric"),
    ("train.mode", "generative"),
    ("train.latent", "200"),
    ("train.sweep", ""),
    ("train.eval_every", "1"),
    ("train.eval_draws", "1"),
    ("train.log_every", "10"),
    ("train.init_std", "0.01"),
    ("train.init_observation_bias", "true"),
    ("train.sleep", "false"),
    ("train.rms_decay", "0.99"),
    ("data.source", "bars"),
    ("data.bars_side", "8"),
    ("data.bars_cases", "600"),
    ("data.bars_noise", "0.02"),
    ("data.images", ""),
    ("data.binarize", "stochastic:0"),
    ("data.split", "50000,10000,10000"),
    ("data.train", ""),
    ("data.valid", ""),
    ("data.test", ""),
    ("data.height", "28"),
    ("data.width", "28"),
    ("eval.checkpoint", ""),
    ("eval.split", "test"),
    ("eval.samples", "1000"),
    ("eval.k", ""),
    ("eval.draws", "1"),
    ("oracle.instances", "20"),
    ("oracle.max_latent_bits", "3"),
    ("oracle.k", "2,3,5"),
    ("oracle.max_configs", "1048576"),
    ("oracle.max_tuples", "1000000"),
    ("probe.instances", "10"),
    ("probe.k", "2,5,10"),
    ("probe.estimators", "naive,nvil,vimco,rws-wake"),
    ("probe.steps", "200"),
    ("probe.max_tuples", "2097152"),
    ("complete.cases", "8"),
    ("complete.n", "5"),
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

fn known(key: &str) -> Result<()> {
    if KEYS.iter().any(|(k, _)| *k == key) {
        Ok(())
    } else {
        bail!("unknown configuration key {key:?}")
    }
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", i + 1))?;
            s.set(k.trim(), v.trim()).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn set(&mut self, key: &str, value: impl Display) -> Result<()> {
        known(key)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `key=value` overrides.
    pub fn apply_pairs(&mut self, pairs: &[String]) -> Result<()> {
        for p in pairs {
            let (k, v) = p.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {p:?}"))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        if let Some(v) = self.values.get(key) {
            return v;
        }
        KEYS.iter().find(|(k, _)| *k == key).map(|(_, d)| *d).unwrap_or("")
    }

    pub fn is_set(&self, key: &str) -> bool {
        !self.raw(key).is_empty()
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let v = self.raw(key);
        if v.is_empty() {
            bail!("{key} must be set");
        }
        v.parse().map_err(|e| anyhow!("{key} = {v:?}: {e}"))
    }

    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        if self.is_set(key) {
            self.get(key).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| t.parse().map_err(|e| anyhow!("{key}: {t:?}: {e}")))
            .collect()
    }

    /// Every key under the given prefixes (plus the top-level keys), with
    /// defaults filled in, one `key = value` per line.
    pub fn resolved(&self, sections: &[&str]) -> String {
        let mut out = String::new();
        for (k, _) in KEYS {
            let top = !k.contains('.');
            if top || sections.iter().any(|s| k.starts_with(&format!("{s}."))) {
                out += &format!("{k} = {}\n", self.raw(k));
            }
        }
        out
    }
}
