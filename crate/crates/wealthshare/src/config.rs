//! Run configuration: a flat key-value text format with a content hash.
//!
//! The canonical rendering is deterministic (fixed key order, 17-significant-
//! digit floats), so its SHA-256 identifies a run exactly and is embedded in
//! outputs and checkpoints.

use crate::csvio::fmt_f64;
use crate::model::{FactorDistribution, ModelParams, TaxBase};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Full specification of one experiment run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelParams,
    /// Total years T per replica.
    pub years: u64,
    /// Number of independent replicas S.
    pub samples: u32,
    pub master_seed: u64,
    /// Trailing fraction of the run entering time averages.
    pub window_fraction: f64,
    /// Years between checkpoints; 0 disables checkpointing.
    pub checkpoint_interval: u64,
    /// Ranks whose -log share is time-averaged (1-based).
    pub ranks: Vec<usize>,
}

impl RunConfig {
    pub fn new(model: ModelParams, years: u64, samples: u32, master_seed: u64) -> Self {
        Self {
            model,
            years,
            samples,
            master_seed,
            window_fraction: 0.5,
            checkpoint_interval: 0,
            ranks: vec![1],
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.years < 2 {
            return Err(ConfigError::Invalid("need at least 2 years".into()));
        }
        if self.samples < 1 {
            return Err(ConfigError::Invalid("need at least 1 sample".into()));
        }
        if !(self.window_fraction > 0.0 && self.window_fraction < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "window fraction {} outside (0, 1)",
                self.window_fraction
            )));
        }
        if self.ranks.is_empty() {
            return Err(ConfigError::Invalid("no observable ranks".into()));
        }
        if self.ranks.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ConfigError::Invalid(
                "ranks must be strictly increasing".into(),
            ));
        }
        if *self.ranks.last().unwrap() > self.model.agents {
            return Err(ConfigError::Invalid("rank beyond agent count".into()));
        }
        Ok(())
    }

    /// Canonical text rendering: the hashing and file format.
    pub fn to_text(&self) -> String {
        let factors = self
            .model
            .dist
            .atoms()
            .iter()
            .map(|&(f, q)| format!("{}:{}", fmt_f64(f), fmt_f64(q)))
            .collect::<Vec<_>>()
            .join(",");
        let ranks = self
            .ranks
            .iter()
            .map(|r| r.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "format = wealthshare-run-v1\n\
             agents = {}\n\
             flat_rate = {}\n\
             progressivity = {}\n\
             redistribution = {}\n\
             tax_base = {}\n\
             floor = {}\n\
             factors = {}\n\
             years = {}\n\
             samples = {}\n\
             master_seed = {}\n\
             window_fraction = {}\n\
             checkpoint_interval = {}\n\
             ranks = {}\n",
            self.model.agents,
            fmt_f64(self.model.flat_rate),
            fmt_f64(self.model.progressivity),
            fmt_f64(self.model.redistribution),
            self.model.tax_base.as_str(),
            fmt_f64(self.model.floor),
            factors,
            self.years,
            self.samples,
            self.master_seed,
            fmt_f64(self.window_fraction),
            self.checkpoint_interval,
            ranks,
        )
    }

    /// SHA-256 of the canonical text, hex-encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = std::collections::BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Parse(format!("line {}: missing '='", i + 1)))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            map.get(k)
                .ok_or_else(|| ConfigError::Parse(format!("missing key {k}")))
        };
        if get("format")? != "wealthshare-run-v1" {
            return Err(ConfigError::Parse(format!(
                "unknown format {}",
                get("format")?
            )));
        }
        let pf = |k: &str| -> Result<f64, ConfigError> {
            get(k)?
                .parse()
                .map_err(|e| ConfigError::Parse(format!("{k}: {e}")))
        };
        let pu = |k: &str| -> Result<u64, ConfigError> {
            get(k)?
                .parse()
                .map_err(|e| ConfigError::Parse(format!("{k}: {e}")))
        };
        let atoms = get("factors")?
            .split(',')
            .map(|pair| {
                let (f, q) = pair
                    .split_once(':')
                    .ok_or_else(|| ConfigError::Parse(format!("bad factor atom {pair}")))?;
                Ok((
                    f.parse::<f64>()
                        .map_err(|e| ConfigError::Parse(format!("factor: {e}")))?,
                    q.parse::<f64>()
                        .map_err(|e| ConfigError::Parse(format!("probability: {e}")))?,
                ))
            })
            .collect::<Result<Vec<_>, ConfigError>>()?;
        let dist = FactorDistribution::new(atoms)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let model = ModelParams {
            agents: pu("agents")? as usize,
            flat_rate: pf("flat_rate")?,
            progressivity: pf("progressivity")?,
            redistribution: pf("redistribution")?,
            tax_base: TaxBase::parse(get("tax_base")?)
                .map_err(|e| ConfigError::Invalid(e.to_string()))?,
            floor: pf("floor")?,
            dist,
        };
        let ranks = get("ranks")?
            .split(',')
            .map(|r| {
                r.trim()
                    .parse::<usize>()
                    .map_err(|e| ConfigError::Parse(format!("ranks: {e}")))
            })
            .collect::<Result<Vec<_>, ConfigError>>()?;
        let cfg = RunConfig {
            model,
            years: pu("years")?,
            samples: pu("samples")? as u32,
            master_seed: pu("master_seed")?,
            window_fraction: pf("window_fraction")?,
            checkpoint_interval: pu("checkpoint_interval")?,
            ranks,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
