//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Command-line flags
//! are applied on top of the file through [`PipelineConfig::set`], so both
//! go through the same parser.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use btc_anomaly::synth::SynthConfig;
use btc_anomaly::{Feature, FeatureSchema, GraphKind};

/// Ordered key/value pairs as read from a file.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .with_context(|| format!("line {}: expected key = value", i + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| anyhow::anyhow!("`{key}`: cannot parse `{value}`"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => bail!("`{key}`: expected true or false, got `{value}`"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Detector {
    Gaussian,
    OcSvm,
}

impl Detector {
    pub fn name(self) -> &'static str {
        match self {
            Detector::Gaussian => "gaussian",
            Detector::OcSvm => "ocsvm",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KChoice {
    Fixed(usize),
    Range(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub ledger: PathBuf,
    pub user_map: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub sample_limit: usize,
    pub graphs: Vec<GraphKind>,
    pub detectors: Vec<Detector>,
    pub user_features: FeatureSchema,
    pub tx_features: FeatureSchema,
    pub k: KChoice,
    /// Gaussian threshold: lowest-density fraction, unless `epsilon` is set.
    pub quantile: f64,
    pub epsilon: Option<f64>,
    /// One value fits directly; several run the ν sweep.
    pub nu: Vec<f64>,
    /// `None` means 1/n.
    pub gamma: Option<f64>,
    pub smo_tol: f64,
    pub cache_mb: usize,
    /// N and M of the dual evaluation.
    pub top_users: usize,
    pub top_txs: usize,
    /// Entities per ranking used for centroid-distance ratios.
    pub ratio_top: usize,
    /// Ground-truth hits are counted in this leading fraction of a ranking.
    pub hit_fraction: f64,
    pub scatter: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            ledger: PathBuf::new(),
            user_map: None,
            truth: None,
            out: PathBuf::from("out"),
            seed: 0,
            sample_limit: 100_000,
            graphs: vec![GraphKind::User, GraphKind::Transaction],
            detectors: vec![Detector::Gaussian, Detector::OcSvm],
            user_features: btc_anomaly::default_schema(GraphKind::User),
            tx_features: btc_anomaly::default_schema(GraphKind::Transaction),
            k: KChoice::Range(1, 10),
            quantile: 0.01,
            epsilon: None,
            nu: vec![0.05],
            gamma: None,
            smo_tol: 1e-3,
            cache_mb: 512,
            top_users: 100,
            top_txs: 100,
            ratio_top: 100,
            hit_fraction: 0.01,
            scatter: true,
        }
    }
}

impl PipelineConfig {
    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::default();
        for (k, v) in parse_pairs(&text).with_context(|| path.display().to_string())? {
            let v = match k.as_str() {
                "ledger" | "user_map" | "truth" | "out" => base.join(v).display().to_string(),
                _ => v,
            };
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "ledger" => self.ledger = PathBuf::from(value),
            "user_map" => self.user_map = Some(PathBuf::from(value)),
            "truth" => self.truth = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "seed" => self.seed = parse_num(key, value)?,
            "sample_limit" => self.sample_limit = parse_num(key, value)?,
            "graphs" => {
                self.graphs = parse_list(value)
                    .iter()
                    .map(|g| match g.as_str() {
                        "user" => Ok(GraphKind::User),
                        "tx" | "transaction" => Ok(GraphKind::Transaction),
                        _ => bail!("unknown graph `{g}` (user, tx)"),
                    })
                    .collect::<Result<_>>()?
            }
            "detectors" => {
                self.detectors = parse_list(value)
                    .iter()
                    .map(|d| match d.as_str() {
                        "gaussian" => Ok(Detector::Gaussian),
                        "ocsvm" => Ok(Detector::OcSvm),
                        _ => bail!("unknown detector `{d}` (gaussian, ocsvm)"),
                    })
                    .collect::<Result<_>>()?
            }
            "user_features" => self.user_features = schema(GraphKind::User, value)?,
            "tx_features" => self.tx_features = schema(GraphKind::Transaction, value)?,
            "k" => {
                self.k = match value.split_once("..") {
                    Some((lo, hi)) => KChoice::Range(parse_num(key, lo)?, parse_num(key, hi)?),
                    None => KChoice::Fixed(parse_num(key, value)?),
                }
            }
            "quantile" => self.quantile = parse_num(key, value)?,
            "epsilon" => self.epsilon = Some(parse_num(key, value)?),
            "nu" => {
                self.nu = parse_list(value)
                    .iter()
                    .map(|v| parse_num(key, v))
                    .collect::<Result<_>>()?
            }
            "gamma" => {
                self.gamma = match value {
                    "auto" => None,
                    v => Some(parse_num(key, v)?),
                }
            }
            "smo_tol" => self.smo_tol = parse_num(key, value)?,
            "cache_mb" => self.cache_mb = parse_num(key, value)?,
            "top_users" => self.top_users = parse_num(key, value)?,
            "top_txs" => self.top_txs = parse_num(key, value)?,
            "ratio_top" => self.ratio_top = parse_num(key, value)?,
            "hit_fraction" => self.hit_fraction = parse_num(key, value)?,
            "scatter" => self.scatter = parse_bool(key, value)?,
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.ledger.as_os_str().is_empty(), "no ledger given");
        ensure!(self.ledger.is_file(), "ledger {} does not exist", self.ledger.display());
        for p in self.user_map.iter().chain(&self.truth) {
            ensure!(p.is_file(), "{} does not exist", p.display());
        }
        ensure!(self.sample_limit > 0, "sample_limit must be positive");
        ensure!(!self.graphs.is_empty(), "no graphs selected");
        ensure!(!self.detectors.is_empty(), "no detectors selected");
        ensure!(!self.nu.is_empty(), "no nu given");
        match self.k {
            KChoice::Fixed(k) => ensure!(k > 0, "k must be positive"),
            KChoice::Range(lo, hi) => ensure!(lo > 0 && lo <= hi, "bad k range {lo}..{hi}"),
        }
        ensure!(
            self.quantile > 0.0 && self.quantile <= 1.0,
            "quantile must lie in (0, 1]"
        );
        ensure!(self.smo_tol > 0.0, "smo_tol must be positive");
        ensure!(
            self.hit_fraction > 0.0 && self.hit_fraction <= 1.0,
            "hit_fraction must lie in (0, 1]"
        );
        ensure!(
            self.top_users > 0 && self.top_txs > 0 && self.ratio_top > 0,
            "top counts must be positive"
        );
        Ok(())
    }

    pub fn runs(&self, kind: GraphKind) -> bool {
        self.graphs.contains(&kind)
    }

    pub fn uses(&self, d: Detector) -> bool {
        self.detectors.contains(&d)
    }
}

fn schema(kind: GraphKind, value: &str) -> Result<FeatureSchema> {
    let features = parse_list(value)
        .iter()
        .map(|f| f.parse::<Feature>())
        .collect::<btc_anomaly::Result<Vec<_>>>()?;
    Ok(FeatureSchema::new(kind, features)?)
}

/// Synthetic-ledger settings; unset keys keep [`SynthConfig`] defaults.
pub fn synth_config(path: &Path) -> Result<SynthConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = SynthConfig::default();
    for (k, v) in parse_pairs(&text)? {
        set_synth(&mut cfg, &k, &v)?;
    }
    Ok(cfg)
}

pub fn set_synth(cfg: &mut SynthConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "user_count" => cfg.user_count = parse_num(key, value)?,
        "tx_count" => cfg.tx_count = parse_num(key, value)?,
        "seed" => cfg.seed = parse_num(key, value)?,
        "funnel_thefts" => cfg.funnel_thefts = parse_num(key, value)?,
        "funnel_sources" => cfg.funnel_sources = parse_num(key, value)?,
        "burst_senders" => cfg.burst_senders = parse_num(key, value)?,
        "burst_length" => cfg.burst_length = parse_num(key, value)?,
        "dormant_users" => cfg.dormant_users = parse_num(key, value)?,
        "amount_log_mean" => cfg.amount_log_mean = parse_num(key, value)?,
        "amount_log_std" => cfg.amount_log_std = parse_num(key, value)?,
        "gap_log_mean" => cfg.gap_log_mean = parse_num(key, value)?,
        "gap_log_std" => cfg.gap_log_std = parse_num(key, value)?,
        "coinbase_rate" => cfg.coinbase_rate = parse_num(key, value)?,
        "start_timestamp" => cfg.start_timestamp = parse_num(key, value)?,
        _ => bail!("unknown synth key `{key}`"),
    }
    Ok(())
}

/// `key → value` view of the settings, used in the metrics file.
pub fn describe(cfg: &PipelineConfig) -> BTreeMap<&'static str, String> {
    let list = |v: Vec<String>| v.join(",");
    let mut m = BTreeMap::new();
    m.insert("seed", cfg.seed.to_string());
    m.insert("sample_limit", cfg.sample_limit.to_string());
    m.insert(
        "graphs",
        list(cfg.graphs.iter().map(|g| g.to_string()).collect()),
    );
    m.insert(
        "detectors",
        list(cfg.detectors.iter().map(|d| d.name().to_string()).collect()),
    );
    m.insert("user_features", cfg.user_features.names().join(","));
    m.insert("tx_features", cfg.tx_features.names().join(","));
    m.insert(
        "k",
        match cfg.k {
            KChoice::Fixed(k) => k.to_string(),
            KChoice::Range(a, b) => format!("{a}..{b}"),
        },
    );
    m.insert("quantile", cfg.quantile.to_string());
    if let Some(e) = cfg.epsilon {
        m.insert("epsilon", e.to_string());
    }
    m.insert("nu", list(cfg.nu.iter().map(|v| v.to_string()).collect()));
    m.insert("gamma", cfg.gamma.map_or("auto".into(), |g| g.to_string()));
    m.insert("smo_tol", cfg.smo_tol.to_string());
    m.insert("top_users", cfg.top_users.to_string());
    m.insert("top_txs", cfg.top_txs.to_string());
    m.insert("ratio_top", cfg.ratio_top.to_string());
    m.insert("hit_fraction", cfg.hit_fraction.to_string());
    m
}
