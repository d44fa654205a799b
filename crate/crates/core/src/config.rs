//! Flat `key = value` configuration files for the pipeline.
//!
//! Every field of [`PipelineConfig`] has a key; unspecified keys keep their
//! defaults. `#` starts a comment.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{invalid, parse_err, Result};
use crate::pipeline::PipelineConfig;
use crate::sentinel::Connectivity;

/// Every recognised key, in the order [`to_text`] writes them.
pub const KEYS: &[&str] = &[
    "t_s",
    "t_cc1",
    "t_cc2",
    "alpha",
    "beta",
    "tau_sem",
    "steps",
    "eta",
    "lambda",
    "n_aug",
    "k_suffix",
    "seed",
    "resample",
    "aug_min_area",
    "aug_flip_prob",
    "aug_noise_sigma",
    "grid_rows",
    "grid_cols",
    "reconstructor",
    "lowpass_factor",
    "median_k",
    "gray",
    "dilation",
    "connectivity",
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| invalid(format!("bad value {value:?} for {key}")))
}

fn float(key: &str, value: &str) -> Result<f64> {
    let v: f64 = num(key, value)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(format!("{key} must be finite")))
    }
}

impl PipelineConfig {
    /// Sets one field from its textual form. Does not re-validate the whole
    /// config; call [`PipelineConfig::validate`] afterwards.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "t_s" => self.thresholds.t_s = float(key, v)?,
            "t_cc1" => self.thresholds.t_cc1 = float(key, v)?,
            "t_cc2" => self.thresholds.t_cc2 = float(key, v)?,
            "alpha" => self.thresholds.alpha = float(key, v)?,
            "beta" => self.thresholds.beta = float(key, v)?,
            "tau_sem" => self.eapt.tau_sem = float(key, v)?,
            "steps" => self.eapt.steps = num(key, v)?,
            "eta" => self.eapt.eta = float(key, v)?,
            "lambda" => self.eapt.lambda = float(key, v)?,
            "n_aug" => self.eapt.n_aug = num(key, v)?,
            "k_suffix" => self.eapt.k_suffix = num(key, v)?,
            "seed" => self.eapt.seed = num(key, v)?,
            "resample" => self.eapt.resample = num(key, v)?,
            "aug_min_area" => self.eapt.augment.min_area = float(key, v)?,
            "aug_flip_prob" => self.eapt.augment.flip_prob = float(key, v)?,
            "aug_noise_sigma" => self.eapt.augment.noise_sigma = float(key, v)?,
            "grid_rows" => self.grid_rows = num(key, v)?,
            "grid_cols" => self.grid_cols = num(key, v)?,
            "reconstructor" => self.reconstructor = v.parse()?,
            "lowpass_factor" => self.lowpass_factor = num(key, v)?,
            "median_k" => self.median_k = num(key, v)?,
            "gray" => self.gray = float(key, v)?,
            "dilation" => self.dilation = num(key, v)?,
            "connectivity" => self.connectivity = Connectivity::from_count(num(key, v)?)?,
            other => return Err(invalid(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        parse_config(&std::fs::read_to_string(path)?)
    }
}

/// Parses a config file on top of the defaults. Duplicate keys are rejected.
pub fn parse_config(text: &str) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(ln, "expected `key = value`"))?;
        let key = key.trim();
        if !seen.insert(key.to_string()) {
            return Err(parse_err(ln, format!("duplicate key {key:?}")));
        }
        cfg.set(key, value)
            .map_err(|e| parse_err(ln, e.to_string()))?;
    }
    cfg.validate().map_err(|e| parse_err(0, e.to_string()))?;
    Ok(cfg)
}

/// Writes every key; parsing the output yields an identical config.
pub fn to_text(cfg: &PipelineConfig) -> String {
    let th = &cfg.thresholds;
    let e = &cfg.eapt;
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(out, "{k} = {v}");
    };
    kv("t_s", th.t_s.to_string());
    kv("t_cc1", th.t_cc1.to_string());
    kv("t_cc2", th.t_cc2.to_string());
    kv("alpha", th.alpha.to_string());
    kv("beta", th.beta.to_string());
    kv("tau_sem", e.tau_sem.to_string());
    kv("steps", e.steps.to_string());
    kv("eta", e.eta.to_string());
    kv("lambda", e.lambda.to_string());
    kv("n_aug", e.n_aug.to_string());
    kv("k_suffix", e.k_suffix.to_string());
    kv("seed", e.seed.to_string());
    kv("resample", e.resample.to_string());
    kv("aug_min_area", e.augment.min_area.to_string());
    kv("aug_flip_prob", e.augment.flip_prob.to_string());
    kv("aug_noise_sigma", e.augment.noise_sigma.to_string());
    kv("grid_rows", cfg.grid_rows.to_string());
    kv("grid_cols", cfg.grid_cols.to_string());
    kv("reconstructor", cfg.reconstructor.to_string());
    kv("lowpass_factor", cfg.lowpass_factor.to_string());
    kv("median_k", cfg.median_k.to_string());
    kv("gray", cfg.gray.to_string());
    kv("dilation", cfg.dilation.to_string());
    kv("connectivity", cfg.connectivity.count().to_string());
    out
}
