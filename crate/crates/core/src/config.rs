//! Training configuration and its `key = value` text form.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;
use core::str::FromStr;

use crate::error::{Error, Result};

/// Model variant used by the ablation harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// LightGCN channels fused by concatenation; no generation or alignment loss.
    Base,
    /// Full model without the total-correlation loss.
    BaseDn,
    /// Full model without diffusion; content channels feed fusion directly.
    BaseTc,
    /// Full model with the total-correlation loss replaced by pairwise InfoNCE.
    WoTc,
    Full,
    /// Interaction channel only.
    InterOnly,
    /// Visual modality removed; pairwise alignment of the remaining two.
    WoVisual,
    /// Textual modality removed; pairwise alignment of the remaining two.
    WoTextual,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Base,
        Variant::BaseDn,
        Variant::BaseTc,
        Variant::WoTc,
        Variant::Full,
        Variant::InterOnly,
        Variant::WoVisual,
        Variant::WoTextual,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::BaseDn => "base+dn",
            Variant::BaseTc => "base+tc",
            Variant::WoTc => "wo-tc",
            Variant::Full => "full",
            Variant::InterOnly => "inter-only",
            Variant::WoVisual => "wo-visual",
            Variant::WoTextual => "wo-textual",
        }
    }

    pub fn uses_diffusion(self) -> bool {
        matches!(
            self,
            Variant::BaseDn | Variant::WoTc | Variant::Full | Variant::WoVisual | Variant::WoTextual
        )
    }

    pub fn uses_visual(self) -> bool {
        !matches!(self, Variant::InterOnly | Variant::WoVisual)
    }

    pub fn uses_textual(self) -> bool {
        !matches!(self, Variant::InterOnly | Variant::WoTextual)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.tag() == s.trim())
            .ok_or_else(|| Error::UnknownVariant(s.trim().to_string()))
    }
}

impl core::fmt::Display for Variant {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub interactions: Option<String>,
    pub visual: Option<String>,
    pub textual: Option<String>,
    pub k_core: usize,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    /// Embedding dimension `d`.
    pub dim: usize,
    /// LightGCN layer count `L`.
    pub layers: usize,
    /// Diffusion step count `T`.
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Generation loss weight.
    pub omega1: f64,
    /// Alignment loss weight.
    pub omega2: f64,
    /// ℓ₂ regularization coefficient.
    pub lambda: f64,
    pub tau_init: f64,
    pub contrast_temp: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub tc_batch: usize,
    /// Denoiser hidden width.
    pub hidden: usize,
    /// Sinusoidal time-embedding width.
    pub time_dim: usize,
    pub epochs: usize,
    pub patience: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub k_list: Vec<usize>,
    pub variant: Variant,
    pub variants: Vec<Variant>,
    pub sweep_key: String,
    pub sweep_values: Vec<String>,
    pub synth_users: usize,
    pub synth_items: usize,
    pub synth_visual_dim: usize,
    pub synth_textual_dim: usize,
    pub synth_groups: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            interactions: None,
            visual: None,
            textual: None,
            k_core: 5,
            train_ratio: 0.8,
            val_ratio: 0.1,
            test_ratio: 0.1,
            dim: 64,
            layers: 2,
            steps: 500,
            beta_start: 1e-4,
            beta_end: 0.02,
            omega1: 0.6,
            omega2: 0.6,
            lambda: 0.01,
            tau_init: 1.0,
            contrast_temp: 0.2,
            lr: 1e-3,
            batch_size: 2048,
            tc_batch: 256,
            hidden: 128,
            time_dim: 32,
            epochs: 1000,
            patience: 20,
            eval_every: 1,
            seed: 2024,
            seeds: vec![2024],
            k_list: vec![5, 10, 20, 50],
            variant: Variant::Full,
            variants: vec![
                Variant::Base,
                Variant::BaseDn,
                Variant::BaseTc,
                Variant::WoTc,
                Variant::Full,
            ],
            sweep_key: "omega2".into(),
            sweep_values: (1..=10).map(|k| format!("{:.1}", k as f64 / 10.0)).collect(),
            synth_users: 500,
            synth_items: 300,
            synth_visual_dim: 64,
            synth_textual_dim: 32,
            synth_groups: 2,
        }
    }
}

/// Every recognized key in canonical (snake_case) form, in snapshot order.
pub const KEYS: &[&str] = &[
    "interactions",
    "visual",
    "textual",
    "k_core",
    "train_ratio",
    "val_ratio",
    "test_ratio",
    "dim",
    "layers",
    "steps",
    "beta_start",
    "beta_end",
    "omega1",
    "omega2",
    "lambda",
    "tau_init",
    "contrast_temp",
    "lr",
    "batch_size",
    "tc_batch",
    "hidden",
    "time_dim",
    "epochs",
    "patience",
    "eval_every",
    "seed",
    "seeds",
    "k_list",
    "variant",
    "variants",
    "sweep_key",
    "sweep_values",
    "synth_users",
    "synth_items",
    "synth_visual_dim",
    "synth_textual_dim",
    "synth_groups",
];

fn canonical_key(key: &str) -> String {
    let k = key.trim().replace('-', "_");
    match k.as_str() {
        "T" | "t" => "steps".into(),
        "d" => "dim".into(),
        "L" => "layers".into(),
        "w1" => "omega1".into(),
        "w2" => "omega2".into(),
        _ => k,
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config {
        key: key.into(),
        message: format!("cannot parse `{}`", value.trim()),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn opt_path(value: &str) -> Option<String> {
    let v = value.trim();
    (!v.is_empty()).then(|| v.to_string())
}

fn join<T: core::fmt::Display>(items: &[T]) -> String {
    let mut s = String::new();
    for (k, it) in items.iter().enumerate() {
        if k > 0 {
            s.push(',');
        }
        let _ = write!(s, "{it}");
    }
    s
}

impl TrainConfig {
    /// Parses `key = value` lines (blank lines and `#` comments ignored),
    /// applies `overrides` on top, then validates.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                key: line.into(),
                message: format!("line {} is not `key = value`", lineno + 1),
            })?;
            cfg.set(k, v)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its text value. Does not validate cross-field constraints.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = canonical_key(key);
        let k = key.as_str();
        match k {
            "interactions" => self.interactions = opt_path(value),
            "visual" => self.visual = opt_path(value),
            "textual" => self.textual = opt_path(value),
            "k_core" => self.k_core = parse_num(k, value)?,
            "train_ratio" => self.train_ratio = parse_num(k, value)?,
            "val_ratio" => self.val_ratio = parse_num(k, value)?,
            "test_ratio" => self.test_ratio = parse_num(k, value)?,
            "dim" => self.dim = parse_num(k, value)?,
            "layers" => self.layers = parse_num(k, value)?,
            "steps" => self.steps = parse_num(k, value)?,
            "beta_start" => self.beta_start = parse_num(k, value)?,
            "beta_end" => self.beta_end = parse_num(k, value)?,
            "omega1" => self.omega1 = parse_num(k, value)?,
            "omega2" => self.omega2 = parse_num(k, value)?,
            "lambda" => self.lambda = parse_num(k, value)?,
            "tau_init" => self.tau_init = parse_num(k, value)?,
            "contrast_temp" => self.contrast_temp = parse_num(k, value)?,
            "lr" => self.lr = parse_num(k, value)?,
            "batch_size" => self.batch_size = parse_num(k, value)?,
            "tc_batch" => self.tc_batch = parse_num(k, value)?,
            "hidden" => self.hidden = parse_num(k, value)?,
            "time_dim" => self.time_dim = parse_num(k, value)?,
            "epochs" => self.epochs = parse_num(k, value)?,
            "patience" => self.patience = parse_num(k, value)?,
            "eval_every" => self.eval_every = parse_num(k, value)?,
            "seed" => self.seed = parse_num(k, value)?,
            "seeds" => self.seeds = parse_list(k, value)?,
            "k_list" => self.k_list = parse_list(k, value)?,
            "variant" => self.variant = value.parse()?,
            "variants" => self.variants = parse_list(k, value)?,
            "sweep_key" => self.sweep_key = canonical_key(value),
            "sweep_values" => {
                self.sweep_values = value
                    .split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|s| !s.is_empty())
                    .map(|s| s.to_string())
                    .collect()
            }
            "synth_users" => self.synth_users = parse_num(k, value)?,
            "synth_items" => self.synth_items = parse_num(k, value)?,
            "synth_visual_dim" => self.synth_visual_dim = parse_num(k, value)?,
            "synth_textual_dim" => self.synth_textual_dim = parse_num(k, value)?,
            "synth_groups" => self.synth_groups = parse_num(k, value)?,
            _ => {
                return Err(Error::Config {
                    key,
                    message: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, message: &str| {
            Err(Error::Config {
                key: key.into(),
                message: message.into(),
            })
        };
        if self.steps < 1 {
            return fail("steps", "T ≥ 1");
        }
        if self.dim == 0 {
            return fail("dim", "d ≥ 1");
        }
        if self.k_core == 0 {
            return fail("k_core", "k_core ≥ 1");
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return fail("beta_start", "require 0 < beta_start ≤ beta_end < 1");
        }
        for (key, v) in [
            ("omega1", self.omega1),
            ("omega2", self.omega2),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(key, "must be finite and ≥ 0");
            }
        }
        for (key, v) in [
            ("tau_init", self.tau_init),
            ("contrast_temp", self.contrast_temp),
            ("lr", self.lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(key, "must be finite and > 0");
            }
        }
        let ratios = [self.train_ratio, self.val_ratio, self.test_ratio];
        if self.train_ratio <= 0.0
            || ratios.iter().any(|&r| r < 0.0)
            || libm::fabs(ratios.iter().sum::<f64>() - 1.0) > 1e-9
        {
            return fail("train_ratio", "split ratios must be ≥ 0 and sum to 1");
        }
        for (key, v) in [
            ("batch_size", self.batch_size),
            ("hidden", self.hidden),
            ("time_dim", self.time_dim),
            ("eval_every", self.eval_every),
            ("synth_users", self.synth_users),
            ("synth_items", self.synth_items),
            ("synth_visual_dim", self.synth_visual_dim),
            ("synth_textual_dim", self.synth_textual_dim),
        ] {
            if v == 0 {
                return fail(key, "must be ≥ 1");
            }
        }
        if self.tc_batch < 2 {
            return fail("tc_batch", "must be ≥ 2");
        }
        if self.synth_groups < 2 {
            return fail("synth_groups", "must be ≥ 2");
        }
        if self.k_list.is_empty() || self.k_list.contains(&0) {
            return fail("k_list", "must be a non-empty list of positive K");
        }
        if self.k_list.windows(2).any(|w| w[0] >= w[1]) {
            return fail("k_list", "must be strictly ascending");
        }
        if self.seeds.is_empty() {
            return fail("seeds", "must be non-empty");
        }
        if self.variants.is_empty() {
            return fail("variants", "must be non-empty");
        }
        if !KEYS.contains(&self.sweep_key.as_str()) {
            return fail("sweep_key", "not a config key");
        }
        Ok(())
    }

    /// Value of `key` in the text form [`TrainConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let key = canonical_key(key);
        let path = |p: &Option<String>| p.clone().unwrap_or_default();
        Some(match key.as_str() {
            "interactions" => path(&self.interactions),
            "visual" => path(&self.visual),
            "textual" => path(&self.textual),
            "k_core" => self.k_core.to_string(),
            "train_ratio" => format!("{:?}", self.train_ratio),
            "val_ratio" => format!("{:?}", self.val_ratio),
            "test_ratio" => format!("{:?}", self.test_ratio),
            "dim" => self.dim.to_string(),
            "layers" => self.layers.to_string(),
            "steps" => self.steps.to_string(),
            "beta_start" => format!("{:?}", self.beta_start),
            "beta_end" => format!("{:?}", self.beta_end),
            "omega1" => format!("{:?}", self.omega1),
            "omega2" => format!("{:?}", self.omega2),
            "lambda" => format!("{:?}", self.lambda),
            "tau_init" => format!("{:?}", self.tau_init),
            "contrast_temp" => format!("{:?}", self.contrast_temp),
            "lr" => format!("{:?}", self.lr),
            "batch_size" => self.batch_size.to_string(),
            "tc_batch" => self.tc_batch.to_string(),
            "hidden" => self.hidden.to_string(),
            "time_dim" => self.time_dim.to_string(),
            "epochs" => self.epochs.to_string(),
            "patience" => self.patience.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "seed" => self.seed.to_string(),
            "seeds" => join(&self.seeds),
            "k_list" => join(&self.k_list),
            "variant" => self.variant.to_string(),
            "variants" => join(&self.variants),
            "sweep_key" => self.sweep_key.clone(),
            "sweep_values" => join(&self.sweep_values),
            "synth_users" => self.synth_users.to_string(),
            "synth_items" => self.synth_items.to_string(),
            "synth_visual_dim" => self.synth_visual_dim.to_string(),
            "synth_textual_dim" => self.synth_textual_dim.to_string(),
            "synth_groups" => self.synth_groups.to_string(),
            _ => return None,
        })
    }

    /// Full `key = value` snapshot; [`TrainConfig::parse`] reads it back unchanged.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).unwrap_or_default());
        }
        out
    }

    pub fn split_ratios(&self) -> (f64, f64, f64) {
        (self.train_ratio, self.val_ratio, self.test_ratio)
    }
}
