//! Flat key=value configuration with file and command-line layering.
//!
//! Precedence: built-in defaults, then the `--config` file, then each
//! `--set key=value` in order, then `--seed` / `--out` shorthands.
//! Unknown keys are rejected by name.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mstr_core::data::SyntheticSpec;
use mstr_core::model::{MstrConfig, Variant};
use mstr_core::trainer::TrainConfig;
use mstr_core::{Error, Result};

/// `(key, default, description)`; a `None` default marks an optional key
/// that is derived or only required by specific commands.
pub const KEYS: &[(&str, Option<&str>, &str)] = &[
    ("seed", Some("0"), "master seed; all randomness derives from it"),
    ("out", Some("out"), "output directory for artifacts"),
    ("variant", Some("mstr"), "model variant: mstr or vanilla"),
    ("input_dim", Some("8"), "feature dimension of the input sequences"),
    ("model_dim", Some("16"), "model width F"),
    ("fractal_p", Some("3"), "fractal factor: pooling and attention window"),
    ("scale_levels", Some("4"), "number of scale levels L"),
    ("heads", Some("16"), "attention heads (must divide model_dim)"),
    ("blocks", Some("4"), "number of encoder blocks"),
    ("num_classes", Some("3"), "number of classes"),
    ("d_ff", None, "FFN hidden width; defaults to 4 * model_dim"),
    ("fc1_dim", None, "first classifier width; defaults to model_dim / 2"),
    ("fc2_dim", None, "second classifier width; defaults to model_dim / 4"),
    ("use_positional", Some("true"), "add sinusoidal positions after projection"),
    ("dropout", Some("0.0"), "dropout rate on sublayer outputs during training"),
    ("t_min", Some("60"), "minimum raw sequence length for gen-data"),
    ("t_max", Some("81"), "maximum raw sequence length for gen-data"),
    ("pattern_scales", Some("1,9,27"), "per-class template extents for gen-data"),
    ("noise_std", Some("0.5"), "background noise level for gen-data"),
    ("samples_per_class", Some("125"), "samples per class for gen-data"),
    ("data_dir", None, "dataset directory for train/eval"),
    ("checkpoint", None, "checkpoint path for eval"),
    ("split", Some("test"), "dataset split for eval: train, val, or test"),
    ("epochs", Some("30"), "training epochs"),
    ("lr", Some("0.001"), "Adam learning rate"),
    ("batch_size", Some("32"), "training batch size"),
    ("seeds", Some("0,1,2,3,4"), "training seeds, comma separated"),
    ("t_list", Some("81,162,324,648"), "sequence lengths for the flops report"),
    ("sweep_p", Some("2,3,4,5"), "fractal factors visited by sweep"),
    ("sweep_l", Some("1,2,3,4"), "scale level counts visited by sweep"),
];

#[derive(Debug, Clone)]
pub struct Config {
    values: BTreeMap<String, String>,
}

fn known_key(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

impl Config {
    pub fn defaults() -> Self {
        let mut values = BTreeMap::new();
        for (key, default, _) in KEYS {
            if let Some(d) = default {
                values.insert((*key).to_string(), (*d).to_string());
            }
        }
        Config { values }
    }

    /// Renders every known key with its description, for `--help` footers.
    pub fn describe_keys() -> String {
        let mut out = String::new();
        for (key, default, desc) in KEYS {
            let default = default.map_or_else(|| "derived/optional".to_string(), str::to_string);
            let _ = writeln!(out, "  {key:<18} {desc} [default: {default}]");
        }
        out
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !known_key(key) {
            return Err(Error::config(format!("unknown configuration key '{key}'")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "{}:{}: expected key=value, got '{raw}'",
                    path.display(),
                    lineno + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<()> {
        for item in sets {
            let Some((key, value)) = item.split_once('=') else {
                return Err(Error::config(format!(
                    "--set expects key=value, got '{item}'"
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    fn raw(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::config(format!("missing required configuration key '{key}'")))
    }

    pub fn get_opt(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn usize_value(&self, key: &str) -> Result<usize> {
        self.raw(key)?
            .parse()
            .map_err(|e| Error::config(format!("key '{key}': {e}")))
    }

    pub fn u64_value(&self, key: &str) -> Result<u64> {
        self.raw(key)?
            .parse()
            .map_err(|e| Error::config(format!("key '{key}': {e}")))
    }

    pub fn f64_value(&self, key: &str) -> Result<f64> {
        self.raw(key)?
            .parse()
            .map_err(|e| Error::config(format!("key '{key}': {e}")))
    }

    pub fn bool_value(&self, key: &str) -> Result<bool> {
        match self.raw(key)? {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(Error::config(format!(
                "key '{key}': expected a boolean, got '{other}'"
            ))),
        }
    }

    pub fn str_value(&self, key: &str) -> Result<&str> {
        self.raw(key)
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        self.raw(key)?
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| Error::config(format!("key '{key}': {e}")))
            })
            .collect()
    }

    pub fn u64_list(&self, key: &str) -> Result<Vec<u64>> {
        self.raw(key)?
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| Error::config(format!("key '{key}': {e}")))
            })
            .collect()
    }

    pub fn out_dir(&self) -> Result<PathBuf> {
        Ok(PathBuf::from(self.str_value("out")?))
    }

    pub fn model_config(&self) -> Result<MstrConfig> {
        let model_dim = self.usize_value("model_dim")?;
        let mut cfg = MstrConfig::new(
            self.usize_value("input_dim")?,
            model_dim,
            self.usize_value("num_classes")?,
        );
        cfg.fractal_p = self.usize_value("fractal_p")?;
        cfg.scale_levels = self.usize_value("scale_levels")?;
        cfg.heads = self.usize_value("heads")?;
        cfg.blocks = self.usize_value("blocks")?;
        cfg.variant = Variant::parse(self.str_value("variant")?)?;
        cfg.use_positional = self.bool_value("use_positional")?;
        cfg.dropout_rate = self.f64_value("dropout")?;
        if self.get_opt("d_ff").is_some() {
            cfg.d_ff = self.usize_value("d_ff")?;
        }
        if self.get_opt("fc1_dim").is_some() {
            cfg.fc1_dim = self.usize_value("fc1_dim")?;
        }
        if self.get_opt("fc2_dim").is_some() {
            cfg.fc2_dim = self.usize_value("fc2_dim")?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.usize_value("epochs")?,
            learning_rate: self.f64_value("lr")?,
            batch_size: self.usize_value("batch_size")?,
            seeds: self.u64_list("seeds")?,
            dropout_rate: self.f64_value("dropout")?,
            ..TrainConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        let spec = SyntheticSpec {
            num_classes: self.usize_value("num_classes")?,
            t_range: (self.usize_value("t_min")?, self.usize_value("t_max")?),
            input_dim: self.usize_value("input_dim")?,
            pattern_scales: self.usize_list("pattern_scales")?,
            noise_std: self.f64_value("noise_std")?,
            samples_per_class: self.usize_value("samples_per_class")?,
        };
        spec.validate()?;
        Ok(spec)
    }
}
