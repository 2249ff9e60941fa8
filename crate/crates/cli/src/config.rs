//! `key = value` run configuration. Every key doubles as a `--key` flag
//! (underscores written as dashes).

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mode_core::detector::ScaleMode;
use mode_core::{SynthSpec, TrainConfig, TrainMode};

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// `(key, default, help)`.
pub const KEYS: &[(&str, &str, &str)] = &[
    // paths, relative ones resolve against --out
    ("train", "train.fmb", "training features"),
    ("id_test", "id_test.fmb", "ID test features"),
    ("ood_test", "ood_test.fmb", "OOD test features (empty to skip)"),
    ("model", "model.mdl", "model written by train, read by later stages"),
    ("init_model", "", "model to start training from"),
    ("identity_encoder", "false", "ignore the model and use an identity encoder"),
    ("bank", "bank.bnk", "representation bank"),
    ("scores", "scores.csv", "scores CSV"),
    ("loss", "loss.csv", "per-epoch loss CSV"),
    ("report", "report.txt", "evaluation report"),
    ("report_csv", "report.csv", "evaluation report as CSV"),
    ("roc", "roc.csv", "ROC points"),
    ("bench_out", "bench.csv", "latency CSV"),
    // synthetic data
    ("classes", "4", "ID classes"),
    ("per_class", "50", "training examples per class"),
    ("test_per_class", "50", "ID test examples per class"),
    ("height", "4", "grid height"),
    ("width", "4", "grid width"),
    ("channels", "8", "channels per position"),
    ("signal", "3", "class signal strength in the signal quadrant"),
    ("null_signal", "false", "force the signal strength to 0"),
    ("clutter", "2", "clutter strength"),
    ("position_noise", "0.3", "per-position noise std"),
    ("clutter_prototypes", "4", "shared clutter prototypes"),
    ("ood_classes", "1", "held-out OOD classes"),
    ("ood_per_class", "200", "OOD examples per held-out class"),
    // training
    ("mode", "F", "T (train with local regularizer), F (finetune) or supcon"),
    ("lambda", "1", "weight of the local objective in mode T"),
    ("eta", "0.1", "initial learning rate"),
    ("momentum", "0.9", "SGD momentum"),
    ("weight_decay", "0.0001", "weight decay"),
    ("epochs", "30", "training epochs"),
    ("batch_n", "8", "instances per batch"),
    ("tau", "0.1", "temperature"),
    ("view_noise", "0.05", "view noise relative to the data std"),
    ("shift_views", "true", "random cyclic shift per view"),
    ("prepool", "false", "2x2 average pool before the heads"),
    ("head_dim", "80", "attention head width"),
    // detection
    ("scale_mode", "global+local++", "global, local, local++ or global+local++"),
    ("k", "50", "neighbor rank"),
    ("alpha", "100", "percent of training examples kept in the bank"),
    ("tpr", "0.95", "ID acceptance rate used to set the threshold"),
    ("seed", "7", "seed for every stage"),
];

pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

/// The raw key/value map: defaults, then the file, then flags.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let key = key.trim().replace('-', "_");
        if !known(&key) {
            return Err(ConfigError(format!("unknown config key {key:?}")));
        }
        self.values.insert(key, value.trim().to_string());
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("{origin}:{}: expected key = value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| ConfigError(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| ConfigError(format!("invalid value {raw:?} for {key}: {e}")))
    }

    pub fn flag(&self, key: &str) -> Result<bool, ConfigError> {
        match self.raw(key).to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            other => Err(ConfigError(format!("invalid boolean {other:?} for {key}"))),
        }
    }

    /// Path value resolved against `out`; `None` when empty.
    pub fn path(&self, key: &str, out: &Path) -> Option<PathBuf> {
        let raw = self.raw(key);
        if raw.is_empty() {
            return None;
        }
        let p = PathBuf::from(raw);
        Some(if p.is_absolute() { p } else { out.join(p) })
    }

    pub fn required_path(&self, key: &str, out: &Path) -> Result<PathBuf, ConfigError> {
        self.path(key, out)
            .ok_or_else(|| ConfigError(format!("{key} must name a file")))
    }

    /// Model path for read-side stages, or `None` for the identity encoder.
    pub fn encoder_model(&self, out: &Path) -> Result<Option<PathBuf>, ConfigError> {
        Ok(if self.flag("identity_encoder")? {
            None
        } else {
            self.path("model", out)
        })
    }

    pub fn synth_spec(&self) -> Result<SynthSpec, ConfigError> {
        let signal = if self.flag("null_signal")? {
            0.0
        } else {
            self.get("signal")?
        };
        Ok(SynthSpec {
            classes: self.get("classes")?,
            per_class: self.get("per_class")?,
            test_per_class: self.get("test_per_class")?,
            height: self.get("height")?,
            width: self.get("width")?,
            channels: self.get("channels")?,
            signal_quadrant_strength: signal,
            clutter_strength: self.get("clutter")?,
            position_noise: self.get("position_noise")?,
            clutter_prototypes: self.get("clutter_prototypes")?,
            ood_classes: self.get("ood_classes")?,
            ood_per_class: self.get("ood_per_class")?,
            seed: self.get("seed")?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig<f64>, ConfigError> {
        let mode: TrainMode = self.raw("mode").parse().map_err(|e| ConfigError(format!("{e}")))?;
        Ok(TrainConfig {
            mode,
            lambda: self.get("lambda")?,
            eta: self.get("eta")?,
            momentum: self.get("momentum")?,
            weight_decay: self.get("weight_decay")?,
            epochs: self.get("epochs")?,
            batch_n: self.get("batch_n")?,
            tau: self.get("tau")?,
            view_noise: self.get("view_noise")?,
            shift_views: self.flag("shift_views")?,
            prepool: self.flag("prepool")?,
            head_dim: self.get("head_dim")?,
            seed: self.get("seed")?,
        })
    }

    pub fn scale_mode(&self) -> Result<ScaleMode, ConfigError> {
        self.raw("scale_mode").parse().map_err(|e| ConfigError(format!("{e}")))
    }

    /// `key = value` lines in key order; loading it reproduces this config.
    pub fn dump(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
