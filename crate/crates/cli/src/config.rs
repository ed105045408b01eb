//! Flat key=value configuration with layered resolution.
//!
//! Precedence, lowest to highest: built-in defaults, the `--config` file,
//! derivations from the master `--seed`, then per-key overrides (`--set`
//! and the per-command flags, which write the same keys). Every emitted
//! artifact embeds the fully resolved map, so a run can be reproduced from
//! any of its outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use openset_core::dataset::{
    load_csv, make_open_split_with_unknowns, Dataset, OpenSplit,
};
use openset_core::classifier::TrainConfig;
use openset_core::openworld::SessionConfig;
use openset_core::thresholds::ConfidenceMode;

use crate::CliError;

const DEFAULTS: &[(&str, &str)] = &[
    ("data.source", "synth"),
    ("data.path", ""),
    ("data.seed", "7"),
    ("synth.classes", "20"),
    ("synth.per_class", "60"),
    ("synth.dim", "32"),
    ("synth.spread", "0.1"),
    ("synth.separation", "10.0"),
    ("split.n_known", "10"),
    ("split.n_unknown", "all"),
    ("split.train_frac", "0.8"),
    ("split.seed", "11"),
    ("train.learning_rate", "0.05"),
    ("train.epochs", "40"),
    ("train.batch_size", "16"),
    ("train.l2", "0.0001"),
    ("train.seed", "13"),
    ("thresholds.epsilon", "0.5"),
    ("thresholds.rho", "0.5"),
    ("thresholds.confidence", "activation"),
    ("expand.alpha", "0.5"),
    ("expand.beta", "0.5"),
    ("expand.m", "5"),
    ("expand.emphasis", "true"),
    ("expand.stochastic_seed", "none"),
    ("session.allometry", "true"),
    ("session.teacher_budget", "8"),
    ("session.detect_passes", "1"),
    ("session.max_iterations", "40"),
    ("session.patience", "3"),
    ("sweep.unknown_counts", "1,2,5,10"),
    ("compare.seeds", "5"),
    ("compare.base_seed", "101"),
];

#[derive(Clone, Debug)]
pub struct ResolvedConfig {
    values: BTreeMap<String, String>,
}

impl ResolvedConfig {
    /// Resolves the configuration layers. `sets` are `KEY=VALUE` strings
    /// from the command line.
    pub fn resolve(
        config_path: Option<&Path>,
        seed: Option<u64>,
        sets: &[String],
    ) -> Result<Self, CliError> {
        let mut values: BTreeMap<String, String> = DEFAULTS
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();

        if let Some(path) = config_path {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::Data(anyhow::anyhow!("cannot read {}: {e}", path.display()))
            })?;
            for (idx, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let Some((key, value)) = line.split_once('=') else {
                    return Err(CliError::Usage(format!(
                        "{}:{}: expected key=value, found `{line}`",
                        path.display(),
                        idx + 1
                    )));
                };
                let key = key.trim();
                if !values.contains_key(key) {
                    return Err(CliError::Usage(format!(
                        "{}:{}: unknown config key `{key}`",
                        path.display(),
                        idx + 1
                    )));
                }
                values.insert(key.to_string(), value.trim().to_string());
            }
        }

        if let Some(seed) = seed {
            values.insert("data.seed".into(), seed.to_string());
            values.insert("split.seed".into(), seed.wrapping_add(1).to_string());
            values.insert("train.seed".into(), seed.wrapping_add(2).to_string());
            values.insert(
                "compare.base_seed".into(),
                seed.wrapping_add(3).to_string(),
            );
        }

        let mut resolved = ResolvedConfig { values };
        for entry in sets {
            let Some((key, value)) = entry.split_once('=') else {
                return Err(CliError::Usage(format!(
                    "--set expects KEY=VALUE, found `{entry}`"
                )));
            };
            resolved.set(key.trim(), value.trim())?;
        }
        Ok(resolved)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), CliError> {
        if !self.values.contains_key(key) {
            return Err(CliError::Usage(format!("unknown config key `{key}`")));
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn echo(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .expect("every key has a default")
    }

    pub fn u64_value(&self, key: &str) -> Result<u64, CliError> {
        self.raw(key)
            .parse()
            .map_err(|_| CliError::Usage(format!("{key} must be an integer, got `{}`", self.raw(key))))
    }

    pub fn usize_value(&self, key: &str) -> Result<usize, CliError> {
        self.raw(key)
            .parse()
            .map_err(|_| CliError::Usage(format!("{key} must be an integer, got `{}`", self.raw(key))))
    }

    pub fn f64_value(&self, key: &str) -> Result<f64, CliError> {
        self.raw(key)
            .parse()
            .map_err(|_| CliError::Usage(format!("{key} must be a float, got `{}`", self.raw(key))))
    }

    pub fn bool_value(&self, key: &str) -> Result<bool, CliError> {
        match self.raw(key) {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(CliError::Usage(format!(
                "{key} must be true or false, got `{other}`"
            ))),
        }
    }

    /// `all` means every remaining category.
    pub fn unknown_count(&self) -> Result<Option<usize>, CliError> {
        match self.raw("split.n_unknown") {
            "all" => Ok(None),
            other => other.parse().map(Some).map_err(|_| {
                CliError::Usage(format!(
                    "split.n_unknown must be an integer or `all`, got `{other}`"
                ))
            }),
        }
    }

    pub fn unknown_counts(&self) -> Result<Vec<usize>, CliError> {
        self.raw("sweep.unknown_counts")
            .split(',')
            .map(|part| {
                part.trim().parse().map_err(|_| {
                    CliError::Usage(format!(
                        "sweep.unknown_counts must be comma-separated integers, got `{part}`"
                    ))
                })
            })
            .collect()
    }

    pub fn confidence_mode(&self) -> Result<ConfidenceMode, CliError> {
        match self.raw("thresholds.confidence") {
            "activation" => Ok(ConfidenceMode::Activation),
            "softmax" => Ok(ConfidenceMode::Softmax),
            other => Err(CliError::Usage(format!(
                "thresholds.confidence must be activation or softmax, got `{other}`"
            ))),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        Ok(TrainConfig {
            learning_rate: self.f64_value("train.learning_rate")?,
            epochs: self.usize_value("train.epochs")?,
            batch_size: self.usize_value("train.batch_size")?,
            l2: self.f64_value("train.l2")?,
            seed: self.u64_value("train.seed")?,
        })
    }

    pub fn session_config(&self) -> Result<SessionConfig, CliError> {
        let stochastic_init = match self.raw("expand.stochastic_seed") {
            "none" => None,
            other => Some(other.parse().map_err(|_| {
                CliError::Usage(format!(
                    "expand.stochastic_seed must be an integer or `none`, got `{other}`"
                ))
            })?),
        };
        let cfg = SessionConfig {
            epsilon: self.f64_value("thresholds.epsilon")?,
            rho: self.f64_value("thresholds.rho")?,
            confidence_mode: self.confidence_mode()?,
            alpha: self.f64_value("expand.alpha")?,
            beta: self.f64_value("expand.beta")?,
            m_emphasis: self.usize_value("expand.m")?,
            emphasis: self.bool_value("expand.emphasis")?,
            allometry: self.bool_value("session.allometry")?,
            stochastic_init,
            teacher_budget: self.usize_value("session.teacher_budget")?,
            detect_passes: self.usize_value("session.detect_passes")?,
            max_iterations: self.usize_value("session.max_iterations")?,
            patience: self.usize_value("session.patience")?,
            train: self.train_config()?,
        };
        cfg.validate().map_err(CliError::from)?;
        Ok(cfg)
    }

    /// The base dataset named by `data.*`: synthetic blobs or a CSV file.
    pub fn base_dataset(&self) -> Result<Dataset, CliError> {
        match self.raw("data.source") {
            "synth" => openset_core::dataset::synth_blobs(
                self.usize_value("synth.classes")?,
                self.usize_value("synth.per_class")?,
                self.usize_value("synth.dim")?,
                self.f64_value("synth.spread")?,
                self.f64_value("synth.separation")?,
                self.u64_value("data.seed")?,
            )
            .map_err(CliError::from),
            "csv" => {
                let path = self.raw("data.path");
                if path.is_empty() {
                    return Err(CliError::Usage(
                        "data.source=csv requires data.path".into(),
                    ));
                }
                load_csv(path).map_err(CliError::from)
            }
            other => Err(CliError::Usage(format!(
                "data.source must be synth or csv, got `{other}`"
            ))),
        }
    }

    pub fn open_split(&self, ds: &Dataset) -> Result<OpenSplit, CliError> {
        make_open_split_with_unknowns(
            ds,
            self.usize_value("split.n_known")?,
            self.unknown_count()?,
            self.f64_value("split.train_frac")?,
            self.u64_value("split.seed")?,
        )
        .map_err(CliError::from)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn defaults_resolve_without_inputs() {
        let cfg = ResolvedConfig::resolve(None, None, &[]).expect("resolve");
        assert_eq!(cfg.usize_value("split.n_known").unwrap(), 10);
        assert_eq!(cfg.f64_value("thresholds.epsilon").unwrap(), 0.5);
        assert!(cfg.session_config().is_ok());
    }

    #[test]
    fn master_seed_derives_the_seed_family() {
        let cfg = ResolvedConfig::resolve(None, Some(100), &[]).expect("resolve");
        assert_eq!(cfg.u64_value("data.seed").unwrap(), 100);
        assert_eq!(cfg.u64_value("split.seed").unwrap(), 101);
        assert_eq!(cfg.u64_value("train.seed").unwrap(), 102);
        assert_eq!(cfg.u64_value("compare.base_seed").unwrap(), 103);
    }

    #[test]
    fn file_overrides_defaults_and_sets_override_file() {
        let mut f = tempfile::NamedTempFile::new().expect("temp");
        writeln!(f, "# comment\nsplit.n_known = 4\ntrain.epochs=9").expect("write");
        let sets = vec!["train.epochs=11".to_string()];
        let cfg = ResolvedConfig::resolve(Some(f.path()), None, &sets).expect("resolve");
        assert_eq!(cfg.usize_value("split.n_known").unwrap(), 4);
        assert_eq!(cfg.usize_value("train.epochs").unwrap(), 11);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let mut f = tempfile::NamedTempFile::new().expect("temp");
        writeln!(f, "no.such.key=1").expect("write");
        assert!(matches!(
            ResolvedConfig::resolve(Some(f.path()), None, &[]),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(
            ResolvedConfig::resolve(None, None, &["bogus=1".to_string()]),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(
            ResolvedConfig::resolve(None, None, &["malformed".to_string()]),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn sweep_counts_parse_as_a_list() {
        let sets = vec!["sweep.unknown_counts=1, 2,5".to_string()];
        let cfg = ResolvedConfig::resolve(None, None, &sets).expect("resolve");
        assert_eq!(cfg.unknown_counts().unwrap(), vec![1, 2, 5]);
    }
}
