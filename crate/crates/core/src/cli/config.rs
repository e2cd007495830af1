//! Flat key-value run configuration.
//!
//! One TOML table with no sections. Every key belongs to exactly one of the
//! network, training, loss or postprocessing settings:
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `preset` | `"densenet121"` | `"densenet121"` or `"tiny"`; applied before the other network keys |
//! | `variant` | `"M2"` | `"M1"` or `"M2"` |
//! | `encoder_blocks`, `growth_rate`, `stem_channels`, `transition_compression` | preset | encoder topology |
//! | `decoder_widths`, `decoder_residual_blocks` | preset | decoder topology |
//! | `freeze_encoder` | `true` | keep encoder weights fixed |
//! | `input_size` | preset | `[H, W]` network image size |
//! | `epochs`, `batch_size`, `momentum`, `l2`, `lr_max`, `lr_min`, `lr_period_epochs`, `seed` | see [`TrainConfig`] | optimizer and schedule |
//! | `checkpoint_interval`, `bn_calibration_samples`, `bn_momentum_samples`, `samples_per_case`, `tumor_bias` | see [`TrainConfig`] | epoch loop |
//! | `epsilon`, `ce_mode`, `ce_weight`, `dice_weight` | `1`, `"binary"`, `1`, `1` | loss |
//! | `threshold`, `min_component_size`, `connectivity` | `0.5`, `100`, `26` | postprocessing |

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigIssue, Error, Result};
use crate::inference::{Connectivity, PostprocessConfig};
use crate::network::{NetworkConfig, Variant};
use crate::objective::LossConfig;
use crate::trainer::TrainConfig;

const PRESETS: [&str; 2] = ["densenet121", "tiny"];

pub const NETWORK_KEYS: [&str; 9] = [
    "variant",
    "encoder_blocks",
    "growth_rate",
    "stem_channels",
    "transition_compression",
    "decoder_widths",
    "decoder_residual_blocks",
    "freeze_encoder",
    "input_size",
];
pub const LOSS_KEYS: [&str; 4] = ["epsilon", "ce_mode", "ce_weight", "dice_weight"];
pub const POSTPROCESS_KEYS: [&str; 3] = ["threshold", "min_component_size", "connectivity"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub postprocess: PostprocessConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::densenet121(Variant::M2),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            postprocess: PostprocessConfig::default(),
        }
    }
}

fn train_keys() -> Vec<String> {
    match toml::Value::try_from(TrainConfig::default()) {
        Ok(toml::Value::Table(t)) => t.keys().cloned().collect(),
        _ => unreachable!("TrainConfig serializes to a table"),
    }
}

fn issue(key: &str, message: impl ToString) -> ConfigIssue {
    ConfigIssue { key: key.to_string(), message: message.to_string() }
}

/// Applies `updates` one key at a time so a bad value is reported under its
/// own key and does not hide the others.
fn overlay<S: Serialize + DeserializeOwned>(base: &S, updates: &[(&str, toml::Value)], issues: &mut Vec<ConfigIssue>) -> S {
    let mut table = match toml::Value::try_from(base) {
        Ok(toml::Value::Table(t)) => t,
        _ => unreachable!("settings serialize to a table"),
    };
    for (key, value) in updates {
        let mut trial = table.clone();
        trial.insert(key.to_string(), value.clone());
        match toml::Value::Table(trial.clone()).try_into::<S>() {
            Ok(_) => table = trial,
            Err(e) => issues.push(issue(key, e.message().trim())),
        }
    }
    toml::Value::Table(table).try_into().expect("every accepted key deserialized")
}

fn connectivity_value(v: &toml::Value) -> std::result::Result<toml::Value, String> {
    let n = v.as_integer().ok_or_else(|| "expected 6, 18 or 26".to_string())?;
    let c = Connectivity::from_count(n.max(0) as usize).ok_or_else(|| format!("expected 6, 18 or 26, got {n}"))?;
    Ok(toml::Value::try_from(c).expect("enum serializes"))
}

impl RunConfig {
    /// Parses configuration text. All problems are collected and reported
    /// together, each under its key.
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(vec![issue("<file>", e.message().trim())]))?;
        let mut issues = Vec::new();
        let train_keys = train_keys();

        let variant = match table.get("variant") {
            None => Variant::M2,
            Some(v) => match v.as_str().map(str::parse::<Variant>) {
                Some(Ok(v)) => v,
                Some(Err(e)) => {
                    issues.push(issue("variant", e));
                    Variant::M2
                }
                None => {
                    issues.push(issue("variant", "expected a string"));
                    Variant::M2
                }
            },
        };
        let base_network = match table.get("preset").map(|v| v.as_str()) {
            None | Some(Some("densenet121")) => NetworkConfig::densenet121(variant),
            Some(Some("tiny")) => NetworkConfig::tiny(variant),
            Some(other) => {
                issues.push(issue("preset", format!("expected one of {PRESETS:?}, got {}", other.map_or("a non-string".into(), |s| format!("{s:?}")))));
                NetworkConfig::densenet121(variant)
            }
        };

        let (mut net, mut train, mut loss, mut post) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (key, value) in &table {
            let k = key.as_str();
            if k == "preset" || k == "variant" {
                continue;
            } else if NETWORK_KEYS.contains(&k) {
                net.push((k, value.clone()));
            } else if train_keys.iter().any(|t| t == k) {
                train.push((k, value.clone()));
            } else if LOSS_KEYS.contains(&k) {
                loss.push((k, value.clone()));
            } else if k == "connectivity" {
                match connectivity_value(value) {
                    Ok(v) => post.push((k, v)),
                    Err(m) => issues.push(issue(k, m)),
                }
            } else if POSTPROCESS_KEYS.contains(&k) {
                post.push((k, value.clone()));
            } else {
                issues.push(issue(k, "unknown key"));
            }
        }

        let network = overlay(&base_network, &net, &mut issues);
        let train = overlay(&TrainConfig::default(), &train, &mut issues);
        let loss = overlay(&LossConfig::default(), &loss, &mut issues);
        let postprocess = overlay(&PostprocessConfig::default(), &post, &mut issues);

        for (key, message) in train.problems() {
            issues.push(issue(&key, message));
        }
        if let Err(e) = network.validate() {
            issues.push(issue("network", e));
        }
        if let Err(e) = loss.validate() {
            issues.push(issue("loss", e));
        }
        if !(postprocess.threshold > 0.0 && postprocess.threshold < 1.0) {
            issues.push(issue("threshold", format!("must lie in (0, 1), got {}", postprocess.threshold)));
        }
        if issues.is_empty() {
            Ok(Self { network, train, loss, postprocess })
        } else {
            Err(Error::Config(issues))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every setting as flat key-value text that [`RunConfig::parse`]
    /// reads back to the same configuration.
    pub fn to_toml(&self) -> String {
        let mut table = toml::Table::new();
        let mut put = |value: toml::Value, keys: &[&str]| {
            if let toml::Value::Table(t) = value {
                for (k, v) in t {
                    if keys.contains(&k.as_str()) {
                        table.insert(k, v);
                    }
                }
            }
        };
        let mut network_keys = NETWORK_KEYS.to_vec();
        network_keys.push("variant");
        put(toml::Value::try_from(&self.network).expect("serializes"), &network_keys);
        let train_keys = train_keys();
        put(toml::Value::try_from(&self.train).expect("serializes"), &train_keys.iter().map(String::as_str).collect::<Vec<_>>());
        put(toml::Value::try_from(&self.loss).expect("serializes"), &LOSS_KEYS);
        put(toml::Value::try_from(&self.postprocess).expect("serializes"), &POSTPROCESS_KEYS[..2]);
        table.insert("connectivity".into(), toml::Value::Integer(self.postprocess.connectivity as i64));
        toml::to_string(&table).expect("table serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys(e: Error) -> Vec<String> {
        match e {
            Error::Config(issues) => issues.into_iter().map(|i| i.key).collect(),
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn preset_then_overrides() {
        let c = RunConfig::parse("preset = \"tiny\"\nvariant = \"M1\"\nepochs = 3\nlr_period_epochs = 2\nconnectivity = 6\n").unwrap();
        assert_eq!(c.network.variant, Variant::M1);
        assert_eq!(c.network.growth_rate, 8);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.lr_period_epochs, 2.0);
        assert_eq!(c.postprocess.connectivity, Connectivity::Faces);
    }

    #[test]
    fn every_bad_key_is_named() {
        let e = RunConfig::parse("epochs = \"many\"\nfoo = 1\nmomentum = 1.5\nconnectivity = 7\n").unwrap_err();
        let mut k = keys(e);
        k.sort();
        assert_eq!(k, vec!["connectivity", "epochs", "foo", "momentum"]);
    }

    #[test]
    fn sections_are_not_keys() {
        let e = RunConfig::parse("[train]\nepochs = 3\n").unwrap_err();
        assert_eq!(keys(e), vec!["train"]);
    }

    #[test]
    fn rendered_text_parses_back() {
        let c = RunConfig::parse("preset = \"tiny\"\nepochs = 7\nce_mode = \"verbatim\"\nthreshold = 0.4\n").unwrap();
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn invalid_network_is_reported() {
        let e = RunConfig::parse("preset = \"tiny\"\ninput_size = [50, 64]\n").unwrap_err();
        assert_eq!(keys(e), vec!["network"]);
    }
}
