//! Run configuration: a TOML file with one table per concern, plus
//! command-line overrides.
//!
//! ```toml
//! [data]
//! manifest = "data/manifest.tsv"
//!
//! [model]
//! stage_channels = [8, 16, 32, 64, 128]
//! reduction_ratio = 4
//!
//! [train]
//! epochs = 50
//! lambda_adv = 1.0
//!
//! [output]
//! dir = "runs/cfd"
//! ```
//!
//! Every table is optional and every key has a default; unknown keys are
//! rejected. An override `--section.key value` sets one key, with `value`
//! parsed as a TOML value when possible and as a string otherwise.
//! `--clf=<bool>` is short for `--train.clf_enabled <bool>`. The
//! `CRACKCLF_OUT` environment variable replaces `output.dir` from the file;
//! an explicit `--output.dir` override still wins.

use std::path::{Path, PathBuf};

use crackclf_core::adversary::CriticConfig;
use crackclf_core::metrics::Tolerance;
use crackclf_core::segnet::SegNetConfig;
use crackclf_core::supervision::LossWeights;
use crackclf_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::data_io::Split;
use crate::error::{AppError, AppResult};

pub const OUT_ENV: &str = "CRACKCLF_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub train_split: Split,
    /// Split used for best-checkpoint selection; skipped when empty.
    pub val_split: Split,
    pub eval_split: Split,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            train_split: Split::Train,
            val_split: Split::Val,
            eval_split: Split::Test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub threshold: f64,
    pub tolerance: Tolerance,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: 0.5,
            tolerance: Tolerance::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub threshold: f64,
    pub dump_probs: bool,
    pub dump_features: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            threshold: 0.5,
            dump_probs: false,
            dump_features: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComplexityConfig {
    pub height: usize,
    pub width: usize,
    pub warmup: usize,
    pub runs: usize,
}

impl Default for ComplexityConfig {
    fn default() -> Self {
        ComplexityConfig {
            height: 256,
            width: 256,
            warmup: 5,
            runs: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: SegNetConfig,
    pub critic: CriticConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub eval: EvalConfig,
    pub infer: InferConfig,
    pub complexity: ComplexityConfig,
    pub output: OutputConfig,
}

/// One `--section.key value` assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub path: Vec<String>,
    pub value: toml::Value,
}

impl Override {
    /// Parses `key` (dotted, without the leading dashes) and its raw value.
    pub fn new(key: &str, raw: &str) -> AppResult<Self> {
        let key = if key == "clf" { "train.clf_enabled" } else { key };
        let path: Vec<String> = key.split('.').map(str::to_string).collect();
        if path.len() < 2 || path.iter().any(String::is_empty) {
            return Err(AppError::Config(format!(
                "override `--{key}` must have the form --section.key"
            )));
        }
        Ok(Override {
            path,
            value: parse_value(raw),
        })
    }

    pub fn key(&self) -> String {
        self.path.join(".")
    }
}

fn parse_value(raw: &str) -> toml::Value {
    // Bare words such as `inf` or `nan` stay strings (they are usually paths).
    let word = raw
        .trim_start_matches(['+', '-'])
        .chars()
        .all(|c| c.is_ascii_alphabetic());
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .filter(|v| !(word && v.is_float()));
    parsed.unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Splits `--a.b value`, `--a.b=value` and `--clf[=bool]` tokens out of
/// `args`, returning the overrides and the remaining arguments.
pub fn extract_overrides(args: &[String]) -> AppResult<(Vec<Override>, Vec<String>)> {
    let mut overrides = Vec::new();
    let mut rest = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let a = &args[i];
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a.clone());
            i += 1;
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (flag, None),
        };
        if name.contains('.') || name == "clf" {
            let value = match inline {
                Some(v) => v,
                None if name == "clf" => match args.get(i + 1).map(String::as_str) {
                    Some(v @ ("true" | "false")) => {
                        i += 1;
                        v.to_string()
                    }
                    _ => "true".into(),
                },
                None => {
                    i += 1;
                    args.get(i)
                        .cloned()
                        .ok_or_else(|| AppError::Config(format!("override `--{name}` needs a value")))?
                }
            };
            overrides.push(Override::new(name, &value)?);
        } else {
            rest.push(a.clone());
        }
        i += 1;
    }
    Ok((overrides, rest))
}

fn set(table: &mut toml::Table, path: &[String], value: toml::Value) -> AppResult<()> {
    let (last, parents) = path.split_last().expect("override paths are non-empty");
    let mut t = table;
    for p in parents {
        let entry = t
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| AppError::Config(format!("`{}` is a value, not a table", path.join("."))))?;
    }
    t.insert(last.clone(), value);
    Ok(())
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies the environment and
    /// `overrides`, and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[Override]) -> AppResult<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| AppError::io(p, e))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| AppError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        if let Ok(dir) = std::env::var(OUT_ENV) {
            set(&mut table, &["output".into(), "dir".into()], toml::Value::String(dir))?;
        }
        for o in overrides {
            set(&mut table, &o.path, o.value.clone())?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| AppError::Config(format!("invalid configuration: {}", e.message())))?;
        if let (Some(m), Some(p)) = (&cfg.data.manifest, path) {
            if m.is_relative() {
                if let Some(dir) = p.parent() {
                    cfg.data.manifest = Some(dir.join(m));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> AppResult<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| AppError::Config(format!("invalid configuration: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> AppResult<String> {
        toml::to_string(self).map_err(|e| AppError::Config(format!("cannot serialise configuration: {e}")))
    }

    pub fn validate(&self) -> AppResult<()> {
        let field = |section: &str, e: crackclf_core::Error| AppError::Config(format!("[{section}] {e}"));
        self.model.validate().map_err(|e| field("model", e))?;
        self.critic.validate().map_err(|e| field("critic", e))?;
        self.train.validate().map_err(|e| field("train", e))?;
        self.loss.validate().map_err(|e| field("loss", e))?;
        if self.loss.alpha.len() != self.model.side_count {
            return Err(AppError::Config(format!(
                "[loss] alpha has {} entries but the model has {} side outputs",
                self.loss.alpha.len(),
                self.model.side_count
            )));
        }
        if self.critic.in_channels != self.model.in_channels {
            return Err(AppError::Config(format!(
                "[critic] in_channels {} differs from [model] in_channels {}",
                self.critic.in_channels, self.model.in_channels
            )));
        }
        for (section, t) in [("eval", self.eval.threshold), ("infer", self.infer.threshold)] {
            if !(t > 0.0 && t < 1.0) {
                return Err(AppError::Config(format!(
                    "[{section}] threshold must lie in (0, 1), got {t}"
                )));
            }
        }
        let tol = self.eval.tolerance.radius;
        if !(tol.is_finite() && tol >= 0.0) {
            return Err(AppError::Config(format!(
                "[eval] tolerance.radius must be non-negative, got {tol}"
            )));
        }
        let c = &self.complexity;
        if c.height == 0 || c.width == 0 || c.runs == 0 {
            return Err(AppError::Config(
                "[complexity] height, width and runs must be positive".into(),
            ));
        }
        Ok(())
    }

    /// The manifest path, or a configuration error naming the field.
    pub fn manifest(&self) -> AppResult<&Path> {
        self.data.manifest.as_deref().ok_or_else(|| {
            AppError::Config("missing required field `data.manifest` (the dataset manifest path)".into())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn override_extraction() {
        let (o, rest) = extract_overrides(&strings(&[
            "--config",
            "a.toml",
            "--train.lr",
            "0.01",
            "--clf=false",
            "--model.fusion=concat",
            "img.png",
            "--clf",
        ]))
        .unwrap();
        assert_eq!(rest, strings(&["--config", "a.toml", "img.png"]));
        let keys: Vec<String> = o.iter().map(Override::key).collect();
        assert_eq!(
            keys,
            ["train.lr", "train.clf_enabled", "model.fusion", "train.clf_enabled"]
        );
        assert_eq!(o[0].value, toml::Value::Float(0.01));
        assert_eq!(o[1].value, toml::Value::Boolean(false));
        assert_eq!(o[2].value, toml::Value::String("concat".into()));
        assert_eq!(o[3].value, toml::Value::Boolean(true));
        assert!(extract_overrides(&strings(&["--train.lr"])).is_err());
        assert!(Override::new("lr", "1").is_err());
        assert_eq!(parse_value("inf"), toml::Value::String("inf".into()));
        assert_eq!(parse_value("-1e3"), toml::Value::Float(-1e3));
    }

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_toml("[train]\nlearning_rate = 0.1\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("learning_rate"), "{e}");
        let e = RunConfig::from_toml("[nonsense]\n").unwrap_err().to_string();
        assert!(e.contains("nonsense"), "{e}");
    }

    #[test]
    fn disabled_clip_survives_a_round_trip() {
        let c = RunConfig::load(None, &[Override::new("critic.weight_clip", "false").unwrap()]).unwrap();
        assert_eq!(c.critic.weight_clip, None);
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        let c = RunConfig::from_toml("[critic]\nweight_clip = 1\n").unwrap();
        assert_eq!(c.critic.weight_clip, Some(1.0));
        assert!(RunConfig::from_toml("[critic]\nweight_clip = true\n").is_err());
    }

    #[test]
    fn list_override() {
        let o = Override::new("model.stage_channels", "[8, 16, 32, 64, 128]").unwrap();
        let c = RunConfig::load(None, &[o, Override::new("model.reduction_ratio", "4").unwrap()]).unwrap();
        assert_eq!(c.model.stage_channels, [8, 16, 32, 64, 128]);
        let bad = Override::new("model.stage_channels", "[8, 12, 32, 64, 128]").unwrap();
        let e = RunConfig::load(None, &[bad]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("[model]"), "{e}");
    }
}
