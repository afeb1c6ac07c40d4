//! Run configuration files: INI-style `key = value` lines with optional
//! `[section]` headers.
//!
//! Sections are organizational only — every key is globally unique, so
//! `weight_bits = 4` means the same thing under `[quant]` or at the top
//! of the file. `#` and `;` start comments. When a key repeats, the last
//! assignment wins, and command-line overrides are applied after the file
//! by calling [`set_field`] with the same key names.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::estimator::EstimatorKind;
use crate::nn::Arch;
use crate::scale::ScaleRule;
use crate::train::RunConfig;

/// Every assignable key, in the order `print_config` reports them.
pub const KEYS: &[&str] = &[
    "arch",
    "dataset",
    "data_dir",
    "out_dir",
    "weight_bits",
    "act_bits",
    "estimator",
    "scale_rule",
    "quantize_first_last",
    "epochs",
    "batch_size",
    "lr",
    "alpha_lr",
    "momentum",
    "weight_decay",
    "warmup_epochs",
    "lambda_initial",
    "lambda_growth",
    "lambda_cap",
    "ssg_iter_target",
    "seed",
    "train_subset",
    "test_subset",
    "synth_train",
    "synth_test",
    "verbose",
];

fn bad_value(key: &str, value: &str, want: &str) -> Error {
    Error::config(format!("key {key:?}: cannot parse {value:?} as {want}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, want: &str) -> Result<T> {
    value.trim().parse::<T>().map_err(|_| bad_value(key, value, want))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(bad_value(key, value, "bool")),
    }
}

pub fn parse_estimator(s: &str) -> Result<EstimatorKind> {
    match s.trim() {
        "ste" => Ok(EstimatorKind::Ste),
        "asr" => Ok(EstimatorKind::Asr),
        "asr-mde" => Ok(EstimatorKind::AsrMde),
        other => Err(Error::config(format!(
            "unknown estimator {other:?}; expected ste, asr, or asr-mde"
        ))),
    }
}

pub fn estimator_name(k: EstimatorKind) -> &'static str {
    match k {
        EstimatorKind::Ste => "ste",
        EstimatorKind::Asr => "asr",
        EstimatorKind::AsrMde => "asr-mde",
    }
}

pub fn parse_scale_rule(s: &str) -> Result<ScaleRule> {
    match s.trim() {
        "ssg" => Ok(ScaleRule::Ssg),
        "llsq-grid" => Ok(ScaleRule::LlsqGrid),
        "fixed" => Ok(ScaleRule::Fixed),
        other => Err(Error::config(format!(
            "unknown scale rule {other:?}; expected ssg, llsq-grid, or fixed"
        ))),
    }
}

pub fn scale_rule_name(r: ScaleRule) -> &'static str {
    match r {
        ScaleRule::Ssg => "ssg",
        ScaleRule::LlsqGrid => "llsq-grid",
        ScaleRule::Fixed => "fixed",
    }
}

/// Assigns one key; the single source of truth for both config files and
/// command-line `--set key=value` overrides.
pub fn set_field(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    let v = value.trim();
    match key {
        "arch" => cfg.arch = Arch::parse(v)?,
        "dataset" => cfg.dataset = v.to_string(),
        "data_dir" => cfg.data_dir = PathBuf::from(v),
        "out_dir" => cfg.out_dir = PathBuf::from(v),
        "weight_bits" => cfg.weight_bits = parse_num(key, v, "integer")?,
        "act_bits" => cfg.act_bits = parse_num(key, v, "integer")?,
        "estimator" => cfg.estimator = parse_estimator(v)?,
        "scale_rule" => cfg.scale_rule = parse_scale_rule(v)?,
        "quantize_first_last" => cfg.quantize_first_last = parse_bool(key, v)?,
        "epochs" => cfg.epochs = parse_num(key, v, "integer")?,
        "batch_size" => cfg.batch_size = parse_num(key, v, "integer")?,
        "lr" => cfg.lr = parse_num(key, v, "number")?,
        "alpha_lr" => cfg.alpha_lr = parse_num(key, v, "number")?,
        "momentum" => cfg.momentum = parse_num(key, v, "number")?,
        "weight_decay" => cfg.weight_decay = parse_num(key, v, "number")?,
        "warmup_epochs" => cfg.warmup_epochs = parse_num(key, v, "integer")?,
        "lambda_initial" => cfg.lambda.initial = parse_num(key, v, "number")?,
        "lambda_growth" => cfg.lambda.growth = parse_num(key, v, "number")?,
        "lambda_cap" => cfg.lambda.cap = parse_num(key, v, "number")?,
        "ssg_iter_target" => cfg.ssg_iter_target = parse_num(key, v, "integer")?,
        "seed" => cfg.seed = parse_num(key, v, "integer")?,
        "train_subset" => cfg.train_subset = parse_num(key, v, "integer")?,
        "test_subset" => cfg.test_subset = parse_num(key, v, "integer")?,
        "synth_train" => cfg.synth_train = parse_num(key, v, "integer")?,
        "synth_test" => cfg.synth_test = parse_num(key, v, "integer")?,
        "verbose" => cfg.verbose = parse_bool(key, v)?,
        other => {
            return Err(Error::config(format!(
                "unknown key {other:?}; known keys: {}",
                KEYS.join(", ")
            )))
        }
    }
    Ok(())
}

/// Applies a config file's assignments on top of `cfg`.
pub fn apply_config(cfg: &mut RunConfig, text: &str) -> Result<()> {
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find(['#', ';']) {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') {
            if !line.ends_with(']') || line.len() < 3 {
                return Err(Error::config(format!(
                    "line {}: malformed section header {line:?}",
                    lineno + 1
                )));
            }
            continue; // sections are only for organization
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::config(format!(
                "line {}: expected key = value, got {line:?}",
                lineno + 1
            )));
        };
        set_field(cfg, key.trim(), value)
            .map_err(|e| Error::config(format!("line {}: {e}", lineno + 1)))?;
    }
    Ok(())
}

/// The full configuration in reloadable form.
pub fn print_config(cfg: &RunConfig) -> String {
    format!(
        "[run]\n\
         arch = {}\n\
         dataset = {}\n\
         data_dir = {}\n\
         out_dir = {}\n\
         epochs = {}\n\
         batch_size = {}\n\
         seed = {}\n\
         verbose = {}\n\
         \n[quant]\n\
         weight_bits = {}\n\
         act_bits = {}\n\
         estimator = {}\n\
         scale_rule = {}\n\
         quantize_first_last = {}\n\
         lambda_initial = {}\n\
         lambda_growth = {}\n\
         lambda_cap = {}\n\
         ssg_iter_target = {}\n\
         alpha_lr = {}\n\
         \n[optim]\n\
         lr = {}\n\
         momentum = {}\n\
         weight_decay = {}\n\
         warmup_epochs = {}\n\
         \n[data]\n\
         train_subset = {}\n\
         test_subset = {}\n\
         synth_train = {}\n\
         synth_test = {}\n",
        cfg.arch.name(),
        cfg.dataset,
        cfg.data_dir.display(),
        cfg.out_dir.display(),
        cfg.epochs,
        cfg.batch_size,
        cfg.seed,
        cfg.verbose,
        cfg.weight_bits,
        cfg.act_bits,
        estimator_name(cfg.estimator),
        scale_rule_name(cfg.scale_rule),
        cfg.quantize_first_last,
        cfg.lambda.initial,
        cfg.lambda.growth,
        cfg.lambda.cap,
        cfg.ssg_iter_target,
        cfg.alpha_lr,
        cfg.lr,
        cfg.momentum,
        cfg.weight_decay,
        cfg.warmup_epochs,
        cfg.train_subset,
        cfg.test_subset,
        cfg.synth_train,
        cfg.synth_test,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_comments_and_values() {
        let mut cfg = RunConfig::default();
        apply_config(
            &mut cfg,
            "# a comment\n\
             [run]\n\
             arch = vgg7-small   ; trailing comment\n\
             epochs = 40\n\
             \n\
             [quant]\n\
             weight_bits = 3\n\
             estimator = asr-mde\n\
             scale_rule = llsq-grid\n\
             quantize_first_last = false\n\
             lambda_growth = 2.5\n",
        )
        .unwrap();
        assert_eq!(cfg.arch, Arch::Vgg7Small);
        assert_eq!(cfg.epochs, 40);
        assert_eq!(cfg.weight_bits, 3);
        assert_eq!(cfg.estimator, EstimatorKind::AsrMde);
        assert_eq!(cfg.scale_rule, ScaleRule::LlsqGrid);
        assert!(!cfg.quantize_first_last);
        assert_eq!(cfg.lambda.growth, 2.5);
    }

    #[test]
    fn unknown_key_is_rejected_with_line_number() {
        let mut cfg = RunConfig::default();
        let err = apply_config(&mut cfg, "epochs = 3\nlearning_rate = 0.1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("learning_rate"), "{msg}");
    }

    #[test]
    fn bad_values_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(apply_config(&mut cfg, "epochs = soon").is_err());
        assert!(apply_config(&mut cfg, "estimator = round").is_err());
        assert!(apply_config(&mut cfg, "verbose = maybe").is_err());
        assert!(apply_config(&mut cfg, "this line has no equals").is_err());
        assert!(apply_config(&mut cfg, "[unterminated\n").is_err());
    }

    #[test]
    fn last_assignment_wins() {
        let mut cfg = RunConfig::default();
        apply_config(&mut cfg, "seed = 1\nseed = 9\n").unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn printed_config_reloads_to_the_same_values() {
        let mut cfg = RunConfig::default();
        cfg.weight_bits = 3;
        cfg.estimator = EstimatorKind::Asr;
        cfg.lr = 0.005;
        cfg.dataset = "synth-cifar10".into();
        let text = print_config(&cfg);
        let mut back = RunConfig::default();
        apply_config(&mut back, &text).unwrap();
        assert_eq!(back.weight_bits, 3);
        assert_eq!(back.estimator, EstimatorKind::Asr);
        assert_eq!(back.lr, 0.005);
        assert_eq!(back.dataset, "synth-cifar10");
        assert_eq!(back.arch, cfg.arch);
    }

    #[test]
    fn every_documented_key_is_assignable() {
        let mut cfg = RunConfig::default();
        for key in KEYS {
            let probe = match *key {
                "arch" => "mlp256",
                "dataset" => "mnist",
                "data_dir" | "out_dir" => "/tmp/x",
                "estimator" => "ste",
                "scale_rule" => "fixed",
                "quantize_first_last" | "verbose" => "true",
                "lr" | "alpha_lr" | "momentum" | "weight_decay" => "0.5",
                "lambda_initial" | "lambda_growth" | "lambda_cap" => "5",
                _ => "4",
            };
            set_field(&mut cfg, key, probe).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }
}
