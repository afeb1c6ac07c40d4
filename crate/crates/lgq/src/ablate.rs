//! Multi-seed ablation harness: trains the same configuration with only
//! the gradient estimator and/or scale rule varied, and reports mean and
//! range of final test accuracy per arm.
//!
//! Arms must agree on every other field — a stray difference in, say,
//! learning rate would silently invalidate the comparison, so it is a
//! config error.

use crate::error::{Error, Result};
use crate::train::{train, RunConfig};

/// One ablation arm: a label plus its full run configuration.
#[derive(Clone, Debug)]
pub struct Arm {
    pub name: String,
    pub cfg: RunConfig,
}

/// Result of one arm across all seeds.
#[derive(Clone, Debug)]
pub struct ArmResult {
    pub name: String,
    /// Final test accuracy per seed, in seed order.
    pub accs: Vec<f64>,
}

impl ArmResult {
    pub fn mean(&self) -> f64 {
        self.accs.iter().sum::<f64>() / self.accs.len().max(1) as f64
    }

    pub fn min(&self) -> f64 {
        self.accs.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.accs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Fields allowed to differ between arms are skipped; everything else
/// must match the first arm.
fn check_arms_comparable(arms: &[Arm]) -> Result<()> {
    let a = &arms[0].cfg;
    for arm in &arms[1..] {
        let b = &arm.cfg;
        let mismatch: Option<&str> = if a.arch != b.arch {
            Some("arch")
        } else if a.dataset != b.dataset {
            Some("dataset")
        } else if a.data_dir != b.data_dir {
            Some("data_dir")
        } else if a.weight_bits != b.weight_bits {
            Some("weight_bits")
        } else if a.act_bits != b.act_bits {
            Some("act_bits")
        } else if a.quantize_first_last != b.quantize_first_last {
            Some("quantize_first_last")
        } else if a.epochs != b.epochs {
            Some("epochs")
        } else if a.batch_size != b.batch_size {
            Some("batch_size")
        } else if a.lr != b.lr {
            Some("lr")
        } else if a.alpha_lr != b.alpha_lr {
            Some("alpha_lr")
        } else if a.momentum != b.momentum {
            Some("momentum")
        } else if a.weight_decay != b.weight_decay {
            Some("weight_decay")
        } else if a.warmup_epochs != b.warmup_epochs {
            Some("warmup_epochs")
        } else if a.lambda != b.lambda {
            Some("lambda schedule")
        } else if a.ssg_iter_target != b.ssg_iter_target {
            Some("ssg_iter_target")
        } else if a.train_subset != b.train_subset {
            Some("train_subset")
        } else if a.test_subset != b.test_subset {
            Some("test_subset")
        } else if a.synth_train != b.synth_train {
            Some("synth_train")
        } else if a.synth_test != b.synth_test {
            Some("synth_test")
        } else {
            None
        };
        if let Some(field) = mismatch {
            return Err(Error::config(format!(
                "ablation arms {:?} and {:?} differ in {field}, which is not an ablation axis",
                arms[0].name, arm.name
            )));
        }
    }
    Ok(())
}

/// Trains every arm with every seed (seed overrides the arm config's own)
/// and collects final test accuracies. Requires ≥ 3 seeds so the mean is
/// not a coin flip, and ≥ 2 arms so there is something to compare.
pub fn run_ablation(arms: &[Arm], seeds: &[u64]) -> Result<Vec<ArmResult>> {
    if arms.len() < 2 {
        return Err(Error::config("an ablation needs at least two arms"));
    }
    if seeds.len() < 3 {
        return Err(Error::config(format!(
            "an ablation needs at least 3 seeds, got {}",
            seeds.len()
        )));
    }
    check_arms_comparable(arms)?;
    let mut results = Vec::with_capacity(arms.len());
    for arm in arms {
        let mut accs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = arm.cfg.clone();
            cfg.seed = seed;
            cfg.out_dir = arm.cfg.out_dir.join(format!("{}-seed{}", arm.name, seed));
            let out = train(&cfg)?;
            let acc = out
                .history
                .last()
                .map(|r| r.test_acc)
                .ok_or_else(|| Error::config("ablation arm trained for zero epochs"))?;
            accs.push(acc);
        }
        results.push(ArmResult {
            name: arm.name.clone(),
            accs,
        });
    }
    Ok(results)
}

/// Renders results as CSV: one row per arm with per-seed accuracies,
/// mean, and range.
pub fn to_csv(results: &[ArmResult], seeds: &[u64]) -> String {
    let mut out = String::from("arm");
    for s in seeds {
        out.push_str(&format!(",acc_seed{s}"));
    }
    out.push_str(",mean,min,max\n");
    for r in results {
        out.push_str(&r.name);
        for a in &r.accs {
            out.push_str(&format!(",{a:.4}"));
        }
        out.push_str(&format!(",{:.4},{:.4},{:.4}\n", r.mean(), r.min(), r.max()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::EstimatorKind;
    use crate::scale::ScaleRule;

    fn arm(name: &str, dir: &std::path::Path, f: impl FnOnce(&mut RunConfig)) -> Arm {
        let mut cfg = RunConfig {
            data_dir: dir.join("data"),
            out_dir: dir.join("abl"),
            epochs: 1,
            synth_train: 120,
            synth_test: 40,
            batch_size: 32,
            ..RunConfig::default()
        };
        f(&mut cfg);
        Arm {
            name: name.to_string(),
            cfg,
        }
    }

    #[test]
    fn mismatched_non_ablation_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = arm("ste", dir.path(), |c| c.estimator = EstimatorKind::Ste);
        let b = arm("asr", dir.path(), |c| {
            c.estimator = EstimatorKind::Asr;
            c.lr = 0.5; // not an ablation axis
        });
        let err = run_ablation(&[a, b], &[1, 2, 3]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("lr"), "{msg}");
    }

    #[test]
    fn too_few_seeds_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = arm("ste", dir.path(), |c| c.estimator = EstimatorKind::Ste);
        let b = arm("asr", dir.path(), |c| c.estimator = EstimatorKind::Asr);
        assert!(run_ablation(&[a, b], &[1, 2]).is_err());
    }

    #[test]
    fn runs_arms_across_seeds_and_reports_stats() {
        let dir = tempfile::tempdir().unwrap();
        let a = arm("ssg", dir.path(), |c| c.scale_rule = ScaleRule::Ssg);
        let b = arm("llsq", dir.path(), |c| c.scale_rule = ScaleRule::LlsqGrid);
        let results = run_ablation(&[a, b], &[1, 2, 3]).unwrap();
        assert_eq!(results.len(), 2);
        for r in &results {
            assert_eq!(r.accs.len(), 3);
            assert!(r.min() <= r.mean() && r.mean() <= r.max());
            assert!(r.accs.iter().all(|&a| (0.0..=1.0).contains(&a)));
        }
        let csv = to_csv(&results, &[1, 2, 3]);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "arm,acc_seed1,acc_seed2,acc_seed3,mean,min,max"
        );
        assert_eq!(lines.count(), 2);
    }
}
