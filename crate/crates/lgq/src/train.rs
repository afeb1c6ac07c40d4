//! Training loop, evaluation, run configuration, and checkpointing.
//!
//! One run = one [`RunConfig`]. The loop is deterministic end to end for a
//! fixed config: weight init, batch order, and scale search all derive
//! from `seed`, and every kernel is single-threaded, so two identical runs
//! produce bit-identical weights.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::data::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::estimator::{lambda_at, EstimatorConfig, EstimatorKind, LambdaSchedule};
use crate::nn::{build_model, Arch, ForwardCtx, LayerMut, Model, QuantPolicy};
use crate::scale::ScaleRule;
use crate::tensor::{lr_schedule, no_grad, Sgd, Tensor};

/// Everything that defines a training run.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub arch: Arch,
    /// `mnist`, `cifar10`, `synth-mnist`, or `synth-cifar10`. The `synth-*`
    /// datasets are generated into `data_dir` on first use (fixed
    /// generation seed, so every run sees the same files).
    pub dataset: String,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub weight_bits: u8,
    pub act_bits: u8,
    pub estimator: EstimatorKind,
    pub scale_rule: ScaleRule,
    pub quantize_first_last: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Scale-search step size; it follows the same relative schedule as
    /// `lr` so the search calms down as training anneals.
    pub alpha_lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub warmup_epochs: usize,
    pub lambda: LambdaSchedule,
    pub ssg_iter_target: usize,
    pub seed: u64,
    /// Cap on training samples (0 = use all).
    pub train_subset: usize,
    /// Cap on test samples (0 = use all).
    pub test_subset: usize,
    /// Samples per split when generating a `synth-*` dataset.
    pub synth_train: usize,
    pub synth_test: usize,
    /// Print one line per epoch to stdout.
    pub verbose: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: Arch::Mlp256,
            dataset: "synth-mnist".to_string(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            weight_bits: 4,
            act_bits: 4,
            estimator: EstimatorKind::AsrMde,
            scale_rule: ScaleRule::Ssg,
            quantize_first_last: true,
            epochs: 15,
            batch_size: 64,
            lr: 0.02,
            alpha_lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_epochs: 3,
            lambda: LambdaSchedule::default(),
            ssg_iter_target: 100,
            seed: 1,
            train_subset: 0,
            test_subset: 0,
            synth_train: 12_000,
            synth_test: 2_000,
            verbose: false,
        }
    }
}

impl RunConfig {
    pub fn policy(&self) -> Result<QuantPolicy> {
        Ok(QuantPolicy {
            weight_bits: self.weight_bits,
            act_bits: self.act_bits,
            estimator: EstimatorConfig::new(self.estimator, self.lambda)?,
            scale_rule: self.scale_rule,
            quantize_first_last: self.quantize_first_last,
            ssg_iter_target: self.ssg_iter_target,
        })
    }
}

/// Generation seed for `synth-*` datasets. Fixed (not the run seed) so
/// runs with different training seeds still share one dataset.
const SYNTH_SEED: u64 = 77;

/// Loads (train, test) for the configured dataset, generating synthetic
/// files on first use and applying any subset caps.
pub fn load_dataset(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let (mut train, mut test) = match cfg.dataset.as_str() {
        "mnist" => {
            let dir = cfg.data_dir.join("mnist");
            (
                data::load_mnist(&dir, Split::Train)?,
                data::load_mnist(&dir, Split::Test)?,
            )
        }
        "cifar10" => {
            let dir = cfg.data_dir.join("cifar10");
            (
                data::load_cifar10(&dir, Split::Train)?,
                data::load_cifar10(&dir, Split::Test)?,
            )
        }
        "synth-mnist" => {
            let dir = cfg.data_dir.join("synth-mnist");
            if !dir.join("train-images-idx3-ubyte").exists() {
                data::write_synth_mnist(&dir, cfg.synth_train, cfg.synth_test, SYNTH_SEED)?;
            }
            (
                data::load_mnist(&dir, Split::Train)?,
                data::load_mnist(&dir, Split::Test)?,
            )
        }
        "synth-cifar10" => {
            let dir = cfg.data_dir.join("synth-cifar10");
            if !dir.join("data_batch_1.bin").exists() {
                data::write_synth_cifar10(&dir, cfg.synth_train, cfg.synth_test, SYNTH_SEED)?;
            }
            (
                data::load_cifar10(&dir, Split::Train)?,
                data::load_cifar10(&dir, Split::Test)?,
            )
        }
        other => {
            return Err(Error::config(format!(
                "unknown dataset {other:?}; expected mnist, cifar10, synth-mnist, or synth-cifar10"
            )))
        }
    };
    if cfg.train_subset > 0 {
        train = train.subset(cfg.train_subset, cfg.seed);
    }
    if cfg.test_subset > 0 {
        test = test.subset(cfg.test_subset, cfg.seed);
    }
    Ok((train, test))
}

/// One epoch's logged metrics.
#[derive(Clone, Debug)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub lr: f32,
    pub lambda: f32,
    /// `(quantizer name, mean scale, mean spread z)` per quantizer.
    pub quants: Vec<(String, f32, f32)>,
}

pub struct TrainResult {
    pub model: Model,
    pub history: Vec<EpochRow>,
    pub checkpoint: PathBuf,
}

fn csv_header(row: &EpochRow) -> String {
    let mut h = String::from("epoch,train_loss,train_acc,test_acc,lr,lambda");
    for (name, _, _) in &row.quants {
        h.push_str(&format!(",alpha.{name},z.{name}"));
    }
    h.push('\n');
    h
}

fn csv_line(row: &EpochRow) -> String {
    let mut l = format!(
        "{},{:.6},{:.4},{:.4},{:.6},{}",
        row.epoch, row.train_loss, row.train_acc, row.test_acc, row.lr, row.lambda
    );
    for (_, alpha, z) in &row.quants {
        l.push_str(&format!(",{alpha:.6},{z}"));
    }
    l.push('\n');
    l
}

/// Mean loss and accuracy over a dataset, eval mode (hard rounding, no
/// gradients, running batch-norm statistics).
pub fn evaluate(model: &mut Model, ds: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    let ctx = ForwardCtx::eval();
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    let n = ds.len();
    let mut i = 0;
    while i < n {
        let hi = (i + batch_size).min(n);
        let idx: Vec<usize> = (i..hi).collect();
        let (images, labels) = ds.gather(&idx);
        let x = Tensor::from_vec(images, &[idx.len(), ds.shape[1], ds.shape[2], ds.shape[3]])?;
        let (loss, hits) = no_grad(|| -> Result<(f64, usize)> {
            let logits = model.forward(&x, &ctx)?;
            let loss = logits.softmax_cross_entropy(&labels)?.item() as f64;
            Ok((loss, count_hits(&logits, &labels)))
        })?;
        loss_sum += loss * idx.len() as f64;
        correct += hits;
        i = hi;
    }
    Ok((loss_sum / n as f64, correct as f64 / n as f64))
}

fn count_hits(logits: &Tensor, labels: &[usize]) -> usize {
    let d = logits.data();
    let k = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &label)| {
            let row = &d[i * k..(i + 1) * k];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == label
        })
        .count()
}

/// Names the first tensor holding a non-finite value, for abort messages.
fn first_bad_tensor(model: &Model, logits: &Tensor) -> String {
    for (name, t) in model.tensors() {
        if t.data().iter().any(|v| !v.is_finite()) {
            return name;
        }
    }
    if logits.data().iter().any(|v| !v.is_finite()) {
        return "logits".to_string();
    }
    "loss".to_string()
}

/// Runs the configured training job: builds the model, trains for
/// `epochs`, appends one CSV row per epoch to `out_dir/train_log.csv`, and
/// saves the final checkpoint to `out_dir/model.lgck`.
pub fn train(cfg: &RunConfig) -> Result<TrainResult> {
    let (train_ds, test_ds) = load_dataset(cfg)?;
    let mut model = build_model(cfg.arch, cfg.policy()?, cfg.seed)?;
    train_loop(cfg, &mut model, &train_ds, &test_ds, 0).map(|history| {
        let checkpoint = cfg.out_dir.join("model.lgck");
        TrainResult {
            model,
            history,
            checkpoint,
        }
    })
}

/// Resumes a checkpointed run for its remaining epochs.
pub fn resume(cfg: &RunConfig, checkpoint: &Path) -> Result<TrainResult> {
    let (train_ds, test_ds) = load_dataset(cfg)?;
    let (mut model, done) = load_checkpoint(checkpoint)?;
    train_loop(cfg, &mut model, &train_ds, &test_ds, done).map(|history| {
        let checkpoint = cfg.out_dir.join("model.lgck");
        TrainResult {
            model,
            history,
            checkpoint,
        }
    })
}

fn train_loop(
    cfg: &RunConfig,
    model: &mut Model,
    train_ds: &Dataset,
    test_ds: &Dataset,
    start_epoch: usize,
) -> Result<Vec<EpochRow>> {
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Error::io(cfg.out_dir.display().to_string(), e))?;
    let csv_path = cfg.out_dir.join("train_log.csv");
    let mut csv: Option<fs::File> = None;

    let mut opt = Sgd::new(model.params(), cfg.momentum, cfg.weight_decay);
    let mut rng = StdRng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut history = Vec::new();
    let mut step = start_epoch * train_ds.len().div_ceil(cfg.batch_size.max(1));
    let [_, c, h, w] = train_ds.shape;

    for epoch in start_epoch..cfg.epochs {
        model.set_epoch(epoch);
        let lr = lr_schedule(epoch, cfg.epochs, cfg.lr, cfg.warmup_epochs);
        // the scale search anneals with the same relative schedule
        let alpha_lr = cfg.alpha_lr * (lr / cfg.lr);
        let ctx = ForwardCtx::train(alpha_lr, cfg.scale_rule);

        let mut order: Vec<usize> = (0..train_ds.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }

        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            if chunk.len() < 2 && cfg.batch_size >= 2 {
                continue; // batch norms need at least two samples
            }
            let (images, labels) = train_ds.gather(chunk);
            let x = Tensor::from_vec(images, &[chunk.len(), c, h, w])?;
            let logits = model.forward(&x, &ctx)?;
            let loss = logits.softmax_cross_entropy(&labels)?;
            let l = loss.item();
            if !l.is_finite() {
                return Err(Error::NanLoss {
                    step,
                    tensor: first_bad_tensor(model, &logits),
                });
            }
            opt.zero_grad();
            loss.backward()?;
            opt.step(lr)?;
            loss_sum += l as f64 * chunk.len() as f64;
            correct += count_hits(&logits, &labels);
            seen += chunk.len();
            step += 1;
        }

        let (_, test_acc) = evaluate(model, test_ds, cfg.batch_size.max(2))?;
        let row = EpochRow {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            train_acc: correct as f64 / seen.max(1) as f64,
            test_acc,
            lr,
            lambda: lambda_at(epoch, &cfg.lambda),
            quants: model.quant_summary(),
        };
        if cfg.verbose {
            println!(
                "epoch {:>3}  loss {:.4}  train {:.2}%  test {:.2}%  lr {:.5}  lambda {}",
                row.epoch,
                row.train_loss,
                100.0 * row.train_acc,
                100.0 * row.test_acc,
                row.lr,
                row.lambda
            );
        }
        let file = match &mut csv {
            Some(f) => f,
            None => {
                let mut f = fs::File::create(&csv_path)
                    .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
                f.write_all(csv_header(&row).as_bytes())
                    .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
                csv.insert(f)
            }
        };
        file.write_all(csv_line(&row).as_bytes())
            .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
        history.push(row);
    }

    save_checkpoint(model, cfg.epochs, &cfg.out_dir.join("model.lgck"))?;
    Ok(history)
}

// ---- checkpoints -------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"LGCK";

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn estimator_code(k: EstimatorKind) -> u8 {
    match k {
        EstimatorKind::Ste => 0,
        EstimatorKind::Asr => 1,
        EstimatorKind::AsrMde => 2,
    }
}

fn estimator_from(code: u8) -> Option<EstimatorKind> {
    match code {
        0 => Some(EstimatorKind::Ste),
        1 => Some(EstimatorKind::Asr),
        2 => Some(EstimatorKind::AsrMde),
        _ => None,
    }
}

fn rule_code(r: ScaleRule) -> u8 {
    match r {
        ScaleRule::Ssg => 0,
        ScaleRule::LlsqGrid => 1,
        ScaleRule::Fixed => 2,
    }
}

fn rule_from(code: u8) -> Option<ScaleRule> {
    match code {
        0 => Some(ScaleRule::Ssg),
        1 => Some(ScaleRule::LlsqGrid),
        2 => Some(ScaleRule::Fixed),
        _ => None,
    }
}

fn put_quant_state(out: &mut Vec<u8>, q: &crate::quant::QuantizerState) {
    out.extend_from_slice(&(q.alpha.len() as u32).to_le_bytes());
    for &a in &q.alpha {
        out.extend_from_slice(&a.to_le_bytes());
    }
    match &q.ssg {
        None => out.push(0),
        Some(states) => {
            out.push(1);
            for s in states {
                out.extend_from_slice(&s.z.to_le_bytes());
                out.extend_from_slice(&s.z_step.to_le_bytes());
                for v in [
                    s.iter_target,
                    s.trigger_count,
                    s.consecutive_left,
                    s.consecutive_right,
                    s.iters_since_check,
                ] {
                    out.extend_from_slice(&(v as u32).to_le_bytes());
                }
            }
        }
    }
}

fn read_quant_state(
    c: &mut data::Cursor<'_>,
    q: &mut crate::quant::QuantizerState,
) -> Result<()> {
    let at = c.pos;
    let n = c.le_u32()? as usize;
    if n != q.alpha.len() {
        return Err(c.fail_at(
            at,
            format!("{n} scales where the model expects {}", q.alpha.len()),
        ));
    }
    for a in q.alpha.iter_mut() {
        *a = c.le_f32()?;
    }
    let has_ssg = c.le_u8()? != 0;
    if !has_ssg {
        q.ssg = None;
        return Ok(());
    }
    let mut states = Vec::with_capacity(n);
    for _ in 0..n {
        let z = c.le_f32()?;
        let z_step = c.le_f32()?;
        let mut s = crate::scale::SsgState::new(c.le_u32()? as usize);
        s.z = z;
        s.z_step = z_step;
        s.trigger_count = c.le_u32()? as usize;
        s.consecutive_left = c.le_u32()? as usize;
        s.consecutive_right = c.le_u32()? as usize;
        s.iters_since_check = c.le_u32()? as usize;
        states.push(s);
    }
    q.ssg = Some(states);
    Ok(())
}

/// Serializes model weights, normalization statistics, quantizer scales,
/// and search state so a run can be resumed or exported later.
pub fn save_checkpoint(model: &Model, epochs_done: usize, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.push(1); // version
    put_str(&mut out, model.arch.name());
    let p = &model.policy;
    out.push(p.weight_bits);
    out.push(p.act_bits);
    out.push(estimator_code(p.estimator.kind));
    for v in [p.estimator.schedule.initial, p.estimator.schedule.growth, p.estimator.schedule.cap] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(rule_code(p.scale_rule));
    out.push(p.quantize_first_last as u8);
    out.extend_from_slice(&(p.ssg_iter_target as u32).to_le_bytes());
    out.extend_from_slice(&(epochs_done as u32).to_le_bytes());

    let tensors = model.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        put_str(&mut out, name);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    // quantizer records: (layer name, slot, state [, initialized])
    let mut qout = Vec::new();
    let mut qcount = 0u32;
    model.visit(&mut |layer| {
        let (name, wq, aq) = match layer {
            crate::nn::LayerRef::Linear(l) => (&l.name, &l.wq, &l.aq),
            crate::nn::LayerRef::Conv(c) => (&c.name, &c.wq, &c.aq),
            crate::nn::LayerRef::Norm(_) => return,
        };
        if let Some(q) = wq {
            put_str(&mut qout, name);
            qout.push(0); // weight slot
            put_quant_state(&mut qout, q);
            qcount += 1;
        }
        if let Some(a) = aq {
            put_str(&mut qout, name);
            qout.push(1); // activation slot
            qout.push(a.initialized as u8);
            put_quant_state(&mut qout, &a.state);
            qcount += 1;
        }
    });
    out.extend_from_slice(&qcount.to_le_bytes());
    out.extend_from_slice(&qout);

    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Rebuilds a model from a checkpoint; returns it with the number of
/// epochs already completed.
pub fn load_checkpoint(path: &Path) -> Result<(Model, usize)> {
    let name = path.display().to_string();
    let buf = fs::read(path).map_err(|e| Error::io(name.clone(), e))?;
    let mut c = data::Cursor::new(&buf, &name);
    if c.bytes(4)? != CKPT_MAGIC {
        return Err(c.fail_at(0, "bad magic, expected \"LGCK\""));
    }
    let version = c.le_u8()?;
    if version != 1 {
        return Err(c.fail_at(4, format!("unsupported version {version}")));
    }
    let arch = Arch::parse(&c.str()?).map_err(|e| c.fail_at(5, e.to_string()))?;
    let weight_bits = c.le_u8()?;
    let act_bits = c.le_u8()?;
    let est_at = c.pos;
    let kind = estimator_from(c.le_u8()?)
        .ok_or_else(|| c.fail_at(est_at, "bad estimator code"))?;
    let schedule = LambdaSchedule {
        initial: c.le_f32()?,
        growth: c.le_f32()?,
        cap: c.le_f32()?,
    };
    let rule_at = c.pos;
    let scale_rule =
        rule_from(c.le_u8()?).ok_or_else(|| c.fail_at(rule_at, "bad scale rule code"))?;
    let quantize_first_last = c.le_u8()? != 0;
    let ssg_iter_target = c.le_u32()? as usize;
    let epochs_done = c.le_u32()? as usize;

    let policy = QuantPolicy {
        weight_bits,
        act_bits,
        estimator: EstimatorConfig::new(kind, schedule)
            .map_err(|e| c.fail_at(est_at, e.to_string()))?,
        scale_rule,
        quantize_first_last,
        ssg_iter_target,
    };
    let mut model = build_model(arch, policy, 0)?;

    let n_tensors = c.le_u32()? as usize;
    let mut stored: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let tname = c.str()?;
        let rank = c.le_u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.le_u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut vals = Vec::with_capacity(numel);
        for _ in 0..numel {
            vals.push(c.le_f32()?);
        }
        stored.push((tname, shape, vals));
    }
    let live = model.tensors();
    if live.len() != stored.len() {
        return Err(c.fail_at(
            0,
            format!("{} tensors stored, model has {}", stored.len(), live.len()),
        ));
    }
    for ((lname, t), (sname, sshape, svals)) in live.iter().zip(stored.iter()) {
        if lname != sname || t.shape() != &sshape[..] {
            return Err(c.fail_at(
                0,
                format!("tensor {sname} {sshape:?} does not match model tensor {lname}"),
            ));
        }
        t.set_data(svals);
    }

    let n_quant = c.le_u32()? as usize;
    for _ in 0..n_quant {
        let at = c.pos;
        let qname = c.str()?;
        let slot = c.le_u8()?;
        let mut applied = false;
        let mut err = None;
        if slot == 0 {
            model.visit_mut(&mut |layer| {
                let (name, wq) = match layer {
                    LayerMut::Linear(l) => (&l.name, &mut l.wq),
                    LayerMut::Conv(cv) => (&cv.name, &mut cv.wq),
                    LayerMut::Norm(_) => return,
                };
                if *name == qname && !applied {
                    if let Some(q) = wq {
                        if let Err(e) = read_quant_state(&mut c, q) {
                            err = Some(e);
                        }
                        applied = true;
                    }
                }
            });
        } else {
            let initialized = c.le_u8()? != 0;
            model.visit_mut(&mut |layer| {
                let (name, aq) = match layer {
                    LayerMut::Linear(l) => (&l.name, &mut l.aq),
                    LayerMut::Conv(cv) => (&cv.name, &mut cv.aq),
                    LayerMut::Norm(_) => return,
                };
                if *name == qname && !applied {
                    if let Some(a) = aq {
                        a.initialized = initialized;
                        if let Err(e) = read_quant_state(&mut c, &mut a.state) {
                            err = Some(e);
                        }
                        applied = true;
                    }
                }
            });
        }
        if let Some(e) = err {
            return Err(e);
        }
        if !applied {
            return Err(c.fail_at(at, format!("quantizer record {qname:?} has no slot in the model")));
        }
    }
    Ok((model, epochs_done))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(dir: &Path) -> RunConfig {
        RunConfig {
            data_dir: dir.join("data"),
            out_dir: dir.join("run"),
            epochs: 2,
            synth_train: 400,
            synth_test: 100,
            batch_size: 32,
            ssg_iter_target: 3,
            ..RunConfig::default()
        }
    }

    #[test]
    fn float_mlp_learns_the_synthetic_task() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.weight_bits = 32;
        cfg.act_bits = 32;
        cfg.scale_rule = ScaleRule::Fixed;
        cfg.epochs = 5;
        cfg.synth_train = 800;
        let out = train(&cfg).unwrap();
        assert_eq!(out.history.len(), 5);
        let final_acc = out.history.last().unwrap().test_acc;
        assert!(final_acc > 0.85, "test accuracy {final_acc}");
        assert!(out.checkpoint.exists());
    }

    #[test]
    fn quantized_run_logs_scales_and_stays_finite() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let out = train(&cfg).unwrap();
        assert_eq!(out.history.len(), 2);
        let row = out.history.last().unwrap();
        assert!(row.train_loss.is_finite());
        assert!(!row.quants.is_empty());
        for (name, alpha, z) in &row.quants {
            assert!(*alpha > 0.0, "{name} scale {alpha}");
            assert!((0.0..=0.5).contains(z), "{name} spread {z}");
        }
        let csv = std::fs::read_to_string(cfg.out_dir.join("train_log.csv")).unwrap();
        let mut lines = csv.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("epoch,train_loss,train_acc,test_acc,lr,lambda"));
        assert!(header.contains("alpha.fc2.w"));
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let out = train(&cfg).unwrap();
        let (mut back, done) = load_checkpoint(&out.checkpoint).unwrap();
        assert_eq!(done, 2);
        let mut orig = out.model;
        for ((na, ta), (nb, tb)) in orig.tensors().iter().zip(back.tensors().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.to_vec(), tb.to_vec(), "{na} drifted");
        }
        let (train_ds, test_ds) = load_dataset(&cfg).unwrap();
        let _ = train_ds;
        let (la, aa) = evaluate(&mut orig, &test_ds, 50).unwrap();
        let (lb, ab) = evaluate(&mut back, &test_ds, 50).unwrap();
        assert_eq!(la, lb);
        assert_eq!(aa, ab);
    }

    #[test]
    fn identical_configs_train_bit_identically() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.synth_train = 200;
        cfg.synth_test = 60;
        let a = train(&cfg).unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.out_dir = dir.path().join("run2");
        let b = train(&cfg2).unwrap();
        for ((_, ta), (_, tb)) in a.model.tensors().iter().zip(b.model.tensors().iter()) {
            assert_eq!(ta.to_vec(), tb.to_vec());
        }
        assert_eq!(
            a.history.last().unwrap().test_acc,
            b.history.last().unwrap().test_acc
        );
    }

    #[test]
    fn nan_weights_abort_with_the_tensor_named() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.weight_bits = 32;
        cfg.act_bits = 32;
        cfg.scale_rule = ScaleRule::Fixed;
        let (train_ds, test_ds) = load_dataset(&cfg).unwrap();
        let mut model = build_model(cfg.arch, cfg.policy().unwrap(), cfg.seed).unwrap();
        // poison the classifier weights: no ReLU sits between them and the
        // loss to mask the NaN, so it reaches the loss itself
        for (name, t) in model.tensors() {
            if name == "fc4.weight" {
                t.update_data(|d| d[0] = f32::NAN);
            }
        }
        match train_loop(&cfg, &mut model, &train_ds, &test_ds, 0) {
            Err(Error::NanLoss { step, tensor }) => {
                assert_eq!(step, 0);
                assert_eq!(tensor, "fc4.weight");
            }
            other => panic!("expected NaN abort, got {other:?}"),
        }
    }

    #[test]
    fn quantizer_rejects_nan_weights_before_the_loss() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let (train_ds, test_ds) = load_dataset(&cfg).unwrap();
        let mut model = build_model(cfg.arch, cfg.policy().unwrap(), cfg.seed).unwrap();
        model.tensors()[0].1.update_data(|d| d[0] = f32::NAN);
        let err = train_loop(&cfg, &mut model, &train_ds, &test_ds, 0).unwrap_err();
        assert!(err.to_string().contains("NaN"), "{err}");
    }

    #[test]
    fn resume_continues_to_the_configured_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.synth_train = 200;
        cfg.synth_test = 60;
        cfg.epochs = 1;
        let first = train(&cfg).unwrap();
        let mut more = cfg.clone();
        more.epochs = 3;
        more.out_dir = dir.path().join("resumed");
        let second = resume(&more, &first.checkpoint).unwrap();
        let epochs: Vec<usize> = second.history.iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, vec![1, 2]);
    }
}
