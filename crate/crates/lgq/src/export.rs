//! Integer weight export ("LGQ1" files) and post-export verification.
//!
//! The exported artifact holds every model tensor by name: quantized
//! weights as signed 8-bit codes plus their f32 scales, everything else
//! (biases, norm parameters, running statistics, float-kept weights) as
//! raw f32. Activation quantizer scales ride along in their own section
//! so the loaded model can reproduce inference end to end. Reconstruction
//! is bit-exact: `code · α` equals the training-time fake-quantized
//! weight for every element, so a loaded model's logits match the
//! checkpointed model's logits exactly.
//!
//! Layout (little-endian):
//!
//! ```text
//! "LGQ1" | version u8 | arch str | weight_bits u8 | act_bits u8 | qfl u8
//! tensor count u32, then per tensor:
//!   name str | bits u8 | flags u8 (1 signed, 2 per-channel, 4 float)
//!   rank u32 | dims u32×rank | scale count u32 | scales f32×count
//!   payload: codes i8×numel (coded) or values f32×numel (float)
//! act-quantizer count u32, then per quantizer:
//!   layer str | bits u8 | scale count u32 | scales f32×count
//! ```
//!
//! Strings are u32-length-prefixed UTF-8. Codes are range-checked against
//! the record's bit width on read, and every parse failure names the byte
//! offset where it happened.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::data::{Cursor, Dataset};
use crate::error::{Error, Result};
use crate::nn::{build_model, Arch, ForwardCtx, LayerMut, LayerRef, Model, QuantPolicy};
use crate::quant::{Granularity, QuantizerState};
use crate::scale::ScaleRule;
use crate::tensor::{no_grad, Tensor};

const MAGIC: &[u8; 4] = b"LGQ1";
const FLAG_SIGNED: u8 = 1;
const FLAG_PER_CHANNEL: u8 = 2;
const FLAG_FLOAT: u8 = 4;

/// One tensor as stored in an export file.
#[derive(Clone, Debug)]
pub struct TensorRecord {
    pub name: String,
    pub bits: u8,
    pub signed: bool,
    pub per_channel: bool,
    pub dims: Vec<usize>,
    pub alpha: Vec<f32>,
    /// Integer codes (coded records) — empty for float records.
    pub codes: Vec<i8>,
    /// Raw values (float records) — empty for coded records.
    pub floats: Vec<f32>,
}

impl TensorRecord {
    pub fn is_float(&self) -> bool {
        !self.floats.is_empty() || self.codes.is_empty() && self.dims.iter().product::<usize>() == 0
    }

    /// `code · α` reconstruction with the record's channel layout.
    pub fn dequantize(&self) -> Vec<f32> {
        if self.codes.is_empty() {
            return self.floats.clone();
        }
        let chunk = self.codes.len() / self.alpha.len();
        self.codes
            .iter()
            .enumerate()
            .map(|(i, &c)| self.alpha[i / chunk] * c as f32)
            .collect()
    }
}

/// Parsed export file.
#[derive(Debug)]
pub struct ExportFile {
    pub arch: Arch,
    pub weight_bits: u8,
    pub act_bits: u8,
    pub quantize_first_last: bool,
    pub tensors: Vec<TensorRecord>,
    /// `(layer name, bits, scales)` for input-activation quantizers.
    pub act_quants: Vec<(String, u8, Vec<f32>)>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn code_range(bits: u8, signed: bool) -> (i32, i32) {
    if signed {
        (-(1 << (bits - 1)), (1 << (bits - 1)) - 1)
    } else {
        (0, (1 << bits) - 1)
    }
}

fn write_coded(
    out: &mut Vec<u8>,
    name: &str,
    q: &QuantizerState,
    t: &Tensor,
) -> Result<()> {
    if q.bit_width > 8 {
        return Err(Error::contract(
            "export",
            format!("{name}: {}-bit codes do not fit the 8-bit payload", q.bit_width),
        ));
    }
    let codes = q.quantize_codes(&t.data())?;
    put_str(out, name);
    out.push(q.bit_width);
    let mut flags = 0u8;
    if q.signed {
        flags |= FLAG_SIGNED;
    }
    if q.granularity == Granularity::PerChannel {
        flags |= FLAG_PER_CHANNEL;
    }
    out.push(flags);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(q.alpha.len() as u32).to_le_bytes());
    for &a in &q.alpha {
        out.extend_from_slice(&a.to_le_bytes());
    }
    for c in codes {
        debug_assert!((-128..=127).contains(&c));
        out.push(c as i8 as u8);
    }
    Ok(())
}

fn write_float(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_str(out, name);
    out.push(32);
    out.push(FLAG_FLOAT);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&0u32.to_le_bytes()); // no scales
    for &v in t.data().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a trained model to `path`. Returns the number of coded
/// tensors written.
pub fn export_model(model: &Model, path: &Path) -> Result<usize> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(1);
    put_str(&mut out, model.arch.name());
    out.push(model.policy.weight_bits);
    out.push(model.policy.act_bits);
    out.push(model.policy.quantize_first_last as u8);

    let mut body = Vec::new();
    let mut count = 0u32;
    let mut coded = 0usize;
    let mut err = None;
    model.visit(&mut |layer| {
        if err.is_some() {
            return;
        }
        let mut put = |r: Result<()>| {
            if let Err(e) = r {
                err = Some(e);
            } else {
                count += 1;
            }
        };
        match layer {
            LayerRef::Linear(l) => {
                match &l.wq {
                    Some(q) => {
                        put(write_coded(&mut body, &format!("{}.weight", l.name), q, &l.weight));
                        coded += 1;
                    }
                    None => put({
                        write_float(&mut body, &format!("{}.weight", l.name), &l.weight);
                        Ok(())
                    }),
                }
                write_float(&mut body, &format!("{}.bias", l.name), &l.bias);
                count += 1;
            }
            LayerRef::Conv(c) => match &c.wq {
                Some(q) => {
                    put(write_coded(&mut body, &format!("{}.weight", c.name), q, &c.weight));
                    coded += 1;
                }
                None => put({
                    write_float(&mut body, &format!("{}.weight", c.name), &c.weight);
                    Ok(())
                }),
            },
            LayerRef::Norm(n) => {
                write_float(&mut body, &format!("{}.gamma", n.name), &n.gamma);
                write_float(&mut body, &format!("{}.beta", n.name), &n.beta);
                write_float(&mut body, &format!("{}.running_mean", n.name), &n.running_mean);
                write_float(&mut body, &format!("{}.running_var", n.name), &n.running_var);
                count += 4;
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&body);

    let mut acts = Vec::new();
    let mut act_count = 0u32;
    model.visit(&mut |layer| {
        let (name, aq) = match layer {
            LayerRef::Linear(l) => (&l.name, &l.aq),
            LayerRef::Conv(c) => (&c.name, &c.aq),
            LayerRef::Norm(_) => return,
        };
        if let Some(a) = aq {
            put_str(&mut acts, name);
            acts.push(a.state.bit_width);
            acts.extend_from_slice(&(a.state.alpha.len() as u32).to_le_bytes());
            for &al in &a.state.alpha {
                acts.extend_from_slice(&al.to_le_bytes());
            }
            act_count += 1;
        }
    });
    out.extend_from_slice(&act_count.to_le_bytes());
    out.extend_from_slice(&acts);

    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(coded)
}

/// Parses an export file without building a model.
pub fn read_export(path: &Path) -> Result<ExportFile> {
    let name = path.display().to_string();
    let buf = fs::read(path).map_err(|e| Error::io(name.clone(), e))?;
    let mut c = Cursor::new(&buf, &name);
    if c.bytes(4)? != MAGIC {
        return Err(c.fail_at(0, "bad magic, expected \"LGQ1\""));
    }
    let version = c.le_u8()?;
    if version != 1 {
        return Err(c.fail_at(4, format!("unsupported version {version}")));
    }
    let arch_at = c.pos;
    let arch = Arch::parse(&c.str()?).map_err(|e| c.fail_at(arch_at, e.to_string()))?;
    let weight_bits = c.le_u8()?;
    let act_bits = c.le_u8()?;
    let quantize_first_last = c.le_u8()? != 0;

    let n_tensors = c.le_u32()? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let tname = c.str()?;
        let bits_at = c.pos;
        let bits = c.le_u8()?;
        let flags = c.le_u8()?;
        let is_float = flags & FLAG_FLOAT != 0;
        if !is_float && !(2..=8).contains(&bits) {
            return Err(c.fail_at(bits_at, format!("coded record with bad bit width {bits}")));
        }
        let rank = c.le_u32()? as usize;
        if rank > 8 {
            return Err(c.fail_at(bits_at, format!("rank {rank} is implausible")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.le_u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        let n_alpha = c.le_u32()? as usize;
        let mut alpha = Vec::with_capacity(n_alpha);
        for _ in 0..n_alpha {
            alpha.push(c.le_f32()?);
        }
        let (codes, floats) = if is_float {
            let mut vals = Vec::with_capacity(numel);
            for _ in 0..numel {
                vals.push(c.le_f32()?);
            }
            (Vec::new(), vals)
        } else {
            if n_alpha == 0 || numel % n_alpha != 0 {
                return Err(c.fail_at(
                    bits_at,
                    format!("{numel} codes do not split across {n_alpha} scales"),
                ));
            }
            let signed = flags & FLAG_SIGNED != 0;
            let (lo, hi) = code_range(bits, signed);
            let payload_at = c.pos;
            let raw = c.bytes(numel)?;
            let mut codes = Vec::with_capacity(numel);
            for (i, &b) in raw.iter().enumerate() {
                let v = b as i8;
                if (v as i32) < lo || (v as i32) > hi {
                    return Err(c.fail_at(
                        payload_at + i,
                        format!("code {v} outside [{lo}, {hi}] for {bits}-bit {tname}"),
                    ));
                }
                codes.push(v);
            }
            (codes, Vec::new())
        };
        tensors.push(TensorRecord {
            name: tname,
            bits,
            signed: flags & FLAG_SIGNED != 0,
            per_channel: flags & FLAG_PER_CHANNEL != 0,
            dims,
            alpha,
            codes,
            floats,
        });
    }

    let n_act = c.le_u32()? as usize;
    let mut act_quants = Vec::with_capacity(n_act);
    for _ in 0..n_act {
        let lname = c.str()?;
        let bits = c.le_u8()?;
        let n_alpha = c.le_u32()? as usize;
        let mut alpha = Vec::with_capacity(n_alpha);
        for _ in 0..n_alpha {
            alpha.push(c.le_f32()?);
        }
        act_quants.push((lname, bits, alpha));
    }

    Ok(ExportFile {
        arch,
        weight_bits,
        act_bits,
        quantize_first_last,
        tensors,
        act_quants,
    })
}

/// Rebuilds an inference-ready model from an export file: weights are the
/// dequantized integer codes (weight quantizers are dropped — the codes
/// already carry the quantization), activation quantizers get their
/// exported scales.
pub fn load_exported(path: &Path) -> Result<Model> {
    let file = read_export(path)?;
    let fname = path.display().to_string();
    let policy = QuantPolicy {
        weight_bits: file.weight_bits,
        act_bits: file.act_bits,
        estimator: crate::estimator::EstimatorConfig::ste(),
        scale_rule: ScaleRule::Fixed,
        quantize_first_last: file.quantize_first_last,
        ssg_iter_target: 1,
    };
    let mut model = build_model(file.arch, policy, 0)?;

    let mut by_name: HashMap<&str, &TensorRecord> = HashMap::new();
    for r in &file.tensors {
        by_name.insert(r.name.as_str(), r);
    }
    for (tname, t) in model.tensors() {
        let r = by_name.remove(tname.as_str()).ok_or_else(|| Error::Format {
            path: fname.clone(),
            offset: 0,
            msg: format!("model tensor {tname} missing from the export"),
        })?;
        if r.dims != t.shape() {
            return Err(Error::Format {
                path: fname.clone(),
                offset: 0,
                msg: format!("tensor {tname}: stored {:?}, model wants {:?}", r.dims, t.shape()),
            });
        }
        t.set_data(&r.dequantize());
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Format {
            path: fname,
            offset: 0,
            msg: format!("export holds tensor {extra} the model does not"),
        });
    }

    let acts: HashMap<String, (u8, Vec<f32>)> = file
        .act_quants
        .into_iter()
        .map(|(n, b, a)| (n, (b, a)))
        .collect();
    let mut err = None;
    model.visit_mut(&mut |layer| {
        let (name, wq, aq) = match layer {
            LayerMut::Linear(l) => (&l.name, &mut l.wq, &mut l.aq),
            LayerMut::Conv(cv) => (&cv.name, &mut cv.wq, &mut cv.aq),
            LayerMut::Norm(_) => return,
        };
        *wq = None; // weights already carry their quantization
        if let Some(a) = aq {
            match acts.get(name.as_str()) {
                Some((bits, alpha)) if *bits == a.state.bit_width => {
                    a.state.alpha = alpha.clone();
                    a.initialized = true;
                }
                Some((bits, _)) => {
                    err = Some(format!("{name}: exported {bits}-bit activation scale, model wants {}", a.state.bit_width));
                }
                None => err = Some(format!("{name}: activation scales missing from the export")),
            }
        }
    });
    if let Some(msg) = err {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: 0,
            msg,
        });
    }
    Ok(model)
}

/// Agreement report between an exported model and its reference.
#[derive(Clone, Copy, Debug)]
pub struct VerifyReport {
    pub samples: usize,
    pub matches: usize,
    pub max_abs_logit_diff: f32,
}

impl VerifyReport {
    pub fn agreement(&self) -> f64 {
        self.matches as f64 / self.samples.max(1) as f64
    }
}

/// Runs both models over the first `n` samples and compares predictions.
pub fn verify_against(
    exported: &mut Model,
    reference: &mut Model,
    ds: &Dataset,
    n: usize,
    batch: usize,
) -> Result<VerifyReport> {
    let n = n.min(ds.len());
    let ctx = ForwardCtx::eval();
    let mut matches = 0usize;
    let mut max_diff = 0.0f32;
    let mut i = 0;
    while i < n {
        let hi = (i + batch).min(n);
        let idx: Vec<usize> = (i..hi).collect();
        let (images, _) = ds.gather(&idx);
        let x = Tensor::from_vec(images, &[idx.len(), ds.shape[1], ds.shape[2], ds.shape[3]])?;
        no_grad(|| -> Result<()> {
            let ye = exported.forward(&x, &ctx)?;
            let yr = reference.forward(&x, &ctx)?;
            let (de, dr) = (ye.data(), yr.data());
            let k = ye.shape()[1];
            for (row, _) in idx.iter().enumerate() {
                let (re, rr) = (&de[row * k..(row + 1) * k], &dr[row * k..(row + 1) * k]);
                let am = |r: &[f32]| {
                    let mut best = 0;
                    for (j, &v) in r.iter().enumerate() {
                        if v > r[best] {
                            best = j;
                        }
                    }
                    best
                };
                if am(re) == am(rr) {
                    matches += 1;
                }
                for (a, b) in re.iter().zip(rr.iter()) {
                    max_diff = max_diff.max((a - b).abs());
                }
            }
            Ok(())
        })?;
        i = hi;
    }
    Ok(VerifyReport {
        samples: n,
        matches,
        max_abs_logit_diff: max_diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{write_synth_mnist, load_mnist, Split};
    use crate::estimator::{EstimatorConfig, EstimatorKind, LambdaSchedule};
    use crate::train::{train, RunConfig};

    fn trained(dir: &Path) -> (crate::train::TrainResult, RunConfig) {
        let cfg = RunConfig {
            data_dir: dir.join("data"),
            out_dir: dir.join("run"),
            epochs: 2,
            synth_train: 300,
            synth_test: 80,
            batch_size: 32,
            ssg_iter_target: 3,
            ..RunConfig::default()
        };
        (train(&cfg).unwrap(), cfg)
    }

    #[test]
    fn export_roundtrips_codes_and_scales() {
        let dir = tempfile::tempdir().unwrap();
        let (out, _) = trained(dir.path());
        let path = dir.path().join("model.lgq1");
        let coded = export_model(&out.model, &path).unwrap();
        assert_eq!(coded, 4); // all four linear layers carry 4-bit weights

        let file = read_export(&path).unwrap();
        assert_eq!(file.arch, Arch::Mlp256);
        assert_eq!(file.weight_bits, 4);
        let fc1 = file.tensors.iter().find(|t| t.name == "fc1.weight").unwrap();
        assert_eq!(fc1.bits, 4);
        assert!(fc1.signed);
        assert!(!fc1.per_channel);
        assert_eq!(fc1.dims, vec![784, 256]);
        assert_eq!(fc1.alpha.len(), 1);
        assert_eq!(fc1.codes.len(), 784 * 256);
        assert!(fc1.codes.iter().all(|&c| (-8..=7).contains(&c)));

        // codes match a fresh quantization of the checkpointed weights
        let mut wq = None;
        out.model.visit(&mut |l| {
            if let LayerRef::Linear(lin) = l {
                if lin.name == "fc1" {
                    let q = lin.wq.as_ref().unwrap();
                    wq = Some(q.quantize_codes(&lin.weight.data()).unwrap());
                }
            }
        });
        let fresh: Vec<i8> = wq.unwrap().iter().map(|&c| c as i8).collect();
        assert_eq!(fresh, fc1.codes);
    }

    #[test]
    fn dequantized_weights_match_eval_fake_quantization_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let (out, _) = trained(dir.path());
        let path = dir.path().join("model.lgq1");
        export_model(&out.model, &path).unwrap();
        let file = read_export(&path).unwrap();
        out.model.visit(&mut |l| {
            if let LayerRef::Linear(lin) = l {
                if let Some(q) = &lin.wq {
                    let record = file
                        .tensors
                        .iter()
                        .find(|t| t.name == format!("{}.weight", lin.name))
                        .unwrap();
                    let eval = q.fake_quantize_values(&lin.weight.data()).unwrap();
                    assert_eq!(record.dequantize(), eval, "{} drifted", lin.name);
                }
            }
        });
    }

    #[test]
    fn exported_model_reproduces_reference_predictions_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let (out, cfg) = trained(dir.path());
        let path = dir.path().join("model.lgq1");
        let mut reference = out.model;
        export_model(&reference, &path).unwrap();
        let mut exported = load_exported(&path).unwrap();
        let test = crate::train::load_dataset(&cfg).unwrap().1;
        let report = verify_against(&mut exported, &mut reference, &test, 80, 32).unwrap();
        assert_eq!(report.samples, 80);
        assert_eq!(report.matches, 80, "argmax disagreement");
        assert_eq!(report.max_abs_logit_diff, 0.0, "logits must be bit-exact");
    }

    #[test]
    fn float_models_export_as_float_records() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            data_dir: dir.path().join("data"),
            out_dir: dir.path().join("run"),
            weight_bits: 32,
            act_bits: 32,
            scale_rule: ScaleRule::Fixed,
            epochs: 1,
            synth_train: 200,
            synth_test: 50,
            batch_size: 32,
            ..RunConfig::default()
        };
        let out = train(&cfg).unwrap();
        let path = dir.path().join("float.lgq1");
        let coded = export_model(&out.model, &path).unwrap();
        assert_eq!(coded, 0);
        let file = read_export(&path).unwrap();
        assert!(file.tensors.iter().all(|t| t.bits == 32 && t.codes.is_empty()));
        let mut exported = load_exported(&path).unwrap();
        let mut reference = out.model;
        let test = crate::train::load_dataset(&cfg).unwrap().1;
        let report = verify_against(&mut exported, &mut reference, &test, 50, 25).unwrap();
        assert_eq!(report.matches, 50);
        assert_eq!(report.max_abs_logit_diff, 0.0);
    }

    #[test]
    fn malformed_files_fail_with_positions() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.lgq1");

        fs::write(&p, b"NOPE").unwrap();
        match read_export(&p) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("bad magic: {other:?}"),
        }

        fs::write(&p, b"LGQ1\x07").unwrap();
        match read_export(&p) {
            Err(Error::Format { offset, msg, .. }) => {
                assert_eq!(offset, 4);
                assert!(msg.contains("version"), "{msg}");
            }
            other => panic!("bad version: {other:?}"),
        }

        // truncated mid-header
        fs::write(&p, b"LGQ1\x01\x06\x00\x00\x00mlp").unwrap();
        match read_export(&p) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("truncation: {other:?}"),
        }
    }

    #[test]
    fn out_of_range_codes_are_rejected_at_their_offset() {
        let dir = tempfile::tempdir().unwrap();
        let (out, _) = trained(dir.path());
        let path = dir.path().join("model.lgq1");
        export_model(&out.model, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        // find fc1's payload: header "fc1.weight" record = name(4+10) bits(1)
        // flags(1) rank(4) dims(8) nalpha(4) alpha(4), then codes
        let needle = b"fc1.weight";
        let at = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap();
        let payload = at + needle.len() + 1 + 1 + 4 + 8 + 4 + 4;
        bytes[payload + 5] = 0x7f; // 127 is far outside 4-bit range
        fs::write(&path, &bytes).unwrap();
        match read_export(&path) {
            Err(Error::Format { offset, msg, .. }) => {
                assert_eq!(offset as usize, payload + 5);
                assert!(msg.contains("127"), "{msg}");
            }
            other => panic!("expected positioned code error, got {other:?}"),
        }
    }

    #[test]
    fn eight_bit_export_stays_in_payload_range() {
        // top of the supported range: signed 8-bit codes span [-128, 127]
        let dir = tempfile::tempdir().unwrap();
        write_synth_mnist(dir.path(), 40, 10, 3).unwrap();
        let ds = load_mnist(dir.path(), Split::Train).unwrap();
        let est = EstimatorConfig::new(EstimatorKind::Ste, LambdaSchedule::default()).unwrap();
        let mut q = QuantizerState::per_layer(8, true, est).unwrap();
        q.init_scale(&ds.images).unwrap();
        let codes = q.quantize_codes(&ds.images).unwrap();
        assert!(codes.iter().all(|&c| (-128..=127).contains(&c)));
    }
}
