//! Model zoo: quantization-aware layers and three desk-scale architectures.
//!
//! Layers carry optional quantizer state for their weights and for their
//! input activations. Attachment policy: conv weights are quantized per
//! output channel, linear weights per layer, activations per layer and
//! unsigned (every quantized tensor feeding a layer has passed through a
//! ReLU). The raw network input is never activation-quantized, and a bit
//! width of 32 means "leave the tensor in float" — no quantizer is
//! attached at all.
//!
//! During a training forward pass each layer also advances its learned
//! scales: activation scales initialize from the first batch seen, then
//! both weight and activation scales take one search step per iteration.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::estimator::EstimatorConfig;
use crate::quant::QuantizerState;
use crate::scale::{update_scales, ScaleRule};
use crate::tensor::Tensor;

/// How a model run quantizes (or does not quantize) its layers.
#[derive(Clone, Debug)]
pub struct QuantPolicy {
    /// Weight bit width; 32 disables weight quantization.
    pub weight_bits: u8,
    /// Activation bit width; 32 disables activation quantization.
    pub act_bits: u8,
    pub estimator: EstimatorConfig,
    pub scale_rule: ScaleRule,
    /// When false the first conv/linear keeps float weights and the
    /// classifier keeps float weights and float input activations.
    pub quantize_first_last: bool,
    /// Iterations between spread-state checks in the scale search.
    pub ssg_iter_target: usize,
}

impl QuantPolicy {
    pub fn float() -> QuantPolicy {
        QuantPolicy {
            weight_bits: 32,
            act_bits: 32,
            estimator: EstimatorConfig::ste(),
            scale_rule: ScaleRule::Fixed,
            quantize_first_last: true,
            ssg_iter_target: 1000,
        }
    }

    fn quantizes_weights(&self) -> bool {
        self.weight_bits < 32
    }

    fn quantizes_acts(&self) -> bool {
        self.act_bits < 32
    }
}

/// Per-step flags threaded through a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardCtx {
    pub training: bool,
    /// Learning rate for the scale search this step (ignored in eval).
    pub alpha_lr: f32,
    pub scale_rule: ScaleRule,
}

impl ForwardCtx {
    pub fn eval() -> ForwardCtx {
        ForwardCtx {
            training: false,
            alpha_lr: 0.0,
            scale_rule: ScaleRule::Fixed,
        }
    }

    pub fn train(alpha_lr: f32, scale_rule: ScaleRule) -> ForwardCtx {
        ForwardCtx {
            training: true,
            alpha_lr,
            scale_rule,
        }
    }
}

/// Input-activation quantizer with lazy scale initialization: the first
/// training batch sets α from its max magnitude, later batches search.
#[derive(Clone, Debug)]
pub struct ActQuantizer {
    pub state: QuantizerState,
    pub initialized: bool,
}

impl ActQuantizer {
    fn new(policy: &QuantPolicy) -> Result<ActQuantizer> {
        let mut state =
            QuantizerState::per_layer(policy.act_bits, false, policy.estimator.clone())?;
        if policy.scale_rule == ScaleRule::Ssg {
            state.enable_ssg(policy.ssg_iter_target);
        }
        Ok(ActQuantizer {
            state,
            initialized: false,
        })
    }

    pub fn apply(&mut self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        if ctx.training {
            if !self.initialized {
                self.state.init_scale(&x.data())?;
                self.initialized = true;
            } else if ctx.alpha_lr > 0.0 {
                update_scales(&mut self.state, &x.data(), ctx.scale_rule, ctx.alpha_lr)?;
            }
        }
        self.state.fake_quantize(x, ctx.training)
    }
}

fn weight_quant(policy: &QuantPolicy, per_channel: Option<usize>, data: &[f32]) -> Result<Option<QuantizerState>> {
    if !policy.quantizes_weights() {
        return Ok(None);
    }
    let mut state = match per_channel {
        Some(channels) => QuantizerState::per_channel(
            policy.weight_bits,
            true,
            policy.estimator.clone(),
            channels,
        )?,
        None => QuantizerState::per_layer(policy.weight_bits, true, policy.estimator.clone())?,
    };
    if policy.scale_rule == ScaleRule::Ssg {
        state.enable_ssg(policy.ssg_iter_target);
    }
    state.init_scale(data)?;
    Ok(Some(state))
}

fn act_quant(policy: &QuantPolicy) -> Result<Option<ActQuantizer>> {
    if !policy.quantizes_acts() {
        return Ok(None);
    }
    Ok(Some(ActQuantizer::new(policy)?))
}

/// Standard-normal draw (Box–Muller) for weight initialization.
fn randn(rng: &mut StdRng) -> f32 {
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
}

fn he_init(rng: &mut StdRng, fan_in: usize, n: usize) -> Vec<f32> {
    let std = (2.0 / fan_in as f32).sqrt();
    (0..n).map(|_| randn(rng) * std).collect()
}

/// Fully connected layer `y = x W + b` with weight shape `[in, out]`.
#[derive(Debug)]
pub struct Linear {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
    pub wq: Option<QuantizerState>,
    pub aq: Option<ActQuantizer>,
}

impl Linear {
    fn new(
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut StdRng,
        policy: &QuantPolicy,
        quantize_weights: bool,
        quantize_input: bool,
    ) -> Result<Linear> {
        let w = he_init(rng, d_in, d_in * d_out);
        let wq = if quantize_weights {
            weight_quant(policy, None, &w)?
        } else {
            None
        };
        let aq = if quantize_input { act_quant(policy)? } else { None };
        Ok(Linear {
            name: name.to_string(),
            weight: Tensor::param(w, &[d_in, d_out])?,
            bias: Tensor::param(vec![0.0; d_out], &[d_out])?,
            wq,
            aq,
        })
    }

    pub fn forward(&mut self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let x = match &mut self.aq {
            Some(aq) => aq.apply(x, ctx)?,
            None => x.clone(),
        };
        let w = match &mut self.wq {
            Some(wq) => {
                if ctx.training && ctx.alpha_lr > 0.0 {
                    update_scales(wq, &self.weight.data(), ctx.scale_rule, ctx.alpha_lr)?;
                }
                wq.fake_quantize(&self.weight, ctx.training)?
            }
            None => self.weight.clone(),
        };
        x.matmul(&w)?.add(&self.bias)
    }
}

/// 2-D convolution with weight shape `[c_out, c_in, kh, kw]`; layers that
/// feed a batch norm carry no bias.
#[derive(Debug)]
pub struct Conv2d {
    pub name: String,
    pub weight: Tensor,
    pub stride: usize,
    pub pad: usize,
    pub wq: Option<QuantizerState>,
    pub aq: Option<ActQuantizer>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut StdRng,
        policy: &QuantPolicy,
        quantize_weights: bool,
        quantize_input: bool,
    ) -> Result<Conv2d> {
        let fan_in = c_in * kernel * kernel;
        let w = he_init(rng, fan_in, c_out * fan_in);
        let wq = if quantize_weights {
            weight_quant(policy, Some(c_out), &w)?
        } else {
            None
        };
        let aq = if quantize_input { act_quant(policy)? } else { None };
        Ok(Conv2d {
            name: name.to_string(),
            weight: Tensor::param(w, &[c_out, c_in, kernel, kernel])?,
            stride,
            pad,
            wq,
            aq,
        })
    }

    pub fn forward(&mut self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let x = match &mut self.aq {
            Some(aq) => aq.apply(x, ctx)?,
            None => x.clone(),
        };
        let w = match &mut self.wq {
            Some(wq) => {
                if ctx.training && ctx.alpha_lr > 0.0 {
                    update_scales(wq, &self.weight.data(), ctx.scale_rule, ctx.alpha_lr)?;
                }
                wq.fake_quantize(&self.weight, ctx.training)?
            }
            None => self.weight.clone(),
        };
        x.conv2d(&w, self.stride, self.pad)
    }
}

/// Batch normalization; always runs in float regardless of policy.
#[derive(Debug)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNorm {
    fn new(name: &str, channels: usize) -> Result<BatchNorm> {
        Ok(BatchNorm {
            name: name.to_string(),
            gamma: Tensor::param(vec![1.0; channels], &[channels])?,
            beta: Tensor::param(vec![0.0; channels], &[channels])?,
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::from_vec(vec![1.0; channels], &[channels])?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        x.batchnorm(
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            ctx.training,
            self.momentum,
            self.eps,
        )
    }
}

/// One step of a model's computation.
#[derive(Debug)]
pub enum Op {
    Linear(Linear),
    Conv(Conv2d),
    Norm(BatchNorm),
    Relu,
    AvgPool { kernel: usize, stride: usize },
    Flatten,
    /// Push the current activation onto the residual stack.
    Save,
    /// Pop the residual stack and add it back, optionally through a
    /// projection (1×1 strided conv + norm) when shapes change.
    AddSaved {
        proj: Option<(Conv2d, BatchNorm)>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Mlp256,
    Vgg7Small,
    ResNet20Small,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Mlp256 => "mlp256",
            Arch::Vgg7Small => "vgg7-small",
            Arch::ResNet20Small => "resnet20-small",
        }
    }

    pub fn parse(s: &str) -> Result<Arch> {
        match s {
            "mlp256" => Ok(Arch::Mlp256),
            "vgg7-small" => Ok(Arch::Vgg7Small),
            "resnet20-small" => Ok(Arch::ResNet20Small),
            other => Err(Error::config(format!(
                "unknown architecture {other:?}; expected mlp256, vgg7-small, or resnet20-small"
            ))),
        }
    }

    /// `[channels, height, width]` this architecture consumes.
    pub fn input_shape(self) -> [usize; 3] {
        match self {
            Arch::Mlp256 => [1, 28, 28],
            Arch::Vgg7Small | Arch::ResNet20Small => [3, 32, 32],
        }
    }
}

/// A sequential model (with an auxiliary residual stack) built by
/// [`build_model`].
#[derive(Debug)]
pub struct Model {
    pub arch: Arch,
    pub policy: QuantPolicy,
    pub ops: Vec<Op>,
}

/// Borrowed view of one parameterized layer, for uniform iteration.
pub enum LayerRef<'a> {
    Linear(&'a Linear),
    Conv(&'a Conv2d),
    Norm(&'a BatchNorm),
}

pub enum LayerMut<'a> {
    Linear(&'a mut Linear),
    Conv(&'a mut Conv2d),
    Norm(&'a mut BatchNorm),
}

impl Model {
    pub fn forward(&mut self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let mut cur = x.clone();
        let mut saved: Vec<Tensor> = Vec::new();
        for op in &mut self.ops {
            cur = match op {
                Op::Linear(l) => l.forward(&cur, ctx)?,
                Op::Conv(c) => c.forward(&cur, ctx)?,
                Op::Norm(n) => n.forward(&cur, ctx)?,
                Op::Relu => cur.relu()?,
                Op::AvgPool { kernel, stride } => cur.avgpool2d(*kernel, *stride)?,
                Op::Flatten => cur.flatten()?,
                Op::Save => {
                    saved.push(cur.clone());
                    cur
                }
                Op::AddSaved { proj } => {
                    let skip = saved.pop().ok_or_else(|| {
                        Error::contract("forward", "residual add with empty stack")
                    })?;
                    let skip = match proj {
                        Some((conv, norm)) => norm.forward(&conv.forward(&skip, ctx)?, ctx)?,
                        None => skip,
                    };
                    cur.add(&skip)?
                }
            };
        }
        Ok(cur)
    }

    pub fn visit(&self, f: &mut dyn FnMut(LayerRef<'_>)) {
        for op in &self.ops {
            match op {
                Op::Linear(l) => f(LayerRef::Linear(l)),
                Op::Conv(c) => f(LayerRef::Conv(c)),
                Op::Norm(n) => f(LayerRef::Norm(n)),
                Op::AddSaved { proj: Some((c, n)) } => {
                    f(LayerRef::Conv(c));
                    f(LayerRef::Norm(n));
                }
                _ => {}
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(LayerMut<'_>)) {
        for op in &mut self.ops {
            match op {
                Op::Linear(l) => f(LayerMut::Linear(l)),
                Op::Conv(c) => f(LayerMut::Conv(c)),
                Op::Norm(n) => f(LayerMut::Norm(n)),
                Op::AddSaved { proj: Some((c, n)) } => {
                    f(LayerMut::Conv(c));
                    f(LayerMut::Norm(n));
                }
                _ => {}
            }
        }
    }

    /// All trainable parameters, in deterministic order.
    pub fn params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit(&mut |layer| match layer {
            LayerRef::Linear(l) => {
                out.push(l.weight.clone());
                out.push(l.bias.clone());
            }
            LayerRef::Conv(c) => out.push(c.weight.clone()),
            LayerRef::Norm(n) => {
                out.push(n.gamma.clone());
                out.push(n.beta.clone());
            }
        });
        out
    }

    /// Every named tensor, trainable or not (includes running stats), for
    /// checkpointing.
    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |layer| match layer {
            LayerRef::Linear(l) => {
                out.push((format!("{}.weight", l.name), l.weight.clone()));
                out.push((format!("{}.bias", l.name), l.bias.clone()));
            }
            LayerRef::Conv(c) => out.push((format!("{}.weight", c.name), c.weight.clone())),
            LayerRef::Norm(n) => {
                out.push((format!("{}.gamma", n.name), n.gamma.clone()));
                out.push((format!("{}.beta", n.name), n.beta.clone()));
                out.push((format!("{}.running_mean", n.name), n.running_mean.clone()));
                out.push((format!("{}.running_var", n.name), n.running_var.clone()));
            }
        });
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Advances every quantizer's estimator to the given epoch (moves the
    /// soft-round sharpness along its schedule).
    pub fn set_epoch(&mut self, epoch: usize) {
        self.visit_mut(&mut |layer| {
            let (wq, aq) = match layer {
                LayerMut::Linear(l) => (&mut l.wq, &mut l.aq),
                LayerMut::Conv(c) => (&mut c.wq, &mut c.aq),
                LayerMut::Norm(_) => return,
            };
            if let Some(q) = wq {
                q.estimator.set_epoch(epoch);
            }
            if let Some(a) = aq {
                a.state.estimator.set_epoch(epoch);
            }
        });
    }

    /// Per-quantizer scale/spread snapshot for logging: `(name, mean α,
    /// mean z)` with names suffixed `.w` / `.a`.
    pub fn quant_summary(&self) -> Vec<(String, f32, f32)> {
        fn mean(v: &[f32]) -> f32 {
            v.iter().sum::<f32>() / v.len() as f32
        }
        fn mean_z(q: &QuantizerState) -> f32 {
            q.ssg
                .as_ref()
                .map(|s| s.iter().map(|st| st.z).sum::<f32>() / s.len() as f32)
                .unwrap_or(0.0)
        }
        let mut out = Vec::new();
        self.visit(&mut |layer| {
            let (name, wq, aq) = match layer {
                LayerRef::Linear(l) => (&l.name, &l.wq, &l.aq),
                LayerRef::Conv(c) => (&c.name, &c.wq, &c.aq),
                LayerRef::Norm(_) => return,
            };
            if let Some(q) = wq {
                out.push((format!("{name}.w"), mean(&q.alpha), mean_z(q)));
            }
            if let Some(a) = aq {
                out.push((format!("{name}.a"), mean(&a.state.alpha), mean_z(&a.state)));
            }
        });
        out
    }
}

/// Builds an architecture with quantizers attached per `policy`, weights
/// initialized from `seed`.
pub fn build_model(arch: Arch, policy: QuantPolicy, seed: u64) -> Result<Model> {
    let mut rng = StdRng::seed_from_u64(seed);
    let qw = policy.quantizes_weights();
    let qa = policy.quantizes_acts();
    let qfl = policy.quantize_first_last;
    let mut ops = Vec::new();
    match arch {
        Arch::Mlp256 => {
            ops.push(Op::Flatten);
            let dims = [(784, 256), (256, 256), (256, 256), (256, 10)];
            let last = dims.len() - 1;
            for (i, &(d_in, d_out)) in dims.iter().enumerate() {
                let edge = i == 0 || i == last;
                let w_on = qw && (!edge || qfl);
                // the raw input is never quantized; the classifier input
                // only when edge layers are in scope
                let a_on = qa && i > 0 && (i != last || qfl);
                ops.push(Op::Linear(Linear::new(
                    &format!("fc{}", i + 1),
                    d_in,
                    d_out,
                    &mut rng,
                    &policy,
                    w_on,
                    a_on,
                )?));
                if i < last {
                    ops.push(Op::Norm(BatchNorm::new(&format!("bn{}", i + 1), d_out)?));
                    ops.push(Op::Relu);
                }
            }
        }
        Arch::Vgg7Small => {
            let blocks = [(3, 32), (32, 32), (32, 64), (64, 64), (64, 128), (128, 128)];
            for (i, &(c_in, c_out)) in blocks.iter().enumerate() {
                let first = i == 0;
                ops.push(Op::Conv(Conv2d::new(
                    &format!("conv{}", i + 1),
                    c_in,
                    c_out,
                    3,
                    1,
                    1,
                    &mut rng,
                    &policy,
                    qw && (!first || qfl),
                    qa && !first,
                )?));
                ops.push(Op::Norm(BatchNorm::new(&format!("bn{}", i + 1), c_out)?));
                ops.push(Op::Relu);
                if i % 2 == 1 {
                    ops.push(Op::AvgPool { kernel: 2, stride: 2 });
                }
            }
            ops.push(Op::Flatten);
            ops.push(Op::Linear(Linear::new(
                "fc1", 128 * 4 * 4, 128, &mut rng, &policy, qw, qa,
            )?));
            ops.push(Op::Relu);
            ops.push(Op::Linear(Linear::new(
                "fc2", 128, 10, &mut rng, &policy, qw && qfl, qa && qfl,
            )?));
        }
        Arch::ResNet20Small => {
            ops.push(Op::Conv(Conv2d::new(
                "conv0", 3, 16, 3, 1, 1, &mut rng, &policy, qw && qfl, false,
            )?));
            ops.push(Op::Norm(BatchNorm::new("bn0", 16)?));
            ops.push(Op::Relu);
            let mut c_in = 16;
            for (stage, &c_out) in [16usize, 32, 64].iter().enumerate() {
                for block in 0..3 {
                    let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                    let tag = format!("s{stage}b{block}");
                    ops.push(Op::Save);
                    ops.push(Op::Conv(Conv2d::new(
                        &format!("{tag}.conv1"),
                        c_in,
                        c_out,
                        3,
                        stride,
                        1,
                        &mut rng,
                        &policy,
                        qw,
                        qa,
                    )?));
                    ops.push(Op::Norm(BatchNorm::new(&format!("{tag}.bn1"), c_out)?));
                    ops.push(Op::Relu);
                    ops.push(Op::Conv(Conv2d::new(
                        &format!("{tag}.conv2"),
                        c_out,
                        c_out,
                        3,
                        1,
                        1,
                        &mut rng,
                        &policy,
                        qw,
                        qa,
                    )?));
                    ops.push(Op::Norm(BatchNorm::new(&format!("{tag}.bn2"), c_out)?));
                    let proj = if stride != 1 || c_in != c_out {
                        Some((
                            Conv2d::new(
                                &format!("{tag}.proj"),
                                c_in,
                                c_out,
                                1,
                                stride,
                                0,
                                &mut rng,
                                &policy,
                                qw,
                                qa,
                            )?,
                            BatchNorm::new(&format!("{tag}.projbn"), c_out)?,
                        ))
                    } else {
                        None
                    };
                    ops.push(Op::AddSaved { proj });
                    ops.push(Op::Relu);
                    c_in = c_out;
                }
            }
            ops.push(Op::AvgPool { kernel: 8, stride: 8 });
            ops.push(Op::Flatten);
            ops.push(Op::Linear(Linear::new(
                "fc", 64, 10, &mut rng, &policy, qw && qfl, qa && qfl,
            )?));
        }
    }
    Ok(Model { arch, policy, ops })
}
