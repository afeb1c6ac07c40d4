//! Backward rules for the rounding step.
//!
//! Three estimators are supported: plain straight-through (STE), the
//! arctangent soft round (ASR) whose forward pass replaces rounding during
//! training, and ASR with a discretization-error correction (MDE) that
//! scales gradients by how far each value sits from its soft-rounded
//! image. All operate on the pre-round scaled values `v = x / α`.

use crate::error::{Error, Result};
use std::f32::consts::{FRAC_PI_2, PI};

/// Which backward rule a quantizer uses for its rounding step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimatorKind {
    /// Hard round forward, gradient passed through unchanged.
    Ste,
    /// Arctangent soft round forward and its exact derivative backward.
    Asr,
    /// ASR plus the discretization-error gradient correction.
    AsrMde,
}

/// λ growth over training: `λ(epoch) = min(initial + growth·epoch, cap)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaSchedule {
    pub initial: f32,
    pub growth: f32,
    pub cap: f32,
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        LambdaSchedule {
            initial: 5.0,
            growth: 1.0,
            cap: 50.0,
        }
    }
}

/// Estimator choice plus the current sharpness λ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    pub lambda: f32,
    pub schedule: LambdaSchedule,
}

impl EstimatorConfig {
    pub fn new(kind: EstimatorKind, schedule: LambdaSchedule) -> Result<EstimatorConfig> {
        if schedule.initial <= 0.0 || schedule.cap <= 0.0 {
            return Err(Error::domain("estimator", "lambda must be positive"));
        }
        if schedule.initial > schedule.cap {
            return Err(Error::domain(
                "estimator",
                format!(
                    "lambda initial {} exceeds cap {}",
                    schedule.initial, schedule.cap
                ),
            ));
        }
        Ok(EstimatorConfig {
            kind,
            lambda: schedule.initial,
            schedule,
        })
    }

    pub fn ste() -> EstimatorConfig {
        EstimatorConfig::new(EstimatorKind::Ste, LambdaSchedule::default())
            .expect("default schedule is valid")
    }

    /// Moves λ to its scheduled value for `epoch`.
    pub fn set_epoch(&mut self, epoch: usize) {
        self.lambda = lambda_at(epoch, &self.schedule);
    }
}

/// λ at a given epoch under the schedule.
pub fn lambda_at(epoch: usize, s: &LambdaSchedule) -> f32 {
    (s.initial + s.growth * epoch as f32).min(s.cap)
}

/// Soft round of one value: `floor(x) + (atan(λ(x − floor(x) − ½)) + π/2)/π`.
///
/// Strictly increasing on each `[n, n+1)`, fixes every half-integer
/// exactly, and approaches hard rounding as λ grows.
pub fn asr_forward_one(x: f32, lambda: f32) -> f32 {
    let xf = x.floor();
    xf + ((lambda * (x - xf - 0.5)).atan() + FRAC_PI_2) / PI
}

/// Derivative of [`asr_forward_one`] w.r.t. x: `λ/(π(1+m²))`,
/// `m = λ(x − floor(x) − ½)`. Always positive, peaking at λ/π on
/// half-integers; the floor term is treated as constant.
pub fn asr_backward_one(x: f32, lambda: f32) -> f32 {
    let m = lambda * (x - x.floor() - 0.5);
    lambda / (PI * (1.0 + m * m))
}

fn check_lambda(op: &'static str, lambda: f32) -> Result<()> {
    if lambda <= 0.0 || !lambda.is_finite() {
        return Err(Error::domain(op, format!("lambda {lambda} must be positive")));
    }
    Ok(())
}

/// Elementwise soft round.
pub fn asr_forward(x: &[f32], lambda: f32) -> Result<Vec<f32>> {
    check_lambda("asr_forward", lambda)?;
    Ok(x.iter().map(|&v| asr_forward_one(v, lambda)).collect())
}

/// Elementwise soft-round derivative.
pub fn asr_backward(x: &[f32], lambda: f32) -> Result<Vec<f32>> {
    check_lambda("asr_backward", lambda)?;
    Ok(x.iter().map(|&v| asr_backward_one(v, lambda)).collect())
}

/// Discretization-error correction: `g·(1 + tanh(g)·(x − x_soft))`.
///
/// The multiplier stays positive while `|x − x_soft| < 1`, so the
/// correction rescales gradients without flipping their sign.
pub fn mde_adjust(g_asr: &[f32], x: &[f32], x_asr: &[f32]) -> Result<Vec<f32>> {
    if g_asr.len() != x.len() || x.len() != x_asr.len() {
        return Err(Error::shape(
            "mde_adjust",
            &[g_asr.len(), x.len()],
            &[x_asr.len()],
        ));
    }
    Ok(g_asr
        .iter()
        .zip(x.iter().zip(x_asr))
        .map(|(&g, (&xv, &xs))| g * (1.0 + g.tanh() * (xv - xs)))
        .collect())
}

/// Forward-time context saved by the rounding node for its backward rule.
pub struct QuantContext {
    /// Pre-round scaled values x/α.
    pub v: Vec<f32>,
    /// λ at the time of the forward pass.
    pub lambda: f32,
    /// True where q_min ≤ v ≤ q_max; gradients outside are zero.
    pub in_range: Vec<bool>,
}

/// Gradient through the round+clamp step for the configured estimator.
///
/// STE passes the upstream gradient through, ASR multiplies by the soft
/// round's derivative, and ASR+MDE additionally applies [`mde_adjust`]
/// with the soft-round residual. Saturated positions get zero.
pub fn quant_backward(
    upstream: &[f32],
    ctx: &QuantContext,
    kind: EstimatorKind,
) -> Result<Vec<f32>> {
    if ctx.v.len() != upstream.len() || ctx.in_range.len() != upstream.len() {
        return Err(Error::contract(
            "quant_backward",
            format!(
                "context of {} values and {} mask bits for {} upstream gradients",
                ctx.v.len(),
                ctx.in_range.len(),
                upstream.len()
            ),
        ));
    }
    let mut out = vec![0.0f32; upstream.len()];
    match kind {
        EstimatorKind::Ste => {
            for i in 0..out.len() {
                if ctx.in_range[i] {
                    out[i] = upstream[i];
                }
            }
        }
        EstimatorKind::Asr => {
            for i in 0..out.len() {
                if ctx.in_range[i] {
                    out[i] = upstream[i] * asr_backward_one(ctx.v[i], ctx.lambda);
                }
            }
        }
        EstimatorKind::AsrMde => {
            for i in 0..out.len() {
                if ctx.in_range[i] {
                    let g = upstream[i] * asr_backward_one(ctx.v[i], ctx.lambda);
                    let err = ctx.v[i] - asr_forward_one(ctx.v[i], ctx.lambda);
                    out[i] = g * (1.0 + g.tanh() * err);
                }
            }
        }
    }
    Ok(out)
}
