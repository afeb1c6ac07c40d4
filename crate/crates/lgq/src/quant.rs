//! Linear symmetric fake quantization with a learned scaling factor.
//!
//! A [`QuantizerState`] maps reals to a k-bit integer grid via
//! `clamp(round(x/α), q_min, q_max)` and back via multiplication by α.
//! Weights use signed grids (per conv output channel or per layer);
//! activations use unsigned per-layer grids. During training the hard
//! round can be replaced by the arctangent soft round, with the backward
//! rule chosen by the attached estimator; evaluation and export always
//! use the hard round.

use crate::error::{Error, Result};
use crate::estimator::{asr_forward_one, quant_backward, EstimatorConfig, EstimatorKind, QuantContext};
use crate::scale::SsgState;
use crate::tensor::{custom_grad, Tensor};

pub const ALPHA_FLOOR: f32 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    /// One α for the whole tensor (fully connected weights, activations).
    PerLayer,
    /// One α per output channel (convolution weights, axis 0).
    PerChannel,
}

/// Everything needed to quantize one tensor: grid scales, bit width,
/// signedness, granularity, the training-time estimator, and (when the
/// scale is learned by error search) per-channel search state.
#[derive(Clone, Debug)]
pub struct QuantizerState {
    pub alpha: Vec<f32>,
    pub bit_width: u8,
    pub signed: bool,
    pub granularity: Granularity,
    pub estimator: EstimatorConfig,
    pub ssg: Option<Vec<SsgState>>,
}

impl QuantizerState {
    fn new(
        bit_width: u8,
        signed: bool,
        granularity: Granularity,
        estimator: EstimatorConfig,
        channels: usize,
    ) -> Result<QuantizerState> {
        if !(2..=8).contains(&bit_width) {
            return Err(Error::domain(
                "quantizer",
                format!("bit width {bit_width} outside [2, 8]"),
            ));
        }
        if channels == 0 {
            return Err(Error::domain("quantizer", "zero channels"));
        }
        Ok(QuantizerState {
            alpha: vec![1.0; channels],
            bit_width,
            signed,
            granularity,
            estimator,
            ssg: None,
        })
    }

    pub fn per_layer(bit_width: u8, signed: bool, estimator: EstimatorConfig) -> Result<Self> {
        Self::new(bit_width, signed, Granularity::PerLayer, estimator, 1)
    }

    pub fn per_channel(
        bit_width: u8,
        signed: bool,
        estimator: EstimatorConfig,
        channels: usize,
    ) -> Result<Self> {
        Self::new(bit_width, signed, Granularity::PerChannel, estimator, channels)
    }

    /// Attaches scale-search state (one per α slot).
    pub fn enable_ssg(&mut self, iter_target: usize) {
        self.ssg = Some(vec![SsgState::new(iter_target); self.alpha.len()]);
    }

    pub fn channels(&self) -> usize {
        self.alpha.len()
    }

    pub fn q_min(&self) -> i32 {
        if self.signed {
            -(1 << (self.bit_width - 1))
        } else {
            0
        }
    }

    pub fn q_max(&self) -> i32 {
        if self.signed {
            (1 << (self.bit_width - 1)) - 1
        } else {
            (1 << self.bit_width) - 1
        }
    }

    fn check_alpha(&self) -> Result<()> {
        if let Some(a) = self.alpha.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return Err(Error::domain(
                "quantizer",
                format!("scale {a} must be positive and finite"),
            ));
        }
        Ok(())
    }

    /// Elements covered by each α slot when `total` values are split
    /// evenly across channels (channel-major layout).
    fn chunk_len(&self, total: usize) -> Result<usize> {
        let c = self.channels();
        if total == 0 || total % c != 0 {
            return Err(Error::contract(
                "quantizer",
                format!("{total} values do not split into {c} channels"),
            ));
        }
        Ok(total / c)
    }

    /// Integer codes `clamp(round(x/α), q_min, q_max)`; rounding is
    /// half-away-from-zero. The division is computed as `x · (1/α)` so the
    /// codes match [`QuantizerState::fake_quantize`] bit for bit.
    pub fn quantize_codes(&self, data: &[f32]) -> Result<Vec<i32>> {
        self.check_alpha()?;
        let chunk = self.chunk_len(data.len())?;
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::domain("quantize_codes", "NaN input"));
        }
        let (lo, hi) = (self.q_min(), self.q_max());
        let mut codes = vec![0i32; data.len()];
        for (c, &alpha) in self.alpha.iter().enumerate() {
            let inv = 1.0 / alpha;
            for i in c * chunk..(c + 1) * chunk {
                codes[i] = ((data[i] * inv).round() as i32).clamp(lo, hi);
            }
        }
        Ok(codes)
    }

    /// Reconstruction `codes · α` (broadcast per granularity).
    pub fn dequantize(&self, codes: &[i32]) -> Result<Vec<f32>> {
        self.check_alpha()?;
        let chunk = self.chunk_len(codes.len())?;
        let (lo, hi) = (self.q_min(), self.q_max());
        if let Some(bad) = codes.iter().find(|c| **c < lo || **c > hi) {
            return Err(Error::domain(
                "dequantize",
                format!("code {bad} outside [{lo}, {hi}]"),
            ));
        }
        let mut out = vec![0.0f32; codes.len()];
        for (c, &alpha) in self.alpha.iter().enumerate() {
            for i in c * chunk..(c + 1) * chunk {
                out[i] = codes[i] as f32 * alpha;
            }
        }
        Ok(out)
    }

    /// Quantize-then-dequantize on raw values (the evaluation/export path).
    pub fn fake_quantize_values(&self, data: &[f32]) -> Result<Vec<f32>> {
        let codes = self.quantize_codes(data)?;
        self.dequantize(&codes)
    }

    /// Sets α from the data: `max|x| / q_max` per channel slice, floored
    /// at a tiny positive value so all-zero slices stay valid.
    pub fn init_scale(&mut self, data: &[f32]) -> Result<Vec<f32>> {
        let chunk = self.chunk_len(data.len())?;
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::domain("init_scale", "NaN input"));
        }
        let q_max = self.q_max() as f32;
        for c in 0..self.channels() {
            let max_abs = data[c * chunk..(c + 1) * chunk]
                .iter()
                .fold(0.0f32, |m, v| m.max(v.abs()));
            self.alpha[c] = (max_abs / q_max).max(ALPHA_FLOOR);
        }
        Ok(self.alpha.clone())
    }

    /// α (and 1/α) as a constant tensor broadcastable against `shape`.
    fn alpha_tensors(&self, shape: &[usize]) -> Result<(Tensor, Tensor)> {
        let bshape: Vec<usize> = match self.granularity {
            Granularity::PerLayer => vec![1],
            Granularity::PerChannel => {
                if shape.is_empty() || shape[0] != self.channels() {
                    return Err(Error::contract(
                        "fake_quantize",
                        format!(
                            "per-channel quantizer with {} scales on shape {shape:?}",
                            self.channels()
                        ),
                    ));
                }
                let mut s = vec![1; shape.len()];
                s[0] = self.channels();
                s
            }
        };
        let alpha = Tensor::from_vec(self.alpha.clone(), &bshape)?;
        let inv = Tensor::from_vec(self.alpha.iter().map(|a| 1.0 / a).collect(), &bshape)?;
        Ok((alpha, inv))
    }

    /// Fake quantization as a graph op: `y = r(x/α) · α` where `r` is the
    /// round+clamp node. In training mode the forward round is the hard
    /// round for STE and the soft round otherwise, and the node's backward
    /// rule is the estimator's; in eval mode the forward is always the
    /// hard round. The scaling in and out of the node is ordinary
    /// differentiable arithmetic, so gradients w.r.t. x chain through it.
    pub fn fake_quantize(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        self.check_alpha()?;
        let (alpha_t, inv_t) = self.alpha_tensors(x.shape())?;
        self.chunk_len(x.numel())?;
        let v = x.mul(&inv_t)?;
        let (lo, hi) = (self.q_min() as f32, self.q_max() as f32);
        let soft = training && self.estimator.kind != EstimatorKind::Ste;
        let lambda = self.estimator.lambda;
        let kind = self.estimator.kind;
        let shape = x.shape().to_vec();
        let r = custom_grad(
            &[&v],
            move |ins| {
                let vv = ins[0];
                if vv.iter().any(|v| v.is_nan()) {
                    return Err(Error::domain("fake_quantize", "NaN input"));
                }
                let mut data = vec![0.0f32; vv.len()];
                let mut in_range = vec![false; vv.len()];
                for (i, &val) in vv.iter().enumerate() {
                    let pre = if soft {
                        asr_forward_one(val, lambda)
                    } else {
                        val.round()
                    };
                    data[i] = pre.clamp(lo, hi);
                    in_range[i] = val >= lo && val <= hi;
                }
                let ctx = QuantContext {
                    v: vv.to_vec(),
                    lambda,
                    in_range,
                };
                Ok((data, shape, ctx))
            },
            move |up, ctx| {
                let g = quant_backward(up, ctx, kind)
                    .expect("context built with matching lengths");
                vec![Some(g)]
            },
        )?;
        r.mul(&alpha_t)
    }
}
