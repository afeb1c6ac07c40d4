//! Batch normalization and the softmax cross-entropy loss.

use super::{op_output, Tensor};
use crate::error::{Error, Result};

/// Views `[N, C]` or `[N, C, H, W]` as `(outer, channels, inner)`.
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        2 => Ok((shape[0], shape[1], 1)),
        4 => Ok((shape[0], shape[1], shape[2] * shape[3])),
        _ => Err(Error::contract(
            "batchnorm",
            format!("expected rank 2 or 4, got shape {shape:?}"),
        )),
    }
}

impl Tensor {
    /// Per-channel batch normalization.
    ///
    /// Training mode normalizes with batch statistics and folds them into
    /// `running_mean`/`running_var` in place (unbiased variance, standard
    /// exponential update). Eval mode normalizes with the running values.
    /// Gamma and beta stay float regardless of any surrounding
    /// quantization.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        running_mean: &Tensor,
        running_var: &Tensor,
        training: bool,
        momentum: f32,
        eps: f32,
    ) -> Result<Tensor> {
        let (outer, c, inner) = channel_layout(self.shape())?;
        for (name, t) in [
            ("gamma", gamma),
            ("beta", beta),
            ("running_mean", running_mean),
            ("running_var", running_var),
        ] {
            if t.numel() != c {
                return Err(Error::contract(
                    "batchnorm",
                    format!("{name} has {} values for {c} channels", t.numel()),
                ));
            }
        }
        let m = outer * inner;
        if training && m < 2 {
            return Err(Error::contract(
                "batchnorm",
                "training mode needs at least 2 values per channel",
            ));
        }

        let (mean, var) = if training {
            let xd = self.data();
            let mut mean = vec![0.0f32; c];
            let mut var = vec![0.0f32; c];
            for ch in 0..c {
                let mut acc = 0.0f64;
                for o in 0..outer {
                    let base = (o * c + ch) * inner;
                    for i in 0..inner {
                        acc += xd[base + i] as f64;
                    }
                }
                let mu = acc / m as f64;
                let mut sq = 0.0f64;
                for o in 0..outer {
                    let base = (o * c + ch) * inner;
                    for i in 0..inner {
                        let d = xd[base + i] as f64 - mu;
                        sq += d * d;
                    }
                }
                mean[ch] = mu as f32;
                var[ch] = (sq / m as f64) as f32;
            }
            // Running stats use the unbiased variance estimate.
            let unbias = m as f32 / (m as f32 - 1.0);
            running_mean.update_data(|rm| {
                for (r, b) in rm.iter_mut().zip(&mean) {
                    *r = (1.0 - momentum) * *r + momentum * b;
                }
            });
            running_var.update_data(|rv| {
                for (r, b) in rv.iter_mut().zip(&var) {
                    *r = (1.0 - momentum) * *r + momentum * b * unbias;
                }
            });
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };

        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0f32; self.numel()];
        let mut out = vec![0.0f32; self.numel()];
        {
            let (xd, gd, bd) = (self.data(), gamma.data(), beta.data());
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    for i in 0..inner {
                        let h = (xd[base + i] - mean[ch]) * inv_std[ch];
                        xhat[base + i] = h;
                        out[base + i] = gd[ch] * h + bd[ch];
                    }
                }
            }
        }

        let g = gamma.clone();
        let shape = self.shape().to_vec();
        Ok(op_output(
            vec![self.clone(), gamma.clone(), beta.clone()],
            out,
            shape,
            move |up| {
                let gd = g.data();
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for i in 0..inner {
                            dgamma[ch] += up[base + i] * xhat[base + i];
                            dbeta[ch] += up[base + i];
                        }
                    }
                }
                let mut dx = vec![0.0f32; xhat.len()];
                if training {
                    // dL/dx = gamma * inv_std * (g - mean(g) - xhat * mean(g*xhat))
                    let inv_m = 1.0 / m as f32;
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            for i in 0..inner {
                                dx[base + i] = gd[ch]
                                    * inv_std[ch]
                                    * (up[base + i]
                                        - dbeta[ch] * inv_m
                                        - xhat[base + i] * dgamma[ch] * inv_m);
                            }
                        }
                    }
                } else {
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            for i in 0..inner {
                                dx[base + i] = gd[ch] * inv_std[ch] * up[base + i];
                            }
                        }
                    }
                }
                Ok(vec![Some(dx), Some(dgamma), Some(dbeta)])
            },
        ))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class labels.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::contract(
                "softmax_cross_entropy",
                format!("logits must be [N, K], got {s:?}"),
            ));
        }
        let (n, k) = (s[0], s[1]);
        if labels.len() != n {
            return Err(Error::contract(
                "softmax_cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::domain(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }

        let mut probs = vec![0.0f32; n * k];
        let mut loss = 0.0f64;
        {
            let xd = self.data();
            for r in 0..n {
                let row = &xd[r * k..(r + 1) * k];
                let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut denom = 0.0f32;
                for (p, v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                    *p = (v - max).exp();
                    denom += *p;
                }
                for p in &mut probs[r * k..(r + 1) * k] {
                    *p /= denom;
                }
                // NaN-preserving clamp: `f64::max` would swallow a NaN
                // probability and report a finite loss for a poisoned network
                let p = probs[r * k + labels[r]] as f64;
                loss -= if p < f64::MIN_POSITIVE { f64::MIN_POSITIVE } else { p }.ln();
            }
        }
        let labels = labels.to_vec();
        Ok(op_output(
            vec![self.clone()],
            vec![(loss / n as f64) as f32],
            vec![1],
            move |up| {
                let scale = up[0] / n as f32;
                let mut dx = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * k + l] -= 1.0;
                }
                for v in &mut dx {
                    *v *= scale;
                }
                Ok(vec![Some(dx)])
            },
        ))
    }
}
