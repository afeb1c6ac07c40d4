//! Elementwise ops, broadcasting, reshapes, and 2-D matmul.

use super::{numel_of, op_output, Tensor};
use crate::error::{Error, Result};

/// Row-major single-threaded sgemm: `C = alpha * A * B + beta * C` with
/// explicit strides. The only unsafe block in the crate; callers are
/// checked against buffer bounds in debug builds.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(required_len(m, k, rsa, csa) <= a.len());
    debug_assert!(required_len(k, n, rsb, csb) <= b.len());
    debug_assert!(required_len(m, n, rsc, csc) <= c.len());
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn required_len(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    last as usize + 1
}

/// Shape both operands broadcast to (trailing-dimension alignment), or a
/// shape error naming `op`.
pub(crate) fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for d in 0..rank {
        let ad = dim_from_end(a, rank - 1 - d, rank);
        let bd = dim_from_end(b, rank - 1 - d, rank);
        out[d] = if ad == bd || bd == 1 {
            ad
        } else if ad == 1 {
            bd
        } else {
            return Err(Error::shape(op, a, b));
        };
    }
    Ok(out)
}

fn dim_from_end(shape: &[usize], pos: usize, rank: usize) -> usize {
    // `pos` counted with rank-padding: leading missing dims are 1.
    let pad = rank - shape.len();
    let d = rank - 1 - pos;
    if d < pad {
        1
    } else {
        shape[d - pad]
    }
}

/// Strides into `shape` when broadcast up to `out_shape` (0 where the
/// dimension is broadcast).
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<isize> {
    let rank = out_shape.len();
    let pad = rank - shape.len();
    let mut strides = vec![0isize; rank];
    let mut acc = 1isize;
    for d in (0..shape.len()).rev() {
        strides[pad + d] = if shape[d] == 1 { 0 } else { acc };
        acc *= shape[d] as isize;
    }
    strides
}

/// Walks the broadcast output in row-major order, calling
/// `f(out_index, a_offset, b_offset)` for every element.
fn for_each_broadcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel_of(out_shape);
    if total == 0 {
        return;
    }
    let rank = out_shape.len();
    let a_strides = broadcast_strides(a_shape, out_shape);
    let b_strides = broadcast_strides(b_shape, out_shape);
    let mut idx = vec![0usize; rank];
    let (mut a_off, mut b_off) = (0isize, 0isize);
    for i in 0..total {
        f(i, a_off as usize, b_off as usize);
        for d in (0..rank).rev() {
            idx[d] += 1;
            a_off += a_strides[d];
            b_off += b_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            a_off -= a_strides[d] * out_shape[d] as isize;
            b_off -= b_strides[d] * out_shape[d] as isize;
        }
    }
}

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

fn binary_broadcast(op: &'static str, kind: BinKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let out_shape = broadcast_shapes(op, a.shape(), b.shape())?;
    let total = numel_of(&out_shape);
    let mut data = vec![0.0f32; total];
    {
        let (ad, bd) = (a.data(), b.data());
        if a.shape() == b.shape() {
            for ((o, x), y) in data.iter_mut().zip(ad.iter()).zip(bd.iter()) {
                *o = apply(kind, *x, *y);
            }
        } else {
            for_each_broadcast(&out_shape, a.shape(), b.shape(), |i, ao, bo| {
                data[i] = apply(kind, ad[ao], bd[bo]);
            });
        }
    }
    let (a2, b2) = (a.clone(), b.clone());
    let (a_shape, b_shape) = (a.shape().to_vec(), b.shape().to_vec());
    let shape = out_shape.clone();
    Ok(op_output(
        vec![a.clone(), b.clone()],
        data,
        out_shape,
        move |up| {
            let mut ga = vec![0.0f32; numel_of(&a_shape)];
            let mut gb = vec![0.0f32; numel_of(&b_shape)];
            match kind {
                BinKind::Add => {
                    for_each_broadcast(&shape, &a_shape, &b_shape, |i, ao, bo| {
                        ga[ao] += up[i];
                        gb[bo] += up[i];
                    });
                }
                BinKind::Sub => {
                    for_each_broadcast(&shape, &a_shape, &b_shape, |i, ao, bo| {
                        ga[ao] += up[i];
                        gb[bo] -= up[i];
                    });
                }
                BinKind::Mul => {
                    let (ad, bd) = (a2.data(), b2.data());
                    for_each_broadcast(&shape, &a_shape, &b_shape, |i, ao, bo| {
                        ga[ao] += up[i] * bd[bo];
                        gb[bo] += up[i] * ad[ao];
                    });
                }
            }
            Ok(vec![Some(ga), Some(gb)])
        },
    ))
}

fn apply(kind: BinKind, x: f32, y: f32) -> f32 {
    match kind {
        BinKind::Add => x + y,
        BinKind::Sub => x - y,
        BinKind::Mul => x * y,
    }
}

impl Tensor {
    /// Elementwise sum with trailing-dimension broadcasting.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary_broadcast("add", BinKind::Add, self, other)
    }

    /// Elementwise difference with trailing-dimension broadcasting.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary_broadcast("sub", BinKind::Sub, self, other)
    }

    /// Elementwise product with trailing-dimension broadcasting.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary_broadcast("mul", BinKind::Mul, self, other)
    }

    /// Multiplies every element by a constant.
    pub fn scale(&self, c: f32) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        op_output(
            vec![self.clone()],
            data,
            self.shape().to_vec(),
            move |up| Ok(vec![Some(up.iter().map(|g| g * c).collect())]),
        )
    }

    /// `max(0, x)`; the subgradient at exactly zero is zero.
    pub fn relu(&self) -> Result<Tensor> {
        let data: Vec<f32> = self.data().iter().map(|v| v.max(0.0)).collect();
        let x = self.clone();
        Ok(op_output(
            vec![self.clone()],
            data,
            self.shape().to_vec(),
            move |up| {
                let xd = x.data();
                Ok(vec![Some(
                    up.iter()
                        .zip(xd.iter())
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect(),
                )])
            },
        ))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self) -> Result<Tensor> {
        let s: f32 = self.data().iter().sum();
        let n = self.numel();
        Ok(op_output(vec![self.clone()], vec![s], vec![1], move |up| {
            Ok(vec![Some(vec![up[0]; n])])
        }))
    }

    /// Mean of all elements as a scalar.
    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(Error::contract("mean", "empty tensor"));
        }
        let s: f32 = self.data().iter().sum::<f32>() / n as f32;
        Ok(op_output(vec![self.clone()], vec![s], vec![1], move |up| {
            Ok(vec![Some(vec![up[0] / n as f32; n])])
        }))
    }

    /// Same data reinterpreted under a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(op_output(
            vec![self.clone()],
            self.to_vec(),
            shape.to_vec(),
            move |up| Ok(vec![Some(up.to_vec())]),
        ))
    }

    /// Collapses all dimensions after the first: `[N, ...] -> [N, rest]`.
    pub fn flatten(&self) -> Result<Tensor> {
        if self.shape().is_empty() {
            return Err(Error::contract("flatten", "rank-0 tensor"));
        }
        let n = self.shape()[0];
        let rest = self.numel() / n.max(1);
        self.reshape(&[n, rest])
    }

    /// 2-D matrix product `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a_shape, b_shape) = (self.shape(), other.shape());
        if a_shape.len() != 2 || b_shape.len() != 2 || a_shape[1] != b_shape[0] {
            return Err(Error::shape("matmul", a_shape, b_shape));
        }
        let (m, k, n) = (a_shape[0], a_shape[1], b_shape[1]);
        let mut data = vec![0.0f32; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            &self.data(),
            k as isize,
            1,
            &other.data(),
            n as isize,
            1,
            0.0,
            &mut data,
            n as isize,
            1,
        );
        let (a, b) = (self.clone(), other.clone());
        Ok(op_output(
            vec![self.clone(), other.clone()],
            data,
            vec![m, n],
            move |up| {
                // dA = g . B^T ; dB = A^T . g (transposes via swapped strides)
                let mut ga = vec![0.0f32; m * k];
                gemm(
                    m,
                    n,
                    k,
                    1.0,
                    up,
                    n as isize,
                    1,
                    &b.data(),
                    1,
                    n as isize,
                    0.0,
                    &mut ga,
                    k as isize,
                    1,
                );
                let mut gb = vec![0.0f32; k * n];
                gemm(
                    k,
                    m,
                    n,
                    1.0,
                    &a.data(),
                    1,
                    k as isize,
                    up,
                    n as isize,
                    1,
                    0.0,
                    &mut gb,
                    n as isize,
                    1,
                );
                Ok(vec![Some(ga), Some(gb)])
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives_and_zero() {
        let x = Tensor::from_vec(vec![-1.0, 0.0, 2.0], &[3]).unwrap();
        assert_eq!(x.relu().unwrap().to_vec(), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_identity_is_identity() {
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let eye = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        assert_eq!(a.matmul(&eye).unwrap().to_vec(), a.to_vec());
    }

    #[test]
    fn add_broadcasts_bias_row() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::from_vec(vec![10.0, 20.0], &[2]).unwrap();
        assert_eq!(x.add(&b).unwrap().to_vec(), vec![11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn mul_broadcasts_per_channel() {
        // [2, 2, 1, 1] weights times [2, 1, 1, 1] channel scales
        let w = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2, 1, 1]).unwrap();
        let s = Tensor::from_vec(vec![10.0, 100.0], &[2, 1, 1, 1]).unwrap();
        assert_eq!(w.mul(&s).unwrap().to_vec(), vec![10.0, 20.0, 300.0, 400.0]);
    }

    #[test]
    fn incompatible_shapes_error() {
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let b = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let loss = x.mul(&x).unwrap().sum().unwrap();
        assert_eq!(loss.item(), 5.0);
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn broadcast_add_gradient_reduces() {
        let x = Tensor::param(vec![0.0; 4], &[2, 2]).unwrap();
        let b = Tensor::param(vec![0.0; 2], &[2]).unwrap();
        let loss = x.add(&b).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0]); // summed over rows
    }

    #[test]
    fn scale_by_constant() {
        let x = Tensor::param(vec![1.0, -2.0], &[2]).unwrap();
        let y = x.scale(0.5);
        assert_eq!(y.to_vec(), vec![0.5, -1.0]);
        y.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn reshape_roundtrips_gradient() {
        let x = Tensor::param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let y = x.reshape(&[4]).unwrap();
        assert_eq!(y.shape(), &[4]);
        y.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
        assert!(x.reshape(&[3]).is_err());
    }
}
