//! Finite-difference oracle for every differentiable op.
//!
//! Each op is re-implemented here as a plain f64 loop (no shared code with
//! the library), a scalar loss is formed from its output, and central
//! differences of that reference are compared elementwise against the
//! library's reverse-mode gradients. Elementwise/structural ops are held
//! to 1e-2 relative error, smooth ops (matmul, conv, softmax-CE) to 1e-4,
//! and a two-layer MLP composite to 1e-3.

use lgq::tensor::Tensor;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const H: f64 = 1e-3;

fn rand_vec(rng: &mut StdRng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Central finite differences of `f` at `x`.
fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + H;
        let hi = f(&probe);
        probe[i] = x[i] - H;
        let lo = f(&probe);
        probe[i] = x[i];
        g[i] = (hi - lo) / (2.0 * H);
    }
    g
}

fn assert_close(auto: &[f32], fd: &[f64], tol: f64, ctx: &str) {
    assert_eq!(auto.len(), fd.len(), "{ctx}: gradient length");
    for (i, (&a, &f)) in auto.iter().zip(fd).enumerate() {
        let rel = (a as f64 - f).abs() / (f.abs() + 1e-6);
        assert!(
            rel < tol,
            "{ctx}[{i}]: autodiff {a} vs finite diff {f} (rel {rel:.2e} >= {tol:.0e})"
        );
    }
}

/// loss = sum(out * w) for a fixed random weighting w.
fn weighted_loss(out: &Tensor, w: &[f32]) -> Tensor {
    let wt = Tensor::from_vec(w.to_vec(), out.shape()).unwrap();
    out.mul(&wt).unwrap().sum().unwrap()
}

fn dot(out: &[f64], w: &[f32]) -> f64 {
    out.iter().zip(w).map(|(o, &c)| o * c as f64).sum()
}

// ---- independent f64 references -------------------------------------------

fn ref_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                c[i * n + j] += a[i * k + t] * b[t * n + j];
            }
        }
    }
    c
}

#[allow(clippy::too_many_arguments)]
fn ref_conv2d(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let [n, ci, h, wd] = xs;
    let [co, _, kh, kw] = ws;
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * ho * wo];
    for b in 0..n {
        for oc in 0..co {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                let ih = (oh * stride + i) as isize - pad as isize;
                                let iw = (ow * stride + j) as isize - pad as isize;
                                if ih < 0 || ih >= h as isize || iw < 0 || iw >= wd as isize {
                                    continue;
                                }
                                acc += x[((b * ci + ic) * h + ih as usize) * wd + iw as usize]
                                    * w[((oc * ci + ic) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((b * co + oc) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    out
}

fn ref_avgpool(x: &[f64], xs: [usize; 4], kernel: usize, stride: usize) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let ho = (h - kernel) / stride + 1;
    let wo = (w - kernel) / stride + 1;
    let mut out = vec![0.0; n * c * ho * wo];
    for nc in 0..n * c {
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = 0.0;
                for i in 0..kernel {
                    for j in 0..kernel {
                        acc += x[nc * h * w + (oh * stride + i) * w + ow * stride + j];
                    }
                }
                out[nc * ho * wo + oh * wo + ow] = acc / (kernel * kernel) as f64;
            }
        }
    }
    out
}

fn ref_batchnorm(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    outer: usize,
    c: usize,
    inner: usize,
    eps: f64,
) -> Vec<f64> {
    let m = (outer * inner) as f64;
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let mut mean = 0.0;
        for o in 0..outer {
            for i in 0..inner {
                mean += x[(o * c + ch) * inner + i];
            }
        }
        mean /= m;
        let mut var = 0.0;
        for o in 0..outer {
            for i in 0..inner {
                let d = x[(o * c + ch) * inner + i] - mean;
                var += d * d;
            }
        }
        var /= m;
        let inv = 1.0 / (var + eps).sqrt();
        for o in 0..outer {
            for i in 0..inner {
                let idx = (o * c + ch) * inner + i;
                out[idx] = gamma[ch] * (x[idx] - mean) * inv + beta[ch];
            }
        }
    }
    out
}

fn ref_softmax_ce(x: &[f64], labels: &[usize], n: usize, k: usize) -> f64 {
    let mut loss = 0.0;
    for r in 0..n {
        let row = &x[r * k..(r + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[labels[r]];
    }
    loss / n as f64
}

// ---- per-op checks ---------------------------------------------------------

#[test]
fn elementwise_binary_ops_match_fd() {
    let mut rng = StdRng::seed_from_u64(11);
    for iter in 0..100 {
        let n = rng.gen_range(1..=12);
        let a = Tensor::param(rand_vec(&mut rng, n, -2.0, 2.0), &[n]).unwrap();
        let b = Tensor::param(rand_vec(&mut rng, n, -2.0, 2.0), &[n]).unwrap();
        let w = rand_vec(&mut rng, n, -1.0, 1.0);
        for op in 0..3 {
            a.zero_grad();
            b.zero_grad();
            let out = match op {
                0 => a.add(&b).unwrap(),
                1 => a.sub(&b).unwrap(),
                _ => a.mul(&b).unwrap(),
            };
            weighted_loss(&out, &w).backward().unwrap();
            let (av, bv) = (to_f64(&a.to_vec()), to_f64(&b.to_vec()));
            let f = |xa: &[f64], xb: &[f64]| -> f64 {
                let o: Vec<f64> = xa
                    .iter()
                    .zip(xb)
                    .map(|(p, q)| match op {
                        0 => p + q,
                        1 => p - q,
                        _ => p * q,
                    })
                    .collect();
                dot(&o, &w)
            };
            let fda = central_diff(|xa| f(xa, &bv), &av);
            let fdb = central_diff(|xb| f(&av, xb), &bv);
            assert_close(&a.grad().unwrap(), &fda, 1e-2, &format!("binop{op} a iter{iter}"));
            assert_close(&b.grad().unwrap(), &fdb, 1e-2, &format!("binop{op} b iter{iter}"));
        }
    }
}

#[test]
fn broadcast_add_mul_match_fd() {
    let mut rng = StdRng::seed_from_u64(12);
    for iter in 0..100 {
        let (m, n) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let a = Tensor::param(rand_vec(&mut rng, m * n, -2.0, 2.0), &[m, n]).unwrap();
        let b = Tensor::param(rand_vec(&mut rng, n, -2.0, 2.0), &[n]).unwrap();
        let w = rand_vec(&mut rng, m * n, -1.0, 1.0);
        for op in 0..2 {
            a.zero_grad();
            b.zero_grad();
            let out = if op == 0 { a.add(&b) } else { a.mul(&b) }.unwrap();
            weighted_loss(&out, &w).backward().unwrap();
            let (av, bv) = (to_f64(&a.to_vec()), to_f64(&b.to_vec()));
            let f = |xa: &[f64], xb: &[f64]| -> f64 {
                let mut o = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        o[i * n + j] = if op == 0 {
                            xa[i * n + j] + xb[j]
                        } else {
                            xa[i * n + j] * xb[j]
                        };
                    }
                }
                dot(&o, &w)
            };
            assert_close(
                &a.grad().unwrap(),
                &central_diff(|x| f(x, &bv), &av),
                1e-2,
                &format!("bcast{op} a iter{iter}"),
            );
            assert_close(
                &b.grad().unwrap(),
                &central_diff(|x| f(&av, x), &bv),
                1e-2,
                &format!("bcast{op} b iter{iter}"),
            );
        }
    }
}

#[test]
fn relu_matches_fd_away_from_kinks() {
    let mut rng = StdRng::seed_from_u64(13);
    for iter in 0..100 {
        let n = rng.gen_range(1..=16);
        // keep probes away from the kink at 0
        let data: Vec<f32> = (0..n)
            .map(|_| {
                let v: f32 = rng.gen_range(0.05..2.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let x = Tensor::param(data, &[n]).unwrap();
        let w = rand_vec(&mut rng, n, -1.0, 1.0);
        weighted_loss(&x.relu().unwrap(), &w).backward().unwrap();
        let xv = to_f64(&x.to_vec());
        let fd = central_diff(
            |p| dot(&p.iter().map(|v| v.max(0.0)).collect::<Vec<_>>(), &w),
            &xv,
        );
        assert_close(&x.grad().unwrap(), &fd, 1e-2, &format!("relu iter{iter}"));
    }
}

#[test]
fn matmul_matches_fd_tightly() {
    let mut rng = StdRng::seed_from_u64(14);
    for iter in 0..100 {
        let (m, k, n) = (
            rng.gen_range(1..=5),
            rng.gen_range(1..=5),
            rng.gen_range(1..=5),
        );
        let a = Tensor::param(rand_vec(&mut rng, m * k, -1.0, 1.0), &[m, k]).unwrap();
        let b = Tensor::param(rand_vec(&mut rng, k * n, -1.0, 1.0), &[k, n]).unwrap();
        let w = rand_vec(&mut rng, m * n, -1.0, 1.0);
        weighted_loss(&a.matmul(&b).unwrap(), &w).backward().unwrap();
        let (av, bv) = (to_f64(&a.to_vec()), to_f64(&b.to_vec()));
        let fda = central_diff(|x| dot(&ref_matmul(x, &bv, m, k, n), &w), &av);
        let fdb = central_diff(|x| dot(&ref_matmul(&av, x, m, k, n), &w), &bv);
        assert_close(&a.grad().unwrap(), &fda, 1e-4, &format!("matmul a iter{iter}"));
        assert_close(&b.grad().unwrap(), &fdb, 1e-4, &format!("matmul b iter{iter}"));
    }
}

#[test]
fn conv2d_matches_fd_tightly() {
    let mut rng = StdRng::seed_from_u64(15);
    for iter in 0..100 {
        let n = rng.gen_range(1..=2);
        let ci = rng.gen_range(1..=3);
        let co = rng.gen_range(1..=3);
        let h = rng.gen_range(3..=5);
        let k = if rng.gen_bool(0.5) { 1 } else { 3 };
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=1);
        let xs = [n, ci, h, h];
        let ws = [co, ci, k, k];
        let x = Tensor::param(rand_vec(&mut rng, n * ci * h * h, -1.0, 1.0), &xs).unwrap();
        let wt = Tensor::param(rand_vec(&mut rng, co * ci * k * k, -1.0, 1.0), &ws).unwrap();
        let out = x.conv2d(&wt, stride, pad).unwrap();
        let w = rand_vec(&mut rng, out.numel(), -1.0, 1.0);
        weighted_loss(&out, &w).backward().unwrap();
        let (xv, wv) = (to_f64(&x.to_vec()), to_f64(&wt.to_vec()));
        let fdx = central_diff(|p| dot(&ref_conv2d(p, xs, &wv, ws, stride, pad), &w), &xv);
        let fdw = central_diff(|p| dot(&ref_conv2d(&xv, xs, p, ws, stride, pad), &w), &wv);
        assert_close(&x.grad().unwrap(), &fdx, 1e-4, &format!("conv x iter{iter}"));
        assert_close(&wt.grad().unwrap(), &fdw, 1e-4, &format!("conv w iter{iter}"));
    }
}

#[test]
fn avgpool_matches_fd() {
    let mut rng = StdRng::seed_from_u64(16);
    for iter in 0..100 {
        let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
        let h = 2 * rng.gen_range(1..=3);
        let xs = [n, c, h, h];
        let x = Tensor::param(rand_vec(&mut rng, n * c * h * h, -2.0, 2.0), &xs).unwrap();
        let out = x.avgpool2d(2, 2).unwrap();
        let w = rand_vec(&mut rng, out.numel(), -1.0, 1.0);
        weighted_loss(&out, &w).backward().unwrap();
        let xv = to_f64(&x.to_vec());
        let fd = central_diff(|p| dot(&ref_avgpool(p, xs, 2, 2), &w), &xv);
        assert_close(&x.grad().unwrap(), &fd, 1e-2, &format!("avgpool iter{iter}"));
    }
}

#[test]
fn batchnorm_matches_fd() {
    let mut rng = StdRng::seed_from_u64(17);
    for iter in 0..100 {
        // outer >= 3: with two samples per channel the normalized values are
        // exactly +/-1 and the input gradient is identically zero, leaving
        // nothing but noise for the comparison.
        let (outer, c) = (rng.gen_range(3..=6), rng.gen_range(1..=3));
        let x = Tensor::param(rand_vec(&mut rng, outer * c, -2.0, 2.0), &[outer, c]).unwrap();
        let gamma = Tensor::param(rand_vec(&mut rng, c, 0.5, 1.5), &[c]).unwrap();
        let beta = Tensor::param(rand_vec(&mut rng, c, -0.5, 0.5), &[c]).unwrap();
        let rm = Tensor::zeros(&[c]);
        let rv = Tensor::from_vec(vec![1.0; c], &[c]).unwrap();
        let out = x
            .batchnorm(&gamma, &beta, &rm, &rv, true, 0.1, 1e-5)
            .unwrap();
        let w = rand_vec(&mut rng, out.numel(), -1.0, 1.0);
        weighted_loss(&out, &w).backward().unwrap();
        let (xv, gv, bv) = (
            to_f64(&x.to_vec()),
            to_f64(&gamma.to_vec()),
            to_f64(&beta.to_vec()),
        );
        let f = |xp: &[f64], gp: &[f64], bp: &[f64]| {
            dot(&ref_batchnorm(xp, gp, bp, outer, c, 1, 1e-5), &w)
        };
        assert_close(
            &x.grad().unwrap(),
            &central_diff(|p| f(p, &gv, &bv), &xv),
            1e-2,
            &format!("bn x iter{iter}"),
        );
        assert_close(
            &gamma.grad().unwrap(),
            &central_diff(|p| f(&xv, p, &bv), &gv),
            1e-2,
            &format!("bn gamma iter{iter}"),
        );
        assert_close(
            &beta.grad().unwrap(),
            &central_diff(|p| f(&xv, &gv, p), &bv),
            1e-2,
            &format!("bn beta iter{iter}"),
        );
    }
}

#[test]
fn softmax_cross_entropy_matches_fd_tightly() {
    let mut rng = StdRng::seed_from_u64(18);
    for iter in 0..100 {
        let (n, k) = (rng.gen_range(1..=4), rng.gen_range(2..=6));
        let x = Tensor::param(rand_vec(&mut rng, n * k, -2.0, 2.0), &[n, k]).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        x.softmax_cross_entropy(&labels)
            .unwrap()
            .backward()
            .unwrap();
        let xv = to_f64(&x.to_vec());
        let fd = central_diff(|p| ref_softmax_ce(p, &labels, n, k), &xv);
        assert_close(&x.grad().unwrap(), &fd, 1e-4, &format!("ce iter{iter}"));
    }
}

#[test]
fn two_layer_mlp_composite_matches_fd() {
    let mut rng = StdRng::seed_from_u64(19);
    let (n, d, hdim, k) = (4, 6, 8, 3);
    let x = Tensor::param(rand_vec(&mut rng, n * d, -1.0, 1.0), &[n, d]).unwrap();
    let w1 = Tensor::param(rand_vec(&mut rng, d * hdim, -0.5, 0.5), &[d, hdim]).unwrap();
    let b1 = Tensor::param(rand_vec(&mut rng, hdim, -0.1, 0.1), &[hdim]).unwrap();
    let w2 = Tensor::param(rand_vec(&mut rng, hdim * k, -0.5, 0.5), &[hdim, k]).unwrap();
    let b2 = Tensor::param(rand_vec(&mut rng, k, -0.1, 0.1), &[k]).unwrap();
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();

    let h1 = x.matmul(&w1).unwrap().add(&b1).unwrap().relu().unwrap();
    let logits = h1.matmul(&w2).unwrap().add(&b2).unwrap();
    logits
        .softmax_cross_entropy(&labels)
        .unwrap()
        .backward()
        .unwrap();

    let forward = |xv: &[f64], w1v: &[f64], b1v: &[f64], w2v: &[f64], b2v: &[f64]| -> f64 {
        let mut h = ref_matmul(xv, w1v, n, d, hdim);
        for r in 0..n {
            for c in 0..hdim {
                h[r * hdim + c] = (h[r * hdim + c] + b1v[c]).max(0.0);
            }
        }
        let mut logits = ref_matmul(&h, w2v, n, hdim, k);
        for r in 0..n {
            for c in 0..k {
                logits[r * k + c] += b2v[c];
            }
        }
        ref_softmax_ce(&logits, &labels, n, k)
    };

    let (xv, w1v, b1v, w2v, b2v) = (
        to_f64(&x.to_vec()),
        to_f64(&w1.to_vec()),
        to_f64(&b1.to_vec()),
        to_f64(&w2.to_vec()),
        to_f64(&b2.to_vec()),
    );
    let checks: Vec<(&Tensor, Vec<f64>, &str)> = vec![
        (
            &x,
            central_diff(|p| forward(p, &w1v, &b1v, &w2v, &b2v), &xv),
            "mlp x",
        ),
        (
            &w1,
            central_diff(|p| forward(&xv, p, &b1v, &w2v, &b2v), &w1v),
            "mlp w1",
        ),
        (
            &b1,
            central_diff(|p| forward(&xv, &w1v, p, &w2v, &b2v), &b1v),
            "mlp b1",
        ),
        (
            &w2,
            central_diff(|p| forward(&xv, &w1v, &b1v, p, &b2v), &w2v),
            "mlp w2",
        ),
        (
            &b2,
            central_diff(|p| forward(&xv, &w1v, &b1v, &w2v, p), &b2v),
            "mlp b2",
        ),
    ];
    for (t, fd, ctx) in checks {
        assert_close(&t.grad().unwrap(), &fd, 1e-3, ctx);
    }
}
