//! Layer primitives on top of the autodiff core: 1-D convolutions, batch
//! norm, pooling, multi-head self-attention, dropout and the small shape
//! plumbing (reshape, slice, concat, gather) the network modules compose.
//!
//! Convolution-style ops accept either a single example (`[C, L]`) or a
//! batch (`[B, C, L]`); the unbatched form is treated as `B = 1`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Result, Tensor, TensorError};

/// Forward-pass mode. Train mode enables dropout and batch-statistics
/// normalization; eval mode uses running statistics and is deterministic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn contract(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Contract {
        op,
        msg: msg.into(),
    }
}

/// Four-accumulator dot product. The fixed summation order keeps results
/// bit-reproducible while breaking the serial FP dependency chain.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    debug_assert_eq!(n, b.len());
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    let quads = n / 4 * 4;
    let mut j = 0;
    while j < quads {
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
        j += 4;
    }
    let mut s = (s0 + s1) + (s2 + s3);
    while j < n {
        s += a[j] * b[j];
        j += 1;
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Interprets rank-2 input as a batch of one; returns (B, C, L, was_batched).
fn batch_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, bool)> {
    match shape.len() {
        2 => Ok((1, shape[0], shape[1], false)),
        3 => Ok((shape[0], shape[1], shape[2], true)),
        _ => Err(TensorError::RankMismatch {
            op,
            expected: 3,
            got: shape.to_vec(),
        }),
    }
}

fn out_shape(batched: bool, b: usize, rest: &[usize]) -> Vec<usize> {
    if batched {
        let mut s = vec![b];
        s.extend_from_slice(rest);
        s
    } else {
        rest.to_vec()
    }
}

pub fn conv1d_out_len(l: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if k > l + 2 * padding {
        return Err(contract(
            "conv1d",
            format!("kernel {k} longer than padded input {}", l + 2 * padding),
        ));
    }
    let lout = (l + 2 * padding - k) / stride + 1;
    if lout == 0 {
        return Err(contract("conv1d", "empty output"));
    }
    Ok(lout)
}

/// Symmetric padding that keeps `L_out = ceil(L / stride)`.
pub fn same_padding(k: usize, stride: usize) -> usize {
    k.saturating_sub(stride).div_ceil(2)
}

/// Cross-correlation along the last axis.
///
/// `input` is `[B, C_in, L]` (or `[C_in, L]`), `weight` is
/// `[C_out, C_in, K]`, `bias` is `[C_out]`.
pub fn conv1d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let ishape = input.shape();
    let (b, cin, l, batched) = batch_dims("conv1d", &ishape)?;
    let wshape = weight.shape();
    if wshape.len() != 3 {
        return Err(TensorError::RankMismatch {
            op: "conv1d",
            expected: 3,
            got: wshape,
        });
    }
    let (cout, wcin, k) = (wshape[0], wshape[1], wshape[2]);
    if wcin != cin {
        return Err(TensorError::DimMismatch {
            op: "conv1d",
            dim: 1,
            lhs: cin,
            rhs: wcin,
        });
    }
    if let Some(bt) = bias {
        if bt.shape() != vec![cout] {
            return Err(contract(
                "conv1d",
                format!("bias shape {:?} does not match C_out {cout}", bt.shape()),
            ));
        }
    }
    if stride == 0 {
        return Err(TensorError::Config("conv1d: stride must be positive".into()));
    }
    if k == 1 && stride == 1 && padding == 0 {
        return pointwise_conv1d(input, weight, bias, b, cin, cout, l, batched);
    }
    let lout = conv1d_out_len(l, k, stride, padding)?;

    let x = input.data();
    let w = weight.data();
    let mut y = vec![0.0; b * cout * lout];
    if let Some(bt) = bias {
        let bd = bt.data();
        for bi in 0..b {
            for co in 0..cout {
                let row = &mut y[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
                row.fill(bd[co]);
            }
        }
    }
    for bi in 0..b {
        for co in 0..cout {
            let yrow = (bi * cout + co) * lout;
            for ci in 0..cin {
                let xrow = (bi * cin + ci) * l;
                let wrow = (co * cin + ci) * k;
                for t in 0..lout {
                    let start = (t * stride) as isize - padding as isize;
                    let kmin = (-start).max(0) as usize;
                    let kmax = k.min((l as isize - start).max(0) as usize);
                    if kmin >= kmax {
                        continue;
                    }
                    let base = (xrow as isize + start + kmin as isize) as usize;
                    y[yrow + t] += dot(&x[base..base + (kmax - kmin)], &w[wrow + kmin..wrow + kmax]);
                }
            }
        }
    }
    drop(x);
    drop(w);

    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(bt) = bias {
        parents.push(bt.clone());
    }
    let (pi, pw) = (input.clone(), weight.clone());
    let pb = bias.cloned();
    let shape = out_shape(batched, b, &[cout, lout]);
    Ok(Tensor::from_op(
        shape,
        y,
        parents,
        Box::new(move |out| {
            let dy = out.grad.as_ref().unwrap();
            // d/d input
            pi.accum_grad_with(b * cin * l, |dx| {
                let w = pw.data();
                for bi in 0..b {
                    for co in 0..cout {
                        let yrow = (bi * cout + co) * lout;
                        for ci in 0..cin {
                            let xrow = (bi * cin + ci) * l;
                            let wrow = (co * cin + ci) * k;
                            for t in 0..lout {
                                let g = dy[yrow + t];
                                if g == 0.0 {
                                    continue;
                                }
                                let start = (t * stride) as isize - padding as isize;
                                let kmin = (-start).max(0) as usize;
                                let kmax = k.min((l as isize - start).max(0) as usize);
                                if kmin >= kmax {
                                    continue;
                                }
                                let base = (xrow as isize + start + kmin as isize) as usize;
                                axpy(g, &w[wrow + kmin..wrow + kmax], &mut dx[base..base + (kmax - kmin)]);
                            }
                        }
                    }
                }
            });
            // d/d weight
            pw.accum_grad_with(cout * cin * k, |dw| {
                let x = pi.data();
                for bi in 0..b {
                    for co in 0..cout {
                        let yrow = (bi * cout + co) * lout;
                        for ci in 0..cin {
                            let xrow = (bi * cin + ci) * l;
                            let wrow = (co * cin + ci) * k;
                            for t in 0..lout {
                                let g = dy[yrow + t];
                                if g == 0.0 {
                                    continue;
                                }
                                let start = (t * stride) as isize - padding as isize;
                                let kmin = (-start).max(0) as usize;
                                let kmax = k.min((l as isize - start).max(0) as usize);
                                if kmin >= kmax {
                                    continue;
                                }
                                let base = (xrow as isize + start + kmin as isize) as usize;
                                axpy(g, &x[base..base + (kmax - kmin)], &mut dw[wrow + kmin..wrow + kmax]);
                            }
                        }
                    }
                }
            });
            if let Some(bt) = &pb {
                bt.accum_grad_with(cout, |db| {
                    for bi in 0..b {
                        for (co, dbv) in db.iter_mut().enumerate() {
                            let yrow = (bi * cout + co) * lout;
                            *dbv += dy[yrow..yrow + lout].iter().sum::<f64>();
                        }
                    }
                });
            }
        }),
    ))
}

/// 1-tap channel-mixing fast path: per output channel an axpy over the
/// temporal axis instead of a length-1 dot per element.
#[allow(clippy::too_many_arguments)]
fn pointwise_conv1d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    b: usize,
    cin: usize,
    cout: usize,
    l: usize,
    batched: bool,
) -> Result<Tensor> {
    let x = input.data();
    let w = weight.data();
    let mut y = vec![0.0; b * cout * l];
    for bi in 0..b {
        for co in 0..cout {
            let yrow = (bi * cout + co) * l;
            if let Some(bt) = bias {
                let bv = bt.data()[co];
                y[yrow..yrow + l].fill(bv);
            }
            for ci in 0..cin {
                let xrow = (bi * cin + ci) * l;
                axpy(w[co * cin + ci], &x[xrow..xrow + l], &mut y[yrow..yrow + l]);
            }
        }
    }
    drop(x);
    drop(w);
    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(bt) = bias {
        parents.push(bt.clone());
    }
    let (pi, pw) = (input.clone(), weight.clone());
    let pb = bias.cloned();
    let shape = out_shape(batched, b, &[cout, l]);
    Ok(Tensor::from_op(
        shape,
        y,
        parents,
        Box::new(move |out| {
            let dy = out.grad.as_ref().unwrap();
            pi.accum_grad_with(b * cin * l, |dx| {
                let w = pw.data();
                for bi in 0..b {
                    for co in 0..cout {
                        let yrow = (bi * cout + co) * l;
                        for ci in 0..cin {
                            let xrow = (bi * cin + ci) * l;
                            axpy(w[co * cin + ci], &dy[yrow..yrow + l], &mut dx[xrow..xrow + l]);
                        }
                    }
                }
            });
            pw.accum_grad_with(cout * cin, |dw| {
                let x = pi.data();
                for bi in 0..b {
                    for co in 0..cout {
                        let yrow = (bi * cout + co) * l;
                        for ci in 0..cin {
                            let xrow = (bi * cin + ci) * l;
                            dw[co * cin + ci] += dot(&dy[yrow..yrow + l], &x[xrow..xrow + l]);
                        }
                    }
                }
            });
            if let Some(bt) = &pb {
                bt.accum_grad_with(cout, |db| {
                    for bi in 0..b {
                        for (co, dbv) in db.iter_mut().enumerate() {
                            let yrow = (bi * cout + co) * l;
                            *dbv += dy[yrow..yrow + l].iter().sum::<f64>();
                        }
                    }
                });
            }
        }),
    ))
}

/// Per-channel convolution; `depthwise` is `[C, 1, K]`.
pub fn depthwise_conv1d(
    input: &Tensor,
    depthwise: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let ishape = input.shape();
    let (b, c, l, batched) = batch_dims("separable_conv1d", &ishape)?;
    let wshape = depthwise.shape();
    if wshape.len() != 3 || wshape[1] != 1 {
        return Err(contract(
            "separable_conv1d",
            format!("depthwise weight must be [C, 1, K], got {wshape:?}"),
        ));
    }
    if wshape[0] != c {
        return Err(TensorError::DimMismatch {
            op: "separable_conv1d",
            dim: 0,
            lhs: c,
            rhs: wshape[0],
        });
    }
    let k = wshape[2];
    let lout = conv1d_out_len(l, k, stride, padding)?;

    let x = input.data();
    let w = depthwise.data();
    let mut y = vec![0.0; b * c * lout];
    for bi in 0..b {
        for ci in 0..c {
            let xrow = (bi * c + ci) * l;
            let yrow = (bi * c + ci) * lout;
            let wrow = ci * k;
            for t in 0..lout {
                let start = (t * stride) as isize - padding as isize;
                let kmin = (-start).max(0) as usize;
                let kmax = k.min((l as isize - start).max(0) as usize);
                if kmin >= kmax {
                    continue;
                }
                let base = (xrow as isize + start + kmin as isize) as usize;
                y[yrow + t] = dot(&x[base..base + (kmax - kmin)], &w[wrow + kmin..wrow + kmax]);
            }
        }
    }
    drop(x);
    drop(w);

    let (pi, pw) = (input.clone(), depthwise.clone());
    let shape = out_shape(batched, b, &[c, lout]);
    Ok(Tensor::from_op(
        shape,
        y,
        vec![input.clone(), depthwise.clone()],
        Box::new(move |out| {
            let dy = out.grad.as_ref().unwrap();
            pi.accum_grad_with(b * c * l, |dx| {
                let w = pw.data();
                for bi in 0..b {
                    for ci in 0..c {
                        let xrow = (bi * c + ci) * l;
                        let yrow = (bi * c + ci) * lout;
                        let wrow = ci * k;
                        for t in 0..lout {
                            let g = dy[yrow + t];
                            if g == 0.0 {
                                continue;
                            }
                            let start = (t * stride) as isize - padding as isize;
                            let kmin = (-start).max(0) as usize;
                            let kmax = k.min((l as isize - start).max(0) as usize);
                            if kmin >= kmax {
                                continue;
                            }
                            let base = (xrow as isize + start + kmin as isize) as usize;
                            axpy(g, &w[wrow + kmin..wrow + kmax], &mut dx[base..base + (kmax - kmin)]);
                        }
                    }
                }
            });
            pw.accum_grad_with(c * k, |dw| {
                let x = pi.data();
                for bi in 0..b {
                    for ci in 0..c {
                        let xrow = (bi * c + ci) * l;
                        let yrow = (bi * c + ci) * lout;
                        let wrow = ci * k;
                        for t in 0..lout {
                            let g = dy[yrow + t];
                            if g == 0.0 {
                                continue;
                            }
                            let start = (t * stride) as isize - padding as isize;
                            let kmin = (-start).max(0) as usize;
                            let kmax = k.min((l as isize - start).max(0) as usize);
                            if kmin >= kmax {
                                continue;
                            }
                            let base = (xrow as isize + start + kmin as isize) as usize;
                            axpy(g, &x[base..base + (kmax - kmin)], &mut dw[wrow + kmin..wrow + kmax]);
                        }
                    }
                }
            });
        }),
    ))
}

/// Depthwise temporal convolution followed by a 1-tap channel-mixing
/// convolution. `pointwise` is `[C_out, C_in, 1]`.
pub fn separable_conv1d(
    input: &Tensor,
    depthwise: &Tensor,
    pointwise: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let mid = depthwise_conv1d(input, depthwise, stride, padding)?;
    let pshape = pointwise.shape();
    if pshape.len() != 3 || pshape[2] != 1 {
        return Err(contract(
            "separable_conv1d",
            format!("pointwise weight must be [C_out, C_in, 1], got {pshape:?}"),
        ));
    }
    conv1d(&mid, pointwise, None, 1, 0)
}

/// Batch normalization over `(B, L)` per channel.
///
/// In train mode the batch statistics normalize the input and, when running
/// stats are supplied, update them in place (momentum 0.1, unbiased
/// variance). Eval mode requires running stats.
pub fn batch_norm1d(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mode: Mode,
    running: Option<(&Tensor, &Tensor)>,
    epsilon: f64,
) -> Result<Tensor> {
    const MOMENTUM: f64 = 0.1;
    let ishape = input.shape();
    let (b, c, l, batched) = batch_dims("batch_norm1d", &ishape)?;
    if gamma.shape() != vec![c] || beta.shape() != vec![c] {
        return Err(contract(
            "batch_norm1d",
            format!(
                "gamma/beta must be [{c}], got {:?}/{:?}",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let n = b * l;
    let (mean, var) = match mode {
        Mode::Train => {
            let x = input.data();
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut s = 0.0;
                for bi in 0..b {
                    let row = (bi * c + ci) * l;
                    s += x[row..row + l].iter().sum::<f64>();
                }
                mean[ci] = s / n as f64;
                let mut v = 0.0;
                for bi in 0..b {
                    let row = (bi * c + ci) * l;
                    for &xv in &x[row..row + l] {
                        let d = xv - mean[ci];
                        v += d * d;
                    }
                }
                var[ci] = v / n as f64;
            }
            drop(x);
            if let Some((rm, rv)) = running {
                let unbias = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
                let mut rmd = rm.to_vec();
                let mut rvd = rv.to_vec();
                for ci in 0..c {
                    rmd[ci] = (1.0 - MOMENTUM) * rmd[ci] + MOMENTUM * mean[ci];
                    rvd[ci] = (1.0 - MOMENTUM) * rvd[ci] + MOMENTUM * var[ci] * unbias;
                }
                rm.set_data(&rmd)?;
                rv.set_data(&rvd)?;
            }
            (mean, var)
        }
        Mode::Eval => match running {
            Some((rm, rv)) => (rm.to_vec(), rv.to_vec()),
            None => return Err(TensorError::MissingRunningStats),
        },
    };
    let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();

    let x = input.data();
    let g = gamma.data();
    let be = beta.data();
    let mut y = vec![0.0; b * c * l];
    for bi in 0..b {
        for ci in 0..c {
            let row = (bi * c + ci) * l;
            let (m, inv, ga, bb) = (mean[ci], invstd[ci], g[ci], be[ci]);
            for (yo, &xv) in y[row..row + l].iter_mut().zip(&x[row..row + l]) {
                *yo = ga * (xv - m) * inv + bb;
            }
        }
    }
    drop(x);
    drop(g);
    drop(be);

    let (pi, pg, pbeta) = (input.clone(), gamma.clone(), beta.clone());
    let shape = out_shape(batched, b, &[c, l]);
    Ok(Tensor::from_op(
        shape,
        y,
        vec![input.clone(), gamma.clone(), beta.clone()],
        Box::new(move |out| {
            let dy = out.grad.as_ref().unwrap();
            // per-channel sums of dy and dy*xhat, plus the input gradient,
            // all computed before any accumulation borrows
            let mut sum_dy = vec![0.0; c];
            let mut sum_dy_xhat = vec![0.0; c];
            let mut dx = vec![0.0; b * c * l];
            {
                let x = pi.data();
                let g = pg.data();
                for bi in 0..b {
                    for ci in 0..c {
                        let row = (bi * c + ci) * l;
                        let (m, inv) = (mean[ci], invstd[ci]);
                        for i in 0..l {
                            let xhat = (x[row + i] - m) * inv;
                            sum_dy[ci] += dy[row + i];
                            sum_dy_xhat[ci] += dy[row + i] * xhat;
                        }
                    }
                }
                let nf = n as f64;
                for bi in 0..b {
                    for ci in 0..c {
                        let row = (bi * c + ci) * l;
                        let (m, inv, ga) = (mean[ci], invstd[ci], g[ci]);
                        match mode {
                            Mode::Train => {
                                let mdy = sum_dy[ci] / nf;
                                let mdyx = sum_dy_xhat[ci] / nf;
                                for i in 0..l {
                                    let xhat = (x[row + i] - m) * inv;
                                    dx[row + i] = ga * inv * (dy[row + i] - mdy - xhat * mdyx);
                                }
                            }
                            Mode::Eval => {
                                for i in 0..l {
                                    dx[row + i] = ga * inv * dy[row + i];
                                }
                            }
                        }
                    }
                }
            }
            pbeta.accum_grad(&sum_dy);
            pg.accum_grad(&sum_dy_xhat);
            pi.accum_grad(&dx);
        }),
    ))
}

/// Mean over the temporal axis: `[B, F, L]` -> `[B, F]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let ishape = input.shape();
    let (b, f, l, batched) = batch_dims("global_avg_pool", &ishape)?;
    if l == 0 {
        return Err(contract("global_avg_pool", "empty temporal axis"));
    }
    let x = input.data();
    let mut y = vec![0.0; b * f];
    for (i, yo) in y.iter_mut().enumerate() {
        let row = i * l;
        *yo = x[row..row + l].iter().sum::<f64>() / l as f64;
    }
    drop(x);
    let p = input.clone();
    let shape = out_shape(batched, b, &[f]);
    Ok(Tensor::from_op(
        shape,
        y,
        vec![input.clone()],
        Box::new(move |out| {
            let dy = out.grad.as_ref().unwrap();
            p.accum_grad_with(b * f * l, |dx| {
                for (i, &g) in dy.iter().enumerate() {
                    let row = i * l;
                    let gl = g / l as f64;
                    for dv in &mut dx[row..row + l] {
                        *dv += gl;
                    }
                }
            });
        }),
    ))
}

/// Each output bin is the mean of its contiguous input bin with boundaries
/// `floor(i*L/T) .. floor((i+1)*L/T)`.
pub fn adaptive_avg_pool(input: &Tensor, target_len: usize) -> Result<Tensor> {
    let ishape = input.shape();
    let (b, f, l, batched) = batch_dims("adaptive_avg_pool", &ishape)?;
    if target_len == 0 || target_len > l {
        return Err(TensorError::Config(format!(
            "adaptive_avg_pool: target_len {target_len} must be in 1..={l}"
        )));
    }
    let bounds: Vec<(usize, usize)> = (0..target_len)
        .map(|i| (i * l / target_len, (i + 1) * l / target_len))
        .collect();
    let x = input.data();
    let mut y = vec![0.0; b * f * target_len];
    for r in 0..b * f {
        let row = r * l;
        let yrow = r * target_len;
        for (i, &(lo, hi)) in bounds.iter().enumerate() {
            y[yrow + i] = x[row + lo..row + hi].iter().sum::<f64>() / (hi - lo) as f64;
        }
    }
    drop(x);
    let p = input.clone();
    let bounds2 = bounds.clone();
    let shape = out_shape(batched, b, &[f, target_len]);
    Ok(Tensor::from_op(
        shape,
        y,
        vec![input.clone()],
        Box::new(move |out| {
            let dy = out.grad.as_ref().unwrap();
            p.accum_grad_with(b * f * l, |dx| {
                for r in 0..b * f {
                    let row = r * l;
                    let yrow = r * target_len;
                    for (i, &(lo, hi)) in bounds2.iter().enumerate() {
                        let g = dy[yrow + i] / (hi - lo) as f64;
                        for dv in &mut dx[row + lo..row + hi] {
                            *dv += g;
                        }
                    }
                }
            });
        }),
    ))
}

/// Fully connected layer: `y = x W^T + b` with `x [B, in]`, `w [out, in]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let ishape = input.shape();
    if ishape.len() != 2 {
        return Err(TensorError::RankMismatch {
            op: "linear",
            expected: 2,
            got: ishape,
        });
    }
    let (b, din) = (ishape[0], ishape[1]);
    let wshape = weight.shape();
    if wshape.len() != 2 || wshape[1] != din {
        return Err(TensorError::DimMismatch {
            op: "linear",
            dim: 1,
            lhs: din,
            rhs: *wshape.get(1).unwrap_or(&0),
        });
    }
    let dout = wshape[0];
    if let Some(bt) = bias {
        if bt.shape() != vec![dout] {
            return Err(contract(
                "linear",
                format!("bias shape {:?} does not match out {dout}", bt.shape()),
            ));
        }
    }
    let x = input.data();
    let w = weight.data();
    let mut y = vec![0.0; b * dout];
    for bi in 0..b {
        let xrow = bi * din;
        let yrow = bi * dout;
        for o in 0..dout {
            let wrow = o * din;
            y[yrow + o] = dot(&x[xrow..xrow + din], &w[wrow..wrow + din]);
        }
    }
    drop(x);
    drop(w);
    if let Some(bt) = bias {
        let bd = bt.data();
        for bi in 0..b {
            for (o, bv) in bd.iter().enumerate() {
                y[bi * dout + o] += bv;
            }
        }
    }

    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(bt) = bias {
        parents.push(bt.clone());
    }
    let (pi, pw) = (input.clone(), weight.clone());
    let pb = bias.cloned();
    Ok(Tensor::from_op(
        vec![b, dout],
        y,
        parents,
        Box::new(move |out| {
            let dy = out.grad.as_ref().unwrap();
            pi.accum_grad_with(b * din, |dx| {
                let w = pw.data();
                for bi in 0..b {
                    let yrow = bi * dout;
                    let xrow = bi * din;
                    for o in 0..dout {
                        let g = dy[yrow + o];
                        if g == 0.0 {
                            continue;
                        }
                        let wrow = o * din;
                        axpy(g, &w[wrow..wrow + din], &mut dx[xrow..xrow + din]);
                    }
                }
            });
            pw.accum_grad_with(dout * din, |dw| {
                let x = pi.data();
                for bi in 0..b {
                    let yrow = bi * dout;
                    let xrow = bi * din;
                    for o in 0..dout {
                        let g = dy[yrow + o];
                        if g == 0.0 {
                            continue;
                        }
                        let wrow = o * din;
                        axpy(g, &x[xrow..xrow + din], &mut dw[wrow..wrow + din]);
                    }
                }
            });
            if let Some(bt) = &pb {
                bt.accum_grad_with(dout, |db| {
                    for bi in 0..b {
                        for (o, dv) in db.iter_mut().enumerate() {
                            *dv += dy[bi * dout + o];
                        }
                    }
                });
            }
        }),
    ))
}

/// Data-copying reshape; gradient passes straight through.
pub fn reshape(input: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if n != input.numel() {
        return Err(TensorError::BadShape {
            shape,
            len: input.numel(),
        });
    }
    let p = input.clone();
    Ok(Tensor::from_op(
        shape,
        input.to_vec(),
        vec![input.clone()],
        Box::new(move |out| {
            p.accum_grad(out.grad.as_ref().unwrap());
        }),
    ))
}

/// `[B, C, L]` -> `[B, L, C]` (or `[C, L]` -> `[L, C]`).
pub fn transpose_cl(input: &Tensor) -> Result<Tensor> {
    let ishape = input.shape();
    let (b, c, l, batched) = batch_dims("transpose_cl", &ishape)?;
    let x = input.data();
    let mut y = vec![0.0; b * c * l];
    for bi in 0..b {
        let base = bi * c * l;
        for ci in 0..c {
            for li in 0..l {
                y[base + li * c + ci] = x[base + ci * l + li];
            }
        }
    }
    drop(x);
    let p = input.clone();
    let shape = out_shape(batched, b, &[l, c]);
    Ok(Tensor::from_op(
        shape,
        y,
        vec![input.clone()],
        Box::new(move |out| {
            let dy = out.grad.as_ref().unwrap();
            p.accum_grad_with(b * c * l, |dx| {
                for bi in 0..b {
                    let base = bi * c * l;
                    for ci in 0..c {
                        for li in 0..l {
                            dx[base + ci * l + li] += dy[base + li * c + ci];
                        }
                    }
                }
            });
        }),
    ))
}

/// Mean over the sequence axis of `[B, L, F]` -> `[B, F]`.
pub fn mean_rows(input: &Tensor) -> Result<Tensor> {
    let ishape = input.shape();
    if ishape.len() != 3 {
        return Err(TensorError::RankMismatch {
            op: "mean_rows",
            expected: 3,
            got: ishape,
        });
    }
    let (b, l, f) = (ishape[0], ishape[1], ishape[2]);
    let x = input.data();
    let mut y = vec![0.0; b * f];
    for bi in 0..b {
        for li in 0..l {
            let row = (bi * l + li) * f;
            for fi in 0..f {
                y[bi * f + fi] += x[row + fi];
            }
        }
    }
    for v in &mut y {
        *v /= l as f64;
    }
    drop(x);
    let p = input.clone();
    Ok(Tensor::from_op(
        vec![b, f],
        y,
        vec![input.clone()],
        Box::new(move |out| {
            let dy = out.grad.as_ref().unwrap();
            p.accum_grad_with(b * l * f, |dx| {
                for bi in 0..b {
                    for li in 0..l {
                        let row = (bi * l + li) * f;
                        for fi in 0..f {
                            dx[row + fi] += dy[bi * f + fi] / l as f64;
                        }
                    }
                }
            });
        }),
    ))
}

/// Contiguous slice along the last axis.
pub fn slice_last(input: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let shape = input.shape();
    let last = *shape.last().ok_or_else(|| contract("slice_last", "rank-0 input"))?;
    if start + len > last {
        return Err(contract(
            "slice_last",
            format!("slice {start}..{} out of last dim {last}", start + len),
        ));
    }
    let rows = input.numel() / last;
    let x = input.data();
    let mut y = vec![0.0; rows * len];
    for r in 0..rows {
        y[r * len..(r + 1) * len].copy_from_slice(&x[r * last + start..r * last + start + len]);
    }
    drop(x);
    let mut oshape = shape.clone();
    *oshape.last_mut().unwrap() = len;
    let p = input.clone();
    Ok(Tensor::from_op(
        oshape,
        y,
        vec![input.clone()],
        Box::new(move |out| {
            let dy = out.grad.as_ref().unwrap();
            p.accum_grad_with(rows * last, |dx| {
                for r in 0..rows {
                    for i in 0..len {
                        dx[r * last + start + i] += dy[r * len + i];
                    }
                }
            });
        }),
    ))
}

/// Concatenation along the last axis; all inputs share leading dims.
pub fn concat_last(inputs: &[&Tensor]) -> Result<Tensor> {
    if inputs.is_empty() {
        return Err(contract("concat_last", "no inputs"));
    }
    let lead: Vec<usize> = {
        let s = inputs[0].shape();
        s[..s.len() - 1].to_vec()
    };
    let mut widths = Vec::with_capacity(inputs.len());
    for t in inputs {
        let s = t.shape();
        if s[..s.len() - 1] != lead[..] {
            return Err(contract(
                "concat_last",
                format!("leading dims differ: {:?} vs {:?}", lead, &s[..s.len() - 1]),
            ));
        }
        widths.push(*s.last().unwrap());
    }
    let total: usize = widths.iter().sum();
    let rows: usize = lead.iter().product();
    let mut y = vec![0.0; rows * total];
    let mut off = 0;
    for (t, &w) in inputs.iter().zip(&widths) {
        let x = t.data();
        for r in 0..rows {
            y[r * total + off..r * total + off + w].copy_from_slice(&x[r * w..(r + 1) * w]);
        }
        off += w;
    }
    let mut oshape = lead.clone();
    oshape.push(total);
    let parents: Vec<Tensor> = inputs.iter().map(|t| (*t).clone()).collect();
    let parents2 = parents.clone();
    Ok(Tensor::from_op(
        oshape,
        y,
        parents,
        Box::new(move |out| {
            let dy = out.grad.as_ref().unwrap();
            let mut off = 0;
            for (t, &w) in parents2.iter().zip(&widths) {
                t.accum_grad_with(rows * w, |dx| {
                    for r in 0..rows {
                        for i in 0..w {
                            dx[r * w + i] += dy[r * total + off + i];
                        }
                    }
                });
                off += w;
            }
        }),
    ))
}

/// Row gather from a `[R, D]` tensor; backward scatter-adds.
pub fn select_rows(input: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let shape = input.shape();
    if shape.len() != 2 {
        return Err(TensorError::RankMismatch {
            op: "select_rows",
            expected: 2,
            got: shape,
        });
    }
    let (r, d) = (shape[0], shape[1]);
    if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
        return Err(contract(
            "select_rows",
            format!("row index {bad} out of range {r}"),
        ));
    }
    let x = input.data();
    let mut y = vec![0.0; indices.len() * d];
    for (o, &i) in indices.iter().enumerate() {
        y[o * d..(o + 1) * d].copy_from_slice(&x[i * d..(i + 1) * d]);
    }
    drop(x);
    let p = input.clone();
    let idx: Vec<usize> = indices.to_vec();
    Ok(Tensor::from_op(
        vec![indices.len(), d],
        y,
        vec![input.clone()],
        Box::new(move |out| {
            let dy = out.grad.as_ref().unwrap();
            p.accum_grad_with(r * d, |dx| {
                for (o, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        dx[i * d + j] += dy[o * d + j];
                    }
                }
            });
        }),
    ))
}

/// Batched matmul: `a [B, M, K] @ b [B, K, N]`.
pub fn bmm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
        return Err(contract(
            "bmm",
            format!("incompatible shapes {sa:?} @ {sb:?}"),
        ));
    }
    let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
    let ad = a.data();
    let bd = b.data();
    let mut y = vec![0.0; bs * m * n];
    for bi in 0..bs {
        let abase = bi * m * k;
        let bbase = bi * k * n;
        let ybase = bi * m * n;
        for mi in 0..m {
            for ki in 0..k {
                let av = ad[abase + mi * k + ki];
                if av == 0.0 {
                    continue;
                }
                let brow = bbase + ki * n;
                let yrow = ybase + mi * n;
                axpy(av, &bd[brow..brow + n], &mut y[yrow..yrow + n]);
            }
        }
    }
    drop(ad);
    drop(bd);
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        vec![bs, m, n],
        y,
        vec![a.clone(), b.clone()],
        Box::new(move |out| {
            let dy = out.grad.as_ref().unwrap();
            pa.accum_grad_with(bs * m * k, |da| {
                let bd = pb.data();
                for bi in 0..bs {
                    for mi in 0..m {
                        for ki in 0..k {
                            let yrow = (bi * m + mi) * n;
                            let brow = (bi * k + ki) * n;
                            da[(bi * m + mi) * k + ki] +=
                                dot(&dy[yrow..yrow + n], &bd[brow..brow + n]);
                        }
                    }
                }
            });
            pb.accum_grad_with(bs * k * n, |db| {
                let ad = pa.data();
                for bi in 0..bs {
                    for mi in 0..m {
                        for ki in 0..k {
                            let av = ad[(bi * m + mi) * k + ki];
                            if av == 0.0 {
                                continue;
                            }
                            let yrow = (bi * m + mi) * n;
                            let brow = (bi * k + ki) * n;
                            axpy(av, &dy[yrow..yrow + n], &mut db[brow..brow + n]);
                        }
                    }
                }
            });
        }),
    ))
}

/// Batched matmul with transposed right operand: `a [B, M, K] @ b^T`, where
/// `b` is `[B, N, K]`.
pub fn bmm_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
        return Err(contract(
            "bmm_nt",
            format!("incompatible shapes {sa:?} @ {sb:?}^T"),
        ));
    }
    let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
    let ad = a.data();
    let bd = b.data();
    let mut y = vec![0.0; bs * m * n];
    for bi in 0..bs {
        for mi in 0..m {
            let arow = (bi * m + mi) * k;
            let yrow = (bi * m + mi) * n;
            for ni in 0..n {
                let brow = (bi * n + ni) * k;
                y[yrow + ni] = dot(&ad[arow..arow + k], &bd[brow..brow + k]);
            }
        }
    }
    drop(ad);
    drop(bd);
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        vec![bs, m, n],
        y,
        vec![a.clone(), b.clone()],
        Box::new(move |out| {
            let dy = out.grad.as_ref().unwrap();
            pa.accum_grad_with(bs * m * k, |da| {
                let bd = pb.data();
                for bi in 0..bs {
                    for mi in 0..m {
                        let yrow = (bi * m + mi) * n;
                        let arow = (bi * m + mi) * k;
                        for ni in 0..n {
                            let g = dy[yrow + ni];
                            if g == 0.0 {
                                continue;
                            }
                            let brow = (bi * n + ni) * k;
                            axpy(g, &bd[brow..brow + k], &mut da[arow..arow + k]);
                        }
                    }
                }
            });
            pb.accum_grad_with(bs * n * k, |db| {
                let ad = pa.data();
                for bi in 0..bs {
                    for mi in 0..m {
                        let yrow = (bi * m + mi) * n;
                        let arow = (bi * m + mi) * k;
                        for ni in 0..n {
                            let g = dy[yrow + ni];
                            if g == 0.0 {
                                continue;
                            }
                            let brow = (bi * n + ni) * k;
                            axpy(g, &ad[arow..arow + k], &mut db[brow..brow + k]);
                        }
                    }
                }
            });
        }),
    ))
}

/// Numerically stable softmax along the last axis.
pub fn softmax_last(input: &Tensor) -> Result<Tensor> {
    let shape = input.shape();
    let c = *shape
        .last()
        .ok_or_else(|| contract("softmax", "rank-0 input"))?;
    let rows = input.numel() / c;
    let x = input.data();
    let mut y = vec![0.0; rows * c];
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (i, &v) in row.iter().enumerate() {
            let e = (v - mx).exp();
            y[r * c + i] = e;
            s += e;
        }
        for v in &mut y[r * c..(r + 1) * c] {
            *v /= s;
        }
    }
    drop(x);
    let p = input.clone();
    Ok(Tensor::from_op(
        shape,
        y,
        vec![input.clone()],
        Box::new(move |out| {
            let dy = out.grad.as_ref().unwrap();
            let yv = &out.data;
            p.accum_grad_with(rows * c, |dx| {
                for r in 0..rows {
                    let base = r * c;
                    let mut dot = 0.0;
                    for i in 0..c {
                        dot += dy[base + i] * yv[base + i];
                    }
                    for i in 0..c {
                        dx[base + i] += yv[base + i] * (dy[base + i] - dot);
                    }
                }
            });
        }),
    ))
}

/// Deterministic sinusoidal position table `[length, d]`: sin on even
/// dimensions, cos on odd, geometric wavelength schedule with base 10000.
pub fn positional_encoding(length: usize, d: usize) -> Result<Tensor> {
    if d % 2 != 0 {
        return Err(TensorError::Config(format!(
            "positional_encoding: dimension {d} must be even"
        )));
    }
    let mut data = vec![0.0; length * d];
    for pos in 0..length {
        for i in (0..d).step_by(2) {
            let freq = 1.0 / 10000f64.powf(i as f64 / d as f64);
            let arg = pos as f64 * freq;
            data[pos * d + i] = arg.sin();
            data[pos * d + i + 1] = arg.cos();
        }
    }
    Tensor::new(vec![length, d], data)
}

/// Adds a `[L, D]` table to every batch item of `[B, L, D]`.
pub fn add_broadcast(input: &Tensor, table: &Tensor) -> Result<Tensor> {
    let ishape = input.shape();
    let tshape = table.shape();
    if ishape.len() != 3 || tshape.len() != 2 || ishape[1] != tshape[0] || ishape[2] != tshape[1] {
        return Err(contract(
            "add_broadcast",
            format!("cannot broadcast {tshape:?} over {ishape:?}"),
        ));
    }
    let (b, l, d) = (ishape[0], ishape[1], ishape[2]);
    let x = input.data();
    let t = table.data();
    let mut y = vec![0.0; b * l * d];
    for bi in 0..b {
        let base = bi * l * d;
        for (yo, (xv, tv)) in y[base..base + l * d]
            .iter_mut()
            .zip(x[base..base + l * d].iter().zip(t.iter()))
        {
            *yo = xv + tv;
        }
    }
    drop(x);
    drop(t);
    let (pi, pt) = (input.clone(), table.clone());
    Ok(Tensor::from_op(
        ishape,
        y,
        vec![input.clone(), table.clone()],
        Box::new(move |out| {
            let dy = out.grad.as_ref().unwrap();
            pi.accum_grad(dy);
            pt.accum_grad_with(l * d, |dt| {
                for bi in 0..b {
                    let base = bi * l * d;
                    for (dv, g) in dt.iter_mut().zip(&dy[base..base + l * d]) {
                        *dv += g;
                    }
                }
            });
        }),
    ))
}

/// Projection weights for one multi-head self-attention block.
pub struct MhsaParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

impl MhsaParams {
    /// Identity projections, zero biases; attention then only mixes rows.
    pub fn identity(d: usize) -> MhsaParams {
        let eye = |_: ()| {
            let mut m = vec![0.0; d * d];
            for i in 0..d {
                m[i * d + i] = 1.0;
            }
            Tensor::new(vec![d, d], m).unwrap()
        };
        MhsaParams {
            wq: eye(()),
            bq: Tensor::zeros(vec![d]),
            wk: eye(()),
            bk: Tensor::zeros(vec![d]),
            wv: eye(()),
            bv: Tensor::zeros(vec![d]),
            wo: eye(()),
            bo: Tensor::zeros(vec![d]),
        }
    }
}

/// Attention output plus the per-head weight matrices (for inspection and
/// the row-stochasticity invariant).
pub struct AttentionOutput {
    pub output: Tensor,
    /// One `[B, L, L]` tensor per head; every row sums to 1.
    pub weights: Vec<Tensor>,
}

/// Standard scaled-dot-product multi-head self-attention over `[B, L, D]`
/// (or `[L, D]`). No positional encoding is applied here; callers add one
/// beforehand when order should matter.
pub fn multi_head_self_attention(
    input: &Tensor,
    heads: usize,
    params: &MhsaParams,
) -> Result<AttentionOutput> {
    let ishape = input.shape();
    let (b, l, d, batched) = match ishape.len() {
        2 => (1, ishape[0], ishape[1], false),
        3 => (ishape[0], ishape[1], ishape[2], true),
        _ => {
            return Err(TensorError::RankMismatch {
                op: "multi_head_self_attention",
                expected: 3,
                got: ishape,
            })
        }
    };
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::Config(format!(
            "multi_head_self_attention: dimension {d} not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let x2 = reshape(input, vec![b * l, d])?;
    let q = linear(&x2, &params.wq, Some(&params.bq))?;
    let k = linear(&x2, &params.wk, Some(&params.bk))?;
    let v = linear(&x2, &params.wv, Some(&params.bv))?;
    let q3 = reshape(&q, vec![b, l, d])?;
    let k3 = reshape(&k, vec![b, l, d])?;
    let v3 = reshape(&v, vec![b, l, d])?;

    let mut head_outs = Vec::with_capacity(heads);
    let mut head_weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = slice_last(&q3, h * dh, dh)?;
        let kh = slice_last(&k3, h * dh, dh)?;
        let vh = slice_last(&v3, h * dh, dh)?;
        let scores = bmm_nt(&qh, &kh)?.scale(1.0 / (dh as f64).sqrt());
        let attn = softmax_last(&scores)?;
        head_outs.push(bmm(&attn, &vh)?);
        head_weights.push(attn);
    }
    let heads_cat = {
        let refs: Vec<&Tensor> = head_outs.iter().collect();
        concat_last(&refs)?
    };
    let flat = reshape(&heads_cat, vec![b * l, d])?;
    let out2 = linear(&flat, &params.wo, Some(&params.bo))?;
    let output = if batched {
        reshape(&out2, vec![b, l, d])?
    } else {
        reshape(&out2, vec![l, d])?
    };
    Ok(AttentionOutput {
        output,
        weights: head_weights,
    })
}

/// Inverted dropout. Train mode zeroes each element with probability `rate`
/// and scales survivors by `1/(1-rate)`; eval mode returns the input
/// unchanged.
pub fn dropout(input: &Tensor, rate: f64, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::Config(format!(
            "dropout: rate {rate} must be in [0, 1)"
        )));
    }
    if mode == Mode::Eval {
        return Ok(input.clone());
    }
    let keep = 1.0 - rate;
    let n = input.numel();
    let mask: Vec<f64> = (0..n)
        .map(|_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    let data: Vec<f64> = input
        .data()
        .iter()
        .zip(&mask)
        .map(|(x, m)| x * m)
        .collect();
    let p = input.clone();
    Ok(Tensor::from_op(
        input.shape(),
        data,
        vec![input.clone()],
        Box::new(move |out| {
            let dy = out.grad.as_ref().unwrap();
            let d: Vec<f64> = dy.iter().zip(&mask).map(|(g, m)| g * m).collect();
            p.accum_grad(&d);
        }),
    ))
}

/// Picks `x[b, labels[b]]` per row: `[B, C]` -> `[B]`.
pub fn pick_class(input: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let shape = input.shape();
    if shape.len() != 2 {
        return Err(TensorError::RankMismatch {
            op: "pick_class",
            expected: 2,
            got: shape,
        });
    }
    let (b, c) = (shape[0], shape[1]);
    if labels.len() != b {
        return Err(contract(
            "pick_class",
            format!("{} labels for batch of {b}", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(contract(
            "pick_class",
            format!("label {bad} out of range {c}"),
        ));
    }
    let x = input.data();
    let y: Vec<f64> = labels.iter().enumerate().map(|(bi, &l)| x[bi * c + l]).collect();
    drop(x);
    let p = input.clone();
    let labels2: Vec<usize> = labels.to_vec();
    Ok(Tensor::from_op(
        vec![b],
        y,
        vec![input.clone()],
        Box::new(move |out| {
            let dy = out.grad.as_ref().unwrap();
            p.accum_grad_with(b * c, |dx| {
                for (bi, &l) in labels2.iter().enumerate() {
                    dx[bi * c + l] += dy[bi];
                }
            });
        }),
    ))
}

/// Euclidean norm per row: `[B, C]` -> `[B]`.
pub fn row_norm(input: &Tensor) -> Result<Tensor> {
    let shape = input.shape();
    if shape.len() != 2 {
        return Err(TensorError::RankMismatch {
            op: "row_norm",
            expected: 2,
            got: shape,
        });
    }
    let (b, c) = (shape[0], shape[1]);
    let x = input.data();
    let y: Vec<f64> = (0..b)
        .map(|bi| x[bi * c..(bi + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    drop(x);
    let p = input.clone();
    Ok(Tensor::from_op(
        vec![b],
        y,
        vec![input.clone()],
        Box::new(move |out| {
            let dy = out.grad.as_ref().unwrap();
            let norms = &out.data;
            let mut d = vec![0.0; b * c];
            {
                let x = p.data();
                for bi in 0..b {
                    if norms[bi] == 0.0 {
                        continue;
                    }
                    let g = dy[bi] / norms[bi];
                    for i in 0..c {
                        d[bi * c + i] = g * x[bi * c + i];
                    }
                }
            }
            p.accum_grad(&d);
        }),
    ))
}

/// Elementwise division of same-shape tensors.
pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    super::check_same_shape("div", a, b)?;
    let data: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| x / y)
        .collect();
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        a.shape(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |out| {
            let g = out.grad.as_ref().unwrap();
            {
                let bd = pb.data();
                let da: Vec<f64> = g.iter().zip(bd.iter()).map(|(gi, y)| gi / y).collect();
                drop(bd);
                pa.accum_grad(&da);
            }
            {
                let ad = pa.data();
                let bd = pb.data();
                let db: Vec<f64> = g
                    .iter()
                    .zip(ad.iter().zip(bd.iter()))
                    .map(|(gi, (x, y))| -gi * x / (y * y))
                    .collect();
                drop(ad);
                drop(bd);
                pb.accum_grad(&db);
            }
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn t2(c: usize, l: usize, v: Vec<f64>) -> Tensor {
        Tensor::new(vec![c, l], v).unwrap()
    }

    #[test]
    fn conv1d_identity_kernel() {
        let x = t2(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        let w = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(vec![1]);
        let y = conv1d(&x, &w, Some(&b), 1, 0).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv1d_strided_sum_kernel() {
        // ones input, kernel [1,1], stride 2: each window sums two ones.
        let x = t2(1, 4, vec![1.0; 4]);
        let w = Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap();
        let y = conv1d(&x, &w, None, 2, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 2]);
        assert_eq!(y.to_vec(), vec![2.0, 2.0]);
    }

    #[test]
    fn conv1d_output_length_formula() {
        // floor((3000 + 2*99 - 200)/2) + 1
        assert_eq!(conv1d_out_len(3000, 200, 2, 99).unwrap(), 1500);
        let x = Tensor::zeros(vec![1, 3000]);
        let w = Tensor::zeros(vec![1, 1, 200]);
        let y = conv1d(&x, &w, None, 2, 99).unwrap();
        assert_eq!(y.shape(), vec![1, 1500]);
    }

    #[test]
    fn conv1d_rejects_channel_mismatch() {
        let x = Tensor::zeros(vec![2, 8]);
        let w = Tensor::zeros(vec![4, 3, 3]);
        let err = conv1d(&x, &w, None, 1, 0).unwrap_err();
        assert!(err.to_string().contains("dim 1"), "{err}");
    }

    #[test]
    fn separable_identity() {
        let x = t2(2, 5, (0..10).map(|v| v as f64).collect());
        let dw = Tensor::new(vec![2, 1, 1], vec![1.0, 1.0]).unwrap();
        let pw = Tensor::new(vec![2, 2, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = separable_conv1d(&x, &dw, &pw, 1, 0).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn separable_channel_sum() {
        let x = t2(2, 3, vec![2.0, 2.0, 2.0, 5.0, 5.0, 5.0]);
        let dw = Tensor::new(vec![2, 1, 1], vec![1.0, 1.0]).unwrap();
        let pw = Tensor::new(vec![1, 2, 1], vec![1.0, 1.0]).unwrap();
        let y = separable_conv1d(&x, &dw, &pw, 1, 0).unwrap();
        assert_eq!(y.to_vec(), vec![7.0, 7.0, 7.0]);
    }

    #[test]
    fn separable_matches_composed_kernel() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x = t2(2, 8, (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let k = 3;
        let dw_v: Vec<f64> = (0..2 * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pw_v: Vec<f64> = (0..3 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dw = Tensor::new(vec![2, 1, k], dw_v.clone()).unwrap();
        let pw = Tensor::new(vec![3, 2, 1], pw_v.clone()).unwrap();
        let sep = separable_conv1d(&x, &dw, &pw, 2, 1).unwrap();
        // composed[co, ci, k] = pw[co, ci] * dw[ci, k]
        let mut comp = vec![0.0; 3 * 2 * k];
        for co in 0..3 {
            for ci in 0..2 {
                for ki in 0..k {
                    comp[(co * 2 + ci) * k + ki] = pw_v[co * 2 + ci] * dw_v[ci * k + ki];
                }
            }
        }
        let full = conv1d(&x, &Tensor::new(vec![3, 2, k], comp).unwrap(), None, 2, 1).unwrap();
        for (a, b) in sep.to_vec().iter().zip(full.to_vec()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn batch_norm_train_standardizes() {
        let x = Tensor::new(vec![2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let g = Tensor::full(vec![1], 1.0);
        let b = Tensor::zeros(vec![1]);
        let y = batch_norm1d(&x, &g, &b, Mode::Train, None, 1e-5).unwrap();
        let v = y.to_vec();
        let mean: f64 = v.iter().sum::<f64>() / 6.0;
        let var: f64 = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4); // epsilon shrinks variance slightly
    }

    #[test]
    fn batch_norm_constant_input_hits_beta() {
        let x = Tensor::full(vec![1, 2, 4], 3.0);
        let g = Tensor::full(vec![2], 1.0);
        let b = Tensor::full(vec![2], 5.0);
        let y = batch_norm1d(&x, &g, &b, Mode::Train, None, 1e-5).unwrap();
        for v in y.to_vec() {
            assert!((v - 5.0).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_norm_eval_is_affine() {
        let x = Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let g = Tensor::full(vec![1], 2.0);
        let b = Tensor::full(vec![1], 1.0);
        let rm = Tensor::zeros(vec![1]);
        let rv = Tensor::full(vec![1], 1.0);
        let y = batch_norm1d(&x, &g, &b, Mode::Eval, Some((&rm, &rv)), 0.0).unwrap();
        assert_eq!(y.to_vec(), vec![3.0, 5.0, 7.0]);
    }

    #[test]
    fn batch_norm_eval_without_stats_errors() {
        let x = Tensor::zeros(vec![1, 1, 3]);
        let g = Tensor::full(vec![1], 1.0);
        let b = Tensor::zeros(vec![1]);
        assert!(matches!(
            batch_norm1d(&x, &g, &b, Mode::Eval, None, 1e-5),
            Err(TensorError::MissingRunningStats)
        ));
    }

    #[test]
    fn global_pool_means() {
        let x = t2(1, 3, vec![1.0, 2.0, 3.0]);
        assert_eq!(global_avg_pool(&x).unwrap().to_vec(), vec![2.0]);
        let c = t2(2, 4, vec![7.0; 8]);
        assert_eq!(global_avg_pool(&c).unwrap().to_vec(), vec![7.0, 7.0]);
    }

    #[test]
    fn adaptive_pool_pairwise() {
        let x = t2(1, 8, (1..=8).map(|v| v as f64).collect());
        let y = adaptive_avg_pool(&x, 4).unwrap();
        assert_eq!(y.to_vec(), vec![1.5, 3.5, 5.5, 7.5]);
        // target 1 equals global pooling
        let g = adaptive_avg_pool(&x, 1).unwrap();
        assert_eq!(g.to_vec(), global_avg_pool(&x).unwrap().to_vec());
        // target = L is the identity
        let id = adaptive_avg_pool(&x, 8).unwrap();
        assert_eq!(id.to_vec(), x.to_vec());
        assert!(adaptive_avg_pool(&x, 9).is_err());
    }

    #[test]
    fn positional_encoding_basics() {
        let pe = positional_encoding(4, 6).unwrap();
        let v = pe.to_vec();
        for i in 0..6 {
            let expect = if i % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(v[i], expect);
        }
        assert!(v.iter().all(|a| (-1.0..=1.0).contains(a)));
        let pe2 = positional_encoding(4, 6).unwrap();
        assert_eq!(v, pe2.to_vec());
        assert!(positional_encoding(4, 5).is_err());
    }

    #[test]
    fn attention_single_position_weight_is_one() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let d = 8;
        let x = Tensor::new(vec![1, d], (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let p = MhsaParams::identity(d);
        let out = multi_head_self_attention(&x, 2, &p).unwrap();
        for w in &out.weights {
            assert_eq!(w.to_vec(), vec![1.0]);
        }
        // identity projections: output == input when L == 1
        for (a, b) in out.output.to_vec().iter().zip(x.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let (l, d) = (5, 8);
        let x = Tensor::new(
            vec![l, d],
            (0..l * d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let p = random_params(d, &mut rng);
        let out = multi_head_self_attention(&x, 4, &p).unwrap();
        for wt in &out.weights {
            let w = wt.to_vec();
            for r in 0..l {
                let s: f64 = w[r * l..(r + 1) * l].iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    fn random_params(d: usize, rng: &mut rand_chacha::ChaCha8Rng) -> MhsaParams {
        let mut mk = |n: usize| {
            Tensor::new(
                vec![d, n],
                (0..d * n).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            )
            .unwrap()
        };
        MhsaParams {
            wq: mk(d),
            bq: Tensor::zeros(vec![d]),
            wk: mk(d),
            bk: Tensor::zeros(vec![d]),
            wv: mk(d),
            bv: Tensor::zeros(vec![d]),
            wo: mk(d),
            bo: Tensor::zeros(vec![d]),
        }
    }

    #[test]
    fn attention_is_permutation_equivariant_without_pe() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let (l, d) = (6, 8);
        let xv: Vec<f64> = (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::new(vec![l, d], xv.clone()).unwrap();
        let p = random_params(d, &mut rng);
        let y = multi_head_self_attention(&x, 2, &p).unwrap().output.to_vec();

        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut xp = vec![0.0; l * d];
        for (i, &pi) in perm.iter().enumerate() {
            xp[i * d..(i + 1) * d].copy_from_slice(&xv[pi * d..(pi + 1) * d]);
        }
        let yp = multi_head_self_attention(&Tensor::new(vec![l, d], xp).unwrap(), 2, &p)
            .unwrap()
            .output
            .to_vec();
        for (i, &pi) in perm.iter().enumerate() {
            for j in 0..d {
                assert!((yp[i * d + j] - y[pi * d + j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn attention_rejects_bad_head_count() {
        let x = Tensor::zeros(vec![4, 6]);
        let p = MhsaParams::identity(6);
        assert!(matches!(
            multi_head_self_attention(&x, 4, &p),
            Err(TensorError::Config(_))
        ));
    }

    #[test]
    fn dropout_modes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let e = dropout(&x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(e.to_vec(), x.to_vec());
        let z = dropout(&x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(z.to_vec(), x.to_vec());
        assert!(dropout(&x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_survivor_fraction() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let n = 100_000;
        let x = Tensor::full(vec![n], 1.0);
        let y = dropout(&x, 0.5, Mode::Train, &mut rng).unwrap();
        let survivors = y.to_vec().iter().filter(|v| **v != 0.0).count();
        let frac = survivors as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01, "survivor fraction {frac}");
    }

    #[test]
    fn linear_matches_manual() {
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = Tensor::new(vec![2, 3], vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]).unwrap();
        let b = Tensor::new(vec![2], vec![10.0, 0.0]).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.to_vec(), vec![8.0, 3.0, 8.0, 7.5]);
    }

    #[test]
    fn select_rows_and_concat() {
        let x = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = select_rows(&x, &[2, 0]).unwrap();
        assert_eq!(y.to_vec(), vec![5.0, 6.0, 1.0, 2.0]);
        let c = concat_last(&[&y, &y]).unwrap();
        assert_eq!(c.shape(), vec![2, 4]);
        assert_eq!(c.to_vec(), vec![5.0, 6.0, 5.0, 6.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap();
        let y = softmax_last(&x).unwrap().to_vec();
        for r in 0..2 {
            let s: f64 = y[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(y[r * 3..(r + 1) * 3].iter().all(|v| *v >= 0.0));
        }
    }
}
