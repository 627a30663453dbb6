//! Forward operations and their backward rules.
//!
//! Convolution and dense layers lower to GEMM (im2col for conv); pooling,
//! interpolation, normalization and the pointwise ops are direct loops.
//! Each op validates shapes up front and registers a closure that routes
//! the output gradient back to its parents.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn check_rank<S: Scalar>(op: &'static str, t: &Tensor<S>, rank: usize) -> Result<()> {
    if t.dims().len() != rank {
        return Err(Error::shape(op, format!("expected rank {}, got dims {:?}", rank, t.dims())));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// im2col / col2im
// ---------------------------------------------------------------------------

/// Unpacks one [Cin,H,W] sample into a [Cin*kh*kw, Ho*Wo] patch matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    x: &[S], cin: usize, h: usize, w: usize,
    kh: usize, kw: usize, stride: usize, pad: usize,
    ho: usize, wo: usize, out: &mut [S],
) {
    debug_assert_eq!(out.len(), cin * kh * kw * ho * wo);
    let mut row = 0usize;
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let base = row * ho * wo;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    let out_row = &mut out[base + oi * wo..base + (oi + 1) * wo];
                    if ii < 0 || ii >= h as isize {
                        out_row.fill(S::zero());
                        continue;
                    }
                    let src = &plane[ii as usize * w..(ii as usize + 1) * w];
                    for (oj, o) in out_row.iter_mut().enumerate() {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        *o = if jj < 0 || jj >= w as isize { S::zero() } else { src[jj as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds a patch-matrix gradient back into one [Cin,H,W] sample.
#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    cols: &[S], cin: usize, h: usize, w: usize,
    kh: usize, kw: usize, stride: usize, pad: usize,
    ho: usize, wo: usize, dx: &mut [S],
) {
    let mut row = 0usize;
    for c in 0..cin {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let base = row * ho * wo;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst = ii as usize * w;
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            plane[dst + jj as usize] += cols[base + oi * wo + oj];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

/// 2-D cross-correlation over [N,Cin,H,W] with weight [Cout,Cin,kH,kW].
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>, weight: &Tensor<S>, bias: &Tensor<S>,
    stride: usize, pad: usize,
) -> Result<Tensor<S>> {
    check_rank("conv2d", input, 4)?;
    check_rank("conv2d", weight, 4)?;
    check_rank("conv2d", bias, 1)?;
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
    }
    let (n, cin, h, w) = (input.dims()[0], input.dims()[1], input.dims()[2], input.dims()[3]);
    let (cout, wcin, kh, kw) = (weight.dims()[0], weight.dims()[1], weight.dims()[2], weight.dims()[3]);
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input channel axis is {}, weight expects {}", cin, wcin),
        ));
    }
    if bias.dims()[0] != cout {
        return Err(Error::shape(
            "conv2d",
            format!("bias axis is {}, weight has {} output channels", bias.dims()[0], cout),
        ));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {}x{} larger than padded input {}x{}", kh, kw, h + 2 * pad, w + 2 * pad),
        ));
    }
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let kdim = cin * kh * kw;
    let l = ho * wo;

    let mut out = vec![S::zero(); n * cout * l];
    let mut cols = vec![S::zero(); kdim * l];
    {
        let x = input.data();
        let wts = weight.data();
        let b = bias.data();
        for s in 0..n {
            im2col(&x[s * cin * h * w..(s + 1) * cin * h * w], cin, h, w, kh, kw, stride, pad, ho, wo, &mut cols);
            let out_n = &mut out[s * cout * l..(s + 1) * cout * l];
            S::gemm(cout, kdim, l, S::one(), &wts, &cols, S::zero(), out_n);
            for co in 0..cout {
                let bv = b[co];
                for o in &mut out_n[co * l..(co + 1) * l] {
                    *o += bv;
                }
            }
        }
    }

    let parents = vec![input.clone(), weight.clone(), bias.clone()];
    Ok(Tensor::from_op(
        vec![n, cout, ho, wo],
        out,
        parents,
        Box::new(move |g, parents| {
            let (input, weight, bias) = (&parents[0], &parents[1], &parents[2]);
            let x = input.data();
            let wts = weight.data();
            let mut dx = vec![S::zero(); x.len()];
            let mut dw = vec![S::zero(); wts.len()];
            let mut db = vec![S::zero(); bias.numel()];
            let mut cols = vec![S::zero(); kdim * l];
            let mut colgrad = vec![S::zero(); kdim * l];
            for s in 0..n {
                let gy = &g[s * cout * l..(s + 1) * cout * l];
                im2col(&x[s * cin * h * w..(s + 1) * cin * h * w], cin, h, w, kh, kw, stride, pad, ho, wo, &mut cols);
                // dW += gy (Cout x L) * cols^T (L x K)
                S::gemm_strided(
                    cout, l, kdim, S::one(),
                    gy, l as isize, 1,
                    &cols, 1, l as isize,
                    S::one(),
                    &mut dw, kdim as isize, 1,
                );
                // dcols = W^T (K x Cout) * gy (Cout x L)
                S::gemm_strided(
                    kdim, cout, l, S::one(),
                    &wts, 1, kdim as isize,
                    gy, l as isize, 1,
                    S::zero(),
                    &mut colgrad, l as isize, 1,
                );
                col2im(&colgrad, cin, h, w, kh, kw, stride, pad, ho, wo, &mut dx[s * cin * h * w..(s + 1) * cin * h * w]);
                for co in 0..cout {
                    let mut acc = S::zero();
                    for &v in &gy[co * l..(co + 1) * l] {
                        acc += v;
                    }
                    db[co] += acc;
                }
            }
            drop(x);
            drop(wts);
            input.accum_grad(&dx);
            weight.accum_grad(&dw);
            bias.accum_grad(&db);
        }),
    ))
}

// ---------------------------------------------------------------------------
// maxpool2d
// ---------------------------------------------------------------------------

/// Max pooling with window k and the given stride; gradient flows to the
/// first-occurring argmax of each window.
pub fn maxpool2d<S: Scalar>(input: &Tensor<S>, k: usize, stride: usize) -> Result<Tensor<S>> {
    check_rank("maxpool2d", input, 4)?;
    if k == 0 || stride == 0 {
        return Err(Error::InvalidArgument("maxpool2d: k and stride must be >= 1".into()));
    }
    let (n, c, h, w) = (input.dims()[0], input.dims()[1], input.dims()[2], input.dims()[3]);
    if h < k || w < k {
        return Err(Error::shape(
            "maxpool2d",
            format!("window {} larger than input {}x{}", k, h, w),
        ));
    }
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let mut out = vec![S::zero(); n * c * ho * wo];
    let mut argmax = vec![0u32; n * c * ho * wo];
    {
        let x = input.data();
        let mut oidx = 0usize;
        for plane_idx in 0..n * c {
            let plane = &x[plane_idx * h * w..(plane_idx + 1) * h * w];
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut best = plane[oi * stride * w + oj * stride];
                    let mut best_at = (plane_idx * h * w + oi * stride * w + oj * stride) as u32;
                    for ki in 0..k {
                        for kj in 0..k {
                            let v = plane[(oi * stride + ki) * w + oj * stride + kj];
                            if v > best {
                                best = v;
                                best_at = (plane_idx * h * w + (oi * stride + ki) * w + oj * stride + kj) as u32;
                            }
                        }
                    }
                    out[oidx] = best;
                    argmax[oidx] = best_at;
                    oidx += 1;
                }
            }
        }
    }
    let in_len = input.numel();
    Ok(Tensor::from_op(
        vec![n, c, ho, wo],
        out,
        vec![input.clone()],
        Box::new(move |g, parents| {
            let mut dx = vec![S::zero(); in_len];
            for (gi, &at) in g.iter().zip(&argmax) {
                dx[at as usize] += *gi;
            }
            parents[0].accum_grad(&dx);
        }),
    ))
}

// ---------------------------------------------------------------------------
// upsample_bilinear
// ---------------------------------------------------------------------------

fn bilinear_axis_table<S: Scalar>(src_len: usize, dst_len: usize) -> Vec<(usize, usize, S)> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|d| {
            // align-corners-false mapping, clamped at the borders
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0).min(src_len as f64 - 1.0);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(src_len - 1);
            (lo, hi, S::from_f64(src - lo as f64))
        })
        .collect()
}

/// Bilinear upsampling to (out_h, out_w). Constant inputs map to the same
/// constant exactly because interpolation uses the lerp form v0 + t*(v1-v0).
pub fn upsample_bilinear<S: Scalar>(input: &Tensor<S>, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
    check_rank("upsample_bilinear", input, 4)?;
    let (n, c, h, w) = (input.dims()[0], input.dims()[1], input.dims()[2], input.dims()[3]);
    if out_h < h || out_w < w {
        return Err(Error::InvalidArgument(format!(
            "upsample_bilinear: target {}x{} smaller than source {}x{}",
            out_h, out_w, h, w
        )));
    }
    let rows = bilinear_axis_table::<S>(h, out_h);
    let cols = bilinear_axis_table::<S>(w, out_w);
    let mut out = vec![S::zero(); n * c * out_h * out_w];
    {
        let x = input.data();
        let mut oidx = 0usize;
        for plane_idx in 0..n * c {
            let plane = &x[plane_idx * h * w..(plane_idx + 1) * h * w];
            for &(y0, y1, ty) in &rows {
                for &(x0, x1, tx) in &cols {
                    let a = plane[y0 * w + x0];
                    let b = plane[y0 * w + x1];
                    let cv = plane[y1 * w + x0];
                    let d = plane[y1 * w + x1];
                    let top = a + tx * (b - a);
                    let bot = cv + tx * (d - cv);
                    out[oidx] = top + ty * (bot - top);
                    oidx += 1;
                }
            }
        }
    }
    let rows_b = rows.clone();
    let cols_b = cols.clone();
    let in_len = input.numel();
    Ok(Tensor::from_op(
        vec![n, c, out_h, out_w],
        out,
        vec![input.clone()],
        Box::new(move |g, parents| {
            let mut dx = vec![S::zero(); in_len];
            let mut gidx = 0usize;
            for plane_idx in 0..n * c {
                let dplane = &mut dx[plane_idx * h * w..(plane_idx + 1) * h * w];
                for &(y0, y1, ty) in &rows_b {
                    for &(x0, x1, tx) in &cols_b {
                        let gv = g[gidx];
                        gidx += 1;
                        let one = S::one();
                        dplane[y0 * w + x0] += gv * (one - ty) * (one - tx);
                        dplane[y0 * w + x1] += gv * (one - ty) * tx;
                        dplane[y1 * w + x0] += gv * ty * (one - tx);
                        dplane[y1 * w + x1] += gv * ty * tx;
                    }
                }
            }
            parents[0].accum_grad(&dx);
        }),
    ))
}

// ---------------------------------------------------------------------------
// batchnorm2d
// ---------------------------------------------------------------------------

/// Per-channel batch normalization over (N,H,W) with affine transform.
/// `running_mean` / `running_var` are plain state tensors, updated in place
/// in train mode and read in eval mode.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm2d<S: Scalar>(
    input: &Tensor<S>, scale: &Tensor<S>, shift: &Tensor<S>,
    running_mean: &Tensor<S>, running_var: &Tensor<S>,
    momentum: S, eps: S, train: bool,
) -> Result<Tensor<S>> {
    check_rank("batchnorm2d", input, 4)?;
    let (n, c, h, w) = (input.dims()[0], input.dims()[1], input.dims()[2], input.dims()[3]);
    for (name, t) in [("scale", scale), ("shift", shift), ("running_mean", running_mean), ("running_var", running_var)] {
        if t.dims() != [c] {
            return Err(Error::shape(
                "batchnorm2d",
                format!("{} has dims {:?}, expected [{}]", name, t.dims(), c),
            ));
        }
    }
    let m = n * h * w;
    let plane = h * w;
    let chan_stride = c * plane;

    let per_channel = |x: &[S], ch: usize, mut f: Box<dyn FnMut(S) + '_>| {
        for s in 0..n {
            for &v in &x[s * chan_stride + ch * plane..s * chan_stride + (ch + 1) * plane] {
                f(v);
            }
        }
    };

    if train {
        if m < 2 {
            return Err(Error::InvalidArgument(format!(
                "batchnorm2d: train mode needs at least 2 elements per channel, got {}",
                m
            )));
        }
        let x = input.data();
        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        let minv = S::one() / S::from_f64(m as f64);
        for ch in 0..c {
            let mut acc = S::zero();
            per_channel(&x, ch, Box::new(|v| acc += v));
            mean[ch] = acc * minv;
            let mu = mean[ch];
            let mut acc2 = S::zero();
            per_channel(&x, ch, Box::new(|v| acc2 += (v - mu) * (v - mu)));
            var[ch] = acc2 * minv;
        }
        let mut xhat = vec![S::zero(); x.len()];
        let mut inv_std = vec![S::zero(); c];
        for ch in 0..c {
            inv_std[ch] = S::one() / (var[ch] + eps).sqrt();
        }
        let g = scale.data();
        let b = shift.data();
        let mut out = vec![S::zero(); x.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = s * chan_stride + ch * plane;
                let (mu, is, ga, be) = (mean[ch], inv_std[ch], g[ch], b[ch]);
                for i in base..base + plane {
                    let xh = (x[i] - mu) * is;
                    xhat[i] = xh;
                    out[i] = ga * xh + be;
                }
            }
        }
        drop(g);
        drop(b);
        drop(x);
        {
            // running stats use the unbiased variance, as is conventional
            let correction = S::from_f64(m as f64 / (m as f64 - 1.0));
            let mut rm = running_mean.data_mut();
            let mut rv = running_var.data_mut();
            let keep = S::one() - momentum;
            for ch in 0..c {
                rm[ch] = keep * rm[ch] + momentum * mean[ch];
                rv[ch] = keep * rv[ch] + momentum * var[ch] * correction;
            }
        }
        let xhat_b = xhat;
        Ok(Tensor::from_op(
            input.dims().to_vec(),
            {
                let o = out;
                o
            },
            vec![input.clone(), scale.clone(), shift.clone()],
            Box::new(move |gy, parents| {
                let gamma = parents[1].data();
                let minv = S::one() / S::from_f64(m as f64);
                let mut dx = vec![S::zero(); xhat_b.len()];
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                for ch in 0..c {
                    let mut sum_dy = S::zero();
                    let mut sum_dy_xhat = S::zero();
                    for s in 0..n {
                        let base = s * chan_stride + ch * plane;
                        for i in base..base + plane {
                            sum_dy += gy[i];
                            sum_dy_xhat += gy[i] * xhat_b[i];
                        }
                    }
                    dbeta[ch] = sum_dy;
                    dgamma[ch] = sum_dy_xhat;
                    let coeff = gamma[ch] * inv_std[ch];
                    let mean_dy = sum_dy * minv;
                    let mean_dy_xhat = sum_dy_xhat * minv;
                    for s in 0..n {
                        let base = s * chan_stride + ch * plane;
                        for i in base..base + plane {
                            dx[i] = coeff * (gy[i] - mean_dy - xhat_b[i] * mean_dy_xhat);
                        }
                    }
                }
                drop(gamma);
                parents[0].accum_grad(&dx);
                parents[1].accum_grad(&dgamma);
                parents[2].accum_grad(&dbeta);
            }),
        ))
    } else {
        let x = input.data();
        let rm = running_mean.data();
        let rv = running_var.data();
        let g = scale.data();
        let b = shift.data();
        let mut inv_std = vec![S::zero(); c];
        for ch in 0..c {
            inv_std[ch] = S::one() / (rv[ch] + eps).sqrt();
        }
        let mut out = vec![S::zero(); x.len()];
        let mut xhat = vec![S::zero(); x.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = s * chan_stride + ch * plane;
                let (mu, is, ga, be) = (rm[ch], inv_std[ch], g[ch], b[ch]);
                for i in base..base + plane {
                    let xh = (x[i] - mu) * is;
                    xhat[i] = xh;
                    out[i] = ga * xh + be;
                }
            }
        }
        drop(x);
        drop(rm);
        drop(rv);
        drop(g);
        drop(b);
        let xhat_b = xhat;
        Ok(Tensor::from_op(
            input.dims().to_vec(),
            out,
            vec![input.clone(), scale.clone(), shift.clone()],
            Box::new(move |gy, parents| {
                let gamma = parents[1].data();
                let mut dx = vec![S::zero(); xhat_b.len()];
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = s * chan_stride + ch * plane;
                        let coeff = gamma[ch] * inv_std[ch];
                        for i in base..base + plane {
                            dx[i] = gy[i] * coeff;
                            dgamma[ch] += gy[i] * xhat_b[i];
                            dbeta[ch] += gy[i];
                        }
                    }
                }
                drop(gamma);
                parents[0].accum_grad(&dx);
                parents[1].accum_grad(&dgamma);
                parents[2].accum_grad(&dbeta);
            }),
        ))
    }
}

// ---------------------------------------------------------------------------
// dense
// ---------------------------------------------------------------------------

/// Affine map: [N,F] x [F,G] + bias[G] -> [N,G].
pub fn dense<S: Scalar>(input: &Tensor<S>, weight: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    check_rank("dense", input, 2)?;
    check_rank("dense", weight, 2)?;
    check_rank("dense", bias, 1)?;
    let (n, f) = (input.dims()[0], input.dims()[1]);
    let (wf, g_dim) = (weight.dims()[0], weight.dims()[1]);
    if f != wf {
        return Err(Error::shape(
            "dense",
            format!("input feature axis is {}, weight expects {}", f, wf),
        ));
    }
    if bias.dims()[0] != g_dim {
        return Err(Error::shape(
            "dense",
            format!("bias axis is {}, weight produces {}", bias.dims()[0], g_dim),
        ));
    }
    let mut out = vec![S::zero(); n * g_dim];
    {
        let x = input.data();
        let wts = weight.data();
        let b = bias.data();
        S::gemm(n, f, g_dim, S::one(), &x, &wts, S::zero(), &mut out);
        for row in out.chunks_mut(g_dim) {
            for (o, &bv) in row.iter_mut().zip(b.iter()) {
                *o += bv;
            }
        }
    }
    Ok(Tensor::from_op(
        vec![n, g_dim],
        out,
        vec![input.clone(), weight.clone(), bias.clone()],
        Box::new(move |gy, parents| {
            let x = parents[0].data();
            let wts = parents[1].data();
            let mut dx = vec![S::zero(); n * f];
            let mut dw = vec![S::zero(); f * g_dim];
            let mut db = vec![S::zero(); g_dim];
            // dX = gY * W^T
            S::gemm_strided(
                n, g_dim, f, S::one(),
                gy, g_dim as isize, 1,
                &wts, 1, g_dim as isize,
                S::zero(),
                &mut dx, f as isize, 1,
            );
            // dW = X^T * gY
            S::gemm_strided(
                f, n, g_dim, S::one(),
                &x, 1, f as isize,
                gy, g_dim as isize, 1,
                S::zero(),
                &mut dw, g_dim as isize, 1,
            );
            for row in gy.chunks(g_dim) {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            drop(x);
            drop(wts);
            parents[0].accum_grad(&dx);
            parents[1].accum_grad(&dw);
            parents[2].accum_grad(&db);
        }),
    ))
}

// ---------------------------------------------------------------------------
// pointwise
// ---------------------------------------------------------------------------

pub fn relu<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    let out: Vec<S> = input.data().iter().map(|&v| if v > S::zero() { v } else { S::zero() }).collect();
    Tensor::from_op(
        input.dims().to_vec(),
        out,
        vec![input.clone()],
        Box::new(|gy, parents| {
            let x = parents[0].data();
            let dx: Vec<S> = gy.iter().zip(x.iter()).map(|(&g, &v)| if v > S::zero() { g } else { S::zero() }).collect();
            drop(x);
            parents[0].accum_grad(&dx);
        }),
    )
}

pub fn sigmoid<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    let out: Vec<S> = input.data().iter().map(|&v| S::one() / (S::one() + (-v).exp())).collect();
    let saved = out.clone();
    Tensor::from_op(
        input.dims().to_vec(),
        out,
        vec![input.clone()],
        Box::new(move |gy, parents| {
            let dx: Vec<S> = gy.iter().zip(saved.iter()).map(|(&g, &y)| g * y * (S::one() - y)).collect();
            parents[0].accum_grad(&dx);
        }),
    )
}

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax<S: Scalar>(input: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    let dims = input.dims();
    if axis >= dims.len() {
        return Err(Error::InvalidArgument(format!(
            "softmax: axis {} out of range for dims {:?}",
            axis, dims
        )));
    }
    let len = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let mut out = vec![S::zero(); input.numel()];
    {
        let x = input.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut mx = x[at(0)];
                for j in 1..len {
                    if x[at(j)] > mx {
                        mx = x[at(j)];
                    }
                }
                let mut denom = S::zero();
                for j in 0..len {
                    let e = (x[at(j)] - mx).exp();
                    out[at(j)] = e;
                    denom += e;
                }
                for j in 0..len {
                    out[at(j)] /= denom;
                }
            }
        }
    }
    let saved = out.clone();
    Ok(Tensor::from_op(
        dims.to_vec(),
        out,
        vec![input.clone()],
        Box::new(move |gy, parents| {
            let mut dx = vec![S::zero(); saved.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let mut dot = S::zero();
                    for j in 0..len {
                        dot += gy[at(j)] * saved[at(j)];
                    }
                    for j in 0..len {
                        dx[at(j)] = saved[at(j)] * (gy[at(j)] - dot);
                    }
                }
            }
            parents[0].accum_grad(&dx);
        }),
    ))
}

// ---------------------------------------------------------------------------
// structural ops
// ---------------------------------------------------------------------------

/// Concatenates tensors along `axis`; all other axes must agree.
pub fn concat<S: Scalar>(inputs: &[&Tensor<S>], axis: usize) -> Result<Tensor<S>> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("concat: no inputs".into()));
    }
    let rank = inputs[0].dims().len();
    if axis >= rank {
        return Err(Error::InvalidArgument(format!("concat: axis {} out of range for rank {}", axis, rank)));
    }
    let mut cat_len = 0usize;
    for t in inputs {
        if t.dims().len() != rank {
            return Err(Error::shape("concat", format!("rank mismatch: {:?} vs {:?}", inputs[0].dims(), t.dims())));
        }
        for d in 0..rank {
            if d != axis && t.dims()[d] != inputs[0].dims()[d] {
                return Err(Error::shape(
                    "concat",
                    format!("axis {} differs: {:?} vs {:?}", d, inputs[0].dims(), t.dims()),
                ));
            }
        }
        cat_len += t.dims()[axis];
    }
    let mut dims = inputs[0].dims().to_vec();
    dims[axis] = cat_len;
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();

    let mut out = vec![S::zero(); outer * cat_len * inner];
    let mut offset = 0usize;
    let mut spans: Vec<usize> = Vec::with_capacity(inputs.len());
    for t in inputs {
        let tl = t.dims()[axis];
        let x = t.data();
        for o in 0..outer {
            let dst = (o * cat_len + offset) * inner;
            let src = o * tl * inner;
            out[dst..dst + tl * inner].copy_from_slice(&x[src..src + tl * inner]);
        }
        spans.push(tl);
        offset += tl;
    }
    let parents: Vec<Tensor<S>> = inputs.iter().map(|t| (*t).clone()).collect();
    Ok(Tensor::from_op(
        dims,
        out,
        parents,
        Box::new(move |gy, parents| {
            let mut offset = 0usize;
            for (t, &tl) in parents.iter().zip(&spans) {
                let mut dx = vec![S::zero(); outer * tl * inner];
                for o in 0..outer {
                    let src = (o * cat_len + offset) * inner;
                    let dst = o * tl * inner;
                    dx[dst..dst + tl * inner].copy_from_slice(&gy[src..src + tl * inner]);
                }
                t.accum_grad(&dx);
                offset += tl;
            }
        }),
    ))
}

fn same_dims<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    same_dims("add", a, b)?;
    let out: Vec<S> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::from_op(
        a.dims().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(|gy, parents| {
            parents[0].accum_grad(gy);
            parents[1].accum_grad(gy);
        }),
    ))
}

pub fn mul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    same_dims("mul", a, b)?;
    let out: Vec<S> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect();
    Ok(Tensor::from_op(
        a.dims().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(|gy, parents| {
            let (av, bv) = (parents[0].data(), parents[1].data());
            let da: Vec<S> = gy.iter().zip(bv.iter()).map(|(&g, &y)| g * y).collect();
            let db: Vec<S> = gy.iter().zip(av.iter()).map(|(&g, &x)| g * x).collect();
            drop(av);
            drop(bv);
            parents[0].accum_grad(&da);
            parents[1].accum_grad(&db);
        }),
    ))
}

pub fn add_scalar<S: Scalar>(a: &Tensor<S>, c: S) -> Tensor<S> {
    let out: Vec<S> = a.data().iter().map(|&x| x + c).collect();
    Tensor::from_op(
        a.dims().to_vec(),
        out,
        vec![a.clone()],
        Box::new(|gy, parents| parents[0].accum_grad(gy)),
    )
}

pub fn scale<S: Scalar>(a: &Tensor<S>, c: S) -> Tensor<S> {
    let out: Vec<S> = a.data().iter().map(|&x| x * c).collect();
    Tensor::from_op(
        a.dims().to_vec(),
        out,
        vec![a.clone()],
        Box::new(move |gy, parents| {
            let dx: Vec<S> = gy.iter().map(|&g| g * c).collect();
            parents[0].accum_grad(&dx);
        }),
    )
}

pub fn sum<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    let mut acc = S::zero();
    for &v in a.data().iter() {
        acc += v;
    }
    let numel = a.numel();
    Tensor::from_op(
        vec![1],
        vec![acc],
        vec![a.clone()],
        Box::new(move |gy, parents| {
            parents[0].accum_grad(&vec![gy[0]; numel]);
        }),
    )
}

/// [N,C,H,W] -> [N,C] spatial mean.
pub fn global_avg_pool<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    check_rank("global_avg_pool", input, 4)?;
    let (n, c, h, w) = (input.dims()[0], input.dims()[1], input.dims()[2], input.dims()[3]);
    let plane = h * w;
    let inv = S::one() / S::from_f64(plane as f64);
    let mut out = vec![S::zero(); n * c];
    {
        let x = input.data();
        for (pi, o) in out.iter_mut().enumerate() {
            let mut acc = S::zero();
            for &v in &x[pi * plane..(pi + 1) * plane] {
                acc += v;
            }
            *o = acc * inv;
        }
    }
    Ok(Tensor::from_op(
        vec![n, c],
        out,
        vec![input.clone()],
        Box::new(move |gy, parents| {
            let mut dx = vec![S::zero(); n * c * plane];
            for (pi, &g) in gy.iter().enumerate() {
                let gv = g * inv;
                for d in &mut dx[pi * plane..(pi + 1) * plane] {
                    *d = gv;
                }
            }
            parents[0].accum_grad(&dx);
        }),
    ))
}

// ---------------------------------------------------------------------------
// cross entropy
// ---------------------------------------------------------------------------

/// Mean over the batch of -log softmax(logits)[label], via log-sum-exp.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<Tensor<S>> {
    check_rank("cross_entropy", logits, 2)?;
    let (n, k) = (logits.dims()[0], logits.dims()[1]);
    if labels.len() != n {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for batch of {}", labels.len(), n),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!(
            "cross_entropy: label {} out of range [0,{})",
            bad, k
        )));
    }
    let mut probs = vec![S::zero(); n * k];
    let mut total = S::zero();
    {
        let x = logits.data();
        for (i, &label) in labels.iter().enumerate() {
            let row = &x[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(row[0], S::max);
            let mut denom = S::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[i * k + j] = e;
                denom += e;
            }
            let lse = mx + denom.ln();
            for p in &mut probs[i * k..(i + 1) * k] {
                *p /= denom;
            }
            total += lse - row[label];
        }
    }
    let inv_n = S::one() / S::from_f64(n as f64);
    let loss = total * inv_n;
    let labels_b = labels.to_vec();
    Ok(Tensor::from_op(
        vec![1],
        vec![loss],
        vec![logits.clone()],
        Box::new(move |gy, parents| {
            let g0 = gy[0] * inv_n;
            let mut dx = probs.clone();
            for (i, &label) in labels_b.iter().enumerate() {
                dx[i * k + label] -= S::one();
            }
            for d in &mut dx {
                *d *= g0;
            }
            parents[0].accum_grad(&dx);
        }),
    ))
}
