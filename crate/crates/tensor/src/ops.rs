//! Forward and backward kernels for the layer primitives.
//!
//! The functions here work on plain tensors; [`crate::graph::Graph`] records
//! them on a tape. Batch samples are processed in parallel and every
//! cross-sample reduction is summed in sample order, so results do not depend
//! on the number of worker threads.

use rayon::prelude::*;

use crate::error::{shape_err, Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub padding: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        bias: &[usize],
        padding: usize,
        stride: usize,
    ) -> Result<Self> {
        let (n, cin, h, w) = match *input {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(shape_err("conv2d", format!("input must be rank 4, got {input:?}"))),
        };
        let (cout, kcin, kh, kw) = match *kernel {
            [o, i, kh, kw] => (o, i, kh, kw),
            _ => return Err(shape_err("conv2d", format!("kernel must be rank 4, got {kernel:?}"))),
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::Config(format!(
                "conv2d kernel extents must be odd, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(TensorError::Config("conv2d stride must be >= 1".into()));
        }
        if kcin != cin {
            return Err(shape_err(
                "conv2d",
                format!("kernel expects {kcin} input channels, input has {cin}"),
            ));
        }
        if bias != [cout] {
            return Err(shape_err(
                "conv2d",
                format!("bias shape {bias:?} does not match {cout} output channels"),
            ));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(shape_err(
                "conv2d",
                format!("{h}x{w} input with padding {padding} is smaller than {kh}x{kw} kernel"),
            ));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            padding,
            stride,
            ho,
            wo,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.padding == 0 && self.stride == 1
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.ho, self.wo]
    }
}

/// Unfolds one `[Cin, H, W]` sample into a `[Cin*kH*kW, Ho*Wo]` matrix.
fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.out_plane();
    let pad = g.padding as isize;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into a `[Cin, H, W]` sample.
fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let p = g.out_plane();
    let pad = g.padding as isize;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `input` with `kernel` plus a per-channel bias.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    padding: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), bias.shape(), padding, stride)?;
    let mut out = Tensor::zeros(&g.output_shape());
    let (k, p) = (g.patch_len(), g.out_plane());
    let w = kernel.data();
    let b = bias.data();
    out.data_mut()
        .par_chunks_mut(g.cout * p)
        .zip(input.data().par_chunks(g.cin * g.h * g.w))
        .for_each(|(o, x)| {
            for (co, row) in o.chunks_mut(p).enumerate() {
                row.fill(b[co]);
            }
            if g.is_pointwise() {
                T::gemm(g.cout, k, p, w, (k as isize, 1), x, (p as isize, 1), T::one(), o, (p as isize, 1));
            } else {
                let mut cols = vec![T::zero(); k * p];
                im2col(&g, x, &mut cols);
                T::gemm(g.cout, k, p, w, (k as isize, 1), &cols, (p as isize, 1), T::one(), o, (p as isize, 1));
            }
        });
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of [`conv2d`] given the upstream gradient `dout`.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    dout: &Tensor<T>,
    padding: usize,
    stride: usize,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(
        input.shape(),
        kernel.shape(),
        &[kernel.shape()[0]],
        padding,
        stride,
    )?;
    if dout.shape() != g.output_shape() {
        return Err(shape_err(
            "conv2d_backward",
            format!("dout {:?} vs expected {:?}", dout.shape(), g.output_shape()),
        ));
    }
    let (k, p) = (g.patch_len(), g.out_plane());
    let w = kernel.data();
    // per sample: (d_kernel, d_bias, d_input)
    type Parts<T> = (Vec<T>, Vec<T>, Option<Vec<T>>);
    let per_sample: Vec<Parts<T>> = input
        .data()
        .par_chunks(g.cin * g.h * g.w)
        .zip(dout.data().par_chunks(g.cout * p))
        .map(|(x, dy)| {
            let cols_owned;
            let cols: &[T] = if g.is_pointwise() {
                x
            } else {
                let mut c = vec![T::zero(); k * p];
                im2col(&g, x, &mut c);
                cols_owned = c;
                &cols_owned
            };
            let mut dw = vec![T::zero(); g.cout * k];
            // dW[cout, k] = dy[cout, p] * cols[k, p]^T
            T::gemm(g.cout, p, k, dy, (p as isize, 1), cols, (1, p as isize), T::zero(), &mut dw, (k as isize, 1));
            let db: Vec<T> = dy.chunks(p).map(|row| row.iter().copied().sum()).collect();
            let dx = need_input.then(|| {
                let mut dcols = vec![T::zero(); k * p];
                // dcols[k, p] = W[cout, k]^T * dy[cout, p]
                T::gemm(k, g.cout, p, w, (1, k as isize), dy, (p as isize, 1), T::zero(), &mut dcols, (p as isize, 1));
                if g.is_pointwise() {
                    dcols
                } else {
                    let mut dx = vec![T::zero(); g.cin * g.h * g.w];
                    col2im(&g, &dcols, &mut dx);
                    dx
                }
            });
            (dw, db, dx)
        })
        .collect();

    let mut dkernel = Tensor::zeros(kernel.shape());
    let mut dbias = Tensor::zeros(&[g.cout]);
    let mut dinput = need_input.then(|| Vec::with_capacity(input.numel()));
    for (dw, db, dx) in per_sample {
        add_into(dkernel.data_mut(), &dw);
        add_into(dbias.data_mut(), &db);
        if let (Some(acc), Some(dx)) = (dinput.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
    }
    Ok(ConvGrads {
        input: dinput.map(|d| Tensor::new(input.shape(), d)).transpose()?,
        kernel: dkernel,
        bias: dbias,
    })
}

pub(crate) fn add_into<T: Real>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// 2x2 max-pooling with stride 2. Returns the pooled tensor and, for each
/// output element, the flat input index it was taken from (first maximum in
/// row-major window order).
pub fn maxpool2_with_argmax<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::Input(format!(
            "maxpool2 needs even spatial extents, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];
    let x = input.data();
    out.data_mut()
        .par_chunks_mut(oh * ow)
        .zip(argmax.par_chunks_mut(oh * ow))
        .enumerate()
        .for_each(|(plane, (o, am))| {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    o[oy * ow + ox] = x[best];
                    am[oy * ow + ox] = best;
                }
            }
        });
    Ok((out, argmax))
}

pub fn maxpool2<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    maxpool2_with_argmax(input).map(|(out, _)| out)
}

pub fn maxpool2_backward<T: Real>(
    input_shape: &[usize],
    argmax: &[usize],
    dout: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(dout.data()) {
        d[idx] += g;
    }
    dx
}

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

pub fn relu_backward<T: Real>(input: &Tensor<T>, dout: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(dout.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape(), data).expect("same shape")
}

fn dense_dims(input: &[usize], weight: &[usize], bias: &[usize]) -> Result<(usize, usize, usize)> {
    let (n, d) = match *input {
        [n, d] => (n, d),
        _ => return Err(shape_err("dense", format!("input must be [N, D], got {input:?}"))),
    };
    let m = match *weight {
        [wd, m] if wd == d => m,
        _ => {
            return Err(shape_err(
                "dense",
                format!("weight {weight:?} incompatible with input {input:?}"),
            ))
        }
    };
    if bias != [m] {
        return Err(shape_err("dense", format!("bias {bias:?} vs {m} outputs")));
    }
    Ok((n, d, m))
}

/// Affine map `x W + b` for `x: [N, D]`, `W: [D, M]`, `b: [M]`.
pub fn dense<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d, m) = dense_dims(input.shape(), weight.shape(), bias.shape())?;
    let mut out = Tensor::zeros(&[n, m]);
    for row in out.data_mut().chunks_mut(m) {
        row.copy_from_slice(bias.data());
    }
    T::gemm(n, d, m, input.data(), (d as isize, 1), weight.data(), (m as isize, 1), T::one(), out.data_mut(), (m as isize, 1));
    Ok(out)
}

pub struct DenseGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn dense_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    dout: &Tensor<T>,
    need_input: bool,
) -> Result<DenseGrads<T>> {
    let (n, d, m) = dense_dims(input.shape(), weight.shape(), &[weight.shape()[1]])?;
    if dout.shape() != [n, m] {
        return Err(shape_err("dense_backward", format!("dout {:?}", dout.shape())));
    }
    let mut dw = Tensor::zeros(&[d, m]);
    // dW[d, m] = x[n, d]^T * dy[n, m]
    T::gemm(d, n, m, input.data(), (1, d as isize), dout.data(), (m as isize, 1), T::zero(), dw.data_mut(), (m as isize, 1));
    let mut db = Tensor::zeros(&[m]);
    for row in dout.data().chunks(m) {
        add_into(db.data_mut(), row);
    }
    let dx = need_input.then(|| {
        let mut dx = Tensor::zeros(&[n, d]);
        // dx[n, d] = dy[n, m] * W[d, m]^T
        T::gemm(n, m, d, dout.data(), (m as isize, 1), weight.data(), (1, m as isize), T::zero(), dx.data_mut(), (d as isize, 1));
        dx
    });
    Ok(DenseGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

fn delta_check<T: Real>(after: &Tensor<T>, before: &Tensor<T>, lambda: &Tensor<T>) -> Result<(usize, usize)> {
    if after.shape() != before.shape() {
        return Err(shape_err(
            "delta_layer",
            format!("after {:?} vs before {:?}", after.shape(), before.shape()),
        ));
    }
    let (_, c, h, w) = after.dims4()?;
    if lambda.rank() != 1 || (lambda.numel() != c && lambda.numel() != 1) {
        return Err(shape_err(
            "delta_layer",
            format!("lambda {:?} does not match {c} channels", lambda.shape()),
        ));
    }
    Ok((c, h * w))
}

#[inline]
fn lambda_at<T: Real>(lambda: &[T], c: usize) -> T {
    if lambda.len() == 1 {
        lambda[0]
    } else {
        lambda[c]
    }
}

/// `max(0, after - lambda[c] * before)` per channel `c`. A length-1 `lambda`
/// is shared by all channels.
pub fn delta_layer<T: Real>(after: &Tensor<T>, before: &Tensor<T>, lambda: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, plane) = delta_check(after, before, lambda)?;
    let lam = lambda.data();
    let data = after
        .data()
        .iter()
        .zip(before.data())
        .enumerate()
        .map(|(i, (&a, &b))| {
            let v = a - lambda_at(lam, (i / plane) % c) * b;
            if v > T::zero() {
                v
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::new(after.shape(), data)
}

pub struct DeltaGrads<T> {
    pub after: Tensor<T>,
    pub before: Tensor<T>,
    pub lambda: Tensor<T>,
}

pub fn delta_layer_backward<T: Real>(
    after: &Tensor<T>,
    before: &Tensor<T>,
    lambda: &Tensor<T>,
    dout: &Tensor<T>,
) -> Result<DeltaGrads<T>> {
    let (c, plane) = delta_check(after, before, lambda)?;
    let lam = lambda.data();
    let mut da = Tensor::zeros(after.shape());
    let mut db = Tensor::zeros(after.shape());
    let mut dl = Tensor::zeros(lambda.shape());
    let (a, b, g) = (after.data(), before.data(), dout.data());
    let (da_s, db_s) = (da.data_mut(), db.data_mut());
    let dl_s = dl.data_mut();
    for i in 0..a.len() {
        let ch = (i / plane) % c;
        let l = lambda_at(lam, ch);
        if a[i] - l * b[i] > T::zero() {
            da_s[i] = g[i];
            db_s[i] = -l * g[i];
            dl_s[if lam.len() == 1 { 0 } else { ch }] -= g[i] * b[i];
        }
    }
    Ok(DeltaGrads {
        after: da,
        before: db,
        lambda: dl,
    })
}

/// Interpolation table for corner-aligned bilinear resampling of one axis.
#[derive(Clone, Debug)]
pub struct LerpAxis<T> {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<T>,
}

impl<T: Real> LerpAxis<T> {
    pub fn new(src: usize, dst: usize) -> Self {
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for i in 0..dst {
            let pos = if dst == 1 || src == 1 {
                0.0
            } else {
                (i * (src - 1)) as f64 / (dst - 1) as f64
            };
            let l = (pos.floor() as usize).min(src - 1);
            lo.push(l);
            hi.push((l + 1).min(src - 1));
            frac.push(T::lit(pos - l as f64));
        }
        Self { lo, hi, frac }
    }
}

#[inline]
fn lerp<T: Real>(a: T, b: T, f: T) -> T {
    let v = a + (b - a) * f;
    v.max(a.min(b)).min(a.max(b))
}

fn resize_planes<T: Real>(x: &[T], h: usize, w: usize, oh: usize, ow: usize, out: &mut [T]) {
    let ay = LerpAxis::<T>::new(h, oh);
    let ax = LerpAxis::<T>::new(w, ow);
    out.par_chunks_mut(oh * ow)
        .zip(x.par_chunks(h * w))
        .for_each(|(o, p)| {
            for oy in 0..oh {
                let (r0, r1, fy) = (ay.lo[oy] * w, ay.hi[oy] * w, ay.frac[oy]);
                for ox in 0..ow {
                    let (c0, c1, fx) = (ax.lo[ox], ax.hi[ox], ax.frac[ox]);
                    let top = lerp(p[r0 + c0], p[r0 + c1], fx);
                    let bottom = lerp(p[r1 + c0], p[r1 + c1], fx);
                    o[oy * ow + ox] = lerp(top, bottom, fy);
                }
            }
        });
}

/// Corner-aligned bilinear resampling of the trailing two axes of a rank-3
/// or rank-4 tensor. Equal sizes return an exact copy; outputs never leave the
/// range spanned by the neighbouring input values.
pub fn resize_bilinear<T: Real>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(TensorError::Config(format!(
            "resize target must be >= 1, got {out_h}x{out_w}"
        )));
    }
    let rank = input.rank();
    if rank < 3 {
        return Err(shape_err("resize_bilinear", format!("rank {rank} input")));
    }
    let (h, w) = (input.shape()[rank - 2], input.shape()[rank - 1]);
    if (h, w) == (out_h, out_w) {
        return Ok(input.clone());
    }
    let mut shape = input.shape().to_vec();
    shape[rank - 2] = out_h;
    shape[rank - 1] = out_w;
    let mut out = Tensor::zeros(&shape);
    resize_planes(input.data(), h, w, out_h, out_w, out.data_mut());
    Ok(out)
}

/// Adjoint of [`resize_bilinear`] (ignoring the range clamp, which only moves
/// values by rounding error).
pub fn resize_bilinear_backward<T: Real>(input_shape: &[usize], dout: &Tensor<T>) -> Tensor<T> {
    let rank = input_shape.len();
    let (h, w) = (input_shape[rank - 2], input_shape[rank - 1]);
    let (oh, ow) = (dout.shape()[rank - 2], dout.shape()[rank - 1]);
    if (h, w) == (oh, ow) {
        return dout.clone();
    }
    let ay = LerpAxis::<T>::new(h, oh);
    let ax = LerpAxis::<T>::new(w, ow);
    let mut dx = Tensor::zeros(input_shape);
    dx.data_mut()
        .par_chunks_mut(h * w)
        .zip(dout.data().par_chunks(oh * ow))
        .for_each(|(d, g)| {
            for oy in 0..oh {
                let (r0, r1, fy) = (ay.lo[oy] * w, ay.hi[oy] * w, ay.frac[oy]);
                for ox in 0..ow {
                    let (c0, c1, fx) = (ax.lo[ox], ax.hi[ox], ax.frac[ox]);
                    let v = g[oy * ow + ox];
                    let top = v * (T::one() - fy);
                    let bottom = v * fy;
                    d[r0 + c0] += top * (T::one() - fx);
                    d[r0 + c1] += top * fx;
                    d[r1 + c0] += bottom * (T::one() - fx);
                    d[r1 + c1] += bottom * fx;
                }
            }
        });
    dx
}

/// Row-wise softmax of `[N, K]` logits.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let k = match *logits.shape() {
        [_, k] => k,
        _ => return Err(shape_err("softmax", format!("expected [N, K], got {:?}", logits.shape()))),
    };
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Ok(out)
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
/// Returns the loss and the softmax probabilities.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (n, k) = match *logits.shape() {
        [n, k] => (n, k),
        _ => return Err(shape_err("softmax_cross_entropy", format!("{:?}", logits.shape()))),
    };
    if labels.len() != n {
        return Err(shape_err(
            "softmax_cross_entropy",
            format!("{} labels for batch of {n}", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(TensorError::Input(format!("label {bad} out of range for {k} classes")));
    }
    let probs = softmax(logits)?;
    let mut loss = T::zero();
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        loss += lse - row[label];
    }
    Ok((loss / T::lit(n as f64), probs))
}

pub fn sigmoid<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|z| T::one() / (T::one() + (-z).exp()))
}

/// Neumaier-compensated sum: `(s, c)` with the exact sum close to `s + c`.
pub fn compensated_sum<T: Real>(values: impl IntoIterator<Item = T>) -> (T, T) {
    let (mut s, mut c) = (T::zero(), T::zero());
    for v in values {
        let t = s + v;
        c += if s.abs() >= v.abs() { (s - t) + v } else { (v - t) + s };
        s = t;
    }
    (s, c)
}

/// Mean binary cross-entropy between `sigmoid(logits)` and `targets`,
/// evaluated in the overflow-free form `max(z,0) - z*y + ln(1 + e^-|z|)`.
pub fn bce_with_logits<T: Real>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<T> {
    bce_with_logits_precise(logits, targets).map(|(mean, _)| mean)
}

/// [`bce_with_logits`] plus the low-order part lost when rounding the mean,
/// so that `mean + residual` carries the reduction without accumulated
/// rounding error.
pub fn bce_with_logits_precise<T: Real>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<(T, T)> {
    if logits.shape() != targets.shape() {
        return Err(shape_err(
            "bce_with_logits",
            format!("{:?} vs {:?}", logits.shape(), targets.shape()),
        ));
    }
    let (s, c) = compensated_sum(
        logits
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()),
    );
    let n = T::lit(logits.numel() as f64);
    let total = s + c;
    let total_err = c - (total - s);
    let mean = total / n;
    let remainder = (-mean).mul_add(n, total);
    Ok((mean, (remainder + total_err) / n))
}
