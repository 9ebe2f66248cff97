//! Convolution and transposed convolution via im2col + GEMM.
//!
//! Both ops share one sliding-window geometry: a "big" grid position relates
//! to a "small" grid position as `big = small * stride + tap - pad`. For a
//! strided convolution the input is big and the output small; for the
//! transposed convolution it is the other way round, which is what makes the
//! two exact adjoints of each other.

use super::{gemm, FeatureGrid, MatRef, Real};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug)]
struct Window {
    k: usize,
    stride: usize,
    pad: usize,
    big: (usize, usize),
    small: (usize, usize),
}

impl Window {
    fn taps(&self) -> usize {
        self.k * self.k
    }

    fn small_len(&self) -> usize {
        self.small.0 * self.small.1
    }

    /// Big-grid coordinate for small index `o` and kernel tap `t`.
    #[inline]
    fn big_coord(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + t) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

/// `col[(c, ky, kx), (sy, sx)] = big[c, big(sy, ky), big(sx, kx)]`, zero outside.
fn im2col<T: Real>(big: &[T], channels: usize, win: &Window, col: &mut [T]) {
    let (bh, bw) = win.big;
    let (sh, sw) = win.small;
    let p = win.small_len();
    for c in 0..channels {
        let plane = &big[c * bh * bw..(c + 1) * bh * bw];
        for ky in 0..win.k {
            for kx in 0..win.k {
                let row = (c * win.k + ky) * win.k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for sy in 0..sh {
                    let out = &mut dst[sy * sw..(sy + 1) * sw];
                    let Some(iy) = win.big_coord(sy, ky, bh) else {
                        out.fill(T::zero());
                        continue;
                    };
                    let src = &plane[iy * bw..(iy + 1) * bw];
                    for (sx, o) in out.iter_mut().enumerate() {
                        *o = match win.big_coord(sx, kx, bw) {
                            Some(ix) => src[ix],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into the big grid.
fn col2im<T: Real>(col: &[T], channels: usize, win: &Window, big: &mut [T]) {
    let (bh, bw) = win.big;
    let (sh, sw) = win.small;
    let p = win.small_len();
    for c in 0..channels {
        let plane = &mut big[c * bh * bw..(c + 1) * bh * bw];
        for ky in 0..win.k {
            for kx in 0..win.k {
                let row = (c * win.k + ky) * win.k + kx;
                let src = &col[row * p..(row + 1) * p];
                for sy in 0..sh {
                    let Some(iy) = win.big_coord(sy, ky, bh) else {
                        continue;
                    };
                    let dst = &mut plane[iy * bw..(iy + 1) * bw];
                    for (sx, &v) in src[sy * sw..(sy + 1) * sw].iter().enumerate() {
                        if let Some(ix) = win.big_coord(sx, kx, bw) {
                            dst[ix] = dst[ix] + v;
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<T: Real>(bias: Option<&FeatureGrid<T>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.numel() != channels {
            return Err(shape_err!(
                "bias has {} entries, expected {channels}",
                b.numel()
            ));
        }
    }
    Ok(())
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
}

fn bias_grad<T: Real>(dy: &FeatureGrid<T>) -> FeatureGrid<T> {
    let [n, c, _, _] = dy.shape();
    let mut db = FeatureGrid::zeros([1, c, 1, 1]);
    for b in 0..n {
        for ch in 0..c {
            let s = dy.plane(b, ch).iter().fold(T::zero(), |a, &v| a + v);
            db.data_mut()[ch] = db.data()[ch] + s;
        }
    }
    db
}

fn conv_window(input: [usize; 4], k: usize, stride: usize) -> Window {
    let (h, w) = (input[2], input[3]);
    Window {
        k,
        stride,
        pad: (k - 1) / 2,
        big: (h, w),
        small: (h.div_ceil(stride), w.div_ceil(stride)),
    }
}

fn tconv_window(input: [usize; 4], k: usize, stride: usize) -> Window {
    let (h, w) = (input[2], input[3]);
    Window {
        k,
        stride,
        pad: (k + 1 - stride) / 2,
        big: (h * stride, w * stride),
        small: (h, w),
    }
}

fn check_conv<T: Real>(
    input: &FeatureGrid<T>,
    weight: &FeatureGrid<T>,
    bias: Option<&FeatureGrid<T>>,
    stride: usize,
) -> Result<(usize, usize)> {
    let [co, ci, kh, kw] = weight.shape();
    if ci != input.channels() {
        return Err(shape_err!(
            "conv2d: weight expects {ci} input channels, input has {}",
            input.channels()
        ));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(shape_err!("conv2d: kernel must be square and odd, got {kh}x{kw}"));
    }
    if stride == 0 {
        return Err(shape_err!("conv2d: stride must be positive"));
    }
    check_bias(bias, co)?;
    Ok((co, kh))
}

/// Cross-correlation with implicit "same" zero padding.
///
/// `weight` is `C_out x C_in x k x k`; output spatial size is `ceil(in / stride)`.
pub fn conv2d<T: Real>(
    input: &FeatureGrid<T>,
    weight: &FeatureGrid<T>,
    bias: Option<&FeatureGrid<T>>,
    stride: usize,
) -> Result<FeatureGrid<T>> {
    let (co, k) = check_conv(input, weight, bias, stride)?;
    let win = conv_window(input.shape(), k, stride);
    let ci = input.channels();
    let q = ci * win.taps();
    let p = win.small_len();
    let mut out = FeatureGrid::zeros([input.batch(), co, win.small.0, win.small.1]);
    let mut col = vec![T::zero(); q * p];
    for b in 0..input.batch() {
        im2col(input.sample(b), ci, &win, &mut col);
        let dst = out.sample_mut(b);
        gemm(
            co,
            q,
            p,
            MatRef::row_major(weight.data(), q),
            MatRef::row_major(&col, p),
            T::zero(),
            dst,
        );
        if let Some(bias) = bias {
            add_bias(dst, bias.data(), p);
        }
    }
    Ok(out)
}

/// Gradients of a convolution-like op. Entries are `None` when not requested.
#[derive(Debug)]
pub struct ConvGrads<T> {
    pub input: Option<FeatureGrid<T>>,
    pub weight: FeatureGrid<T>,
    pub bias: Option<FeatureGrid<T>>,
}

/// Vector-Jacobian product of [`conv2d`].
pub fn conv2d_backward<T: Real>(
    input: &FeatureGrid<T>,
    weight: &FeatureGrid<T>,
    has_bias: bool,
    stride: usize,
    grad_out: &FeatureGrid<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let (co, k) = check_conv(input, weight, None, stride)?;
    let win = conv_window(input.shape(), k, stride);
    grad_out.expect_shape(
        [input.batch(), co, win.small.0, win.small.1],
        "conv2d backward grad",
    )?;
    let ci = input.channels();
    let q = ci * win.taps();
    let p = win.small_len();
    let mut col = vec![T::zero(); q * p];
    let mut dweight = FeatureGrid::zeros(weight.shape());
    let mut dinput = need_input.then(|| FeatureGrid::zeros(input.shape()));
    for b in 0..input.batch() {
        let dy = grad_out.sample(b);
        im2col(input.sample(b), ci, &win, &mut col);
        // dW += dY * col^T
        gemm(
            co,
            p,
            q,
            MatRef::row_major(dy, p),
            MatRef::transposed(&col, p),
            T::one(),
            dweight.data_mut(),
        );
        if let Some(dx) = dinput.as_mut() {
            // dcol = W^T * dY, then fold back.
            gemm(
                q,
                co,
                p,
                MatRef::transposed(weight.data(), q),
                MatRef::row_major(dy, p),
                T::zero(),
                &mut col,
            );
            col2im(&col, ci, &win, dx.sample_mut(b));
        }
    }
    Ok(ConvGrads {
        input: dinput,
        weight: dweight,
        bias: has_bias.then(|| bias_grad(grad_out)),
    })
}

fn check_tconv<T: Real>(
    input: &FeatureGrid<T>,
    weight: &FeatureGrid<T>,
    bias: Option<&FeatureGrid<T>>,
    stride: usize,
) -> Result<(usize, usize)> {
    let [ci, co, kh, kw] = weight.shape();
    if ci != input.channels() {
        return Err(shape_err!(
            "conv_transpose2d: weight expects {ci} input channels, input has {}",
            input.channels()
        ));
    }
    if kh != kw {
        return Err(shape_err!("conv_transpose2d: kernel must be square, got {kh}x{kw}"));
    }
    if !(1..=2).contains(&stride) {
        return Err(shape_err!("conv_transpose2d: stride must be 1 or 2, got {stride}"));
    }
    check_bias(bias, co)?;
    Ok((co, kh))
}

/// Fractionally strided convolution, the adjoint of a strided [`conv2d`].
///
/// `weight` is `C_in x C_out x k x k`; output spatial size is `in * stride`.
/// Input cell `(y, x)` scatters into output rows `y * stride + ky - pad` with
/// `pad = (k + 1 - stride) / 2`, so a `2x2` stride-2 kernel expands each cell
/// into a `2x2` block and a `3x3` stride-1 kernel is a "same" convolution.
pub fn conv_transpose2d<T: Real>(
    input: &FeatureGrid<T>,
    weight: &FeatureGrid<T>,
    bias: Option<&FeatureGrid<T>>,
    stride: usize,
) -> Result<FeatureGrid<T>> {
    let (co, k) = check_tconv(input, weight, bias, stride)?;
    let win = tconv_window(input.shape(), k, stride);
    let ci = input.channels();
    let q = co * win.taps();
    let p = win.small_len();
    let mut out = FeatureGrid::zeros([input.batch(), co, win.big.0, win.big.1]);
    let mut col = vec![T::zero(); q * p];
    for b in 0..input.batch() {
        gemm(
            q,
            ci,
            p,
            MatRef::transposed(weight.data(), q),
            MatRef::row_major(input.sample(b), p),
            T::zero(),
            &mut col,
        );
        let dst = out.sample_mut(b);
        col2im(&col, co, &win, dst);
        if let Some(bias) = bias {
            add_bias(dst, bias.data(), win.big.0 * win.big.1);
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of [`conv_transpose2d`].
pub fn conv_transpose2d_backward<T: Real>(
    input: &FeatureGrid<T>,
    weight: &FeatureGrid<T>,
    has_bias: bool,
    stride: usize,
    grad_out: &FeatureGrid<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let (co, k) = check_tconv(input, weight, None, stride)?;
    let win = tconv_window(input.shape(), k, stride);
    grad_out.expect_shape(
        [input.batch(), co, win.big.0, win.big.1],
        "conv_transpose2d backward grad",
    )?;
    let ci = input.channels();
    let q = co * win.taps();
    let p = win.small_len();
    let mut dcol = vec![T::zero(); q * p];
    let mut dweight = FeatureGrid::zeros(weight.shape());
    let mut dinput = need_input.then(|| FeatureGrid::zeros(input.shape()));
    for b in 0..input.batch() {
        im2col(grad_out.sample(b), co, &win, &mut dcol);
        // dW[ci, q] += sum_p x[ci, p] * dcol[q, p]
        gemm(
            ci,
            p,
            q,
            MatRef::row_major(input.sample(b), p),
            MatRef::transposed(&dcol, p),
            T::one(),
            dweight.data_mut(),
        );
        if let Some(dx) = dinput.as_mut() {
            gemm(
                ci,
                q,
                p,
                MatRef::row_major(weight.data(), q),
                MatRef::row_major(&dcol, p),
                T::zero(),
                dx.sample_mut(b),
            );
        }
    }
    Ok(ConvGrads {
        input: dinput,
        weight: dweight,
        bias: has_bias.then(|| bias_grad(grad_out)),
    })
}
