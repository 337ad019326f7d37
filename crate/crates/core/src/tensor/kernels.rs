//! Raw numeric kernels over flat row-major buffers. No graph bookkeeping here.

/// `c (m×n) = a (m×k) · b (k×n) + beta·c`, with explicit strides so callers
/// can pass transposed views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller guarantees that the strided views lie inside the
    // slices; every call site below derives the strides from the same
    // dimensions used to allocate the buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        if stride == 0 || kernel == 0 {
            return None;
        }
        let ph = height + 2 * padding;
        let pw = width + 2 * padding;
        if ph < kernel || pw < kernel {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_h: (ph - kernel) / stride + 1,
            out_w: (pw - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold one `[C, H, W]` image into a `[C·K·K, Ho·Wo]` patch matrix.
pub(crate) fn im2col(img: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let cols = g.col_cols();
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back into an image.
pub(crate) fn col2im(col: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let cols = g.col_cols();
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            plane[base + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 1-D area-resampling matrix `[out, inp]`: output cell `j` averages the input
/// interval `[j·inp/out, (j+1)·inp/out)`, weighting partially covered input
/// cells by their overlap. For `inp % out == 0` this is exactly block
/// averaging.
pub(crate) fn area_weights(inp: usize, out: usize) -> Vec<f64> {
    let mut w = vec![0.0; out * inp];
    // Work in units of 1/out so every boundary is an integer.
    for j in 0..out {
        let lo = j * inp;
        let hi = (j + 1) * inp;
        for i in 0..inp {
            let a = (i * out).max(lo);
            let b = ((i + 1) * out).min(hi);
            if b > a {
                w[j * inp + i] = (b - a) as f64 / inp as f64;
            }
        }
    }
    w
}

/// Apply `Y = Ry · X · Rxᵀ` to each `[h, w]` plane of `x`.
pub(crate) fn resample_planes(
    x: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    ry: &[f64],
    rx: &[f64],
    out: &mut [f64],
) {
    let mut tmp = vec![0.0; oh * w];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        gemm(
            oh,
            h,
            w,
            ry,
            (h as isize, 1),
            src,
            (w as isize, 1),
            0.0,
            &mut tmp,
        );
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        gemm(
            oh,
            w,
            ow,
            &tmp,
            (w as isize, 1),
            rx,
            (1, w as isize),
            0.0,
            dst,
        );
    }
}

/// Adjoint of [`resample_planes`]: `dX += Ryᵀ · dY · Rx`.
pub(crate) fn resample_planes_adjoint(
    dy: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    ry: &[f64],
    rx: &[f64],
    dx: &mut [f64],
) {
    let mut tmp = vec![0.0; h * ow];
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        gemm(
            h,
            oh,
            ow,
            ry,
            (1, h as isize),
            src,
            (ow as isize, 1),
            0.0,
            &mut tmp,
        );
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        gemm(
            h,
            ow,
            w,
            &tmp,
            (ow as isize, 1),
            rx,
            (w as isize, 1),
            1.0,
            dst,
        );
    }
}

pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}
