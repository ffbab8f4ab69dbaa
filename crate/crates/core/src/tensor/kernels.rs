//! Raw numeric kernels behind the tape ops. All buffers are row-major.

/// Strided view of a matrix for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// The transpose of a stored `rows x cols` matrix.
    pub fn t(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows: cols,
            cols: rows,
            transposed: true,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = beta * out + a * b` where `out` is `a.rows x b.cols`.
pub(crate) fn gemm(a: Mat, b: Mat, out: &mut [f64], beta: f64) {
    assert_eq!(a.cols, b.rows);
    assert_eq!(out.len(), a.rows * b.cols);
    assert!(a.data.len() >= a.rows * a.cols && b.data.len() >= b.rows * b.cols);
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: extents and strides were checked against the buffer lengths above.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        let ph = height + 2 * pad;
        let pw = width + 2 * pad;
        if ph < kh || pw < kw || stride == 0 {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            pad,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one image `[C,H,W]` into `[C*kh*kw, out_h*out_w]`.
pub(crate) fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ol = g.out_len();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ol..(row + 1) * ol];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    for ox in 0..g.out_w {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        dst[oy * g.out_w + ox] = if y >= 0
                            && (y as usize) < g.height
                            && x >= 0
                            && (x as usize) < g.width
                        {
                            img[(c * g.height + y as usize) * g.width + x as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image gradient.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let ol = g.out_len();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ol..(row + 1) * ol];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y as usize >= g.height {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        if x < 0 || x as usize >= g.width {
                            continue;
                        }
                        img[(c * g.height + y as usize) * g.width + x as usize] +=
                            src[oy * g.out_w + ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    batch: usize,
    out_ch: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    let in_len = g.channels * g.height * g.width;
    let ol = g.out_len();
    let mut cols = vec![0.0; g.patch_len() * ol];
    let mut out = vec![0.0; batch * out_ch * ol];
    for b in 0..batch {
        im2col(&x[b * in_len..(b + 1) * in_len], g, &mut cols);
        gemm(
            Mat::new(w, out_ch, g.patch_len()),
            Mat::new(&cols, g.patch_len(), ol),
            &mut out[b * out_ch * ol..(b + 1) * out_ch * ol],
            0.0,
        );
    }
    out
}

/// Returns `(dx, dw)` for a convolution given its upstream gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    grad: &[f64],
    batch: usize,
    out_ch: usize,
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let in_len = g.channels * g.height * g.width;
    let ol = g.out_len();
    let pl = g.patch_len();
    let mut cols = vec![0.0; pl * ol];
    let mut dx = need_dx.then(|| vec![0.0; batch * in_len]);
    let mut dw = need_dw.then(|| vec![0.0; out_ch * pl]);
    for b in 0..batch {
        let gb = &grad[b * out_ch * ol..(b + 1) * out_ch * ol];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[b * in_len..(b + 1) * in_len], g, &mut cols);
            gemm(Mat::new(gb, out_ch, ol), Mat::t(&cols, pl, ol), dw, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(Mat::t(w, out_ch, pl), Mat::new(gb, out_ch, ol), &mut cols, 0.0);
            col2im(&cols, g, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
    (dx, dw)
}

/// Non-overlapping max pooling. Ties resolve to the lowest flat index.
/// Returns the pooled values and, per output, the flat input index chosen.
pub(crate) fn max_pool(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) -> (Vec<f64>, Vec<usize>) {
    let oh = h / kh;
    let ow = w / kw;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for i in 0..kh {
                    for j in 0..kw {
                        let idx = base + (oy * kh + i) * w + ox * kw + j;
                        let v = x[idx];
                        // Row-major scan; strict > keeps the first (lowest) index on ties.
                        if v > best || best_idx == usize::MAX {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

pub(crate) fn mean_pool2x2(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let oh = h / 2;
    let ow = w / 2;
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i = base + 2 * oy * w + 2 * ox;
                out.push(0.25 * (x[i] + x[i + 1] + x[i + w] + x[i + w + 1]));
            }
        }
    }
    out
}

pub(crate) fn mean_pool2x2_backward(g: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let oh = h / 2;
    let ow = w / 2;
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let v = 0.25 * g[(p * oh + oy) * ow + ox];
                let i = base + 2 * oy * w + 2 * ox;
                dx[i] += v;
                dx[i + 1] += v;
                dx[i + w] += v;
                dx[i + w + 1] += v;
            }
        }
    }
    dx
}

pub(crate) fn upsample2x(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let ow = 2 * w;
    let mut out = vec![0.0; planes * 4 * h * w];
    for p in 0..planes {
        for y in 0..2 * h {
            for xx in 0..ow {
                out[(p * 2 * h + y) * ow + xx] = x[(p * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward(g: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let ow = 2 * w;
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for y in 0..2 * h {
            for xx in 0..ow {
                dx[(p * h + y / 2) * w + xx / 2] += g[(p * 2 * h + y) * ow + xx];
            }
        }
    }
    dx
}

/// `[B,C,H,W]` to `[B*H*W, C]`.
pub(crate) fn channels_last(x: &[f64], b: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            for p in 0..hw {
                out[(bi * hw + p) * c + ci] = x[(bi * c + ci) * hw + p];
            }
        }
    }
    out
}

/// `[B*H*W, C]` to `[B,C,H,W]`.
pub(crate) fn channels_first(x: &[f64], b: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            for p in 0..hw {
                out[(bi * c + ci) * hw + p] = x[(bi * hw + p) * c + ci];
            }
        }
    }
    out
}

pub(crate) fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// Row-wise softmax over the last axis, shifted by the row max.
pub(crate) fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - m).exp();
            z += *d;
        }
        for d in dst.iter_mut() {
            *d /= z;
        }
    }
    out
}
