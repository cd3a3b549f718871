use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Geometry of a 2-d convolution over an `N x C x H x W` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::shape("conv2d", x, w));
        }
        if x[1] != w[1] {
            return Err(Error::shape("conv2d", x, w));
        }
        if stride == 0 {
            return Err(Error::op("conv2d", "stride must be >= 1"));
        }
        let (kh, kw) = (w[2], w[3]);
        if x[2] + 2 * pad < kh || x[3] + 2 * pad < kw {
            return Err(Error::op(
                "conv2d",
                format!(
                    "input {:?} smaller than kernel {kh}x{kw} with padding {pad}",
                    x
                ),
            ));
        }
        Ok(ConvGeom {
            batch: x[0],
            in_ch: x[1],
            in_h: x[2],
            in_w: x[3],
            out_ch: w[0],
            kh,
            kw,
            stride,
            pad,
            out_h: (x[2] + 2 * pad - kh) / stride + 1,
            out_w: (x[3] + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_ch, self.out_h, self.out_w]
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_pixels(&self) -> usize {
        self.in_h * self.in_w
    }

    /// 1x1, stride 1, no padding: the input plane already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let opix = self.out_pixels();
        for c in 0..self.in_ch {
            let plane = &x[c * self.in_pixels()..(c + 1) * self.in_pixels()];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * opix..(row + 1) * opix];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.in_h as isize {
                            line.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.in_w as isize {
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

    fn col2im<T: Scalar>(&self, col: &[T], dx: &mut [T]) {
        let opix = self.out_pixels();
        for c in 0..self.in_ch {
            let plane = &mut dx[c * self.in_pixels()..(c + 1) * self.in_pixels()];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &col[row * opix..(row + 1) * opix];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let line = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        let dst = &mut plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for (ox, v) in line.iter().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.in_w as isize {
                                dst[ix as usize] += *v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub(crate) fn forward<T: Scalar>(&self, x: &[T], w: &[T]) -> Vec<T> {
        let (rows, opix) = (self.col_rows(), self.out_pixels());
        let in_size = self.in_ch * self.in_pixels();
        let out_size = self.out_ch * opix;
        let mut out = vec![T::zero(); self.batch * out_size];
        let mut col = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * opix]
        };
        for n in 0..self.batch {
            let xs = &x[n * in_size..(n + 1) * in_size];
            let cols: &[T] = if self.is_pointwise() {
                xs
            } else {
                self.im2col(xs, &mut col);
                &col
            };
            T::gemm(
                false,
                false,
                self.out_ch,
                opix,
                rows,
                T::one(),
                w,
                cols,
                T::zero(),
                &mut out[n * out_size..(n + 1) * out_size],
            );
        }
        out
    }

    /// Returns `(dx, dw)` for upstream gradient `dy`; either may be skipped.
    pub(crate) fn backward<T: Scalar>(
        &self,
        x: &[T],
        w: &[T],
        dy: &[T],
        want_dx: bool,
        want_dw: bool,
    ) -> (Option<Vec<T>>, Option<Vec<T>>) {
        let (rows, opix) = (self.col_rows(), self.out_pixels());
        let in_size = self.in_ch * self.in_pixels();
        let out_size = self.out_ch * opix;
        let mut dx = want_dx.then(|| vec![T::zero(); self.batch * in_size]);
        let mut dw = want_dw.then(|| vec![T::zero(); w.len()]);
        let mut col = vec![T::zero(); rows * opix];
        let mut dcol = if want_dx && !self.is_pointwise() {
            vec![T::zero(); rows * opix]
        } else {
            Vec::new()
        };
        for n in 0..self.batch {
            let xs = &x[n * in_size..(n + 1) * in_size];
            let g = &dy[n * out_size..(n + 1) * out_size];
            if let Some(dw) = dw.as_mut() {
                let cols: &[T] = if self.is_pointwise() {
                    xs
                } else {
                    self.im2col(xs, &mut col);
                    &col
                };
                T::gemm(false, true, self.out_ch, rows, opix, T::one(), g, cols, T::one(), dw);
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx[n * in_size..(n + 1) * in_size];
                if self.is_pointwise() {
                    T::gemm(true, false, rows, opix, self.out_ch, T::one(), w, g, T::zero(), dxs);
                } else {
                    T::gemm(true, false, rows, opix, self.out_ch, T::one(), w, g, T::zero(), &mut dcol);
                    self.col2im(&dcol, dxs);
                }
            }
        }
        (dx, dw)
    }
}

/// Max pooling over `N x C x H x W`; returns the output and flat argmax indices.
pub(crate) fn max_pool<T: Scalar>(
    x: &[T],
    shape: &[usize],
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<(Vec<usize>, Vec<T>, Vec<usize>)> {
    if shape.len() != 4 {
        return Err(Error::op("max_pool2d", format!("expected rank-4 input, got {shape:?}")));
    }
    if k == 0 || stride == 0 || pad >= k {
        return Err(Error::op("max_pool2d", "invalid kernel/stride/padding"));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::op("max_pool2d", format!("input {shape:?} smaller than kernel {k}")));
    }
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ki in 0..k {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best_i == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_i = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((vec![n, c, oh, ow], out, arg))
}
