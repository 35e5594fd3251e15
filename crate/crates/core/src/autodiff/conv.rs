//! Convolution kernels on NCHW buffers.

/// Leading crop of a "same"-sized transposed convolution.
pub(crate) fn same_pad(kernel: usize, stride: usize) -> usize {
    kernel.saturating_sub(stride) / 2
}

pub(crate) struct TransposeGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl TransposeGeom {
    pub fn out_h(&self) -> usize {
        self.h * self.stride
    }

    pub fn out_w(&self) -> usize {
        self.w * self.stride
    }

    /// Calls `f(x_index, k_index, y_index)` for every contributing triple.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let (ph, pw) = (same_pad(self.kh, self.stride), same_pad(self.kw, self.stride));
        for b in 0..self.n {
            for c in 0..self.ci {
                for iy in 0..self.h {
                    for ix in 0..self.w {
                        let xi = ((b * self.ci + c) * self.h + iy) * self.w + ix;
                        for o in 0..self.co {
                            let kbase = (c * self.co + o) * self.kh;
                            let ybase = (b * self.co + o) * oh;
                            for ky in 0..self.kh {
                                let oy = (iy * self.stride + ky) as isize - ph as isize;
                                if oy < 0 || oy >= oh as isize {
                                    continue;
                                }
                                for kx in 0..self.kw {
                                    let ox = (ix * self.stride + kx) as isize - pw as isize;
                                    if ox < 0 || ox >= ow as isize {
                                        continue;
                                    }
                                    f(
                                        xi,
                                        (kbase + ky) * self.kw + kx,
                                        (ybase + oy as usize) * ow + ox as usize,
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64], k: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let plane = self.out_h() * self.out_w();
        let mut y = vec![0.0; self.n * self.co * plane];
        if let Some(bias) = bias {
            for (i, chunk) in y.chunks_mut(plane).enumerate() {
                chunk.fill(bias[i % self.co]);
            }
        }
        self.for_each(|xi, ki, yi| y[yi] += x[xi] * k[ki]);
        y
    }

    /// Returns (dx, dk, dbias).
    pub fn backward(&self, x: &[f64], k: &[f64], dy: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut dx = vec![0.0; x.len()];
        let mut dk = vec![0.0; k.len()];
        self.for_each(|xi, ki, yi| {
            dx[xi] += dy[yi] * k[ki];
            dk[ki] += dy[yi] * x[xi];
        });
        let plane = self.out_h() * self.out_w();
        let mut db = vec![0.0; self.co];
        for (i, chunk) in dy.chunks(plane).enumerate() {
            db[i % self.co] += chunk.iter().sum::<f64>();
        }
        (dx, dk, db)
    }
}

/// Cross-correlation, zero padding `pad_h` on height, no padding on width.
pub(crate) struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad_h: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad_h + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 1 - self.kw
    }

    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        for b in 0..self.n {
            for o in 0..self.co {
                for i in 0..oh {
                    for j in 0..ow {
                        let yi = ((b * self.co + o) * oh + i) * ow + j;
                        for c in 0..self.ci {
                            for ky in 0..self.kh {
                                let row = (i + ky) as isize - self.pad_h as isize;
                                if row < 0 || row >= self.h as isize {
                                    continue;
                                }
                                let xrow = ((b * self.ci + c) * self.h + row as usize) * self.w + j;
                                let krow = ((o * self.ci + c) * self.kh + ky) * self.kw;
                                for kx in 0..self.kw {
                                    f(xrow + kx, krow + kx, yi);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64], k: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let plane = self.out_h() * self.out_w();
        let mut y = vec![0.0; self.n * self.co * plane];
        if let Some(bias) = bias {
            for (i, chunk) in y.chunks_mut(plane).enumerate() {
                chunk.fill(bias[i % self.co]);
            }
        }
        self.for_each(|xi, ki, yi| y[yi] += x[xi] * k[ki]);
        y
    }

    pub fn backward(&self, x: &[f64], k: &[f64], dy: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut dx = vec![0.0; x.len()];
        let mut dk = vec![0.0; k.len()];
        self.for_each(|xi, ki, yi| {
            dx[xi] += dy[yi] * k[ki];
            dk[ki] += dy[yi] * x[xi];
        });
        let plane = self.out_h() * self.out_w();
        let mut db = vec![0.0; self.co];
        for (i, chunk) in dy.chunks(plane).enumerate() {
            db[i % self.co] += chunk.iter().sum::<f64>();
        }
        (dx, dk, db)
    }
}

/// Circular padding of the last (width) axis by `overlap` columns on each side.
pub(crate) fn pad_periodic(x: &[f64], rows: usize, w: usize, overlap: usize) -> Vec<f64> {
    let wp = w + 2 * overlap;
    let mut y = Vec::with_capacity(rows * wp);
    for r in 0..rows {
        let src = &x[r * w..(r + 1) * w];
        y.extend_from_slice(&src[w - overlap..]);
        y.extend_from_slice(src);
        y.extend_from_slice(&src[..overlap]);
    }
    y
}

pub(crate) fn pad_periodic_backward(dy: &[f64], rows: usize, w: usize, overlap: usize) -> Vec<f64> {
    let wp = w + 2 * overlap;
    let mut dx = vec![0.0; rows * w];
    for r in 0..rows {
        for jp in 0..wp {
            let j = (jp as isize - overlap as isize).rem_euclid(w as isize) as usize;
            dx[r * w + j] += dy[r * wp + jp];
        }
    }
    dx
}
