//! im2col lowering for 2-d convolution over a whole batch.
//!
//! Columns are laid out `[K, N·P]` with `K = C·k·k` ordered `(c, ki, kj)` to
//! match the `[out, in, k, k]` kernel layout, and `P = OH·OW`.

#[derive(Debug, Clone, Copy)]
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
    pub fn k(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn p(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source pixel for output position `(oy, ox)` and kernel tap `(ki, kj)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ki: usize, kj: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ki) as isize - self.padding as isize;
        let x = (ox * self.stride + kj) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

pub(crate) fn im2col(input: &[f64], batch: usize, g: &ConvGeom) -> Vec<f64> {
    let (k, p) = (g.k(), g.p());
    let np = batch * p;
    let plane = g.height * g.width;
    let sample = g.channels * plane;
    let mut cols = vec![0.0; k * np];
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[row * np..(row + 1) * np];
                for n in 0..batch {
                    let src = &input[n * sample + c * plane..n * sample + (c + 1) * plane];
                    for oy in 0..g.out_h {
                        for ox in 0..g.out_w {
                            if let Some((y, x)) = g.source(oy, ox, ki, kj) {
                                dst[n * p + oy * g.out_w + ox] = src[y * g.width + x];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im(cols: &[f64], batch: usize, g: &ConvGeom) -> Vec<f64> {
    let p = g.p();
    let np = batch * p;
    let plane = g.height * g.width;
    let sample = g.channels * plane;
    let mut out = vec![0.0; batch * sample];
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * np..(row + 1) * np];
                for n in 0..batch {
                    let dst = &mut out[n * sample + c * plane..n * sample + (c + 1) * plane];
                    for oy in 0..g.out_h {
                        for ox in 0..g.out_w {
                            if let Some((y, x)) = g.source(oy, ox, ki, kj) {
                                dst[y * g.width + x] += src[n * p + oy * g.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `[C, N·P]` (channel-major) to `[N, C, P]` (sample-major).
pub(crate) fn channel_to_sample_major(x: &[f64], batch: usize, channels: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for c in 0..channels {
        for n in 0..batch {
            out[(n * channels + c) * p..(n * channels + c + 1) * p]
                .copy_from_slice(&x[c * batch * p + n * p..c * batch * p + (n + 1) * p]);
        }
    }
    out
}

pub(crate) fn sample_to_channel_major(x: &[f64], batch: usize, channels: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for n in 0..batch {
        for c in 0..channels {
            out[c * batch * p + n * p..c * batch * p + (n + 1) * p]
                .copy_from_slice(&x[(n * channels + c) * p..(n * channels + c + 1) * p]);
        }
    }
    out
}
