//! Raw loops shared by convolution and transposed convolution.
//!
//! All three kernels describe the same correlation between a "large" map
//! `[n, cin, hin, win]` and a "small" map `[n, cout, hout, wout]`:
//! `small[o, oy, ox] = sum_{i, ky, kx} w[o, i, ky, kx] * large[i, oy*s + ky - p, ox*s + kx - p]`
//! with out-of-range `large` positions reading as zero. Convolution runs it
//! forward; deconvolution runs the data-gradient as its forward pass.

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub hin: usize,
    pub win: usize,
    pub cout: usize,
    pub hout: usize,
    pub wout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    fn large_len(&self) -> usize {
        self.n * self.cin * self.hin * self.win
    }

    fn small_len(&self) -> usize {
        self.n * self.cout * self.hout * self.wout
    }

    /// `(ox_start, ox_end)` such that `ox*s + kx - p` lies inside `[0, win)`.
    #[inline]
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(s) };
        // need ox*s + kx - p <= win - 1
        let limit = self.win + self.pad;
        let hi = if limit > kx { ((limit - kx - 1) / s + 1).min(self.wout) } else { 0 };
        (lo, hi.max(lo))
    }

    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.hin).then_some(iy as usize)
    }
}

/// small = corr(large, weight) + bias
pub(crate) fn corr_forward(g: &ConvGeom, large: &[f32], weight: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    debug_assert_eq!(large.len(), g.large_len());
    let mut out = vec![0.0f32; g.small_len()];
    let plane_in = g.hin * g.win;
    let plane_out = g.hout * g.wout;
    let ranges: Vec<_> = (0..g.kw).map(|kx| g.ox_range(kx)).collect();
    for n in 0..g.n {
        for o in 0..g.cout {
            let dst = &mut out[(n * g.cout + o) * plane_out..][..plane_out];
            if let Some(b) = bias {
                dst.fill(b[o]);
            }
            for i in 0..g.cin {
                let src = &large[(n * g.cin + i) * plane_in..][..plane_in];
                let wbase = (o * g.cin + i) * g.kh * g.kw;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let w = weight[wbase + ky * g.kw + kx];
                        if w == 0.0 {
                            continue;
                        }
                        let (lo, hi) = ranges[kx];
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..g.hout {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            let drow = &mut dst[oy * g.wout..][lo..hi];
                            let srow = &src[iy * g.win..][..g.win];
                            let ix0 = lo * g.stride + kx - g.pad;
                            if g.stride == 1 {
                                for (d, s) in drow.iter_mut().zip(&srow[ix0..ix0 + (hi - lo)]) {
                                    *d += w * s;
                                }
                            } else {
                                for (t, d) in drow.iter_mut().enumerate() {
                                    *d += w * srow[ix0 + t * g.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// large_grad = corr^T(small_grad, weight)
pub(crate) fn corr_backward_data(g: &ConvGeom, small: &[f32], weight: &[f32]) -> Vec<f32> {
    debug_assert_eq!(small.len(), g.small_len());
    let mut out = vec![0.0f32; g.large_len()];
    let plane_in = g.hin * g.win;
    let plane_out = g.hout * g.wout;
    let ranges: Vec<_> = (0..g.kw).map(|kx| g.ox_range(kx)).collect();
    for n in 0..g.n {
        for i in 0..g.cin {
            let dst = &mut out[(n * g.cin + i) * plane_in..][..plane_in];
            for o in 0..g.cout {
                let src = &small[(n * g.cout + o) * plane_out..][..plane_out];
                let wbase = (o * g.cin + i) * g.kh * g.kw;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let w = weight[wbase + ky * g.kw + kx];
                        if w == 0.0 {
                            continue;
                        }
                        let (lo, hi) = ranges[kx];
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..g.hout {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            let srow = &src[oy * g.wout..][lo..hi];
                            let drow = &mut dst[iy * g.win..][..g.win];
                            let ix0 = lo * g.stride + kx - g.pad;
                            if g.stride == 1 {
                                for (d, s) in drow[ix0..ix0 + (hi - lo)].iter_mut().zip(srow) {
                                    *d += w * s;
                                }
                            } else {
                                for (t, s) in srow.iter().enumerate() {
                                    drow[ix0 + t * g.stride] += w * s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// weight_grad[o, i, ky, kx] = sum small_grad[o, oy, ox] * large[i, iy, ix]
pub(crate) fn corr_backward_weight(g: &ConvGeom, small: &[f32], large: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; g.cout * g.cin * g.kh * g.kw];
    let plane_in = g.hin * g.win;
    let plane_out = g.hout * g.wout;
    let ranges: Vec<_> = (0..g.kw).map(|kx| g.ox_range(kx)).collect();
    for n in 0..g.n {
        for o in 0..g.cout {
            let gs = &small[(n * g.cout + o) * plane_out..][..plane_out];
            for i in 0..g.cin {
                let src = &large[(n * g.cin + i) * plane_in..][..plane_in];
                let wbase = (o * g.cin + i) * g.kh * g.kw;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let (lo, hi) = ranges[kx];
                        if lo >= hi {
                            continue;
                        }
                        let ix0 = lo * g.stride + kx - g.pad;
                        let mut acc = 0.0f32;
                        for oy in 0..g.hout {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            let grow = &gs[oy * g.wout..][lo..hi];
                            let srow = &src[iy * g.win..][..g.win];
                            if g.stride == 1 {
                                acc += grow.iter().zip(&srow[ix0..ix0 + (hi - lo)]).map(|(a, b)| a * b).sum::<f32>();
                            } else {
                                for (t, a) in grow.iter().enumerate() {
                                    acc += a * srow[ix0 + t * g.stride];
                                }
                            }
                        }
                        out[wbase + ky * g.kw + kx] += acc;
                    }
                }
            }
        }
    }
    out
}

/// Per-output-channel sum of a `[n, c, h, w]` buffer.
pub(crate) fn channel_sums(data: &[f32], n: usize, c: usize, plane: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; c];
    for b in 0..n {
        for (ch, acc) in out.iter_mut().enumerate() {
            *acc += data[(b * c + ch) * plane..][..plane].iter().sum::<f32>();
        }
    }
    out
}
