//! Independent f64 reference implementations used as test oracles, plus
//! small random-instance helpers.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stereoforge::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn to_tensor(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape, v.iter().map(|&x| x as f32).collect()).unwrap()
}

/// f64 copy of a tensor, so the oracle sees exactly the values the engine saw.
pub fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&x| x as f64).collect()
}

/// Random tensor whose values are exactly representable in f32.
pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> (Tensor, Vec<f64>) {
    let n = shape.iter().product();
    let t = to_tensor(shape, &rand_vec(rng, n, lo, hi));
    let v = f64s(&t);
    (t, v)
}

/// Direct cross-correlation. Shapes: x [n,ci,h,w], wt [co,ci,kh,kw].
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    xs: [usize; 4],
    wt: &[f64],
    ws: [usize; 4],
    b: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, ci, h, w] = xs;
    let [co, wci, kh, kw] = ws;
    assert_eq!(ci, wci);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * ho * wo];
    for bn in 0..n {
        for o in 0..co {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b[o]);
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as i64 - pad as i64;
                                let ix = (xx * stride + kx) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                acc += x[((bn * ci + c) * h + iy as usize) * w + ix as usize]
                                    * wt[((o * ci + c) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((bn * co + o) * ho + y) * wo + xx] = acc;
                }
            }
        }
    }
    (out, [n, co, ho, wo])
}

/// Scatter-form transposed convolution: every input pixel adds its
/// kernel-weighted footprint at `S * y - pad + ky`, clipped to `S h x S w`.
/// Weight layout [ci, co, 2S, 2S].
pub fn deconv2d(x: &[f64], xs: [usize; 4], wt: &[f64], ws: [usize; 4], s: usize, pad: usize) -> (Vec<f64>, [usize; 4]) {
    let [n, ci, h, w] = xs;
    let [wci, co, kh, kw] = ws;
    assert_eq!(ci, wci);
    let (ho, wo) = (s * h, s * w);
    let mut out = vec![0.0; n * co * ho * wo];
    for bn in 0..n {
        for c in 0..ci {
            for y in 0..h {
                for xx in 0..w {
                    let v = x[((bn * ci + c) * h + y) * w + xx];
                    for o in 0..co {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let oy = (y * s + ky) as i64 - pad as i64;
                                let ox = (xx * s + kx) as i64 - pad as i64;
                                if oy < 0 || ox < 0 || oy >= ho as i64 || ox >= wo as i64 {
                                    continue;
                                }
                                out[((bn * co + o) * ho + oy as usize) * wo + ox as usize] +=
                                    v * wt[((c * co + o) * kh + ky) * kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    (out, [n, co, ho, wo])
}

pub fn max_pool(x: &[f64], xs: [usize; 4], k: usize, stride: usize) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for p in 0..n * c {
        for y in 0..ho {
            for xx in 0..wo {
                let mut m = f64::NEG_INFINITY;
                for ky in 0..k {
                    for kx in 0..k {
                        m = m.max(x[(p * h + y * stride + ky) * w + xx * stride + kx]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

/// Smallest gap between the largest and second-largest value over all
/// pooling windows; near-ties make the max non-differentiable.
pub fn pool_min_gap(x: &[f64], xs: [usize; 4], k: usize, stride: usize) -> f64 {
    let [n, c, h, w] = xs;
    let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let mut gap = f64::INFINITY;
    for p in 0..n * c {
        for y in 0..ho {
            for xx in 0..wo {
                let mut v: Vec<f64> =
                    (0..k * k).map(|i| x[(p * h + y * stride + i / k) * w + xx * stride + i % k]).collect();
                v.sort_by(|a, b| b.partial_cmp(a).unwrap());
                gap = gap.min(v[0] - v[1]);
            }
        }
    }
    gap
}

/// x [n,d] times w [d,m] plus b [m], naive triple loop.
pub fn fully_connected(x: &[f64], n: usize, d: usize, wt: &[f64], m: usize, b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = b[j];
            for k in 0..d {
                acc += x[i * d + k] * wt[k * m + j];
            }
            out[i * m + j] = acc;
        }
    }
    out
}

/// Train-mode batch norm with biased batch variance.
pub fn batch_norm(x: &[f64], xs: [usize; 4], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let idx = |b: usize, i: usize| (b * c + ch) * plane + i;
        let mut mean = 0.0;
        for b in 0..n {
            for i in 0..plane {
                mean += x[idx(b, i)];
            }
        }
        mean /= count;
        let mut var = 0.0;
        for b in 0..n {
            for i in 0..plane {
                var += (x[idx(b, i)] - mean).powi(2);
            }
        }
        var /= count;
        for b in 0..n {
            for i in 0..plane {
                out[idx(b, i)] = gamma[ch] * (x[idx(b, i)] - mean) / (var + eps).sqrt() + beta[ch];
            }
        }
    }
    out
}

pub fn softmax(x: &[f64], xs: [usize; 4]) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let plane = h * w;
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for i in 0..plane {
            let at = |ch: usize| (b * c + ch) * plane + i;
            let m = (0..c).map(|ch| x[at(ch)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|ch| (x[at(ch)] - m).exp()).sum();
            for ch in 0..c {
                out[at(ch)] = (x[at(ch)] - m).exp() / z;
            }
        }
    }
    out
}

/// Column source for disparity `d` at column `j`: `clamp(j - d)`.
pub fn shift_src(j: usize, d: i32, w: usize) -> usize {
    (j as i64 - d as i64).clamp(0, w as i64 - 1) as usize
}

/// Selection layer written as a sum over disparities of probability times the
/// replicate-padded shifted image. `probs` has `channels` planes; disparity
/// `d_min + k` is channel `first + k`.
#[allow(clippy::too_many_arguments)]
pub fn selection(
    img: &[f64],
    xs: [usize; 4],
    probs: &[f64],
    channels: usize,
    first: usize,
    d_min: i32,
    d_count: usize,
) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let mut out = vec![0.0; img.len()];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for k in 0..d_count {
                        let d = d_min + k as i32;
                        let p = probs[((b * channels + first + k) * h + y) * w + x];
                        acc += p * img[((b * c + ch) * h + y) * w + shift_src(x, d, w)];
                    }
                    out[((b * c + ch) * h + y) * w + x] = acc;
                }
            }
        }
    }
    out
}

/// Plain bilinear interpolation by factor `s` with half-pixel alignment and
/// clamped borders: output pixel `o` samples input coordinate `(o + 0.5) / s - 0.5`.
pub fn bilinear_upsample(x: &[f64], h: usize, w: usize, s: usize) -> Vec<f64> {
    let (ho, wo) = (h * s, w * s);
    let coord = |o: usize, len: usize| -> (usize, usize, f64) {
        let u = ((o as f64 + 0.5) / s as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = u.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, u - i0 as f64)
    };
    let mut out = vec![0.0; ho * wo];
    for oy in 0..ho {
        let (y0, y1, fy) = coord(oy, h);
        for ox in 0..wo {
            let (x0, x1, fx) = coord(ox, w);
            let top = x[y0 * w + x0] * (1.0 - fx) + x[y0 * w + x1] * fx;
            let bot = x[y1 * w + x0] * (1.0 - fx) + x[y1 * w + x1] * fx;
            out[oy * wo + ox] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Central difference of a scalar function of a vector, one coordinate at a time.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest relative error between analytic and numeric gradients. The
/// denominator is floored so near-zero entries are compared absolutely.
pub fn max_rel_err(analytic: &Tensor, numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .data()
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a as f64 - n).abs() / (a as f64).abs().max(n.abs()).max(1e-2))
        .fold(0.0, f64::max)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
