//! Differentiable view synthesis: a stack of horizontally shifted copies of
//! the left view, blended per pixel by a probability distribution over
//! disparities.
//!
//! Channel layout of a [`DisparityVolume`]: when the range has an empty
//! channel it is channel 0, followed by disparities `d_min..=d_max` in
//! increasing order. The empty channel contributes nothing to the blend.

use crate::error::{Error, Result};
use crate::tensorcore::{softmax_channels, Backward, BackwardCtx, Graph, Tensor, Var};

/// Set of candidate integer disparities, optionally with an extra "empty" channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DisparityRange {
    d_min: i32,
    d_max: i32,
    has_empty: bool,
}

impl Default for DisparityRange {
    fn default() -> Self {
        DisparityRange { d_min: -15, d_max: 16, has_empty: true }
    }
}

impl DisparityRange {
    pub fn new(d_min: i32, d_max: i32, has_empty: bool) -> Result<Self> {
        if !(d_min <= 0 && 0 <= d_max) {
            return Err(Error::invalid("disparity range", format!("need d_min <= 0 <= d_max, got [{d_min}, {d_max}]")));
        }
        Ok(DisparityRange { d_min, d_max, has_empty })
    }

    pub fn d_min(&self) -> i32 {
        self.d_min
    }

    pub fn d_max(&self) -> i32 {
        self.d_max
    }

    pub fn has_empty(&self) -> bool {
        self.has_empty
    }

    pub fn disparity_count(&self) -> usize {
        (self.d_max - self.d_min + 1) as usize
    }

    pub fn channel_count(&self) -> usize {
        self.disparity_count() + self.has_empty as usize
    }

    pub fn disparities(&self) -> impl Iterator<Item = i32> + Clone {
        self.d_min..=self.d_max
    }

    pub fn contains(&self, d: i32) -> bool {
        (self.d_min..=self.d_max).contains(&d)
    }

    /// Index of the first disparity channel.
    pub fn first_disparity_channel(&self) -> usize {
        self.has_empty as usize
    }

    pub fn channel_of(&self, d: i32) -> Option<usize> {
        self.contains(d).then(|| self.first_disparity_channel() + (d - self.d_min) as usize)
    }

    pub fn empty_channel(&self) -> Option<usize> {
        self.has_empty.then_some(0)
    }

    /// Largest absolute shift in the range.
    pub fn max_shift(&self) -> usize {
        self.d_min.unsigned_abs().max(self.d_max.unsigned_abs()) as usize
    }

    /// Shifts must stay strictly narrower than the image.
    pub fn check_width(&self, width: usize) -> Result<()> {
        if width <= self.max_shift() {
            return Err(Error::RangeTooWide { d_min: self.d_min, d_max: self.d_max, width });
        }
        Ok(())
    }
}

/// Per-pixel probabilities over the channels of a [`DisparityRange`].
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityVolume {
    probs: Tensor,
    range: DisparityRange,
}

impl DisparityVolume {
    pub const SUM_TOLERANCE: f32 = 1e-5;

    /// Validates shape, value range and per-location normalization.
    pub fn new(probs: Tensor, range: DisparityRange) -> Result<Self> {
        let (n, c, h, w) = probs.dims4("disparity volume")?;
        if c != range.channel_count() {
            return Err(Error::ChannelMismatch { expected: range.channel_count(), got: c });
        }
        let plane = h * w;
        let p = probs.data();
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("disparity volume", "probabilities must lie in [0, 1]"));
        }
        for b in 0..n {
            for i in 0..plane {
                let s: f32 = (0..c).map(|ch| p[(b * c + ch) * plane + i]).sum();
                if (s - 1.0).abs() > Self::SUM_TOLERANCE {
                    return Err(Error::invalid("disparity volume", format!("channel sum {s} at item {b}, pixel {i}")));
                }
            }
        }
        Ok(DisparityVolume { probs, range })
    }

    /// Degenerate volume putting all mass on `disparity[n][y][x]`.
    /// `disparity` is `[N, H, W]` flattened; every value must be in range.
    pub fn one_hot(disparity: &[i32], n: usize, h: usize, w: usize, range: DisparityRange) -> Result<Self> {
        if disparity.len() != n * h * w {
            return Err(Error::shape("one_hot", "disparity field length mismatch"));
        }
        let c = range.channel_count();
        let plane = h * w;
        let mut probs = Tensor::zeros(&[n, c, h, w]);
        let p = probs.data_mut();
        for b in 0..n {
            for i in 0..plane {
                let d = disparity[b * plane + i];
                let ch = range
                    .channel_of(d)
                    .ok_or_else(|| Error::invalid("one_hot", format!("disparity {d} outside range")))?;
                p[(b * c + ch) * plane + i] = 1.0;
            }
        }
        Ok(DisparityVolume { probs, range })
    }

    /// Wraps a tensor already normalized by construction (softmax output,
    /// renormalized upsampling).
    pub(crate) fn from_softmax(probs: Tensor, range: DisparityRange) -> Self {
        DisparityVolume { probs, range }
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn range(&self) -> DisparityRange {
        self.range
    }

    pub fn into_probs(self) -> Tensor {
        self.probs
    }

    /// `(N, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.probs.shape();
        (s[0], s[2], s[3])
    }
}

/// Copies of `image` (`[N, 3, H, W]`) shifted by every disparity of `range`:
/// slice `d` holds `I[i, j - d]`, with source columns clamped to the image.
/// Result is `[N, D, 3, H, W]`; the empty channel has no slice.
pub fn shifted_stack(image: &Tensor, range: &DisparityRange) -> Result<Tensor> {
    let (n, c, h, w) = image.dims4("shifted_stack")?;
    range.check_width(w)?;
    let d_count = range.disparity_count();
    let src = image.data();
    let plane = c * h * w;
    let mut out = vec![0.0f32; n * d_count * plane];
    for b in 0..n {
        for (k, d) in range.disparities().enumerate() {
            let dst = &mut out[(b * d_count + k) * plane..][..plane];
            let img = &src[b * plane..][..plane];
            for row in 0..c * h {
                shift_row(&img[row * w..][..w], &mut dst[row * w..][..w], d);
            }
        }
    }
    Tensor::new(&[n, d_count, c, h, w], out)
}

/// `dst[j] = src[clamp(j - d)]`.
#[inline]
pub(crate) fn shift_row(src: &[f32], dst: &mut [f32], d: i32) {
    let w = src.len() as isize;
    for (j, v) in dst.iter_mut().enumerate() {
        let s = (j as isize - d as isize).clamp(0, w - 1);
        *v = src[s as usize];
    }
}

fn check_stack(stack: &Tensor, probs: &Tensor, range: &DisparityRange) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, d, c, h, w) = match stack.shape() {
        &[n, d, c, h, w] => (n, d, c, h, w),
        s => return Err(Error::shape("selection", format!("stack must be rank 5, got {s:?}"))),
    };
    let (vn, vc, vh, vw) = probs.dims4("selection")?;
    if d != range.disparity_count() || vc != range.channel_count() {
        return Err(Error::ChannelMismatch { expected: range.channel_count(), got: vc });
    }
    if (vn, vh, vw) != (n, h, w) {
        return Err(Error::shape("selection", format!("stack {:?} vs volume {:?}", stack.shape(), probs.shape())));
    }
    Ok((n, d, c, h, w))
}

fn select_kernel(stack: &Tensor, probs: &Tensor, range: &DisparityRange) -> Result<Tensor> {
    let (n, d_count, c, h, w) = check_stack(stack, probs, range)?;
    let plane = h * w;
    let vc = range.channel_count();
    let first = range.first_disparity_channel();
    let (s, p) = (stack.data(), probs.data());
    let mut out = vec![0.0f32; n * c * plane];
    for b in 0..n {
        for ch in 0..c {
            let dst = &mut out[(b * c + ch) * plane..][..plane];
            for k in 0..d_count {
                let src = &s[((b * d_count + k) * c + ch) * plane..][..plane];
                let prob = &p[(b * vc + first + k) * plane..][..plane];
                for ((o, a), q) in dst.iter_mut().zip(src).zip(prob) {
                    *o += a * q;
                }
            }
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

/// `O[i, j] = sum_d stack_d[i, j] * P_d[i, j]` over the disparity channels.
pub fn selection_forward(stack: &Tensor, volume: &DisparityVolume) -> Result<Tensor> {
    select_kernel(stack, volume.probs(), &volume.range)
}

/// Channel softmax of `logits`, wrapped as a volume.
pub fn logits_to_volume(logits: &Tensor, range: &DisparityRange) -> Result<DisparityVolume> {
    let (_, c, _, _) = logits.dims4("logits_to_volume")?;
    if c != range.channel_count() {
        return Err(Error::ChannelMismatch { expected: range.channel_count(), got: c });
    }
    Ok(DisparityVolume { probs: softmax_channels(logits)?, range: *range })
}

/// Mean disparity per pixel with the empty channel's mass renormalized out.
/// Pixels whose entire mass is empty report 0.
pub fn expected_disparity(volume: &DisparityVolume) -> Tensor {
    let (n, h, w) = volume.dims();
    let range = volume.range;
    let c = range.channel_count();
    let plane = h * w;
    let p = volume.probs.data();
    let mut out = vec![0.0f32; n * plane];
    for b in 0..n {
        for i in 0..plane {
            let (mut num, mut den) = (0.0f64, 0.0f64);
            for (k, d) in range.disparities().enumerate() {
                let q = p[(b * c + range.first_disparity_channel() + k) * plane + i] as f64;
                num += d as f64 * q;
                den += q;
            }
            out[b * plane + i] = if den > 0.0 { (num / den) as f32 } else { 0.0 };
        }
    }
    Tensor::new(&[n, 1, h, w], out).unwrap()
}

/// Fused shift-and-blend without materializing the stack: channel `d` reads
/// `image[i, clamp(j - (scale * d + offset))]`.
pub fn render_shifted(image: &Tensor, volume: &DisparityVolume, scale: i32, offset: i32) -> Result<Tensor> {
    let (n, c, h, w) = image.dims4("render_shifted")?;
    let (vn, vh, vw) = volume.dims();
    if (vn, vh, vw) != (n, h, w) {
        return Err(Error::shape(
            "render_shifted",
            format!("image {:?} vs volume {:?}", image.shape(), volume.probs.shape()),
        ));
    }
    let range = volume.range;
    let vc = range.channel_count();
    let plane = h * w;
    let (src, p) = (image.data(), volume.probs.data());
    let mut out = vec![0.0f32; n * c * plane];
    let mut shifted = vec![0.0f32; w];
    for b in 0..n {
        for ch in 0..c {
            let img = &src[(b * c + ch) * plane..][..plane];
            let dst = &mut out[(b * c + ch) * plane..][..plane];
            for (k, d) in range.disparities().enumerate() {
                let prob = &p[(b * vc + range.first_disparity_channel() + k) * plane..][..plane];
                for y in 0..h {
                    shift_row(&img[y * w..][..w], &mut shifted, scale * d + offset);
                    for ((o, a), q) in dst[y * w..][..w].iter_mut().zip(&shifted).zip(&prob[y * w..][..w]) {
                        *o += a * q;
                    }
                }
            }
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

struct ShiftedStackOp {
    range: DisparityRange,
}

impl Backward for ShiftedStackOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (n, c, h, w) = ctx.inputs[0].dims4("shifted_stack")?;
        let d_count = self.range.disparity_count();
        let plane = c * h * w;
        let g = ctx.grad.data();
        let mut gx = vec![0.0f32; n * plane];
        for b in 0..n {
            for (k, d) in self.range.disparities().enumerate() {
                let gs = &g[(b * d_count + k) * plane..][..plane];
                let dst = &mut gx[b * plane..][..plane];
                for row in 0..c * h {
                    let (gr, dr) = (&gs[row * w..][..w], &mut dst[row * w..][..w]);
                    for (j, v) in gr.iter().enumerate() {
                        let s = (j as isize - d as isize).clamp(0, w as isize - 1) as usize;
                        dr[s] += v;
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::new(ctx.inputs[0].shape(), gx)?)])
    }
}

struct SelectionOp {
    range: DisparityRange,
}

impl Backward for SelectionOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (stack, probs) = (ctx.inputs[0], ctx.inputs[1]);
        let (n, d_count, c, h, w) = check_stack(stack, probs, &self.range)?;
        let plane = h * w;
        let vc = self.range.channel_count();
        let first = self.range.first_disparity_channel();
        let g = ctx.grad.data();
        let gstack = ctx.needs[0].then(|| {
            let p = probs.data();
            let mut out = vec![0.0f32; stack.len()];
            for b in 0..n {
                for k in 0..d_count {
                    let prob = &p[(b * vc + first + k) * plane..][..plane];
                    for ch in 0..c {
                        let go = &g[(b * c + ch) * plane..][..plane];
                        let dst = &mut out[((b * d_count + k) * c + ch) * plane..][..plane];
                        for ((o, a), q) in dst.iter_mut().zip(go).zip(prob) {
                            *o = a * q;
                        }
                    }
                }
            }
            Tensor::new(stack.shape(), out).unwrap()
        });
        let gprobs = ctx.needs[1].then(|| {
            let s = stack.data();
            let mut out = vec![0.0f32; probs.len()];
            for b in 0..n {
                for k in 0..d_count {
                    let dst = &mut out[(b * vc + first + k) * plane..][..plane];
                    for ch in 0..c {
                        let go = &g[(b * c + ch) * plane..][..plane];
                        let src = &s[((b * d_count + k) * c + ch) * plane..][..plane];
                        for ((o, a), q) in dst.iter_mut().zip(go).zip(src) {
                            *o += a * q;
                        }
                    }
                }
            }
            Tensor::new(probs.shape(), out).unwrap()
        });
        Ok(vec![gstack, gprobs])
    }
}

impl Graph {
    /// Differentiable [`shifted_stack`].
    pub fn shifted_stack(&mut self, image: Var, range: &DisparityRange) -> Result<Var> {
        let value = shifted_stack(self.value(image), range)?;
        self.record("shifted_stack", value, &[image], Box::new(ShiftedStackOp { range: *range }))
    }

    /// Differentiable [`selection_forward`]; `probs` is a `[N, C, H, W]`
    /// volume over `range` (typically a softmax output).
    pub fn selection(&mut self, stack: Var, probs: Var, range: &DisparityRange) -> Result<Var> {
        let value = select_kernel(self.value(stack), self.value(probs), range)?;
        self.record("selection", value, &[stack, probs], Box::new(SelectionOp { range: *range }))
    }
}
