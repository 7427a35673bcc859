//! Classical depth-image-based rendering: depth to disparity, forward warp
//! with occlusion handling, hole filling, and the non-learned baselines
//! (global shift and SAD block matching).

use std::ops::{Deref, RangeInclusive};

use crate::data::StereoPair;
use crate::error::{Error, Result};
use crate::raster::{HoleMask, Image, Plane};
use crate::selection::DisparityRange;

/// Stereo rig: eye/camera baseline `B` and distance to the plane of focus `f`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraModel {
    baseline: f32,
    focus: f32,
}

impl CameraModel {
    pub fn new(baseline: f32, focus: f32) -> Result<Self> {
        for (name, v) in [("baseline", baseline), ("focus", focus)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid("camera", format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(CameraModel { baseline, focus })
    }

    pub fn baseline(&self) -> f32 {
        self.baseline
    }

    pub fn focus(&self) -> f32 {
        self.focus
    }
}

/// Strictly positive scene depth per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap(Plane);

impl DepthMap {
    pub fn new(plane: Plane) -> Result<Self> {
        if let Some(&z) = plane.data().iter().find(|z| !(z.is_finite() && **z > 0.0)) {
            return Err(Error::NonPositiveDepth(z));
        }
        Ok(DepthMap(plane))
    }

    pub fn into_plane(self) -> Plane {
        self.0
    }
}

impl Deref for DepthMap {
    type Target = Plane;
    fn deref(&self) -> &Plane {
        &self.0
    }
}

/// Signed horizontal pixel offsets; `right[j + D[j]] = left[j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap(Plane);

impl DisparityMap {
    pub fn new(plane: Plane) -> Result<Self> {
        if plane.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "disparity map" });
        }
        Ok(DisparityMap(plane))
    }

    pub fn constant(width: usize, height: usize, d: f32) -> Self {
        DisparityMap(Plane::filled(width, height, d))
    }

    pub fn into_plane(self) -> Plane {
        self.0
    }

    /// Disparities rounded half away from zero.
    pub fn rounded(&self) -> Vec<i32> {
        self.0.data().iter().map(|d| d.round() as i32).collect()
    }
}

impl Deref for DisparityMap {
    type Target = Plane;
    fn deref(&self) -> &Plane {
        &self.0
    }
}

/// `D = B (Z - f) / Z`: zero on the plane of focus, negative in front of it,
/// approaching `B` at infinity.
pub fn depth_to_disparity(depth: &DepthMap, cam: &CameraModel) -> Result<DisparityMap> {
    let (b, f) = (cam.baseline as f64, cam.focus as f64);
    DisparityMap::new(depth.map(|z| {
        let z = z as f64;
        (b * (z - f) / z) as f32
    }))
}

/// Output of [`disparity_render`].
#[derive(Clone, Debug)]
pub struct Rendered {
    pub image: Image,
    pub holes: HoleMask,
    /// Disparity of the source pixel that landed on each target; 0 at holes.
    pub target_disparity: DisparityMap,
}

/// Forward warp `right[i, j + D[i, j]] = left[i, j]` with integer-rounded
/// disparities. When two sources land on the same target the smaller depth
/// wins if `depth` is given, otherwise the larger disparity.
pub fn disparity_render(left: &Image, disp: &DisparityMap, depth: Option<&DepthMap>) -> Result<Rendered> {
    let (w, h) = left.dims();
    if disp.dims() != (w, h) || depth.is_some_and(|z| z.dims() != (w, h)) {
        return Err(Error::shape("disparity_render", "image, disparity and depth dims differ"));
    }
    let rounded = disp.rounded();
    // index of the winning source column per target, per row
    let mut winner: Vec<Option<usize>> = vec![None; w * h];
    for y in 0..h {
        for x in 0..w {
            let d = rounded[y * w + x];
            let t = x as i64 + d as i64;
            if t < 0 || t >= w as i64 {
                continue;
            }
            let slot = &mut winner[y * w + t as usize];
            let replace = match *slot {
                None => true,
                Some(prev) => match depth {
                    Some(z) => z.get(y, x) < z.get(y, prev),
                    None => d > rounded[y * w + prev],
                },
            };
            if replace {
                *slot = Some(x);
            }
        }
    }
    let mut image = Image::filled(w, h, [0.0; 3]);
    let mut holes = HoleMask::empty(w, h);
    let mut target = Plane::filled(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            match winner[y * w + x] {
                Some(src) => {
                    for c in 0..3 {
                        image.set(c, y, x, left.get(c, y, src));
                    }
                    target.set(y, x, rounded[y * w + src] as f32);
                }
                None => holes.set(y, x, true),
            }
        }
    }
    Ok(Rendered { image, holes, target_disparity: DisparityMap(target) })
}

/// Backward (gather) warp: `right[i, j] = left[i, clamp(j - D[i, j])]`, with
/// the disparity indexed at the target pixel. Never produces holes.
pub fn gather_render(left: &Image, disp: &DisparityMap) -> Result<Image> {
    let (w, h) = left.dims();
    if disp.dims() != (w, h) {
        return Err(Error::shape("gather_render", "image and disparity dims differ"));
    }
    let rounded = disp.rounded();
    Ok(Image::from_fn(w, h, |c, y, x| {
        let s = (x as i64 - rounded[y * w + x] as i64).clamp(0, w as i64 - 1);
        left.get(c, y, s as usize)
    }))
}

/// For every pixel, the flat index of the pixel it copies from. Non-holes
/// map to themselves.
fn fill_sources(mask: &HoleMask, guide: Option<&Plane>) -> Result<Vec<usize>> {
    let (w, h) = mask.dims();
    let mut src: Vec<usize> = (0..w * h).collect();
    let mut row_has_data = vec![false; h];
    for y in 0..h {
        let row = |x: usize| mask.get(y, x);
        row_has_data[y] = (0..w).any(|x| !row(x));
        if !row_has_data[y] {
            continue;
        }
        let mut x = 0;
        while x < w {
            if !row(x) {
                x += 1;
                continue;
            }
            let start = x;
            while x < w && row(x) {
                x += 1;
            }
            let left = start.checked_sub(1);
            let right = (x < w).then_some(x);
            for t in start..x {
                let pick = match (left, right) {
                    (Some(l), None) => l,
                    (None, Some(r)) => r,
                    (Some(l), Some(r)) => match guide {
                        // background side: smaller disparity; ties to the left
                        Some(g) => {
                            if g.get(y, r) < g.get(y, l) {
                                r
                            } else {
                                l
                            }
                        }
                        None => {
                            if r - t < t - l {
                                r
                            } else {
                                l
                            }
                        }
                    },
                    (None, None) => unreachable!("row has data"),
                };
                src[y * w + t] = y * w + pick;
            }
        }
    }
    if !row_has_data.iter().any(|&b| b) {
        return Err(Error::EntirelyHoles);
    }
    for y in 0..h {
        if row_has_data[y] {
            continue;
        }
        let nearest = (1..h)
            .flat_map(|k| [y.checked_sub(k), (y + k < h).then_some(y + k)])
            .flatten()
            .find(|&r| row_has_data[r])
            .expect("some row has data");
        for x in 0..w {
            src[y * w + x] = src[nearest * w + x];
        }
    }
    Ok(src)
}

/// Fills holes along rows. With a disparity map each hole run copies its
/// background-side neighbour (the one with smaller disparity, ties left);
/// without one each hole copies the nearest valid pixel in its row (ties
/// left). Rows with no valid pixel copy the nearest filled row (ties up).
pub fn fill_holes(image: &Image, mask: &HoleMask, disparity: Option<&DisparityMap>) -> Result<Image> {
    if mask.dims() != image.dims() || disparity.is_some_and(|d| d.dims() != image.dims()) {
        return Err(Error::shape("fill_holes", "mask, image and disparity dims differ"));
    }
    let src = fill_sources(mask, disparity.map(|d| &d.0))?;
    let mut out = image.clone();
    for c in 0..3 {
        let from = image.channel(c);
        for (dst, &s) in out.channel_mut(c).iter_mut().zip(&src) {
            *dst = from[s];
        }
    }
    Ok(out)
}

/// Hole filling applied to the target disparity itself, using the same
/// source choice as [`fill_holes`].
pub fn fill_disparity_holes(disparity: &DisparityMap, mask: &HoleMask) -> Result<DisparityMap> {
    let src = fill_sources(mask, Some(&disparity.0))?;
    let data = src.iter().map(|&s| disparity.data()[s]).collect();
    DisparityMap::new(Plane::new(disparity.width(), disparity.height(), data)?)
}

/// `left` translated by `delta` columns with clamped borders.
pub fn global_shift(left: &Image, delta: i32) -> Image {
    let w = left.width() as i64;
    Image::from_fn(left.width(), left.height(), |c, y, x| {
        left.get(c, y, (x as i64 - delta as i64).clamp(0, w - 1) as usize)
    })
}

fn mean_abs(a: &Image, b: &Image) -> f64 {
    a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs() as f64).sum::<f64>() / a.data().len() as f64
}

/// Candidates ordered by the tie-break rule: smaller `|d|` first, then negative.
fn tie_order(range: RangeInclusive<i32>) -> Vec<i32> {
    let mut v: Vec<i32> = range.collect();
    v.sort_by_key(|d| (d.unsigned_abs(), *d));
    v
}

/// The single horizontal shift minimizing mean absolute error between the
/// shifted left views and the right views over all `pairs`.
pub fn fit_global_disparity(pairs: &[StereoPair], search: RangeInclusive<i32>) -> Result<i32> {
    let first = pairs.first().ok_or(Error::EmptyInput("fit_global_disparity"))?;
    let width = first.left.width();
    if search.is_empty() {
        return Err(Error::invalid("fit_global_disparity", "empty search range"));
    }
    if search.start().unsigned_abs() as usize >= width || search.end().unsigned_abs() as usize >= width {
        return Err(Error::invalid("fit_global_disparity", "search range exceeds image width"));
    }
    let mut best = (f64::INFINITY, 0);
    for delta in tie_order(search) {
        let err: f64 =
            pairs.iter().map(|p| mean_abs(&global_shift(&p.left, delta), &p.right)).sum::<f64>() / pairs.len() as f64;
        if err < best.0 {
            best = (err, delta);
        }
    }
    Ok(best.1)
}

/// SAD block matching over the integer disparities of `range` (the empty
/// channel is ignored). For each left pixel `j` the window around `j` is
/// compared with the right view around `j + d`. Windows are truncated at
/// the borders and costs are averaged over the valid taps; ties go to the
/// smallest `|d|`, then the negative one.
pub fn block_match_disparity(
    left: &Image,
    right: &Image,
    window: usize,
    range: &DisparityRange,
) -> Result<DisparityMap> {
    const OP: &str = "block_match_disparity";
    if left.dims() != right.dims() {
        return Err(Error::shape(OP, "left and right dims differ"));
    }
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::invalid(OP, format!("window must be odd and >= 3, got {window}")));
    }
    let (w, h) = left.dims();
    if window > w || window > h {
        return Err(Error::invalid(OP, format!("window {window} larger than image {w}x{h}")));
    }
    let r = (window / 2) as i64;
    let mut best_cost = vec![f64::INFINITY; w * h];
    let mut best_d = vec![0i32; w * h];
    // integral images of per-pixel absolute difference and validity
    let mut sum = vec![0.0f64; (w + 1) * (h + 1)];
    let mut cnt = vec![0.0f64; (w + 1) * (h + 1)];
    for d in tie_order(range.d_min()..=range.d_max()) {
        for y in 0..h {
            let (mut row_s, mut row_c) = (0.0f64, 0.0f64);
            for x in 0..w {
                let xr = x as i64 + d as i64;
                if xr >= 0 && xr < w as i64 {
                    let xr = xr as usize;
                    row_s += (0..3).map(|c| (left.get(c, y, x) - right.get(c, y, xr)).abs() as f64).sum::<f64>();
                    row_c += 1.0;
                }
                let i = (y + 1) * (w + 1) + x + 1;
                sum[i] = sum[i - (w + 1)] + row_s;
                cnt[i] = cnt[i - (w + 1)] + row_c;
            }
        }
        for y in 0..h as i64 {
            let (y0, y1) = ((y - r).max(0) as usize, (y + r + 1).min(h as i64) as usize);
            for x in 0..w as i64 {
                let (x0, x1) = ((x - r).max(0) as usize, (x + r + 1).min(w as i64) as usize);
                let rect = |t: &[f64]| {
                    t[y1 * (w + 1) + x1] - t[y0 * (w + 1) + x1] - t[y1 * (w + 1) + x0] + t[y0 * (w + 1) + x0]
                };
                let n = rect(&cnt);
                if n < 0.5 {
                    continue;
                }
                let cost = rect(&sum) / n;
                let i = y as usize * w + x as usize;
                if cost < best_cost[i] {
                    best_cost[i] = cost;
                    best_d[i] = d;
                }
            }
        }
    }
    DisparityMap::new(Plane::new(w, h, best_d.iter().map(|&d| d as f32).collect())?)
}
