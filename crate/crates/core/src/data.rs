//! Stereo-pair datasets: directory loading, crop/resize preprocessing and a
//! seeded synthetic scene generator with ground-truth disparity.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dibr::{disparity_render, fill_disparity_holes, fill_holes, DepthMap, DisparityMap};
use crate::error::{Error, Result};
use crate::kv::KvConfig;
use crate::raster::{HoleMask, Image, Plane};
use crate::selection::DisparityRange;

/// A left/right view pair. `gt_disparity`, when known, is indexed at the
/// right view: `right[j] = left[j - d[j]]` on non-hole pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoPair {
    pub id: String,
    pub left: Image,
    pub right: Image,
    pub gt_disparity: Option<DisparityMap>,
}

impl StereoPair {
    pub fn new(id: impl Into<String>, left: Image, right: Image) -> Result<Self> {
        if left.dims() != right.dims() {
            return Err(Error::shape("stereo pair", format!("left {:?} vs right {:?}", left.dims(), right.dims())));
        }
        Ok(StereoPair { id: id.into(), left, right, gt_disparity: None })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.left.dims()
    }
}

pub type Dataset = Vec<StereoPair>;

fn is_image(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(), Some("png" | "ppm"))
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image(&path) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Loads `root/left/*` and `root/right/*` (PNG or PPM), matched by file stem
/// and sorted by it. `root/disp/<stem>.pfm` supplies ground truth when present.
pub fn load_stereo_dir(root: &Path) -> Result<Dataset> {
    let left = list_images(&root.join("left"))?;
    let right = list_images(&root.join("right"))?;
    if let Some(stem) = left.keys().find(|k| !right.contains_key(*k)) {
        return Err(Error::UnmatchedFile(stem.clone()));
    }
    if let Some(stem) = right.keys().find(|k| !left.contains_key(*k)) {
        return Err(Error::UnmatchedFile(stem.clone()));
    }
    if left.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    let mut pairs = Vec::with_capacity(left.len());
    for (stem, lpath) in &left {
        let mut pair = StereoPair::new(stem.clone(), Image::load(lpath)?, Image::load(&right[stem])?)?;
        let dpath = root.join("disp").join(format!("{stem}.pfm"));
        if dpath.is_file() {
            let d = Plane::load_pfm(&dpath)?;
            if d.dims() != pair.dims() {
                return Err(Error::shape(
                    "load_stereo_dir",
                    format!("{}: disparity dims differ from image", dpath.display()),
                ));
            }
            pair.gt_disparity = Some(DisparityMap::new(d)?);
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

/// Writes `left/`, `right/` (PNG) and `disp/` (PFM, when present) under `root`.
pub fn save_stereo_dir(root: &Path, pairs: &[StereoPair]) -> Result<()> {
    for sub in ["left", "right", "disp"] {
        fs::create_dir_all(root.join(sub)).map_err(|e| Error::io(root.join(sub), e))?;
    }
    for p in pairs {
        p.left.save(&root.join("left").join(format!("{}.png", p.id)))?;
        p.right.save(&root.join("right").join(format!("{}.png", p.id)))?;
        if let Some(d) = &p.gt_disparity {
            d.save_pfm(&root.join("disp").join(format!("{}.pfm", p.id)))?;
        }
    }
    Ok(())
}

/// Bilinear resize of both views to `resize_to`, then one random
/// `crop_to` window applied identically to both. Never flips.
/// Sizes are `(width, height)`.
pub fn preprocess<R: Rng + ?Sized>(
    pair: &StereoPair,
    resize_to: (usize, usize),
    crop_to: (usize, usize),
    rng: &mut R,
) -> Result<StereoPair> {
    let ((rw, rh), (cw, ch)) = (resize_to, crop_to);
    if cw > rw || ch > rh {
        return Err(Error::invalid("preprocess", format!("crop {cw}x{ch} larger than resize {rw}x{rh}")));
    }
    let x0 = if rw > cw { rng.random_range(0..=rw - cw) } else { 0 };
    let y0 = if rh > ch { rng.random_range(0..=rh - ch) } else { 0 };
    let left = pair.left.resize_bilinear(rw, rh).crop(x0, y0, cw, ch)?;
    let right = pair.right.resize_bilinear(rw, rh).crop(x0, y0, cw, ch)?;
    let gt_disparity = match &pair.gt_disparity {
        Some(d) => {
            let sx = rw as f32 / d.width() as f32;
            let plane = d.resize_bilinear(rw, rh).map(|v| v * sx).crop(x0, y0, cw, ch)?;
            Some(DisparityMap::new(plane)?)
        }
        None => None,
    };
    Ok(StereoPair { id: pair.id.clone(), left, right, gt_disparity })
}

/// splitmix64-style mixing of a base seed with stream coordinates.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        z = z.wrapping_add(p.wrapping_mul(0xBF58_476D_1CE4_E5B9)).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Texture {
    /// Bilinearly interpolated lattice noise with the given cell size.
    Noise { cell: usize },
    /// Two-colour sinusoidal grating; `period` in pixels, tilted so it is
    /// never purely vertical.
    Stripes { period: f32 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Region {
    Full,
    /// `x, y, width, height` in pixels.
    Rect(usize, usize, usize, usize),
    /// Axis-aligned box with random placement, sides spanning the given
    /// fraction range of the image.
    RandomRect {
        min_frac: f32,
        max_frac: f32,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Layer {
    pub texture: Texture,
    pub disparity: i32,
    pub region: Region,
}

/// Synthetic scene description. Layers are listed back to front; later
/// layers occlude earlier ones in both views.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub layers: Vec<Layer>,
    pub seed: u64,
    pub range: DisparityRange,
}

impl SceneSpec {
    /// Parses `dims = WxH`, `seed = N`, `range = MIN..MAX`, and
    /// `layers = texture:disparity:region, ...` where texture is
    /// `noise[/cell]` or `stripes[/period]` and region is `full`,
    /// `random[/min/max]` or `rect/x/y/w/h`.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let (width, height) = kv.get_dims("dims")?.unwrap_or((64, 32));
        let seed = kv.get_parsed("seed")?.unwrap_or(0);
        let range = match kv.get("range") {
            Some(r) => parse_range(r)?,
            None => DisparityRange::default(),
        };
        let layers = kv
            .get("layers")
            .ok_or_else(|| Error::Config("missing key 'layers'".into()))?
            .split(',')
            .map(|s| parse_layer(s.trim()))
            .collect::<Result<Vec<_>>>()?;
        Ok(SceneSpec { width, height, layers, seed, range })
    }
}

pub(crate) fn parse_range(s: &str) -> Result<DisparityRange> {
    let bad = || Error::Config(format!("bad range '{s}', expected MIN..MAX"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    DisparityRange::new(a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?, true)
}

fn parse_layer(s: &str) -> Result<Layer> {
    let bad = |why: &str| Error::Config(format!("bad layer '{s}': {why}"));
    let parts: Vec<&str> = s.split(':').collect();
    let [tex, disp, region] = parts[..] else {
        return Err(bad("expected texture:disparity:region"));
    };
    let args = |field: &str| -> Result<(String, Vec<f32>)> {
        let mut it = field.split('/');
        let name = it.next().unwrap_or_default().to_string();
        let nums = it.map(|v| v.parse::<f32>().map_err(|_| bad("non-numeric parameter"))).collect::<Result<_>>()?;
        Ok((name, nums))
    };
    let (tname, targs) = args(tex)?;
    let texture = match (tname.as_str(), &targs[..]) {
        ("noise", []) => Texture::Noise { cell: 4 },
        ("noise", [c]) if *c >= 1.0 => Texture::Noise { cell: *c as usize },
        ("stripes", []) => Texture::Stripes { period: 5.0 },
        ("stripes", [p]) if *p > 1.0 => Texture::Stripes { period: *p },
        _ => return Err(bad("unknown texture")),
    };
    let disparity = disp.parse().map_err(|_| bad("disparity must be an integer"))?;
    let (rname, rargs) = args(region)?;
    let region = match (rname.as_str(), &rargs[..]) {
        ("full", []) => Region::Full,
        ("random", []) => Region::RandomRect { min_frac: 0.3, max_frac: 0.6 },
        ("random", [a, b]) if 0.0 < *a && a <= b && *b <= 1.0 => Region::RandomRect { min_frac: *a, max_frac: *b },
        ("rect", [x, y, w, h]) => Region::Rect(*x as usize, *y as usize, *w as usize, *h as usize),
        _ => return Err(bad("unknown region")),
    };
    Ok(Layer { texture, disparity, region })
}

/// Everything produced while rendering a synthetic scene.
#[derive(Clone, Debug)]
pub struct SceneRender {
    pub pair: StereoPair,
    /// Disparity indexed at the left view (the forward-warp input).
    pub left_disparity: DisparityMap,
    /// Right-view pixels that no left pixel landed on (filled afterwards).
    pub holes: HoleMask,
}

fn random_color<R: Rng>(rng: &mut R) -> [f32; 3] {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
}

fn paint_texture<R: Rng>(texture: Texture, width: usize, height: usize, rng: &mut R) -> Image {
    match texture {
        Texture::Noise { cell } => {
            let (gw, gh) = (width / cell + 2, height / cell + 2);
            let lattice: Vec<[f32; 3]> = (0..gw * gh).map(|_| random_color(rng)).collect();
            Image::from_fn(width, height, |c, y, x| {
                let (fx, fy) = (x as f32 / cell as f32, y as f32 / cell as f32);
                let (x0, y0) = (fx as usize, fy as usize);
                let (tx, ty) = (fx - x0 as f32, fy - y0 as f32);
                let at = |xx: usize, yy: usize| lattice[yy * gw + xx][c];
                let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1, y0) * tx;
                let bot = at(x0, y0 + 1) * (1.0 - tx) + at(x0 + 1, y0 + 1) * tx;
                top * (1.0 - ty) + bot * ty
            })
        }
        Texture::Stripes { period } => {
            let (a, b) = (random_color(rng), random_color(rng));
            let angle: f32 = rng.random_range(0.2..0.6);
            let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            let (ca, sa) = (angle.cos(), angle.sin());
            Image::from_fn(width, height, |c, y, x| {
                let t = 0.5 + 0.5 * ((x as f32 * ca + y as f32 * sa) * std::f32::consts::TAU / period + phase).sin();
                a[c] * t + b[c] * (1.0 - t)
            })
        }
    }
}

fn region_box<R: Rng>(region: Region, width: usize, height: usize, rng: &mut R) -> (usize, usize, usize, usize) {
    match region {
        Region::Full => (0, 0, width, height),
        Region::Rect(x, y, w, h) => {
            let x = x.min(width);
            let y = y.min(height);
            (x, y, w.min(width - x), h.min(height - y))
        }
        Region::RandomRect { min_frac, max_frac } => {
            let side = |len: usize, rng: &mut R| {
                let lo = ((len as f32 * min_frac).round() as usize).max(1);
                let hi = ((len as f32 * max_frac).round() as usize).clamp(lo, len);
                rng.random_range(lo..=hi)
            };
            let (w, h) = (side(width, rng), side(height, rng));
            (rng.random_range(0..=width - w), rng.random_range(0..=height - h), w, h)
        }
    }
}

/// Composites the layers into a left view, forward-warps it with the
/// per-pixel layer disparities (nearer layers win collisions), and fills
/// disocclusions from the background side.
pub fn render_scene(spec: &SceneSpec) -> Result<SceneRender> {
    let (w, h) = (spec.width, spec.height);
    if spec.layers.is_empty() {
        return Err(Error::EmptyInput("synth_stereo layers"));
    }
    spec.range.check_width(w)?;
    if let Some(l) = spec.layers.iter().find(|l| !spec.range.contains(l.disparity)) {
        return Err(Error::invalid(
            "synth_stereo",
            format!("layer disparity {} outside [{}, {}]", l.disparity, spec.range.d_min(), spec.range.d_max()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut left = Image::filled(w, h, [0.5; 3]);
    let mut disp = Plane::filled(w, h, spec.layers[0].disparity as f32);
    let n_layers = spec.layers.len() as f32;
    let mut depth = Plane::filled(w, h, n_layers + 1.0);
    for (k, layer) in spec.layers.iter().enumerate() {
        let tex = paint_texture(layer.texture, w, h, &mut rng);
        let (x0, y0, bw, bh) = region_box(layer.region, w, h, &mut rng);
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                for c in 0..3 {
                    left.set(c, y, x, tex.get(c, y, x));
                }
                disp.set(y, x, layer.disparity as f32);
                depth.set(y, x, n_layers - k as f32);
            }
        }
    }
    let left_disparity = DisparityMap::new(disp)?;
    let depth = DepthMap::new(depth)?;
    let rendered = disparity_render(&left, &left_disparity, Some(&depth))?;
    let right = fill_holes(&rendered.image, &rendered.holes, Some(&rendered.target_disparity))?;
    let gt = fill_disparity_holes(&rendered.target_disparity, &rendered.holes)?;
    let mut pair = StereoPair::new(format!("{:06}", spec.seed % 1_000_000), left, right)?;
    pair.gt_disparity = Some(gt);
    Ok(SceneRender { pair, left_disparity, holes: rendered.holes })
}

/// Renders a synthetic stereo pair with ground-truth disparity.
pub fn synth_stereo(spec: &SceneSpec) -> Result<StereoPair> {
    Ok(render_scene(spec)?.pair)
}

/// `count` scenes from one template, each with a seed derived from the
/// template seed and its index. Ids are `00000`, `00001`, ...
pub fn synth_dataset(template: &SceneSpec, count: usize) -> Result<Dataset> {
    (0..count)
        .map(|i| {
            let spec = SceneSpec { seed: derive_seed(template.seed, &[i as u64]), ..template.clone() };
            let mut pair = synth_stereo(&spec)?;
            pair.id = format!("{i:05}");
            Ok(pair)
        })
        .collect()
}
