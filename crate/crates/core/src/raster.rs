//! Planar RGB images, single-channel maps, and file I/O.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

/// RGB image stored channel-planar (`3 x H x W`), values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::shape(
                "image",
                format!("{width}x{height} RGB needs {} values, got {}", 3 * width * height, data.len()),
            ));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let plane = width * height;
        let mut data = Vec::with_capacity(3 * plane);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, plane));
        }
        Image { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Image { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.width * self.height;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let plane = self.width * self.height;
        &mut self.data[c * plane..(c + 1) * plane]
    }

    /// `[1, 3, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 3, self.height, self.width], self.data.clone()).unwrap()
    }

    /// Stacks same-sized images into a `[N, 3, H, W]` batch.
    pub fn batch(images: &[&Image]) -> Result<Tensor> {
        let first = images.first().ok_or(Error::EmptyInput("batch"))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            if im.dims() != first.dims() {
                return Err(Error::shape("batch", format!("{:?} vs {:?}", im.dims(), first.dims())));
            }
            data.extend_from_slice(&im.data);
        }
        Tensor::new(&[images.len(), 3, first.height, first.width], data)
    }

    /// Item `index` of a `[N, 3, H, W]` tensor.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let (n, c, h, w) = t.dims4("image")?;
        if c != 3 || index >= n {
            return Err(Error::shape("image", format!("cannot take item {index} of {:?} as RGB", t.shape())));
        }
        let len = 3 * h * w;
        Image::new(w, h, t.data()[index * len..(index + 1) * len].to_vec())
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::shape(
                "crop",
                format!("{width}x{height}+{x0}+{y0} outside {}x{}", self.width, self.height),
            ));
        }
        Ok(Image::from_fn(width, height, |c, y, x| self.get(c, y0 + y, x0 + x)))
    }

    /// Bilinear resize with pixel-center alignment and clamped borders.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Self {
        if (width, height) == self.dims() {
            return self.clone();
        }
        let mut out = Image::filled(width, height, [0.0; 3]);
        for c in 0..3 {
            let src = self.channel(c);
            let dst = out.channel_mut(c);
            resize_plane(src, self.width, self.height, dst, width, height);
        }
        out
    }

    pub fn clamped(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    /// Loads any PNG or PNM file as RGB in `[0, 1]`.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let decoded = image::load_from_memory(&bytes)
            .map_err(|e| Error::Decode { path: path.to_path_buf(), detail: e.to_string() })?;
        let rgb = decoded.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let raw = rgb.as_raw();
        Ok(Image::from_fn(w, h, |c, y, x| raw[(y * w + x) * 3 + c] as f32 / 255.0))
    }

    /// 8-bit interleaved RGB, values clamped and rounded.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    out.push((self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        out
    }

    /// Writes PNG, or binary PPM when the extension is `.ppm`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .expect("buffer size matches dimensions");
        let format = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
            Some(e) if e == "ppm" => image::ImageFormat::Pnm,
            _ => image::ImageFormat::Png,
        };
        buf.save_with_format(path, format)
            .map_err(|e| Error::Encode { path: path.to_path_buf(), detail: e.to_string() })
    }
}

pub(crate) fn resize_plane(src: &[f32], sw: usize, sh: usize, dst: &mut [f32], dw: usize, dh: usize) {
    let xs: Vec<_> = (0..dw).map(|x| sample_coord(x, sw, dw)).collect();
    for y in 0..dh {
        let (y0, y1, fy) = sample_coord(y, sh, dh);
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bot = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            dst[y * dw + x] = top * (1.0 - fy) + bot * fy;
        }
    }
}

/// Source taps and weight for destination index `i` under half-pixel alignment.
pub(crate) fn sample_coord(i: usize, src_len: usize, dst_len: usize) -> (usize, usize, f32) {
    let s = ((i as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).max(0.0);
    let i0 = (s.floor() as usize).min(src_len - 1);
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, (s - i0 as f64) as f32)
}

/// Single-channel `H x W` map (depth, disparity).
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(
                "plane",
                format!("{width}x{height} needs {} values, got {}", width * height, data.len()),
            ));
        }
        Ok(Plane { width, height, data })
    }

    pub fn filled(width: usize, height: usize, v: f32) -> Self {
        Plane { width, height, data: vec![v; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Plane { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Plane { width: self.width, height: self.height, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::shape("crop", "window outside plane"));
        }
        Ok(Plane::from_fn(width, height, |y, x| self.get(y0 + y, x0 + x)))
    }

    pub fn resize_bilinear(&self, width: usize, height: usize) -> Self {
        if (width, height) == self.dims() {
            return self.clone();
        }
        let mut out = Plane::filled(width, height, 0.0);
        resize_plane(&self.data, self.width, self.height, &mut out.data, width, height);
        out
    }

    /// Portable float map, little-endian, rows stored bottom-up.
    pub fn save_pfm(&self, path: &Path) -> Result<()> {
        let mut buf = format!("Pf\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                buf.write_all(&self.get(y, x).to_le_bytes()).unwrap();
            }
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load_pfm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |detail: &str| Error::Decode { path: path.to_path_buf(), detail: detail.to_string() };
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated PFM header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1; // single whitespace byte after the scale
        if fields[0] != "Pf" {
            return Err(bad("only single-channel PFM ('Pf') is supported"));
        }
        let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
        let scale: f32 = fields[3].parse().map_err(|_| bad("bad scale"))?;
        let body = bytes.get(pos..).ok_or_else(|| bad("missing data"))?;
        if body.len() < width * height * 4 {
            return Err(bad("truncated PFM data"));
        }
        let mut plane = Plane::filled(width, height, 0.0);
        for (i, chunk) in body.chunks_exact(4).take(width * height).enumerate() {
            let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
            let v = if scale < 0.0 { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
            let (row, x) = (i / width, i % width);
            plane.set(height - 1 - row, x, v);
        }
        Ok(plane)
    }
}

/// Binary per-pixel flag map; `true` marks a hole.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HoleMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl HoleMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape("hole mask", "length does not match dimensions"));
        }
        Ok(HoleMask { width, height, data })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        HoleMask { width, height, data: vec![false; width * height] }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&h| h).count()
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }
}
