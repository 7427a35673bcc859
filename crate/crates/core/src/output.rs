//! Stereo presentation formats.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::raster::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StereoFormat {
    /// Red from the left view, green and blue from the right.
    Anaglyph,
    SideBySide,
    /// Separate left and right files.
    Pair,
}

impl FromStr for StereoFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anaglyph" => Ok(StereoFormat::Anaglyph),
            "sbs" | "side_by_side" => Ok(StereoFormat::SideBySide),
            "pair" => Ok(StereoFormat::Pair),
            _ => Err(Error::Config(format!("unknown format '{s}' (anaglyph, sbs, pair)"))),
        }
    }
}

fn same_dims(op: &'static str, left: &Image, right: &Image) -> Result<()> {
    if left.dims() != right.dims() {
        return Err(Error::shape(op, format!("left {:?} vs right {:?}", left.dims(), right.dims())));
    }
    Ok(())
}

pub fn anaglyph(left: &Image, right: &Image) -> Result<Image> {
    same_dims("anaglyph", left, right)?;
    let mut out = right.clone();
    out.channel_mut(0).copy_from_slice(left.channel(0));
    Ok(out)
}

/// Horizontal concatenation, left first. With `half_width` each view is
/// first squeezed to half its width so the result keeps the input width.
pub fn side_by_side(left: &Image, right: &Image, half_width: bool) -> Result<Image> {
    same_dims("side_by_side", left, right)?;
    let (l, r) = if half_width {
        let (w, h) = left.dims();
        if w < 2 {
            return Err(Error::invalid("side_by_side", "half-width output needs width >= 2"));
        }
        (left.resize_bilinear(w / 2, h), right.resize_bilinear(w / 2, h))
    } else {
        (left.clone(), right.clone())
    };
    let (w, h) = l.dims();
    Ok(Image::from_fn(2 * w, h, |c, y, x| if x < w { l.get(c, y, x) } else { r.get(c, y, x - w) }))
}

/// Splits a full-width side-by-side image back into its two views.
pub fn split_side_by_side(img: &Image) -> Result<(Image, Image)> {
    let (w, h) = img.dims();
    if w % 2 != 0 {
        return Err(Error::invalid("split_side_by_side", format!("odd width {w}")));
    }
    Ok((img.crop(0, 0, w / 2, h)?, img.crop(w / 2, 0, w / 2, h)?))
}

/// Writes `<stem>_anaglyph.png`, `<stem>_sbs.png`, or `<stem>_left.png` and
/// `<stem>_right.png` into `dir`, returning the paths written.
pub fn write_stereo(
    left: &Image,
    right: &Image,
    format: StereoFormat,
    half_width: bool,
    dir: &Path,
    stem: &str,
) -> Result<Vec<PathBuf>> {
    let clamp = |i: Image| i.clamped();
    let outputs = match format {
        StereoFormat::Anaglyph => vec![(format!("{stem}_anaglyph.png"), clamp(anaglyph(left, right)?))],
        StereoFormat::SideBySide => vec![(format!("{stem}_sbs.png"), clamp(side_by_side(left, right, half_width)?))],
        StereoFormat::Pair => {
            same_dims("write_stereo", left, right)?;
            vec![(format!("{stem}_left.png"), clamp(left.clone())), (format!("{stem}_right.png"), clamp(right.clone()))]
        }
    };
    let mut paths = Vec::new();
    for (name, img) in outputs {
        let p = dir.join(name);
        img.save(&p)?;
        paths.push(p);
    }
    Ok(paths)
}
