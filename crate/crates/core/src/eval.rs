//! Reconstruction error, the per-frame oracle shift search, and the method
//! comparison harness.

use std::fmt::{self, Write as _};
use std::ops::RangeInclusive;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::data::StereoPair;
use crate::dibr::{
    block_match_disparity, disparity_render, fill_holes, fit_global_disparity, gather_render, global_shift,
    DisparityMap,
};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::raster::{Image, Plane};
use crate::selection::{render_shifted, DisparityRange, DisparityVolume};
use crate::tensorcore::Mode;

/// Mean absolute difference over all pixels and channels, in 8-bit units.
pub fn mae(pred: &Image, truth: &Image) -> Result<f32> {
    if pred.dims() != truth.dims() {
        return Err(Error::shape("mae", format!("{:?} vs {:?}", pred.dims(), truth.dims())));
    }
    let sum: f64 = pred.data().iter().zip(truth.data()).map(|(a, b)| (a - b).abs() as f64).sum();
    Ok((255.0 * sum / pred.data().len() as f64) as f32)
}

/// What the oracle re-renders under a constant disparity offset.
#[derive(Clone, Copy, Debug)]
pub enum ShiftSource<'a> {
    /// Channel `d` is reinterpreted as disparity `d + offset`.
    Volume(&'a DisparityVolume),
    /// A right-view-indexed disparity map, rendered by gathering with `D + offset`.
    Disparity(&'a DisparityMap),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleResult {
    pub offset: i32,
    pub mae: f32,
}

/// Tries every integer offset in `search` and returns the one with the
/// lowest MAE against `truth`. Ties go to the smallest `|offset|`, then the
/// negative one, so an offset of 0 wins whenever it is optimal.
pub fn oracle_shift(
    left: &Image,
    source: ShiftSource<'_>,
    truth: &Image,
    search: RangeInclusive<i32>,
) -> Result<OracleResult> {
    const OP: &str = "oracle_shift";
    if search.is_empty() || !search.contains(&0) {
        return Err(Error::invalid(OP, "search range must contain 0"));
    }
    let w = left.width() as i64;
    let (lo, hi) = match source {
        ShiftSource::Volume(v) => (v.range().d_min() as i64, v.range().d_max() as i64),
        ShiftSource::Disparity(d) => {
            let r = d.rounded();
            (*r.iter().min().unwrap_or(&0) as i64, *r.iter().max().unwrap_or(&0) as i64)
        }
    };
    let (s0, s1) = (*search.start() as i64, *search.end() as i64);
    if (lo + s0).abs() >= w || (hi + s1).abs() >= w {
        return Err(Error::invalid(
            OP,
            format!("offsets {s0}..={s1} move disparities [{lo}, {hi}] outside the {w}-pixel frame"),
        ));
    }
    let mut order: Vec<i32> = search.collect();
    order.sort_by_key(|o| (o.unsigned_abs(), *o));
    let mut best: Option<OracleResult> = None;
    for offset in order {
        let rendered = match source {
            ShiftSource::Volume(v) => Image::from_tensor(&render_shifted(&left.to_tensor(), v, 1, offset)?, 0)?,
            ShiftSource::Disparity(d) => {
                let shifted = DisparityMap::new(d.map(|x| x + offset as f32))?;
                gather_render(left, &shifted)?
            }
        };
        let m = mae(&rendered, truth)?;
        if best.is_none_or(|b| m < b.mae) {
            best = Some(OracleResult { offset, mae: m });
        }
    }
    Ok(best.expect("nonempty search"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// Copies the true right view.
    GroundTruth,
    GlobalDisparity,
    /// SAD block matching followed by forward rendering and hole filling.
    BlockMatch,
    Deep3d,
    Deep3dOracle,
    /// Network without the selection layer, regressing pixels directly.
    Regression,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::GroundTruth,
        Method::GlobalDisparity,
        Method::BlockMatch,
        Method::Deep3d,
        Method::Deep3dOracle,
        Method::Regression,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::GroundTruth => "ground_truth",
            Method::GlobalDisparity => "global_disparity",
            Method::BlockMatch => "block_match+dibr",
            Method::Deep3d => "deep3d",
            Method::Deep3dOracle => "deep3d+oracle",
            Method::Regression => "regression",
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<Method>> {
        s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(str::parse).collect()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ground_truth" | "gt" => Ok(Method::GroundTruth),
            "global_disparity" | "global" => Ok(Method::GlobalDisparity),
            "block_match+dibr" | "block_match" => Ok(Method::BlockMatch),
            "deep3d" => Ok(Method::Deep3d),
            "deep3d+oracle" => Ok(Method::Deep3dOracle),
            "regression" | "regression-ablation" => Ok(Method::Regression),
            _ => Err(Error::Config(format!("unknown method '{s}'"))),
        }
    }
}

/// Models and settings shared by all frames of a comparison.
#[derive(Clone, Debug)]
pub struct EvalSetup<'a> {
    /// Global shift fitted on training data; `None` fits it on the
    /// evaluated frames.
    pub global_delta: Option<i32>,
    pub global_search: RangeInclusive<i32>,
    pub block_window: usize,
    pub block_range: DisparityRange,
    pub oracle_search: RangeInclusive<i32>,
    pub deep3d: Option<&'a Network>,
    pub regression: Option<&'a Network>,
}

impl<'a> EvalSetup<'a> {
    pub fn new(range: DisparityRange) -> Self {
        let span = range.d_min().abs().max(range.d_max().abs());
        EvalSetup {
            global_delta: None,
            global_search: -span..=span,
            block_window: 7,
            block_range: range,
            oracle_search: -4..=4,
            deep3d: None,
            regression: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodResult {
    pub method: Method,
    /// `(frame id, MAE)` in dataset order.
    pub per_frame: Vec<(String, f32)>,
    pub mean: f32,
    pub seconds: f64,
    /// Chosen offsets for oracle methods.
    pub offsets: Option<Vec<i32>>,
}

impl MethodResult {
    pub fn frames_per_second(&self) -> f64 {
        if self.seconds > 0.0 {
            self.per_frame.len() as f64 / self.seconds
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub results: Vec<MethodResult>,
}

impl EvalReport {
    pub fn get(&self, method: Method) -> Option<&MethodResult> {
        self.results.iter().find(|r| r.method == method)
    }

    pub fn mean(&self, method: Method) -> Option<f32> {
        self.get(method).map(|r| r.mean)
    }

    /// `method,frame_id,mae`, one row per method and frame.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,frame_id,mae\n");
        for r in &self.results {
            for (id, m) in &r.per_frame {
                let _ = writeln!(s, "{},{},{}", r.method, id, m);
            }
        }
        s
    }

    /// One row per method: mean MAE and throughput.
    pub fn table(&self) -> String {
        let width = self.results.iter().map(|r| r.method.label().len()).max().unwrap_or(6).max(6);
        let mut s = format!("{:<width$}  {:>9}  {:>9}\n", "method", "mae", "frames/s");
        for r in &self.results {
            let _ = writeln!(s, "{:<width$}  {:>9.4}  {:>9.1}", r.method.label(), r.mean, r.frames_per_second());
        }
        s
    }
}

/// Evaluates every method on the same frames. Frames must already have the
/// networks' input size when a network method is requested.
pub fn compare(frames: &[StereoPair], methods: &[Method], setup: &EvalSetup<'_>) -> Result<EvalReport> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let mut results = Vec::with_capacity(methods.len());
    for &method in methods {
        let start = Instant::now();
        let global = match method {
            Method::GlobalDisparity => Some(match setup.global_delta {
                Some(d) => d,
                None => fit_global_disparity(frames, setup.global_search.clone())?,
            }),
            _ => None,
        };
        let outcome: Vec<(f32, Option<i32>)> =
            frames.par_iter().map(|f| eval_frame(f, method, global, setup)).collect::<Result<_>>()?;
        let seconds = start.elapsed().as_secs_f64();
        let per_frame: Vec<(String, f32)> = frames.iter().zip(&outcome).map(|(f, (m, _))| (f.id.clone(), *m)).collect();
        let mean = (per_frame.iter().map(|(_, m)| *m as f64).sum::<f64>() / per_frame.len() as f64) as f32;
        let offsets = (method == Method::Deep3dOracle).then(|| outcome.iter().map(|(_, o)| o.unwrap_or(0)).collect());
        results.push(MethodResult { method, per_frame, mean, seconds, offsets });
    }
    Ok(EvalReport { results })
}

fn require(net: Option<&Network>, method: Method) -> Result<&Network> {
    net.ok_or_else(|| Error::Config(format!("method {method} needs a trained network")))
}

fn predict(net: &Network, left: &Image) -> Result<(Image, Option<DisparityVolume>)> {
    let p = net.predict_right(&left.to_tensor(), Mode::Eval)?;
    Ok((Image::from_tensor(&p.right, 0)?, p.volume))
}

fn eval_frame(
    frame: &StereoPair,
    method: Method,
    global: Option<i32>,
    setup: &EvalSetup<'_>,
) -> Result<(f32, Option<i32>)> {
    let (left, truth) = (&frame.left, &frame.right);
    let pred = match method {
        Method::GroundTruth => truth.clone(),
        Method::GlobalDisparity => global_shift(left, global.expect("fitted above")),
        Method::BlockMatch => {
            let disp = block_match_disparity(left, truth, setup.block_window, &setup.block_range)?;
            let r = disparity_render(left, &disp, None)?;
            fill_holes(&r.image, &r.holes, Some(&r.target_disparity))?
        }
        Method::Deep3d => predict(require(setup.deep3d, method)?, left)?.0,
        Method::Regression => predict(require(setup.regression, method)?, left)?.0,
        Method::Deep3dOracle => {
            let (_, volume) = predict(require(setup.deep3d, method)?, left)?;
            let volume = volume.ok_or_else(|| Error::Config("deep3d+oracle needs a selection-layer network".into()))?;
            let r = oracle_shift(left, ShiftSource::Volume(&volume), truth, setup.oracle_search.clone())?;
            return Ok((r.mae, Some(r.offset)));
        }
    };
    Ok((mae(&pred, truth)?, None))
}

/// Per-pixel MAE map in 8-bit units (channel mean), for inspection.
pub fn error_map(pred: &Image, truth: &Image) -> Result<Plane> {
    if pred.dims() != truth.dims() {
        return Err(Error::shape("error_map", "dims differ"));
    }
    let (w, h) = pred.dims();
    Ok(Plane::from_fn(w, h, |y, x| {
        (0..3).map(|c| (pred.get(c, y, x) - truth.get(c, y, x)).abs()).sum::<f32>() * 255.0 / 3.0
    }))
}
