use rand::Rng;

use super::graph::{Backward, BackwardCtx};
use super::kernels::{self, ConvGeom};
use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Train/eval switch for batch norm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running mean and (unbiased) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    /// Exponential moving average: `running = momentum * running + (1 - momentum) * batch`.
    pub fn blend(&mut self, batch: &RunningStats, momentum: f32) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
    }
}

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.9;

struct ConvOp {
    geom: ConvGeom,
    has_bias: bool,
}

impl Backward for ConvOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let g = &self.geom;
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let gy = ctx.grad.data();
        let gx = ctx.needs[0].then(|| Tensor::new(x.shape(), kernels::corr_backward_data(g, gy, w.data())).unwrap());
        let gw = ctx.needs[1].then(|| Tensor::new(w.shape(), kernels::corr_backward_weight(g, gy, x.data())).unwrap());
        let mut out = vec![gx, gw];
        if self.has_bias {
            out.push(
                ctx.needs[2]
                    .then(|| Tensor::new(&[g.cout], kernels::channel_sums(gy, g.n, g.cout, g.hout * g.wout)).unwrap()),
            );
        }
        Ok(out)
    }
}

struct DeconvOp {
    // geometry of the equivalent convolution (large = output, small = input)
    geom: ConvGeom,
}

impl Backward for DeconvOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let g = &self.geom;
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let gy = ctx.grad.data();
        let gx = ctx.needs[0].then(|| Tensor::new(x.shape(), kernels::corr_forward(g, gy, w.data(), None)).unwrap());
        let gw = ctx.needs[1].then(|| Tensor::new(w.shape(), kernels::corr_backward_weight(g, x.data(), gy)).unwrap());
        Ok(vec![gx, gw])
    }
}

struct MaxPoolOp {
    argmax: Vec<u32>,
}

impl Backward for MaxPoolOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let mut gx = Tensor::zeros(ctx.inputs[0].shape());
        let d = gx.data_mut();
        for (&src, &g) in self.argmax.iter().zip(ctx.grad.data()) {
            d[src as usize] += g;
        }
        Ok(vec![Some(gx)])
    }
}

struct LinearOp {
    n: usize,
    d: usize,
    m: usize,
}

impl Backward for LinearOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (n, d, m) = (self.n, self.d, self.m);
        let x = ctx.inputs[0].data();
        let w = ctx.inputs[1].data();
        let gy = ctx.grad.data();
        let gx = ctx.needs[0].then(|| {
            let mut gx = vec![0.0f32; n * d];
            for r in 0..n {
                let gyr = &gy[r * m..][..m];
                for (k, gxv) in gx[r * d..][..d].iter_mut().enumerate() {
                    *gxv = w[k * m..][..m].iter().zip(gyr).map(|(a, b)| a * b).sum();
                }
            }
            Tensor::new(&[n, d], gx).unwrap()
        });
        let gw = ctx.needs[1].then(|| {
            let mut gw = vec![0.0f32; d * m];
            for r in 0..n {
                let gyr = &gy[r * m..][..m];
                for k in 0..d {
                    let xv = x[r * d + k];
                    if xv == 0.0 {
                        continue;
                    }
                    for (a, b) in gw[k * m..][..m].iter_mut().zip(gyr) {
                        *a += xv * b;
                    }
                }
            }
            Tensor::new(&[d, m], gw).unwrap()
        });
        let gb = ctx.needs[2].then(|| {
            let mut gb = vec![0.0f32; m];
            for r in 0..n {
                for (a, b) in gb.iter_mut().zip(&gy[r * m..][..m]) {
                    *a += b;
                }
            }
            Tensor::new(&[m], gb).unwrap()
        });
        Ok(vec![gx, gw, gb])
    }
}

struct BatchNormOp {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    train: bool,
    dims: (usize, usize, usize),
}

impl Backward for BatchNormOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (n, c, plane) = self.dims;
        let gamma = ctx.inputs[1].data();
        let gy = ctx.grad.data();
        let count = (n * plane) as f32;
        let mut sum_g = vec![0.0f32; c];
        let mut sum_gx = vec![0.0f32; c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for (g, xh) in gy[off..off + plane].iter().zip(&self.xhat[off..off + plane]) {
                    sum_g[ch] += g;
                    sum_gx[ch] += g * xh;
                }
            }
        }
        let gx = ctx.needs[0].then(|| {
            let mut gx = vec![0.0f32; gy.len()];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * plane;
                    let k = gamma[ch] * self.inv_std[ch];
                    let (mg, mgx) = (sum_g[ch] / count, sum_gx[ch] / count);
                    for i in off..off + plane {
                        gx[i] = if self.train { k * (gy[i] - mg - self.xhat[i] * mgx) } else { k * gy[i] };
                    }
                }
            }
            Tensor::new(ctx.inputs[0].shape(), gx).unwrap()
        });
        let ggamma = ctx.needs[1].then(|| Tensor::new(&[c], sum_gx.clone()).unwrap());
        let gbeta = ctx.needs[2].then(|| Tensor::new(&[c], sum_g.clone()).unwrap());
        Ok(vec![gx, ggamma, gbeta])
    }
}

struct SoftmaxOp {
    dims: (usize, usize, usize),
}

impl Backward for SoftmaxOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (n, c, plane) = self.dims;
        let y = ctx.output.data();
        let gy = ctx.grad.data();
        let mut gx = vec![0.0f32; y.len()];
        let mut dot = vec![0.0f32; plane];
        for b in 0..n {
            let base = b * c * plane;
            dot.fill(0.0);
            for ch in 0..c {
                let off = base + ch * plane;
                for p in 0..plane {
                    dot[p] += y[off + p] * gy[off + p];
                }
            }
            for ch in 0..c {
                let off = base + ch * plane;
                for p in 0..plane {
                    gx[off + p] = y[off + p] * (gy[off + p] - dot[p]);
                }
            }
        }
        Ok(vec![Some(Tensor::new(ctx.output.shape(), gx)?)])
    }
}

struct ReluOp;

impl Backward for ReluOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let x = ctx.inputs[0].data();
        let g = ctx.grad.data().iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
        Ok(vec![Some(Tensor::new(ctx.output.shape(), g)?)])
    }
}

struct ScaleMaskOp {
    // per-element multiplier (dropout: 0 or 1/(1-rate))
    mask: Vec<f32>,
}

impl Backward for ScaleMaskOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let g = ctx.grad.data().iter().zip(&self.mask).map(|(g, m)| g * m).collect();
        Ok(vec![Some(Tensor::new(ctx.output.shape(), g)?)])
    }
}

struct L1Op;

impl Backward for L1Op {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let scale = ctx.grad.data()[0] / a.len() as f32;
        let sign: Vec<f32> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| {
                let d = x - y;
                if d > 0.0 {
                    scale
                } else if d < 0.0 {
                    -scale
                } else {
                    0.0
                }
            })
            .collect();
        let ga = ctx.needs[0].then(|| Tensor::new(a.shape(), sign.clone()).unwrap());
        let gb = ctx.needs[1].then(|| Tensor::new(b.shape(), sign.iter().map(|v| -v).collect()).unwrap());
        Ok(vec![ga, gb])
    }
}

struct AddOp;

impl Backward for AddOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        Ok(ctx.needs.iter().map(|&n| n.then(|| ctx.grad.clone())).collect())
    }
}

struct MulOp;

impl Backward for MulOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let g = ctx.grad.data();
        let prod = |other: &Tensor| {
            let d = g.iter().zip(other.data()).map(|(g, o)| g * o).collect();
            Tensor::new(other.shape(), d).unwrap()
        };
        Ok(vec![ctx.needs[0].then(|| prod(b)), ctx.needs[1].then(|| prod(a))])
    }
}

struct SumOp;

impl Backward for SumOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        let g = ctx.grad.data()[0];
        Ok(vec![Some(Tensor::full(ctx.inputs[0].shape(), g))])
    }
}

struct ReshapeOp;

impl Backward for ReshapeOp {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(ctx.grad.clone().reshape(ctx.inputs[0].shape())?)])
    }
}

impl Graph {
    /// 2-D cross-correlation (no kernel flip). The output size
    /// `(H + 2 pad - kh) / stride + 1` must be exact.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let (n, cin, h, w) = self.value(input).dims4(OP)?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4(OP)?;
        if wcin != cin {
            return Err(Error::shape(OP, format!("input has {cin} channels, weight expects {wcin}")));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape(OP, format!("bias shape {:?}, expected [{cout}]", self.value(b).shape())));
            }
        }
        if stride == 0 {
            return Err(Error::invalid(OP, "stride must be >= 1"));
        }
        let out_dim = |size: usize, k: usize| -> Result<usize> {
            let span = size + 2 * pad;
            if span < k || !(span - k).is_multiple_of(stride) {
                return Err(Error::shape(
                    OP,
                    format!("size {size} with kernel {k}, stride {stride}, pad {pad} has no integral output"),
                ));
            }
            Ok((span - k) / stride + 1)
        };
        let geom = ConvGeom {
            n,
            cin,
            hin: h,
            win: w,
            cout,
            hout: out_dim(h, kh)?,
            wout: out_dim(w, kw)?,
            kh,
            kw,
            stride,
            pad,
        };
        let out = kernels::corr_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&[n, cout, geom.hout, geom.wout], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.record(OP, value, &inputs, Box::new(ConvOp { geom, has_bias: bias.is_some() }))
    }

    /// Transposed convolution upsampling by `stride`: kernel `2S x 2S`,
    /// padding `S / 2`, output exactly `S` times the input size. Weight
    /// layout is `[C_in, C_out, 2S, 2S]`, the layout of the convolution it
    /// transposes.
    pub fn deconv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        const OP: &str = "deconv2d";
        if stride < 1 {
            return Err(Error::invalid(OP, "stride must be >= 1"));
        }
        if pad != stride / 2 {
            return Err(Error::invalid(
                OP,
                format!("pad {pad} inconsistent with stride {stride} (expected {})", stride / 2),
            ));
        }
        let (n, c, h, w) = self.value(input).dims4(OP)?;
        let (wc, cout, kh, kw) = self.value(weight).dims4(OP)?;
        if wc != c {
            return Err(Error::shape(OP, format!("input has {c} channels, weight expects {wc}")));
        }
        if kh != 2 * stride || kw != 2 * stride {
            return Err(Error::shape(OP, format!("kernel {kh}x{kw}, expected {0}x{0}", 2 * stride)));
        }
        let geom =
            ConvGeom { n, cin: cout, hin: h * stride, win: w * stride, cout: c, hout: h, wout: w, kh, kw, stride, pad };
        let out = kernels::corr_backward_data(&geom, self.value(input).data(), self.value(weight).data());
        let value = Tensor::new(&[n, cout, h * stride, w * stride], out)?;
        self.record(OP, value, &[input, weight], Box::new(DeconvOp { geom }))
    }

    /// Max pooling; gradient flows to the first maximum in row-major order.
    pub fn max_pool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        const OP: &str = "max_pool2d";
        let (n, c, h, w) = self.value(input).dims4(OP)?;
        if k == 0 || stride == 0 {
            return Err(Error::invalid(OP, "window and stride must be >= 1"));
        }
        if k > h || k > w {
            return Err(Error::shape(OP, format!("window {k} exceeds input {h}x{w}")));
        }
        if !(h - k).is_multiple_of(stride) || !(w - k).is_multiple_of(stride) {
            return Err(Error::shape(OP, format!("input {h}x{w} not tiled by window {k} stride {stride}")));
        }
        let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        self.record(OP, value, &[input], Box::new(MaxPoolOp { argmax }))
    }

    /// `x W + b` for `x: [N, D]`, `W: [D, M]`, `b: [M]`.
    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "fully_connected";
        let (xs, ws, bs) = (self.value(input).shape(), self.value(weight).shape(), self.value(bias).shape());
        let (n, d, m) = match (xs, ws, bs) {
            ([n, d], [d2, m], [m2]) if d == d2 && m == m2 => (*n, *d, *m),
            _ => return Err(Error::shape(OP, format!("{xs:?} x {ws:?} + {bs:?}"))),
        };
        let (x, w, b) = (self.value(input).data(), self.value(weight).data(), self.value(bias).data());
        let mut out = Vec::with_capacity(n * m);
        for r in 0..n {
            let mut row = b.to_vec();
            for k in 0..d {
                let xv = x[r * d + k];
                if xv == 0.0 {
                    continue;
                }
                for (o, wv) in row.iter_mut().zip(&w[k * m..][..m]) {
                    *o += xv * wv;
                }
            }
            out.extend(row);
        }
        let value = Tensor::new(&[n, m], out)?;
        self.record(OP, value, &[input, weight, bias], Box::new(LinearOp { n, d, m }))
    }

    /// Per-channel batch normalization. In train mode the batch statistics
    /// are returned so the caller can fold them into its running stats; in
    /// eval mode `running` must be present.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
        mode: Mode,
        running: Option<&RunningStats>,
    ) -> Result<(Var, Option<RunningStats>)> {
        const OP: &str = "batch_norm";
        let (n, c, h, w) = self.value(input).dims4(OP)?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(OP, format!("gamma/beta must have shape [{c}]")));
        }
        let plane = h * w;
        let count = n * plane;
        if count == 0 {
            return Err(Error::invalid(OP, "N*H*W must be >= 1"));
        }
        let x = self.value(input).data();
        let (mean, var, batch_stats) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for b in 0..n {
                    for ch in 0..c {
                        mean[ch] += x[(b * c + ch) * plane..][..plane].iter().map(|&v| v as f64).sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for b in 0..n {
                    for ch in 0..c {
                        var[ch] += x[(b * c + ch) * plane..][..plane]
                            .iter()
                            .map(|&v| (v as f64 - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
                let biased: Vec<f32> = var.iter().map(|v| (v / count as f64) as f32).collect();
                let unbiased_scale = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
                let stats = RunningStats {
                    mean: mean.iter().map(|&m| m as f32).collect(),
                    var: biased.iter().map(|&v| (v as f64 * unbiased_scale) as f32).collect(),
                };
                (mean.iter().map(|&m| m as f32).collect::<Vec<_>>(), biased, Some(stats))
            }
            Mode::Eval => {
                let r = running.ok_or(Error::MissingRunningStats)?;
                (r.mean.clone(), r.var.clone(), None)
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0f32; x.len()];
        let mut out = vec![0.0f32; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let op = BatchNormOp { xhat, inv_std, train: mode == Mode::Train, dims: (n, c, plane) };
        let v = self.record(OP, value, &[input, gamma, beta], Box::new(op))?;
        Ok((v, batch_stats))
    }

    /// Softmax across the channel axis at every spatial location.
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        const OP: &str = "softmax_channels";
        let value = softmax_channels(self.value(input))?;
        let (n, c, h, w) = value.dims4(OP)?;
        self.record(OP, value, &[input], Box::new(SoftmaxOp { dims: (n, c, h * w) }))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let value = Tensor::new(x.shape(), x.data().iter().map(|v| v.max(0.0)).collect())?;
        self.record("relu", value, &[input], Box::new(ReluOp))
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    /// Eval mode is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f32, mode: Mode, rng: &mut R) -> Result<Var> {
        const OP: &str = "dropout";
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(OP, format!("rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(input);
        }
        let keep = 1.0 / (1.0 - rate);
        let x = self.value(input);
        let mask: Vec<f32> = (0..x.len()).map(|_| if rng.random::<f32>() < rate { 0.0 } else { keep }).collect();
        let value = Tensor::new(x.shape(), x.data().iter().zip(&mask).map(|(a, m)| a * m).collect())?;
        self.record(OP, value, &[input], Box::new(ScaleMaskOp { mask }))
    }

    /// Mean absolute error over all elements.
    pub fn l1_loss(&mut self, output: Var, target: Var) -> Result<Var> {
        const OP: &str = "l1_loss";
        let (a, b) = (self.value(output), self.value(target));
        if a.shape() != b.shape() {
            return Err(Error::shape(OP, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum();
        let value = Tensor::scalar((sum / a.len() as f64) as f32);
        self.record(OP, value, &[output, target], Box::new(L1Op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let value = Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect())?;
        self.record("add", value, &[a, b], Box::new(AddOp))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let value = Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect())?;
        self.record("mul", value, &[a, b], Box::new(MulOp))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        self.record("sum", Tensor::scalar(total as f32), &[a], Box::new(SumOp))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.record("reshape", value, &[a], Box::new(ReshapeOp))
    }
}

/// Numerically stabilized channel softmax on a plain tensor.
pub fn softmax_channels(input: &Tensor) -> Result<Tensor> {
    const OP: &str = "softmax_channels";
    let (n, c, h, w) = input.dims4(OP)?;
    if c == 0 {
        return Err(Error::invalid(OP, "need at least one channel"));
    }
    if !input.is_finite() {
        return Err(Error::NonFinite { op: OP });
    }
    let plane = h * w;
    let x = input.data();
    let mut out = vec![0.0f32; x.len()];
    let mut max = vec![0.0f32; plane];
    let mut denom = vec![0.0f32; plane];
    for b in 0..n {
        let base = b * c * plane;
        max.copy_from_slice(&x[base..base + plane]);
        for ch in 1..c {
            for (m, v) in max.iter_mut().zip(&x[base + ch * plane..][..plane]) {
                *m = m.max(*v);
            }
        }
        denom.fill(0.0);
        for ch in 0..c {
            let off = base + ch * plane;
            for p in 0..plane {
                let e = (x[off + p] - max[p]).exp();
                out[off + p] = e;
                denom[p] += e;
            }
        }
        for ch in 0..c {
            let off = base + ch * plane;
            for p in 0..plane {
                out[off + p] /= denom[p];
            }
        }
    }
    Tensor::new(input.shape(), out)
}
