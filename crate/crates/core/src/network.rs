//! Configurable view-synthesis network: a conv/pool trunk, one side branch
//! per pooling stage (batch norm, 3x3 conv, bilinear-initialized deconv up
//! to input resolution), a fully connected branch reshaped to a coarse
//! disparity map and upsampled the same way, a sum of all branches, one 3x3
//! conv, and a softmax + selection head (or a plain RGB regression head).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::parse_range;
use crate::error::{Error, Result};
use crate::kv::KvConfig;
use crate::raster::resize_plane;
use crate::selection::{render_shifted, DisparityRange, DisparityVolume};
use crate::tensorcore::{Graph, Mode, RunningStats, Tensor, Var, BN_EPS, BN_MOMENTUM};

/// Probability-map upsampling used by [`upscale_full_res`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Upsample {
    Bilinear,
    Nearest,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Input width and height in pixels.
    pub width: usize,
    pub height: usize,
    /// `(conv_count, channels)` per pooling stage.
    pub stages: Vec<(usize, usize)>,
    pub fc_hidden: usize,
    /// `(width, height)` of the map the FC branch is reshaped to.
    pub fc_spatial: (usize, usize),
    pub range: DisparityRange,
    pub side_branches: bool,
    pub use_selection: bool,
    pub init_std: f32,
    pub seed: u64,
}

impl NetworkConfig {
    /// Full-size layout: 384x160 input, VGG16-shaped trunk, 4096-unit FC
    /// layers reshaped to 33 x 12 x 5.
    pub fn paper_preset() -> Self {
        NetworkConfig {
            width: 384,
            height: 160,
            stages: vec![(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)],
            fc_hidden: 4096,
            fc_spatial: (12, 5),
            range: DisparityRange::default(),
            side_branches: true,
            use_selection: true,
            init_std: 0.01,
            seed: 0,
        }
    }

    /// Desk-scale layout used by the tests and the toy benchmark.
    pub fn toy(range: DisparityRange) -> Self {
        NetworkConfig {
            width: 64,
            height: 32,
            stages: vec![(1, 8), (1, 16)],
            fc_hidden: 64,
            fc_spatial: (16, 8),
            range,
            side_branches: true,
            use_selection: true,
            init_std: 0.01,
            seed: 0,
        }
    }

    /// Spatial size `(w, h)` after all pooling stages.
    pub fn top_dims(&self) -> (usize, usize) {
        let f = 1 << self.stages.len();
        (self.width / f, self.height / f)
    }

    pub fn top_channels(&self) -> usize {
        self.stages.last().map_or(3, |s| s.1)
    }

    pub fn fc_upsample(&self) -> usize {
        self.width / self.fc_spatial.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |why: String| Err(Error::invalid("network config", why));
        if self.stages.is_empty() || self.stages.iter().any(|&(n, c)| n == 0 || c == 0) {
            return bad("need at least one stage with nonzero convs and channels".into());
        }
        let f = 1usize << self.stages.len();
        if !self.width.is_multiple_of(f) || !self.height.is_multiple_of(f) || self.width < f || self.height < f {
            return bad(format!("{}x{} not divisible by 2^{}", self.width, self.height, self.stages.len()));
        }
        let (fw, fh) = self.fc_spatial;
        if fw == 0
            || fh == 0
            || !self.width.is_multiple_of(fw)
            || !self.height.is_multiple_of(fh)
            || self.width / fw != self.height / fh
        {
            return bad(format!("fc map {fw}x{fh} does not scale uniformly to {}x{}", self.width, self.height));
        }
        if self.fc_hidden == 0 {
            return bad("fc_hidden must be positive".into());
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return bad("init_std must be positive".into());
        }
        self.range.check_width(self.width)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("input", format!("{}x{}", self.width, self.height));
        kv.set("stages", self.stages.iter().map(|(n, c)| format!("{n}x{c}")).collect::<Vec<_>>().join(","));
        kv.set("fc_hidden", self.fc_hidden);
        kv.set("fc_spatial", format!("{}x{}", self.fc_spatial.0, self.fc_spatial.1));
        kv.set("range", format!("{}..{}", self.range.d_min(), self.range.d_max()));
        kv.set("empty_channel", self.range.has_empty());
        kv.set("side_branches", self.side_branches);
        kv.set("use_selection", self.use_selection);
        kv.set("init_std", self.init_std);
        kv.set("net_seed", self.seed);
        kv
    }

    /// Reads network keys, falling back to `base` for missing ones.
    pub fn from_kv(kv: &KvConfig, base: &NetworkConfig) -> Result<Self> {
        let mut cfg = base.clone();
        if let Some((w, h)) = kv.get_dims("input")? {
            cfg.width = w;
            cfg.height = h;
        }
        if let Some(s) = kv.get("stages") {
            cfg.stages = s
                .split(',')
                .map(|p| {
                    crate::kv::parse_dims(p.trim())
                        .ok_or_else(|| Error::Config(format!("bad stage '{p}', expected CONVSxCHANNELS")))
                })
                .collect::<Result<_>>()?;
        }
        if let Some(v) = kv.get_parsed("fc_hidden")? {
            cfg.fc_hidden = v;
        }
        if let Some(v) = kv.get_dims("fc_spatial")? {
            cfg.fc_spatial = v;
        }
        let has_empty = kv.get_parsed("empty_channel")?.unwrap_or(cfg.range.has_empty());
        if let Some(r) = kv.get("range") {
            cfg.range = parse_range(r)?;
        }
        cfg.range = DisparityRange::new(cfg.range.d_min(), cfg.range.d_max(), has_empty)?;
        if let Some(v) = kv.get_parsed("side_branches")? {
            cfg.side_branches = v;
        }
        if let Some(v) = kv.get_parsed("use_selection")? {
            cfg.use_selection = v;
        }
        if let Some(v) = kv.get_parsed("init_std")? {
            cfg.init_std = v;
        }
        if let Some(v) = kv.get_parsed("net_seed")? {
            cfg.seed = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// 1-D profile of the bilinear upsampling kernel for factor `s`:
/// `1 - |i / s - c|` with `c = (2s - 1 - (s mod 2)) / (2s)`.
fn bilinear_profile(s: usize) -> Vec<f32> {
    let sf = s as f64;
    let c = (2.0 * sf - 1.0 - (s % 2) as f64) / (2.0 * sf);
    (0..2 * s).map(|i| (1.0 - (i as f64 / sf - c).abs()) as f32).collect()
}

/// `2S x 2S` kernel whose transposed convolution with stride `S` and padding
/// `S / 2` reproduces bilinear upsampling.
pub fn bilinear_deconv_kernel(s: usize) -> Result<Tensor> {
    if s < 1 {
        return Err(Error::invalid("bilinear_deconv_kernel", "factor must be >= 1"));
    }
    let p = bilinear_profile(s);
    let k = 2 * s;
    Ok(Tensor::from_fn(&[k, k], |idx| p[idx / k] * p[idx % k]))
}

/// Deconv weight `[C, C, 2S, 2S]` applying the bilinear kernel channel-wise.
pub fn bilinear_deconv_weight(channels: usize, s: usize) -> Result<Tensor> {
    let kernel = bilinear_deconv_kernel(s)?;
    let kk = kernel.len();
    let mut w = Tensor::zeros(&[channels, channels, 2 * s, 2 * s]);
    for c in 0..channels {
        w.data_mut()[(c * channels + c) * kk..][..kk].copy_from_slice(kernel.data());
    }
    Ok(w)
}

#[derive(Clone, Debug)]
struct BnSlot {
    name: String,
    stats: Option<RunningStats>,
}

/// Parameters and batch-norm state of a built network.
#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    bn: Vec<BnSlot>,
}

/// Handles produced by [`Network::forward`].
pub struct ForwardPass {
    pub right: Var,
    /// Softmax output over the disparity channels (`None` for the
    /// regression head).
    pub probs: Option<Var>,
    /// Graph leaves for every parameter, in [`Network::param_names`] order.
    pub params: Vec<Var>,
    /// Batch statistics per batch-norm layer (train mode only).
    pub bn_batch: Vec<(usize, RunningStats)>,
}

/// Result of [`Network::predict_right`].
pub struct Prediction {
    pub right: Tensor,
    pub volume: Option<DisparityVolume>,
}

impl Network {
    pub fn build(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut net = Network { config: config.clone(), names: Vec::new(), params: Vec::new(), bn: Vec::new() };
        let c = config.range.channel_count();
        let std = config.init_std;

        let mut cin = 3;
        for (s, &(convs, ch)) in config.stages.iter().enumerate() {
            for i in 0..convs {
                // the trunk stands in for pretrained features: He-scaled init
                let he = (2.0 / (cin * 9) as f32).sqrt();
                net.push(format!("trunk.{s}.{i}.weight"), normal(&[ch, cin, 3, 3], he, &mut rng));
                net.push(format!("trunk.{s}.{i}.bias"), Tensor::zeros(&[ch]));
                cin = ch;
            }
        }
        if config.side_branches {
            for (s, &(_, ch)) in config.stages.iter().enumerate() {
                net.push(format!("side.{s}.bn.gamma"), Tensor::full(&[ch], 1.0));
                net.push(format!("side.{s}.bn.beta"), Tensor::zeros(&[ch]));
                net.bn.push(BnSlot { name: format!("side.{s}.bn"), stats: None });
                net.push(format!("side.{s}.conv.weight"), normal(&[c, ch, 3, 3], std, &mut rng));
                net.push(format!("side.{s}.conv.bias"), Tensor::zeros(&[c]));
                net.push(format!("side.{s}.deconv.weight"), bilinear_deconv_weight(c, 1 << (s + 1))?);
            }
        }
        let (tw, th) = config.top_dims();
        let flat = config.top_channels() * tw * th;
        let (fw, fh) = config.fc_spatial;
        let dims = [(flat, config.fc_hidden), (config.fc_hidden, config.fc_hidden), (config.fc_hidden, c * fw * fh)];
        for (i, (d, m)) in dims.into_iter().enumerate() {
            net.push(format!("fc.{i}.weight"), normal(&[d, m], std, &mut rng));
            net.push(format!("fc.{i}.bias"), Tensor::zeros(&[m]));
        }
        net.push("fc.deconv.weight".into(), bilinear_deconv_weight(c, config.fc_upsample())?);
        let head_out = if config.use_selection { c } else { 3 };
        net.push("head.weight".into(), normal(&[head_out, c, 3, 3], std, &mut rng));
        net.push("head.bias".into(), Tensor::zeros(&[head_out]));
        Ok(net)
    }

    fn push(&mut self, name: String, value: Tensor) {
        self.names.push(name);
        self.params.push(value);
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.params[i])
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Folds train-mode batch statistics into the running statistics. The
    /// first batch initializes them directly.
    pub fn commit_bn(&mut self, batch: Vec<(usize, RunningStats)>) {
        for (slot, stats) in batch {
            match &mut self.bn[slot].stats {
                Some(r) => r.blend(&stats, BN_MOMENTUM),
                s @ None => *s = Some(stats),
            }
        }
    }

    /// Running statistics as named tensors (`<bn>.running_mean`, `<bn>.running_var`).
    pub fn bn_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for slot in &self.bn {
            if let Some(s) = &slot.stats {
                out.push((
                    format!("{}.running_mean", slot.name),
                    Tensor::new(&[s.mean.len()], s.mean.clone()).unwrap(),
                ));
                out.push((format!("{}.running_var", slot.name), Tensor::new(&[s.var.len()], s.var.clone()).unwrap()));
            }
        }
        out
    }

    /// Restores a running-statistics entry; returns false for unknown names.
    pub(crate) fn set_bn_tensor(&mut self, name: &str, value: &Tensor) -> bool {
        for slot in &mut self.bn {
            let which = match name.strip_prefix(slot.name.as_str()) {
                Some(".running_mean") => 0,
                Some(".running_var") => 1,
                _ => continue,
            };
            let c = value.len();
            let stats = slot.stats.get_or_insert_with(|| RunningStats { mean: vec![0.0; c], var: vec![1.0; c] });
            if which == 0 {
                stats.mean = value.data().to_vec();
            } else {
                stats.var = value.data().to_vec();
            }
            return true;
        }
        false
    }

    /// Records one forward pass. `left` is `[N, 3, H, W]`. With
    /// `track_grad` the parameters become trainable graph leaves.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        left: Var,
        mode: Mode,
        dropout: f32,
        track_grad: bool,
        rng: &mut R,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        let (n, c3, h, w) = g.value(left).dims4("predict_right")?;
        if c3 != 3 || (w, h) != (cfg.width, cfg.height) {
            return Err(Error::shape(
                "predict_right",
                format!("input {:?}, network expects [N, 3, {}, {}]", g.value(left).shape(), cfg.height, cfg.width),
            ));
        }
        let params: Vec<Var> = self.params.iter().map(|p| g.leaf(p.clone(), track_grad)).collect();
        let mut next = 0usize;
        let mut take = || {
            next += 1;
            params[next - 1]
        };
        let mut bn_batch = Vec::new();

        let mut x = left;
        let mut pooled = Vec::with_capacity(cfg.stages.len());
        for &(convs, _) in &cfg.stages {
            for _ in 0..convs {
                let (wt, b) = (take(), take());
                x = g.conv2d(x, wt, Some(b), 1, 1)?;
                x = g.relu(x)?;
            }
            x = g.max_pool2d(x, 2, 2)?;
            pooled.push(x);
        }

        let mut branches = Vec::new();
        if cfg.side_branches {
            for (s, &feat) in pooled.iter().enumerate() {
                let (gamma, beta) = (take(), take());
                let (y, stats) = g.batch_norm(feat, gamma, beta, BN_EPS, mode, self.bn[s].stats.as_ref())?;
                if let Some(stats) = stats {
                    bn_batch.push((s, stats));
                }
                let (wt, b) = (take(), take());
                let y = g.conv2d(y, wt, Some(b), 1, 1)?;
                let up = take();
                branches.push(g.deconv2d(y, up, 1 << (s + 1), (1 << (s + 1)) / 2)?);
            }
        }

        let top = *pooled.last().expect("at least one stage");
        let flat_len = g.value(top).len() / n;
        let mut f = g.reshape(top, &[n, flat_len])?;
        for i in 0..3 {
            let (wt, b) = (take(), take());
            f = g.fully_connected(f, wt, b)?;
            if i < 2 {
                f = g.relu(f)?;
                f = g.dropout(f, dropout, mode, rng)?;
            }
        }
        let c = cfg.range.channel_count();
        let (fw, fh) = cfg.fc_spatial;
        let f = g.reshape(f, &[n, c, fh, fw])?;
        let up = take();
        let s = cfg.fc_upsample();
        branches.push(g.deconv2d(f, up, s, s / 2)?);

        let mut sum = branches[0];
        for &b in &branches[1..] {
            sum = g.add(sum, b)?;
        }
        let (wt, b) = (take(), take());
        let head = g.conv2d(sum, wt, Some(b), 1, 1)?;
        debug_assert_eq!(next, self.params.len());

        let (right, probs) = if cfg.use_selection {
            let probs = g.softmax_channels(head)?;
            let stack = g.shifted_stack(left, &cfg.range)?;
            (g.selection(stack, probs, &cfg.range)?, Some(probs))
        } else {
            (head, None)
        };
        Ok(ForwardPass { right, probs, params, bn_batch })
    }

    /// Inference without gradient tracking or dropout.
    pub fn predict_right(&self, left: &Tensor, mode: Mode) -> Result<Prediction> {
        let mut g = Graph::new();
        let x = g.input(left.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = self.forward(&mut g, x, mode, 0.0, false, &mut rng)?;
        let volume = pass.probs.map(|p| DisparityVolume::from_softmax(g.value(p).clone(), self.config.range));
        Ok(Prediction { right: g.value(pass.right).clone(), volume })
    }
}

fn normal<R: Rng>(shape: &[usize], std: f32, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Renders a right view at `k` times the volume's resolution: probability
/// maps are upsampled (and renormalized when bilinear), and channel `d` shifts
/// the high-resolution left view by `k * d` pixels.
pub fn upscale_full_res(volume: &DisparityVolume, left_hires: &Tensor, k: usize, upsample: Upsample) -> Result<Tensor> {
    const OP: &str = "upscale_full_res";
    if k < 1 {
        return Err(Error::invalid(OP, "scale factor must be >= 1"));
    }
    let (n, h, w) = volume.dims();
    let (hn, hc, hh, hw) = left_hires.dims4(OP)?;
    if hn != n || hc != 3 || hh != k * h || hw != k * w {
        return Err(Error::shape(
            OP,
            format!("hires {:?} is not {k}x of volume {:?}", left_hires.shape(), volume.probs().shape()),
        ));
    }
    let range = volume.range();
    range.check_width(w)?;
    if k == 1 {
        return render_shifted(left_hires, volume, 1, 0);
    }
    let c = range.channel_count();
    let (plane, hplane) = (h * w, hh * hw);
    let src = volume.probs().data();
    let mut up = vec![0.0f32; n * c * hplane];
    for b in 0..n {
        for ch in 0..c {
            let s = &src[(b * c + ch) * plane..][..plane];
            let d = &mut up[(b * c + ch) * hplane..][..hplane];
            match upsample {
                Upsample::Bilinear => resize_plane(s, w, h, d, hw, hh),
                Upsample::Nearest => {
                    for y in 0..hh {
                        for x in 0..hw {
                            d[y * hw + x] = s[(y / k) * w + x / k];
                        }
                    }
                }
            }
        }
        if upsample == Upsample::Bilinear {
            for p in 0..hplane {
                let total: f32 = (0..c).map(|ch| up[(b * c + ch) * hplane + p]).sum();
                if total > 0.0 && total != 1.0 {
                    for ch in 0..c {
                        up[(b * c + ch) * hplane + p] /= total;
                    }
                }
            }
        }
    }
    let hires_volume = DisparityVolume::from_softmax(Tensor::new(&[n, c, hh, hw], up)?, range);
    render_shifted(left_hires, &hires_volume, k as i32, 0)
}
