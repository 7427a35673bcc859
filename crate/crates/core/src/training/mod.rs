//! Minibatch SGD on the mean absolute pixel error of the predicted right
//! view, with a step learning-rate schedule and optional momentum.

mod checkpoint;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, MAGIC, VELOCITY_PREFIX, VERSION};

use crate::data::{derive_seed, preprocess, StereoPair};
use crate::error::{Error, Result};
use crate::eval::mae;
use crate::kv::KvConfig;
use crate::network::Network;
use crate::raster::Image;
use crate::tensorcore::{Graph, Mode, Tensor};

// stream tags for derive_seed
const STREAM_EPOCH: u64 = 1;
const STREAM_CROP: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_iters: u64,
    pub base_lr: f32,
    pub lr_step: u64,
    pub lr_factor: f32,
    pub momentum: f32,
    /// Must stay 0; weight decay is not part of the objective.
    pub weight_decay: f32,
    pub dropout: f32,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// `(width, height)`; when set, every sample is resized and then
    /// randomly cropped to `crop_to`.
    pub resize_to: Option<(usize, usize)>,
    pub crop_to: Option<(usize, usize)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            total_iters: 100_000,
            base_lr: 0.002,
            lr_step: 20_000,
            lr_factor: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            dropout: 0.5,
            seed: 0,
            checkpoint_every: 1000,
            resize_to: None,
            crop_to: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if self.lr_step == 0 {
            return bad("lr_step must be positive");
        }
        if !(0.0..=1.0).contains(&self.lr_factor) {
            return bad("lr_factor must be in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.weight_decay != 0.0 {
            return bad("weight_decay must be 0");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive");
        }
        if self.resize_to.is_some() != self.crop_to.is_some() {
            return bad("resize_to and crop_to must be given together");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("batch_size", self.batch_size);
        kv.set("iters", self.total_iters);
        kv.set("base_lr", self.base_lr);
        kv.set("lr_step", self.lr_step);
        kv.set("lr_factor", self.lr_factor);
        kv.set("momentum", self.momentum);
        kv.set("weight_decay", self.weight_decay);
        kv.set("dropout", self.dropout);
        kv.set("seed", self.seed);
        kv.set("checkpoint_every", self.checkpoint_every);
        if let (Some((rw, rh)), Some((cw, ch))) = (self.resize_to, self.crop_to) {
            kv.set("resize_to", format!("{rw}x{rh}"));
            kv.set("crop_to", format!("{cw}x{ch}"));
        }
        kv
    }

    /// Reads the training keys of `kv`, falling back to `base`.
    pub fn from_kv(kv: &KvConfig, base: &TrainConfig) -> Result<Self> {
        let c = TrainConfig {
            batch_size: kv.get_parsed("batch_size")?.unwrap_or(base.batch_size),
            total_iters: kv.get_parsed("iters")?.unwrap_or(base.total_iters),
            base_lr: kv.get_parsed("base_lr")?.unwrap_or(base.base_lr),
            lr_step: kv.get_parsed("lr_step")?.unwrap_or(base.lr_step),
            lr_factor: kv.get_parsed("lr_factor")?.unwrap_or(base.lr_factor),
            momentum: kv.get_parsed("momentum")?.unwrap_or(base.momentum),
            weight_decay: kv.get_parsed("weight_decay")?.unwrap_or(base.weight_decay),
            dropout: kv.get_parsed("dropout")?.unwrap_or(base.dropout),
            seed: kv.get_parsed("seed")?.unwrap_or(base.seed),
            checkpoint_every: kv.get_parsed("checkpoint_every")?.unwrap_or(base.checkpoint_every),
            resize_to: kv.get_dims("resize_to")?.or(base.resize_to),
            crop_to: kv.get_dims("crop_to")?.or(base.crop_to),
        };
        c.validate()?;
        Ok(c)
    }
}

/// `base_lr * lr_factor^floor(iter / lr_step)`, with `iter` counted from 0.
pub fn lr_schedule(iter: u64, cfg: &TrainConfig) -> f32 {
    let k = (iter / cfg.lr_step).min(i32::MAX as u64) as i32;
    (cfg.base_lr as f64 * (cfg.lr_factor as f64).powi(k)) as f32
}

/// One SGD update: `v = momentum * v + g; w -= lr * v`. With zero momentum
/// this is plain `w -= lr * g`. Nothing is modified if any gradient is
/// non-finite.
pub fn sgd_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    velocity: &mut [Tensor],
    lr: f32,
    momentum: f32,
) -> Result<()> {
    const OP: &str = "sgd_step";
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape(
            OP,
            format!("{} params, {} grads, {} velocities", params.len(), grads.len(), velocity.len()),
        ));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(velocity.iter()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape(
                OP,
                format!("param {:?}, grad {:?}, velocity {:?}", p.shape(), g.shape(), v.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite { op: OP });
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi + gi;
            *w -= lr * *vi;
        }
    }
    Ok(())
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    /// Number of completed iterations.
    pub iter: u64,
    pub lr: f32,
    pub train_loss: f32,
    pub val_mae: Option<f32>,
}

pub const LOG_HEADER: &str = "iter,lr,train_loss,val_mae";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        let val = r.val_mae.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{}", r.iter, r.lr, r.train_loss, val);
    }
    s
}

pub fn write_log_csv(rows: &[LogRow], path: &Path) -> Result<()> {
    std::fs::write(path, log_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Training state: network, optimizer velocities and iteration counter.
pub struct Trainer {
    net: Network,
    cfg: TrainConfig,
    velocity: Vec<Tensor>,
    iteration: u64,
    perm: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    pub fn new(net: Network, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let velocity = net.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Ok(Trainer { net, cfg, velocity, iteration: 0, perm: None })
    }

    /// Restores network, running statistics, velocities, iteration and seed.
    pub fn resume(ckpt: &Checkpoint, mut cfg: TrainConfig) -> Result<Self> {
        let net = ckpt.to_network()?;
        cfg.seed = ckpt.seed;
        let mut t = Trainer::new(net, cfg)?;
        for (name, v) in &ckpt.entries {
            if let Some(pname) = name.strip_prefix(VELOCITY_PREFIX) {
                let i = t
                    .net
                    .param_names()
                    .iter()
                    .position(|n| n == pname)
                    .ok_or_else(|| Error::UnknownParameters(vec![name.clone()]))?;
                if v.shape() != t.velocity[i].shape() {
                    return Err(Error::shape(
                        "resume",
                        format!("{name}: {:?} vs {:?}", v.shape(), t.velocity[i].shape()),
                    ));
                }
                t.velocity[i] = v.clone();
            }
        }
        t.iteration = ckpt.iteration;
        Ok(t)
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut entries: Vec<(String, Tensor)> =
            self.net.param_names().iter().cloned().zip(self.net.params().iter().cloned()).collect();
        entries.extend(self.net.bn_tensors());
        if self.cfg.momentum != 0.0 {
            for (name, v) in self.net.param_names().iter().zip(&self.velocity) {
                entries.push((format!("{VELOCITY_PREFIX}{name}"), v.clone()));
            }
        }
        Checkpoint {
            entries,
            iteration: self.iteration,
            seed: self.cfg.seed,
            config: self.net.config().to_kv().to_text(),
        }
    }

    /// Dataset indices of the next minibatch. Each epoch visits a fresh
    /// permutation derived from `(seed, epoch)`.
    fn batch_indices(&mut self, n: usize) -> Vec<(u64, usize)> {
        let b = self.cfg.batch_size as u64;
        let n64 = n as u64;
        (0..b)
            .map(|k| {
                let s = self.iteration * b + k;
                let epoch = s / n64;
                if self.perm.as_ref().map(|(e, _)| *e) != Some(epoch) {
                    let mut p: Vec<usize> = (0..n).collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[STREAM_EPOCH, epoch]));
                    p.shuffle(&mut rng);
                    self.perm = Some((epoch, p));
                }
                (epoch, self.perm.as_ref().unwrap().1[(s % n64) as usize])
            })
            .collect()
    }

    fn sample(&self, pair: &StereoPair, epoch: u64, idx: usize) -> Result<StereoPair> {
        match (self.cfg.resize_to, self.cfg.crop_to) {
            (Some(r), Some(c)) => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[STREAM_CROP, epoch, idx as u64]));
                preprocess(pair, r, c, &mut rng)
            }
            _ => Ok(pair.clone()),
        }
    }

    /// Runs one iteration and returns its training loss.
    pub fn step(&mut self, data: &[StereoPair]) -> Result<LogRow> {
        if data.is_empty() {
            return Err(Error::EmptyInput("training set"));
        }
        let picks = self.batch_indices(data.len());
        let samples = picks.iter().map(|&(e, i)| self.sample(&data[i], e, i)).collect::<Result<Vec<_>>>()?;
        let lefts: Vec<&Image> = samples.iter().map(|s| &s.left).collect();
        let rights: Vec<&Image> = samples.iter().map(|s| &s.right).collect();

        let mut g = Graph::new();
        let left = g.input(Image::batch(&lefts)?);
        let target = g.input(Image::batch(&rights)?);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[STREAM_DROPOUT, self.iteration]));
        let pass = self.net.forward(&mut g, left, Mode::Train, self.cfg.dropout, true, &mut rng)?;
        let loss = g.l1_loss(pass.right, target)?;
        let loss_value = g.value(loss).item().unwrap_or(f32::NAN);
        if !loss_value.is_finite() {
            return Err(Error::NonFinite { op: "train loss" });
        }
        g.backward(loss)?;
        let grads: Vec<Tensor> = pass
            .params
            .iter()
            .zip(self.net.params())
            .map(|(&v, p)| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        let lr = lr_schedule(self.iteration, &self.cfg);
        sgd_step(self.net.params_mut(), &grads, &mut self.velocity, lr, self.cfg.momentum)?;
        self.net.commit_bn(pass.bn_batch);
        self.iteration += 1;
        Ok(LogRow { iter: self.iteration, lr, train_loss: loss_value, val_mae: None })
    }

    /// Mean per-frame MAE (8-bit units) of the predicted right views in eval
    /// mode. Frames whose size differs from the network input are resized.
    pub fn validate(&self, val: &[StereoPair]) -> Result<f32> {
        validation_mae(&self.net, val, self.cfg.batch_size)
    }

    /// Trains until `total_iters` iterations are complete. `on_checkpoint` is
    /// called every `checkpoint_every` iterations and at the end; if an
    /// iteration fails it is called with the last good state before the
    /// error is returned.
    pub fn run(
        &mut self,
        data: &[StereoPair],
        val: Option<&[StereoPair]>,
        mut on_checkpoint: impl FnMut(&Checkpoint, &[LogRow]) -> Result<()>,
    ) -> Result<Vec<LogRow>> {
        let mut rows = Vec::new();
        while self.iteration < self.cfg.total_iters {
            let mut row = match self.step(data) {
                Ok(r) => r,
                Err(e) => {
                    on_checkpoint(&self.checkpoint(), &rows)?;
                    return Err(e);
                }
            };
            let at_ckpt = row.iter % self.cfg.checkpoint_every == 0 || row.iter == self.cfg.total_iters;
            if at_ckpt {
                if let Some(v) = val.filter(|v| !v.is_empty()) {
                    row.val_mae = Some(self.validate(v)?);
                }
            }
            rows.push(row);
            if at_ckpt {
                on_checkpoint(&self.checkpoint(), &rows)?;
            }
        }
        Ok(rows)
    }
}

/// Trains a network from scratch and returns the final checkpoint and log.
pub fn train(
    net: Network,
    data: &[StereoPair],
    val: Option<&[StereoPair]>,
    cfg: TrainConfig,
) -> Result<(Trainer, Vec<LogRow>)> {
    let mut t = Trainer::new(net, cfg)?;
    let rows = t.run(data, val, |_, _| Ok(()))?;
    Ok((t, rows))
}

pub fn validation_mae(net: &Network, val: &[StereoPair], batch: usize) -> Result<f32> {
    if val.is_empty() {
        return Err(Error::EmptyInput("validation set"));
    }
    let (w, h) = (net.config().width, net.config().height);
    let fit = |img: &Image| if img.dims() == (w, h) { img.clone() } else { img.resize_bilinear(w, h) };
    let mut total = 0.0f64;
    for chunk in val.chunks(batch.max(1)) {
        let lefts: Vec<Image> = chunk.iter().map(|p| fit(&p.left)).collect();
        let refs: Vec<&Image> = lefts.iter().collect();
        let pred = net.predict_right(&Image::batch(&refs)?, Mode::Eval)?;
        for (i, p) in chunk.iter().enumerate() {
            let out = Image::from_tensor(&pred.right, i)?;
            total += mae(&out, &fit(&p.right))? as f64;
        }
    }
    Ok((total / val.len() as f64) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_steps_down() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 0.002);
        assert_eq!(lr_schedule(19_999, &cfg), 0.002);
        assert!((lr_schedule(20_000, &cfg) - 0.0002).abs() < 1e-10);
        assert!((lr_schedule(45_000, &cfg) - 0.00002).abs() < 1e-11);
    }

    #[test]
    fn sgd_plain_and_momentum() {
        let mut p = vec![Tensor::full(&[2], 1.0)];
        let g = vec![Tensor::new(&[2], vec![0.5, -1.0]).unwrap()];
        let mut v = vec![Tensor::zeros(&[2])];
        sgd_step(&mut p, &g, &mut v, 0.1, 0.0).unwrap();
        assert_eq!(p[0].data(), &[0.95, 1.1]);

        let mut p = vec![Tensor::zeros(&[1])];
        let g = vec![Tensor::full(&[1], 1.0)];
        let mut v = vec![Tensor::zeros(&[1])];
        sgd_step(&mut p, &g, &mut v, 0.1, 0.9).unwrap();
        sgd_step(&mut p, &g, &mut v, 0.1, 0.9).unwrap();
        assert!((p[0].data()[0] + 0.29).abs() < 1e-6);
    }

    #[test]
    fn sgd_rejects_nan_without_touching_params() {
        let mut p = vec![Tensor::full(&[2], 1.0)];
        let g = vec![Tensor::new(&[2], vec![0.5, f32::NAN]).unwrap()];
        let mut v = vec![Tensor::zeros(&[2])];
        assert!(matches!(sgd_step(&mut p, &g, &mut v, 0.1, 0.0), Err(Error::NonFinite { .. })));
        assert_eq!(p[0].data(), &[1.0, 1.0]);
    }

    #[test]
    fn config_validation() {
        let c = TrainConfig { weight_decay: 0.01, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        let c = TrainConfig { resize_to: Some((64, 32)), ..TrainConfig::default() };
        assert!(c.validate().is_err());
        let kv = TrainConfig::default().to_kv();
        assert_eq!(TrainConfig::from_kv(&kv, &TrainConfig::default()).unwrap(), TrainConfig::default());
    }

    #[test]
    fn csv_leaves_missing_validation_empty() {
        let rows = vec![
            LogRow { iter: 1, lr: 0.5, train_loss: 0.25, val_mae: None },
            LogRow { iter: 2, lr: 0.5, train_loss: 0.125, val_mae: Some(3.0) },
        ];
        assert_eq!(log_csv(&rows), "iter,lr,train_loss,val_mae\n1,0.5,0.25,\n2,0.5,0.125,3\n");
    }
}
