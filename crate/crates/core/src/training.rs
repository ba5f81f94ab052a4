//! Mini-batch training with SGD + Nesterov momentum, a step learning-rate
//! schedule, L2 weight decay, dropout and rotation augmentation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Mode;
use crate::checkpoint;
use crate::data::Sample;
use crate::decoder::Decoded;
use crate::error::{Error, Result};
use crate::image::{GrayImage, ImageBatch};
use crate::metrics::{corpus_eval, CorpusReport};
use crate::model::Model;
use crate::params::{Gradients, Graph, LayerParams};
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,val_wer,val_exprate";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub momentum: f64,
    pub l2_lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout_rate: f64,
    pub rotation_max_deg: f64,
    pub use_coverage: bool,
    pub seed: u64,
    /// Rescale the global gradient norm down to this value when exceeded.
    pub grad_clip: Option<f64>,
    /// Images per forward pass during validation decoding.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 1e-4,
            lr_drop_epochs: vec![80, 120, 150],
            lr_drop_factor: 0.1,
            momentum: 0.9,
            l2_lambda: 1e-4,
            batch_size: 6,
            epochs: 160,
            dropout_rate: 0.5,
            rotation_max_deg: 10.0,
            use_coverage: true,
            seed: 0,
            grad_clip: None,
            eval_batch_size: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.lr_drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "lr_drop_epochs must be strictly increasing, got {:?}",
                self.lr_drop_epochs
            ));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor < 1.0) {
            return bad(format!("lr_drop_factor {} outside (0, 1)", self.lr_drop_factor));
        }
        if !(self.initial_lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("initial_lr must be ≥ 0 and momentum in [0, 1)".into());
        }
        if !(self.l2_lambda >= 0.0) || !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("l2_lambda must be ≥ 0 and dropout_rate in [0, 1)".into());
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.rotation_max_deg >= 0.0) {
            return bad("rotation_max_deg must be ≥ 0".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip {c} must be positive"));
            }
        }
        Ok(())
    }
}

/// Rate for epoch `epoch` (1-based during training); each drop takes effect
/// only after its epoch has completed.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let drops = cfg.lr_drop_epochs.iter().filter(|&&e| e < epoch).count();
    cfg.initial_lr * cfg.lr_drop_factor.powi(drops as i32)
}

/// Momentum buffers keyed by parameter path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub velocity: BTreeMap<String, Tensor>,
}

/// One Nesterov step on every trainable parameter:
/// `g' = g + λθ; v ← μv − lr·g'; θ ← θ + μv − lr·g'`.
///
/// Parameters without a gradient entry are treated as having zero data
/// gradient, so weight decay still applies to them.
pub fn sgd_nesterov_step(
    params: &mut LayerParams,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    l2_lambda: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::dim(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    let names: Vec<String> = params.trainable().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let theta = params.get_mut(&name)?;
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(theta.shape()));
        if v.shape() != theta.shape() {
            return Err(Error::dim(format!("velocity for {name} has the wrong shape")));
        }
        let g = grads.get(&name);
        let (th, vd) = (theta.data_mut(), v.data_mut());
        for i in 0..th.len() {
            let gi = g.map_or(0.0, |g| g.data()[i]) + l2_lambda * th[i];
            vd[i] = momentum * vd[i] - lr * gi;
            th[i] += momentum * vd[i] - lr * gi;
        }
    }
    Ok(())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().for_each(|g| g.scale(s));
    }
    norm
}

/// Rotation about the image center by `deg` degrees, bilinear sampling, background fill.
pub fn rotate(image: &GrayImage, deg: f64) -> GrayImage {
    if deg == 0.0 {
        return image.clone();
    }
    let (w, h) = (image.width(), image.height());
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (s, c) = deg.to_radians().sin_cos();
    let sample = |x: isize, y: isize| {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            image.get(x as usize, y as usize)
        }
    };
    let mut out = GrayImage::blank(w, h);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            // inverse mapping: source = R(−θ)·(p − c) + c
            let sx = c * dx + s * dy + cx;
            let sy = -s * dx + c * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = (1.0 - fx) * (1.0 - fy) * sample(x0, y0)
                + fx * (1.0 - fy) * sample(x0 + 1, y0)
                + (1.0 - fx) * fy * sample(x0, y0 + 1)
                + fx * fy * sample(x0 + 1, y0 + 1);
            out.set(x, y, v);
        }
    }
    out
}

/// Rotation by a uniform angle in `[−max_deg, max_deg]`.
pub fn augment_rotate<R: Rng + ?Sized>(image: &GrayImage, max_deg: f64, rng: &mut R) -> GrayImage {
    if max_deg <= 0.0 {
        return image.clone();
    }
    rotate(image, rng.random_range(-max_deg..=max_deg))
}

/// Greedy-decodes `samples` in order, `batch_size` images at a time.
pub fn decode_samples(model: &Model, samples: &[&Sample], batch_size: usize) -> Result<Vec<Decoded>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let imgs: Vec<&GrayImage> = chunk.iter().map(|s| &s.image).collect();
        out.extend(model.recognize(&imgs)?);
    }
    Ok(out)
}

/// Scores greedy predictions against labels with `<eol>` stripped on both sides.
pub fn evaluate(model: &Model, samples: &[&Sample], batch_size: usize) -> Result<CorpusReport> {
    let decoded = decode_samples(model, samples, batch_size)?;
    let preds: Vec<&[usize]> = decoded.iter().map(Decoded::body).collect();
    let labels: Vec<&[usize]> = samples
        .iter()
        .map(|s| s.label.strip_suffix(&[crate::vocab::EOL]).unwrap_or(&s.label))
        .collect();
    corpus_eval(&preds, &labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_wer: f64,
    pub val_exprate: f64,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:.6},{:.6},{:.6}",
            self.epoch, self.lr, self.train_loss, self.val_wer, self.val_exprate
        )
    }
}

pub fn metrics_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for e in log {
        let _ = writeln!(s, "{}", e.csv_row());
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// Parameters from the epoch with the best validation ExpRate (ties go to
    /// the lower WER, then the earlier epoch); the starting parameters when no
    /// epoch ran.
    pub best: LayerParams,
    pub best_epoch: usize,
}

/// Where and how often [`Trainer`] reports.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Writes `metrics.csv`, `best.ckpt` and `last.ckpt` here after every epoch.
    pub out_dir: Option<&'a Path>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochLog)>,
}

/// Mean training loss of one mini-batch step; updates parameters in place.
pub fn train_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    batch: &[&Sample],
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let images: Vec<GrayImage> = batch
        .iter()
        .map(|s| augment_rotate(&s.image, cfg.rotation_max_deg, rng))
        .collect();
    let refs: Vec<&GrayImage> = images.iter().collect();
    let ib = ImageBatch::from_images(&refs)?;
    let labels: Vec<Vec<usize>> = batch.iter().map(|s| s.label.clone()).collect();
    let step_seed = rng.random::<u64>();
    let (mut grads, loss, bn) = {
        let mut g = Graph::new(&model.params, Mode::Train, true, step_seed);
        let loss = model.teacher_forced_loss(&mut g, &ib, &labels, cfg.dropout_rate)?;
        g.backward(loss)?;
        (g.gradients(), g.value(loss).item(), g.take_bn_updates())
    };
    if !loss.is_finite() {
        return Err(Error::Argument(format!("non-finite training loss {loss}")));
    }
    if let Some(c) = cfg.grad_clip {
        clip_grad_norm(&mut grads, c);
    }
    sgd_nesterov_step(&mut model.params, &grads, opt, lr, cfg.momentum, cfg.l2_lambda)?;
    model.params.apply_bn_updates(&bn)?;
    Ok(loss)
}

/// Runs `cfg.epochs` epochs of shuffled mini-batches over `train`, validating on `val`.
///
/// `resume` parameters are copied into the model first wherever names match.
pub fn train(
    model: &mut Model,
    train: &[&Sample],
    val: &[&Sample],
    cfg: &TrainConfig,
    resume: Option<&LayerParams>,
    mut hooks: TrainHooks<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Argument("empty training set".into()));
    }
    model.config.use_coverage = cfg.use_coverage;
    if let Some(src) = resume {
        checkpoint::warm_start(&mut model.params, src)?;
    }
    let mut opt = OptimizerState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best = model.params.clone();
    let mut best_epoch = 0;
    let mut best_key = (f64::NEG_INFINITY, f64::INFINITY);
    if let Some(dir) = hooks.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_outputs(dir, &log, &best, &model.params)?;
    }
    for epoch in 1..=cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| train[i]).collect();
            total += train_step(model, &mut opt, &batch, cfg, lr, &mut rng)? * batch.len() as f64;
        }
        let (val_wer, val_exprate) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let r = evaluate(model, val, cfg.eval_batch_size)?;
            (r.wer, r.exprate)
        };
        let entry = EpochLog {
            epoch,
            lr,
            train_loss: total / train.len() as f64,
            val_wer,
            val_exprate,
        };
        let key = (
            if val_exprate.is_nan() { f64::NEG_INFINITY } else { val_exprate },
            if val_wer.is_nan() { f64::INFINITY } else { val_wer },
        );
        if best_epoch == 0 || key.0 > best_key.0 || (key.0 == best_key.0 && key.1 < best_key.1) {
            best_key = key;
            best_epoch = epoch;
            best = model.params.clone();
        }
        if let Some(cb) = hooks.on_epoch.as_mut() {
            cb(&entry);
        }
        log.push(entry);
        if let Some(dir) = hooks.out_dir {
            write_outputs(dir, &log, &best, &model.params)?;
        }
    }
    Ok(TrainOutcome {
        log,
        best,
        best_epoch,
    })
}

fn write_outputs(dir: &Path, log: &[EpochLog], best: &LayerParams, last: &LayerParams) -> Result<()> {
    let p = dir.join("metrics.csv");
    fs::write(&p, metrics_csv(log)).map_err(|e| Error::io(&p, e))?;
    checkpoint::save(best, &dir.join("best.ckpt"))?;
    checkpoint::save(last, &dir.join("last.ckpt"))
}
