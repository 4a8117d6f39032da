//! Adam with per-epoch cosine annealing, early stopping on validation Dice,
//! seeded dataset splits and resumable training state.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, FORMAT_VERSION, MAGIC};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Shape, Tape, Tensor};
use crate::image::SlicePair;
use crate::losses::{compute_loss, distance_tensor, signed_distance_map, LossConfig, LossError, LossKind, SignedDistanceMap};
use crate::model::{Model, ModelError};

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    BadConfig(String),
    #[error("split fractions must be positive with a sum below 1, got val {val} and test {test}")]
    BadFractions { val: f64, test: f64 },
    #[error("epoch {epoch} outside 0..={max}")]
    OutOfRange { epoch: usize, max: usize },
    #[error("{0} set is empty")]
    EmptyDataset(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

impl From<crate::autodiff::AutodiffError> for TrainError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        TrainError::Model(ModelError::Autodiff(e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-Dice improvement before stopping.
    pub patience: usize,
    pub val_fraction: f64,
    pub loss: LossKind,
    pub loss_cfg: LossConfig,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            lr_min: 1e-6,
            batch_size: 16,
            max_epochs: 25,
            patience: 5,
            val_fraction: 0.2,
            loss: LossKind::BceDice,
            loss_cfg: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// A learning rate of zero is accepted so a model can be held frozen.
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |s: String| Err(TrainError::BadConfig(s));
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr0 && self.lr0.is_finite()) {
            return bad(format!("need 0 <= lr_min <= lr0, got lr_min {} and lr0 {}", self.lr_min, self.lr0));
        }
        if self.batch_size == 0 {
            return bad(format!("batch_size must be at least 1"));
        }
        if self.max_epochs == 0 {
            return bad(format!("max_epochs must be at least 1"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        self.loss_cfg.validate()?;
        Ok(())
    }
}

/// `lr_min + ½(lr0 − lr_min)(1 + cos(π·epoch/max_epochs))`.
///
/// Evaluated as the blend `(1−w)·lr_min + w·lr0` with `w = ½(1 + cos)`, which
/// hits both endpoints and the midpoint exactly in floating point.
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> Result<f64, TrainError> {
    if epoch > cfg.max_epochs || cfg.max_epochs == 0 {
        return Err(TrainError::OutOfRange { epoch, max: cfg.max_epochs });
    }
    let phase = core::f64::consts::PI * epoch as f64 / cfg.max_epochs as f64;
    let w = 0.5 * (1.0 + crate::math::cos(phase));
    Ok((1.0 - w) * cfg.lr_min + w * cfg.lr0)
}

/// Seeded shuffle, then `(train, val, test)` with `round(n·fraction)` items
/// in each held-out part.
pub fn split_dataset<T: Clone>(
    items: &[T],
    val_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>), TrainError> {
    let ok = |f: f64| f > 0.0 && f < 1.0;
    if !ok(val_fraction) || !ok(test_fraction) || val_fraction + test_fraction >= 1.0 {
        return Err(TrainError::BadFractions { val: val_fraction, test: test_fraction });
    }
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = crate::math::round(n as f64 * val_fraction) as usize;
    let n_test = (crate::math::round(n as f64 * test_fraction) as usize).min(n - n_val);
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<T>>();
    let (val, rest) = order.split_at(n_val);
    let (test, train) = rest.split_at(n_test);
    Ok((pick(train), pick(val), pick(test)))
}

/// First and second moment estimates for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f32) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() || p.shape() != state.v[i].shape() {
            return Err(TrainError::ShapeMismatch(format!("parameter {i}: {} vs gradient {}", p.shape(), g.shape())));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - libm::pow(ADAM_BETA1 as f64, t as f64);
    let c2 = 1.0 - libm::pow(ADAM_BETA2 as f64, t as f64);
    let (c1, c2) = (c1 as f32, c2 as f32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            let mh = *mi / c1;
            let vh = *vi / c2;
            *w -= lr * mh / (libm::sqrtf(vh) + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
    pub val_accuracy: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,val_dice,val_accuracy,lr";

impl History {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// CSV with shortest round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(HISTORY_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.val_dice, r.val_accuracy, r.lr);
        }
        s
    }

    pub fn from_csv(text: &str) -> Option<Self> {
        let mut lines = text.lines();
        if lines.next()? != HISTORY_HEADER {
            return None;
        }
        let mut records = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return None;
            }
            let num = |i: usize| f[i].parse::<f64>().ok();
            records.push(EpochRecord {
                epoch: f[0].parse().ok()?,
                train_loss: num(1)?,
                val_loss: num(2)?,
                val_dice: num(3)?,
                val_accuracy: num(4)?,
                lr: num(5)?,
            });
        }
        Some(Self { records })
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    pub history: History,
    /// Best validation Dice so far and the parameters that achieved it.
    pub best: Option<(f64, Vec<Tensor>)>,
    /// Consecutive epochs without improvement.
    pub stale_epochs: usize,
    pub stopped: bool,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let adam = AdamState::new(model.params());
        Self { model, adam, history: History::default(), best: None, stale_epochs: 0, stopped: false }
    }

    /// Index of the next epoch to run.
    pub fn next_epoch(&self) -> usize {
        self.history.len()
    }

    /// The model with the best validation parameters, or the current one
    /// before any epoch has finished.
    pub fn best_model(&self) -> Model {
        let mut m = self.model.clone();
        if let Some((_, p)) = &self.best {
            m.set_params(p.clone()).expect("best parameters match the model");
        }
        m
    }

    pub fn is_finished(&self, cfg: &TrainConfig) -> bool {
        self.stopped || self.next_epoch() >= cfg.max_epochs
    }
}

/// Per-pair tensors cached across epochs.
pub struct PreparedSet {
    images: Vec<f32>,
    masks: Vec<f32>,
    sdms: Option<Vec<SignedDistanceMap>>,
    h: usize,
    w: usize,
    len: usize,
}

impl PreparedSet {
    pub fn new(pairs: &[SlicePair], with_distance_maps: bool) -> Result<Self, TrainError> {
        let (w, h) = pairs.first().map_or((0, 0), |p| p.image.dims());
        let mut images = Vec::with_capacity(pairs.len() * w * h);
        let mut masks = Vec::with_capacity(pairs.len() * w * h);
        for (i, p) in pairs.iter().enumerate() {
            if p.image.dims() != (w, h) || p.mask.dims() != (w, h) {
                return Err(TrainError::ShapeMismatch(format!(
                    "pair {i} is {:?}/{:?}, expected {w}x{h}",
                    p.image.dims(),
                    p.mask.dims()
                )));
            }
            images.extend_from_slice(p.image.pixels());
            masks.extend(p.mask.pixels().iter().map(|&b| b as f32));
        }
        let sdms = with_distance_maps.then(|| pairs.iter().map(|p| signed_distance_map(&p.mask)).collect());
        Ok(Self { images, masks, sdms, h, w, len: pairs.len() })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn gather(&self, idx: &[usize]) -> (Tensor, Tensor, Option<Tensor>) {
        let plane = self.h * self.w;
        let shape = Shape::new(idx.len(), 1, self.h, self.w);
        let take = |src: &[f32]| {
            let mut out = Vec::with_capacity(idx.len() * plane);
            for &i in idx {
                out.extend_from_slice(&src[i * plane..(i + 1) * plane]);
            }
            Tensor::new(shape, out).expect("gathered length")
        };
        let sdm = self.sdms.as_ref().map(|s| distance_tensor(&idx.iter().map(|&i| s[i].clone()).collect::<Vec<_>>()));
        (take(&self.images), take(&self.masks), sdm)
    }
}

/// Order of training samples in `epoch`, a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn batch_loss(
    model: &Model,
    cfg: &TrainConfig,
    x: Tensor,
    t: Tensor,
    sdm: Option<Tensor>,
    want_grads: bool,
) -> Result<(f64, Tensor, Option<Vec<Tensor>>), TrainError> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, want_grads);
    let xv = tape.constant(x);
    let tv = tape.constant(t);
    let sv = sdm.map(|s| tape.constant(s));
    let p = model.forward_on(&mut tape, &params, xv)?;
    let loss = compute_loss(&mut tape, cfg.loss, &cfg.loss_cfg, p, tv, sv)?;
    let value = tape.value(loss).item().expect("scalar loss") as f64;
    let probs = tape.value(p).clone();
    if !want_grads {
        return Ok((value, probs, None));
    }
    tape.backward(loss)?;
    let grads = params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, probs, Some(grads)))
}

/// Validation loss (sample-weighted mean over batches), pooled hard Dice at
/// threshold 0.5 and pooled binary accuracy.
pub fn evaluate(model: &Model, set: &PreparedSet, cfg: &TrainConfig) -> Result<(f64, f64, f64), TrainError> {
    if set.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    let (mut loss_sum, mut inter, mut pred_fg, mut true_fg, mut correct) = (0.0f64, 0u64, 0u64, 0u64, 0u64);
    let all: Vec<usize> = (0..set.len()).collect();
    for chunk in all.chunks(cfg.batch_size) {
        let (x, t, sdm) = set.gather(chunk);
        let (l, probs, _) = batch_loss(model, cfg, x, t.clone(), sdm, false)?;
        loss_sum += l * chunk.len() as f64;
        for (&p, &m) in probs.data().iter().zip(t.data()) {
            let (pp, mm) = (p > 0.5, m > 0.5);
            inter += (pp && mm) as u64;
            pred_fg += pp as u64;
            true_fg += mm as u64;
            correct += (pp == mm) as u64;
        }
    }
    let dice = if pred_fg + true_fg == 0 { 1.0 } else { 2.0 * inter as f64 / (pred_fg + true_fg) as f64 };
    let total = set.len() * set.h * set.w;
    Ok((loss_sum / set.len() as f64, dice, correct as f64 / total as f64))
}

/// Run one epoch and apply the early-stopping bookkeeping.
pub fn run_epoch(
    state: &mut TrainState,
    train: &PreparedSet,
    val: &PreparedSet,
    cfg: &TrainConfig,
) -> Result<EpochRecord, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    let epoch = state.next_epoch();
    let lr = cosine_lr(epoch, cfg)?;
    let order = epoch_order(train.len(), cfg.seed, epoch);
    let mut loss_sum = 0.0f64;
    for chunk in order.chunks(cfg.batch_size) {
        let (x, t, sdm) = train.gather(chunk);
        let (l, _, grads) = batch_loss(&state.model, cfg, x, t, sdm, true)?;
        loss_sum += l * chunk.len() as f64;
        adam_step(state.model.params_mut(), &grads.expect("gradients requested"), &mut state.adam, lr as f32)?;
    }
    let (val_loss, val_dice, val_accuracy) = evaluate(&state.model, val, cfg)?;
    let record = EpochRecord { epoch, train_loss: loss_sum / train.len() as f64, val_loss, val_dice, val_accuracy, lr };
    state.history.records.push(record);
    match &state.best {
        Some((best, _)) if val_dice <= *best => {
            state.stale_epochs += 1;
            if state.stale_epochs >= cfg.patience {
                state.stopped = true;
            }
        }
        _ => {
            state.best = Some((val_dice, state.model.params().to_vec()));
            state.stale_epochs = 0;
        }
    }
    Ok(record)
}

/// Continue training until early stopping, `max_epochs`, or
/// `epoch_budget` more epochs; `on_epoch` sees the state after each epoch.
pub fn fit(
    state: &mut TrainState,
    train: &[SlicePair],
    val: &[SlicePair],
    cfg: &TrainConfig,
    epoch_budget: Option<usize>,
    mut on_epoch: impl FnMut(&TrainState, &EpochRecord) -> Result<(), TrainError>,
) -> Result<(), TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    let sdm = cfg.loss.needs_distance_map();
    let (train, val) = (PreparedSet::new(train, sdm)?, PreparedSet::new(val, sdm)?);
    let mut ran = 0;
    while !state.is_finished(cfg) && epoch_budget.is_none_or(|b| ran < b) {
        let rec = run_epoch(state, &train, &val, cfg)?;
        ran += 1;
        on_epoch(state, &rec)?;
    }
    Ok(())
}

/// Train from scratch; returns the best-validation model and the history.
pub fn train(model: Model, train_set: &[SlicePair], val_set: &[SlicePair], cfg: &TrainConfig) -> Result<(Model, History), TrainError> {
    let mut state = TrainState::new(model);
    fit(&mut state, train_set, val_set, cfg, None, |_, _| Ok(()))?;
    Ok((state.best_model(), state.history))
}
