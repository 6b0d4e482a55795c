//! Loss, optimizer, learning-rate schedule and the epoch loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledImages;
use crate::error::{Error, Result};
use crate::layers::{argmax, Mode};
use crate::model::SceneMixer;
use crate::numerics::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            lr_init: 1e-3,
            lr_factor: 0.5,
            lr_patience: 10,
            lr_min: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-7,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            problems.push("lr_factor must lie in (0, 1)");
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_init) {
            problems.push("need 0 < lr_min <= lr_init");
        }
        if self.lr_patience == 0 {
            problems.push("lr_patience must be >= 1");
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1");
        }
        if self.epochs == 0 {
            problems.push("epochs must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            problems.push("adam betas must lie in [0, 1)");
        }
        if self.adam_eps <= 0.0 {
            problems.push("adam epsilon must be positive");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Mean negative log-likelihood of the true classes, with probabilities
/// clamped below at 1e-12. Also returns the gradient with respect to the
/// pre-softmax logits, `(probs - onehot) / n`.
pub fn cross_entropy<T: Real>(probs: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let (n, k) = match *probs.dims() {
        [n, k] => (n, k),
        _ => return Err(Error::Layer(format!("cross entropy expects (n, k), got {}", probs.shape()))),
    };
    if labels.len() != n {
        return Err(Error::Layer(format!("{} labels for {n} rows", labels.len())));
    }
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * k);
    for (row, &label) in probs.data().chunks_exact(k).zip(labels) {
        if label >= k {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        loss -= row[label].to_f64().max(1e-12).ln();
        for (j, &p) in row.iter().enumerate() {
            let target = if j == label { T::one() } else { T::zero() };
            grad.push((p - target) * inv_n);
        }
    }
    Ok((loss / n as f64, Tensor::from_vec(probs.dims(), grad)?))
}

/// First and second moment buffers for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[&Tensor<T>], beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            m: params.iter().map(|p| p.zeros_like()).collect(),
            v: params.iter().map(|p| p.zeros_like()).collect(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn for_config(params: &[&Tensor<T>], cfg: &TrainConfig) -> Self {
        Self::new(params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    }

    /// One bias-corrected Adam update. Fails without touching anything when
    /// a gradient is non-finite or shapes disagree.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Layer(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            p.ensure_same_shape(g)?;
            m.ensure_same_shape(g)?;
            if !g.all_finite() {
                return Err(Error::NonFinite("gradient".into()));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let c1 = T::from_f64(1.0 - self.beta1);
        let c2 = T::from_f64(1.0 - self.beta2);
        let corr1 = T::from_f64(1.0 / (1.0 - self.beta1.powi(t)));
        let corr2 = T::from_f64(1.0 / (1.0 - self.beta2.powi(t)));
        let lr = T::from_f64(lr);
        let eps = T::from_f64(self.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((theta, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + c1 * gi;
                *vi = b2 * *vi + c2 * gi * gi;
                let m_hat = *mi * corr1;
                let v_hat = *vi * corr2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Reduce-on-plateau schedule monitoring a metric that should increase.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    lr: f64,
    best: Option<f64>,
    since_improvement: usize,
    factor: f64,
    patience: usize,
    min_lr: f64,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64) -> Self {
        PlateauScheduler {
            lr,
            best: None,
            since_improvement: 0,
            factor,
            patience,
            min_lr,
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.lr_init, cfg.lr_factor, cfg.lr_patience, cfg.lr_min)
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Feeds one end-of-epoch metric and returns the learning rate for the
    /// next epoch. Only strict improvements reset the counter.
    pub fn update(&mut self, metric: f64) -> f64 {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
            if self.since_improvement >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.since_improvement = 0;
            }
        }
        self.lr
    }
}

/// Keeps the snapshot taken at the first epoch reaching the highest metric.
#[derive(Debug, Clone)]
pub struct BestTracker<S> {
    best: Option<(usize, f64, S)>,
}

impl<S> Default for BestTracker<S> {
    fn default() -> Self {
        BestTracker { best: None }
    }
}

impl<S> BestTracker<S> {
    /// Records `snapshot()` when `metric` strictly beats everything seen.
    pub fn observe(&mut self, epoch: usize, metric: f64, snapshot: impl FnOnce() -> S) -> bool {
        let better = self.best.as_ref().is_none_or(|(_, m, _)| metric > *m);
        if better {
            self.best = Some((epoch, metric, snapshot()));
        }
        better
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.as_ref().map(|(e, _, _)| *e)
    }

    pub fn best_metric(&self) -> Option<f64> {
        self.best.as_ref().map(|(_, m, _)| *m)
    }

    pub fn into_best(self) -> Option<(usize, f64, S)> {
        self.best
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
    pub batches: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_oa: f64,
    pub val_loss: f64,
    pub val_oa: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_oa,val_loss,val_oa,lr\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.train_oa, r.val_loss, r.val_oa, r.lr
            ));
        }
        s
    }

    pub fn best_val_oa(&self) -> Option<f64> {
        self.records
            .get(self.best_epoch.checked_sub(1)?)
            .map(|r| r.val_oa)
    }
}

/// Sample order for one epoch: a Fisher-Yates shuffle driven by a ChaCha
/// stream selected by the epoch number.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// One pass over the training data in minibatches; the final partial batch
/// is kept. Returns the sample-weighted mean loss and accuracy.
pub fn train_epoch<T: Real>(
    model: &mut SceneMixer<T>,
    data: &LabeledImages<T>,
    adam: &mut AdamState<T>,
    lr: f64,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let order = epoch_order(data.len(), seed, epoch);
    let classes = model.config().num_classes;
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut batches = 0;
    for idx in order.chunks(batch_size) {
        let (x, labels) = data.gather(idx)?;
        let (probs, cache) = model.forward(&x, Mode::Train)?;
        let (loss, grad) = cross_entropy(&probs, &labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
        }
        loss_sum += loss * idx.len() as f64;
        correct += probs
            .data()
            .chunks_exact(classes)
            .zip(&labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
        let grads = model.backward(cache, &grad)?;
        adam.step(&mut model.trainable_mut(), &grads.params, lr)?;
        batches += 1;
    }
    Ok(EpochStats {
        loss: loss_sum / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
        batches,
    })
}

/// Inference-mode loss and predicted labels over a whole split.
pub fn evaluate<T: Real>(
    model: &SceneMixer<T>,
    data: &LabeledImages<T>,
    batch_size: usize,
) -> Result<(f64, Vec<usize>)> {
    let classes = model.config().num_classes;
    let mut loss_sum = 0.0;
    let mut preds = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(batch_size.max(1)) {
        let (x, labels) = data.gather(idx)?;
        let probs = model.infer(&x)?;
        let (loss, _) = cross_entropy(&probs, &labels)?;
        loss_sum += loss * idx.len() as f64;
        preds.extend(probs.data().chunks_exact(classes).map(argmax));
    }
    Ok((loss_sum / data.len().max(1) as f64, preds))
}

fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Trains for `cfg.epochs` epochs and returns the weights from the epoch with
/// the highest validation accuracy (earliest on ties) plus the history.
pub fn fit<T: Real>(
    model: SceneMixer<T>,
    train: &LabeledImages<T>,
    val: &LabeledImages<T>,
    cfg: &TrainConfig,
) -> Result<(SceneMixer<T>, TrainHistory)> {
    fit_with(model, train, val, cfg, |_| {})
}

/// [`fit`] with a callback after every epoch.
pub fn fit_with<T: Real>(
    mut model: SceneMixer<T>,
    train: &LabeledImages<T>,
    val: &LabeledImages<T>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(SceneMixer<T>, TrainHistory)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Dataset("training and validation splits must be non-empty".into()));
    }
    let mut adam = AdamState::for_config(&model.trainable(), cfg);
    let mut sched = PlateauScheduler::from_config(cfg);
    let mut best = BestTracker::default();
    let mut history = TrainHistory::default();
    for epoch in 1..=cfg.epochs {
        let lr = sched.lr();
        let stats = train_epoch(&mut model, train, &mut adam, lr, cfg.batch_size, cfg.seed, epoch as u64)?;
        let (val_loss, preds) = evaluate(&model, val, cfg.batch_size)?;
        let val_oa = accuracy(&preds, val.labels());
        let record = EpochRecord {
            epoch,
            train_loss: stats.loss,
            train_oa: stats.accuracy,
            val_loss,
            val_oa,
            lr,
        };
        best.observe(epoch, val_oa, || model.clone());
        sched.update(val_oa);
        history.records.push(record);
        on_epoch(&record);
    }
    let (best_epoch, _, snapshot) = best.into_best().expect("at least one epoch ran");
    history.best_epoch = best_epoch;
    Ok((snapshot, history))
}
