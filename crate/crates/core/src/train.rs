//! Training loop: Adagrad on batch-mean cross-entropy, learning rate halved
//! on training-loss plateaus, periodic evaluation, and model selection by
//! best training loss.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::data::{batchify, MtsDataset, MtsSample};
use crate::error::{GtnError, Result};
use crate::model::{forward, Gtn, GtnParams, Mode, Variant};
use crate::rng::{Purpose, Rng};
use crate::tensor::Tensor;

/// Per-parameter Adagrad state.
#[derive(Clone, Debug, PartialEq)]
pub struct Adagrad {
    pub lr: f64,
    pub base_lr: f64,
    pub eps: f64,
    accumulators: BTreeMap<String, Vec<f64>>,
}

impl Adagrad {
    pub fn new(lr: f64, eps: f64) -> Self {
        Adagrad {
            lr,
            base_lr: lr,
            eps,
            accumulators: BTreeMap::new(),
        }
    }

    pub fn accumulator(&self, name: &str) -> Option<&[f64]> {
        self.accumulators.get(name).map(Vec::as_slice)
    }

    /// `acc += g²; θ -= lr·g / (sqrt(acc) + eps)`. Nothing is updated if any
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut GtnParams, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| GtnError::Param(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(GtnError::Shape {
                    op: "adagrad_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(GtnError::NonFinite(format!("gradient of {name}")));
            }
        }
        for (name, g) in grads {
            let acc = self
                .accumulators
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.numel()]);
            let theta = params.get_mut(name).expect("checked above").data_mut();
            for ((t, a), &gv) in theta.iter_mut().zip(acc.iter_mut()).zip(g.data()) {
                // zero gradient leaves θ untouched even when acc and eps are 0
                if gv == 0.0 {
                    continue;
                }
                *a += gv * gv;
                *t -= self.lr * gv / (a.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Reduce-on-plateau schedule driven by the training loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    /// Relative improvement needed to reset the patience counter.
    pub threshold: f64,
    pub min_lr: f64,
    best: f64,
    bad_epochs: usize,
    exhausted: bool,
}

impl Plateau {
    pub fn new(factor: f64, patience: usize, threshold: f64, min_lr: f64) -> Result<Self> {
        if !(factor > 0.0 && factor < 1.0) {
            return Err(GtnError::Param(format!(
                "plateau factor must be in (0, 1), got {factor}"
            )));
        }
        Ok(Plateau {
            factor,
            patience,
            threshold,
            min_lr,
            best: f64::INFINITY,
            bad_epochs: 0,
            exhausted: false,
        })
    }

    /// Feeds one epoch's loss; returns whether the learning rate was cut.
    pub fn step(&mut self, loss: f64, optim: &mut Adagrad) -> bool {
        if loss < self.best * (1.0 - self.threshold) || self.best == f64::INFINITY {
            self.best = loss;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs < self.patience {
            return false;
        }
        self.bad_epochs = 0;
        let next = (optim.lr * self.factor).max(self.min_lr).min(optim.lr);
        if next < optim.lr {
            optim.lr = next;
            true
        } else {
            self.exhausted = true;
            false
        }
    }

    /// Patience ran out while the learning rate was already at its floor.
    pub fn exhausted(&self) -> bool {
        self.exhausted
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub eval_interval: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_threshold: f64,
    pub min_lr: f64,
    pub adagrad_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 16,
            epochs: 500,
            eval_interval: 1,
            plateau_factor: 0.5,
            plateau_patience: 10,
            plateau_threshold: 1e-4,
            min_lr: 1e-6,
            adagrad_eps: 1e-10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(GtnError::Config(format!(
                "lr must be >= 0, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.eval_interval == 0 {
            return Err(GtnError::Config(
                "batch_size, epochs and eval_interval must be >= 1".into(),
            ));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(GtnError::Config("plateau_factor must be in (0, 1)".into()));
        }
        if !(self.min_lr >= 0.0) || !(self.adagrad_eps >= 0.0) || !(self.plateau_threshold >= 0.0) {
            return Err(GtnError::Config(
                "min_lr, adagrad_eps and plateau_threshold must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_train_loss_epoch: usize,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,train_acc,test_acc,lr";

    /// `epoch,train_loss,train_acc,test_acc,lr`; accuracies are empty on
    /// epochs without evaluation.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_default();
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{:?},{},{},{:?}",
                e.epoch,
                e.train_loss,
                opt(e.train_acc),
                opt(e.test_acc),
                e.lr
            );
        }
        out
    }
}

/// Headline numbers of a run. `test_accuracy` is measured on the
/// checkpoint with the lowest training loss; the best test accuracy seen at
/// any evaluation is kept alongside for reference only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub variant: Variant,
    pub epoch: usize,
    pub test_accuracy: f64,
    pub train_loss: f64,
    pub best_test_accuracy: Option<f64>,
    pub best_test_epoch: Option<usize>,
    pub epochs_run: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: TrainLog,
    /// Model at the best-training-loss epoch.
    pub best: Gtn,
    /// Model after the last epoch.
    pub last: Gtn,
    pub report: Report,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
}

/// Eval-mode accuracy over `samples`; arg-max ties go to the lowest class.
pub fn evaluate(model: &Gtn, samples: &[MtsSample]) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(GtnError::Empty("evaluation split"));
    }
    let k = model.config.n_classes;
    let mut confusion = vec![vec![0; k]; k];
    let mut predictions = Vec::with_capacity(samples.len());
    let mut session = model.session();
    for s in samples {
        if s.label >= k {
            return Err(GtnError::Label {
                label: s.label,
                n_classes: k,
            });
        }
        let pred = session.infer(&s.values, s.true_len())?.predicted();
        confusion[s.label][pred] += 1;
        predictions.push(pred);
    }
    let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
    Ok(EvalResult {
        accuracy: correct as f64 / samples.len() as f64,
        confusion,
        predictions,
    })
}

/// Loss and parameter gradients of one padded batch in the given mode.
pub fn batch_gradients(
    model: &Gtn,
    batch: &crate::data::Batch,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, true);
    let mut rows = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let out = forward(
            &mut g,
            &bound,
            &model.config,
            &batch.sample(i),
            batch.true_lens[i],
            mode,
            rng,
        )?;
        rows.push(out.logits);
    }
    let logits = g.concat(&rows, 0)?;
    let loss = g.cross_entropy(logits, &batch.labels)?;
    let loss_value = g.value(loss).data()[0];
    if !loss_value.is_finite() {
        return Err(GtnError::NonFinite(format!("training loss {loss_value}")));
    }
    g.backward(loss)?;
    let grads = bound
        .iter()
        .map(|(name, v)| {
            let grad = g
                .grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.shape(v)));
            (name.to_string(), grad)
        })
        .collect();
    Ok((loss_value, grads))
}

/// Trains `model` in place on `ds.train`, evaluating every
/// `cfg.eval_interval` epochs. When `checkpoint` is given, the model is
/// written there each time the training loss reaches a new minimum.
pub fn train(
    model: &mut Gtn,
    ds: &MtsDataset,
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    train_with(model, ds, cfg, checkpoint, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    model: &mut Gtn,
    ds: &MtsDataset,
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.config.validate()?;
    ds.validate()?;
    if ds.n_channels != model.config.n_channels
        || ds.n_classes != model.config.n_classes
        || ds.max_len > model.config.max_len
    {
        return Err(GtnError::Config(format!(
            "model expects {} channels / {} classes / max_len {}, dataset has {} / {} / {}",
            model.config.n_channels,
            model.config.n_classes,
            model.config.max_len,
            ds.n_channels,
            ds.n_classes,
            ds.max_len
        )));
    }
    if ds.train.is_empty() || ds.test.is_empty() {
        return Err(GtnError::Empty("train or test split"));
    }

    let mut shuffle_rng = Rng::new(cfg.seed, Purpose::Shuffle);
    let mut dropout_rng = Rng::new(cfg.seed, Purpose::Dropout);
    let mut optim = Adagrad::new(cfg.lr, cfg.adagrad_eps);
    let mut plateau = Plateau::new(
        cfg.plateau_factor,
        cfg.plateau_patience,
        cfg.plateau_threshold,
        cfg.min_lr,
    )?;

    let mut log = TrainLog::default();
    let mut best = (f64::INFINITY, 0usize, model.clone());
    let mut best_test: Option<(f64, usize)> = None;

    for epoch in 1..=cfg.epochs {
        let lr = optim.lr;
        let batches = batchify(&ds.train, cfg.batch_size, &mut shuffle_rng, true)?;
        let mut total = 0.0;
        for batch in &batches {
            let (loss, grads) = batch_gradients(model, batch, Mode::Train, &mut dropout_rng)?;
            optim.step(&mut model.params, &grads)?;
            total += loss * batch.len() as f64;
        }
        let train_loss = total / ds.train.len() as f64;
        if !train_loss.is_finite() {
            return Err(GtnError::NonFinite(format!("epoch {epoch} training loss")));
        }

        if train_loss < best.0 {
            best = (train_loss, epoch, model.clone());
            if let Some(path) = checkpoint {
                Checkpoint::new(model, cfg.seed).save(path)?;
            }
        }

        let (mut train_acc, mut test_acc) = (None, None);
        if epoch % cfg.eval_interval == 0 {
            train_acc = Some(evaluate(model, &ds.train)?.accuracy);
            let acc = evaluate(model, &ds.test)?.accuracy;
            if best_test.is_none_or(|(b, _)| acc > b) {
                best_test = Some((acc, epoch));
            }
            test_acc = Some(acc);
        }

        let record = EpochRecord {
            epoch,
            train_loss,
            train_acc,
            test_acc,
            lr,
        };
        on_epoch(&record);
        log.epochs.push(record);

        plateau.step(train_loss, &mut optim);
        if plateau.exhausted() {
            break;
        }
    }

    let (best_loss, best_epoch, best_model) = best;
    log.best_train_loss_epoch = best_epoch;
    let test_accuracy = evaluate(&best_model, &ds.test)?.accuracy;
    let report = Report {
        variant: model.config.variant,
        epoch: best_epoch,
        test_accuracy,
        train_loss: best_loss,
        best_test_accuracy: best_test.map(|b| b.0),
        best_test_epoch: best_test.map(|b| b.1),
        epochs_run: log.epochs.len(),
    };
    Ok(TrainOutcome {
        log,
        best: best_model,
        last: model.clone(),
        report,
    })
}
