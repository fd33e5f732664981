//! Mini-batch SGD with momentum, step learning-rate decay, early stopping
//! and evaluation.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, softmax_cross_entropy, Mode, Network, Param};
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Multiplicative learning-rate decay factor.
    pub lr_decay: f64,
    /// Epochs between decays; `None` means a third of the epoch budget.
    pub decay_every: Option<usize>,
    pub max_epochs: usize,
    /// Epochs without validation improvement before early stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 50,
            lr: 0.01,
            momentum: 0.9,
            lr_decay: 0.5,
            decay_every: None,
            max_epochs: 10,
            patience: 3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid(format!("lr decay {} outside (0, 1]", self.lr_decay)));
        }
        if self.decay_every == Some(0) {
            return Err(Error::invalid("decay interval must be positive"));
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (0-based) of a run of `total` epochs.
    pub fn lr_at(&self, epoch: usize, total: usize) -> f64 {
        let every = self.decay_every.unwrap_or((total / 3).max(1));
        self.lr * self.lr_decay.powi((epoch / every) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopRule {
    /// Up to `max_epochs`, stopping after `patience` epochs without
    /// validation improvement; the best checkpoint is restored.
    EarlyStop,
    /// Exactly this many epochs.
    FixedEpochs(usize),
    /// Until eval-mode training accuracy reaches the target, at most
    /// `max_epochs`.
    TrainAccTarget(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_val_acc: f64,
    /// Epoch (1-based) of the best validation accuracy; 0 is the starting model.
    pub best_epoch: usize,
    pub target_reached: bool,
    pub seconds: f64,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,train_acc,val_loss,val_acc";

    pub fn final_train_acc(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_acc)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for e in &self.epochs {
            writeln!(
                s,
                "{},{},{},{},{}",
                e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc
            )
            .expect("write to string");
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
}

/// Eval-mode accuracy (argmax, ties to the lowest index) and mean loss.
pub fn evaluate(net: &Network, dataset: &Dataset) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let mut correct = 0;
    let mut loss_sum = 0.0;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, y) = dataset.batch(chunk);
        let logits = net.predict(&x)?;
        let (loss, _) = softmax_cross_entropy(&logits, &y)?;
        loss_sum += loss * chunk.len() as f64;
        correct += argmax_rows(&logits).iter().zip(&y).filter(|(p, l)| p == l).count();
    }
    let total = dataset.len();
    Ok(Evaluation {
        accuracy: correct as f64 / total as f64,
        loss: loss_sum / total as f64,
        correct,
        total,
    })
}

/// One SGD-with-momentum update: `v ← μ·v − lr·g`, `w ← w + v`. Masked
/// entries keep value 0 and velocity 0.
pub fn sgd_momentum_step(
    params: &mut [&mut Param],
    grads: &[Tensor],
    velocity: &mut [Tensor],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape(
            "sgd_momentum_step",
            format!(
                "{} params, {} grads, {} velocities",
                params.len(),
                grads.len(),
                velocity.len()
            ),
        ));
    }
    for (i, ((p, g), v)) in params.iter_mut().zip(grads).zip(velocity.iter_mut()).enumerate() {
        if p.value.shape() != g.shape() || g.shape() != v.shape() {
            return Err(Error::shape(
                "sgd_momentum_step",
                format!(
                    "parameter {i}: {:?} / {:?} / {:?}",
                    p.value.shape(),
                    g.shape(),
                    v.shape()
                ),
            ));
        }
        if let Some(bad) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of parameter tensor {i} at flat index {bad} ({})",
                g.data()[bad]
            )));
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let mask = p.mask.as_ref().map(|m| m.as_slice());
        for (j, ((w, &gj), vj)) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(v.data_mut())
            .enumerate()
        {
            if mask.is_some_and(|m| !m[j]) {
                *vj = 0.0;
                continue;
            }
            *vj = momentum * *vj - lr * gj;
            *w += *vj;
        }
    }
    Ok(())
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Trains `net` in place. Velocity starts at zero on every call, so a
/// retrain after a new mask never carries stale momentum.
pub fn fit(
    net: &mut Network,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    stop: StopRule,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if val.is_empty() && stop == StopRule::EarlyStop {
        return Err(Error::invalid("early stopping needs a validation set"));
    }
    let start = Instant::now();
    let budget = match stop {
        StopRule::FixedEpochs(n) => n,
        _ => cfg.max_epochs,
    };
    let val_eval = |net: &Network| -> Result<Evaluation> {
        if val.is_empty() {
            Ok(Evaluation {
                accuracy: f64::NAN,
                loss: f64::NAN,
                correct: 0,
                total: 0,
            })
        } else {
            evaluate(net, val)
        }
    };

    let mut report = TrainReport {
        epochs: Vec::new(),
        best_val_acc: f64::NAN,
        best_epoch: 0,
        target_reached: false,
        seconds: 0.0,
    };
    let mut best: Option<Network> = None;
    if stop == StopRule::EarlyStop && budget > 0 {
        report.best_val_acc = val_eval(net)?.accuracy;
        best = Some(net.clone());
    }
    if let StopRule::TrainAccTarget(t) = stop {
        if evaluate(net, train)?.accuracy >= t {
            report.target_reached = true;
            report.seconds = start.elapsed().as_secs_f64();
            return Ok(report);
        }
    }

    let mut velocity: Vec<Tensor> = net.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    let mut since_best = 0;
    for epoch in 0..budget {
        let lr = cfg.lr_at(epoch, budget);
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch(chunk);
            let g = net.gradients(&x, &y, Mode::Train, &mut rng)?;
            net.update_running_stats(&g.pass.caches);
            let mut params = net.params_mut();
            sgd_momentum_step(&mut params, &g.grads, &mut velocity, lr, cfg.momentum)?;
        }

        let tr = evaluate(net, train)?;
        let va = val_eval(net)?;
        report.epochs.push(EpochStats {
            epoch: epoch + 1,
            train_loss: tr.loss,
            train_acc: tr.accuracy,
            val_loss: va.loss,
            val_acc: va.accuracy,
            lr,
        });

        match stop {
            StopRule::EarlyStop => {
                if va.accuracy > report.best_val_acc {
                    report.best_val_acc = va.accuracy;
                    report.best_epoch = epoch + 1;
                    best = Some(net.clone());
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= cfg.patience {
                        break;
                    }
                }
            }
            StopRule::TrainAccTarget(t) => {
                track_best(&mut report, va.accuracy, epoch + 1);
                if tr.accuracy >= t {
                    report.target_reached = true;
                    break;
                }
            }
            StopRule::FixedEpochs(_) => track_best(&mut report, va.accuracy, epoch + 1),
        }
    }
    if let Some(best) = best {
        *net = best;
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

fn track_best(report: &mut TrainReport, acc: f64, epoch: usize) {
    if report.best_val_acc.is_nan() || acc > report.best_val_acc {
        report.best_val_acc = acc;
        report.best_epoch = epoch;
    }
}
