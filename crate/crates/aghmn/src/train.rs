//! Optimization and evaluation: Adam with bias correction, global-norm
//! gradient clipping, plateau learning-rate decay with early stopping, and
//! the per-class/weighted/macro metric suite.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, Graph, ParamSet, Tensor};
use crate::data::Conversation;
use crate::error::{Error, Result};
use crate::model::{nll_loss_node, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Initial learning rate.
    pub lr0: f64,
    /// Global L2 norm ceiling for gradients.
    pub clip_norm: f64,
    /// Multiplier applied to the learning rate on every epoch without a new
    /// best validation mF1.
    pub decay: f64,
    /// Consecutive non-improving epochs tolerated before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0 <= 0.0 || self.clip_norm <= 0.0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::contract(
                "lr0, clip_norm, patience and max_epochs must be positive".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.decay) || self.decay == 0.0 {
            return Err(Error::contract(format!("decay {} outside (0,1)", self.decay)));
        }
        Ok(())
    }
}

// ── Gradient clipping ────────────────────────────────────────────────

/// Scales all gradients by `max_norm / norm` when the global L2 norm exceeds
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut GradMap, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for t in grads.values() {
        for v in t.data() {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for t in grads.values_mut() {
            for v in t.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

// ── Adam ─────────────────────────────────────────────────────────────

/// Per-parameter first/second moment estimates plus the step counter and
/// current learning rate.
#[derive(Clone, Debug)]
pub struct OptState {
    m: GradMap,
    v: GradMap,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptState {
    pub fn new(lr: f64) -> Self {
        OptState {
            m: GradMap::new(),
            v: GradMap::new(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over every gradient entry.
pub fn adam_step(params: &mut ParamSet, grads: &GradMap, opt: &mut OptState) {
    opt.step += 1;
    let bc1 = 1.0 - opt.beta1.powi(opt.step as i32);
    let bc2 = 1.0 - opt.beta2.powi(opt.step as i32);
    for (name, grad) in grads {
        let Some(theta) = params.get_mut(name) else { continue };
        let m = opt
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(grad.shape()));
        let v = opt
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(grad.shape()));
        for i in 0..grad.numel() {
            let g = grad.data()[i];
            let mi = opt.beta1 * m.data()[i] + (1.0 - opt.beta1) * g;
            let vi = opt.beta2 * v.data()[i] + (1.0 - opt.beta2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            theta.data_mut()[i] -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
        }
    }
}

// ── Metrics ──────────────────────────────────────────────────────────

/// Per-class accuracy/F1 plus weighted and macro aggregates.
///
/// Per-class accuracy is recall; the support-weighted accuracy equals
/// overall accuracy. A class with no true positives and no predictions
/// scores zero and still counts in the macro-F1 denominator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_classes: usize,
    pub support: Vec<usize>,
    pub per_class_acc: Vec<f64>,
    pub per_class_f1: Vec<f64>,
    pub weighted_acc: f64,
    pub weighted_f1: f64,
    pub macro_f1: f64,
    pub total: usize,
    pub correct: usize,
}

impl MetricsReport {
    /// Computes the report from `(gold, pred)` pairs.
    pub fn from_pairs(pairs: &[(usize, usize)], n_classes: usize) -> Self {
        let mut tp = vec![0usize; n_classes];
        let mut fp = vec![0usize; n_classes];
        let mut fn_ = vec![0usize; n_classes];
        let mut support = vec![0usize; n_classes];
        let mut correct = 0usize;
        for &(gold, pred) in pairs {
            support[gold] += 1;
            if gold == pred {
                tp[gold] += 1;
                correct += 1;
            } else {
                fn_[gold] += 1;
                fp[pred] += 1;
            }
        }
        let total = pairs.len();
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let mut per_class_acc = vec![0.0; n_classes];
        let mut per_class_f1 = vec![0.0; n_classes];
        for c in 0..n_classes {
            let precision = ratio(tp[c], tp[c] + fp[c]);
            let recall = ratio(tp[c], tp[c] + fn_[c]);
            per_class_acc[c] = recall;
            per_class_f1[c] = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
        }
        let weighted_acc = ratio(correct, total);
        let weighted_f1 = (0..n_classes)
            .map(|c| per_class_f1[c] * support[c] as f64)
            .sum::<f64>()
            / total.max(1) as f64;
        let macro_f1 = per_class_f1.iter().sum::<f64>() / n_classes as f64;
        MetricsReport {
            n_classes,
            support,
            per_class_acc,
            per_class_f1,
            weighted_acc,
            weighted_f1,
            macro_f1,
            total,
            correct,
        }
    }

    /// Renders the per-class Acc/F1 columns plus the weighted and macro
    /// averages as a fixed-width table.
    pub fn format_table(&self, labels: &[String]) -> String {
        let mut out = String::new();
        let header: Vec<String> = labels.iter().map(|l| format!("{l:>12}")).collect();
        out.push_str(&format!("{:<8}{}{:>12}{:>12}{:>12}\n", "", header.join(""), "Avg-Acc", "Avg-F1", "mF1"));
        let accs: Vec<String> = self
            .per_class_acc
            .iter()
            .map(|v| format!("{:>12.2}", v * 100.0))
            .collect();
        out.push_str(&format!(
            "{:<8}{}{:>12.2}{:>12}{:>12}\n",
            "Acc",
            accs.join(""),
            self.weighted_acc * 100.0,
            "",
            ""
        ));
        let f1s: Vec<String> = self
            .per_class_f1
            .iter()
            .map(|v| format!("{:>12.2}", v * 100.0))
            .collect();
        out.push_str(&format!(
            "{:<8}{}{:>12}{:>12.2}{:>12.2}\n",
            "F1",
            f1s.join(""),
            "",
            self.weighted_f1 * 100.0,
            self.macro_f1 * 100.0
        ));
        out
    }
}

/// Argmax predictions over a dataset, then the metric suite.
pub fn evaluate(model: &Model, dataset: &[Conversation]) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::contract("evaluate on an empty dataset"));
    }
    let mut pairs = Vec::new();
    for conv in dataset {
        for trace in model.run_conversation(conv)? {
            pairs.push((trace.gold, trace.pred));
        }
    }
    Ok(MetricsReport::from_pairs(&pairs, model.config.n_classes))
}

// ── Plateau schedule ─────────────────────────────────────────────────

/// Tracks the best validation mF1; decays the learning rate on every epoch
/// that fails to improve it (strictly), and signals a stop after `patience`
/// consecutive failures.
#[derive(Clone, Debug)]
pub struct PlateauSchedule {
    pub best: f64,
    pub bad_epochs: usize,
    patience: usize,
    decay: f64,
}

impl PlateauSchedule {
    pub fn new(patience: usize, decay: f64) -> Self {
        PlateauSchedule {
            best: f64::NEG_INFINITY,
            bad_epochs: 0,
            patience,
            decay,
        }
    }

    /// Returns `(improved, stop)` and decays `lr` in place when the metric
    /// did not improve.
    pub fn observe(&mut self, mf1: f64, lr: &mut f64) -> (bool, bool) {
        if mf1 > self.best {
            self.best = mf1;
            self.bad_epochs = 0;
            (true, false)
        } else {
            self.bad_epochs += 1;
            *lr *= self.decay;
            (false, self.bad_epochs >= self.patience)
        }
    }
}

// ── Fit ──────────────────────────────────────────────────────────────

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_f1: f64,
    pub val_mf1: f64,
    pub lr: f64,
}

pub struct FitResult {
    pub best_params: ParamSet,
    pub best_epoch: usize,
    pub best_val_mf1: f64,
    pub log: Vec<EpochLog>,
}

/// Epoch loop over shuffled conversations, one optimizer step per
/// conversation. Returns the parameters from the best-validation-mF1 epoch.
pub fn fit(
    model: &mut Model,
    train_set: &[Conversation],
    val_set: &[Conversation],
    cfg: &TrainConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::contract("fit needs nonempty train and validation splits"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptState::new(cfg.lr0);
    let mut schedule = PlateauSchedule::new(cfg.patience, cfg.decay);
    let mut best_params = model.params.clone();
    let mut best_epoch = 0usize;
    let mut log = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut total_nll = 0.0;
        let mut total_utterances = 0usize;
        for idx in order {
            let conv = &train_set[idx];
            let mut g = Graph::with_seed(rng.next_u64());
            let pass = model.forward_conversation(&mut g, conv, true)?;
            let loss = nll_loss_node(&mut g, &pass.prob_nodes, &pass.golds)?;
            total_nll += g.value(loss).item() * conv.len() as f64;
            total_utterances += conv.len();
            g.backward(loss)?;
            let mut grads = g.extract_grads(&pass.bound);
            model.zero_frozen_grads(&mut grads);
            clip_gradients(&mut grads, cfg.clip_norm);
            adam_step(&mut model.params, &grads, &mut opt);
        }

        let val = evaluate(model, val_set)?;
        log.push(EpochLog {
            epoch,
            train_loss: total_nll / total_utterances as f64,
            val_acc: val.weighted_acc,
            val_f1: val.weighted_f1,
            val_mf1: val.macro_f1,
            lr: opt.lr,
        });
        let (improved, stop) = schedule.observe(val.macro_f1, &mut opt.lr);
        if improved {
            best_params = model.params.clone();
            best_epoch = epoch;
        }
        if stop {
            break;
        }
    }

    Ok(FitResult {
        best_params,
        best_epoch,
        best_val_mf1: schedule.best,
        log,
    })
}
