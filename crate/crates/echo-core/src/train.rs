//! Mini-batch trainer: cross-entropy loss, Adam with decoupled weight
//! decay, optional global-norm gradient clipping, early stopping on
//! validation accuracy.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::cells::{Mode, Model};
use crate::error::{Error, Result};
use crate::grad::batch_forward;
use crate::matrix::{log_sum_exp, Matrix};
use crate::rng::Rng;
use crate::tape::GradientSet;
use crate::tasks::Sample;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Evaluations without improvement tolerated before stopping.
    pub patience: usize,
    /// Validate every this many epochs.
    pub eval_every: usize,
    /// Global-norm clip threshold; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn distractor_defaults(seed: u64) -> Self {
        TrainConfig {
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 5e-4,
            max_epochs: 120,
            patience: 15,
            eval_every: 1,
            grad_clip: Some(5.0),
            seed,
        }
    }

    pub fn listops_defaults(seed: u64) -> Self {
        TrainConfig {
            batch_size: 32,
            max_epochs: 80,
            ..TrainConfig::distractor_defaults(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "batch_size, max_epochs, eval_every must be positive".into(),
            ));
        }
        if self.lr <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("lr must be positive, weight_decay >= 0".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

/// Adam moments; beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<(String, Matrix)>,
    v: Vec<(String, Matrix)>,
    t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let zeros = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        AdamState {
            m: model
                .params
                .iter()
                .map(|(n, p)| (n.clone(), zeros(p)))
                .collect(),
            v: model
                .params
                .iter()
                .map(|(n, p)| (n.clone(), zeros(p)))
                .collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// `-log softmax(logits)[label]` on plain values, via log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Data {
            msg: format!("label {label} out of range for {} logits", logits.len()),
            position: None,
        });
    }
    Ok(log_sum_exp(logits) - logits[label])
}

/// One Adam update with bias correction. Weight decay is decoupled:
/// `p -= lr * wd * p` before the moment update touches `p`.
pub fn adam_step(
    model: &mut Model,
    grads: &GradientSet,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads.iter() {
        if !g.all_finite() {
            return Err(Error::Training {
                msg: format!("non-finite gradient for {name}"),
                epoch: None,
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - libm::pow(ADAM_BETA1, t as f64);
    let bc2 = 1.0 - libm::pow(ADAM_BETA2, t as f64);
    for ((name, m), (_, v)) in state.m.iter_mut().zip(state.v.iter_mut()) {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Contract(format!("gradient missing for {name}")))?;
        let p = model
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("parameter missing for {name}")))?;
        for k in 0..p.len() {
            let gk = g.data()[k];
            let pd = p.data_mut();
            if cfg.weight_decay > 0.0 {
                pd[k] -= cfg.lr * cfg.weight_decay * pd[k];
            }
            let mk = ADAM_BETA1 * m.data()[k] + (1.0 - ADAM_BETA1) * gk;
            let vk = ADAM_BETA2 * v.data()[k] + (1.0 - ADAM_BETA2) * gk * gk;
            m.data_mut()[k] = mk;
            v.data_mut()[k] = vk;
            let update = cfg.lr * (mk / bc1) / (libm::sqrt(vk / bc2) + ADAM_EPS);
            p.data_mut()[k] -= update;
        }
    }
    Ok(())
}

/// Scale gradients down so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut GradientSet, max_norm: f64) {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale_in_place(max_norm / norm);
    }
}

/// Fraction of samples whose argmax logit matches the label.
/// Ties break toward the lowest class id.
pub fn evaluate(model: &Model, dataset: &[Sample]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Contract("evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    for s in dataset {
        let (logits, _) = model.forward(&s.tokens)?;
        if argmax(logits.data()) == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Outcome of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub best_val_accuracy: f64,
    pub test_accuracy: f64,
    /// Mean training loss per trained epoch.
    pub loss_curve: Vec<f64>,
    /// Validation accuracy per trained epoch (NaN-free; epochs between
    /// evaluations repeat the last measured value).
    pub val_acc_curve: Vec<f64>,
    pub stopped_epoch: usize,
    pub seed: u64,
}

/// Epoch loop with seeded shuffling and early stopping on validation
/// accuracy. Restores the best-validation snapshot into `model` before
/// measuring test accuracy.
pub fn train(
    model: &mut Model,
    train_set: &[Sample],
    val_set: &[Sample],
    test_set: &[Sample],
    cfg: &TrainConfig,
) -> Result<RunResult> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Contract("train and val sets must be non-empty".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut adam = AdamState::new(model);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut best_val = f64::NEG_INFINITY;
    let mut best_params = model.params.clone();
    let mut evals_since_best = 0usize;
    let mut loss_curve = Vec::new();
    let mut val_acc_curve = Vec::new();
    let mut last_val = 0.0;
    let mut stopped_epoch = 0;

    for epoch in 1..=cfg.max_epochs {
        stopped_epoch = epoch;
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let fwd = batch_forward(model, &batch, Mode::Train, Some(&mut rng), false)?;
            let loss = fwd.loss_value();
            if !loss.is_finite() {
                return Err(Error::Training {
                    msg: "training loss diverged".into(),
                    epoch: Some(epoch),
                });
            }
            epoch_loss += loss;
            batches += 1;
            let mut grads = fwd.gradients()?;
            if let Some(max_norm) = cfg.grad_clip {
                clip_global_norm(&mut grads, max_norm);
            }
            adam_step(model, &grads, &mut adam, cfg).map_err(|e| match e {
                Error::Training { msg, .. } => Error::Training {
                    msg,
                    epoch: Some(epoch),
                },
                other => other,
            })?;
        }
        loss_curve.push(epoch_loss / batches as f64);

        if epoch % cfg.eval_every == 0 {
            last_val = evaluate(model, val_set)?;
            // strict improvement only: ties favor the earlier epoch
            if last_val > best_val {
                best_val = last_val;
                best_params = model.params.clone();
                evals_since_best = 0;
            } else {
                evals_since_best += 1;
            }
            val_acc_curve.push(last_val);
            if evals_since_best > cfg.patience {
                break;
            }
        } else {
            val_acc_curve.push(last_val);
        }
    }

    model.params = best_params;
    let test_accuracy = if test_set.is_empty() {
        f64::NAN
    } else {
        evaluate(model, test_set)?
    };
    Ok(RunResult {
        best_val_accuracy: best_val,
        test_accuracy,
        loss_curve,
        val_acc_curve,
        stopped_epoch,
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{AttentionKind, ModelConfig};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 4,
            embed_dim: 3,
            hidden_size: 4,
            num_classes: 2,
            num_layers: 1,
            use_ocg: false,
            use_attention: false,
            attention_kind: AttentionKind::Additive,
            dropout_rate: 0.0,
        }
    }

    #[test]
    fn cross_entropy_uniform_and_stability() {
        let l = cross_entropy(&[0.0; 4], 1).unwrap();
        assert!((l - libm::log(4.0)).abs() < 1e-12);
        let l = cross_entropy(&[100.0, 0.0], 0).unwrap();
        assert!(l.is_finite() && l < 1e-10);
        assert!(cross_entropy(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn cross_entropy_matches_direct_evaluation() {
        // direct: -ln(exp(x_l) / sum exp(x_j)) at high precision
        let logits = [0.3, -1.2, 2.5, 0.0];
        let denom: f64 = logits.iter().map(|&x| libm::exp(x)).sum();
        for label in 0..4 {
            let direct = -libm::log(libm::exp(logits[label]) / denom);
            let ours = cross_entropy(&logits, label).unwrap();
            assert!((direct - ours).abs() < 1e-10);
        }
    }

    #[test]
    fn adam_zero_gradient_zero_decay_is_identity() {
        let mut rng = Rng::new(1);
        let mut model = Model::init(tiny_config(), &mut rng).unwrap();
        let before = model.params.clone();
        let mut grads = GradientSet::default();
        for (n, p) in model.params.iter() {
            grads.insert(n.clone(), Matrix::zeros(p.rows(), p.cols()));
        }
        let mut st = AdamState::new(&model);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::distractor_defaults(0)
        };
        adam_step(&mut model, &grads, &mut st, &cfg).unwrap();
        assert_eq!(model.params, before);
    }

    #[test]
    fn first_adam_step_magnitude_is_lr_times_sign() {
        // closed form: with zero moments, m̂/√v̂ = sign(g) exactly on step 1
        let mut rng = Rng::new(2);
        let mut model = Model::init(tiny_config(), &mut rng).unwrap();
        let before = model.params.clone();
        let mut grads = GradientSet::default();
        for (n, p) in model.params.iter() {
            let mut g = Matrix::zeros(p.rows(), p.cols());
            for (k, x) in g.data_mut().iter_mut().enumerate() {
                *x = if k % 2 == 0 { 0.37 } else { -1.4 };
            }
            grads.insert(n.clone(), g);
        }
        let mut st = AdamState::new(&model);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::distractor_defaults(0)
        };
        adam_step(&mut model, &grads, &mut st, &cfg).unwrap();
        for (name, p) in model.params.iter() {
            let b = before.get(name).unwrap();
            for k in 0..p.len() {
                let delta = b.data()[k] - p.data()[k];
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                assert!(
                    (delta - cfg.lr * sign).abs() < cfg.lr * 1e-6,
                    "{name}[{k}]: delta {delta}"
                );
            }
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut rng = Rng::new(3);
        let mut model = Model::init(tiny_config(), &mut rng).unwrap();
        let mut grads = GradientSet::default();
        for (n, p) in model.params.iter() {
            grads.insert(n.clone(), Matrix::zeros(p.rows(), p.cols()));
        }
        grads
            .get("head.w")
            .map(|_| ())
            .expect("head.w should exist");
        let mut g = Matrix::zeros(2, 4);
        g.data_mut()[0] = f64::NAN;
        grads.insert("head.w".into(), g);
        let mut st = AdamState::new(&model);
        let cfg = TrainConfig::distractor_defaults(0);
        match adam_step(&mut model, &grads, &mut st, &cfg) {
            Err(Error::Training { msg, .. }) => assert!(msg.contains("head.w")),
            other => panic!("expected training error, got {other:?}"),
        }
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let mut grads = GradientSet::default();
        grads.insert("a".into(), Matrix::column(vec![3.0, 4.0]));
        let before = grads.get("a").unwrap().clone();
        clip_global_norm(&mut grads, 10.0);
        assert_eq!(grads.get("a").unwrap(), &before);
        clip_global_norm(&mut grads, 1.0);
        assert!((grads.global_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn evaluate_shift_invariance_and_tie_break() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        let a = [0.4, -0.3, 2.0];
        let shifted: Vec<f64> = a.iter().map(|x| x + 123.0).collect();
        assert_eq!(argmax(&a), argmax(&shifted));
    }

    fn toy_dataset() -> (Vec<Sample>, Vec<Sample>) {
        // token 0 repeated -> class 0, token 1 repeated -> class 1
        let mk = |tok: usize, label: usize| Sample {
            tokens: vec![tok; 6],
            label,
            trigger_position: None,
            distractor_positions: None,
        };
        let train: Vec<Sample> = (0..40).map(|k| mk(k % 2, k % 2)).collect();
        let val: Vec<Sample> = (0..10).map(|k| mk(k % 2, k % 2)).collect();
        (train, val)
    }

    #[test]
    fn separable_toy_reaches_perfect_validation() {
        let (train_set, val_set) = toy_dataset();
        let mut rng = Rng::new(4);
        let mut model = Model::init(tiny_config(), &mut rng).unwrap();
        let cfg = TrainConfig {
            max_epochs: 60,
            patience: 60,
            lr: 5e-3,
            ..TrainConfig::distractor_defaults(4)
        };
        let result = train(&mut model, &train_set, &val_set, &val_set, &cfg).unwrap();
        assert_eq!(result.best_val_accuracy, 1.0);
        assert_eq!(result.test_accuracy, 1.0);
    }

    #[test]
    fn patience_zero_stops_at_first_plateau() {
        let (train_set, val_set) = toy_dataset();
        let mut rng = Rng::new(5);
        let mut model = Model::init(tiny_config(), &mut rng).unwrap();
        let cfg = TrainConfig {
            patience: 0,
            max_epochs: 50,
            ..TrainConfig::distractor_defaults(5)
        };
        let result = train(&mut model, &train_set, &val_set, &val_set, &cfg).unwrap();
        // the toy task saturates at 1.0 quickly; the next non-improving
        // epoch must terminate the run
        assert!(result.stopped_epoch < 50);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let (train_set, val_set) = toy_dataset();
            let mut rng = Rng::new(6);
            let mut model = Model::init(tiny_config(), &mut rng).unwrap();
            let cfg = TrainConfig {
                max_epochs: 5,
                patience: 5,
                ..TrainConfig::distractor_defaults(6)
            };
            let r = train(&mut model, &train_set, &val_set, &val_set, &cfg).unwrap();
            (r, model.params)
        };
        let (r1, p1) = run();
        let (r2, p2) = run();
        assert_eq!(r1, r2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn loss_decreases_on_fixed_batch_for_all_variants() {
        use crate::cells::Variant;
        let spec = crate::tasks::DistractorSpec {
            seq_len: 12,
            trigger_window: (1, 4),
            num_distractors: 2,
            seed: 9,
            ..Default::default()
        };
        let batch = crate::tasks::gen_distractor(&spec, 8).unwrap();
        for variant in Variant::all() {
            let (ocg, att) = variant.flags();
            let cfg = ModelConfig {
                vocab_size: spec.vocab_size(),
                embed_dim: 6,
                hidden_size: 8,
                num_classes: 4,
                num_layers: 1,
                use_ocg: ocg,
                use_attention: att,
                attention_kind: AttentionKind::Additive,
                dropout_rate: 0.0,
            };
            let mut rng = Rng::new(10);
            let mut model = Model::init(cfg, &mut rng).unwrap();
            let tcfg = TrainConfig {
                weight_decay: 0.0,
                ..TrainConfig::distractor_defaults(10)
            };
            let mut adam = AdamState::new(&model);
            let first = batch_forward(&model, &batch, Mode::Eval, None, false)
                .unwrap()
                .loss_value();
            let mut last = first;
            for _ in 0..50 {
                let fwd = batch_forward(&model, &batch, Mode::Eval, None, false).unwrap();
                last = fwd.loss_value();
                let mut grads = fwd.gradients().unwrap();
                clip_global_norm(&mut grads, 5.0);
                adam_step(&mut model, &grads, &mut adam, &tcfg).unwrap();
            }
            assert!(
                last < first,
                "{}: loss {first} -> {last} did not decrease",
                variant.name()
            );
        }
    }
}
