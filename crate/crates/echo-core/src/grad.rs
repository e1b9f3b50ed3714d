//! Batch loss construction and the finite-difference verification harness.
//!
//! `batch_forward` builds one tape for a whole batch: parameters are staged
//! once, each sample contributes a cross-entropy term, and the mean is the
//! scalar loss. `finite_diff_check` then compares `Tape::backward` against
//! central differences coordinate by coordinate; it is the independent
//! oracle the whole trainer rests on.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::cells::{forward_sequence, stage, Mode, Model, SampleForward, StagedModel};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{GradientSet, NodeId, Tape};
use crate::tasks::Sample;

pub struct BatchForward {
    pub tape: Tape,
    pub staged: StagedModel,
    pub loss: NodeId,
    pub samples: Vec<SampleForward>,
}

/// Mean cross-entropy over a batch on a fresh tape.
pub fn batch_forward(
    model: &Model,
    batch: &[Sample],
    mode: Mode,
    mut dropout_rng: Option<&mut Rng>,
    capture_hidden: bool,
) -> Result<BatchForward> {
    if batch.is_empty() {
        return Err(Error::Contract("batch_forward on an empty batch".into()));
    }
    let mut tape = Tape::new();
    let staged = stage(&mut tape, model);
    let mut samples = Vec::with_capacity(batch.len());
    let mut total: Option<NodeId> = None;
    for s in batch {
        let fwd = forward_sequence(
            &mut tape,
            &staged,
            &s.tokens,
            mode,
            dropout_rng.as_deref_mut(),
            capture_hidden,
        )?;
        let loss = tape.cross_entropy(fwd.logits, s.label)?;
        samples.push(fwd);
        total = Some(match total {
            Some(acc) => tape.add(acc, loss)?,
            None => loss,
        });
    }
    let loss = tape.scale(total.unwrap(), 1.0 / batch.len() as f64);
    Ok(BatchForward {
        tape,
        staged,
        loss,
        samples,
    })
}

impl BatchForward {
    pub fn loss_value(&self) -> f64 {
        self.tape.value(self.loss).get(0, 0)
    }

    /// Run backward and collect per-parameter gradients by name.
    pub fn gradients(&self) -> Result<GradientSet> {
        let grads = self.tape.backward(self.loss)?;
        let mut set = GradientSet::default();
        for (name, id) in self.staged.param_ids() {
            let g = match grads.of(id) {
                Some(g) => g.clone(),
                // parameter unused by this forward (e.g. unreachable path)
                None => {
                    let v = self.tape.value(id);
                    crate::matrix::Matrix::zeros(v.rows(), v.cols())
                }
            };
            set.insert(name.clone(), g);
        }
        if !set.all_finite() {
            return Err(Error::Training {
                msg: "non-finite gradient".into(),
                epoch: None,
            });
        }
        Ok(set)
    }
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    /// Frobenius norm of the analytic gradient, per parameter.
    pub grad_norms: Vec<(String, f64)>,
    pub num_params: usize,
}

fn rel_err(a: f64, b: f64) -> f64 {
    let denom = libm::fmax(libm::fmax(libm::fabs(a), libm::fabs(b)), 1e-8);
    libm::fabs(a - b) / denom
}

/// Compare backward() against central differences on every coordinate.
///
/// Runs in eval mode so the loss is a deterministic function of the
/// parameters. Intended for small models (<= ~10k parameters).
pub fn finite_diff_check(model: &Model, batch: &[Sample], epsilon: f64) -> Result<FiniteDiffReport> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::Contract(format!(
            "epsilon {epsilon} outside (0, 1e-2]"
        )));
    }
    let analytic = batch_forward(model, batch, Mode::Eval, None, false)?.gradients()?;

    let mut work = model.clone();
    let mut max_rel_err = 0.0;
    let mut worst_param = String::new();
    let mut worst_index = 0;
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.clone()).collect();
    let mut num_params = 0;

    for name in &names {
        let len = model.params.get(name).unwrap().len();
        num_params += len;
        for idx in 0..len {
            let orig = model.params.get(name).unwrap().data()[idx];
            let mut loss_at = |v: f64| -> Result<f64> {
                work.params.get_mut(name).unwrap().data_mut()[idx] = v;
                let loss = batch_forward(&work, batch, Mode::Eval, None, false)?.loss_value();
                if !loss.is_finite() {
                    return Err(Error::Training {
                        msg: format!("non-finite loss perturbing {name}[{idx}]"),
                        epoch: None,
                    });
                }
                Ok(loss)
            };
            let plus = loss_at(orig + epsilon)?;
            let minus = loss_at(orig - epsilon)?;
            work.params.get_mut(name).unwrap().data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let exact = analytic.get(name).unwrap().data()[idx];
            let e = rel_err(numeric, exact);
            if e > max_rel_err {
                max_rel_err = e;
                worst_param = name.clone();
                worst_index = idx;
            }
        }
    }

    let grad_norms = names
        .iter()
        .map(|n| (n.clone(), analytic.get(n).unwrap().frobenius_norm()))
        .collect();
    Ok(FiniteDiffReport {
        max_rel_err,
        worst_param,
        worst_index,
        grad_norms,
        num_params,
    })
}
