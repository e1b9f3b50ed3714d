//! Diagnostics over trained (or untrained) models: gate-activation
//! statistics, memory-retention checks, attention focus, trigger
//! sensitivity, and hidden-state gradient profiles.
//!
//! Every function here is a pure reader; model parameters are never
//! mutated. Gate statistics are taken from the first recurrent layer (the
//! one that sees the raw input sequence) and aggregated per hidden unit
//! before averaging.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::cells::{Mode, Model};
use crate::error::{Error, Result};
use crate::grad::batch_forward;
use crate::matrix::Matrix;
use crate::rng::Rng;
use crate::tasks::{gen_distractor_shifted, Dataset, DistractorSpec, Sample};
use crate::train::evaluate;

/// Forget-gate activations of one sample: T x hidden, plus the sample's
/// trigger position when known.
#[derive(Debug, Clone)]
pub struct GateRecord {
    pub f: Matrix,
    pub trigger_position: Option<usize>,
}

/// Forward every sample and record its forget-gate activations.
pub fn collect_gate_records(model: &Model, dataset: &[Sample]) -> Result<Vec<GateRecord>> {
    dataset
        .iter()
        .map(|s| {
            let (_, trace) = model.forward(&s.tokens)?;
            let t_len = trace.f.len();
            let h = trace.f[0].len();
            let mut f = Matrix::zeros(t_len, h);
            for (t, gate) in trace.f.iter().enumerate() {
                for k in 0..h {
                    f.set(t, k, gate.data()[k]);
                }
            }
            Ok(GateRecord {
                f,
                trigger_position: s.trigger_position,
            })
        })
        .collect()
}

fn check_window(records: &[GateRecord], window: (usize, usize)) -> Result<()> {
    let (lo, hi) = window;
    if records.is_empty() {
        return Err(Error::Spec("no gate records".into()));
    }
    let t_len = records[0].f.rows();
    if lo == 0 || hi < lo || hi > t_len {
        return Err(Error::Spec(format!(
            "window [{lo},{hi}] not within [1,{t_len}]"
        )));
    }
    Ok(())
}

/// Mean over samples and hidden units of the per-unit variance of f_t
/// across the inclusive 1-based window.
pub fn gate_variance(records: &[GateRecord], window: (usize, usize)) -> Result<f64> {
    check_window(records, window)?;
    let (lo, hi) = window;
    let steps = hi - lo + 1;
    let mut total = 0.0;
    let mut count = 0usize;
    for r in records {
        for k in 0..r.f.cols() {
            // shift by the first value: variance is shift-invariant and a
            // constant signal comes out exactly zero
            let base = r.f.get(lo - 1, k);
            let mean: f64 =
                (lo..=hi).map(|t| r.f.get(t - 1, k) - base).sum::<f64>() / steps as f64;
            let var: f64 = (lo..=hi)
                .map(|t| {
                    let d = (r.f.get(t - 1, k) - base) - mean;
                    d * d
                })
                .sum::<f64>()
                / steps as f64;
            total += var;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Per-timestep (mean, std) of the forget gate over samples and units.
pub fn gate_timeline(records: &[GateRecord]) -> Result<Vec<(f64, f64)>> {
    if records.is_empty() {
        return Err(Error::Spec("no gate records".into()));
    }
    let t_len = records[0].f.rows();
    let mut out = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut vals = Vec::new();
        for r in records {
            for k in 0..r.f.cols() {
                vals.push(r.f.get(t, k));
            }
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        out.push((mean, libm::sqrt(var)));
    }
    Ok(out)
}

/// Outcome of the memory-retention premise check.
#[derive(Debug, Clone)]
pub struct HalfLifeReport {
    /// Mean post-window forget activation when the trigger is present.
    pub mean_with_trigger: f64,
    /// Same, on the matched twin with the trigger replaced by noise.
    pub mean_without_trigger: f64,
    pub difference: f64,
    /// One-sided sign-flip permutation p-value for difference > 0.
    pub p_value: f64,
    pub num_pairs: usize,
}

/// Compare post-window forget activation on matched with/without-trigger
/// pairs. `post_window` is the inclusive 1-based range to average over,
/// typically just after the trigger window.
pub fn half_life_check(
    model: &Model,
    with_trigger: &[Sample],
    without_trigger: &[Sample],
    post_window: (usize, usize),
    permutations: usize,
    perm_seed: u64,
) -> Result<HalfLifeReport> {
    if with_trigger.len() != without_trigger.len() || with_trigger.is_empty() {
        return Err(Error::Spec(
            "paired datasets must be non-empty and equal-length".into(),
        ));
    }
    for (a, b) in with_trigger.iter().zip(without_trigger) {
        if a.tokens.len() != b.tokens.len() {
            return Err(Error::Spec("paired samples differ in length".into()));
        }
    }
    let rec_with = collect_gate_records(model, with_trigger)?;
    let rec_without = collect_gate_records(model, without_trigger)?;
    check_window(&rec_with, post_window)?;
    let (lo, hi) = post_window;
    let mean_post = |r: &GateRecord| -> f64 {
        let mut total = 0.0;
        for t in lo..=hi {
            for k in 0..r.f.cols() {
                total += r.f.get(t - 1, k);
            }
        }
        total / ((hi - lo + 1) * r.f.cols()) as f64
    };
    let diffs: Vec<f64> = rec_with
        .iter()
        .zip(&rec_without)
        .map(|(a, b)| mean_post(a) - mean_post(b))
        .collect();
    let n = diffs.len() as f64;
    let observed = diffs.iter().sum::<f64>() / n;

    // sign-flip permutation null: under H0 the pair difference is symmetric
    let mut rng = Rng::new(perm_seed);
    let mut exceed = 0usize;
    for _ in 0..permutations {
        let permuted: f64 = diffs
            .iter()
            .map(|&d| if rng.bernoulli(0.5) { d } else { -d })
            .sum::<f64>()
            / n;
        if permuted >= observed {
            exceed += 1;
        }
    }
    let p_value = (exceed + 1) as f64 / (permutations + 1) as f64;

    let mean_with: f64 = rec_with.iter().map(mean_post).sum::<f64>() / n;
    let mean_without: f64 = rec_without.iter().map(mean_post).sum::<f64>() / n;
    Ok(HalfLifeReport {
        mean_with_trigger: mean_with,
        mean_without_trigger: mean_without,
        difference: observed,
        p_value,
        num_pairs: diffs.len(),
    })
}

/// Attention weights of a batch plus the aggregate trigger-zone mass.
#[derive(Debug, Clone)]
pub struct AttentionReport {
    /// One row per sample, length T, each summing to 1.
    pub alpha: Vec<Vec<f64>>,
    /// Mean attention mass on the 1-based steps `mass_window`.
    pub mass_on_window: f64,
    pub mass_window: (usize, usize),
}

pub fn attention_export(
    model: &Model,
    batch: &[Sample],
    mass_window: (usize, usize),
) -> Result<AttentionReport> {
    if !model.config.use_attention {
        return Err(Error::Config(
            "attention diagnostic on a model without attention".into(),
        ));
    }
    if batch.is_empty() {
        return Err(Error::Spec("empty batch".into()));
    }
    let (lo, hi) = mass_window;
    let mut alpha = Vec::with_capacity(batch.len());
    let mut mass_total = 0.0;
    for s in batch {
        let (_, trace) = model.forward(&s.tokens)?;
        let a = trace.alpha.expect("attention model produces alpha");
        let upper = hi.min(a.len());
        if lo >= 1 && lo <= upper {
            mass_total += a[lo - 1..upper].iter().sum::<f64>();
        }
        alpha.push(a);
    }
    Ok(AttentionReport {
        mass_on_window: mass_total / batch.len() as f64,
        alpha,
        mass_window,
    })
}

/// One evaluated cell of the trigger-position sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub position: usize,
    pub model_name: String,
    pub accuracy: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

/// Evaluate each model on shifted-trigger datasets at each position.
pub fn sensitivity_sweep(
    models: &[(String, &Model)],
    positions: &[usize],
    spec: &DistractorSpec,
    n_per_position: usize,
) -> Result<SweepResult> {
    if positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Spec("positions must be strictly increasing".into()));
    }
    let mut rows = Vec::new();
    for &pos in positions {
        let data: Dataset = gen_distractor_shifted(spec, pos, n_per_position)?;
        for (name, model) in models {
            let accuracy = evaluate(model, &data)?;
            rows.push(SweepRow {
                position: pos,
                model_name: name.clone(),
                accuracy,
                n_samples: n_per_position,
            });
        }
    }
    Ok(SweepResult { rows })
}

/// Mean over the batch of ||dLoss/dh_t||2, t = 1..T.
pub fn grad_profile(model: &Model, batch: &[Sample]) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::Spec("empty batch".into()));
    }
    let t_len = batch[0].tokens.len();
    if batch.iter().any(|s| s.tokens.len() != t_len) {
        return Err(Error::Spec(
            "gradient profile needs equal-length sequences".into(),
        ));
    }
    let mut acc = alloc::vec![0.0; t_len];
    for s in batch {
        let fwd = batch_forward(model, core::slice::from_ref(s), Mode::Eval, None, true)?;
        let grads = fwd.tape.backward(fwd.loss)?;
        let norms = fwd.tape.hidden_grad_norms(&grads)?;
        for (a, n) in acc.iter_mut().zip(norms) {
            *a += n;
        }
    }
    for a in acc.iter_mut() {
        *a /= batch.len() as f64;
    }
    Ok(acc)
}
