//! Synthetic benchmark generators and their labeling oracles.
//!
//! Both tasks are pure functions of (spec, seed, sample index): sample k of
//! a dataset draws from `Rng::for_index(seed, k)`, so serial and parallel
//! generation produce identical bytes.
//!
//! Distractor task token layout: noise tokens occupy ids
//! `[0, noise_vocab_size)`, trigger tokens `[noise_vocab_size,
//! noise_vocab_size + num_classes)`. Trigger and noise ranges are disjoint
//! so the task is solvable by construction, not statistically.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub label: usize,
    /// 1-based position of the true trigger, when the task has one.
    pub trigger_position: Option<usize>,
    /// 1-based positions of the false triggers.
    pub distractor_positions: Option<Vec<usize>>,
}

pub type Dataset = Vec<Sample>;

// ---------------------------------------------------------------------------
// Distractor Signal Task
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistractorSpec {
    pub seq_len: usize,
    /// Inclusive 1-based window where the true trigger appears.
    pub trigger_window: (usize, usize),
    pub num_classes: usize,
    pub num_distractors: usize,
    pub noise_vocab_size: usize,
    pub seed: u64,
}

impl Default for DistractorSpec {
    fn default() -> Self {
        DistractorSpec {
            seq_len: 50,
            trigger_window: (1, 10),
            num_classes: 4,
            num_distractors: 3,
            noise_vocab_size: 8,
            seed: 0,
        }
    }
}

impl DistractorSpec {
    pub fn vocab_size(&self) -> usize {
        self.noise_vocab_size + self.num_classes
    }

    pub fn trigger_token(&self, class: usize) -> usize {
        self.noise_vocab_size + class
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.trigger_window;
        if lo == 0 || hi < lo || hi > self.seq_len {
            return Err(Error::Spec(format!(
                "trigger window [{lo},{hi}] not within [1,{}]",
                self.seq_len
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Spec("need at least 2 classes".into()));
        }
        if self.noise_vocab_size == 0 {
            return Err(Error::Spec("noise vocab must be non-empty".into()));
        }
        // distractors live strictly after the window
        if self.seq_len - hi < self.num_distractors {
            return Err(Error::Spec(format!(
                "{} distractors do not fit in the {} positions after the window",
                self.num_distractors,
                self.seq_len - hi
            )));
        }
        Ok(())
    }
}

fn distractor_sample(spec: &DistractorSpec, rng: &mut Rng, fixed_trigger: Option<usize>) -> Sample {
    let (lo, hi) = spec.trigger_window;
    let label = rng.below(spec.num_classes);
    let trigger_pos = match fixed_trigger {
        Some(t) => t,
        None => rng.range_inclusive(lo, hi),
    };
    // candidate distractor positions: strictly after the window, never on
    // the trigger itself
    let candidates: Vec<usize> = (hi + 1..=spec.seq_len)
        .filter(|&p| p != trigger_pos)
        .collect();
    let picks = rng.sample_distinct(candidates.len(), spec.num_distractors);
    let mut distractors: Vec<usize> = picks.iter().map(|&i| candidates[i]).collect();
    distractors.sort_unstable();

    let mut tokens: Vec<usize> = (0..spec.seq_len)
        .map(|_| rng.below(spec.noise_vocab_size))
        .collect();
    tokens[trigger_pos - 1] = spec.trigger_token(label);
    for &p in &distractors {
        // false trigger of any class other than the label
        let mut cls = rng.below(spec.num_classes - 1);
        if cls >= label {
            cls += 1;
        }
        tokens[p - 1] = spec.trigger_token(cls);
    }
    Sample {
        tokens,
        label,
        trigger_position: Some(trigger_pos),
        distractor_positions: Some(distractors),
    }
}

/// Generate `n` distractor-task samples, trigger uniform in the window.
pub fn gen_distractor(spec: &DistractorSpec, n: usize) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Spec("dataset size must be >= 1".into()));
    }
    Ok((0..n)
        .map(|k| distractor_sample(spec, &mut Rng::for_index(spec.seed, k as u64), None))
        .collect())
}

/// Same as `gen_distractor` but the trigger sits exactly at position `t`.
pub fn gen_distractor_shifted(spec: &DistractorSpec, t: usize, n: usize) -> Result<Dataset> {
    spec.validate()?;
    if t < 1 || t > spec.seq_len {
        return Err(Error::Spec(format!(
            "trigger position {t} outside [1,{}]",
            spec.seq_len
        )));
    }
    let (_, hi) = spec.trigger_window;
    let after = spec.seq_len - hi - if t > hi { 1 } else { 0 };
    if after < spec.num_distractors {
        return Err(Error::Spec(format!(
            "{} distractors do not fit once position {t} is reserved",
            spec.num_distractors
        )));
    }
    Ok((0..n)
        .map(|k| distractor_sample(spec, &mut Rng::for_index(spec.seed, k as u64), Some(t)))
        .collect())
}

/// Matched pairs for the retention check: identical noise and distractors,
/// with the trigger token replaced by a fresh noise token in the twin.
pub fn gen_distractor_paired(spec: &DistractorSpec, n: usize) -> Result<(Dataset, Dataset)> {
    let with = gen_distractor(spec, n)?;
    let without = with
        .iter()
        .enumerate()
        .map(|(k, s)| {
            // continue the sample's own stream so the replacement is
            // deterministic too
            let mut rng = Rng::for_index(spec.seed ^ 0x70616972, k as u64);
            let mut tokens = s.tokens.clone();
            let pos = s.trigger_position.unwrap();
            tokens[pos - 1] = rng.below(spec.noise_vocab_size);
            Sample {
                tokens,
                label: s.label,
                trigger_position: None,
                distractor_positions: s.distractor_positions.clone(),
            }
        })
        .collect();
    Ok((with, without))
}

// ---------------------------------------------------------------------------
// ListOps
// ---------------------------------------------------------------------------

pub const LISTOPS_NUM_CLASSES: usize = 10;
/// digits 0-9, MAX, MIN, MED, SM, '[', ']'
pub const LISTOPS_VOCAB: usize = 16;
pub const TOK_MAX: usize = 10;
pub const TOK_MIN: usize = 11;
pub const TOK_MED: usize = 12;
pub const TOK_SM: usize = 13;
pub const TOK_OPEN: usize = 14;
pub const TOK_CLOSE: usize = 15;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ListOpsSpec {
    pub max_depth: usize,
    pub max_args: usize,
    pub min_len: usize,
    /// Token-length cap; desk-scale sequences stay CPU-friendly.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ListOpsSpec {
    fn default() -> Self {
        ListOpsSpec {
            max_depth: 4,
            max_args: 4,
            min_len: 5,
            max_len: 128,
            seed: 0,
        }
    }
}

impl ListOpsSpec {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth == 0 || self.max_args < 2 {
            return Err(Error::Spec("need max_depth >= 1 and max_args >= 2".into()));
        }
        if self.min_len > self.max_len || self.max_len == 0 {
            return Err(Error::Spec(format!(
                "bad length bounds [{},{}]",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Expr {
    Digit(u8),
    Call(usize, Vec<Expr>), // operator token id, args
}

impl Expr {
    fn tokens(&self, out: &mut Vec<usize>) {
        match self {
            Expr::Digit(d) => out.push(*d as usize),
            Expr::Call(op, args) => {
                out.push(TOK_OPEN);
                out.push(*op);
                for a in args {
                    a.tokens(out);
                }
                out.push(TOK_CLOSE);
            }
        }
    }

    fn write(&self, out: &mut String) {
        match self {
            Expr::Digit(d) => out.push((b'0' + d) as char),
            Expr::Call(op, args) => {
                out.push('[');
                out.push_str(match *op {
                    TOK_MAX => "MAX",
                    TOK_MIN => "MIN",
                    TOK_MED => "MED",
                    _ => "SM",
                });
                for a in args {
                    out.push(' ');
                    a.write(out);
                }
                out.push(']');
            }
        }
    }
}

fn gen_expr(rng: &mut Rng, depth_left: usize, max_args: usize) -> Expr {
    if depth_left == 0 {
        return Expr::Digit(rng.below(10) as u8);
    }
    let op = TOK_MAX + rng.below(4);
    let n_args = rng.range_inclusive(2, max_args);
    let args = (0..n_args)
        .map(|_| {
            // half the children recurse while depth remains
            if depth_left > 1 && rng.bernoulli(0.5) {
                gen_expr(rng, depth_left - 1, max_args)
            } else {
                Expr::Digit(rng.below(10) as u8)
            }
        })
        .collect();
    Expr::Call(op, args)
}

/// Recursive-descent evaluator over the textual form; the labeling oracle.
///
/// Grammar: expr := digit | '[' OP (' ' expr)+ ']' with OP one of
/// MAX, MIN, MED (lower median on even arity), SM (sum mod 10).
pub fn eval_listops(expr: &str) -> Result<u8> {
    struct Parser<'a> {
        src: &'a [u8],
        pos: usize,
    }
    impl<'a> Parser<'a> {
        fn fail<T>(&self, msg: &str) -> Result<T> {
            Err(Error::Parse {
                msg: msg.into(),
                position: self.pos,
            })
        }
        fn peek(&self) -> Option<u8> {
            self.src.get(self.pos).copied()
        }
        fn skip_ws(&mut self) {
            while self.peek() == Some(b' ') {
                self.pos += 1;
            }
        }
        fn expr(&mut self) -> Result<u8> {
            self.skip_ws();
            match self.peek() {
                Some(d @ b'0'..=b'9') => {
                    self.pos += 1;
                    Ok(d - b'0')
                }
                Some(b'[') => {
                    self.pos += 1;
                    let op = self.op_name()?;
                    let mut args = Vec::new();
                    loop {
                        self.skip_ws();
                        match self.peek() {
                            Some(b']') => {
                                self.pos += 1;
                                break;
                            }
                            Some(_) => args.push(self.expr()?),
                            None => return self.fail("unterminated expression"),
                        }
                    }
                    if args.is_empty() {
                        return self.fail("operator with no arguments");
                    }
                    Ok(apply_op(op, &args))
                }
                Some(_) => self.fail("expected digit or '['"),
                None => self.fail("unexpected end of input"),
            }
        }
        fn op_name(&mut self) -> Result<usize> {
            for (name, tok) in [
                ("MAX", TOK_MAX),
                ("MIN", TOK_MIN),
                ("MED", TOK_MED),
                ("SM", TOK_SM),
            ] {
                if self.src[self.pos..].starts_with(name.as_bytes()) {
                    self.pos += name.len();
                    return Ok(tok);
                }
            }
            self.fail("expected MAX, MIN, MED or SM")
        }
    }
    let mut p = Parser {
        src: expr.as_bytes(),
        pos: 0,
    };
    let v = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return p.fail("trailing input");
    }
    Ok(v)
}

fn apply_op(op: usize, args: &[u8]) -> u8 {
    match op {
        TOK_MAX => *args.iter().max().unwrap(),
        TOK_MIN => *args.iter().min().unwrap(),
        TOK_MED => {
            let mut sorted = args.to_vec();
            sorted.sort_unstable();
            // lower median on even arity
            sorted[(sorted.len() - 1) / 2]
        }
        _ => (args.iter().map(|&d| d as u32).sum::<u32>() % 10) as u8,
    }
}

/// Independent stack-machine evaluator over the token encoding; the second
/// oracle for the dual-oracle property. Never calls the parser above.
pub fn eval_listops_tokens(tokens: &[usize]) -> Result<u8> {
    #[derive(Clone, Copy)]
    enum Item {
        Open,
        Op(usize),
        Val(u8),
    }
    let mut stack: Vec<Item> = Vec::new();
    for (pos, &tok) in tokens.iter().enumerate() {
        match tok {
            0..=9 => stack.push(Item::Val(tok as u8)),
            TOK_MAX | TOK_MIN | TOK_MED | TOK_SM => stack.push(Item::Op(tok)),
            TOK_OPEN => stack.push(Item::Open),
            TOK_CLOSE => {
                let mut args = Vec::new();
                let op = loop {
                    match stack.pop() {
                        Some(Item::Val(v)) => args.push(v),
                        Some(Item::Op(op)) => break op,
                        _ => {
                            return Err(Error::Parse {
                                msg: "']' without operator".into(),
                                position: pos,
                            })
                        }
                    }
                };
                match stack.pop() {
                    Some(Item::Open) => {}
                    _ => {
                        return Err(Error::Parse {
                            msg: "operator without '['".into(),
                            position: pos,
                        })
                    }
                }
                if args.is_empty() {
                    return Err(Error::Parse {
                        msg: "operator with no arguments".into(),
                        position: pos,
                    });
                }
                args.reverse();
                stack.push(Item::Val(apply_op(op, &args)));
            }
            other => {
                return Err(Error::Parse {
                    msg: format!("unknown token id {other}"),
                    position: pos,
                })
            }
        }
    }
    match (stack.pop(), stack.is_empty()) {
        (Some(Item::Val(v)), true) => Ok(v),
        _ => Err(Error::Parse {
            msg: "malformed expression".into(),
            position: tokens.len(),
        }),
    }
}

/// Textual form of a generated sample's tokens (for inspection and the
/// string-side oracle).
pub fn listops_to_string(tokens: &[usize]) -> String {
    let mut out = String::new();
    let mut prev_space = true;
    for &tok in tokens {
        match tok {
            TOK_OPEN => {
                if !prev_space {
                    out.push(' ');
                }
                out.push('[');
                prev_space = true;
            }
            TOK_CLOSE => {
                out.push(']');
                prev_space = false;
            }
            TOK_MAX | TOK_MIN | TOK_MED | TOK_SM => {
                out.push_str(match tok {
                    TOK_MAX => "MAX",
                    TOK_MIN => "MIN",
                    TOK_MED => "MED",
                    _ => "SM",
                });
                prev_space = false;
            }
            d => {
                if !prev_space {
                    out.push(' ');
                }
                out.push((b'0' + d as u8) as char);
                prev_space = false;
            }
        }
    }
    out
}

/// Generate `n` ListOps samples; every label is the oracle evaluation.
pub fn gen_listops(spec: &ListOpsSpec, n: usize) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Spec("dataset size must be >= 1".into()));
    }
    (0..n)
        .map(|k| {
            let mut rng = Rng::for_index(spec.seed, k as u64);
            let expr = loop {
                let e = gen_expr(&mut rng, spec.max_depth, spec.max_args);
                let mut toks = Vec::new();
                e.tokens(&mut toks);
                if (spec.min_len..=spec.max_len).contains(&toks.len()) {
                    break e;
                }
            };
            let mut tokens = Vec::new();
            expr.tokens(&mut tokens);
            let mut text = String::new();
            expr.write(&mut text);
            let label = eval_listops(&text)? as usize;
            Ok(Sample {
                tokens,
                label,
                trigger_position: None,
                distractor_positions: None,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

/// Deterministic shuffle-then-cut into disjoint, exhaustive splits.
pub fn split(
    dataset: &[Sample],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (a, b, c) = fractions;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 {
        return Err(Error::Spec("split fractions must be positive".into()));
    }
    if (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Spec(format!("fractions sum to {}", a + b + c)));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    let n_a = libm::round(a * n as f64) as usize;
    let n_b = libm::round(b * n as f64) as usize;
    if n_a == 0 || n_b == 0 || n_a + n_b >= n {
        return Err(Error::Spec(format!(
            "split of {n} samples leaves an empty part"
        )));
    }
    let take = |idx: &[usize]| idx.iter().map(|&i| dataset[i].clone()).collect::<Vec<_>>();
    Ok((
        take(&order[..n_a]),
        take(&order[n_a..n_a + n_b]),
        take(&order[n_a + n_b..]),
    ))
}
