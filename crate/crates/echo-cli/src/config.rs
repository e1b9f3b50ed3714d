//! Effective experiment configuration: built-in defaults, overridden by a
//! flat key=value config file, overridden by command-line flags.
//!
//! Unknown file keys are hard errors — a typo must never silently fall
//! back to a default.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use echo_core::cells::{AttentionKind, ModelConfig, Variant};
use echo_core::tasks::{DistractorSpec, ListOpsSpec, LISTOPS_NUM_CLASSES, LISTOPS_VOCAB};
use echo_core::train::TrainConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Distractor,
    ListOps,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Distractor => "distractor",
            Task::ListOps => "listops",
        }
    }

    pub fn from_name(name: &str) -> Result<Task> {
        match name {
            "distractor" => Ok(Task::Distractor),
            "listops" => Ok(Task::ListOps),
            other => bail!("unknown task {other:?} (expected distractor or listops)"),
        }
    }
}

/// Everything a run needs, after precedence resolution.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub task: Task,
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub data_dir: PathBuf,

    // model
    pub embed_dim: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub dropout: f64,
    pub attention_kind: AttentionKind,

    // training
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub eval_every: usize,
    pub grad_clip: Option<f64>,

    // task generation
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub num_distractors: usize,
    pub noise_vocab: usize,
    pub listops_max_depth: usize,
    pub listops_max_args: usize,
    pub listops_max_len: usize,
    pub data_seed: u64,
}

impl Experiment {
    pub fn defaults(task: Task) -> Experiment {
        let base = Experiment {
            task,
            variant: Variant::Echo,
            seeds: vec![0],
            output_dir: PathBuf::from("runs"),
            data_dir: PathBuf::from("data"),
            embed_dim: 32,
            hidden_size: 64,
            num_layers: 2,
            dropout: 0.3,
            attention_kind: AttentionKind::Additive,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 5e-4,
            max_epochs: 120,
            patience: 15,
            eval_every: 1,
            grad_clip: Some(5.0),
            n_train: 10_000,
            n_val: 1_000,
            n_test: 1_000,
            seq_len: 50,
            num_classes: 4,
            num_distractors: 3,
            noise_vocab: 8,
            listops_max_depth: 4,
            listops_max_args: 4,
            listops_max_len: 128,
            data_seed: 0,
        };
        match task {
            Task::Distractor => base,
            Task::ListOps => Experiment {
                batch_size: 32,
                max_epochs: 80,
                num_classes: LISTOPS_NUM_CLASSES,
                ..base
            },
        }
    }

    /// Shrink to sizes that train in minutes on one CPU core while
    /// keeping the headline effects visible: one layer, a narrow state,
    /// a 2000/500 dataset, and a tighter epoch budget.
    pub fn apply_desk_scale(&mut self) {
        self.hidden_size = 24;
        self.embed_dim = 12;
        self.num_layers = 1;
        self.dropout = 0.0;
        self.n_train = 2000;
        self.n_val = 500;
        self.n_test = 500;
        // the epoch budget is where the variants separate: direct-readout
        // training grinds through a long plateau while the attention-pooled
        // models climb steadily from the start
        self.max_epochs = 12;
        self.patience = 12;
        match self.task {
            Task::Distractor => {}
            Task::ListOps => {
                self.n_train = 5000;
                self.n_val = 1000;
                self.n_test = 1000;
                self.listops_max_depth = 2;
                self.listops_max_len = 64;
            }
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self.task {
            Task::Distractor => self.noise_vocab + self.num_classes,
            Task::ListOps => LISTOPS_VOCAB,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let (use_ocg, use_attention) = self.variant.flags();
        ModelConfig {
            vocab_size: self.vocab_size(),
            embed_dim: self.embed_dim,
            hidden_size: self.hidden_size,
            num_classes: self.num_classes,
            num_layers: self.num_layers,
            use_ocg,
            use_attention,
            attention_kind: self.attention_kind,
            dropout_rate: self.dropout,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            max_epochs: self.max_epochs,
            patience: self.patience,
            eval_every: self.eval_every,
            grad_clip: self.grad_clip,
            seed,
        }
    }

    pub fn distractor_spec(&self) -> DistractorSpec {
        DistractorSpec {
            seq_len: self.seq_len,
            trigger_window: (1, 10),
            num_classes: self.num_classes,
            num_distractors: self.num_distractors,
            noise_vocab_size: self.noise_vocab,
            seed: self.data_seed,
        }
    }

    pub fn listops_spec(&self) -> ListOpsSpec {
        ListOpsSpec {
            max_depth: self.listops_max_depth,
            max_args: self.listops_max_args,
            min_len: 5,
            max_len: self.listops_max_len,
            seed: self.data_seed,
        }
    }

    /// Flat dump used for result.json and the config hash; keys match
    /// the config-file vocabulary.
    pub fn dump(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("schema_version", CONFIG_SCHEMA_VERSION.to_string());
        put("task", self.task.name().to_string());
        put("model", self.variant.name().to_string());
        put(
            "seeds",
            self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
        );
        put("output_dir", self.output_dir.display().to_string());
        put("data_dir", self.data_dir.display().to_string());
        put("embed_dim", self.embed_dim.to_string());
        put("hidden_size", self.hidden_size.to_string());
        put("num_layers", self.num_layers.to_string());
        put("dropout", self.dropout.to_string());
        put(
            "attention_kind",
            match self.attention_kind {
                AttentionKind::Additive => "additive".to_string(),
                AttentionKind::Dot => "dot".to_string(),
            },
        );
        put("batch_size", self.batch_size.to_string());
        put("lr", self.lr.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("max_epochs", self.max_epochs.to_string());
        put("patience", self.patience.to_string());
        put("eval_every", self.eval_every.to_string());
        put(
            "grad_clip",
            self.grad_clip.map_or("none".to_string(), |c| c.to_string()),
        );
        put("n_train", self.n_train.to_string());
        put("n_val", self.n_val.to_string());
        put("n_test", self.n_test.to_string());
        put("seq_len", self.seq_len.to_string());
        put("num_classes", self.num_classes.to_string());
        put("num_distractors", self.num_distractors.to_string());
        put("noise_vocab", self.noise_vocab.to_string());
        put("listops_max_depth", self.listops_max_depth.to_string());
        put("listops_max_args", self.listops_max_args.to_string());
        put("listops_max_len", self.listops_max_len.to_string());
        put("data_seed", self.data_seed.to_string());
        m
    }

    /// Apply one key=value override; shared by the file loader and any
    /// `--set` style flags.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse()
                .map_err(|e| anyhow::anyhow!("config key {key}: bad value {value:?} ({e})"))
        }
        match key {
            "schema_version" => {
                let v: u32 = p(key, value)?;
                if v != CONFIG_SCHEMA_VERSION {
                    bail!("config schema version {v} not supported (expected {CONFIG_SCHEMA_VERSION})");
                }
            }
            "task" => self.task = Task::from_name(value)?,
            "model" => {
                self.variant =
                    Variant::from_name(value).map_err(|e| anyhow::anyhow!("{e}"))?
            }
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .map(|s| p::<u64>(key, s.trim()))
                    .collect::<Result<Vec<_>>>()?;
                if self.seeds.is_empty() {
                    bail!("seeds must be non-empty");
                }
            }
            "output_dir" => self.output_dir = PathBuf::from(value),
            "data_dir" => self.data_dir = PathBuf::from(value),
            "embed_dim" => self.embed_dim = p(key, value)?,
            "hidden_size" => self.hidden_size = p(key, value)?,
            "num_layers" => self.num_layers = p(key, value)?,
            "dropout" => self.dropout = p(key, value)?,
            "attention_kind" => {
                self.attention_kind = match value {
                    "additive" => AttentionKind::Additive,
                    "dot" => AttentionKind::Dot,
                    other => bail!("unknown attention_kind {other:?}"),
                }
            }
            "batch_size" => self.batch_size = p(key, value)?,
            "lr" => self.lr = p(key, value)?,
            "weight_decay" => self.weight_decay = p(key, value)?,
            "max_epochs" => self.max_epochs = p(key, value)?,
            "patience" => self.patience = p(key, value)?,
            "eval_every" => self.eval_every = p(key, value)?,
            "grad_clip" => {
                self.grad_clip = if value == "none" {
                    None
                } else {
                    Some(p(key, value)?)
                }
            }
            "n_train" => self.n_train = p(key, value)?,
            "n_val" => self.n_val = p(key, value)?,
            "n_test" => self.n_test = p(key, value)?,
            "seq_len" => self.seq_len = p(key, value)?,
            "num_classes" => self.num_classes = p(key, value)?,
            "num_distractors" => self.num_distractors = p(key, value)?,
            "noise_vocab" => self.noise_vocab = p(key, value)?,
            "listops_max_depth" => self.listops_max_depth = p(key, value)?,
            "listops_max_args" => self.listops_max_args = p(key, value)?,
            "listops_max_len" => self.listops_max_len = p(key, value)?,
            "data_seed" => self.data_seed = p(key, value)?,
            other => bail!("unknown config key {other:?}"),
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("{}:{}: expected key=value", path.display(), i + 1))?;
            self.apply(key.trim(), value.trim())
                .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        }
        Ok(())
    }

    /// Serialize back into the config-file syntax; `load_file` of the
    /// output reproduces this experiment.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.dump() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_mapping_is_the_ablation_table() {
        let mut e = Experiment::defaults(Task::Distractor);
        for (name, flags) in [
            ("baseline", (false, false)),
            ("attentive", (false, true)),
            ("hybrid-ocg", (true, false)),
            ("echo", (true, true)),
        ] {
            e.apply("model", name).unwrap();
            let cfg = e.model_config();
            assert_eq!((cfg.use_ocg, cfg.use_attention), flags, "{name}");
        }
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let mut e = Experiment::defaults(Task::Distractor);
        assert!(e.apply("learning_rate", "0.01").is_err());
        assert!(e.apply("lr", "fast").is_err());
    }

    #[test]
    fn config_round_trips_through_file_syntax() {
        let mut e = Experiment::defaults(Task::Distractor);
        e.apply("hidden_size", "48").unwrap();
        e.apply("seeds", "3,5,7").unwrap();
        e.apply("grad_clip", "none").unwrap();
        let text = e.to_file_string();

        let dir = std::env::temp_dir().join(format!("echo-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.cfg");
        std::fs::write(&path, &text).unwrap();
        let mut back = Experiment::defaults(Task::Distractor);
        back.load_file(&path).unwrap();
        assert_eq!(e.dump(), back.dump());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn schema_version_mismatch_is_rejected() {
        let mut e = Experiment::defaults(Task::Distractor);
        assert!(e.apply("schema_version", "2").is_err());
        assert!(e.apply("schema_version", "1").is_ok());
    }

    #[test]
    fn defaults_match_the_reference_regime() {
        let d = Experiment::defaults(Task::Distractor);
        assert_eq!(d.batch_size, 16);
        assert_eq!(d.lr, 1e-3);
        assert_eq!(d.weight_decay, 5e-4);
        assert_eq!(d.patience, 15);
        assert_eq!(d.max_epochs, 120);
        let l = Experiment::defaults(Task::ListOps);
        assert_eq!(l.batch_size, 32);
        assert_eq!(l.max_epochs, 80);
    }
}
