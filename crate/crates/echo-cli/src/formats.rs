//! On-disk representations: dataset lines, manifests, weight binaries,
//! run results, and the diagnostic CSV schemas.
//!
//! All writers go through write-then-rename so an interrupted run never
//! leaves a truncated file behind.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use echo_core::cells::{AttentionKind, Model, ModelConfig};
use echo_core::matrix::Matrix;
use echo_core::tasks::Sample;
use echo_core::train::RunResult;
use serde::{Deserialize, Serialize};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const WEIGHTS_MAGIC: &[u8; 4] = b"ECHW";
pub const WEIGHTS_FORMAT_VERSION: u32 = 1;

/// Write `contents` to `path` atomically via a sibling temp file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)
            .with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// dataset lines

/// One sample per line: space-separated token ids, tab, label, tab,
/// optional key=value meta pairs.
pub fn sample_to_line(s: &Sample) -> String {
    let tokens: Vec<String> = s.tokens.iter().map(|t| t.to_string()).collect();
    let mut meta = Vec::new();
    if let Some(t) = s.trigger_position {
        meta.push(format!("trigger={t}"));
    }
    if let Some(ds) = &s.distractor_positions {
        let list: Vec<String> = ds.iter().map(|d| d.to_string()).collect();
        meta.push(format!("distractors={}", list.join(",")));
    }
    if meta.is_empty() {
        format!("{}\t{}", tokens.join(" "), s.label)
    } else {
        format!("{}\t{}\t{}", tokens.join(" "), s.label, meta.join(" "))
    }
}

pub fn sample_from_line(line: &str, lineno: usize) -> Result<Sample> {
    let mut parts = line.split('\t');
    let tokens_part = parts.next().unwrap_or("");
    let label_part = parts
        .next()
        .with_context(|| format!("line {lineno}: missing label field"))?;
    let tokens = tokens_part
        .split_whitespace()
        .map(|t| t.parse::<usize>().with_context(|| format!("line {lineno}: bad token {t:?}")))
        .collect::<Result<Vec<_>>>()?;
    if tokens.is_empty() {
        bail!("line {lineno}: empty token list");
    }
    let label: usize = label_part
        .trim()
        .parse()
        .with_context(|| format!("line {lineno}: bad label {label_part:?}"))?;
    let mut trigger_position = None;
    let mut distractor_positions = None;
    if let Some(meta) = parts.next() {
        for pair in meta.split_whitespace() {
            let (key, value) = pair
                .split_once('=')
                .with_context(|| format!("line {lineno}: malformed meta {pair:?}"))?;
            match key {
                "trigger" => trigger_position = Some(value.parse()?),
                "distractors" => {
                    let ds = value
                        .split(',')
                        .filter(|v| !v.is_empty())
                        .map(|v| v.parse::<usize>().map_err(Into::into))
                        .collect::<Result<Vec<_>>>()?;
                    distractor_positions = Some(ds);
                }
                other => bail!("line {lineno}: unknown meta key {other:?}"),
            }
        }
    }
    Ok(Sample { tokens, label, trigger_position, distractor_positions })
}

pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&sample_to_line(s));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading dataset {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| sample_from_line(l, i + 1))
        .collect()
}

/// Sidecar describing a generated dataset directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format_version: u32,
    pub task: String,
    pub seed: u64,
    /// Generator settings, flattened to strings so the manifest stays
    /// stable as task specs grow fields.
    pub spec: std::collections::BTreeMap<String, String>,
    pub counts: ManifestCounts,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)?;
    write_atomic(path, json.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading manifest {}", path.display()))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        bail!(
            "dataset format version {} not supported (expected {})",
            manifest.format_version,
            DATASET_FORMAT_VERSION
        );
    }
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// weights binary

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            bail!("weight file truncated at byte {}", self.pos);
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Magic, format version, full config block, then per-parameter records
/// (name length, name bytes, rows, cols, row-major f64 little-endian).
pub fn write_weights(path: &Path, model: &Model) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHTS_MAGIC);
    push_u32(&mut buf, WEIGHTS_FORMAT_VERSION);

    let c = &model.config;
    push_u64(&mut buf, c.vocab_size as u64);
    push_u64(&mut buf, c.embed_dim as u64);
    push_u64(&mut buf, c.hidden_size as u64);
    push_u64(&mut buf, c.num_classes as u64);
    push_u64(&mut buf, c.num_layers as u64);
    buf.push(c.use_ocg as u8);
    buf.push(c.use_attention as u8);
    buf.push(match c.attention_kind {
        AttentionKind::Additive => 0,
        AttentionKind::Dot => 1,
    });
    buf.extend_from_slice(&c.dropout_rate.to_le_bytes());

    push_u32(&mut buf, model.params.len() as u32);
    for (name, m) in model.params.iter() {
        push_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        push_u64(&mut buf, m.rows() as u64);
        push_u64(&mut buf, m.cols() as u64);
        for &v in m.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &buf)
}

pub fn read_weights(path: &Path) -> Result<Model> {
    let data = fs::read(path).with_context(|| format!("reading weights {}", path.display()))?;
    let mut r = Reader { data: &data, pos: 0 };
    if r.take(4)? != WEIGHTS_MAGIC {
        bail!("{} is not a weight file (bad magic)", path.display());
    }
    let version = r.u32()?;
    if version != WEIGHTS_FORMAT_VERSION {
        bail!("weight format version {version} not supported");
    }
    let vocab_size = r.u64()? as usize;
    let embed_dim = r.u64()? as usize;
    let hidden_size = r.u64()? as usize;
    let num_classes = r.u64()? as usize;
    let num_layers = r.u64()? as usize;
    let use_ocg = r.take(1)?[0] != 0;
    let use_attention = r.take(1)?[0] != 0;
    let attention_kind = match r.take(1)?[0] {
        0 => AttentionKind::Additive,
        1 => AttentionKind::Dot,
        k => bail!("unknown attention kind tag {k}"),
    };
    let dropout_rate = r.f64()?;
    let config = ModelConfig {
        vocab_size,
        embed_dim,
        hidden_size,
        num_classes,
        num_layers,
        use_ocg,
        use_attention,
        attention_kind,
        dropout_rate,
    };
    config.validate().map_err(|e| anyhow::anyhow!("{e}"))?;

    // rebuild with the recorded shapes, then overwrite every value so
    // the parameter ordering matches the writer exactly
    let mut rng = echo_core::rng::Rng::new(0);
    let mut model =
        Model::init(config, &mut rng).map_err(|e| anyhow::anyhow!("{e}"))?;
    let n_params = r.u32()? as usize;
    if n_params != model.params.len() {
        bail!(
            "weight file has {n_params} parameters, config implies {}",
            model.params.len()
        );
    }
    for _ in 0..n_params {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)?.to_string();
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            values.push(r.f64()?);
        }
        let slot = model
            .params
            .get_mut(&name)
            .with_context(|| format!("unknown parameter {name:?} in weight file"))?;
        if slot.shape() != (rows, cols) {
            bail!(
                "parameter {name:?} has shape {rows}x{cols}, expected {}x{}",
                slot.shape().0,
                slot.shape().1
            );
        }
        *slot = Matrix::from_vec(rows, cols, values);
    }
    if r.pos != data.len() {
        bail!("{} bytes of trailing garbage in weight file", data.len() - r.pos);
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// run results

/// result.json contents: the run outcome plus the effective configuration
/// that produced it, so any recorded invocation can be replayed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultDoc {
    pub task: String,
    pub model: String,
    pub seed: u64,
    pub best_val_accuracy: f64,
    pub test_accuracy: f64,
    pub stopped_epoch: usize,
    pub loss_curve: Vec<f64>,
    pub val_acc_curve: Vec<f64>,
    pub wall_time_secs: f64,
    /// Flat dump of every effective setting (flags > file > defaults).
    pub effective_config: std::collections::BTreeMap<String, String>,
    pub config_hash: String,
}

/// FNV-1a over the canonical key=value dump; cheap fingerprint for
/// spotting config drift between runs.
pub fn config_hash(entries: &std::collections::BTreeMap<String, String>) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for (k, v) in entries {
        for b in k.bytes().chain([b'='].into_iter()).chain(v.bytes()).chain([b'\n']) {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    format!("{h:016x}")
}

pub fn result_doc(
    task: &str,
    model: &str,
    run: &RunResult,
    wall_time_secs: f64,
    effective_config: std::collections::BTreeMap<String, String>,
) -> ResultDoc {
    let config_hash = config_hash(&effective_config);
    ResultDoc {
        task: task.to_string(),
        model: model.to_string(),
        seed: run.seed,
        best_val_accuracy: run.best_val_accuracy,
        test_accuracy: run.test_accuracy,
        stopped_epoch: run.stopped_epoch,
        loss_curve: run.loss_curve.clone(),
        val_acc_curve: run.val_acc_curve.clone(),
        wall_time_secs,
        effective_config,
        config_hash,
    }
}

pub fn write_result(path: &Path, doc: &ResultDoc) -> Result<()> {
    let json = serde_json::to_string_pretty(doc)?;
    write_atomic(path, json.as_bytes())
}

pub fn read_result(path: &Path) -> Result<ResultDoc> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading result {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_curves(path: &Path, run: &RunResult) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_acc\n");
    for (i, (loss, acc)) in run.loss_curve.iter().zip(&run.val_acc_curve).enumerate() {
        out.push_str(&format!("{},{},{}\n", i + 1, loss, acc));
    }
    write_atomic(path, out.as_bytes())
}

// ---------------------------------------------------------------------------
// diagnostic CSVs

pub fn write_gate_timeline(
    path: &Path,
    timelines: &[(String, Vec<(f64, f64)>)],
) -> Result<()> {
    let mut out = String::from("t,mean_f,std_f,model\n");
    for (model, timeline) in timelines {
        for (t, (mean, std)) in timeline.iter().enumerate() {
            out.push_str(&format!("{},{},{},{}\n", t + 1, mean, std, model));
        }
    }
    write_atomic(path, out.as_bytes())
}

pub fn write_attention_csv(path: &Path, alpha: &[Vec<f64>]) -> Result<()> {
    let mut out = String::from("sample_id,t,alpha\n");
    for (sid, row) in alpha.iter().enumerate() {
        for (t, a) in row.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", sid, t + 1, a));
        }
    }
    write_atomic(path, out.as_bytes())
}

pub fn write_sweep_csv(path: &Path, sweep: &echo_core::diag::SweepResult) -> Result<()> {
    let mut out = String::from("position,model,accuracy,n_samples\n");
    for row in &sweep.rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.position, row.model_name, row.accuracy, row.n_samples
        ));
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_sweep_csv(path: &Path) -> Result<echo_core::diag::SweepResult> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            bail!("sweep.csv line {}: expected 4 fields", i + 1);
        }
        rows.push(echo_core::diag::SweepRow {
            position: fields[0].parse()?,
            model_name: fields[1].to_string(),
            accuracy: fields[2].parse()?,
            n_samples: fields[3].parse()?,
        });
    }
    Ok(echo_core::diag::SweepResult { rows })
}

pub fn write_grad_profile(path: &Path, profiles: &[(String, Vec<f64>)]) -> Result<()> {
    let mut out = String::from("t,grad_norm,model\n");
    for (model, profile) in profiles {
        for (t, norm) in profile.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", t + 1, norm, model));
        }
    }
    write_atomic(path, out.as_bytes())
}
