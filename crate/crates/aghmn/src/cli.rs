//! Run configuration and the command implementations behind the `aghmn`
//! binary.
//!
//! Configs are flat `key = value` text files. `--print-config` echoes the
//! resolved configuration in the same format, and that echo re-parses to an
//! equal configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{
    generate_synthetic, load_conversations, load_embeddings, random_embeddings, save_conversations,
    build_vocab, Conversation,
};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::model::{Fusion, Model, ModelConfig, Reader, Summarizer};
use crate::train::{evaluate, fit, MetricsReport, TrainConfig};

/// Everything one experiment needs: model variant, dimensions, training
/// hyperparameters, corpus paths, labels and the seed.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub reader: Reader,
    pub fusion: Fusion,
    pub summarizer: Summarizer,
    pub d_w: usize,
    pub d1: usize,
    pub k: usize,
    pub dropout: f64,
    pub lr0: f64,
    pub clip_norm: f64,
    pub decay: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub min_freq: usize,
    pub labels: Vec<String>,
    pub train_path: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub embeddings_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl RunConfig {
    /// Long-conversation profile: context window sized for slow-moving
    /// dialogues.
    pub fn default_long() -> Self {
        RunConfig {
            reader: Reader::Bigru,
            fusion: Fusion::Bif,
            summarizer: Summarizer::Agru,
            d_w: 300,
            d1: 100,
            k: 40,
            dropout: 0.3,
            lr0: 5e-4,
            clip_norm: 5.0,
            decay: 0.95,
            patience: 10,
            max_epochs: 100,
            min_freq: 1,
            labels: Vec::new(),
            train_path: None,
            val_path: None,
            test_path: None,
            embeddings_path: None,
            out_dir: PathBuf::from("runs"),
            seed: 42,
        }
    }

    /// Short-conversation profile: identical except for a small context
    /// window.
    pub fn default_short() -> Self {
        RunConfig {
            k: 10,
            ..RunConfig::default_long()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_w: self.d_w,
            d1: self.d1,
            k: self.k,
            n_classes: self.labels.len(),
            reader: self.reader,
            fusion: self.fusion,
            summarizer: self.summarizer,
            dropout_p: self.dropout,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr0: self.lr0,
            clip_norm: self.clip_norm,
            decay: self.decay,
            patience: self.patience,
            max_epochs: self.max_epochs,
            seed,
        }
    }

    pub fn parse_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse_str(&text)
    }

    /// Parses `key = value` lines. `#` starts a comment. The `profile` key
    /// (`long` or `short`) picks the default context window when `k` is not
    /// given explicitly.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default_long();
        let mut k_explicit = false;
        let mut profile: Option<String> = None;
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}", line_no + 1), format!("expected key=value, got `{line}`"))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |msg: String| Error::config(key, msg);
            match key {
                "reader" => cfg.reader = value.parse().map_err(|e| bad(format!("{e}")))?,
                "fusion" => cfg.fusion = value.parse().map_err(|e| bad(format!("{e}")))?,
                "summarizer" => cfg.summarizer = value.parse().map_err(|e| bad(format!("{e}")))?,
                "d_w" => cfg.d_w = parse_num(key, value)?,
                "d1" => cfg.d1 = parse_num(key, value)?,
                "k" => {
                    cfg.k = parse_num(key, value)?;
                    k_explicit = true;
                }
                "dropout" => cfg.dropout = parse_num(key, value)?,
                "lr0" => cfg.lr0 = parse_num(key, value)?,
                "clip_norm" => cfg.clip_norm = parse_num(key, value)?,
                "decay" => cfg.decay = parse_num(key, value)?,
                "patience" => cfg.patience = parse_num(key, value)?,
                "max_epochs" => cfg.max_epochs = parse_num(key, value)?,
                "min_freq" => cfg.min_freq = parse_num(key, value)?,
                "seed" => cfg.seed = parse_num(key, value)?,
                "labels" => {
                    cfg.labels = value
                        .split(',')
                        .map(|l| l.trim().to_string())
                        .filter(|l| !l.is_empty())
                        .collect()
                }
                "train_path" => cfg.train_path = Some(PathBuf::from(value)),
                "val_path" => cfg.val_path = Some(PathBuf::from(value)),
                "test_path" => cfg.test_path = Some(PathBuf::from(value)),
                "embeddings_path" => cfg.embeddings_path = Some(PathBuf::from(value)),
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                "profile" => profile = Some(value.to_string()),
                other => return Err(Error::config(other, "unknown configuration key".to_string())),
            }
        }
        if let Some(profile) = profile {
            if !k_explicit {
                cfg.k = match profile.as_str() {
                    "long" => 40,
                    "short" => 10,
                    other => {
                        return Err(Error::config("profile", format!("expected long or short, got `{other}`")))
                    }
                };
            }
        }
        Ok(cfg)
    }

    /// Canonical `key = value` echo; re-parses to an equal configuration.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("reader", self.reader.to_string());
        put("fusion", self.fusion.to_string());
        put("summarizer", self.summarizer.to_string());
        put("d_w", self.d_w.to_string());
        put("d1", self.d1.to_string());
        put("k", self.k.to_string());
        put("dropout", self.dropout.to_string());
        put("lr0", self.lr0.to_string());
        put("clip_norm", self.clip_norm.to_string());
        put("decay", self.decay.to_string());
        put("patience", self.patience.to_string());
        put("max_epochs", self.max_epochs.to_string());
        put("min_freq", self.min_freq.to_string());
        put("seed", self.seed.to_string());
        if !self.labels.is_empty() {
            put("labels", self.labels.join(","));
        }
        for (key, path) in [
            ("train_path", &self.train_path),
            ("val_path", &self.val_path),
            ("test_path", &self.test_path),
            ("embeddings_path", &self.embeddings_path),
        ] {
            if let Some(path) = path {
                put(key, path.display().to_string());
            }
        }
        put("out_dir", self.out_dir.display().to_string());
        out
    }

    /// Field-level validation for training runs.
    pub fn validate_for_train(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::config("labels", "labels list must be nonempty".to_string()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for label in &self.labels {
            if !seen.insert(label) {
                return Err(Error::config("labels", format!("duplicate label `{label}`")));
            }
        }
        let train_path = self
            .train_path
            .as_ref()
            .ok_or_else(|| Error::config("train_path", "required for training".to_string()))?;
        for (field, path) in [
            ("train_path", Some(train_path)),
            ("val_path", self.val_path.as_ref()),
            ("test_path", self.test_path.as_ref()),
            ("embeddings_path", self.embeddings_path.as_ref()),
        ] {
            if let Some(path) = path {
                if !path.exists() {
                    return Err(Error::config(field, format!("path `{}` does not exist", path.display())));
                }
            }
        }
        self.model_config().validate().map_err(|e| Error::config("model", e.to_string()))?;
        self.train_config(self.seed)
            .validate()
            .map_err(|e| Error::config("training", e.to_string()))?;
        if self.min_freq == 0 {
            return Err(Error::config("min_freq", "must be at least 1".to_string()));
        }
        Ok(())
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

// ── Training pipeline ────────────────────────────────────────────────

pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub best_epoch: usize,
    pub best_val_mf1: f64,
    pub test_report: Option<MetricsReport>,
}

/// Loads corpora, builds the model, fits it, and writes the checkpoint,
/// training log and optional test report. `tag` suffixes the artifact file
/// stems so repeated runs do not collide.
pub fn train_once(cfg: &RunConfig, seed: u64, tag: &str) -> Result<TrainOutcome> {
    let train_path = cfg
        .train_path
        .as_ref()
        .ok_or_else(|| Error::config("train_path", "required for training".to_string()))?;
    let all_train = load_conversations(train_path, &cfg.labels)?;
    if all_train.is_empty() {
        return Err(Error::config("train_path", "training corpus is empty".to_string()));
    }

    // Use the provided validation split, or carve a seeded 80:20 split out
    // of the training conversations.
    let (train_set, val_set): (Vec<Conversation>, Vec<Conversation>) = match &cfg.val_path {
        Some(path) => (all_train, load_conversations(path, &cfg.labels)?),
        None => {
            let mut order: Vec<usize> = (0..all_train.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            order.shuffle(&mut rng);
            let cut = (all_train.len() * 4 / 5).max(1);
            let train: Vec<Conversation> =
                order[..cut].iter().map(|&i| all_train[i].clone()).collect();
            let val: Vec<Conversation> = if cut == all_train.len() {
                train.clone()
            } else {
                order[cut..].iter().map(|&i| all_train[i].clone()).collect()
            };
            (train, val)
        }
    };

    let vocab = build_vocab(&train_set, cfg.min_freq);
    let table = match &cfg.embeddings_path {
        Some(path) => load_embeddings(path, &vocab, cfg.d_w, seed)?,
        None => random_embeddings(&vocab, cfg.d_w, seed),
    };
    if cfg.embeddings_path.is_some() {
        println!("embedding coverage: {:.1}% pretrained", table.coverage() * 100.0);
    }

    let mut model = Model::new(cfg.model_config(), vocab, table.matrix, seed)?;
    let result = fit(&mut model, &train_set, &val_set, &cfg.train_config(seed))?;
    model.params = result.best_params.clone();

    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(cfg.out_dir.display().to_string(), e))?;
    let log_path = cfg.out_dir.join(format!("train_log{tag}.jsonl"));
    let mut log_text = String::new();
    for record in &result.log {
        log_text.push_str(&serde_json::to_string(record).expect("log record serializes"));
        log_text.push('\n');
    }
    fs::write(&log_path, log_text).map_err(|e| Error::io(log_path.display().to_string(), e))?;

    let checkpoint_path = cfg.out_dir.join(format!("checkpoint{tag}.json"));
    save_checkpoint(&checkpoint_path, &model, &cfg.labels)?;

    let test_report = match &cfg.test_path {
        Some(path) => {
            let test_set = load_conversations(path, &cfg.labels)?;
            let report = evaluate(&model, &test_set)?;
            let report_path = cfg.out_dir.join(format!("test_report{tag}.json"));
            fs::write(&report_path, serde_json::to_string(&report).expect("report serializes"))
                .map_err(|e| Error::io(report_path.display().to_string(), e))?;
            Some(report)
        }
        None => None,
    };

    Ok(TrainOutcome {
        checkpoint_path,
        log_path,
        best_epoch: result.best_epoch,
        best_val_mf1: result.best_val_mf1,
        test_report,
    })
}

#[derive(Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub mean_acc: f64,
    pub mean_f1: f64,
    pub mean_mf1: f64,
}

pub fn cmd_train(cfg: &RunConfig, repeat: usize) -> Result<()> {
    cfg.validate_for_train()?;
    if repeat <= 1 {
        let outcome = train_once(cfg, cfg.seed, "")?;
        println!(
            "best epoch {} (val mF1 {:.4}); checkpoint at {}",
            outcome.best_epoch,
            outcome.best_val_mf1,
            outcome.checkpoint_path.display()
        );
        if let Some(report) = outcome.test_report {
            println!("test metrics:");
            print!("{}", report.format_table(&cfg.labels));
        }
        return Ok(());
    }

    let mut reports = Vec::new();
    let mut seeds = Vec::new();
    for i in 0..repeat {
        let seed = cfg.seed + i as u64;
        let outcome = train_once(cfg, seed, &format!("_seed{seed}"))?;
        println!(
            "seed {seed}: best epoch {} (val mF1 {:.4})",
            outcome.best_epoch, outcome.best_val_mf1
        );
        if let Some(report) = outcome.test_report {
            reports.push(report);
        }
        seeds.push(seed);
    }
    if !reports.is_empty() {
        let n = reports.len() as f64;
        let aggregate = AggregateReport {
            runs: reports.len(),
            seeds,
            mean_acc: reports.iter().map(|r| r.weighted_acc).sum::<f64>() / n,
            mean_f1: reports.iter().map(|r| r.weighted_f1).sum::<f64>() / n,
            mean_mf1: reports.iter().map(|r| r.macro_f1).sum::<f64>() / n,
        };
        let path = cfg.out_dir.join("aggregate_report.json");
        fs::write(&path, serde_json::to_string(&aggregate).expect("aggregate serializes"))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        println!(
            "mean over {} runs: Acc {:.2} F1 {:.2} mF1 {:.2}",
            aggregate.runs,
            aggregate.mean_acc * 100.0,
            aggregate.mean_f1 * 100.0,
            aggregate.mean_mf1 * 100.0
        );
    }
    Ok(())
}

pub fn cmd_eval(checkpoint: &Path, corpus: &Path, out_file: Option<&Path>) -> Result<()> {
    let (model, labels) = load_checkpoint(checkpoint)?;
    let dataset = load_conversations(corpus, &labels).map_err(|e| match e {
        Error::Parse { line, msg } if msg.contains("unknown label") => {
            Error::Mismatch(format!("corpus line {line}: {msg} (checkpoint labels: {})", labels.join(",")))
        }
        other => other,
    })?;
    let report = evaluate(&model, &dataset)?;
    print!("{}", report.format_table(&labels));
    if let Some(path) = out_file {
        fs::write(path, serde_json::to_string(&report).expect("report serializes"))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// One exported attention record per utterance.
#[derive(Serialize, Deserialize)]
pub struct AttentionRecord {
    pub conversation_id: String,
    pub t: usize,
    pub speaker: String,
    pub gold: String,
    pub pred: String,
    pub probs: Vec<f64>,
    pub weights: Vec<f64>,
}

pub fn cmd_export_attention(checkpoint: &Path, corpus: &Path, out_file: &Path) -> Result<()> {
    let (model, labels) = load_checkpoint(checkpoint)?;
    let dataset = load_conversations(corpus, &labels)?;
    let mut out = String::new();
    let mut count = 0usize;
    for conv in &dataset {
        let traces = model.run_conversation(conv)?;
        for trace in traces {
            let record = AttentionRecord {
                conversation_id: conv.id.clone(),
                t: trace.t,
                speaker: conv.utterances[trace.t - 1].speaker.clone(),
                gold: labels[trace.gold].clone(),
                pred: labels[trace.pred].clone(),
                probs: trace.probs,
                weights: trace.weights,
            };
            out.push_str(&serde_json::to_string(&record).expect("record serializes"));
            out.push('\n');
            count += 1;
        }
    }
    fs::write(out_file, out).map_err(|e| Error::io(out_file.display().to_string(), e))?;
    println!("wrote {count} attention records to {}", out_file.display());
    Ok(())
}

pub fn cmd_sweep_k(cfg: &RunConfig, ks: &[usize]) -> Result<()> {
    if ks.is_empty() {
        return Err(Error::config("k", "sweep needs at least one value".to_string()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for &k in ks {
        if k == 0 {
            return Err(Error::config("k", "sweep values must be positive".to_string()));
        }
        if !seen.insert(k) {
            return Err(Error::config("k", format!("duplicate value {k}")));
        }
    }
    cfg.validate_for_train()?;
    if cfg.test_path.is_none() {
        return Err(Error::config("test_path", "required for sweep-k".to_string()));
    }

    let mut rows = Vec::new();
    for &k in ks {
        let mut run_cfg = cfg.clone();
        run_cfg.k = k;
        let outcome = train_once(&run_cfg, cfg.seed, &format!("_k{k}"))?;
        let report = outcome.test_report.expect("test_path checked above");
        println!(
            "k={k}: Acc {:.2} F1 {:.2} mF1 {:.2}",
            report.weighted_acc * 100.0,
            report.weighted_f1 * 100.0,
            report.macro_f1 * 100.0
        );
        rows.push((k, report));
    }

    let mut csv = String::from("k,acc,f1,mf1\n");
    for (k, report) in &rows {
        let _ = writeln!(
            csv,
            "{k},{:.6},{:.6},{:.6}",
            report.weighted_acc, report.weighted_f1, report.macro_f1
        );
    }
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(cfg.out_dir.display().to_string(), e))?;
    let path = cfg.out_dir.join("sweep_k.csv");
    fs::write(&path, csv).map_err(|e| Error::io(path.display().to_string(), e))?;
    println!("sweep table written to {}", path.display());
    Ok(())
}

pub fn cmd_grad_check(eps: f64) -> Result<()> {
    let rows = gradcheck::run_all(eps)?;
    println!("{:<24}{:>16}  {:<24}{:>8}", "variant", "worst-rel-err", "worst-param", "status");
    let mut failures = Vec::new();
    for row in &rows {
        println!(
            "{:<24}{:>16.3e}  {:<24}{:>8}",
            row.variant_name(),
            row.worst_rel_err,
            row.worst_param,
            if row.pass { "PASS" } else { "FAIL" }
        );
        if !row.pass {
            failures.push(format!("{} at {}", row.variant_name(), row.worst_param));
        }
    }
    if failures.is_empty() {
        println!("all {} variants pass at tolerance {:.0e}", rows.len(), gradcheck::GRAD_CHECK_TOLERANCE);
        Ok(())
    } else {
        Err(Error::contract(format!("gradient check failed: {}", failures.join("; "))))
    }
}

pub fn cmd_gen_synthetic(
    n: usize,
    classes: usize,
    carry: f64,
    len_range: (usize, usize),
    seed: u64,
    out_file: &Path,
) -> Result<()> {
    let (conversations, spec) = generate_synthetic(n, len_range, classes, carry, seed)?;
    save_conversations(out_file, &conversations, &spec.labels)?;
    let sidecar = PathBuf::from(format!("{}.spec.json", out_file.display()));
    fs::write(&sidecar, serde_json::to_string_pretty(&spec).expect("spec serializes"))
        .map_err(|e| Error::io(sidecar.display().to_string(), e))?;
    println!(
        "wrote {} conversations ({} utterances, {} carried) to {}",
        spec.n_conversations,
        spec.n_utterances,
        spec.carried_count,
        out_file.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_published_hyperparameters() {
        let long = RunConfig::default_long();
        assert_eq!(long.d1, 100);
        assert_eq!(long.d_w, 300);
        assert_eq!(long.k, 40);
        assert_eq!(long.lr0, 5e-4);
        assert_eq!(long.clip_norm, 5.0);
        assert_eq!(long.dropout, 0.3);
        assert_eq!(long.decay, 0.95);
        assert_eq!(long.patience, 10);
        let short = RunConfig::default_short();
        assert_eq!(short.k, 10);
        assert_eq!(short.d1, 100);
    }

    #[test]
    fn config_round_trips_through_echo() {
        let text = "reader = cnn\nfusion = bif\nsummarizer = biagru\nd_w = 16\nd1 = 32\nk = 5\n\
                    labels = a,b,c\ntrain_path = data/train.jsonl\nseed = 9\nout_dir = exp\n";
        let cfg = RunConfig::parse_str(text).unwrap();
        assert_eq!(cfg.reader, Reader::Cnn);
        assert_eq!(cfg.k, 5);
        assert_eq!(cfg.labels, vec!["a", "b", "c"]);
        let echoed = cfg.to_key_values();
        let reparsed = RunConfig::parse_str(&echoed).unwrap();
        assert_eq!(cfg, reparsed);
    }

    #[test]
    fn profile_sets_default_k_unless_overridden() {
        let cfg = RunConfig::parse_str("profile = short\nlabels = a,b\n").unwrap();
        assert_eq!(cfg.k, 10);
        let cfg = RunConfig::parse_str("profile = short\nk = 3\nlabels = a,b\n").unwrap();
        assert_eq!(cfg.k, 3);
        let cfg = RunConfig::parse_str("k = 3\nprofile = long\nlabels = a,b\n").unwrap();
        assert_eq!(cfg.k, 3);
    }

    #[test]
    fn unknown_keys_and_bad_values_name_the_field() {
        let err = RunConfig::parse_str("banana = 3\n").unwrap_err().to_string();
        assert!(err.contains("banana"), "{err}");
        let err = RunConfig::parse_str("d1 = abc\n").unwrap_err().to_string();
        assert!(err.contains("d1") && err.contains("abc"), "{err}");
    }

    #[test]
    fn validation_names_missing_paths() {
        let mut cfg = RunConfig::default_long();
        cfg.labels = vec!["x".into(), "y".into()];
        let err = cfg.validate_for_train().unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "train_path"), "{err}");

        cfg.train_path = Some(PathBuf::from("/definitely/not/here.jsonl"));
        let err = cfg.validate_for_train().unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "train_path"), "{err}");
    }

    #[test]
    fn duplicate_labels_are_rejected() {
        let mut cfg = RunConfig::default_long();
        cfg.labels = vec!["x".into(), "x".into()];
        let err = cfg.validate_for_train().unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "labels"));
    }
}
