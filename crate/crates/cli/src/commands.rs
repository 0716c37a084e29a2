use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use kinevae_annotate::{AppState, Dataset, LabelStore};
use kinevae_core::checkpoint::Checkpoint;
use kinevae_core::data::{
    augment_between, augment_extend, load_dataset, load_labels, max_starts, normalize, save_dataset, save_labels,
    split_corpus, window_count, CorpusSplits, DatasetFormat,
};
use kinevae_core::evaluation::{evaluate, make_toy_corpus_with, EvalConfig, ToyConfig};
use kinevae_core::generation::{export_sequences, fit_conditional_prior, generate, ClassConditionalPrior};
use kinevae_core::training::{fit, FitOptions, LAST_CHECKPOINT, METRICS_LOG};
use kinevae_core::{ClassNames, DanceStream, LabeledCorpus, ModelParams, Provenance};
use serde_json::{json, Value};

use crate::args::{AugmentArgs, EvaluateArgs, GenerateArgs, ServeArgs, TrainArgs};
use crate::config::Config;

pub const NORMALIZED_DATASET: &str = "normalized.kpd";
pub const MANIFEST: &str = "manifest.json";
pub const RESOLVED_CONFIG: &str = "config.toml";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const TOY_DATASET: &str = "toy.kpd";
pub const TOY_LABELS: &str = "toy_labels.csv";

/// What a subcommand reports: a JSON summary and its human rendering.
#[derive(Debug)]
pub struct Outcome {
    pub summary: Value,
    pub text: String,
}

fn out_dir(cfg: &Config) -> Result<&Path> {
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    Ok(&cfg.out_dir)
}

fn load_streams(cfg: &Config) -> Result<Vec<DanceStream>> {
    let path = cfg.data.dataset_path()?;
    load_dataset(path, DatasetFormat::Kpd1).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_corpus(cfg: &Config) -> Result<LabeledCorpus> {
    let classes = cfg.data.classes()?;
    let streams = load_streams(cfg)?;
    let records = match &cfg.data.labels {
        Some(p) => load_labels(p, &classes).with_context(|| format!("loading labels {}", p.display()))?,
        None => Vec::new(),
    };
    Ok(LabeledCorpus::new(
        streams,
        records,
        cfg.data.window_length,
        cfg.data.stride,
        classes,
    )?)
}

fn splits<'c>(cfg: &Config, corpus: &'c LabeledCorpus) -> Result<CorpusSplits<'c>> {
    Ok(split_corpus(corpus, cfg.data.fractions()?, cfg.seed)?)
}

pub fn prepare(cfg: &Config) -> Result<Outcome> {
    let path = cfg.data.dataset_path()?;
    let streams = normalize(&load_streams(cfg)?).context("normalizing")?;
    let (t, stride) = (cfg.data.window_length, cfg.data.stride);
    if t == 0 || stride == 0 {
        bail!("window_length and stride must be positive");
    }
    let dir = out_dir(cfg)?;
    save_dataset(&dir.join(NORMALIZED_DATASET), &streams, DatasetFormat::Kpd1)?;

    let per_stream: Vec<Value> = streams
        .iter()
        .map(|s| json!({"id": s.id, "frames": s.len(), "windows": window_count(s.len(), t, stride)}))
        .collect();
    let total: usize = streams.iter().map(|s| window_count(s.len(), t, stride)).sum();
    let same = |f: fn(&DanceStream) -> Value| {
        let first = f(&streams[0]);
        if streams.iter().all(|s| f(s) == first) {
            first
        } else {
            Value::Null
        }
    };
    let summary = json!({
        "source": path,
        "normalized": dir.join(NORMALIZED_DATASET),
        "num_streams": streams.len(),
        "num_joints": same(|s| json!(s.num_joints)),
        "frame_rate_hz": same(|s| json!(s.frame_rate_hz)),
        "window_length": t,
        "stride": stride,
        "total_windows": total,
        "streams": per_stream,
    });
    let mut manifest = serde_json::to_vec_pretty(&summary)?;
    manifest.push(b'\n');
    kinevae_core::checkpoint::write_atomic(&dir.join(MANIFEST), &manifest)?;

    let mut text = format!(
        "{} streams, J={}, fps={}, {} windows of {} frames (stride {})\n",
        streams.len(),
        summary["num_joints"],
        summary["frame_rate_hz"],
        total,
        t,
        stride
    );
    for s in &per_stream {
        let _ = writeln!(
            text,
            "  {:<16} {:>7} frames {:>7} windows",
            s["id"].as_str().unwrap_or(""),
            s["frames"],
            s["windows"]
        );
    }
    Ok(Outcome { summary, text })
}

pub fn augment(cfg: &Config, args: &AugmentArgs) -> Result<Outcome> {
    let classes = cfg.data.classes()?;
    let labels = cfg
        .data
        .labels
        .as_deref()
        .context("no label file given (data.labels or --labels)")?;
    let records = load_labels(labels, &classes).with_context(|| format!("loading labels {}", labels.display()))?;
    let bounds = match &cfg.data.dataset {
        Some(_) => Some(max_starts(&load_streams(cfg)?, cfg.data.window_length)),
        None => None,
    };
    let between = augment_between(&records, cfg.data.window_length)?;
    let all = augment_extend(&between, cfg.data.augment_radius, bounds.as_ref());

    let output = match &args.output {
        Some(p) => p.clone(),
        None => out_dir(cfg)?.join("labels_augmented.csv"),
    };
    save_labels(&output, &all, &classes)?;

    let mut by_provenance: BTreeMap<&str, usize> = BTreeMap::new();
    for p in [Provenance::Manual, Provenance::BetweenFill, Provenance::FrameExtension] {
        by_provenance.insert(p.as_str(), all.iter().filter(|r| r.provenance == p).count());
    }
    let mut by_class = Vec::new();
    let mut text = format!(
        "{} records ({} input) -> {}\n",
        all.len(),
        records.len(),
        output.display()
    );
    for (k, v) in &by_provenance {
        let _ = writeln!(text, "  {k:<16} {v:>8}");
    }
    for (y, name) in classes.names().iter().enumerate() {
        let n = all.iter().filter(|r| r.label == y).count();
        let pct = if all.is_empty() {
            0.0
        } else {
            100.0 * n as f64 / all.len() as f64
        };
        by_class.push(json!({"label": name, "count": n, "percent": pct}));
        let _ = writeln!(text, "  {name:<16} {n:>8}  {pct:5.1}%");
    }
    let summary = json!({
        "input_records": records.len(),
        "output_records": all.len(),
        "output": output,
        "radius": cfg.data.augment_radius,
        "by_provenance": by_provenance,
        "by_class": by_class,
    });
    Ok(Outcome { summary, text })
}

pub fn train(cfg: &Config, args: &TrainArgs) -> Result<Outcome> {
    let corpus = load_corpus(cfg)?;
    let splits = splits(cfg, &corpus)?;
    let model = cfg
        .model
        .resolve(corpus.input_dim(), cfg.data.window_length, corpus.num_classes());
    let objective = cfg.objective.resolve(
        corpus.num_classes(),
        splits.train.num_windows(),
        splits.train.labeled.len(),
    );
    let train_config = cfg.train.resolve(cfg.seed);
    let dir = out_dir(cfg)?.to_path_buf();
    kinevae_core::checkpoint::write_atomic(&dir.join(RESOLVED_CONFIG), cfg.to_toml().as_bytes())?;

    let resume = match &args.resume {
        Some(p) => Some(Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?),
        None => None,
    };
    let log_path = dir.join(METRICS_LOG);
    let log = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)?;
    let val = (!splits.val.is_empty()).then_some(&splits.val);
    log::info!(
        "training on {} windows ({} labeled), alpha {}",
        splits.train.num_windows(),
        splits.train.labeled.len(),
        objective.alpha
    );
    let result = fit(
        &splits.train,
        val,
        &model,
        &train_config,
        &objective,
        FitOptions {
            out_dir: Some(dir.clone()),
            metrics: Some(Box::new(BufWriter::new(log))),
            resume,
            class_names: corpus.class_names.names().to_vec(),
        },
    )?;

    let mut text = String::new();
    for (e, loss) in result.train_loss.iter().enumerate() {
        let _ = write!(text, "epoch {:>4}  train {loss:.6}", e + 1);
        if let Some(v) = result.val_loss.get(e) {
            let _ = write!(text, "  val {v:.6}");
        }
        text.push('\n');
    }
    let score =
        |s: Option<kinevae_core::checkpoint::EpochScore>| s.map(|s| json!({"epoch": s.epoch, "value": s.value}));
    let summary = json!({
        "epochs": result.state.epoch,
        "steps": result.state.step(),
        "train_windows": splits.train.num_windows(),
        "labeled_windows": splits.train.labeled.len(),
        "alpha": objective.alpha,
        "final_train_loss": result.train_loss.last(),
        "final_val_loss": result.val_loss.last(),
        "best_val": score(result.best_val.as_ref().map(|b| b.0)),
        "best_agreement": score(result.best_agreement.as_ref().map(|b| b.0)),
        "checkpoint": dir.join(LAST_CHECKPOINT),
        "metrics_log": log_path,
    });
    let _ = writeln!(text, "checkpoints and {} in {}", METRICS_LOG, dir.display());
    Ok(Outcome { summary, text })
}

/// Checkpoint plus the class-conditional prior fitted on the training split.
fn load_for_sampling(cfg: &Config, checkpoint: &Option<PathBuf>) -> Result<(ModelParams, ClassNames, LabeledCorpus)> {
    let path = checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join(LAST_CHECKPOINT));
    let ckpt = Checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let classes = cfg.data.classes()?;
    if !ckpt.meta.class_names.is_empty() && ckpt.meta.class_names != classes.names() {
        bail!(
            "checkpoint classes [{}] differ from configured classes [{}]",
            ckpt.meta.class_names.join(", "),
            classes.names().join(", ")
        );
    }
    let corpus = load_corpus(cfg)?;
    Ok((ckpt.params, classes, corpus))
}

fn train_prior(cfg: &Config, params: &ModelParams, corpus: &LabeledCorpus) -> Result<ClassConditionalPrior> {
    let splits = splits(cfg, corpus)?;
    let labeled: Vec<_> = splits
        .train
        .labeled
        .iter()
        .map(|&(w, y)| (corpus.window(w), y))
        .collect();
    Ok(fit_conditional_prior(params, &labeled)?)
}

pub fn generate_cmd(cfg: &Config, args: &GenerateArgs) -> Result<Outcome> {
    let classes = cfg.data.classes()?;
    let y = classes.index_of(&args.label)?;
    let (params, classes, corpus) = load_for_sampling(cfg, &args.checkpoint)?;
    let prior = train_prior(cfg, &params, &corpus)?;
    let seqs = generate(
        &params,
        &prior,
        y,
        cfg.generate.count,
        cfg.generate.temperature,
        cfg.seed,
    )?;
    let name = classes.name(y).expect("resolved above");
    let stem = match &args.output {
        Some(p) => p.clone(),
        None => out_dir(cfg)?.join(format!("generated_{name}")),
    };
    let kpd = stem.with_extension("kpd");
    let sidecar = stem.with_extension("csv");
    if let Some(parent) = kpd.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    export_sequences(&seqs, &kpd, &sidecar, &classes, corpus.streams[0].frame_rate_hz)?;
    let summary = json!({
        "label": name,
        "count": seqs.len(),
        "temperature": cfg.generate.temperature,
        "seed": cfg.seed,
        "dataset": kpd,
        "sidecar": sidecar,
    });
    let text = format!(
        "{} {name} sequences -> {} (+ {})\n",
        seqs.len(),
        kpd.display(),
        sidecar.display()
    );
    Ok(Outcome { summary, text })
}

pub fn evaluate_cmd(cfg: &Config, args: &EvaluateArgs) -> Result<Outcome> {
    let (params, _, corpus) = load_for_sampling(cfg, &args.checkpoint)?;
    let prior = train_prior(cfg, &params, &corpus)?;
    let splits = splits(cfg, &corpus)?;
    let config = EvalConfig {
        counts: cfg.evaluate.counts.clone(),
        temperature: cfg.evaluate.temperature,
        seed: cfg.seed,
        num_pairs: cfg.evaluate.num_pairs,
    };
    let report = evaluate(&params, &prior, &splits.test, &config)?;
    let path = out_dir(cfg)?.join(EVAL_REPORT);
    let mut bytes = serde_json::to_vec_pretty(&report)?;
    bytes.push(b'\n');
    kinevae_core::checkpoint::write_atomic(&path, &bytes)?;
    let mut text = report.to_table();
    let _ = writeln!(text, "report -> {}", path.display());
    Ok(Outcome {
        summary: serde_json::to_value(&report)?,
        text,
    })
}

pub fn toy(cfg: &Config) -> Result<Outcome> {
    let t = &cfg.toy;
    if !(t.noise_level.is_finite() && t.noise_level >= 0.0) {
        bail!("toy.noise_level must be >= 0");
    }
    if t.frames_per_stream < cfg.data.window_length || cfg.data.window_length == 0 {
        bail!("toy.frames_per_stream must be at least data.window_length");
    }
    let toy = make_toy_corpus_with(
        &ToyConfig {
            num_streams: t.streams,
            frames_per_stream: t.frames_per_stream,
            window_length: cfg.data.window_length,
            noise_level: t.noise_level,
            labeled_fraction: t.labeled_fraction,
        },
        cfg.seed,
    );
    let dir = out_dir(cfg)?;
    let (kpd, labels) = (dir.join(TOY_DATASET), dir.join(TOY_LABELS));
    save_dataset(&kpd, &toy.corpus.streams, DatasetFormat::Kpd1)?;
    save_labels(&labels, &toy.corpus.records, &toy.corpus.class_names)?;
    let windows = toy.corpus.all_windows().len();
    let summary = json!({
        "dataset": kpd,
        "labels": labels,
        "streams": toy.corpus.streams.len(),
        "windows": windows,
        "labeled": toy.corpus.records.len(),
        "stream_classes": toy.stream_classes,
    });
    let text = format!(
        "{} streams, {} windows, {} labeled -> {}, {}\n",
        toy.corpus.streams.len(),
        windows,
        toy.corpus.records.len(),
        kpd.display(),
        labels.display()
    );
    Ok(Outcome { summary, text })
}

/// Blocks until interrupted. Prints the bound address once listening.
pub fn serve(cfg: &Config, _args: &ServeArgs, json_mode: bool) -> Result<Outcome> {
    let classes = cfg.data.classes()?;
    let labels = cfg
        .data
        .labels
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("labels.csv"));
    let store = LabelStore::open(&labels, classes).with_context(|| format!("opening {}", labels.display()))?;
    let dataset = match load_streams(cfg) {
        Ok(streams) => Some(Dataset::new(streams)),
        Err(e) => {
            log::error!("{e:#}; data endpoints will answer 503");
            None
        }
    };
    let state = AppState::new(dataset, store, cfg.data.window_length, cfg.serve.start_index)
        .with_lock_timeout(Duration::from_millis(cfg.serve.lock_timeout_ms));
    let app = kinevae_annotate::router(state, cfg.serve.static_dir.clone());
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((cfg.serve.host.as_str(), cfg.serve.port))
            .await
            .with_context(|| format!("binding {}:{}", cfg.serve.host, cfg.serve.port))?;
        let addr = listener.local_addr()?;
        let mut out = std::io::stdout().lock();
        if json_mode {
            writeln!(
                out,
                "{}",
                json!({"listening": format!("http://{addr}"), "labels": labels})
            )?;
        } else {
            writeln!(out, "listening on http://{addr} (labels: {})", labels.display())?;
        }
        out.flush()?;
        drop(out);
        kinevae_annotate::serve(listener, app, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        anyhow::Ok(())
    })?;
    Ok(Outcome {
        summary: json!({"stopped": true}),
        text: String::new(),
    })
}
