//! One function per subcommand. Each returns the text for stdout; progress
//! goes to the log.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use finesent::checkpoint::{Checkpoint, Kind};
use finesent::classify::{evaluate, finetune, Classifier, SentimentModel};
use finesent::encoder::{init_params, ModelConfig};
use finesent::numerics::rng::stream;
use finesent::objectives::{
    build_examples, history_csv, pretrain, pretrain_examples, PretrainState,
};
use finesent::tokenizer::{build_vocab, Vocab};
use finesent::treebank::{corpus_stats, load_corpus, load_splits, Split};
use serde::Serialize;

use crate::config::{FinetuneInit, RunConfig};
use crate::error::{CliError, Result};

pub const META_SEED: &str = "provenance.seed";
pub const META_STEP: &str = "provenance.step";
pub const META_COMMAND: &str = "provenance.command";
pub const META_VOCAB: &str = "vocab.fingerprint";
pub const META_MAX_LEN: &str = "classifier.max_len";
pub const META_DROPOUT: &str = "classifier.dropout";

/// Everything a command needs besides its own flags.
pub struct Context {
    pub config: RunConfig,
    pub force: bool,
    /// Command line without the program name, recorded in checkpoints.
    pub argv: Vec<String>,
}

impl Context {
    fn path(&self, p: &Path) -> PathBuf {
        self.config.resolve(p)
    }

    /// Refuses to start if any output exists, unless forced. Returns the
    /// outputs plus one config copy per output directory.
    fn plan(&self, command: &str, artifacts: Vec<PathBuf>) -> Result<Vec<PathBuf>> {
        let mut all = artifacts;
        let mut dirs: Vec<PathBuf> = all
            .iter()
            .filter_map(|p| p.parent().map(Path::to_path_buf))
            .collect();
        dirs.sort();
        dirs.dedup();
        all.extend(
            dirs.into_iter()
                .map(|d| d.join(format!("{command}.config.ini"))),
        );
        if !self.force {
            if let Some(p) = all.iter().find(|p| p.exists()) {
                return Err(CliError::Exists(p.clone()));
            }
        }
        Ok(all)
    }

    fn write_config_copies(&self, planned: &[PathBuf]) -> Result<()> {
        let text = self.config.to_ini_string();
        for p in planned
            .iter()
            .filter(|p| p.to_string_lossy().ends_with(".config.ini"))
        {
            write(p, text.as_bytes())?;
        }
        Ok(())
    }

    fn provenance(&self, step: u64, vocab: &Vocab) -> BTreeMap<String, String> {
        BTreeMap::from([
            (META_SEED.to_string(), self.config.seed.to_string()),
            (META_STEP.to_string(), step.to_string()),
            (
                META_COMMAND.to_string(),
                serde_json::to_string(&self.argv).expect("strings serialize"),
            ),
            (META_VOCAB.to_string(), fingerprint(vocab)),
        ])
    }
}

fn fingerprint(vocab: &Vocab) -> String {
    format!("{:016x}", vocab.fingerprint())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn train_sentences(ctx: &Context) -> Result<Vec<String>> {
    read_lines(
        &ctx.path(&ctx.config.paths.prepared_dir)
            .join(Split::Train.file_name()),
    )
}

fn load_vocab(ctx: &Context) -> Result<Vocab> {
    Ok(Vocab::load(&ctx.path(&ctx.config.paths.vocab))?)
}

/// The checkpoint must have been trained with exactly this vocab.
fn check_vocab(ck: &Checkpoint, vocab: &Vocab, path: &Path) -> Result<()> {
    let stored = ck.meta.get(META_VOCAB);
    if stored != Some(&fingerprint(vocab)) || ck.config.vocab_size != vocab.len() {
        return Err(CliError::Mismatch(format!(
            "{} was trained with a different vocab (fingerprint {}, {} tokens) than the configured one ({}, {} tokens)",
            path.display(),
            stored.map_or("missing", String::as_str),
            ck.config.vocab_size,
            fingerprint(vocab),
            vocab.len()
        )));
    }
    Ok(())
}

fn check_model(ck: &Checkpoint, expected: &ModelConfig, preset: &str, path: &Path) -> Result<()> {
    if ck.config != *expected {
        return Err(CliError::Mismatch(format!(
            "{} holds a {}-layer/{}-hidden model, preset {preset} expects {}-layer/{}-hidden ({:?} vs {:?})",
            path.display(),
            ck.config.layers,
            ck.config.hidden,
            expected.layers,
            expected.hidden,
            ck.config,
            expected
        )));
    }
    Ok(())
}

/// Loads a classifier checkpoint paired with the configured vocab.
pub fn load_model(ctx: &Context, path: &Path) -> Result<SentimentModel> {
    let vocab = load_vocab(ctx)?;
    let ck = Checkpoint::load(path)?;
    let Kind::Classifier(task) = ck.kind else {
        return Err(CliError::Mismatch(format!(
            "{} is a {} checkpoint, not a classifier",
            path.display(),
            ck.kind.name()
        )));
    };
    check_vocab(&ck, &vocab, path)?;
    let meta_num = |key: &str, default: f64| -> Result<f64> {
        ck.meta.get(key).map_or(Ok(default), |v| {
            v.parse()
                .map_err(|_| CliError::Mismatch(format!("{}: bad {key} {v:?}", path.display())))
        })
    };
    let max_len = meta_num(META_MAX_LEN, ctx.config.finetune.max_len as f64)? as usize;
    let dropout_p = meta_num(META_DROPOUT, ctx.config.finetune.dropout_p)?;
    Ok(SentimentModel {
        config: ck.config,
        task,
        params: ck.params,
        vocab,
        max_len,
        dropout_p,
    })
}

pub fn prepare(ctx: &Context) -> Result<String> {
    let dir = ctx.path(&ctx.config.paths.prepared_dir);
    let mut artifacts: Vec<PathBuf> = Split::ALL.iter().map(|s| dir.join(s.file_name())).collect();
    artifacts.push(dir.join("stats.txt"));
    artifacts.push(dir.join("stats.json"));
    let planned = ctx.plan("prepare", artifacts)?;

    let start = Instant::now();
    let corpora = load_splits(&ctx.path(&ctx.config.paths.corpus_dir))?;
    let stats = corpus_stats(&corpora);
    for corpus in &corpora {
        let mut text = corpus.sentences().join("\n");
        text.push('\n');
        write(&dir.join(corpus.split.file_name()), text.as_bytes())?;
    }
    write(&dir.join("stats.txt"), stats.to_kv_text().as_bytes())?;
    write(&dir.join("stats.json"), stats.to_json().as_bytes())?;
    ctx.write_config_copies(&planned)?;
    log::info!(
        "prepared {} sentences in {:.2?}",
        stats.sentences,
        start.elapsed()
    );
    Ok(stats.to_kv_text())
}

pub fn vocab(ctx: &Context) -> Result<String> {
    let path = ctx.path(&ctx.config.paths.vocab);
    let planned = ctx.plan("vocab", vec![path.clone()])?;
    let sentences = train_sentences(ctx)?;
    let vocab = build_vocab(&sentences, ctx.config.vocab_size)?;
    if vocab.len() < ctx.config.vocab_size {
        log::warn!(
            "corpus yields only {} vocab entries, fewer than the requested {}",
            vocab.len(),
            ctx.config.vocab_size
        );
    }
    write(&path, vocab.to_text().as_bytes())?;
    ctx.write_config_copies(&planned)?;
    Ok(format!(
        "vocab\t{}\ntokens\t{}\nfingerprint\t{}\n",
        path.display(),
        vocab.len(),
        fingerprint(&vocab)
    ))
}

pub fn pretrain_cmd(ctx: &Context) -> Result<String> {
    let cfg = &ctx.config;
    let ck_path = ctx.path(&cfg.paths.pretrain_checkpoint);
    let log_path = ctx.path(&cfg.paths.pretrain_log);
    let planned = ctx.plan("pretrain", vec![ck_path.clone(), log_path.clone()])?;

    let vocab = load_vocab(ctx)?;
    let sentences = train_sentences(ctx)?;
    let model = cfg.model().with_vocab_size(vocab.len());
    let on_epoch = |s: &PretrainState, epoch: usize| {
        log::info!("pretrain epoch {} finished at step {}", epoch + 1, s.step);
        Ok(())
    };
    let state = match &cfg.resume_from {
        None => pretrain(&sentences, &vocab, model, &cfg.pretrain, on_epoch)?,
        Some(from) => {
            let from = ctx.path(from);
            let ck = Checkpoint::load(&from)?;
            if ck.kind != Kind::Pretrain {
                return Err(CliError::Mismatch(format!(
                    "{} is a {} checkpoint, cannot resume pretraining",
                    from.display(),
                    ck.kind.name()
                )));
            }
            check_model(&ck, &model, &cfg.preset, &from)?;
            check_vocab(&ck, &vocab, &from)?;
            let step = ck
                .meta
                .get(META_STEP)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| {
                    CliError::Mismatch(format!("{}: missing step counter", from.display()))
                })?;
            let mut state = PretrainState::from_params(ck.config, ck.params);
            state.step = step;
            log::info!(
                "resuming pretraining from {} at step {step}",
                from.display()
            );
            let examples = build_examples(&sentences, &vocab, &cfg.pretrain)?;
            pretrain_examples(&mut state, &examples, &cfg.pretrain, on_epoch)?;
            state
        }
    };

    let meta = ctx.provenance(state.step, &vocab);
    let ck = Checkpoint::new(state.config, Kind::Pretrain, meta, state.params.clone())?;
    write(&ck_path, &ck.to_bytes())?;
    write(&log_path, history_csv(&state.history).as_bytes())?;
    ctx.write_config_copies(&planned)?;
    let mut out = format!("checkpoint\t{}\nstep\t{}\n", ck_path.display(), state.step);
    if let Some(last) = state.history.last() {
        out.push_str(&format!(
            "mlm_loss\t{:.4}\nnsp_loss\t{:.4}\n",
            last.mlm_loss, last.nsp_loss
        ));
    }
    Ok(out)
}

#[derive(Serialize)]
struct EpochLine {
    epoch: usize,
    train_loss: f64,
    dev_root_accuracy: Option<f64>,
}

#[derive(Serialize)]
struct FinetuneSummary {
    task: String,
    init: String,
    freeze_encoder: bool,
    train_examples: usize,
    /// 1-based epoch whose weights were saved.
    best_epoch: Option<usize>,
    best_dev_root_accuracy: Option<f64>,
    epochs: Vec<EpochLine>,
}

pub fn finetune_cmd(ctx: &Context) -> Result<String> {
    let cfg = &ctx.config;
    let ck_path = ctx.path(&cfg.paths.classifier_checkpoint);
    let summary_path = ctx
        .path(&cfg.paths.report_dir)
        .join("finetune_summary.json");
    let planned = ctx.plan("finetune", vec![ck_path.clone(), summary_path.clone()])?;

    let vocab = load_vocab(ctx)?;
    let model = cfg.model().with_vocab_size(vocab.len());
    let init = match cfg.finetune_init {
        FinetuneInit::Pretrained => {
            let from = ctx.path(&cfg.paths.pretrain_checkpoint);
            let ck = Checkpoint::load(&from)?;
            check_model(&ck, &model, &cfg.preset, &from)?;
            check_vocab(&ck, &vocab, &from)?;
            ck.params
        }
        FinetuneInit::Random => init_params(&model, &mut stream(cfg.seed, 11))?,
    };
    let corpus_dir = ctx.path(&cfg.paths.corpus_dir);
    let mut train = load_corpus(&corpus_dir.join(Split::Train.file_name()), Split::Train)?;
    let dev = load_corpus(&corpus_dir.join(Split::Dev.file_name()), Split::Dev)?;
    if let Some(n) = cfg.train_limit {
        train.trees.truncate(n);
    }
    let train_records: Vec<_> = train
        .records()
        .into_iter()
        .filter(|r| cfg.train_scope.includes(r))
        .collect();
    let usable = train_records
        .iter()
        .filter(|r| cfg.task.target(r.label).is_some())
        .count();
    let out = finetune(
        &train_records,
        &dev.records(),
        &init,
        &model,
        &vocab,
        cfg.task,
        &cfg.finetune,
    )?;

    let steps_per_epoch = usable.div_ceil(cfg.finetune.batch_size) as u64;
    let trained_epochs = out.best_epoch.map_or(0, |e| e as u64 + 1);
    let mut meta = ctx.provenance(steps_per_epoch * trained_epochs, &vocab);
    meta.insert(META_MAX_LEN.into(), cfg.finetune.max_len.to_string());
    meta.insert(META_DROPOUT.into(), cfg.finetune.dropout_p.to_string());
    let ck = Checkpoint::new(
        model,
        Kind::Classifier(cfg.task),
        meta,
        out.model.params.clone(),
    )?;

    let summary = FinetuneSummary {
        task: cfg.task.to_string(),
        init: cfg.finetune_init.to_string(),
        freeze_encoder: cfg.finetune.freeze_encoder,
        train_examples: usable,
        best_epoch: out.best_epoch.map(|e| e + 1),
        best_dev_root_accuracy: out.best_dev_root,
        epochs: out
            .history
            .iter()
            .map(|r| EpochLine {
                epoch: r.epoch + 1,
                train_loss: r.train_loss,
                dev_root_accuracy: r.dev_root_accuracy,
            })
            .collect(),
    };
    write(&ck_path, &ck.to_bytes())?;
    write(
        &summary_path,
        (serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n").as_bytes(),
    )?;
    ctx.write_config_copies(&planned)?;

    let mut text = String::from("epoch\ttrain_loss\tdev_root\n");
    for e in &summary.epochs {
        let dev = e
            .dev_root_accuracy
            .map_or("n/a".into(), |a| format!("{:.1}", 100.0 * a));
        text.push_str(&format!("{}\t{:.4}\t{dev}\n", e.epoch, e.train_loss));
    }
    match (summary.best_epoch, summary.best_dev_root_accuracy) {
        (Some(e), Some(a)) => {
            text.push_str(&format!("best epoch {e} (dev root {:.1})\n", 100.0 * a))
        }
        (Some(e), None) => text.push_str(&format!("kept epoch {e} (no dev roots)\n")),
        _ => text.push_str("no training epochs run\n"),
    }
    text.push_str(&format!("checkpoint\t{}\n", ck_path.display()));
    Ok(text)
}

pub fn eval_cmd(ctx: &Context, checkpoint: Option<&Path>) -> Result<String> {
    let cfg = &ctx.config;
    let ck_path = checkpoint.map_or_else(
        || ctx.path(&cfg.paths.classifier_checkpoint),
        Path::to_path_buf,
    );
    let report_dir = ctx.path(&cfg.paths.report_dir);
    let stem = format!("eval_{}", cfg.eval_split.name());
    let tsv = report_dir.join(format!("{stem}.tsv"));
    let json = report_dir.join(format!("{stem}.json"));
    let planned = ctx.plan("eval", vec![tsv.clone(), json.clone()])?;

    let model = load_model(ctx, &ck_path)?;
    let split = cfg.eval_split;
    let corpus = load_corpus(
        &ctx.path(&cfg.paths.corpus_dir).join(split.file_name()),
        split,
    )?;
    let report = evaluate(&model, &corpus, &cfg.cells())?;
    write(&tsv, report.to_tsv().as_bytes())?;
    write(&json, report.to_json().as_bytes())?;
    ctx.write_config_copies(&planned)?;
    Ok(report.to_tsv())
}

/// Rounds probabilities to thousandths so the printed values sum to
/// exactly 1.000 (largest remainder).
pub fn thousandths(probs: &[f64]) -> Vec<u32> {
    let scaled: Vec<f64> = probs.iter().map(|p| p.clamp(0.0, 1.0) * 1000.0).collect();
    let mut out: Vec<u32> = scaled.iter().map(|s| s.floor() as u32).collect();
    let deficit = 1000u32.saturating_sub(out.iter().sum());
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (scaled[a] - scaled[a].floor(), scaled[b] - scaled[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(deficit as usize) {
        out[i] += 1;
    }
    out
}

pub fn predict_cmd(ctx: &Context, checkpoint: Option<&Path>, text: &str) -> Result<String> {
    let ck_path = checkpoint.map_or_else(
        || ctx.path(&ctx.config.paths.classifier_checkpoint),
        Path::to_path_buf,
    );
    let model = load_model(ctx, &ck_path)?;
    if text.trim().is_empty() {
        log::warn!("empty input: classifying the bare [CLS] [SEP] frame");
    }
    let p = model.predict(text)?;
    let mut out = String::new();
    for (i, t) in thousandths(&p.probs).into_iter().enumerate() {
        out.push_str(&format!(
            "{}\t{}.{:03}\n",
            model.task.class_name(i),
            t / 1000,
            t % 1000
        ));
    }
    out.push_str(&format!("label\t{}\n", model.task.class_name(p.label)));
    Ok(out)
}
