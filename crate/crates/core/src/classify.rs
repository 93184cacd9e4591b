//! Dropout + softmax head over the pooled encoder output, fine-tuning, and
//! accuracy evaluation over sentence roots or every phrase node.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    self, bound_var, dense, encode_real, pooled_output, EncoderError, EncoderVars, ModelConfig,
};
use crate::numerics::rng::{stream, truncated_normal, SeededRng};
use crate::numerics::{argmax, softmax_row, NumericsError, ParamStore, Tape, Tensor, Var};
use crate::optim::{AdamW, AdamWConfig, LinearSchedule};
use crate::tokenizer::{encode, TokenSequence, Vocab};
use crate::treebank::{to_binary, unescape_ptb, BinaryLabel, Corpus, PhraseRecord, SentimentLabel};

pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";

#[derive(Debug, thiserror::Error)]
pub enum ClassifyError {
    #[error("no training examples for {0}")]
    EmptyTrainingSet(Task),
    #[error("label space mismatch: model predicts {model} but {requested} was requested")]
    LabelSpaceMismatch { model: String, requested: String },
    #[error("prediction and gold lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("accuracy of an empty list")]
    Empty,
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),
    #[error("non-finite loss at epoch {0}")]
    NonFiniteLoss(usize),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

impl From<NumericsError> for ClassifyError {
    fn from(e: NumericsError) -> Self {
        Self::Encoder(e.into())
    }
}

pub type Result<T> = std::result::Result<T, ClassifyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Sst2,
    Sst5,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Sst2 => "sst2",
            Task::Sst5 => "sst5",
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            Task::Sst2 => 2,
            Task::Sst5 => 5,
        }
    }

    /// Class index of a gold label in this task, `None` for neutral under
    /// the binary task.
    pub fn target(self, label: SentimentLabel) -> Option<usize> {
        match self {
            Task::Sst5 => Some(label.index()),
            Task::Sst2 => to_binary(label).map(BinaryLabel::index),
        }
    }

    pub fn class_name(self, index: usize) -> &'static str {
        match self {
            Task::Sst5 => SentimentLabel::ALL[index].name(),
            Task::Sst2 => [BinaryLabel::Negative, BinaryLabel::Positive][index].name(),
        }
    }

    pub fn from_classes(k: usize) -> Option<Self> {
        match k {
            2 => Some(Task::Sst2),
            5 => Some(Task::Sst5),
            _ => None,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sst2" => Ok(Task::Sst2),
            "sst5" => Ok(Task::Sst5),
            other => Err(format!("unknown task {other:?} (expected sst2 or sst5)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    All,
    Root,
}

impl Scope {
    pub fn name(self) -> &'static str {
        match self {
            Scope::All => "all",
            Scope::Root => "root",
        }
    }

    pub fn includes(self, record: &PhraseRecord) -> bool {
        self == Scope::All || record.is_root
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scope {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(Scope::All),
            "root" => Ok(Scope::Root),
            other => Err(format!("unknown scope {other:?} (expected all or root)")),
        }
    }
}

/// Class probabilities and the chosen class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub label: usize,
}

impl Prediction {
    pub fn from_logits(logits: &[f64]) -> Self {
        let mut probs = vec![0.0; logits.len()];
        softmax_row(logits, &mut probs);
        let label = argmax(&probs);
        Self { probs, label }
    }
}

/// Output layer: `softmax(dropout(pooled) · W + b)` with `W: [H×K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weights: Tensor<f32>,
    pub bias: Tensor<f32>,
    pub dropout_p: f64,
}

impl ClassifierHead {
    pub fn init<R: Rng + ?Sized>(hidden: usize, task: Task, dropout_p: f64, rng: &mut R) -> Self {
        let k = task.num_classes();
        let w: Vec<f32> = (0..hidden * k)
            .map(|_| truncated_normal(rng, encoder::INIT_STD) as f32)
            .collect();
        Self {
            weights: Tensor::from_vec(vec![hidden, k], w).expect("head shape"),
            bias: Tensor::zeros(vec![k]),
            dropout_p,
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.numel()
    }

    pub fn hidden(&self) -> usize {
        self.weights.shape()[0]
    }

    /// Reads `head.{w,b}` from `store`.
    pub fn from_params(store: &ParamStore<f32>, dropout_p: f64) -> Option<Self> {
        Some(Self {
            weights: store.get(HEAD_W)?.clone(),
            bias: store.get(HEAD_B)?.clone(),
            dropout_p,
        })
    }
}

/// Applies the head to one pooled vector.
pub fn head_forward<R: Rng + ?Sized>(
    pooled: &[f32],
    head: &ClassifierHead,
    training: bool,
    rng: &mut R,
) -> Result<Prediction> {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::from_vec(vec![1, pooled.len()], pooled.to_vec())?);
    let w = tape.constant(head.weights.clone());
    let b = tape.constant(head.bias.clone());
    let logits = head_logits(&mut tape, x, (w, b), head.dropout_p, training, rng)?;
    Ok(Prediction::from_logits(&tape.value(logits).to_f64_vec()))
}

/// `[B×H]` pooled rows to `[B×K]` logits.
pub fn head_logits<R: Rng + ?Sized>(
    tape: &mut Tape<f32>,
    pooled: Var,
    head: (Var, Var),
    dropout_p: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let x = tape.dropout(pooled, dropout_p, training, rng)?;
    Ok(dense(tape, x, head)?)
}

/// Anything that maps text to a class of a fixed task.
pub trait Classifier: Sync {
    fn task(&self) -> Task;
    fn predict(&self, text: &str) -> Result<Prediction>;
}

/// Encoder plus classification head, ready for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct SentimentModel {
    pub config: ModelConfig,
    pub task: Task,
    /// Encoder tensors plus `head.{w,b}`.
    pub params: ParamStore<f32>,
    pub vocab: Vocab,
    pub max_len: usize,
    pub dropout_p: f64,
}

impl SentimentModel {
    pub fn head(&self) -> ClassifierHead {
        ClassifierHead::from_params(&self.params, self.dropout_p).expect("model params hold a head")
    }

    pub fn encode_text(&self, text: &str) -> TokenSequence {
        encode(&unescape_ptb(text), &self.vocab, self.max_len)
    }
}

impl Classifier for SentimentModel {
    fn task(&self) -> Task {
        self.task
    }

    fn predict(&self, text: &str) -> Result<Prediction> {
        let seq = self.encode_text(text);
        let pooled = pooled_output(&self.params, &self.config, &seq)?;
        head_forward(&pooled, &self.head(), false, &mut stream(0, 0))
    }
}

/// Fraction of positions where `predictions` equals `golds`.
pub fn accuracy(predictions: &[usize], golds: &[usize]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(ClassifyError::LengthMismatch(
            predictions.len(),
            golds.len(),
        ));
    }
    if golds.is_empty() {
        return Err(ClassifyError::Empty);
    }
    let correct = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| p == g)
        .count();
    Ok(correct as f64 / golds.len() as f64)
}

/// Most frequent class among task-projected golds (lowest index on ties) and
/// its share.
pub fn majority_baseline<'a>(
    records: impl IntoIterator<Item = &'a PhraseRecord>,
    task: Task,
) -> Option<(usize, f64)> {
    let mut counts = vec![0usize; task.num_classes()];
    for r in records {
        if let Some(t) = task.target(r.label) {
            counts[t] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return None;
    }
    let best = argmax(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
    Some((best, counts[best] as f64 / total as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub task: Task,
    pub scope: Scope,
    pub n: usize,
    pub correct: usize,
    /// `None` when the cell has no samples.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub cells: Vec<CellReport>,
}

impl EvalReport {
    pub fn cell(&self, task: Task, scope: Scope) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.task == task && c.scope == scope)
    }

    /// `task\tscope\tn\taccuracy` with accuracy as a one-decimal percentage,
    /// `n/a` for empty cells, and a footer naming the split.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("task\tscope\tn\taccuracy\n");
        for c in &self.cells {
            let acc = c
                .accuracy
                .map_or("n/a".to_string(), |a| format!("{:.1}", 100.0 * a));
            out.push_str(&format!("{}\t{}\t{}\t{}\n", c.task, c.scope, c.n, acc));
        }
        out.push_str(&format!(
            "# split: {} (standard SST train/dev/test partition); phrases scored per occurrence\n",
            self.split
        ));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Scores `model` on the requested cells of `corpus`. "all" cells use every
/// phrase node, "root" cells only sentence roots; binary cells skip neutral
/// golds. Each distinct text is predicted once.
pub fn evaluate<C: Classifier + ?Sized>(
    model: &C,
    corpus: &Corpus,
    cells: &[(Task, Scope)],
) -> Result<EvalReport> {
    for &(task, _) in cells {
        if task != model.task() {
            return Err(ClassifyError::LabelSpaceMismatch {
                model: model.task().to_string(),
                requested: task.to_string(),
            });
        }
    }
    let records = corpus.records();
    let needs_all = cells.iter().any(|&(_, s)| s == Scope::All);
    let mut texts: Vec<&str> = records
        .iter()
        .filter(|r| needs_all || r.is_root)
        .map(|r| r.text.as_str())
        .collect();
    texts.sort_unstable();
    texts.dedup();
    let predicted: Vec<(&str, usize)> = texts
        .par_iter()
        .map(|&t| model.predict(t).map(|p| (t, p.label)))
        .collect::<Result<_>>()?;
    let lookup: HashMap<&str, usize> = predicted.into_iter().collect();

    let mut report = EvalReport {
        split: corpus.split.name().to_string(),
        cells: Vec::with_capacity(cells.len()),
    };
    for &(task, scope) in cells {
        let (mut n, mut correct) = (0, 0);
        for r in records.iter().filter(|r| scope.includes(r)) {
            let Some(gold) = task.target(r.label) else {
                continue;
            };
            n += 1;
            if lookup[r.text.as_str()] == gold {
                correct += 1;
            }
        }
        if n == 0 {
            log::warn!("{task}/{scope} cell on {} has no samples", report.split);
        }
        report.cells.push(CellReport {
            task,
            scope,
            n,
            correct,
            accuracy: (n > 0).then(|| correct as f64 / n as f64),
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub max_len: usize,
    /// Head dropout.
    pub dropout_p: f64,
    /// Train only the head on fixed encoder features.
    pub freeze_encoder: bool,
    pub seed: u64,
}

impl FinetuneHyper {
    /// Defaults for full fine-tuning (lr 2e-5) or head-only training (1e-3).
    pub fn new(freeze_encoder: bool) -> Self {
        Self {
            epochs: 3,
            batch_size: 32,
            lr: if freeze_encoder { 1e-3 } else { 2e-5 },
            warmup_frac: 0.1,
            weight_decay: 0.01,
            max_len: 64,
            dropout_p: 0.1,
            freeze_encoder,
            seed: 0,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let bad = |m: String| Err(ClassifyError::InvalidHyper(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.max_len < 3 || self.max_len > config.max_positions {
            return bad(format!(
                "max_len {} must lie in 3..={}",
                self.max_len, config.max_positions
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {}", self.dropout_p));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {}", self.lr));
        }
        Ok(())
    }
}

impl Default for FinetuneHyper {
    fn default() -> Self {
        Self::new(false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_root_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: SentimentModel,
    /// Epoch (0-based) whose weights were kept.
    pub best_epoch: Option<usize>,
    pub best_dev_root: Option<f64>,
    pub history: Vec<EpochRecord>,
}

struct Example {
    seq: TokenSequence,
    target: usize,
}

fn examples(records: &[PhraseRecord], task: Task, vocab: &Vocab, max_len: usize) -> Vec<Example> {
    records
        .iter()
        .filter_map(|r| {
            task.target(r.label).map(|target| Example {
                seq: encode(&unescape_ptb(&r.text), vocab, max_len),
                target,
            })
        })
        .collect()
}

/// Copies the encoder tensors of `init` and attaches a head for `task`,
/// reusing one already present if its class count matches.
fn assemble(
    init: &ParamStore<f32>,
    config: &ModelConfig,
    task: Task,
    hyper: &FinetuneHyper,
) -> Result<ParamStore<f32>> {
    encoder::check_params(init, config)?;
    let mut params = ParamStore::new();
    for (name, _) in encoder::param_shapes(config) {
        params.insert(name.clone(), init.get(&name).expect("checked").clone())?;
    }
    let head = match ClassifierHead::from_params(init, hyper.dropout_p) {
        Some(h) if h.classes() != task.num_classes() || h.hidden() != config.hidden => {
            return Err(ClassifyError::LabelSpaceMismatch {
                model: format!("{} classes", h.classes()),
                requested: task.to_string(),
            })
        }
        Some(h) => h,
        None => ClassifierHead::init(
            config.hidden,
            task,
            hyper.dropout_p,
            &mut stream(hyper.seed, 5),
        ),
    };
    params.insert(HEAD_W, head.weights)?;
    params.insert(HEAD_B, head.bias)?;
    Ok(params)
}

fn root_dev_accuracy(
    model: &SentimentModel,
    dev: &[Example],
    features: Option<&[Vec<f32>]>,
) -> Result<Option<f64>> {
    if dev.is_empty() {
        return Ok(None);
    }
    let head = model.head();
    let preds: Vec<usize> = dev
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let pooled = match features {
                Some(f) => f[i].clone(),
                None => pooled_output(&model.params, &model.config, &ex.seq)?,
            };
            Ok(head_forward(&pooled, &head, false, &mut stream(0, 0))?.label)
        })
        .collect::<Result<_>>()?;
    let golds: Vec<usize> = dev.iter().map(|e| e.target).collect();
    Ok(Some(accuracy(&preds, &golds)?))
}

fn features(
    params: &ParamStore<f32>,
    config: &ModelConfig,
    examples: &[Example],
) -> Result<Vec<Vec<f32>>> {
    examples
        .par_iter()
        .map(|e| Ok(pooled_output(params, config, &e.seq)?))
        .collect()
}

/// Trains a head (and, unless frozen, the encoder) with cross-entropy on
/// `train`, keeping the weights of the epoch with the best dev root
/// accuracy (the last epoch if `dev` has no usable roots).
pub fn finetune(
    train: &[PhraseRecord],
    dev: &[PhraseRecord],
    init: &ParamStore<f32>,
    config: &ModelConfig,
    vocab: &Vocab,
    task: Task,
    hyper: &FinetuneHyper,
) -> Result<FinetuneOutcome> {
    hyper.validate(config)?;
    if vocab.len() != config.vocab_size {
        return Err(ClassifyError::InvalidHyper(format!(
            "vocab has {} tokens but the model expects {}",
            vocab.len(),
            config.vocab_size
        )));
    }
    let train_ex = examples(train, task, vocab, hyper.max_len);
    if train_ex.is_empty() {
        return Err(ClassifyError::EmptyTrainingSet(task));
    }
    let dev_roots: Vec<PhraseRecord> = dev.iter().filter(|r| r.is_root).cloned().collect();
    let dev_ex = examples(&dev_roots, task, vocab, hyper.max_len);

    let mut model = SentimentModel {
        config: *config,
        task,
        params: assemble(init, config, task, hyper)?,
        vocab: vocab.clone(),
        max_len: hyper.max_len,
        dropout_p: hyper.dropout_p,
    };
    let mut outcome = FinetuneOutcome {
        model: model.clone(),
        best_epoch: None,
        best_dev_root: None,
        history: Vec::new(),
    };
    if hyper.epochs == 0 {
        return Ok(outcome);
    }

    let (train_feats, dev_feats) = if hyper.freeze_encoder {
        (
            Some(features(&model.params, config, &train_ex)?),
            Some(features(&model.params, config, &dev_ex)?),
        )
    } else {
        (None, None)
    };

    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: hyper.weight_decay,
            ..AdamWConfig::default()
        },
        &model.params,
    );
    let per_epoch = train_ex.len().div_ceil(hyper.batch_size) as u64;
    let schedule = LinearSchedule::with_warmup_fraction(
        hyper.lr,
        per_epoch * hyper.epochs as u64,
        hyper.warmup_frac,
    );
    let mut dropout_rng = stream(hyper.seed, 4);
    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    let mut step = 0u64;
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut stream(hyper.seed, 10 + epoch as u64));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let loss = train_batch(
                &mut model,
                &train_ex,
                train_feats.as_deref(),
                chunk,
                hyper,
                &mut dropout_rng,
            )?;
            if !loss.is_finite() {
                return Err(ClassifyError::NonFiniteLoss(epoch));
            }
            loss_sum += loss * chunk.len() as f64;
            opt.step(&mut model.params, schedule.rate(step));
            step += 1;
        }
        let dev_acc = root_dev_accuracy(&model, &dev_ex, dev_feats.as_deref())?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_ex.len() as f64,
            dev_root_accuracy: dev_acc,
        };
        log::info!(
            "{task} epoch {}: train loss {:.4}, dev root {}",
            epoch + 1,
            record.train_loss,
            dev_acc.map_or("n/a".to_string(), |a| format!("{:.3}", a))
        );
        outcome.history.push(record);
        let improved = match (dev_acc, outcome.best_dev_root) {
            (Some(a), Some(b)) => a > b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            outcome.best_epoch = Some(epoch);
            outcome.best_dev_root = dev_acc;
            outcome.model = model.clone();
        }
    }
    Ok(outcome)
}

/// Forward and backward over one mini-batch; gradients are left in
/// `model.params` for the optimizer. Returns the mean loss.
fn train_batch(
    model: &mut SentimentModel,
    train: &[Example],
    feats: Option<&[Vec<f32>]>,
    chunk: &[usize],
    hyper: &FinetuneHyper,
    rng: &mut SeededRng,
) -> Result<f64> {
    let config = model.config;
    let mut tape = Tape::<f32>::new();
    let frozen = feats.is_some();
    let bound = model.params.bind(&mut tape, |name| {
        !frozen || name == HEAD_W || name == HEAD_B
    });
    let pooled = match feats {
        Some(f) => {
            let rows: Vec<f32> = chunk.iter().flat_map(|&i| f[i].iter().copied()).collect();
            tape.constant(Tensor::from_vec(vec![chunk.len(), config.hidden], rows)?)
        }
        None => {
            let vars = EncoderVars::new(&model.params, &bound, &config)?;
            let mut rows = Vec::with_capacity(chunk.len());
            for &i in chunk {
                rows.push(encode_real(&mut tape, &vars, &config, &train[i].seq, true, rng)?.pooled);
            }
            tape.concat_rows(&rows)?
        }
    };
    let head = (
        bound_var(&model.params, &bound, HEAD_W)?,
        bound_var(&model.params, &bound, HEAD_B)?,
    );
    let logits = head_logits(&mut tape, pooled, head, hyper.dropout_p, true, rng)?;
    let labels: Vec<usize> = chunk.iter().map(|&i| train[i].target).collect();
    let loss = tape.cross_entropy_logits(logits, &labels)?;
    let value = tape.value(loss).data()[0] as f64;
    let grads = tape.backward(loss)?;
    model.params.accumulate_grads(&bound, &grads)?;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::seeded;
    use crate::treebank::parse_tree;

    #[test]
    fn zero_head_is_uniform_with_lowest_label() {
        let head = ClassifierHead {
            weights: Tensor::zeros(vec![8, 5]),
            bias: Tensor::zeros(vec![5]),
            dropout_p: 0.1,
        };
        let p = head_forward(&[0.3; 8], &head, false, &mut seeded(0)).unwrap();
        assert_eq!(p.label, 0);
        assert!(p.probs.iter().all(|&q| (q - 0.2).abs() < 1e-12));
    }

    #[test]
    fn bias_alone_decides() {
        let head = ClassifierHead {
            weights: Tensor::zeros(vec![4, 5]),
            bias: Tensor::from_vec(vec![5], vec![0.0, 0.0, 10.0, 0.0, 0.0]).unwrap(),
            dropout_p: 0.1,
        };
        let p = head_forward(&[1.0; 4], &head, false, &mut seeded(0)).unwrap();
        assert_eq!(p.label, 2);
        // e^10 / (e^10 + 4)
        let expected = 10f64.exp() / (10f64.exp() + 4.0);
        assert!((p.probs[2] - expected).abs() < 1e-9);
        assert!(p.probs[2] > 0.99);
    }

    #[test]
    fn inference_ignores_rng_training_does_not() {
        let head = ClassifierHead::init(16, Task::Sst5, 0.5, &mut seeded(1));
        let x: Vec<f32> = (0..16).map(|i| i as f32 / 4.0 - 2.0).collect();
        let a = head_forward(&x, &head, false, &mut seeded(1)).unwrap();
        let b = head_forward(&x, &head, false, &mut seeded(2)).unwrap();
        assert_eq!(a, b);
        let c = head_forward(&x, &head, true, &mut seeded(1)).unwrap();
        let d = head_forward(&x, &head, true, &mut seeded(2)).unwrap();
        assert_ne!(c.probs, d.probs);
        assert!(head_forward(&x[..3], &head, false, &mut seeded(0)).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap(), 0.75);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert!(matches!(accuracy(&[], &[]), Err(ClassifyError::Empty)));
        assert!(matches!(
            accuracy(&[1], &[1, 2]),
            Err(ClassifyError::LengthMismatch(1, 2))
        ));
    }

    #[test]
    fn task_projection() {
        let l = |v| SentimentLabel::new(v).unwrap();
        assert_eq!(Task::Sst2.target(l(0)), Some(0));
        assert_eq!(Task::Sst2.target(l(2)), None);
        assert_eq!(Task::Sst2.target(l(4)), Some(1));
        assert_eq!(Task::Sst5.target(l(3)), Some(3));
        assert_eq!(Task::Sst5.class_name(0), "very negative");
        assert_eq!("sst2".parse::<Task>().unwrap(), Task::Sst2);
        assert!("sst3".parse::<Task>().is_err());
        assert_eq!("root".parse::<Scope>().unwrap(), Scope::Root);
    }

    struct Oracle(HashMap<String, usize>, Task);

    impl Classifier for Oracle {
        fn task(&self) -> Task {
            self.1
        }
        fn predict(&self, text: &str) -> Result<Prediction> {
            let label = self.0.get(text).copied().unwrap_or(0);
            let mut probs = vec![0.0; self.1.num_classes()];
            probs[label] = 1.0;
            Ok(Prediction { probs, label })
        }
    }

    fn oracle(corpus: &Corpus, task: Task) -> Oracle {
        let map = corpus
            .records()
            .into_iter()
            .map(|r| (r.text.clone(), task.target(r.label).unwrap_or(0)))
            .collect();
        Oracle(map, task)
    }

    #[test]
    fn oracle_scores_perfectly() {
        let corpus = Corpus {
            split: crate::treebank::Split::Dev,
            trees: vec![parse_tree("(3 (2 It) (4 rocks))").unwrap()],
        };
        let report = evaluate(
            &oracle(&corpus, Task::Sst5),
            &corpus,
            &[(Task::Sst5, Scope::All), (Task::Sst5, Scope::Root)],
        )
        .unwrap();
        let all = report.cell(Task::Sst5, Scope::All).unwrap();
        assert_eq!((all.n, all.accuracy), (3, Some(1.0)));
        let root = report.cell(Task::Sst5, Scope::Root).unwrap();
        assert_eq!((root.n, root.accuracy), (1, Some(1.0)));
        assert_eq!(
            report.to_tsv().lines().take(3).collect::<Vec<_>>(),
            vec![
                "task\tscope\tn\taccuracy",
                "sst5\tall\t3\t100.0",
                "sst5\troot\t1\t100.0"
            ]
        );
        let back: EvalReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn neutral_roots_leave_binary_cell_empty() {
        let corpus = Corpus {
            split: crate::treebank::Split::Dev,
            trees: vec![parse_tree("(2 (4 good) (0 bad))").unwrap()],
        };
        let report = evaluate(
            &oracle(&corpus, Task::Sst2),
            &corpus,
            &[(Task::Sst2, Scope::Root), (Task::Sst2, Scope::All)],
        )
        .unwrap();
        let root = report.cell(Task::Sst2, Scope::Root).unwrap();
        assert_eq!((root.n, root.accuracy), (0, None));
        assert!(report.to_tsv().contains("sst2\troot\t0\tn/a"));
        assert_eq!(report.cell(Task::Sst2, Scope::All).unwrap().n, 2);
    }

    #[test]
    fn task_mismatch_rejected() {
        let corpus = Corpus {
            split: crate::treebank::Split::Dev,
            trees: vec![parse_tree("(3 (2 It) (4 rocks))").unwrap()],
        };
        assert!(matches!(
            evaluate(
                &oracle(&corpus, Task::Sst5),
                &corpus,
                &[(Task::Sst2, Scope::Root)]
            ),
            Err(ClassifyError::LabelSpaceMismatch { .. })
        ));
    }

    #[test]
    fn majority_class() {
        let l = |v| SentimentLabel::new(v).unwrap();
        let recs: Vec<PhraseRecord> = [3, 3, 1, 2]
            .iter()
            .map(|&v| PhraseRecord {
                text: String::new(),
                label: l(v),
                is_root: true,
            })
            .collect();
        assert_eq!(majority_baseline(&recs, Task::Sst5), Some((3, 0.5)));
        assert_eq!(majority_baseline(&recs, Task::Sst2), Some((1, 2.0 / 3.0)));
        assert_eq!(majority_baseline(&recs[3..], Task::Sst2), None);
    }
}
