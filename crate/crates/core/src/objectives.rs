//! Masked-word and next-sentence pretraining.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, bound_var, dense, encode_real, EncoderError, EncoderVars, ModelConfig};
use crate::numerics::rng::{stream, truncated_normal, SeededRng};
use crate::numerics::{NumericsError, ParamStore, Tape, Tensor, Var};
use crate::optim::{AdamW, AdamWConfig, LinearSchedule};
use crate::tokenizer::{encode_pair, TokenSequence, Vocab, SPECIALS};

#[derive(Debug, thiserror::Error)]
pub enum ObjectivesError {
    #[error("sequence has no maskable positions")]
    NoMaskablePositions,
    #[error("corpus needs at least 2 sentences with 2 distinct texts, got {0} sentences")]
    CorpusTooSmall(usize),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),
    #[error("epoch callback failed: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

impl From<NumericsError> for ObjectivesError {
    fn from(e: NumericsError) -> Self {
        Self::Encoder(e.into())
    }
}

pub type Result<T> = std::result::Result<T, ObjectivesError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    /// Selection probability per word.
    pub rate: f64,
    /// Share of selected positions replaced by `[MASK]`.
    pub mask_frac: f64,
    /// Share of selected positions replaced by a random non-special token.
    /// The remainder keeps its original id.
    pub random_frac: f64,
    /// Select whole words (a piece plus its `##` continuations) together.
    pub whole_word: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            rate: 0.15,
            mask_frac: 0.8,
            random_frac: 0.1,
            whole_word: true,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.rate > 0.0
            && self.rate < 1.0
            && self.mask_frac >= 0.0
            && self.random_frac >= 0.0
            && self.mask_frac + self.random_frac <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(ObjectivesError::InvalidHyper(format!(
                "mask config {self:?}"
            )))
        }
    }
}

/// A sequence after masking, with the originals at the selected positions.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequence {
    pub seq: TokenSequence,
    /// Original id at every selected position, `None` elsewhere.
    pub targets: Vec<Option<u32>>,
    /// Selected positions in ascending order.
    pub positions: Vec<usize>,
}

impl MaskedSequence {
    /// Puts the original ids back.
    pub fn restore(&self) -> TokenSequence {
        let mut seq = self.seq.clone();
        for (id, target) in seq.ids.iter_mut().zip(&self.targets) {
            if let Some(t) = target {
                *id = *t;
            }
        }
        seq
    }

    pub fn target_ids(&self) -> Vec<usize> {
        self.positions
            .iter()
            .map(|&p| self.targets[p].expect("target at every position") as usize)
            .collect()
    }
}

pub type MaskedBatch = Vec<MaskedSequence>;

/// Groups maskable positions (real, non-special) into selection units.
pub fn maskable_units(seq: &TokenSequence, vocab: &Vocab, whole_word: bool) -> Vec<Vec<usize>> {
    let mut units: Vec<Vec<usize>> = Vec::new();
    let mut prev_maskable = false;
    for (i, &id) in seq.ids[..seq.n_real].iter().enumerate() {
        if vocab.is_special(id) && id != vocab.unk_id() {
            prev_maskable = false;
            continue;
        }
        match units.last_mut() {
            Some(unit) if whole_word && prev_maskable && vocab.is_continuation(id) => unit.push(i),
            _ => units.push(vec![i]),
        }
        prev_maskable = true;
    }
    units
}

/// Selects units with probability `rate` (at least one), then replaces each
/// selected position per the 80/10/10 split.
pub fn mask_tokens<R: Rng + ?Sized>(
    seq: &TokenSequence,
    config: &MaskConfig,
    rng: &mut R,
    vocab: &Vocab,
) -> Result<MaskedSequence> {
    config.validate()?;
    let units = maskable_units(seq, vocab, config.whole_word);
    if units.is_empty() {
        return Err(ObjectivesError::NoMaskablePositions);
    }
    let mut chosen: Vec<usize> = (0..units.len())
        .filter(|_| rng.random::<f64>() < config.rate)
        .collect();
    if chosen.is_empty() {
        chosen.push(rng.random_range(0..units.len()));
    }
    let first_regular = (vocab.len() > SPECIALS.len()).then_some(SPECIALS.len() as u32);
    let mut out = seq.clone();
    let mut targets = vec![None; seq.ids.len()];
    let mut positions = Vec::new();
    for u in chosen {
        for &p in &units[u] {
            targets[p] = Some(seq.ids[p]);
            positions.push(p);
            let draw: f64 = rng.random();
            if draw < config.mask_frac {
                out.ids[p] = vocab.mask_id();
            } else if draw < config.mask_frac + config.random_frac {
                out.ids[p] = match first_regular {
                    Some(lo) => rng.random_range(lo..vocab.len() as u32),
                    None => vocab.mask_id(),
                };
            }
        }
    }
    positions.sort_unstable();
    Ok(MaskedSequence {
        seq: out,
        targets,
        positions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NspLabel {
    IsNext,
    NotNext,
}

impl NspLabel {
    pub fn index(self) -> usize {
        match self {
            Self::IsNext => 0,
            Self::NotNext => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NspPair {
    pub seq: TokenSequence,
    pub label: NspLabel,
}

pub fn nsp_pair(a: &str, b: &str, label: NspLabel, vocab: &Vocab, max_len: usize) -> NspPair {
    NspPair {
        seq: encode_pair(a, b, vocab, max_len),
        label,
    }
}

/// One pair per adjacent sentence pair: the true successor with probability
/// `p_next`, otherwise a uniformly drawn sentence whose text differs from the
/// true successor.
pub fn make_nsp_pairs<S: AsRef<str>, R: Rng + ?Sized>(
    sentences: &[S],
    vocab: &Vocab,
    max_len: usize,
    p_next: f64,
    rng: &mut R,
) -> Result<Vec<NspPair>> {
    let n = sentences.len();
    if n < 2
        || sentences
            .iter()
            .all(|s| s.as_ref() == sentences[0].as_ref())
    {
        return Err(ObjectivesError::CorpusTooSmall(n));
    }
    let mut pairs = Vec::with_capacity(n - 1);
    for i in 0..n - 1 {
        let a = sentences[i].as_ref();
        let next = sentences[i + 1].as_ref();
        if rng.random::<f64>() < p_next {
            pairs.push(nsp_pair(a, next, NspLabel::IsNext, vocab, max_len));
        } else {
            let b = loop {
                let j = rng.random_range(0..n);
                if sentences[j].as_ref() != next {
                    break sentences[j].as_ref();
                }
            };
            pairs.push(nsp_pair(a, b, NspLabel::NotNext, vocab, max_len));
        }
    }
    Ok(pairs)
}

/// A pair-encoded, masked sequence carrying both pretraining targets.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainExample {
    pub masked: MaskedSequence,
    pub nsp: NspLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub max_len: usize,
    pub p_next: f64,
    pub mask: MaskConfig,
    pub seed: u64,
}

impl Default for PretrainHyper {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 32,
            lr: 1e-4,
            warmup_frac: 0.1,
            weight_decay: 0.01,
            max_len: 64,
            p_next: 0.5,
            mask: MaskConfig::default(),
            seed: 0,
        }
    }
}

impl PretrainHyper {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        self.mask.validate()?;
        let bad = |m: String| Err(ObjectivesError::InvalidHyper(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.max_len < 5 || self.max_len > config.max_positions {
            return bad(format!(
                "max_len {} must lie in 5..={}",
                self.max_len, config.max_positions
            ));
        }
        if !(0.0..=1.0).contains(&self.p_next) || !(0.0..=1.0).contains(&self.warmup_frac) {
            return bad("probabilities must lie in [0, 1]".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {}", self.lr));
        }
        Ok(())
    }
}

/// Pairs adjacent sentences and masks every pair. Pairs with nothing to
/// mask (both sides empty after canonicalization) are skipped.
pub fn build_examples<S: AsRef<str>>(
    sentences: &[S],
    vocab: &Vocab,
    hyper: &PretrainHyper,
) -> Result<Vec<PretrainExample>> {
    let mut rng = stream(hyper.seed, 1);
    let pairs = make_nsp_pairs(sentences, vocab, hyper.max_len, hyper.p_next, &mut rng)?;
    let mut out = Vec::with_capacity(pairs.len());
    for pair in pairs {
        match mask_tokens(&pair.seq, &hyper.mask, &mut rng, vocab) {
            Ok(masked) => out.push(PretrainExample {
                masked,
                nsp: pair.label,
            }),
            Err(ObjectivesError::NoMaskablePositions) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub mlm_loss: f64,
    pub nsp_loss: f64,
}

/// `step,mlm_loss,nsp_loss` rows with fixed six-decimal formatting.
pub fn history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("step,mlm_loss,nsp_loss\n");
    for r in history {
        out.push_str(&format!("{},{:.6},{:.6}\n", r.step, r.mlm_loss, r.nsp_loss));
    }
    out
}

/// Names of the pretraining heads stored next to the encoder tensors.
pub const MLM_BIAS: &str = "mlm.b";
pub const NSP_W: &str = "nsp.w";
pub const NSP_B: &str = "nsp.b";

#[derive(Debug, Clone)]
pub struct PretrainState {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub optimizer: AdamW,
    pub step: u64,
    pub history: Vec<LossRecord>,
}

impl PretrainState {
    /// Fresh encoder plus zero MLM bias and a small random NSP head.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, 0);
        let mut params = encoder::init_params(&config, &mut rng)?;
        let h = config.hidden;
        params.insert(MLM_BIAS, Tensor::zeros(vec![config.vocab_size]))?;
        let w: Vec<f32> = (0..h * 2)
            .map(|_| truncated_normal(&mut rng, encoder::INIT_STD) as f32)
            .collect();
        params.insert(NSP_W, Tensor::from_vec(vec![h, 2], w)?)?;
        params.insert(NSP_B, Tensor::zeros(vec![2]))?;
        Ok(Self::from_params(config, params))
    }

    /// Wraps existing parameters with a fresh optimizer at step 0.
    pub fn from_params(config: ModelConfig, params: ParamStore<f32>) -> Self {
        let optimizer = AdamW::new(AdamWConfig::default(), &params);
        Self {
            config,
            params,
            optimizer,
            step: 0,
            history: Vec::new(),
        }
    }
}

struct BatchGraph {
    mlm_loss: Var,
    nsp_loss: Var,
    nsp_logits: Var,
}

fn batch_graph(
    tape: &mut Tape<f32>,
    params: &ParamStore<f32>,
    bound: &[Var],
    config: &ModelConfig,
    batch: &[PretrainExample],
    training: bool,
    rng: &mut SeededRng,
) -> Result<BatchGraph> {
    if batch.is_empty() {
        return Err(ObjectivesError::EmptyBatch);
    }
    let vars = EncoderVars::new(params, bound, config)?;
    let mut masked_rows = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    let mut pooled = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for ex in batch {
        let out = encode_real(tape, &vars, config, &ex.masked.seq, training, rng)?;
        masked_rows.push(tape.gather_rows(out.hidden, &ex.masked.positions)?);
        targets.extend(ex.masked.target_ids());
        pooled.push(out.pooled);
        labels.push(ex.nsp.index());
    }
    let hidden = tape.concat_rows(&masked_rows)?;
    let mlm_logits = tape.matmul_t(hidden, vars.tok)?;
    let mlm_b = bound_var(params, bound, MLM_BIAS)?;
    let mlm_logits = tape.add_row(mlm_logits, mlm_b)?;
    let mlm_loss = tape.cross_entropy_logits(mlm_logits, &targets)?;

    let pooled = tape.concat_rows(&pooled)?;
    let head = (
        bound_var(params, bound, NSP_W)?,
        bound_var(params, bound, NSP_B)?,
    );
    let nsp_logits = dense(tape, pooled, head)?;
    let nsp_loss = tape.cross_entropy_logits(nsp_logits, &labels)?;
    Ok(BatchGraph {
        mlm_loss,
        nsp_loss,
        nsp_logits,
    })
}

/// One joint update on `batch` at rate `lr`. Returns the batch's losses
/// before the update.
pub fn pretrain_step(
    state: &mut PretrainState,
    batch: &[PretrainExample],
    lr: f64,
    rng: &mut SeededRng,
) -> Result<LossRecord> {
    let mut tape = Tape::new();
    let bound = state.params.bind(&mut tape, |_| true);
    let g = batch_graph(
        &mut tape,
        &state.params,
        &bound,
        &state.config,
        batch,
        true,
        rng,
    )?;
    let mlm = tape.value(g.mlm_loss).data()[0] as f64;
    let nsp = tape.value(g.nsp_loss).data()[0] as f64;
    if !mlm.is_finite() || !nsp.is_finite() {
        return Err(ObjectivesError::NonFiniteLoss(state.step));
    }
    let total = tape.add(g.mlm_loss, g.nsp_loss)?;
    let grads = tape.backward(total)?;
    state.params.accumulate_grads(&bound, &grads)?;
    state.optimizer.step(&mut state.params, lr);
    if !state.params.all_finite() {
        return Err(ObjectivesError::NonFiniteLoss(state.step));
    }
    state.step += 1;
    let record = LossRecord {
        step: state.step,
        mlm_loss: mlm,
        nsp_loss: nsp,
    };
    state.history.push(record);
    Ok(record)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainEval {
    pub mlm_loss: f64,
    pub nsp_loss: f64,
    pub nsp_accuracy: f64,
}

/// Inference-mode losses over `examples`, weighted by batch composition.
pub fn evaluate_pretrain(
    state: &PretrainState,
    examples: &[PretrainExample],
    batch_size: usize,
) -> Result<PretrainEval> {
    if examples.is_empty() {
        return Err(ObjectivesError::EmptyBatch);
    }
    let mut rng = stream(0, 0);
    let (mut mlm_sum, mut mlm_n, mut nsp_sum, mut correct) = (0.0, 0usize, 0.0, 0usize);
    for batch in examples.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let bound = state.params.bind(&mut tape, |_| false);
        let g = batch_graph(
            &mut tape,
            &state.params,
            &bound,
            &state.config,
            batch,
            false,
            &mut rng,
        )?;
        let m: usize = batch.iter().map(|e| e.masked.positions.len()).sum();
        mlm_sum += tape.value(g.mlm_loss).data()[0] as f64 * m as f64;
        mlm_n += m;
        nsp_sum += tape.value(g.nsp_loss).data()[0] as f64 * batch.len() as f64;
        let logits = tape.value(g.nsp_logits);
        for (i, ex) in batch.iter().enumerate() {
            if crate::numerics::argmax(logits.row(i)) == ex.nsp.index() {
                correct += 1;
            }
        }
    }
    Ok(PretrainEval {
        mlm_loss: mlm_sum / mlm_n as f64,
        nsp_loss: nsp_sum / examples.len() as f64,
        nsp_accuracy: correct as f64 / examples.len() as f64,
    })
}

/// Runs `hyper.epochs` epochs of shuffled mini-batches over prebuilt
/// examples, calling `on_epoch(state, epoch)` after each epoch. The step
/// counter and loss history continue from `state`.
pub fn pretrain_examples<F>(
    state: &mut PretrainState,
    examples: &[PretrainExample],
    hyper: &PretrainHyper,
    mut on_epoch: F,
) -> Result<()>
where
    F: FnMut(&PretrainState, usize) -> std::io::Result<()>,
{
    hyper.validate(&state.config)?;
    if hyper.epochs == 0 {
        return Ok(());
    }
    if examples.is_empty() {
        return Err(ObjectivesError::EmptyBatch);
    }
    state.optimizer.config.weight_decay = hyper.weight_decay;
    let per_epoch = examples.len().div_ceil(hyper.batch_size) as u64;
    let schedule = LinearSchedule::with_warmup_fraction(
        hyper.lr,
        per_epoch * hyper.epochs as u64,
        hyper.warmup_frac,
    );
    let start = state.step;
    let mut dropout_rng = stream(hyper.seed, 2 + (start << 8));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut stream(hyper.seed, 3 + ((start + epoch as u64) << 8)));
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<PretrainExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let lr = schedule.rate(state.step - start);
            let r = pretrain_step(state, &batch, lr, &mut dropout_rng)?;
            log::debug!(
                "step {} mlm {:.4} nsp {:.4}",
                r.step,
                r.mlm_loss,
                r.nsp_loss
            );
        }
        if let Some(last) = state.history.last() {
            log::info!(
                "epoch {} done at step {}: mlm {:.4} nsp {:.4}",
                epoch + 1,
                state.step,
                last.mlm_loss,
                last.nsp_loss
            );
        }
        on_epoch(state, epoch)?;
    }
    Ok(())
}

/// Pretrains a fresh toy-or-larger encoder on `sentences` (one per entry,
/// in corpus order).
pub fn pretrain<S, F>(
    sentences: &[S],
    vocab: &Vocab,
    config: ModelConfig,
    hyper: &PretrainHyper,
    on_epoch: F,
) -> Result<PretrainState>
where
    S: AsRef<str>,
    F: FnMut(&PretrainState, usize) -> std::io::Result<()>,
{
    hyper.validate(&config)?;
    if config.vocab_size != vocab.len() {
        return Err(ObjectivesError::InvalidHyper(format!(
            "model vocab_size {} differs from vocab length {}",
            config.vocab_size,
            vocab.len()
        )));
    }
    let mut state = PretrainState::new(config, hyper.seed)?;
    if hyper.epochs == 0 {
        return Ok(state);
    }
    let examples = build_examples(sentences, vocab, hyper)?;
    pretrain_examples(&mut state, &examples, hyper, on_epoch)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::seeded;
    use crate::tokenizer::encode;

    fn vocab() -> Vocab {
        Vocab::with_pieces(&["good", "bad", "film", "play", "##ing", "##s", "very"]).unwrap()
    }

    #[test]
    fn units_group_continuations() {
        let v = vocab();
        let seq = encode("very good playing films", &v, 16);
        // [CLS] very good play ##ing film ##s [SEP]
        let units = maskable_units(&seq, &v, true);
        assert_eq!(units, vec![vec![1], vec![2], vec![3, 4], vec![5, 6]]);
        assert_eq!(maskable_units(&seq, &v, false).len(), 6);
    }

    #[test]
    fn single_maskable_token_is_forced() {
        let v = vocab();
        let seq = encode("good", &v, 8);
        let mut rng = seeded(1);
        for _ in 0..100 {
            let m = mask_tokens(&seq, &MaskConfig::default(), &mut rng, &v).unwrap();
            assert_eq!(m.positions, vec![1]);
            assert_eq!(m.targets[1], Some(v.id("good").unwrap()));
            assert_eq!(m.restore(), seq);
        }
    }

    #[test]
    fn empty_text_has_nothing_to_mask() {
        let v = vocab();
        let seq = encode("", &v, 8);
        assert!(matches!(
            mask_tokens(&seq, &MaskConfig::default(), &mut seeded(0), &v),
            Err(ObjectivesError::NoMaskablePositions)
        ));
    }

    #[test]
    fn bad_rates_rejected() {
        let v = vocab();
        let seq = encode("good", &v, 8);
        for rate in [0.0, 1.0, -0.1] {
            let c = MaskConfig {
                rate,
                ..Default::default()
            };
            assert!(mask_tokens(&seq, &c, &mut seeded(0), &v).is_err());
        }
    }

    #[test]
    fn forced_next_pair() {
        let v = vocab();
        let s = ["good film", "bad film"];
        let pairs = make_nsp_pairs(&s, &v, 16, 1.0, &mut seeded(0)).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].label, NspLabel::IsNext);
        assert_eq!(pairs[0].seq, encode_pair("good film", "bad film", &v, 16));
    }

    #[test]
    fn random_successor_never_true_successor() {
        let v = vocab();
        let s = ["good", "bad", "film", "very", "good"];
        let mut rng = seeded(2);
        for _ in 0..200 {
            for (i, p) in make_nsp_pairs(&s, &v, 16, 0.0, &mut rng)
                .unwrap()
                .iter()
                .enumerate()
            {
                assert_eq!(p.label, NspLabel::NotNext);
                assert_ne!(p.seq, encode_pair(s[i], s[i + 1], &v, 16));
            }
        }
    }

    #[test]
    fn tiny_corpora_rejected() {
        let v = vocab();
        assert!(matches!(
            make_nsp_pairs(&["good"], &v, 16, 0.5, &mut seeded(0)),
            Err(ObjectivesError::CorpusTooSmall(1))
        ));
        assert!(make_nsp_pairs(&["good", "good"], &v, 16, 0.5, &mut seeded(0)).is_err());
    }

    #[test]
    fn csv_layout() {
        let h = [LossRecord {
            step: 1,
            mlm_loss: 2.5,
            nsp_loss: 0.7,
        }];
        assert_eq!(
            history_csv(&h),
            "step,mlm_loss,nsp_loss\n1,2.500000,0.700000\n"
        );
    }

    #[test]
    fn zero_epochs_returns_initial_state() {
        let v = vocab();
        let config = ModelConfig::preset("toy").unwrap().with_vocab_size(v.len());
        let hyper = PretrainHyper {
            epochs: 0,
            max_len: 16,
            ..Default::default()
        };
        let s = pretrain(&["good film", "bad"], &v, config, &hyper, |_, _| Ok(())).unwrap();
        assert_eq!(s.step, 0);
        assert_eq!(s.params, PretrainState::new(config, 0).unwrap().params);
    }
}
