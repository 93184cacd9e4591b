use std::collections::HashMap;

use finesent::classify::*;
use finesent::encoder::{init_params, ModelConfig};
use finesent::numerics::rng::seeded;
use finesent::synth;
use finesent::tokenizer::{build_vocab, Vocab};
use finesent::treebank::{extract_phrases, Corpus, PhraseRecord, Split};
use finesent::ParamStore;
use proptest::prelude::*;

fn vocab_for(corpus: &Corpus) -> Vocab {
    build_vocab(&corpus.sentences(), 200).unwrap()
}

fn roots(c: &Corpus) -> Vec<PhraseRecord> {
    c.records().into_iter().filter(|r| r.is_root).collect()
}

fn setup(seed: u64) -> (Corpus, Corpus, Vocab, ModelConfig, ParamStore<f32>) {
    let train = synth::corpus(Split::Train, 64, seed);
    let dev = synth::corpus(Split::Dev, 200, seed);
    let vocab = vocab_for(&train);
    let config = ModelConfig::preset("toy")
        .unwrap()
        .with_vocab_size(vocab.len());
    let params = init_params(&config, &mut seeded(seed)).unwrap();
    (train, dev, vocab, config, params)
}

fn hyper(freeze: bool, epochs: usize) -> FinetuneHyper {
    FinetuneHyper {
        epochs,
        batch_size: 16,
        lr: if freeze { 3e-3 } else { 1e-3 },
        max_len: 32,
        ..FinetuneHyper::new(freeze)
    }
}

fn root_accuracy(model: &SentimentModel, corpus: &Corpus) -> f64 {
    let r = evaluate(model, corpus, &[(model.task, Scope::Root)]).unwrap();
    r.cells[0].accuracy.unwrap()
}

#[test]
fn overfits_small_training_set() {
    let (train, _, vocab, config, params) = setup(1);
    let recs = roots(&train);
    let h = FinetuneHyper {
        batch_size: 8,
        ..hyper(false, 50)
    };
    let out = finetune(&recs, &recs, &params, &config, &vocab, Task::Sst5, &h).unwrap();
    let acc = root_accuracy(&out.model, &train);
    assert!(acc >= 0.95, "{acc} {:?}", out.history.last());
    assert_eq!(out.best_dev_root, Some(acc));
}

#[test]
fn zero_epochs_returns_inputs() {
    let (train, _, vocab, config, params) = setup(2);
    let out = finetune(
        &roots(&train),
        &[],
        &params,
        &config,
        &vocab,
        Task::Sst5,
        &hyper(false, 0),
    )
    .unwrap();
    for (name, t) in params.iter() {
        assert_eq!(out.model.params.get(name).unwrap().data(), t.data());
    }
    assert!(out.history.is_empty() && out.best_epoch.is_none());
}

#[test]
fn full_finetune_beats_frozen_random_encoder() {
    let (_, dev, vocab, config, params) = setup(3);
    let train = synth::corpus(Split::Train, 400, 3);
    let recs = train.records();
    let dev_recs = dev.records();
    let full = finetune(
        &recs,
        &dev_recs,
        &params,
        &config,
        &vocab,
        Task::Sst5,
        &hyper(false, 6),
    )
    .unwrap();
    let frozen = finetune(
        &recs,
        &dev_recs,
        &params,
        &config,
        &vocab,
        Task::Sst5,
        &hyper(true, 6),
    )
    .unwrap();
    let (_, majority) = majority_baseline(&roots(&dev), Task::Sst5).unwrap();
    let full_acc = root_accuracy(&full.model, &dev);
    let frozen_acc = root_accuracy(&frozen.model, &dev);
    assert!(
        full_acc > majority && full_acc > 0.2,
        "{full_acc} vs {majority}"
    );
    assert!(full_acc >= frozen_acc, "{full_acc} < {frozen_acc}");
    // Untrained features carry little signal: the probe stays near the
    // majority rate (3 binomial standard deviations).
    let sd = (majority * (1.0 - majority) / dev.trees.len() as f64).sqrt();
    eprintln!("full {full_acc:.3} frozen {frozen_acc:.3} majority {majority:.3} sd {sd:.3}");
    assert!(
        (frozen_acc - majority).abs() < 3.0 * sd,
        "{frozen_acc} vs {majority}"
    );
}

#[test]
fn finetune_is_deterministic() {
    let (train, dev, vocab, config, params) = setup(4);
    let h = hyper(false, 2);
    let a = finetune(
        &train.records(),
        &dev.records(),
        &params,
        &config,
        &vocab,
        Task::Sst2,
        &h,
    )
    .unwrap();
    let b = finetune(
        &train.records(),
        &dev.records(),
        &params,
        &config,
        &vocab,
        Task::Sst2,
        &h,
    )
    .unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.history, b.history);
}

#[test]
fn finetune_input_errors() {
    let (train, _, vocab, config, params) = setup(5);
    let neutral: Vec<PhraseRecord> = train
        .records()
        .into_iter()
        .filter(|r| r.label.value() == 2)
        .collect();
    assert!(matches!(
        finetune(
            &neutral,
            &[],
            &params,
            &config,
            &vocab,
            Task::Sst2,
            &hyper(false, 1)
        ),
        Err(ClassifyError::EmptyTrainingSet(Task::Sst2))
    ));
    let mut with_head = params.clone();
    with_head
        .insert(HEAD_W, finesent::Tensor::zeros(vec![64, 2]))
        .unwrap();
    with_head
        .insert(HEAD_B, finesent::Tensor::zeros(vec![2]))
        .unwrap();
    assert!(matches!(
        finetune(
            &train.records(),
            &[],
            &with_head,
            &config,
            &vocab,
            Task::Sst5,
            &hyper(false, 1)
        ),
        Err(ClassifyError::LabelSpaceMismatch { .. })
    ));
}

#[test]
fn inference_is_independent_of_thread_count() {
    let (train, dev, vocab, config, params) = setup(6);
    let out = finetune(
        &roots(&train),
        &[],
        &params,
        &config,
        &vocab,
        Task::Sst5,
        &hyper(false, 1),
    )
    .unwrap();
    let cells = [(Task::Sst5, Scope::All), (Task::Sst5, Scope::Root)];
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| evaluate(&out.model, &dev, &cells).unwrap())
    };
    assert_eq!(run(1), run(4));
    let p1 = out.model.predict("the film is superb").unwrap();
    let p2 = out.model.predict("the film is superb").unwrap();
    assert_eq!(p1, p2);
    assert!((p1.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
}

struct Flip<'a>(&'a Oracle);
struct Oracle(HashMap<String, usize>);

impl Classifier for Oracle {
    fn task(&self) -> Task {
        Task::Sst2
    }
    fn predict(&self, text: &str) -> Result<Prediction> {
        let label = self.0[text];
        Ok(Prediction {
            probs: if label == 0 {
                vec![1.0, 0.0]
            } else {
                vec![0.0, 1.0]
            },
            label,
        })
    }
}

impl Classifier for Flip<'_> {
    fn task(&self) -> Task {
        Task::Sst2
    }
    fn predict(&self, text: &str) -> Result<Prediction> {
        let p = self.0.predict(text)?;
        Ok(Prediction {
            probs: p.probs.into_iter().rev().collect(),
            label: 1 - p.label,
        })
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn all_scope_counts_every_node(seed in any::<u64>(), n in 1usize..20) {
        let corpus = synth::corpus(Split::Dev, n, seed);
        let guesses: HashMap<String, usize> = corpus
            .records()
            .into_iter()
            .map(|r| (r.text.clone(), (seed as usize + r.text.len()) % 2))
            .collect();
        let model = Oracle(guesses);
        let report = evaluate(&model, &corpus, &[(Task::Sst2, Scope::All)]).unwrap();
        let nodes: usize = corpus.trees.iter().map(|t| t.node_count()).sum();
        let non_neutral: usize = corpus
            .trees
            .iter()
            .flat_map(extract_phrases)
            .filter(|r| Task::Sst2.target(r.label).is_some())
            .count();
        prop_assert_eq!(corpus.records().len(), nodes);
        prop_assert_eq!(report.cells[0].n, non_neutral);

        // Flipping every binary prediction complements the accuracy.
        let flipped = evaluate(&Flip(&model), &corpus, &[(Task::Sst2, Scope::All)]).unwrap();
        if let (Some(a), Some(b)) = (report.cells[0].accuracy, flipped.cells[0].accuracy) {
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn head_probabilities_normalize(
        pooled in proptest::collection::vec(-1f32..1.0, 8),
        bias in proptest::collection::vec(-50f32..50.0, 5),
        seed in any::<u64>(),
        training in any::<bool>(),
    ) {
        let mut head = ClassifierHead::init(8, Task::Sst5, 0.1, &mut seeded(seed));
        head.bias = finesent::Tensor::from_vec(vec![5], bias).unwrap();
        let p = head_forward(&pooled, &head, training, &mut seeded(seed)).unwrap();
        prop_assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert_eq!(p.label, finesent::numerics::argmax(&p.probs));
    }

    #[test]
    fn label_invariant_under_logit_shift(
        logits in proptest::collection::vec(-20f64..20.0, 5),
        shift in -1e3f64..1e3,
    ) {
        let a = Prediction::from_logits(&logits);
        let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
        prop_assert_eq!(a.label, Prediction::from_logits(&shifted).label);
    }
}
