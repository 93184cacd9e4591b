//! Fine-grained sentiment classification on the Stanford Sentiment Treebank
//! with a from-scratch BERT-style encoder.
//!
//! The pipeline: [`treebank`] parses bracketed trees, [`tokenizer`] turns
//! text into WordPiece sequences, [`encoder`] and [`objectives`] pretrain a
//! Transformer with masked-word and next-sentence prediction, and
//! [`classify`] fine-tunes a dropout + softmax head and scores it.

pub mod checkpoint;
pub mod classify;
pub mod encoder;
pub mod numerics;
pub mod objectives;
pub mod optim;
pub mod synth;
pub mod tokenizer;
pub mod treebank;

pub use checkpoint::{Checkpoint, CheckpointError, Kind};
pub use classify::{
    accuracy, evaluate, finetune, Classifier, ClassifierHead, ClassifyError, EvalReport,
    FinetuneHyper, Prediction, Scope, SentimentModel, Task,
};
pub use encoder::{param_count, EncoderError, ModelConfig};
pub use numerics::{NumericsError, ParamStore, Tape, Tensor};
pub use objectives::{pretrain, ObjectivesError, PretrainHyper, PretrainState};
pub use tokenizer::{TokenSequence, TokenizerError, Vocab};
pub use treebank::{
    BinaryLabel, Corpus, PhraseRecord, PhraseTree, SentimentLabel, Split, StatsReport,
    TreebankError,
};
