//! Shared fixtures for the benchmarks: a synthetic corpus, a vocab learned
//! from it and a toy-sized model.

use finesent::encoder::{init_params, ModelConfig};
use finesent::numerics::rng::stream;
use finesent::tokenizer::build_vocab;
use finesent::treebank::Split;
use finesent::{synth, ParamStore, Vocab};

pub struct Fixture {
    pub sentences: Vec<String>,
    pub vocab: Vocab,
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

impl Fixture {
    /// `n` synthetic sentences and a toy encoder sized to their vocab.
    pub fn toy(n: usize, seed: u64) -> Self {
        let sentences = synth::corpus(Split::Train, n, seed).sentences();
        let vocab = build_vocab(&sentences, 500).expect("synthetic corpus builds a vocab");
        let config = ModelConfig::preset("toy")
            .expect("toy preset exists")
            .with_vocab_size(vocab.len());
        let params = init_params(&config, &mut stream(seed, 9)).expect("toy config is valid");
        Self {
            sentences,
            vocab,
            config,
            params,
        }
    }
}
