#![allow(dead_code)]

use medseq::pipeline::{Prepared, TokenizerSettings};
use medseq::synth::{build_default_lexicon, generate_corpus, split_corpus, GeneratorConfig};
use medseq::transformer::ModelConfig;

/// A small encoded corpus with compact tokenizers.
pub fn small_prepared(n_records: usize, seed: u64) -> Prepared {
    let lexicon = build_default_lexicon(seed);
    let certs = generate_corpus(
        &GeneratorConfig {
            n_records,
            seed,
            ..GeneratorConfig::default()
        },
        &lexicon,
    )
    .unwrap();
    let per_year = (n_records / 60).max(1);
    let (train, val, test) = split_corpus(&certs, per_year, per_year, seed).unwrap();
    let settings = TokenizerSettings {
        src_vocab: 400,
        tgt_vocab: 400,
        max_src_len: 128,
    };
    Prepared::new(&train, &val, &test, &settings).unwrap()
}

pub fn small_model_config(prepared: &Prepared) -> ModelConfig {
    prepared.model_config(&ModelConfig {
        hidden_size: 16,
        n_layers_enc: 1,
        n_layers_dec: 1,
        n_heads: 2,
        ffn_size: 32,
        layer_postprocess_dropout: 0.0,
        attention_dropout: 0.0,
        relu_dropout: 0.0,
        ..ModelConfig::default()
    })
}
