//! Glue between the corpus and the model: builds training pairs and
//! tokenizers and encodes the three splits the same way everywhere.

use crate::error::Result;
use crate::records::{Certificate, Icd10Code, MAX_CODES};
use crate::textprep::{bpe_train, concat_backward, encode_pairs, EncodedPair, TokenizerModel, TrainingPair};
use crate::transformer::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenizerSettings {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub max_src_len: usize,
}

impl Default for TokenizerSettings {
    fn default() -> Self {
        TokenizerSettings {
            src_vocab: 2033,
            tgt_vocab: 500,
            max_src_len: 128,
        }
    }
}

pub fn training_pairs(certs: &[Certificate]) -> Vec<TrainingPair> {
    certs.iter().map(concat_backward).collect()
}

/// Source and target tokenizers learned from the training pairs only.
pub fn train_tokenizers(
    pairs: &[TrainingPair],
    settings: &TokenizerSettings,
) -> Result<(TokenizerModel, TokenizerModel)> {
    let sources: Vec<&str> = pairs.iter().map(|p| p.source_text.as_str()).collect();
    let targets: Vec<String> = pairs.iter().map(|p| crate::textprep::codes_text(&p.target_codes)).collect();
    let src = bpe_train(&sources, settings.src_vocab, settings.max_src_len)?;
    let tgt = bpe_train(&targets, settings.tgt_vocab, MAX_CODES)?;
    Ok((src, tgt))
}

/// Encoded splits plus the tokenizers that produced them.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub src_tok: TokenizerModel,
    pub tgt_tok: TokenizerModel,
    pub train: Vec<EncodedPair>,
    pub val: Vec<EncodedPair>,
    pub test: Vec<EncodedPair>,
}

impl Prepared {
    pub fn new(
        train: &[Certificate],
        val: &[Certificate],
        test: &[Certificate],
        settings: &TokenizerSettings,
    ) -> Result<Self> {
        let train_pairs = training_pairs(train);
        let (src_tok, tgt_tok) = train_tokenizers(&train_pairs, settings)?;
        let enc = |certs: &[Certificate]| encode_pairs(&training_pairs(certs), &src_tok, &tgt_tok);
        Ok(Prepared {
            train: encode_pairs(&train_pairs, &src_tok, &tgt_tok)?,
            val: enc(val)?,
            test: enc(test)?,
            src_tok,
            tgt_tok,
        })
    }

    /// `base` with vocabulary sizes and the source length taken from the tokenizers.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            src_vocab_size: self.src_tok.vocab_size(),
            tgt_vocab_size: self.tgt_tok.vocab_size(),
            max_src_len: self.src_tok.max_len(),
            ..base.clone()
        }
    }
}

/// Gold code sequences of the certificates, in line order 6 to 1.
pub fn gold_codes(certs: &[Certificate]) -> Vec<Vec<Icd10Code>> {
    certs.iter().map(|c| concat_backward(c).target_codes).collect()
}
