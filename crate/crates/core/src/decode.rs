//! Beam search over target tokens and the per-prediction confidence score.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::records::{join_codes, parse_codes, Icd10Code, SideVariables, MAX_CODES};
use crate::tensor::{Graph, Real, Tensor};
use crate::textprep::{codes_from_text, EncodedPair, TokenizerModel, BOS, EOS, PAD, UNK};
use crate::transformer::{EncoderOutput, TransformerModel};

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub codes: Vec<Icd10Code>,
    /// Geometric-mean token probability, in (0, 1].
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam_width: usize,
    pub alpha: f64,
    /// Tokens emitted before EOS is forced.
    pub max_tokens: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_width: 4,
            alpha: 0.6,
            max_tokens: MAX_CODES,
        }
    }
}

/// A finished hypothesis. `tokens` ends with EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub log_probs: Vec<f64>,
    /// Summed log-probability divided by the length penalty.
    pub ranking_score: f64,
}

impl Hypothesis {
    pub fn new(tokens: Vec<u32>, log_probs: Vec<f64>, alpha: f64) -> Self {
        let total: f64 = log_probs.iter().sum();
        let ranking_score = total / length_penalty(tokens.len(), alpha);
        Hypothesis {
            tokens,
            log_probs,
            ranking_score,
        }
    }

    /// Emitted tokens without the final EOS.
    pub fn body(&self) -> &[u32] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }

    pub fn score(&self) -> f64 {
        prediction_score(&self.log_probs)
    }
}

/// `((5 + len) / 6)^alpha`
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

/// `exp(mean log p)` over emitted tokens, EOS included.
pub fn prediction_score(log_probs: &[f64]) -> f64 {
    if log_probs.is_empty() {
        return 1.0;
    }
    let mean = log_probs.iter().sum::<f64>() / log_probs.len() as f64;
    mean.exp().min(1.0)
}

/// Higher ranking score first, then the lexicographically smaller token sequence.
pub fn rank_order(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.ranking_score
        .partial_cmp(&a.ranking_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Tokens that may be emitted: everything but PAD, BOS and UNK.
pub fn emittable(token: u32) -> bool {
    !matches!(token, PAD | BOS | UNK)
}

fn log_softmax_row<F: Real>(row: &[F]) -> Vec<f64> {
    let xs: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - lse).collect()
}

/// Next-token log-probabilities after each prefix (BOS is prepended here).
pub fn next_token_log_probs<F: Real>(
    model: &TransformerModel<F>,
    memory: &Tensor<F>,
    key_valid: &[bool],
    prefixes: &[Vec<u32>],
) -> Result<Vec<Vec<f64>>> {
    let n = prefixes.len();
    let src_len = key_valid.len();
    let mut tiled = Vec::with_capacity(memory.numel() * n);
    for _ in 0..n {
        tiled.extend_from_slice(memory.data());
    }
    let mut g = Graph::with_params(model.params());
    let mem = g.constant(Tensor::new(vec![n * src_len, memory.last_dim()], tiled)?);
    let enc = EncoderOutput {
        memory: mem,
        batch: n,
        src_len,
        key_valid: key_valid.repeat(n),
    };
    let inputs: Vec<Vec<u32>> = prefixes
        .iter()
        .map(|p| std::iter::once(BOS).chain(p.iter().copied()).collect())
        .collect();
    let len = inputs.iter().map(Vec::len).max().unwrap_or(1);
    let logits = model.decode(&mut g, &enc, &inputs)?;
    let v = model.config().tgt_vocab_size;
    let data = g.value(logits).data();
    Ok(inputs
        .iter()
        .enumerate()
        .map(|(i, inp)| {
            let row = i * len + inp.len() - 1;
            log_softmax_row(&data[row * v..(row + 1) * v])
        })
        .collect())
}

/// Encoder memory for one source, as a plain tensor.
pub fn encode_source<F: Real>(
    model: &TransformerModel<F>,
    src: &[u32],
    side: SideVariables,
) -> Result<(Tensor<F>, Vec<bool>)> {
    let mut g = Graph::with_params(model.params());
    let enc = model.encode(&mut g, &[src.to_vec()], &[side])?;
    Ok((g.value(enc.memory).clone(), enc.key_valid))
}

/// Shrinking beam search. Each step keeps the best `beam_width - finished`
/// continuations by summed log-probability; those ending in EOS are set
/// aside as finished. After `max_tokens` emitted tokens only EOS may follow.
/// Finished hypotheses are ranked by length-penalized log-probability.
pub fn beam_search<F: Real>(
    model: &TransformerModel<F>,
    src: &[u32],
    side: SideVariables,
    cfg: &BeamConfig,
) -> Result<Vec<Hypothesis>> {
    if cfg.beam_width == 0 {
        return Err(Error::config("beam width must be at least 1"));
    }
    if cfg.max_tokens + 1 > model.config().max_tgt_len {
        return Err(Error::config(format!(
            "max_tokens {} does not fit {} decoder positions",
            cfg.max_tokens,
            model.config().max_tgt_len
        )));
    }
    let (memory, key_valid) = encode_source(model, src, side)?;
    let v = model.config().tgt_vocab_size as u32;
    // (tokens, per-token log-probs, sum)
    let mut alive: Vec<(Vec<u32>, Vec<f64>, f64)> = vec![(Vec::new(), Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    while !alive.is_empty() && finished.len() < cfg.beam_width {
        let prefixes: Vec<Vec<u32>> = alive.iter().map(|a| a.0.clone()).collect();
        let lps = next_token_log_probs(model, &memory, &key_valid, &prefixes)?;
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        for (i, (toks, _, sum)) in alive.iter().enumerate() {
            let forced = toks.len() >= cfg.max_tokens;
            for t in (0..v).filter(|&t| emittable(t) && (!forced || t == EOS)) {
                cands.push((sum + lps[i][t as usize], i, t));
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then_with(|| alive[a.1].0.cmp(&alive[b.1].0))
                .then_with(|| a.2.cmp(&b.2))
        });
        cands.truncate(cfg.beam_width - finished.len());
        let mut next = Vec::with_capacity(cands.len());
        for (sum, i, t) in cands {
            let mut toks = alive[i].0.clone();
            let mut lp = alive[i].1.clone();
            toks.push(t);
            lp.push(lps[i][t as usize]);
            if t == EOS {
                finished.push(Hypothesis::new(toks, lp, cfg.alpha));
            } else {
                next.push((toks, lp, sum));
            }
        }
        alive = next;
    }
    finished.sort_by(rank_order);
    Ok(finished)
}

/// Converts a hypothesis to codes with the target tokenizer, keeping at most 20.
pub fn hypothesis_codes(h: &Hypothesis, tgt_tok: &TokenizerModel) -> Result<Vec<Icd10Code>> {
    let text = tgt_tok.decode(h.body())?;
    let mut codes = codes_from_text(&text);
    codes.truncate(MAX_CODES);
    Ok(codes)
}

/// Best hypothesis for one encoded pair.
pub fn predict<F: Real>(
    model: &TransformerModel<F>,
    pair: &EncodedPair,
    tgt_tok: &TokenizerModel,
    cfg: &BeamConfig,
) -> Result<Prediction> {
    let hyps = beam_search(model, &pair.src, pair.side, cfg)?;
    let best = hyps
        .first()
        .ok_or_else(|| Error::validation(format!("record {}: beam search found nothing", pair.id)))?;
    Ok(Prediction {
        id: pair.id.clone(),
        codes: hypothesis_codes(best, tgt_tok)?,
        score: best.score(),
    })
}

/// Predictions for many pairs in input order, split over `workers` threads.
pub fn predict_all<F: Real>(
    model: &TransformerModel<F>,
    pairs: &[EncodedPair],
    tgt_tok: &TokenizerModel,
    cfg: &BeamConfig,
    workers: usize,
) -> Result<Vec<Prediction>> {
    let workers = workers.clamp(1, pairs.len().max(1));
    if workers == 1 {
        return pairs.iter().map(|p| predict(model, p, tgt_tok, cfg)).collect();
    }
    let chunk = pairs.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = pairs
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|p| predict(model, p, tgt_tok, cfg))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(pairs.len());
        for h in handles {
            out.extend(h.join().expect("prediction worker panicked")?);
        }
        Ok(out)
    })
}

/// Tab-separated `id`, space-joined codes, score with 6 decimals.
pub fn format_predictions(preds: &[Prediction]) -> String {
    let mut out = String::new();
    for p in preds {
        // Six decimals must not round a positive score down to zero.
        let score = p.score.max(1e-6);
        let _ = writeln!(out, "{}\t{}\t{score:.6}", p.id, join_codes(&p.codes));
    }
    out
}

pub fn parse_predictions(text: &str, source: &str) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(source, i + 1, "row", format!("expected 3 fields, found {}", fields.len())));
        }
        let codes = parse_codes(fields[1]).map_err(|e| Error::parse(source, i + 1, "codes", e.to_string()))?;
        let score: f64 = fields[2]
            .parse()
            .map_err(|e| Error::parse(source, i + 1, "score", format!("{e}")))?;
        if !(score > 0.0 && score <= 1.0) {
            return Err(Error::parse(source, i + 1, "score", format!("{score} outside (0, 1]")));
        }
        out.push(Prediction {
            id: fields[0].to_string(),
            codes,
            score,
        });
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    std::fs::write(path, format_predictions(preds))?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path)?;
    parse_predictions(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::SIDE_CARDINALITIES;
    use crate::transformer::ModelConfig;
    use proptest::prelude::*;

    fn toy(vocab: usize, seed: u64) -> TransformerModel<f64> {
        let cfg = ModelConfig {
            hidden_size: 8,
            n_layers_enc: 1,
            n_layers_dec: 1,
            n_heads: 2,
            ffn_size: 8,
            layer_postprocess_dropout: 0.0,
            attention_dropout: 0.0,
            relu_dropout: 0.0,
            src_vocab_size: 8,
            tgt_vocab_size: vocab,
            max_src_len: 8,
            max_tgt_len: 21,
            side_cardinalities: SIDE_CARDINALITIES,
        };
        // Large weights make the distributions peaked and varied.
        TransformerModel::with_init_scale(cfg, seed, 3.0).unwrap()
    }

    fn side() -> SideVariables {
        SideVariables::new(1, 3, 10, 1).unwrap()
    }

    /// Every sequence of emittable tokens ending in EOS, scored by direct model calls.
    fn exhaustive(model: &TransformerModel<f64>, src: &[u32], max_tokens: usize, alpha: f64) -> Vec<Hypothesis> {
        let (memory, key_valid) = encode_source(model, src, side()).unwrap();
        let v = model.config().tgt_vocab_size as u32;
        let body: Vec<u32> = (0..v).filter(|&t| emittable(t) && t != EOS).collect();
        let mut out = Vec::new();
        let mut frontier: Vec<Vec<u32>> = vec![vec![]];
        for len in 0..=max_tokens {
            let mut next = Vec::new();
            for prefix in &frontier {
                let mut seq = prefix.clone();
                seq.push(EOS);
                // Score each token from scratch on its own prefix.
                let lps: Vec<f64> = (0..seq.len())
                    .map(|i| {
                        let lp = next_token_log_probs(model, &memory, &key_valid, &[seq[..i].to_vec()]).unwrap();
                        lp[0][seq[i] as usize]
                    })
                    .collect();
                out.push(Hypothesis::new(seq, lps, alpha));
                if len < max_tokens {
                    for &t in &body {
                        let mut p = prefix.clone();
                        p.push(t);
                        next.push(p);
                    }
                }
            }
            frontier = next;
        }
        out.sort_by(rank_order);
        out
    }

    #[test]
    fn score_examples() {
        assert_eq!(prediction_score(&[0.0, 0.0, 0.0]), 1.0);
        let s = prediction_score(&[0.9f64.ln(), 0.4f64.ln()]);
        assert!((s - 0.6).abs() < 1e-12);
        for n in 1..6 {
            assert!((prediction_score(&vec![0.3f64.ln(); n]) - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn width_one_is_greedy() {
        let model = toy(9, 2);
        let src = [4u32, 5, 6];
        let cfg = BeamConfig { beam_width: 1, alpha: 0.6, max_tokens: 6 };
        let beam = beam_search(&model, &src, side(), &cfg).unwrap();
        assert_eq!(beam.len(), 1);
        let (memory, kv) = encode_source(&model, &src, side()).unwrap();
        let mut seq: Vec<u32> = Vec::new();
        loop {
            let lp = &next_token_log_probs(&model, &memory, &kv, &[seq.clone()]).unwrap()[0];
            let allowed = |t: u32| emittable(t) && (seq.len() < 6 || t == EOS);
            let best = (0..9u32).filter(|&t| allowed(t)).max_by(|&a, &b| {
                lp[a as usize].partial_cmp(&lp[b as usize]).unwrap().then(b.cmp(&a))
            });
            let best = best.unwrap();
            seq.push(best);
            if best == EOS {
                break;
            }
        }
        assert_eq!(beam[0].tokens, seq);
    }

    #[test]
    fn length_is_bounded() {
        let model = toy(30, 4);
        let hyps = beam_search(&model, &[4, 5], side(), &BeamConfig::default()).unwrap();
        assert_eq!(hyps.len(), 4);
        for h in &hyps {
            assert!(h.body().len() <= MAX_CODES);
            assert_eq!(*h.tokens.last().unwrap(), EOS);
            assert!(h.score() > 0.0 && h.score() <= 1.0);
        }
        for w in hyps.windows(2) {
            assert!(w[0].ranking_score >= w[1].ranking_score);
        }
    }

    #[test]
    fn rejects_zero_width() {
        let model = toy(7, 1);
        let cfg = BeamConfig { beam_width: 0, ..BeamConfig::default() };
        assert!(beam_search(&model, &[4], side(), &cfg).is_err());
    }

    #[test]
    fn prediction_file_roundtrip() {
        let preds = vec![
            Prediction { id: "c1".into(), codes: parse_codes("I10 E119").unwrap(), score: 0.912345 },
            Prediction { id: "c2".into(), codes: vec![], score: 1.0 },
        ];
        let text = format_predictions(&preds);
        assert_eq!(text, "c1\tI10 E119\t0.912345\nc2\t\t1.000000\n");
        assert_eq!(parse_predictions(&text, "p").unwrap(), preds);
        assert!(parse_predictions("c1\tI10\n", "p").is_err());
        assert!(parse_predictions("c1\tI10\t0\n", "p").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn full_width_beam_equals_enumeration(seed: u64, vocab in 5usize..8, max_tokens in 1usize..4, alpha in 0.0f64..1.5) {
            let model = toy(vocab, seed);
            let src = [4u32, 6, 5];
            let all = exhaustive(&model, &src, max_tokens, alpha);
            let cfg = BeamConfig { beam_width: all.len(), alpha, max_tokens };
            let beam = beam_search(&model, &src, side(), &cfg).unwrap();
            prop_assert_eq!(beam.len(), all.len());
            for (b, e) in beam.iter().zip(&all) {
                prop_assert_eq!(&b.tokens, &e.tokens);
                prop_assert!((b.ranking_score - e.ranking_score).abs() < 1e-9);
            }
        }
    }
}
