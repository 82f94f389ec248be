//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines are always printed. Set
//! `MEDSEQ_ACCEPTANCE_FULL=1` to run the 50,000-certificate variant of
//! criterion 6 instead of the 2,000-certificate one.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use medseq::decode::{
    beam_search, encode_source, next_token_log_probs, predict_all, BeamConfig, Prediction,
};
use medseq::ensemble::{combine, consensus, greedy_select};
use medseq::eval::{
    bootstrap_ci, calibration_curve, f_from, micro_metrics, per_chapter, stratified_report, CodePair, LabeledPair,
    ScoredPair, Stratum,
};
use medseq::pipeline::{gold_codes, training_pairs, Prepared, TokenizerSettings};
use medseq::records::{format_corpus, Certificate, Icd10Code, Origin, SideVariables, YearRange};
use medseq::synth::{build_default_lexicon, generate_corpus, split_corpus, GeneratorConfig};
use medseq::tensor::{finite_diff_check, Graph};
use medseq::textprep::{encode_pairs, EncodedPair, TokenizerModel, EOS};
use medseq::train::{derived_batch_size, train, Checkpoint, TrainConfig, TrainOutcome, Validation};
use medseq::transformer::{ModelConfig, TransformerModel};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn code(s: &str) -> Icd10Code {
    Icd10Code::parse(s).unwrap()
}

fn codes(list: &[&str]) -> Vec<Icd10Code> {
    list.iter().map(|s| code(s)).collect()
}

/// A pool of well-formed codes for random sets.
fn code_pool() -> Vec<Icd10Code> {
    ["A00", "B20", "C349", "E119", "I10", "I251", "I500", "J189", "N179", "R99", "X59", "Y86"]
        .iter()
        .map(|s| code(s))
        .collect()
}

fn random_codes(rng: &mut ChaCha8Rng, pool: &[Icd10Code], max_len: usize) -> Vec<Icd10Code> {
    let n = rng.gen_range(0..=max_len);
    (0..n).map(|_| pool[rng.gen_range(0..pool.len())].clone()).collect()
}

fn criterion_1() -> Outcome {
    let got: Vec<usize> = [296, 336, 312].iter().map(|&h| derived_batch_size(h)).collect();
    check(got == [172, 152, 164], format!("batch sizes {got:?}"))?;
    Ok(format!("296->{}, 336->{}, 312->{}", got[0], got[1], got[2]))
}

/// Global multiset over (record, code) items, matched by sorting both sides.
fn tagged_oracle(pairs: &[CodePair]) -> (u64, u64, u64) {
    let tag = |side: usize| {
        let mut items: Vec<(usize, String)> = pairs
            .iter()
            .enumerate()
            .flat_map(|(r, p)| {
                let list = if side == 0 { &p.0 } else { &p.1 };
                list.iter().map(move |c| (r, c.as_str().to_string()))
            })
            .collect();
        items.sort();
        items
    };
    let (pred, truth) = (tag(0), tag(1));
    let (mut i, mut j, mut tp) = (0, 0, 0u64);
    while i < pred.len() && j < truth.len() {
        match pred[i].cmp(&truth[j]) {
            std::cmp::Ordering::Equal => {
                tp += 1;
                i += 1;
                j += 1;
            }
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
        }
    }
    (tp, pred.len() as u64 - tp, truth.len() as u64 - tp)
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pool = code_pool();
    let mut pairs = Vec::new();
    for _ in 0..1000 {
        let truth = random_codes(&mut rng, &pool, 8);
        let mut pred = truth.clone();
        pred.retain(|_| rng.gen_bool(0.7));
        pred.extend(random_codes(&mut rng, &pool, 3));
        pred.shuffle(&mut rng);
        pairs.push((pred, truth));
    }
    let report = micro_metrics(&pairs).map_err(|e| e.to_string())?;
    let (tp, fp, fn_) = tagged_oracle(&pairs);
    let c = report.counts;
    check((c.tp, c.fp, c.fn_) == (tp, fp, fn_), format!("counts {c:?} vs oracle ({tp},{fp},{fn_})"))?;
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fn_) as f64;
    let f = 2.0 * p * r / (p + r);
    check(
        report.precision == Some(p) && report.recall == Some(r) && report.f_measure == f,
        format!("metrics {:?}/{:?}/{} vs {p}/{r}/{f}", report.precision, report.recall, report.f_measure),
    )?;
    let published = f_from(0.872, 0.784);
    check((published - 0.826).abs() <= 0.002, format!("F(.872,.784) = {published}"))?;
    Ok(format!("1000 pairs match the oracle exactly; F(.872,.784) = {published:.4}"))
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        hidden_size: 8,
        n_layers_enc: 2,
        n_layers_dec: 2,
        n_heads: 2,
        ffn_size: 12,
        layer_postprocess_dropout: 0.0,
        attention_dropout: 0.0,
        relu_dropout: 0.0,
        src_vocab_size: 12,
        tgt_vocab_size: 10,
        max_src_len: 12,
        max_tgt_len: 21,
        ..ModelConfig::default()
    }
}

fn side(gender: u8, year: u8, age: u8, origin: u8) -> SideVariables {
    SideVariables::new(gender, year, age, origin).unwrap()
}

fn criterion_3() -> Outcome {
    let model = TransformerModel::<f64>::new(tiny_model_config(), 3).unwrap();
    let pairs = [
        EncodedPair { id: "a".into(), src: vec![4, 5, 6, 7, 11], tgt: vec![4, 5], side: side(0, 1, 8, 0) },
        EncodedPair { id: "b".into(), src: vec![8, 9], tgt: vec![6, 7, 9], side: side(1, 4, 20, 1) },
        EncodedPair { id: "c".into(), src: vec![10, 4, 4], tgt: vec![], side: side(0, 5, 2, 1) },
    ];
    let refs: Vec<&EncodedPair> = pairs.iter().collect();
    let mut params = model.params().clone();
    let result = finite_diff_check(&mut params, 1e-5, Some((600, 3)), |g| model.sequence_loss(g, &refs, 0.1))
        .map_err(|e| e.to_string())?;
    check(result.coordinates >= 500, format!("only {} coordinates", result.coordinates))?;
    check(result.max_rel_error < 1e-4, format!("max relative error {:e}", result.max_rel_error))?;
    Ok(format!("{} coordinates, max relative error {:.2e}", result.coordinates, result.max_rel_error))
}

fn criterion_4() -> Outcome {
    let cfg = tiny_model_config();
    let model = TransformerModel::<f64>::new(cfg.clone(), 4).unwrap();
    let v = cfg.tgt_vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..100 {
        let src_len = rng.gen_range(1..=cfg.max_src_len);
        let src = vec![(0..src_len).map(|_| rng.gen_range(4..cfg.src_vocab_size as u32)).collect::<Vec<u32>>()];
        let s = side(rng.gen_range(0..2), rng.gen_range(0..6), rng.gen_range(0..25), rng.gen_range(0..2));
        let len = rng.gen_range(2..=cfg.max_tgt_len);
        let prefix: Vec<u32> = (0..len).map(|_| rng.gen_range(0..v as u32)).collect();
        let cut = rng.gen_range(1..len);
        let mut changed = prefix.clone();
        for t in changed.iter_mut().skip(cut) {
            *t = rng.gen_range(0..v as u32);
        }
        let mut g = Graph::with_params(model.params());
        let a = model.forward(&mut g, &src, &[s], &[prefix]).unwrap();
        let b = model.forward(&mut g, &src, &[s], &[changed]).unwrap();
        let (av, bv) = (&g.value(a).data()[..cut * v], &g.value(b).data()[..cut * v]);
        let same = av.iter().zip(bv).all(|(x, y)| x.to_bits() == y.to_bits());
        check(same, format!("perturbation {trial}: positions before {cut} changed"))?;
    }

    let mut zeroed = TransformerModel::<f32>::new(ModelConfig::default(), 5).unwrap();
    for i in 0..4 {
        let id = zeroed.side_projection_id(i);
        zeroed.params_mut().get_mut(id).data_mut().fill(0.0);
    }
    let src = vec![vec![4, 9, 17, 30, 5], vec![6, 7]];
    let mut g = Graph::with_params(zeroed.params());
    let plain = zeroed.embed_unconditioned(&mut g, &src).unwrap();
    let plain = g.value(plain).data().to_vec();
    for (i, sv) in [side(0, 0, 0, 0), side(1, 5, 24, 1), side(0, 3, 11, 1)].into_iter().enumerate() {
        let x = zeroed.embed_source(&mut g, &src, &[sv, sv]).unwrap();
        let same = g.value(x).data().iter().zip(&plain).all(|(a, b)| a.to_bits() == b.to_bits());
        check(same, format!("side setting {i} changed the embedding"))?;
    }
    Ok("100 causal perturbations invariant; zeroed side projections bit-exact".into())
}

fn criterion_5() -> Outcome {
    let lexicon = build_default_lexicon(5);
    let certs = generate_corpus(&GeneratorConfig { n_records: 32, seed: 5, ..GeneratorConfig::default() }, &lexicon)
        .map_err(|e| e.to_string())?;
    let prepared = Prepared::new(&certs, &[], &[], &TokenizerSettings::default()).map_err(|e| e.to_string())?;
    let cfg = prepared.model_config(&ModelConfig::default());
    let model = TransformerModel::<f32>::new(cfg, 5).unwrap();
    let val = Validation { pairs: &prepared.train, tgt_tok: &prepared.tgt_tok };
    let tc = TrainConfig {
        max_steps: 2000,
        batch_size: Some(32),
        eval_every: 50,
        early_stop_patience: 0,
        stop_at_val_f: Some(1.0),
        log_every: 0,
        seed: 5,
        ..TrainConfig::default()
    };
    let out = train(model, &prepared.train, Some(&val), &tc).map_err(|e| e.to_string())?;
    let f = out.best_val_f.unwrap_or(0.0);
    check(f == 1.0, format!("training F {f:.4} after {} steps", out.steps))?;
    Ok(format!("F = 1.0 on 32 pairs after {} steps", out.best_step))
}

struct Scale {
    n_records: usize,
    per_year_val: usize,
    per_year_test: usize,
    batch_size: Option<usize>,
    max_steps: u64,
    eval_every: u64,
    min_f: f64,
}

const CI_SCALE: Scale = Scale {
    n_records: 2000,
    per_year_val: 17,
    per_year_test: 50,
    batch_size: Some(64),
    max_steps: 1500,
    eval_every: 500,
    min_f: 0.70,
};

const FULL_SCALE: Scale = Scale {
    n_records: 50_000,
    per_year_val: 100,
    per_year_test: 500,
    batch_size: Some(128),
    max_steps: 12_000,
    eval_every: 2000,
    min_f: 0.90,
};

/// Trained members and their test predictions, shared by criteria 6 to 8.
struct Synthetic {
    best: TransformerModel<f32>,
    src_tok: TokenizerModel,
    tgt_tok: TokenizerModel,
    test_certs: Vec<Certificate>,
    single: Vec<Prediction>,
    single_f: f64,
    ensemble_f: f64,
    selection_log: Vec<f64>,
    members: usize,
    elapsed: Duration,
}

fn run_synthetic(scale: &Scale) -> Result<Synthetic, String> {
    let start = Instant::now();
    let err = |e: medseq::Error| e.to_string();
    let lexicon = build_default_lexicon(1);
    let gen = GeneratorConfig { n_records: scale.n_records, seed: 1, ..GeneratorConfig::default() };
    let certs = generate_corpus(&gen, &lexicon).map_err(err)?;
    let (train_c, val_c, test_c) = split_corpus(&certs, scale.per_year_val, scale.per_year_test, 1).map_err(err)?;
    let prepared = Prepared::new(&train_c, &val_c, &test_c, &TokenizerSettings::default()).map_err(err)?;
    let cfg = prepared.model_config(&ModelConfig::default());
    let val = Validation { pairs: &prepared.val, tgt_tok: &prepared.tgt_tok };
    let beam = BeamConfig::default();
    let val_truth = gold_codes(&val_c);
    let test_truth = gold_codes(&test_c);
    let mut val_pool = Vec::new();
    let mut test_pool = Vec::new();
    let mut val_fs = Vec::new();
    let mut models = Vec::new();
    for seed in 1..=3u64 {
        let tc = TrainConfig {
            max_steps: scale.max_steps,
            batch_size: scale.batch_size,
            eval_every: scale.eval_every,
            early_stop_patience: 0,
            log_every: 0,
            seed,
            ..TrainConfig::default()
        };
        let model = TransformerModel::<f32>::new(cfg.clone(), seed).map_err(err)?;
        let out: TrainOutcome<f32> = train(model, &prepared.train, Some(&val), &tc).map_err(err)?;
        val_fs.push(out.best_val_f.unwrap_or(0.0));
        val_pool.push(predict_all(&out.best, &prepared.val, &prepared.tgt_tok, &beam, 1).map_err(err)?);
        test_pool.push(predict_all(&out.best, &prepared.test, &prepared.tgt_tok, &beam, 1).map_err(err)?);
        models.push(out.best);
    }
    let selection = greedy_select(&val_pool, &val_truth).map_err(err)?;
    let members: Vec<&[Prediction]> = selection.members.iter().map(|&m| test_pool[m].as_slice()).collect();
    let ensemble = combine(&members).map_err(err)?;
    let f_of = |preds: &[Prediction]| {
        let pairs: Vec<CodePair> = preds.iter().zip(&test_truth).map(|(p, t)| (p.codes.clone(), t.clone())).collect();
        micro_metrics(&pairs).map(|r| r.f_measure)
    };
    let best_single = selection.members[0];
    Ok(Synthetic {
        best: models.swap_remove(best_single),
        src_tok: prepared.src_tok,
        tgt_tok: prepared.tgt_tok,
        single_f: f_of(&test_pool[best_single]).map_err(err)?,
        ensemble_f: f_of(&ensemble).map_err(err)?,
        single: test_pool.swap_remove(best_single),
        selection_log: selection.log.iter().map(|s| s.f_measure).collect(),
        members: selection.members.len(),
        test_certs: test_c,
        elapsed: start.elapsed(),
    })
}

fn criterion_6(run: &Result<Synthetic, String>, scale: &Scale, label: &str) -> Outcome {
    let s = run.as_ref().map_err(Clone::clone)?;
    check(s.single_f >= scale.min_f, format!("single-model test F {:.4} < {}", s.single_f, scale.min_f))?;
    check(
        s.ensemble_f >= s.single_f - 0.001,
        format!("ensemble F {:.4} below single F {:.4}", s.ensemble_f, s.single_f),
    )?;
    check(
        s.selection_log.windows(2).all(|w| w[1] >= w[0]),
        format!("selection log decreases: {:?}", s.selection_log),
    )?;
    Ok(format!(
        "{label}: single F {:.4}, ensemble F {:.4} ({} of 3 members), selection log {:?}, {:.0}s",
        s.single_f,
        s.ensemble_f,
        s.members,
        s.selection_log.iter().map(|f| (f * 1e4).round() / 1e4).collect::<Vec<_>>(),
        s.elapsed.as_secs_f64()
    ))
}

/// The 300-certificate test split holds only a few dozen certificates with
/// '!', so the gap is measured on a larger held-out synthetic test set drawn
/// from the same generator and lexicon.
fn criterion_7(run: &Result<Synthetic, String>) -> Outcome {
    let s = run.as_ref().map_err(Clone::clone)?;
    let err = |e: medseq::Error| e.to_string();
    let gen = GeneratorConfig { n_records: 8000, seed: 7007, ..GeneratorConfig::default() };
    let held_out = generate_corpus(&gen, &build_default_lexicon(1)).map_err(err)?;
    let mut without = 0;
    let paper: Vec<Certificate> = held_out
        .into_iter()
        .filter(|c| c.origin() == Origin::Paper)
        .filter(|c| {
            without += usize::from(!c.has_bang());
            c.has_bang() || without <= 1500
        })
        .collect();
    let pairs = encode_pairs(&training_pairs(&paper), &s.src_tok, &s.tgt_tok).map_err(err)?;
    let preds = predict_all(&s.best, &pairs, &s.tgt_tok, &BeamConfig::default(), 1).map_err(err)?;
    let labeled: Vec<LabeledPair> = preds
        .iter()
        .zip(&paper)
        .zip(gold_codes(&paper))
        .map(|((p, c), truth)| LabeledPair {
            pred: p.codes.clone(),
            truth,
            origin: c.origin(),
            has_bang: c.has_bang(),
        })
        .collect();
    let report = stratified_report(&labeled, Stratum::PaperBang).map_err(err)?;
    let clean = report.get("paper/no-bang").ok_or("no paper certificates without '!'")?;
    let bang = report.get("paper/bang").ok_or("no paper certificates with '!'")?;
    let gap = clean.f_measure - bang.f_measure;
    check(gap >= 0.02, format!("F gap {gap:.4} ({:.4} on {} vs {:.4} on {})", clean.f_measure, clean.records, bang.f_measure, bang.records))?;
    Ok(format!(
        "paper without '!' F {:.4} ({} records), with '!' F {:.4} ({} records), gap {gap:.4}",
        clean.f_measure, clean.records, bang.f_measure, bang.records
    ))
}

fn criterion_8(run: &Result<Synthetic, String>) -> Outcome {
    let s = run.as_ref().map_err(Clone::clone)?;
    let items: Vec<ScoredPair> = s
        .single
        .iter()
        .zip(gold_codes(&s.test_certs))
        .map(|(p, truth)| ScoredPair { score: p.score, pred: p.codes.clone(), truth })
        .collect();
    let curve = calibration_curve(&items).map_err(|e| e.to_string())?;
    check(curve.rows.len() == 101, format!("{} rows", curve.rows.len()))?;
    check(
        curve.rows.windows(2).all(|w| w[1].fraction_rejected >= w[0].fraction_rejected),
        "rejection fraction decreases",
    )?;
    let overall = curve.rows[0].f_accepted.ok_or("nothing accepted at threshold 0")?;
    let best = curve.best_within(0.30).ok_or("no threshold rejects at most 30%")?;
    let gain = best.f_accepted.unwrap_or(0.0) - overall;
    check(gain >= 0.01, format!("best gain within 30% rejection is {gain:.4}"))?;
    Ok(format!(
        "overall F {overall:.4}; threshold {:.2} rejects {:.1}% with accepted F {:.4}",
        best.threshold,
        best.fraction_rejected * 100.0,
        best.f_accepted.unwrap_or(0.0)
    ))
}

/// Every sequence of at most `max_tokens` emittable tokens followed by EOS,
/// scored through the model one prefix at a time.
fn exhaustive(
    model: &TransformerModel<f64>,
    src: &[u32],
    side: SideVariables,
    symbols: &[u32],
    max_tokens: usize,
    alpha: f64,
) -> Vec<(Vec<u32>, f64)> {
    let (memory, key_valid) = encode_source(model, src, side).unwrap();
    let mut out = Vec::new();
    let mut frontier: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    for depth in 0..=max_tokens {
        let prefixes: Vec<Vec<u32>> = frontier.iter().map(|f| f.0.clone()).collect();
        let lps = next_token_log_probs(model, &memory, &key_valid, &prefixes).unwrap();
        let mut next = Vec::new();
        for ((prefix, sum), lp) in frontier.iter().zip(&lps) {
            let mut done = prefix.clone();
            done.push(EOS);
            let total = sum + lp[EOS as usize];
            let penalty = ((5.0 + done.len() as f64) / 6.0).powf(alpha);
            out.push((done, total / penalty));
            if depth < max_tokens {
                for &t in symbols {
                    let mut p = prefix.clone();
                    p.push(t);
                    next.push((p, sum + lp[t as usize]));
                }
            }
        }
        frontier = next;
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

fn criterion_9() -> Outcome {
    // Four code symbols plus EOS; PAD, BOS and UNK are never emitted.
    let symbols = [4u32, 5, 6, 7];
    let cfg = ModelConfig { tgt_vocab_size: 8, ..tiny_model_config() };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut compared = 0;
    for draw in 0..100u64 {
        let model = TransformerModel::<f64>::with_init_scale(cfg.clone(), 1000 + draw, 3.0).unwrap();
        let max_tokens = rng.gen_range(1..=3usize);
        let src: Vec<u32> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(4..12)).collect();
        let s = side(rng.gen_range(0..2), rng.gen_range(0..6), rng.gen_range(0..25), rng.gen_range(0..2));
        let alpha = [0.0, 0.6, 1.0][rng.gen_range(0..3)];
        let all = exhaustive(&model, &src, s, &symbols, max_tokens, alpha);
        let beam_cfg = BeamConfig { beam_width: all.len(), alpha, max_tokens };
        let found = beam_search(&model, &src, s, &beam_cfg).map_err(|e| e.to_string())?;
        let got: Vec<&Vec<u32>> = found.iter().map(|h| &h.tokens).collect();
        let want: Vec<&Vec<u32>> = all.iter().map(|a| &a.0).collect();
        check(got == want, format!("draw {draw}: beam {:?} vs exhaustive {:?}", &got[..3.min(got.len())], &want[..3]))?;
        compared += all.len();
    }
    Ok(format!("100 draws, {compared} ranked sequences identical"))
}

fn pred(id: &str, list: &[&str], score: f64) -> Prediction {
    Prediction { id: id.into(), codes: codes(list), score }
}

fn criterion_10() -> Outcome {
    let first = consensus(&[pred("r", &["I10"], 0.9), pred("r", &["I10"], 0.6), pred("r", &["E119"], 0.3)])
        .map_err(|e| e.to_string())?;
    check(first.codes == codes(&["I10"]), format!("example 1 gave {:?}", first.codes))?;
    check((first.score - 0.6).abs() < 1e-12, format!("example 1 score {}", first.score))?;
    let second = consensus(&[pred("r", &["A00", "B00"], 0.5), pred("r", &["A00"], 0.5), pred("r", &["B00"], 0.5)])
        .map_err(|e| e.to_string())?;
    check(second.codes == codes(&["A00", "B00"]), format!("example 2 gave {:?}", second.codes))?;

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let pool = code_pool();
    let mut permutation_sets = 0;
    for set in 0..1000 {
        // Majority: more than half the members agree on one sequence.
        let n = rng.gen_range(1..=9usize);
        let k = n / 2 + 1;
        let majority = random_codes(&mut rng, &pool, 5);
        let mut cands: Vec<Prediction> = (0..k)
            .map(|_| Prediction { id: "r".into(), codes: majority.clone(), score: rng.gen_range(0.01..1.0) })
            .collect();
        cands.extend((k..n).map(|_| Prediction {
            id: "r".into(),
            codes: random_codes(&mut rng, &pool, 5),
            score: rng.gen_range(0.01..1.0),
        }));
        cands.shuffle(&mut rng);
        let got = consensus(&cands).map_err(|e| e.to_string())?;
        check(got.codes == majority, format!("majority set {set}: {:?} vs {majority:?}", got.codes))?;

        // Permutation invariance on candidate sets with a unique winner.
        let m = rng.gen_range(2..=7usize);
        let cands: Vec<Prediction> = (0..m)
            .map(|_| Prediction { id: "r".into(), codes: random_codes(&mut rng, &pool, 4), score: 0.5 })
            .collect();
        let means: Vec<f64> = (0..m)
            .map(|i| {
                (0..m)
                    .filter(|&j| j != i)
                    .map(|j| {
                        let c = medseq::eval::count_matches(&cands[i].codes, &cands[j].codes);
                        c.f_measure()
                    })
                    .sum::<f64>()
            })
            .collect();
        let best = means.iter().cloned().fold(f64::MIN, f64::max);
        let winners: Vec<&Vec<Icd10Code>> =
            (0..m).filter(|&i| (means[i] - best).abs() < 1e-12).map(|i| &cands[i].codes).collect();
        if winners.windows(2).any(|w| w[0] != w[1]) {
            continue;
        }
        permutation_sets += 1;
        let base = consensus(&cands).map_err(|e| e.to_string())?.codes;
        for _ in 0..5 {
            let mut shuffled = cands.clone();
            shuffled.shuffle(&mut rng);
            let again = consensus(&shuffled).map_err(|e| e.to_string())?.codes;
            check(again == base, format!("set {set}: order changed the consensus"))?;
        }
    }
    Ok(format!("hand examples match; 1000 majority sets; {permutation_sets} tie-free sets permutation invariant"))
}

fn criterion_11() -> Outcome {
    let err = |e: medseq::Error| e.to_string();
    let lexicon = build_default_lexicon(11);
    let gen = GeneratorConfig { n_records: 600, seed: 11, ..GeneratorConfig::default() };
    let a = generate_corpus(&gen, &lexicon).map_err(err)?;
    let b = generate_corpus(&gen, &build_default_lexicon(11)).map_err(err)?;
    let years = YearRange::default();
    check(format_corpus(&a, years) == format_corpus(&b, years), "corpora differ")?;

    let (tr, va, te) = split_corpus(&a, 10, 10, 11).map_err(err)?;
    let settings = TokenizerSettings { src_vocab: 500, tgt_vocab: 400, max_src_len: 128 };
    let prepared = Prepared::new(&tr, &va, &te, &settings).map_err(err)?;
    let again = Prepared::new(&tr, &va, &te, &settings).map_err(err)?;
    check(prepared.src_tok.to_text() == again.src_tok.to_text(), "source tokenizers differ")?;
    for tok in [&prepared.src_tok, &prepared.tgt_tok] {
        let text = tok.to_text();
        let back = TokenizerModel::from_text(&text, "roundtrip").map_err(err)?;
        check(back.to_text() == text && back == *tok, "tokenizer roundtrip is not exact")?;
    }

    let small = prepared.model_config(&ModelConfig {
        hidden_size: 16,
        ffn_size: 32,
        n_layers_enc: 1,
        n_layers_dec: 1,
        ..ModelConfig::default()
    });
    let tc = TrainConfig { max_steps: 30, batch_size: Some(16), eval_every: 0, log_every: 0, seed: 11, ..TrainConfig::default() };
    let checkpoint = || -> Result<Vec<u8>, medseq::Error> {
        let out = train(TransformerModel::<f32>::new(small.clone(), 11)?, &prepared.train, None, &tc)?;
        let mut ck = Checkpoint::new(out.final_model, &prepared.src_tok, &prepared.tgt_tok);
        ck.optimizer = Some(out.optimizer);
        ck.log_tail = out.log;
        Ok(ck.to_bytes())
    };
    let first = checkpoint().map_err(err)?;
    check(first == checkpoint().map_err(err)?, "checkpoints differ between identical runs")?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    std::fs::write(&path, &first).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::<f32>::load(&path).map_err(err)?;
    check(loaded.to_bytes() == first, "checkpoint roundtrip is not byte-identical")?;

    let report = || -> Result<String, medseq::Error> {
        let model = Checkpoint::<f32>::load(&path)?.model;
        let preds = predict_all(&model, &prepared.test, &prepared.tgt_tok, &BeamConfig::default(), 1)?;
        let pairs: Vec<CodePair> = preds.iter().zip(gold_codes(&te)).map(|(p, t)| (p.codes.clone(), t)).collect();
        let mut r = micro_metrics(&pairs)?;
        r.ci = Some(bootstrap_ci(&pairs, 200, 0.95, 11)?);
        let scored: Vec<ScoredPair> = preds
            .iter()
            .zip(&pairs)
            .map(|(p, (pred, truth))| ScoredPair { score: p.score, pred: pred.clone(), truth: truth.clone() })
            .collect();
        Ok(r.to_kv().to_text() + &per_chapter(&pairs)?.to_table() + &calibration_curve(&scored)?.to_tsv())
    };
    check(report().map_err(err)? == report().map_err(err)?, "reports differ")?;
    Ok("corpora, tokenizers, checkpoints and reports byte-identical; roundtrips exact".into())
}

fn synthetic_pairs(n: usize, rng: &mut ChaCha8Rng) -> Vec<CodePair> {
    let pool = code_pool();
    (0..n)
        .map(|_| {
            let truth: Vec<Icd10Code> = (0..rng.gen_range(1..=5)).map(|_| pool[rng.gen_range(0..pool.len())].clone()).collect();
            let mut pred: Vec<Icd10Code> = truth.iter().filter(|_| rng.gen_bool(0.8)).cloned().collect();
            if rng.gen_bool(0.3) {
                pred.push(pool[rng.gen_range(0..pool.len())].clone());
            }
            (pred, truth)
        })
        .collect()
}

fn criterion_12() -> Outcome {
    let err = |e: medseq::Error| e.to_string();
    let constant: Vec<CodePair> = (0..200).map(|_| (codes(&["I10", "E119"]), codes(&["I10", "J189"]))).collect();
    let ci = bootstrap_ci(&constant, 1000, 0.95, 12).map_err(err)?;
    check(ci.f_measure.0 == ci.f_measure.1, format!("constant data interval {:?}", ci.f_measure))?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let width = |pairs: &[CodePair]| -> Result<f64, String> {
        let ci = bootstrap_ci(pairs, 1000, 0.95, 12).map_err(err)?;
        Ok(ci.f_measure.1 - ci.f_measure.0)
    };
    let w1000 = width(&synthetic_pairs(1000, &mut rng))?;
    let w4000 = width(&synthetic_pairs(4000, &mut rng))?;
    let ratio = w4000 / w1000;
    check((0.35..=0.65).contains(&ratio), format!("width ratio {ratio:.3}"))?;
    Ok(format!("constant data width 0; width n=1000 {w1000:.4}, n=4000 {w4000:.4}, ratio {ratio:.3}"))
}

fn run_one(n: usize, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("criterion {n:>2}: PASS ({secs:.1}s) {detail}");
            true
        }
        Err(detail) => {
            println!("criterion {n:>2}: FAIL ({secs:.1}s) {detail}");
            false
        }
    }
}

fn main() {
    let full = std::env::var("MEDSEQ_ACCEPTANCE_FULL").is_ok_and(|v| v == "1");
    let (scale, label) = if full { (&FULL_SCALE, "50,000 certificates") } else { (&CI_SCALE, "2,000 certificates") };
    let mut passed = Vec::new();
    passed.push(run_one(1, criterion_1));
    passed.push(run_one(2, criterion_2));
    passed.push(run_one(3, criterion_3));
    passed.push(run_one(4, criterion_4));
    passed.push(run_one(5, criterion_5));
    let synthetic = catch_unwind(|| run_synthetic(scale)).unwrap_or_else(|_| Err("training panicked".into()));
    passed.push(run_one(6, || criterion_6(&synthetic, scale, label)));
    passed.push(run_one(7, || criterion_7(&synthetic)));
    passed.push(run_one(8, || criterion_8(&synthetic)));
    passed.push(run_one(9, criterion_9));
    passed.push(run_one(10, criterion_10));
    passed.push(run_one(11, criterion_11));
    passed.push(run_one(12, criterion_12));
    let failed = passed.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", passed.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
