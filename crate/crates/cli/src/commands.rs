//! One method per subcommand. Every run records its effective config and
//! the hashes of its inputs next to its outputs.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use medseq::config::KeyValues;
use medseq::decode::{predict_all, read_predictions, write_predictions, Prediction};
use medseq::ensemble::{combine, greedy_select, EnsembleManifest};
use medseq::eval::{
    bootstrap_ci, calibration_curve, format_reports, micro_metrics, per_chapter, stratified_report, CalibrationCurve,
    CodePair, LabeledPair, MetricReport, ScoredPair, Stratum,
};
use medseq::pipeline::{gold_codes, train_tokenizers, training_pairs};
use medseq::records::{read_corpus, write_corpus, Certificate};
use medseq::synth::{build_default_lexicon, generate_corpus, split_corpus};
use medseq::textprep::{encode_pairs, EncodedPair, TokenizerModel};
use medseq::train::{file_hash, format_trials, random_search, train, Checkpoint, Validation};
use medseq::transformer::{ModelConfig, TransformerModel};
use medseq::{Error, Result};

use crate::run_config::RunConfig;

const SOURCE_BPE: &str = "source.bpe";
const TARGET_BPE: &str = "target.bpe";
/// Rejection budgets summarized in reports.
const REJECTION_BUDGETS: [f64; 3] = [0.1, 0.2, 0.3];

pub struct Run {
    command: &'static str,
    out: PathBuf,
    cfg: RunConfig,
    inputs: Vec<(String, PathBuf, String)>,
}

impl Run {
    pub fn new(command: &'static str, out: &Path, cfg: RunConfig) -> Result<Self> {
        Ok(Run {
            command,
            out: out.to_path_buf(),
            cfg,
            inputs: Vec::new(),
        })
    }

    fn input(&mut self, label: &str, path: &Path) -> Result<PathBuf> {
        if !path.is_file() {
            return Err(Error::Validation(format!("{label} file {} does not exist", path.display())));
        }
        let hash = file_hash(path)?;
        self.inputs.push((label.to_string(), path.to_path_buf(), hash));
        Ok(path.to_path_buf())
    }

    fn output(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn corpus(&mut self, label: &str, path: &Path) -> Result<Vec<Certificate>> {
        let path = self.input(label, path)?;
        let certs = read_corpus(&path)?;
        log::info!("{label}: {} certificates from {}", certs.len(), path.display());
        Ok(certs)
    }

    fn tokenizers(&mut self, dir: &Path) -> Result<(TokenizerModel, TokenizerModel)> {
        let src = self.input("source_tokenizer", &dir.join(SOURCE_BPE))?;
        let tgt = self.input("target_tokenizer", &dir.join(TARGET_BPE))?;
        Ok((TokenizerModel::load(&src)?, TokenizerModel::load(&tgt)?))
    }

    fn checkpoint(&mut self, label: &str, path: &Path, src: &TokenizerModel, tgt: &TokenizerModel) -> Result<Checkpoint<f32>> {
        let path = self.input(label, path)?;
        let ck = Checkpoint::<f32>::load(&path)?;
        ck.check_tokenizers(src, tgt)?;
        Ok(ck)
    }

    /// Writes the effective config and the provenance record.
    pub fn finish(self) -> anyhow::Result<()> {
        let config_text = self.cfg.to_kv().to_text();
        std::fs::write(self.output("config.txt"), &config_text)?;
        let mut prov = KeyValues::new();
        prov.set("command", self.command);
        prov.set("tool", concat!("medseq ", env!("CARGO_PKG_VERSION")));
        prov.set("config_hash", medseq::train::text_hash(&config_text));
        for (label, path, hash) in &self.inputs {
            prov.set(format!("input.{label}.path"), path.display());
            prov.set(format!("input.{label}.sha256"), hash);
        }
        std::fs::write(self.output("provenance.txt"), prov.to_text())?;
        log::info!("{} finished; outputs in {}", self.command, self.out.display());
        Ok(())
    }

    pub fn gen_data(&mut self) -> Result<()> {
        let lexicon = build_default_lexicon(self.cfg.lexicon_seed);
        let certs = generate_corpus(&self.cfg.synth, &lexicon)?;
        write_corpus(&certs, &self.output("corpus.tsv"))?;
        log::info!("wrote {} certificates", certs.len());
        Ok(())
    }

    pub fn split(&mut self, corpus: &Path) -> Result<()> {
        let certs = self.corpus("corpus", corpus)?;
        let (train, val, test) = split_corpus(&certs, self.cfg.per_year_val, self.cfg.per_year_test, self.cfg.seed)?;
        for (name, part) in [("train.tsv", &train), ("val.tsv", &val), ("test.tsv", &test)] {
            write_corpus(part, &self.output(name))?;
        }
        log::info!("split {} / {} / {}", train.len(), val.len(), test.len());
        Ok(())
    }

    pub fn tokenize(&mut self, train_path: &Path) -> Result<()> {
        let certs = self.corpus("train", train_path)?;
        let (src, tgt) = train_tokenizers(&training_pairs(&certs), &self.cfg.tokenize)?;
        for (name, tok) in [(SOURCE_BPE, &src), (TARGET_BPE, &tgt)] {
            tok.save(&self.output(name))?;
            log::info!(
                "{name}: vocabulary {}{}",
                tok.vocab_size(),
                if tok.stopped_early() { " (no pair occurs twice; stopped early)" } else { "" }
            );
        }
        Ok(())
    }

    fn encoded(&mut self, label: &str, path: &Path, src: &TokenizerModel, tgt: &TokenizerModel) -> Result<(Vec<Certificate>, Vec<EncodedPair>)> {
        let certs = self.corpus(label, path)?;
        let pairs = encode_pairs(&training_pairs(&certs), src, tgt)?;
        Ok((certs, pairs))
    }

    fn model_config(&self, src: &TokenizerModel, tgt: &TokenizerModel) -> ModelConfig {
        ModelConfig {
            src_vocab_size: src.vocab_size(),
            tgt_vocab_size: tgt.vocab_size(),
            max_src_len: src.max_len(),
            ..self.cfg.model.clone()
        }
    }

    pub fn train(&mut self, train_path: &Path, val_path: &Path, tok_dir: &Path) -> Result<()> {
        let (src, tgt) = self.tokenizers(tok_dir)?;
        let (_, train_pairs) = self.encoded("train", train_path, &src, &tgt)?;
        let (_, val_pairs) = self.encoded("val", val_path, &src, &tgt)?;
        let model_cfg = self.model_config(&src, &tgt);
        let tc = &self.cfg.train;
        log::info!(
            "{} parameters, batch size {}, {} steps",
            model_cfg.param_count(),
            tc.batch_size_for(model_cfg.hidden_size),
            tc.max_steps
        );
        let model = TransformerModel::<f32>::new(model_cfg, tc.seed)?;
        let val = Validation { pairs: &val_pairs, tgt_tok: &tgt };
        let outcome = train(model, &train_pairs, Some(&val), tc)?;
        let mut log_text = String::from("step\tloss\tlr\tval_f\n");
        for e in &outcome.log {
            log_text.push_str(&e.to_line());
            log_text.push('\n');
        }
        std::fs::write(self.output("train_log.tsv"), log_text)?;
        let mut best = Checkpoint::new(outcome.best, &src, &tgt);
        best.log_tail = outcome.log.clone();
        best.meta.set("step", outcome.best_step);
        best.meta.set("val_f", outcome.best_val_f.unwrap_or(0.0));
        best.save(&self.output("model.ckpt"))?;
        let mut last = Checkpoint::new(outcome.final_model, &src, &tgt);
        last.optimizer = Some(outcome.optimizer);
        last.log_tail = outcome.log;
        last.meta.set("step", outcome.steps);
        last.meta.set("val_f", outcome.final_val_f.unwrap_or(0.0));
        last.save(&self.output("final.ckpt"))?;
        log::info!(
            "best validation F {:.4} at step {}",
            outcome.best_val_f.unwrap_or(0.0),
            outcome.best_step
        );
        Ok(())
    }

    pub fn search(&mut self, train_path: &Path, val_path: &Path, tok_dir: &Path) -> Result<()> {
        let (src, tgt) = self.tokenizers(tok_dir)?;
        let (_, train_pairs) = self.encoded("train", train_path, &src, &tgt)?;
        let (_, val_pairs) = self.encoded("val", val_path, &src, &tgt)?;
        let base = self.model_config(&src, &tgt);
        let val = Validation { pairs: &val_pairs, tgt_tok: &tgt };
        let results = random_search::<f32>(&self.cfg.search, &base, &self.cfg.train, &train_pairs, &val, self.cfg.seed)?;
        let mut paths = Vec::new();
        for r in &results {
            let path = self.output(&format!("trial_{:02}.ckpt", r.index));
            let mut ck = Checkpoint::new(r.outcome.best.clone(), &src, &tgt);
            ck.log_tail = r.outcome.log.clone();
            ck.meta.set("trial", r.index);
            ck.meta.set("val_f", r.val_f);
            ck.save(&path)?;
            paths.push(path);
        }
        std::fs::write(self.output("trials.tsv"), format_trials(&results, &paths))?;
        if let Some(best) = results.first() {
            log::info!("best trial {} with validation F {:.4}", best.index, best.val_f);
        }
        Ok(())
    }

    fn decode(&self, model: &TransformerModel<f32>, pairs: &[EncodedPair], tgt: &TokenizerModel) -> Result<Vec<Prediction>> {
        predict_all(model, pairs, tgt, &self.cfg.beam, self.cfg.decode_workers)
    }

    pub fn predict(&mut self, ck_path: &Path, tok_dir: &Path, input: &Path) -> Result<()> {
        let (src, tgt) = self.tokenizers(tok_dir)?;
        let ck = self.checkpoint("checkpoint", ck_path, &src, &tgt)?;
        let (_, pairs) = self.encoded("input", input, &src, &tgt)?;
        let preds = self.decode(&ck.model, &pairs, &tgt)?;
        write_predictions(&self.output("predictions.tsv"), &preds)?;
        log::info!("wrote {} predictions", preds.len());
        Ok(())
    }

    pub fn ensemble_select(&mut self, val_path: &Path, tok_dir: &Path, checkpoints: &[PathBuf]) -> Result<()> {
        let (src, tgt) = self.tokenizers(tok_dir)?;
        let (val_certs, val_pairs) = self.encoded("val", val_path, &src, &tgt)?;
        let truths = gold_codes(&val_certs);
        let mut pool = Vec::new();
        let mut members = Vec::new();
        let mut seen = HashSet::new();
        for (i, path) in checkpoints.iter().enumerate() {
            let ck = self.checkpoint(&format!("member{i}"), path, &src, &tgt)?;
            let hash = self.inputs.last().expect("recorded input").2.clone();
            if !seen.insert(hash.clone()) {
                return Err(Error::Validation(format!("{} duplicates an earlier member", path.display())));
            }
            pool.push(self.decode(&ck.model, &val_pairs, &tgt)?);
            let abs = std::fs::canonicalize(path)?;
            members.push((abs, hash));
        }
        let selection = greedy_select(&pool, &truths)?;
        for step in &selection.log {
            log::info!("members {:?}: validation F {:.4}", step.members, step.f_measure);
        }
        let manifest = EnsembleManifest {
            members: selection.members.iter().map(|&m| members[m].clone()).collect(),
            log: selection.log,
        };
        manifest.save(&self.output("ensemble.txt"))?;
        Ok(())
    }

    pub fn ensemble_predict(&mut self, manifest_path: &Path, tok_dir: &Path, input: &Path) -> Result<()> {
        let (src, tgt) = self.tokenizers(tok_dir)?;
        let manifest = EnsembleManifest::load(&self.input("manifest", manifest_path)?)?;
        let (_, pairs) = self.encoded("input", input, &src, &tgt)?;
        let mut outputs = Vec::new();
        for (i, (path, hash)) in manifest.members.iter().enumerate() {
            let ck = self.checkpoint(&format!("member{i}"), path, &src, &tgt)?;
            if &self.inputs.last().expect("recorded input").2 != hash {
                return Err(Error::Corrupt {
                    path: path.clone(),
                    message: "checkpoint differs from the one recorded in the manifest".into(),
                });
            }
            outputs.push(self.decode(&ck.model, &pairs, &tgt)?);
        }
        let views: Vec<&[Prediction]> = outputs.iter().map(Vec::as_slice).collect();
        let preds = combine(&views)?;
        write_predictions(&self.output("predictions.tsv"), &preds)?;
        log::info!("wrote {} ensemble predictions from {} members", preds.len(), views.len());
        Ok(())
    }

    /// Predictions matched to gold certificates in gold order.
    fn aligned(&mut self, pred_path: &Path, gold_path: &Path) -> Result<Vec<(Prediction, Certificate)>> {
        let preds = read_predictions(&self.input("predictions", pred_path)?)?;
        let gold = self.corpus("gold", gold_path)?;
        let mut by_id: HashMap<String, Prediction> = HashMap::new();
        for p in preds {
            let id = p.id.clone();
            if by_id.insert(id.clone(), p).is_some() {
                return Err(Error::Validation(format!("duplicate prediction for record {id}")));
            }
        }
        let mut out = Vec::with_capacity(gold.len());
        for cert in gold {
            let pred = by_id
                .remove(cert.id())
                .ok_or_else(|| Error::Validation(format!("no prediction for record {}", cert.id())))?;
            out.push((pred, cert));
        }
        if let Some(extra) = by_id.keys().next() {
            return Err(Error::Validation(format!("prediction for unknown record {extra}")));
        }
        Ok(out)
    }

    fn overall(&self, pairs: &[CodePair]) -> Result<MetricReport> {
        let mut report = micro_metrics(pairs)?;
        let e = &self.cfg.eval;
        if e.bootstrap_replicates > 0 {
            report.ci = Some(bootstrap_ci(pairs, e.bootstrap_replicates, e.level, self.cfg.seed)?);
        }
        Ok(report)
    }

    pub fn evaluate(&mut self, pred_path: &Path, gold_path: &Path, strata: &[String]) -> Result<()> {
        let strata = strata
            .iter()
            .map(|s| s.parse::<Stratum>())
            .collect::<Result<Vec<_>>>()?;
        let aligned = self.aligned(pred_path, gold_path)?;
        let pairs = code_pairs(&aligned);
        let overall = self.overall(&pairs)?;
        let mut reports = vec![overall.clone()];
        let labeled = labeled_pairs(&aligned);
        for s in strata {
            let sr = stratified_report(&labeled, s)?;
            reports.extend(sr.reports.into_iter().filter(|r| r.label != "all"));
        }
        let mut kv = KeyValues::new();
        for r in &reports {
            kv.merge(&r.to_kv());
        }
        std::fs::write(self.output("report.kv"), kv.to_text())?;
        std::fs::write(self.output("report.txt"), format_reports(&reports) + &ci_line(&overall, self.cfg.eval.level))?;
        log::info!("F-measure {:.4} over {} records", overall.f_measure, overall.records);
        Ok(())
    }

    fn curve(&self, aligned: &[(Prediction, Certificate)]) -> Result<CalibrationCurve> {
        let items: Vec<ScoredPair> = aligned
            .iter()
            .map(|(p, c)| ScoredPair {
                score: p.score,
                pred: p.codes.clone(),
                truth: gold_codes(std::slice::from_ref(c)).remove(0),
            })
            .collect();
        calibration_curve(&items)
    }

    pub fn calibrate(&mut self, pred_path: &Path, gold_path: &Path) -> Result<()> {
        let aligned = self.aligned(pred_path, gold_path)?;
        let curve = self.curve(&aligned)?;
        std::fs::write(self.output("calibration.tsv"), curve.to_tsv())?;
        let overall = micro_metrics(&code_pairs(&aligned))?.f_measure;
        std::fs::write(self.output("calibration.txt"), calibration_summary(&curve, overall))?;
        Ok(())
    }

    pub fn report(&mut self, pred_path: &Path, gold_path: &Path) -> Result<()> {
        let aligned = self.aligned(pred_path, gold_path)?;
        let pairs = code_pairs(&aligned);
        let overall = self.overall(&pairs)?;
        let labeled = labeled_pairs(&aligned);
        let mut text = String::from("# overall\n");
        text += &format_reports(std::slice::from_ref(&overall));
        text += &ci_line(&overall, self.cfg.eval.level);
        for (title, stratum) in [
            ("origin", Stratum::Origin),
            ("unreadable words", Stratum::Bang),
            ("paper certificates by unreadable words", Stratum::PaperBang),
        ] {
            let sr = stratified_report(&labeled, stratum)?;
            let _ = writeln!(text, "\n# {title}");
            text += &format_reports(&sr.reports);
            for a in &sr.absent {
                let _ = writeln!(text, "{a}: no records");
            }
        }
        text += "\n# chapters\n";
        text += &per_chapter(&pairs)?.to_table();
        let curve = self.curve(&aligned)?;
        text += "\n# calibration\n";
        text += &calibration_summary(&curve, overall.f_measure);
        std::fs::write(self.output("report.txt"), text)?;
        std::fs::write(self.output("calibration.tsv"), curve.to_tsv())?;
        log::info!("F-measure {:.4} over {} records", overall.f_measure, overall.records);
        Ok(())
    }
}

fn code_pairs(aligned: &[(Prediction, Certificate)]) -> Vec<CodePair> {
    aligned
        .iter()
        .map(|(p, c)| (p.codes.clone(), gold_codes(std::slice::from_ref(c)).remove(0)))
        .collect()
}

fn labeled_pairs(aligned: &[(Prediction, Certificate)]) -> Vec<LabeledPair> {
    aligned
        .iter()
        .map(|(p, c)| LabeledPair {
            pred: p.codes.clone(),
            truth: gold_codes(std::slice::from_ref(c)).remove(0),
            origin: c.origin(),
            has_bang: c.has_bang(),
        })
        .collect()
}

fn ci_line(r: &MetricReport, level: f64) -> String {
    match &r.ci {
        Some(ci) => format!(
            "{:.0}% bootstrap interval for F-measure: [{:.4}, {:.4}]\n",
            level * 100.0,
            ci.f_measure.0,
            ci.f_measure.1
        ),
        None => String::new(),
    }
}

fn calibration_summary(curve: &CalibrationCurve, overall_f: f64) -> String {
    let mut out = format!("overall F-measure {overall_f:.4}\n");
    for budget in REJECTION_BUDGETS {
        match curve.best_within(budget) {
            Some(row) => {
                let _ = writeln!(
                    out,
                    "rejecting at most {:.0}%: threshold {:.2} rejects {:.1}%, accepted F {:.4}",
                    budget * 100.0,
                    row.threshold,
                    row.fraction_rejected * 100.0,
                    row.f_accepted.unwrap_or(0.0)
                );
            }
            None => {
                let _ = writeln!(out, "rejecting at most {:.0}%: no threshold qualifies", budget * 100.0);
            }
        }
    }
    out
}
