//! Optimization: learning-rate schedule, Adam, the teacher-forced training
//! loop, checkpoints and random hyperparameter search.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::KeyValues;
use crate::decode::{predict_all, BeamConfig};
use crate::error::{Error, Result};
use crate::eval::{count_matches, Counts};
use crate::synth::derive_seed;
use crate::tensor::{Graph, ParamStore, Real, Tensor};
use crate::textprep::{codes_from_text, EncodedPair, TokenizerModel};
use crate::transformer::{loss_tokens, ModelConfig, TransformerModel};

/// `floor(100 * 512 / hidden_size)` certificates per batch.
pub fn derived_batch_size(hidden_size: usize) -> usize {
    51_200 / hidden_size
}

/// `factor * hidden^-0.5 * min(step^-0.5, step * warmup^-1.5)`
pub fn learning_rate(step: u64, hidden_size: usize, factor: f64, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    factor * (hidden_size as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.997,
            epsilon: 1e-9,
        }
    }
}

/// First and second moments per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub step: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update with learning rate `rate`.
pub fn adam_step<F: Real>(
    params: &mut ParamStore<F>,
    grads: &[Tensor<F>],
    state: &mut AdamState<F>,
    rate: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::validation(format!(
            "{} gradients and {} moment tensors for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (i, (p, g)) in params.tensors().iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Shape {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let f = F::from_f64_lossy;
    let (b1, b2, eps) = (f(cfg.beta1), f(cfg.beta2), f(cfg.epsilon));
    let c1 = f(1.0 - cfg.beta1.powi(t));
    let c2 = f(1.0 - cfg.beta2.powi(t));
    let lr = f(rate);
    let one = F::one();
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Multiplier of the schedule; the search samples 1 or 2.
    pub learning_rate_factor: f64,
    pub warmup_steps: u64,
    pub max_steps: u64,
    /// Certificates per batch; `None` derives it from the hidden size.
    pub batch_size: Option<usize>,
    pub seed: u64,
    /// Validation interval in steps; 0 validates only at the end.
    pub eval_every: u64,
    /// Validations without improvement before stopping; 0 disables early stopping.
    pub early_stop_patience: usize,
    pub label_smoothing: f64,
    pub adam: AdamConfig,
    /// Gradient workers per batch.
    pub workers: usize,
    pub val_beam: BeamConfig,
    pub log_every: u64,
    /// Stop as soon as validation F reaches this value.
    pub stop_at_val_f: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate_factor: 2.0,
            warmup_steps: 400,
            max_steps: 10_000,
            batch_size: None,
            seed: 1,
            eval_every: 1000,
            early_stop_patience: 5,
            label_smoothing: 0.1,
            adam: AdamConfig::default(),
            workers: 1,
            val_beam: BeamConfig {
                beam_width: 1,
                ..BeamConfig::default()
            },
            log_every: 100,
            stop_at_val_f: None,
        }
    }
}

const TRAIN_KEYS: [&str; 16] = [
    "learning_rate_factor",
    "warmup_steps",
    "max_steps",
    "batch_size",
    "seed",
    "eval_every",
    "early_stop_patience",
    "label_smoothing",
    "adam_beta1",
    "adam_beta2",
    "adam_epsilon",
    "workers",
    "val_beam_width",
    "val_alpha",
    "log_every",
    "stop_at_val_f",
];

impl TrainConfig {
    pub fn batch_size_for(&self, hidden_size: usize) -> usize {
        self.batch_size.unwrap_or_else(|| derived_batch_size(hidden_size))
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate_factor < 0.0 || !self.learning_rate_factor.is_finite() {
            return Err(Error::config("learning_rate_factor must be a finite non-negative number"));
        }
        if self.batch_size == Some(0) || self.workers == 0 || self.max_steps == 0 {
            return Err(Error::config("batch_size, workers and max_steps must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("label_smoothing must lie in [0, 1)"));
        }
        if self.val_beam.beam_width == 0 {
            return Err(Error::config("val_beam_width must be positive"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("learning_rate_factor", self.learning_rate_factor);
        kv.set("warmup_steps", self.warmup_steps);
        kv.set("max_steps", self.max_steps);
        kv.set(
            "batch_size",
            self.batch_size.map_or_else(|| "derived".to_string(), |b| b.to_string()),
        );
        kv.set("seed", self.seed);
        kv.set("eval_every", self.eval_every);
        kv.set("early_stop_patience", self.early_stop_patience);
        kv.set("label_smoothing", self.label_smoothing);
        kv.set("adam_beta1", self.adam.beta1);
        kv.set("adam_beta2", self.adam.beta2);
        kv.set("adam_epsilon", self.adam.epsilon);
        kv.set("workers", self.workers);
        kv.set("val_beam_width", self.val_beam.beam_width);
        kv.set("val_alpha", self.val_beam.alpha);
        kv.set("log_every", self.log_every);
        kv.set(
            "stop_at_val_f",
            self.stop_at_val_f.map_or_else(|| "none".to_string(), |f| f.to_string()),
        );
        kv
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(&TRAIN_KEYS)?;
        let d = TrainConfig::default();
        let batch_size = match kv.get("batch_size") {
            None | Some("derived") => None,
            Some(_) => Some(kv.req("batch_size")?),
        };
        let stop_at_val_f = match kv.get("stop_at_val_f") {
            None | Some("none") => None,
            Some(_) => Some(kv.req("stop_at_val_f")?),
        };
        let cfg = TrainConfig {
            learning_rate_factor: kv.opt("learning_rate_factor", d.learning_rate_factor)?,
            warmup_steps: kv.opt("warmup_steps", d.warmup_steps)?,
            max_steps: kv.opt("max_steps", d.max_steps)?,
            batch_size,
            seed: kv.opt("seed", d.seed)?,
            eval_every: kv.opt("eval_every", d.eval_every)?,
            early_stop_patience: kv.opt("early_stop_patience", d.early_stop_patience)?,
            label_smoothing: kv.opt("label_smoothing", d.label_smoothing)?,
            adam: AdamConfig {
                beta1: kv.opt("adam_beta1", d.adam.beta1)?,
                beta2: kv.opt("adam_beta2", d.adam.beta2)?,
                epsilon: kv.opt("adam_epsilon", d.adam.epsilon)?,
            },
            workers: kv.opt("workers", d.workers)?,
            val_beam: BeamConfig {
                beam_width: kv.opt("val_beam_width", d.val_beam.beam_width)?,
                alpha: kv.opt("val_alpha", d.val_beam.alpha)?,
                ..d.val_beam
            },
            log_every: kv.opt("log_every", d.log_every)?,
            stop_at_val_f,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogEntry {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub val_f: Option<f64>,
}

impl LogEntry {
    pub fn to_line(&self) -> String {
        let vf = self.val_f.map_or_else(|| "-".to_string(), |f| f.to_string());
        format!("{}\t{}\t{}\t{vf}", self.step, self.loss, self.lr)
    }

    pub fn from_line(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return None;
        }
        Some(LogEntry {
            step: f[0].parse().ok()?,
            loss: f[1].parse().ok()?,
            lr: f[2].parse().ok()?,
            val_f: match f[3] {
                "-" => None,
                v => Some(v.parse().ok()?),
            },
        })
    }
}

/// Validation data for model selection.
pub struct Validation<'a> {
    pub pairs: &'a [EncodedPair],
    pub tgt_tok: &'a TokenizerModel,
}

pub struct TrainOutcome<F: Real> {
    /// Parameters with the best validation F (the final ones without validation data).
    pub best: TransformerModel<F>,
    pub best_step: u64,
    pub best_val_f: Option<f64>,
    pub final_model: TransformerModel<F>,
    pub final_val_f: Option<f64>,
    pub optimizer: AdamState<F>,
    pub log: Vec<LogEntry>,
    pub steps: u64,
}

/// Micro F of greedy or beam predictions against the pairs' own targets.
pub fn validation_f<F: Real>(
    model: &TransformerModel<F>,
    val: &Validation<'_>,
    beam: &BeamConfig,
    workers: usize,
) -> Result<f64> {
    let preds = predict_all(model, val.pairs, val.tgt_tok, beam, workers)?;
    let mut total = Counts::default();
    for (p, pair) in preds.iter().zip(val.pairs) {
        let truth = codes_from_text(&val.tgt_tok.decode(&pair.tgt)?);
        total += count_matches(&p.codes, &truth);
    }
    Ok(total.f_measure())
}

/// Loss and parameter gradients of one batch, optionally sharded over
/// `workers` threads. Shard gradients are averaged with weights equal to
/// their share of target tokens, which reproduces the unsharded gradient.
pub fn batch_gradients<F: Real>(
    model: &TransformerModel<F>,
    batch: &[&EncodedPair],
    label_smoothing: f64,
    workers: usize,
    dropout_seed: u64,
) -> Result<(f64, Vec<Tensor<F>>)> {
    let shard_grads = |shard: &[&EncodedPair], w: usize| -> Result<(usize, f64, Vec<Tensor<F>>)> {
        let mut g = Graph::with_params(model.params()).training(derive_seed(dropout_seed, w as u64, 0xd0));
        let loss = model.sequence_loss(&mut g, shard, label_smoothing)?;
        let value = g.value(loss).data()[0].as_f64();
        let grads = g.backward(loss)?.param_grads();
        Ok((loss_tokens(shard), value, grads))
    };
    let workers = workers.clamp(1, batch.len().max(1));
    if workers == 1 {
        let (_, loss, grads) = shard_grads(batch, 0)?;
        return Ok((loss, grads));
    }
    let chunk = batch.len().div_ceil(workers);
    let results: Vec<(usize, f64, Vec<Tensor<F>>)> = std::thread::scope(|s| {
        let handles: Vec<_> = batch
            .chunks(chunk)
            .enumerate()
            .map(|(w, shard)| s.spawn(move || shard_grads(shard, w)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("gradient worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    let total: usize = results.iter().map(|r| r.0).sum();
    let mut loss = 0.0;
    let mut grads: Vec<Tensor<F>> = results[0].2.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for (n, l, gs) in &results {
        let w = *n as f64 / total as f64;
        loss += w * l;
        let wf = F::from_f64_lossy(w);
        for (acc, g) in grads.iter_mut().zip(gs) {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += wf * b;
            }
        }
    }
    Ok((loss, grads))
}

/// Teacher-forced training with periodic validation and best-checkpoint retention.
pub fn train<F: Real>(
    model: TransformerModel<F>,
    train_pairs: &[EncodedPair],
    val: Option<&Validation<'_>>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    if train_pairs.is_empty() {
        return Err(Error::validation("no training pairs"));
    }
    let hidden = model.config().hidden_size;
    let batch_size = cfg.batch_size_for(hidden).min(train_pairs.len());
    let mut model = model;
    let mut opt = AdamState::new(model.params());
    let mut log = Vec::new();
    let mut best: Option<(TransformerModel<F>, u64, f64)> = None;
    let mut final_val_f = None;
    let mut stale = 0usize;
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    let mut cursor = order.len();
    let mut epoch = 0u64;
    let mut step = 0u64;
    while step < cfg.max_steps {
        step += 1;
        if cursor + batch_size > order.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch, 0x5e));
            order.shuffle(&mut rng);
            epoch += 1;
            cursor = 0;
        }
        let batch: Vec<&EncodedPair> = order[cursor..cursor + batch_size].iter().map(|&i| &train_pairs[i]).collect();
        cursor += batch_size;
        let (loss, grads) = batch_gradients(&model, &batch, cfg.label_smoothing, cfg.workers, derive_seed(cfg.seed, step, 0xd1))?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step: step as usize, loss });
        }
        let lr = learning_rate(step, hidden, cfg.learning_rate_factor, cfg.warmup_steps);
        adam_step(model.params_mut(), &grads, &mut opt, lr, &cfg.adam)?;
        let mut entry = LogEntry { step, loss, lr, val_f: None };
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!("step {step} loss {loss:.4} lr {lr:.3e}");
        }
        let last = step == cfg.max_steps;
        let due = last || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
        let mut stop = false;
        if let (Some(v), true) = (val, due) {
            let f = validation_f(&model, v, &cfg.val_beam, cfg.workers)?;
            log::info!("step {step} validation F {f:.4}");
            entry.val_f = Some(f);
            final_val_f = Some(f);
            if cfg.stop_at_val_f.is_some_and(|target| f >= target) {
                stop = true;
            }
            if best.as_ref().is_none_or(|b| f > b.2) {
                best = Some((model.clone(), step, f));
                stale = 0;
            } else {
                stale += 1;
                if cfg.early_stop_patience > 0 && stale >= cfg.early_stop_patience {
                    log::info!("early stop at step {step}");
                    stop = true;
                }
            }
        }
        log.push(entry);
        if stop {
            break;
        }
    }
    let (best_model, best_step, best_val_f) = match best {
        Some((m, s, f)) => (m, s, Some(f)),
        None => (model.clone(), step, None),
    };
    Ok(TrainOutcome {
        best: best_model,
        best_step,
        best_val_f,
        final_model: model,
        final_val_f,
        optimizer: opt,
        log,
        steps: step,
    })
}

const MAGIC: &[u8; 8] = b"MEDSEQCK";
const FORMAT_VERSION: u32 = 1;
const LOG_TAIL: usize = 100;

/// Everything needed to resume or reuse a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F: Real> {
    pub model: TransformerModel<F>,
    pub src_tokenizer_hash: String,
    pub tgt_tokenizer_hash: String,
    pub optimizer: Option<AdamState<F>>,
    pub log_tail: Vec<LogEntry>,
    /// Free-form provenance, stored under `meta.`.
    pub meta: KeyValues,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, msg: impl Into<String>) -> Error {
        Error::Corrupt {
            path: self.path.to_path_buf(),
            message: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| self.corrupt(format!("implausible length {n}")))
    }

    fn text(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.corrupt("invalid utf-8"))
    }

    fn tensor<F: Real>(&mut self) -> Result<Tensor<F>> {
        let rank = self.len()?;
        let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(F::BYTES).ok_or_else(|| self.corrupt("tensor too large"))?)?;
        let data = raw.chunks(F::BYTES).map(F::read_le).collect();
        Tensor::new(shape, data)
    }
}

fn put_text(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl<F: Real> Checkpoint<F> {
    pub fn new(model: TransformerModel<F>, src_tok: &TokenizerModel, tgt_tok: &TokenizerModel) -> Self {
        Checkpoint {
            model,
            src_tokenizer_hash: src_tok.content_hash(),
            tgt_tokenizer_hash: tgt_tok.content_hash(),
            optimizer: None,
            log_tail: Vec::new(),
            meta: KeyValues::new(),
        }
    }

    fn header(&self) -> KeyValues {
        let mut kv = self.model.config().to_kv().prefixed("model");
        kv.set("dtype", F::DTYPE);
        kv.set("tokenizer.source", &self.src_tokenizer_hash);
        kv.set("tokenizer.target", &self.tgt_tokenizer_hash);
        kv.set("optimizer.present", self.optimizer.is_some());
        kv.set("optimizer.step", self.optimizer.as_ref().map_or(0, |o| o.step));
        kv.merge(&self.meta.prefixed("meta"));
        kv
    }

    /// Magic, version, header text, named tensors, optional moments, log
    /// tail, then a SHA-256 of all preceding bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_text(&mut out, &self.header().to_text());
        let params = self.model.params();
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for (_, name, t) in params.iter() {
            put_text(&mut out, name);
            t.write_le(&mut out);
        }
        if let Some(opt) = &self.optimizer {
            for t in opt.m.iter().chain(&opt.v) {
                t.write_le(&mut out);
            }
        }
        let tail_start = self.log_tail.len().saturating_sub(LOG_TAIL);
        let log: String = self.log_tail[tail_start..].iter().map(|e| e.to_line() + "\n").collect();
        put_text(&mut out, &log);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |m: &str| Error::Corrupt {
            path: path.to_path_buf(),
            message: m.to_string(),
        };
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { bytes: body, pos: 8, path };
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(corrupt(&format!("unsupported format version {version}")));
        }
        let header = KeyValues::parse(&r.text()?, &path.display().to_string())?;
        let dtype = header.get("dtype").unwrap_or("");
        if dtype != F::DTYPE {
            return Err(corrupt(&format!("stored as {dtype}, requested {}", F::DTYPE)));
        }
        let config = ModelConfig::from_kv(&header.section("model"))?;
        let n = r.len()?;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let name = r.text()?;
            let t = r.tensor()?;
            store.insert(name, t)?;
        }
        let model = TransformerModel::from_params(config, store)?;
        let optimizer = if header.req::<bool>("optimizer.present")? {
            let read = |r: &mut Reader<'_>| (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>();
            let m = read(&mut r)?;
            let v = read(&mut r)?;
            Some(AdamState {
                m,
                v,
                step: header.req("optimizer.step")?,
            })
        } else {
            None
        };
        let log_tail = r
            .text()?
            .lines()
            .map(|l| LogEntry::from_line(l).ok_or_else(|| corrupt("bad log line")))
            .collect::<Result<Vec<_>>>()?;
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Checkpoint {
            model,
            src_tokenizer_hash: header.req("tokenizer.source")?,
            tgt_tokenizer_hash: header.req("tokenizer.target")?,
            optimizer,
            log_tail,
            meta: header.section("meta"),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }

    /// Errors unless both tokenizers match the hashes recorded at training time.
    pub fn check_tokenizers(&self, src_tok: &TokenizerModel, tgt_tok: &TokenizerModel) -> Result<()> {
        if src_tok.content_hash() != self.src_tokenizer_hash || tgt_tok.content_hash() != self.tgt_tokenizer_hash {
            return Err(Error::validation("tokenizers differ from those the checkpoint was trained with"));
        }
        Ok(())
    }
}

/// Hex SHA-256 of a file.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

pub fn text_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Sampling distributions of the hyperparameter search.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpace {
    pub hidden_min: usize,
    pub hidden_max: usize,
    /// Hidden sizes are drawn uniformly among multiples of this step (the head count).
    pub hidden_step: usize,
    pub lr_factors: Vec<f64>,
    pub dropout_max: f64,
    pub n_trials: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            hidden_min: 256,
            hidden_max: 512,
            hidden_step: 8,
            lr_factors: vec![1.0, 2.0],
            dropout_max: 0.2,
            n_trials: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialConfig {
    pub hidden_size: usize,
    pub learning_rate_factor: f64,
    pub layer_postprocess_dropout: f64,
    pub attention_dropout: f64,
    pub relu_dropout: f64,
    pub batch_size: usize,
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let lo = self.hidden_min.div_ceil(self.hidden_step.max(1)) * self.hidden_step;
        if self.hidden_step == 0 || lo > self.hidden_max {
            return Err(Error::config("no hidden size fits the search bounds"));
        }
        if self.lr_factors.is_empty() || !(0.0..1.0).contains(&self.dropout_max) || self.n_trials == 0 {
            return Err(Error::config("invalid search space"));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> TrialConfig {
        let lo = self.hidden_min.div_ceil(self.hidden_step);
        let hi = self.hidden_max / self.hidden_step;
        let hidden_size = rng.gen_range(lo..=hi) * self.hidden_step;
        let learning_rate_factor = self.lr_factors[rng.gen_range(0..self.lr_factors.len())];
        let mut dropout = || rng.gen_range(0.0..=self.dropout_max);
        TrialConfig {
            hidden_size,
            learning_rate_factor,
            layer_postprocess_dropout: dropout(),
            attention_dropout: dropout(),
            relu_dropout: dropout(),
            batch_size: derived_batch_size(hidden_size),
        }
    }

    pub fn sample_trials(&self, seed: u64) -> Result<Vec<TrialConfig>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..self.n_trials).map(|_| self.sample(&mut rng)).collect())
    }
}

pub struct TrialResult<F: Real> {
    pub index: usize,
    pub trial: TrialConfig,
    pub val_f: f64,
    pub outcome: TrainOutcome<F>,
}

/// Trains one model per sampled configuration and ranks them by validation F
/// (ties keep sampling order). The feed-forward size keeps the base ratio to
/// the hidden size; an explicit base batch size overrides the derived one.
pub fn random_search<F: Real>(
    space: &SearchSpace,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    train_pairs: &[EncodedPair],
    val: &Validation<'_>,
    seed: u64,
) -> Result<Vec<TrialResult<F>>> {
    let trials = space.sample_trials(seed)?;
    let ratio = base_model.ffn_size as f64 / base_model.hidden_size as f64;
    let mut results = Vec::with_capacity(trials.len());
    for (index, trial) in trials.into_iter().enumerate() {
        let model_cfg = ModelConfig {
            hidden_size: trial.hidden_size,
            ffn_size: ((trial.hidden_size as f64 * ratio).round() as usize).max(1),
            layer_postprocess_dropout: trial.layer_postprocess_dropout,
            attention_dropout: trial.attention_dropout,
            relu_dropout: trial.relu_dropout,
            ..base_model.clone()
        };
        let train_cfg = TrainConfig {
            learning_rate_factor: trial.learning_rate_factor,
            seed: derive_seed(seed, index as u64, 0x7a1),
            ..base_train.clone()
        };
        log::info!("trial {index}: {trial:?}");
        let model = TransformerModel::new(model_cfg, train_cfg.seed)?;
        let outcome = train(model, train_pairs, Some(val), &train_cfg)?;
        results.push(TrialResult {
            index,
            val_f: outcome.best_val_f.unwrap_or(0.0),
            trial,
            outcome,
        });
    }
    results.sort_by(|a, b| b.val_f.total_cmp(&a.val_f).then(a.index.cmp(&b.index)));
    Ok(results)
}

/// Tab-separated trial table, best first.
pub fn format_trials<F: Real>(results: &[TrialResult<F>], paths: &[PathBuf]) -> String {
    let mut out = String::from(
        "rank\ttrial\thidden_size\tbatch_size\tlr_factor\tpostprocess_dropout\tattention_dropout\trelu_dropout\tbest_step\tval_f\tcheckpoint\n",
    );
    for (rank, r) in results.iter().enumerate() {
        let t = &r.trial;
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{}\t{:.6}\t{}",
            rank + 1,
            r.index,
            t.hidden_size,
            t.batch_size,
            t.learning_rate_factor,
            t.layer_postprocess_dropout,
            t.attention_dropout,
            t.relu_dropout,
            r.outcome.best_step,
            r.val_f,
            paths.get(rank).map_or_else(String::new, |p| p.display().to_string())
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_sizes_of_published_configurations() {
        assert_eq!(derived_batch_size(296), 172);
        assert_eq!(derived_batch_size(336), 152);
        assert_eq!(derived_batch_size(312), 164);
    }

    #[test]
    fn schedule_value_and_shape() {
        let lr = learning_rate(16_000, 296, 2.0, 16_000);
        assert!((lr - 9.19e-4).abs() < 5e-7, "{lr}");
        for (h, f, w) in [(64, 1.0, 400), (296, 2.0, 16_000), (512, 2.0, 10)] {
            let peak = learning_rate(w, h, f, w);
            assert!(learning_rate(w - 1, h, f, w) < peak);
            assert!(learning_rate(w + 1, h, f, w) < peak);
        }
        let rates: Vec<f64> = (1..=1000).map(|s| learning_rate(s, 64, 1.0, 300)).collect();
        assert!(rates[..300].windows(2).all(|w| w[0] < w[1]));
        assert!(rates[299..].windows(2).all(|w| w[0] > w[1]));
    }

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::from_f64(&[1], &[v]).unwrap()).unwrap();
        s
    }

    #[test]
    fn adam_first_step_by_hand() {
        let mut p = scalar_store(1.0);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig::default();
        let g = vec![Tensor::from_f64(&[1], &[1.0]).unwrap()];
        adam_step(&mut p, &g, &mut st, 0.01, &cfg).unwrap();
        // m = 0.1, v = 0.003; corrected both to 1.
        let m_hat = 0.1 / (1.0 - 0.9);
        let v_hat = 0.003 / (1.0 - 0.997);
        let expected = 1.0 - 0.01 * m_hat / (f64::sqrt(v_hat) + 1e-9);
        assert!((p.tensors()[0].data()[0] - expected).abs() < 1e-15);
        assert!((st.m[0].data()[0] - 0.1).abs() < 1e-15);
        assert!((st.v[0].data()[0] - 0.003).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_gradient_and_zero_rate() {
        let mut p = scalar_store(0.5);
        let mut st = AdamState::new(&p);
        let zero = vec![Tensor::zeros(&[1])];
        adam_step(&mut p, &zero, &mut st, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(p.tensors()[0].data()[0], 0.5);
        let g = vec![Tensor::from_f64(&[1], &[3.0]).unwrap()];
        adam_step(&mut p, &g, &mut st, 0.0, &AdamConfig::default()).unwrap();
        assert_eq!(p.tensors()[0].data()[0], 0.5);
        assert!(adam_step(&mut p, &[], &mut st, 0.1, &AdamConfig::default()).is_err());
    }

    #[test]
    fn search_samples_within_bounds_and_repeat() {
        let space = SearchSpace::default();
        let a = space.sample_trials(5).unwrap();
        assert_eq!(a.len(), 40);
        assert_eq!(a, space.sample_trials(5).unwrap());
        for t in &a {
            assert!((256..=512).contains(&t.hidden_size) && t.hidden_size % 8 == 0);
            assert!([1.0, 2.0].contains(&t.learning_rate_factor));
            for d in [t.layer_postprocess_dropout, t.attention_dropout, t.relu_dropout] {
                assert!((0.0..=0.2).contains(&d));
            }
            assert_eq!(t.batch_size, derived_batch_size(t.hidden_size));
        }
    }

    #[test]
    fn train_config_roundtrip() {
        let cfg = TrainConfig {
            batch_size: Some(32),
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        assert_eq!(TrainConfig::from_kv(&TrainConfig::default().to_kv()).unwrap(), TrainConfig::default());
        let mut kv = cfg.to_kv();
        kv.set("momentum", 1);
        assert!(TrainConfig::from_kv(&kv).is_err());
    }

    #[test]
    fn log_line_roundtrip() {
        for e in [
            LogEntry { step: 3, loss: 1.234_567_890_123, lr: 1e-4, val_f: None },
            LogEntry { step: 9, loss: 0.1, lr: 2.5e-3, val_f: Some(0.875) },
        ] {
            assert_eq!(LogEntry::from_line(&e.to_line()), Some(e));
        }
    }
}
