//! Encoder-decoder Transformer conditioned on the certificate side variables.
//!
//! Each side variable owns a `cardinality x hidden` projection of its one-hot
//! encoding; the four projected vectors are summed and added to every
//! position of the embedded source sequence, after the positional encoding.
//! Sublayers use pre-normalization with a final layer norm on both stacks.
//! The decoder token embedding doubles as the output projection.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::records::{SideVariables, MAX_CODES, SIDE_CARDINALITIES};
use crate::tensor::{AttentionMask, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::textprep::{EncodedPair, BOS, EOS, PAD};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub n_heads: usize,
    pub ffn_size: usize,
    pub layer_postprocess_dropout: f64,
    pub attention_dropout: f64,
    pub relu_dropout: f64,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub max_src_len: usize,
    /// Decoder positions: 20 codes plus EOS.
    pub max_tgt_len: usize,
    pub side_cardinalities: [usize; 4],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_size: 64,
            n_layers_enc: 2,
            n_layers_dec: 2,
            n_heads: 4,
            ffn_size: 256,
            layer_postprocess_dropout: 0.1,
            attention_dropout: 0.1,
            relu_dropout: 0.1,
            src_vocab_size: crate::textprep::DEFAULT_SRC_VOCAB,
            tgt_vocab_size: crate::textprep::DEFAULT_TGT_VOCAB,
            max_src_len: crate::textprep::DEFAULT_MAX_SRC_LEN,
            max_tgt_len: MAX_CODES + 1,
            side_cardinalities: SIDE_CARDINALITIES,
        }
    }
}

const CONFIG_KEYS: [&str; 13] = [
    "hidden_size",
    "n_layers_enc",
    "n_layers_dec",
    "n_heads",
    "ffn_size",
    "layer_postprocess_dropout",
    "attention_dropout",
    "relu_dropout",
    "src_vocab_size",
    "tgt_vocab_size",
    "max_src_len",
    "max_tgt_len",
    "side_cardinalities",
];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.n_heads == 0 || self.hidden_size % self.n_heads != 0 {
            return Err(Error::config(format!(
                "hidden_size {} must be a positive multiple of n_heads {}",
                self.hidden_size, self.n_heads
            )));
        }
        for (name, p) in [
            ("layer_postprocess_dropout", self.layer_postprocess_dropout),
            ("attention_dropout", self.attention_dropout),
            ("relu_dropout", self.relu_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("{name} = {p} must lie in [0, 1)")));
            }
        }
        if self.max_tgt_len != MAX_CODES + 1 {
            return Err(Error::config(format!(
                "max_tgt_len must be {} (20 codes plus EOS), got {}",
                MAX_CODES + 1,
                self.max_tgt_len
            )));
        }
        if self.ffn_size == 0 || self.max_src_len == 0 {
            return Err(Error::config("ffn_size and max_src_len must be positive"));
        }
        if self.src_vocab_size <= EOS as usize || self.tgt_vocab_size <= EOS as usize {
            return Err(Error::config("vocabularies must include the reserved tokens"));
        }
        if self.side_cardinalities.iter().any(|&c| c == 0) {
            return Err(Error::config("side cardinalities must be positive"));
        }
        Ok(())
    }

    /// Number of scalar parameters.
    ///
    /// With hidden `h`, feed-forward `f`, source and target vocabularies `vs`, `vt`
    /// and side cardinality total `s`:
    /// `(vs + vt + s) h + 4h + ne (4h^2 + 2hf + f + 5h) + nd (8h^2 + 2hf + f + 7h)`.
    pub fn param_count(&self) -> usize {
        let (h, f) = (self.hidden_size, self.ffn_size);
        let s: usize = self.side_cardinalities.iter().sum();
        let enc = 4 * h * h + 2 * h * f + f + 5 * h;
        let dec = 8 * h * h + 2 * h * f + f + 7 * h;
        (self.src_vocab_size + self.tgt_vocab_size + s) * h
            + 4 * h
            + self.n_layers_enc * enc
            + self.n_layers_dec * dec
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("hidden_size", self.hidden_size);
        kv.set("n_layers_enc", self.n_layers_enc);
        kv.set("n_layers_dec", self.n_layers_dec);
        kv.set("n_heads", self.n_heads);
        kv.set("ffn_size", self.ffn_size);
        kv.set("layer_postprocess_dropout", self.layer_postprocess_dropout);
        kv.set("attention_dropout", self.attention_dropout);
        kv.set("relu_dropout", self.relu_dropout);
        kv.set("src_vocab_size", self.src_vocab_size);
        kv.set("tgt_vocab_size", self.tgt_vocab_size);
        kv.set("max_src_len", self.max_src_len);
        kv.set("max_tgt_len", self.max_tgt_len);
        let sides: Vec<String> = self.side_cardinalities.iter().map(|c| c.to_string()).collect();
        kv.set("side_cardinalities", sides.join(","));
        kv
    }

    /// Reads keys written by [`ModelConfig::to_kv`]; absent keys keep their defaults.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(&CONFIG_KEYS)?;
        let d = ModelConfig::default();
        let side_cardinalities = match kv.get("side_cardinalities") {
            None => d.side_cardinalities,
            Some(raw) => {
                let parts: Vec<usize> = raw
                    .split(',')
                    .map(|p| p.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::config(format!("side_cardinalities = {raw:?}: {e}")))?;
                parts
                    .try_into()
                    .map_err(|_| Error::config("side_cardinalities needs 4 values"))?
            }
        };
        let cfg = ModelConfig {
            hidden_size: kv.opt("hidden_size", d.hidden_size)?,
            n_layers_enc: kv.opt("n_layers_enc", d.n_layers_enc)?,
            n_layers_dec: kv.opt("n_layers_dec", d.n_layers_dec)?,
            n_heads: kv.opt("n_heads", d.n_heads)?,
            ffn_size: kv.opt("ffn_size", d.ffn_size)?,
            layer_postprocess_dropout: kv.opt("layer_postprocess_dropout", d.layer_postprocess_dropout)?,
            attention_dropout: kv.opt("attention_dropout", d.attention_dropout)?,
            relu_dropout: kv.opt("relu_dropout", d.relu_dropout)?,
            src_vocab_size: kv.opt("src_vocab_size", d.src_vocab_size)?,
            tgt_vocab_size: kv.opt("tgt_vocab_size", d.tgt_vocab_size)?,
            max_src_len: kv.opt("max_src_len", d.max_src_len)?,
            max_tgt_len: kv.opt("max_tgt_len", d.max_tgt_len)?,
            side_cardinalities,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
struct AttnIds {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
}

#[derive(Clone, Debug)]
struct NormIds {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct EncLayer {
    ln_attn: NormIds,
    attn: AttnIds,
    ln_ffn: NormIds,
    ffn: FfnIds,
}

#[derive(Clone, Debug)]
struct DecLayer {
    ln_self: NormIds,
    self_attn: AttnIds,
    ln_cross: NormIds,
    cross_attn: AttnIds,
    ln_ffn: NormIds,
    ffn: FfnIds,
}

#[derive(Clone, Debug)]
struct Layout {
    src_emb: ParamId,
    tgt_emb: ParamId,
    side: [ParamId; 4],
    enc: Vec<EncLayer>,
    enc_ln: NormIds,
    dec: Vec<DecLayer>,
    dec_ln: NormIds,
}

const SIDE_NAMES: [&str; 4] = ["age", "year", "gender", "origin"];

#[derive(Clone, Copy)]
enum Init {
    /// Uniform with variance 1/hidden.
    Embedding,
    Glorot,
    Zeros,
    Ones,
}

/// Parameter names and shapes in registration order.
fn parameter_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (h, f) = (cfg.hidden_size, cfg.ffn_size);
    let mut specs = vec![
        ("embed.source".to_string(), vec![cfg.src_vocab_size, h], Init::Embedding),
        ("embed.target".to_string(), vec![cfg.tgt_vocab_size, h], Init::Embedding),
    ];
    for (name, &card) in SIDE_NAMES.iter().zip(&cfg.side_cardinalities) {
        specs.push((format!("side.{name}"), vec![card, h], Init::Embedding));
    }
    let norm = |specs: &mut Vec<(String, Vec<usize>, Init)>, p: &str| {
        specs.push((format!("{p}.gamma"), vec![h], Init::Ones));
        specs.push((format!("{p}.beta"), vec![h], Init::Zeros));
    };
    let attn = |specs: &mut Vec<(String, Vec<usize>, Init)>, p: &str| {
        for w in ["q", "k", "v", "o"] {
            specs.push((format!("{p}.{w}"), vec![h, h], Init::Glorot));
        }
    };
    let ffn = |specs: &mut Vec<(String, Vec<usize>, Init)>, p: &str| {
        specs.push((format!("{p}.w1"), vec![h, f], Init::Glorot));
        specs.push((format!("{p}.b1"), vec![f], Init::Zeros));
        specs.push((format!("{p}.w2"), vec![f, h], Init::Glorot));
        specs.push((format!("{p}.b2"), vec![h], Init::Zeros));
    };
    for l in 0..cfg.n_layers_enc {
        norm(&mut specs, &format!("enc.{l}.ln_attn"));
        attn(&mut specs, &format!("enc.{l}.attn"));
        norm(&mut specs, &format!("enc.{l}.ln_ffn"));
        ffn(&mut specs, &format!("enc.{l}.ffn"));
    }
    norm(&mut specs, "enc.ln");
    for l in 0..cfg.n_layers_dec {
        norm(&mut specs, &format!("dec.{l}.ln_self"));
        attn(&mut specs, &format!("dec.{l}.self"));
        norm(&mut specs, &format!("dec.{l}.ln_cross"));
        attn(&mut specs, &format!("dec.{l}.cross"));
        norm(&mut specs, &format!("dec.{l}.ln_ffn"));
        ffn(&mut specs, &format!("dec.{l}.ffn"));
    }
    norm(&mut specs, "dec.ln");
    specs
}

/// Encoder states for a batch of sources.
pub struct EncoderOutput {
    /// `[batch * src_len, hidden]`
    pub memory: Var,
    pub batch: usize,
    pub src_len: usize,
    /// `[batch, src_len]`, false at padding.
    pub key_valid: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel<F: Real> {
    config: ModelConfig,
    params: ParamStore<F>,
    layout: Layout,
    positions: Vec<F>,
}

impl PartialEq for Layout {
    fn eq(&self, _: &Self) -> bool {
        // Derived from the config, compared through it.
        true
    }
}

impl<F: Real> TransformerModel<F> {
    /// A freshly initialized model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_init_scale(config, seed, 1.0)
    }

    /// Like [`TransformerModel::new`] with every random weight multiplied by `scale`.
    pub fn with_init_scale(config: ModelConfig, seed: u64, scale: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_size as f64;
        let mut store = ParamStore::new();
        for (name, shape, init) in parameter_specs(&config) {
            let n: usize = shape.iter().product();
            let data: Vec<F> = match init {
                Init::Zeros => vec![F::zero(); n],
                Init::Ones => vec![F::one(); n],
                Init::Embedding | Init::Glorot => {
                    let limit = match init {
                        Init::Embedding => (3.0 / h).sqrt(),
                        _ => (6.0 / (shape[0] + shape[1]) as f64).sqrt(),
                    } * scale;
                    (0..n)
                        .map(|_| F::from_f64_lossy(rng.gen_range(-1.0..=1.0) * limit))
                        .collect()
                }
            };
            store.insert(name, Tensor::new(shape, data)?)?;
        }
        Self::from_params(config, store)
    }

    /// Wraps existing parameters, checking names and shapes against `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let specs = parameter_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::validation(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &specs {
            match params.by_name(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Shape {
                        op: "load parameter",
                        left: t.shape().to_vec(),
                        right: shape.clone(),
                    })
                }
                None => return Err(Error::validation(format!("missing parameter {name}"))),
            }
        }
        let id = |n: &str| params.id(n).expect("checked above");
        let norm = |p: &str| NormIds {
            gamma: id(&format!("{p}.gamma")),
            beta: id(&format!("{p}.beta")),
        };
        let attn = |p: &str| AttnIds {
            q: id(&format!("{p}.q")),
            k: id(&format!("{p}.k")),
            v: id(&format!("{p}.v")),
            o: id(&format!("{p}.o")),
        };
        let ffn = |p: &str| FfnIds {
            w1: id(&format!("{p}.w1")),
            b1: id(&format!("{p}.b1")),
            w2: id(&format!("{p}.w2")),
            b2: id(&format!("{p}.b2")),
        };
        let layout = Layout {
            src_emb: id("embed.source"),
            tgt_emb: id("embed.target"),
            side: SIDE_NAMES.map(|n| id(&format!("side.{n}"))),
            enc: (0..config.n_layers_enc)
                .map(|l| EncLayer {
                    ln_attn: norm(&format!("enc.{l}.ln_attn")),
                    attn: attn(&format!("enc.{l}.attn")),
                    ln_ffn: norm(&format!("enc.{l}.ln_ffn")),
                    ffn: ffn(&format!("enc.{l}.ffn")),
                })
                .collect(),
            enc_ln: norm("enc.ln"),
            dec: (0..config.n_layers_dec)
                .map(|l| DecLayer {
                    ln_self: norm(&format!("dec.{l}.ln_self")),
                    self_attn: attn(&format!("dec.{l}.self")),
                    ln_cross: norm(&format!("dec.{l}.ln_cross")),
                    cross_attn: attn(&format!("dec.{l}.cross")),
                    ln_ffn: norm(&format!("dec.{l}.ln_ffn")),
                    ffn: ffn(&format!("dec.{l}.ffn")),
                })
                .collect(),
            dec_ln: norm("dec.ln"),
        };
        let positions = sinusoid_table(config.max_src_len.max(config.max_tgt_len), config.hidden_size);
        Ok(TransformerModel {
            config,
            params,
            layout,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<F> {
        self.params
    }

    /// Projection matrix of side variable `i` (age, year, gender, origin).
    pub fn side_projection_id(&self, i: usize) -> ParamId {
        self.layout.side[i]
    }

    fn scaled_positional(
        &self,
        g: &mut Graph<'_, F>,
        emb: ParamId,
        seqs: &[Vec<u32>],
        len: usize,
    ) -> Result<Var> {
        let h = self.config.hidden_size;
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD, len - s.len()));
        }
        let table = g.param(emb);
        let x = g.embedding(table, &ids)?;
        let x = g.scale(x, (h as f64).sqrt());
        let pe = g.constant(Tensor::new(vec![len, h], self.positions[..len * h].to_vec())?);
        g.add_tiled(x, pe)
    }

    /// Token embedding times sqrt(hidden) plus positional encoding, without
    /// side variables. `[batch * len, hidden]`, padded to the longest source.
    pub fn embed_unconditioned(&self, g: &mut Graph<'_, F>, src: &[Vec<u32>]) -> Result<Var> {
        let len = src.iter().map(Vec::len).max().unwrap_or(0);
        if len == 0 || len > self.config.max_src_len {
            return Err(Error::validation(format!(
                "source length {len} outside 1..={}",
                self.config.max_src_len
            )));
        }
        self.scaled_positional(g, self.layout.src_emb, src, len)
    }

    /// [`embed_unconditioned`](Self::embed_unconditioned) plus the summed
    /// side-variable projections broadcast over positions.
    pub fn embed_source(
        &self,
        g: &mut Graph<'_, F>,
        src: &[Vec<u32>],
        side: &[SideVariables],
    ) -> Result<Var> {
        if src.len() != side.len() || src.is_empty() {
            return Err(Error::validation(format!(
                "{} sources with {} side records",
                src.len(),
                side.len()
            )));
        }
        let x = self.embed_unconditioned(g, src)?;
        let mut side_sum: Option<Var> = None;
        for (i, &pid) in self.layout.side.iter().enumerate() {
            let ids: Vec<u32> = side.iter().map(|s| s.indices()[i] as u32).collect();
            let table = g.param(pid);
            let e = g.embedding(table, &ids)?;
            side_sum = Some(match side_sum {
                None => e,
                Some(acc) => g.add(acc, e)?,
            });
        }
        g.add_grouped(x, side_sum.expect("four side variables"), src.len())
    }

    fn layer_norm(&self, g: &mut Graph<'_, F>, x: Var, ids: &NormIds) -> Result<Var> {
        let (gamma, beta) = (g.param(ids.gamma), g.param(ids.beta));
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }

    /// `[batch * len, hidden]` to `[batch * heads, len, head_dim]`.
    fn split_heads(&self, g: &mut Graph<'_, F>, x: Var, batch: usize, len: usize) -> Result<Var> {
        let nh = self.config.n_heads;
        let dh = self.config.hidden_size / nh;
        let y = g.permute_0213(x, [batch, len, nh, dh])?;
        g.reshape(y, &[batch * nh, len, dh])
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph<'_, F>,
        ids: &AttnIds,
        xq: Var,
        xkv: Var,
        batch: usize,
        lq: usize,
        lk: usize,
        mask: Rc<AttentionMask>,
    ) -> Result<Var> {
        let (h, nh) = (self.config.hidden_size, self.config.n_heads);
        let dh = h / nh;
        let (wq, wk, wv, wo) = (g.param(ids.q), g.param(ids.k), g.param(ids.v), g.param(ids.o));
        let q = g.matmul(xq, wq)?;
        let q = g.scale(q, 1.0 / (dh as f64).sqrt());
        let k = g.matmul(xkv, wk)?;
        let v = g.matmul(xkv, wv)?;
        let q = self.split_heads(g, q, batch, lq)?;
        let k = self.split_heads(g, k, batch, lk)?;
        let v = self.split_heads(g, v, batch, lk)?;
        let scores = g.batch_matmul(q, k, true)?;
        let p = g.masked_softmax(scores, mask)?;
        let p = g.dropout(p, self.config.attention_dropout);
        let ctx = g.batch_matmul(p, v, false)?;
        let ctx = g.permute_0213(ctx, [batch, nh, lq, dh])?;
        let ctx = g.reshape(ctx, &[batch * lq, h])?;
        g.matmul(ctx, wo)
    }

    fn feed_forward(&self, g: &mut Graph<'_, F>, x: Var, ids: &FfnIds) -> Result<Var> {
        let (w1, b1, w2, b2) = (g.param(ids.w1), g.param(ids.b1), g.param(ids.w2), g.param(ids.b2));
        let hdn = g.matmul(x, w1)?;
        let hdn = g.add_bias(hdn, b1)?;
        let hdn = g.relu(hdn);
        let hdn = g.dropout(hdn, self.config.relu_dropout);
        let out = g.matmul(hdn, w2)?;
        g.add_bias(out, b2)
    }

    /// `x + dropout(sublayer_output)`
    fn residual(&self, g: &mut Graph<'_, F>, x: Var, y: Var) -> Result<Var> {
        let y = g.dropout(y, self.config.layer_postprocess_dropout);
        g.add(x, y)
    }

    /// Runs the encoder stack. Weights are read from the graph's parameter
    /// store, which must share this model's layout.
    pub fn encode(
        &self,
        g: &mut Graph<'_, F>,
        src: &[Vec<u32>],
        side: &[SideVariables],
    ) -> Result<EncoderOutput> {
        let x = self.embed_source(g, src, side)?;
        let mut x = g.dropout(x, self.config.layer_postprocess_dropout);
        let batch = src.len();
        let len = src.iter().map(Vec::len).max().unwrap_or(0);
        let key_valid: Vec<bool> = src
            .iter()
            .flat_map(|s| (0..len).map(move |i| i < s.len()))
            .collect();
        let mask = Rc::new(AttentionMask {
            batch,
            heads: self.config.n_heads,
            queries: len,
            keys: len,
            key_valid: key_valid.clone(),
            causal: false,
        });
        for layer in &self.layout.enc {
            let y = self.layer_norm(g, x, &layer.ln_attn)?;
            let y = self.attention(g, &layer.attn, y, y, batch, len, len, mask.clone())?;
            x = self.residual(g, x, y)?;
            let y = self.layer_norm(g, x, &layer.ln_ffn)?;
            let y = self.feed_forward(g, y, &layer.ffn)?;
            x = self.residual(g, x, y)?;
        }
        let memory = self.layer_norm(g, x, &self.layout.enc_ln)?;
        Ok(EncoderOutput {
            memory,
            batch,
            src_len: len,
            key_valid,
        })
    }

    /// Decoder logits `[batch * prefix_len, tgt_vocab]` given encoder states.
    /// Prefixes are padded to the longest; position `t` sees `prefix[..=t]` only.
    pub fn decode(
        &self,
        g: &mut Graph<'_, F>,
        enc: &EncoderOutput,
        tgt_prefix: &[Vec<u32>],
    ) -> Result<Var> {
        let batch = tgt_prefix.len();
        if batch != enc.batch {
            return Err(Error::validation(format!(
                "{batch} target prefixes for {} encoded sources",
                enc.batch
            )));
        }
        let len = tgt_prefix.iter().map(Vec::len).max().unwrap_or(0);
        if len == 0 || len > self.config.max_tgt_len {
            return Err(Error::validation(format!(
                "target length {len} outside 1..={}",
                self.config.max_tgt_len
            )));
        }
        let x = self.scaled_positional(g, self.layout.tgt_emb, tgt_prefix, len)?;
        let mut x = g.dropout(x, self.config.layer_postprocess_dropout);
        let nh = self.config.n_heads;
        let self_mask = Rc::new(AttentionMask {
            batch,
            heads: nh,
            queries: len,
            keys: len,
            key_valid: tgt_prefix
                .iter()
                .flat_map(|s| (0..len).map(move |i| i < s.len()))
                .collect(),
            causal: true,
        });
        let cross_mask = Rc::new(AttentionMask {
            batch,
            heads: nh,
            queries: len,
            keys: enc.src_len,
            key_valid: enc.key_valid.clone(),
            causal: false,
        });
        for layer in &self.layout.dec {
            let y = self.layer_norm(g, x, &layer.ln_self)?;
            let y = self.attention(g, &layer.self_attn, y, y, batch, len, len, self_mask.clone())?;
            x = self.residual(g, x, y)?;
            let y = self.layer_norm(g, x, &layer.ln_cross)?;
            let y = self.attention(
                g,
                &layer.cross_attn,
                y,
                enc.memory,
                batch,
                len,
                enc.src_len,
                cross_mask.clone(),
            )?;
            x = self.residual(g, x, y)?;
            let y = self.layer_norm(g, x, &layer.ln_ffn)?;
            let y = self.feed_forward(g, y, &layer.ffn)?;
            x = self.residual(g, x, y)?;
        }
        let out = self.layer_norm(g, x, &self.layout.dec_ln)?;
        let emb = g.param(self.layout.tgt_emb);
        g.matmul_t(out, emb, false, true)
    }

    /// Logits for every prefix position; dropout follows the graph's mode.
    pub fn forward(
        &self,
        g: &mut Graph<'_, F>,
        src: &[Vec<u32>],
        side: &[SideVariables],
        tgt_prefix: &[Vec<u32>],
    ) -> Result<Var> {
        let enc = self.encode(g, src, side)?;
        self.decode(g, &enc, tgt_prefix)
    }

    /// Teacher-forced mean cross-entropy over non-padding target tokens,
    /// EOS included.
    pub fn sequence_loss(
        &self,
        g: &mut Graph<'_, F>,
        batch: &[&EncodedPair],
        label_smoothing: f64,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::validation("empty batch"));
        }
        let src: Vec<Vec<u32>> = batch.iter().map(|p| p.src.clone()).collect();
        let side: Vec<SideVariables> = batch.iter().map(|p| p.side).collect();
        let tgt_in: Vec<Vec<u32>> = batch
            .iter()
            .map(|p| std::iter::once(BOS).chain(p.tgt.iter().copied()).collect())
            .collect();
        let len = tgt_in.iter().map(Vec::len).max().unwrap_or(0);
        let mut targets = Vec::with_capacity(batch.len() * len);
        for p in batch {
            targets.extend_from_slice(&p.tgt);
            targets.push(EOS);
            targets.extend(std::iter::repeat_n(PAD, len - p.tgt.len() - 1));
        }
        let logits = self.forward(g, &src, &side, &tgt_in)?;
        g.cross_entropy(logits, &targets, PAD, label_smoothing)
    }
}

/// Number of target tokens a pair contributes to the loss (codes plus EOS).
pub fn loss_tokens(pairs: &[&EncodedPair]) -> usize {
    pairs.iter().map(|p| p.tgt.len() + 1).sum()
}

/// `pe[pos, 2i] = sin(pos / 10000^(2i/h))`, `pe[pos, 2i+1] = cos(...)`.
fn sinusoid_table<F: Real>(len: usize, h: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(len * h);
    for pos in 0..len {
        for j in 0..h {
            let rate = 10000f64.powf((2 * (j / 2)) as f64 / h as f64);
            let angle = pos as f64 / rate;
            out.push(F::from_f64_lossy(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    out
}
