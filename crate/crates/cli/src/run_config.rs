//! Merged run configuration: config file, then `--set` and flag overrides,
//! with `MEDSEQ_SEED` as the seed fallback.

use std::path::Path;

use medseq::config::KeyValues;
use medseq::decode::BeamConfig;
use medseq::pipeline::TokenizerSettings;
use medseq::synth::GeneratorConfig;
use medseq::train::{SearchSpace, TrainConfig};
use medseq::transformer::ModelConfig;
use medseq::{Error, Result};

pub const SEED_ENV: &str = "MEDSEQ_SEED";

const SYNTH_KEYS: [&str; 8] = [
    "n_records",
    "lexicon_seed",
    "p_paper_origin",
    "p_bang_given_paper",
    "p_misalign",
    "p_filler",
    "p_typo_electronic",
    "line_count_distribution",
];
const SPLIT_KEYS: [&str; 2] = ["per_year_val", "per_year_test"];
const TOKENIZE_KEYS: [&str; 3] = ["src_vocab", "tgt_vocab", "max_src_len"];
const DECODE_KEYS: [&str; 4] = ["beam_width", "alpha", "max_tokens", "workers"];
const EVAL_KEYS: [&str; 2] = ["bootstrap_replicates", "level"];
const SEARCH_KEYS: [&str; 5] = ["hidden_min", "hidden_max", "n_trials", "dropout_max", "lr_factors"];
const SECTIONS: [&str; 8] = ["synth", "split", "tokenize", "model", "train", "decode", "eval", "search"];

#[derive(Clone, Debug)]
pub struct EvalSettings {
    pub bootstrap_replicates: usize,
    pub level: f64,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: GeneratorConfig,
    pub lexicon_seed: u64,
    pub per_year_val: usize,
    pub per_year_test: usize,
    pub tokenize: TokenizerSettings,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub beam: BeamConfig,
    pub decode_workers: usize,
    pub eval: EvalSettings,
    pub search: SearchSpace,
}

fn parse_list<T: std::str::FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {s:?}")))
        })
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Merges `file` (if any) with `overrides` and resolves every section.
    pub fn load(file: Option<&Path>, overrides: &KeyValues, env_seed: Option<&str>) -> Result<Self> {
        let mut kv = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Validation(format!("cannot read config {}: {e}", p.display())))?;
                KeyValues::parse(&text, &p.display().to_string())?
            }
            None => KeyValues::new(),
        };
        kv.merge(overrides);
        if !kv.contains("seed") {
            if let Some(s) = env_seed {
                kv.set("seed", s);
            }
        }
        Self::from_kv(&kv)
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        for key in kv.keys() {
            let known = key == "seed" || SECTIONS.iter().any(|s| key.strip_prefix(s).is_some_and(|r| r.starts_with('.')));
            if !known {
                return Err(Error::Config(format!("unknown key {key}")));
            }
        }
        let seed: u64 = kv.opt("seed", 1)?;

        let s = kv.section("synth");
        s.reject_unknown(&SYNTH_KEYS).map_err(|e| prefix_err("synth", e))?;
        let d = GeneratorConfig::default();
        let line_count_distribution = match s.get("line_count_distribution") {
            None => d.line_count_distribution,
            Some(raw) => parse_list::<f64>("synth.line_count_distribution", raw)?
                .try_into()
                .map_err(|_| Error::Config("synth.line_count_distribution needs 6 values".into()))?,
        };
        let synth = GeneratorConfig {
            n_records: s.opt("n_records", d.n_records)?,
            seed,
            p_paper_origin: s.opt("p_paper_origin", d.p_paper_origin)?,
            p_bang_given_paper: s.opt("p_bang_given_paper", d.p_bang_given_paper)?,
            p_misalign: s.opt("p_misalign", d.p_misalign)?,
            p_filler: s.opt("p_filler", d.p_filler)?,
            p_typo_electronic: s.opt("p_typo_electronic", d.p_typo_electronic)?,
            line_count_distribution,
            ..d
        };
        synth.validate()?;
        let lexicon_seed = s.opt("lexicon_seed", 1)?;

        let sp = kv.section("split");
        sp.reject_unknown(&SPLIT_KEYS).map_err(|e| prefix_err("split", e))?;

        let t = kv.section("tokenize");
        t.reject_unknown(&TOKENIZE_KEYS).map_err(|e| prefix_err("tokenize", e))?;
        let td = TokenizerSettings::default();
        let tokenize = TokenizerSettings {
            src_vocab: t.opt("src_vocab", td.src_vocab)?,
            tgt_vocab: t.opt("tgt_vocab", td.tgt_vocab)?,
            max_src_len: t.opt("max_src_len", td.max_src_len)?,
        };

        let model = ModelConfig::from_kv(&kv.section("model")).map_err(|e| prefix_err("model", e))?;

        let mut tk = kv.section("train");
        if !tk.contains("seed") {
            tk.set("seed", seed);
        }
        let train = TrainConfig::from_kv(&tk).map_err(|e| prefix_err("train", e))?;

        let dk = kv.section("decode");
        dk.reject_unknown(&DECODE_KEYS).map_err(|e| prefix_err("decode", e))?;
        let bd = BeamConfig::default();
        let beam = BeamConfig {
            beam_width: dk.opt("beam_width", bd.beam_width)?,
            alpha: dk.opt("alpha", bd.alpha)?,
            max_tokens: dk.opt("max_tokens", bd.max_tokens)?,
        };
        if beam.beam_width == 0 || beam.max_tokens == 0 {
            return Err(Error::Config("decode.beam_width and decode.max_tokens must be positive".into()));
        }

        let ek = kv.section("eval");
        ek.reject_unknown(&EVAL_KEYS).map_err(|e| prefix_err("eval", e))?;
        let eval = EvalSettings {
            bootstrap_replicates: ek.opt("bootstrap_replicates", 1000)?,
            level: ek.opt("level", 0.95)?,
        };
        if !(0.0..1.0).contains(&eval.level) || eval.level <= 0.0 {
            return Err(Error::Config("eval.level must lie in (0, 1)".into()));
        }

        let sk = kv.section("search");
        sk.reject_unknown(&SEARCH_KEYS).map_err(|e| prefix_err("search", e))?;
        let sd = SearchSpace::default();
        let search = SearchSpace {
            hidden_min: sk.opt("hidden_min", sd.hidden_min)?,
            hidden_max: sk.opt("hidden_max", sd.hidden_max)?,
            hidden_step: model.n_heads,
            lr_factors: match sk.get("lr_factors") {
                None => sd.lr_factors,
                Some(raw) => parse_list("search.lr_factors", raw)?,
            },
            dropout_max: sk.opt("dropout_max", sd.dropout_max)?,
            n_trials: sk.opt("n_trials", sd.n_trials)?,
        };
        search.validate()?;

        Ok(RunConfig {
            seed,
            synth,
            lexicon_seed,
            per_year_val: sp.opt("per_year_val", 100)?,
            per_year_test: sp.opt("per_year_test", 100)?,
            tokenize,
            model,
            train,
            beam,
            decode_workers: dk.opt("workers", 1)?,
            eval,
            search,
        })
    }

    /// Every resolved setting, including defaults.
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("seed", self.seed);
        let s = &self.synth;
        kv.set("synth.n_records", s.n_records);
        kv.set("synth.lexicon_seed", self.lexicon_seed);
        kv.set("synth.p_paper_origin", s.p_paper_origin);
        kv.set("synth.p_bang_given_paper", s.p_bang_given_paper);
        kv.set("synth.p_misalign", s.p_misalign);
        kv.set("synth.p_filler", s.p_filler);
        kv.set("synth.p_typo_electronic", s.p_typo_electronic);
        kv.set("synth.line_count_distribution", join(&s.line_count_distribution));
        kv.set("split.per_year_val", self.per_year_val);
        kv.set("split.per_year_test", self.per_year_test);
        kv.set("tokenize.src_vocab", self.tokenize.src_vocab);
        kv.set("tokenize.tgt_vocab", self.tokenize.tgt_vocab);
        kv.set("tokenize.max_src_len", self.tokenize.max_src_len);
        kv.merge(&self.model.to_kv().prefixed("model"));
        kv.merge(&self.train.to_kv().prefixed("train"));
        kv.set("decode.beam_width", self.beam.beam_width);
        kv.set("decode.alpha", self.beam.alpha);
        kv.set("decode.max_tokens", self.beam.max_tokens);
        kv.set("decode.workers", self.decode_workers);
        kv.set("eval.bootstrap_replicates", self.eval.bootstrap_replicates);
        kv.set("eval.level", self.eval.level);
        kv.set("search.hidden_min", self.search.hidden_min);
        kv.set("search.hidden_max", self.search.hidden_max);
        kv.set("search.n_trials", self.search.n_trials);
        kv.set("search.dropout_max", self.search.dropout_max);
        kv.set("search.lr_factors", join(&self.search.lr_factors));
        kv
    }
}

fn prefix_err(section: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{section}: {m}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(pairs: &[(&str, &str)]) -> KeyValues {
        let mut kv = KeyValues::new();
        for (k, v) in pairs {
            kv.set(*k, v);
        }
        kv
    }

    #[test]
    fn defaults_resolve_and_roundtrip() {
        let c = RunConfig::from_kv(&KeyValues::new()).unwrap();
        assert_eq!(c.seed, 1);
        assert_eq!(c.train.seed, 1);
        let again = RunConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(again.to_kv(), c.to_kv());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in ["colour", "synth.colour", "train.momentum", "model.depth", "decode.temperature", "other.x"] {
            assert!(RunConfig::from_kv(&kv(&[(bad, "1")])).is_err(), "{bad}");
        }
    }

    #[test]
    fn seed_precedence() {
        let c = RunConfig::load(None, &KeyValues::new(), Some("7")).unwrap();
        assert_eq!((c.seed, c.synth.seed, c.train.seed), (7, 7, 7));
        let c = RunConfig::load(None, &kv(&[("seed", "3")]), Some("7")).unwrap();
        assert_eq!(c.seed, 3);
        let c = RunConfig::load(None, &kv(&[("train.seed", "5")]), None).unwrap();
        assert_eq!((c.seed, c.train.seed), (1, 5));
        assert!(RunConfig::load(None, &KeyValues::new(), Some("x")).is_err());
    }

    #[test]
    fn search_step_follows_head_count() {
        let c = RunConfig::from_kv(&kv(&[("model.n_heads", "8"), ("model.hidden_size", "64")])).unwrap();
        assert_eq!(c.search.hidden_step, 8);
    }
}
