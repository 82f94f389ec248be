//! Text standardization, backward line concatenation and byte pair encoding.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::records::{join_codes, Certificate, Icd10Code, SideVariables, MAX_CODES};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Appended to the last symbol of every word.
pub const END_OF_WORD: &str = "</w>";

/// Default bound on source length in tokens.
pub const DEFAULT_MAX_SRC_LEN: usize = 128;
/// Default source vocabulary size.
pub const DEFAULT_SRC_VOCAB: usize = 2033;
/// Default code vocabulary size.
pub const DEFAULT_TGT_VOCAB: usize = 500;

const LINE_SEPARATOR: &str = ", ";
const FORMAT_TAG: &str = "medseq-bpe";
const FORMAT_VERSION: u32 = 1;

/// Lowercases and collapses every run of whitespace to one space, trimming both ends.
pub fn standardize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// A (source text, target codes) example built from one certificate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingPair {
    pub id: String,
    pub source_text: String,
    pub target_codes: Vec<Icd10Code>,
    pub side: SideVariables,
}

impl TrainingPair {
    pub fn has_bang(&self) -> bool {
        self.source_text.contains('!')
    }
}

/// Joins lines 6 down to 1, so that codes a coder shifted onto the previous line
/// keep their position in the flattened sequence.
pub fn concat_backward(cert: &Certificate) -> TrainingPair {
    let joined = cert
        .lines()
        .iter()
        .rev()
        .flatten()
        .map(String::as_str)
        .collect::<Vec<_>>()
        .join(LINE_SEPARATOR);
    let target_codes: Vec<Icd10Code> = cert
        .gold_code_lines()
        .iter()
        .rev()
        .flat_map(|codes| codes.iter().cloned())
        .collect();
    debug_assert!(target_codes.len() <= MAX_CODES);
    TrainingPair {
        id: cert.id().to_string(),
        source_text: standardize(&joined),
        target_codes,
        side: cert.side(),
    }
}

/// Target side text for a code sequence.
pub fn codes_text(codes: &[Icd10Code]) -> String {
    join_codes(codes)
}

/// A learned BPE merge table and vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizerModel {
    merges: Vec<(String, String)>,
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    /// (left id, right id) -> (merge rank, merged id)
    ranks: HashMap<(u32, u32), (usize, u32)>,
    max_len: usize,
    stopped_early: bool,
}

fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let n = chars.len();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == n {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

struct PairTable {
    counts: HashMap<(u32, u32), i64>,
    locations: HashMap<(u32, u32), HashSet<usize>>,
}

impl PairTable {
    fn add_word(&mut self, idx: usize, symbols: &[u32], weight: i64) {
        for w in symbols.windows(2) {
            let pair = (w[0], w[1]);
            *self.counts.entry(pair).or_insert(0) += weight;
            if weight > 0 {
                self.locations.entry(pair).or_default().insert(idx);
            }
        }
    }
}

fn merge_symbols(symbols: &[u32], pair: (u32, u32), merged: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(merged);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    out
}

/// Learns merges from whitespace separated words until the vocabulary
/// reaches `target_vocab_size` or no adjacent pair occurs twice.
///
/// Ties between equally frequent pairs go to the lexicographically smallest
/// `(left, right)` pair.
pub fn bpe_train<S: AsRef<str>>(
    corpus: &[S],
    target_vocab_size: usize,
    max_len: usize,
) -> Result<TokenizerModel> {
    let mut word_counts: HashMap<&str, i64> = HashMap::new();
    for line in corpus {
        for w in line.as_ref().split_whitespace() {
            *word_counts.entry(w).or_insert(0) += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::validation("cannot train a tokenizer on an empty corpus"));
    }
    let mut words: Vec<(&str, i64)> = word_counts.into_iter().collect();
    words.sort_unstable();

    let alphabet: Vec<String> = words
        .iter()
        .flat_map(|(w, _)| word_symbols(w))
        .collect::<HashSet<_>>()
        .into_iter()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if target_vocab_size <= alphabet.len() + RESERVED.len() {
        return Err(Error::config(format!(
            "target vocabulary {target_vocab_size} does not exceed alphabet size {} plus {} reserved tokens",
            alphabet.len(),
            RESERVED.len()
        )));
    }

    let mut vocab: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    vocab.extend(alphabet);
    let mut index: HashMap<String, u32> = vocab
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i as u32))
        .collect();

    let mut segmented: Vec<Vec<u32>> = words
        .iter()
        .map(|(w, _)| word_symbols(w).iter().map(|s| index[s]).collect())
        .collect();
    let mut table = PairTable {
        counts: HashMap::new(),
        locations: HashMap::new(),
    };
    for (i, syms) in segmented.iter().enumerate() {
        table.add_word(i, syms, words[i].1);
    }

    let mut merges = Vec::new();
    let mut stopped_early = false;
    while vocab.len() < target_vocab_size {
        let best = table
            .counts
            .iter()
            .filter(|(_, &c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&vocab[pa.0 as usize], &vocab[pa.1 as usize]);
                    let kb = (&vocab[pb.0 as usize], &vocab[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            })
            .map(|(p, _)| *p);
        let Some(pair) = best else {
            stopped_early = true;
            break;
        };
        let merged_str = format!("{}{}", vocab[pair.0 as usize], vocab[pair.1 as usize]);
        let merged = match index.get(&merged_str) {
            Some(&id) => id,
            None => {
                let id = vocab.len() as u32;
                vocab.push(merged_str.clone());
                index.insert(merged_str, id);
                id
            }
        };
        merges.push((vocab[pair.0 as usize].clone(), vocab[pair.1 as usize].clone()));
        let mut affected: Vec<usize> = table
            .locations
            .remove(&pair)
            .map(|s| s.into_iter().collect())
            .unwrap_or_default();
        affected.sort_unstable();
        for wi in affected {
            let weight = words[wi].1;
            let old = std::mem::take(&mut segmented[wi]);
            let new = merge_symbols(&old, pair, merged);
            if new.len() != old.len() {
                table.add_word(wi, &old, -weight);
                table.add_word(wi, &new, weight);
            }
            segmented[wi] = new;
        }
        table.counts.retain(|_, c| *c > 0);
    }
    if stopped_early {
        log::warn!(
            "tokenizer stopped at {} entries, short of the requested {target_vocab_size}",
            vocab.len()
        );
    }
    Ok(TokenizerModel::from_parts(merges, vocab, max_len, stopped_early))
}

impl TokenizerModel {
    fn from_parts(
        merges: Vec<(String, String)>,
        vocab: Vec<String>,
        max_len: usize,
        stopped_early: bool,
    ) -> Self {
        let index: HashMap<String, u32> = vocab
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        let mut ranks: HashMap<(u32, u32), (usize, u32)> = HashMap::new();
        for (i, (l, r)) in merges.iter().enumerate() {
            let ids = (
                index.get(l.as_str()).copied(),
                index.get(r.as_str()).copied(),
                index.get(format!("{l}{r}").as_str()).copied(),
            );
            if let (Some(a), Some(b), Some(m)) = ids {
                ranks.entry((a, b)).or_insert((i, m));
            }
        }
        TokenizerModel {
            merges,
            vocab,
            index,
            ranks,
            max_len,
            stopped_early,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// True when training ran out of repeated pairs before reaching the requested size.
    pub fn stopped_early(&self) -> bool {
        self.stopped_early
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let mut symbols: Vec<u32> = word_symbols(word)
            .iter()
            .map(|s| self.id_of(s).unwrap_or(UNK))
            .collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).copied())
                .min();
            let Some((rank, merged)) = best else { break };
            let (l, r) = &self.merges[rank];
            let pair = (self.index[l], self.index[r]);
            symbols = merge_symbols(&symbols, pair, merged);
        }
        out.extend(symbols);
    }

    /// Token ids for `text`, without length checking. Characters outside the
    /// training alphabet become [`UNK`].
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for w in text.split_whitespace() {
            self.encode_word(w, &mut out);
        }
        out
    }

    /// Like [`encode`](Self::encode), but rejects sequences longer than the
    /// model's maximum length.
    pub fn encode_checked(&self, text: &str, record: &str) -> Result<Vec<u32>> {
        let ids = self.encode(text);
        if ids.len() > self.max_len {
            return Err(Error::validation(format!(
                "record {record}: {} tokens exceed the maximum length {}",
                ids.len(),
                self.max_len
            )));
        }
        Ok(ids)
    }

    /// Text for a token sequence. Reserved control tokens are skipped.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut s = String::new();
        for &id in ids {
            let tok = self
                .token(id)
                .ok_or_else(|| Error::validation(format!("token id {id} outside vocabulary")))?;
            match id {
                PAD | BOS | EOS => {}
                UNK => s.push_str(RESERVED[UNK as usize]),
                _ => match tok.strip_suffix(END_OF_WORD) {
                    Some(body) => {
                        s.push_str(body);
                        s.push(' ');
                    }
                    None => s.push_str(tok),
                },
            }
        }
        if s.ends_with(' ') {
            s.pop();
        }
        Ok(s)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{FORMAT_TAG} {FORMAT_VERSION}");
        let _ = writeln!(s, "vocab_size {}", self.vocab.len());
        let _ = writeln!(s, "max_len {}", self.max_len);
        let _ = writeln!(s, "stopped_early {}", u8::from(self.stopped_early));
        let _ = writeln!(s, "reserved {}", RESERVED.join(" "));
        let _ = writeln!(s, "merges {}", self.merges.len());
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        let _ = writeln!(s, "vocab {}", self.vocab.len());
        for (i, tok) in self.vocab.iter().enumerate() {
            let _ = writeln!(s, "{i}\t{tok}");
        }
        s
    }

    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |field: &str| {
            lines
                .next()
                .ok_or_else(|| Error::parse(source, 0, field, "unexpected end of file"))
        };
        let keyed = |(n, line): (usize, &str), key: &str| -> Result<String> {
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| Error::parse(source, n, key, format!("expected `{key} ...`")))
        };
        let number = |(n, line): (usize, &str), key: &str| -> Result<usize> {
            keyed((n, line), key)?
                .parse()
                .map_err(|_| Error::parse(source, n, key, "not a number"))
        };
        let head = next("header")?;
        if keyed(head, FORMAT_TAG)? != FORMAT_VERSION.to_string() {
            return Err(Error::parse(source, head.0, "version", "unsupported version"));
        }
        let vocab_size = number(next("vocab_size")?, "vocab_size")?;
        let max_len = number(next("max_len")?, "max_len")?;
        let stopped_early = number(next("stopped_early")?, "stopped_early")? != 0;
        let reserved = next("reserved")?;
        if keyed(reserved, "reserved")? != RESERVED.join(" ") {
            return Err(Error::parse(source, reserved.0, "reserved", "unexpected reserved tokens"));
        }
        let n_merges = number(next("merges")?, "merges")?;
        let mut merges = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let (n, line) = next("merge")?;
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| Error::parse(source, n, "merge", "expected two symbols"))?;
            merges.push((l.to_string(), r.to_string()));
        }
        let n_vocab = number(next("vocab")?, "vocab")?;
        if n_vocab != vocab_size {
            return Err(Error::parse(source, 0, "vocab", "vocabulary size disagrees with header"));
        }
        let mut vocab = Vec::with_capacity(n_vocab);
        for i in 0..n_vocab {
            let (n, line) = next("vocab entry")?;
            let (id, tok) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(source, n, "vocab entry", "expected id<TAB>token"))?;
            if id.parse::<usize>().ok() != Some(i) {
                return Err(Error::parse(source, n, "vocab entry", "ids must be dense and ordered"));
            }
            vocab.push(tok.to_string());
        }
        if vocab[..RESERVED.len()] != RESERVED {
            return Err(Error::parse(source, 0, "vocab", "reserved ids must come first"));
        }
        Ok(TokenizerModel::from_parts(merges, vocab, max_len, stopped_early))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_text(&text, &path.display().to_string())
    }

    /// Hex SHA-256 of the serialized model.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

/// A training pair mapped to token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub id: String,
    /// Source tokens, no BOS or EOS.
    pub src: Vec<u32>,
    /// Target tokens, no BOS or EOS.
    pub tgt: Vec<u32>,
    pub side: SideVariables,
}

pub fn encode_pair(
    pair: &TrainingPair,
    src_tok: &TokenizerModel,
    tgt_tok: &TokenizerModel,
) -> Result<EncodedPair> {
    let src = src_tok.encode_checked(&pair.source_text, &pair.id)?;
    if src.is_empty() {
        return Err(Error::validation(format!("record {}: empty source", pair.id)));
    }
    let tgt = tgt_tok.encode_checked(&codes_text(&pair.target_codes), &pair.id)?;
    Ok(EncodedPair {
        id: pair.id.clone(),
        src,
        tgt,
        side: pair.side,
    })
}

pub fn encode_pairs(
    pairs: &[TrainingPair],
    src_tok: &TokenizerModel,
    tgt_tok: &TokenizerModel,
) -> Result<Vec<EncodedPair>> {
    pairs.iter().map(|p| encode_pair(p, src_tok, tgt_tok)).collect()
}

/// Parses decoded target text back into codes, dropping fragments that are
/// not well-formed codes.
pub fn codes_from_text(text: &str) -> Vec<Icd10Code> {
    text.split_whitespace()
        .filter_map(|w| Icd10Code::parse(w).ok())
        .collect()
}
