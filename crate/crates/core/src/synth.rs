//! Deterministic synthetic death certificates.
//!
//! The generator reproduces the pathologies the pipeline has to cope with:
//! phrases that map to one code each, codes whose correct value depends on a
//! side variable or on the neighbouring phrase, codes shifted onto the
//! previous line by a coder, and unreadable words replaced by `!` on paper
//! certificates while the gold code is kept.
//!
//! Every record draws from its own seeded streams, so a corpus is a pure
//! function of `(config, lexicon)` and the noise switches do not disturb the
//! draws of the content they do not touch.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::records::{
    age_bucket, chapter_of, Certificate, Icd10Code, SideVariables, YearRange, MAX_CODES,
    NUM_LINES, YEAR_STATES,
};

/// Which side variable a context rule looks at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SideVar {
    Age,
    Year,
    Gender,
    Origin,
}

impl SideVar {
    fn value(self, side: &SideVariables) -> u8 {
        match self {
            SideVar::Age => side.age_bucket,
            SideVar::Year => side.year,
            SideVar::Gender => side.gender,
            SideVar::Origin => side.origin,
        }
    }
}

/// Overrides an entry's code depending on context.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ContextRule {
    /// `code` applies when the side variable index is at least `threshold`.
    SideAtLeast {
        variable: SideVar,
        threshold: u8,
        code: Icd10Code,
    },
    /// `code` applies when the side variable index is below `threshold`.
    SideBelow {
        variable: SideVar,
        threshold: u8,
        code: Icd10Code,
    },
    /// `code` applies when the previous phrase on the same line was coded `previous`.
    AfterCode {
        previous: Icd10Code,
        code: Icd10Code,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LexiconEntry {
    pub phrase_variants: Vec<String>,
    pub code: Icd10Code,
    pub context_rule: Option<ContextRule>,
    /// Relative sampling weight.
    pub weight: f64,
    /// When set, this entry is often followed on the same line by the entry at this index.
    pub companion: Option<usize>,
}

impl LexiconEntry {
    /// The gold code for this entry given its context.
    pub fn resolve(&self, side: &SideVariables, previous: Option<&Icd10Code>) -> Icd10Code {
        match &self.context_rule {
            Some(ContextRule::SideAtLeast {
                variable,
                threshold,
                code,
            }) if variable.value(side) >= *threshold => code.clone(),
            Some(ContextRule::SideBelow {
                variable,
                threshold,
                code,
            }) if variable.value(side) < *threshold => code.clone(),
            Some(ContextRule::AfterCode { previous: p, code }) if previous == Some(p) => {
                code.clone()
            }
            _ => self.code.clone(),
        }
    }

    /// Every code this entry can produce.
    pub fn codes(&self) -> Vec<Icd10Code> {
        let mut out = vec![self.code.clone()];
        match &self.context_rule {
            Some(ContextRule::SideAtLeast { code, .. })
            | Some(ContextRule::SideBelow { code, .. })
            | Some(ContextRule::AfterCode { code, .. }) => out.push(code.clone()),
            None => {}
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    pub entries: Vec<LexiconEntry>,
    pub noise_vocab: Vec<String>,
}

impl Lexicon {
    pub fn distinct_codes(&self) -> HashSet<Icd10Code> {
        self.entries.iter().flat_map(LexiconEntry::codes).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.iter().any(|e| e.phrase_variants.is_empty()) {
            return Err(Error::validation("lexicon entry without phrase variants"));
        }
        let codes = self.distinct_codes();
        let chapters: HashSet<u8> = codes.iter().map(|c| chapter_of(c).index).collect();
        if codes.len() < 200 || chapters.len() < 10 {
            return Err(Error::validation(format!(
                "lexicon covers {} codes in {} chapters, need at least 200 in 10",
                codes.len(),
                chapters.len()
            )));
        }
        Ok(())
    }

    pub fn index_of_code(&self, code: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.code.as_str() == code)
    }
}

// (variants, code, weight)
const CURATED: &[(&str, &str, f64)] = &[
    ("hta|hypertension arterielle|hypertension", "I10", 30.0),
    ("insuffisance cardiaque|defaillance cardiaque", "I509", 25.0),
    ("insuffisance cardiaque congestive", "I500", 6.0),
    ("anevrisme aorte|anevrisme aortique", "I719", 4.0),
    ("anevrisme aorte abdominale", "I714", 3.0),
    ("asystolie|arret cardiaque", "I469", 10.0),
    ("arret cardio respiratoire|acr", "R092", 14.0),
    ("acfa|fibrillation auriculaire", "I48", 12.0),
    ("vertiges|syndrome vertigineux", "R42", 3.0),
    ("avc|accident vasculaire cerebral", "I64", 14.0),
    ("hemiplegie|hemiparesie gauche", "G819", 4.0),
    ("cardiopathie ischemique", "I259", 12.0),
    ("triple pontage|pontage coronarien", "Z951", 5.0),
    ("cancer de la vessie|neoplasie vesicale", "C679", 4.0),
    ("cancer du poumon|carcinome bronchique", "C349", 12.0),
    ("cancer du sein|neoplasie mammaire", "C509", 6.0),
    ("cancer de la prostate", "C61", 6.0),
    ("cancer du colon|adenocarcinome colique", "C189", 6.0),
    ("metastases hepatiques", "C787", 5.0),
    ("demence|demence senile", "F03", 10.0),
    ("depression|syndrome depressif", "F329", 4.0),
    ("maladie d alzheimer|alzheimer", "G309", 8.0),
    ("maladie de parkinson|parkinson", "G20", 5.0),
    ("pneumopathie|pneumonie", "J189", 14.0),
    ("bpco|bronchopneumopathie chronique obstructive", "J449", 8.0),
    ("insuffisance respiratoire", "J969", 10.0),
    ("grippe saisonniere|syndrome grippal", "J111", 8.0),
    ("detresse respiratoire", "J80", 5.0),
    ("diabete|diabete de type 2", "E119", 10.0),
    ("denutrition|cachexie", "E46", 6.0),
    ("deshydratation", "E86", 5.0),
    ("insuffisance renale chronique|irc", "N189", 8.0),
    ("insuffisance renale aigue", "N179", 5.0),
    ("infection urinaire", "N390", 4.0),
    ("septicemie|sepsis|choc septique", "A419", 9.0),
    ("cirrhose hepatique|cirrhose", "K746", 5.0),
    ("hemorragie digestive", "K922", 4.0),
    ("occlusion intestinale", "K566", 3.0),
    ("chute|chute de sa hauteur", "W19", 6.0),
    ("fracture du col du femur", "S720", 4.0),
    ("fracture humerus", "S423", 2.0),
    ("plaie du cuir chevelu", "S010", 2.0),
    ("escarre|escarres", "L89", 3.0),
    ("arthrose", "M199", 2.0),
    ("polyarthrite rhumatoide", "M069", 1.5),
    ("anemie", "D649", 4.0),
    ("mort subite", "R96", 2.0),
    ("deces inexplique|cause inconnue", "R99", 3.0),
    ("vieillesse|senilite", "R54", 6.0),
    ("prematurite", "P073", 0.8),
    ("trisomie 21", "Q909", 0.5),
    ("cataracte", "H269", 0.5),
    ("surdite", "H919", 0.3),
    ("eclampsie", "O159", 0.2),
    ("bacterie multiresistante", "U829", 0.3),
    ("tumeur cerebrale", "D430", 2.0),
    ("lymphome", "C859", 3.0),
    ("leucemie", "C959", 3.0),
    ("embolie pulmonaire", "I269", 5.0),
    ("infarctus du myocarde|idm", "I219", 9.0),
    ("pendaison|suicide par pendaison", "X70", 1.5),
    ("intoxication medicamenteuse", "T509", 1.0),
    ("noyade", "W74", 0.7),
    ("accident de la voie publique|avp", "V892", 1.0),
    ("obesite", "E669", 2.0),
    ("alcoolisme|ethylisme chronique", "F102", 3.0),
    ("tabagisme", "F172", 2.0),
    ("epilepsie", "G409", 2.0),
    ("insuffisance hepatique", "K729", 2.0),
    ("psoriasis", "L409", 0.5),
    ("pemphigoide bulleuse", "L120", 0.5),
    ("soins palliatifs", "Z515", 3.0),
    ("porteur de pacemaker|pacemaker", "Z950", 2.0),
    ("glaucome", "H409", 0.4),
    ("otite", "H669", 0.2),
    ("tuberculose pulmonaire", "A162", 0.8),
    ("infection vih|vih", "B24", 0.8),
    ("hepatite c", "B182", 1.0),
];

const NOISE_WORDS: &[&str] = &[
    "probable", "possible", "ancien", "ancienne", "evolue", "massif", "brutal", "sur", "puis",
    "dans", "contexte", "suite", "majeur", "sevère",
];

const SYLLABLES: &[&str] = &[
    "ra", "to", "mi", "ne", "su", "lo", "ca", "di", "pe", "tri", "ver", "gal", "mon", "sel", "bu",
    "fa", "quo", "zen", "dor", "lix", "ba", "ko", "vi", "stra", "pho", "gli", "nu", "ter",
];
const SUFFIXES: &[&str] = &["ite", "ose", "ique", "ale", "aire", "ome", "ie", "isme", "ine"];

// (chapter index, heads, relative weight)
const GENERATED_CHAPTERS: &[(u8, &[&str], f64)] = &[
    (1, &["infection a", "fievre", "maladie"], 2.5),
    (2, &["tumeur", "carcinome", "sarcome"], 16.0),
    (3, &["cytopenie", "deficit"], 0.8),
    (4, &["trouble metabolique", "carence"], 4.8),
    (5, &["trouble", "psychose"], 3.6),
    (6, &["neuropathie", "encephalopathie"], 3.9),
    (7, &["atteinte oculaire"], 0.3),
    (8, &["atteinte auditive"], 0.2),
    (9, &["arteriopathie", "cardiopathie", "valvulopathie"], 22.0),
    (10, &["broncho", "pneumo"], 8.8),
    (11, &["colopathie", "gastro"], 3.5),
    (12, &["dermatose"], 0.5),
    (13, &["myopathie", "osteo"], 0.6),
    (14, &["nephro", "uropathie"], 2.7),
    (16, &["souffrance neonatale"], 0.2),
    (17, &["malformation"], 0.2),
    (18, &["syndrome", "signe"], 20.0),
    (19, &["traumatisme", "brulure"], 2.1),
    (20, &["accident", "exposition"], 2.6),
    (21, &["antecedent de", "suivi"], 3.1),
];

const GENERATED_ENTRIES: usize = 230;

fn chapter_letters(chapter: u8) -> &'static [(char, u8, u8)] {
    // (letter, first category number, last category number)
    match chapter {
        1 => &[('A', 0, 99), ('B', 0, 99)],
        2 => &[('C', 0, 97), ('D', 0, 48)],
        3 => &[('D', 50, 89)],
        4 => &[('E', 0, 90)],
        5 => &[('F', 0, 99)],
        6 => &[('G', 0, 99)],
        7 => &[('H', 0, 59)],
        8 => &[('H', 60, 95)],
        9 => &[('I', 0, 99)],
        10 => &[('J', 0, 99)],
        11 => &[('K', 0, 93)],
        12 => &[('L', 0, 99)],
        13 => &[('M', 0, 99)],
        14 => &[('N', 0, 99)],
        16 => &[('P', 0, 96)],
        17 => &[('Q', 0, 99)],
        18 => &[('R', 0, 99)],
        19 => &[('S', 0, 99), ('T', 0, 98)],
        20 => &[('V', 1, 99), ('W', 0, 99), ('X', 0, 99), ('Y', 0, 98)],
        21 => &[('Z', 0, 99)],
        _ => &[],
    }
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(2..=3);
    let mut w: String = (0..n).map(|_| *SYLLABLES.choose(rng).unwrap()).collect();
    w.push_str(SUFFIXES.choose(rng).unwrap());
    w
}

/// Builds the default lexicon: a fixed list of common causes plus
/// procedurally generated entries that depend on `seed`.
pub fn build_default_lexicon(seed: u64) -> Lexicon {
    let code = |s: &str| Icd10Code::parse(s).expect("static code");
    let mut entries: Vec<LexiconEntry> = CURATED
        .iter()
        .map(|(variants, c, w)| LexiconEntry {
            phrase_variants: variants.split('|').map(str::to_string).collect(),
            code: code(c),
            context_rule: None,
            weight: *w,
            companion: None,
        })
        .collect();

    let idx = |entries: &[LexiconEntry], c: &str| {
        entries.iter().position(|e| e.code.as_str() == c).expect("curated code")
    };
    // Coding depends on the year of death.
    let flu = idx(&entries, "J111");
    entries[flu].context_rule = Some(ContextRule::SideAtLeast {
        variable: SideVar::Year,
        threshold: 3,
        code: code("J101"),
    });
    // Neonatal respiratory distress.
    let distress = idx(&entries, "J80");
    entries[distress].context_rule = Some(ContextRule::SideBelow {
        variable: SideVar::Age,
        threshold: 1,
        code: code("P220"),
    });
    // A bypass following ischaemic heart disease is coded as the disease.
    let bypass = idx(&entries, "Z951");
    entries[bypass].context_rule = Some(ContextRule::AfterCode {
        previous: code("I259"),
        code: code("I251"),
    });
    let ihd = idx(&entries, "I259");
    entries[ihd].companion = Some(bypass);

    let mut used_codes: HashSet<Icd10Code> = entries.iter().flat_map(LexiconEntry::codes).collect();
    let mut used_phrases: HashSet<String> = entries
        .iter()
        .flat_map(|e| e.phrase_variants.iter().cloned())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x1e81c0, 0));
    let total_weight: f64 = GENERATED_CHAPTERS.iter().map(|c| c.2).sum();
    for rank in 0..GENERATED_ENTRIES {
        // Round-robin the chapters so every one is represented, then weight by prevalence.
        let (chapter, heads, ch_weight) = if rank < GENERATED_CHAPTERS.len() {
            GENERATED_CHAPTERS[rank]
        } else {
            let mut u = rng.gen::<f64>() * total_weight;
            let mut pick = GENERATED_CHAPTERS[GENERATED_CHAPTERS.len() - 1];
            for c in GENERATED_CHAPTERS {
                if u < c.2 {
                    pick = *c;
                    break;
                }
                u -= c.2;
            }
            pick
        };
        let letters = chapter_letters(chapter);
        let new_code = loop {
            let (letter, lo, hi) = *letters.choose(&mut rng).unwrap();
            let cat = rng.gen_range(lo..=hi);
            let raw = if rng.gen_bool(0.6) {
                format!("{letter}{cat:02}{}", rng.gen_range(0..10))
            } else {
                format!("{letter}{cat:02}")
            };
            let c = code(&raw);
            if used_codes.insert(c.clone()) {
                break c;
            }
        };
        let head = *heads.choose(&mut rng).unwrap();
        let mut variants = Vec::new();
        let n_variants = rng.gen_range(1..=3);
        while variants.len() < n_variants {
            let modifier = pseudo_word(&mut rng);
            let phrase = match variants.len() {
                0 => format!("{head} {modifier}"),
                1 => modifier,
                _ => format!("{modifier} {}", pseudo_word(&mut rng)),
            };
            if used_phrases.insert(phrase.clone()) {
                variants.push(phrase);
            }
        }
        let zipf = 1.0 / (1.0 + rank as f64 / 10.0);
        entries.push(LexiconEntry {
            phrase_variants: variants,
            code: new_code,
            context_rule: None,
            weight: 1.6 * zipf * ch_weight / total_weight * GENERATED_CHAPTERS.len() as f64,
            companion: None,
        });
    }
    Lexicon {
        entries,
        noise_vocab: NOISE_WORDS.iter().map(|s| s.to_string()).collect(),
    }
}

/// Probabilities and sizes for [`generate_corpus`].
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub n_records: usize,
    pub seed: u64,
    pub p_paper_origin: f64,
    pub p_bang_given_paper: f64,
    pub p_misalign: f64,
    pub max_codes_per_cert: usize,
    /// Probability of 1..=6 filled lines.
    pub line_count_distribution: [f64; NUM_LINES],
    /// Probability that a phrase is decorated with a filler word.
    pub p_filler: f64,
    /// Per-word probability of a typo on electronic certificates.
    pub p_typo_electronic: f64,
    pub years: YearRange,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_records: 1000,
            seed: 1,
            p_paper_origin: 0.90,
            p_bang_given_paper: 0.10,
            p_misalign: 0.02,
            max_codes_per_cert: MAX_CODES,
            line_count_distribution: [0.22, 0.36, 0.24, 0.10, 0.05, 0.03],
            p_filler: 0.15,
            p_typo_electronic: 0.01,
            years: YearRange::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_paper_origin", self.p_paper_origin),
            ("p_bang_given_paper", self.p_bang_given_paper),
            ("p_misalign", self.p_misalign),
            ("p_filler", self.p_filler),
            ("p_typo_electronic", self.p_typo_electronic),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} = {p} is not a probability")));
            }
        }
        if self.max_codes_per_cert != MAX_CODES {
            return Err(Error::config(format!(
                "max_codes_per_cert must be {MAX_CODES}, got {}",
                self.max_codes_per_cert
            )));
        }
        let sum: f64 = self.line_count_distribution.iter().sum();
        if self.line_count_distribution.iter().any(|p| !(0.0..=1.0).contains(p))
            || (sum - 1.0).abs() > 1e-9
        {
            return Err(Error::config("line_count_distribution must be 6 probabilities summing to 1"));
        }
        Ok(())
    }
}

/// A generated certificate together with the codes of its phrases before
/// any coder misalignment.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedRecord {
    pub certificate: Certificate,
    pub phrase_codes: [Vec<Icd10Code>; NUM_LINES],
    pub misaligned: bool,
}

/// SplitMix64 finalizer over (seed, record, stream).
pub fn derive_seed(seed: u64, index: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_CONTENT: u64 = 1;
const STREAM_MISALIGN: u64 = 2;
const STREAM_BANG: u64 = 3;

fn pick_weighted(rng: &mut ChaCha8Rng, cumulative: &[f64]) -> usize {
    let total = *cumulative.last().expect("nonempty");
    let u = rng.gen::<f64>() * total;
    cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1)
}

struct Word {
    text: String,
    // Whether this word belongs to a coded phrase.
    coded: bool,
}

fn sample_age_days(rng: &mut ChaCha8Rng) -> u64 {
    let u: f64 = rng.gen();
    let years = if u < 0.004 {
        return rng.gen_range(0..28);
    } else if u < 0.008 {
        return rng.gen_range(28..365);
    } else if u < 0.02 {
        rng.gen_range(1..5)
    } else {
        // Approximately normal around 79 (Irwin-Hall with 6 uniforms).
        let s: f64 = (0..6).map(|_| rng.gen::<f64>()).sum::<f64>() - 3.0;
        (79.0 + s * 15.0).clamp(5.0, 112.0) as u64
    };
    years * 365 + rng.gen_range(0..365)
}

fn line_slots(rng: &mut ChaCha8Rng, n_lines: usize) -> Vec<usize> {
    // Part two (lines 5-6) gets a line about a third of the time.
    let part_two = if n_lines > 1 && rng.gen_bool(0.35) {
        if n_lines >= 3 && rng.gen_bool(0.3) {
            2
        } else {
            1
        }
    } else {
        0
    };
    let part_two = part_two.max(n_lines.saturating_sub(4));
    let part_one = n_lines - part_two;
    let mut slots: Vec<usize> = (0..part_one).collect();
    match part_two {
        2 => slots.extend([4, 5]),
        1 => slots.push(if rng.gen_bool(0.6) { 5 } else { 4 }),
        _ => {}
    }
    slots
}

fn typo(rng: &mut ChaCha8Rng, word: &str) -> String {
    let mut chars: Vec<char> = word.chars().collect();
    if chars.len() >= 4 {
        let i = rng.gen_range(1..chars.len() - 1);
        chars.swap(i, i + 1);
    }
    chars.into_iter().collect()
}

fn generate_record(
    idx: usize,
    config: &GeneratorConfig,
    lexicon: &Lexicon,
    cumulative: &[f64],
) -> GeneratedRecord {
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(config.seed, idx as u64, STREAM_CONTENT));

    let raw_age_days = sample_age_days(&mut rng);
    let side = SideVariables {
        gender: rng.gen_range(0..2),
        year: rng.gen_range(0..YEAR_STATES as u8),
        age_bucket: age_bucket(raw_age_days),
        origin: if rng.gen_bool(config.p_paper_origin) { 0 } else { 1 },
    };
    let paper = side.origin == 0;

    let mut line_cumulative = [0.0; NUM_LINES];
    let mut acc = 0.0;
    for (slot, p) in line_cumulative.iter_mut().zip(config.line_count_distribution) {
        acc += p;
        *slot = acc;
    }
    let n_lines = 1 + pick_weighted(&mut rng, &line_cumulative);
    let slots = line_slots(&mut rng, n_lines);

    let mut words: [Vec<Word>; NUM_LINES] = Default::default();
    let mut phrase_codes: [Vec<Icd10Code>; NUM_LINES] = Default::default();
    let mut total_codes = 0;
    for &slot in &slots {
        let n_phrases = 1 + pick_weighted(&mut rng, &[0.55, 0.85, 0.95, 1.0]);
        let mut previous: Option<Icd10Code> = None;
        let mut queued: Option<usize> = None;
        let mut placed = 0;
        while placed < n_phrases || queued.is_some() {
            if total_codes >= config.max_codes_per_cert {
                break;
            }
            let entry_idx = queued.take().unwrap_or_else(|| pick_weighted(&mut rng, cumulative));
            let entry = &lexicon.entries[entry_idx];
            if let Some(c) = entry.companion {
                if rng.gen_bool(0.5) {
                    queued = Some(c);
                }
            }
            let code = entry.resolve(&side, previous.as_ref());
            let phrase = entry.phrase_variants.choose(&mut rng).unwrap();
            if placed > 0 {
                let joiner = [" ", " et ", ", ", " avec "].choose(&mut rng).unwrap().trim();
                if !joiner.is_empty() && joiner != "," {
                    words[slot].push(Word {
                        text: joiner.to_string(),
                        coded: false,
                    });
                } else if joiner == "," {
                    if let Some(last) = words[slot].last_mut() {
                        last.text.push(',');
                    }
                }
            }
            let filler = rng.gen_bool(config.p_filler).then(|| {
                (
                    lexicon.noise_vocab.choose(&mut rng).unwrap().clone(),
                    rng.gen_bool(0.5),
                )
            });
            if let Some((f, true)) = &filler {
                words[slot].push(Word {
                    text: f.clone(),
                    coded: false,
                });
            }
            for w in phrase.split(' ') {
                let text = if !paper && rng.gen_bool(config.p_typo_electronic) {
                    typo(&mut rng, w)
                } else {
                    w.to_string()
                };
                words[slot].push(Word { text, coded: true });
            }
            if let Some((f, false)) = &filler {
                words[slot].push(Word {
                    text: f.clone(),
                    coded: false,
                });
            }
            phrase_codes[slot].push(code.clone());
            previous = Some(code);
            total_codes += 1;
            placed += 1;
        }
    }

    // Paper certificates: one unreadable word, code kept by the human coder.
    if paper {
        let mut bang_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.seed, idx as u64, STREAM_BANG));
        if bang_rng.gen_bool(config.p_bang_given_paper) {
            let coded: Vec<(usize, usize)> = words
                .iter()
                .enumerate()
                .flat_map(|(l, ws)| {
                    ws.iter()
                        .enumerate()
                        .filter(|(_, w)| w.coded)
                        .map(move |(i, _)| (l, i))
                })
                .collect();
            if let Some(&(l, i)) = coded.choose(&mut bang_rng) {
                let w = &mut words[l][i];
                w.text = if w.text.ends_with(',') { "!,".into() } else { "!".into() };
            }
        }
    }

    let mut lines: [Option<String>; NUM_LINES] = Default::default();
    for (slot, ws) in words.iter().enumerate() {
        if ws.is_empty() {
            continue;
        }
        let mut text = ws.iter().map(|w| w.text.as_str()).collect::<Vec<_>>().join(" ");
        if paper {
            text = text.to_uppercase();
        } else if rng.gen_bool(0.3) {
            text = text
                .split(' ')
                .map(|w| {
                    let mut c = w.chars();
                    c.next()
                        .map(|f| f.to_uppercase().chain(c).collect())
                        .unwrap_or_default()
                })
                .collect::<Vec<String>>()
                .join(" ");
        }
        if rng.gen_bool(0.1) {
            text = text.replacen(' ', "  ", 1);
        }
        lines[slot] = Some(text);
    }

    let mut gold = phrase_codes.clone();
    let mut misaligned = false;
    let mut mis_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(config.seed, idx as u64, STREAM_MISALIGN));
    if mis_rng.gen_bool(config.p_misalign) {
        // Move the last code of a line to the front of the previous filled line.
        let present: Vec<usize> = (0..NUM_LINES).filter(|&i| lines[i].is_some()).collect();
        let eligible: Vec<(usize, usize)> = present
            .windows(2)
            .filter(|w| !gold[w[1]].is_empty())
            .map(|w| (w[0], w[1]))
            .collect();
        if let Some(&(to, from)) = eligible.choose(&mut mis_rng) {
            let moved = gold[from].pop().expect("nonempty");
            gold[to].insert(0, moved);
            misaligned = true;
        }
    }

    let certificate = Certificate::new(
        format!("c{idx:07}"),
        lines,
        side,
        gold,
        raw_age_days,
    )
    .expect("generator produces valid certificates");
    GeneratedRecord {
        certificate,
        phrase_codes,
        misaligned,
    }
}

/// Generates certificates with their phrase-level annotation.
pub fn generate_annotated(config: &GeneratorConfig, lexicon: &Lexicon) -> Result<Vec<GeneratedRecord>> {
    config.validate()?;
    if lexicon.entries.is_empty() {
        return Err(Error::validation("empty lexicon"));
    }
    let mut cumulative = Vec::with_capacity(lexicon.entries.len());
    let mut acc = 0.0;
    for e in &lexicon.entries {
        acc += e.weight;
        cumulative.push(acc);
    }
    Ok((0..config.n_records)
        .map(|i| generate_record(i, config, lexicon, &cumulative))
        .collect())
}

pub fn generate_corpus(config: &GeneratorConfig, lexicon: &Lexicon) -> Result<Vec<Certificate>> {
    Ok(generate_annotated(config, lexicon)?
        .into_iter()
        .map(|r| r.certificate)
        .collect())
}

/// Sizes of (train, val, test) for a stratified split.
pub fn split_sizes(
    total: usize,
    n_years: usize,
    per_year_val: usize,
    per_year_test: usize,
) -> (usize, usize, usize) {
    let val = n_years * per_year_val;
    let test = n_years * per_year_test;
    (total - val - test, val, test)
}

/// Draws `per_year_val` and `per_year_test` records from every year without
/// replacement; everything else is training data. Each part keeps input order.
pub fn split_corpus(
    certs: &[Certificate],
    per_year_val: usize,
    per_year_test: usize,
    seed: u64,
) -> Result<(Vec<Certificate>, Vec<Certificate>, Vec<Certificate>)> {
    let mut by_year: BTreeMap<u8, Vec<usize>> = (0..YEAR_STATES as u8).map(|y| (y, Vec::new())).collect();
    for (i, c) in certs.iter().enumerate() {
        by_year.entry(c.side().year).or_default().push(i);
    }
    // 0 = train, 1 = val, 2 = test
    let mut assignment = vec![0u8; certs.len()];
    for (year, mut idx) in by_year {
        let need = per_year_val + per_year_test;
        if idx.len() < need {
            return Err(Error::validation(format!(
                "year {} has {} records, fewer than the {need} needed for validation and test",
                YearRange::default().year_of(year),
                idx.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, year as u64, 0x5b117));
        idx.shuffle(&mut rng);
        for &i in &idx[..per_year_val] {
            assignment[i] = 1;
        }
        for &i in &idx[per_year_val..need] {
            assignment[i] = 2;
        }
    }
    let mut parts = (Vec::new(), Vec::new(), Vec::new());
    for (c, a) in certs.iter().zip(assignment) {
        match a {
            0 => parts.0.push(c.clone()),
            1 => parts.1.push(c.clone()),
            _ => parts.2.push(c.clone()),
        }
    }
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textprep::concat_backward;

    fn lexicon() -> Lexicon {
        build_default_lexicon(7)
    }

    #[test]
    fn lexicon_is_deterministic_and_valid() {
        let a = build_default_lexicon(7);
        assert_eq!(a, build_default_lexicon(7));
        assert_ne!(a, build_default_lexicon(8));
        a.validate().unwrap();
        let chapters: HashSet<u8> = a.distinct_codes().iter().map(|c| chapter_of(c).index).collect();
        assert!(chapters.len() >= 10);
        assert!(a.entries.iter().all(|e| !e.phrase_variants.is_empty()));
    }

    #[test]
    fn noise_words_never_occur_in_phrases() {
        let lex = lexicon();
        let phrase_words: HashSet<&str> = lex
            .entries
            .iter()
            .flat_map(|e| e.phrase_variants.iter())
            .flat_map(|p| p.split(' '))
            .collect();
        for w in &lex.noise_vocab {
            assert!(!phrase_words.contains(w.as_str()), "{w}");
        }
        for w in ["et", "avec"] {
            assert!(!phrase_words.contains(w));
        }
    }

    #[test]
    fn year_rule_changes_the_code() {
        let lex = lexicon();
        let flu = &lex.entries[lex.index_of_code("J111").unwrap()];
        let mut side = SideVariables::new(0, 0, 20, 0).unwrap();
        let early = flu.resolve(&side, None);
        side.year = 5;
        let late = flu.resolve(&side, None);
        assert_eq!(early.as_str(), "J111");
        assert_eq!(late.as_str(), "J101");
    }

    #[test]
    fn adjacency_rule_changes_the_code() {
        let lex = lexicon();
        let bypass = &lex.entries[lex.index_of_code("Z951").unwrap()];
        let side = SideVariables::new(0, 0, 20, 0).unwrap();
        let ihd = Icd10Code::parse("I259").unwrap();
        assert_eq!(bypass.resolve(&side, None).as_str(), "Z951");
        assert_eq!(bypass.resolve(&side, Some(&ihd)).as_str(), "I251");
    }

    #[test]
    fn paper_fraction_near_ninety_percent() {
        let cfg = GeneratorConfig {
            n_records: 1000,
            seed: 1,
            ..Default::default()
        };
        let certs = generate_corpus(&cfg, &lexicon()).unwrap();
        let paper = certs.iter().filter(|c| c.side().origin == 0).count() as f64 / 1000.0;
        assert!((paper - 0.90).abs() <= 0.03, "{paper}");
    }

    #[test]
    fn bang_fraction_among_paper_certificates() {
        let cfg = GeneratorConfig {
            n_records: 10_000,
            seed: 3,
            ..Default::default()
        };
        let certs = generate_corpus(&cfg, &lexicon()).unwrap();
        let paper: Vec<_> = certs.iter().filter(|c| c.side().origin == 0).collect();
        let bang = paper.iter().filter(|c| c.has_bang()).count() as f64 / paper.len() as f64;
        assert!((bang - 0.10).abs() <= 0.01, "{bang}");
        assert!(certs.iter().filter(|c| c.side().origin == 1).all(|c| !c.has_bang()));
    }

    #[test]
    fn without_misalignment_gold_equals_phrase_codes() {
        let cfg = GeneratorConfig {
            n_records: 500,
            p_misalign: 0.0,
            ..Default::default()
        };
        for r in generate_annotated(&cfg, &lexicon()).unwrap() {
            assert_eq!(r.certificate.gold_code_lines(), &r.phrase_codes);
            assert!(!r.misaligned);
        }
    }

    #[test]
    fn misalignment_is_absorbed_by_backward_concatenation() {
        let lex = lexicon();
        let clean = GeneratorConfig {
            n_records: 800,
            p_misalign: 0.0,
            seed: 11,
            ..Default::default()
        };
        let noisy = GeneratorConfig {
            p_misalign: 1.0,
            ..clean.clone()
        };
        let a = generate_annotated(&clean, &lex).unwrap();
        let b = generate_annotated(&noisy, &lex).unwrap();
        let mut moved = 0;
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.certificate.lines(), y.certificate.lines());
            moved += usize::from(y.misaligned);
            assert_eq!(
                concat_backward(&x.certificate).target_codes,
                concat_backward(&y.certificate).target_codes
            );
        }
        assert!(moved > 100, "{moved}");
    }

    #[test]
    fn code_budget_and_line_counts() {
        let cfg = GeneratorConfig {
            n_records: 3000,
            ..Default::default()
        };
        let certs = generate_corpus(&cfg, &lexicon()).unwrap();
        let mut hist = [0usize; 7];
        for c in &certs {
            assert!(c.code_count() <= MAX_CODES);
            assert!(c.code_count() >= 1);
            hist[c.lines().iter().flatten().count()] += 1;
        }
        assert!(hist[2] > hist[1] && hist[2] > hist[4] && hist[6] < hist[3]);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GeneratorConfig {
            n_records: 200,
            seed: 42,
            ..Default::default()
        };
        let lex = lexicon();
        assert_eq!(generate_corpus(&cfg, &lex).unwrap(), generate_corpus(&cfg, &lex).unwrap());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let lex = lexicon();
        let bad = GeneratorConfig {
            p_misalign: 1.5,
            ..Default::default()
        };
        assert!(generate_corpus(&bad, &lex).is_err());
        let bad = GeneratorConfig {
            max_codes_per_cert: 10,
            ..Default::default()
        };
        assert!(generate_corpus(&bad, &lex).is_err());
    }

    #[test]
    fn split_partitions_per_year() {
        let cfg = GeneratorConfig {
            n_records: 6000,
            seed: 5,
            ..Default::default()
        };
        let certs = generate_corpus(&cfg, &lexicon()).unwrap();
        let (train, val, test) = split_corpus(&certs, 50, 50, 9).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), split_sizes(6000, 6, 50, 50));
        assert_eq!((val.len(), test.len()), (300, 300));
        for y in 0..6 {
            assert_eq!(val.iter().filter(|c| c.side().year == y).count(), 50);
            assert_eq!(test.iter().filter(|c| c.side().year == y).count(), 50);
        }
        let mut ids: Vec<&str> = train.iter().chain(&val).chain(&test).map(|c| c.id()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 6000);
        assert_eq!(split_corpus(&certs, 50, 50, 9).unwrap(), (train, val, test));
        let err = split_corpus(&certs, 5000, 50, 9).unwrap_err();
        assert!(err.to_string().contains("year 2011"), "{err}");
    }

    #[test]
    fn paper_scale_split_arithmetic() {
        // Reported sizes: 3,240,109 training records and 30,000 each for validation and test.
        assert_eq!(split_sizes(3_300_109, 6, 5000, 5000), (3_240_109, 30_000, 30_000));
        // 2,500 + 2,500 per year removes 30,000 records in total.
        assert_eq!(split_sizes(3_270_109, 6, 2500, 2500), (3_240_109, 15_000, 15_000));
    }
}
