//! Certificates, side variables, ICD-10 codes and the corpus file format.
//!
//! A corpus file is UTF-8, tab separated, one certificate per row:
//!
//! ```text
//! id  gender  year  age_days  origin  line1_text .. line6_text  line1_codes .. line6_codes
//! ```
//!
//! Codes inside a cell are space separated. An empty cell is an absent line.
//! A header row is required.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Number of text lines on a certificate: four in part one, two in part two.
pub const NUM_LINES: usize = 6;

/// Hard bound on the number of codes attached to one certificate.
pub const MAX_CODES: usize = 20;

pub const AGE_BUCKETS: usize = 25;
pub const YEAR_STATES: usize = 6;
pub const GENDER_STATES: usize = 2;
pub const ORIGIN_STATES: usize = 2;

/// Cardinalities in the order age, year, gender, origin.
pub const SIDE_CARDINALITIES: [usize; 4] = [AGE_BUCKETS, YEAR_STATES, GENDER_STATES, ORIGIN_STATES];

const DAYS_PER_YEAR: u64 = 365;

/// A syntactically valid ICD-10 code: one uppercase letter followed by 2 or 3 digits.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Icd10Code(String);

impl Icd10Code {
    /// Parses a code, accepting lowercase letters and a dot after the category
    /// (`"i25.1"` becomes `I251`).
    pub fn parse(raw: &str) -> Result<Self> {
        let normalized: String = raw
            .trim()
            .chars()
            .filter(|&c| c != '.')
            .map(|c| c.to_ascii_uppercase())
            .collect();
        let bytes = normalized.as_bytes();
        let well_formed = (3..=4).contains(&bytes.len())
            && bytes[0].is_ascii_uppercase()
            && bytes[1..].iter().all(u8::is_ascii_digit);
        if !well_formed {
            return Err(Error::validation(format!("malformed ICD-10 code {raw:?}")));
        }
        Ok(Icd10Code(normalized))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// The letter and first two digits, e.g. `I25` for `I251`.
    pub fn category(&self) -> &str {
        &self.0[..3]
    }

    fn category_key(&self) -> u16 {
        let b = self.0.as_bytes();
        (b[0] - b'A') as u16 * 100 + (b[1] - b'0') as u16 * 10 + (b[2] - b'0') as u16
    }
}

impl FromStr for Icd10Code {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Icd10Code::parse(s)
    }
}

impl fmt::Display for Icd10Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for Icd10Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Parses a space separated list of codes.
pub fn parse_codes(s: &str) -> Result<Vec<Icd10Code>> {
    s.split_whitespace().map(Icd10Code::parse).collect()
}

pub fn join_codes(codes: &[Icd10Code]) -> String {
    codes.iter().map(Icd10Code::as_str).collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub fn index(self) -> u8 {
        match self {
            Gender::Male => 0,
            Gender::Female => 1,
        }
    }

    fn from_index(i: u8) -> Self {
        if i == 0 {
            Gender::Male
        } else {
            Gender::Female
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Gender::Male => "M",
            Gender::Female => "F",
        }
    }
}

/// How the certificate reached the registry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Origin {
    /// Handwritten, keyed in through speech recognition. May contain `!`.
    Paper,
    Electronic,
}

impl Origin {
    pub fn index(self) -> u8 {
        match self {
            Origin::Paper => 0,
            Origin::Electronic => 1,
        }
    }

    fn from_index(i: u8) -> Self {
        if i == 0 {
            Origin::Paper
        } else {
            Origin::Electronic
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Origin::Paper => "paper",
            Origin::Electronic => "electronic",
        }
    }
}

/// Calendar years covered by the corpus. The year variable always has six states.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct YearRange {
    pub first: i32,
}

impl Default for YearRange {
    fn default() -> Self {
        YearRange { first: 2011 }
    }
}

impl YearRange {
    pub fn index_of(&self, year: i32) -> Result<u8> {
        let offset = year - self.first;
        if !(0..YEAR_STATES as i32).contains(&offset) {
            return Err(Error::config(format!(
                "year {year} outside configured range {}..={}",
                self.first,
                self.last()
            )));
        }
        Ok(offset as u8)
    }

    pub fn year_of(&self, index: u8) -> i32 {
        self.first + index as i32
    }

    pub fn last(&self) -> i32 {
        self.first + YEAR_STATES as i32 - 1
    }
}

/// Categorical side variables attached to every certificate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SideVariables {
    pub gender: u8,
    pub year: u8,
    pub age_bucket: u8,
    pub origin: u8,
}

impl SideVariables {
    pub fn new(gender: u8, year: u8, age_bucket: u8, origin: u8) -> Result<Self> {
        let side = SideVariables {
            gender,
            year,
            age_bucket,
            origin,
        };
        for (value, card) in side.indices().iter().zip(SIDE_CARDINALITIES) {
            if *value >= card {
                return Err(Error::validation(format!(
                    "side variable index {value} out of range 0..{card}"
                )));
            }
        }
        Ok(side)
    }

    /// Indices in the order age, year, gender, origin (matching [`SIDE_CARDINALITIES`]).
    pub fn indices(&self) -> [usize; 4] {
        [
            self.age_bucket as usize,
            self.year as usize,
            self.gender as usize,
            self.origin as usize,
        ]
    }

    pub fn origin(&self) -> Origin {
        Origin::from_index(self.origin)
    }
}

/// Maps an age in days to one of the 25 age classes.
///
/// Bucket 0 is under 28 days, bucket 1 is 28 days to one year, bucket 2 is
/// one to five years, buckets 3..=23 are five-year bands up to 110 years and
/// bucket 24 is everything older. Whole years are counted as `days / 365`.
pub fn age_bucket(raw_age_days: u64) -> u8 {
    if raw_age_days < 28 {
        return 0;
    }
    let years = raw_age_days / DAYS_PER_YEAR;
    match years {
        0 => 1,
        1..=4 => 2,
        5..=109 => (3 + (years - 5) / 5) as u8,
        _ => 24,
    }
}

pub fn encode_side_variables(
    raw_age_days: i64,
    gender: Gender,
    year: i32,
    origin: Origin,
    years: YearRange,
) -> Result<SideVariables> {
    if raw_age_days < 0 {
        return Err(Error::validation(format!("negative age {raw_age_days} days")));
    }
    let year = years.index_of(year)?;
    SideVariables::new(
        gender.index(),
        year,
        age_bucket(raw_age_days as u64),
        origin.index(),
    )
}

/// A top-level ICD-10 chapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChapterId {
    pub index: u8,
    pub name: &'static str,
}

impl ChapterId {
    pub fn roman(&self) -> &'static str {
        ROMAN[self.index as usize - 1]
    }
}

const ROMAN: [&str; 22] = [
    "I", "II", "III", "IV", "V", "VI", "VII", "VIII", "IX", "X", "XI", "XII", "XIII", "XIV", "XV",
    "XVI", "XVII", "XVIII", "XIX", "XX", "XXI", "XXII",
];

const CHAPTER_NAMES: [&str; 22] = [
    "Certain infectious and parasitic diseases",
    "Neoplasms",
    "Diseases of the blood and blood-forming organs and certain disorders involving the immune mechanism",
    "Endocrine, nutritional and metabolic diseases",
    "Mental and behavioural disorders",
    "Diseases of the nervous system",
    "Diseases of the eye and adnexa",
    "Diseases of the ear and mastoid process",
    "Diseases of the circulatory system",
    "Diseases of the respiratory system",
    "Diseases of the digestive system",
    "Diseases of the skin and subcutaneous tissue",
    "Diseases of the musculoskeletal system and connective tissue",
    "Diseases of the genitourinary system",
    "Pregnancy, childbirth and the puerperium",
    "Certain conditions originating in the perinatal period",
    "Congenital malformations, deformations and chromosomal abnormalities",
    "Symptoms, signs and abnormal clinical and laboratory findings, not elsewhere classified",
    "Injury, poisoning and certain other consequences of external causes",
    "External causes of morbidity and mortality",
    "Factors influencing health status and contact with health services",
    "Codes for special purposes",
];

/// Category ranges `(first, last, chapter)`, sorted and contiguous from A00 to Z99.
///
/// Published ranges leave a few unused categories between chapters (D49,
/// E91-E99, H96-H99, K94-K99, P97-P99, T99, Y99). Each gap is assigned to the
/// chapter that precedes it so that every well-formed code has exactly one chapter.
pub const CHAPTER_RANGES: [(&str, &str, u8); 22] = [
    ("A00", "B99", 1),
    ("C00", "D49", 2),
    ("D50", "D99", 3),
    ("E00", "E99", 4),
    ("F00", "F99", 5),
    ("G00", "G99", 6),
    ("H00", "H59", 7),
    ("H60", "H99", 8),
    ("I00", "I99", 9),
    ("J00", "J99", 10),
    ("K00", "K99", 11),
    ("L00", "L99", 12),
    ("M00", "M99", 13),
    ("N00", "N99", 14),
    ("O00", "O99", 15),
    ("P00", "P99", 16),
    ("Q00", "Q99", 17),
    ("R00", "R99", 18),
    ("S00", "T99", 19),
    ("U00", "U99", 22),
    ("V00", "Y99", 20),
    ("Z00", "Z99", 21),
];

pub fn chapter(index: u8) -> Option<ChapterId> {
    (1..=22).contains(&index).then(|| ChapterId {
        index,
        name: CHAPTER_NAMES[index as usize - 1],
    })
}

pub fn all_chapters() -> impl Iterator<Item = ChapterId> {
    (1..=22).filter_map(chapter)
}

fn range_key(s: &str) -> u16 {
    Icd10Code::parse(s).expect("static range").category_key()
}

pub fn chapter_of(code: &Icd10Code) -> ChapterId {
    let key = code.category_key();
    let pos = CHAPTER_RANGES.partition_point(|(start, _, _)| range_key(start) <= key);
    // A00 is the smallest key, so pos >= 1 for every well-formed code.
    let (_, end, ch) = CHAPTER_RANGES[pos - 1];
    debug_assert!(key <= range_key(end));
    chapter(ch).expect("chapter table")
}

/// Parses and maps a raw code string to its chapter.
pub fn chapter_of_str(raw: &str) -> Result<ChapterId> {
    Icd10Code::parse(raw).map(|c| chapter_of(&c))
}

/// One death certificate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Certificate {
    id: String,
    lines: [Option<String>; NUM_LINES],
    side: SideVariables,
    gold_code_lines: [Vec<Icd10Code>; NUM_LINES],
    raw_age_days: u64,
}

fn check_cell(what: &str, s: &str) -> Result<()> {
    if s.contains(['\t', '\n', '\r']) {
        return Err(Error::validation(format!(
            "{what} contains a tab or newline: {s:?}"
        )));
    }
    Ok(())
}

impl Certificate {
    /// Builds a certificate. Empty text lines are stored as absent.
    pub fn new(
        id: impl Into<String>,
        lines: [Option<String>; NUM_LINES],
        side: SideVariables,
        gold_code_lines: [Vec<Icd10Code>; NUM_LINES],
        raw_age_days: u64,
    ) -> Result<Self> {
        let id = id.into();
        if id.is_empty() || id.trim() != id {
            return Err(Error::validation(format!("invalid certificate id {id:?}")));
        }
        check_cell("id", &id)?;
        let lines = lines.map(|l| l.filter(|s| !s.is_empty()));
        for line in lines.iter().flatten() {
            check_cell("text line", line)?;
        }
        if !lines.iter().flatten().any(|l| !l.trim().is_empty()) {
            return Err(Error::validation(format!(
                "certificate {id} has no nonempty text line"
            )));
        }
        let total: usize = gold_code_lines.iter().map(Vec::len).sum();
        if total > MAX_CODES {
            return Err(Error::validation(format!(
                "certificate {id} has {total} codes, more than {MAX_CODES}"
            )));
        }
        let side = SideVariables::new(side.gender, side.year, side.age_bucket, side.origin)?;
        if side.age_bucket != age_bucket(raw_age_days) {
            return Err(Error::validation(format!(
                "certificate {id}: age bucket {} inconsistent with {raw_age_days} days",
                side.age_bucket
            )));
        }
        Ok(Certificate {
            id,
            lines,
            side,
            gold_code_lines,
            raw_age_days,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// Text lines 1..=6 (index 0 is line 1).
    pub fn lines(&self) -> &[Option<String>; NUM_LINES] {
        &self.lines
    }

    pub fn side(&self) -> SideVariables {
        self.side
    }

    pub fn gold_code_lines(&self) -> &[Vec<Icd10Code>; NUM_LINES] {
        &self.gold_code_lines
    }

    pub fn raw_age_days(&self) -> u64 {
        self.raw_age_days
    }

    pub fn origin(&self) -> Origin {
        self.side.origin()
    }

    /// Whether any text line contains the unreadable-word marker `!`.
    pub fn has_bang(&self) -> bool {
        self.lines.iter().flatten().any(|l| l.contains('!'))
    }

    pub fn code_count(&self) -> usize {
        self.gold_code_lines.iter().map(Vec::len).sum()
    }
}

const HEADER_FIXED: [&str; 5] = ["id", "gender", "year", "age_days", "origin"];

fn header() -> Vec<String> {
    let mut cols: Vec<String> = HEADER_FIXED.iter().map(|s| s.to_string()).collect();
    cols.extend((1..=NUM_LINES).map(|i| format!("line{i}_text")));
    cols.extend((1..=NUM_LINES).map(|i| format!("line{i}_codes")));
    cols
}

pub fn write_corpus(certs: &[Certificate], path: &Path) -> Result<()> {
    write_corpus_with(certs, path, YearRange::default())
}

pub fn write_corpus_with(certs: &[Certificate], path: &Path, years: YearRange) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(format_corpus(certs, years).as_bytes())?;
    out.flush()?;
    Ok(())
}

/// Renders certificates in the corpus file format.
pub fn format_corpus(certs: &[Certificate], years: YearRange) -> String {
    let mut s = header().join("\t");
    s.push('\n');
    for c in certs {
        let side = c.side;
        let mut cols = vec![
            c.id.clone(),
            Gender::from_index(side.gender).symbol().to_string(),
            years.year_of(side.year).to_string(),
            c.raw_age_days.to_string(),
            side.origin().name().to_string(),
        ];
        cols.extend(c.lines.iter().map(|l| l.clone().unwrap_or_default()));
        cols.extend(c.gold_code_lines.iter().map(|codes| join_codes(codes)));
        s.push_str(&cols.join("\t"));
        s.push('\n');
    }
    s
}

pub fn read_corpus(path: &Path) -> Result<Vec<Certificate>> {
    read_corpus_with(path, YearRange::default())
}

pub fn read_corpus_with(path: &Path, years: YearRange) -> Result<Vec<Certificate>> {
    let text = fs::read_to_string(path)?;
    parse_corpus(&text, &path.display().to_string(), years)
}

/// Parses corpus text. `source` names the input in error messages.
pub fn parse_corpus(text: &str, source: &str, years: YearRange) -> Result<Vec<Certificate>> {
    let expected = header();
    let mut rows = text.split('\n').enumerate().map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)));
    let (_, head) = rows
        .next()
        .ok_or_else(|| Error::parse(source, 1, "header", "empty file"))?;
    if head.split('\t').collect::<Vec<_>>() != expected {
        return Err(Error::parse(source, 1, "header", "unexpected header row"));
    }
    let mut seen = HashSet::new();
    let mut certs = Vec::new();
    for (lineno, row) in rows {
        if row.is_empty() {
            continue;
        }
        let cols: Vec<&str> = row.split('\t').collect();
        if cols.len() != expected.len() {
            return Err(Error::parse(
                source,
                lineno,
                "row",
                format!("expected {} columns, found {}", expected.len(), cols.len()),
            ));
        }
        let field_err = |field: &str, msg: String| Error::parse(source, lineno, field, msg);
        let id = cols[0];
        let gender = match cols[1] {
            "M" => Gender::Male,
            "F" => Gender::Female,
            other => return Err(field_err("gender", format!("expected M or F, found {other:?}"))),
        };
        let year: i32 = cols[2]
            .parse()
            .map_err(|_| field_err("year", format!("not an integer: {:?}", cols[2])))?;
        let age: i64 = cols[3]
            .parse()
            .map_err(|_| field_err("age_days", format!("not an integer: {:?}", cols[3])))?;
        let origin = match cols[4] {
            "paper" => Origin::Paper,
            "electronic" => Origin::Electronic,
            other => {
                return Err(field_err(
                    "origin",
                    format!("expected paper or electronic, found {other:?}"),
                ))
            }
        };
        let side = encode_side_variables(age, gender, year, origin, years)
            .map_err(|e| field_err("side", e.to_string()))?;
        let lines: [Option<String>; NUM_LINES] =
            std::array::from_fn(|i| Some(cols[5 + i].to_string()).filter(|s| !s.is_empty()));
        let mut codes: [Vec<Icd10Code>; NUM_LINES] = Default::default();
        for (i, slot) in codes.iter_mut().enumerate() {
            *slot = parse_codes(cols[5 + NUM_LINES + i])
                .map_err(|e| field_err(&format!("line{}_codes", i + 1), e.to_string()))?;
        }
        let cert = Certificate::new(id, lines, side, codes, age as u64)
            .map_err(|e| field_err("record", e.to_string()))?;
        if !seen.insert(cert.id.clone()) {
            return Err(field_err("id", format!("duplicate id {id:?}")));
        }
        certs.push(cert);
    }
    Ok(certs)
}
