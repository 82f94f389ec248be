//! Multiset code matching, micro-averaged metrics, bootstrap intervals,
//! per-chapter error rates, rejection curves and stratified reports.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::{Add, AddAssign};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::records::{chapter_of, ChapterId, Icd10Code, Origin};
use crate::synth::derive_seed;

/// Predicted and true codes for one record.
pub type CodePair = (Vec<Icd10Code>, Vec<Icd10Code>);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn precision(&self) -> Option<f64> {
        let d = self.tp + self.fp;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    /// Harmonic mean of precision and recall. With nothing predicted the
    /// score is 1 when nothing was expected either and 0 otherwise; the same
    /// rule applies symmetrically when nothing was expected.
    pub fn f_measure(&self) -> f64 {
        match (self.precision(), self.recall()) {
            (Some(p), Some(r)) => f_from(p, r),
            (None, _) => f64::from(u8::from(self.fn_ == 0)),
            (_, None) => f64::from(u8::from(self.fp == 0)),
        }
    }
}

impl Add for Counts {
    type Output = Counts;
    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        *self = *self + o;
    }
}

impl std::iter::Sum for Counts {
    fn sum<I: Iterator<Item = Counts>>(iter: I) -> Counts {
        iter.fold(Counts::default(), Add::add)
    }
}

/// `2PR / (P + R)`, 0 when both are 0.
pub fn f_from(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn multiset(codes: &[Icd10Code]) -> HashMap<&str, u64> {
    let mut m = HashMap::new();
    for c in codes {
        *m.entry(c.as_str()).or_insert(0) += 1;
    }
    m
}

/// Multiset matching: a code counts as a hit as many times as it occurs in both.
pub fn count_matches(pred: &[Icd10Code], truth: &[Icd10Code]) -> Counts {
    let t = multiset(truth);
    let tp: u64 = multiset(pred)
        .iter()
        .map(|(c, &n)| n.min(t.get(c).copied().unwrap_or(0)))
        .sum();
    Counts {
        tp,
        fp: pred.len() as u64 - tp,
        fn_: truth.len() as u64 - tp,
    }
}

/// (lower, upper) percentile bounds per metric.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intervals {
    pub precision: Option<(f64, f64)>,
    pub recall: Option<(f64, f64)>,
    pub f_measure: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub label: String,
    pub records: usize,
    pub counts: Counts,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f_measure: f64,
    pub ci: Option<Intervals>,
}

impl MetricReport {
    pub fn from_counts(label: impl Into<String>, records: usize, counts: Counts) -> Self {
        MetricReport {
            label: label.into(),
            records,
            counts,
            precision: counts.precision(),
            recall: counts.recall(),
            f_measure: counts.f_measure(),
            ci: None,
        }
    }

    /// Machine-readable form, keys prefixed with the label.
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        let p = &self.label;
        kv.set(format!("{p}.records"), self.records);
        kv.set(format!("{p}.tp"), self.counts.tp);
        kv.set(format!("{p}.fp"), self.counts.fp);
        kv.set(format!("{p}.fn"), self.counts.fn_);
        kv.set(format!("{p}.precision"), opt_num(self.precision));
        kv.set(format!("{p}.recall"), opt_num(self.recall));
        kv.set(format!("{p}.f_measure"), format!("{:.6}", self.f_measure));
        if let Some(ci) = &self.ci {
            let fmt = |b: Option<(f64, f64)>| match b {
                Some((l, u)) => format!("{l:.6},{u:.6}"),
                None => "absent".into(),
            };
            kv.set(format!("{p}.precision_ci"), fmt(ci.precision));
            kv.set(format!("{p}.recall_ci"), fmt(ci.recall));
            kv.set(format!("{p}.f_measure_ci"), fmt(Some(ci.f_measure)));
        }
        kv
    }
}

fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |x| format!("{x:.6}"))
}

fn per_record_counts(pairs: &[CodePair]) -> Vec<Counts> {
    pairs.iter().map(|(p, t)| count_matches(p, t)).collect()
}

/// Sums counts over every record before applying the metric formulas.
pub fn micro_metrics(pairs: &[CodePair]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::validation("no records to evaluate"));
    }
    let counts = per_record_counts(pairs).into_iter().sum();
    Ok(MetricReport::from_counts("all", pairs.len(), counts))
}

/// Linear interpolation between order statistics of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap over records: `replicates` resamples with replacement,
/// each drawn from its own seed so results do not depend on scheduling.
pub fn bootstrap_ci(pairs: &[CodePair], replicates: usize, level: f64, seed: u64) -> Result<Intervals> {
    if pairs.is_empty() || replicates == 0 {
        return Err(Error::validation("bootstrap needs records and replicates"));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::config(format!("confidence level {level} outside (0, 1)")));
    }
    let per = per_record_counts(pairs);
    let n = per.len();
    let (mut ps, mut rs, mut fs) = (Vec::new(), Vec::new(), Vec::with_capacity(replicates));
    for b in 0..replicates {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, b as u64, 0xb007));
        let c: Counts = (0..n).map(|_| per[rng.gen_range(0..n)]).sum();
        ps.extend(c.precision());
        rs.extend(c.recall());
        fs.push(c.f_measure());
    }
    let lo = (1.0 - level) / 2.0;
    let bounds = |mut v: Vec<f64>| {
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        Some((quantile(&v, lo), quantile(&v, 1.0 - lo)))
    };
    Ok(Intervals {
        precision: bounds(ps),
        recall: bounds(rs),
        f_measure: bounds(fs).expect("at least one replicate"),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChapterRow {
    pub chapter: ChapterId,
    pub counts: Counts,
    /// `FP / (TP + FP)` within the chapter.
    pub fp_rate: Option<f64>,
    /// `FN / (TP + FN)` within the chapter.
    pub fn_rate: Option<f64>,
    /// Share of all true codes, in [0, 1].
    pub prevalence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChapterReport {
    /// Chapters with at least one predicted or true code, in chapter order.
    pub rows: Vec<ChapterRow>,
}

impl ChapterReport {
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<8} {:>8} {:>8} {:>8} {:>9} {:>9} {:>12}\n",
            "chapter", "tp", "fp", "fn", "fp_rate%", "fn_rate%", "prevalence%"
        );
        let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<8} {:>8} {:>8} {:>8} {:>9} {:>9} {:>12.4}",
                r.chapter.roman(),
                r.counts.tp,
                r.counts.fp,
                r.counts.fn_,
                pct(r.fp_rate),
                pct(r.fn_rate),
                100.0 * r.prevalence
            );
        }
        out
    }
}

/// Attributes every matched and unmatched code occurrence to its chapter.
pub fn per_chapter(pairs: &[CodePair]) -> Result<ChapterReport> {
    if pairs.is_empty() {
        return Err(Error::validation("no records to evaluate"));
    }
    let mut by_chapter: HashMap<u8, Counts> = HashMap::new();
    let mut truth_total = 0u64;
    for (pred, truth) in pairs {
        truth_total += truth.len() as u64;
        let (p, t) = (multiset(pred), multiset(truth));
        let mut codes: Vec<&str> = p.keys().chain(t.keys()).copied().collect();
        codes.sort_unstable();
        codes.dedup();
        for code in codes {
            let (np, nt) = (p.get(code).copied().unwrap_or(0), t.get(code).copied().unwrap_or(0));
            let tp = np.min(nt);
            let ch = chapter_of(&Icd10Code::parse(code)?).index;
            *by_chapter.entry(ch).or_default() += Counts {
                tp,
                fp: np - tp,
                fn_: nt - tp,
            };
        }
    }
    let mut rows: Vec<ChapterRow> = by_chapter
        .into_iter()
        .map(|(ch, counts)| ChapterRow {
            chapter: crate::records::chapter(ch).expect("valid chapter index"),
            counts,
            fp_rate: (counts.tp + counts.fp > 0).then(|| counts.fp as f64 / (counts.tp + counts.fp) as f64),
            fn_rate: (counts.tp + counts.fn_ > 0).then(|| counts.fn_ as f64 / (counts.tp + counts.fn_) as f64),
            prevalence: if truth_total > 0 {
                (counts.tp + counts.fn_) as f64 / truth_total as f64
            } else {
                0.0
            },
        })
        .collect();
    rows.sort_by_key(|r| r.chapter.index);
    Ok(ChapterReport { rows })
}

/// A prediction with its score and the gold codes.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPair {
    pub score: f64,
    pub pred: Vec<Icd10Code>,
    pub truth: Vec<Icd10Code>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    pub threshold: f64,
    pub fraction_rejected: f64,
    /// Micro F over accepted predictions; absent when everything is rejected.
    pub f_accepted: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationCurve {
    pub rows: Vec<CurveRow>,
}

impl CalibrationCurve {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("threshold\tfraction_rejected\tf_accepted\n");
        for r in &self.rows {
            let f = r.f_accepted.map_or_else(|| "NA".to_string(), |f| format!("{f:.6}"));
            let _ = writeln!(out, "{:.2}\t{:.6}\t{f}", r.threshold, r.fraction_rejected);
        }
        out
    }

    /// Row with the largest accepted F among thresholds rejecting at most `max_rejected`.
    pub fn best_within(&self, max_rejected: f64) -> Option<CurveRow> {
        self.rows
            .iter()
            .filter(|r| r.fraction_rejected <= max_rejected && r.f_accepted.is_some())
            .max_by(|a, b| a.f_accepted.partial_cmp(&b.f_accepted).expect("finite"))
            .copied()
    }
}

/// Rejects predictions scoring at or below each threshold of the 0.00..=1.00 grid.
pub fn calibration_curve(items: &[ScoredPair]) -> Result<CalibrationCurve> {
    if items.is_empty() {
        return Err(Error::validation("no predictions"));
    }
    if let Some(bad) = items.iter().find(|i| !(i.score > 0.0 && i.score <= 1.0)) {
        return Err(Error::validation(format!("score {} outside (0, 1]", bad.score)));
    }
    let counts: Vec<Counts> = items.iter().map(|i| count_matches(&i.pred, &i.truth)).collect();
    let n = items.len() as f64;
    let rows = (0..=100)
        .map(|k| {
            let threshold = k as f64 / 100.0;
            let mut rejected = 0usize;
            let mut acc = Counts::default();
            for (i, c) in items.iter().zip(&counts) {
                if i.score <= threshold {
                    rejected += 1;
                } else {
                    acc += *c;
                }
            }
            CurveRow {
                threshold,
                fraction_rejected: rejected as f64 / n,
                f_accepted: (rejected < items.len()).then(|| acc.f_measure()),
            }
        })
        .collect();
    Ok(CalibrationCurve { rows })
}

/// How to partition records into strata.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stratum {
    /// electronic / paper
    Origin,
    /// no-bang / bang
    Bang,
    /// Paper records only, split by the presence of "!".
    PaperBang,
}

impl FromStr for Stratum {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "origin" => Ok(Stratum::Origin),
            "bang" | "contains_bang" => Ok(Stratum::Bang),
            "paper_bang" => Ok(Stratum::PaperBang),
            other => Err(Error::config(format!(
                "unknown stratum {other:?} (expected origin, bang or paper_bang)"
            ))),
        }
    }
}

/// A pair with the record attributes used for stratification.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPair {
    pub pred: Vec<Icd10Code>,
    pub truth: Vec<Icd10Code>,
    pub origin: Origin,
    pub has_bang: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StratifiedReport {
    /// Present strata followed by the overall report labelled `all`.
    pub reports: Vec<MetricReport>,
    /// Strata with no records.
    pub absent: Vec<String>,
}

impl StratifiedReport {
    pub fn get(&self, label: &str) -> Option<&MetricReport> {
        self.reports.iter().find(|r| r.label == label)
    }
}

pub fn stratified_report(pairs: &[LabeledPair], stratum: Stratum) -> Result<StratifiedReport> {
    if pairs.is_empty() {
        return Err(Error::validation("no records to evaluate"));
    }
    let labels: [&str; 2] = match stratum {
        Stratum::Origin => ["electronic", "paper"],
        Stratum::Bang => ["no-bang", "bang"],
        Stratum::PaperBang => ["paper/no-bang", "paper/bang"],
    };
    let assign = |p: &LabeledPair| -> Option<usize> {
        match stratum {
            Stratum::Origin => Some(p.origin.index() as usize ^ 1),
            Stratum::Bang => Some(usize::from(p.has_bang)),
            Stratum::PaperBang => (p.origin == Origin::Paper).then_some(usize::from(p.has_bang)),
        }
    };
    let mut sums = [(0usize, Counts::default()); 2];
    let mut overall = Counts::default();
    for p in pairs {
        let c = count_matches(&p.pred, &p.truth);
        overall += c;
        if let Some(s) = assign(p) {
            sums[s].0 += 1;
            sums[s].1 += c;
        }
    }
    let mut reports = Vec::new();
    let mut absent = Vec::new();
    for (label, (n, c)) in labels.iter().zip(sums) {
        if n == 0 {
            log::warn!("stratum {label} has no records");
            absent.push(label.to_string());
        } else {
            reports.push(MetricReport::from_counts(*label, n, c));
        }
    }
    reports.push(MetricReport::from_counts("all", pairs.len(), overall));
    Ok(StratifiedReport { reports, absent })
}

/// Aligned plain-text table of reports.
pub fn format_reports(reports: &[MetricReport]) -> String {
    let mut out = format!(
        "{:<16} {:>8} {:>8} {:>8} {:>8} {:>10} {:>10} {:>10}\n",
        "stratum", "records", "tp", "fp", "fn", "precision", "recall", "f_measure"
    );
    let num = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    for r in reports {
        let _ = writeln!(
            out,
            "{:<16} {:>8} {:>8} {:>8} {:>8} {:>10} {:>10} {:>10.4}",
            r.label,
            r.records,
            r.counts.tp,
            r.counts.fp,
            r.counts.fn_,
            num(r.precision),
            num(r.recall),
            r.f_measure
        );
        if let Some(ci) = &r.ci {
            let b = |v: Option<(f64, f64)>| {
                v.map_or_else(|| "-".to_string(), |(l, u)| format!("[{l:.4}, {u:.4}]"))
            };
            let _ = writeln!(
                out,
                "{:<16} precision {} recall {} f_measure {}",
                "  95% ci",
                b(ci.precision),
                b(ci.recall),
                b(Some(ci.f_measure))
            );
        }
    }
    out
}
