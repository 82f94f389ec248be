//! F-measure consensus between member predictions and greedy member selection.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::decode::Prediction;
use crate::error::{Error, Result};
use crate::eval::{count_matches, Counts};
use crate::records::Icd10Code;

/// F-measure between two code sequences; two empty sequences agree fully.
pub fn pair_f(a: &[Icd10Code], b: &[Icd10Code]) -> f64 {
    count_matches(a, b).f_measure()
}

/// Index of the candidate with the highest mean F against the others;
/// ties go to the lowest index.
pub fn consensus_index(candidates: &[&[Icd10Code]]) -> usize {
    let n = candidates.len();
    if n <= 1 {
        return 0;
    }
    let mut best = (0, f64::NEG_INFINITY);
    for i in 0..n {
        let total: f64 = (0..n)
            .filter(|&j| j != i)
            .map(|j| pair_f(candidates[i], candidates[j]))
            .sum();
        let mean = total / (n - 1) as f64;
        if mean > best.1 {
            best = (i, mean);
        }
    }
    best.0
}

/// The consensus sequence, scored with the mean of all member scores.
pub fn consensus(candidates: &[Prediction]) -> Result<Prediction> {
    let first = candidates
        .first()
        .ok_or_else(|| Error::validation("consensus over zero candidates"))?;
    if let Some(other) = candidates.iter().find(|c| c.id != first.id) {
        return Err(Error::validation(format!(
            "consensus mixes records {} and {}",
            first.id, other.id
        )));
    }
    let seqs: Vec<&[Icd10Code]> = candidates.iter().map(|c| c.codes.as_slice()).collect();
    let winner = consensus_index(&seqs);
    Ok(Prediction {
        id: first.id.clone(),
        codes: candidates[winner].codes.clone(),
        score: candidates.iter().map(|c| c.score).sum::<f64>() / candidates.len() as f64,
    })
}

/// Record-wise consensus over members whose prediction lists are aligned by id.
pub fn combine(members: &[&[Prediction]]) -> Result<Vec<Prediction>> {
    let first = members
        .first()
        .ok_or_else(|| Error::validation("ensemble without members"))?;
    if let Some(m) = members.iter().find(|m| m.len() != first.len()) {
        return Err(Error::validation(format!(
            "member prediction counts differ: {} vs {}",
            first.len(),
            m.len()
        )));
    }
    (0..first.len())
        .map(|r| {
            let cands: Vec<Prediction> = members.iter().map(|m| m[r].clone()).collect();
            consensus(&cands)
        })
        .collect()
}

fn ensemble_f(pool: &[Vec<Prediction>], members: &[usize], truths: &[Vec<Icd10Code>]) -> Result<f64> {
    let refs: Vec<&[Prediction]> = members.iter().map(|&m| pool[m].as_slice()).collect();
    let preds = combine(&refs)?;
    let c: Counts = preds
        .iter()
        .zip(truths)
        .map(|(p, t)| count_matches(&p.codes, t))
        .sum();
    Ok(c.f_measure())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionStep {
    pub members: Vec<usize>,
    pub f_measure: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub members: Vec<usize>,
    pub log: Vec<SelectionStep>,
}

/// Greedy forward selection on validation predictions.
///
/// `pool[m]` holds model `m`'s predictions aligned with `truths`. Starts from
/// the best single model and keeps adding the model that raises ensemble F the
/// most; stops when no addition raises it. A model joins at most once.
pub fn greedy_select(pool: &[Vec<Prediction>], truths: &[Vec<Icd10Code>]) -> Result<Selection> {
    if pool.is_empty() {
        return Err(Error::validation("empty model pool"));
    }
    if let Some(p) = pool.iter().find(|p| p.len() != truths.len()) {
        return Err(Error::validation(format!(
            "{} predictions for {} validation records",
            p.len(),
            truths.len()
        )));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for m in 0..pool.len() {
        let f = ensemble_f(pool, &[m], truths)?;
        if f > best.1 {
            best = (m, f);
        }
    }
    let mut members = vec![best.0];
    let mut current = best.1;
    let mut log = vec![SelectionStep {
        members: members.clone(),
        f_measure: current,
    }];
    loop {
        let mut pick: Option<(usize, f64)> = None;
        for m in (0..pool.len()).filter(|m| !members.contains(m)) {
            let mut trial = members.clone();
            trial.push(m);
            let f = ensemble_f(pool, &trial, truths)?;
            if f > current && pick.is_none_or(|(_, pf)| f > pf) {
                pick = Some((m, f));
            }
        }
        let Some((m, f)) = pick else { break };
        members.push(m);
        current = f;
        log::info!("ensemble size {} reaches F {f:.4}", members.len());
        log.push(SelectionStep {
            members: members.clone(),
            f_measure: f,
        });
    }
    Ok(Selection { members, log })
}

/// Member checkpoints with content hashes, plus the selection log.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleManifest {
    pub members: Vec<(PathBuf, String)>,
    pub log: Vec<SelectionStep>,
}

impl EnsembleManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::from("medseq-ensemble 1\n");
        for (p, h) in &self.members {
            let _ = writeln!(out, "member\t{}\t{h}", p.display());
        }
        for s in &self.log {
            let ids: Vec<String> = s.members.iter().map(|m| m.to_string()).collect();
            let _ = writeln!(out, "step\t{}\t{:.6}", ids.join(","), s.f_measure);
        }
        out
    }

    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "medseq-ensemble 1")) => {}
            _ => return Err(Error::parse(source, 1, "header", "expected medseq-ensemble 1")),
        }
        let mut members = Vec::new();
        let mut log = Vec::new();
        for (i, line) in lines {
            let f: Vec<&str> = line.split('\t').collect();
            match f.as_slice() {
                ["member", path, hash] => members.push((PathBuf::from(path), hash.to_string())),
                ["step", ids, fm] => {
                    let members = ids
                        .split(',')
                        .map(str::parse)
                        .collect::<std::result::Result<Vec<usize>, _>>()
                        .map_err(|e| Error::parse(source, i + 1, "members", e.to_string()))?;
                    let f_measure = fm
                        .parse()
                        .map_err(|e| Error::parse(source, i + 1, "f_measure", format!("{e}")))?;
                    log.push(SelectionStep { members, f_measure });
                }
                _ => return Err(Error::parse(source, i + 1, "row", "expected member or step")),
            }
        }
        if members.is_empty() {
            return Err(Error::parse(source, 1, "member", "manifest lists no members"));
        }
        Ok(EnsembleManifest { members, log })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text, &path.display().to_string())
    }
}
