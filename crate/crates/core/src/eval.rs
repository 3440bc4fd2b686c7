//! Text normalization, edit-distance scoring and per-language /
//! per-resource-rank reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{HoursRow, Reference};
use crate::error::{Error, Result};

/// Bumped whenever a normalization rule changes.
pub const NORMALIZER_VERSION: u32 = 1;

/// Languages scored by character error rate.
pub const CHARACTER_SCORED: &[&str] = &["ja", "zh", "yue"];

pub fn is_character_scored(language: &str) -> bool {
    CHARACTER_SCORED.contains(&language)
}

const APOSTROPHES: &[char] = &['\'', '\u{2019}'];

/// Characters replaced by a space.
pub const PUNCTUATION: &str = "!\"#$%&()*+,-./:;<=>?@[\\]^_`{|}~\u{00a1}\u{00bf}\u{00ab}\u{00bb}\u{2013}\u{2014}\u{2018}\u{201c}\u{201d}\u{2026}\u{3001}\u{3002}\u{300c}\u{300d}\u{300e}\u{300f}\u{3010}\u{3011}\u{3008}\u{3009}\u{300a}\u{300b}\u{30fb}\u{ff01}\u{ff08}\u{ff09}\u{ff0c}\u{ff0e}\u{ff1a}\u{ff1b}\u{ff1f}";

fn strip_bracketed(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut close: Option<char> = None;
    for ch in s.chars() {
        match close {
            Some(c) if ch == c => {
                close = None;
                out.push(' ');
            }
            Some(_) => {}
            None => match ch {
                '[' if s.contains(']') => close = Some(']'),
                '(' if s.contains(')') => close = Some(')'),
                _ => out.push(ch),
            },
        }
    }
    out
}

/// Version-1 rules, applied in order:
/// lowercase; drop `[...]` and `(...)` spans; delete apostrophes; map
/// [`PUNCTUATION`] to spaces; collapse whitespace and trim; for
/// character-scored languages remove all spaces.
pub fn normalize_text(s: &str, language: &str) -> String {
    let lower = s.to_lowercase();
    let unbracketed = strip_bracketed(&lower);
    let mapped: String = unbracketed
        .chars()
        .filter(|c| !APOSTROPHES.contains(c))
        .map(|c| if PUNCTUATION.contains(c) { ' ' } else { c })
        .collect();
    let words: Vec<&str> = mapped.split_whitespace().collect();
    if is_character_scored(language) {
        words.concat()
    } else {
        words.join(" ")
    }
}

/// Scoring units of normalized text: characters or words.
pub fn units(normalized: &str, language: &str) -> Vec<String> {
    if is_character_scored(language) {
        normalized
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(String::from)
            .collect()
    } else {
        normalized.split_whitespace().map(String::from).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Minimum-cost alignment with unit costs. Among minimum-cost alignments
/// the one with the most substitutions wins, then the most insertions.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    // cells hold (total, substitutions, insertions); compared by total,
    // then more substitutions, then more insertions
    let better = |a: (usize, usize, usize), b: (usize, usize, usize)| {
        a.0 < b.0 || (a.0 == b.0 && (a.1 > b.1 || (a.1 == b.1 && a.2 > b.2)))
    };
    let mut prev: Vec<(usize, usize, usize)> = (0..=m).map(|j| (j, 0, j)).collect();
    for i in 1..=n {
        let mut cur = vec![(i, 0, 0); m + 1];
        for j in 1..=m {
            let d = prev[j - 1];
            let diag = if reference[i - 1] == hypothesis[j - 1] {
                d
            } else {
                (d.0 + 1, d.1 + 1, d.2)
            };
            let ins = (cur[j - 1].0 + 1, cur[j - 1].1, cur[j - 1].2 + 1);
            let del = (prev[j].0 + 1, prev[j].1, prev[j].2);
            let mut best = diag;
            if better(ins, best) {
                best = ins;
            }
            if better(del, best) {
                best = del;
            }
            cur[j] = best;
        }
        prev = cur;
    }
    let (total, s, ins) = prev[m];
    EditCounts {
        substitutions: s,
        insertions: ins,
        deletions: total - s - ins,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ResourceRank {
    High,
    Middle,
    Low,
}

impl ResourceRank {
    pub fn from_hours(hours: f64) -> Self {
        if hours > 100.0 {
            ResourceRank::High
        } else if hours >= 20.0 {
            ResourceRank::Middle
        } else {
            ResourceRank::Low
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "WER")]
    Wer,
    #[serde(rename = "CER")]
    Cer,
}

impl Metric {
    pub fn for_language(language: &str) -> Self {
        if is_character_scored(language) {
            Metric::Cer
        } else {
            Metric::Wer
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageScore {
    pub language: String,
    pub metric: Metric,
    /// `None` only when there are no reference units but some insertions.
    pub error_rate: Option<f64>,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub num_ref_units: usize,
    pub num_utterances: usize,
    pub rank: Option<ResourceRank>,
    pub hours: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankScore {
    pub rank: ResourceRank,
    pub languages: Vec<String>,
    /// Unweighted mean of the member languages' error rates.
    pub mean_error_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub normalizer_version: u32,
    pub languages: Vec<LanguageScore>,
    pub ranks: Vec<RankScore>,
    /// Problems with individual utterances; scoring continues past them.
    pub errors: Vec<String>,
}

pub type Hypothesis = Reference;

pub fn error_rate(c: &EditCounts, n: usize) -> Option<f64> {
    match (n, c.total()) {
        (0, 0) => Some(0.0),
        (0, _) => None,
        (n, e) => Some(e as f64 / n as f64),
    }
}

/// Scores hypotheses against references, grouped by the reference language.
pub fn score_corpus(refs: &[Reference], hyps: &[Hypothesis], hours: &[HoursRow]) -> ScoreReport {
    let mut errors = Vec::new();
    let mut by_id: BTreeMap<&str, &Reference> = BTreeMap::new();
    for r in refs {
        if by_id.insert(&r.utt_id, r).is_some() {
            errors.push(format!("{}: duplicate reference", r.utt_id));
        }
    }
    let hours_of: BTreeMap<&str, f64> = hours.iter().map(|h| (h.language.as_str(), h.hours)).collect();
    let mut acc: BTreeMap<String, (EditCounts, usize, usize)> = BTreeMap::new();
    let mut seen = std::collections::BTreeSet::new();
    for h in hyps {
        let Some(r) = by_id.get(h.utt_id.as_str()) else {
            errors.push(format!("{}: no reference", h.utt_id));
            continue;
        };
        if !seen.insert(h.utt_id.as_str()) {
            errors.push(format!("{}: duplicate hypothesis", h.utt_id));
            continue;
        }
        let lang = &r.language;
        let ru = units(&normalize_text(&r.text, lang), lang);
        let hu = units(&normalize_text(&h.text, lang), lang);
        let c = edit_distance(&ru, &hu);
        let e = acc.entry(lang.clone()).or_default();
        e.0.substitutions += c.substitutions;
        e.0.deletions += c.deletions;
        e.0.insertions += c.insertions;
        e.1 += ru.len();
        e.2 += 1;
    }
    for r in refs {
        if !seen.contains(r.utt_id.as_str()) {
            errors.push(format!("{}: no hypothesis", r.utt_id));
        }
    }

    let languages: Vec<LanguageScore> = acc
        .into_iter()
        .map(|(language, (c, n, u))| {
            let h = hours_of.get(language.as_str()).copied();
            LanguageScore {
                metric: Metric::for_language(&language),
                error_rate: error_rate(&c, n),
                substitutions: c.substitutions,
                deletions: c.deletions,
                insertions: c.insertions,
                num_ref_units: n,
                num_utterances: u,
                rank: h.map(ResourceRank::from_hours),
                hours: h,
                language,
            }
        })
        .collect();

    let ranks = [ResourceRank::High, ResourceRank::Middle, ResourceRank::Low]
        .into_iter()
        .filter_map(|rank| {
            let members: Vec<&LanguageScore> = languages.iter().filter(|l| l.rank == Some(rank)).collect();
            if members.is_empty() {
                return None;
            }
            let rates: Vec<f64> = members.iter().filter_map(|l| l.error_rate).collect();
            Some(RankScore {
                rank,
                languages: members.iter().map(|l| l.language.clone()).collect(),
                mean_error_rate: (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64),
            })
        })
        .collect();

    ScoreReport {
        normalizer_version: NORMALIZER_VERSION,
        languages,
        ranks,
        errors,
    }
}

fn pct(x: Option<f64>) -> String {
    x.map(|v| format!("{:.1}", 100.0 * v)).unwrap_or_else(|| "n/a".into())
}

/// Fixed-width text table.
pub fn render_report(r: &ScoreReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<8} {:<6} {:>7} {:>6} {:>6} {:>6} {:>7} {:>6} {:<6}",
        "lang", "metric", "err%", "sub", "del", "ins", "units", "utts", "rank"
    );
    for l in &r.languages {
        let metric = match l.metric {
            Metric::Wer => "WER",
            Metric::Cer => "CER",
        };
        let rank = l.rank.map(|k| format!("{k:?}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:<8} {:<6} {:>7} {:>6} {:>6} {:>6} {:>7} {:>6} {:<6}",
            l.language,
            metric,
            pct(l.error_rate),
            l.substitutions,
            l.deletions,
            l.insertions,
            l.num_ref_units,
            l.num_utterances,
            rank
        );
    }
    for k in &r.ranks {
        let _ = writeln!(
            s,
            "rank {:<7} mean err% {:>6}  ({})",
            format!("{:?}", k.rank),
            pct(k.mean_error_rate),
            k.languages.join(", ")
        );
    }
    for e in &r.errors {
        let _ = writeln!(s, "error: {e}");
    }
    s
}

pub const REPORT_TXT: &str = "report.txt";
pub const REPORT_JSON: &str = "report.json";

/// Writes `report.txt` and `report.json` into `dir`.
pub fn write_report(r: &ScoreReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let txt = dir.join(REPORT_TXT);
    fs::write(&txt, render_report(r)).map_err(|e| Error::io(&txt, e))?;
    let json = dir.join(REPORT_JSON);
    let mut body = serde_json::to_string_pretty(r)?;
    body.push('\n');
    fs::write(&json, body).map_err(|e| Error::io(&json, e))
}
