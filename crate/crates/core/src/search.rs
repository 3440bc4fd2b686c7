//! Label-synchronous beam search scoring each hypothesis by
//! `λ·ctc + (1−λ)·att`, with CTC prefix probabilities from the final CTC
//! posteriors and attention scores from a [`StepScorer`].

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::ctc::{PrefixScorer, PrefixState};
use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA_CTC: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub lambda_ctc: f64,
    /// Most label tokens a hypothesis may hold; at this length only `<eos>` is tried.
    pub max_len: usize,
    pub nbest: usize,
    /// Added once per label token; 0 disables.
    #[serde(default)]
    pub length_bonus: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: 4,
            lambda_ctc: DEFAULT_LAMBDA_CTC,
            max_len: 48,
            nbest: 1,
            length_bonus: 0.0,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_ctc) {
            return Err(Error::validation(format!(
                "lambda_ctc {} outside [0, 1]",
                self.lambda_ctc
            )));
        }
        if self.beam_size == 0 || self.nbest == 0 {
            return Err(Error::validation("beam_size and nbest must be >= 1"));
        }
        Ok(())
    }
}

/// Attention-side scores: next-token log-probabilities after a label prefix.
pub trait StepScorer {
    fn score(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

impl<F: FnMut(&[usize]) -> Result<Vec<f64>>> StepScorer for F {
    fn score(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        self(prefix)
    }
}

/// `λ·ctc + (1−λ)·att`, skipping a term whose weight is zero so that an
/// impossible path under the ignored model does not poison the score.
pub fn joint_score(lambda: f64, ctc: f64, att: f64) -> f64 {
    match lambda {
        l if l == 0.0 => att,
        l if l == 1.0 => ctc,
        l => l * ctc + (1.0 - l) * att,
    }
}

#[derive(Debug, Clone)]
pub struct Hypothesis {
    /// Label tokens, without `<eos>`.
    pub tokens: Vec<usize>,
    pub ctc_state: PrefixState,
    pub ctc_logprob: f64,
    pub att_logprob: f64,
    pub joint: f64,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSequence {
    pub tokens: Vec<usize>,
    pub joint: f64,
    pub ctc: f64,
    pub att: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub nbest: Vec<ScoredSequence>,
    /// True when no hypothesis emitted `<eos>` before the length limit and
    /// the best one was closed at `max_len`.
    pub truncated: bool,
}

impl SearchResult {
    pub fn best(&self) -> &ScoredSequence {
        &self.nbest[0]
    }
}

/// Joint descending, then shorter, then lexicographically smaller.
pub fn rank(a_joint: f64, a_tokens: &[usize], b_joint: f64, b_tokens: &[usize]) -> Ordering {
    b_joint
        .total_cmp(&a_joint)
        .then(a_tokens.len().cmp(&b_tokens.len()))
        .then_with(|| a_tokens.cmp(b_tokens))
}

/// Beam search over label ids `labels` with end token `eos`.
///
/// `log_post` is the `t×v` final CTC log-posterior matrix; the attention
/// scorer's output is indexed by token id and must cover `eos`.
pub fn joint_beam_search<S: StepScorer + ?Sized>(
    log_post: &[f64],
    t: usize,
    v: usize,
    labels: &[usize],
    eos: usize,
    scorer: &mut S,
    cfg: &BeamConfig,
) -> Result<SearchResult> {
    cfg.validate()?;
    let ctc = PrefixScorer::new(log_post, t, v)?;
    let lambda = cfg.lambda_ctc;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        ctc_state: ctc.initial(),
        ctc_logprob: 0.0,
        att_logprob: 0.0,
        joint: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    while !live.is_empty() {
        let mut cands: Vec<Hypothesis> = Vec::new();
        for h in &live {
            let att = scorer.score(&h.tokens)?;
            if att.len() <= eos || labels.iter().any(|&c| c >= att.len()) {
                return Err(Error::Vocab(format!("attention scores cover {} ids", att.len())));
            }
            let bonus = cfg.length_bonus * h.tokens.len() as f64;
            let ctc_end = h.ctc_state.full_logprob();
            let att_end = h.att_logprob + att[eos];
            cands.push(Hypothesis {
                tokens: h.tokens.clone(),
                ctc_state: h.ctc_state.clone(),
                ctc_logprob: ctc_end,
                att_logprob: att_end,
                joint: joint_score(lambda, ctc_end, att_end) + bonus,
                finished: true,
            });
            if h.tokens.len() >= cfg.max_len {
                continue;
            }
            for &c in labels {
                let (state, psi) = ctc.extend(&h.ctc_state, c)?;
                let att_c = h.att_logprob + att[c];
                let mut tokens = h.tokens.clone();
                tokens.push(c);
                cands.push(Hypothesis {
                    tokens,
                    ctc_state: state,
                    ctc_logprob: psi,
                    att_logprob: att_c,
                    joint: joint_score(lambda, psi, att_c) + bonus + cfg.length_bonus,
                    finished: false,
                });
            }
        }
        cands.sort_by(|a, b| rank(a.joint, &a.tokens, b.joint, &b.tokens).then(b.finished.cmp(&a.finished)));
        cands.truncate(cfg.beam_size);
        live.clear();
        for h in cands {
            if h.finished {
                finished.push(h);
            } else {
                live.push(h);
            }
        }
    }

    finished.sort_by(|a, b| rank(a.joint, &a.tokens, b.joint, &b.tokens));
    let truncated = finished.first().is_some_and(|h| h.tokens.len() >= cfg.max_len);
    Ok(SearchResult {
        nbest: finished
            .into_iter()
            .take(cfg.nbest)
            .map(|h| ScoredSequence {
                tokens: h.tokens,
                joint: h.joint,
                ctc: h.ctc_logprob,
                att: h.att_logprob,
            })
            .collect(),
        truncated,
    })
}

/// Beam search with a single hypothesis.
pub fn greedy_search<S: StepScorer + ?Sized>(
    log_post: &[f64],
    t: usize,
    v: usize,
    labels: &[usize],
    eos: usize,
    scorer: &mut S,
    cfg: &BeamConfig,
) -> Result<SearchResult> {
    let cfg = BeamConfig {
        beam_size: 1,
        nbest: 1,
        ..cfg.clone()
    };
    joint_beam_search(log_post, t, v, labels, eos, scorer, &cfg)
}

/// Scores one complete label sequence the way the search does.
pub fn score_sequence<S: StepScorer + ?Sized>(
    log_post: &[f64],
    t: usize,
    v: usize,
    tokens: &[usize],
    eos: usize,
    scorer: &mut S,
    lambda: f64,
) -> Result<ScoredSequence> {
    let ctc = PrefixScorer::new(log_post, t, v)?;
    let mut state = ctc.initial();
    let mut att_total = 0.0;
    for i in 0..=tokens.len() {
        let att = scorer.score(&tokens[..i])?;
        if i == tokens.len() {
            att_total += att[eos];
        } else {
            att_total += att[tokens[i]];
            state = ctc.extend(&state, tokens[i])?.0;
        }
    }
    let ctc_total = state.full_logprob();
    Ok(ScoredSequence {
        tokens: tokens.to_vec(),
        joint: joint_score(lambda, ctc_total, att_total),
        ctc: ctc_total,
        att: att_total,
    })
}
