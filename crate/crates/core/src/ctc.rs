//! Connectionist temporal classification: loss, collapse rule, greedy
//! decoding, and incremental prefix scoring for joint decoding.
//!
//! All probability arithmetic is in log space. Posterior matrices are
//! row-major `T×V` slices of log-probabilities with blank at id 0.

use crate::error::{Error, Result};
use crate::tensor::{logaddexp, CustomOp, CustomOutput, Graph, Var};
use crate::vocab::BLANK_ID;

const NEG_INF: f64 = f64::NEG_INFINITY;

/// Frames needed to emit `labels`: one per label plus a blank between repeats.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

fn validate_labels(labels: &[usize], vocab_size: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l == BLANK_ID || l >= vocab_size) {
        return Err(Error::validation(format!("invalid CTC label id {bad}")));
    }
    Ok(())
}

/// Negative log-likelihood and its gradient with respect to the log-posteriors.
///
/// The gradient treats every entry of `log_post` as an independent input, so
/// it composes with whatever normalization produced the posteriors.
pub fn ctc_loss_with_grad(log_post: &[f64], t: usize, v: usize, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    if t == 0 || log_post.len() != t * v {
        return Err(Error::shape("ctc_loss", &[t, v], &[log_post.len()]));
    }
    validate_labels(labels, v)?;
    let required = min_frames(labels);
    if t < required {
        return Err(Error::ImpossibleAlignment {
            frames: t,
            labels: labels.len(),
            required,
        });
    }
    let s_len = 2 * labels.len() + 1;
    let ext: Vec<usize> = (0..s_len)
        .map(|s| if s % 2 == 0 { BLANK_ID } else { labels[s / 2] })
        .collect();
    let y = |ti: usize, k: usize| log_post[ti * v + k];
    let skip_ok = |s: usize| s >= 2 && ext[s] != BLANK_ID && ext[s] != ext[s - 2];

    let mut alpha = vec![NEG_INF; t * s_len];
    alpha[0] = y(0, ext[0]);
    if s_len > 1 {
        alpha[1] = y(0, ext[1]);
    }
    for ti in 1..t {
        for s in 0..s_len {
            let prev = &alpha[(ti - 1) * s_len..ti * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = logaddexp(a, prev[s - 1]);
            }
            if skip_ok(s) {
                a = logaddexp(a, prev[s - 2]);
            }
            alpha[ti * s_len + s] = if a == NEG_INF { NEG_INF } else { a + y(ti, ext[s]) };
        }
    }
    let last = &alpha[(t - 1) * s_len..];
    let log_p = if s_len > 1 {
        logaddexp(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    };
    if log_p == NEG_INF {
        return Err(Error::Numeric {
            op: "ctc_loss",
            detail: "zero total alignment probability".into(),
        });
    }

    // beta excludes the emission at its own frame
    let mut beta = vec![NEG_INF; t * s_len];
    beta[(t - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(t - 1) * s_len + s_len - 2] = 0.0;
    }
    for ti in (0..t - 1).rev() {
        for s in 0..s_len {
            let nxt = |s2: usize| beta[(ti + 1) * s_len + s2] + y(ti + 1, ext[s2]);
            let mut b = nxt(s);
            if s + 1 < s_len {
                b = logaddexp(b, nxt(s + 1));
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                b = logaddexp(b, nxt(s + 2));
            }
            beta[ti * s_len + s] = b;
        }
    }

    let mut grad = vec![0.0; t * v];
    for ti in 0..t {
        for s in 0..s_len {
            let gamma = alpha[ti * s_len + s] + beta[ti * s_len + s] - log_p;
            if gamma > NEG_INF {
                grad[ti * v + ext[s]] -= gamma.exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// CTC loss value only.
pub fn ctc_loss_value(log_post: &[f64], t: usize, v: usize, labels: &[usize]) -> Result<f64> {
    ctc_loss_with_grad(log_post, t, v, labels).map(|(l, _)| l)
}

/// Graph primitive wrapping [`ctc_loss_with_grad`].
pub struct CtcLossOp<'a> {
    pub labels: &'a [usize],
}

pub const CTC_LOSS_OP: &str = "ctc_loss";

impl CustomOp for CtcLossOp<'_> {
    fn name(&self) -> &'static str {
        CTC_LOSS_OP
    }

    fn forward(&self, inputs: &[(usize, usize, &[f64])]) -> Result<CustomOutput> {
        let &[(t, v, lp)] = inputs else {
            return Err(Error::validation("ctc_loss takes exactly one input"));
        };
        let (loss, grad) = ctc_loss_with_grad(lp, t, v, self.labels)?;
        Ok(CustomOutput {
            rows: 1,
            cols: 1,
            value: vec![loss],
            backward: Box::new(move |g: &[f64]| vec![Some(grad.iter().map(|x| x * g[0]).collect())]),
        })
    }
}

/// Differentiable CTC loss of a `T×V` log-posterior node. The graph must have
/// the `ctc_loss` primitive registered.
pub fn ctc_loss(g: &mut Graph, log_post: Var, labels: &[usize]) -> Result<Var> {
    g.custom(&CtcLossOp { labels }, &[log_post])
}

/// Merges consecutive repeats, then drops blanks.
pub fn ctc_collapse(frame_ids: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &id in frame_ids {
        if Some(id) != prev && id != BLANK_ID {
            out.push(id);
        }
        prev = Some(id);
    }
    out
}

/// Per-frame argmax with ties going to the lowest id.
pub fn frame_argmax(log_post: &[f64], t: usize, v: usize) -> Vec<usize> {
    (0..t)
        .map(|ti| {
            let row = &log_post[ti * v..(ti + 1) * v];
            let mut best = 0;
            for k in 1..v {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn ctc_greedy(log_post: &[f64], t: usize, v: usize) -> Vec<usize> {
    ctc_collapse(&frame_argmax(log_post, t, v))
}

/// Forward variables of a label prefix over all frames.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixState {
    /// log P(prefix emitted through frame t, last frame non-blank)
    pub nb: Vec<f64>,
    /// log P(prefix emitted through frame t, last frame blank)
    pub b: Vec<f64>,
    pub last: Option<usize>,
}

impl PrefixState {
    /// Probability that the whole utterance collapses to exactly this prefix.
    pub fn full_logprob(&self) -> f64 {
        let t = self.nb.len() - 1;
        logaddexp(self.nb[t], self.b[t])
    }
}

/// Incremental prefix probabilities over one posterior matrix.
pub struct PrefixScorer<'a> {
    log_post: &'a [f64],
    t: usize,
    v: usize,
}

impl<'a> PrefixScorer<'a> {
    pub fn new(log_post: &'a [f64], t: usize, v: usize) -> Result<Self> {
        if t == 0 || log_post.len() != t * v {
            return Err(Error::shape("prefix_scorer", &[t, v], &[log_post.len()]));
        }
        Ok(PrefixScorer { log_post, t, v })
    }

    pub fn frames(&self) -> usize {
        self.t
    }

    #[inline]
    fn y(&self, ti: usize, k: usize) -> f64 {
        self.log_post[ti * self.v + k]
    }

    /// State of the empty prefix: all-blank paths.
    pub fn initial(&self) -> PrefixState {
        let mut b = vec![0.0; self.t];
        let mut acc = 0.0;
        for (ti, slot) in b.iter_mut().enumerate() {
            acc += self.y(ti, BLANK_ID);
            *slot = acc;
        }
        PrefixState {
            nb: vec![NEG_INF; self.t],
            b,
            last: None,
        }
    }

    /// Extends `state` by label `c`, returning the new state and
    /// log P(output starts with prefix·c).
    pub fn extend(&self, state: &PrefixState, c: usize) -> Result<(PrefixState, f64)> {
        if c == BLANK_ID || c >= self.v {
            return Err(Error::validation(format!("cannot extend a CTC prefix with id {c}")));
        }
        let mut nb = vec![NEG_INF; self.t];
        let mut b = vec![NEG_INF; self.t];
        if state.last.is_none() {
            nb[0] = self.y(0, c);
        }
        let mut psi = nb[0];
        for ti in 1..self.t {
            let from_prefix = if state.last == Some(c) {
                state.b[ti - 1]
            } else {
                logaddexp(state.b[ti - 1], state.nb[ti - 1])
            };
            let yc = self.y(ti, c);
            nb[ti] = add(logaddexp(nb[ti - 1], from_prefix), yc);
            b[ti] = add(logaddexp(b[ti - 1], nb[ti - 1]), self.y(ti, BLANK_ID));
            psi = logaddexp(psi, add(from_prefix, yc));
        }
        Ok((PrefixState { nb, b, last: Some(c) }, psi))
    }
}

#[inline]
fn add(a: f64, b: f64) -> f64 {
    if a == NEG_INF || b == NEG_INF {
        NEG_INF
    } else {
        a + b
    }
}
