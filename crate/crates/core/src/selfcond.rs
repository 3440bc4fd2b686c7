//! Self-conditioned CTC feedback and language-mask adaptation of
//! intermediate CTC posteriors.

use crate::error::{Error, Result};
use crate::nn::{Initializer, Linear};
use crate::tensor::{log_softmax_rows, Graph, ParamStore, Var};
use crate::vocab::{Vocab, BLANK_ID};

pub const DEFAULT_EPSILON: f64 = 1e-4;

/// Per-token multiplicative weights applied to tap posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageMask {
    pub language: String,
    weights: Vec<f64>,
}

impl LanguageMask {
    /// Weights must lie in `[0, 1]`, blank must be 1, and some other token must be 1.
    pub fn from_weights(language: impl Into<String>, weights: Vec<f64>) -> Result<Self> {
        if weights.len() < 2 {
            return Err(Error::validation("language mask needs at least two tokens"));
        }
        if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::validation("language mask weights must be in [0, 1]"));
        }
        if weights[BLANK_ID] != 1.0 {
            return Err(Error::validation("blank must have weight 1"));
        }
        if !weights.iter().skip(1).any(|&w| w == 1.0) {
            return Err(Error::validation("language mask allows no token"));
        }
        Ok(LanguageMask {
            language: language.into(),
            weights,
        })
    }

    /// All-ones mask.
    pub fn neutral(language: impl Into<String>, vocab_size: usize) -> Self {
        LanguageMask {
            language: language.into(),
            weights: vec![1.0; vocab_size],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn is_neutral(&self) -> bool {
        self.weights.iter().all(|&w| w == 1.0)
    }

    pub fn allows(&self, id: usize) -> bool {
        self.weights.get(id) == Some(&1.0)
    }
}

/// Weight 1 for blank and the language's charset; `epsilon` for every other
/// token, including the decoder-side specials CTC should never emit.
pub fn build_language_mask(language: &str, vocab: &Vocab, epsilon: f64) -> Result<LanguageMask> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::validation(format!("epsilon must be in (0, 1], got {epsilon}")));
    }
    let charset = vocab.charset(language)?;
    let weights = (0..vocab.len())
        .map(|id| {
            if id == BLANK_ID || charset.binary_search(&id).is_ok() {
                1.0
            } else {
                epsilon
            }
        })
        .collect();
    LanguageMask::from_weights(language, weights)
}

/// Row-wise `log(normalize(exp(lp) ⊙ w))`. A neutral mask returns the input unchanged.
pub fn apply_adaptation(log_post: &[f64], t: usize, v: usize, mask: &LanguageMask) -> Result<Vec<f64>> {
    if log_post.len() != t * v {
        return Err(Error::shape("apply_adaptation", &[t, v], &[log_post.len()]));
    }
    if mask.len() != v {
        return Err(Error::Vocab(format!(
            "language mask has {} entries, posteriors have {v}",
            mask.len()
        )));
    }
    if mask.is_neutral() {
        return Ok(log_post.to_vec());
    }
    let logw: Vec<f64> = mask.weights.iter().map(|w| w.ln()).collect();
    let shifted: Vec<f64> = log_post
        .chunks_exact(v)
        .flat_map(|row| row.iter().zip(&logw).map(|(a, b)| a + b))
        .collect();
    Ok(log_softmax_rows(&shifted, t, v))
}

/// Feeds a tap's posteriors back into the hidden stream:
/// `layer_norm(hidden + proj(softmax(tap)))`.
#[derive(Debug, Clone)]
pub struct FeedbackLayer {
    pub proj: Linear,
}

impl FeedbackLayer {
    pub fn new(tap: usize, vocab_size: usize, dim: usize) -> Self {
        FeedbackLayer {
            proj: Linear::new(format!("enc.feedback.L{tap}"), vocab_size, dim),
        }
    }

    pub fn init(&self, init: &mut Initializer) {
        self.proj.init(init);
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, hidden: Var, tap_log_post: Var) -> Result<Var> {
        let (t, _) = g.dims(hidden);
        let (tt, v) = g.dims(tap_log_post);
        if t != tt || v != self.proj.in_dim {
            return Err(Error::shape("selfcond_feedback", &[t, self.proj.out_dim], &[tt, v]));
        }
        let probs = g.softmax(tap_log_post)?;
        let fb = self.proj.forward(g, p, probs)?;
        let sum = g.add(hidden, fb)?;
        Ok(g.layer_norm(sum, crate::nn::LN_EPS))
    }
}

/// The same normalization applied when self-conditioning is disabled.
pub fn feedback_disabled(g: &mut Graph, hidden: Var) -> Var {
    g.layer_norm(hidden, crate::nn::LN_EPS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use indexmap::IndexMap;

    fn vocab() -> Vocab {
        let mut m = IndexMap::new();
        m.insert("l1".to_string(), vec!["a".into(), "b".into()]);
        m.insert("l2".to_string(), vec!["b".into(), "c".into()]);
        Vocab::from_charsets(&m).unwrap()
    }

    #[test]
    fn mask_construction() {
        let v = vocab();
        let m = build_language_mask("l1", &v, 1e-3).unwrap();
        assert_eq!(&m.weights()[..4], &[1.0, 1.0, 1.0, 1e-3]);
        assert!(m.weights()[4..].iter().all(|&w| w == 1e-3));
        assert!(build_language_mask("l1", &v, 0.0).is_err());
        assert!(matches!(
            build_language_mask("zz", &v, 1e-4),
            Err(Error::UnknownLanguage(_))
        ));
    }

    #[test]
    fn uniform_posterior_closed_form() {
        let lp = vec![0.25f64.ln(); 4];
        let m = LanguageMask::from_weights("x", vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let out = apply_adaptation(&lp, 1, 4, &m).unwrap();
        let p: Vec<f64> = out.iter().map(|x| x.exp()).collect();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
        assert_eq!(&p[2..], &[0.0, 0.0]);
    }

    #[test]
    fn neutral_mask_is_identity() {
        let lp = log_softmax_rows(&[0.3, -1.0, 2.0, 0.1, 0.0, 0.5], 2, 3);
        let out = apply_adaptation(&lp, 2, 3, &LanguageMask::neutral("x", 3)).unwrap();
        assert_eq!(out, lp);
    }
}
