//! Transformer decoder over token prefixes `<sos> <lang> y1 y2 ...`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{causal_mask, sinusoidal_positions, FeedForward, Initializer, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub attention_heads: usize,
    pub ffn_dim: usize,
    /// Longest accepted input prefix, special tokens included.
    pub max_target_len: usize,
    /// Applied to the embedded input and sublayer outputs in training graphs.
    #[serde(default)]
    pub dropout: f64,
    /// Share of target mass spread uniformly over the vocabulary.
    #[serde(default)]
    pub label_smoothing: f64,
    /// Probability of replacing a teacher-forced input label with a random
    /// token from `input_noise_ids` in training graphs.
    #[serde(default)]
    pub input_noise: f64,
    #[serde(default)]
    pub input_noise_ids: Vec<usize>,
}

impl DecoderConfig {
    pub fn toy(vocab_size: usize) -> Self {
        DecoderConfig {
            vocab_size,
            num_layers: 2,
            hidden_dim: 32,
            attention_heads: 4,
            ffn_dim: 64,
            max_target_len: 64,
            dropout: 0.1,
            label_smoothing: 0.1,
            input_noise: 0.0,
            input_noise_ids: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::validation("decoder needs at least one layer"));
        }
        if self.hidden_dim % self.attention_heads != 0 {
            return Err(Error::validation("decoder hidden_dim must be divisible by heads"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::validation(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if !(0.0..1.0).contains(&self.input_noise) {
            return Err(Error::validation(format!(
                "input_noise {} outside [0, 1)",
                self.input_noise
            )));
        }
        if self.input_noise_ids.iter().any(|&t| t >= self.vocab_size) {
            return Err(Error::validation("input_noise_ids outside the vocabulary"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::validation(format!(
                "decoder dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    self_norm: LayerNorm,
    pub self_att: MultiHeadAttention,
    cross_norm: LayerNorm,
    pub cross_att: MultiHeadAttention,
    ff_norm: LayerNorm,
    ff: FeedForward,
    dropout: f64,
}

impl DecoderLayer {
    fn new(name: &str, cfg: &DecoderConfig) -> Self {
        let d = cfg.hidden_dim;
        let h = cfg.attention_heads;
        DecoderLayer {
            self_norm: LayerNorm::new(format!("{name}.self_norm"), d),
            self_att: MultiHeadAttention::new(&format!("{name}.self_att"), d, h, None),
            cross_norm: LayerNorm::new(format!("{name}.cross_norm"), d),
            cross_att: MultiHeadAttention::new(&format!("{name}.cross_att"), d, h, None),
            ff_norm: LayerNorm::new(format!("{name}.ff_norm"), d),
            ff: FeedForward::new(&format!("{name}.ff"), d, cfg.ffn_dim),
            dropout: cfg.dropout,
        }
    }

    fn init(&self, init: &mut Initializer) {
        self.self_norm.init(init);
        self.self_att.init(init);
        self.cross_norm.init(init);
        self.cross_att.init(init);
        self.ff_norm.init(init);
        self.ff.init(init);
    }

    fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var, memory: Var, mask: Var) -> Result<Var> {
        let h = self.self_norm.forward(g, p, x)?;
        let h = self.self_att.forward(g, p, h, h, Some(mask))?;
        let h = g.drop(h, self.dropout);
        let x = g.add(x, h)?;
        let h = self.cross_norm.forward(g, p, x)?;
        let h = self.cross_att.forward(g, p, h, memory, None)?;
        let h = g.drop(h, self.dropout);
        let x = g.add(x, h)?;
        let h = self.ff_norm.forward(g, p, x)?;
        let h = self.ff.forward(g, p, h)?;
        let h = g.drop(h, self.dropout);
        g.add(x, h)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub layers: Vec<DecoderLayer>,
    out_norm: LayerNorm,
    out: Linear,
}

impl Decoder {
    pub fn new(cfg: DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.num_layers)
            .map(|i| DecoderLayer::new(&format!("dec.layers.{i}"), &cfg))
            .collect();
        Ok(Decoder {
            out_norm: LayerNorm::new("dec.out_norm", cfg.hidden_dim),
            out: Linear::new("dec.out", cfg.hidden_dim, cfg.vocab_size),
            layers,
            cfg,
        })
    }

    pub fn init(&self, init: &mut Initializer) {
        let d = self.cfg.hidden_dim;
        init.uniform("dec.embed", &[self.cfg.vocab_size, d], 1.0);
        for l in &self.layers {
            l.init(init);
        }
        self.out_norm.init(init);
        self.out.init(init);
    }

    /// Next-token log-probabilities at every prefix position (`L×V`).
    pub fn forward(&self, g: &mut Graph, p: &ParamStore, memory: Var, prefix: &[usize]) -> Result<Var> {
        let n = prefix.len();
        if n == 0 {
            return Err(Error::validation("decoder prefix is empty"));
        }
        if n > self.cfg.max_target_len {
            return Err(Error::Length(format!(
                "prefix of {n} tokens exceeds max_target_len {}",
                self.cfg.max_target_len
            )));
        }
        if let Some(&bad) = prefix.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Vocab(format!("token id {bad} outside vocabulary")));
        }
        let d = self.cfg.hidden_dim;
        let table = g.param(p, "dec.embed")?;
        let emb = g.embedding(table, prefix)?;
        let pos = g.constant(n, d, sinusoidal_positions(n, d))?;
        let x = g.add(emb, pos)?;
        let mut x = g.drop(x, self.cfg.dropout);
        let mask = g.constant(n, n, causal_mask(n))?;
        for l in &self.layers {
            x = l.forward(g, p, x, memory, mask)?;
        }
        let x = self.out_norm.forward(g, p, x)?;
        let logits = self.out.forward(g, p, x)?;
        g.log_softmax(logits)
    }

    /// Mean cross-entropy of `target[1..]` given `target[..n-1]`, against
    /// label-smoothed targets.
    pub fn teacher_forced_loss(&self, g: &mut Graph, p: &ParamStore, memory: Var, target: &[usize]) -> Result<Var> {
        if target.len() < 2 {
            return Err(Error::validation("decoder target needs at least two tokens"));
        }
        let n = target.len() - 1;
        let mut input = target[..n].to_vec();
        let noise = self.cfg.input_noise;
        let ids = &self.cfg.input_noise_ids;
        if noise > 0.0 && !ids.is_empty() {
            if let Some(rng) = g.training_rng() {
                for tok in input.iter_mut().skip(2) {
                    if rng.gen::<f64>() < noise {
                        *tok = ids[rng.gen_range(0..ids.len())];
                    }
                }
            }
        }
        let lp = self.forward(g, p, memory, &input)?;
        // the inputs are log-probabilities, so cross-entropy's own
        // log-softmax leaves them unchanged
        let ce = g.cross_entropy(lp, &target[1..])?;
        let eps = self.cfg.label_smoothing;
        if eps == 0.0 {
            return Ok(ce);
        }
        let uniform = g.mean(lp);
        let a = g.scale(ce, 1.0 - eps);
        let b = g.scale(uniform, -eps);
        g.add(a, b)
    }

    /// Log-probabilities of the token following `prefix`.
    pub fn decode_step(&self, p: &ParamStore, memory: &Tensor, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new(memory.precision());
        let m = g.constant_tensor(memory);
        let lp = self.forward(&mut g, p, m, prefix)?;
        let v = self.cfg.vocab_size;
        let vals = g.value(lp);
        Ok(vals[vals.len() - v..].to_vec())
    }
}
