//! E-Branchformer encoder: stride-2 convolutional subsampling, a stack of
//! blocks with parallel attention and convolutional-gating branches, and
//! intermediate CTC taps with self-conditioning.

use serde::{Deserialize, Serialize};

use crate::ctc;
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_positions, DepthwiseConv, FeedForward, Initializer, LayerNorm, Linear, MultiHeadAttention};
use crate::selfcond::{apply_adaptation, feedback_disabled, FeedbackLayer, LanguageMask};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub const SUBSAMPLE_KERNEL: usize = 3;
pub const SUBSAMPLE_STRIDE: usize = 2;

/// Tap blocks `{ceil(N/3), ceil(2N/3)}`, keeping only values in `[1, N)`.
pub fn default_taps(n: usize) -> Vec<usize> {
    let mut taps: Vec<usize> = [n.div_ceil(3), (2 * n).div_ceil(3)]
        .into_iter()
        .filter(|&k| k >= 1 && k < n)
        .collect();
    taps.dedup();
    taps
}

pub fn subsampled_len(t: usize) -> usize {
    t.div_ceil(SUBSAMPLE_STRIDE)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub vocab_size: usize,
    pub num_blocks: usize,
    pub hidden_dim: usize,
    pub attention_heads: usize,
    pub ffn_dim: usize,
    pub cgmlp_units: usize,
    pub cgmlp_kernel: usize,
    pub merge_kernel: usize,
    pub max_rel: usize,
    /// Explicit tap blocks; `None` uses [`default_taps`].
    #[serde(default)]
    pub tap_layers: Option<Vec<usize>>,
    #[serde(default = "yes")]
    pub selfcond: bool,
    /// Applied to block inputs and branch outputs in training graphs.
    #[serde(default)]
    pub dropout: f64,
}

fn yes() -> bool {
    true
}

impl EncoderConfig {
    pub fn toy(input_dim: usize, vocab_size: usize) -> Self {
        EncoderConfig {
            input_dim,
            vocab_size,
            num_blocks: 6,
            hidden_dim: 32,
            attention_heads: 4,
            ffn_dim: 64,
            cgmlp_units: 32,
            cgmlp_kernel: 7,
            merge_kernel: 3,
            max_rel: 8,
            tap_layers: None,
            selfcond: true,
            dropout: 0.1,
        }
    }

    pub fn taps(&self) -> Vec<usize> {
        self.tap_layers.clone().unwrap_or_else(|| default_taps(self.num_blocks))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::validation(format!("encoder config: {m}")));
        if self.num_blocks == 0 {
            return bad("num_blocks must be >= 1".into());
        }
        if self.hidden_dim % self.attention_heads != 0 {
            return bad("hidden_dim must be divisible by attention_heads".into());
        }
        if self.cgmlp_kernel % 2 == 0 || self.merge_kernel % 2 == 0 {
            return bad("convolution kernels must be odd".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let taps = self.taps();
        if taps.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("tap layers {taps:?} not strictly increasing"));
        }
        if taps.iter().any(|&k| k < 1 || k >= self.num_blocks) {
            return bad(format!("tap layers {taps:?} outside [1, {})", self.num_blocks));
        }
        Ok(())
    }
}

/// Convolutional gating MLP: up-projection, split, depthwise conv on one
/// half, gate, down-projection.
#[derive(Debug, Clone)]
pub struct CgMlp {
    up: Linear,
    norm: LayerNorm,
    conv: DepthwiseConv,
    pub down: Linear,
}

impl CgMlp {
    pub fn new(name: &str, dim: usize, units: usize, kernel: usize) -> Self {
        CgMlp {
            up: Linear::new(format!("{name}.up"), dim, 2 * units),
            norm: LayerNorm::new(format!("{name}.norm"), units),
            conv: DepthwiseConv::new(format!("{name}.conv"), units, kernel),
            down: Linear::new(format!("{name}.down"), units, dim),
        }
    }

    pub fn init(&self, init: &mut Initializer) {
        self.up.init(init);
        self.norm.init(init);
        self.conv.init(init);
        self.down.init(init);
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(g, p, x)?;
        let h = g.swish(h);
        let u = self.up.out_dim / 2;
        let a = g.slice(h, 1, 0, u)?;
        let b = g.slice(h, 1, u, 2 * u)?;
        let b = self.norm.forward(g, p, b)?;
        let b = self.conv.forward(g, p, b)?;
        let gated = g.mul(a, b)?;
        self.down.forward(g, p, gated)
    }
}

#[derive(Debug, Clone)]
pub struct EBranchformerBlock {
    pub dim: usize,
    pub dropout: f64,
    norm: LayerNorm,
    pub att: MultiHeadAttention,
    pub cgmlp: CgMlp,
    merge_conv: DepthwiseConv,
    pub merge: Linear,
    ff_norm: LayerNorm,
    pub ff: FeedForward,
    out_norm: LayerNorm,
}

impl EBranchformerBlock {
    pub fn new(name: &str, cfg: &EncoderConfig) -> Self {
        let d = cfg.hidden_dim;
        EBranchformerBlock {
            dim: d,
            dropout: cfg.dropout,
            norm: LayerNorm::new(format!("{name}.norm"), d),
            att: MultiHeadAttention::new(&format!("{name}.att"), d, cfg.attention_heads, Some(cfg.max_rel)),
            cgmlp: CgMlp::new(&format!("{name}.cgmlp"), d, cfg.cgmlp_units, cfg.cgmlp_kernel),
            merge_conv: DepthwiseConv::new(format!("{name}.merge_conv"), 2 * d, cfg.merge_kernel),
            merge: Linear::new(format!("{name}.merge"), 2 * d, d),
            ff_norm: LayerNorm::new(format!("{name}.ff_norm"), d),
            ff: FeedForward::new(&format!("{name}.ff"), d, cfg.ffn_dim),
            out_norm: LayerNorm::new(format!("{name}.out_norm"), d),
        }
    }

    pub fn init(&self, init: &mut Initializer) {
        self.norm.init(init);
        self.att.init(init);
        self.cgmlp.init(init);
        self.merge_conv.init(init);
        self.merge.init(init);
        self.ff_norm.init(init);
        self.ff.init(init);
        self.out_norm.init(init);
    }

    /// Fresh block whose fusion and feed-forward outputs start at zero.
    pub fn init_near_identity(&self, init: &mut Initializer) {
        self.init(init);
        self.merge.init_zero(init);
        self.ff.down.init_zero(init);
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let (_, d) = g.dims(x);
        if d != self.dim {
            return Err(Error::shape("ebranchformer_block", &[d], &[self.dim]));
        }
        let h = self.norm.forward(g, p, x)?;
        let global = self.att.forward(g, p, h, h, None)?;
        let local = self.cgmlp.forward(g, p, h)?;
        let cat = g.concat(&[global, local], 1)?;
        let mixed = self.merge_conv.forward(g, p, cat)?;
        let fused = g.add(cat, mixed)?;
        let fused = self.merge.forward(g, p, fused)?;
        let fused = g.drop(fused, self.dropout);
        let x = g.add(x, fused)?;

        let h = self.ff_norm.forward(g, p, x)?;
        let h = self.ff.forward(g, p, h)?;
        let h = g.drop(h, self.dropout);
        let x = g.add(x, h)?;
        self.out_norm.forward(g, p, x)
    }
}

/// Stride-2 convolution, swish, linear projection.
#[derive(Debug, Clone)]
pub struct ConvSubsample {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    proj: Linear,
}

impl ConvSubsample {
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        ConvSubsample {
            name: "enc.subsample".into(),
            in_dim,
            out_dim,
            proj: Linear::new("enc.subsample.proj", out_dim, out_dim),
        }
    }

    pub fn init(&self, init: &mut Initializer) {
        let bound = 1.0 / ((SUBSAMPLE_KERNEL * self.in_dim) as f64).sqrt();
        init.uniform(
            "enc.subsample.conv.weight",
            &[SUBSAMPLE_KERNEL * self.in_dim, self.out_dim],
            bound,
        );
        init.constant("enc.subsample.conv.bias", &[self.out_dim], 0.0);
        self.proj.init(init);
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let (t, f) = g.dims(x);
        if t < 2 {
            return Err(Error::InputTooShort { needed: 2, got: t });
        }
        if f != self.in_dim {
            return Err(Error::shape("conv_subsample", &[t, f], &[self.in_dim]));
        }
        let w = g.param(p, "enc.subsample.conv.weight")?;
        let b = g.param(p, "enc.subsample.conv.bias")?;
        let h = g.conv1d(x, w, SUBSAMPLE_KERNEL, SUBSAMPLE_STRIDE)?;
        let h = g.add(h, b)?;
        let h = g.swish(h);
        self.proj.forward(g, p, h)
    }
}

/// Graph handles produced by [`Encoder::forward`].
#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub latent: Var,
    /// `(tap block, log-posteriors before adaptation)`.
    pub taps: Vec<(usize, Var)>,
    /// Adapted tap posteriors actually fed back, when a mask was applied.
    pub adapted_taps: Vec<(usize, Vec<f64>)>,
    pub final_log_post: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// `T'×D` at 50 frames per second.
    pub latent: Tensor,
    /// Per tap block, the `T'×V` log-posteriors fed back into the stack.
    pub tap_posteriors: Vec<(usize, Tensor)>,
    /// Final-layer CTC log-posteriors, `T'×V`.
    pub final_log_post: Tensor,
    pub subsampled_length: usize,
}

impl EncoderOutput {
    pub fn vocab_size(&self) -> usize {
        self.final_log_post.shape()[1]
    }

    /// Greedy CTC transcript of a tap (or of the final layer for `None`).
    pub fn greedy(&self, tap: Option<usize>) -> Option<Vec<usize>> {
        let lp = match tap {
            None => &self.final_log_post,
            Some(k) => &self.tap_posteriors.iter().find(|(t, _)| *t == k)?.1,
        };
        let (t, v) = lp.matrix_dims();
        Some(ctc::ctc_greedy(lp.data(), t, v))
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub subsample: ConvSubsample,
    pub blocks: Vec<EBranchformerBlock>,
    pub feedback: Vec<(usize, FeedbackLayer)>,
    pub ctc_head: Linear,
}

pub fn block_prefix(i: usize) -> String {
    format!("enc.blocks.{i}.")
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.num_blocks)
            .map(|i| EBranchformerBlock::new(&format!("enc.blocks.{i}"), &cfg))
            .collect();
        let feedback = cfg
            .taps()
            .into_iter()
            .map(|k| (k, FeedbackLayer::new(k, cfg.vocab_size, cfg.hidden_dim)))
            .collect();
        Ok(Encoder {
            subsample: ConvSubsample::new(cfg.input_dim, cfg.hidden_dim),
            ctc_head: Linear::new("ctc.head", cfg.hidden_dim, cfg.vocab_size),
            blocks,
            feedback,
            cfg,
        })
    }

    pub fn init(&self, init: &mut Initializer) {
        self.subsample.init(init);
        for b in &self.blocks {
            b.init(init);
        }
        for (_, fb) in &self.feedback {
            fb.init(init);
        }
        self.ctc_head.init(init);
    }

    pub fn taps(&self) -> Vec<usize> {
        self.feedback.iter().map(|(k, _)| *k).collect()
    }

    /// Shared CTC head followed by log-softmax.
    pub fn ctc_log_post(&self, g: &mut Graph, p: &ParamStore, h: Var) -> Result<Var> {
        let logits = self.ctc_head.forward(g, p, h)?;
        g.log_softmax(logits)
    }

    /// Builds the encoder graph. `adaptation` rewrites each tap posterior
    /// before it is fed back; it cuts the gradient through the feedback path
    /// and is meant for inference.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        x: Var,
        adaptation: Option<&LanguageMask>,
    ) -> Result<EncoderVars> {
        if let Some(m) = adaptation {
            if m.len() != self.cfg.vocab_size {
                return Err(Error::Vocab(format!(
                    "language mask has {} entries, vocabulary has {}",
                    m.len(),
                    self.cfg.vocab_size
                )));
            }
        }
        let h = self.subsample.forward(g, p, x)?;
        // absolute positions give the decoder's cross-attention something to align on
        let (t, d) = g.dims(h);
        let pos = g.constant(t, d, sinusoidal_positions(t, d))?;
        let h = g.add(h, pos)?;
        let mut h = g.drop(h, self.cfg.dropout);
        let mut taps = Vec::new();
        let mut adapted_taps = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(g, p, h)?;
            let layer = i + 1;
            let Some((_, fb)) = self.feedback.iter().find(|(k, _)| *k == layer) else {
                continue;
            };
            let lp = self.ctc_log_post(g, p, h)?;
            taps.push((layer, lp));
            let fed = match adaptation {
                Some(mask) if !mask.is_neutral() => {
                    let (t, v) = g.dims(lp);
                    let adapted = apply_adaptation(g.value(lp), t, v, mask)?;
                    adapted_taps.push((layer, adapted.clone()));
                    g.constant(t, v, adapted)?
                }
                _ => lp,
            };
            h = if self.cfg.selfcond {
                fb.forward(g, p, h, fed)?
            } else {
                feedback_disabled(g, h)
            };
        }
        let final_log_post = self.ctc_log_post(g, p, h)?;
        Ok(EncoderVars {
            latent: h,
            taps,
            adapted_taps,
            final_log_post,
        })
    }

    /// Evaluation-mode encoding of a `T×F` feature matrix.
    pub fn encode(
        &self,
        p: &ParamStore,
        features: &Tensor,
        adaptation: Option<&LanguageMask>,
    ) -> Result<EncoderOutput> {
        let mut g = Graph::new(features.precision());
        let x = g.constant_tensor(features);
        let vars = self.forward(&mut g, p, x, adaptation)?;
        Ok(self.collect(&g, &vars))
    }

    pub fn collect(&self, g: &Graph, vars: &EncoderVars) -> EncoderOutput {
        let latent = g.to_tensor(vars.latent);
        let subsampled_length = latent.shape()[0];
        let tap_posteriors = vars
            .taps
            .iter()
            .map(|&(k, v)| {
                let t = match vars.adapted_taps.iter().find(|(a, _)| *a == k) {
                    Some((_, data)) => {
                        let (r, c) = g.dims(v);
                        Tensor::from_matrix(r, c, data.clone(), g.precision()).expect("tap dims")
                    }
                    None => g.to_tensor(v),
                };
                (k, t)
            })
            .collect();
        EncoderOutput {
            latent,
            tap_posteriors,
            final_log_post: g.to_tensor(vars.final_log_post),
            subsampled_length,
        }
    }
}

/// Relative Frobenius distance `|a - b| / |b|`.
pub fn relative_change(a: &Tensor, b: &Tensor) -> f64 {
    let num: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.data().iter().map(|y| y * y).sum();
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}
