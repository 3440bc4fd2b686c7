//! Conformer feature frontend with masked-prediction and contrastive
//! pretraining objectives.
//!
//! Targets come from a fixed codebook over input frames (hard nearest
//! neighbour, no gradient into the codebook). The contrastive term scores
//! projected outputs of one intermediate block against the codebook vector of
//! the true target and of distractors drawn from other masked frames of the
//! same utterance. The masked-prediction term classifies the target code from
//! the final block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{DepthwiseConv, FeedForward, Initializer, LayerNorm, Linear, MultiHeadAttention};
use crate::rng::WkRng;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Frontend frame rate; the frontend never changes the number of frames.
pub const FRAME_RATE: u32 = 100;
pub const PREFIX: &str = "ssl.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SslConfig {
    pub input_dim: usize,
    pub num_blocks: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub conv_kernel: usize,
    pub max_rel: usize,
    pub mask_prob: f64,
    pub mask_span: usize,
    pub codebook_size: usize,
    pub num_distractors: usize,
    pub contrastive_weight: f64,
    pub mlm_weight: f64,
    /// 1-based block whose output feeds the contrastive objective.
    pub contrastive_tap_block: usize,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            input_dim: 16,
            num_blocks: 4,
            hidden_dim: 32,
            heads: 4,
            ffn_dim: 64,
            conv_kernel: 5,
            max_rel: 8,
            mask_prob: 0.15,
            mask_span: 3,
            codebook_size: 16,
            num_distractors: 4,
            contrastive_weight: 1.0,
            mlm_weight: 1.0,
            contrastive_tap_block: 2,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::validation(format!("ssl config: {m}")));
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return bad("mask_prob must be in (0, 1)");
        }
        if self.mask_span < 1 {
            return bad("mask_span must be >= 1");
        }
        if self.codebook_size < 2 {
            return bad("codebook_size must be >= 2");
        }
        if self.contrastive_tap_block < 1 || self.contrastive_tap_block > self.num_blocks {
            return bad("contrastive_tap_block must be in [1, num_blocks]");
        }
        if self.hidden_dim % self.heads != 0 {
            return bad("hidden_dim must be divisible by heads");
        }
        if self.conv_kernel % 2 == 0 {
            return bad("conv_kernel must be odd");
        }
        Ok(())
    }
}

/// Frame-level features at 100 frames per second.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatures {
    pub frames: Tensor,
    pub language: String,
}

impl AudioFeatures {
    pub fn new(frames: Tensor, language: impl Into<String>) -> Result<Self> {
        if frames.shape().len() != 2 {
            return Err(Error::validation("features must be a T×F matrix"));
        }
        Ok(AudioFeatures {
            frames,
            language: language.into(),
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn frame_rate(&self) -> u32 {
        FRAME_RATE
    }
}

/// Sorted masked frame indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskSet {
    pub masked_indices: Vec<usize>,
}

impl MaskSet {
    /// Union of `[s, s + span)` for each start, clipped at `t`.
    pub fn from_starts(starts: &[usize], span: usize, t: usize) -> Self {
        let mut hit = vec![false; t];
        for &s in starts {
            for h in hit.iter_mut().take((s + span).min(t)).skip(s) {
                *h = true;
            }
        }
        MaskSet {
            masked_indices: (0..t).filter(|&i| hit[i]).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.masked_indices.is_empty()
    }

    pub fn len(&self) -> usize {
        self.masked_indices.len()
    }
}

/// Draws span starts: each frame independently with probability `mask_prob`.
pub fn draw_mask(t: usize, cfg: &SslConfig, rng: &mut WkRng) -> Result<MaskSet> {
    if t < cfg.mask_span {
        return Err(Error::InputTooShort {
            needed: cfg.mask_span,
            got: t,
        });
    }
    let starts: Vec<usize> = (0..t).filter(|_| rng.gen::<f64>() < cfg.mask_prob).collect();
    Ok(MaskSet::from_starts(&starts, cfg.mask_span, t))
}

/// Replaces masked frames with the learned mask embedding.
pub fn apply_span_mask(g: &mut Graph, p: &ParamStore, x: Var, mask: &MaskSet) -> Result<Var> {
    let (t, _) = g.dims(x);
    let mut keep = vec![1.0; t];
    let mut hit = vec![0.0; t];
    for &i in &mask.masked_indices {
        keep[i] = 0.0;
        hit[i] = 1.0;
    }
    let keep = g.constant(t, 1, keep)?;
    let hit = g.constant(t, 1, hit)?;
    let emb = g.param(p, "ssl.mask_emb")?;
    let kept = g.mul(x, keep)?;
    let fill = g.matmul(hit, emb)?;
    g.add(kept, fill)
}

/// Index of the nearest codebook row; ties go to the lowest index.
pub fn quantize(frame: &[f64], codebook: &[f64], dim: usize) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, code) in codebook.chunks_exact(dim).enumerate() {
        let d: f64 = code.iter().zip(frame).map(|(c, x)| (c - x) * (c - x)).sum();
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

/// k-means over a pool of frames, seeded from distinct random frames.
pub fn fit_codebook(frames: &[Vec<f64>], k: usize, iters: usize, rng: &mut WkRng) -> Result<Vec<f64>> {
    let dim = frames.first().map(Vec::len).unwrap_or(0);
    if frames.len() < k || dim == 0 {
        return Err(Error::validation(format!(
            "codebook needs at least {k} frames, got {}",
            frames.len()
        )));
    }
    let picks = rand::seq::index::sample(rng, frames.len(), k);
    let mut codebook: Vec<f64> = picks.iter().flat_map(|i| frames[i].clone()).collect();
    for _ in 0..iters {
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for f in frames {
            let c = quantize(f, &codebook, dim);
            counts[c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(f) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    codebook[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
    }
    Ok(codebook)
}

/// One Conformer block: half-step FFN, self-attention, convolution module,
/// half-step FFN, each residual, then a final layer norm.
#[derive(Debug, Clone)]
pub struct ConformerBlock {
    pub dim: usize,
    ff1_norm: LayerNorm,
    ff1: FeedForward,
    att_norm: LayerNorm,
    att: MultiHeadAttention,
    conv_norm: LayerNorm,
    conv_in: Linear,
    conv_dw: DepthwiseConv,
    conv_out: Linear,
    ff2_norm: LayerNorm,
    ff2: FeedForward,
    out_norm: LayerNorm,
}

impl ConformerBlock {
    pub fn new(name: &str, dim: usize, heads: usize, ffn_dim: usize, kernel: usize, max_rel: usize) -> Self {
        ConformerBlock {
            dim,
            ff1_norm: LayerNorm::new(format!("{name}.ff1_norm"), dim),
            ff1: FeedForward::new(&format!("{name}.ff1"), dim, ffn_dim),
            att_norm: LayerNorm::new(format!("{name}.att_norm"), dim),
            att: MultiHeadAttention::new(&format!("{name}.att"), dim, heads, Some(max_rel)),
            conv_norm: LayerNorm::new(format!("{name}.conv_norm"), dim),
            conv_in: Linear::new(format!("{name}.conv_in"), dim, 2 * dim),
            conv_dw: DepthwiseConv::new(format!("{name}.conv_dw"), dim, kernel),
            conv_out: Linear::new(format!("{name}.conv_out"), dim, dim),
            ff2_norm: LayerNorm::new(format!("{name}.ff2_norm"), dim),
            ff2: FeedForward::new(&format!("{name}.ff2"), dim, ffn_dim),
            out_norm: LayerNorm::new(format!("{name}.out_norm"), dim),
        }
    }

    pub fn init(&self, init: &mut Initializer) {
        self.ff1_norm.init(init);
        self.ff1.init(init);
        self.att_norm.init(init);
        self.att.init(init);
        self.conv_norm.init(init);
        self.conv_in.init(init);
        self.conv_dw.init(init);
        self.conv_out.init(init);
        self.ff2_norm.init(init);
        self.ff2.init(init);
        self.out_norm.init(init);
    }

    /// Names of the output projections of every residual branch.
    pub fn residual_branch_outputs(&self) -> Vec<Linear> {
        vec![
            self.ff1.down.clone(),
            self.att.out.clone(),
            self.conv_out.clone(),
            self.ff2.down.clone(),
        ]
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        let (_, d) = g.dims(x);
        if d != self.dim {
            return Err(Error::shape("conformer_block", &[d], &[self.dim]));
        }
        let h = self.ff1_norm.forward(g, p, x)?;
        let h = self.ff1.forward(g, p, h)?;
        let h = g.scale(h, 0.5);
        let x = g.add(x, h)?;

        let h = self.att_norm.forward(g, p, x)?;
        let h = self.att.forward(g, p, h, h, None)?;
        let x = g.add(x, h)?;

        let h = self.conv_norm.forward(g, p, x)?;
        let h = self.conv_in.forward(g, p, h)?;
        let h = g.glu(h)?;
        let h = self.conv_dw.forward(g, p, h)?;
        let h = g.swish(h);
        let h = self.conv_out.forward(g, p, h)?;
        let x = g.add(x, h)?;

        let h = self.ff2_norm.forward(g, p, x)?;
        let h = self.ff2.forward(g, p, h)?;
        let h = g.scale(h, 0.5);
        let x = g.add(x, h)?;

        self.out_norm.forward(g, p, x)
    }
}

#[derive(Debug, Clone)]
pub struct SslFrontend {
    pub cfg: SslConfig,
    input: Linear,
    blocks: Vec<ConformerBlock>,
    mlm_head: Linear,
    contrastive_proj: Linear,
}

/// Scalar losses and diagnostics from one pretraining forward pass.
#[derive(Debug, Clone)]
pub struct SslLoss {
    pub loss: Var,
    pub contrastive: f64,
    pub mlm: f64,
    pub total: f64,
    pub accuracy: f64,
    pub mask: MaskSet,
    /// Code id of every input frame.
    pub targets: Vec<usize>,
    /// Distractor frame indices per masked frame.
    pub distractors: Vec<Vec<usize>>,
    /// Projected tap outputs at masked frames (`M×F`).
    pub contrastive_vectors: Var,
    /// Masked-prediction logits at masked frames (`M×K`).
    pub mlm_logits: Var,
}

impl SslFrontend {
    pub fn new(cfg: SslConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.num_blocks)
            .map(|i| {
                ConformerBlock::new(
                    &format!("ssl.blocks.{i}"),
                    cfg.hidden_dim,
                    cfg.heads,
                    cfg.ffn_dim,
                    cfg.conv_kernel,
                    cfg.max_rel,
                )
            })
            .collect();
        Ok(SslFrontend {
            input: Linear::new("ssl.input", cfg.input_dim, cfg.hidden_dim),
            mlm_head: Linear::new("ssl.mlm_head", cfg.hidden_dim, cfg.codebook_size),
            contrastive_proj: Linear::new("ssl.contrastive_proj", cfg.hidden_dim, cfg.input_dim),
            blocks,
            cfg,
        })
    }

    pub fn blocks(&self) -> &[ConformerBlock] {
        &self.blocks
    }

    pub fn output_dim(&self) -> usize {
        self.cfg.hidden_dim
    }

    /// Creates all frontend parameters. The codebook starts random; use
    /// [`fit_codebook`] on real frames before pretraining.
    pub fn init(&self, init: &mut Initializer) {
        self.input.init(init);
        init.constant("ssl.mask_emb", &[self.cfg.input_dim], 0.0);
        for b in &self.blocks {
            b.init(init);
        }
        self.mlm_head.init(init);
        self.contrastive_proj.init(init);
        init.uniform("ssl.codebook", &[self.cfg.codebook_size, self.cfg.input_dim], 1.0);
        if let Ok(t) = init.store.get_mut("ssl.codebook") {
            t.requires_grad = false;
        }
    }

    fn run_blocks(&self, g: &mut Graph, p: &ParamStore, x: Var, tap: Option<usize>) -> Result<(Var, Option<Var>)> {
        let (_, f) = g.dims(x);
        if f != self.cfg.input_dim {
            return Err(Error::shape("ssl_input", &[f], &[self.cfg.input_dim]));
        }
        let mut h = self.input.forward(g, p, x)?;
        let mut tapped = None;
        for (i, b) in self.blocks.iter().enumerate() {
            h = b.forward(g, p, h)?;
            if tap == Some(i + 1) {
                tapped = Some(h);
            }
        }
        Ok((h, tapped))
    }

    /// Forward pass over a masked input; an empty mask reproduces
    /// [`SslFrontend::extract`] exactly.
    pub fn forward_masked(&self, g: &mut Graph, p: &ParamStore, x: Var, mask: &MaskSet) -> Result<Var> {
        let xm = apply_span_mask(g, p, x, mask)?;
        Ok(self.run_blocks(g, p, xm, None)?.0)
    }

    /// Feature extraction graph: no masking, frame count preserved.
    pub fn extract(&self, g: &mut Graph, p: &ParamStore, x: Var) -> Result<Var> {
        Ok(self.run_blocks(g, p, x, None)?.0)
    }

    /// Evaluation-mode features as a `T×D` tensor.
    pub fn extract_features(&self, p: &ParamStore, x: &AudioFeatures) -> Result<Tensor> {
        let mut g = Graph::new(x.frames.precision());
        let input = g.constant_tensor(&x.frames);
        let out = self.extract(&mut g, p, input)?;
        Ok(g.to_tensor(out))
    }

    /// Pretraining loss for one utterance.
    pub fn ssl_loss(&self, g: &mut Graph, p: &ParamStore, x: &AudioFeatures, rng: &mut WkRng) -> Result<SslLoss> {
        let t = x.num_frames();
        let mut mask = draw_mask(t, &self.cfg, rng)?;
        if mask.is_empty() {
            mask = draw_mask(t, &self.cfg, rng)?;
        }
        if mask.is_empty() {
            mask = MaskSet::from_starts(&[0], self.cfg.mask_span, t);
        }
        let distractors = self.draw_distractors(&mask, rng);
        self.ssl_loss_with_mask(g, p, x, mask, distractors)
    }

    pub fn draw_distractors(&self, mask: &MaskSet, rng: &mut WkRng) -> Vec<Vec<usize>> {
        let m = &mask.masked_indices;
        m.iter()
            .enumerate()
            .map(|(i, _)| {
                if m.len() < 2 {
                    return Vec::new();
                }
                (0..self.cfg.num_distractors)
                    .map(|_| {
                        let mut j = rng.gen_range(0..m.len() - 1);
                        if j >= i {
                            j += 1;
                        }
                        m[j]
                    })
                    .collect()
            })
            .collect()
    }

    /// Pretraining loss with an explicit mask and distractor draw.
    pub fn ssl_loss_with_mask(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        x: &AudioFeatures,
        mask: MaskSet,
        distractors: Vec<Vec<usize>>,
    ) -> Result<SslLoss> {
        if mask.is_empty() || distractors.len() != mask.len() {
            return Err(Error::validation("mask and distractor lists disagree"));
        }
        let f = self.cfg.input_dim;
        let k = self.cfg.codebook_size;
        let codebook = p.get("ssl.codebook")?.data().to_vec();
        let targets: Vec<usize> = x
            .frames
            .data()
            .chunks_exact(f)
            .map(|fr| quantize(fr, &codebook, f))
            .collect();

        let input = g.constant_tensor(&x.frames);
        let xm = apply_span_mask(g, p, input, &mask)?;
        let (last, tap) = self.run_blocks(g, p, xm, Some(self.cfg.contrastive_tap_block))?;
        let tap = tap.expect("tap block within range");
        let masked = &mask.masked_indices;
        let m = masked.len();
        let masked_codes: Vec<usize> = masked.iter().map(|&i| targets[i]).collect();

        // masked prediction from the final block
        let last_m = g.embedding(last, masked)?;
        let mlm_logits = self.mlm_head.forward(g, p, last_m)?;
        let mlm = g.cross_entropy(mlm_logits, &masked_codes)?;

        // contrastive scores: true code first, then distractor codes
        let tap_m = g.embedding(tap, masked)?;
        let cvec = self.contrastive_proj.forward(g, p, tap_m)?;
        let cb = g.constant(k, f, codebook.clone())?;
        let all_scores = g.matmul_t(cvec, false, cb, true)?;
        let n_cand = 1 + distractors.iter().map(Vec::len).min().unwrap_or(0);
        let mut ids = Vec::with_capacity(m * n_cand);
        for (row, (&ti, ds)) in masked.iter().zip(&distractors).enumerate() {
            ids.push(row * k + targets[ti]);
            ids.extend(ds.iter().take(n_cand - 1).map(|&d| row * k + targets[d]));
        }
        let flat = g.reshape(all_scores, m * k, 1)?;
        let picked = g.embedding(flat, &ids)?;
        let logits = g.reshape(picked, m, n_cand)?;
        let contrastive = g.cross_entropy(logits, &vec![0; m])?;

        let wc = g.scale(contrastive, self.cfg.contrastive_weight);
        let wm = g.scale(mlm, self.cfg.mlm_weight);
        let loss = g.add(wc, wm)?;

        let lv = g.value(mlm_logits);
        let correct = (0..m)
            .filter(|&r| {
                let row = &lv[r * k..(r + 1) * k];
                let mut best = 0;
                for j in 1..k {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best == masked_codes[r]
            })
            .count();
        Ok(SslLoss {
            loss,
            contrastive: g.scalar(contrastive),
            mlm: g.scalar(mlm),
            total: g.scalar(loss),
            accuracy: correct as f64 / m as f64,
            mask,
            targets,
            distractors,
            contrastive_vectors: cvec,
            mlm_logits,
        })
    }
}
