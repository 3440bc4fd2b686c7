//! Complete recognizer: frontend, encoder with CTC taps, decoder, and the
//! on-disk model directory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ctc::{self, CTC_LOSS_OP};
use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{Encoder, EncoderConfig, EncoderOutput};
use crate::error::{Error, Result};
use crate::nn::Initializer;
use crate::rng::WkRng;
use crate::search::{joint_beam_search, BeamConfig, ScoredSequence};
use crate::selfcond::{build_language_mask, DEFAULT_EPSILON};
use crate::ssl::{SslConfig, SslFrontend};
use crate::tensor::{load_checkpoint, save_checkpoint, Graph, ParamStore, Precision, Tensor, Var};
use crate::vocab::{Vocab, VocabFile};

pub const MODEL_FILE: &str = "model.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub ssl: SslConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn toy(feature_dim: usize, vocab: &Vocab) -> Self {
        let ssl = SslConfig {
            input_dim: feature_dim,
            ..SslConfig::default()
        };
        let mut decoder = DecoderConfig::toy(vocab.len());
        decoder.input_noise = 0.3;
        decoder.input_noise_ids = vocab.label_ids();
        ModelConfig {
            encoder: EncoderConfig::toy(ssl.hidden_dim, vocab.len()),
            decoder,
            ssl,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    config: ModelConfig,
    vocab: VocabFile,
}

/// Loss terms of one utterance.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub ctc: f64,
    pub att: f64,
    pub taps: f64,
}

/// Weighting of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ctc: f64,
    pub att: f64,
    /// Multiplies the mean of the tap CTC losses.
    pub taps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ctc: 0.3,
            att: 0.7,
            taps: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Recognition {
    pub tokens: Vec<usize>,
    pub text: String,
    pub language: String,
    pub joint: f64,
    pub ctc: f64,
    pub att: f64,
    pub truncated: bool,
    pub nbest: Vec<(String, f64)>,
}

#[derive(Debug, Clone)]
pub struct AsrModel {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub ssl: SslFrontend,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub params: ParamStore,
}

impl AsrModel {
    pub fn new(cfg: ModelConfig, vocab: Vocab, rng: &mut WkRng, precision: Precision) -> Result<Self> {
        if cfg.encoder.vocab_size != vocab.len() || cfg.decoder.vocab_size != vocab.len() {
            return Err(Error::Vocab(
                "model vocabulary size disagrees with the vocabulary".into(),
            ));
        }
        if cfg.encoder.input_dim != cfg.ssl.hidden_dim || cfg.decoder.hidden_dim != cfg.encoder.hidden_dim {
            return Err(Error::validation("frontend, encoder and decoder widths disagree"));
        }
        let ssl = SslFrontend::new(cfg.ssl.clone())?;
        let encoder = Encoder::new(cfg.encoder.clone())?;
        let decoder = Decoder::new(cfg.decoder.clone())?;
        let mut params = ParamStore::new();
        let mut init = Initializer::new(&mut params, rng, precision);
        ssl.init(&mut init);
        encoder.init(&mut init);
        decoder.init(&mut init);
        Ok(AsrModel {
            cfg,
            vocab,
            ssl,
            encoder,
            decoder,
            params,
        })
    }

    /// Rebuilds the module descriptors after a config change; parameters are untouched.
    pub fn rebuild(&mut self) -> Result<()> {
        self.ssl = SslFrontend::new(self.cfg.ssl.clone())?;
        self.encoder = Encoder::new(self.cfg.encoder.clone())?;
        self.decoder = Decoder::new(self.cfg.decoder.clone())?;
        Ok(())
    }

    pub fn precision(&self) -> Precision {
        self.params
            .iter()
            .next()
            .map(|(_, t)| t.precision())
            .unwrap_or_default()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.params)?;
        let file = ModelFile {
            config: self.cfg.clone(),
            vocab: self.vocab.to_file(),
        };
        let path = dir.join(MODEL_FILE);
        fs::write(&path, serde_json::to_string_pretty(&file)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MODEL_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: ModelFile = serde_json::from_str(&text)?;
        let vocab = Vocab::from_file(file.vocab)?;
        let params = load_checkpoint(dir)?;
        let cfg = file.config;
        let model = AsrModel {
            ssl: SslFrontend::new(cfg.ssl.clone())?,
            encoder: Encoder::new(cfg.encoder.clone())?,
            decoder: Decoder::new(cfg.decoder.clone())?,
            cfg,
            vocab,
            params,
        };
        model.check_params()?;
        Ok(model)
    }

    /// Verifies that every parameter the modules read is present, by
    /// running a tiny forward pass.
    pub fn check_params(&self) -> Result<()> {
        let feats = Tensor::zeros(&[4, self.cfg.ssl.input_dim], self.precision());
        let enc = self.encode(&feats, None)?;
        self.decoder
            .decode_step(&self.params, &enc.latent, &[self.vocab.sos()])
            .map(|_| ())
    }

    /// Frontend features in evaluation mode.
    pub fn frontend(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(features.precision());
        let x = g.constant_tensor(features);
        let h = self.ssl.extract(&mut g, &self.params, x)?;
        Ok(g.to_tensor(h))
    }

    /// Frontend plus encoder in evaluation mode.
    pub fn encode(
        &self,
        features: &Tensor,
        adaptation: Option<&crate::selfcond::LanguageMask>,
    ) -> Result<EncoderOutput> {
        let ssl = self.frontend(features)?;
        self.encoder.encode(&self.params, &ssl, adaptation)
    }

    /// Decoder target `<sos> <lang> labels <eos>`.
    pub fn decoder_target(&self, labels: &[usize], language: &str) -> Result<Vec<usize>> {
        let mut t = Vec::with_capacity(labels.len() + 3);
        t.push(self.vocab.sos());
        t.push(self.vocab.language_token(language)?);
        t.extend_from_slice(labels);
        t.push(self.vocab.eos());
        Ok(t)
    }

    /// Builds the training objective for one utterance. `frontend_out` is
    /// a precomputed frontend output; when `None` the frontend runs inside
    /// the graph so its parameters can receive gradients.
    pub fn loss(
        &self,
        g: &mut Graph,
        features: &Tensor,
        frontend_out: Option<&Tensor>,
        labels: &[usize],
        language: &str,
        w: &LossWeights,
    ) -> Result<LossParts> {
        g.register_custom(CTC_LOSS_OP);
        let h = match frontend_out {
            Some(t) => g.constant_tensor(t),
            None => {
                let x = g.constant_tensor(features);
                self.ssl.extract(g, &self.params, x)?
            }
        };
        let enc = self.encoder.forward(g, &self.params, h, None)?;
        let ctc_final = ctc::ctc_loss(g, enc.final_log_post, labels)?;
        let mut tap_losses = Vec::with_capacity(enc.taps.len());
        for &(_, lp) in &enc.taps {
            tap_losses.push(ctc::ctc_loss(g, lp, labels)?);
        }
        let target = self.decoder_target(labels, language)?;
        let att = self.decoder.teacher_forced_loss(g, &self.params, enc.latent, &target)?;

        let a = g.scale(ctc_final, w.ctc);
        let b = g.scale(att, w.att);
        let mut total = g.add(a, b)?;
        let mut taps_mean = 0.0;
        if !tap_losses.is_empty() {
            let cat = g.concat(&tap_losses, 1)?;
            let m = g.mean(cat);
            taps_mean = g.scalar(m);
            let c = g.scale(m, w.taps);
            total = g.add(total, c)?;
        }
        Ok(LossParts {
            total,
            ctc: g.scalar(ctc_final),
            att: g.scalar(att),
            taps: taps_mean,
        })
    }

    /// Picks the language token the decoder rates highest after `<sos>`.
    pub fn detect_language(&self, latent: &Tensor) -> Result<String> {
        let lp = self.decoder.decode_step(&self.params, latent, &[self.vocab.sos()])?;
        let mut best: Option<(usize, f64)> = None;
        for id in self.vocab.language_token_ids() {
            if best.map_or(true, |(_, s)| lp[id] > s) {
                best = Some((id, lp[id]));
            }
        }
        let (id, _) = best.ok_or_else(|| Error::Vocab("vocabulary has no language tokens".into()))?;
        Ok(self.vocab.language_of_token(id).expect("language token").to_string())
    }

    /// Joint CTC/attention decoding of one utterance. `adapt_language`
    /// applies that language's mask at the encoder taps.
    pub fn recognize(
        &self,
        features: &Tensor,
        beam: &BeamConfig,
        language: Option<&str>,
        adapt_language: Option<&str>,
    ) -> Result<Recognition> {
        let mask = adapt_language
            .map(|l| build_language_mask(l, &self.vocab, DEFAULT_EPSILON))
            .transpose()?;
        let enc = self.encode(features, mask.as_ref())?;
        let language = match language {
            Some(l) => {
                self.vocab.language_token(l)?;
                l.to_string()
            }
            None => self.detect_language(&enc.latent)?,
        };
        let head = [self.vocab.sos(), self.vocab.language_token(&language)?];
        let max_len = beam
            .max_len
            .min(self.cfg.decoder.max_target_len.saturating_sub(head.len()));
        let cfg = BeamConfig {
            max_len,
            ..beam.clone()
        };
        let mut scorer = |prefix: &[usize]| -> Result<Vec<f64>> {
            let mut full = head.to_vec();
            full.extend_from_slice(prefix);
            self.decoder.decode_step(&self.params, &enc.latent, &full)
        };
        let (t, v) = enc.final_log_post.matrix_dims();
        let res = joint_beam_search(
            enc.final_log_post.data(),
            t,
            v,
            &self.vocab.label_ids(),
            self.vocab.eos(),
            &mut scorer,
            &cfg,
        )?;
        let best: &ScoredSequence = res.best();
        Ok(Recognition {
            tokens: best.tokens.clone(),
            text: self.vocab.decode(&best.tokens),
            language,
            joint: best.joint,
            ctc: best.ctc,
            att: best.att,
            truncated: res.truncated,
            nbest: res
                .nbest
                .iter()
                .map(|s| (self.vocab.decode(&s.tokens), s.joint))
                .collect(),
        })
    }
}
