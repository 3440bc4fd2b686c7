//! Seven-stage curriculum: stage plans, AdamW, encoder growth, freezing,
//! per-stage checkpoints and bit-exact resume.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Manifest;
use crate::encoder::{block_prefix, EBranchformerBlock, Encoder};
use crate::error::{Error, Result};
use crate::model::{AsrModel, LossWeights};
use crate::nn::Initializer;
use crate::rng::{derive_seed, seeded, WkRng};
use crate::selfcond::FeedbackLayer;
use crate::ssl;
use crate::tensor::{load_checkpoint, save_checkpoint, Graph, ParamStore, Precision, Tensor};

pub const STATE_FILE: &str = "state.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
const MOMENT1_DIR: &str = "optim_m";
const MOMENT2_DIR: &str = "optim_v";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Toy,
    Full,
}

impl std::str::FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Scale::Toy),
            "full" => Ok(Scale::Full),
            _ => Err(Error::validation(format!(
                "unknown stage plan {s:?} (expected toy or full)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataFilter {
    /// `None` admits every language.
    pub languages: Option<Vec<String>>,
    /// Share of the admitted utterances used in the stage.
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub encoder_depth: usize,
    pub data_filter: DataFilter,
    /// Parameter-name prefixes excluded from updates.
    pub frozen: Vec<String>,
    pub step_budget: u64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<Stage>,
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::validation("stage plan is empty"));
        }
        if self.stages.windows(2).any(|w| w[1].encoder_depth < w[0].encoder_depth) {
            return Err(Error::validation("encoder depth must not decrease across stages"));
        }
        for s in &self.stages {
            if !(s.data_filter.fraction > 0.0 && s.data_filter.fraction <= 1.0) {
                return Err(Error::validation(format!(
                    "{}: data fraction must be in (0, 1]",
                    s.name
                )));
            }
            if s.encoder_depth == 0 {
                return Err(Error::validation(format!("{}: encoder depth must be >= 1", s.name)));
            }
        }
        Ok(())
    }

    /// Multiplies every step budget (rounding up, at least one step).
    pub fn scale_steps(&mut self, factor: f64) {
        for s in &mut self.stages {
            s.step_budget = ((s.step_budget as f64 * factor).ceil() as u64).max(1);
            s.warmup_steps = s.warmup_steps.min(s.step_budget);
        }
    }
}

/// The seven-stage plan. Stages 1–3 grow the encoder on a small
/// single-language subset, stage 4 uses all data of that language, stage 5
/// a multilingual subset, stages 6–7 all data; the frontend is frozen
/// until stage 7.
pub fn build_stage_plan(scale: Scale, primary_language: &str) -> StagePlan {
    let (depths, budgets, lr, warmup): ([usize; 7], [u64; 7], f64, u64) = match scale {
        // full-scale budgets follow the day counts 1,1,1,1,3,14,21
        Scale::Full => (
            [8, 16, 24, 24, 24, 24, 24],
            [10_000, 10_000, 10_000, 10_000, 30_000, 140_000, 210_000],
            1e-3,
            2_500,
        ),
        Scale::Toy => ([2, 4, 6, 6, 6, 6, 6], [60, 60, 60, 60, 100, 300, 120], 2e-3, 20),
    };
    let one = Some(vec![primary_language.to_string()]);
    let filters = [
        DataFilter {
            languages: one.clone(),
            fraction: 0.5,
        },
        DataFilter {
            languages: one.clone(),
            fraction: 0.5,
        },
        DataFilter {
            languages: one.clone(),
            fraction: 0.5,
        },
        DataFilter {
            languages: one,
            fraction: 1.0,
        },
        DataFilter {
            languages: None,
            fraction: 0.5,
        },
        DataFilter {
            languages: None,
            fraction: 1.0,
        },
        DataFilter {
            languages: None,
            fraction: 1.0,
        },
    ];
    let stages = (0..7)
        .map(|i| Stage {
            name: format!("stage{}", i + 1),
            encoder_depth: depths[i],
            data_filter: filters[i].clone(),
            frozen: if i < 6 {
                vec![ssl::PREFIX.to_string()]
            } else {
                Vec::new()
            },
            step_budget: budgets[i],
            peak_lr: lr,
            warmup_steps: warmup,
        })
        .collect();
    StagePlan { stages }
}

/// A single stage at full depth on all data with the same total budget as `plan`.
pub fn flat_plan(plan: &StagePlan) -> StagePlan {
    let last = plan.stages.last().expect("non-empty plan");
    StagePlan {
        stages: vec![Stage {
            name: "flat".into(),
            encoder_depth: last.encoder_depth,
            data_filter: DataFilter {
                languages: None,
                fraction: 1.0,
            },
            frozen: vec![ssl::PREFIX.to_string()],
            step_budget: plan.stages.iter().map(|s| s.step_budget).sum(),
            peak_lr: last.peak_lr,
            warmup_steps: last.warmup_steps,
        }],
    }
}

/// Linear warmup to `peak`, then decay with the inverse square root of the step.
pub fn learning_rate(peak: f64, warmup: u64, step: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    peak * (s / w).min((w / s).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 5.0,
        }
    }
}

/// Adam with decoupled weight decay. Moments are kept at the parameters'
/// precision so that checkpointed state resumes bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub m: ParamStore,
    pub v: ParamStore,
    /// Updates since the last reset, for bias correction.
    pub t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            m: ParamStore::new(),
            v: ParamStore::new(),
            t: 0,
        }
    }

    pub fn reset(&mut self) {
        self.m = ParamStore::new();
        self.v = ParamStore::new();
        self.t = 0;
    }

    /// Applies one update to every trainable parameter holding a gradient,
    /// then clears all gradients. Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<f64> {
        let sq: f64 = params
            .iter()
            .filter(|(_, t)| t.requires_grad)
            .filter_map(|(_, t)| t.grad.as_ref())
            .flatten()
            .map(|g| g * g)
            .sum();
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric {
                op: "adamw",
                detail: "non-finite gradient norm".into(),
            });
        }
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let Some(grad) = p.grad.take() else { continue };
            if !p.requires_grad {
                continue;
            }
            let prec = p.precision();
            if !self.m.contains(name) {
                self.m.insert(name.clone(), Tensor::zeros(p.shape(), prec));
                self.v.insert(name.clone(), Tensor::zeros(p.shape(), prec));
            }
            let m = self.m.get_mut(name)?.data_mut();
            let decay = if p.shape().len() >= 2 { c.weight_decay } else { 0.0 };
            let mut new_p = p.data().to_vec();
            let v = self.v.get_mut(name)?.data_mut();
            for i in 0..new_p.len() {
                let g = grad[i] * clip;
                m[i] = prec.round(c.beta1 * m[i] + (1.0 - c.beta1) * g);
                v[i] = prec.round(c.beta2 * v[i] + (1.0 - c.beta2) * g * g);
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                new_p[i] -= lr * (mh / (vh.sqrt() + c.eps) + decay * new_p[i]);
            }
            p.set_data(new_p)?;
        }
        for (_, p) in params.iter_mut() {
            p.grad = None;
        }
        Ok(norm)
    }
}

/// Grows the encoder to `new_depth` blocks. Existing blocks keep their
/// parameters; new blocks start with zeroed fusion and feed-forward output
/// projections and a copy of the top block's output norm. Taps follow the default rule for the new depth; a tap's
/// feedback projection survives if its index does, otherwise it starts at
/// zero.
pub fn grow_encoder(model: &mut AsrModel, new_depth: usize, rng: &mut WkRng) -> Result<()> {
    let cur = model.cfg.encoder.num_blocks;
    if new_depth < cur {
        return Err(Error::validation(format!(
            "cannot shrink encoder from {cur} to {new_depth} blocks"
        )));
    }
    if new_depth == cur {
        return Ok(());
    }
    let old_taps = model.encoder.taps();
    let mut cfg = model.cfg.encoder.clone();
    cfg.num_blocks = new_depth;
    cfg.tap_layers = None;
    let encoder = Encoder::new(cfg.clone())?;
    let new_taps = encoder.taps();
    let precision = model.precision();
    let mut init = Initializer::new(&mut model.params, rng, precision);
    for i in cur..new_depth {
        EBranchformerBlock::new(block_prefix(i).trim_end_matches('.'), &cfg).init_near_identity(&mut init);
        // new blocks inherit the output scale and shift of the current top
        // block, otherwise their output norm would undo it
        for part in ["gamma", "beta"] {
            let top = init
                .store
                .get(&format!("{}out_norm.{part}", block_prefix(cur - 1)))?
                .clone();
            init.store.insert(format!("{}out_norm.{part}", block_prefix(i)), top);
        }
    }
    for k in &old_taps {
        if !new_taps.contains(k) {
            let fb = FeedbackLayer::new(*k, cfg.vocab_size, cfg.hidden_dim);
            init.store.remove(&fb.proj.weight());
            init.store.remove(&fb.proj.bias());
        }
    }
    for k in &new_taps {
        if !old_taps.contains(k) {
            FeedbackLayer::new(*k, cfg.vocab_size, cfg.hidden_dim)
                .proj
                .init_zero(&mut init);
        }
    }
    model.cfg.encoder = cfg;
    model.encoder = encoder;
    Ok(())
}

/// One utterance ready for training.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub utt_id: String,
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub language: String,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.features.shape()[0]
    }
}

/// Loads and tokenizes every manifest entry, validating the manifest first.
pub fn load_utterances(manifest: &Manifest, model: &AsrModel) -> Result<Vec<Utterance>> {
    manifest.validate()?;
    manifest
        .entries
        .iter()
        .map(|e| {
            model.vocab.language_token(&e.language)?;
            Ok(Utterance {
                utt_id: e.utt_id.clone(),
                features: manifest.load_features(e)?.to_precision(model.precision()),
                labels: model.vocab.encode(&e.transcript)?,
                language: e.language.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    /// Frame budget per batch; a batch always holds at least one utterance.
    pub batch_frames: usize,
    pub loss: LossWeights,
    pub optimizer: AdamWConfig,
    pub log_every: u64,
    /// Language of the single-language stages; defaults to the first vocabulary language.
    pub primary_language: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_frames: 200,
            loss: LossWeights::default(),
            optimizer: AdamWConfig::default(),
            log_every: 10,
            primary_language: None,
        }
    }
}

/// Config file layout: a `[train]` table and optional `[[stage]]` tables
/// replacing the built-in plan.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainFile {
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub stage: Vec<Stage>,
}

impl TrainFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::validation(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub global_step: u64,
    /// Zero-based index of the current stage.
    pub stage: usize,
    pub stage_step: u64,
    pub stage_complete: bool,
    pub skipped_samples: u64,
    pub rng: WkRng,
    /// Utterance indices admitted by the current stage's filter.
    pub pool: Vec<usize>,
    /// Batches left in the current pass over the pool.
    pub pending: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub stage: usize,
    pub step: u64,
    pub loss_total: f64,
    pub loss_ctc: f64,
    pub loss_att: f64,
    pub loss_taps: f64,
    pub lr: f64,
    pub skipped_samples: u64,
}

pub struct Trainer {
    pub model: AsrModel,
    pub cfg: TrainConfig,
    pub plan: StagePlan,
    pub state: TrainState,
    pub opt: AdamW,
    pub data: Vec<Utterance>,
    frontend_cache: HashMap<usize, Tensor>,
    metrics_path: Option<PathBuf>,
    /// Per-stage checkpoint directories written so far.
    pub checkpoints: Vec<PathBuf>,
}

impl Trainer {
    pub fn new(model: AsrModel, data: Vec<Utterance>, plan: StagePlan, cfg: TrainConfig) -> Result<Self> {
        plan.validate()?;
        if data.is_empty() {
            return Err(Error::validation("training corpus is empty"));
        }
        if plan.stages[0].encoder_depth < model.cfg.encoder.num_blocks {
            return Err(Error::validation(format!(
                "model has {} encoder blocks, first stage wants {}",
                model.cfg.encoder.num_blocks, plan.stages[0].encoder_depth
            )));
        }
        let state = TrainState {
            global_step: 0,
            stage: 0,
            stage_step: 0,
            stage_complete: false,
            skipped_samples: 0,
            rng: seeded(cfg.seed),
            pool: Vec::new(),
            pending: Vec::new(),
        };
        let opt = AdamW::new(cfg.optimizer);
        let mut t = Trainer {
            model,
            cfg,
            plan,
            state,
            opt,
            data,
            frontend_cache: HashMap::new(),
            metrics_path: None,
            checkpoints: Vec::new(),
        };
        t.begin_stage(0)?;
        Ok(t)
    }

    /// Appends step metrics to `path` from now on.
    pub fn log_to(&mut self, path: impl Into<PathBuf>) {
        self.metrics_path = Some(path.into());
    }

    pub fn stage(&self) -> &Stage {
        &self.plan.stages[self.state.stage]
    }

    fn primary_language(&self) -> String {
        self.cfg
            .primary_language
            .clone()
            .or_else(|| self.model.vocab.languages().next().cloned())
            .unwrap_or_default()
    }

    /// Grows the encoder, applies the freeze set, resets optimizer moments
    /// and draws the stage's data pool.
    fn begin_stage(&mut self, k: usize) -> Result<()> {
        self.state.stage = k;
        self.state.stage_step = 0;
        self.state.stage_complete = false;
        let stage = self.plan.stages[k].clone();
        grow_encoder(&mut self.model, stage.encoder_depth, &mut self.state.rng)?;
        self.apply_freeze();
        self.opt.reset();
        let langs = stage.data_filter.languages.clone().map(|ls| {
            ls.into_iter()
                .map(|l| if l == "primary" { self.primary_language() } else { l })
                .collect::<Vec<_>>()
        });
        let mut pool: Vec<usize> = (0..self.data.len())
            .filter(|&i| langs.as_ref().map_or(true, |ls| ls.contains(&self.data[i].language)))
            .collect();
        if pool.is_empty() {
            return Err(Error::validation(format!(
                "{}: data filter admits no utterance",
                stage.name
            )));
        }
        pool.shuffle(&mut self.state.rng);
        let keep = ((pool.len() as f64 * stage.data_filter.fraction).ceil() as usize).max(1);
        pool.truncate(keep);
        pool.sort_unstable();
        self.state.pool = pool;
        self.state.pending.clear();
        Ok(())
    }

    fn apply_freeze(&mut self) {
        let frozen = self.stage().frozen.clone();
        for (name, t) in self.model.params.iter_mut() {
            t.requires_grad = !frozen.iter().any(|p| name.starts_with(p.as_str()));
        }
        if !self.frontend_frozen() {
            self.frontend_cache.clear();
        }
    }

    fn frontend_frozen(&self) -> bool {
        self.model
            .params
            .with_prefix(ssl::PREFIX)
            .all(|(_, t)| !t.requires_grad)
    }

    /// Shuffles the pool, sorts windows of it by length and packs batches
    /// under the frame budget, then shuffles batch order.
    fn refill(&mut self) {
        let mut order = self.state.pool.clone();
        order.shuffle(&mut self.state.rng);
        let mut batches = Vec::new();
        for window in order.chunks(16) {
            let mut w = window.to_vec();
            w.sort_by_key(|&i| (self.data[i].num_frames(), i));
            let mut cur: Vec<usize> = Vec::new();
            let mut frames = 0;
            for i in w {
                let n = self.data[i].num_frames();
                if !cur.is_empty() && frames + n > self.cfg.batch_frames {
                    batches.push(std::mem::take(&mut cur));
                    frames = 0;
                }
                cur.push(i);
                frames += n;
            }
            if !cur.is_empty() {
                batches.push(cur);
            }
        }
        batches.shuffle(&mut self.state.rng);
        batches.reverse();
        self.state.pending = batches;
    }

    fn frontend_output(&mut self, i: usize) -> Result<Option<Tensor>> {
        if !self.frontend_frozen() {
            return Ok(None);
        }
        if let Some(t) = self.frontend_cache.get(&i) {
            return Ok(Some(t.clone()));
        }
        let t = self.model.frontend(&self.data[i].features)?;
        self.frontend_cache.insert(i, t.clone());
        Ok(Some(t))
    }

    /// One optimizer update on the next batch.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        if self.state.pending.is_empty() {
            self.refill();
        }
        let batch = self.state.pending.pop().expect("refilled");
        let precision = self.model.precision();
        let w = self.cfg.loss;
        let inv = 1.0 / batch.len() as f64;
        let (mut lt, mut lc, mut la, mut lk) = (0.0, 0.0, 0.0, 0.0);
        let mut used = 0usize;
        for &i in &batch {
            let cached = self.frontend_output(i)?;
            let utt = &self.data[i];
            let seed = derive_seed(self.cfg.seed, self.state.global_step) ^ i as u64;
            let mut g = Graph::new(precision).with_training(true).with_dropout_rng(seeded(seed));
            let parts = match self
                .model
                .loss(&mut g, &utt.features, cached.as_ref(), &utt.labels, &utt.language, &w)
            {
                Ok(p) => p,
                Err(Error::ImpossibleAlignment { .. }) => {
                    self.state.skipped_samples += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let scaled = g.scale(parts.total, inv);
            let grads = g.backward(scaled)?;
            grads.accumulate_into(&g, &mut self.model.params)?;
            lt += g.scalar(parts.total);
            lc += parts.ctc;
            la += parts.att;
            lk += parts.taps;
            used += 1;
        }
        self.state.stage_step += 1;
        self.state.global_step += 1;
        let stage = self.stage().clone();
        let lr = learning_rate(stage.peak_lr, stage.warmup_steps, self.state.stage_step);
        if used > 0 {
            self.opt.step(&mut self.model.params, lr)?;
        } else {
            for (_, p) in self.model.params.iter_mut() {
                p.grad = None;
            }
        }
        let n = used.max(1) as f64;
        let m = StepMetrics {
            stage: self.state.stage + 1,
            step: self.state.global_step,
            loss_total: lt / n,
            loss_ctc: lc / n,
            loss_att: la / n,
            loss_taps: lk / n,
            lr,
            skipped_samples: self.state.skipped_samples,
        };
        let last = self.state.stage_step >= stage.step_budget;
        if self.cfg.log_every > 0 && (self.state.stage_step % self.cfg.log_every == 0 || last) {
            self.log(&m)?;
        }
        Ok(m)
    }

    fn log(&self, m: &StepMetrics) -> Result<()> {
        let Some(path) = &self.metrics_path else {
            return Ok(());
        };
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut line = serde_json::to_string(m)?;
        line.push('\n');
        f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Runs the remaining steps of the current stage.
    pub fn run_stage(&mut self) -> Result<Vec<StepMetrics>> {
        let budget = self.stage().step_budget;
        let mut out = Vec::new();
        while self.state.stage_step < budget {
            out.push(self.train_step()?);
        }
        self.state.stage_complete = true;
        Ok(out)
    }

    /// Enters the next stage once the current one is complete. Returns
    /// false at the end of the plan.
    pub fn advance(&mut self) -> Result<bool> {
        if !self.state.stage_complete {
            return Err(Error::validation(format!("{} has not finished", self.stage().name)));
        }
        if self.state.stage + 1 >= self.plan.stages.len() {
            return Ok(false);
        }
        self.begin_stage(self.state.stage + 1)?;
        Ok(true)
    }

    /// Runs stages to the end of the plan, checkpointing each boundary as
    /// `out_dir/stage{k}`.
    pub fn run(&mut self, out_dir: &Path) -> Result<Vec<Vec<StepMetrics>>> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let mut all = Vec::new();
        loop {
            if self.state.stage_complete && !self.advance()? {
                break;
            }
            all.push(self.run_stage()?);
            let dir = out_dir.join(&self.stage().name);
            self.save(&dir)?;
            self.checkpoints.push(dir);
        }
        Ok(all)
    }

    /// Writes model, optimizer moments and training state.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model.save(dir)?;
        save_checkpoint(&dir.join(MOMENT1_DIR), &self.opt.m)?;
        save_checkpoint(&dir.join(MOMENT2_DIR), &self.opt.v)?;
        let saved = SavedState {
            state: self.state.clone(),
            optimizer_steps: self.opt.t,
            plan: self.plan.clone(),
            config: self.cfg.clone(),
        };
        let path = dir.join(STATE_FILE);
        fs::write(&path, serde_json::to_string_pretty(&saved)?).map_err(|e| Error::io(&path, e))
    }

    /// Restores a trainer from a directory written by [`Trainer::save`].
    pub fn resume(dir: &Path, data: Vec<Utterance>) -> Result<Self> {
        let model = AsrModel::load(dir)?;
        let path = dir.join(STATE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let saved: SavedState = serde_json::from_str(&text)?;
        let mut opt = AdamW::new(saved.config.optimizer);
        opt.m = load_checkpoint(&dir.join(MOMENT1_DIR))?;
        opt.v = load_checkpoint(&dir.join(MOMENT2_DIR))?;
        opt.t = saved.optimizer_steps;
        let mut t = Trainer {
            model,
            cfg: saved.config,
            plan: saved.plan,
            state: saved.state,
            opt,
            data,
            frontend_cache: HashMap::new(),
            metrics_path: None,
            checkpoints: Vec::new(),
        };
        t.plan.validate()?;
        t.apply_freeze();
        Ok(t)
    }
}

#[derive(Serialize, Deserialize)]
struct SavedState {
    state: TrainState,
    optimizer_steps: u64,
    plan: StagePlan,
    config: TrainConfig,
}

/// Names and values of parameters under `prefix`, for bit-level comparisons.
pub fn snapshot(params: &ParamStore, prefix: &str) -> IndexMap<String, Vec<f64>> {
    params
        .with_prefix(prefix)
        .map(|(n, t)| (n.clone(), t.data().to_vec()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub kmeans_iters: usize,
    /// Frames sampled for fitting the codebook.
    pub codebook_frames: usize,
    pub optimizer: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            seed: 0,
            steps: 200,
            batch_size: 8,
            peak_lr: 2e-3,
            warmup_steps: 20,
            kmeans_iters: 10,
            codebook_frames: 20_000,
            optimizer: AdamWConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainMetrics {
    pub step: u64,
    pub loss: f64,
    pub contrastive: f64,
    pub mlm: f64,
    pub accuracy: f64,
    pub lr: f64,
}

/// Fits the codebook on frames of `features`, then trains the frontend
/// alone with its masked-prediction and contrastive objectives.
pub fn pretrain_ssl(model: &mut AsrModel, features: &[Tensor], cfg: &PretrainConfig) -> Result<Vec<PretrainMetrics>> {
    use rand::Rng;
    if features.is_empty() {
        return Err(Error::validation("no pretraining data"));
    }
    let mut rng = seeded(cfg.seed);
    let all_frames: Vec<Vec<f64>> = features
        .iter()
        .flat_map(|t| {
            t.data()
                .chunks_exact(t.matrix_dims().1)
                .map(<[f64]>::to_vec)
                .collect::<Vec<_>>()
        })
        .collect();
    let pick: Vec<Vec<f64>> = if all_frames.len() > cfg.codebook_frames {
        rand::seq::index::sample(&mut rng, all_frames.len(), cfg.codebook_frames)
            .into_iter()
            .map(|i| all_frames[i].clone())
            .collect()
    } else {
        all_frames
    };
    let codebook = ssl::fit_codebook(&pick, model.cfg.ssl.codebook_size, cfg.kmeans_iters, &mut rng)?;
    model.params.get_mut("ssl.codebook")?.set_data(codebook)?;

    let saved: Vec<(String, bool)> = model.params.iter().map(|(n, t)| (n.clone(), t.requires_grad)).collect();
    for (name, t) in model.params.iter_mut() {
        t.requires_grad = name.starts_with(ssl::PREFIX) && name != "ssl.codebook";
    }
    let precision = model.precision();
    let mut opt = AdamW::new(cfg.optimizer);
    let mut out = Vec::with_capacity(cfg.steps as usize);
    for step in 1..=cfg.steps {
        let inv = 1.0 / cfg.batch_size as f64;
        let (mut l, mut c, mut m, mut a) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..cfg.batch_size {
            let x = &features[rng.gen_range(0..features.len())];
            let af = ssl::AudioFeatures::new(x.clone(), "")?;
            let mut g = Graph::new(precision).with_training(true);
            let r = model.ssl.ssl_loss(&mut g, &model.params, &af, &mut rng)?;
            let scaled = g.scale(r.loss, inv);
            g.backward(scaled)?.accumulate_into(&g, &mut model.params)?;
            l += r.total;
            c += r.contrastive;
            m += r.mlm;
            a += r.accuracy;
        }
        let lr = learning_rate(cfg.peak_lr, cfg.warmup_steps, step);
        opt.step(&mut model.params, lr)?;
        out.push(PretrainMetrics {
            step,
            loss: l * inv,
            contrastive: c * inv,
            mlm: m * inv,
            accuracy: a * inv,
            lr,
        });
    }
    for (name, rg) in saved {
        model.params.get_mut(&name)?.requires_grad = rg;
    }
    Ok(out)
}

/// Model precision used by the command-line tools.
pub const DEFAULT_PRECISION: Precision = Precision::F32;
