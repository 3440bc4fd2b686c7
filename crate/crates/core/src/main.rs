use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use whale_kit::data::{self, Corpus, HoursRow, Manifest, Reference, SyntheticSpec};
use whale_kit::eval::{render_report, score_corpus, write_report};
use whale_kit::model::{AsrModel, ModelConfig};
use whale_kit::rng::seeded;
use whale_kit::search::{BeamConfig, DEFAULT_LAMBDA_CTC};
use whale_kit::train::{
    self, build_stage_plan, load_utterances, pretrain_ssl, PretrainConfig, Scale, TrainFile, Trainer, METRICS_FILE,
};
use whale_kit::{Error, Result};

#[derive(Parser)]
#[command(
    name = "whale-kit",
    version,
    about = "Joint CTC/attention speech recognition toolkit"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic bilingual corpus.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON synthetic spec replacing the built-in toy spec.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Training hours per language.
        #[arg(long)]
        hours: Option<f64>,
    },
    /// Fit the codebook and pretrain the SSL frontend; writes a fresh model.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = PretrainConfig::default().steps)]
        steps: u64,
        /// Encoder depth of the written model; defaults to the first toy stage.
        #[arg(long)]
        encoder_depth: Option<usize>,
    },
    /// Run the staged curriculum.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Model directory to start from (for example the pretrain output).
        #[arg(long)]
        init: Option<PathBuf>,
        /// TOML file with a [train] table and optional [[stage]] tables.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "toy")]
        stage_plan: String,
        #[arg(long, default_value_t = 1.0)]
        steps_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Stage checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Joint CTC/attention beam search over a manifest; writes JSONL hypotheses.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        beam: usize,
        #[arg(long, default_value_t = DEFAULT_LAMBDA_CTC)]
        lambda_ctc: f64,
        /// Force the language token instead of detecting it.
        #[arg(long)]
        language: Option<String>,
        /// Bias the encoder's intermediate CTC posteriors toward this language.
        #[arg(long)]
        adapt_language: Option<String>,
        #[arg(long, default_value_t = 1)]
        nbest: usize,
        #[arg(long, default_value_t = 48)]
        max_len: usize,
    },
    /// Score hypotheses against references; writes report.txt and report.json.
    Score {
        refs: PathBuf,
        hyps: PathBuf,
        hours: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Print a checkpoint's configuration and parameter table.
    InspectCheckpoint { dir: PathBuf },
}

#[derive(Serialize)]
struct DecodeRow<'a> {
    utt_id: &'a str,
    text: String,
    language: String,
    joint: f64,
    ctc: f64,
    att: f64,
    truncated: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    nbest: Vec<(String, f64)>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { out, seed, spec, hours } => {
            let mut spec = match spec {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    serde_json::from_str(&text)?
                }
                None => SyntheticSpec::toy(seed),
            };
            spec.seed = seed;
            if let Some(h) = hours {
                for l in &mut spec.languages {
                    l.hours = h;
                }
            }
            let c = data::gen_synthetic_corpus(&spec, &out)?;
            println!(
                "wrote {} train and {} held-out utterances to {}",
                c.train.entries.len(),
                c.heldout.entries.len(),
                out.display()
            );
            Ok(())
        }
        Cmd::Pretrain {
            data,
            out,
            seed,
            steps,
            encoder_depth,
        } => {
            let corpus = Corpus::load(&data)?;
            let feature_dim = first_feature_dim(&corpus.train)?;
            let mut cfg = ModelConfig::toy(feature_dim, &corpus.vocab);
            cfg.encoder.num_blocks = encoder_depth.unwrap_or(build_stage_plan(Scale::Toy, "").stages[0].encoder_depth);
            cfg.encoder.validate()?;
            let mut model = AsrModel::new(cfg, corpus.vocab.clone(), &mut seeded(seed), train::DEFAULT_PRECISION)?;
            let utts = load_utterances(&corpus.train, &model)?;
            let feats: Vec<_> = utts.into_iter().map(|u| u.features).collect();
            let pcfg = PretrainConfig {
                seed,
                steps,
                ..PretrainConfig::default()
            };
            let metrics = pretrain_ssl(&mut model, &feats, &pcfg)?;
            model.save(&out)?;
            data::write_jsonl(&out.join("pretrain_metrics.jsonl"), &metrics)?;
            if let Some(m) = metrics.last() {
                println!("step {} loss {:.4} accuracy {:.3}", m.step, m.loss, m.accuracy);
            }
            Ok(())
        }
        Cmd::Train {
            data,
            out,
            init,
            config,
            stage_plan,
            steps_scale,
            seed,
            resume,
        } => {
            let corpus = Corpus::load(&data)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let mut trainer = match resume {
                Some(dir) => {
                    let model = AsrModel::load(&dir)?;
                    let utts = load_utterances(&corpus.train, &model)?;
                    Trainer::resume(&dir, utts)?
                }
                None => {
                    if !(steps_scale > 0.0) {
                        return Err(Error::validation("--steps-scale must be positive"));
                    }
                    let file = match &config {
                        Some(p) => TrainFile::load(p)?,
                        None => TrainFile::default(),
                    };
                    let mut tcfg = file.train;
                    tcfg.seed = seed;
                    let primary = tcfg
                        .primary_language
                        .clone()
                        .or_else(|| corpus.vocab.languages().next().cloned())
                        .unwrap_or_default();
                    let mut plan = if file.stage.is_empty() {
                        build_stage_plan(stage_plan.parse()?, &primary)
                    } else {
                        train::StagePlan { stages: file.stage }
                    };
                    plan.scale_steps(steps_scale);
                    plan.validate()?;
                    let model = match init {
                        Some(dir) => AsrModel::load(&dir)?,
                        None => {
                            let mut cfg = ModelConfig::toy(first_feature_dim(&corpus.train)?, &corpus.vocab);
                            cfg.encoder.num_blocks = plan.stages[0].encoder_depth;
                            AsrModel::new(cfg, corpus.vocab.clone(), &mut seeded(seed), train::DEFAULT_PRECISION)?
                        }
                    };
                    if model.vocab != corpus.vocab {
                        return Err(Error::Vocab("model and corpus vocabularies differ".into()));
                    }
                    let utts = load_utterances(&corpus.train, &model)?;
                    Trainer::new(model, utts, plan, tcfg)?
                }
            };
            trainer.log_to(out.join(METRICS_FILE));
            trainer.run(&out)?;
            let last = trainer.checkpoints.last().cloned();
            trainer.model.save(&out.join("final"))?;
            println!(
                "trained {} steps over {} stages; final model in {}",
                trainer.state.global_step,
                trainer.plan.stages.len(),
                out.join("final").display()
            );
            if let Some(l) = last {
                println!("last stage checkpoint: {}", l.display());
            }
            Ok(())
        }
        Cmd::Decode {
            model,
            manifest,
            out,
            beam,
            lambda_ctc,
            language,
            adapt_language,
            nbest,
            max_len,
        } => {
            let model = AsrModel::load(&model)?;
            let manifest = Manifest::load(&manifest)?;
            manifest.validate()?;
            let cfg = BeamConfig {
                beam_size: beam,
                lambda_ctc,
                max_len,
                nbest,
                length_bonus: 0.0,
            };
            cfg.validate()?;
            let mut rows = Vec::with_capacity(manifest.entries.len());
            for e in &manifest.entries {
                let feats = manifest.load_features(e)?.to_precision(model.precision());
                let r = model.recognize(&feats, &cfg, language.as_deref(), adapt_language.as_deref())?;
                rows.push(DecodeRow {
                    utt_id: &e.utt_id,
                    text: r.text,
                    language: r.language,
                    joint: r.joint,
                    ctc: r.ctc,
                    att: r.att,
                    truncated: r.truncated,
                    nbest: if nbest > 1 { r.nbest } else { Vec::new() },
                });
            }
            data::write_jsonl(&out, &rows)?;
            println!("decoded {} utterances", rows.len());
            Ok(())
        }
        Cmd::Score { refs, hyps, hours, out } => {
            let refs: Vec<Reference> = data::read_jsonl(&refs)?;
            let hyps: Vec<Reference> = data::read_jsonl(&hyps)?;
            let hours: Vec<HoursRow> = data::read_jsonl(&hours)?;
            let report = score_corpus(&refs, &hyps, &hours);
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_report(&report, &out)?;
            print!("{}", render_report(&report));
            Ok(())
        }
        Cmd::InspectCheckpoint { dir } => inspect(&dir),
    }
}

fn first_feature_dim(m: &Manifest) -> Result<usize> {
    let e = m
        .entries
        .first()
        .ok_or_else(|| Error::validation("manifest is empty"))?;
    Ok(m.load_features(e)?.matrix_dims().1)
}

fn inspect(dir: &Path) -> Result<()> {
    let model = AsrModel::load(dir)?;
    let c = &model.cfg;
    println!(
        "frontend: {} blocks, width {}; encoder: {} blocks, width {}, taps {:?}; decoder: {} layers",
        c.ssl.num_blocks,
        c.ssl.hidden_dim,
        c.encoder.num_blocks,
        c.encoder.hidden_dim,
        model.encoder.taps(),
        c.decoder.num_layers
    );
    println!(
        "vocabulary: {} tokens, languages {:?}",
        model.vocab.len(),
        model.vocab.languages().collect::<Vec<_>>()
    );
    for (name, t) in model.params.iter() {
        println!("{name:<48} {:?}", t.shape());
    }
    println!("total values: {}", model.params.num_values());
    Ok(())
}
