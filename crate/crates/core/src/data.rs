//! Corpus manifests, binary feature files and the synthetic corpus generator.
//!
//! Feature file layout: `T` and `F` as little-endian `u32`, then `T·F`
//! little-endian `f32` values in row-major order.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, derived};
use crate::ssl::FRAME_RATE;
use crate::tensor::{Precision, Tensor};
use crate::vocab::Vocab;

pub const THREADS_ENV: &str = "WHALE_KIT_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utt_id: String,
    /// Relative paths resolve against the manifest's directory.
    pub features_path: String,
    pub num_frames: usize,
    pub transcript: String,
    pub language: String,
    pub duration_sec: f64,
}

/// Reads any JSONL file of `T` rows, skipping blank lines.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::validation(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(Manifest {
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            entries: read_jsonl(path)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.entries)
    }

    pub fn features_path(&self, e: &ManifestEntry) -> PathBuf {
        let p = Path::new(&e.features_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn load_features(&self, e: &ManifestEntry) -> Result<Tensor> {
        read_features(&self.features_path(e))
    }

    /// Checks id uniqueness, durations and every feature-file header.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.utt_id.as_str()) {
                return Err(Error::validation(format!("duplicate utt_id {}", e.utt_id)));
            }
            if e.num_frames == 0 {
                return Err(Error::validation(format!("{}: zero frames", e.utt_id)));
            }
            let want = e.num_frames as f64 / FRAME_RATE as f64;
            if (e.duration_sec - want).abs() > 1e-9 {
                return Err(Error::validation(format!(
                    "{}: duration_sec {} but {} frames",
                    e.utt_id, e.duration_sec, e.num_frames
                )));
            }
            let (t, _) = read_header(&self.features_path(e))?;
            if t != e.num_frames {
                return Err(Error::validation(format!(
                    "{}: manifest says {} frames, feature file has {t}",
                    e.utt_id, e.num_frames
                )));
            }
        }
        Ok(())
    }

    pub fn hours_by_language(&self) -> IndexMap<String, f64> {
        let mut out: IndexMap<String, f64> = IndexMap::new();
        for e in &self.entries {
            *out.entry(e.language.clone()).or_default() += e.duration_sec / 3600.0;
        }
        out
    }
}

pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    let (t, f) = features.matrix_dims();
    let mut buf = Vec::with_capacity(8 + 4 * t * f);
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(f as u32).to_le_bytes());
    for &x in features.data() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_header(path: &Path) -> Result<(usize, usize)> {
    use std::io::Read;
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = [0u8; 8];
    f.read_exact(&mut h).map_err(|e| Error::io(path, e))?;
    Ok((
        u32::from_le_bytes(h[..4].try_into().unwrap()) as usize,
        u32::from_le_bytes(h[4..].try_into().unwrap()) as usize,
    ))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::validation(format!("{}: truncated header", path.display())));
    }
    let t = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + 4 * t * f {
        return Err(Error::validation(format!(
            "{}: header says {t}×{f}, payload has {} bytes",
            path.display(),
            bytes.len() - 8
        )));
    }
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::from_matrix(t, f, data, Precision::F32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub code: String,
    pub charset: Vec<String>,
    /// Training hours to generate.
    pub hours: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub languages: Vec<LanguageSpec>,
    pub feature_dim: usize,
    pub tokens_per_second: f64,
    /// Silence frames closing every token segment.
    pub gap_frames: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Standard deviation of token template entries.
    pub template_scale: f64,
    /// Standard deviation of per-frame noise.
    pub noise: f64,
    pub heldout_per_language: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Two languages sharing two characters.
    pub fn toy(seed: u64) -> Self {
        let chars = |s: &str| s.chars().map(String::from).collect::<Vec<_>>();
        SyntheticSpec {
            languages: vec![
                LanguageSpec {
                    code: "en".into(),
                    charset: chars("abcdef "),
                    hours: 0.0045,
                },
                LanguageSpec {
                    code: "ja".into(),
                    charset: chars("efかきくけ"),
                    hours: 0.0045,
                },
            ],
            feature_dim: 16,
            tokens_per_second: 12.5,
            gap_frames: 2,
            min_tokens: 16,
            max_tokens: 28,
            template_scale: 1.0,
            noise: 0.5,
            heldout_per_language: 10,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.languages.is_empty() {
            return Err(Error::validation("synthetic spec has no languages"));
        }
        for l in &self.languages {
            if !(l.hours > 0.0) {
                return Err(Error::validation(format!("language {} has zero hours", l.code)));
            }
            if l.charset.is_empty() || l.charset.iter().all(|c| c == " ") {
                return Err(Error::validation(format!("language {} has an empty charset", l.code)));
            }
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::validation("token count range is empty"));
        }
        if self.frames_per_token() <= self.gap_frames + 1 {
            return Err(Error::validation(
                "tokens_per_second leaves no frames for the token itself",
            ));
        }
        Ok(())
    }

    pub fn frames_per_token(&self) -> usize {
        (FRAME_RATE as f64 / self.tokens_per_second).round() as usize
    }

    pub fn vocab(&self) -> Result<Vocab> {
        let sets: IndexMap<String, Vec<String>> = self
            .languages
            .iter()
            .map(|l| (l.code.clone(), l.charset.clone()))
            .collect();
        Vocab::from_charsets(&sets)
    }
}

/// Token sequence and segment lengths of one utterance.
#[derive(Debug, Clone)]
struct UttPlan {
    lang: usize,
    text: String,
    tokens: Vec<usize>,
    seg_frames: Vec<usize>,
    num_frames: usize,
    seed: u64,
}

const PLAN_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const TEMPLATE_STREAM: u64 = 3;
const HELDOUT_OFFSET: u64 = 1 << 32;

fn plan_utterance(spec: &SyntheticSpec, vocab: &Vocab, lang: usize, index: u64) -> Result<UttPlan> {
    let seed = derive_seed(derive_seed(spec.seed, lang as u64), index);
    let mut rng = derived(seed, PLAN_STREAM);
    let chars = &spec.languages[lang].charset;
    let n = rng.gen_range(spec.min_tokens..=spec.max_tokens);
    let mut text = String::new();
    let mut prev_space = true;
    for i in 0..n {
        let last = i + 1 == n;
        let pick = loop {
            let c = &chars[rng.gen_range(0..chars.len())];
            if c != " " || !(prev_space || last) {
                break c;
            }
        };
        prev_space = pick == " ";
        text.push_str(pick);
    }
    let tokens = vocab.encode(&text)?;
    let base = spec.frames_per_token();
    let seg_frames: Vec<usize> = tokens.iter().map(|_| base + rng.gen_range(0..=2) - 1).collect();
    let num_frames = spec.gap_frames + seg_frames.iter().sum::<usize>();
    Ok(UttPlan {
        lang,
        text,
        tokens,
        seg_frames,
        num_frames,
        seed,
    })
}

fn templates(spec: &SyntheticSpec, vocab_size: usize) -> Vec<Vec<f64>> {
    let mut rng = derived(spec.seed, TEMPLATE_STREAM);
    let normal = Normal::new(0.0, spec.template_scale).expect("finite scale");
    (0..vocab_size)
        .map(|_| (0..spec.feature_dim).map(|_| normal.sample(&mut rng)).collect())
        .collect()
}

fn render(spec: &SyntheticSpec, plan: &UttPlan, templates: &[Vec<f64>]) -> Tensor {
    let f = spec.feature_dim;
    let mut rng = derived(plan.seed, NOISE_STREAM);
    let noise = Normal::new(0.0, spec.noise).expect("finite noise");
    let mut data = Vec::with_capacity(plan.num_frames * f);
    let silence = |data: &mut Vec<f64>, rng: &mut crate::rng::WkRng| {
        for _ in 0..f {
            data.push(noise.sample(rng));
        }
    };
    for _ in 0..spec.gap_frames {
        silence(&mut data, &mut rng);
    }
    for (&tok, &seg) in plan.tokens.iter().zip(&plan.seg_frames) {
        for i in 0..seg {
            if i + spec.gap_frames >= seg {
                silence(&mut data, &mut rng);
            } else {
                for &m in &templates[tok] {
                    data.push(m + noise.sample(&mut rng));
                }
            }
        }
    }
    Tensor::from_matrix(plan.num_frames, f, data, Precision::F32).expect("planned length")
}

/// Worker threads from `WHALE_KIT_THREADS`, default 1.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Reference {
    pub utt_id: String,
    pub text: String,
    pub language: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HoursRow {
    pub language: String,
    pub hours: f64,
}

pub const TRAIN_MANIFEST: &str = "train.jsonl";
pub const HELDOUT_MANIFEST: &str = "heldout.jsonl";
pub const HELDOUT_REFS: &str = "heldout_refs.jsonl";
pub const TRAIN_REFS: &str = "train_refs.jsonl";
pub const HOURS_FILE: &str = "hours.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";
pub const SPEC_FILE: &str = "spec.json";

/// Paths written by [`gen_synthetic_corpus`].
#[derive(Debug, Clone)]
pub struct Corpus {
    pub dir: PathBuf,
    pub train: Manifest,
    pub heldout: Manifest,
    pub vocab: Vocab,
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Corpus {
            dir: dir.to_path_buf(),
            train: Manifest::load(&dir.join(TRAIN_MANIFEST))?,
            heldout: Manifest::load(&dir.join(HELDOUT_MANIFEST))?,
            vocab: Vocab::load(&dir.join(VOCAB_FILE))?,
        })
    }
}

/// Generates the training and held-out splits, vocabulary, references and
/// hours table under `out_dir`. Output is identical for any thread count.
pub fn gen_synthetic_corpus(spec: &SyntheticSpec, out_dir: &Path) -> Result<Corpus> {
    spec.validate()?;
    let vocab = spec.vocab()?;
    let feats_dir = out_dir.join("feats");
    fs::create_dir_all(&feats_dir).map_err(|e| Error::io(&feats_dir, e))?;

    let mut train_plans = Vec::new();
    let mut heldout_plans = Vec::new();
    for (li, lang) in spec.languages.iter().enumerate() {
        let target = lang.hours * 3600.0 * FRAME_RATE as f64;
        let mut frames = 0usize;
        let mut i = 0u64;
        while (frames as f64) < target {
            let p = plan_utterance(spec, &vocab, li, i)?;
            frames += p.num_frames;
            train_plans.push((format!("{}-train-{i:05}", lang.code), p));
            i += 1;
        }
        for j in 0..spec.heldout_per_language as u64 {
            let p = plan_utterance(spec, &vocab, li, HELDOUT_OFFSET + j)?;
            heldout_plans.push((format!("{}-heldout-{j:05}", lang.code), p));
        }
    }

    let tmpl = templates(spec, vocab.len());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| Error::validation(format!("thread pool: {e}")))?;
    let write_split = |plans: &[(String, UttPlan)]| -> Result<Vec<ManifestEntry>> {
        pool.install(|| {
            plans
                .par_iter()
                .map(|(id, p)| {
                    let feats = render(spec, p, &tmpl);
                    let rel = format!("feats/{id}.feat");
                    write_features(&out_dir.join(&rel), &feats)?;
                    Ok(ManifestEntry {
                        utt_id: id.clone(),
                        features_path: rel,
                        num_frames: p.num_frames,
                        transcript: p.text.clone(),
                        language: spec.languages[p.lang].code.clone(),
                        duration_sec: p.num_frames as f64 / FRAME_RATE as f64,
                    })
                })
                .collect()
        })
    };
    let train = Manifest {
        base_dir: out_dir.to_path_buf(),
        entries: write_split(&train_plans)?,
    };
    let heldout = Manifest {
        base_dir: out_dir.to_path_buf(),
        entries: write_split(&heldout_plans)?,
    };
    train.save(&out_dir.join(TRAIN_MANIFEST))?;
    heldout.save(&out_dir.join(HELDOUT_MANIFEST))?;
    vocab.save(&out_dir.join(VOCAB_FILE))?;
    let refs = |m: &Manifest| -> Vec<Reference> {
        m.entries
            .iter()
            .map(|e| Reference {
                utt_id: e.utt_id.clone(),
                text: e.transcript.clone(),
                language: e.language.clone(),
            })
            .collect()
    };
    write_jsonl(&out_dir.join(HELDOUT_REFS), &refs(&heldout))?;
    write_jsonl(&out_dir.join(TRAIN_REFS), &refs(&train))?;
    let hours: Vec<HoursRow> = train
        .hours_by_language()
        .into_iter()
        .map(|(language, hours)| HoursRow { language, hours })
        .collect();
    write_jsonl(&out_dir.join(HOURS_FILE), &hours)?;
    let spec_path = out_dir.join(SPEC_FILE);
    let mut f = fs::File::create(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
    f.write_all(serde_json::to_string_pretty(spec)?.as_bytes())
        .map_err(|e| Error::io(&spec_path, e))?;
    Ok(Corpus {
        dir: out_dir.to_path_buf(),
        train,
        heldout,
        vocab,
    })
}
