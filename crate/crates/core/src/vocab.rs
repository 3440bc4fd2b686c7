//! Token inventory shared by the CTC branch and the decoder.
//!
//! Layout: `<blank>` at id 0, then the union of all language charsets in
//! sorted order, then `<sos>`, `<eos>`, then one `<xx>` token per language.
//! Every non-special token is a single character.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLANK: &str = "<blank>";
pub const SOS: &str = "<sos>";
pub const EOS: &str = "<eos>";
pub const BLANK_ID: usize = 0;

/// On-disk form (`vocab.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabFile {
    pub tokens: Vec<String>,
    pub charsets: IndexMap<String, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    sos: usize,
    eos: usize,
    language_tokens: IndexMap<String, usize>,
    charsets: IndexMap<String, Vec<usize>>,
}

fn language_token(lang: &str) -> String {
    format!("<{lang}>")
}

impl Vocab {
    /// Builds the canonical layout from per-language character sets.
    pub fn from_charsets(charsets: &IndexMap<String, Vec<String>>) -> Result<Self> {
        let mut chars: Vec<String> = charsets.values().flatten().cloned().collect();
        chars.sort();
        chars.dedup();
        let mut tokens = vec![BLANK.to_string()];
        tokens.extend(chars);
        tokens.push(SOS.into());
        tokens.push(EOS.into());
        tokens.extend(charsets.keys().map(|l| language_token(l)));
        Vocab::from_file(VocabFile {
            tokens,
            charsets: charsets.clone(),
        })
    }

    pub fn from_file(file: VocabFile) -> Result<Self> {
        if file.tokens.first().map(String::as_str) != Some(BLANK) {
            return Err(Error::Vocab(format!("token 0 must be {BLANK}")));
        }
        let mut index = HashMap::new();
        for (i, t) in file.tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t:?}")));
            }
        }
        let sos = *index.get(SOS).ok_or_else(|| Error::Vocab("missing <sos>".into()))?;
        let eos = *index.get(EOS).ok_or_else(|| Error::Vocab("missing <eos>".into()))?;
        let mut language_tokens = IndexMap::new();
        let mut charsets = IndexMap::new();
        for (lang, set) in &file.charsets {
            let lt = language_token(lang);
            let id = *index
                .get(&lt)
                .ok_or_else(|| Error::Vocab(format!("missing language token {lt}")))?;
            language_tokens.insert(lang.clone(), id);
            let mut ids = Vec::with_capacity(set.len());
            for tok in set {
                let id = *index
                    .get(tok)
                    .ok_or_else(|| Error::Vocab(format!("charset {lang}: unknown token {tok:?}")))?;
                if is_special(tok) {
                    return Err(Error::Vocab(format!("charset {lang}: special token {tok} not allowed")));
                }
                if tok.chars().count() != 1 {
                    return Err(Error::Vocab(format!(
                        "charset {lang}: token {tok:?} is not one character"
                    )));
                }
                ids.push(id);
            }
            ids.sort_unstable();
            ids.dedup();
            charsets.insert(lang.clone(), ids);
        }
        Ok(Vocab {
            tokens: file.tokens,
            index,
            sos,
            eos,
            language_tokens,
            charsets,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::from_file(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_file())?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn to_file(&self) -> VocabFile {
        VocabFile {
            tokens: self.tokens.clone(),
            charsets: self
                .charsets
                .iter()
                .map(|(l, ids)| (l.clone(), ids.iter().map(|&i| self.tokens[i].clone()).collect()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn blank(&self) -> usize {
        BLANK_ID
    }

    pub fn sos(&self) -> usize {
        self.sos
    }

    pub fn eos(&self) -> usize {
        self.eos
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn languages(&self) -> impl Iterator<Item = &String> {
        self.charsets.keys()
    }

    pub fn language_token(&self, lang: &str) -> Result<usize> {
        self.language_tokens
            .get(lang)
            .copied()
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    }

    pub fn language_of_token(&self, id: usize) -> Option<&str> {
        self.language_tokens
            .iter()
            .find(|(_, &t)| t == id)
            .map(|(l, _)| l.as_str())
    }

    pub fn language_token_ids(&self) -> Vec<usize> {
        self.language_tokens.values().copied().collect()
    }

    pub fn charset(&self, lang: &str) -> Result<&[usize]> {
        self.charsets
            .get(lang)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    }

    /// True for ids that CTC may emit (everything except blank and specials).
    pub fn is_label(&self, id: usize) -> bool {
        id != BLANK_ID && id < self.tokens.len() && !is_special(&self.tokens[id])
    }

    pub fn label_ids(&self) -> Vec<usize> {
        (0..self.tokens.len()).filter(|&i| self.is_label(i)).collect()
    }

    /// Maps each character of `text` to its token id.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                let mut buf = [0u8; 4];
                let s = c.encode_utf8(&mut buf);
                self.index
                    .get(&*s)
                    .copied()
                    .filter(|&i| self.is_label(i))
                    .ok_or_else(|| Error::Vocab(format!("character {c:?} not in vocabulary")))
            })
            .collect()
    }

    /// Concatenates label tokens, skipping blank and specials.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| self.is_label(i))
            .map(|&i| self.tokens[i].as_str())
            .collect()
    }
}

fn is_special(tok: &str) -> bool {
    tok.len() > 2 && tok.starts_with('<') && tok.ends_with('>')
}
