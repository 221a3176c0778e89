//! Tokenization, vocabulary, example encoding and corpus files.
//!
//! The corpus is pre-tokenized and anonymized: tokens are separated by
//! whitespace and entities already replaced by tags such as `PERS`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Anonymization tags; always in the vocabulary as atomic tokens.
pub const TAGS: [&str; 6] = ["PERS", "NUM", "DATE", "MONEY", "YEARS", "MONTHS"];

pub const DEFAULT_MAX_SRC_LEN: usize = 250;
pub const DEFAULT_MAX_TGT_LEN: usize = 100;
pub const DEFAULT_VOCAB_SIZE: usize = 5000;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("vocabulary cap must exceed {min}, got {cap}")]
    CapTooSmall { cap: usize, min: usize },
    #[error("record is missing field `{0}`")]
    MissingField(&'static str),
    #[error("field `{0}` has no tokens")]
    EmptyField(&'static str),
    #[error("id {id} outside vocabulary of {vocab} plus {oov} source OOVs")]
    IdOutOfRange { id: usize, vocab: usize, oov: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Whitespace tokenizer; empty fields are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Most frequent tokens up to `cap` entries in total, after the reserved
    /// symbols and the tags. Frequency ties keep first-occurrence order.
    pub fn build<I, S>(corpus: I, cap: usize) -> Result<Self, TextError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[String]>,
    {
        let min = RESERVED.len() + TAGS.len();
        if cap <= min {
            return Err(TextError::CapTooSmall { cap, min });
        }
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
        let mut order = 0usize;
        let docs: Vec<S> = corpus.into_iter().collect();
        for doc in &docs {
            for tok in doc.as_ref() {
                let e = counts.entry(tok.as_str()).or_insert_with(|| {
                    order += 1;
                    (0, order)
                });
                e.0 += 1;
            }
        }
        if counts.is_empty() {
            return Err(TextError::EmptyCorpus);
        }
        let mut ranked: Vec<(&str, usize, usize)> = counts.into_iter().map(|(t, (c, o))| (t, c, o)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));

        let mut tokens: Vec<String> = RESERVED.iter().chain(TAGS.iter()).map(|s| s.to_string()).collect();
        for (tok, _, _) in ranked {
            if tokens.len() >= cap {
                break;
            }
            if !RESERVED.contains(&tok) && !TAGS.contains(&tok) {
                tokens.push(tok.to_string());
            }
        }
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or `UNK`.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        let mut w = BufWriter::new(File::create(path)?);
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        let r = BufReader::new(File::open(path)?);
        let mut tokens = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let tok = line.trim_end_matches(['\r', '\n']);
            if tok.is_empty() || tok.contains(char::is_whitespace) {
                return Err(TextError::Parse {
                    line: i + 1,
                    msg: format!("bad vocabulary token {tok:?}"),
                });
            }
            tokens.push(tok.to_string());
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(TextError::Parse {
                    line: i + 1,
                    msg: format!("expected reserved token {r}"),
                });
            }
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// One corpus line: `{"doc": "...", "summary": "..."}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
}

impl RawRecord {
    pub fn new(doc: impl Into<String>, summary: impl Into<String>) -> Self {
        Self {
            doc: Some(doc.into()),
            summary: Some(summary.into()),
        }
    }

    pub fn doc_text(&self) -> &str {
        self.doc.as_deref().unwrap_or("")
    }

    pub fn summary_text(&self) -> &str {
        self.summary.as_deref().unwrap_or("")
    }
}

/// An input record with its retrieved prototype attached.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairedRecord {
    pub doc: Option<String>,
    pub summary: Option<String>,
    pub proto_doc: Option<String>,
    pub proto_summary: Option<String>,
}

pub fn read_corpus(path: &Path) -> Result<Vec<RawRecord>, TextError> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord = serde_json::from_str(&line).map_err(|e| TextError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, records: &[RawRecord]) -> Result<(), TextError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| TextError::Parse { line: 0, msg: e.to_string() })?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limits {
    pub max_src_len: usize,
    pub max_tgt_len: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_src_len: DEFAULT_MAX_SRC_LEN,
            max_tgt_len: DEFAULT_MAX_TGT_LEN,
        }
    }
}

/// Encoded training / inference record.
///
/// `doc` and `summary` use extended ids: a source token outside the
/// vocabulary gets id `vocab.len() + k`, where `k` is its position in
/// `oov`. Summary tokens outside the vocabulary that do not occur in the
/// source become `UNK`. Prototype sequences never carry extended ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub doc: Vec<usize>,
    pub summary: Vec<usize>,
    pub proto_doc: Vec<usize>,
    pub proto_summary: Vec<usize>,
    pub oov: Vec<String>,
}

impl Example {
    pub fn extended_vocab_size(&self, vocab_size: usize) -> usize {
        vocab_size + self.oov.len()
    }

    /// Source ids with extended ids mapped back to `UNK` (encoder input).
    pub fn doc_input(&self, vocab_size: usize) -> Vec<usize> {
        self.doc.iter().map(|&i| if i >= vocab_size { UNK } else { i }).collect()
    }

    /// Decoder inputs `BOS y_1 .. y_n` and targets `y_1 .. y_n EOS`.
    pub fn teacher_forcing(&self, vocab_size: usize) -> (Vec<usize>, Vec<usize>) {
        let mut inputs = Vec::with_capacity(self.summary.len() + 1);
        inputs.push(BOS);
        inputs.extend(self.summary.iter().map(|&i| if i >= vocab_size { UNK } else { i }));
        let mut targets = self.summary.clone();
        targets.push(EOS);
        (inputs, targets)
    }

    /// Targets padded with `PAD` to `len`, plus a 1/0 mask over real positions.
    pub fn padded_targets(&self, len: usize) -> (Vec<usize>, Vec<bool>) {
        let mut targets = self.summary.clone();
        targets.push(EOS);
        let real = targets.len().min(len);
        targets.truncate(len);
        targets.resize(len, PAD);
        let mask = (0..len).map(|i| i < real).collect();
        (targets, mask)
    }

    /// Resolves ids (extended ones through `oov`) to tokens.
    pub fn decode(&self, ids: &[usize], vocab: &Vocabulary) -> Result<Vec<String>, TextError> {
        decode_ids(ids, vocab, &self.oov)
    }
}

pub fn decode_ids(ids: &[usize], vocab: &Vocabulary, oov: &[String]) -> Result<Vec<String>, TextError> {
    ids.iter()
        .map(|&id| {
            if let Some(t) = vocab.token(id) {
                Ok(t.to_string())
            } else {
                oov.get(id - vocab.len()).cloned().ok_or(TextError::IdOutOfRange {
                    id,
                    vocab: vocab.len(),
                    oov: oov.len(),
                })
            }
        })
        .collect()
}

fn field(v: &Option<String>, name: &'static str) -> Result<Vec<String>, TextError> {
    let text = v.as_deref().ok_or(TextError::MissingField(name))?;
    let toks = tokenize(text);
    if toks.is_empty() {
        return Err(TextError::EmptyField(name));
    }
    Ok(toks)
}

/// Truncates, assigns extended ids to source OOVs in first-appearance order
/// and encodes the prototype with plain vocabulary ids.
pub fn encode_example(rec: &PairedRecord, vocab: &Vocabulary, limits: Limits) -> Result<Example, TextError> {
    encode(rec, field(&rec.summary, "summary")?, vocab, limits)
}

/// Like [`encode_example`] but for inference: the summary may be absent, in
/// which case the example carries an empty one.
pub fn encode_source(rec: &PairedRecord, vocab: &Vocabulary, limits: Limits) -> Result<Example, TextError> {
    let summary = rec.summary.as_deref().map(tokenize).unwrap_or_default();
    encode(rec, summary, vocab, limits)
}

fn encode(rec: &PairedRecord, mut sum_toks: Vec<String>, vocab: &Vocabulary, limits: Limits) -> Result<Example, TextError> {
    let mut doc_toks = field(&rec.doc, "doc")?;
    let mut pdoc = field(&rec.proto_doc, "proto_doc")?;
    let mut psum = field(&rec.proto_summary, "proto_summary")?;
    doc_toks.truncate(limits.max_src_len);
    pdoc.truncate(limits.max_src_len);
    sum_toks.truncate(limits.max_tgt_len);
    psum.truncate(limits.max_tgt_len);

    let mut oov: Vec<String> = Vec::new();
    let doc = doc_toks
        .iter()
        .map(|t| match vocab.get(t) {
            Some(id) => id,
            None => {
                let k = oov.iter().position(|o| o == t).unwrap_or_else(|| {
                    oov.push(t.clone());
                    oov.len() - 1
                });
                vocab.len() + k
            }
        })
        .collect();
    let summary = sum_toks
        .iter()
        .map(|t| match vocab.get(t) {
            Some(id) => id,
            None => oov.iter().position(|o| o == t).map(|k| vocab.len() + k).unwrap_or(UNK),
        })
        .collect();
    Ok(Example {
        doc,
        summary,
        proto_doc: pdoc.iter().map(|t| vocab.id(t)).collect(),
        proto_summary: psum.iter().map(|t| vocab.id(t)).collect(),
        oov,
    })
}
