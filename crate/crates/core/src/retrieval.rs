//! TF-IDF prototype retrieval.
//!
//! Index file layout (UTF-8, `\t` separated, one record per line):
//!
//! ```text
//! PESGIDX\t1
//! terms\t<T>
//! <term>\t<idf>                       T lines, term order defines term ids
//! docs\t<N>
//! <doc text>\t<summary text>\t<norm>\t<tid>:<weight> ...   N lines, line i is corpus id i
//! ```
//!
//! Floats are written in shortest round-trip form, so load(save(x)) == x.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::text::{tokenize, PairedRecord, RawRecord};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot index an empty corpus")]
    EmptyCorpus,
    #[error("record {id} has an empty or missing `{field}`")]
    MissingField { id: usize, field: &'static str },
    #[error("no candidates left after excluding {0:?}")]
    NoCandidates(Option<usize>),
    #[error("pair cache refers to id {id}, index holds {len}")]
    BadPair { id: usize, len: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    doc: String,
    summary: String,
    /// Sorted by term id, zero weights dropped.
    weights: Vec<(usize, f64)>,
    norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtoIndex {
    terms: Vec<String>,
    term_ids: HashMap<String, usize>,
    idf: Vec<f64>,
    entries: Vec<Entry>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub id: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Retrieved<'a> {
    pub id: usize,
    pub doc: &'a str,
    pub summary: &'a str,
    pub score: f64,
}

fn term_counts<'a>(tokens: impl IntoIterator<Item = &'a str>) -> BTreeMap<&'a str, usize> {
    let mut tf = BTreeMap::new();
    for t in tokens {
        *tf.entry(t).or_insert(0) += 1;
    }
    tf
}

fn norm(weights: &[(usize, f64)]) -> f64 {
    weights.iter().map(|(_, w)| w * w).sum::<f64>().sqrt()
}

impl ProtoIndex {
    pub fn build(corpus: &[RawRecord]) -> Result<Self, RetrievalError> {
        if corpus.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let mut terms = Vec::new();
        let mut term_ids = HashMap::new();
        let mut df: Vec<usize> = Vec::new();
        let mut counts = Vec::with_capacity(corpus.len());
        for (id, rec) in corpus.iter().enumerate() {
            let doc = rec.doc_text();
            if doc.split_whitespace().next().is_none() {
                return Err(RetrievalError::MissingField { id, field: "doc" });
            }
            if rec.summary_text().split_whitespace().next().is_none() {
                return Err(RetrievalError::MissingField { id, field: "summary" });
            }
            let tf = term_counts(doc.split_whitespace());
            let mut ids = Vec::with_capacity(tf.len());
            for (&t, &c) in &tf {
                let tid = *term_ids.entry(t.to_string()).or_insert_with(|| {
                    terms.push(t.to_string());
                    df.push(0);
                    terms.len() - 1
                });
                df[tid] += 1;
                ids.push((tid, c));
            }
            counts.push(ids);
        }
        let n = corpus.len() as f64;
        let idf: Vec<f64> = df.iter().map(|&d| (n / d as f64).ln()).collect();
        let entries = corpus
            .iter()
            .zip(counts)
            .map(|(rec, ids)| {
                let mut weights: Vec<(usize, f64)> = ids
                    .into_iter()
                    .map(|(tid, c)| (tid, c as f64 * idf[tid]))
                    .filter(|&(_, w)| w != 0.0)
                    .collect();
                weights.sort_by_key(|&(tid, _)| tid);
                Entry {
                    doc: tokenize(rec.doc_text()).join(" "),
                    summary: tokenize(rec.summary_text()).join(" "),
                    norm: norm(&weights),
                    weights,
                }
            })
            .collect();
        Ok(Self { terms, term_ids, idf, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        self.term_ids.get(term).map(|&t| self.idf[t])
    }

    /// TF-IDF weight of `term` in indexed document `id`.
    pub fn weight(&self, id: usize, term: &str) -> f64 {
        let Some(&tid) = self.term_ids.get(term) else { return 0.0 };
        self.entries[id]
            .weights
            .binary_search_by_key(&tid, |&(t, _)| t)
            .map(|i| self.entries[id].weights[i].1)
            .unwrap_or(0.0)
    }

    pub fn norm(&self, id: usize) -> f64 {
        self.entries[id].norm
    }

    pub fn doc(&self, id: usize) -> &str {
        &self.entries[id].doc
    }

    pub fn summary(&self, id: usize) -> &str {
        &self.entries[id].summary
    }

    fn query_vector(&self, query: &str) -> Vec<(usize, f64)> {
        let mut q: Vec<(usize, f64)> = term_counts(query.split_whitespace())
            .into_iter()
            .filter_map(|(t, c)| self.term_ids.get(t).map(|&tid| (tid, c as f64 * self.idf[tid])))
            .filter(|&(_, w)| w != 0.0)
            .collect();
        q.sort_by_key(|&(tid, _)| tid);
        q
    }

    fn cosine(q: &[(usize, f64)], qn: f64, e: &Entry) -> f64 {
        if qn == 0.0 || e.norm == 0.0 {
            return 0.0;
        }
        let (mut i, mut j, mut dot) = (0, 0, 0.0);
        while i < q.len() && j < e.weights.len() {
            match q[i].0.cmp(&e.weights[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    dot += q[i].1 * e.weights[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        (dot / (qn * e.norm)).clamp(0.0, 1.0)
    }

    /// Cosine similarity of `query` against every indexed document.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        let q = self.query_vector(query);
        let qn = norm(&q);
        self.entries.iter().map(|e| Self::cosine(&q, qn, e)).collect()
    }

    /// Best `k` documents by score, ties to the lower id.
    pub fn top_k(&self, query: &str, k: usize, exclude: Option<usize>) -> Vec<Hit> {
        let mut hits: Vec<Hit> = self
            .scores(query)
            .into_iter()
            .enumerate()
            .filter(|&(id, _)| Some(id) != exclude)
            .map(|(id, score)| Hit { id, score })
            .collect();
        hits.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
        hits.truncate(k);
        hits
    }

    pub fn retrieve(&self, query: &str, exclude: Option<usize>) -> Result<Retrieved<'_>, RetrievalError> {
        let hit = self
            .top_k(query, 1, exclude)
            .pop()
            .ok_or(RetrievalError::NoCandidates(exclude))?;
        Ok(Retrieved {
            id: hit.id,
            doc: self.doc(hit.id),
            summary: self.summary(hit.id),
            score: hit.score,
        })
    }

    /// Prototype id for every record; `self_exclude` skips the record's own id.
    pub fn pair_corpus(&self, corpus: &[RawRecord], self_exclude: bool) -> Result<Vec<usize>, RetrievalError> {
        let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(8);
        let chunk = corpus.len().div_ceil(threads).max(1);
        let parts: Vec<Result<Vec<usize>, RetrievalError>> = std::thread::scope(|s| {
            let handles: Vec<_> = corpus
                .chunks(chunk)
                .enumerate()
                .map(|(ci, recs)| {
                    s.spawn(move || {
                        recs.iter()
                            .enumerate()
                            .map(|(i, r)| {
                                let exclude = self_exclude.then_some(ci * chunk + i);
                                self.retrieve(r.doc_text(), exclude).map(|h| h.id)
                            })
                            .collect()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("retrieval worker panicked")).collect()
        });
        let mut out = Vec::with_capacity(corpus.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Attaches the prototype named by `pairs[i]` to `corpus[i]`.
    pub fn attach(&self, corpus: &[RawRecord], pairs: &[usize]) -> Result<Vec<PairedRecord>, RetrievalError> {
        corpus
            .iter()
            .zip(pairs)
            .map(|(r, &p)| {
                if p >= self.len() {
                    return Err(RetrievalError::BadPair { id: p, len: self.len() });
                }
                Ok(PairedRecord {
                    doc: r.doc.clone(),
                    summary: r.summary.clone(),
                    proto_doc: Some(self.doc(p).to_string()),
                    proto_summary: Some(self.summary(p).to_string()),
                })
            })
            .collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "PESGIDX\t1")?;
        writeln!(w, "terms\t{}", self.terms.len())?;
        for (t, idf) in self.terms.iter().zip(&self.idf) {
            writeln!(w, "{t}\t{idf:?}")?;
        }
        writeln!(w, "docs\t{}", self.entries.len())?;
        for e in &self.entries {
            write!(w, "{}\t{}\t{:?}\t", e.doc, e.summary, e.norm)?;
            let ws: Vec<String> = e.weights.iter().map(|(t, v)| format!("{t}:{v:?}")).collect();
            writeln!(w, "{}", ws.join(" "))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, RetrievalError> {
        let mut lines = r.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, String), RetrievalError> {
            match lines.next() {
                Some((i, l)) => Ok((i + 1, l?)),
                None => Err(RetrievalError::Parse { line: 0, msg: format!("unexpected end of file, expected {what}") }),
            }
        };
        let bad = |line: usize, msg: &str| RetrievalError::Parse { line, msg: msg.to_string() };
        let (ln, header) = next("header")?;
        if header != "PESGIDX\t1" {
            return Err(bad(ln, "not a version 1 index file"));
        }
        let count = |ln: usize, l: &str, key: &str| -> Result<usize, RetrievalError> {
            l.strip_prefix(key)
                .and_then(|s| s.strip_prefix('\t'))
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(ln, &format!("expected `{key}\\t<count>`")))
        };
        let (ln, l) = next("term count")?;
        let nt = count(ln, &l, "terms")?;
        let mut terms = Vec::with_capacity(nt);
        let mut idf = Vec::with_capacity(nt);
        for _ in 0..nt {
            let (ln, l) = next("term")?;
            let (t, v) = l.split_once('\t').ok_or_else(|| bad(ln, "expected `term\\tidf`"))?;
            terms.push(t.to_string());
            idf.push(v.parse::<f64>().map_err(|_| bad(ln, "bad idf"))?);
        }
        let (ln, l) = next("doc count")?;
        let nd = count(ln, &l, "docs")?;
        let mut entries = Vec::with_capacity(nd);
        for _ in 0..nd {
            let (ln, l) = next("doc")?;
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 4 {
                return Err(bad(ln, "expected 4 tab-separated fields"));
            }
            let mut weights = Vec::new();
            for p in f[3].split_whitespace() {
                let (t, v) = p.split_once(':').ok_or_else(|| bad(ln, "bad weight pair"))?;
                let t: usize = t.parse().map_err(|_| bad(ln, "bad term id"))?;
                if t >= nt {
                    return Err(bad(ln, "term id out of range"));
                }
                weights.push((t, v.parse::<f64>().map_err(|_| bad(ln, "bad weight"))?));
            }
            entries.push(Entry {
                doc: f[0].to_string(),
                summary: f[1].to_string(),
                norm: f[2].parse().map_err(|_| bad(ln, "bad norm"))?,
                weights,
            });
        }
        if entries.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let term_ids = terms.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self { terms, term_ids, idf, entries })
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Writes `id<TAB>proto_id` lines.
pub fn save_pairs(path: &Path, pairs: &[usize]) -> Result<(), RetrievalError> {
    let mut w = BufWriter::new(File::create(path)?);
    for (i, p) in pairs.iter().enumerate() {
        writeln!(w, "{i}\t{p}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_pairs(path: &Path) -> Result<Vec<usize>, RetrievalError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        let parsed = line
            .split_once('\t')
            .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)));
        match parsed {
            Some((id, p)) if id == i => out.push(p),
            _ => {
                return Err(RetrievalError::Parse {
                    line: i + 1,
                    msg: format!("expected `{i}\\t<proto id>`"),
                })
            }
        }
    }
    Ok(out)
}
