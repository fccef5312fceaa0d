//! Bag-of-words corpora.
//!
//! Vocabulary files hold one token per line; the zero-based line number is
//! the term id. Document files hold one document per line:
//! `doc_id term:count term:count ...`. Files ending in `.gz` are read and
//! written gzip-compressed.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};

/// How term counts become encoder inputs. Stored counts are never altered.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Transform {
    #[default]
    None,
    /// `log(1 + count)`
    Log1pTf,
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Transform::None => "none",
            Transform::Log1pTf => "log1p_tf",
        })
    }
}

impl FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Transform::None),
            "log1p_tf" | "log1p" => Ok(Transform::Log1pTf),
            other => Err(Error::Config(format!("unknown transform `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub id: String,
    /// `(term id, count)` sorted by term id, counts >= 1.
    pub terms: Vec<(usize, u32)>,
    pub label: Option<String>,
}

impl Document {
    /// Merges duplicate terms and drops zero counts.
    pub fn new(id: impl Into<String>, terms: impl IntoIterator<Item = (usize, u32)>) -> Self {
        let mut merged: BTreeMap<usize, u32> = BTreeMap::new();
        for (t, c) in terms {
            if c > 0 {
                *merged.entry(t).or_default() += c;
            }
        }
        Document {
            id: id.into(),
            terms: merged.into_iter().collect(),
            label: None,
        }
    }

    /// Total number of tokens.
    pub fn token_count(&self) -> u64 {
        self.terms.iter().map(|&(_, c)| c as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn dense(&self, vocab_size: usize, transform: Transform) -> Vec<f64> {
        let mut v = vec![0.0; vocab_size];
        for &(t, c) in &self.terms {
            v[t] = match transform {
                Transform::None => c as f64,
                Transform::Log1pTf => (c as f64).ln_1p(),
            };
        }
        v
    }

    pub fn term_ids(&self) -> Vec<usize> {
        self.terms.iter().map(|&(t, _)| t).collect()
    }

    pub fn counts(&self) -> Vec<f64> {
        self.terms.iter().map(|&(_, c)| c as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vec<String>,
    pub docs: Vec<Document>,
    pub transform: Transform,
}

/// Counts of what loading dropped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub documents: usize,
    pub dropped_empty: usize,
}

fn open_reader(path: &Path) -> Result<Box<dyn BufRead>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let inner: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(GzDecoder::new(f))
    } else {
        Box::new(f)
    };
    Ok(Box::new(BufReader::new(inner)))
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let result = if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(f, Compression::default());
        enc.write_all(body.as_bytes()).and_then(|_| enc.finish().map(|_| ()))
    } else {
        let mut w = BufWriter::new(f);
        w.write_all(body.as_bytes()).and_then(|_| w.flush())
    };
    result.map_err(|e| Error::io(path, e))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    open_reader(path)?
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(path, e))
}

pub fn load_vocab(path: &Path) -> Result<Vec<String>> {
    let lines = read_lines(path)?;
    let mut vocab = Vec::with_capacity(lines.len());
    for (i, line) in lines.into_iter().enumerate() {
        let tok = line.trim_end_matches('\r').to_string();
        if tok.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "empty vocabulary token".into(),
            });
        }
        vocab.push(tok);
    }
    if vocab.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "empty vocabulary".into(),
        });
    }
    Ok(vocab)
}

/// Parses one document line; `None` for blank lines.
pub fn parse_doc_line(line: &str, vocab_size: usize) -> std::result::Result<Option<Document>, String> {
    let mut fields = line.split_ascii_whitespace();
    let Some(id) = fields.next() else {
        return Ok(None);
    };
    let mut terms = Vec::new();
    for field in fields {
        let (t, c) = field
            .split_once(':')
            .ok_or_else(|| format!("expected term:count, got `{field}`"))?;
        let t: usize = t.parse().map_err(|_| format!("bad term id `{t}`"))?;
        let c: u32 = c.parse().map_err(|_| format!("bad count `{c}`"))?;
        if t >= vocab_size {
            return Err(format!("term id {t} out of range for vocabulary of {vocab_size}"));
        }
        terms.push((t, c));
    }
    Ok(Some(Document::new(id, terms)))
}

/// Reads a document file, dropping documents left without terms.
pub fn load_docs(path: &Path, vocab_size: usize) -> Result<(Vec<Document>, LoadReport)> {
    let mut docs = Vec::new();
    let mut report = LoadReport::default();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        let parsed = parse_doc_line(line, vocab_size).map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        })?;
        match parsed {
            Some(d) if d.is_empty() => report.dropped_empty += 1,
            Some(d) => docs.push(d),
            None => {}
        }
    }
    if docs.is_empty() {
        return Err(Error::NoDocuments(path.to_path_buf()));
    }
    report.documents = docs.len();
    Ok((docs, report))
}

/// `doc_id<TAB>label` per line.
pub fn load_labels(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, label) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: "expected `doc_id<TAB>label`".into(),
        })?;
        out.insert(id.to_string(), label.to_string());
    }
    Ok(out)
}

pub fn load_corpus(
    vocab_path: &Path,
    docs_path: &Path,
    transform: Transform,
    labels_path: Option<&Path>,
) -> Result<(Corpus, LoadReport)> {
    let vocab = load_vocab(vocab_path)?;
    let (mut docs, report) = load_docs(docs_path, vocab.len())?;
    if let Some(lp) = labels_path {
        let labels = load_labels(lp)?;
        for d in &mut docs {
            d.label = labels.get(&d.id).cloned();
        }
    }
    Ok((
        Corpus {
            vocab,
            docs,
            transform,
        },
        report,
    ))
}

impl Corpus {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn dense(&self, doc: &Document) -> Vec<f64> {
        doc.dense(self.vocab.len(), self.transform)
    }

    pub fn docs_text(&self) -> String {
        let mut s = String::new();
        for d in &self.docs {
            s.push_str(&d.id);
            for (t, c) in &d.terms {
                s.push_str(&format!(" {t}:{c}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn save_docs(&self, path: &Path) -> Result<()> {
        write_file(path, &self.docs_text())
    }

    pub fn save_vocab(&self, path: &Path) -> Result<()> {
        let mut s = self.vocab.join("\n");
        s.push('\n');
        write_file(path, &s)
    }

    /// `doc_id<TAB>label` for every labelled document.
    pub fn save_labels(&self, path: &Path) -> Result<()> {
        let s: String = self
            .docs
            .iter()
            .filter_map(|d| d.label.as_ref().map(|l| format!("{}\t{l}\n", d.id)))
            .collect();
        write_file(path, &s)
    }

    /// A corpus sharing this vocabulary and transform with the given docs.
    pub fn with_docs(&self, docs: Vec<Document>) -> Corpus {
        Corpus {
            vocab: self.vocab.clone(),
            docs,
            transform: self.transform,
        }
    }

    /// Splits off the last `n_valid + n_test` documents.
    pub fn split(&self, n_valid: usize, n_test: usize) -> Result<(Corpus, Corpus, Corpus)> {
        let n = self.docs.len();
        if n_valid + n_test >= n {
            return Err(Error::Contract(format!(
                "cannot hold out {n_valid} + {n_test} of {n} documents"
            )));
        }
        let a = n - n_valid - n_test;
        let b = n - n_test;
        Ok((
            self.with_docs(self.docs[..a].to_vec()),
            self.with_docs(self.docs[a..b].to_vec()),
            self.with_docs(self.docs[b..].to_vec()),
        ))
    }
}

/// Writes `<prefix>.vocab`, `<prefix>.docs` and `<prefix>.labels`.
pub fn save_corpus_files(corpus: &Corpus, prefix: &Path) -> Result<[PathBuf; 3]> {
    let with = |ext: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    let paths = [with(".vocab"), with(".docs"), with(".labels")];
    corpus.save_vocab(&paths[0])?;
    corpus.save_docs(&paths[1])?;
    corpus.save_labels(&paths[2])?;
    Ok(paths)
}

/// Fraction of tokens drawn from a document's own vocabulary half.
pub const SYNTH_IN_MODE_MASS: f64 = 0.95;
/// Document lengths are `Poisson(SYNTH_MEAN_LENGTH) + 1`.
pub const SYNTH_MEAN_LENGTH: f64 = 50.0;

/// Two-mode corpus: each document picks mode 0 or 1 uniformly and draws
/// each token from that mode's vocabulary half with probability 0.95,
/// otherwise from the other half, uniformly within a half. Labels are the
/// mode (`"0"` or `"1"`).
pub fn make_synthetic_bimodal(num_docs: usize, vocab_size: usize, seed: u64) -> Result<Corpus> {
    if vocab_size < 2 || vocab_size % 2 != 0 {
        return Err(Error::Contract(format!("synthetic vocabulary size must be even, got {vocab_size}")));
    }
    let half = vocab_size / 2;
    let vocab = (0..vocab_size)
        .map(|i| format!("m{}_{:04}", i / half, i % half))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lengths = Poisson::new(SYNTH_MEAN_LENGTH).expect("positive rate");
    let docs = (0..num_docs)
        .map(|d| {
            let mode = usize::from(rng.random_bool(0.5));
            let len = lengths.sample(&mut rng) as usize + 1;
            let tokens: Vec<(usize, u32)> = (0..len)
                .map(|_| {
                    let side = if rng.random_bool(SYNTH_IN_MODE_MASS) { mode } else { 1 - mode };
                    (side * half + rng.random_range(0..half), 1)
                })
                .collect();
            let mut doc = Document::new(format!("d{d}"), tokens);
            doc.label = Some(mode.to_string());
            doc
        })
        .collect();
    Ok(Corpus {
        vocab,
        docs,
        transform: Transform::None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_doc_line() {
        let d = parse_doc_line("0 3:2 7:1", 10).unwrap().unwrap();
        assert_eq!(d.id, "0");
        assert_eq!(d.terms, vec![(3, 2), (7, 1)]);
        assert_eq!(d.token_count(), 3);
        assert!(parse_doc_line("   ", 10).unwrap().is_none());
        assert!(parse_doc_line("0 3-2", 10).is_err());
        assert!(parse_doc_line("0 12:1", 10).is_err());
        assert!(parse_doc_line("0 a:1", 10).is_err());
    }

    #[test]
    fn merges_duplicates_and_drops_zero_counts() {
        let d = parse_doc_line("x 5:1 2:3 5:2 4:0", 10).unwrap().unwrap();
        assert_eq!(d.terms, vec![(2, 3), (5, 3)]);
    }

    #[test]
    fn log1p_transform() {
        let d = Document::new("a", [(1, 2)]);
        let v = d.dense(3, Transform::Log1pTf);
        assert!((v[1] - 3f64.ln()).abs() < 1e-15);
        assert!((v[1] - 1.0986).abs() < 1e-4);
        assert_eq!(d.dense(3, Transform::None), vec![0.0, 2.0, 0.0]);
        assert_eq!(d.terms, vec![(1, 2)]);
    }

    #[test]
    fn synthetic_rejects_odd_vocab() {
        assert!(make_synthetic_bimodal(10, 7, 0).is_err());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = make_synthetic_bimodal(50, 20, 3).unwrap();
        let b = make_synthetic_bimodal(50, 20, 3).unwrap();
        assert_eq!(a.docs_text(), b.docs_text());
        assert_ne!(a.docs_text(), make_synthetic_bimodal(50, 20, 4).unwrap().docs_text());
    }

    #[test]
    fn transform_round_trips_through_text() {
        for t in [Transform::None, Transform::Log1pTf] {
            assert_eq!(t.to_string().parse::<Transform>().unwrap(), t);
        }
        assert!("tfidf".parse::<Transform>().is_err());
    }
}
