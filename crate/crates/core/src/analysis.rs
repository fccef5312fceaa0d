//! Decoder-space word neighbours, KL-gradient word sensitivity and
//! posterior-mean export.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::eval::rank_desc;
use crate::gaussian;
use crate::nvdm::{self, NvdmModel};
use crate::piecewise;
use crate::tensor::{Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor {
    pub id: usize,
    pub token: String,
    pub distance: f64,
}

/// Number of spellings offered for an unknown token.
pub const SUGGESTIONS: usize = 5;

fn row(model: &NvdmModel, w: usize) -> &[f64] {
    let cols = model.parts.decoder.r.cols();
    &model.parts.decoder.r.data[w * cols..(w + 1) * cols]
}

pub fn row_distance(model: &NvdmModel, a: usize, b: usize) -> f64 {
    row(model, a)
        .iter()
        .zip(row(model, b))
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Closest vocabulary spellings by edit distance, ties by id.
pub fn suggest(vocab: &[String], token: &str, n: usize) -> Vec<String> {
    let mut scored: Vec<(usize, usize)> = vocab
        .iter()
        .enumerate()
        .map(|(i, w)| (strsim::levenshtein(token, w), i))
        .collect();
    scored.sort();
    scored.into_iter().take(n).map(|(_, i)| vocab[i].clone()).collect()
}

/// The `k` words whose decoder rows are closest to the query's row in
/// Euclidean distance, excluding the query; ties by word id.
pub fn word_neighbors(model: &NvdmModel, vocab: &[String], query: &str, k: usize) -> Result<Vec<Neighbor>> {
    if vocab.len() != model.config.vocab_size {
        return Err(Error::shape("word neighbors", &[vocab.len()], &[model.config.vocab_size]));
    }
    let q = vocab.iter().position(|w| w == query).ok_or_else(|| Error::UnknownToken {
        token: query.to_string(),
        suggestions: suggest(vocab, query, SUGGESTIONS),
    })?;
    let mut all: Vec<(f64, usize)> = (0..vocab.len())
        .filter(|&w| w != q)
        .map(|w| (row_distance(model, q, w), w))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(all
        .into_iter()
        .take(k)
        .map(|(distance, id)| Neighbor {
            id,
            token: vocab[id].clone(),
            distance,
        })
        .collect())
}

/// Top words of one document per latent family.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DocSensitivity {
    pub gaussian: Vec<usize>,
    pub piecewise: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityCounts {
    /// Per word id; `None` when the model lacks the family.
    pub gaussian: Option<Vec<u32>>,
    pub piecewise: Option<Vec<u32>>,
    pub per_doc: Vec<DocSensitivity>,
}

#[derive(Clone, Copy)]
enum Family {
    Gaussian,
    Piecewise,
}

/// Squared gradient of one family's KL with respect to the encoder input.
fn input_grad_sq(model: &NvdmModel, doc: &Document, family: Family) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, false);
    let x = tape.leaf(model.input_tensor(doc)?, true);
    let enc = nvdm::encode_on_tape(&mut tape, &vars, &model.config, x)?;
    let lat = nvdm::latents_on_tape(&mut tape, &vars, Some(enc))?;
    let kl: Var = match family {
        Family::Gaussian => {
            let (prior, post) = lat.gaussian.expect("gaussian family present");
            gaussian::kl_on_tape(&mut tape, &post, &prior)?
        }
        Family::Piecewise => {
            let (prior, post) = lat.piecewise.expect("piecewise family present");
            piecewise::kl_on_tape(&mut tape, post, prior, model.config.pieces)?
        }
    };
    let g = tape.backward(kl)?.take(x);
    Ok(g.into_iter().map(|v| v * v).collect())
}

/// Per-type top-`m` membership counts of present words ranked by squared
/// KL gradient, tallied separately for each latent family; ties by id.
pub fn kl_sensitivity(model: &NvdmModel, docs: &[Document], top_m: usize) -> Result<SensitivityCounts> {
    let v = model.config.vocab_size;
    let has_g = model.config.variant.has_gaussian();
    let has_p = model.config.variant.has_piecewise();
    let mut gauss = has_g.then(|| vec![0u32; v]);
    let mut piece = has_p.then(|| vec![0u32; v]);
    let mut per_doc = Vec::with_capacity(docs.len());
    for doc in docs {
        let ids = doc.term_ids();
        let top = |family| -> Result<Vec<usize>> {
            let sq = input_grad_sq(model, doc, family)?;
            let scores: Vec<f64> = ids.iter().map(|&w| sq[w]).collect();
            Ok(rank_desc(&scores, top_m).into_iter().map(|i| ids[i]).collect())
        };
        let mut entry = DocSensitivity::default();
        if let Some(c) = gauss.as_mut() {
            entry.gaussian = top(Family::Gaussian)?;
            entry.gaussian.iter().for_each(|&w| c[w] += 1);
        }
        if let Some(c) = piece.as_mut() {
            entry.piecewise = top(Family::Piecewise)?;
            entry.piecewise.iter().for_each(|&w| c[w] += 1);
        }
        per_doc.push(entry);
    }
    Ok(SensitivityCounts {
        gaussian: gauss,
        piecewise: piece,
        per_doc,
    })
}

/// Per document: Gaussian posterior means, then closed-form piecewise
/// posterior means on `[0, 1]`.
pub fn posterior_means(model: &NvdmModel, doc: &Document) -> Result<(Vec<f64>, Vec<f64>)> {
    let lat = model.latent_params(doc)?;
    let mu = lat.gaussian_post.map(|g| g.mu).unwrap_or_default();
    let p = lat.piecewise_post.iter().map(|p| p.mean()).collect();
    Ok((mu, p))
}

/// Writes `doc_id label mu_1 … mu_G p_1 … p_P` per document after a `#`
/// header. Missing labels are written as `-`.
pub fn export_posterior_means(model: &NvdmModel, docs: &[Document], out: &Path) -> Result<usize> {
    let file = File::create(out).map_err(|e| Error::io(out, e))?;
    let mut w = BufWriter::new(file);
    let mut header = String::from("# doc_id\tlabel");
    for i in 1..=model.config.gauss_dims {
        header.push_str(&format!("\tmu_{i}"));
    }
    for i in 1..=model.config.piece_dims {
        header.push_str(&format!("\tp_{i}"));
    }
    let io = |e| Error::io(out, e);
    writeln!(w, "{header}").map_err(io)?;
    for doc in docs {
        let (mu, p) = posterior_means(model, doc)?;
        let mut line = format!("{}\t{}", doc.id, doc.label.as_deref().unwrap_or("-"));
        for v in mu.iter().chain(&p) {
            line.push_str(&format!("\t{v:.10e}"));
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(docs.len())
}
