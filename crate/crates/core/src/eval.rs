//! Test-time evaluation: sampled-bound perplexity, iterative per-document
//! posterior refinement, and word lists drawn from the learned prior.

use std::fmt;
use std::fmt::Write as _;

use rand::Rng;

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::gaussian::GaussianVars;
use crate::nvdm::{self, LatentParams, LatentVars, Noise, NvdmModel};
use crate::piecewise;
use crate::tensor::{Tape, Tensor, Var};
use crate::trainer::clip_gradients;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Amortized,
    Iterative,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Amortized => "amortized",
            EvalMode::Iterative => "iterative",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DocBound {
    pub id: String,
    pub tokens: u64,
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `exp(-(1/D) Σ_n bound_n / L_n)`
    pub perplexity: f64,
    pub mean_bound: f64,
    pub per_doc: Vec<DocBound>,
    pub samples: usize,
    pub mode: EvalMode,
}

impl EvalReport {
    pub fn from_bounds(per_doc: Vec<DocBound>, samples: usize, mode: EvalMode) -> Result<Self> {
        if per_doc.is_empty() {
            return Err(Error::Contract("evaluation needs at least one document".into()));
        }
        let d = per_doc.len() as f64;
        let per_word: f64 = per_doc.iter().map(|b| b.bound / b.tokens as f64).sum::<f64>() / d;
        let mean_bound = per_doc.iter().map(|b| b.bound).sum::<f64>() / d;
        Ok(EvalReport {
            perplexity: (-per_word).exp(),
            mean_bound,
            per_doc,
            samples,
            mode,
        })
    }

    /// Summary as `#` comment lines, then a header and one row per document.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# mode\t{}", self.mode);
        let _ = writeln!(s, "# samples\t{}", self.samples);
        let _ = writeln!(s, "# documents\t{}", self.per_doc.len());
        let _ = writeln!(s, "# perplexity\t{:.10e}", self.perplexity);
        let _ = writeln!(s, "# mean_bound\t{:.10e}", self.mean_bound);
        s.push_str("doc_id\ttokens\tbound\n");
        for b in &self.per_doc {
            let _ = writeln!(s, "{}\t{}\t{:.10e}", b.id, b.tokens, b.bound);
        }
        s
    }
}

pub fn evaluate<R: Rng + ?Sized>(model: &NvdmModel, docs: &[Document], num_samples: usize, rng: &mut R) -> Result<EvalReport> {
    evaluate_weighted(model, docs, num_samples, 1.0, rng)
}

/// [`evaluate`] with an explicit KL weight in the bound.
pub fn evaluate_weighted<R: Rng + ?Sized>(
    model: &NvdmModel,
    docs: &[Document],
    num_samples: usize,
    kl_weight: f64,
    rng: &mut R,
) -> Result<EvalReport> {
    if docs.is_empty() {
        return Err(Error::Contract("evaluation needs at least one document".into()));
    }
    let mut per_doc = Vec::with_capacity(docs.len());
    for doc in docs {
        let r = model.elbo(doc, kl_weight, num_samples, rng)?;
        per_doc.push(DocBound {
            id: doc.id.clone(),
            tokens: doc.token_count(),
            bound: r.bound,
        });
    }
    EvalReport::from_bounds(per_doc, num_samples, EvalMode::Amortized)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceConfig {
    pub steps_max: usize,
    pub learning_rate: f64,
    /// Steps without improvement before stopping.
    pub patience: usize,
    pub clip_norm: f64,
    /// Fixed samples used to score each iterate.
    pub eval_samples: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            steps_max: 100,
            learning_rate: 0.1,
            patience: 10,
            clip_norm: 5.0,
            eval_samples: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterativeResult {
    /// Bound of the encoder's posterior under the scoring samples.
    pub amortized_bound: f64,
    /// Best bound seen, never below `amortized_bound`.
    pub bound: f64,
    pub steps: usize,
    /// Set when a non-finite iterate stopped refinement early.
    pub aborted: bool,
    pub posterior: LatentParams,
}

/// Per-document free offsets from the amortized posterior: `mu + d_mu`,
/// `var · exp(d_var)` and `a · exp(d_a)`. All zero at the start.
#[derive(Clone, Debug, PartialEq)]
struct Offsets {
    mu: Vec<f64>,
    var: Vec<f64>,
    a: Vec<f64>,
}

struct Frozen<'a> {
    model: &'a NvdmModel,
    doc: &'a Document,
    init: LatentParams,
    gauss_post: Option<(Vec<f64>, Vec<f64>)>,
    piece_post: Option<Vec<f64>>,
}

impl Frozen<'_> {
    fn build(&self, tape: &mut Tape, off: &Offsets, trainable: bool, noise: &[Noise]) -> Result<(Var, [Option<Var>; 3])> {
        let vars = self.model.register(tape, false);
        let mut handles = [None; 3];
        let gaussian = match (&self.gauss_post, &self.init.gaussian_prior) {
            (Some((mu0, var0)), Some(prior)) => {
                let dmu = tape.leaf(Tensor::vector(off.mu.clone()), trainable);
                let dvar = tape.leaf(Tensor::vector(off.var.clone()), trainable);
                handles[0] = Some(dmu);
                handles[1] = Some(dvar);
                let base = tape.constant(Tensor::vector(mu0.clone()));
                let mu = tape.add(base, dmu)?;
                let e = tape.exp(dvar);
                let var = tape.mul_const(e, var0)?;
                let p = GaussianVars {
                    mu: tape.constant(Tensor::vector(prior.mu.clone())),
                    var: tape.constant(Tensor::vector(prior.var.clone())),
                };
                Some((p, GaussianVars { mu, var }))
            }
            _ => None,
        };
        let piecewise = match &self.piece_post {
            Some(a0) => {
                let da = tape.leaf(Tensor::vector(off.a.clone()), trainable);
                handles[2] = Some(da);
                let e = tape.exp(da);
                let a = tape.mul_const(e, a0)?;
                let prior: Vec<f64> = self
                    .init
                    .piecewise_prior
                    .iter()
                    .flat_map(|p| p.weights().to_vec())
                    .collect();
                Some((tape.constant(Tensor::vector(prior)), a))
            }
            None => None,
        };
        let lat = LatentVars { gaussian, piecewise };
        let b = nvdm::bound_from_latents(tape, &vars, &self.model.config, &lat, self.doc, 1.0, noise)?;
        Ok((b.bound, handles))
    }

    fn score(&self, off: &Offsets, noise: &[Noise]) -> Result<f64> {
        let mut tape = Tape::new();
        let (b, _) = self.build(&mut tape, off, false, noise)?;
        Ok(tape.scalar(b))
    }

    fn gradient(&self, off: &Offsets, noise: &[Noise]) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let (b, handles) = self.build(&mut tape, off, true, noise)?;
        let value = tape.scalar(b);
        let mut g = tape.backward(b)?;
        let grads = handles
            .iter()
            .map(|h| h.map(|v| g.take(v)).unwrap_or_default())
            .collect();
        Ok((value, grads))
    }

    fn posterior(&self, off: &Offsets) -> Result<LatentParams> {
        let mut out = self.init.clone();
        if let (Some((mu0, var0)), Some(post)) = (&self.gauss_post, out.gaussian_post.as_mut()) {
            post.mu = mu0.iter().zip(&off.mu).map(|(m, d)| m + d).collect();
            post.var = var0.iter().zip(&off.var).map(|(v, d)| v * d.exp()).collect();
        }
        if let Some(a0) = &self.piece_post {
            let a: Vec<f64> = a0.iter().zip(&off.a).map(|(a, d)| a * d.exp()).collect();
            out.piecewise_post = piecewise::split_params(&a, self.model.config.pieces)?;
        }
        Ok(out)
    }
}

/// Refines one document's posterior by gradient ascent on its bound with
/// the model and prior frozen. Each step uses a fresh single sample; every
/// iterate is scored on one fixed set of `eval_samples` draws, and the best
/// score is kept.
pub fn iterative_inference<R: Rng + ?Sized>(
    model: &NvdmModel,
    doc: &Document,
    cfg: &InferenceConfig,
    rng: &mut R,
) -> Result<IterativeResult> {
    if cfg.eval_samples == 0 || cfg.patience == 0 {
        return Err(Error::Config("eval_samples and patience must be >= 1".into()));
    }
    let init = model.latent_params(doc)?;
    let frozen = Frozen {
        model,
        doc,
        gauss_post: init.gaussian_post.as_ref().map(|g| (g.mu.clone(), g.var.clone())),
        piece_post: (!init.piecewise_post.is_empty())
            .then(|| init.piecewise_post.iter().flat_map(|p| p.weights().to_vec()).collect()),
        init,
    };
    let eval_noise = Noise::draw_many(&model.config, cfg.eval_samples, rng);
    let mut off = Offsets {
        mu: vec![0.0; model.config.gauss_dims],
        var: vec![0.0; model.config.gauss_dims],
        a: vec![0.0; model.config.piece_dims * model.config.pieces],
    };
    let amortized = frozen.score(&off, &eval_noise)?;
    let mut best = (amortized, off.clone());
    let mut stale = 0;
    let mut steps = 0;
    let mut aborted = false;
    while steps < cfg.steps_max {
        let noise = [Noise::draw(&model.config, rng)];
        let (_, mut grads) = frozen.gradient(&off, &noise)?;
        steps += 1;
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            aborted = true;
            break;
        }
        clip_gradients(&mut grads, cfg.clip_norm);
        for (x, g) in [&mut off.mu, &mut off.var, &mut off.a].into_iter().zip(&grads) {
            x.iter_mut().zip(g).for_each(|(x, g)| *x += cfg.learning_rate * g);
        }
        let value = frozen.score(&off, &eval_noise)?;
        if !value.is_finite() {
            aborted = true;
            break;
        }
        if value > best.0 {
            best = (value, off.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(IterativeResult {
        amortized_bound: amortized,
        bound: best.0,
        steps,
        aborted,
        posterior: frozen.posterior(&best.1)?,
    })
}

/// Amortized and refined reports over a corpus; both score each document
/// with the same `cfg.eval_samples` draws.
pub fn evaluate_iterative<R: Rng + ?Sized>(
    model: &NvdmModel,
    docs: &[Document],
    cfg: &InferenceConfig,
    rng: &mut R,
) -> Result<(EvalReport, EvalReport)> {
    if docs.is_empty() {
        return Err(Error::Contract("evaluation needs at least one document".into()));
    }
    let mut amortized = Vec::with_capacity(docs.len());
    let mut refined = Vec::with_capacity(docs.len());
    for doc in docs {
        let r = iterative_inference(model, doc, cfg, rng)?;
        let row = |bound| DocBound {
            id: doc.id.clone(),
            tokens: doc.token_count(),
            bound,
        };
        amortized.push(row(r.amortized_bound));
        refined.push(row(r.bound));
    }
    Ok((
        EvalReport::from_bounds(amortized, cfg.eval_samples, EvalMode::Amortized)?,
        EvalReport::from_bounds(refined, cfg.eval_samples, EvalMode::Iterative)?,
    ))
}

/// Top `top_k` word ids (by decoder log-probability, ties by id) for
/// `num_docs` latent draws from the prior.
pub fn sample_prior_docs<R: Rng + ?Sized>(
    model: &NvdmModel,
    num_docs: usize,
    top_k: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let prior = model.prior_params()?;
    let k = top_k.min(model.config.vocab_size);
    let mut out = Vec::with_capacity(num_docs);
    for _ in 0..num_docs {
        let noise = Noise::draw(&model.config, rng);
        let zg = prior.gaussian_prior.as_ref().map(|g| g.sample_with(&noise.gauss)).unwrap_or_default();
        let zp = prior
            .piecewise_prior
            .iter()
            .zip(&noise.uniform)
            .map(|(p, &e)| p.inverse_cdf(e).map(piecewise::shift_to_signed))
            .collect::<Result<Vec<f64>>>()?;
        let lp = model.decode_logprob(&nvdm::combine_latents(model.config.variant, &zg, &zp)?)?;
        out.push(rank_desc(&lp, k));
    }
    Ok(out)
}

/// Indices of the `k` largest values, ties broken by lower index.
pub(crate) fn rank_desc(values: &[f64], k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..values.len()).collect();
    ids.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}
