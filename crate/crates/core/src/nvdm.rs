//! Neural variational document model with Gaussian (G), piecewise (P) or
//! hybrid (H) latent variables.
//!
//! A two-layer MLP encodes the bag-of-words vector. The latent layer holds a
//! learned prior (bias-only, since documents carry no conditioning input)
//! and an encoder-driven posterior. The decoder is a softmax over the
//! vocabulary with logits `-R·z + b_w`, where piecewise samples are shifted
//! to `[-1, 1]` and placed after the Gaussian ones.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::corpus::{Document, Transform};
use crate::error::{Error, Result};
use crate::gaussian::{self, GaussianHead, GaussianVars};
use crate::param::Param;
use crate::piecewise::{self, PiecewiseHead};
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    G,
    P,
    H,
}

impl Variant {
    pub fn has_gaussian(self) -> bool {
        matches!(self, Variant::G | Variant::H)
    }

    pub fn has_piecewise(self) -> bool {
        matches!(self, Variant::P | Variant::H)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::G => "g",
            Variant::P => "p",
            Variant::H => "h",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "g" => Ok(Variant::G),
            "p" => Ok(Variant::P),
            "h" => Ok(Variant::H),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Prelu,
    Softsign,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Prelu => "prelu",
            Activation::Softsign => "softsign",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prelu" => Ok(Activation::Prelu),
            "softsign" => Ok(Activation::Softsign),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Initial PReLU leak.
pub const INIT_LEAK: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub vocab_size: usize,
    pub hidden: usize,
    pub gauss_dims: usize,
    pub piece_dims: usize,
    pub pieces: usize,
    pub activation: Activation,
    pub transform: Transform,
}

impl ModelConfig {
    /// Default shape: 100 hidden units and 50 latent variables per family.
    pub fn new(variant: Variant, vocab_size: usize) -> Self {
        ModelConfig {
            variant,
            vocab_size,
            hidden: 100,
            gauss_dims: if variant.has_gaussian() { 50 } else { 0 },
            piece_dims: if variant.has_piecewise() { 50 } else { 0 },
            pieces: if variant.has_piecewise() { 5 } else { 0 },
            activation: Activation::Prelu,
            transform: Transform::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.hidden == 0 {
            return bad("vocabulary size and hidden width must be positive".into());
        }
        match (self.variant.has_gaussian(), self.gauss_dims > 0) {
            (true, false) => return bad(format!("variant {} needs gaussian dims", self.variant)),
            (false, true) => return bad(format!("variant {} has no gaussian dims", self.variant)),
            _ => {}
        }
        match (self.variant.has_piecewise(), self.piece_dims > 0) {
            (true, false) => return bad(format!("variant {} needs piecewise dims", self.variant)),
            (false, true) => return bad(format!("variant {} has no piecewise dims", self.variant)),
            _ => {}
        }
        if self.variant.has_piecewise() && self.pieces < 2 {
            return bad(format!("piecewise variables need >= 2 pieces, got {}", self.pieces));
        }
        if !self.variant.has_piecewise() && self.pieces != 0 {
            return bad(format!("variant {} takes no piece count", self.variant));
        }
        Ok(())
    }

    pub fn latent_dims(&self) -> usize {
        self.gauss_dims + self.piece_dims
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub e0: T,
    pub b0: T,
    pub leak0: Option<T>,
    pub e1: T,
    pub b1: T,
    pub leak1: Option<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseLayer<T> {
    pub prior: PiecewiseHead<T>,
    pub post: PiecewiseHead<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T> {
    /// `|V| x dim(z)`
    pub r: T,
    pub bias: T,
}

/// All learnable arrays, generic over storage (`Param`) or tape handles (`Var`).
#[derive(Clone, Debug, PartialEq)]
pub struct Parts<T> {
    pub encoder: Encoder<T>,
    pub gaussian: Option<GaussianHead<T>>,
    pub piecewise: Option<PiecewiseLayer<T>>,
    pub decoder: Decoder<T>,
}

impl<T> Parts<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Parts<U> {
        let e = &self.encoder;
        Parts {
            encoder: Encoder {
                e0: f(&e.e0),
                b0: f(&e.b0),
                leak0: e.leak0.as_ref().map(&mut *f),
                e1: f(&e.e1),
                b1: f(&e.b1),
                leak1: e.leak1.as_ref().map(&mut *f),
            },
            gaussian: self.gaussian.as_ref().map(|g| g.map(f)),
            piecewise: self.piecewise.as_ref().map(|p| PiecewiseLayer {
                prior: p.prior.map(f),
                post: p.post.map(f),
            }),
            decoder: Decoder {
                r: f(&self.decoder.r),
                bias: f(&self.decoder.bias),
            },
        }
    }

    /// Canonical order shared by checkpoints, optimizers and gradients.
    pub fn items(&self) -> Vec<&T> {
        let e = &self.encoder;
        let mut v = vec![&e.e0, &e.b0];
        v.extend(e.leak0.as_ref());
        v.extend([&e.e1, &e.b1]);
        v.extend(e.leak1.as_ref());
        if let Some(g) = &self.gaussian {
            v.extend(g.items());
        }
        if let Some(p) = &self.piecewise {
            v.extend(p.prior.items());
            v.extend(p.post.items());
        }
        v.extend([&self.decoder.r, &self.decoder.bias]);
        v
    }

    pub fn items_mut(&mut self) -> Vec<&mut T> {
        let e = &mut self.encoder;
        let mut v = vec![&mut e.e0, &mut e.b0];
        v.extend(e.leak0.as_mut());
        v.extend([&mut e.e1, &mut e.b1]);
        v.extend(e.leak1.as_mut());
        if let Some(g) = &mut self.gaussian {
            v.extend(g.items_mut());
        }
        if let Some(p) = &mut self.piecewise {
            v.extend(p.prior.items_mut());
            v.extend(p.post.items_mut());
        }
        v.extend([&mut self.decoder.r, &mut self.decoder.bias]);
        v
    }
}

/// Gradient buffers aligned with [`NvdmModel::params`].
pub type ParamGrads = Vec<Vec<f64>>;

#[derive(Clone, Debug, PartialEq)]
pub struct NvdmModel {
    pub config: ModelConfig,
    pub parts: Parts<Param>,
}

/// Noise for one latent sample: standard normals for Gaussian dimensions
/// and uniforms for piecewise dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    pub gauss: Vec<f64>,
    pub uniform: Vec<f64>,
}

impl Noise {
    pub fn draw<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        Noise {
            gauss: (0..config.gauss_dims).map(|_| rng.sample(StandardNormal)).collect(),
            uniform: (0..config.piece_dims).map(|_| rng.random::<f64>()).collect(),
        }
    }

    pub fn draw_many<R: Rng + ?Sized>(config: &ModelConfig, n: usize, rng: &mut R) -> Vec<Self> {
        (0..n).map(|_| Noise::draw(config, rng)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboReport {
    /// Sample average of `Σ_w count_w · log P(w | z)`.
    pub reconstruction: f64,
    pub kl_gaussian: f64,
    pub kl_piecewise: f64,
    /// `reconstruction - kl_weight · (kl_gaussian + kl_piecewise)`
    pub bound: f64,
    pub samples_used: usize,
}

/// Prior and posterior nodes of the latent layer.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    /// `(prior, posterior)`
    pub gaussian: Option<(GaussianVars, GaussianVars)>,
    /// `(prior, posterior)` flat weight buffers, `piece_dims * pieces`.
    pub piecewise: Option<(Var, Var)>,
}

/// Scalar nodes of one document's bound.
#[derive(Clone, Copy, Debug)]
pub struct BoundVars {
    pub bound: Var,
    pub reconstruction: Var,
    pub kl_gaussian: Option<Var>,
    pub kl_piecewise: Option<Var>,
}

impl BoundVars {
    pub fn report(&self, tape: &Tape, samples: usize) -> ElboReport {
        ElboReport {
            reconstruction: tape.scalar(self.reconstruction),
            kl_gaussian: self.kl_gaussian.map_or(0.0, |v| tape.scalar(v)),
            kl_piecewise: self.kl_piecewise.map_or(0.0, |v| tape.scalar(v)),
            bound: tape.scalar(self.bound),
            samples_used: samples,
        }
    }
}

/// Concatenates Gaussian and piecewise samples, Gaussian first. Non-hybrid
/// variants pass their single family through and reject the other.
pub fn combine_latents(variant: Variant, z_gauss: &[f64], z_piece: &[f64]) -> Result<Vec<f64>> {
    match variant {
        Variant::H => {}
        Variant::G if z_piece.is_empty() => {}
        Variant::P if z_gauss.is_empty() => {}
        _ => {
            return Err(Error::Contract(format!(
                "variant {variant} cannot combine {} gaussian and {} piecewise values",
                z_gauss.len(),
                z_piece.len()
            )))
        }
    }
    Ok(z_gauss.iter().chain(z_piece).copied().collect())
}

impl NvdmModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, h) = (config.vocab_size, config.hidden);
        let prelu = config.activation == Activation::Prelu;
        let encoder = Encoder {
            e0: Param::glorot("enc.e0", h, v, &mut rng),
            b0: Param::zeros("enc.b0", vec![h]),
            leak0: prelu.then(|| Param::filled("enc.leak0", vec![h], INIT_LEAK)),
            e1: Param::glorot("enc.e1", h, h, &mut rng),
            b1: Param::zeros("enc.b1", vec![h]),
            leak1: prelu.then(|| Param::filled("enc.leak1", vec![h], INIT_LEAK)),
        };
        let gaussian = config
            .variant
            .has_gaussian()
            .then(|| GaussianHead::init("gauss", 0, h, config.gauss_dims, &mut rng));
        let piecewise = config.variant.has_piecewise().then(|| PiecewiseLayer {
            prior: PiecewiseHead::init("piece.prior", 0, config.piece_dims, config.pieces, &mut rng),
            post: PiecewiseHead::init("piece.post", h, config.piece_dims, config.pieces, &mut rng),
        });
        let decoder = Decoder {
            r: Param::glorot("dec.r", v, config.latent_dims(), &mut rng),
            bias: Param::zeros("dec.b", vec![v]),
        };
        Ok(NvdmModel {
            config,
            parts: Parts {
                encoder,
                gaussian,
                piecewise,
                decoder,
            },
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        self.parts.items()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.parts.items_mut()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Puts every parameter on the tape, tracking gradients when `trainable`.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Parts<Var> {
        self.parts.map(&mut |p| tape.leaf(p.tensor(), trainable))
    }

    pub fn input_tensor(&self, doc: &Document) -> Result<Tensor> {
        self.check_doc(doc)?;
        Ok(Tensor::vector(doc.dense(self.config.vocab_size, self.config.transform)))
    }

    fn check_doc(&self, doc: &Document) -> Result<()> {
        if doc.is_empty() {
            return Err(Error::Contract(format!("document `{}` has no tokens", doc.id)));
        }
        if let Some(&(t, _)) = doc.terms.last() {
            if t >= self.config.vocab_size {
                return Err(Error::shape("document", &[t], &[self.config.vocab_size]));
            }
        }
        Ok(())
    }

    /// Encoder output for a dense document vector.
    pub fn encode(&self, doc_vector: &[f64]) -> Result<Vec<f64>> {
        if doc_vector.len() != self.config.vocab_size {
            return Err(Error::shape("encode", &[doc_vector.len()], &[self.config.vocab_size]));
        }
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let x = tape.constant(Tensor::vector(doc_vector.to_vec()));
        let enc = encode_on_tape(&mut tape, &vars, &self.config, x)?;
        Ok(tape.value(enc).data().to_vec())
    }

    /// Decoder log-probabilities over the vocabulary for a latent vector
    /// (piecewise coordinates already shifted to `[-1, 1]`).
    pub fn decode_logprob(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.config.latent_dims() {
            return Err(Error::shape("decode", &[z.len()], &[self.config.latent_dims()]));
        }
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let z = tape.constant(Tensor::vector(z.to_vec()));
        let lp = decode_on_tape(&mut tape, &vars, z)?;
        Ok(tape.value(lp).data().to_vec())
    }

    /// Monte Carlo bound estimate with fresh noise from `rng`.
    pub fn elbo<R: Rng + ?Sized>(
        &self,
        doc: &Document,
        kl_weight: f64,
        num_samples: usize,
        rng: &mut R,
    ) -> Result<ElboReport> {
        if num_samples == 0 {
            return Err(Error::Contract("elbo needs at least one sample".into()));
        }
        let noise = Noise::draw_many(&self.config, num_samples, rng);
        self.elbo_with_noise(doc, kl_weight, &noise)
    }

    pub fn elbo_with_noise(&self, doc: &Document, kl_weight: f64, noise: &[Noise]) -> Result<ElboReport> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let x = tape.constant(self.input_tensor(doc)?);
        let b = doc_bound(&mut tape, &vars, &self.config, x, doc, kl_weight, noise)?;
        Ok(b.report(&tape, noise.len()))
    }

    /// Bound and its gradient with respect to every parameter.
    pub fn elbo_grad(&self, doc: &Document, kl_weight: f64, noise: &[Noise]) -> Result<(ElboReport, ParamGrads)> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, true);
        let x = tape.constant(self.input_tensor(doc)?);
        let b = doc_bound(&mut tape, &vars, &self.config, x, doc, kl_weight, noise)?;
        let report = b.report(&tape, noise.len());
        let mut grads = tape.backward(b.bound)?;
        Ok((report, collect_grads(&vars, &mut grads)))
    }

    /// Posterior and prior parameters for a document.
    pub fn latent_params(&self, doc: &Document) -> Result<LatentParams> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let x = tape.constant(self.input_tensor(doc)?);
        let enc = encode_on_tape(&mut tape, &vars, &self.config, x)?;
        let lat = latents_on_tape(&mut tape, &vars, Some(enc))?;
        LatentParams::from_tape(&tape, &lat, self.config.pieces)
    }

    /// Prior parameters (they do not depend on the document).
    pub fn prior_params(&self) -> Result<LatentParams> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let lat = latents_on_tape(&mut tape, &vars, None)?;
        LatentParams::from_tape(&tape, &lat, self.config.pieces)
    }
}

/// Plain values of the latent layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentParams {
    pub gaussian_prior: Option<gaussian::GaussianParams>,
    pub gaussian_post: Option<gaussian::GaussianParams>,
    pub piecewise_prior: Vec<piecewise::PiecewiseParams>,
    pub piecewise_post: Vec<piecewise::PiecewiseParams>,
}

impl LatentParams {
    fn from_tape(tape: &Tape, lat: &LatentVars, pieces: usize) -> Result<Self> {
        let (gp, gq) = match lat.gaussian {
            Some((p, q)) => (Some(p.values(tape)), Some(q.values(tape))),
            None => (None, None),
        };
        let (pp, pq) = match lat.piecewise {
            Some((p, q)) => (
                piecewise::split_params(tape.value(p).data(), pieces)?,
                piecewise::split_params(tape.value(q).data(), pieces)?,
            ),
            None => (Vec::new(), Vec::new()),
        };
        Ok(LatentParams {
            gaussian_prior: gp,
            gaussian_post: gq,
            piecewise_prior: pp,
            piecewise_post: pq,
        })
    }
}

/// Collects parameter gradients in canonical order.
pub fn collect_grads(vars: &Parts<Var>, grads: &mut Gradients) -> ParamGrads {
    vars.items().into_iter().map(|&v| grads.take(v)).collect()
}

fn activate(tape: &mut Tape, kind: Activation, x: Var, leak: Option<Var>) -> Result<Var> {
    match (kind, leak) {
        (Activation::Prelu, Some(l)) => tape.prelu(x, l),
        (Activation::Softsign, None) => Ok(tape.softsign(x)),
        _ => Err(Error::Contract(format!("activation {kind} does not match encoder parameters"))),
    }
}

/// Two affine layers, each followed by the configured activation.
pub fn encode_on_tape(tape: &mut Tape, vars: &Parts<Var>, config: &ModelConfig, x: Var) -> Result<Var> {
    let e = &vars.encoder;
    let h0 = tape.affine(x, e.e0, e.b0)?;
    let h0 = activate(tape, config.activation, h0, e.leak0)?;
    let h1 = tape.affine(h0, e.e1, e.b1)?;
    activate(tape, config.activation, h1, e.leak1)
}

/// Prior nodes always; posterior nodes when an encoding is given (otherwise
/// the posterior slots repeat the prior).
pub fn latents_on_tape(tape: &mut Tape, vars: &Parts<Var>, enc: Option<Var>) -> Result<LatentVars> {
    let gaussian = match &vars.gaussian {
        Some(head) => {
            let prior = gaussian::prior_forward(tape, head, None)?;
            let post = match enc {
                Some(e) => gaussian::posterior_forward(tape, head, &prior, e)?,
                None => prior,
            };
            Some((prior, post))
        }
        None => None,
    };
    let piecewise = match &vars.piecewise {
        Some(layer) => {
            let prior = piecewise::head_forward(tape, &layer.prior, None)?;
            let post = match enc {
                Some(e) => piecewise::head_forward(tape, &layer.post, Some(e))?,
                None => prior,
            };
            Some((prior, post))
        }
        None => None,
    };
    Ok(LatentVars { gaussian, piecewise })
}

/// `log_softmax(b_w - R·z)`.
pub fn decode_on_tape(tape: &mut Tape, vars: &Parts<Var>, z: Var) -> Result<Var> {
    let rz = tape.matvec(vars.decoder.r, z)?;
    let logits = tape.sub(vars.decoder.bias, rz)?;
    tape.log_softmax(logits)
}

/// Draws `z` from the posterior nodes with the given noise.
pub fn sample_latent_on_tape(
    tape: &mut Tape,
    lat: &LatentVars,
    pieces: usize,
    noise: &Noise,
) -> Result<Var> {
    let mut parts = Vec::with_capacity(2);
    if let Some((_, post)) = &lat.gaussian {
        parts.push(gaussian::sample_on_tape(tape, post, &noise.gauss)?);
    }
    if let Some((_, post)) = lat.piecewise {
        let z = piecewise::sample_on_tape(tape, post, pieces, &noise.uniform)?;
        let z2 = tape.scale(z, 2.0);
        parts.push(tape.add_scalar(z2, -1.0));
    }
    match parts.as_slice() {
        [single] => Ok(*single),
        [] => Err(Error::Contract("model has no latent variables".into())),
        _ => tape.concat(&parts),
    }
}

/// Bound for a document from already-built latent nodes.
pub fn bound_from_latents(
    tape: &mut Tape,
    vars: &Parts<Var>,
    config: &ModelConfig,
    lat: &LatentVars,
    doc: &Document,
    kl_weight: f64,
    noise: &[Noise],
) -> Result<BoundVars> {
    if noise.is_empty() {
        return Err(Error::Contract("bound needs at least one noise sample".into()));
    }
    if doc.is_empty() {
        return Err(Error::Contract(format!("document `{}` has no tokens", doc.id)));
    }
    let ids = doc.term_ids();
    let counts = doc.counts();
    let mut recon_terms = Vec::with_capacity(noise.len());
    for n in noise {
        let z = sample_latent_on_tape(tape, lat, config.pieces, n)?;
        let lp = decode_on_tape(tape, vars, z)?;
        recon_terms.push(tape.sparse_dot(lp, &ids, &counts)?);
    }
    let total = tape.add_n(&recon_terms)?;
    let reconstruction = tape.scale(total, 1.0 / noise.len() as f64);

    let kl_gaussian = match &lat.gaussian {
        Some((prior, post)) => Some(gaussian::kl_on_tape(tape, post, prior)?),
        None => None,
    };
    let kl_piecewise = match lat.piecewise {
        Some((prior, post)) => Some(piecewise::kl_on_tape(tape, post, prior, config.pieces)?),
        None => None,
    };
    let kls: Vec<Var> = kl_gaussian.iter().chain(kl_piecewise.iter()).copied().collect();
    let kl = tape.add_n(&kls)?;
    let weighted = tape.scale(kl, kl_weight);
    let bound = tape.sub(reconstruction, weighted)?;
    Ok(BoundVars {
        bound,
        reconstruction,
        kl_gaussian,
        kl_piecewise,
    })
}

/// Full bound for a document given its input node.
pub fn doc_bound(
    tape: &mut Tape,
    vars: &Parts<Var>,
    config: &ModelConfig,
    input: Var,
    doc: &Document,
    kl_weight: f64,
    noise: &[Noise],
) -> Result<BoundVars> {
    let enc = encode_on_tape(tape, vars, config, input)?;
    let lat = latents_on_tape(tape, vars, Some(enc))?;
    bound_from_latents(tape, vars, config, &lat, doc, kl_weight, noise)
}
