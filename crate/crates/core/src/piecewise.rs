//! Piecewise constant latent variables on `[0, 1]`.
//!
//! A variable with `n` pieces and weights `a_1..a_n > 0` has density
//! `a_i / K` on the i-th equal-width segment, where `K = Σ a_i / n`.
//! Segments are half-open `[(i-1)/n, i/n)`, the last one closed at 1.
//! Samples are drawn by inverse transform of `eps ~ Uniform(0, 1)`, and the
//! pathwise gradient of a sample treats the segment selection as constant.

use rand::Rng;

use crate::error::{Error, Result};
use crate::param::Param;
use crate::tensor::{CustomOp, Tape, Tensor, Var};

/// Raw head outputs are clamped to this range before exponentiation.
pub const RAW_CLAMP: f64 = 30.0;

/// Weights of one piecewise constant variable.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseParams {
    a: Vec<f64>,
}

/// A sample together with the uniform noise that produced it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PiecewiseDraw {
    pub z: f64,
    pub eps: f64,
}

fn normalizer(a: &[f64]) -> f64 {
    let n = a.len() as f64;
    a.iter().map(|ai| ai / n).sum()
}

/// `C_i = Σ_{j<i} a_j / n` for `i = 0..=n`.
fn prefix_masses(a: &[f64]) -> Vec<f64> {
    let n = a.len() as f64;
    let mut c = Vec::with_capacity(a.len() + 1);
    let mut acc = 0.0;
    c.push(0.0);
    for ai in a {
        acc += ai / n;
        c.push(acc);
    }
    c
}

/// Segment holding `eps`: the last `s` with `C_s / K <= eps`, capped at `n - 1`.
fn segment_for(prefix: &[f64], k: f64, eps: f64) -> usize {
    let n = prefix.len() - 1;
    let mut s = 0;
    while s + 1 < n && prefix[s + 1] / k <= eps {
        s += 1;
    }
    s
}

fn inverse_cdf_raw(a: &[f64], eps: f64) -> f64 {
    let n = a.len();
    let prefix = prefix_masses(a);
    let k = prefix[n];
    let s = segment_for(&prefix, k, eps);
    let lo = s as f64 / n as f64;
    let hi = (s + 1) as f64 / n as f64;
    (lo + (k / a[s]) * (eps - prefix[s] / k)).clamp(lo, hi)
}

/// `∂z/∂a_k` of `z = inverse_cdf(eps)` with the segment held fixed.
fn inverse_cdf_grad_raw(a: &[f64], eps: f64, out: &mut [f64]) {
    let n = a.len();
    let nf = n as f64;
    let prefix = prefix_masses(a);
    let k = prefix[n];
    let s = segment_for(&prefix, k, eps);
    let as_ = a[s];
    let offset = k * eps - prefix[s];
    for (j, o) in out.iter_mut().enumerate() {
        *o = if j < s {
            (eps - 1.0) / (nf * as_)
        } else if j == s {
            eps / (nf * as_) - offset / (as_ * as_)
        } else {
            eps / (nf * as_)
        };
    }
}

fn kl_raw(post: &[f64], prior: &[f64]) -> f64 {
    let n = post.len() as f64;
    let kq = normalizer(post);
    let kp = normalizer(prior);
    let s: f64 = post.iter().zip(prior).map(|(q, p)| q * (q.ln() - p.ln())).sum();
    s / (n * kq) + kp.ln() - kq.ln()
}

fn kl_grad_raw(post: &[f64], prior: &[f64], g_post: &mut [f64], g_prior: &mut [f64]) {
    let n = post.len() as f64;
    let kq = normalizer(post);
    let kp = normalizer(prior);
    let s: f64 = post.iter().zip(prior).map(|(q, p)| q * (q.ln() - p.ln())).sum();
    for i in 0..post.len() {
        let (q, p) = (post[i], prior[i]);
        g_post[i] = (q.ln() - p.ln()) / (n * kq) - s / (n * n * kq * kq);
        g_prior[i] = -q / (p * n * kq) + 1.0 / (n * kp);
    }
}

fn check_unit(op: &'static str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Domain { op, value: v })
    }
}

impl PiecewiseParams {
    /// Needs at least two pieces, all weights finite and positive.
    pub fn new(a: Vec<f64>) -> Result<Self> {
        if a.len() < 2 {
            return Err(Error::Contract(format!("piecewise variable needs >= 2 pieces, got {}", a.len())));
        }
        if let Some(bad) = a.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Contract(format!("piecewise weight {bad} is not positive and finite")));
        }
        Ok(PiecewiseParams { a })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        PiecewiseParams::new(vec![1.0; n])
    }

    pub fn pieces(&self) -> usize {
        self.a.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.a
    }

    /// Normalization constant `K = Σ a_i / n`.
    pub fn normalizer(&self) -> f64 {
        normalizer(&self.a)
    }

    /// Probability mass of each segment, `a_i / (n K)`.
    pub fn masses(&self) -> Vec<f64> {
        let nk = self.a.len() as f64 * self.normalizer();
        self.a.iter().map(|ai| ai / nk).collect()
    }

    fn piece_of(&self, z: f64) -> usize {
        let n = self.a.len();
        ((z * n as f64).floor() as usize).min(n - 1)
    }

    pub fn pdf(&self, z: f64) -> Result<f64> {
        check_unit("pdf", z)?;
        Ok(self.a[self.piece_of(z)] / self.normalizer())
    }

    pub fn cdf(&self, z: f64) -> Result<f64> {
        check_unit("cdf", z)?;
        if z == 1.0 {
            return Ok(1.0);
        }
        let n = self.a.len();
        let prefix = prefix_masses(&self.a);
        let i = self.piece_of(z);
        let v = (prefix[i] + (z - i as f64 / n as f64) * self.a[i]) / prefix[n];
        Ok(v.clamp(0.0, 1.0))
    }

    pub fn inverse_cdf(&self, eps: f64) -> Result<f64> {
        check_unit("inverse_cdf", eps)?;
        Ok(inverse_cdf_raw(&self.a, eps))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> PiecewiseDraw {
        let eps: f64 = rng.random();
        PiecewiseDraw {
            z: inverse_cdf_raw(&self.a, eps),
            eps,
        }
    }

    /// Gradient of `inverse_cdf(eps)` with respect to every weight.
    pub fn sample_grad(&self, eps: f64) -> Result<Vec<f64>> {
        check_unit("sample_grad", eps)?;
        let mut g = vec![0.0; self.a.len()];
        inverse_cdf_grad_raw(&self.a, eps, &mut g);
        Ok(g)
    }

    /// Closed-form mean, `Σ mass_i · midpoint_i`.
    pub fn mean(&self) -> f64 {
        let n = self.a.len() as f64;
        self.masses()
            .iter()
            .enumerate()
            .map(|(i, m)| m * (i as f64 + 0.5) / n)
            .sum()
    }

    /// Indices of the first piece of each plateau whose density is strictly
    /// above its neighbouring plateaus.
    pub fn density_peaks(&self) -> Vec<usize> {
        let a = &self.a;
        let mut runs: Vec<(usize, f64)> = Vec::new();
        for (i, &v) in a.iter().enumerate() {
            if runs.last().map(|r| r.1) != Some(v) {
                runs.push((i, v));
            }
        }
        (0..runs.len())
            .filter(|&r| {
                let v = runs[r].1;
                let left = r == 0 || runs[r - 1].1 < v;
                let right = r + 1 == runs.len() || runs[r + 1].1 < v;
                left && right && runs.len() > 1
            })
            .map(|r| runs[r].0)
            .collect()
    }
}

/// `KL(post || prior)` between two piecewise variables with equal piece counts.
pub fn kl(post: &PiecewiseParams, prior: &PiecewiseParams) -> Result<f64> {
    if post.pieces() != prior.pieces() {
        return Err(Error::Contract(format!(
            "piecewise KL needs equal piece counts, got {} and {}",
            post.pieces(),
            prior.pieces()
        )));
    }
    Ok(kl_raw(&post.a, &prior.a))
}

/// Gradients of [`kl`] with respect to the posterior and prior weights.
pub fn kl_grad(post: &PiecewiseParams, prior: &PiecewiseParams) -> Result<(Vec<f64>, Vec<f64>)> {
    if post.pieces() != prior.pieces() {
        return Err(Error::Contract(format!(
            "piecewise KL needs equal piece counts, got {} and {}",
            post.pieces(),
            prior.pieces()
        )));
    }
    let mut gq = vec![0.0; post.pieces()];
    let mut gp = vec![0.0; post.pieces()];
    kl_grad_raw(&post.a, &prior.a, &mut gq, &mut gp);
    Ok((gq, gp))
}

/// Maps a sample on `[0, 1]` to `[-1, 1]`.
pub fn shift_to_signed(z: f64) -> f64 {
    2.0 * z - 1.0
}

/// Linear map from an encoding to `dims * pieces` raw values, exponentiated
/// into weights. Row `d * pieces + i` produces weight `i` of dimension `d`.
/// `h` is absent when the head only has a learned bias.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseHead<T> {
    pub h: Option<T>,
    pub b: T,
}

impl<T> PiecewiseHead<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> PiecewiseHead<U> {
        PiecewiseHead {
            h: self.h.as_ref().map(&mut *f),
            b: f(&self.b),
        }
    }

    pub fn items(&self) -> Vec<&T> {
        self.h.iter().chain(std::iter::once(&self.b)).collect()
    }

    pub fn items_mut(&mut self) -> Vec<&mut T> {
        self.h.iter_mut().chain(std::iter::once(&mut self.b)).collect()
    }
}

impl PiecewiseHead<Param> {
    /// Zero bias (uniform weights); `h` Glorot-initialized when `enc_dim > 0`.
    pub fn init<R: Rng + ?Sized>(prefix: &str, enc_dim: usize, dims: usize, pieces: usize, rng: &mut R) -> Self {
        let rows = dims * pieces;
        PiecewiseHead {
            h: (enc_dim > 0).then(|| Param::glorot(format!("{prefix}.h"), rows, enc_dim, rng)),
            b: Param::zeros(format!("{prefix}.b"), vec![rows]),
        }
    }

    /// Weights for every latent dimension given an optional encoding.
    pub fn forward(&self, enc: Option<&[f64]>, pieces: usize) -> Result<Vec<PiecewiseParams>> {
        let mut tape = Tape::new();
        let vars = self.map(&mut |p| tape.constant(p.tensor()));
        let enc = enc.map(|e| tape.constant(Tensor::vector(e.to_vec())));
        let a = head_forward(&mut tape, &vars, enc)?;
        split_params(tape.value(a).data(), pieces)
    }
}

/// Records `exp(clamp(H·enc + b))` (or `exp(clamp(b))` without an encoding).
pub fn head_forward(tape: &mut Tape, head: &PiecewiseHead<Var>, enc: Option<Var>) -> Result<Var> {
    let raw = match (head.h, enc) {
        (Some(h), Some(e)) => tape.affine(e, h, head.b)?,
        (None, None) => head.b,
        (Some(h), None) => {
            return Err(Error::shape("piecewise head", tape.shape(h), &[]));
        }
        (None, Some(e)) => {
            return Err(Error::shape("piecewise head", &[], tape.shape(e)));
        }
    };
    Ok(tape.exp_clamped(raw, -RAW_CLAMP, RAW_CLAMP))
}

/// Splits a flat `dims * pieces` weight buffer into per-dimension params.
pub fn split_params(a: &[f64], pieces: usize) -> Result<Vec<PiecewiseParams>> {
    if pieces == 0 || a.len() % pieces != 0 {
        return Err(Error::shape("piecewise weights", &[a.len()], &[pieces]));
    }
    a.chunks_exact(pieces).map(|c| PiecewiseParams::new(c.to_vec())).collect()
}

#[derive(Debug)]
struct SampleOp {
    pieces: usize,
    eps: Vec<f64>,
}

impl CustomOp for SampleOp {
    fn name(&self) -> &'static str {
        "piecewise_sample"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Vec<f64>> {
        let a = inputs[0].data();
        let mut ga = vec![0.0; a.len()];
        let mut tmp = vec![0.0; self.pieces];
        for (d, (chunk, gout)) in a.chunks_exact(self.pieces).zip(grad).enumerate() {
            inverse_cdf_grad_raw(chunk, self.eps[d], &mut tmp);
            for (i, t) in tmp.iter().enumerate() {
                ga[d * self.pieces + i] = gout * t;
            }
        }
        vec![ga]
    }
}

/// Records inverse-CDF samples on `[0, 1]`, one per latent dimension, for
/// the flat weight buffer `a` and the given uniform noise.
pub fn sample_on_tape(tape: &mut Tape, a: Var, pieces: usize, eps: &[f64]) -> Result<Var> {
    let data = tape.value(a).data();
    if pieces < 2 || data.len() != pieces * eps.len() {
        return Err(Error::shape("piecewise sample", tape.shape(a), &[eps.len(), pieces]));
    }
    if let Some(&bad) = eps.iter().find(|e| !(0.0..=1.0).contains(*e)) {
        return Err(Error::Domain {
            op: "piecewise sample",
            value: bad,
        });
    }
    let z: Vec<f64> = data
        .chunks_exact(pieces)
        .zip(eps)
        .map(|(c, &e)| inverse_cdf_raw(c, e))
        .collect();
    let op = SampleOp {
        pieces,
        eps: eps.to_vec(),
    };
    Ok(tape.custom(&[a], Tensor::vector(z), Box::new(op)))
}

#[derive(Debug)]
struct KlOp {
    pieces: usize,
}

impl CustomOp for KlOp {
    fn name(&self) -> &'static str {
        "piecewise_kl"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Vec<f64>> {
        let q = inputs[0].data();
        let p = inputs[1].data();
        let mut gq = vec![0.0; q.len()];
        let mut gp = vec![0.0; p.len()];
        let n = self.pieces;
        for d in 0..q.len() / n {
            let r = d * n..(d + 1) * n;
            kl_grad_raw(&q[r.clone()], &p[r.clone()], &mut gq[r.clone()], &mut gp[r]);
        }
        gq.iter_mut().chain(gp.iter_mut()).for_each(|v| *v *= grad[0]);
        vec![gq, gp]
    }
}

/// Records the summed KL over all latent dimensions.
pub fn kl_on_tape(tape: &mut Tape, post: Var, prior: Var, pieces: usize) -> Result<Var> {
    let q = tape.value(post).data();
    let p = tape.value(prior).data();
    if pieces < 2 || q.len() != p.len() || q.len() % pieces != 0 {
        return Err(Error::shape("piecewise kl", tape.shape(post), tape.shape(prior)));
    }
    let total: f64 = q
        .chunks_exact(pieces)
        .zip(p.chunks_exact(pieces))
        .map(|(a, b)| kl_raw(a, b))
        .sum();
    Ok(tape.custom(&[post, prior], Tensor::scalar(total), Box::new(KlOp { pieces })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn p(a: &[f64]) -> PiecewiseParams {
        PiecewiseParams::new(a.to_vec()).unwrap()
    }

    #[test]
    fn pdf_examples() {
        assert_eq!(p(&[1.0, 1.0]).pdf(0.3).unwrap(), 1.0);
        let q = p(&[1.0, 3.0]);
        assert_eq!(q.pdf(0.25).unwrap(), 0.5);
        assert_eq!(q.pdf(0.75).unwrap(), 1.5);
        // half-open segments, last one closed
        assert_eq!(q.pdf(0.5).unwrap(), 1.5);
        assert_eq!(q.pdf(1.0).unwrap(), 1.5);
        assert_eq!(q.pdf(0.0).unwrap(), 0.5);
    }

    #[test]
    fn cdf_examples() {
        let u = p(&[1.0, 1.0]);
        for z in [0.0, 0.1, 0.5, 0.77, 1.0] {
            assert!((u.cdf(z).unwrap() - z).abs() < 1e-15);
        }
        let q = p(&[1.0, 3.0]);
        assert!((q.cdf(0.5).unwrap() - 0.25).abs() < 1e-15);
        assert!((q.cdf(0.75).unwrap() - 0.625).abs() < 1e-15);
        assert_eq!(q.cdf(0.0).unwrap(), 0.0);
        assert_eq!(q.cdf(1.0).unwrap(), 1.0);
    }

    #[test]
    fn inverse_cdf_examples() {
        assert!((p(&[1.0, 1.0]).inverse_cdf(0.7).unwrap() - 0.7).abs() < 1e-15);
        assert!((p(&[1.0, 3.0]).inverse_cdf(0.625).unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(p(&[1.0, 3.0]).inverse_cdf(0.0).unwrap(), 0.0);
        assert_eq!(p(&[1.0, 3.0]).inverse_cdf(1.0).unwrap(), 1.0);
    }

    #[test]
    fn domain_errors() {
        let q = p(&[1.0, 3.0]);
        assert!(matches!(q.pdf(-0.1), Err(Error::Domain { .. })));
        assert!(matches!(q.cdf(1.5), Err(Error::Domain { .. })));
        assert!(matches!(q.inverse_cdf(f64::NAN), Err(Error::Domain { .. })));
        assert!(PiecewiseParams::new(vec![1.0]).is_err());
        assert!(PiecewiseParams::new(vec![1.0, 0.0]).is_err());
        assert!(PiecewiseParams::new(vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn boundary_eps_takes_right_segment() {
        // eps = 0.5 is the mass boundary between the two pieces
        let g = p(&[1.0, 1.0]).sample_grad(0.5).unwrap();
        // right segment: d z / d a_1 = (eps - 1)/(n a_2) = -0.25
        assert!((g[0] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn sample_grad_examples() {
        let g = p(&[1.0, 1.0]).sample_grad(0.25).unwrap();
        assert!(g[0] < 0.0 && g[1] > 0.0, "{g:?}");
        assert_eq!(p(&[2.0, 0.5, 3.0]).sample_grad(0.0).unwrap(), vec![0.0; 3]);
        assert_eq!(p(&[2.0, 0.5, 3.0]).inverse_cdf(0.0).unwrap(), 0.0);
    }

    #[test]
    fn kl_examples() {
        let prior = p(&[1.0, 1.0]);
        let post = p(&[1.0, 3.0]);
        let expected = 0.75 * 3f64.ln() - 2f64.ln();
        assert!((kl(&post, &prior).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.130812).abs() < 1e-6);
        assert_eq!(kl(&post, &post).unwrap().abs(), 0.0);
        assert!(kl(&post, &p(&[1.0, 1.0, 1.0])).is_err());
        let (gq, _) = kl_grad(&post, &post).unwrap();
        assert!(gq.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn shift_examples() {
        assert_eq!(shift_to_signed(0.0), -1.0);
        assert_eq!(shift_to_signed(0.5), 0.0);
        assert_eq!(shift_to_signed(1.0), 1.0);
    }

    #[test]
    fn mean_examples() {
        assert!((p(&[1.0; 4]).mean() - 0.5).abs() < 1e-15);
        assert!((p(&[1.0, 3.0]).mean() - 0.625).abs() < 1e-15);
    }

    #[test]
    fn peaks() {
        assert_eq!(p(&[3.0, 1.0, 3.0]).density_peaks(), vec![0, 2]);
        assert_eq!(p(&[1.0, 3.0, 1.0]).density_peaks(), vec![1]);
        assert!(p(&[1.0, 1.0]).density_peaks().is_empty());
        assert_eq!(p(&[3.0, 3.0, 1.0, 2.0]).density_peaks(), vec![0, 3]);
    }

    #[test]
    fn head_uniform_prior_and_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = PiecewiseHead::init("prior", 0, 3, 4, &mut rng);
        let params = head.forward(None, 4).unwrap();
        assert_eq!(params.len(), 3);
        for q in params {
            assert_eq!(q.weights(), &[1.0; 4]);
        }
        let mut head = PiecewiseHead::init("prior", 0, 1, 2, &mut rng);
        head.b.data = vec![30.0, 500.0];
        let params = head.forward(None, 2).unwrap();
        assert_eq!(params[0].weights(), &[30f64.exp(), 30f64.exp()]);
    }

    #[test]
    fn head_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = PiecewiseHead::init("post", 4, 2, 3, &mut rng);
        assert!(head.forward(Some(&[1.0, 2.0]), 3).is_err());
        assert!(head.forward(None, 3).is_err());
        assert_eq!(head.forward(Some(&[1.0, 2.0, 0.0, 1.0]), 3).unwrap().len(), 2);
    }

    #[test]
    fn sampling_is_reproducible() {
        let q = p(&[0.3, 2.0, 1.0]);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..100).map(|_| q.sample(&mut rng).z).collect::<Vec<_>>()
        };
        assert_eq!(draw(4), draw(4));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = q.sample(&mut rng);
        assert_eq!(q.inverse_cdf(d.eps).unwrap(), d.z);
    }
}
