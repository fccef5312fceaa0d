//! Diagonal Gaussian latent variables with a learned prior and a gated
//! posterior that interpolates between the prior and a data-driven estimate.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::param::Param;
use crate::tensor::{CustomOp, Tape, Tensor, Var};

/// Added to every softplus variance.
pub const VAR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mu: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mu.len() != var.len() {
            return Err(Error::shape("gaussian params", &[mu.len()], &[var.len()]));
        }
        if let Some(bad) = var.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Contract(format!("gaussian variance {bad} is not positive and finite")));
        }
        Ok(GaussianParams { mu, var })
    }

    pub fn dims(&self) -> usize {
        self.mu.len()
    }

    /// Reparametrized draw `mu + sqrt(var) * eps`; returns `(z, eps)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let eps: Vec<f64> = (0..self.dims()).map(|_| rng.sample(StandardNormal)).collect();
        (self.sample_with(&eps), eps)
    }

    pub fn sample_with(&self, eps: &[f64]) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.var)
            .zip(eps)
            .map(|((m, v), e)| m + v.sqrt() * e)
            .collect()
    }
}

fn kl_terms(mq: &[f64], vq: &[f64], mp: &[f64], vp: &[f64]) -> f64 {
    (0..mq.len())
        .map(|d| {
            let diff = mq[d] - mp[d];
            0.5 * (vp[d] / vq[d]).ln() + (vq[d] + diff * diff) / (2.0 * vp[d]) - 0.5
        })
        .sum()
}

/// `KL(post || prior)` summed over dimensions.
pub fn kl(post: &GaussianParams, prior: &GaussianParams) -> Result<f64> {
    if post.dims() != prior.dims() {
        return Err(Error::shape("gaussian kl", &[post.dims()], &[prior.dims()]));
    }
    Ok(kl_terms(&post.mu, &post.var, &prior.mu, &prior.var))
}

/// Gaussian latent parametrization. Prior weights `*_h_*` are absent when
/// the prior has no conditioning input. Gates start at zero so that the
/// posterior equals the prior.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianHead<T> {
    pub prior_h_mu: Option<T>,
    pub prior_b_mu: T,
    pub prior_h_sigma: Option<T>,
    pub prior_b_sigma: T,
    pub post_h_mu: T,
    pub post_b_mu: T,
    pub post_h_sigma: T,
    pub post_b_sigma: T,
    pub gate_mu: T,
    pub gate_sigma: T,
}

impl<T> GaussianHead<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> GaussianHead<U> {
        GaussianHead {
            prior_h_mu: self.prior_h_mu.as_ref().map(&mut *f),
            prior_b_mu: f(&self.prior_b_mu),
            prior_h_sigma: self.prior_h_sigma.as_ref().map(&mut *f),
            prior_b_sigma: f(&self.prior_b_sigma),
            post_h_mu: f(&self.post_h_mu),
            post_b_mu: f(&self.post_b_mu),
            post_h_sigma: f(&self.post_h_sigma),
            post_b_sigma: f(&self.post_b_sigma),
            gate_mu: f(&self.gate_mu),
            gate_sigma: f(&self.gate_sigma),
        }
    }

    pub fn items(&self) -> Vec<&T> {
        let mut v: Vec<&T> = Vec::with_capacity(10);
        v.extend(self.prior_h_mu.as_ref());
        v.push(&self.prior_b_mu);
        v.extend(self.prior_h_sigma.as_ref());
        v.push(&self.prior_b_sigma);
        v.extend([
            &self.post_h_mu,
            &self.post_b_mu,
            &self.post_h_sigma,
            &self.post_b_sigma,
            &self.gate_mu,
            &self.gate_sigma,
        ]);
        v
    }

    pub fn items_mut(&mut self) -> Vec<&mut T> {
        let mut v: Vec<&mut T> = Vec::with_capacity(10);
        v.extend(self.prior_h_mu.as_mut());
        v.push(&mut self.prior_b_mu);
        v.extend(self.prior_h_sigma.as_mut());
        v.push(&mut self.prior_b_sigma);
        v.extend([
            &mut self.post_h_mu,
            &mut self.post_b_mu,
            &mut self.post_h_sigma,
            &mut self.post_b_sigma,
            &mut self.gate_mu,
            &mut self.gate_sigma,
        ]);
        v
    }
}

impl GaussianHead<Param> {
    pub fn init<R: Rng + ?Sized>(
        prefix: &str,
        cond_dim: usize,
        enc_dim: usize,
        dims: usize,
        rng: &mut R,
    ) -> Self {
        let prior_h = |name: &str, rng: &mut R| {
            (cond_dim > 0).then(|| Param::glorot(format!("{prefix}.{name}"), dims, cond_dim, rng))
        };
        let prior_h_mu = prior_h("prior_h_mu", rng);
        let prior_h_sigma = prior_h("prior_h_sigma", rng);
        GaussianHead {
            prior_h_mu,
            prior_b_mu: Param::zeros(format!("{prefix}.prior_b_mu"), vec![dims]),
            prior_h_sigma,
            prior_b_sigma: Param::zeros(format!("{prefix}.prior_b_sigma"), vec![dims]),
            post_h_mu: Param::glorot(format!("{prefix}.post_h_mu"), dims, enc_dim, rng),
            post_b_mu: Param::zeros(format!("{prefix}.post_b_mu"), vec![dims]),
            post_h_sigma: Param::glorot(format!("{prefix}.post_h_sigma"), dims, enc_dim, rng),
            post_b_sigma: Param::zeros(format!("{prefix}.post_b_sigma"), vec![dims]),
            gate_mu: Param::zeros(format!("{prefix}.gate_mu"), vec![dims]),
            gate_sigma: Param::zeros(format!("{prefix}.gate_sigma"), vec![dims]),
        }
    }

    pub fn prior(&self, cond: Option<&[f64]>) -> Result<GaussianParams> {
        let mut tape = Tape::new();
        let head = self.map(&mut |p| tape.constant(p.tensor()));
        let cond = cond.map(|c| tape.constant(Tensor::vector(c.to_vec())));
        let g = prior_forward(&mut tape, &head, cond)?;
        Ok(g.values(&tape))
    }

    pub fn posterior(&self, cond: Option<&[f64]>, enc: &[f64]) -> Result<GaussianParams> {
        let mut tape = Tape::new();
        let head = self.map(&mut |p| tape.constant(p.tensor()));
        let cond = cond.map(|c| tape.constant(Tensor::vector(c.to_vec())));
        let enc = tape.constant(Tensor::vector(enc.to_vec()));
        let prior = prior_forward(&mut tape, &head, cond)?;
        let g = posterior_forward(&mut tape, &head, &prior, enc)?;
        Ok(g.values(&tape))
    }
}

/// Mean and variance nodes of a Gaussian on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mu: Var,
    pub var: Var,
}

impl GaussianVars {
    pub fn values(&self, tape: &Tape) -> GaussianParams {
        GaussianParams {
            mu: tape.value(self.mu).data().to_vec(),
            var: tape.value(self.var).data().to_vec(),
        }
    }
}

fn linear(tape: &mut Tape, h: Option<Var>, b: Var, input: Option<Var>, op: &'static str) -> Result<Var> {
    match (h, input) {
        (Some(h), Some(x)) => tape.affine(x, h, b),
        (None, None) => Ok(b),
        (Some(h), None) => Err(Error::shape(op, tape.shape(h), &[])),
        (None, Some(x)) => Err(Error::shape(op, &[], tape.shape(x))),
    }
}

/// `mu = H_mu·c + b_mu`, `var = softplus(H_sigma·c + b_sigma) + VAR_FLOOR`.
pub fn prior_forward(tape: &mut Tape, head: &GaussianHead<Var>, cond: Option<Var>) -> Result<GaussianVars> {
    let mu = linear(tape, head.prior_h_mu, head.prior_b_mu, cond, "gaussian prior")?;
    let raw = linear(tape, head.prior_h_sigma, head.prior_b_sigma, cond, "gaussian prior")?;
    let sp = tape.softplus(raw);
    let var = tape.add_scalar(sp, VAR_FLOOR);
    Ok(GaussianVars { mu, var })
}

/// `(1 - α)·prior + α·estimate` for both mean and variance, with raw
/// (unsquashed) gates. The interpolated variance is floored at
/// [`VAR_FLOOR`] since gates outside `[0, 1]` could push it negative.
pub fn posterior_forward(
    tape: &mut Tape,
    head: &GaussianHead<Var>,
    prior: &GaussianVars,
    enc: Var,
) -> Result<GaussianVars> {
    let est_mu = tape.affine(enc, head.post_h_mu, head.post_b_mu)?;
    let raw = tape.affine(enc, head.post_h_sigma, head.post_b_sigma)?;
    let sp = tape.softplus(raw);
    let est_var = tape.add_scalar(sp, VAR_FLOOR);
    let mu = interpolate(tape, head.gate_mu, prior.mu, est_mu)?;
    let var = interpolate(tape, head.gate_sigma, prior.var, est_var)?;
    let var = tape.floor_at(var, VAR_FLOOR);
    Ok(GaussianVars { mu, var })
}

fn interpolate(tape: &mut Tape, gate: Var, from: Var, to: Var) -> Result<Var> {
    let neg = tape.scale(gate, -1.0);
    let keep = tape.add_scalar(neg, 1.0);
    let a = tape.mul(keep, from)?;
    let b = tape.mul(gate, to)?;
    tape.add(a, b)
}

/// Records `mu + sqrt(var) * eps` for fixed noise `eps`.
pub fn sample_on_tape(tape: &mut Tape, g: &GaussianVars, eps: &[f64]) -> Result<Var> {
    let sd = tape.sqrt(g.var);
    let scaled = tape.mul_const(sd, eps)?;
    tape.add(g.mu, scaled)
}

#[derive(Debug)]
struct KlOp;

impl CustomOp for KlOp {
    fn name(&self) -> &'static str {
        "gaussian_kl"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Vec<f64>> {
        let (mq, vq, mp, vp) = (inputs[0].data(), inputs[1].data(), inputs[2].data(), inputs[3].data());
        let g = grad[0];
        let n = mq.len();
        let mut out = vec![vec![0.0; n]; 4];
        for d in 0..n {
            let diff = mq[d] - mp[d];
            out[0][d] = g * diff / vp[d];
            out[1][d] = g * (0.5 / vp[d] - 0.5 / vq[d]);
            out[2][d] = -g * diff / vp[d];
            out[3][d] = g * (0.5 / vp[d] - (vq[d] + diff * diff) / (2.0 * vp[d] * vp[d]));
        }
        out
    }
}

/// Records the summed `KL(post || prior)`.
pub fn kl_on_tape(tape: &mut Tape, post: &GaussianVars, prior: &GaussianVars) -> Result<Var> {
    let shapes = [post.mu, post.var, prior.mu, prior.var].map(|v| tape.shape(v).to_vec());
    if shapes.iter().any(|s| *s != shapes[0]) {
        return Err(Error::shape("gaussian kl", &shapes[0], &shapes[3]));
    }
    let total = kl_terms(
        tape.value(post.mu).data(),
        tape.value(post.var).data(),
        tape.value(prior.mu).data(),
        tape.value(prior.var).data(),
    );
    Ok(tape.custom(
        &[post.mu, post.var, prior.mu, prior.var],
        Tensor::scalar(total),
        Box::new(KlOp),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn prior_with_zero_biases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = GaussianHead::init("g", 0, 4, 3, &mut rng);
        let prior = head.prior(None).unwrap();
        assert_eq!(prior.mu, vec![0.0; 3]);
        for v in prior.var {
            assert!((v - (2f64.ln() + 1e-8)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gate_posterior_is_prior_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut head = GaussianHead::init("g", 0, 4, 3, &mut rng);
        head.prior_b_mu.data = vec![0.3, -1.0, 2.0];
        head.prior_b_sigma.data = vec![-2.0, 0.5, 4.0];
        head.post_b_mu.data = vec![5.0, 5.0, 5.0];
        let prior = head.prior(None).unwrap();
        let post = head.posterior(None, &[1.0, -2.0, 0.5, 3.0]).unwrap();
        assert_eq!(post, prior);
    }

    #[test]
    fn unit_gate_ignores_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut head = GaussianHead::init("g", 0, 2, 2, &mut rng);
        head.gate_mu.data = vec![1.0, 1.0];
        head.gate_sigma.data = vec![1.0, 1.0];
        let enc = [0.4, -0.7];
        let a = head.posterior(None, &enc).unwrap();
        head.prior_b_mu.data = vec![9.0, -9.0];
        head.prior_b_sigma.data = vec![3.0, -3.0];
        let b = head.posterior(None, &enc).unwrap();
        for (x, y) in a.mu.iter().chain(&a.var).zip(b.mu.iter().chain(&b.var)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_examples() {
        let a = GaussianParams::new(vec![0.2, -1.0], vec![0.5, 2.0]).unwrap();
        assert_eq!(kl(&a, &a).unwrap(), 0.0);
        let post = GaussianParams::new(vec![1.0], vec![1.0]).unwrap();
        let prior = GaussianParams::new(vec![0.0], vec![1.0]).unwrap();
        assert!((kl(&post, &prior).unwrap() - 0.5).abs() < 1e-15);
        assert!(kl(&post, &a).is_err());
    }

    #[test]
    fn degenerate_variance_sample_is_mean() {
        let g = GaussianParams::new(vec![1.5, -2.0], vec![VAR_FLOOR, VAR_FLOOR]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let (z, _) = g.sample(&mut rng);
            assert!((z[0] - 1.5).abs() < 1e-3 && (z[1] + 2.0).abs() < 1e-3);
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let g = GaussianParams::new(vec![0.0; 3], vec![1.0; 3]).unwrap();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            (0..10).map(|_| g.sample(&mut rng).0).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_bad_variance() {
        assert!(GaussianParams::new(vec![0.0], vec![0.0]).is_err());
        assert!(GaussianParams::new(vec![0.0], vec![1.0, 2.0]).is_err());
    }
}
