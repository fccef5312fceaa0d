//! Independent numerical oracles shared by the integration tests and the
//! acceptance target: central finite differences, Gauss-Legendre
//! quadrature, bisection, Kolmogorov-Smirnov and histogram distances.

#![allow(dead_code)]

use pwvae::corpus::Document;
use pwvae::gaussian::{self, GaussianVars};
use pwvae::nvdm::{ModelConfig, Noise, NvdmModel, Variant};
use pwvae::piecewise::{self, PiecewiseParams};
use pwvae::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, floor)`; the floor keeps near-zero entries
/// from dominating on rounding noise alone.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}

/// Central differences of `f` at `x`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

type Builder<'a> = dyn Fn(&mut Tape, &[Var]) -> Var + 'a;

/// Checks an op graph: the output is reduced to a scalar through fixed
/// random weights, then the tape gradient of every input is compared to
/// central differences. Returns the max relative error.
pub fn check_graph(inputs: &[Tensor], build: &Builder<'_>, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let y = build(&mut t, &vars);
        t.value(y).len()
    };
    let weights: Vec<f64> = (0..probe).map(|_| rng.random_range(0.5..1.5)).collect();
    let eval = |vals: &[Tensor], trainable: bool| {
        let mut t = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|x| t.leaf(x.clone(), trainable)).collect();
        let y = build(&mut t, &vars);
        let w = t.mul_const(y, &weights).unwrap();
        let s = t.sum(w);
        (t, vars, s)
    };
    let (mut t, vars, s) = eval(inputs, true);
    let grads = t.backward(s).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        let mut f = |x: &[f64]| {
            let mut vals = inputs.to_vec();
            vals[k] = Tensor::new(input.shape().to_vec(), x.to_vec()).unwrap();
            let (t, _, s) = eval(&vals, false);
            t.scalar(s)
        };
        let numeric = central_diff(&mut f, input.data(), FD_STEP);
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    worst
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values bounded away from zero, random sign.
fn rand_nonzero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Every analytic gradient in the library against finite differences.
pub fn gradient_suite() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let v = |d: Vec<f64>| Tensor::vector(d);
    let mut push = |name: &str, err: f64| out.push((name.to_string(), err));

    let x = v(rand_vec(&mut rng, 4, -1.0, 1.0));
    let w = Tensor::matrix(3, 4, rand_vec(&mut rng, 12, -1.0, 1.0)).unwrap();
    let b = v(rand_vec(&mut rng, 3, -1.0, 1.0));
    push(
        "affine",
        check_graph(&[x.clone(), w.clone(), b.clone()], &|t, a| t.affine(a[0], a[1], a[2]).unwrap(), 1),
    );
    push("matvec", check_graph(&[w.clone(), x.clone()], &|t, a| t.matvec(a[0], a[1]).unwrap(), 2));

    let p = v(rand_vec(&mut rng, 5, -2.0, 2.0));
    let q = v(rand_vec(&mut rng, 5, -2.0, 2.0));
    push("add", check_graph(&[p.clone(), q.clone()], &|t, a| t.add(a[0], a[1]).unwrap(), 3));
    push("sub", check_graph(&[p.clone(), q.clone()], &|t, a| t.sub(a[0], a[1]).unwrap(), 4));
    push("mul", check_graph(&[p.clone(), q.clone()], &|t, a| t.mul(a[0], a[1]).unwrap(), 5));
    push("scale", check_graph(&[p.clone()], &|t, a| t.scale(a[0], -1.7), 6));
    push("add_scalar", check_graph(&[p.clone()], &|t, a| t.add_scalar(a[0], 0.3), 7));
    let c = rand_vec(&mut rng, 5, -1.0, 1.0);
    push("mul_const", check_graph(&[p.clone()], &|t, a| t.mul_const(a[0], &c).unwrap(), 8));

    let kinked = v(rand_nonzero(&mut rng, 6));
    push(
        "prelu (shared leak)",
        check_graph(&[kinked.clone(), Tensor::scalar(0.25)], &|t, a| t.prelu(a[0], a[1]).unwrap(), 9),
    );
    let leaks = v(rand_vec(&mut rng, 6, 0.05, 0.5));
    push(
        "prelu (per-unit leak)",
        check_graph(&[kinked.clone(), leaks], &|t, a| t.prelu(a[0], a[1]).unwrap(), 10),
    );
    let wide = v(vec![-40.0, -3.0, -0.5, 0.0, 0.7, 4.0, 35.0]);
    push("softsign", check_graph(&[wide.clone()], &|t, a| t.softsign(a[0]), 11));
    push("softplus", check_graph(&[wide.clone()], &|t, a| t.softplus(a[0]), 12));
    push("exp", check_graph(&[p.clone()], &|t, a| t.exp(a[0]), 13));
    let pos = v(rand_vec(&mut rng, 5, 0.2, 3.0));
    push("log", check_graph(&[pos.clone()], &|t, a| t.log(a[0]), 14));
    push("sqrt", check_graph(&[pos.clone()], &|t, a| t.sqrt(a[0]), 15));
    push("exp_clamped", check_graph(&[p.clone()], &|t, a| t.exp_clamped(a[0], -30.0, 30.0), 16));
    push("floor_at", check_graph(&[pos.clone()], &|t, a| t.floor_at(a[0], 1e-8), 17));
    push("log_softmax", check_graph(&[p.clone()], &|t, a| t.log_softmax(a[0]).unwrap(), 18));
    push("sum", check_graph(&[p.clone()], &|t, a| t.sum(a[0]), 19));
    push(
        "sparse_dot",
        check_graph(&[p.clone()], &|t, a| t.sparse_dot(a[0], &[0, 3, 4], &[2.0, 1.0, 5.0]).unwrap(), 20),
    );
    push("concat", check_graph(&[p.clone(), b.clone()], &|t, a| t.concat(&[a[0], a[1]]).unwrap(), 21));
    push("add_n", check_graph(&[p.clone(), q.clone(), p.clone()], &|t, a| t.add_n(a).unwrap(), 22));

    // Gaussian KL and reparametrized samples.
    let mq = v(rand_vec(&mut rng, 4, -1.0, 1.0));
    let vq = v(rand_vec(&mut rng, 4, 0.2, 2.0));
    let mp = v(rand_vec(&mut rng, 4, -1.0, 1.0));
    let vp = v(rand_vec(&mut rng, 4, 0.2, 2.0));
    push(
        "gaussian kl",
        check_graph(
            &[mq.clone(), vq.clone(), mp, vp],
            &|t, a| {
                let post = GaussianVars { mu: a[0], var: a[1] };
                let prior = GaussianVars { mu: a[2], var: a[3] };
                gaussian::kl_on_tape(t, &post, &prior).unwrap()
            },
            23,
        ),
    );
    let eps_g = rand_vec(&mut rng, 4, -2.0, 2.0);
    push(
        "gaussian sample (fixed eps)",
        check_graph(
            &[mq, vq],
            &|t, a| gaussian::sample_on_tape(t, &GaussianVars { mu: a[0], var: a[1] }, &eps_g).unwrap(),
            24,
        ),
    );

    // Piecewise KL and pathwise samples, n in {2, 3, 5, 10}.
    for (j, n) in [2usize, 3, 5, 10].into_iter().enumerate() {
        let dims = 3;
        let qa = v(rand_vec(&mut rng, dims * n, 0.1, 3.0));
        let pa = v(rand_vec(&mut rng, dims * n, 0.1, 3.0));
        push(
            &format!("piecewise kl (n={n})"),
            check_graph(
                &[qa.clone(), pa],
                &move |t, a| piecewise::kl_on_tape(t, a[0], a[1], n).unwrap(),
                30 + j as u64,
            ),
        );
        // Keep each eps away from segment boundaries so the FD stencil
        // stays within one segment.
        let eps = safe_eps(&qa.data().chunks(n).collect::<Vec<_>>(), &mut rng);
        push(
            &format!("piecewise sample (n={n}, fixed eps)"),
            check_graph(
                &[qa],
                &move |t, a| piecewise::sample_on_tape(t, a[0], n, &eps).unwrap(),
                40 + j as u64,
            ),
        );
    }

    for (name, err) in elbo_gradient_checks() {
        push(&name, err);
    }
    out
}

fn safe_eps(chunks: &[&[f64]], rng: &mut ChaCha8Rng) -> Vec<f64> {
    chunks
        .iter()
        .map(|a| {
            let p = PiecewiseParams::new(a.to_vec()).unwrap();
            let masses = p.masses();
            loop {
                let e: f64 = rng.random_range(0.02..0.98);
                let mut acc = 0.0;
                let near = masses.iter().any(|m| {
                    acc += m;
                    (acc - e).abs() < 1e-3
                });
                if !near {
                    return e;
                }
            }
        })
        .collect()
}

/// Three-document toy corpus over a five-word vocabulary.
pub fn toy_docs() -> Vec<Document> {
    vec![
        Document::new("t0", [(0, 2), (3, 1)]),
        Document::new("t1", [(1, 1), (2, 3), (4, 1)]),
        Document::new("t2", [(4, 2)]),
    ]
}

pub fn toy_model(variant: Variant, seed: u64) -> NvdmModel {
    let mut c = ModelConfig::new(variant, 5);
    c.hidden = 4;
    let (g, p) = match variant {
        Variant::G => (2, 0),
        Variant::P => (0, 2),
        Variant::H => (2, 2),
    };
    c.gauss_dims = g;
    c.piece_dims = p;
    c.pieces = if p > 0 { 3 } else { 0 };
    let mut m = NvdmModel::new(c, seed).unwrap();
    // Move gates, biases and leaks off their symmetric initial values so
    // every path carries gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for prm in m.params_mut() {
        for x in prm.data.iter_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    m
}

/// Full bound gradient of toy models against finite differences with the
/// noise held fixed. Piecewise noise is re-drawn until it sits away from
/// segment boundaries for every perturbation.
pub fn elbo_gradient_checks() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (k, variant) in [Variant::G, Variant::P, Variant::H].into_iter().enumerate() {
        for act in [pwvae::nvdm::Activation::Prelu, pwvae::nvdm::Activation::Softsign] {
            let mut model = toy_model(variant, 10 + k as u64);
            model.config.activation = act;
            if act == pwvae::nvdm::Activation::Softsign {
                model.parts.encoder.leak0 = None;
                model.parts.encoder.leak1 = None;
            }
            let mut worst: f64 = 0.0;
            for (d, doc) in toy_docs().iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(77 + d as u64);
                let noise = stable_noise(&model, doc, &mut rng);
                let (_, grads) = model.elbo_grad(doc, 1.0, &noise).unwrap();
                let n_params = model.params().len();
                for pi in 0..n_params {
                    let base = model.params()[pi].data.clone();
                    let mut f = |x: &[f64]| {
                        let mut m = model.clone();
                        m.params_mut()[pi].data.copy_from_slice(x);
                        m.elbo_with_noise(doc, 1.0, &noise).unwrap().bound
                    };
                    let numeric = central_diff(&mut f, &base, FD_STEP);
                    worst = worst.max(max_rel_err(&grads[pi], &numeric));
                }
            }
            out.push((format!("nvdm bound ({variant}, {act}, |V|=5)"), worst));
        }
    }
    out
}

/// Noise whose piecewise draws sit at least 1e-3 in probability away from
/// every segment boundary of the document's posterior.
pub fn stable_noise(model: &NvdmModel, doc: &Document, rng: &mut ChaCha8Rng) -> Vec<Noise> {
    let lat = model.latent_params(doc).unwrap();
    let mut noise = Noise::draw_many(&model.config, 2, rng);
    for n in &mut noise {
        for (u, p) in n.uniform.iter_mut().zip(&lat.piecewise_post) {
            *u = safe_eps(&[p.weights()], rng)[0];
        }
    }
    noise
}

/// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration.
pub fn gauss_legendre(order: usize) -> Vec<(f64, f64)> {
    let n = order;
    (0..n)
        .map(|i| {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            (x, 2.0 / ((1.0 - x * x) * dp * dp))
        })
        .collect()
}

/// `∫_0^1 f` with Gauss-Legendre rules on `cells` equal sub-intervals.
pub fn integrate(f: &dyn Fn(f64) -> f64, cells: usize, order: usize) -> f64 {
    let rule = gauss_legendre(order);
    let h = 1.0 / cells as f64;
    (0..cells)
        .map(|c| {
            let mid = (c as f64 + 0.5) * h;
            rule.iter().map(|(x, w)| w * f(mid + 0.5 * h * x)).sum::<f64>() * 0.5 * h
        })
        .sum()
}

pub fn quad_pdf_mass(p: &PiecewiseParams) -> f64 {
    integrate(&|z| p.pdf(z).unwrap(), p.pieces(), 8)
}

pub fn quad_kl(q: &PiecewiseParams, p: &PiecewiseParams) -> f64 {
    integrate(
        &|z| {
            let a = q.pdf(z).unwrap();
            let b = p.pdf(z).unwrap();
            a * (a / b).ln()
        },
        q.pieces(),
        8,
    )
}

/// Inverse CDF by bisection on the CDF.
pub fn bisect_inverse(p: &PiecewiseParams, eps: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if p.cdf(mid).unwrap() < eps {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Kolmogorov-Smirnov statistic of `samples` against Uniform(0, 1).
pub fn ks_uniform(samples: &mut [f64]) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
        .fold(0.0, f64::max)
}

/// Total-variation distance between the per-segment sample frequencies
/// and the analytic masses.
pub fn histogram_tv(p: &PiecewiseParams, samples: &[f64]) -> f64 {
    let n = p.pieces();
    let mut counts = vec![0usize; n];
    for &z in samples {
        counts[((z * n as f64) as usize).min(n - 1)] += 1;
    }
    let total = samples.len() as f64;
    0.5 * counts
        .iter()
        .zip(p.masses())
        .map(|(&c, m)| (c as f64 / total - m).abs())
        .sum::<f64>()
}

pub fn random_params(rng: &mut ChaCha8Rng, n: usize) -> PiecewiseParams {
    let a = (0..n).map(|_| rng.random_range(-3.0f64..3.0).exp()).collect();
    PiecewiseParams::new(a).unwrap()
}

/// Indices of cells of the product density whose value equals the maximum,
/// and of cells that are strict local maxima over axis neighbours.
pub fn product_modes(factors: &[PiecewiseParams]) -> (usize, usize) {
    let n: Vec<usize> = factors.iter().map(|p| p.pieces()).collect();
    let total: usize = n.iter().product();
    let index = |mut c: usize| -> Vec<usize> {
        n.iter()
            .map(|&k| {
                let i = c % k;
                c /= k;
                i
            })
            .collect()
    };
    let density = |idx: &[usize]| -> f64 {
        factors
            .iter()
            .zip(idx)
            .map(|(p, &i)| p.pdf((i as f64 + 0.5) / p.pieces() as f64).unwrap())
            .product()
    };
    let values: Vec<f64> = (0..total).map(|c| density(&index(c))).collect();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let global = values.iter().filter(|&&v| (v - max).abs() <= 1e-12 * max).count();
    let local = (0..total)
        .filter(|&c| {
            let idx = index(c);
            (0..idx.len()).all(|d| {
                [-1i64, 1].iter().all(|step| {
                    let j = idx[d] as i64 + step;
                    if j < 0 || j >= n[d] as i64 {
                        return true;
                    }
                    let mut nb = idx.clone();
                    nb[d] = j as usize;
                    density(&nb) < values[c]
                })
            })
        })
        .count();
    (global, local)
}
