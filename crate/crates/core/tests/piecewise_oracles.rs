mod common;

use common::*;
use pwvae::corpus::Document;
use pwvae::gaussian::GaussianParams;
use pwvae::nvdm::{ModelConfig, Noise, NvdmModel, Variant};
use pwvae::piecewise::{self, PiecewiseParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn density_integrates_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [2, 3, 5, 10] {
        for _ in 0..40 {
            let p = random_params(&mut rng, n);
            assert!((quad_pdf_mass(&p) - 1.0).abs() < 1e-8);
        }
    }
}

#[test]
fn cdf_matches_integrated_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in [2, 3, 5, 10] {
        let p = random_params(&mut rng, n);
        for _ in 0..20 {
            let z: f64 = rng.random();
            let cells = (z * n as f64).ceil() as usize;
            // integrate over whole segments up to z's segment, then the remainder
            let full = (cells.saturating_sub(1)) as f64 / n as f64;
            let head = if full > 0.0 {
                integrate(&|t| p.pdf(t * full).unwrap() * full, cells - 1, 4)
            } else {
                0.0
            };
            let tail = integrate(&|t| p.pdf(full + t * (z - full)).unwrap() * (z - full), 1, 4);
            assert!((p.cdf(z).unwrap() - (head + tail)).abs() < 1e-12);
        }
    }
}

#[test]
fn inverse_cdf_agrees_with_bisection() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [2, 3, 5, 10] {
        for _ in 0..20 {
            let p = random_params(&mut rng, n);
            let e: f64 = rng.random();
            let z = p.inverse_cdf(e).unwrap();
            assert!((z - bisect_inverse(&p, e)).abs() < 1e-10);
            assert!((p.cdf(z).unwrap() - e).abs() < 1e-12);
        }
    }
}

#[test]
fn kl_agrees_with_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for n in [2, 3, 5, 10] {
        for _ in 0..30 {
            let q = random_params(&mut rng, n);
            let p = random_params(&mut rng, n);
            let exact = piecewise::kl(&q, &p).unwrap();
            assert!(rel_err(exact, quad_kl(&q, &p)) < 1e-6);
            assert!(piecewise::kl(&q, &q).unwrap().abs() < 1e-14);
        }
    }
    let q = PiecewiseParams::new(vec![1.0, 3.0]).unwrap();
    let p = PiecewiseParams::uniform(2).unwrap();
    let expected = 0.75 * 3f64.ln() - 2f64.ln();
    assert!((piecewise::kl(&q, &p).unwrap() - expected).abs() < 1e-9);
}

#[test]
fn uniform_samples_pass_ks() {
    let p = PiecewiseParams::uniform(5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut z: Vec<f64> = (0..100_000).map(|_| p.sample(&mut rng).z).collect();
    assert!(ks_uniform(&mut z) < 0.006);
}

#[test]
fn sample_histograms_match_masses() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for n in [2, 3, 5, 10] {
        let p = random_params(&mut rng, n);
        let z: Vec<f64> = (0..100_000).map(|_| p.sample(&mut rng).z).collect();
        assert!(histogram_tv(&p, &z) < 0.01);
    }
}

#[test]
fn closed_form_mean_matches_monte_carlo() {
    let p = PiecewiseParams::new(vec![1.0, 3.0]).unwrap();
    assert!((p.mean() - 0.625).abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n in [2, 5, 10] {
        let p = random_params(&mut rng, n);
        let draws: Vec<f64> = (0..100_000).map(|_| p.sample(&mut rng).z).collect();
        let m = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|z| (z - m).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        let se = (var / draws.len() as f64).sqrt();
        assert!((m - p.mean()).abs() < 3.0 * se, "n={n} mc {m} exact {}", p.mean());
        assert!((0.0..=1.0).contains(&p.mean()));
    }
}

#[test]
fn gaussian_sample_moments() {
    let g = GaussianParams::new(vec![0.3, -1.0], vec![0.5, 2.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 100_000;
    let draws: Vec<Vec<f64>> = (0..n).map(|_| g.sample(&mut rng).0).collect();
    for d in 0..2 {
        let m = draws.iter().map(|z| z[d]).sum::<f64>() / n as f64;
        let v = draws.iter().map(|z| (z[d] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((m - g.mu[d]).abs() < 0.02);
        assert!((v - g.var[d]).abs() < 0.02 * g.var[d].max(1.0));
    }
}

#[test]
fn bimodal_pieces_and_products() {
    let p = PiecewiseParams::new(vec![3.0, 1.0, 3.0]).unwrap();
    assert_eq!(p.density_peaks(), vec![0, 2]);
    assert!(p.pdf(0.5).unwrap() < p.pdf(0.1).unwrap());
    for d in 1..=4 {
        let factors = vec![p.clone(); d];
        assert_eq!(product_modes(&factors), (1 << d, 1 << d));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for d in 1..=4 {
        let factors: Vec<PiecewiseParams> = (0..d)
            .map(|_| {
                let lo = rng.random_range(0.1..1.0);
                PiecewiseParams::new(vec![rng.random_range(2.0..4.0), lo, rng.random_range(2.0..4.0), lo]).unwrap()
            })
            .collect();
        assert_eq!(product_modes(&factors).1, 1 << d);
    }
}

/// Exact marginal likelihood of a one-dimensional piecewise model by
/// quadrature over z against the bound.
#[test]
fn bound_is_below_exact_log_likelihood() {
    let mut c = ModelConfig::new(Variant::P, 4);
    c.hidden = 3;
    c.piece_dims = 1;
    c.pieces = 2;
    let mut model = NvdmModel::new(c, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for prm in model.params_mut() {
        for x in prm.data.iter_mut() {
            *x += rng.random_range(-1.0..1.0);
        }
    }
    let prior = model.prior_params().unwrap().piecewise_prior[0].clone();
    let docs = [
        Document::new("a", [(0, 3), (1, 1)]),
        Document::new("b", [(2, 2), (3, 2)]),
        Document::new("c", [(1, 1)]),
    ];
    for doc in &docs {
        let loglik_at = |z: f64| {
            let lp = model.decode_logprob(&[piecewise::shift_to_signed(z)]).unwrap();
            doc.terms.iter().map(|&(w, k)| k as f64 * lp[w]).sum::<f64>()
        };
        // 10^5-point composite rule split at the segment boundary.
        let exact = integrate(&|z| prior.pdf(z).unwrap() * loglik_at(z).exp(), 2 * 6250, 8).ln();
        let noise = Noise::draw_many(&model.config, 100, &mut rng);
        let per_sample: Vec<f64> = noise
            .iter()
            .map(|n| model.elbo_with_noise(doc, 1.0, std::slice::from_ref(n)).unwrap().bound)
            .collect();
        let m = per_sample.iter().sum::<f64>() / 100.0;
        let sd = (per_sample.iter().map(|b| (b - m).powi(2)).sum::<f64>() / 99.0).sqrt();
        assert!(exact >= m - 3.0 * sd / 10.0, "exact {exact} bound {m}");
    }
}
