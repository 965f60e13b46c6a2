use causal_rul::gradcore::special::{digamma, gamma_p, lgamma};
use causal_rul::gradcore::{Tape, Tensor};
use causal_rul::prob::{nll, nll_loss, GammaParams};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, ContinuousCDF, Gamma};
use statrs::function::gamma as reference;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

#[test]
fn special_functions_agree_with_reference() {
    for i in 1..400 {
        let x = 0.05 * i as f64;
        assert!((lgamma(x) - reference::ln_gamma(x)).abs() < 1e-12 * reference::ln_gamma(x).abs().max(1.0), "lgamma({x})");
        assert!((digamma(x) - reference::digamma(x)).abs() < 1e-10 * reference::digamma(x).abs().max(1.0), "digamma({x})");
    }
    for a in [0.3, 1.0, 2.5, 7.0, 30.0] {
        for k in 1..60 {
            let x = 0.1 * (k * k) as f64 / 4.0;
            let expect = reference::gamma_lr(a, x);
            assert!((gamma_p(a, x) - expect).abs() < 1e-11, "P({a}, {x}): {} vs {expect}", gamma_p(a, x));
        }
    }
}

/// `∫ p(y) dy` by the trapezoid rule in `u = ln y`, over the central
/// `1 − 2e-14` of the mass.
fn total_mass(p: &GammaParams) -> f64 {
    const N: usize = 40_000;
    let (lo, hi) = (p.quantile(1e-14).unwrap().ln(), p.quantile(1.0 - 1e-14).unwrap().ln());
    let h = (hi - lo) / N as f64;
    let f = |u: f64| (p.log_pdf(u.exp()).unwrap() + u).exp();
    let inner: f64 = (1..N).map(|i| f(lo + i as f64 * h)).sum();
    h * (inner + 0.5 * (f(lo) + f(hi)))
}

#[test]
fn density_integrates_to_one() {
    for alpha in [0.5, 1.0, 2.0, 5.0] {
        for beta in [0.5, 1.0, 2.0, 5.0] {
            let mass = total_mass(&GammaParams::new(alpha, beta).unwrap());
            assert!((mass - 1.0).abs() < 1e-6, "α={alpha} β={beta}: {mass}");
        }
    }
}

/// Kolmogorov–Smirnov statistic of sorted draws against `cdf`.
fn ks_statistic(sorted: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn samples_pass_kolmogorov_smirnov() {
    const N: usize = 20_000;
    // 99% critical value of the one-sample KS statistic.
    let critical = 1.628 / (N as f64).sqrt();
    for (i, (alpha, beta)) in [(0.4, 1.0), (1.0, 2.5), (3.0, 2.0), (12.0, 0.3)].into_iter().enumerate() {
        let p = GammaParams::new(alpha, beta).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
        let mut xs: Vec<f64> = (0..N).map(|_| p.sample(&mut rng)).collect();
        assert!(xs.iter().all(|&x| x > 0.0));
        xs.sort_by(f64::total_cmp);
        let reference = Gamma::new(alpha, beta).unwrap();
        let d = ks_statistic(&xs, |x| reference.cdf(x));
        assert!(d < critical, "α={alpha} β={beta}: D={d:.5} ≥ {critical:.5}");
    }
}

#[test]
fn quantiles_agree_with_reference_inverse() {
    for (alpha, beta) in [(0.5, 0.5), (1.0, 1.0), (2.0, 5.0), (5.0, 2.0)] {
        let p = GammaParams::new(alpha, beta).unwrap();
        let reference = Gamma::new(alpha, beta).unwrap();
        for q in [0.025, 0.05, 0.25, 0.5, 0.75, 0.95, 0.975] {
            let ours = p.quantile(q).unwrap();
            assert!(rel(ours, reference.inverse_cdf(q)) < 1e-6, "α={alpha} β={beta} q={q}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn quantile_round_trips_cdf(alpha in 0.3f64..20.0, beta in 0.1f64..10.0, u in 0.001f64..0.999) {
        let p = GammaParams::new(alpha, beta).unwrap();
        let y = p.quantile(u).unwrap();
        prop_assert!((p.cdf(y) - u).abs() < 1e-9);
        prop_assert!(rel(p.quantile(p.cdf(y)).unwrap(), y) < 1e-8);
    }

    #[test]
    fn quantile_increases_with_level(alpha in 0.3f64..20.0, beta in 0.1f64..10.0, a in 0.01f64..0.98, gap in 1e-3f64..0.01) {
        let p = GammaParams::new(alpha, beta).unwrap();
        prop_assert!(p.quantile(a).unwrap() < p.quantile(a + gap).unwrap());
    }

    #[test]
    fn tape_gradients_equal_closed_forms(alpha in 0.2f64..15.0, beta in 0.1f64..8.0, y in 0.01f64..10.0) {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![1, 1], vec![alpha]).unwrap());
        let b = tape.leaf(Tensor::new(vec![1, 1], vec![beta]).unwrap());
        let loss = nll_loss(a, b, &[y]).unwrap();
        let value = loss.item().unwrap();
        let g = tape.backward(loss).unwrap();
        let d_alpha = reference::digamma(alpha) - beta.ln() - y.ln();
        let d_beta = y - alpha / beta;
        prop_assert!((g.wrt(a).data()[0] - d_alpha).abs() <= 1e-6 * d_alpha.abs().max(1e-3));
        prop_assert!((g.wrt(b).data()[0] - d_beta).abs() <= 1e-6 * d_beta.abs().max(1e-3));
        let expect = -Gamma::new(alpha, beta).unwrap().ln_pdf(y);
        prop_assert!((value - expect).abs() <= 1e-9 * expect.abs().max(1.0));
    }

    #[test]
    fn batch_loss_is_additive(alpha in 0.2f64..15.0, beta in 0.1f64..8.0, y1 in 0.01f64..10.0, y2 in 0.01f64..10.0) {
        let p = GammaParams::new(alpha, beta).unwrap();
        let both = nll(&[p, p], &[y1, y2]).unwrap();
        let parts = nll(&[p], &[y1]).unwrap() + nll(&[p], &[y2]).unwrap();
        prop_assert!((both - parts).abs() <= 1e-12 * both.abs().max(1.0));
    }
}
