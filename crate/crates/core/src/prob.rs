//! Gamma predictive distribution (shape `alpha`, rate `beta`).
//!
//! Density: `f(y) = βᵅ / Γ(α) · y^{α−1} · e^{−βy}`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gradcore::special::{gamma_p, lgamma};
use crate::gradcore::{Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaParams {
    pub alpha: f64,
    pub beta: f64,
}

/// Point summaries of a Gamma distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaStats {
    pub mean: f64,
    pub variance: f64,
    /// `(α−1)/β` when `α > 1`, otherwise undefined.
    pub mode: Option<f64>,
}

impl GammaParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha.is_finite() && beta.is_finite() && alpha > 0.0 && beta > 0.0) {
            return Err(Error::Domain(format!(
                "Gamma parameters must be positive and finite, got α={alpha}, β={beta}"
            )));
        }
        Ok(Self { alpha, beta })
    }

    pub fn log_pdf(&self, y: f64) -> Result<f64> {
        if !(y > 0.0 && y.is_finite()) {
            return Err(Error::Domain(format!("Gamma log-density needs y > 0, got {y}")));
        }
        let (a, b) = (self.alpha, self.beta);
        Ok(a * b.ln() - lgamma(a) + (a - 1.0) * y.ln() - b * y)
    }

    pub fn cdf(&self, y: f64) -> f64 {
        if y <= 0.0 {
            0.0
        } else {
            gamma_p(self.alpha, self.beta * y)
        }
    }

    pub fn stats(&self) -> GammaStats {
        let (a, b) = (self.alpha, self.beta);
        GammaStats {
            mean: a / b,
            variance: a / (b * b),
            mode: (a > 1.0).then(|| (a - 1.0) / b),
        }
    }

    pub fn std_dev(&self) -> f64 {
        self.alpha.sqrt() / self.beta
    }

    /// Inverse CDF, by geometric bracketing then bisection to 1e-12 relative.
    pub fn quantile(&self, q: f64) -> Result<f64> {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::Domain(format!("quantile level {q} outside (0, 1)")));
        }
        let a = self.alpha;
        let p = |x: f64| gamma_p(a, x);
        let mut hi = a.max(1.0);
        while p(hi) < q {
            hi *= 2.0;
        }
        let mut lo = hi;
        while p(lo) > q && lo > 1e-300 {
            lo *= 0.5;
        }
        if p(lo) > q {
            return Ok(lo / self.beta);
        }
        for _ in 0..2_000 {
            if hi / lo <= 1.0 + 1e-12 {
                break;
            }
            let mid = (lo * hi).sqrt();
            if p(mid) < q {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi) / self.beta)
    }

    /// One draw via the Marsaglia–Tsang squeeze method; shapes below one are
    /// boosted (`α+1`, then scaled by `U^{1/α}`).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let x = if self.alpha < 1.0 {
            let boosted = marsaglia_tsang(self.alpha + 1.0, rng);
            let u: f64 = 1.0 - rng.random::<f64>();
            (boosted.ln() + u.ln() / self.alpha).exp()
        } else {
            marsaglia_tsang(self.alpha, rng)
        };
        (x / self.beta).max(f64::MIN_POSITIVE)
    }
}

fn marsaglia_tsang<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    let d = alpha - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u: f64 = 1.0 - rng.random::<f64>();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

/// Summed negative log-likelihood of the targets `y` under Gamma(`alpha`,
/// `beta`), differentiable through the tape. `alpha` and `beta` share a
/// shape with `y.len()` elements.
pub fn nll_loss<'t>(alpha: Var<'t>, beta: Var<'t>, y: &[f64]) -> Result<Var<'t>> {
    let shape = alpha.shape();
    if beta.shape() != shape || shape.iter().product::<usize>() != y.len() {
        return Err(Error::Dimension(format!(
            "nll_loss: α {shape:?}, β {:?}, {} targets",
            beta.shape(),
            y.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::Precondition("nll_loss needs at least one target".into()));
    }
    if let Some(bad) = y.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Domain(format!("Gamma target must be positive, got {bad}")));
    }
    let tape = alpha.tape();
    let ln_y = tape.constant(Tensor::new(shape.clone(), y.iter().map(|v| v.ln()).collect())?);
    let y = tape.constant(Tensor::new(shape, y.to_vec())?);

    let a_ln_b = alpha.mul(beta.log()?)?;
    let shape_term = alpha.add_scalar(-1.0)?.mul(ln_y)?;
    let rate_term = beta.mul(y)?;
    alpha
        .lgamma()?
        .sub(a_ln_b)?
        .sub(shape_term)?
        .add(rate_term)?
        .sum(None)
}

/// Value-only counterpart of [`nll_loss`].
pub fn nll(params: &[GammaParams], y: &[f64]) -> Result<f64> {
    if params.len() != y.len() {
        return Err(Error::Dimension(format!("{} predictions for {} targets", params.len(), y.len())));
    }
    params
        .iter()
        .zip(y)
        .map(|(p, &y)| p.log_pdf(y).map(|l| -l))
        .sum()
}

/// Closed-form `(∂nll/∂α, ∂nll/∂β)` for a single target.
pub fn nll_gradient(p: &GammaParams, y: f64) -> (f64, f64) {
    use crate::gradcore::special::digamma;
    (
        digamma(p.alpha) - p.beta.ln() - y.ln(),
        y - p.alpha / p.beta,
    )
}

/// Method-of-moments Gamma fit (`α = m²/v`, `β = m/v`).
pub fn fit_moments(values: &[f64]) -> Result<GammaParams> {
    if values.len() < 2 {
        return Err(Error::Precondition("moment fit needs at least two values".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 {
        return Err(Error::Domain("moment fit on constant values".into()));
    }
    GammaParams::new(mean * mean / var, mean / var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::{GradCheck, Tape};
    use crate::rng::stream;
    use std::f64::consts::LN_2;

    /// Adaptive Simpson quadrature (test oracle).
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
        fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                left + right + (left + right - whole) / 15.0
            } else {
                rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
            }
        }
        let m = 0.5 * (a + b);
        let (fa, fm, fb) = (f(a), f(m), f(b));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        rec(f, a, b, fa, fm, fb, whole, tol, 50)
    }

    /// ∫₀^upper f(y) dy with y = u², which removes the y^{α−1} singularity for α ≥ 0.5.
    fn integrate_density(p: &GammaParams, upper: f64) -> f64 {
        let f = |u: f64| {
            if u <= 0.0 {
                // limit of 2u·f(u²) as u→0
                if p.alpha == 0.5 {
                    2.0 * (0.5 * p.beta.ln() - lgamma(0.5)).exp()
                } else if p.alpha > 0.5 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                2.0 * u * p.log_pdf(u * u).unwrap().exp()
            }
        };
        simpson(&f, 0.0, upper.sqrt(), 1e-11)
    }

    #[test]
    fn log_pdf_examples() {
        let p = GammaParams::new(1.0, 1.0).unwrap();
        assert!((p.log_pdf(2.0).unwrap() + 2.0).abs() < 1e-14);
        let p = GammaParams::new(2.0, 1.0).unwrap();
        assert!((p.log_pdf(1.0).unwrap() + 1.0).abs() < 1e-14);
        assert!(matches!(p.log_pdf(0.0), Err(Error::Domain(_))));
        assert!(p.log_pdf(-1.0).is_err());
    }

    #[test]
    fn density_integrates_to_one_on_0_50() {
        let p = GammaParams::new(2.5, 1.3).unwrap();
        assert!((integrate_density(&p, 50.0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn density_integrates_to_one_on_grid() {
        for &a in &[0.5, 1.0, 2.0, 5.0] {
            for &b in &[0.5, 1.0, 2.0, 5.0] {
                let p = GammaParams::new(a, b).unwrap();
                let total = integrate_density(&p, 200.0 / b);
                assert!((total - 1.0).abs() < 1e-6, "α={a} β={b}: {total}");
            }
        }
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(GammaParams::new(0.0, 1.0).is_err());
        assert!(GammaParams::new(1.0, -1.0).is_err());
        assert!(GammaParams::new(f64::NAN, 1.0).is_err());
    }

    fn tape_nll(alpha: &[f64], beta: &[f64], y: &[f64]) -> (f64, Tensor, Tensor) {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::vector(alpha.to_vec()).unwrap());
        let b = tape.leaf(Tensor::vector(beta.to_vec()).unwrap());
        let loss = nll_loss(a, b, y).unwrap();
        let g = tape.backward(loss).unwrap();
        (loss.item().unwrap(), g.wrt(a), g.wrt(b))
    }

    #[test]
    fn nll_single_and_batch() {
        let (single, _, _) = tape_nll(&[1.0], &[1.0], &[2.0]);
        assert!((single - 2.0).abs() < 1e-14);
        let (double, _, _) = tape_nll(&[1.0, 1.0], &[1.0, 1.0], &[2.0, 2.0]);
        assert!((double - 2.0 * single).abs() < 1e-14);
    }

    #[test]
    fn nll_tape_gradient_matches_closed_form() {
        let cases = [(0.7, 2.0, 0.3), (3.5, 0.4, 6.0), (12.0, 9.0, 1.1)];
        for &(a, b, y) in &cases {
            let (_, ga, gb) = tape_nll(&[a], &[b], &[y]);
            let (ca, cb) = nll_gradient(&GammaParams::new(a, b).unwrap(), y);
            assert!((ga.data()[0] - ca).abs() <= 1e-6 * ca.abs().max(1e-12), "{a},{b},{y}");
            assert!((gb.data()[0] - cb).abs() <= 1e-6 * cb.abs().max(1e-12), "{a},{b},{y}");
        }
    }

    #[test]
    fn nll_closed_form_matches_finite_differences() {
        let (a, b, y) = (2.3, 1.7, 0.9);
        let p = GammaParams::new(a, b).unwrap();
        let (ca, cb) = nll_gradient(&p, y);
        let inputs = [Tensor::scalar(a), Tensor::scalar(b)];
        let analytic = [Tensor::scalar(ca), Tensor::scalar(cb)];
        let report = GradCheck { step: 1e-6, rtol: 1e-6, atol: 1e-9 }
            .check(&inputs, &analytic, |x| {
                let p = GammaParams::new(x[0].data()[0], x[1].data()[0])?;
                Ok(-p.log_pdf(y)?)
            })
            .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn nll_rejects_non_positive_target() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0]).unwrap());
        let b = tape.leaf(Tensor::vector(vec![1.0]).unwrap());
        assert!(matches!(nll_loss(a, b, &[0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn stats_examples() {
        let s = GammaParams::new(2.0, 4.0).unwrap().stats();
        assert!((s.mean - 0.5).abs() < 1e-15);
        assert!((s.variance - 0.125).abs() < 1e-15);
        assert!((s.mode.unwrap() - 0.25).abs() < 1e-15);
        assert!(GammaParams::new(1.0, 3.0).unwrap().stats().mode.is_none());
    }

    #[test]
    fn quantile_examples() {
        let p = GammaParams::new(1.0, 1.0).unwrap();
        assert!((p.quantile(0.5).unwrap() - LN_2).abs() < 1e-10);
        assert!(p.quantile(0.0).is_err());
        assert!(p.quantile(1.0).is_err());
    }

    #[test]
    fn quantile_inverts_cdf() {
        for &(a, b) in &[(0.3, 2.0), (1.0, 1.0), (4.5, 0.7), (40.0, 12.0)] {
            let p = GammaParams::new(a, b).unwrap();
            for &y in &[0.01, 0.2, 1.0, 3.7, 9.0] {
                let c = p.cdf(y);
                if c <= 1e-12 || c >= 1.0 - 1e-12 {
                    continue;
                }
                let back = p.quantile(c).unwrap();
                assert!((back - y).abs() <= 1e-8 * y, "α={a} β={b} y={y} → {back}");
            }
        }
    }

    #[test]
    fn quantile_is_increasing() {
        let p = GammaParams::new(2.2, 0.9).unwrap();
        let qs: Vec<f64> = (1..100).map(|i| p.quantile(i as f64 / 100.0).unwrap()).collect();
        assert!(qs.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn samples_positive_and_mean_within_three_sigma() {
        let p = GammaParams::new(3.0, 2.0).unwrap();
        let mut rng = stream(11, &[]);
        let n = 1_000_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let x = p.sample(&mut rng);
            assert!(x > 0.0);
            sum += x;
        }
        let mean = sum / n as f64;
        let se = p.std_dev() / (n as f64).sqrt();
        assert!((mean - 1.5).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn small_shape_samples_positive() {
        let p = GammaParams::new(0.02, 50.0).unwrap();
        let mut rng = stream(3, &[]);
        assert!((0..100_000).all(|_| p.sample(&mut rng) > 0.0));
    }

    #[test]
    fn central_interval_covers_95_percent() {
        let p = GammaParams::new(2.5, 1.5).unwrap();
        let (lo, hi) = (p.quantile(0.025).unwrap(), p.quantile(0.975).unwrap());
        let mut rng = stream(5, &[]);
        let n = 100_000;
        let inside = (0..n).filter(|_| (lo..=hi).contains(&p.sample(&mut rng))).count();
        let frac = inside as f64 / n as f64;
        let sigma = (0.95 * 0.05 / n as f64).sqrt();
        assert!((frac - 0.95).abs() < 3.0 * sigma, "{frac}");
    }

    #[test]
    fn moment_fit_recovers_parameters() {
        let p = GammaParams::new(4.0, 2.0).unwrap();
        let mut rng = stream(9, &[]);
        let xs: Vec<f64> = (0..200_000).map(|_| p.sample(&mut rng)).collect();
        let fit = fit_moments(&xs).unwrap();
        assert!((fit.alpha - 4.0).abs() < 0.1);
        assert!((fit.beta - 2.0).abs() < 0.05);
    }
}
