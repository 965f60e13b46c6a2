//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates the forward function, so it stays
//! independent of the reverse sweep it validates.

use super::tensor::Tensor;
use crate::error::Result;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: Vec<GradMismatch>,
    /// Coordinates where the one-sided slopes disagree, i.e. the function is
    /// not differentiable within `h` (a ReLU kink was crossed).
    pub kinks: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.kinks += other.kinks;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.failures.extend(other.failures);
    }
}

/// Tolerances for [`check_gradients`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
    pub rtol: f64,
    /// Absolute floor below which differences are treated as noise.
    pub atol: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rtol: 1e-4,
            atol: 1e-8,
        }
    }
}

impl GradCheck {
    pub fn with_rtol(rtol: f64) -> Self {
        Self {
            rtol,
            ..Self::default()
        }
    }

    /// Compares `analytic[i]` with central differences of `f` with respect
    /// to every coordinate of every `inputs[i]`.
    pub fn check<F>(&self, inputs: &[Tensor], analytic: &[Tensor], mut f: F) -> Result<GradCheckReport>
    where
        F: FnMut(&[Tensor]) -> Result<f64>,
    {
        let mut report = GradCheckReport::default();
        let mut work: Vec<Tensor> = inputs.to_vec();
        let f0 = f(&work)?;
        for (i, grad) in analytic.iter().enumerate() {
            for j in 0..work[i].numel() {
                let orig = work[i].data()[j];
                work[i].data_mut()[j] = orig + self.step;
                let fp = f(&work)?;
                work[i].data_mut()[j] = orig - self.step;
                let fm = f(&work)?;
                work[i].data_mut()[j] = orig;

                let numeric = (fp - fm) / (2.0 * self.step);
                let a = grad.data()[j];
                report.checked += 1;
                let diff = (a - numeric).abs();
                let scale = a.abs().max(numeric.abs());
                if diff <= self.atol + self.rtol * scale {
                    // Coordinates dominated by the absolute floor say nothing
                    // about relative accuracy.
                    if scale > self.atol / self.rtol {
                        report.max_rel_err = report.max_rel_err.max(diff / scale);
                    }
                    continue;
                }
                // At a crossed kink the analytic value sits on one of the
                // one-sided slopes while the central difference averages them.
                let right = (fp - f0) / self.step;
                let left = (f0 - fm) / self.step;
                let jump = (right - left).abs();
                let nearest = (a - right).abs().min((a - left).abs());
                if jump > self.atol + self.rtol * scale && nearest < 0.25 * jump {
                    report.kinks += 1;
                    continue;
                }
                report.failures.push(GradMismatch {
                    input: i,
                    index: j,
                    analytic: a,
                    numeric,
                });
            }
        }
        Ok(report)
    }
}
