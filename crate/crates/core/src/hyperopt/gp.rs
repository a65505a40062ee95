//! Gaussian-process regression on the unit cube.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Added to the kernel diagonal on top of the fitted noise.
pub const JITTER: f64 = 1e-6;

const RESTARTS: usize = 5;
const ASCENT_ITERS: usize = 120;
// Bounds on the log hyperparameters: length-scale, signal variance, noise
// variance. Targets are standardised, so unit signal variance is typical.
const LOG_BOUNDS: [(f64, f64); 3] = [(-4.6, 2.3), (-4.6, 4.6), (-16.0, 0.0)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub length_scale: f64,
    pub signal_var: f64,
    pub noise_var: f64,
}

impl Kernel {
    /// Matérn-5/2 covariance at distance `r`.
    pub fn cov(&self, r: f64) -> f64 {
        let a = 5f64.sqrt() * r / self.length_scale;
        self.signal_var * (1.0 + a + a * a / 3.0) * (-a).exp()
    }

    fn from_log(t: &[f64; 3]) -> Kernel {
        Kernel { length_scale: t[0].exp(), signal_var: t[1].exp(), noise_var: t[2].exp() }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone)]
pub struct GpSurrogate {
    points: Vec<Vec<f64>>,
    y_mean: f64,
    y_scale: f64,
    kernel: Kernel,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

/// Log marginal likelihood of standardised `y` and its gradient with
/// respect to the log hyperparameters.
fn lml_and_grad(points: &[Vec<f64>], y: &DVector<f64>, t: &[f64; 3]) -> Option<(f64, [f64; 3])> {
    let k = Kernel::from_log(t);
    let n = points.len();
    let mut km = DMatrix::zeros(n, n);
    let mut dl = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let r = dist(&points[i], &points[j]);
            km[(i, j)] = k.cov(r);
            let a = 5f64.sqrt() * r / k.length_scale;
            dl[(i, j)] = k.signal_var * a * a * (1.0 + a) / 3.0 * (-a).exp();
        }
        km[(i, i)] += k.noise_var + JITTER;
    }
    let chol = Cholesky::new(km.clone())?;
    let alpha = chol.solve(y);
    let logdet: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    let lml = -0.5 * y.dot(&alpha) - 0.5 * logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    let inv = chol.inverse();
    let w = &alpha * alpha.transpose() - inv;
    let mut dsig = km;
    for i in 0..n {
        dsig[(i, i)] -= k.noise_var + JITTER;
    }
    let half_trace = |d: &DMatrix<f64>| 0.5 * w.component_mul(d).sum();
    let dnoise = DMatrix::from_diagonal_element(n, n, k.noise_var);
    Some((lml, [half_trace(&dl), half_trace(&dsig), half_trace(&dnoise)]))
}

fn clamp(t: &mut [f64; 3]) {
    for (v, (lo, hi)) in t.iter_mut().zip(LOG_BOUNDS) {
        *v = v.clamp(lo, hi);
    }
}

/// Gradient ascent with a step that grows on success and halves on failure.
fn ascend(points: &[Vec<f64>], y: &DVector<f64>, start: [f64; 3]) -> Option<([f64; 3], f64)> {
    let mut t = start;
    clamp(&mut t);
    let (mut f, mut g) = lml_and_grad(points, y, &t)?;
    let mut step = 0.1;
    for _ in 0..ASCENT_ITERS {
        let gn = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if gn < 1e-8 || step < 1e-10 {
            break;
        }
        let mut cand = t;
        for i in 0..3 {
            cand[i] += step * g[i] / gn.max(1.0);
        }
        clamp(&mut cand);
        match lml_and_grad(points, y, &cand) {
            Some((fc, gc)) if fc > f => {
                t = cand;
                f = fc;
                g = gc;
                step *= 1.5;
            }
            _ => step *= 0.5,
        }
    }
    Some((t, f))
}

fn standardise(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    (mean, if sd > 1e-12 { sd } else { 1.0 })
}

fn check_inputs(points: &[Vec<f64>], values: &[f64]) -> Result<()> {
    if points.len() < 2 || points.len() != values.len() {
        return Err(Error::config(format!(
            "a GP needs at least 2 points with one value each, got {} points and {} values",
            points.len(),
            values.len()
        )));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("GP inputs must share a dimension and have finite values".into()));
    }
    Ok(())
}

impl GpSurrogate {
    /// Fits kernel hyperparameters by maximising the log marginal
    /// likelihood from several starts (one fixed, the rest random).
    pub fn fit(points: &[Vec<f64>], values: &[f64], rng: &mut RngStream) -> Result<GpSurrogate> {
        check_inputs(points, values)?;
        let (m, s) = standardise(values);
        let y = DVector::from_iterator(values.len(), values.iter().map(|v| (v - m) / s));
        let mut best: Option<([f64; 3], f64)> = None;
        for r in 0..RESTARTS {
            let start = if r == 0 {
                [(0.3f64).ln(), 0.0, (1e-3f64).ln()]
            } else {
                let mut t = [0.0; 3];
                for (v, (lo, hi)) in t.iter_mut().zip(LOG_BOUNDS) {
                    *v = rng.uniform_range(lo, hi);
                }
                t
            };
            if let Some((t, f)) = ascend(points, &y, start) {
                if best.is_none_or(|(_, bf)| f > bf) {
                    best = Some((t, f));
                }
            }
        }
        let (t, _) = best.ok_or_else(|| Error::Numeric("GP kernel matrix is not positive definite".into()))?;
        Self::with_kernel(points, values, Kernel::from_log(&t))
    }

    /// Conditions on the data with a fixed kernel. The kernel applies to
    /// standardised targets.
    pub fn with_kernel(points: &[Vec<f64>], values: &[f64], kernel: Kernel) -> Result<GpSurrogate> {
        check_inputs(points, values)?;
        let (y_mean, y_scale) = standardise(values);
        let n = points.len();
        let km = DMatrix::from_fn(n, n, |i, j| {
            kernel.cov(dist(&points[i], &points[j])) + if i == j { kernel.noise_var + JITTER } else { 0.0 }
        });
        let chol =
            Cholesky::new(km).ok_or_else(|| Error::Numeric("GP kernel matrix is not positive definite".into()))?;
        let y = DVector::from_iterator(n, values.iter().map(|v| (v - y_mean) / y_scale));
        let alpha = chol.solve(&y);
        Ok(GpSurrogate { points: points.to_vec(), y_mean, y_scale, kernel, chol, alpha })
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    /// Posterior mean and variance of the latent function at `x`, in the
    /// units of the observed values.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let ks = DVector::from_iterator(self.points.len(), self.points.iter().map(|p| self.kernel.cov(dist(p, x))));
        let mean = ks.dot(&self.alpha);
        let v = self.chol.l_dirty().solve_lower_triangular(&ks).expect("cholesky factor has a positive diagonal");
        let var = (self.kernel.signal_var - v.dot(&v)).max(0.0);
        (self.y_mean + self.y_scale * mean, var * self.y_scale * self.y_scale)
    }
}

/// Expected improvement below `best` for a Gaussian with mean `mu` and
/// standard deviation `sigma`.
pub fn expected_improvement(mu: f64, sigma: f64, best: f64) -> f64 {
    if !(sigma > 0.0) {
        return (best - mu).max(0.0);
    }
    let z = (best - mu) / sigma;
    let n = Normal::standard();
    ((best - mu) * n.cdf(z) + sigma * n.pdf(z)).max(0.0)
}
