//! Analytic score priors.
//!
//! A prior exposes its σ-smoothed log-density `ln p_σ(x)` (the density convolved
//! with N(0, σ²) per real entry, or CN(0, σ²) per complex entry), the
//! first-order score `∇ ln p_σ` and the trace of its Hessian.
//!
//! For complex entries the score is the conjugate-Wirtinger derivative
//! `∂/∂x̄ = ½(∂/∂Re + i ∂/∂Im)` and the trace is `Σ ∂²/∂x ∂x̄`, which is a quarter
//! of the real Laplacian. Under these conventions Tweedie's formula reads
//! `E[x_0 | x] = x + σ² ∇ ln p_σ(x)` and the per-entry posterior variance is
//! `σ² + σ⁴ tr(∇²)/dim` for both domains.

use std::fmt::Debug;
use std::ops::{Add, Mul, Sub};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Scalar domain of a prior: `f64` or `Complex64`.
pub trait Field:
    Copy
    + Debug
    + PartialEq
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<f64, Output = Self>
{
    /// Divisor of `‖x − m‖²/v` in the Gaussian exponent (2 real, 1 complex).
    const QUADRATIC: f64;

    fn zero() -> Self;
    fn norm_sqr(self) -> f64;
    /// `Re(conj(a) b)`.
    fn re_inner(a: Self, b: Self) -> f64;
    fn is_finite(self) -> bool;
    /// One draw from N(0, v) or CN(0, v).
    fn gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Self;
    /// `ln` of the Gaussian normaliser for one entry of variance `v`.
    fn log_normaliser(variance: f64) -> f64;
}

impl Field for f64 {
    const QUADRATIC: f64 = 2.0;

    fn zero() -> Self {
        0.0
    }

    fn norm_sqr(self) -> f64 {
        self * self
    }

    fn re_inner(a: Self, b: Self) -> f64 {
        a * b
    }

    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }

    fn gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Self {
        let z: f64 = rng.sample(StandardNormal);
        z * variance.sqrt()
    }

    fn log_normaliser(variance: f64) -> f64 {
        -0.5 * (2.0 * std::f64::consts::PI * variance).ln()
    }
}

impl Field for Complex64 {
    const QUADRATIC: f64 = 1.0;

    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }

    fn norm_sqr(self) -> f64 {
        Complex64::norm_sqr(&self)
    }

    fn re_inner(a: Self, b: Self) -> f64 {
        (a.conj() * b).re
    }

    fn is_finite(self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }

    fn gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Self {
        crate::linalg::sample_cn(rng, (variance / 2.0).sqrt())
    }

    fn log_normaliser(variance: f64) -> f64 {
        -(std::f64::consts::PI * variance).ln()
    }
}

pub trait ScorePrior<T: Field>: Send + Sync + Debug {
    /// Number of free scalar entries (complex entries count once).
    fn dim(&self) -> usize;

    /// `∇ ln p_σ(x)`.
    fn first_order(&self, x: &[T], sigma: f64) -> Vec<T>;

    /// Trace of the Hessian of `ln p_σ` at `x`.
    fn second_order_trace(&self, x: &[T], sigma: f64) -> f64;

    fn smoothed_log_density(&self, x: &[T], sigma: f64) -> f64;

    /// Pulls a conjugate cotangent `g = ∂L/∂conj(x̂)` back through the Tweedie
    /// denoiser `x ↦ x + σ² ∇ ln p_σ(x)`, returning `∂L/∂conj(x)`.
    fn tweedie_vjp(&self, x: &[T], sigma: f64, g: &[T]) -> Vec<T>;

    /// Mean of the unsmoothed prior.
    fn mean(&self) -> Vec<T>;
}

/// Tweedie posterior mean `x + σ² ∇ ln p_σ(x)`.
pub fn tweedie_mean<T: Field>(prior: &dyn ScorePrior<T>, x: &[T], sigma: f64) -> Vec<T> {
    let s2 = sigma * sigma;
    x.iter()
        .zip(prior.first_order(x, sigma))
        .map(|(&xi, si)| xi + si * s2)
        .collect()
}

/// Per-entry Tweedie error variance `σ² + σ⁴ tr/dim`, clamped to `[0, σ²]`.
pub fn tweedie_error_variance<T: Field>(prior: &dyn ScorePrior<T>, x: &[T], sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    if s2 == 0.0 {
        return 0.0;
    }
    let v = s2 + s2 * s2 * prior.second_order_trace(x, sigma) / prior.dim() as f64;
    v.clamp(0.0, s2)
}

fn check_variance(variance: f64) -> Result<()> {
    if !(variance > 0.0 && variance.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "prior variance must be positive, got {variance}"
        )));
    }
    Ok(())
}

/// Independent Gaussian entries with mean `M` and variance `σ₀²`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior<T> {
    mean: Vec<T>,
    variance: f64,
}

impl<T: Field> GaussianPrior<T> {
    pub fn new(mean: Vec<T>, variance: f64) -> Result<Self> {
        check_variance(variance)?;
        if mean.is_empty() {
            return Err(Error::InvalidArgument(
                "prior dimension must be positive".into(),
            ));
        }
        Ok(Self { mean, variance })
    }

    pub fn isotropic(dim: usize, mean: T, variance: f64) -> Result<Self> {
        Self::new(vec![mean; dim], variance)
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }
}

impl<T: Field> ScorePrior<T> for GaussianPrior<T> {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn first_order(&self, x: &[T], sigma: f64) -> Vec<T> {
        let inv = 1.0 / (self.variance + sigma * sigma);
        x.iter()
            .zip(&self.mean)
            .map(|(&xi, &m)| (m - xi) * inv)
            .collect()
    }

    fn second_order_trace(&self, _x: &[T], sigma: f64) -> f64 {
        -(self.dim() as f64) / (self.variance + sigma * sigma)
    }

    fn smoothed_log_density(&self, x: &[T], sigma: f64) -> f64 {
        let v = self.variance + sigma * sigma;
        let q: f64 = x
            .iter()
            .zip(&self.mean)
            .map(|(&xi, &m)| (xi - m).norm_sqr())
            .sum();
        -q / (T::QUADRATIC * v) + self.dim() as f64 * T::log_normaliser(v)
    }

    fn tweedie_vjp(&self, _x: &[T], sigma: f64, g: &[T]) -> Vec<T> {
        let shrink = self.variance / (self.variance + sigma * sigma);
        g.iter().map(|&gi| gi * shrink).collect()
    }

    fn mean(&self) -> Vec<T> {
        self.mean.clone()
    }
}

/// Mixture of Gaussians sharing one per-entry variance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixturePrior<T> {
    means: Vec<Vec<T>>,
    log_weights: Vec<f64>,
    variance: f64,
}

/// Per-component quantities at one evaluation point.
struct Responsibilities<T> {
    /// Normalised posterior component weights.
    r: Vec<f64>,
    /// `ln Σ_c w_c exp(ℓ_c)` without the Gaussian normaliser.
    log_sum: f64,
    /// `(M_c − x)/v` per component.
    scores: Vec<Vec<T>>,
}

impl<T: Field> GaussianMixturePrior<T> {
    pub fn new(means: Vec<Vec<T>>, weights: Vec<f64>, variance: f64) -> Result<Self> {
        check_variance(variance)?;
        if means.is_empty() || means.len() != weights.len() {
            return Err(Error::InvalidArgument(format!(
                "{} component means for {} weights",
                means.len(),
                weights.len()
            )));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::InvalidArgument(
                "component means must share a positive dimension".into(),
            ));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::InvalidArgument(
                "mixture weights must be positive".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        Ok(Self {
            means,
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            variance,
        })
    }

    pub fn components(&self) -> usize {
        self.means.len()
    }

    fn responsibilities(&self, x: &[T], sigma: f64) -> Responsibilities<T> {
        let v = self.variance + sigma * sigma;
        let logits: Vec<f64> = self
            .means
            .iter()
            .zip(&self.log_weights)
            .map(|(m, lw)| {
                let q: f64 = x.iter().zip(m).map(|(&xi, &mi)| (xi - mi).norm_sqr()).sum();
                lw - q / (T::QUADRATIC * v)
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = unnorm.iter().sum();
        let scores = self
            .means
            .iter()
            .map(|m| {
                x.iter()
                    .zip(m)
                    .map(|(&xi, &mi)| (mi - xi) * (1.0 / v))
                    .collect()
            })
            .collect();
        Responsibilities {
            r: unnorm.iter().map(|u| u / z).collect(),
            log_sum: max + z.ln(),
            scores,
        }
    }

    fn weighted_score(resp: &Responsibilities<T>, dim: usize) -> Vec<T> {
        let mut out = vec![T::zero(); dim];
        for (rc, sc) in resp.r.iter().zip(&resp.scores) {
            for (o, &s) in out.iter_mut().zip(sc) {
                *o = *o + s * *rc;
            }
        }
        out
    }
}

impl<T: Field> ScorePrior<T> for GaussianMixturePrior<T> {
    fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn first_order(&self, x: &[T], sigma: f64) -> Vec<T> {
        let resp = self.responsibilities(x, sigma);
        Self::weighted_score(&resp, self.dim())
    }

    fn second_order_trace(&self, x: &[T], sigma: f64) -> f64 {
        // tr ∇² ln p = −dim/v + Σ_c r_c ‖g_c‖² − ‖Σ_c r_c g_c‖²
        let v = self.variance + sigma * sigma;
        let resp = self.responsibilities(x, sigma);
        let mean_score = Self::weighted_score(&resp, self.dim());
        let spread: f64 = resp
            .r
            .iter()
            .zip(&resp.scores)
            .map(|(rc, sc)| rc * sc.iter().map(|s| s.norm_sqr()).sum::<f64>())
            .sum();
        let centre: f64 = mean_score.iter().map(|s| s.norm_sqr()).sum();
        -(self.dim() as f64) / v + spread - centre
    }

    fn smoothed_log_density(&self, x: &[T], sigma: f64) -> f64 {
        let v = self.variance + sigma * sigma;
        let resp = self.responsibilities(x, sigma);
        resp.log_sum + self.dim() as f64 * T::log_normaliser(v)
    }

    fn tweedie_vjp(&self, x: &[T], sigma: f64, g: &[T]) -> Vec<T> {
        // x̂ = x σ₀²/v + (σ²/v) Σ r_c M_c; the responsibilities contribute
        // (σ²/v²) Σ_c r_c ⟨δM_c, g⟩ δM_c with δM_c = M_c − Σ r M, where the real
        // pairing ⟨·,·⟩ carries a factor 2 in the complex case.
        let s2 = sigma * sigma;
        let v = self.variance + s2;
        let shrink = self.variance / v;
        let mut out: Vec<T> = g.iter().map(|&gi| gi * shrink).collect();
        if s2 == 0.0 {
            return out;
        }
        let resp = self.responsibilities(x, sigma);
        let dim = self.dim();
        let mut centre = vec![T::zero(); dim];
        for (rc, m) in resp.r.iter().zip(&self.means) {
            for (c, &mi) in centre.iter_mut().zip(m) {
                *c = *c + mi * *rc;
            }
        }
        let pairing = 2.0 / T::QUADRATIC;
        for (rc, m) in resp.r.iter().zip(&self.means) {
            let delta: Vec<T> = m.iter().zip(&centre).map(|(&mi, &c)| mi - c).collect();
            let proj: f64 = delta.iter().zip(g).map(|(&a, &b)| T::re_inner(a, b)).sum();
            let coeff = rc * pairing * proj * s2 / (v * v);
            for (o, &dl) in out.iter_mut().zip(&delta) {
                *o = *o + dl * coeff;
            }
        }
        out
    }

    fn mean(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim()];
        for (lw, m) in self.log_weights.iter().zip(&self.means) {
            let w = lw.exp();
            for (o, &mi) in out.iter_mut().zip(m) {
                *o = *o + mi * w;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn gaussian_first_order_examples() {
        let p = GaussianPrior::isotropic(1, 0.0, 1.0).unwrap();
        assert_eq!(p.first_order(&[2.0], 0.0), vec![-2.0]);
        let pc = GaussianPrior::isotropic(1, c(0., 0.), 1.0).unwrap();
        assert_eq!(pc.first_order(&[c(1., 1.)], 1.0), vec![c(-0.5, -0.5)]);
    }

    #[test]
    fn symmetric_mixture_has_zero_score_at_origin() {
        let p =
            GaussianMixturePrior::new(vec![vec![-1.5], vec![1.5]], vec![0.5, 0.5], 0.3).unwrap();
        assert_eq!(p.first_order(&[0.0], 0.7), vec![0.0]);
        assert_eq!(p.mean(), vec![0.0]);
    }

    #[test]
    fn gaussian_trace_examples() {
        let p = GaussianPrior::isotropic(4, 0.0, 1.0).unwrap();
        assert_eq!(p.second_order_trace(&[0.0; 4], 1.0), -2.0);
        assert!(p.second_order_trace(&[0.0; 4], 1e8).abs() < 1e-15);
    }

    #[test]
    fn gaussian_mode_at_mean() {
        let p = GaussianPrior::isotropic(2, 0.0, 1.0).unwrap();
        let at_mean = p.smoothed_log_density(&[0.0, 0.0], 0.0);
        for x in [[0.1, 0.0], [-0.3, 0.2], [1.0, 1.0]] {
            assert!(p.smoothed_log_density(&x, 0.0) < at_mean);
        }
    }

    #[test]
    fn degenerate_mixture_matches_gaussian() {
        let g = GaussianPrior::new(vec![c(0.5, -1.0), c(2.0, 0.0)], 0.4).unwrap();
        let m = GaussianMixturePrior::new(vec![vec![c(0.5, -1.0), c(2.0, 0.0)]], vec![1.0], 0.4)
            .unwrap();
        let x = [c(0.1, 0.2), c(-0.3, 1.0)];
        for sigma in [0.0, 0.5, 3.0] {
            assert!(
                (g.smoothed_log_density(&x, sigma) - m.smoothed_log_density(&x, sigma)).abs()
                    < 1e-12
            );
            assert!(
                (g.second_order_trace(&x, sigma) - m.second_order_trace(&x, sigma)).abs() < 1e-12
            );
        }
    }

    #[test]
    fn mixture_is_stable_far_from_components() {
        let p =
            GaussianMixturePrior::new(vec![vec![-1.0], vec![1.0]], vec![0.3, 0.7], 0.01).unwrap();
        let s = p.first_order(&[1e4], 0.0);
        assert!(s[0].is_finite());
        assert!((s[0] - (1.0 - 1e4) / 0.01).abs() < 1e-6 * s[0].abs());
        assert!(p.smoothed_log_density(&[1e4], 0.0).is_finite());
    }

    #[test]
    fn invalid_mixtures_rejected() {
        assert!(GaussianMixturePrior::<f64>::new(vec![vec![0.0]], vec![0.5], 1.0).is_err());
        assert!(
            GaussianMixturePrior::<f64>::new(vec![vec![0.0], vec![1.0]], vec![1.5, -0.5], 1.0)
                .is_err()
        );
        assert!(GaussianMixturePrior::<f64>::new(
            vec![vec![0.0], vec![1.0, 2.0]],
            vec![0.5, 0.5],
            1.0
        )
        .is_err());
        assert!(GaussianPrior::<f64>::isotropic(2, 0.0, 0.0).is_err());
    }

    #[test]
    fn gaussian_smoothing_composes() {
        let base = GaussianPrior::isotropic(3, 0.5, 0.8).unwrap();
        let x = [0.1, -2.0, 3.0];
        for sigma in [0.0f64, 0.1, 1.0, 10.0] {
            let merged = GaussianPrior::isotropic(3, 0.5, 0.8 + sigma * sigma).unwrap();
            assert_eq!(base.first_order(&x, sigma), merged.first_order(&x, 0.0));
            assert_eq!(
                base.second_order_trace(&x, sigma),
                merged.second_order_trace(&x, 0.0)
            );
        }
    }

    #[test]
    fn error_variance_clamped() {
        let p = GaussianPrior::isotropic(2, 0.0, 1.0).unwrap();
        assert_eq!(tweedie_error_variance(&p, &[3.0, 1.0], 0.0), 0.0);
        assert!((tweedie_error_variance(&p, &[3.0, 1.0], 1.0) - 0.5).abs() < 1e-15);
        // A mixture can report positive curvature between modes; the result stays within [0, σ²].
        let m =
            GaussianMixturePrior::new(vec![vec![-5.0], vec![5.0]], vec![0.5, 0.5], 0.01).unwrap();
        let v = tweedie_error_variance(&m, &[0.0], 0.5);
        assert!((0.0..=0.25).contains(&v));
    }
}
