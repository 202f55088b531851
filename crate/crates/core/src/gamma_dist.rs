//! Gamma and centered-Gamma laws.
//!
//! `Γ(r, λ)` has density `λ^r x^{r−1} e^{−λx} / Γ(r)` on `(0, ∞)`. The centered
//! law `Γ̄(ν)` is that of `Z_ν = 2X − ν` with `X ~ Γ(ν/2, 1)`; it has mean 0
//! and variance `2ν`.

use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::special::{gamma_p, ln_gamma};
use crate::stats::par_samples;
use crate::{check_finite, Error, Result};

/// Largest moment order served by [`centered_gamma_moment`].
pub const MAX_MOMENT_ORDER: u32 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaParams {
    pub r: f64,
    pub lambda: f64,
}

impl GammaParams {
    pub fn new(r: f64, lambda: f64) -> Result<Self> {
        if !(r > 0.0 && r.is_finite() && lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Domain(format!(
                "Gamma parameters need r > 0 and lambda > 0, got r = {r}, lambda = {lambda}"
            )));
        }
        Ok(Self { r, lambda })
    }

    pub fn mean(&self) -> f64 {
        self.r / self.lambda
    }

    pub fn variance(&self) -> f64 {
        self.r / (self.lambda * self.lambda)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenteredGammaParams {
    pub nu: f64,
}

impl CenteredGammaParams {
    pub fn new(nu: f64) -> Result<Self> {
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(Error::Domain(format!("nu must be positive, got {nu}")));
        }
        Ok(Self { nu })
    }

    /// The shape `ν/2` of the underlying unit-rate Gamma law.
    pub fn shape(&self) -> f64 {
        0.5 * self.nu
    }
}

pub fn gamma_pdf(x: f64, p: GammaParams) -> Result<f64> {
    check_finite(x, "x")?;
    if x <= 0.0 {
        return Ok(0.0);
    }
    let GammaParams { r, lambda } = p;
    Ok((r * lambda.ln() + (r - 1.0) * x.ln() - lambda * x - ln_gamma(r)).exp())
}

pub fn gamma_cdf(x: f64, p: GammaParams) -> Result<f64> {
    if x.is_nan() {
        return Err(Error::Domain("x must not be NaN".into()));
    }
    if x <= 0.0 {
        return Ok(0.0);
    }
    Ok(gamma_p(p.r, p.lambda * x))
}

pub fn centered_gamma_pdf(x: f64, c: CenteredGammaParams) -> Result<f64> {
    let unit = GammaParams::new(c.shape(), 1.0)?;
    Ok(0.5 * gamma_pdf(0.5 * (x + c.nu), unit)?)
}

pub fn centered_gamma_cdf(x: f64, c: CenteredGammaParams) -> Result<f64> {
    let unit = GammaParams::new(c.shape(), 1.0)?;
    gamma_cdf(0.5 * (x + c.nu), unit)
}

/// `E[X^j]` for `X ~ Γ(r, λ)`: the rising factorial `r(r+1)…(r+j−1) / λ^j`.
pub fn gamma_raw_moment(p: GammaParams, j: u32) -> f64 {
    (0..j).map(|i| (p.r + i as f64) / p.lambda).product()
}

/// `E[Z_ν^k]` by binomial expansion of `(2X − ν)^k`, `k ≤ 12`.
pub fn centered_gamma_moment(nu: f64, k: u32) -> Result<f64> {
    let c = CenteredGammaParams::new(nu)?;
    if k > MAX_MOMENT_ORDER {
        return Err(Error::Domain(format!(
            "moment order {k} exceeds the supported range 0..={MAX_MOMENT_ORDER}"
        )));
    }
    let unit = GammaParams::new(c.shape(), 1.0)?;
    let mut total = 0.0;
    let mut binom = 1.0;
    for j in 0..=k {
        total += binom * 2f64.powi(j as i32) * gamma_raw_moment(unit, j) * (-nu).powi((k - j) as i32);
        binom = binom * (k - j) as f64 / (j + 1) as f64;
    }
    Ok(total)
}

/// `E[Z⁴] − 12E[Z³] − 12ν² + 48ν`, which vanishes exactly for `Z = Z_ν`.
pub fn moment_functional(m3: f64, m4: f64, nu: f64) -> f64 {
    m4 - 12.0 * m3 - 12.0 * nu * nu + 48.0 * nu
}

/// `n` draws of `X ~ Γ(r, λ)`; draw `i` uses stream `i` of `seed`.
pub fn sample_gamma(p: GammaParams, n: usize, seed: u64) -> Result<Vec<f64>> {
    let dist = Gamma::new(p.r, 1.0 / p.lambda).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(par_samples(n, seed, |rng| dist.sample(rng)))
}

/// `n` draws of `Z_ν`.
pub fn sample_centered_gamma(nu: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
    let c = CenteredGammaParams::new(nu)?;
    if n == 0 {
        return Err(Error::Contract("sample count must be at least 1".into()));
    }
    let x = sample_gamma(GammaParams::new(c.shape(), 1.0)?, n, seed)?;
    Ok(x.into_iter().map(|v| 2.0 * v - nu).collect())
}

/// A single draw of `Z_ν` from an existing generator.
pub fn draw_centered_gamma<R: rand::Rng + ?Sized>(nu: f64, rng: &mut R) -> Result<f64> {
    let dist = Gamma::new(0.5 * nu, 1.0).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(2.0 * dist.sample(rng) - nu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::{integrate, Tolerance};
    use crate::stats::{ks_two_sample, mean, variance};
    use approx::assert_relative_eq;

    #[test]
    fn pdf_examples() {
        let p = GammaParams::new(1.0, 1.0).unwrap();
        assert_eq!(gamma_pdf(-1.0, p).unwrap(), 0.0);
        assert_relative_eq!(gamma_pdf(0.5, p).unwrap(), (-0.5f64).exp(), epsilon = 1e-15);
        assert!(gamma_pdf(f64::NAN, p).is_err());
        assert!(gamma_pdf(f64::INFINITY, p).is_err());
    }

    #[test]
    fn pdf_mean_by_quadrature() {
        let p = GammaParams::new(2.0, 3.0).unwrap();
        let m = integrate(
            |x| x * gamma_pdf(x, p).unwrap(),
            0.0,
            40.0,
            &[1.0],
            Tolerance::default(),
        )
        .unwrap()
        .value;
        assert_relative_eq!(m, 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn pdf_normalized() {
        for &r in &[0.3, 1.0, 2.0, 5.0] {
            for &lambda in &[0.5, 1.0, 3.0] {
                let p = GammaParams::new(r, lambda).unwrap();
                let upper = (r + 60.0) / lambda;
                let bp = [1e-6 / lambda, 1e-3 / lambda, 1.0 / lambda, r / lambda];
                let tol = Tolerance::new(1e-12, 1e-12);
                let total = integrate(|x| gamma_pdf(x, p).unwrap(), 0.0, upper, &bp, tol).unwrap();
                assert!(
                    (total.value - 1.0).abs() < 1e-9,
                    "r={r} lambda={lambda}: {}",
                    total.value
                );
            }
        }
    }

    #[test]
    fn cdf_examples() {
        let p = GammaParams::new(1.0, 1.0).unwrap();
        assert_eq!(gamma_cdf(0.0, p).unwrap(), 0.0);
        assert_eq!(gamma_cdf(-3.0, p).unwrap(), 0.0);
        assert_relative_eq!(gamma_cdf(1.0, p).unwrap(), 1.0 - (-1f64).exp(), epsilon = 1e-15);
        assert_eq!(gamma_cdf(f64::INFINITY, p).unwrap(), 1.0);
    }

    /// Composite Simpson rule, independent of the adaptive integrator.
    fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn cdf_matches_simpson() {
        let p = GammaParams::new(2.5, 1.0).unwrap();
        // x^{1.5} makes Simpson converge at h^{2.5} near 0; the fine mesh is
        // enough for 1e-10.
        let s = simpson(|x| gamma_pdf(x, p).unwrap(), 0.0, 2.5, 200_000);
        assert!((gamma_cdf(2.5, p).unwrap() - s).abs() < 1e-10);
    }

    #[test]
    fn cdf_monotone_on_grid() {
        for &r in &[0.3, 1.0, 4.0] {
            let p = GammaParams::new(r, 1.5).unwrap();
            let mut prev = 0.0;
            for i in 0..2000 {
                let c = gamma_cdf(i as f64 * 0.01, p).unwrap();
                assert!(c >= prev);
                prev = c;
            }
        }
    }

    #[test]
    fn centered_moments() {
        for &nu in &[0.5, 1.0, 2.0, 7.0] {
            assert_eq!(centered_gamma_moment(nu, 0).unwrap(), 1.0);
            assert!(centered_gamma_moment(nu, 1).unwrap().abs() < 1e-12 * nu);
            assert_relative_eq!(centered_gamma_moment(nu, 2).unwrap(), 2.0 * nu, max_relative = 1e-13);
            assert_relative_eq!(centered_gamma_moment(nu, 3).unwrap(), 8.0 * nu, max_relative = 1e-12);
            let m3 = centered_gamma_moment(nu, 3).unwrap();
            let m4 = centered_gamma_moment(nu, 4).unwrap();
            assert!(moment_functional(m3, m4, nu).abs() < 1e-9 * m4);
        }
        assert!(centered_gamma_moment(1.0, 13).is_err());
        assert!(centered_gamma_moment(-1.0, 2).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_centered_gamma(1.5, 1000, 42).unwrap();
        let b = sample_centered_gamma(1.5, 1000, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample_centered_gamma(1.5, 1000, 43).unwrap());
        assert!(sample_centered_gamma(1.5, 0, 1).is_err());
    }

    #[test]
    fn sample_moments() {
        let n = 1_000_000;
        let nu = 2.0;
        let z = sample_centered_gamma(nu, n, 2024).unwrap();
        assert!(mean(&z).abs() < 4.0 * (2.0 * nu / n as f64).sqrt());
        assert!((variance(&z) / 4.0 - 1.0).abs() < 0.05);
    }

    #[test]
    fn small_shape_sampling() {
        let z = sample_centered_gamma(0.3, 200_000, 5).unwrap();
        assert!(z.iter().all(|&v| v >= -0.3));
        assert!((variance(&z) / 0.6 - 1.0).abs() < 0.05);
    }

    #[test]
    fn scaling_law() {
        let n = 100_000;
        let a = 2.5;
        let x: Vec<f64> = sample_gamma(GammaParams::new(1.7, 2.0).unwrap(), n, 1)
            .unwrap()
            .into_iter()
            .map(|v| a * v)
            .collect();
        let y = sample_gamma(GammaParams::new(1.7, 2.0 / a).unwrap(), n, 2).unwrap();
        // 0.1% critical value of the two-sample statistic
        let crit = 1.95 * (2.0 / n as f64).sqrt();
        assert!(ks_two_sample(&x, &y) < crit);
    }
}
