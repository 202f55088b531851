//! Chaos functionals of a standard Gaussian vector in `ℝᵏ`.
//!
//! With `𝓗 = ℝᵏ` and `X ~ N(0, I_k)`, the first two Wiener chaoses are
//!
//! ```text
//! I₁(f) = Σ fᵢXᵢ,         I₂(f) = Σ_{i,j} f_ij (XᵢXⱼ − δ_ij)
//! ```
//!
//! for vectors `f` and symmetric matrices `f`. Then `DᵢI₁(f) = fᵢ`,
//! `DᵢI₂(f) = 2Σⱼ f_ij Xⱼ`, and `L⁻¹` divides the order-`q` part by `−q`.
//! Higher orders are not represented. A pure-chaos sequence can only have a
//! Gamma limit in even order, so of the two orders only `I₂` can approach `Z_ν`.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::stats::{batch_means, sample_rng, Estimate};
use crate::testfn::TestFunction;
use crate::{centered_coefficient, CenteredGammaParams, Error, Result};

/// Smallest sample accepted by [`gauss_gamma_bound`].
pub const MIN_SAMPLES: usize = 10_000;
/// Bins of the conditional diagnostic.
pub const DIAGNOSTIC_BINS: usize = 64;
/// Symmetry tolerance for second-order kernels.
pub const SYMMETRY_TOL: f64 = 1e-14;

/// One chaos component: a vector (`order = 1`) or a row-major symmetric
/// `k × k` matrix (`order = 2`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChaosTerm {
    pub order: usize,
    pub kernel: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussChaosFunctional {
    pub dim: usize,
    pub terms: Vec<ChaosTerm>,
}

impl GaussChaosFunctional {
    pub fn new(dim: usize, terms: Vec<ChaosTerm>) -> Result<Self> {
        let f = Self { dim, terms };
        f.validate()?;
        Ok(f)
    }

    pub fn first_order(f: Vec<f64>) -> Result<Self> {
        Self::new(f.len(), vec![ChaosTerm { order: 1, kernel: f }])
    }

    pub fn second_order(dim: usize, f: Vec<f64>) -> Result<Self> {
        Self::new(dim, vec![ChaosTerm { order: 2, kernel: f }])
    }

    /// `Σ_{i<ν} (Xᵢ² − 1)` in dimension `dim ≥ ν`: exactly `Z_ν` in law.
    pub fn identity_nu(nu: usize, dim: usize) -> Result<Self> {
        if nu == 0 || dim < nu {
            return Err(Error::Config(format!(
                "identity_nu needs 1 <= nu <= dim, got nu = {nu}, dim = {dim}"
            )));
        }
        let mut f = vec![0.0; dim * dim];
        for i in 0..nu {
            f[i * dim + i] = 1.0;
        }
        Self::second_order(dim, f)
    }

    /// `diag(1, …, 1) + ε·(off-diagonal ones)` on `ν` coordinates, rescaled
    /// so that `E[F²] = 2ν`.
    pub fn perturbed(nu: usize, eps: f64) -> Result<Self> {
        if nu == 0 || !eps.is_finite() {
            return Err(Error::Config(format!(
                "perturbed needs nu >= 1 and finite eps, got {nu}, {eps}"
            )));
        }
        let k = nu;
        let mut f = vec![eps; k * k];
        for i in 0..k {
            f[i * k + i] = 1.0;
        }
        let norm2: f64 = f.iter().map(|v| v * v).sum();
        let scale = (nu as f64 / norm2).sqrt();
        f.iter_mut().for_each(|v| *v *= scale);
        Self::second_order(k, f)
    }

    /// `Σ λᵢ (Xᵢ² − 1)`.
    pub fn eigenvalues(lambdas: &[f64]) -> Result<Self> {
        let k = lambdas.len();
        let mut f = vec![0.0; k * k];
        for (i, &l) in lambdas.iter().enumerate() {
            f[i * k + i] = l;
        }
        Self::second_order(k, f)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.dim;
        if k == 0 {
            return Err(Error::Config("dimension must be at least 1".into()));
        }
        if self.terms.is_empty() {
            return Err(Error::Config("a chaos functional needs at least one term".into()));
        }
        for t in &self.terms {
            let expected = match t.order {
                1 => k,
                2 => k * k,
                p => {
                    return Err(Error::Config(format!(
                        "chaos order {p} is not supported (only 1 and 2)"
                    )))
                }
            };
            if t.kernel.len() != expected {
                return Err(Error::Config(format!(
                    "order-{} kernel has {} entries, expected {expected}",
                    t.order,
                    t.kernel.len()
                )));
            }
            if t.kernel.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("kernel entries must be finite".into()));
            }
            if t.order == 2 {
                for i in 0..k {
                    for j in 0..i {
                        let (a, b) = (t.kernel[i * k + j], t.kernel[j * k + i]);
                        if (a - b).abs() > SYMMETRY_TOL * a.abs().max(b.abs()).max(1.0) {
                            return Err(Error::Config(format!(
                                "second-order kernel is not symmetric at ({i}, {j})"
                            )));
                        }
                    }
                }
            }
        }
        if self.terms.iter().all(|t| t.kernel.iter().all(|&v| v == 0.0)) {
            return Err(Error::Config("every kernel is zero".into()));
        }
        Ok(())
    }

    /// `E[F²] = Σ_p p!·‖f_p‖²` (chaoses of different order are orthogonal).
    pub fn variance(&self) -> f64 {
        let mut by_order = [vec![0.0; self.dim], vec![0.0; self.dim * self.dim]];
        for t in &self.terms {
            for (acc, v) in by_order[t.order - 1].iter_mut().zip(&t.kernel) {
                *acc += v;
            }
        }
        by_order[0].iter().map(|v| v * v).sum::<f64>() + 2.0 * by_order[1].iter().map(|v| v * v).sum::<f64>()
    }

    /// Single chaos order, when the functional has one.
    pub fn pure_order(&self) -> Option<usize> {
        let p = self.terms[0].order;
        self.terms.iter().all(|t| t.order == p).then_some(p)
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Contract(format!(
                "point has dimension {}, the functional has {}",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }

    fn eval_unchecked(&self, x: &[f64]) -> f64 {
        let k = self.dim;
        self.terms
            .iter()
            .map(|t| match t.order {
                1 => t.kernel.iter().zip(x).map(|(f, v)| f * v).sum::<f64>(),
                _ => {
                    let mut s = 0.0;
                    for i in 0..k {
                        let row = &t.kernel[i * k..(i + 1) * k];
                        s += x[i] * row.iter().zip(x).map(|(f, v)| f * v).sum::<f64>() - row[i];
                    }
                    s
                }
            })
            .sum()
    }

    /// `(DF, −DL⁻¹F)` at `x`.
    fn derivatives(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let k = self.dim;
        let mut df = vec![0.0; k];
        let mut dl = vec![0.0; k];
        for t in &self.terms {
            for i in 0..k {
                let d = match t.order {
                    1 => t.kernel[i],
                    _ => {
                        2.0 * t.kernel[i * k..(i + 1) * k]
                            .iter()
                            .zip(x)
                            .map(|(f, v)| f * v)
                            .sum::<f64>()
                    }
                };
                df[i] += d;
                dl[i] += d / t.order as f64;
            }
        }
        (df, dl)
    }

    fn inner_unchecked(&self, x: &[f64]) -> f64 {
        let (df, dl) = self.derivatives(x);
        df.iter().zip(&dl).map(|(a, b)| a * b).sum()
    }
}

pub fn eval_chaos(f: &GaussChaosFunctional, x: &[f64]) -> Result<f64> {
    f.check_dim(x)?;
    Ok(f.eval_unchecked(x))
}

/// `DF` at `x`.
pub fn malliavin_derivative(f: &GaussChaosFunctional, x: &[f64]) -> Result<Vec<f64>> {
    f.check_dim(x)?;
    Ok(f.derivatives(x).0)
}

/// `⟨DF, −DL⁻¹F⟩_𝓗` at `x`.
pub fn malliavin_inner(f: &GaussChaosFunctional, x: &[f64]) -> Result<f64> {
    f.check_dim(x)?;
    Ok(f.inner_unchecked(x))
}

/// `2(F + ν) − ⟨DF, −DL⁻¹F⟩` at `x`.
pub fn gamma_discrepancy(f: &GaussChaosFunctional, nu: f64, x: &[f64]) -> Result<f64> {
    f.check_dim(x)?;
    Ok(2.0 * (f.eval_unchecked(x) + nu) - f.inner_unchecked(x))
}

fn draw(dim: usize, seed: u64, i: usize) -> Vec<f64> {
    let mut rng = sample_rng(seed, i as u64);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// `(F, ⟨DF,−DL⁻¹F⟩)` on samples `0..n`.
fn sample_pairs(f: &GaussChaosFunctional, n: usize, seed: u64) -> Vec<(f64, f64)> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let x = draw(f.dim, seed, i);
            (f.eval_unchecked(&x), f.inner_unchecked(&x))
        })
        .collect()
}

/// `n` samples of `F`; sample `i` uses the same stream as in
/// [`gauss_gamma_bound`].
pub fn sample_functional(f: &GaussChaosFunctional, n: usize, seed: u64) -> Vec<f64> {
    (0..n)
        .into_par_iter()
        .map(|i| f.eval_unchecked(&draw(f.dim, seed, i)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussBoundResult {
    pub nu: f64,
    pub samples: usize,
    pub seed: u64,
    /// `max(1, 2/ν)·E|2(F+ν) − ⟨DF,−DL⁻¹F⟩|`
    pub l1_term: f64,
    /// `max(1, 2/ν)·E[(2(F+ν) − ⟨DF,−DL⁻¹F⟩)²]^{1/2}`
    pub l2_term: f64,
    /// The smaller of the two majorants.
    pub bound: f64,
    /// Standard error of `l1_term`.
    pub stderr: f64,
    pub l2_stderr: f64,
    /// `max(1, 2/ν)·E|E[· | F]|` from 64 equal-count bins of `F`. Biased;
    /// diagnostic only.
    pub conditional_diagnostic: f64,
    pub mean_f: Estimate,
    pub second_moment_f: Estimate,
}

/// Monte Carlo majorants of the Gaussian Gamma bound on `d₁(F, Z_ν)`.
pub fn gauss_gamma_bound(f: &GaussChaosFunctional, nu: f64, n_samples: usize, seed: u64) -> Result<GaussBoundResult> {
    CenteredGammaParams::new(nu)?;
    f.validate()?;
    if n_samples < MIN_SAMPLES {
        return Err(Error::Contract(format!(
            "gauss_gamma_bound needs at least {MIN_SAMPLES} samples, got {n_samples}"
        )));
    }
    let m = centered_coefficient(nu);
    let pairs = sample_pairs(f, n_samples, seed);
    let g: Vec<f64> = pairs.iter().map(|(fv, inner)| 2.0 * (fv + nu) - inner).collect();
    let abs = batch_means(&g.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let sq = batch_means(&g.iter().map(|v| v * v).collect::<Vec<_>>());
    let l2 = sq.mean.sqrt();
    let l2_stderr = if l2 > 0.0 { sq.stderr / (2.0 * l2) } else { 0.0 };
    let fs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    Ok(GaussBoundResult {
        nu,
        samples: n_samples,
        seed,
        l1_term: m * abs.mean,
        l2_term: m * l2,
        bound: m * abs.mean.min(l2),
        stderr: m * abs.stderr,
        l2_stderr: m * l2_stderr,
        conditional_diagnostic: m * binned_conditional(&fs, &g, DIAGNOSTIC_BINS),
        mean_f: batch_means(&fs),
        second_moment_f: batch_means(&fs.iter().map(|v| v * v).collect::<Vec<_>>()),
    })
}

/// `E|E[g | F]|` estimated by averaging `g` within equal-count bins of `F`.
fn binned_conditional(f: &[f64], g: &[f64], bins: usize) -> f64 {
    let mut idx: Vec<usize> = (0..f.len()).collect();
    idx.sort_by(|&a, &b| f[a].total_cmp(&f[b]).then(a.cmp(&b)));
    let n = f.len();
    let mut total = 0.0;
    for b in 0..bins {
        let (lo, hi) = (b * n / bins, (b + 1) * n / bins);
        if hi == lo {
            continue;
        }
        let s: f64 = crate::stats::sum(idx[lo..hi].iter().map(|&i| g[i]));
        total += s.abs() / n as f64;
    }
    total
}

/// `E|2(Fₙ+ν) − ⟨DFₙ,−DL⁻¹Fₙ⟩|` for each member of a sequence (no
/// `max(1, 2/ν)` factor).
pub fn sar_condition_trend(seq: &[GaussChaosFunctional], nu: f64, n_samples: usize, seed: u64) -> Result<Vec<f64>> {
    let m = centered_coefficient(nu);
    seq.iter()
        .map(|f| gauss_gamma_bound(f, nu, n_samples, seed).map(|r| r.l1_term / m))
        .collect()
}

/// Both sides of `E[F·g(F)] = E[g′(F)·⟨DF,−DL⁻¹F⟩]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IbpReport {
    pub lhs: f64,
    pub rhs: f64,
    pub difference: f64,
    /// Batch-means standard error of the per-sample difference.
    pub stderr: f64,
    pub samples: usize,
}

pub fn gauss_ibp_check(f: &GaussChaosFunctional, g: &TestFunction, n_samples: usize, seed: u64) -> Result<IbpReport> {
    if g.lip1.is_none() {
        return Err(Error::Contract(format!(
            "'{}' has no declared Lipschitz constant",
            g.name
        )));
    }
    let pairs = sample_pairs(f, n_samples, seed);
    let lhs: Vec<f64> = pairs.iter().map(|&(fv, _)| fv * g.eval(fv)).collect();
    let rhs: Vec<f64> = pairs.iter().map(|&(fv, inner)| g.derivative(fv, 1.0) * inner).collect();
    let diff: Vec<f64> = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
    let d = batch_means(&diff);
    Ok(IbpReport {
        lhs: crate::stats::mean(&lhs),
        rhs: crate::stats::mean(&rhs),
        difference: d.mean,
        stderr: d.stderr,
        samples: n_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testfn::{identity, tanh};

    fn random_point(k: usize, seed: u64) -> Vec<f64> {
        draw(k, seed, 0)
    }

    #[test]
    fn eval_examples() {
        let f = GaussChaosFunctional::first_order(vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(eval_chaos(&f, &[0.7, 2.0, -1.0]).unwrap(), 0.7);
        assert_eq!(malliavin_inner(&f, &[0.7, 2.0, -1.0]).unwrap(), 1.0);
        let g = GaussChaosFunctional::identity_nu(2, 3).unwrap();
        let x = [1.5, -0.5, 9.0];
        assert_eq!(eval_chaos(&g, &x).unwrap(), 1.25 - 0.75);
        assert!(eval_chaos(&g, &[1.0]).is_err());
    }

    #[test]
    fn zero_identity_pointwise() {
        for nu in 1..=3 {
            let f = GaussChaosFunctional::identity_nu(nu, nu).unwrap();
            for s in 0..200 {
                let x = random_point(nu, s);
                let scale: f64 = x.iter().map(|v| v * v).sum::<f64>() + nu as f64;
                let g = gamma_discrepancy(&f, nu as f64, &x).unwrap();
                assert!(g.abs() <= 16.0 * f64::EPSILON * scale, "{g}");
                let df = malliavin_derivative(&f, &x).unwrap();
                let half_norm = 0.5 * df.iter().map(|v| v * v).sum::<f64>();
                assert!((malliavin_inner(&f, &x).unwrap() - half_norm).abs() <= 4.0 * f64::EPSILON * half_norm);
            }
        }
    }

    #[test]
    fn mixture_inner_uses_grading() {
        let k = 2;
        let f = GaussChaosFunctional::new(
            k,
            vec![
                ChaosTerm {
                    order: 1,
                    kernel: vec![1.0, 2.0],
                },
                ChaosTerm {
                    order: 2,
                    kernel: vec![0.5, 0.25, 0.25, -1.0],
                },
            ],
        )
        .unwrap();
        let x = [0.3, -1.1];
        let d1 = [1.0, 2.0];
        let d2 = [2.0 * (0.5 * x[0] + 0.25 * x[1]), 2.0 * (0.25 * x[0] - 1.0 * x[1])];
        let expected: f64 = (0..2).map(|i| (d1[i] + d2[i]) * (d1[i] + 0.5 * d2[i])).sum();
        assert!((malliavin_inner(&f, &x).unwrap() - expected).abs() < 1e-15);
        assert_eq!(f.pure_order(), None);
    }

    #[test]
    fn validation() {
        assert!(GaussChaosFunctional::second_order(2, vec![1.0, 0.5, 0.4, 1.0]).is_err());
        assert!(GaussChaosFunctional::second_order(2, vec![0.0; 4]).is_err());
        assert!(GaussChaosFunctional::new(
            2,
            vec![ChaosTerm {
                order: 3,
                kernel: vec![1.0; 8]
            }]
        )
        .is_err());
        assert!(gauss_gamma_bound(&GaussChaosFunctional::identity_nu(1, 1).unwrap(), 1.0, 9_999, 0).is_err());
    }

    #[test]
    fn chaos_is_centered_with_isometry() {
        let f = GaussChaosFunctional::perturbed(3, 0.4).unwrap();
        let n = 1_000_000;
        let s = sample_functional(&f, n, 77);
        let var = f.variance();
        assert!((var - 6.0).abs() < 1e-12);
        let m = batch_means(&s);
        assert!(m.mean.abs() < 4.0 * (var / n as f64).sqrt());
        let sq = batch_means(&s.iter().map(|v| v * v).collect::<Vec<_>>());
        assert!((sq.mean - var).abs() < 4.0 * sq.stderr);
    }

    #[test]
    fn exact_chi_square_bound_is_zero() {
        let f = GaussChaosFunctional::identity_nu(2, 2).unwrap();
        let r = gauss_gamma_bound(&f, 2.0, 10_000, 5).unwrap();
        assert!(r.l1_term < 1e-12 && r.l2_term < 1e-12);
    }

    #[test]
    fn coefficient_scales_small_nu() {
        let f = GaussChaosFunctional::eigenvalues(&[0.5, 0.5, -0.3]).unwrap();
        let a = gauss_gamma_bound(&f, 0.5, 10_000, 1).unwrap();
        let m = centered_coefficient(0.5);
        assert_eq!(m, 4.0);
        let g: Vec<f64> = (0..10_000)
            .map(|i| gamma_discrepancy(&f, 0.5, &draw(3, 1, i)).unwrap().abs())
            .collect();
        assert!((a.l1_term - 4.0 * crate::stats::mean(&g)).abs() < 1e-12);
    }

    #[test]
    fn perturbation_increases_bound() {
        let vals: Vec<f64> = [0.0, 0.1, 0.3]
            .iter()
            .map(|&e| {
                gauss_gamma_bound(&GaussChaosFunctional::perturbed(2, e).unwrap(), 2.0, 20_000, 3)
                    .unwrap()
                    .l1_term
            })
            .collect();
        assert!(vals[0] < 1e-12 && vals[0] < vals[1] && vals[1] < vals[2]);
    }

    #[test]
    fn jensen_ordering() {
        let f = GaussChaosFunctional::eigenvalues(&[1.0, 1.0, -1.0]).unwrap();
        let r = gauss_gamma_bound(&f, 1.5, 50_000, 8).unwrap();
        assert!(r.l1_term <= r.l2_term + 3.0 * r.l2_stderr);
        assert!(r.conditional_diagnostic <= r.l1_term + 1e-12);
    }

    #[test]
    fn ibp_identity() {
        let f = GaussChaosFunctional::perturbed(2, 0.5).unwrap();
        for g in [identity(), tanh()] {
            let r = gauss_ibp_check(&f, &g, 200_000, 4).unwrap();
            assert!(r.difference.abs() < 4.0 * r.stderr, "{}: {r:?}", g.name);
        }
    }

    #[test]
    fn sar_trend() {
        let exact: Vec<GaussChaosFunctional> = (0..3)
            .map(|_| GaussChaosFunctional::identity_nu(1, 1).unwrap())
            .collect();
        assert!(sar_condition_trend(&exact, 1.0, 10_000, 1)
            .unwrap()
            .iter()
            .all(|&v| v < 1e-12));
        let seq: Vec<GaussChaosFunctional> = [2usize, 4, 8]
            .iter()
            .map(|&n| GaussChaosFunctional::perturbed(2, 1.0 / n as f64).unwrap())
            .collect();
        let t = sar_condition_trend(&seq, 2.0, 20_000, 2).unwrap();
        assert!(t[0] > t[1] && t[1] > t[2]);
        let wrong = GaussChaosFunctional::eigenvalues(&[1.0, 1.0, -1.0]).unwrap();
        // E[F²] = 6, so the natural target is ν = 3; the discrepancy is 4(1 − X₃²)
        let w = sar_condition_trend(&[wrong], 3.0, 20_000, 2).unwrap();
        assert!(w[0] > 3.0);
    }
}
