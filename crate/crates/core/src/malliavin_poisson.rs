//! A Poisson random measure on `m` cells and its first two chaoses.
//!
//! Cell `i` carries control weight `μᵢ` and an independent count
//! `ηᵢ ~ Poisson(μᵢ)`. For kernels vanishing on the diagonal,
//!
//! ```text
//! I₁(f) = Σ fᵢ(ηᵢ − μᵢ),     I₂(f) = Σ_{i≠j} f_ij (ηᵢ − μᵢ)(ηⱼ − μⱼ).
//! ```
//!
//! The add-one-point derivative `D_zF = F(η + δ_z) − F(η)` is then
//! `D_zI₁(f) = f_z` and `D_zI₂(f) = 2Σ_{j≠z} f_zj(ηⱼ − μⱼ)`.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::malliavin_gauss::IbpReport;
use crate::stats::{batch_means, sample_rng};
use crate::testfn::TestFunction;
use crate::{centered_coefficient, CenteredGammaParams, Error, Result};

/// Default number of cells.
pub const DEFAULT_CELLS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonSpace {
    pub mu: Vec<f64>,
}

impl PoissonSpace {
    pub fn new(mu: Vec<f64>) -> Result<Self> {
        if mu.is_empty() {
            return Err(Error::Config("a Poisson space needs at least one cell".into()));
        }
        if mu.iter().any(|&m| !(m > 0.0 && m.is_finite())) {
            return Err(Error::Config("control weights must be positive and finite".into()));
        }
        Ok(Self { mu })
    }

    /// `m` cells of equal weight `total/m`.
    pub fn uniform(m: usize, total: f64) -> Result<Self> {
        Self::new(vec![total / m as f64; m])
    }

    pub fn cells(&self) -> usize {
        self.mu.len()
    }

    fn samplers(&self) -> Vec<Poisson<f64>> {
        self.mu
            .iter()
            .map(|&m| Poisson::new(m).expect("validated weight"))
            .collect()
    }
}

/// Independent `Poisson(μᵢ)` counts, one ChaCha stream per seed.
pub fn sample_counts(space: &PoissonSpace, seed: u64) -> Vec<u64> {
    draw_counts(&space.samplers(), &mut sample_rng(seed, 0))
}

fn draw_counts(samplers: &[Poisson<f64>], rng: &mut ChaCha8Rng) -> Vec<u64> {
    samplers.iter().map(|p| p.sample(rng) as u64).collect()
}

/// A vector (`order = 1`) or a row-major symmetric `m × m` off-diagonal
/// matrix (`order = 2`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonTerm {
    pub order: usize,
    pub kernel: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonChaosFunctional {
    pub space: PoissonSpace,
    pub terms: Vec<PoissonTerm>,
}

impl PoissonChaosFunctional {
    pub fn new(space: PoissonSpace, terms: Vec<PoissonTerm>) -> Result<Self> {
        let f = Self { space, terms };
        f.validate()?;
        Ok(f)
    }

    pub fn first_order(space: PoissonSpace, f: Vec<f64>) -> Result<Self> {
        Self::new(space, vec![PoissonTerm { order: 1, kernel: f }])
    }

    pub fn second_order(space: PoissonSpace, f: Vec<f64>) -> Result<Self> {
        Self::new(space, vec![PoissonTerm { order: 2, kernel: f }])
    }

    /// `c·1_B` with `B` the listed cells.
    pub fn indicator(space: PoissonSpace, cells: &[usize], c: f64) -> Result<Self> {
        let mut f = vec![0.0; space.cells()];
        for &i in cells {
            *f.get_mut(i)
                .ok_or_else(|| Error::Config(format!("cell {i} out of range")))? = c;
        }
        Self::first_order(space, f)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.space.cells();
        if self.terms.is_empty() {
            return Err(Error::Config("a chaos functional needs at least one term".into()));
        }
        for t in &self.terms {
            match t.order {
                1 if t.kernel.len() == m => {}
                2 if t.kernel.len() == m * m => {
                    for i in 0..m {
                        if t.kernel[i * m + i] != 0.0 {
                            return Err(Error::Config(format!(
                                "second-order kernel must vanish on the diagonal (cell {i})"
                            )));
                        }
                        for j in 0..i {
                            if t.kernel[i * m + j] != t.kernel[j * m + i] {
                                return Err(Error::Config(format!(
                                    "second-order kernel is not symmetric at ({i}, {j})"
                                )));
                            }
                        }
                    }
                }
                1 | 2 => {
                    return Err(Error::Config(format!(
                        "order-{} kernel has {} entries for {m} cells",
                        t.order,
                        t.kernel.len()
                    )))
                }
                p => {
                    return Err(Error::Config(format!(
                        "chaos order {p} is not supported (only 1 and 2)"
                    )))
                }
            }
            if t.kernel.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("kernel entries must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn pure_order(&self) -> Option<usize> {
        let p = self.terms[0].order;
        self.terms.iter().all(|t| t.order == p).then_some(p)
    }

    /// `E[F²] = Σ_p p!·‖f_p‖²_{L²(μ^p)}`.
    pub fn variance(&self) -> f64 {
        let mu = &self.space.mu;
        let m = mu.len();
        let mut first = vec![0.0; m];
        let mut second = vec![0.0; m * m];
        for t in &self.terms {
            let target = if t.order == 1 { &mut first } else { &mut second };
            target.iter_mut().zip(&t.kernel).for_each(|(a, v)| *a += v);
        }
        let mut v: f64 = first.iter().zip(mu).map(|(f, m)| f * f * m).sum();
        for i in 0..m {
            for j in 0..m {
                v += 2.0 * second[i * m + j].powi(2) * mu[i] * mu[j];
            }
        }
        v
    }

    fn check_counts(&self, counts: &[u64]) -> Result<()> {
        if counts.len() != self.space.cells() {
            return Err(Error::Contract(format!(
                "counts have length {}, the space has {} cells",
                counts.len(),
                self.space.cells()
            )));
        }
        Ok(())
    }

    fn centered(&self, counts: &[u64]) -> Vec<f64> {
        counts.iter().zip(&self.space.mu).map(|(&c, m)| c as f64 - m).collect()
    }

    fn eval_centered(&self, v: &[f64]) -> f64 {
        let m = v.len();
        self.terms
            .iter()
            .map(|t| match t.order {
                1 => t.kernel.iter().zip(v).map(|(f, x)| f * x).sum::<f64>(),
                _ => (0..m)
                    .map(|i| {
                        v[i] * t.kernel[i * m..(i + 1) * m]
                            .iter()
                            .zip(v)
                            .map(|(f, x)| f * x)
                            .sum::<f64>()
                    })
                    .sum(),
            })
            .sum()
    }

    /// `(D_zF, −D_zL⁻¹F)` for every cell.
    fn derivatives(&self, v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let m = v.len();
        let mut df = vec![0.0; m];
        let mut dl = vec![0.0; m];
        for t in &self.terms {
            for z in 0..m {
                let d = match t.order {
                    1 => t.kernel[z],
                    _ => {
                        2.0 * t.kernel[z * m..(z + 1) * m]
                            .iter()
                            .zip(v)
                            .map(|(f, x)| f * x)
                            .sum::<f64>()
                    }
                };
                df[z] += d;
                dl[z] += d / t.order as f64;
            }
        }
        (df, dl)
    }
}

pub fn eval_poisson_chaos(f: &PoissonChaosFunctional, counts: &[u64]) -> Result<f64> {
    f.check_counts(counts)?;
    Ok(f.eval_centered(&f.centered(counts)))
}

/// `D_zF` from the chaos formula `D_zI_p(f) = p·I_{p−1}(f(z, ·))`.
pub fn chaos_derivative(f: &PoissonChaosFunctional, counts: &[u64], z: usize) -> Result<f64> {
    f.check_counts(counts)?;
    if z >= counts.len() {
        return Err(Error::Contract(format!("cell {z} out of range")));
    }
    Ok(f.derivatives(&f.centered(counts)).0[z])
}

/// `F(η + δ_z) − F(η)` for an arbitrary functional of the counts.
pub fn add_point_derivative(f: &dyn Fn(&[u64]) -> f64, counts: &[u64], z: usize) -> Result<f64> {
    if z >= counts.len() {
        return Err(Error::Contract(format!("cell {z} out of range")));
    }
    let mut plus = counts.to_vec();
    plus[z] += 1;
    Ok(f(&plus) - f(counts))
}

/// Per-sample quantities: `F`, `⟨DF,−DL⁻¹F⟩`, `Σ_z |D_zF|²|D_zL⁻¹F|μ_z`.
fn sample_quantities(f: &PoissonChaosFunctional, n: usize, seed: u64) -> Vec<(f64, f64, f64)> {
    let samplers = f.space.samplers();
    let mu = &f.space.mu;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let counts = draw_counts(&samplers, &mut sample_rng(seed, i as u64));
            let v = f.centered(&counts);
            let (df, dl) = f.derivatives(&v);
            let mut inner = 0.0;
            let mut cubic = 0.0;
            for z in 0..mu.len() {
                inner += df[z] * dl[z] * mu[z];
                cubic += df[z] * df[z] * dl[z].abs() * mu[z];
            }
            (f.eval_centered(&v), inner, cubic)
        })
        .collect()
}

/// `n` samples of `F`; sample `i` uses the same stream as the bound.
pub fn sample_functional(f: &PoissonChaosFunctional, n: usize, seed: u64) -> Vec<f64> {
    sample_quantities(f, n, seed).into_iter().map(|q| q.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonBoundReport {
    pub nu: f64,
    pub samples: usize,
    pub seed: u64,
    /// `max(1, 2/ν)·E|2(F+ν) − ⟨DF,−DL⁻¹F⟩|`
    pub term1: f64,
    pub term1_stderr: f64,
    /// `max(1, 2/ν)·E[(2(F+ν) − ⟨DF,−DL⁻¹F⟩)²]^{1/2}`
    pub term1_l2: f64,
    pub term1_l2_stderr: f64,
    /// `∫ E[|D_zF|²|D_zL⁻¹F|] μ(dz)`; for pure order `p` this is
    /// `p⁻¹∫E|D_zF|³μ(dz)`.
    pub cubic_integral: f64,
    /// `max(1, 1/ν + 1/2)·cubic_integral`
    pub term2: f64,
    pub term2_stderr: f64,
    pub bound: f64,
    pub bound_l2: f64,
    pub pure_order: Option<usize>,
}

/// Monte Carlo evaluation of the Poisson Gamma bound on `d₂(F, Z_ν)`.
pub fn poisson_gamma_bound(
    f: &PoissonChaosFunctional,
    nu: f64,
    n_samples: usize,
    seed: u64,
) -> Result<PoissonBoundReport> {
    CenteredGammaParams::new(nu)?;
    f.validate()?;
    if n_samples < 2 {
        return Err(Error::Contract("poisson_gamma_bound needs at least 2 samples".into()));
    }
    let m1 = centered_coefficient(nu);
    let m2 = (1.0 / nu + 0.5).max(1.0);
    let q = sample_quantities(f, n_samples, seed);
    let g: Vec<f64> = q.iter().map(|&(fv, inner, _)| 2.0 * (fv + nu) - inner).collect();
    let abs = batch_means(&g.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let sq = batch_means(&g.iter().map(|v| v * v).collect::<Vec<_>>());
    let cubic = batch_means(&q.iter().map(|x| x.2).collect::<Vec<_>>());
    let l2 = sq.mean.sqrt();
    let term1 = m1 * abs.mean;
    let term1_l2 = m1 * l2;
    let term2 = m2 * cubic.mean;
    Ok(PoissonBoundReport {
        nu,
        samples: n_samples,
        seed,
        term1,
        term1_stderr: m1 * abs.stderr,
        term1_l2,
        term1_l2_stderr: if l2 > 0.0 { m1 * sq.stderr / (2.0 * l2) } else { 0.0 },
        cubic_integral: cubic.mean,
        term2,
        term2_stderr: m2 * cubic.stderr,
        bound: term1 + term2,
        bound_l2: term1_l2 + term2,
        pure_order: f.pure_order(),
    })
}

/// Both sides of `E[F·g(F)] = E[⟨Dg(F), −DL⁻¹F⟩]`, with
/// `D_z g(F) = g(F + D_zF) − g(F)`.
pub fn ibp_check(f: &PoissonChaosFunctional, g: &TestFunction, n_samples: usize, seed: u64) -> Result<IbpReport> {
    if g.lip1.is_none() {
        return Err(Error::Contract(format!(
            "'{}' has no declared Lipschitz constant",
            g.name
        )));
    }
    let samplers = f.space.samplers();
    let mu = &f.space.mu;
    let per: Vec<(f64, f64)> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let counts = draw_counts(&samplers, &mut sample_rng(seed, i as u64));
            let v = f.centered(&counts);
            let fv = f.eval_centered(&v);
            let (df, dl) = f.derivatives(&v);
            let gf = g.eval(fv);
            let rhs: f64 = (0..mu.len()).map(|z| (g.eval(fv + df[z]) - gf) * dl[z] * mu[z]).sum();
            (fv * gf, rhs)
        })
        .collect();
    let diff: Vec<f64> = per.iter().map(|(a, b)| a - b).collect();
    let d = batch_means(&diff);
    Ok(IbpReport {
        lhs: crate::stats::mean(&per.iter().map(|p| p.0).collect::<Vec<_>>()),
        rhs: crate::stats::mean(&per.iter().map(|p| p.1).collect::<Vec<_>>()),
        difference: d.mean,
        stderr: d.stderr,
        samples: n_samples,
    })
}

/// A seeded off-diagonal second-order kernel on `space`, scaled so that
/// `E[I₂(f)²] = 2ν`.
pub fn seeded_second_order(space: PoissonSpace, nu: f64, seed: u64) -> Result<PoissonChaosFunctional> {
    use rand::{Rng, SeedableRng};
    let m = space.cells();
    if m < 2 {
        return Err(Error::Config("a second-order kernel needs at least 2 cells".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..i {
            let v: f64 = rng.random_range(-1.0..1.0);
            f[i * m + j] = v;
            f[j * m + i] = v;
        }
    }
    let raw = PoissonChaosFunctional::second_order(space.clone(), f.clone())?;
    let scale = (2.0 * nu / raw.variance()).sqrt();
    PoissonChaosFunctional::second_order(space, f.into_iter().map(|v| v * scale).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testfn::{arctan, identity, tanh};
    use approx::assert_relative_eq;

    #[test]
    fn counts_are_reproducible() {
        let s = PoissonSpace::uniform(8, 4.0).unwrap();
        assert_eq!(sample_counts(&s, 3), sample_counts(&s, 3));
        let tiny = PoissonSpace::new(vec![1e-9; 4]).unwrap();
        assert!((0..100).all(|i| sample_counts(&tiny, i).iter().all(|&c| c == 0)));
        assert!(PoissonSpace::new(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn count_moments_and_independence() {
        let s = PoissonSpace::new(vec![0.5, 2.0]).unwrap();
        let samplers = s.samplers();
        let n = 1_000_000;
        let draws: Vec<Vec<u64>> = (0..n)
            .into_par_iter()
            .map(|i| draw_counts(&samplers, &mut sample_rng(9, i as u64)))
            .collect();
        let a: Vec<f64> = draws.iter().map(|d| d[0] as f64).collect();
        let b: Vec<f64> = draws.iter().map(|d| d[1] as f64).collect();
        let (ma, mb) = (crate::stats::mean(&a), crate::stats::mean(&b));
        assert!((ma - 0.5).abs() < 4.0 * (0.5 / n as f64).sqrt());
        assert!((mb - 2.0).abs() < 4.0 * (2.0 / n as f64).sqrt());
        let cov = crate::stats::mean(&a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).collect::<Vec<_>>());
        let corr = cov / (crate::stats::variance(&a) * crate::stats::variance(&b)).sqrt();
        assert!(corr.abs() < 4.0 / (n as f64).sqrt());
    }

    #[test]
    fn indicator_functional() {
        let s = PoissonSpace::uniform(4, 2.0).unwrap();
        let f = PoissonChaosFunctional::indicator(s, &[0, 2], 1.0).unwrap();
        let counts = [3, 1, 0, 5];
        assert_relative_eq!(eval_poisson_chaos(&f, &counts).unwrap(), 3.0 - 1.0);
        let eval = |c: &[u64]| eval_poisson_chaos(&f, c).unwrap();
        assert_relative_eq!(add_point_derivative(&eval, &counts, 0).unwrap(), 1.0);
        assert_eq!(add_point_derivative(&eval, &counts, 1).unwrap(), 0.0);
        assert!(eval_poisson_chaos(&f, &[1, 2]).is_err());
    }

    #[test]
    fn add_point_matches_chaos_formula() {
        let s = PoissonSpace::uniform(6, 3.0).unwrap();
        let f = seeded_second_order(s.clone(), 1.0, 4).unwrap();
        let g = PoissonChaosFunctional::first_order(s.clone(), vec![0.3, -0.2, 1.0, 0.0, 0.5, 2.0]).unwrap();
        let eval_f = |c: &[u64]| eval_poisson_chaos(&f, c).unwrap();
        let eval_sum = |c: &[u64]| eval_poisson_chaos(&f, c).unwrap() + eval_poisson_chaos(&g, c).unwrap();
        for seed in 0..50 {
            let counts = sample_counts(&s, seed);
            for z in 0..6 {
                let a = add_point_derivative(&eval_f, &counts, z).unwrap();
                let b = chaos_derivative(&f, &counts, z).unwrap();
                assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()));
                let lin = add_point_derivative(&eval_sum, &counts, z).unwrap();
                let parts = b + chaos_derivative(&g, &counts, z).unwrap();
                assert!((lin - parts).abs() < 1e-12 * (1.0 + parts.abs()));
            }
        }
    }

    #[test]
    fn isometry_and_centering() {
        let s = PoissonSpace::uniform(10, 5.0).unwrap();
        let f = seeded_second_order(s, 1.5, 2).unwrap();
        assert_relative_eq!(f.variance(), 3.0, max_relative = 1e-12);
        let x = sample_functional(&f, 400_000, 1);
        let m = batch_means(&x);
        assert!(m.mean.abs() < 4.0 * m.stderr);
        let sq = batch_means(&x.iter().map(|v| v * v).collect::<Vec<_>>());
        assert!((sq.mean - 3.0).abs() < 4.0 * sq.stderr);
    }

    #[test]
    fn zero_kernel_bound() {
        let s = PoissonSpace::uniform(4, 1.0).unwrap();
        let f = PoissonChaosFunctional::first_order(s, vec![0.0; 4]).unwrap();
        for &nu in &[0.5, 3.0] {
            let r = poisson_gamma_bound(&f, nu, 1000, 0).unwrap();
            assert_relative_eq!(r.bound, centered_coefficient(nu) * 2.0 * nu);
            assert_eq!(r.term2, 0.0);
        }
    }

    #[test]
    fn first_order_closed_form() {
        let nu = 2.0;
        let s = PoissonSpace::new(vec![0.25, 0.5, 0.25, 3.0]).unwrap();
        let f = PoissonChaosFunctional::indicator(s, &[0, 1, 2], 2.0).unwrap();
        let r = poisson_gamma_bound(&f, nu, 10_000, 1).unwrap();
        assert_eq!(r.cubic_integral, 4.0 * nu);
        assert_eq!(r.term2, 4.0 * nu);
    }

    #[test]
    fn pure_second_order_inner_is_half_norm() {
        let s = PoissonSpace::uniform(5, 2.0).unwrap();
        let f = seeded_second_order(s.clone(), 1.0, 8).unwrap();
        for seed in 0..20 {
            let v = f.centered(&sample_counts(&s, seed));
            let (df, dl) = f.derivatives(&v);
            let inner: f64 = (0..5).map(|z| df[z] * dl[z] * s.mu[z]).sum();
            let half: f64 = 0.5 * (0..5).map(|z| df[z] * df[z] * s.mu[z]).sum::<f64>();
            assert!((inner - half).abs() < 1e-13 * (1.0 + half));
        }
    }

    #[test]
    fn ibp_first_order_closed_form() {
        let s = PoissonSpace::new(vec![0.5, 1.0, 1.5]).unwrap();
        let f = PoissonChaosFunctional::first_order(s, vec![1.0, -2.0, 0.5]).unwrap();
        let r = ibp_check(&f, &identity(), 100_000, 3).unwrap();
        // for g(x) = x the right side is ‖f‖²μ on every sample
        assert_relative_eq!(r.rhs, f.variance(), max_relative = 1e-12);
        assert!((r.lhs - f.variance()).abs() < 4.0 * r.stderr);
    }

    #[test]
    fn ibp_nonlinear() {
        let s = PoissonSpace::uniform(6, 3.0).unwrap();
        let f2 = seeded_second_order(s.clone(), 1.0, 5).unwrap();
        let f1 = PoissonChaosFunctional::first_order(s, vec![0.4, 0.1, -0.3, 0.8, 0.0, -0.5]).unwrap();
        for f in [&f1, &f2] {
            for g in [identity(), tanh(), arctan()] {
                let r = ibp_check(f, &g, 200_000, 6).unwrap();
                assert!(r.difference.abs() < 4.0 * r.stderr, "{}: {r:?}", g.name);
            }
        }
    }

    #[test]
    fn validation() {
        let s = PoissonSpace::uniform(2, 1.0).unwrap();
        assert!(PoissonChaosFunctional::second_order(s.clone(), vec![1.0, 0.5, 0.5, 0.0]).is_err());
        assert!(PoissonChaosFunctional::second_order(s.clone(), vec![0.0, 0.5, 0.4, 0.0]).is_err());
        assert!(PoissonChaosFunctional::first_order(s, vec![1.0]).is_err());
    }
}
