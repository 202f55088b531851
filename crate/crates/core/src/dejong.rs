//! Exchangeable pairs for degenerate U-statistics and the non-central
//! de Jong bound.
//!
//! Given `W = ψ(X₁, …, Xₙ)` degenerate of order `d`, pick `α` uniformly in
//! `[n]`, replace `X_α` by an independent copy and call the result `W′`. Then
//!
//! ```text
//! E[W′ − W | X] = −(d/n)·W,          S = (n/2d)·E[(W′ − W)² | X] − 2(W + ν)
//! ```
//!
//! and `d₂(W, Z_ν)` is controlled by `Var(S)` and `E|W′ − W|³`. In exact mode
//! every quantity is a finite sum over the product space; only coordinate `α`
//! changes between `X` and `X′`, so the pair sum costs `n·|Ω|·max|support|`.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distances::{d2_dictionary_weighted, d2_reference_dictionary, wasserstein1_vs_centered_gamma, D2Target};
use crate::gamma_dist::moment_functional;
use crate::hoeffding::{
    component_stats, decompose_table, masks_up_to, strides_for, tabulate, verify_degeneracy, ComponentStats,
    DiscreteFactor, DiscreteProductSpace, Enumeration, HoeffdingDecomposition, UStatKernel,
};
use crate::stats::{batch_means, sample_rng, CompensatedSum};
use crate::stein::plugin_bound;
use crate::{centered_coefficient, CenteredGammaParams, Error, Result};

/// Smallest Monte Carlo sample accepted by [`build_pair_stats`].
pub const MIN_MC_SAMPLES: usize = 1000;
/// Samples used when [`demo_sequence`] falls back to Monte Carlo.
pub const DEMO_MC_SAMPLES: usize = 20_000;
/// Relative tolerance between the declared `ν` and `E[W²]/2`.
pub const NU_REL_TOL: f64 = 1e-6;
/// Absolute tolerance on `E[W²] − 2ν` in exact mode.
pub const EXACT_M2_TOL: f64 = 1e-9;
/// Tolerance for the degeneracy check, relative to `√(2ν)`.
pub const DEGENERACY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PairMode {
    Exact,
    Mc { seed: u64, samples: usize },
}

/// Batch-means standard errors of the Monte Carlo pair statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairStderr {
    pub e_dw2: f64,
    pub e_abs_dw3: f64,
    pub e_dw4: f64,
    pub var_s: f64,
    pub m3: f64,
    pub m4: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeablePairStats {
    pub mode: PairMode,
    pub n: usize,
    pub d: usize,
    pub nu: f64,
    /// `λ = d/n`
    pub lambda_pair: f64,
    pub var_s: Option<f64>,
    pub e_s: f64,
    pub e_abs_s: f64,
    /// `E|R|` with `R = W + E[W′ − W | X]/λ`.
    pub e_abs_r: f64,
    pub e_abs_dw3: Option<f64>,
    pub e_dw2: f64,
    pub e_dw3: f64,
    pub e_dw4: f64,
    pub m2: f64,
    pub m3: f64,
    pub m4: f64,
    pub r_zero: bool,
    /// `max_x |E[W′ − W | X = x] + λW(x)|`
    pub regression_error: f64,
    /// Largest relative violation of `P(x)·p_α(y) = P(x′)·p_α(x_α)` over the
    /// enumerated transitions; zero in Monte Carlo mode.
    pub exchangeability_error: f64,
    /// `E[W²·(1/2λ)E[(W′−W)²|X]]`
    pub e_w2_cond: f64,
    /// `E[W·(1/2λ)E[(W′−W)²|X]]`
    pub e_w_cond: f64,
    pub stderr: Option<PairStderr>,
}

/// Conditional pair moments at one point.
#[derive(Debug, Clone, Copy, Default)]
struct Local {
    p: f64,
    w: f64,
    c1: f64,
    c2: f64,
    c3: f64,
    a3: f64,
    a4: f64,
    balance: f64,
}

impl Local {
    fn s(&self, n: usize, d: usize, nu: f64) -> f64 {
        n as f64 / (2.0 * d as f64) * self.c2 - 2.0 * (self.w + nu)
    }
}

fn check_common(d: usize, nu: f64, s: &DiscreteProductSpace) -> Result<()> {
    CenteredGammaParams::new(nu)?;
    if d == 0 || d > s.n() {
        return Err(Error::Contract(format!("order d = {d} must lie in 1..={}", s.n())));
    }
    Ok(())
}

/// A tabulated kernel with its order-`d` decomposition.
pub struct ExactModel {
    pub space: DiscreteProductSpace,
    pub enumeration: Enumeration,
    pub values: Vec<f64>,
    pub point_probs: Vec<f64>,
    pub decomposition: HoeffdingDecomposition,
    pub d: usize,
}

impl ExactModel {
    /// Tabulate and decompose up to order `d`; degeneracy at order `d` is
    /// verified.
    pub fn new(k: &UStatKernel, s: &DiscreteProductSpace, d: usize) -> Result<Self> {
        let e = Enumeration::new(s)?;
        let values = tabulate(k, &e)?;
        Self::from_values(s, e, values, d)
    }

    fn from_values(s: &DiscreteProductSpace, e: Enumeration, values: Vec<f64>, d: usize) -> Result<Self> {
        let probs: Vec<Vec<f64>> = s.factors.iter().map(|f| f.probs.clone()).collect();
        let point_probs: Vec<f64> = (0..e.points)
            .map(|x| {
                let dg = e.digits(x);
                (0..e.n).map(|j| probs[j][dg[j] as usize]).product()
            })
            .collect();
        let m2: f64 = crate::stats::sum(values.iter().zip(&point_probs).map(|(w, p)| p * w * w));
        let dec = decompose_table(&e, probs, values.clone(), d);
        let tol = DEGENERACY_TOL * m2.sqrt().max(1.0);
        let report = verify_degeneracy(&dec, d, tol);
        if !report.holds {
            return Err(Error::Contract(format!(
                "kernel is not degenerate of order {d}: offending subsets {:?}, residual above order {:.3e}",
                report.offending.iter().take(5).collect::<Vec<_>>(),
                report.residual_above_order
            )));
        }
        Ok(Self {
            space: s.clone(),
            enumeration: e,
            values,
            point_probs,
            decomposition: dec,
            d,
        })
    }

    pub fn second_moment(&self) -> f64 {
        crate::stats::sum(self.values.iter().zip(&self.point_probs).map(|(w, p)| p * w * w))
    }

    fn locals(&self) -> Vec<Local> {
        let e = &self.enumeration;
        let n = e.n;
        let probs: Vec<&[f64]> = self.space.factors.iter().map(|f| f.probs.as_slice()).collect();
        (0..e.points)
            .into_par_iter()
            .map(|x| {
                let dg = e.digits(x);
                let w = self.values[x];
                let p = self.point_probs[x];
                let mut loc = Local {
                    p,
                    w,
                    ..Local::default()
                };
                let (mut c1, mut c2, mut c3, mut a3, mut a4) = (
                    CompensatedSum::new(),
                    CompensatedSum::new(),
                    CompensatedSum::new(),
                    CompensatedSum::new(),
                    CompensatedSum::new(),
                );
                for alpha in 0..n {
                    let cur = dg[alpha] as usize;
                    for (y, &q) in probs[alpha].iter().enumerate() {
                        if y == cur {
                            continue;
                        }
                        let xp = x + y * e.strides[alpha] - cur * e.strides[alpha];
                        let dw = self.values[xp] - w;
                        let q = q / n as f64;
                        c1.add(q * dw);
                        c2.add(q * dw * dw);
                        c3.add(q * dw * dw * dw);
                        a3.add(q * (dw * dw * dw).abs());
                        a4.add(q * dw * dw * dw * dw);
                        let forward = p * probs[alpha][y];
                        let backward = self.point_probs[xp] * probs[alpha][cur];
                        loc.balance = loc.balance.max((forward - backward).abs() / forward);
                    }
                }
                loc.c1 = c1.value();
                loc.c2 = c2.value();
                loc.c3 = c3.value();
                loc.a3 = a3.value();
                loc.a4 = a4.value();
                loc
            })
            .collect()
    }

    /// Exact pair statistics.
    pub fn pair_stats(&self, nu: f64) -> Result<ExchangeablePairStats> {
        let m2 = self.second_moment();
        check_nu(m2, nu)?;
        if (m2 - 2.0 * nu).abs() > EXACT_M2_TOL {
            return Err(Error::Contract(format!(
                "E[W^2] = {m2} differs from 2nu = {} by more than {EXACT_M2_TOL:e}",
                2.0 * nu
            )));
        }
        let n = self.enumeration.n;
        let d = self.d;
        let lambda = d as f64 / n as f64;
        let locals = self.locals();
        let ex = |f: &dyn Fn(&Local) -> f64| crate::stats::sum(locals.iter().map(|l| l.p * f(l)));
        let e_s = ex(&|l| l.s(n, d, nu));
        let e_s2 = ex(&|l| l.s(n, d, nu).powi(2));
        let regression_error = locals.iter().map(|l| (l.c1 + lambda * l.w).abs()).fold(0.0, f64::max);
        Ok(ExchangeablePairStats {
            mode: PairMode::Exact,
            n,
            d,
            nu,
            lambda_pair: lambda,
            var_s: Some((e_s2 - e_s * e_s).max(0.0)),
            e_s,
            e_abs_s: ex(&|l| l.s(n, d, nu).abs()),
            e_abs_r: ex(&|l| (l.w + l.c1 / lambda).abs()),
            e_abs_dw3: Some(ex(&|l| l.a3)),
            e_dw2: ex(&|l| l.c2),
            e_dw3: ex(&|l| l.c3),
            e_dw4: ex(&|l| l.a4),
            m2,
            m3: ex(&|l| l.w.powi(3)),
            m4: ex(&|l| l.w.powi(4)),
            r_zero: regression_error <= 1e-11 * m2.sqrt().max(1.0),
            regression_error,
            exchangeability_error: locals.iter().map(|l| l.balance).fold(0.0, f64::max),
            e_w2_cond: ex(&|l| l.w * l.w * l.c2 / (2.0 * lambda)),
            e_w_cond: ex(&|l| l.w * l.c2 / (2.0 * lambda)),
            stderr: None,
        })
    }

    /// `Σ_j E[(Σ_{J ∋ j, |J| = d} W_J)⁴]`.
    pub fn quad_sum(&self) -> f64 {
        let e = &self.enumeration;
        let n = e.n;
        let layouts: Vec<(Vec<usize>, Vec<usize>, &Vec<f64>)> = masks_up_to(n, self.d)
            .into_iter()
            .filter(|m| m.count_ones() as usize == self.d)
            .map(|m| {
                let coords = crate::hoeffding::mask_coords(m);
                let strides = strides_for(&e.sizes, &coords);
                (coords, strides, &self.decomposition.components[&m])
            })
            .collect();
        let per: Vec<f64> = (0..e.points)
            .into_par_iter()
            .map(|x| {
                let dg = e.digits(x);
                let mut t = vec![0.0; n];
                for (coords, strides, table) in &layouts {
                    let idx: usize = coords.iter().zip(strides).map(|(&c, s)| dg[c] as usize * s).sum();
                    let v = table[idx];
                    for &c in coords {
                        t[c] += v;
                    }
                }
                self.point_probs[x] * t.iter().map(|v| v.powi(4)).sum::<f64>()
            })
            .collect();
        crate::stats::sum(per)
    }

    /// `Σ_j (Σ_{J ∋ j} σ_J)⁴ = Σ |J∩K∩L∩M|·σ_Jσ_Kσ_Lσ_M`.
    pub fn sigma_quad_sum(&self) -> f64 {
        let n = self.enumeration.n;
        (0..n)
            .map(|j| {
                let s: f64 = self
                    .decomposition
                    .sigma2
                    .iter()
                    .filter(|(m, _)| m.count_ones() as usize == self.d && *m >> j & 1 == 1)
                    .map(|(_, s2)| s2.sqrt())
                    .sum();
                s.powi(4)
            })
            .sum()
    }
}

fn check_nu(m2: f64, nu: f64) -> Result<()> {
    let inferred = 0.5 * m2;
    if (inferred - nu).abs() > NU_REL_TOL * nu {
        return Err(Error::Contract(format!("declared nu = {nu} but E[W^2]/2 = {inferred}")));
    }
    Ok(())
}

/// Draw a point of the product space by inversion, one uniform per coordinate.
fn draw_point(s: &DiscreteProductSpace, rng: &mut ChaCha8Rng) -> Vec<usize> {
    s.factors
        .iter()
        .map(|f| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, p) in f.probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            f.len() - 1
        })
        .collect()
}

fn mc_pair_stats(
    k: &UStatKernel,
    s: &DiscreteProductSpace,
    d: usize,
    nu: f64,
    seed: u64,
    samples: usize,
) -> Result<ExchangeablePairStats> {
    if samples < MIN_MC_SAMPLES {
        return Err(Error::Contract(format!(
            "Monte Carlo pair statistics need at least {MIN_MC_SAMPLES} samples, got {samples}"
        )));
    }
    let n = s.n();
    let lambda = d as f64 / n as f64;
    let locals: Vec<Local> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64);
            let mut point = draw_point(s, &mut rng);
            let w = k.eval(&point);
            let mut loc = Local {
                p: 1.0,
                w,
                ..Local::default()
            };
            for alpha in 0..n {
                let cur = point[alpha];
                for (y, &q) in s.factors[alpha].probs.iter().enumerate() {
                    if y == cur {
                        continue;
                    }
                    point[alpha] = y;
                    let dw = k.eval(&point) - w;
                    let q = q / n as f64;
                    loc.c1 += q * dw;
                    loc.c2 += q * dw * dw;
                    loc.c3 += q * dw * dw * dw;
                    loc.a3 += q * (dw * dw * dw).abs();
                    loc.a4 += q * dw.powi(4);
                }
                point[alpha] = cur;
            }
            loc
        })
        .collect();
    if locals
        .iter()
        .any(|l| !(l.w.is_finite() && l.c2.is_finite() && l.a4.is_finite()))
    {
        return Err(Error::Domain("kernel produced a non-finite value".into()));
    }
    let col = |f: &dyn Fn(&Local) -> f64| -> Vec<f64> { locals.iter().map(f).collect() };
    let m2 = batch_means(&col(&|l| l.w * l.w));
    check_nu(m2.mean, nu).or_else(|e| {
        // the Monte Carlo m2 only has to agree within its own noise
        if (m2.mean - 2.0 * nu).abs() <= 5.0 * m2.stderr {
            Ok(())
        } else {
            Err(e)
        }
    })?;
    let s_vals = col(&|l| l.s(n, d, nu));
    let e_s = batch_means(&s_vals);
    let centered: Vec<f64> = s_vals.iter().map(|v| (v - e_s.mean).powi(2)).collect();
    let var_s = batch_means(&centered);
    let unbiased = samples as f64 / (samples as f64 - 1.0);
    let e3 = batch_means(&col(&|l| l.a3));
    let e4 = batch_means(&col(&|l| l.a4));
    let m3 = batch_means(&col(&|l| l.w.powi(3)));
    let m4 = batch_means(&col(&|l| l.w.powi(4)));
    let e2 = batch_means(&col(&|l| l.c2));
    let regression_error = locals.iter().map(|l| (l.c1 + lambda * l.w).abs()).fold(0.0, f64::max);
    let mean = |f: &dyn Fn(&Local) -> f64| crate::stats::mean(&col(f));
    Ok(ExchangeablePairStats {
        mode: PairMode::Mc { seed, samples },
        n,
        d,
        nu,
        lambda_pair: lambda,
        var_s: Some(var_s.mean * unbiased),
        e_s: e_s.mean,
        e_abs_s: mean(&|l| l.s(n, d, nu).abs()),
        e_abs_r: mean(&|l| (l.w + l.c1 / lambda).abs()),
        e_abs_dw3: Some(e3.mean),
        e_dw2: e2.mean,
        e_dw3: mean(&|l| l.c3),
        e_dw4: e4.mean,
        m2: m2.mean,
        m3: m3.mean,
        m4: m4.mean,
        r_zero: regression_error <= 1e-11 * m2.mean.sqrt().max(1.0),
        regression_error,
        exchangeability_error: 0.0,
        e_w2_cond: mean(&|l| l.w * l.w * l.c2 / (2.0 * lambda)),
        e_w_cond: mean(&|l| l.w * l.c2 / (2.0 * lambda)),
        stderr: Some(PairStderr {
            e_dw2: e2.stderr,
            e_abs_dw3: e3.stderr,
            e_dw4: e4.stderr,
            var_s: var_s.stderr * unbiased,
            m3: m3.stderr,
            m4: m4.stderr,
        }),
    })
}

/// Pair statistics by exact enumeration or Monte Carlo.
pub fn build_pair_stats(
    k: &UStatKernel,
    s: &DiscreteProductSpace,
    d: usize,
    nu: f64,
    mode: PairMode,
) -> Result<ExchangeablePairStats> {
    check_common(d, nu, s)?;
    match mode {
        PairMode::Exact => ExactModel::new(k, s, d)?.pair_stats(nu),
        PairMode::Mc { seed, samples } => mc_pair_stats(k, s, d, nu, seed, samples),
    }
}

/// The Hoeffding route to `Var(S)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SDecomposition {
    /// `U_∅ = E[W²]`
    pub u_empty: f64,
    /// `Var(S₁) = Σ_{1 ≤ |M| ≤ 2d−1, |M| ≠ d} (1 − |M|/2d)² Var(U_M)`
    pub var_s1: f64,
    /// `Var(S₂) = Σ_{|J| = d} E[(U_J − 4W_J)²]`
    pub var_s2: f64,
    /// `Var(S₁) + ¼Var(S₂)`
    pub var_s: f64,
    /// `Σ_J Cov(W_J, U_J)`
    pub e_w3_components: f64,
    /// `E[W³]` by enumeration.
    pub e_w3_direct: f64,
    /// `Σ_J Var(U_J) + 32ν − 8E[W³]`
    pub var_s2_identity: f64,
}

/// Decompose `S = S₁ + ½S₂` through the Hoeffding components `U_M` of `W²`.
pub fn hoeffding_s_decomposition(
    k: &UStatKernel,
    s: &DiscreteProductSpace,
    d: usize,
    nu: f64,
) -> Result<SDecomposition> {
    check_common(d, nu, s)?;
    let model = ExactModel::new(k, s, d)?;
    check_nu(model.second_moment(), nu)?;
    Ok(s_decomposition(&model, nu))
}

fn s_decomposition(model: &ExactModel, nu: f64) -> SDecomposition {
    let d = model.d;
    let e = &model.enumeration;
    let probs: Vec<Vec<f64>> = model.space.factors.iter().map(|f| f.probs.clone()).collect();
    let squares: Vec<f64> = model.values.iter().map(|w| w * w).collect();
    let u = decompose_table(e, probs, squares, 2 * d - 1);
    let w = &model.decomposition;
    let mut var_s1 = CompensatedSum::new();
    let mut var_s2 = CompensatedSum::new();
    let mut var_uj = CompensatedSum::new();
    let mut cov = CompensatedSum::new();
    for (&m, &s2) in &u.sigma2 {
        let size = m.count_ones() as usize;
        if size == d {
            let cells = u.cell_probs(m);
            let (ut, wt) = (&u.components[&m], &w.components[&m]);
            for (c, p) in cells.iter().enumerate() {
                var_s2.add(p * (ut[c] - 4.0 * wt[c]).powi(2));
                cov.add(p * ut[c] * wt[c]);
            }
            var_uj.add(s2);
        } else if size < 2 * d {
            let a = 1.0 - size as f64 / (2.0 * d as f64);
            var_s1.add(a * a * s2);
        }
    }
    let e_w3_direct = crate::stats::sum(model.values.iter().zip(&model.point_probs).map(|(w, p)| p * w.powi(3)));
    let (v1, v2, c) = (var_s1.value(), var_s2.value(), cov.value());
    SDecomposition {
        u_empty: u.mean,
        var_s1: v1,
        var_s2: v2,
        var_s: v1 + 0.25 * v2,
        e_w3_components: c,
        e_w3_direct,
        var_s2_identity: var_uj.value() + 32.0 * nu - 8.0 * c,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentIdentityReport {
    pub e_w4: f64,
    /// `3E[W²·(1/2λ)E[(W′−W)²|X]] − (1/4λ)E[(W′−W)⁴]`
    pub rhs4: f64,
    pub e_w3: f64,
    /// `2E[W·(1/2λ)E[(W′−W)²|X]]`
    pub rhs3: f64,
    pub error4: f64,
    pub error3: f64,
    pub pass: bool,
}

/// Tolerance of [`moment_identities_check`], relative to `max(1, E W⁴)`.
pub const MOMENT_IDENTITY_TOL: f64 = 1e-10;

/// The third- and fourth-moment identities of an exchangeable pair with
/// `E[W′ − W | X] = −λW`.
pub fn moment_identities_check(stats: &ExchangeablePairStats) -> MomentIdentityReport {
    let lambda = stats.lambda_pair;
    let rhs4 = 3.0 * stats.e_w2_cond - stats.e_dw4 / (4.0 * lambda);
    let rhs3 = 2.0 * stats.e_w_cond;
    let error4 = (stats.m4 - rhs4).abs();
    let error3 = (stats.m3 - rhs3).abs();
    let scale = stats.m4.abs().max(1.0);
    MomentIdentityReport {
        e_w4: stats.m4,
        rhs4,
        e_w3: stats.m3,
        rhs3,
        error4,
        error3,
        pass: error4 <= MOMENT_IDENTITY_TOL * scale && error3 <= MOMENT_IDENTITY_TOL * scale,
    }
}

/// How the `C_d·D·ρ²` term of the bound is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum CdPolicy {
    /// Replace `C_d·D·ρ²` by the enumerated `Σ_j E[(Σ_{J∋j} W_J)⁴]`.
    Exact,
    /// A user-supplied `C_d`.
    Given(f64),
    /// `C_d` must be supplied; reaching the bound without one is an error.
    Require,
}

impl FromStr for CdPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "require" => Ok(Self::Require),
            other => other
                .parse::<f64>()
                .ok()
                .filter(|c| *c > 0.0 && c.is_finite())
                .map(Self::Given)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "C_d policy must be 'exact', 'require' or a positive number, got '{other}'"
                    ))
                }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeJongBound {
    pub moment_term: f64,
    pub rho_term: f64,
    pub total: f64,
    pub exact_variant_total: f64,
    pub policy: CdPolicy,
    /// The value standing in for `C_d·D·ρ²`.
    pub surrogate: f64,
    /// `ρ_term` with `D` dropped.
    pub rho_term_without_d: f64,
    pub total_without_d: f64,
    /// `|E W⁴ − 12E W³ − 12ν² + 48ν|`
    pub moment_discrepancy: f64,
    pub rho2: f64,
    pub big_d: f64,
    /// `Σ_j E[(Σ_{J∋j} W_J)⁴]`
    pub quad_sum: f64,
    /// `Σ |J∩K∩L∩M| σ_Jσ_Kσ_Lσ_M`
    pub sigma_quad_sum: f64,
    /// `3·Var(S) ≤ |moment functional| + (n/4d)·E[(W′−W)⁴]`
    pub variance_chain_holds: bool,
    pub stats: ExchangeablePairStats,
    pub components: ComponentStats,
}

/// Coefficient of `√(C_d·D·ρ²)` in the bound.
pub fn rho_coefficient(nu: f64, d: usize) -> f64 {
    let m = centered_coefficient(nu);
    ((2.0 * 3f64.sqrt() + 4.0 * nu.sqrt()) * m + 4.0 * nu.sqrt()) / (3.0 * (d as f64).sqrt())
}

/// Coefficient of `√|moment functional|` in the bound.
pub fn moment_coefficient(nu: f64) -> f64 {
    centered_coefficient(nu) / 3f64.sqrt()
}

/// The two-term bound on `d₂(W, Z_ν)` together with the exact plug-in value.
pub fn dejong_bound(
    k: &UStatKernel,
    s: &DiscreteProductSpace,
    d: usize,
    nu: f64,
    policy: CdPolicy,
) -> Result<DeJongBound> {
    check_common(d, nu, s)?;
    if policy == CdPolicy::Require {
        return Err(Error::Config("C_d is required but was not supplied".into()));
    }
    let model = ExactModel::new(k, s, d)?;
    bound_from_model(&model, nu, policy)
}

fn bound_from_model(model: &ExactModel, nu: f64, policy: CdPolicy) -> Result<DeJongBound> {
    let d = model.d;
    let stats = model.pair_stats(nu)?;
    let comp = component_stats(&model.decomposition, d)?;
    let discrepancy = moment_functional(stats.m3, stats.m4, nu).abs();
    let moment_term = moment_coefficient(nu) * discrepancy.sqrt();
    let coef = rho_coefficient(nu, d);
    let quad_sum = model.quad_sum();
    let sigma_quad_sum = model.sigma_quad_sum();
    let (surrogate, without_d) = match policy {
        CdPolicy::Exact => (quad_sum, sigma_quad_sum),
        CdPolicy::Given(c) => (c * comp.big_d * comp.rho2, c * comp.rho2),
        CdPolicy::Require => return Err(Error::Config("C_d is required but was not supplied".into())),
    };
    let rho_term = coef * surrogate.sqrt();
    let rho_term_without_d = coef * without_d.sqrt();
    let exact_variant_total = plugin_bound(&stats, nu, 1.0, 1.0)?;
    let var_s = stats.var_s.unwrap_or(f64::NAN);
    let n = stats.n as f64;
    let chain_rhs = discrepancy + n / (4.0 * d as f64) * stats.e_dw4;
    Ok(DeJongBound {
        moment_term,
        rho_term,
        total: moment_term + rho_term,
        exact_variant_total,
        policy,
        surrogate,
        rho_term_without_d,
        total_without_d: moment_term + rho_term_without_d,
        moment_discrepancy: discrepancy,
        rho2: comp.rho2,
        big_d: comp.big_d,
        quad_sum,
        sigma_quad_sum,
        variance_chain_holds: 3.0 * var_s <= chain_rhs * (1.0 + 1e-12) + 1e-14,
        stats,
        components: comp,
    })
}

/// Built-in kernel families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// `c·Σ_{i<j} xᵢxⱼ` over Rademacher variables, `c = √(4ν/(n(n−1)))`.
    RademacherQuadratic,
    /// `c·Σ_{|J|=d} a_J Π_{j∈J} xⱼ` over Rademacher variables with seeded
    /// coefficients `a_J ~ U(−1, 1)`.
    Multilinear { d: usize },
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "rademacher-quadratic" {
            return Ok(Self::RademacherQuadratic);
        }
        if let Some(d) = s.strip_prefix("multilinear-d") {
            if let Ok(d) = d.parse::<usize>() {
                if d >= 1 {
                    return Ok(Self::Multilinear { d });
                }
            }
        }
        Err(Error::Config(format!(
            "unknown family '{s}' (expected 'rademacher-quadratic' or 'multilinear-d<k>')"
        )))
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::RademacherQuadratic => write!(f, "rademacher-quadratic"),
            Self::Multilinear { d } => write!(f, "multilinear-d{d}"),
        }
    }
}

/// Closed-form component statistics, when the family has them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosedForm {
    pub rho2: f64,
    pub big_d: f64,
    pub quad_sum: f64,
}

pub struct FamilyInstance {
    pub space: DiscreteProductSpace,
    pub kernel: UStatKernel,
    pub d: usize,
    pub closed_form: Option<ClosedForm>,
}

fn rademacher_sign(i: usize) -> f64 {
    if i == 0 {
        -1.0
    } else {
        1.0
    }
}

/// Member `n` of a family, normalized to `E[W²] = 2ν`.
pub fn family_instance(family: Family, n: usize, nu: f64, seed: u64) -> Result<FamilyInstance> {
    CenteredGammaParams::new(nu)?;
    let space = DiscreteProductSpace::iid(DiscreteFactor::rademacher(), n)?;
    match family {
        Family::RademacherQuadratic => {
            if n < 2 {
                return Err(Error::Config("the quadratic family needs n >= 2".into()));
            }
            let nf = n as f64;
            let c = (4.0 * nu / (nf * (nf - 1.0))).sqrt();
            // Σ_{i<j} xᵢxⱼ = ((Σx)² − n)/2 for signs
            let kernel = UStatKernel::new(family.to_string(), move |idx: &[usize]| {
                let s: f64 = idx.iter().map(|&i| rademacher_sign(i)).sum();
                0.5 * c * (s * s - nf)
            })
            .with_order(2);
            let m = nf - 1.0;
            Ok(FamilyInstance {
                space,
                kernel,
                d: 2,
                closed_form: Some(ClosedForm {
                    rho2: m * c * c,
                    big_d: 1.0,
                    quad_sum: nf * c.powi(4) * (3.0 * m * m - 2.0 * m),
                }),
            })
        }
        Family::Multilinear { d } => {
            if d > n {
                return Err(Error::Config(format!("order {d} exceeds n = {n}")));
            }
            let masks: Vec<u64> = masks_up_to(n, d)
                .into_iter()
                .filter(|m| m.count_ones() as usize == d)
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = masks.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
            let total: f64 = a.iter().map(|v| v * v).sum();
            let c = (2.0 * nu / total).sqrt();
            let terms: Vec<(u64, f64)> = masks.into_iter().zip(a.into_iter().map(|v| c * v)).collect();
            let kernel = UStatKernel::new(family.to_string(), move |idx: &[usize]| {
                let bits: u64 = idx
                    .iter()
                    .enumerate()
                    .filter(|(_, &i)| i == 0)
                    .fold(0, |m, (j, _)| m | 1 << j);
                terms
                    .iter()
                    .map(|&(m, a)| if (m & bits).count_ones() % 2 == 1 { -a } else { a })
                    .sum()
            })
            .with_order(d);
            Ok(FamilyInstance {
                space,
                kernel,
                d,
                closed_form: None,
            })
        }
    }
}

/// A seeded degenerate kernel `c·Σ_{|J|=d} a_J Π_{j∈J} φⱼ(Xⱼ)`: random
/// factors with 2 or 3 atoms, centered atom values and `E[W²] = 2ν`.
pub fn seeded_degenerate_instance(seed: u64, n: usize, d: usize, nu: f64) -> Result<FamilyInstance> {
    CenteredGammaParams::new(nu)?;
    if d == 0 || d > n {
        return Err(Error::Config(format!("order {d} must lie in 1..={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut factors = Vec::with_capacity(n);
    let mut variances = Vec::with_capacity(n);
    for _ in 0..n {
        let m = rng.random_range(2..=3usize);
        let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|r| r / total).collect();
        let mut support: Vec<f64> = (0..m).map(|i| i as f64 + rng.random_range(0.0..0.9)).collect();
        let mean: f64 = support.iter().zip(&probs).map(|(v, p)| v * p).sum();
        support.iter_mut().for_each(|v| *v -= mean);
        variances.push(support.iter().zip(&probs).map(|(v, p)| p * v * v).sum::<f64>());
        factors.push(DiscreteFactor::new(support, probs)?);
    }
    let space = DiscreteProductSpace::new(factors)?;
    let masks: Vec<u64> = masks_up_to(n, d)
        .into_iter()
        .filter(|m| m.count_ones() as usize == d)
        .collect();
    let a: Vec<f64> = masks.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
    let second: f64 = masks
        .iter()
        .zip(&a)
        .map(|(&m, &a)| {
            a * a
                * crate::hoeffding::mask_coords(m)
                    .iter()
                    .map(|&j| variances[j])
                    .product::<f64>()
        })
        .sum();
    let c = (2.0 * nu / second).sqrt();
    let terms: Vec<(Vec<usize>, f64)> = masks
        .into_iter()
        .zip(a)
        .map(|(m, a)| (crate::hoeffding::mask_coords(m), c * a))
        .collect();
    let supports: Vec<Vec<f64>> = space.factors.iter().map(|f| f.support.clone()).collect();
    let kernel = UStatKernel::new(format!("degenerate-{seed}"), move |idx: &[usize]| {
        terms
            .iter()
            .map(|(coords, a)| a * coords.iter().map(|&j| supports[j][idx[j]]).product::<f64>())
            .sum()
    })
    .with_order(d);
    Ok(FamilyInstance {
        space,
        kernel,
        d,
        closed_form: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoRow {
    pub n: usize,
    pub mode: String,
    pub moment_discrepancy: f64,
    pub rho2: Option<f64>,
    pub big_d: Option<f64>,
    pub bound: Option<f64>,
    pub bound_without_d: Option<f64>,
    pub exact_variant: f64,
    pub d2_empirical: f64,
    pub d2_argmax: String,
    pub d1_empirical: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoTable {
    pub family: Family,
    pub nu: f64,
    pub seed: u64,
    pub rows: Vec<DemoRow>,
    /// Rows that fell back to Monte Carlo.
    pub warnings: Vec<String>,
}

/// CSV header of [`DemoTable::to_csv`].
pub const DEMO_COLUMNS: &str =
    "n,mode,moment_discrepancy,rho2,D,bound,bound_without_D,exact_variant,d2_empirical,d2_argmax,d1_empirical";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.12e}")).unwrap_or_default()
}

impl DemoTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(DEMO_COLUMNS);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.12e},{},{},{},{},{:.12e},{:.12e},{},{:.12e}",
                r.n,
                r.mode,
                r.moment_discrepancy,
                opt(r.rho2),
                opt(r.big_d),
                opt(r.bound),
                opt(r.bound_without_d),
                r.exact_variant,
                r.d2_empirical,
                r.d2_argmax,
                r.d1_empirical
            );
        }
        out
    }

    /// Least-squares slope of `log(exact_variant)` against `log n`.
    pub fn exact_variant_slope(&self) -> f64 {
        let pts: Vec<(f64, f64)> = self
            .rows
            .iter()
            .map(|r| ((r.n as f64).ln(), r.exact_variant.ln()))
            .collect();
        log_log_slope(&pts)
    }
}

pub fn log_log_slope(pts: &[(f64, f64)]) -> f64 {
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// One convergence-table row per `n`: exact enumeration when the space fits
/// under the cap, Monte Carlo otherwise.
pub fn demo_sequence(family: Family, n_list: &[usize], nu: f64, seed: u64) -> Result<DemoTable> {
    let c = CenteredGammaParams::new(nu)?;
    let dict = d2_reference_dictionary(nu);
    let mut rows = Vec::with_capacity(n_list.len());
    let mut warnings = Vec::new();
    for &n in n_list {
        let inst = family_instance(family, n, nu, seed)?;
        match inst.space.checked_size() {
            Ok(_) => {
                let model = ExactModel::new(&inst.kernel, &inst.space, inst.d)?;
                let b = bound_from_model(&model, nu, CdPolicy::Exact)?;
                let (d2, arg) =
                    d2_dictionary_weighted(&model.values, &model.point_probs, D2Target::Centered(c), &dict)?;
                let d1 = wasserstein1_vs_centered_gamma(&model.values, &model.point_probs, nu)?;
                rows.push(DemoRow {
                    n,
                    mode: "exact".into(),
                    moment_discrepancy: b.moment_discrepancy,
                    rho2: Some(b.rho2),
                    big_d: Some(b.big_d),
                    bound: Some(b.total),
                    bound_without_d: Some(b.total_without_d),
                    exact_variant: b.exact_variant_total,
                    d2_empirical: d2.value,
                    d2_argmax: arg,
                    d1_empirical: d1,
                });
            }
            Err(Error::Resource { required, cap }) => {
                warnings.push(format!(
                    "n = {n}: {required} points exceed the exact cap {cap}; using {DEMO_MC_SAMPLES} Monte Carlo samples"
                ));
                let row_seed = seed ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                let stats = mc_pair_stats(&inst.kernel, &inst.space, inst.d, nu, row_seed, DEMO_MC_SAMPLES)?;
                let discrepancy = moment_functional(stats.m3, stats.m4, nu).abs();
                let moment_term = moment_coefficient(nu) * discrepancy.sqrt();
                let coef = rho_coefficient(nu, inst.d);
                let samples: Vec<f64> = (0..DEMO_MC_SAMPLES)
                    .into_par_iter()
                    .map(|i| {
                        inst.kernel
                            .eval(&draw_point(&inst.space, &mut sample_rng(row_seed, i as u64)))
                    })
                    .collect();
                let weights = vec![1.0 / samples.len() as f64; samples.len()];
                let (d2, arg) = d2_dictionary_weighted(&samples, &weights, D2Target::Centered(c), &dict)?;
                let d1 = wasserstein1_vs_centered_gamma(&samples, &weights, nu)?;
                let cf = inst.closed_form;
                rows.push(DemoRow {
                    n,
                    mode: "mc".into(),
                    moment_discrepancy: discrepancy,
                    rho2: cf.map(|c| c.rho2),
                    big_d: cf.map(|c| c.big_d),
                    bound: cf.map(|c| moment_term + coef * c.quad_sum.sqrt()),
                    bound_without_d: cf.map(|c| moment_term + coef * c.quad_sum.sqrt()),
                    exact_variant: plugin_bound(&stats, nu, 1.0, 1.0)?,
                    d2_empirical: d2.value,
                    d2_argmax: arg,
                    d1_empirical: d1,
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(DemoTable {
        family,
        nu,
        seed,
        rows,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn x1x2() -> (UStatKernel, DiscreteProductSpace) {
        let s = DiscreteProductSpace::iid(DiscreteFactor::rademacher(), 2).unwrap();
        let k = UStatKernel::on_values("x1x2", &s, |x| x[0] * x[1]);
        (k, s)
    }

    #[test]
    fn rademacher_pair_example() {
        let (k, s) = x1x2();
        let st = build_pair_stats(&k, &s, 2, 0.5, PairMode::Exact).unwrap();
        assert_relative_eq!(st.e_dw2, 2.0, epsilon = 1e-15);
        assert_eq!(st.lambda_pair, 1.0);
        assert!(st.r_zero);
        assert_eq!(st.e_dw3, 0.0);
        // W′ − W ∈ {0, ±2}: E|ΔW|³ = 8·½, E ΔW⁴ = 16·½
        assert_relative_eq!(st.e_abs_dw3.unwrap(), 4.0);
        assert_relative_eq!(st.e_dw4, 8.0);
        let r = moment_identities_check(&st);
        assert!(r.pass, "{r:?}");
        assert_eq!(r.error3, 0.0);
        assert_eq!(r.error4, 0.0);
    }

    #[test]
    fn declared_nu_must_match() {
        let (k, s) = x1x2();
        assert!(matches!(
            build_pair_stats(&k, &s, 2, 1.0, PairMode::Exact),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn non_degenerate_rejected() {
        let s = DiscreteProductSpace::iid(DiscreteFactor::rademacher(), 3).unwrap();
        let k = UStatKernel::on_values("mixed", &s, |x| {
            (x[0] * x[1] + x[2]) / 3f64.sqrt() * 0.5f64.sqrt() * 2f64.sqrt()
        });
        assert!(matches!(
            build_pair_stats(&k, &s, 2, 1.0, PairMode::Exact),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn mc_needs_enough_samples() {
        let (k, s) = x1x2();
        let mode = PairMode::Mc { seed: 1, samples: 999 };
        assert!(matches!(
            build_pair_stats(&k, &s, 2, 0.5, mode),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn mc_agrees_with_exact() {
        let inst = family_instance(Family::RademacherQuadratic, 8, 1.0, 0).unwrap();
        let ex = build_pair_stats(&inst.kernel, &inst.space, 2, 1.0, PairMode::Exact).unwrap();
        let mc = build_pair_stats(
            &inst.kernel,
            &inst.space,
            2,
            1.0,
            PairMode::Mc {
                seed: 3,
                samples: 50_000,
            },
        )
        .unwrap();
        let se = mc.stderr.unwrap();
        assert!((mc.e_dw2 - ex.e_dw2).abs() < 5.0 * se.e_dw2 + 1e-12);
        assert!((mc.m4 - ex.m4).abs() < 5.0 * se.m4);
        assert!((mc.var_s.unwrap() - ex.var_s.unwrap()).abs() < 5.0 * se.var_s);
        assert!(mc.r_zero);
    }

    #[test]
    fn quadratic_family_closed_forms() {
        for &n in &[4usize, 6, 9] {
            let inst = family_instance(Family::RademacherQuadratic, n, 1.0, 0).unwrap();
            let b = dejong_bound(&inst.kernel, &inst.space, 2, 1.0, CdPolicy::Exact).unwrap();
            let cf = inst.closed_form.unwrap();
            assert_relative_eq!(b.rho2, 4.0 / n as f64, max_relative = 1e-12);
            assert_relative_eq!(b.rho2, cf.rho2, max_relative = 1e-12);
            assert_relative_eq!(b.big_d, 1.0, max_relative = 1e-12);
            assert_relative_eq!(b.quad_sum, cf.quad_sum, max_relative = 1e-10);
            assert_relative_eq!(b.stats.e_dw2, 4.0 * 2.0 / n as f64, max_relative = 1e-12);
            assert!(b.variance_chain_holds);
            assert_relative_eq!(b.total, b.moment_term + b.rho_term, max_relative = 1e-15);
        }
    }

    #[test]
    fn s_decomposition_matches_direct() {
        let inst = family_instance(Family::RademacherQuadratic, 6, 1.0, 0).unwrap();
        let sd = hoeffding_s_decomposition(&inst.kernel, &inst.space, 2, 1.0).unwrap();
        let st = build_pair_stats(&inst.kernel, &inst.space, 2, 1.0, PairMode::Exact).unwrap();
        assert_relative_eq!(sd.u_empty, 2.0, epsilon = 1e-12);
        assert!((sd.var_s - st.var_s.unwrap()).abs() < 1e-10);
        assert!((sd.e_w3_components - sd.e_w3_direct).abs() < 1e-12);
        assert!((sd.var_s2 - sd.var_s2_identity).abs() < 1e-10);
        assert!(st.e_s.abs() < 1e-12);
    }

    #[test]
    fn linear_statistic_s2_identity() {
        let n = 5;
        let nu = 0.8;
        let s = DiscreteProductSpace::iid(DiscreteFactor::rademacher(), n).unwrap();
        let c = (2.0 * nu / n as f64).sqrt();
        let k = UStatKernel::on_values("sum", &s, move |x| c * x.iter().sum::<f64>());
        let sd = hoeffding_s_decomposition(&k, &s, 1, nu).unwrap();
        assert!((sd.var_s2 - sd.var_s2_identity).abs() < 1e-12);
        let st = build_pair_stats(&k, &s, 1, nu, PairMode::Exact).unwrap();
        assert!((sd.var_s - st.var_s.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn policies() {
        let inst = family_instance(Family::RademacherQuadratic, 6, 1.0, 0).unwrap();
        assert!(matches!(
            dejong_bound(&inst.kernel, &inst.space, 2, 1.0, CdPolicy::Require),
            Err(Error::Config(_))
        ));
        let g = dejong_bound(&inst.kernel, &inst.space, 2, 1.0, CdPolicy::Given(3.0)).unwrap();
        assert_relative_eq!(g.surrogate, 3.0 * g.rho2 * g.big_d, max_relative = 1e-14);
        assert_eq!("exact".parse::<CdPolicy>().unwrap(), CdPolicy::Exact);
        assert_eq!("2.5".parse::<CdPolicy>().unwrap(), CdPolicy::Given(2.5));
        assert!("-1".parse::<CdPolicy>().is_err());
    }

    #[test]
    fn seeded_kernels_are_degenerate() {
        for seed in 0..5 {
            let inst = seeded_degenerate_instance(seed, 5, 2, 1.3).unwrap();
            let st = build_pair_stats(&inst.kernel, &inst.space, 2, 1.3, PairMode::Exact).unwrap();
            assert!(st.r_zero, "seed {seed}: {}", st.regression_error);
            assert!(moment_identities_check(&st).pass);
            assert!(st.exchangeability_error < 1e-14);
        }
    }

    #[test]
    fn multilinear_family() {
        let inst = family_instance(Family::Multilinear { d: 3 }, 6, 2.0, 11).unwrap();
        let st = build_pair_stats(&inst.kernel, &inst.space, 3, 2.0, PairMode::Exact).unwrap();
        assert_relative_eq!(st.m2, 4.0, max_relative = 1e-12);
        assert_relative_eq!(st.e_dw2, 4.0 * 3.0 * 2.0 / 6.0, max_relative = 1e-12);
        assert_eq!(
            "multilinear-d3".parse::<Family>().unwrap(),
            Family::Multilinear { d: 3 }
        );
    }

    #[test]
    fn moment_term_vanishes_for_gamma_moments() {
        let nu = 3.0;
        let m3 = 8.0 * nu;
        let m4 = 12.0 * m3 + 12.0 * nu * nu - 48.0 * nu;
        assert_eq!(moment_coefficient(nu) * moment_functional(m3, m4, nu).abs().sqrt(), 0.0);
    }
}
