//! Probability distances and Gaussian mollification.
//!
//! `d_k(X, Y) = sup_{h ∈ 𝓗_k} |E h(X) − E h(Y)|` where `𝓗_k` holds the
//! functions with `‖h^{(l)}‖ ≤ 1` for `l = 1..=k`. `d₁` is the 1-Wasserstein
//! distance and is computed exactly for discrete laws. `d₂` is only ever
//! reported as a lower bound: the maximum discrepancy over a finite dictionary
//! of members of `𝓗₂`. It must not be read as the true `d₂`.

use serde::{Deserialize, Serialize};

use crate::gamma_dist::centered_gamma_cdf;
use crate::quad::{gauss_hermite, integrate, Tolerance};
use crate::special::{gamma_p, hermite_monic, normal_cdf, normal_pdf};
use crate::stein::expected_h_centered;
use crate::testfn::{dictionary, TestFunction};
use crate::{CenteredGammaParams, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    Exact,
    LowerBound,
    McEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceEstimate {
    pub name: String,
    pub value: f64,
    pub kind: DistanceKind,
    pub stderr: Option<f64>,
}

impl DistanceEstimate {
    fn new(name: &str, value: f64, kind: DistanceKind) -> Self {
        Self {
            name: name.into(),
            value,
            kind,
            stderr: None,
        }
    }
}

/// Sorted atoms with merged probabilities.
fn normalize_law(atoms: &[f64], probs: &[f64]) -> Result<Vec<(f64, f64)>> {
    if atoms.is_empty() {
        return Err(Error::Contract("empty sample".into()));
    }
    if atoms.len() != probs.len() {
        return Err(Error::Contract("atoms and probabilities differ in length".into()));
    }
    if atoms.iter().chain(probs).any(|v| !v.is_finite()) || probs.iter().any(|&p| p < 0.0) {
        return Err(Error::Domain(
            "atoms and probabilities must be finite, probabilities nonnegative".into(),
        ));
    }
    let mut pairs: Vec<(f64, f64)> = atoms.iter().copied().zip(probs.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(pairs.len());
    for (x, p) in pairs {
        match out.last_mut() {
            Some(last) if last.0 == x => last.1 += p,
            _ => out.push((x, p)),
        }
    }
    Ok(out)
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Exact `d₁` between two discrete laws, `∫|F_a − F_b|`.
pub fn wasserstein1_discrete(atoms_a: &[f64], probs_a: &[f64], atoms_b: &[f64], probs_b: &[f64]) -> Result<f64> {
    let a = normalize_law(atoms_a, probs_a)?;
    let b = normalize_law(atoms_b, probs_b)?;
    let (mut i, mut j) = (0, 0);
    let (mut fa, mut fb) = (0.0f64, 0.0f64);
    let mut prev: Option<f64> = None;
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(p), Some(q)) => p.0.min(q.0),
            (Some(p), None) => p.0,
            (None, Some(q)) => q.0,
            (None, None) => unreachable!(),
        };
        if let Some(p) = prev {
            total += (fa - fb).abs() * (x - p);
        }
        while i < a.len() && a[i].0 == x {
            fa += a[i].1;
            i += 1;
        }
        while j < b.len() && b[j].0 == x {
            fb += b[j].1;
            j += 1;
        }
        prev = Some(x);
    }
    Ok(total)
}

/// `d₁` between the empirical laws of two samples. Unequal sizes are handled
/// exactly through the distribution functions.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<DistanceEstimate> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("wasserstein1 needs non-empty samples".into()));
    }
    let value = if a.len() == b.len() {
        let mut x = a.to_vec();
        let mut y = b.to_vec();
        x.sort_by(f64::total_cmp);
        y.sort_by(f64::total_cmp);
        crate::stats::sum(x.iter().zip(&y).map(|(p, q)| (p - q).abs())) / x.len() as f64
    } else {
        wasserstein1_discrete(a, &uniform(a.len()), b, &uniform(b.len()))?
    };
    Ok(DistanceEstimate::new("d1", value, DistanceKind::Exact))
}

/// `∫_{−ν}^{w} F_Z(t) dt` for `Z ~ Γ̄(ν)`.
fn centered_cdf_integral(w: f64, nu: f64) -> f64 {
    if w <= -nu {
        return 0.0;
    }
    let a = 0.5 * nu;
    let u = 0.5 * (w + nu);
    2.0 * (u * gamma_p(a, u) - a * gamma_p(a + 1.0, u))
}

/// Exact `d₁` between a discrete law and `Γ̄(ν)`.
pub fn wasserstein1_vs_centered_gamma(atoms: &[f64], probs: &[f64], nu: f64) -> Result<f64> {
    let c = CenteredGammaParams::new(nu)?;
    let law = normalize_law(atoms, probs)?;
    let g = |w: f64| centered_cdf_integral(w, nu);
    let cdf = |t: f64| centered_gamma_cdf(t, c).unwrap_or(0.0);
    // ∫_a^b |level − F_Z|, splitting where F_Z crosses the level
    let piece = |lo: f64, hi: f64, level: f64| -> f64 {
        let (flo, fhi) = (cdf(lo), cdf(hi));
        let below = |l: f64, h: f64| level * (h - l) - (g(h) - g(l));
        let above = |l: f64, h: f64| (g(h) - g(l)) - level * (h - l);
        if fhi <= level {
            return below(lo, hi);
        }
        if flo >= level {
            return above(lo, hi);
        }
        let (mut l, mut h) = (lo, hi);
        for _ in 0..200 {
            let m = 0.5 * (l + h);
            if m <= l || m >= h {
                break;
            }
            if cdf(m) < level {
                l = m;
            } else {
                h = m;
            }
        }
        let t = 0.5 * (l + h);
        below(lo, t) + above(t, hi)
    };
    let mut total = g(law[0].0);
    let mut level = 0.0;
    for w in law.windows(2) {
        level += w[0].1;
        total += piece(w[0].0, w[1].0, level);
    }
    let last = law[law.len() - 1].0;
    total += g(last) - last;
    Ok(total.max(0.0))
}

/// `Φ(ρ(t − x))/ρ`: a smoothed indicator of `x ≤ t` scaled into `𝓗₂` for
/// `ρ ≤ 1/φ(1)`.
pub fn smooth_indicator(t: f64, rho: f64) -> TestFunction {
    TestFunction::new(format!("ind_{t}_{rho}"), move |x| normal_cdf(rho * (t - x)) / rho)
        .with_d1(move |x| -normal_pdf(rho * (t - x)))
        .with_lip1(normal_pdf(0.0))
        .with_lip2(rho * normal_pdf(1.0))
}

/// Scales of the smoothed indicators in [`d2_reference_dictionary`].
pub const INDICATOR_SCALES: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Thresholds of the smoothed indicators, in units of the target standard
/// deviation.
pub const INDICATOR_THRESHOLDS: [f64; 3] = [-1.0, 0.0, 1.0];

/// The members of the certification dictionary lying in `𝓗₂`, plus smoothed
/// indicators at four scales and three thresholds placed for `Γ̄(ν)`.
pub fn d2_reference_dictionary(nu: f64) -> Vec<TestFunction> {
    let sd = (2.0 * nu).sqrt();
    let mut dict: Vec<TestFunction> = dictionary().into_iter().filter(in_h2).collect();
    for &rho in &INDICATOR_SCALES {
        for &t in &INDICATOR_THRESHOLDS {
            dict.push(smooth_indicator(t * sd, rho));
        }
    }
    dict
}

fn in_h2(h: &TestFunction) -> bool {
    let ok = |v: Option<f64>| v.is_some_and(|v| v <= 1.0 + 1e-12);
    ok(h.lip1) && ok(h.lip2)
}

/// What a sample is compared with in [`d2_dictionary`].
#[derive(Debug, Clone, Copy)]
pub enum D2Target<'a> {
    Centered(CenteredGammaParams),
    Samples(&'a [f64]),
}

/// Dictionary lower bound for `d₂` between a weighted discrete law and a
/// target. Returns the bound and the name of the maximizing member.
pub fn d2_dictionary_weighted(
    atoms: &[f64],
    probs: &[f64],
    target: D2Target<'_>,
    dict: &[TestFunction],
) -> Result<(DistanceEstimate, String)> {
    if atoms.is_empty() {
        return Err(Error::Contract("d2_dictionary needs a non-empty sample".into()));
    }
    if dict.is_empty() {
        return Err(Error::Contract("empty dictionary".into()));
    }
    if let Some(h) = dict.iter().find(|h| !in_h2(h)) {
        return Err(Error::Contract(format!(
            "dictionary member '{}' is not certified to lie in the unit ball of the second class",
            h.name
        )));
    }
    let mut best = (0.0f64, dict[0].name.clone());
    for h in dict {
        let lhs = crate::stats::sum(atoms.iter().zip(probs).map(|(&x, &p)| p * h.eval(x)));
        let rhs = match target {
            D2Target::Centered(c) => expected_h_centered(h, c)?,
            D2Target::Samples(b) => {
                if b.is_empty() {
                    return Err(Error::Contract("empty comparison sample".into()));
                }
                crate::stats::mean(&b.iter().map(|&x| h.eval(x)).collect::<Vec<_>>())
            }
        };
        let gap = (lhs - rhs).abs();
        if gap > best.0 {
            best = (gap, h.name.clone());
        }
    }
    Ok((
        DistanceEstimate::new("d2_dictionary", best.0, DistanceKind::LowerBound),
        best.1,
    ))
}

/// Dictionary lower bound for `d₂` between the empirical law of `samples` and
/// a target.
pub fn d2_dictionary(samples: &[f64], target: D2Target<'_>, dict: &[TestFunction]) -> Result<DistanceEstimate> {
    Ok(d2_dictionary_weighted(samples, &uniform(samples.len().max(1)), target, dict)?.0)
}

/// `d₁ ≤ (4/√π)·√d₂` for `d₂ ≤ 1`.
pub fn smoothing_bound(d2_value: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&d2_value) {
        return Err(Error::Contract(format!(
            "the smoothing bound needs d2 in [0, 1], got {d2_value}"
        )));
    }
    Ok(4.0 / std::f64::consts::PI.sqrt() * d2_value.sqrt())
}

/// `C_m = ∫|H_{m−1}|φ`, monic Hermite `H`, for `1 ≤ m ≤ 8`.
pub fn cm_constant(m: usize) -> Result<f64> {
    if !(1..=8).contains(&m) {
        return Err(Error::Domain(format!("C_m is tabulated for 1 <= m <= 8, got {m}")));
    }
    let k = m - 1;
    // roots of H_k by bracketing on a fine grid
    let mut roots = Vec::new();
    let step = 1e-3;
    let mut x = -6.0;
    while x < 6.0 {
        let (a, b) = (hermite_monic(k, x), hermite_monic(k, x + step));
        if a == 0.0 {
            roots.push(x);
        } else if a * b < 0.0 {
            let (mut lo, mut hi) = (x, x + step);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if hermite_monic(k, lo) * hermite_monic(k, mid) <= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            roots.push(0.5 * (lo + hi));
        }
        x += step;
    }
    Ok(integrate(
        |x| hermite_monic(k, x).abs() * normal_pdf(x),
        -40.0,
        40.0,
        &roots,
        Tolerance::new(1e-14, 1e-13),
    )?
    .value)
}

/// `h_ρ = h ∗ k_ρ` with `k_ρ(x) = ρφ(ρx)`, i.e. `h_ρ(x) = E[h(x + N/ρ)]`.
///
/// Smooth `h` uses the 61-point Gauss–Hermite rule; functions with kinks use
/// adaptive quadrature split at the kinks. `‖h_ρ′‖ ≤ ‖h′‖` and
/// `‖h_ρ″‖ ≤ C₂ρ‖h′‖`.
pub fn mollify(h: &TestFunction, rho: f64) -> Result<TestFunction> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::Domain(format!("rho must be positive, got {rho}")));
    }
    let lip1 = h
        .lip1
        .ok_or_else(|| Error::Contract(format!("'{}' has no declared Lipschitz constant", h.name)))?;
    let smooth = h.kinks.is_empty();
    let base = h.clone();
    let conv = move |x: f64, g: &dyn Fn(f64) -> f64| -> f64 {
        if smooth {
            gauss_hermite().expect(|z| g(x + z / rho))
        } else {
            let bp: Vec<f64> = base.kinks.iter().map(|k| rho * (k - x)).collect();
            integrate(
                |z| g(x + z / rho) * normal_pdf(z),
                -40.0,
                40.0,
                &bp,
                Tolerance::new(1e-14, 1e-13),
            )
            .map(|r| r.value)
            .unwrap_or(f64::NAN)
        }
    };
    let conv = std::sync::Arc::new(conv);
    let (c1, c2) = (conv.clone(), conv);
    let (h1, h2) = (h.clone(), h.clone());
    // h_ρ′ = h′ ∗ k_ρ; the one-sided derivative is enough under the integral
    let out = TestFunction::new(format!("{}_moll{rho}", h.name), move |x| c1(x, &|y| h1.eval(y)))
        .with_d1(move |x| c2(x, &|y| h2.derivative(y, 1.0)))
        .with_lip1(lip1)
        .with_lip2((2.0 / std::f64::consts::PI).sqrt() * rho * lip1);
    Ok(out)
}

/// `sup_t |F_n(t) − F(t)|` for the empirical law of `samples`.
pub fn kolmogorov(samples: &[f64], target_cdf: impl Fn(f64) -> f64) -> Result<DistanceEstimate> {
    if samples.is_empty() {
        return Err(Error::Contract("kolmogorov needs a non-empty sample".into()));
    }
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let mut d: f64 = 0.0;
    let mut i = 0;
    while i < x.len() {
        let mut j = i;
        while j < x.len() && x[j] == x[i] {
            j += 1;
        }
        let f = target_cdf(x[i]);
        d = d.max((j as f64 / n - f).abs()).max((f - i as f64 / n).abs());
        i = j;
    }
    Ok(DistanceEstimate::new("kolmogorov", d, DistanceKind::Exact))
}
