//! Numerical quadrature.
//!
//! [`integrate`] is a globally adaptive 21-point Gauss–Kronrod integrator over
//! a finite interval with optional interior breakpoints (kinks of the
//! integrand). [`gauss_hermite`] returns a fixed rule for expectations
//! against the standard normal law.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::sync::OnceLock;

use crate::{Error, Result};

const XGK: [f64; 11] = [
    0.995_657_163_025_808_1,
    0.973_906_528_517_171_7,
    0.930_157_491_355_708_2,
    0.865_063_366_688_984_5,
    0.780_817_726_586_416_9,
    0.679_409_568_299_024_4,
    0.562_757_134_668_604_7,
    0.433_395_394_129_247_2,
    0.294_392_862_701_460_2,
    0.148_874_338_981_631_2,
    0.0,
];

const WGK: [f64; 11] = [
    0.011_694_638_867_371_874,
    0.032_558_162_307_964_725,
    0.054_755_896_574_351_995,
    0.075_039_674_810_919_96,
    0.093_125_454_583_697_6,
    0.109_387_158_802_297_64,
    0.123_491_976_262_065_84,
    0.134_709_217_311_473_34,
    0.142_775_938_577_060_09,
    0.147_739_104_901_338_49,
    0.149_445_554_002_916_9,
];

// Gauss weights for XGK[1], XGK[3], ..., XGK[9].
const WG: [f64; 5] = [
    0.066_671_344_308_688_14,
    0.149_451_349_150_580_6,
    0.219_086_362_515_982_04,
    0.269_266_719_309_996_35,
    0.295_524_224_714_752_87,
];

#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    pub abs: f64,
    pub rel: f64,
    pub max_intervals: usize,
}

impl Tolerance {
    pub const fn new(abs: f64, rel: f64) -> Self {
        Self {
            abs,
            rel,
            max_intervals: 4000,
        }
    }
}

impl Default for Tolerance {
    fn default() -> Self {
        Self::new(1e-13, 1e-12)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QuadResult {
    pub value: f64,
    pub abs_error: f64,
    pub intervals: usize,
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
    abs_integral: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// One 21-point Gauss–Kronrod panel with the QUADPACK error heuristic.
fn kronrod21<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Segment {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let f_center = f(center);
    let mut res_k = f_center * WGK[10];
    let mut res_g = 0.0;
    let mut res_abs = res_k.abs();
    let mut fv1 = [0.0; 10];
    let mut fv2 = [0.0; 10];
    for j in 0..10 {
        let dx = half * XGK[j];
        let f1 = f(center - dx);
        let f2 = f(center + dx);
        fv1[j] = f1;
        fv2[j] = f2;
        res_k += WGK[j] * (f1 + f2);
        res_abs += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            res_g += WG[j / 2] * (f1 + f2);
        }
    }
    let mean = res_k * 0.5;
    let mut res_asc = WGK[10] * (f_center - mean).abs();
    for j in 0..10 {
        res_asc += WGK[j] * ((fv1[j] - mean).abs() + (fv2[j] - mean).abs());
    }
    let scale = half.abs();
    let value = res_k * half;
    res_abs *= scale;
    res_asc *= scale;
    let mut err = ((res_k - res_g) * half).abs();
    if res_asc != 0.0 && err != 0.0 {
        err = res_asc * (200.0 * err / res_asc).powf(1.5).min(1.0);
    }
    if res_abs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        err = err.max(50.0 * f64::EPSILON * res_abs);
    }
    if !value.is_finite() {
        err = f64::INFINITY;
    }
    Segment {
        a,
        b,
        value,
        error: err,
        abs_integral: res_abs,
    }
}

/// Integrate `f` over `[a, b]`.
///
/// `breakpoints` outside `(a, b)` are ignored. Bisection stops once the summed
/// error estimate is below `max(tol.abs, tol.rel·|I|)`, or below the rounding
/// floor `100ε·∫|f|`; if that cannot be
/// reached within `tol.max_intervals` panels an [`Error::Accuracy`] carrying
/// the achieved error is returned.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, breakpoints: &[f64], tol: Tolerance) -> Result<QuadResult> {
    if a == b {
        return Ok(QuadResult {
            value: 0.0,
            abs_error: 0.0,
            intervals: 0,
        });
    }
    if b < a {
        let r = integrate(f, b, a, breakpoints, tol)?;
        return Ok(QuadResult { value: -r.value, ..r });
    }
    let mut cuts: Vec<f64> = breakpoints
        .iter()
        .copied()
        .filter(|&p| p > a && p < b && p.is_finite())
        .collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut nodes = Vec::with_capacity(cuts.len() + 2);
    nodes.push(a);
    nodes.extend(cuts);
    nodes.push(b);

    let mut heap = BinaryHeap::new();
    let mut frozen: Vec<Segment> = Vec::new();
    for w in nodes.windows(2) {
        heap.push(kronrod21(&f, w[0], w[1]));
    }
    loop {
        let (value, error, abs_integral) = heap.iter().chain(frozen.iter()).fold((0.0, 0.0, 0.0), |(v, e, m), s| {
            (v + s.value, e + s.error, m + s.abs_integral)
        });
        // Below this floor further bisection only reshuffles rounding error.
        let roundoff = 100.0 * f64::EPSILON * abs_integral;
        let target = tol.abs.max(tol.rel * value.abs()).max(roundoff);
        let count = heap.len() + frozen.len();
        if error <= target || heap.is_empty() {
            if !value.is_finite() {
                return Err(Error::Accuracy {
                    achieved: f64::INFINITY,
                    requested: target,
                    context: "non-finite integrand".into(),
                });
            }
            return Ok(QuadResult {
                value,
                abs_error: error,
                intervals: count,
            });
        }
        if count >= tol.max_intervals {
            return Err(Error::Accuracy {
                achieved: error,
                requested: target,
                context: format!("adaptive quadrature on [{a}, {b}] hit {count} panels"),
            });
        }
        let worst = heap.pop().expect("heap is non-empty");
        let mid = 0.5 * (worst.a + worst.b);
        let width = worst.b - worst.a;
        if width <= 64.0 * f64::EPSILON * worst.a.abs().max(worst.b.abs()).max(1e-300) {
            frozen.push(worst);
            continue;
        }
        heap.push(kronrod21(&f, worst.a, mid));
        heap.push(kronrod21(&f, mid, worst.b));
    }
}

/// Gauss–Hermite rule for `E[g(N)]`, `N ~ N(0, 1)`: `Σ wᵢ g(xᵢ)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Physicists' Gauss–Hermite nodes by Newton iteration, rescaled to the
    /// standard normal weight.
    pub fn new(n: usize) -> Self {
        let m = n.div_ceil(2);
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        let pim4 = std::f64::consts::PI.powf(-0.25);
        let nf = n as f64;
        let mut z = 0.0f64;
        for i in 0..m {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 1..=n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[n - 1 - i] = w[i];
        }
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let nodes = x.iter().map(|v| v * std::f64::consts::SQRT_2).collect();
        let weights = w.iter().map(|v| v / sqrt_pi).collect();
        Self { nodes, weights }
    }

    pub fn expect<F: Fn(f64) -> f64>(&self, g: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * g(x)).sum()
    }
}

/// The shared 61-point rule.
pub fn gauss_hermite() -> &'static GaussHermite {
    static RULE: OnceLock<GaussHermite> = OnceLock::new();
    RULE.get_or_init(|| GaussHermite::new(61))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn kronrod_handles_degree_31() {
        let p = |x: f64| 31.0 * x.powi(30) + 1.0;
        let r = integrate(p, 0.0, 1.0, &[], Tolerance::default()).unwrap();
        assert_relative_eq!(r.value, 2.0, epsilon = 1e-14);
        assert!(r.intervals <= 2);
    }

    #[test]
    fn handles_breakpoints_and_kinks() {
        let r = integrate(|x: f64| x.abs(), -1.0, 2.0, &[0.0], Tolerance::default()).unwrap();
        assert_relative_eq!(r.value, 2.5, epsilon = 1e-14);
    }

    #[test]
    fn endpoint_singularity() {
        // ∫_0^1 x^{-1/2} dx = 2
        let r = integrate(|x: f64| x.powf(-0.5), 0.0, 1.0, &[], Tolerance::new(1e-10, 1e-10)).unwrap();
        assert_relative_eq!(r.value, 2.0, epsilon = 1e-9);
    }

    #[test]
    fn reversed_limits_negate() {
        let r = integrate(|x: f64| x.exp(), 1.0, 0.0, &[], Tolerance::default()).unwrap();
        assert_relative_eq!(r.value, -(1f64.exp() - 1.0), epsilon = 1e-14);
    }

    #[test]
    fn failure_reports_achieved_tolerance() {
        let tol = Tolerance {
            abs: 1e-300,
            rel: 0.0,
            max_intervals: 3,
        };
        match integrate(|x: f64| (1.0 / x).sin(), 1e-3, 1.0, &[], tol) {
            Err(Error::Accuracy { achieved, .. }) => assert!(achieved > 0.0),
            other => panic!("expected accuracy error, got {other:?}"),
        }
    }

    #[test]
    fn gauss_hermite_normal_moments() {
        let gh = gauss_hermite();
        assert_relative_eq!(gh.expect(|_| 1.0), 1.0, epsilon = 1e-13);
        assert_relative_eq!(gh.expect(|x| x * x), 1.0, epsilon = 1e-13);
        assert_relative_eq!(gh.expect(|x| x.powi(4)), 3.0, epsilon = 1e-12);
        assert_relative_eq!(gh.expect(|x| x.powi(6)), 15.0, epsilon = 1e-11);
        // E[cos N] = e^{-1/2}
        assert_relative_eq!(gh.expect(f64::cos), (-0.5f64).exp(), epsilon = 1e-14);
    }
}
