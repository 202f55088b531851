//! Solutions of the Gamma Stein equations on the whole real line.
//!
//! For `X ~ Γ(r, λ)` the equation is
//!
//! ```text
//! x f'(x) + (r − λx) f(x) = h(x) − E[h(X)],
//! ```
//!
//! and for the centered law `Γ̄(ν)`
//!
//! ```text
//! 2(x + ν) f'(x) − x f(x) = h(x) − E[h(Z_ν)].
//! ```
//!
//! Both reduce to the unit-rate problem `y g' + (r − y) g = h₁ − E[h₁(X_r)]`:
//! for the Gamma target `h₁(y) = h(y/λ)` and `f(x) = g(λx)`; for the centered
//! target `r = ν/2`, `h₁(y) = h(2y − ν)` and `f(x) = ½ g((x + ν)/2)`.
//!
//! The unit-rate solution is evaluated by quadrature:
//!
//! | region | representation |
//! |--------|----------------|
//! | `0 < y ≤ r+1` | `(1/r)∫₀¹ h̃(y v^{1/r}) e^{y(1−v^{1/r})} dv` |
//! | `y > r+1` | `−(1/y)∫₀^∞ h̃(y+s) (1+s/y)^{r−1} e^{−s} ds` |
//! | `y = −u < 0` | `(1/r)∫₀¹ h̃(−u v^{1/r}) e^{−u(1−v^{1/r})} dv` |
//! | `y = 0` | `h̃(0)/r` |
//!
//! with `h̃ = h₁ − E[h₁(X_r)]`. The derivative away from 0 comes from the
//! equation itself; in the band `|y| ≤ 1e−6` it is `(h₁'(y) + g(0))/(r+1)`,
//! and at a jump of `h₁'` at 0 it is set to 0.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dejong::ExchangeablePairStats;
use crate::gamma_dist::{CenteredGammaParams, GammaParams};
use crate::quad::{integrate, Tolerance};
use crate::special::{gamma_q, ln_gamma};
use crate::testfn::TestFunction;
use crate::{centered_coefficient, check_finite, Error, Result};

/// Half-width of the band around 0 where the closed-form derivative is used.
pub const ZERO_BAND: f64 = 1e-6;

/// Quadrature tolerance for the solution integrals.
pub const SOLVE_TOL: Tolerance = Tolerance::new(1e-13, 1e-12);

/// Quadrature tolerance for `E[h(X)]`.
pub const EXPECTATION_TOL: Tolerance = Tolerance::new(1e-13, 1e-13);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    Gamma(GammaParams),
    Centered(CenteredGammaParams),
}

impl Target {
    /// The point where the leading coefficient of the equation vanishes.
    pub fn pivot(&self) -> f64 {
        match self {
            Target::Gamma(_) => 0.0,
            Target::Centered(c) => -c.nu,
        }
    }

    /// Shape of the underlying unit-rate problem.
    pub fn base_shape(&self) -> f64 {
        match self {
            Target::Gamma(p) => p.r,
            Target::Centered(c) => c.shape(),
        }
    }

    /// `(a, b)` with base coordinate `y = a·x + b`.
    fn to_base(self) -> (f64, f64) {
        match self {
            Target::Gamma(p) => (p.lambda, 0.0),
            Target::Centered(c) => (0.5, 0.5 * c.nu),
        }
    }

    /// Factor `s` in `f(x) = s·g(y)`.
    fn out_scale(self) -> f64 {
        match self {
            Target::Gamma(_) => 1.0,
            Target::Centered(_) => 0.5,
        }
    }

    /// `h₁` with `h₁(y) = h(x)` for the base coordinate `y` of `x`.
    fn base_function(self, h: &TestFunction) -> TestFunction {
        let (a, b) = self.to_base();
        h.affine(1.0 / a, -b / a)
    }
}

/// `E[h₁(X_r)]` for `X_r ~ Γ(r, 1)`.
fn unit_expectation(h1: &TestFunction, r: f64) -> Result<f64> {
    // [0, 1] in the variable v = t^r, which removes the t^{r−1} singularity.
    let inv_r = 1.0 / r;
    let head_bp: Vec<f64> = h1
        .kinks
        .iter()
        .filter(|&&k| k > 0.0 && k < 1.0)
        .map(|k| k.powf(r))
        .collect();
    let head = integrate(
        |v: f64| {
            let t = v.powf(inv_r);
            h1.eval(t) * (-t).exp()
        },
        0.0,
        1.0,
        &head_bp,
        EXPECTATION_TOL,
    )?
    .value
        / (ln_gamma(r + 1.0)).exp();

    let mut upper = r + 10.0 + 10.0 * r.sqrt();
    while gamma_q(r, upper) * (1.0 + upper) > 1e-18 {
        upper += 5.0 + r.sqrt();
    }
    let mut bp: Vec<f64> = h1.kinks.iter().copied().filter(|&k| k > 1.0).collect();
    bp.push(r);
    let mut t = 2.0;
    while t < upper {
        bp.push(t);
        t *= 2.0;
    }
    let lg = ln_gamma(r);
    let tail = integrate(
        |t: f64| h1.eval(t) * ((r - 1.0) * t.ln() - t - lg).exp(),
        1.0,
        upper,
        &bp,
        EXPECTATION_TOL,
    )?
    .value;
    Ok(head + tail)
}

/// `E[h(X_{r,λ})]`.
pub fn expected_h(h: &TestFunction, p: GammaParams) -> Result<f64> {
    h.check_polynomial_growth()?;
    unit_expectation(&h.affine(1.0 / p.lambda, 0.0), p.r)
}

/// `E[h(Z_ν)]`.
pub fn expected_h_centered(h: &TestFunction, c: CenteredGammaParams) -> Result<f64> {
    h.check_polynomial_growth()?;
    unit_expectation(&h.affine(2.0, -c.nu), c.shape())
}

/// `E[h(target)]`.
pub fn expected_h_target(h: &TestFunction, target: Target) -> Result<f64> {
    match target {
        Target::Gamma(p) => expected_h(h, p),
        Target::Centered(c) => expected_h_centered(h, c),
    }
}

/// The solution of the Stein equation for one test function and target.
#[derive(Debug, Clone)]
pub struct SteinSolution {
    pub target: Target,
    pub expected_h: f64,
    h: TestFunction,
    h1: TestFunction,
    r: f64,
    g0: f64,
    kink_at_zero: bool,
}

impl SteinSolution {
    pub fn function(&self) -> &TestFunction {
        &self.h
    }

    fn tilde(&self, y: f64) -> f64 {
        self.h1.eval(y) - self.expected_h
    }

    /// Unit-rate solution `g(y)`.
    pub fn base_g(&self, y: f64) -> Result<f64> {
        check_finite(y, "x")?;
        let r = self.r;
        let inv_r = 1.0 / r;
        if y == 0.0 {
            return Ok(self.g0);
        }
        if y > 0.0 && y <= r + 1.0 {
            let mut bp: Vec<f64> = (1..=6).map(|m| 0.5f64.powi(m).powf(r)).collect();
            bp.extend(
                self.h1
                    .kinks
                    .iter()
                    .filter(|&&k| k > 0.0 && k < y)
                    .map(|k| (k / y).powf(r)),
            );
            let v = integrate(
                |v: f64| {
                    let t = v.powf(inv_r);
                    self.tilde(y * t) * (y * (1.0 - t)).exp()
                },
                0.0,
                1.0,
                &bp,
                SOLVE_TOL,
            )?;
            return Ok(v.value * inv_r);
        }
        if y > 0.0 {
            let rm1 = r - 1.0;
            let mut upper: f64 = 40.0;
            while rm1.max(0.0) * (upper / y).ln_1p() + (2.0 + upper + y).ln() - upper > -42.0 {
                upper *= 1.5;
            }
            let mut bp: Vec<f64> = Vec::new();
            let mut s = 1.0;
            while s < upper {
                bp.push(s);
                s *= 2.0;
            }
            bp.extend(self.h1.kinks.iter().map(|k| k - y).filter(|&s| s > 0.0 && s < upper));
            let v = integrate(
                |s: f64| self.tilde(y + s) * (rm1 * (s / y).ln_1p() - s).exp(),
                0.0,
                upper,
                &bp,
                SOLVE_TOL,
            )?;
            return Ok(-v.value / y);
        }
        let u = -y;
        let mut bp: Vec<f64> = (0..6)
            .map(|m| 1.0 - 2f64.powi(m) / u)
            .filter(|&w| w > 0.0)
            .map(|w| w.powf(r))
            .collect();
        bp.extend(
            self.h1
                .kinks
                .iter()
                .filter(|&&k| k < 0.0 && k > y)
                .map(|k| (-k / u).powf(r)),
        );
        let v = integrate(
            |v: f64| {
                let t = v.powf(inv_r);
                self.tilde(-u * t) * (-u * (1.0 - t)).exp()
            },
            0.0,
            1.0,
            &bp,
            SOLVE_TOL,
        )?;
        Ok(v.value * inv_r)
    }

    /// Unit-rate pair `(g(y), g'(y))`.
    pub fn base_pair(&self, y: f64) -> Result<(f64, f64)> {
        let g = self.base_g(y)?;
        let r = self.r;
        if y.abs() > ZERO_BAND {
            return Ok((g, (self.tilde(y) - (r - y) * g) / y));
        }
        if y == 0.0 && self.kink_at_zero {
            return Ok((g, 0.0));
        }
        let d = self.h1.derivative(y, y);
        Ok((g, (d + self.g0) / (r + 1.0)))
    }

    /// `(f(x), f'(x))`.
    pub fn eval_pair(&self, x: f64) -> Result<(f64, f64)> {
        let (a, b) = self.target.to_base();
        let s = self.target.out_scale();
        let (g, gp) = self.base_pair(a * x + b)?;
        Ok((s * g, s * a * gp))
    }

    pub fn f(&self, x: f64) -> Result<f64> {
        let (a, b) = self.target.to_base();
        Ok(self.target.out_scale() * self.base_g(a * x + b)?)
    }

    pub fn fprime(&self, x: f64) -> Result<f64> {
        Ok(self.eval_pair(x)?.1)
    }

    /// Left-hand side minus right-hand side of the defining equation, using
    /// the supplied value of `f'`.
    pub fn residual_with(&self, x: f64, f: f64, fp: f64) -> f64 {
        let rhs = self.h.eval(x) - self.expected_h;
        match self.target {
            Target::Gamma(p) => x * fp + (p.r - p.lambda * x) * f - rhs,
            Target::Centered(c) => 2.0 * (x + c.nu) * fp - x * f - rhs,
        }
    }
}

fn solve(h: &TestFunction, target: Target) -> Result<SteinSolution> {
    if h.lip1.is_none() {
        return Err(Error::Contract(format!(
            "test function '{}' has no declared Lipschitz constant",
            h.name
        )));
    }
    let expected = expected_h_target(h, target)?;
    let h1 = target.base_function(h);
    let r = target.base_shape();
    let g0 = (h1.eval(0.0) - expected) / r;
    // Only a jump of h₁' at 0 makes f non-differentiable there.
    let kink_at_zero = h1.kinks.contains(&0.0) && {
        let (dl, dr) = (h1.derivative(-1e-9, -1.0), h1.derivative(1e-9, 1.0));
        (dr - dl).abs() > 1e-6 * dl.abs().max(dr.abs()).max(1.0)
    };
    Ok(SteinSolution {
        target,
        expected_h: expected,
        h: h.clone(),
        h1,
        r,
        g0,
        kink_at_zero,
    })
}

pub fn solve_stein_gamma(h: &TestFunction, p: GammaParams) -> Result<SteinSolution> {
    solve(h, Target::Gamma(p))
}

pub fn solve_stein_centered(h: &TestFunction, nu: f64) -> Result<SteinSolution> {
    solve(h, Target::Centered(CenteredGammaParams::new(nu)?))
}

pub fn solve_stein(h: &TestFunction, target: Target) -> Result<SteinSolution> {
    solve(h, target)
}

/// `f'(x)` of a solution.
pub fn stein_derivative(sol: &SteinSolution, x: f64) -> Result<f64> {
    sol.fprime(x)
}

/// Steps of the central and one-sided stencils in [`fd_derivative`]. Just
/// past a kink the smooth one-sided branch has large higher derivatives, so
/// that stencil is shorter.
pub const FD_STEP: f64 = 1e-2;
pub const FD_ONE_SIDED_STEP: f64 = 2e-3;

/// Fourth-order difference quotient of `f` at `x`, built from values of `f`
/// only. The stencil is one-sided when a kink of `h` or the pivot lies
/// within its reach, and forward when `x` is itself such a point.
pub fn fd_derivative(sol: &SteinSolution, x: f64) -> Result<f64> {
    let s = FD_STEP;
    let reach = 4.0 * s;
    let mut left = false;
    let mut right = false;
    for k in sol.h.kinks.iter().copied().chain([sol.target.pivot()]) {
        if (k - x).abs() < reach {
            if k <= x {
                left = true;
            }
            if k > x {
                right = true;
            }
        }
    }
    let f = |t: f64| sol.f(t);
    match (left, right) {
        (false, false) => Ok((8.0 * (f(x + s)? - f(x - s)?) - (f(x + 2.0 * s)? - f(x - 2.0 * s)?)) / (12.0 * s)),
        (true, false) => Ok(forward(&f, x, FD_ONE_SIDED_STEP)?),
        (false, true) => Ok(-forward(&|t| f(-t), -x, FD_ONE_SIDED_STEP)?),
        (true, true) => Err(Error::Contract(format!("no smooth stencil fits at x = {x}"))),
    }
}

fn forward(f: &dyn Fn(f64) -> Result<f64>, x: f64, s: f64) -> Result<f64> {
    let c = [-25.0, 48.0, -36.0, 16.0, -3.0];
    let mut acc = 0.0;
    for (i, ci) in c.iter().enumerate() {
        acc += ci * f(x + i as f64 * s)?;
    }
    Ok(acc / (12.0 * s))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualStats {
    pub points: usize,
    pub max_abs: f64,
    pub argmax: f64,
}

/// Residual of the equation on `xs` with `f'` from [`fd_derivative`].
pub fn residual_stats(sol: &SteinSolution, xs: &[f64]) -> Result<ResidualStats> {
    let res: Vec<f64> = xs
        .par_iter()
        .map(|&x| Ok(sol.residual_with(x, sol.f(x)?, fd_derivative(sol, x)?).abs()))
        .collect::<Result<_>>()?;
    let (mut max_abs, mut argmax) = (0.0, f64::NAN);
    for (&x, &r) in xs.iter().zip(&res) {
        if r > max_abs || argmax.is_nan() {
            max_abs = r;
            argmax = x;
        }
    }
    Ok(ResidualStats {
        points: xs.len(),
        max_abs,
        argmax,
    })
}

/// Evaluation grid for [`certify_bounds`], laid out around the target's pivot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    /// `(half_width, step)` layers; each layer covers what the previous did not.
    pub layers: Vec<(f64, f64)>,
    /// Spacing of the symmetric difference quotients.
    pub quotient_step: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            layers: vec![(2.0, 0.01), (10.0, 0.05), (50.0, 0.25)],
            quotient_step: 1e-4,
        }
    }
}

impl GridSpec {
    /// A coarser grid for quick runs.
    pub fn coarse() -> Self {
        Self {
            layers: vec![(2.0, 0.05), (10.0, 0.25), (50.0, 1.0)],
            quotient_step: 1e-4,
        }
    }

    /// Grid points relative to the pivot, sorted and symmetric.
    pub fn offsets(&self) -> Vec<f64> {
        let mut pts = vec![0.0];
        let mut covered = 0.0;
        for &(w, step) in &self.layers {
            let n = ((w - covered) / step).round() as i64;
            for i in 1..=n {
                let t = covered + i as f64 * step;
                pts.push(t);
                pts.push(-t);
            }
            covered = w;
        }
        pts.sort_by(f64::total_cmp);
        pts
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    pub function: String,
    pub target: Target,
    pub measured: BTreeMap<String, f64>,
    pub theorem: BTreeMap<String, f64>,
    pub margin: BTreeMap<String, f64>,
    pub pass: bool,
}

/// Allowed excess of a measured value over its theorem value.
pub fn certifier_slack(theorem: f64) -> f64 {
    1e-6 * theorem.max(1.0)
}

/// Grid estimates of `sup|f|`, `Lip f` (whole line and each side of the
/// pivot) and `Lip f'`, compared with the theorem values.
///
/// Grid estimates are lower bounds of the true suprema, so a pass is
/// necessary but not sufficient for the bound to hold.
pub fn certify_bounds(h: &TestFunction, target: Target, grid: &GridSpec) -> Result<BoundReport> {
    let lip1 = h
        .lip1
        .ok_or_else(|| Error::Contract(format!("'{}' has no declared lip1", h.name)))?;
    let sol = solve(h, target)?;
    let pivot = target.pivot();
    let delta = grid.quotient_step;
    let xs: Vec<f64> = grid.offsets().into_iter().map(|t| pivot + t).collect();

    // (f, f') at x − δ, x, x + δ
    let evals: Vec<[(f64, f64); 3]> = xs
        .par_iter()
        .map(|&x| -> Result<[(f64, f64); 3]> {
            Ok([sol.eval_pair(x - delta)?, sol.eval_pair(x)?, sol.eval_pair(x + delta)?])
        })
        .collect::<Result<_>>()?;

    let mut sup_f: f64 = 0.0;
    let (mut lip_f, mut lip_plus, mut lip_minus, mut lip_fp) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let side = |a: f64, b: f64| -> (bool, bool) { (a >= pivot && b >= pivot, a <= pivot && b <= pivot) };
    let mut record = |a: f64, b: f64, q: f64, lip_f: &mut f64| {
        *lip_f = lip_f.max(q);
        let (plus, minus) = side(a, b);
        if plus {
            lip_plus = lip_plus.max(q);
        }
        if minus {
            lip_minus = lip_minus.max(q);
        }
    };
    for (i, (&x, e)) in xs.iter().zip(&evals).enumerate() {
        let [lo, mid, hi] = *e;
        sup_f = sup_f.max(mid.0.abs()).max(lo.0.abs()).max(hi.0.abs());
        record(x - delta, x, (mid.0 - lo.0).abs() / delta, &mut lip_f);
        record(x, x + delta, (hi.0 - mid.0).abs() / delta, &mut lip_f);
        lip_fp = lip_fp.max((hi.1 - lo.1).abs() / (2.0 * delta));
        if i + 1 < xs.len() {
            let (x2, next) = (xs[i + 1], evals[i + 1][1]);
            record(x, x2, (next.0 - mid.0).abs() / (x2 - x), &mut lip_f);
            lip_fp = lip_fp.max((next.1 - mid.1).abs() / (x2 - x));
        }
    }

    let mut measured = BTreeMap::new();
    let mut theorem = BTreeMap::new();
    measured.insert("sup_f".to_string(), sup_f);
    measured.insert("lip_f".to_string(), lip_f);
    measured.insert("lip_f_plus".to_string(), lip_plus);
    measured.insert("lip_f_minus".to_string(), lip_minus);
    match target {
        Target::Gamma(p) => {
            let m = (1.0 / p.r).max(1.0);
            theorem.insert("sup_f".to_string(), lip1 / p.lambda);
            theorem.insert("lip_f".to_string(), 2.0 * m * lip1);
            theorem.insert("lip_f_plus".to_string(), 2.0 * lip1);
            theorem.insert("lip_f_minus".to_string(), 2.0 / p.r * lip1);
            if let Some(lip2) = h.lip2 {
                measured.insert("lip_fprime".to_string(), lip_fp);
                theorem.insert("lip_fprime".to_string(), 4.0 * p.lambda * m * lip1 + 2.0 * lip2);
            }
        }
        Target::Centered(c) => {
            let m = centered_coefficient(c.nu);
            theorem.insert("sup_f".to_string(), lip1);
            theorem.insert("lip_f".to_string(), m * lip1);
            theorem.insert("lip_f_plus".to_string(), lip1);
            theorem.insert("lip_f_minus".to_string(), 2.0 / c.nu * lip1);
            if let Some(lip2) = h.lip2 {
                measured.insert("lip_fprime".to_string(), lip_fp);
                theorem.insert("lip_fprime".to_string(), m * lip1 + lip2);
            }
        }
    }
    let margin: BTreeMap<String, f64> = theorem.iter().map(|(k, t)| (k.clone(), t - measured[k])).collect();
    let pass = theorem.iter().all(|(k, t)| measured[k] <= t + certifier_slack(*t));
    Ok(BoundReport {
        function: h.name.clone(),
        target,
        measured,
        theorem,
        margin,
        pass,
    })
}

/// The point `x = −1/2` at which the explosion witness is evaluated.
pub const EXPLOSION_POINT: f64 = -0.5;

/// `∫₀¹ (1 − u) u^{r−1} e^{−y(1−u)} du`, integrated in `v = u^r`.
fn explosion_kernel(r: f64, y: f64) -> Result<f64> {
    let inv_r = 1.0 / r;
    let v = integrate(
        |v: f64| {
            let u = v.powf(inv_r);
            (1.0 - u) * (-y * (1.0 - u)).exp()
        },
        0.0,
        1.0,
        &[0.5f64.powf(r)],
        Tolerance::new(1e-14, 1e-13),
    )?;
    Ok(v.value * inv_r)
}

/// `|f_h'(−1/2)|` for `h = min(x, 0)`, `λ = 1`, from the closed form
/// `(r − 2x)∫ₓ⁰Q_l / (−x²q_l(x))`, i.e. `(r + 2y)·J(r, y)` at `y = 1/2`.
pub fn explosion_witness(r: f64) -> Result<f64> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::Domain(format!("r must be positive, got {r}")));
    }
    let y = -EXPLOSION_POINT;
    Ok((r + 2.0 * y) * explosion_kernel(r, y)?)
}

/// Both evaluation paths of the witness side by side.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplosionReport {
    pub r: f64,
    /// Closed-form value from [`explosion_witness`].
    pub closed_form: f64,
    /// `|f'(−1/2)|` from the solver.
    pub solver: f64,
    /// `r·J(r, 1/2)`, the value obtained by substituting `h = min(x, 0)`
    /// directly into the unit-rate solution.
    pub direct: f64,
    /// `e^{−1/2}/r`.
    pub lower_bound: f64,
}

pub fn explosion_report(r: f64) -> Result<ExplosionReport> {
    let closed_form = explosion_witness(r)?;
    let sol = solve_stein_gamma(&crate::testfn::min_zero(), GammaParams::new(r, 1.0)?)?;
    let solver = stein_derivative(&sol, EXPLOSION_POINT)?.abs();
    let direct = r * explosion_kernel(r, -EXPLOSION_POINT)?;
    Ok(ExplosionReport {
        r,
        closed_form,
        solver,
        direct,
        lower_bound: (-0.5f64).exp() / r,
    })
}

/// Bound on `‖f_h^{(k)}‖` for `k ≥ 1`; `lips[j]` is `‖h^{(j+1)}‖`.
pub fn higher_order_bound(k: usize, p: GammaParams, lips: &[f64]) -> Result<f64> {
    if k == 0 {
        return Err(Error::Contract("derivative order k must be at least 1".into()));
    }
    if lips.len() != k {
        return Err(Error::Contract(format!(
            "expected {k} derivative norms, got {}",
            lips.len()
        )));
    }
    let fact = |n: usize| (1..=n).map(|i| i as f64).product::<f64>();
    let m = (1.0 / p.r).max(1.0);
    let lead = 2f64.powi(k as i32) * p.lambda.powi(k as i32 - 1) * fact(k - 1) * m * lips[0];
    let rest: f64 = (0..k.saturating_sub(1))
        .map(|j| 2f64.powi(j as i32 + 1) * p.lambda.powi(j as i32) * fact(k - 1) / fact(k - j - 1) * lips[k - j - 1])
        .sum();
    Ok(lead + rest)
}

/// Exchangeable-pair bound on `|E h(W) − E h(Z_ν)|` for `R = 0`, `E W² = 2ν`.
pub fn plugin_bound(stats: &ExchangeablePairStats, nu: f64, lip1: f64, lip2: f64) -> Result<f64> {
    let m = centered_coefficient(nu);
    let var_s = stats
        .var_s
        .ok_or_else(|| Error::Contract("pair statistics lack Var(S)".into()))?;
    let e3 = stats
        .e_abs_dw3
        .ok_or_else(|| Error::Contract("pair statistics lack E|W'−W|³".into()))?;
    Ok(m * lip1 * var_s.max(0.0).sqrt() + (m * lip1 + lip2) / (6.0 * stats.lambda_pair) * e3)
}

/// The general form with a remainder `R`, using `E|S|` and `E|R|`.
pub fn plugin_bound_general(stats: &ExchangeablePairStats, nu: f64, lip1: f64, lip2: f64) -> Result<f64> {
    let m = centered_coefficient(nu);
    let e3 = stats
        .e_abs_dw3
        .ok_or_else(|| Error::Contract("pair statistics lack E|W'−W|³".into()))?;
    Ok(lip1 * (m * stats.e_abs_s + stats.e_abs_r) + (m * lip1 + lip2) / (6.0 * stats.lambda_pair) * e3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testfn::{self, TestFunction};
    use approx::assert_relative_eq;

    fn gp(r: f64, l: f64) -> GammaParams {
        GammaParams::new(r, l).unwrap()
    }

    #[test]
    fn expectation_examples() {
        assert_relative_eq!(
            expected_h(&testfn::identity(), gp(2.0, 3.0)).unwrap(),
            2.0 / 3.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            expected_h(&testfn::constant(1.0), gp(0.3, 2.0)).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        assert_eq!(expected_h(&testfn::min_zero(), gp(1.0, 1.0)).unwrap(), 0.0);
        // E[min(X, 1)] = 1 − e^{−1} for the unit exponential
        let h = TestFunction::new("min1", |x: f64| x.min(1.0))
            .with_lip1(1.0)
            .with_kinks(vec![1.0]);
        assert_relative_eq!(
            expected_h(&h, gp(1.0, 1.0)).unwrap(),
            1.0 - (-1f64).exp(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn identity_gives_constant_solution() {
        for &(r, l) in &[(2.0, 1.0), (0.3, 2.0), (5.0, 0.5)] {
            let sol = solve_stein_gamma(&testfn::identity(), gp(r, l)).unwrap();
            for &x in &[-30.0, -1.0, -1e-7, 0.0, 1e-7, 0.5, 3.0, 40.0] {
                let (f, fp) = sol.eval_pair(x).unwrap();
                assert_relative_eq!(f, -1.0 / l, epsilon = 1e-11);
                assert!(fp.abs() < 1e-9, "r={r} x={x} fp={fp}");
            }
        }
        let sol = solve_stein_centered(&testfn::identity(), 1.0).unwrap();
        for &x in &[-20.0, -1.0, 0.0, 7.0] {
            assert_relative_eq!(sol.f(x).unwrap(), -1.0, epsilon = 1e-11);
        }
    }

    #[test]
    fn value_at_zero() {
        let h = TestFunction::new("min1", |x: f64| x.min(1.0))
            .with_lip1(1.0)
            .with_kinks(vec![1.0]);
        let sol = solve_stein_gamma(&h, gp(1.0, 1.0)).unwrap();
        assert_relative_eq!(sol.f(0.0).unwrap(), -(1.0 - (-1f64).exp()), epsilon = 1e-12);
        assert_relative_eq!(sol.f(1e-9).unwrap(), sol.f(0.0).unwrap(), epsilon = 1e-8);
        assert_relative_eq!(sol.f(-1e-9).unwrap(), sol.f(0.0).unwrap(), epsilon = 1e-8);
    }

    #[test]
    fn derivative_at_zero_closed_form() {
        // h = sin, X ~ Exp(1): E h = 1/2, g(0) = −1/2, f'(0) = (1 − 1/2)/2.
        let h = TestFunction::new("sin", f64::sin).with_d1(f64::cos).with_lip1(1.0);
        let sol = solve_stein_gamma(&h, gp(1.0, 1.0)).unwrap();
        assert_relative_eq!(sol.fprime(0.0).unwrap(), 0.25, epsilon = 1e-10);
        let fd = (sol.f(1e-4).unwrap() - sol.f(-1e-4).unwrap()) / 2e-4;
        assert_relative_eq!(fd, 0.25, epsilon = 1e-6);
        // Non-differentiable f at 0: f'(0) := 0.
        let sol = solve_stein_gamma(&testfn::min_zero(), gp(1.0, 1.0)).unwrap();
        assert_eq!(sol.fprime(0.0).unwrap(), 0.0);
    }

    #[test]
    fn c1_breakpoint_at_pivot_keeps_derivative_continuous() {
        // Huber with δ = ν puts the breakpoint of h'' on the pivot −ν; h' is continuous there.
        let sol = solve_stein_centered(&testfn::huber(0.5), 0.5).unwrap();
        let at = sol.fprime(-0.5).unwrap();
        for &d in &[1e-3, 1e-5] {
            assert!((sol.fprime(-0.5 - d).unwrap() - at).abs() < 10.0 * d);
            assert!((sol.fprime(-0.5 + d).unwrap() - at).abs() < 10.0 * d);
        }
    }

    #[test]
    fn arctan_residual_and_finite_difference() {
        let sol = solve_stein_gamma(&testfn::arctan(), gp(2.0, 1.0)).unwrap();
        for i in -10..=10 {
            let x = i as f64;
            let h = 1e-4;
            let fd = (sol.f(x + h).unwrap() - sol.f(x - h).unwrap()) / (2.0 * h);
            let f = sol.f(x).unwrap();
            assert!(sol.residual_with(x, f, fd).abs() < 1e-7, "x={x}");
        }
        for &x in &[-2.0, 2.0] {
            let h = 1e-4;
            let fd = (sol.f(x + h).unwrap() - sol.f(x - h).unwrap()) / (2.0 * h);
            assert!((fd - sol.fprime(x).unwrap()).abs() < 1e-6);
        }
    }

    #[test]
    fn centered_cos_residual() {
        let sol = solve_stein_centered(&testfn::cos(), 2.0).unwrap();
        for i in -20..=20 {
            let x = i as f64 + 0.37;
            let h = 2e-4;
            let fd = (sol.f(x + h).unwrap() - sol.f(x - h).unwrap()) / (2.0 * h);
            let f = sol.f(x).unwrap();
            assert!(sol.residual_with(x, f, fd).abs() < 2e-7, "x={x}");
        }
    }

    #[test]
    fn explosion_values() {
        for &r in &[0.1, 1.0] {
            let w = explosion_witness(r).unwrap();
            assert!(w >= (-0.5f64).exp() / r);
        }
        let rep = explosion_report(1.0).unwrap();
        // r = 1: f(x) = (eˣ − x − 1)/x, so f'(−1/2) = 4(1 − 3e^{−1/2}/2).
        let exact = 4.0 * (1.0 - 1.5 * (-0.5f64).exp());
        assert_relative_eq!(rep.solver, exact, epsilon = 1e-10);
        assert_relative_eq!(rep.direct, exact, epsilon = 1e-12);
        assert_relative_eq!(rep.closed_form, 2.0 * exact, epsilon = 1e-12);
    }

    #[test]
    fn higher_order_examples() {
        let p = gp(0.5, 1.0);
        assert_relative_eq!(higher_order_bound(1, p, &[1.3]).unwrap(), 2.0 * 2.0 * 1.3);
        assert_relative_eq!(higher_order_bound(2, p, &[1.0, 0.7]).unwrap(), 4.0 * 2.0 + 2.0 * 0.7);
        assert_relative_eq!(
            higher_order_bound(3, gp(1.0, 2.0), &[1.0, 1.0, 1.0]).unwrap(),
            64.0 + 2.0 + 16.0
        );
        assert!(higher_order_bound(0, p, &[]).is_err());
        assert!(higher_order_bound(2, p, &[1.0]).is_err());
    }

    #[test]
    fn grid_layout() {
        let g = GridSpec::default().offsets();
        assert_eq!(g.first(), Some(&-50.0));
        assert_eq!(g.last(), Some(&50.0));
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(g.len(), 1 + 2 * (200 + 160 + 160));
    }

    #[test]
    fn certify_identity() {
        let rep = certify_bounds(&testfn::identity(), Target::Gamma(gp(2.0, 1.0)), &GridSpec::coarse()).unwrap();
        assert!(rep.pass);
        assert_relative_eq!(rep.measured["sup_f"], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn certify_smoothed_min_small_shape() {
        let rep = certify_bounds(
            &testfn::min_zero_smooth(1.0),
            Target::Gamma(gp(0.5, 1.0)),
            &GridSpec::coarse(),
        )
        .unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(rep.measured["lip_f_minus"] <= 4.0);
    }

    #[test]
    fn missing_lipschitz_constant_is_rejected() {
        let h = TestFunction::new("raw", |x| x);
        assert!(matches!(solve_stein_gamma(&h, gp(1.0, 1.0)), Err(Error::Contract(_))));
    }
}
