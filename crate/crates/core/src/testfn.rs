//! Test functions with declared Lipschitz constants.
//!
//! A [`TestFunction`] carries `lip1 = ‖h′‖` (the minimum Lipschitz constant of
//! `h`) and optionally `lip2 = ‖h″‖`, an optional exact derivative and the list
//! of points where `h` or `h′` fails to be smooth. Integrators use the kink
//! list as breakpoints.
//!
//! [`dictionary`] is the fixed certification set used by the solver tests and
//! the distance module.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::special::{normal_cdf, normal_pdf};
use crate::{Error, Result};

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Relative slack allowed when checking a declared Lipschitz constant.
pub const LIPSCHITZ_SLACK: f64 = 1e-6;

#[derive(Clone)]
pub struct TestFunction {
    pub name: String,
    eval: ScalarFn,
    d1: Option<ScalarFn>,
    pub lip1: Option<f64>,
    pub lip2: Option<f64>,
    pub kinks: Vec<f64>,
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunction")
            .field("name", &self.name)
            .field("lip1", &self.lip1)
            .field("lip2", &self.lip2)
            .field("has_d1", &self.d1.is_some())
            .field("kinks", &self.kinks)
            .finish()
    }
}

impl TestFunction {
    pub fn new(name: impl Into<String>, eval: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            eval: Arc::new(eval),
            d1: None,
            lip1: None,
            lip2: None,
            kinks: Vec::new(),
        }
    }

    pub fn with_d1(mut self, d1: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.d1 = Some(Arc::new(d1));
        self
    }

    pub fn with_lip1(mut self, lip1: f64) -> Self {
        self.lip1 = Some(lip1);
        self
    }

    pub fn with_lip2(mut self, lip2: f64) -> Self {
        self.lip2 = Some(lip2);
        self
    }

    pub fn with_kinks(mut self, kinks: Vec<f64>) -> Self {
        self.kinks = kinks;
        self
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.eval)(x)
    }

    pub fn has_d1(&self) -> bool {
        self.d1.is_some()
    }

    /// The exact derivative when one was supplied.
    pub fn d1(&self, x: f64) -> Option<f64> {
        self.d1.as_ref().map(|d| d(x))
    }

    /// Derivative from the supplied `d1`, or a central difference.
    ///
    /// At a kink the difference is taken one-sided, from the side given by
    /// the sign of `side` (`side ≥ 0` means from the right).
    pub fn derivative(&self, x: f64, side: f64) -> f64 {
        if let Some(d) = &self.d1 {
            return d(x);
        }
        let h = 1e-5 * x.abs().max(1.0);
        let near_kink = self.kinks.iter().any(|k| (k - x).abs() < h);
        if near_kink {
            if side >= 0.0 {
                (self.eval(x + h) - self.eval(x)) / h
            } else {
                (self.eval(x) - self.eval(x - h)) / h
            }
        } else {
            (self.eval(x + h) - self.eval(x - h)) / (2.0 * h)
        }
    }

    /// `x ↦ h(a·x + b)`, with constants and kinks transformed accordingly.
    pub fn affine(&self, a: f64, b: f64) -> Self {
        let f = self.eval.clone();
        let d1 = self
            .d1
            .clone()
            .map(|d| -> ScalarFn { Arc::new(move |x| a * d(a * x + b)) });
        Self {
            name: format!("{}∘({a}x+{b})", self.name),
            eval: Arc::new(move |x| f(a * x + b)),
            d1,
            lip1: self.lip1.map(|l| l * a.abs()),
            lip2: self.lip2.map(|l| l * a * a),
            kinks: self.kinks.iter().map(|k| (k - b) / a).collect(),
        }
    }

    /// `C ≥ 1` with `|h(x)| ≤ C (1 + |x|^8)` on the probe grid `±2^k`,
    /// `k = −4..=10`; errors if the growth is not polynomial on the probes.
    pub fn check_polynomial_growth(&self) -> Result<f64> {
        let h0 = self.eval(0.0);
        if !h0.is_finite() {
            return Err(Error::Contract(format!("{}: h(0) is not finite", self.name)));
        }
        let mut c: f64 = 1.0 + h0.abs();
        for k in -4..=0 {
            for s in [-1.0, 1.0] {
                c = c.max(self.eval(s * 2f64.powi(k)).abs() + 1.0);
            }
        }
        for k in 1..=10 {
            for s in [-1.0, 1.0] {
                let x = s * 2f64.powi(k);
                let v = self.eval(x);
                if !v.is_finite() || v.abs() > c * (1.0 + x.abs().powi(8)) {
                    return Err(Error::Contract(format!(
                        "{}: growth faster than polynomial at x = {x}",
                        self.name
                    )));
                }
            }
        }
        Ok(c)
    }

    /// Sampled check of the declared constants on `grid`: difference quotients
    /// of `h` (and of `d1` when present) must not exceed `lip·(1 + 1e−6)`.
    pub fn check_declared_constants(&self, grid: &[f64]) -> Result<()> {
        let step = 1e-4;
        let check = |g: &dyn Fn(f64) -> f64, lip: f64, what: &str| -> Result<()> {
            for &x in grid {
                let q = (g(x + step) - g(x - step)).abs() / (2.0 * step);
                if q > lip * (1.0 + LIPSCHITZ_SLACK) + 1e-9 {
                    return Err(Error::Contract(format!(
                        "{}: {what} quotient {q} at x = {x} exceeds declared {lip}",
                        self.name
                    )));
                }
            }
            Ok(())
        };
        if let Some(l1) = self.lip1 {
            check(&|x| self.eval(x), l1, "first")?;
        }
        if let (Some(l2), Some(d)) = (self.lip2, &self.d1) {
            check(&|x| d(x), l2, "second")?;
        }
        Ok(())
    }
}

/// Parameters of a seeded sum of Gaussian bumps `Σ aₖ exp(−(x−cₖ)²/(2sₖ²))`.
#[derive(Debug, Clone)]
pub struct BumpSum {
    pub amp: Vec<f64>,
    pub center: Vec<f64>,
    pub width: Vec<f64>,
}

impl BumpSum {
    /// Five bumps with centers in (−5, 5), widths in (0.5, 2), scaled so that
    /// both certified constants are at most 1.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 5;
        let mut amp: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let center = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
        let width: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..2.0)).collect();
        let (l1, l2) = Self::constants(&amp, &width);
        let scale = 1.0 / l1.max(l2);
        for a in &mut amp {
            *a *= scale;
        }
        Self { amp, center, width }
    }

    /// `|t e^{−t²/2}| ≤ e^{−1/2}` and `|(t²−1) e^{−t²/2}| ≤ 1` give the bounds.
    fn constants(amp: &[f64], width: &[f64]) -> (f64, f64) {
        let em = (-0.5f64).exp();
        let l1 = amp.iter().zip(width).map(|(a, s)| a.abs() * em / s).sum();
        let l2 = amp.iter().zip(width).map(|(a, s)| a.abs() / (s * s)).sum();
        (l1, l2)
    }

    pub fn into_test_function(self, name: &str) -> TestFunction {
        let (l1, l2) = Self::constants(&self.amp, &self.width);
        let a = self.clone();
        let b = self;
        TestFunction::new(name, move |x| {
            a.amp
                .iter()
                .zip(&a.center)
                .zip(&a.width)
                .map(|((a, c), s)| a * (-(x - c) * (x - c) / (2.0 * s * s)).exp())
                .sum()
        })
        .with_d1(move |x| {
            b.amp
                .iter()
                .zip(&b.center)
                .zip(&b.width)
                .map(|((a, c), s)| -a * (x - c) / (s * s) * (-(x - c) * (x - c) / (2.0 * s * s)).exp())
                .sum()
        })
        .with_lip1(l1)
        .with_lip2(l2)
    }
}

pub fn identity() -> TestFunction {
    TestFunction::new("x", |x| x)
        .with_d1(|_| 1.0)
        .with_lip1(1.0)
        .with_lip2(0.0)
}

pub fn constant(c: f64) -> TestFunction {
    TestFunction::new("const", move |_| c)
        .with_d1(|_| 0.0)
        .with_lip1(0.0)
        .with_lip2(0.0)
}

/// `min(x, 0)`; Lipschitz but not differentiable at 0.
pub fn min_zero() -> TestFunction {
    TestFunction::new("min0", |x: f64| x.min(0.0))
        .with_d1(|x| if x < 0.0 { 1.0 } else { 0.0 })
        .with_lip1(1.0)
        .with_kinks(vec![0.0])
}

/// The Gaussian mollification of `min(x, 0)` at scale `rho`:
/// `E[min(x + N/ρ, 0)] = xΦ(−ρx) − φ(ρx)/ρ`.
pub fn min_zero_smooth(rho: f64) -> TestFunction {
    TestFunction::new("min0_smooth", move |x| {
        x * normal_cdf(-rho * x) - normal_pdf(rho * x) / rho
    })
    .with_d1(move |x| normal_cdf(-rho * x))
    .with_lip1(1.0)
    .with_lip2(rho * normal_pdf(0.0))
}

pub fn arctan() -> TestFunction {
    TestFunction::new("arctan", f64::atan)
        .with_d1(|x| 1.0 / (1.0 + x * x))
        .with_lip1(1.0)
        .with_lip2(3.0 * 3f64.sqrt() / 8.0)
}

pub fn sin() -> TestFunction {
    TestFunction::new("sin", f64::sin)
        .with_d1(f64::cos)
        .with_lip1(1.0)
        .with_lip2(1.0)
}

pub fn cos() -> TestFunction {
    TestFunction::new("cos", f64::cos)
        .with_d1(|x| -x.sin())
        .with_lip1(1.0)
        .with_lip2(1.0)
}

/// `x/(1+x²)`; `|h″|` peaks at `x = √2 − 1`.
pub fn rational() -> TestFunction {
    let second = |x: f64| 2.0 * x * (x * x - 3.0) / (1.0 + x * x).powi(3);
    TestFunction::new("rational", |x| x / (1.0 + x * x))
        .with_d1(|x| (1.0 - x * x) / (1.0 + x * x).powi(2))
        .with_lip1(1.0)
        .with_lip2(second(2f64.sqrt() - 1.0).abs())
}

pub fn tanh() -> TestFunction {
    TestFunction::new("tanh", f64::tanh)
        .with_d1(|x| 1.0 - x.tanh().powi(2))
        .with_lip1(1.0)
        .with_lip2(4.0 / (3.0 * 3f64.sqrt()))
}

/// `log(1 + eˣ) − x/2 = log(2 cosh(x/2))`, an even convex function.
pub fn softplus_linear() -> TestFunction {
    TestFunction::new("softplus_linear", |x: f64| 0.5 * x.abs() + (-x.abs()).exp().ln_1p())
        .with_d1(|x| 0.5 * (0.5 * x).tanh())
        .with_lip1(0.5)
        .with_lip2(0.25)
}

/// Huber loss with threshold `delta`.
pub fn huber(delta: f64) -> TestFunction {
    TestFunction::new(format!("huber_{delta}"), move |x: f64| {
        if x.abs() <= delta {
            x * x / (2.0 * delta)
        } else {
            x.abs() - 0.5 * delta
        }
    })
    .with_d1(move |x| (x / delta).clamp(-1.0, 1.0))
    .with_lip1(1.0)
    .with_lip2(1.0 / delta)
    .with_kinks(vec![-delta, delta])
}

/// Seeds of the two bump-sum members of the dictionary.
pub const BUMP_SEEDS: [u64; 2] = [0x5EED_0001, 0x5EED_0002];

/// The certification dictionary (13 members).
pub fn dictionary() -> Vec<TestFunction> {
    vec![
        identity(),
        min_zero(),
        min_zero_smooth(1.0),
        arctan(),
        sin(),
        cos(),
        rational(),
        tanh(),
        softplus_linear(),
        huber(0.5),
        huber(2.0),
        BumpSum::seeded(BUMP_SEEDS[0]).into_test_function("bumps_a"),
        BumpSum::seeded(BUMP_SEEDS[1]).into_test_function("bumps_b"),
    ]
}

/// Look up a named function: a dictionary member, `const`, `huber:<δ>`,
/// `min0_smooth:<ρ>` or `bumps:<seed>`.
pub fn by_name(spec: &str) -> Result<TestFunction> {
    let (name, arg) = match spec.split_once(':') {
        Some((n, a)) => (n, Some(a)),
        None => (spec, None),
    };
    let num = |a: Option<&str>| -> Result<f64> {
        let a = a.ok_or_else(|| Error::Config(format!("'{name}' needs a parameter")))?;
        a.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite() && *v > 0.0)
            .ok_or_else(|| Error::Config(format!("bad parameter '{a}' for '{name}'")))
    };
    match (name, arg) {
        ("huber", a) => Ok(huber(num(a)?)),
        ("min0_smooth", Some(_)) => Ok(min_zero_smooth(num(arg)?)),
        ("bumps", Some(a)) => {
            let seed = a
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("bad seed '{a}' for 'bumps'")))?;
            Ok(BumpSum::seeded(seed).into_test_function(spec))
        }
        ("const", Some(_)) => Ok(constant(
            arg.unwrap()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad constant '{spec}'")))?,
        )),
        ("const", None) => Ok(constant(1.0)),
        (_, None) => dictionary()
            .into_iter()
            .find(|h| h.name == name)
            .ok_or_else(|| Error::Config(format!("unknown test function '{spec}'"))),
        _ => Err(Error::Config(format!("unknown test function '{spec}'"))),
    }
}
