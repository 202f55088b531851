//! # gstein
//!
//! Numerical machinery for Gamma approximation by Stein's method.
//!
//! The crate solves the Gamma Stein equation
//! `x f'(x) + (r - λx) f(x) = h(x) - E[h(X)]` on the whole real line (and the
//! centered variant `2(x+ν) f'(x) - x f(x) = h(x) - E[h(Z_ν)]`), checks the
//! smoothness bounds those solutions satisfy, and evaluates the quantitative
//! Gamma bounds that follow from them in three settings:
//!
//! | Module | Setting |
//! |--------|---------|
//! | [`hoeffding`], [`dejong`] | degenerate U-statistics of independent discrete variables |
//! | [`malliavin_gauss`] | finite-dimensional Gaussian chaos of order ≤ 2 |
//! | [`malliavin_poisson`] | Poisson random measure on a finite cell grid |
//!
//! Supporting modules: [`gamma_dist`] (densities, moments, sampling),
//! [`stein`] (the Stein solver and bound certifier), [`distances`]
//! (Wasserstein / Kolmogorov / dictionary distances and mollification),
//! [`testfn`] (test functions with certified Lipschitz constants),
//! [`quad`] and [`special`] (quadrature and special functions).
//!
//! All Monte Carlo routines draw from one seeded ChaCha stream per sample, so
//! results are identical for any worker count.

use thiserror::Error;

pub mod dejong;
pub mod distances;
pub mod gamma_dist;
pub mod hoeffding;
pub mod malliavin_gauss;
pub mod malliavin_poisson;
pub mod model;
pub mod quad;
pub mod special;
pub mod stats;
pub mod stein;
pub mod testfn;

pub use gamma_dist::{CenteredGammaParams, GammaParams};
pub use testfn::TestFunction;

/// Library version embedded in every serialized report.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A documented precondition of the operation does not hold.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Numerical integration did not reach the requested tolerance.
    #[error("accuracy error: achieved {achieved:e}, requested {requested:e} ({context})")]
    Accuracy {
        achieved: f64,
        requested: f64,
        context: String,
    },

    /// Exact enumeration would exceed the configured cap.
    #[error("resource limit: {required} points required, cap is {cap}")]
    Resource { required: u128, cap: u128 },

    /// Invalid or incomplete configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// D is undefined because every order-d component vanishes.
    #[error("D is undefined: all components of order {0} have zero variance")]
    UndefinedD(usize),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_finite(x: f64, what: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} must be finite, got {x}")))
    }
}

/// `max(1, 2/ν)`, the coefficient that recurs in every centered-Gamma bound.
pub fn centered_coefficient(nu: f64) -> f64 {
    (2.0 / nu).max(1.0)
}
