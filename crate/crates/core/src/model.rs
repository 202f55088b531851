//! JSON model descriptions for the three settings.
//!
//! ```json
//! {"space": {"factors": [{"support": [-1, 1], "probs": [0.5, 0.5]},
//!                        {"support": [-1, 1], "probs": [0.5, 0.5]}]},
//!  "kernel": {"type": "polynomial", "terms": [{"coef": 1.0, "coords": [0, 1]}]},
//!  "order": 2, "nu": 0.5}
//! ```

use serde::{Deserialize, Serialize};

use crate::dejong::{family_instance, seeded_degenerate_instance, Family};
use crate::hoeffding::{DiscreteProductSpace, UStatKernel};
use crate::malliavin_gauss::{ChaosTerm, GaussChaosFunctional};
use crate::malliavin_poisson::{seeded_second_order, PoissonChaosFunctional, PoissonSpace, PoissonTerm, DEFAULT_CELLS};
use crate::{Error, Result};

/// `coef·Π_{j ∈ coords} xⱼ` on atom values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub coef: f64,
    pub coords: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KernelSpec {
    /// Values over the row-major enumeration of the space.
    Table {
        values: Vec<f64>,
    },
    Polynomial {
        terms: Vec<Monomial>,
    },
    /// A built-in family; the space is implied.
    Family {
        family: String,
        n: usize,
        nu: f64,
        #[serde(default)]
        seed: u64,
    },
    /// A seeded degenerate kernel on random centered factors.
    Degenerate {
        seed: u64,
        n: usize,
        d: usize,
        nu: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoeffdingSpec {
    #[serde(default)]
    pub space: Option<DiscreteProductSpace>,
    pub kernel: KernelSpec,
    #[serde(default)]
    pub order: Option<usize>,
    #[serde(default)]
    pub nu: Option<f64>,
    #[serde(default)]
    pub cap: Option<u128>,
}

/// A built product space and kernel, with the order and `ν` when known.
pub struct HoeffdingModel {
    pub space: DiscreteProductSpace,
    pub kernel: UStatKernel,
    pub order: Option<usize>,
    pub nu: Option<f64>,
}

impl HoeffdingSpec {
    pub fn build(&self) -> Result<HoeffdingModel> {
        let (space, kernel, order, nu) = match &self.kernel {
            KernelSpec::Family { family, n, nu, seed } => {
                let inst = family_instance(family.parse::<Family>()?, *n, *nu, *seed)?;
                (inst.space, inst.kernel, Some(inst.d), Some(*nu))
            }
            KernelSpec::Degenerate { seed, n, d, nu } => {
                let inst = seeded_degenerate_instance(*seed, *n, *d, *nu)?;
                (inst.space, inst.kernel, Some(*d), Some(*nu))
            }
            KernelSpec::Table { values } => {
                let space = self.required_space()?;
                let k = UStatKernel::from_table("table", &space, values.clone())?;
                (space, k, None, None)
            }
            KernelSpec::Polynomial { terms } => {
                let space = self.required_space()?;
                if let Some(j) = terms.iter().flat_map(|t| &t.coords).find(|&&j| j >= space.n()) {
                    return Err(Error::Config(format!("monomial coordinate {j} out of range")));
                }
                let terms = terms.clone();
                let k = UStatKernel::on_values("polynomial", &space, move |x| {
                    terms
                        .iter()
                        .map(|t| t.coef * t.coords.iter().map(|&j| x[j]).product::<f64>())
                        .sum()
                });
                (space, k, None, None)
            }
        };
        let space = match self.cap {
            Some(cap) => space.with_cap(cap),
            None => space,
        };
        Ok(HoeffdingModel {
            space,
            kernel,
            order: self.order.or(order),
            nu: self.nu.or(nu),
        })
    }

    fn required_space(&self) -> Result<DiscreteProductSpace> {
        let s = self
            .space
            .clone()
            .ok_or_else(|| Error::Config("this kernel type needs an explicit 'space'".into()))?;
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GaussSpec {
    Dense {
        dim: usize,
        terms: Vec<ChaosTerm>,
    },
    IdentityNu {
        nu: usize,
        #[serde(default)]
        dim: Option<usize>,
    },
    Perturbed {
        nu: usize,
        eps: f64,
    },
    Eigenvalues {
        values: Vec<f64>,
    },
}

impl GaussSpec {
    pub fn build(&self) -> Result<GaussChaosFunctional> {
        match self {
            Self::Dense { dim, terms } => GaussChaosFunctional::new(*dim, terms.clone()),
            Self::IdentityNu { nu, dim } => GaussChaosFunctional::identity_nu(*nu, dim.unwrap_or(*nu)),
            Self::Perturbed { nu, eps } => GaussChaosFunctional::perturbed(*nu, *eps),
            Self::Eigenvalues { values } => GaussChaosFunctional::eigenvalues(values),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PoissonKernelSpec {
    Dense { terms: Vec<PoissonTerm> },
    Indicator { cells: Vec<usize>, c: f64 },
    SeededSecondOrder { nu: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonSpec {
    /// Explicit control weights; otherwise `cells` equal weights of total
    /// `total`.
    #[serde(default)]
    pub mu: Option<Vec<f64>>,
    #[serde(default)]
    pub cells: Option<usize>,
    #[serde(default)]
    pub total: Option<f64>,
    pub kernel: PoissonKernelSpec,
}

impl PoissonSpec {
    pub fn build(&self) -> Result<PoissonChaosFunctional> {
        let space = match &self.mu {
            Some(mu) => PoissonSpace::new(mu.clone())?,
            None => PoissonSpace::uniform(self.cells.unwrap_or(DEFAULT_CELLS), self.total.unwrap_or(1.0))?,
        };
        match &self.kernel {
            PoissonKernelSpec::Dense { terms } => PoissonChaosFunctional::new(space, terms.clone()),
            PoissonKernelSpec::Indicator { cells, c } => PoissonChaosFunctional::indicator(space, cells, *c),
            PoissonKernelSpec::SeededSecondOrder { nu, seed } => seeded_second_order(space, *nu, *seed),
        }
    }
}

pub fn parse<T: serde::de::DeserializeOwned>(json: &str) -> Result<T> {
    Ok(serde_json::from_str(json)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hoeffding::{component_stats, hoeffding_decompose};

    #[test]
    fn polynomial_model() {
        let json = r#"{"space": {"factors": [{"support": [-1, 1], "probs": [0.5, 0.5]},
                                            {"support": [-1, 1], "probs": [0.5, 0.5]}]},
                       "kernel": {"type": "polynomial", "terms": [{"coef": 1.0, "coords": [0, 1]}]},
                       "order": 2, "nu": 0.5}"#;
        let m = parse::<HoeffdingSpec>(json).unwrap().build().unwrap();
        assert_eq!(m.order, Some(2));
        let dec = hoeffding_decompose(&m.kernel, &m.space).unwrap();
        assert_eq!(component_stats(&dec, 2).unwrap().rho2, 1.0);
    }

    #[test]
    fn family_and_table_models() {
        let m = parse::<HoeffdingSpec>(
            r#"{"kernel": {"type": "family", "family": "rademacher-quadratic", "n": 4, "nu": 1}}"#,
        )
        .unwrap()
        .build()
        .unwrap();
        assert_eq!((m.order, m.nu), (Some(2), Some(1.0)));
        let t = r#"{"space": {"factors": [{"support": [0, 1], "probs": [0.5, 0.5]}]},
                    "kernel": {"type": "table", "values": [1, 2, 3]}}"#;
        assert!(parse::<HoeffdingSpec>(t).unwrap().build().is_err());
        assert!(
            parse::<HoeffdingSpec>(r#"{"kernel": {"type": "polynomial", "terms": []}}"#)
                .unwrap()
                .build()
                .is_err()
        );
    }

    #[test]
    fn gauss_and_poisson_models() {
        let g = parse::<GaussSpec>(r#"{"type": "identity_nu", "nu": 2}"#)
            .unwrap()
            .build()
            .unwrap();
        assert_eq!(g.dim, 2);
        let p = parse::<PoissonSpec>(
            r#"{"cells": 8, "total": 2, "kernel": {"type": "seeded_second_order", "nu": 1, "seed": 3}}"#,
        )
        .unwrap()
        .build()
        .unwrap();
        assert!((p.variance() - 2.0).abs() < 1e-12);
        assert!(parse::<GaussSpec>(r#"{"type": "nope"}"#).is_err());
    }
}
