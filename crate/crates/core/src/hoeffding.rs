//! Exact Hoeffding decompositions on finite product spaces.
//!
//! For independent discrete `X₁, …, Xₙ` and `W = ψ(X₁, …, Xₙ)`,
//!
//! ```text
//! W = Σ_J W_J,   W_J = Σ_{L ⊆ J} (−1)^{|J|−|L|} E[W | F_L].
//! ```
//!
//! Everything is computed by enumeration of the product space. Subsets are
//! `u64` bitmasks (bit `j` set when coordinate `j` is in the subset); a
//! component table is indexed by the atoms of its coordinates in increasing
//! coordinate order, last coordinate fastest. The whole space is enumerated in
//! the same row-major order.
//!
//! The engine is generic over [`Scalar`], so the same code runs in `f64` and
//! in exact rational arithmetic.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::sync::Arc;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Num, ToPrimitive, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default cap on the number of product-space points.
pub const DEFAULT_CAP: u128 = 2_000_000;

/// Components with `σ²_J ≤ ZERO_VARIANCE_REL · max σ²` count as vanishing.
pub const ZERO_VARIANCE_REL: f64 = 1e-24;

pub trait Scalar: Num + Clone + Send + Sync + Debug {
    fn from_f64(x: f64) -> Self;
    fn to_f64(&self) -> f64;
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(&self) -> f64 {
        *self
    }
}

impl Scalar for BigRational {
    /// The exact binary value of `x`.
    fn from_f64(x: f64) -> Self {
        BigRational::from_float(x).expect("finite value")
    }
    fn to_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteFactor {
    pub support: Vec<f64>,
    pub probs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

impl DiscreteFactor {
    pub fn new(support: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        let f = Self {
            support,
            probs,
            labels: None,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn rademacher() -> Self {
        Self {
            support: vec![-1.0, 1.0],
            probs: vec![0.5, 0.5],
            labels: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.support.len();
        if m == 0 || m != self.probs.len() {
            return Err(Error::Config(format!(
                "factor needs equally many atoms and probabilities, got {} and {}",
                m,
                self.probs.len()
            )));
        }
        if m > 255 {
            return Err(Error::Config("factor supports are limited to 255 atoms".into()));
        }
        if self.probs.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::Config("factor probabilities must be positive".into()));
        }
        if self.support.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("factor atoms must be finite".into()));
        }
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("factor probabilities sum to {total}, not 1")));
        }
        let distinct = match &self.labels {
            Some(l) => {
                if l.len() != m {
                    return Err(Error::Config("one label per atom is required".into()));
                }
                (0..m).all(|i| (0..i).all(|j| l[i] != l[j]))
            }
            None => (0..m).all(|i| (0..i).all(|j| self.support[i] != self.support[j])),
        };
        if !distinct {
            return Err(Error::Config("factor atoms must be distinct".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.support.iter().zip(&self.probs).map(|(v, p)| v * p).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteProductSpace {
    pub factors: Vec<DiscreteFactor>,
    #[serde(default = "default_cap")]
    pub cap: u128,
}

fn default_cap() -> u128 {
    DEFAULT_CAP
}

impl DiscreteProductSpace {
    pub fn new(factors: Vec<DiscreteFactor>) -> Result<Self> {
        let s = Self {
            factors,
            cap: DEFAULT_CAP,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn iid(factor: DiscreteFactor, n: usize) -> Result<Self> {
        Self::new(vec![factor; n])
    }

    pub fn with_cap(mut self, cap: u128) -> Self {
        self.cap = cap;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.factors.is_empty() || self.factors.len() > 63 {
            return Err(Error::Config(format!(
                "need 1 to 63 factors, got {}",
                self.factors.len()
            )));
        }
        self.factors.iter().try_for_each(DiscreteFactor::validate)
    }

    pub fn n(&self) -> usize {
        self.factors.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.factors.iter().map(DiscreteFactor::len).collect()
    }

    /// Number of points of the product space.
    pub fn size(&self) -> u128 {
        self.factors
            .iter()
            .map(|f| f.len() as u128)
            .try_fold(1u128, |a, b| a.checked_mul(b))
            .unwrap_or(u128::MAX)
    }

    /// Point count, or a resource error past the cap.
    pub fn checked_size(&self) -> Result<usize> {
        let size = self.size();
        if size > self.cap {
            return Err(Error::Resource {
                required: size,
                cap: self.cap,
            });
        }
        Ok(size as usize)
    }

    /// Row-major strides of the full enumeration.
    pub fn strides(&self) -> Vec<usize> {
        strides_for(&self.sizes(), &(0..self.n()).collect::<Vec<_>>())
    }

    /// Atom values of a point given by atom indices.
    pub fn values(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().zip(&self.factors).map(|(&i, f)| f.support[i]).collect()
    }

    /// Probability of a point given by atom indices.
    pub fn point_prob(&self, idx: &[usize]) -> f64 {
        idx.iter().zip(&self.factors).map(|(&i, f)| f.probs[i]).product()
    }

    /// Probabilities as exact rationals, renormalized to sum exactly to 1.
    pub fn exact_probs(&self) -> Vec<Vec<BigRational>> {
        self.factors
            .iter()
            .map(|f| {
                let raw: Vec<BigRational> = f.probs.iter().map(|&p| BigRational::from_f64(p)).collect();
                let total = raw.iter().fold(BigRational::zero(), |a, b| a + b);
                raw.into_iter().map(|p| p / total.clone()).collect()
            })
            .collect()
    }
}

/// Row-major strides of a table over `coords`, last coordinate fastest.
pub fn strides_for(sizes: &[usize], coords: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; coords.len()];
    for k in (0..coords.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * sizes[coords[k + 1]];
    }
    strides
}

/// Coordinates of a mask in increasing order.
pub fn mask_coords(mask: u64) -> Vec<usize> {
    (0..64).filter(|j| mask >> j & 1 == 1).collect()
}

pub fn coords_mask(coords: &[usize]) -> u64 {
    coords.iter().fold(0, |m, &j| m | 1 << j)
}

/// All masks over `n` bits with at most `k` bits set, by increasing size.
pub fn masks_up_to(n: usize, k: usize) -> Vec<u64> {
    let mut out = Vec::new();
    for s in 0..=k.min(n) {
        if s == 0 {
            out.push(0);
            continue;
        }
        // Gosper's hack over s-subsets of n bits
        let mut m: u64 = (1u64 << s) - 1;
        let limit = 1u64 << n;
        while m < limit {
            out.push(m);
            let c = m & m.wrapping_neg();
            let r = m + c;
            m = (((r ^ m) >> 2) / c) | r;
        }
    }
    out
}

pub type KernelFn = Arc<dyn Fn(&[usize]) -> f64 + Send + Sync>;

/// A kernel `ψ` on atom indices, one per coordinate.
#[derive(Clone)]
pub struct UStatKernel {
    pub name: String,
    psi: KernelFn,
    pub d: Option<usize>,
}

impl Debug for UStatKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UStatKernel")
            .field("name", &self.name)
            .field("d", &self.d)
            .finish()
    }
}

impl UStatKernel {
    pub fn new(name: impl Into<String>, psi: impl Fn(&[usize]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            psi: Arc::new(psi),
            d: None,
        }
    }

    /// A kernel defined on atom values.
    pub fn on_values(
        name: impl Into<String>,
        space: &DiscreteProductSpace,
        psi: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        let supports: Vec<Vec<f64>> = space.factors.iter().map(|f| f.support.clone()).collect();
        Self::new(name, move |idx: &[usize]| {
            let x: Vec<f64> = idx.iter().zip(&supports).map(|(&i, s)| s[i]).collect();
            psi(&x)
        })
    }

    /// A kernel given as a table over the row-major enumeration of `space`.
    pub fn from_table(name: impl Into<String>, space: &DiscreteProductSpace, table: Vec<f64>) -> Result<Self> {
        let size = space.checked_size()?;
        if table.len() != size {
            return Err(Error::Config(format!(
                "kernel table has {} entries, the space has {size} points",
                table.len()
            )));
        }
        let strides = space.strides();
        let table = Arc::new(table);
        Ok(Self::new(name, move |idx: &[usize]| {
            table[idx.iter().zip(&strides).map(|(i, s)| i * s).sum::<usize>()]
        }))
    }

    pub fn with_order(mut self, d: usize) -> Self {
        self.d = Some(d);
        self
    }

    pub fn eval(&self, idx: &[usize]) -> f64 {
        (self.psi)(idx)
    }
}

/// Atom indices of every point, `n` bytes per point.
#[derive(Debug, Clone)]
pub struct Enumeration {
    pub n: usize,
    pub sizes: Vec<usize>,
    pub strides: Vec<usize>,
    pub points: usize,
    digits: Vec<u8>,
}

impl Enumeration {
    pub fn new(space: &DiscreteProductSpace) -> Result<Self> {
        let points = space.checked_size()?;
        let n = space.n();
        let sizes = space.sizes();
        let strides = space.strides();
        let mut digits = vec![0u8; points * n];
        digits.par_chunks_mut(n).enumerate().for_each(|(x, row)| {
            for j in 0..n {
                row[j] = ((x / strides[j]) % sizes[j]) as u8;
            }
        });
        Ok(Self {
            n,
            sizes,
            strides,
            points,
            digits,
        })
    }

    pub fn digits(&self, x: usize) -> &[u8] {
        &self.digits[x * self.n..(x + 1) * self.n]
    }

    pub fn index_vec(&self, x: usize) -> Vec<usize> {
        self.digits(x).iter().map(|&d| d as usize).collect()
    }

    /// Index of point `x` in the table of the coordinates `coords`.
    pub fn project(&self, x: usize, coords: &[usize], strides: &[usize]) -> usize {
        let d = self.digits(x);
        coords.iter().zip(strides).map(|(&c, s)| d[c] as usize * s).sum()
    }
}

/// `ψ` on every point, in enumeration order.
pub fn tabulate(k: &UStatKernel, e: &Enumeration) -> Result<Vec<f64>> {
    let values: Vec<f64> = (0..e.points).into_par_iter().map(|x| k.eval(&e.index_vec(x))).collect();
    if let Some(x) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("kernel is not finite at point {x}")));
    }
    Ok(values)
}

/// The layout of one component table.
#[derive(Debug, Clone)]
struct Layout {
    coords: Vec<usize>,
    strides: Vec<usize>,
    cells: usize,
}

impl Layout {
    fn new(mask: u64, sizes: &[usize]) -> Self {
        let coords = mask_coords(mask);
        let strides = strides_for(sizes, &coords);
        let cells = coords.iter().map(|&c| sizes[c]).product();
        Self { coords, strides, cells }
    }

    fn cell_digits(&self, cell: usize, sizes: &[usize]) -> Vec<usize> {
        self.coords
            .iter()
            .zip(&self.strides)
            .map(|(&c, &s)| (cell / s) % sizes[c])
            .collect()
    }
}

/// Decomposition state shared by the public entry points.
struct Engine<'a, T: Scalar> {
    e: &'a Enumeration,
    probs: Vec<Vec<T>>,
    /// `P(x)·ψ(x)`
    weighted: Vec<T>,
}

impl<'a, T: Scalar> Engine<'a, T> {
    fn new(e: &'a Enumeration, probs: Vec<Vec<T>>, values: &[T]) -> Self {
        let weighted = (0..e.points)
            .into_par_iter()
            .map(|x| {
                let d = e.digits(x);
                let p = (0..e.n).fold(T::one(), |acc, j| acc * probs[j][d[j] as usize].clone());
                p * values[x].clone()
            })
            .collect();
        Self { e, probs, weighted }
    }

    fn marginal(&self, layout: &Layout, cell: usize) -> T {
        layout
            .cell_digits(cell, &self.e.sizes)
            .iter()
            .zip(&layout.coords)
            .fold(T::one(), |acc, (&d, &c)| acc * self.probs[c][d].clone())
    }

    /// `E[ψ | F_L]` as a table over the coordinates of `mask`.
    fn conditional(&self, mask: u64) -> Vec<T> {
        let layout = Layout::new(mask, &self.e.sizes);
        let mut acc = vec![T::zero(); layout.cells];
        for x in 0..self.e.points {
            let i = self.e.project(x, &layout.coords, &layout.strides);
            acc[i] = acc[i].clone() + self.weighted[x].clone();
        }
        for (cell, a) in acc.iter_mut().enumerate() {
            *a = a.clone() / self.marginal(&layout, cell);
        }
        acc
    }
}

#[derive(Debug, Clone)]
pub struct HoeffdingDecomposition<T: Scalar = f64> {
    pub n: usize,
    pub sizes: Vec<usize>,
    /// Largest component order computed.
    pub max_order: usize,
    pub mean: T,
    /// Component tables by mask, including the empty mask.
    pub components: BTreeMap<u64, Vec<T>>,
    /// `σ²_J = E[W_J²]` for every non-empty computed `J`.
    pub sigma2: BTreeMap<u64, f64>,
    probs: Vec<Vec<T>>,
    values: Vec<T>,
}

/// Decompose the table `values` (over the enumeration of `e`) up to order
/// `max_order`.
pub fn decompose_table<T: Scalar>(
    e: &Enumeration,
    probs: Vec<Vec<T>>,
    values: Vec<T>,
    max_order: usize,
) -> HoeffdingDecomposition<T> {
    let max_order = max_order.min(e.n);
    let engine = Engine::new(e, probs, &values);
    let masks = masks_up_to(e.n, max_order);
    let cond: BTreeMap<u64, Vec<T>> = masks
        .par_iter()
        .map(|&m| (m, engine.conditional(m)))
        .collect::<Vec<_>>()
        .into_iter()
        .collect();

    let components: BTreeMap<u64, Vec<T>> = masks
        .par_iter()
        .map(|&j| {
            let layout = Layout::new(j, &e.sizes);
            let mut table = vec![T::zero(); layout.cells];
            let mut sub = j;
            loop {
                let sign_negative = (j.count_ones() - sub.count_ones()) % 2 == 1;
                let sub_layout = Layout::new(sub, &e.sizes);
                let c = &cond[&sub];
                for (cell, t) in table.iter_mut().enumerate() {
                    let d = layout.cell_digits(cell, &e.sizes);
                    let idx: usize = sub_layout
                        .coords
                        .iter()
                        .zip(&sub_layout.strides)
                        .map(|(coord, s)| d[layout.coords.iter().position(|x| x == coord).unwrap()] * s)
                        .sum();
                    *t = if sign_negative {
                        t.clone() - c[idx].clone()
                    } else {
                        t.clone() + c[idx].clone()
                    };
                }
                if sub == 0 {
                    break;
                }
                sub = (sub - 1) & j;
            }
            (j, table)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect();

    let probs = engine.probs;
    let sigma2 = components
        .iter()
        .filter(|(m, _)| **m != 0)
        .map(|(&m, t)| {
            let layout = Layout::new(m, &e.sizes);
            let s = second_moment(&layout, t, &probs, &e.sizes);
            (m, s.to_f64())
        })
        .collect();
    HoeffdingDecomposition {
        n: e.n,
        sizes: e.sizes.clone(),
        max_order,
        mean: components[&0][0].clone(),
        components,
        sigma2,
        probs,
        values,
    }
}

fn second_moment<T: Scalar>(layout: &Layout, t: &[T], probs: &[Vec<T>], sizes: &[usize]) -> T {
    moment_power(layout, t, probs, sizes, 2)
}

fn moment_power<T: Scalar>(layout: &Layout, t: &[T], probs: &[Vec<T>], sizes: &[usize], k: u32) -> T {
    let mut acc = T::zero();
    for (cell, v) in t.iter().enumerate() {
        let p = layout
            .cell_digits(cell, sizes)
            .iter()
            .zip(&layout.coords)
            .fold(T::one(), |a, (&d, &c)| a * probs[c][d].clone());
        let mut pw = T::one();
        for _ in 0..k {
            pw = pw * v.clone();
        }
        acc = acc + p * pw;
    }
    acc
}

fn float_probs(space: &DiscreteProductSpace) -> Vec<Vec<f64>> {
    space.factors.iter().map(|f| f.probs.clone()).collect()
}

/// `E[W | F_L]` as a table over the coordinates of `l` (ascending).
pub fn conditional_expectation(k: &UStatKernel, s: &DiscreteProductSpace, l: &[usize]) -> Result<Vec<f64>> {
    let e = Enumeration::new(s)?;
    if let Some(&j) = l.iter().find(|&&j| j >= s.n()) {
        return Err(Error::Config(format!("coordinate {j} out of range")));
    }
    let values = tabulate(k, &e)?;
    let engine = Engine::new(&e, float_probs(s), &values);
    Ok(engine.conditional(coords_mask(l)))
}

/// The full decomposition (all `2ⁿ` components).
pub fn hoeffding_decompose(k: &UStatKernel, s: &DiscreteProductSpace) -> Result<HoeffdingDecomposition> {
    hoeffding_decompose_to_order(k, s, s.n())
}

/// Components of order at most `max_order`.
pub fn hoeffding_decompose_to_order(
    k: &UStatKernel,
    s: &DiscreteProductSpace,
    max_order: usize,
) -> Result<HoeffdingDecomposition> {
    let e = Enumeration::new(s)?;
    let values = tabulate(k, &e)?;
    Ok(decompose_table(&e, float_probs(s), values, max_order))
}

/// Exact rational decomposition; kernel values enter as their exact binary
/// values and the probabilities as [`DiscreteProductSpace::exact_probs`].
pub fn hoeffding_decompose_exact(
    k: &UStatKernel,
    s: &DiscreteProductSpace,
    max_order: usize,
) -> Result<HoeffdingDecomposition<BigRational>> {
    let e = Enumeration::new(s)?;
    let values: Vec<BigRational> = tabulate(k, &e)?.into_iter().map(BigRational::from_f64).collect();
    Ok(decompose_table(&e, s.exact_probs(), values, max_order))
}

impl<T: Scalar> HoeffdingDecomposition<T> {
    pub fn component(&self, coords: &[usize]) -> Option<&[T]> {
        self.components.get(&coords_mask(coords)).map(Vec::as_slice)
    }

    /// `W_J` at a point given by atom indices of all coordinates.
    pub fn eval_component(&self, mask: u64, point: &[usize]) -> T {
        let layout = Layout::new(mask, &self.sizes);
        let idx: usize = layout
            .coords
            .iter()
            .zip(&layout.strides)
            .map(|(&c, s)| point[c] * s)
            .sum();
        self.components[&mask][idx].clone()
    }

    /// `Σ_J W_J` at a point, over the computed components.
    pub fn reconstruct(&self, point: &[usize]) -> T {
        self.components
            .keys()
            .fold(T::zero(), |acc, &m| acc + self.eval_component(m, point))
    }

    /// `ψ` at point `x` of the enumeration.
    pub fn value(&self, x: usize) -> &T {
        &self.values[x]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn probs(&self) -> &[Vec<T>] {
        &self.probs
    }

    /// `P(X = x)` for an atom-index point.
    pub fn point_prob(&self, point: &[usize]) -> T {
        point
            .iter()
            .enumerate()
            .fold(T::one(), |a, (j, &i)| a * self.probs[j][i].clone())
    }

    /// `E[W_J W_K]` by enumeration over the coordinates of `J ∪ K`.
    pub fn inner(&self, j: u64, k: u64) -> T {
        let union = Layout::new(j | k, &self.sizes);
        let mut point = vec![0usize; self.n];
        let mut acc = T::zero();
        for cell in 0..union.cells {
            let d = union.cell_digits(cell, &self.sizes);
            let mut p = T::one();
            for (&c, &v) in union.coords.iter().zip(&d) {
                point[c] = v;
                p = p * self.probs[c][v].clone();
            }
            acc = acc + p * self.eval_component(j, &point) * self.eval_component(k, &point);
        }
        acc
    }

    /// `P(X_J = c)` for every cell `c` of the table of `mask`.
    pub fn cell_probs(&self, mask: u64) -> Vec<T> {
        let layout = Layout::new(mask, &self.sizes);
        (0..layout.cells)
            .map(|cell| {
                layout
                    .cell_digits(cell, &self.sizes)
                    .iter()
                    .zip(&layout.coords)
                    .fold(T::one(), |a, (&d, &c)| a * self.probs[c][d].clone())
            })
            .collect()
    }

    /// `E[W_J^k]`.
    pub fn component_moment(&self, mask: u64, k: u32) -> T {
        let layout = Layout::new(mask, &self.sizes);
        moment_power(&layout, &self.components[&mask], &self.probs, &self.sizes, k)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DegeneracyReport {
    pub holds: bool,
    pub order: usize,
    /// Subsets with `|K| ≠ d` and a component above tolerance.
    pub offending: Vec<Vec<usize>>,
    /// `max_x |ψ(x) − Σ_{|K| ≤ max_order} W_K(x)|`: the part of `W` above the
    /// computed orders.
    pub residual_above_order: f64,
}

/// Whether `W_K = 0` for every `|K| ≠ d`, to within `tol`.
pub fn verify_degeneracy<T: Scalar>(dec: &HoeffdingDecomposition<T>, d: usize, tol: f64) -> DegeneracyReport {
    let mut offending = Vec::new();
    for (&m, t) in &dec.components {
        if m.count_ones() as usize == d {
            continue;
        }
        let max = t.iter().map(|v| v.to_f64().abs()).fold(0.0, f64::max);
        if max > tol {
            offending.push(mask_coords(m));
        }
    }
    let mut residual = 0.0f64;
    if dec.max_order < dec.n {
        let strides = strides_for(&dec.sizes, &(0..dec.n).collect::<Vec<_>>());
        let points = dec.values.len();
        residual = (0..points)
            .into_par_iter()
            .map(|x| {
                let point: Vec<usize> = (0..dec.n).map(|j| (x / strides[j]) % dec.sizes[j]).collect();
                (dec.values[x].clone() - dec.reconstruct(&point)).to_f64().abs()
            })
            .reduce(|| 0.0, f64::max);
    }
    DegeneracyReport {
        holds: offending.is_empty() && residual <= tol,
        order: d,
        offending,
        residual_above_order: residual,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentStats {
    pub order: usize,
    pub rho2: f64,
    pub big_d: f64,
    /// `(J, σ²_J)` for `|J| = d`, by mask order.
    pub sigma2_list: Vec<(Vec<usize>, f64)>,
    /// Order-`d` subsets whose component vanishes; excluded from `D`.
    pub zero_variance: Vec<Vec<usize>>,
}

/// `ρ² = max_i Σ_{K∋i, |K|=d} σ²_K` and `D = max_J E[W_J⁴]/σ⁴_J`.
pub fn component_stats<T: Scalar>(dec: &HoeffdingDecomposition<T>, d: usize) -> Result<ComponentStats> {
    if d == 0 || d > dec.max_order {
        return Err(Error::Contract(format!(
            "order {d} is outside the computed range 1..={}",
            dec.max_order
        )));
    }
    let order_d: Vec<(u64, f64)> = dec
        .sigma2
        .iter()
        .filter(|(m, _)| m.count_ones() as usize == d)
        .map(|(&m, &s)| (m, s))
        .collect();
    let max_sigma = order_d.iter().map(|x| x.1).fold(0.0, f64::max);
    let mut rho2: f64 = 0.0;
    for i in 0..dec.n {
        let s: f64 = order_d.iter().filter(|(m, _)| m >> i & 1 == 1).map(|x| x.1).sum();
        rho2 = rho2.max(s);
    }
    let mut big_d: f64 = f64::NEG_INFINITY;
    let mut zero_variance = Vec::new();
    for &(m, s) in &order_d {
        if s <= ZERO_VARIANCE_REL * max_sigma || s == 0.0 {
            zero_variance.push(mask_coords(m));
            continue;
        }
        let m4 = dec.component_moment(m, 4).to_f64();
        big_d = big_d.max(m4 / (s * s));
    }
    if !big_d.is_finite() {
        return Err(Error::UndefinedD(d));
    }
    Ok(ComponentStats {
        order: d,
        rho2,
        big_d,
        sigma2_list: order_d.iter().map(|&(m, s)| (mask_coords(m), s)).collect(),
        zero_variance,
    })
}

/// Exact rational helper for tests and reports: `p/q`.
pub fn ratio(p: i64, q: i64) -> BigRational {
    BigRational::new(BigInt::from(p), BigInt::from(q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rademacher(n: usize) -> DiscreteProductSpace {
        DiscreteProductSpace::iid(DiscreteFactor::rademacher(), n).unwrap()
    }

    #[test]
    fn mask_enumeration() {
        let m = masks_up_to(5, 2);
        assert_eq!(m.len(), 1 + 5 + 10);
        assert!(m.iter().all(|x| x.count_ones() <= 2));
        assert_eq!(masks_up_to(4, 4).len(), 16);
        assert_eq!(mask_coords(0b1011), vec![0, 1, 3]);
        assert_eq!(coords_mask(&[0, 1, 3]), 0b1011);
    }

    #[test]
    fn conditional_expectation_examples() {
        let s = rademacher(2);
        let k = UStatKernel::on_values("x1x2", &s, |x| x[0] * x[1]);
        assert_eq!(conditional_expectation(&k, &s, &[0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(conditional_expectation(&k, &s, &[]).unwrap(), vec![0.0]);
        // conditioning on everything returns ψ itself
        assert_eq!(
            conditional_expectation(&k, &s, &[0, 1]).unwrap(),
            vec![1.0, -1.0, -1.0, 1.0]
        );
    }

    #[test]
    fn linear_statistic() {
        let s = rademacher(4);
        let k = UStatKernel::on_values("sum", &s, |x| x.iter().sum());
        let dec = hoeffding_decompose(&k, &s).unwrap();
        for (&m, t) in &dec.components {
            let zero = t.iter().all(|v| v.abs() < 1e-15);
            assert_eq!(zero, m.count_ones() != 1, "mask {m:b}");
        }
        assert_eq!(dec.component(&[2]).unwrap(), &[-1.0, 1.0]);
    }

    #[test]
    fn rademacher_pair() {
        let s = rademacher(2);
        let k = UStatKernel::on_values("x1x2", &s, |x| x[0] * x[1]);
        let dec = hoeffding_decompose(&k, &s).unwrap();
        assert_eq!(dec.sigma2[&0b11], 1.0);
        assert_eq!(dec.sigma2[&0b01], 0.0);
        assert!(verify_degeneracy(&dec, 2, 1e-12).holds);
        let bad = verify_degeneracy(&dec, 1, 1e-12);
        assert!(!bad.holds);
        assert_eq!(bad.offending, vec![vec![0, 1]]);
        let st = component_stats(&dec, 2).unwrap();
        assert_eq!(st.rho2, 1.0);
        assert_eq!(st.big_d, 1.0);
    }

    #[test]
    fn mixed_orders() {
        let s = rademacher(3);
        let k = UStatKernel::on_values("x1+x1x2x3", &s, |x| x[0] + x[0] * x[1] * x[2]);
        let dec = hoeffding_decompose(&k, &s).unwrap();
        let nonzero: Vec<u64> = dec
            .components
            .iter()
            .filter(|(_, t)| t.iter().any(|v| v.abs() > 1e-14))
            .map(|(&m, _)| m)
            .collect();
        assert_eq!(nonzero, vec![0b001, 0b111]);
    }

    #[test]
    fn quadratic_form_stats() {
        let n = 6;
        let s = rademacher(n);
        let c = 2.0 / ((n * (n - 1)) as f64).sqrt();
        let k = UStatKernel::on_values("quad", &s, move |x| {
            let mut w = 0.0;
            for i in 0..x.len() {
                for j in i + 1..x.len() {
                    w += x[i] * x[j];
                }
            }
            c * w
        });
        let dec = hoeffding_decompose(&k, &s).unwrap();
        assert!(verify_degeneracy(&dec, 2, 1e-12).holds);
        let st = component_stats(&dec, 2).unwrap();
        for (_, s2) in &st.sigma2_list {
            assert_relative_eq!(*s2, 2.0 / 15.0, max_relative = 1e-13);
        }
        assert_relative_eq!(st.rho2, 2.0 / 3.0, max_relative = 1e-13);
        assert_relative_eq!(st.big_d, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn asymmetric_factor_fourth_moment_ratio() {
        let f = DiscreteFactor::new(vec![-2.0, 1.0], vec![1.0 / 3.0, 2.0 / 3.0]).unwrap();
        let s = DiscreteProductSpace::iid(f, 2).unwrap();
        let k = UStatKernel::on_values("x1x2", &s, |x| x[0] * x[1]);
        let dec = hoeffding_decompose(&k, &s).unwrap();
        let st = component_stats(&dec, 2).unwrap();
        assert_relative_eq!(st.rho2, 4.0, max_relative = 1e-14);
        assert_relative_eq!(st.big_d, 2.25, max_relative = 1e-14);
    }

    #[test]
    fn exact_mode_is_exact() {
        let f = DiscreteFactor::new(vec![0.0, 1.0, 3.0], vec![0.25, 0.5, 0.25]).unwrap();
        let s = DiscreteProductSpace::iid(f, 3).unwrap();
        let k = UStatKernel::on_values("poly", &s, |x| x[0] * x[1] + x[2].powi(2) - x[0] * x[1] * x[2]);
        let dec = hoeffding_decompose_exact(&k, &s, 3).unwrap();
        let e = Enumeration::new(&s).unwrap();
        for x in 0..e.points {
            let p = e.index_vec(x);
            assert_eq!(dec.reconstruct(&p), dec.value(x).clone());
        }
        let masks: Vec<u64> = dec.components.keys().copied().collect();
        for &a in &masks {
            for &b in &masks {
                if a != b {
                    assert!(dec.inner(a, b).is_zero());
                }
            }
        }
    }

    #[test]
    fn undefined_d() {
        let s = rademacher(3);
        let k = UStatKernel::on_values("linear", &s, |x| x[0]);
        let dec = hoeffding_decompose(&k, &s).unwrap();
        assert!(matches!(component_stats(&dec, 2), Err(Error::UndefinedD(2))));
    }

    #[test]
    fn cap_is_enforced() {
        let s = rademacher(12).with_cap(1000);
        let k = UStatKernel::on_values("x1", &s, |x| x[0]);
        match hoeffding_decompose(&k, &s) {
            Err(Error::Resource { required, cap }) => {
                assert_eq!(required, 4096);
                assert_eq!(cap, 1000);
            }
            other => panic!("expected resource error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_orders_flag_higher_components() {
        let s = rademacher(4);
        let k = UStatKernel::on_values("x1x2x3", &s, |x| x[0] * x[1] * x[2]);
        let dec = hoeffding_decompose_to_order(&k, &s, 2).unwrap();
        let r = verify_degeneracy(&dec, 2, 1e-12);
        assert!(!r.holds);
        assert_relative_eq!(r.residual_above_order, 1.0);
    }

    #[test]
    fn factor_validation() {
        assert!(DiscreteFactor::new(vec![1.0, 1.0], vec![0.5, 0.5]).is_err());
        assert!(DiscreteFactor::new(vec![1.0, 2.0], vec![0.5, 0.6]).is_err());
        assert!(DiscreteFactor::new(vec![1.0], vec![]).is_err());
        assert!(DiscreteFactor::new(vec![1.0, 2.0], vec![0.0, 1.0]).is_err());
    }
}
