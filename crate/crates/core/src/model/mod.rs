//! Sub-posterior densities and the sample sources used to initialise fusion.
//!
//! A sub-posterior exposes its log-density together with the gradient and
//! Laplacian of the log-density, from which the path-integral integrand
//!
//! ```text
//! phi(x) = (|grad log f(x)|^2 + lap log f(x)) / 2
//! ```
//!
//! is formed. Models also supply sound bounds on `phi` over hyperrectangles,
//! which the unbiased weight estimators need on every simulated layer.

pub(crate) mod bank;
mod gaussian;
mod interval;
mod logistic;
pub mod mcmc;

pub use bank::{BankBacked, SampleBank};
pub use gaussian::{make_gaussian_family, GaussianSubPosterior, MeanPlacement};
pub use interval::Interval;
pub use logistic::{make_logistic_problem, LogisticData, LogisticProblem, LogisticSubPosterior};

use crate::error::{check_dim, FusionError, Result};
use std::fmt::Debug;

/// An axis-aligned hyperrectangle `[lo_1, hi_1] x ... x [lo_d, hi_d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rect {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Rect {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        check_dim(lo.len(), hi.len())?;
        for (k, (l, h)) in lo.iter().zip(&hi).enumerate() {
            if !(l.is_finite() && h.is_finite()) {
                return Err(FusionError::UnboundedRegion(k));
            }
            if l > h {
                return Err(FusionError::InvalidParameter(format!(
                    "rectangle coordinate {k} has lo {l} > hi {h}"
                )));
            }
        }
        Ok(Rect { lo, hi })
    }

    /// The smallest rectangle holding every given point.
    pub fn bounding(points: &[&[f64]]) -> Result<Self> {
        let first = points.first().ok_or(FusionError::EmptyBank)?;
        let mut lo = first.to_vec();
        let mut hi = first.to_vec();
        for p in &points[1..] {
            check_dim(lo.len(), p.len())?;
            for k in 0..lo.len() {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        Rect::new(lo, hi)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (l, h))| *v >= *l && *v <= *h)
    }

    pub fn interval(&self, k: usize) -> Interval {
        Interval::new(self.lo[k], self.hi[k])
    }
}

/// A density `f_c` held by one core.
///
/// Implementations must be pure: every method is a function of its arguments,
/// so a single value can be shared read-only between worker threads.
pub trait SubPosterior: Send + Sync + Debug {
    fn dim(&self) -> usize;

    /// Log-density up to an additive constant.
    fn log_density(&self, x: &[f64]) -> f64;

    fn grad_log_density(&self, x: &[f64]) -> Vec<f64>;

    fn laplacian_log_density(&self, x: &[f64]) -> f64;

    /// `phi(x) = (|grad log f|^2 + lap log f) / 2`.
    fn phi(&self, x: &[f64]) -> f64 {
        let g = self.grad_log_density(x);
        let g2: f64 = g.iter().map(|v| v * v).sum();
        0.5 * (g2 + self.laplacian_log_density(x))
    }

    /// Bounds `(L, U)` with `L <= phi(x) <= U` for every `x` in `rect`.
    ///
    /// Callers go through [`phi_bounds`], which validates the rectangle.
    fn phi_bounds_unchecked(&self, rect: &Rect) -> (f64, f64);

    /// A global lower bound on `phi`, when one is known analytically.
    fn phi_lower_bound(&self) -> Option<f64>;

    /// Draws `count` points from the density.
    fn sample(&self, count: usize, seed: u64) -> Result<SampleBank>;

    /// Access to the per-datum structure needed by the subsampled estimator.
    fn as_logistic(&self) -> Option<&LogisticSubPosterior> {
        None
    }
}

/// Evaluates `phi` after checking the dimension of `x`.
pub fn phi(sp: &dyn SubPosterior, x: &[f64]) -> Result<f64> {
    check_dim(sp.dim(), x.len())?;
    Ok(sp.phi(x))
}

/// Bounds `phi` over a finite rectangle.
pub fn phi_bounds(sp: &dyn SubPosterior, rect: &Rect) -> Result<(f64, f64)> {
    check_dim(sp.dim(), rect.dim())?;
    for k in 0..rect.dim() {
        if !(rect.lo[k].is_finite() && rect.hi[k].is_finite()) {
            return Err(FusionError::UnboundedRegion(k));
        }
    }
    Ok(sp.phi_bounds_unchecked(rect))
}

/// Draws the initial particle positions for one sub-posterior.
pub fn sample_initial(sp: &dyn SubPosterior, count: usize, seed: u64) -> Result<SampleBank> {
    if count == 0 {
        return Err(FusionError::InvalidParameter("count must be at least 1".into()));
    }
    let bank = sp.sample(count, seed)?;
    check_dim(sp.dim(), bank.dim())?;
    Ok(bank)
}

/// Lower bound on `phi` used for reporting when none is known analytically:
/// the minimum over the bank, pushed down by 10% of its magnitude.
pub fn estimate_phi_lower_bound(sp: &dyn SubPosterior, bank: &SampleBank) -> Result<f64> {
    if let Some(b) = sp.phi_lower_bound() {
        return Ok(b);
    }
    let min = bank
        .draws()
        .iter()
        .map(|x| sp.phi(x))
        .fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(FusionError::EmptyBank);
    }
    Ok(min - 0.1 * min.abs())
}

#[cfg(test)]
pub(crate) mod testing {
    //! Finite-difference checks shared by the model tests.
    use super::SubPosterior;

    pub fn fd_gradient(sp: &dyn SubPosterior, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|k| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[k] += h;
                xm[k] -= h;
                (sp.log_density(&xp) - sp.log_density(&xm)) / (2.0 * h)
            })
            .collect()
    }

    pub fn fd_laplacian(sp: &dyn SubPosterior, x: &[f64], h: f64) -> f64 {
        let f0 = sp.log_density(x);
        (0..x.len())
            .map(|k| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[k] += h;
                xm[k] -= h;
                (sp.log_density(&xp) - 2.0 * f0 + sp.log_density(&xm)) / (h * h)
            })
            .sum()
    }

    pub fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1.0)
    }
}
