//! Comparison methods: Consensus Monte Carlo and the Monte Carlo Fusion
//! rejection sampler.

use crate::bridge::Segment;
use crate::diagnostics::WeightedSample;
use crate::error::{check_dim, FusionError, Result};
use crate::estimator::{rho_tilde_component, EstimatorConfig, EstimatorKind};
use crate::model::{SampleBank, SubPosterior};
use crate::rng::{self, Domain};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Consensus Monte Carlo: the `i`-th fused draw is
/// `(sum W_c)^{-1} sum W_c x_{c,i}` with `W_c` the inverse sample covariance
/// of bank `c`. Banks are truncated to the shortest one.
pub fn consensus_monte_carlo(banks: &[SampleBank]) -> Result<WeightedSample> {
    let first = banks.first().ok_or(FusionError::EmptyBank)?;
    let d = first.dim();
    for b in banks {
        check_dim(d, b.dim())?;
    }
    let len = banks.iter().map(|b| b.len()).min().unwrap_or(0);
    if len < 2 {
        return Err(FusionError::InvalidParameter("CMC needs at least two draws per bank".into()));
    }
    let mut weights = Vec::with_capacity(banks.len());
    let mut total = DMatrix::<f64>::zeros(d, d);
    for (c, b) in banks.iter().enumerate() {
        let cov = DMatrix::from_row_slice(d, d, &b.covariance());
        let w = cov
            .try_inverse()
            .ok_or_else(|| FusionError::SingularMatrix(format!("sample covariance of bank {c}")))?;
        total += &w;
        weights.push(w);
    }
    let total_inv = total
        .clone()
        .cholesky()
        .map(|ch| ch.inverse())
        .ok_or_else(|| FusionError::SingularMatrix("sum of CMC weight matrices".into()))?;
    let points = (0..len)
        .map(|i| {
            let mut acc = DVector::<f64>::zeros(d);
            for (w, b) in weights.iter().zip(banks) {
                acc += w * DVector::from_column_slice(&b.draws()[i]);
            }
            (&total_inv * acc).iter().copied().collect()
        })
        .collect();
    WeightedSample::uniform(points)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McfOutput {
    pub sample: Vec<Vec<f64>>,
    pub proposals: usize,
    pub acceptance_rate: f64,
    /// `phi` evaluations plus two units per component per proposal (the
    /// initial draw and the layer), matching the fusion cost convention.
    pub cost: u64,
    pub diagnostic: Option<String>,
}

const BATCH: usize = 4096;

/// Monte Carlo Fusion: propose `x_c ~ f_c` and `y ~ N(x_bar, T/C)`, accept
/// `y` with probability `rho_0 * prod_c P_c` where `P_c` is the Poisson
/// thinning event for `exp(-int (phi_c - Phi_c))` along the bridge
/// `x_c -> y` on `[0, T]`. Accepted draws are exact from the product.
pub fn monte_carlo_fusion(
    sps: &[&dyn SubPosterior],
    horizon: f64,
    max_proposals: usize,
    target: usize,
    seed: u64,
) -> Result<McfOutput> {
    if sps.is_empty() {
        return Err(FusionError::InvalidParameter("no sub-posteriors".into()));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(FusionError::InvalidParameter(format!("T must be positive, got {horizon}")));
    }
    let d = sps[0].dim();
    let mut floors = Vec::with_capacity(sps.len());
    for (c, sp) in sps.iter().enumerate() {
        check_dim(d, sp.dim())?;
        floors.push(sp.phi_lower_bound().ok_or(FusionError::UnknownPhiLowerBound(c))?);
    }
    let c_count = sps.len();
    let cfg = EstimatorConfig::new(EstimatorKind::UeA);
    let sd = (horizon / c_count as f64).sqrt();

    let mut sample = Vec::new();
    let mut proposals = 0usize;
    let mut cost = 0u64;
    let mut batch = 0u64;
    while proposals < max_proposals && sample.len() < target {
        let size = BATCH.min(max_proposals - proposals);
        let mut draws = Vec::with_capacity(c_count);
        for (c, sp) in sps.iter().enumerate() {
            let s = rng::child_seed(seed, Domain::Baseline, batch * c_count as u64 + c as u64);
            draws.push(sp.sample(size, s)?.into_draws());
        }
        let results: Vec<Result<(Option<Vec<f64>>, u64)>> = (0..size)
            .into_par_iter()
            .map(|i| {
                let mut r = rng::stream(seed, Domain::Baseline, batch, i as u64);
                let xs: Vec<&Vec<f64>> = draws.iter().map(|b| &b[i]).collect();
                let mut mean = vec![0.0; d];
                for x in &xs {
                    for k in 0..d {
                        mean[k] += x[k] / c_count as f64;
                    }
                }
                let spread: f64 =
                    xs.iter().map(|x| x.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sum();
                let y: Vec<f64> = mean
                    .iter()
                    .map(|m| {
                        let z: f64 = StandardNormal.sample(&mut r);
                        m + sd * z
                    })
                    .collect();
                let mut log_acc = -spread / (2.0 * horizon);
                let mut evals = 0u64;
                for (c, sp) in sps.iter().enumerate() {
                    let seg = Segment::new(xs[c].clone(), y.clone(), horizon)?;
                    let est = rho_tilde_component(*sp, None, &seg, &cfg, &mut r)?;
                    evals += est.evals;
                    log_acc += est.log_value + floors[c] * horizon;
                }
                let u: f64 = r.random();
                Ok((if u.ln() < log_acc { Some(y) } else { None }, evals))
            })
            .collect();
        for res in results {
            let (acc, evals) = res?;
            proposals += 1;
            cost += evals + 2 * c_count as u64;
            if let Some(y) = acc {
                sample.push(y);
                if sample.len() == target {
                    break;
                }
            }
        }
        batch += 1;
    }
    let acceptance_rate = sample.len() as f64 / proposals.max(1) as f64;
    let diagnostic = sample.is_empty().then(|| {
        format!("no acceptances in {proposals} proposals; reduce T or the spread between sub-posteriors")
    });
    Ok(McfOutput { sample, proposals, acceptance_rate, cost, diagnostic })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GaussianSubPosterior;

    #[test]
    fn cmc_examples() {
        let a = SampleBank::new(vec![vec![0.0], vec![2.0], vec![-2.0]], "a").unwrap();
        let b = SampleBank::new(vec![vec![1.0], vec![3.0], vec![-1.0], vec![9.0]], "b").unwrap();
        let b3 = SampleBank::new(b.draws()[..3].to_vec(), "b").unwrap();
        let s = consensus_monte_carlo(&[a.clone(), b3]).unwrap();
        assert!((s.points[0][0] - 0.5).abs() < 1e-12);
        // truncation to the shortest bank
        assert_eq!(consensus_monte_carlo(&[a.clone(), b]).unwrap().len(), 3);
        let one = consensus_monte_carlo(std::slice::from_ref(&a)).unwrap();
        for (p, q) in one.points.iter().zip(a.draws()) {
            assert!((p[0] - q[0]).abs() < 1e-12);
        }
        let flat = SampleBank::new(vec![vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]], "f").unwrap();
        assert!(matches!(consensus_monte_carlo(&[flat]), Err(FusionError::SingularMatrix(_))));
    }

    #[test]
    fn cmc_gaussian_product_moments() {
        let f1 = GaussianSubPosterior::new(vec![-1.0], 2.0).unwrap();
        let f2 = GaussianSubPosterior::new(vec![2.0], 1.0).unwrap();
        let banks = [f1.sample(50_000, 1).unwrap(), f2.sample(50_000, 2).unwrap()];
        let s = consensus_monte_carlo(&banks).unwrap();
        let m = crate::diagnostics::weighted_moments(&s);
        // product of N(-1, 2) and N(2, 1): precision 1.5, mean 1
        assert!((m.mean[0] - 1.0).abs() < 3.0 * m.se[0]);
        assert!((m.cov[0] - 1.0 / 1.5).abs() < 0.02);
    }

    #[test]
    fn mcf_acceptance_near_one_for_small_t() {
        let f = GaussianSubPosterior::new(vec![0.3], 1.0).unwrap();
        let out = monte_carlo_fusion(&[&f], 1e-4, 2000, 2000, 3).unwrap();
        assert!(out.acceptance_rate > 0.99, "{}", out.acceptance_rate);
    }

    #[test]
    fn mcf_acceptance_falls_with_separation() {
        let mut last = 1.1;
        for mu in [0.0, 1.0, 2.0, 3.0] {
            let f1 = GaussianSubPosterior::new(vec![mu / 2.0], 1.0).unwrap();
            let f2 = GaussianSubPosterior::new(vec![-mu / 2.0], 1.0).unwrap();
            let out = monte_carlo_fusion(&[&f1, &f2], 1.0, 20_000, usize::MAX, 4).unwrap();
            assert!(out.acceptance_rate < last, "mu {mu}: {}", out.acceptance_rate);
            last = out.acceptance_rate;
        }
    }

    #[test]
    fn mcf_is_deterministic_and_stops_at_target() {
        let f1 = GaussianSubPosterior::new(vec![0.2, 0.0], 1.0).unwrap();
        let f2 = GaussianSubPosterior::new(vec![-0.2, 0.1], 1.0).unwrap();
        let a = monte_carlo_fusion(&[&f1, &f2], 0.5, 100_000, 100, 5).unwrap();
        let b = monte_carlo_fusion(&[&f1, &f2], 0.5, 100_000, 100, 5).unwrap();
        assert_eq!(a.sample, b.sample);
        assert_eq!(a.sample.len(), 100);
        assert!(a.proposals < 100_000);
    }
}
