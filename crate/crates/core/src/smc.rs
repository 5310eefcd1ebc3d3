//! The sequential Monte Carlo fusion loop.

use crate::error::{check_dim, FusionError, Result};
use crate::estimator::{rho_tilde, ControlVariates, EstimatorConfig, EstimatorKind};
use crate::model::{sample_initial, SubPosterior};
use crate::partition::TemporalPartition;
use crate::proposal::{modified_initial, propagate_factorized, rho0_log, ParticleState, TransitionSpec};
use crate::rng::{self, Domain};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResamplingScheme {
    #[default]
    Multinomial,
    Systematic,
    Stratified,
    Residual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Initialisation {
    /// Independent draws from each `f_c`, weighted by `rho_0`.
    #[default]
    Standard,
    /// Draws tilted towards `theta` by rejection; weights compensate.
    Tilted { theta: Vec<f64> },
}

fn default_threshold() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmcConfig {
    #[serde(default)]
    pub estimator: EstimatorConfig,
    /// Resample when ESS falls below this fraction of N.
    #[serde(default = "default_threshold")]
    pub ess_threshold: f64,
    #[serde(default)]
    pub resampling: ResamplingScheme,
    #[serde(default)]
    pub initialisation: Initialisation,
    /// Report CESS weighted by the current normalised weights.
    #[serde(default)]
    pub weighted_cess: bool,
    /// Worker threads; 0 means all available. Never affects results.
    #[serde(skip)]
    pub workers: usize,
}

impl Default for SmcConfig {
    fn default() -> Self {
        SmcConfig {
            estimator: EstimatorConfig::default(),
            ess_threshold: 0.5,
            resampling: ResamplingScheme::Multinomial,
            initialisation: Initialisation::Standard,
            weighted_cess: false,
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub j: usize,
    pub cess: f64,
    #[serde(rename = "cess_over_N")]
    pub cess_over_n: f64,
    /// ESS of the normalised weights after reweighting.
    pub ess: f64,
    pub resampled: bool,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct FusionRun {
    pub config: SmcConfig,
    pub seed: u64,
    pub n_particles: usize,
    pub partition: TemporalPartition,
    pub cess0: f64,
    pub records: Vec<IterationRecord>,
    /// Final fused points (one per particle) and their normalised weights.
    pub particles: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// Log of the running product of average weight increments, starting from
    /// the mean of `rho_0`; estimates the log of `int prod f_c` up to the
    /// Gaussian constants of the proposal.
    pub log_normalizer: f64,
    pub phi_evals: u64,
    /// Particles whose increment came back NaN and were given zero weight.
    pub non_finite: usize,
    pub final_states: Vec<ParticleState>,
    pub wall_ms: f64,
}

impl FusionRun {
    pub fn resample_count(&self) -> usize {
        self.records.iter().filter(|r| r.resampled).count()
    }

    pub fn final_ess(&self) -> f64 {
        ess(&self.weights)
    }

    /// Deterministic work measure: `phi` evaluations plus one unit per
    /// component draw (initial and propagated).
    pub fn cost(&self) -> u64 {
        let c = self.final_states.first().map_or(0, |s| s.c) as u64;
        self.phi_evals + c * self.n_particles as u64 * (self.partition.n() as u64 + 1)
    }

    pub fn mean_cess_over_n(&self) -> f64 {
        self.records.iter().map(|r| r.cess_over_n).sum::<f64>() / self.records.len() as f64
    }

    /// SHA-256 of the configuration, seed, particle count and knots.
    pub fn config_hash(&self) -> String {
        config_hash(&self.config, self.seed, self.n_particles, &self.partition)
    }
}

pub fn config_hash(cfg: &SmcConfig, seed: u64, n: usize, partition: &TemporalPartition) -> String {
    let v = serde_json::json!({"config": cfg, "seed": seed, "N": n, "knots": partition.knots()});
    let mut h = Sha256::new();
    h.update(v.to_string().as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `(sum w^2)^{-1}` for normalised weights.
pub fn ess(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// `(sum rho)^2 / sum rho^2`; `None` when every increment is zero.
pub fn cess(increments: &[f64]) -> Option<f64> {
    let s: f64 = increments.iter().sum();
    let q: f64 = increments.iter().map(|v| v * v).sum();
    (s > 0.0).then(|| s * s / q)
}

/// CESS from log increments, scale-free.
pub fn cess_log(log_inc: &[f64]) -> Option<f64> {
    let a = log_sum_exp(log_inc.iter().copied());
    let b = log_sum_exp(log_inc.iter().map(|v| 2.0 * v));
    (a > f64::NEG_INFINITY).then(|| (2.0 * a - b).exp())
}

/// Weighted CESS `N (sum w rho)^2 / sum w rho^2` from log increments.
pub fn cess_log_weighted(log_w: &[f64], log_inc: &[f64]) -> Option<f64> {
    let a = log_sum_exp(log_w.iter().zip(log_inc).map(|(w, r)| w + r));
    let b = log_sum_exp(log_w.iter().zip(log_inc).map(|(w, r)| w + 2.0 * r));
    (a > f64::NEG_INFINITY).then(|| log_w.len() as f64 * (2.0 * a - b).exp())
}

/// Normalises log weights in place and returns the normalised weights and
/// the log of their original sum.
fn normalise(log_w: &[f64]) -> (Vec<f64>, f64) {
    let lse = log_sum_exp(log_w.iter().copied());
    (log_w.iter().map(|v| (v - lse).exp()).collect(), lse)
}

/// Offspring indices for normalised `weights`.
pub fn resample_indices<R: Rng + ?Sized>(weights: &[f64], scheme: ResamplingScheme, rng: &mut R) -> Vec<usize> {
    let n = weights.len();
    let mut cum = Vec::with_capacity(n);
    let mut acc = 0.0;
    for w in weights {
        acc += w;
        cum.push(acc);
    }
    let total = acc;
    let pick = |u: f64, start: usize| -> usize {
        let mut i = start;
        while i + 1 < n && cum[i] < u * total {
            i += 1;
        }
        i
    };
    match scheme {
        ResamplingScheme::Multinomial => {
            let mut u: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            u.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut i = 0;
            u.iter().map(|&v| {
                i = pick(v, i);
                i
            }).collect()
        }
        ResamplingScheme::Systematic | ResamplingScheme::Stratified => {
            let u0: f64 = rng.random();
            let mut i = 0;
            (0..n)
                .map(|k| {
                    let v = if scheme == ResamplingScheme::Systematic { u0 } else { rng.random::<f64>() };
                    i = pick((k as f64 + v) / n as f64, i);
                    i
                })
                .collect()
        }
        ResamplingScheme::Residual => {
            let mut out = Vec::with_capacity(n);
            let mut resid = Vec::with_capacity(n);
            for (i, w) in weights.iter().enumerate() {
                let e = n as f64 * w / total;
                let k = e.floor() as usize;
                out.extend(std::iter::repeat_n(i, k));
                resid.push(e - k as f64);
            }
            let rest = n - out.len();
            if rest > 0 {
                let rs: f64 = resid.iter().sum();
                let norm: Vec<f64> = resid.iter().map(|r| r / rs).collect();
                let mut u: Vec<f64> = (0..rest).map(|_| rng.random::<f64>()).collect();
                u.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mut c = 0.0;
                let mut i = 0;
                for v in u {
                    while i + 1 < n && c + norm[i] < v {
                        c += norm[i];
                        i += 1;
                    }
                    out.push(i);
                }
            }
            out
        }
    }
}

/// Resamples `particles` to uniform weights.
pub fn resample<T: Clone, R: Rng + ?Sized>(
    particles: &[T],
    weights: &[f64],
    scheme: ResamplingScheme,
    rng: &mut R,
) -> Vec<T> {
    resample_indices(weights, scheme, rng)
        .into_iter()
        .map(|i| particles[i].clone())
        .collect()
}

fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| FusionError::InvalidParameter(format!("thread pool: {e}")))
}

/// Runs the fusion sampler over `partition` with `n` particles.
pub fn run_fusion(
    sps: &[&dyn SubPosterior],
    partition: &TemporalPartition,
    n: usize,
    cfg: &SmcConfig,
    seed: u64,
) -> Result<FusionRun> {
    if n < 2 {
        return Err(FusionError::InvalidParameter("N must be at least 2".into()));
    }
    if sps.is_empty() {
        return Err(FusionError::InvalidParameter("no sub-posteriors".into()));
    }
    if !(cfg.ess_threshold >= 0.0 && cfg.ess_threshold <= 1.0) {
        return Err(FusionError::InvalidParameter(format!(
            "ess_threshold must be in [0, 1], got {}",
            cfg.ess_threshold
        )));
    }
    cfg.estimator.validate()?;
    let d = sps[0].dim();
    for sp in sps {
        check_dim(d, sp.dim())?;
    }
    let c = sps.len();
    let horizon = partition.horizon();
    let pool = build_pool(cfg.workers)?;
    let start = Instant::now();

    let cv = if cfg.estimator.kind == EstimatorKind::Subsampled {
        Some(ControlVariates::new(sps, None)?)
    } else {
        None
    };

    // initialisation
    let mut states: Vec<ParticleState> = match &cfg.initialisation {
        Initialisation::Standard => {
            let banks = pool.install(|| {
                sps.par_iter()
                    .enumerate()
                    .map(|(k, sp)| sample_initial(*sp, n, rng::child_seed(seed, Domain::Initial, k as u64)))
                    .collect::<Result<Vec<_>>>()
            })?;
            let mut states = Vec::with_capacity(n);
            for i in 0..n {
                let mut flat = Vec::with_capacity(c * d);
                for b in &banks {
                    flat.extend_from_slice(&b.draws()[i]);
                }
                let mut st = ParticleState::from_flat(c, d, flat);
                st.log_weight = rho0_log(&st, horizon)?;
                states.push(st);
            }
            states
        }
        Initialisation::Tilted { theta } => {
            check_dim(d, theta.len())?;
            modified_initial(sps, theta, horizon, n, seed)?
        }
    };
    let log_w0: Vec<f64> = states.iter().map(|s| s.log_weight).collect();
    let cess0 = cess_log(&log_w0).ok_or(FusionError::WeightCollapse { iteration: 0 })?;
    let (mut weights, lse0) = normalise(&log_w0);
    let mut log_normalizer = lse0 - (n as f64).ln();
    log::info!("initialised {n} particles, CESS_0/N = {:.4}", cess0 / n as f64);

    let knots = partition.knots();
    let mut records = Vec::with_capacity(partition.n());
    let mut phi_evals = 0u64;
    let mut non_finite = 0usize;
    for j in 1..=partition.n() {
        let t0 = Instant::now();
        let resampled = ess(&weights) < cfg.ess_threshold * n as f64;
        if resampled {
            let mut r = rng::stream(seed, Domain::Resample, j as u64, 0);
            states = resample(&states, &weights, cfg.resampling, &mut r);
            for s in states.iter_mut() {
                s.recompute_mean();
            }
            weights = vec![1.0 / n as f64; n];
        }
        let spec = TransitionSpec::new(knots[j - 1], knots[j], horizon, c)?;
        let dt = knots[j] - knots[j - 1];
        let step: Vec<(ParticleState, f64, u64)> = pool.install(|| {
            states
                .par_iter()
                .enumerate()
                .map(|(i, st)| {
                    let mut rp = rng::stream(seed, Domain::Propagate, j as u64, i as u64);
                    let next = propagate_factorized(st, &spec, &mut rp)?;
                    let mut re = rng::stream(seed, Domain::Estimate, j as u64, i as u64);
                    let (lr, ev) = rho_tilde(st, &next, dt, sps, cv.as_ref(), &cfg.estimator, &mut re)?;
                    Ok((next, lr, ev))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let mut log_inc = Vec::with_capacity(n);
        let mut next_states = Vec::with_capacity(n);
        for (st, lr, ev) in step {
            phi_evals += ev;
            let lr = if lr.is_nan() {
                non_finite += 1;
                f64::NEG_INFINITY
            } else {
                lr
            };
            log_inc.push(lr);
            next_states.push(st);
        }
        let log_prev: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
        let cess_j = if cfg.weighted_cess {
            cess_log_weighted(&log_prev, &log_inc)
        } else {
            cess_log(&log_inc)
        }
        .ok_or(FusionError::WeightCollapse { iteration: j })?;
        let log_new: Vec<f64> = log_prev.iter().zip(&log_inc).map(|(a, b)| a + b).collect();
        let (w, lse) = normalise(&log_new);
        if !lse.is_finite() {
            return Err(FusionError::WeightCollapse { iteration: j });
        }
        log_normalizer += lse;
        weights = w;
        for (s, lw) in next_states.iter_mut().zip(&log_new) {
            s.log_weight = *lw;
        }
        states = next_states;
        let rec = IterationRecord {
            j,
            cess: cess_j,
            cess_over_n: cess_j / n as f64,
            ess: ess(&weights),
            resampled,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        log::info!(
            "iteration {j}: CESS/N = {:.4}, ESS = {:.1}, resampled = {resampled}",
            rec.cess_over_n,
            rec.ess
        );
        records.push(rec);
    }

    let particles = states.iter().map(|s| s.position(0).to_vec()).collect();
    Ok(FusionRun {
        config: cfg.clone(),
        seed,
        n_particles: n,
        partition: partition.clone(),
        cess0,
        records,
        particles,
        weights,
        log_normalizer,
        phi_evals,
        non_finite,
        final_states: states,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GaussianSubPosterior;

    #[test]
    fn ess_examples() {
        assert!((ess(&[0.25; 4]) - 4.0).abs() < 1e-12);
        assert_eq!(ess(&[1.0, 0.0, 0.0]), 1.0);
        assert!((ess(&[0.5, 0.25, 0.25]) - 1.0 / 0.375).abs() < 1e-12);
    }

    #[test]
    fn cess_examples() {
        assert!((cess(&[0.3; 7]).unwrap() - 7.0).abs() < 1e-12);
        assert_eq!(cess(&[0.0, 2.0, 0.0]).unwrap(), 1.0);
        assert!((cess(&[1.0, 2.0, 3.0]).unwrap() - 36.0 / 14.0).abs() < 1e-12);
        assert!(cess(&[0.0, 0.0]).is_none());
        let logs: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.ln() - 800.0).collect();
        assert!((cess_log(&logs).unwrap() - 36.0 / 14.0).abs() < 1e-10);
        let uniform = vec![(1.0f64 / 3.0).ln(); 3];
        let plain = [1.0f64, 2.0, 3.0].map(f64::ln);
        assert!((cess_log_weighted(&uniform, &plain).unwrap() - 36.0 / 14.0).abs() < 1e-10);
        assert!(cess_log(&[f64::NEG_INFINITY; 2]).is_none());
    }

    const SCHEMES: [ResamplingScheme; 4] = [
        ResamplingScheme::Multinomial,
        ResamplingScheme::Systematic,
        ResamplingScheme::Stratified,
        ResamplingScheme::Residual,
    ];

    #[test]
    fn resample_edge_cases() {
        let mut r = rng::stream(1, Domain::Test, 0, 0);
        let idx = resample_indices(&[0.2; 5], ResamplingScheme::Systematic, &mut r);
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
        let mut one_hot = vec![0.0; 6];
        one_hot[0] = 1.0;
        for s in SCHEMES {
            assert!(resample_indices(&one_hot, s, &mut r).iter().all(|&i| i == 0));
            let p = resample(&["a", "b"], &[0.0, 1.0], s, &mut r);
            assert_eq!(p, vec!["b", "b"]);
        }
    }

    #[test]
    fn resample_offspring_unbiased() {
        let w = [0.05, 0.4, 0.15, 0.3, 0.1];
        let n = w.len();
        let reps = 100_000;
        for s in SCHEMES {
            let mut r = rng::stream(2, Domain::Test, s as u64, 0);
            let mut counts = vec![0usize; n];
            let mut sq = vec![0.0f64; n];
            for _ in 0..reps {
                let mut o = vec![0usize; n];
                for i in resample_indices(&w, s, &mut r) {
                    o[i] += 1;
                }
                for i in 0..n {
                    counts[i] += o[i];
                    sq[i] += (o[i] * o[i]) as f64;
                }
            }
            for i in 0..n {
                let m = counts[i] as f64 / reps as f64;
                let var = sq[i] / reps as f64 - m * m;
                let se = (var / reps as f64).sqrt().max(1e-9);
                assert!((m - n as f64 * w[i]).abs() <= 3.0 * se + 1e-9, "{s:?} particle {i}: {m}");
            }
        }
    }

    fn gaussian_family(means: &[f64], scale: f64) -> Vec<GaussianSubPosterior> {
        means.iter().map(|m| GaussianSubPosterior::new(vec![*m], scale).unwrap()).collect()
    }

    #[test]
    fn determinism_across_workers() {
        let fam = gaussian_family(&[-0.1, 0.0, 0.15], 0.03);
        let sps: Vec<&dyn SubPosterior> = fam.iter().map(|g| g as &dyn SubPosterior).collect();
        let part = TemporalPartition::regular(0.05, 4).unwrap();
        let mut cfg = SmcConfig::default();
        cfg.workers = 1;
        let a = run_fusion(&sps, &part, 300, &cfg, 17).unwrap();
        cfg.workers = 4;
        let b = run_fusion(&sps, &part, 300, &cfg, 17).unwrap();
        assert_eq!(a.particles, b.particles);
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.config_hash(), b.config_hash());
        let c = run_fusion(&sps, &part, 300, &cfg, 18).unwrap();
        assert_ne!(a.particles, c.particles);
    }

    #[test]
    fn run_invariants() {
        let fam = gaussian_family(&[-0.2, 0.2], 0.04);
        let sps: Vec<&dyn SubPosterior> = fam.iter().map(|g| g as &dyn SubPosterior).collect();
        let part = TemporalPartition::regular(0.04, 5).unwrap();
        let run = run_fusion(&sps, &part, 500, &SmcConfig::default(), 3).unwrap();
        assert_eq!(run.records.len(), 5);
        assert!((run.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for s in &run.final_states {
            assert_eq!(s.position(0), s.position(1));
        }
        for r in &run.records {
            assert!(r.cess >= 1.0 - 1e-9 && r.cess <= 500.0 + 1e-9);
        }
        assert!(run_fusion(&sps, &part, 1, &SmcConfig::default(), 3).is_err());
    }

    #[test]
    fn higher_threshold_never_resamples_less() {
        let fam = gaussian_family(&[-0.3, 0.1, 0.3], 0.05);
        let sps: Vec<&dyn SubPosterior> = fam.iter().map(|g| g as &dyn SubPosterior).collect();
        let part = TemporalPartition::regular(0.02, 6).unwrap();
        let mut last = 0;
        for thr in [0.0, 0.3, 0.6, 0.9, 1.0] {
            let cfg = SmcConfig { ess_threshold: thr, ..SmcConfig::default() };
            let run = run_fusion(&sps, &part, 400, &cfg, 5).unwrap();
            assert!(run.resample_count() >= last, "threshold {thr}");
            last = run.resample_count();
        }
        assert_eq!(last, 6);
    }
}
