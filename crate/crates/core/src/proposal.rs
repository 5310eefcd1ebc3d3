//! Exact simulation of the coalescing proposal at the partition knots.

use crate::error::{check_dim, FusionError, Result};
use crate::model::SubPosterior;
use crate::rng::{self, Domain};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// One particle: `C` trajectory positions in `R^d` (stored flat, component
/// major), their average, and a log weight.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleState {
    pub c: usize,
    pub d: usize,
    pub positions: Vec<f64>,
    pub mean: Vec<f64>,
    pub log_weight: f64,
    pub iteration: usize,
}

impl ParticleState {
    pub fn new(positions: Vec<Vec<f64>>) -> Result<Self> {
        let c = positions.len();
        let d = positions.first().ok_or(FusionError::EmptyBank)?.len();
        let mut flat = Vec::with_capacity(c * d);
        for p in &positions {
            check_dim(d, p.len())?;
            flat.extend_from_slice(p);
        }
        Ok(Self::from_flat(c, d, flat))
    }

    pub fn from_flat(c: usize, d: usize, positions: Vec<f64>) -> Self {
        debug_assert_eq!(positions.len(), c * d);
        let mut s = ParticleState { c, d, positions, mean: vec![0.0; d], log_weight: 0.0, iteration: 0 };
        s.recompute_mean();
        s
    }

    pub fn position(&self, c: usize) -> &[f64] {
        &self.positions[c * self.d..(c + 1) * self.d]
    }

    pub fn recompute_mean(&mut self) {
        for k in 0..self.d {
            self.mean[k] = (0..self.c).map(|c| self.positions[c * self.d + k]).sum::<f64>() / self.c as f64;
        }
    }

    /// `sum_c |X^c - X_bar|^2`
    pub fn spread(&self) -> f64 {
        (0..self.c)
            .map(|c| {
                self.position(c)
                    .iter()
                    .zip(&self.mean)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum()
    }
}

/// Gaussian transition of the proposal from time `s` to `t` with horizon `T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionSpec {
    pub s: f64,
    pub t: f64,
    pub horizon: f64,
    pub c: usize,
}

impl TransitionSpec {
    pub fn new(s: f64, t: f64, horizon: f64, c: usize) -> Result<Self> {
        if !(s >= 0.0 && s < t && t <= horizon && horizon.is_finite()) {
            return Err(FusionError::InvalidParameter(format!(
                "transition needs 0 <= s < t <= T, got s={s}, t={t}, T={horizon}"
            )));
        }
        if c == 0 {
            return Err(FusionError::InvalidParameter("C must be at least 1".into()));
        }
        Ok(TransitionSpec { s, t, horizon, c })
    }

    pub fn reaches_horizon(&self) -> bool {
        self.t >= self.horizon
    }

    /// Weights `(w_own, w_mean)` of the mean `M^c = w_own X^c + w_mean X_bar`.
    pub fn mean_weights(&self) -> (f64, f64) {
        let span = self.horizon - self.s;
        ((self.horizon - self.t) / span, (self.t - self.s) / span)
    }

    /// Shared-noise variance `(t - s)^2 / (C (T - s))`.
    pub fn cov_offdiag(&self) -> f64 {
        let dt = self.t - self.s;
        dt * dt / (self.c as f64 * (self.horizon - self.s))
    }

    /// Per-component variance `(t - s)(T - t)/(T - s) + (t - s)^2/(C (T - s))`.
    pub fn cov_diag(&self) -> f64 {
        self.own_variance() + self.cov_offdiag()
    }

    fn own_variance(&self) -> f64 {
        (self.t - self.s) * (self.horizon - self.t) / (self.horizon - self.s)
    }

    /// Flat vector of the `C` component means.
    pub fn means(&self, state: &ParticleState) -> Vec<f64> {
        let (a, b) = self.mean_weights();
        let mut out = Vec::with_capacity(state.c * state.d);
        for c in 0..state.c {
            for (x, m) in state.position(c).iter().zip(&state.mean) {
                out.push(a * x + b * m);
            }
        }
        out
    }
}

/// `log rho_0 = -sum_c |X^c - X_bar|^2 / (2T)`.
pub fn rho0_log(state: &ParticleState, horizon: f64) -> Result<f64> {
    if !(horizon > 0.0) {
        return Err(FusionError::InvalidParameter(format!("T must be positive, got {horizon}")));
    }
    Ok(-state.spread() / (2.0 * horizon))
}

/// Weight of the tilted initialisation: `C |X_bar - theta|^2 / (2T)`.
pub fn modified_initial_log_weight(state: &ParticleState, theta: &[f64], horizon: f64) -> f64 {
    let r2: f64 = state.mean.iter().zip(theta).map(|(a, b)| (a - b) * (a - b)).sum();
    state.c as f64 * r2 / (2.0 * horizon)
}

/// Draws `count` particles whose components come from `f_c` tilted by
/// `exp(-|x - theta|^2 / (2T))`, by rejection from `f_c`. Each particle's
/// `log_weight` is the compensating `C |X_bar - theta|^2 / (2T)`, so the
/// weighted law equals that of plain draws weighted by `rho_0`.
pub fn modified_initial(
    sps: &[&dyn SubPosterior],
    theta: &[f64],
    horizon: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<ParticleState>> {
    if sps.is_empty() || count == 0 {
        return Err(FusionError::InvalidParameter("need sub-posteriors and count >= 1".into()));
    }
    if !(horizon > 0.0) {
        return Err(FusionError::InvalidParameter(format!("T must be positive, got {horizon}")));
    }
    let d = theta.len();
    const MAX_PROPOSALS: usize = 1_000_000;
    let mut per_component: Vec<Vec<Vec<f64>>> = Vec::with_capacity(sps.len());
    for (c, sp) in sps.iter().enumerate() {
        check_dim(d, sp.dim())?;
        let mut accept_rng = rng::stream(seed, Domain::Initial, c as u64, u64::MAX);
        let mut kept = Vec::with_capacity(count);
        let mut proposed = 0usize;
        let mut batch = 0u64;
        while kept.len() < count {
            let size = (2 * (count - kept.len())).clamp(64, 100_000);
            let bank = sp.sample(size, rng::child_seed(seed, Domain::Initial, (c as u64) << 32 | batch))?;
            batch += 1;
            for x in bank.into_draws() {
                proposed += 1;
                let r2: f64 = x.iter().zip(theta).map(|(a, b)| (a - b) * (a - b)).sum();
                if accept_rng.random::<f64>().ln() < -r2 / (2.0 * horizon) {
                    kept.push(x);
                    if kept.len() == count {
                        break;
                    }
                }
            }
            let rate = kept.len() as f64 / proposed as f64;
            if proposed >= MAX_PROPOSALS && rate < 1e-4 {
                return Err(FusionError::LowAcceptance { rate, proposals: proposed });
            }
        }
        per_component.push(kept);
    }
    (0..count)
        .map(|i| {
            let mut st = ParticleState::new(per_component.iter().map(|v| v[i].clone()).collect())?;
            st.log_weight = modified_initial_log_weight(&st, theta, horizon);
            Ok(st)
        })
        .collect()
}

/// Propagates via one shared Gaussian `xi` and per-component `eta^c`:
/// `X^c = M^c + sqrt(Sigma_ij) xi + sqrt(Sigma_ii - Sigma_ij) eta^c`.
/// At `t = T` a single point is drawn and copied into every component.
pub fn propagate_factorized<R: Rng + ?Sized>(
    state: &ParticleState,
    spec: &TransitionSpec,
    rng: &mut R,
) -> Result<ParticleState> {
    check_dim(spec.c, state.c)?;
    let d = state.d;
    let shared = spec.cov_offdiag().sqrt();
    let xi: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let mut out = state.clone();
    if spec.reaches_horizon() {
        let y: Vec<f64> = state.mean.iter().zip(&xi).map(|(m, z)| m + shared * z).collect();
        for c in 0..state.c {
            out.positions[c * d..(c + 1) * d].copy_from_slice(&y);
        }
        out.mean = y;
    } else {
        let own = spec.own_variance().sqrt();
        let means = spec.means(state);
        for c in 0..state.c {
            for k in 0..d {
                let eta: f64 = StandardNormal.sample(rng);
                out.positions[c * d + k] = means[c * d + k] + shared * xi[k] + own * eta;
            }
        }
        out.recompute_mean();
    }
    out.iteration = state.iteration + 1;
    Ok(out)
}

/// Propagates by a Cholesky factor of the full `Cd x Cd` covariance. Slow;
/// kept as a reference for [`propagate_factorized`].
pub fn propagate_joint<R: Rng + ?Sized>(
    state: &ParticleState,
    spec: &TransitionSpec,
    rng: &mut R,
) -> Result<ParticleState> {
    check_dim(spec.c, state.c)?;
    let (c, d) = (state.c, state.d);
    let mut out = state.clone();
    out.iteration = state.iteration + 1;
    if spec.reaches_horizon() {
        // covariance is rank d: every component equals one N(X_bar, (T-s)/C) draw
        let sd = spec.cov_offdiag().sqrt();
        let y: Vec<f64> = state
            .mean
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                m + sd * z
            })
            .collect();
        for k in 0..c {
            out.positions[k * d..(k + 1) * d].copy_from_slice(&y);
        }
        out.mean = y;
        return Ok(out);
    }
    let n = c * d;
    let cov = DMatrix::from_fn(n, n, |i, j| {
        if i % d != j % d {
            0.0
        } else if i == j {
            spec.cov_diag()
        } else {
            spec.cov_offdiag()
        }
    });
    let chol = cov
        .cholesky()
        .ok_or_else(|| FusionError::SingularMatrix("transition covariance".into()))?;
    let z = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
    let noise = chol.l() * z;
    let means = spec.means(state);
    for i in 0..n {
        out.positions[i] = means[i] + noise[i];
    }
    out.recompute_mean();
    Ok(out)
}

/// Brownian bridge marginal at `u` between `(s, x_s)` and `(t, x_t)`.
pub fn bridge_point<R: Rng + ?Sized>(
    x_s: &[f64],
    x_t: &[f64],
    s: f64,
    t: f64,
    u: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_dim(x_s.len(), x_t.len())?;
    if !(s < u && u < t) {
        return Err(FusionError::InvalidParameter(format!("u={u} not inside ({s}, {t})")));
    }
    let span = t - s;
    let sd = ((u - s) * (t - u) / span).sqrt();
    Ok(x_s
        .iter()
        .zip(x_t)
        .map(|(a, b)| {
            let z: f64 = StandardNormal.sample(rng);
            ((t - u) * a + (u - s) * b) / span + sd * z
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GaussianSubPosterior;

    fn test_rng(k: u64) -> rand_chacha::ChaCha8Rng {
        rng::stream(k, Domain::Test, 0, 0)
    }

    #[test]
    fn rho0_examples() {
        let same = ParticleState::new(vec![vec![0.4, 1.0]; 3]).unwrap();
        assert!(rho0_log(&same, 1.0).unwrap().abs() < 1e-15);
        let st = ParticleState::new(vec![vec![0.0], vec![1.0]]).unwrap();
        assert!((rho0_log(&st, 1.0).unwrap() + 0.25).abs() < 1e-15);
        assert!(rho0_log(&st, 1e12).unwrap().abs() < 1e-12);
        assert!(rho0_log(&st, 0.0).is_err());
        // monotone in T and in the spread
        let wider = ParticleState::new(vec![vec![0.0], vec![2.0]]).unwrap();
        assert!(rho0_log(&wider, 1.0).unwrap() < rho0_log(&st, 1.0).unwrap());
        assert!(rho0_log(&st, 2.0).unwrap() > rho0_log(&st, 1.0).unwrap());
    }

    #[test]
    fn transition_example() {
        let spec = TransitionSpec::new(0.0, 0.5, 1.0, 2).unwrap();
        let st = ParticleState::new(vec![vec![0.0], vec![1.0]]).unwrap();
        let m = spec.means(&st);
        assert!((m[0] - 0.25).abs() < 1e-15 && (m[1] - 0.75).abs() < 1e-15);
        assert!((spec.cov_diag() - 0.375).abs() < 1e-15);
        assert!((spec.cov_offdiag() - 0.125).abs() < 1e-15);
        let full = TransitionSpec::new(0.0, 1.0, 1.0, 4).unwrap();
        assert!((full.cov_diag() - full.cov_offdiag()).abs() < 1e-15);
        assert!((full.cov_offdiag() - 0.25).abs() < 1e-15);
        assert!(TransitionSpec::new(0.5, 0.5, 1.0, 2).is_err());
        assert!(TransitionSpec::new(0.2, 1.1, 1.0, 2).is_err());
        let tiny = TransitionSpec::new(0.3, 0.3 + 1e-13, 1.0, 3).unwrap();
        assert!(tiny.cov_diag() < 1e-12);
    }

    #[test]
    fn coalescence_is_exact() {
        let st = ParticleState::new(vec![vec![0.1, -3.0], vec![2.0, 0.5], vec![-1.0, 1.0]]).unwrap();
        let spec = TransitionSpec::new(0.3, 1.0, 1.0, 3).unwrap();
        let mut r = test_rng(1);
        for prop in [propagate_factorized, propagate_joint] {
            let out = prop(&st, &spec, &mut r).unwrap();
            for c in 1..3 {
                assert_eq!(out.position(c), out.position(0));
            }
            assert_eq!(out.mean, out.position(0));
        }
    }

    #[test]
    fn tiny_step_is_nearly_identity() {
        let st = ParticleState::new(vec![vec![0.1], vec![2.0]]).unwrap();
        let spec = TransitionSpec::new(0.0, 1e-14, 1.0, 2).unwrap();
        let out = propagate_factorized(&st, &spec, &mut test_rng(2)).unwrap();
        for (a, b) in out.positions.iter().zip(&st.positions) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn factorized_variance_identity() {
        let mut r = test_rng(3);
        for _ in 0..100 {
            let horizon = r.random_range(0.1..5.0);
            let s = r.random_range(0.0..horizon * 0.9);
            let t = r.random_range(s + 1e-3..=horizon);
            let c = r.random_range(1..6usize);
            let spec = TransitionSpec::new(s, t, horizon, c).unwrap();
            let delta = t - s;
            let shared = delta * delta / (c as f64 * (horizon - s));
            let own = (horizon - t) * delta / (horizon - s);
            assert!((shared + own - spec.cov_diag()).abs() < 1e-12 * spec.cov_diag().max(1.0));
            assert!(spec.cov_diag() >= spec.cov_offdiag() && spec.cov_offdiag() >= 0.0);
        }
    }

    #[test]
    fn bridge_point_moments() {
        let mut r = test_rng(4);
        assert!(bridge_point(&[0.0], &[1.0], 0.0, 1.0, 1.0, &mut r).is_err());
        let n = 200_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let v = bridge_point(&[0.0], &[1.0], 0.0, 1.0, 0.5, &mut r).unwrap()[0];
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!((mean - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt());
        assert!((var - 0.25).abs() < 3.0 * 0.25 * (2.0 / n as f64).sqrt());
        let near = bridge_point(&[0.3], &[1.0], 0.0, 1.0, 1e-14, &mut r).unwrap()[0];
        assert!((near - 0.3).abs() < 1e-6);
    }

    #[test]
    fn modified_initial_weight_example() {
        let st = ParticleState::new(vec![vec![0.05], vec![0.15]]).unwrap();
        let w = modified_initial_log_weight(&st, &[0.0], 0.1);
        assert!((w - 0.1).abs() < 1e-12);
        let g = GaussianSubPosterior::new(vec![0.0], 1.0).unwrap();
        let sps: Vec<&dyn SubPosterior> = vec![&g, &g];
        let ps = modified_initial(&sps, &[0.0], 1e9, 100, 1).unwrap();
        assert_eq!(ps.len(), 100);
        assert!(ps.iter().all(|p| p.log_weight < 1e-8));
        let far = GaussianSubPosterior::new(vec![50.0], 1e-4).unwrap();
        let sps: Vec<&dyn SubPosterior> = vec![&far];
        assert!(matches!(
            modified_initial(&sps, &[0.0], 1e-3, 10, 1),
            Err(FusionError::LowAcceptance { .. })
        ));
    }
}
