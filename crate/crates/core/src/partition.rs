//! Temporal partitions and the tuning guidance for the horizon `T` and the
//! mesh size.

use crate::error::{check_dim, FusionError, Result};
use crate::model::SampleBank;
use serde::{Deserialize, Serialize};

/// Knots `0 = t_0 < t_1 < ... < t_n = T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalPartition {
    knots: Vec<f64>,
}

impl TemporalPartition {
    /// A regular mesh with `n` equal increments over `[0, T]`.
    pub fn regular(horizon: f64, n: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(FusionError::InvalidParameter(format!("T must be positive, got {horizon}")));
        }
        if n == 0 {
            return Err(FusionError::InvalidParameter("n must be at least 1".into()));
        }
        let delta = horizon / n as f64;
        let mut knots: Vec<f64> = (0..n).map(|j| j as f64 * delta).collect();
        knots.push(horizon);
        Ok(TemporalPartition { knots })
    }

    /// An arbitrary partition; knots must start at 0 and strictly increase.
    pub fn from_knots(knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 || knots[0] != 0.0 {
            return Err(FusionError::InvalidParameter(
                "partition needs at least two knots starting at 0".into(),
            ));
        }
        for w in knots.windows(2) {
            if !(w[1] > w[0]) || !w[1].is_finite() {
                return Err(FusionError::InvalidParameter(format!(
                    "knots must strictly increase ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        Ok(TemporalPartition { knots })
    }

    pub fn horizon(&self) -> f64 {
        *self.knots.last().unwrap()
    }

    pub fn n(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// `Δ_j = t_j - t_{j-1}` for `j = 1..=n`.
    pub fn increments(&self) -> Vec<f64> {
        self.knots.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn is_regular(&self) -> bool {
        let inc = self.increments();
        let max = inc.iter().cloned().fold(f64::MIN, f64::max);
        let min = inc.iter().cloned().fold(f64::MAX, f64::min);
        max - min < 1e-12 * self.horizon()
    }
}

/// Heterogeneity regime of the sub-posterior means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `sigma_a^2 = b (C - 1) lambda / m`
    Sh { lambda: f64 },
    /// `sigma_a^2 = b gamma`
    Ssh { gamma: f64 },
}

fn default_k1() -> f64 {
    2.0
}
fn default_one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneitySpec {
    pub regime: Regime,
    #[serde(rename = "C")]
    pub c: usize,
    pub m: f64,
    #[serde(default = "default_one")]
    pub b: f64,
    pub d: usize,
    #[serde(default = "default_k1")]
    pub k1: f64,
    #[serde(default = "default_one")]
    pub k2: f64,
    #[serde(default = "default_one")]
    pub k3: f64,
    #[serde(default = "default_one")]
    pub k4: f64,
    /// Proportionality constant of the mesh-size guidance.
    #[serde(default = "default_one")]
    pub c0: f64,
}

impl HeterogeneitySpec {
    /// Spec with default constants `k1 = 2`, `k2 = k3 = k4 = c0 = 1`.
    pub fn new(regime: Regime, c: usize, m: f64, b: f64, d: usize) -> Self {
        HeterogeneitySpec { regime, c, m, b, d, k1: 2.0, k2: 1.0, k3: 1.0, k4: 1.0, c0: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| {
            Err(FusionError::InvalidParameter(format!("{what} must be positive, got {v}")))
        };
        if self.c < 1 {
            return Err(FusionError::InvalidParameter("C must be at least 1".into()));
        }
        if self.d < 1 {
            return Err(FusionError::InvalidParameter("d must be at least 1".into()));
        }
        for (name, v) in [
            ("m", self.m),
            ("b", self.b),
            ("k1", self.k1),
            ("k2", self.k2),
            ("k3", self.k3),
            ("k4", self.k4),
            ("c0", self.c0),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(name, v);
            }
        }
        match self.regime {
            Regime::Sh { lambda } if !(lambda > 0.0 && lambda.is_finite()) => bad("lambda", lambda),
            Regime::Ssh { gamma } if !(gamma > 0.0 && gamma.is_finite()) => bad("gamma", gamma),
            _ => Ok(()),
        }
    }

    /// The mean spread `sigma_a^2` implied by the regime.
    pub fn sigma_a2(&self) -> f64 {
        match self.regime {
            Regime::Sh { lambda } => self.b * (self.c as f64 - 1.0) * lambda / self.m,
            Regime::Ssh { gamma } => self.b * gamma,
        }
    }
}

/// `sigma_a^2 = C^{-1} sum_c |a_c - a_bar|^2` from a list of means.
pub fn estimate_heterogeneity_means(means: &[Vec<f64>]) -> Result<f64> {
    let first = means.first().ok_or(FusionError::EmptyBank)?;
    let d = first.len();
    for m in means {
        check_dim(d, m.len())?;
    }
    let c = means.len() as f64;
    let abar: Vec<f64> = (0..d).map(|k| means.iter().map(|m| m[k]).sum::<f64>() / c).collect();
    Ok(means
        .iter()
        .map(|m| m.iter().zip(&abar).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum::<f64>()
        / c)
}

/// Heterogeneity estimated from the sample means of each bank.
pub fn estimate_heterogeneity(banks: &[SampleBank]) -> Result<f64> {
    let means: Vec<Vec<f64>> = banks.iter().map(|b| b.mean()).collect();
    estimate_heterogeneity_means(&means)
}

/// Estimates `b` from banks as `m tr((sum_c S_c^{-1})^{-1}) / d`, i.e. the
/// per-coordinate variance of the fused Gaussian approximation times `m`.
pub fn estimate_b(banks: &[SampleBank], m: f64) -> Result<f64> {
    use nalgebra::DMatrix;
    let d = banks.first().ok_or(FusionError::EmptyBank)?.dim();
    let mut prec = DMatrix::<f64>::zeros(d, d);
    for b in banks {
        check_dim(d, b.dim())?;
        let s = DMatrix::from_row_slice(d, d, &b.covariance());
        let inv = s
            .try_inverse()
            .ok_or_else(|| FusionError::SingularMatrix("bank covariance".into()))?;
        prec += inv;
    }
    let cov = prec
        .try_inverse()
        .ok_or_else(|| FusionError::SingularMatrix("summed precision".into()))?;
    Ok(m * cov.trace() / d as f64)
}

/// Minimal horizon: `T = b C^{3/2} k1 / m`, and under SSH at least `k2 C^{-3/2}`.
pub fn recommend_t(spec: &HeterogeneitySpec) -> Result<f64> {
    spec.validate()?;
    let c = spec.c as f64;
    let t = spec.b * c.powf(1.5) * spec.k1 / spec.m;
    Ok(match spec.regime {
        Regime::Sh { .. } => t,
        Regime::Ssh { .. } => t.max(spec.k2 * c.powf(-1.5)),
    })
}

/// Mesh-size ceiling for the regime: `c0 b C^{2/3} / m` (SH) or
/// `c0 b C / m^{4/3}` (SSH).
pub fn mesh_ceiling(spec: &HeterogeneitySpec) -> f64 {
    let c = spec.c as f64;
    match spec.regime {
        Regime::Sh { .. } => spec.c0 * spec.b * c.powf(2.0 / 3.0) / spec.m,
        Regime::Ssh { .. } => spec.c0 * spec.b * c / spec.m.powf(4.0 / 3.0),
    }
}

/// Regular mesh over `[0, T]` with `n = ceil(T / ceiling)`.
pub fn recommend_mesh(spec: &HeterogeneitySpec, horizon: f64) -> Result<TemporalPartition> {
    spec.validate()?;
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(FusionError::InvalidParameter(format!("T must be positive, got {horizon}")));
    }
    let ceiling = mesh_ceiling(spec);
    // guard against T/ceiling landing a hair above an integer
    let ratio = horizon / ceiling;
    let mut n = ratio.ceil().max(1.0) as usize;
    if n > 1 && (ratio - (n - 1) as f64) < 1e-12 * ratio {
        n -= 1;
    }
    TemporalPartition::regular(horizon, n)
}

pub fn cess_floor_sh(lambda: f64, k1: f64, d: usize) -> f64 {
    (-lambda / (k1 * k1) - d as f64 / (2.0 * k1 * k1)).exp()
}

pub fn cess_floor_ssh(gamma: f64, b: f64, k1: f64, k2: f64, d: usize) -> f64 {
    (-gamma * b / (k1 * k2) - d as f64 / (2.0 * k1 * k1)).exp()
}

/// Limiting lower bounds on `CESS_0 / N` under each regime.
///
/// The spec names one regime constant; the other regime's constant is the one
/// giving the same `sigma_a^2` (`gamma = (C-1) lambda / m`).
pub fn cess_floor(spec: &HeterogeneitySpec) -> Result<(f64, f64)> {
    spec.validate()?;
    let c1 = spec.c as f64 - 1.0;
    let (lambda, gamma) = match spec.regime {
        Regime::Sh { lambda } => (lambda, c1 * lambda / spec.m),
        Regime::Ssh { gamma } => {
            let lambda = if c1 > 0.0 { gamma * spec.m / c1 } else { 0.0 };
            (lambda, gamma)
        }
    };
    Ok((
        cess_floor_sh(lambda, spec.k1, spec.d),
        cess_floor_ssh(gamma, spec.b, spec.k1, spec.k2, spec.d),
    ))
}

/// Large-N limit of `CESS_0 / N` for Gaussian sub-posteriors with covariance
/// `(C b / m) I` and mean spread `sigma_a2`.
pub fn cess0_limit(c: usize, d: usize, m: f64, b: f64, sigma_a2: f64, horizon: f64) -> f64 {
    let cf = c as f64;
    let bm = b / m;
    let tc = horizon / cf;
    let first = -(sigma_a2 * bm) / ((tc + bm) * (tc + 2.0 * bm));
    let r = cf * b / (horizon * m);
    let second = -((cf - 1.0) * d as f64 / 2.0) * (1.0 + r * r / (1.0 + 2.0 * r)).ln();
    (first + second).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sh(lambda: f64, c: usize, m: f64, d: usize) -> HeterogeneitySpec {
        HeterogeneitySpec::new(Regime::Sh { lambda }, c, m, 1.0, d)
    }

    #[test]
    fn heterogeneity_examples() {
        let same = vec![vec![0.3, 1.0]; 4];
        assert_eq!(estimate_heterogeneity_means(&same).unwrap(), 0.0);
        let v = estimate_heterogeneity_means(&[vec![-0.25], vec![0.25]]).unwrap();
        assert!((v - 0.0625).abs() < 1e-15);
        let v = estimate_heterogeneity_means(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-15);
        assert!(estimate_heterogeneity_means(&[vec![0.0], vec![1.0, 2.0]]).is_err());

        let banks = vec![
            SampleBank::new(vec![vec![-0.5], vec![0.0]], "a").unwrap(),
            SampleBank::new(vec![vec![0.25], vec![0.25]], "b").unwrap(),
        ];
        assert!((estimate_heterogeneity(&banks).unwrap() - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn recommend_t_examples() {
        let s = sh(1.0, 10, 1000.0, 1);
        let t = recommend_t(&s).unwrap();
        assert!((t - 2.0 * 10f64.powf(1.5) / 1000.0).abs() < 1e-15);
        assert!((t - 0.06325).abs() < 1e-5);

        let mut s2 = s.clone();
        s2.regime = Regime::Ssh { gamma: 1.0 };
        assert!((recommend_t(&s2).unwrap() - t).abs() < 1e-15);
        s2.k2 = 5.0;
        assert!((recommend_t(&s2).unwrap() - 5.0 * 10f64.powf(-1.5)).abs() < 1e-15);

        let one = sh(1.0, 1, 500.0, 2);
        assert!((recommend_t(&one).unwrap() - 2.0 / 500.0).abs() < 1e-15);
    }

    #[test]
    fn recommend_mesh_examples() {
        let s = sh(1.0, 10, 1000.0, 1);
        let p = recommend_mesh(&s, 0.025).unwrap();
        assert_eq!(p.n(), 6);
        assert!((p.increments()[0] - 0.025 / 6.0).abs() < 1e-15);
        assert!((mesh_ceiling(&s) - 0.004642).abs() < 1e-6);
        assert!(p.is_regular());
        assert_eq!(p.knots()[0], 0.0);
        assert_eq!(p.horizon(), 0.025);

        let p = recommend_mesh(&s, 1e-4).unwrap();
        assert_eq!(p.n(), 1);

        let fixed = TemporalPartition::regular(0.005, 5).unwrap();
        assert_eq!(fixed.n(), 5);
        assert!(fixed.is_regular());
        assert!(TemporalPartition::regular(0.0, 5).is_err());
        assert!(TemporalPartition::from_knots(vec![0.0, 0.2, 0.1]).is_err());
    }

    #[test]
    fn mesh_respects_ceiling_on_grid() {
        for regime in [Regime::Sh { lambda: 1.0 }, Regime::Ssh { gamma: 0.5 }] {
            for c in [1, 2, 5, 10, 20] {
                for m in [100.0, 1000.0, 12345.0, 1e6] {
                    for t in [1e-4, 0.0123, 0.3, 2.0] {
                        let mut s = sh(1.0, c, m, 1);
                        s.regime = regime;
                        let p = recommend_mesh(&s, t).unwrap();
                        assert!(p.increments()[0] <= mesh_ceiling(&s) * (1.0 + 1e-12));
                        assert!(p.is_regular());
                        assert!((p.horizon() - t).abs() == 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn cess_floor_examples() {
        let s = sh(1.0, 10, 1000.0, 1);
        let (f, _) = cess_floor(&s).unwrap();
        assert!((f - (-0.375f64).exp()).abs() < 1e-15);
        assert!((f - 0.6873).abs() < 1e-4);
        assert!((cess_floor_sh(1.0, 1e8, 1) - 1.0).abs() < 1e-12);
        let mut s = HeterogeneitySpec::new(Regime::Ssh { gamma: 1.0 }, 2, 1000.0, 1.0, 1);
        s.k2 = 2.0;
        let (_, g) = cess_floor(&s).unwrap();
        assert!((g - 0.6873).abs() < 1e-4);
    }

    #[test]
    fn cess_floor_monotone() {
        let ks = [0.5, 1.0, 2.0, 4.0, 8.0];
        let cs = [0.1, 0.5, 1.0, 2.0, 5.0];
        for d in 1..4 {
            for w in ks.windows(2) {
                for &v in &cs {
                    assert!(cess_floor_sh(v, w[1], d) >= cess_floor_sh(v, w[0], d));
                    assert!(cess_floor_ssh(v, 1.0, w[1], 1.0, d) >= cess_floor_ssh(v, 1.0, w[0], 1.0, d));
                }
            }
            for w in cs.windows(2) {
                for &k in &ks {
                    assert!(cess_floor_sh(w[1], k, d) <= cess_floor_sh(w[0], k, d));
                    assert!(cess_floor_ssh(w[1], 1.0, k, 1.0, d) <= cess_floor_ssh(w[0], 1.0, k, 1.0, d));
                }
            }
        }
    }

    #[test]
    fn cess0_limit_respects_floor() {
        for c in [2, 5, 10, 20] {
            for m in [1000.0, 1e4, 1e5] {
                for lambda in [0.5, 1.0, 3.0] {
                    let s = sh(lambda, c, m, 1);
                    let t = recommend_t(&s).unwrap();
                    let v = cess0_limit(c, 1, m, 1.0, s.sigma_a2(), t);
                    let (floor, _) = cess_floor(&s).unwrap();
                    assert!(v >= floor - 1e-12, "{v} < {floor}");
                    assert!(v <= 1.0);
                }
            }
        }
        // no heterogeneity and T -> infinity
        assert!((cess0_limit(4, 2, 100.0, 1.0, 0.0, 1e9) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn spec_validation_and_serde() {
        let mut s = sh(1.0, 3, 100.0, 2);
        assert!(s.validate().is_ok());
        s.k1 = 0.0;
        assert!(s.validate().is_err());
        let s = sh(-1.0, 3, 100.0, 2);
        assert!(s.validate().is_err());
        let json = r#"{"regime":{"ssh":{"gamma":0.0625}},"C":2,"m":1000,"d":1}"#;
        let s: HeterogeneitySpec = serde_json::from_str(json).unwrap();
        assert_eq!(s.k1, 2.0);
        assert_eq!(s.c0, 1.0);
        assert_eq!(s.b, 1.0);
        assert!((s.sigma_a2() - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn b_from_gaussian_banks() {
        use crate::model::{sample_initial, GaussianSubPosterior};
        // two cores with variance C b / m = 2 * 1 / 100 -> b = 1
        let g = GaussianSubPosterior::new(vec![0.0, 0.0], 0.02).unwrap();
        let banks: Vec<SampleBank> =
            (0..2).map(|s| sample_initial(&g, 20_000, s).unwrap()).collect();
        let b = estimate_b(&banks, 100.0).unwrap();
        assert!((b - 1.0).abs() < 0.03, "{b}");
    }
}
