use super::{Rect, SampleBank, SubPosterior};
use crate::error::{FusionError, Result};
use crate::partition::HeterogeneitySpec;
use crate::rng::{self, Domain};
use rand_distr::{Distribution, StandardNormal};

/// Isotropic Gaussian sub-posterior `N(mean, scale * I)`.
///
/// In the idealised large-data setting `scale = C b / m`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSubPosterior {
    pub mean: Vec<f64>,
    pub scale: f64,
}

impl GaussianSubPosterior {
    pub fn new(mean: Vec<f64>, scale: f64) -> Result<Self> {
        if mean.is_empty() {
            return Err(FusionError::InvalidParameter("mean must be non-empty".into()));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(FusionError::InvalidParameter(format!("scale must be positive, got {scale}")));
        }
        Ok(GaussianSubPosterior { mean, scale })
    }

    fn sq_dist(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.mean).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    /// Normalised log-density, including the Gaussian constant.
    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let d = self.mean.len() as f64;
        -0.5 * self.sq_dist(x) / self.scale - 0.5 * d * (2.0 * std::f64::consts::PI * self.scale).ln()
    }
}

impl SubPosterior for GaussianSubPosterior {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        self.log_pdf(x)
    }

    fn grad_log_density(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).map(|(a, m)| -(a - m) / self.scale).collect()
    }

    fn laplacian_log_density(&self, _x: &[f64]) -> f64 {
        -(self.mean.len() as f64) / self.scale
    }

    fn phi(&self, x: &[f64]) -> f64 {
        let p = 1.0 / self.scale;
        0.5 * (p * p * self.sq_dist(x) - p * self.mean.len() as f64)
    }

    // phi is increasing in |x - mean|, so the bounds are attained at the
    // nearest point and the farthest corner of the box.
    fn phi_bounds_unchecked(&self, rect: &Rect) -> (f64, f64) {
        let mut near = 0.0;
        let mut far = 0.0;
        for k in 0..self.mean.len() {
            let a = self.mean[k];
            let (lo, hi) = (rect.lo[k], rect.hi[k]);
            let c = a.clamp(lo, hi);
            near += (c - a) * (c - a);
            let f = (lo - a).abs().max((hi - a).abs());
            far += f * f;
        }
        let p = 1.0 / self.scale;
        let d = self.mean.len() as f64;
        (0.5 * (p * p * near - p * d), 0.5 * (p * p * far - p * d))
    }

    fn phi_lower_bound(&self) -> Option<f64> {
        Some(-0.5 * self.mean.len() as f64 / self.scale)
    }

    fn sample(&self, count: usize, seed: u64) -> Result<SampleBank> {
        let mut rng = rng::stream(seed, Domain::Initial, 0, 0);
        let sd = self.scale.sqrt();
        let draws = (0..count)
            .map(|_| {
                self.mean
                    .iter()
                    .map(|m| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + sd * z
                    })
                    .collect()
            })
            .collect();
        SampleBank::new(draws, format!("exact Gaussian sampler, seed {seed}"))
    }
}

/// How sub-posterior means are laid out around the origin.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MeanPlacement {
    /// Every mean at the origin (heterogeneity zero).
    Identical,
    /// Evenly spaced along the first axis, scaled so the heterogeneity equals
    /// the regime's value exactly.
    Spread,
    /// Independent Gaussian offsets whose heterogeneity matches the regime's
    /// value in expectation.
    Random { seed: u64 },
}

/// Builds `C` Gaussian sub-posteriors with covariance `(C b / m) I` whose mean
/// spread follows the heterogeneity regime.
pub fn make_gaussian_family(
    spec: &HeterogeneitySpec,
    placement: MeanPlacement,
) -> Result<Vec<GaussianSubPosterior>> {
    spec.validate()?;
    let c = spec.c;
    let d = spec.d;
    let scale = c as f64 * spec.b / spec.m;
    let target = if c == 1 { 0.0 } else { spec.sigma_a2() };
    let means: Vec<Vec<f64>> = match placement {
        MeanPlacement::Identical => vec![vec![0.0; d]; c],
        MeanPlacement::Spread => {
            let offsets: Vec<f64> = (0..c).map(|i| i as f64 - (c as f64 - 1.0) / 2.0).collect();
            let raw: f64 = offsets.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let s = if raw > 0.0 { (target / raw).sqrt() } else { 0.0 };
            offsets
                .iter()
                .map(|o| {
                    let mut m = vec![0.0; d];
                    m[0] = o * s;
                    m
                })
                .collect()
        }
        MeanPlacement::Random { seed } => {
            let mut rng = rng::stream(seed, Domain::Synthetic, 0, 0);
            let var = if c > 1 {
                target * c as f64 / ((c as f64 - 1.0) * d as f64)
            } else {
                0.0
            };
            let sd = var.sqrt();
            (0..c)
                .map(|_| {
                    (0..d)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            sd * z
                        })
                        .collect()
                })
                .collect()
        }
    };
    means
        .into_iter()
        .map(|m| GaussianSubPosterior::new(m, scale))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testing::*;
    use crate::model::{phi, phi_bounds, sample_initial};
    use crate::partition::{estimate_heterogeneity_means, Regime};
    use rand::Rng;

    #[test]
    fn phi_examples() {
        let sn = GaussianSubPosterior::new(vec![0.0], 1.0).unwrap();
        assert_eq!(phi(&sn, &[0.0]).unwrap(), -0.5);
        // m = 1000, C = 10, b = 1: scale 0.01
        let g = GaussianSubPosterior::new(vec![0.3], 10.0 / 1000.0).unwrap();
        assert!((phi(&g, &[0.3]).unwrap() + 50.0).abs() < 1e-12);
        assert!(phi(&g, &[0.3 + 0.1]).unwrap().abs() < 1e-9);
        assert!(phi(&g, &[0.3, 0.0]).is_err());
    }

    #[test]
    fn phi_matches_closed_form_and_derivatives() {
        let mut rng = rng::stream(1, Domain::Test, 0, 0);
        for _ in 0..100 {
            let d = rng.random_range(1..5usize);
            let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let scale = rng.random_range(0.05..3.0);
            let g = GaussianSubPosterior::new(mean.clone(), scale).unwrap();
            let x: Vec<f64> = mean
                .iter()
                .map(|m| m + 3.0 * scale.sqrt() * rng.random_range(-1.0..1.0))
                .collect();
            let r2: f64 = x.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum();
            let closed = 0.5 * r2 / (scale * scale) - 0.5 * d as f64 / scale;
            let generic = {
                let gr = g.grad_log_density(&x);
                0.5 * (gr.iter().map(|v| v * v).sum::<f64>() + g.laplacian_log_density(&x))
            };
            assert!((g.phi(&x) - closed).abs() <= 1e-12 * closed.abs().max(1.0));
            assert!((generic - closed).abs() <= 1e-12 * closed.abs().max(1.0));
            let fd = fd_gradient(&g, &x, 1e-5 * scale.sqrt());
            for (a, b) in fd.iter().zip(g.grad_log_density(&x)) {
                assert!(rel_err(*a, b) < 1e-5, "{a} vs {b}");
            }
            let lap = fd_laplacian(&g, &x, 1e-3 * scale.sqrt());
            assert!(rel_err(lap, g.laplacian_log_density(&x)) < 1e-4);
            assert!(g.phi(&x) >= g.phi_lower_bound().unwrap());
        }
    }

    #[test]
    fn bounds_examples() {
        let sn = GaussianSubPosterior::new(vec![0.0], 1.0).unwrap();
        let r = Rect::new(vec![-1.0], vec![1.0]).unwrap();
        assert_eq!(phi_bounds(&sn, &r).unwrap(), (-0.5, 0.0));
        // d = 2 box containing the mean: L = Phi, U at the farthest corner.
        let g = GaussianSubPosterior::new(vec![0.2, -0.1], 0.5).unwrap();
        let r = Rect::new(vec![-1.0, -0.5], vec![0.5, 2.0]).unwrap();
        let (l, u) = phi_bounds(&g, &r).unwrap();
        assert_eq!(l, g.phi_lower_bound().unwrap());
        let corners = [[-1.0, -0.5], [-1.0, 2.0], [0.5, -0.5], [0.5, 2.0]];
        let best = corners.iter().map(|c| g.phi(c)).fold(f64::NEG_INFINITY, f64::max);
        assert!((u - best).abs() < 1e-12);
        let bad = Rect { lo: vec![f64::NEG_INFINITY, 0.0], hi: vec![0.0, 1.0] };
        assert!(matches!(phi_bounds(&g, &bad), Err(FusionError::UnboundedRegion(0))));
    }

    #[test]
    fn bounds_are_sound_on_uniform_points() {
        let g = GaussianSubPosterior::new(vec![0.2, -0.1, 0.4], 0.05).unwrap();
        let r = Rect::new(vec![-0.3, 0.0, 0.5], vec![0.1, 0.4, 0.9]).unwrap();
        let (l, u) = phi_bounds(&g, &r).unwrap();
        let mut rng = rng::stream(2, Domain::Test, 0, 0);
        for _ in 0..10_000 {
            let x: Vec<f64> = (0..3).map(|k| rng.random_range(r.lo[k]..=r.hi[k])).collect();
            let v = g.phi(&x);
            assert!(v >= l - 1e-9 && v <= u + 1e-9);
        }
    }

    #[test]
    fn exact_sampler_mean() {
        let g = GaussianSubPosterior::new(vec![0.0], 1.0).unwrap();
        let bank = sample_initial(&g, 100_000, 5).unwrap();
        assert_eq!(bank.len(), 100_000);
        assert!(bank.mean()[0].abs() < 0.02);
        assert!(sample_initial(&g, 0, 5).is_err());
    }

    fn spec(regime: Regime, c: usize, m: f64, d: usize) -> HeterogeneitySpec {
        HeterogeneitySpec::new(regime, c, m, 1.0, d)
    }

    #[test]
    fn family_heterogeneity() {
        let sh = spec(Regime::Sh { lambda: 1.0 }, 10, 1000.0, 1);
        let fam = make_gaussian_family(&sh, MeanPlacement::Identical).unwrap();
        assert_eq!(fam.len(), 10);
        let means: Vec<Vec<f64>> = fam.iter().map(|g| g.mean.clone()).collect();
        assert_eq!(estimate_heterogeneity_means(&means).unwrap(), 0.0);
        assert!((fam[0].scale - 0.01).abs() < 1e-15);

        let ssh = spec(Regime::Ssh { gamma: 0.0625 }, 2, 1000.0, 1);
        let fam = make_gaussian_family(&ssh, MeanPlacement::Spread).unwrap();
        assert!((fam[0].mean[0] + 0.25).abs() < 1e-12 && (fam[1].mean[0] - 0.25).abs() < 1e-12);
        let means: Vec<Vec<f64>> = fam.iter().map(|g| g.mean.clone()).collect();
        assert!((estimate_heterogeneity_means(&means).unwrap() - 0.0625).abs() < 1e-12);

        let sh = spec(Regime::Sh { lambda: 2.0 }, 7, 500.0, 3);
        let fam = make_gaussian_family(&sh, MeanPlacement::Spread).unwrap();
        let means: Vec<Vec<f64>> = fam.iter().map(|g| g.mean.clone()).collect();
        let want = 1.0 * 6.0 * 2.0 / 500.0;
        assert!((estimate_heterogeneity_means(&means).unwrap() - want).abs() < 1e-12);

        let one = spec(Regime::Sh { lambda: 1.0 }, 1, 100.0, 2);
        let fam = make_gaussian_family(&one, MeanPlacement::Spread).unwrap();
        assert_eq!(fam.len(), 1);
        assert_eq!(fam[0].mean, vec![0.0, 0.0]);
    }

    #[test]
    fn random_placement_matches_in_expectation() {
        let sh = spec(Regime::Sh { lambda: 1.5 }, 5, 1000.0, 2);
        let target = sh.sigma_a2();
        let reps = 4000;
        let mut acc = 0.0;
        for s in 0..reps {
            let fam = make_gaussian_family(&sh, MeanPlacement::Random { seed: s }).unwrap();
            let means: Vec<Vec<f64>> = fam.iter().map(|g| g.mean.clone()).collect();
            acc += estimate_heterogeneity_means(&means).unwrap();
        }
        let avg = acc / reps as f64;
        // sigma_a^2 is a scaled chi-square with (C-1)d = 8 degrees of freedom.
        let se = target * (2.0 / 8.0f64).sqrt() / (reps as f64).sqrt();
        assert!((avg - target).abs() < 4.0 * se, "{avg} vs {target}");
    }
}
