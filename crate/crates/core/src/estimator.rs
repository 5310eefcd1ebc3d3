//! Unbiased estimators of the incremental weights.
//!
//! For one component and one partition interval of length `dt`, the target
//! is `exp(-int_0^dt phi(X_s) ds)` along the bridge between the interval's
//! endpoints. A layer gives `L <= phi <= U` on the path, and a random number
//! of uniformly placed path evaluations gives an unbiased, non-negative
//! estimate.

use crate::bridge::{simulate_layer, simulate_points_given_layer, Layer, Segment};
use crate::error::{check_dim, FusionError, Result};
use crate::model::{phi_bounds, Interval, LogisticSubPosterior, Rect, SubPosterior};
use crate::proposal::ParticleState;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use std::sync::OnceLock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Poisson count with intensity `dt (U - L)`.
    UeA,
    /// Negative binomial count centred on a chord estimate of the integral.
    UeB,
    /// Poisson count with `phi` replaced by a control-variate subsampling
    /// estimate (logistic sub-posteriors only).
    Subsampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanRule {
    ExactIntegral,
    EndpointAverage,
}

fn default_granularity() -> f64 {
    1.0
}
fn default_layer_cap() -> usize {
    50
}
fn default_kappa_cap() -> u64 {
    10_000
}
fn default_draws() -> usize {
    1
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    /// Negative binomial dispersion; `None` uses the mean itself.
    #[serde(default)]
    pub dispersion: Option<f64>,
    #[serde(default = "default_mean_rule")]
    pub mean_rule: MeanRule,
    #[serde(default = "default_draws")]
    pub subsample_draws: usize,
    /// Layer band width in units of `sqrt(dt)`.
    #[serde(default = "default_granularity")]
    pub granularity: f64,
    #[serde(default = "default_layer_cap")]
    pub layer_cap: usize,
    #[serde(default = "default_kappa_cap")]
    pub kappa_cap: u64,
    /// Condition intermediate points on the exact layer event.
    #[serde(default = "default_true")]
    pub exact_layers: bool,
}

fn default_mean_rule() -> MeanRule {
    MeanRule::ExactIntegral
}

impl EstimatorConfig {
    pub fn new(kind: EstimatorKind) -> Self {
        EstimatorConfig {
            kind,
            dispersion: None,
            mean_rule: MeanRule::ExactIntegral,
            subsample_draws: 1,
            granularity: 1.0,
            layer_cap: 50,
            kappa_cap: 10_000,
            exact_layers: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.dispersion {
            if !(r > 0.0 && r.is_finite()) {
                return Err(FusionError::InvalidParameter(format!("dispersion must be positive, got {r}")));
            }
        }
        if self.subsample_draws == 0 {
            return Err(FusionError::InvalidParameter("subsample_draws must be at least 1".into()));
        }
        if !(self.granularity > 0.0 && self.granularity.is_finite()) {
            return Err(FusionError::InvalidParameter(format!("granularity {}", self.granularity)));
        }
        if self.layer_cap == 0 || self.kappa_cap == 0 {
            return Err(FusionError::InvalidParameter("caps must be positive".into()));
        }
        Ok(())
    }
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig::new(EstimatorKind::UeA)
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, 0.0);
            for j in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * j + 1) as f64 * z * p1 - j as f64 * p2) / (j + 1) as f64;
            }
            dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

fn gl16() -> &'static (Vec<f64>, Vec<f64>) {
    static GL: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    GL.get_or_init(|| gauss_legendre(16))
}

fn chord_point(seg: &Segment, frac: f64) -> Vec<f64> {
    seg.x0.iter().zip(&seg.x1).map(|(a, b)| a + frac * (b - a)).collect()
}

/// `int_0^dt g(phi(chord(s))) ds` by Gauss-Legendre quadrature.
fn chord_integral(seg: &Segment, sp: &dyn SubPosterior, nodes: &(Vec<f64>, Vec<f64>), g: impl Fn(f64) -> f64) -> f64 {
    let (x, w) = nodes;
    let s: f64 = x
        .iter()
        .zip(w)
        .map(|(xi, wi)| wi * g(sp.phi(&chord_point(seg, 0.5 * (xi + 1.0)))))
        .sum();
    0.5 * seg.dt * s
}

/// Negative binomial mean `dt U - int phi` along the straight chord, clamped
/// below at `1e-12`.
pub fn ue_b_mean(seg: &Segment, sp: &dyn SubPosterior, upper: f64, rule: MeanRule) -> f64 {
    let integral = match rule {
        MeanRule::ExactIntegral => chord_integral(seg, sp, gl16(), |v| v),
        MeanRule::EndpointAverage => 0.5 * seg.dt * (sp.phi(&seg.x0) + sp.phi(&seg.x1)),
    };
    (seg.dt * upper - integral).max(1e-12)
}

/// The variance-minimising Poisson intensity `[dt int (U - phi)^2]^{1/2}`,
/// with the integral taken along the chord. Diagnostic only.
pub fn optimal_intensity_reference(seg: &Segment, sp: &dyn SubPosterior, upper: f64, quad_points: usize) -> f64 {
    let nodes = gauss_legendre(quad_points.max(1));
    (seg.dt * chord_integral(seg, sp, &nodes, |v| (upper - v) * (upper - v))).sqrt()
}

/// Cached derivatives at the two anchors used by the subsampling estimator.
#[derive(Debug, Clone)]
pub struct CvAnchor {
    /// Sub-posterior mode estimate and global posterior mode estimate.
    pub points: [Vec<f64>; 2],
    term_grads: [Vec<Vec<f64>>; 2],
    term_laps: [Vec<f64>; 2],
    grads: [Vec<f64>; 2],
    phis: [f64; 2],
}

impl CvAnchor {
    pub fn new(sp: &LogisticSubPosterior, local: Vec<f64>, global: Vec<f64>) -> Result<Self> {
        check_dim(sp.dim(), local.len())?;
        check_dim(sp.dim(), global.len())?;
        if local.iter().chain(&global).any(|v| !v.is_finite()) {
            return Err(FusionError::InvalidParameter("anchors must be finite".into()));
        }
        let cache = |x: &[f64]| {
            let (g, l): (Vec<Vec<f64>>, Vec<f64>) =
                (0..=sp.datum_count()).map(|i| sp.term_derivatives(i, x)).unzip();
            (g, l)
        };
        let (g0, l0) = cache(&local);
        let (g1, l1) = cache(&global);
        Ok(CvAnchor {
            grads: [sp.grad_log_density(&local), sp.grad_log_density(&global)],
            phis: [sp.phi(&local), sp.phi(&global)],
            points: [local, global],
            term_grads: [g0, g1],
            term_laps: [l0, l1],
        })
    }

    fn nearest(&self, x: &[f64]) -> usize {
        let dist = |p: &[f64]| p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        usize::from(dist(&self.points[1]) < dist(&self.points[0]))
    }

    /// Gradient at anchor `a`, for checking the caches.
    pub fn cached_grad(&self, a: usize) -> &[f64] {
        &self.grads[a]
    }
}

/// Per-component anchors for every sub-posterior.
#[derive(Debug, Clone)]
pub struct ControlVariates {
    pub anchors: Vec<CvAnchor>,
}

impl ControlVariates {
    /// Anchors at each shard's mode and at `global`, or when `global` is
    /// `None`, at the precision-weighted combination of the shard modes.
    pub fn new(sps: &[&dyn SubPosterior], global: Option<Vec<f64>>) -> Result<Self> {
        use nalgebra::{DMatrix, DVector};
        let shards: Vec<&LogisticSubPosterior> = sps
            .iter()
            .map(|s| s.as_logistic().ok_or(FusionError::UnsupportedModel("logistic sub-posteriors")))
            .collect::<Result<_>>()?;
        let d = shards.first().ok_or(FusionError::EmptyBank)?.dim();
        let modes: Vec<Vec<f64>> = shards.iter().map(|s| s.mode()).collect::<Result<_>>()?;
        let global = match global {
            Some(g) => g,
            None => {
                let mut prec = DMatrix::<f64>::zeros(d, d);
                let mut lin = DVector::<f64>::zeros(d);
                for (s, m) in shards.iter().zip(&modes) {
                    let cov = DMatrix::from_row_slice(d, d, &s.laplace_covariance(m)?);
                    let p = cov
                        .try_inverse()
                        .ok_or_else(|| FusionError::SingularMatrix("Laplace covariance".into()))?;
                    lin += &p * DVector::from_column_slice(m);
                    prec += p;
                }
                let x = prec
                    .lu()
                    .solve(&lin)
                    .ok_or_else(|| FusionError::SingularMatrix("summed precision".into()))?;
                x.as_slice().to_vec()
            }
        };
        let anchors = shards
            .iter()
            .zip(modes)
            .map(|(s, m)| CvAnchor::new(s, m, global.clone()))
            .collect::<Result<_>>()?;
        Ok(ControlVariates { anchors })
    }
}

/// One realisation of the control-variate estimate of `phi` at `x`, with
/// the anchor `a` and terms `I`, `J`.
fn phi_hat_once(sp: &LogisticSubPosterior, cv: &CvAnchor, a: usize, x: &[f64], i: usize, j: usize) -> f64 {
    let scale = (sp.datum_count() + 1) as f64;
    let (gi, li) = sp.term_derivatives(i, x);
    let (gj, _) = if j == i { (gi.clone(), li) } else { sp.term_derivatives(j, x) };
    let gs = &cv.grads[a];
    let mut dot = 0.0;
    for k in 0..x.len() {
        let ai = scale * (gi[k] - cv.term_grads[a][i][k]);
        let aj = scale * (gj[k] - cv.term_grads[a][j][k]);
        dot += ai * (2.0 * gs[k] + aj);
    }
    let div = scale * (li - cv.term_laps[a][i]);
    0.5 * (dot + div) + cv.phis[a]
}

/// Average of `draws` independent control-variate estimates of `phi(x)`,
/// with `I, J` uniform on `{0, ..., m_c}` and the anchor nearest to `x`.
pub fn subsampled_phi<R: Rng + ?Sized>(
    sp: &LogisticSubPosterior,
    cv: &CvAnchor,
    x: &[f64],
    draws: usize,
    rng: &mut R,
) -> f64 {
    let a = cv.nearest(x);
    let n = sp.datum_count() + 1;
    let mut acc = 0.0;
    for _ in 0..draws.max(1) {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        acc += phi_hat_once(sp, cv, a, x, i, j);
    }
    acc / draws.max(1) as f64
}

/// Bounds on every realisation of the control-variate estimate over `rect`.
pub fn subsampled_phi_bounds(sp: &LogisticSubPosterior, cv: &CvAnchor, rect: &Rect) -> (f64, f64) {
    let scale = (sp.datum_count() + 1) as f64;
    let d = sp.dim();
    let per_term: Vec<(Vec<Interval>, Interval)> =
        (0..=sp.datum_count()).map(|i| sp.term_derivative_bounds(i, rect)).collect();
    let mut out: Option<Interval> = None;
    for a in 0..2 {
        let mut alpha: Vec<Option<Interval>> = vec![None; d];
        let mut div: Option<Interval> = None;
        for (i, (g, l)) in per_term.iter().enumerate() {
            for k in 0..d {
                let v = g[k].sub(Interval::point(cv.term_grads[a][i][k])).scale(scale);
                alpha[k] = Some(alpha[k].map_or(v, |h| h.hull(v)));
            }
            let v = l.sub(Interval::point(cv.term_laps[a][i])).scale(scale);
            div = Some(div.map_or(v, |h| h.hull(v)));
        }
        let mut total = div.unwrap();
        for k in 0..d {
            let ak = alpha[k].unwrap();
            let other = ak.add(Interval::point(2.0 * cv.grads[a][k]));
            total = total.add(ak.mul(other));
        }
        let phi = total.scale(0.5).add(Interval::point(cv.phis[a]));
        out = Some(out.map_or(phi, |h| h.hull(phi)));
    }
    let b = out.unwrap();
    let pad = 1e-12 * (b.lo.abs() + b.hi.abs() + 1.0);
    (b.lo - pad, b.hi + pad)
}

/// Result of one component's estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentEstimate {
    pub log_value: f64,
    pub kappa: u64,
    /// `phi` (or subsampled `phi`) evaluations spent.
    pub evals: u64,
    pub lower: f64,
    pub upper: f64,
}

fn draw_kappa<R: Rng + ?Sized>(mean: f64, dispersion: Option<f64>, cap: u64, rng: &mut R) -> Result<u64> {
    if !(mean > 0.0) {
        return Ok(0);
    }
    if !mean.is_finite() || mean > 1e3 * cap as f64 {
        return Err(FusionError::KappaCapExceeded { kappa: u64::MAX, cap });
    }
    let lambda = match dispersion {
        None => mean,
        Some(r) => Gamma::new(r, mean / r)
            .map_err(|e| FusionError::InvalidParameter(e.to_string()))?
            .sample(rng),
    };
    let k = if lambda > 0.0 {
        Poisson::new(lambda)
            .map_err(|e| FusionError::InvalidParameter(e.to_string()))?
            .sample(rng) as u64
    } else {
        0
    };
    if k > cap {
        return Err(FusionError::KappaCapExceeded { kappa: k, cap });
    }
    Ok(k)
}

fn uniform_times<R: Rng + ?Sized>(k: u64, dt: f64, rng: &mut R) -> Vec<f64> {
    let mut t: Vec<f64> = (0..k)
        .map(|_| {
            // open interval (0, dt)
            loop {
                let u = rng.random::<f64>() * dt;
                if u > 0.0 && u < dt {
                    break u;
                }
            }
        })
        .collect();
    t.sort_by(|a, b| a.partial_cmp(b).unwrap());
    t
}

/// Unbiased estimate of `exp(-int phi)` over one bridge segment.
pub fn rho_tilde_component<R: Rng + ?Sized>(
    sp: &dyn SubPosterior,
    cv: Option<&CvAnchor>,
    seg: &Segment,
    cfg: &EstimatorConfig,
    rng: &mut R,
) -> Result<ComponentEstimate> {
    let mut layer: Layer = simulate_layer(seg, cfg.granularity, cfg.layer_cap, rng)?;
    layer.exact = cfg.exact_layers;
    let rect = layer.rect();
    let dt = seg.dt;
    match cfg.kind {
        EstimatorKind::UeA | EstimatorKind::Subsampled => {
            let (lower, upper, logistic) = if cfg.kind == EstimatorKind::Subsampled {
                let lg = sp.as_logistic().ok_or(FusionError::UnsupportedModel("a logistic sub-posterior"))?;
                let cv = cv.ok_or(FusionError::UnsupportedModel("control variates"))?;
                let (l, u) = subsampled_phi_bounds(lg, cv, &rect);
                (l, u, Some((lg, cv)))
            } else {
                let (l, u) = phi_bounds(sp, &rect)?;
                (l, u, None)
            };
            let width = upper - lower;
            let kappa = draw_kappa(dt * width, None, cfg.kappa_cap, rng)?;
            let mut log_value = -lower * dt;
            if kappa > 0 {
                let times = uniform_times(kappa, dt, rng);
                let pts = simulate_points_given_layer(&layer, &times, rng)?;
                for x in &pts {
                    let v = match logistic {
                        Some((lg, cv)) => subsampled_phi(lg, cv, x, cfg.subsample_draws, rng),
                        None => sp.phi(x),
                    };
                    log_value += ((upper - v) / width).max(0.0).ln();
                }
            }
            Ok(ComponentEstimate { log_value, kappa, evals: kappa, lower, upper })
        }
        EstimatorKind::UeB => {
            let (lower, upper) = phi_bounds(sp, &rect)?;
            let mean = ue_b_mean(seg, sp, upper, cfg.mean_rule);
            let quad_evals = match cfg.mean_rule {
                MeanRule::ExactIntegral => 16,
                MeanRule::EndpointAverage => 2,
            };
            let r = cfg.dispersion.unwrap_or(mean);
            let kappa = draw_kappa(mean, Some(r), cfg.kappa_cap, rng)?;
            let kf = kappa as f64;
            let mut log_value = -upper * dt + kf * dt.ln() + ln_gamma(r) - ln_gamma(r + kf)
                + (r + kf) * (mean + r).ln()
                - r * r.ln()
                - kf * mean.ln();
            if kappa > 0 {
                let times = uniform_times(kappa, dt, rng);
                let pts = simulate_points_given_layer(&layer, &times, rng)?;
                for x in &pts {
                    log_value += (upper - sp.phi(x)).max(0.0).ln();
                }
            }
            Ok(ComponentEstimate { log_value, kappa, evals: kappa + quad_evals, lower, upper })
        }
    }
}

/// `log rho~_j` for one particle moving from `prev` to `next` over `dt`:
/// the sum over components of the per-segment log estimates.
pub fn rho_tilde<R: Rng + ?Sized>(
    prev: &ParticleState,
    next: &ParticleState,
    dt: f64,
    sps: &[&dyn SubPosterior],
    cv: Option<&ControlVariates>,
    cfg: &EstimatorConfig,
    rng: &mut R,
) -> Result<(f64, u64)> {
    check_dim(sps.len(), prev.c)?;
    check_dim(prev.c, next.c)?;
    let mut log_total = 0.0;
    let mut evals = 0;
    for (c, sp) in sps.iter().enumerate() {
        let seg = Segment::new(prev.position(c).to_vec(), next.position(c).to_vec(), dt)?;
        let est = rho_tilde_component(*sp, cv.map(|v| &v.anchors[c]), &seg, cfg, rng)?;
        log_total += est.log_value;
        evals += est.evals;
    }
    Ok((log_total, evals))
}
