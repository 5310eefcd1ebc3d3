//! Layered Brownian bridges.
//!
//! A layer is a per-coordinate band known to contain the whole bridge path
//! over a segment. Band `l` for coordinate `k` is
//! `[min(x0_k, x1_k) - l g sqrt(dt), max(x0_k, x1_k) + l g sqrt(dt)]`, and the
//! simulated layer index is the smallest `l` whose band contains the path.
//! Intermediate points are then drawn from the bridge conditioned on exactly
//! that event (inside band `l`, not inside band `l - 1`).

use crate::error::{check_dim, FusionError, Result};
use crate::model::Rect;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const SERIES_TOL: f64 = 1e-12;
const MAX_PROPOSALS: usize = 100_000;

/// Partial sums of the alternating series for the probability that a scalar
/// Brownian bridge from `x0` to `x1` over `dt` stays in `(lo, hi)`.
///
/// The sums start at 1 and alternately subtract crossing terms and add back
/// double-crossing terms, so consecutive entries bracket the probability once
/// the terms start decreasing.
pub fn band_noncrossing_partial_sums(x0: f64, x1: f64, lo: f64, hi: f64, dt: f64) -> Vec<f64> {
    let w = hi - lo;
    let a = x0 - lo;
    let b = x1 - lo;
    let mut sums = vec![1.0];
    let mut acc = 1.0;
    let mut j = 1.0f64;
    loop {
        // paths crossing one boundary first, j - 1 full sweeps before
        let k1 = -(j - 1.0);
        let k2 = j;
        let down = (-2.0 * (k1 * w - a) * (k1 * w - b) / dt).exp()
            + (-2.0 * (k2 * w - a) * (k2 * w - b) / dt).exp();
        acc -= down;
        sums.push(acc);
        let up = (-2.0 * j * w * (j * w - (b - a)) / dt).exp()
            + (-2.0 * j * w * (j * w + (b - a)) / dt).exp();
        acc += up;
        sums.push(acc);
        if (down < SERIES_TOL && up < SERIES_TOL) || j > 10_000.0 {
            break;
        }
        j += 1.0;
    }
    sums
}

/// Probability that a scalar bridge from `x0` to `x1` over `dt` stays inside
/// `(lo, hi)`; 0 when an endpoint is outside the band.
pub fn band_noncrossing_prob(x0: f64, x1: f64, lo: f64, hi: f64, dt: f64) -> f64 {
    if !(x0 > lo && x0 < hi && x1 > lo && x1 < hi) || !(dt > 0.0) {
        return 0.0;
    }
    if lo == f64::NEG_INFINITY && hi == f64::INFINITY {
        return 1.0;
    }
    if lo == f64::NEG_INFINITY || hi == f64::INFINITY {
        // one-sided: 1 - exp(-2 a b / dt) with a, b distances to the finite side
        let (a, b) = if hi == f64::INFINITY { (x0 - lo, x1 - lo) } else { (hi - x0, hi - x1) };
        return -(-2.0 * a * b / dt).exp_m1();
    }
    let sums = band_noncrossing_partial_sums(x0, x1, lo, hi, dt);
    let n = sums.len();
    (0.5 * (sums[n - 1] + sums[n - 2])).clamp(0.0, 1.0)
}

/// Log of [`band_noncrossing_prob`].
pub fn band_noncrossing_log_prob(x0: f64, x1: f64, lo: f64, hi: f64, dt: f64) -> f64 {
    band_noncrossing_prob(x0, x1, lo, hi, dt).ln()
}

/// A bridge segment from `x0` at relative time 0 to `x1` at time `dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub dt: f64,
}

impl Segment {
    pub fn new(x0: Vec<f64>, x1: Vec<f64>, dt: f64) -> Result<Self> {
        check_dim(x0.len(), x1.len())?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(FusionError::InvalidParameter(format!("segment duration {dt}")));
        }
        Ok(Segment { x0, x1, dt })
    }

    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    /// Band `l` for coordinate `k`.
    pub fn band(&self, k: usize, l: usize, granularity: f64) -> (f64, f64) {
        let pad = l as f64 * granularity * self.dt.sqrt();
        let (a, b) = (self.x0[k], self.x1[k]);
        (a.min(b) - pad, a.max(b) + pad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub segment: Segment,
    pub granularity: f64,
    /// Per-coordinate layer index, each at least 1.
    pub index: Vec<usize>,
    /// When false, intermediate points are conditioned only on staying inside
    /// the outer bands rather than on the exact layer event.
    pub exact: bool,
}

impl Layer {
    /// A layer with the given per-coordinate indices.
    pub fn new(segment: Segment, granularity: f64, index: Vec<usize>) -> Result<Self> {
        check_dim(segment.dim(), index.len())?;
        if index.iter().any(|&l| l == 0) || !(granularity > 0.0) {
            return Err(FusionError::InvalidParameter("layer indices start at 1".into()));
        }
        Ok(Layer { segment, granularity, index, exact: true })
    }

    /// The outer band of coordinate `k`.
    pub fn band(&self, k: usize) -> (f64, f64) {
        self.segment.band(k, self.index[k], self.granularity)
    }

    /// The product of outer bands, over which `phi` is bounded.
    pub fn rect(&self) -> Rect {
        let (lo, hi) = (0..self.segment.dim()).map(|k| self.band(k)).unzip();
        Rect { lo, hi }
    }
}

/// Simulates the layer of a bridge segment: independently per coordinate, the
/// smallest `l` whose band contains the path, by inverting the cumulative
/// probabilities `P(band_l)`.
pub fn simulate_layer<R: Rng + ?Sized>(
    segment: &Segment,
    granularity: f64,
    cap: usize,
    rng: &mut R,
) -> Result<Layer> {
    if !(granularity > 0.0) {
        return Err(FusionError::InvalidParameter(format!("granularity {granularity}")));
    }
    let mut index = Vec::with_capacity(segment.dim());
    for k in 0..segment.dim() {
        let u: f64 = rng.random();
        let mut l = 1;
        loop {
            let (lo, hi) = segment.band(k, l, granularity);
            if u < band_noncrossing_prob(segment.x0[k], segment.x1[k], lo, hi, segment.dt) {
                break;
            }
            l += 1;
            if l > cap {
                return Err(FusionError::LayerCapExceeded {
                    cap,
                    duration: segment.dt,
                    granularity,
                });
            }
        }
        index.push(l);
    }
    Layer::new(segment.clone(), granularity, index)
}

/// Probability that the scalar bridge through `pts` (time, value) stays in
/// `(lo, hi)` on every sub-segment.
fn chain_prob(pts: &[(f64, f64)], lo: f64, hi: f64) -> f64 {
    let mut p = 1.0;
    for w in pts.windows(2) {
        if w[1].0 == w[0].0 {
            // repeated time: same point
            continue;
        }
        p *= band_noncrossing_prob(w[0].1, w[1].1, lo, hi, w[1].0 - w[0].0);
        if p == 0.0 {
            break;
        }
    }
    p
}

/// `P(path stays above lo | bridge x -> y over dt stays below hi)`. One
/// endpoint may sit on `hi` (the segment touches the maximum), in which case
/// the ratio is taken in the limit.
fn above_given_below(x: f64, y: f64, lo: f64, hi: f64, dt: f64) -> f64 {
    if x <= lo || y <= lo {
        return 0.0;
    }
    if dt <= 0.0 {
        return 1.0;
    }
    if x >= hi || y >= hi {
        let beta = hi - x.min(y);
        if beta <= 0.0 {
            return 1.0;
        }
        let w = hi - lo;
        let term = |k: f64| (2.0 * k * w + beta) * (-2.0 * k * w * (k * w + beta) / dt).exp();
        let mut sum = term(0.0);
        let mut k = 1.0;
        loop {
            let t = term(k) + term(-k);
            sum += t;
            if t.abs() < SERIES_TOL * beta || k > 10_000.0 {
                break;
            }
            k += 1.0;
        }
        return (sum / beta).clamp(0.0, 1.0);
    }
    let q1 = -(-2.0 * (hi - x) * (hi - y) / dt).exp_m1();
    (band_noncrossing_prob(x, y, lo, hi, dt) / q1).clamp(0.0, 1.0)
}

/// Values at `times` (sorted, inside `(0, span)`) of `r(t) = |v(t) + B(t)|`
/// where `v` is linear from `r0` at 0 to `r1` at `span` and `B` is a 3-d
/// Brownian bridge pinned at 0: a Bessel-3 bridge from `r0` to `r1`.
fn bessel3_bridge<R: Rng + ?Sized>(r0: f64, r1: f64, span: f64, times: &[f64], rng: &mut R) -> Vec<f64> {
    let mut b = [0.0f64; 3];
    let mut prev = 0.0;
    times
        .iter()
        .map(|&t| {
            let h = t - prev;
            let rest = span - prev;
            let sd = (h * (span - t) / rest).max(0.0).sqrt();
            for c in b.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *c = *c * (span - t) / rest + sd * z;
            }
            prev = t;
            let lin = r0 + (r1 - r0) * t / span;
            ((lin + b[0]).powi(2) + b[1] * b[1] + b[2] * b[2]).sqrt()
        })
        .collect()
}

/// Time of the maximum `m` of a bridge from `a` to `b` over `dt`. With
/// `V = theta / (dt - theta)` the density is proportional to
/// `(V^{-3/2} + V^{-1/2}) exp(-c1 / V - c2 V)`, an inverse-Gaussian mixture.
fn extremum_time<R: Rng + ?Sized>(a: f64, b: f64, m: f64, dt: f64, rng: &mut R) -> f64 {
    let c1 = (m - a).powi(2) / (2.0 * dt);
    let c2 = (m - b).powi(2) / (2.0 * dt);
    let u: f64 = rng.random();
    let v = if u < 1.0 / (1.0 + (c1 / c2).sqrt()) {
        rand_distr::InverseGaussian::new((c1 / c2).sqrt(), 2.0 * c1).unwrap().sample(rng)
    } else {
        1.0 / rand_distr::InverseGaussian::new((c2 / c1).sqrt(), 2.0 * c2).unwrap().sample(rng)
    };
    (dt * v / (1.0 + v)).clamp(0.0, dt)
}

/// Bands for one coordinate, oriented so the proposal exits through the top.
struct ExitBands {
    in_lo: f64,
    in_hi: f64,
    out_lo: f64,
    out_hi: f64,
}

/// One proposal for the path at `times` given that it leaves `(in_lo, in_hi)`
/// through the top and stays in `(out_lo, out_hi)`.
///
/// The maximum `M > in_hi` and its time are drawn first, then the path as two
/// Bessel-3 bridges below `M`. Mixing this with the mirrored proposal (weights
/// proportional to the two exit probabilities) gives a proposal whose density
/// against the bridge law is `(1[up] + 1[down]) / (p_up + p_down)`, so a path in
/// the target event is accepted with `1 / (1[up] + 1[down])`. Given the
/// simulated skeleton that has expectation
/// `(P(min > in_lo) + P(min > out_lo)) / 2`.
fn propose_exit_up<R: Rng + ?Sized>(
    a: f64,
    b: f64,
    dt: f64,
    bands: &ExitBands,
    times: &[f64],
    rng: &mut R,
) -> Option<Vec<f64>> {
    let h = bands.in_hi;
    let e: f64 = rand_distr::Exp1.sample(rng);
    let y = 2.0 * (h - a) * (h - b) / dt + e;
    let m = 0.5 * (a + b) + (0.25 * (a - b).powi(2) + 0.5 * dt * y).sqrt();
    if m >= bands.out_hi {
        return None;
    }
    let theta = extremum_time(a, b, m, dt, rng);
    let split = times.partition_point(|&t| t < theta);
    let pre = bessel3_bridge(m - a, 0.0, theta, &times[..split], rng);
    let post_times: Vec<f64> = times[split..].iter().map(|t| t - theta).collect();
    let post = bessel3_bridge(0.0, m - b, dt - theta, &post_times, rng);
    let values: Vec<f64> = pre.iter().chain(&post).map(|r| m - r).collect();
    if values.iter().any(|v| *v <= bands.out_lo) {
        return None;
    }
    let mut chain = Vec::with_capacity(times.len() + 3);
    chain.push((0.0, a));
    chain.extend(times[..split].iter().copied().zip(values[..split].iter().copied()));
    chain.push((theta, m));
    chain.extend(times[split..].iter().copied().zip(values[split..].iter().copied()));
    chain.push((dt, b));
    let below = |lo: f64| -> f64 {
        chain
            .windows(2)
            .map(|w| above_given_below(w[0].1, w[1].1, lo, m, w[1].0 - w[0].0))
            .product()
    };
    let accept = 0.5 * (below(bands.in_lo) + below(bands.out_lo));
    (rng.random::<f64>() < accept).then_some(values)
}

/// Draws the path at the sorted `times` (strictly inside `(0, dt)`), given the
/// layer. Returns one `d`-vector per time.
///
/// Coordinates are independent given the layer. On layer 1 all points are
/// proposed jointly from the unconditional bridge and accepted with the
/// probability that the path stays in the band given them. On higher layers
/// the path must also leave the previous band, which is rare, so proposals are
/// conditioned on that exit through the simulated maximum or minimum.
pub fn simulate_points_given_layer<R: Rng + ?Sized>(
    layer: &Layer,
    times: &[f64],
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let seg = &layer.segment;
    for w in times.windows(2) {
        if !(w[0] <= w[1]) {
            return Err(FusionError::InvalidParameter("times must be sorted".into()));
        }
    }
    if let (Some(&first), Some(&last)) = (times.first(), times.last()) {
        if !(first > 0.0 && last < seg.dt) {
            return Err(FusionError::InvalidParameter(format!(
                "times must lie inside (0, {})",
                seg.dt
            )));
        }
    }
    let d = seg.dim();
    let mut out = vec![vec![0.0; d]; times.len()];
    if times.is_empty() {
        return Ok(out);
    }
    let mut pts = vec![(0.0, 0.0); times.len() + 2];
    for k in 0..d {
        let (lo, hi) = layer.band(k);
        let inner = (layer.exact && layer.index[k] > 1)
            .then(|| seg.band(k, layer.index[k] - 1, layer.granularity));
        let (a, b) = (seg.x0[k], seg.x1[k]);
        let mut proposals = 0;
        loop {
            proposals += 1;
            if proposals > MAX_PROPOSALS {
                return Err(FusionError::RejectionStall {
                    proposals: MAX_PROPOSALS,
                    layer_index: layer.index[k],
                });
            }
            if let Some((in_lo, in_hi)) = inner {
                let log_up = -2.0 * (in_hi - a) * (in_hi - b) / seg.dt;
                let log_down = -2.0 * (a - in_lo) * (b - in_lo) / seg.dt;
                let up = rng.random::<f64>() < 1.0 / (1.0 + (log_down - log_up).exp());
                let drawn = if up {
                    let bands = ExitBands { in_lo, in_hi, out_lo: lo, out_hi: hi };
                    propose_exit_up(a, b, seg.dt, &bands, times, rng)
                } else {
                    let bands = ExitBands { in_lo: -in_hi, in_hi: -in_lo, out_lo: -hi, out_hi: -lo };
                    propose_exit_up(-a, -b, seg.dt, &bands, times, rng)
                        .map(|v| v.into_iter().map(|x| -x).collect())
                };
                if let Some(values) = drawn {
                    for (row, v) in out.iter_mut().zip(values) {
                        row[k] = v;
                    }
                    break;
                }
                continue;
            }
            pts[0] = (0.0, a);
            let mut prev = pts[0];
            for (i, &u) in times.iter().enumerate() {
                // sequential bridge sampling towards (dt, x1)
                let span = seg.dt - prev.0;
                let h = u - prev.0;
                let mean = prev.1 + h / span * (b - prev.1);
                let var = (h * (seg.dt - u) / span).max(0.0);
                let z: f64 = StandardNormal.sample(rng);
                prev = (u, mean + var.sqrt() * z);
                pts[i + 1] = prev;
            }
            pts[times.len() + 1] = (seg.dt, b);
            if pts.iter().any(|p| !(p.1 > lo && p.1 < hi)) {
                continue;
            }
            if rng.random::<f64>() < chain_prob(&pts, lo, hi) {
                for i in 0..times.len() {
                    out[i][k] = pts[i + 1].1;
                }
                break;
            }
        }
    }
    Ok(out)
}

/// Single-time convenience wrapper of [`simulate_points_given_layer`].
pub fn simulate_point_given_layer<R: Rng + ?Sized>(layer: &Layer, u: f64, rng: &mut R) -> Result<Vec<f64>> {
    Ok(simulate_points_given_layer(layer, &[u], rng)?.pop().unwrap())
}
