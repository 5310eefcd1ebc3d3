//! Weighted-sample summaries, KDE-based integrated absolute distance, KS
//! tests and trace files.

use crate::error::{check_dim, FusionError, Result};
use crate::model::bank::{csv_err, parse_row};
use crate::smc::{FusionRun, IterationRecord};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// Points with normalised weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl WeightedSample {
    /// Weights are normalised on construction.
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        check_dim(points.len(), weights.len())?;
        let d = points.first().ok_or(FusionError::EmptyBank)?.len();
        for p in &points {
            check_dim(d, p.len())?;
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(FusionError::InvalidParameter("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(FusionError::InvalidParameter("weights sum to zero".into()));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(WeightedSample { points, weights })
    }

    pub fn uniform(points: Vec<Vec<f64>>) -> Result<Self> {
        let n = points.len();
        Self::new(points, vec![1.0; n])
    }

    pub fn from_run(run: &FusionRun) -> Result<Self> {
        Self::new(run.particles.clone(), run.weights.clone())
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn ess(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    pub fn marginal(&self, k: usize) -> Vec<f64> {
        self.points.iter().map(|p| p[k]).collect()
    }

    /// CSV with header `w,x1,...,xd`. Values use Rust's shortest round-trip
    /// formatting so files re-parse to identical values.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = vec!["w".to_string()];
        header.extend((1..=self.dim()).map(|k| format!("x{k}")));
        w.write_record(&header).map_err(csv_err)?;
        for (p, wt) in self.points.iter().zip(&self.weights) {
            let mut rec = vec![format!("{wt:e}")];
            rec.extend(p.iter().map(|v| format!("{v:e}")));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
        let headers = rdr.headers().map_err(csv_err)?.clone();
        let ok = headers.get(0).map(str::trim) == Some("w")
            && headers.iter().skip(1).enumerate().all(|(k, h)| h.trim() == format!("x{}", k + 1));
        if !ok || headers.len() < 2 {
            return Err(FusionError::Parse(format!("{}: expected header w,x1,...,xd", path.display())));
        }
        let (mut pts, mut ws) = (Vec::new(), Vec::new());
        for rec in rdr.records() {
            let row = parse_row(&rec.map_err(csv_err)?)?;
            ws.push(row[0]);
            pts.push(row[1..].to_vec());
        }
        Self::new(pts, ws)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: Vec<f64>,
    /// Row-major `d x d` weighted covariance.
    pub cov: Vec<f64>,
    /// Standard error of each mean coordinate, using the ESS as sample size.
    pub se: Vec<f64>,
    pub ess: f64,
}

pub fn weighted_moments(s: &WeightedSample) -> Moments {
    let d = s.dim();
    let mut mean = vec![0.0; d];
    for (p, w) in s.points.iter().zip(&s.weights) {
        for k in 0..d {
            mean[k] += w * p[k];
        }
    }
    let mut cov = vec![0.0; d * d];
    for (p, w) in s.points.iter().zip(&s.weights) {
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += w * (p[a] - mean[a]) * (p[b] - mean[b]);
            }
        }
    }
    let ess = s.ess();
    let se = (0..d).map(|k| (cov[k * d + k] / ess).sqrt()).collect();
    Moments { mean, cov, se, ess }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Silverman,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeSpec {
    pub bandwidth: Bandwidth,
    pub grid_points: usize,
    /// Per-dimension grid range; default is the union range +- 3 bandwidths.
    pub grid_range: Option<Vec<(f64, f64)>>,
}

impl Default for KdeSpec {
    fn default() -> Self {
        KdeSpec { bandwidth: Bandwidth::Silverman, grid_points: 512, grid_range: None }
    }
}

fn weighted_quantile(sorted: &[(f64, f64)], q: f64) -> f64 {
    let mut acc = 0.0;
    for &(v, w) in sorted {
        acc += w;
        if acc >= q {
            return v;
        }
    }
    sorted.last().unwrap().0
}

/// `0.9 min(sd, IQR / 1.34) n_eff^{-1/5}` for one weighted marginal.
pub fn silverman_bandwidth(values: &[f64], weights: &[f64]) -> f64 {
    let mean: f64 = values.iter().zip(weights).map(|(v, w)| v * w).sum();
    let var: f64 = values.iter().zip(weights).map(|(v, w)| w * (v - mean).powi(2)).sum();
    let sd = var.sqrt();
    let mut sorted: Vec<(f64, f64)> = values.iter().copied().zip(weights.iter().copied()).collect();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let iqr = weighted_quantile(&sorted, 0.75) - weighted_quantile(&sorted, 0.25);
    let n_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let spread = if spread > 0.0 { spread } else { 1e-3 * (mean.abs() + 1.0) };
    0.9 * spread * n_eff.powf(-0.2)
}

fn kde_on_grid(values: &[f64], weights: &[f64], h: f64, grid: &[f64]) -> Vec<f64> {
    let norm = 1.0 / (h * (2.0 * std::f64::consts::PI).sqrt());
    // sort once so each grid point only visits points within 8 bandwidths
    let mut pairs: Vec<(f64, f64)> = values.iter().copied().zip(weights.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    grid.iter()
        .map(|&g| {
            let lo = xs.partition_point(|&x| x < g - 8.0 * h);
            let hi = xs.partition_point(|&x| x <= g + 8.0 * h);
            let s: f64 = pairs[lo..hi]
                .iter()
                .map(|(x, w)| {
                    let z = (g - x) / h;
                    w * (-0.5 * z * z).exp()
                })
                .sum();
            norm * s
        })
        .collect()
}

fn trapezoid(grid: &[f64], f: &[f64]) -> f64 {
    grid.windows(2)
        .zip(f.windows(2))
        .map(|(g, v)| 0.5 * (g[1] - g[0]) * (v[0] + v[1]))
        .sum()
}

/// `int |f_a - f_b|` over `[lo, hi]` by the trapezoid rule on `points` nodes.
pub fn integrated_abs_diff(fa: impl Fn(f64) -> f64, fb: impl Fn(f64) -> f64, lo: f64, hi: f64, points: usize) -> f64 {
    let grid: Vec<f64> = (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect();
    let diff: Vec<f64> = grid.iter().map(|&x| (fa(x) - fb(x)).abs()).collect();
    trapezoid(&grid, &diff)
}

/// Integrated absolute distance between two weighted samples: the average
/// over dimensions of `int |f_a - f_b|` for the marginal KDEs.
pub fn iad(a: &WeightedSample, b: &WeightedSample, spec: &KdeSpec) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(FusionError::EmptyBank);
    }
    check_dim(a.dim(), b.dim())?;
    if spec.grid_points < 16 {
        return Err(FusionError::InvalidParameter("grid_points must be at least 16".into()));
    }
    let d = a.dim();
    let mut total = 0.0;
    for k in 0..d {
        let (va, vb) = (a.marginal(k), b.marginal(k));
        let (ha, hb) = match spec.bandwidth {
            Bandwidth::Silverman => (silverman_bandwidth(&va, &a.weights), silverman_bandwidth(&vb, &b.weights)),
            Bandwidth::Fixed(h) if h > 0.0 => (h, h),
            Bandwidth::Fixed(h) => return Err(FusionError::InvalidParameter(format!("bandwidth {h}"))),
        };
        let (lo, hi) = match &spec.grid_range {
            Some(r) => {
                check_dim(d, r.len())?;
                r[k]
            }
            None => {
                let h = ha.max(hb);
                let min = va.iter().chain(&vb).copied().fold(f64::INFINITY, f64::min);
                let max = va.iter().chain(&vb).copied().fold(f64::NEG_INFINITY, f64::max);
                (min - 3.0 * h, max + 3.0 * h)
            }
        };
        let n = spec.grid_points;
        let grid: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
        let fa = kde_on_grid(&va, &a.weights, ha, &grid);
        let fb = kde_on_grid(&vb, &b.weights, hb, &grid);
        let diff: Vec<f64> = fa.iter().zip(&fb).map(|(x, y)| (x - y).abs()).collect();
        total += trapezoid(&grid, &diff);
    }
    Ok(total / d as f64)
}

/// Kolmogorov survival function `P(K > x)`.
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < 0.3 {
        // series below converges slowly here; the value is 1 to 1e-12
        return 1.0;
    }
    let mut s = 0.0;
    for j in 1..200 {
        let jf = j as f64;
        let term = 2.0 * (if j % 2 == 1 { 1.0 } else { -1.0 }) * (-2.0 * jf * jf * x * x).exp();
        s += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    s.clamp(0.0, 1.0)
}

fn ks_p_value(d: f64, n_eff: f64) -> f64 {
    let sn = n_eff.sqrt();
    kolmogorov_sf((sn + 0.12 + 0.11 / sn) * d)
}

/// One-sample KS test of coordinate `k` against `cdf`, using the ESS as the
/// sample size. Returns `(D, p)`.
pub fn weighted_ks(s: &WeightedSample, k: usize, cdf: impl Fn(f64) -> f64) -> (f64, f64) {
    let mut pairs: Vec<(f64, f64)> = s.points.iter().map(|p| p[k]).zip(s.weights.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut acc = 0.0;
    let mut dmax: f64 = 0.0;
    for (x, w) in pairs {
        let f = cdf(x);
        dmax = dmax.max((f - acc).abs());
        acc += w;
        dmax = dmax.max((acc - f).abs());
    }
    (dmax, ks_p_value(dmax, s.ess()))
}

/// Two-sample KS test for unweighted samples. Returns `(D, p)`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(|p, q| p.partial_cmp(q).unwrap());
    y.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < x.len() && j < y.len() {
        let v = x[i].min(y[j]);
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    (d, ks_p_value(d, n * m / (n + m)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    #[serde(rename = "type")]
    pub kind: String,
    pub config_hash: String,
    pub n: usize,
    #[serde(rename = "N")]
    pub particles: usize,
    pub seed: u64,
    pub cess0: f64,
}

/// Writes a JSONL trace: a header line then one line per iteration.
pub fn export_traces(run: &FusionRun, path: &Path) -> Result<()> {
    let header = TraceHeader {
        kind: "header".into(),
        config_hash: run.config_hash(),
        n: run.partition.n(),
        particles: run.n_particles,
        seed: run.seed,
        cess0: run.cess0,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for r in &run.records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_traces(path: &Path) -> Result<(TraceHeader, Vec<IterationRecord>)> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    let first = lines.next().ok_or_else(|| FusionError::Parse("empty trace file".into()))??;
    let header: TraceHeader = serde_json::from_str(&first)?;
    let mut recs = Vec::new();
    for line in lines {
        let line = line?;
        if !line.trim().is_empty() {
            recs.push(serde_json::from_str(&line)?);
        }
    }
    Ok((header, recs))
}
