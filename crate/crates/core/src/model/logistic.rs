use super::bank::{csv_err, parse_row};
use super::mcmc::{rwm, RwmConfig};
use super::{Interval, Rect, SampleBank, SubPosterior};
use crate::error::{check_dim, FusionError, Result};
use crate::rng::{self, Domain};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::path::Path;

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^s)` without overflow.
fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

/// Binary responses with covariate rows (the first column is usually an
/// intercept of ones).
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticData {
    pub y: Vec<f64>,
    pub z: Vec<Vec<f64>>,
}

impl LogisticData {
    pub fn new(y: Vec<f64>, z: Vec<Vec<f64>>) -> Result<Self> {
        check_dim(y.len(), z.len())?;
        let d = z.first().map(|r| r.len()).unwrap_or(0);
        for r in &z {
            check_dim(d, r.len())?;
        }
        if y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(FusionError::InvalidParameter("responses must be 0 or 1".into()));
        }
        Ok(LogisticData { y, z })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.y.iter().filter(|&&v| v == 1.0).count()
    }

    /// Simulates `m` rows: intercept plus `len(beta) - 1` covariates drawn
    /// from `N(0.7, 1)`, responses Bernoulli with success `sigmoid(z' beta)`.
    pub fn simulate(m: usize, beta: &[f64], seed: u64) -> Result<Self> {
        if beta.is_empty() {
            return Err(FusionError::InvalidParameter("beta must be non-empty".into()));
        }
        let mut rng = rng::stream(seed, Domain::Synthetic, 1, 0);
        let cov = Normal::new(0.7, 1.0).unwrap();
        let mut y = Vec::with_capacity(m);
        let mut z = Vec::with_capacity(m);
        for _ in 0..m {
            let mut row = vec![1.0];
            row.extend((1..beta.len()).map(|_| cov.sample(&mut rng)));
            let s: f64 = row.iter().zip(beta).map(|(a, b)| a * b).sum();
            y.push(if rng.random::<f64>() < sigmoid(s) { 1.0 } else { 0.0 });
            z.push(row);
        }
        LogisticData::new(y, z)
    }

    /// CSV with header `y,z1,...,zd`.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
        let headers = rdr.headers().map_err(csv_err)?.clone();
        let ok = headers.get(0).map(str::trim) == Some("y")
            && headers.iter().skip(1).enumerate().all(|(k, h)| h.trim() == format!("z{}", k + 1));
        if !ok || headers.len() < 2 {
            return Err(FusionError::Parse(format!(
                "{}: expected header y,z1,...,zd",
                path.display()
            )));
        }
        let (mut y, mut z) = (Vec::new(), Vec::new());
        for rec in rdr.records() {
            let row = parse_row(&rec.map_err(csv_err)?)?;
            y.push(row[0]);
            z.push(row[1..].to_vec());
        }
        LogisticData::new(y, z)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let d = self.z.first().map(|r| r.len()).unwrap_or(0);
        let mut header = vec!["y".to_string()];
        header.extend((1..=d).map(|k| format!("z{k}")));
        w.write_record(&header).map_err(csv_err)?;
        for (yi, zi) in self.y.iter().zip(&self.z) {
            let mut rec = vec![format!("{yi}")];
            rec.extend(zi.iter().map(|v| format!("{v:e}")));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Logistic regression likelihood on one shard times a Gaussian prior
/// `N(0, v I)` raised to the power `1/C`.
#[derive(Debug, Clone)]
pub struct LogisticSubPosterior {
    data: LogisticData,
    dim: usize,
    /// Tempered prior precision `1 / (v C)`.
    pub prior_precision: f64,
    znorm2: Vec<f64>,
    pub sampler: RwmConfig,
}

impl LogisticSubPosterior {
    pub fn new(data: LogisticData, dim: usize, prior_precision: f64) -> Result<Self> {
        if let Some(r) = data.z.first() {
            check_dim(dim, r.len())?;
        }
        if dim == 0 || !(prior_precision > 0.0) {
            return Err(FusionError::InvalidParameter(
                "dimension and prior precision must be positive".into(),
            ));
        }
        let znorm2 = data.z.iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
        Ok(LogisticSubPosterior { data, dim, prior_precision, znorm2, sampler: RwmConfig::default() })
    }

    pub fn data(&self) -> &LogisticData {
        &self.data
    }

    /// Number of likelihood terms `m_c`.
    pub fn datum_count(&self) -> usize {
        self.data.len()
    }

    fn dot(&self, i: usize, x: &[f64]) -> f64 {
        self.data.z[i].iter().zip(x).map(|(a, b)| a * b).sum()
    }

    /// Gradient and Laplacian of `log l_i` where term 0 is the tempered prior
    /// and `1..=m_c` the likelihood terms.
    pub fn term_derivatives(&self, i: usize, x: &[f64]) -> (Vec<f64>, f64) {
        if i == 0 {
            let t = self.prior_precision;
            (x.iter().map(|v| -t * v).collect(), -t * self.dim as f64)
        } else {
            let r = i - 1;
            let p = sigmoid(self.dot(r, x));
            let g = self.data.z[r].iter().map(|z| (self.data.y[r] - p) * z).collect();
            (g, -p * (1.0 - p) * self.znorm2[r])
        }
    }

    /// Interval enclosures of each term's gradient coordinates and Laplacian
    /// over a rectangle.
    pub fn term_derivative_bounds(&self, i: usize, rect: &Rect) -> (Vec<Interval>, Interval) {
        if i == 0 {
            let t = self.prior_precision;
            let g = (0..self.dim).map(|k| rect.interval(k).scale(-t)).collect();
            (g, Interval::point(-t * self.dim as f64))
        } else {
            let r = i - 1;
            let s = self.dot_bounds(r, rect);
            let p = Interval::new(sigmoid(s.lo), sigmoid(s.hi));
            let resid = Interval::point(self.data.y[r]).sub(p);
            let g = self.data.z[r].iter().map(|&z| resid.scale(z)).collect();
            (g, curvature_bounds(s).scale(-self.znorm2[r]))
        }
    }

    fn dot_bounds(&self, r: usize, rect: &Rect) -> Interval {
        self.data.z[r]
            .iter()
            .enumerate()
            .fold(Interval::point(0.0), |acc, (k, &z)| acc.add(rect.interval(k).scale(z)))
    }

    /// Negative Hessian of the log-density.
    fn neg_hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let d = self.dim;
        let mut h = DMatrix::<f64>::identity(d, d) * self.prior_precision;
        for (r, z) in self.data.z.iter().enumerate() {
            let p = sigmoid(self.dot(r, x));
            let w = p * (1.0 - p);
            for a in 0..d {
                for b in 0..d {
                    h[(a, b)] += w * z[a] * z[b];
                }
            }
        }
        h
    }

    /// Posterior mode by damped Newton iterations.
    pub fn mode(&self) -> Result<Vec<f64>> {
        let mut x = vec![0.0; self.dim];
        let mut lp = self.log_density(&x);
        for _ in 0..200 {
            let g = DVector::from_vec(self.grad_log_density(&x));
            let h = self.neg_hessian(&x);
            let step = h
                .cholesky()
                .ok_or_else(|| FusionError::SingularMatrix("logistic Hessian".into()))?
                .solve(&g);
            let mut t = 1.0;
            loop {
                let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
                let lc = self.log_density(&cand);
                if lc >= lp || t < 1e-10 {
                    x = cand;
                    lp = lc;
                    break;
                }
                t *= 0.5;
            }
            if step.norm() * t < 1e-12 * (1.0 + x.iter().map(|v| v.abs()).fold(0.0, f64::max)) {
                break;
            }
        }
        Ok(x)
    }

    /// Row-major covariance of the Laplace approximation at `x`.
    pub fn laplace_covariance(&self, x: &[f64]) -> Result<Vec<f64>> {
        let inv = self
            .neg_hessian(x)
            .try_inverse()
            .ok_or_else(|| FusionError::SingularMatrix("logistic Hessian".into()))?;
        Ok(inv.transpose().as_slice().to_vec())
    }
}

/// Range of `p (1 - p)`, `p = sigmoid(s)`, over an interval of `s`; the map is
/// increasing for `s < 0` and decreasing after.
fn curvature_bounds(s: Interval) -> Interval {
    let h = |v: f64| {
        let p = sigmoid(v);
        p * (1.0 - p)
    };
    let (a, b) = (h(s.lo), h(s.hi));
    let hi = if s.lo <= 0.0 && s.hi >= 0.0 { 0.25 } else { a.max(b) };
    Interval::new(a.min(b), hi)
}

impl SubPosterior for LogisticSubPosterior {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let mut acc = -0.5 * self.prior_precision * x.iter().map(|v| v * v).sum::<f64>();
        for r in 0..self.data.len() {
            let s = self.dot(r, x);
            acc += self.data.y[r] * s - softplus(s);
        }
        acc
    }

    fn grad_log_density(&self, x: &[f64]) -> Vec<f64> {
        let mut g: Vec<f64> = x.iter().map(|v| -self.prior_precision * v).collect();
        for (r, z) in self.data.z.iter().enumerate() {
            let w = self.data.y[r] - sigmoid(self.dot(r, x));
            for (gk, zk) in g.iter_mut().zip(z) {
                *gk += w * zk;
            }
        }
        g
    }

    fn laplacian_log_density(&self, x: &[f64]) -> f64 {
        let mut acc = -self.prior_precision * self.dim as f64;
        for r in 0..self.data.len() {
            let p = sigmoid(self.dot(r, x));
            acc -= p * (1.0 - p) * self.znorm2[r];
        }
        acc
    }

    fn phi(&self, x: &[f64]) -> f64 {
        let mut g: Vec<f64> = x.iter().map(|v| -self.prior_precision * v).collect();
        let mut lap = -self.prior_precision * self.dim as f64;
        for (r, z) in self.data.z.iter().enumerate() {
            let p = sigmoid(self.dot(r, x));
            let w = self.data.y[r] - p;
            for (gk, zk) in g.iter_mut().zip(z) {
                *gk += w * zk;
            }
            lap -= p * (1.0 - p) * self.znorm2[r];
        }
        0.5 * (g.iter().map(|v| v * v).sum::<f64>() + lap)
    }

    fn phi_bounds_unchecked(&self, rect: &Rect) -> (f64, f64) {
        let d = self.dim;
        let t = self.prior_precision;
        let mut g: Vec<Interval> = (0..d).map(|k| rect.interval(k).scale(-t)).collect();
        let mut lap = Interval::point(-t * d as f64);
        for r in 0..self.data.len() {
            let s = self.dot_bounds(r, rect);
            let p = Interval::new(sigmoid(s.lo), sigmoid(s.hi));
            let resid = Interval::point(self.data.y[r]).sub(p);
            for (gk, &zk) in g.iter_mut().zip(&self.data.z[r]) {
                *gk = gk.add(resid.scale(zk));
            }
            lap = lap.add(curvature_bounds(s).scale(-self.znorm2[r]));
        }
        let g2 = g.iter().fold(Interval::point(0.0), |acc, gk| acc.add(gk.square()));
        let phi = g2.add(lap).scale(0.5);
        // widen by a few ulps to absorb rounding in the sums
        let pad = 1e-12 * (phi.lo.abs() + phi.hi.abs() + 1.0);
        (phi.lo - pad, phi.hi + pad)
    }

    fn phi_lower_bound(&self) -> Option<f64> {
        let s: f64 = self.znorm2.iter().sum();
        Some(-0.5 * (0.25 * s + self.prior_precision * self.dim as f64))
    }

    fn sample(&self, count: usize, seed: u64) -> Result<SampleBank> {
        let start = self.mode()?;
        let cov = self.laplace_covariance(&start)?;
        let chol = DMatrix::from_row_slice(self.dim, self.dim, &cov)
            .cholesky()
            .ok_or_else(|| FusionError::SingularMatrix("Laplace covariance".into()))?;
        let l = chol.l().transpose();
        Ok(rwm(self, &start, Some(l.as_slice()), count, seed, &self.sampler)?.bank)
    }

    fn as_logistic(&self) -> Option<&LogisticSubPosterior> {
        Some(self)
    }
}

/// A data set split into `C` shards, plus the full-data posterior.
#[derive(Debug, Clone)]
pub struct LogisticProblem {
    pub data: LogisticData,
    pub shards: Vec<LogisticSubPosterior>,
    pub full: LogisticSubPosterior,
}

impl LogisticProblem {
    /// Splits rows contiguously into `C` shards; the `m mod C` leftover rows go
    /// one each to the first shards. Each shard gets the `N(0, prior_variance)`
    /// prior tempered to the power `1/C`.
    pub fn from_data(data: LogisticData, c: usize, prior_variance: f64) -> Result<Self> {
        if c == 0 {
            return Err(FusionError::InvalidParameter("C must be at least 1".into()));
        }
        if data.len() < c {
            return Err(FusionError::InvalidParameter(format!(
                "{} rows cannot fill {c} shards",
                data.len()
            )));
        }
        let d = data.z[0].len();
        let base = data.len() / c;
        let extra = data.len() % c;
        let mut shards = Vec::with_capacity(c);
        let mut start = 0;
        for s in 0..c {
            let len = base + usize::from(s < extra);
            let part = LogisticData::new(
                data.y[start..start + len].to_vec(),
                data.z[start..start + len].to_vec(),
            )?;
            shards.push(LogisticSubPosterior::new(part, d, 1.0 / (prior_variance * c as f64))?);
            start += len;
        }
        let full = LogisticSubPosterior::new(data.clone(), d, 1.0 / prior_variance)?;
        Ok(LogisticProblem { data, shards, full })
    }
}

/// Simulates the synthetic logistic set-up and splits it over `C` cores with
/// a `N(0, 10)` prior.
pub fn make_logistic_problem(m: usize, c: usize, beta_true: &[f64], seed: u64) -> Result<LogisticProblem> {
    let data = LogisticData::simulate(m, beta_true, seed)?;
    LogisticProblem::from_data(data, c, 10.0)
}
