use super::{Rect, SubPosterior};
use crate::error::{check_dim, FusionError, Result};
use std::path::Path;

/// A finite collection of draws from one sub-posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBank {
    dim: usize,
    draws: Vec<Vec<f64>>,
    pub provenance: String,
}

impl SampleBank {
    pub fn new(draws: Vec<Vec<f64>>, provenance: impl Into<String>) -> Result<Self> {
        let dim = draws.first().ok_or(FusionError::EmptyBank)?.len();
        if dim == 0 {
            return Err(FusionError::InvalidParameter("draws must have dimension >= 1".into()));
        }
        for d in &draws {
            check_dim(dim, d.len())?;
        }
        Ok(SampleBank {
            dim,
            draws,
            provenance: provenance.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn draws(&self) -> &[Vec<f64>] {
        &self.draws
    }

    pub fn into_draws(self) -> Vec<Vec<f64>> {
        self.draws
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for x in &self.draws {
            for (a, b) in m.iter_mut().zip(x) {
                *a += b;
            }
        }
        let n = self.draws.len() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Sample covariance (divisor `n - 1`), row-major `d x d`.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim;
        let mean = self.mean();
        let mut cov = vec![0.0; d * d];
        for x in &self.draws {
            for i in 0..d {
                let di = x[i] - mean[i];
                for j in 0..d {
                    cov[i * d + j] += di * (x[j] - mean[j]);
                }
            }
        }
        let denom = (self.draws.len().max(2) - 1) as f64;
        cov.iter_mut().for_each(|v| *v /= denom);
        cov
    }

    pub fn bounding_rect(&self) -> Result<Rect> {
        let refs: Vec<&[f64]> = self.draws.iter().map(|v| v.as_slice()).collect();
        Rect::bounding(&refs)
    }

    /// Reads a bank from CSV with header `x1,...,xd`.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
        let headers = rdr.headers().map_err(csv_err)?.clone();
        for (k, h) in headers.iter().enumerate() {
            if h.trim() != format!("x{}", k + 1) {
                return Err(FusionError::Parse(format!(
                    "{}: expected header x{}, found {h:?}",
                    path.display(),
                    k + 1
                )));
            }
        }
        let mut draws = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err)?;
            draws.push(parse_row(&rec)?);
        }
        SampleBank::new(draws, path.display().to_string())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let header: Vec<String> = (1..=self.dim).map(|k| format!("x{k}")).collect();
        w.write_record(&header).map_err(csv_err)?;
        for x in &self.draws {
            w.write_record(x.iter().map(|v| format!("{v:e}"))).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> FusionError {
    FusionError::Parse(e.to_string())
}

pub(crate) fn parse_row(rec: &csv::StringRecord) -> Result<Vec<f64>> {
    rec.iter()
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| FusionError::Parse(format!("{s:?}: {e}")))
        })
        .collect()
}

/// A sub-posterior whose initial draws come verbatim from a user bank.
#[derive(Debug, Clone)]
pub struct BankBacked<S> {
    pub model: S,
    pub bank: SampleBank,
}

impl<S: SubPosterior> BankBacked<S> {
    pub fn new(model: S, bank: SampleBank) -> Result<Self> {
        check_dim(model.dim(), bank.dim())?;
        Ok(BankBacked { model, bank })
    }
}

impl<S: SubPosterior> SubPosterior for BankBacked<S> {
    fn dim(&self) -> usize {
        self.model.dim()
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        self.model.log_density(x)
    }
    fn grad_log_density(&self, x: &[f64]) -> Vec<f64> {
        self.model.grad_log_density(x)
    }
    fn laplacian_log_density(&self, x: &[f64]) -> f64 {
        self.model.laplacian_log_density(x)
    }
    fn phi(&self, x: &[f64]) -> f64 {
        self.model.phi(x)
    }
    fn phi_bounds_unchecked(&self, rect: &Rect) -> (f64, f64) {
        self.model.phi_bounds_unchecked(rect)
    }
    fn phi_lower_bound(&self) -> Option<f64> {
        self.model.phi_lower_bound()
    }
    fn sample(&self, count: usize, _seed: u64) -> Result<SampleBank> {
        if count > self.bank.len() {
            return Err(FusionError::InvalidParameter(format!(
                "requested {count} draws but bank {} holds {}",
                self.bank.provenance,
                self.bank.len()
            )));
        }
        SampleBank::new(self.bank.draws()[..count].to_vec(), self.bank.provenance.clone())
    }
    fn as_logistic(&self) -> Option<&super::LogisticSubPosterior> {
        self.model.as_logistic()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GaussianSubPosterior;

    #[test]
    fn bank_backed_returns_draws_unchanged() {
        let draws = vec![vec![0.5, 1.0], vec![-2.0, 3.25], vec![7.0, 0.0]];
        let bank = SampleBank::new(draws.clone(), "inline").unwrap();
        let sp = BankBacked::new(GaussianSubPosterior::new(vec![0.0, 0.0], 1.0).unwrap(), bank)
            .unwrap();
        let out = crate::model::sample_initial(&sp, 3, 99).unwrap();
        assert_eq!(out.draws(), draws.as_slice());
        assert!(sp.sample(4, 0).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bank.csv");
        let bank = SampleBank::new(vec![vec![0.1, -1e-300], vec![1.0 / 3.0, 2.5e10]], "x").unwrap();
        bank.write_csv(&p).unwrap();
        let back = SampleBank::read_csv(&p).unwrap();
        assert_eq!(back.draws(), bank.draws());
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().next(), Some("x1,x2"));
    }

    #[test]
    fn rejects_ragged_and_empty() {
        assert!(SampleBank::new(vec![], "e").is_err());
        assert!(SampleBank::new(vec![vec![1.0], vec![1.0, 2.0]], "r").is_err());
    }
}
