//! Run configuration: one JSON file per experiment.

use crate::error::{CliError, CliResult};
use bayesfusion::estimator::EstimatorConfig;
use bayesfusion::model::{
    make_gaussian_family, BankBacked, GaussianSubPosterior, LogisticData, LogisticProblem, LogisticSubPosterior,
    MeanPlacement, SampleBank, SubPosterior,
};
use bayesfusion::partition::{recommend_mesh, recommend_t, HeterogeneitySpec, TemporalPartition};
use bayesfusion::smc::{Initialisation, ResamplingScheme, SmcConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AutoWord {
    #[serde(rename = "auto")]
    Auto,
}

/// A value given explicitly or the string `"auto"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Setting<T> {
    Fixed(T),
    Auto(AutoWord),
}

impl<T> Setting<T> {
    pub fn auto() -> Self {
        Setting::Auto(AutoWord::Auto)
    }

    pub fn is_auto(&self) -> bool {
        matches!(self, Setting::Auto(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub mean: Vec<f64>,
    pub scale: f64,
}

fn default_placement() -> MeanPlacement {
    MeanPlacement::Spread
}

fn default_prior_variance() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemSpec {
    /// Isotropic Gaussian family built from the `heterogeneity` block.
    Gaussian {
        #[serde(default = "default_placement")]
        placement: MeanPlacement,
    },
    /// Explicit Gaussian components `N(mean, scale I)`.
    GaussianList { components: Vec<GaussianComponent> },
    /// Logistic regression split over `C` shards. Data are simulated from
    /// `beta` unless `data` names a CSV; `banks` optionally supplies the
    /// initial draws of each shard.
    Logistic {
        #[serde(default)]
        m: usize,
        #[serde(rename = "C")]
        c: usize,
        #[serde(default)]
        beta: Vec<f64>,
        #[serde(default)]
        data_seed: u64,
        #[serde(default = "default_prior_variance")]
        prior_variance: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        data: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        banks: Option<Vec<PathBuf>>,
    },
}

fn samples_name() -> String {
    "samples.csv".into()
}
fn trace_name() -> String {
    "trace.jsonl".into()
}
fn summary_name() -> String {
    "summary.json".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outputs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default = "samples_name")]
    pub samples: String,
    #[serde(default = "trace_name")]
    pub trace: String,
    #[serde(default = "summary_name")]
    pub summary: String,
}

impl Default for Outputs {
    fn default() -> Self {
        Outputs { dir: None, samples: samples_name(), trace: trace_name(), summary: summary_name() }
    }
}

fn default_max_proposals() -> usize {
    1_000_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSettings {
    /// Horizon for Monte Carlo Fusion; defaults to the run's `T`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mcf_horizon: Option<f64>,
    #[serde(default = "default_max_proposals")]
    pub max_proposals: usize,
    /// Accepted MCF draws to collect; defaults to `N`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        BaselineSettings { mcf_horizon: None, max_proposals: default_max_proposals(), target: None }
    }
}

fn default_threshold() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    #[serde(rename = "N")]
    pub particles: usize,
    #[serde(rename = "T")]
    pub horizon: Setting<f64>,
    pub n: Setting<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heterogeneity: Option<HeterogeneitySpec>,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default = "default_threshold")]
    pub ess_threshold: f64,
    #[serde(default)]
    pub resampling: ResamplingScheme,
    #[serde(default)]
    pub initialisation: Initialisation,
    #[serde(default)]
    pub weighted_cess: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub outputs: Outputs,
    #[serde(default)]
    pub baseline: BaselineSettings,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.particles < 2 {
            return Err(bad("N: need at least 2 particles"));
        }
        if !(0.0..=1.0).contains(&self.ess_threshold) {
            return Err(bad(format!("ess_threshold: {} outside [0, 1]", self.ess_threshold)));
        }
        self.estimator.validate().map_err(|e| bad(format!("estimator: {e}")))?;
        if let Setting::Fixed(t) = self.horizon {
            if !(t > 0.0 && t.is_finite()) {
                return Err(bad(format!("T: must be positive, got {t}")));
            }
        }
        if let Setting::Fixed(n) = self.n {
            if n == 0 {
                return Err(bad("n: must be at least 1"));
            }
        }
        if let Some(h) = &self.heterogeneity {
            h.validate().map_err(|e| bad(format!("heterogeneity: {e}")))?;
        }
        if (self.horizon.is_auto() || self.n.is_auto()) && self.heterogeneity.is_none() {
            return Err(bad("heterogeneity: \"auto\" T or n needs a heterogeneity regime"));
        }
        match &self.problem {
            ProblemSpec::Gaussian { .. } => {
                if self.heterogeneity.is_none() {
                    return Err(bad("heterogeneity: the gaussian problem is built from it"));
                }
            }
            ProblemSpec::GaussianList { components } => {
                let d = components.first().ok_or_else(|| bad("problem.components: empty"))?.mean.len();
                for (i, c) in components.iter().enumerate() {
                    if c.mean.len() != d || d == 0 || !(c.scale > 0.0) {
                        return Err(bad(format!("problem.components[{i}]: bad mean length or scale")));
                    }
                }
            }
            ProblemSpec::Logistic { m, c, beta, data, banks, prior_variance, .. } => {
                if *c == 0 {
                    return Err(bad("problem.C: must be at least 1"));
                }
                if data.is_none() && (beta.is_empty() || *m < *c) {
                    return Err(bad("problem: simulated data need beta and m >= C"));
                }
                if !(*prior_variance > 0.0) {
                    return Err(bad("problem.prior_variance: must be positive"));
                }
                if let Some(b) = banks {
                    if b.len() != *c {
                        return Err(bad(format!("problem.banks: {} paths for C = {c}", b.len())));
                    }
                }
            }
        }
        let o = &self.outputs;
        let names = [&o.samples, &o.trace, &o.summary];
        for (i, a) in names.iter().enumerate() {
            if a.is_empty() {
                return Err(bad("outputs: empty file name"));
            }
            if names[i + 1..].contains(a) {
                return Err(bad(format!("outputs: file name {a} used twice")));
            }
        }
        Ok(())
    }

    pub fn smc_config(&self, workers: usize) -> SmcConfig {
        SmcConfig {
            estimator: self.estimator.clone(),
            ess_threshold: self.ess_threshold,
            resampling: self.resampling,
            initialisation: self.initialisation.clone(),
            weighted_cess: self.weighted_cess,
            workers,
        }
    }

    /// The temporal partition, resolving `"auto"` through the guidance.
    pub fn partition(&self) -> CliResult<TemporalPartition> {
        let het = self.heterogeneity.as_ref();
        let horizon = match self.horizon {
            Setting::Fixed(t) => t,
            Setting::Auto(_) => recommend_t(het.unwrap()).map_err(|e| bad(format!("T: {e}")))?,
        };
        match self.n {
            Setting::Fixed(n) => TemporalPartition::regular(horizon, n).map_err(|e| bad(format!("n: {e}"))),
            Setting::Auto(_) => recommend_mesh(het.unwrap(), horizon).map_err(|e| bad(format!("n: {e}"))),
        }
    }

    pub fn build_problem(&self) -> CliResult<Problem> {
        match &self.problem {
            ProblemSpec::Gaussian { placement } => {
                let het = self.heterogeneity.as_ref().unwrap();
                let fs = make_gaussian_family(het, *placement).map_err(|e| bad(format!("problem: {e}")))?;
                Ok(Problem::gaussian(fs))
            }
            ProblemSpec::GaussianList { components } => {
                let fs = components
                    .iter()
                    .map(|c| GaussianSubPosterior::new(c.mean.clone(), c.scale))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| bad(format!("problem.components: {e}")))?;
                Ok(Problem::gaussian(fs))
            }
            ProblemSpec::Logistic { m, c, beta, data_seed, prior_variance, data, banks } => {
                let data = match data {
                    Some(p) => LogisticData::read_csv(p).map_err(|e| bad(format!("problem.data: {e}")))?,
                    None => LogisticData::simulate(*m, beta, *data_seed).map_err(|e| bad(format!("problem: {e}")))?,
                };
                let prob = LogisticProblem::from_data(data, *c, *prior_variance)
                    .map_err(|e| bad(format!("problem: {e}")))?;
                let sps: Vec<Box<dyn SubPosterior>> = match banks {
                    Some(paths) => prob
                        .shards
                        .iter()
                        .zip(paths)
                        .map(|(s, p)| {
                            let bank = SampleBank::read_csv(p).map_err(|e| bad(format!("problem.banks: {e}")))?;
                            let sp = BankBacked::new(s.clone(), bank)
                                .map_err(|e| bad(format!("problem.banks: {e}")))?;
                            Ok(Box::new(sp) as Box<dyn SubPosterior>)
                        })
                        .collect::<CliResult<_>>()?,
                    None => prob.shards.iter().map(|s| Box::new(s.clone()) as Box<dyn SubPosterior>).collect(),
                };
                Ok(Problem { sps, exact: None, full: Some(prob.full) })
            }
        }
    }
}

/// The sub-posteriors of a run and, when known, the exact fusion target.
#[derive(Debug)]
pub struct Problem {
    pub sps: Vec<Box<dyn SubPosterior>>,
    /// Mean and per-coordinate variance of the product of Gaussians.
    pub exact: Option<(Vec<f64>, f64)>,
    /// Full-data posterior, for logistic problems.
    pub full: Option<LogisticSubPosterior>,
}

impl Problem {
    pub fn gaussian(fs: Vec<GaussianSubPosterior>) -> Self {
        let prec: f64 = fs.iter().map(|f| 1.0 / f.scale).sum();
        let d = fs[0].mean.len();
        let mean = (0..d).map(|k| fs.iter().map(|f| f.mean[k] / f.scale).sum::<f64>() / prec).collect();
        let sps = fs.into_iter().map(|f| Box::new(f) as Box<dyn SubPosterior>).collect();
        Problem { sps, exact: Some((mean, 1.0 / prec)), full: None }
    }

    pub fn refs(&self) -> Vec<&dyn SubPosterior> {
        self.sps.iter().map(|b| b.as_ref()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"{
        "problem": {"kind": "gaussian", "placement": {"kind": "spread"}},
        "N": 500, "T": "auto", "n": "auto",
        "heterogeneity": {"regime": {"sh": {"lambda": 1.0}}, "C": 4, "m": 1000, "d": 2},
        "seed": 7
    }"#;

    #[test]
    fn round_trip() {
        let cfg: RunConfig = serde_json::from_str(EXAMPLE).unwrap();
        cfg.validate().unwrap();
        let again: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(cfg, again);
        assert!(cfg.horizon.is_auto());
    }

    #[test]
    fn rejects_bad_fields() {
        let mut cfg: RunConfig = serde_json::from_str(EXAMPLE).unwrap();
        cfg.heterogeneity = None;
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
        let mut cfg: RunConfig = serde_json::from_str(EXAMPLE).unwrap();
        cfg.outputs.trace = "samples.csv".into();
        assert!(cfg.validate().is_err());
        assert!(serde_json::from_str::<RunConfig>(&EXAMPLE.replace("\"seed\"", "\"sede\"")).is_err());
        let fixed = EXAMPLE.replace("\"T\": \"auto\"", "\"T\": -1.0");
        assert!(serde_json::from_str::<RunConfig>(&fixed).unwrap().validate().is_err());
    }

    #[test]
    fn auto_partition_follows_guidance() {
        let cfg: RunConfig = serde_json::from_str(EXAMPLE).unwrap();
        let het = cfg.heterogeneity.clone().unwrap();
        let p = cfg.partition().unwrap();
        assert_eq!(p.horizon(), recommend_t(&het).unwrap());
        assert_eq!(p.n(), recommend_mesh(&het, p.horizon()).unwrap().n());
    }
}
