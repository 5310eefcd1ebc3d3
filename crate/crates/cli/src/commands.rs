//! Subcommand implementations. Each returns the files it wrote.

use crate::config::{ProblemSpec, RunConfig, Setting};
use crate::error::{CliError, CliResult};
use bayesfusion::baselines::{consensus_monte_carlo, monte_carlo_fusion};
use bayesfusion::diagnostics::{export_traces, weighted_moments, Moments, WeightedSample};
use bayesfusion::model::{sample_initial, LogisticData, SampleBank};
use bayesfusion::partition::{cess_floor, mesh_ceiling, recommend_mesh, recommend_t};
use bayesfusion::rng::{child_seed, Domain};
use bayesfusion::smc::{run_fusion, FusionRun};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Command-line overrides shared by the subcommands.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: usize,
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.outputs.dir = Some(o.clone());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuseSummary {
    pub config_hash: String,
    pub seed: u64,
    #[serde(rename = "N")]
    pub particles: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub n: usize,
    pub cess0: f64,
    pub mean_cess_over_n: f64,
    pub resample_count: usize,
    pub final_ess: f64,
    pub log_normalizer: f64,
    pub phi_evals: u64,
    pub cost: u64,
    pub non_finite: usize,
    pub wall_ms: f64,
    pub moments: Moments,
}

impl FuseSummary {
    pub fn from_run(run: &FusionRun) -> CliResult<Self> {
        let s = WeightedSample::from_run(run)?;
        Ok(FuseSummary {
            config_hash: run.config_hash(),
            seed: run.seed,
            particles: run.n_particles,
            horizon: run.partition.horizon(),
            n: run.partition.n(),
            cess0: run.cess0,
            mean_cess_over_n: run.mean_cess_over_n(),
            resample_count: run.resample_count(),
            final_ess: run.final_ess(),
            log_normalizer: run.log_normalizer,
            phi_evals: run.phi_evals,
            cost: run.cost(),
            non_finite: run.non_finite,
            wall_ms: run.wall_ms,
            moments: weighted_moments(&s),
        })
    }
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.outputs.dir.clone().unwrap_or_else(|| PathBuf::from("."))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Runs the sampler and writes samples, trace and summary.
pub fn fuse(cfg: &RunConfig, workers: usize) -> CliResult<(FusionRun, Vec<PathBuf>)> {
    cfg.validate()?;
    let problem = cfg.build_problem()?;
    let partition = cfg.partition()?;
    log::info!("fusing C={} with N={}, T={}, n={}", problem.sps.len(), cfg.particles, partition.horizon(), partition.n());
    let run = run_fusion(&problem.refs(), &partition, cfg.particles, &cfg.smc_config(workers), cfg.seed)?;
    let dir = out_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    let samples = dir.join(&cfg.outputs.samples);
    let trace = dir.join(&cfg.outputs.trace);
    let summary = dir.join(&cfg.outputs.summary);
    WeightedSample::from_run(&run)?.write_csv(&samples)?;
    export_traces(&run, &trace)?;
    write_json(&FuseSummary::from_run(&run)?, &summary)?;
    Ok((run, vec![samples, trace, summary]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Guidance {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub n: usize,
    pub delta: f64,
    pub cess_floor_sh: f64,
    pub cess_floor_ssh: f64,
}

/// Recommended `T`, mesh and CESS floors for the configured regime. An
/// explicit `T` in the config is respected when sizing the mesh.
pub fn guidance(cfg: &RunConfig) -> CliResult<Guidance> {
    let het = cfg
        .heterogeneity
        .as_ref()
        .ok_or_else(|| CliError::Config("heterogeneity: guidance needs a regime".into()))?;
    het.validate().map_err(|e| CliError::Config(format!("heterogeneity: {e}")))?;
    let horizon = match cfg.horizon {
        Setting::Fixed(t) => t,
        Setting::Auto(_) => recommend_t(het).map_err(|e| CliError::Config(e.to_string()))?,
    };
    let mesh = recommend_mesh(het, horizon).map_err(|e| CliError::Config(e.to_string()))?;
    let (sh, ssh) = cess_floor(het).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(Guidance {
        horizon,
        n: mesh.n(),
        delta: mesh_ceiling(het),
        cess_floor_sh: sh,
        cess_floor_ssh: ssh,
    })
}

/// Writes per-core sample banks (`bank_c.csv`, `N` draws each) and, for
/// logistic problems, the data set (`data.csv`).
pub fn synth(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    cfg.validate()?;
    let problem = cfg.build_problem()?;
    let dir = out_dir(cfg);
    let mut banks = Vec::new();
    for (c, sp) in problem.sps.iter().enumerate() {
        banks.push(sample_initial(sp.as_ref(), cfg.particles, child_seed(cfg.seed, Domain::Synthetic, c as u64))?);
    }
    std::fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    if let ProblemSpec::Logistic { m, beta, data_seed, data: None, .. } = &cfg.problem {
        let path = dir.join("data.csv");
        LogisticData::simulate(*m, beta, *data_seed)?.write_csv(&path)?;
        written.push(path);
    }
    for (c, bank) in banks.iter().enumerate() {
        let path = dir.join(format!("bank_{}.csv", c + 1));
        bank.write_csv(&path)?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    Cmc,
    Mcf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub method: String,
    pub seed: u64,
    pub draws: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acceptance_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proposals: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub moments: Option<Moments>,
}

/// Consensus Monte Carlo on `N` draws per core, or Monte Carlo Fusion until
/// `baseline.target` acceptances.
pub fn baseline(cfg: &RunConfig, which: Baseline) -> CliResult<(BaselineSummary, Vec<PathBuf>)> {
    cfg.validate()?;
    let problem = cfg.build_problem()?;
    let (sample, summary) = match which {
        Baseline::Cmc => {
            let banks = problem
                .sps
                .iter()
                .enumerate()
                .map(|(c, sp)| sample_initial(sp.as_ref(), cfg.particles, child_seed(cfg.seed, Domain::Initial, c as u64)))
                .collect::<Result<Vec<SampleBank>, _>>()?;
            let s = consensus_monte_carlo(&banks)?;
            let summary = BaselineSummary {
                method: "cmc".into(),
                seed: cfg.seed,
                draws: s.len(),
                acceptance_rate: None,
                proposals: None,
                cost: None,
                diagnostic: None,
                moments: Some(weighted_moments(&s)),
            };
            (Some(s), summary)
        }
        Baseline::Mcf => {
            let horizon = match (cfg.baseline.mcf_horizon, cfg.horizon) {
                (Some(t), _) | (None, Setting::Fixed(t)) => t,
                (None, Setting::Auto(_)) => cfg.partition()?.horizon(),
            };
            let target = cfg.baseline.target.unwrap_or(cfg.particles);
            let out = monte_carlo_fusion(&problem.refs(), horizon, cfg.baseline.max_proposals, target, cfg.seed)
                .map_err(|e| match e {
                    bayesfusion::FusionError::UnknownPhiLowerBound(_) => CliError::Config(e.to_string()),
                    other => other.into(),
                })?;
            let s = if out.sample.is_empty() { None } else { Some(WeightedSample::uniform(out.sample.clone())?) };
            let summary = BaselineSummary {
                method: "mcf".into(),
                seed: cfg.seed,
                draws: out.sample.len(),
                acceptance_rate: Some(out.acceptance_rate),
                proposals: Some(out.proposals),
                cost: Some(out.cost),
                diagnostic: out.diagnostic.clone(),
                moments: s.as_ref().map(weighted_moments),
            };
            (s, summary)
        }
    };
    let dir = out_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    if let Some(s) = sample {
        let p = dir.join(&cfg.outputs.samples);
        s.write_csv(&p)?;
        written.push(p);
    }
    let p = dir.join(&cfg.outputs.summary);
    write_json(&summary, &p)?;
    written.push(p);
    Ok((summary, written))
}
