//! Desk-scale experiment grids behind `fusion benchmark`.

use crate::commands::write_json;
use crate::error::{CliError, CliResult};
use bayesfusion::baselines::{consensus_monte_carlo, monte_carlo_fusion};
use bayesfusion::diagnostics::{export_traces, iad, KdeSpec, WeightedSample};
use bayesfusion::model::{
    make_gaussian_family, make_logistic_problem, BankBacked, GaussianSubPosterior, MeanPlacement, SampleBank,
    SubPosterior,
};
use bayesfusion::partition::{
    estimate_b, estimate_heterogeneity, recommend_mesh, recommend_t, HeterogeneitySpec, Regime, TemporalPartition,
};
use bayesfusion::rng::{self, child_seed, Domain};
use bayesfusion::smc::{run_fusion, FusionRun, ResamplingScheme, SmcConfig};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    ShScaling,
    SshScaling,
    MeshRegularity,
    McfCost,
    LogisticCompare,
}

impl Suite {
    pub const ALL: [Suite; 5] =
        [Suite::ShScaling, Suite::SshScaling, Suite::MeshRegularity, Suite::McfCost, Suite::LogisticCompare];

    pub fn name(self) -> &'static str {
        match self {
            Suite::ShScaling => "sh-scaling",
            Suite::SshScaling => "ssh-scaling",
            Suite::MeshRegularity => "mesh-regularity",
            Suite::McfCost => "mcf-cost",
            Suite::LogisticCompare => "logistic-compare",
        }
    }
}

impl FromStr for Suite {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Suite::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown suite {s:?}")))
    }
}

/// Knobs for a suite run. Grids left as `None` use the suite defaults.
#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub particles: usize,
    pub seed: u64,
    pub workers: usize,
    pub m_grid: Option<Vec<f64>>,
    pub c_grid: Option<Vec<usize>>,
    /// Accepted draws per Monte Carlo Fusion cell.
    pub mcf_target: usize,
    /// Draws in the full-data MCMC benchmark of the logistic suite.
    pub benchmark_draws: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            particles: 2000,
            seed: 1,
            workers: 0,
            m_grid: None,
            c_grid: None,
            mcf_target: 1000,
            benchmark_draws: 10_000,
        }
    }
}

/// One row of the suite CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: String,
    pub method: String,
    pub m: f64,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub n: usize,
    #[serde(rename = "cess0_over_N")]
    pub cess0_over_n: Option<f64>,
    #[serde(rename = "mean_cess_over_N")]
    pub mean_cess_over_n: Option<f64>,
    #[serde(rename = "IAD")]
    pub iad: Option<f64>,
    pub ess: Option<f64>,
    pub cost: Option<u64>,
    pub cost_per_ess: Option<f64>,
    pub wall_ms: f64,
    pub error: Option<String>,
}

impl CellResult {
    fn blank(cell: &str, method: &str, m: f64, c: usize) -> Self {
        CellResult {
            cell: cell.into(),
            method: method.into(),
            m,
            c,
            horizon: f64::NAN,
            n: 0,
            cess0_over_n: None,
            mean_cess_over_n: None,
            iad: None,
            ess: None,
            cost: None,
            cost_per_ess: None,
            wall_ms: 0.0,
            error: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: Suite,
    pub cells: Vec<CellResult>,
}

impl SuiteReport {
    pub fn completed_fraction(&self) -> f64 {
        let ok = self.cells.iter().filter(|c| c.error.is_none()).count();
        ok as f64 / self.cells.len().max(1) as f64
    }

    pub fn get(&self, cell: &str, method: &str) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.cell == cell && c.method == method)
    }

    pub fn write_csv(&self, path: &Path) -> CliResult<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Runtime(e.to_string()))?;
        for c in &self.cells {
            w.serialize(c).map_err(|e| CliError::Runtime(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> CliResult<Vec<CellResult>> {
        let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Runtime(e.to_string()))?;
        r.deserialize().collect::<Result<_, _>>().map_err(|e| CliError::Runtime(e.to_string()))
    }
}

struct Ctx<'a> {
    opts: &'a SuiteOptions,
    out: Option<&'a Path>,
}

impl Ctx<'_> {
    // Systematic resampling: lower variance than the library default.
    fn smc(&self) -> SmcConfig {
        SmcConfig { workers: self.opts.workers, resampling: ResamplingScheme::Systematic, ..SmcConfig::default() }
    }

    fn cell_dir(&self, cell: &CellResult) -> CliResult<Option<std::path::PathBuf>> {
        match self.out {
            Some(o) => {
                let dir = o.join(format!("{}-{}", cell.cell, cell.method));
                std::fs::create_dir_all(&dir)?;
                Ok(Some(dir))
            }
            None => Ok(None),
        }
    }

    /// Runs fusion and fills a row; `reference` is compared by IAD.
    fn fusion_cell(
        &self,
        mut row: CellResult,
        sps: &[&dyn SubPosterior],
        partition: &TemporalPartition,
        reference: Option<&WeightedSample>,
    ) -> CellResult {
        row.horizon = partition.horizon();
        row.n = partition.n();
        let start = Instant::now();
        let result = (|| -> CliResult<FusionRun> {
            let run = run_fusion(sps, partition, self.opts.particles, &self.smc(), self.opts.seed)?;
            if let Some(dir) = self.cell_dir(&row)? {
                export_traces(&run, &dir.join("trace.jsonl"))?;
                write_json(&crate::commands::FuseSummary::from_run(&run)?, &dir.join("summary.json"))?;
            }
            Ok(run)
        })();
        row.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        match result {
            Ok(run) => {
                let n = run.n_particles as f64;
                row.cess0_over_n = Some(run.cess0 / n);
                row.mean_cess_over_n = Some(run.mean_cess_over_n());
                let ess = run.final_ess();
                row.ess = Some(ess);
                row.cost = Some(run.cost());
                row.cost_per_ess = Some(run.cost() as f64 / ess);
                if let Some(reference) = reference {
                    row.iad = WeightedSample::from_run(&run)
                        .and_then(|s| iad(&s, reference, &KdeSpec::default()))
                        .ok();
                }
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        log::info!("{}/{}: {:?}", row.cell, row.method, row.mean_cess_over_n);
        row
    }
}

/// Exact draws from the product of isotropic Gaussians.
fn product_sample(fs: &[GaussianSubPosterior], count: usize, seed: u64) -> CliResult<WeightedSample> {
    let prec: f64 = fs.iter().map(|f| 1.0 / f.scale).sum();
    let d = fs[0].mean.len();
    let mean: Vec<f64> = (0..d).map(|k| fs.iter().map(|f| f.mean[k] / f.scale).sum::<f64>() / prec).collect();
    let sd = (1.0 / prec).sqrt();
    let mut r = rng::stream(seed, Domain::Baseline, u64::MAX, 0);
    let pts = (0..count)
        .map(|_| {
            mean.iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    m + sd * z
                })
                .collect()
        })
        .collect();
    Ok(WeightedSample::uniform(pts)?)
}

fn refs(fs: &[GaussianSubPosterior]) -> Vec<&dyn SubPosterior> {
    fs.iter().map(|f| f as &dyn SubPosterior).collect()
}

fn guided(het: &HeterogeneitySpec) -> CliResult<TemporalPartition> {
    let t = recommend_t(het)?;
    Ok(recommend_mesh(het, t)?)
}

/// Runs `suite`; with `out`, writes one directory per cell and `suite.csv`.
pub fn run_suite(suite: Suite, opts: &SuiteOptions, out: Option<&Path>) -> CliResult<SuiteReport> {
    if opts.particles < 2 {
        return Err(CliError::Config("particles: need at least 2".into()));
    }
    if let Some(o) = out {
        std::fs::create_dir_all(o)?;
    }
    let ctx = Ctx { opts, out };
    let cells = match suite {
        Suite::ShScaling => sh_scaling(&ctx)?,
        Suite::SshScaling => ssh_scaling(&ctx)?,
        Suite::MeshRegularity => mesh_regularity(&ctx)?,
        Suite::McfCost => mcf_cost(&ctx)?,
        Suite::LogisticCompare => logistic_compare(&ctx)?,
    };
    let report = SuiteReport { suite, cells };
    if let Some(o) = out {
        report.write_csv(&o.join("suite.csv"))?;
    }
    Ok(report)
}

/// `C = 10`, `d = 1`, `lambda = 1`: fixed `T = 0.005, n = 5` against guidance.
fn sh_scaling(ctx: &Ctx) -> CliResult<Vec<CellResult>> {
    let c = ctx.opts.c_grid.as_ref().and_then(|g| g.first().copied()).unwrap_or(10);
    let grid = ctx.opts.m_grid.clone().unwrap_or_else(|| vec![1000.0, 5000.0, 10_000.0]);
    let mut rows = Vec::new();
    for m in grid {
        let het = HeterogeneitySpec::new(Regime::Sh { lambda: 1.0 }, c, m, 1.0, 1);
        let fs = make_gaussian_family(&het, MeanPlacement::Spread)?;
        let exact = product_sample(&fs, ctx.opts.particles, ctx.opts.seed)?;
        let cell = format!("m{m}");
        let fixed = TemporalPartition::regular(0.005, 5)?;
        rows.push(ctx.fusion_cell(CellResult::blank(&cell, "fixed", m, c), &refs(&fs), &fixed, Some(&exact)));
        rows.push(ctx.fusion_cell(CellResult::blank(&cell, "auto", m, c), &refs(&fs), &guided(&het)?, Some(&exact)));
    }
    Ok(rows)
}

/// `C = 2`, means `+-0.25`: fixed `T = 0.01, n = 5` against guidance.
fn ssh_scaling(ctx: &Ctx) -> CliResult<Vec<CellResult>> {
    let grid = ctx.opts.m_grid.clone().unwrap_or_else(|| vec![250.0, 1000.0, 2500.0]);
    let mut rows = Vec::new();
    for m in grid {
        let scale = 2.0 / m;
        let fs = vec![GaussianSubPosterior::new(vec![0.25], scale)?, GaussianSubPosterior::new(vec![-0.25], scale)?];
        // sigma_a^2 = 0.0625 = b gamma with b = 1
        let het = HeterogeneitySpec::new(Regime::Ssh { gamma: 0.0625 }, 2, m, 1.0, 1);
        let exact = product_sample(&fs, ctx.opts.particles, ctx.opts.seed)?;
        let cell = format!("m{m}");
        let fixed = TemporalPartition::regular(0.01, 5)?;
        rows.push(ctx.fusion_cell(CellResult::blank(&cell, "fixed", m, 2), &refs(&fs), &fixed, Some(&exact)));
        rows.push(ctx.fusion_cell(CellResult::blank(&cell, "auto", m, 2), &refs(&fs), &guided(&het)?, Some(&exact)));
    }
    Ok(rows)
}

/// Guided `T` with the guided `n`, spread regularly or bunched at either end.
fn mesh_regularity(ctx: &Ctx) -> CliResult<Vec<CellResult>> {
    let c = ctx.opts.c_grid.as_ref().and_then(|g| g.first().copied()).unwrap_or(4);
    let m = ctx.opts.m_grid.as_ref().and_then(|g| g.first().copied()).unwrap_or(1000.0);
    let het = HeterogeneitySpec::new(Regime::Sh { lambda: 1.0 }, c, m, 1.0, 1);
    let fs = make_gaussian_family(&het, MeanPlacement::Spread)?;
    let exact = product_sample(&fs, ctx.opts.particles, ctx.opts.seed)?;
    let regular = guided(&het)?;
    let (t, n) = (regular.horizon(), regular.n().max(2));
    let knots = |f: &dyn Fn(f64) -> f64| -> CliResult<TemporalPartition> {
        let mut k: Vec<f64> = (0..=n).map(|j| t * f(j as f64 / n as f64)).collect();
        k[n] = t;
        Ok(TemporalPartition::from_knots(k)?)
    };
    let cell = format!("m{m}");
    Ok(vec![
        ctx.fusion_cell(CellResult::blank(&cell, "regular", m, c), &refs(&fs), &TemporalPartition::regular(t, n)?, Some(&exact)),
        ctx.fusion_cell(CellResult::blank(&cell, "front", m, c), &refs(&fs), &knots(&|u| u * u)?, Some(&exact)),
        ctx.fusion_cell(CellResult::blank(&cell, "back", m, c), &refs(&fs), &knots(&|u| 1.0 - (1.0 - u) * (1.0 - u))?, Some(&exact)),
    ])
}

/// Identical `N(0, C)` sub-posteriors: Monte Carlo Fusion with `T = 1`
/// against guided fusion, compared by cost per effective sample.
fn mcf_cost(ctx: &Ctx) -> CliResult<Vec<CellResult>> {
    let grid = ctx.opts.c_grid.clone().unwrap_or_else(|| vec![2, 3, 4, 5]);
    let mut rows = Vec::new();
    for c in grid {
        let het = HeterogeneitySpec::new(Regime::Sh { lambda: 1.0 }, c, 1.0, 1.0, 1);
        let fs = make_gaussian_family(&het, MeanPlacement::Identical)?;
        let exact = product_sample(&fs, ctx.opts.particles, ctx.opts.seed)?;
        let cell = format!("C{c}");
        rows.push(ctx.fusion_cell(CellResult::blank(&cell, "bf", 1.0, c), &refs(&fs), &guided(&het)?, Some(&exact)));

        let mut row = CellResult::blank(&cell, "mcf", 1.0, c);
        row.horizon = 1.0;
        row.n = 1;
        let start = Instant::now();
        match monte_carlo_fusion(&refs(&fs), 1.0, 100_000_000, ctx.opts.mcf_target, ctx.opts.seed) {
            Ok(out) => {
                let accepted = out.sample.len() as f64;
                row.ess = Some(accepted);
                row.cost = Some(out.cost);
                row.cost_per_ess = Some(out.cost as f64 / accepted);
                row.cess0_over_n = Some(out.acceptance_rate);
                if let Some(d) = out.diagnostic {
                    row.error = Some(d);
                } else if let Ok(s) = WeightedSample::uniform(out.sample) {
                    row.iad = iad(&s, &exact, &KdeSpec::default()).ok();
                }
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        row.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        if let Some(dir) = ctx.cell_dir(&row)? {
            write_json(&row, &dir.join("summary.json"))?;
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Synthetic logistic regression, `m = 1000`, `beta = (-4, -2)`: fusion and
/// Consensus Monte Carlo against a full-data MCMC benchmark.
fn logistic_compare(ctx: &Ctx) -> CliResult<Vec<CellResult>> {
    let grid = ctx.opts.c_grid.clone().unwrap_or_else(|| vec![5, 10, 20]);
    let m = ctx.opts.m_grid.as_ref().and_then(|g| g.first().copied()).unwrap_or(1000.0);
    let mut rows = Vec::new();
    let data_seed = ctx.opts.seed;
    let full = make_logistic_problem(m as usize, 1, &[-4.0, -2.0], data_seed)?.full;
    let bench = full.sample(ctx.opts.benchmark_draws, child_seed(ctx.opts.seed, Domain::Baseline, 0))?;
    let bench = WeightedSample::uniform(bench.into_draws())?;
    for c in grid {
        let prob = make_logistic_problem(m as usize, c, &[-4.0, -2.0], data_seed)?;
        let banks: Vec<SampleBank> = prob
            .shards
            .iter()
            .enumerate()
            .map(|(i, s)| s.sample(ctx.opts.particles, child_seed(ctx.opts.seed, Domain::Initial, i as u64)))
            .collect::<Result<_, _>>()?;
        let cell = format!("C{c}");

        let mut row = CellResult::blank(&cell, "cmc", m, c);
        let start = Instant::now();
        match consensus_monte_carlo(&banks) {
            Ok(s) => row.iad = iad(&s, &bench, &KdeSpec::default()).ok(),
            Err(e) => row.error = Some(e.to_string()),
        }
        row.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        if let Some(dir) = ctx.cell_dir(&row)? {
            write_json(&row, &dir.join("summary.json"))?;
        }
        rows.push(row);

        let sigma_a2 = estimate_heterogeneity(&banks)?;
        let b = estimate_b(&banks, m)?;
        let het = HeterogeneitySpec::new(Regime::Ssh { gamma: sigma_a2 / b }, c, m, b, prob.data.z[0].len());
        log::info!("C={c}: sigma_a^2 = {sigma_a2:.4}, b = {b:.2}");
        let backed: Vec<BankBacked<_>> = prob
            .shards
            .into_iter()
            .zip(banks)
            .map(|(s, bank)| BankBacked::new(s, bank))
            .collect::<Result<_, _>>()?;
        let sps: Vec<&dyn SubPosterior> = backed.iter().map(|s| s as &dyn SubPosterior).collect();
        rows.push(ctx.fusion_cell(CellResult::blank(&cell, "bf", m, c), &sps, &guided(&het)?, Some(&bench)));
    }
    Ok(rows)
}
