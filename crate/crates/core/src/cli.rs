//! Command-line front end: ingestion, simulation, sampling, estimation
//! sweeps and oracle values.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, Family};
use crate::oracle::{
    check_separation, exact_marglik_bruteforce, map_allocation, wellsep_marglik, AllocationMatrix,
};
use crate::ordering::orderings_csv;
use crate::sampler::{default_spec, run_chain, ChainConfig, PosteriorRun};
use crate::thames::{estimate_with_pipeline, PreviousEstimate, ThamesConfig, ThamesResult};

pub const CSV_HEADER: &str =
    "G,log_z,se_log_z,CO,I_size,omega_size,alpha,c_final,status,provenance";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Data(_) | Error::Parse { .. } | Error::Io(_) | Error::Csv(_) | Error::Json(_) => {
            EXIT_DATA
        }
        Error::Domain(_)
        | Error::Numerical(_)
        | Error::EmptyTruncation { .. }
        | Error::Guard { .. } => EXIT_NUMERICAL,
    }
}

/// Read a rectangular numeric CSV. A first line with any non-numeric cell
/// is taken as a header. Every value is divided by `scale` when given.
pub fn ingest_csv(path: &Path, scale: Option<f64>) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    parse_csv(&text, scale)
}

pub fn parse_csv(text: &str, scale: Option<f64>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (idx, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = idx + 1;
        if rec.iter().all(|c| c.is_empty()) {
            continue;
        }
        let parsed: Vec<std::result::Result<f64, _>> =
            rec.iter().map(|c| c.parse::<f64>()).collect();
        if idx == 0 && parsed.iter().any(|p| p.is_err()) {
            continue;
        }
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(Error::Parse {
                row: line,
                col: rec.len().min(w) + 1,
                msg: format!("expected {w} columns, found {}", rec.len()),
            });
        }
        let mut row = Vec::with_capacity(w);
        for (j, (p, cell)) in parsed.into_iter().zip(rec.iter()).enumerate() {
            match p {
                Ok(v) if v.is_finite() => row.push(v),
                _ => {
                    return Err(Error::Parse {
                        row: line,
                        col: j + 1,
                        msg: format!("'{cell}' is not a finite number"),
                    })
                }
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            row: 1,
            col: 1,
            msg: "no numeric rows".into(),
        });
    }
    let data = Dataset::from_rows(&rows)?;
    match scale {
        Some(s) if !(s > 0.0 && s.is_finite()) => {
            Err(Error::Config(format!("scale must be positive, got {s}")))
        }
        Some(s) => Ok(data.scaled(s)),
        None => Ok(data),
    }
}

pub fn write_dataset_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((1..=data.d()).map(|j| format!("x{j}")))?;
    for i in 0..data.n() {
        w.write_record(data.row(i).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Simulated dataset with its generating parameters.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub data: Dataset,
    /// 0-based generating labels.
    pub labels: Vec<usize>,
    pub means: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

/// Means of the univariate overlap design: `ρ = 0` spreads the means over
/// `[0, 6]`, `ρ = 1` shrinks them to `[2, 4]`.
pub fn toy_means(g: usize, rho: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("rho must lie in [0, 1], got {rho}")));
    }
    let spread = 2.0 * (1.0 - rho) + 1.0;
    match g {
        2 => Ok(vec![3.0 - spread, 3.0 + spread]),
        3 => Ok(vec![3.0 - spread, 3.0, 3.0 + spread]),
        _ => Err(Error::Config(format!(
            "the univariate design has G = 2 or 3, got {g}"
        ))),
    }
}

fn toy_weights(g: usize) -> Vec<f64> {
    if g == 2 {
        vec![1.0 / 3.0, 2.0 / 3.0]
    } else {
        vec![2.0 / 6.0, 1.0 / 6.0, 3.0 / 6.0]
    }
}

fn draw_label<R: Rng>(rng: &mut R, w: &[f64]) -> usize {
    let mut u: f64 = rng.random();
    for (k, &p) in w.iter().enumerate() {
        if u < p {
            return k;
        }
        u -= p;
    }
    w.len() - 1
}

/// Univariate data with unit variances from the overlap design.
pub fn simulate_toy(g: usize, rho: f64, n: usize, seed: u64) -> Result<Simulation> {
    let means = toy_means(g, rho)?;
    let weights = toy_weights(g);
    let mut rng = crate::sampler::rng_for(seed, 7);
    let mut labels = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let k = draw_label(&mut rng, &weights);
        let z: f64 = StandardNormal.sample(&mut rng);
        labels.push(k);
        ys.push(means[k] + z);
    }
    Ok(Simulation {
        data: Dataset::univariate(&ys)?,
        labels,
        means: means.into_iter().map(|m| vec![m]).collect(),
        weights,
    })
}

/// Well-separated multivariate design: `μ_g = 100·g·1_d`, identity
/// covariances, equal weights.
pub fn simulate_separated(g: usize, d: usize, n: usize, seed: u64) -> Result<Simulation> {
    if g == 0 || d == 0 || n == 0 {
        return Err(Error::Config("G, d and n must be positive".into()));
    }
    let means: Vec<Vec<f64>> = (1..=g).map(|k| vec![100.0 * k as f64; d]).collect();
    let weights = vec![1.0 / g as f64; g];
    let mut rng = crate::sampler::rng_for(seed, 7);
    let mut labels = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let k = draw_label(&mut rng, &weights);
        labels.push(k);
        rows.push(
            means[k]
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + z
                })
                .collect::<Vec<f64>>(),
        );
    }
    Ok(Simulation {
        data: Dataset::from_rows(&rows)?,
        labels,
        means,
        weights,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Univariate overlap design, `n = 10` by default.
    Toy,
    /// `G = 5`, `d = 6`, `n = 200`, full covariances.
    Setting1,
    /// `G = 15`, `d = 5`, `n = 345`, diagonal covariances.
    Setting2,
}

#[derive(Parser, Debug)]
#[command(
    name = "thames",
    version,
    about = "Marginal likelihoods of Gaussian mixtures from MCMC output"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a simulated dataset and a JSON sidecar with the truth.
    Simulate(SimulateArgs),
    /// Run the Gibbs sampler and store the posterior draws.
    Sample(RunArgs),
    /// Sample, relabel and estimate the marginal likelihood for each G.
    Estimate(RunArgs),
    /// Exact or well-separated reference values.
    Oracle(RunArgs),
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub scenario: Scenario,
    #[arg(long, default_value_t = 0.0)]
    pub rho: f64,
    /// True number of components (toy scenario).
    #[arg(long, default_value_t = 2)]
    pub g: usize,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output CSV; the sidecar goes next to it with a `.json` extension.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Default)]
pub struct RunArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, conflicts_with = "g_range")]
    pub g: Option<usize>,
    /// Inclusive range `A:B`.
    #[arg(long)]
    pub g_range: Option<String>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub burnin: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Divide every data value by this number.
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write DOT files for the overlap graph and the precedence matrix.
    #[arg(long)]
    pub dot: bool,
    /// Write per-G JSON diagnostics.
    #[arg(long)]
    pub json: bool,
    /// JSON file supplying any of these options; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Posterior run file to estimate from instead of sampling.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Fixed truncation quantile instead of the automatic choice.
    #[arg(long)]
    pub alpha: Option<f64>,
}

/// Options read from a `--config` file.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub data: Option<PathBuf>,
    pub model: Option<String>,
    pub g: Option<usize>,
    pub g_range: Option<String>,
    pub iters: Option<usize>,
    pub burnin: Option<usize>,
    pub thin: Option<usize>,
    pub seed: Option<u64>,
    pub scale: Option<f64>,
    pub out: Option<PathBuf>,
    pub dot: Option<bool>,
    pub json: Option<bool>,
    pub run: Option<PathBuf>,
    pub thames: Option<ThamesConfig>,
}

/// Fully resolved options of a run.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub data: PathBuf,
    pub family: Family,
    pub g_range: (usize, usize),
    pub chain: ChainConfig,
    pub scale: Option<f64>,
    pub out: PathBuf,
    pub dot: bool,
    pub json: bool,
    pub run: Option<PathBuf>,
    pub thames: ThamesConfig,
}

pub fn parse_g_range(s: &str) -> Result<(usize, usize)> {
    let bad = || {
        Error::Config(format!(
            "G range must look like A:B with 1 ≤ A ≤ B, got '{s}'"
        ))
    };
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    let a: usize = a.trim().parse().map_err(|_| bad())?;
    let b: usize = b.trim().parse().map_err(|_| bad())?;
    if a == 0 || a > b {
        return Err(bad());
    }
    Ok((a, b))
}

impl RunManifest {
    pub fn resolve(args: &RunArgs) -> Result<Self> {
        let file: FileConfig = match &args.config {
            Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => FileConfig::default(),
        };
        let data = args
            .data
            .clone()
            .or(file.data)
            .ok_or_else(|| Error::Config("--data is required".into()))?;
        let family: Family = args
            .model
            .clone()
            .or(file.model)
            .unwrap_or_else(|| "mvn-full".into())
            .parse()?;
        let g_range = match (args.g, &args.g_range) {
            (Some(g), _) => (g, g),
            (None, Some(r)) => parse_g_range(r)?,
            (None, None) => match (file.g, &file.g_range) {
                (Some(g), _) => (g, g),
                (None, Some(r)) => parse_g_range(r)?,
                (None, None) => return Err(Error::Config("--g or --g-range is required".into())),
            },
        };
        if g_range.0 == 0 {
            return Err(Error::Config("G must be at least 1".into()));
        }
        let chain = ChainConfig {
            iterations: args.iters.or(file.iters).unwrap_or(12_000),
            burn_in: args.burnin.or(file.burnin).unwrap_or(2_000),
            seed: args.seed.or(file.seed).unwrap_or(1),
            thin: args.thin.or(file.thin).unwrap_or(1),
        };
        chain.retained()?;
        let mut thames = file.thames.unwrap_or_default();
        thames.seed = chain.seed;
        if let Some(a) = args.alpha {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::Config(format!("alpha must lie in (0, 1], got {a}")));
            }
            thames.alpha_fixed = Some(a);
        }
        let run = args.run.clone().or(file.run);
        if run.is_some() && g_range.0 != g_range.1 {
            return Err(Error::Config("--run takes a single G".into()));
        }
        Ok(RunManifest {
            data,
            family,
            g_range,
            chain,
            scale: args.scale.or(file.scale),
            out: args
                .out
                .clone()
                .or(file.out)
                .unwrap_or_else(|| PathBuf::from("out")),
            dot: args.dot || file.dot.unwrap_or(false),
            json: args.json || file.json.unwrap_or(false),
            run,
            thames,
        })
    }

    fn gs(&self) -> Vec<usize> {
        (self.g_range.0..=self.g_range.1).collect()
    }

    fn chain_for(&self, g: usize) -> ChainConfig {
        ChainConfig {
            seed: self.chain.seed.wrapping_add(g as u64),
            ..self.chain
        }
    }
}

/// One row of the shared result CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub g: usize,
    pub log_z: Option<f64>,
    pub se_log_z: Option<f64>,
    pub co: Option<i64>,
    pub i_size: Option<usize>,
    pub omega_size: Option<usize>,
    pub alpha: Option<f64>,
    pub c_final: Option<f64>,
    pub status: String,
    pub provenance: String,
}

impl ResultRow {
    fn failed(g: usize, e: &Error, provenance: &str) -> Self {
        ResultRow {
            g,
            log_z: None,
            se_log_z: None,
            co: None,
            i_size: None,
            omega_size: None,
            alpha: None,
            c_final: None,
            status: format!("error: {e}"),
            provenance: provenance.into(),
        }
    }

    fn from_result(r: &ThamesResult) -> Self {
        let direct = r.log_z_direct.is_some();
        ResultRow {
            g: r.g,
            log_z: Some(r.log_z),
            se_log_z: Some(r.se_log_z),
            co: direct.then_some(r.co),
            i_size: direct.then_some(r.i_set.len()),
            omega_size: direct.then_some(r.omega_size),
            alpha: direct.then_some(r.alpha),
            c_final: direct.then_some(r.c_final),
            status: "ok".into(),
            provenance: if r.reduced_from.is_some() {
                "thames-reduced".into()
            } else {
                "thames".into()
            },
        }
    }
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(CSV_HEADER.split(','))?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in rows {
        w.write_record([
            r.g.to_string(),
            opt(r.log_z.map(|v| v.to_string())),
            opt(r.se_log_z.map(|v| v.to_string())),
            opt(r.co.map(|v| v.to_string())),
            opt(r.i_size.map(|v| v.to_string())),
            opt(r.omega_size.map(|v| v.to_string())),
            opt(r.alpha.map(|v| v.to_string())),
            opt(r.c_final.map(|v| v.to_string())),
            r.status.clone(),
            r.provenance.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn load_data(m: &RunManifest) -> Result<Dataset> {
    let data = ingest_csv(&m.data, m.scale)?;
    if m.family.is_univariate() && data.d() != 1 {
        return Err(Error::Data(format!(
            "{} needs one column, found {}",
            m.family,
            data.d()
        )));
    }
    Ok(data)
}

fn sample_all(m: &RunManifest, data: &Dataset) -> Vec<Result<PosteriorRun>> {
    m.gs()
        .par_iter()
        .map(|&g| {
            let spec = default_spec(data, g, m.family)?;
            run_chain(data, &spec, &m.chain_for(g))
        })
        .collect()
}

pub fn cmd_sample(m: &RunManifest) -> Result<i32> {
    let data = load_data(m)?;
    fs::create_dir_all(&m.out)?;
    let mut code = EXIT_OK;
    for (g, run) in m.gs().into_iter().zip(sample_all(m, &data)) {
        match run {
            Ok(run) => {
                let path = m.out.join(format!("run_G{g}.jsonl"));
                run.write_jsonl(std::io::BufWriter::new(fs::File::create(&path)?))?;
                log::info!("wrote {}", path.display());
            }
            Err(e) => {
                log::error!("G = {g}: {e}");
                code = code.max(exit_code(&e));
            }
        }
    }
    Ok(code)
}

pub fn cmd_estimate(m: &RunManifest) -> Result<i32> {
    let data = load_data(m)?;
    fs::create_dir_all(&m.out)?;
    let runs: Vec<Result<PosteriorRun>> = match &m.run {
        Some(p) => {
            let run = PosteriorRun::read_jsonl(std::io::BufReader::new(fs::File::open(p)?))?;
            run.validate(&data)?;
            if run.spec.g != m.g_range.0 || run.spec.family != m.family {
                return Err(Error::Config(format!(
                    "run file holds {} with G = {}, requested {} with G = {}",
                    run.spec.family, run.spec.g, m.family, m.g_range.0
                )));
            }
            vec![Ok(run)]
        }
        None => sample_all(m, &data),
    };
    let mut rows = Vec::new();
    let mut prev: Option<PreviousEstimate> = None;
    let mut code = EXIT_OK;
    for (g, run) in m.gs().into_iter().zip(runs) {
        let outcome = run.and_then(|run| {
            let (res, pipe) = estimate_with_pipeline(&run, &data, &m.thames, prev.as_ref())?;
            if m.json {
                fs::write(
                    m.out.join(format!("result_G{g}.json")),
                    serde_json::to_string_pretty(&res)? + "\n",
                )?;
            }
            if let Some(p) = &pipe {
                fs::write(
                    m.out.join(format!("orderings_G{g}.csv")),
                    orderings_csv(&p.omega),
                )?;
                p.relabelled
                    .write_perms_csv(std::io::BufWriter::new(fs::File::create(
                        m.out.join(format!("perms_G{g}.csv")),
                    )?))?;
                if m.dot {
                    fs::write(
                        m.out.join(format!("overlap_G{g}.dot")),
                        p.structure.overlap.to_dot(),
                    )?;
                    fs::write(
                        m.out.join(format!("delta_G{g}.dot")),
                        p.structure.delta.to_dot(),
                    )?;
                }
            }
            Ok((res, run.spec))
        });
        match outcome {
            Ok((res, spec)) => {
                rows.push(ResultRow::from_result(&res));
                prev = Some(PreviousEstimate {
                    spec,
                    log_z: res.log_z,
                    se_log_z: res.se_log_z,
                });
            }
            Err(e) => {
                log::error!("G = {g}: {e}");
                rows.push(ResultRow::failed(g, &e, "thames"));
                code = code.max(exit_code(&e));
                prev = None;
            }
        }
    }
    write_results_csv(&m.out.join("results.csv"), &rows)?;
    Ok(code)
}

/// Reference value for one `G`: exact enumeration for the fixed-variance
/// model, the well-separated approximation for the conjugate families.
pub fn oracle_row(
    data: &Dataset,
    family: Family,
    g: usize,
    chain: &ChainConfig,
) -> Result<ResultRow> {
    let (log_z, status, provenance) = match family {
        Family::UniFixedSigma => (
            exact_marglik_bruteforce(&data.column(0), g)?,
            "ok".to_string(),
            "oracle-bruteforce",
        ),
        Family::MvnFull | Family::MvnDiag => {
            let spec = default_spec(data, g, family)?;
            let run = run_chain(data, &spec, chain)?;
            let separated = check_separation(&run);
            if !separated {
                log::warn!(
                    "G = {g}: sampled allocations differ; the well-separated value is not reliable"
                );
            }
            let c0: AllocationMatrix = map_allocation(&run, data)?;
            let status = if separated {
                "ok"
            } else {
                "warning: allocations not separated"
            };
            (
                wellsep_marglik(data, &spec, &c0)?,
                status.to_string(),
                "oracle-wellsep",
            )
        }
        Family::UniHierarchical => {
            return Err(Error::Config(
                "no oracle exists for the hierarchical univariate model".into(),
            ));
        }
    };
    Ok(ResultRow {
        g,
        log_z: Some(log_z),
        se_log_z: None,
        co: None,
        i_size: None,
        omega_size: None,
        alpha: None,
        c_final: None,
        status,
        provenance: provenance.into(),
    })
}

pub fn cmd_oracle(m: &RunManifest) -> Result<i32> {
    let data = load_data(m)?;
    if m.family == Family::UniHierarchical {
        return Err(Error::Config(
            "no oracle exists for the hierarchical univariate model".into(),
        ));
    }
    fs::create_dir_all(&m.out)?;
    let mut rows = Vec::new();
    let mut code = EXIT_OK;
    for g in m.gs() {
        match oracle_row(&data, m.family, g, &m.chain_for(g)) {
            Ok(r) => rows.push(r),
            Err(e) => {
                log::error!("G = {g}: {e}");
                code = code.max(exit_code(&e));
                rows.push(ResultRow::failed(g, &e, "oracle"));
            }
        }
    }
    write_results_csv(&m.out.join("oracle.csv"), &rows)?;
    Ok(code)
}

#[derive(Serialize)]
struct Sidecar<'a> {
    scenario: Scenario,
    seed: u64,
    n: usize,
    d: usize,
    #[serde(rename = "G")]
    g: usize,
    rho: Option<f64>,
    means: &'a [Vec<f64>],
    weights: &'a [f64],
    sd: f64,
    labels: Vec<usize>,
    /// Exact `log p(Y)` under the fixed-variance model, keyed by fitted `G`.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    log_z_exact: Vec<(usize, f64)>,
    /// Well-separated `log p(Y)` at the generating allocation and `G`.
    #[serde(skip_serializing_if = "Option::is_none")]
    log_z_wellsep: Option<f64>,
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<i32> {
    let (sim, g, rho) = match a.scenario {
        Scenario::Toy => (
            simulate_toy(a.g, a.rho, a.n.unwrap_or(10), a.seed)?,
            a.g,
            Some(a.rho),
        ),
        Scenario::Setting1 => (
            simulate_separated(5, 6, a.n.unwrap_or(200), a.seed)?,
            5,
            None,
        ),
        Scenario::Setting2 => (
            simulate_separated(15, 5, a.n.unwrap_or(345), a.seed)?,
            15,
            None,
        ),
    };
    let mut sidecar = Sidecar {
        scenario: a.scenario,
        seed: a.seed,
        n: sim.data.n(),
        d: sim.data.d(),
        g,
        rho,
        means: &sim.means,
        weights: &sim.weights,
        sd: 1.0,
        labels: sim.labels.iter().map(|l| l + 1).collect(),
        log_z_exact: vec![],
        log_z_wellsep: None,
    };
    match a.scenario {
        Scenario::Toy => {
            for fit in 1..=3 {
                if let Ok(z) = exact_marglik_bruteforce(&sim.data.column(0), fit) {
                    sidecar.log_z_exact.push((fit, z));
                }
            }
        }
        Scenario::Setting1 | Scenario::Setting2 => {
            let family = if a.scenario == Scenario::Setting1 {
                Family::MvnFull
            } else {
                Family::MvnDiag
            };
            let spec = default_spec(&sim.data, g, family)?;
            let c0 = AllocationMatrix::new(g, sim.labels.clone())?;
            sidecar.log_z_wellsep = Some(wellsep_marglik(&sim.data, &spec, &c0)?);
        }
    }
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_dataset_csv(&a.out, &sim.data)?;
    let mut f = fs::File::create(a.out.with_extension("json"))?;
    writeln!(f, "{}", serde_json::to_string_pretty(&sidecar)?)?;
    Ok(EXIT_OK)
}

/// Parse arguments, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Sample(a) => RunManifest::resolve(a).and_then(|m| cmd_sample(&m)),
        Command::Estimate(a) => RunManifest::resolve(a).and_then(|m| cmd_estimate(&m)),
        Command::Oracle(a) => RunManifest::resolve(a).and_then(|m| cmd_oracle(&m)),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
