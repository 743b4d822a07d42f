use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use quasirand_core::inference::{infer, PlugIn, VarianceStatus};
use quasirand_core::simlab::{
    self, overlap_histogram, write_histogram_csv, write_replicates_csv, write_summary_csv, Overlap, ScenarioConfig,
    ScenarioId,
};
use quasirand_core::theory::{self, write_grid_csv};
use quasirand_core::verify::{run_verification, VerifyConfig};
use quasirand_core::{fit, io as qio, Error as CoreError, MethodKind, SolverConfig};

const SEED_ENV: &str = "QUASIRAND_SEED";

#[derive(Parser)]
#[command(name = "quasirand", version, about = "Participation-probability estimation for convenience samples")]
struct Cli {
    /// Worker threads for parallel work; defaults to the available parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo scenario and write summary, replicate and histogram CSVs.
    Simulate(SimulateArgs),
    /// Evaluate asymptotic standard errors on a grid of sampling fractions.
    Numstudy(NumstudyArgs),
    /// Estimate participation probabilities and the mean from CSV samples.
    Estimate(EstimateArgs),
    /// Check the closed-form covariance and analytic scores against brute force.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PlugInArg {
    Convenience,
    Reference,
}

impl From<PlugInArg> for PlugIn {
    fn from(p: PlugInArg) -> Self {
        match p {
            PlugInArg::Convenience => PlugIn::ConvenienceWeighted,
            PlugInArg::Reference => PlugIn::ReferenceWeighted,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OverlapArg {
    High,
    Low,
    Both,
}

#[derive(Args)]
struct SimulateArgs {
    /// S1..S7, or `custom` together with --n-pop, --beta-c0 and --f-r.
    #[arg(long)]
    scenario: String,
    #[arg(long, default_value = "high")]
    overlap: String,
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    /// Master seed; the QUASIRAND_SEED environment variable takes precedence.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also fit the two-step ALP estimator.
    #[arg(long)]
    alp: bool,
    #[arg(long, value_enum, default_value = "convenience")]
    plug_in: PlugInArg,
    #[arg(long, default_value_t = 30)]
    hist_bins: usize,
    #[arg(long)]
    n_pop: Option<usize>,
    #[arg(long)]
    beta_c0: Option<f64>,
    #[arg(long)]
    beta_c1: Option<f64>,
    #[arg(long)]
    f_r: Option<f64>,
}

#[derive(Args)]
struct NumstudyArgs {
    #[arg(long, default_value_t = theory::DEFAULT_GRID_N)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Comma-separated convenience fractions.
    #[arg(long, value_delimiter = ',')]
    f_c: Option<Vec<f64>>,
    /// Comma-separated reference fractions.
    #[arg(long, value_delimiter = ',')]
    f_r: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "both")]
    overlap: OverlapArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EstimateArgs {
    /// Convenience sample: `y`, covariates, optional `pi_r`.
    #[arg(long = "conv")]
    conv: PathBuf,
    /// Reference sample: covariates and `pi_r`.
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "ilr,pilr,clw")]
    methods: Vec<String>,
    #[arg(long, value_enum, default_value = "convenience")]
    plug_in: PlugInArg,
    #[arg(long, default_value_t = 0.0)]
    ridge: f64,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Largest population size enumerated by brute force (2..=6).
    #[arg(long, default_value_t = 4)]
    n_max: usize,
    #[arg(long, default_value_t = 100)]
    gradient_instances: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Relative error added to the closed-form covariance (negative control).
    #[arg(long, hide = true, default_value_t = 0.0)]
    perturb: f64,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: could not configure the thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Numstudy(a) => numstudy(a),
        Command::Estimate(a) => estimate(a),
        Command::Verify(a) => verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn resolve_seed(flag: u64) -> Result<u64, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| usage(anyhow!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(flag),
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn scenario_config(a: &SimulateArgs, seed: u64) -> Result<ScenarioConfig, Failure> {
    let id: ScenarioId = a.scenario.parse().map_err(usage)?;
    let overlap: Overlap = a.overlap.parse().map_err(usage)?;
    let mut config = if id == ScenarioId::Custom {
        let (Some(n_pop), Some(beta_c0), Some(f_r)) = (a.n_pop, a.beta_c0, a.f_r) else {
            return Err(usage(anyhow!("a custom scenario needs --n-pop, --beta-c0 and --f-r")));
        };
        let mut c = ScenarioConfig::tabled(ScenarioId::S1, overlap, seed).map_err(usage)?;
        c.id = ScenarioId::Custom;
        c.n_pop = n_pop;
        c.beta_c0 = beta_c0;
        c.f_r_target = f_r;
        c.reference_is_population = f_r >= 1.0;
        c
    } else {
        let mut c = ScenarioConfig::tabled(id, overlap, seed).map_err(usage)?;
        if let Some(n) = a.n_pop {
            c.n_pop = n;
        }
        if let Some(b) = a.beta_c0 {
            c.beta_c0 = b;
        }
        if let Some(f) = a.f_r {
            c.f_r_target = f;
        }
        c
    };
    if let Some(b) = a.beta_c1 {
        config.beta_c1 = b;
    }
    config.reps = a.reps;
    config.include_alp = a.alp;
    config.plug_in = a.plug_in.into();
    config.validate().map_err(usage)?;
    if a.hist_bins < 2 {
        return Err(usage(anyhow!("--hist-bins must be at least 2")));
    }
    Ok(config)
}

fn simulate(a: SimulateArgs) -> CmdResult {
    let seed = resolve_seed(a.seed)?;
    let config = scenario_config(&a, seed)?;
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;

    let pop = simlab::scenario_population(&config).map_err(anyhow::Error::from)?;
    let run = simlab::run_monte_carlo_on(&pop, &config).map_err(anyhow::Error::from)?;
    write_summary_csv(&run.summary, create(&a.out.join("summary.csv"))?).map_err(anyhow::Error::from)?;
    write_replicates_csv(&config, run.mu_true, &run.replicates, create(&a.out.join("replicates.csv"))?)
        .map_err(anyhow::Error::from)?;

    let (s_c, s_r) = simlab::draw_samples(&pop, &config, 0).map_err(anyhow::Error::from)?;
    let hist = overlap_histogram(&pop, &s_c, &s_r, a.hist_bins).map_err(anyhow::Error::from)?;
    write_histogram_csv(&hist, config.overlap.as_str(), create(&a.out.join("overlap_hist.csv"))?)
        .map_err(anyhow::Error::from)?;

    let stdout = io::stdout();
    let mut out = stdout.lock();
    writeln!(
        out,
        "{} {} overlap, {} replicates, population mean {:.4}",
        config.id, config.overlap, config.reps, run.mu_true
    )
    .context("writing to stdout")?;
    writeln!(out, "{:<6} {:<9} {:>8} {:>8} {:>8} {:>8} {:>8} {:>6}", "method", "param", "mean", "se", "se_hat", "cover", "rmse", "flags")
        .context("writing to stdout")?;
    for r in &run.summary {
        writeln!(
            out,
            "{:<6} {:<9} {:>8.4} {:>8.4} {:>8.4} {:>8.3} {:>8.4} {:>6}",
            r.method.as_str(),
            r.parameter.as_str(),
            r.mean,
            r.se,
            r.se_hat,
            r.coverage,
            r.rmse,
            r.n_nonconverged + r.n_inf_variance
        )
        .context("writing to stdout")?;
    }
    Ok(())
}

fn numstudy(a: NumstudyArgs) -> CmdResult {
    let seed = resolve_seed(a.seed)?;
    let f_c = a.f_c.unwrap_or_else(|| theory::DEFAULT_F_C.to_vec());
    let f_r = a.f_r.unwrap_or_else(|| theory::DEFAULT_F_R.to_vec());
    if f_c.is_empty() || f_c.iter().any(|&f| !(f > 0.0 && f < 1.0)) {
        return Err(usage(anyhow!("--f-c values must lie in (0,1)")));
    }
    if f_r.is_empty() || f_r.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
        return Err(usage(anyhow!("--f-r values must lie in (0,1]")));
    }
    if a.n < 10 {
        return Err(usage(anyhow!("--n must be at least 10")));
    }
    let overlaps: &[Overlap] = match a.overlap {
        OverlapArg::High => &[Overlap::High],
        OverlapArg::Low => &[Overlap::Low],
        OverlapArg::Both => &[Overlap::High, Overlap::Low],
    };
    let points = theory::numerical_study_for(seed, a.n, overlaps, &f_c, &f_r).map_err(anyhow::Error::from)?;
    write_grid_csv(&points, create(&a.out)?).map_err(anyhow::Error::from)?;
    eprintln!("wrote {} grid points to {}", points.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct Diagnostics {
    converged: bool,
    iterations: usize,
    score_norm: f64,
    loglik: f64,
    damped_steps: usize,
    variance_status: VarianceStatus,
    n_pi_c_above_one: usize,
    n_delta_saturated: usize,
}

#[derive(Serialize)]
struct MethodResult {
    method: MethodKind,
    mu_hat: f64,
    n_hat: f64,
    se: f64,
    ci: Option<[f64; 2]>,
    beta_hat: Vec<f64>,
    se_beta: Vec<f64>,
    diagnostics: Diagnostics,
}

#[derive(Serialize)]
struct EstimateOutput {
    schema: u32,
    n_conv: usize,
    n_ref: usize,
    covariates: Vec<String>,
    results: Vec<MethodResult>,
}

fn estimate(a: EstimateArgs) -> CmdResult {
    let methods = a
        .methods
        .iter()
        .map(|m| m.parse::<MethodKind>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(usage)?;
    if methods.is_empty() {
        return Err(usage(anyhow!("--methods must name at least one method")));
    }
    let solver = SolverConfig { ridge: a.ridge, max_iter: a.max_iter, ..SolverConfig::default() };
    solver.validate().map_err(usage)?;

    let input = |e: CoreError| match e {
        CoreError::Io(_) => Failure::Runtime(e.into()),
        other => usage(other),
    };
    let conv = File::open(&a.conv).with_context(|| format!("cannot open {}", a.conv.display()))?;
    let conv = qio::read_convenience(conv).map_err(input)?;
    let covariates = conv.covariates.clone();
    let reference = File::open(&a.reference).with_context(|| format!("cannot open {}", a.reference.display()))?;
    let reference = qio::read_reference(reference).map_err(input)?;
    let data = qio::combine(conv, reference).map_err(input)?;
    for &m in &methods {
        data.check_method(m).map_err(usage)?;
    }

    let mut results = Vec::with_capacity(methods.len());
    for &method in &methods {
        let f = fit(method, &data, &solver).with_context(|| format!("fitting {method}"))?;
        let r = infer(&data, &f, a.plug_in.into()).with_context(|| format!("inference for {method}"))?;
        results.push(MethodResult {
            method,
            mu_hat: r.mu_hat,
            n_hat: r.n_hat,
            se: r.se_mu,
            ci: r.ci.map(|(lo, hi)| [lo, hi]),
            beta_hat: f.beta_hat.as_slice().to_vec(),
            se_beta: (0..f.beta_hat.len()).map(|j| r.se_beta(j)).collect(),
            diagnostics: Diagnostics {
                converged: f.converged,
                iterations: f.iterations,
                score_norm: f.score_norm,
                loglik: f.loglik,
                damped_steps: f.damped_steps,
                variance_status: r.status,
                n_pi_c_above_one: f.n_pi_c_above_one,
                n_delta_saturated: f.n_delta_saturated,
            },
        });
        if f.n_pi_c_above_one > 0 {
            log::warn!("{method}: {} convenience rows have estimated pi_c above 1", f.n_pi_c_above_one);
        }
    }
    let output = EstimateOutput { schema: 1, n_conv: data.n_conv(), n_ref: data.n_ref(), covariates, results };
    let text = serde_json::to_string_pretty(&output).context("serializing results")?;
    match &a.out {
        Some(path) => {
            let mut w = create(path)?;
            writeln!(w, "{text}").context("writing results")?;
            w.flush().context("writing results")?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn verify(a: VerifyArgs) -> CmdResult {
    if !(2..=theory::BRUTE_FORCE_MAX_N).contains(&a.n_max) {
        return Err(usage(anyhow!("--n-max must lie in 2..={}", theory::BRUTE_FORCE_MAX_N)));
    }
    if a.gradient_instances == 0 {
        return Err(usage(anyhow!("--gradient-instances must be at least 1")));
    }
    let config = VerifyConfig {
        n_max: a.n_max,
        gradient_instances: a.gradient_instances,
        seed: resolve_seed(a.seed)?,
        perturbation: a.perturb,
    };
    let report = run_verification(&config).map_err(anyhow::Error::from)?;
    for c in &report.checks {
        println!(
            "{} {:<45} max error {:.3e} (tolerance {:.1e})",
            if c.passed { "ok  " } else { "FAIL" },
            c.name,
            c.max_error,
            c.tolerance
        );
    }
    if report.all_passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(Failure::Runtime(anyhow!("verification failed: {}", failed.join("; "))))
    }
}
