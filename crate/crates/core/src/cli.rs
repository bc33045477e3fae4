//! Command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::adjusted::{Method, TmleMode};
use crate::config::RunConfig;
use crate::data::{load_dataset, validate, StatusReason};
use crate::error::{Error, Result};
use crate::pipeline::{estimate, Estimand};
use crate::report::{write_estimate_outputs, write_sim_outputs, ResultsDocument};
use crate::sim::{run_study_with, MeanKind, NuisanceSource, SimMethod};

#[derive(Debug, Parser)]
#[command(name = "folddiff", version, about = "Covariate-adjusted log fold-differences for multi-category nonnegative outcomes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate fold-differences on a dataset.
    Estimate(EstimateArgs),
    /// Run a simulation study with known truth.
    Simulate(SimulateArgs),
    /// Report per-category estimability of a dataset.
    Validate(ValidateArgs),
}

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    /// Outcome table: sample id column followed by one column per category.
    #[arg(long)]
    pub counts: Option<PathBuf>,
    /// Metadata table with the exposure and covariates.
    #[arg(long)]
    pub meta: Option<PathBuf>,
    /// Binary (0/1) exposure column of the metadata table.
    #[arg(long)]
    pub exposure: Option<String>,
    /// Comma-separated covariate columns.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    /// Sample id column of the metadata table (default: first column).
    #[arg(long)]
    pub sample_id: Option<String>,
    #[arg(long)]
    pub delimiter: Option<char>,
}

#[derive(Debug, Args, Default)]
pub struct EstimatorArgs {
    #[arg(long)]
    pub tmle_mode: Option<String>,
    /// Outer cross-fitting folds.
    #[arg(long)]
    pub k: Option<usize>,
    /// Inner folds of the ensemble learner.
    #[arg(long)]
    pub v: Option<usize>,
    /// Gaussian draws for the simultaneous critical value.
    #[arg(long)]
    pub b: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// TOML configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// psi1, psi1g, psi2 or psi2g.
    #[arg(long)]
    pub estimand: Option<String>,
    /// none, mean, ref:<category> or smedian:<eps>.
    #[arg(long)]
    pub center: Option<String>,
    /// tmle, onestep or plugin.
    #[arg(long)]
    pub method: Option<String>,
    #[command(flatten)]
    pub estimator: EstimatorArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// gamma_A or gamma_B.
    #[arg(long)]
    pub mean: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub j: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// 51 categories and 500 replicates unless overridden.
    #[arg(long)]
    pub full_scale: bool,
    /// Share the sparsity and efficiency permutations across replicates.
    #[arg(long)]
    pub fix_permutations: bool,
    /// Comma-separated subset of psi1_plugin, psi2_tmle, psi2_onestep.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Estimand the study is scored against.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub center: Option<String>,
    /// Use the true nuisance functions instead of learned ones.
    #[arg(long)]
    pub oracle_nuisances: bool,
    #[command(flatten)]
    pub estimator: EstimatorArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    path.as_deref().map(RunConfig::load).transpose().map(Option::unwrap_or_default)
}

fn apply_data(cfg: &mut RunConfig, a: &DataArgs) {
    let d = &mut cfg.data;
    if a.counts.is_some() {
        d.counts.clone_from(&a.counts);
    }
    if a.meta.is_some() {
        d.meta.clone_from(&a.meta);
    }
    if a.exposure.is_some() {
        d.exposure.clone_from(&a.exposure);
    }
    if let Some(c) = &a.covariates {
        d.covariates = c.iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    }
    if a.sample_id.is_some() {
        d.sample_id.clone_from(&a.sample_id);
    }
    if a.delimiter.is_some() {
        d.delimiter = a.delimiter;
    }
}

fn apply_estimator(cfg: &mut RunConfig, a: &EstimatorArgs) -> Result<()> {
    let e = &mut cfg.estimate;
    if let Some(m) = &a.tmle_mode {
        e.tmle_mode = m.parse::<TmleMode>()?;
    }
    e.k = a.k.unwrap_or(e.k);
    e.v = a.v.unwrap_or(e.v);
    e.b = a.b.unwrap_or(e.b);
    e.alpha = a.alpha.unwrap_or(e.alpha);
    Ok(())
}

fn set_threads(n: Option<usize>) -> Result<()> {
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::config("--threads must be positive"));
        }
        // a pool may already exist when the library is driven in-process
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::warn!("thread pool already initialized; --threads ignored");
        }
    }
    Ok(())
}

/// Resolved configuration of an `estimate` invocation.
pub fn estimate_config(a: &EstimateArgs) -> Result<RunConfig> {
    let mut cfg = load_config(&a.config)?;
    apply_data(&mut cfg, &a.data);
    apply_estimator(&mut cfg, &a.estimator)?;
    let e = &mut cfg.estimate;
    if let Some(s) = &a.estimand {
        e.estimand = s.parse::<Estimand>()?;
    }
    if let Some(m) = &a.method {
        e.method = Some(m.parse::<Method>()?);
    }
    if a.center.is_some() {
        e.center.clone_from(&a.center);
    }
    e.seed = a.seed.unwrap_or(e.seed);
    if a.out.is_some() {
        cfg.output.out.clone_from(&a.out);
    }
    cfg.output.threads = a.threads.or(cfg.output.threads);
    Ok(cfg)
}

pub fn simulate_config(a: &SimulateArgs) -> Result<RunConfig> {
    let mut cfg = load_config(&a.config)?;
    apply_estimator(&mut cfg, &a.estimator)?;
    let s = &mut cfg.simulate;
    if let Some(m) = &a.mean {
        s.mean = m.parse::<MeanKind>()?;
    }
    s.n = a.n.or(s.n);
    s.j = a.j.or(s.j);
    s.reps = a.reps.or(s.reps);
    s.seed = a.seed.unwrap_or(s.seed);
    s.full_scale |= a.full_scale;
    s.fix_permutations |= a.fix_permutations;
    if let Some(ms) = &a.methods {
        s.methods = ms.iter().map(|m| m.parse::<SimMethod>()).collect::<Result<_>>()?;
    }
    if let Some(t) = &a.target {
        s.target = t.parse::<Estimand>()?;
    }
    if a.center.is_some() {
        s.center.clone_from(&a.center);
    }
    if a.oracle_nuisances {
        s.nuisances = NuisanceSource::Oracle;
    }
    if a.out.is_some() {
        cfg.output.out.clone_from(&a.out);
    }
    cfg.output.threads = a.threads.or(cfg.output.threads);
    Ok(cfg)
}

fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "NA".into()
    }
}

fn run_estimate(a: &EstimateArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = estimate_config(a)?;
    set_threads(cfg.output.threads)?;
    let (counts, meta) = cfg.data.paths()?;
    let d = load_dataset(counts, meta, &cfg.data.schema()?)?;
    let opts = cfg.estimate.options(&cfg.learners, d.category_names())?;
    log::info!("estimating {} on {} samples and {} categories", opts.estimand, d.n(), d.n_categories());
    let res = estimate(&d, &opts)?;
    let doc = ResultsDocument::from_result(&res);
    writeln!(out, "category\testimate\tse\tci_lower\tci_upper\tsim_lower\tsim_upper\tp_value\tflags")?;
    for r in &doc.rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.category,
            fmt_num(r.estimate),
            fmt_num(r.se),
            fmt_num(r.ci_lower),
            fmt_num(r.ci_upper),
            fmt_num(r.sim_lower),
            fmt_num(r.sim_upper),
            if r.p_value.is_finite() { format!("{:.3e}", r.p_value) } else { "NA".into() },
            r.flags
        )?;
    }
    if let Some(dir) = &cfg.output.out {
        let files = write_estimate_outputs(dir, &res, &cfg)?;
        writeln!(out, "wrote {}", files.results_csv.display())?;
    }
    Ok(())
}

fn run_simulate(a: &SimulateArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = simulate_config(a)?;
    set_threads(cfg.output.threads)?;
    let sc = cfg.simulate.sim_config(&cfg.estimate, &cfg.learners)?;
    let g = cfg.simulate.centering(sc.j)?;
    log::info!("simulating {} replicates of n={} J={} ({})", sc.replicates, sc.n, sc.j, sc.mean_kind);
    let rep = run_study_with(&sc, &cfg.simulate.methods, cfg.simulate.target, &g, cfg.simulate.nuisances)?;
    writeln!(out, "method\tj\ttruth\tbias\tmse\tcoverage\tsim_coverage\twidth")?;
    for m in &rep.methods {
        for c in &m.categories {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                m.method,
                c.j,
                fmt_num(c.truth),
                fmt_num(c.bias),
                fmt_num(c.mse),
                fmt_num(c.coverage_marginal),
                fmt_num(c.coverage_simultaneous),
                fmt_num(c.width_marginal)
            )?;
        }
    }
    writeln!(out, "total {:.1}s, {:.2}s per replicate", rep.runtime.total_seconds, rep.runtime.mean_replicate_seconds)?;
    match &cfg.output.out {
        Some(dir) => {
            write_sim_outputs(dir, &rep, &cfg)?;
            writeln!(out, "wrote {}", dir.display())?;
        }
        None => log::warn!("no --out given; simulation tables not written"),
    }
    Ok(())
}

fn run_validate(a: &ValidateArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    apply_data(&mut cfg, &a.data);
    let (counts, meta) = cfg.data.paths()?;
    let d = load_dataset(counts, meta, &cfg.data.schema()?)?;
    let a_vec = d.exposure();
    let n1 = d.n_exposed();
    writeln!(out, "samples\t{}\texposed\t{}\tunexposed\t{}", d.n(), n1, d.n() - n1)?;
    writeln!(out, "category\tstatus\tzeros_arm0\tzeros_arm1")?;
    let mut flagged = 0;
    for s in validate(&d) {
        let col = d.outcome_column(s.category_index);
        let mut zeros = [0usize; 2];
        for (w, &ai) in col.iter().zip(a_vec) {
            if *w == 0.0 {
                zeros[usize::from(ai)] += 1;
            }
        }
        let status = match s.reason {
            StatusReason::Ok => "ok",
            StatusReason::AllZeroInArm0 => "all_zero_in_arm0",
            StatusReason::AllZeroInArm1 => "all_zero_in_arm1",
            StatusReason::AllZero => "all_zero",
        };
        flagged += usize::from(!s.estimable);
        writeln!(out, "{}\t{}\t{}\t{}", d.category_names()[s.category_index], status, zeros[0], zeros[1])?;
    }
    writeln!(out, "{flagged} of {} categories flagged", d.n_categories())?;
    Ok(())
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if e.use_stderr() { write!(err, "{e}") } else { write!(out, "{e}") };
            return code;
        }
    };
    let result = match &cli.command {
        Command::Estimate(a) => run_estimate(a, out),
        Command::Simulate(a) => run_simulate(a, out),
        Command::Validate(a) => run_validate(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
