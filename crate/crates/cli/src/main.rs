//! `mdr-deepc` command-line driver: offline data collection, closed-loop runs,
//! metric comparison and plot-ready reports.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::LevelFilter;
use mdr_deepc::bench::{
    compare, offline_data, run_experiment, Disturbance, ExperimentConfig, MetricsReport, RunRecord,
};
use mdr_deepc::controllers::ControllerKind;
use mdr_deepc::trajkit::{build_hankel, numerical_rank, persistently_exciting};
use serde::{Deserialize, Serialize};

const SCHEMA_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "mdr-deepc", version, about = "MDR-DeePC benchmark on the three-mass chain")]
struct Cli {
    /// Log progress at info level.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Collect the offline excitation record and check persistency of excitation.
    Collect {
        #[command(flatten)]
        common: Common,
        /// Seed of the record (defaults to the first configured seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run closed-loop experiments.
    Run {
        #[command(flatten)]
        common: Common,
        /// Comma-separated controllers: deepc, mdr, oracle.
        #[arg(long, value_delimiter = ',', default_value = "mdr")]
        controller: Vec<String>,
        /// A single seed.
        #[arg(long, conflicts_with = "seeds")]
        seed: Option<u64>,
        /// Comma-separated seeds (defaults to the configured list).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Compare two metrics files; improvements are of NEW over BASE.
    Compare {
        base: PathBuf,
        new: PathBuf,
        /// Also write `comparison.json` into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge the run CSVs of a directory into one plot-ready CSV.
    Report {
        /// Directory holding `run_<controller>_<seed>.csv` files.
        run_dir: PathBuf,
        /// Config whose disturbance interval defines the mask column.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (defaults to the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config file; the built-in defaults are used without it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// On-disk configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    schema_version: u32,
    out_dir: PathBuf,
    experiment: ExperimentConfig,
}

impl Default for ConfigFile {
    fn default() -> Self {
        Self { schema_version: SCHEMA_VERSION, out_dir: PathBuf::from("out"), experiment: ExperimentConfig::default() }
    }
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Excitation(String),
    Solver(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Excitation(_) => 2,
            Failure::Solver(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Excitation(m) | Failure::Solver(m) => f.write_str(m),
        }
    }
}

impl From<mdr_deepc::Error> for Failure {
    fn from(e: mdr_deepc::Error) -> Self {
        match e {
            mdr_deepc::Error::ExcitationFailed { .. } => {
                Failure::Excitation(format!("persistency-of-excitation check failed: {e}"))
            }
            mdr_deepc::Error::Solver(_) => Failure::Solver(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl fmt::Display) -> Failure {
    Failure::Usage(format!("{}: {e}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile, Failure> {
    let Some(path) = path else { return Ok(ConfigFile::default()) };
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let cfg: ConfigFile = toml::from_str(&text).map_err(|e| io_err(path, e))?;
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(Failure::Usage(format!(
            "{}: schema_version {} is not supported (expected {SCHEMA_VERSION})",
            path.display(),
            cfg.schema_version
        )));
    }
    cfg.experiment.validate().map_err(|e| io_err(path, e))?;
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &ConfigFile) -> Result<PathBuf, Failure> {
    let dir = common.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

#[derive(Serialize)]
struct PeReport {
    seed: u64,
    seed_used: u64,
    samples: usize,
    order: usize,
    rank: usize,
    required_rank: usize,
    persistently_exciting: bool,
}

fn cmd_collect(common: &Common, seed: Option<u64>) -> Result<(), Failure> {
    let cfg = load_config(common.config.as_deref())?;
    let exp = &cfg.experiment;
    let seed = seed.or_else(|| exp.seeds.first().copied()).unwrap_or(0);
    let dir = out_dir(common, &cfg)?;
    let kind = ControllerKind::Mdr;
    let (_, data) = offline_data(exp, kind, seed)?;
    let order = exp.pe_order(kind);
    let rank = numerical_rank(&build_hankel(&data.u_d, order)?.data);
    let report = PeReport {
        seed,
        seed_used: data.seed_used,
        samples: data.u_d.len(),
        order,
        rank,
        required_rank: data.u_d.dim() * order,
        persistently_exciting: persistently_exciting(&data.u_d, order)?,
    };
    for (name, sig) in [("u_d.csv", &data.u_d), ("y_u_d.csv", &data.y_u_d)] {
        let path = dir.join(name);
        let file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        sig.write_csv(std::io::BufWriter::new(file))?;
    }
    write_json(&dir.join("pe_report.json"), &report)?;
    println!("collected {} samples (seed {seed}); input PE of order {order}: rank {rank}", report.samples);
    Ok(())
}

fn cmd_run(common: &Common, controllers: &[String], seed: Option<u64>, seeds: Option<Vec<u64>>) -> Result<(), Failure> {
    let kinds: Vec<ControllerKind> = controllers
        .iter()
        .map(|s| {
            s.parse::<ControllerKind>()
                .map_err(|_| Failure::Usage(format!("unknown controller '{s}' (expected deepc, mdr or oracle)")))
        })
        .collect::<Result<_, _>>()?;
    let cfg = load_config(common.config.as_deref())?;
    let seeds = match (seed, seeds) {
        (Some(s), _) => vec![s],
        (None, Some(list)) => list,
        (None, None) => cfg.experiment.seeds.clone(),
    };
    if seeds.is_empty() {
        return Err(Failure::Usage("no seeds to run".into()));
    }
    let dir = out_dir(common, &cfg)?;
    let dir = dir.as_path();
    let exp = &cfg.experiment;
    let jobs: Vec<(ControllerKind, u64)> = kinds.iter().flat_map(|&k| seeds.iter().map(move |&s| (k, s))).collect();
    let results: Vec<_> = std::thread::scope(|scope| {
        let handles: Vec<_> =
            jobs.iter().map(|&(kind, seed)| scope.spawn(move || run_one(exp, kind, seed, dir))).collect();
        handles.into_iter().map(|h| h.join().expect("run thread panicked")).collect()
    });
    // Every failure is reported; the most severe one sets the exit code.
    let mut failures: Vec<Failure> = results.into_iter().filter_map(|r| r.err()).collect();
    failures.sort_by_key(Failure::code);
    let worst = failures.pop();
    for f in &failures {
        eprintln!("error: {f}");
    }
    worst.map_or(Ok(()), Err)
}

fn run_one(exp: &ExperimentConfig, kind: ControllerKind, seed: u64, dir: &Path) -> Result<(), Failure> {
    let rec = run_experiment(exp, kind, seed)?;
    let c = exp.controller(kind);
    let metrics = MetricsReport::compute(&rec, &c.q_matrix()?, &c.r_matrix()?);
    let path = dir.join(format!("run_{kind}_{seed}.csv"));
    let file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    rec.write_csv(std::io::BufWriter::new(file))?;
    write_json(&dir.join(format!("metrics_{kind}_{seed}.json")), &metrics)?;
    println!(
        "{kind} seed {seed}: total cost {:.4}, max deviation {:.4}, settling {} steps, peak-to-peak {:.4}",
        metrics.total_cost, metrics.max_output_deviation, metrics.settling_time_steps, metrics.peak_to_peak
    );
    let rate = rec.failure_rate();
    if rate > 0.5 {
        return Err(Failure::Solver(format!("{kind} seed {seed}: {} of {} solves failed", rec.fallbacks, rec.solves)));
    }
    Ok(())
}

fn read_metrics(path: &Path) -> Result<MetricsReport, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

fn cmd_compare(base: &Path, new: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let cmp = compare(&read_metrics(base)?, &read_metrics(new)?);
    let text = serde_json::to_string_pretty(&cmp).map_err(|e| Failure::Usage(e.to_string()))?;
    println!("{text}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write_json(&dir.join("comparison.json"), &cmp)?;
    }
    Ok(())
}

/// `run_<controller>_<seed>.csv` file names, parsed.
fn parse_run_name(name: &str) -> Option<(ControllerKind, u64)> {
    let stem = name.strip_prefix("run_")?.strip_suffix(".csv")?;
    let (c, s) = stem.rsplit_once('_')?;
    Some((c.parse().ok()?, s.parse().ok()?))
}

fn cmd_report(run_dir: &Path, config: Option<&Path>, out: Option<&Path>) -> Result<(), Failure> {
    let disturbance: Disturbance = load_config(config)?.experiment.disturbance;
    let entries = fs::read_dir(run_dir).map_err(|e| io_err(run_dir, e))?;
    let mut runs: BTreeMap<(ControllerKind, u64), RunRecord> = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|e| io_err(run_dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some((kind, seed)) = parse_run_name(&name) {
            let path = entry.path();
            let file = fs::File::open(&path).map_err(|e| io_err(&path, e))?;
            let rec = RunRecord::read_csv(file, kind, seed, &disturbance).map_err(|e| io_err(&path, e))?;
            runs.insert((kind, seed), rec);
        }
    }
    if runs.is_empty() {
        return Err(Failure::Usage(format!("{}: no run files found", run_dir.display())));
    }
    let len = runs.values().map(RunRecord::len).max().unwrap_or(0);
    let mut head = vec!["step".to_string(), "disturbance".to_string()];
    for ((kind, seed), rec) in &runs {
        let suffix = format!("{kind}_{seed}");
        for (pre, dim) in [("u", rec.u.dim()), ("y", rec.y.dim()), ("r", rec.r.dim())] {
            head.extend((0..dim).map(|c| format!("{pre}{c}_{suffix}")));
        }
        head.push(format!("stage_cost_{suffix}"));
    }
    let mut text = head.join(",") + "\n";
    for k in 0..len {
        let mut row = vec![k.to_string(), u8::from(disturbance.active(k)).to_string()];
        for rec in runs.values() {
            if k < rec.len() {
                let vals = rec.u.get(k).iter().chain(rec.y.get(k).iter()).chain(rec.r.get(k).iter());
                row.extend(vals.map(|v| v.to_string()));
                row.push(rec.stage_cost[k].to_string());
            } else {
                row.extend(std::iter::repeat(String::new()).take(rec.u.dim() + rec.y.dim() + rec.r.dim() + 1));
            }
        }
        text += &(row.join(",") + "\n");
    }
    let dir = out.unwrap_or(run_dir);
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join("report.csv");
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    println!("merged {} runs into {}", runs.len(), path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose { LevelFilter::Info } else { LevelFilter::Warn })
        .format_timestamp(None)
        .init();
    let result = match &cli.command {
        Command::Collect { common, seed } => cmd_collect(common, *seed),
        Command::Run { common, controller, seed, seeds } => cmd_run(common, controller, *seed, seeds.clone()),
        Command::Compare { base, new, out } => cmd_compare(base, new, out.as_deref()),
        Command::Report { run_dir, config, out } => cmd_report(run_dir, config.as_deref(), out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            if let Failure::Usage(_) = f {
                eprintln!("run `mdr-deepc --help` for usage");
            }
            ExitCode::from(f.code())
        }
    }
}
