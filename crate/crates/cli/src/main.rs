use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use mdiqkd_core::channel::{sample_observed_counts, ObservedCounts};
use mdiqkd_core::estimator::{ScanMode, ScanSettings};
use mdiqkd_core::experiment::{self, fmt_f64, CurveRow, ExperimentSpec};
use mdiqkd_core::{Error, KeyRateReport};

/// Finite-key MDI-QKD key rates: simulation, estimation and optimisation.
#[derive(Parser, Debug)]
#[command(name = "mdiqkd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// Optimizer seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Scan grid size used for both H and M.
    #[arg(long, global = true)]
    grid: Option<usize>,
    /// Scan mode, overriding the config: single or double.
    #[arg(long, global = true)]
    mode: Option<ScanMode>,
    /// Output file (default: standard output).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Write JSON instead of CSV.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Expected counts for the fixed sources at every sweep distance.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Draw Poisson counts around the expectations (uses --seed).
        #[arg(long)]
        poisson: bool,
    },
    /// Key rate of measured counts; the channel model is bypassed.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        counts: PathBuf,
    },
    /// Optimised parameters and report at the first sweep distance.
    Optimize {
        #[arg(long)]
        config: PathBuf,
    },
    /// One optimised row per sweep distance.
    Curve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Paired sweep of `variant` and `compare` with rate ratios.
    Compare {
        #[arg(long)]
        config: PathBuf,
    },
}

enum Failure {
    Config(String),
    NoKey,
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Domain { .. } | Error::InvalidFailureProb(_) | Error::InvalidCounts(_) | Error::Budget(_) => {
                Failure::Config(e.to_string())
            }
            other => Failure::Other(other.to_string()),
        }
    }
}

fn load_spec(path: &Path, common: &Common) -> Result<ExperimentSpec, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let mut spec: ExperimentSpec =
        toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    if let Some(seed) = common.seed {
        spec.optimizer.seed = seed;
    }
    if let Some(g) = common.grid {
        spec.scan = ScanSettings { grid_h: g, grid_m: g, ..spec.scan };
    }
    if let Some(m) = common.mode {
        spec.variant.scan = m;
    }
    spec.validate()?;
    Ok(spec)
}

fn emit(common: &Common, body: &str) -> Result<(), Failure> {
    match &common.out {
        Some(p) => fs::write(p, body).map_err(|e| Failure::Other(format!("{}: {e}", p.display()))),
        None => io::stdout().write_all(body.as_bytes()).map_err(|e| Failure::Other(e.to_string())),
    }
}

fn json<T: serde::Serialize>(v: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(|e| Failure::Other(e.to_string()))
}

fn read_counts(path: &Path) -> Result<Vec<ObservedCounts>, Failure> {
    let cfg_err = |msg: String| Failure::Config(format!("{}: {msg}", path.display()));
    let mut rdr = csv::Reader::from_path(path).map_err(|e| cfg_err(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| cfg_err(e.to_string()))?.clone();
    let mut idx = [0usize; 12];
    let mut missing = Vec::new();
    for (slot, name) in idx.iter_mut().zip(ObservedCounts::FIELDS) {
        match headers.iter().position(|h| h.trim() == name) {
            Some(i) => *slot = i,
            None => missing.push(name),
        }
    }
    if !missing.is_empty() {
        return Err(cfg_err(format!("missing columns {}", missing.join(", "))));
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| cfg_err(e.to_string()))?;
        let mut v = [0.0; 12];
        for (k, (&i, name)) in idx.iter().zip(ObservedCounts::FIELDS).enumerate() {
            let field = rec.get(i).unwrap_or("").trim();
            v[k] = field
                .parse()
                .map_err(|_| cfg_err(format!("row {}: {name} = `{field}` is not a number", line + 1)))?;
        }
        let counts = ObservedCounts::from_values(v);
        counts
            .validate()
            .map_err(|e| cfg_err(format!("row {}: {e}", line + 1)))?;
        out.push(counts);
    }
    Ok(out)
}

fn counts_csv(rows: &[((f64, f64, f64), ObservedCounts)]) -> String {
    let mut s = format!("L_km,L_A_km,L_B_km,{}\n", ObservedCounts::FIELDS.join(","));
    for ((l, la, lb), c) in rows {
        let vals: Vec<String> = c.values().iter().map(|v| fmt_f64(*v)).collect();
        s += &format!("{},{},{},{}\n", fmt_f64(*l), fmt_f64(*la), fmt_f64(*lb), vals.join(","));
    }
    s
}

fn report_csv(reports: &[KeyRateReport]) -> String {
    let mut s = String::from("row,mode,status,rate,s11z_L,e11ph_U,H_star,M_star,margin,eps_total,S_zz,E_zz\n");
    for (i, r) in reports.iter().enumerate() {
        let vals = [r.rate_per_pulse, r.s11z_lower, r.e11ph_upper, r.worst_h, r.worst_m, r.margin, r.eps_total, r.s_zz, r.e_zz]
            .map(fmt_f64)
            .join(",");
        let status = if r.no_key { "no_key" } else { "ok" };
        s += &format!("{},{},{},{}\n", i, r.mode.label(), status, vals);
    }
    s
}

fn all_dry(rows: &[CurveRow]) -> bool {
    rows.iter().all(|r| r.rate() <= 0.0)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let common = &cli.common;
    match &cli.command {
        Command::Simulate { config, poisson } => {
            let spec = load_spec(config, common)?;
            let mut rows = spec.simulate()?;
            if *poisson {
                let seed = common.seed.unwrap_or(spec.optimizer.seed);
                for (i, (_, c)) in rows.iter_mut().enumerate() {
                    *c = sample_observed_counts(c, seed.wrapping_add(i as u64));
                }
            }
            let body = if common.json { json(&rows.iter().map(|r| r.1).collect::<Vec<_>>())? } else { counts_csv(&rows) };
            emit(common, &body)
        }
        Command::Estimate { config, counts } => {
            let spec = load_spec(config, common)?;
            let sources = spec
                .sources
                .ok_or_else(|| Failure::Config("estimation needs [sources.alice] in the config".into()))?;
            let cfg = sources.config(spec.pulses)?;
            let mode = spec.variant.scan;
            let budget = spec.resolved_budget(mode)?;
            let mut reports = Vec::new();
            for c in read_counts(counts)? {
                reports.push(experiment::run_estimate(&c, &cfg, &budget, mode, &spec.scan, spec.channel.f_ec)?);
            }
            let body = if common.json { json(&reports)? } else { report_csv(&reports) };
            emit(common, &body)?;
            if reports.iter().all(|r| r.no_key) {
                return Err(Failure::NoKey);
            }
            Ok(())
        }
        Command::Optimize { config } => {
            let spec = load_spec(config, common)?;
            let (_, la, lb) = spec.sweep.points()?[0];
            let row = experiment::run_point(&spec, spec.variant, la, lb)?;
            let body = if common.json { json(&row)? } else { experiment::curve_csv(&[row]) };
            emit(common, &body)?;
            if row.rate() <= 0.0 {
                return Err(Failure::NoKey);
            }
            Ok(())
        }
        Command::Curve { config } => {
            let spec = load_spec(config, common)?;
            let rows = experiment::run_curve(&spec)?;
            let body = if common.json { json(&rows)? } else { experiment::curve_csv(&rows) };
            emit(common, &body)?;
            if all_dry(&rows) {
                return Err(Failure::NoKey);
            }
            Ok(())
        }
        Command::Compare { config } => {
            let spec = load_spec(config, common)?;
            let rows = experiment::run_compare(&spec)?;
            let body = if common.json { json(&rows)? } else { experiment::compare_csv(&rows) };
            emit(common, &body)?;
            let bases: Vec<CurveRow> = rows.iter().map(|r| r.base).collect();
            let others: Vec<CurveRow> = rows.iter().map(|r| r.other).collect();
            if all_dry(&bases) && all_dry(&others) {
                return Err(Failure::NoKey);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    if let Some(n) = cli.common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let t = Instant::now();
    let result = run(&cli);
    log::info!("finished in {:.2?}", t.elapsed());
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::NoKey) => {
            eprintln!("no key at any point");
            ExitCode::from(3)
        }
        Err(Failure::Other(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
