//! `conjulab` command-line driver.
//!
//! Exit codes: 0 success, 1 failed validation or numeric failure, 2 config
//! error, 3 I/O error. Failures also print one JSON line on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use conjulab::config::{defaults_reference, parse_config, to_toml_string};
use conjulab::experiments::{run_bound_tracking, run_bounds_report, run_spectrum_sweep, summarize, ExperimentPlan};
use conjulab::output::{
    bounds_tables, charts_for, config_hash12, emit_csv, emit_svg, key_value_table, read_csv, spectrum_table,
    trace_table, OutputEntry, RunManifest, Table,
};
use conjulab::validate::quick_suite;
use conjulab::Error;

#[derive(Parser)]
#[command(
    name = "conjulab",
    version,
    about = "Conjugate-learning experiments on tiny networks"
)]
struct Cli {
    /// Output root; each run writes to `<out>/<run_id>/`.
    #[arg(long, global = true, env = "CONJULAB_OUT", default_value = "out")]
    out: PathBuf,
    /// Override the config's run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's logging interval.
    #[arg(long, global = true)]
    log_every: Option<usize>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with bound tracking.
    Run { config: PathBuf },
    /// Structure-matrix spectra at init over a depth/width/skip grid.
    Sweep { config: PathBuf },
    /// Fitting, convergence and generalization bound report.
    Bounds { config: PathBuf },
    /// Randomized invariant suite; nonzero exit on any violation.
    Validate,
    /// Regenerate charts from a run's stored CSVs.
    Report { run_id: String },
    /// Print every optional config key with its default.
    #[command(hide = true)]
    Defaults,
}

enum Failure {
    Core(Error),
    /// The config file itself could not be read; reported as a config error.
    ConfigUnreadable(Error),
    Violations(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(e) => match e.category() {
                "config" => 2,
                "io" => 3,
                _ => 1,
            },
            Failure::ConfigUnreadable(_) => 2,
            Failure::Violations(_) => 1,
        }
    }

    fn json(&self) -> serde_json::Value {
        match self {
            Failure::Core(Error::Validation { field, message }) => serde_json::json!({
                "error": "config", "field": field, "message": message,
            }),
            Failure::Core(Error::Parse { line, column, message }) => serde_json::json!({
                "error": "config", "line": line, "column": column, "message": message,
            }),
            Failure::Core(e) => serde_json::json!({ "error": e.category(), "message": e.to_string() }),
            Failure::ConfigUnreadable(e) => serde_json::json!({ "error": "config", "message": e.to_string() }),
            Failure::Violations(n) => serde_json::json!({
                "error": "validation", "message": format!("{n} invariant checks failed"),
            }),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        // only fails if a pool already exists, which cannot happen this early
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.json());
            ExitCode::from(f.exit_code())
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Run { config } => experiment(cli, config, Kind::Run),
        Command::Sweep { config } => experiment(cli, config, Kind::Sweep),
        Command::Bounds { config } => experiment(cli, config, Kind::Bounds),
        Command::Validate => {
            let results = quick_suite(cli.seed.unwrap_or(0))?;
            for r in &results {
                println!("{}", r.line());
            }
            match results.iter().filter(|r| !r.passed()).count() {
                0 => Ok(()),
                n => Err(Failure::Violations(n)),
            }
        }
        Command::Report { run_id } => report(&cli.out, run_id),
        Command::Defaults => {
            print!("{}", defaults_reference());
            Ok(())
        }
    }
}

#[derive(Clone, Copy)]
enum Kind {
    Run,
    Sweep,
    Bounds,
}

fn load_plan(cli: &Cli, config: &Path) -> Result<ExperimentPlan, Failure> {
    let mut plan = parse_config(config).map_err(|e| match e {
        Error::Io { .. } => Failure::ConfigUnreadable(e),
        e => Failure::Core(e),
    })?;
    if let Some(s) = cli.seed {
        plan.seed = s;
    }
    if let Some(k) = cli.log_every {
        plan.log_every = k;
    }
    plan.validate()?;
    Ok(plan)
}

/// Creates `<out>/<timestamp>-<hash>`; a numeric suffix avoids collisions
/// within the same second.
fn create_run_dir(out: &Path, hash: &str) -> Result<(String, PathBuf), Error> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    for n in 1.. {
        let id = if n == 1 {
            format!("{stamp}-{hash}")
        } else {
            format!("{stamp}-{hash}-{n}")
        };
        let dir = out.join(&id);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok((id, dir)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_err(&dir, e)),
        }
    }
    unreachable!()
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.into(),
        source,
    }
}

fn experiment(cli: &Cli, config: &Path, kind: Kind) -> Result<(), Failure> {
    let plan = load_plan(cli, config)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let data = plan.dataset.load(base)?;
    plan.validate_with(&data)?;

    let mut tables: Vec<(String, Table)> = Vec::new();
    let mut failures = 0;
    match kind {
        Kind::Run => {
            let tracking = run_bound_tracking(&plan, &data)?;
            let s = summarize(&tracking.rows)?;
            let pass = s.pearson_pass(&plan.thresholds);
            println!(
                "rows: {} (sample rows {}), degenerate {}",
                s.rows, s.sample_rows, s.degenerate_rows
            );
            println!(
                "violations: log sandwich {}, risk sandwich {}, fitting {}",
                s.log_sandwich_violations, s.risk_sandwich_violations, s.fitting_violations
            );
            println!(
                "pearson: terminal std/ub {:?}, final-half risk/std {:?} ({})",
                s.terminal_pearson_std_ub,
                s.final_half_pearson_risk_std,
                if pass { "meets thresholds" } else { "below thresholds" }
            );
            failures = s.log_sandwich_violations + s.risk_sandwich_violations + s.fitting_violations;
            let summary = [
                ("rows", Some(s.rows as f64)),
                ("sample_rows", Some(s.sample_rows as f64)),
                ("degenerate_rows", Some(s.degenerate_rows as f64)),
                ("log_sandwich_violations", Some(s.log_sandwich_violations as f64)),
                ("risk_sandwich_violations", Some(s.risk_sandwich_violations as f64)),
                ("fitting_violations", Some(s.fitting_violations as f64)),
                ("terminal_pearson_std_ub", s.terminal_pearson_std_ub),
                ("final_half_pearson_risk_std", s.final_half_pearson_risk_std),
            ]
            .map(|(k, v)| (k.to_string(), v));
            tables.push(("trace".into(), trace_table(&tracking.rows)));
            tables.push(("summary".into(), key_value_table(&summary)));
        }
        Kind::Sweep => {
            let rows = run_spectrum_sweep(&plan, &data)?;
            println!("cells: {}", rows.len());
            tables.push(("spectrum".into(), spectrum_table(&rows)));
        }
        Kind::Bounds => {
            let b = run_bounds_report(&plan, &data)?;
            for (k, v) in &b.summary {
                println!("{k}: {}", v.map_or("NA".to_string(), |v| format!("{v:.6e}")));
            }
            tables.extend(bounds_tables(&b)?);
        }
    }

    let snapshot = to_toml_string(&plan)?;
    let (run_id, dir) = create_run_dir(&cli.out, &config_hash12(&snapshot))?;
    let mut outputs = Vec::new();
    let snap_path = dir.join("config.toml");
    conjulab::output::atomic_write(&snap_path, snapshot.as_bytes())?;
    outputs.push(OutputEntry {
        path: "config.toml".into(),
        sha256: conjulab::output::sha256_hex(snapshot.as_bytes()),
    });
    for (stem, table) in &tables {
        let name = format!("{stem}.csv");
        let sha256 = emit_csv(table, &dir.join(&name))?;
        outputs.push(OutputEntry { path: name, sha256 });
    }
    for (stem, table) in &tables {
        outputs.extend(write_charts(&dir, stem, table)?);
    }
    let mut seeds = vec![plan.seed, plan.init_seed()];
    if let Ok(sgd) = plan.resolved_sgd() {
        seeds.push(sgd.seed);
    }
    RunManifest {
        run_id: run_id.clone(),
        config_snapshot: "config.toml".into(),
        seeds,
        artifact_version: env!("CARGO_PKG_VERSION").into(),
        outputs,
    }
    .write(&dir.join("manifest.json"))?;
    println!("run_id: {run_id}");
    println!("dir: {}", dir.display());
    match failures {
        0 => Ok(()),
        n => Err(Failure::Violations(n)),
    }
}

fn write_charts(dir: &Path, stem: &str, table: &Table) -> Result<Vec<OutputEntry>, Error> {
    let mut out = Vec::new();
    for (name, chart) in charts_for(stem, table)? {
        let file = format!("{name}.svg");
        match emit_svg(&chart, &dir.join(&file)) {
            Ok(sha256) => out.push(OutputEntry { path: file, sha256 }),
            // e.g. a sample whose bounds were all undefined
            Err(Error::EmptySeries) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn report(out: &Path, run_id: &str) -> Result<(), Failure> {
    let dir = out.join(run_id);
    let manifest_path = dir.join("manifest.json");
    let mut manifest = RunManifest::read(&manifest_path)?;
    let csvs: Vec<String> = manifest
        .outputs
        .iter()
        .filter_map(|o| o.path.strip_suffix(".csv").map(str::to_string))
        .collect();
    for stem in csvs {
        let table = read_csv(&dir.join(format!("{stem}.csv")))?;
        for entry in write_charts(&dir, &stem, &table)? {
            println!("{} {}", entry.path, entry.sha256);
            match manifest.outputs.iter_mut().find(|o| o.path == entry.path) {
                Some(o) => *o = entry,
                None => manifest.outputs.push(entry),
            }
        }
    }
    manifest.write(&manifest_path)?;
    Ok(())
}
