use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use blockflow::bench::{self, BenchmarkRecord};
use blockflow::config::{load_config, RunConfig, ScenarioKind};
use blockflow::topology::count_grids;
use blockflow::{validate, Error, Result};

#[derive(Parser)]
#[command(name = "blockflow", version, about = "Hierarchical block-grid flow solver and benchmark harness")]
struct Cli {
    /// Scenario file (TOML). Without it the Laplace cube defaults are used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    depth: Option<u8>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Only report sizes and the memory estimate; allocate nothing.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured scenario and write CSV and VTK output.
    Solve,
    /// Time full ghost-layer exchanges of all nine variables.
    BenchExchange,
    /// Time to solution over `bench.worker_counts`, with speedup and efficiency.
    BenchSpeedup,
    /// Run the invariant suites and print one line per suite.
    Validate,
    /// Print grid, cell and variable counts of the configured hierarchy.
    DryRun,
}

fn grouped(n: u128) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => RunConfig::defaults(ScenarioKind::LaplaceCube),
    };
    if cli.workers.is_some() {
        cfg.workers = cli.workers;
    }
    if cli.depth.is_some() {
        cfg.depth = cli.depth;
    }
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if let Some(o) = &cli.output {
        cfg.output.dir = Some(o.display().to_string());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    PathBuf::from(cfg.output.dir.as_deref().unwrap_or("output"))
}

fn dry_run(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.refinement()?;
    let depth = cfg.depth();
    let grids = count_grids(&spec, depth)?;
    let cells = blockflow::topology::count_cells(&spec, depth, cfg.dgrid(), 9)?;
    let (_, bytes) = cfg.memory_estimate()?;
    println!("scenario   {}", cfg.scenario.name());
    println!("depth      {depth}");
    println!("l-grids    {}", grouped(grids.total_lgrids));
    println!("cells      {}", grouped(cells.total_cells));
    println!("variables  {}", grouped(cells.total_variables));
    println!("memory     ~{:.3} GiB", bytes as f64 / (1u64 << 30) as f64);
    Ok(())
}

fn print_records(records: &[BenchmarkRecord]) {
    println!("{:>8} {:>14} {:>14} {:>9} {:>10}", "workers", "mean [s]", "min [s]", "speedup", "efficiency");
    for r in records {
        println!(
            "{:>8} {:>14.6e} {:>14.6e} {:>9.3} {:>10.3}",
            r.workers,
            r.mean(),
            r.min(),
            r.speedup,
            r.efficiency
        );
    }
}

fn solve(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let out = bench::run_scenario(cfg, dir)?;
    if let Some(r) = &out.solve {
        println!(
            "{}: {} cycles, residual {:.3e} -> {:.3e}",
            cfg.scenario.name(),
            r.cycles,
            r.initial_residual,
            r.final_residual
        );
    }
    if let Some(last) = out.rows.last() {
        let worst = out.rows.iter().map(|r| r.divergence).fold(0.0, f64::max);
        println!(
            "{}: {} steps to t = {:.4}, max divergence {worst:.3e}, last probe {:.6}",
            cfg.scenario.name(),
            out.rows.len(),
            last.time,
            last.probe
        );
    }
    println!("csv: {}", out.csv.display());
    if let Some(v) = out.vtk.last() {
        println!("vtk: {} ({} snapshots)", v.display(), out.vtk.len());
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = config(cli)?;
    if cli.dry_run || matches!(cli.command, Command::DryRun) {
        return dry_run(&cfg);
    }
    let dir = out_dir(&cfg);
    match cli.command {
        Command::Solve => solve(&cfg, &dir),
        Command::BenchExchange => {
            let (rec, _) = bench::run_exchange_benchmark(&cfg, cfg.workers())?;
            bench::write_timings_csv(&dir.join("exchange.csv"), std::slice::from_ref(&rec))?;
            bench::write_summary_csv(&dir.join("exchange_summary.csv"), std::slice::from_ref(&rec))?;
            print_records(std::slice::from_ref(&rec));
            println!("bytes per exchange: {} within workers, {} between workers", rec.bytes.0, rec.bytes.1);
            println!("csv: {}", dir.join("exchange.csv").display());
            Ok(())
        }
        Command::BenchSpeedup => {
            let counts = cfg.bench.worker_counts.clone().unwrap_or_else(|| vec![1, 2, 4, 8]);
            let records = bench::run_strong_speedup(&cfg, &counts)?;
            bench::write_timings_csv(&dir.join("speedup_timings.csv"), &records)?;
            bench::write_summary_csv(&dir.join("speedup.csv"), &records)?;
            print_records(&records);
            println!(
                "cores available: {}",
                std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
            );
            println!("csv: {}", dir.join("speedup.csv").display());
            Ok(())
        }
        Command::Validate => {
            let checks = validate::run_all();
            for c in &checks {
                println!(
                    "{} {:<36} {:>7.2}s  {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.seconds,
                    c.detail
                );
            }
            if checks.iter().all(|c| c.passed) {
                Ok(())
            } else {
                Err(Error::InvalidArgument("validation failed".into()))
            }
        }
        Command::DryRun => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } => ExitCode::from(2),
                Error::Divergence(_) => ExitCode::from(3),
                Error::InvalidArgument(ref m) if m == "validation failed" => ExitCode::from(1),
                Error::InvalidArgument(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
