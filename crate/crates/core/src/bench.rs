//! Measurement harness: ghost-exchange timing, time to solution, strong
//! speedup, and full scenario runs with CSV/VTK output.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, ScenarioKind};
use crate::dgrid::{DGridSpec, Var};
use crate::error::{Error, Result};
use crate::exchange::{ExchangeMode, Interpolation};
use crate::mg::SolveReport;
use crate::ns::StepTimings;
use crate::partition::comm_pattern;
use crate::runtime::{PlanId, Slot, WorkerPool};
use crate::scalar::Real;
use crate::scenario::{fmt, Scenario, StepRow};
use crate::topology::Topology;
use crate::vtk;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchKind {
    Exchange,
    TimeToSolution,
}

impl BenchKind {
    pub fn name(self) -> &'static str {
        match self {
            BenchKind::Exchange => "exchange",
            BenchKind::TimeToSolution => "time_to_solution",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkRecord {
    pub kind: BenchKind,
    pub scenario: ScenarioKind,
    pub depth: u8,
    pub dgrid: [usize; 3],
    pub workers: usize,
    /// Wall seconds of the kept repetitions.
    pub times: Vec<f64>,
    /// Field bytes per repetition as (within a worker, between workers).
    pub bytes: (u64, u64),
    /// Multigrid cycles of the last repetition.
    pub cycles: usize,
    /// Phase breakdown of the last repetition.
    pub phases: StepTimings,
    pub speedup: f64,
    pub efficiency: f64,
}

impl BenchmarkRecord {
    fn new(kind: BenchKind, cfg: &RunConfig, workers: usize) -> Self {
        BenchmarkRecord {
            kind,
            scenario: cfg.scenario,
            depth: cfg.depth(),
            dgrid: cfg.dgrid(),
            workers,
            times: Vec::new(),
            bytes: (0, 0),
            cycles: 0,
            phases: StepTimings::default(),
            speedup: 1.0,
            efficiency: 1.0,
        }
    }

    pub fn reps(&self) -> usize {
        self.times.len()
    }

    pub fn mean(&self) -> f64 {
        if self.times.is_empty() {
            return f64::NAN;
        }
        self.times.iter().sum::<f64>() / self.times.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.times.iter().copied().fold(f64::NAN, f64::min)
    }
}

fn total_reps(cfg: &RunConfig) -> usize {
    let reps = cfg.bench.reps.unwrap_or(5);
    if reps > 0 && cfg.bench.discard_first.unwrap_or(true) {
        reps + 1
    } else {
        reps
    }
}

fn keep(cfg: &RunConfig, mut times: Vec<f64>) -> Vec<f64> {
    if times.len() > cfg.bench.reps.unwrap_or(5) {
        times.remove(0);
    }
    times
}

/// Hierarchy of `cfg` with every variable filled with seeded noise. Each grid
/// draws from its own stream so the data does not depend on the partition.
pub fn noisy_pool(cfg: &RunConfig, workers: usize) -> Result<WorkerPool<f64>> {
    cfg.check_memory()?;
    let topo = Topology::build_uniform(cfg.refinement()?, cfg.depth())?;
    let mut pool = WorkerPool::new(topo, cfg.domain(), cfg.dgrid(), workers)?;
    let seed = cfg.seed.unwrap_or(0);
    pool.for_each_block_mut(|b| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ u64::from(b.geom.id.0).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        for f in b.fields.arrays_mut() {
            for v in f.as_mut_slice() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
    });
    Ok(pool)
}

/// Times one complete ghost-layer exchange of all nine variables on the
/// leaves, `bench.reps` times, each bracketed by barriers.
pub fn run_exchange_benchmark(cfg: &RunConfig, workers: usize) -> Result<(BenchmarkRecord, WorkerPool<f64>)> {
    let mut rec = BenchmarkRecord::new(BenchKind::Exchange, cfg, workers);
    let mut pool = noisy_pool(cfg, workers)?;
    let n = total_reps(cfg);
    if n == 0 {
        return Ok((rec, pool));
    }
    let slots = Var::ALL.map(Slot::Var);
    let before = pool.stats().snapshot();
    let per_rank = pool.run(|w| {
        let mut times = Vec::with_capacity(n);
        for _ in 0..n {
            w.barrier()?;
            let t0 = Instant::now();
            w.exchange(PlanId::Leaves, &slots, Interpolation::PiecewiseConstant, ExchangeMode::Faces, None)?;
            w.barrier()?;
            times.push(t0.elapsed().as_secs_f64());
        }
        Ok(times)
    })?;
    let after = pool.stats().snapshot();
    // The slowest worker defines each repetition.
    let times = (0..n).map(|i| per_rank.iter().map(|t| t[i]).fold(0.0, f64::max)).collect();
    rec.times = keep(cfg, times);
    rec.bytes = ((after[3] - before[3]) / n as u64, (after[2] - before[2]) / n as u64);
    Ok((rec, pool))
}

/// Field bytes one leaf exchange of all nine variables should move, as
/// (within a worker, between workers), from the static pattern.
pub fn expected_exchange_bytes(pool: &WorkerPool<f64>) -> Result<(u64, u64)> {
    let spec = DGridSpec::new(pool.shared().size, [1.0; 3])?;
    let pat = comm_pattern(pool.topology(), pool.map(), &spec)?;
    let per = (Var::ALL.len() * f64::BYTES) as u64;
    let mut local = 0;
    let mut remote = 0;
    for (a, row) in pat.directed.iter().enumerate() {
        for (b, &v) in row.iter().enumerate() {
            if a == b {
                local += v as u64 * per;
            } else {
                remote += v as u64 * per;
            }
        }
    }
    Ok((local, remote))
}

/// One full solution: the pressure solve for the Laplace cube, one complete
/// time step otherwise. Setup is not timed. Returns the state of the last
/// repetition.
pub fn run_time_to_solution(cfg: &RunConfig, workers: usize) -> Result<(BenchmarkRecord, Scenario<f64>)> {
    let run = RunConfig {
        workers: Some(workers),
        ..cfg.clone()
    };
    let mut rec = BenchmarkRecord::new(BenchKind::TimeToSolution, cfg, workers);
    let mut times = Vec::new();
    let mut last = None;
    for _ in 0..total_reps(cfg).max(1) {
        let mut s = Scenario::<f64>::build(&run)?;
        let before = s.pool.stats().snapshot();
        let t0 = Instant::now();
        let (cycles, phases) = if cfg.scenario.is_flow() {
            let r = s.advance(1)?.remove(0);
            (r.cycles, r.timings)
        } else {
            let r = s.solve_pressure()?;
            let t = t0.elapsed().as_secs_f64();
            (r.cycles, StepTimings { poisson: t, total: t, ..StepTimings::default() })
        };
        times.push(t0.elapsed().as_secs_f64());
        let after = s.pool.stats().snapshot();
        rec.bytes = (after[3] - before[3], after[2] - before[2]);
        rec.cycles = cycles;
        rec.phases = phases;
        last = Some(s);
    }
    if cfg.bench.reps == Some(0) {
        times.clear();
    }
    rec.times = keep(cfg, times);
    Ok((rec, last.expect("at least one repetition")))
}

/// Time to solution for every worker count, with speedup and efficiency
/// against the smallest count (using the minimum over repetitions).
pub fn run_strong_speedup(cfg: &RunConfig, worker_counts: &[usize]) -> Result<Vec<BenchmarkRecord>> {
    if worker_counts.is_empty() {
        return Err(Error::InvalidArgument("no worker counts".into()));
    }
    let mut out = Vec::with_capacity(worker_counts.len());
    for &p in worker_counts {
        out.push(run_time_to_solution(cfg, p)?.0);
    }
    let (base_p, base_t) = out
        .iter()
        .map(|r| (r.workers, r.min()))
        .min_by_key(|&(p, _)| p)
        .expect("non-empty");
    for r in &mut out {
        r.speedup = base_t / r.min();
        r.efficiency = r.speedup * base_p as f64 / r.workers as f64;
    }
    Ok(out)
}

pub const TIMING_HEADER: [&str; 10] = [
    "benchmark",
    "scenario",
    "depth",
    "dgrid",
    "workers",
    "rep",
    "seconds",
    "local_bytes",
    "remote_bytes",
    "mg_cycles",
];

pub const SUMMARY_HEADER: [&str; 15] = [
    "benchmark",
    "scenario",
    "depth",
    "dgrid",
    "workers",
    "reps",
    "mean_seconds",
    "min_seconds",
    "speedup",
    "efficiency",
    "mg_cycles",
    "t_exchange",
    "t_poisson",
    "t_total",
    "poisson_share",
];

fn dgrid_text(d: [usize; 3]) -> String {
    format!("{}x{}x{}", d[0], d[1], d[2])
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    }
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row per kept repetition.
pub fn write_timings_csv(path: &Path, records: &[BenchmarkRecord]) -> Result<()> {
    let rows = records.iter().flat_map(|r| {
        r.times.iter().enumerate().map(move |(i, &t)| {
            vec![
                r.kind.name().to_string(),
                r.scenario.name().to_string(),
                r.depth.to_string(),
                dgrid_text(r.dgrid),
                r.workers.to_string(),
                i.to_string(),
                fmt(t),
                r.bytes.0.to_string(),
                r.bytes.1.to_string(),
                r.cycles.to_string(),
            ]
        })
    });
    write_csv(path, &TIMING_HEADER, rows)
}

pub fn write_summary_csv(path: &Path, records: &[BenchmarkRecord]) -> Result<()> {
    let rows = records.iter().map(|r| {
        vec![
            r.kind.name().to_string(),
            r.scenario.name().to_string(),
            r.depth.to_string(),
            dgrid_text(r.dgrid),
            r.workers.to_string(),
            r.reps().to_string(),
            fmt(r.mean()),
            fmt(r.min()),
            fmt(r.speedup),
            fmt(r.efficiency),
            r.cycles.to_string(),
            fmt(r.phases.exchange),
            fmt(r.phases.poisson),
            fmt(r.phases.total),
            fmt(r.phases.poisson_share()),
        ]
    });
    write_csv(path, &SUMMARY_HEADER, rows)
}

pub const RESIDUAL_HEADER: [&str; 3] = ["cycle", "residual", "t_cycle"];

/// What [`run_scenario`] produced.
pub struct ScenarioOutput {
    pub rows: Vec<StepRow>,
    pub solve: Option<SolveReport>,
    pub csv: PathBuf,
    /// One `.visit` index per output event.
    pub vtk: Vec<PathBuf>,
    pub scenario: Scenario<f64>,
}

fn write_snapshot(s: &Scenario<f64>, dir: &Path, stem: &str) -> Result<PathBuf> {
    let leaves = s.pool.blocks().into_iter().filter(|(_, b)| b.leaf).map(|(_, b)| b);
    vtk::write_leaves(dir, stem, leaves)
}

/// Runs the configured scenario: the pressure solve for the Laplace cube,
/// otherwise `time.steps` steps with a VTK snapshot every `output.vtk_every`
/// steps and at the end. Output goes to `out_dir`.
pub fn run_scenario(cfg: &RunConfig, out_dir: &Path) -> Result<ScenarioOutput> {
    let mut s = Scenario::<f64>::build(cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let write_csv_files = cfg.output.csv.unwrap_or(true);
    let mut vtk = Vec::new();
    if !cfg.scenario.is_flow() {
        let r = s.solve_pressure()?;
        let csv = out_dir.join("residuals.csv");
        if write_csv_files {
            let rows = r
                .history
                .iter()
                .zip(&r.cycle_times)
                .enumerate()
                .map(|(i, (&res, &t))| vec![(i + 1).to_string(), fmt(res), fmt(t)]);
            let head = std::iter::once(vec!["0".to_string(), fmt(r.initial_residual), fmt(0.0)]);
            write_csv(&csv, &RESIDUAL_HEADER, head.chain(rows))?;
        }
        vtk.push(write_snapshot(&s, out_dir, cfg.scenario.name())?);
        return Ok(ScenarioOutput {
            rows: Vec::new(),
            solve: Some(r),
            csv,
            vtk,
            scenario: s,
        });
    }
    let steps = cfg.time.steps.unwrap_or(0);
    let every = match cfg.output.vtk_every.unwrap_or(0) {
        0 => steps.max(1),
        n => n,
    };
    let mut rows = Vec::with_capacity(steps);
    while rows.len() < steps {
        let chunk = every.min(steps - rows.len());
        rows.extend(s.advance(chunk)?);
        vtk.push(write_snapshot(&s, out_dir, &format!("step_{:06}", rows.len()))?);
    }
    if steps == 0 {
        vtk.push(write_snapshot(&s, out_dir, "step_000000")?);
    }
    let csv = out_dir.join("steps.csv");
    if write_csv_files {
        write_csv(&csv, &StepRow::HEADER, rows.iter().map(StepRow::record))?;
    }
    Ok(ScenarioOutput {
        rows,
        solve: None,
        csv,
        vtk,
        scenario: s,
    })
}
