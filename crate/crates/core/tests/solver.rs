use std::f64::consts::PI;
use std::process::Command;

use blockflow::bench::run_scenario;
use blockflow::config::{parse_config, RunConfig};
use blockflow::dgrid::fill_array;
use blockflow::mg::{solve_pool, PoissonProblem};
use blockflow::scenario::Scenario;
use blockflow::validate::{leaf_lattice, rms_diff};
use blockflow::{vtk, DomainBox, MGConfig, RefinementSpec, Topology, Var, WorkerPool};

fn sine(x: [f64; 3]) -> f64 {
    (PI * x[0]).sin() * (PI * x[1]).sin() * (PI * x[2]).sin()
}

/// Composite solve of the sine problem on a hierarchy refined once more
/// over x < 1/2. Returns the leaf RMS error.
fn adaptive_error(base: u8, workers: usize) -> f64 {
    let t = Topology::build_adaptive(RefinementSpec::cubic(5), base, |q| q.depth == base && q.lo[0] < 0.5).unwrap();
    let mut pool = WorkerPool::<f64>::new(t, DomainBox::unit(), [4, 4, 4], workers).unwrap();
    pool.for_each_block_mut(|b| {
        let g = b.geom.clone();
        fill_array(&mut b.fields[Var::Rhs], &g, |x| -3.0 * PI * PI * sine(x));
    });
    let cfg = MGConfig {
        tol: 1e-10,
        ..MGConfig::default()
    };
    let r = solve_pool(&mut pool, &PoissonProblem::dirichlet(0.0), &cfg).unwrap();
    assert!(r.converged, "{r:?}");
    let (mut sq, mut n) = (0.0, 0.0);
    for (_, b) in pool.blocks() {
        if b.leaf {
            for c in b.fields[Var::P].interior() {
                sq += (b.fields[Var::P].at(c) - sine(b.geom.centre(c))).powi(2);
                n += 1.0;
            }
        }
    }
    (sq / n).sqrt()
}

#[test]
fn adaptive_composite_solution_converges_at_least_first_order() {
    let coarse = adaptive_error(1, 1);
    let fine = adaptive_error(2, 1);
    assert!(coarse / fine >= 2.0, "{coarse:e} -> {fine:e}");
}

#[test]
fn multigrid_agrees_across_worker_counts() {
    let cfg = parse_config("scenario = \"laplace_cube\"\ndepth = 3\n[grid]\ndgrid = [4, 4, 4]\n[solver]\ntol = 1e-10\n").unwrap();
    let mut one = Scenario::<f64>::build(&cfg).unwrap();
    let mut eight = Scenario::<f64>::build(&RunConfig { workers: Some(8), ..cfg }).unwrap();
    let a = one.solve_pressure().unwrap();
    let b = eight.solve_pressure().unwrap();
    assert_eq!(a.cycles, b.cycles);
    assert_eq!(a.history, b.history);
    let d = rms_diff(&leaf_lattice(&one.pool, Var::P).1, &leaf_lattice(&eight.pool, Var::P).1);
    assert!(d <= 1e-12, "{d:e}");
}

#[test]
fn hot_wall_drives_upward_flow() {
    let cfg = parse_config("scenario = \"heated_cavity\"\ndepth = 2\n[grid]\ndgrid = [4, 4, 4]\n[time]\nsteps = 100\n").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = run_scenario(&cfg, dir.path()).unwrap();
    // Mean vertical velocity in the column of cells next to the hot wall.
    let (n, u3) = leaf_lattice(&out.scenario.pool, Var::U3);
    let mut sum = 0.0;
    for k in 0..n[2] {
        for j in 0..n[1] {
            sum += u3[n[0] * (j + n[1] * k)];
        }
    }
    assert!(sum > 0.0, "{sum}");
    // ... and downward along the cold wall.
    let mut cold = 0.0;
    for k in 0..n[2] {
        for j in 0..n[1] {
            cold += u3[n[0] - 1 + n[0] * (j + n[1] * k)];
        }
    }
    assert!(cold < 0.0, "{cold}");
}

#[test]
fn adaptive_output_writes_one_file_per_leaf() {
    let t = Topology::build_adaptive(RefinementSpec::cubic(3), 1, |q| q.depth == 1 && q.coord == [1, 1, 0]).unwrap();
    let leaves = t.leaves().count();
    let pool = WorkerPool::<f64>::new(t, DomainBox::unit(), [2, 2, 2], 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let index = vtk::write_leaves(dir.path(), "a", pool.blocks().into_iter().filter(|(_, b)| b.leaf).map(|(_, b)| b)).unwrap();
    let names = vtk::read_index(&index).unwrap();
    assert_eq!(names.len(), leaves);
    assert_eq!(names.len(), 15);
    let on_disk = std::fs::read_dir(dir.path()).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "vtk").count();
    assert_eq!(on_disk, leaves);
    for n in names {
        let b = vtk::read_block(&dir.path().join(n)).unwrap();
        assert_eq!(b.scalars.len(), 2);
        assert_eq!(b.vectors.len(), 1);
    }
}

fn cli(args: &[&str], dir: &std::path::Path) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_blockflow")).args(args).current_dir(dir).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn cli_dry_run_prints_depth_eight_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("d8.toml");
    std::fs::write(&cfg, "scenario = \"laplace_cube\"\ndepth = 8\n").unwrap();
    let (code, out, _) = cli(&["--config", cfg.to_str().unwrap(), "dry-run"], dir.path());
    assert_eq!(code, 0);
    for s in ["19,173,961", "78,536,544,256", "706,828,898,304"] {
        assert!(out.contains(s), "{out}");
    }
    let (code, _, err) = cli(&["--config", cfg.to_str().unwrap(), "solve"], dir.path());
    assert_eq!(code, 2);
    assert!(err.contains("78536544256"), "{err}");
    let (code, out, _) = cli(&["--config", cfg.to_str().unwrap(), "--dry-run", "solve"], dir.path());
    assert_eq!(code, 0);
    assert!(out.contains("19,173,961"));
}

#[test]
fn cli_config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "scenario = \"laplace_cube\"\n[grid]\nbogus = 1\n").unwrap();
    let (code, _, err) = cli(&["--config", cfg.to_str().unwrap(), "solve"], dir.path());
    assert_eq!(code, 2);
    assert!(err.contains("line 3"), "{err}");
    let (code, _, _) = cli(&["--depth", "9", "dry-run"], dir.path());
    assert_eq!(code, 2);
}

#[test]
fn cli_bench_exchange_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("x.toml");
    std::fs::write(&cfg, "scenario = \"laplace_cube\"\n[grid]\ndgrid = [4, 4, 4]\n[bench]\nreps = 3\n").unwrap();
    let (code, out, err) = cli(
        &["--config", cfg.to_str().unwrap(), "--depth", "2", "--workers", "2", "--output", "res", "bench-exchange"],
        dir.path(),
    );
    assert_eq!(code, 0, "{out}{err}");
    let text = std::fs::read_to_string(dir.path().join("res/exchange.csv")).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "benchmark,scenario,depth,dgrid,workers,rep,seconds,local_bytes,remote_bytes,mg_cycles"
    );
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().nth(1).unwrap().starts_with("exchange,laplace_cube,2,4x4x4,2,0,"));
}

#[test]
fn cli_validate_passes() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out, _) = cli(&["validate"], dir.path());
    assert_eq!(code, 0, "{out}");
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 7, "{out}");
}

#[test]
fn cli_solve_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "scenario = \"heated_cavity\"\ndepth = 1\n[grid]\ndgrid = [4, 4, 4]\n[time]\nsteps = 3\n").unwrap();
    let (code, out, err) = cli(&["--config", cfg.to_str().unwrap(), "--output", "o", "solve"], dir.path());
    assert_eq!(code, 0, "{out}{err}");
    assert!(dir.path().join("o/steps.csv").exists());
    assert!(dir.path().join("o/step_000003.visit").exists());
}
