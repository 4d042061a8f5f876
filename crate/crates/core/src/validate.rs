//! Invariant suites run by `blockflow validate`, and the reference solutions
//! they compare against.

use std::time::Instant;

use crate::config::{parse_config, RunConfig};
use crate::dgrid::{DomainBox, Var};
use crate::error::Result;
use crate::exchange::{ExchangeMode, Interpolation};
use crate::mg::Smoother;
use crate::partition::assign;
use crate::runtime::{PlanId, Slot, WorkerPool};
use crate::scenario::Scenario;
use crate::topology::{count_cells, count_grids, Face, NeighborKind, RefinementSpec, Topology};

/// Outcome of one suite.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

/// Sine basis of the 1D cell-centred Dirichlet Laplacian on `n` cells: rows
/// are orthonormal eigenvectors, and `lambda[k] * h^-2` the eigenvalues.
fn sine_basis(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut q = vec![0.0; n * n];
    let mut lambda = vec![0.0; n];
    for k in 0..n {
        let w = (k + 1) as f64 * std::f64::consts::PI / n as f64;
        let row = &mut q[k * n..(k + 1) * n];
        for (i, v) in row.iter_mut().enumerate() {
            *v = (w * (i as f64 + 0.5)).sin();
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
        lambda[k] = -4.0 * (0.5 * w).sin().powi(2);
    }
    (q, lambda)
}

/// Applies `q` (or its transpose) along `axis` of a lattice stored x-fastest.
fn transform(data: &mut [f64], n: [usize; 3], axis: usize, q: &[f64], transpose: bool) {
    let m = n[axis];
    let stride = [1, n[0], n[0] * n[1]][axis];
    let mut line = vec![0.0; m];
    let mut out = vec![0.0; m];
    for start in 0..data.len() {
        if !(start / stride).is_multiple_of(m) {
            continue;
        }
        for (i, v) in line.iter_mut().enumerate() {
            *v = data[start + i * stride];
        }
        for (k, o) in out.iter_mut().enumerate() {
            *o = (0..m)
                .map(|i| if transpose { q[i * m + k] } else { q[k * m + i] } * line[i])
                .sum();
        }
        for (i, v) in out.iter().enumerate() {
            data[start + i * stride] = *v;
        }
    }
}

/// Exact solution of the cell-centred 7-point problem `L p = rhs` on an
/// `n` lattice of spacing `h`, with constant Dirichlet values on the six
/// faces (in [`Face`] order) imposed at the faces. The operator is
/// diagonalised axis by axis, so this is a direct solve up to rounding.
pub fn dirichlet_oracle(n: [usize; 3], h: [f64; 3], rhs: &[f64], faces: [f64; 6]) -> Vec<f64> {
    let idx = |i: usize, j: usize, k: usize| i + n[0] * (j + n[1] * k);
    let mut b = rhs.to_vec();
    for k in 0..n[2] {
        for j in 0..n[1] {
            for i in 0..n[0] {
                let c = [i, j, k];
                for f in Face::ALL {
                    let a = f.axis();
                    let edge = if f.is_positive() { n[a] - 1 } else { 0 };
                    if c[a] == edge {
                        b[idx(i, j, k)] -= 2.0 * faces[f.index()] / (h[a] * h[a]);
                    }
                }
            }
        }
    }
    let bases: Vec<_> = n.iter().map(|&m| sine_basis(m)).collect();
    for a in 0..3 {
        transform(&mut b, n, a, &bases[a].0, false);
    }
    for k in 0..n[2] {
        for j in 0..n[1] {
            for i in 0..n[0] {
                let l = bases[0].1[i] / (h[0] * h[0]) + bases[1].1[j] / (h[1] * h[1]) + bases[2].1[k] / (h[2] * h[2]);
                b[idx(i, j, k)] /= l;
            }
        }
    }
    for a in 0..3 {
        transform(&mut b, n, a, &bases[a].0, true);
    }
    b
}

/// Leaf values of `var` of a uniform hierarchy gathered into one lattice
/// (x fastest). Returns the lattice size and the values.
pub fn leaf_lattice(pool: &WorkerPool<f64>, var: Var) -> ([usize; 3], Vec<f64>) {
    let topo = pool.topology();
    let e = topo.spec().extent(topo.max_depth());
    let s = pool.shared().size;
    let n = [0, 1, 2].map(|a| e[a] as usize * s[a]);
    let mut out = vec![f64::NAN; n[0] * n[1] * n[2]];
    for (_, b) in pool.blocks() {
        if !b.leaf {
            continue;
        }
        let f = &b.fields[var];
        for c in f.interior() {
            let g = [0, 1, 2].map(|a| (b.geom.offset[a] + c[a] as i64) as usize);
            out[g[0] + n[0] * (g[1] + n[1] * g[2])] = f.at(c);
        }
    }
    (n, out)
}

pub fn rms_diff(a: &[f64], b: &[f64]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (s / a.len() as f64).sqrt()
}

/// Ghost cells on same-level interfaces that differ, in bits, from the
/// neighbour's interior cell they mirror. Returns (checked, mismatched).
pub fn same_level_ghost_mismatches(pool: &WorkerPool<f64>) -> Result<(usize, usize)> {
    let topo = pool.topology();
    let (mut checked, mut bad) = (0, 0);
    for (id, b) in pool.blocks() {
        if !b.leaf {
            continue;
        }
        for face in Face::ALL {
            let nb = topo.find_neighbor(id, face)?;
            if nb.kind != NeighborKind::SameLevel {
                continue;
            }
            let other = pool.block(nb.ids[0])?;
            let a = face.axis();
            let n = b.geom.size.map(|x| x as isize);
            let layer = if face.is_positive() { n[a] } else { -1 };
            for (var, field) in b.fields.arrays().iter().enumerate() {
                let src = &other.fields.arrays()[var];
                for c in field.interior().filter(|c| c[a] == 0) {
                    let mut g = c;
                    g[a] = layer;
                    let o = [0, 1, 2].map(|x| (g[x] as i64 + b.geom.offset[x] - other.geom.offset[x]) as isize);
                    checked += 1;
                    if field.at(g).to_bits() != src.at(o).to_bits() {
                        bad += 1;
                    }
                }
            }
        }
    }
    Ok((checked, bad))
}

/// Largest relative difference between the diffusive flux of `P` leaving a
/// coarse leaf through a face and the summed flux entering the finer leaves
/// across it, both computed from ghost and interior values.
pub fn interface_flux_mismatch(pool: &WorkerPool<f64>) -> Result<(usize, f64)> {
    let topo = pool.topology();
    let mut worst: f64 = 0.0;
    let mut faces = 0;
    let flux = |b: &crate::runtime::Block<f64>, face: Face, outward: f64| {
        let a = face.axis();
        let n = b.geom.size.map(|x| x as isize);
        let p = &b.fields[Var::P];
        let area = b.geom.cell_volume() / b.geom.spacing[a];
        let (inner, ghost) = if face.is_positive() { (n[a] - 1, n[a]) } else { (0, -1) };
        let mut s = 0.0;
        for c in p.interior().filter(|c| c[a] == inner) {
            let mut g = c;
            g[a] = ghost;
            s += outward * (p.at(g) - p.at(c)) / b.geom.spacing[a] * area;
        }
        s
    };
    for (id, b) in pool.blocks() {
        if !b.leaf {
            continue;
        }
        for face in Face::ALL {
            let nb = topo.find_neighbor(id, face)?;
            if nb.kind != NeighborKind::FinerSet {
                continue;
            }
            let coarse = flux(b, face, 1.0);
            let mut fine = 0.0;
            for &f in &nb.ids {
                fine += flux(pool.block(f)?, face.opposite(), -1.0);
            }
            worst = worst.max((coarse - fine).abs() / coarse.abs().max(f64::MIN_POSITIVE));
            faces += 1;
        }
    }
    Ok((faces, worst))
}

/// Adaptive hierarchy (one refined corner) holding a linear `P` in every
/// interior and halo, after a leaf exchange with trilinear interfaces.
pub fn linear_field_on_adaptive(workers: usize) -> Result<WorkerPool<f64>> {
    let t = Topology::build_adaptive(RefinementSpec::cubic(3), 1, |q| q.depth == 1 && q.coord == [0, 0, 0])?;
    let map = assign(&t, workers)?;
    let mut pool = WorkerPool::with_map(t, DomainBox::unit(), [4; 3], map)?;
    let lin = |x: [f64; 3]| 0.3 * x[0] - 0.7 * x[1] + 1.1 * x[2] + 0.2;
    pool.for_each_block_mut(|b| {
        let p = &mut b.fields[Var::P];
        let d = p.dims().map(|x| x as isize - 1);
        for k in -1..d[2] {
            for j in -1..d[1] {
                for i in -1..d[0] {
                    p.put([i, j, k], lin(b.geom.centre([i, j, k])));
                }
            }
        }
    });
    // Overwrite interface ghosts through the exchange; hull ghosts keep the
    // exact linear values.
    pool.run(|w| {
        w.exchange(PlanId::Leaves, &[Slot::Var(Var::P)], Interpolation::Trilinear, ExchangeMode::WithEdges, None)
    })?;
    Ok(pool)
}

fn laplace(depth: u8, extra: &str) -> RunConfig {
    parse_config(&format!(
        "scenario = \"laplace_cube\"\ndepth = {depth}\n[grid]\ndgrid = [4, 4, 4]\n[solver]\ntol = 1e-10\nmax_cycles = 60\n{extra}"
    ))
    .expect("built-in config")
}

fn run(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let t0 = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    Check {
        name,
        passed,
        detail,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

/// All suites, in order. Each takes at most a few seconds.
pub fn run_all() -> Vec<Check> {
    vec![
        run("size arithmetic", || {
            let spec = RefinementSpec::cubic(8);
            let g = count_grids(&spec, 8)?.total_lgrids;
            let c = count_cells(&spec, 8, [16; 3], 9)?;
            let ok = g == 19_173_961 && c.total_cells == 78_536_544_256 && c.total_variables == 706_828_898_304;
            Ok((ok, format!("{g} grids, {} cells, {} variables", c.total_cells, c.total_variables)))
        }),
        run("dense oracle (laplace cube, 32^3)", || {
            let mut s = Scenario::<f64>::build(&laplace(3, ""))?;
            let r = s.solve_pressure()?;
            let (n, p) = leaf_lattice(&s.pool, Var::P);
            let h = n.map(|m| 1.0 / m as f64);
            let exact = dirichlet_oracle(n, h, &vec![0.0; p.len()], [1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
            let e = rms_diff(&p, &exact);
            Ok((r.converged && e <= 1e-8, format!("rms error {e:.3e} after {} cycles", r.cycles)))
        }),
        run("multigrid reduction", || {
            let mut s = Scenario::<f64>::build(&laplace(3, ""))?;
            let r = s.solve_pressure()?;
            let rho = r.reduction_factor(2, 10.min(r.cycles)).unwrap_or(f64::NAN);
            Ok((rho <= 0.5, format!("mean factor {rho:.3} over cycles 2-10")))
        }),
        run("halo exactness", || {
            let cfg = parse_config("scenario = \"laplace_cube\"\ndepth = 3\nseed = 3\n[grid]\ndgrid = [4, 4, 4]\n[bench]\nreps = 1\n")?;
            let mut detail = Vec::new();
            let mut ok = true;
            for p in [1, 2, 4, 8] {
                let (_, pool) = crate::bench::run_exchange_benchmark(&cfg, p)?;
                let (n, bad) = same_level_ghost_mismatches(&pool)?;
                ok &= bad == 0 && n > 0;
                detail.push(format!("P={p}: {bad}/{n}"));
            }
            Ok((ok, detail.join(", ")))
        }),
        run("coarse-fine flux", || {
            let pool = linear_field_on_adaptive(3)?;
            let (n, worst) = interface_flux_mismatch(&pool)?;
            Ok((n > 0 && worst <= 1e-12, format!("{n} interfaces, worst relative mismatch {worst:.2e}")))
        }),
        run("projection", || {
            let cfg = parse_config(
                "scenario = \"heated_cavity\"\ndepth = 2\n[grid]\ndgrid = [4, 4, 4]\n[solver]\ntol = 1e-8\n",
            )?;
            let mut s = Scenario::<f64>::build(&cfg)?;
            let rows = s.advance(20)?;
            let worst = rows.iter().map(|r| r.divergence).fold(0.0, f64::max);
            Ok((worst <= 10.0 * 1e-8, format!("max divergence {worst:.2e} over {} steps", rows.len())))
        }),
        run("partition independence", || {
            let text = "scenario = \"heated_cavity\"\ndepth = 2\n[grid]\ndgrid = [4, 4, 4]\n[solver]\nsmoother = \"jacobi\"\ntol = 1e-9\n";
            let cfg = parse_config(text)?;
            let mut fields = Vec::new();
            for p in [1, 4] {
                let mut s = Scenario::<f64>::build(&RunConfig { workers: Some(p), ..cfg.clone() })?;
                assert!(matches!(s.flow.mg.smoother, Smoother::Jacobi { .. }));
                s.advance(2)?;
                fields.push(Var::ALL.map(|v| leaf_lattice(&s.pool, v).1));
            }
            let worst = (0..9).map(|v| rms_diff(&fields[0][v], &fields[1][v])).fold(0.0, f64::max);
            Ok((worst <= 1e-10, format!("largest field rms difference {worst:.2e}")))
        }),
    ]
}
