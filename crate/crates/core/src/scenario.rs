//! Scenario assembly from a resolved [`RunConfig`] and the time loop with
//! probes.

use crate::config::{ObstacleKind, RunConfig, ScenarioKind};
use crate::dgrid::Var;
use crate::error::Result;
use crate::mg::{self, SolveReport};
use crate::ns::{self, apply_obstacle, Cuboid, Cylinder, FlowConfig, Shape, StepReport, StepTimings, TimeIntegrator};
use crate::runtime::{Worker, WorkerPool};
use crate::scalar::Real;
use crate::topology::{Face, Topology};

/// One logged time step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRow {
    pub step: u64,
    pub time: f64,
    pub dt: f64,
    pub cycles: usize,
    pub initial_residual: f64,
    pub final_residual: f64,
    pub divergence: f64,
    pub cell_divergence: f64,
    pub probe: f64,
    /// Pressure force on the obstacle; zero without one.
    pub force: [f64; 3],
    pub timings: StepTimings,
}

impl StepRow {
    pub const HEADER: [&'static str; 21] = [
        "step",
        "time",
        "dt",
        "mg_cycles",
        "mg_initial_residual",
        "mg_final_residual",
        "divergence",
        "cell_divergence",
        "probe",
        "force_x",
        "force_y",
        "force_z",
        "t_exchange",
        "t_momentum",
        "t_temperature",
        "t_rhs",
        "t_poisson",
        "t_correction",
        "t_diagnostics",
        "t_total",
        "poisson_share",
    ];

    /// Columns before this index are deterministic; the rest are timings.
    pub const NUMERIC_COLUMNS: usize = 12;

    fn new(r: &StepReport, probe: f64, force: [f64; 3]) -> Self {
        StepRow {
            step: r.step,
            time: r.time,
            dt: r.dt,
            cycles: r.solve.cycles,
            initial_residual: r.solve.initial_residual,
            final_residual: r.solve.final_residual,
            divergence: r.divergence,
            cell_divergence: r.cell_divergence,
            probe,
            force,
            timings: r.timings,
        }
    }

    pub fn record(&self) -> Vec<String> {
        let t = &self.timings;
        let mut v = vec![self.step.to_string()];
        v.extend([self.time, self.dt].map(fmt));
        v.push(self.cycles.to_string());
        v.extend(
            [self.initial_residual, self.final_residual, self.divergence, self.cell_divergence, self.probe]
                .into_iter()
                .chain(self.force)
                .chain(t.phases())
                .chain([t.total, t.poisson_share()])
                .map(fmt),
        );
        v
    }
}

/// Shortest round-trip text of a float.
pub fn fmt(x: f64) -> String {
    format!("{x:?}")
}

/// Interior value of `var` in the leaf cell containing `x` (NaN outside the
/// domain or inside a solid). Collective.
pub fn sample<T: Real>(w: &mut Worker<T>, x: [f64; 3], var: Var) -> Result<f64> {
    let mut parts = Vec::new();
    for g in w.local_leaves() {
        let b = w.block(g)?;
        let c = [0, 1, 2].map(|a| ((x[a] - b.geom.origin[a]) / b.geom.spacing[a]).floor() as isize);
        if b.fields[var].is_interior(c) && !b.is_solid(c) {
            parts.push((u64::from(g.0), vec![b.fields[var].at(c).as_f64(), 1.0]));
        }
    }
    let t = w.allreduce_sum(parts, 2)?;
    Ok(if t[1] > 0.0 { t[0] / t[1] } else { f64::NAN })
}

/// Pressure force on all solid cells, summed over fluid-solid faces of the
/// leaves. Collective.
pub fn obstacle_force<T: Real>(w: &mut Worker<T>) -> Result<[f64; 3]> {
    let mut parts = Vec::new();
    for g in w.local_leaves() {
        let b = w.block(g)?;
        if b.solid.is_none() {
            continue;
        }
        let p = &b.fields[Var::P];
        let mut f = [0.0; 3];
        for c in p.interior() {
            if b.is_solid(c) {
                continue;
            }
            for face in Face::ALL {
                let a = face.axis();
                let mut n = c;
                n[a] += face.sign() as isize;
                if b.is_solid(n) {
                    let area = b.geom.cell_volume() / b.geom.spacing[a];
                    f[a] += face.sign() as f64 * p.at(c).as_f64() * area;
                }
            }
        }
        parts.push((u64::from(g.0), f.to_vec()));
    }
    let t = w.allreduce_sum(parts, 3)?;
    Ok([t[0], t[1], t[2]])
}

pub struct Scenario<T: Real> {
    pub config: RunConfig,
    pub pool: WorkerPool<T>,
    pub flow: FlowConfig,
    pub integrator: TimeIntegrator,
    pub probe: Option<([f64; 3], Var)>,
}

impl<T: Real> Scenario<T> {
    /// Validates `cfg` (including the memory guard), builds the uniform
    /// hierarchy, the worker pool and the initial state.
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        cfg.check_memory()?;
        let topo = Topology::build_uniform(cfg.refinement()?, cfg.depth())?;
        let mut pool = WorkerPool::new(topo, cfg.domain(), cfg.dgrid(), cfg.workers())?;
        let t0 = T::lit(cfg.fluid.initial_temperature.unwrap_or(0.0));
        pool.for_each_block_mut(|b| b.fields[Var::T].fill_all(t0));
        if let Some(o) = &cfg.obstacle {
            let shape: Box<dyn Shape> = match o.kind {
                ObstacleKind::Cylinder => Box::new(Cylinder {
                    centre: o.centre,
                    radius: o.radius,
                    axis: o.axis,
                }),
                ObstacleKind::Cuboid => Box::new(Cuboid { lo: o.lo, hi: o.hi }),
            };
            apply_obstacle(&mut pool, shape.as_ref(), cfg.boundary.obstacle_temperature);
        }
        let flow = FlowConfig {
            props: cfg.fluid(),
            bc: cfg.boundary_spec(),
            mg: cfg.mg(),
            thermal: cfg.fluid.thermal.unwrap_or(false),
            interface: cfg.interpolation(),
        };
        let probe = match (cfg.output.probe, cfg.output.probe_var.as_deref()) {
            (Some(x), Some(name)) => Some((x, Var::from_name(name)?)),
            _ => None,
        };
        Ok(Scenario {
            config: cfg.clone(),
            pool,
            flow,
            integrator: cfg.integrator()?,
            probe,
        })
    }

    pub fn kind(&self) -> ScenarioKind {
        self.config.scenario
    }

    /// Solves the pressure problem of the boundary conditions with the
    /// current right-hand side.
    pub fn solve_pressure(&mut self) -> Result<SolveReport> {
        let prob = self.flow.poisson();
        mg::solve_pool(&mut self.pool, &prob, &self.flow.mg)
    }

    /// Advances `steps` full time steps.
    pub fn advance(&mut self, steps: usize) -> Result<Vec<StepRow>> {
        if steps == 0 {
            return Ok(Vec::new());
        }
        let Scenario { pool, flow, integrator, probe, .. } = self;
        let (flow, start, probe) = (&*flow, integrator.clone(), *probe);
        let mut out = pool.run(|w| {
            let mut integ = start.clone();
            let mut rows = Vec::with_capacity(steps);
            for _ in 0..steps {
                let r = ns::time_step(w, flow, &mut integ)?;
                let value = match probe {
                    Some((x, v)) => sample(w, x, v)?,
                    None => f64::NAN,
                };
                let force = obstacle_force(w)?;
                rows.push(StepRow::new(&r, value, force));
            }
            Ok((rows, integ))
        })?;
        let (rows, integ) = out.swap_remove(0);
        *integrator = integ;
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    #[test]
    fn laplace_cube_boundary_values() {
        let cfg = parse_config("scenario = \"laplace_cube\"\ndepth = 2\n[grid]\ndgrid = [4, 4, 4]\n[solver]\ntol = 1e-10\n").unwrap();
        let mut s = Scenario::<f64>::build(&cfg).unwrap();
        let r = s.solve_pressure().unwrap();
        assert!(r.converged);
        // Ghost values are the reflections that put 1 on the x faces and 0
        // elsewhere: the face average of ghost and interior.
        for (_, b) in s.pool.blocks() {
            if !b.leaf {
                continue;
            }
            let p = &b.fields[Var::P];
            let n = b.geom.size.map(|x| x as isize);
            for j in 0..n[1] {
                for k in 0..n[2] {
                    if b.geom.offset[0] == 0 {
                        assert!((0.5 * (p.at([-1, j, k]) + p.at([0, j, k])) - 1.0).abs() < 1e-12);
                    }
                }
            }
            for c in p.interior() {
                let v = p.at(c);
                assert!(v > 0.0 && v < 1.0);
            }
        }
    }

    #[test]
    fn probe_and_force_are_collective() {
        let text = "scenario = \"channel\"\ndepth = 1\nworkers = 3\n[time]\ndt = 0.005\n";
        let cfg = parse_config(text).unwrap();
        let mut one = Scenario::<f64>::build(&RunConfig { workers: Some(1), ..cfg.clone() }).unwrap();
        let mut three = Scenario::<f64>::build(&cfg).unwrap();
        let a = one.advance(3).unwrap();
        let b = three.advance(3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.probe.is_finite());
            assert_eq!(x.record()[..StepRow::NUMERIC_COLUMNS], y.record()[..StepRow::NUMERIC_COLUMNS]);
        }
        // Flow pushes on the cylinder in +x.
        assert!(a[2].force[0] > 0.0, "{:?}", a[2].force);
        assert_eq!(one.integrator.steps, 3);
    }
}
