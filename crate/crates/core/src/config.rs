//! Run configuration in TOML.
//!
//! Every field is optional in the file. [`parse_config`] fills the scenario
//! defaults, so the resolved config is complete and serialising it gives a
//! file that parses back to the same value.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dgrid::{DomainBox, FluidProperties};
use crate::error::{Error, Result};
use crate::exchange::Interpolation;
use crate::mg::{CoarseSolver, MGConfig, Smoother};
use crate::ns::{BoundarySpec, FaceProfile, FaceSpec, PressureBc, Scheme, TemperatureBc, TimeIntegrator, VelocityBc};
use crate::topology::{count_cells, count_grids, Face, RefinementSpec};

/// Resident arrays per cell in f64: nine fields, three multigrid scratch
/// arrays and four time-integration histories, each with its halo.
pub const BYTES_PER_CELL: u64 = 16 * 8;

/// Refuse to allocate beyond this without `--dry-run`.
pub const MEMORY_LIMIT: u64 = 4 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    LaplaceCube,
    Channel,
    HeatedCavity,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::LaplaceCube => "laplace_cube",
            ScenarioKind::Channel => "channel",
            ScenarioKind::HeatedCavity => "heated_cavity",
        }
    }

    pub fn is_flow(self) -> bool {
        self != ScenarioKind::LaplaceCube
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioKind,
    pub depth: Option<u8>,
    pub workers: Option<usize>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub time: TimeConfig,
    #[serde(default)]
    pub fluid: FluidConfig,
    #[serde(default)]
    pub boundary: BoundaryConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obstacle: Option<ObstacleConfig>,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub bench: BenchConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub refinement_top: Option<[u32; 3]>,
    pub refinement: Option<[u32; 3]>,
    pub max_depth: Option<u8>,
    pub dgrid: Option<[usize; 3]>,
    pub domain_lo: Option<[f64; 3]>,
    pub domain_hi: Option<[f64; 3]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmootherKind {
    RedBlackGaussSeidel,
    Jacobi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoarseKind {
    Smoother,
    ConjugateGradient,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProlongationKind {
    Trilinear,
    PiecewiseConstant,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub nu1: Option<usize>,
    pub nu2: Option<usize>,
    pub smoother: Option<SmootherKind>,
    pub omega: Option<f64>,
    pub tol: Option<f64>,
    pub max_cycles: Option<usize>,
    pub coarsest_sweeps: Option<usize>,
    pub coarse_solver: Option<CoarseKind>,
    pub prolongation: Option<ProlongationKind>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Euler,
    AdamsBashforth2,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub scheme: Option<SchemeKind>,
    pub cfl_safety: Option<f64>,
    pub dt_max: Option<f64>,
    /// Fixed step; overrides the stability bound.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    pub steps: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluidConfig {
    pub rho_inf: Option<f64>,
    pub mu: Option<f64>,
    pub beta: Option<f64>,
    pub t_ref: Option<f64>,
    pub gravity: Option<[f64; 3]>,
    pub thermal_diffusivity: Option<f64>,
    pub thermal: Option<bool>,
    pub initial_temperature: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocityKind {
    NoSlip,
    Slip,
    Inflow,
    Outflow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PressureKind {
    ZeroGradient,
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureKind {
    Adiabatic,
    Fixed,
    Flux,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaceConfig {
    #[serde(default = "no_slip")]
    pub velocity: VelocityKind,
    /// Inflow speed, or the peak speed of a parabolic profile.
    #[serde(default)]
    pub speed: f64,
    /// Transverse axes of a parabolic inflow profile; empty means uniform.
    #[serde(default)]
    pub profile_axes: Vec<usize>,
    #[serde(default = "zero_gradient")]
    pub pressure: PressureKind,
    #[serde(default)]
    pub pressure_value: f64,
    #[serde(default = "adiabatic")]
    pub temperature: TemperatureKind,
    #[serde(default)]
    pub temperature_value: f64,
}

fn no_slip() -> VelocityKind {
    VelocityKind::NoSlip
}

fn zero_gradient() -> PressureKind {
    PressureKind::ZeroGradient
}

fn adiabatic() -> TemperatureKind {
    TemperatureKind::Adiabatic
}

impl FaceConfig {
    pub fn wall() -> Self {
        FaceConfig {
            velocity: VelocityKind::NoSlip,
            speed: 0.0,
            profile_axes: Vec::new(),
            pressure: PressureKind::ZeroGradient,
            pressure_value: 0.0,
            temperature: TemperatureKind::Adiabatic,
            temperature_value: 0.0,
        }
    }
}

/// Per-face conditions; `x_lo` is the face at the low end of x.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryConfig {
    pub x_lo: Option<FaceConfig>,
    pub x_hi: Option<FaceConfig>,
    pub y_lo: Option<FaceConfig>,
    pub y_hi: Option<FaceConfig>,
    pub z_lo: Option<FaceConfig>,
    pub z_hi: Option<FaceConfig>,
    pub obstacle_temperature: Option<f64>,
}

impl BoundaryConfig {
    fn slot(&mut self, f: Face) -> &mut Option<FaceConfig> {
        match f {
            Face::XNeg => &mut self.x_lo,
            Face::XPos => &mut self.x_hi,
            Face::YNeg => &mut self.y_lo,
            Face::YPos => &mut self.y_hi,
            Face::ZNeg => &mut self.z_lo,
            Face::ZPos => &mut self.z_hi,
        }
    }

    pub fn face(&self, f: Face) -> Option<&FaceConfig> {
        match f {
            Face::XNeg => self.x_lo.as_ref(),
            Face::XPos => self.x_hi.as_ref(),
            Face::YNeg => self.y_lo.as_ref(),
            Face::YPos => self.y_hi.as_ref(),
            Face::ZNeg => self.z_lo.as_ref(),
            Face::ZPos => self.z_hi.as_ref(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObstacleKind {
    Cylinder,
    Cuboid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleConfig {
    pub kind: ObstacleKind,
    #[serde(default)]
    pub centre: [f64; 3],
    #[serde(default)]
    pub radius: f64,
    #[serde(default = "z_axis")]
    pub axis: usize,
    #[serde(default)]
    pub lo: [f64; 3],
    #[serde(default)]
    pub hi: [f64; 3],
}

fn z_axis() -> usize {
    2
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<String>,
    /// VTK cadence in steps; 0 writes only the final state.
    pub vtk_every: Option<usize>,
    pub csv: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<[f64; 3]>,
    /// Variable sampled at the probe, by name.
    pub probe_var: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub reps: Option<usize>,
    pub discard_first: Option<bool>,
    pub worker_counts: Option<Vec<usize>>,
}

/// Parses, fills defaults and validates.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let raw: RunConfig = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map(|s| line_col(text, s.start)).unwrap_or((0, 0));
        Error::Config {
            line,
            column,
            message: e.message().to_string(),
        }
    })?;
    let cfg = raw.resolve();
    cfg.validate().map_err(|e| match e {
        Error::Config { message, .. } => {
            let key = message.split('`').nth(1).unwrap_or("");
            let (line, column) = locate(text, key);
            Error::Config { line, column, message }
        }
        other => other,
    })?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// 1-based line and column of a byte offset.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

/// Position of the first `key = ...` assignment, matching the last dotted
/// component of `key`.
fn locate(text: &str, key: &str) -> (usize, usize) {
    let name = key.rsplit('.').next().unwrap_or(key);
    if name.is_empty() {
        return (0, 0);
    }
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim_start();
        if let Some(rest) = trimmed.strip_prefix(name) {
            if rest.trim_start().starts_with('=') {
                return (i + 1, line.len() - trimmed.len() + 1);
            }
        }
    }
    (0, 0)
}

fn range_error(key: &str, message: impl std::fmt::Display) -> Error {
    Error::Config {
        line: 0,
        column: 0,
        message: format!("`{key}` {message}"),
    }
}

macro_rules! fill {
    ($slot:expr, $value:expr) => {
        if $slot.is_none() {
            $slot = Some($value);
        }
    };
}

impl RunConfig {
    /// Minimal config for `scenario` with every default filled in.
    pub fn defaults(scenario: ScenarioKind) -> RunConfig {
        RunConfig {
            scenario,
            depth: None,
            workers: None,
            seed: None,
            grid: GridConfig::default(),
            solver: SolverConfig::default(),
            time: TimeConfig::default(),
            fluid: FluidConfig::default(),
            boundary: BoundaryConfig::default(),
            obstacle: None,
            output: OutputConfig::default(),
            bench: BenchConfig::default(),
        }
        .resolve()
    }

    /// Fills every unset field with the scenario default.
    pub fn resolve(mut self) -> RunConfig {
        let channel = self.scenario == ScenarioKind::Channel;
        let cavity = self.scenario == ScenarioKind::HeatedCavity;
        fill!(self.depth, 3);
        fill!(self.workers, 1);
        fill!(self.seed, 0);

        let g = &mut self.grid;
        let r = if channel { [2, 2, 1] } else { [2, 2, 2] };
        fill!(g.refinement_top, r);
        fill!(g.refinement, r);
        fill!(g.max_depth, 8);
        fill!(g.dgrid, if channel { [22, 4, 2] } else { [16, 16, 16] });
        fill!(g.domain_lo, [0.0; 3]);
        fill!(g.domain_hi, if channel { [2.2, 0.41, 0.2] } else { [1.0; 3] });

        let s = &mut self.solver;
        fill!(s.nu1, 2);
        fill!(s.nu2, 2);
        fill!(s.smoother, SmootherKind::RedBlackGaussSeidel);
        fill!(s.omega, 0.8);
        fill!(s.tol, if self.scenario.is_flow() { 1e-6 } else { 1e-8 });
        fill!(s.max_cycles, 100);
        fill!(s.coarse_solver, if channel { CoarseKind::ConjugateGradient } else { CoarseKind::Smoother });
        fill!(s.coarsest_sweeps, if channel { 500 } else { 50 });
        fill!(s.prolongation, ProlongationKind::Trilinear);

        let t = &mut self.time;
        fill!(t.scheme, SchemeKind::AdamsBashforth2);
        fill!(t.cfl_safety, 0.5);
        fill!(t.dt_max, 0.01);
        fill!(t.steps, if channel { 4000 } else if cavity { 200 } else { 0 });

        let f = &mut self.fluid;
        let d = FluidProperties::default();
        fill!(f.rho_inf, d.rho_inf);
        fill!(f.mu, d.mu);
        fill!(f.beta, if cavity { 3.4e-3 } else { 0.0 });
        fill!(f.t_ref, 0.0);
        fill!(f.gravity, if cavity { [0.0, 0.0, -9.81] } else { [0.0; 3] });
        fill!(f.thermal_diffusivity, if cavity { 1.4e-3 } else { 0.0 });
        fill!(f.thermal, cavity);
        fill!(f.initial_temperature, 0.0);

        let b = &mut self.boundary;
        for face in Face::ALL {
            let mut spec = FaceConfig::wall();
            match (self.scenario, face) {
                (ScenarioKind::LaplaceCube, _) => {
                    spec.pressure = PressureKind::Fixed;
                    spec.pressure_value = if face.axis() == 0 { 1.0 } else { 0.0 };
                }
                (ScenarioKind::Channel, Face::XNeg) => {
                    spec.velocity = VelocityKind::Inflow;
                    spec.speed = 1.5;
                    spec.profile_axes = vec![1];
                }
                (ScenarioKind::Channel, Face::XPos) => {
                    spec.velocity = VelocityKind::Outflow;
                    spec.pressure = PressureKind::Fixed;
                }
                (ScenarioKind::Channel, Face::ZNeg | Face::ZPos) => spec.velocity = VelocityKind::Slip,
                (ScenarioKind::HeatedCavity, Face::XNeg | Face::XPos) => {
                    spec.temperature = TemperatureKind::Fixed;
                    spec.temperature_value = if face == Face::XNeg { 0.5 } else { -0.5 };
                }
                _ => {}
            }
            fill!(*b.slot(face), spec);
        }

        if channel && self.obstacle.is_none() {
            self.obstacle = Some(ObstacleConfig {
                kind: ObstacleKind::Cylinder,
                centre: [0.2, 0.2, 0.1],
                radius: 0.05,
                axis: 2,
                lo: [0.0; 3],
                hi: [0.0; 3],
            });
        }

        let o = &mut self.output;
        fill!(o.dir, "output".to_string());
        fill!(o.vtk_every, 0);
        fill!(o.csv, true);
        if o.probe.is_none() {
            o.probe = match self.scenario {
                ScenarioKind::Channel => Some([0.5, 0.2, 0.1]),
                ScenarioKind::HeatedCavity => Some([0.1, 0.5, 0.5]),
                ScenarioKind::LaplaceCube => None,
            };
        }
        fill!(o.probe_var, if cavity { "u3" } else if channel { "u2" } else { "p" }.to_string());

        let bench = &mut self.bench;
        fill!(bench.reps, 5);
        fill!(bench.discard_first, true);
        fill!(bench.worker_counts, vec![1, 2, 4, 8]);
        self
    }

    /// Range checks on a resolved config. Errors name the offending key.
    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        let spec = self.refinement().map_err(|e| range_error("grid.refinement", e))?;
        let depth = self.depth();
        if depth > spec.d_max {
            return Err(range_error("depth", format!("{depth} exceeds grid.max_depth {}", spec.d_max)));
        }
        if self.workers() == 0 {
            return Err(range_error("workers", "must be >= 1"));
        }
        if g.dgrid.unwrap().iter().any(|&s| s < 2) {
            return Err(range_error("grid.dgrid", "needs >= 2 cells per axis"));
        }
        let dom = self.domain();
        if (0..3).any(|a| !(dom.hi[a] > dom.lo[a])) {
            return Err(range_error("grid.domain_hi", "must exceed domain_lo on every axis"));
        }
        let s = &self.solver;
        if !(s.tol.unwrap() > 0.0) {
            return Err(range_error("solver.tol", "must be > 0"));
        }
        if s.nu1.unwrap() + s.nu2.unwrap() == 0 {
            return Err(range_error("solver.nu1", "nu1 + nu2 must be >= 1"));
        }
        let omega = s.omega.unwrap();
        if !(omega > 0.0 && omega <= 1.0) {
            return Err(range_error("solver.omega", "must lie in (0, 1]"));
        }
        let t = &self.time;
        let c = t.cfl_safety.unwrap();
        if !(c > 0.0 && c <= 1.0) {
            return Err(range_error("time.cfl_safety", "must lie in (0, 1]"));
        }
        if !(t.dt_max.unwrap() > 0.0) {
            return Err(range_error("time.dt_max", "must be > 0"));
        }
        if t.dt.is_some_and(|dt| !(dt > 0.0)) {
            return Err(range_error("time.dt", "must be > 0"));
        }
        let f = &self.fluid;
        if !(f.rho_inf.unwrap() > 0.0) {
            return Err(range_error("fluid.rho_inf", "must be > 0"));
        }
        if !(f.mu.unwrap() >= 0.0) {
            return Err(range_error("fluid.mu", "must be >= 0"));
        }
        if !(f.thermal_diffusivity.unwrap() >= 0.0) {
            return Err(range_error("fluid.thermal_diffusivity", "must be >= 0"));
        }
        for face in Face::ALL {
            let fc = self.boundary.face(face).unwrap();
            if fc.profile_axes.iter().any(|&a| a > 2 || a == face.axis()) {
                return Err(range_error("boundary.profile_axes", format!("on face {face} must name transverse axes")));
            }
        }
        if let Some(o) = &self.obstacle {
            if o.axis > 2 {
                return Err(range_error("obstacle.axis", "must be 0, 1 or 2"));
            }
            if o.kind == ObstacleKind::Cylinder && !(o.radius > 0.0) {
                return Err(range_error("obstacle.radius", "must be > 0"));
            }
        }
        crate::dgrid::Var::from_name(self.output.probe_var.as_deref().unwrap())
            .map_err(|_| range_error("output.probe_var", "is not a field name"))?;
        if self.bench.worker_counts.as_ref().unwrap().contains(&0) {
            return Err(range_error("bench.worker_counts", "entries must be >= 1"));
        }
        Ok(())
    }

    /// Refuses hierarchies whose resident memory would exceed
    /// [`MEMORY_LIMIT`]; the message quotes the cell count.
    pub fn check_memory(&self) -> Result<()> {
        let (cells, bytes) = self.memory_estimate()?;
        if bytes > u128::from(MEMORY_LIMIT) {
            return Err(range_error(
                "depth",
                format!(
                    "{} needs {cells} cells (~{:.1} GiB resident), above the {} GiB limit; use --dry-run to only count",
                    self.depth(),
                    bytes as f64 / (1u64 << 30) as f64,
                    MEMORY_LIMIT >> 30
                ),
            ));
        }
        Ok(())
    }

    /// Total cells over every l-grid and the estimated resident bytes.
    pub fn memory_estimate(&self) -> Result<(u128, u128)> {
        let spec = self.refinement()?;
        let c = count_cells(&spec, self.depth(), self.dgrid(), 9)?;
        let halo: u128 = self.dgrid().iter().map(|&s| (s + 2) as u128).product();
        let grids = count_grids(&spec, self.depth())?.total_lgrids;
        Ok((c.total_cells, grids * halo * u128::from(BYTES_PER_CELL)))
    }

    pub fn depth(&self) -> u8 {
        self.depth.unwrap_or(3)
    }

    pub fn workers(&self) -> usize {
        self.workers.unwrap_or(1)
    }

    pub fn dgrid(&self) -> [usize; 3] {
        self.grid.dgrid.unwrap_or([16; 3])
    }

    pub fn refinement(&self) -> Result<RefinementSpec> {
        let g = &self.grid;
        RefinementSpec::new(g.refinement_top.unwrap_or([2; 3]), g.refinement.unwrap_or([2; 3]), g.max_depth.unwrap_or(8))
    }

    pub fn domain(&self) -> DomainBox {
        DomainBox {
            lo: self.grid.domain_lo.unwrap_or([0.0; 3]),
            hi: self.grid.domain_hi.unwrap_or([1.0; 3]),
        }
    }

    pub fn mg(&self) -> MGConfig {
        let s = &self.solver;
        let d = MGConfig::default();
        MGConfig {
            nu1: s.nu1.unwrap_or(d.nu1),
            nu2: s.nu2.unwrap_or(d.nu2),
            smoother: match s.smoother.unwrap_or(SmootherKind::RedBlackGaussSeidel) {
                SmootherKind::RedBlackGaussSeidel => Smoother::RedBlackGaussSeidel,
                SmootherKind::Jacobi => Smoother::Jacobi { omega: s.omega.unwrap_or(0.8) },
            },
            tol: s.tol.unwrap_or(d.tol),
            max_cycles: s.max_cycles.unwrap_or(d.max_cycles),
            coarsest_sweeps: s.coarsest_sweeps.unwrap_or(d.coarsest_sweeps),
            coarse_solver: match s.coarse_solver.unwrap_or(CoarseKind::Smoother) {
                CoarseKind::Smoother => CoarseSolver::Smoother,
                CoarseKind::ConjugateGradient => CoarseSolver::ConjugateGradient,
            },
            prolongation: self.interpolation(),
        }
    }

    pub fn interpolation(&self) -> Interpolation {
        match self.solver.prolongation.unwrap_or(ProlongationKind::Trilinear) {
            ProlongationKind::Trilinear => Interpolation::Trilinear,
            ProlongationKind::PiecewiseConstant => Interpolation::PiecewiseConstant,
        }
    }

    pub fn fluid(&self) -> FluidProperties {
        let f = &self.fluid;
        let d = FluidProperties::default();
        FluidProperties {
            rho_inf: f.rho_inf.unwrap_or(d.rho_inf),
            mu: f.mu.unwrap_or(d.mu),
            beta: f.beta.unwrap_or(d.beta),
            t_ref: f.t_ref.unwrap_or(d.t_ref),
            gravity: f.gravity.unwrap_or(d.gravity),
            thermal_diffusivity: f.thermal_diffusivity.unwrap_or(d.thermal_diffusivity),
        }
    }

    pub fn integrator(&self) -> Result<TimeIntegrator> {
        let t = &self.time;
        let scheme = match t.scheme.unwrap_or(SchemeKind::AdamsBashforth2) {
            SchemeKind::Euler => Scheme::Euler,
            SchemeKind::AdamsBashforth2 => Scheme::AdamsBashforth2,
        };
        match t.dt {
            Some(dt) => TimeIntegrator::fixed(scheme, dt),
            None => TimeIntegrator::new(scheme, t.cfl_safety.unwrap_or(0.5), t.dt_max.unwrap_or(0.01)),
        }
    }

    pub fn boundary_spec(&self) -> BoundarySpec {
        let dom = self.domain();
        let mut bc = BoundarySpec::closed_box();
        bc.obstacle_temperature = self.boundary.obstacle_temperature;
        for face in Face::ALL {
            let fc = self.boundary.face(face).cloned().unwrap_or_else(FaceConfig::wall);
            let out = bc.face_mut(face);
            *out = FaceSpec::wall();
            out.velocity = match fc.velocity {
                VelocityKind::NoSlip => VelocityBc::NoSlip,
                VelocityKind::Slip => VelocityBc::Slip,
                VelocityKind::Outflow => VelocityBc::Outflow,
                VelocityKind::Inflow if fc.profile_axes.is_empty() => VelocityBc::Inflow(FaceProfile::uniform(fc.speed)),
                VelocityKind::Inflow => {
                    let axes = [0, 1, 2].map(|a| fc.profile_axes.contains(&a));
                    VelocityBc::Inflow(FaceProfile::parabolic(fc.speed, dom.lo, dom.hi, axes))
                }
            };
            out.pressure = match fc.pressure {
                PressureKind::ZeroGradient => PressureBc::ZeroGradient,
                PressureKind::Fixed => PressureBc::Fixed(fc.pressure_value),
            };
            out.temperature = match fc.temperature {
                TemperatureKind::Adiabatic => TemperatureBc::Adiabatic,
                TemperatureKind::Fixed => TemperatureBc::Fixed(fc.temperature_value),
                TemperatureKind::Flux => TemperatureBc::Flux(fc.temperature_value),
            };
        }
        bc
    }

    /// TOML text of this config.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidArgument(format!("cannot serialise config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config("scenario = \"laplace_cube\"\n").unwrap();
        assert_eq!(cfg.depth, Some(3));
        assert_eq!(cfg.workers, Some(1));
        assert_eq!(cfg.grid.dgrid, Some([16, 16, 16]));
        assert_eq!(cfg.boundary.x_lo.as_ref().unwrap().pressure_value, 1.0);
        assert_eq!(cfg.boundary.y_hi.as_ref().unwrap().pressure_value, 0.0);
    }

    #[test]
    fn depth_beyond_max_names_the_field() {
        let text = "scenario = \"laplace_cube\"\ndepth = 9\n[grid]\nmax_depth = 8\n";
        match parse_config(text) {
            Err(Error::Config { line, column, message }) => {
                assert!(message.contains("`depth`"), "{message}");
                assert_eq!((line, column), (2, 1));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn syntax_and_unknown_keys_report_positions() {
        match parse_config("scenario = \"channel\"\n[solver]\ntoll = 1e-6\n") {
            Err(Error::Config { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("toll"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        match parse_config("scenario = \"channel\"\ndepth = \"three\"\n") {
            Err(Error::Config { line, column, .. }) => assert_eq!((line, column), (2, 9)),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_config("scenario = \"pipe\"\n"), Err(Error::Config { line: 1, .. })));
    }

    #[test]
    fn serialisation_round_trips() {
        for kind in [ScenarioKind::LaplaceCube, ScenarioKind::Channel, ScenarioKind::HeatedCavity] {
            let cfg = RunConfig::defaults(kind);
            let text = cfg.to_toml().unwrap();
            let again = parse_config(&text).unwrap();
            assert_eq!(again, cfg);
            assert_eq!(again.to_toml().unwrap(), text);
        }
    }

    #[test]
    fn depth_eight_is_refused() {
        let cfg = parse_config("scenario = \"laplace_cube\"\ndepth = 8\n").unwrap();
        let err = cfg.check_memory().unwrap_err().to_string();
        assert!(err.contains("78536544256"), "{err}");
        assert!(parse_config("scenario = \"laplace_cube\"\ndepth = 2\n").unwrap().check_memory().is_ok());
    }
}
