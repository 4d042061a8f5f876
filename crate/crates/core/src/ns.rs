//! Fractional-step incompressible flow with Boussinesq coupling.
//!
//! Momentum and temperature use the conservative flux form: face velocities
//! are the mean of the two adjacent cells, the transported value is taken
//! from the upwind cell, diffusion is central. After the pressure solve the
//! cell velocities are corrected with the central pressure gradient.

use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use crate::dgrid::{Array3, BlockGeometry, FluidProperties, Var};
use crate::error::{Error, Result};
use crate::exchange::{ExchangeMode, Interpolation};
use crate::mg::{self, FaceBc, MGConfig, PoissonProblem, SolveReport};
use crate::runtime::{Block, Boundary, GhostRule, PlanId, Slot, Worker, WorkerPool};
use crate::scalar::Real;
use crate::topology::Face;

/// Position-dependent value on a boundary face.
#[derive(Clone)]
pub struct FaceProfile(pub Arc<dyn Fn([f64; 3]) -> f64 + Send + Sync>);

impl FaceProfile {
    pub fn new(f: impl Fn([f64; 3]) -> f64 + Send + Sync + 'static) -> Self {
        FaceProfile(Arc::new(f))
    }

    pub fn uniform(v: f64) -> Self {
        Self::new(move |_| v)
    }

    /// `peak * prod 4 s (1 - s)` over the flagged axes, `s` the position
    /// scaled to `[0, 1]` between `lo` and `hi`.
    pub fn parabolic(peak: f64, lo: [f64; 3], hi: [f64; 3], axes: [bool; 3]) -> Self {
        Self::new(move |x| {
            let mut v = peak;
            for a in 0..3 {
                if axes[a] {
                    let s = (x[a] - lo[a]) / (hi[a] - lo[a]);
                    v *= 4.0 * s * (1.0 - s);
                }
            }
            v
        })
    }

    pub fn at(&self, x: [f64; 3]) -> f64 {
        (self.0)(x)
    }
}

impl fmt::Debug for FaceProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("FaceProfile(..)")
    }
}

#[derive(Clone, Debug)]
pub enum VelocityBc {
    NoSlip,
    /// Zero normal velocity, zero tangential stress.
    Slip,
    /// Inward normal speed given by the profile; tangential velocity zero.
    Inflow(FaceProfile),
    /// Zero normal gradient of every component.
    Outflow,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PressureBc {
    ZeroGradient,
    Fixed(f64),
}

#[derive(Clone, Debug)]
pub enum TemperatureBc {
    Fixed(f64),
    FixedProfile(FaceProfile),
    Adiabatic,
    /// Outward normal gradient of T.
    Flux(f64),
}

#[derive(Clone, Debug)]
pub struct FaceSpec {
    pub velocity: VelocityBc,
    pub pressure: PressureBc,
    pub temperature: TemperatureBc,
}

impl FaceSpec {
    pub fn wall() -> Self {
        FaceSpec {
            velocity: VelocityBc::NoSlip,
            pressure: PressureBc::ZeroGradient,
            temperature: TemperatureBc::Adiabatic,
        }
    }
}

/// Conditions on every hull face and on obstacle surfaces.
#[derive(Clone, Debug)]
pub struct BoundarySpec {
    /// Indexed by [`Face::index`].
    pub faces: [FaceSpec; 6],
    /// Obstacle surface temperature; `None` means adiabatic.
    pub obstacle_temperature: Option<f64>,
}

impl BoundarySpec {
    pub fn closed_box() -> Self {
        BoundarySpec {
            faces: std::array::from_fn(|_| FaceSpec::wall()),
            obstacle_temperature: None,
        }
    }

    pub fn face(&self, f: Face) -> &FaceSpec {
        &self.faces[f.index()]
    }

    pub fn face_mut(&mut self, f: Face) -> &mut FaceSpec {
        &mut self.faces[f.index()]
    }

    /// The pressure Poisson problem these conditions imply.
    pub fn poisson(&self, interface: Interpolation) -> PoissonProblem {
        PoissonProblem {
            faces: std::array::from_fn(|i| match self.faces[i].pressure {
                PressureBc::ZeroGradient => FaceBc::Neumann(0.0),
                PressureBc::Fixed(v) => FaceBc::Dirichlet(v),
            }),
            interface,
        }
    }
}

fn component(v: Var) -> Option<usize> {
    match v {
        Var::U1 | Var::U1Star => Some(0),
        Var::U2 | Var::U2Star => Some(1),
        Var::U3 | Var::U3Star => Some(2),
        _ => None,
    }
}

impl Boundary for BoundarySpec {
    fn rule(&self, slot: Slot, _: &BlockGeometry, face: Face) -> GhostRule<'_> {
        let spec = self.face(face);
        let Slot::Var(var) = slot else {
            return GhostRule::Copy;
        };
        if let Some(c) = component(var) {
            let normal = c == face.axis();
            return match &spec.velocity {
                VelocityBc::NoSlip => GhostRule::Reflect(0.0),
                VelocityBc::Slip if normal => GhostRule::Reflect(0.0),
                VelocityBc::Slip => GhostRule::Copy,
                VelocityBc::Inflow(p) if normal => GhostRule::ReflectWith(&*p.0, -(face.sign() as f64)),
                VelocityBc::Inflow(_) => GhostRule::Reflect(0.0),
                VelocityBc::Outflow => GhostRule::Copy,
            };
        }
        match var {
            Var::P => match spec.pressure {
                PressureBc::ZeroGradient => GhostRule::Copy,
                PressureBc::Fixed(v) => GhostRule::Reflect(v),
            },
            Var::T => match &spec.temperature {
                TemperatureBc::Fixed(v) => GhostRule::Reflect(*v),
                TemperatureBc::FixedProfile(p) => GhostRule::ReflectWith(&*p.0, 1.0),
                TemperatureBc::Adiabatic => GhostRule::Copy,
                TemperatureBc::Flux(g) => GhostRule::Gradient(*g),
            },
            _ => GhostRule::Keep,
        }
    }
}

/// Solid region for voxelisation.
pub trait Shape: Sync {
    fn contains(&self, x: [f64; 3]) -> bool;
}

/// Infinite cylinder parallel to `axis`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cylinder {
    pub centre: [f64; 3],
    pub radius: f64,
    pub axis: usize,
}

impl Shape for Cylinder {
    fn contains(&self, x: [f64; 3]) -> bool {
        let r2: f64 = (0..3)
            .filter(|&a| a != self.axis)
            .map(|a| (x[a] - self.centre[a]).powi(2))
            .sum();
        r2 < self.radius * self.radius
    }
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cuboid {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Shape for Cuboid {
    fn contains(&self, x: [f64; 3]) -> bool {
        (0..3).all(|a| x[a] > self.lo[a] && x[a] < self.hi[a])
    }
}

/// Centre-sampled solid mask over a block, halo included.
pub fn voxelise(geom: &BlockGeometry, shape: &dyn Shape) -> Option<Array3<u8>> {
    voxelise_covered(geom, shape, [1; 3])
}

/// Mask where a cell is solid only if all `sub` sample points of a uniform
/// sub-lattice inside it are. Coarse levels use the finest spacing so that
/// they never block flow the leaves let through.
pub fn voxelise_covered(geom: &BlockGeometry, shape: &dyn Shape, sub: [usize; 3]) -> Option<Array3<u8>> {
    let mut m = Array3::filled(geom.size, 0u8);
    let s = geom.size.map(|x| x as isize);
    let mut any = false;
    for k in -1..=s[2] {
        for j in -1..=s[1] {
            for i in -1..=s[0] {
                let lo = geom.centre([i, j, k]);
                let lo = [0, 1, 2].map(|a| lo[a] - 0.5 * geom.spacing[a]);
                let mut all = true;
                'cells: for sk in 0..sub[2] {
                    for sj in 0..sub[1] {
                        for si in 0..sub[0] {
                            let q = [si, sj, sk];
                            let x = [0, 1, 2].map(|a| lo[a] + (q[a] as f64 + 0.5) * geom.spacing[a] / sub[a] as f64);
                            if !shape.contains(x) {
                                all = false;
                                break 'cells;
                            }
                        }
                    }
                }
                if all {
                    m.set(i, j, k, 1);
                    any = true;
                }
            }
        }
    }
    any.then_some(m)
}

/// Masks every block of the pool and zeroes velocities inside the solid.
pub fn apply_obstacle<T: Real>(pool: &mut WorkerPool<T>, shape: &dyn Shape, temperature: Option<f64>) {
    let mut finest = [f64::INFINITY; 3];
    for (_, b) in pool.blocks() {
        for a in 0..3 {
            finest[a] = finest[a].min(b.geom.spacing[a]);
        }
    }
    pool.for_each_block_mut(|b| {
        let sub = [0, 1, 2].map(|a| (b.geom.spacing[a] / finest[a]).round().max(1.0) as usize);
        b.solid = voxelise_covered(&b.geom, shape, sub);
        if let Some(m) = b.solid.clone() {
            for c in b.fields[Var::U1].interior().collect::<Vec<_>>() {
                if m.at(c) != 0 {
                    for v in [Var::U1, Var::U2, Var::U3, Var::U1Star, Var::U2Star, Var::U3Star] {
                        b.fields[v].put(c, T::zero());
                    }
                    if let Some(t) = temperature {
                        b.fields[Var::T].put(c, T::lit(t));
                    }
                }
            }
        }
    });
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    Euler,
    AdamsBashforth2,
}

/// Time-integration state; every worker holds an identical copy.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeIntegrator {
    pub scheme: Scheme,
    pub cfl_safety: f64,
    pub dt_max: f64,
    /// Overrides the stability bound when set.
    pub fixed_dt: Option<f64>,
    /// Step size of the previous step, `None` before the first step.
    pub prev_dt: Option<f64>,
    pub steps: u64,
    pub time: f64,
}

impl TimeIntegrator {
    pub fn new(scheme: Scheme, cfl_safety: f64, dt_max: f64) -> Result<Self> {
        if !(cfl_safety > 0.0 && cfl_safety <= 1.0) {
            return Err(Error::InvalidArgument(format!("cfl_safety {cfl_safety} outside (0, 1]")));
        }
        if !(dt_max > 0.0) {
            return Err(Error::InvalidArgument("dt_max must be > 0".into()));
        }
        Ok(TimeIntegrator {
            scheme,
            cfl_safety,
            dt_max,
            fixed_dt: None,
            prev_dt: None,
            steps: 0,
            time: 0.0,
        })
    }

    pub fn fixed(scheme: Scheme, dt: f64) -> Result<Self> {
        let mut t = Self::new(scheme, 1.0, dt)?;
        t.fixed_dt = Some(dt);
        Ok(t)
    }

    /// Weights of the current and previous tendency for a step of `dt`.
    pub fn weights(&self, dt: f64) -> (f64, f64) {
        match (self.scheme, self.prev_dt) {
            (Scheme::AdamsBashforth2, Some(dp)) => {
                let r = dt / (2.0 * dp);
                (1.0 + r, -r)
            }
            _ => (1.0, 0.0),
        }
    }
}

/// Everything a time step needs besides the fields.
#[derive(Clone, Debug)]
pub struct FlowConfig {
    pub props: FluidProperties,
    pub bc: BoundarySpec,
    pub mg: MGConfig,
    pub thermal: bool,
    /// Coarse-to-fine operator for all leaf exchanges.
    pub interface: Interpolation,
}

impl FlowConfig {
    pub fn poisson(&self) -> PoissonProblem {
        self.bc.poisson(self.interface)
    }
}

/// Wall seconds per phase of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepTimings {
    pub exchange: f64,
    pub momentum: f64,
    pub temperature: f64,
    pub rhs: f64,
    pub poisson: f64,
    pub correction: f64,
    pub diagnostics: f64,
    pub total: f64,
}

impl StepTimings {
    pub fn phases(&self) -> [f64; 7] {
        [
            self.exchange,
            self.momentum,
            self.temperature,
            self.rhs,
            self.poisson,
            self.correction,
            self.diagnostics,
        ]
    }

    pub fn poisson_share(&self) -> f64 {
        if self.total > 0.0 {
            self.poisson / self.total
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub time: f64,
    pub dt: f64,
    pub timings: StepTimings,
    pub solve: SolveReport,
    /// RMS of the face-velocity divergence of the projected field.
    pub divergence: f64,
    /// RMS of the central-difference divergence of the cell velocities.
    pub cell_divergence: f64,
}

/// Value seen through a solid neighbour.
#[derive(Clone, Copy)]
enum Wall<T> {
    Negate,
    Mirror,
    Fixed(T),
}

impl<T: Real> Wall<T> {
    #[inline]
    fn apply(self, own: T) -> T {
        match self {
            Wall::Negate => -own,
            Wall::Mirror => own,
            Wall::Fixed(v) => v + v - own,
        }
    }
}

struct Cells<'a, T> {
    mask: Option<&'a [u8]>,
    st: [usize; 3],
    u: [&'a [T]; 3],
}

impl<T: Real> Cells<'_, T> {
    #[inline]
    fn solid(&self, n: usize) -> bool {
        self.mask.is_some_and(|m| m[n] != 0)
    }

    #[inline]
    fn nb(&self, a: &[T], n: usize, m: usize, wall: Wall<T>) -> T {
        if self.solid(m) {
            wall.apply(a[n])
        } else {
            a[m]
        }
    }

    /// `-div(u phi) + diff * lap(phi)` at cell `n`.
    #[inline]
    fn transport(&self, phi: &[T], n: usize, inv_h: [T; 3], inv_h2: [T; 3], diff: T, wall: Wall<T>) -> T {
        let half = T::lit(0.5);
        let mut conv = T::zero();
        let mut lap = T::zero();
        let c = phi[n];
        for a in 0..3 {
            let ua = self.u[a];
            let (lo, hi) = (n - self.st[a], n + self.st[a]);
            let (plo, phi_hi) = (self.nb(phi, n, lo, wall), self.nb(phi, n, hi, wall));
            let uhi = half * (ua[n] + self.nb(ua, n, hi, Wall::Negate));
            let ulo = half * (ua[n] + self.nb(ua, n, lo, Wall::Negate));
            let fhi = if uhi >= T::zero() { uhi * c } else { uhi * phi_hi };
            let flo = if ulo >= T::zero() { ulo * plo } else { ulo * c };
            conv += (fhi - flo) * inv_h[a];
            lap += (phi_hi - c - c + plo) * inv_h2[a];
        }
        diff * lap - conv
    }
}

const TENDENCIES: [Var; 4] = [Var::U1, Var::U2, Var::U3, Var::T];

fn ensure_history<T: Real>(b: &mut Block<T>) {
    if b.history.len() != TENDENCIES.len() {
        b.history = (0..TENDENCIES.len()).map(|_| Array3::zeros(b.geom.size)).collect();
    }
}

fn temperature_wall<T: Real>(bc: &BoundarySpec) -> Wall<T> {
    match bc.obstacle_temperature {
        Some(t) => Wall::Fixed(T::lit(t)),
        None => Wall::Mirror,
    }
}

/// Momentum tendency and `u* = u + dt (a H^n + b H^{n-1})` on one block.
/// Ghosts of u and T must be current.
pub fn intermediate_velocity_block<T: Real>(b: &mut Block<T>, cfg: &FlowConfig, dt: f64, weights: (f64, f64)) {
    ensure_history(b);
    let nu = T::lit(cfg.props.kinematic_viscosity());
    let inv_h = b.geom.spacing.map(|h| T::lit(1.0 / h));
    let inv_h2 = b.geom.spacing.map(|h| T::lit(1.0 / (h * h)));
    let force = cfg.props.gravity.map(|g| T::lit(-g * cfg.props.beta));
    let t_ref = T::lit(cfg.props.t_ref);
    let (wa, wb) = (T::lit(weights.0), T::lit(weights.1));
    let dt = T::lit(dt);
    let size = b.geom.size;
    let Block { fields, solid, history, .. } = b;
    let arrays = fields.arrays_mut();
    let (head, stars) = arrays.split_at_mut(Var::U1Star.index());
    let first = &head[0];
    let st = [0, 1, 2].map(|a| first.stride(a));
    let base = first.idx(0, 0, 0);
    let cells = Cells {
        mask: solid.as_ref().map(|m| m.as_slice()),
        st,
        u: [head[0].as_slice(), head[1].as_slice(), head[2].as_slice()],
    };
    let temp = head[Var::T.index()].as_slice();
    for comp in 0..3 {
        let u = cells.u[comp];
        let hist = history[comp].as_mut_slice();
        let out = stars[comp].as_mut_slice();
        for k in 0..size[2] {
            for j in 0..size[1] {
                let row = base + j * st[1] + k * st[2];
                for n in row..row + size[0] {
                    if cells.solid(n) {
                        out[n] = T::zero();
                        hist[n] = T::zero();
                        continue;
                    }
                    let mut h = cells.transport(u, n, inv_h, inv_h2, nu, Wall::Negate);
                    if cfg.thermal {
                        h += force[comp] * (temp[n] - t_ref);
                    }
                    out[n] = u[n] + dt * (wa * h + wb * hist[n]);
                    hist[n] = h;
                }
            }
        }
    }
}

/// Advances T on one block; ghosts of u and T must be current.
pub fn temperature_step_block<T: Real>(b: &mut Block<T>, cfg: &FlowConfig, dt: f64, weights: (f64, f64)) {
    ensure_history(b);
    let kappa = T::lit(cfg.props.thermal_diffusivity);
    let inv_h = b.geom.spacing.map(|h| T::lit(1.0 / h));
    let inv_h2 = b.geom.spacing.map(|h| T::lit(1.0 / (h * h)));
    let (wa, wb) = (T::lit(weights.0), T::lit(weights.1));
    let dt = T::lit(dt);
    let wall = temperature_wall::<T>(&cfg.bc);
    let size = b.geom.size;
    let Block { fields, solid, history, scratch, .. } = b;
    let arrays = fields.arrays();
    let first = &arrays[0];
    let st = [0, 1, 2].map(|a| first.stride(a));
    let base = first.idx(0, 0, 0);
    let cells = Cells {
        mask: solid.as_ref().map(|m| m.as_slice()),
        st,
        u: [arrays[0].as_slice(), arrays[1].as_slice(), arrays[2].as_slice()],
    };
    let temp = arrays[Var::T.index()].as_slice();
    let hist = history[3].as_mut_slice();
    let out = scratch[2].as_mut_slice();
    for k in 0..size[2] {
        for j in 0..size[1] {
            let row = base + j * st[1] + k * st[2];
            for n in row..row + size[0] {
                if cells.solid(n) {
                    out[n] = match wall {
                        Wall::Fixed(t) => t,
                        _ => temp[n],
                    };
                    continue;
                }
                let h = cells.transport(temp, n, inv_h, inv_h2, kappa, wall);
                out[n] = temp[n] + dt * (wa * h + wb * hist[n]);
                hist[n] = h;
            }
        }
    }
    let t = &mut fields[Var::T];
    let tmp = &scratch[2];
    for c in tmp.interior() {
        t.put(c, tmp.at(c));
    }
}

/// `rhs = rho / dt * div u*` (central) on one block; ghosts of u* current.
pub fn pressure_rhs_block<T: Real>(b: &mut Block<T>, props: &FluidProperties, dt: f64) {
    let scale = props.rho_inf / dt;
    let inv_2h = b.geom.spacing.map(|h| T::lit(scale / (2.0 * h)));
    let size = b.geom.size;
    let Block { fields, solid, .. } = b;
    let arrays = fields.arrays_mut();
    let (head, rhs) = arrays.split_at_mut(Var::Rhs.index());
    let first = &head[0];
    let st = [0, 1, 2].map(|a| first.stride(a));
    let base = first.idx(0, 0, 0);
    let cells = Cells {
        mask: solid.as_ref().map(|m| m.as_slice()),
        st,
        u: [
            head[Var::U1Star.index()].as_slice(),
            head[Var::U2Star.index()].as_slice(),
            head[Var::U3Star.index()].as_slice(),
        ],
    };
    let out = rhs[0].as_mut_slice();
    for k in 0..size[2] {
        for j in 0..size[1] {
            let row = base + j * st[1] + k * st[2];
            for n in row..row + size[0] {
                if cells.solid(n) {
                    out[n] = T::zero();
                    continue;
                }
                let mut d = T::zero();
                for a in 0..3 {
                    let u = cells.u[a];
                    d += (cells.nb(u, n, n + st[a], Wall::Negate) - cells.nb(u, n, n - st[a], Wall::Negate)) * inv_2h[a];
                }
                out[n] = d;
            }
        }
    }
}

/// `u = u* - dt / rho * grad p` (central) on one block; ghosts of p current.
pub fn correct_velocity_block<T: Real>(b: &mut Block<T>, props: &FluidProperties, dt: f64) {
    let inv_2h = b.geom.spacing.map(|h| T::lit(dt / props.rho_inf / (2.0 * h)));
    let size = b.geom.size;
    let Block { fields, solid, .. } = b;
    let mask = solid.as_ref().map(|m| m.as_slice());
    let arrays = fields.arrays_mut();
    let (head, tail) = arrays.split_at_mut(Var::T.index());
    let p = head[Var::P.index()].as_slice().to_vec();
    let st = [0, 1, 2].map(|a| head[0].stride(a));
    let base = head[0].idx(0, 0, 0);
    let is_solid = |n: usize| mask.is_some_and(|m| m[n] != 0);
    for a in 0..3 {
        let star = tail[1 + a].as_slice();
        let u = head[a].as_mut_slice();
        for k in 0..size[2] {
            for j in 0..size[1] {
                let row = base + j * st[1] + k * st[2];
                for n in row..row + size[0] {
                    if is_solid(n) {
                        u[n] = T::zero();
                        continue;
                    }
                    let (lo, hi) = (n - st[a], n + st[a]);
                    let ph = if is_solid(hi) { p[n] } else { p[hi] };
                    let pl = if is_solid(lo) { p[n] } else { p[lo] };
                    u[n] = star[n] - (ph - pl) * inv_2h[a];
                }
            }
        }
    }
}

/// Sum of squares and count of the face divergence of the projected face
/// velocities (`mean(u*) - dt/rho dp/dn`) and of the central divergence of
/// the cell velocities. Ghosts of u*, u and p current.
pub fn divergence_block<T: Real>(b: &Block<T>, props: &FluidProperties, dt: f64) -> [f64; 3] {
    let g = dt / props.rho_inf;
    let size = b.geom.size;
    let f = &b.fields;
    let st = [0, 1, 2].map(|a| f[Var::U1].stride(a));
    let base = f[Var::U1].idx(0, 0, 0);
    let mask = b.solid.as_ref().map(|m| m.as_slice());
    let is_solid = |n: usize| mask.is_some_and(|m| m[n] != 0);
    let p = f[Var::P].as_slice();
    let mut sums = [0.0, 0.0, 0.0];
    for k in 0..size[2] {
        for j in 0..size[1] {
            let row = base + j * st[1] + k * st[2];
            for n in row..row + size[0] {
                if is_solid(n) {
                    continue;
                }
                let mut face = 0.0;
                let mut cell = 0.0;
                for a in 0..3 {
                    let h = b.geom.spacing[a];
                    let us = f[Var::VELOCITY_STAR[a]].as_slice();
                    let u = f[Var::VELOCITY[a]].as_slice();
                    // Outward face velocity towards neighbour m.
                    let flux = |m: usize, sign: f64| -> f64 {
                        if is_solid(m) {
                            return 0.0;
                        }
                        let avg = 0.5 * (us[n].as_f64() + us[m].as_f64());
                        let dp = (p[m].as_f64() - p[n].as_f64()) / h;
                        sign * avg - g * dp
                    };
                    face += (flux(n + st[a], 1.0) + flux(n - st[a], -1.0)) / h;
                    let uc = |m: usize| if is_solid(m) { -u[n].as_f64() } else { u[m].as_f64() };
                    cell += (uc(n + st[a]) - uc(n - st[a])) / (2.0 * h);
                }
                sums[0] += face * face;
                sums[1] += cell * cell;
                sums[2] += 1.0;
            }
        }
    }
    sums
}

/// Stability bound over the local leaves (before the global minimum).
pub fn stable_dt_block<T: Real>(b: &Block<T>, props: &FluidProperties) -> f64 {
    let h = b.geom.spacing;
    let sum_inv_h2: f64 = h.iter().map(|x| 1.0 / (x * x)).sum();
    let mut dt = f64::INFINITY;
    if props.mu > 0.0 {
        dt = dt.min(props.rho_inf / (2.0 * props.mu) / sum_inv_h2);
    }
    if props.thermal_diffusivity > 0.0 {
        dt = dt.min(1.0 / (2.0 * props.thermal_diffusivity) / sum_inv_h2);
    }
    for a in 0..3 {
        let u = &b.fields[Var::VELOCITY[a]];
        for c in u.interior() {
            if b.is_solid(c) {
                continue;
            }
            let s = u.at(c).as_f64().abs();
            if s > 0.0 {
                dt = dt.min(h[a] / s);
            }
        }
    }
    dt
}

/// Global time step: `cfl_safety * min(limits)`, capped by `dt_max`.
pub fn stable_dt<T: Real>(w: &mut Worker<T>, props: &FluidProperties, integ: &TimeIntegrator) -> Result<f64> {
    if let Some(dt) = integ.fixed_dt {
        return Ok(dt);
    }
    let mut local = f64::INFINITY;
    for g in w.local_leaves() {
        local = local.min(stable_dt_block(w.block(g)?, props));
    }
    let m = w.allreduce_min(local)?;
    Ok((integ.cfl_safety * m).min(integ.dt_max))
}

fn refresh<T: Real>(w: &mut Worker<T>, vars: &[Var], cfg: &FlowConfig) -> Result<()> {
    let slots: Vec<Slot> = vars.iter().map(|&v| Slot::Var(v)).collect();
    w.exchange(PlanId::Leaves, &slots, cfg.interface, ExchangeMode::Faces, Some(&cfg.bc))
}

fn leaves_mut<T: Real>(w: &mut Worker<T>, mut f: impl FnMut(&mut Block<T>)) -> Result<()> {
    for g in w.local_leaves() {
        f(w.block_mut(g)?);
    }
    Ok(())
}

/// Updates the ghosts of every flow variable from the current interiors.
pub fn refresh_all<T: Real>(w: &mut Worker<T>, cfg: &FlowConfig) -> Result<()> {
    refresh(w, &[Var::U1, Var::U2, Var::U3, Var::T, Var::P], cfg)
}

/// Face-divergence and cell-divergence RMS of the current state.
pub fn divergence<T: Real>(w: &mut Worker<T>, props: &FluidProperties, dt: f64) -> Result<(f64, f64)> {
    let mut parts = Vec::new();
    for g in w.local_leaves() {
        parts.push((u64::from(g.0), divergence_block(w.block(g)?, props, dt).to_vec()));
    }
    let t = w.allreduce_sum(parts, 3)?;
    if t[2] == 0.0 {
        return Ok((0.0, 0.0));
    }
    Ok(((t[0] / t[2]).sqrt(), (t[1] / t[2]).sqrt()))
}

/// One full fractional step. Collective over all workers.
pub fn time_step<T: Real>(w: &mut Worker<T>, cfg: &FlowConfig, integ: &mut TimeIntegrator) -> Result<StepReport> {
    let start = Instant::now();
    let mut tm = StepTimings::default();
    let mut lap = Instant::now();
    let mut mark = |slot: &mut f64| {
        let now = Instant::now();
        *slot += (now - lap).as_secs_f64();
        lap = now;
    };

    refresh(w, &[Var::U1, Var::U2, Var::U3, Var::T], cfg)?;
    mark(&mut tm.exchange);
    let dt = stable_dt(w, &cfg.props, integ)?;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!("time step {dt} is not positive")));
    }
    let weights = integ.weights(dt);
    leaves_mut(w, |b| intermediate_velocity_block(b, cfg, dt, weights))?;
    mark(&mut tm.momentum);
    if cfg.thermal {
        leaves_mut(w, |b| temperature_step_block(b, cfg, dt, weights))?;
    }
    mark(&mut tm.temperature);
    refresh(w, &Var::VELOCITY_STAR, cfg)?;
    mark(&mut tm.exchange);
    leaves_mut(w, |b| pressure_rhs_block(b, &cfg.props, dt))?;
    mark(&mut tm.rhs);
    let solve = mg::solve(w, &cfg.poisson(), &cfg.mg)?;
    mark(&mut tm.poisson);
    leaves_mut(w, |b| correct_velocity_block(b, &cfg.props, dt))?;
    mark(&mut tm.correction);
    refresh(w, &[Var::U1, Var::U2, Var::U3], cfg)?;
    mark(&mut tm.exchange);
    let (divergence, cell_divergence) = divergence(w, &cfg.props, dt)?;
    mark(&mut tm.diagnostics);
    tm.total = start.elapsed().as_secs_f64();

    integ.prev_dt = Some(dt);
    integ.steps += 1;
    integ.time += dt;
    Ok(StepReport {
        step: integ.steps,
        time: integ.time,
        dt,
        timings: tm,
        solve,
        divergence,
        cell_divergence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgrid::DomainBox;
    use crate::topology::{GridId, RefinementSpec, Topology};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const ROOT: GridId = GridId(0);

    fn single(n: [usize; 3]) -> WorkerPool<f64> {
        let t = Topology::build_uniform(RefinementSpec::cubic(3), 0).unwrap();
        WorkerPool::new(t, DomainBox::unit(), n, 1).unwrap()
    }

    fn config(props: FluidProperties, thermal: bool) -> FlowConfig {
        FlowConfig {
            props,
            bc: BoundarySpec::closed_box(),
            mg: MGConfig { tol: 1e-10, ..MGConfig::default() },
            thermal,
            interface: Interpolation::Trilinear,
        }
    }

    fn cells(a: &Array3<f64>) -> Vec<[isize; 3]> {
        a.interior().collect()
    }

    fn fill_random(pool: &mut WorkerPool<f64>, vars: &[Var], seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = pool.block_mut(ROOT).unwrap();
        for &v in vars {
            for c in cells(&b.fields[v]) {
                b.fields[v].put(c, rng.random_range(-1.0..1.0));
            }
        }
    }

    /// Sets every cell of `v`, halo included, from the cell centre.
    fn fill_fn(b: &mut Block<f64>, v: Var, f: impl Fn([f64; 3]) -> f64) {
        let s = b.geom.size.map(|x| x as isize);
        for k in -1..=s[2] {
            for j in -1..=s[1] {
                for i in -1..=s[0] {
                    let x = b.geom.centre([i, j, k]);
                    b.fields[v].put([i, j, k], f(x));
                }
            }
        }
    }

    #[test]
    fn rest_state_is_a_fixed_point() {
        let mut pool = single([8, 8, 8]);
        let props = FluidProperties { beta: 3e-3, gravity: [0.0, 0.0, -9.81], thermal_diffusivity: 1e-3, ..FluidProperties::default() };
        let cfg = config(props, true);
        pool.for_each_block_mut(|b| b.fields[Var::T].fill_all(props.t_ref));
        let before = pool.block(ROOT).unwrap().fields.clone();
        let rep = pool
            .run(|w| {
                let mut integ = TimeIntegrator::new(Scheme::AdamsBashforth2, 0.5, 0.01)?;
                time_step(w, &cfg, &mut integ)
            })
            .unwrap()
            .remove(0);
        let after = &pool.block(ROOT).unwrap().fields;
        for v in [Var::U1, Var::U2, Var::U3, Var::P, Var::T] {
            for c in cells(&after[v]) {
                assert!((after[v].at(c) - before[v].at(c)).abs() <= 1e-12, "{v:?}");
            }
        }
        let sum: f64 = rep.timings.phases().iter().sum();
        assert!((sum - rep.timings.total).abs() <= 0.01 * rep.timings.total);
        assert_eq!(rep.dt, 0.01);
    }

    #[test]
    fn uniform_flow_is_translation_invariant() {
        let mut pool = single([6, 6, 6]);
        let mut cfg = config(FluidProperties::default(), false);
        for f in Face::ALL {
            cfg.bc.face_mut(f).velocity = if f.axis() == 0 { VelocityBc::Outflow } else { VelocityBc::Slip };
        }
        pool.for_each_block_mut(|b| b.fields[Var::U1].fill_all(1.0));
        pool.run(|w| {
            refresh_all(w, &cfg)?;
            leaves_mut(w, |b| intermediate_velocity_block(b, &cfg, 0.01, (1.0, 0.0)))?;
            refresh(w, &Var::VELOCITY_STAR, &cfg)
        })
        .unwrap();
        let b = pool.block_mut(ROOT).unwrap();
        for c in cells(&b.fields[Var::U1Star]) {
            assert_eq!(b.fields[Var::U1Star].at(c), 1.0);
            assert_eq!(b.fields[Var::U2Star].at(c), 0.0);
            assert_eq!(b.fields[Var::U3Star].at(c), 0.0);
        }
        pressure_rhs_block(b, &cfg.props, 0.01);
        assert!(b.fields[Var::Rhs].interior_values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn momentum_matches_dense_stencil_oracle() {
        let mut pool = single([8, 8, 8]);
        let props = FluidProperties { mu: 0.05, ..FluidProperties::default() };
        let cfg = config(props, false);
        fill_random(&mut pool, &Var::VELOCITY, 7);
        pool.run(|w| refresh_all(w, &cfg)).unwrap();
        let dt = 0.003;
        let b = pool.block_mut(ROOT).unwrap();
        // Dense copies with the halo, indexed [i+1][j+1][k+1].
        let dense: Vec<Vec<Vec<Vec<f64>>>> = Var::VELOCITY
            .iter()
            .map(|&v| (0..10).map(|i| (0..10).map(|j| (0..10).map(|k| b.fields[v].at([i - 1, j - 1, k - 1])).collect()).collect()).collect())
            .collect();
        let h = 1.0 / 8.0;
        let nu = props.mu / props.rho_inf;
        intermediate_velocity_block(b, &cfg, dt, (1.0, 0.0));
        let mut worst: f64 = 0.0;
        for i in 1..9usize {
            for j in 1..9usize {
                for k in 1..9usize {
                    let p = [i, j, k];
                    for comp in 0..3 {
                        let at = |q: [usize; 3], c: usize| dense[c][q[0]][q[1]][q[2]];
                        let mut tend = 0.0;
                        for a in 0..3 {
                            let mut hi = p;
                            hi[a] += 1;
                            let mut lo = p;
                            lo[a] -= 1;
                            let vh = 0.5 * (at(p, a) + at(hi, a));
                            let vl = 0.5 * (at(p, a) + at(lo, a));
                            let fh = vh * if vh >= 0.0 { at(p, comp) } else { at(hi, comp) };
                            let fl = vl * if vl >= 0.0 { at(lo, comp) } else { at(p, comp) };
                            tend += -(fh - fl) / h + nu * (at(hi, comp) - 2.0 * at(p, comp) + at(lo, comp)) / (h * h);
                        }
                        let want = at(p, comp) + dt * tend;
                        let got = b.fields[Var::VELOCITY_STAR[comp]].at([i as isize - 1, j as isize - 1, k as isize - 1]);
                        worst = worst.max((got - want).abs());
                    }
                }
            }
        }
        assert!(worst <= 1e-13, "{worst}");
    }

    #[test]
    fn rhs_of_linear_field_is_constant() {
        let mut pool = single([8, 8, 8]);
        let b = pool.block_mut(ROOT).unwrap();
        fill_fn(b, Var::U1Star, |x| x[0]);
        let props = FluidProperties { rho_inf: 1.2, ..FluidProperties::default() };
        pressure_rhs_block(b, &props, 0.1);
        for v in b.fields[Var::Rhs].interior_values() {
            assert!((v - 12.0).abs() <= 1e-12, "{v}");
        }
    }

    #[test]
    fn rhs_integral_equals_boundary_flux() {
        let mut pool = single([6, 5, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = pool.block_mut(ROOT).unwrap();
        for v in Var::VELOCITY_STAR {
            let s = b.geom.size.map(|x| x as isize);
            for k in -1..=s[2] {
                for j in -1..=s[1] {
                    for i in -1..=s[0] {
                        b.fields[v].put([i, j, k], rng.random_range(-1.0..1.0));
                    }
                }
            }
        }
        let props = FluidProperties::default();
        let dt = 0.05;
        pressure_rhs_block(b, &props, dt);
        let g = b.geom.clone();
        let vol = g.cell_volume();
        let integral: f64 = b.fields[Var::Rhs].interior_values().iter().sum::<f64>() * vol;
        let mut flux = 0.0;
        for f in Face::ALL {
            let a = f.axis();
            let u = &b.fields[Var::VELOCITY_STAR[a]];
            let area = vol / g.spacing[a];
            for c in cells(u) {
                let edge = if f.is_positive() { g.size[a] as isize - 1 } else { 0 };
                if c[a] != edge {
                    continue;
                }
                let mut n = c;
                n[a] += f.sign() as isize;
                flux += f.sign() as f64 * 0.5 * (u.at(c) + u.at(n)) * area;
            }
        }
        flux *= props.rho_inf / dt;
        assert!((integral - flux).abs() <= 1e-12 * flux.abs().max(1.0), "{integral} {flux}");
    }

    #[test]
    fn correction_uses_the_pressure_gradient() {
        let mut pool = single([8, 8, 8]);
        fill_random(&mut pool, &Var::VELOCITY_STAR, 3);
        let props = FluidProperties { rho_inf: 2.0, ..FluidProperties::default() };
        let dt = 0.1;
        let b = pool.block_mut(ROOT).unwrap();
        b.fields[Var::P].fill_all(4.0);
        correct_velocity_block(b, &props, dt);
        for a in 0..3 {
            for c in cells(&b.fields[Var::U1]) {
                assert_eq!(b.fields[Var::VELOCITY[a]].at(c), b.fields[Var::VELOCITY_STAR[a]].at(c));
            }
        }
        fill_fn(b, Var::P, |x| x[0]);
        correct_velocity_block(b, &props, dt);
        for c in cells(&b.fields[Var::U1]) {
            let d = b.fields[Var::U1Star].at(c) - b.fields[Var::U1].at(c);
            assert!((d - dt / props.rho_inf).abs() <= 1e-12);
            assert!((b.fields[Var::U2].at(c) - b.fields[Var::U2Star].at(c)).abs() <= 1e-12);
        }
    }

    #[test]
    fn constant_temperature_survives_divergence_free_transport() {
        let mut pool = single([8, 8, 8]);
        let props = FluidProperties { thermal_diffusivity: 0.02, ..FluidProperties::default() };
        let cfg = config(props, true);
        let b = pool.block_mut(ROOT).unwrap();
        let h = b.geom.spacing[0];
        let psi = |x: f64, y: f64| (3.0 * x).sin() * (2.0 * y + 0.3).cos();
        // Central differences of a streamfunction sampled on the same lattice
        // give a discretely divergence-free cell field.
        fill_fn(b, Var::U1, |x| (psi(x[0], x[1] + h) - psi(x[0], x[1] - h)) / (2.0 * h));
        fill_fn(b, Var::U2, |x| -(psi(x[0] + h, x[1]) - psi(x[0] - h, x[1])) / (2.0 * h));
        b.fields[Var::T].fill_all(5.0);
        for _ in 0..3 {
            temperature_step_block(b, &cfg, 0.01, (1.0, 0.0));
        }
        for v in b.fields[Var::T].interior_values() {
            assert!((v - 5.0).abs() <= 1e-12, "{v}");
        }
    }

    #[test]
    fn diffusion_conserves_heat_with_adiabatic_walls() {
        let mut pool = single([8, 8, 8]);
        let props = FluidProperties { thermal_diffusivity: 0.01, ..FluidProperties::default() };
        let cfg = config(props, true);
        pool.for_each_block_mut(|b| b.fields[Var::T].put([3, 4, 2], 100.0));
        let total = |p: &WorkerPool<f64>| p.block(ROOT).unwrap().fields[Var::T].interior_values().iter().sum::<f64>();
        let t0 = total(&pool);
        pool.run(|w| {
            for _ in 0..20 {
                refresh_all(w, &cfg)?;
                leaves_mut(w, |b| temperature_step_block(b, &cfg, 0.1, (1.0, 0.0)))?;
            }
            Ok(())
        })
        .unwrap();
        let t1 = total(&pool);
        assert!((t1 - t0).abs() <= 1e-12 * t0, "{t0} {t1}");
        assert!(pool.block(ROOT).unwrap().fields[Var::T].at([3, 4, 2]) < 100.0);
    }

    #[test]
    fn two_cell_profile_by_hand() {
        let mut pool = single([2, 2, 2]);
        let props = FluidProperties { thermal_diffusivity: 0.1, ..FluidProperties::default() };
        let cfg = config(props, true);
        pool.for_each_block_mut(|b| {
            for c in cells(&b.fields[Var::T]) {
                b.fields[Var::T].put(c, if c[0] == 0 { 1.0 } else { 0.0 });
            }
        });
        pool.run(|w| refresh_all(w, &cfg)).unwrap();
        let b = pool.block_mut(ROOT).unwrap();
        temperature_step_block(b, &cfg, 0.1, (1.0, 0.0));
        // h = 0.5: 1 + 0.1 * 0.1 * (1 - 2 + 0) / 0.25 = 0.96.
        for c in cells(&b.fields[Var::T]) {
            let want = if c[0] == 0 { 0.96 } else { 0.04 };
            assert!((b.fields[Var::T].at(c) - want).abs() <= 1e-15);
        }
    }

    #[test]
    fn stable_dt_limits() {
        let mut pool = single([8, 8, 8]);
        let props = FluidProperties { mu: 0.01, ..FluidProperties::default() };
        let integ = TimeIntegrator::new(Scheme::Euler, 0.5, 10.0).unwrap();
        let dt = |p: &mut WorkerPool<f64>, props: FluidProperties| p.run(|w| stable_dt(w, &props, &integ)).unwrap()[0];
        let h2 = 1.0 / 64.0;
        let diffusive = 1.0 / (2.0 * 0.01) / (3.0 / h2);
        assert!((dt(&mut pool, props) - 0.5 * diffusive).abs() <= 1e-15);

        let still = FluidProperties { mu: 0.0, ..props };
        assert_eq!(dt(&mut pool, still), 10.0);

        pool.for_each_block_mut(|b| b.fields[Var::U2].fill_all(3.0));
        let a = dt(&mut pool, still);
        pool.for_each_block_mut(|b| b.fields[Var::U2].fill_all(6.0));
        assert!((dt(&mut pool, still) - a / 2.0).abs() <= 1e-15);

        fill_random(&mut pool, &Var::VELOCITY, 5);
        let mixed = FluidProperties { mu: 1e-4, thermal_diffusivity: 2e-4, ..props };
        let b = pool.block(ROOT).unwrap();
        let mut want = f64::INFINITY;
        for c in cells(&b.fields[Var::U1]) {
            for a in 0..3 {
                want = want.min(0.125 / b.fields[Var::VELOCITY[a]].at(c).abs());
            }
            want = want.min(1.0 / (2.0 * 1e-4) / (3.0 / h2));
            want = want.min(1.0 / (2.0 * 2e-4) / (3.0 / h2));
        }
        assert_eq!(dt(&mut pool, mixed), 0.5 * want);
    }

    #[test]
    fn adams_bashforth_bootstraps_with_euler() {
        let run = |schemes: [Scheme; 2]| {
            let mut pool = single([6, 6, 6]);
            let props = FluidProperties { mu: 0.02, ..FluidProperties::default() };
            let cfg = config(props, false);
            fill_random(&mut pool, &Var::VELOCITY, 9);
            pool.run(|w| {
                let mut integ = TimeIntegrator::fixed(schemes[0], 0.002)?;
                time_step(w, &cfg, &mut integ)?;
                integ.scheme = schemes[1];
                time_step(w, &cfg, &mut integ)
            })
            .unwrap();
            pool.block(ROOT).unwrap().fields.clone()
        };
        let ab = run([Scheme::AdamsBashforth2; 2]);
        let mixed = run([Scheme::Euler, Scheme::AdamsBashforth2]);
        let euler = run([Scheme::Euler; 2]);
        for v in Var::VELOCITY {
            assert_eq!(ab[v].as_slice(), mixed[v].as_slice());
            assert_ne!(ab[v].as_slice(), euler[v].as_slice());
        }
    }

    #[test]
    fn ab2_weights() {
        let mut t = TimeIntegrator::new(Scheme::AdamsBashforth2, 0.5, 1.0).unwrap();
        assert_eq!(t.weights(0.1), (1.0, 0.0));
        t.prev_dt = Some(0.1);
        assert_eq!(t.weights(0.1), (1.5, -0.5));
        assert!(TimeIntegrator::new(Scheme::Euler, 0.0, 1.0).is_err());
        assert!(TimeIntegrator::new(Scheme::Euler, 0.5, -1.0).is_err());
    }

    #[test]
    fn projection_leaves_a_divergence_free_face_field() {
        let mut pool = single([16, 16, 16]);
        let mut cfg = config(FluidProperties { mu: 0.01, ..FluidProperties::default() }, false);
        cfg.bc.face_mut(Face::ZPos).velocity = VelocityBc::Inflow(FaceProfile::uniform(0.0));
        fill_random(&mut pool, &Var::VELOCITY, 13);
        let reps = pool
            .run(|w| {
                let mut integ = TimeIntegrator::new(Scheme::AdamsBashforth2, 0.5, 0.01)?;
                (0..3).map(|_| time_step(w, &cfg, &mut integ)).collect::<Result<Vec<_>>>()
            })
            .unwrap()
            .remove(0);
        for r in reps {
            assert!(r.solve.converged);
            assert!(r.divergence <= 10.0 * cfg.mg.tol, "{}", r.divergence);
        }
    }

    #[test]
    fn obstacle_cells_stay_at_rest() {
        let mut pool = single([8, 8, 8]);
        let props = FluidProperties { mu: 0.01, ..FluidProperties::default() };
        let mut cfg = config(props, false);
        cfg.bc.face_mut(Face::XNeg).velocity = VelocityBc::Inflow(FaceProfile::uniform(1.0));
        cfg.bc.face_mut(Face::XPos).velocity = VelocityBc::Outflow;
        cfg.bc.face_mut(Face::XPos).pressure = PressureBc::Fixed(0.0);
        apply_obstacle(&mut pool, &Cuboid { lo: [0.4, 0.4, -1.0], hi: [0.6, 0.6, 2.0] }, None);
        pool.run(|w| {
            let mut integ = TimeIntegrator::new(Scheme::Euler, 0.5, 0.01)?;
            for _ in 0..5 {
                time_step(w, &cfg, &mut integ)?;
            }
            Ok(())
        })
        .unwrap();
        let b = pool.block(ROOT).unwrap();
        let solid: Vec<_> = cells(&b.fields[Var::U1]).into_iter().filter(|&c| b.is_solid(c)).collect();
        assert_eq!(solid.len(), 2 * 2 * 8);
        for c in solid {
            assert_eq!(b.fields[Var::U1].at(c), 0.0);
        }
        assert!(b.fields[Var::U1].at([1, 1, 4]) > 0.0);
    }

    #[test]
    fn heated_patch_drives_upward_flow() {
        let mut pool = single([8, 8, 8]);
        let props = FluidProperties { mu: 1e-3, beta: 3.4e-3, t_ref: 0.0, gravity: [0.0, 0.0, -9.81], thermal_diffusivity: 1e-3, ..FluidProperties::default() };
        let mut cfg = config(props, true);
        cfg.bc.face_mut(Face::ZNeg).temperature = TemperatureBc::FixedProfile(FaceProfile::new(|x| if x[0] < 0.5 && x[1] < 0.5 { 10.0 } else { 0.0 }));
        let rise = pool
            .run(|w| {
                let mut integ = TimeIntegrator::new(Scheme::AdamsBashforth2, 0.5, 0.01)?;
                for s in 0..50 {
                    time_step(w, &cfg, &mut integ)?;
                    // Mean over the column above the patch; single cells carry
                    // the collocated odd-even mode near the heated layer.
                    let b = w.block(ROOT)?;
                    let u3: f64 = (0..8).flat_map(|k| (0..4).flat_map(move |j| (0..4).map(move |i| [i, j, k]))).map(|c| b.fields[Var::U3].at(c)).sum();
                    if u3 > 0.0 {
                        return Ok(Some(s));
                    }
                }
                Ok(None)
            })
            .unwrap()[0];
        assert!(rise.is_some());
    }

    #[test]
    fn coarse_masks_never_exceed_the_leaves() {
        let t = Topology::build_uniform(RefinementSpec::cubic(3), 2).unwrap();
        let mut pool = WorkerPool::<f64>::new(t, DomainBox::unit(), [4, 4, 4], 1).unwrap();
        let shape = Cylinder { centre: [0.4, 0.55, 0.0], radius: 0.21, axis: 2 };
        apply_obstacle(&mut pool, &shape, None);
        let solid_volume = |depth: u8| -> f64 {
            pool.blocks()
                .iter()
                .filter(|(_, b)| b.geom.depth == depth)
                .map(|(_, b)| b.fields[Var::U1].interior().filter(|&c| b.is_solid(c)).count() as f64 * b.geom.cell_volume())
                .sum()
        };
        let (leaf, mid, root) = (solid_volume(2), solid_volume(1), solid_volume(0));
        assert!(leaf > 0.0);
        assert!(mid <= leaf && root <= mid, "{root} {mid} {leaf}");
        // Leaves keep plain centre sampling.
        let (_, b) = pool.blocks().into_iter().find(|(_, b)| b.geom.depth == 2).unwrap();
        assert_eq!(b.solid, voxelise(&b.geom, &shape));
    }
}
