//! Cell-centred geometric multigrid for the pressure Poisson problem.
//!
//! Levels are the depths of the l-grid tree. The composite residual is taken
//! on the leaves; every depth then smooths a correction equation whose right
//! hand side is the composite residual on its leaves and the restricted level
//! residual on its refined grids. Corrections travel back up by
//! prolongation and are finally added to the leaves.

use std::time::Instant;

use crate::dgrid::{Array3, BlockGeometry, Var};
use crate::error::{Error, Result};
use crate::exchange::{ExchangeMode, Interpolation};
use crate::runtime::{apply_rule, Block, Boundary, GhostRule, Message, PlanId, Slot, Worker, WorkerPool};
use crate::scalar::Real;
use crate::topology::{Face, GridId};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Smoother {
    Jacobi { omega: f64 },
    RedBlackGaussSeidel,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MGConfig {
    pub nu1: usize,
    pub nu2: usize,
    pub smoother: Smoother,
    /// Absolute tolerance on the per-cell residual RMS.
    pub tol: f64,
    pub max_cycles: usize,
    /// Smoother sweeps, or the CG iteration cap, on the root block.
    pub coarsest_sweeps: usize,
    pub coarse_solver: CoarseSolver,
    pub prolongation: Interpolation,
}

/// How the single root block is treated at the bottom of a V-cycle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CoarseSolver {
    #[default]
    Smoother,
    /// Matrix-free conjugate gradients to a 1e-10 relative residual. Needed
    /// when the root block is long in one direction and plain sweeps cannot
    /// reach its smoothest modes.
    ConjugateGradient,
}

impl Default for MGConfig {
    fn default() -> Self {
        MGConfig {
            nu1: 2,
            nu2: 2,
            smoother: Smoother::RedBlackGaussSeidel,
            tol: 1e-8,
            max_cycles: 100,
            coarsest_sweeps: 50,
            coarse_solver: CoarseSolver::Smoother,
            prolongation: Interpolation::Trilinear,
        }
    }
}

impl MGConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nu1 + self.nu2 < 1 {
            return Err(Error::InvalidArgument("nu1 + nu2 must be >= 1".into()));
        }
        if let Smoother::Jacobi { omega } = self.smoother {
            if !(omega > 0.0 && omega <= 1.0) {
                return Err(Error::InvalidArgument(format!("Jacobi weight {omega} outside (0, 1]")));
            }
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument("tol must be > 0".into()));
        }
        Ok(())
    }
}

/// Outcome of [`solve`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolveReport {
    pub cycles: usize,
    pub initial_residual: f64,
    pub final_residual: f64,
    pub converged: bool,
    pub tol: f64,
    /// Residual RMS after each cycle.
    pub history: Vec<f64>,
    /// Wall seconds per cycle.
    pub cycle_times: Vec<f64>,
}

impl SolveReport {
    /// Geometric mean reduction per cycle over cycles `from..=to` (1-based).
    pub fn reduction_factor(&self, from: usize, to: usize) -> Option<f64> {
        let to = to.min(self.history.len());
        if from < 2 || to < from {
            return None;
        }
        let a = self.history[from - 2];
        let b = self.history[to - 1];
        if a <= 0.0 {
            return None;
        }
        Some((b / a).powf(1.0 / (to - from + 1) as f64))
    }

    pub fn relative_reduction(&self) -> f64 {
        if self.initial_residual > 0.0 {
            self.final_residual / self.initial_residual
        } else {
            0.0
        }
    }
}

/// Physical boundary condition for the pressure on one hull face.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FaceBc {
    Dirichlet(f64),
    /// Outward normal derivative.
    Neumann(f64),
}

/// Poisson problem `lap p = rhs` over the leaves, `p` in [`Var::P`] and
/// `rhs` in [`Var::Rhs`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoissonProblem {
    /// Indexed by [`Face::index`].
    pub faces: [FaceBc; 6],
    /// Coarse-to-fine operator on the leaf interfaces.
    pub interface: Interpolation,
}

impl PoissonProblem {
    pub fn dirichlet(v: f64) -> Self {
        PoissonProblem {
            faces: [FaceBc::Dirichlet(v); 6],
            interface: Interpolation::Trilinear,
        }
    }

    pub fn neumann() -> Self {
        PoissonProblem {
            faces: [FaceBc::Neumann(0.0); 6],
            interface: Interpolation::Trilinear,
        }
    }

    /// Unit-cube Laplace benchmark: p = 1 on the two x faces, 0 elsewhere.
    pub fn laplace_cube() -> Self {
        let mut p = Self::dirichlet(0.0);
        p.faces[Face::XNeg.index()] = FaceBc::Dirichlet(1.0);
        p.faces[Face::XPos.index()] = FaceBc::Dirichlet(1.0);
        p
    }

    /// Pure Neumann problems determine p only up to a constant.
    pub fn is_singular(&self) -> bool {
        self.faces.iter().all(|f| matches!(f, FaceBc::Neumann(_)))
    }
}

impl Boundary for PoissonProblem {
    fn rule(&self, slot: Slot, _: &BlockGeometry, face: Face) -> GhostRule<'_> {
        let bc = self.faces[face.index()];
        match (slot, bc) {
            (Slot::Var(Var::P), FaceBc::Dirichlet(v)) => GhostRule::Reflect(v),
            (Slot::Var(Var::P), FaceBc::Neumann(g)) => GhostRule::Gradient(g),
            (_, FaceBc::Dirichlet(_)) => GhostRule::Reflect(0.0),
            (_, FaceBc::Neumann(_)) => GhostRule::Copy,
        }
    }
}

/// The 7-point operator of one block: `(A x)_c = sum_n w_n (x_n - x_c) / h^2`
/// where `w_n = 0` for solid neighbours (zero flux into obstacles).
#[derive(Clone, Copy, Debug)]
pub struct StencilOp<'a> {
    pub inv_h2: [f64; 3],
    pub solid: Option<&'a Array3<u8>>,
}

impl<'a> StencilOp<'a> {
    pub fn new(geom: &BlockGeometry, solid: Option<&'a Array3<u8>>) -> Self {
        StencilOp {
            inv_h2: geom.spacing.map(|h| 1.0 / (h * h)),
            solid,
        }
    }

    /// Neighbour coefficients in [`Face`] order and the centre coefficient.
    pub fn coefficients(&self, c: [isize; 3]) -> ([f64; 6], f64) {
        let mut off = [0.0; 6];
        if self.solid.is_some_and(|m| m.at(c) != 0) {
            return (off, 0.0);
        }
        let mut centre = 0.0;
        for f in Face::ALL {
            let mut n = c;
            n[f.axis()] += f.sign() as isize;
            if self.solid.is_some_and(|m| m.at(n) != 0) {
                continue;
            }
            off[f.index()] = self.inv_h2[f.axis()];
            centre -= self.inv_h2[f.axis()];
        }
        (off, centre)
    }
}

/// Linear-index view of one block's interior loops.
struct Lattice {
    size: [usize; 3],
    stride: [usize; 3],
}

impl Lattice {
    fn of<T: Copy>(a: &Array3<T>) -> Self {
        Lattice {
            size: a.size(),
            stride: [0, 1, 2].map(|ax| a.stride(ax)),
        }
    }

    fn rows<T: Copy>(&self, a: &Array3<T>) -> impl Iterator<Item = (usize, isize, isize)> + '_ {
        let base = a.idx(0, 0, 0);
        let (sy, sz) = (self.stride[1], self.stride[2]);
        (0..self.size[2]).flat_map(move |k| (0..self.size[1]).map(move |j| (base + j * sy + k * sz, j as isize, k as isize)))
    }
}

/// Off-diagonal sum and (negated) diagonal of the stencil at linear index `n`.
#[inline(always)]
fn gather<T: Real>(x: &[T], mask: Option<&[u8]>, n: usize, st: [usize; 3], ih: [T; 3]) -> (T, T) {
    match mask {
        None => {
            let s = (x[n - 1] + x[n + 1]) * ih[0] + (x[n - st[1]] + x[n + st[1]]) * ih[1] + (x[n - st[2]] + x[n + st[2]]) * ih[2];
            let d = (ih[0] + ih[1] + ih[2]) * T::lit(2.0);
            (s, d)
        }
        Some(m) => {
            let mut s = T::zero();
            let mut d = T::zero();
            for a in 0..3 {
                for nb in [n - st[a], n + st[a]] {
                    if m[nb] == 0 {
                        s += x[nb] * ih[a];
                        d += ih[a];
                    }
                }
            }
            (s, d)
        }
    }
}

fn inv_h2<T: Real>(geom: &BlockGeometry) -> [T; 3] {
    geom.spacing.map(|h| T::lit(1.0 / (h * h)))
}

/// `out = rhs - A x` on fluid interior cells, zero on solid cells.
/// Returns the sum of squared residuals and the fluid cell count.
pub fn block_residual<T: Real>(b: &mut Block<T>, x: Slot, rhs: Slot, out: Slot) -> (f64, usize) {
    let ih = inv_h2::<T>(&b.geom);
    let mut r = std::mem::replace(b.slot_mut(out), Array3::zeros([1, 1, 1]));
    let xa = b.slot(x);
    let fa = b.slot(rhs);
    let lat = Lattice::of(xa);
    let mask = b.solid.as_ref().map(|m| m.as_slice());
    let (xs, fs) = (xa.as_slice(), fa.as_slice());
    let rs = r.as_mut_slice();
    let mut sum = 0.0;
    let mut count = 0;
    for (row, _, _) in lat.rows(xa) {
        for n in row..row + lat.size[0] {
            if mask.is_some_and(|m| m[n] != 0) {
                rs[n] = T::zero();
                continue;
            }
            let (s, d) = gather(xs, mask, n, lat.stride, ih);
            let v = fs[n] - (s - d * xs[n]);
            rs[n] = v;
            let v = v.as_f64();
            sum += v * v;
            count += 1;
        }
    }
    *b.slot_mut(out) = r;
    (sum, count)
}

/// One red-black half sweep over cells whose global index parity is `colour`.
fn gs_colour<T: Real>(b: &mut Block<T>, x: Slot, rhs: Slot, colour: usize) {
    let ih = inv_h2::<T>(&b.geom);
    let off = b.geom.offset;
    let (xa, fa, solid) = b.split(x, rhs);
    let lat = Lattice::of(xa);
    let mask = solid.map(|m| m.as_slice());
    let fs = fa.as_slice();
    let rows: Vec<_> = lat.rows(xa).collect();
    let xs = xa.as_mut_slice();
    for (row, j, k) in rows {
        let parity = (off[0] + off[1] + off[2] + j as i64 + k as i64).rem_euclid(2) as usize;
        let first = (colour + 2 - parity) % 2;
        for i in (first..lat.size[0]).step_by(2) {
            let n = row + i;
            if mask.is_some_and(|m| m[n] != 0) {
                continue;
            }
            let (s, d) = gather(xs, mask, n, lat.stride, ih);
            if d > T::zero() {
                xs[n] = (s - fs[n]) / d;
            }
        }
    }
}

fn jacobi<T: Real>(b: &mut Block<T>, x: Slot, rhs: Slot, omega: f64) {
    let ih = inv_h2::<T>(&b.geom);
    let w = T::lit(omega);
    let (xa, fa, solid) = b.split(x, rhs);
    let lat = Lattice::of(xa);
    let mask = solid.map(|m| m.as_slice());
    let old = xa.as_slice().to_vec();
    let fs = fa.as_slice();
    let rows: Vec<_> = lat.rows(xa).collect();
    let xs = xa.as_mut_slice();
    for (row, _, _) in rows {
        for n in row..row + lat.size[0] {
            if mask.is_some_and(|m| m[n] != 0) {
                continue;
            }
            let (s, d) = gather(&old, mask, n, lat.stride, ih);
            if d > T::zero() {
                xs[n] = (T::one() - w) * old[n] + w * (s - fs[n]) / d;
            }
        }
    }
}

/// Mean of each `r`-block of interior cells: the restricted field, in
/// storage order over `size / r` cells.
pub fn restrict<T: Real>(fine: &Array3<T>, r: [u32; 3]) -> Vec<T> {
    let s = fine.size();
    let r = r.map(|x| x as usize);
    let cs = [0, 1, 2].map(|a| s[a] / r[a]);
    let w = T::lit(1.0 / (r[0] * r[1] * r[2]) as f64);
    let mut out = Vec::with_capacity(cs[0] * cs[1] * cs[2]);
    for ck in 0..cs[2] {
        for cj in 0..cs[1] {
            for ci in 0..cs[0] {
                let mut sum = T::zero();
                for dk in 0..r[2] {
                    for dj in 0..r[1] {
                        for di in 0..r[0] {
                            sum += fine.get((ci * r[0] + di) as isize, (cj * r[1] + dj) as isize, (ck * r[2] + dk) as isize);
                        }
                    }
                }
                out.push(sum * w);
            }
        }
    }
    out
}

/// Adds the prolongation of a coarse patch to the interior of `fine`.
///
/// `patch` holds the `size / r` coarse cells under the fine block plus one
/// ring of neighbours, in storage order.
pub fn prolong_add<T: Real>(fine: &mut Array3<T>, patch: &[T], r: [u32; 3], interp: Interpolation) {
    let s = fine.size();
    let pd = [0, 1, 2].map(|a| s[a] / r[a] as usize + 2);
    debug_assert_eq!(patch.len(), pd[0] * pd[1] * pd[2]);
    let at = |c: [usize; 3]| patch[c[0] + pd[0] * (c[1] + pd[1] * c[2])];
    // Per axis and fine index: lower coarse patch index and its weight.
    let table: Vec<Vec<(usize, f64)>> = (0..3)
        .map(|a| {
            let ra = r[a] as usize;
            (0..s[a])
                .map(|i| match interp {
                    Interpolation::PiecewiseConstant => (i / ra + 1, 1.0),
                    Interpolation::Trilinear if ra == 1 => (i + 1, 1.0),
                    Interpolation::Trilinear => {
                        // Fine centre in units where patch cell c is centred at c.
                        let x = (i as f64 + 0.5) / ra as f64 + 0.5;
                        let c0 = x.floor();
                        (c0 as usize, 1.0 - (x - c0))
                    }
                })
                .collect()
        })
        .collect();
    for k in 0..s[2] {
        let (ck, wk) = table[2][k];
        for j in 0..s[1] {
            let (cj, wj) = table[1][j];
            for i in 0..s[0] {
                let (ci, wi) = table[0][i];
                let mut v = 0.0;
                for (dk, fk) in [(0, wk), (1, 1.0 - wk)] {
                    if fk == 0.0 {
                        continue;
                    }
                    for (dj, fj) in [(0, wj), (1, 1.0 - wj)] {
                        if fj == 0.0 {
                            continue;
                        }
                        for (di, fi) in [(0, wi), (1, 1.0 - wi)] {
                            if fi == 0.0 {
                                continue;
                            }
                            v += fi * fj * fk * at([ci + di, cj + dj, ck + dk]).as_f64();
                        }
                    }
                }
                let c = [i as isize, j as isize, k as isize];
                fine.put(c, fine.at(c) + T::lit(v));
            }
        }
    }
}

/// Composite residual on the leaves into [`Slot::Res`]; returns its RMS.
pub fn composite_residual<T: Real>(w: &mut Worker<T>, prob: &PoissonProblem) -> Result<f64> {
    w.exchange(PlanId::Leaves, &[Slot::Var(Var::P)], prob.interface, ExchangeMode::Faces, Some(prob))?;
    let mut parts = Vec::new();
    for g in w.local_leaves() {
        let (s, n) = block_residual(w.block_mut(g)?, Slot::Var(Var::P), Slot::Var(Var::Rhs), Slot::Res);
        parts.push((u64::from(g.0), vec![s, n as f64]));
    }
    let t = w.allreduce_sum(parts, 2)?;
    Ok(if t[1] > 0.0 { (t[0] / t[1]).sqrt() } else { 0.0 })
}

fn smooth_level<T: Real>(w: &mut Worker<T>, depth: u8, prob: &PoissonProblem, cfg: &MGConfig, sweeps: usize) -> Result<()> {
    let grids = w.local_at_depth(depth);
    let plan = PlanId::Level(depth);
    for _ in 0..sweeps {
        match cfg.smoother {
            Smoother::Jacobi { omega } => {
                w.exchange(plan, &[Slot::Corr], prob.interface, ExchangeMode::Faces, Some(prob))?;
                for &g in &grids {
                    jacobi(w.block_mut(g)?, Slot::Corr, Slot::Res, omega);
                }
            }
            Smoother::RedBlackGaussSeidel => {
                for colour in 0..2 {
                    w.exchange(plan, &[Slot::Corr], prob.interface, ExchangeMode::Faces, Some(prob))?;
                    for &g in &grids {
                        gs_colour(w.block_mut(g)?, Slot::Corr, Slot::Res, colour);
                    }
                }
            }
        }
    }
    Ok(())
}

/// Smoother sweeps applied directly to `p` on the leaves.
pub fn smooth<T: Real>(w: &mut Worker<T>, prob: &PoissonProblem, smoother: Smoother, sweeps: usize) -> Result<()> {
    let leaves = w.local_leaves();
    for _ in 0..sweeps {
        match smoother {
            Smoother::Jacobi { omega } => {
                w.exchange(PlanId::Leaves, &[Slot::Var(Var::P)], prob.interface, ExchangeMode::Faces, Some(prob))?;
                for &g in &leaves {
                    jacobi(w.block_mut(g)?, Slot::Var(Var::P), Slot::Var(Var::Rhs), omega);
                }
            }
            Smoother::RedBlackGaussSeidel => {
                for colour in 0..2 {
                    w.exchange(PlanId::Leaves, &[Slot::Var(Var::P)], prob.interface, ExchangeMode::Faces, Some(prob))?;
                    for &g in &leaves {
                        gs_colour(w.block_mut(g)?, Slot::Var(Var::P), Slot::Var(Var::Rhs), colour);
                    }
                }
            }
        }
    }
    Ok(())
}

/// Restricts the level residual of every grid at `depth` into its parent's
/// right-hand side.
fn restrict_level<T: Real>(w: &mut Worker<T>, depth: u8) -> Result<()> {
    let r = w.topology().spec().ratio(depth);
    let mut out = w.outboxes();
    for g in w.local_at_depth(depth) {
        let parent = w.topology().nodes()[g.index()].parent.expect("depth > 0 has a parent");
        let data = restrict(w.block(g)?.slot(Slot::Tmp), r);
        out[w.owner(parent)].push(Message::Grid { to: parent, from: g, data });
    }
    for m in w.superstep(out)? {
        let Message::Grid { to, from, data } = m else {
            return Err(Error::Protocol("unexpected message during restriction".into()));
        };
        let child = w.shared().geom(from).coord;
        let b = w.block_mut(to)?;
        let s = b.geom.size;
        let cs = [0, 1, 2].map(|a| s[a] / r[a] as usize);
        let base = [0, 1, 2].map(|a| (child[a] % r[a]) as usize * cs[a]);
        let mut it = data.into_iter();
        for k in 0..cs[2] {
            for j in 0..cs[1] {
                for i in 0..cs[0] {
                    let v = it.next().ok_or_else(|| Error::Inconsistent("short restriction message".into()))?;
                    b.scratch[1].set((base[0] + i) as isize, (base[1] + j) as isize, (base[2] + k) as isize, v);
                }
            }
        }
    }
    Ok(())
}

/// Adds the prolonged correction of every grid at `depth - 1` to its children.
fn prolong_level<T: Real>(w: &mut Worker<T>, depth: u8, interp: Interpolation) -> Result<()> {
    let r = w.topology().spec().ratio(depth);
    let mut out = w.outboxes();
    for p in w.local_at_depth(depth - 1) {
        let kids = w.topology().nodes()[p.index()].children.clone();
        let b = w.block(p)?;
        let s = b.geom.size;
        let cs = [0, 1, 2].map(|a| s[a] / r[a] as usize);
        for c in kids {
            let coord = w.shared().geom(c).coord;
            let base = [0, 1, 2].map(|a| ((coord[a] % r[a]) as usize * cs[a]) as isize);
            let mut data = Vec::with_capacity((cs[0] + 2) * (cs[1] + 2) * (cs[2] + 2));
            for k in -1..=cs[2] as isize {
                for j in -1..=cs[1] as isize {
                    for i in -1..=cs[0] as isize {
                        data.push(b.corr().get(base[0] + i, base[1] + j, base[2] + k));
                    }
                }
            }
            out[w.owner(c)].push(Message::Grid { to: c, from: p, data });
        }
    }
    for m in w.superstep(out)? {
        let Message::Grid { to, data, .. } = m else {
            return Err(Error::Protocol("unexpected message during prolongation".into()));
        };
        let b = w.block_mut(to)?;
        prolong_add(&mut b.scratch[0], &data, r, interp);
        if let Some(mask) = &b.solid {
            for c in b.scratch[0].interior().collect::<Vec<_>>() {
                if mask.at(c) != 0 {
                    b.scratch[0].put(c, T::zero());
                }
            }
        }
    }
    Ok(())
}

trait CorrAccess<T> {
    fn corr(&self) -> &Array3<T>;
}

impl<T: Real> CorrAccess<T> for Block<T> {
    fn corr(&self) -> &Array3<T> {
        &self.scratch[0]
    }
}

/// Fluid-cell volume integral of a slot over the local grids in `grids`,
/// reduced globally: returns (integral, volume).
fn integral<T: Real>(w: &mut Worker<T>, grids: &[GridId], slot: Slot) -> Result<(f64, f64)> {
    let mut parts = Vec::new();
    for &g in grids {
        let b = w.block(g)?;
        let vol = b.geom.cell_volume();
        let a = b.slot(slot);
        let mut s = 0.0;
        let mut v = 0.0;
        for c in a.interior() {
            if !b.is_solid(c) {
                s += a.at(c).as_f64() * vol;
                v += vol;
            }
        }
        parts.push((u64::from(g.0), vec![s, v]));
    }
    let t = w.allreduce_sum(parts, 2)?;
    Ok((t[0], t[1]))
}

fn shift<T: Real>(w: &mut Worker<T>, grids: &[GridId], slot: Slot, by: f64) -> Result<()> {
    let by = T::lit(by);
    for &g in grids {
        let b = w.block_mut(g)?;
        let solid = b.solid.clone();
        let a = b.slot_mut(slot);
        for c in a.interior().collect::<Vec<_>>() {
            if !solid.as_ref().is_some_and(|m| m.at(c) != 0) {
                a.put(c, a.at(c) - by);
            }
        }
    }
    Ok(())
}

/// Removes the volume-weighted mean of `slot` over the leaves.
pub fn remove_mean<T: Real>(w: &mut Worker<T>, slot: Slot) -> Result<f64> {
    let leaves = w.local_leaves();
    let (s, v) = integral(w, &leaves, slot)?;
    let mean = if v > 0.0 { s / v } else { 0.0 };
    shift(w, &leaves, slot, mean)?;
    Ok(mean)
}

/// One V-cycle on the correction equation; `Slot::Res` on the leaves must
/// hold the composite residual. Adds the correction to `p`.
pub fn v_cycle<T: Real>(w: &mut Worker<T>, prob: &PoissonProblem, cfg: &MGConfig) -> Result<()> {
    let kmax = w.topology().max_depth();
    for b in w.blocks_mut().values_mut() {
        b.scratch[0].fill_all(T::zero());
    }
    for k in (1..=kmax).rev() {
        smooth_level(w, k, prob, cfg, cfg.nu1)?;
        w.exchange(PlanId::Level(k), &[Slot::Corr], prob.interface, ExchangeMode::Faces, Some(prob))?;
        for g in w.local_at_depth(k) {
            block_residual(w.block_mut(g)?, Slot::Corr, Slot::Res, Slot::Tmp);
        }
        restrict_level(w, k)?;
    }
    if prob.is_singular() {
        let roots = w.local_at_depth(0);
        let (s, v) = integral(w, &roots, Slot::Res)?;
        if v > 0.0 {
            shift(w, &roots, Slot::Res, s / v)?;
        }
    }
    match cfg.coarse_solver {
        CoarseSolver::Smoother => smooth_level(w, 0, prob, cfg, cfg.coarsest_sweeps)?,
        CoarseSolver::ConjugateGradient => {
            for g in w.local_at_depth(0) {
                root_cg(w.block_mut(g)?, prob, cfg.coarsest_sweeps);
            }
        }
    }
    for k in 1..=kmax {
        w.exchange(PlanId::Level(k - 1), &[Slot::Corr], prob.interface, ExchangeMode::WithEdges, Some(prob))?;
        prolong_level(w, k, cfg.prolongation)?;
        smooth_level(w, k, prob, cfg, cfg.nu2)?;
    }
    for g in w.local_leaves() {
        let b = w.block_mut(g)?;
        let (p, corr, _) = b.split(Slot::Var(Var::P), Slot::Corr);
        for c in p.interior().collect::<Vec<_>>() {
            p.put(c, p.at(c) + corr.at(c));
        }
    }
    if prob.is_singular() {
        remove_mean(w, Slot::Var(Var::P))?;
    }
    Ok(())
}

/// Solves `A corr = res` on one block whose ghosts are all boundary ghosts,
/// using CG on the symmetric positive semi-definite `-A`. Works in f64.
fn root_cg<T: Real>(b: &mut Block<T>, prob: &PoissonProblem, max_iter: usize) {
    let geom = b.geom.clone();
    let mask = b.solid.as_ref().map(|m| m.as_slice().to_vec());
    let mask = mask.as_deref();
    let ih = inv_h2::<f64>(&geom);
    let size = b.scratch[0].size();
    let to_f64 = |a: &Array3<T>| {
        let mut o = Array3::<f64>::zeros(size);
        for (d, s) in o.as_mut_slice().iter_mut().zip(a.as_slice()) {
            *d = s.as_f64();
        }
        o
    };
    let fluid: Vec<usize> = {
        let probe = Array3::<f64>::zeros(size);
        probe.interior().map(|c| probe.idx(c[0], c[1], c[2])).filter(|&n| !mask.is_some_and(|m| m[n] != 0)).collect()
    };
    if fluid.is_empty() {
        return;
    }
    let singular = prob.is_singular();
    let project = |v: &mut Array3<f64>| {
        if singular {
            let s = v.as_slice();
            let mean = fluid.iter().map(|&n| s[n]).sum::<f64>() / fluid.len() as f64;
            let s = v.as_mut_slice();
            for &n in &fluid {
                s[n] -= mean;
            }
        }
    };
    let apply = |v: &mut Array3<f64>, out: &mut Array3<f64>| {
        for f in Face::ALL {
            apply_rule(v, &geom, f, &prob.rule(Slot::Corr, &geom, f), false);
        }
        let st = [0, 1, 2].map(|a| v.stride(a));
        let (vs, os) = (v.as_slice(), out.as_mut_slice());
        for &n in &fluid {
            let (s, d) = gather(vs, mask, n, st, ih);
            os[n] = d * vs[n] - s;
        }
    };
    let dot = |a: &Array3<f64>, c: &Array3<f64>| fluid.iter().map(|&n| a.as_slice()[n] * c.as_slice()[n]).sum::<f64>();
    let mut x = Array3::<f64>::zeros(size);
    let mut r = to_f64(&b.scratch[1]);
    for v in r.as_mut_slice() {
        *v = -*v;
    }
    for (n, v) in r.as_mut_slice().iter_mut().enumerate() {
        if mask.is_some_and(|m| m[n] != 0) {
            *v = 0.0;
        }
    }
    project(&mut r);
    let mut p = r.clone();
    let mut q = Array3::<f64>::zeros(size);
    let mut rr = dot(&r, &r);
    let stop = rr * 1e-20;
    for _ in 0..max_iter {
        if rr <= stop || rr == 0.0 {
            break;
        }
        apply(&mut p, &mut q);
        let pq = dot(&p, &q);
        if pq <= 0.0 {
            break;
        }
        let alpha = rr / pq;
        for &n in &fluid {
            x.as_mut_slice()[n] += alpha * p.as_slice()[n];
            r.as_mut_slice()[n] -= alpha * q.as_slice()[n];
        }
        project(&mut r);
        let next = dot(&r, &r);
        let beta = next / rr;
        rr = next;
        for &n in &fluid {
            let v = r.as_slice()[n] + beta * p.as_slice()[n];
            p.as_mut_slice()[n] = v;
        }
    }
    let corr = &mut b.scratch[0];
    for &n in &fluid {
        corr.as_mut_slice()[n] = T::lit(x.as_slice()[n]);
    }
}

/// Iterates V-cycles until the residual RMS drops to `cfg.tol` (at least one
/// cycle) or `cfg.max_cycles` is reached. Collective: every worker returns
/// the same report apart from timings.
pub fn solve<T: Real>(w: &mut Worker<T>, prob: &PoissonProblem, cfg: &MGConfig) -> Result<SolveReport> {
    cfg.validate()?;
    w.check_plan(PlanId::Leaves)?;
    if prob.is_singular() {
        // Only the compatible part of the right-hand side can be matched.
        remove_mean(w, Slot::Var(Var::Rhs))?;
    }
    let r0 = composite_residual(w, prob)?;
    let mut report = SolveReport {
        initial_residual: r0,
        final_residual: r0,
        tol: cfg.tol,
        ..SolveReport::default()
    };
    let mut above = 0;
    while report.cycles < cfg.max_cycles {
        let t0 = Instant::now();
        v_cycle(w, prob, cfg)?;
        let r = composite_residual(w, prob)?;
        report.cycle_times.push(t0.elapsed().as_secs_f64());
        report.cycles += 1;
        report.history.push(r);
        report.final_residual = r;
        if !r.is_finite() || r > 10.0 * r0.max(cfg.tol) {
            above += 1;
            if above >= 3 || !r.is_finite() {
                return Err(Error::Divergence(Box::new(report)));
            }
        } else {
            above = 0;
        }
        if r <= cfg.tol {
            report.converged = true;
            break;
        }
    }
    Ok(report)
}

/// Runs [`solve`] on every worker of `pool` and returns rank 0's report.
pub fn solve_pool<T: Real>(pool: &mut WorkerPool<T>, prob: &PoissonProblem, cfg: &MGConfig) -> Result<SolveReport> {
    let mut reports = pool.run(|w| solve(w, prob, cfg))?;
    Ok(reports.swap_remove(0))
}
