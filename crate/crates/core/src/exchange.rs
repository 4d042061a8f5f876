//! Halo exchange plans and the transfer operators behind them.
//!
//! A plan lists, for a set of grids, every transfer that fills a ghost slab:
//! same-level copies, coarse-to-fine interpolation and fine-to-coarse
//! averaging. Each transfer reads only interior cells of its source, so all
//! transfers of one plan can be applied in a single bulk-synchronous phase.
//!
//! Fine-to-coarse ghosts are the mean over the fine cells that cover the
//! coarse ghost cell (all `r` fine layers along the normal). Coarse-to-fine
//! ghosts are either the covering coarse value or a tensor-product linear
//! interpolation of coarse cell centres; stencils that would leave the
//! coarse interior are shifted inward and extrapolate. Both operators
//! preserve constants; the linear variant is exact for linear fields.

use std::collections::{BTreeMap, HashMap};

use crate::dgrid::{Array3, DGridSpec, FieldSet, Var};
use crate::error::{Error, Result};
use crate::partition::PartitionMap;
use crate::scalar::Real;
use crate::topology::{Face, GridId, Topology};

/// Half-open index box in block-local cell coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IBox {
    pub lo: [isize; 3],
    pub hi: [isize; 3],
}

impl IBox {
    pub fn volume(&self) -> usize {
        (0..3).map(|a| (self.hi[a] - self.lo[a]).max(0) as usize).product()
    }

    pub fn contains(&self, c: [isize; 3]) -> bool {
        (0..3).all(|a| c[a] >= self.lo[a] && c[a] < self.hi[a])
    }

    /// Cells in storage order (x fastest).
    pub fn cells(&self) -> impl Iterator<Item = [isize; 3]> {
        let IBox { lo, hi } = *self;
        (lo[2]..hi[2]).flat_map(move |k| (lo[1]..hi[1]).flat_map(move |j| (lo[0]..hi[0]).map(move |i| [i, j, k])))
    }

    #[inline]
    fn linear(&self, c: [isize; 3]) -> usize {
        let nx = (self.hi[0] - self.lo[0]) as usize;
        let ny = (self.hi[1] - self.lo[1]) as usize;
        (c[0] - self.lo[0]) as usize + nx * ((c[1] - self.lo[1]) as usize + ny * (c[2] - self.lo[2]) as usize)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TransferKind {
    /// Same-level copy of the neighbour's adjacent interior slab.
    Copy,
    /// Coarse interior values interpolated into fine ghost cells.
    CoarseToFine,
    /// Fine interior values averaged into coarse ghost cells.
    FineToCoarse,
}

/// Coarse-to-fine interface operator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Interpolation {
    #[default]
    PiecewiseConstant,
    Trilinear,
}

/// Whether ghost edges and corners are filled as well as face ghosts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExchangeMode {
    Faces,
    /// Axis-by-axis sweeps (x, then y, then z) whose slabs include the ghost
    /// layers of the axes already processed.
    WithEdges,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transfer {
    pub kind: TransferKind,
    pub src: GridId,
    pub dst: GridId,
    /// Face of `dst` whose ghost layer is written.
    pub face: Face,
    pub src_box: IBox,
    pub dst_box: IBox,
    /// Boxes used by the axis-sweep mode; identical to the face boxes for
    /// fine-to-coarse transfers.
    pub src_box_ext: IBox,
    pub dst_box_ext: IBox,
    /// Refinement ratio between the coarse and the fine side.
    pub ratio: [u32; 3],
    pub src_offset: [i64; 3],
    pub dst_offset: [i64; 3],
}

impl Transfer {
    /// Ghost cells written per application.
    pub fn volume(&self) -> usize {
        self.dst_box.volume()
    }

    pub fn boxes(&self, mode: ExchangeMode) -> (IBox, IBox) {
        match mode {
            ExchangeMode::Faces => (self.src_box, self.dst_box),
            ExchangeMode::WithEdges => (self.src_box_ext, self.dst_box_ext),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExchangePlan {
    pub transfers: Vec<Transfer>,
    /// Faces on the physical boundary; their ghosts are owned by boundary
    /// conditions, not by the exchange.
    pub boundary: Vec<(GridId, Face)>,
    pub grids: Vec<GridId>,
    pub size: [usize; 3],
    /// Partition generation this plan was bound to.
    pub generation: u64,
    /// Ghost cells per rank pair and exchanged variable: `(from, to) -> cells`.
    pub pair_volume: BTreeMap<(usize, usize), usize>,
}

/// Builds the exchange plan over the leaves of `topo`.
pub fn plan_exchange(topo: &Topology, map: &PartitionMap, spec: &DGridSpec) -> Result<ExchangePlan> {
    let leaves: Vec<GridId> = topo.leaves().collect();
    let mut plan = ExchangePlan::build(topo, &leaves, spec.size)?;
    plan.bind(map);
    Ok(plan)
}

fn plane(face: Face, size: [usize; 3], ghost: bool) -> isize {
    let s = size[face.axis()] as isize;
    match (face.is_positive(), ghost) {
        (true, true) => s,
        (false, true) => -1,
        (true, false) => s - 1,
        (false, false) => 0,
    }
}

/// Face ghost box with transverse axes `< axis` optionally widened by the halo.
fn ghost_box(face: Face, size: [usize; 3], widen: bool) -> IBox {
    let a = face.axis();
    let mut lo = [0isize; 3];
    let mut hi = size.map(|s| s as isize);
    for b in 0..3 {
        if b != a && widen && b < a {
            lo[b] = -1;
            hi[b] += 1;
        }
    }
    let p = plane(face, size, true);
    lo[a] = p;
    hi[a] = p + 1;
    IBox { lo, hi }
}

#[inline]
fn div_floor(a: i64, b: i64) -> i64 {
    a.div_euclid(b)
}

/// Coarse interior cells needed to interpolate into `dst` (fine local box).
fn c2f_source_box(dst: IBox, fine_off: [i64; 3], coarse_off: [i64; 3], ratio: [u32; 3], coarse_size: [usize; 3]) -> IBox {
    let mut lo = [0isize; 3];
    let mut hi = [0isize; 3];
    for a in 0..3 {
        let r = i64::from(ratio[a]);
        let g0 = fine_off[a] + dst.lo[a] as i64;
        let g1 = fine_off[a] + dst.hi[a] as i64 - 1;
        let c0 = div_floor(g0, r) - coarse_off[a] - 1;
        let c1 = div_floor(g1, r) - coarse_off[a] + 1;
        let s = coarse_size[a] as i64;
        lo[a] = c0.clamp(0, s - 1) as isize;
        hi[a] = (c1.clamp(0, s - 1) + 1) as isize;
    }
    IBox { lo, hi }
}

impl ExchangePlan {
    /// Plan over an arbitrary grid set: the leaves for the composite problem,
    /// or all grids of one depth for a multigrid level. Coarse-to-fine
    /// transfers may read from grids outside the set; fine-to-coarse
    /// transfers only arise between members.
    pub fn build(topo: &Topology, set: &[GridId], size: [usize; 3]) -> Result<ExchangePlan> {
        let spec = topo.spec();
        for d in 1..=topo.max_depth() {
            let r = spec.ratio(d);
            if (0..3).any(|a| !size[a].is_multiple_of(r[a] as usize)) {
                return Err(Error::UnsupportedRefinement(format!(
                    "d-grid size {size:?} not divisible by refinement {r:?}"
                )));
            }
        }
        let mut member = vec![false; topo.len()];
        let mut grids = set.to_vec();
        grids.sort();
        for g in &grids {
            member[g.index()] = true;
        }
        let offset = |id: GridId| -> [i64; 3] {
            let n = &topo.nodes()[id.index()];
            [0, 1, 2].map(|a| i64::from(n.coord[a]) * size[a] as i64)
        };
        let mut transfers = Vec::new();
        let mut boundary = Vec::new();
        for &g in &grids {
            let node = topo.node(g)?;
            for face in Face::ALL {
                let Some(slot) = topo.slot_across(node.depth, node.coord, face) else {
                    boundary.push((g, face));
                    continue;
                };
                if let Some(n) = topo.node_at(node.depth, slot) {
                    if member[n.index()] {
                        let shift = face.sign() * size[face.axis()] as i64;
                        let to_src = |b: IBox| -> IBox {
                            let mut b = b;
                            let a = face.axis();
                            b.lo[a] -= shift as isize;
                            b.hi[a] -= shift as isize;
                            b
                        };
                        let dst_box = ghost_box(face, size, false);
                        let dst_box_ext = ghost_box(face, size, true);
                        transfers.push(Transfer {
                            kind: TransferKind::Copy,
                            src: n,
                            dst: g,
                            face,
                            src_box: to_src(dst_box),
                            dst_box,
                            src_box_ext: to_src(dst_box_ext),
                            dst_box_ext,
                            ratio: [1; 3],
                            src_offset: offset(n),
                            dst_offset: offset(g),
                        });
                        continue;
                    }
                    // Neighbour is refined: its face children feed our ghosts.
                    let kids = topo.children_on_face(n, face.opposite());
                    let r = spec.ratio(node.depth + 1);
                    for c in kids {
                        if !member[c.index()] {
                            let cn = topo.node(c)?;
                            return Err(if cn.is_leaf() {
                                Error::Inconsistent(format!("{c} abuts {g} but is not in the grid set"))
                            } else {
                                Error::BalanceViolation {
                                    a: g,
                                    depth_a: node.depth,
                                    b: c,
                                    depth_b: cn.depth + 1,
                                }
                            });
                        }
                        let (src_box, dst_box) = f2c_boxes(face, size, r, offset(g), offset(c));
                        transfers.push(Transfer {
                            kind: TransferKind::FineToCoarse,
                            src: c,
                            dst: g,
                            face,
                            src_box,
                            dst_box,
                            src_box_ext: src_box,
                            dst_box_ext: dst_box,
                            ratio: r,
                            src_offset: offset(c),
                            dst_offset: offset(g),
                        });
                    }
                    continue;
                }
                let cover = topo
                    .covering(node.depth, slot)
                    .ok_or_else(|| Error::Inconsistent(format!("nothing covers the {face} side of {g}")))?;
                let cd = topo.node(cover)?.depth;
                if cd + 1 != node.depth {
                    return Err(Error::BalanceViolation {
                        a: cover,
                        depth_a: cd,
                        b: g,
                        depth_b: node.depth,
                    });
                }
                let r = spec.ratio(node.depth);
                let dst_box = ghost_box(face, size, false);
                let dst_box_ext = ghost_box(face, size, true);
                let (fo, co) = (offset(g), offset(cover));
                transfers.push(Transfer {
                    kind: TransferKind::CoarseToFine,
                    src: cover,
                    dst: g,
                    face,
                    src_box: c2f_source_box(dst_box, fo, co, r, size),
                    dst_box,
                    src_box_ext: c2f_source_box(dst_box_ext, fo, co, r, size),
                    dst_box_ext,
                    ratio: r,
                    src_offset: co,
                    dst_offset: fo,
                });
            }
        }
        Ok(ExchangePlan {
            transfers,
            boundary,
            grids,
            size,
            generation: 0,
            pair_volume: BTreeMap::new(),
        })
    }

    /// Plan over all grids at `depth`, the grid set of one multigrid level.
    pub fn for_level(topo: &Topology, depth: u8, size: [usize; 3]) -> Result<ExchangePlan> {
        ExchangePlan::build(topo, topo.at_depth(depth), size)
    }

    /// Records the partition generation and per-rank-pair volumes.
    pub fn bind(&mut self, map: &PartitionMap) {
        self.generation = map.generation();
        self.pair_volume.clear();
        for t in &self.transfers {
            let key = (map.owner_unchecked(t.src), map.owner_unchecked(t.dst));
            *self.pair_volume.entry(key).or_default() += t.volume();
        }
    }

    pub fn same_level(&self) -> impl Iterator<Item = &Transfer> {
        self.of_kind(TransferKind::Copy)
    }

    pub fn coarse_to_fine(&self) -> impl Iterator<Item = &Transfer> {
        self.of_kind(TransferKind::CoarseToFine)
    }

    pub fn fine_to_coarse(&self) -> impl Iterator<Item = &Transfer> {
        self.of_kind(TransferKind::FineToCoarse)
    }

    fn of_kind(&self, kind: TransferKind) -> impl Iterator<Item = &Transfer> {
        self.transfers.iter().filter(move |t| t.kind == kind)
    }

    /// Ghost cells filled per exchanged variable.
    pub fn volume(&self) -> usize {
        self.transfers.iter().map(Transfer::volume).sum()
    }
}

fn f2c_boxes(face: Face, size: [usize; 3], r: [u32; 3], coarse_off: [i64; 3], fine_off: [i64; 3]) -> (IBox, IBox) {
    let a = face.axis();
    let mut dst = IBox { lo: [0; 3], hi: [0; 3] };
    let mut src = IBox { lo: [0; 3], hi: size.map(|s| s as isize) };
    for b in 0..3 {
        if b == a {
            continue;
        }
        let rb = i64::from(r[b]);
        let c0 = div_floor(fine_off[b], rb) - coarse_off[b];
        let c1 = div_floor(fine_off[b] + size[b] as i64, rb) - coarse_off[b];
        dst.lo[b] = c0 as isize;
        dst.hi[b] = c1 as isize;
    }
    let p = plane(face, size, true);
    dst.lo[a] = p;
    dst.hi[a] = p + 1;
    // Fine layers adjacent to the interface, r deep.
    let depth = r[a] as isize;
    if face.is_positive() {
        src.lo[a] = 0;
        src.hi[a] = depth;
    } else {
        src.lo[a] = size[a] as isize - depth;
        src.hi[a] = size[a] as isize;
    }
    (src, dst)
}

/// Packs the source cells of a transfer.
pub fn pack<T: Real>(t: &Transfer, src: &Array3<T>, mode: ExchangeMode) -> Vec<T> {
    let (sb, _) = t.boxes(mode);
    let mut out = Vec::with_capacity(sb.volume());
    for c in sb.cells() {
        out.push(src.at(c));
    }
    out
}

/// Writes the ghost cells of a transfer from packed source data.
pub fn unpack<T: Real>(t: &Transfer, data: &[T], dst: &mut Array3<T>, mode: ExchangeMode, interp: Interpolation) -> Result<()> {
    let (sb, db) = t.boxes(mode);
    if data.len() != sb.volume() {
        return Err(Error::Inconsistent(format!(
            "transfer {} -> {} expected {} values, got {}",
            t.src,
            t.dst,
            sb.volume(),
            data.len()
        )));
    }
    match t.kind {
        TransferKind::Copy => {
            for (c, &v) in db.cells().zip(data) {
                dst.put(c, v);
            }
        }
        TransferKind::FineToCoarse => {
            let r = t.ratio.map(|x| x as i64);
            let n = T::lit(1.0 / (r[0] * r[1] * r[2]) as f64);
            for c in db.cells() {
                let mut sum = T::zero();
                for dk in 0..r[2] {
                    for dj in 0..r[1] {
                        for di in 0..r[0] {
                            let d = [di, dj, dk];
                            let f = [0, 1, 2].map(|a| {
                                ((t.dst_offset[a] + c[a] as i64) * r[a] + d[a] - t.src_offset[a]) as isize
                            });
                            sum += data[sb.linear(f)];
                        }
                    }
                }
                dst.put(c, sum * n);
            }
        }
        TransferKind::CoarseToFine => {
            for c in db.cells() {
                dst.put(c, interpolate(t, sb, data, c, interp));
            }
        }
    }
    Ok(())
}

/// Coarse-to-fine value at fine-local cell `c` from packed coarse box data.
fn interpolate<T: Real>(t: &Transfer, sb: IBox, data: &[T], c: [isize; 3], interp: Interpolation) -> T {
    let mut base = [0isize; 3];
    let mut w = [[1.0f64, 0.0]; 3];
    let mut two = [false; 3];
    for a in 0..3 {
        let r = i64::from(t.ratio[a]);
        let g = t.dst_offset[a] + c[a] as i64;
        let lo = sb.lo[a];
        let hi = sb.hi[a] - 1;
        match interp {
            Interpolation::PiecewiseConstant => {
                let cc = (div_floor(g, r) - t.src_offset[a]) as isize;
                base[a] = cc.clamp(lo, hi);
            }
            Interpolation::Trilinear => {
                if r == 1 || hi == lo {
                    base[a] = ((div_floor(g, r) - t.src_offset[a]) as isize).clamp(lo, hi);
                    continue;
                }
                // Fine centre in coarse-centre index units.
                let x = (g as f64 + 0.5) / r as f64 - 0.5 - t.src_offset[a] as f64;
                let a0 = (x.floor() as isize).clamp(lo, hi - 1);
                let s = x - a0 as f64;
                base[a] = a0;
                w[a] = [1.0 - s, s];
                two[a] = true;
            }
        }
    }
    let mut v = T::zero();
    for dk in 0..=usize::from(two[2]) {
        for dj in 0..=usize::from(two[1]) {
            for di in 0..=usize::from(two[0]) {
                let weight = w[0][di] * w[1][dj] * w[2][dk];
                let cell = [base[0] + di as isize, base[1] + dj as isize, base[2] + dk as isize];
                v += T::lit(weight) * data[sb.linear(cell)];
            }
        }
    }
    v
}

/// Applies one plan to a variable over grids held in a single address space.
pub fn exchange<T: Real>(
    plan: &ExchangePlan,
    var: Var,
    grids: &mut HashMap<GridId, FieldSet<T>>,
    interp: Interpolation,
) -> Result<()> {
    exchange_all(plan, &[var], grids, interp).map(|_| ())
}

/// Exchanges every listed variable; returns the number of ghost cells written.
pub fn exchange_all<T: Real>(
    plan: &ExchangePlan,
    vars: &[Var],
    grids: &mut HashMap<GridId, FieldSet<T>>,
    interp: Interpolation,
) -> Result<usize> {
    let mut messages = Vec::with_capacity(plan.transfers.len() * vars.len());
    for t in &plan.transfers {
        let src = grids
            .get(&t.src)
            .ok_or_else(|| Error::Inconsistent(format!("source grid {} missing", t.src)))?;
        for &v in vars {
            messages.push(pack(t, &src[v], ExchangeMode::Faces));
        }
    }
    let mut written = 0;
    let mut it = messages.into_iter();
    for t in &plan.transfers {
        let dst = grids
            .get_mut(&t.dst)
            .ok_or_else(|| Error::Inconsistent(format!("destination grid {} missing", t.dst)))?;
        for &v in vars {
            let data = it.next().expect("one message per transfer and variable");
            unpack(t, &data, &mut dst[v], ExchangeMode::Faces, interp)?;
            written += t.volume();
        }
    }
    Ok(written)
}
