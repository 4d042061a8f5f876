//! SPMD worker runtime over an in-process message transport.
//!
//! Each worker owns the blocks the partition assigns to it and talks to its
//! peers only through [`Comm::superstep`]: every worker posts one bundle per
//! peer, then waits for one bundle from every peer. Bundles carry a phase
//! number so a message from a later phase can never be applied early.
//! The neighbourhood server runs on its own thread and only ever sees
//! protocol records.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::time::Duration;

use crate::dgrid::{allocate, Array3, BlockGeometry, DGridSpec, DomainBox, FieldSet, Var};
use crate::error::{Error, Result};
use crate::exchange::{pack, unpack, ExchangeMode, ExchangePlan, IBox, Interpolation, Transfer};
use crate::partition::{assign, PartitionMap};
use crate::scalar::Real;
use crate::server::{Request, Response, Server, ServerHandle, ServerState, ServerStats};
use crate::topology::{Face, GridId, Topology};

/// Array of a block addressed by an exchange or kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    Var(Var),
    /// Multigrid correction.
    Corr,
    /// Multigrid right-hand side on coarse levels.
    Res,
    Tmp,
}

impl Slot {
    /// (is scratch, index within its container)
    fn place(self) -> (bool, usize) {
        match self {
            Slot::Var(v) => (false, v.index()),
            Slot::Corr => (true, 0),
            Slot::Res => (true, 1),
            Slot::Tmp => (true, 2),
        }
    }
}

fn two<A>(v: &mut [A], a: usize, b: usize) -> (&mut A, &A) {
    if a < b {
        let (lo, hi) = v.split_at_mut(b);
        (&mut lo[a], &hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(a);
        (&mut hi[0], &lo[b])
    }
}

/// One d-grid with its solver scratch space.
#[derive(Clone, Debug)]
pub struct Block<T> {
    pub geom: BlockGeometry,
    pub leaf: bool,
    pub fields: FieldSet<T>,
    /// Correction, coarse right-hand side and temporary, in [`Slot`] order.
    pub scratch: Vec<Array3<T>>,
    /// 1 marks a solid cell; halo included.
    pub solid: Option<Array3<u8>>,
    /// Previous-step tendencies of u1, u2, u3 and T for multi-step schemes.
    pub history: Vec<Array3<T>>,
}

impl<T: Real> Block<T> {
    pub fn new(geom: BlockGeometry, leaf: bool) -> Self {
        let spec = geom.spec();
        Block {
            fields: allocate(&spec),
            scratch: (0..3).map(|_| Array3::zeros(spec.size)).collect(),
            solid: None,
            history: Vec::new(),
            geom,
            leaf,
        }
    }

    pub fn slot(&self, s: Slot) -> &Array3<T> {
        match s.place() {
            (false, i) => &self.fields.arrays()[i],
            (true, i) => &self.scratch[i],
        }
    }

    pub fn slot_mut(&mut self, s: Slot) -> &mut Array3<T> {
        match s.place() {
            (false, i) => &mut self.fields.arrays_mut()[i],
            (true, i) => &mut self.scratch[i],
        }
    }

    /// Mutable `w`, shared `r` and the solid mask at once.
    pub fn split(&mut self, w: Slot, r: Slot) -> (&mut Array3<T>, &Array3<T>, Option<&Array3<u8>>) {
        assert_ne!(w, r, "split needs two distinct slots");
        let Block { fields, scratch, solid, .. } = self;
        let solid = solid.as_ref();
        let (x, y) = match (w.place(), r.place()) {
            ((false, a), (false, b)) => two(fields.arrays_mut(), a, b),
            ((true, a), (true, b)) => two(scratch, a, b),
            ((false, a), (true, b)) => (&mut fields.arrays_mut()[a], &scratch[b]),
            ((true, a), (false, b)) => (&mut scratch[a], &fields.arrays()[b]),
        };
        (x, y, solid)
    }

    #[inline]
    pub fn is_solid(&self, c: [isize; 3]) -> bool {
        self.solid.as_ref().is_some_and(|m| m.at(c) != 0)
    }

    /// Bytes carried when the block migrates.
    pub fn payload_bytes(&self) -> usize {
        self.fields.payload_bytes()
    }
}

/// How a physical-boundary ghost layer is filled.
pub enum GhostRule<'a> {
    /// Leave the ghosts as they are.
    Keep,
    /// Zero normal gradient.
    Copy,
    /// Face value fixed: ghost = 2 v - interior.
    Reflect(f64),
    /// Face value `scale * f(position on the face)`.
    ReflectWith(&'a (dyn Fn([f64; 3]) -> f64 + Sync), f64),
    /// Outward normal gradient fixed: ghost = interior + g h.
    Gradient(f64),
}

/// Boundary conditions for every slot on every hull face.
pub trait Boundary: Sync {
    fn rule(&self, slot: Slot, geom: &BlockGeometry, face: Face) -> GhostRule<'_>;
}

/// Ghost plane of `face`, optionally widened over the transverse axes
/// already swept.
pub fn ghost_plane(face: Face, size: [usize; 3], widen: bool) -> IBox {
    let a = face.axis();
    let mut lo = [0isize; 3];
    let mut hi = size.map(|s| s as isize);
    if widen {
        for b in 0..a {
            lo[b] = -1;
            hi[b] += 1;
        }
    }
    let p = if face.is_positive() { size[a] as isize } else { -1 };
    lo[a] = p;
    hi[a] = p + 1;
    IBox { lo, hi }
}

pub fn apply_rule<T: Real>(arr: &mut Array3<T>, geom: &BlockGeometry, face: Face, rule: &GhostRule<'_>, widen: bool) {
    if matches!(rule, GhostRule::Keep) {
        return;
    }
    let a = face.axis();
    let h = geom.spacing[a];
    let inward: isize = if face.is_positive() { -1 } else { 1 };
    for g in ghost_plane(face, geom.size, widen).cells() {
        let mut c = g;
        c[a] += inward;
        let inner = arr.at(c);
        let v = match rule {
            GhostRule::Keep => unreachable!(),
            GhostRule::Copy => inner,
            GhostRule::Reflect(v) => T::lit(2.0 * v) - inner,
            GhostRule::ReflectWith(f, scale) => {
                let mut x = geom.centre(c);
                x[a] -= inward as f64 * 0.5 * h;
                T::lit(2.0 * scale * f(x)) - inner
            }
            GhostRule::Gradient(g) => inner + T::lit(g * h),
        };
        arr.put(g, v);
    }
}

/// Message bodies on the worker transport.
#[derive(Debug)]
pub enum Message<T> {
    Halo { transfer: u32, slot: Slot, data: Vec<T> },
    /// Values addressed to one block, tagged by the sender's grid.
    Grid { to: GridId, from: GridId, data: Vec<T> },
    Reduce(Vec<(u64, Vec<f64>)>),
    Migrate(Box<Block<T>>),
}

impl<T: Real> Message<T> {
    fn field_bytes(&self) -> usize {
        match self {
            Message::Halo { data, .. } | Message::Grid { data, .. } => data.len() * T::BYTES,
            Message::Reduce(_) => 0,
            Message::Migrate(b) => b.payload_bytes(),
        }
    }
}

struct Envelope<T> {
    from: usize,
    phase: u64,
    items: Vec<Message<T>>,
}

/// Transport counters shared by all workers of a pool.
#[derive(Debug, Default)]
pub struct TransportStats {
    pub supersteps: AtomicU64,
    pub messages: AtomicU64,
    /// Field payload bytes moved between distinct workers.
    pub remote_field_bytes: AtomicU64,
    /// Field payload bytes moved within one worker.
    pub local_field_bytes: AtomicU64,
}

impl TransportStats {
    pub fn snapshot(&self) -> [u64; 4] {
        [
            self.supersteps.load(Ordering::Relaxed),
            self.messages.load(Ordering::Relaxed),
            self.remote_field_bytes.load(Ordering::Relaxed),
            self.local_field_bytes.load(Ordering::Relaxed),
        ]
    }
}

/// One worker's endpoint.
pub struct Comm<T> {
    rank: usize,
    peers: Vec<Sender<Envelope<T>>>,
    inbox: Receiver<Envelope<T>>,
    phase: u64,
    early: Vec<Envelope<T>>,
    abort: Arc<AtomicBool>,
    stats: Arc<TransportStats>,
}

impl<T: Real> Comm<T> {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.peers.len()
    }

    pub fn phase(&self) -> u64 {
        self.phase
    }

    /// Posts `out[dst]` to every worker and returns everything addressed to
    /// this worker in this phase, ordered by sender rank.
    pub fn superstep(&mut self, out: Vec<Vec<Message<T>>>) -> Result<Vec<Message<T>>> {
        let p = self.size();
        if out.len() != p {
            return Err(Error::Inconsistent(format!("{} outboxes for {} workers", out.len(), p)));
        }
        self.phase += 1;
        self.stats.supersteps.fetch_add(1, Ordering::Relaxed);
        let mut by_rank: Vec<Option<Vec<Message<T>>>> = (0..p).map(|_| None).collect();
        for (dst, items) in out.into_iter().enumerate() {
            let bytes: usize = items.iter().map(Message::field_bytes).sum();
            self.stats.messages.fetch_add(items.len() as u64, Ordering::Relaxed);
            if dst == self.rank {
                self.stats.local_field_bytes.fetch_add(bytes as u64, Ordering::Relaxed);
                by_rank[dst] = Some(items);
            } else {
                self.stats.remote_field_bytes.fetch_add(bytes as u64, Ordering::Relaxed);
                let env = Envelope {
                    from: self.rank,
                    phase: self.phase,
                    items,
                };
                self.peers[dst]
                    .send(env)
                    .map_err(|_| Error::Protocol(format!("worker {dst} hung up")))?;
            }
        }
        let mut missing = p - 1;
        let early = std::mem::take(&mut self.early);
        for env in early {
            if env.phase == self.phase {
                self.accept(env, &mut by_rank)?;
                missing -= 1;
            } else {
                self.early.push(env);
            }
        }
        while missing > 0 {
            match self.inbox.recv_timeout(Duration::from_millis(20)) {
                Ok(env) if env.phase == self.phase => {
                    self.accept(env, &mut by_rank)?;
                    missing -= 1;
                }
                Ok(env) if env.phase > self.phase => self.early.push(env),
                Ok(env) => {
                    return Err(Error::Protocol(format!(
                        "worker {} received phase {} bundle from worker {} while in phase {}",
                        self.rank, env.phase, env.from, self.phase
                    )))
                }
                Err(RecvTimeoutError::Timeout) => {
                    if self.abort.load(Ordering::Acquire) {
                        return Err(Error::Protocol("aborted by a failing peer".into()));
                    }
                }
                Err(RecvTimeoutError::Disconnected) => return Err(Error::Protocol("transport closed".into())),
            }
        }
        Ok(by_rank.into_iter().flatten().flatten().collect())
    }

    fn accept(&self, env: Envelope<T>, by_rank: &mut [Option<Vec<Message<T>>>]) -> Result<()> {
        if by_rank[env.from].is_some() {
            return Err(Error::Protocol(format!(
                "duplicate bundle from worker {} in phase {}",
                env.from, env.phase
            )));
        }
        by_rank[env.from] = Some(env.items);
        Ok(())
    }

    fn reset(&mut self, phase: u64) {
        while self.inbox.try_recv().is_ok() {}
        self.early.clear();
        self.phase = phase;
    }
}

/// Which exchange plan an operation uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlanId {
    Leaves,
    Level(u8),
}

/// Read-only state every worker sees.
#[derive(Debug)]
pub struct Shared {
    pub topology: Arc<Topology>,
    pub domain: DomainBox,
    pub size: [usize; 3],
    pub geoms: Vec<BlockGeometry>,
    pub leaf_plan: ExchangePlan,
    /// Indexed by depth.
    pub level_plans: Vec<ExchangePlan>,
}

impl Shared {
    pub fn plan(&self, id: PlanId) -> &ExchangePlan {
        match id {
            PlanId::Leaves => &self.leaf_plan,
            PlanId::Level(d) => &self.level_plans[usize::from(d)],
        }
    }

    pub fn geom(&self, id: GridId) -> &BlockGeometry {
        &self.geoms[id.index()]
    }

    fn bind(&mut self, map: &PartitionMap) {
        self.leaf_plan.bind(map);
        for p in &mut self.level_plans {
            p.bind(map);
        }
    }
}

/// SPMD context handed to the closure of [`WorkerPool::run`].
pub struct Worker<T> {
    comm: Comm<T>,
    shared: Arc<Shared>,
    map: Arc<PartitionMap>,
    blocks: BTreeMap<GridId, Block<T>>,
    server: ServerHandle,
}

impl<T: Real> Worker<T> {
    pub fn rank(&self) -> usize {
        self.comm.rank
    }

    pub fn workers(&self) -> usize {
        self.comm.size()
    }

    pub fn shared(&self) -> &Arc<Shared> {
        &self.shared
    }

    pub fn topology(&self) -> &Topology {
        &self.shared.topology
    }

    pub fn map(&self) -> &PartitionMap {
        &self.map
    }

    pub fn server(&self) -> &ServerHandle {
        &self.server
    }

    pub fn comm(&mut self) -> &mut Comm<T> {
        &mut self.comm
    }

    pub fn blocks(&self) -> &BTreeMap<GridId, Block<T>> {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut BTreeMap<GridId, Block<T>> {
        &mut self.blocks
    }

    pub fn block(&self, id: GridId) -> Result<&Block<T>> {
        self.blocks.get(&id).ok_or(Error::UnknownGrid(id))
    }

    pub fn block_mut(&mut self, id: GridId) -> Result<&mut Block<T>> {
        self.blocks.get_mut(&id).ok_or(Error::UnknownGrid(id))
    }

    #[inline]
    pub fn owner(&self, id: GridId) -> usize {
        self.map.owner_unchecked(id)
    }

    pub fn owns(&self, id: GridId) -> bool {
        self.blocks.contains_key(&id)
    }

    /// Locally owned leaves in id order.
    pub fn local_leaves(&self) -> Vec<GridId> {
        self.blocks.iter().filter(|(_, b)| b.leaf).map(|(&id, _)| id).collect()
    }

    /// Locally owned grids at `depth` in id order.
    pub fn local_at_depth(&self, depth: u8) -> Vec<GridId> {
        self.blocks
            .iter()
            .filter(|(_, b)| b.geom.depth == depth)
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn superstep(&mut self, out: Vec<Vec<Message<T>>>) -> Result<Vec<Message<T>>> {
        self.comm.superstep(out)
    }

    pub fn barrier(&mut self) -> Result<()> {
        let p = self.workers();
        self.superstep((0..p).map(|_| Vec::new()).collect()).map(|_| ())
    }

    pub fn outboxes(&self) -> Vec<Vec<Message<T>>> {
        (0..self.workers()).map(|_| Vec::new()).collect()
    }

    /// Fails if `plan` was bound to another partition generation.
    pub fn check_plan(&self, plan: PlanId) -> Result<()> {
        let p = self.shared.plan(plan);
        if p.generation != self.map.generation() {
            return Err(Error::StalePlan {
                plan: p.generation,
                map: self.map.generation(),
            });
        }
        Ok(())
    }

    /// Fills ghosts of `slots` on every grid of `plan`: interface ghosts from
    /// neighbours, hull ghosts from `bc` when given.
    pub fn exchange(
        &mut self,
        plan: PlanId,
        slots: &[Slot],
        interp: Interpolation,
        mode: ExchangeMode,
        bc: Option<&dyn Boundary>,
    ) -> Result<()> {
        self.check_plan(plan)?;
        if slots.is_empty() {
            return Ok(());
        }
        let shared = Arc::clone(&self.shared);
        let p = shared.plan(plan);
        match mode {
            ExchangeMode::Faces => {
                self.exchange_phase(p, None, slots, mode, interp)?;
                if let Some(bc) = bc {
                    self.apply_boundary(p, None, slots, bc, false);
                }
            }
            ExchangeMode::WithEdges => {
                for axis in 0..3 {
                    self.exchange_phase(p, Some(axis), slots, mode, interp)?;
                    if let Some(bc) = bc {
                        self.apply_boundary(p, Some(axis), slots, bc, true);
                    }
                }
            }
        }
        Ok(())
    }

    fn exchange_phase(
        &mut self,
        plan: &ExchangePlan,
        axis: Option<usize>,
        slots: &[Slot],
        mode: ExchangeMode,
        interp: Interpolation,
    ) -> Result<()> {
        let mut out = self.outboxes();
        let on_axis = |t: &Transfer| axis.is_none_or(|a| t.face.axis() == a);
        for (ti, t) in plan.transfers.iter().enumerate() {
            if !on_axis(t) {
                continue;
            }
            let Some(src) = self.blocks.get(&t.src) else { continue };
            let dst = self.map.owner_unchecked(t.dst);
            for &s in slots {
                out[dst].push(Message::Halo {
                    transfer: ti as u32,
                    slot: s,
                    data: pack(t, src.slot(s), mode),
                });
            }
        }
        for m in self.superstep(out)? {
            let Message::Halo { transfer, slot, data } = m else {
                return Err(Error::Protocol("unexpected message during halo exchange".into()));
            };
            let t = plan
                .transfers
                .get(transfer as usize)
                .ok_or_else(|| Error::Inconsistent(format!("transfer {transfer} not in plan")))?;
            let b = self
                .blocks
                .get_mut(&t.dst)
                .ok_or_else(|| Error::Inconsistent(format!("halo for {} arrived at worker {}", t.dst, self.comm.rank)))?;
            unpack(t, &data, b.slot_mut(slot), mode, interp)?;
        }
        Ok(())
    }

    fn apply_boundary(&mut self, plan: &ExchangePlan, axis: Option<usize>, slots: &[Slot], bc: &dyn Boundary, widen: bool) {
        for &(g, face) in &plan.boundary {
            if axis.is_some_and(|a| face.axis() != a) {
                continue;
            }
            let Some(b) = self.blocks.get_mut(&g) else { continue };
            for &s in slots {
                let rule = bc.rule(s, &b.geom, face);
                let geom = b.geom.clone();
                apply_rule(b.slot_mut(s), &geom, face, &rule, widen);
            }
        }
    }

    /// Sum over keyed partial vectors from all workers, added in key order so
    /// the result does not depend on how keys are spread over workers.
    pub fn allreduce_sum(&mut self, partials: Vec<(u64, Vec<f64>)>, width: usize) -> Result<Vec<f64>> {
        let p = self.workers();
        let mut all = partials.clone();
        let mut out = self.outboxes();
        for (dst, o) in out.iter_mut().enumerate() {
            if dst != self.rank() {
                o.push(Message::Reduce(partials.clone()));
            }
        }
        if p > 1 {
            for m in self.superstep(out)? {
                match m {
                    Message::Reduce(v) => all.extend(v),
                    _ => return Err(Error::Protocol("unexpected message during reduction".into())),
                }
            }
        }
        all.sort_by_key(|(k, _)| *k);
        let mut total = vec![0.0; width];
        for (_, v) in &all {
            for (t, x) in total.iter_mut().zip(v) {
                *t += x;
            }
        }
        Ok(total)
    }

    pub fn allreduce_max(&mut self, x: f64) -> Result<f64> {
        self.allreduce_fold(x, f64::max)
    }

    pub fn allreduce_min(&mut self, x: f64) -> Result<f64> {
        self.allreduce_fold(x, f64::min)
    }

    fn allreduce_fold(&mut self, x: f64, f: fn(f64, f64) -> f64) -> Result<f64> {
        if self.workers() == 1 {
            return Ok(x);
        }
        let parts = self.allreduce_sum_raw(x)?;
        Ok(parts.into_iter().fold(x, f))
    }

    fn allreduce_sum_raw(&mut self, x: f64) -> Result<Vec<f64>> {
        let mut out = self.outboxes();
        for (dst, o) in out.iter_mut().enumerate() {
            if dst != self.rank() {
                o.push(Message::Reduce(vec![(self.rank() as u64, vec![x])]));
            }
        }
        let mut vals = Vec::new();
        for m in self.superstep(out)? {
            if let Message::Reduce(v) = m {
                vals.extend(v.into_iter().flat_map(|(_, v)| v));
            }
        }
        Ok(vals)
    }
}

/// Flags the pool as aborted if a worker closure unwinds.
struct AbortOnUnwind<'a>(&'a AtomicBool);

impl Drop for AbortOnUnwind<'_> {
    fn drop(&mut self) {
        if std::thread::panicking() {
            self.0.store(true, Ordering::Release);
        }
    }
}

/// P workers plus the neighbourhood server.
pub struct WorkerPool<T> {
    shared: Arc<Shared>,
    workers: Vec<Worker<T>>,
    map: Arc<PartitionMap>,
    server: Server,
    abort: Arc<AtomicBool>,
    stats: Arc<TransportStats>,
}

impl<T: Real> WorkerPool<T> {
    /// Builds a pool with the Morton assignment over `workers` workers.
    pub fn new(topology: Topology, domain: DomainBox, size: [usize; 3], workers: usize) -> Result<Self> {
        let map = assign(&topology, workers)?;
        Self::with_map(topology, domain, size, map)
    }

    pub fn with_map(topology: Topology, domain: DomainBox, size: [usize; 3], map: PartitionMap) -> Result<Self> {
        if map.len() != topology.len() {
            return Err(Error::Inconsistent(format!(
                "partition covers {} grids, topology has {}",
                map.len(),
                topology.len()
            )));
        }
        topology.check_balance()?;
        let topology = Arc::new(topology);
        let leaves: Vec<GridId> = topology.leaves().collect();
        let leaf_plan = ExchangePlan::build(&topology, &leaves, size)?;
        let level_plans = (0..=topology.max_depth())
            .map(|d| ExchangePlan::for_level(&topology, d, size))
            .collect::<Result<Vec<_>>>()?;
        let geoms = topology
            .nodes()
            .iter()
            .map(|n| BlockGeometry::new(&topology, n.id, size, &domain))
            .collect();
        let mut shared = Shared {
            topology: Arc::clone(&topology),
            domain,
            size,
            geoms,
            leaf_plan,
            level_plans,
        };
        shared.bind(&map);
        let shared = Arc::new(shared);
        let spec = DGridSpec {
            size,
            spacing: shared.geoms[0].spacing,
        };
        let server = Server::spawn(ServerState::new(Arc::clone(&topology), spec, map.clone()));
        let p = map.workers();
        let abort = Arc::new(AtomicBool::new(false));
        let stats = Arc::new(TransportStats::default());
        let (txs, rxs): (Vec<_>, Vec<_>) = (0..p).map(|_| channel()).unzip();
        let map = Arc::new(map);
        let workers = rxs
            .into_iter()
            .enumerate()
            .map(|(rank, inbox)| {
                let blocks = map
                    .grids_of(rank)
                    .iter()
                    .map(|&g| {
                        let leaf = topology.nodes()[g.index()].is_leaf();
                        (g, Block::new(shared.geoms[g.index()].clone(), leaf))
                    })
                    .collect();
                Worker {
                    comm: Comm {
                        rank,
                        peers: txs.clone(),
                        inbox,
                        phase: 0,
                        early: Vec::new(),
                        abort: Arc::clone(&abort),
                        stats: Arc::clone(&stats),
                    },
                    shared: Arc::clone(&shared),
                    map: Arc::clone(&map),
                    blocks,
                    server: server.handle(),
                }
            })
            .collect();
        Ok(WorkerPool {
            shared,
            workers,
            map,
            server,
            abort,
            stats,
        })
    }

    pub fn workers(&self) -> usize {
        self.workers.len()
    }

    pub fn shared(&self) -> &Arc<Shared> {
        &self.shared
    }

    pub fn topology(&self) -> &Topology {
        &self.shared.topology
    }

    pub fn map(&self) -> &PartitionMap {
        &self.map
    }

    pub fn stats(&self) -> &TransportStats {
        &self.stats
    }

    pub fn server_stats(&self) -> &ServerStats {
        self.server.handle_ref().stats()
    }

    pub fn server(&self) -> ServerHandle {
        self.server.handle()
    }

    /// Runs `f` once on every worker concurrently and returns the results by rank.
    pub fn run<R, F>(&mut self, f: F) -> Result<Vec<R>>
    where
        R: Send,
        F: Fn(&mut Worker<T>) -> Result<R> + Sync,
    {
        let abort = &*self.abort;
        let results: Vec<Result<R>> = if self.workers.len() == 1 {
            vec![f(&mut self.workers[0])]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = self
                    .workers
                    .iter_mut()
                    .map(|w| {
                        let f = &f;
                        s.spawn(move || {
                            let _guard = AbortOnUnwind(abort);
                            let r = f(w);
                            if r.is_err() {
                                abort.store(true, Ordering::Release);
                            }
                            r
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|e| std::panic::resume_unwind(e)))
                    .collect()
            })
        };
        if results.iter().any(Result::is_err) {
            let phase = self.workers.iter().map(|w| w.comm.phase).max().unwrap_or(0);
            for w in &mut self.workers {
                w.comm.reset(phase);
            }
            self.abort.store(false, Ordering::Release);
            // Report the root cause rather than a peer's abort notice.
            let mut errs: Vec<Error> = results.into_iter().filter_map(Result::err).collect();
            let root = errs
                .iter()
                .position(|e| !matches!(e, Error::Protocol(m) if m.starts_with("aborted")))
                .unwrap_or(0);
            return Err(errs.swap_remove(root));
        }
        Ok(results.into_iter().map(|r| r.ok().unwrap()).collect())
    }

    /// Read-only view of any block, wherever it lives.
    pub fn block(&self, id: GridId) -> Result<&Block<T>> {
        let owner = self.map.owner(id)?;
        self.workers[owner].block(id)
    }

    pub fn block_mut(&mut self, id: GridId) -> Result<&mut Block<T>> {
        let owner = self.map.owner(id)?;
        self.workers[owner].block_mut(id)
    }

    /// All blocks in id order.
    pub fn blocks(&self) -> Vec<(GridId, &Block<T>)> {
        let mut v: Vec<(GridId, &Block<T>)> = self
            .workers
            .iter()
            .flat_map(|w| w.blocks.iter().map(|(&g, b)| (g, b)))
            .collect();
        v.sort_by_key(|(g, _)| *g);
        v
    }

    pub fn for_each_block_mut(&mut self, mut f: impl FnMut(&mut Block<T>)) {
        for w in &mut self.workers {
            for b in w.blocks.values_mut() {
                f(b);
            }
        }
    }

    /// Moves `grid` with its field payload to worker `to`.
    ///
    /// The server records the move first; the payload then travels as one
    /// message. Exchange plans stay bound to the previous generation until
    /// [`WorkerPool::rebind`] is called.
    pub fn migrate(&mut self, grid: GridId, to: usize) -> Result<()> {
        let next = self.map.migrate(grid, to)?;
        let from = self.map.owner(grid)?;
        match self.server.handle().request(&Request::RequestMigrate { grid, to: to as u32 })? {
            Response::Migrated { generation, .. } if generation == next.generation() => {}
            Response::Error { message, .. } => return Err(Error::Protocol(message)),
            other => return Err(Error::Protocol(format!("unexpected server reply {other:?}"))),
        }
        self.run(|w| {
            let mut out = w.outboxes();
            if w.rank() == from {
                let b = w.blocks.remove(&grid).ok_or(Error::UnknownGrid(grid))?;
                out[to].push(Message::Migrate(Box::new(b)));
            }
            for m in w.superstep(out)? {
                if let Message::Migrate(b) = m {
                    w.blocks.insert(b.geom.id, *b);
                }
            }
            Ok(())
        })?;
        let next = Arc::new(next);
        for w in &mut self.workers {
            w.map = Arc::clone(&next);
        }
        self.map = next;
        Ok(())
    }

    /// Rebinds every exchange plan to the current partition.
    pub fn rebind(&mut self) {
        let mut shared = Shared {
            topology: Arc::clone(&self.shared.topology),
            domain: self.shared.domain,
            size: self.shared.size,
            geoms: self.shared.geoms.clone(),
            leaf_plan: self.shared.leaf_plan.clone(),
            level_plans: self.shared.level_plans.clone(),
        };
        shared.bind(&self.map);
        let shared = Arc::new(shared);
        for w in &mut self.workers {
            w.shared = Arc::clone(&shared);
        }
        self.shared = shared;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::RefinementSpec;

    fn pool(p: usize, depth: u8) -> WorkerPool<f64> {
        let t = Topology::build_uniform(RefinementSpec::cubic(4), depth).unwrap();
        WorkerPool::new(t, DomainBox::unit(), [4, 4, 4], p).unwrap()
    }

    struct Fixed(f64);
    impl Boundary for Fixed {
        fn rule(&self, _: Slot, _: &BlockGeometry, _: Face) -> GhostRule<'_> {
            GhostRule::Reflect(self.0)
        }
    }

    #[test]
    fn reflection_puts_value_on_face() {
        let t = Topology::build_uniform(RefinementSpec::cubic(2), 0).unwrap();
        let g = BlockGeometry::new(&t, GridId(0), [4, 4, 4], &DomainBox::unit());
        let mut a = Array3::<f64>::zeros([4, 4, 4]);
        for c in a.interior().collect::<Vec<_>>() {
            a.put(c, 3.0);
        }
        apply_rule(&mut a, &g, Face::XNeg, &GhostRule::Reflect(1.0), false);
        assert_eq!(a.get(-1, 2, 2), -1.0);
        apply_rule(&mut a, &g, Face::YPos, &GhostRule::Gradient(2.0), false);
        assert_eq!(a.get(1, 4, 1), 3.5);
        let f = |x: [f64; 3]| x[2];
        apply_rule(&mut a, &g, Face::ZPos, &GhostRule::ReflectWith(&f, 1.0), false);
        assert_eq!(a.get(0, 0, 4), 2.0 * 1.0 - 3.0);
        assert_eq!(a.get(-1, 0, 4), 0.0);
        apply_rule(&mut a, &g, Face::XPos, &GhostRule::Copy, false);
        apply_rule(&mut a, &g, Face::ZPos, &GhostRule::Copy, true);
        assert_eq!(a.get(4, 0, 4), 3.0);
    }

    #[test]
    fn superstep_orders_by_sender() {
        let mut pool = pool(3, 1);
        let got = pool
            .run(|w| {
                let mut out = w.outboxes();
                for (dst, o) in out.iter_mut().enumerate() {
                    o.push(Message::Reduce(vec![(w.rank() as u64, vec![dst as f64])]));
                }
                let r = w.superstep(out)?;
                Ok(r.into_iter()
                    .map(|m| match m {
                        Message::Reduce(v) => v[0].0,
                        _ => unreachable!(),
                    })
                    .collect::<Vec<_>>())
            })
            .unwrap();
        for r in got {
            assert_eq!(r, vec![0, 1, 2]);
        }
    }

    #[test]
    fn reductions_agree_everywhere() {
        for p in [1, 2, 4] {
            let mut pool = pool(p, 1);
            let sums = pool
                .run(|w| {
                    let parts = w.local_leaves().iter().map(|g| (g.0 as u64, vec![0.1 * g.0 as f64, 1.0])).collect();
                    let s = w.allreduce_sum(parts, 2)?;
                    let m = w.allreduce_max(w.rank() as f64)?;
                    Ok((s, m))
                })
                .unwrap();
            for (s, m) in &sums {
                assert_eq!(s[1], 8.0);
                assert_eq!(*s, sums[0].0);
                assert_eq!(*m, (p - 1) as f64);
            }
        }
    }

    #[test]
    fn exchange_matches_across_worker_counts() {
        let snapshot = |p: usize| {
            let mut pool = pool(p, 2);
            pool.for_each_block_mut(|b| {
                let g = b.geom.clone();
                b.fields.fill("p", &g, |x| (7.0 * x[0]).sin() + x[1] * x[2]).unwrap();
            });
            pool.run(|w| w.exchange(PlanId::Leaves, &[Slot::Var(Var::P)], Interpolation::Trilinear, ExchangeMode::WithEdges, Some(&Fixed(0.5))))
                .unwrap();
            pool.blocks()
                .into_iter()
                .map(|(g, b)| (g, b.fields[Var::P].as_slice().to_vec()))
                .collect::<Vec<_>>()
        };
        let one = snapshot(1);
        for p in [2, 3, 8] {
            assert_eq!(snapshot(p), one);
        }
    }

    #[test]
    fn failing_worker_aborts_peers() {
        let mut pool = pool(2, 1);
        let r = pool.run(|w| {
            if w.rank() == 1 {
                return Err(Error::InvalidArgument("boom".into()));
            }
            w.barrier()
        });
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
        pool.run(|w| w.barrier()).unwrap();
    }

    #[test]
    fn migration_moves_payload_and_stales_plans() {
        let mut pool = pool(2, 1);
        let g = pool.topology().at_depth(1)[0];
        pool.block_mut(g).unwrap().fields[Var::T].fill_all(42.0);
        let before = pool.stats().snapshot()[2];
        pool.migrate(g, 1).unwrap();
        assert_eq!(pool.map().owner(g).unwrap(), 1);
        assert!(pool.workers[1].owns(g) && !pool.workers[0].owns(g));
        assert_eq!(pool.block(g).unwrap().fields[Var::T].get(0, 0, 0), 42.0);
        assert!(pool.stats().snapshot()[2] - before >= pool.block(g).unwrap().payload_bytes() as u64);
        let r = pool.run(|w| w.exchange(PlanId::Leaves, &[Slot::Var(Var::T)], Interpolation::PiecewiseConstant, ExchangeMode::Faces, None));
        assert!(matches!(r, Err(Error::StalePlan { plan: 0, map: 1 })));
        pool.rebind();
        pool.run(|w| w.exchange(PlanId::Leaves, &[Slot::Var(Var::T)], Interpolation::PiecewiseConstant, ExchangeMode::Faces, None))
            .unwrap();
        assert_eq!(pool.server_stats().field_bytes_in.load(Ordering::Relaxed), 0);
    }
}
