//! Ownership of grids by workers.
//!
//! Every depth level is sorted along the Z-order curve and cut into `P`
//! contiguous ranges whose sizes differ by at most one. Ancestor levels are
//! split the same way as the leaves.

use crate::dgrid::DGridSpec;
use crate::error::{Error, Result};
use crate::exchange::plan_exchange;
use crate::topology::{GridId, Topology};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionMap {
    owner: Vec<usize>,
    per_worker: Vec<Vec<GridId>>,
    generation: u64,
}

/// Splits `n` items into `parts` contiguous ranges, larger ranges first.
pub fn split_sizes(n: usize, parts: usize) -> Vec<usize> {
    let base = n / parts;
    let extra = n % parts;
    (0..parts).map(|p| base + usize::from(p < extra)).collect()
}

/// Z-order assignment of every depth level to `workers` ranks.
pub fn assign(topo: &Topology, workers: usize) -> Result<PartitionMap> {
    assign_with_order(topo, workers, |topo, ids| {
        ids.sort_by_key(|&id| (topo.morton_key(id), id));
    })
}

/// Assignment with a caller-provided ordering of each level.
pub fn assign_with_order<F>(topo: &Topology, workers: usize, mut order: F) -> Result<PartitionMap>
where
    F: FnMut(&Topology, &mut Vec<GridId>),
{
    if workers < 1 {
        return Err(Error::InvalidArgument("at least one worker is required".into()));
    }
    let mut owner = vec![0usize; topo.len()];
    let mut per_worker = vec![Vec::new(); workers];
    for depth in 0..=topo.max_depth() {
        let mut ids = topo.at_depth(depth).to_vec();
        order(topo, &mut ids);
        let mut start = 0;
        for (rank, n) in split_sizes(ids.len(), workers).into_iter().enumerate() {
            for &id in &ids[start..start + n] {
                owner[id.index()] = rank;
                per_worker[rank].push(id);
            }
            start += n;
        }
    }
    for list in &mut per_worker {
        list.sort();
    }
    Ok(PartitionMap {
        owner,
        per_worker,
        generation: 0,
    })
}

/// Per-level grid counts of every worker.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BalanceReport {
    /// `counts[depth][rank]`.
    pub counts: Vec<Vec<usize>>,
    /// Largest max-min spread over all levels.
    pub imbalance: usize,
}

impl PartitionMap {
    pub fn workers(&self) -> usize {
        self.per_worker.len()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn owner(&self, id: GridId) -> Result<usize> {
        self.owner.get(id.index()).copied().ok_or(Error::UnknownGrid(id))
    }

    #[inline]
    pub(crate) fn owner_unchecked(&self, id: GridId) -> usize {
        self.owner[id.index()]
    }

    pub fn grids_of(&self, rank: usize) -> &[GridId] {
        &self.per_worker[rank]
    }

    pub fn len(&self) -> usize {
        self.owner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.owner.is_empty()
    }

    /// New map with `grid` owned by `to`; the generation always advances.
    pub fn migrate(&self, grid: GridId, to: usize) -> Result<PartitionMap> {
        let from = self.owner(grid)?;
        if to >= self.workers() {
            return Err(Error::UnknownRank {
                rank: to,
                workers: self.workers(),
            });
        }
        let mut next = self.clone();
        next.generation += 1;
        if from != to {
            next.owner[grid.index()] = to;
            next.per_worker[from].retain(|&g| g != grid);
            let list = &mut next.per_worker[to];
            let pos = list.binary_search(&grid).unwrap_or_else(|p| p);
            list.insert(pos, grid);
        }
        Ok(next)
    }

    pub fn balance_report(&self, topo: &Topology) -> BalanceReport {
        let mut counts = vec![vec![0usize; self.workers()]; topo.max_depth() as usize + 1];
        for n in topo.nodes() {
            counts[n.depth as usize][self.owner[n.id.index()]] += 1;
        }
        let imbalance = counts
            .iter()
            .map(|c| c.iter().max().unwrap_or(&0) - c.iter().min().unwrap_or(&0))
            .max()
            .unwrap_or(0);
        BalanceReport { counts, imbalance }
    }
}

/// Ghost-cell traffic per exchanged variable between worker pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommPattern {
    /// `directed[a][b]`: ghost cells written on rank `b` from data of rank `a`.
    pub directed: Vec<Vec<usize>>,
    /// Symmetric volumes: the diagonal holds intra-worker copies, off-diagonal
    /// entries the traffic in both directions across the pair.
    pub volumes: Vec<Vec<usize>>,
}

impl CommPattern {
    /// Total traffic crossing worker boundaries.
    pub fn off_diagonal(&self) -> usize {
        let p = self.volumes.len();
        (0..p).flat_map(|a| ((a + 1)..p).map(move |b| (a, b))).map(|(a, b)| self.volumes[a][b]).sum()
    }
}

pub fn comm_pattern(topo: &Topology, map: &PartitionMap, spec: &DGridSpec) -> Result<CommPattern> {
    let plan = plan_exchange(topo, map, spec)?;
    let p = map.workers();
    let mut directed = vec![vec![0usize; p]; p];
    for (&(a, b), &v) in &plan.pair_volume {
        directed[a][b] += v;
    }
    let mut volumes = vec![vec![0usize; p]; p];
    for a in 0..p {
        for b in 0..p {
            volumes[a][b] = if a == b { directed[a][a] } else { directed[a][b] + directed[b][a] };
        }
    }
    Ok(CommPattern { directed, volumes })
}
