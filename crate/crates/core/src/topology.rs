//! Logical grid hierarchy ("l-grids").
//!
//! A single root grid at depth zero is refined by `r_top`, every further
//! level by `r_sub`. Every node carries exactly one link to a data grid; the
//! data grid id equals the node id. A topology is immutable once built.

use std::collections::{HashMap, VecDeque};
use std::fmt;

use crate::error::{Error, Result};
use crate::morton;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GridId(pub u32);

impl GridId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for GridId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "g{}", self.0)
    }
}

/// One of the six axis-aligned faces of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Face {
    XNeg,
    XPos,
    YNeg,
    YPos,
    ZNeg,
    ZPos,
}

impl Face {
    pub const ALL: [Face; 6] = [Face::XNeg, Face::XPos, Face::YNeg, Face::YPos, Face::ZNeg, Face::ZPos];

    pub fn new(axis: usize, positive: bool) -> Face {
        Face::ALL[2 * axis + usize::from(positive)]
    }

    #[inline]
    pub fn axis(self) -> usize {
        self as usize / 2
    }

    #[inline]
    pub fn is_positive(self) -> bool {
        self as usize % 2 == 1
    }

    #[inline]
    pub fn sign(self) -> i64 {
        if self.is_positive() {
            1
        } else {
            -1
        }
    }

    pub fn opposite(self) -> Face {
        Face::new(self.axis(), !self.is_positive())
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ["-x", "+x", "-y", "+y", "-z", "+z"][self as usize]
    }
}

impl fmt::Display for Face {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Refinement factors of the hierarchy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RefinementSpec {
    pub r_top: [u32; 3],
    pub r_sub: [u32; 3],
    pub d_max: u8,
}

impl RefinementSpec {
    pub fn new(r_top: [u32; 3], r_sub: [u32; 3], d_max: u8) -> Result<Self> {
        let spec = RefinementSpec { r_top, r_sub, d_max };
        spec.validate()?;
        Ok(spec)
    }

    /// Isotropic (2,2,2) refinement at every level.
    pub fn cubic(d_max: u8) -> Self {
        RefinementSpec {
            r_top: [2; 3],
            r_sub: [2; 3],
            d_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r_top.iter().chain(self.r_sub.iter()).any(|&r| r == 0) {
            return Err(Error::InvalidArgument("refinement factors must be >= 1".into()));
        }
        if self.r_sub.iter().all(|&r| r < 2) {
            return Err(Error::InvalidArgument(
                "at least one component of the subsequent refinement must be >= 2".into(),
            ));
        }
        if self.d_max > 20 {
            return Err(Error::InvalidArgument(format!("d_max {} too large", self.d_max)));
        }
        Ok(())
    }

    /// Refinement factors taking depth `depth - 1` to `depth`.
    pub fn ratio(&self, depth: u8) -> [u32; 3] {
        match depth {
            0 => [1; 3],
            1 => self.r_top,
            _ => self.r_sub,
        }
    }

    /// Number of grids along each axis of the depth lattice.
    pub fn extent(&self, depth: u8) -> [u64; 3] {
        let mut e = [1u64; 3];
        for d in 1..=depth {
            let r = self.ratio(d);
            for a in 0..3 {
                e[a] *= u64::from(r[a]);
            }
        }
        e
    }

    fn check_depth(&self, depth: u8) -> Result<()> {
        if depth > self.d_max {
            return Err(Error::InvalidArgument(format!(
                "depth {depth} outside 0..={}",
                self.d_max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridCounts {
    pub total_lgrids: u128,
    pub leaf_lgrids: u128,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellCounts {
    pub total_cells: u128,
    pub total_variables: u128,
}

/// Counts the grids of a fully refined hierarchy without building it.
pub fn count_grids(spec: &RefinementSpec, depth: u8) -> Result<GridCounts> {
    spec.check_depth(depth)?;
    let mut total = 0u128;
    let mut level = 1u128;
    for d in 0..=depth {
        let r = spec.ratio(d);
        level *= r.iter().map(|&x| u128::from(x)).product::<u128>();
        total += level;
    }
    Ok(GridCounts {
        total_lgrids: total,
        leaf_lgrids: level,
    })
}

/// Counts cells and variables over every l-grid (leaves and ancestors alike).
pub fn count_cells(
    spec: &RefinementSpec,
    depth: u8,
    dgrid_size: [usize; 3],
    vars_per_cell: usize,
) -> Result<CellCounts> {
    let grids = count_grids(spec, depth)?;
    let per_grid: u128 = dgrid_size.iter().map(|&s| s as u128).product();
    let total_cells = grids.total_lgrids * per_grid;
    Ok(CellCounts {
        total_cells,
        total_variables: total_cells * vars_per_cell as u128,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LGridNode {
    pub id: GridId,
    pub depth: u8,
    pub coord: [u32; 3],
    pub parent: Option<GridId>,
    pub children: Vec<GridId>,
}

impl LGridNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Id of the linked data grid.
    pub fn dgrid(&self) -> GridId {
        self.id
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NeighborKind {
    SameLevel,
    Coarser,
    FinerSet,
    DomainBoundary,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborResult {
    pub kind: NeighborKind,
    pub ids: Vec<GridId>,
    pub face: Face,
}

/// Region handed to an adaptive refinement predicate, in unit-domain
/// coordinates.
#[derive(Clone, Copy, Debug)]
pub struct RegionQuery {
    pub depth: u8,
    pub coord: [u32; 3],
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl RegionQuery {
    /// True if the half-open region overlaps the closed box `[lo, hi]`.
    pub fn overlaps(&self, lo: [f64; 3], hi: [f64; 3]) -> bool {
        (0..3).all(|a| self.lo[a] < hi[a] && self.hi[a] > lo[a])
    }
}

#[derive(Clone, Debug)]
pub struct Topology {
    spec: RefinementSpec,
    nodes: Vec<LGridNode>,
    lookup: HashMap<(u8, [u32; 3]), GridId>,
    by_depth: Vec<Vec<GridId>>,
}

impl Topology {
    fn with_root(spec: RefinementSpec) -> Self {
        let root = LGridNode {
            id: GridId(0),
            depth: 0,
            coord: [0; 3],
            parent: None,
            children: Vec::new(),
        };
        let mut lookup = HashMap::new();
        lookup.insert((0, [0; 3]), GridId(0));
        Topology {
            spec,
            nodes: vec![root],
            lookup,
            by_depth: vec![vec![GridId(0)]],
        }
    }

    fn refine(&mut self, id: GridId) -> Vec<GridId> {
        let (depth, coord) = {
            let n = &self.nodes[id.index()];
            (n.depth + 1, n.coord)
        };
        let r = self.spec.ratio(depth);
        if self.by_depth.len() <= depth as usize {
            self.by_depth.push(Vec::new());
        }
        let mut kids = Vec::with_capacity((r[0] * r[1] * r[2]) as usize);
        for c in 0..r[2] {
            for b in 0..r[1] {
                for a in 0..r[0] {
                    let child_coord = [coord[0] * r[0] + a, coord[1] * r[1] + b, coord[2] * r[2] + c];
                    let cid = GridId(self.nodes.len() as u32);
                    self.nodes.push(LGridNode {
                        id: cid,
                        depth,
                        coord: child_coord,
                        parent: Some(id),
                        children: Vec::new(),
                    });
                    self.lookup.insert((depth, child_coord), cid);
                    self.by_depth[depth as usize].push(cid);
                    kids.push(cid);
                }
            }
        }
        self.nodes[id.index()].children = kids.clone();
        kids
    }

    /// Fully refined hierarchy down to `depth`.
    pub fn build_uniform(spec: RefinementSpec, depth: u8) -> Result<Self> {
        spec.validate()?;
        spec.check_depth(depth)?;
        let mut topo = Topology::with_root(spec);
        let mut frontier = vec![GridId(0)];
        for _ in 0..depth {
            let mut next = Vec::new();
            for id in frontier {
                next.extend(topo.refine(id));
            }
            frontier = next;
        }
        Ok(topo)
    }

    /// Uniform hierarchy to `base_depth`, then every leaf for which `refine`
    /// returns true is split again, up to `spec.d_max`. The result must be
    /// 2:1 balanced across faces.
    pub fn build_adaptive<F>(spec: RefinementSpec, base_depth: u8, refine: F) -> Result<Self>
    where
        F: Fn(&RegionQuery) -> bool,
    {
        let mut topo = Topology::build_uniform(spec, base_depth)?;
        let mut queue: VecDeque<GridId> = topo.leaves().collect();
        while let Some(id) = queue.pop_front() {
            let depth = topo.nodes[id.index()].depth;
            if depth >= spec.d_max {
                continue;
            }
            if refine(&topo.region(id)) {
                queue.extend(topo.refine(id));
            }
        }
        topo.check_balance()?;
        Ok(topo)
    }

    pub fn spec(&self) -> &RefinementSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[LGridNode] {
        &self.nodes
    }

    pub fn node(&self, id: GridId) -> Result<&LGridNode> {
        self.nodes.get(id.index()).ok_or(Error::UnknownGrid(id))
    }

    /// Deepest populated level.
    pub fn max_depth(&self) -> u8 {
        (self.by_depth.len() - 1) as u8
    }

    pub fn at_depth(&self, depth: u8) -> &[GridId] {
        self.by_depth.get(depth as usize).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn leaves(&self) -> impl Iterator<Item = GridId> + '_ {
        self.nodes.iter().filter(|n| n.is_leaf()).map(|n| n.id)
    }

    pub fn node_at(&self, depth: u8, coord: [u32; 3]) -> Option<GridId> {
        self.lookup.get(&(depth, coord)).copied()
    }

    /// Unit-domain box covered by a node.
    pub fn region(&self, id: GridId) -> RegionQuery {
        let n = &self.nodes[id.index()];
        let e = self.spec.extent(n.depth);
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for a in 0..3 {
            lo[a] = f64::from(n.coord[a]) / e[a] as f64;
            hi[a] = f64::from(n.coord[a] + 1) / e[a] as f64;
        }
        RegionQuery {
            depth: n.depth,
            coord: n.coord,
            lo,
            hi,
        }
    }

    /// Whether `face` of grid `id` lies on the domain hull.
    pub fn on_hull(&self, id: GridId, face: Face) -> bool {
        let n = &self.nodes[id.index()];
        let e = self.spec.extent(n.depth);
        let a = face.axis();
        if face.is_positive() {
            u64::from(n.coord[a]) + 1 == e[a]
        } else {
            n.coord[a] == 0
        }
    }

    /// Same-depth lattice slot across `face`, if inside the domain.
    pub fn slot_across(&self, depth: u8, coord: [u32; 3], face: Face) -> Option<[u32; 3]> {
        let e = self.spec.extent(depth);
        let a = face.axis();
        let mut c = coord;
        if face.is_positive() {
            if u64::from(c[a]) + 1 >= e[a] {
                return None;
            }
            c[a] += 1;
        } else {
            if c[a] == 0 {
                return None;
            }
            c[a] -= 1;
        }
        Some(c)
    }

    /// Deepest existing node whose region contains the depth-`depth` slot.
    pub fn covering(&self, depth: u8, coord: [u32; 3]) -> Option<GridId> {
        let mut d = depth;
        let mut c = coord;
        loop {
            if let Some(id) = self.node_at(d, c) {
                return Some(id);
            }
            if d == 0 {
                return None;
            }
            let r = self.spec.ratio(d);
            for a in 0..3 {
                c[a] /= r[a];
            }
            d -= 1;
        }
    }

    /// Children of `id` that touch its `face`.
    pub fn children_on_face(&self, id: GridId, face: Face) -> Vec<GridId> {
        let n = &self.nodes[id.index()];
        if n.is_leaf() {
            return Vec::new();
        }
        let r = self.spec.ratio(n.depth + 1);
        let a = face.axis();
        let want = if face.is_positive() { r[a] - 1 } else { 0 };
        n.children
            .iter()
            .copied()
            .filter(|&c| self.nodes[c.index()].coord[a] % r[a] == want)
            .collect()
    }

    pub fn find_neighbor(&self, id: GridId, face: Face) -> Result<NeighborResult> {
        let n = self.node(id)?;
        let Some(slot) = self.slot_across(n.depth, n.coord, face) else {
            return Ok(NeighborResult {
                kind: NeighborKind::DomainBoundary,
                ids: Vec::new(),
                face,
            });
        };
        if let Some(other) = self.node_at(n.depth, slot) {
            if self.nodes[other.index()].is_leaf() {
                return Ok(NeighborResult {
                    kind: NeighborKind::SameLevel,
                    ids: vec![other],
                    face,
                });
            }
            return Ok(NeighborResult {
                kind: NeighborKind::FinerSet,
                ids: self.children_on_face(other, face.opposite()),
                face,
            });
        }
        let cover = self
            .covering(n.depth, slot)
            .ok_or_else(|| Error::Inconsistent(format!("no grid covers the slot next to {id}")))?;
        Ok(NeighborResult {
            kind: NeighborKind::Coarser,
            ids: vec![cover],
            face,
        })
    }

    /// Checks that face-adjacent leaves differ by at most one level.
    pub fn check_balance(&self) -> Result<()> {
        for leaf in self.leaves() {
            let n = &self.nodes[leaf.index()];
            for face in Face::ALL {
                let Some(slot) = self.slot_across(n.depth, n.coord, face) else {
                    continue;
                };
                if self.node_at(n.depth, slot).is_some() {
                    continue;
                }
                if let Some(cover) = self.covering(n.depth, slot) {
                    let cd = self.nodes[cover.index()].depth;
                    if n.depth > cd + 1 {
                        return Err(Error::BalanceViolation {
                            a: cover,
                            depth_a: cd,
                            b: leaf,
                            depth_b: n.depth,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Bits per axis of Morton keys at `depth`.
    pub fn morton_bits(&self, depth: u8) -> u32 {
        morton::bits_for_extent(self.spec.extent(depth))
    }

    pub fn morton_key(&self, id: GridId) -> u64 {
        let n = &self.nodes[id.index()];
        morton::encode(n.coord)
    }

    /// Serialises the hierarchy, one node per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let s = &self.spec;
        out.push_str("# blockflow topology v1\n");
        out.push_str(&format!(
            "spec {},{},{} {},{},{} {}\n",
            s.r_top[0], s.r_top[1], s.r_top[2], s.r_sub[0], s.r_sub[1], s.r_sub[2], s.d_max
        ));
        for n in &self.nodes {
            let parent = n.parent.map_or("-".to_string(), |p| p.0.to_string());
            let children = if n.children.is_empty() {
                "-".to_string()
            } else {
                n.children.iter().map(|c| c.0.to_string()).collect::<Vec<_>>().join(",")
            };
            out.push_str(&format!(
                "{} {} {},{},{} {} {}\n",
                n.id.0, n.depth, n.coord[0], n.coord[1], n.coord[2], parent, children
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        fn bad(line: usize, msg: impl Into<String>) -> Error {
            Error::Config {
                line,
                column: 1,
                message: msg.into(),
            }
        }
        fn triple(line: usize, s: &str) -> Result<[u32; 3]> {
            let v: Vec<u32> = s
                .split(',')
                .map(|t| t.parse::<u32>().map_err(|e| bad(line, format!("`{s}`: {e}"))))
                .collect::<Result<_>>()?;
            v.try_into().map_err(|_| bad(line, format!("expected three components in `{s}`")))
        }
        fn ids(line: usize, s: &str) -> Result<Vec<GridId>> {
            if s == "-" {
                return Ok(Vec::new());
            }
            s.split(',')
                .map(|t| t.parse::<u32>().map(GridId).map_err(|e| bad(line, format!("`{t}`: {e}"))))
                .collect()
        }

        let mut spec = None;
        let mut nodes = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let tok: Vec<&str> = l.split_whitespace().collect();
            if tok[0] == "spec" {
                if tok.len() != 4 {
                    return Err(bad(line, "spec line needs r_top r_sub d_max"));
                }
                let d_max = tok[3].parse::<u8>().map_err(|e| bad(line, e.to_string()))?;
                spec = Some(RefinementSpec::new(triple(line, tok[1])?, triple(line, tok[2])?, d_max)?);
                continue;
            }
            if tok.len() != 5 {
                return Err(bad(line, "node line needs id depth coord parent children"));
            }
            let id = tok[0].parse::<u32>().map_err(|e| bad(line, e.to_string()))?;
            if id as usize != nodes.len() {
                return Err(bad(line, format!("node ids must be dense and ordered, found {id}")));
            }
            let parent = ids(line, tok[3])?;
            nodes.push(LGridNode {
                id: GridId(id),
                depth: tok[1].parse::<u8>().map_err(|e| bad(line, e.to_string()))?,
                coord: triple(line, tok[2])?,
                parent: parent.first().copied(),
                children: ids(line, tok[4])?,
            });
        }
        let spec = spec.ok_or_else(|| bad(1, "missing spec line"))?;
        let mut lookup = HashMap::new();
        let mut by_depth: Vec<Vec<GridId>> = Vec::new();
        for n in &nodes {
            if by_depth.len() <= n.depth as usize {
                by_depth.resize(n.depth as usize + 1, Vec::new());
            }
            by_depth[n.depth as usize].push(n.id);
            lookup.insert((n.depth, n.coord), n.id);
        }
        let topo = Topology {
            spec,
            nodes,
            lookup,
            by_depth,
        };
        topo.check_structure()?;
        Ok(topo)
    }

    /// Verifies parent/child links and that children tile their parent.
    pub fn check_structure(&self) -> Result<()> {
        let root = self.nodes.first().ok_or_else(|| Error::Inconsistent("empty topology".into()))?;
        if root.depth != 0 || root.parent.is_some() {
            return Err(Error::Inconsistent("root must be at depth 0 without parent".into()));
        }
        for n in &self.nodes[1..] {
            let p = n.parent.ok_or_else(|| Error::Inconsistent(format!("{} has no parent", n.id)))?;
            let pn = self.node(p)?;
            if pn.depth + 1 != n.depth || !pn.children.contains(&n.id) {
                return Err(Error::Inconsistent(format!("{} not a child of {}", n.id, p)));
            }
        }
        for n in &self.nodes {
            if n.is_leaf() {
                continue;
            }
            let r = self.spec.ratio(n.depth + 1);
            if n.children.len() != (r[0] * r[1] * r[2]) as usize {
                return Err(Error::Inconsistent(format!("{} has a partial child set", n.id)));
            }
            let mut seen = std::collections::HashSet::new();
            for &c in &n.children {
                let cn = self.node(c)?;
                let local = [0, 1, 2].map(|a| cn.coord[a].wrapping_sub(n.coord[a] * r[a]));
                if (0..3).any(|a| local[a] >= r[a]) || !seen.insert(local) {
                    return Err(Error::Inconsistent(format!("children of {} do not tile it", n.id)));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cubic() -> RefinementSpec {
        RefinementSpec::cubic(8)
    }

    #[test]
    fn spec_validation() {
        assert!(RefinementSpec::new([2, 2, 2], [1, 1, 1], 3).is_err());
        assert!(RefinementSpec::new([0, 2, 2], [2, 2, 2], 3).is_err());
        assert!(RefinementSpec::new([4, 1, 1], [2, 2, 1], 3).is_ok());
    }

    #[test]
    fn uniform_counts() {
        assert_eq!(Topology::build_uniform(cubic(), 0).unwrap().len(), 1);
        assert_eq!(Topology::build_uniform(cubic(), 1).unwrap().len(), 9);
        let t = Topology::build_uniform(cubic(), 3).unwrap();
        assert_eq!(t.len(), 1 + 8 + 64 + 512);
        assert_eq!(t.leaves().count(), 512);
        assert!(Topology::build_uniform(cubic(), 9).is_err());
        t.check_structure().unwrap();
    }

    #[test]
    fn depth_eight_counts() {
        let g = count_grids(&cubic(), 8).unwrap();
        assert_eq!(g.total_lgrids, 19_173_961);
        assert_eq!(g.leaf_lgrids, 16_777_216);
        let c = count_cells(&cubic(), 8, [16, 16, 16], 9).unwrap();
        assert_eq!(c.total_cells, 78_536_544_256);
        assert_eq!(c.total_variables, 706_828_898_304);
        let c0 = count_cells(&cubic(), 0, [16, 16, 16], 9).unwrap();
        assert_eq!((c0.total_cells, c0.total_variables), (4_096, 36_864));
        assert!(count_grids(&cubic(), 9).is_err());
    }

    #[test]
    fn depth_five_geometric_series() {
        let oracle: u128 = (0..=5).map(|k| 8u128.pow(k)).sum();
        let g = count_grids(&cubic(), 5).unwrap();
        assert_eq!(g.total_lgrids, oracle);
        assert_eq!(g.total_lgrids, 37_449);
        let c = count_cells(&cubic(), 5, [16, 16, 16], 9).unwrap();
        assert_eq!(c.total_cells, oracle * 4096);
        assert_eq!(c.total_cells, 153_391_104);
    }

    #[test]
    fn counts_match_built_hierarchy_anisotropic() {
        let spec = RefinementSpec::new([4, 1, 1], [2, 2, 1], 4).unwrap();
        for d in 0..=3 {
            let t = Topology::build_uniform(spec, d).unwrap();
            let g = count_grids(&spec, d).unwrap();
            assert_eq!(g.total_lgrids, t.len() as u128);
            assert_eq!(g.leaf_lgrids, t.leaves().count() as u128);
        }
        assert_eq!(spec.extent(3), [16, 4, 1]);
    }

    #[test]
    fn neighbours_uniform() {
        let t = Topology::build_uniform(cubic(), 1).unwrap();
        let a = t.node_at(1, [0, 0, 0]).unwrap();
        let b = t.node_at(1, [1, 0, 0]).unwrap();
        let n = t.find_neighbor(a, Face::XPos).unwrap();
        assert_eq!(n.kind, NeighborKind::SameLevel);
        assert_eq!(n.ids, vec![b]);
        let n = t.find_neighbor(b, Face::XPos).unwrap();
        assert_eq!(n.kind, NeighborKind::DomainBoundary);
        assert!(n.ids.is_empty());
        assert!(t.find_neighbor(GridId(99), Face::XPos).is_err());
    }

    #[test]
    fn unbalanced_predicate_rejected() {
        let p = [0.3, 0.3, 0.3];
        let r = Topology::build_adaptive(RefinementSpec::cubic(4), 2, |q| {
            q.depth < 4 && (0..3).all(|a| q.lo[a] <= p[a] && p[a] < q.hi[a])
        });
        match r {
            Err(Error::BalanceViolation { depth_a, depth_b, .. }) => {
                assert_eq!((depth_a, depth_b), (2, 4));
            }
            other => panic!("expected balance violation, got {other:?}"),
        }
    }

    #[test]
    fn text_round_trip() {
        let t = Topology::build_adaptive(RefinementSpec::cubic(3), 1, |q| q.depth == 1 && q.coord == [0, 0, 0]).unwrap();
        let text = t.to_text();
        let back = Topology::from_text(&text).unwrap();
        assert_eq!(back.nodes(), t.nodes());
        assert_eq!(back.spec(), t.spec());
        assert_eq!(back.to_text(), text);
        assert!(Topology::from_text("spec 2,2,2 2,2,2 3\n0 1 0,0,0 - -\n").is_err());
    }
}
