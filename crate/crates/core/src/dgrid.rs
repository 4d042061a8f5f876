//! Data grids ("d-grids"): per-block cell-centred storage with a one-cell
//! ghost halo.
//!
//! Every variable is one contiguous array (x fastest) of extent
//! `(sx + 2) * (sy + 2) * (sz + 2)`. Interior indices run over `0..s`, the
//! halo sits at `-1` and `s`. Cell `(i, j, k)` is centred at
//! `origin + (i + 1/2, j + 1/2, k + 1/2) * spacing`.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::topology::{Face, GridId, Topology};

pub const HALO: usize = 1;

/// Size and spacing of one block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DGridSpec {
    pub size: [usize; 3],
    pub spacing: [f64; 3],
}

impl DGridSpec {
    pub fn new(size: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let s = DGridSpec { size, spacing };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&s| s < 2) {
            return Err(Error::InvalidArgument(format!("d-grid size {:?}: every axis needs >= 2 cells", self.size)));
        }
        if self.spacing.iter().any(|&h| !(h > 0.0) || !h.is_finite()) {
            return Err(Error::InvalidArgument(format!("d-grid spacing {:?} must be positive", self.spacing)));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.size.iter().product()
    }
}

/// Cell-centred 3D array including the ghost halo.
#[derive(Clone, Debug, PartialEq)]
pub struct Array3<T> {
    size: [usize; 3],
    dims: [usize; 3],
    data: Vec<T>,
}

impl<T: Copy> Array3<T> {
    pub fn filled(size: [usize; 3], value: T) -> Self {
        let dims = size.map(|s| s + 2 * HALO);
        Array3 {
            size,
            dims,
            data: vec![value; dims[0] * dims[1] * dims[2]],
        }
    }

    /// Interior size.
    #[inline]
    pub fn size(&self) -> [usize; 3] {
        self.size
    }

    /// Storage extent including the halo.
    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn idx(&self, i: isize, j: isize, k: isize) -> usize {
        debug_assert!(i >= -1 && j >= -1 && k >= -1);
        debug_assert!(
            (i + 1) < self.dims[0] as isize && (j + 1) < self.dims[1] as isize && (k + 1) < self.dims[2] as isize
        );
        (i + 1) as usize + self.dims[0] * ((j + 1) as usize + self.dims[1] * (k + 1) as usize)
    }

    /// Linear offset between neighbours along `axis`.
    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => 1,
            1 => self.dims[0],
            _ => self.dims[0] * self.dims[1],
        }
    }

    #[inline]
    pub fn get(&self, i: isize, j: isize, k: isize) -> T {
        self.data[self.idx(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: isize, j: isize, k: isize, v: T) {
        let n = self.idx(i, j, k);
        self.data[n] = v;
    }

    #[inline]
    pub fn at(&self, c: [isize; 3]) -> T {
        self.get(c[0], c[1], c[2])
    }

    #[inline]
    pub fn put(&mut self, c: [isize; 3], v: T) {
        self.set(c[0], c[1], c[2], v)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn fill_all(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// True if `c` addresses an interior cell.
    #[inline]
    pub fn is_interior(&self, c: [isize; 3]) -> bool {
        (0..3).all(|a| c[a] >= 0 && c[a] < self.size[a] as isize)
    }

    /// Interior cell coordinates in storage order.
    pub fn interior(&self) -> impl Iterator<Item = [isize; 3]> {
        let s = self.size.map(|x| x as isize);
        (0..s[2]).flat_map(move |k| (0..s[1]).flat_map(move |j| (0..s[0]).map(move |i| [i, j, k])))
    }

    pub fn interior_values(&self) -> Vec<T> {
        self.interior().map(|c| self.at(c)).collect()
    }
}

impl<T: Real> Array3<T> {
    pub fn zeros(size: [usize; 3]) -> Self {
        Array3::filled(size, T::zero())
    }

    pub fn copy_interior_from(&mut self, other: &Array3<T>) {
        for c in self.interior() {
            self.put(c, other.at(c));
        }
    }
}

/// The nine per-cell variables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Var {
    U1,
    U2,
    U3,
    P,
    T,
    U1Star,
    U2Star,
    U3Star,
    Rhs,
}

impl Var {
    pub const ALL: [Var; 9] = [
        Var::U1,
        Var::U2,
        Var::U3,
        Var::P,
        Var::T,
        Var::U1Star,
        Var::U2Star,
        Var::U3Star,
        Var::Rhs,
    ];

    pub const VELOCITY: [Var; 3] = [Var::U1, Var::U2, Var::U3];
    pub const VELOCITY_STAR: [Var; 3] = [Var::U1Star, Var::U2Star, Var::U3Star];

    pub fn name(self) -> &'static str {
        ["u1", "u2", "u3", "p", "T", "u1_star", "u2_star", "u3_star", "rhs"][self as usize]
    }

    pub fn from_name(name: &str) -> Result<Var> {
        Var::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Storage for all nine variables of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSet<T> {
    arrays: Vec<Array3<T>>,
}

/// Zero-initialised field set, halo included.
pub fn allocate<T: Real>(spec: &DGridSpec) -> FieldSet<T> {
    FieldSet {
        arrays: (0..Var::ALL.len()).map(|_| Array3::zeros(spec.size)).collect(),
    }
}

impl<T: Real> FieldSet<T> {
    pub fn size(&self) -> [usize; 3] {
        self.arrays[0].size()
    }

    pub fn by_name(&self, name: &str) -> Result<&Array3<T>> {
        Ok(&self[Var::from_name(name)?])
    }

    /// Writes `f(centre)` into every interior cell of the named variable.
    pub fn fill<F>(&mut self, name: &str, geom: &BlockGeometry, f: F) -> Result<()>
    where
        F: Fn([f64; 3]) -> f64,
    {
        let var = Var::from_name(name)?;
        fill_array(&mut self[var], geom, f);
        Ok(())
    }

    pub fn arrays(&self) -> &[Array3<T>] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [Array3<T>] {
        &mut self.arrays
    }

    /// Bytes of field payload, halo included.
    pub fn payload_bytes(&self) -> usize {
        self.arrays.iter().map(|a| a.as_slice().len() * T::BYTES).sum()
    }
}

impl<T> Index<Var> for FieldSet<T> {
    type Output = Array3<T>;
    fn index(&self, v: Var) -> &Array3<T> {
        &self.arrays[v as usize]
    }
}

impl<T> IndexMut<Var> for FieldSet<T> {
    fn index_mut(&mut self, v: Var) -> &mut Array3<T> {
        &mut self.arrays[v as usize]
    }
}

pub fn fill_array<T: Real, F>(arr: &mut Array3<T>, geom: &BlockGeometry, f: F)
where
    F: Fn([f64; 3]) -> f64,
{
    for c in arr.interior() {
        arr.put(c, T::lit(f(geom.centre(c))));
    }
}

/// Interior norms of a field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Norms {
    /// Root mean square over interior cells.
    pub l2: f64,
    pub linf: f64,
}

pub fn interior_norms<T: Real>(arr: &Array3<T>) -> Norms {
    let mut sum = 0.0;
    let mut max = 0.0f64;
    let mut n = 0usize;
    for c in arr.interior() {
        let v = arr.at(c).as_f64();
        sum += v * v;
        max = max.max(v.abs());
        n += 1;
    }
    Norms {
        l2: if n == 0 { 0.0 } else { (sum / n as f64).sqrt() },
        linf: max,
    }
}

/// Physical extent of the computational domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainBox {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl DomainBox {
    pub fn unit() -> Self {
        DomainBox {
            lo: [0.0; 3],
            hi: [1.0; 3],
        }
    }

    pub fn length(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.hi[a] - self.lo[a])
    }
}

/// Placement of one block in physical and global index space.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockGeometry {
    pub id: GridId,
    pub depth: u8,
    pub coord: [u32; 3],
    pub size: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    /// Global index of interior cell (0,0,0) in the depth lattice of cells.
    pub offset: [i64; 3],
    /// Whether each face lies on the domain hull, indexed by `Face::index`.
    pub hull: [bool; 6],
}

impl BlockGeometry {
    pub fn new(topo: &Topology, id: GridId, size: [usize; 3], domain: &DomainBox) -> Self {
        let n = &topo.nodes()[id.index()];
        let e = topo.spec().extent(n.depth);
        let len = domain.length();
        let spacing = [0, 1, 2].map(|a| len[a] / (e[a] as f64 * size[a] as f64));
        let origin = [0, 1, 2].map(|a| domain.lo[a] + f64::from(n.coord[a]) * size[a] as f64 * spacing[a]);
        let offset = [0, 1, 2].map(|a| i64::from(n.coord[a]) * size[a] as i64);
        let hull = Face::ALL.map(|f| topo.on_hull(id, f));
        BlockGeometry {
            id,
            depth: n.depth,
            coord: n.coord,
            size,
            spacing,
            origin,
            offset,
            hull,
        }
    }

    pub fn spec(&self) -> DGridSpec {
        DGridSpec {
            size: self.size,
            spacing: self.spacing,
        }
    }

    #[inline]
    pub fn centre(&self, c: [isize; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| self.origin[a] + (c[a] as f64 + 0.5) * self.spacing[a])
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }
}

/// Physical parameters of the fluid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FluidProperties {
    pub rho_inf: f64,
    pub mu: f64,
    pub beta: f64,
    pub t_ref: f64,
    pub gravity: [f64; 3],
    pub thermal_diffusivity: f64,
}

impl FluidProperties {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho_inf > 0.0) {
            return Err(Error::InvalidArgument("rho_inf must be > 0".into()));
        }
        if !(self.mu >= 0.0) || !(self.thermal_diffusivity >= 0.0) {
            return Err(Error::InvalidArgument("mu and thermal_diffusivity must be >= 0".into()));
        }
        Ok(())
    }

    pub fn kinematic_viscosity(&self) -> f64 {
        self.mu / self.rho_inf
    }
}

impl Default for FluidProperties {
    fn default() -> Self {
        FluidProperties {
            rho_inf: 1.0,
            mu: 1.0e-3,
            beta: 0.0,
            t_ref: 293.15,
            gravity: [0.0, 0.0, 0.0],
            thermal_diffusivity: 0.0,
        }
    }
}
