use proptest::prelude::*;

use blockflow::bench::noisy_pool;
use blockflow::config::{parse_config, RunConfig};
use blockflow::dgrid::{fill_array, Array3};
use blockflow::morton;
use blockflow::mg::block_residual;
use blockflow::ns::{self, BoundarySpec, FlowConfig};
use blockflow::partition::assign;
use blockflow::server::{Request, Response};
use blockflow::topology::NeighborKind;
use blockflow::{
    DomainBox, ExchangeMode, Face, FluidProperties, GridId, Interpolation, MGConfig, PlanId, RefinementSpec, Slot, Topology,
    Var, WorkerPool,
};

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        cases: n,
        ..ProptestConfig::default()
    }
}

/// Adaptive hierarchy whose refinement is decided by a seeded hash of each
/// region; `None` when the draw breaks 2:1 balance.
fn random_adaptive(seed: u64, base: u8, d_max: u8, density: u64) -> Option<Topology> {
    let spec = RefinementSpec::new([2; 3], [2; 3], d_max).unwrap();
    Topology::build_adaptive(spec, base, |q| {
        let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
        for v in [q.depth as u32, q.coord[0], q.coord[1], q.coord[2]] {
            h = (h ^ u64::from(v)).wrapping_mul(0x100_0000_01b3);
            h ^= h >> 29;
        }
        h % 100 < density
    })
    .ok()
}

/// Storage cells outside the interior.
fn halo<T: Copy>(a: &Array3<T>) -> Vec<T> {
    let d = a.dims().map(|x| x as isize - 1);
    let mut out = Vec::new();
    for k in -1..d[2] {
        for j in -1..d[1] {
            for i in -1..d[0] {
                if !a.is_interior([i, j, k]) {
                    out.push(a.at([i, j, k]));
                }
            }
        }
    }
    out
}

fn bits(pool: &WorkerPool<f64>) -> Vec<u64> {
    pool.blocks()
        .into_iter()
        .filter(|(_, b)| b.leaf)
        .flat_map(|(_, b)| b.fields.arrays().iter().flat_map(|a| a.as_slice().iter().map(|v| v.to_bits())).collect::<Vec<_>>())
        .collect()
}

fn exchange_all(pool: &mut WorkerPool<f64>, interp: Interpolation, mode: ExchangeMode) {
    let slots = Var::ALL.map(Slot::Var);
    pool.run(|w| w.exchange(PlanId::Leaves, &slots, interp, mode, None)).unwrap();
}

proptest! {
    #![proptest_config(cases(256))]

    #[test]
    fn morton_round_trips(x in 0u32..1 << 21, y in 0u32..1 << 21, z in 0u32..1 << 21) {
        let k = morton::encode([x, y, z]);
        prop_assert_eq!(morton::decode(k), [x, y, z]);
    }

    #[test]
    fn server_records_round_trip(grid in any::<u32>(), to in any::<u32>(), generation in any::<u64>(),
                                 grids in proptest::collection::vec(any::<u32>(), 0..20),
                                 msg in "[a-z ]{0,40}") {
        for r in [Request::QueryOwner { grid: GridId(grid) }, Request::RequestMigrate { grid: GridId(grid), to }, Request::FetchPattern { rank: to }] {
            prop_assert_eq!(Request::decode(&r.encode()).unwrap(), r);
        }
        let volumes: Vec<u64> = grids.iter().map(|&g| u64::from(g) * 3).collect();
        for r in [
            Response::Owner { grid: GridId(grid), rank: to, generation },
            Response::Pattern { rank: to, generation, grids: grids.iter().copied().map(GridId).collect(), volumes },
            Response::Error { code: 4, message: msg },
        ] {
            prop_assert_eq!(Response::decode(&r.encode()).unwrap(), r);
        }
    }
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn assignment_is_a_balanced_partition(depth in 0u8..=3, seed in any::<u64>()) {
        let t = Topology::build_uniform(RefinementSpec::cubic(3), depth).unwrap();
        let p = 1 + (seed % t.len() as u64) as usize;
        let map = assign(&t, p).unwrap();
        prop_assert!(map.balance_report(&t).imbalance <= 1);
        let mut seen = vec![0; t.len()];
        for r in 0..p {
            for g in map.grids_of(r) {
                seen[g.index()] += 1;
                prop_assert_eq!(map.owner(*g).unwrap(), r);
            }
        }
        prop_assert!(seen.iter().all(|&n| n == 1));
    }

    #[test]
    fn neighbour_relations_are_mutual(seed in any::<u64>(), density in 10u64..60) {
        let t = random_adaptive(seed, 1, 3, density);
        prop_assume!(t.is_some());
        let t = t.unwrap();
        for a in t.leaves() {
            for f in Face::ALL {
                let n = t.find_neighbor(a, f).unwrap();
                match n.kind {
                    NeighborKind::SameLevel => {
                        let back = t.find_neighbor(n.ids[0], f.opposite()).unwrap();
                        prop_assert_eq!(back.kind, NeighborKind::SameLevel);
                        prop_assert_eq!(back.ids, vec![a]);
                    }
                    NeighborKind::FinerSet => {
                        for &c in &n.ids {
                            let back = t.find_neighbor(c, f.opposite()).unwrap();
                            prop_assert_eq!(back.kind, NeighborKind::Coarser);
                            prop_assert_eq!(back.ids, vec![a]);
                        }
                    }
                    NeighborKind::Coarser => {
                        let back = t.find_neighbor(n.ids[0], f.opposite()).unwrap();
                        prop_assert_eq!(back.kind, NeighborKind::FinerSet);
                        prop_assert!(back.ids.contains(&a));
                    }
                    NeighborKind::DomainBoundary => prop_assert!(t.on_hull(a, f)),
                }
            }
        }
    }

    #[test]
    fn fill_round_trips_and_leaves_the_halo(sx in 1usize..6, sy in 1usize..6, sz in 1usize..6, scale in -1e6f64..1e6) {
        let t = Topology::build_uniform(RefinementSpec::cubic(2), 0).unwrap();
        let geom = blockflow::BlockGeometry::new(&t, GridId(0), [sx, sy, sz], &DomainBox::unit());
        let mut a = Array3::filled([sx, sy, sz], f64::from_bits(0x7ff8_dead_beef_0001));
        let f = |x: [f64; 3]| scale * (x[0] - 2.0 * x[1]) + x[2].sin();
        fill_array(&mut a, &geom, f);
        for c in a.interior() {
            prop_assert_eq!(a.at(c).to_bits(), f(geom.centre(c)).to_bits());
        }
        prop_assert!(halo(&a).iter().all(|v| v.to_bits() == 0x7ff8_dead_beef_0001));
    }

    #[test]
    fn config_serialisation_is_idempotent(kind in 0usize..3, depth in 0u8..5, workers in 1usize..9,
                                          tol_exp in 4i32..12, jacobi in any::<bool>(), seed in any::<u32>()) {
        let name = ["laplace_cube", "channel", "heated_cavity"][kind];
        let smoother = if jacobi { "jacobi" } else { "red_black_gauss_seidel" };
        let text = format!(
            "scenario = \"{name}\"\ndepth = {depth}\nworkers = {workers}\nseed = {seed}\n[solver]\ntol = 1e-{tol_exp}\nsmoother = \"{smoother}\"\n"
        );
        let once = parse_config(&text).unwrap();
        let text1 = once.to_toml().unwrap();
        let twice = parse_config(&text1).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert_eq!(text1, twice.to_toml().unwrap());
    }
}

proptest! {
    #![proptest_config(cases(24))]

    #[test]
    fn exchange_is_idempotent_and_partition_independent(seed in any::<u64>(), density in 10u64..50, p in 2usize..9,
                                                        trilinear in any::<bool>(), edges in any::<bool>()) {
        let t = random_adaptive(seed, 1, 3, density);
        prop_assume!(t.is_some());
        let t = t.unwrap();
        let interp = if trilinear { Interpolation::Trilinear } else { Interpolation::PiecewiseConstant };
        let mode = if edges { ExchangeMode::WithEdges } else { ExchangeMode::Faces };
        let fill = |pool: &mut WorkerPool<f64>| {
            pool.for_each_block_mut(|b| {
                let id = u64::from(b.geom.id.0);
                for (v, a) in b.fields.arrays_mut().iter_mut().enumerate() {
                    for (n, x) in a.as_mut_slice().iter_mut().enumerate() {
                        let h = (seed ^ id.wrapping_mul(0x9e37_79b9) ^ (v as u64) << 40 ^ n as u64).wrapping_mul(0x2545_f491_4f6c_dd1d);
                        *x = (h >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
                    }
                }
            });
        };
        let size = [4, 4, 4];
        let mut one = WorkerPool::new(t.clone(), DomainBox::unit(), size, 1).unwrap();
        let mut many = WorkerPool::new(t, DomainBox::unit(), size, p.min(one.topology().len())).unwrap();
        fill(&mut one);
        fill(&mut many);
        exchange_all(&mut one, interp, mode);
        exchange_all(&mut many, interp, mode);
        let first = bits(&one);
        prop_assert_eq!(&first, &bits(&many));
        exchange_all(&mut one, interp, mode);
        prop_assert_eq!(first, bits(&one));
    }

    #[test]
    fn constants_survive_every_interface(seed in any::<u64>(), density in 10u64..50, c in -1e3f64..1e3, trilinear in any::<bool>()) {
        let t = random_adaptive(seed, 1, 3, density);
        prop_assume!(t.is_some());
        let mut pool = WorkerPool::<f64>::new(t.unwrap(), DomainBox::unit(), [4, 4, 4], 3).unwrap();
        pool.for_each_block_mut(|b| {
            for a in b.fields.arrays_mut() {
                a.fill_all(f64::NAN);
                for cell in a.interior().collect::<Vec<_>>() {
                    a.put(cell, c);
                }
            }
        });
        let interp = if trilinear { Interpolation::Trilinear } else { Interpolation::PiecewiseConstant };
        exchange_all(&mut pool, interp, ExchangeMode::Faces);
        let tol = 4.0 * f64::EPSILON * c.abs();
        for (_, b) in pool.blocks() {
            if !b.leaf {
                continue;
            }
            for f in Face::ALL {
                if b.geom.hull[f.index()] {
                    continue;
                }
                let a = f.axis();
                let layer = if f.is_positive() { b.geom.size[a] as isize } else { -1 };
                for cell in b.fields[Var::P].interior().filter(|x| x[a] == 0) {
                    let mut g = cell;
                    g[a] = layer;
                    for arr in b.fields.arrays() {
                        prop_assert!((arr.at(g) - c).abs() <= tol, "{} vs {}", arr.at(g), c);
                    }
                }
            }
        }
    }

    #[test]
    fn supersteps_stay_in_lockstep(p in 1usize..7, ops in proptest::collection::vec(0u8..3, 1..12)) {
        let t = Topology::build_uniform(RefinementSpec::cubic(2), 1).unwrap();
        let mut pool = WorkerPool::<f64>::new(t, DomainBox::unit(), [2, 2, 2], p).unwrap();
        let phases = pool.run(|w| {
            for &op in &ops {
                match op {
                    0 => w.exchange(PlanId::Leaves, &[Slot::Var(Var::P)], Interpolation::Trilinear, ExchangeMode::WithEdges, None)?,
                    1 => { w.allreduce_sum(vec![(w.rank() as u64, vec![1.0])], 1)?; }
                    _ => w.barrier()?,
                }
            }
            Ok(w.comm().phase())
        }).unwrap();
        prop_assert!(phases.iter().all(|&x| x == phases[0]));
        prop_assert_eq!(pool.server_stats().field_bytes_in.load(std::sync::atomic::Ordering::Relaxed), 0);
    }
}

#[test]
fn kernels_never_write_halos() {
    let cfg: RunConfig = parse_config("scenario = \"heated_cavity\"\ndepth = 1\nseed = 5\n[grid]\ndgrid = [4, 4, 4]\n").unwrap();
    let mut pool = noisy_pool(&cfg, 1).unwrap();
    let flow = FlowConfig {
        props: FluidProperties {
            gravity: [0.0, 0.0, -9.81],
            beta: 1e-3,
            thermal_diffusivity: 1e-3,
            ..FluidProperties::default()
        },
        bc: BoundarySpec::closed_box(),
        mg: MGConfig::default(),
        thermal: true,
        interface: Interpolation::Trilinear,
    };
    let ids: Vec<GridId> = pool.blocks().into_iter().map(|(g, _)| g).collect();
    for g in ids {
        let b = pool.block_mut(g).unwrap();
        let before: Vec<Vec<u64>> = b.fields.arrays().iter().map(|a| halo(a).iter().map(|v| v.to_bits()).collect()).collect();
        ns::intermediate_velocity_block(b, &flow, 1e-3, (1.5, -0.5));
        ns::temperature_step_block(b, &flow, 1e-3, (1.5, -0.5));
        ns::pressure_rhs_block(b, &flow.props, 1e-3);
        ns::correct_velocity_block(b, &flow.props, 1e-3);
        block_residual(b, Slot::Var(Var::P), Slot::Var(Var::Rhs), Slot::Tmp);
        let after: Vec<Vec<u64>> = b.fields.arrays().iter().map(|a| halo(a).iter().map(|v| v.to_bits()).collect()).collect();
        assert_eq!(before, after, "grid {g}");
    }
}
