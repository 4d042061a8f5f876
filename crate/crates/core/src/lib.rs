//! Block-structured hierarchical grids with halo exchange, a cell-centred
//! multigrid pressure solver and a fractional-step Navier-Stokes core, run on
//! an in-process message-passing worker pool.

pub mod error;
pub mod scalar;

pub mod morton;
pub mod topology;

pub mod dgrid;
pub mod exchange;
pub mod partition;
pub mod runtime;
pub mod server;

pub mod mg;
pub mod ns;

pub mod config;
pub mod bench;
pub mod scenario;
pub mod validate;
pub mod vtk;

pub use error::{Error, Result};
pub use scalar::Real;

pub use dgrid::{Array3, BlockGeometry, DGridSpec, DomainBox, FieldSet, FluidProperties, Var};
pub use exchange::{ExchangeMode, ExchangePlan, Interpolation};
pub use mg::{CoarseSolver, MGConfig, PoissonProblem, Smoother, SolveReport};
pub use ns::{BoundarySpec, FlowConfig, Scheme, StepReport, StepTimings, TimeIntegrator};
pub use partition::PartitionMap;
pub use runtime::{Block, PlanId, Slot, Worker, WorkerPool};
pub use topology::{Face, GridId, RefinementSpec, Topology};

pub type Fields = FieldSet<f64>;
pub type Fields32 = FieldSet<f32>;
pub type Pool = WorkerPool<f64>;
pub type Pool32 = WorkerPool<f32>;
