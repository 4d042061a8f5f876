use std::path::PathBuf;

use thiserror::Error;

use crate::mg::SolveReport;
use crate::topology::GridId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown grid {0}")]
    UnknownGrid(GridId),

    #[error("unknown worker rank {rank} (pool has {workers} workers)")]
    UnknownRank { rank: usize, workers: usize },

    #[error("unknown variable `{0}`")]
    UnknownVariable(String),

    #[error("2:1 balance violated between grid {a} (depth {depth_a}) and grid {b} (depth {depth_b})")]
    BalanceViolation {
        a: GridId,
        depth_a: u8,
        b: GridId,
        depth_b: u8,
    },

    #[error("exchange plan inconsistent with grids: {0}")]
    Inconsistent(String),

    #[error("stale exchange plan: plan generation {plan}, partition generation {map}")]
    StalePlan { plan: u64, map: u64 },

    #[error("unsupported refinement: {0}")]
    UnsupportedRefinement(String),

    #[error("pressure solver diverged after {} cycles (residual {:.3e})", .0.cycles, .0.final_residual)]
    Divergence(Box<SolveReport>),

    #[error("configuration error{}: {message}", position(*.line, *.column))]
    Config {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

fn position(line: usize, column: usize) -> String {
    if line == 0 {
        String::new()
    } else {
        format!(" at line {line}, column {column}")
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
