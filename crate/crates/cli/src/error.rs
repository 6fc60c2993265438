use std::path::Path;

use segprice::clustering::ClusterError;
use segprice::demand::DemandError;
use segprice::ingest::IngestError;
use segprice::optim::SolveError;
use segprice::pricing::PricingError;
use segprice::segmentation::SegmentationError;
use segprice::synthgen::SynthError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Infeasible(String),
    #[error("{0}")]
    Solver(String),
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::Solver(_) => 4,
        }
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

fn from_solve(e: &SolveError, msg: String) -> CliError {
    match e {
        SolveError::Infeasible { .. } | SolveError::NoFeasibleStart { .. } => CliError::Infeasible(msg),
        SolveError::Dimension(_) | SolveError::Invalid(_) => CliError::Validation(msg),
        _ => CliError::Solver(msg),
    }
}

impl From<DemandError> for CliError {
    fn from(e: DemandError) -> Self {
        let msg = e.to_string();
        match &e {
            DemandError::Solver(s) => from_solve(s, msg),
            _ => CliError::Validation(msg),
        }
    }
}

impl From<PricingError> for CliError {
    fn from(e: PricingError) -> Self {
        let msg = e.to_string();
        match e {
            PricingError::Infeasible(_) => CliError::Infeasible(msg),
            PricingError::Solver(_) => CliError::Solver(msg),
            PricingError::Demand(d) => CliError::from(d),
            PricingError::Invalid(_) | PricingError::Synth(_) => CliError::Validation(msg),
        }
    }
}

impl From<SegmentationError> for CliError {
    fn from(e: SegmentationError) -> Self {
        let msg = e.to_string();
        match e {
            SegmentationError::Ingest(i) => CliError::from(i),
            SegmentationError::Fit { source: DemandError::Solver(s), .. } => from_solve(&s, msg),
            SegmentationError::Cluster { source: ClusterError::Degenerate { .. } | ClusterError::CoincidentCentroids(..), .. } => {
                CliError::Solver(msg)
            }
            _ => CliError::Validation(msg),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Validation(e.to_string())
    }
}
