use thiserror::Error;

use crate::calib::CalibError;
use crate::covis::CovisError;
use crate::depth::DepthError;
use crate::emf::EmfError;
use crate::flow::FlowError;
use crate::geom::GeomError;
use crate::io::IoError;
use crate::metrics::MetricError;
use crate::synth::SynthError;
use crate::warp::WarpError;

/// Any failure surfaced by the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Depth(#[from] DepthError),
    #[error(transparent)]
    Emf(#[from] EmfError),
    #[error(transparent)]
    Covis(#[from] CovisError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{0}")]
    Input(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Whether a failure lies with the inputs or with a numerical procedure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Input,
    Numerical,
}

fn geom_kind(e: &GeomError) -> ErrorKind {
    match e {
        GeomError::UndistortDiverged { .. } | GeomError::Degenerate(_) => ErrorKind::Numerical,
        _ => ErrorKind::Input,
    }
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use ErrorKind::*;
        match self {
            Error::Geom(e) => geom_kind(e),
            Error::Emf(EmfError::EmptyStatistics { .. }) => Numerical,
            Error::Emf(EmfError::Geom(e)) => geom_kind(e),
            Error::Depth(DepthError::NoConsensus { .. } | DepthError::DegenerateSample) => Numerical,
            Error::Warp(WarpError::NonConvergence { .. } | WarpError::VacuumRay(_)) => Numerical,
            Error::Warp(WarpError::Geom(e)) => geom_kind(e),
            Error::Calib(CalibError::NoConsensus { .. }) => Numerical,
            Error::Synth(SynthError::Geom(e)) => geom_kind(e),
            _ => Input,
        }
    }
}
