// SPDX-License-Identifier: MIT OR Apache-2.0

//! Locating OCR heads in vision-language models from attention traces.
//!
//! The pipeline: render text-in-image instances ([`textimage`]), map answer
//! boxes to patch tokens ([`patch`]), read per-head attention evidence from
//! model traces ([`trace`]), score and classify heads ([`scoring`]), compare
//! head populations ([`analysis`]) and rewrite attention ([`interventions`]).
//! [`oracle`] builds synthetic traces with known answers for testing all of it.

pub mod analysis;
pub mod heads;
pub mod interventions;
pub mod metrics;
pub mod oracle;
pub mod patch;
pub mod records;
pub mod scoring;
pub mod textimage;
pub mod trace;

pub use heads::HeadId;

use thiserror::Error;

/// Any error raised by this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Render(#[from] textimage::RenderError),
    #[error(transparent)]
    Patch(#[from] patch::PatchError),
    #[error(transparent)]
    Trace(#[from] trace::TraceError),
    #[error(transparent)]
    Scoring(#[from] scoring::ScoringError),
    #[error(transparent)]
    Analysis(#[from] analysis::AnalysisError),
    #[error(transparent)]
    Intervention(#[from] interventions::InterventionError),
    #[error(transparent)]
    Oracle(#[from] oracle::OracleError),
    #[error(transparent)]
    Record(#[from] records::RecordError),
}

impl Error {
    /// Whether the root cause is a filesystem or stream failure.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Trace(trace::TraceError::Io(_))
                | Error::Record(records::RecordError::Io(_))
                | Error::Scoring(scoring::ScoringError::Trace(trace::TraceError::Io(_)))
                | Error::Intervention(interventions::InterventionError::Trace(trace::TraceError::Io(_)))
                | Error::Oracle(oracle::OracleError::Trace(trace::TraceError::Io(_)))
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
