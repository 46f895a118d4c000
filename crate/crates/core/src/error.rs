use thiserror::Error;

use crate::detect::DetectError;
use crate::features::FeatureError;
use crate::preprocess::PreprocessError;
use crate::session::SessionError;
use crate::sigcore::SigError;
use crate::synthgen::SynthError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("sigcore: {0}")]
    Sig(#[from] SigError),
    #[error("synthgen: {0}")]
    Synth(#[from] SynthError),
    #[error("preprocess: {0}")]
    Preprocess(#[from] PreprocessError),
    #[error("features: {0}")]
    Features(#[from] FeatureError),
    #[error("detect: {0}")]
    Detect(#[from] DetectError),
    #[error("session: {0}")]
    Session(#[from] SessionError),
    /// A module failure while processing a given epoch.
    #[error("epoch {epoch_index}: {source}")]
    AtEpoch {
        epoch_index: u64,
        #[source]
        source: Box<Error>,
    },
    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub fn at_epoch(self, epoch_index: u64) -> Self {
        match self {
            e @ Error::AtEpoch { .. } => e,
            e => Error::AtEpoch {
                epoch_index,
                source: Box::new(e),
            },
        }
    }

    /// Name of the module the failure originated in.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Sig(_) => "sigcore",
            Error::Synth(_) => "synthgen",
            Error::Preprocess(_) => "preprocess",
            Error::Features(_) => "features",
            Error::Detect(_) => "detect",
            Error::Session(_) => "session",
            Error::AtEpoch { source, .. } => source.module(),
            Error::Config(_) => "config",
        }
    }
}
