//! Maps library errors onto the process exit codes.
//!
//! 2: usage (bad flags, values the model cannot accept, missing zoo quality);
//! 3: parse or format (unreadable files, corrupt containers, checkpoints, CSVs);
//! 4: numeric failure (divergence, non-finite values, degenerate RD data).

use std::fmt;
use std::process::ExitCode;

use nic_core::codec::CodecError;
use nic_core::entropy::EntropyError;
use nic_core::eval::EvalError;
use nic_core::image::ImageError;
use nic_core::overfit::OverfitError;
use nic_core::pipeline::PipelineError;
use nic_core::train::TrainError;
use nic_core::update::UpdateError;
use nic_core::{ContainerError, RdError, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Usage = 2,
    Format = 3,
    Numeric = 4,
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Usage,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Numeric,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.kind as u8)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

trait Classify {
    fn kind(&self) -> Kind;
}

impl Classify for TensorError {
    fn kind(&self) -> Kind {
        Kind::Numeric
    }
}

impl Classify for EntropyError {
    fn kind(&self) -> Kind {
        Kind::Format
    }
}

impl Classify for ContainerError {
    fn kind(&self) -> Kind {
        Kind::Format
    }
}

impl Classify for ImageError {
    fn kind(&self) -> Kind {
        Kind::Format
    }
}

impl Classify for CodecError {
    fn kind(&self) -> Kind {
        match self {
            Self::Tensor(_) | Self::NonFinite(_) => Kind::Numeric,
            Self::Indivisible { .. } => Kind::Usage,
            Self::Entropy(_) | Self::Arch(_) | Self::Checkpoint(_) | Self::Io(_) => Kind::Format,
        }
    }
}

impl Classify for UpdateError {
    fn kind(&self) -> Kind {
        match self {
            Self::OutOfRange { .. } | Self::BadScale(_) | Self::NonFinite => Kind::Numeric,
            Self::Codec(e) => e.kind(),
            Self::BadLayerCount { .. } | Self::Empty | Self::Entropy(_) => Kind::Format,
        }
    }
}

impl Classify for RdError {
    fn kind(&self) -> Kind {
        match self {
            Self::Csv { .. } | Self::Io(_) => Kind::Format,
            _ => Kind::Numeric,
        }
    }
}

impl Classify for PipelineError {
    fn kind(&self) -> Kind {
        match self {
            Self::Codec(e) => e.kind(),
            Self::Update(e) => e.kind(),
            Self::Container(_) | Self::Image(_) | Self::Mismatch(_) => Kind::Format,
        }
    }
}

impl Classify for TrainError {
    fn kind(&self) -> Kind {
        match self {
            Self::Codec(e) => e.kind(),
            Self::Pipeline(e) => e.kind(),
            Self::Tensor(_) | Self::Diverged { .. } => Kind::Numeric,
            Self::Config(_) => Kind::Usage,
            Self::Image(_) | Self::Manifest(_) | Self::Io(_) => Kind::Format,
        }
    }
}

impl Classify for OverfitError {
    fn kind(&self) -> Kind {
        match self {
            Self::Update(e) => e.kind(),
            Self::Pipeline(e) => e.kind(),
            Self::Config(_) => Kind::Usage,
            Self::Tensor(_) | Self::Rd(_) | Self::NonFinite { .. } | Self::NonPositiveRate(_) => Kind::Numeric,
        }
    }
}

impl Classify for EvalError {
    fn kind(&self) -> Kind {
        match self {
            Self::Train(e) => e.kind(),
            Self::Pipeline(e) => e.kind(),
            Self::Overfit(e) => e.kind(),
            Self::Rd(e) => e.kind(),
            Self::Io(_) => Kind::Format,
            Self::Config(_) => Kind::Usage,
        }
    }
}

macro_rules! failure_from {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Self { kind: e.kind(), message: e.to_string() }
            }
        }
    )*};
}

failure_from!(
    CodecError,
    ContainerError,
    EvalError,
    ImageError,
    OverfitError,
    PipelineError,
    RdError,
    TrainError,
    UpdateError
);

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self {
            kind: Kind::Format,
            message: e.to_string(),
        }
    }
}
