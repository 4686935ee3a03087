use std::fmt;
use std::process::ExitCode;

use xmodal::baseline::BaselineError;
use xmodal::encoder::EncoderError;
use xmodal::evalkit::EvalError;
use xmodal::extract::ExtractError;
use xmodal::filterscope::FilterError;
use xmodal::ingest::IngestError;
use xmodal::lora::LoraError;
use xmodal::probe::ProbeError;
use xmodal::weight_io::CheckpointError;

/// Failure class; decides the exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Class {
    Validation,
    Runtime,
    Divergence,
}

#[derive(Debug)]
pub struct CliError {
    pub class: Class,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            class: Class::Validation,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            class: Class::Runtime,
            message: message.into(),
        }
    }

    fn of(class: Class, e: &dyn fmt::Display) -> Self {
        Self {
            class,
            message: e.to_string(),
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self.class {
            Class::Validation => 1,
            Class::Runtime => 2,
            Class::Divergence => 3,
        })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::of(Class::Runtime, &e)
    }
}

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> Self {
        let class = match e {
            ProbeError::Divergence { .. } => Class::Divergence,
            ProbeError::Config(_) | ProbeError::DegenerateLabels(_) => Class::Validation,
            _ => Class::Runtime,
        };
        Self::of(class, &e)
    }
}

impl From<EncoderError> for CliError {
    fn from(e: EncoderError) -> Self {
        let class = match e {
            EncoderError::InvalidTap { .. } | EncoderError::Config(_) | EncoderError::Adapter(_) => Class::Validation,
            _ => Class::Runtime,
        };
        Self::of(class, &e)
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        let class = match e {
            IngestError::Parse(_) | IngestError::Validation(_) => Class::Validation,
            _ => Class::Runtime,
        };
        Self::of(class, &e)
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::of(Class::Runtime, &e)
    }
}

impl From<ExtractError> for CliError {
    fn from(e: ExtractError) -> Self {
        match e {
            ExtractError::Encoder(inner) => inner.into(),
            ExtractError::Ingest(inner) => inner.into(),
            ExtractError::MissingLayer { .. } => Self::of(Class::Validation, &e),
            _ => Self::of(Class::Runtime, &e),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Probe(inner) => inner.into(),
            EvalError::Extract(inner) => inner.into(),
            EvalError::Split(_) | EvalError::Stratification { .. } => Self::of(Class::Validation, &e),
            _ => Self::of(Class::Runtime, &e),
        }
    }
}

impl From<LoraError> for CliError {
    fn from(e: LoraError) -> Self {
        match e {
            LoraError::Probe(inner) => inner.into(),
            LoraError::Encoder(inner) => inner.into(),
            LoraError::Divergence { .. } => Self::of(Class::Divergence, &e),
            LoraError::Config(_) | LoraError::Rank { .. } => Self::of(Class::Validation, &e),
            _ => Self::of(Class::Runtime, &e),
        }
    }
}

impl From<BaselineError> for CliError {
    fn from(e: BaselineError) -> Self {
        match e {
            BaselineError::Eval(inner) => inner.into(),
            BaselineError::Ingest(inner) => inner.into(),
            BaselineError::Config(_) | BaselineError::Labels(_) => Self::of(Class::Validation, &e),
            _ => Self::of(Class::Runtime, &e),
        }
    }
}

impl From<FilterError> for CliError {
    fn from(e: FilterError) -> Self {
        let class = match e {
            FilterError::Shape(_) => Class::Runtime,
            _ => Class::Validation,
        };
        Self::of(class, &e)
    }
}
