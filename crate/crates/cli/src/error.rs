use std::fmt;

use clgt::explainer::ExplainError;
use clgt::graphgen::GraphError;
use clgt::ingest::IngestError;
use clgt::model::ModelError;
use clgt::pipeline::PipelineError;
use clgt::train::TrainError;

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_PARSE: u8 = 2;
pub const EXIT_VALIDATION: u8 = 3;
pub const EXIT_MISSING_CHECKPOINT: u8 = 4;

/// An error with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        CliError {
            code,
            error: error.into(),
        }
    }

    pub fn parse(msg: impl fmt::Display) -> Self {
        CliError::new(EXIT_PARSE, anyhow::anyhow!("{msg}"))
    }

    pub fn invalid(msg: impl fmt::Display) -> Self {
        CliError::new(EXIT_VALIDATION, anyhow::anyhow!("{msg}"))
    }

    pub fn failure(msg: impl fmt::Display) -> Self {
        CliError::new(EXIT_FAILURE, anyhow::anyhow!("{msg}"))
    }

    pub fn context(self, ctx: impl fmt::Display) -> Self {
        CliError {
            code: self.code,
            error: self.error.context(ctx.to_string()),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type CliResult<T> = Result<T, CliError>;

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        let code = match e {
            IngestError::Csv { .. }
            | IngestError::MissingColumn { .. }
            | IngestError::BadEnumValue { .. }
            | IngestError::BadNumber { .. }
            | IngestError::BadGrade { .. } => EXIT_PARSE,
            IngestError::Io { .. } => EXIT_FAILURE,
            _ => EXIT_VALIDATION,
        };
        CliError::new(code, e)
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        let code = match e {
            GraphError::Csv(_) => EXIT_FAILURE,
            _ => EXIT_VALIDATION,
        };
        CliError::new(code, e)
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let code = match e {
            ModelError::BadConfig(_) => EXIT_VALIDATION,
            ModelError::Checkpoint(_) => EXIT_PARSE,
            _ => EXIT_FAILURE,
        };
        CliError::new(code, e)
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Ingest(e) => e.into(),
            PipelineError::Graph(e) => e.into(),
            PipelineError::Model(e) => e.into(),
            e @ PipelineError::Io { .. } => CliError::new(EXIT_FAILURE, e),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(e) => e.into(),
            TrainError::BadRatios(_) | TrainError::BadConfig(_) | TrainError::MissingLabel { .. } => {
                CliError::new(EXIT_VALIDATION, e)
            }
            e => CliError::new(EXIT_FAILURE, e),
        }
    }
}

impl From<ExplainError> for CliError {
    fn from(e: ExplainError) -> Self {
        match e {
            ExplainError::Model(e) => e.into(),
            ExplainError::Json(_) => CliError::new(EXIT_PARSE, e),
            ExplainError::BadProbability(_)
            | ExplainError::BadConfig(_)
            | ExplainError::UnknownVariable(_)
            | ExplainError::EmptySamples => CliError::new(EXIT_VALIDATION, e),
            e => CliError::new(EXIT_FAILURE, e),
        }
    }
}
