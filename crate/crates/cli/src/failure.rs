use ctxpose::Error;

/// A command failure with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_GRAPH: i32 = 3;
pub const EXIT_DATA: i32 = 4;

impl Failure {
    pub fn config(msg: impl Into<String>) -> Self {
        Failure { code: EXIT_CONFIG, message: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Failure { code: EXIT_DATA, message: msg.into() }
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        Failure { code: EXIT_INTERNAL, message: msg.into() }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::CyclicGraph | Error::DisconnectedGraph | Error::InvalidEdge(..) => EXIT_GRAPH,
        Error::InvalidConfig(_)
        | Error::Io { .. }
        | Error::Json(_)
        | Error::NonPositiveSigma(_)
        | Error::UnknownUpdateFunction(_)
        | Error::BoxTooSmall(_)
        | Error::SearchSpaceTooLarge { .. } => EXIT_CONFIG,
        Error::ShapeMismatch(_) | Error::Format { .. } | Error::EmptyDataset | Error::GtOutsideGrid(_) => EXIT_DATA,
        _ => EXIT_INTERNAL,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { code: exit_code(&e), message: e.to_string() }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

pub type CliResult<T> = Result<T, Failure>;
