use std::fmt;
use std::io;

pub const EXIT_IO: u8 = 1;
pub const EXIT_ARGUMENT: u8 = 2;
pub const EXIT_FORMAT: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;
pub const EXIT_TOLERANCE: u8 = 5;
pub const EXIT_ANALYSIS: u8 = 6;

/// A command failure carrying the process exit code for its class.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

pub type CliResult<T> = Result<T, Failure>;

impl Failure {
    pub fn argument(message: impl Into<String>) -> Self {
        Self { code: EXIT_ARGUMENT, message: message.into() }
    }

    pub fn tolerance(message: impl Into<String>) -> Self {
        Self { code: EXIT_TOLERANCE, message: message.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<effattn::Error> for Failure {
    fn from(e: effattn::Error) -> Self {
        let code = match e {
            effattn::Error::Argument(_) => EXIT_ARGUMENT,
            effattn::Error::Numerical(_) => EXIT_NUMERICAL,
            effattn::Error::Format(_) => EXIT_FORMAT,
            effattn::Error::Analysis(_) => EXIT_ANALYSIS,
            effattn::Error::Io(_) => EXIT_IO,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Self { code: EXIT_IO, message: format!("i/o error: {e}") }
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Self { code: EXIT_IO, message: format!("csv output: {e}") }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self { code: EXIT_IO, message: format!("json output: {e}") }
    }
}

/// Attaches the offending path to I/O and format errors.
pub trait Context<T> {
    fn context(self, what: impl fmt::Display) -> CliResult<T>;
}

impl<T, E: Into<Failure>> Context<T> for Result<T, E> {
    fn context(self, what: impl fmt::Display) -> CliResult<T> {
        self.map_err(|e| {
            let f = e.into();
            Failure { code: f.code, message: format!("{what}: {}", f.message) }
        })
    }
}
