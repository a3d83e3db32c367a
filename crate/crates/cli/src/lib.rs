//! Command implementations behind the `blockmoe` binary. Kept as a library
//! so integration tests can drive the machinery directly as well as through
//! the executable.

pub mod bench;
pub mod stats;
pub mod train;
pub mod validate;

/// Failure modes that map onto process exit codes: usage errors exit 64,
/// divergence exits 2 (validation failures exit 1 via the suite results).
#[derive(Debug)]
pub enum CmdError {
    Usage(String),
    Divergence(String),
}

impl std::fmt::Display for CmdError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CmdError::Usage(m) => write!(f, "{m}"),
            CmdError::Divergence(m) => write!(f, "{m}"),
        }
    }
}

pub const EXIT_OK: u8 = 0;
pub const EXIT_VALIDATION_FAILURE: u8 = 1;
pub const EXIT_DIVERGENCE: u8 = 2;
pub const EXIT_USAGE: u8 = 64;

/// Parse a comma-separated list of positive values.
pub fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, CmdError> {
    s.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<T>()
                .map_err(|_| CmdError::Usage(format!("invalid {what} entry `{tok}`")))
        })
        .collect()
}
