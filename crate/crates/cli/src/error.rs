use std::fmt;

/// Bad input the user can fix: config, flags, missing prerequisite
/// artifacts. Exit code 1.
#[derive(Debug)]
pub struct ValidationError(pub String);

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ValidationError {}

pub type CliResult<T> = anyhow::Result<T>;

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    ValidationError(msg.into()).into()
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.is::<ValidationError>() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}
