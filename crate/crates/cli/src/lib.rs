//! Command-line front end for `dit_anima`.

pub mod commands;
pub mod config;

use dit_anima::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Process exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) | Error::Degenerate(_) => EXIT_NUMERIC,
        Error::Io(_) => EXIT_IO,
        Error::Config(_)
        | Error::Manifest(_)
        | Error::Format(_)
        | Error::Shape(_)
        | Error::Index(_)
        | Error::Contract(_) => EXIT_CONFIG,
    }
}
