//! Command-line front end: run configuration, subcommands and plots.

pub mod commands;
pub mod config;
pub mod gradsuite;
pub mod plot;

/// Process exit code for a failed command: 1 for bad input, 2 for a
/// failed run.
pub fn exit_code(e: &clab::Error) -> i32 {
    if e.is_validation() {
        1
    } else {
        2
    }
}
