//! Reproducible experiment runs over synthetic or file-backed cohorts.

pub mod commands;
pub mod config;
pub mod manifest;

/// Process exit status for a library error: 3 for numeric breakdown, 2 for
/// bad data or configuration.
pub fn exit_code(e: &trilandmark::Error) -> i32 {
    if e.is_numeric() {
        3
    } else {
        2
    }
}
