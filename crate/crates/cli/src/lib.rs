//! Library side of the `slimdet` command-line tool: command bodies, report
//! schemas and exit-code classification.

pub mod commands;
pub mod failure;
pub mod report;
pub mod source;
