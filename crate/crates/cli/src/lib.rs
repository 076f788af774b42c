//! Library surface of the CLI: configuration plus the subcommand
//! implementations, kept callable so integration tests can drive full
//! runs in-process.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_evaluate, cmd_gen_data, cmd_gradcheck, cmd_report, cmd_select, cmd_train, exit_code,
    EvalInput, Manifest, SelectionSummary, TrainSummary, EXIT_ACCEPTANCE_FAILURE,
};
pub use config::RunConfig;
