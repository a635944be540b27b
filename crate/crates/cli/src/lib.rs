//! Library surface of the command-line harness: run configuration, the
//! command implementations, and exit-code mapping.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_ablate_raw, cmd_evaluate, cmd_generate, cmd_interp, cmd_metric_sanity, cmd_sample,
    cmd_train_denoiser, cmd_train_vae, Predictor,
};
pub use config::RunConfig;

/// Process exit codes: 0 success, 2 usage, 3 validation, 4 numeric failure.
pub fn exit_code(err: &gridflow::Error) -> i32 {
    use gridflow::Error;
    match err {
        Error::Numeric(_) => 4,
        Error::Validation(msg) if msg.starts_with("usage:") => 2,
        _ => 3,
    }
}
