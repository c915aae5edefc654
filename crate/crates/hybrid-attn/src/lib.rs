//! Std companion to `hybrid-attn-core`: run configs, checkpoints, batch
//! parallel training, and the bodies of the `hybrid-attn` subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;

use hybrid_attn_core::Error as CoreError;

pub use config::{ConfigError, RunConfig};

/// Process exit code for an error: 2 for configuration problems, 3 for
/// numerical failures, 1 for anything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Config(_) | CoreError::Capacity { .. } => 2,
                CoreError::Diverged { .. }
                | CoreError::NonFinite { .. }
                | CoreError::NanScore { .. } => 3,
                _ => 1,
            };
        }
    }
    1
}
