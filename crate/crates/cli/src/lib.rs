//! Experiment orchestration: a TOML config drives corpus synthesis, victim
//! and GAN training, the attack campaign, the defense and the report.

pub mod config;
pub mod pipeline;
pub mod report;

pub use config::{ExperimentConfig, Stage, Variant};
pub use pipeline::run;
pub use report::{render_report, ReportRow};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage} failed: {cause}")]
    Stage { stage: Stage, cause: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage { .. } => 1,
        }
    }
}
