//! Shared fixture for the acceptance suite: the bundled evaluation config
//! and a lazily built pipeline reused by every criterion.

use stageflow::harness::PipelineConfig;

/// The pinned evaluation configuration for the bundled three-task suite.
pub fn fixture_config() -> PipelineConfig {
    PipelineConfig::default()
}
