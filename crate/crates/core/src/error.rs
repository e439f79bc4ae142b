use thiserror::Error;

/// Invalid simulation, sweep, or model configuration.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("{name} must be in [0, 1], got {value}")]
    FractionOutOfRange { name: &'static str, value: f64 },
    #[error("{name} must be at least {min}, got {value}")]
    TooSmall { name: &'static str, min: u64, value: u64 },
    #[error("copies_seeded ({copies}) exceeds num_nodes ({nodes})")]
    TooManyCopies { copies: usize, nodes: usize },
    #[error("usable_threshold must be in (0, 1], got {0}")]
    BadThreshold(f64),
    #[error("warmup_rounds ({warmup}) must be less than total_rounds ({total})")]
    WarmupTooLong { warmup: u32, total: u32 },
    #[error("no update has a full lifetime inside rounds {warmup}..{total}")]
    NoCountedUpdates { warmup: u32, total: u32 },
    #[error("invalid sweep: {0}")]
    Sweep(String),
    #[error("invalid graph: {0}")]
    Graph(String),
    #[error("invalid model: {0}")]
    Model(String),
}
