use thiserror::Error;

/// Everything that can go wrong inside the bidding library.
#[derive(Debug, Error)]
pub enum BidError {
    #[error("degenerate duals: p + q_u - q_l = {0} must be positive")]
    DegenerateDuals(f64),

    #[error("invalid impression: {0}")]
    InvalidImpression(String),

    #[error("invalid campaign `{id}`: {reason}")]
    InvalidCampaign { id: String, reason: String },

    #[error("epsilon_c undefined: budget {budget} must exceed 2 * cpc_upper ({cpc_upper})")]
    EpsilonUndefined { budget: f64, cpc_upper: f64 },

    #[error("bracket failure: cost still {cost} > budget {budget} at the upper bracket {bracket}")]
    BracketFailure { cost: f64, budget: f64, bracket: f64 },

    #[error("lower CPC bound is not reachable by an auction-style bid (p + q_u - q_l hit the floor)")]
    InfeasibleLowerBound,

    #[error("instance too large for exhaustive 0-1 search: {0} impressions (limit {limit})", limit = crate::oracle::BRUTE_FORCE_LIMIT)]
    TooLarge(usize),

    #[error("empty history: at least one historical period is required")]
    EmptyHistory,

    #[error("conflicting log records for campaign `{campaign}` at step {step}")]
    ConflictingLogs { campaign: String, step: u32 },

    #[error("invalid controller setting: {0}")]
    InvalidController(String),

    #[error("{path}: line {line}: {reason}")]
    Parse {
        path: String,
        line: u64,
        reason: String,
    },

    #[error("schema mismatch in {path}: expected header `{expected}`, found `{found}`")]
    Schema {
        path: String,
        expected: String,
        found: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("campaign sets do not match: {0}")]
    Mismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = BidError> = std::result::Result<T, E>;
