use thiserror::Error;

/// Errors raised by the library. Every variant carries a stable kebab-case
/// code (see [`Error::code`]) used in reports and by the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty-region: {0}")]
    EmptyRegion(&'static str),

    #[error("depth-exceeded: requested {requested}, limit {limit}")]
    DepthExceeded { requested: u32, limit: u32 },

    #[error("box-budget-exceeded: {boxes} boxes exceeds budget {budget}")]
    BoxBudgetExceeded { boxes: u64, budget: u64 },

    #[error("out-of-range: {0}")]
    OutOfRange(String),

    #[error("no-threshold-found below {0}")]
    NoThresholdFound(f64),

    #[error("unsupported-base: N = {base}; {hint}")]
    UnsupportedBase { base: u32, hint: &'static str },

    #[error("field-window-too-small: {0}")]
    FieldWindowTooSmall(String),

    #[error("grid-too-large: {requested} exceeds cap {cap}")]
    GridTooLarge { requested: usize, cap: usize },

    #[error("window-at-boundary: {0}")]
    WindowAtBoundary(String),

    #[error("scale-nesting-violated: {0}")]
    ScaleNestingViolated(String),

    #[error("enumeration-budget-exceeded: {0} nodes")]
    EnumerationBudgetExceeded(u64),

    #[error("beta-too-large: neighbour sum {sum} > 1/2 at box {at}")]
    BetaTooLarge { sum: f64, at: String },

    #[error("trace-misses-window")]
    TraceMissesWindow,

    #[error("map-composition-overflow at step {0}")]
    MapCompositionOverflow(usize),

    #[error("unrenderable: {0}")]
    Unrenderable(String),

    #[error("invalid configuration: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::EmptyRegion(_) => "empty-region",
            Error::DepthExceeded { .. } => "depth-exceeded",
            Error::BoxBudgetExceeded { .. } => "box-budget-exceeded",
            Error::OutOfRange(_) => "out-of-range",
            Error::NoThresholdFound(_) => "no-threshold-found",
            Error::UnsupportedBase { .. } => "unsupported-base",
            Error::FieldWindowTooSmall(_) => "field-window-too-small",
            Error::GridTooLarge { .. } => "grid-too-large",
            Error::WindowAtBoundary(_) => "window-at-boundary",
            Error::ScaleNestingViolated(_) => "scale-nesting-violated",
            Error::EnumerationBudgetExceeded(_) => "enumeration-budget-exceeded",
            Error::BetaTooLarge { .. } => "beta-too-large",
            Error::TraceMissesWindow => "trace-misses-window",
            Error::MapCompositionOverflow(_) => "map-composition-overflow",
            Error::Unrenderable(_) => "unrenderable",
            Error::Validation(_) => "validation",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
