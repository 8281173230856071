use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
///
/// Every variant maps to a stable, machine-readable code via [`Error::code`],
/// which the command-line front end writes into its error records.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    // panel construction
    #[error("panel has no rows")]
    EmptyInput,
    #[error("unit {unit} has no observation for period {period}")]
    Unbalanced { unit: String, period: i64 },
    #[error("unit {unit} has more than one row for period {period}")]
    DuplicateObservation { unit: String, period: i64 },
    #[error("cohort label varies within unit {unit}")]
    NonAbsorbing { unit: String },
    #[error("missing {column} for unit {unit} in period {period}")]
    MissingValue {
        unit: String,
        period: i64,
        column: String,
    },
    #[error("unit {unit} is treated in the first period and has no pre-period")]
    CohortAtFirstPeriod { unit: String },
    #[error("unit {unit} has cohort {label}, which is not an observed period")]
    UnknownCohortPeriod { unit: String, label: i64 },
    #[error("expected {expected} covariate values, found {found}")]
    CovariateArity { expected: usize, found: usize },
    #[error("no never-treated units; a never-treated comparison group is required")]
    NoNeverTreated,
    #[error("no treated cohorts; nothing to estimate")]
    NoTreated,
    #[error("unknown covariate column `{0}`")]
    UnknownCovariate(String),
    #[error("cell ({g}, {t}) has no units")]
    EmptyCell { g: usize, t: usize },
    #[error("base period equals target period in cell ({g}, {t})")]
    BaseEqualsTarget { g: usize, t: usize },
    #[error("period {t} is outside 2..={last}")]
    PeriodOutOfRange { t: usize, last: usize },

    // numerics
    #[error("design matrix and response disagree: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in input")]
    NonFiniteInput,
    #[error("every column was dropped as collinear")]
    AllColumnsDropped,
    #[error("{rows} rows cannot identify {cols} coefficients")]
    Underdetermined { rows: usize, cols: usize },
    #[error("cluster-robust covariance needs at least two clusters")]
    SingleCluster,
    #[error("design matrix carries no cluster ids")]
    MissingClusters,
    #[error("complete or quasi-complete separation in logistic fit")]
    SeparationDetected,
    #[error("binary response has no variation")]
    NoVariation,
    #[error("response must be 0 or 1")]
    NotBinary,

    // estimators
    #[error("two-by-two DiD needs exactly two periods, found {0}")]
    MoreThanTwoPeriods(usize),
    #[error("two-by-two DiD needs exactly one treated cohort, found {0}")]
    MultipleCohorts(usize),
    #[error("observed mean minus effect must be positive for a counterfactual mean")]
    NonpositiveCounterfactual,
    #[error("need at least {needed} control units, found {found}")]
    InsufficientControls { needed: usize, found: usize },
    #[error("control propensity score {max_pscore} is not bounded away from one")]
    OverlapViolation { max_pscore: f64 },

    // aggregation and inference
    #[error("cell ({g}, {t}) is missing or failed")]
    MissingCell { g: usize, t: usize },
    #[error("no cohort is observed at event time {0}")]
    NoEligibleCohort(i64),
    #[error("bootstrap replicate {0} left a cell empty")]
    ReplicateDegenerate(usize),
    #[error("bootstrap needs at least {min} replicates, got {got}")]
    TooFewReplicates { min: usize, got: usize },

    // sensitivity
    #[error("need at least two pre-treatment periods, found {0}")]
    TooFewPrePeriods(usize),
    #[error("no pre-period placebo estimates supplied")]
    NoPrePeriods,
    #[error("sensitivity budgets must be finite and non-negative")]
    InvalidGrid,

    // simulation
    #[error("cohort {g} drew no units after {attempts} attempts")]
    EmptyCohort { g: usize, attempts: usize },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

impl Error {
    /// Stable upper-snake-case code for machine-readable error records.
    pub fn code(&self) -> &'static str {
        match self {
            Error::EmptyInput => "EMPTY_INPUT",
            Error::Unbalanced { .. } => "UNBALANCED",
            Error::DuplicateObservation { .. } => "DUPLICATE_OBSERVATION",
            Error::NonAbsorbing { .. } => "NONABSORBING",
            Error::MissingValue { .. } => "MISSING_VALUE",
            Error::CohortAtFirstPeriod { .. } => "COHORT_AT_FIRST_PERIOD",
            Error::UnknownCohortPeriod { .. } => "UNKNOWN_COHORT_PERIOD",
            Error::CovariateArity { .. } => "COVARIATE_ARITY",
            Error::NoNeverTreated => "NO_NEVER_TREATED",
            Error::NoTreated => "NO_TREATED",
            Error::UnknownCovariate(_) => "UNKNOWN_COVARIATE",
            Error::EmptyCell { .. } => "EMPTY_CELL",
            Error::BaseEqualsTarget { .. } => "BASE_EQUALS_TARGET",
            Error::PeriodOutOfRange { .. } => "PERIOD_OUT_OF_RANGE",
            Error::DimensionMismatch(_) => "DIMENSION_MISMATCH",
            Error::NonFiniteInput => "NONFINITE_INPUT",
            Error::AllColumnsDropped => "ALL_COLUMNS_DROPPED",
            Error::Underdetermined { .. } => "UNDERDETERMINED",
            Error::SingleCluster => "SINGLE_CLUSTER",
            Error::MissingClusters => "MISSING_CLUSTERS",
            Error::SeparationDetected => "SEPARATION_DETECTED",
            Error::NoVariation => "NO_VARIATION",
            Error::NotBinary => "NOT_BINARY",
            Error::MoreThanTwoPeriods(_) => "MORE_THAN_TWO_PERIODS",
            Error::MultipleCohorts(_) => "MULTIPLE_COHORTS",
            Error::NonpositiveCounterfactual => "NONPOSITIVE_COUNTERFACTUAL",
            Error::InsufficientControls { .. } => "INSUFFICIENT_CONTROLS",
            Error::OverlapViolation { .. } => "OVERLAP_VIOLATION",
            Error::MissingCell { .. } => "MISSING_CELL",
            Error::NoEligibleCohort(_) => "NO_ELIGIBLE_COHORT",
            Error::ReplicateDegenerate(_) => "REPLICATE_DEGENERATE",
            Error::TooFewReplicates { .. } => "TOO_FEW_REPLICATES",
            Error::TooFewPrePeriods(_) => "TOO_FEW_PRE_PERIODS",
            Error::NoPrePeriods => "NO_PRE_PERIODS",
            Error::InvalidGrid => "INVALID_GRID",
            Error::EmptyCohort { .. } => "EMPTY_COHORT",
            Error::InvalidScenario(_) => "INVALID_SCENARIO",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
