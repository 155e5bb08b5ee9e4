//! Error type shared across the crate.

/// Convenient alias used by every fallible function in this crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong while building designs, kernels, or tests.
///
/// Statistical degeneracies (rank loss, singular cluster blocks, negative
/// variance estimates) are reported as typed variants rather than panics so
/// that grid-based confidence-set inversion can treat an unstable grid point
/// as "rejected with a warning" instead of aborting the whole sweep.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Array shapes do not line up (row counts, block sizes, ...).
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Cluster labels must form contiguous runs of rows.
    #[error("cluster labels are not contiguous: the label in row {row} already closed an earlier run")]
    NonContiguousClusters { row: usize },

    /// A matrix that must have full column rank does not.
    #[error("rank deficient: rank {observed} observed where {expected} is required")]
    RankDeficient { observed: usize, expected: usize },

    /// `I - P_[g,g]` is singular, i.e. cluster `g` has leverage one and the
    /// leave-cluster-out fit does not exist.
    #[error("cluster {0} has leverage one; leave-cluster-out quantities are undefined")]
    SingularClusterBlock(usize),

    /// The Khatri-Rao Gram system for the many-controls kernel is singular
    /// and inconsistent, so no kernel with an exactly zero block diagonal
    /// exists for this design.
    #[error("Khatri-Rao system is singular and inconsistent; the controls are too collinear with the cluster structure")]
    SingularKhatriRaoSystem,

    /// Instruments lose full rank once the given clusters are left out.
    #[error("design is rank deficient after leaving out clusters {0:?}")]
    RankDeficientAfterDrop(Vec<usize>),

    /// A variance estimate came out negative beyond numerical slack.
    #[error("variance estimate {0} is negative beyond numerical tolerance")]
    NegativeVariance(f64),

    /// Joint AR/score standardization failed because the estimated joint
    /// variance matrix is singular.
    #[error("joint variance matrix of the AR and score statistics is singular")]
    SingularJointVariance,

    /// The many-instrument AR statistic requires strictly fewer instruments
    /// than clusters.
    #[error("{k} instruments with {g} clusters: the cluster many-instrument AR requires k < G")]
    TooManyInstruments { k: usize, g: usize },

    /// The k x k weight matrix of the cluster moment projection is singular.
    #[error("cluster moment weight matrix is singular at this candidate value")]
    SingularWeight,

    /// All off-diagonal entries of the cluster moment projection vanish, so
    /// the jackknife variance of the many-instrument AR is degenerate.
    #[error("degenerate variance: all off-diagonal cluster moment projections vanish")]
    DegenerateVariance,

    /// The cluster-robust covariance of the moment vector is singular.
    #[error("cluster moment covariance matrix is singular")]
    SingularMomentCovariance,

    /// The estimated variance of the score vector is singular.
    #[error("score variance matrix is singular")]
    SingularScoreVariance,

    /// The cluster-robust first-stage weight matrix is singular.
    #[error("cluster-robust first-stage weight matrix is singular")]
    SingularW2,

    /// Operation defined only for a single endogenous regressor.
    #[error("operation requires a single endogenous regressor, got p = {0}")]
    UnsupportedDimension(usize),

    /// A column named in the schema is absent from the CSV header.
    #[error("missing column '{0}' in data file")]
    MissingColumn(String),

    /// A CSV cell failed to parse as a number.
    #[error("row {row}, column '{col}': {msg}")]
    Parse { row: usize, col: String, msg: String },

    /// The data file contains no observation rows.
    #[error("data file contains no rows")]
    EmptyData,

    /// A configuration value is out of range or internally inconsistent.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// The requested observation count cannot be split into the requested
    /// number of clusters.
    #[error("cannot split {n} observations into {g} nonempty clusters")]
    InfeasibleSizes { n: usize, g: usize },

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// Underlying CSV failure.
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
