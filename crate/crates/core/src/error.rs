use thiserror::Error;

/// Errors raised by the solvers. Variants carry enough context to locate the
/// failing region or node in a report.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("boundary is not a non-increasing graph: {0}")]
    NonMonotoneBoundary(String),
    #[error("boundary arcs do not connect: {0}")]
    DisconnectedCurve(String),
    #[error("point ({0}, {1}) lies outside the domain")]
    OutsideDomain(f64, f64),
    #[error("point ({0}, {1}) is not a grid node")]
    NotGridNode(f64, f64),
    #[error("arc-length parameter {0} is a vertex; the normal is undefined there")]
    AtVertex(f64),
    #[error("point ({0}, {1}) is not on the boundary curve")]
    NotOnBoundary(f64, f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("Picard iteration did not converge in {max_iter} iterations (last residual {last_residual:e})")]
    NoConvergence { max_iter: usize, last_residual: f64 },
    #[error("Picard iteration is not contracting: measured ratio {ratio:.4} in the weighted norm (rho = {rho})")]
    ContractionViolated { ratio: f64, rho: f64 },
    #[error("non-finite value encountered in {0}")]
    NaNEncountered(String),
    #[error("target ({0}, {1}) lies on a vertex line; the quadrature representation needs a regular point")]
    TargetOnVertexLine(f64, f64),
    #[error("missing vertex limit at vertex {0}")]
    MissingVertexLimit(usize),
    #[error("point ({0}, {1}) is on a vertex line that does not belong to the requested vertex")]
    OnForeignVertexLine(f64, f64),
    #[error("zone order violated: region {region} needs region {needs} which is not solved yet")]
    ZoneOrderViolation { region: usize, needs: usize },
    #[error("needle disk around ({0}, {1}) leaves the regular part of the domain")]
    DiskOutsideRegularPart(f64, f64),
    #[error("line search failed after {0} halvings")]
    LineSearchFailed(usize),
    #[error("characteristic compatibility violated: residual {0:e}")]
    CompatibilityViolated(f64),
    #[error("water depth is not positive at r = {0}")]
    DepthNonPositive(f64),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("{context}: {source}")]
    InRegion { context: String, source: Box<Error> },
}

impl Error {
    pub fn in_region(self, context: impl Into<String>) -> Error {
        Error::InRegion { context: context.into(), source: Box::new(self) }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
