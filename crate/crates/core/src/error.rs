use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation angle {0} is too close to pi for a unique logarithm")]
    LogNearPi(f64),
    #[error("interpolation fraction {0} outside [0, 1]")]
    FractionOutOfRange(f64),
    #[error("invalid camera intrinsics or image size")]
    InvalidCamera,
}

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("no gaussians carry label {0}")]
    EmptySubset(u8),
    #[error("bad magic bytes {0:?}, expected \"GAF1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported field file version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated field file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("trailing bytes after {0} records")]
    TrailingBytes(usize),
    #[error("fraction {0} outside [0, 1]")]
    FractionOutOfRange(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImageError {
    #[error("image dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("malformed PPM: {0}")]
    MalformedPpm(String),
}

#[derive(Debug, Error)]
pub enum FitError {
    #[error("non-finite gradient for gaussian {0}")]
    NonFiniteGradient(usize),
    #[error("optimization diverged at iteration {iteration} (loss {loss})")]
    Diverged { iteration: usize, loss: f64, history: Vec<crate::fitter::LossRecord> },
    #[error("invalid fit configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid supervision: {0}")]
    InvalidSupervision(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ActionError {
    #[error("need at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("point clouds differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("degenerate point configuration (singular values {0:?})")]
    Degenerate([f64; 3]),
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("no gaussians carry label {0}")]
    EmptySubset(u8),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefineError {
    #[error("denoiser returned {got} steps, expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("noise level {level} outside schedule of length {len}")]
    LevelOutOfRange { level: usize, len: usize },
    #[error("input lengths differ")]
    LengthMismatch,
    #[error("ridge solve failed: {0}")]
    Solve(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("bodies {0} and {1} overlap")]
    Overlap(String, String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Action(#[from] ActionError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Fit(#[from] FitError),
}

impl GeometryError {
    /// True for failures caused by the numbers involved rather than malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, GeometryError::LogNearPi(_))
    }
}

impl FitError {
    pub fn is_numerical(&self) -> bool {
        matches!(self, FitError::NonFiniteGradient(_) | FitError::Diverged { .. })
    }
}

impl ActionError {
    pub fn is_numerical(&self) -> bool {
        match self {
            ActionError::Degenerate(_) => true,
            ActionError::Geometry(e) => e.is_numerical(),
            _ => false,
        }
    }
}

impl RefineError {
    pub fn is_numerical(&self) -> bool {
        match self {
            RefineError::Solve(_) => true,
            RefineError::Geometry(e) => e.is_numerical(),
            _ => false,
        }
    }
}

impl HarnessError {
    pub fn is_numerical(&self) -> bool {
        match self {
            HarnessError::InvalidSpec(_) | HarnessError::Overlap(_, _) => false,
            HarnessError::Geometry(e) => e.is_numerical(),
            HarnessError::Action(e) => e.is_numerical(),
            HarnessError::Refine(e) => e.is_numerical(),
            HarnessError::Fit(e) => e.is_numerical(),
        }
    }
}
