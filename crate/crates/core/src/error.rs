use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline stage names used to tag errors raised inside a frame prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Features,
    Network,
    Compose,
    SvdReplace,
    Poisson,
    Refine,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Features => "features",
            Stage::Network => "network",
            Stage::Compose => "compose",
            Stage::SvdReplace => "svd_replace",
            Stage::Poisson => "poisson",
            Stage::Refine => "refine",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("face {face} references vertex {vertex}, but the mesh has {count} vertices")]
    InvalidIndex {
        face: usize,
        vertex: usize,
        count: usize,
    },
    #[error("degenerate face {face} (area {area:e})")]
    DegenerateFace { face: usize, area: f64 },
    #[error("inconsistent winding between faces {a} and {b}")]
    InconsistentWinding { a: usize, b: usize },
    #[error("non-manifold edge ({0}, {1})")]
    NonManifoldEdge(usize, usize),
    #[error("vertex {0} is not referenced by any face")]
    IsolatedVertex(usize),
    #[error("singular deformation gradient at face {face} (det {det:e})")]
    SingularGradient { face: usize, det: f64 },
    #[error("factorization failed: {0}")]
    Factorization(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite activation in layer {0}")]
    NonFiniteActivation(String),
    #[error("backward called without a cached forward pass")]
    MissingCache,
    #[error("simulation became unstable at frame {frame} (speed {speed:.3e} m/s)")]
    Unstable { frame: usize, speed: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),
    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub fn at_stage(self, stage: Stage) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Machine-parsable category, used for CLI exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidIndex { .. }
            | Error::DegenerateFace { .. }
            | Error::InconsistentWinding { .. }
            | Error::NonManifoldEdge(..)
            | Error::IsolatedVertex(_) => "mesh",
            Error::SingularGradient { .. }
            | Error::Factorization(_)
            | Error::NonFinite(_)
            | Error::NonFiniteActivation(_)
            | Error::NonFiniteLoss { .. }
            | Error::Unstable { .. } => "numerical",
            Error::Dimension(_) | Error::InvalidArgument(_) | Error::MissingCache => "usage",
            Error::Config(_) | Error::TomlDe(_) | Error::TomlSer(_) => "config",
            Error::Stage { source, .. } => source.category(),
            Error::Format(_) | Error::Json(_) => "format",
            Error::Io(_) => "io",
        }
    }
}
