use std::path::PathBuf;

/// Error type shared by every module in the crate.
///
/// Variants are grouped so a front-end can map them onto coarse exit
/// classes: configuration problems, data/input problems, and numeric
/// failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing directory: {0}")]
    MissingDirectory(PathBuf),

    #[error("unparseable filename for layout {layout}: {name}")]
    BadFilename { layout: String, name: String },

    #[error("mask size mismatch for {id}: image {image_w}x{image_h}, mask {mask_w}x{mask_h}")]
    MaskSizeMismatch {
        id: String,
        image_w: usize,
        image_h: usize,
        mask_w: usize,
        mask_h: usize,
    },

    #[error("bad color-name table: {0}")]
    BadColorTable(String),

    #[error("bad split: {0}")]
    BadSplit(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("no positive pairs: need at least two cameras and two images per identity")]
    NoPositivePairs,

    #[error("no negative pairs: need at least two identities")]
    NoNegativePairs,

    #[error("matrix is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),

    #[error("matrix inversion failed{}", if *.regularized { " even after regularization" } else { "" })]
    InversionFailure { regularized: bool },

    #[error("eigendecomposition failed: {0}")]
    EigenFailure(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("negative element {value} at index {index} in a nonnegative vector")]
    NegativeElement { index: usize, value: f64 },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("k-means needs at least k points: n = {n}, k = {k}")]
    TooFewPoints { n: usize, k: usize },

    #[error("no discriminative null direction exists (n - c >= effective rank of the data)")]
    NoNullSpace,

    #[error("need at least two classes, got {0}")]
    SingleClass(usize),

    #[error("empty gallery after junk filtering for query {0}")]
    EmptyGallery(String),

    #[error("query {0} has no possible match in the gallery")]
    NoPossibleMatch(String),

    #[error("train/test leakage: identity {0} appears on both sides of the split")]
    Leakage(String),

    #[error("bad file format in {path}: {reason}")]
    BadFormat { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse classification used by front-ends to pick an exit code.
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            Config(_) => ErrorClass::Config,
            MissingDirectory(_) | BadFilename { .. } | MaskSizeMismatch { .. }
            | BadColorTable(_) | BadSplit(_) | BadFormat { .. } | Io { .. } | Image { .. }
            | Leakage(_) | EmptyGallery(_) | NoPossibleMatch(_) => ErrorClass::Data,
            DimensionMismatch { .. } | NoPositivePairs | NoNegativePairs | NotSymmetric(_)
            | InversionFailure { .. } | EigenFailure(_) | NonFinite(_) | NegativeElement { .. }
            | Invariant(_) | TooFewPoints { .. } | NoNullSpace | SingleClass(_) => {
                ErrorClass::Numeric
            }
        }
    }
}

/// Coarse error class for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

pub type Result<T> = std::result::Result<T, Error>;
