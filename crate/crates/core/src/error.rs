use std::fmt;
use std::io;
use std::path::PathBuf;

/// Errors surfaced by the library. Each message names the precondition that
/// failed so CLI output can be matched against it.
#[derive(Debug)]
pub enum Error {
    /// File magic did not match the expected value.
    BadMagic {
        path: PathBuf,
        expected: String,
        found: String,
    },
    /// Image count and label count disagree.
    CountMismatch { images: usize, labels: usize },
    /// File ended before the declared payload was read.
    TruncatedFile { path: PathBuf },
    /// Transform kind is not applicable to the input channel count.
    IncompatibleChannels { kind: &'static str, channels: usize },
    /// Too few samples to split into two non-empty halves.
    EmptySplit { n: usize },
    /// Requested batch size exceeds the number of samples.
    BatchTooLarge { batch_size: usize, n: usize },
    /// Tensor shapes do not satisfy the operation's contract.
    ShapeMismatch { context: String },
    /// A probability row does not sum to 1 within tolerance.
    NonDistribution { row: usize, sum: f64 },
    /// Checkpoint version not understood by this build.
    VersionUnsupported { found: u32 },
    /// Checkpoint lacks a tensor the architecture requires.
    MissingTensor { name: String },
    /// Checkpoint carries a tensor the architecture does not know.
    UnknownTensor { name: String },
    /// Source and target classifier heads differ in shape or value.
    HeadMismatch { context: String },
    /// Operation requires labels but the set has none.
    UnlabeledData,
    /// A model that must stay fixed changed during training.
    FrozenModelViolation { what: String },
    /// BN-statistics lists have different layer counts.
    LayerCountMismatch { expected: usize, found: usize },
    /// Class index outside [0, num_classes).
    IndexOutOfRange { index: usize, len: usize },
    /// Batch has no samples.
    EmptyBatch,
    /// Image rows passed to the grid exporter disagree in count or size.
    SizeMismatch { context: String },
    /// Config file could not be parsed or validated.
    Config { message: String },
    /// Manifest line or transform spec could not be parsed.
    InvalidManifest { message: String },
    Io { path: PathBuf, source: io::Error },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::BadMagic {
                path,
                expected,
                found,
            } => write!(
                f,
                "bad magic in {}: expected {expected}, found {found}",
                path.display()
            ),
            Error::CountMismatch { images, labels } => {
                write!(f, "count mismatch: {images} images vs {labels} labels")
            }
            Error::TruncatedFile { path } => write!(f, "truncated file: {}", path.display()),
            Error::IncompatibleChannels { kind, channels } => write!(
                f,
                "transform `{kind}` is incompatible with {channels}-channel images"
            ),
            Error::EmptySplit { n } => {
                write!(f, "cannot split {n} samples into two non-empty halves")
            }
            Error::BatchTooLarge { batch_size, n } => {
                write!(f, "batch size {batch_size} exceeds sample count {n}")
            }
            Error::ShapeMismatch { context } => write!(f, "shape mismatch: {context}"),
            Error::NonDistribution { row, sum } => {
                write!(f, "row {row} is not a distribution: sums to {sum}")
            }
            Error::VersionUnsupported { found } => {
                write!(f, "unsupported checkpoint version {found}")
            }
            Error::MissingTensor { name } => write!(f, "checkpoint missing tensor `{name}`"),
            Error::UnknownTensor { name } => write!(f, "checkpoint has unknown tensor `{name}`"),
            Error::HeadMismatch { context } => write!(f, "classifier head mismatch: {context}"),
            Error::UnlabeledData => write!(f, "operation requires labels but the set has none"),
            Error::FrozenModelViolation { what } => {
                write!(f, "frozen model violation: {what} changed during training")
            }
            Error::LayerCountMismatch { expected, found } => {
                write!(f, "BN layer count mismatch: expected {expected}, found {found}")
            }
            Error::IndexOutOfRange { index, len } => {
                write!(f, "class index {index} out of range for {len} classes")
            }
            Error::EmptyBatch => write!(f, "batch has no samples"),
            Error::SizeMismatch { context } => write!(f, "size mismatch: {context}"),
            Error::Config { message } => write!(f, "config error: {message}"),
            Error::InvalidManifest { message } => write!(f, "manifest error: {message}"),
            Error::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(context: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
