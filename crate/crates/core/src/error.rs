use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid arguments, shapes or configuration supplied by the caller.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: format error at byte {position}: {message}", path.display())]
    Format { path: PathBuf, position: u64, message: String },

    #[error("numerical error: {0}")]
    Numerical(String),

    /// The expert moved less than the matching tolerance between the sampled checkpoints.
    #[error("degenerate expert trajectory: |phi*_{start} - phi*_{end}|^2 = {distance:e}")]
    DegenerateExpert { start: usize, end: usize, distance: f64 },

    #[error("training diverged: {0}")]
    Diverged(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
