use std::path::PathBuf;

/// Errors raised by the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    File { path: PathBuf, msg: String },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    /// Wraps an error raised while processing a specific denoising step.
    #[error("t={t} frame={frame}{}: {source}", layer_suffix(.layer))]
    Step {
        t: usize,
        frame: usize,
        layer: Option<usize>,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

fn layer_suffix(layer: &Option<usize>) -> String {
    layer.map(|l| format!(" layer={l}")).unwrap_or_default()
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attaches step context unless the error already carries it.
    pub fn at_step(self, t: usize, frame: usize, layer: Option<usize>) -> Self {
        match self {
            e @ Error::Step { .. } => e,
            e => Error::Step {
                t,
                frame,
                layer,
                source: Box::new(e),
            },
        }
    }
}
