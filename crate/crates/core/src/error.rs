use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Padded input is smaller than the filter or pooling window.
    #[error("input too small: {0}")]
    InputTooSmall(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("label out of range: {0}")]
    LabelOutOfRange(String),

    #[error("input outside the block's domain: {0}")]
    Domain(String),

    #[error("graph error: {0}")]
    Graph(String),

    /// A block failed while evaluating the named layer.
    #[error("layer `{layer}`: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn in_layer(self, layer: &str) -> Error {
        match self {
            e @ Error::Layer { .. } => e,
            e => Error::Layer {
                layer: layer.to_string(),
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, unwrapping layer context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Layer { source, .. } => source.root(),
            e => e,
        }
    }
}
