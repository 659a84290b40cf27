use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("layer `{layer}`: {source}")]
    Layer {
        layer: String,
        #[source]
        source: chanprune_tensor::Error,
    },
    #[error(transparent)]
    Tensor(#[from] chanprune_tensor::Error),
    #[error("flag {flag}: mask length {actual} does not match flag length {expected}")]
    MaskLength {
        flag: usize,
        expected: usize,
        actual: usize,
    },
    #[error("topology violation in block `{block}`: {detail}")]
    Topology { block: String, detail: String },
    #[error("target CF {target} is unreachable; achievable range is [{min}, {max}]")]
    Infeasible { target: f64, min: f64, max: f64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("dataset format: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by non-finite values during computation.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Tensor(chanprune_tensor::Error::NonFinite(_))
                | Error::Layer {
                    source: chanprune_tensor::Error::NonFinite(_),
                    ..
                }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
