use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("corpus line {line}: {reason}")]
    Corpus { line: usize, reason: String },

    #[error("unknown intent name {name:?}; valid names: informative, question, denouncing, humor, positive")]
    UnknownIntent { name: String },

    #[error("unknown target name {name:?}; valid names: Muslims, Migrants, Women, LGBT+, Jews, POC, Disabled, Other")]
    UnknownTarget { name: String },

    #[error("unknown split name {name:?}; valid names: train, dev, test")]
    UnknownSplit { name: String },

    #[error("legacy intent {name:?} from {scheme} has no mapping")]
    UnmappableIntent { name: String, scheme: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("training error: {0}")]
    Train(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("output {path} already exists; pass --force to overwrite")]
    OutputExists { path: String },
}
