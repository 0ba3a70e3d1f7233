use numcore::NumError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("config field `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },
    #[error("non-finite {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}

pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        msg: msg.into(),
    }
}
