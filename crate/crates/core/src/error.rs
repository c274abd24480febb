use thiserror::Error;

use crate::code::NodeCode;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Error {
    #[error("node code {0} is longer than the key width")]
    CodeTooLong(NodeCode),
    #[error("invalid node code {0:?}")]
    InvalidCode(String),
    #[error("every digit is excluded")]
    NoFreeDigit,
    #[error("ciphertext failed integrity check")]
    Integrity,
    #[error("malformed payload: {0}")]
    Malformed(&'static str),
    #[error("member {0} is already in the tree")]
    DuplicateMember(String),
    #[error("member {0} is not in the tree")]
    UnknownMember(String),
    #[error("member {0} is already registered")]
    DuplicateRegistration(String),
    #[error("no cover payload was decryptable by {0}")]
    NoCoverKey(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("scenario error: {0}")]
    Scenario(String),
}

pub type Result<T> = std::result::Result<T, Error>;
