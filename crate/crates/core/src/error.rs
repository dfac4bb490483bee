use std::path::PathBuf;

use thiserror::Error;

use crate::semiring::SemiringKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("semiring kind mismatch: {left} vs {right}")]
    KindMismatch { left: SemiringKind, right: SemiringKind },

    #[error("tuple is missing lift attribute `{0}`")]
    MissingLiftAttribute(String),

    #[error("lift attribute `{attr}` holds non-numeric value `{value}`")]
    NonNumericLift { attr: String, value: String },

    #[error("normal equations are singular even after ridge {ridge}")]
    Singular { ridge: f64 },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: u64, message: String },

    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: PathBuf, column: String },

    #[error("{path}:{line}: value `{value}` is outside the declared domain of `{attr}`")]
    DomainViolation { path: PathBuf, line: u64, attr: String, value: String },

    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),

    #[error("type mismatch on `{attr}`: {detail}")]
    TypeMismatch { attr: String, detail: String },

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("join graph is cyclic (remaining relations: {remaining:?}); pre-join each cycle into one relation before loading")]
    CyclicGraph { remaining: Vec<String> },

    #[error("join graph is disconnected: {0}")]
    DisconnectedGraph(String),

    #[error("invalid junction hypertree: {0}")]
    InvalidJoinTree(String),

    #[error("unknown relation `{0}`")]
    UnknownRelation(String),

    #[error("relation `{relation}` has no version `{version}`")]
    UnknownVersion { relation: String, version: String },

    #[error("unknown bag {0}")]
    UnknownBag(usize),

    #[error("predicate `{0}` references attributes that no single bag covers")]
    UnsupportedPredicate(String),

    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),

    #[error("message {from}->{to} is not available")]
    MissingMessage { from: usize, to: usize },

    #[error("oracle join exceeds the row budget ({rows} > {budget})")]
    OracleTooLarge { rows: usize, budget: usize },

    #[error("materialization exceeds the row budget ({rows} > {budget})")]
    BudgetExceeded { rows: usize, budget: usize },

    #[error("invalid query: {0}")]
    InvalidQuery(String),

    #[error("semiring not expressible in SQL: {0}")]
    UnsupportedSemiring(String),

    #[error("unknown {kind} `{id}`")]
    NotFound { kind: &'static str, id: String },

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::KindMismatch { .. } => "kind_mismatch",
            Error::MissingLiftAttribute(_) => "missing_lift_attribute",
            Error::NonNumericLift { .. } => "non_numeric_lift",
            Error::Singular { .. } => "singular_system",
            Error::Parse { .. } => "parse_error",
            Error::Io { .. } => "io_error",
            Error::MissingColumn { .. } => "missing_column",
            Error::DomainViolation { .. } => "domain_violation",
            Error::UnknownAttribute(_) => "unknown_attribute",
            Error::TypeMismatch { .. } => "type_mismatch",
            Error::InvalidSchema(_) => "invalid_schema",
            Error::CyclicGraph { .. } => "cyclic_graph",
            Error::DisconnectedGraph(_) => "disconnected_graph",
            Error::InvalidJoinTree(_) => "invalid_join_tree",
            Error::UnknownRelation(_) => "unknown_relation",
            Error::UnknownVersion { .. } => "unknown_version",
            Error::UnknownBag(_) => "unknown_bag",
            Error::UnsupportedPredicate(_) => "unsupported_predicate",
            Error::InvalidAnnotation(_) => "invalid_annotation",
            Error::MissingMessage { .. } => "missing_message",
            Error::OracleTooLarge { .. } => "oracle_too_large",
            Error::BudgetExceeded { .. } => "budget_exceeded",
            Error::InvalidQuery(_) => "invalid_query",
            Error::UnsupportedSemiring(_) => "unsupported_semiring",
            Error::NotFound { .. } => "not_found",
            Error::Conflict(_) => "conflict",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::Json(_) => "invalid_json",
        }
    }
}
