use thiserror::Error;

/// Failures of the rigid-body model.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid biped configuration: {0}")]
    Config(String),
    #[error("mass matrix is not positive definite")]
    SingularMassMatrix,
    #[error("contact constraint is singular")]
    SingularContact,
    #[error("kinematics: {0}")]
    Kinematics(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("query ({velocity}, {position}) lies outside the grid [{v_lo}, {v_hi}] x [{p_lo}, {p_hi}]")]
    OutOfRange {
        velocity: f64,
        position: f64,
        v_lo: f64,
        v_hi: f64,
        p_lo: f64,
        p_hi: f64,
    },
    #[error("node ({velocity}, {position}): {source}")]
    Node {
        velocity: f64,
        position: f64,
        #[source]
        source: Box<Error>,
    },
    #[error("training: {0}")]
    Training(String),
    #[error("fit: {0}")]
    Fit(String),
    #[error("numerical: {0}")]
    Numerical(String),
    #[error("format: {0}")]
    Format(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
