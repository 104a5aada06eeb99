use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("pressure {p} bar outside supported range [{lo}, {hi}] bar")]
    PressureRange { p: f64, lo: f64, hi: f64 },
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("model validity: phi = {phi} at p = {p} bar, V_w = {v_w} m3")]
    NonPositivePhi { phi: f64, p: f64, v_w: f64 },
    #[error("integration left the envelope: p = {p} bar, V_w = {v_w} m3")]
    Integration { p: f64, v_w: f64 },
    #[error("identifiability: {0}")]
    Identifiability(String),
    #[error("unstable model: spectral radius {0}")]
    Unstable(f64),
    #[error("assumption violated: {0}")]
    Assumption(String),
    #[error("degenerate template: 1 + sum(f) = 0")]
    DegenerateTemplate,
    #[error("contract: {0}")]
    Contract(String),
    #[error("model quality: {0}")]
    ModelQuality(String),
    #[error("share problem infeasible for every activation pattern:\n{0}")]
    HlInfeasible(String),
    #[error("gain design: {0}")]
    GainDesign(String),
    #[error("over-conservative tightening: {0}")]
    OverConservative(String),
    #[error("MPC problem infeasible; working set {active:?}")]
    MpcInfeasible { active: Vec<usize> },
    #[error("QP: {0}")]
    Qp(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("boiler {}: {inner}", .index + 1)]
    Boiler { index: usize, inner: Box<Error> },
    #[error("t = {t} s: {inner}")]
    At { t: f64, inner: Box<Error> },
    #[error("io: {0}")]
    Io(String),
}

impl Error {
    pub fn boiler(index: usize, e: Error) -> Error {
        Error::Boiler {
            index,
            inner: Box::new(e),
        }
    }

    pub fn at(t: f64, e: Error) -> Error {
        Error::At {
            t,
            inner: Box::new(e),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
