//! Simulation and hierarchical control of an ensemble of steam generators.
//!
//! The numeric core is generic over [`Scalar`] (f32 or f64); the aliases at
//! the bottom of this file fix it to f64.

pub mod boiler;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod hl;
pub mod linalg;
pub mod lowlevel;
pub mod mpc;
pub mod qp;
pub mod scalar;
pub mod scenario;
pub mod steam;
pub mod svg;
pub mod sysid;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use scenario::{RunReport, ScenarioConfig};

pub type SaturationPoint = steam::SaturationPoint<f64>;
pub type BoilerParams = boiler::BoilerParams<f64>;
pub type BoilerState = boiler::BoilerState<f64>;
pub type BoilerInputs = boiler::BoilerInputs<f64>;
pub type PiConfig = lowlevel::PiConfig<f64>;
pub type LoopState = lowlevel::LoopState<f64>;
pub type ClosedLoop = lowlevel::ClosedLoop<f64>;
pub type ArxModel = sysid::ArxModel<f64>;
pub type StateSpaceModel = sysid::StateSpaceModel<f64>;
pub type ReferenceModel = ensemble::ReferenceModel<f64>;
pub type EnsembleModel = ensemble::EnsembleModel<f64>;
pub type DisturbanceBound = ensemble::DisturbanceBound<f64>;
pub type HlConfig = hl::HlConfig<f64>;
pub type ShareSolution = hl::ShareSolution<f64>;
pub type StaticMap = hl::StaticMap<f64>;
pub type MpcConfig = mpc::MpcConfig<f64>;
pub type VelocityModel = mpc::VelocityModel<f64>;
pub type TightenedSets = mpc::TightenedSets<f64>;
pub type MpcSolution = mpc::MpcSolution<f64>;
