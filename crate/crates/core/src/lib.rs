pub mod agent;
pub mod config;
pub mod diagnostics;
pub mod envs;
pub mod error;
pub mod fsq;
pub mod nn;
pub mod replay;
pub mod repr;
pub mod scalar;
pub mod td3;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type Representation32 = repr::Representation<f32>;
pub type Representation64 = repr::Representation<f64>;
pub type Td3_32 = td3::Td3<f32>;
pub type Td3_64 = td3::Td3<f64>;
pub type Agent32 = agent::Agent<f32>;
pub type Agent64 = agent::Agent<f64>;
pub type ReplayBuffer32 = replay::ReplayBuffer<f32>;
pub type ReplayBuffer64 = replay::ReplayBuffer<f64>;
pub type RunState32 = train::RunState<f32>;
pub type RunState64 = train::RunState<f64>;
