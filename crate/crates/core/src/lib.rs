//! Simulation of Mixture-of-Experts inference on noisy analog
//! compute-in-memory hardware, with a training-free calibration method.

pub mod error;
pub mod io;
pub mod math;
pub mod moe;
pub mod noise;
pub mod profiler;
pub mod romer;

pub use error::{Error, Result};
pub use math::{Matrix, RandomStream};
pub use moe::{
    model_forward, Activation, Deployment, ExpertFfn, GateMode, LayerRecord, MoeLayer, MoeModel, RouterSpec,
    RoutingTrace, TokenTrace,
};
pub use noise::{AdcSpec, DeviceNoiseSpec, NoiseConfig, NoiseMode, PathNoise, TemperatureProfile};
pub use profiler::{accumulate_activation, balance_report, ActivationMap, LoadBalanceReport};
pub use romer::{
    apply_replacement, build_replacement_plan, BottomMode, CalibrationConfig, LayerPlan, ReplacementPlan,
    RomerDeployment,
};
