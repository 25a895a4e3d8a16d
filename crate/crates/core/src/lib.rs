//! Toy diffusion-transformer inference with feature caching, gradient
//! extrapolation of cached features, and a profiled per-step policy that
//! decides when extrapolation is worth it.

// Comparisons are written as `!(a > b)` on purpose: ties and NaN must land
// on the conservative side.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cache;
pub mod dit;
pub mod error;
pub mod flops;
pub mod harness;
pub mod numerics;
pub mod policy;
pub mod sampler;
pub mod scripted;
pub mod stats;
mod table;

pub use cache::{
    Action, AppliedStrategy, CacheEngine, CacheSchedule, CacheStore, GcConfig, QueueMode, StepLog,
    Strategy,
};
pub use dit::{
    init_model, ConditionInfo, Denoiser, Interceptor, ModelConfig, SublayerId, SublayerKind, ToyDit,
};
pub use error::{Error, Result};
pub use flops::{flops_count, flops_from_log, FlopModel, FlopTotals};
pub use numerics::{l1_total, Rng, Tensor};
pub use policy::{negative_impact, GodConfig, GodPolicy, PositionSense, StrategyPlan};
pub use sampler::{sample, sample_with, SamplerConfig, SamplerKind, Trajectory};
pub use scripted::{exact_cache_errors, Family, ScriptSpec, ScriptedModel};
pub use stats::{average_features, count_inverse, is_inverse_gradient, profile, StatsTable};
