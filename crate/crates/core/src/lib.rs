//! Expert-choice vs token-choice mixture-of-experts routing for masked
//! diffusion language models.
//!
//! - [`routing`]: TC/EC routing policies, gates, load and drop metrics.
//! - [`scheduler`]: mask-ratio-dependent capacity schedules `k(r)`.
//! - [`diffusion`]: a small masked diffusion transformer with MoE layers.
//! - [`analysis`]: convergence rates, FLOPs and throughput accounting.
//! - [`sim`]: an analytic expert-parallel straggler simulator.

pub mod analysis;
pub mod diffusion;
pub mod error;
pub mod routing;
pub mod scheduler;
pub mod sim;
pub mod trace;

pub use error::{Error, Result};
pub use routing::{
    route_ec, route_tc, BalanceMode, BiasState, CapacityMode, EcConfig, LoadStats, Policy,
    RoutingAssignment, ScoreMatrix, TcConfig,
};
pub use scheduler::{CapacitySchedule, SchedulerKind};
pub use trace::{LossRecord, LossTrace};

/// Version of the on-disk formats (checkpoints, traces, manifests).
pub const FORMAT_VERSION: u32 = 1;
