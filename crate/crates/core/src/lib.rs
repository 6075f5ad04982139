//! Hybrid-synchrony BFT consensus: a rotating-leader protocol where small
//! messages are assumed synchronous and large ones only eventually timely.
//!
//! The crate holds the replica state machine, a seeded discrete-event
//! network simulator, an offline trace checker and a latency model for
//! deriving the two delay bounds from measured samples.

pub mod app;
pub mod checker;
pub mod codec;
pub mod crypto;
pub mod latmodel;
pub mod netsim;
pub mod replica;
pub mod scalar;
pub mod scenario;
pub mod trace;
pub mod types;

pub use checker::{CheckKind, CheckReport, Metrics, Verdict};
pub use crypto::{Committee, KeyPair, SchemeKind};
pub use latmodel::{Bounds, DelaySampleSet, LatModelError};
pub use replica::{Action, ProtocolParams, Replica};
pub use scalar::DelayScalar;
pub use scenario::ScenarioConfig;
pub use trace::{Trace, TraceEvent, TraceRecord};
pub use types::{Block, BlockId, Certificate, Epoch, Message, ReplicaId};

/// Millisecond delay samples in double precision.
pub type SampleSet = DelaySampleSet<f64>;
pub type SampleSet32 = DelaySampleSet<f32>;
