//! Model layer of the lexicographic traffic-control engine.
//!
//! * [`network`]: junctions, road links, signal phases and the partition of a
//!   network into agent subnetworks.
//! * [`dynamics`]: store-and-forward prediction, the macroscopic plant used in
//!   closed loop, constraint checking and performance indexes.
//! * [`problem`]: per-agent matrix blocks of the perimeter-control LP, the
//!   lifted signal-control QP and the weighted single-stage QP.
//! * [`qp`]: the solver-facing block format shared by the distributed solver
//!   and the centralized oracle.
//! * [`samples`]: small reference networks.

pub mod dynamics;
pub mod network;
pub mod problem;
pub mod qp;
pub mod samples;

pub use dynamics::{ControlInput, ExogenousForecast, ExogenousStep, TrafficState};
pub use network::{AgentId, Junction, JunctionKind, LinkId, Network, Partition, Phase, PhaseKey, RoadLink};
pub use qp::AgentQp;
