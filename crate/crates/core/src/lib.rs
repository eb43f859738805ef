// SPDX-License-Identifier: Apache-2.0

//! Hierarchical edge orchestration: a root orchestrator delegates
//! scheduling to clusters, clusters place microservices on workers, and
//! a semantic-addressing overlay wires instances together. Everything
//! runs either against live sockets or inside a deterministic
//! simulation harness.

pub mod control;
pub mod coords;
pub mod lifecycle;
pub mod model;
pub mod overlay;
pub mod resource;
pub mod scheduler;
pub mod sim;
pub mod sla;
pub mod system;

pub use model::{CapacityVector, ClusterId, InstanceId, ServiceId, WorkerId};
