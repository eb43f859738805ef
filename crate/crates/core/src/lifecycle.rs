// SPDX-License-Identifier: Apache-2.0

//! Service instance lifecycle and the per-worker node engine that
//! admits, runs, and reclaims instances.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CapacityVector, InstanceId, ModelError, ServiceId, TaskRequirements, WorkerId};
use crate::overlay::{OverlayAddr, WorkerSubnet};

#[derive(Debug, Error, PartialEq)]
pub enum LifecycleError {
    #[error("transition {event:?} is not valid in state {from:?}")]
    InvalidTransition {
        from: InstanceState,
        event: LifecycleEvent,
    },
    #[error("worker rejected the deployment: insufficient free capacity")]
    WorkerRejected,
    #[error("unknown instance {0:?}")]
    UnknownInstance(InstanceId),
    #[error("unsupported workload kind {0:?}")]
    UnknownWorkload(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceState {
    Requested,
    Scheduled,
    Running,
    Terminated,
    Failed,
}

impl InstanceState {
    /// Absorbing states admit no further events.
    pub fn is_final(&self) -> bool {
        matches!(self, InstanceState::Terminated | InstanceState::Failed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LifecycleEvent {
    Placed,
    Started,
    Stopped,
    Errored,
}

/// The full transition relation; everything not listed is invalid.
pub fn transition(
    from: InstanceState,
    event: LifecycleEvent,
) -> Result<InstanceState, LifecycleError> {
    use InstanceState::*;
    use LifecycleEvent::*;
    match (from, event) {
        (Requested, Placed) => Ok(Scheduled),
        (Requested, Errored) => Ok(Failed),
        (Scheduled, Started) => Ok(Running),
        (Scheduled, Errored) => Ok(Failed),
        (Running, Stopped) => Ok(Terminated),
        (Running, Errored) => Ok(Failed),
        _ => Err(LifecycleError::InvalidTransition { from, event }),
    }
}

/// Synthetic workloads the mock runtime understands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockWorkload {
    /// Holds resources and does nothing until stopped.
    Sleep,
    /// Answers every overlay datagram with its payload mirrored back.
    Echo,
    /// Consumes its full cpu reservation; used to exercise usage reports.
    CpuBurn,
}

impl MockWorkload {
    pub fn parse(kind: &str) -> Result<Self, LifecycleError> {
        match kind {
            "sleep" => Ok(MockWorkload::Sleep),
            "echo" => Ok(MockWorkload::Echo),
            "cpu_burn" => Ok(MockWorkload::CpuBurn),
            other => Err(LifecycleError::UnknownWorkload(other.to_owned())),
        }
    }
}

/// One deployed copy of a microservice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceInstance {
    pub instance_id: InstanceId,
    pub service_id: ServiceId,
    pub microservice_id: u32,
    pub worker_id: WorkerId,
    pub state: InstanceState,
    pub instance_ip: OverlayAddr,
    pub reservation: CapacityVector,
    pub workload: MockWorkload,
    /// Consecutive latency-constraint violations; reset when the
    /// instance (re)starts healthy.
    pub violation_streak: u32,
    pub state_changed_at: u64,
}

impl ServiceInstance {
    pub fn apply(&mut self, event: LifecycleEvent, now_ms: u64) -> Result<(), LifecycleError> {
        self.state = transition(self.state, event)?;
        if event == LifecycleEvent::Started {
            self.violation_streak = 0;
        }
        self.state_changed_at = now_ms;
        Ok(())
    }
}

/// Violation budget before migration: an instance with rigidness r moves
/// after ceil((1 - r) * 10) consecutive violations, and never sooner
/// than one.
pub fn violation_budget(rigidness: f64) -> u32 {
    (((1.0 - rigidness.clamp(0.0, 1.0)) * 10.0).ceil() as u32).max(1)
}

/// Per-worker admission and runtime bookkeeping. The engine holds the
/// authoritative free-capacity view: a deploy that no longer fits is
/// rejected here even if the cluster scheduler believed otherwise.
pub struct NodeEngine {
    pub worker_id: WorkerId,
    pub capacity: CapacityVector,
    pub subnet: WorkerSubnet,
    virtualizations: Vec<String>,
    instances: BTreeMap<InstanceId, ServiceInstance>,
    next_instance_seq: u16,
}

impl NodeEngine {
    pub fn new(
        worker_id: WorkerId,
        capacity: CapacityVector,
        subnet: WorkerSubnet,
        virtualizations: Vec<String>,
    ) -> Self {
        Self {
            worker_id,
            capacity,
            subnet,
            virtualizations,
            instances: BTreeMap::new(),
            next_instance_seq: 0,
        }
    }

    /// Sum of reservations held by non-final instances.
    pub fn used(&self) -> CapacityVector {
        let mut used = CapacityVector::zero();
        for inst in self.instances.values() {
            if !inst.state.is_final() {
                used = used.add(&inst.reservation);
            }
        }
        used
    }

    pub fn free(&self) -> CapacityVector {
        self.capacity
            .checked_sub(&self.used())
            .unwrap_or_else(|_| CapacityVector::zero())
    }

    /// Admit and start an instance. The returned instance is Running;
    /// callers that track remote state observe the intermediate
    /// Scheduled hop via the lifecycle events it reports.
    pub fn deploy(
        &mut self,
        instance_id: InstanceId,
        service_id: ServiceId,
        task: &TaskRequirements,
        workload: MockWorkload,
        now_ms: u64,
    ) -> Result<&ServiceInstance, LifecycleError> {
        let free = self.free();
        if free.cpu_cores < task.capacity.cpu_cores
            || free.memory_mb < task.capacity.memory_mb
            || !self.virtualizations.iter().any(|v| *v == task.virtualization)
        {
            return Err(LifecycleError::WorkerRejected);
        }
        let instance_ip = self
            .subnet
            .instance_addr(self.next_instance_seq & 0x0fff)
            .expect("index masked to instance space");
        self.next_instance_seq = self.next_instance_seq.wrapping_add(1);
        let mut inst = ServiceInstance {
            instance_id,
            service_id,
            microservice_id: task.microservice_id,
            worker_id: self.worker_id.clone(),
            state: InstanceState::Requested,
            instance_ip,
            reservation: task.capacity,
            workload,
            violation_streak: 0,
            state_changed_at: now_ms,
        };
        inst.apply(LifecycleEvent::Placed, now_ms)?;
        inst.apply(LifecycleEvent::Started, now_ms)?;
        self.instances.insert(instance_id, inst);
        Ok(&self.instances[&instance_id])
    }

    pub fn stop(&mut self, id: InstanceId, now_ms: u64) -> Result<(), LifecycleError> {
        let inst = self
            .instances
            .get_mut(&id)
            .ok_or(LifecycleError::UnknownInstance(id))?;
        inst.apply(LifecycleEvent::Stopped, now_ms)
    }

    pub fn fail(&mut self, id: InstanceId, now_ms: u64) -> Result<(), LifecycleError> {
        let inst = self
            .instances
            .get_mut(&id)
            .ok_or(LifecycleError::UnknownInstance(id))?;
        inst.apply(LifecycleEvent::Errored, now_ms)
    }

    /// Worker crash: every live instance fails, reservations are freed.
    pub fn fail_all(&mut self, now_ms: u64) -> Vec<InstanceId> {
        let mut failed = Vec::new();
        for inst in self.instances.values_mut() {
            if !inst.state.is_final() {
                inst.state = InstanceState::Failed;
                inst.state_changed_at = now_ms;
                failed.push(inst.instance_id);
            }
        }
        failed
    }

    /// Record one latency-constraint violation; returns the new streak.
    pub fn note_violation(&mut self, id: InstanceId) -> Result<u32, LifecycleError> {
        let inst = self
            .instances
            .get_mut(&id)
            .ok_or(LifecycleError::UnknownInstance(id))?;
        inst.violation_streak += 1;
        Ok(inst.violation_streak)
    }

    /// A healthy measurement breaks the streak.
    pub fn clear_violations(&mut self, id: InstanceId) -> Result<(), LifecycleError> {
        let inst = self
            .instances
            .get_mut(&id)
            .ok_or(LifecycleError::UnknownInstance(id))?;
        inst.violation_streak = 0;
        Ok(())
    }

    pub fn instance(&self, id: InstanceId) -> Option<&ServiceInstance> {
        self.instances.get(&id)
    }

    pub fn instances(&self) -> impl Iterator<Item = &ServiceInstance> {
        self.instances.values()
    }

    /// What the workloads actually consume right now, for telemetry.
    /// Sleep/echo only pin memory; cpu_burn uses its full cpu share.
    pub fn usage(&self) -> CapacityVector {
        let mut used = CapacityVector::zero();
        for inst in self.instances.values() {
            if inst.state != InstanceState::Running {
                continue;
            }
            let mut u = inst.reservation;
            if inst.workload != MockWorkload::CpuBurn {
                u.cpu_cores = 0.0;
            }
            used = used.add(&u);
        }
        used
    }
}
