// SPDX-License-Identifier: Apache-2.0

//! Cluster-side resource management: worker registration, push-based
//! telemetry with delta suppression, staleness tracking, and the upward
//! aggregate a cluster reports to its parent.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coords::VivaldiCoordinate;
use crate::model::{
    aggregate, AggregateStats, CapacityVector, ClusterId, ClusterNode, Dimension, GeoPoint,
    InstanceId, ModelError, WorkerId, WorkerSnapshot,
};
use crate::overlay::{OverlayError, SubnetAllocator, WorkerSubnet};

#[derive(Debug, Error)]
pub enum ResourceError {
    #[error("id {0} already registered")]
    DuplicateId(WorkerId),
    #[error("declared capacity invalid: {0} must be positive")]
    CapacityInvalid(Dimension),
    #[error("unknown worker {0}")]
    UnknownWorker(WorkerId),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Overlay(#[from] OverlayError),
    #[error("telemetry config invalid: staleness_timeout_ms must be >= 3x update_interval_ms")]
    ConfigInvalid,
}

/// Per-worker telemetry cadence. The delta threshold suppresses updates
/// whose largest relative component change stays below it.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TelemetryConfig {
    pub update_interval_ms: u64,
    pub delta_threshold: f64,
    pub staleness_timeout_ms: u64,
}

impl TelemetryConfig {
    pub fn validate(&self) -> Result<(), ResourceError> {
        if self.staleness_timeout_ms < 3 * self.update_interval_ms
            || self.update_interval_ms == 0
            || !(0.0..=1.0).contains(&self.delta_threshold)
        {
            return Err(ResourceError::ConfigInvalid);
        }
        Ok(())
    }
}

impl Default for TelemetryConfig {
    fn default() -> Self {
        // Staleness = 3 missed intervals.
        Self {
            update_interval_ms: 1000,
            delta_threshold: 0.0,
            staleness_timeout_ms: 3000,
        }
    }
}

/// What a worker declares when it first contacts its orchestrator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationRecord {
    pub id: WorkerId,
    pub declared_capacity: CapacityVector,
    pub virtualizations: BTreeSet<String>,
    pub geo: GeoPoint,
    pub registered_at: u64,
}

/// Telemetry wire message, worker -> cluster orchestrator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryMsg {
    pub worker_id: WorkerId,
    pub used: CapacityVector,
    pub vivaldi: VivaldiCoordinate,
    pub seq: u64,
}

/// Aggregate push, cluster -> parent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatePush {
    pub cluster_id: ClusterId,
    pub stats: AggregateStats,
    pub seq: u64,
}

/// State a cluster orchestrator holds about its own tier: the cluster
/// node itself plus telemetry and subnet bookkeeping.
#[derive(Debug)]
pub struct ClusterManager {
    pub node: ClusterNode,
    pub config: TelemetryConfig,
    allocator: SubnetAllocator,
    pub subnets: BTreeMap<WorkerId, WorkerSubnet>,
    last_seq: BTreeMap<WorkerId, u64>,
    stale: BTreeSet<WorkerId>,
    pub child_aggregates: BTreeMap<ClusterId, AggregateStats>,
    /// Instances currently placed per worker, maintained by the deploy
    /// path so failures map back to the affected instance ids.
    pub instances_on: BTreeMap<WorkerId, BTreeSet<InstanceId>>,
}

impl ClusterManager {
    pub fn new(node: ClusterNode, cluster_prefix: u8, config: TelemetryConfig) -> Self {
        Self {
            node,
            config,
            allocator: SubnetAllocator::new(cluster_prefix),
            subnets: BTreeMap::new(),
            last_seq: BTreeMap::new(),
            stale: BTreeSet::new(),
            child_aggregates: BTreeMap::new(),
            instances_on: BTreeMap::new(),
        }
    }

    /// Register a worker and hand it a unique overlay subnet. A worker
    /// previously marked stale may re-register under the same id; it
    /// keeps its subnet and starts from a clean capacity ledger (its old
    /// instances are already failed).
    pub fn register_worker(
        &mut self,
        record: RegistrationRecord,
        vivaldi: VivaldiCoordinate,
    ) -> Result<WorkerSubnet, ResourceError> {
        if self.node.workers.contains_key(&record.id) && !self.stale.contains(&record.id) {
            return Err(ResourceError::DuplicateId(record.id));
        }
        if record.declared_capacity.cpu_cores <= 0.0 {
            return Err(ResourceError::CapacityInvalid(Dimension::Cpu));
        }
        if record.declared_capacity.memory_mb == 0 {
            return Err(ResourceError::CapacityInvalid(Dimension::Memory));
        }
        let subnet = match self.subnets.get(&record.id) {
            Some(existing) => *existing,
            None => {
                let s = self.allocator.allocate()?;
                self.subnets.insert(record.id.clone(), s);
                s
            }
        };
        self.stale.remove(&record.id);
        self.last_seq.remove(&record.id);
        self.node.workers.insert(
            record.id.clone(),
            WorkerSnapshot {
                worker_id: record.id,
                capacity: record.declared_capacity,
                used: CapacityVector::zero(),
                geo: record.geo,
                vivaldi,
                virtualizations: record.virtualizations,
                last_update: record.registered_at,
            },
        );
        Ok(subnet)
    }

    /// Apply one telemetry push. Returns whether the snapshot data was
    /// accepted; a suppressed update still refreshes liveness. Messages
    /// with stale sequence numbers are dropped whole.
    pub fn push_telemetry(&mut self, msg: &TelemetryMsg, now: u64) -> Result<bool, ResourceError> {
        let snapshot = self
            .node
            .workers
            .get(&msg.worker_id)
            .ok_or_else(|| ResourceError::UnknownWorker(msg.worker_id.clone()))?;
        match self.last_seq.get(&msg.worker_id) {
            Some(prev) if msg.seq <= *prev => return Ok(false),
            _ => {}
        }
        // Reject telemetry implying negative availability before touching
        // any state.
        snapshot.capacity.checked_sub(&msg.used)?;

        let first = !self.last_seq.contains_key(&msg.worker_id);
        let accepted = first || {
            let mut max_rel = 0.0f64;
            for d in Dimension::ALL {
                let cap = snapshot.capacity.dim(d);
                if cap > 0.0 {
                    let delta = (msg.used.dim(d) - snapshot.used.dim(d)).abs();
                    max_rel = max_rel.max(delta / cap);
                }
            }
            max_rel >= self.config.delta_threshold
        };

        self.last_seq.insert(msg.worker_id.clone(), msg.seq);
        let snapshot = self.node.workers.get_mut(&msg.worker_id).unwrap();
        snapshot.last_update = now;
        self.stale.remove(&msg.worker_id);
        if accepted {
            snapshot.used = msg.used;
            snapshot.vivaldi = msg.vivaldi.clone();
        }
        Ok(accepted)
    }

    pub fn set_child_aggregate(&mut self, child: ClusterId, stats: AggregateStats) {
        self.child_aggregates.insert(child, stats);
    }

    pub fn is_stale(&self, worker: &WorkerId) -> bool {
        self.stale.contains(worker)
    }

    fn live_workers(&self, now: u64) -> impl Iterator<Item = &WorkerSnapshot> {
        let timeout = self.config.staleness_timeout_ms;
        self.node.workers.values().filter(move |w| {
            !self.stale.contains(&w.worker_id)
                && now.saturating_sub(w.last_update) <= timeout
        })
    }

    /// The stats this cluster pushes to its parent: live workers merged
    /// with the latest child aggregates.
    pub fn collect_aggregate(&self, now: u64) -> Result<AggregateStats, ResourceError> {
        let mut avails = Vec::new();
        let mut virts: BTreeSet<String> = BTreeSet::new();
        for w in self.live_workers(now) {
            avails.push(w.available()?);
            virts.extend(w.virtualizations.iter().cloned());
        }
        let children: Vec<AggregateStats> = self.child_aggregates.values().cloned().collect();
        let mut stats = aggregate(&avails, &children)?;
        stats.supported_virtualizations.extend(virts);
        stats.geo_zone = self.node.geo_zone.clone();
        Ok(stats)
    }

    /// Mark every silent worker unavailable and return the instance ids
    /// that were running on them, for the reschedule pipeline.
    pub fn mark_stale_and_fail(&mut self, now: u64) -> Vec<InstanceId> {
        let timeout = self.config.staleness_timeout_ms;
        let mut affected = Vec::new();
        let newly_stale: Vec<WorkerId> = self
            .node
            .workers
            .values()
            .filter(|w| {
                !self.stale.contains(&w.worker_id)
                    && now.saturating_sub(w.last_update) > timeout
            })
            .map(|w| w.worker_id.clone())
            .collect();
        for w in newly_stale {
            if let Some(instances) = self.instances_on.remove(&w) {
                affected.extend(instances);
            }
            self.stale.insert(w);
        }
        affected
    }

    /// Treat a worker as failed right now (crash injection, explicit
    /// deregistration) instead of waiting for the staleness timeout.
    /// Same contract as the timeout path: returns the affected instances
    /// once.
    pub fn force_stale(&mut self, worker: &WorkerId) -> Vec<InstanceId> {
        if !self.node.workers.contains_key(worker) || self.stale.contains(worker) {
            return Vec::new();
        }
        self.stale.insert(worker.clone());
        self.instances_on
            .remove(worker)
            .map(|s| s.into_iter().collect())
            .unwrap_or_default()
    }

    pub fn record_instance(&mut self, worker: &WorkerId, instance: InstanceId) {
        self.instances_on
            .entry(worker.clone())
            .or_default()
            .insert(instance);
    }

    pub fn remove_instance(&mut self, worker: &WorkerId, instance: InstanceId) {
        if let Some(set) = self.instances_on.get_mut(worker) {
            set.remove(&instance);
        }
    }

    /// Snapshots of workers the scheduler may consider right now.
    pub fn schedulable_workers(&self, now: u64) -> Vec<WorkerSnapshot> {
        self.live_workers(now).cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coords::VivaldiCoordinate;

    fn record(id: &str, cpu: f64, mem: u64) -> RegistrationRecord {
        RegistrationRecord {
            id: WorkerId::from(id),
            declared_capacity: CapacityVector::new(cpu, mem),
            virtualizations: ["container".to_owned()].into(),
            geo: GeoPoint::new(0.0, 0.0).unwrap(),
            registered_at: 0,
        }
    }

    fn manager() -> ClusterManager {
        ClusterManager::new(
            ClusterNode::new(ClusterId::from("c0")),
            1,
            TelemetryConfig::default(),
        )
    }

    fn viv() -> VivaldiCoordinate {
        VivaldiCoordinate::origin(3)
    }

    #[test]
    fn first_worker_gets_subnet_zero() {
        let mut m = manager();
        let s = m.register_worker(record("w0", 4.0, 4096), viv()).unwrap();
        assert_eq!(s.subnet_index, 0);
    }

    #[test]
    fn duplicate_registration_rejected() {
        let mut m = manager();
        m.register_worker(record("w0", 4.0, 4096), viv()).unwrap();
        assert!(matches!(
            m.register_worker(record("w0", 4.0, 4096), viv()),
            Err(ResourceError::DuplicateId(_))
        ));
    }

    #[test]
    fn zero_capacity_rejected() {
        let mut m = manager();
        assert!(matches!(
            m.register_worker(record("w0", 0.0, 4096), viv()),
            Err(ResourceError::CapacityInvalid(Dimension::Cpu))
        ));
        assert!(matches!(
            m.register_worker(record("w1", 1.0, 0), viv()),
            Err(ResourceError::CapacityInvalid(Dimension::Memory))
        ));
    }

    #[test]
    fn ten_workers_ten_disjoint_subnets() {
        let mut m = manager();
        let mut subnets = Vec::new();
        for i in 0..10 {
            subnets.push(
                m.register_worker(record(&format!("w{i}"), 1.0, 1024), viv())
                    .unwrap(),
            );
        }
        for (i, a) in subnets.iter().enumerate() {
            for b in subnets.iter().skip(i + 1) {
                assert_ne!(a.subnet_index, b.subnet_index);
            }
        }
    }

    #[test]
    fn first_report_always_accepted() {
        let mut m = manager();
        m.config.delta_threshold = 0.5;
        m.register_worker(record("w0", 4.0, 4096), viv()).unwrap();
        let accepted = m
            .push_telemetry(
                &TelemetryMsg {
                    worker_id: WorkerId::from("w0"),
                    used: CapacityVector::new(0.1, 16),
                    vivaldi: viv(),
                    seq: 1,
                },
                100,
            )
            .unwrap();
        assert!(accepted);
    }

    #[test]
    fn small_delta_suppressed_but_liveness_refreshed() {
        let mut m = manager();
        m.config.delta_threshold = 0.1;
        m.register_worker(record("w0", 4.0, 4096), viv()).unwrap();
        m.push_telemetry(
            &TelemetryMsg {
                worker_id: WorkerId::from("w0"),
                used: CapacityVector::new(1.0, 0),
                vivaldi: viv(),
                seq: 1,
            },
            100,
        )
        .unwrap();
        // cpu 1.0 -> 1.05 is 1.25% of a 4-core capacity, below the 10% bar.
        let accepted = m
            .push_telemetry(
                &TelemetryMsg {
                    worker_id: WorkerId::from("w0"),
                    used: CapacityVector::new(1.05, 0),
                    vivaldi: viv(),
                    seq: 2,
                },
                200,
            )
            .unwrap();
        assert!(!accepted);
        let w = &m.node.workers[&WorkerId::from("w0")];
        assert_eq!(w.used.cpu_cores, 1.0);
        assert_eq!(w.last_update, 200);
    }

    #[test]
    fn telemetry_acceptance_monotone_in_delta() {
        // If change c is accepted from a baseline, any c' >= c is too.
        let mut m = manager();
        m.config.delta_threshold = 0.1;
        m.register_worker(record("w0", 4.0, 4096), viv()).unwrap();
        m.push_telemetry(
            &TelemetryMsg {
                worker_id: WorkerId::from("w0"),
                used: CapacityVector::new(1.0, 0),
                vivaldi: viv(),
                seq: 1,
            },
            0,
        )
        .unwrap();
        let accepted_at = |m: &ClusterManager, cpu: f64| {
            let mut probe = ClusterManager::new(m.node.clone(), 2, m.config);
            probe.last_seq = m.last_seq.clone();
            probe
                .push_telemetry(
                    &TelemetryMsg {
                        worker_id: WorkerId::from("w0"),
                        used: CapacityVector::new(cpu, 0),
                        vivaldi: VivaldiCoordinate::origin(3),
                        seq: 2,
                    },
                    10,
                )
                .unwrap()
        };
        let mut seen_accept = false;
        for step in 0..40 {
            let cpu = 1.0 + step as f64 * 0.025;
            let a = accepted_at(&m, cpu);
            if seen_accept {
                assert!(a, "acceptance not monotone at cpu={cpu}");
            }
            seen_accept |= a;
        }
        assert!(seen_accept);
    }

    #[test]
    fn out_of_order_telemetry_dropped() {
        let mut m = manager();
        m.register_worker(record("w0", 4.0, 4096), viv()).unwrap();
        for seq in [5u64, 3] {
            m.push_telemetry(
                &TelemetryMsg {
                    worker_id: WorkerId::from("w0"),
                    used: CapacityVector::new(seq as f64 * 0.1, 0),
                    vivaldi: viv(),
                    seq,
                },
                100,
            )
            .unwrap();
        }
        let w = &m.node.workers[&WorkerId::from("w0")];
        assert_eq!(w.used.cpu_cores, 0.5);
    }

    #[test]
    fn overcommitted_telemetry_rejected_snapshot_unchanged() {
        let mut m = manager();
        m.register_worker(record("w0", 4.0, 4096), viv()).unwrap();
        let err = m.push_telemetry(
            &TelemetryMsg {
                worker_id: WorkerId::from("w0"),
                used: CapacityVector::new(5.0, 0),
                vivaldi: viv(),
                seq: 1,
            },
            100,
        );
        assert!(matches!(err, Err(ResourceError::Model(_))));
        let w = &m.node.workers[&WorkerId::from("w0")];
        assert_eq!(w.used, CapacityVector::zero());
        assert_eq!(w.last_update, 0);
    }

    #[test]
    fn aggregate_excludes_stale_workers() {
        let mut m = manager();
        m.register_worker(record("w0", 2.0, 1024), viv()).unwrap();
        m.register_worker(record("w1", 4.0, 1024), viv()).unwrap();
        // w0 reports at t=5000, w1 stays silent since registration (t=0).
        m.push_telemetry(
            &TelemetryMsg {
                worker_id: WorkerId::from("w0"),
                used: CapacityVector::zero(),
                vivaldi: viv(),
                seq: 1,
            },
            5000,
        )
        .unwrap();
        let stats = m.collect_aggregate(5000).unwrap();
        assert_eq!(stats.worker_count, 1);
        assert_eq!(stats.cpu.sum, 2.0);
    }

    #[test]
    fn child_only_aggregate_passes_through() {
        let mut m = manager();
        let child = aggregate(&[CapacityVector::new(4.0, 100)], &[]).unwrap();
        m.set_child_aggregate(ClusterId::from("sub"), child.clone());
        let stats = m.collect_aggregate(0).unwrap();
        assert_eq!(stats.worker_count, 1);
        assert_eq!(stats.cpu.sum, child.cpu.sum);
        assert_eq!(stats.cpu.mean, child.cpu.mean);
    }

    #[test]
    fn stale_worker_instances_reported_once() {
        let mut m = manager();
        m.register_worker(record("w0", 4.0, 4096), viv()).unwrap();
        for i in 0..3 {
            m.record_instance(&WorkerId::from("w0"), InstanceId(i));
        }
        assert!(m.mark_stale_and_fail(1000).is_empty());
        let mut failed = m.mark_stale_and_fail(10_000);
        failed.sort();
        assert_eq!(failed, vec![InstanceId(0), InstanceId(1), InstanceId(2)]);
        // Second sweep reports nothing new.
        assert!(m.mark_stale_and_fail(20_000).is_empty());
    }

    #[test]
    fn stale_worker_reregisters_with_same_subnet() {
        let mut m = manager();
        let s0 = m.register_worker(record("w0", 4.0, 4096), viv()).unwrap();
        m.mark_stale_and_fail(10_000);
        assert!(m.is_stale(&WorkerId::from("w0")));
        let s1 = m.register_worker(record("w0", 4.0, 4096), viv()).unwrap();
        assert_eq!(s0, s1);
        assert!(!m.is_stale(&WorkerId::from("w0")));
    }
}
