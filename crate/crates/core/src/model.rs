// SPDX-License-Identifier: Apache-2.0

//! Domain types shared across the framework: capacities, topology,
//! aggregates, and service requirement descriptors.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coords::VivaldiCoordinate;

/// Runtime tags a worker may advertise and an SLA may request.
pub const KNOWN_RUNTIMES: &[&str] = &["container", "unikernel", "mock"];

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("capacity underflow in dimension {dim}: used {used} exceeds capacity {capacity}")]
    Underflow { dim: Dimension, used: f64, capacity: f64 },
    #[error("aggregate over empty input")]
    EmptyAggregate,
    #[error("latitude {0} outside [-90, 90]")]
    LatitudeOutOfRange(f64),
    #[error("longitude {0} outside [-180, 180]")]
    LongitudeOutOfRange(f64),
    #[error("malformed infrastructure tree: {0}")]
    MalformedTree(String),
    #[error("unknown virtualization runtime {0:?}")]
    UnknownRuntime(String),
    #[error("service descriptor must contain at least one task")]
    EmptyService,
}

macro_rules! id_newtype {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(
            Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }
    };
}

id_newtype!(
    /// Identifier of a leaf worker node.
    WorkerId
);
id_newtype!(
    /// Identifier of a cluster (its orchestrator).
    ClusterId
);
id_newtype!(
    /// Identifier of a deployed service.
    ServiceId
);

/// Identifier of a single service instance. Fresh ids are never reused,
/// including across migration (the new instance gets a new id).
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct InstanceId(pub u64);

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "i{}", self.0)
    }
}

/// Capacity dimensions that participate in aggregation and scheduling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dimension {
    Cpu,
    Memory,
    Gpu,
    Tpu,
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [
        Dimension::Cpu,
        Dimension::Memory,
        Dimension::Gpu,
        Dimension::Tpu,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Dimension::Cpu => "cpu",
            Dimension::Memory => "memory",
            Dimension::Gpu => "gpu",
            Dimension::Tpu => "tpu",
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A vector of hardware capacities. Used both for what a worker has and
/// for what a task requires.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct CapacityVector {
    pub cpu_cores: f64,
    pub memory_mb: u64,
    pub gpu_units: u64,
    pub tpu_units: u64,
    pub bandwidth_in_mbps: u64,
}

impl CapacityVector {
    pub fn new(cpu_cores: f64, memory_mb: u64) -> Self {
        Self {
            cpu_cores,
            memory_mb,
            ..Default::default()
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn dim(&self, d: Dimension) -> f64 {
        match d {
            Dimension::Cpu => self.cpu_cores,
            Dimension::Memory => self.memory_mb as f64,
            Dimension::Gpu => self.gpu_units as f64,
            Dimension::Tpu => self.tpu_units as f64,
        }
    }

    /// Componentwise subtraction. Underflow in any component is an error,
    /// never a silent clamp: negative availability signals corrupted
    /// telemetry and must be surfaced.
    pub fn checked_sub(&self, other: &CapacityVector) -> Result<CapacityVector, ModelError> {
        if other.cpu_cores > self.cpu_cores {
            return Err(ModelError::Underflow {
                dim: Dimension::Cpu,
                used: other.cpu_cores,
                capacity: self.cpu_cores,
            });
        }
        for (d, have, want) in [
            (Dimension::Memory, self.memory_mb, other.memory_mb),
            (Dimension::Gpu, self.gpu_units, other.gpu_units),
            (Dimension::Tpu, self.tpu_units, other.tpu_units),
        ] {
            if want > have {
                return Err(ModelError::Underflow {
                    dim: d,
                    used: want as f64,
                    capacity: have as f64,
                });
            }
        }
        Ok(CapacityVector {
            cpu_cores: self.cpu_cores - other.cpu_cores,
            memory_mb: self.memory_mb - other.memory_mb,
            gpu_units: self.gpu_units - other.gpu_units,
            tpu_units: self.tpu_units - other.tpu_units,
            bandwidth_in_mbps: self.bandwidth_in_mbps.saturating_sub(other.bandwidth_in_mbps),
        })
    }

    pub fn add(&self, other: &CapacityVector) -> CapacityVector {
        CapacityVector {
            cpu_cores: self.cpu_cores + other.cpu_cores,
            memory_mb: self.memory_mb + other.memory_mb,
            gpu_units: self.gpu_units + other.gpu_units,
            tpu_units: self.tpu_units + other.tpu_units,
            bandwidth_in_mbps: self.bandwidth_in_mbps + other.bandwidth_in_mbps,
        }
    }

    /// True when `self` fits inside `other` componentwise.
    pub fn fits_within(&self, other: &CapacityVector) -> bool {
        self.cpu_cores <= other.cpu_cores
            && self.memory_mb <= other.memory_mb
            && self.gpu_units <= other.gpu_units
            && self.tpu_units <= other.tpu_units
            && self.bandwidth_in_mbps <= other.bandwidth_in_mbps
    }
}

/// A point on the globe, degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    latitude_deg: f64,
    longitude_deg: f64,
}

impl GeoPoint {
    pub fn new(latitude_deg: f64, longitude_deg: f64) -> Result<Self, ModelError> {
        if !(-90.0..=90.0).contains(&latitude_deg) || !latitude_deg.is_finite() {
            return Err(ModelError::LatitudeOutOfRange(latitude_deg));
        }
        if !(-180.0..=180.0).contains(&longitude_deg) || !longitude_deg.is_finite() {
            return Err(ModelError::LongitudeOutOfRange(longitude_deg));
        }
        Ok(Self {
            latitude_deg,
            longitude_deg,
        })
    }

    pub fn latitude_deg(&self) -> f64 {
        self.latitude_deg
    }

    pub fn longitude_deg(&self) -> f64 {
        self.longitude_deg
    }
}

/// A convex polygon of geo points delimiting a cluster's operation zone
/// or a named SLA region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoZone {
    pub vertices: Vec<GeoPoint>,
}

impl GeoZone {
    pub fn new(vertices: Vec<GeoPoint>) -> Self {
        Self { vertices }
    }

    /// Point-in-convex-polygon test in the lat/lon plane. Vertices may be
    /// listed in either winding order.
    pub fn contains(&self, p: &GeoPoint) -> bool {
        let n = self.vertices.len();
        if n < 3 {
            return false;
        }
        let mut sign = 0i8;
        for i in 0..n {
            let a = &self.vertices[i];
            let b = &self.vertices[(i + 1) % n];
            let cross = (b.longitude_deg - a.longitude_deg)
                * (p.latitude_deg - a.latitude_deg)
                - (b.latitude_deg - a.latitude_deg) * (p.longitude_deg - a.longitude_deg);
            if cross.abs() < 1e-12 {
                continue;
            }
            let s = if cross > 0.0 { 1 } else { -1 };
            if sign == 0 {
                sign = s;
            } else if sign != s {
                return false;
            }
        }
        true
    }

    /// Convex-convex overlap via the separating axis theorem over the
    /// lat/lon plane.
    pub fn intersects(&self, other: &GeoZone) -> bool {
        if self.vertices.len() < 3 || other.vertices.len() < 3 {
            return false;
        }
        !has_separating_axis(&self.vertices, &other.vertices)
            && !has_separating_axis(&other.vertices, &self.vertices)
    }
}

fn has_separating_axis(a: &[GeoPoint], b: &[GeoPoint]) -> bool {
    let n = a.len();
    for i in 0..n {
        let p = &a[i];
        let q = &a[(i + 1) % n];
        // Edge normal in the (lon, lat) plane.
        let nx = -(q.latitude_deg - p.latitude_deg);
        let ny = q.longitude_deg - p.longitude_deg;
        let project = |pts: &[GeoPoint]| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for v in pts {
                let t = nx * v.longitude_deg + ny * v.latitude_deg;
                lo = lo.min(t);
                hi = hi.max(t);
            }
            (lo, hi)
        };
        let (alo, ahi) = project(a);
        let (blo, bhi) = project(b);
        if ahi < blo || bhi < alo {
            return true;
        }
    }
    false
}

/// A worker's current view as held by its cluster orchestrator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerSnapshot {
    pub worker_id: WorkerId,
    pub capacity: CapacityVector,
    pub used: CapacityVector,
    pub geo: GeoPoint,
    pub vivaldi: VivaldiCoordinate,
    pub virtualizations: BTreeSet<String>,
    /// Monotonic milliseconds of the last accepted or keepalive report.
    pub last_update: u64,
}

impl WorkerSnapshot {
    /// Remaining capacity, i.e. what the scheduler may still place here.
    pub fn available(&self) -> Result<CapacityVector, ModelError> {
        self.capacity.checked_sub(&self.used)
    }

    pub fn supports(&self, runtime: &str) -> bool {
        self.virtualizations.contains(runtime)
    }
}

/// Per-dimension summary a cluster exposes upward in place of raw worker
/// detail: the sum/mean/population-std triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct DimStats {
    pub sum: f64,
    pub mean: f64,
    pub std: f64,
}

/// Aggregated availability a cluster reports to the tier above.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateStats {
    pub cpu: DimStats,
    pub memory: DimStats,
    pub gpu: DimStats,
    pub tpu: DimStats,
    pub worker_count: u64,
    pub supported_virtualizations: BTreeSet<String>,
    pub geo_zone: Option<GeoZone>,
}

impl AggregateStats {
    pub fn dim(&self, d: Dimension) -> &DimStats {
        match d {
            Dimension::Cpu => &self.cpu,
            Dimension::Memory => &self.memory,
            Dimension::Gpu => &self.gpu,
            Dimension::Tpu => &self.tpu,
        }
    }

    fn dim_mut(&mut self, d: Dimension) -> &mut DimStats {
        match d {
            Dimension::Cpu => &mut self.cpu,
            Dimension::Memory => &mut self.memory,
            Dimension::Gpu => &mut self.gpu,
            Dimension::Tpu => &mut self.tpu,
        }
    }
}

// Running (count, mean, M2) moments; merges exactly under the parallel
// variance formula, which is why the std is the population one.
#[derive(Clone, Copy, Default)]
struct Moments {
    count: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.count += 1.0;
        let delta = x - self.mean;
        self.mean += delta / self.count;
        self.m2 += delta * (x - self.mean);
    }

    fn merge(&mut self, other: &Moments) {
        if other.count == 0.0 {
            return;
        }
        if self.count == 0.0 {
            *self = *other;
            return;
        }
        let total = self.count + other.count;
        let delta = other.mean - self.mean;
        self.m2 += other.m2 + delta * delta * self.count * other.count / total;
        self.mean += delta * other.count / total;
        self.count = total;
    }

    fn std(&self) -> f64 {
        if self.count == 0.0 {
            0.0
        } else {
            (self.m2 / self.count).max(0.0).sqrt()
        }
    }
}

/// Merge worker availabilities and child-cluster aggregates into the
/// stats this cluster reports upward. Each child contributes through its
/// (count, mean, std) without access to its raw workers.
pub fn aggregate(
    workers: &[CapacityVector],
    children: &[AggregateStats],
) -> Result<AggregateStats, ModelError> {
    if workers.is_empty() && children.is_empty() {
        return Err(ModelError::EmptyAggregate);
    }
    let mut out = AggregateStats {
        cpu: DimStats::default(),
        memory: DimStats::default(),
        gpu: DimStats::default(),
        tpu: DimStats::default(),
        worker_count: 0,
        supported_virtualizations: BTreeSet::new(),
        geo_zone: None,
    };
    for d in Dimension::ALL {
        let mut m = Moments::default();
        for w in workers {
            m.push(w.dim(d));
        }
        for c in children {
            let cm = Moments {
                count: c.worker_count as f64,
                mean: c.dim(d).mean,
                m2: c.dim(d).std * c.dim(d).std * c.worker_count as f64,
            };
            m.merge(&cm);
        }
        let s = out.dim_mut(d);
        s.sum = m.count * m.mean;
        s.mean = m.mean;
        s.std = m.std();
    }
    out.worker_count =
        workers.len() as u64 + children.iter().map(|c| c.worker_count).sum::<u64>();
    for c in children {
        out.supported_virtualizations
            .extend(c.supported_virtualizations.iter().cloned());
    }
    Ok(out)
}

/// One cluster in the tree: its orchestrator plus the workers and
/// sub-clusters it manages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterNode {
    pub cluster_id: ClusterId,
    pub orchestrator_endpoint: String,
    pub workers: BTreeMap<WorkerId, WorkerSnapshot>,
    pub child_clusters: BTreeSet<ClusterId>,
    pub last_aggregate: Option<AggregateStats>,
    pub geo_zone: Option<GeoZone>,
}

impl ClusterNode {
    pub fn new(cluster_id: ClusterId) -> Self {
        Self {
            cluster_id,
            orchestrator_endpoint: String::new(),
            workers: BTreeMap::new(),
            child_clusters: BTreeSet::new(),
            last_aggregate: None,
            geo_zone: None,
        }
    }
}

/// Oriented tree of clusters rooted at the root orchestrator. The
/// topology ground truth against which all scheduling paths are checked.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InfrastructureTree {
    pub root_id: String,
    /// Clusters attached directly under the root.
    pub top_clusters: BTreeSet<ClusterId>,
    pub clusters: BTreeMap<ClusterId, ClusterNode>,
}

impl InfrastructureTree {
    pub fn new(root_id: impl Into<String>) -> Self {
        Self {
            root_id: root_id.into(),
            top_clusters: BTreeSet::new(),
            clusters: BTreeMap::new(),
        }
    }

    /// Checks the oriented-tree invariants: single parent per cluster, no
    /// cycles, every cluster reachable from the root, every worker id in
    /// exactly one cluster.
    pub fn validate(&self) -> Result<(), ModelError> {
        let mut parent: BTreeMap<&ClusterId, Option<&ClusterId>> = BTreeMap::new();
        for id in self.top_clusters.iter() {
            if !self.clusters.contains_key(id) {
                return Err(ModelError::MalformedTree(format!(
                    "top-level cluster {id} missing from cluster map"
                )));
            }
            parent.insert(id, None);
        }
        for (id, node) in &self.clusters {
            for child in &node.child_clusters {
                if !self.clusters.contains_key(child) {
                    return Err(ModelError::MalformedTree(format!(
                        "edge ({id}, {child}) references unknown cluster"
                    )));
                }
                if self.top_clusters.contains(child) {
                    return Err(ModelError::MalformedTree(format!(
                        "cluster {child} is both top-level and a sub-cluster"
                    )));
                }
                match parent.insert(child, Some(id)) {
                    Some(Some(prev)) if prev != id => {
                        return Err(ModelError::MalformedTree(format!(
                            "cluster {child} has two parents: {prev} and {id}"
                        )))
                    }
                    Some(_) => {
                        return Err(ModelError::MalformedTree(format!(
                            "duplicate edge into cluster {child}"
                        )))
                    }
                    None => {}
                }
            }
        }
        // Reachability from the root covers all clusters iff there is no cycle
        // among the remaining ones.
        let mut seen: BTreeSet<&ClusterId> = BTreeSet::new();
        let mut stack: Vec<&ClusterId> = self.top_clusters.iter().collect();
        while let Some(id) = stack.pop() {
            if !seen.insert(id) {
                continue;
            }
            stack.extend(self.clusters[id].child_clusters.iter());
        }
        if seen.len() != self.clusters.len() {
            return Err(ModelError::MalformedTree(
                "cluster(s) unreachable from root (orphan or cycle)".into(),
            ));
        }
        let mut workers: BTreeSet<&WorkerId> = BTreeSet::new();
        for node in self.clusters.values() {
            for w in node.workers.keys() {
                if !workers.insert(w) {
                    return Err(ModelError::MalformedTree(format!(
                        "worker {w} appears in more than one cluster"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn cluster(&self, id: &ClusterId) -> Option<&ClusterNode> {
        self.clusters.get(id)
    }
}

/// Service-to-service placement constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct S2SConstraint {
    pub target_microservice_id: u32,
    pub geo_threshold_km: f64,
    pub latency_threshold_ms: f64,
}

/// Service-to-user placement constraint. The user position is estimated
/// by probing from `probe_count` random workers and trilaterating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct S2UConstraint {
    pub user_endpoint: String,
    pub geo_target: GeoPoint,
    pub geo_threshold_km: f64,
    pub latency_threshold_ms: f64,
    pub probe_count: usize,
}

/// Requirements of one microservice, straight out of the SLA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRequirements {
    pub microservice_id: u32,
    pub capacity: CapacityVector,
    pub latency_ms: Option<f64>,
    pub area: Option<String>,
    pub location: Option<GeoPoint>,
    /// Max km from `location`; also the default for constraints that omit
    /// their own threshold.
    pub threshold_km: Option<f64>,
    /// 0 = migrate eagerly on SLA violations, 1 = never.
    pub rigidness: f64,
    pub convergence_time_ms: u64,
    pub virtualization: String,
    pub s2s_constraints: Vec<S2SConstraint>,
    pub s2u_constraints: Vec<S2UConstraint>,
}

impl TaskRequirements {
    pub fn basic(microservice_id: u32, capacity: CapacityVector, virtualization: &str) -> Self {
        Self {
            microservice_id,
            capacity,
            latency_ms: None,
            area: None,
            location: None,
            threshold_km: None,
            rigidness: 1.0,
            convergence_time_ms: 10_000,
            virtualization: virtualization.to_owned(),
            s2s_constraints: Vec::new(),
            s2u_constraints: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !KNOWN_RUNTIMES.contains(&self.virtualization.as_str()) {
            return Err(ModelError::UnknownRuntime(self.virtualization.clone()));
        }
        if self.convergence_time_ms == 0 {
            return Err(ModelError::MalformedTree(
                "convergence_time must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A service as submitted for deployment: an ordered list of tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceDescriptor {
    pub service_id: ServiceId,
    pub tasks: Vec<TaskRequirements>,
}

impl ServiceDescriptor {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.tasks.is_empty() {
            return Err(ModelError::EmptyService);
        }
        for t in &self.tasks {
            t.validate()?;
        }
        Ok(())
    }
}
