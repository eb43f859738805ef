// SPDX-License-Identifier: Apache-2.0

//! Delegated service scheduling: the root prioritizes clusters from
//! aggregates, each cluster resolves placement locally via a pluggable
//! algorithm (resource-only match or latency/distance-aware placement),
//! and unresolved requests walk down sub-cluster branches.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coords::{dist_euc, dist_gc, trilaterate, CoordsError, RttSample, VivaldiCoordinate};
use crate::model::{
    AggregateStats, ClusterId, Dimension, GeoPoint, GeoZone, InfrastructureTree, ServiceId,
    TaskRequirements, WorkerId, WorkerSnapshot,
};

#[derive(Debug, Error, PartialEq)]
pub enum SchedError {
    #[error("no cluster satisfies the task constraints")]
    NoFeasibleCluster,
    #[error("no worker satisfies the task constraints")]
    NoFeasibleWorker,
    #[error("S2S constraint targets microservice {0} which is not placed yet")]
    DependencyUnplaced(u32),
    #[error("scheduling deadline (convergence_time) exceeded")]
    DeadlineExceeded,
    #[error("all candidate clusters exhausted")]
    Exhausted,
    #[error("unknown scheduler plugin {0:?}")]
    UnknownPlugin(String),
    #[error(transparent)]
    Coords(#[from] CoordsError),
}

/// A scheduling request as it travels down the hierarchy.
#[derive(Debug, Clone)]
pub struct ScheduleRequest {
    pub task: TaskRequirements,
    pub service_id: ServiceId,
    pub attempt: u32,
    pub excluded_clusters: BTreeSet<ClusterId>,
    pub excluded_workers: BTreeSet<WorkerId>,
    /// Virtual-time deadline derived from the SLA convergence time.
    pub deadline_ms: u64,
}

impl ScheduleRequest {
    pub fn new(service_id: ServiceId, task: TaskRequirements, now_ms: u64) -> Self {
        let deadline_ms = now_ms + task.convergence_time_ms;
        Self {
            task,
            service_id,
            attempt: 0,
            excluded_clusters: BTreeSet::new(),
            excluded_workers: BTreeSet::new(),
            deadline_ms,
        }
    }
}

/// Root-level ranking entry for one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterPriority {
    pub cluster_id: ClusterId,
    pub score: f64,
    pub feasible: bool,
}

/// A resolved placement together with the delegation path that found it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub worker_id: WorkerId,
    pub cluster_path: Vec<ClusterId>,
    pub decided_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RomStrategy {
    BestSlack,
    FirstFit,
}

/// An already-placed microservice an S2S constraint can reference.
#[derive(Debug, Clone)]
pub struct PlacedTarget {
    pub geo: GeoPoint,
    pub vivaldi: VivaldiCoordinate,
}

/// RTT measurement path towards a user endpoint. Implementations decide
/// how a single figure is produced (live mode takes the median of three
/// probes; the simulation samples its latency model).
pub trait LatencyProber {
    fn ping(&mut self, worker: &WorkerSnapshot, endpoint: &str) -> Option<f64>;
}

/// Rank clusters for a task. Hard filters knock out clusters that cannot
/// host it at all; survivors are ordered by descending mean slack,
/// ties by ascending cluster id.
pub fn root_prioritize(
    task: &TaskRequirements,
    task_zone: Option<&GeoZone>,
    children: &[(ClusterId, AggregateStats)],
) -> Result<Vec<ClusterPriority>, SchedError> {
    let mut out: Vec<ClusterPriority> = children
        .iter()
        .map(|(id, stats)| {
            let mut feasible = true;
            for d in Dimension::ALL {
                if stats.dim(d).sum < task.capacity.dim(d) {
                    feasible = false;
                }
            }
            if !stats
                .supported_virtualizations
                .contains(&task.virtualization)
            {
                feasible = false;
            }
            if let (Some(area), Some(zone)) = (task_zone, stats.geo_zone.as_ref()) {
                if !area.intersects(zone) {
                    feasible = false;
                }
            }
            let score = if feasible {
                Dimension::ALL
                    .iter()
                    .map(|d| {
                        (stats.dim(*d).mean - task.capacity.dim(*d))
                            / task.capacity.dim(*d).max(1.0)
                    })
                    .sum()
            } else {
                f64::NEG_INFINITY
            };
            ClusterPriority {
                cluster_id: id.clone(),
                score,
                feasible,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        b.feasible
            .cmp(&a.feasible)
            .then(b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal))
            .then(a.cluster_id.cmp(&b.cluster_id))
    });
    if !out.iter().any(|p| p.feasible) {
        return Err(SchedError::NoFeasibleCluster);
    }
    Ok(out)
}

fn rom_feasible(w: &WorkerSnapshot, task: &TaskRequirements) -> bool {
    let avail = match w.available() {
        Ok(a) => a,
        Err(_) => return false,
    };
    avail.cpu_cores >= task.capacity.cpu_cores
        && avail.memory_mb >= task.capacity.memory_mb
        && w.supports(&task.virtualization)
}

fn slack(w: &WorkerSnapshot, task: &TaskRequirements) -> f64 {
    let avail = w.available().expect("checked by rom_feasible");
    (avail.cpu_cores - task.capacity.cpu_cores)
        + (avail.memory_mb as f64 - task.capacity.memory_mb as f64)
}

/// Resource-only match: pick one worker by capacity and virtualization
/// alone.
pub fn rom_select(
    workers: &[WorkerSnapshot],
    task: &TaskRequirements,
    strategy: RomStrategy,
) -> Result<WorkerId, SchedError> {
    match strategy {
        RomStrategy::FirstFit => workers
            .iter()
            .find(|w| rom_feasible(w, task))
            .map(|w| w.worker_id.clone())
            .ok_or(SchedError::NoFeasibleWorker),
        RomStrategy::BestSlack => {
            let mut best: Option<(&WorkerSnapshot, f64)> = None;
            for w in workers.iter().filter(|w| rom_feasible(w, task)) {
                let s = slack(w, task);
                let better = match &best {
                    None => true,
                    Some((bw, bs)) => s > *bs || (s == *bs && w.worker_id < bw.worker_id),
                };
                if better {
                    best = Some((w, s));
                }
            }
            best.map(|(w, _)| w.worker_id.clone())
                .ok_or(SchedError::NoFeasibleWorker)
        }
    }
}

/// Latency & distance aware placement. Returns the surviving worker set
/// after the capacity, service-to-service, and service-to-user filter
/// stages.
pub fn ldp_select(
    workers: &[WorkerSnapshot],
    task: &TaskRequirements,
    placed: &BTreeMap<u32, PlacedTarget>,
    prober: &mut dyn LatencyProber,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeSet<WorkerId>, SchedError> {
    // Stage 1: capacity and virtualization.
    let mut survivors: Vec<&WorkerSnapshot> =
        workers.iter().filter(|w| rom_feasible(w, task)).collect();
    if survivors.is_empty() {
        return Err(SchedError::NoFeasibleWorker);
    }

    // Stage 2: per service-to-service constraint.
    for c in &task.s2s_constraints {
        let target = placed
            .get(&c.target_microservice_id)
            .ok_or(SchedError::DependencyUnplaced(c.target_microservice_id))?;
        let geo_thr = c.geo_threshold_km;
        let lat_thr = c.latency_threshold_ms;
        let mut next = Vec::with_capacity(survivors.len());
        for w in survivors {
            if dist_gc(&w.geo, &target.geo) <= geo_thr
                && dist_euc(&w.vivaldi, &target.vivaldi)? <= lat_thr
            {
                next.push(w);
            }
        }
        survivors = next;
        if survivors.is_empty() {
            return Err(SchedError::NoFeasibleWorker);
        }
    }

    // Stage 3: per service-to-user constraint. Probe the user from a
    // random worker subset, trilaterate, then filter.
    for c in &task.s2u_constraints {
        let mut pool: Vec<&WorkerSnapshot> = survivors.clone();
        pool.sort_by(|a, b| a.worker_id.cmp(&b.worker_id));
        pool.shuffle(rng);
        let mut samples = Vec::new();
        for w in pool.iter().take(c.probe_count.max(3).min(pool.len())) {
            if let Some(rtt) = prober.ping(w, &c.user_endpoint) {
                samples.push(RttSample {
                    peer_coordinate: w.vivaldi.clone(),
                    measured_rtt_ms: rtt.max(1e-3),
                });
            }
        }
        // A pool too small to pin down the user in the embedding space
        // degrades to the geographic filter alone.
        let user = trilaterate(&samples).ok();
        let mut next = Vec::with_capacity(survivors.len());
        for w in survivors {
            if dist_gc(&w.geo, &c.geo_target) <= c.geo_threshold_km
                && match &user {
                    Some(u) => dist_euc(&w.vivaldi, u)? <= c.latency_threshold_ms,
                    None => true,
                }
            {
                next.push(w);
            }
        }
        survivors = next;
        if survivors.is_empty() {
            return Err(SchedError::NoFeasibleWorker);
        }
    }

    Ok(survivors.into_iter().map(|w| w.worker_id.clone()).collect())
}

/// Reduce an LDP survivor set to the worker to deploy on: best slack,
/// ties by lowest worker id.
pub fn pick_from_survivors(
    workers: &[WorkerSnapshot],
    survivors: &BTreeSet<WorkerId>,
    task: &TaskRequirements,
) -> Result<WorkerId, SchedError> {
    let candidates: Vec<WorkerSnapshot> = workers
        .iter()
        .filter(|w| survivors.contains(&w.worker_id))
        .cloned()
        .collect();
    rom_select(&candidates, task, RomStrategy::BestSlack)
}

/// Per-cluster scheduling algorithm selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    RomFirstFit,
    RomBestSlack,
    Ldp,
}

impl Algorithm {
    pub fn parse(name: &str) -> Result<Algorithm, SchedError> {
        match name {
            "rom_first_fit" => Ok(Algorithm::RomFirstFit),
            "rom_best_slack" => Ok(Algorithm::RomBestSlack),
            "ldp" => Ok(Algorithm::Ldp),
            other => Err(SchedError::UnknownPlugin(other.to_owned())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::RomFirstFit => "rom_first_fit",
            Algorithm::RomBestSlack => "rom_best_slack",
            Algorithm::Ldp => "ldp",
        }
    }
}

/// A cluster scheduler plugin: any mapping from (workers, task, placed
/// targets) to a worker set, registered by name at startup.
pub trait ClusterScheduler: Send {
    fn select(
        &self,
        workers: &[WorkerSnapshot],
        task: &TaskRequirements,
        placed: &BTreeMap<u32, PlacedTarget>,
        prober: &mut dyn LatencyProber,
        rng: &mut ChaCha8Rng,
    ) -> Result<WorkerId, SchedError>;
}

struct BuiltinScheduler(Algorithm);

impl ClusterScheduler for BuiltinScheduler {
    fn select(
        &self,
        workers: &[WorkerSnapshot],
        task: &TaskRequirements,
        placed: &BTreeMap<u32, PlacedTarget>,
        prober: &mut dyn LatencyProber,
        rng: &mut ChaCha8Rng,
    ) -> Result<WorkerId, SchedError> {
        match self.0 {
            Algorithm::RomFirstFit => rom_select(workers, task, RomStrategy::FirstFit),
            Algorithm::RomBestSlack => rom_select(workers, task, RomStrategy::BestSlack),
            Algorithm::Ldp => {
                let survivors = ldp_select(workers, task, placed, prober, rng)?;
                pick_from_survivors(workers, &survivors, task)
            }
        }
    }
}

/// Plugin registry plus the per-cluster algorithm assignment.
pub struct SchedulerRegistry {
    plugins: BTreeMap<String, Box<dyn ClusterScheduler>>,
    per_cluster: BTreeMap<ClusterId, String>,
    default: String,
}

impl SchedulerRegistry {
    pub fn new(default: Algorithm) -> Self {
        let mut plugins: BTreeMap<String, Box<dyn ClusterScheduler>> = BTreeMap::new();
        for a in [Algorithm::RomFirstFit, Algorithm::RomBestSlack, Algorithm::Ldp] {
            plugins.insert(a.name().to_owned(), Box::new(BuiltinScheduler(a)));
        }
        Self {
            plugins,
            per_cluster: BTreeMap::new(),
            default: default.name().to_owned(),
        }
    }

    pub fn register(&mut self, name: &str, plugin: Box<dyn ClusterScheduler>) {
        self.plugins.insert(name.to_owned(), plugin);
    }

    pub fn assign(&mut self, cluster: ClusterId, name: &str) -> Result<(), SchedError> {
        if !self.plugins.contains_key(name) {
            return Err(SchedError::UnknownPlugin(name.to_owned()));
        }
        self.per_cluster.insert(cluster, name.to_owned());
        Ok(())
    }

    pub fn for_cluster(&self, cluster: &ClusterId) -> &dyn ClusterScheduler {
        let name = self.per_cluster.get(cluster).unwrap_or(&self.default);
        self.plugins[name].as_ref()
    }
}

/// Message accounting and compute timing of one delegation run.
#[derive(Debug, Clone, Default)]
pub struct DelegationTrace {
    /// Forward messages along the successful path (root -> ... -> leaf cluster).
    pub forward_messages: u32,
    /// Retry messages: clusters entered that could not place the task.
    pub retry_messages: u32,
    pub clusters_tried: u32,
    pub root_calc: Duration,
    pub cluster_calc: Vec<Duration>,
}

/// Everything delegate() needs besides the tree itself.
pub struct DelegationEnv<'a> {
    pub registry: &'a SchedulerRegistry,
    pub prober: &'a mut dyn LatencyProber,
    pub placed: &'a BTreeMap<u32, PlacedTarget>,
    pub task_zone: Option<&'a GeoZone>,
    pub rng_seed: u64,
    pub now_ms: u64,
}

/// Recursively compute the aggregate a branch exposes upward, from live
/// leaf snapshots.
pub fn aggregate_branch(
    tree: &InfrastructureTree,
    cluster_id: &ClusterId,
) -> Result<AggregateStats, SchedError> {
    let node = tree.cluster(cluster_id).ok_or(SchedError::NoFeasibleCluster)?;
    let mut avails = Vec::new();
    let mut virts = BTreeSet::new();
    for w in node.workers.values() {
        if let Ok(a) = w.available() {
            avails.push(a);
            virts.extend(w.virtualizations.iter().cloned());
        }
    }
    let mut children = Vec::new();
    for child in &node.child_clusters {
        children.push(aggregate_branch(tree, child)?);
    }
    let mut stats =
        crate::model::aggregate(&avails, &children).map_err(|_| SchedError::NoFeasibleCluster)?;
    stats.supported_virtualizations.extend(virts);
    stats.geo_zone = node.geo_zone.clone();
    Ok(stats)
}

/// The t-step delegated scheduling pipeline. The root ranks its child
/// clusters, forwards to the best one, and each cluster either places
/// locally (early termination) or recurses into its sub-clusters. A
/// cluster that cannot place the task is excluded and the next sibling
/// in priority order is tried.
pub fn delegate(
    request: &mut ScheduleRequest,
    tree: &InfrastructureTree,
    env: &mut DelegationEnv<'_>,
) -> Result<(Placement, DelegationTrace), SchedError> {
    if env.now_ms > request.deadline_ms {
        return Err(SchedError::DeadlineExceeded);
    }
    let mut trace = DelegationTrace::default();
    // A branch with no live worker anywhere has no aggregate; skip it.
    let children: Vec<(ClusterId, AggregateStats)> = tree
        .top_clusters
        .iter()
        .filter_map(|id| aggregate_branch(tree, id).ok().map(|s| (id.clone(), s)))
        .collect();
    let t0 = Instant::now();
    let priorities = root_prioritize(&request.task, env.task_zone, &children)?;
    trace.root_calc = t0.elapsed();

    for p in priorities.iter().filter(|p| p.feasible) {
        if request.excluded_clusters.contains(&p.cluster_id) {
            continue;
        }
        match schedule_in_cluster(&p.cluster_id, request, tree, env, &mut trace, 1) {
            Ok(placement) => return Ok((placement, trace)),
            Err(SchedError::DeadlineExceeded) => return Err(SchedError::DeadlineExceeded),
            Err(SchedError::DependencyUnplaced(m)) => {
                return Err(SchedError::DependencyUnplaced(m))
            }
            Err(_) => {
                request.excluded_clusters.insert(p.cluster_id.clone());
                request.attempt += 1;
            }
        }
    }
    Err(SchedError::Exhausted)
}

fn schedule_in_cluster(
    cluster_id: &ClusterId,
    request: &mut ScheduleRequest,
    tree: &InfrastructureTree,
    env: &mut DelegationEnv<'_>,
    trace: &mut DelegationTrace,
    depth: u32,
) -> Result<Placement, SchedError> {
    if env.now_ms > request.deadline_ms {
        return Err(SchedError::DeadlineExceeded);
    }
    trace.clusters_tried += 1;
    let node = tree.cluster(cluster_id).ok_or(SchedError::NoFeasibleCluster)?;

    // Local workers first; a hit terminates the t-step recursion early.
    let workers: Vec<WorkerSnapshot> = node
        .workers
        .values()
        .filter(|w| !request.excluded_workers.contains(&w.worker_id))
        .cloned()
        .collect();
    if !workers.is_empty() {
        let scheduler = env.registry.for_cluster(cluster_id);
        let mut rng = ChaCha8Rng::seed_from_u64(
            env.rng_seed ^ fx_hash(cluster_id.as_str()) ^ request.attempt as u64,
        );
        let t0 = Instant::now();
        let picked = scheduler.select(&workers, &request.task, env.placed, env.prober, &mut rng);
        trace.cluster_calc.push(t0.elapsed());
        match picked {
            Ok(worker_id) => {
                trace.forward_messages += depth;
                return Ok(Placement {
                    worker_id,
                    cluster_path: vec![cluster_id.clone()],
                    decided_at: env.now_ms,
                });
            }
            Err(SchedError::DependencyUnplaced(m)) => {
                return Err(SchedError::DependencyUnplaced(m))
            }
            Err(_) => {}
        }
    }

    // Otherwise re-prioritize among sub-clusters and forward down the branch.
    if !node.child_clusters.is_empty() {
        let children: Vec<(ClusterId, AggregateStats)> = node
            .child_clusters
            .iter()
            .filter(|c| !request.excluded_clusters.contains(*c))
            .filter_map(|c| aggregate_branch(tree, c).ok().map(|s| (c.clone(), s)))
            .collect();
        if !children.is_empty() {
            let t0 = Instant::now();
            let ranked = root_prioritize(&request.task, env.task_zone, &children);
            trace.cluster_calc.push(t0.elapsed());
            if let Ok(priorities) = ranked {
                for p in priorities.iter().filter(|p| p.feasible) {
                    match schedule_in_cluster(&p.cluster_id, request, tree, env, trace, depth + 1)
                    {
                        Ok(mut placement) => {
                            placement.cluster_path.insert(0, cluster_id.clone());
                            return Ok(placement);
                        }
                        Err(SchedError::DeadlineExceeded) => {
                            return Err(SchedError::DeadlineExceeded)
                        }
                        Err(SchedError::DependencyUnplaced(m)) => {
                            return Err(SchedError::DependencyUnplaced(m))
                        }
                        Err(_) => {
                            request.excluded_clusters.insert(p.cluster_id.clone());
                            trace.retry_messages += 1;
                        }
                    }
                }
            }
        }
    }
    Err(SchedError::NoFeasibleWorker)
}

/// Re-place a failed instance: first within its origin cluster with the
/// failed worker excluded, escalating to root-level delegation only when
/// the cluster has nothing feasible left. Returns the placement and how
/// many root messages the attempt needed (zero in the local case).
pub fn reschedule(
    request: &mut ScheduleRequest,
    origin_cluster: &ClusterId,
    tree: &InfrastructureTree,
    env: &mut DelegationEnv<'_>,
) -> Result<(Placement, u32), SchedError> {
    let mut trace = DelegationTrace::default();
    match schedule_in_cluster(origin_cluster, request, tree, env, &mut trace, 1) {
        Ok(placement) => Ok((placement, 0)),
        Err(SchedError::DeadlineExceeded) => Err(SchedError::DeadlineExceeded),
        Err(_) => {
            // Other workers in the origin cluster may still fit a later
            // retry; only the failed worker stays excluded.
            request.excluded_clusters.clear();
            let (placement, _) = delegate(request, tree, env)?;
            Ok((placement, 1))
        }
    }
}

fn fx_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// A prober that never answers; usable wherever the task set carries no
/// service-to-user constraints.
pub struct NoProber;

impl LatencyProber for NoProber {
    fn ping(&mut self, _worker: &WorkerSnapshot, _endpoint: &str) -> Option<f64> {
        None
    }
}
