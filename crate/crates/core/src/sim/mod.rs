// SPDX-License-Identifier: Apache-2.0

//! Deterministic simulation harness. A scenario file describes a
//! synthetic deployment (topology, planted network coordinates,
//! workload, faults); the runner executes it on virtual time and writes
//! two CSVs: `metrics.csv` holds only virtual-time facts and is
//! byte-identical across runs with the same seed, `timings.csv` holds
//! wall-clock scheduler compute measurements and is not.

pub mod runner;
pub mod sweep;

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coords::VivaldiCoordinate;
use crate::model::{GeoPoint, WorkerSnapshot};
use crate::scheduler::LatencyProber;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scenario could not be parsed: {0}")]
    Parse(String),
    #[error("unsupported scenario version {0} (expected 1)")]
    Version(u32),
    #[error("scenario invalid: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    System(#[from] crate::system::SystemError),
    #[error(transparent)]
    Sched(#[from] crate::scheduler::SchedError),
}

/// Edge of the synthetic latency space, in ms. A cube of this side
/// keeps pairwise RTTs within the couple-hundred-ms band typical for
/// wide-area edge deployments.
pub const DEFAULT_SPACE_SIDE_MS: f64 = 144.0;

fn default_space_side() -> f64 {
    DEFAULT_SPACE_SIDE_MS
}

fn default_geo_box() -> [f64; 4] {
    // lat_min, lon_min, lat_max, lon_max: roughly central Europe.
    [45.0, 5.0, 53.0, 15.0]
}

fn default_worker_cpu() -> f64 {
    8.0
}

fn default_worker_memory() -> u64 {
    16_384
}

fn default_true() -> bool {
    true
}

fn default_version() -> u32 {
    1
}

fn default_deploy_interval() -> u64 {
    100
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSpec {
    /// Side of the latency-embedding cube in ms.
    #[serde(default = "default_space_side")]
    pub side_ms: f64,
    /// [lat_min, lon_min, lat_max, lon_max] of the geographic box the
    /// infrastructure occupies.
    #[serde(default = "default_geo_box")]
    pub geo_box: [f64; 4],
}

impl Default for SpaceSpec {
    fn default() -> Self {
        Self {
            side_ms: default_space_side(),
            geo_box: default_geo_box(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub clusters: u32,
    pub workers_per_cluster: u32,
    #[serde(default = "default_worker_cpu")]
    pub worker_cpu: f64,
    #[serde(default = "default_worker_memory")]
    pub worker_memory_mb: u64,
    #[serde(default)]
    pub space: SpaceSpec,
    /// Give each cluster a rectangular geo zone (a latitude slice of the
    /// box). Needed for area-constrained workloads.
    #[serde(default = "default_true")]
    pub cluster_zones: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    /// Number of single-task services deployed over the run.
    pub services: u32,
    #[serde(default = "default_deploy_interval")]
    pub deploy_interval_ms: u64,
    pub vcpus: f64,
    pub memory_mb: u64,
    /// Adds a service-to-user constraint with this bound; the user is
    /// planted next to a random worker so a feasible placement always
    /// exists.
    #[serde(default)]
    pub latency_ms: Option<f64>,
    #[serde(default)]
    pub geo_threshold_km: Option<f64>,
    /// Named region the service must run in ("world" covers the whole
    /// geo box and is always registered).
    #[serde(default)]
    pub area: Option<String>,
    /// When set each service gets a second task tied to the first by a
    /// service-to-service constraint with this latency bound.
    #[serde(default)]
    pub s2s_latency_ms: Option<f64>,
    /// Undeploy right after placement: keeps cluster load identical for
    /// every sample, which is what calc-time measurements want.
    #[serde(default)]
    pub stop_after_placement: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FaultSpec {
    WorkerCrash { at_ms: u64, worker: String },
    ClusterPartition {
        at_ms: u64,
        cluster: String,
        #[serde(default)]
        heal_at_ms: Option<u64>,
    },
}

impl FaultSpec {
    pub fn at_ms(&self) -> u64 {
        match self {
            FaultSpec::WorkerCrash { at_ms, .. } => *at_ms,
            FaultSpec::ClusterPartition { at_ms, .. } => *at_ms,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_version")]
    pub version: u32,
    pub name: String,
    pub seed: u64,
    pub duration_ms: u64,
    pub topology: TopologySpec,
    /// "rom_first_fit" | "rom_best_slack" | "ldp".
    pub scheduler: String,
    #[serde(default)]
    pub telemetry: Option<crate::resource::TelemetryConfig>,
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario, SimError> {
        let s: Scenario =
            serde_json::from_str(text).map_err(|e| SimError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Scenario, SimError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.version != 1 {
            return Err(SimError::Version(self.version));
        }
        if self.topology.clusters == 0 || self.topology.workers_per_cluster == 0 {
            return Err(SimError::Invalid("topology must not be empty".into()));
        }
        crate::scheduler::Algorithm::parse(&self.scheduler)
            .map_err(|e| SimError::Invalid(e.to_string()))?;
        if self.workload.vcpus <= 0.0 || self.workload.memory_mb == 0 {
            return Err(SimError::Invalid("workload capacity must be positive".into()));
        }
        Ok(())
    }

    pub fn total_workers(&self) -> u32 {
        self.topology.clusters * self.topology.workers_per_cluster
    }
}

/// Planted ground truth for one worker: its latency-space position is
/// its Vivaldi coordinate (assumed converged), its geo position lies in
/// its cluster's slice of the box.
#[derive(Debug, Clone)]
pub struct PlantedWorker {
    pub cluster: String,
    pub name: String,
    pub position: Vec<f64>,
    pub geo: GeoPoint,
}

/// Draw the planted topology for a scenario. Deterministic in the seed.
pub fn plant_workers(s: &Scenario) -> Vec<PlantedWorker> {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let side = s.topology.space.side_ms;
    let [lat_min, lon_min, lat_max, lon_max] = s.topology.space.geo_box;
    let strips = s.topology.clusters as f64;
    let mut out = Vec::new();
    for ci in 0..s.topology.clusters {
        // Latitude slice of the box for this cluster.
        let s_lat_min = lat_min + (lat_max - lat_min) * ci as f64 / strips;
        let s_lat_max = lat_min + (lat_max - lat_min) * (ci + 1) as f64 / strips;
        for wi in 0..s.topology.workers_per_cluster {
            let position = vec![
                rng.random_range(0.0..side),
                rng.random_range(0.0..side),
                rng.random_range(0.0..side),
            ];
            let lat = rng.random_range(s_lat_min..s_lat_max);
            let lon = rng.random_range(lon_min..lon_max);
            out.push(PlantedWorker {
                cluster: format!("c{ci}"),
                name: format!("c{ci}w{wi}"),
                position,
                geo: GeoPoint::new(lat, lon).expect("box within valid range"),
            });
        }
    }
    out
}

/// Cluster zone: the rectangle of its latitude slice.
pub fn cluster_zone(s: &Scenario, ci: u32) -> crate::model::GeoZone {
    let [lat_min, lon_min, lat_max, lon_max] = s.topology.space.geo_box;
    let strips = s.topology.clusters as f64;
    let a = lat_min + (lat_max - lat_min) * ci as f64 / strips;
    let b = lat_min + (lat_max - lat_min) * (ci + 1) as f64 / strips;
    crate::model::GeoZone::new(vec![
        GeoPoint::new(a, lon_min).unwrap(),
        GeoPoint::new(a, lon_max).unwrap(),
        GeoPoint::new(b, lon_max).unwrap(),
        GeoPoint::new(b, lon_min).unwrap(),
    ])
}

pub fn world_zone(s: &Scenario) -> crate::model::GeoZone {
    let [lat_min, lon_min, lat_max, lon_max] = s.topology.space.geo_box;
    crate::model::GeoZone::new(vec![
        GeoPoint::new(lat_min, lon_min).unwrap(),
        GeoPoint::new(lat_min, lon_max).unwrap(),
        GeoPoint::new(lat_max, lon_max).unwrap(),
        GeoPoint::new(lat_max, lon_min).unwrap(),
    ])
}

/// Answers user probes from the planted geometry: the RTT between a
/// worker and a user endpoint is their distance in the embedding.
#[derive(Debug, Default)]
pub struct PlantedProber {
    users: BTreeMap<String, Vec<f64>>,
}

impl PlantedProber {
    pub fn plant_user(&mut self, endpoint: &str, position: Vec<f64>) {
        self.users.insert(endpoint.to_owned(), position);
    }

    pub fn user_coordinate(&self, endpoint: &str) -> Option<VivaldiCoordinate> {
        self.users
            .get(endpoint)
            .map(|p| VivaldiCoordinate::at(p.clone()))
    }
}

impl LatencyProber for PlantedProber {
    fn ping(&mut self, worker: &WorkerSnapshot, endpoint: &str) -> Option<f64> {
        let user = self.users.get(endpoint)?;
        let d: f64 = worker
            .vivaldi
            .position
            .iter()
            .zip(user.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        Some(d.max(1e-3))
    }
}
