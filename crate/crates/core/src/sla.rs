// SPDX-License-Identifier: Apache-2.0

//! SLA file parsing. The on-disk document mirrors the requirement
//! descriptor schema (`constraints` -> `microservice_id` + one
//! `properties` entry per microservice); unknown fields are rejected so
//! typos fail loudly instead of silently relaxing a constraint. A
//! separate registry file names the geographic regions `area` may
//! reference.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    CapacityVector, GeoPoint, GeoZone, ModelError, S2SConstraint, S2UConstraint,
    ServiceDescriptor, ServiceId, TaskRequirements,
};

#[derive(Debug, Error)]
pub enum SlaError {
    #[error("SLA document could not be parsed: {0}")]
    Parse(String),
    #[error("microservice {0}: exactly one properties entry is supported, got {1}")]
    PropertyCount(u32, usize),
    #[error("microservice {0}: location {1:?} is not \"lat,lon\"")]
    BadLocation(u32, String),
    #[error("duplicate microservice_id {0}")]
    DuplicateMicroservice(u32),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One dependency edge towards another microservice of the same service.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectivityEntry {
    pub target_microservice_id: u32,
    /// km, great-circle.
    pub geo_threshold: Option<f64>,
    /// ms, in the latency-embedding space.
    pub latency_threshold: Option<f64>,
}

/// The per-microservice property block, field names as in the
/// requirement descriptor schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlaProperties {
    /// MB.
    pub memory: u64,
    pub vcpus: u32,
    #[serde(default)]
    pub vgpus: u32,
    #[serde(default)]
    pub vtpus: u32,
    /// Mbps.
    #[serde(default)]
    pub bandwidth_in: u64,
    /// ms; together with `location`/`threshold` this becomes a
    /// service-to-user constraint.
    pub latency: Option<f64>,
    /// Named region from the registry file.
    pub area: Option<String>,
    /// "lat,lon" of the expected user position.
    pub location: Option<String>,
    /// km around `location`.
    pub threshold: Option<f64>,
    #[serde(default = "default_rigidness")]
    pub rigidness: f64,
    /// ms.
    #[serde(default = "default_convergence_time")]
    pub convergence_time: u64,
    pub virtualization: String,
    #[serde(default)]
    pub connectivity: Vec<ConnectivityEntry>,
}

fn default_rigidness() -> f64 {
    1.0
}

fn default_convergence_time() -> u64 {
    10_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlaConstraint {
    pub microservice_id: u32,
    pub properties: Vec<SlaProperties>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlaDocument {
    pub service_name: String,
    pub constraints: Vec<SlaConstraint>,
}

/// If no per-constraint threshold is given, fall back to the
/// microservice-level `threshold`, then to "no bound".
fn thr(explicit: Option<f64>, fallback: Option<f64>) -> f64 {
    explicit.or(fallback).unwrap_or(f64::INFINITY)
}

fn parse_location(ms: u32, s: &str) -> Result<GeoPoint, SlaError> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || SlaError::BadLocation(ms, s.to_owned());
    if parts.len() != 2 {
        return Err(bad());
    }
    let lat: f64 = parts[0].parse().map_err(|_| bad())?;
    let lon: f64 = parts[1].parse().map_err(|_| bad())?;
    GeoPoint::new(lat, lon).map_err(SlaError::Model)
}

impl SlaDocument {
    pub fn from_json(text: &str) -> Result<SlaDocument, SlaError> {
        serde_json::from_str(text).map_err(|e| SlaError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<SlaDocument, SlaError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Translate into the scheduler's requirement types.
    pub fn to_descriptor(&self) -> Result<ServiceDescriptor, SlaError> {
        let mut tasks = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.constraints {
            if !seen.insert(c.microservice_id) {
                return Err(SlaError::DuplicateMicroservice(c.microservice_id));
            }
            if c.properties.len() != 1 {
                return Err(SlaError::PropertyCount(c.microservice_id, c.properties.len()));
            }
            let p = &c.properties[0];
            let mut capacity = CapacityVector::new(p.vcpus as f64, p.memory);
            capacity.gpu_units = p.vgpus as u64;
            capacity.tpu_units = p.vtpus as u64;
            capacity.bandwidth_in_mbps = p.bandwidth_in;
            let mut task = TaskRequirements {
                microservice_id: c.microservice_id,
                capacity,
                latency_ms: p.latency,
                area: p.area.clone(),
                location: None,
                threshold_km: p.threshold,
                rigidness: p.rigidness,
                convergence_time_ms: p.convergence_time,
                virtualization: p.virtualization.clone(),
                s2s_constraints: Vec::new(),
                s2u_constraints: Vec::new(),
            };
            if let Some(loc) = &p.location {
                let point = parse_location(c.microservice_id, loc)?;
                task.location = Some(point);
                task.s2u_constraints.push(S2UConstraint {
                    user_endpoint: loc.clone(),
                    geo_target: point,
                    geo_threshold_km: p.threshold.unwrap_or(f64::INFINITY),
                    latency_threshold_ms: p.latency.unwrap_or(f64::INFINITY),
                    probe_count: 4,
                });
            }
            for edge in &p.connectivity {
                task.s2s_constraints.push(S2SConstraint {
                    target_microservice_id: edge.target_microservice_id,
                    geo_threshold_km: thr(edge.geo_threshold, p.threshold),
                    latency_threshold_ms: thr(edge.latency_threshold, p.latency),
                });
            }
            task.validate()?;
            tasks.push(task);
        }
        let descriptor = ServiceDescriptor {
            service_id: ServiceId::from(self.service_name.as_str()),
            tasks,
        };
        descriptor.validate()?;
        Ok(descriptor)
    }
}

/// Region registry file: region name -> convex polygon as [lat, lon]
/// vertex pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionRegistryFile {
    pub regions: BTreeMap<String, Vec<[f64; 2]>>,
}

pub fn load_regions(path: &Path) -> Result<BTreeMap<String, GeoZone>, SlaError> {
    let text = std::fs::read_to_string(path)?;
    parse_regions(&text)
}

pub fn parse_regions(text: &str) -> Result<BTreeMap<String, GeoZone>, SlaError> {
    let file: RegionRegistryFile =
        serde_json::from_str(text).map_err(|e| SlaError::Parse(e.to_string()))?;
    let mut out = BTreeMap::new();
    for (name, vertices) in file.regions {
        let points = vertices
            .iter()
            .map(|[lat, lon]| GeoPoint::new(*lat, *lon))
            .collect::<Result<Vec<_>, _>>()?;
        out.insert(name, GeoZone::new(points));
    }
    Ok(out)
}
