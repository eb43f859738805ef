// SPDX-License-Identifier: Apache-2.0

//! Virtual-time execution of one scenario.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::coords::VivaldiCoordinate;
use crate::model::{CapacityVector, ClusterId, S2SConstraint, S2UConstraint, ServiceDescriptor, ServiceId, TaskRequirements, WorkerId};
use crate::resource::{RegistrationRecord, TelemetryMsg};
use crate::scheduler::{Algorithm, SchedulerRegistry};
use crate::system::System;

use super::{cluster_zone, plant_workers, world_zone, PlantedProber, PlantedWorker, Scenario, SimError};

/// What one run produced, besides the CSVs.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub placements_ok: u32,
    pub placements_failed: u32,
    pub reschedules_local: u64,
    pub reschedules_root: u64,
    pub recovery_failed: u32,
    pub latency_checked: u32,
    pub latency_satisfied: u32,
    pub forward_messages: u64,
    pub retry_messages: u64,
    /// Wall-clock medians over all schedule operations, microseconds.
    pub median_root_calc_us: f64,
    pub median_cluster_calc_us: f64,
    pub median_total_calc_us: f64,
    pub metrics_path: PathBuf,
    pub timings_path: PathBuf,
}

impl RunReport {
    pub fn satisfied_ratio(&self) -> f64 {
        if self.latency_checked == 0 {
            return 1.0;
        }
        self.latency_satisfied as f64 / self.latency_checked as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    TelemetryTick,
    SweepTick,
    Deploy(u32),
    Fault(usize),
    Heal(String),
    End,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

pub fn run(scenario: &Scenario, out_dir: &Path) -> Result<RunReport, SimError> {
    scenario.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.csv");
    let timings_path = out_dir.join("timings.csv");
    let mut metrics = csv::Writer::from_path(&metrics_path)?;
    metrics.write_record([
        "time_ms", "event", "service", "microservice", "worker", "cluster", "forward_msgs",
        "retry_msgs", "satisfied",
    ])?;
    let mut timings = csv::Writer::from_path(&timings_path)?;
    timings.write_record(["service", "root_calc_us", "cluster_calc_us", "total_us"])?;

    // --- Build the system from the planted topology. ---
    let algorithm = Algorithm::parse(&scenario.scheduler)?;
    let telemetry_cfg = scenario.telemetry.clone().unwrap_or_default();
    let mut sys = System::new("root", SchedulerRegistry::new(algorithm), scenario.seed);
    sys.regions.insert("world".to_owned(), world_zone(scenario));
    let planted = plant_workers(scenario);
    for ci in 0..scenario.topology.clusters {
        let cid = ClusterId::from(format!("c{ci}").as_str());
        let zone = scenario.topology.cluster_zones.then(|| cluster_zone(scenario, ci));
        sys.add_cluster(&cid, None, zone, telemetry_cfg.clone())?;
    }
    for w in &planted {
        sys.register_worker(
            &ClusterId::from(w.cluster.as_str()),
            RegistrationRecord {
                id: WorkerId::from(w.name.as_str()),
                declared_capacity: CapacityVector::new(
                    scenario.topology.worker_cpu,
                    scenario.topology.worker_memory_mb,
                ),
                virtualizations: ["container".to_owned(), "mock".to_owned()].into(),
                geo: w.geo,
                registered_at: 0,
            },
            VivaldiCoordinate::at(w.position.clone()),
        )?;
    }

    let mut prober = PlantedProber::default();
    let mut user_rng = ChaCha8Rng::seed_from_u64(scenario.seed.wrapping_add(0x5eed));

    // --- Event queue on virtual time. ---
    let mut queue: BinaryHeap<Reverse<(u64, u64, Event)>> = BinaryHeap::new();
    let mut seq = 0u64;
    let push = |q: &mut BinaryHeap<_>, s: &mut u64, t: u64, e: Event| {
        q.push(Reverse((t, *s, e)));
        *s += 1;
    };
    for i in 0..scenario.workload.services {
        let t = (i as u64 + 1) * scenario.workload.deploy_interval_ms;
        push(&mut queue, &mut seq, t.min(scenario.duration_ms), Event::Deploy(i));
    }
    let mut t = telemetry_cfg.update_interval_ms;
    while t <= scenario.duration_ms {
        push(&mut queue, &mut seq, t, Event::TelemetryTick);
        push(&mut queue, &mut seq, t, Event::SweepTick);
        t += telemetry_cfg.update_interval_ms;
    }
    for (i, f) in scenario.faults.iter().enumerate() {
        push(&mut queue, &mut seq, f.at_ms(), Event::Fault(i));
        if let super::FaultSpec::ClusterPartition {
            cluster,
            heal_at_ms: Some(heal),
            ..
        } = f
        {
            push(&mut queue, &mut seq, *heal, Event::Heal(cluster.clone()));
        }
    }
    push(&mut queue, &mut seq, scenario.duration_ms, Event::End);

    // --- Bookkeeping. ---
    let mut report = RunReport {
        scenario: scenario.name.clone(),
        seed: scenario.seed,
        placements_ok: 0,
        placements_failed: 0,
        reschedules_local: 0,
        reschedules_root: 0,
        recovery_failed: 0,
        latency_checked: 0,
        latency_satisfied: 0,
        forward_messages: 0,
        retry_messages: 0,
        median_root_calc_us: 0.0,
        median_cluster_calc_us: 0.0,
        median_total_calc_us: 0.0,
        metrics_path: metrics_path.clone(),
        timings_path: timings_path.clone(),
    };
    let mut partitioned: BTreeSet<String> = BTreeSet::new();
    let mut crashed: BTreeSet<String> = BTreeSet::new();
    let mut telemetry_seq = 0u64;
    let mut root_us: Vec<f64> = Vec::new();
    let mut cluster_us: Vec<f64> = Vec::new();
    let mut total_us: Vec<f64> = Vec::new();

    while let Some(Reverse((now, _, event))) = queue.pop() {
        match event {
            Event::TelemetryTick => {
                telemetry_seq += 1;
                for w in &planted {
                    if partitioned.contains(&w.cluster) || crashed.contains(&w.name) {
                        continue;
                    }
                    let wid = WorkerId::from(w.name.as_str());
                    let used = sys.engine(&wid).map(|e| e.used()).unwrap_or_else(CapacityVector::zero);
                    let _ = sys.telemetry(
                        &ClusterId::from(w.cluster.as_str()),
                        &TelemetryMsg {
                            worker_id: wid,
                            used,
                            vivaldi: VivaldiCoordinate::at(w.position.clone()),
                            seq: telemetry_seq,
                        },
                        now,
                    );
                }
            }
            Event::SweepTick => {
                let results = sys.sweep_stale(&mut prober, now);
                for (old, res) in results {
                    record_recovery(&mut metrics, &mut report, now, old, &res)?;
                }
            }
            Event::Deploy(i) => {
                let before_root = sys.metrics.root_calc.len();
                let before_cluster = sys.metrics.cluster_calc.len();
                let before_fwd = sys.metrics.forward_messages;
                let before_retry = sys.metrics.retry_messages;
                let (descriptor, user_pos) =
                    build_service(scenario, i, &planted, &mut user_rng);
                let sid = descriptor.service_id.clone();
                if let (Some(pos), Some(_)) = (&user_pos, scenario.workload.latency_ms) {
                    prober.plant_user(&format!("user-{sid}"), pos.clone());
                }
                let outcome = sys.deploy_service(&descriptor, &mut prober, now);
                // A failed delegation leaves no trace entries behind;
                // only real scheduling work lands in the timing stats.
                if sys.metrics.root_calc.len() > before_root {
                    let d_root: f64 = sys.metrics.root_calc[before_root..]
                        .iter()
                        .map(|d| d.as_secs_f64() * 1e6)
                        .sum();
                    let d_cluster: f64 = sys.metrics.cluster_calc[before_cluster..]
                        .iter()
                        .map(|d| d.as_secs_f64() * 1e6)
                        .sum();
                    root_us.push(d_root);
                    cluster_us.push(d_cluster);
                    total_us.push(d_root + d_cluster);
                    timings.write_record([
                        sid.to_string(),
                        format!("{d_root:.3}"),
                        format!("{d_cluster:.3}"),
                        format!("{:.3}", d_root + d_cluster),
                    ])?;
                }
                match outcome {
                    Ok(rep) => {
                        report.placements_ok += 1;
                        for p in &rep.placements {
                            let satisfied = match (&user_pos, scenario.workload.latency_ms) {
                                (Some(pos), Some(bound)) => {
                                    report.latency_checked += 1;
                                    let w = sys
                                        .manager(&ClusterId::from(
                                            p.cluster_path.last().unwrap().as_str(),
                                        ))
                                        .and_then(|m| m.node.workers.get(&p.worker_id));
                                    let d = w
                                        .map(|w| {
                                            w.vivaldi
                                                .position
                                                .iter()
                                                .zip(pos.iter())
                                                .map(|(a, b)| (a - b) * (a - b))
                                                .sum::<f64>()
                                                .sqrt()
                                        })
                                        .unwrap_or(f64::INFINITY);
                                    let ok = d <= bound;
                                    if ok {
                                        report.latency_satisfied += 1;
                                    }
                                    if ok { "1" } else { "0" }
                                }
                                _ => "-",
                            };
                            metrics.write_record([
                                now.to_string(),
                                "deploy".into(),
                                sid.to_string(),
                                p.microservice_id.to_string(),
                                p.worker_id.to_string(),
                                p.cluster_path.last().unwrap().to_string(),
                                (sys.metrics.forward_messages - before_fwd).to_string(),
                                (sys.metrics.retry_messages - before_retry).to_string(),
                                satisfied.into(),
                            ])?;
                        }
                        if scenario.workload.stop_after_placement {
                            let _ = sys.stop_service(&sid, now);
                        }
                    }
                    Err(e) => {
                        report.placements_failed += 1;
                        metrics.write_record([
                            now.to_string(),
                            "deploy_failed".into(),
                            sid.to_string(),
                            "-".into(),
                            "-".into(),
                            format!("{e}"),
                            "0".into(),
                            "0".into(),
                            "-".into(),
                        ])?;
                    }
                }
            }
            Event::Fault(i) => match &scenario.faults[i] {
                super::FaultSpec::WorkerCrash { worker, .. } => {
                    crashed.insert(worker.clone());
                    metrics.write_record([
                        now.to_string(),
                        "worker_crash".into(),
                        "-".into(),
                        "-".into(),
                        worker.clone(),
                        "-".into(),
                        "0".into(),
                        "0".into(),
                        "-".into(),
                    ])?;
                    let results =
                        sys.fail_worker(&WorkerId::from(worker.as_str()), &mut prober, now);
                    for (old, res) in results {
                        record_recovery(&mut metrics, &mut report, now, old, &res)?;
                    }
                }
                super::FaultSpec::ClusterPartition { cluster, .. } => {
                    partitioned.insert(cluster.clone());
                    metrics.write_record([
                        now.to_string(),
                        "cluster_partition".into(),
                        "-".into(),
                        "-".into(),
                        "-".into(),
                        cluster.clone(),
                        "0".into(),
                        "0".into(),
                        "-".into(),
                    ])?;
                }
            },
            Event::Heal(cluster) => {
                partitioned.remove(&cluster);
                metrics.write_record([
                    now.to_string(),
                    "cluster_heal".into(),
                    "-".into(),
                    "-".into(),
                    "-".into(),
                    cluster,
                    "0".into(),
                    "0".into(),
                    "-".into(),
                ])?;
            }
            Event::End => break,
        }
    }

    report.forward_messages = sys.metrics.forward_messages;
    report.retry_messages = sys.metrics.retry_messages;
    report.reschedules_local = sys.metrics.local_reschedules;
    report.reschedules_root = sys.metrics.root_escalations;
    report.median_root_calc_us = median(&mut root_us);
    report.median_cluster_calc_us = median(&mut cluster_us);
    report.median_total_calc_us = median(&mut total_us);

    metrics.write_record([
        scenario.duration_ms.to_string(),
        "end".into(),
        report.placements_ok.to_string(),
        report.placements_failed.to_string(),
        "-".into(),
        "-".into(),
        report.forward_messages.to_string(),
        report.retry_messages.to_string(),
        report.latency_satisfied.to_string(),
    ])?;
    metrics.flush()?;
    timings.flush()?;
    Ok(report)
}

fn record_recovery(
    metrics: &mut csv::Writer<std::fs::File>,
    report: &mut RunReport,
    now: u64,
    old: crate::model::InstanceId,
    res: &Result<crate::model::InstanceId, crate::system::SystemError>,
) -> Result<(), SimError> {
    let (event, detail) = match res {
        Ok(new_id) => {
            ("rescheduled".to_owned(), format!("{}->{}", old.0, new_id.0))
        }
        Err(e) => {
            report.recovery_failed += 1;
            ("reschedule_failed".to_owned(), format!("{e}"))
        }
    };
    metrics.write_record([
        now.to_string(),
        event,
        detail,
        "-".into(),
        "-".into(),
        "-".into(),
        "0".into(),
        "0".into(),
        "-".into(),
    ])?;
    Ok(())
}

/// One single-task service for deploy event `i`, plus the planted user
/// position when the workload carries a latency bound.
fn build_service(
    scenario: &Scenario,
    i: u32,
    planted: &[PlantedWorker],
    rng: &mut ChaCha8Rng,
) -> (ServiceDescriptor, Option<Vec<f64>>) {
    let mut task = TaskRequirements::basic(
        0,
        CapacityVector::new(scenario.workload.vcpus, scenario.workload.memory_mb),
        "container",
    );
    task.area = scenario.workload.area.clone();
    let mut user_pos = None;
    if let Some(bound) = scenario.workload.latency_ms {
        // Plant the user right next to a random worker so at least one
        // feasible placement exists by construction.
        let anchor = &planted[rng.random_range(0..planted.len())];
        let jitter = bound / 4.0;
        let pos: Vec<f64> = anchor
            .position
            .iter()
            .map(|p| p + rng.random_range(-jitter..jitter) / 3.0_f64.sqrt())
            .collect();
        task.s2u_constraints.push(S2UConstraint {
            user_endpoint: format!("user-svc{i}"),
            geo_target: anchor.geo,
            geo_threshold_km: scenario.workload.geo_threshold_km.unwrap_or(f64::INFINITY),
            latency_threshold_ms: bound,
            probe_count: 4,
        });
        task.latency_ms = Some(bound);
        user_pos = Some(pos);
    }
    let mut tasks = vec![task];
    if let Some(bound) = scenario.workload.s2s_latency_ms {
        let mut tail = TaskRequirements::basic(
            1,
            CapacityVector::new(scenario.workload.vcpus, scenario.workload.memory_mb),
            "container",
        );
        tail.area = scenario.workload.area.clone();
        tail.s2s_constraints.push(S2SConstraint {
            target_microservice_id: 0,
            geo_threshold_km: scenario.workload.geo_threshold_km.unwrap_or(f64::INFINITY),
            latency_threshold_ms: bound,
        });
        tasks.push(tail);
    }
    (
        ServiceDescriptor {
            service_id: ServiceId::from(format!("svc{i}").as_str()),
            tasks,
        },
        user_pos,
    )
}
