//! End-to-end acceptance checks: one line of output per guaranteed
//! property (`cargo test --test acceptance -- --nocapture` shows them
//! all). Each check compares the shipped behaviour against an
//! independent oracle or a trend the system is expected to reproduce.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use oak_core::coords::{trilaterate, RttSample, VivaldiConfig, VivaldiCoordinate};
use oak_core::lifecycle::{transition, InstanceState, LifecycleEvent};
use oak_core::model::{
    CapacityVector, ClusterNode, GeoPoint, InfrastructureTree, S2SConstraint, S2UConstraint,
    ServiceDescriptor, ServiceId, TaskRequirements, WorkerSnapshot,
};
use oak_core::overlay::{
    ConversionTable, InstanceBinding, LinkState, OverlayAddr, Policy,
    ServiceDirectory, TunnelSet,
};
use oak_core::resource::{RegistrationRecord, TelemetryConfig, TelemetryMsg};
use oak_core::scheduler::{
    delegate, ldp_select, rom_select, Algorithm, DelegationEnv, LatencyProber, NoProber,
    RomStrategy, ScheduleRequest, SchedulerRegistry,
};
use oak_core::sim::runner::{run, RunReport};
use oak_core::sim::sweep::apply_param;
use oak_core::sim::Scenario;
use oak_core::system::System;
use oak_core::{ClusterId, InstanceId, WorkerId};

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

// Haversine, written out independently of the library's version.
fn haversine_km(a: &GeoPoint, b: &GeoPoint) -> f64 {
    let (la1, lo1) = (a.latitude_deg().to_radians(), a.longitude_deg().to_radians());
    let (la2, lo2) = (b.latitude_deg().to_radians(), b.longitude_deg().to_radians());
    let h = ((la2 - la1) / 2.0).sin().powi(2)
        + la1.cos() * la2.cos() * ((lo2 - lo1) / 2.0).sin().powi(2);
    2.0 * 6371.0 * h.sqrt().min(1.0).asin()
}

fn p95(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values[(values.len() * 95) / 100 - 1]
}

// ---------------------------------------------------------------------
// 1. Resource-only selection vs. exhaustive oracle.

fn fuzz_snapshot(i: usize, rng: &mut ChaCha8Rng) -> WorkerSnapshot {
    let capacity = CapacityVector::new(
        rng.random_range(0.5..16.0),
        rng.random_range(256..32_768),
    );
    // Occasionally report more usage than capacity; such a worker must
    // never be selected.
    let used = CapacityVector::new(
        capacity.cpu_cores * rng.random_range(0.0..1.1),
        (capacity.memory_mb as f64 * rng.random_range(0.0..1.1)) as u64,
    );
    let mut virts = BTreeSet::new();
    for v in ["container", "unikernel", "mock"] {
        if rng.random_bool(0.5) {
            virts.insert(v.to_owned());
        }
    }
    if virts.is_empty() {
        virts.insert("container".to_owned());
    }
    WorkerSnapshot {
        worker_id: WorkerId::from(format!("w{i:02}").as_str()),
        capacity,
        used,
        geo: GeoPoint::new(48.0, 11.0).unwrap(),
        vivaldi: VivaldiCoordinate::origin(3),
        virtualizations: virts,
        last_update: 0,
    }
}

fn oracle_feasible(w: &WorkerSnapshot, task: &TaskRequirements) -> bool {
    w.used.cpu_cores <= w.capacity.cpu_cores
        && w.used.memory_mb <= w.capacity.memory_mb
        && w.capacity.cpu_cores - w.used.cpu_cores >= task.capacity.cpu_cores
        && w.capacity.memory_mb - w.used.memory_mb >= task.capacity.memory_mb
        && w.virtualizations.contains(&task.virtualization)
}

fn resource_match_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..1000 {
        let n = rng.random_range(1..=20);
        let workers: Vec<WorkerSnapshot> = (0..n).map(|i| fuzz_snapshot(i, &mut rng)).collect();
        let virt = ["container", "unikernel", "mock"][rng.random_range(0..3)];
        let task = TaskRequirements::basic(
            0,
            CapacityVector::new(rng.random_range(0.5..8.0), rng.random_range(64..8192)),
            virt,
        );

        let expected_first = workers
            .iter()
            .find(|w| oracle_feasible(w, &task))
            .map(|w| w.worker_id.clone());
        assert_eq!(
            rom_select(&workers, &task, RomStrategy::FirstFit).ok(),
            expected_first
        );

        let expected_best = workers
            .iter()
            .filter(|w| oracle_feasible(w, &task))
            .map(|w| {
                let slack = (w.capacity.cpu_cores - w.used.cpu_cores - task.capacity.cpu_cores)
                    + ((w.capacity.memory_mb - w.used.memory_mb) as f64
                        - task.capacity.memory_mb as f64);
                (w.worker_id.clone(), slack)
            })
            .fold(None::<(WorkerId, f64)>, |best, cand| match best {
                None => Some(cand),
                Some(b) if cand.1 > b.1 || (cand.1 == b.1 && cand.0 < b.0) => Some(cand),
                b => b,
            })
            .map(|(id, _)| id);
        assert_eq!(
            rom_select(&workers, &task, RomStrategy::BestSlack).ok(),
            expected_best
        );
    }
    assert!(start.elapsed().as_secs() < 10, "took {:?}", start.elapsed());
}

// ---------------------------------------------------------------------
// 2. Latency- and distance-aware filtering vs. exhaustive oracle.

// A threshold strictly between two consecutive sorted distances (or
// outside the range), so no worker sits on the boundary.
fn pick_threshold(rng: &mut ChaCha8Rng, distances: &[f64]) -> f64 {
    let mut sorted = distances.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = rng.random_range(0..=sorted.len());
    if k == 0 {
        (sorted[0] * 0.5).max(sorted[0] - 1.0)
    } else if k == sorted.len() {
        sorted[k - 1] + 10.0
    } else {
        (sorted[k - 1] + sorted[k]) / 2.0
    }
}

fn latency_filter_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for case in 0..500u64 {
        let n = rng.random_range(4..=15);
        let positions: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..3).map(|_| rng.random_range(0.0..100.0)).collect())
            .collect();
        let geos: Vec<GeoPoint> = (0..n)
            .map(|_| {
                GeoPoint::new(rng.random_range(45.0..53.0), rng.random_range(5.0..15.0)).unwrap()
            })
            .collect();
        let workers: Vec<WorkerSnapshot> = (0..n)
            .map(|i| {
                let virt = if rng.random_bool(0.85) { "container" } else { "unikernel" };
                WorkerSnapshot {
                    worker_id: WorkerId::from(format!("w{i:02}").as_str()),
                    capacity: CapacityVector::new(
                        rng.random_range(2.0..10.0),
                        rng.random_range(1024..16_384),
                    ),
                    used: CapacityVector::zero(),
                    geo: geos[i],
                    vivaldi: VivaldiCoordinate::at(positions[i].clone()),
                    virtualizations: [virt.to_owned()].into(),
                    last_update: 0,
                }
            })
            .collect();
        let mut task = TaskRequirements::basic(
            0,
            CapacityVector::new(rng.random_range(1.0..6.0), rng.random_range(512..8192)),
            "container",
        );

        // Placed dependency targets with planted coordinates.
        let mut placed = BTreeMap::new();
        for ms in [10u32, 11] {
            let pos: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..100.0)).collect();
            placed.insert(
                ms,
                oak_core::scheduler::PlacedTarget {
                    geo: GeoPoint::new(
                        rng.random_range(45.0..53.0),
                        rng.random_range(5.0..15.0),
                    )
                    .unwrap(),
                    vivaldi: VivaldiCoordinate::at(pos),
                },
            );
        }
        for _ in 0..rng.random_range(0..=2) {
            let target = if rng.random_bool(0.5) { 10 } else { 11 };
            let t = &placed[&target];
            let geo_ds: Vec<f64> = workers.iter().map(|w| haversine_km(&w.geo, &t.geo)).collect();
            let lat_ds: Vec<f64> = workers
                .iter()
                .map(|w| euclid(&w.vivaldi.position, &t.vivaldi.position))
                .collect();
            task.s2s_constraints.push(S2SConstraint {
                target_microservice_id: target,
                geo_threshold_km: pick_threshold(&mut rng, &geo_ds),
                latency_threshold_ms: pick_threshold(&mut rng, &lat_ds),
            });
        }
        let mut user_planted: Option<Vec<f64>> = None;
        if rng.random_bool(0.8) {
            let user: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..100.0)).collect();
            let geo_target =
                GeoPoint::new(rng.random_range(45.0..53.0), rng.random_range(5.0..15.0)).unwrap();
            let geo_ds: Vec<f64> =
                workers.iter().map(|w| haversine_km(&w.geo, &geo_target)).collect();
            let lat_ds: Vec<f64> = workers
                .iter()
                .map(|w| euclid(&w.vivaldi.position, &user))
                .collect();
            task.s2u_constraints.push(S2UConstraint {
                user_endpoint: "user".to_owned(),
                geo_target,
                geo_threshold_km: pick_threshold(&mut rng, &geo_ds),
                latency_threshold_ms: pick_threshold(&mut rng, &lat_ds),
                probe_count: 4,
            });
            user_planted = Some(user);
        }

        struct ExactProber(Vec<f64>);
        impl LatencyProber for ExactProber {
            fn ping(&mut self, worker: &WorkerSnapshot, _endpoint: &str) -> Option<f64> {
                Some(euclid(&worker.vivaldi.position, &self.0))
            }
        }

        let mut lib_rng = ChaCha8Rng::seed_from_u64(9000 + case);
        let got = match user_planted.clone() {
            Some(user) => ldp_select(&workers, &task, &placed, &mut ExactProber(user), &mut lib_rng),
            None => ldp_select(&workers, &task, &placed, &mut NoProber, &mut lib_rng),
        };

        // Oracle: re-filter every stage exhaustively.
        let mut survivors: Vec<usize> = (0..n)
            .filter(|&i| oracle_feasible(&workers[i], &task))
            .collect();
        let mut oracle_rng = ChaCha8Rng::seed_from_u64(9000 + case);
        let mut expected = if survivors.is_empty() { Err(()) } else { Ok(()) };
        if expected.is_ok() {
            for c in &task.s2s_constraints {
                let t = &placed[&c.target_microservice_id];
                survivors.retain(|&i| {
                    haversine_km(&workers[i].geo, &t.geo) <= c.geo_threshold_km
                        && euclid(&workers[i].vivaldi.position, &t.vivaldi.position)
                            <= c.latency_threshold_ms
                });
                if survivors.is_empty() {
                    expected = Err(());
                    break;
                }
            }
        }
        if expected.is_ok() {
            for c in &task.s2u_constraints {
                let user = user_planted.as_ref().unwrap();
                // Anchor choice mirrors the implementation contract:
                // id-sorted survivor pool shuffled by the shared seed.
                let mut pool = survivors.clone();
                pool.sort_by(|&a, &b| workers[a].worker_id.cmp(&workers[b].worker_id));
                pool.shuffle(&mut oracle_rng);
                let take = c.probe_count.max(3).min(pool.len());
                let samples: Vec<RttSample> = pool[..take]
                    .iter()
                    .map(|&i| RttSample {
                        peer_coordinate: workers[i].vivaldi.clone(),
                        measured_rtt_ms: euclid(&workers[i].vivaldi.position, user).max(1e-3),
                    })
                    .collect();
                let est = trilaterate(&samples).ok();
                survivors.retain(|&i| {
                    haversine_km(&workers[i].geo, &c.geo_target) <= c.geo_threshold_km
                        && match &est {
                            Some(u) => {
                                euclid(&workers[i].vivaldi.position, &u.position)
                                    <= c.latency_threshold_ms
                            }
                            None => true,
                        }
                });
                if survivors.is_empty() {
                    expected = Err(());
                    break;
                }
            }
        }

        match (&got, expected) {
            (Ok(set), Ok(())) => {
                let want: BTreeSet<WorkerId> = survivors
                    .iter()
                    .map(|&i| workers[i].worker_id.clone())
                    .collect();
                assert_eq!(*set, want, "case {case}");
            }
            (Err(_), Err(())) => {}
            (got, expected) => panic!("case {case}: got {got:?}, expected-ok={expected:?}"),
        }
    }
    assert!(start.elapsed().as_secs() < 60, "took {:?}", start.elapsed());
}

// ---------------------------------------------------------------------
// 3. Trilateration recovery, exact and noisy.

fn trilateration_recovery() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut exact_hits = 0;
    for _ in 0..100 {
        let count = rng.random_range(4..=8);
        let anchors: Vec<Vec<f64>> = (0..count)
            .map(|_| (0..3).map(|_| rng.random_range(0.0..144.0)).collect())
            .collect();
        let planted: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..144.0)).collect();
        let samples: Vec<RttSample> = anchors
            .iter()
            .map(|a| RttSample {
                peer_coordinate: VivaldiCoordinate::at(a.clone()),
                measured_rtt_ms: euclid(&planted, a),
            })
            .collect();
        let est = trilaterate(&samples).unwrap();
        if euclid(&est.position, &planted) <= 1e-3 {
            exact_hits += 1;
        }
    }
    assert!(exact_hits >= 99, "only {exact_hits}/100 exact recoveries");

    let mut rel_errors = Vec::new();
    for _ in 0..100 {
        // Noisy ranging needs more anchors to average the noise out.
        let count = rng.random_range(5..=10);
        let anchors: Vec<Vec<f64>> = (0..count)
            .map(|_| (0..3).map(|_| rng.random_range(0.0..144.0)).collect())
            .collect();
        let planted: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..144.0)).collect();
        let samples: Vec<RttSample> = anchors
            .iter()
            .map(|a| RttSample {
                peer_coordinate: VivaldiCoordinate::at(a.clone()),
                measured_rtt_ms: euclid(&planted, a) * rng.random_range(0.95..1.05),
            })
            .collect();
        let est = trilaterate(&samples).unwrap();
        // Predicted vs. true latency towards a far-enough probe point.
        let target: Vec<f64> = loop {
            let t: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..144.0)).collect();
            if euclid(&planted, &t) >= 20.0 {
                break t;
            }
        };
        let actual = euclid(&planted, &target);
        let predicted = euclid(&est.position, &target);
        rel_errors.push((predicted - actual).abs() / actual);
    }
    let p = p95(&mut rel_errors);
    assert!(p <= 0.10, "p95 predicted-latency error {p:.3}");
}

// ---------------------------------------------------------------------
// 4. Coordinate convergence on a synthetic mesh.

fn coordinate_convergence() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let n = 50;
    let planted: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..3).map(|_| rng.random_range(0.0..100.0)).collect())
        .collect();
    let mut estimates: Vec<VivaldiCoordinate> =
        (0..n).map(|_| VivaldiCoordinate::origin(3)).collect();
    let cfg = VivaldiConfig::default();
    for round in 0..200u64 {
        for i in 0..n {
            let j = rng.random_range(0..n);
            if i == j {
                continue;
            }
            let rtt = euclid(&planted[i], &planted[j]).max(0.1);
            let sample = RttSample {
                peer_coordinate: estimates[j].clone(),
                measured_rtt_ms: rtt,
            };
            estimates[i] = estimates[i]
                .update(&sample, &cfg, round * 10_000 + (i * n + j) as u64)
                .unwrap();
        }
    }
    let mut rel = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let actual = euclid(&planted[i], &planted[j]).max(0.1);
            let predicted = estimates[i].distance_to(&estimates[j]).unwrap();
            rel.push((predicted - actual).abs() / actual);
        }
    }
    rel.sort_by(f64::total_cmp);
    let median = rel[rel.len() / 2];
    assert!(median <= 0.15, "median relative error {median:.3}");
}

// ---------------------------------------------------------------------
// 5. Interior minimum of schedule time across cluster splits.

fn scenario_path(name: &str) -> String {
    format!("{}/scenarios/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn run_to_tmp(scenario: &Scenario) -> RunReport {
    let dir = tempfile::tempdir().unwrap();
    run(scenario, dir.path()).unwrap()
}

fn cluster_split_interior_minimum() {
    let base = Scenario::load(Path::new(&scenario_path("cluster-split.json"))).unwrap();
    let splits = ["1x45", "3x15", "9x5", "15x3", "45x1"];
    let medians: Vec<f64> = splits
        .iter()
        .map(|s| {
            let report = run_to_tmp(&apply_param(&base, "split", s).unwrap());
            assert_eq!(report.placements_failed, 0, "split {s}");
            report.median_total_calc_us
        })
        .collect();
    let interior = medians[1..4].iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(
        interior < medians[0] && interior < medians[4],
        "no interior minimum: {medians:?}"
    );
}

// ---------------------------------------------------------------------
// 6. Scaling trends over worker counts.

fn scaling_trends() {
    let base = Scenario::load(Path::new(&scenario_path("scaling.json"))).unwrap();
    let sizes = ["10", "50", "100", "250", "500"];
    let mut ldp_medians = Vec::new();
    let mut checked = 0u32;
    let mut satisfied = 0u32;
    for size in sizes {
        let sized = apply_param(&base, "workers", size).unwrap();
        let ldp = run_to_tmp(&sized);
        let rom = run_to_tmp(&apply_param(&sized, "scheduler", "rom_best_slack").unwrap());
        assert!(ldp.placements_ok > 0 && rom.placements_ok > 0, "size {size}");
        assert!(
            rom.median_total_calc_us < ldp.median_total_calc_us,
            "size {size}: resource-match {:.1}us not below latency-aware {:.1}us",
            rom.median_total_calc_us,
            ldp.median_total_calc_us
        );
        checked += ldp.latency_checked;
        satisfied += ldp.latency_satisfied;
        ldp_medians.push(ldp.median_total_calc_us);
    }
    for pair in ldp_medians.windows(2) {
        assert!(
            pair[1] >= pair[0],
            "latency-aware medians not monotone: {ldp_medians:?}"
        );
    }
    assert!(
        ldp_medians[4] < 1_000_000.0,
        "median at 500 workers is {:.0}us",
        ldp_medians[4]
    );
    let ratio = satisfied as f64 / checked as f64;
    assert!(ratio >= 0.95, "latency bound satisfied on {ratio:.3} of placements");
}

// ---------------------------------------------------------------------
// 7. Lifecycle transition safety.

fn lifecycle_transition_safety() {
    use InstanceState::*;
    use LifecycleEvent::*;
    let states = [Requested, Scheduled, Running, Terminated, Failed];
    let events = [Placed, Started, Stopped, Errored];
    let legal: BTreeMap<(String, String), InstanceState> = [
        ((Requested, Placed), Scheduled),
        ((Requested, Errored), Failed),
        ((Scheduled, Started), Running),
        ((Scheduled, Errored), Failed),
        ((Running, Stopped), Terminated),
        ((Running, Errored), Failed),
    ]
    .into_iter()
    .map(|((s, e), to)| ((format!("{s:?}"), format!("{e:?}")), to))
    .collect();

    for s in states {
        for e in events {
            let key = (format!("{s:?}"), format!("{e:?}"));
            match transition(s, e) {
                Ok(to) => assert_eq!(legal.get(&key), Some(&to), "{key:?}"),
                Err(_) => assert!(!legal.contains_key(&key), "{key:?} should be legal"),
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut state = Requested;
    for _ in 0..10_000 {
        let e = events[rng.random_range(0..events.len())];
        let key = (format!("{state:?}"), format!("{e:?}"));
        match transition(state, e) {
            Ok(next) => {
                assert!(!state.is_final(), "left absorbing state {state:?}");
                assert_eq!(legal.get(&key), Some(&next));
                state = next;
            }
            Err(_) => assert!(!legal.contains_key(&key)),
        }
        if state.is_final() && rng.random_bool(0.3) {
            state = Requested; // fresh instance
        }
    }
}

// ---------------------------------------------------------------------
// 8. Local-first failure recovery, escalation only when needed.

fn record(id: &str, cpu: f64, mem: u64) -> RegistrationRecord {
    RegistrationRecord {
        id: WorkerId::from(id),
        declared_capacity: CapacityVector::new(cpu, mem),
        virtualizations: ["container".to_owned()].into(),
        geo: GeoPoint::new(48.1, 11.6).unwrap(),
        registered_at: 0,
    }
}

fn three_cluster_system(workers_per_cluster: &[usize]) -> System {
    let mut sys = System::new("root", SchedulerRegistry::new(Algorithm::RomBestSlack), 7);
    for (ci, n) in workers_per_cluster.iter().enumerate() {
        let cid = ClusterId::from(format!("c{ci}").as_str());
        sys.add_cluster(&cid, None, None, TelemetryConfig::default()).unwrap();
        for wi in 0..*n {
            sys.register_worker(
                &cid,
                record(&format!("c{ci}w{wi}"), 8.0, 16_384),
                VivaldiCoordinate::origin(3),
            )
            .unwrap();
        }
    }
    sys
}

fn one_task(id: &str, cpu: f64) -> ServiceDescriptor {
    ServiceDescriptor {
        service_id: ServiceId::from(id),
        tasks: vec![TaskRequirements::basic(
            0,
            CapacityVector::new(cpu, 512),
            "container",
        )],
    }
}

// Test workers are named "c{cluster}w{index}".
fn cluster_of(w: &WorkerId) -> ClusterId {
    let name = w.to_string();
    ClusterId::from(name.split('w').next().unwrap())
}

fn failure_recovery_locality() {
    // Local-feasible case: the worker goes silent, staleness marks it
    // dead, and the instance is rescheduled inside its own cluster with
    // zero root involvement.
    let mut sys = three_cluster_system(&[3, 1, 1]);
    let report = sys.deploy_service(&one_task("svc", 2.0), &mut NoProber, 0).unwrap();
    let victim = report.placements[0].worker_id.clone();
    let old_instance = report.placements[0].instance_id;
    assert_eq!(Some(cluster_of(&victim)), Some(ClusterId::from("c0")));

    let workers: Vec<WorkerId> = (0..3)
        .map(|i| WorkerId::from(format!("c0w{i}").as_str()))
        .chain([WorkerId::from("c1w0"), WorkerId::from("c2w0")])
        .collect();
    for tick in 1..=3u64 {
        for w in &workers {
            if *w == victim {
                continue; // crashed: silent from t=0
            }
            let used = sys.engine(w).unwrap().used();
            let cid = cluster_of(w);
            sys.telemetry(
                &cid,
                &TelemetryMsg {
                    worker_id: w.clone(),
                    used,
                    vivaldi: VivaldiCoordinate::origin(3),
                    seq: tick,
                },
                tick * 1000,
            )
            .unwrap();
        }
    }
    // Default staleness horizon is 3000 ms of silence.
    let results = sys.sweep_stale(&mut NoProber, 3100);
    assert_eq!(results.len(), 1);
    assert_eq!(results[0].0, old_instance);
    let new_id = results[0].1.as_ref().expect("local respawn");
    let new_worker = sys.instance_state(*new_id).unwrap().worker_id.clone();
    assert_ne!(new_worker, victim);
    assert_eq!(Some(cluster_of(&new_worker)), Some(ClusterId::from("c0")));
    assert_eq!(sys.metrics.local_reschedules, 1);
    assert_eq!(sys.metrics.root_escalations, 0, "root was messaged");

    // Saturated-origin case: c0's only worker dies while the sibling
    // clusters still have headroom; recovery must go through the root.
    let mut sys = three_cluster_system(&[1, 1, 1]);
    let report = sys.deploy_service(&one_task("svc", 0.5), &mut NoProber, 0).unwrap();
    let victim = report.placements[0].worker_id.clone();
    assert_eq!(Some(cluster_of(&victim)), Some(ClusterId::from("c0")));
    sys.deploy_service(&one_task("filler1", 7.0), &mut NoProber, 0).unwrap();
    sys.deploy_service(&one_task("filler2", 7.0), &mut NoProber, 0).unwrap();
    let results = sys.fail_worker(&victim, &mut NoProber, 10);
    assert_eq!(results.len(), 1);
    let new_id = results[0].1.as_ref().expect("escalated respawn");
    let new_worker = sys.instance_state(*new_id).unwrap().worker_id.clone();
    assert_ne!(Some(cluster_of(&new_worker)), Some(ClusterId::from("c0")));
    assert_eq!(sys.metrics.local_reschedules, 0);
    assert_eq!(sys.metrics.root_escalations, 1);
}

// ---------------------------------------------------------------------
// 9. Overlay: LRU links, round-robin, closest, make-before-break.

fn overlay_properties() {
    // (a) Active-link cap with LRU demotion, against a reference model.
    let k = 5;
    let mut tunnels = TunnelSet::new(k);
    let mut reference: BTreeMap<WorkerId, u64> = BTreeMap::new(); // active -> last_used
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    for now in 0..10_000u64 {
        let peer = WorkerId::from(format!("p{:02}", rng.random_range(0..30)).as_str());
        if rng.random_bool(0.7) {
            tunnels.open_link(&peer, now);
            if !reference.contains_key(&peer) && reference.len() >= k {
                let victim = reference
                    .iter()
                    .min_by_key(|(id, last)| (**last, (*id).clone()))
                    .map(|(id, _)| id.clone())
                    .unwrap();
                reference.remove(&victim);
            }
            reference.insert(peer, now);
        } else {
            tunnels.touch(&peer, now);
            if let Some(last) = reference.get_mut(&peer) {
                *last = now;
            }
        }
        assert!(tunnels.active_count() <= k);
        let active: BTreeSet<&WorkerId> = tunnels
            .links
            .iter()
            .filter(|(_, l)| l.state == LinkState::Active)
            .map(|(id, _)| id)
            .collect();
        let expected: BTreeSet<&WorkerId> = reference.keys().collect();
        assert_eq!(active, expected, "diverged at step {now}");
    }

    // (b) Round-robin fairness through a worker-side table.
    let service = ServiceId::from("svc");
    let mut dir = ServiceDirectory::new();
    let (rr_ip, closest_ip) = dir.register_service(&service, "svc");
    let bind = |i: u64, pos: [f64; 3]| InstanceBinding {
        instance_id: InstanceId(i),
        instance_ip: OverlayAddr(0x0100_0000 + i as u32),
        node: WorkerId::from(format!("n{i}").as_str()),
        node_endpoint: String::new(),
        vivaldi: VivaldiCoordinate::at(pos.to_vec()),
    };
    for i in 0..3 {
        dir.bind_instance(&service, bind(i, [i as f64 * 10.0, 0.0, 0.0]));
    }
    let mut table = ConversionTable::new(WorkerId::from("client"), VivaldiCoordinate::origin(3));
    let mut counts: BTreeMap<InstanceId, u32> = BTreeMap::new();
    for _ in 0..300 {
        let b = table.resolve(rr_ip, Policy::RoundRobin, &mut dir).unwrap();
        *counts.entry(b.instance_id).or_default() += 1;
    }
    assert_eq!(counts.len(), 3);
    assert!(counts.values().all(|&c| c == 100), "{counts:?}");

    // (c) Closest picks the embedded-distance argmin.
    let mut rng = ChaCha8Rng::seed_from_u64(910);
    for case in 0..1000 {
        let m = rng.random_range(1..=6);
        let mut dir = ServiceDirectory::new();
        let (_, closest_ip) = dir.register_service(&service, "svc");
        let mut positions = Vec::new();
        for i in 0..m {
            let pos: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..100.0)).collect();
            positions.push(pos.clone());
            dir.bind_instance(
                &service,
                InstanceBinding {
                    instance_id: InstanceId(i),
                    instance_ip: OverlayAddr(0x0100_0000 + i as u32),
                    node: WorkerId::from(format!("n{i}").as_str()),
                    node_endpoint: String::new(),
                    vivaldi: VivaldiCoordinate::at(pos),
                },
            );
        }
        let local: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..100.0)).collect();
        let mut table =
            ConversionTable::new(WorkerId::from("client"), VivaldiCoordinate::at(local.clone()));
        let got = table.resolve(closest_ip, Policy::Closest, &mut dir).unwrap();
        let want = (0..m)
            .min_by(|&a, &b| {
                euclid(&positions[a as usize], &local)
                    .total_cmp(&euclid(&positions[b as usize], &local))
            })
            .unwrap();
        assert_eq!(got.instance_id, InstanceId(want), "case {case}");
    }

    // (d) Make-before-break: a resolving client never observes an empty
    // binding set across 50 scripted migrations.
    let mut sys = three_cluster_system(&[1, 1]);
    let report = sys.deploy_service(&one_task("svc", 1.0), &mut NoProber, 0).unwrap();
    let mut current = report.placements[0].instance_id;
    let addr = sys.directory.resolve_name("svc.round_robin").unwrap();
    let client = WorkerId::from("client");
    for step in 0..50u64 {
        current = sys.migrate(current, &mut NoProber, 100 + step).unwrap();
        let bindings = sys.directory.resolve_query(addr, &client).expect("resolvable");
        assert_eq!(bindings.len(), 1, "step {step}");
        assert_eq!(bindings[0].instance_id, current);
        assert_eq!(sys.live_instances(), 1);
    }
    let _ = closest_ip;
}

// ---------------------------------------------------------------------
// 10. Delegation message bounds on random trees.

fn delegation_message_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut successes = 0;
    for case in 0..200u64 {
        let mut tree = InfrastructureTree::new("root");
        let depth = rng.random_range(1..=4u32);
        let mut next_id = 0u32;
        let new_cluster = |rng: &mut ChaCha8Rng, next_id: &mut u32| {
            let cid = ClusterId::from(format!("k{:03}", *next_id).as_str());
            *next_id += 1;
            let mut node = ClusterNode::new(cid.clone());
            for w in 0..rng.random_range(0..=2usize) {
                let wid = WorkerId::from(format!("{cid}w{w}").as_str());
                node.workers.insert(
                    wid.clone(),
                    WorkerSnapshot {
                        worker_id: wid,
                        capacity: CapacityVector::new(
                            rng.random_range(1.0..8.0),
                            rng.random_range(512..8192),
                        ),
                        used: CapacityVector::zero(),
                        geo: GeoPoint::new(48.0, 11.0).unwrap(),
                        vivaldi: VivaldiCoordinate::origin(3),
                        virtualizations: ["container".to_owned()].into(),
                        last_update: 0,
                    },
                );
            }
            (cid, node)
        };
        // Breadth-first random tree, 1..=2 children per node per level.
        let mut level: Vec<ClusterId> = Vec::new();
        for _ in 0..rng.random_range(1..=2) {
            let (cid, node) = new_cluster(&mut rng, &mut next_id);
            tree.top_clusters.insert(cid.clone());
            tree.clusters.insert(cid.clone(), node);
            level.push(cid);
        }
        for _ in 1..depth {
            let mut next_level = Vec::new();
            for parent in &level {
                for _ in 0..rng.random_range(0..=2) {
                    let (cid, node) = new_cluster(&mut rng, &mut next_id);
                    tree.clusters.get_mut(parent).unwrap().child_clusters.insert(cid.clone());
                    tree.clusters.insert(cid.clone(), node);
                    next_level.push(cid);
                }
            }
            if next_level.is_empty() {
                break;
            }
            level = next_level;
        }
        tree.validate().unwrap();

        let task = TaskRequirements::basic(
            0,
            CapacityVector::new(rng.random_range(0.5..6.0), rng.random_range(256..6144)),
            "container",
        );
        let mut request = ScheduleRequest::new(ServiceId::from("svc"), task, 0);
        let registry = SchedulerRegistry::new(Algorithm::RomBestSlack);
        let placed = BTreeMap::new();
        let mut env = DelegationEnv {
            registry: &registry,
            prober: &mut NoProber,
            placed: &placed,
            task_zone: None,
            rng_seed: case,
            now_ms: 0,
        };
        if let Ok((_, trace)) = delegate(&mut request, &tree, &mut env) {
            successes += 1;
            assert!(
                trace.forward_messages <= depth,
                "case {case}: {} forwards on a depth-{depth} tree",
                trace.forward_messages
            );
            assert!(
                trace.retry_messages + 1 <= trace.clusters_tried,
                "case {case}: {} retries over {} clusters tried",
                trace.retry_messages,
                trace.clusters_tried
            );
        }
    }
    assert!(successes >= 50, "only {successes}/200 trees schedulable");
}

// ---------------------------------------------------------------------
// 11. Seeded determinism.

fn seeded_determinism() {
    let scenario = Scenario::from_json(
        r#"{
            "version": 1,
            "name": "repeat",
            "seed": 99,
            "duration_ms": 6000,
            "topology": {"clusters": 3, "workers_per_cluster": 3},
            "scheduler": "ldp",
            "workload": {
                "services": 30,
                "deploy_interval_ms": 50,
                "vcpus": 1.0,
                "memory_mb": 256,
                "latency_ms": 25.0,
                "geo_threshold_km": 1000.0,
                "area": "world"
            },
            "faults": [{"kind": "worker_crash", "at_ms": 2000, "worker": "c0w1"}]
        }"#,
    )
    .unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(&scenario, a.path()).unwrap();
    run(&scenario, b.path()).unwrap();
    let left = std::fs::read(a.path().join("metrics.csv")).unwrap();
    let right = std::fs::read(b.path().join("metrics.csv")).unwrap();
    assert!(!left.is_empty());
    assert_eq!(left, right, "metric CSVs differ between identical runs");
}

// ---------------------------------------------------------------------

#[test]
fn acceptance() {
    let checks: Vec<(&str, Box<dyn FnOnce() + std::panic::UnwindSafe>)> = vec![
        ("resource-match selection equals exhaustive oracle", Box::new(resource_match_oracle_equivalence)),
        ("latency-aware filter equals exhaustive oracle", Box::new(latency_filter_oracle_equivalence)),
        ("trilateration recovers planted users", Box::new(trilateration_recovery)),
        ("network coordinates converge on a synthetic mesh", Box::new(coordinate_convergence)),
        ("schedule time has an interior minimum across cluster splits", Box::new(cluster_split_interior_minimum)),
        ("scaling trends hold from 10 to 500 workers", Box::new(scaling_trends)),
        ("lifecycle transitions are safe under fuzzing", Box::new(lifecycle_transition_safety)),
        ("worker failure recovers locally before escalating", Box::new(failure_recovery_locality)),
        ("overlay balancing, link cap and migration continuity", Box::new(overlay_properties)),
        ("delegation stays within its message bounds", Box::new(delegation_message_bounds)),
        ("seeded runs produce byte-identical metrics", Box::new(seeded_determinism)),
    ];
    let mut failed = 0;
    for (name, f) in checks {
        match catch_unwind(AssertUnwindSafe(f)) {
            Ok(()) => println!("[acceptance] {name}: PASS"),
            Err(e) => {
                failed += 1;
                let detail = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("[acceptance] {name}: FAIL {detail}");
            }
        }
    }
    assert_eq!(failed, 0, "{failed} acceptance check(s) failed");
}
