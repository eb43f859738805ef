// SPDX-License-Identifier: Apache-2.0

//! `oak` — run scenarios and sweeps against the simulation harness, or
//! drive a live deployment over sockets.
//!
//! Environment:
//! - `OAK_ROOT_ADDR`   root orchestrator address (default 127.0.0.1:7878)
//! - `OAK_CLUSTER_ID`  restrict `oak topology` to animating one cluster
//! - `OAK_TRANSPORT`   "memory" or "socket" for topology-internal
//!   telemetry (default socket)

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use clap::{Parser, Subcommand};

use oak_core::control::socket::{rpc, Server};
use oak_core::control::{ControlMessage, Envelope, RequestHandler};
use oak_core::coords::VivaldiCoordinate;
use oak_core::model::{CapacityVector, ClusterId, WorkerId, WorkerSnapshot};
use oak_core::resource::{RegistrationRecord, TelemetryMsg};
use oak_core::scheduler::{Algorithm, LatencyProber, SchedulerRegistry};
use oak_core::sim::runner::run;
use oak_core::sim::sweep::sweep;
use oak_core::sim::{plant_workers, world_zone, Scenario};
use oak_core::sla::{load_regions, SlaDocument};
use oak_core::system::System;

#[derive(Parser)]
#[command(name = "oak", version, about = "hierarchical edge orchestration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulation harness.
    #[command(subcommand)]
    Sim(SimCommand),
    /// Deploy an SLA file against the live root orchestrator.
    Deploy {
        sla_file: PathBuf,
    },
    /// Query the live root orchestrator.
    Status,
    /// Run a whole topology (root, clusters, workers) in this process.
    Topology {
        config: PathBuf,
        /// Optional region registry for `area` constraints.
        #[arg(long)]
        regions: Option<PathBuf>,
        /// Stop after this many seconds (default: run until killed).
        #[arg(long)]
        duration_secs: Option<u64>,
    },
}

#[derive(Subcommand)]
enum SimCommand {
    /// Execute one scenario file.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value = "sim-out")]
        out: PathBuf,
    },
    /// Re-run a scenario across values of one parameter.
    Sweep {
        scenario: PathBuf,
        #[arg(long)]
        param: String,
        /// Comma-separated values, e.g. 50,100,250,500 or 1x45,9x5.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long, default_value = "sweep-out")]
        out: PathBuf,
    },
}

fn root_addr() -> String {
    std::env::var("OAK_ROOT_ADDR").unwrap_or_else(|_| "127.0.0.1:7878".to_owned())
}

fn main() {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Sim(cmd) => run_sim(cmd),
        Command::Deploy { sla_file } => run_deploy(&sla_file),
        Command::Status => run_status(),
        Command::Topology {
            config,
            regions,
            duration_secs,
        } => run_topology(&config, regions.as_deref(), duration_secs),
    };
    std::process::exit(code);
}

fn run_sim(cmd: SimCommand) -> i32 {
    match cmd {
        SimCommand::Run { scenario, out } => {
            let s = match Scenario::load(&scenario) {
                Ok(s) => s,
                Err(e) => return fail(&format!("scenario: {e}")),
            };
            match run(&s, &out) {
                Ok(r) => {
                    println!("scenario {} (seed {})", r.scenario, r.seed);
                    println!(
                        "  placements: {} ok, {} failed; recoveries: {} local, {} via root, {} failed",
                        r.placements_ok,
                        r.placements_failed,
                        r.reschedules_local,
                        r.reschedules_root,
                        r.recovery_failed
                    );
                    println!(
                        "  messages: {} forward, {} retry",
                        r.forward_messages, r.retry_messages
                    );
                    if r.latency_checked > 0 {
                        println!(
                            "  latency bound satisfied: {}/{} ({:.1}%)",
                            r.latency_satisfied,
                            r.latency_checked,
                            100.0 * r.satisfied_ratio()
                        );
                    }
                    println!(
                        "  median calc time: root {:.1} us, cluster {:.1} us, total {:.1} us",
                        r.median_root_calc_us, r.median_cluster_calc_us, r.median_total_calc_us
                    );
                    println!("  metrics: {}", r.metrics_path.display());
                    println!("  timings: {}", r.timings_path.display());
                    0
                }
                Err(e) => fail(&format!("run: {e}")),
            }
        }
        SimCommand::Sweep {
            scenario,
            param,
            values,
            out,
        } => {
            let s = match Scenario::load(&scenario) {
                Ok(s) => s,
                Err(e) => return fail(&format!("scenario: {e}")),
            };
            match sweep(&s, &param, &values, &out) {
                Ok(reports) => {
                    println!("sweep over {param}: {} runs", reports.len());
                    for (v, r) in &reports {
                        println!(
                            "  {param}={v}: {} ok / {} failed, median total calc {:.1} us",
                            r.placements_ok, r.placements_failed, r.median_total_calc_us
                        );
                    }
                    println!("  comparison: {}", out.join("sweep.csv").display());
                    0
                }
                Err(e) => fail(&format!("sweep: {e}")),
            }
        }
    }
}

fn fail(msg: &str) -> i32 {
    eprintln!("error: {msg}");
    1
}

static CLI_SEQ: AtomicU64 = AtomicU64::new(1);

fn client_rpc(message: ControlMessage) -> Result<ControlMessage, String> {
    let env = Envelope {
        sender: "cli".into(),
        seq: CLI_SEQ.fetch_add(1, Ordering::Relaxed),
        message,
    };
    rpc(&root_addr(), &env, 5_000).map_err(|e| e.to_string())
}

fn run_deploy(sla_file: &std::path::Path) -> i32 {
    let doc = match SlaDocument::load(sla_file) {
        Ok(d) => d,
        Err(e) => return fail(&format!("sla: {e}")),
    };
    let descriptor = match doc.to_descriptor() {
        Ok(d) => d,
        Err(e) => return fail(&format!("sla: {e}")),
    };
    match client_rpc(ControlMessage::Deploy { descriptor }) {
        Ok(ControlMessage::DeployAck(report)) => {
            println!("deployed {}", report.service_id);
            for p in report.placements {
                println!(
                    "  microservice {} -> {} ({} via {})",
                    p.microservice_id,
                    p.worker_id,
                    p.instance_ip,
                    p.cluster_path
                        .iter()
                        .map(|c| c.to_string())
                        .collect::<Vec<_>>()
                        .join(" > ")
                );
            }
            0
        }
        Ok(ControlMessage::Error { detail }) => fail(&detail),
        Ok(other) => fail(&format!("unexpected reply {other:?}")),
        Err(e) => fail(&e),
    }
}

fn run_status() -> i32 {
    match client_rpc(ControlMessage::Status) {
        Ok(ControlMessage::StatusReply(status)) => {
            println!("clusters:");
            for (c, n) in &status.clusters {
                println!("  {c}: {n} workers");
            }
            println!("services:");
            for s in &status.services {
                println!("  {}", s.service_id);
                for i in &s.instances {
                    println!(
                        "    #{} ms{} {} on {} ({}) [{}]",
                        i.instance_id.0, i.microservice_id, i.instance_ip, i.worker_id,
                        i.cluster_id, i.state
                    );
                }
            }
            0
        }
        Ok(ControlMessage::Error { detail }) => fail(&detail),
        Ok(other) => fail(&format!("unexpected reply {other:?}")),
        Err(e) => fail(&e),
    }
}

/// Live-mode user probe: without real users to ping, approximate the
/// RTT to a "lat,lon" endpoint from great-circle distance (~1 ms per
/// 100 km, plus a 5 ms floor).
struct GeoProber;

impl LatencyProber for GeoProber {
    fn ping(&mut self, worker: &WorkerSnapshot, endpoint: &str) -> Option<f64> {
        let (lat, lon) = endpoint.split_once(',')?;
        let lat: f64 = lat.trim().parse().ok()?;
        let lon: f64 = lon.trim().parse().ok()?;
        let target = oak_core::model::GeoPoint::new(lat, lon).ok()?;
        Some(5.0 + oak_core::coords::dist_gc(&worker.geo, &target) / 100.0)
    }
}

/// Root daemon state shared between the rpc server and worker threads.
struct LiveRoot {
    sys: System,
}

impl RequestHandler for LiveRoot {
    fn handle(&mut self, env: Envelope) -> ControlMessage {
        let now = now_ms();
        match env.message {
            ControlMessage::Deploy { descriptor } => {
                match self.sys.deploy_service(&descriptor, &mut GeoProber, now) {
                    Ok(report) => ControlMessage::DeployAck(report),
                    Err(e) => ControlMessage::Error {
                        detail: e.to_string(),
                    },
                }
            }
            ControlMessage::Undeploy { service_id } => {
                match self.sys.stop_service(&service_id, now) {
                    Ok(()) => ControlMessage::Status,
                    Err(e) => ControlMessage::Error {
                        detail: e.to_string(),
                    },
                }
            }
            ControlMessage::Status => ControlMessage::StatusReply(self.sys.status()),
            ControlMessage::Telemetry { cluster, msg } => {
                match self.sys.telemetry(&cluster, &msg, now) {
                    Ok(_) => ControlMessage::Status,
                    Err(e) => ControlMessage::Error {
                        detail: e.to_string(),
                    },
                }
            }
            other => ControlMessage::Error {
                detail: format!("unsupported request {other:?}"),
            },
        }
    }
}

fn now_ms() -> u64 {
    use std::time::{SystemTime, UNIX_EPOCH};
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// One process hosting the full hierarchy. The topology config reuses
/// the scenario schema; only its topology/telemetry sections matter.
fn run_topology(
    config: &std::path::Path,
    regions: Option<&std::path::Path>,
    duration_secs: Option<u64>,
) -> i32 {
    let scenario = match Scenario::load(config) {
        Ok(s) => s,
        Err(e) => return fail(&format!("config: {e}")),
    };
    let transport = std::env::var("OAK_TRANSPORT").unwrap_or_else(|_| "socket".to_owned());
    if transport != "socket" && transport != "memory" {
        return fail(&format!("OAK_TRANSPORT={transport:?} (want socket or memory)"));
    }
    let only_cluster = std::env::var("OAK_CLUSTER_ID").ok();

    let algorithm = match Algorithm::parse(&scenario.scheduler) {
        Ok(a) => a,
        Err(e) => return fail(&e.to_string()),
    };
    let telemetry_cfg = scenario.telemetry.clone().unwrap_or_default();
    let mut sys = System::new("root", SchedulerRegistry::new(algorithm), scenario.seed);
    sys.regions.insert("world".to_owned(), world_zone(&scenario));
    if let Some(path) = regions {
        match load_regions(path) {
            Ok(r) => sys.regions.extend(r),
            Err(e) => return fail(&format!("regions: {e}")),
        }
    }
    let planted = plant_workers(&scenario);
    for ci in 0..scenario.topology.clusters {
        let cid = ClusterId::from(format!("c{ci}").as_str());
        let zone = scenario
            .topology
            .cluster_zones
            .then(|| oak_core::sim::cluster_zone(&scenario, ci));
        if let Err(e) = sys.add_cluster(&cid, None, zone, telemetry_cfg.clone()) {
            return fail(&e.to_string());
        }
    }
    for w in &planted {
        let res = sys.register_worker(
            &ClusterId::from(w.cluster.as_str()),
            RegistrationRecord {
                id: WorkerId::from(w.name.as_str()),
                declared_capacity: CapacityVector::new(
                    scenario.topology.worker_cpu,
                    scenario.topology.worker_memory_mb,
                ),
                virtualizations: ["container".to_owned(), "mock".to_owned()].into(),
                geo: w.geo,
                registered_at: now_ms(),
            },
            VivaldiCoordinate::at(w.position.clone()),
        );
        if let Err(e) = res {
            return fail(&e.to_string());
        }
    }

    let handler: Arc<Mutex<LiveRoot>> = Arc::new(Mutex::new(LiveRoot { sys }));
    let addr = root_addr();
    let server = match Server::spawn(&addr, handler.clone() as Arc<Mutex<dyn RequestHandler>>) {
        Ok(s) => s,
        Err(e) => return fail(&format!("bind {addr}: {e}")),
    };
    println!(
        "root orchestrator on {} ({} clusters, {} workers, scheduler {}, transport {})",
        server.local_addr,
        scenario.topology.clusters,
        planted.len(),
        scenario.scheduler,
        transport
    );

    // Animate the workers: periodic telemetry either over loopback TCP
    // (exercising the same wire path a remote worker would use) or via
    // direct handler calls for the memory transport.
    let stop = Arc::new(std::sync::atomic::AtomicBool::new(false));
    let mut worker_threads = Vec::new();
    for w in &planted {
        if let Some(only) = &only_cluster {
            if *only != w.cluster {
                continue;
            }
        }
        let w = w.clone();
        let stop = stop.clone();
        let handler = handler.clone();
        let server_addr = server.local_addr.to_string();
        let interval = Duration::from_millis(telemetry_cfg.update_interval_ms);
        let use_sockets = transport == "socket";
        worker_threads.push(std::thread::spawn(move || {
            let mut seq = 0u64;
            while !stop.load(Ordering::Relaxed) {
                seq += 1;
                let used = {
                    let guard = handler.lock().expect("root poisoned");
                    guard
                        .sys
                        .engine(&WorkerId::from(w.name.as_str()))
                        .map(|e| e.used())
                        .unwrap_or_else(CapacityVector::zero)
                };
                let message = ControlMessage::Telemetry {
                    cluster: ClusterId::from(w.cluster.as_str()),
                    msg: TelemetryMsg {
                        worker_id: WorkerId::from(w.name.as_str()),
                        used,
                        vivaldi: VivaldiCoordinate::at(w.position.clone()),
                        seq,
                    },
                };
                let env = Envelope {
                    sender: w.name.clone(),
                    seq,
                    message,
                };
                if use_sockets {
                    let _ = rpc(&server_addr, &env, 2_000);
                } else {
                    let _ = handler.lock().expect("root poisoned").handle(env);
                }
                std::thread::sleep(interval);
            }
        }));
    }

    match duration_secs {
        Some(secs) => std::thread::sleep(Duration::from_secs(secs)),
        None => loop {
            std::thread::sleep(Duration::from_secs(3600));
        },
    }
    stop.store(true, Ordering::Relaxed);
    for t in worker_threads {
        let _ = t.join();
    }
    server.shutdown();
    0
}
