//! C ABI over the orchestration core: opaque handles, integer status
//! codes, caller-owned output buffers. The header is generated into
//! `include/oak.h` at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::slice;

use oak_core::coords::{
    dist_gc, trilaterate, CoordsError, RttSample, VivaldiConfig, VivaldiCoordinate,
};
use oak_core::model::{CapacityVector, GeoPoint, TaskRequirements, WorkerSnapshot};
use oak_core::scheduler::{rom_select, RomStrategy};
use oak_core::sim::{runner, Scenario};
use oak_core::sla::SlaDocument;
use oak_core::WorkerId;

/// Status code returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OakStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    InsufficientAnchors = 4,
    DegenerateGeometry = 5,
    NoFeasibleWorker = 6,
    ParseError = 7,
    IoError = 8,
    InternalError = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn fail(status: OakStatus, detail: impl Into<String>) -> OakStatus {
    let text = CString::new(detail.into()).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(text));
    status
}

fn coords_status(e: CoordsError) -> OakStatus {
    let s = match e {
        CoordsError::InsufficientAnchors(_) => OakStatus::InsufficientAnchors,
        CoordsError::DegenerateGeometry => OakStatus::DegenerateGeometry,
        CoordsError::DimensionMismatch(..) => OakStatus::InvalidArgument,
    };
    fail(s, e.to_string())
}

/// Detail text for the most recent failure on this thread, or NULL.
/// Valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn oak_last_error() -> *const c_char {
    LAST_ERROR.with(|e| {
        e.borrow()
            .as_ref()
            .map(|s| s.as_ptr())
            .unwrap_or(std::ptr::null())
    })
}

#[no_mangle]
pub extern "C" fn oak_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Great-circle distance in km between two latitude/longitude pairs
/// given in degrees.
#[no_mangle]
pub extern "C" fn oak_dist_gc(
    lat1: f64,
    lon1: f64,
    lat2: f64,
    lon2: f64,
    out_km: *mut f64,
) -> OakStatus {
    if out_km.is_null() {
        return fail(OakStatus::NullArgument, "out_km is NULL");
    }
    let (a, b) = match (GeoPoint::new(lat1, lon1), GeoPoint::new(lat2, lon2)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return fail(OakStatus::InvalidArgument, "coordinates out of range"),
    };
    unsafe { *out_km = dist_gc(&a, &b) };
    OakStatus::Ok
}

/// Opaque network coordinate handle.
pub struct OakCoord(VivaldiCoordinate);

/// New coordinate at the origin of a `dims`-dimensional space.
/// Returns NULL when `dims` is zero. Free with `oak_coord_free`.
#[no_mangle]
pub extern "C" fn oak_coord_new(dims: usize) -> *mut OakCoord {
    if dims == 0 {
        return std::ptr::null_mut();
    }
    Box::into_raw(Box::new(OakCoord(VivaldiCoordinate::origin(dims))))
}

/// New coordinate at an explicit position.
#[no_mangle]
pub extern "C" fn oak_coord_at(position: *const f64, dims: usize) -> *mut OakCoord {
    if position.is_null() || dims == 0 {
        return std::ptr::null_mut();
    }
    let pos = unsafe { slice::from_raw_parts(position, dims) }.to_vec();
    Box::into_raw(Box::new(OakCoord(VivaldiCoordinate::at(pos))))
}

#[no_mangle]
pub extern "C" fn oak_coord_free(coord: *mut OakCoord) {
    if !coord.is_null() {
        drop(unsafe { Box::from_raw(coord) });
    }
}

/// Copy the coordinate's position into `out`, which must hold `dims`
/// doubles (as passed at construction).
#[no_mangle]
pub extern "C" fn oak_coord_position(
    coord: *const OakCoord,
    out: *mut f64,
    dims: usize,
) -> OakStatus {
    if coord.is_null() || out.is_null() {
        return fail(OakStatus::NullArgument, "coord or out is NULL");
    }
    let c = unsafe { &(*coord).0 };
    if c.dimension() != dims {
        return fail(
            OakStatus::InvalidArgument,
            format!("coordinate has {} dimensions, not {dims}", c.dimension()),
        );
    }
    unsafe { slice::from_raw_parts_mut(out, dims) }.copy_from_slice(&c.position);
    OakStatus::Ok
}

/// Predicted RTT in ms between two coordinates.
#[no_mangle]
pub extern "C" fn oak_coord_distance(
    a: *const OakCoord,
    b: *const OakCoord,
    out_ms: *mut f64,
) -> OakStatus {
    if a.is_null() || b.is_null() || out_ms.is_null() {
        return fail(OakStatus::NullArgument, "a, b or out_ms is NULL");
    }
    match unsafe { (*a).0.distance_to(&(*b).0) } {
        Ok(d) => {
            unsafe { *out_ms = d };
            OakStatus::Ok
        }
        Err(e) => coords_status(e),
    }
}

/// Fold one RTT measurement against a peer into the coordinate,
/// moving it in place. `tie_seed` breaks the co-located-nodes tie
/// deterministically; any value works, vary it across calls.
#[no_mangle]
pub extern "C" fn oak_coord_update(
    coord: *mut OakCoord,
    peer: *const OakCoord,
    rtt_ms: f64,
    tie_seed: u64,
) -> OakStatus {
    if coord.is_null() || peer.is_null() {
        return fail(OakStatus::NullArgument, "coord or peer is NULL");
    }
    if !rtt_ms.is_finite() || rtt_ms < 0.0 {
        return fail(OakStatus::InvalidArgument, "rtt_ms must be finite and >= 0");
    }
    let sample = RttSample {
        peer_coordinate: unsafe { (*peer).0.clone() },
        measured_rtt_ms: rtt_ms,
    };
    let cfg = VivaldiConfig {
        dimension: unsafe { (*coord).0.dimension() },
        ..VivaldiConfig::default()
    };
    match unsafe { (*coord).0.update(&sample, &cfg, tie_seed) } {
        Ok(next) => {
            unsafe { (*coord).0 = next };
            OakStatus::Ok
        }
        Err(e) => coords_status(e),
    }
}

/// Estimate an unknown point from `count` anchors. `anchors` is a
/// row-major `count * dims` array of anchor positions, `rtts_ms` the
/// measured distance to each. Writes `dims` doubles to `out_position`.
#[no_mangle]
pub extern "C" fn oak_trilaterate(
    anchors: *const f64,
    rtts_ms: *const f64,
    count: usize,
    dims: usize,
    out_position: *mut f64,
) -> OakStatus {
    if anchors.is_null() || rtts_ms.is_null() || out_position.is_null() {
        return fail(OakStatus::NullArgument, "anchors, rtts_ms or out_position is NULL");
    }
    if dims == 0 {
        return fail(OakStatus::InvalidArgument, "dims must be positive");
    }
    let flat = unsafe { slice::from_raw_parts(anchors, count * dims) };
    let rtts = unsafe { slice::from_raw_parts(rtts_ms, count) };
    let samples: Vec<RttSample> = flat
        .chunks(dims)
        .zip(rtts)
        .map(|(pos, &rtt)| RttSample {
            peer_coordinate: VivaldiCoordinate::at(pos.to_vec()),
            measured_rtt_ms: rtt,
        })
        .collect();
    match trilaterate(&samples) {
        Ok(est) => {
            unsafe { slice::from_raw_parts_mut(out_position, dims) }
                .copy_from_slice(&est.position);
            OakStatus::Ok
        }
        Err(e) => coords_status(e),
    }
}

/// Worker selection strategy for `oak_select_worker`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OakSelectStrategy {
    /// Most remaining cpu+memory slack, ties by lowest index.
    BestSlack = 0,
    /// First worker, in input order, that fits.
    FirstFit = 1,
}

/// Pick a worker for a (cpu, memory) request. `free_cpu` and
/// `free_memory_mb` describe the remaining capacity of `count`
/// workers; the chosen index lands in `out_index`.
#[no_mangle]
pub extern "C" fn oak_select_worker(
    free_cpu: *const f64,
    free_memory_mb: *const u64,
    count: usize,
    need_cpu: f64,
    need_memory_mb: u64,
    strategy: OakSelectStrategy,
    out_index: *mut usize,
) -> OakStatus {
    if free_cpu.is_null() || free_memory_mb.is_null() || out_index.is_null() {
        return fail(OakStatus::NullArgument, "free_cpu, free_memory_mb or out_index is NULL");
    }
    let cpu = unsafe { slice::from_raw_parts(free_cpu, count) };
    let mem = unsafe { slice::from_raw_parts(free_memory_mb, count) };
    let geo = GeoPoint::new(0.0, 0.0).expect("origin is a valid point");
    // Zero-padded ids keep lexicographic worker-id order aligned with
    // the input index order the caller sees.
    let workers: Vec<WorkerSnapshot> = cpu
        .iter()
        .zip(mem)
        .enumerate()
        .map(|(i, (&c, &m))| WorkerSnapshot {
            worker_id: WorkerId::from(format!("{i:010}").as_str()),
            capacity: CapacityVector::new(c, m),
            used: CapacityVector::zero(),
            geo,
            vivaldi: VivaldiCoordinate::origin(3),
            virtualizations: ["container".to_owned()].into(),
            last_update: 0,
        })
        .collect();
    let task = TaskRequirements::basic(0, CapacityVector::new(need_cpu, need_memory_mb), "container");
    let rom_strategy = match strategy {
        OakSelectStrategy::BestSlack => RomStrategy::BestSlack,
        OakSelectStrategy::FirstFit => RomStrategy::FirstFit,
    };
    match rom_select(&workers, &task, rom_strategy) {
        Ok(id) => {
            let idx: usize = id.as_str().parse().expect("ids are zero-padded indices");
            unsafe { *out_index = idx };
            OakStatus::Ok
        }
        Err(e) => fail(OakStatus::NoFeasibleWorker, e.to_string()),
    }
}

/// Parse and validate a deployment descriptor document. Returns Ok when
/// the document is well-formed and convertible to a service.
#[no_mangle]
pub extern "C" fn oak_sla_validate(json: *const c_char) -> OakStatus {
    let Some(text) = (unsafe { cstr(json) }) else {
        return fail(OakStatus::NullArgument, "json is NULL or not UTF-8");
    };
    match SlaDocument::from_json(text).and_then(|d| d.to_descriptor()) {
        Ok(_) => OakStatus::Ok,
        Err(e) => fail(OakStatus::ParseError, e.to_string()),
    }
}

/// Run a simulation scenario, writing metric CSVs under `out_dir`.
/// On success `*out_report_json` holds a JSON run report owned by the
/// library; release it with `oak_string_free`.
#[no_mangle]
pub extern "C" fn oak_sim_run(
    scenario_json: *const c_char,
    out_dir: *const c_char,
    out_report_json: *mut *mut c_char,
) -> OakStatus {
    if out_report_json.is_null() {
        return fail(OakStatus::NullArgument, "out_report_json is NULL");
    }
    let (Some(text), Some(dir)) = (unsafe { cstr(scenario_json) }, unsafe { cstr(out_dir) })
    else {
        return fail(OakStatus::NullArgument, "scenario_json or out_dir is NULL or not UTF-8");
    };
    let scenario = match Scenario::from_json(text) {
        Ok(s) => s,
        Err(e) => return fail(OakStatus::ParseError, e.to_string()),
    };
    match runner::run(&scenario, Path::new(dir)) {
        Ok(report) => {
            let json = serde_json::to_string(&report).expect("report serializes");
            let c = CString::new(json).expect("no NUL in JSON");
            unsafe { *out_report_json = c.into_raw() };
            OakStatus::Ok
        }
        Err(e) => fail(OakStatus::IoError, e.to_string()),
    }
}

/// Release a string returned by this library.
#[no_mangle]
pub extern "C" fn oak_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

unsafe fn cstr<'a>(p: *const c_char) -> Option<&'a str> {
    if p.is_null() {
        return None;
    }
    CStr::from_ptr(p).to_str().ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_is_non_null() {
        let v = unsafe { CStr::from_ptr(oak_version()) };
        assert!(!v.to_str().unwrap().is_empty());
    }

    #[test]
    fn dist_gc_matches_known_city_pair() {
        // Munich to Berlin, roughly 500 km.
        let mut km = 0.0;
        assert_eq!(
            oak_dist_gc(48.137, 11.575, 52.52, 13.405, &mut km),
            OakStatus::Ok
        );
        assert!((km - 504.0).abs() < 5.0, "{km}");
    }

    #[test]
    fn dist_gc_rejects_out_of_range() {
        let mut km = 0.0;
        assert_eq!(
            oak_dist_gc(91.0, 0.0, 0.0, 0.0, &mut km),
            OakStatus::InvalidArgument
        );
        assert!(!oak_last_error().is_null());
    }

    #[test]
    fn coord_roundtrip_and_distance() {
        let a = oak_coord_at([0.0, 0.0, 0.0].as_ptr(), 3);
        let b = oak_coord_at([3.0, 4.0, 0.0].as_ptr(), 3);
        let mut d = 0.0;
        assert_eq!(oak_coord_distance(a, b, &mut d), OakStatus::Ok);
        assert!((d - 5.0).abs() < 1e-9);
        let mut pos = [0.0; 3];
        assert_eq!(oak_coord_position(b, pos.as_mut_ptr(), 3), OakStatus::Ok);
        assert_eq!(pos, [3.0, 4.0, 0.0]);
        assert_eq!(
            oak_coord_position(b, pos.as_mut_ptr(), 2),
            OakStatus::InvalidArgument
        );
        oak_coord_free(a);
        oak_coord_free(b);
    }

    #[test]
    fn coord_update_moves_toward_peer_distance() {
        let c = oak_coord_new(3);
        let peer = oak_coord_at([10.0, 0.0, 0.0].as_ptr(), 3);
        for i in 0..50 {
            assert_eq!(oak_coord_update(c, peer, 10.0, i), OakStatus::Ok);
        }
        let mut d = 0.0;
        assert_eq!(oak_coord_distance(c, peer, &mut d), OakStatus::Ok);
        assert!((d - 10.0).abs() < 2.0, "{d}");
        oak_coord_free(c);
        oak_coord_free(peer);
    }

    #[test]
    fn trilaterate_recovers_planted_point() {
        let anchors = [
            0.0, 0.0, 0.0, //
            10.0, 0.0, 0.0, //
            0.0, 10.0, 0.0, //
            0.0, 0.0, 10.0,
        ];
        let planted = [2.0, 3.0, 4.0];
        let rtts: Vec<f64> = anchors
            .chunks(3)
            .map(|a| {
                planted
                    .iter()
                    .zip(a)
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let mut out = [0.0; 3];
        assert_eq!(
            oak_trilaterate(anchors.as_ptr(), rtts.as_ptr(), 4, 3, out.as_mut_ptr()),
            OakStatus::Ok
        );
        for (got, want) in out.iter().zip(&planted) {
            assert!((got - want).abs() < 1e-3);
        }
    }

    #[test]
    fn trilaterate_too_few_anchors() {
        let anchors = [0.0, 0.0, 0.0];
        let rtts = [1.0];
        let mut out = [0.0; 3];
        assert_eq!(
            oak_trilaterate(anchors.as_ptr(), rtts.as_ptr(), 1, 3, out.as_mut_ptr()),
            OakStatus::InsufficientAnchors
        );
    }

    #[test]
    fn select_worker_best_slack_and_first_fit() {
        let cpu = [1.0, 8.0, 4.0];
        let mem = [1024u64, 8192, 4096];
        let mut idx = usize::MAX;
        assert_eq!(
            oak_select_worker(
                cpu.as_ptr(),
                mem.as_ptr(),
                3,
                2.0,
                512,
                OakSelectStrategy::BestSlack,
                &mut idx
            ),
            OakStatus::Ok
        );
        assert_eq!(idx, 1);
        assert_eq!(
            oak_select_worker(
                cpu.as_ptr(),
                mem.as_ptr(),
                3,
                2.0,
                512,
                OakSelectStrategy::FirstFit,
                &mut idx
            ),
            OakStatus::Ok
        );
        assert_eq!(idx, 1);
        assert_eq!(
            oak_select_worker(
                cpu.as_ptr(),
                mem.as_ptr(),
                3,
                16.0,
                512,
                OakSelectStrategy::BestSlack,
                &mut idx
            ),
            OakStatus::NoFeasibleWorker
        );
    }

    #[test]
    fn sla_validate_accepts_and_rejects() {
        let good = r#"{
            "service_name": "app",
            "constraints": [{
                "microservice_id": 0,
                "properties": [{
                    "memory": 100,
                    "vcpus": 1,
                    "virtualization": "container"
                }]
            }]
        }"#;
        let good_c = CString::new(good).unwrap();
        assert_eq!(oak_sla_validate(good_c.as_ptr()), OakStatus::Ok);
        let bad_c = CString::new(r#"{"unknown_field": 1}"#).unwrap();
        assert_eq!(oak_sla_validate(bad_c.as_ptr()), OakStatus::ParseError);
    }

    #[test]
    fn sim_run_produces_report() {
        let scenario = r#"{
            "version": 1,
            "name": "ffi-smoke",
            "seed": 3,
            "duration_ms": 1000,
            "topology": {"clusters": 2, "workers_per_cluster": 2},
            "scheduler": "rom_best_slack",
            "workload": {"services": 5, "deploy_interval_ms": 10, "vcpus": 1.0, "memory_mb": 64}
        }"#;
        let dir = tempfile::tempdir().unwrap();
        let scenario_c = CString::new(scenario).unwrap();
        let dir_c = CString::new(dir.path().to_str().unwrap()).unwrap();
        let mut report: *mut c_char = std::ptr::null_mut();
        assert_eq!(
            oak_sim_run(scenario_c.as_ptr(), dir_c.as_ptr(), &mut report),
            OakStatus::Ok
        );
        let text = unsafe { CStr::from_ptr(report) }.to_str().unwrap();
        assert!(text.contains("\"placements_ok\":5"), "{text}");
        oak_string_free(report);
        assert!(dir.path().join("metrics.csv").exists());
    }
}
