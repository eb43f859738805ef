// SPDX-License-Identifier: Apache-2.0

//! Network coordinates and geography: Vivaldi embedding, great-circle
//! distance, and user-position trilateration.
//!
//! Vivaldi coordinates are calibrated directly in RTT milliseconds: the
//! Euclidean distance between two embeddings predicts the round-trip
//! time between the nodes, no halving.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::GeoPoint;

/// Mean Earth radius, km.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Smallest admissible error estimate; the estimate lives in (0, 1].
const MIN_ERROR: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum CoordsError {
    #[error("coordinate dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("trilateration needs at least 3 anchors, got {0}")]
    InsufficientAnchors(usize),
    #[error("trilateration did not converge: anchors are degenerate (collinear)")]
    DegenerateGeometry,
}

/// Tunables of the Vivaldi update rule. `cc`/`ce` are the adaptive
/// timestep and error-smoothing gains of the reference algorithm.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VivaldiConfig {
    pub dimension: usize,
    pub cc: f64,
    pub ce: f64,
}

impl Default for VivaldiConfig {
    fn default() -> Self {
        Self {
            dimension: 3,
            cc: 0.25,
            ce: 0.25,
        }
    }
}

/// A point in the latency space: position in ms per axis, a height
/// capturing the access-link delay, and a confidence estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VivaldiCoordinate {
    pub position: Vec<f64>,
    pub height: f64,
    pub error_estimate: f64,
}

impl VivaldiCoordinate {
    /// A fresh coordinate at the origin with maximal uncertainty.
    pub fn origin(dimension: usize) -> Self {
        Self {
            position: vec![0.0; dimension],
            height: 0.0,
            error_estimate: 1.0,
        }
    }

    pub fn at(position: Vec<f64>) -> Self {
        Self {
            position,
            height: 0.0,
            error_estimate: 1.0,
        }
    }

    pub fn dimension(&self) -> usize {
        self.position.len()
    }

    /// Predicted RTT in ms: Euclidean distance between positions plus
    /// both heights.
    pub fn distance_to(&self, other: &VivaldiCoordinate) -> Result<f64, CoordsError> {
        if self.position.len() != other.position.len() {
            return Err(CoordsError::DimensionMismatch(
                self.position.len(),
                other.position.len(),
            ));
        }
        let sq: f64 = self
            .position
            .iter()
            .zip(&other.position)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sq.sqrt() + self.height + other.height)
    }

    /// One Vivaldi step against a measured RTT sample. Returns the moved
    /// coordinate; `self` is untouched. `tie_seed` resolves the direction
    /// when both nodes sit on the same point (derive it from both node
    /// ids so the trace stays deterministic).
    pub fn update(
        &self,
        sample: &RttSample,
        cfg: &VivaldiConfig,
        tie_seed: u64,
    ) -> Result<VivaldiCoordinate, CoordsError> {
        let predicted = self.distance_to(&sample.peer_coordinate)?;
        let rtt = sample.measured_rtt_ms;

        // Weight toward the more certain side.
        let w = self.error_estimate
            / (self.error_estimate + sample.peer_coordinate.error_estimate);
        let relative_error = (predicted - rtt).abs() / rtt;
        let alpha = cfg.ce * w;
        let error_estimate =
            (relative_error * alpha + self.error_estimate * (1.0 - alpha)).clamp(MIN_ERROR, 1.0);

        let delta = cfg.cc * w;
        let mut dir: Vec<f64> = self
            .position
            .iter()
            .zip(&sample.peer_coordinate.position)
            .map(|(a, b)| a - b)
            .collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            let mut rng = ChaCha8Rng::seed_from_u64(tie_seed);
            for d in dir.iter_mut() {
                *d = rng.random_range(-1.0..1.0);
            }
            let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for d in dir.iter_mut() {
                *d /= n;
            }
        } else {
            for d in dir.iter_mut() {
                *d /= norm;
            }
        }

        let magnitude = delta * (rtt - predicted);
        let position: Vec<f64> = self
            .position
            .iter()
            .zip(&dir)
            .map(|(p, d)| p + magnitude * d)
            .collect();
        Ok(VivaldiCoordinate {
            position,
            height: self.height,
            error_estimate,
        })
    }
}

/// One RTT measurement against a peer with a known coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RttSample {
    pub peer_coordinate: VivaldiCoordinate,
    pub measured_rtt_ms: f64,
}

/// Great-circle (haversine) distance in km.
pub fn dist_gc(a: &GeoPoint, b: &GeoPoint) -> f64 {
    let lat1 = a.latitude_deg().to_radians();
    let lat2 = b.latitude_deg().to_radians();
    let dlat = (b.latitude_deg() - a.latitude_deg()).to_radians();
    let dlon = (b.longitude_deg() - a.longitude_deg()).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Predicted-RTT distance between two embeddings, ms.
pub fn dist_euc(a: &VivaldiCoordinate, b: &VivaldiCoordinate) -> Result<f64, CoordsError> {
    a.distance_to(b)
}

const TRILATERATION_POLISH_ITERS: usize = 64;
const TRILATERATION_GRAD_EPS: f64 = 1e-6;

/// Estimate an external endpoint's coordinate from RTT measurements to
/// known anchors. Subtracting the first range equation from the others
/// turns the sphere intersection into a linear system; its least-squares
/// solution seeds a short fixed-budget descent on the true squared range
/// residuals. A plain descent from the centroid falls into the mirror
/// solution on a few percent of anchor geometries, which is why the
/// linear seed matters.
pub fn trilaterate(samples: &[RttSample]) -> Result<VivaldiCoordinate, CoordsError> {
    if samples.len() < 3 {
        return Err(CoordsError::InsufficientAnchors(samples.len()));
    }
    let dim = samples[0].peer_coordinate.dimension();
    for s in samples {
        if s.peer_coordinate.dimension() != dim {
            return Err(CoordsError::DimensionMismatch(
                dim,
                s.peer_coordinate.dimension(),
            ));
        }
    }

    let mut point = match linear_seed(samples, dim) {
        Some(p) => p,
        None => {
            // Underdetermined geometry (repeated or too few distinct
            // anchors): fall back to the anchor centroid.
            let mut c = vec![0.0; dim];
            for s in samples {
                for (p, a) in c.iter_mut().zip(&s.peer_coordinate.position) {
                    *p += a / samples.len() as f64;
                }
            }
            c
        }
    };

    let residual = |pt: &[f64]| -> f64 {
        samples
            .iter()
            .map(|s| {
                let d = range(pt, &s.peer_coordinate);
                let e = d - s.measured_rtt_ms;
                e * e
            })
            .sum()
    };

    // Fixed-budget descent with an adaptive step: every call performs
    // the same number of arithmetic operations, so scheduling cost
    // measurements see a constant per-trilateration term instead of a
    // data-dependent one.
    let mut current = residual(&point);
    let mut step = 0.5;
    let mut last_gnorm = f64::INFINITY;
    for _ in 0..TRILATERATION_POLISH_ITERS {
        let mut grad = vec![0.0; dim];
        for s in samples {
            let d = range(&point, &s.peer_coordinate);
            let err = d - s.measured_rtt_ms;
            let denom = euclid(&point, &s.peer_coordinate.position).max(1e-9);
            for (g, (p, a)) in grad
                .iter_mut()
                .zip(point.iter().zip(&s.peer_coordinate.position))
            {
                *g += 2.0 * err * (p - a) / denom;
            }
        }
        last_gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let candidate: Vec<f64> = point
            .iter()
            .zip(&grad)
            .map(|(p, g)| p - step * g)
            .collect();
        let r = residual(&candidate);
        if r < current {
            point = candidate;
            current = r;
            step *= 1.5;
        } else {
            step *= 0.5;
        }
    }

    if last_gnorm > TRILATERATION_GRAD_EPS && anchors_collinear(samples) {
        return Err(CoordsError::DegenerateGeometry);
    }

    // Normalized residual as the confidence estimate.
    let mean_rtt = samples
        .iter()
        .map(|s| s.measured_rtt_ms)
        .sum::<f64>()
        .max(1e-9)
        / samples.len() as f64;
    let rms = (current / samples.len() as f64).sqrt();
    let error_estimate = (rms / mean_rtt.max(1e-9)).clamp(MIN_ERROR, 1.0);

    Ok(VivaldiCoordinate {
        position: point,
        height: 0.0,
        error_estimate,
    })
}

// Predicted RTT from a free point (height 0) to an anchor coordinate.
fn range(point: &[f64], anchor: &VivaldiCoordinate) -> f64 {
    euclid(point, &anchor.position) + anchor.height
}

// Least-squares solution of the linearized range equations
// 2(a_i - a_0)·x = |a_i|^2 - |a_0|^2 - (r_i^2 - r_0^2), i = 1..n,
// via the normal equations. None when the anchor spread does not pin
// down every dimension.
fn linear_seed(samples: &[RttSample], dim: usize) -> Option<Vec<f64>> {
    let base = &samples[0];
    let r0 = (base.measured_rtt_ms - base.peer_coordinate.height).max(0.0);
    let sq = |p: &[f64]| p.iter().map(|x| x * x).sum::<f64>();
    let mut ata = vec![vec![0.0; dim]; dim];
    let mut atb = vec![0.0; dim];
    for s in &samples[1..] {
        let ri = (s.measured_rtt_ms - s.peer_coordinate.height).max(0.0);
        let row: Vec<f64> = s
            .peer_coordinate
            .position
            .iter()
            .zip(&base.peer_coordinate.position)
            .map(|(a, b)| 2.0 * (a - b))
            .collect();
        let b = sq(&s.peer_coordinate.position) - sq(&base.peer_coordinate.position)
            - (ri * ri - r0 * r0);
        for i in 0..dim {
            for j in 0..dim {
                ata[i][j] += row[i] * row[j];
            }
            atb[i] += row[i] * b;
        }
    }
    solve(&mut ata, &mut atb)
}

// Gaussian elimination with partial pivoting; None on a singular system.
fn solve(a: &mut [Vec<f64>], b: &mut [f64]) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-9 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let s: f64 = (col + 1..n).map(|k| a[col][k] * x[k]).sum();
        x[col] = (b[col] - s) / a[col][col];
    }
    Some(x)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn anchors_collinear(samples: &[RttSample]) -> bool {
    let base = &samples[0].peer_coordinate.position;
    let mut first_dir: Option<Vec<f64>> = None;
    for s in &samples[1..] {
        let v: Vec<f64> = s
            .peer_coordinate
            .position
            .iter()
            .zip(base)
            .map(|(a, b)| a - b)
            .collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-9 {
            continue;
        }
        let unit: Vec<f64> = v.iter().map(|x| x / n).collect();
        match &first_dir {
            None => first_dir = Some(unit),
            Some(u) => {
                let dot: f64 = u.iter().zip(&unit).map(|(a, b)| a * b).sum();
                if dot.abs() < 1.0 - 1e-9 {
                    return false;
                }
            }
        }
    }
    true
}
