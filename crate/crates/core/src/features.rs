//! Feature construction from per-frame driving records.
//!
//! Inside features come from facial point motions: per frame, horizontal
//! displacements are binned at `(-∞,-2), [-2,0), [0,2), [2,∞)` pixels and
//! motion angles (mapped to `[0, 2π)`) at the four quadrants, plus the
//! face-center movement, giving `φ ∈ R⁹`. Twenty consecutive `φ` are summed
//! and Euclidean-normalized into one chunk feature `Z`. Outside features take
//! the lane/artifact bits of the chunk's last frame and speed statistics over
//! the trailing five seconds.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{InsideFeature, ManeuverClass, OutsideFeature, DIM_Z};

/// Chunk length in seconds; one model time step.
pub const CHUNK_DURATION_S: f64 = 0.8;
/// Frames aggregated into one chunk (0.8 s at 25 Hz).
pub const FRAMES_PER_CHUNK: usize = 20;
/// Anticipation context length in seconds.
pub const DEFAULT_HORIZON_S: f64 = 5.0;
/// Trailing window for the speed statistics, in seconds.
pub const SPEED_WINDOW_S: f64 = 5.0;

/// Per-frame driving signals, merged onto the inside-camera clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    /// Seconds; strictly increasing within a trace.
    pub t: f64,
    /// Pixel displacements of matched facial points versus the previous frame.
    pub point_motions: Vec<(f64, f64)>,
    /// Horizontal displacement of the face center, pixels.
    pub face_center_dx: f64,
    pub lane_left: u8,
    pub lane_right: u8,
    pub road_artifact: u8,
    /// km/h, non-negative.
    pub speed: f64,
}

/// A full recorded drive.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTrace {
    pub frames: Vec<FrameRecord>,
    /// Hz; 25 for the merged capture clock.
    pub frame_rate: f64,
}

impl RawTrace {
    pub fn new(frames: Vec<FrameRecord>, frame_rate: f64) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::invalid("trace must contain at least one frame"));
        }
        if !(frame_rate > 0.0) {
            return Err(Error::invalid("frame_rate must be positive"));
        }
        for pair in frames.windows(2) {
            if !(pair[1].t > pair[0].t) {
                return Err(Error::invalid(format!(
                    "frame times must be strictly increasing ({} then {})",
                    pair[0].t, pair[1].t
                )));
            }
        }
        for f in &frames {
            if f.speed < 0.0 {
                return Err(Error::invalid(format!("speed must be >= 0 at t={}", f.t)));
            }
            if f.lane_left > 1 || f.lane_right > 1 || f.road_artifact > 1 {
                return Err(Error::invalid(format!(
                    "binary frame fields must be 0 or 1 at t={}",
                    f.t
                )));
            }
        }
        Ok(RawTrace { frames, frame_rate })
    }

    pub fn start_time(&self) -> f64 {
        self.frames[0].t
    }

    pub fn end_time(&self) -> f64 {
        self.frames[self.frames.len() - 1].t
    }

    /// Index of the last frame with `t <= time` (with a small tolerance for
    /// accumulated float error in frame clocks).
    pub(crate) fn frame_at_or_before(&self, time: f64) -> Option<usize> {
        let t = time + 1e-9;
        match self
            .frames
            .binary_search_by(|f| f.t.partial_cmp(&t).expect("frame times are finite"))
        {
            Ok(i) => Some(i),
            Err(0) => None,
            Err(i) => Some(i - 1),
        }
    }
}

/// A ground-truth maneuver event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub maneuver: ManeuverClass,
    /// Maneuver onset, seconds.
    pub t_start: f64,
}

/// Labeled sequences extracted from a trace, plus warnings for annotations
/// that had to be skipped.
#[derive(Debug, Clone)]
pub struct FeaturizeOutcome {
    pub sequences: Vec<crate::model::FeatureSequence>,
    pub warnings: Vec<String>,
}

/// Per-frame facial feature `φ(face) ∈ R⁹`: four horizontal-motion bins,
/// four angular-motion bins, and the face-center movement. Counts are raw;
/// normalization happens at chunk aggregation.
pub fn face_histogram(frame: &FrameRecord) -> DVector<f64> {
    let mut phi = DVector::zeros(DIM_Z);
    for &(dx, dy) in &frame.point_motions {
        let h = if dx < -2.0 {
            0
        } else if dx < 0.0 {
            1
        } else if dx < 2.0 {
            2
        } else {
            3
        };
        phi[h] += 1.0;

        let mut angle = dy.atan2(dx);
        if angle < 0.0 {
            angle += std::f64::consts::TAU;
        }
        // Half-open quadrant bins over [0, 2π).
        let q = ((angle / std::f64::consts::FRAC_PI_2) as usize).min(3);
        phi[4 + q] += 1.0;
    }
    phi[8] = frame.face_center_dx;
    phi
}

/// Sum twenty per-frame `φ` vectors and normalize to unit Euclidean norm.
/// An all-zero sum stays the zero vector.
pub fn aggregate_inside(phis: &[DVector<f64>]) -> Result<InsideFeature> {
    if phis.len() != FRAMES_PER_CHUNK {
        return Err(Error::invalid(format!(
            "chunk must contain exactly {FRAMES_PER_CHUNK} frames, got {}",
            phis.len()
        )));
    }
    let mut sum = DVector::zeros(DIM_Z);
    for phi in phis {
        if phi.len() != DIM_Z {
            return Err(Error::invalid(format!(
                "per-frame feature must have dim {DIM_Z}, got {}",
                phi.len()
            )));
        }
        sum += phi;
    }
    let norm = sum.norm();
    if norm > 0.0 {
        sum /= norm;
    }
    InsideFeature::new(sum)
}

/// Outside feature for one chunk: lane/artifact bits from the chunk's last
/// frame, speed statistics over the trailing window.
pub fn outside_vector(chunk: &[FrameRecord], speed_window: &[f64]) -> Result<OutsideFeature> {
    let last = chunk
        .last()
        .ok_or_else(|| Error::invalid("chunk must contain at least one frame"))?;
    if speed_window.is_empty() {
        return Err(Error::invalid("speed window must be non-empty"));
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for &s in speed_window {
        min = min.min(s);
        max = max.max(s);
        sum += s;
    }
    let out = OutsideFeature {
        lane_left: last.lane_left,
        lane_right: last.lane_right,
        road_artifact: last.road_artifact,
        speed_avg: sum / speed_window.len() as f64,
        speed_max: max,
        speed_min: min,
    };
    out.validate()?;
    Ok(out)
}

/// Build the `k_chunks` chunk features for the window of
/// `k_chunks * FRAMES_PER_CHUNK` frames ending at `end_idx` (inclusive).
pub(crate) fn window_features(
    trace: &RawTrace,
    end_idx: usize,
    k_chunks: usize,
) -> Result<(Vec<OutsideFeature>, Vec<InsideFeature>)> {
    let needed = k_chunks * FRAMES_PER_CHUNK;
    if end_idx + 1 < needed {
        return Err(Error::invalid(format!(
            "window needs {needed} frames but only {} are available",
            end_idx + 1
        )));
    }
    let start = end_idx + 1 - needed;
    let mut xs = Vec::with_capacity(k_chunks);
    let mut zs = Vec::with_capacity(k_chunks);
    for c in 0..k_chunks {
        let lo = start + c * FRAMES_PER_CHUNK;
        let hi = lo + FRAMES_PER_CHUNK; // exclusive
        let chunk = &trace.frames[lo..hi];
        let phis: Vec<DVector<f64>> = chunk.iter().map(face_histogram).collect();
        zs.push(aggregate_inside(&phis)?);

        // Trailing speed window ends at the chunk's last frame and may reach
        // back before the feature window (or be clipped at the trace start).
        let chunk_end_t = trace.frames[hi - 1].t;
        let mut w_lo = hi - 1;
        while w_lo > 0 && trace.frames[w_lo - 1].t >= chunk_end_t - SPEED_WINDOW_S - 1e-9 {
            w_lo -= 1;
        }
        let speeds: Vec<f64> = trace.frames[w_lo..hi].iter().map(|f| f.speed).collect();
        xs.push(outside_vector(chunk, &speeds)?);
    }
    Ok((xs, zs))
}

/// Chunks per horizon window.
pub fn chunks_per_horizon(horizon_s: f64) -> usize {
    (horizon_s / CHUNK_DURATION_S).floor() as usize
}

fn frames_per_chunk_for(rate: f64) -> Result<()> {
    let fpc = (CHUNK_DURATION_S * rate).round() as usize;
    if fpc != FRAMES_PER_CHUNK {
        return Err(Error::invalid(format!(
            "trace frame rate {rate} Hz is not supported; chunks are {FRAMES_PER_CHUNK} frames at 25 Hz"
        )));
    }
    Ok(())
}

/// Slice a trace into one labeled sequence per annotation.
///
/// Each sequence covers the `K = floor(horizon / 0.8)` most recent full
/// chunks ending at the annotation's start time; the oldest partial chunk of
/// the horizon is dropped. Annotations without enough preceding frames are
/// skipped with a warning.
pub fn featurize_trace(
    trace: &RawTrace,
    annotations: &[Annotation],
    horizon_s: f64,
) -> Result<FeaturizeOutcome> {
    if !(horizon_s > 0.0) {
        return Err(Error::invalid("horizon must be positive"));
    }
    frames_per_chunk_for(trace.frame_rate)?;
    let k = chunks_per_horizon(horizon_s);
    if k == 0 {
        return Err(Error::invalid("horizon shorter than one chunk"));
    }

    let mut sequences = Vec::new();
    let mut warnings = Vec::new();
    for ann in annotations {
        let end_idx = trace.frame_at_or_before(ann.t_start);
        let usable = match end_idx {
            Some(idx) if idx + 1 >= k * FRAMES_PER_CHUNK => idx,
            _ => {
                warnings.push(format!(
                    "skipping {} at t={}: fewer than {} frames before the maneuver",
                    ann.maneuver,
                    ann.t_start,
                    k * FRAMES_PER_CHUNK
                ));
                continue;
            }
        };
        let (xs, zs) = window_features(trace, usable, k)?;
        sequences.push(crate::model::FeatureSequence::new(
            ann.maneuver,
            xs,
            zs,
            CHUNK_DURATION_S,
        )?);
    }
    Ok(FeaturizeOutcome {
        sequences,
        warnings,
    })
}
