//! Synthetic driving-episode generator.
//!
//! Episodes carry the qualitative structure the model feeds on: a directional
//! head-motion burst at a variable lead time before each maneuver, lane bits
//! consistent with maneuver legality, an artifact bit raised when approaching
//! turns, and lower speeds near turns. The injected cue times are recorded in
//! the episode so tests can verify the variable-lead-time property directly.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::features::{Annotation, FrameRecord, RawTrace, DEFAULT_HORIZON_S};
use crate::model::ManeuverClass;

/// Minimum spacing between scheduled maneuvers, seconds.
pub const MANEUVER_SPACING_S: f64 = 10.0;
/// Tracked facial points per frame.
const POINTS_PER_FRAME: usize = 15;
/// Burst amplitude fraction at cue onset; grows linearly to 1 at the
/// maneuver start. The growth is the temporal signature an autoregressive
/// emission can track.
const BURST_START_FRACTION: f64 = 0.4;
/// Vertical motion fraction added during turn bursts (weak angular cue).
const TURN_DY_FRACTION: f64 = 0.35;
/// Rate of brief sideways glances during straight driving, per minute.
const GLANCE_RATE_PER_MIN: f64 = 6.0;
/// Glance length range, seconds (at most one chunk).
const GLANCE_LEN_S: (f64, f64) = (0.3, 0.7);
/// Glance amplitude range as a fraction of the cue strength.
const GLANCE_AMP_FRACTION: (f64, f64) = (0.3, 0.55);

/// Generator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub duration_s: f64,
    pub frame_rate: f64,
    pub maneuver_rate_per_min: f64,
    /// Cue lead time before the maneuver is drawn uniformly from this range.
    pub cue_lead_range_s: (f64, f64),
    /// Peak per-point pixel displacement of an injected burst.
    pub cue_strength: f64,
    /// Standard deviation of the background point-motion noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            duration_s: 300.0,
            frame_rate: 25.0,
            maneuver_rate_per_min: 2.0,
            cue_lead_range_s: (1.0, 5.0),
            cue_strength: 6.0,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_rate != 25.0 {
            return Err(Error::invalid("generator only supports the 25 Hz merged clock"));
        }
        if !(self.duration_s >= 2.0 * DEFAULT_HORIZON_S) {
            return Err(Error::invalid(format!(
                "duration must cover at least two horizons ({} s)",
                2.0 * DEFAULT_HORIZON_S
            )));
        }
        let (lo, hi) = self.cue_lead_range_s;
        if !(lo > 0.0 && lo <= hi && hi <= DEFAULT_HORIZON_S) {
            return Err(Error::invalid(format!(
                "cue lead range must satisfy 0 < min <= max <= {DEFAULT_HORIZON_S}"
            )));
        }
        if self.cue_strength < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::invalid("cue_strength and noise_sigma must be >= 0"));
        }
        if self.maneuver_rate_per_min < 0.0 {
            return Err(Error::invalid("maneuver rate must be >= 0"));
        }
        Ok(())
    }
}

/// A generated trace with its ground truth.
#[derive(Debug, Clone)]
pub struct Episode {
    pub trace: RawTrace,
    /// Maneuver and driving-straight annotations, ordered by time.
    pub annotations: Vec<Annotation>,
    /// Burst onset times, aligned with the time-ordered maneuver annotations.
    pub injected_cue_times: Vec<f64>,
}

/// A scheduled maneuver. Its head-motion burst starts at the cue time and
/// runs until the maneuver onset: the cue appears at a variable lead but the
/// scanning continues until the driver acts.
struct ScheduledManeuver {
    class: ManeuverClass,
    t_start: f64,
    cue_time: f64,
    /// Per-event amplitude jitter; the autoregressive layer can track the
    /// resulting envelope while a memoryless emission cannot.
    amplitude: f64,
}

/// Piecewise-constant background bit with segment lengths in [15, 45] s.
struct BitTrack {
    /// (segment end time, value)
    segments: Vec<(f64, u8)>,
}

impl BitTrack {
    fn sample(duration: f64, p_on: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut segments = Vec::new();
        let mut t = 0.0;
        while t < duration {
            let len = rng.random_range(15.0..45.0);
            let bit = u8::from(rng.random_range(0.0..1.0) < p_on);
            t += len;
            segments.push((t, bit));
        }
        BitTrack { segments }
    }

    fn at(&self, t: f64) -> u8 {
        for &(end, bit) in &self.segments {
            if t < end {
                return bit;
            }
        }
        self.segments.last().map(|&(_, b)| b).unwrap_or(0)
    }
}

fn schedule_maneuvers(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<Vec<(f64, ManeuverClass)>> {
    let n = (cfg.duration_s / 60.0 * cfg.maneuver_rate_per_min).round() as usize;
    if n == 0 {
        return Ok(Vec::new());
    }
    // Leave one horizon of context before the first maneuver and a little
    // room after the last.
    let first = DEFAULT_HORIZON_S + 1.0;
    let last = cfg.duration_s - 2.0;
    let span = last - first - (n - 1) as f64 * MANEUVER_SPACING_S;
    if span < 0.0 {
        return Err(Error::invalid(format!(
            "{n} maneuvers with {MANEUVER_SPACING_S} s spacing do not fit in {} s",
            cfg.duration_s
        )));
    }
    let mut offsets: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=span.max(f64::MIN_POSITIVE))).collect();
    offsets.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let times: Vec<f64> = offsets
        .iter()
        .enumerate()
        .map(|(i, &u)| first + u + i as f64 * MANEUVER_SPACING_S)
        .collect();

    // Balanced classes, shuffled.
    let mut classes: Vec<ManeuverClass> = ManeuverClass::MANEUVERS
        .iter()
        .copied()
        .cycle()
        .take(n.div_ceil(4) * 4)
        .collect();
    classes.shuffle(rng);
    classes.truncate(n);
    Ok(times.into_iter().zip(classes).collect())
}

/// Driving-straight annotation times: clear-background instants at least 8 s
/// from any maneuver, plus one instant shortly after each maneuver so the
/// straight class covers windows where a burst has already resolved.
fn sample_straight_times(
    cfg: &ScenarioConfig,
    maneuvers: &[ScheduledManeuver],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut candidates: Vec<f64> = Vec::new();
    let mut t = DEFAULT_HORIZON_S + 1.0;
    while t < cfg.duration_s - 1.0 {
        let clear = maneuvers
            .iter()
            .all(|m| (t - m.t_start).abs() >= 8.0);
        if clear {
            candidates.push(t);
        }
        t += 1.0;
    }
    candidates.shuffle(rng);
    candidates.truncate(count);
    for m in maneuvers {
        let t = m.t_start + rng.random_range(1.5..4.5);
        if t < cfg.duration_s - 1.0 {
            candidates.push(t);
        }
    }
    candidates.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    candidates
}

fn side_sign(class: ManeuverClass) -> f64 {
    match class {
        ManeuverClass::LeftLaneChange | ManeuverClass::LeftTurn => -1.0,
        ManeuverClass::RightLaneChange | ManeuverClass::RightTurn => 1.0,
        ManeuverClass::DrivingStraight => 0.0,
    }
}

fn is_turn(class: ManeuverClass) -> bool {
    matches!(class, ManeuverClass::LeftTurn | ManeuverClass::RightTurn)
}

/// Speed multiplier near turns: rides down to 0.35 approaching the turn and
/// recovers after it.
fn turn_dip(t: f64, turn_t: f64) -> f64 {
    let rel = t - turn_t;
    if rel < -5.0 || rel > 3.0 {
        1.0
    } else if rel < -1.0 {
        // ramp 1 -> 0.35 over [-5, -1]
        1.0 + (rel + 5.0) / 4.0 * (0.35 - 1.0)
    } else if rel <= 1.0 {
        0.35
    } else {
        // ramp 0.35 -> 1 over [1, 3]
        0.35 + (rel - 1.0) / 2.0 * (1.0 - 0.35)
    }
}

/// Generate one episode. Deterministic for a fixed config.
pub fn generate_episode(cfg: &ScenarioConfig) -> Result<Episode> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let speed_jitter = Normal::new(0.0, 0.3).expect("valid sigma");

    let schedule = schedule_maneuvers(cfg, &mut rng)?;
    let maneuvers: Vec<ScheduledManeuver> = schedule
        .into_iter()
        .map(|(t_start, class)| {
            let lead = rng.random_range(cfg.cue_lead_range_s.0..=cfg.cue_lead_range_s.1);
            ScheduledManeuver {
                class,
                t_start,
                cue_time: t_start - lead,
                amplitude: cfg.cue_strength * rng.random_range(0.85..1.15),
            }
        })
        .collect();

    let lane_left_bg = BitTrack::sample(cfg.duration_s, 0.7, &mut rng);
    let lane_right_bg = BitTrack::sample(cfg.duration_s, 0.7, &mut rng);
    let speed_phase = rng.random_range(0.0..std::f64::consts::TAU);

    let straight_times = sample_straight_times(cfg, &maneuvers, maneuvers.len().max(2), &mut rng);

    // Brief sideways glances during straight driving: sub-cue blips, never
    // longer than a chunk, with no growth. Only sustained growing bursts
    // precede maneuvers.
    let n_glances = (cfg.duration_s / 60.0 * GLANCE_RATE_PER_MIN).round() as usize;
    let glances: Vec<(f64, f64, f64, f64)> = (0..n_glances)
        .map(|_| {
            let t = rng.random_range(1.0..cfg.duration_s - 1.0);
            let len = rng.random_range(GLANCE_LEN_S.0..GLANCE_LEN_S.1);
            let side = if rng.random_range(0.0..1.0f64) < 0.5 { -1.0 } else { 1.0 };
            let amp = cfg.cue_strength
                * rng.random_range(GLANCE_AMP_FRACTION.0..GLANCE_AMP_FRACTION.1);
            (t, len, side, amp)
        })
        .filter(|&(t, len, _, _)| {
            maneuvers
                .iter()
                .all(|m| t + len < m.cue_time - 1.0 || t > m.t_start + 1.0)
        })
        .collect();

    let n_frames = (cfg.duration_s * cfg.frame_rate).round() as usize;
    let mut frames = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let t = i as f64 / cfg.frame_rate;

        let burst = maneuvers
            .iter()
            .find(|m| t >= m.cue_time && t <= m.t_start);
        let (mut dx_mean, mut dy_mean) = (0.0, 0.0);
        if let Some(m) = burst {
            // Amplitude grows linearly from cue onset to the maneuver start.
            let lead = m.t_start - m.cue_time;
            let growth =
                BURST_START_FRACTION + (1.0 - BURST_START_FRACTION) * (t - m.cue_time) / lead;
            dx_mean = side_sign(m.class) * m.amplitude * growth;
            if is_turn(m.class) {
                dy_mean = TURN_DY_FRACTION * m.amplitude * growth;
            }
        } else if let Some(&(_, _, side, amp)) =
            glances.iter().find(|&&(g, len, _, _)| t >= g && t <= g + len)
        {
            dx_mean = side * amp;
        }

        let point_motions: Vec<(f64, f64)> = (0..POINTS_PER_FRAME)
            .map(|_| {
                (
                    dx_mean + noise.sample(&mut rng),
                    dy_mean + noise.sample(&mut rng),
                )
            })
            .collect();
        let face_center_dx = 0.5 * dx_mean + noise.sample(&mut rng);

        let mut lane_left = lane_left_bg.at(t);
        let mut lane_right = lane_right_bg.at(t);
        let mut road_artifact = 0u8;
        for m in &maneuvers {
            let rel = t - m.t_start;
            match m.class {
                ManeuverClass::LeftLaneChange if (-8.0..=2.0).contains(&rel) => lane_left = 1,
                ManeuverClass::RightLaneChange if (-8.0..=2.0).contains(&rel) => lane_right = 1,
                ManeuverClass::LeftTurn | ManeuverClass::RightTurn
                    if (-6.0..=1.0).contains(&rel) =>
                {
                    road_artifact = 1
                }
                _ => {}
            }
        }

        let base = 55.0 + 10.0 * (std::f64::consts::TAU * t / 53.0 + speed_phase).sin();
        let dip = maneuvers
            .iter()
            .filter(|m| is_turn(m.class))
            .map(|m| turn_dip(t, m.t_start))
            .fold(1.0, f64::min);
        let speed = (base * dip + speed_jitter.sample(&mut rng)).max(0.0);

        frames.push(FrameRecord {
            t,
            point_motions,
            face_center_dx,
            lane_left,
            lane_right,
            road_artifact,
            speed,
        });
    }

    let mut annotations: Vec<Annotation> = maneuvers
        .iter()
        .map(|m| Annotation {
            maneuver: m.class,
            t_start: m.t_start,
        })
        .collect();
    let injected_cue_times: Vec<f64> = maneuvers.iter().map(|m| m.cue_time).collect();
    annotations.extend(straight_times.into_iter().map(|t| Annotation {
        maneuver: ManeuverClass::DrivingStraight,
        t_start: t,
    }));
    annotations.sort_by(|a, b| a.t_start.partial_cmp(&b.t_start).expect("finite"));

    Ok(Episode {
        trace: RawTrace::new(frames, cfg.frame_rate)?,
        annotations,
        injected_cue_times,
    })
}
