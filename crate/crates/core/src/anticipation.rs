//! The streaming anticipation protocol and its evaluation.
//!
//! Every `stride_s` the trailing horizon window is featurized and the five
//! class posteriors computed. A maneuver is predicted when its posterior
//! clears the threshold; the stream then emits no further maneuver
//! predictions until `lockout_s` elapses or a ground-truth maneuver occurs,
//! whichever happens earlier. Scoring matches each maneuver prediction to
//! the next ground-truth maneuver within `lockout_s`:
//!
//! * correct class → `tp` (lead time recorded)
//! * wrong class → `fp`
//! * no maneuver in the window → `fpp`
//! * maneuvers never matched → `mp`
//!
//! with `Pr = tp/(tp+fp+fpp)` and `Re = tp/(tp+fp+mp)`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{chunks_per_horizon, window_features, Annotation, RawTrace, FRAMES_PER_CHUNK};
use crate::inference::anticipate_posteriors;
use crate::learning::{fit_all, EmConfig};
use crate::model::{FeatureSequence, ManeuverClass, ManeuverModelSet, NUM_CLASSES};

/// Streaming protocol settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub stride_s: f64,
    pub horizon_s: f64,
    /// Posterior a maneuver must reach to be predicted, in (0, 1).
    pub threshold: f64,
    pub lockout_s: f64,
}

impl ProtocolConfig {
    pub fn new(threshold: f64) -> Self {
        ProtocolConfig {
            stride_s: 0.8,
            horizon_s: 5.0,
            threshold,
            lockout_s: 5.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.stride_s > 0.0 && self.horizon_s > 0.0 && self.lockout_s > 0.0) {
            return Err(Error::invalid("stride, horizon and lockout must be positive"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid("threshold must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// One anticipation step's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionEvent {
    pub t: f64,
    pub posteriors: [f64; NUM_CLASSES],
    /// `driving_straight` when no maneuver cleared the threshold (or the
    /// stream was locked out).
    pub predicted: ManeuverClass,
}

/// The §-style prediction tallies.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricCounts {
    pub tp: u64,
    pub fp: u64,
    pub fpp: u64,
    pub mp: u64,
    /// One lead time per true prediction, seconds.
    pub tp_lead_times_s: Vec<f64>,
}

/// Counts plus the derived precision/recall/F1 and mean time-to-maneuver.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub counts: MetricCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean lead time over true predictions; 0 when there are none.
    pub mean_time_to_maneuver_s: f64,
}

/// Pick the maneuver to predict: the highest-posterior maneuver class if it
/// clears the threshold, ties broken by fixed class order.
pub(crate) fn gate(posteriors: &[f64; NUM_CLASSES], threshold: f64) -> ManeuverClass {
    let mut best = ManeuverClass::MANEUVERS[0];
    for class in ManeuverClass::MANEUVERS {
        if posteriors[class.index()] > posteriors[best.index()] {
            best = class;
        }
    }
    if posteriors[best.index()] >= threshold {
        best
    } else {
        ManeuverClass::DrivingStraight
    }
}

/// Tracks the lockout window, including early release when a ground-truth
/// maneuver occurs.
struct Lockout {
    lockout_s: f64,
    maneuver_times: Vec<f64>,
    last_prediction: Option<f64>,
}

impl Lockout {
    fn new(annotations: Option<&[Annotation]>, lockout_s: f64) -> Self {
        let mut maneuver_times: Vec<f64> = annotations
            .unwrap_or(&[])
            .iter()
            .filter(|a| a.maneuver != ManeuverClass::DrivingStraight)
            .map(|a| a.t_start)
            .collect();
        maneuver_times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
        Lockout {
            lockout_s,
            maneuver_times,
            last_prediction: None,
        }
    }

    fn locked(&self, t: f64) -> bool {
        match self.last_prediction {
            None => false,
            Some(last) => {
                if t >= last + self.lockout_s {
                    return false;
                }
                // A maneuver between the prediction and now releases the lock.
                !self
                    .maneuver_times
                    .iter()
                    .any(|&m| m > last && m <= t + 1e-9)
            }
        }
    }

    fn predicted(&mut self, t: f64) {
        self.last_prediction = Some(t);
    }
}

/// Run the streaming protocol over a trace. When annotations are supplied,
/// ground-truth maneuvers release the lockout early, as the protocol
/// specifies; without them only the lockout timer applies.
pub fn stream_anticipate(
    models: &ManeuverModelSet,
    trace: &RawTrace,
    annotations: Option<&[Annotation]>,
    cfg: &ProtocolConfig,
) -> Result<Vec<PredictionEvent>> {
    cfg.validate()?;
    let k = chunks_per_horizon(cfg.horizon_s);
    if k == 0 {
        return Err(Error::invalid("horizon shorter than one chunk"));
    }
    let t0 = trace.start_time() + cfg.horizon_s;
    if t0 > trace.end_time() + 1e-9 {
        return Err(Error::invalid(
            "trace is shorter than one anticipation horizon",
        ));
    }

    let mut lockout = Lockout::new(annotations, cfg.lockout_s);
    let mut events = Vec::new();
    let mut step = 0usize;
    loop {
        let t = t0 + step as f64 * cfg.stride_s;
        if t > trace.end_time() + 1e-9 {
            break;
        }
        let end_idx = trace
            .frame_at_or_before(t)
            .ok_or_else(|| Error::invalid(format!("no frames at or before t={t}")))?;
        if end_idx + 1 < k * FRAMES_PER_CHUNK {
            return Err(Error::invalid(format!(
                "anticipation step at t={t}: fewer than {} frames available",
                k * FRAMES_PER_CHUNK
            )));
        }
        let (xs, zs) = window_features(trace, end_idx, k)
            .map_err(|e| Error::invalid(format!("anticipation step at t={t}: {e}")))?;
        let xvec: Vec<_> = xs.iter().map(|x| x.to_vector()).collect();
        let zvec: Vec<_> = zs.iter().map(|z| z.as_vector().clone()).collect();
        let posteriors = anticipate_posteriors(models, &xvec, &zvec)
            .map_err(|e| Error::invalid(format!("anticipation step at t={t}: {e}")))?;

        let mut predicted = gate(&posteriors, cfg.threshold);
        if predicted != ManeuverClass::DrivingStraight {
            if lockout.locked(t) {
                predicted = ManeuverClass::DrivingStraight;
            } else {
                lockout.predicted(t);
            }
        }
        events.push(PredictionEvent {
            t,
            posteriors,
            predicted,
        });
        step += 1;
    }
    Ok(events)
}

/// Re-apply the threshold gate and lockout to an existing posterior stream.
/// Used to trace F1-over-threshold curves without re-running inference.
pub fn regate(
    events: &[PredictionEvent],
    annotations: Option<&[Annotation]>,
    cfg: &ProtocolConfig,
) -> Result<Vec<PredictionEvent>> {
    cfg.validate()?;
    check_ordered(events)?;
    let mut lockout = Lockout::new(annotations, cfg.lockout_s);
    Ok(events
        .iter()
        .map(|ev| {
            let mut predicted = gate(&ev.posteriors, cfg.threshold);
            if predicted != ManeuverClass::DrivingStraight {
                if lockout.locked(ev.t) {
                    predicted = ManeuverClass::DrivingStraight;
                } else {
                    lockout.predicted(ev.t);
                }
            }
            PredictionEvent {
                t: ev.t,
                posteriors: ev.posteriors,
                predicted,
            }
        })
        .collect())
}

fn check_ordered(events: &[PredictionEvent]) -> Result<()> {
    for pair in events.windows(2) {
        if pair[1].t < pair[0].t {
            return Err(Error::invalid(format!(
                "events must be time-ordered ({} after {})",
                pair[1].t, pair[0].t
            )));
        }
    }
    Ok(())
}

/// A matched (predicted, actual) pair; lead time present only for true
/// predictions. `mp` entries appear as (driving_straight, actual).
struct MatchedPair {
    predicted: ManeuverClass,
    actual: ManeuverClass,
    lead_s: Option<f64>,
}

fn match_events(
    events: &[PredictionEvent],
    annotations: &[Annotation],
    cfg: &ProtocolConfig,
) -> Result<Vec<MatchedPair>> {
    cfg.validate()?;
    check_ordered(events)?;
    let mut maneuvers: Vec<&Annotation> = annotations
        .iter()
        .filter(|a| a.maneuver != ManeuverClass::DrivingStraight)
        .collect();
    maneuvers.sort_by(|a, b| a.t_start.partial_cmp(&b.t_start).expect("finite times"));
    let mut taken = vec![false; maneuvers.len()];
    let mut pairs = Vec::new();

    for ev in events {
        if ev.predicted == ManeuverClass::DrivingStraight {
            continue;
        }
        let hit = maneuvers.iter().enumerate().position(|(idx, ann)| {
            !taken[idx]
                && ann.t_start >= ev.t - 1e-9
                && ann.t_start <= ev.t + cfg.lockout_s + 1e-9
        });
        match hit {
            Some(idx) => {
                taken[idx] = true;
                let lead = (maneuvers[idx].t_start - ev.t).max(0.0);
                pairs.push(MatchedPair {
                    predicted: ev.predicted,
                    actual: maneuvers[idx].maneuver,
                    lead_s: (ev.predicted == maneuvers[idx].maneuver).then_some(lead),
                });
            }
            None => pairs.push(MatchedPair {
                predicted: ev.predicted,
                actual: ManeuverClass::DrivingStraight,
                lead_s: None,
            }),
        }
    }
    for (idx, ann) in maneuvers.iter().enumerate() {
        if !taken[idx] {
            pairs.push(MatchedPair {
                predicted: ManeuverClass::DrivingStraight,
                actual: ann.maneuver,
                lead_s: None,
            });
        }
    }
    Ok(pairs)
}

/// Tally prediction events against ground truth.
pub fn score(
    events: &[PredictionEvent],
    annotations: &[Annotation],
    cfg: &ProtocolConfig,
) -> Result<ScoreReport> {
    let pairs = match_events(events, annotations, cfg)?;
    let mut counts = MetricCounts::default();
    for pair in &pairs {
        match (pair.predicted, pair.actual) {
            (ManeuverClass::DrivingStraight, _) => counts.mp += 1,
            (_, ManeuverClass::DrivingStraight) => counts.fpp += 1,
            (p, a) if p == a => {
                counts.tp += 1;
                counts
                    .tp_lead_times_s
                    .push(pair.lead_s.expect("tp pairs carry a lead time"));
            }
            _ => counts.fp += 1,
        }
    }
    Ok(derive_scores(counts))
}

pub(crate) fn derive_scores(counts: MetricCounts) -> ScoreReport {
    let tp = counts.tp as f64;
    let pred_denom = (counts.tp + counts.fp + counts.fpp) as f64;
    let man_denom = (counts.tp + counts.fp + counts.mp) as f64;
    let precision = if pred_denom > 0.0 { tp / pred_denom } else { 0.0 };
    let recall = if man_denom > 0.0 { tp / man_denom } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let mean_ttm = if counts.tp_lead_times_s.is_empty() {
        0.0
    } else {
        counts.tp_lead_times_s.iter().sum::<f64>() / counts.tp_lead_times_s.len() as f64
    };
    ScoreReport {
        counts,
        precision,
        recall,
        f1,
        mean_time_to_maneuver_s: mean_ttm,
    }
}

/// A 5×5 count matrix: rows are predicted classes, columns actual classes,
/// both in [`ManeuverClass::ALL`] order. False positive predictions land in
/// the `driving_straight` column, missed predictions in its row.
pub fn confusion_matrix(
    events: &[PredictionEvent],
    annotations: &[Annotation],
    cfg: &ProtocolConfig,
) -> Result<[[u64; NUM_CLASSES]; NUM_CLASSES]> {
    let pairs = match_events(events, annotations, cfg)?;
    let mut matrix = [[0u64; NUM_CLASSES]; NUM_CLASSES];
    for pair in &pairs {
        matrix[pair.predicted.index()][pair.actual.index()] += 1;
    }
    Ok(matrix)
}

/// F1 as a function of the prediction threshold, re-gating a fixed posterior
/// stream.
pub fn threshold_f1_curve(
    events: &[PredictionEvent],
    annotations: &[Annotation],
    cfg: &ProtocolConfig,
    thresholds: &[f64],
) -> Result<Vec<(f64, f64)>> {
    thresholds
        .iter()
        .map(|&th| {
            let mut gated_cfg = cfg.clone();
            gated_cfg.threshold = th;
            let gated = regate(events, Some(annotations), &gated_cfg)?;
            Ok((th, score(&gated, annotations, &gated_cfg)?.f1))
        })
        .collect()
}

/// F1 when predictions are forced at a fixed time-to-maneuver: for each
/// ground-truth maneuver, the event nearest `t_start - lead` (within half a
/// stride) is gated and scored against that maneuver alone.
pub fn time_to_maneuver_f1_curve(
    events: &[PredictionEvent],
    annotations: &[Annotation],
    cfg: &ProtocolConfig,
    leads: &[f64],
) -> Result<Vec<(f64, f64)>> {
    cfg.validate()?;
    check_ordered(events)?;
    let maneuvers: Vec<&Annotation> = annotations
        .iter()
        .filter(|a| a.maneuver != ManeuverClass::DrivingStraight)
        .collect();
    let mut curve = Vec::with_capacity(leads.len());
    for &lead in leads {
        let mut counts = MetricCounts::default();
        for ann in &maneuvers {
            let target = ann.t_start - lead;
            let nearest = events
                .iter()
                .filter(|ev| (ev.t - target).abs() <= cfg.stride_s / 2.0 + 1e-9)
                .min_by(|a, b| {
                    (a.t - target)
                        .abs()
                        .partial_cmp(&(b.t - target).abs())
                        .expect("finite times")
                });
            match nearest {
                Some(ev) => match gate(&ev.posteriors, cfg.threshold) {
                    ManeuverClass::DrivingStraight => counts.mp += 1,
                    p if p == ann.maneuver => {
                        counts.tp += 1;
                        counts.tp_lead_times_s.push(lead);
                    }
                    _ => counts.fp += 1,
                },
                None => counts.mp += 1,
            }
        }
        curve.push((lead, derive_scores(counts).f1));
    }
    Ok(curve)
}

/// The default threshold grid for sweeps: 0.05 to 0.95 in steps of 0.05.
pub fn default_threshold_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

/// One sweep cell result.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub n_states: usize,
    pub threshold: f64,
    pub fold: usize,
    pub tp: u64,
    pub fp: u64,
    pub fpp: u64,
    pub mp: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Sweep results plus the argmax-F1 configuration.
#[derive(Debug, Clone)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub best_n_states: usize,
    pub best_threshold: f64,
    pub best_mean_f1: f64,
}

/// Deterministic fold assignment: per class, indices are shuffled with the
/// seed and dealt round-robin, so every fold sees every class.
pub fn assign_folds(
    datasets: &BTreeMap<ManeuverClass, Vec<FeatureSequence>>,
    n_folds: usize,
    seed: u64,
) -> Result<BTreeMap<ManeuverClass, Vec<usize>>> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    if n_folds < 2 {
        return Err(Error::invalid("cross-validation needs at least 2 folds"));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for class in ManeuverClass::ALL {
        let seqs = datasets
            .get(&class)
            .ok_or_else(|| Error::invalid(format!("no sequences for class {class}")))?;
        if seqs.len() < n_folds {
            return Err(Error::invalid(format!(
                "class {class} has {} sequences, fewer than {n_folds} folds",
                seqs.len()
            )));
        }
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        order.shuffle(&mut rng);
        let mut folds = vec![0usize; seqs.len()];
        for (pos, &idx) in order.iter().enumerate() {
            folds[idx] = pos % n_folds;
        }
        out.insert(class, folds);
    }
    Ok(out)
}

/// Classify one held-out sequence through the threshold gate and update the
/// sequence-level tallies.
fn tally_sequence(
    models: &ManeuverModelSet,
    seq: &FeatureSequence,
    threshold: f64,
    counts: &mut MetricCounts,
) -> Result<()> {
    let (xs, zs) = seq.to_xz();
    let posteriors = anticipate_posteriors(models, &xs, &zs)?;
    let predicted = gate(&posteriors, threshold);
    match (predicted, seq.label) {
        (ManeuverClass::DrivingStraight, ManeuverClass::DrivingStraight) => {}
        (ManeuverClass::DrivingStraight, _) => counts.mp += 1,
        (_, ManeuverClass::DrivingStraight) => counts.fpp += 1,
        (p, l) if p == l => counts.tp += 1,
        _ => counts.fp += 1,
    }
    Ok(())
}

fn mix_seed(seed: u64, n_states: usize, fold: usize) -> u64 {
    seed.wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add((n_states as u64) << 32)
        .wrapping_add(fold as u64)
}

/// Cross-validated sweep over state counts and prediction thresholds.
/// Training happens once per (n_states, fold) cell; every threshold is then
/// evaluated on that cell's validation sequences.
pub fn sweep(
    datasets: &BTreeMap<ManeuverClass, Vec<FeatureSequence>>,
    state_counts: &[usize],
    thresholds: &[f64],
    n_folds: usize,
    seed: u64,
    base_cfg: &EmConfig,
) -> Result<SweepTable> {
    if state_counts.is_empty() || thresholds.is_empty() {
        return Err(Error::invalid("sweep needs at least one state count and threshold"));
    }
    let folds = assign_folds(datasets, n_folds, seed)?;

    let cells: Vec<(usize, usize)> = state_counts
        .iter()
        .flat_map(|&n| (0..n_folds).map(move |f| (n, f)))
        .collect();

    let cell_rows: Vec<Vec<SweepRow>> = cells
        .par_iter()
        .map(|&(n_states, fold)| -> Result<Vec<SweepRow>> {
            let mut train: BTreeMap<ManeuverClass, Vec<FeatureSequence>> = BTreeMap::new();
            let mut val: Vec<&FeatureSequence> = Vec::new();
            for class in ManeuverClass::ALL {
                let seqs = &datasets[&class];
                let assignment = &folds[&class];
                let mut train_seqs = Vec::new();
                for (i, seq) in seqs.iter().enumerate() {
                    if assignment[i] == fold {
                        val.push(seq);
                    } else {
                        train_seqs.push(seq.clone());
                    }
                }
                train.insert(class, train_seqs);
            }
            let mut cfg = base_cfg.clone();
            cfg.n_states = n_states;
            cfg.seed = mix_seed(seed, n_states, fold);
            let models = fit_all(&train, &cfg)?;

            let mut rows = Vec::with_capacity(thresholds.len());
            for &threshold in thresholds {
                let mut counts = MetricCounts::default();
                for seq in &val {
                    tally_sequence(&models, seq, threshold, &mut counts)?;
                }
                let report = derive_scores(counts);
                rows.push(SweepRow {
                    n_states,
                    threshold,
                    fold,
                    tp: report.counts.tp,
                    fp: report.counts.fp,
                    fpp: report.counts.fpp,
                    mp: report.counts.mp,
                    precision: report.precision,
                    recall: report.recall,
                    f1: report.f1,
                });
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;

    // Rows in deterministic (n_states, threshold, fold) order.
    let mut rows: Vec<SweepRow> = cell_rows.into_iter().flatten().collect();
    rows.sort_by(|a, b| {
        a.n_states
            .cmp(&b.n_states)
            .then(a.threshold.partial_cmp(&b.threshold).expect("finite"))
            .then(a.fold.cmp(&b.fold))
    });

    let mut best = (0usize, 0.0f64, f64::NEG_INFINITY);
    for &n in state_counts {
        for &th in thresholds {
            let fold_f1: Vec<f64> = rows
                .iter()
                .filter(|r| r.n_states == n && r.threshold == th)
                .map(|r| r.f1)
                .collect();
            let mean = fold_f1.iter().sum::<f64>() / fold_f1.len() as f64;
            if mean > best.2 {
                best = (n, th, mean);
            }
        }
    }

    Ok(SweepTable {
        rows,
        best_n_states: best.0,
        best_threshold: best.1,
        best_mean_f1: best.2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FrameRecord;
    use crate::model::{ModelParams, StateParams, DIM_AUG, DIM_Z};
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    fn uniform_models() -> ManeuverModelSet {
        let params = ModelParams::new(
            vec![StateParams::isotropic(DVector::zeros(DIM_Z), 1.0, 1)],
            vec![DVector::zeros(DIM_AUG)],
        )
        .unwrap();
        ManeuverModelSet::with_uniform_prior([
            params.clone(),
            params.clone(),
            params.clone(),
            params.clone(),
            params,
        ])
    }

    fn flat_trace(duration_s: f64) -> RawTrace {
        let n = (duration_s * 25.0) as usize;
        let frames = (0..n)
            .map(|i| FrameRecord {
                t: i as f64 / 25.0,
                point_motions: vec![(0.5, -0.5)],
                face_center_dx: 0.1,
                lane_left: 1,
                lane_right: 1,
                road_artifact: 0,
                speed: 60.0,
            })
            .collect();
        RawTrace::new(frames, 25.0).unwrap()
    }

    #[test]
    fn high_threshold_never_fires() {
        let models = uniform_models();
        let trace = flat_trace(12.0);
        let cfg = ProtocolConfig::new(0.99);
        let events = stream_anticipate(&models, &trace, None, &cfg).unwrap();
        assert!(!events.is_empty());
        assert!(events
            .iter()
            .all(|e| e.predicted == ManeuverClass::DrivingStraight));
        for e in &events {
            assert_relative_eq!(e.posteriors.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn event_timestamps_follow_the_stride_exactly() {
        let models = uniform_models();
        let trace = flat_trace(10.0);
        let cfg = ProtocolConfig::new(0.5);
        let events = stream_anticipate(&models, &trace, None, &cfg).unwrap();
        let t0 = trace.start_time() + cfg.horizon_s;
        for (k, ev) in events.iter().enumerate() {
            assert_eq!(ev.t, t0 + k as f64 * cfg.stride_s);
        }
    }

    fn hot_event(t: f64, class: ManeuverClass, p: f64) -> PredictionEvent {
        let mut posteriors = [(1.0 - p) / 4.0; NUM_CLASSES];
        posteriors[class.index()] = p;
        PredictionEvent {
            t,
            posteriors,
            predicted: ManeuverClass::DrivingStraight,
        }
    }

    #[test]
    fn lockout_suppresses_predictions_for_five_seconds() {
        // left_turn posterior stays above threshold from t = 10 onward.
        let events: Vec<PredictionEvent> = (0..20)
            .map(|k| {
                let t = 8.0 + k as f64 * 0.8;
                if t >= 10.0 {
                    hot_event(t, ManeuverClass::LeftTurn, 0.9)
                } else {
                    hot_event(t, ManeuverClass::LeftTurn, 0.2)
                }
            })
            .collect();
        let cfg = ProtocolConfig::new(0.7);
        let gated = regate(&events, None, &cfg).unwrap();
        let fired: Vec<f64> = gated
            .iter()
            .filter(|e| e.predicted != ManeuverClass::DrivingStraight)
            .map(|e| e.t)
            .collect();
        assert!(!fired.is_empty());
        assert_relative_eq!(fired[0], 10.4, epsilon = 1e-12);
        for pair in fired.windows(2) {
            assert!(
                pair[1] - pair[0] >= cfg.lockout_s - 1e-9,
                "gap {} shorter than lockout",
                pair[1] - pair[0]
            );
        }
        assert!(!gated.iter().any(|e| {
            e.t > fired[0] && e.t < fired[0] + cfg.lockout_s
                && e.predicted != ManeuverClass::DrivingStraight
        }));
    }

    #[test]
    fn ground_truth_maneuver_releases_the_lockout() {
        let events: Vec<PredictionEvent> = (0..20)
            .map(|k| hot_event(8.0 + k as f64 * 0.8, ManeuverClass::LeftTurn, 0.9))
            .collect();
        let annotations = vec![Annotation {
            maneuver: ManeuverClass::LeftTurn,
            t_start: 9.0,
        }];
        let cfg = ProtocolConfig::new(0.7);
        let gated = regate(&events, Some(&annotations), &cfg).unwrap();
        let fired: Vec<f64> = gated
            .iter()
            .filter(|e| e.predicted != ManeuverClass::DrivingStraight)
            .map(|e| e.t)
            .collect();
        // Fires at 8.0; the maneuver at 9.0 releases the lock, so the next
        // step at 9.6 fires again despite the 5 s lockout.
        assert_relative_eq!(fired[0], 8.0, epsilon = 1e-12);
        assert_relative_eq!(fired[1], 9.6, epsilon = 1e-12);
    }

    fn pred(t: f64, class: ManeuverClass) -> PredictionEvent {
        let mut posteriors = [0.05; NUM_CLASSES];
        posteriors[class.index()] = 0.8;
        PredictionEvent {
            t,
            posteriors,
            predicted: class,
        }
    }

    #[test]
    fn score_reproduces_the_hand_built_fixture() {
        // tp=2 (leads 2.0 and 3.2), fp=1, fpp=1, mp=1.
        let events = vec![
            pred(8.0, ManeuverClass::LeftTurn),
            pred(26.8, ManeuverClass::RightTurn),
            pred(48.0, ManeuverClass::RightLaneChange),
            pred(90.0, ManeuverClass::LeftTurn),
        ];
        let annotations = vec![
            Annotation { maneuver: ManeuverClass::LeftTurn, t_start: 10.0 },
            Annotation { maneuver: ManeuverClass::RightTurn, t_start: 30.0 },
            Annotation { maneuver: ManeuverClass::LeftLaneChange, t_start: 50.0 },
            Annotation { maneuver: ManeuverClass::RightLaneChange, t_start: 70.0 },
        ];
        let cfg = ProtocolConfig::new(0.5);
        let report = score(&events, &annotations, &cfg).unwrap();
        assert_eq!(
            (report.counts.tp, report.counts.fp, report.counts.fpp, report.counts.mp),
            (2, 1, 1, 1)
        );
        assert_eq!(report.precision, 0.5);
        assert_eq!(report.recall, 0.5);
        assert_eq!(report.f1, 0.5);
        assert_relative_eq!(report.mean_time_to_maneuver_s, 2.6, epsilon = 1e-12);
        assert_eq!(report.counts.tp_lead_times_s.len(), report.counts.tp as usize);
    }

    #[test]
    fn score_perfect_predictions() {
        let events = vec![
            pred(8.0, ManeuverClass::LeftTurn),
            pred(26.8, ManeuverClass::RightTurn),
        ];
        let annotations = vec![
            Annotation { maneuver: ManeuverClass::LeftTurn, t_start: 10.0 },
            Annotation { maneuver: ManeuverClass::RightTurn, t_start: 30.0 },
        ];
        let report = score(&events, &annotations, &ProtocolConfig::new(0.5)).unwrap();
        assert_eq!(report.precision, 1.0);
        assert_eq!(report.recall, 1.0);
        assert_eq!(report.f1, 1.0);

        let matrix = confusion_matrix(&events, &annotations, &ProtocolConfig::new(0.5)).unwrap();
        for (r, row) in matrix.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                let expected = if r == c
                    && (r == ManeuverClass::LeftTurn.index()
                        || r == ManeuverClass::RightTurn.index())
                {
                    1
                } else {
                    0
                };
                assert_eq!(v, expected, "cell ({r}, {c})");
            }
        }
    }

    #[test]
    fn single_hand_lead_is_reported() {
        let events = vec![pred(6.8, ManeuverClass::LeftLaneChange)];
        let annotations = vec![Annotation {
            maneuver: ManeuverClass::LeftLaneChange,
            t_start: 10.0,
        }];
        let report = score(&events, &annotations, &ProtocolConfig::new(0.5)).unwrap();
        assert_eq!(report.counts.tp, 1);
        assert_relative_eq!(report.mean_time_to_maneuver_s, 3.2, epsilon = 1e-12);
    }

    #[test]
    fn all_straight_predictions_fill_the_straight_row() {
        let events: Vec<PredictionEvent> = (0..10)
            .map(|k| hot_event(5.0 + 0.8 * k as f64, ManeuverClass::LeftTurn, 0.3))
            .collect();
        let annotations = vec![
            Annotation { maneuver: ManeuverClass::LeftTurn, t_start: 6.0 },
            Annotation { maneuver: ManeuverClass::RightTurn, t_start: 20.0 },
            Annotation { maneuver: ManeuverClass::LeftLaneChange, t_start: 40.0 },
        ];
        let cfg = ProtocolConfig::new(0.5);
        let matrix = confusion_matrix(&events, &annotations, &cfg).unwrap();
        let straight = ManeuverClass::DrivingStraight.index();
        assert_eq!(matrix[straight][ManeuverClass::LeftTurn.index()], 1);
        assert_eq!(matrix[straight][ManeuverClass::RightTurn.index()], 1);
        assert_eq!(matrix[straight][ManeuverClass::LeftLaneChange.index()], 1);
        assert_eq!(matrix[straight][straight], 0);
        let report = score(&events, &annotations, &cfg).unwrap();
        assert_eq!(report.counts.mp, 3);
        assert_eq!(report.f1, 0.0);
    }

    #[test]
    fn unordered_events_are_rejected() {
        let events = vec![pred(10.0, ManeuverClass::LeftTurn), pred(5.0, ManeuverClass::LeftTurn)];
        assert!(matches!(
            score(&events, &[], &ProtocolConfig::new(0.5)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn raising_threshold_never_adds_predictions() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let events: Vec<PredictionEvent> = (0..200)
            .map(|k| {
                let mut raw = [0.0; NUM_CLASSES];
                for slot in raw.iter_mut() {
                    *slot = rng.random_range(0.0..1.0f64);
                }
                let sum: f64 = raw.iter().sum();
                for slot in raw.iter_mut() {
                    *slot /= sum;
                }
                PredictionEvent {
                    t: k as f64 * 0.8,
                    posteriors: raw,
                    predicted: ManeuverClass::DrivingStraight,
                }
            })
            .collect();
        let mut previous = u64::MAX;
        for th in [0.05, 0.2, 0.4, 0.6, 0.8, 0.95] {
            let cfg = ProtocolConfig::new(th);
            let gated = regate(&events, None, &cfg).unwrap();
            let fired = gated
                .iter()
                .filter(|e| e.predicted != ManeuverClass::DrivingStraight)
                .count() as u64;
            assert!(fired <= previous, "threshold {th} fired {fired} > {previous}");
            previous = fired;
        }
    }

    #[test]
    fn gate_breaks_ties_in_class_order() {
        let posteriors = [0.3, 0.3, 0.2, 0.1, 0.1];
        assert_eq!(gate(&posteriors, 0.25), ManeuverClass::LeftLaneChange);
        let posteriors = [0.1, 0.1, 0.3, 0.3, 0.2];
        assert_eq!(gate(&posteriors, 0.25), ManeuverClass::LeftTurn);
        assert_eq!(gate(&posteriors, 0.35), ManeuverClass::DrivingStraight);
    }
}
