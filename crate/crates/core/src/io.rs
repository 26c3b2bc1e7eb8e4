//! File formats: JSON-lines for bulk data (traces, datasets, events), one
//! JSON document for model sets. Unknown fields are rejected and parse errors
//! carry the offending line number. Numbers round-trip exactly (shortest
//! representation that reparses to the same double).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::anticipation::PredictionEvent;
use crate::error::{Error, Result};
use crate::features::{Annotation, FrameRecord, RawTrace};
use crate::model::{
    FeatureSequence, InsideFeature, ManeuverClass, ManeuverModelSet, ModelParams, OutsideFeature,
    StateParams, DIM_AUG, DIM_X, DIM_Z, NUM_CLASSES,
};

/// Version tag written into model files.
pub const MODEL_FORMAT_VERSION: u32 = 1;

fn parse_err(line: usize, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

fn schema_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Schema {
        line,
        message: msg.into(),
    }
}

fn jsonl_records<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<(usize, T)>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(line).map_err(|e| parse_err(line_no, e))?;
        out.push((line_no, record));
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: impl Iterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for record in records {
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::Internal(format!("serialization failed: {e}")))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Write a trace as one frame record per line. The frame rate is implied by
/// the frame clock and re-inferred on load.
pub fn save_trace(path: impl AsRef<Path>, trace: &RawTrace) -> Result<()> {
    write_jsonl(path.as_ref(), trace.frames.iter())
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<RawTrace> {
    let text = fs::read_to_string(path)?;
    let records = jsonl_records::<FrameRecord>(&text)?;
    if records.is_empty() {
        return Err(schema_err(0, "trace file contains no frames"));
    }
    let frames: Vec<FrameRecord> = records.into_iter().map(|(_, f)| f).collect();
    let rate = if frames.len() >= 2 {
        let span = frames[frames.len() - 1].t - frames[0].t;
        let raw = (frames.len() - 1) as f64 / span;
        (raw * 1000.0).round() / 1000.0
    } else {
        25.0
    };
    RawTrace::new(frames, rate)
}

/// Annotations are a single JSON array.
pub fn save_annotations(path: impl AsRef<Path>, annotations: &[Annotation]) -> Result<()> {
    let text = serde_json::to_string_pretty(annotations)
        .map_err(|e| Error::Internal(format!("serialization failed: {e}")))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| parse_err(e.line(), e))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetLine {
    label: ManeuverClass,
    chunk_duration_s: f64,
    x: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
}

/// Feature datasets are one labeled sequence per line.
pub fn save_dataset(path: impl AsRef<Path>, dataset: &[FeatureSequence]) -> Result<()> {
    write_jsonl(
        path.as_ref(),
        dataset.iter().map(|seq| DatasetLine {
            label: seq.label,
            chunk_duration_s: seq.chunk_duration_s,
            x: seq
                .inputs
                .iter()
                .map(|f| f.to_vector().iter().copied().collect())
                .collect(),
            z: seq
                .outputs
                .iter()
                .map(|f| f.as_vector().iter().copied().collect())
                .collect(),
        }),
    )
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<FeatureSequence>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (line_no, record) in jsonl_records::<DatasetLine>(&text)? {
        if record.x.len() != record.z.len() || record.x.is_empty() {
            return Err(schema_err(
                line_no,
                format!(
                    "x and z must have equal length K >= 1, got {} and {}",
                    record.x.len(),
                    record.z.len()
                ),
            ));
        }
        let mut inputs = Vec::with_capacity(record.x.len());
        for row in &record.x {
            if row.len() != DIM_X {
                return Err(schema_err(
                    line_no,
                    format!("x rows must have {DIM_X} entries, got {}", row.len()),
                ));
            }
            let v = DVector::from_row_slice(row);
            inputs.push(OutsideFeature::from_vector(&v).map_err(|e| schema_err(line_no, e.to_string()))?);
        }
        let mut outputs = Vec::with_capacity(record.z.len());
        for row in &record.z {
            if row.len() != DIM_Z {
                return Err(schema_err(
                    line_no,
                    format!("z rows must have {DIM_Z} entries, got {}", row.len()),
                ));
            }
            outputs.push(
                InsideFeature::new(DVector::from_row_slice(row))
                    .map_err(|e| schema_err(line_no, e.to_string()))?,
            );
        }
        out.push(
            FeatureSequence::new(record.label, inputs, outputs, record.chunk_duration_s)
                .map_err(|e| schema_err(line_no, e.to_string()))?,
        );
    }
    Ok(out)
}

/// Prediction events are one record per line.
pub fn save_events(path: impl AsRef<Path>, events: &[PredictionEvent]) -> Result<()> {
    write_jsonl(path.as_ref(), events.iter())
}

pub fn load_events(path: impl AsRef<Path>) -> Result<Vec<PredictionEvent>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (line_no, ev) in jsonl_records::<PredictionEvent>(&text)? {
        let sum: f64 = ev.posteriors.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(schema_err(
                line_no,
                format!("posteriors must sum to 1, got {sum}"),
            ));
        }
        out.push(ev);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    mu: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    /// Row-major 9×9.
    sigma: Vec<f64>,
    w_rows: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    states: Vec<StateFile>,
    w0: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSetFile {
    format_version: u32,
    n_states: usize,
    dim_x: usize,
    dim_z: usize,
    /// Class prior in canonical class order.
    prior: Vec<f64>,
    models: ModelsByClass,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelsByClass {
    left_lane_change: ModelFile,
    right_lane_change: ModelFile,
    left_turn: ModelFile,
    right_turn: ModelFile,
    driving_straight: ModelFile,
}

fn vec_of(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

fn model_to_file(params: &ModelParams) -> ModelFile {
    ModelFile {
        states: params
            .states
            .iter()
            .map(|st| StateFile {
                mu: vec_of(&st.mu),
                a: vec_of(&st.a),
                b: vec_of(&st.b),
                sigma: row_major(&st.sigma),
                w_rows: st.w_rows.iter().map(vec_of).collect(),
            })
            .collect(),
        w0: params.w0.iter().map(vec_of).collect(),
    }
}

fn fixed_len(v: &[f64], len: usize, what: &str) -> Result<DVector<f64>> {
    if v.len() != len {
        return Err(schema_err(0, format!("{what} must have {len} entries, got {}", v.len())));
    }
    Ok(DVector::from_row_slice(v))
}

fn model_from_file(file: &ModelFile, n_states: usize, class: ManeuverClass) -> Result<ModelParams> {
    if file.states.len() != n_states {
        return Err(schema_err(
            0,
            format!(
                "model {class} has {} states, header says {n_states}",
                file.states.len()
            ),
        ));
    }
    let states = file
        .states
        .iter()
        .enumerate()
        .map(|(i, st)| {
            let ctx = |field: &str| format!("model {class} state {i}: {field}");
            if st.sigma.len() != DIM_Z * DIM_Z {
                return Err(schema_err(
                    0,
                    format!("{} must have {} entries, got {}", ctx("sigma"), DIM_Z * DIM_Z, st.sigma.len()),
                ));
            }
            if st.w_rows.len() != n_states {
                return Err(schema_err(
                    0,
                    format!("{} must have {n_states} rows, got {}", ctx("w_rows"), st.w_rows.len()),
                ));
            }
            Ok(StateParams {
                mu: fixed_len(&st.mu, DIM_Z, &ctx("mu"))?,
                a: fixed_len(&st.a, DIM_X, &ctx("a"))?,
                b: fixed_len(&st.b, DIM_Z, &ctx("b"))?,
                sigma: DMatrix::from_row_slice(DIM_Z, DIM_Z, &st.sigma),
                w_rows: st
                    .w_rows
                    .iter()
                    .map(|row| fixed_len(row, DIM_AUG, &ctx("w_rows")))
                    .collect::<Result<_>>()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if file.w0.len() != n_states {
        return Err(schema_err(
            0,
            format!("model {class} w0 must have {n_states} rows, got {}", file.w0.len()),
        ));
    }
    let w0 = file
        .w0
        .iter()
        .map(|row| fixed_len(row, DIM_AUG, &format!("model {class} w0 row")))
        .collect::<Result<_>>()?;
    ModelParams::new(states, w0)
}

/// Serialize a model set to its JSON document.
pub fn model_set_to_json(set: &ManeuverModelSet) -> Result<String> {
    let models = set.models();
    let n_states = models[0].n_states;
    for (class, m) in ManeuverClass::ALL.iter().zip(models.iter()) {
        if m.n_states != n_states {
            return Err(Error::invalid(format!(
                "model {class} has {} states but the set header needs a single count ({n_states})",
                m.n_states
            )));
        }
    }
    let file = ModelSetFile {
        format_version: MODEL_FORMAT_VERSION,
        n_states,
        dim_x: DIM_X,
        dim_z: DIM_Z,
        prior: set.prior().to_vec(),
        models: ModelsByClass {
            left_lane_change: model_to_file(&models[0]),
            right_lane_change: model_to_file(&models[1]),
            left_turn: model_to_file(&models[2]),
            right_turn: model_to_file(&models[3]),
            driving_straight: model_to_file(&models[4]),
        },
    };
    serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Internal(format!("serialization failed: {e}")))
}

pub fn model_set_from_json(text: &str) -> Result<ManeuverModelSet> {
    let file: ModelSetFile = serde_json::from_str(text).map_err(|e| parse_err(e.line(), e))?;
    if file.format_version != MODEL_FORMAT_VERSION {
        return Err(schema_err(
            0,
            format!(
                "unsupported format_version {} (expected {MODEL_FORMAT_VERSION})",
                file.format_version
            ),
        ));
    }
    if file.dim_x != DIM_X || file.dim_z != DIM_Z {
        return Err(schema_err(
            0,
            format!("dimensions must be ({DIM_X}, {DIM_Z}), got ({}, {})", file.dim_x, file.dim_z),
        ));
    }
    if file.prior.len() != NUM_CLASSES {
        return Err(schema_err(0, "prior must have one entry per class"));
    }
    let by_class = &file.models;
    let models = [
        model_from_file(&by_class.left_lane_change, file.n_states, ManeuverClass::LeftLaneChange)?,
        model_from_file(&by_class.right_lane_change, file.n_states, ManeuverClass::RightLaneChange)?,
        model_from_file(&by_class.left_turn, file.n_states, ManeuverClass::LeftTurn)?,
        model_from_file(&by_class.right_turn, file.n_states, ManeuverClass::RightTurn)?,
        model_from_file(&by_class.driving_straight, file.n_states, ManeuverClass::DrivingStraight)?,
    ];
    let prior: [f64; NUM_CLASSES] = file
        .prior
        .clone()
        .try_into()
        .expect("length checked above");
    ManeuverModelSet::new(models, prior)
}

pub fn save_model_set(path: impl AsRef<Path>, set: &ManeuverModelSet) -> Result<()> {
    fs::write(path, model_set_to_json(set)? + "\n")?;
    Ok(())
}

pub fn load_model_set(path: impl AsRef<Path>) -> Result<ManeuverModelSet> {
    let text = fs::read_to_string(path)?;
    model_set_from_json(&text)
}
