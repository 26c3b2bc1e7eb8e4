//! Model data types and the transition/emission parameterizations.
//!
//! One model is learned per maneuver class. A model has `|S|` latent states;
//! state `i` carries `θᵢ = {μᵢ, aᵢ, bᵢ, Σᵢ, wᵢⱼ}`:
//!
//! * transitions leaving state `i` are log-linear in the outside features,
//!   `P(Yₜ=j | Yₜ₋₁=i, Xₜ) = softmax_j(wᵢⱼ · [1; Xₜ])`;
//! * emissions are Gaussian with an input- and autoregression-modulated mean,
//!   `Zₜ | Yₜ=i ~ N(cᵢₜ μᵢ, Σᵢ)` with `cᵢₜ = 1 + aᵢ·Xₜ + bᵢ·Zₜ₋₁`.
//!
//! The initial state distribution uses the same log-linear form from a
//! virtual start state with weights `w0ⱼ`. Weight vectors act on the
//! augmented input `[1; X] ∈ R⁷` so a bias term is always available.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{all_finite_mat, all_finite_vec, softmax, GaussianFactor};

/// Outside (input) feature dimension: two lane bits, one road-artifact bit,
/// average/maximum/minimum speed.
pub const DIM_X: usize = 6;
/// Inside (output) feature dimension: 4 horizontal motion bins, 4 angular
/// motion bins, mean face-center movement.
pub const DIM_Z: usize = 9;
/// Dimension of the augmented input `[1; X]` that transition weights act on.
pub const DIM_AUG: usize = DIM_X + 1;
/// Number of maneuver classes, including `driving_straight`.
pub const NUM_CLASSES: usize = 5;

/// The five anticipated classes. `DrivingStraight` is the designated
/// "no maneuver" class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManeuverClass {
    LeftLaneChange,
    RightLaneChange,
    LeftTurn,
    RightTurn,
    DrivingStraight,
}

impl ManeuverClass {
    /// All classes in canonical order. This order fixes serialization layout
    /// and posterior tie-breaking.
    pub const ALL: [ManeuverClass; NUM_CLASSES] = [
        ManeuverClass::LeftLaneChange,
        ManeuverClass::RightLaneChange,
        ManeuverClass::LeftTurn,
        ManeuverClass::RightTurn,
        ManeuverClass::DrivingStraight,
    ];

    /// The four actual maneuvers, in tie-breaking order.
    pub const MANEUVERS: [ManeuverClass; 4] = [
        ManeuverClass::LeftLaneChange,
        ManeuverClass::RightLaneChange,
        ManeuverClass::LeftTurn,
        ManeuverClass::RightTurn,
    ];

    pub fn index(self) -> usize {
        match self {
            ManeuverClass::LeftLaneChange => 0,
            ManeuverClass::RightLaneChange => 1,
            ManeuverClass::LeftTurn => 2,
            ManeuverClass::RightTurn => 3,
            ManeuverClass::DrivingStraight => 4,
        }
    }

    pub fn from_index(idx: usize) -> Option<Self> {
        Self::ALL.get(idx).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ManeuverClass::LeftLaneChange => "left_lane_change",
            ManeuverClass::RightLaneChange => "right_lane_change",
            ManeuverClass::LeftTurn => "left_turn",
            ManeuverClass::RightTurn => "right_turn",
            ManeuverClass::DrivingStraight => "driving_straight",
        }
    }
}

impl fmt::Display for ManeuverClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ManeuverClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown maneuver class '{s}'")))
    }
}

/// Outside-vehicle features for one chunk, assembled as `X ∈ R⁶`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutsideFeature {
    pub lane_left: u8,
    pub lane_right: u8,
    pub road_artifact: u8,
    /// km/h over the trailing speed window
    pub speed_avg: f64,
    pub speed_max: f64,
    pub speed_min: f64,
}

impl OutsideFeature {
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_vec(vec![
            self.lane_left as f64,
            self.lane_right as f64,
            self.road_artifact as f64,
            self.speed_avg,
            self.speed_max,
            self.speed_min,
        ])
    }

    pub fn from_vector(x: &DVector<f64>) -> Result<Self> {
        if x.len() != DIM_X {
            return Err(Error::invalid(format!(
                "outside feature must have dim {DIM_X}, got {}",
                x.len()
            )));
        }
        let bit = |v: f64, name: &str| -> Result<u8> {
            if v == 0.0 {
                Ok(0)
            } else if v == 1.0 {
                Ok(1)
            } else {
                Err(Error::invalid(format!("{name} must be exactly 0 or 1, got {v}")))
            }
        };
        let f = OutsideFeature {
            lane_left: bit(x[0], "lane_left")?,
            lane_right: bit(x[1], "lane_right")?,
            road_artifact: bit(x[2], "road_artifact")?,
            speed_avg: x[3],
            speed_max: x[4],
            speed_min: x[5],
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lane_left > 1 || self.lane_right > 1 || self.road_artifact > 1 {
            return Err(Error::invalid("binary outside features must be 0 or 1"));
        }
        if !(self.speed_min >= 0.0 && self.speed_min <= self.speed_avg && self.speed_avg <= self.speed_max)
        {
            return Err(Error::invalid(format!(
                "speeds must satisfy 0 <= min <= avg <= max, got ({}, {}, {})",
                self.speed_min, self.speed_avg, self.speed_max
            )));
        }
        Ok(())
    }
}

/// Inside-vehicle features for one chunk, `Z ∈ R⁹`. When produced by chunk
/// aggregation the vector has unit Euclidean norm or is all-zero.
#[derive(Debug, Clone, PartialEq)]
pub struct InsideFeature(DVector<f64>);

impl InsideFeature {
    pub fn new(z: DVector<f64>) -> Result<Self> {
        if z.len() != DIM_Z {
            return Err(Error::invalid(format!(
                "inside feature must have dim {DIM_Z}, got {}",
                z.len()
            )));
        }
        Ok(InsideFeature(z))
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }
}

/// One labeled training/evaluation instance: aligned input and output
/// sequences of equal length `K ≥ 1`, each chunk covering `chunk_duration_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub label: ManeuverClass,
    pub inputs: Vec<OutsideFeature>,
    pub outputs: Vec<InsideFeature>,
    pub chunk_duration_s: f64,
}

impl FeatureSequence {
    pub fn new(
        label: ManeuverClass,
        inputs: Vec<OutsideFeature>,
        outputs: Vec<InsideFeature>,
        chunk_duration_s: f64,
    ) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != outputs.len() {
            return Err(Error::invalid(format!(
                "inputs and outputs must have equal length K >= 1, got {} and {}",
                inputs.len(),
                outputs.len()
            )));
        }
        Ok(FeatureSequence {
            label,
            inputs,
            outputs,
            chunk_duration_s,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Plain vector views of the sequence, for the numeric pipeline.
    pub fn to_xz(&self) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let xs = self.inputs.iter().map(|x| x.to_vector()).collect();
        let zs = self.outputs.iter().map(|z| z.as_vector().clone()).collect();
        (xs, zs)
    }
}

/// Parameters of one latent state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateParams {
    /// Base emission mean μᵢ ∈ R⁹.
    pub mu: DVector<f64>,
    /// Input modulation weights aᵢ ∈ R⁶.
    pub a: DVector<f64>,
    /// Autoregression modulation weights bᵢ ∈ R⁹.
    pub b: DVector<f64>,
    /// Emission covariance Σᵢ, 9×9 symmetric positive definite.
    pub sigma: DMatrix<f64>,
    /// Transition weights wᵢⱼ ∈ R⁷ over the augmented input, one per
    /// destination state.
    pub w_rows: Vec<DVector<f64>>,
}

impl StateParams {
    /// A state with zero modulation and transition weights, unit covariance
    /// scaled by `sigma_scale`, and the given mean.
    pub fn isotropic(mu: DVector<f64>, sigma_scale: f64, n_states: usize) -> Self {
        StateParams {
            mu,
            a: DVector::zeros(DIM_X),
            b: DVector::zeros(DIM_Z),
            sigma: DMatrix::identity(DIM_Z, DIM_Z) * sigma_scale,
            w_rows: vec![DVector::zeros(DIM_AUG); n_states],
        }
    }
}

/// Full parameter set `Θ = {θᵢ}` of one maneuver model, plus the
/// virtual-start weights `w0` for the initial state distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub n_states: usize,
    pub dim_x: usize,
    pub dim_z: usize,
    pub states: Vec<StateParams>,
    pub w0: Vec<DVector<f64>>,
}

impl ModelParams {
    pub fn new(states: Vec<StateParams>, w0: Vec<DVector<f64>>) -> Result<Self> {
        let params = ModelParams {
            n_states: states.len(),
            dim_x: DIM_X,
            dim_z: DIM_Z,
            states,
            w0,
        };
        let violations = params.validate();
        if violations.is_empty() {
            Ok(params)
        } else {
            Err(Error::invalid(violations.join("; ")))
        }
    }

    /// Reports every structural defect: dimension mismatches, non-symmetric
    /// or non-positive-definite covariances, non-finite entries. Diagnostic:
    /// never fails, an empty list means the parameters are valid.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.n_states == 0 {
            out.push("model must have at least one state".to_string());
        }
        if self.states.len() != self.n_states {
            out.push(format!(
                "states has length {} but n_states is {}",
                self.states.len(),
                self.n_states
            ));
        }
        if self.w0.len() != self.n_states {
            out.push(format!(
                "w0 has {} rows but n_states is {}",
                self.w0.len(),
                self.n_states
            ));
        }
        for (j, row) in self.w0.iter().enumerate() {
            if row.len() != DIM_AUG {
                out.push(format!("w0[{j}] has dim {}, expected {DIM_AUG}", row.len()));
            } else if !all_finite_vec(row) {
                out.push(format!("w0[{j}] has a non-finite entry"));
            }
        }
        for (i, st) in self.states.iter().enumerate() {
            if st.mu.len() != self.dim_z {
                out.push(format!("state {i}: mu has dim {}, expected {}", st.mu.len(), self.dim_z));
            } else if !all_finite_vec(&st.mu) {
                out.push(format!("state {i}: mu has a non-finite entry"));
            }
            if st.a.len() != self.dim_x {
                out.push(format!("state {i}: a has dim {}, expected {}", st.a.len(), self.dim_x));
            } else if !all_finite_vec(&st.a) {
                out.push(format!("state {i}: a has a non-finite entry"));
            }
            if st.b.len() != self.dim_z {
                out.push(format!("state {i}: b has dim {}, expected {}", st.b.len(), self.dim_z));
            } else if !all_finite_vec(&st.b) {
                out.push(format!("state {i}: b has a non-finite entry"));
            }
            if st.sigma.nrows() != self.dim_z || st.sigma.ncols() != self.dim_z {
                out.push(format!(
                    "state {i}: sigma is {}x{}, expected {}x{}",
                    st.sigma.nrows(),
                    st.sigma.ncols(),
                    self.dim_z,
                    self.dim_z
                ));
            } else if !all_finite_mat(&st.sigma) {
                out.push(format!("state {i}: sigma has a non-finite entry"));
            } else {
                let asym = (&st.sigma - st.sigma.transpose()).abs().max();
                let scale = st.sigma.abs().max().max(1.0);
                if asym > 1e-9 * scale {
                    out.push(format!("state {i}: sigma is not symmetric"));
                }
                if GaussianFactor::new(&st.sigma).is_err() {
                    out.push(format!("state {i}: sigma is not positive definite"));
                }
            }
            if st.w_rows.len() != self.n_states {
                out.push(format!(
                    "state {i}: w_rows has {} rows, expected {}",
                    st.w_rows.len(),
                    self.n_states
                ));
            }
            for (j, row) in st.w_rows.iter().enumerate() {
                if row.len() != DIM_AUG {
                    out.push(format!(
                        "state {i}: w_rows[{j}] has dim {}, expected {DIM_AUG}",
                        row.len()
                    ));
                } else if !all_finite_vec(row) {
                    out.push(format!("state {i}: w_rows[{j}] has a non-finite entry"));
                }
            }
        }
        out
    }
}

/// One model per maneuver class plus a prior over the classes, indexed in
/// [`ManeuverClass::ALL`] order.
#[derive(Debug, Clone)]
pub struct ManeuverModelSet {
    models: [ModelParams; NUM_CLASSES],
    prior: [f64; NUM_CLASSES],
}

impl ManeuverModelSet {
    pub fn new(models: [ModelParams; NUM_CLASSES], prior: [f64; NUM_CLASSES]) -> Result<Self> {
        if prior.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::invalid("prior entries must be finite and >= 0"));
        }
        let sum: f64 = prior.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "prior must sum to 1 within 1e-12, got {sum}"
            )));
        }
        Ok(ManeuverModelSet { models, prior })
    }

    pub fn with_uniform_prior(models: [ModelParams; NUM_CLASSES]) -> Self {
        ManeuverModelSet {
            models,
            prior: [1.0 / NUM_CLASSES as f64; NUM_CLASSES],
        }
    }

    pub fn model(&self, class: ManeuverClass) -> &ModelParams {
        &self.models[class.index()]
    }

    pub fn models(&self) -> &[ModelParams; NUM_CLASSES] {
        &self.models
    }

    pub fn prior(&self) -> &[f64; NUM_CLASSES] {
        &self.prior
    }
}

/// `[1; x]`, the augmented input the log-linear weights act on.
pub(crate) fn augment_input(x: &DVector<f64>) -> DVector<f64> {
    let mut u = DVector::zeros(x.len() + 1);
    u[0] = 1.0;
    u.rows_mut(1, x.len()).copy_from(x);
    u
}

fn check_dim(v: &DVector<f64>, dim: usize, what: &str) -> Result<()> {
    if v.len() != dim {
        return Err(Error::invalid(format!(
            "{what} must have dim {dim}, got {}",
            v.len()
        )));
    }
    Ok(())
}

/// Probability of moving from the given state to each destination state,
/// `softmax_j(wᵢⱼ · [1; x])`.
pub fn transition_row(state: &StateParams, x: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim(x, DIM_X, "x")?;
    let u = augment_input(x);
    let mut scores = Vec::with_capacity(state.w_rows.len());
    for row in &state.w_rows {
        check_dim(row, DIM_AUG, "w row")?;
        scores.push(row.dot(&u));
    }
    if scores.is_empty() {
        return Err(Error::invalid("state has no transition weight rows"));
    }
    Ok(DVector::from_vec(softmax(&scores)))
}

/// Initial state distribution, the same log-linear form evaluated from a
/// virtual start state: `softmax_j(w0ⱼ · [1; x₁])`.
pub fn initial_row(params: &ModelParams, x1: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim(x1, DIM_X, "x1")?;
    let u = augment_input(x1);
    let mut scores = Vec::with_capacity(params.w0.len());
    for row in &params.w0 {
        check_dim(row, DIM_AUG, "w0 row")?;
        scores.push(row.dot(&u));
    }
    if scores.is_empty() {
        return Err(Error::invalid("model has no initial weight rows"));
    }
    Ok(DVector::from_vec(softmax(&scores)))
}

/// The modulation scalar `cᵢₜ = 1 + aᵢ·x + bᵢ·z_prev`.
pub fn modulation(state: &StateParams, x: &DVector<f64>, z_prev: &DVector<f64>) -> Result<f64> {
    check_dim(x, DIM_X, "x")?;
    check_dim(z_prev, DIM_Z, "z_prev")?;
    Ok(1.0 + state.a.dot(x) + state.b.dot(z_prev))
}

/// The modulated emission mean `μᵢₜ = cᵢₜ μᵢ`.
pub fn emission_mean(
    state: &StateParams,
    x: &DVector<f64>,
    z_prev: &DVector<f64>,
) -> Result<DVector<f64>> {
    Ok(&state.mu * modulation(state, x, z_prev)?)
}

/// Log density of `z` under the state's emission distribution
/// `N(z | cᵢₜ μᵢ, Σᵢ)`.
pub fn emission_logpdf(
    state: &StateParams,
    z: &DVector<f64>,
    x: &DVector<f64>,
    z_prev: &DVector<f64>,
) -> Result<f64> {
    check_dim(z, DIM_Z, "z")?;
    let mean = emission_mean(state, x, z_prev)?;
    let factor = GaussianFactor::new(&state.sigma)?;
    Ok(factor.logpdf(z, &mean))
}

/// Sample a latent path and output sequence for the given inputs.
/// `Z₀` is the zero vector. Deterministic for a fixed seed.
pub fn sample_sequence(
    params: &ModelParams,
    inputs: &[DVector<f64>],
    seed: u64,
) -> Result<(Vec<usize>, Vec<DVector<f64>>)> {
    if inputs.is_empty() {
        return Err(Error::invalid("inputs must have length K >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factors: Vec<GaussianFactor> = params
        .states
        .iter()
        .map(|st| GaussianFactor::new(&st.sigma))
        .collect::<Result<_>>()?;

    let mut path = Vec::with_capacity(inputs.len());
    let mut outputs: Vec<DVector<f64>> = Vec::with_capacity(inputs.len());
    let mut z_prev = DVector::zeros(DIM_Z);
    for (t, x) in inputs.iter().enumerate() {
        let probs = if t == 0 {
            initial_row(params, x)?
        } else {
            transition_row(&params.states[path[t - 1]], x)?
        };
        let state = sample_categorical(&probs, &mut rng);
        let mean = emission_mean(&params.states[state], x, &z_prev)?;
        let z = factors[state].sample(&mean, &mut rng);
        path.push(state);
        z_prev = z.clone();
        outputs.push(z);
    }
    Ok((path, outputs))
}

fn sample_categorical<R: rand::Rng>(probs: &DVector<f64>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
