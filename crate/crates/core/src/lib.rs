//! Anticipating driving maneuvers with autoregressive input-output hidden
//! Markov models.
//!
//! One model is trained per maneuver class on sequences of driving context:
//! outside features `X ∈ R⁶` (lane bits, road artifact, speed statistics)
//! condition the latent-state transitions, and inside features `Z ∈ R⁹`
//! (head-motion histograms) are emitted from Gaussians whose means are
//! modulated by both the input and the previous output. Anticipation runs a
//! forward pass under every class model and normalizes the likelihoods into
//! a posterior over maneuvers.
//!
//! The crate covers the full pipeline: feature construction from per-frame
//! records ([`features`]), EM training with closed-form M-step updates
//! ([`learning`]), scaled forward-backward inference ([`inference`]), the
//! streaming anticipation protocol with its precision/recall accounting
//! ([`anticipation`]), a synthetic episode generator ([`synth`]), and file
//! formats ([`io`]).

pub mod anticipation;
pub mod error;
pub mod features;
pub mod inference;
pub mod io;
pub mod learning;
pub mod math;
pub mod model;
pub mod synth;

pub use anticipation::{
    confusion_matrix, score, stream_anticipate, sweep, MetricCounts, PredictionEvent,
    ProtocolConfig, ScoreReport, SweepRow, SweepTable,
};
pub use error::{Error, Result};
pub use features::{
    aggregate_inside, face_histogram, featurize_trace, outside_vector, Annotation, FrameRecord,
    RawTrace,
};
pub use inference::{
    anticipate_posteriors, brute_force_loglik, forward_backward, sequence_loglik, PosteriorStats,
};
pub use learning::{e_step, fit_all, fit_em, init_params, m_step, q_value, Ablation, EmConfig, FitReport};
pub use model::{
    emission_logpdf, emission_mean, initial_row, sample_sequence, transition_row, FeatureSequence,
    InsideFeature, ManeuverClass, ManeuverModelSet, ModelParams, OutsideFeature, StateParams,
    DIM_X, DIM_Z, NUM_CLASSES,
};
pub use synth::{generate_episode, Episode, ScenarioConfig};
