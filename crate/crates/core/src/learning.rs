//! EM training of one model per maneuver class.
//!
//! The M-step is a single block-coordinate sweep in the fixed order
//! μ → Σ → a → b → (w, w0). With `cᵢₜ = 1 + aᵢ·Xₜ + bᵢ·Zₜ₋₁`:
//!
//! * `μᵢ = Σ cᵢₜ γᵢₜ Zₜ / Σ cᵢₜ² γᵢₜ`
//! * `Σᵢ = Σ γᵢₜ (Zₜ - cᵢₜμᵢ)(Zₜ - cᵢₜμᵢ)ᵀ / Σ γᵢₜ + ridge`
//! * `aᵢ = [Σ γᵢₜ XₜXₜᵀ]⁻¹ Σ γᵢₜ [Xₜ ZₜᵀΣᵢ⁻¹μᵢ / μᵢᵀΣᵢ⁻¹μᵢ − Xₜ − Xₜ Zₜ₋₁ᵀbᵢ]`
//! * `bᵢ = [Σ γᵢₜ Zₜ₋₁Zₜ₋₁ᵀ]⁻¹ Σ γᵢₜ [Zₜ₋₁ ZₜᵀΣᵢ⁻¹μᵢ / μᵢᵀΣᵢ⁻¹μᵢ − Zₜ₋₁ − Zₜ₋₁ Xₜᵀaᵢ]`
//!
//! Each closed form maximizes Q over its own block with the other blocks at
//! their most recent values, so the sweep is generalized EM. Transition and
//! initial weights ascend the ξ-weighted softmax log-likelihood with an L2
//! penalty; a decrease of the unpenalized objective reverts that row so the
//! raw Q never moves down.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::inference::{forward_backward_xz, PosteriorStats, PreparedModel};
use crate::math::GaussianFactor;
use crate::model::{
    augment_input, initial_row, transition_row, FeatureSequence, ManeuverClass, ManeuverModelSet,
    ModelParams, StateParams, DIM_AUG, DIM_X, DIM_Z,
};

/// Which parts of the full model are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Full model: input-conditioned transitions, input- and
    /// autoregression-modulated emissions.
    AioHmm,
    /// No autoregression: `b` is pinned to zero.
    IoHmm,
    /// Output-only HMM: `a = b = 0` and transition/initial weights are
    /// restricted to their bias coordinate.
    HmmOutput,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::AioHmm => "aio_hmm",
            Ablation::IoHmm => "io_hmm",
            Ablation::HmmOutput => "hmm_output",
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aio_hmm" => Ok(Ablation::AioHmm),
            "io_hmm" => Ok(Ablation::IoHmm),
            "hmm_output" => Ok(Ablation::HmmOutput),
            other => Err(Error::invalid(format!("unknown ablation '{other}'"))),
        }
    }
}

/// EM settings.
#[derive(Debug, Clone)]
pub struct EmConfig {
    pub n_states: usize,
    pub max_iters: usize,
    /// Stop when the relative log-likelihood improvement falls below this.
    pub loglik_rel_tol: f64,
    /// Covariance ridge as a multiple of trace/dim.
    pub sigma_ridge: f64,
    pub w_step_size: f64,
    pub w_grad_iters: usize,
    pub w_l2: f64,
    pub ablation: Ablation,
    /// Keep only the diagonal of each Σ; more robust on small data.
    pub diagonal_sigma: bool,
    pub seed: u64,
}

impl EmConfig {
    pub fn new(n_states: usize) -> Self {
        EmConfig {
            n_states,
            max_iters: 100,
            loglik_rel_tol: 1e-6,
            sigma_ridge: 1e-6,
            w_step_size: 0.1,
            w_grad_iters: 25,
            w_l2: 1e-3,
            ablation: Ablation::AioHmm,
            diagonal_sigma: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states < 1 {
            return Err(Error::invalid("n_states must be >= 1"));
        }
        if self.max_iters < 1 {
            return Err(Error::invalid("max_iters must be >= 1"));
        }
        for (name, v) in [
            ("loglik_rel_tol", self.loglik_rel_tol),
            ("sigma_ridge", self.sigma_ridge),
            ("w_step_size", self.w_step_size),
            ("w_l2", self.w_l2),
        ] {
            if !(v > 0.0) {
                return Err(Error::invalid(format!("{name} must be strictly positive")));
            }
        }
        Ok(())
    }
}

/// Result of an EM fit.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub params: ModelParams,
    /// Data log-likelihood after initialization and after every M-step;
    /// non-decreasing within 1e-8 per step.
    pub loglik_trace: Vec<f64>,
    /// Number of M-steps performed.
    pub iterations_run: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
}

/// Responsibility mass below which a state is frozen for one sweep.
const FROZEN_MASS: f64 = 1e-12;
/// Absolute slack allowed in the monotonicity checks.
const MONOTONE_SLACK: f64 = 1e-8;
/// Ridge added to a singular normal-equation matrix before retrying.
const NORMAL_EQ_RIDGE: f64 = 1e-8;

/// Per-sequence vector views used by the M-step accumulations.
struct SeqData {
    xs: Vec<DVector<f64>>,
    /// Augmented inputs `[1; x]`.
    us: Vec<DVector<f64>>,
    zs: Vec<DVector<f64>>,
    /// `z_{t-1}` aligned with `t`, with `z_0 = 0`.
    z_prev: Vec<DVector<f64>>,
}

fn seq_data(dataset: &[FeatureSequence]) -> Vec<SeqData> {
    dataset
        .iter()
        .map(|seq| {
            let (xs, zs) = seq.to_xz();
            let us = xs.iter().map(augment_input).collect();
            let mut z_prev = Vec::with_capacity(zs.len());
            z_prev.push(DVector::zeros(DIM_Z));
            for z in &zs[..zs.len() - 1] {
                z_prev.push(z.clone());
            }
            SeqData {
                xs,
                us,
                zs,
                z_prev,
            }
        })
        .collect()
}

fn check_dataset(dataset: &[FeatureSequence]) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset must contain at least one sequence"));
    }
    Ok(())
}

/// Seed-deterministic initialization: the pooled output vectors are split
/// into `n_states` clusters (k-means), each cluster providing a state's mean
/// and ridged covariance. Modulation and transition weights start at zero.
pub fn init_params(dataset: &[FeatureSequence], cfg: &EmConfig) -> Result<ModelParams> {
    check_dataset(dataset)?;
    cfg.validate()?;
    let points: Vec<DVector<f64>> = dataset
        .iter()
        .flat_map(|s| s.outputs.iter().map(|z| z.as_vector().clone()))
        .collect();

    let distinct: BTreeSet<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|v| v.to_bits()).collect())
        .collect();
    if distinct.len() < cfg.n_states {
        return Err(Error::invalid(format!(
            "need at least {} distinct output vectors for {} states, got {}",
            cfg.n_states,
            cfg.n_states,
            distinct.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let assignment = kmeans(&points, cfg.n_states, &mut rng);

    let mut states = Vec::with_capacity(cfg.n_states);
    for c in 0..cfg.n_states {
        let members: Vec<&DVector<f64>> = points
            .iter()
            .zip(&assignment)
            .filter(|(_, &a)| a == c)
            .map(|(p, _)| p)
            .collect();
        let count = members.len().max(1) as f64;
        let mut mean = DVector::zeros(DIM_Z);
        for p in &members {
            mean += *p;
        }
        mean /= count;
        let mut cov = DMatrix::zeros(DIM_Z, DIM_Z);
        for p in &members {
            let d = *p - &mean;
            cov += &d * d.transpose();
        }
        cov /= count;
        if cfg.diagonal_sigma {
            cov = DMatrix::from_diagonal(&cov.diagonal());
        }
        let sigma = add_ridge(cov, cfg.sigma_ridge);
        states.push(StateParams {
            mu: mean,
            a: DVector::zeros(DIM_X),
            b: DVector::zeros(DIM_Z),
            sigma,
            w_rows: vec![DVector::zeros(DIM_AUG); cfg.n_states],
        });
    }
    ModelParams::new(states, vec![DVector::zeros(DIM_AUG); cfg.n_states])
}

/// Ridge scaled to trace/dim so regularization is unit-free; degenerate
/// all-zero covariances fall back to an absolute ridge.
fn add_ridge(mut cov: DMatrix<f64>, ridge_scale: f64) -> DMatrix<f64> {
    let dim = cov.nrows() as f64;
    let trace = cov.trace();
    let ridge = if trace > 0.0 {
        ridge_scale * trace / dim
    } else {
        ridge_scale
    };
    for i in 0..cov.nrows() {
        cov[(i, i)] += ridge;
    }
    cov
}

fn kmeans(points: &[DVector<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    // k-means++ seeding.
    let mut centers: Vec<DVector<f64>> = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..points.len())].clone());
    while centers.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centers
                    .iter()
                    .map(|c| (p - c).norm_squared())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut chosen = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        centers.push(points[next].clone());
    }

    let mut assignment = vec![0usize; points.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| {
                    let da = (p - &centers[a]).norm_squared();
                    let db = (p - &centers[b]).norm_squared();
                    da.partial_cmp(&db).expect("finite distances")
                })
                .expect("k >= 1");
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }

        // Re-seed any emptied cluster with the point farthest from its center.
        for c in 0..k {
            if !assignment.contains(&c) {
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        let da = (&points[a] - &centers[assignment[a]]).norm_squared();
                        let db = (&points[b] - &centers[assignment[b]]).norm_squared();
                        da.partial_cmp(&db).expect("finite distances")
                    })
                    .expect("points is non-empty");
                assignment[far] = c;
                changed = true;
            }
        }

        let mut counts = vec![0usize; k];
        let mut sums = vec![DVector::zeros(DIM_Z); k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            sums[a] += p;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = &sums[c] / counts[c] as f64;
            }
        }
        if !changed {
            break;
        }
    }
    assignment
}

/// One forward-backward pass per sequence; the total log-likelihood is the
/// training objective. Sequences are processed in parallel; results are
/// reduced in input order.
pub fn e_step(
    params: &ModelParams,
    dataset: &[FeatureSequence],
) -> Result<(Vec<PosteriorStats>, f64)> {
    check_dataset(dataset)?;
    let prep = PreparedModel::new(params)?;
    let stats: Vec<PosteriorStats> = dataset
        .par_iter()
        .enumerate()
        .map(|(idx, seq)| {
            let (xs, zs) = seq.to_xz();
            forward_backward_xz(&prep, &xs, &zs)
                .map_err(|e| Error::numerical(format!("sequence {idx}: {e}")))
        })
        .collect::<Result<_>>()?;
    let total = stats.iter().map(|s| s.loglik).sum();
    Ok((stats, total))
}

/// Expected complete-data log-likelihood of `params` under fixed posteriors:
/// emission, transition, and initial-state terms. The M-step's test oracle.
pub fn q_value(
    params: &ModelParams,
    stats: &[PosteriorStats],
    dataset: &[FeatureSequence],
) -> Result<f64> {
    check_stats(stats, dataset)?;
    let data = seq_data(dataset);
    let factors: Vec<GaussianFactor> = params
        .states
        .iter()
        .map(|st| GaussianFactor::new(&st.sigma))
        .collect::<Result<_>>()?;

    let mut total = 0.0;
    for (sd, st) in data.iter().zip(stats) {
        let k = sd.zs.len();
        // Initial-state term.
        let pi = initial_row(params, &sd.xs[0])?;
        for j in 0..params.n_states {
            let g = st.gamma[(0, j)];
            if g > 0.0 {
                total += g * pi[j].ln();
            }
        }
        // Transition terms.
        for t in 1..k {
            for i in 0..params.n_states {
                let row = transition_row(&params.states[i], &sd.xs[t])?;
                for j in 0..params.n_states {
                    let w = st.xi[t - 1][(i, j)];
                    if w > 0.0 {
                        total += w * row[j].ln();
                    }
                }
            }
        }
        // Emission terms.
        for t in 0..k {
            for (j, (state, factor)) in params.states.iter().zip(&factors).enumerate() {
                let g = st.gamma[(t, j)];
                if g > 0.0 {
                    let c = 1.0 + state.a.dot(&sd.xs[t]) + state.b.dot(&sd.z_prev[t]);
                    total += g * factor.logpdf(&sd.zs[t], &(&state.mu * c));
                }
            }
        }
    }
    Ok(total)
}

fn check_stats(stats: &[PosteriorStats], dataset: &[FeatureSequence]) -> Result<()> {
    check_dataset(dataset)?;
    if stats.len() != dataset.len() {
        return Err(Error::invalid(format!(
            "got {} posterior stats for {} sequences",
            stats.len(),
            dataset.len()
        )));
    }
    Ok(())
}

/// Responsibility mass per state.
fn state_masses(stats: &[PosteriorStats], n_states: usize) -> Vec<f64> {
    let mut mass = vec![0.0; n_states];
    for st in stats {
        for t in 0..st.gamma.nrows() {
            for (j, m) in mass.iter_mut().enumerate() {
                *m += st.gamma[(t, j)];
            }
        }
    }
    mass
}

/// Closed-form μ update. Frozen states (vanishing responsibility or
/// degenerate denominator) keep their current mean.
pub fn m_step_mu(
    params: &ModelParams,
    stats: &[PosteriorStats],
    dataset: &[FeatureSequence],
) -> Result<Vec<DVector<f64>>> {
    check_stats(stats, dataset)?;
    let data = seq_data(dataset);
    let masses = state_masses(stats, params.n_states);
    let mut out = Vec::with_capacity(params.n_states);
    for (i, state) in params.states.iter().enumerate() {
        if masses[i] < FROZEN_MASS {
            out.push(state.mu.clone());
            continue;
        }
        let mut num = DVector::zeros(DIM_Z);
        let mut den = 0.0;
        for (sd, st) in data.iter().zip(stats) {
            for t in 0..sd.zs.len() {
                let g = st.gamma[(t, i)];
                if g == 0.0 {
                    continue;
                }
                let c = 1.0 + state.a.dot(&sd.xs[t]) + state.b.dot(&sd.z_prev[t]);
                num += &sd.zs[t] * (g * c);
                den += g * c * c;
            }
        }
        if den < FROZEN_MASS {
            out.push(state.mu.clone());
        } else {
            out.push(num / den);
        }
    }
    Ok(out)
}

/// Closed-form Σ update: ridged, responsibility-weighted residual covariance
/// around `cᵢₜ μᵢ`, using the means already present in `params`.
pub fn m_step_sigma(
    params: &ModelParams,
    stats: &[PosteriorStats],
    dataset: &[FeatureSequence],
    cfg: &EmConfig,
) -> Result<Vec<DMatrix<f64>>> {
    check_stats(stats, dataset)?;
    let data = seq_data(dataset);
    let masses = state_masses(stats, params.n_states);
    let mut out = Vec::with_capacity(params.n_states);
    for (i, state) in params.states.iter().enumerate() {
        if masses[i] < FROZEN_MASS {
            out.push(state.sigma.clone());
            continue;
        }
        let mut acc = DMatrix::zeros(DIM_Z, DIM_Z);
        for (sd, st) in data.iter().zip(stats) {
            for t in 0..sd.zs.len() {
                let g = st.gamma[(t, i)];
                if g == 0.0 {
                    continue;
                }
                let c = 1.0 + state.a.dot(&sd.xs[t]) + state.b.dot(&sd.z_prev[t]);
                let resid = &sd.zs[t] - &state.mu * c;
                acc.syger(g, &resid, &resid, 1.0);
            }
        }
        acc /= masses[i];
        // syger fills the lower triangle; mirror it.
        for r in 0..DIM_Z {
            for c in (r + 1)..DIM_Z {
                acc[(r, c)] = acc[(c, r)];
            }
        }
        if cfg.diagonal_sigma {
            acc = DMatrix::from_diagonal(&acc.diagonal());
        }
        out.push(add_ridge(acc, cfg.sigma_ridge));
    }
    Ok(out)
}

/// Solve `M v = rhs`, ridge-augmenting once if `M` is numerically singular.
fn solve_normal_equations(
    mut m: DMatrix<f64>,
    rhs: &DVector<f64>,
    what: &str,
    state: usize,
    warnings: &mut Vec<String>,
) -> Result<DVector<f64>> {
    if let Some(chol) = nalgebra::Cholesky::new(m.clone()) {
        return Ok(chol.solve(rhs));
    }
    warnings.push(format!(
        "state {state}: singular normal equations for {what}; ridge-augmented"
    ));
    for i in 0..m.nrows() {
        m[(i, i)] += NORMAL_EQ_RIDGE;
    }
    nalgebra::Cholesky::new(m)
        .map(|chol| chol.solve(rhs))
        .ok_or_else(|| {
            Error::numerical(format!(
                "state {state}: normal equations for {what} remain singular after ridge"
            ))
        })
}

/// Closed-form weighted-least-squares update of `a`, holding `b` at the value
/// in `params` and using the means/covariances in `params`.
pub fn m_step_a(
    params: &ModelParams,
    stats: &[PosteriorStats],
    dataset: &[FeatureSequence],
) -> Result<(Vec<DVector<f64>>, Vec<String>)> {
    wls_update(params, stats, dataset, ModulationBlock::A)
}

/// Closed-form weighted-least-squares update of `b`, holding `a` at the value
/// in `params`.
pub fn m_step_b(
    params: &ModelParams,
    stats: &[PosteriorStats],
    dataset: &[FeatureSequence],
) -> Result<(Vec<DVector<f64>>, Vec<String>)> {
    wls_update(params, stats, dataset, ModulationBlock::B)
}

#[derive(Clone, Copy, PartialEq)]
enum ModulationBlock {
    A,
    B,
}

fn wls_update(
    params: &ModelParams,
    stats: &[PosteriorStats],
    dataset: &[FeatureSequence],
    block: ModulationBlock,
) -> Result<(Vec<DVector<f64>>, Vec<String>)> {
    check_stats(stats, dataset)?;
    let data = seq_data(dataset);
    let masses = state_masses(stats, params.n_states);
    let dim = match block {
        ModulationBlock::A => DIM_X,
        ModulationBlock::B => DIM_Z,
    };
    let mut warnings = Vec::new();
    let mut out = Vec::with_capacity(params.n_states);

    for (i, state) in params.states.iter().enumerate() {
        let current = match block {
            ModulationBlock::A => state.a.clone(),
            ModulationBlock::B => state.b.clone(),
        };
        if masses[i] < FROZEN_MASS {
            out.push(current);
            continue;
        }
        let chol = nalgebra::Cholesky::new(state.sigma.clone()).ok_or_else(|| {
            Error::numerical(format!("state {i}: sigma is not positive definite"))
        })?;
        let sigma_inv_mu = chol.solve(&state.mu);
        let s = state.mu.dot(&sigma_inv_mu);
        if s < FROZEN_MASS {
            warnings.push(format!(
                "state {i}: mu is numerically zero; modulation weights left unchanged"
            ));
            out.push(current);
            continue;
        }

        let mut m = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        for (sd, st) in data.iter().zip(stats) {
            for t in 0..sd.zs.len() {
                let g = st.gamma[(t, i)];
                if g == 0.0 {
                    continue;
                }
                let reg = match block {
                    ModulationBlock::A => &sd.xs[t],
                    ModulationBlock::B => &sd.z_prev[t],
                };
                let other_dot = match block {
                    ModulationBlock::A => state.b.dot(&sd.z_prev[t]),
                    ModulationBlock::B => state.a.dot(&sd.xs[t]),
                };
                let target = sd.zs[t].dot(&sigma_inv_mu) / s - 1.0 - other_dot;
                m.syger(g, reg, reg, 1.0);
                rhs += reg * (g * target);
            }
        }
        for r in 0..dim {
            for c in (r + 1)..dim {
                m[(r, c)] = m[(c, r)];
            }
        }
        let what = match block {
            ModulationBlock::A => "a",
            ModulationBlock::B => "b",
        };
        out.push(solve_normal_equations(m, &rhs, what, i, &mut warnings)?);
    }
    Ok((out, warnings))
}

/// The ξ-weighted softmax log-likelihood of the transition and initial
/// weights, minus the L2 penalty. The objective the w-step ascends.
pub fn transition_weight_objective(
    params: &ModelParams,
    stats: &[PosteriorStats],
    dataset: &[FeatureSequence],
    l2: f64,
) -> Result<f64> {
    check_stats(stats, dataset)?;
    let data = seq_data(dataset);
    let mut obj = 0.0;
    for (sd, st) in data.iter().zip(stats) {
        let pi = initial_row(params, &sd.xs[0])?;
        for j in 0..params.n_states {
            let g = st.gamma[(0, j)];
            if g > 0.0 {
                obj += g * pi[j].ln();
            }
        }
        for t in 1..sd.zs.len() {
            for i in 0..params.n_states {
                let row = transition_row(&params.states[i], &sd.xs[t])?;
                for j in 0..params.n_states {
                    let w = st.xi[t - 1][(i, j)];
                    if w > 0.0 {
                        obj += w * row[j].ln();
                    }
                }
            }
        }
    }
    let mut penalty = 0.0;
    for state in &params.states {
        for row in &state.w_rows {
            penalty += row.norm_squared();
        }
    }
    for row in &params.w0 {
        penalty += row.norm_squared();
    }
    Ok(obj - l2 * penalty)
}

/// Analytic gradient of [`transition_weight_objective`] with respect to every
/// transition row and the initial weights.
#[allow(clippy::type_complexity)]
pub fn transition_weight_gradient(
    params: &ModelParams,
    stats: &[PosteriorStats],
    dataset: &[FeatureSequence],
    l2: f64,
) -> Result<(Vec<Vec<DVector<f64>>>, Vec<DVector<f64>>)> {
    check_stats(stats, dataset)?;
    let data = seq_data(dataset);
    let n = params.n_states;
    let mut grad_w = vec![vec![DVector::zeros(DIM_AUG); n]; n];
    let mut grad_w0 = vec![DVector::zeros(DIM_AUG); n];

    for (sd, st) in data.iter().zip(stats) {
        let pi = initial_row(params, &sd.xs[0])?;
        for j in 0..n {
            grad_w0[j] += &sd.us[0] * (st.gamma[(0, j)] - pi[j]);
        }
        for t in 1..sd.zs.len() {
            for i in 0..n {
                let row = transition_row(&params.states[i], &sd.xs[t])?;
                let mass: f64 = (0..n).map(|j| st.xi[t - 1][(i, j)]).sum();
                for j in 0..n {
                    let coeff = st.xi[t - 1][(i, j)] - mass * row[j];
                    grad_w[i][j] += &sd.us[t] * coeff;
                }
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            grad_w[i][j] -= &params.states[i].w_rows[j] * (2.0 * l2);
        }
        grad_w0[i] -= &params.w0[i] * (2.0 * l2);
    }
    Ok((grad_w, grad_w0))
}

/// Zero the input coordinates of a gradient so only the bias can move.
/// Emission part of Q contributed by one state, with that state's current
/// parameters. Used to accept or reject non-exact block updates.
fn emission_q_for_state(
    state: &StateParams,
    idx: usize,
    stats: &[PosteriorStats],
    data: &[SeqData],
) -> Result<f64> {
    let factor = GaussianFactor::new(&state.sigma)?;
    let mut total = 0.0;
    for (sd, st) in data.iter().zip(stats) {
        for t in 0..sd.zs.len() {
            let g = st.gamma[(t, idx)];
            if g > 0.0 {
                let c = 1.0 + state.a.dot(&sd.xs[t]) + state.b.dot(&sd.z_prev[t]);
                total += g * factor.logpdf(&sd.zs[t], &(&state.mu * c));
            }
        }
    }
    Ok(total)
}

/// Install a block update per state only where it does not lower that
/// state's emission Q (the ridge or an ill-conditioned solve can otherwise
/// push past the maximizer). Rejected states keep their current value.
fn accept_if_ascent<T: Clone>(
    next: &mut ModelParams,
    proposed: Vec<T>,
    install: impl Fn(&mut StateParams, T),
    what: &str,
    stats: &[PosteriorStats],
    data: &[SeqData],
    warnings: &mut Vec<String>,
) -> Result<()> {
    for (i, value) in proposed.into_iter().enumerate() {
        let before = emission_q_for_state(&next.states[i], i, stats, data)?;
        let mut candidate = next.states[i].clone();
        install(&mut candidate, value);
        let after = emission_q_for_state(&candidate, i, stats, data)?;
        if after + 1e-12 >= before {
            next.states[i] = candidate;
        } else {
            warnings.push(format!(
                "state {i}: {what} update would lower Q by {:.3e}; kept previous value",
                before - after
            ));
        }
    }
    Ok(())
}

fn mask_bias_only(rows: &mut [Vec<DVector<f64>>], w0: &mut [DVector<f64>]) {
    for state_rows in rows.iter_mut() {
        for row in state_rows.iter_mut() {
            for k in 1..DIM_AUG {
                row[k] = 0.0;
            }
        }
    }
    for row in w0.iter_mut() {
        for k in 1..DIM_AUG {
            row[k] = 0.0;
        }
    }
}

/// Gradient-ascend the regularized weight objective; revert to the starting
/// weights if the unpenalized objective ends lower (raw Q must not move down).
fn ascend_weights(
    params: &mut ModelParams,
    stats: &[PosteriorStats],
    dataset: &[FeatureSequence],
    cfg: &EmConfig,
    warnings: &mut Vec<String>,
) -> Result<()> {
    if params.n_states == 1 {
        return Ok(());
    }
    let start_raw = transition_weight_objective(params, stats, dataset, 0.0)?;
    let backup_states: Vec<Vec<DVector<f64>>> = params
        .states
        .iter()
        .map(|st| st.w_rows.clone())
        .collect();
    let backup_w0 = params.w0.clone();

    let mut current = transition_weight_objective(params, stats, dataset, cfg.w_l2)?;
    'steps: for _ in 0..cfg.w_grad_iters {
        let (mut gw, mut gw0) = transition_weight_gradient(params, stats, dataset, cfg.w_l2)?;
        if cfg.ablation == Ablation::HmmOutput {
            mask_bias_only(&mut gw, &mut gw0);
        }
        let mut step = cfg.w_step_size;
        for _halving in 0..=10 {
            let mut candidate = params.clone();
            for (i, state) in candidate.states.iter_mut().enumerate() {
                for (j, row) in state.w_rows.iter_mut().enumerate() {
                    *row += &gw[i][j] * step;
                }
            }
            for (j, row) in candidate.w0.iter_mut().enumerate() {
                *row += &gw0[j] * step;
            }
            let value = transition_weight_objective(&candidate, stats, dataset, cfg.w_l2)?;
            if value >= current {
                *params = candidate;
                current = value;
                continue 'steps;
            }
            step *= 0.5;
        }
        // No usable step at any halving; the row is as converged as the
        // step resolution allows.
        break;
    }

    let end_raw = transition_weight_objective(params, stats, dataset, 0.0)?;
    if end_raw + 1e-12 < start_raw {
        for (st, rows) in params.states.iter_mut().zip(backup_states) {
            st.w_rows = rows;
        }
        params.w0 = backup_w0;
        warnings.push(
            "weight update shrank the unpenalized transition objective; reverted".to_string(),
        );
    }
    Ok(())
}

/// One block-coordinate M-step sweep. Guarantees `Q(new) >= Q(old) - 1e-8`
/// for the posteriors in `stats` (generalized EM).
pub fn m_step(
    params: &ModelParams,
    stats: &[PosteriorStats],
    dataset: &[FeatureSequence],
    cfg: &EmConfig,
) -> Result<(ModelParams, Vec<String>)> {
    check_stats(stats, dataset)?;
    cfg.validate()?;
    let mut warnings = Vec::new();
    let masses = state_masses(stats, params.n_states);
    for (i, &m) in masses.iter().enumerate() {
        if m < FROZEN_MASS {
            warnings.push(format!(
                "state {i}: responsibility mass {m:.3e} below threshold; state frozen this sweep"
            ));
        }
    }
    let q_old = q_value(params, stats, dataset)?;
    let data = seq_data(dataset);

    let mut next = params.clone();
    // The μ update maximizes its quadratic exactly for any fixed Σ.
    let new_mu = m_step_mu(&next, stats, dataset)?;
    for (st, mu) in next.states.iter_mut().zip(new_mu) {
        st.mu = mu;
    }
    // Σ carries a ridge and a/b may solve ill-conditioned normal equations,
    // so each is installed per state only where it keeps Q from falling.
    let new_sigma = m_step_sigma(&next, stats, dataset, cfg)?;
    accept_if_ascent(
        &mut next,
        new_sigma,
        |st, sigma| st.sigma = sigma,
        "sigma",
        stats,
        &data,
        &mut warnings,
    )?;
    if cfg.ablation != Ablation::HmmOutput {
        let (new_a, warn) = m_step_a(&next, stats, dataset)?;
        warnings.extend(warn);
        accept_if_ascent(&mut next, new_a, |st, a| st.a = a, "a", stats, &data, &mut warnings)?;
        if cfg.ablation == Ablation::AioHmm {
            let (new_b, warn) = m_step_b(&next, stats, dataset)?;
            warnings.extend(warn);
            accept_if_ascent(&mut next, new_b, |st, b| st.b = b, "b", stats, &data, &mut warnings)?;
        }
    }
    ascend_weights(&mut next, stats, dataset, cfg, &mut warnings)?;

    let q_new = q_value(&next, stats, dataset)?;
    if q_new < q_old - MONOTONE_SLACK {
        return Err(Error::Internal(format!(
            "M-step decreased Q from {q_old} to {q_new}"
        )));
    }
    Ok((next, warnings))
}

/// Full EM loop: alternate E and M steps until the relative log-likelihood
/// improvement drops below tolerance or `max_iters` sweeps have run.
pub fn fit_em(dataset: &[FeatureSequence], cfg: &EmConfig) -> Result<FitReport> {
    check_dataset(dataset)?;
    cfg.validate()?;
    let mut params = init_params(dataset, cfg)?;
    let (mut stats, mut loglik) = e_step(&params, dataset)?;
    let mut trace = vec![loglik];
    let mut warnings = BTreeSet::new();
    let mut converged = false;

    for _ in 0..cfg.max_iters {
        let (next, warn) = m_step(&params, &stats, dataset, cfg)?;
        warnings.extend(warn);
        let (next_stats, next_loglik) = e_step(&next, dataset)?;
        if next_loglik < loglik - MONOTONE_SLACK {
            return Err(Error::Internal(format!(
                "EM iteration decreased the log-likelihood from {loglik} to {next_loglik}"
            )));
        }
        params = next;
        stats = next_stats;
        let improvement = (next_loglik - loglik).abs();
        let rel = improvement / loglik.abs().max(1e-12);
        loglik = next_loglik;
        trace.push(loglik);
        if rel < cfg.loglik_rel_tol {
            converged = true;
            break;
        }
    }

    Ok(FitReport {
        params,
        iterations_run: trace.len() - 1,
        loglik_trace: trace,
        converged,
        warnings: warnings.into_iter().collect(),
    })
}

/// Train one model per maneuver class and attach a uniform prior.
pub fn fit_all(
    datasets: &BTreeMap<ManeuverClass, Vec<FeatureSequence>>,
    cfg: &EmConfig,
) -> Result<ManeuverModelSet> {
    for class in ManeuverClass::ALL {
        match datasets.get(&class) {
            Some(seqs) if !seqs.is_empty() => {}
            _ => {
                return Err(Error::invalid(format!(
                    "no training sequences for class {class}"
                )))
            }
        }
    }
    let reports: Vec<FitReport> = ManeuverClass::ALL
        .par_iter()
        .map(|class| fit_em(&datasets[class], cfg))
        .collect::<Result<_>>()?;
    let mut iter = reports.into_iter().map(|r| r.params);
    let models = [
        iter.next().expect("five reports"),
        iter.next().expect("five reports"),
        iter.next().expect("five reports"),
        iter.next().expect("five reports"),
        iter.next().expect("five reports"),
    ];
    Ok(ManeuverModelSet::with_uniform_prior(models))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sample_sequence, InsideFeature, OutsideFeature};
    use approx::assert_relative_eq;

    fn outside(rng: &mut ChaCha8Rng) -> OutsideFeature {
        let spd: f64 = rng.random_range(30.0..80.0);
        OutsideFeature {
            lane_left: rng.random_range(0..2),
            lane_right: rng.random_range(0..2),
            road_artifact: rng.random_range(0..2),
            speed_avg: spd,
            speed_max: spd + 2.0,
            speed_min: spd - 2.0,
        }
    }

    /// Sample a dataset from the given params with random valid inputs.
    pub(crate) fn sampled_dataset(
        params: &ModelParams,
        n_seqs: usize,
        k: usize,
        seed: u64,
    ) -> Vec<FeatureSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_seqs)
            .map(|s| {
                let inputs: Vec<OutsideFeature> = (0..k).map(|_| outside(&mut rng)).collect();
                let xvecs: Vec<DVector<f64>> = inputs.iter().map(|x| x.to_vector()).collect();
                let (_, zs) = sample_sequence(params, &xvecs, seed ^ (s as u64 + 1)).unwrap();
                FeatureSequence::new(
                    ManeuverClass::DrivingStraight,
                    inputs,
                    zs.into_iter()
                        .map(|z| InsideFeature::new(z).unwrap())
                        .collect(),
                    0.8,
                )
                .unwrap()
            })
            .collect()
    }

    fn random_true_params(n_states: usize, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let states = (0..n_states)
            .map(|i| {
                let mut mu = DVector::from_fn(DIM_Z, |_, _| rng.random_range(-0.5..0.5));
                mu[i % DIM_Z] += 2.0; // keep states separated
                StateParams {
                    mu,
                    a: DVector::from_fn(DIM_X, |_, _| rng.random_range(-0.003..0.003)),
                    b: DVector::from_fn(DIM_Z, |_, _| rng.random_range(-0.1..0.1)),
                    sigma: DMatrix::identity(DIM_Z, DIM_Z) * rng.random_range(0.3..0.6),
                    w_rows: (0..n_states)
                        .map(|_| DVector::from_fn(DIM_AUG, |d, _| {
                            if d == 0 {
                                rng.random_range(-0.5..0.5)
                            } else {
                                rng.random_range(-0.02..0.02)
                            }
                        }))
                        .collect(),
                }
            })
            .collect();
        let w0 = (0..n_states)
            .map(|_| DVector::from_fn(DIM_AUG, |_, _| rng.random_range(-0.02..0.02)))
            .collect();
        ModelParams::new(states, w0).unwrap()
    }

    #[test]
    fn init_params_single_state_is_global_moments() {
        let truth = random_true_params(1, 3);
        let dataset = sampled_dataset(&truth, 20, 5, 11);
        let cfg = EmConfig::new(1);
        let params = init_params(&dataset, &cfg).unwrap();

        let points: Vec<DVector<f64>> = dataset
            .iter()
            .flat_map(|s| s.outputs.iter().map(|z| z.as_vector().clone()))
            .collect();
        let mean = points.iter().sum::<DVector<f64>>() / points.len() as f64;
        assert_relative_eq!(
            (&params.states[0].mu - &mean).norm(),
            0.0,
            epsilon = 1e-10
        );
        // determinism
        let again = init_params(&dataset, &cfg).unwrap();
        assert_eq!(params, again);
    }

    #[test]
    fn init_params_recovers_separated_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut center_a = DVector::zeros(DIM_Z);
        center_a[0] = 5.0;
        let center_b = -&center_a;
        let mut seqs = Vec::new();
        for s in 0..40 {
            let outputs: Vec<InsideFeature> = (0..10)
                .map(|t| {
                    let center = if (s + t) % 2 == 0 { &center_a } else { &center_b };
                    InsideFeature::new(DVector::from_fn(DIM_Z, |i, _| {
                        center[i] + 0.1 * rng.random_range(-1.0..1.0f64)
                    }))
                    .unwrap()
                })
                .collect();
            let inputs = (0..10).map(|_| outside(&mut rng)).collect();
            seqs.push(
                FeatureSequence::new(ManeuverClass::DrivingStraight, inputs, outputs, 0.8)
                    .unwrap(),
            );
        }
        let params = init_params(&seqs, &EmConfig::new(2)).unwrap();
        let mut mus: Vec<DVector<f64>> = params.states.iter().map(|s| s.mu.clone()).collect();
        mus.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert!((&mus[0] - &center_b).amax() < 0.05);
        assert!((&mus[1] - &center_a).amax() < 0.05);
    }

    #[test]
    fn init_params_requires_enough_distinct_points() {
        let z = InsideFeature::new(DVector::from_element(DIM_Z, 1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seq = FeatureSequence::new(
            ManeuverClass::DrivingStraight,
            (0..4).map(|_| outside(&mut rng)).collect(),
            vec![z; 4],
            0.8,
        )
        .unwrap();
        assert!(matches!(
            init_params(&[seq], &EmConfig::new(2)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn e_step_is_additive_over_sequences() {
        let truth = random_true_params(2, 7);
        let dataset = sampled_dataset(&truth, 10, 6, 13);
        let (_, total) = e_step(&truth, &dataset).unwrap();

        let mut sum = 0.0;
        for seq in &dataset {
            let (_, single) = e_step(&truth, std::slice::from_ref(seq)).unwrap();
            sum += single;
        }
        assert_relative_eq!(total, sum, epsilon = 1e-12);

        // Duplicating a sequence doubles its contribution exactly.
        let one = vec![dataset[0].clone()];
        let two = vec![dataset[0].clone(), dataset[0].clone()];
        let (_, l1) = e_step(&truth, &one).unwrap();
        let (_, l2) = e_step(&truth, &two).unwrap();
        assert_relative_eq!(l2, 2.0 * l1, epsilon = 1e-12);
    }

    #[test]
    fn q_equals_loglik_for_single_state() {
        let truth = random_true_params(1, 9);
        let dataset = sampled_dataset(&truth, 5, 6, 17);
        let (stats, loglik) = e_step(&truth, &dataset).unwrap();
        let q = q_value(&truth, &stats, &dataset).unwrap();
        assert_relative_eq!(q, loglik, max_relative = 1e-10);
    }

    #[test]
    fn q_is_a_lower_bound_at_other_parameters() {
        // EM bound: loglik(θ') - loglik(θ) >= Q(θ') - Q(θ).
        let theta = random_true_params(2, 21);
        let theta_prime = random_true_params(2, 22);
        let dataset = sampled_dataset(&theta, 8, 5, 23);
        let (stats, l_theta) = e_step(&theta, &dataset).unwrap();
        let (_, l_prime) = e_step(&theta_prime, &dataset).unwrap();
        let q_theta = q_value(&theta, &stats, &dataset).unwrap();
        let q_prime = q_value(&theta_prime, &stats, &dataset).unwrap();
        assert!(
            l_prime - l_theta >= (q_prime - q_theta) - 1e-9,
            "bound violated: Δl = {}, ΔQ = {}",
            l_prime - l_theta,
            q_prime - q_theta
        );
    }

    #[test]
    fn m_step_does_not_decrease_q_and_stays_symmetric_pd() {
        for seed in 0..5 {
            let truth = random_true_params(2, 31 + seed);
            let dataset = sampled_dataset(&truth, 8, 6, 37 + seed);
            let start = init_params(&dataset, &EmConfig::new(2)).unwrap();
            let (stats, _) = e_step(&start, &dataset).unwrap();
            let cfg = EmConfig::new(2);
            let q_before = q_value(&start, &stats, &dataset).unwrap();
            let (next, _) = m_step(&start, &stats, &dataset, &cfg).unwrap();
            let q_after = q_value(&next, &stats, &dataset).unwrap();
            assert!(q_after >= q_before - MONOTONE_SLACK);
            for st in &next.states {
                assert_eq!(st.sigma, st.sigma.transpose());
                assert!(GaussianFactor::new(&st.sigma).is_ok());
            }
        }
    }

    #[test]
    fn ablations_pin_their_blocks() {
        let truth = random_true_params(2, 41);
        let dataset = sampled_dataset(&truth, 8, 6, 43);

        let mut cfg = EmConfig::new(2);
        cfg.max_iters = 3;
        cfg.ablation = Ablation::IoHmm;
        let report = fit_em(&dataset, &cfg).unwrap();
        for st in &report.params.states {
            assert!(st.b.iter().all(|&v| v == 0.0), "io_hmm must keep b at zero");
            assert!(st.a.iter().any(|&v| v != 0.0), "io_hmm should update a");
        }

        cfg.ablation = Ablation::HmmOutput;
        let report = fit_em(&dataset, &cfg).unwrap();
        for st in &report.params.states {
            assert!(st.a.iter().all(|&v| v == 0.0));
            assert!(st.b.iter().all(|&v| v == 0.0));
            for row in &st.w_rows {
                for k in 1..DIM_AUG {
                    assert_eq!(row[k], 0.0, "hmm_output weights must stay bias-only");
                }
            }
        }
        for row in &report.params.w0 {
            for k in 1..DIM_AUG {
                assert_eq!(row[k], 0.0);
            }
        }
    }

    #[test]
    fn fit_em_trace_is_monotone_and_seeded() {
        let truth = random_true_params(2, 51);
        let dataset = sampled_dataset(&truth, 12, 8, 53);
        let mut cfg = EmConfig::new(2);
        cfg.max_iters = 10;
        let report = fit_em(&dataset, &cfg).unwrap();
        for pair in report.loglik_trace.windows(2) {
            assert!(pair[1] >= pair[0] - MONOTONE_SLACK);
        }
        assert_eq!(report.iterations_run, report.loglik_trace.len() - 1);

        let again = fit_em(&dataset, &cfg).unwrap();
        assert_eq!(report.params, again.params);
    }

    #[test]
    fn fit_all_requires_every_class() {
        let truth = random_true_params(1, 61);
        let dataset = sampled_dataset(&truth, 2, 4, 63);
        let mut map = BTreeMap::new();
        for class in ManeuverClass::MANEUVERS {
            map.insert(class, dataset.clone());
        }
        let cfg = EmConfig::new(1);
        let err = fit_all(&map, &cfg).unwrap_err();
        match err {
            Error::InvalidArgument(msg) => assert!(msg.contains("driving_straight")),
            other => panic!("expected invalid argument, got {other}"),
        }
    }

    #[test]
    fn w_gradient_matches_finite_differences() {
        let truth = random_true_params(3, 71);
        let dataset = sampled_dataset(&truth, 6, 6, 73);
        let (stats, _) = e_step(&truth, &dataset).unwrap();
        let l2 = 1e-3;
        let (gw, gw0) = transition_weight_gradient(&truth, &stats, &dataset, l2).unwrap();

        let h = 1e-6;
        let mut max_rel: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                for d in 0..DIM_AUG {
                    let mut plus = truth.clone();
                    plus.states[i].w_rows[j][d] += h;
                    let mut minus = truth.clone();
                    minus.states[i].w_rows[j][d] -= h;
                    let fd = (transition_weight_objective(&plus, &stats, &dataset, l2).unwrap()
                        - transition_weight_objective(&minus, &stats, &dataset, l2).unwrap())
                        / (2.0 * h);
                    let g = gw[i][j][d];
                    let rel = (fd - g).abs() / g.abs().max(1.0);
                    max_rel = max_rel.max(rel);
                }
            }
        }
        for j in 0..3 {
            for d in 0..DIM_AUG {
                let mut plus = truth.clone();
                plus.w0[j][d] += h;
                let mut minus = truth.clone();
                minus.w0[j][d] -= h;
                let fd = (transition_weight_objective(&plus, &stats, &dataset, l2).unwrap()
                    - transition_weight_objective(&minus, &stats, &dataset, l2).unwrap())
                    / (2.0 * h);
                let g = gw0[j][d];
                max_rel = max_rel.max((fd - g).abs() / g.abs().max(1.0));
            }
        }
        assert!(max_rel < 1e-6, "max relative gradient error {max_rel}");
    }
}
