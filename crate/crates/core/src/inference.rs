//! Scaled forward-backward posteriors, sequence likelihood, a brute-force
//! enumeration oracle, and the per-maneuver posterior.
//!
//! Conditioned on the inputs `X₁ᴷ` and the observed previous outputs, the
//! model is a Markov chain with time-varying transition matrices `ψᵢⱼₜ` and
//! per-chunk emission densities, so the classic scaled recursion applies
//! unchanged. Emissions are computed in the log domain and shifted by the
//! per-chunk maximum before exponentiating; the shift is folded back into
//! the stored log scale factors so `loglik = Σₜ log_scale_factors[t]`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::math::{logsumexp, GaussianFactor};
use crate::model::{
    initial_row, modulation, transition_row, FeatureSequence, ManeuverModelSet, ModelParams,
    NUM_CLASSES,
};

/// Maximum number of latent paths `|S|^K` the brute-force oracle will sum.
pub const BRUTE_FORCE_PATH_LIMIT: f64 = 1e6;

/// Forward-backward outputs for one sequence.
///
/// `gamma[(t, j)] = P(Yₜ=j | Z₁ᴷ, X₁ᴷ)` and
/// `xi[t-1][(i, j)] = P(Yₜ₋₁=i, Yₜ=j | Z₁ᴷ, X₁ᴷ)` for `t = 2..K` (the slice
/// index runs over the destination chunk).
#[derive(Debug, Clone)]
pub struct PosteriorStats {
    pub gamma: DMatrix<f64>,
    pub xi: Vec<DMatrix<f64>>,
    pub loglik: f64,
    /// Per-chunk log normalization constants; their sum is `loglik`.
    pub log_scale_factors: Vec<f64>,
}

/// Per-state emission evaluators with the covariance factored once, shared
/// across every sequence of an E-step.
pub(crate) struct PreparedModel<'a> {
    pub params: &'a ModelParams,
    factors: Vec<GaussianFactor>,
}

impl<'a> PreparedModel<'a> {
    pub fn new(params: &'a ModelParams) -> Result<Self> {
        let factors = params
            .states
            .iter()
            .enumerate()
            .map(|(i, st)| {
                GaussianFactor::new(&st.sigma)
                    .map_err(|e| Error::numerical(format!("state {i}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedModel { params, factors })
    }

    /// Log emission densities for every state at chunk `t` (0-based).
    fn log_emissions(
        &self,
        t: usize,
        xs: &[DVector<f64>],
        zs: &[DVector<f64>],
    ) -> Result<Vec<f64>> {
        let zero = DVector::zeros(self.params.dim_z);
        let z_prev = if t == 0 { &zero } else { &zs[t - 1] };
        self.params
            .states
            .iter()
            .zip(&self.factors)
            .map(|(st, factor)| {
                let c = modulation(st, &xs[t], z_prev)?;
                Ok(factor.logpdf(&zs[t], &(&st.mu * c)))
            })
            .collect()
    }
}

fn check_sequence(xs: &[DVector<f64>], zs: &[DVector<f64>]) -> Result<()> {
    if xs.is_empty() || xs.len() != zs.len() {
        return Err(Error::invalid(format!(
            "sequence must have equal input/output length K >= 1, got {} and {}",
            xs.len(),
            zs.len()
        )));
    }
    Ok(())
}

/// The scaled forward pass. Returns the per-chunk scaled alpha rows, the log
/// scale factors, and the transition matrices, which the backward pass reuses.
///
/// `emit` holds the max-shifted emission likelihoods and `scale` the row sums
/// computed from them; the shift cancels everywhere in the backward pass, so
/// those two are all it needs. The true per-chunk normalizer only survives in
/// `log_scale` (shift folded back in), whose sum is the log-likelihood.
struct ForwardPass {
    alphas: Vec<DVector<f64>>,
    log_scale: Vec<f64>,
    /// Row sums of the shifted forward recursion, one per chunk.
    scale: Vec<f64>,
    /// `trans[t-1]` is the transition matrix into chunk `t` (0-based `t >= 1`).
    trans: Vec<DMatrix<f64>>,
    /// Shifted emission likelihoods `exp(logb - max_j logb)` per chunk.
    emit: Vec<DVector<f64>>,
}

fn forward_pass(
    prep: &PreparedModel,
    xs: &[DVector<f64>],
    zs: &[DVector<f64>],
) -> Result<ForwardPass> {
    let n = prep.params.n_states;
    let k = xs.len();
    let mut alphas = Vec::with_capacity(k);
    let mut log_scale = Vec::with_capacity(k);
    let mut scale = Vec::with_capacity(k);
    let mut trans = Vec::with_capacity(k.saturating_sub(1));
    let mut emit = Vec::with_capacity(k);

    for t in 0..k {
        let logb = prep.log_emissions(t, xs, zs)?;
        let shift = logb.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !shift.is_finite() {
            return Err(Error::numerical(format!(
                "forward row underflowed to zero at chunk {t}"
            )));
        }
        let b = DVector::from_iterator(n, logb.iter().map(|&lb| (lb - shift).exp()));

        let unnormalized = if t == 0 {
            let pi = initial_row(prep.params, &xs[0])?;
            pi.component_mul(&b)
        } else {
            let mut psi = DMatrix::zeros(n, n);
            for i in 0..n {
                let row = transition_row(&prep.params.states[i], &xs[t])?;
                psi.row_mut(i).copy_from(&row.transpose());
            }
            let propagated: DVector<f64> = psi.transpose() * &alphas[t - 1];
            trans.push(psi);
            propagated.component_mul(&b)
        };

        let c: f64 = unnormalized.sum();
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::numerical(format!(
                "forward row underflowed to zero at chunk {t}"
            )));
        }
        alphas.push(unnormalized / c);
        log_scale.push(c.ln() + shift);
        scale.push(c);
        emit.push(b);
    }

    Ok(ForwardPass {
        alphas,
        log_scale,
        scale,
        trans,
        emit,
    })
}

/// Forward-backward posteriors and log-likelihood for one sequence.
pub fn forward_backward(params: &ModelParams, seq: &FeatureSequence) -> Result<PosteriorStats> {
    let (xs, zs) = seq.to_xz();
    let prep = PreparedModel::new(params)?;
    forward_backward_xz(&prep, &xs, &zs)
}

pub(crate) fn forward_backward_xz(
    prep: &PreparedModel,
    xs: &[DVector<f64>],
    zs: &[DVector<f64>],
) -> Result<PosteriorStats> {
    check_sequence(xs, zs)?;
    let n = prep.params.n_states;
    let k = xs.len();
    let fwd = forward_pass(prep, xs, zs)?;

    // Scaled backward recursion. The emission shift cancels against the one
    // inside the stored scale, so shifted emissions pair with shifted scales.
    let mut betas = vec![DVector::from_element(n, 1.0); k];
    for t in (0..k - 1).rev() {
        let scaled = betas[t + 1].component_mul(&fwd.emit[t + 1]);
        betas[t] = (&fwd.trans[t] * scaled) / fwd.scale[t + 1];
    }

    let mut gamma = DMatrix::zeros(k, n);
    for t in 0..k {
        let row = fwd.alphas[t].component_mul(&betas[t]);
        gamma.row_mut(t).copy_from(&row.transpose());
    }

    let mut xi = Vec::with_capacity(k.saturating_sub(1));
    for t in 1..k {
        let mut slice = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                slice[(i, j)] = fwd.alphas[t - 1][i] * fwd.trans[t - 1][(i, j)] * fwd.emit[t][j]
                    * betas[t][j]
                    / fwd.scale[t];
            }
        }
        xi.push(slice);
    }

    let loglik: f64 = fwd.log_scale.iter().sum();
    Ok(PosteriorStats {
        gamma,
        xi,
        loglik,
        log_scale_factors: fwd.log_scale,
    })
}

/// Log-likelihood `log P(Z₁ᴷ | X₁ᴷ; Θ)` via the forward pass alone.
/// Linear in K; identical to `forward_backward(...).loglik`.
pub fn sequence_loglik(params: &ModelParams, seq: &FeatureSequence) -> Result<f64> {
    let (xs, zs) = seq.to_xz();
    let prep = PreparedModel::new(params)?;
    sequence_loglik_xz(&prep, &xs, &zs)
}

pub(crate) fn sequence_loglik_xz(
    prep: &PreparedModel,
    xs: &[DVector<f64>],
    zs: &[DVector<f64>],
) -> Result<f64> {
    check_sequence(xs, zs)?;
    Ok(forward_pass(prep, xs, zs)?.log_scale.iter().sum())
}

/// Test oracle: explicit log-sum-exp over every latent path. Guarded to
/// instances with at most [`BRUTE_FORCE_PATH_LIMIT`] paths.
pub fn brute_force_loglik(params: &ModelParams, seq: &FeatureSequence) -> Result<f64> {
    let (xs, zs) = seq.to_xz();
    check_sequence(&xs, &zs)?;
    let n = params.n_states;
    let k = xs.len();
    if (n as f64).powi(k as i32) > BRUTE_FORCE_PATH_LIMIT {
        return Err(Error::invalid(format!(
            "brute force instance too large: {n}^{k} paths exceeds {BRUTE_FORCE_PATH_LIMIT}"
        )));
    }
    let prep = PreparedModel::new(params)?;

    // Per-chunk log emissions and log transition rows, precomputed.
    let mut logb = Vec::with_capacity(k);
    for t in 0..k {
        logb.push(prep.log_emissions(t, &xs, &zs)?);
    }
    let log_pi: Vec<f64> = initial_row(params, &xs[0])?.iter().map(|p| p.ln()).collect();
    let mut log_psi = Vec::with_capacity(k.saturating_sub(1));
    for t in 1..k {
        let mut mat = vec![vec![0.0; n]; n];
        for (i, row) in mat.iter_mut().enumerate() {
            let probs = transition_row(&params.states[i], &xs[t])?;
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = probs[j].ln();
            }
        }
        log_psi.push(mat);
    }

    let total_paths = n.pow(k as u32);
    let mut terms = Vec::with_capacity(total_paths);
    let mut path = vec![0usize; k];
    for mut idx in 0..total_paths {
        for slot in path.iter_mut() {
            *slot = idx % n;
            idx /= n;
        }
        let mut lp = log_pi[path[0]] + logb[0][path[0]];
        for t in 1..k {
            lp += log_psi[t - 1][path[t - 1]][path[t]] + logb[t][path[t]];
        }
        terms.push(lp);
    }
    Ok(logsumexp(&terms))
}

/// Posterior probability of each maneuver class for an unlabeled sequence:
/// `P(M | Z₁ᴷ, X₁ᴷ) ∝ exp(loglik under model M) · prior(M)`, normalized over
/// the five classes with log-sum-exp.
pub fn anticipate_posteriors(
    models: &ManeuverModelSet,
    xs: &[DVector<f64>],
    zs: &[DVector<f64>],
) -> Result<[f64; NUM_CLASSES]> {
    check_sequence(xs, zs)?;
    for (class, params) in crate::model::ManeuverClass::ALL.iter().zip(models.models()) {
        let violations = params.validate();
        if !violations.is_empty() {
            return Err(Error::invalid(format!(
                "model for {class} is invalid: {}",
                violations.join("; ")
            )));
        }
    }
    let mut logliks = [0.0; NUM_CLASSES];
    for (slot, params) in logliks.iter_mut().zip(models.models()) {
        let prep = PreparedModel::new(params)?;
        *slot = sequence_loglik_xz(&prep, xs, zs)?;
    }
    Ok(posteriors_from_logliks(&logliks, models.prior()))
}

/// Normalize class posteriors from per-class log-likelihoods and a prior.
/// Invariant to positive rescaling of the prior.
pub(crate) fn posteriors_from_logliks(
    logliks: &[f64; NUM_CLASSES],
    prior: &[f64; NUM_CLASSES],
) -> [f64; NUM_CLASSES] {
    let scores: Vec<f64> = logliks
        .iter()
        .zip(prior)
        .map(|(&l, &p)| l + p.ln())
        .collect();
    let norm = logsumexp(&scores);
    let mut out = [0.0; NUM_CLASSES];
    for (slot, s) in out.iter_mut().zip(&scores) {
        *slot = (s - norm).exp();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ManeuverClass, StateParams, DIM_AUG, DIM_X, DIM_Z};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_params(n_states: usize, rng: &mut ChaCha8Rng) -> ModelParams {
        let states = (0..n_states)
            .map(|_| {
                let mu = DVector::from_fn(DIM_Z, |_, _| rng.random_range(-1.0..1.0));
                let a = DVector::from_fn(DIM_X, |_, _| rng.random_range(-0.2..0.2));
                let b = DVector::from_fn(DIM_Z, |_, _| rng.random_range(-0.2..0.2));
                let m = DMatrix::from_fn(DIM_Z, DIM_Z, |_, _| rng.random_range(-0.3..0.3));
                let sigma = &m * m.transpose() + DMatrix::identity(DIM_Z, DIM_Z) * 0.5;
                let w_rows = (0..n_states)
                    .map(|_| DVector::from_fn(DIM_AUG, |_, _| rng.random_range(-0.5..0.5)))
                    .collect();
                StateParams {
                    mu,
                    a,
                    b,
                    sigma,
                    w_rows,
                }
            })
            .collect();
        let w0 = (0..n_states)
            .map(|_| DVector::from_fn(DIM_AUG, |_, _| rng.random_range(-0.5..0.5)))
            .collect();
        ModelParams::new(states, w0).unwrap()
    }

    pub(crate) fn random_sequence(k: usize, rng: &mut ChaCha8Rng) -> FeatureSequence {
        let inputs = (0..k)
            .map(|_| {
                let spd: f64 = rng.random_range(20.0..90.0);
                crate::model::OutsideFeature {
                    lane_left: rng.random_range(0..2),
                    lane_right: rng.random_range(0..2),
                    road_artifact: rng.random_range(0..2),
                    speed_avg: spd,
                    speed_max: spd + rng.random_range(0.0..5.0),
                    speed_min: spd - rng.random_range(0.0..5.0f64).min(spd),
                }
            })
            .collect();
        let outputs = (0..k)
            .map(|_| {
                crate::model::InsideFeature::new(DVector::from_fn(DIM_Z, |_, _| {
                    rng.random_range(-1.0..1.0)
                }))
                .unwrap()
            })
            .collect();
        FeatureSequence::new(ManeuverClass::DrivingStraight, inputs, outputs, 0.8).unwrap()
    }

    #[test]
    fn single_state_gamma_is_one_and_loglik_sums_emissions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = random_params(1, &mut rng);
        let seq = random_sequence(5, &mut rng);
        let stats = forward_backward(&params, &seq).unwrap();
        for t in 0..5 {
            assert_relative_eq!(stats.gamma[(t, 0)], 1.0, epsilon = 1e-12);
        }
        let (xs, zs) = seq.to_xz();
        let mut expected = 0.0;
        let zero = DVector::zeros(DIM_Z);
        for t in 0..5 {
            let z_prev = if t == 0 { &zero } else { &zs[t - 1] };
            expected +=
                crate::model::emission_logpdf(&params.states[0], &zs[t], &xs[t], z_prev).unwrap();
        }
        assert_relative_eq!(stats.loglik, expected, max_relative = 1e-12);
    }

    #[test]
    fn k1_has_empty_xi_and_reweighted_initial_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = random_params(3, &mut rng);
        let seq = random_sequence(1, &mut rng);
        let stats = forward_backward(&params, &seq).unwrap();
        assert!(stats.xi.is_empty());
        assert_eq!(stats.gamma.nrows(), 1);

        let (xs, zs) = seq.to_xz();
        let pi = initial_row(&params, &xs[0]).unwrap();
        let zero = DVector::zeros(DIM_Z);
        let weights: Vec<f64> = (0..3)
            .map(|i| {
                pi[i] * crate::model::emission_logpdf(&params.states[i], &zs[0], &xs[0], &zero)
                    .unwrap()
                    .exp()
            })
            .collect();
        let total: f64 = weights.iter().sum();
        for i in 0..3 {
            assert_relative_eq!(stats.gamma[(0, i)], weights[i] / total, max_relative = 1e-9);
        }
    }

    #[test]
    fn loglik_matches_brute_force_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(n, k) in &[(2usize, 5usize), (3, 6), (2, 2)] {
            let params = random_params(n, &mut rng);
            let seq = random_sequence(k, &mut rng);
            let fast = sequence_loglik(&params, &seq).unwrap();
            let slow = brute_force_loglik(&params, &seq).unwrap();
            assert_relative_eq!(fast, slow, max_relative = 1e-9);
        }
    }

    #[test]
    fn brute_force_matches_manual_four_path_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = random_params(2, &mut rng);
        let seq = random_sequence(2, &mut rng);
        let (xs, zs) = seq.to_xz();
        let zero = DVector::zeros(DIM_Z);
        let pi = initial_row(&params, &xs[0]).unwrap();
        let mut terms = Vec::new();
        for y1 in 0..2 {
            let psi = transition_row(&params.states[y1], &xs[1]).unwrap();
            for y2 in 0..2 {
                let lp = pi[y1].ln()
                    + crate::model::emission_logpdf(&params.states[y1], &zs[0], &xs[0], &zero)
                        .unwrap()
                    + psi[y2].ln()
                    + crate::model::emission_logpdf(&params.states[y2], &zs[1], &xs[1], &zs[0])
                        .unwrap();
                terms.push(lp);
            }
        }
        let manual = logsumexp(&terms);
        assert_relative_eq!(
            brute_force_loglik(&params, &seq).unwrap(),
            manual,
            max_relative = 1e-12
        );
    }

    #[test]
    fn brute_force_guards_instance_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = random_params(4, &mut rng);
        let seq = random_sequence(12, &mut rng);
        assert!(matches!(
            brute_force_loglik(&params, &seq),
            Err(Error::InvalidArgument(_))
        ));
        // |S| = 1 is exact regardless of K.
        let params1 = random_params(1, &mut rng);
        let seq1 = random_sequence(4, &mut rng);
        assert_relative_eq!(
            brute_force_loglik(&params1, &seq1).unwrap(),
            sequence_loglik(&params1, &seq1).unwrap(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn posterior_consistency_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let n = rng.random_range(1..4);
            let k = rng.random_range(1..7);
            let params = random_params(n, &mut rng);
            let seq = random_sequence(k, &mut rng);
            let stats = forward_backward(&params, &seq).unwrap();
            for t in 0..k {
                assert_relative_eq!(stats.gamma.row(t).sum(), 1.0, epsilon = 1e-9);
            }
            for (t, slice) in stats.xi.iter().enumerate() {
                assert_relative_eq!(slice.sum(), 1.0, epsilon = 1e-9);
                for j in 0..n {
                    let marginal: f64 = (0..n).map(|i| slice[(i, j)]).sum();
                    assert_relative_eq!(marginal, stats.gamma[(t + 1, j)], epsilon = 1e-9);
                }
            }
            assert_relative_eq!(
                stats.loglik,
                stats.log_scale_factors.iter().sum::<f64>(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn loglik_invariant_under_state_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = random_params(3, &mut rng);
        let seq = random_sequence(5, &mut rng);
        let base = sequence_loglik(&params, &seq).unwrap();

        // Swap states 0 and 2, permuting every per-state structure.
        let perm = [2usize, 1, 0];
        let states = (0..3)
            .map(|i| {
                let src = &params.states[perm[i]];
                StateParams {
                    mu: src.mu.clone(),
                    a: src.a.clone(),
                    b: src.b.clone(),
                    sigma: src.sigma.clone(),
                    w_rows: (0..3).map(|j| src.w_rows[perm[j]].clone()).collect(),
                }
            })
            .collect();
        let w0 = (0..3).map(|j| params.w0[perm[j]].clone()).collect();
        let permuted = ModelParams::new(states, w0).unwrap();
        let permuted_ll = sequence_loglik(&permuted, &seq).unwrap();
        assert_relative_eq!(base, permuted_ll, max_relative = 1e-10);
    }

    #[test]
    fn anticipate_posteriors_symmetry_and_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = random_params(2, &mut rng);
        let seq = random_sequence(4, &mut rng);
        let (xs, zs) = seq.to_xz();

        let models = ManeuverModelSet::with_uniform_prior([
            params.clone(),
            params.clone(),
            params.clone(),
            params.clone(),
            params.clone(),
        ]);
        let post = anticipate_posteriors(&models, &xs, &zs).unwrap();
        for &p in &post {
            assert_relative_eq!(p, 0.2, epsilon = 1e-12);
        }
        assert_relative_eq!(post.iter().sum::<f64>(), 1.0, epsilon = 1e-12);

        // One-hot prior kills the other classes.
        let one_hot = ManeuverModelSet::new(
            [
                params.clone(),
                params.clone(),
                params.clone(),
                params.clone(),
                params.clone(),
            ],
            [0.0, 0.0, 1.0, 0.0, 0.0],
        )
        .unwrap();
        let post = anticipate_posteriors(&one_hot, &xs, &zs).unwrap();
        assert_relative_eq!(post[ManeuverClass::LeftTurn.index()], 1.0, epsilon = 1e-12);
        assert_eq!(post[0], 0.0);
    }

    #[test]
    fn anticipate_posteriors_matches_hand_softmax_of_logliks() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m1 = random_params(1, &mut rng);
        let m2 = random_params(1, &mut rng);
        let seq = random_sequence(3, &mut rng);
        let (xs, zs) = seq.to_xz();
        let l1 = sequence_loglik(&m1, &seq).unwrap();
        let l2 = sequence_loglik(&m2, &seq).unwrap();

        let models = ManeuverModelSet::with_uniform_prior([
            m1.clone(),
            m2.clone(),
            m1.clone(),
            m1.clone(),
            m1.clone(),
        ]);
        let post = anticipate_posteriors(&models, &xs, &zs).unwrap();
        // Classes 0, 2, 3, 4 share model m1; class 1 has m2.
        let denom = 4.0 * l1.exp() + l2.exp();
        assert_relative_eq!(post[1], l2.exp() / denom, max_relative = 1e-9);
        assert_relative_eq!(post[0], l1.exp() / denom, max_relative = 1e-9);
    }

    #[test]
    fn prior_scale_invariance() {
        let logliks = [-10.0, -12.0, -9.5, -11.0, -10.5];
        let prior = [0.1, 0.2, 0.3, 0.15, 0.25];
        let scaled: [f64; 5] = std::array::from_fn(|i| prior[i] * 7.3);
        let p1 = posteriors_from_logliks(&logliks, &prior);
        let p2 = posteriors_from_logliks(&logliks, &scaled);
        for (a, b) in p1.iter().zip(&p2) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn invalid_class_model_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let good = random_params(2, &mut rng);
        let mut bad = good.clone();
        bad.states[0].sigma[(0, 0)] = -1.0;
        let models = ManeuverModelSet::with_uniform_prior([
            good.clone(),
            bad,
            good.clone(),
            good.clone(),
            good.clone(),
        ]);
        let seq = random_sequence(3, &mut rng);
        let (xs, zs) = seq.to_xz();
        assert!(matches!(
            anticipate_posteriors(&models, &xs, &zs),
            Err(Error::InvalidArgument(_))
        ));
    }
}
