//! Executable reference of the two-stage layer-wise adaptive optimizer
//! (LAMB) whose update phase the cost model prices.
//!
//! Stage 1 folds the gradient into the moment estimates and produces a
//! bias-corrected, decay-regularized update direction together with the two
//! norms the trust ratio needs. Stage 2 rescales the direction by
//! `‖w‖ / ‖u‖` and applies it. All arithmetic is FP64 so this module can
//! serve as the oracle for any lower-precision implementation.
//!
//! [`run_verification`] replays randomized staged updates against
//! [`lamb_reference_step`], a deliberately separate single-pass
//! implementation, and reports the worst elementwise disagreement.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Precision;
use crate::error::Error;

/// Optimizer state for one parameter bucket (one layer, or the embeddings).
///
/// Buckets are independent: each holds its own moments and steps on its own
/// schedule, which is what lets the cost model update layers concurrently.
#[derive(Debug, Clone, PartialEq)]
pub struct LambState {
    pub weights: Vec<f64>,
    /// First-moment (momentum) estimate, zero at step 0.
    pub m: Vec<f64>,
    /// Second-moment (velocity) estimate, zero at step 0.
    pub v: Vec<f64>,
    /// Completed update steps.
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub learning_rate: f64,
}

impl LambState {
    /// Fresh state with the published hyper-parameters: β1 = 0.9,
    /// β2 = 0.999, ε = 1e-6, λ = 0.01, η = 0.001.
    pub fn new(weights: Vec<f64>) -> Self {
        let n = weights.len();
        Self {
            weights,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-6,
            weight_decay: 0.01,
            learning_rate: 0.001,
        }
    }
}

/// Stage-1 output: the update direction and the norms stage 2 divides.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDirection {
    pub u: Vec<f64>,
    pub weight_norm: f64,
    pub update_norm: f64,
}

fn l2_norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn ensure_finite(what: &'static str, xs: &[f64]) -> Result<(), Error> {
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    Ok(())
}

/// Advances the moment estimates by one gradient and returns the update
/// direction `u = m̂ / (√v̂ + ε) + λ·w` with both trust-ratio norms, where
/// `m̂`, `v̂` are the bias-corrected moments for the new step index.
pub fn lamb_stage1(state: &mut LambState, grads: &[f64]) -> Result<UpdateDirection, Error> {
    if grads.len() != state.weights.len() {
        return Err(Error::LengthMismatch {
            expected: state.weights.len(),
            actual: grads.len(),
        });
    }
    ensure_finite("grads", grads)?;
    ensure_finite("weights", &state.weights)?;

    state.t += 1;
    let bias1 = 1.0 - state.beta1.powi(state.t as i32);
    let bias2 = 1.0 - state.beta2.powi(state.t as i32);

    let mut u = Vec::with_capacity(grads.len());
    for (i, &g) in grads.iter().enumerate() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bias1;
        let v_hat = state.v[i] / bias2;
        u.push(m_hat / (v_hat.sqrt() + state.epsilon) + state.weight_decay * state.weights[i]);
    }
    Ok(UpdateDirection {
        weight_norm: l2_norm(&state.weights),
        update_norm: l2_norm(&u),
        u,
    })
}

/// Applies a stage-1 direction: `w ← w − η·r·u` with trust ratio
/// `r = ‖w‖ / ‖u‖`, defined as 1 when either norm is zero so a zero update
/// or zero weights never divide by zero.
pub fn lamb_stage2(state: &mut LambState, dir: &UpdateDirection) -> Result<(), Error> {
    if dir.u.len() != state.weights.len() {
        return Err(Error::LengthMismatch {
            expected: state.weights.len(),
            actual: dir.u.len(),
        });
    }
    ensure_finite("update direction", &dir.u)?;

    let r = if dir.weight_norm == 0.0 || dir.update_norm == 0.0 {
        1.0
    } else {
        dir.weight_norm / dir.update_norm
    };
    let scale = state.learning_rate * r;
    for (w, u) in state.weights.iter_mut().zip(&dir.u) {
        *w -= scale * u;
    }
    Ok(())
}

/// L2 norm over all gradient buckets together: `√(Σ over buckets Σ g²)`.
/// The cost model schedules every stage-1 op after this reduction, because
/// the training recipe consumes the global norm before any weight moves.
pub fn global_grad_norm(all_grads: &[Vec<f64>]) -> Result<f64, Error> {
    let mut total = 0.0;
    for bucket in all_grads {
        ensure_finite("grads", bucket)?;
        for g in bucket {
            total += g * g;
        }
    }
    Ok(total.sqrt())
}

/// DRAM traffic of one full update over `param_count` parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrafficAccount {
    pub bytes_read: u64,
    pub bytes_written: u64,
}

/// Bytes one optimizer step moves: reads weights, gradients, and both
/// moments (4 words per parameter); writes weights and both moments
/// (3 words per parameter). The master state stays FP32 even when the rest
/// of training runs at reduced precision, so the answer does not depend on
/// `precision`.
pub fn traffic_account(param_count: u64, precision: Precision) -> TrafficAccount {
    let _ = precision;
    TrafficAccount {
        bytes_read: 4 * 4 * param_count,
        bytes_written: 3 * 4 * param_count,
    }
}

/// Single-pass LAMB step, written independently of the staged functions so
/// the two can check each other. Consumes the pre-step moments and returns
/// `(weights', m', v')` for step index `t_new`.
#[allow(clippy::too_many_arguments)]
pub fn lamb_reference_step(
    weights: &[f64],
    grads: &[f64],
    m: &[f64],
    v: &[f64],
    t_new: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    weight_decay: f64,
    learning_rate: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    assert_eq!(weights.len(), grads.len());
    assert_eq!(weights.len(), m.len());
    assert_eq!(weights.len(), v.len());

    let n = weights.len();
    let mut m_next = vec![0.0; n];
    let mut v_next = vec![0.0; n];
    let mut update = vec![0.0; n];
    for i in 0..n {
        m_next[i] = beta1 * m[i] + (1.0 - beta1) * grads[i];
        v_next[i] = beta2 * v[i] + (1.0 - beta2) * grads[i] * grads[i];
        let m_hat = m_next[i] / (1.0 - beta1.powi(t_new as i32));
        let v_hat = v_next[i] / (1.0 - beta2.powi(t_new as i32));
        update[i] = m_hat / (v_hat.sqrt() + epsilon) + weight_decay * weights[i];
    }

    let mut w_sq = 0.0;
    let mut u_sq = 0.0;
    for i in 0..n {
        w_sq += weights[i] * weights[i];
        u_sq += update[i] * update[i];
    }
    let (w_norm, u_norm) = (w_sq.sqrt(), u_sq.sqrt());
    let trust = if w_norm == 0.0 || u_norm == 0.0 {
        1.0
    } else {
        w_norm / u_norm
    };

    let mut w_next = vec![0.0; n];
    for i in 0..n {
        w_next[i] = weights[i] - learning_rate * trust * update[i];
    }
    (w_next, m_next, v_next)
}

/// The first trial that exceeded tolerance, for pinpointing a regression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FailureCase {
    pub trial: u64,
    pub elements: usize,
    pub abs_error: f64,
}

/// Outcome of [`run_verification`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerificationReport {
    pub trials: u64,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub first_failure: Option<FailureCase>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.max_abs_error <= self.tolerance
    }
}

/// Replays `trials` randomized buckets (sizes 1..=`max_elements`, random
/// hyper-parameters and step indices) through the staged update and the
/// single-pass reference, comparing weights and both moments elementwise.
/// Deterministic in `seed`.
pub fn run_verification(
    max_elements: usize,
    trials: u64,
    seed: u64,
    tolerance: f64,
) -> Result<VerificationReport, Error> {
    if max_elements == 0 {
        return Err(Error::InvalidValue {
            key: "max_elements",
            reason: "must be at least 1".to_string(),
        });
    }
    if !(tolerance.is_finite() && tolerance >= 0.0) {
        return Err(Error::InvalidValue {
            key: "tolerance",
            reason: format!("must be a non-negative finite number, got {tolerance}"),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_abs_error: f64 = 0.0;
    let mut first_failure = None;

    for trial in 0..trials {
        let n = rng.gen_range(1..=max_elements);
        let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let grads: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let m: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let t_prev = rng.gen_range(0..100);

        let mut state = LambState {
            weights: weights.clone(),
            m: m.clone(),
            v: v.clone(),
            t: t_prev,
            beta1: rng.gen_range(0.5..0.9999),
            beta2: rng.gen_range(0.9..0.9999),
            epsilon: 1e-6,
            weight_decay: rng.gen_range(0.0..0.1),
            learning_rate: rng.gen_range(1e-4..1.0),
        };
        let dir = lamb_stage1(&mut state, &grads)?;
        lamb_stage2(&mut state, &dir)?;

        let (w_ref, m_ref, v_ref) = lamb_reference_step(
            &weights,
            &grads,
            &m,
            &v,
            t_prev + 1,
            state.beta1,
            state.beta2,
            state.epsilon,
            state.weight_decay,
            state.learning_rate,
        );

        let mut trial_error: f64 = 0.0;
        for i in 0..n {
            trial_error = trial_error
                .max((state.weights[i] - w_ref[i]).abs())
                .max((state.m[i] - m_ref[i]).abs())
                .max((state.v[i] - v_ref[i]).abs());
        }
        max_abs_error = max_abs_error.max(trial_error);
        if trial_error > tolerance && first_failure.is_none() {
            first_failure = Some(FailureCase {
                trial,
                elements: n,
                abs_error: trial_error,
            });
        }
    }

    Ok(VerificationReport {
        trials,
        max_abs_error,
        tolerance,
        first_failure,
    })
}

// =============================================================================
// Tests
// =============================================================================
