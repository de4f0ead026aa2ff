//! Neuronal-state initialization from captured activations.
//!
//! Matrices here act on activation rows from the left: `w` is m×n, `acts`
//! is T×m, and the products of interest are `acts · w`. A network block
//! stored as N_out×N_in enters as its transpose and leaves the same way.
//!
//! Two routes produce the communication matrix C: an explicit-Euler
//! gradient flow on the combined residual
//! `J(C) = λ·R_act(C) + (1−λ)·R_weight(C)`, and the closed-form blend
//! `C = λ·A⁺·SVDᵣ[A·W] + (1−λ)·X⁺·SVDᵣ[X·W]` with X a seeded Gaussian
//! matrix of A's shape scaled by 1/√T.

use crate::error::{NgcError, Result};
use crate::groups::{IntraMetric, StateBlock};
use crate::linalg::{pinv, svd, truncate_factor};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InitConfig {
    /// Blend weight on the activation route, strictly inside (0, 1).
    pub lambda: f64,
    pub rank: usize,
    pub flow_step: f64,
    pub flow_steps: usize,
    pub seed: u64,
    /// Denominator guard; must be ≤ 1e-6.
    pub epsilon: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            lambda: 0.5,
            rank: 1,
            flow_step: 1e-3,
            flow_steps: 200,
            seed: 0,
            epsilon: 1e-8,
        }
    }
}

impl InitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(NgcError::InvalidInput(format!(
                "lambda {} not strictly inside (0, 1)",
                self.lambda
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-6) {
            return Err(NgcError::InvalidInput(format!(
                "epsilon {} outside (0, 1e-6]",
                self.epsilon
            )));
        }
        if self.flow_step <= 0.0 {
            return Err(NgcError::InvalidInput("flow_step must be positive".into()));
        }
        Ok(())
    }
}

fn check_act_shapes(c: &Matrix, w: &Matrix, acts: &Matrix) -> Result<()> {
    if c.shape() != w.shape() {
        return Err(NgcError::ShapeError(format!(
            "c is {}x{}, w is {}x{}",
            c.rows(),
            c.cols(),
            w.rows(),
            w.cols()
        )));
    }
    if acts.cols() != w.rows() {
        return Err(NgcError::ShapeError(format!(
            "activation rows have {} entries, w expects {}",
            acts.cols(),
            w.rows()
        )));
    }
    Ok(())
}

/// Activation-restricted residual `Σ_t ‖a_t·w − a_t·c‖₂²`.
pub fn residual_act(c: &Matrix, w: &Matrix, acts: &Matrix) -> Result<f64> {
    check_act_shapes(c, w, acts)?;
    let diff = acts.matmul(&w.sub(c));
    let n = diff.frob_norm();
    Ok(n * n)
}

/// Weight-restricted residual `t_count·‖w − c‖_F²` (the summand is
/// token-independent, so the sum over t is a plain multiple).
pub fn residual_weight(c: &Matrix, w: &Matrix, t_count: usize) -> Result<f64> {
    if c.shape() != w.shape() {
        return Err(NgcError::ShapeError(format!(
            "c is {}x{}, w is {}x{}",
            c.rows(),
            c.cols(),
            w.rows(),
            w.cols()
        )));
    }
    let n = w.sub(c).frob_norm();
    Ok(t_count as f64 * n * n)
}

#[derive(Debug, Clone)]
pub struct FlowOutcome {
    pub c: Matrix,
    /// J at C₀ and after every accepted step (flow_steps + 1 values).
    pub trajectory: Vec<f64>,
}

/// Explicit-Euler descent on `J(C) = λ·R_act + (1−λ)·R_weight` from C₀ = 0.
/// `∇J = −2·[λ·AᵀA + (1−λ)·T·I]·(W − C)`, so each step moves C toward W
/// along the activation-weighted metric. Errors with `StepTooLarge` once J
/// increases for 10 consecutive steps.
pub fn init_gradient_flow(w: &Matrix, acts: &Matrix, cfg: &InitConfig) -> Result<FlowOutcome> {
    cfg.validate()?;
    let c0 = Matrix::zeros(w.rows(), w.cols());
    check_act_shapes(&c0, w, acts)?;
    w.check_finite("flow w")?;
    acts.check_finite("flow acts")?;

    let t_count = acts.rows();
    let gram = acts.matmul_tn(acts); // AᵀA, m×m
    let mut c = c0;
    let j = |c: &Matrix| -> f64 {
        let diff = w.sub(c);
        let act_part = acts.matmul(&diff).frob_norm().powi(2);
        let w_part = diff.frob_norm().powi(2) * t_count as f64;
        cfg.lambda * act_part + (1.0 - cfg.lambda) * w_part
    };
    let mut trajectory = vec![j(&c)];
    let mut consecutive_increases = 0;
    for step in 0..cfg.flow_steps {
        let diff = w.sub(&c);
        // −∇J
        let mut descent = gram.matmul(&diff).scale(2.0 * cfg.lambda);
        descent.axpy(2.0 * (1.0 - cfg.lambda) * t_count as f64, &diff);
        c.axpy(cfg.flow_step, &descent);
        let value = j(&c);
        if value > *trajectory.last().unwrap() {
            consecutive_increases += 1;
            if consecutive_increases >= 10 {
                return Err(NgcError::StepTooLarge(format!(
                    "objective increased for 10 consecutive steps (step {step}, J = {value:.3e})"
                )));
            }
        } else {
            consecutive_increases = 0;
        }
        trajectory.push(value);
    }
    Ok(FlowOutcome { c, trajectory })
}

/// The two blend endpoints: `A⁺·SVDᵣ[A·W]` and `X⁺·SVDᵣ[X·W]`, where X is
/// the seeded Gaussian probe with acts' shape and 1/√T scale.
pub fn init_svd_blend_parts(
    w: &Matrix,
    acts: &Matrix,
    cfg: &InitConfig,
) -> Result<(Matrix, Matrix)> {
    if cfg.rank < 1 || cfg.rank > w.rows().min(w.cols()) {
        return Err(NgcError::RankError(format!(
            "rank {} not in [1, {}]",
            cfg.rank,
            w.rows().min(w.cols())
        )));
    }
    let c0 = Matrix::zeros(w.rows(), w.cols());
    check_act_shapes(&c0, w, acts)?;
    let probe = {
        let mut rng = crate::seeding::rng(cfg.seed, "init-probe");
        Matrix::gaussian(
            acts.rows(),
            acts.cols(),
            1.0 / (acts.rows() as f64).sqrt(),
            &mut rng,
        )
    };
    let term = |m: &Matrix| -> Result<Matrix> {
        let mw = m.matmul(w);
        let sv = svd(&mw)?;
        let r = cfg.rank.min(sv.s.len());
        let (a, b) = truncate_factor(&sv, r)?;
        Ok(pinv(m)?.matmul(&a.matmul_nt(&b)))
    };
    Ok((term(acts)?, term(&probe)?))
}

/// `C = λ·A⁺·SVDᵣ[A·W] + (1−λ)·X⁺·SVDᵣ[X·W]`; deterministic given
/// `cfg.seed`.
pub fn init_svd_blend(w: &Matrix, acts: &Matrix, cfg: &InitConfig) -> Result<Matrix> {
    cfg.validate()?;
    let (act_term, rand_term) = init_svd_blend_parts(w, acts, cfg)?;
    let mut c = act_term.scale(cfg.lambda);
    c.axpy(1.0 - cfg.lambda, &rand_term);
    Ok(c)
}

/// Factorize a block-oriented C (N_out×N_in) into a state block at rank
/// `r_star` with the given metric attached; metric calibration is a
/// separate step.
pub fn states_from_c(c: &Matrix, r_star: usize, metric: IntraMetric) -> Result<StateBlock> {
    let block = crate::groups::factorize_block(c, r_star)?;
    Ok(block.with_metric(metric))
}
