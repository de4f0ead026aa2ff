//! Neuronal states and intra-group communication.
//!
//! A weight block `W` (out × in) becomes a [`StateBlock`]: one state row per
//! output neuron, one per input neuron, and a similarity `μ` whose pairwise
//! evaluation reproduces the effective weight, `Ŵ[i,j] = μ(q_out[i], q_in[j])`.
//! `μ` is either the plain dot product or a (shared) bilinear feature map
//! `⟨σ(q·G_left), σ(p·G_right)⟩`.

use crate::error::{NgcError, Result};
use crate::linalg::{self, svd, truncate_factor};
use crate::matrix::{dot, Matrix};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Similarity between an output-side state and an input-side state.
#[derive(Debug, Clone, PartialEq)]
pub enum IntraMetric {
    /// `μ(q, p) = ⟨q, p⟩` — the σ = identity, G = I special case.
    DotProduct,
    /// `μ(q, p) = ⟨σ(q·g_left), σ(p·g_right)⟩` with independent sides.
    Bilinear {
        g_left: Matrix,
        g_right: Matrix,
        activation: Activation,
    },
    /// One projection for both sides (G ≡ H), a symmetric learned metric.
    SharedBilinear { g: Matrix, activation: Activation },
}

impl IntraMetric {
    /// Seeded Gaussian init with std 1/√r̃, keeping pre-activations O(1)
    /// under tanh.
    pub fn bilinear_seeded(r: usize, r_tilde: usize, activation: Activation, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (r_tilde as f64).sqrt();
        IntraMetric::Bilinear {
            g_left: Matrix::gaussian(r, r_tilde, std, &mut rng),
            g_right: Matrix::gaussian(r, r_tilde, std, &mut rng),
            activation,
        }
    }

    pub fn shared_seeded(r: usize, r_tilde: usize, activation: Activation, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (r_tilde as f64).sqrt();
        IntraMetric::SharedBilinear {
            g: Matrix::gaussian(r, r_tilde, std, &mut rng),
            activation,
        }
    }

    pub fn is_trainable(&self) -> bool {
        !matches!(self, IntraMetric::DotProduct)
    }

    fn sides(&self) -> Option<(&Matrix, &Matrix, Activation)> {
        match self {
            IntraMetric::DotProduct => None,
            IntraMetric::Bilinear {
                g_left,
                g_right,
                activation,
            } => Some((g_left, g_right, *activation)),
            IntraMetric::SharedBilinear { g, activation } => Some((g, g, *activation)),
        }
    }

    /// Number of trainable metric parameters.
    pub fn param_count(&self) -> usize {
        match self {
            IntraMetric::DotProduct => 0,
            IntraMetric::Bilinear { g_left, g_right, .. } => {
                g_left.rows() * g_left.cols() + g_right.rows() * g_right.cols()
            }
            IntraMetric::SharedBilinear { g, .. } => g.rows() * g.cols(),
        }
    }
}

/// One factorized weight block: per-neuron state rows plus the metric.
#[derive(Debug, Clone, PartialEq)]
pub struct StateBlock {
    /// N_out × r*, rows are output-neuron states.
    pub q_out: Matrix,
    /// N_in × r*, rows are input-neuron states.
    pub q_in: Matrix,
    pub metric: IntraMetric,
    /// Identifier of the dense block this came from.
    pub origin: String,
}

/// Factorize `w` at rank `r` with the dot-product metric;
/// `q_out · q_inᵀ` is the best rank-`r` approximation of `w`.
pub fn factorize_block(w: &Matrix, r: usize) -> Result<StateBlock> {
    let min_dim = w.rows().min(w.cols());
    if r < 1 || r > min_dim {
        return Err(NgcError::RankError(format!(
            "r = {r} not in [1, {min_dim}] for a {}x{} block",
            w.rows(),
            w.cols()
        )));
    }
    let sv = svd(w)?;
    let (a, b) = truncate_factor(&sv, r)?;
    Ok(StateBlock {
        q_out: a,
        q_in: b,
        metric: IntraMetric::DotProduct,
        origin: String::new(),
    })
}

impl StateBlock {
    pub fn n_out(&self) -> usize {
        self.q_out.rows()
    }

    pub fn n_in(&self) -> usize {
        self.q_in.rows()
    }

    pub fn rank(&self) -> usize {
        self.q_out.cols()
    }

    pub fn with_metric(mut self, metric: IntraMetric) -> Self {
        self.metric = metric;
        self
    }

    pub fn with_origin(mut self, origin: impl Into<String>) -> Self {
        self.origin = origin.into();
        self
    }

    /// Left feature rows `σ(q_out · G_left)`; for the dot product these are
    /// the state rows themselves.
    pub fn left_features(&self) -> Matrix {
        match self.metric.sides() {
            None => self.q_out.clone(),
            Some((gl, _, act)) => self.q_out.matmul(gl).map(|x| act.apply(x)),
        }
    }

    /// Right feature rows `σ(q_in · G_right)`.
    pub fn right_features(&self) -> Matrix {
        match self.metric.sides() {
            None => self.q_in.clone(),
            Some((_, gr, act)) => self.q_in.matmul(gr).map(|x| act.apply(x)),
        }
    }

    /// The effective weight: entry (i, j) is `μ(q_out[i], q_in[j])`.
    pub fn reconstruct(&self) -> Matrix {
        self.left_features().matmul_nt(&self.right_features())
    }

    /// `reconstruct() · x`, computed in factored form.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_in() {
            return Err(NgcError::ShapeError(format!(
                "input length {} != N_in {}",
                x.len(),
                self.n_in()
            )));
        }
        let fr = self.right_features();
        let z = fr.vec_mat_t(x);
        Ok(self.left_features().mat_vec(&z))
    }

    /// Batch apply: rows of `x` (T × N_in) through the block, giving T × N_out.
    pub fn apply_batch(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.n_in() {
            return Err(NgcError::ShapeError(format!(
                "input cols {} != N_in {}",
                x.cols(),
                self.n_in()
            )));
        }
        Ok(x.matmul(&self.right_features()).matmul_nt(&self.left_features()))
    }
}

/// Gradients of a calibration loss with respect to the metric parameters.
#[derive(Debug, Clone)]
pub enum MetricGrads {
    Bilinear { g_left: Matrix, g_right: Matrix },
    Shared { g: Matrix },
}

/// Which mismatch the calibration minimizes.
#[derive(Debug, Clone)]
pub enum CalibrationLoss {
    /// `‖reconstruct(b) − target‖_F²`
    WeightMatching,
    /// `‖X·(reconstruct(b) − target)ᵀ‖_F²` over captured input rows X.
    ActivationMatching(Matrix),
}

impl CalibrationLoss {
    pub fn value(&self, block: &StateBlock, target: &Matrix) -> f64 {
        let d = block.reconstruct().sub(target);
        match self {
            CalibrationLoss::WeightMatching => {
                let n = d.frob_norm();
                n * n
            }
            CalibrationLoss::ActivationMatching(x) => {
                let n = x.matmul_nt(&d).frob_norm();
                n * n
            }
        }
    }

    /// dL/dŴ for the current block.
    fn weight_gradient(&self, block: &StateBlock, target: &Matrix) -> Matrix {
        let d = block.reconstruct().sub(target);
        match self {
            CalibrationLoss::WeightMatching => d.scale(2.0),
            CalibrationLoss::ActivationMatching(x) => {
                let gram = x.matmul_tn(x);
                d.matmul(&gram).scale(2.0)
            }
        }
    }
}

/// Analytic gradient of the calibration loss w.r.t. the metric parameters.
/// Errors with `NotTrainable` for the dot-product metric.
pub fn calibration_gradients(
    block: &StateBlock,
    target: &Matrix,
    loss: &CalibrationLoss,
) -> Result<MetricGrads> {
    let (gl, gr, act) = block.metric.sides().ok_or(NgcError::NotTrainable)?;
    if target.shape() != (block.n_out(), block.n_in()) {
        return Err(NgcError::ShapeError(format!(
            "target {}x{} vs block {}x{}",
            target.rows(),
            target.cols(),
            block.n_out(),
            block.n_in()
        )));
    }
    let z_left = block.q_out.matmul(gl);
    let z_right = block.q_in.matmul(gr);
    let f_left = z_left.map(|x| act.apply(x));
    let f_right = z_right.map(|x| act.apply(x));

    let dw = loss.weight_gradient(block, target);
    // dL/dF_L = dW · F_R ; dL/dF_R = dWᵀ · F_L
    let mut d_zl = dw.matmul(&f_right);
    let mut d_zr = dw.matmul_tn(&f_left);
    for i in 0..d_zl.rows() {
        for j in 0..d_zl.cols() {
            d_zl[(i, j)] *= act.derivative(z_left[(i, j)]);
        }
    }
    for i in 0..d_zr.rows() {
        for j in 0..d_zr.cols() {
            d_zr[(i, j)] *= act.derivative(z_right[(i, j)]);
        }
    }
    let g_left = block.q_out.matmul_tn(&d_zl);
    let g_right = block.q_in.matmul_tn(&d_zr);
    Ok(match block.metric {
        IntraMetric::SharedBilinear { .. } => MetricGrads::Shared {
            g: g_left.add(&g_right),
        },
        _ => MetricGrads::Bilinear { g_left, g_right },
    })
}

/// Plain gradient descent on the metric parameters. States are untouched.
/// Returns the calibrated block and the loss at each epoch (epochs + 1
/// values, the first being the initial loss).
pub fn calibrate_metric(
    block: &StateBlock,
    target: &Matrix,
    epochs: usize,
    lr: f64,
) -> Result<(StateBlock, Vec<f64>)> {
    calibrate_metric_with(block, target, epochs, lr, &CalibrationLoss::WeightMatching)
}

pub fn calibrate_metric_with(
    block: &StateBlock,
    target: &Matrix,
    epochs: usize,
    lr: f64,
    loss: &CalibrationLoss,
) -> Result<(StateBlock, Vec<f64>)> {
    if !block.metric.is_trainable() {
        return Err(NgcError::NotTrainable);
    }
    let mut current = block.clone();
    let mut losses = Vec::with_capacity(epochs + 1);
    losses.push(loss.value(&current, target));
    for _ in 0..epochs {
        let grads = calibration_gradients(&current, target, loss)?;
        match (&mut current.metric, grads) {
            (
                IntraMetric::Bilinear { g_left, g_right, .. },
                MetricGrads::Bilinear {
                    g_left: dl,
                    g_right: dr,
                },
            ) => {
                g_left.axpy(-lr, &dl);
                g_right.axpy(-lr, &dr);
            }
            (IntraMetric::SharedBilinear { g, .. }, MetricGrads::Shared { g: dg }) => {
                g.axpy(-lr, &dg);
            }
            _ => unreachable!("gradient variant always matches the metric"),
        }
        losses.push(loss.value(&current, target));
    }
    Ok((current, losses))
}

/// Rewrites a bilinear coupling `⟨u, m·v⟩` as a plain dot product between
/// reparameterized features: returns `(c_left, c_right)` with
/// `⟨u, m·v⟩ = ⟨c_leftᵀ·u, c_rightᵀ·v⟩` (`c_left·c_rightᵀ = m`).
pub fn metric_reparameterize(m: &Matrix) -> Result<(Matrix, Matrix)> {
    if m.rows() != m.cols() {
        return Err(NgcError::ShapeError(format!(
            "expected a square coupling, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let sv = svd(m)?;
    truncate_factor(&sv, sv.s.len())
}

/// Reduces a symmetric positive-definite metric to Euclidean coordinates:
/// returns `R` with `RᵀR = g`, so `uᵀ·g·v = ⟨R·u, R·v⟩`.
pub fn spd_reduce(g: &Matrix) -> Result<Matrix> {
    g.check_finite("spd_reduce input")?;
    linalg::cholesky_upper(g)
}

/// Outcome of the input-side sharing check.
#[derive(Debug, Clone)]
pub struct SharingCheck {
    pub lossless: bool,
    /// The fitted feature-space isometry, present only when lossless.
    pub isometry: Option<Matrix>,
    /// `‖L1·U − L2‖_F / max(1, ‖L2‖_F)` for the fitted U.
    pub feature_residual: f64,
    /// Max-abs output disagreement on the probe inputs after aligning
    /// b2's left features by Uᵀ.
    pub output_deviation: f64,
}

const SHARING_TOL: f64 = 1e-6;

/// Tests whether two blocks sharing their input-side states compute the
/// same map up to an orthogonal change of feature basis. The isometry is
/// fitted by orthogonal Procrustes between the left feature rows.
pub fn sharing_lossless_check(
    b1: &StateBlock,
    b2: &StateBlock,
    inputs: &Matrix,
) -> Result<SharingCheck> {
    if b1.q_in != b2.q_in {
        return Err(NgcError::ShapeError(
            "blocks do not share input-side states".into(),
        ));
    }
    let right_equal = match (b1.metric.sides(), b2.metric.sides()) {
        (None, None) => true,
        (Some((_, r1, a1)), Some((_, r2, a2))) => r1 == r2 && a1 == a2,
        _ => false,
    };
    if !right_equal {
        return Err(NgcError::ShapeError(
            "blocks do not share right-side metric parameters".into(),
        ));
    }
    let l1 = b1.left_features();
    let l2 = b2.left_features();
    if l1.shape() != l2.shape() {
        return Err(NgcError::ShapeError(format!(
            "left feature shapes differ: {:?} vs {:?}",
            l1.shape(),
            l2.shape()
        )));
    }
    if inputs.cols() != b1.n_in() {
        return Err(NgcError::ShapeError(format!(
            "probe inputs have {} cols, blocks expect {}",
            inputs.cols(),
            b1.n_in()
        )));
    }

    // Orthogonal Procrustes: with M = L1ᵀL2 = P Σ Qᵀ, U = P Qᵀ.
    let sv = svd(&l1.matmul_tn(&l2))?;
    let u = sv.u.matmul(&sv.vt);
    let feature_residual = l1.matmul(&u).sub(&l2).frob_norm() / l2.frob_norm().max(1.0);

    // Undo the rotation on b2's left features and compare applied outputs.
    let right = b1.right_features();
    let w1 = l1.matmul_nt(&right);
    let w2_aligned = l2.matmul_nt(&u).matmul_nt(&right);
    let y1 = inputs.matmul_nt(&w1);
    let y2 = inputs.matmul_nt(&w2_aligned);
    let output_deviation = y1.sub(&y2).max_abs();

    let lossless =
        feature_residual <= SHARING_TOL && output_deviation <= SHARING_TOL * y1.max_abs().max(1.0);
    Ok(SharingCheck {
        lossless,
        isometry: lossless.then_some(u),
        feature_residual,
        output_deviation,
    })
}

#[derive(Serialize, Deserialize)]
struct BlockMeta {
    metric: String,
    activation: Option<Activation>,
    n_out: usize,
    n_in: usize,
    r: usize,
    r_tilde: Option<usize>,
    origin: String,
}

/// Persist a block as a directory: `meta.json` plus NGCT tensors.
pub fn save_state_block(dir: &Path, block: &StateBlock) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (metric, activation, r_tilde) = match &block.metric {
        IntraMetric::DotProduct => ("dot_product", None, None),
        IntraMetric::Bilinear {
            g_left,
            g_right,
            activation,
        } => {
            crate::ngct::write_matrix(&dir.join("g_left.ngct"), g_left)?;
            crate::ngct::write_matrix(&dir.join("g_right.ngct"), g_right)?;
            ("bilinear", Some(*activation), Some(g_left.cols()))
        }
        IntraMetric::SharedBilinear { g, activation } => {
            crate::ngct::write_matrix(&dir.join("g_left.ngct"), g)?;
            ("shared_bilinear", Some(*activation), Some(g.cols()))
        }
    };
    let meta = BlockMeta {
        metric: metric.into(),
        activation,
        n_out: block.n_out(),
        n_in: block.n_in(),
        r: block.rank(),
        r_tilde,
        origin: block.origin.clone(),
    };
    std::fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    crate::ngct::write_matrix(&dir.join("q_in.ngct"), &block.q_in)?;
    crate::ngct::write_matrix(&dir.join("q_out.ngct"), &block.q_out)?;
    Ok(())
}

pub fn load_state_block(dir: &Path) -> Result<StateBlock> {
    let meta: BlockMeta = serde_json::from_slice(&std::fs::read(dir.join("meta.json"))?)?;
    let q_in = crate::ngct::read_matrix(&dir.join("q_in.ngct"))?;
    let q_out = crate::ngct::read_matrix(&dir.join("q_out.ngct"))?;
    let metric = match meta.metric.as_str() {
        "dot_product" => IntraMetric::DotProduct,
        "bilinear" => IntraMetric::Bilinear {
            g_left: crate::ngct::read_matrix(&dir.join("g_left.ngct"))?,
            g_right: crate::ngct::read_matrix(&dir.join("g_right.ngct"))?,
            activation: meta.activation.unwrap_or(Activation::Identity),
        },
        "shared_bilinear" => IntraMetric::SharedBilinear {
            g: crate::ngct::read_matrix(&dir.join("g_left.ngct"))?,
            activation: meta.activation.unwrap_or(Activation::Identity),
        },
        other => return Err(NgcError::Format(format!("unknown metric variant {other}"))),
    };
    Ok(StateBlock {
        q_out,
        q_in,
        metric,
        origin: meta.origin,
    })
}

impl Matrix {
    /// Vector-matrix product `x · self` for a length-rows slice, used by the
    /// factored apply paths.
    pub(crate) fn vec_mat_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(self.rows(), x.len());
        let mut out = vec![0.0; self.cols()];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += xi * a;
            }
        }
        out
    }
}

/// Entrywise evaluation of `μ(q_out[i], q_in[j])` — the slow per-pair path,
/// kept next to the batched one as its definition.
pub fn mu(block: &StateBlock, i: usize, j: usize) -> f64 {
    match block.metric.sides() {
        None => dot(block.q_out.row(i), block.q_in.row(j)),
        Some((gl, gr, act)) => {
            let fl: Vec<f64> = gl
                .vec_mat_t(block.q_out.row(i))
                .into_iter()
                .map(|x| act.apply(x))
                .collect();
            let fr: Vec<f64> = gr
                .vec_mat_t(block.q_in.row(j))
                .into_iter()
                .map(|x| act.apply(x))
                .collect();
            dot(&fl, &fr)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::gaussian(rows, cols, 1.0, &mut rng)
    }

    fn rand_rank_r(rows: usize, cols: usize, r: usize, seed: u64) -> Matrix {
        let a = rand_matrix(rows, r, seed);
        let b = rand_matrix(cols, r, seed.wrapping_add(1));
        a.matmul_nt(&b)
    }

    #[test]
    fn factorize_identity_full_rank() {
        let b = factorize_block(&Matrix::eye(4), 4).unwrap();
        assert!(b.reconstruct().sub(&Matrix::eye(4)).frob_norm() < 1e-10);
    }

    #[test]
    fn factorize_diag_rank2() {
        let b = factorize_block(&Matrix::diag(&[3.0, 2.0, 1.0]), 2).unwrap();
        let expect = Matrix::diag(&[3.0, 2.0, 0.0]);
        assert!(b.reconstruct().sub(&expect).frob_norm() < 1e-10);
    }

    #[test]
    fn factorize_error_is_tail_energy() {
        let w = rand_matrix(16, 12, 3);
        let b = factorize_block(&w, 4).unwrap();
        let err = b.reconstruct().sub(&w).frob_norm();
        let sv = svd(&w).unwrap();
        let tail: f64 = sv.s[4..].iter().map(|s| s * s).sum::<f64>().sqrt();
        assert!((err - tail).abs() < 1e-8);
    }

    #[test]
    fn factorize_rank_errors() {
        assert!(matches!(
            factorize_block(&Matrix::eye(3), 0),
            Err(NgcError::RankError(_))
        ));
        assert!(matches!(
            factorize_block(&Matrix::eye(3), 4),
            Err(NgcError::RankError(_))
        ));
    }

    #[test]
    fn reconstruct_identity_states() {
        let b = StateBlock {
            q_out: Matrix::eye(2),
            q_in: Matrix::eye(2),
            metric: IntraMetric::DotProduct,
            origin: String::new(),
        };
        assert!(b.reconstruct().sub(&Matrix::eye(2)).frob_norm() < 1e-15);
    }

    #[test]
    fn identity_bilinear_degenerates_to_dot() {
        let w = rand_matrix(5, 4, 7);
        let b = factorize_block(&w, 3).unwrap();
        let dotted = b.reconstruct();
        let b2 = b.with_metric(IntraMetric::Bilinear {
            g_left: Matrix::eye(3),
            g_right: Matrix::eye(3),
            activation: Activation::Identity,
        });
        assert!(b2.reconstruct().sub(&dotted).frob_norm() < 1e-12);
    }

    #[test]
    fn tanh_bilinear_matches_entrywise_oracle() {
        let b = factorize_block(&rand_matrix(6, 5, 11), 3)
            .unwrap()
            .with_metric(IntraMetric::bilinear_seeded(3, 9, Activation::Tanh, 12));
        let w = b.reconstruct();
        for i in 0..6 {
            for j in 0..5 {
                assert!((w[(i, j)] - mu(&b, i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn apply_zero_input() {
        let b = factorize_block(&rand_matrix(4, 3, 13), 2).unwrap();
        assert_eq!(b.apply(&[0.0; 3]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn apply_matches_dense_reconstruct() {
        let b = factorize_block(&rand_matrix(7, 6, 17), 4)
            .unwrap()
            .with_metric(IntraMetric::bilinear_seeded(4, 12, Activation::Tanh, 18));
        let x: Vec<f64> = (0..6).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let fast = b.apply(&x).unwrap();
        let dense = b.reconstruct().mat_vec(&x);
        for (a, o) in fast.iter().zip(&dense) {
            assert!((a - o).abs() < 1e-10);
        }
        assert!(matches!(b.apply(&[0.0; 5]), Err(NgcError::ShapeError(_))));
    }

    #[test]
    fn calibrate_already_optimal_is_fixed_point() {
        let b = factorize_block(&rand_matrix(5, 4, 19), 2)
            .unwrap()
            .with_metric(IntraMetric::bilinear_seeded(2, 6, Activation::Tanh, 20));
        let target = b.reconstruct();
        let (after, losses) = calibrate_metric(&b, &target, 5, 1e-2).unwrap();
        assert!(losses[0] < 1e-20);
        assert!(losses[5] < 1e-20);
        assert_eq!(after.metric, b.metric);
    }

    #[test]
    fn calibrate_dot_product_not_trainable() {
        let b = factorize_block(&Matrix::eye(3), 2).unwrap();
        assert!(matches!(
            calibrate_metric(&b, &Matrix::eye(3), 1, 1e-2),
            Err(NgcError::NotTrainable)
        ));
    }

    /// Central finite differences over every metric parameter.
    fn check_metric_gradients(block: &StateBlock, target: &Matrix, loss: &CalibrationLoss) {
        let analytic = calibration_gradients(block, target, loss).unwrap();
        let h = 1e-5;
        let perturb = |b: &StateBlock, which: usize, i: usize, j: usize, eps: f64| -> StateBlock {
            let mut p = b.clone();
            match &mut p.metric {
                IntraMetric::Bilinear { g_left, g_right, .. } => {
                    if which == 0 {
                        g_left[(i, j)] += eps;
                    } else {
                        g_right[(i, j)] += eps;
                    }
                }
                IntraMetric::SharedBilinear { g, .. } => g[(i, j)] += eps,
                IntraMetric::DotProduct => unreachable!(),
            }
            p
        };
        let check = |which: usize, grad: &Matrix| {
            for i in 0..grad.rows() {
                for j in 0..grad.cols() {
                    let plus = loss.value(&perturb(block, which, i, j, h), target);
                    let minus = loss.value(&perturb(block, which, i, j, -h), target);
                    let fd = (plus - minus) / (2.0 * h);
                    let scale = grad[(i, j)].abs().max(fd.abs()).max(1e-6);
                    assert!(
                        (grad[(i, j)] - fd).abs() / scale < 1e-4,
                        "grad[{which}][({i},{j})]: analytic {} vs fd {fd}",
                        grad[(i, j)]
                    );
                }
            }
        };
        match &analytic {
            MetricGrads::Bilinear { g_left, g_right } => {
                check(0, g_left);
                check(1, g_right);
            }
            MetricGrads::Shared { g } => check(0, g),
        }
    }

    #[test]
    fn calibration_gradients_match_finite_differences() {
        let target = rand_matrix(5, 4, 23);
        // identity activation starting at g = I
        let b = factorize_block(&rand_matrix(5, 4, 24), 3)
            .unwrap()
            .with_metric(IntraMetric::Bilinear {
                g_left: Matrix::eye(3),
                g_right: Matrix::eye(3),
                activation: Activation::Identity,
            });
        check_metric_gradients(&b, &target, &CalibrationLoss::WeightMatching);

        // tanh, both variants, both losses
        let b = b.with_metric(IntraMetric::bilinear_seeded(3, 7, Activation::Tanh, 25));
        check_metric_gradients(&b, &target, &CalibrationLoss::WeightMatching);
        let inputs = rand_matrix(6, 4, 26);
        check_metric_gradients(&b, &target, &CalibrationLoss::ActivationMatching(inputs));

        let b = b.with_metric(IntraMetric::shared_seeded(3, 7, Activation::Tanh, 27));
        check_metric_gradients(&b, &target, &CalibrationLoss::WeightMatching);
    }

    #[test]
    fn calibrate_rank2_target_reduces_loss_10x() {
        // States factored from the target itself; a fresh random metric is
        // then calibrated back towards it.
        let target = rand_rank_r(12, 9, 2, 0);
        let b = factorize_block(&target, 2)
            .unwrap()
            .with_metric(IntraMetric::bilinear_seeded(2, 6, Activation::Tanh, 0));
        let (_, losses) = calibrate_metric(&b, &target, 300, 1e-2).unwrap();
        let initial = losses[0];
        let last = *losses.last().unwrap();
        assert!(
            last <= 0.1 * initial,
            "calibration stalled: {initial} -> {last}"
        );
    }

    #[test]
    fn metric_reparameterize_cases() {
        // m = I: the bilinear form is already the dot product
        let (cl, cr) = metric_reparameterize(&Matrix::eye(3)).unwrap();
        assert!(cl.matmul_nt(&cr).sub(&Matrix::eye(3)).frob_norm() < 1e-12);

        for (m, seed) in [
            (Matrix::diag(&[4.0, 1.0]), 31u64),
            (rand_matrix(3, 3, 33), 34),
        ] {
            let (cl, cr) = metric_reparameterize(&m).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..100 {
                let u = Matrix::gaussian(m.rows(), 1, 1.0, &mut rng);
                let v = Matrix::gaussian(m.rows(), 1, 1.0, &mut rng);
                let lhs = dot(u.data(), &m.mat_vec(v.data()));
                let cu = cl.vec_mat_t(u.data());
                let cv = cr.vec_mat_t(v.data());
                let rhs = dot(&cu, &cv);
                assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn spd_reduce_cases() {
        let r = spd_reduce(&Matrix::eye(3)).unwrap();
        assert!(r.sub(&Matrix::eye(3)).frob_norm() < 1e-12);

        let r = spd_reduce(&Matrix::diag(&[4.0, 9.0])).unwrap();
        assert!(r.sub(&Matrix::diag(&[2.0, 3.0])).frob_norm() < 1e-12);

        let a = rand_matrix(5, 5, 37);
        let g = a.matmul_tn(&a).add(&Matrix::eye(5).scale(0.1));
        let r = spd_reduce(&g).unwrap();
        assert!(r.matmul_tn(&r).sub(&g).frob_norm() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        for _ in 0..50 {
            let u = Matrix::gaussian(5, 1, 1.0, &mut rng);
            let v = Matrix::gaussian(5, 1, 1.0, &mut rng);
            let lhs = dot(u.data(), &g.mat_vec(v.data()));
            let rhs = dot(&r.mat_vec(u.data()), &r.mat_vec(v.data()));
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
        }

        assert!(matches!(
            spd_reduce(&Matrix::diag(&[1.0, -1.0])),
            Err(NgcError::NotPositiveDefinite(_))
        ));
        let asym = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            spd_reduce(&asym),
            Err(NgcError::NotPositiveDefinite(_))
        ));
    }

    fn random_rotation(n: usize, seed: u64) -> Matrix {
        let m = rand_matrix(n, n, seed);
        let sv = svd(&m).unwrap();
        sv.u.matmul(&sv.vt)
    }

    #[test]
    fn sharing_check_identity_and_rotation() {
        let w = rand_matrix(6, 5, 41);
        let b1 = factorize_block(&w, 3).unwrap();
        let inputs = rand_matrix(8, 5, 42);

        let check = sharing_lossless_check(&b1, &b1.clone(), &inputs).unwrap();
        assert!(check.lossless);
        let u = check.isometry.unwrap();
        assert!(u.sub(&Matrix::eye(3)).frob_norm() < 1e-8);

        // planted rotation of the output-side states
        let rot = random_rotation(3, 43);
        let b2 = StateBlock {
            q_out: b1.q_out.matmul(&rot),
            q_in: b1.q_in.clone(),
            metric: IntraMetric::DotProduct,
            origin: String::new(),
        };
        let check = sharing_lossless_check(&b1, &b2, &inputs).unwrap();
        assert!(check.lossless, "residual {}", check.feature_residual);
        let u = check.isometry.unwrap();
        assert!(
            u.sub(&rot).frob_norm() < 1e-6,
            "recovered isometry off by {}",
            u.sub(&rot).frob_norm()
        );
    }

    #[test]
    fn sharing_check_flags_scaling() {
        let w = rand_matrix(6, 5, 47);
        let b1 = factorize_block(&w, 2).unwrap();
        let scale = Matrix::diag(&[2.0, 1.0]);
        let b2 = StateBlock {
            q_out: b1.q_out.matmul(&scale),
            q_in: b1.q_in.clone(),
            metric: IntraMetric::DotProduct,
            origin: String::new(),
        };
        let inputs = rand_matrix(8, 5, 48);
        let check = sharing_lossless_check(&b1, &b2, &inputs).unwrap();
        assert!(!check.lossless);
        assert!(check.isometry.is_none());
    }

    #[test]
    fn sharing_check_rejects_mismatched_sides() {
        let b1 = factorize_block(&rand_matrix(4, 4, 51), 2).unwrap();
        let b2 = factorize_block(&rand_matrix(4, 4, 52), 2).unwrap();
        let inputs = rand_matrix(3, 4, 53);
        assert!(matches!(
            sharing_lossless_check(&b1, &b2, &inputs),
            Err(NgcError::ShapeError(_))
        ));
    }

    #[test]
    fn shared_metric_invariant_under_orthogonal_reparam() {
        // Rotating both state matrices by R and premultiplying g by Rᵀ
        // leaves the shared-bilinear reconstruction unchanged.
        let b = factorize_block(&rand_matrix(6, 5, 55), 3)
            .unwrap()
            .with_metric(IntraMetric::shared_seeded(3, 8, Activation::Tanh, 56));
        let before = b.reconstruct();
        let rot = random_rotation(3, 57);
        let g = match &b.metric {
            IntraMetric::SharedBilinear { g, .. } => g.clone(),
            _ => unreachable!(),
        };
        let rotated = StateBlock {
            q_out: b.q_out.matmul(&rot),
            q_in: b.q_in.matmul(&rot),
            metric: IntraMetric::SharedBilinear {
                g: rot.transpose().matmul(&g),
                activation: Activation::Tanh,
            },
            origin: String::new(),
        };
        assert!(rotated.reconstruct().sub(&before).frob_norm() < 1e-9);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for metric in [
            IntraMetric::DotProduct,
            IntraMetric::bilinear_seeded(3, 6, Activation::Tanh, 61),
            IntraMetric::shared_seeded(3, 6, Activation::Identity, 62),
        ] {
            let b = factorize_block(&rand_matrix(5, 4, 63), 3)
                .unwrap()
                .with_metric(metric)
                .with_origin("L0.Q");
            let sub = dir.path().join("blk");
            save_state_block(&sub, &b).unwrap();
            let back = load_state_block(&sub).unwrap();
            assert_eq!(back, b);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(30))]

        /// Exact realization: r = rank(W) reconstructs W.
        #[test]
        fn exact_realization_property(rows in 2usize..10, cols in 2usize..10, r in 1usize..5, seed in 0u64..300) {
            let r = r.min(rows).min(cols);
            let w = rand_rank_r(rows, cols, r, seed);
            let b = factorize_block(&w, r).unwrap();
            let err = b.reconstruct().sub(&w).frob_norm();
            prop_assert!(err <= 1e-8 * w.frob_norm().max(1e-12));
        }

        /// apply(b, x) equals reconstruct(b)·x for every metric.
        #[test]
        fn apply_reconstruct_consistency(seed in 0u64..200) {
            let w = rand_matrix(5, 4, seed);
            let metric = match seed % 3 {
                0 => IntraMetric::DotProduct,
                1 => IntraMetric::bilinear_seeded(3, 6, Activation::Tanh, seed),
                _ => IntraMetric::shared_seeded(3, 6, Activation::Tanh, seed),
            };
            let b = factorize_block(&w, 3).unwrap().with_metric(metric);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
            let x = Matrix::gaussian(4, 1, 1.0, &mut rng);
            let fast = b.apply(x.data()).unwrap();
            let dense = b.reconstruct().mat_vec(x.data());
            for (a, o) in fast.iter().zip(&dense) {
                prop_assert!((a - o).abs() < 1e-10);
            }
        }
    }
}
