//! The numbered verification suite: every mathematical claim the library
//! rests on, checked numerically with pinned tolerances. `Fast` trims trial
//! counts for a sub-minute run; `Full` uses the full counts. The suite is
//! self-contained — no files, no network, all randomness seeded.

use crate::dynamics::{
    self, check_iss_trial, external_potential_test, fit_projections_with_ridge, iss_bound_check,
    loss_gap_check, IssSpec, IssTrial, StateSnapshots,
};
use crate::error::Result;
use crate::groups::{
    calibration_gradients, factorize_block, metric_reparameterize, sharing_lossless_check,
    spd_reduce, Activation, CalibrationLoss, IntraMetric, MetricGrads, StateBlock,
};
use crate::init::{init_gradient_flow, init_svd_blend, InitConfig};
use crate::linalg::{svd, truncate_factor};
use crate::matrix::{dot, Matrix};
use crate::netmodel::{sequence_grads, sequence_loss, ActivationTrace, SystemTag, ToyConfig};
use crate::policy::{compile_delayed_link, BlockId, BlockKind, InterLink, Side};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerifyLevel {
    Fast,
    Full,
}

impl VerifyLevel {
    fn trials(self, fast: usize, full: usize) -> usize {
        match self {
            VerifyLevel::Fast => fast,
            VerifyLevel::Full => full,
        }
    }
}

/// Deliberate perturbations for exercising the suite's failure detection.
#[derive(Debug, Clone, Copy)]
pub enum Fault {
    /// Add this much to one entry of the truncated left factor.
    PerturbTruncation(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyCheck {
    pub name: String,
    pub passed: bool,
    pub details: String,
    /// Wall time, excluded from serialized output so reports stay
    /// byte-identical across runs.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub schema: String,
    pub level: VerifyLevel,
    pub all_passed: bool,
    pub checks: Vec<VerifyCheck>,
}

impl VerifyReport {
    /// One `PASS`/`FAIL` line per check.
    pub fn render_lines(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{} {} ({:.2}s): {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.seconds,
                c.details
            );
        }
        let _ = writeln!(
            out,
            "{}: {}/{} checks passed",
            if self.all_passed { "OK" } else { "FAILED" },
            self.checks.iter().filter(|c| c.passed).count(),
            self.checks.len()
        );
        out
    }
}

pub fn verify_suite(level: VerifyLevel) -> VerifyReport {
    verify_suite_with_fault(level, None)
}

/// Suite entry point with an optional injected fault (used to prove the
/// checks can fail).
pub fn verify_suite_with_fault(level: VerifyLevel, fault: Option<Fault>) -> VerifyReport {
    let mut checks = Vec::new();
    let mut run = |name: &str, f: &mut dyn FnMut() -> Result<(bool, String)>| {
        let start = std::time::Instant::now();
        let (passed, details) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("errored: {e}")),
        };
        checks.push(VerifyCheck {
            name: name.into(),
            passed,
            details,
            seconds: start.elapsed().as_secs_f64(),
        });
    };

    run("01-exact-realization", &mut || {
        check_exact_realization(level, fault)
    });
    run("02-eckart-young", &mut || check_eckart_young(level));
    run("03-iss-bound", &mut || check_iss(level));
    run("04-loss-gap-and-potential", &mut || {
        check_loss_gap_and_potential(level)
    });
    run("05-delay-compilation", &mut || check_delay(level));
    run("06-sharing-losslessness", &mut || check_sharing(level));
    run("07-metric-reparameterization", &mut || check_reparam(level));
    run("08-gradient-correctness", &mut || check_gradients(level));
    run("09-init-identities", &mut || check_init(level));
    run("10-projection-recovery", &mut || check_projection_recovery(level));

    let all_passed = checks.iter().all(|c| c.passed);
    VerifyReport {
        schema: crate::report::REPORT_SCHEMA.into(),
        level,
        all_passed,
        checks,
    }
}

fn rng_for(tag: &str) -> rand_chacha::ChaCha8Rng {
    crate::seeding::rng(0x4e47_4330, tag)
}

fn rand_rank_r(rows: usize, cols: usize, r: usize, rng: &mut impl Rng) -> Matrix {
    let a = Matrix::gaussian(rows, r, 1.0, rng);
    let b = Matrix::gaussian(cols, r, 1.0, rng);
    a.matmul_nt(&b)
}

/// Exact linear realization: W of known rank r factors into states whose
/// dot products reproduce W to 1e-8 relative.
fn check_exact_realization(level: VerifyLevel, fault: Option<Fault>) -> Result<(bool, String)> {
    let trials = level.trials(25, 100);
    let mut rng = rng_for("exact-realization");
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let rows = rng.random_range(2..=32);
        let cols = rng.random_range(2..=48);
        let r = rng.random_range(1..=rows.min(cols));
        let w = rand_rank_r(rows, cols, r, &mut rng);
        let sv = svd(&w)?;
        let (mut a, b) = truncate_factor(&sv, r)?;
        if let Some(Fault::PerturbTruncation(eps)) = fault {
            a[(0, 0)] += eps;
        }
        let err = a.matmul_nt(&b).sub(&w).frob_norm() / w.frob_norm().max(1e-300);
        worst = worst.max(err);
    }
    Ok((
        worst <= 1e-8,
        format!("{trials} trials, worst relative error {worst:.3e} (tol 1e-8)"),
    ))
}

/// Truncation error equals the tail singular energy.
fn check_eckart_young(level: VerifyLevel) -> Result<(bool, String)> {
    let trials = level.trials(25, 100);
    let mut rng = rng_for("eckart-young");
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let rows = rng.random_range(2..=32);
        let cols = rng.random_range(2..=48);
        let w = Matrix::gaussian(rows, cols, 1.0, &mut rng);
        let sv = svd(&w)?;
        let r = rng.random_range(1..=sv.s.len());
        let (a, b) = truncate_factor(&sv, r)?;
        let err = w.sub(&a.matmul_nt(&b)).frob_norm();
        let tail: f64 = sv.s[r..].iter().map(|s| s * s).sum::<f64>().sqrt();
        worst = worst.max((err - tail).abs());
    }
    Ok((
        worst <= 1e-8,
        format!("{trials} trials, worst |error − tail| {worst:.3e} (tol 1e-8)"),
    ))
}

/// Deviation bound over random contractive systems plus the tight scalar
/// case.
fn check_iss(level: VerifyLevel) -> Result<(bool, String)> {
    let trials = level.trials(25, 100);
    let spec = IssSpec::default();
    let report = iss_bound_check(&spec, 200, trials, 0x1552)?;

    let horizon = 40;
    let half = Matrix::from_vec(1, 1, vec![0.5]).unwrap();
    let tight = IssTrial {
        m_a: vec![half.clone(); horizon],
        m_q: vec![half; horizon],
        delta_a: vec![vec![0.0]; horizon],
        delta_q: vec![vec![0.0]; horizon],
        e0_a: vec![1.0],
        e0_q: vec![1.0],
    };
    let tight_report = check_iss_trial(&tight)?;
    let tight_ok = tight_report.violations == 0 && tight_report.min_slack.abs() < 1e-12;
    let passed = report.violations == 0 && report.contractive && tight_ok;
    Ok((
        passed,
        format!(
            "{trials} systems, horizon 200: {} violations, min slack {:.3e}; scalar case tight to {:.1e}",
            report.violations, report.min_slack, tight_report.min_slack.abs()
        ),
    ))
}

/// Lipschitz decoder loss gap plus the external-potential sweep.
fn check_loss_gap_and_potential(level: VerifyLevel) -> Result<(bool, String)> {
    let trials = level.trials(25, 100);
    let spec = IssSpec::default();
    let mut rng = rng_for("loss-gap-decoder");
    let decoder = Matrix::gaussian(3, spec.dim, 1.0, &mut rng);
    let gap = loss_gap_check(&spec, &decoder, 80, trials, 0x106a)?;

    let sweep = external_potential_test(&spec, &[1.0, 2.0, 4.0], 80, level.trials(10, 40), 0x907)?;
    let term1 = sweep.entries[0].disturbance_term;
    let term2 = sweep.entries[1].disturbance_term;
    let term4 = sweep.entries[2].disturbance_term;
    let linear = (term2 - 2.0 * term1).abs() <= 1e-9 * term2
        && (term4 - 4.0 * term1).abs() <= 1e-9 * term4;
    let sweep_clean = sweep.entries.iter().all(|e| e.violations == 0);
    let passed = gap.step_violations == 0
        && gap.avg_violations == 0
        && sweep.monotone
        && sweep_clean
        && linear;
    Ok((
        passed,
        format!(
            "loss gap: {} step / {} avg violations over {trials} trials; sweep monotone = {}, bound term linear = {linear}",
            gap.step_violations, gap.avg_violations, sweep.monotone
        ),
    ))
}

/// Delayed/asynchronous links compiled to instantaneous sharing reproduce
/// the direct delay-line / zero-order-hold semantics exactly.
fn check_delay(level: VerifyLevel) -> Result<(bool, String)> {
    let seqs = level.trials(10, 50);
    let mut rng = rng_for("delay-compilation");
    let mut worst = 0.0f64;
    for d in 0..=8usize {
        for h in 1..=4usize {
            for _ in 0..seqs {
                let z: Vec<Vec<f64>> = (0..64)
                    .map(|_| Matrix::gaussian(1, 3, 1.0, &mut rng).data().to_vec())
                    .collect();
                let link = InterLink {
                    src: 0,
                    dst: 1,
                    delay: d,
                    hold_period: h,
                };
                let mut sys = compile_delayed_link(&link, 3);
                for (t, zt) in z.iter().enumerate() {
                    let got = sys.step(zt);
                    let want: Vec<f64> = if t < d {
                        vec![0.0; 3]
                    } else {
                        let latched = d + ((t - d) / h) * h;
                        z[latched - d].clone()
                    };
                    for (g, w) in got.iter().zip(&want) {
                        worst = worst.max((g - w).abs());
                    }
                }
            }
        }
    }
    Ok((
        worst <= 1e-12,
        format!("d ∈ [0,8], hold ∈ [1,4], {seqs} sequences each: worst deviation {worst:.3e} (tol 1e-12)"),
    ))
}

/// Input-side sharing: rotation-constructed pairs are lossless and the
/// planted isometry is recovered; a non-isometric scaling is flagged.
fn check_sharing(level: VerifyLevel) -> Result<(bool, String)> {
    let trials = level.trials(10, 40);
    let mut rng = rng_for("sharing");
    let mut worst_residual = 0.0f64;
    let mut worst_recovery = 0.0f64;
    let mut all_lossless = true;
    let mut counterexample_flagged = true;
    for _ in 0..trials {
        let n_out = rng.random_range(4..=10);
        let n_in = rng.random_range(4..=10);
        let r = rng.random_range(2..=n_out.min(n_in));
        let w = Matrix::gaussian(n_out, n_in, 1.0, &mut rng);
        let b1 = factorize_block(&w, r)?;
        let rot = {
            let sv = svd(&Matrix::gaussian(r, r, 1.0, &mut rng))?;
            sv.u.matmul(&sv.vt)
        };
        let b2 = StateBlock {
            q_out: b1.q_out.matmul(&rot),
            q_in: b1.q_in.clone(),
            metric: IntraMetric::DotProduct,
            origin: String::new(),
        };
        let inputs = Matrix::gaussian(8, n_in, 1.0, &mut rng);
        let check = sharing_lossless_check(&b1, &b2, &inputs)?;
        all_lossless &= check.lossless;
        worst_residual = worst_residual.max(check.feature_residual);
        if let Some(u) = &check.isometry {
            worst_recovery = worst_recovery.max(u.sub(&rot).frob_norm());
        } else {
            all_lossless = false;
        }

        let mut scale = Matrix::eye(r);
        scale[(0, 0)] = 2.0;
        let b3 = StateBlock {
            q_out: b1.q_out.matmul(&scale),
            q_in: b1.q_in.clone(),
            metric: IntraMetric::DotProduct,
            origin: String::new(),
        };
        counterexample_flagged &= !sharing_lossless_check(&b1, &b3, &inputs)?.lossless;
    }
    let passed = all_lossless
        && counterexample_flagged
        && worst_residual <= 1e-10
        && worst_recovery <= 1e-6;
    Ok((
        passed,
        format!(
            "{trials} rotation pairs lossless (worst residual {worst_residual:.3e}, tol 1e-10), isometry recovered to {worst_recovery:.3e} (tol 1e-6), scaling flagged = {counterexample_flagged}"
        ),
    ))
}

/// Bilinear couplings reduce to plain dot products; SPD metrics reduce to
/// Euclidean coordinates via Cholesky.
fn check_reparam(level: VerifyLevel) -> Result<(bool, String)> {
    let trials = level.trials(30, 100);
    let mut rng = rng_for("reparam");
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let r = rng.random_range(2..=6);
        let m = Matrix::gaussian(r, r, 1.0, &mut rng);
        let (cl, cr) = metric_reparameterize(&m)?;
        let u = Matrix::gaussian(r, 1, 1.0, &mut rng);
        let v = Matrix::gaussian(r, 1, 1.0, &mut rng);
        let lhs = dot(u.data(), &m.mat_vec(v.data()));
        let rhs = dot(&cl.vec_mat_t(u.data()), &cr.vec_mat_t(v.data()));
        worst = worst.max((lhs - rhs).abs());

        let a = Matrix::gaussian(r, r, 1.0, &mut rng);
        let g = a.matmul_tn(&a).add(&Matrix::eye(r).scale(0.2));
        let rr = spd_reduce(&g)?;
        let lhs = dot(u.data(), &g.mat_vec(v.data()));
        let rhs = dot(&rr.mat_vec(u.data()), &rr.mat_vec(v.data()));
        worst = worst.max((lhs - rhs).abs());
    }
    Ok((
        worst <= 1e-10,
        format!("{trials} random (M, u, v) and SPD triples: worst mismatch {worst:.3e} (tol 1e-10)"),
    ))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central finite differences over every trainable parameter class:
/// metric projections (separate and shared), neuronal states, and every
/// dense toy-model tensor.
fn check_gradients(level: VerifyLevel) -> Result<(bool, String)> {
    let coords = level.trials(3, 5);
    let mut rng = rng_for("gradient-checks");
    let mut worst = 0.0f64;
    let h = 1e-5;

    // calibration gradients for both bilinear variants
    for shared in [false, true] {
        let target = Matrix::gaussian(6, 5, 1.0, &mut rng);
        let metric = if shared {
            IntraMetric::shared_seeded(3, 6, Activation::Tanh, 11)
        } else {
            IntraMetric::bilinear_seeded(3, 6, Activation::Tanh, 12)
        };
        let block = factorize_block(&Matrix::gaussian(6, 5, 1.0, &mut rng), 3)?.with_metric(metric);
        let loss = CalibrationLoss::WeightMatching;
        let grads = calibration_gradients(&block, &target, &loss)?;
        let grad_mats: Vec<(usize, Matrix)> = match grads {
            MetricGrads::Bilinear { g_left, g_right } => vec![(0, g_left), (1, g_right)],
            MetricGrads::Shared { g } => vec![(0, g)],
        };
        for (which, gm) in &grad_mats {
            for _ in 0..coords {
                let i = rng.random_range(0..gm.rows());
                let j = rng.random_range(0..gm.cols());
                let perturb = |eps: f64| -> f64 {
                    let mut b = block.clone();
                    match &mut b.metric {
                        IntraMetric::Bilinear { g_left, g_right, .. } => {
                            if *which == 0 {
                                g_left[(i, j)] += eps;
                            } else {
                                g_right[(i, j)] += eps;
                            }
                        }
                        IntraMetric::SharedBilinear { g, .. } => g[(i, j)] += eps,
                        IntraMetric::DotProduct => unreachable!(),
                    }
                    loss.value(&b, &target)
                };
                let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
                worst = worst.max(rel_err(gm[(i, j)], fd));
            }
        }
    }

    // toy-model parameter classes, including NGC states through the com path
    let cfg = ToyConfig {
        layers: 2,
        d_model: 8,
        d_ff: 12,
        vocab: 16,
        context: 12,
        seed: 5,
    };
    let task = crate::netmodel::TaskSpec::copy(10, 16, 2);
    let root = crate::netmodel::train_root(&cfg, &task, 40)?.model;
    let shape = cfg.shape();
    let policy = crate::policy::parse_policy("qq-kk-vv@0.5", &shape)?;
    let alloc = crate::policy::rank_for_budget(&policy, &shape)?;
    let mut standalone = BTreeMap::new();
    for id in policy.standalone_blocks() {
        let w = root.core.dense(id).unwrap();
        standalone.insert(id, factorize_block(w, alloc.standalone[&id])?);
    }
    let dense: BTreeMap<BlockId, Matrix> = policy
        .selection
        .iter()
        .map(|&id| (id, root.core.dense(id).unwrap().clone()))
        .collect();
    let merged = crate::policy::merge_states(&policy, &alloc, &dense)?;
    let com = crate::netmodel::replace_blocks(&root, &policy, &standalone, &merged)?;

    let mut seq_rng = rng_for("gradient-seq");
    let seq = task.gen_sequence(&mut seq_rng);
    let targets = task.targets(&seq);

    // dense classes on the root
    let (_, root_grads) = sequence_grads(&root.core, &seq, &targets, true, false)?;
    let mut check_dense = |write: &mut dyn FnMut(&mut crate::netmodel::ModelCore, f64),
                           analytic: f64|
     -> Result<()> {
        let mut plus = root.core.clone();
        write(&mut plus, h);
        let mut minus = root.core.clone();
        write(&mut minus, -h);
        let fd = (sequence_loss(&plus, &seq, &targets)? - sequence_loss(&minus, &seq, &targets)?)
            / (2.0 * h);
        worst = worst.max(rel_err(analytic, fd));
        Ok(())
    };
    for _ in 0..coords {
        let (i, j) = (rng.random_range(0..cfg.vocab), rng.random_range(0..cfg.d_model));
        let g = root_grads.embed[(i, j)];
        check_dense(&mut |c, e| c.embed[(i, j)] += e, g)?;
        let g = root_grads.w_out[(i, j)];
        check_dense(&mut |c, e| c.w_out[(i, j)] += e, g)?;
        for kind in [BlockKind::Q, BlockKind::O, BlockKind::Up, BlockKind::Down] {
            let id = BlockId::new(0, kind);
            let gm = &root_grads.dense[&id];
            let (bi, bj) = (rng.random_range(0..gm.rows()), rng.random_range(0..gm.cols()));
            let g = gm[(bi, bj)];
            check_dense(
                &mut |c, e| {
                    if let Some(crate::netmodel::Slot::Dense(w)) = c.slots.get_mut(&id) {
                        w[(bi, bj)] += e;
                    }
                },
                g,
            )?;
        }
    }

    // state arena through the com model (shared and private matrices)
    let (_, com_grads) = sequence_grads(&com.core, &seq, &targets, false, true)?;
    for arena_idx in 0..com.core.arena.len() {
        let m = &com.core.arena[arena_idx];
        for _ in 0..coords {
            let (i, j) = (rng.random_range(0..m.rows()), rng.random_range(0..m.cols()));
            let analytic = com_grads.arena[arena_idx][(i, j)];
            let mut plus = com.core.clone();
            plus.arena[arena_idx][(i, j)] += h;
            let mut minus = com.core.clone();
            minus.arena[arena_idx][(i, j)] -= h;
            let fd = (sequence_loss(&plus, &seq, &targets)?
                - sequence_loss(&minus, &seq, &targets)?)
                / (2.0 * h);
            worst = worst.max(rel_err(analytic, fd));
        }
    }

    Ok((
        worst < 1e-4,
        format!("worst relative gradient error {worst:.3e} over all parameter classes (tol 1e-4)"),
    ))
}

/// Blend and flow identities: full-rank blend returns W, the flow descends
/// monotonically and lands on W under full-column-rank activations.
fn check_init(level: VerifyLevel) -> Result<(bool, String)> {
    let trials = level.trials(5, 20);
    let mut rng = rng_for("init-identities");
    let mut worst_blend = 0.0f64;
    let mut monotone = true;
    let mut worst_flow = 0.0f64;
    for trial in 0..trials {
        let m = rng.random_range(4..=8);
        let n = rng.random_range(3..=m);
        let w = Matrix::gaussian(m, n, 1.0, &mut rng);
        let acts = Matrix::gaussian(3 * m, m, 1.0, &mut rng);
        let cfg = InitConfig {
            lambda: 0.5,
            rank: n,
            seed: trial as u64,
            ..InitConfig::default()
        };
        let c = init_svd_blend(&w, &acts, &cfg)?;
        worst_blend = worst_blend.max(c.sub(&w).frob_norm() / w.frob_norm());

        let flow = init_gradient_flow(
            &w,
            &acts,
            &InitConfig {
                flow_step: 2e-4,
                flow_steps: 12_000,
                ..cfg
            },
        )?;
        monotone &= flow
            .trajectory
            .windows(2)
            .all(|p| p[1] <= p[0] * (1.0 + 1e-12));
        worst_flow = worst_flow.max(flow.c.sub(&w).frob_norm() / w.frob_norm());
    }
    let passed = worst_blend <= 1e-8 && monotone && worst_flow < 1e-3;
    Ok((
        passed,
        format!(
            "{trials} instances: blend identity {worst_blend:.3e} (tol 1e-8), flow monotone = {monotone}, flow endpoint {worst_flow:.3e} (tol 1e-3)"
        ),
    ))
}

/// Least-squares fitting recovers planted (T, H) generators under
/// persistent excitation.
fn check_projection_recovery(level: VerifyLevel) -> Result<(bool, String)> {
    let trials = level.trials(5, 20);
    let mut rng = rng_for("projection-recovery");
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n = rng.random_range(3..=8);
        let t_len = 12 * n;
        let a_root = Matrix::gaussian(t_len, n, 1.0, &mut rng);
        let t_trs = Matrix::gaussian(n, n, 1.0, &mut rng).scale(0.4);
        let t_com = Matrix::gaussian(n, n, 1.0, &mut rng).scale(0.3);
        let lambda = 0.5;
        let a_com = dynamics::simulate_block(&a_root, &t_trs, &t_com, lambda, None)?;

        let id = BlockId::new(0, BlockKind::Q);
        let as_trace = |m: &Matrix, system| ActivationTrace {
            system,
            blocks: BTreeMap::from([((id, Side::In), m.clone()), ((id, Side::Out), m.clone())]),
            segments: vec![m.rows()],
        };
        let (r, r_star) = (2, 3);
        let root_in = Matrix::gaussian(n, r, 1.0, &mut rng);
        let root_out = Matrix::gaussian(n, r, 1.0, &mut rng);
        let com0_in = Matrix::gaussian(n, r_star, 1.0, &mut rng);
        let com0_out = Matrix::gaussian(n, r_star, 1.0, &mut rng);
        let h_trs = Matrix::gaussian(r, r_star, 1.0, &mut rng);
        let h_com = Matrix::gaussian(r_star, r_star, 1.0, &mut rng);
        let next = |root: &Matrix, com0: &Matrix| {
            let mut v = root.matmul(&h_trs).scale(lambda);
            v.axpy(1.0 - lambda, &com0.matmul(&h_com));
            v
        };
        let snap = StateSnapshots {
            com1_in: next(&root_in, &com0_in),
            com1_out: next(&root_out, &com0_out),
            root_in,
            root_out,
            com0_in,
            com0_out,
        };
        let states = BTreeMap::from([(id, snap)]);
        let proj = fit_projections_with_ridge(
            &as_trace(&a_root, SystemTag::Root),
            &as_trace(&a_com, SystemTag::Com),
            &states,
            lambda,
            0.0,
        )?;
        let bp = &proj.blocks[&id];
        worst = worst.max(bp.t_trs_in.sub(&t_trs).max_abs());
        worst = worst.max(bp.t_com_in.sub(&t_com).max_abs());
        worst = worst.max(bp.h_trs.sub(&h_trs).max_abs());
        worst = worst.max(bp.h_com.sub(&h_com).max_abs());
    }
    Ok((
        worst <= 1e-6,
        format!("{trials} planted systems: worst generator error {worst:.3e} (tol 1e-6)"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_suite_passes_under_time_budget() {
        let start = std::time::Instant::now();
        let report = verify_suite(VerifyLevel::Fast);
        let elapsed = start.elapsed().as_secs_f64();
        for c in &report.checks {
            assert!(c.passed, "{} failed: {}", c.name, c.details);
        }
        assert!(report.all_passed);
        assert_eq!(report.checks.len(), 10);
        assert!(elapsed < 60.0, "fast level took {elapsed:.1}s");
    }

    #[test]
    fn injected_fault_fails_exact_realization() {
        let report = verify_suite_with_fault(VerifyLevel::Fast, Some(Fault::PerturbTruncation(1e-3)));
        let check = &report.checks[0];
        assert_eq!(check.name, "01-exact-realization");
        assert!(!check.passed, "fault was not detected: {}", check.details);
        assert!(!report.all_passed);
    }

    #[test]
    fn report_serialization_is_deterministic() {
        let a = verify_suite(VerifyLevel::Fast);
        let b = verify_suite(VerifyLevel::Fast);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }
}
