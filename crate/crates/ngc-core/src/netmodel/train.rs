//! Hand-rolled reverse mode, training loops, and task evaluation.
//!
//! Root training updates every dense parameter; state fine-tuning updates
//! only the arena (state matrices and metric projections) and leaves
//! embeddings and unreplaced weights bit-identical. Both use plain SGD with
//! global gradient-norm clipping at 1.0.

use super::forward::{forward_full, left_features, right_features, ForwardCache};
use super::{ComModel, LogitModel, ModelCore, RootModel, Slot, ToyConfig};
use crate::error::{NgcError, Result};
use crate::matrix::Matrix;
use crate::netmodel::TaskSpec;
use crate::policy::{BlockId, BlockKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub const GRAD_CLIP: f64 = 1.0;

#[derive(Debug, Clone, Copy)]
pub struct TrainParams {
    pub lr: f64,
    pub batch: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams { lr: 0.5, batch: 8 }
    }
}

/// Gradient accumulator mirroring a model's parameter layout. The two
/// flags pick which parameter classes accumulate and step.
#[derive(Debug, Clone)]
pub struct GradStore {
    pub embed: Matrix,
    pub pos: Matrix,
    pub w_out: Matrix,
    pub dense: BTreeMap<BlockId, Matrix>,
    pub arena: Vec<Matrix>,
    pub train_dense: bool,
    pub train_arena: bool,
}

impl GradStore {
    pub fn new(core: &ModelCore, train_dense: bool, train_arena: bool) -> GradStore {
        let dense = core
            .slots
            .iter()
            .filter_map(|(id, slot)| match slot {
                Slot::Dense(w) => Some((*id, Matrix::zeros(w.rows(), w.cols()))),
                Slot::Ngc(_) => None,
            })
            .collect();
        GradStore {
            embed: Matrix::zeros(core.embed.rows(), core.embed.cols()),
            pos: Matrix::zeros(core.pos.rows(), core.pos.cols()),
            w_out: Matrix::zeros(core.w_out.rows(), core.w_out.cols()),
            dense,
            arena: core
                .arena
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
            train_dense,
            train_arena,
        }
    }

    fn enabled(&self) -> impl Iterator<Item = &Matrix> {
        let dense_part = self
            .train_dense
            .then(|| {
                [&self.embed, &self.pos, &self.w_out]
                    .into_iter()
                    .chain(self.dense.values())
            })
            .into_iter()
            .flatten();
        let arena_part = self
            .train_arena
            .then(|| self.arena.iter())
            .into_iter()
            .flatten();
        dense_part.chain(arena_part)
    }

    pub fn global_norm(&self) -> f64 {
        self.enabled()
            .map(|m| m.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Add `d` into the first `d.rows()` rows of `acc` (padded arena entries
/// are taller than a member's view).
fn add_rows(acc: &mut Matrix, d: &Matrix) {
    debug_assert!(d.rows() <= acc.rows() && d.cols() == acc.cols());
    for i in 0..d.rows() {
        for j in 0..d.cols() {
            acc[(i, j)] += d[(i, j)];
        }
    }
}

/// Backward through one block application: `y = block(x)`; accumulates
/// parameter gradients and returns dL/dx.
fn backward_block(
    core: &ModelCore,
    id: BlockId,
    x: &Matrix,
    dy: &Matrix,
    grads: &mut GradStore,
) -> Matrix {
    match &core.slots[&id] {
        Slot::Dense(w) => {
            if grads.train_dense {
                let dw = dy.matmul_tn(x); // (out × T)·(T × in)
                grads.dense.get_mut(&id).expect("dense grad slot").axpy(1.0, &dw);
            }
            dy.matmul(w)
        }
        Slot::Ngc(s) => {
            let fl = left_features(core, s);
            let fr = right_features(core, s);
            let dz = dy.matmul(&fl); // T × f
            if grads.train_arena {
                let z = x.matmul(&fr);
                let d_fl = dy.matmul_tn(&z); // N_out × f
                let d_fr = x.matmul_tn(&dz); // N_in × f
                match &s.metric {
                    None => {
                        add_rows(&mut grads.arena[s.q_out.arena], &d_fl);
                        add_rows(&mut grads.arena[s.q_in.arena], &d_fr);
                    }
                    Some(m) => {
                        let qo = core.view(s.q_out);
                        let qi = core.view(s.q_in);
                        let z_l = qo.matmul(&core.arena[m.g_left]);
                        let z_r = qi.matmul(&core.arena[m.g_right]);
                        let mut d_zl = d_fl;
                        let mut d_zr = d_fr;
                        for i in 0..d_zl.rows() {
                            for j in 0..d_zl.cols() {
                                d_zl[(i, j)] *= m.activation.derivative(z_l[(i, j)]);
                            }
                        }
                        for i in 0..d_zr.rows() {
                            for j in 0..d_zr.cols() {
                                d_zr[(i, j)] *= m.activation.derivative(z_r[(i, j)]);
                            }
                        }
                        // shared metrics have g_left == g_right; both sides
                        // accumulate into the same entry
                        grads.arena[m.g_left].axpy(1.0, &qo.matmul_tn(&d_zl));
                        grads.arena[m.g_right].axpy(1.0, &qi.matmul_tn(&d_zr));
                        add_rows(
                            &mut grads.arena[s.q_out.arena],
                            &d_zl.matmul_nt(&core.arena[m.g_left]),
                        );
                        add_rows(
                            &mut grads.arena[s.q_in.arena],
                            &d_zr.matmul_nt(&core.arena[m.g_right]),
                        );
                    }
                }
            }
            dz.matmul_nt(&fr)
        }
    }
}

/// Full reverse pass from dL/dlogits; accumulates into `grads`.
pub(crate) fn backward(
    core: &ModelCore,
    cache: &ForwardCache,
    tokens: &[usize],
    d_logits: &Matrix,
    grads: &mut GradStore,
) {
    let t_len = tokens.len();
    let d = core.cfg.d_model;
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();

    if grads.train_dense {
        grads.w_out.axpy(1.0, &d_logits.matmul_tn(&cache.x_final));
    }
    let mut dx = d_logits.matmul(&core.w_out);

    for layer in (0..core.cfg.layers).rev() {
        let lc = &cache.layers[layer];
        let id = |kind: BlockKind| BlockId::new(layer, kind);

        // MLP: x_out = x_mid + relu(x_mid·Wupᵀ)·Wdownᵀ
        let dh = backward_block(core, id(BlockKind::Down), &lc.h, &dx, grads);
        let mut dz = dh;
        for i in 0..t_len {
            for j in 0..dz.cols() {
                if lc.z_up[(i, j)] <= 0.0 {
                    dz[(i, j)] = 0.0;
                }
            }
        }
        let d_from_up = backward_block(core, id(BlockKind::Up), &lc.x_mid, &dz, grads);
        let d_xmid = dx.add(&d_from_up);

        // attention: x_mid = x_in + (softmax(QKᵀ/√d)·V)·Woᵀ
        let d_attn = backward_block(core, id(BlockKind::O), &lc.attn, &d_xmid, grads);
        let d_probs = d_attn.matmul_nt(&lc.v);
        let d_v = lc.probs.matmul_tn(&d_attn);
        let mut d_scores = Matrix::zeros(t_len, t_len);
        for i in 0..t_len {
            let mut inner = 0.0;
            for j in 0..=i {
                inner += d_probs[(i, j)] * lc.probs[(i, j)];
            }
            for j in 0..=i {
                d_scores[(i, j)] = lc.probs[(i, j)] * (d_probs[(i, j)] - inner);
            }
        }
        let d_q = d_scores.matmul(&lc.k).scale(inv_sqrt_d);
        let d_k = d_scores.matmul_tn(&lc.q).scale(inv_sqrt_d);
        let dx_q = backward_block(core, id(BlockKind::Q), &lc.x_in, &d_q, grads);
        let dx_k = backward_block(core, id(BlockKind::K), &lc.x_in, &d_k, grads);
        let dx_v = backward_block(core, id(BlockKind::V), &lc.x_in, &d_v, grads);
        dx = d_xmid.add(&dx_q).add(&dx_k).add(&dx_v);
    }

    if grads.train_dense {
        for (t, &tok) in tokens.iter().enumerate() {
            for j in 0..d {
                grads.pos[(t, j)] += dx[(t, j)];
                grads.embed[(tok, j)] += dx[(t, j)];
            }
        }
    }
}

/// Mean cross-entropy over the supervised positions and dL/dlogits.
pub(crate) fn cross_entropy_grads(logits: &Matrix, targets: &[(usize, usize)]) -> (f64, Matrix) {
    let mut d = Matrix::zeros(logits.rows(), logits.cols());
    if targets.is_empty() {
        return (0.0, d);
    }
    let n = targets.len() as f64;
    let mut loss = 0.0;
    for &(t, y) in targets {
        let row = logits.row(t);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += -((logits[(t, y)] - max) - denom.ln());
        for j in 0..logits.cols() {
            let p = (logits[(t, j)] - max).exp() / denom;
            d[(t, j)] = (p - if j == y { 1.0 } else { 0.0 }) / n;
        }
    }
    (loss / n, d)
}

/// Batch loss and gradients for one sequence; exposed for the
/// finite-difference verification checks.
pub fn sequence_loss(core: &ModelCore, tokens: &[usize], targets: &[(usize, usize)]) -> Result<f64> {
    let (cache, _) = forward_full(core, tokens, None)?;
    Ok(cross_entropy_grads(&cache.logits, targets).0)
}

pub fn sequence_grads(
    core: &ModelCore,
    tokens: &[usize],
    targets: &[(usize, usize)],
    train_dense: bool,
    train_arena: bool,
) -> Result<(f64, GradStore)> {
    let (cache, _) = forward_full(core, tokens, None)?;
    let (loss, d_logits) = cross_entropy_grads(&cache.logits, targets);
    let mut grads = GradStore::new(core, train_dense, train_arena);
    backward(core, &cache, tokens, &d_logits, &mut grads);
    Ok((loss, grads))
}

fn check_task_fits(cfg: &ToyConfig, task: &TaskSpec) -> Result<()> {
    task.validate()?;
    if task.length > cfg.context {
        return Err(NgcError::InvalidInput(format!(
            "task length {} exceeds context {}",
            task.length, cfg.context
        )));
    }
    if task.vocab > cfg.vocab {
        return Err(NgcError::InvalidInput(format!(
            "task vocab {} exceeds model vocab {}",
            task.vocab, cfg.vocab
        )));
    }
    Ok(())
}

fn clip_and_step(core: &mut ModelCore, grads: &GradStore, lr: f64) {
    let norm = grads.global_norm();
    let scale = if norm > GRAD_CLIP { GRAD_CLIP / norm } else { 1.0 };
    let step = -lr * scale;
    if grads.train_dense {
        core.embed.axpy(step, &grads.embed);
        core.pos.axpy(step, &grads.pos);
        core.w_out.axpy(step, &grads.w_out);
        for (id, g) in &grads.dense {
            if let Some(Slot::Dense(w)) = core.slots.get_mut(id) {
                w.axpy(step, g);
            }
        }
    }
    if grads.train_arena {
        for (m, g) in core.arena.iter_mut().zip(&grads.arena) {
            m.axpy(step, g);
        }
    }
}

fn run_training(
    core: &mut ModelCore,
    task: &TaskSpec,
    steps: usize,
    params: TrainParams,
    train_dense: bool,
    train_arena: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    check_task_fits(&core.cfg, task)?;
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut grads = GradStore::new(core, train_dense, train_arena);
        let mut batch_loss = 0.0;
        for _ in 0..params.batch {
            let seq = task.gen_sequence(rng);
            // preconditions were validated above, so a forward failure here
            // means the parameters have blown up
            let (cache, _) = forward_full(core, &seq, None).map_err(|e| {
                NgcError::TrainingDiverged(format!("step {step}: {e}"))
            })?;
            let targets = task.targets(&seq);
            let (loss, d_logits) = cross_entropy_grads(&cache.logits, &targets);
            batch_loss += loss / params.batch as f64;
            let d_logits = d_logits.scale(1.0 / params.batch as f64);
            backward(core, &cache, &seq, &d_logits, &mut grads);
        }
        if !batch_loss.is_finite() {
            return Err(NgcError::TrainingDiverged(format!(
                "non-finite loss at step {step}"
            )));
        }
        clip_and_step(core, &grads, params.lr);
        losses.push(batch_loss);
    }
    Ok(losses)
}

#[derive(Debug, Clone)]
pub struct RootTraining {
    pub model: RootModel,
    /// Exact-match accuracy over 2000 freshly sampled positions.
    pub final_accuracy: f64,
    pub losses: Vec<f64>,
}

/// Train a fresh root model on a synthetic task. Deterministic in
/// `cfg.seed`; `steps = 0` returns the untouched initialization.
pub fn train_root(cfg: &ToyConfig, task: &TaskSpec, steps: usize) -> Result<RootTraining> {
    train_root_with(cfg, task, steps, TrainParams::default())
}

pub fn train_root_with(
    cfg: &ToyConfig,
    task: &TaskSpec,
    steps: usize,
    params: TrainParams,
) -> Result<RootTraining> {
    let mut model = RootModel::init(cfg)?;
    let mut rng = crate::seeding::rng(cfg.seed, "train-root");
    let losses = run_training(&mut model.core, task, steps, params, true, false, &mut rng)?;
    let final_accuracy = eval_task(
        &model,
        task,
        2000,
        crate::seeding::derive_seed(cfg.seed, "train-root-eval"),
    )?;
    Ok(RootTraining {
        model,
        final_accuracy,
        losses,
    })
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: ComModel,
    pub losses: Vec<f64>,
}

/// Fine-tune only the neuronal states (and metric parameters) of a com
/// model; embeddings and unreplaced dense weights are untouched.
pub fn finetune_states(
    com: &ComModel,
    task: &TaskSpec,
    steps: usize,
    lr: f64,
) -> Result<FinetuneOutcome> {
    let mut model = com.clone();
    let params = TrainParams {
        lr,
        ..TrainParams::default()
    };
    let mut rng = crate::seeding::rng(com.core.cfg.seed, "finetune-states");
    let losses = run_training(&mut model.core, task, steps, params, false, true, &mut rng)?;
    Ok(FinetuneOutcome { model, losses })
}

/// Exact-match accuracy over at least `n_samples` rule-determined
/// positions, sampled deterministically from `seed`.
pub fn eval_task(
    model: &dyn LogitModel,
    task: &TaskSpec,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    task.validate()?;
    if task.length > model.context() || task.vocab > model.vocab() {
        return Err(NgcError::InvalidInput(
            "task does not fit the model".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0usize;
    let mut total = 0usize;
    while total < n_samples {
        let seq = task.gen_sequence(&mut rng);
        let logits = model.logits(&seq)?;
        for (t, y) in task.targets(&seq) {
            let row = logits.row(t);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best == y {
                correct += 1;
            }
            total += 1;
            if total >= n_samples {
                break;
            }
        }
    }
    Ok(correct as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groups::factorize_block;
    use crate::netmodel::replace_blocks;
    use crate::policy::{parse_policy, rank_for_budget, Side};

    fn tiny_cfg(seed: u64) -> ToyConfig {
        ToyConfig {
            layers: 2,
            d_model: 8,
            d_ff: 12,
            vocab: 16,
            context: 12,
            seed,
        }
    }

    fn tiny_task() -> TaskSpec {
        TaskSpec::copy(10, 16, 2)
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let cfg = tiny_cfg(5);
        let trained = train_root(&cfg, &tiny_task(), 0).unwrap();
        let fresh = RootModel::init(&cfg).unwrap();
        assert_eq!(trained.model.core, fresh.core);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let cfg = tiny_cfg(7);
        let a = train_root(&cfg, &tiny_task(), 30).unwrap();
        let b = train_root(&cfg, &tiny_task(), 30).unwrap();
        assert_eq!(a.model.core, b.model.core);
        assert_eq!(a.final_accuracy, b.final_accuracy);
        assert_eq!(a.losses, b.losses);
    }

    #[test]
    fn training_reduces_loss() {
        let cfg = tiny_cfg(9);
        let out = train_root(&cfg, &tiny_task(), 300).unwrap();
        let first: f64 = out.losses[..20].iter().sum::<f64>() / 20.0;
        let last: f64 = out.losses[out.losses.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(last < 0.5 * first, "loss {first} -> {last}");
    }

    #[test]
    fn absurd_lr_diverges() {
        let cfg = tiny_cfg(11);
        let params = TrainParams { lr: 1e200, batch: 2 };
        let err = train_root_with(&cfg, &tiny_task(), 300, params);
        assert!(matches!(err, Err(NgcError::TrainingDiverged(_))));
    }

    fn fd_check_entry(
        core: &ModelCore,
        tokens: &[usize],
        targets: &[(usize, usize)],
        analytic: f64,
        write: &mut dyn FnMut(&mut ModelCore, f64),
    ) {
        let h = 1e-5;
        let mut plus = core.clone();
        write(&mut plus, h);
        let lp = sequence_loss(&plus, tokens, targets).unwrap();
        let mut minus = core.clone();
        write(&mut minus, -h);
        let lm = sequence_loss(&minus, tokens, targets).unwrap();
        let fd = (lp - lm) / (2.0 * h);
        let scale = analytic.abs().max(fd.abs()).max(1e-6);
        assert!(
            (analytic - fd).abs() / scale < 1e-4,
            "analytic {analytic} vs fd {fd}"
        );
    }

    #[test]
    fn root_gradients_match_finite_differences() {
        let cfg = tiny_cfg(13);
        let model = RootModel::init(&cfg).unwrap();
        let task = tiny_task();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let seq = task.gen_sequence(&mut rng);
        let targets = task.targets(&seq);
        let (_, grads) = sequence_grads(&model.core, &seq, &targets, true, false).unwrap();

        // a few entries from each dense parameter class
        let spots = [(0usize, 3usize), (1, 0), (4, 2)];
        for &(i, j) in &spots {
            fd_check_entry(&model.core, &seq, &targets, grads.embed[(i, j)], &mut |c, e| {
                c.embed[(i, j)] += e
            });
            fd_check_entry(&model.core, &seq, &targets, grads.pos[(i, j)], &mut |c, e| {
                c.pos[(i, j)] += e
            });
            fd_check_entry(&model.core, &seq, &targets, grads.w_out[(i, j)], &mut |c, e| {
                c.w_out[(i, j)] += e
            });
            for kind in [BlockKind::Q, BlockKind::K, BlockKind::V, BlockKind::O, BlockKind::Up, BlockKind::Down] {
                let id = BlockId::new(1, kind);
                let g = grads.dense[&id][(i, j)];
                fd_check_entry(&model.core, &seq, &targets, g, &mut |c, e| {
                    if let Some(Slot::Dense(w)) = c.slots.get_mut(&id) {
                        w[(i, j)] += e;
                    }
                });
            }
        }
    }

    fn build_tiny_com(seed: u64, policy_str: &str) -> (RootModel, ComModel, TaskSpec) {
        let cfg = tiny_cfg(seed);
        let task = tiny_task();
        let root = train_root(&cfg, &task, 60).unwrap().model;
        let shape = cfg.shape();
        let policy = parse_policy(policy_str, &shape).unwrap();
        let alloc = rank_for_budget(&policy, &shape).unwrap();
        let mut standalone = BTreeMap::new();
        for id in policy.standalone_blocks() {
            let w = root.core.dense(id).unwrap();
            let block = factorize_block(w, alloc.standalone[&id]).unwrap();
            standalone.insert(id, block);
        }
        let dense: BTreeMap<BlockId, Matrix> = policy
            .selection
            .iter()
            .map(|&id| (id, root.core.dense(id).unwrap().clone()))
            .collect();
        let merged = crate::policy::merge_states(&policy, &alloc, &dense).unwrap();
        let com = replace_blocks(&root, &policy, &standalone, &merged).unwrap();
        (root, com, task)
    }

    #[test]
    fn finetune_zero_lr_is_identity() {
        let (_, com, task) = build_tiny_com(17, "q-k-v@0.5");
        let out = finetune_states(&com, &task, 10, 0.0).unwrap();
        assert_eq!(out.model.core, com.core);
    }

    #[test]
    fn finetune_freezes_non_state_parameters() {
        let (_, com, task) = build_tiny_com(19, "qq-kk-vv@0.5");
        let before = com.core.clone();
        let out = finetune_states(&com, &task, 40, 0.05).unwrap();
        let after = &out.model.core;
        assert_eq!(after.embed, before.embed);
        assert_eq!(after.pos, before.pos);
        assert_eq!(after.w_out, before.w_out);
        for (id, slot) in &before.slots {
            if let Slot::Dense(w) = slot {
                assert_eq!(after.dense(*id).unwrap(), w, "dense block {id} changed");
            }
        }
        let moved = before
            .arena
            .iter()
            .zip(&after.arena)
            .filter(|(x, y)| x != y)
            .count();
        assert_ne!(moved, 0, "no state moved");
    }

    #[test]
    fn finetune_improves_loss() {
        let (_, com, task) = build_tiny_com(23, "qq-kk-vv@0.5");
        let out = finetune_states(&com, &task, 150, 0.2).unwrap();
        let first: f64 = out.losses[..10].iter().sum::<f64>() / 10.0;
        let last: f64 = out.losses[out.losses.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(last < first, "finetune loss {first} -> {last}");
    }

    #[test]
    fn state_gradients_match_finite_differences() {
        let (_, com, task) = build_tiny_com(29, "qq-kk-vv@0.5");
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let seq = task.gen_sequence(&mut rng);
        let targets = task.targets(&seq);
        let (_, grads) = sequence_grads(&com.core, &seq, &targets, false, true).unwrap();
        for arena_idx in 0..com.core.arena.len() {
            let spots = [(0usize, 0usize), (1, 1)];
            for &(i, j) in &spots {
                if i >= com.core.arena[arena_idx].rows() || j >= com.core.arena[arena_idx].cols() {
                    continue;
                }
                let g = grads.arena[arena_idx][(i, j)];
                fd_check_entry(&com.core, &seq, &targets, g, &mut |c, e| {
                    c.arena[arena_idx][(i, j)] += e;
                });
            }
        }
    }

    #[test]
    fn shared_states_report_same_identity() {
        let (_, com, _) = build_tiny_com(31, "qq-kk-vv@0.5");
        for set in &com.policy.merge_sets {
            let ids: Vec<usize> = set
                .iter()
                .map(|&(id, side)| com.state_identity(id, side).unwrap())
                .collect();
            assert!(ids.windows(2).all(|w| w[0] == w[1]), "set not shared: {ids:?}");
        }
        // standalone blocks do not alias
        let (_, com2, _) = build_tiny_com(31, "q-k-v@0.5");
        let a = com2.state_identity(BlockId::new(0, BlockKind::Q), Side::In).unwrap();
        let b = com2.state_identity(BlockId::new(1, BlockKind::Q), Side::In).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn com_param_count_within_budget() {
        let (_, com, _) = build_tiny_com(37, "qq-kk-vv@0.5");
        let ngc = com.ngc_param_count();
        let dense = com.replaced_dense_count();
        assert!(ngc <= dense / 2, "{ngc} > {}", dense / 2);
    }

    /// Full-rank replacement identity: with r = full rank and no metric
    /// nonlinearity, com logits equal root logits, for standalone and
    /// merged policies alike (the concatenated SVD is exact at full rank).
    #[test]
    fn full_rank_replacement_reproduces_root_logits() {
        let cfg = tiny_cfg(41);
        let task = tiny_task();
        let root = train_root(&cfg, &task, 60).unwrap().model;
        let shape = cfg.shape();
        for policy_str in ["q-k-v@1.0", "qq-kk-vv@1.0", "kk-qv@1.0"] {
            let policy = parse_policy(policy_str, &shape).unwrap();
            // force full rank regardless of the budget rule
            let alloc = crate::policy::RankAllocation {
                standalone: policy
                    .standalone_blocks()
                    .into_iter()
                    .map(|id| (id, cfg.d_model))
                    .collect(),
                merged: vec![cfg.d_model; policy.merge_sets.len()],
            };
            let mut standalone = BTreeMap::new();
            for id in policy.standalone_blocks() {
                let w = root.core.dense(id).unwrap();
                standalone.insert(id, factorize_block(w, cfg.d_model).unwrap());
            }
            let dense: BTreeMap<BlockId, Matrix> = policy
                .selection
                .iter()
                .map(|&id| (id, root.core.dense(id).unwrap().clone()))
                .collect();
            let merged = crate::policy::merge_states(&policy, &alloc, &dense).unwrap();
            let com = replace_blocks(&root, &policy, &standalone, &merged).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(404);
            for _ in 0..100 {
                let seq = task.gen_sequence(&mut rng);
                let lr = root.logits(&seq).unwrap();
                let lc = com.logits(&seq).unwrap();
                assert!(
                    lr.sub(&lc).max_abs() < 1e-6,
                    "{policy_str}: {}",
                    lr.sub(&lc).max_abs()
                );
            }
        }
    }

    #[test]
    fn replace_blocks_detects_coverage_mismatch() {
        let cfg = tiny_cfg(43);
        let root = RootModel::init(&cfg).unwrap();
        let shape = cfg.shape();
        let policy = parse_policy("q-k-v@0.5", &shape).unwrap();
        let alloc = rank_for_budget(&policy, &shape).unwrap();
        let mut standalone = BTreeMap::new();
        for id in policy.standalone_blocks().into_iter().skip(1) {
            let w = root.core.dense(id).unwrap();
            standalone.insert(id, factorize_block(w, alloc.standalone[&id]).unwrap());
        }
        assert!(matches!(
            replace_blocks(&root, &policy, &standalone, &[]),
            Err(NgcError::PolicyMismatch(_))
        ));
    }

    /// Always predicts the rule-determined next token.
    struct PerfectModel {
        task: TaskSpec,
        seq: std::cell::RefCell<Vec<usize>>,
    }

    impl LogitModel for PerfectModel {
        fn context(&self) -> usize {
            64
        }
        fn vocab(&self) -> usize {
            self.task.vocab
        }
        fn logits(&self, tokens: &[usize]) -> Result<Matrix> {
            *self.seq.borrow_mut() = tokens.to_vec();
            let mut out = Matrix::zeros(tokens.len(), self.task.vocab);
            for (t, y) in self.task.targets(tokens) {
                out[(t, y)] = 1.0;
            }
            Ok(out)
        }
    }

    #[test]
    fn eval_untrained_is_chance_level() {
        let cfg = ToyConfig {
            vocab: 64,
            ..tiny_cfg(47)
        };
        let model = RootModel::init(&cfg).unwrap();
        let task = TaskSpec::copy(10, 64, 2);
        let acc = eval_task(&model, &task, 2000, 7).unwrap();
        assert!((acc - 1.0 / 64.0).abs() < 0.05, "accuracy {acc}");
    }

    #[test]
    fn eval_perfect_model_scores_one() {
        let task = TaskSpec::copy(10, 16, 2);
        let model = PerfectModel {
            task: task.clone(),
            seq: Default::default(),
        };
        let acc = eval_task(&model, &task, 500, 11).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn eval_is_deterministic() {
        let cfg = tiny_cfg(53);
        let model = RootModel::init(&cfg).unwrap();
        let task = tiny_task();
        let a = eval_task(&model, &task, 500, 13).unwrap();
        let b = eval_task(&model, &task, 500, 13).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoints_round_trip() {
        let (root, com, _) = build_tiny_com(59, "qq-kk-vv@0.5");
        let dir = tempfile::tempdir().unwrap();
        let root_dir = dir.path().join("root");
        crate::netmodel::save_root(&root_dir, &root).unwrap();
        let root_back = crate::netmodel::load_root(&root_dir).unwrap();
        assert_eq!(root_back.core, root.core);

        let com_dir = dir.path().join("com");
        crate::netmodel::save_com(&com_dir, &com).unwrap();
        let com_back = crate::netmodel::load_com(&com_dir).unwrap();
        assert_eq!(com_back.core, com.core);
        assert_eq!(com_back.policy, com.policy);
    }
}
