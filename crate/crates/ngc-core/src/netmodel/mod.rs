//! The toy decoder-only transformer: single-head causal attention, ReLU MLP,
//! no normalization, learned token and position embeddings. Small enough
//! that the hand-rolled reverse mode stays exact, while still exposing the
//! Q/K/V/O/UP/DOWN block kinds policies operate on.
//!
//! The same [`ModelCore`] backs both variants: the root model holds every
//! block as a dense matrix, the com model replaces selected blocks with
//! state-block views into a shared arena (merged blocks literally reference
//! one arena entry).

mod forward;
mod task;
mod train;

pub use forward::ActivationTrace;
pub use task::{TaskKind, TaskSpec};
pub use train::{
    eval_task, finetune_states, sequence_grads, sequence_loss, train_root, train_root_with,
    FinetuneOutcome, GradStore, RootTraining, TrainParams,
};

use crate::error::{NgcError, Result};
use crate::groups::{Activation, IntraMetric, StateBlock};
use crate::matrix::Matrix;
use crate::policy::{BlockId, BlockKind, MergedStates, ModelShape, Policy, RankAllocation, Side};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub context: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            layers: 2,
            d_model: 32,
            d_ff: 64,
            vocab: 64,
            context: 32,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn shape(&self) -> ModelShape {
        ModelShape {
            layers: self.layers,
            d_model: self.d_model,
            d_ff: self.d_ff,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 1
            || self.d_model < 1
            || self.d_ff < 1
            || self.vocab < 2
            || self.context < 2
        {
            return Err(NgcError::InvalidInput("degenerate model config".into()));
        }
        Ok(())
    }

    pub fn block_ids(&self) -> Vec<BlockId> {
        let mut ids = Vec::new();
        for layer in 0..self.layers {
            for kind in [
                BlockKind::Q,
                BlockKind::K,
                BlockKind::V,
                BlockKind::O,
                BlockKind::Up,
                BlockKind::Down,
            ] {
                ids.push(BlockId::new(layer, kind));
            }
        }
        ids
    }
}

/// View into an arena matrix: rows `0..rows` of entry `arena`. Rows beyond
/// `rows` are another member's zero-padded tail and are masked for this view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateRef {
    pub arena: usize,
    pub rows: usize,
}

/// Trainable metric attached to a replaced block; `g_left == g_right`
/// encodes the shared symmetric variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotMetric {
    pub g_left: usize,
    pub g_right: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Slot {
    Dense(Matrix),
    Ngc(NgcSlot),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NgcSlot {
    pub q_out: StateRef,
    pub q_in: StateRef,
    pub metric: Option<SlotMetric>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCore {
    pub cfg: ToyConfig,
    /// vocab × d_model token embedding.
    pub embed: Matrix,
    /// context × d_model learned position table.
    pub pos: Matrix,
    /// vocab × d_model output projection.
    pub w_out: Matrix,
    pub slots: BTreeMap<BlockId, Slot>,
    /// All state and metric matrices referenced by NGC slots.
    pub arena: Vec<Matrix>,
}

impl ModelCore {
    pub(crate) fn view(&self, r: StateRef) -> Matrix {
        self.arena[r.arena].row_block(0, r.rows)
    }

    pub fn dense(&self, id: BlockId) -> Option<&Matrix> {
        match self.slots.get(&id) {
            Some(Slot::Dense(w)) => Some(w),
            _ => None,
        }
    }

    pub fn ngc(&self, id: BlockId) -> Option<&NgcSlot> {
        match self.slots.get(&id) {
            Some(Slot::Ngc(s)) => Some(s),
            _ => None,
        }
    }

    /// The dense matrix a block currently realizes (reconstructed for NGC
    /// slots).
    pub fn effective_weight(&self, id: BlockId) -> Matrix {
        match &self.slots[&id] {
            Slot::Dense(w) => w.clone(),
            Slot::Ngc(s) => {
                let fl = forward::left_features(self, s);
                let fr = forward::right_features(self, s);
                fl.matmul_nt(&fr)
            }
        }
    }

    /// Materialize an NGC slot as a standalone state block.
    pub fn state_block(&self, id: BlockId) -> Option<StateBlock> {
        let s = self.ngc(id)?;
        let metric = match s.metric {
            None => IntraMetric::DotProduct,
            Some(m) if m.g_left == m.g_right => IntraMetric::SharedBilinear {
                g: self.arena[m.g_left].clone(),
                activation: m.activation,
            },
            Some(m) => IntraMetric::Bilinear {
                g_left: self.arena[m.g_left].clone(),
                g_right: self.arena[m.g_right].clone(),
                activation: m.activation,
            },
        };
        Some(StateBlock {
            q_out: self.view(s.q_out),
            q_in: self.view(s.q_in),
            metric,
            origin: id.to_string(),
        })
    }
}

/// The original model: every block dense.
#[derive(Debug, Clone, PartialEq)]
pub struct RootModel {
    pub core: ModelCore,
}

impl RootModel {
    /// Deterministic Gaussian init from `cfg.seed`.
    pub fn init(cfg: &ToyConfig) -> Result<RootModel> {
        cfg.validate()?;
        let mut rng = crate::seeding::rng(cfg.seed, "root-init");
        let d = cfg.d_model;
        let embed_std = 0.1;
        let mut slots = BTreeMap::new();
        for id in cfg.block_ids() {
            let (n_out, n_in) = cfg.shape().dims(id.kind);
            let std = 1.0 / (n_in as f64).sqrt();
            slots.insert(id, Slot::Dense(Matrix::gaussian(n_out, n_in, std, &mut rng)));
        }
        Ok(RootModel {
            core: ModelCore {
                cfg: *cfg,
                embed: Matrix::gaussian(cfg.vocab, d, embed_std, &mut rng),
                pos: Matrix::gaussian(cfg.context, d, embed_std, &mut rng),
                w_out: Matrix::gaussian(cfg.vocab, d, 1.0 / (d as f64).sqrt(), &mut rng),
                slots,
                arena: Vec::new(),
            },
        })
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<(Matrix, ActivationTrace)> {
        let (cache, trace) = forward::forward_full(&self.core, tokens, Some(SystemTag::Root))?;
        Ok((cache.logits, trace.expect("trace requested")))
    }
}

/// The model after policy replacement: selected blocks are state-block
/// views, everything else is the root's dense weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ComModel {
    pub core: ModelCore,
    pub policy: Policy,
    pub allocation: RankAllocation,
}

impl ComModel {
    pub fn forward(&self, tokens: &[usize]) -> Result<(Matrix, ActivationTrace)> {
        let (cache, trace) = forward::forward_full(&self.core, tokens, Some(SystemTag::Com))?;
        Ok((cache.logits, trace.expect("trace requested")))
    }

    /// Arena index of the state matrix backing a block side, for sharing
    /// audits.
    pub fn state_identity(&self, id: BlockId, side: Side) -> Option<usize> {
        let s = self.core.ngc(id)?;
        Some(match side {
            Side::In => s.q_in.arena,
            Side::Out => s.q_out.arena,
        })
    }

    /// Exact trainable NGC parameter count (state rows plus metric entries
    /// actually allocated; shared matrices counted once).
    pub fn ngc_param_count(&self) -> usize {
        self.core.arena.iter().map(|m| m.rows() * m.cols()).sum()
    }

    /// Dense parameter count of the blocks this model replaced.
    pub fn replaced_dense_count(&self) -> usize {
        crate::policy::replaced_dense_count(&self.policy, &self.core.cfg.shape())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemTag {
    Root,
    Com,
}

/// Replace the policy-selected blocks of a root model with state blocks.
/// `standalone` supplies non-merged blocks; `merged` supplies one entry per
/// policy merge set (from [`crate::policy::merge_states`]); together they
/// must cover the selection exactly.
pub fn replace_blocks(
    root: &RootModel,
    policy: &Policy,
    standalone: &BTreeMap<BlockId, StateBlock>,
    merged: &[MergedStates],
) -> Result<ComModel> {
    policy.validate(&root.core.cfg.shape())?;
    if merged.len() != policy.merge_sets.len() {
        return Err(NgcError::PolicyMismatch(format!(
            "{} merged sets provided for {} policy merge sets",
            merged.len(),
            policy.merge_sets.len()
        )));
    }
    let mut covered: BTreeMap<BlockId, NgcSlot> = BTreeMap::new();
    let mut arena: Vec<Matrix> = Vec::new();

    for ms in merged {
        let shared_idx = arena.len();
        arena.push(ms.shared.clone());
        for member in &ms.members {
            let private_idx = arena.len();
            arena.push(member.private.clone());
            let shared_ref = StateRef {
                arena: shared_idx,
                rows: member.used_rows,
            };
            let private_ref = StateRef {
                arena: private_idx,
                rows: member.private.rows(),
            };
            let (q_out, q_in) = match member.shared_side {
                Side::In => (private_ref, shared_ref),
                Side::Out => (shared_ref, private_ref),
            };
            let slot = NgcSlot {
                q_out,
                q_in,
                metric: None,
            };
            if covered.insert(member.id, slot).is_some() {
                return Err(NgcError::PolicyMismatch(format!(
                    "block {} covered twice",
                    member.id
                )));
            }
        }
    }

    for (id, block) in standalone {
        let q_out_idx = arena.len();
        arena.push(block.q_out.clone());
        let q_in_idx = arena.len();
        arena.push(block.q_in.clone());
        let metric = match &block.metric {
            IntraMetric::DotProduct => None,
            IntraMetric::Bilinear {
                g_left,
                g_right,
                activation,
            } => {
                let gl = arena.len();
                arena.push(g_left.clone());
                let gr = arena.len();
                arena.push(g_right.clone());
                Some(SlotMetric {
                    g_left: gl,
                    g_right: gr,
                    activation: *activation,
                })
            }
            IntraMetric::SharedBilinear { g, activation } => {
                let gi = arena.len();
                arena.push(g.clone());
                Some(SlotMetric {
                    g_left: gi,
                    g_right: gi,
                    activation: *activation,
                })
            }
        };
        let slot = NgcSlot {
            q_out: StateRef {
                arena: q_out_idx,
                rows: block.n_out(),
            },
            q_in: StateRef {
                arena: q_in_idx,
                rows: block.n_in(),
            },
            metric,
        };
        if covered.insert(*id, slot).is_some() {
            return Err(NgcError::PolicyMismatch(format!("block {id} covered twice")));
        }
    }

    let covered_ids: std::collections::BTreeSet<BlockId> = covered.keys().copied().collect();
    if covered_ids != policy.selection {
        let missing: Vec<String> = policy
            .selection
            .difference(&covered_ids)
            .map(|id| id.to_string())
            .collect();
        let extra: Vec<String> = covered_ids
            .difference(&policy.selection)
            .map(|id| id.to_string())
            .collect();
        return Err(NgcError::PolicyMismatch(format!(
            "selection mismatch; missing [{}], extra [{}]",
            missing.join(", "),
            extra.join(", ")
        )));
    }

    // shape sanity against the root blocks being replaced
    for (id, slot) in &covered {
        let (n_out, n_in) = root.core.cfg.shape().dims(id.kind);
        if slot.q_out.rows != n_out || slot.q_in.rows != n_in {
            return Err(NgcError::PolicyMismatch(format!(
                "block {id} state rows ({}, {}) do not match dense dims ({n_out}, {n_in})",
                slot.q_out.rows, slot.q_in.rows
            )));
        }
    }

    let mut slots = root.core.slots.clone();
    for (id, slot) in covered {
        slots.insert(id, Slot::Ngc(slot));
    }
    let alloc = crate::policy::rank_for_budget(policy, &root.core.cfg.shape())?;
    Ok(ComModel {
        core: ModelCore {
            cfg: root.core.cfg,
            embed: root.core.embed.clone(),
            pos: root.core.pos.clone(),
            w_out: root.core.w_out.clone(),
            slots,
            arena,
        },
        policy: policy.clone(),
        allocation: alloc,
    })
}

/// Anything that maps a token sequence to per-position logits.
pub trait LogitModel {
    fn context(&self) -> usize;
    fn vocab(&self) -> usize;
    fn logits(&self, tokens: &[usize]) -> Result<Matrix>;
}

impl LogitModel for RootModel {
    fn context(&self) -> usize {
        self.core.cfg.context
    }
    fn vocab(&self) -> usize {
        self.core.cfg.vocab
    }
    fn logits(&self, tokens: &[usize]) -> Result<Matrix> {
        Ok(forward::forward_full(&self.core, tokens, None)?.0.logits)
    }
}

impl LogitModel for ComModel {
    fn context(&self) -> usize {
        self.core.cfg.context
    }
    fn vocab(&self) -> usize {
        self.core.cfg.vocab
    }
    fn logits(&self, tokens: &[usize]) -> Result<Matrix> {
        Ok(forward::forward_full(&self.core, tokens, None)?.0.logits)
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema: String,
    config: ToyConfig,
    arena_len: usize,
    blocks: BTreeMap<String, BlockEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    policy: Option<Policy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    allocation: Option<RankAllocation>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum BlockEntry {
    Dense { file: String },
    Ngc(NgcSlot),
}

fn save_core(dir: &Path, core: &ModelCore) -> Result<BTreeMap<String, BlockEntry>> {
    std::fs::create_dir_all(dir)?;
    crate::ngct::write_matrix(&dir.join("embed.ngct"), &core.embed)?;
    crate::ngct::write_matrix(&dir.join("pos.ngct"), &core.pos)?;
    crate::ngct::write_matrix(&dir.join("w_out.ngct"), &core.w_out)?;
    for (i, m) in core.arena.iter().enumerate() {
        crate::ngct::write_matrix(&dir.join(format!("arena_{i}.ngct")), m)?;
    }
    let mut blocks = BTreeMap::new();
    for (id, slot) in &core.slots {
        let key = id.to_string();
        let entry = match slot {
            Slot::Dense(w) => {
                let file = format!("{key}.ngct");
                crate::ngct::write_matrix(&dir.join(&file), w)?;
                BlockEntry::Dense { file }
            }
            Slot::Ngc(s) => BlockEntry::Ngc(*s),
        };
        blocks.insert(key, entry);
    }
    Ok(blocks)
}

fn load_core(dir: &Path, manifest: &Manifest) -> Result<ModelCore> {
    let embed = crate::ngct::read_matrix(&dir.join("embed.ngct"))?;
    let pos = crate::ngct::read_matrix(&dir.join("pos.ngct"))?;
    let w_out = crate::ngct::read_matrix(&dir.join("w_out.ngct"))?;
    let mut arena = Vec::with_capacity(manifest.arena_len);
    for i in 0..manifest.arena_len {
        arena.push(crate::ngct::read_matrix(&dir.join(format!("arena_{i}.ngct")))?);
    }
    let mut slots = BTreeMap::new();
    for (key, entry) in &manifest.blocks {
        let id = parse_block_key(key)?;
        let slot = match entry {
            BlockEntry::Dense { file } => Slot::Dense(crate::ngct::read_matrix(&dir.join(file))?),
            BlockEntry::Ngc(s) => Slot::Ngc(*s),
        };
        slots.insert(id, slot);
    }
    Ok(ModelCore {
        cfg: manifest.config,
        embed,
        pos,
        w_out,
        slots,
        arena,
    })
}

fn parse_block_key(key: &str) -> Result<BlockId> {
    let rest = key
        .strip_prefix('L')
        .ok_or_else(|| NgcError::Format(format!("bad block key {key}")))?;
    let (layer_str, kind_str) = rest
        .split_once('.')
        .ok_or_else(|| NgcError::Format(format!("bad block key {key}")))?;
    let layer = layer_str
        .parse()
        .map_err(|_| NgcError::Format(format!("bad block key {key}")))?;
    let kind = match kind_str {
        "Q" => BlockKind::Q,
        "K" => BlockKind::K,
        "V" => BlockKind::V,
        "O" => BlockKind::O,
        "UP" => BlockKind::Up,
        "DOWN" => BlockKind::Down,
        _ => return Err(NgcError::Format(format!("bad block key {key}"))),
    };
    Ok(BlockId::new(layer, kind))
}

pub fn save_root(dir: &Path, model: &RootModel) -> Result<()> {
    let blocks = save_core(dir, &model.core)?;
    let manifest = Manifest {
        schema: "1".into(),
        config: model.core.cfg,
        arena_len: model.core.arena.len(),
        blocks,
        policy: None,
        allocation: None,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_root(dir: &Path) -> Result<RootModel> {
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    Ok(RootModel {
        core: load_core(dir, &manifest)?,
    })
}

pub fn save_com(dir: &Path, model: &ComModel) -> Result<()> {
    let blocks = save_core(dir, &model.core)?;
    let manifest = Manifest {
        schema: "1".into(),
        config: model.core.cfg,
        arena_len: model.core.arena.len(),
        blocks,
        policy: Some(model.policy.clone()),
        allocation: Some(model.allocation.clone()),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_com(dir: &Path) -> Result<ComModel> {
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    let policy = manifest
        .policy
        .clone()
        .ok_or_else(|| NgcError::Format("com checkpoint lacks a policy".into()))?;
    let allocation = manifest
        .allocation
        .clone()
        .ok_or_else(|| NgcError::Format("com checkpoint lacks an allocation".into()))?;
    Ok(ComModel {
        core: load_core(dir, &manifest)?,
        policy,
        allocation,
    })
}
