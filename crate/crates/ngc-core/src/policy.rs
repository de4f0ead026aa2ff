//! Communication policies: which blocks are replaced by state blocks, which
//! groups merge, and under what rank budget.
//!
//! Grammar accepted by [`parse_policy`] (optionally suffixed `@<ratio>`):
//!
//! - `q-k-v` — every attention projection factorized independently
//! - `qq-kk-vv` — same-kind merges across each disjoint adjacent layer pair,
//!   input side
//! - `kk-qv` — K merged across adjacent pairs, Q and V standalone
//! - `hybrid:<set>;<set>;…` — explicit merge sets of comma-separated
//!   `L<layer>.<kind>.<side>` items, e.g. `hybrid:L0.Q.in,L1.V.in@0.5`
//!
//! "Adjacent" always means disjoint pairs (0,1), (2,3), …; an odd trailing
//! layer stays unmerged.

use crate::error::{NgcError, Result};
use crate::groups::StateBlock;
use crate::linalg::{svd, truncate_factor};
use crate::matrix::Matrix;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BlockKind {
    Q,
    K,
    V,
    O,
    Up,
    Down,
}

impl BlockKind {
    pub const ATTENTION: [BlockKind; 3] = [BlockKind::Q, BlockKind::K, BlockKind::V];

    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::Q => "Q",
            BlockKind::K => "K",
            BlockKind::V => "V",
            BlockKind::O => "O",
            BlockKind::Up => "UP",
            BlockKind::Down => "DOWN",
        }
    }

    fn parse(s: &str) -> Option<BlockKind> {
        match s.to_ascii_uppercase().as_str() {
            "Q" => Some(BlockKind::Q),
            "K" => Some(BlockKind::K),
            "V" => Some(BlockKind::V),
            "O" => Some(BlockKind::O),
            "UP" => Some(BlockKind::Up),
            "DOWN" => Some(BlockKind::Down),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockId {
    pub layer: usize,
    pub kind: BlockKind,
}

impl BlockId {
    pub fn new(layer: usize, kind: BlockKind) -> Self {
        BlockId { layer, kind }
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}", self.layer, self.kind.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    In,
    Out,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::In => "in",
            Side::Out => "out",
        }
    }
}

/// A delayed or asynchronous link between two merge sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterLink {
    pub src: usize,
    pub dst: usize,
    /// Integer token delay d ≥ 0.
    pub delay: usize,
    /// Zero-order-hold period; 1 means every step.
    pub hold_period: usize,
}

/// Block dimensions of the model a policy applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
}

impl ModelShape {
    /// (N_out, N_in) of a block kind.
    pub fn dims(&self, kind: BlockKind) -> (usize, usize) {
        match kind {
            BlockKind::Q | BlockKind::K | BlockKind::V | BlockKind::O => {
                (self.d_model, self.d_model)
            }
            BlockKind::Up => (self.d_ff, self.d_model),
            BlockKind::Down => (self.d_model, self.d_ff),
        }
    }

    pub fn contains(&self, id: BlockId) -> bool {
        id.layer < self.layers
    }

    /// Neuron count on one side of a block.
    pub fn side_dim(&self, id: BlockId, side: Side) -> usize {
        let (n_out, n_in) = self.dims(id.kind);
        match side {
            Side::In => n_in,
            Side::Out => n_out,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    /// Blocks replaced by state blocks.
    pub selection: BTreeSet<BlockId>,
    /// Pairwise-disjoint sets of (block, side) sharing one state matrix.
    pub merge_sets: Vec<BTreeSet<(BlockId, Side)>>,
    /// Optional delayed/asynchronous inter-set links.
    pub links: Vec<InterLink>,
    /// Parameter budget as a fraction of the replaced dense count.
    pub ratio: f64,
    /// Set when the merge sets were spelled out item by item (the hybrid
    /// form); only such policies may mix sides within one set.
    pub explicit_hybrid: bool,
}

impl Policy {
    /// The identity policy: attention projections factorized independently.
    pub fn identity(shape: &ModelShape, ratio: f64) -> Policy {
        Policy {
            selection: attention_selection(shape),
            merge_sets: Vec::new(),
            links: Vec::new(),
            ratio,
            explicit_hybrid: false,
        }
    }

    /// Same-kind input-side merges over disjoint adjacent layer pairs for
    /// the given kinds.
    pub fn adjacent_same_kind(shape: &ModelShape, kinds: &[BlockKind], ratio: f64) -> Policy {
        let mut merge_sets = Vec::new();
        for pair in 0..shape.layers / 2 {
            for &kind in kinds {
                merge_sets.push(BTreeSet::from([
                    (BlockId::new(2 * pair, kind), Side::In),
                    (BlockId::new(2 * pair + 1, kind), Side::In),
                ]));
            }
        }
        Policy {
            selection: attention_selection(shape),
            merge_sets,
            links: Vec::new(),
            ratio,
            explicit_hybrid: false,
        }
    }

    /// Cross-kind merges: block kind `x` of layer 2i shares with kind `π(x)`
    /// of layer 2i+1, for a permutation π of {Q, K, V}.
    pub fn adjacent_cross_kind(
        shape: &ModelShape,
        perm: &BTreeMap<BlockKind, BlockKind>,
        ratio: f64,
    ) -> Policy {
        let mut merge_sets = Vec::new();
        for pair in 0..shape.layers / 2 {
            for &kind in &BlockKind::ATTENTION {
                merge_sets.push(BTreeSet::from([
                    (BlockId::new(2 * pair, kind), Side::In),
                    (BlockId::new(2 * pair + 1, perm[&kind]), Side::In),
                ]));
            }
        }
        Policy {
            selection: attention_selection(shape),
            merge_sets,
            links: Vec::new(),
            ratio,
            explicit_hybrid: false,
        }
    }

    /// The fixed hybrid used by reports: K merged same-kind, Q and V merged
    /// cross-kind, over each disjoint adjacent layer pair.
    pub fn hybrid_bank(shape: &ModelShape, ratio: f64) -> Policy {
        let perm = BTreeMap::from([
            (BlockKind::Q, BlockKind::V),
            (BlockKind::K, BlockKind::K),
            (BlockKind::V, BlockKind::Q),
        ]);
        Policy::adjacent_cross_kind(shape, &perm, ratio)
    }

    /// Check internal consistency against a model shape.
    pub fn validate(&self, shape: &ModelShape) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(NgcError::ParseError(format!(
                "ratio {} outside (0, 1]",
                self.ratio
            )));
        }
        for id in &self.selection {
            if !shape.contains(*id) {
                return Err(NgcError::UnknownBlock(id.to_string()));
            }
        }
        let mut seen: BTreeSet<(BlockId, Side)> = BTreeSet::new();
        for set in &self.merge_sets {
            if set.len() < 2 {
                return Err(NgcError::InvalidMerge(
                    "merge set needs at least two members".into(),
                ));
            }
            for &(id, side) in set {
                if !shape.contains(id) {
                    return Err(NgcError::UnknownBlock(id.to_string()));
                }
                if !self.selection.contains(&id) {
                    return Err(NgcError::PolicyMismatch(format!(
                        "merged block {id} is not in the selection"
                    )));
                }
                if !seen.insert((id, side)) {
                    return Err(NgcError::InvalidMerge(format!(
                        "{id}.{} appears in more than one merge set",
                        side.as_str()
                    )));
                }
            }
        }
        for link in &self.links {
            if link.src >= self.merge_sets.len() || link.dst >= self.merge_sets.len() {
                return Err(NgcError::PolicyMismatch(format!(
                    "link {} -> {} references a missing merge set",
                    link.src, link.dst
                )));
            }
            if link.hold_period == 0 {
                return Err(NgcError::ParseError("hold_period must be >= 1".into()));
            }
        }
        Ok(())
    }

    /// Merge-set index a (block, side) belongs to, if any.
    pub fn merge_set_of(&self, id: BlockId, side: Side) -> Option<usize> {
        self.merge_sets.iter().position(|s| s.contains(&(id, side)))
    }

    /// Selected blocks not participating in any merge set.
    pub fn standalone_blocks(&self) -> Vec<BlockId> {
        self.selection
            .iter()
            .copied()
            .filter(|&id| {
                self.merge_set_of(id, Side::In).is_none() && self.merge_set_of(id, Side::Out).is_none()
            })
            .collect()
    }
}

fn attention_selection(shape: &ModelShape) -> BTreeSet<BlockId> {
    let mut sel = BTreeSet::new();
    for layer in 0..shape.layers {
        for kind in BlockKind::ATTENTION {
            sel.insert(BlockId::new(layer, kind));
        }
    }
    sel
}

/// Parse a policy spec string against a model shape.
pub fn parse_policy(spec: &str, shape: &ModelShape) -> Result<Policy> {
    let (body, ratio) = match spec.rsplit_once('@') {
        Some((body, ratio_str)) => {
            let ratio: f64 = ratio_str
                .parse()
                .map_err(|_| NgcError::ParseError(format!("bad ratio '{ratio_str}'")))?;
            (body, ratio)
        }
        None => (spec, 1.0),
    };
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(NgcError::ParseError(format!("ratio {ratio} outside (0, 1]")));
    }

    let policy = match body {
        "q-k-v" => Policy::identity(shape, ratio),
        "qq-kk-vv" => Policy::adjacent_same_kind(shape, &BlockKind::ATTENTION, ratio),
        "kk-qv" => Policy::adjacent_same_kind(shape, &[BlockKind::K], ratio),
        _ => {
            let sets_str = body
                .strip_prefix("hybrid:")
                .ok_or_else(|| NgcError::ParseError(format!("unrecognized policy '{body}'")))?;
            let mut selection = attention_selection(shape);
            let mut merge_sets = Vec::new();
            for set_str in sets_str.split(';') {
                let mut set = BTreeSet::new();
                for item in set_str.split(',') {
                    let (id, side) = parse_item(item.trim(), shape)?;
                    selection.insert(id);
                    set.insert((id, side));
                }
                if set.len() < 2 {
                    return Err(NgcError::ParseError(format!(
                        "merge set '{set_str}' needs at least two members"
                    )));
                }
                merge_sets.push(set);
            }
            Policy {
                selection,
                merge_sets,
                links: Vec::new(),
                ratio,
                explicit_hybrid: true,
            }
        }
    };
    policy.validate(shape)?;
    Ok(policy)
}

fn parse_item(item: &str, shape: &ModelShape) -> Result<(BlockId, Side)> {
    let rest = item
        .strip_prefix('L')
        .or_else(|| item.strip_prefix('l'))
        .ok_or_else(|| NgcError::ParseError(format!("item '{item}' must start with L")))?;
    let mut parts = rest.split('.');
    let (layer_str, kind_str, side_str) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
        (Some(a), Some(b), Some(c), None) => (a, b, c),
        _ => {
            return Err(NgcError::ParseError(format!(
                "item '{item}' is not of the form L<layer>.<kind>.<side>"
            )))
        }
    };
    let layer: usize = layer_str
        .parse()
        .map_err(|_| NgcError::ParseError(format!("bad layer '{layer_str}'")))?;
    let kind = BlockKind::parse(kind_str)
        .ok_or_else(|| NgcError::UnknownBlock(format!("kind '{kind_str}'")))?;
    let side = match side_str.to_ascii_lowercase().as_str() {
        "in" => Side::In,
        "out" => Side::Out,
        other => return Err(NgcError::ParseError(format!("bad side '{other}'"))),
    };
    let id = BlockId::new(layer, kind);
    if !shape.contains(id) {
        return Err(NgcError::UnknownBlock(id.to_string()));
    }
    Ok((id, side))
}

/// Canonical textual form; `parse_policy(render_policy(p), shape) == p`.
pub fn render_policy(policy: &Policy, shape: &ModelShape) -> String {
    let ratio = format_ratio(policy.ratio);
    if !policy.explicit_hybrid {
        if policy.merge_sets.is_empty() {
            return format!("q-k-v@{ratio}");
        }
        let same_kind = |kinds: &[BlockKind]| {
            Policy::adjacent_same_kind(shape, kinds, policy.ratio).merge_sets
        };
        if policy.merge_sets == same_kind(&BlockKind::ATTENTION) {
            return format!("qq-kk-vv@{ratio}");
        }
        if policy.merge_sets == same_kind(&[BlockKind::K]) {
            return format!("kk-qv@{ratio}");
        }
    }
    let sets: Vec<String> = policy
        .merge_sets
        .iter()
        .map(|set| {
            set.iter()
                .map(|(id, side)| format!("{id}.{}", side.as_str()))
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect();
    format!("hybrid:{}@{ratio}", sets.join(";"))
}

fn format_ratio(ratio: f64) -> String {
    // `{}` prints f64 shortest-round-trip, so parse(render) is exact.
    format!("{ratio}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyFamily {
    None,
    AdjacentSameKind,
    AdjacentCrossKind,
    HybridBank,
}

/// Enumerate a policy family in deterministic order, identity policy first.
pub fn enumerate_policies(shape: &ModelShape, family: PolicyFamily, ratio: f64) -> Vec<Policy> {
    let mut out = vec![Policy::identity(shape, ratio)];
    match family {
        PolicyFamily::None => {}
        PolicyFamily::AdjacentSameKind => {
            // all non-empty kind subsets, in binary counting order
            for mask in 1u8..8 {
                let kinds: Vec<BlockKind> = BlockKind::ATTENTION
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| mask & (1 << i) != 0)
                    .map(|(_, &k)| k)
                    .collect();
                out.push(Policy::adjacent_same_kind(shape, &kinds, ratio));
            }
        }
        PolicyFamily::AdjacentCrossKind => {
            for perm in kind_permutations() {
                if perm.iter().all(|(a, b)| a == b) {
                    continue; // the all-same-kind map belongs to the other family
                }
                out.push(Policy::adjacent_cross_kind(shape, &perm, ratio));
            }
        }
        PolicyFamily::HybridBank => {
            out.push(Policy::hybrid_bank(shape, ratio));
        }
    }
    out
}

/// The 3! maps from {Q, K, V} to itself that are bijective, in lexicographic
/// order of their images.
fn kind_permutations() -> Vec<BTreeMap<BlockKind, BlockKind>> {
    let kinds = BlockKind::ATTENTION;
    let mut perms = Vec::new();
    for &a in &kinds {
        for &b in &kinds {
            for &c in &kinds {
                if a != b && b != c && a != c {
                    perms.push(BTreeMap::from([
                        (BlockKind::Q, a),
                        (BlockKind::K, b),
                        (BlockKind::V, c),
                    ]));
                }
            }
        }
    }
    perms
}

/// How metric parameters enter the budget, if a trainable metric is planned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MetricBudget {
    /// Dot product: states only.
    None,
    /// Two projections of r̃ = ⌈factor·r⌉ columns each.
    Bilinear { tilde_factor: f64 },
    /// One shared projection.
    SharedBilinear { tilde_factor: f64 },
}

impl MetricBudget {
    pub fn params(&self, r: usize) -> usize {
        match *self {
            MetricBudget::None => 0,
            MetricBudget::Bilinear { tilde_factor } => 2 * r * tilde_dim(tilde_factor, r),
            MetricBudget::SharedBilinear { tilde_factor } => r * tilde_dim(tilde_factor, r),
        }
    }
}

pub fn tilde_dim(factor: f64, r: usize) -> usize {
    ((factor * r as f64).ceil() as usize).max(1)
}

/// Ranks granted to each standalone block and merge set under the budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankAllocation {
    /// Serialized as a pair list since JSON keys must be strings.
    #[serde(with = "block_rank_pairs")]
    pub standalone: BTreeMap<BlockId, usize>,
    /// Parallel to `policy.merge_sets`.
    pub merged: Vec<usize>,
}

mod block_rank_pairs {
    use super::BlockId;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<BlockId, usize>,
        ser: S,
    ) -> Result<S::Ok, S::Error> {
        let pairs: Vec<(&BlockId, &usize)> = map.iter().collect();
        pairs.serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        de: D,
    ) -> Result<BTreeMap<BlockId, usize>, D::Error> {
        let pairs: Vec<(BlockId, usize)> = Vec::deserialize(de)?;
        Ok(pairs.into_iter().collect())
    }
}

/// Budget rule: a standalone N_out×N_in block gets
/// `r = ⌊ratio·N_out·N_in / (N_out+N_in)⌋` clamped to `[1, min(N_out,N_in)]`;
/// a merge set gets `r* = ⌊ratio·Σdense / Σ state-rows⌋` with the shared
/// side counted once at its padded height. Trainable metric parameters are
/// charged against the same budget.
pub fn rank_for_budget(policy: &Policy, shape: &ModelShape) -> Result<RankAllocation> {
    rank_for_budget_with_metric(policy, shape, MetricBudget::None)
}

pub fn rank_for_budget_with_metric(
    policy: &Policy,
    shape: &ModelShape,
    metric: MetricBudget,
) -> Result<RankAllocation> {
    policy.validate(shape)?;
    let mut standalone = BTreeMap::new();
    for id in policy.standalone_blocks() {
        let (n_out, n_in) = shape.dims(id.kind);
        let dense = n_out * n_in;
        let rows = n_out + n_in;
        let cap = n_out.min(n_in);
        let r = fit_rank(policy.ratio, dense, rows, cap, metric).ok_or_else(|| {
            NgcError::BudgetTooSmall(format!(
                "block {id} at ratio {} cannot afford rank 1",
                policy.ratio
            ))
        })?;
        standalone.insert(id, r);
    }
    let mut merged = Vec::with_capacity(policy.merge_sets.len());
    for set in &policy.merge_sets {
        let geom = MergeGeometry::of(set, shape);
        let r = fit_rank(policy.ratio, geom.dense, geom.state_rows, geom.cap, metric)
            .ok_or_else(|| {
                NgcError::BudgetTooSmall(format!(
                    "merge set at ratio {} cannot afford rank 1",
                    policy.ratio
                ))
            })?;
        merged.push(r);
    }
    Ok(RankAllocation { standalone, merged })
}

/// Largest r ≤ cap with `r·rows + metric_params(r) ≤ ratio·dense`, or None.
fn fit_rank(ratio: f64, dense: usize, rows: usize, cap: usize, metric: MetricBudget) -> Option<usize> {
    let budget = (ratio * dense as f64).floor() as usize;
    let mut r = (budget / rows).min(cap);
    while r >= 1 {
        if r * rows + metric.params(r) <= budget {
            return Some(r);
        }
        r -= 1;
    }
    None
}

struct MergeGeometry {
    dense: usize,
    state_rows: usize,
    cap: usize,
}

impl MergeGeometry {
    fn of(set: &BTreeSet<(BlockId, Side)>, shape: &ModelShape) -> MergeGeometry {
        let mut dense = 0;
        let mut private_rows = 0;
        let mut shared_rows = 0;
        let mut min_private = usize::MAX;
        for &(id, side) in set {
            let (n_out, n_in) = shape.dims(id.kind);
            dense += n_out * n_in;
            let shared = shape.side_dim(id, side);
            let private = n_out + n_in - shared;
            shared_rows = shared_rows.max(shared);
            private_rows += private;
            min_private = min_private.min(private);
        }
        MergeGeometry {
            dense,
            state_rows: shared_rows + private_rows,
            cap: shared_rows.min(min_private),
        }
    }
}

/// Exact parameter count of an allocation (states plus trainable metric).
pub fn ngc_param_count(
    policy: &Policy,
    shape: &ModelShape,
    alloc: &RankAllocation,
    metric: MetricBudget,
) -> usize {
    let mut total = 0;
    for (id, &r) in &alloc.standalone {
        let (n_out, n_in) = shape.dims(id.kind);
        total += r * (n_out + n_in) + metric.params(r);
    }
    for (set, &r) in policy.merge_sets.iter().zip(&alloc.merged) {
        let geom = MergeGeometry::of(set, shape);
        total += r * geom.state_rows + metric.params(r);
    }
    total
}

/// Dense parameter count of every replaced block.
pub fn replaced_dense_count(policy: &Policy, shape: &ModelShape) -> usize {
    policy
        .selection
        .iter()
        .map(|id| {
            let (n_out, n_in) = shape.dims(id.kind);
            n_out * n_in
        })
        .sum()
}

/// One member's view into a merged state matrix.
#[derive(Debug, Clone)]
pub struct MergedMember {
    pub id: BlockId,
    pub shared_side: Side,
    /// States of the non-shared side, N_private × r*.
    pub private: Matrix,
    /// This member reads rows `0..used_rows` of the shared matrix; higher
    /// rows are zero-padding from larger members and are masked for it.
    pub used_rows: usize,
}

/// A merge set materialized: one shared state matrix plus per-member views.
#[derive(Debug, Clone)]
pub struct MergedStates {
    pub shared: Matrix,
    pub members: Vec<MergedMember>,
}

impl MergedStates {
    /// Materialize one member as a standalone-looking state block.
    pub fn member_block(&self, idx: usize) -> StateBlock {
        let m = &self.members[idx];
        let shared_view = self.shared.row_block(0, m.used_rows);
        let (q_out, q_in) = match m.shared_side {
            Side::In => (m.private.clone(), shared_view),
            Side::Out => (shared_view, m.private.clone()),
        };
        StateBlock {
            q_out,
            q_in,
            metric: crate::groups::IntraMetric::DotProduct,
            origin: m.id.to_string(),
        }
    }
}

/// Build the shared state matrices for every merge set of a policy from the
/// dense (or initialization) matrices of its member blocks.
///
/// Each member contributes its block matrix oriented so the shared-side
/// neurons are rows; anchors are zero-padded to the tallest member and
/// stacked side by side, and one truncated SVD of the stack yields the
/// shared states (left factor) and each member's private states (row slices
/// of the right factor).
pub fn merge_states(
    policy: &Policy,
    alloc: &RankAllocation,
    blocks: &BTreeMap<BlockId, Matrix>,
) -> Result<Vec<MergedStates>> {
    let mut out = Vec::with_capacity(policy.merge_sets.len());
    for (set_idx, set) in policy.merge_sets.iter().enumerate() {
        let sides: BTreeSet<Side> = set.iter().map(|&(_, s)| s).collect();
        if sides.len() > 1 && !policy.explicit_hybrid {
            return Err(NgcError::InvalidMerge(
                "merge set mixes in and out sides without explicit hybrid form".into(),
            ));
        }
        let r = alloc.merged[set_idx];
        let mut anchors = Vec::new();
        let mut max_shared = 0;
        for &(id, side) in set {
            let w = blocks.get(&id).ok_or_else(|| {
                NgcError::PolicyMismatch(format!("no matrix provided for merged block {id}"))
            })?;
            let anchor = match side {
                Side::Out => w.clone(),
                Side::In => w.transpose(),
            };
            max_shared = max_shared.max(anchor.rows());
            anchors.push((id, side, anchor));
        }
        let mut stacked: Option<Matrix> = None;
        let mut col_ranges = Vec::new();
        let mut col_cursor = 0;
        for (_, _, anchor) in &anchors {
            let padded = anchor.pad_to(max_shared, anchor.cols());
            col_ranges.push((col_cursor, col_cursor + padded.cols()));
            col_cursor += padded.cols();
            stacked = Some(match stacked {
                None => padded,
                Some(s) => s.hstack(&padded),
            });
        }
        let stacked = stacked.expect("merge sets have at least two members");
        let sv = svd(&stacked)?;
        let r = r.min(sv.s.len());
        let (shared, private_all) = truncate_factor(&sv, r)?;
        let members = anchors
            .iter()
            .zip(&col_ranges)
            .map(|((id, side, anchor), &(lo, hi))| MergedMember {
                id: *id,
                shared_side: *side,
                private: private_all.row_block(lo, hi),
                used_rows: anchor.rows(),
            })
            .collect();
        out.push(MergedStates { shared, members });
    }
    Ok(out)
}

/// The compiled form of a delayed/asynchronous link: an instantaneous
/// system over the augmented state `[z_t, z_{t-1}, …, z_{t-d}]` plus a
/// zero-order-hold register. The output at each step is the fixed linear
/// readout of the hold slots, and equals the delayed/held source exactly.
#[derive(Debug, Clone)]
pub struct AugmentedSharing {
    dim: usize,
    delay: usize,
    hold_period: usize,
    /// register[k] holds z_{t-k}; length delay + 1.
    register: Vec<Vec<f64>>,
    hold: Vec<f64>,
    steps: usize,
}

pub fn compile_delayed_link(link: &InterLink, signal_dim: usize) -> AugmentedSharing {
    assert!(link.hold_period >= 1, "hold_period must be >= 1");
    AugmentedSharing {
        dim: signal_dim,
        delay: link.delay,
        hold_period: link.hold_period,
        register: vec![vec![0.0; signal_dim]; link.delay + 1],
        hold: vec![0.0; signal_dim],
        steps: 0,
    }
}

impl AugmentedSharing {
    /// Push z_t, return the instantaneous readout (the held delayed signal).
    pub fn step(&mut self, z: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.dim, "signal dimension mismatch");
        self.register.rotate_right(1);
        self.register[0].copy_from_slice(z);
        if self.steps >= self.delay && (self.steps - self.delay) % self.hold_period == 0 {
            self.hold.copy_from_slice(&self.register[self.delay]);
        }
        self.steps += 1;
        self.hold.clone()
    }

    /// The augmented shared state: register slots then the hold register.
    pub fn augmented_state(&self) -> Vec<f64> {
        let mut state: Vec<f64> = self.register.iter().flatten().copied().collect();
        state.extend_from_slice(&self.hold);
        state
    }

    /// State dimensions added beyond the instantaneous signal itself.
    pub fn extra_state_dim(&self) -> usize {
        if self.delay == 0 && self.hold_period == 1 {
            0
        } else {
            self.delay * self.dim + self.dim
        }
    }
}
