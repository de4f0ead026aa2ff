//! Forward pass shared by root and com models, with optional per-block
//! activation capture and the caches the backward pass consumes.

use super::{ModelCore, NgcSlot, Slot, SystemTag};
use crate::error::{NgcError, Result};
use crate::matrix::Matrix;
use crate::policy::{BlockId, BlockKind, Side};
use std::collections::BTreeMap;
use std::path::Path;

/// Captured per-block, per-side activation rows (row t = token step t).
/// `segments` records the row count of each captured sequence so that
/// consumers never pair rows across sequence boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub system: SystemTag,
    pub blocks: BTreeMap<(BlockId, Side), Matrix>,
    pub segments: Vec<usize>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TraceMeta {
    system: SystemTag,
    segments: Vec<usize>,
}

impl ActivationTrace {
    pub fn token_count(&self) -> usize {
        self.blocks.values().next().map_or(0, |m| m.rows())
    }

    pub fn get(&self, id: BlockId, side: Side) -> Option<&Matrix> {
        self.blocks.get(&(id, side))
    }

    /// Row-concatenate traces from several sequences of the same model.
    pub fn concat(traces: &[ActivationTrace]) -> Result<ActivationTrace> {
        let first = traces
            .first()
            .ok_or_else(|| NgcError::InvalidInput("no traces to concatenate".into()))?;
        let mut blocks = first.blocks.clone();
        let mut segments = first.segments.clone();
        for t in &traces[1..] {
            if t.system != first.system {
                return Err(NgcError::InvalidInput("mixed trace systems".into()));
            }
            for (key, m) in &t.blocks {
                let acc = blocks.get_mut(key).ok_or_else(|| {
                    NgcError::ShapeError(format!("trace missing block {}", key.0))
                })?;
                *acc = acc.vstack(m);
            }
            segments.extend_from_slice(&t.segments);
        }
        Ok(ActivationTrace {
            system: first.system,
            blocks,
            segments,
        })
    }

    /// Row ranges of the individual captured sequences.
    pub fn segment_ranges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.segments.len());
        let mut lo = 0;
        for &len in &self.segments {
            out.push((lo, lo + len));
            lo += len;
        }
        out
    }

    /// One NGCT file per block/side, named `L<layer>.<kind>.<side>.ngct`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let meta = TraceMeta {
            system: self.system,
            segments: self.segments.clone(),
        };
        std::fs::write(dir.join("trace.json"), serde_json::to_vec_pretty(&meta)?)?;
        for ((id, side), m) in &self.blocks {
            let file = format!("{id}.{}.ngct", side.as_str());
            crate::ngct::write_matrix(&dir.join(file), m)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<ActivationTrace> {
        let meta: TraceMeta = serde_json::from_slice(&std::fs::read(dir.join("trace.json"))?)?;
        let mut blocks = BTreeMap::new();
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            let Some(stem) = name.strip_suffix(".ngct") else {
                continue;
            };
            let Some((block_key, side_str)) = stem.rsplit_once('.') else {
                continue;
            };
            let side = match side_str {
                "in" => Side::In,
                "out" => Side::Out,
                _ => continue,
            };
            let id = super::parse_block_key(block_key)?;
            blocks.insert((id, side), crate::ngct::read_matrix(&path)?);
        }
        if blocks.is_empty() {
            return Err(NgcError::Format(format!(
                "no trace tensors under {}",
                dir.display()
            )));
        }
        Ok(ActivationTrace {
            system: meta.system,
            blocks,
            segments: meta.segments,
        })
    }
}

pub(crate) struct LayerCache {
    pub x_in: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// T×T causal attention probabilities (strict upper triangle zero).
    pub probs: Matrix,
    pub attn: Matrix,
    pub x_mid: Matrix,
    pub z_up: Matrix,
    pub h: Matrix,
}

pub(crate) struct ForwardCache {
    pub layers: Vec<LayerCache>,
    pub x_final: Matrix,
    pub logits: Matrix,
}

pub(crate) fn left_features(core: &ModelCore, s: &NgcSlot) -> Matrix {
    let qo = core.view(s.q_out);
    match &s.metric {
        None => qo,
        Some(m) => qo
            .matmul(&core.arena[m.g_left])
            .map(|x| m.activation.apply(x)),
    }
}

pub(crate) fn right_features(core: &ModelCore, s: &NgcSlot) -> Matrix {
    let qi = core.view(s.q_in);
    match &s.metric {
        None => qi,
        Some(m) => qi
            .matmul(&core.arena[m.g_right])
            .map(|x| m.activation.apply(x)),
    }
}

/// Apply block `id` to activation rows `x` (T × N_in) → T × N_out.
pub(crate) fn apply_block(core: &ModelCore, id: BlockId, x: &Matrix) -> Matrix {
    match &core.slots[&id] {
        Slot::Dense(w) => x.matmul_nt(w),
        Slot::Ngc(s) => x
            .matmul(&right_features(core, s))
            .matmul_nt(&left_features(core, s)),
    }
}

pub(crate) fn forward_full(
    core: &ModelCore,
    tokens: &[usize],
    capture: Option<SystemTag>,
) -> Result<(ForwardCache, Option<ActivationTrace>)> {
    let cfg = &core.cfg;
    if tokens.is_empty() {
        return Err(NgcError::InvalidInput("empty token sequence".into()));
    }
    if tokens.len() > cfg.context {
        return Err(NgcError::InvalidInput(format!(
            "sequence length {} exceeds context {}",
            tokens.len(),
            cfg.context
        )));
    }
    for &t in tokens {
        if t >= cfg.vocab {
            return Err(NgcError::InvalidToken(format!(
                "token {t} outside vocab {}",
                cfg.vocab
            )));
        }
    }

    let t_len = tokens.len();
    let d = cfg.d_model;
    let mut x0 = Matrix::zeros(t_len, d);
    for (t, &tok) in tokens.iter().enumerate() {
        for j in 0..d {
            x0[(t, j)] = core.embed[(tok, j)] + core.pos[(t, j)];
        }
    }

    let mut trace = capture.map(|system| ActivationTrace {
        system,
        blocks: BTreeMap::new(),
        segments: vec![t_len],
    });
    let record = |trace: &mut Option<ActivationTrace>, id: BlockId, x: &Matrix, y: &Matrix| {
        if let Some(tr) = trace {
            tr.blocks.insert((id, Side::In), x.clone());
            tr.blocks.insert((id, Side::Out), y.clone());
        }
    };

    let mut x = x0;
    let mut layers = Vec::with_capacity(cfg.layers);
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    for layer in 0..cfg.layers {
        let id = |kind: BlockKind| BlockId::new(layer, kind);
        let x_in = x.clone();
        let q = apply_block(core, id(BlockKind::Q), &x_in);
        record(&mut trace, id(BlockKind::Q), &x_in, &q);
        let k = apply_block(core, id(BlockKind::K), &x_in);
        record(&mut trace, id(BlockKind::K), &x_in, &k);
        let v = apply_block(core, id(BlockKind::V), &x_in);
        record(&mut trace, id(BlockKind::V), &x_in, &v);

        // causal single-head attention
        let mut probs = Matrix::zeros(t_len, t_len);
        for i in 0..t_len {
            let mut row_max = f64::NEG_INFINITY;
            let mut scores = vec![0.0; i + 1];
            for j in 0..=i {
                let s = crate::matrix::dot(q.row(i), k.row(j)) * inv_sqrt_d;
                scores[j] = s;
                row_max = row_max.max(s);
            }
            let mut denom = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - row_max).exp();
                denom += *s;
            }
            for (j, s) in scores.iter().enumerate() {
                probs[(i, j)] = s / denom;
            }
        }
        let attn = probs.matmul(&v);
        let o = apply_block(core, id(BlockKind::O), &attn);
        record(&mut trace, id(BlockKind::O), &attn, &o);
        let x_mid = x_in.add(&o);

        let z_up = apply_block(core, id(BlockKind::Up), &x_mid);
        record(&mut trace, id(BlockKind::Up), &x_mid, &z_up);
        let h = z_up.map(|v| v.max(0.0));
        let m = apply_block(core, id(BlockKind::Down), &h);
        record(&mut trace, id(BlockKind::Down), &h, &m);
        x = x_mid.add(&m);

        layers.push(LayerCache {
            x_in,
            q,
            k,
            v,
            probs,
            attn,
            x_mid,
            z_up,
            h,
        });
    }

    let logits = x.matmul_nt(&core.w_out);
    if !logits.is_finite() {
        return Err(NgcError::InvalidInput(
            "forward produced non-finite logits".into(),
        ));
    }
    Ok((
        ForwardCache {
            layers,
            x_final: x,
            logits,
        },
        trace,
    ))
}
