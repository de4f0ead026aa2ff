//! End-to-end orchestration: train the root, capture activations, factorize
//! and initialize states per policy, score the coupled dynamics, select,
//! fine-tune, evaluate, and write every intermediate artifact so each stage
//! can be re-run from the previous stage's outputs.
//!
//! Layout under `output_dir`:
//!
//! ```text
//! root/                     root-model checkpoint
//! root_trace/               captured root activations
//! policies/<name>/blocks/   per-block state directories
//!                  com/         com checkpoint before fine-tuning
//!                  com_trace/   captured com activations
//!                  com_finetuned/
//!                  init_report.json
//!                  stability_report.json
//! report.json, report.csv   final ranking
//! ```

use crate::dynamics::{
    build_phi, check_iss_trial, compute_residuals, fit_projections, stability_score,
    stability_score_approx, IssTrial, ProjectionSet, StabilityConfig, StateSnapshots,
};
use crate::error::{NgcError, Result};
use crate::groups::{factorize_block, StateBlock};
use crate::init::{init_svd_blend, residual_act, residual_weight, InitConfig};
use crate::linalg::{sigma_max, svd, truncate_factor};
use crate::matrix::Matrix;
use crate::netmodel::{
    eval_task, finetune_states, replace_blocks, train_root, ActivationTrace, ComModel, RootModel,
    TaskSpec, ToyConfig,
};
use crate::policy::{
    merge_states, parse_policy, rank_for_budget, render_policy, BlockId, Policy, RankAllocation,
    Side,
};
use crate::report::{PipelineReport, PolicyRow, ReportFormat, REPORT_SCHEMA};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionCriterion {
    MinSApprox,
    MinS,
    ReportOnly,
}

impl SelectionCriterion {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectionCriterion::MinSApprox => "min-s-approx",
            SelectionCriterion::MinS => "min-s",
            SelectionCriterion::ReportOnly => "report-only",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ToyConfig,
    pub task: TaskSpec,
    /// Policy spec strings; `hybrid` expands to the fixed hybrid bank.
    pub policies: Vec<String>,
    /// Ratio applied to policy strings that do not carry `@<ratio>`.
    pub ratio: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Master seed for capture, initialization probes, and evaluation;
    /// model init and training use `model.seed`.
    pub seed: u64,
    pub capture_tokens: usize,
    pub train_steps: usize,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub eval_samples: usize,
    pub selection: SelectionCriterion,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ToyConfig {
                seed: 7,
                ..ToyConfig::default()
            },
            task: TaskSpec::copy(16, 64, 3),
            policies: vec!["q-k-v".into(), "qq-kk-vv".into(), "hybrid".into()],
            ratio: 0.5,
            lambda: 0.5,
            alpha: 1.0,
            beta: 1.0,
            seed: 7,
            capture_tokens: 256,
            train_steps: 3000,
            finetune_steps: 1000,
            finetune_lr: 0.2,
            eval_samples: 2000,
            selection: SelectionCriterion::MinSApprox,
            output_dir: PathBuf::from("ngc-out"),
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(NgcError::InvalidInput(format!(
                "ratio {} outside (0, 1]",
                self.ratio
            )));
        }
        if self.policies.is_empty() {
            return Err(NgcError::InvalidInput("no policies listed".into()));
        }
        Ok(())
    }

    /// Expand the `hybrid` alias and append the default ratio when a spec
    /// string carries none.
    pub fn normalize_policy_spec(&self, spec: &str) -> String {
        let spec = if spec == "hybrid" || spec.starts_with("hybrid@") {
            let ratio = spec
                .rsplit_once('@')
                .map(|(_, r)| r.to_string())
                .unwrap_or_else(|| format!("{}", self.ratio));
            let shape = self.model.shape();
            let p = Policy::hybrid_bank(&shape, ratio.parse().unwrap_or(self.ratio));
            return render_policy(&p, &shape);
        } else {
            spec.to_string()
        };
        if spec.contains('@') {
            spec
        } else {
            format!("{spec}@{}", self.ratio)
        }
    }
}

/// Artifact locations under one output directory.
#[derive(Debug, Clone)]
pub struct ArtifactPaths {
    pub root: PathBuf,
}

impl ArtifactPaths {
    pub fn new(output_dir: &Path) -> ArtifactPaths {
        ArtifactPaths {
            root: output_dir.to_path_buf(),
        }
    }

    pub fn root_model(&self) -> PathBuf {
        self.root.join("root")
    }

    pub fn root_trace(&self) -> PathBuf {
        self.root.join("root_trace")
    }

    pub fn policy_dir(&self, spec: &str) -> PathBuf {
        self.root.join("policies").join(sanitize(spec))
    }

    pub fn report_stem(&self) -> PathBuf {
        self.root.join("report")
    }
}

fn sanitize(spec: &str) -> String {
    spec.chars()
        .map(|c| if c.is_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

/// Stage 1: train the root model and persist its checkpoint.
pub fn stage_train_root(cfg: &RunConfig) -> Result<(RootModel, f64)> {
    let trained = train_root(&cfg.model, &cfg.task, cfg.train_steps)
        .map_err(|e| e.in_stage("train-root"))?;
    let paths = ArtifactPaths::new(&cfg.output_dir);
    crate::netmodel::save_root(&paths.root_model(), &trained.model)
        .map_err(|e| e.in_stage("train-root"))?;
    Ok((trained.model, trained.final_accuracy))
}

/// The capture token streams: enough task sequences to cover
/// `capture_tokens` positions, deterministic in the master seed.
pub fn capture_sequences(cfg: &RunConfig) -> Vec<Vec<usize>> {
    let mut rng = crate::seeding::rng(cfg.seed, "capture-tokens");
    let per = cfg.task.length.min(cfg.model.context);
    let count = cfg.capture_tokens.div_ceil(per).max(1);
    (0..count).map(|_| cfg.task.gen_sequence(&mut rng)).collect()
}

/// Stage 2: run the capture sequences through a model and concatenate the
/// per-sequence traces.
pub fn capture_trace<M>(model: &M, cfg: &RunConfig) -> Result<ActivationTrace>
where
    M: CaptureForward,
{
    let mut traces = Vec::new();
    for seq in capture_sequences(cfg) {
        traces.push(model.forward_trace(&seq)?);
    }
    ActivationTrace::concat(&traces)
}

/// Forward-with-capture, implemented by both model variants.
pub trait CaptureForward {
    fn forward_trace(&self, tokens: &[usize]) -> Result<ActivationTrace>;
}

impl CaptureForward for RootModel {
    fn forward_trace(&self, tokens: &[usize]) -> Result<ActivationTrace> {
        Ok(self.forward(tokens)?.1)
    }
}

impl CaptureForward for ComModel {
    fn forward_trace(&self, tokens: &[usize]) -> Result<ActivationTrace> {
        Ok(self.forward(tokens)?.1)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitBlockEntry {
    pub block: String,
    pub rank: usize,
    pub residual_act: f64,
    pub residual_weight: f64,
    /// The same activation residual for the plain SVD truncation, for
    /// comparison.
    pub residual_act_truncation: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitReport {
    pub schema: String,
    pub lambda: f64,
    pub blocks: Vec<InitBlockEntry>,
}

/// Stage 3 output: the com model plus everything scoring needs.
pub struct PolicyArtifacts {
    pub spec: String,
    pub policy: Policy,
    pub allocation: RankAllocation,
    pub com: ComModel,
    pub snapshots: BTreeMap<BlockId, StateSnapshots>,
    pub init_report: InitReport,
}

/// Stage 3: factorize and initialize state blocks for one policy from the
/// root weights and the captured root activations, then assemble the com
/// model (merged sets share one arena matrix).
pub fn stage_factorize(
    root: &RootModel,
    root_trace: &ActivationTrace,
    spec: &str,
    cfg: &RunConfig,
) -> Result<PolicyArtifacts> {
    let shape = cfg.model.shape();
    let policy = parse_policy(spec, &shape).map_err(|e| e.in_stage("factorize"))?;
    let alloc = rank_for_budget(&policy, &shape).map_err(|e| e.in_stage("factorize"))?;

    let blend_c = |id: BlockId, rank: usize| -> Result<(Matrix, InitBlockEntry)> {
        let w = root
            .core
            .dense(id)
            .ok_or_else(|| NgcError::PolicyMismatch(format!("block {id} is not dense")))?;
        let acts = root_trace.get(id, Side::In).ok_or_else(|| {
            NgcError::ShapeError(format!("root trace missing {id}.in"))
        })?;
        // init works in the row-acting orientation: pass Wᵀ with the
        // captured input rows, transpose the result back
        let icfg = InitConfig {
            lambda: cfg.lambda,
            rank,
            seed: crate::seeding::derive_seed(cfg.seed, &format!("init-{id}")),
            ..InitConfig::default()
        };
        let wt = w.transpose();
        let c = init_svd_blend(&wt, acts, &icfg)?;
        let r_act = residual_act(&c, &wt, acts)?;
        let r_w = residual_weight(&c, &wt, acts.rows())?;
        let sv = svd(&wt)?;
        let (a, b) = truncate_factor(&sv, rank)?;
        let trunc = a.matmul_nt(&b);
        let entry = InitBlockEntry {
            block: id.to_string(),
            rank,
            residual_act: r_act,
            residual_weight: r_w,
            residual_act_truncation: residual_act(&trunc, &wt, acts)?,
        };
        Ok((c.transpose(), entry))
    };

    let mut init_entries = Vec::new();
    let mut standalone: BTreeMap<BlockId, StateBlock> = BTreeMap::new();
    for id in policy.standalone_blocks() {
        let rank = alloc.standalone[&id];
        let (c, entry) = blend_c(id, rank).map_err(|e| e.in_stage("factorize"))?;
        init_entries.push(entry);
        let block = crate::init::states_from_c(&c, rank, crate::groups::IntraMetric::DotProduct)
            .map_err(|e| e.in_stage("factorize"))?
            .with_origin(id.to_string());
        standalone.insert(id, block);
    }

    // merged sets: concatenated SVD over the blended per-member matrices
    let mut member_inits: BTreeMap<BlockId, Matrix> = BTreeMap::new();
    for (set, &r_star) in policy.merge_sets.iter().zip(&alloc.merged) {
        for &(id, _) in set {
            let (c, entry) = blend_c(id, r_star).map_err(|e| e.in_stage("factorize"))?;
            init_entries.push(entry);
            member_inits.insert(id, c);
        }
    }
    let merged = merge_states(&policy, &alloc, &member_inits).map_err(|e| e.in_stage("factorize"))?;

    let com = replace_blocks(root, &policy, &standalone, &merged)
        .map_err(|e| e.in_stage("factorize"))?;

    let snapshots = snapshots_from_models(root, &com).map_err(|e| e.in_stage("factorize"))?;

    Ok(PolicyArtifacts {
        spec: spec.to_string(),
        policy,
        allocation: alloc,
        com,
        snapshots,
        init_report: InitReport {
            schema: REPORT_SCHEMA.into(),
            lambda: cfg.lambda,
            blocks: init_entries,
        },
    })
}

/// Root states are the plain truncated-SVD factors of each replaced dense
/// block at the com rank; com states are the current arena views. Before
/// fine-tuning com0 = com1, afterwards they differ.
pub fn snapshots_from_models(
    root: &RootModel,
    com: &ComModel,
) -> Result<BTreeMap<BlockId, StateSnapshots>> {
    let mut snapshots = BTreeMap::new();
    for &id in &com.policy.selection {
        let com_block = com
            .core
            .state_block(id)
            .ok_or_else(|| NgcError::PolicyMismatch(format!("block {id} not replaced")))?;
        let w = root
            .core
            .dense(id)
            .ok_or_else(|| NgcError::PolicyMismatch(format!("root block {id} is not dense")))?;
        let r_star = com_block.rank().min(w.rows()).min(w.cols());
        let root_block = factorize_block(w, r_star)?;
        snapshots.insert(
            id,
            StateSnapshots::pre_finetune(
                root_block.q_in,
                root_block.q_out,
                com_block.q_in,
                com_block.q_out,
            ),
        );
    }
    Ok(snapshots)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockScoreEntry {
    pub sigma_trs: f64,
    pub sigma_com: f64,
    pub grad_t_trs_mean_abs: f64,
    pub grad_t_com_mean_abs: f64,
    pub grad_h_trs_mean_abs: f64,
    pub grad_h_com_mean_abs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IssSummary {
    pub contractive: bool,
    pub violations: usize,
    pub max_slack: f64,
    pub min_slack: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityTotals {
    pub s: f64,
    pub s_approx: f64,
    /// sup over blocks and sides of max(σ_max(T_com), σ_max(H_com)).
    pub rho: f64,
    pub iss: IssSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityReport {
    pub schema: String,
    pub policy: String,
    pub selection_rule: String,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub blocks: BTreeMap<String, BlockScoreEntry>,
    pub totals: StabilityTotals,
}

fn mean_abs(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64
    }
}

/// Audit the fitted dynamics against the deviation bound: per block/side
/// the error recursion uses the effective propagator `(1−λ)·T_com` and the
/// exact per-step mismatch as disturbance, so the check verifies the bound
/// arithmetic on real data.
fn iss_from_fit(
    root_trace: &ActivationTrace,
    com_trace: &ActivationTrace,
    proj: &ProjectionSet,
) -> Result<IssSummary> {
    let mut summary = IssSummary {
        contractive: true,
        violations: 0,
        max_slack: f64::NEG_INFINITY,
        min_slack: f64::INFINITY,
    };
    for (id, bp) in &proj.blocks {
        for side in [Side::In, Side::Out] {
            let a_root = root_trace.get(*id, side).unwrap();
            let a_com = com_trace.get(*id, side).unwrap();
            let m = bp.t_com(side).scale(1.0 - proj.lambda);
            let t_len = a_root.rows();
            let mut deltas = Vec::with_capacity(t_len.saturating_sub(1));
            let mut prev_err: Vec<f64> = a_com
                .row(0)
                .iter()
                .zip(a_root.row(0))
                .map(|(c, r)| c - r)
                .collect();
            let e0 = prev_err.clone();
            for t in 1..t_len {
                let err: Vec<f64> = a_com
                    .row(t)
                    .iter()
                    .zip(a_root.row(t))
                    .map(|(c, r)| c - r)
                    .collect();
                let propagated = m.vec_mat_t(&prev_err);
                deltas.push(
                    err.iter()
                        .zip(&propagated)
                        .map(|(e, p)| e - p)
                        .collect::<Vec<f64>>(),
                );
                prev_err = err;
            }
            if deltas.is_empty() {
                continue;
            }
            let steps = deltas.len();
            let trial = IssTrial {
                m_a: vec![m.clone(); steps],
                m_q: vec![Matrix::zeros(m.rows(), m.cols()); steps],
                delta_a: deltas,
                delta_q: vec![vec![0.0; m.rows()]; steps],
                e0_a: e0,
                e0_q: vec![0.0; m.rows()],
            };
            let r = check_iss_trial(&trial)?;
            summary.contractive &= r.contractive;
            summary.violations += r.violations;
            if r.contractive {
                summary.max_slack = summary.max_slack.max(r.max_slack);
                summary.min_slack = summary.min_slack.min(r.min_slack);
            }
        }
    }
    Ok(summary)
}

/// Stage 4: fit projections on aligned traces, compute residuals, Φ, both
/// scores, and the contraction diagnostics.
pub fn stage_score(
    root_trace: &ActivationTrace,
    com_trace: &ActivationTrace,
    snapshots: &BTreeMap<BlockId, StateSnapshots>,
    spec: &str,
    cfg: &RunConfig,
) -> Result<StabilityReport> {
    let stability_cfg = StabilityConfig {
        alpha: cfg.alpha,
        beta: cfg.beta,
        ..StabilityConfig::default()
    };
    let proj = fit_projections(root_trace, com_trace, snapshots, cfg.lambda)
        .map_err(|e| e.in_stage("score"))?;
    let residuals = compute_residuals(root_trace, com_trace, snapshots, &proj, stability_cfg.epsilon)
        .map_err(|e| e.in_stage("score"))?;
    let phis = build_phi(&proj, &residuals).map_err(|e| e.in_stage("score"))?;
    let s = stability_score(&phis, &stability_cfg).map_err(|e| e.in_stage("score"))?;
    let s_approx = stability_score_approx(&proj, &residuals, &stability_cfg)
        .map_err(|e| e.in_stage("score"))?;

    let mut blocks = BTreeMap::new();
    let mut rho = 0.0f64;
    for (id, bp) in &proj.blocks {
        rho = rho.max(sigma_max(&bp.h_com)?);
        for side in [Side::In, Side::Out] {
            rho = rho.max(sigma_max(bp.t_com(side))?);
            let res = &residuals.blocks[&(*id, side)];
            blocks.insert(
                format!("{id}.{}", side.as_str()),
                BlockScoreEntry {
                    sigma_trs: sigma_max(bp.t_trs(side))?,
                    sigma_com: sigma_max(bp.t_com(side))?,
                    grad_t_trs_mean_abs: mean_abs(&res.grad_t_trs),
                    grad_t_com_mean_abs: mean_abs(&res.grad_t_com),
                    grad_h_trs_mean_abs: mean_abs(&res.grad_h_trs),
                    grad_h_com_mean_abs: mean_abs(&res.grad_h_com),
                },
            );
        }
    }
    let iss = iss_from_fit(root_trace, com_trace, &proj).map_err(|e| e.in_stage("score"))?;
    Ok(StabilityReport {
        schema: REPORT_SCHEMA.into(),
        policy: spec.to_string(),
        selection_rule: cfg.selection.as_str().into(),
        lambda: cfg.lambda,
        alpha: cfg.alpha,
        beta: cfg.beta,
        blocks,
        totals: StabilityTotals {
            s,
            s_approx,
            rho,
            iss,
        },
    })
}

/// Full per-policy pass: factorize, capture, score, fine-tune, evaluate,
/// persist artifacts. Returns the ranking row.
pub fn policy_pass(
    root: &RootModel,
    root_trace: &ActivationTrace,
    spec: &str,
    cfg: &RunConfig,
) -> Result<(PolicyRow, StabilityReport)> {
    let paths = ArtifactPaths::new(&cfg.output_dir);
    let dir = paths.policy_dir(spec);
    std::fs::create_dir_all(&dir)?;

    let artifacts = stage_factorize(root, root_trace, spec, cfg)?;
    std::fs::write(
        dir.join("init_report.json"),
        serde_json::to_vec_pretty(&artifacts.init_report)?,
    )?;
    for (id, _) in artifacts.snapshots.iter() {
        if let Some(block) = artifacts.com.core.state_block(*id) {
            crate::groups::save_state_block(&dir.join("blocks").join(id.to_string()), &block)?;
        }
    }
    crate::netmodel::save_com(&dir.join("com"), &artifacts.com)?;

    let com_trace = capture_trace(&artifacts.com, cfg).map_err(|e| e.in_stage("capture"))?;
    com_trace.save(&dir.join("com_trace"))?;

    let stability = stage_score(root_trace, &com_trace, &artifacts.snapshots, spec, cfg)?;
    std::fs::write(
        dir.join("stability_report.json"),
        serde_json::to_vec_pretty(&stability)?,
    )?;

    let accuracy_before = eval_task(
        &artifacts.com,
        &cfg.task,
        cfg.eval_samples,
        crate::seeding::derive_seed(cfg.seed, "eval-before"),
    )
    .map_err(|e| e.in_stage("eval"))?;

    let finetuned = finetune_states(&artifacts.com, &cfg.task, cfg.finetune_steps, cfg.finetune_lr)
        .map_err(|e| e.in_stage("finetune"))?;
    crate::netmodel::save_com(&dir.join("com_finetuned"), &finetuned.model)?;
    let accuracy_after = eval_task(
        &finetuned.model,
        &cfg.task,
        cfg.eval_samples,
        crate::seeding::derive_seed(cfg.seed, "eval-after"),
    )
    .map_err(|e| e.in_stage("eval"))?;

    let row = PolicyRow {
        policy: spec.to_string(),
        s: stability.totals.s,
        s_approx: stability.totals.s_approx,
        ngc_params: artifacts.com.ngc_param_count(),
        replaced_dense_params: artifacts.com.replaced_dense_count(),
        accuracy_before,
        accuracy_after,
        rho: stability.totals.rho,
        iss_violations: stability.totals.iss.violations,
        iss_max_slack: stability.totals.iss.max_slack,
    };
    Ok((row, stability))
}

/// Concurrency cap: `NGC_THREADS` when set, otherwise 1 (single-threaded
/// by default so runs are easy to reason about; results are identical
/// either way).
pub fn thread_cap() -> usize {
    std::env::var("NGC_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Run the whole pipeline and write `report.json` / `report.csv`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineReport> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let paths = ArtifactPaths::new(&cfg.output_dir);

    let (root, root_accuracy) = stage_train_root(cfg)?;
    let root_trace = capture_trace(&root, cfg).map_err(|e| e.in_stage("capture"))?;
    root_trace.save(&paths.root_trace())?;

    let specs: Vec<String> = cfg
        .policies
        .iter()
        .map(|s| cfg.normalize_policy_spec(s))
        .collect();

    let cap = thread_cap().min(specs.len().max(1));
    let results: Vec<Result<(PolicyRow, StabilityReport)>> = if cap <= 1 {
        specs
            .iter()
            .map(|spec| policy_pass(&root, &root_trace, spec, cfg))
            .collect()
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<Result<(PolicyRow, StabilityReport)>>>> =
            specs.iter().map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..cap {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= specs.len() {
                        break;
                    }
                    let out = policy_pass(&root, &root_trace, &specs[i], cfg);
                    *slots[i].lock().unwrap() = Some(out);
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.into_inner().unwrap().expect("worker filled every slot"))
            .collect()
    };

    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        rows.push(r?.0);
    }

    // selection + ranking order
    let key = |row: &PolicyRow| match cfg.selection {
        SelectionCriterion::MinS => row.s,
        _ => row.s_approx,
    };
    let mut ranking = rows.clone();
    ranking.sort_by(|a, b| key(a).partial_cmp(&key(b)).unwrap());
    let selected = match cfg.selection {
        SelectionCriterion::ReportOnly => None,
        _ => ranking.first().map(|r| r.policy.clone()),
    };

    let neg_s_approx: Vec<f64> = rows.iter().map(|r| -r.s_approx).collect();
    let acc_after: Vec<f64> = rows.iter().map(|r| r.accuracy_after).collect();
    let spearman = crate::report::spearman(&neg_s_approx, &acc_after);

    let report = PipelineReport {
        schema: REPORT_SCHEMA.into(),
        root_accuracy,
        ranking,
        selected,
        selection_criterion: cfg.selection.as_str().into(),
        spearman_neg_s_approx_vs_accuracy: spearman,
        config_echo: serde_json::to_value(cfg)?,
    };
    crate::report::export_report(&report, &paths.report_stem(), ReportFormat::Json)?;
    crate::report::export_report(&report, &paths.report_stem(), ReportFormat::Csv)?;
    Ok(report)
}
