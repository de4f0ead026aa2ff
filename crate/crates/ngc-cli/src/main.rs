//! `ngc` — train a toy transformer, factorize it under communication
//! policies, score the coupled dynamics, and verify the numerical claims.
//!
//! Stages read and write a shared artifact layout under `--out`, so each
//! subcommand can resume from the previous stage's outputs; `run` chains
//! them all. `NGC_THREADS` caps per-policy fan-out.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ngc_core::netmodel::{self, eval_task, finetune_states, ActivationTrace, TaskSpec};
use ngc_core::pipeline::{
    capture_trace, run_pipeline, snapshots_from_models, stage_factorize, stage_score,
    stage_train_root, ArtifactPaths, RunConfig, SelectionCriterion,
};
use ngc_core::policy::{enumerate_policies, render_policy, PolicyFamily};
use ngc_core::verify::{verify_suite, VerifyLevel};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "ngc", version, about = "Neuronal group communication pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags mirroring the run-config fields; unset flags fall back to the
/// config file (when given) and then to defaults.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON run config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output/artifact directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Default compression ratio for policies without `@<ratio>`.
    #[arg(long)]
    ratio: Option<f64>,
    /// Blend weight of the root route in init and dynamics.
    #[arg(long)]
    lambda: Option<f64>,
    /// Residual weight α in the approximate stability score.
    #[arg(long)]
    alpha: Option<f64>,
    /// Residual weight β in the approximate stability score.
    #[arg(long)]
    beta: Option<f64>,
    /// Master seed for capture, init probes, and evaluation.
    #[arg(long)]
    seed: Option<u64>,
    /// Policy spec strings (repeatable); `hybrid` expands to the fixed bank.
    #[arg(long = "policy")]
    policies: Vec<String>,
    /// Task spec JSON file ({"kind": "copy"|"modadd", ...}).
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long)]
    train_steps: Option<usize>,
    #[arg(long)]
    finetune_steps: Option<usize>,
    #[arg(long)]
    finetune_lr: Option<f64>,
    #[arg(long)]
    capture_tokens: Option<usize>,
    /// Selection criterion: min-s-approx, min-s, or report-only.
    #[arg(long)]
    criterion: Option<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_json_file(path)
                .with_context(|| format!("reading config {}", path.display()))?,
            None => RunConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(v) = self.ratio {
            cfg.ratio = v;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
            cfg.model.seed = v;
        }
        if !self.policies.is_empty() {
            cfg.policies = self
                .policies
                .iter()
                .map(|p| resolve_policy_arg(p, &cfg))
                .collect::<Result<Vec<_>>>()?;
        }
        if let Some(path) = &self.task {
            cfg.task = TaskSpec::from_json_file(path)?;
        }
        if let Some(v) = self.train_steps {
            cfg.train_steps = v;
        }
        if let Some(v) = self.finetune_steps {
            cfg.finetune_steps = v;
        }
        if let Some(v) = self.finetune_lr {
            cfg.finetune_lr = v;
        }
        if let Some(v) = self.capture_tokens {
            cfg.capture_tokens = v;
        }
        if let Some(c) = &self.criterion {
            cfg.selection = match c.as_str() {
                "min-s-approx" => SelectionCriterion::MinSApprox,
                "min-s" => SelectionCriterion::MinS,
                "report-only" => SelectionCriterion::ReportOnly,
                other => bail!("unknown criterion '{other}'"),
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the root model and save its checkpoint.
    TrainRoot(ConfigArgs),
    /// Run capture sequences through a checkpoint and save the trace.
    Capture {
        #[command(flatten)]
        config: ConfigArgs,
        /// Model checkpoint directory (root or com; auto-detected).
        #[arg(long)]
        model: PathBuf,
        /// Trace output directory.
        #[arg(long)]
        trace_out: PathBuf,
    },
    /// Factorize and initialize state blocks for one policy.
    Factorize {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Enumerate a policy family.
    Policies {
        #[command(subcommand)]
        action: PoliciesAction,
    },
    /// Score a com checkpoint against the root on captured traces.
    Score {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Print the selected policy from existing stability reports.
    Select {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Fine-tune the states of a com checkpoint.
    Finetune {
        #[command(flatten)]
        config: ConfigArgs,
        /// Com checkpoint to fine-tune (defaults to the policy's artifact).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the task.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
    },
    /// Full pipeline: train, capture, factorize, score, select, finetune,
    /// evaluate, report.
    Run(ConfigArgs),
    /// Run the numbered verification suite.
    Verify {
        /// fast or full.
        #[arg(long, default_value = "fast")]
        level: String,
    },
}

#[derive(Subcommand)]
enum PoliciesAction {
    Enumerate {
        #[command(flatten)]
        config: ConfigArgs,
        /// none, adjacent-same-kind, adjacent-cross-kind, or hybrid-bank.
        #[arg(long, default_value = "adjacent-same-kind")]
        family: String,
    },
}

/// Load a checkpoint directory as either model kind.
enum AnyModel {
    Root(netmodel::RootModel),
    Com(netmodel::ComModel),
}

fn load_any_model(dir: &Path) -> Result<AnyModel> {
    match netmodel::load_com(dir) {
        Ok(com) => Ok(AnyModel::Com(com)),
        Err(_) => Ok(AnyModel::Root(
            netmodel::load_root(dir).with_context(|| format!("loading model {}", dir.display()))?,
        )),
    }
}

/// A `--policy` value is either a spec string or a path to its JSON mirror.
fn resolve_policy_arg(arg: &str, cfg: &RunConfig) -> Result<String> {
    let path = Path::new(arg);
    if arg.ends_with(".json") && path.exists() {
        let policy: ngc_core::policy::Policy = serde_json::from_slice(
            &std::fs::read(path).with_context(|| format!("reading policy {}", path.display()))?,
        )?;
        let shape = cfg.model.shape();
        policy.validate(&shape).map_err(anyhow::Error::from)?;
        return Ok(render_policy(&policy, &shape));
    }
    Ok(arg.to_string())
}

fn single_policy(cfg: &RunConfig) -> Result<String> {
    if cfg.policies.len() != 1 {
        bail!(
            "this stage needs exactly one --policy, got {}",
            cfg.policies.len()
        );
    }
    Ok(cfg.normalize_policy_spec(&cfg.policies[0]))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::TrainRoot(args) => {
            let cfg = args.build()?;
            let (_, accuracy) = stage_train_root(&cfg)?;
            println!(
                "trained root for {} steps: accuracy {accuracy:.4} -> {}",
                cfg.train_steps,
                ArtifactPaths::new(&cfg.output_dir).root_model().display()
            );
        }
        Command::Capture {
            config,
            model,
            trace_out,
        } => {
            let cfg = config.build()?;
            let trace = match load_any_model(&model)? {
                AnyModel::Root(m) => capture_trace(&m, &cfg)?,
                AnyModel::Com(m) => capture_trace(&m, &cfg)?,
            };
            trace.save(&trace_out)?;
            println!(
                "captured {} tokens over {} blocks -> {}",
                trace.token_count(),
                trace.blocks.len(),
                trace_out.display()
            );
        }
        Command::Factorize { config } => {
            let cfg = config.build()?;
            let spec = single_policy(&cfg)?;
            let paths = ArtifactPaths::new(&cfg.output_dir);
            let root = netmodel::load_root(&paths.root_model())
                .context("root checkpoint missing; run train-root first")?;
            let root_trace = ActivationTrace::load(&paths.root_trace())
                .context("root trace missing; run capture first")?;
            let artifacts = stage_factorize(&root, &root_trace, &spec, &cfg)?;
            let dir = paths.policy_dir(&spec);
            std::fs::create_dir_all(&dir)?;
            std::fs::write(
                dir.join("init_report.json"),
                serde_json::to_vec_pretty(&artifacts.init_report)?,
            )?;
            netmodel::save_com(&dir.join("com"), &artifacts.com)?;
            println!(
                "factorized {} blocks ({} ngc params / {} dense) -> {}",
                artifacts.policy.selection.len(),
                artifacts.com.ngc_param_count(),
                artifacts.com.replaced_dense_count(),
                dir.join("com").display()
            );
        }
        Command::Policies { action } => match action {
            PoliciesAction::Enumerate { config, family } => {
                let cfg = config.build()?;
                let family = match family.as_str() {
                    "none" => PolicyFamily::None,
                    "adjacent-same-kind" => PolicyFamily::AdjacentSameKind,
                    "adjacent-cross-kind" => PolicyFamily::AdjacentCrossKind,
                    "hybrid-bank" => PolicyFamily::HybridBank,
                    other => bail!("unknown family '{other}'"),
                };
                let shape = cfg.model.shape();
                for p in enumerate_policies(&shape, family, cfg.ratio) {
                    println!("{}", render_policy(&p, &shape));
                }
            }
        },
        Command::Score { config } => {
            let cfg = config.build()?;
            let spec = single_policy(&cfg)?;
            let paths = ArtifactPaths::new(&cfg.output_dir);
            let root = netmodel::load_root(&paths.root_model())?;
            let root_trace = ActivationTrace::load(&paths.root_trace())?;
            let dir = paths.policy_dir(&spec);
            let com = netmodel::load_com(&dir.join("com"))?;
            let com_trace = match ActivationTrace::load(&dir.join("com_trace")) {
                Ok(t) => t,
                Err(_) => {
                    let t = capture_trace(&com, &cfg)?;
                    t.save(&dir.join("com_trace"))?;
                    t
                }
            };
            let snapshots = snapshots_from_models(&root, &com)?;
            let report = stage_score(&root_trace, &com_trace, &snapshots, &spec, &cfg)?;
            std::fs::write(
                dir.join("stability_report.json"),
                serde_json::to_vec_pretty(&report)?,
            )?;
            println!(
                "{spec}: S = {:.6}, S_approx = {:.6}, rho = {:.4} -> {}",
                report.totals.s,
                report.totals.s_approx,
                report.totals.rho,
                dir.join("stability_report.json").display()
            );
        }
        Command::Select { config } => {
            let cfg = config.build()?;
            let paths = ArtifactPaths::new(&cfg.output_dir);
            let mut best: Option<(String, f64)> = None;
            for spec in &cfg.policies {
                let spec = cfg.normalize_policy_spec(spec);
                let path = paths.policy_dir(&spec).join("stability_report.json");
                let report: ngc_core::pipeline::StabilityReport =
                    serde_json::from_slice(&std::fs::read(&path).with_context(|| {
                        format!("missing stability report {}; run score first", path.display())
                    })?)?;
                let key = match cfg.selection {
                    SelectionCriterion::MinS => report.totals.s,
                    _ => report.totals.s_approx,
                };
                println!(
                    "{spec}: S = {:.6}, S_approx = {:.6}",
                    report.totals.s, report.totals.s_approx
                );
                if best.as_ref().is_none_or(|(_, k)| key < *k) {
                    best = Some((spec.clone(), key));
                }
            }
            match (cfg.selection, best) {
                (SelectionCriterion::ReportOnly, _) => println!("criterion report-only: no selection"),
                (_, Some((spec, _))) => println!("selected: {spec}"),
                _ => bail!("no policies scored"),
            }
        }
        Command::Finetune { config, model } => {
            let cfg = config.build()?;
            let spec = single_policy(&cfg)?;
            let paths = ArtifactPaths::new(&cfg.output_dir);
            let dir = paths.policy_dir(&spec);
            let com_dir = model.unwrap_or_else(|| dir.join("com"));
            let com = netmodel::load_com(&com_dir)?;
            let out = finetune_states(&com, &cfg.task, cfg.finetune_steps, cfg.finetune_lr)?;
            netmodel::save_com(&dir.join("com_finetuned"), &out.model)?;
            let first = out.losses.first().copied().unwrap_or(0.0);
            let last = out.losses.last().copied().unwrap_or(0.0);
            println!(
                "finetuned {} steps: loss {first:.4} -> {last:.4}, saved {}",
                cfg.finetune_steps,
                dir.join("com_finetuned").display()
            );
        }
        Command::Eval {
            config,
            model,
            samples,
        } => {
            let cfg = config.build()?;
            let seed = ngc_core::seeding::derive_seed(cfg.seed, "cli-eval");
            let accuracy = match load_any_model(&model)? {
                AnyModel::Root(m) => eval_task(&m, &cfg.task, samples, seed)?,
                AnyModel::Com(m) => eval_task(&m, &cfg.task, samples, seed)?,
            };
            println!("accuracy over {samples} samples: {accuracy:.4}");
        }
        Command::Run(args) => {
            let cfg = args.build()?;
            let report = run_pipeline(&cfg)?;
            println!("root accuracy: {:.4}", report.root_accuracy);
            println!(
                "{:<40} {:>10} {:>10} {:>8} {:>8} {:>8}",
                "policy", "S", "S_approx", "params", "acc0", "acc1"
            );
            for row in &report.ranking {
                println!(
                    "{:<40} {:>10.4} {:>10.4} {:>8} {:>8.4} {:>8.4}",
                    row.policy,
                    row.s,
                    row.s_approx,
                    row.ngc_params,
                    row.accuracy_before,
                    row.accuracy_after
                );
            }
            println!(
                "spearman(-S_approx, accuracy): {:.4}",
                report.spearman_neg_s_approx_vs_accuracy
            );
            if let Some(sel) = &report.selected {
                println!("selected ({}): {sel}", report.selection_criterion);
            }
            println!(
                "report: {}",
                ArtifactPaths::new(&cfg.output_dir)
                    .report_stem()
                    .with_extension("json")
                    .display()
            );
        }
        Command::Verify { level } => {
            let level = match level.as_str() {
                "fast" => VerifyLevel::Fast,
                "full" => VerifyLevel::Full,
                other => bail!("unknown level '{other}' (use fast or full)"),
            };
            let report = verify_suite(level);
            print!("{}", report.render_lines());
            if !report.all_passed {
                std::process::exit(1);
            }
        }
    }
    Ok(())
}
