//! The `proxyformer` command-line verbs.
//!
//! Six subcommands cover the whole lifecycle: `gen-data`, `train`, `eval`,
//! `infer`, `gradcheck`, `flops`. Every verb is deterministic given its
//! config and inputs, and every produced artifact embeds the config hash.
//! Exit codes: 0 success, 1 runtime failure, 2 refusal or usage problem.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::backbone::{PAD_TOKEN, STRIDE_MULTIPLE, UNK_TOKEN};
use crate::cmie::{attention_flops, CostMode};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{module_label, Model};
use crate::numerics::gradcheck::{finite_diff_check, perturb_params, GradCheckReport};
use crate::numerics::tensor::ParamSet;
use crate::synthdata::{
    build_dataset, frames_from_bytes, generate_scene_for, load_index, load_sample,
    write_prediction, Difficulty, LoadedSample,
};
use crate::training::{
    batch_loss, downsample_masks_s4, evaluate_split, load_checkpoint, padded_extent,
    restore_params, train, BatchItem, TrainSample,
};

#[derive(Parser)]
#[command(
    name = "proxyformer",
    version,
    about = "Referring video object segmentation on a deterministic synthetic task"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset described by the config.
    #[command(name = "gen-data")]
    GenData {
        /// JSON run config; omitted fields fall back to defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Replace an existing non-empty dataset directory.
        #[arg(long)]
        overwrite: bool,
    },
    /// Train a model; writes checkpoints and a JSON-lines metric log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for checkpoints and metrics.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the configured dataset split.
    Eval {
        /// Checkpoint produced by `train`.
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the report JSON to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment one clip for one referring expression.
    Infer {
        /// Checkpoint produced by `train`.
        checkpoint: PathBuf,
        /// A frames.bin file or a sample directory containing one.
        frames: PathBuf,
        /// Referring expression, e.g. "the red circle".
        expression: String,
        /// Output directory for masks.bin and meta.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference every parameter through the total loss.
    Gradcheck {
        /// Tiny-dims config; defaults to the built-in gradcheck config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the attention cost table for full/decoupled/proxy modes.
    Flops {
        /// Frames.
        t: u64,
        /// Spatial tokens per frame.
        s: u64,
        /// Proxy queries.
        n: u64,
        /// Channel width.
        c: u64,
    },
}

/// Entry point used by the binary; returns the process exit code.
pub fn main() -> i32 {
    run_from(std::env::args_os())
}

/// Parses `args` and dispatches. Factored from [`main`] so tests can drive
/// the full surface in-process.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap renders help/version on stdout (exit 0) and genuine
            // usage errors on stderr (exit 2).
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config, overwrite } => cmd_gen_data(config.as_deref(), overwrite),
        Command::Train { config, out } => cmd_train(config.as_deref(), &out),
        Command::Eval {
            checkpoint,
            config,
            out,
        } => cmd_eval(&checkpoint, config.as_deref(), out.as_deref()),
        Command::Infer {
            checkpoint,
            frames,
            expression,
            out,
        } => cmd_infer(&checkpoint, &frames, &expression, &out),
        Command::Gradcheck { config } => cmd_gradcheck(config.as_deref()),
        Command::Flops { t, s, n, c } => cmd_flops(t, s, n, c),
    }
}

// ---------------------------------------------------------------------------
// Config plumbing.

fn load_config(path: Option<&std::path::Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| {
                Error::Usage(format!("cannot read config {}: {e}", p.display()))
            })?;
            RunConfig::from_json(&text)
        }
        None => Ok(RunConfig::default()),
    }
}

/// `PROXYFORMER_SEED` overrides the config seed for the verbs that consume
/// it (data generation, training, gradcheck). Eval and infer derive
/// everything from the checkpoint and dataset, so the override does not
/// apply there and cannot invalidate provenance hashes.
fn apply_seed_override(cfg: &mut RunConfig) -> Result<()> {
    if let Ok(v) = std::env::var("PROXYFORMER_SEED") {
        let seed: u64 = v.trim().parse().map_err(|_| {
            Error::Usage(format!(
                "PROXYFORMER_SEED must be an unsigned integer, got {v:?}"
            ))
        })?;
        cfg.train.seed = seed;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Verbs.

fn cmd_gen_data(config: Option<&std::path::Path>, overwrite: bool) -> Result<()> {
    let mut cfg = load_config(config)?;
    apply_seed_override(&mut cfg)?;
    cfg.validate()?;
    let summary = build_dataset(&cfg, overwrite)?;
    println!("dataset written to {}", cfg.data.path);
    println!("  train samples {}", summary.train_count);
    println!("  val samples   {}", summary.val_count);
    println!(
        "  sample seeds  {}..={}",
        summary.seed_range.0, summary.seed_range.1
    );
    println!("  checksum      {}", summary.checksum);
    println!("  config hash   {}", cfg.hash());
    Ok(())
}

fn cmd_train(config: Option<&std::path::Path>, out: &std::path::Path) -> Result<()> {
    let mut cfg = load_config(config)?;
    apply_seed_override(&mut cfg)?;
    let outcome = train(&cfg, out, &mut |rec| {
        println!(
            "epoch {:>3}  step {:>6}  train loss {:>9.4}  val J&F {:.4}",
            rec.epoch, rec.step, rec.train_loss, rec.report.j_and_f
        );
    })?;
    println!("finished after {} steps", outcome.steps);
    println!("  final checkpoint {}", outcome.final_checkpoint.display());
    println!("  metric log       {}", outcome.metrics_path.display());
    Ok(())
}

fn load_eval_split(cfg: &RunConfig) -> Result<Vec<LoadedSample>> {
    let root = PathBuf::from(&cfg.data.path);
    let index = load_index(&root)?;
    if index.canvas != cfg.data.canvas || index.t != cfg.data.t {
        return Err(Error::invalid(format!(
            "dataset at {} holds {}x{} clips of {} frames, config wants {}x{} of {}",
            root.display(),
            index.canvas,
            index.canvas,
            index.t,
            cfg.data.canvas,
            cfg.data.canvas,
            cfg.data.t
        )));
    }
    let entries = match cfg.eval.split.as_str() {
        "train" => &index.train,
        "val" => &index.val,
        other => {
            return Err(Error::Usage(format!(
                "eval.split must be \"train\" or \"val\", got {other:?}"
            )))
        }
    };
    entries.iter().map(|e| load_sample(&root, e)).collect()
}

fn cmd_eval(
    checkpoint: &std::path::Path,
    config: Option<&std::path::Path>,
    out: Option<&std::path::Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    cfg.validate()?;
    let ckpt = load_checkpoint(checkpoint)?;
    let hash = cfg.hash();
    if ckpt.config_hash != hash {
        return Err(Error::Refusal(format!(
            "checkpoint config hash {} does not match the active config hash {}; \
             evaluating across configs risks a silent shape mismatch",
            ckpt.config_hash, hash
        )));
    }
    let mut params = ParamSet::new();
    let model = Model::register(&mut params, &cfg)?;
    restore_params(&mut params, &ckpt)?;
    let samples = load_eval_split(&cfg)?;
    let report = evaluate_split(&model, &params, &samples, &cfg.eval.thresholds, &hash)?;
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(p) = out {
        fs::write(p, format!("{text}\n"))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct InferenceMeta {
    config_hash: String,
    expression: String,
    token_ids: Vec<usize>,
    selected_query: usize,
    /// Per-frame class probability of the selected query.
    scores: Vec<f64>,
    /// Per-frame (cx, cy, w, h), normalized.
    boxes: Vec<[f64; 4]>,
    mask_threshold: f64,
}

fn cmd_infer(
    checkpoint: &std::path::Path,
    frames: &std::path::Path,
    expression: &str,
    out: &std::path::Path,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let cfg = ckpt.config.clone();
    let mut params = ParamSet::new();
    let model = Model::register(&mut params, &cfg)?;
    restore_params(&mut params, &ckpt)?;

    let frames_path = if frames.is_dir() {
        frames.join("frames.bin")
    } else {
        frames.to_path_buf()
    };
    let bytes = fs::read(&frames_path).map_err(|e| {
        Error::Usage(format!("cannot read frames {}: {e}", frames_path.display()))
    })?;
    let clip = frames_from_bytes(&bytes, &frames_path)?;

    let token_ids = model.vocab.tokenize(expression)?;
    let known = token_ids
        .iter()
        .take_while(|&&id| id != PAD_TOKEN)
        .any(|&id| id != UNK_TOKEN);
    if !known {
        eprintln!(
            "warning: no word of {expression:?} is in the vocabulary; \
             proceeding with unknown tokens"
        );
    }
    let pred = model.predict(&params, &clip, &token_ids)?;
    let meta = InferenceMeta {
        config_hash: ckpt.config_hash.clone(),
        expression: expression.to_string(),
        token_ids,
        selected_query: pred.query,
        scores: pred.scores.clone(),
        boxes: pred.boxes.clone(),
        mask_threshold: 0.5,
    };
    write_prediction(out, &pred.masks, &serde_json::to_value(&meta)?)?;
    let shape = pred.masks.shape();
    println!(
        "selected query {} of {}; wrote {} frames of {}x{} masks to {}",
        pred.query,
        cfg.model.n,
        shape[0],
        shape[1],
        shape[2],
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Gradcheck.

pub const GRADCHECK_MAX_T: usize = 2;
pub const GRADCHECK_MAX_TOKENS: usize = 16;
pub const GRADCHECK_MAX_C: usize = 16;
pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-3;

/// Built-in tiny-dims config: 2 frames on a 48x48 canvas (a 3x3 token
/// grid), 2 proxies, width 8, 2 encoder stages.
pub fn gradcheck_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.c = 8;
    cfg.model.k = 2;
    cfg.model.n = 2;
    cfg.model.heads = 2;
    cfg.model.c_seg = 4;
    cfg.data.canvas = 48;
    cfg.data.t = 2;
    cfg.train.omega = 2;
    cfg.train.batch = 2;
    cfg
}

/// Finite-difference report plus per-module aggregation.
#[derive(Debug)]
pub struct GradCheckSummary {
    pub report: GradCheckReport,
    /// (module label, worst relative error), first-seen order.
    pub modules: Vec<(String, f64)>,
}

/// Checks every parameter's gradient through the full training objective
/// on a fixed two-sample batch.
///
/// The check runs at a seeded noise-perturbed parameter point: at the
/// exact initialization the zeroed output projections silence most
/// gradient paths and the contrastive term vanishes identically, so an
/// unperturbed sweep would certify nothing.
pub fn run_gradcheck(config: &RunConfig) -> Result<GradCheckSummary> {
    config.validate()?;
    let grid = padded_extent(config.data.canvas) / STRIDE_MULTIPLE;
    let tokens = grid * grid;
    if config.data.t > GRADCHECK_MAX_T
        || tokens > GRADCHECK_MAX_TOKENS
        || config.model.c > GRADCHECK_MAX_C
    {
        return Err(Error::Refusal(format!(
            "gradcheck needs tiny dims (T <= {GRADCHECK_MAX_T}, token grid <= \
             {GRADCHECK_MAX_TOKENS}, C <= {GRADCHECK_MAX_C}); got T={}, tokens={tokens}, C={}. \
             Finite-differencing anything larger is intractable",
            config.data.t, config.model.c
        )));
    }
    let mut params = ParamSet::new();
    let model = Model::register(&mut params, config)?;
    perturb_params(&mut params, config.train.seed ^ 0x6a09_e667_f3bc_c908, 0.05);

    let t = config.data.t;
    let canvas = config.data.canvas;
    let hp = padded_extent(canvas);
    let samples: Vec<TrainSample> = [11u64, 23]
        .iter()
        .map(|&seed| {
            let scene = generate_scene_for(seed, Difficulty::Easy, t, canvas);
            let s = crate::synthdata::render(&scene, t, canvas, canvas)?;
            Ok(TrainSample {
                masks4: downsample_masks_s4(&s.gt.masks, hp, hp)?,
                frames: s.frames,
                token_ids: s.token_ids,
                gt: s.gt,
            })
        })
        .collect::<Result<_>>()?;
    let items: Vec<BatchItem> = samples.iter().map(|s| s.item()).collect();
    let weights = config.loss.clone();
    let report = finite_diff_check(&mut params, GRADCHECK_STEP, GRADCHECK_TOL, |ps, g| {
        batch_loss(g, ps, &model, &items, &weights).map(|nodes| nodes.total)
    })?;

    let mut modules: Vec<(String, f64)> = Vec::new();
    for (name, err) in &report.per_param {
        let label = module_label(name).to_string();
        match modules.iter_mut().find(|(l, _)| *l == label) {
            Some((_, worst)) => *worst = worst.max(*err),
            None => modules.push((label, *err)),
        }
    }
    Ok(GradCheckSummary { report, modules })
}

/// Renders the summary and converts a failed sweep into an error so the
/// process exits nonzero.
pub fn gradcheck_verdict(summary: &GradCheckSummary) -> Result<()> {
    println!(
        "gradcheck: {} partial derivatives checked (step {GRADCHECK_STEP:e}, \
         tolerance {GRADCHECK_TOL:e})",
        summary.report.checked
    );
    println!("worst relative error per module:");
    for (label, worst) in &summary.modules {
        println!("  {label:<10} {worst:.3e}");
    }
    println!("per-parameter detail:");
    for (name, worst) in &summary.report.per_param {
        println!("  {name:<24} {worst:.3e}");
    }
    if summary.report.passed() {
        println!("PASS: all partials within tolerance");
        Ok(())
    } else {
        let worst = summary
            .report
            .worst_entry
            .as_ref()
            .map(|e| format!("{} [{}]: analytic {:.6e} vs numeric {:.6e}", e.param, e.index, e.analytic, e.numeric))
            .unwrap_or_default();
        Err(Error::Oracle(format!(
            "gradcheck: {} of {} partials exceeded tolerance; worst {worst}",
            summary.report.failures, summary.report.checked
        )))
    }
}

fn cmd_gradcheck(config: Option<&std::path::Path>) -> Result<()> {
    let mut cfg = match config {
        Some(_) => load_config(config)?,
        None => gradcheck_config(),
    };
    apply_seed_override(&mut cfg)?;
    let summary = run_gradcheck(&cfg)?;
    gradcheck_verdict(&summary)
}

// ---------------------------------------------------------------------------
// Flops.

fn cmd_flops(t: u64, s: u64, n: u64, c: u64) -> Result<()> {
    for (name, v) in [("T", t), ("S", s), ("N", n), ("C", c)] {
        if v == 0 {
            return Err(Error::Usage(format!("{name} must be positive, got 0")));
        }
    }
    let (t, s, n, c) = (t as usize, s as usize, n as usize, c as usize);
    let full = attention_flops(t, s, n, c, CostMode::Full)?;
    let dec = attention_flops(t, s, n, c, CostMode::Decoupled)?;
    let proxy = attention_flops(t, s, n, c, CostMode::Proxy)?;
    println!("attention MACs at T={t}, S={s}, N={n}, C={c}");
    println!(
        "{:<11} {:>20} {:>20} {:>20}",
        "mode", "score+mix", "projections", "total"
    );
    for (name, cost) in [("full", full), ("decoupled", dec), ("proxy", proxy)] {
        println!(
            "{:<11} {:>20} {:>20} {:>20}",
            name,
            cost.score_mix,
            cost.projections,
            cost.total()
        );
    }
    let ratio = |a: u128, b: u128| a as f64 / b as f64;
    println!(
        "score-cost ratios: decoupled/full {:.6e}, proxy/full {:.6e}",
        ratio(dec.score_mix, full.score_mix),
        ratio(proxy.score_mix, full.score_mix)
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_separate_caller_problems_from_runtime_failures() {
        assert_eq!(Error::Usage("x".into()).exit_code(), 2);
        assert_eq!(Error::Refusal("x".into()).exit_code(), 2);
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::Oracle("x".into()).exit_code(), 1);
        assert_eq!(Error::invalid("x").exit_code(), 1);
        assert_eq!(Error::Format("x".into()).exit_code(), 1);
    }

    #[test]
    fn gradcheck_refuses_dims_beyond_the_caps() {
        // The desk-scale default is far past every cap.
        let err = run_gradcheck(&RunConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Refusal(_)), "{err}");
        let msg = format!("{err}");
        assert!(msg.contains("T <= 2"), "{msg}");
        // One dim over is enough.
        let mut cfg = gradcheck_config();
        cfg.model.c = 20;
        let err = run_gradcheck(&cfg).unwrap_err();
        assert!(matches!(err, Error::Refusal(_)), "{err}");
    }

    #[test]
    fn the_builtin_gradcheck_config_is_within_caps_and_valid() {
        let cfg = gradcheck_config();
        cfg.validate().unwrap();
        assert!(cfg.data.t <= GRADCHECK_MAX_T);
        let grid = padded_extent(cfg.data.canvas) / STRIDE_MULTIPLE;
        assert!(grid * grid <= GRADCHECK_MAX_TOKENS);
        assert!(cfg.model.c <= GRADCHECK_MAX_C);
    }

    #[test]
    fn a_failed_sweep_maps_to_a_runtime_error() {
        let summary = GradCheckSummary {
            report: GradCheckReport {
                tol: GRADCHECK_TOL,
                checked: 10,
                failures: 3,
                worst_entry: None,
                per_param: vec![("backbone.conv1.w".into(), 0.5)],
            },
            modules: vec![("backbone".into(), 0.5)],
        };
        let err = gradcheck_verdict(&summary).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn flops_rejects_zero_arguments() {
        assert!(matches!(cmd_flops(0, 1, 1, 1), Err(Error::Usage(_))));
        assert!(matches!(cmd_flops(8, 400, 5, 0), Err(Error::Usage(_))));
        cmd_flops(8, 400, 5, 256).unwrap();
    }

    #[test]
    fn config_loading_maps_problems_to_usage_errors() {
        let missing = load_config(Some(std::path::Path::new("/nonexistent/cfg.json")));
        assert!(matches!(missing, Err(Error::Usage(_))));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.json");
        fs::write(&p, "{\"model\": {").unwrap();
        let err = load_config(Some(&p)).unwrap_err();
        assert!(matches!(err, Error::Usage(_)), "{err}");
        let msg = format!("{err}");
        assert!(msg.contains("byte"), "offset missing from: {msg}");
    }
}
