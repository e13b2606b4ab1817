//! End-to-end drives of the compiled `proxyformer` binary: every verb, the
//! exit-code contract, and the on-disk artifact formats.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use proxyformer::config::RunConfig;
use proxyformer::synthdata::{load_index, masks_from_bytes};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_proxyformer")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env_remove("PROXYFORMER_SEED")
        .output()
        .expect("binary runs")
}

fn run_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(bin())
        .args(args)
        .env(key, value)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("no signal")
}

fn tiny_config(dir: &Path) -> (RunConfig, PathBuf) {
    let mut cfg = RunConfig::default();
    cfg.model.c = 8;
    cfg.model.k = 1;
    cfg.model.n = 2;
    cfg.model.heads = 2;
    cfg.model.c_seg = 4;
    cfg.train.omega = 2;
    cfg.train.batch = 2;
    cfg.train.steps = 4;
    cfg.train.lr = 1e-3;
    cfg.data.t = 2;
    cfg.data.canvas = 32;
    cfg.data.train_count = 6;
    cfg.data.val_count = 3;
    cfg.data.path = dir.join("data").to_string_lossy().into_owned();
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    (cfg, path)
}

#[test]
fn the_full_lifecycle_runs_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, cfg_path) = tiny_config(dir.path());
    let cfgs = cfg_path.to_str().unwrap();

    // gen-data: summary on stdout, refusal on rerun, overwrite recovers.
    let o = run(&["gen-data", "--config", cfgs]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let first = stdout(&o);
    assert!(first.contains("train samples 6"), "{first}");
    assert!(first.contains("checksum"), "{first}");
    let o = run(&["gen-data", "--config", cfgs]);
    assert_eq!(code(&o), 2, "rerun without --overwrite must refuse");
    let o = run(&["gen-data", "--config", cfgs, "--overwrite"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o), first, "regeneration must be byte-identical");

    // train: per-epoch lines, artifacts on disk.
    let out_dir = dir.path().join("run");
    let o = run(&["train", "--config", cfgs, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = stdout(&o);
    assert!(log.contains("epoch"), "{log}");
    assert!(log.contains("J&F"), "{log}");
    let ckpt = out_dir.join("checkpoint.bin");
    assert!(ckpt.exists());
    assert!(out_dir.join("metrics.jsonl").exists());

    // eval: valid report JSON, deterministic bytes, optional file output.
    let ckpts = ckpt.to_str().unwrap();
    let report_path = dir.path().join("report.json");
    let o = run(&[
        "eval",
        ckpts,
        "--config",
        cfgs,
        "--out",
        report_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(report.get("j_and_f").is_some());
    assert_eq!(report["config_hash"].as_str().unwrap(), cfg.hash());
    let o2 = run(&["eval", ckpts, "--config", cfgs]);
    assert_eq!(stdout(&o2), stdout(&o), "eval must be deterministic");
    let on_disk: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(on_disk, report);

    // infer: masks in the dataset format, meta with the selected query.
    let index = load_index(Path::new(&cfg.data.path)).unwrap();
    let sample_dir = Path::new(&cfg.data.path).join(&index.val[0].path);
    let infer_out = dir.path().join("pred");
    let o = run(&[
        "infer",
        ckpts,
        sample_dir.to_str().unwrap(),
        "the red circle",
        "--out",
        infer_out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mask_bytes = fs::read(infer_out.join("masks.bin")).unwrap();
    let masks = masks_from_bytes(&mask_bytes, &infer_out.join("masks.bin")).unwrap();
    assert_eq!(masks.shape(), &[2, 32, 32], "masks must match the input clip");
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(infer_out.join("meta.json")).unwrap()).unwrap();
    assert!(meta["selected_query"].as_u64().unwrap() < 2);
    assert_eq!(meta["scores"].as_array().unwrap().len(), 2);
    assert_eq!(meta["config_hash"].as_str().unwrap(), cfg.hash());

    // infer again: deterministic given checkpoint + input.
    let infer_out2 = dir.path().join("pred2");
    let o = run(&[
        "infer",
        ckpts,
        sample_dir.to_str().unwrap(),
        "the red circle",
        "--out",
        infer_out2.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read(infer_out.join("masks.bin")).unwrap(),
        fs::read(infer_out2.join("masks.bin")).unwrap()
    );

    // Out-of-vocabulary expression: warns on stderr, still succeeds.
    let o = run(&[
        "infer",
        ckpts,
        sample_dir.to_str().unwrap(),
        "quantum flux capacitor",
        "--out",
        dir.path().join("pred3").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("warning"), "{}", stderr(&o));
    assert!(stderr(&o).contains("vocabulary"), "{}", stderr(&o));
}

#[test]
fn eval_refuses_a_checkpoint_from_another_config() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, cfg_path) = tiny_config(dir.path());
    let o = run(&["gen-data", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out_dir = dir.path().join("run");
    let mut zero_cfg = cfg.clone();
    zero_cfg.train.steps = 0;
    let zero_path = dir.path().join("zero.json");
    fs::write(&zero_path, serde_json::to_string(&zero_cfg).unwrap()).unwrap();
    let o = run(&[
        "train",
        "--config",
        zero_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    // Same data, different model width: the hashes must disagree.
    let mut other = zero_cfg.clone();
    other.model.n = 3;
    let other_path = dir.path().join("other.json");
    fs::write(&other_path, serde_json::to_string(&other).unwrap()).unwrap();
    let o = run(&[
        "eval",
        out_dir.join("checkpoint.bin").to_str().unwrap(),
        "--config",
        other_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2, "hash mismatch must refuse, got {}", stderr(&o));
    let msg = stderr(&o);
    assert!(msg.contains(&zero_cfg.hash()), "{msg}");
    assert!(msg.contains(&other.hash()), "{msg}");
}

#[test]
fn malformed_config_json_is_a_usage_error_with_a_byte_offset() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("broken.json");
    fs::write(&p, "{\"model\": {\"c\": }}").unwrap();
    let o = run(&["gen-data", "--config", p.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let msg = stderr(&o);
    assert!(msg.contains("byte"), "{msg}");
}

#[test]
fn invalid_config_fields_name_the_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, _) = tiny_config(dir.path());
    cfg.model.heads = 3; // does not divide c = 8
    let p = dir.path().join("bad_field.json");
    fs::write(&p, serde_json::to_string(&cfg).unwrap()).unwrap();
    let o = run(&["gen-data", "--config", p.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("model.heads"), "{}", stderr(&o));
}

#[test]
fn the_seed_env_var_overrides_the_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg_path) = tiny_config(dir.path());
    let cfgs = cfg_path.to_str().unwrap();
    let o = run(&["gen-data", "--config", cfgs]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let base = stdout(&o);

    let o = run_env(
        &["gen-data", "--config", cfgs, "--overwrite"],
        "PROXYFORMER_SEED",
        "7",
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let reseeded = stdout(&o);
    assert_ne!(base, reseeded, "a different seed must change the data");
    assert!(reseeded.contains("sample seeds  7..="), "{reseeded}");

    let o = run_env(
        &["gen-data", "--config", cfgs, "--overwrite"],
        "PROXYFORMER_SEED",
        "not-a-number",
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("PROXYFORMER_SEED"), "{}", stderr(&o));
}

#[test]
fn train_names_the_missing_dataset_path() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, _) = tiny_config(dir.path());
    cfg.data.path = dir.path().join("absent").to_string_lossy().into_owned();
    let p = dir.path().join("cfg.json");
    fs::write(&p, serde_json::to_string(&cfg).unwrap()).unwrap();
    let o = run(&[
        "train",
        "--config",
        p.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1, "missing data is a runtime failure");
    assert!(stderr(&o).contains("absent"), "{}", stderr(&o));
}

#[test]
fn flops_prints_the_three_mode_table() {
    let o = run(&["flops", "8", "400", "5", "256"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    for needle in ["full", "decoupled", "proxy", "score-cost ratios"] {
        assert!(out.contains(needle), "{out}");
    }
    // Degenerate single-token case: the branches coincide exactly.
    let o = run(&["flops", "1", "1", "5", "256"]);
    assert!(stdout(&o).contains("decoupled/full 1.000000e0"), "{}", stdout(&o));

    let o = run(&["flops", "0", "400", "5", "256"]);
    assert_eq!(code(&o), 2, "zero counts are a usage error");
    let o = run(&["flops", "8", "400", "5"]);
    assert_eq!(code(&o), 2, "missing argument is a usage error");
    let o = run(&["flops", "8", "400", "5", "-3"]);
    assert_eq!(code(&o), 2, "negative counts are a usage error");
}

#[test]
fn gradcheck_refuses_desk_scale_dims_from_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("desk.json");
    fs::write(&p, serde_json::to_string(&RunConfig::default()).unwrap()).unwrap();
    let o = run(&["gradcheck", "--config", p.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("tiny dims"), "{}", stderr(&o));
}

#[test]
fn unknown_verbs_and_missing_flags_exit_two() {
    let o = run(&["segment-everything"]);
    assert_eq!(code(&o), 2);
    let o = run(&["train"]); // --out is required
    assert_eq!(code(&o), 2);
    let o = run(&["--help"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("gen-data"));
}
