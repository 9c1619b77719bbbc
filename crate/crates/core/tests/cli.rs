use std::path::Path;
use std::process::{Command, Output};

fn exfusion(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exfusion"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn config(variant: &str, steps: u64, log_interval: u64) -> String {
    format!(
        "[model]\nvariant = {variant}\ndepth = 2\ndim = 16\nheads = 2\nexpansion = 2\nvocab_size = 32\n\
         max_seq_len = 8\nnum_experts = 4\nmomentum = 0.95\n\
         [train]\ntotal_steps = {steps}\nwarmup_steps = {warmup}\nlr = 0.003\nlog_interval = {log_interval}\nckpt_interval = 10\n\
         [task]\nseq_len = 8\nbatch_size = 8\ntrain_size = 128\nval_size = 256\n",
        warmup = steps.min(2)
    )
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn metric(out: &str, key: &str) -> f64 {
    out.split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {out}"))
        .parse()
        .unwrap()
}

#[test]
fn train_writes_artifacts_and_one_row_per_interval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "mb.ini", &config("exfusion_mb", 20, 5));
    let o = exfusion(&["train", "--config", &cfg, "--out", "run", "--deterministic"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run");
    for f in ["metrics.csv", "timing.csv", "resolved_config.ini", "ckpt_000000.bin", "ckpt_000010.bin", "ckpt_000020.bin"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 20 / 5 + 1);
    assert!(metrics.starts_with("step,epoch,lr,train_loss,val_metric,step_ms\n"));
    assert!(!metrics.contains('\r'));

    let again = exfusion(&["train", "--config", &cfg, "--out", "run"], dir.path());
    assert_eq!(again.status.code(), Some(1));
    assert!(stderr(&again).contains("--force"));
    let forced = exfusion(&["train", "--config", &cfg, "--out", "run", "--force", "--deterministic"], dir.path());
    assert!(forced.status.success());
    assert_eq!(std::fs::read_to_string(run.join("metrics.csv")).unwrap(), metrics);
}

#[test]
fn invalid_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let bad = config("exfusion_sw", 4, 2).replace("num_experts = 4", "num_experts = 0");
    let cfg = write_config(dir.path(), "bad.ini", &bad);
    let o = exfusion(&["train", "--config", &cfg, "--out", "run"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("num_experts"));
    assert!(!dir.path().join("run").exists());

    let unknown = write_config(dir.path(), "unknown.ini", &config("exfusion_sw", 4, 2).replace("[task]", "[task]\ncolour = red"));
    let o = exfusion(&["train", "--config", &unknown], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("colour"));

    let o = exfusion(&["train", "--dtype", "f16"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn static_variant_trains_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sw.ini", &config("exfusion_sw", 6, 3));
    let o = exfusion(&["train", "--config", &cfg, "--out", "sw", "--dtype", "f64", "--seed", "9"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let acc = metric(&stdout(&o), "accuracy");
    assert!((0.0..=1.0).contains(&acc));
    let resolved = std::fs::read_to_string(dir.path().join("sw/resolved_config.ini")).unwrap();
    assert!(resolved.contains("seed = 9"));
    assert!(resolved.contains("dtype = f64"));
}

#[test]
fn export_collapses_and_eval_agrees() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "mb.ini", &config("exfusion_mb", 10, 5));
    assert!(exfusion(&["train", "--config", &cfg, "--out", "run", "--deterministic"], dir.path()).status.success());

    let o = exfusion(&["export", "--ckpt", "run/ckpt_000010.bin", "--out", "dense.bin"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(metric(&out, "max_logit_deviation") < 1e-5);
    assert_eq!(metric(&out, "exported"), metric(&out, "dense_baseline"));
    assert!(metric(&out, "source") > metric(&out, "exported"));
    let size = |p: &str| std::fs::metadata(dir.path().join(p)).unwrap().len();
    assert!(size("dense.bin") < size("run/ckpt_000010.bin"));

    let source = exfusion(&["eval", "--ckpt", "run/ckpt_000010.bin"], dir.path());
    let twice = exfusion(&["eval", "--ckpt", "run/ckpt_000010.bin"], dir.path());
    let exported = exfusion(&["eval", "--ckpt", "dense.bin"], dir.path());
    assert_eq!(stdout(&source), stdout(&twice));
    let (a, b) = (metric(&stdout(&source), "accuracy"), metric(&stdout(&exported), "accuracy"));
    assert!((a - b).abs() < 5e-5, "{a} vs {b}");
    assert!((metric(&stdout(&source), "val_loss") - metric(&stdout(&exported), "val_loss")).abs() < 5e-5);

    let noop = exfusion(&["export", "--ckpt", "dense.bin", "--out", "again.bin"], dir.path());
    assert!(noop.status.success());
    assert!(stderr(&noop).contains("already dense"));
    assert!(!dir.path().join("again.bin").exists());

    std::fs::write(dir.path().join("junk.bin"), b"EXFUjunk").unwrap();
    let corrupt = exfusion(&["export", "--ckpt", "junk.bin", "--out", "x.bin"], dir.path());
    assert_eq!(corrupt.status.code(), Some(2));
}

#[test]
fn top_k_checkpoints_cannot_be_exported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "topk.ini", &config("topk_moe", 2, 1));
    assert!(exfusion(&["train", "--config", &cfg, "--out", "run"], dir.path()).status.success());
    let o = exfusion(&["export", "--ckpt", "run/ckpt_000002.bin", "--out", "d.bin"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn untrained_models_are_at_chance_on_average() {
    let dir = tempfile::tempdir().unwrap();
    let big_val = config("dense", 0, 1).replace("val_size = 256", "val_size = 4096");
    let cfg = write_config(dir.path(), "dense.ini", &big_val);
    let seeds = 8;
    let mut total = 0.0;
    for seed in 0..seeds {
        let out = format!("run{seed}");
        let seed = seed.to_string();
        let o = exfusion(&["train", "--config", &cfg, "--out", &out, "--seed", &seed], dir.path());
        assert!(o.status.success());
        let o = exfusion(&["eval", "--ckpt", &format!("{out}/ckpt_000000.bin")], dir.path());
        total += metric(&stdout(&o), "accuracy");
    }
    let mean = total / seeds as f64;
    assert!((mean - 0.25).abs() <= 0.05, "{mean}");
}

#[test]
fn eval_rejects_an_incompatible_task() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "dense.ini", &config("dense", 0, 1));
    assert!(exfusion(&["train", "--config", &cfg, "--out", "run"], dir.path()).status.success());
    let other = write_config(dir.path(), "c6.ini", &config("dense", 0, 1).replace("[task]", "[task]\nnum_classes = 6"));
    let o = exfusion(&["eval", "--ckpt", "run/ckpt_000000.bin", "--config", &other], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("task"));
    let same = exfusion(&["eval", "--ckpt", "run/ckpt_000000.bin", "--config", &cfg], dir.path());
    assert!(same.status.success());
}

#[test]
fn resume_continues_to_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "dw.ini", &config("exfusion_dw", 20, 5));
    assert!(exfusion(&["train", "--config", &cfg, "--out", "full", "--deterministic"], dir.path()).status.success());
    std::fs::create_dir(dir.path().join("part")).unwrap();
    std::fs::copy(dir.path().join("full/ckpt_000010.bin"), dir.path().join("part/ckpt_000010.bin")).unwrap();
    let o = exfusion(&["train", "--resume", "part/ckpt_000010.bin"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("full/metrics.csv"), read("part/metrics.csv"));
    assert_eq!(read("full/ckpt_000020.bin"), read("part/ckpt_000020.bin"));
}

#[test]
fn verify_reports_machine_readable_lines() {
    let dir = tempfile::tempdir().unwrap();
    let o = exfusion(&["verify", "ema"], dir.path());
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.lines().all(|l| l.starts_with("suite=ema ")));
    assert!(out.contains("status=pass"));
    assert!(out.trim_end().ends_with("failed=0"));

    let o = exfusion(&["verify", "fusion", "--dtype", "f64"], dir.path());
    assert!(o.status.success());
    let line = stdout(&o).lines().find(|l| l.contains("identity_f64")).unwrap().to_string();
    assert!(metric(&line, "value") < 1e-10);

    assert_eq!(exfusion(&["verify", "nope"], dir.path()).status.code(), Some(1));
}

#[test]
fn bench_prints_a_relative_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "b.ini", &config("dense", 10, 5));
    let o = exfusion(&["bench", "--config", &cfg, "--warmup", "1", "--steps", "2"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[0].starts_with("dense") && rows[0].ends_with("x1.00"));
    assert!(rows[1].starts_with("topk_moe(k=1)"));
}
