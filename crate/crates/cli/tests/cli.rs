use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5

[synth]
n_supervised = 10
n_unlabeled = 30
n_dev = 10

[lm.train]
steps = 20

[pretrain.run]
steps = 10

[finetune]
steps = 10

[nst]
student_steps = 10

[nst.fusion_grid]
lm_weights = [0.0, 0.3]
nonblank_rewards = [0.0, 0.5]
"#;

fn nstasr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nstasr"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = nstasr(args);
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Temp dir with the tiny config and its synthetic data in `data/`.
fn project() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    ok(&[
        "synth",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("data")),
    ]);
    (dir, cfg)
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn malformed_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[nst]\nfilter_fraction = \"lots\"\n").unwrap();
    let o = nstasr(&["synth", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nst.filter_fraction"));

    std::fs::write(&cfg, "seed = 1\n[nst]\nfilter_fraction = 1.5\n").unwrap();
    let o = nstasr(&["synth", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nst.filter_fraction"));

    let o = nstasr(&[
        "synth",
        "--seed",
        "1",
        "--out",
        s(dir.path()),
        "synth.n_dev=many",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("synth.n_dev"));
}

#[test]
fn evaluate_against_itself_is_zero() {
    let (dir, _) = project();
    let dev = dir.path().join("data/dev.jsonl");
    let out = ok(&["evaluate", "--ref", s(&dev), "--hyp", s(&dev)]);
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(v["metric"], "wer");
    assert_eq!(v["value"], 0.0);
}

#[test]
fn synth_reports_split_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&[
        "synth",
        "--seed",
        "3",
        "--out",
        s(dir.path()),
        "synth.n_supervised=3",
        "synth.n_unlabeled=4",
        "synth.n_dev=2",
    ]);
    let sizes: Vec<f64> = out
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["value"]
                .as_f64()
                .unwrap()
        })
        .collect();
    assert_eq!(sizes, [3.0, 4.0, 2.0]);
    assert_eq!(read(&dir.path().join("unlabeled.jsonl")).lines().count(), 4);
}

#[test]
fn nst_run_writes_generations_and_resumes() {
    let (dir, cfg) = project();
    let run = dir.path().join("run");
    let first = ok(&[
        "nst-run",
        "--config",
        s(&cfg),
        "--out",
        s(&run),
        "--generations",
        "2",
    ]);
    let manifests = read(&run.join("generations.jsonl"));
    assert_eq!(manifests.lines().count(), 2);
    let csv = read(&run.join("generation_metrics.csv"));
    assert_eq!(
        csv.lines().next(),
        Some("generation,model_size,dev_wer,dev_wer_fused")
    );
    assert_eq!(csv.lines().count(), 3);
    assert!(run.join("gen1/pseudo.jsonl").is_file());
    let metrics = read(&run.join("metrics.jsonl"));
    let ckpt = std::fs::read(run.join("gen1/small/student.ckpt")).unwrap();
    let stamp = std::fs::metadata(run.join("gen1/small/student.ckpt"))
        .unwrap()
        .modified()
        .unwrap();

    let second = ok(&[
        "nst-run",
        "--config",
        s(&cfg),
        "--out",
        s(&run),
        "--generations",
        "2",
    ]);
    assert_eq!(first, second);
    assert_eq!(read(&run.join("metrics.jsonl")), metrics);
    assert_eq!(read(&run.join("generations.jsonl")), manifests);
    assert_eq!(
        std::fs::read(run.join("gen1/small/student.ckpt")).unwrap(),
        ckpt
    );
    let again = std::fs::metadata(run.join("gen1/small/student.ckpt"))
        .unwrap()
        .modified()
        .unwrap();
    assert_eq!(stamp, again, "completed generation was retrained");
}

#[test]
fn manual_stages_reproduce_nst_run() {
    let (dir, cfg) = project();
    let auto = dir.path().join("auto");
    let manual = dir.path().join("manual");
    let c = s(&cfg);
    ok(&[
        "nst-run",
        "--config",
        c,
        "--out",
        s(&auto),
        "--generations",
        "2",
    ]);

    let m = s(&manual);
    ok(&["finetune", "--config", c, "--out", m, "--generation", "0"]);
    let teacher = manual.join("gen0/small/student.ckpt");
    let fusion = manual.join("gen0/small/eval.json");
    ok(&[
        "pseudolabel",
        "--config",
        c,
        "--out",
        m,
        "--generation",
        "1",
        "--teacher",
        s(&teacher),
        "--fusion",
        s(&fusion),
    ]);
    ok(&["filter", "--config", c, "--out", m, "--generation", "1"]);
    ok(&[
        "finetune",
        "--config",
        c,
        "--out",
        m,
        "--generation",
        "1",
        "--pseudo",
        s(&manual.join("gen1/pseudo_kept.jsonl")),
    ]);
    for rel in [
        "gen0/small/student.ckpt",
        "gen1/pseudo.jsonl",
        "gen1/small/student.ckpt",
    ] {
        assert!(
            std::fs::read(auto.join(rel)).unwrap() == std::fs::read(manual.join(rel)).unwrap(),
            "{rel} differs"
        );
    }
}

#[test]
fn ablate_prints_a_two_by_two_table() {
    let (dir, cfg) = project();
    let out = dir.path().join("ablate");
    let table = ok(&[
        "ablate",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--grid",
        "reduction=2x,4x",
        "segment=16,32",
    ]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3, "{table}");
    assert_eq!(lines[1].split(',').count(), 3);
    assert_eq!(read(&out.join("ablation.jsonl")).lines().count(), 4);
    assert!(out.join("ablation_wer_fused.csv").is_file());
}

#[test]
fn mix_preview_holds_the_ratio() {
    let (dir, cfg) = project();
    let pseudo = dir.path().join("pseudo.jsonl");
    let line = |i: usize| {
        format!("{{\"id\":\"u{i}\",\"text\":\"a\",\"tokens\":[1],\"asr_logp\":-1.0,\"lm_logp\":0.0,\"n_nonblank\":1,\"fused_score\":-1.0}}\n")
    };
    std::fs::write(&pseudo, (0..30).map(line).collect::<String>()).unwrap();
    let out = ok(&[
        "mix-preview",
        "--config",
        s(&cfg),
        "--out",
        s(dir.path()),
        "--pseudo",
        s(&pseudo),
    ]);
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert!((v["value"].as_f64().unwrap() - 0.1).abs() < 1e-12);
    assert_eq!(
        read(&dir.path().join("mix_preview.jsonl")).lines().count(),
        20
    );
}
