use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_gloss2pose"));
    c.env_remove("SIGN_IDD_THREADS");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    let line = err.lines().last().unwrap_or_default().to_string();
    assert!(line.starts_with("error["), "unexpected error format: {err}");
    line
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

/// Small corpus and a briefly trained model under `dir`.
fn trained(dir: &Path) {
    ok(
        dir,
        &[
            "gen-corpus",
            "--vocab",
            "4",
            "--samples",
            "6",
            "--frames-per-gloss",
            "4",
            "--seed",
            "2",
            "--out",
            "c",
        ],
    );
    ok(
        dir,
        &[
            "train",
            "--corpus",
            "c",
            "--epochs",
            "2",
            "--d-model",
            "16",
            "--schedule-steps",
            "50",
            "--seed",
            "3",
            "--checkpoint",
            "m.ckpt",
        ],
    );
}

#[test]
fn gen_corpus_contract() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let stdout = ok(
        d,
        &[
            "gen-corpus",
            "--vocab",
            "20",
            "--samples",
            "200",
            "--seed",
            "1",
            "--out",
            "a",
        ],
    );
    assert!(
        stdout.contains("settings:"),
        "defaults are printed: {stdout}"
    );
    assert!(stdout.contains("200 samples"));
    assert_eq!(std::fs::read_dir(d.join("a/poses")).unwrap().count(), 200);
    assert_eq!(
        String::from_utf8(read(d.join("a/vocab.txt")))
            .unwrap()
            .lines()
            .count(),
        20
    );
    ok(
        d,
        &[
            "gen-corpus",
            "--vocab",
            "20",
            "--samples",
            "200",
            "--seed",
            "1",
            "--out",
            "b",
        ],
    );
    assert_eq!(
        read(d.join("a/manifest.jsonl")),
        read(d.join("b/manifest.jsonl"))
    );
    let err = fails(d, &["gen-corpus", "--vocab", "1", "--out", "x"]);
    assert!(err.contains("vocab_size ≥ 2"), "{err}");
}

#[test]
fn train_and_generate_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    ok(
        d,
        &[
            "train",
            "--corpus",
            "c",
            "--epochs",
            "2",
            "--d-model",
            "16",
            "--schedule-steps",
            "50",
            "--seed",
            "3",
            "--checkpoint",
            "m2.ckpt",
        ],
    );
    assert_eq!(read(d.join("m.ckpt")), read(d.join("m2.ckpt")));
    assert_eq!(read(d.join("m.csv")), read(d.join("m2.csv")));

    let gen = |out: &str| {
        ok(
            d,
            &[
                "generate",
                "--checkpoint",
                "m.ckpt",
                "--gloss",
                "G000 G003",
                "--seed",
                "5",
                "--out",
                out,
            ],
        )
    };
    let stdout = gen("p1.json");
    assert!(stdout.contains("J=8"), "{stdout}");
    gen("p2.json");
    assert_eq!(read(d.join("p1.json")), read(d.join("p2.json")));
    assert!(
        stdout.contains("\"inference_steps\":5"),
        "default of 5 steps: {stdout}"
    );

    let err = fails(
        d,
        &["generate", "--checkpoint", "m.ckpt", "--gloss", "G000 xyz"],
    );
    assert!(err.contains("\"xyz\""), "{err}");
}

#[test]
fn zero_lambda_keeps_bone_column() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "gen-corpus",
            "--vocab",
            "3",
            "--samples",
            "3",
            "--frames-per-gloss",
            "3",
            "--out",
            "c",
        ],
    );
    ok(
        d,
        &[
            "train",
            "--corpus",
            "c",
            "--epochs",
            "1",
            "--d-model",
            "16",
            "--schedule-steps",
            "20",
            "--lambda",
            "0",
            "--checkpoint",
            "z.ckpt",
        ],
    );
    let csv = String::from_utf8(read(d.join("z.csv"))).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epoch,loss_total,loss_joint,loss_bone"));
    let row: Vec<f64> = lines
        .next()
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert!(row[3] > 0.0);
    assert!((row[1] - row[2]).abs() < 1e-12);
}

#[test]
fn evaluate_against_itself_and_generated() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    let json = ok(
        d,
        &[
            "evaluate",
            "--reference",
            "c/manifest.jsonl",
            "--predictions",
            "c/manifest.jsonl",
            "--out",
            "self.json",
        ],
    );
    assert!(json.contains("mpjpe"));
    let report: serde_json::Value = serde_json::from_slice(&read(d.join("self.json"))).unwrap();
    assert_eq!(report["mpjpe"], 0.0);
    assert_eq!(report["mpjae"], 0.0);
    assert!(report["fid"].as_f64().unwrap() < 1e-6);
    assert_eq!(report["per_sequence"].as_array().unwrap().len(), 6);

    // predicted lengths differ from the references: every pair fails
    ok(
        d,
        &[
            "generate",
            "--checkpoint",
            "m.ckpt",
            "--manifest",
            "c/manifest.jsonl",
            "--frames",
            "1",
            "--out",
            "g1",
        ],
    );
    let err = fails(
        d,
        &[
            "evaluate",
            "--reference",
            "c/manifest.jsonl",
            "--predictions",
            "g1/manifest.jsonl",
        ],
    );
    assert!(err.contains("no comparable"), "{err}");

    ok(
        d,
        &[
            "generate",
            "--checkpoint",
            "m.ckpt",
            "--manifest",
            "c/manifest.jsonl",
            "--reference-lengths",
            "--out",
            "g",
        ],
    );
    ok(
        d,
        &[
            "evaluate",
            "--reference",
            "c/manifest.jsonl",
            "--predictions",
            "g/manifest.jsonl",
            "--out",
            "gen.json",
        ],
    );
    let report: serde_json::Value = serde_json::from_slice(&read(d.join("gen.json"))).unwrap();
    assert!(report["mpjpe"].as_f64().unwrap() > 0.0);
    assert_eq!(report["failed"], 0);

    // one mismatched length: error entry, aggregate over the rest
    let manifest = String::from_utf8(read(d.join("g/manifest.jsonl"))).unwrap();
    let first: serde_json::Value = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
    let path = d.join("g").join(first["pose_file"].as_str().unwrap());
    let mut pose: serde_json::Value = serde_json::from_slice(&read(&path)).unwrap();
    pose["frames"].as_array_mut().unwrap().pop();
    std::fs::write(&path, pose.to_string()).unwrap();
    ok(
        d,
        &[
            "evaluate",
            "--reference",
            "c/manifest.jsonl",
            "--predictions",
            "g/manifest.jsonl",
            "--out",
            "partial.json",
        ],
    );
    let report: serde_json::Value = serde_json::from_slice(&read(d.join("partial.json"))).unwrap();
    assert_eq!(
        (report["evaluated"].as_u64(), report["failed"].as_u64()),
        (Some(5), Some(1))
    );

    std::fs::write(d.join("short.jsonl"), manifest.lines().next().unwrap()).unwrap();
    let err = fails(
        d,
        &[
            "evaluate",
            "--reference",
            "c/manifest.jsonl",
            "--predictions",
            "short.jsonl",
        ],
    );
    assert!(err.contains("sample ids differ"), "{err}");
}

#[test]
fn roundtrip_contract() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "gen-corpus",
            "--vocab",
            "5",
            "--samples",
            "10",
            "--out",
            "c",
        ],
    );
    let out = ok(d, &["roundtrip", "--manifest", "c/manifest.jsonl"]);
    let dev: f64 = out
        .split("max deviation ")
        .nth(1)
        .unwrap()
        .split_whitespace()
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!(dev < 1e-9, "{out}");

    let mut frame = vec![[0.0, 0.0, 0.0]; 8];
    frame[3] = [0.5, 0.5, 0.0];
    frame[4] = [0.5, 0.5, 0.0];
    let pose = serde_json::json!({"topology": "toy8", "fps": 25, "frames": [frame]});
    std::fs::write(d.join("coincident.json"), pose.to_string()).unwrap();
    ok(d, &["roundtrip", "--poses", "coincident.json"]);

    std::fs::write(
        d.join("bad.json"),
        "{\"topology\": \"toy8\", \"frames\": [[[0,0",
    )
    .unwrap();
    let err = fails(d, &["roundtrip", "--poses", "bad.json"]);
    assert!(err.starts_with("error[parse]"), "{err}");
}

#[test]
fn render_contract() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let one = serde_json::json!({
        "topology": "toy8", "fps": 25,
        "frames": [[[0,0,0],[0,0.3,0],[-0.2,0,0],[-0.25,-0.35,0],[-0.2,-0.1,0.3],[0.2,0,0],[0.25,-0.35,0],[0.2,-0.1,0.3]]]
    });
    std::fs::write(d.join("one.json"), one.to_string()).unwrap();
    ok(d, &["render", "--pose", "one.json", "--out", "a"]);
    let svg = String::from_utf8(read(d.join("a/frame_0000.svg"))).unwrap();
    assert_eq!(svg.matches("<line").count(), 7);
    ok(d, &["render", "--pose", "one.json", "--out", "b"]);
    assert_eq!(
        read(d.join("a/frame_0000.svg")),
        read(d.join("b/frame_0000.svg"))
    );
    ok(
        d,
        &[
            "render",
            "--pose",
            "one.json",
            "--compare",
            "one.json",
            "--out",
            "cmp",
        ],
    );
    let svg = String::from_utf8(read(d.join("cmp/frame_0000.svg"))).unwrap();
    assert_eq!(svg.matches("<g ").count(), 2);
    assert_eq!(svg.matches("<line").count(), 14);
    let err = fails(d, &["render", "--pose", "one.json", "--frames", "3"]);
    assert!(err.contains("out of range"), "{err}");
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("cfg.json"),
        r#"{"seed": 7, "corpus": {"vocab_size": 3, "samples": 4, "frames_per_gloss": 3}}"#,
    )
    .unwrap();
    let out = ok(
        d,
        &[
            "--config",
            "cfg.json",
            "gen-corpus",
            "--samples",
            "2",
            "--out",
            "c",
        ],
    );
    assert!(
        out.contains("\"samples\":2") && out.contains("\"vocab\":3") && out.contains("\"seed\":7"),
        "{out}"
    );
    assert_eq!(std::fs::read_dir(d.join("c/poses")).unwrap().count(), 2);

    std::fs::write(d.join("typo.json"), r#"{"sed": 1}"#).unwrap();
    fails(d, &["--config", "typo.json", "gen-corpus", "--out", "x"]);
}

#[test]
fn thread_cap_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .current_dir(dir.path())
        .env("SIGN_IDD_THREADS", "zero")
        .args(["gen-corpus", "--vocab", "2", "--samples", "1", "--out", "c"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("SIGN_IDD_THREADS"));
    let out = bin()
        .current_dir(dir.path())
        .env("SIGN_IDD_THREADS", "1")
        .args(["gen-corpus", "--vocab", "2", "--samples", "1", "--out", "c"])
        .output()
        .unwrap();
    assert!(out.status.success());
}
