use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use refseg::synthdata::{load_corpus, INDEX_FILE};

/// Small network for a 16x16 corpus with full-length expressions.
const TINY_CONFIG: &str = r#"{
  "image_size": 16,
  "patch_size": 2,
  "base_channels": 4,
  "text_dim": 8,
  "heads": 2,
  "epochs": 2,
  "batch_size": 2,
  "lr_encoder": 0.001,
  "lr_other": 0.001
}"#;

fn refseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_refseg"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = refseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "images", "masks"] {
        let d = dir.join(sub);
        for e in fs::read_dir(&d).unwrap() {
            let e = e.unwrap();
            if e.path().is_file() {
                out.push((
                    format!("{sub}/{}", e.file_name().to_string_lossy()),
                    fs::read(e.path()).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

/// Pixel bytes of a binary PGM.
fn pgm_pixels(bytes: &[u8]) -> (usize, usize, Vec<u8>) {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        fields.push(String::from_utf8(bytes[start..i].to_vec()).unwrap());
    }
    assert_eq!(fields[0], "P5");
    let (w, h) = (fields[1].parse().unwrap(), fields[2].parse().unwrap());
    (w, h, bytes[i + 1..].to_vec())
}

#[test]
fn gen_data_is_deterministic_and_protects_existing_output() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let out = ok(&[
            "gen-data",
            "--out",
            s(d),
            "--n",
            "6",
            "--seed",
            "3",
            "--size",
            "32",
        ]);
        assert!(out.contains("6 samples"));
    }
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    let index = fs::read_to_string(a.join(INDEX_FILE)).unwrap();
    assert_eq!(index.lines().count(), 6);
    let corpus = load_corpus(&a).unwrap();
    assert!(corpus
        .iter()
        .all(|c| c.size() == (32, 32) && !c.gt_mask.is_empty()));

    let refused = refseg(&["gen-data", "--out", s(&a), "--n", "2"]);
    assert_eq!(refused.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--force"));
    ok(&["gen-data", "--out", s(&a), "--n", "2", "--force"]);
    assert_eq!(load_corpus(&a).unwrap().len(), 2);
}

#[test]
fn train_eval_predict_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run, cfg) = (
        tmp.path().join("data"),
        tmp.path().join("run"),
        tmp.path().join("tiny.json"),
    );
    fs::write(&cfg, TINY_CONFIG).unwrap();
    ok(&[
        "gen-data",
        "--out",
        s(&data),
        "--n",
        "4",
        "--size",
        "16",
        "--seed",
        "1",
    ]);

    // an interrupted run resumed to completion
    let first = ok(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--out",
        s(&run),
        "--stop-after",
        "1",
    ]);
    assert!(first.contains("1 epochs complete"));
    let rest = ok(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--resume",
        "--log-steps",
    ]);
    assert!(rest.contains("2 epochs complete"));
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(
        log.lines()
            .filter(|l| l.contains(r#""kind":"epoch""#))
            .count(),
        2
    );
    assert_eq!(
        log.lines()
            .filter(|l| l.contains(r#""kind":"step""#))
            .count(),
        2
    );

    let ckpt = run.join("checkpoint");
    let report_path = tmp.path().join("report.json");
    let json = ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--json",
        "--report",
        s(&report_path),
    ]);
    assert_eq!(fs::read_to_string(&report_path).unwrap(), json);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    let mut keys: Vec<&String> = v.as_object().unwrap().keys().collect();
    keys.sort();
    assert_eq!(
        keys,
        [
            "miou",
            "oiou",
            "per_category",
            "pr50",
            "pr60",
            "pr70",
            "pr80",
            "pr90"
        ]
    );
    let table = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    assert!(table.contains("Pr@0.5") && table.contains("category"));

    let sample = &load_corpus(&data).unwrap()[0];
    let image = data.join(format!("images/{}.ppm", sample.id));
    let predict = |tag: &str| {
        let (mask, overlay) = (
            tmp.path().join(format!("{tag}.pgm")),
            tmp.path().join(format!("{tag}.ppm")),
        );
        let out = ok(&[
            "predict",
            "--checkpoint",
            s(&ckpt),
            "--image",
            s(&image),
            "--expression",
            &sample.expression,
            "--mask-out",
            s(&mask),
            "--overlay-out",
            s(&overlay),
        ]);
        assert!(out.starts_with("foreground pixels: "));
        (fs::read(mask).unwrap(), fs::read(overlay).unwrap())
    };
    let (m1, o1) = predict("one");
    let (m2, o2) = predict("two");
    assert_eq!((&m1, &o1), (&m2, &o2));
    let (w, h, px) = pgm_pixels(&m1);
    assert_eq!((w, h, px.len()), (16, 16, 256));
    assert!(px.iter().all(|&p| p == 0 || p == 255));
}

#[test]
fn bad_inputs_exit_with_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run, cfg) = (
        tmp.path().join("data"),
        tmp.path().join("run"),
        tmp.path().join("tiny.json"),
    );
    fs::write(
        &cfg,
        TINY_CONFIG.replace(r#""epochs": 2"#, r#""epochs": 1"#),
    )
    .unwrap();
    ok(&["gen-data", "--out", s(&data), "--n", "2", "--size", "16"]);

    // the default network expects 64x64 images
    let mismatch = refseg(&["train", "--data", s(&data), "--out", s(&run)]);
    assert_eq!(mismatch.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("expects"));

    ok(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--out",
        s(&run),
    ]);
    let ckpt = run.join("checkpoint");
    let image = data.join(format!("images/{}.ppm", load_corpus(&data).unwrap()[0].id));
    let blank = refseg(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--image",
        s(&image),
        "--expression",
        "   ",
    ]);
    assert_eq!(blank.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&blank.stderr).contains("no words"));

    let big = tmp.path().join("big");
    ok(&["gen-data", "--out", s(&big), "--n", "1", "--size", "32"]);
    let big_image = big.join(format!("images/{}.ppm", load_corpus(&big).unwrap()[0].id));
    let wrong = refseg(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--image",
        s(&big_image),
        "--expression",
        "the red square",
    ]);
    assert_eq!(wrong.status.code(), Some(2));

    let missing = refseg(&[
        "eval",
        "--checkpoint",
        s(&tmp.path().join("nope")),
        "--data",
        s(&data),
    ]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_flags_a_corrupted_gradient() {
    let clean = refseg(&["gradcheck", "--json"]);
    assert_eq!(
        clean.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&clean.stdout)
    );
    let v: serde_json::Value = serde_json::from_slice(&clean.stdout).unwrap();
    assert_eq!(v["pass"], serde_json::Value::Bool(true));

    let bad = refseg(&["gradcheck", "--corrupt", "decoder.bg_delta", "0.5"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("decoder.bg_delta"));
}
