use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clipsim"))
        .env("RUST_LOG", "error")
        .args(args)
        .output()
        .unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn usage_exit_codes() {
    let bare = run(&[]);
    assert_eq!(bare.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bare.stderr).contains("Usage"));
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["eval", "--bogus"]), 1);
    assert_eq!(code(&["eval", "--store", "x", "--annotations", "y", "--task", "nope"]), 1);
}

#[test]
fn eval_on_missing_store_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csf");
    assert_eq!(code(&["eval", "--store", s(&missing), "--annotations", s(&missing)]), 2);
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"train.stepz": 1}"#).unwrap();
    let out = run(&["synth", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.stepz"));
    assert!(!dir.path().join("d").exists());
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&["synth", "--out", s(&a), "--seed", "5"]), 0);
    assert_eq!(code(&["synth", "--out", s(&b), "--seed", "5"]), 0);
    assert_eq!(tree(&a), tree(&b));
    let ann: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("annotations.json")).unwrap()).unwrap();
    assert_eq!(ann["queries"].as_object().unwrap().len(), 20);
    let c = dir.path().join("c");
    assert_eq!(code(&["synth", "--out", s(&c), "--seed", "6"]), 0);
    assert_ne!(tree(&a), tree(&c));
}

#[test]
fn extract_query_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let store = dir.path().join("s.csf");
    assert_eq!(code(&["synth", "--out", s(&data), "--videos", "30", "--queries", "3"]), 0);
    assert_eq!(code(&["extract", "--data", s(&data), "--store", s(&store)]), 0);

    let q = run(&["query", "--store", s(&store), "--id", "q001", "--top", "5"]);
    assert!(q.status.success());
    let lines: Vec<String> = String::from_utf8_lossy(&q.stdout).lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 5);
    let scores: Vec<f64> = lines.iter().map(|l| l.split('\t').nth(2).unwrap().parse().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    assert!(lines.iter().all(|l| l.split('\t').nth(1) != Some("q001")));
    assert_eq!(code(&["query", "--store", s(&store), "--id", "nobody"]), 2);

    let report = dir.path().join("r.csv");
    let ann = data.join("annotations.json");
    assert_eq!(code(&["eval", "--store", s(&store), "--annotations", s(&ann), "--out", s(&report)]), 0);
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("task,query_id,ap\n"));
    for task in ["dsvr", "csvr", "isvr"] {
        assert!(csv.contains(&format!("{task},mAP,")));
    }
    let single = run(&["eval", "--store", s(&store), "--annotations", s(&ann), "--task", "csvr", "--k", "1"]);
    let text = String::from_utf8_lossy(&single.stdout);
    assert!(text.contains("csvr,mAP,") && !text.contains("dsvr"));
}

#[test]
fn training_is_reproducible_and_feeds_extraction() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"train.videos": 12, "train.base_lr": 0.008, "predmae.videos": 4}"#).unwrap();
    let (w1, w2) = (dir.path().join("w1"), dir.path().join("w2"));
    let metrics = dir.path().join("m.csv");
    let base = ["train", "--config", s(&cfg), "--steps", "3", "--batch", "4", "--seed", "3"];
    assert_eq!(code(&[&base[..], &["--out", s(&w1), "--metrics", s(&metrics)]].concat()), 0);
    assert_eq!(code(&[&base[..], &["--out", s(&w2)]].concat()), 0);
    assert_eq!(std::fs::read(&w1).unwrap(), std::fs::read(&w2).unwrap());
    let csv = std::fs::read_to_string(&metrics).unwrap();
    assert!(csv.starts_with("step,ms_loss,fcs_loss,total,lr,bank_size\n"));
    assert_eq!(csv.lines().count(), 4);

    let pre = dir.path().join("pre");
    let curve = dir.path().join("curve.csv");
    let p = ["pretrain", "--config", s(&cfg), "--steps", "2", "--batch", "2", "--out", s(&pre), "--metrics", s(&curve)];
    assert_eq!(code(&p), 0);
    assert!(std::fs::read_to_string(&curve).unwrap().starts_with("step,loss\n"));
    let tuned = dir.path().join("tuned");
    let t = ["train", "--config", s(&cfg), "--steps", "1", "--batch", "2", "--init", s(&pre), "--out", s(&tuned)];
    assert_eq!(code(&t), 0);

    let data = dir.path().join("data");
    assert_eq!(code(&["synth", "--out", s(&data), "--videos", "9", "--queries", "1"]), 0);
    let store = dir.path().join("s.csf");
    assert_eq!(code(&["extract", "--data", s(&data), "--checkpoint", s(&tuned), "--store", s(&store)]), 0);
}

#[test]
fn divergent_training_is_a_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"train.videos": 8, "train.base_lr": 1e30}"#).unwrap();
    let out = dir.path().join("w");
    let result = run(&["train", "--config", s(&cfg), "--steps", "5", "--batch", "4", "--out", s(&out)]);
    assert_eq!(result.status.code(), Some(3), "{}", String::from_utf8_lossy(&result.stderr));
    assert!(!out.exists());
}

#[test]
fn selfcheck_passes() {
    let out = run(&["selfcheck"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 8);
}
