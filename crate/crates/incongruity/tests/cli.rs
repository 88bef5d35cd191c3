use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use incongruity::commands::{cmd_eval, cmd_gen, cmd_train, SPLIT_FILES};
use incongruity::config::render_config;
use incongruity_core::data::GeneratorConfig;
use incongruity_core::model::ModelConfig;
use incongruity_core::train::TrainConfig;
use serde_json::Value;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_incongruity")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            vocab_size: 40,
            ..ModelConfig::toy()
        },
        epochs: 2,
        batch_size: 8,
        ..TrainConfig::default()
    }
}

fn tiny_data(dir: &Path) {
    let out = bin(&[
        "gen", "--out", s(dir), "--n", "60", "--seed", "3", "--image-size", "8", "--vocab-size", "40",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn gen_writes_split_files_deterministically() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    tiny_data(a.path());
    tiny_data(b.path());
    let counts: Vec<usize> = SPLIT_FILES.iter().map(|f| lines(&a.path().join(f))).collect();
    assert_eq!(counts, [48, 6, 6]);
    for f in SPLIT_FILES.iter().chain(&["vocab.txt"]) {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn default_size_splits_2000_250_250() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GeneratorConfig {
        image_size: 8,
        ..GeneratorConfig::default()
    };
    assert_eq!(cmd_gen(dir.path(), &cfg).unwrap(), [2000, 250, 250]);
    assert_eq!(lines(&dir.path().join("train.jsonl")), 2000);
}

#[test]
fn invalid_attribute_noise_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["gen", "--out", s(dir.path()), "--attr-noise", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    fs::write(&cfg, "epochs = 1\nlearnin_rate = 3\n").unwrap();
    let out = bin(&["train", "--config", s(&cfg), "--data", s(dir.path()), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learnin_rate"));
}

#[test]
fn missing_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["train", "--data", s(&dir.path().join("nope")), "--out", s(dir.path()), "--quiet"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn gradcheck_tolerance_controls_exit_code() {
    let ok = bin(&["gradcheck", "--tol", "1e-4"]);
    let table = String::from_utf8_lossy(&ok.stdout);
    assert_eq!(ok.status.code(), Some(0), "{table}");
    for op in [
        "matmul", "conv2d", "elementwise:tanh", "maxpool_cols", "layer_norm", "gru_step", "film_modulate",
        "affinity", "classify", "bce_loss", "model_forward",
    ] {
        assert!(table.lines().any(|l| l.starts_with(op)), "{op} missing from\n{table}");
    }
    let strict = bin(&["gradcheck", "--tol", "1e-12"]);
    assert_eq!(strict.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&strict.stdout).contains("FAIL"));
}

#[test]
fn train_eval_dump_pipeline() {
    let data = tempfile::tempdir().unwrap();
    let run = tempfile::tempdir().unwrap();
    tiny_data(data.path());
    let cfg_path = run.path().join("config.txt");
    fs::write(&cfg_path, render_config(&tiny_config())).unwrap();
    let out_dir = run.path().join("out");
    let out = bin(&["train", "--config", s(&cfg_path), "--data", s(data.path()), "--out", s(&out_dir), "--quiet"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let record: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("run_record.json")).unwrap()).unwrap();
    assert_eq!(record["epochs"].as_array().unwrap().len(), 2);
    assert_eq!(record["layer_tap"], 1);
    let best = record["best_epoch"].as_u64().unwrap() as usize;
    let best_f1 = record["best_val"]["f1"].as_f64().unwrap();
    let logged: Vec<f64> = record["epochs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["val"]["f1"].as_f64().unwrap())
        .collect();
    assert_eq!(logged[best - 1], best_f1);
    assert!(logged.iter().all(|&f| f <= best_f1));
    assert!(logged[..best - 1].iter().all(|&f| f < best_f1), "ties go to the earliest epoch");
    for e in record["epochs"].as_array().unwrap() {
        assert_eq!(e["grad_norms"].as_array().unwrap().len(), 6);
        assert!(e["wall_seconds"].as_f64().unwrap() >= 0.0);
    }

    let ckpt = out_dir.join("checkpoint");
    let val = data.path().join("val.jsonl");
    let eval = bin(&["eval", "--checkpoint", s(&ckpt), "--data", s(&val)]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let report: Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(report["f1"].as_f64().unwrap(), best_f1);
    let again = bin(&["eval", "--checkpoint", s(&ckpt), "--data", s(&val)]);
    assert_eq!(again.stdout, eval.stdout);

    let trace = run.path().join("trace.jsonl");
    let dump = bin(&["dump-attention", "--checkpoint", s(&ckpt), "--data", s(&val), "--out", s(&trace)]);
    assert!(dump.status.success(), "{}", String::from_utf8_lossy(&dump.stderr));
    let text = fs::read_to_string(&trace).unwrap();
    assert_eq!(text.lines().count(), 6);
    for line in text.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        let alpha = v["alpha"].as_array().unwrap();
        let positions = v["attribute_positions"].as_array().unwrap();
        assert_eq!(alpha.len(), positions.len());
        assert_eq!(positions[0], "[CLS]");
        for (a, m) in alpha.iter().zip(v["attribute_mask"].as_array().unwrap()) {
            let a = a.as_f64().unwrap();
            if m.as_bool().unwrap() {
                assert!(a.abs() < 1.0);
            } else {
                assert_eq!(a, 0.0);
            }
        }
        let blocks = v["film_blocks"].as_array().unwrap();
        assert_eq!(blocks.len(), 4);
        for b in blocks {
            for key in ["gamma", "beta", "channel_means"] {
                assert_eq!(b[key].as_array().unwrap().len(), 4, "{key}");
            }
        }
    }

    let empty = run.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = bin(&["eval", "--checkpoint", s(&ckpt), "--data", s(&empty)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no predictions"), "{}", String::from_utf8_lossy(&out.stderr));

    let mut other = tiny_config();
    other.model.d_model = 12;
    other.model.num_heads = 3;
    let other_path = run.path().join("other.txt");
    fs::write(&other_path, render_config(&other)).unwrap();
    let out = bin(&["eval", "--checkpoint", s(&ckpt), "--data", s(&val), "--config", s(&other_path)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn identical_runs_give_identical_records() {
    let data = tempfile::tempdir().unwrap();
    tiny_data(data.path());
    let cfg = tiny_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = cmd_train(&cfg, data.path(), a.path(), false).unwrap();
    let rb = cmd_train(&cfg, data.path(), b.path(), false).unwrap();
    let strip = |r: &incongruity_core::train::RunRecord| {
        let mut r = r.clone();
        for e in &mut r.epochs {
            e.wall_seconds = 0.0;
        }
        r
    };
    assert_eq!(strip(&ra.record), strip(&rb.record));
    assert_eq!(
        fs::read(ra.checkpoint.join("params.bin")).unwrap(),
        fs::read(rb.checkpoint.join("params.bin")).unwrap()
    );
    let test = data.path().join("test.jsonl");
    let eval = cmd_eval(&ra.checkpoint, &test, None).unwrap();
    assert_eq!(Some(eval), ra.record.test);
}
