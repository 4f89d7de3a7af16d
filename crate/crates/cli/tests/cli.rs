use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rat_cli::CliConfig;

fn rat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rat")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small synthetic task with a config that trains in a second or two.
fn synth(dir: &Path) -> PathBuf {
    let out = rat(&["synth", "--out", s(dir), "--users", "4", "--distractors", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let config = dir.join("rat.toml");
    let text = fs::read_to_string(&config).unwrap();
    let text = text.replace("max_epochs = 5", "max_epochs = 2").replace("embed_dim = 16", "embed_dim = 8");
    fs::write(&config, text).unwrap();
    config
}

#[test]
fn help_documents_every_flag() {
    let expected: &[(&str, &[&str])] = &[
        ("build-index", &["--config", "--out"]),
        ("retrieve", &["--config", "--index", "--query", "--k", "--out"]),
        ("train", &["--config", "--out", "--seed", "--k", "--variant"]),
        ("evaluate", &["--config", "--model", "--segments", "--out"]),
        ("ablate", &["--config", "--out", "--seed", "--k", "--variant"]),
    ];
    for (cmd, flags) in expected {
        let out = rat(&[cmd, "--help"]);
        assert_eq!(out.status.code(), Some(0));
        let text = stdout(&out);
        for flag in *flags {
            assert!(text.contains(flag), "{cmd} --help lacks {flag}");
        }
    }
}

#[test]
fn unknown_flags_and_missing_commands_are_usage_errors() {
    assert_eq!(rat(&["train", "--config", "x.toml", "--bogus"]).status.code(), Some(1));
    assert_eq!(rat(&[]).status.code(), Some(1));
    assert_eq!(rat(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(rat(&["train", "--config", "x.toml", "--variant", "nope"]).status.code(), Some(1));
}

#[test]
fn missing_dataset_is_a_data_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.toml");
    fs::write(&config, "[data]\npath = \"nowhere.csv\"\nlabel = \"label\"\nfeatures = [\"x\"]\n").unwrap();
    let out = rat(&["build-index", "--config", s(&config)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nowhere.csv"), "{}", stderr(&out));

    let out = rat(&["build-index", "--config", s(&dir.path().join("absent.toml"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("absent.toml"));

    fs::write(&config, "[data]\npath = \"nowhere.csv\"\nunknown_key = 1\n").unwrap();
    assert_eq!(rat(&["build-index", "--config", s(&config)]).status.code(), Some(1));
}

#[test]
fn index_builds_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path());
    let a = dir.path().join("a.rati");
    let b = dir.path().join("b.rati");
    let out = rat(&["build-index", "--config", s(&config), "--out", s(&a)]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("pool size (N_P): 192"));
    assert!(stdout(&out).contains("distinct terms: 8"));
    rat(&["build-index", "--config", s(&config), "--out", s(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn retrieve_on_a_toy_pool() {
    let dir = tempfile::tempdir().unwrap();
    // train = first 6 rows; only row 2 has x = q
    fs::write(
        dir.path().join("toy.csv"),
        "x,y,label\np,m,1\np,n,0\nq,n,1\nr,m,0\np,m,1\nr,n,0\np,m,1\nq,n,0\n",
    )
    .unwrap();
    let config = dir.path().join("toy.toml");
    fs::write(
        &config,
        "[data]\npath = \"toy.csv\"\nlabel = \"label\"\nfeatures = [\"x\", \"y\"]\n\
         [data.split]\ntrain = 0.75\nvalid = 0.125\ntest = 0.125\n",
    )
    .unwrap();
    assert_eq!(rat(&["build-index", "--config", s(&config)]).status.code(), Some(0));

    let out = rat(&["retrieve", "--config", s(&config), "--k", "1", "--query", "x=q", "--query", "x=zz,y=zz"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let lines: Vec<serde_json::Value> = stdout(&out).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["neighbor_indices"], serde_json::json!([2]));
    assert_eq!(lines[0]["mask"], serde_json::json!([true]));
    // ln((6 - 1 + 0.5) / (1 + 0.5))
    let score = lines[0]["scores"][0].as_f64().unwrap();
    assert!((score - (5.5f64 / 1.5).ln()).abs() < 1e-12);
    assert_eq!(lines[1]["mask"], serde_json::json!([false]));
    assert_eq!(lines[1]["scores"], serde_json::json!([null]));

    let out = rat(&["retrieve", "--config", s(&config), "--query", "z=1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = rat(&["retrieve", "--config", s(&config), "--query", "x=p", "--before", "0"]);
    let line: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(line["mask"], serde_json::json!([false, false, false, false, false]));
}

#[test]
fn train_evaluate_ablate() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path());
    let out = rat(&["train", "--config", s(&config), "--seed", "5"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("(seed 5)"));
    let run = dir.path().join("run");
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert_eq!(last["kind"], "final");
    assert_eq!(last["seed"], 5);

    let out = rat(&["evaluate", "--config", s(&config), "--segments", "tail10,tail20"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["auc"].as_f64(), last["test_auc"].as_f64());
    assert_eq!(report["logloss"].as_f64(), last["test_logloss"].as_f64());
    assert_eq!(report["seed"], 5);
    assert!(report["segments"]["tail10"]["n"].as_u64().unwrap() > 0);
    assert!(report["segments"]["tail20"]["n"].as_u64().unwrap() > 0);

    let csv = dir.path().join("ablation.csv");
    let out = rat(&["ablate", "--config", s(&config), "--out", s(&csv)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("seed 42"));
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "variant,auc,logloss,params,runtime_us");
    assert_eq!(rows.len(), 5);
    let names: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(names, ["JM", "CE", "PA", "CASCADE"]);
}

#[test]
fn training_twice_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(rat(&["train", "--config", s(&config), "--out", s(out)]).status.code(), Some(0));
    }
    for name in ["model.ratm", "train_log.jsonl"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn segments_without_user_field_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth(dir.path());
    let text = fs::read_to_string(&config).unwrap().replace("user_field = \"user\"\n", "");
    fs::write(&config, text).unwrap();
    let out = rat(&["evaluate", "--config", s(&config), "--segments", "tail10"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_round_trips_through_toml() {
    let text = r#"
        out_dir = "runs/x"
        user_field = "user"

        [data]
        path = "d.csv"
        label = "click"
        timestamp = "time"
        features = ["user", "item"]
        delimiter = ";"

        [data.split]
        train = 0.7
        valid = 0.2
        test = 0.1

        [train]
        variant = "jm"
        k = 3
        learning_rate = 0.0005
    "#;
    let cfg = CliConfig::parse(text).unwrap();
    assert_eq!(cfg.train.k, 3);
    assert_eq!(cfg.train.seed, 42);
    assert_eq!(cfg.data.schema.delimiter, ';');
    assert_eq!(CliConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    assert!(CliConfig::parse("[data]\npath = \"d\"\nlabel = \"y\"\nfeatures = []\n[train]\nbogus = 1\n").is_err());
}
