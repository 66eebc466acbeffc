use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pgnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pgnn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Vec<PathBuf> {
    let out = pgnn(args);
    assert!(
        out.status.success(),
        "pgnn {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(PathBuf::from)
        .collect()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

const COMMON: &str = r#"
seed = 4

[data]
raw = "data/raw.csv"
supervised = "data/supervised"

[synth]
n_minutes = 1500

[train]
epochs = 2
batch_size = 32
"#;

/// `top` holds top-level keys, which TOML requires before any table.
fn run_file(dir: &Path, name: &str, top: &str, tables: &str) -> String {
    write(dir, name, &format!("{top}{COMMON}{tables}"))
}

#[test]
fn full_pipeline_produces_eight_variant_table() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let data_dir = d.join("data");
    let data_out = data_dir.to_str().unwrap();

    let std_cfg = run_file(d, "std.toml", "out_dir = \"runs/std\"\n", "");
    let pg_cfg = run_file(d, "pgnn.toml", "out_dir = \"runs/pgnn\"\n", "");
    fs::write(
        &pg_cfg,
        fs::read_to_string(&pg_cfg).unwrap().replace("[train]\n", "[train]\nlambda = 0.36\n"),
    )
    .unwrap();

    let written = ok(&["synth", "--config", &std_cfg, "--out", data_out]);
    assert!(written.iter().any(|p| p.ends_with("raw.csv")));
    ok(&["ingest", "--config", &std_cfg, "--out", data_out]);
    assert!(data_dir.join("supervised/features.csv").exists());
    assert!(data_dir.join("gap_report.json").exists());

    ok(&["train", "--config", &std_cfg]);
    let written = ok(&["train", "--config", &pg_cfg]);
    assert!(written.iter().any(|p| p.ends_with("model.pgnn")));
    let log = fs::read_to_string(d.join("runs/pgnn/training_log.csv")).unwrap();
    assert!(log.starts_with("epoch,train_l_data,train_r1,train_r2"));
    assert_eq!(log.lines().count(), 3);

    let mut configs = vec![std_cfg.clone(), pg_cfg.clone()];
    let prunes = [
        ("std", "standard", "neuron", 0.0),
        ("std", "standard", "weight", 0.0),
        ("pgnn", "standard", "neuron", 0.0),
        ("pgnn", "standard", "weight", 0.0),
        ("pgnn", "physics-guided", "neuron", 0.52),
        ("pgnn", "physics-guided", "weight", 0.05),
    ];
    for (base, scheme, kind, alpha) in prunes {
        let name = format!("{base}-{scheme}-{kind}");
        let cfg = run_file(
            d,
            &format!("{name}.toml"),
            &format!("out_dir = \"runs/{name}\"\n"),
            &format!(
                "[prune]\nbase_model = \"runs/{base}/model.pgnn\"\nscheme = \"{scheme}\"\nkind = \"{kind}\"\nalpha = {alpha}\nfine_tune_epochs = 1\n"
            ),
        );
        let written = ok(&["prune", "--config", &cfg]);
        assert!(written.iter().any(|p| p.ends_with("prune_report.csv")));
        configs.push(cfg);
    }

    let cmp = d.join("cmp");
    let mut args = vec!["compare"];
    for c in &configs {
        args.push("--config");
        args.push(c);
    }
    args.extend(["--out", cmp.to_str().unwrap()]);
    ok(&args);
    let metrics = fs::read_to_string(cmp.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 9);
    for label in [
        "std-offline",
        "pgnn-offline",
        "std+std-neuron",
        "std+std-weight",
        "pgnn+std-neuron",
        "pgnn+std-weight",
        "pgnn+pg-neuron",
        "pgnn+pg-weight",
    ] {
        assert!(metrics.lines().any(|l| l.starts_with(&format!("{label},"))), "{label} missing");
    }
    let sweep = fs::read_to_string(cmp.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 8 * 11);
    let trace = fs::read_to_string(cmp.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap().split(',').count(), 10);

    // Rerunning a stage reproduces its outputs byte for byte.
    let model = fs::read(d.join("runs/pgnn/model.pgnn")).unwrap();
    let log = fs::read(d.join("runs/pgnn/training_log.csv")).unwrap();
    ok(&["train", "--config", &pg_cfg]);
    assert_eq!(fs::read(d.join("runs/pgnn/model.pgnn")).unwrap(), model);
    assert_eq!(fs::read(d.join("runs/pgnn/training_log.csv")).unwrap(), log);

    // Eval and export on a single run.
    let written = ok(&["eval", "--config", &pg_cfg]);
    assert_eq!(written.len(), 3);
    let metrics = fs::read_to_string(d.join("runs/pgnn/metrics.csv")).unwrap();
    assert!(metrics.lines().nth(1).unwrap().starts_with("pgnn-offline,"));
    let written = ok(&["export", "--config", &pg_cfg]);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&written[0]).unwrap()).unwrap();
    assert_eq!(json["layers"].as_array().unwrap().len(), 4);
    assert_eq!(json["meta"]["lambda"], 0.36);
}

#[test]
fn untrained_model_evaluates_and_search_honours_single_point() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = write(
        d,
        "fresh.toml",
        "out_dir = \"run\"\n[data]\nraw = \"raw.csv\"\nsupervised = \"supervised\"\n[synth]\nn_minutes = 600\n[train]\nepochs = 0\n[search]\nparameter = \"lambda\"\nvalues = [0.36]\n",
    );
    let dd = d.to_str().unwrap();
    ok(&["synth", "--config", &cfg, "--out", dd]);
    ok(&["ingest", "--config", &cfg, "--out", dd]);
    ok(&["train", "--config", &cfg]);
    ok(&["eval", "--config", &cfg]);
    let m = fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert!(m.lines().nth(1).unwrap().starts_with("std-offline,"));

    ok(&["search", "--config", &cfg]);
    let table = fs::read_to_string(d.join("run/search_lambda.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);
    let best: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("run/search_lambda.json")).unwrap()).unwrap();
    assert_eq!(best["best"], 0.36);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = d.to_str().unwrap();

    let unknown = write(d, "unknown.toml", "[train]\nlamda = 0.3\n");
    let r = pgnn(&["train", "--config", &unknown, "--out", out]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("lamda"));

    let missing = write(d, "missing.toml", "[data]\nsupervised = \"nowhere\"\n");
    let r = pgnn(&["train", "--config", &missing, "--out", out]);
    assert_eq!(r.status.code(), Some(3));

    let r = pgnn(&["train", "--config", &d.join("absent.toml").to_string_lossy(), "--out", out]);
    assert_eq!(r.status.code(), Some(3));

    let r = pgnn(&["train", "--out", out]);
    assert_eq!(r.status.code(), Some(2));

    let diverge = write(
        d,
        "diverge.toml",
        "[data]\nraw = \"raw.csv\"\nsupervised = \"supervised\"\n[synth]\nn_minutes = 400\n[train]\nepochs = 200\nlearning_rate = 1e8\noptimizer = \"sgd\"\n",
    );
    ok(&["synth", "--config", &diverge, "--out", out]);
    ok(&["ingest", "--config", &diverge, "--out", out]);
    let r = pgnn(&["train", "--config", &diverge, "--out", &d.join("m").to_string_lossy()]);
    assert_eq!(r.status.code(), Some(4), "{}", String::from_utf8_lossy(&r.stderr));

    let pg_without_physics = write(
        d,
        "pgprune.toml",
        "[data]\nsupervised = \"supervised\"\n[train]\nepochs = 1\n",
    );
    let model_dir = d.join("std");
    ok(&["train", "--config", &pg_without_physics, "--out", &model_dir.to_string_lossy()]);
    let prune = write(
        d,
        "prune.toml",
        "[data]\nsupervised = \"supervised\"\n[prune]\nbase_model = \"std/model.pgnn\"\nscheme = \"physics-guided\"\nkind = \"neuron\"\n",
    );
    let r = pgnn(&["prune", "--config", &prune, "--out", &d.join("p").to_string_lossy()]);
    assert_eq!(r.status.code(), Some(2));
}
