use std::path::Path;
use std::process::{Command, Output};

use gauss_kgc::eval::EvalReport;
use gauss_kgc::kg::{load_background_graph, load_tasks, GraphOptions, Split};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gauss-kgc"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--out", dir.to_str().unwrap(), "--entities", "60", "--q", "10"];
    if !extra.contains(&"--pool") {
        args.extend(["--pool", "20"]);
    }
    args.extend_from_slice(extra);
    let out = run(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    // named flags precede the trailing config overrides
    let (named, overrides): (Vec<&str>, Vec<&str>) = match extra.first() {
        Some(&"--config") | Some(&"--resume") => (extra[..2].to_vec(), extra[2..].to_vec()),
        _ => (Vec::new(), extra.to_vec()),
    };
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend(named);
    args.extend_from_slice(&[
        "--dim",
        "8",
        "--layers",
        "2",
        "--max-steps",
        "6",
        "--eval-every",
        "3",
        "--batch-size",
        "16",
    ]);
    args.extend(overrides);
    run(&args)
}

#[test]
fn synth_writes_five_loadable_files_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, &[]);
    synth(&b, &[]);
    let mut names: Vec<String> =
        std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["dev_tasks.json", "path_graph", "rel2candidates.json", "test_tasks.json", "train_tasks.json"]);
    for n in &names {
        assert_eq!(std::fs::read(a.join(n)).unwrap(), std::fs::read(b.join(n)).unwrap(), "{n}");
    }
    let (mut vocab, graph) = load_background_graph(&a, GraphOptions::default()).unwrap();
    assert!(!graph.triples().is_empty());
    let tasks = load_tasks(&a, &mut vocab).unwrap();
    assert_eq!(tasks.split(Split::Train).len(), 3);

    let c = tmp.path().join("c");
    synth(&c, &["--seed", "12"]);
    assert_ne!(std::fs::read(a.join("path_graph")).unwrap(), std::fs::read(c.join("path_graph")).unwrap());
}

#[test]
fn train_writes_run_directory_and_echoes_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &[]);
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "# desk run\nm = 4\nseed = 5\n").unwrap();
    let out_dir = tmp.path().join("run1");
    let out = train(&data, &out_dir, &["--config", cfg.to_str().unwrap(), "--m", "8"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["checkpoint.bin", "train.jsonl", "resolved.cfg", "manifest.json"] {
        assert!(out_dir.join(f).is_file(), "{f} missing");
    }
    let resolved = std::fs::read_to_string(out_dir.join("resolved.cfg")).unwrap();
    assert!(resolved.lines().any(|l| l == "m = 8"), "{resolved}");
    assert!(resolved.lines().any(|l| l == "seed = 5"));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["data_sha256"].as_str().unwrap().len(), 64);
    let log = std::fs::read_to_string(out_dir.join("train.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);
}

#[test]
fn same_seed_runs_log_identically_and_resume_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &[]);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(train(&data, &a, &[]).status.success());
    assert!(train(&data, &b, &[]).status.success());
    let log_a = std::fs::read(a.join("train.jsonl")).unwrap();
    assert_eq!(log_a, std::fs::read(b.join("train.jsonl")).unwrap());

    let ckpt = a.join("checkpoint.bin");
    let out = train(&data, &b, &["--resume", ckpt.to_str().unwrap(), "--max-steps", "9"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(b.join("train.jsonl")).unwrap();
    let steps: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, (1..=9).collect::<Vec<_>>());
}

#[test]
fn missing_data_dir_exits_2_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("no-such-data");
    let out = train(&missing, &tmp.path().join("out"), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(missing.to_str().unwrap()));
}

#[test]
fn invalid_config_exits_1_and_usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &[]);
    let out = train(&data, &tmp.path().join("o"), &["--no-such-key", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
    let out = train(&data, &tmp.path().join("o"), &["--lr", "-1"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(run(&["train"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

fn eval_json(stdout: &[u8]) -> EvalReport {
    let text = String::from_utf8_lossy(stdout);
    let json = text.split("\n\n").next().unwrap();
    serde_json::from_str(json).expect("eval JSON parses")
}

#[test]
fn eval_prints_json_and_table_for_each_split() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &[]);
    let run_dir = tmp.path().join("run");
    assert!(train(&data, &run_dir, &[]).status.success());
    let ckpt = run_dir.join("checkpoint.bin");
    let eval = |split: &str| run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--split", split]);

    let dev = eval("dev");
    let test = eval("test");
    assert!(dev.status.success() && test.status.success());
    let (dev, test) = (eval_json(&dev.stdout), eval_json(&test.stdout));
    assert!(dev.per_relation.keys().all(|r| !test.per_relation.contains_key(r)));
    assert!(dev.overall.n_queries > 0);

    let out = eval("test");
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    let report = eval_json(&out.stdout);
    let again: EvalReport = serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
    assert_eq!(again, report);
    let header = text.lines().find(|l| l.starts_with("relation")).expect("table header");
    let cols: Vec<&str> = header.split_whitespace().collect();
    assert_eq!(cols[1..5], ["MRR", "Hits@10", "Hits@5", "Hits@1"]);
}

#[test]
fn single_candidate_pools_rank_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &[]);
    let run_dir = tmp.path().join("run");
    assert!(train(&data, &run_dir, &["--max-steps", "1"]).status.success());

    // every test query shares one tail, which is also the only candidate
    type Tasks = serde_json::Map<String, serde_json::Value>;
    let read = |f: &str| -> Tasks { serde_json::from_str(&std::fs::read_to_string(data.join(f)).unwrap()).unwrap() };
    let mut tasks = read("test_tasks.json");
    let mut pools = read("rel2candidates.json");
    for (rel, triples) in tasks.iter_mut() {
        let triples = triples.as_array_mut().unwrap();
        let tail = triples[0][2].clone();
        for t in triples.iter_mut() {
            t[2] = tail.clone();
        }
        pools.insert(rel.clone(), serde_json::json!([tail]));
    }
    std::fs::write(data.join("test_tasks.json"), serde_json::to_string(&tasks).unwrap()).unwrap();
    std::fs::write(data.join("rel2candidates.json"), serde_json::to_string(&pools).unwrap()).unwrap();

    let ckpt = run_dir.join("checkpoint.bin");
    let out = run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--filtered", "true"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(text.lines().any(|l| l.starts_with("all") && l.split_whitespace().nth(1) == Some("1.000")), "{text}");
    assert_eq!(eval_json(&out.stdout).overall.mrr, 1.0);
}

#[test]
fn eval_rejects_mismatched_data() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &[]);
    let run_dir = tmp.path().join("run");
    assert!(train(&data, &run_dir, &[]).status.success());
    let other = tmp.path().join("other");
    let out = run(&["synth", "--out", other.to_str().unwrap(), "--entities", "80", "--q", "10", "--pool", "20"]);
    assert!(out.status.success());
    let ckpt = run_dir.join("checkpoint.bin");
    let out = run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", other.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("60") && err.contains("80"), "{err}");
}

#[test]
fn gradcheck_reports_every_component_and_fails_at_zero_tolerance() {
    let out = run(&["gradcheck", "--seed", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    for c in ["projection", "attention", "aggregation.mean", "aggregation.variance", "relation_update", "loss.completion", "loss.umi", "loss.kl", "loss.joint"] {
        assert!(text.lines().any(|l| l.starts_with(c) && l.ends_with("ok")), "{c}\n{text}");
    }
    let other = String::from_utf8_lossy(&run(&["gradcheck", "--seed", "5"]).stdout).into_owned();
    assert_ne!(text, other);
    assert_eq!(run(&["gradcheck", "--tolerance", "0"]).status.code(), Some(1));
}

#[test]
fn ablate_emits_one_row_per_variant_with_shared_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &[]);
    let out_dir = tmp.path().join("abl");
    let out = run(&[
        "ablate", "--data", data.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--seeds", "3",
        "--dim", "8", "--layers", "2", "--max-steps", "2", "--batch-size", "8",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(text.starts_with("# seeds: 3\n"));
    let table: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("ablation.json")).unwrap()).unwrap();
    let rows = table["rows"].as_array().unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(
        names,
        ["Full model", "w/o UR", "w/o Uncertainty Estimation", "w/o Uncertainty Attention", "w/o UMI loss", "w/o KL loss", "w/o UMI and KL"]
    );
    for r in &rows[1..] {
        let diff = r["diff"].as_array().unwrap();
        let expect = if r["variant"] == "w/o UMI and KL" { 2 } else { 1 };
        assert_eq!(diff.len(), expect, "{r}");
        assert!(r["runs"].as_array().unwrap().iter().all(|run| run["seed"] == 3));
    }
}

#[test]
fn lr_grid_steps_by_fixed_increment() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &[]);
    let out_dir = tmp.path().join("grid");
    let out = run(&[
        "lr-grid", "--from", "1e-4", "--to", "3e-4", "--data", data.to_str().unwrap(), "--out", out_dir.to_str().unwrap(),
        "--dim", "8", "--layers", "2", "--max-steps", "2", "--eval-every", "2", "--batch-size", "8",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let points: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("lr_grid.json")).unwrap()).unwrap();
    let lrs: Vec<f64> = points.as_array().unwrap().iter().map(|p| p["lr"].as_f64().unwrap()).collect();
    assert_eq!(lrs.len(), 3);
    assert!((lrs[1] - 2e-4).abs() < 1e-12 && (lrs[2] - 3e-4).abs() < 1e-12);
}
