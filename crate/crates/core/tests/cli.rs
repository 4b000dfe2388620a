use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use protodiv::bagdata::{load_manifest, manifest_path};
use protodiv::divider::{check_partition, pseudo_bag_sizes, read_assignments_csv, AssignmentRecord};
use protodiv::mil::checkpoint;

fn protodiv(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protodiv"))
        .args(["--log-level", "warn"])
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn small_corpus(dir: &Path) {
    ok(protodiv(
        &["gen", "--out", "data", "--bags", "12", "--k-min", "10", "--k-max", "30", "--dim", "6", "--phenotypes", "2", "--witness", "0.2"],
        dir,
    ));
}

#[test]
fn gen_writes_corpus_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(protodiv(&["gen", "--out", "data", "--bags", "8", "--k-min", "5", "--k-max", "9", "--dim", "4", "--seed", "3"], dir.path()));
    let cfg: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg["num_bags"], 8);
    assert_eq!(cfg["seed"], 3);
    let manifest = load_manifest(&manifest_path(&dir.path().join("data"))).unwrap();
    assert_eq!(manifest.entries.len(), 8);
    assert_eq!(manifest.dim, 4);
    assert!(dir.path().join("data/synth_config.json").exists());

    ok(protodiv(&["gen", "--out", "again", "--bags", "8", "--k-min", "5", "--k-max", "9", "--dim", "4", "--seed", "3"], dir.path()));
    for name in ["manifest.csv", "synth_config.json", "bags/bag_0003.pdiv", "bags/bag_0003.pdiv.coords.csv"] {
        assert_eq!(fs::read(dir.path().join("data").join(name)).unwrap(), fs::read(dir.path().join("again").join(name)).unwrap());
    }
}

#[test]
fn usage_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["gen", "--out", "x", "--witness", "1.5"][..],
        &["gen", "--out", "x", "--sigma", "-1"],
        &["divide", "--data", "x", "--n", "0"],
        &["divide", "--data", "x", "--scheme", "voronoi"],
        &["train"],
        &["frobnicate"],
        &["--log-level", "loud", "gen", "--out", "x"],
    ] {
        let out = protodiv(args, dir.path());
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
    assert!(!dir.path().join("x").exists());
}

#[test]
fn runtime_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = protodiv(&["divide", "--data", "missing", "--scheme", "random"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn divide_writes_one_row_per_instance() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    let manifest = load_manifest(&manifest_path(&dir.path().join("data"))).unwrap();
    let total: usize = manifest.entries.iter().map(|e| e.num_instances).sum();
    for scheme in ["random", "kmeans", "proto_mean", "proto-attn"] {
        let file = format!("{scheme}.csv");
        ok(protodiv(&["divide", "--data", "data", "--scheme", scheme, "--n", "4", "--l", "3", "--hidden-dim", "8", "--out", &file], dir.path()));
        let records = read_assignments_csv(fs::File::open(dir.path().join(&file)).unwrap()).unwrap();
        assert_eq!(records.len(), total, "{scheme}");
        assert!(records.iter().all(|r| r.pseudo_bag < 4 && r.section < 3 && r.x.is_some()));
    }
    let stdout = ok(protodiv(&["divide", "--data", "data", "--scheme", "random", "--n", "2"], dir.path())).stdout;
    assert_eq!(String::from_utf8(stdout).unwrap().lines().count(), total + 1);

    let stdout = ok(protodiv(&["divide", "--data", "data", "--scheme", "proto_mean", "--n", "1"], dir.path())).stdout;
    let records = read_assignments_csv(stdout.as_slice()).unwrap();
    assert!(records.iter().all(|r| r.pseudo_bag == 0));
}

#[test]
fn divide_csv_reproduces_a_valid_partition() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    let (n, l) = (3, 4);
    ok(protodiv(&["divide", "--data", "data", "--scheme", "proto_mean", "--n", "3", "--l", "4", "--out", "a.csv"], dir.path()));
    let records = read_assignments_csv(fs::File::open(dir.path().join("a.csv")).unwrap()).unwrap();
    let mut by_bag: BTreeMap<&str, Vec<&AssignmentRecord>> = BTreeMap::new();
    for r in &records {
        by_bag.entry(r.bag_id.as_str()).or_default().push(r);
    }
    assert_eq!(by_bag.len(), 12);
    for rows in by_bag.values() {
        assert!(rows.iter().enumerate().all(|(i, r)| r.instance_index == i));
        let pseudo_bags: Vec<usize> = rows.iter().map(|r| r.pseudo_bag).collect();
        let sections: Vec<usize> = rows.iter().map(|r| r.section).collect();
        check_partition(&pseudo_bags, n).unwrap();
        for s in 0..l {
            let counts = pseudo_bag_sizes(
                &pseudo_bags.iter().zip(&sections).filter(|(_, &x)| x == s).map(|(&p, _)| p).collect::<Vec<_>>(),
                n,
            );
            assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        }
    }
}

#[test]
fn divide_skips_small_bags_and_fails_when_none_remain() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    let out = ok(protodiv(&["divide", "--data", "data", "--scheme", "random", "--n", "20", "--out", "a.csv"], dir.path()));
    let manifest = load_manifest(&manifest_path(&dir.path().join("data"))).unwrap();
    let small = manifest.entries.iter().filter(|e| e.num_instances < 20).count();
    assert!(small > 0);
    assert_eq!(String::from_utf8_lossy(&out.stderr).matches("skipping").count(), small);

    let out = protodiv(&["divide", "--data", "data", "--scheme", "random", "--n", "31"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_writes_metrics_timings_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    ok(protodiv(
        &[
            "train", "--data", "data", "--scheme", "proto_attn", "--n", "3", "--l", "4", "--epochs", "2", "--hidden-dim", "8",
            "--out", "m.json", "--checkpoint-dir", "ck",
        ],
        dir.path(),
    ));
    let doc: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("m.json")).unwrap()).unwrap();
    assert_eq!(doc["config"]["divider"]["scheme"], "proto_attn");
    assert_eq!(doc["report"]["folds"].as_array().unwrap().len(), 4);
    assert!(doc["report"]["auc"]["mean"].is_number());
    assert!(!fs::read_to_string(dir.path().join("m.json")).unwrap().contains("seconds"));
    let timings: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("m.timings.json")).unwrap()).unwrap();
    assert_eq!(timings["fold_seconds"].as_array().unwrap().len(), 4);

    for fold in 0..4 {
        let (net, cfg) = checkpoint::load(&dir.path().join(format!("ck/fold_{fold}_mil.ckpt"))).unwrap();
        assert_eq!((net.input_dim(), net.hidden_dim()), (6, 8));
        assert_eq!(cfg["kind"], "mil");
        assert!(dir.path().join(format!("ck/fold_{fold}_prototype.ckpt")).exists());
    }

    ok(protodiv(
        &["divide", "--data", "data", "--scheme", "proto_attn", "--n", "2", "--checkpoint", "ck/fold_0_prototype.ckpt", "--out", "d.csv"],
        dir.path(),
    ));
    let wrong = protodiv(
        &["divide", "--data", "data", "--scheme", "proto_attn", "--checkpoint", "ck/fold_0_mil.ckpt"],
        dir.path(),
    );
    assert_eq!(wrong.status.code(), Some(1));
}

#[test]
fn sweep_bench_and_export() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    ok(protodiv(
        &["sweep", "--data", "data", "--n-values", "2,3", "--l-values", "2,3", "--epochs", "1", "--hidden-dim", "8", "--out", "s.csv"],
        dir.path(),
    ));
    let sweep = fs::read_to_string(dir.path().join("s.csv")).unwrap();
    assert_eq!(sweep.lines().next().unwrap(), "l,n_1,n_2,n_3");
    assert_eq!(sweep.lines().count(), 3);
    let n1: Vec<&str> = sweep.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(n1[0], n1[1]);

    let bench = ok(protodiv(&["bench", "--data", "data", "--hidden-dim", "8"], dir.path())).stdout;
    let bench = String::from_utf8(bench).unwrap();
    assert_eq!(bench.lines().count(), 5);
    for s in ["random", "kmeans", "proto_mean", "proto_attn"] {
        assert!(bench.lines().any(|l| l.starts_with(&format!("{s},"))));
    }

    for kind in ["mean", "attention"] {
        let file = format!("{kind}.csv");
        ok(protodiv(&["export-prototypes", "--data", "data", "--kind", kind, "--hidden-dim", "8", "--out", &file], dir.path()));
        let text = fs::read_to_string(dir.path().join(&file)).unwrap();
        assert_eq!(text.lines().count(), 13);
        assert!(text.starts_with("bag_id,label,v_0,"));
    }
}
