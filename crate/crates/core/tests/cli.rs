use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use openuas::io::{read_embeddings, EMBEDDING_COLUMNS};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_openuas"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
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

/// synth -> aggregate -> train in `dir`; returns the embedding path.
fn trained(dir: &Path, seed: &str) -> PathBuf {
    ok(dir, &["synth", "--per-archetype", "5", "--seed", "7", "--out", "stays.csv"]);
    ok(dir, &["aggregate", "--stays", "stays.csv", "--out", "table.csv", "--fine", "fine.csv"]);
    let out = format!("emb{seed}.csv");
    ok(
        dir,
        &[
            "train", "--table", "table.csv", "--seed", seed, "--epochs", "60", "--batch-areas", "16", "--out", &out,
            "--model", "model.txt",
        ],
    );
    dir.join(out)
}

#[test]
fn pipeline_produces_cluster_map() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir, "1");
    ok(dir, &["cluster", "--embeddings", "emb1.csv", "--k", "5", "--seed", "3"]);
    ok(dir, &["export-geojson", "--embeddings", "emb1.csv", "--k", "5", "--out", "map.geojson"]);
    let gj: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("map.geojson")).unwrap()).unwrap();
    assert_eq!(gj["type"], "FeatureCollection");
    let features = gj["features"].as_array().unwrap();
    assert_eq!(features.len(), 20);
    for f in features {
        let c = f["properties"]["cluster"].as_u64().unwrap();
        assert!(c < 5);
        assert_eq!(f["geometry"]["type"], "Polygon");
    }

    ok(
        dir,
        &[
            "profile", "--embeddings", "emb1.csv", "--k", "5", "--table", "table.csv", "--fine", "fine.csv", "--out",
            "profile.csv", "--svg-dir", "svg",
        ],
    );
    let profile = std::fs::read_to_string(dir.join("profile.csv")).unwrap();
    assert_eq!(profile.lines().next().unwrap(), "cluster,day_type,slot,duration_bin,mean_visits");
    assert_eq!(profile.lines().count(), 1 + 5 * 672);
    assert!(dir.join("svg/cluster4.svg").exists());

    let loss: f64 = ok(dir, &["approx-loss", "--model", "model.txt", "--table", "table.csv"]).trim().parse().unwrap();
    assert!((0.0..0.2).contains(&loss), "{loss}");
}

#[test]
fn cluster_columns_are_filled_per_k() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let emb = trained(dir, "2");
    for k in ["5", "10", "20"] {
        ok(dir, &["cluster", "--embeddings", "emb2.csv", "--k", k, "--seed", "1"]);
    }
    let file = read_embeddings(&emb).unwrap();
    assert_eq!(file.rows.len(), 20);
    for r in &file.rows {
        assert!(r.cluster5.unwrap() < 5);
        assert!(r.cluster10.unwrap() < 10);
        assert!(r.cluster20.unwrap() < 20);
    }
    // 20 areas into 20 clusters: every label used once
    let mut labels: Vec<usize> = file.rows.iter().map(|r| r.cluster20.unwrap()).collect();
    labels.sort();
    assert_eq!(labels, (0..20).collect::<Vec<_>>());
}

#[test]
fn misalign_of_identical_files_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir, "3");
    let out = ok(dir, &["misalign", "emb3.csv", "emb3.csv"]);
    assert_eq!(out, "euclidean,0\ncosine,0\n");
}

#[test]
fn outputs_are_deterministic_given_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let a = std::fs::read(trained(dir, "4")).unwrap();
    ok(
        dir,
        &["train", "--table", "table.csv", "--seed", "4", "--epochs", "60", "--batch-areas", "16", "--out", "again.csv"],
    );
    assert_eq!(a, std::fs::read(dir.join("again.csv")).unwrap());
    let c = std::fs::read(trained(dir, "5")).unwrap();
    assert_ne!(a, c);
}

#[test]
fn anchored_training_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir, "6");
    ok(dir, &["synth", "--per-archetype", "4", "--seed", "99", "--out", "source.csv"]);
    ok(
        dir,
        &[
            "gen-anchors", "--stays", "source.csv", "--anchors", "4", "--records", "500", "--seed", "2", "--epochs", "40",
            "--batch-areas", "16", "--out-data", "anchors.csv", "--out-embeddings", "anchor_emb.csv",
        ],
    );
    let data = std::fs::read_to_string(dir.join("anchors.csv")).unwrap();
    assert_eq!(data.lines().count(), 1 + 4 * 500);
    for line in data.lines().skip(1) {
        let f: Vec<u32> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(f[1] % 15, 0);
        assert_eq!(f[2] % 15, 0);
    }
    for seed in ["1", "2"] {
        ok(
            dir,
            &[
                "train-anchored", "--table", "table.csv", "--anchor-data", "anchors.csv", "--anchor-embeddings",
                "anchor_emb.csv", "--seed", seed, "--epochs", "40", "--batch-areas", "16", "--out",
                &format!("anch{seed}.csv"),
            ],
        );
    }
    let out = ok(dir, &["misalign", "anch1.csv", "anch2.csv"]);
    let euclid: f64 = out.lines().next().unwrap().trim_start_matches("euclidean,").parse().unwrap();
    assert!(euclid.is_finite() && euclid > 0.0);

    // anchor embeddings of the wrong dimension are a configuration error
    std::fs::write(dir.join("bad_emb.csv"), "anchor_id,v0,v1\n0,1,2\n1,1,2\n2,1,2\n3,1,2\n").unwrap();
    let bad = run(
        dir,
        &[
            "train-anchored", "--table", "table.csv", "--anchor-data", "anchors.csv", "--anchor-embeddings",
            "bad_emb.csv", "--seed", "1", "--out", "x.csv",
        ],
    );
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn search_and_resolve() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let emb = trained(dir, "7");
    let file = read_embeddings(&emb).unwrap();
    let q = &file.rows[0].geocode;
    let out = ok(dir, &["search", "--embeddings", "emb7.csv", "--query", q, "--threshold", "-1"]);
    let mut lines = out.lines();
    assert_eq!(lines.next().unwrap(), "area_id,similarity");
    assert_eq!(lines.count(), 19);

    let v = ok(dir, &["resolve", "--embeddings", "emb7.csv", "--geocode", q]);
    assert_eq!(v.trim(), openuas::io::format_list(&file.rows[0].vector));

    // 50m code missing, 250m parent present
    let mut text = std::fs::read_to_string(&emb).unwrap();
    text = text.replacen(&format!("\n{q},"), &format!("\n{},", &q[..10]), 1);
    std::fs::write(dir.join("parent.csv"), text).unwrap();
    let v = ok(dir, &["resolve", "--embeddings", "parent.csv", "--geocode", q]);
    assert_eq!(v.trim(), openuas::io::format_list(&file.rows[0].vector));
    let missing = run(dir, &["resolve", "--embeddings", "emb7.csv", "--geocode", "533946111122"]);
    assert_eq!(missing.status.code(), Some(3));
    let malformed = run(dir, &["resolve", "--embeddings", "emb7.csv", "--geocode", "533946110000"]);
    assert_eq!(malformed.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(run(dir, &["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(dir, &["frobnicate"]).status.code(), Some(2));
    // randomness requires an explicit seed
    assert_eq!(run(dir, &["synth", "--out", "s.csv"]).status.code(), Some(2));
    assert_eq!(
        run(dir, &["aggregate", "--stays", "missing.csv", "--out", "t.csv"]).status.code(),
        Some(3)
    );
    std::fs::write(dir.join("bad.csv"), "user_id,latitude,longitude,arrival,duration_minutes\nu,35.0,139.0,yesterday,5\n")
        .unwrap();
    let out = run(dir, &["aggregate", "--stays", "bad.csv", "--out", "t.csv"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.csv:2"));
}

#[test]
fn header_only_embeddings_are_empty() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("empty.csv"), EMBEDDING_COLUMNS.join(",") + "\n").unwrap();
    ok(dir, &["export-geojson", "--embeddings", "empty.csv", "--out", "empty.geojson"]);
    let gj: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("empty.geojson")).unwrap()).unwrap();
    assert_eq!(gj["features"].as_array().unwrap().len(), 0);
}
