use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nextshot::cli::{run, CHECKPOINT_FILE, LOSS_FILE, REPORT_FILE, RUN_CONFIG_FILE};

fn nextshot(args: &[&str]) -> i32 {
    run(std::iter::once("nextshot").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pipeline(root: &Path) {
    let (data, train, samples, eval) = (root.join("data"), root.join("train"), root.join("samples"), root.join("eval"));
    assert_eq!(
        nextshot(&["gen-data", "--seed", "3", "--n", "12", "--image-size", "16", "--curate", "--out", s(&data)]),
        0
    );
    assert_eq!(
        nextshot(&[
            "train",
            "--seed",
            "3",
            "--data",
            s(&data),
            "--steps",
            "6",
            "--curated-steps",
            "3",
            "--batch-size",
            "2",
            "--lr",
            "1e-3",
            "--out",
            s(&train),
        ]),
        0
    );
    let ckpt = train.join(CHECKPOINT_FILE);
    assert_eq!(
        nextshot(&[
            "sample",
            "--seed",
            "3",
            "--checkpoint",
            s(&ckpt),
            "--data",
            s(&data),
            "--steps",
            "4",
            "--out",
            s(&samples)
        ]),
        0
    );
    assert_eq!(nextshot(&["eval", "--seed", "3", "--gen", s(&samples), "--gt", s(&data), "--out", s(&eval)]), 0);
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let files = [
        "data/manifest.jsonl",
        "train/losses.csv",
        "train/checkpoint.nsck",
        "train/run_config.json",
        "samples/manifest.jsonl",
        "eval/report.json",
    ];
    let mut out: BTreeMap<PathBuf, Vec<u8>> =
        files.iter().map(|f| (PathBuf::from(f), fs::read(root.join(f)).unwrap())).collect();
    for entry in fs::read_dir(root.join("samples/images")).unwrap() {
        let p = entry.unwrap().path();
        out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
    }
    out
}

#[test]
fn pipeline_outputs_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("run");
    pipeline(&root);
    let first = snapshot(&root);
    fs::remove_dir_all(&root).unwrap();
    pipeline(&root);
    let second = snapshot(&root);
    assert_eq!(first.keys().collect::<Vec<_>>(), second.keys().collect::<Vec<_>>());
    for (k, v) in &first {
        assert!(second[k] == *v, "{} differs between runs", k.display());
    }
    assert!(first.keys().any(|k| k.to_string_lossy().ends_with("_gen.ppm")));
    let losses = String::from_utf8(first[Path::new("train/losses.csv")].clone()).unwrap();
    assert_eq!(losses.lines().count(), 1 + 6 + 3);
    let report: serde_json::Value = serde_json::from_slice(&first[Path::new("eval/report.json")]).unwrap();
    assert_eq!(report["samples"], 12);
    assert!(root.join("train").join(RUN_CONFIG_FILE).exists());
    assert!(root.join("eval").join(REPORT_FILE).exists() && root.join("train").join(LOSS_FILE).exists());
}

#[test]
fn exit_codes_separate_usage_from_runtime_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(nextshot(&["no-such-command"]), 1);
    assert_eq!(nextshot(&["gen-data", "--n", "4", "--mix", "not-a-pattern", "--out", s(&out)]), 1);
    assert_eq!(nextshot(&["inspect-mask", "--lengths", "1,2,3", "--out", s(&out)]), 1);
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"modle": {}}"#).unwrap();
    assert_eq!(nextshot(&["gen-data", "--config", s(&cfg), "--out", s(&out)]), 1);
    assert_eq!(nextshot(&["--help"]), 0);

    let held = dir.path().join("held");
    assert_eq!(nextshot(&["gen-data", "--n", "4", "--split", "heldout", "--image-size", "16", "--out", s(&held)]), 0);
    assert_eq!(nextshot(&["train", "--data", s(&held), "--steps", "1", "--out", s(&dir.path().join("t"))]), 2);
    assert_eq!(nextshot(&["eval", "--gen", s(&dir.path().join("missing")), "--gt", s(&held), "--out", s(&out)]), 2);
}

#[test]
fn gen_data_writes_one_manifest_line_per_pair() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    assert_eq!(nextshot(&["gen-data", "--n", "10", "--image-size", "16", "--out", s(&out)]), 0);
    let text = fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 10);
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join(RUN_CONFIG_FILE)).unwrap()).unwrap();
    assert_eq!(cfg["hash"].as_str().unwrap().len(), 64);
}

fn pgm_dims(bytes: &[u8]) -> (usize, usize) {
    let header = String::from_utf8_lossy(&bytes[..32]);
    let mut it = header.split_ascii_whitespace();
    assert_eq!(it.next(), Some("P5"));
    (it.next().unwrap().parse().unwrap(), it.next().unwrap().parse().unwrap())
}

fn matrix_rows(dir: &Path) -> Vec<Vec<u8>> {
    fs::read_to_string(dir.join("block_matrix.txt"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split_ascii_whitespace().skip(1).map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn inspect_mask_prints_segment_matrices() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    assert_eq!(nextshot(&["inspect-mask", "--lengths", "2,3,3,4,4", "--out", s(&full)]), 0);
    let expected_full = [[1, 0, 0, 1, 1], [0, 1, 0, 1, 0], [0, 0, 1, 0, 1], [1, 1, 0, 1, 1], [1, 0, 1, 1, 1]];
    assert_eq!(matrix_rows(&full), expected_full.iter().map(|r| r.to_vec()).collect::<Vec<_>>());
    assert_eq!(pgm_dims(&fs::read(full.join("mask.pgm")).unwrap()), (16, 16));

    let norel = dir.path().join("norel");
    assert_eq!(nextshot(&["inspect-mask", "--layout", "no-rel", "--lengths", "2,3,3,4,4", "--out", s(&norel)]), 0);
    let expected_norel = [[1, 0, 1, 0], [0, 1, 0, 1], [1, 0, 1, 1], [0, 1, 1, 1]];
    assert_eq!(matrix_rows(&norel), expected_norel.iter().map(|r| r.to_vec()).collect::<Vec<_>>());
    assert_eq!(pgm_dims(&fs::read(norel.join("mask.pgm")).unwrap()), (14, 14));

    let default = dir.path().join("default");
    assert_eq!(nextshot(&["inspect-mask", "--out", s(&default)]), 0);
    assert_eq!(pgm_dims(&fs::read(default.join("mask.pgm")).unwrap()), (150, 150));
}

#[test]
fn stream_curation_recovers_keyframe_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let stream = dir.path().join("stream");
    assert_eq!(
        nextshot(&["gen-stream", "--shots", "5", "--frames-per-shot", "6", "--image-size", "16", "--out", s(&stream)]),
        0
    );
    let cuts: Vec<usize> =
        serde_json::from_str(&fs::read_to_string(stream.join("planted_cuts.json")).unwrap()).unwrap();
    assert_eq!(cuts.len(), 4);
    let cur = dir.path().join("cur");
    assert_eq!(nextshot(&["curate-stream", "--stream", s(&stream.join("stream.nst")), "--out", s(&cur)]), 0);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(cur.join("keyframes.json")).unwrap()).unwrap();
    assert_eq!(summary["spans"].as_array().unwrap().len(), 5);
}
