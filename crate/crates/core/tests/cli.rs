//! Command-line behaviour on small constructed fixtures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bowlkit::codebook::{ExemplarInfo, ExemplarSet, Provenance};
use bowlkit::store::{write_embeddings, PatchGrid};
use bowlkit::supervision::read_targets;

const ANCHORS: &str = "[anchors]\nstrides = [32]\nscales = [32.0]\naspect_ratios = [1.0]\n";

fn bowlkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bowlkit")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// One 128x32 image cut into four 32-pixel anchors. The first anchor holds a
/// base object (patches along e0); the rest is background along e1. An
/// optional novel object sits on the last anchor, on background patches.
struct Tiny {
    dir: tempfile::TempDir,
}

impl Tiny {
    fn new(novel_on_background: bool) -> Tiny {
        let dir = tempfile::tempdir().unwrap();
        let mut data = Vec::new();
        for _row in 0..2 {
            for col in 0..8 {
                data.extend(if col < 2 { [1.0f32, 0.0] } else { [0.0, 1.0] });
            }
        }
        let grid = PatchGrid::new(1, 2, 8, 16, 16, 2, data).unwrap();
        write_embeddings(dir.path().join("emb.bwle"), &[grid]).unwrap();
        let novel = if novel_on_background {
            r#", {"image_id": 1, "bbox": [96, 0, 32, 32], "category_id": 2}"#
        } else {
            ""
        };
        let ann = format!(
            r#"{{"images": [{{"id": 1, "width": 128, "height": 32}}],
            "annotations": [{{"image_id": 1, "bbox": [0, 0, 32, 32], "category_id": 1}}{novel}],
            "categories": [{{"id": 1, "split": "base"}}, {{"id": 2, "split": "novel"}}]}}"#
        );
        fs::write(dir.path().join("ann.json"), ann).unwrap();
        let bg = ExemplarSet::from_parts(
            2,
            0.2,
            [(
                vec![0.0, 1.0],
                ExemplarInfo {
                    count: 10,
                    provenance: Provenance::default(),
                    insertion_index: 0,
                },
            )],
        )
        .unwrap();
        bg.save(dir.path().join("bg.bwlx")).unwrap();
        ExemplarSet::empty(2, 0.2).unwrap().save(dir.path().join("empty.bwlx")).unwrap();
        fs::write(
            dir.path().join("run.toml"),
            format!("embeddings = \"emb.bwle\"\nannotations = \"ann.json\"\nexemplars = \"bg.bwlx\"\n{ANCHORS}"),
        )
        .unwrap();
        Tiny { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, cmd: &str, extra: &[&str]) -> Output {
        let cfg = self.path("run.toml");
        let out = self.path("out");
        let mut args = vec![cmd, "--config", s(&cfg), "--out", s(&out)];
        args.extend_from_slice(extra);
        bowlkit(&args)
    }
}

#[test]
fn build_codebook_writes_both_sets() {
    let t = Tiny::new(false);
    let o = t.run("build-codebook", &["--top-n", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let full = ExemplarSet::load(t.path("out/exemplars.bwlx")).unwrap();
    let top = ExemplarSet::load(t.path("out/exemplars_top.bwlx")).unwrap();
    assert_eq!((full.len(), top.len()), (2, 1));
    // 12 of 16 patches are background, the most-counted exemplar.
    assert!(stdout(&o).contains("top_n_coverage\t0.750000"), "{}", stdout(&o));
}

#[test]
fn build_codebook_errors() {
    let t = Tiny::new(false);
    let o = t.run("build-codebook", &["--embeddings", "/nonexistent/emb.bwle"]);
    assert!(!o.status.success());
    let e = stderr(&o);
    assert!(e.starts_with("bowlkit:error:io:"), "{e}");
    assert!(e.to_lowercase().contains("no such file"), "{e}");

    let o = t.run("build-codebook", &["--lambda", "1.5"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("bowlkit:error:config:"));
    assert!(stderr(&o).contains("must lie in"), "{}", stderr(&o));
}

#[test]
fn one_positive_one_planted_negative() {
    let t = Tiny::new(false);
    let o = t.run("label-anchors", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), "positive\t1\nnegative\t3\nignored\t0\n");
    let labels = fs::read_to_string(t.path("out/labels.tsv")).unwrap();
    let roles: Vec<&str> = labels.lines().skip(1).map(|l| l.split('\t').nth(3).unwrap()).collect();
    assert_eq!(roles, ["positive", "negative", "negative", "negative"]);

    let o = t.run("label-anchors", &["--gamma", "1.01"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("negative\t0\n"));
    assert!(stdout(&o).contains("ignored\t3\n"));
}

#[test]
fn labeling_with_empty_exemplar_file_fails() {
    let t = Tiny::new(false);
    let empty = t.path("empty.bwlx");
    let o = t.run("label-anchors", &["--exemplars", s(&empty)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("bowlkit:error:config:"));
}

#[test]
fn targets_follow_labels() {
    let t = Tiny::new(false);
    assert!(t.run("label-anchors", &[]).status.success());
    let labels = t.path("out/labels.tsv");
    let o = t.run("assign-targets", &["--labels", s(&labels)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let recs = read_targets(t.path("out/targets.tsv")).unwrap();
    assert_eq!(recs.len(), 4);
    assert_eq!(recs[0].objectness_target, 1.0);
    assert!(recs[1..].iter().all(|r| r.objectness_target == 0.0 && r.regression_target.is_none()));

    let o = t.run("assign-targets", &["--labels", s(&t.path("missing.tsv"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("bowlkit:error:io:"));

    // Labels produced under one anchor layout do not fit another.
    let o = t.run("assign-targets", &["--labels", s(&labels), "--anchor-scales", "64"]);
    assert!(o.status.success());
    let o = t.run("assign-targets", &["--labels", s(&labels), "--anchor-strides", "16", "--anchor-scales", "32"]);
    assert!(stderr(&o).starts_with("bowlkit:error:consistency:"), "{}", stderr(&o));
}

fn report_value(table: &str, key: &str) -> String {
    table
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}\t")))
        .unwrap()
        .to_string()
}

#[test]
fn evaluate_examples() {
    let t = Tiny::new(true);
    let write = |name: &str, text: &str| {
        let p = t.path(name);
        fs::write(&p, text).unwrap();
        p
    };
    let perfect = write(
        "perfect.json",
        r#"[{"image_id": 1, "bbox": [0, 0, 32, 32], "score": 0.9},
            {"image_id": 1, "bbox": [96, 0, 32, 32], "score": 0.8}]"#,
    );
    let o = t.run("evaluate", &["--detections", s(&perfect)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(report_value(&stdout(&o), "ar_all"), "1.000000");
    // The base box claims the first detection; the second still finds the novel box.
    assert_eq!(report_value(&stdout(&o), "ar_novel"), "1.000000");

    let empty = write("empty.json", "[]");
    let o = t.run("evaluate", &["--detections", s(&empty)]);
    assert_eq!(report_value(&stdout(&o), "ar_all"), "0.000000");

    // IoU 0.8 with the base box covers thresholds 0.50 to 0.80: 7 of 10.
    let partial = write("partial.json", r#"{"annotations": [{"image_id": 1, "bbox": [0, 0, 32, 25.6], "score": 1}]}"#);
    let o = t.run("evaluate", &["--detections", s(&partial)]);
    assert_eq!(report_value(&stdout(&o), "ar_all"), "0.350000");
    assert_eq!(report_value(&stdout(&o), "recall@0.80"), "0.500000");
    assert_eq!(report_value(&stdout(&o), "recall@0.85"), "0.000000");
    assert_eq!(report_value(&stdout(&o), "ar_novel"), "0.000000");
    assert_eq!(fs::read_to_string(t.path("out/ar_report.tsv")).unwrap(), stdout(&o));
}

#[test]
fn precision_sweep() {
    let clean = Tiny::new(false);
    let o = clean.run("precision-check", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<String> = stdout(&o).lines().skip(1).map(String::from).collect();
    assert_eq!(rows, ["10\t1\t3\t1.000000", "100\t1\t3\t1.000000", "1000\t1\t3\t1.000000"]);

    // A novel box on background: one of three negatives is contaminated.
    let dirty = Tiny::new(true);
    let o = dirty.run("precision-check", &["--sweep", "1"]);
    assert_eq!(stdout(&o), "top_n\texemplars\tnegatives\tprecision\n1\t1\t3\t0.666667\n");
    let o = dirty.run("precision-check", &["--sweep", "1", "--anchor-size", "16x16"]);
    assert!(stdout(&o).ends_with("\tundefined\n"));
}

#[test]
fn probe_ab_report() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let run = |out: &Path, extra: &[&str]| {
        let mut args = vec!["probe-ab", "--seed", "3", "--out", s(out)];
        args.extend_from_slice(extra);
        bowlkit(&args)
    };
    let o = run(&a, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert!(table.starts_with("condition\tar_novel\tar_all\tseed\n"));
    assert!(table.contains("\npositives_only\t") && table.contains("\nwith_negatives\t"));
    assert!(run(&b, &[]).status.success());
    assert_eq!(fs::read(a.join("ab_report.tsv")).unwrap(), fs::read(b.join("ab_report.tsv")).unwrap());

    let o = run(&a, &["--condition", "with_negatives"]);
    assert_eq!(stdout(&o).lines().count(), 2);
    let o = run(&a, &["--condition", "negatives_only"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("bowlkit:error:usage:"));
}

#[test]
fn make_synthetic_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/synthetic");
    let cfg = fixture.join("bowlkit.toml");
    let o = bowlkit(&["make-synthetic", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["embeddings.bwle", "annotations.json", "proposals.json"] {
        assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(fixture.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn thread_count_does_not_change_outputs() {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/synthetic/bowlkit.toml");
    let dir = tempfile::tempdir().unwrap();
    let mut outs = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(threads);
        let o = bowlkit(&["build-codebook", "--config", s(&fixture), "--out", s(&out), "--threads", threads]);
        assert!(o.status.success(), "{}", stderr(&o));
        let top = out.join("exemplars_top.bwlx");
        let o = bowlkit(&["label-anchors", "--config", s(&fixture), "--out", s(&out), "--threads", threads, "--exemplars", s(&top)]);
        assert!(o.status.success(), "{}", stderr(&o));
        outs.push(fs::read(out.join("labels.tsv")).unwrap());
    }
    assert_eq!(outs[0], outs[1]);
}
