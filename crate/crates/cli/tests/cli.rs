use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedkit::io;
use tempfile::TempDir;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn fedkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedkit"))
        .args(args)
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

#[test]
fn eval_on_perfect_fixture() {
    let d = fixtures().join("perfect");
    let o = fedkit(&[
        "eval",
        "--predictions",
        p(&d.join("predictions.csv")),
        "--gt",
        p(&d.join("ground_truth.csv")),
        "--verification",
        p(&d.join("verification.csv")),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o), "mAP,1.000000\n");
}

#[test]
fn trim_below_header_fails_with_one_line() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out.csv");
    let input = fixtures().join("perfect/predictions.csv");
    let o = fedkit(&[
        "trim",
        "--input",
        p(&input),
        "--output",
        p(&out),
        "--max-bytes",
        "10",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error: invalid-argument: "), "{err}");
    assert!(!out.exists());
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(fedkit(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(fedkit(&["nms", "--bogus"]).status.code(), Some(2));
    assert_eq!(fedkit(&["nms", "--input", "x.csv"]).status.code(), Some(2));
    assert_eq!(fedkit(&["--help"]).status.code(), Some(0));
}

#[test]
fn malformed_input_names_file_and_line() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.csv");
    fs::write(
        &bad,
        format!(
            "{}\nim,c,0.5,0,0,1,1,,,\nim,c,x,0,0,1,1,,,\n",
            io::PREDICTION_HEADER
        ),
    )
    .unwrap();
    let o = fedkit(&[
        "nms",
        "--input",
        p(&bad),
        "--output",
        p(&tmp.path().join("o.csv")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error: parse: "), "{err}");
    assert!(err.contains("bad.csv") && err.contains("line 3"), "{err}");
}

#[test]
fn assign_then_loss() {
    let d = fixtures().join("assign");
    let tmp = TempDir::new().unwrap();
    let labels = tmp.path().join("labels.csv");
    let o = fedkit(&[
        "assign",
        "--rois",
        p(&d.join("rois.csv")),
        "--gt",
        p(&d.join("ground_truth.csv")),
        "--verification",
        p(&d.join("verification.csv")),
        "--image",
        "im1",
        "--output",
        p(&labels),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(&labels).unwrap(),
        "roi_index,category_id,label\n0,A,1\n0,B,-1\n1,A,-1\n1,B,-1\n2,A,1\n2,B,-1\n"
    );

    let logits = tmp.path().join("logits.csv");
    let mut text = String::from("roi_index,category_id,logit\n");
    for r in 0..3 {
        for c in ["A", "B"] {
            text.push_str(&format!("{r},{c},0\n"));
        }
    }
    fs::write(&logits, text).unwrap();
    let o = fedkit(&["loss", "--labels", p(&labels), "--logits", p(&logits)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let loss: f64 = stdout(&o).trim().parse().unwrap();
    assert!((loss - 6.0 * 2f64.ln()).abs() < 1e-12);
}

#[test]
fn partition_and_sample() {
    let d = fixtures().join("assign");
    let tmp = TempDir::new().unwrap();
    let parts = tmp.path().join("parts");
    let o = fedkit(&[
        "partition-pool",
        "--rois",
        p(&d.join("rois.csv")),
        "--parts",
        "2",
        "--output-dir",
        p(&parts),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let read_pool =
        |f: &str| io::parse_roi_pool(fs::File::open(parts.join(f)).unwrap(), usize::MAX).unwrap();
    let (a, b) = (read_pool("part-0.csv"), read_pool("part-1.csv"));
    assert_eq!(a.get("im1").unwrap().len() + b.get("im1").unwrap().len(), 3);
    assert!(b.get("im2").is_none());

    let sampled = tmp.path().join("sampled.csv");
    let (rois, gt) = (d.join("rois.csv"), d.join("ground_truth.csv"));
    let args = [
        "sample-rois",
        "--rois",
        p(&rois),
        "--gt",
        p(&gt),
        "--n-sample",
        "2",
        "--seed",
        "7",
        "--output",
        p(&sampled),
    ];
    assert_eq!(fedkit(&args).status.code(), Some(0));
    let first = fs::read(&sampled).unwrap();
    assert_eq!(fedkit(&args).status.code(), Some(0));
    assert_eq!(fs::read(&sampled).unwrap(), first);
    let s = io::parse_sampled(first.as_slice()).unwrap();
    assert_eq!(s["im1"].len(), 2);
    assert_eq!(s["im2"], [0]);
}

#[test]
fn lr_table() {
    let o = fedkit(&[
        "lr",
        "--batch-size",
        "240",
        "--total-steps",
        "10",
        "--steps",
        "0,5,10",
    ]);
    assert_eq!(
        stdout(&o),
        "step,progress,lr\n0,0,0.3\n5,0.5,0.15\n10,1,0\n"
    );
    assert_eq!(
        fedkit(&["lr", "--total-steps", "10"]).status.code(),
        Some(2)
    );
    assert_eq!(
        fedkit(&["lr", "--eta0", "1", "--total-steps", "10", "--steps", "11"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn rank_split_filter_and_restrict() {
    let tmp = TempDir::new().unwrap();
    let stats = tmp.path().join("stats.csv");
    let mut text = String::from("category_id,count\n");
    for i in 0..120 {
        text.push_str(&format!("c{i:03},{}\n", 1000 - i));
    }
    fs::write(&stats, text).unwrap();
    for (k, size) in [(1, 50), (2, 25), (5, 10)] {
        let groups = tmp.path().join(format!("groups-{k}.csv"));
        let o = fedkit(&[
            "split-experts",
            "--by",
            "rank",
            "--stats",
            p(&stats),
            "--start",
            "50",
            "--end",
            "100",
            "--num-experts",
            &k.to_string(),
            "--output",
            p(&groups),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let g = io::parse_groups(fs::File::open(&groups).unwrap()).unwrap();
        assert_eq!(g.len(), k);
        assert!(g.iter().all(|g| g.categories.len() == size));
    }

    let groups = tmp.path().join("groups.csv");
    fs::write(&groups, "group_index,category_id\n0,B\n1,A\n").unwrap();
    let d = fixtures().join("perfect");
    let (gt, ver, images) = (
        tmp.path().join("gt.csv"),
        tmp.path().join("v.csv"),
        tmp.path().join("im.csv"),
    );
    let o = fedkit(&[
        "filter-expert",
        "--gt",
        p(&d.join("ground_truth.csv")),
        "--verification",
        p(&d.join("verification.csv")),
        "--group-file",
        p(&groups),
        "--output-gt",
        p(&gt),
        "--output-verification",
        p(&ver),
        "--output-images",
        p(&images),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&images).unwrap(), "image_id\nim2\nim3\n");
    assert_eq!(
        fs::read_to_string(&ver).unwrap(),
        "image_id,category_id,verification\nim2,B,1\nim3,B,1\n"
    );

    let restricted = tmp.path().join("r.csv");
    let o = fedkit(&[
        "restrict",
        "--input",
        p(&d.join("predictions.csv")),
        "--group-file",
        p(&groups),
        "--group-index",
        "1",
        "--output",
        p(&restricted),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let preds = io::parse_predictions(fs::File::open(&restricted).unwrap()).unwrap();
    assert!(preds.len() == 2 && preds.iter().all(|p| p.category_id == "A"));
    let o = fedkit(&[
        "restrict",
        "--input",
        p(&d.join("predictions.csv")),
        "--group-file",
        p(&groups),
        "--group-index",
        "2",
        "--output",
        p(&restricted),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

/// The four-step chain run by hand, returning the files it wrote.
fn manual_chain(dir: &Path, threads: &str) -> Vec<(String, Vec<u8>)> {
    let f = fixtures().join("pipeline");
    let run = |args: &[&str]| {
        let mut all = vec!["--threads", threads];
        all.extend_from_slice(args);
        let o = fedkit(&all);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        o
    };
    let (ens, drop, trim, report, eval) = (
        dir.join("ens.csv"),
        dir.join("drop.csv"),
        dir.join("trim.csv"),
        dir.join("trim-report.csv"),
        dir.join("eval.csv"),
    );
    run(&[
        "ensemble",
        p(&f.join("generalist_a.csv")),
        p(&f.join("generalist_b.csv")),
        "--output",
        p(&ens),
    ]);
    run(&[
        "drop-small-masks",
        "--input",
        p(&ens),
        "--min-area",
        "100",
        "--output",
        p(&drop),
    ]);
    run(&[
        "trim",
        "--input",
        p(&drop),
        "--max-bytes",
        "3000",
        "--output",
        p(&trim),
        "--report",
        p(&report),
    ]);
    run(&[
        "eval",
        "--predictions",
        p(&trim),
        "--gt",
        p(&f.join("ground_truth.csv")),
        "--verification",
        p(&f.join("verification.csv")),
        "--mode",
        "mask",
        "--report",
        p(&eval),
    ]);
    [ens, drop, trim, report, eval]
        .iter()
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(p).unwrap(),
            )
        })
        .collect()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let f = fixtures().join("pipeline");
    let path = dir.join("config.toml");
    let body = body.replace("{F}", p(&f));
    fs::write(&path, body).unwrap();
    path
}

#[test]
fn pipeline_equals_manual_subcommands() {
    let tmp = TempDir::new().unwrap();
    let manual = manual_chain(tmp.path(), "2");
    let config = write_config(
        tmp.path(),
        r#"
[[stage]]
name = "ensemble"
inputs = ["{F}/generalist_a.csv", "{F}/generalist_b.csv"]

[[stage]]
name = "drop-small-masks"
min_area = 100

[[stage]]
name = "trim"
max_bytes = 3000

[[stage]]
name = "eval"
gt = "{F}/ground_truth.csv"
verification = "{F}/verification.csv"
mode = "mask"
"#,
    );
    let run_dir = tmp.path().join("run");
    let o = fedkit(&["pipeline", "--config", p(&config), "--run-dir", p(&run_dir)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let names = [
        "01-ensemble.csv",
        "02-drop-small-masks.csv",
        "03-trim.csv",
        "03-trim-report.csv",
        "04-eval.csv",
    ];
    for ((manual_name, bytes), name) in manual.iter().zip(names) {
        assert_eq!(
            &fs::read(run_dir.join(name)).unwrap(),
            bytes,
            "{manual_name} vs {name}"
        );
    }
    assert!(stdout(&o).ends_with(&format!(
        "{}\n",
        stdout(&fedkit(&[
            "eval",
            "--predictions",
            p(&run_dir.join("03-trim.csv")),
            "--gt",
            p(&fixtures().join("pipeline/ground_truth.csv")),
            "--verification",
            p(&fixtures().join("pipeline/verification.csv")),
            "--mode",
            "mask",
        ]))
        .trim()
    )));
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(run_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "succeeded");
    assert_eq!(manifest["stages"][2]["params"]["max_bytes"], 3000);
    assert_eq!(manifest["stages"][1]["inputs"][0], "@run/01-ensemble.csv");
}

#[test]
fn single_stage_pipeline_equals_bare_subcommand() {
    let tmp = TempDir::new().unwrap();
    let f = fixtures().join("pipeline");
    let bare = tmp.path().join("bare.csv");
    assert_eq!(
        fedkit(&[
            "nms",
            "--input",
            p(&f.join("generalist_a.csv")),
            "--output",
            p(&bare)
        ])
        .status
        .code(),
        Some(0)
    );
    let config = write_config(
        tmp.path(),
        "run_dir = \"run\"\n[[stage]]\nname = \"nms\"\ninput = \"{F}/generalist_a.csv\"\n",
    );
    let o = fedkit(&["pipeline", "--config", p(&config)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        fs::read(tmp.path().join("run/01-nms.csv")).unwrap(),
        fs::read(&bare).unwrap()
    );
}

#[test]
fn missing_input_fails_before_any_stage() {
    let tmp = TempDir::new().unwrap();
    let config = write_config(
        tmp.path(),
        r#"
[[stage]]
name = "nms"
input = "{F}/generalist_a.csv"

[[stage]]
name = "eval"
gt = "{F}/does_not_exist.csv"
verification = "{F}/verification.csv"
"#,
    );
    let run_dir = tmp.path().join("run");
    let o = fedkit(&["pipeline", "--config", p(&config), "--run-dir", p(&run_dir)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).starts_with("error: missing-file: "),
        "{}",
        stderr(&o)
    );
    assert!(!run_dir.join("01-nms.csv").exists());
}

#[test]
fn invalid_stage_config_fails_before_any_stage() {
    let tmp = TempDir::new().unwrap();
    for body in [
        "[[stage]]\nname = \"nms\"\ninput = \"{F}/generalist_a.csv\"\n[[stage]]\nname = \"teleport\"\n",
        "[[stage]]\nname = \"nms\"\ninput = \"{F}/generalist_a.csv\"\niou_threshold = 1.5\n",
        "[[stage]]\nname = \"nms\"\ninput = \"{F}/generalist_a.csv\"\nbogus = 1\n",
        "[[stage]]\nname = \"drop-small-masks\"\n",
        "[[stage]]\nname = \"nms\"\ninput = \"{F}/generalist_a.csv\"\nthreads = 2\n",
    ] {
        let config = write_config(tmp.path(), body);
        let run_dir = tmp.path().join("run");
        let o = fedkit(&["pipeline", "--config", p(&config), "--run-dir", p(&run_dir)]);
        assert_eq!(o.status.code(), Some(1), "{body}");
        assert_eq!(stderr(&o).lines().count(), 1, "{}", stderr(&o));
        assert!(!run_dir.exists(), "{body}");
    }
}

#[test]
fn failing_stage_is_recorded_in_manifest() {
    let tmp = TempDir::new().unwrap();
    // Ground truth of another fixture is not verified by this table.
    let config = write_config(
        tmp.path(),
        &format!(
            r#"
[[stage]]
name = "nms"
input = "{{F}}/generalist_a.csv"

[[stage]]
name = "eval"
gt = "{}"
verification = "{{F}}/verification.csv"

[[stage]]
name = "nms"
input = "{{F}}/generalist_b.csv"
"#,
            p(&fixtures().join("perfect/ground_truth.csv"))
        ),
    );
    let run_dir = tmp.path().join("run");
    let o = fedkit(&["pipeline", "--config", p(&config), "--run-dir", p(&run_dir)]);
    assert_eq!(o.status.code(), Some(1));
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(run_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "failed");
    assert_eq!(manifest["stages"][0]["status"], "succeeded");
    assert_eq!(manifest["stages"][1]["status"], "failed");
    assert!(manifest["stages"][1]["error"]
        .as_str()
        .unwrap()
        .starts_with("error: validation: "));
    assert_eq!(manifest["stages"][2]["status"], "skipped");
    assert!(!run_dir.join("03-nms.csv").exists());
}

#[test]
fn thread_count_does_not_change_outputs() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    assert_eq!(manual_chain(a.path(), "1"), manual_chain(b.path(), "4"));
}
