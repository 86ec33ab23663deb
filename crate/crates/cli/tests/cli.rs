use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use layerbench_core::annotation::{MaterialClass, TagLabel, TagLabels};
use layerbench_core::formats;
use layerbench_core::scene::toy_two_layer;
use layerbench_core::synth::{detect_tags, tag_scene, CalibrationScenario};
use tempfile::TempDir;

fn layerbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_layerbench"))
        .args(args)
        .env_remove("LAYERBENCH_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = layerbench(args);
    assert!(
        out.status.success(),
        "layerbench {args:?} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Toy {
    dir: TempDir,
}

impl Toy {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        for sub in ["ann", "pred"] {
            std::fs::create_dir(dir.path().join(sub)).unwrap();
        }
        std::fs::write(dir.path().join("toy.json"), toy_two_layer().to_json()).unwrap();
        Toy { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn render(&self, threads: &str) {
        ok(&[
            "--threads",
            threads,
            "render",
            "--scene",
            s(&self.path("toy.json")),
            "--out",
            s(&self.path("toy.mlgt")),
            "--ann",
            s(&self.path("ann/toy.ann")),
        ]);
    }

    fn predict(&self, sigma: &str, threads: &str) {
        ok(&[
            "--threads",
            threads,
            "--seed",
            "7",
            "predict-oracle",
            "--gt",
            s(&self.path("toy.mlgt")),
            "--sigma",
            sigma,
            "--out",
            s(&self.path("pred/toy.mlfl")),
        ]);
    }

    fn evaluate(&self, out: &str, threads: &str, extra: &[&str]) -> Output {
        let (ann, pred, out) = (self.path("ann"), self.path("pred"), self.path(out));
        let mut args = vec!["--threads", threads, "evaluate", "--ann", s(&ann), "--pred", s(&pred), "--out", s(&out)];
        args.extend_from_slice(extra);
        ok(&args)
    }
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let out = layerbench(&["evaluate", "--pred", "p"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--ann"), "{err}");
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn zero_threads_is_rejected() {
    assert_eq!(layerbench(&["--threads", "0", "report", "--in", "x"]).status.code(), Some(2));
}

#[test]
fn stereo_calibration_needs_image_size() {
    assert_eq!(layerbench(&["calibrate", "--obs", "o", "--out", "c", "--stereo"]).status.code(), Some(2));
}

#[test]
fn empty_dataset_is_a_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = layerbench(&["evaluate", "--ann", s(dir.path()), "--pred", s(dir.path()), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[EmptyDataset]"));
}

#[test]
fn missing_input_file_reports_the_path() {
    let out = layerbench(&["prune", "--in", "/nonexistent/x.mlfl", "--out", "/tmp/never.mlfl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/x.mlfl"));
}

#[test]
fn malformed_mlfl_is_rejected_without_panicking() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.mlfl");
    std::fs::write(&bad, b"MLFLnot really").unwrap();
    let out = layerbench(&["prune", "--in", s(&bad), "--out", s(&dir.path().join("o.mlfl"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error["));
}

#[test]
fn exact_oracle_scores_zero_everywhere() {
    let toy = Toy::new();
    toy.render("2");
    toy.predict("0", "2");
    let out = toy.evaluate("report", "2", &[]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let txt = std::fs::read_to_string(toy.path("report/report.txt")).unwrap();
    assert_eq!(stdout, txt);
    for category in ["All", "Transparent", "Reflective", "Diffuse", "Layer 1", "Layer 2"] {
        let row = txt.lines().find(|l| l.starts_with(category)).unwrap_or_else(|| panic!("no {category} row in\n{txt}"));
        let cells: Vec<&str> = row[category.len()..].split_whitespace().skip(1).collect();
        assert!(!cells.is_empty());
        assert!(cells.iter().all(|c| *c == "0.00"), "{row}");
    }
    let csv = std::fs::read_to_string(toy.path("report/report.csv")).unwrap();
    assert!(csv.starts_with("subset,category,pixels,epe,bad_1,"));

    // `report` re-renders the saved JSON identically.
    let json = toy.path("report/report.json");
    let again = ok(&["report", "--in", s(&json)]);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), txt);
    let csv_path = toy.path("again.csv");
    ok(&["report", "--in", s(&json), "--format", "csv", "--out", s(&csv_path)]);
    assert_eq!(std::fs::read_to_string(csv_path).unwrap(), csv);
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let toy = Toy::new();
    let mut runs = Vec::new();
    for threads in ["1", "8"] {
        toy.render(threads);
        let gt = std::fs::read(toy.path("toy.mlgt")).unwrap();
        toy.predict("0.5", threads);
        let pred = std::fs::read(toy.path("pred/toy.mlfl")).unwrap();
        let dir = format!("report{threads}");
        toy.evaluate(&dir, threads, &[]);
        let csv = std::fs::read(toy.path(&format!("{dir}/report.csv"))).unwrap();
        let txt = std::fs::read(toy.path(&format!("{dir}/report.txt"))).unwrap();
        runs.push((gt, pred, csv, txt));
    }
    assert!(runs[0] == runs[1], "thread count changed the output");
}

#[test]
fn single_layer_workaround_scores_layer_one_only() {
    let toy = Toy::new();
    toy.render("2");
    toy.predict("0", "2");
    let raw = formats::decode_mlfl(&std::fs::read(toy.path("pred/toy.mlfl")).unwrap()).unwrap();
    let n = raw.pixel_count();
    let mut one = raw.clone();
    one.n_layers = 1;
    one.dx.truncate(n);
    one.dy.truncate(n);
    one.valid.truncate(n);
    std::fs::write(toy.path("pred/toy.mlfl"), formats::encode_mlfl(&one)).unwrap();

    toy.evaluate("first", "2", &["--subset", "first", "--workaround", "single"]);
    let csv = std::fs::read_to_string(toy.path("first/report.csv")).unwrap();
    let all = csv.lines().find(|l| l.starts_with("first,All,")).unwrap();
    let cells: Vec<&str> = all.split(',').skip(3).collect();
    assert!(cells.iter().all(|c| c.parse::<f64>().unwrap() == 0.0), "{all}");
}

#[test]
fn prune_is_idempotent_through_the_cli() {
    let toy = Toy::new();
    toy.render("2");
    toy.predict("0.3", "2");
    let (a, b, c) = (toy.path("pred/toy.mlfl"), toy.path("p1.mlfl"), toy.path("p2.mlfl"));
    ok(&["prune", "--in", s(&a), "--out", s(&b)]);
    ok(&["prune", "--in", s(&b), "--out", s(&c)]);
    assert_eq!(std::fs::read(b).unwrap(), std::fs::read(c).unwrap());
}

#[test]
fn capture_pipeline_from_observations_to_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let truth = CalibrationScenario::default_stereo(5);
    let (left, right) = truth.observe_stereo(0.1, 6);
    let obs: Vec<_> = left.into_iter().chain(right).collect();
    std::fs::write(p("obs.jsonl"), formats::write_observations(&obs)).unwrap();
    let size = format!("{}x{}", truth.rig.image_size.0, truth.rig.image_size.1);
    ok(&["calibrate", "--obs", s(&p("obs.jsonl")), "--out", s(&p("calib.json")), "--stereo", "--image-size", &size]);

    let cal = formats::parse_calibration(&std::fs::read_to_string(p("calib.json")).unwrap()).unwrap();
    let rig = cal.rig.expect("stereo rig written");
    assert!((rig.baseline() - truth.rig.baseline()).abs() < 1e-3, "baseline {}", rig.baseline());

    ok(&["rectify", "--calib", s(&p("calib.json")), "--out", s(&p("rect.json"))]);
    assert!(std::fs::metadata(p("rect.json")).unwrap().len() > 0);

    let tags = tag_scene(9, 6);
    std::fs::write(p("det.jsonl"), formats::write_detections(&detect_tags(&truth.rig, &tags), Some(truth.rig.image_size)))
        .unwrap();
    let labels: TagLabels = tags
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let material = if i % 2 == 0 { MaterialClass::Diffuse } else { MaterialClass::Transparent };
            (t.id, TagLabel { material, layer: 1 + (i % 2) as u32 })
        })
        .collect();
    std::fs::write(p("labels.json"), serde_json::to_string(&labels).unwrap()).unwrap();
    ok(&[
        "annotate",
        "--detections",
        s(&p("det.jsonl")),
        "--calib",
        s(&p("calib.json")),
        "--labels",
        s(&p("labels.json")),
        "--out",
        s(&p("scene.ann")),
    ]);
    let set = formats::decode_annotations(&std::fs::read_to_string(p("scene.ann")).unwrap()).unwrap();
    assert_eq!(set.scene_id, "scene");
    assert!(!set.annotations.is_empty());
    assert!(set.annotations.iter().any(|a| a.layer == 2 && a.transparent));
}
