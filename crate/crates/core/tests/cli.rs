//! End-to-end runs of the binary against the bundled fixture corpus.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ebike_agents::ingest::load_structured;
use ebike_agents::metrics::ConfusionCounts;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ebike-agents"))
        .args(args)
        .env_remove("EBIKE_LLM_API_KEY")
        .env_remove("EBIKE_LLM_ENDPOINT")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn extract_fixture(out_dir: &Path) {
    let out = run(&[
        "extract",
        "--input",
        fixture("reports.csv").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "extract failed: {}", stderr(&out));
}

#[test]
fn extract_writes_structured_jsonl_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "extract",
        "--input",
        fixture("reports.csv").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("total=40"), "{text}");
    assert!(text.contains("ebike_yes=34"), "{text}");
    let records = load_structured(&dir.path().join("structured.jsonl")).unwrap();
    assert_eq!(records.len(), 40);
    assert!(dir.path().join("rejects.csv").exists());
}

#[test]
fn llm_backend_without_credentials_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "extract",
        "--input",
        fixture("reports.csv").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--backend",
        "llm",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("configuration"), "{}", stderr(&out));
}

#[test]
fn fit_emits_both_models_and_lr_block() {
    let dir = tempfile::tempdir().unwrap();
    extract_fixture(dir.path());
    let out = run(&[
        "fit",
        "--input",
        fixture("reports.csv").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("Full model"), "{text}");
    assert!(text.contains("Restricted model"), "{text}");
    assert!(text.contains("Likelihood ratio test"), "{text}");
    assert!(text.contains("df = 3"), "{text}");
    assert!(dir.path().join("fit_report.txt").exists());
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("fit_report.json")).unwrap())
            .unwrap();
    assert_eq!(json["lr_test"]["df"], 3);
    assert_eq!(json["full"]["coefficients"].as_array().unwrap().len(), 7);
    assert_eq!(
        json["restricted"]["coefficients"].as_array().unwrap().len(),
        4
    );
    // Nested fits share the thresholds-only null likelihood.
    assert_eq!(json["full"]["ll_null"], json["restricted"]["ll_null"]);
}

#[test]
fn fit_without_extract_fails_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "fit",
        "--input",
        fixture("reports.csv").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).contains("run `extract` first"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn fit_refuses_single_severity_corpus() {
    let dir = tempfile::tempdir().unwrap();
    // A corpus where every admissible record shares one severity level.
    let input = dir.path().join("flat.csv");
    let mut csv = String::from("record_id,year,state,narrative,age,gender,severity\n");
    for i in 0..20 {
        csv += &format!("F{i},2021,CA,\"Rider {i} crashed his e-bike into a wall.\",40,Male,3\n");
    }
    std::fs::write(&input, csv).unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&[
        "extract",
        "--input",
        input.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = run(&[
        "fit",
        "--input",
        input.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).contains("not identifiable"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn fit_dummy_coding_flag_changes_report_coding() {
    let dir = tempfile::tempdir().unwrap();
    extract_fixture(dir.path());
    let out = run(&[
        "fit",
        "--input",
        fixture("reports.csv").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--dummy-coding",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("dummy coding"), "{text}");
    assert!(text.contains("age_senior"), "{text}");
}

#[test]
fn evaluate_scores_fixture_truth() {
    let dir = tempfile::tempdir().unwrap();
    extract_fixture(dir.path());
    let out = run(&[
        "evaluate",
        "--truth",
        fixture("truth.csv").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    // Hand-derived from the fixture narratives and annotations:
    // 9 true positives, one miss (SaddleSeat) and one spurious call
    // (DriveSystem) give 14/15.
    assert!(text.contains("Weighted F1 score: 0.93"), "{text}");
    let json: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("evaluation_report.json")).unwrap(),
    )
    .unwrap();
    let w = json["weighted_f1"].as_f64().unwrap();
    assert!((w - 14.0 / 15.0).abs() < 1e-12, "weighted {w}");
    let classes = json["classes"].as_array().unwrap();
    let counts = |name: &str| -> ConfusionCounts {
        let c = classes
            .iter()
            .find(|c| c["class_name"] == name)
            .unwrap_or_else(|| panic!("{name}"));
        ConfusionCounts {
            tp: c["counts"]["tp"].as_u64().unwrap() as usize,
            fp: c["counts"]["fp"].as_u64().unwrap() as usize,
            fn_: c["counts"]["fn"].as_u64().unwrap() as usize,
            tn: c["counts"]["tn"].as_u64().unwrap() as usize,
        }
    };
    let brake = counts("BrakeSystem");
    assert_eq!((brake.tp, brake.fp, brake.fn_), (2, 0, 0));
    let saddle = counts("SaddleSeat");
    assert_eq!((saddle.tp, saddle.fp, saddle.fn_), (1, 0, 1));
    let drive = counts("DriveSystem");
    assert_eq!((drive.tp, drive.fp, drive.fn_), (0, 1, 0));
}

#[test]
fn evaluate_published_count_corpus_prints_087() {
    use ebike_agents::ingest::{write_structured, StructuredIncident};

    // One synthetic record per confusion-cell occurrence, per class.
    let rows: [(&str, usize, usize, usize); 9] = [
        ("BrakeSystem", 23, 1, 8),
        ("Pedals", 91, 0, 23),
        ("WheelTire", 37, 3, 3),
        ("SaddleSeat", 1, 0, 2),
        ("FrontFork", 11, 1, 4),
        ("Visibility", 4, 2, 0),
        ("DriveSystem", 4, 1, 0),
        ("Frame", 5, 0, 2),
        ("SteeringSystem", 6, 0, 4),
    ];
    let mut records = Vec::new();
    let mut truth = String::from("record_id,class,caused\n");
    for (class, tp, fp, fn_) in rows {
        let component = ebike_agents::agents::Component::parse(class).unwrap();
        for i in 0..tp + fp + fn_ {
            let id = format!("{class}-{i}");
            let mut record = StructuredIncident::empty(&id);
            record.is_ebike = true;
            if i < tp + fp {
                record.components_related = vec![component];
                record.components_caused = vec![component];
            }
            let caused_in_truth = i < tp || i >= tp + fp;
            truth += &format!("{id},{class},{caused_in_truth}\n");
            records.push(record);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    write_structured(&records, &dir.path().join("structured.jsonl")).unwrap();
    let truth_path = dir.path().join("truth.csv");
    std::fs::write(&truth_path, truth).unwrap();

    let out = run(&[
        "evaluate",
        "--truth",
        truth_path.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("Weighted F1 score: 0.87"), "{text}");
}

#[test]
fn evaluate_perfect_predictions_score_one() {
    let dir = tempfile::tempdir().unwrap();
    extract_fixture(dir.path());
    // Build truth directly from the extracted caused-by sets.
    let records = load_structured(&dir.path().join("structured.jsonl")).unwrap();
    let mut truth = String::from("record_id,class,caused\n");
    let mut annotated = 0;
    for r in &records {
        for c in &r.components_caused {
            truth += &format!("{},{},true\n", r.record_id, c.name());
            annotated += 1;
        }
    }
    assert!(annotated > 0);
    let truth_path = dir.path().join("perfect.csv");
    std::fs::write(&truth_path, truth).unwrap();
    let out = run(&[
        "evaluate",
        "--truth",
        truth_path.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(
        stdout(&out).contains("Weighted F1 score: 1.00"),
        "{}",
        stdout(&out)
    );
}

#[test]
fn evaluate_rejects_empty_truth_and_unknown_ids() {
    let dir = tempfile::tempdir().unwrap();
    extract_fixture(dir.path());

    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "record_id,class,caused\n").unwrap();
    let out = run(&[
        "evaluate",
        "--truth",
        empty.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).contains("no annotation rows"),
        "{}",
        stderr(&out)
    );

    let unknown = dir.path().join("unknown.csv");
    std::fs::write(&unknown, "record_id,class,caused\nGHOST,BrakeSystem,true\n").unwrap();
    let out = run(&[
        "evaluate",
        "--truth",
        unknown.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("GHOST"), "{}", stderr(&out));
}

#[test]
fn report_emits_manifest_and_expected_files() {
    let dir = tempfile::tempdir().unwrap();
    extract_fixture(dir.path());
    let out = run(&[
        "report",
        "--input",
        fixture("reports.csv").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    for name in [
        "causes_by_age_gender.csv",
        "causes_by_age_gender.svg",
        "severity_by_group.csv",
        "severity_by_group.svg",
        "cause_type_distribution.csv",
        "cause_type_distribution.svg",
        "component_links.csv",
        "component_links.svg",
        "fit_report.txt",
        "fit_report.json",
        "manifest.json",
    ] {
        assert!(dir.path().join(name).exists(), "missing {name}");
    }
    // Every component row keeps related >= caused.
    let links = std::fs::read_to_string(dir.path().join("component_links.csv")).unwrap();
    for line in links.lines().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        let related: usize = parts[1].parse().unwrap();
        let caused: usize = parts[2].parse().unwrap();
        assert!(related >= caused, "{line}");
    }
}

#[test]
fn all_runs_the_whole_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "all",
        "--input",
        fixture("reports.csv").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--truth",
        fixture("truth.csv").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    for name in [
        "structured.jsonl",
        "fit_report.json",
        "evaluation_report.json",
        "manifest.json",
    ] {
        assert!(dir.path().join(name).exists(), "missing {name}");
    }
    let text = stdout(&out);
    assert!(text.contains("Weighted F1 score"), "{text}");
}
