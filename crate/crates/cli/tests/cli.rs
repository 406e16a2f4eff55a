use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ofkit::data::{Dataset, Image};
use ofkit::eval::{read_detections_jsonl, DetectionRecord};
use ofkit::model::{Model, ModelConfig};
use ofkit_cli::{
    cmd_eval, cmd_synth_data, cmd_train, ConfigArgs, EvalArgs, SynthArgs, TrainArgs, CHECKPOINT_FILE, EXIT_DATA,
    EXIT_OK, EXIT_USAGE, LOG_FILE, SEED_ENV,
};

fn ofkit(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ofkit"));
    cmd.args(args).env("RUST_LOG", "warn").env_remove(SEED_ENV);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn toy() -> ConfigArgs {
    ConfigArgs {
        config: None,
        profile: "toy".into(),
        seed: None,
    }
}

fn synth(root: &Path, train: u64, test: u64) -> (PathBuf, PathBuf) {
    let out = cmd_synth_data(&SynthArgs {
        config: toy(),
        output: Some(root.to_path_buf()),
        train_count: Some(train),
        test_count: Some(test),
    })
    .unwrap();
    (out.train, out.test)
}

fn gt_records(ds: &Dataset) -> Vec<DetectionRecord> {
    ds.items
        .iter()
        .flat_map(|item| {
            item.instances.iter().map(|i| DetectionRecord {
                image: item.id.clone(),
                class: ds.labels.name(i.class).unwrap().to_string(),
                score: 1.0,
                cx: i.bbox.cx,
                cy: i.bbox.cy,
                w: i.bbox.w,
                h: i.bbox.h,
                theta: i.bbox.theta,
            })
        })
        .collect()
}

fn write_records(path: &Path, records: &[DetectionRecord]) {
    let mut f = fs::File::create(path).unwrap();
    ofkit::eval::write_detections_jsonl(records, &mut f).unwrap();
}

fn eval_dump(dump: &Path, data: &Path, out: &Path) -> ofkit::eval::EvalReport {
    cmd_eval(&EvalArgs {
        config: toy(),
        detections: Some(dump.to_path_buf()),
        data: Some(data.to_path_buf()),
        output: Some(out.to_path_buf()),
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn unknown_suite_exits_with_usage_code() {
    let o = ofkit(&["verify", "no-such-suite"], &[]);
    assert_eq!(code(&o), EXIT_USAGE);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no-such-suite"));
}

#[test]
fn missing_arguments_exit_with_usage_code() {
    assert_eq!(code(&ofkit(&["infer"], &[])), EXIT_USAGE);
    assert_eq!(code(&ofkit(&["frobnicate"], &[])), EXIT_USAGE);
    assert_eq!(code(&ofkit(&["--help"], &[])), EXIT_OK);
}

#[test]
fn verify_writes_machine_readable_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("verify.json");
    let o = ofkit(&["verify", "invariants", "--output", s(&out)], &[]);
    assert_eq!(code(&o), EXIT_OK);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let text = v.to_string();
    assert!(text.contains("invariants"), "{}", text);
}

#[test]
fn invalid_config_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "profile = \"toy\"\nno_such_key = 3\n").unwrap();
    let o = ofkit(&["train", "--config", s(&cfg)], &[]);
    assert_eq!(code(&o), EXIT_USAGE);

    fs::write(
        &cfg,
        ofkit::config::RunConfig::toy()
            .to_toml_string()
            .unwrap()
            .replace("lr = 0.001", "lr = -1.0"),
    )
    .unwrap();
    assert_eq!(code(&ofkit(&["train", "--config", s(&cfg)], &[])), EXIT_USAGE);
    assert_eq!(code(&ofkit(&["train", "--profile", "huge"], &[])), EXIT_USAGE);
}

#[test]
fn missing_dataset_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = ofkit(
        &[
            "train",
            "--train-data",
            s(&dir.path().join("absent")),
            "--output",
            s(dir.path()),
        ],
        &[],
    );
    assert_eq!(code(&o), EXIT_DATA);
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent"));
}

#[test]
fn checkpoint_problems_exit_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let (_, test) = synth(&dir.path().join("data"), 0, 3);
    let ck = dir.path().join("two.ofk");
    let cfg = ModelConfig {
        classes: 2,
        ..ModelConfig::toy()
    };
    Model::new(cfg, 0).unwrap().save(&ck).unwrap();
    let o = ofkit(
        &[
            "eval",
            "--checkpoint",
            s(&ck),
            "--data",
            s(&test),
            "--output",
            s(dir.path()),
        ],
        &[],
    );
    assert_eq!(code(&o), EXIT_DATA, "{}", String::from_utf8_lossy(&o.stderr));

    let bytes = fs::read(&ck).unwrap();
    fs::write(&ck, &bytes[..bytes.len() / 2]).unwrap();
    let o = ofkit(&["infer", "--checkpoint", s(&ck), "--input", s(&test)], &[]);
    assert_eq!(code(&o), EXIT_DATA);
}

#[test]
fn synth_output_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    synth(&a, 4, 2);
    synth(&b, 4, 2);
    let mut files = 0;
    for split in ["train", "test"] {
        for sub in ["images", "labelTxt"] {
            for e in fs::read_dir(a.join(split).join(sub)).unwrap() {
                let p = e.unwrap().path();
                let q = b.join(split).join(sub).join(p.file_name().unwrap());
                assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap(), "{}", p.display());
                files += 1;
            }
        }
    }
    assert_eq!(files, 12);
}

#[test]
fn ground_truth_as_detections_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let (_, test) = synth(&dir.path().join("data"), 0, 20);
    let ds = Dataset::load(&test, None).unwrap();
    let dump = dir.path().join("gt.jsonl");
    write_records(&dump, &gt_records(&ds));
    let r = eval_dump(&dump, &test, &dir.path().join("eval"));
    assert_eq!((r.ap50, r.ap75, r.ap50_95), (1.0, 1.0, 1.0));
    for f in ["report.json", "pr_iou50.csv", "pr_iou75.csv"] {
        assert!(dir.path().join("eval").join(f).is_file(), "{}", f);
    }
}

#[test]
fn empty_detections_score_zero() {
    let dir = tempfile::tempdir().unwrap();
    let (_, test) = synth(&dir.path().join("data"), 0, 5);
    let dump = dir.path().join("none.jsonl");
    write_records(&dump, &[]);
    let r = eval_dump(&dump, &test, &dir.path().join("eval"));
    assert_eq!((r.ap50, r.ap75, r.ap50_95), (0.0, 0.0, 0.0));
}

#[test]
fn infer_on_blank_image_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("blank.ppm");
    Image::filled(64, 64, 3, 0.0).unwrap().write_pnm(&img).unwrap();
    let ck = dir.path().join(CHECKPOINT_FILE);
    Model::new(ModelConfig::toy(), 3).unwrap().save(&ck).unwrap();
    let out = dir.path().join("dets.jsonl");
    let o = ofkit(
        &["infer", "--checkpoint", s(&ck), "--input", s(&img), "--output", s(&out)],
        &[],
    );
    assert_eq!(code(&o), EXIT_OK, "{}", String::from_utf8_lossy(&o.stderr));
    let records = read_detections_jsonl(&out).unwrap();
    assert!(records.len() <= 100);
    assert!(records
        .iter()
        .all(|r| r.image == "blank" && (0.0..=1.0).contains(&r.score)));

    let o = ofkit(
        &[
            "infer",
            "--checkpoint",
            s(&ck),
            "--input",
            s(&img),
            "--max-detections",
            "5",
        ],
        &[],
    );
    assert_eq!(code(&o), EXIT_OK);
    let stdout = String::from_utf8(o.stdout).unwrap();
    for line in stdout.lines() {
        serde_json::from_str::<DetectionRecord>(line).unwrap();
    }
    assert!(stdout.lines().count() <= 5);
}

#[test]
fn infer_output_feeds_eval() {
    let dir = tempfile::tempdir().unwrap();
    let (_, test) = synth(&dir.path().join("data"), 0, 4);
    let ck = dir.path().join(CHECKPOINT_FILE);
    Model::new(ModelConfig::toy(), 1).unwrap().save(&ck).unwrap();
    let dump = dir.path().join("dets.jsonl");
    let o = ofkit(
        &[
            "infer",
            "--checkpoint",
            s(&ck),
            "--input",
            s(&test),
            "--output",
            s(&dump),
        ],
        &[],
    );
    assert_eq!(code(&o), EXIT_OK);
    let direct = cmd_eval(&EvalArgs {
        config: toy(),
        checkpoint: Some(ck),
        data: Some(test.clone()),
        output: Some(dir.path().join("direct")),
        ..Default::default()
    })
    .unwrap();
    let via_dump = eval_dump(&dump, &test, &dir.path().join("dump"));
    assert!((direct.ap50 - via_dump.ap50).abs() < 1e-9);
    assert!((direct.ap50_95 - via_dump.ap50_95).abs() < 1e-9);
}

fn train_run(data: &Path, out: &Path, iterations: usize) -> (f64, Vec<serde_json::Value>) {
    let outcome = cmd_train(&TrainArgs {
        config: toy(),
        output: Some(out.to_path_buf()),
        train_data: Some(data.to_path_buf()),
        max_iterations: Some(iterations),
        ..Default::default()
    })
    .unwrap();
    let log = fs::read_to_string(out.join(LOG_FILE)).unwrap();
    let entries = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    (outcome.final_loss, entries)
}

#[test]
fn training_is_bit_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = synth(&dir.path().join("data"), 12, 0);
    let (a, log_a) = train_run(&train, &dir.path().join("a"), 4);
    let (b, log_b) = train_run(&train, &dir.path().join("b"), 4);
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(log_a.len(), 4);
    for (x, y) in log_a.iter().zip(&log_b) {
        for key in ["loss", "cls", "l1", "iou", "grad_norm", "lr"] {
            assert_eq!(
                x[key].as_f64().unwrap().to_bits(),
                y[key].as_f64().unwrap().to_bits(),
                "{}",
                key
            );
        }
    }
    let ck_a = fs::read(dir.path().join("a").join(CHECKPOINT_FILE)).unwrap();
    let ck_b = fs::read(dir.path().join("b").join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck_a, ck_b);
}

#[test]
fn seed_flag_beats_environment_beats_profile() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = synth(&dir.path().join("data"), 5, 0);
    let seed_of = |out: &Path| -> i64 {
        let text = fs::read_to_string(out.join("config.toml")).unwrap();
        let v: toml::Value = toml::from_str(&text).unwrap();
        v["seed"].as_integer().unwrap()
    };
    let run = |name: &str, extra: &[&str], env: &[(&str, &str)]| {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--train-data", s(&train), "--max-iterations", "1", "--output"];
        args.push(s(&out));
        args.extend_from_slice(extra);
        let o = ofkit(&args, env);
        assert_eq!(code(&o), EXIT_OK, "{}", String::from_utf8_lossy(&o.stderr));
        seed_of(&out)
    };
    assert_eq!(run("profile", &[], &[]), 0);
    assert_eq!(run("env", &[], &[(SEED_ENV, "7")]), 7);
    assert_eq!(run("flag", &["--seed", "9"], &[(SEED_ENV, "7")]), 9);
    let o = ofkit(&["train", "--train-data", s(&train)], &[(SEED_ENV, "seven")]);
    assert_eq!(code(&o), EXIT_USAGE);
}

/// Toy profile on the full synthetic training split: the mean loss of the
/// last ten of the first 500 iterations is at most half that of the first ten.
#[test]
fn toy_loss_halves_within_500_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = synth(&dir.path().join("data"), 2000, 0);
    let (_, log) = train_run(&train, &dir.path().join("run"), 500);
    let losses: Vec<f64> = log.iter().map(|e| e["loss"].as_f64().unwrap()).collect();
    assert_eq!(losses.len(), 500);
    let head = losses[..10].iter().sum::<f64>() / 10.0;
    let tail = losses[490..].iter().sum::<f64>() / 10.0;
    println!("loss over the first ten iterations {:.3}, last ten {:.3}", head, tail);
    assert!(tail <= 0.5 * head, "first ten {:.3}, last ten {:.3}", head, tail);
}

#[test]
fn shipped_configs_match_profiles() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["toy", "full"] {
        let loaded = ofkit::config::RunConfig::load(&dir.join(format!("{}.toml", name))).unwrap();
        assert_eq!(loaded, ofkit::config::RunConfig::profile(name).unwrap(), "{}", name);
    }
}
