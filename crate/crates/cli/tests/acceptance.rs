//! End-to-end acceptance checks, run one after another so that the timing
//! budgets are measured on an otherwise idle core. Prints one PASS/FAIL line
//! per criterion and exits non-zero when any fails.
//!
//! Arguments that do not start with `-` select criteria by substring.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use ofkit::config::RunConfig;
use ofkit::data::synth::synthesize_scene;
use ofkit::data::Dataset;
use ofkit::verify::run_suite;
use ofkit_cli::{cmd_eval, cmd_synth_data, cmd_train, ConfigArgs, EvalArgs, SynthArgs, TrainArgs, LOG_FILE};

struct Outcome {
    passed: bool,
    detail: String,
}

type Criterion = (&'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 9] = [
    ("gaussian_pe_monte_carlo", || suite("pe-montecarlo")),
    ("wasserstein_eigen", || suite("wasserstein-eigen")),
    ("rotated_iou_raster", || suite("iou-raster")),
    ("hungarian_brute_force", || suite("hungarian-bruteforce")),
    ("gradients", || suite("gradients")),
    ("cross_attention_naive", || suite("cross-attention-naive")),
    ("invariants", || suite("invariants")),
    ("toy_training", toy_training),
    ("dota_round_trip_and_pipeline", dota_round_trip_and_pipeline),
];

fn suite(name: &str) -> Outcome {
    let r = run_suite(name, 0).expect("suite runs");
    for c in r.checks.iter().filter(|c| !c.passed) {
        eprintln!("  failed check {}: {:e} > {:e}", c.name, c.value, c.limit);
    }
    Outcome {
        passed: r.passed(),
        detail: r.summary(),
    }
}

fn toy() -> ConfigArgs {
    ConfigArgs {
        config: None,
        profile: "toy".into(),
        seed: None,
    }
}

/// Every logged rate must equal the configured schedule: warm-up ramp, then
/// a tenfold drop after each decay epoch.
fn schedule_mismatches(log: &str, cfg: &RunConfig) -> (usize, Vec<f64>) {
    let o = &cfg.optim;
    let mut bad = 0;
    let mut plateaus: Vec<f64> = Vec::new();
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).expect("log line is JSON");
        let it = v["iteration"].as_u64().expect("iteration") as usize;
        let epoch = v["epoch"].as_u64().expect("epoch") as usize;
        let lr = v["lr"].as_f64().expect("lr");
        let drops = o.decay_epochs.iter().filter(|&&d| epoch > d).count() as i32;
        let mut expected = o.lr * o.decay_factor.powi(drops);
        if it < o.warmup_iters {
            expected = expected * it as f64 / o.warmup_iters as f64;
        } else if plateaus.last() != Some(&lr) {
            plateaus.push(lr);
        }
        if (lr - expected).abs() > 1e-15 * expected.abs().max(1e-300) {
            bad += 1;
        }
    }
    (bad, plateaus)
}

fn toy_training() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let synth = cmd_synth_data(&SynthArgs {
        config: toy(),
        output: Some(dir.path().join("data")),
        train_count: Some(2000),
        test_count: Some(200),
    })
    .expect("synthetic data");
    let cfg = RunConfig::toy();
    let m = &cfg.model;
    let shape_ok = (m.depth, m.queries, m.width, m.cross_heads, m.points) == (2, 30, 64, 4, 8)
        && (cfg.data.synth.width, cfg.data.synth.height, cfg.data.synth.classes) == (64, 64, 3)
        && (cfg.data.synth.min_objects, cfg.data.synth.max_objects) == (1, 5);

    let run = dir.path().join("run");
    let start = Instant::now();
    let outcome = cmd_train(&TrainArgs {
        config: toy(),
        output: Some(run.clone()),
        train_data: Some(synth.train.clone()),
        max_iterations: Some(5000),
        ..Default::default()
    })
    .expect("training");
    let minutes = start.elapsed().as_secs_f64() / 60.0;

    let eval = cmd_eval(&EvalArgs {
        config: toy(),
        checkpoint: Some(outcome.checkpoint.clone()),
        data: Some(synth.test.clone()),
        output: Some(dir.path().join("eval")),
        ..Default::default()
    })
    .expect("evaluation");

    let log = fs::read_to_string(run.join(LOG_FILE)).unwrap();
    let (bad_lr, plateaus) = schedule_mismatches(&log, &cfg);
    let steps_by_ten = plateaus.len() == cfg.optim.decay_epochs.len() + 1
        && plateaus.windows(2).all(|w| (w[1] / w[0] - 0.1).abs() < 1e-12);

    Outcome {
        passed: shape_ok
            && eval.ap50 >= 0.80
            && outcome.iterations <= 5000
            && minutes <= 30.0
            && bad_lr == 0
            && steps_by_ten,
        detail: format!(
            "AP50 {:.4} (limit 0.80), AP75 {:.4}, after {} iterations in {:.1} min; lr plateaus {:?}, {} off-schedule entries",
            eval.ap50, eval.ap75, outcome.iterations, minutes, plateaus, bad_lr
        ),
    }
}

fn max_corner_deviation(a: &[[f64; 2]; 4], b: &[[f64; 2]; 4]) -> f64 {
    a.iter()
        .map(|p| {
            b.iter()
                .map(|q| (p[0] - q[0]).hypot(p[1] - q[1]))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

fn ofkit(args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_ofkit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    if !out.status.success() {
        eprintln!("ofkit {:?}\n{}", args, String::from_utf8_lossy(&out.stderr));
    }
    out.status.code().unwrap_or(-1)
}

fn dota_round_trip_and_pipeline() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let (train, test) = (root.join("train"), root.join("test"));
    let synth_code = ofkit(&[
        "synth-data",
        "--output",
        root.to_str().unwrap(),
        "--train-count",
        "40",
        "--test-count",
        "20",
    ]);

    let cfg = RunConfig::toy();
    let ds = Dataset::load(&train, None).unwrap();
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    let mut mismatched = 0;
    for (index, item) in ds.items.iter().enumerate() {
        let scene = synthesize_scene(cfg.seed, index as u64, &cfg.data.synth).unwrap();
        if item.instances.len() != scene.instances.len() {
            mismatched += 1;
        }
        for (parsed, truth) in item.instances.iter().zip(&scene.instances) {
            if parsed.class != truth.class {
                mismatched += 1;
            }
            worst = worst.max(max_corner_deviation(&truth.bbox.corners(), &parsed.bbox.corners()));
            worst = worst.max(max_corner_deviation(&parsed.bbox.corners(), &truth.bbox.corners()));
            compared += 1;
        }
    }

    let run = dir.path().join("run");
    let train_code = ofkit(&[
        "train",
        "--train-data",
        train.to_str().unwrap(),
        "--output",
        run.to_str().unwrap(),
        "--max-iterations",
        "3",
    ]);
    let dets = dir.path().join("detections.jsonl");
    let infer_code = ofkit(&[
        "infer",
        "--checkpoint",
        run.join("model.ofk").to_str().unwrap(),
        "--input",
        test.to_str().unwrap(),
        "--output",
        dets.to_str().unwrap(),
    ]);
    let eval_out = dir.path().join("eval");
    let eval_code = ofkit(&[
        "eval",
        "--detections",
        dets.to_str().unwrap(),
        "--data",
        test.to_str().unwrap(),
        "--output",
        eval_out.to_str().unwrap(),
    ]);
    let report_ok = Path::new(&eval_out.join("report.json")).is_file();
    let codes = [synth_code, train_code, infer_code, eval_code];

    Outcome {
        passed: worst <= 1e-4 && compared > 0 && mismatched == 0 && codes == [0; 4] && report_ok,
        detail: format!(
            "max corner deviation {:.2e} (limit 1e-4) over {} boxes, {} class/count mismatches; \
             exit codes synth-data {} train {} infer {} eval {}",
            worst, compared, mismatched, codes[0], codes[1], codes[2], codes[3]
        ),
    }
}

fn panic_message(e: &(dyn std::any::Any + Send)) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panicked".into())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    if args.iter().any(|a| a == "--list") {
        for (name, _) in CRITERIA {
            println!("{}: test", name);
        }
        return ExitCode::SUCCESS;
    }
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, run)) in CRITERIA.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| Outcome {
            passed: false,
            detail: panic_message(&*e),
        });
        failed += usize::from(!outcome.passed);
        println!(
            "criterion {} {}: {} | {}",
            i + 1,
            name,
            if outcome.passed { "PASS" } else { "FAIL" },
            outcome.detail
        );
    }
    println!("acceptance: {} of {} criteria passed", ran - failed, ran);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
