//! Acceptance suite. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line each; exits non-zero if any fails.
//!
//! The toy training runs dominate: ten 2000-step runs on the toy dataset.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use romnisweep::config::RunConfig;
use romnisweep::fusion::FusionMode;
use romnisweep::model::Geometry;
use romnisweep::selftest::{self, Check};
use romnisweep::synth::{make_dataset, Dataset, DatasetSpec, Split};
use romnisweep::train::{evaluate, load_checkpoint, train, EvalReport, TrainOptions};

const MAE_LIMIT: f64 = 2.0;
const BASELINE_FRACTION: f64 = 0.4;
const TOY_LIMIT_S: f64 = 60.0 * 60.0;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

fn toy_config() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.json");
    RunConfig::load(&path).expect("configs/toy.json loads")
}

fn check(criterion: u32, name: &'static str, passed: bool, detail: String, start: Instant) -> Check {
    Check {
        criterion,
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

struct Toy {
    cfg: RunConfig,
    dataset: Dataset,
    geometry: Geometry,
    test: Vec<romnisweep::synth::Sample>,
    cache: PathBuf,
    work: PathBuf,
}

impl Toy {
    fn prepare(work: &Path) -> Toy {
        let mut cfg = toy_config();
        cfg.data.dir = work.join("data");
        let cache = work.join("cache");
        let spec = DatasetSpec {
            train: cfg.data.train_scenes,
            test: cfg.data.test_scenes,
            preset: cfg.data.preset,
            seed: cfg.data.seed,
        };
        make_dataset(&spec, &cfg.build_rig().unwrap(), &cfg.sweep, &cfg.data.dir).expect("toy dataset");
        let dataset = Dataset::open(&cfg.data.dir).unwrap();
        let geometry = Geometry::new(&dataset.rig, &cfg.sweep, Some(&cache)).unwrap();
        let test = dataset.load_split(Split::Test).unwrap();
        Toy {
            cfg,
            dataset,
            geometry,
            test,
            cache,
            work: work.to_path_buf(),
        }
    }

    /// Train one variant; returns the training losses and the held-out report.
    fn run(&self, label: &str, cfg: &RunConfig) -> (Vec<f64>, EvalReport, PathBuf) {
        let opts = TrainOptions {
            out_dir: self.work.join("runs").join(label),
            cache_dir: Some(self.cache.clone()),
            ..TrainOptions::default()
        };
        let report = train(cfg, &opts).expect("toy training");
        let model = load_checkpoint(&report.checkpoint).unwrap().model;
        let eval = evaluate(&model, &self.geometry, &self.test, cfg.model.iterations).unwrap();
        println!(
            "  {label}: loss {:.3} -> {:.3}, held-out mae {:.4} (zero baseline {:.4})",
            report.losses[0],
            report.losses.last().unwrap(),
            eval.aggregate.mae,
            eval.zero_baseline_mae
        );
        (report.losses, eval, report.checkpoint)
    }
}

fn toy_convergence(toy: &Toy) -> Vec<Check> {
    let start = Instant::now();
    let (losses, eval, ckpt) = toy.run("adaptive-seed0", &toy.cfg);
    let mae = eval.aggregate.mae;
    let ratio = mae / eval.zero_baseline_mae;
    let seconds = start.elapsed().as_secs_f64();
    let c5 = check(
        5,
        "toy convergence",
        mae <= MAE_LIMIT && ratio <= BASELINE_FRACTION && seconds <= TOY_LIMIT_S,
        format!(
            "mae {mae:.4} (limit {MAE_LIMIT}), {:.1}% of zero baseline {:.4} (limit {:.0}%)",
            100.0 * ratio,
            eval.zero_baseline_mae,
            100.0 * BASELINE_FRACTION
        ),
        start,
    );

    let t = Instant::now();
    let per_iter = &eval.per_iteration_mae;
    let (first, last) = (per_iter[0], *per_iter.last().unwrap());
    let c7 = check(
        7,
        "iteration refinement",
        last <= first,
        format!(
            "mae by iteration {}",
            per_iter.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>().join(" ")
        ),
        t,
    );

    // two measured examples from the training and evaluation contracts
    let t = Instant::now();
    let loss_500 = losses[500];
    let learns = check(
        5,
        "loss at step 500",
        loss_500 < losses[0],
        format!("{loss_500:.4} < {:.4} at step 0", losses[0]),
        t,
    );
    let t = Instant::now();
    let model = load_checkpoint(&ckpt).unwrap().model;
    let seen = toy.dataset.load_split(Split::Train).unwrap();
    let own = evaluate(&model, &toy.geometry, &seen, toy.cfg.model.iterations).unwrap();
    let fits = check(
        5,
        "train split vs held-out",
        own.aggregate.mae < mae,
        format!("training scenes mae {:.4} < held-out {mae:.4}", own.aggregate.mae),
        t,
    );
    vec![c5, c7, learns, fits]
}

fn ablation(toy: &Toy) -> Check {
    let start = Instant::now();
    let modes = [
        FusionMode::AdaptiveOpposite,
        FusionMode::Interleave,
        FusionMode::AllWeighting,
    ];
    let mut medians = BTreeMap::new();
    for mode in modes {
        let mut maes = Vec::new();
        for seed in ABLATION_SEEDS {
            let mut cfg = toy.cfg.clone();
            cfg.model.fusion = mode;
            cfg.model.grid_embedding = false;
            cfg.train.seed = seed;
            let (_, eval, _) = toy.run(&format!("ablation-{}-seed{seed}", mode.as_str()), &cfg);
            maes.push(eval.aggregate.mae);
        }
        medians.insert(mode.as_str(), median(maes));
    }
    let adaptive = medians[FusionMode::AdaptiveOpposite.as_str()];
    let others_ok = modes[1..].iter().all(|m| adaptive <= medians[m.as_str()]);
    let seconds = start.elapsed().as_secs_f64();
    check(
        6,
        "ablation ordering",
        others_ok && seconds <= 3.0 * TOY_LIMIT_S,
        format!(
            "median mae {}",
            medians
                .iter()
                .map(|(k, v)| format!("{k} {v:.4}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
        start,
    )
}

fn romnisweep(args: &[&str], cwd: &Path) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_romnisweep"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "romnisweep {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out.stdout
}

/// Every file under `root`, relative path to contents.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn determinism(work: &Path) -> Check {
    let start = Instant::now();
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.json");
    let config = config.to_str().unwrap();
    let short = [
        "--set",
        "data.train_scenes=4",
        "--set",
        "data.test_scenes=2",
        "--set",
        "train.steps=30",
        "--set",
        "train.checkpoint_every=10",
    ];
    let mut problems = Vec::new();
    let mut stages = Vec::new();
    for run in ["a", "b"] {
        let dir = work.join("determinism").join(run);
        fs::create_dir_all(&dir).unwrap();
        let with = |extra: &[&str]| -> Vec<String> {
            let mut v: Vec<String> = extra.iter().map(|s| s.to_string()).collect();
            v.extend(["--config", config].iter().map(|s| s.to_string()));
            v.extend(short.iter().map(|s| s.to_string()));
            v
        };
        let call = |args: Vec<String>| {
            let refs: Vec<&str> = args.iter().map(String::as_str).collect();
            romnisweep(&refs, &dir)
        };
        call(with(&["gen-data", "--out", "data", "--seed", "7"]));
        call(with(&["train", "--data", "data", "--out", "run", "--seed", "3"]));
        let eval = call(vec![
            "eval".into(),
            "--checkpoint".into(),
            "run/checkpoint.rsg".into(),
            "--data".into(),
            "data".into(),
        ]);
        stages.push((snapshot(&dir.join("data")), snapshot(&dir.join("run")), eval));
    }
    let (a, b) = (&stages[0], &stages[1]);
    for (name, x, y) in [("gen-data", &a.0, &b.0), ("train", &a.1, &b.1)] {
        if x.is_empty() {
            problems.push(format!("{name} wrote nothing"));
        }
        for (path, bytes) in x {
            if y.get(path) != Some(bytes) {
                problems.push(format!("{name}: {} differs", path.display()));
            }
        }
        if x.len() != y.len() {
            problems.push(format!("{name}: file sets differ"));
        }
    }
    if a.2 != b.2 {
        problems.push("eval: JSON differs".into());
    }
    let files = a.0.len() + a.1.len();
    check(
        9,
        "determinism",
        problems.is_empty(),
        if problems.is_empty() {
            format!("{files} files and the eval report identical across two runs")
        } else {
            problems.join("; ")
        },
        start,
    )
}

fn main() -> ExitCode {
    let work = tempfile::tempdir().expect("temp dir");
    let mut checks = Vec::new();
    let mut report = |c: Check| {
        println!("{}", c.line());
        checks.push(c);
    };

    report(selftest::geometry_oracle());
    report(selftest::coverage_property());
    report(selftest::differentiability());
    report(selftest::exactness());
    report(selftest::metrics_oracle());
    report(determinism(work.path()));

    let t = Instant::now();
    let toy = Toy::prepare(work.path());
    println!(
        "  toy dataset: {} train / {} test scenes in {:.0}s",
        toy.dataset.entries(Split::Train).len(),
        toy.test.len(),
        t.elapsed().as_secs_f64()
    );
    for c in toy_convergence(&toy) {
        report(c);
    }
    report(ablation(&toy));

    checks.sort_by_key(|c| c.criterion);
    println!("\nsummary");
    for c in &checks {
        println!("{}", c.line());
    }
    if checks.iter().all(|c| c.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
