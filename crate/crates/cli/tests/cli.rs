use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use trilandmark::evalkit::{evaluate_landmarks, evaluation_triplets};
use trilandmark::fieldcore::ltf::load_image;
use trilandmark::proposal::{load_checkpoint, ProposalModel};
use trilandmark::synth::{load_cohort, Timepoint};
use trilandmark_cli::commands::{ClassifyReport, EvalSummary};
use trilandmark_cli::config::RunConfig;
use trilandmark_cli::manifest::{RunManifest, MANIFEST_FILE};

const SMALL: &str = r#"
[cohort]
num_subjects = 6
dims = [32, 32]
ring_radius = 9.0
ring_thickness = 3.0
blobs = []
svf_points = 4
svf_amplitude = 1.0
svf_width = 6.0
anchor_radius = 6.0
progression_mm = 1.0

[model]
feature_dims = [4, 4]
widths = [4, 8, 8]

[train]
epochs = 1
steps_per_epoch = 2
batch_size = 2

[eval]
test_subjects = 3
overlays = 1
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_trilandmark"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> PathBuf {
        self.path("small.toml")
    }

    fn with_config(&self, cmd: &str, out: &str, rest: &[&str]) -> Output {
        let (c, o) = (self.config(), self.path(out));
        let mut args = vec![cmd, "--config", s(&c), "--out", s(&o)];
        args.extend_from_slice(rest);
        run(&args)
    }

    fn cohort(&self) -> PathBuf {
        let p = self.path("cohort");
        if !p.exists() {
            let o = self.with_config("synthesize", "cohort", &[]);
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        }
        p
    }

    fn trained(&self, out: &str, epochs: &str) -> PathBuf {
        let cohort = self.cohort();
        let o = self.with_config("train", out, &[s(&cohort), "--epochs", epochs]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        self.path(out)
    }
}

#[test]
fn synthesize_writes_one_file_set_per_subject() {
    let f = Fixture::new();
    let out = f.path("c3");
    ok(&["synthesize", "--config", s(&f.config()), "--subjects", "3", "--out", s(&out)]);
    let names: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    for suffix in ["t0.ltf", "t1.ltf", "map.ltf", "gt.csv"] {
        let count = (0..10).filter(|i| names.contains(&format!("subject_{i:03}_{suffix}"))).count();
        assert_eq!(count, 3, "{suffix}: {names:?}");
    }
    assert!(out.join("labels.csv").exists() && out.join("cohort.toml").exists());
    assert_eq!(load_cohort(&out).unwrap().len(), 3);
    let m = RunManifest::read(&out.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.command, "synthesize");
    assert_eq!(m.config.cohort.num_subjects, 3);
    assert!(m.artifact("labels.csv").is_some());
}

#[test]
fn same_seed_gives_identical_cohorts() {
    let f = Fixture::new();
    let (a, b) = (f.path("a"), f.path("b"));
    for out in [&a, &b] {
        ok(&["synthesize", "--config", s(&f.config()), "--seed", "4", "--out", s(out)]);
    }
    let (ma, mb) = (
        RunManifest::read(&a.join(MANIFEST_FILE)).unwrap(),
        RunManifest::read(&b.join(MANIFEST_FILE)).unwrap(),
    );
    assert_eq!(ma.artifacts, mb.artifacts);
    assert_eq!(ma.seeds.cohort, 4);
    assert_eq!(
        load_cohort(&a).unwrap().payload_hash(),
        load_cohort(&b).unwrap().payload_hash()
    );
    let c = f.path("c");
    ok(&["synthesize", "--config", s(&f.config()), "--seed", "5", "--out", s(&c)]);
    assert_ne!(load_cohort(&a).unwrap().payload_hash(), load_cohort(&c).unwrap().payload_hash());
}

#[test]
fn unknown_config_key_is_a_data_error_naming_the_key() {
    let f = Fixture::new();
    let bad = f.path("bad.toml");
    std::fs::write(&bad, "[train]\nepochz = 3\n").unwrap();
    let o = run(&["synthesize", "--config", s(&bad), "--out", s(&f.path("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochz"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["train"]).status.code(), Some(1));
    assert_eq!(run(&["synthesize", "--threads", "0"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn non_empty_output_needs_force() {
    let f = Fixture::new();
    let out = f.path("full");
    std::fs::create_dir(&out).unwrap();
    std::fs::write(out.join("stale.txt"), "x").unwrap();
    let o = f.with_config("synthesize", "full", &["--subjects", "3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));
    let o = f.with_config("synthesize", "full", &["--subjects", "3", "--force"]);
    assert!(o.status.success());
    assert!(!out.join("stale.txt").exists());
}

#[test]
fn zero_epochs_save_only_the_initial_model() {
    let f = Fixture::new();
    let out = f.trained("t0", "0");
    let m = load_checkpoint(out.join("final")).unwrap();
    let cfg = RunConfig::from_toml(SMALL).unwrap();
    let mut mc = cfg.model.clone();
    mc.image_dims = vec![32, 32];
    assert_eq!(m.param_hash(), ProposalModel::init(&mc, cfg.train.seed).unwrap().param_hash());
    assert!(!out.join("checkpoints").exists());
    assert_eq!(std::fs::read_to_string(out.join("train_log.csv")).unwrap().lines().count(), 1);
}

#[test]
fn training_is_reproducible() {
    let f = Fixture::new();
    let (a, b) = (f.trained("ta", "1"), f.trained("tb", "1"));
    let (ma, mb) = (
        RunManifest::read(&a.join(MANIFEST_FILE)).unwrap(),
        RunManifest::read(&b.join(MANIFEST_FILE)).unwrap(),
    );
    assert_eq!(ma.artifacts, mb.artifacts);
    assert_eq!(ma.inputs, mb.inputs);
    assert!(ma.artifact("checkpoints/epoch_0/checkpoint.toml").is_some());
    let (ca, cb) = (
        load_checkpoint(a.join("final")).unwrap(),
        load_checkpoint(b.join("final")).unwrap(),
    );
    assert_eq!(ca.param_hash(), cb.param_hash());
    let text = std::fs::read_to_string(a.join("train_log.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn ground_truth_landmarks_sit_at_the_metric_floor() {
    let f = Fixture::new();
    let cohort = f.cohort();
    let o = f.with_config("eval", "gt", &[s(&cohort), "--ground-truth"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: EvalSummary = toml::from_str(&std::fs::read_to_string(f.path("gt/summary.toml")).unwrap()).unwrap();
    assert_eq!(summary.pairs, 2);
    assert!(summary.ordered_total_mm.mean <= 0.1, "{:?}", summary.ordered_total_mm);
    assert!(summary.recon.is_none());
    let csv = std::fs::read_to_string(f.path("gt/metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("pair_id,chamfer,x,y,z,total"));
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(std::fs::read_dir(f.path("gt/overlays")).unwrap().count(), 1);
}

#[test]
fn untrained_model_scores_the_grid_discrepancy() {
    let f = Fixture::new();
    let ck = f.trained("init", "0").join("final");
    let cohort_dir = f.cohort();
    let o = f.with_config("eval", "ev", &[s(&cohort_dir), s(&ck)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: EvalSummary = toml::from_str(&std::fs::read_to_string(f.path("ev/summary.toml")).unwrap()).unwrap();

    let cohort = load_cohort(&cohort_dir).unwrap();
    let grid = load_checkpoint(&ck).unwrap().grid_points();
    let triplets = evaluation_triplets(&[3, 4, 5], Timepoint::T0, 1000).unwrap();
    let expect = evaluate_landmarks(&cohort, &triplets, |k| cohort.image_name(k), |_| Ok(grid.clone())).unwrap();
    assert_eq!(summary.ordered_total_mm, expect.ordered_total_mm);
    assert_eq!(summary.chamfer_mm, expect.chamfer_mm);
    let recon = summary.recon.unwrap();
    assert_eq!(recon, summary.recon_grid.unwrap());
}

#[test]
fn classify_reports_the_top_k_feature_count() {
    let f = Fixture::new();
    let ck = f.trained("init", "0").join("final");
    let cohort = f.cohort();
    let o = f.with_config(
        "classify",
        "cl",
        &[s(&cohort), s(&ck), "--landmarks-top-k", "5", "--top-k-curve", "1,2"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: ClassifyReport = toml::from_str(&std::fs::read_to_string(f.path("cl/report.toml")).unwrap()).unwrap();
    assert_eq!(r.features, 5 * 2 * 2);
    assert_eq!((r.train_subjects, r.test_subjects), (3, 3));
    assert_eq!(r.top_k.iter().map(|t| t.k).collect::<Vec<_>>(), [1, 2]);
    for name in ["predictions.csv", "importance.csv", "importance_histogram.csv", "dwd.model"] {
        assert!(f.path("cl").join(name).exists(), "{name}");
    }
}

#[test]
fn classify_without_labels_names_the_file() {
    let f = Fixture::new();
    let ck = f.trained("init", "0").join("final");
    let cohort = f.cohort();
    std::fs::remove_file(cohort.join("labels.csv")).unwrap();
    let o = f.with_config("classify", "cl", &[s(&cohort), s(&ck)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("labels.csv"));
}

#[test]
fn saliency_map_is_non_negative() {
    let f = Fixture::new();
    // The untrained head is zero, so its saliency vanishes everywhere.
    let ck = f.trained("one", "1").join("final");
    let image = f.cohort().join("subject_000_t0.ltf");
    let o = f.with_config("saliency", "sal", &[s(&ck), s(&image), "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let map = load_image(f.path("sal/saliency.ltf")).unwrap();
    assert!(map.values().iter().all(|v| *v >= 0.0));
    assert!(map.values().iter().any(|v| *v > 0.0));
    assert!(f.path("sal/saliency.png").exists());
    let o = f.with_config("saliency", "sal2", &[s(&ck), s(&image), "99"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn diverging_training_exits_with_three() {
    let f = Fixture::new();
    let cohort = f.cohort();
    let cfg = f.path("wild.toml");
    std::fs::write(&cfg, SMALL.replace("batch_size = 2", "batch_size = 2\nlearning_rate = 1e200")).unwrap();
    let o = run(&["train", "--config", s(&cfg), "--out", s(&f.path("wild")), s(&cohort)]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
