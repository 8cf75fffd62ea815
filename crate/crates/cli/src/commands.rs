//! The five experiment commands. Each one writes its artifacts, the
//! resolved `config.toml` and a `run.manifest` into its output directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use trilandmark::downstream::{classify, top_k_curve, write_predictions_csv, ShapePair, TopKRow};
use trilandmark::evalkit::{
    evaluate_landmarks, evaluation_triplets, render_overlay, saliency, warp_errors, ConsistencyReport, EvalTriplet,
    MeanStd,
};
use trilandmark::fieldcore::ltf::{load_image, save_image};
use trilandmark::fieldcore::Points;
use trilandmark::losses::recon_loss;
use trilandmark::proposal::{load_checkpoint, save_checkpoint, ProposalModel};
use trilandmark::synth::{
    generate_cohort, gt_points, load_cohort, write_cohort, Cohort, FieldDirOracle, ImageKey, RegistrationOracle,
    Timepoint,
};
use trilandmark::trainer::{train, TrainHooks, TrainLog, TrainingSet};
use trilandmark::{Error, Result};

use crate::config::RunConfig;
use crate::manifest::RunManifest;

/// Output directory handling shared by every command.
#[derive(Clone, Debug)]
pub struct Output {
    pub dir: PathBuf,
    /// Replace a non-empty directory instead of refusing.
    pub force: bool,
}

impl Output {
    pub fn new(dir: impl Into<PathBuf>, force: bool) -> Self {
        Self { dir: dir.into(), force }
    }

    /// Create the directory; a non-empty one is cleared under `force` and
    /// refused otherwise, so the manifest lists only this run's files.
    fn prepare(&self) -> Result<()> {
        let d = &self.dir;
        if d.exists() {
            if !d.is_dir() {
                return Err(Error::InvalidInput(format!("{}: not a directory", d.display())));
            }
            let non_empty = std::fs::read_dir(d)
                .map_err(|e| Error::InvalidInput(format!("{}: {e}", d.display())))?
                .next()
                .is_some();
            if non_empty {
                if !self.force {
                    return Err(Error::InvalidInput(format!(
                        "{}: directory is not empty (use --force to overwrite)",
                        d.display()
                    )));
                }
                std::fs::remove_dir_all(d).map_err(|e| Error::InvalidInput(format!("{}: {e}", d.display())))?;
            }
        }
        std::fs::create_dir_all(d).map_err(|e| Error::InvalidInput(format!("{}: {e}", d.display())))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, text).map_err(|e| Error::InvalidInput(format!("{}: {e}", p.display())))
    }

    fn finish(&self, command: &str, cfg: &RunConfig, inputs: &[&Path]) -> Result<RunManifest> {
        self.write("config.toml", &cfg.to_toml())?;
        RunManifest::write(command, cfg, inputs, &self.dir)
    }
}

fn to_toml<T: Serialize>(v: &T) -> String {
    toml::to_string(v).expect("report serializes")
}

pub fn synthesize(cfg: &RunConfig, out: &Output) -> Result<Cohort> {
    out.prepare()?;
    let t = Instant::now();
    let cohort = generate_cohort(&cfg.cohort)?;
    write_cohort(&cohort, &out.dir, true)?;
    log::info!(
        "synthesized {} subjects in {:.1}s, payload hash {}",
        cohort.len(),
        t.elapsed().as_secs_f64(),
        cohort.payload_hash()
    );
    out.finish("synthesize", cfg, &[])?;
    Ok(cohort)
}

/// Model geometry follows the cohort's image grid.
fn model_for(cfg: &RunConfig, cohort: &Cohort) -> Result<ProposalModel> {
    let g = cohort.template.image.grid();
    let mut m = cfg.model.clone();
    m.image_dims = g.dims().to_vec();
    m.image_spacing = g.spacing().to_vec();
    m.image_origin = g.origin().to_vec();
    ProposalModel::init(&m, cfg.train.seed)
}

fn subject_ids(cohort: &Cohort) -> Vec<String> {
    cohort.subjects.iter().map(|s| s.id.clone()).collect()
}

pub fn train_command(cfg: &RunConfig, cohort_dir: &Path, fields: Option<&Path>, out: &Output) -> Result<(ProposalModel, TrainLog)> {
    let cohort = load_cohort(cohort_dir)?;
    let (train_s, _) = cfg.split(cohort.len())?;
    out.prepare()?;
    let external = fields.map(|d| FieldDirOracle::new(d, subject_ids(&cohort)));
    let mut data = TrainingSet::from_cohort(&cohort, &train_s, &[Timepoint::T0, Timepoint::T1]);
    if let Some(o) = &external {
        data.oracle = o;
    }
    let model = model_for(cfg, &cohort)?;
    log::info!(
        "training {} parameters on {} images for {} epochs",
        model.num_parameters(),
        data.len(),
        cfg.train.epochs
    );
    let hooks = TrainHooks {
        checkpoint_dir: Some(out.path("checkpoints")),
        ..TrainHooks::default()
    };
    let (model, log) = train(model, &data, &cfg.train_config(), hooks)?;
    log::info!("training took {:.1}s, final parameter hash {}", log.wall_clock_s, model.param_hash());
    save_checkpoint(&model, out.path("final"))?;
    log.write_csv(out.path("train_log.csv"))?;
    log.write_epoch_csv(out.path("epoch_log.csv"))?;
    let mut inputs = vec![cohort_dir];
    inputs.extend(fields);
    out.finish("train", cfg, &inputs)?;
    Ok((model, log))
}

/// Where evaluated landmarks come from.
pub enum LandmarkSource<'a> {
    Model(&'a Path),
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub pairs: usize,
    pub chamfer_mm: MeanStd,
    pub ordered_per_axis_mm: Vec<MeanStd>,
    pub ordered_total_mm: MeanStd,
    /// Held-out reconstruction loss of the model and of grid-point
    /// landmarks (the untrained model), when a model is evaluated.
    pub recon: Option<MeanStd>,
    pub recon_grid: Option<MeanStd>,
    /// Warped-image MSE of each pair's `a → c` warp.
    pub landmark_warp_mse: Option<MeanStd>,
    pub oracle_warp_mse: Option<MeanStd>,
    pub unwarped_mse: Option<MeanStd>,
}

#[derive(Serialize)]
struct ReconRow {
    pair_id: String,
    recon: f64,
    recon_grid: f64,
    landmark_mse: f64,
    oracle_mse: f64,
    unwarped_mse: f64,
}

fn propose_all(model: &ProposalModel, cohort: &Cohort, keys: &[ImageKey]) -> Result<Vec<(ImageKey, Points)>> {
    keys.iter()
        .map(|&k| Ok((k, model.propose(cohort.image(k), cohort.image_name(k))?.points)))
        .collect()
}

fn lookup(sets: &[(ImageKey, Points)], k: ImageKey) -> Result<Points> {
    sets.iter()
        .find(|(key, _)| *key == k)
        .map(|(_, p)| p.clone())
        .ok_or_else(|| Error::InvalidInput(format!("no landmarks for {k:?}")))
}

fn reconstruction_rows(
    cfg: &RunConfig,
    cohort: &Cohort,
    model: &ProposalModel,
    sets: &[(ImageKey, Points)],
    triplets: &[EvalTriplet],
) -> Result<Vec<ReconRow>> {
    let grid = model.grid_points();
    triplets
        .iter()
        .map(|t| {
            let images = [cohort.image(t.a), cohort.image(t.b), cohort.image(t.c)];
            let (pa, pb, pc) = (lookup(sets, t.a)?, lookup(sets, t.b)?, lookup(sets, t.c)?);
            let w = warp_errors(images[0], images[2], &pa, &pc, &cohort.register(t.c, t.a)?, &cfg.loss)?;
            Ok(ReconRow {
                pair_id: format!("{}~{}@{}", cohort.image_name(t.a), cohort.image_name(t.b), cohort.image_name(t.c)),
                recon: recon_loss(images, [&pa, &pb, &pc], &cfg.loss)?,
                recon_grid: recon_loss(images, [&grid, &grid, &grid], &cfg.loss)?,
                landmark_mse: w.landmark_mse,
                oracle_mse: w.oracle_mse,
                unwarped_mse: w.unwarped_mse,
            })
        })
        .collect()
}

fn write_csv_rows<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let map = |e: csv::Error| Error::InvalidInput(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(map)?;
    for r in rows {
        w.serialize(r).map_err(map)?;
    }
    w.flush().map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}

pub fn eval_command(cfg: &RunConfig, cohort_dir: &Path, source: LandmarkSource, out: &Output) -> Result<EvalSummary> {
    let cohort = load_cohort(cohort_dir)?;
    let (_, test) = cfg.split(cohort.len())?;
    out.prepare()?;
    let tp = cfg.eval.timepoint;
    let triplets = evaluation_triplets(&test, tp, cfg.eval.triplet_seed)?;
    let keys = cohort.keys(&test, &[tp]);
    let model = match source {
        LandmarkSource::Model(p) => Some(load_checkpoint(p)?),
        LandmarkSource::GroundTruth => None,
    };
    let sets: Vec<(ImageKey, Points)> = match &model {
        Some(m) => propose_all(m, &cohort, &keys)?,
        None => keys.iter().map(|&k| (k, gt_points(&cohort, k).clone())).collect(),
    };
    let report: ConsistencyReport =
        evaluate_landmarks(&cohort, &triplets, |k| cohort.image_name(k), |k| lookup(&sets, k))?;
    report.write_csv(out.path("metrics.csv"))?;
    let mut summary = EvalSummary {
        pairs: report.rows.len(),
        chamfer_mm: report.chamfer_mm,
        ordered_per_axis_mm: report.ordered_per_axis.clone(),
        ordered_total_mm: report.ordered_total_mm,
        recon: None,
        recon_grid: None,
        landmark_warp_mse: None,
        oracle_warp_mse: None,
        unwarped_mse: None,
    };
    if let Some(m) = &model {
        let rows = reconstruction_rows(cfg, &cohort, m, &sets, &triplets)?;
        write_csv_rows(&rows, &out.path("reconstruction.csv"))?;
        summary.recon = Some(MeanStd::of(rows.iter().map(|r| r.recon)));
        summary.recon_grid = Some(MeanStd::of(rows.iter().map(|r| r.recon_grid)));
        summary.landmark_warp_mse = Some(MeanStd::of(rows.iter().map(|r| r.landmark_mse)));
        summary.oracle_warp_mse = Some(MeanStd::of(rows.iter().map(|r| r.oracle_mse)));
        summary.unwarped_mse = Some(MeanStd::of(rows.iter().map(|r| r.unwarped_mse)));
    }
    if cfg.eval.overlays > 0 {
        let dir = out.path("overlays");
        std::fs::create_dir_all(&dir).map_err(|e| Error::InvalidInput(format!("{}: {e}", dir.display())))?;
        for (k, p) in sets.iter().take(cfg.eval.overlays) {
            render_overlay(cohort.image(*k), p, &[], None, dir.join(format!("{}.png", cohort.image_name(*k))))?;
        }
    }
    log::info!(
        "ordered consistency {:.3} ± {:.3} mm, Chamfer {:.3} ± {:.3} mm over {} pairs",
        summary.ordered_total_mm.mean,
        summary.ordered_total_mm.std,
        summary.chamfer_mm.mean,
        summary.chamfer_mm.std,
        summary.pairs
    );
    out.write("summary.toml", &to_toml(&summary))?;
    let mut inputs = vec![cohort_dir];
    if let LandmarkSource::Model(p) = source {
        inputs.push(p);
    }
    out.finish("eval", cfg, &inputs)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyReport {
    pub train_subjects: usize,
    pub test_subjects: usize,
    pub features: usize,
    pub lambda: f64,
    pub accuracy: f64,
    pub average_precision: f64,
    /// The same pipeline on grid-point landmarks (the untrained model).
    pub baseline_accuracy: f64,
    pub baseline_average_precision: f64,
    pub top_k: Vec<TopKRow>,
}

/// Landmarks of every subject at both timepoints.
fn shape_pairs(model: &ProposalModel, cohort: &Cohort, subjects: &[usize]) -> Result<Vec<ShapePair>> {
    subjects
        .iter()
        .map(|&s| {
            let p = |t| -> Result<Points> {
                let k = ImageKey::new(s, t);
                Ok(model.propose(cohort.image(k), cohort.image_name(k))?.points)
            };
            Ok(ShapePair {
                t0: p(Timepoint::T0)?,
                t1: p(Timepoint::T1)?,
            })
        })
        .collect()
}

pub fn classify_command(
    cfg: &RunConfig,
    cohort_dir: &Path,
    checkpoint: &Path,
    curve: &[usize],
    out: &Output,
) -> Result<ClassifyReport> {
    let cohort = load_cohort(cohort_dir)?;
    let model = load_checkpoint(checkpoint)?;
    let (train_s, test_s) = cfg.split(cohort.len())?;
    out.prepare()?;
    let labels = cohort.labels();
    let pick = |idx: &[usize]| -> Vec<bool> { idx.iter().map(|&i| labels[i]).collect() };
    let (ytr, yte) = (pick(&train_s), pick(&test_s));
    let (tr, te) = (shape_pairs(&model, &cohort, &train_s)?, shape_pairs(&model, &cohort, &test_s)?);
    let r = classify(&tr, &ytr, &te, &yte, &cfg.classify)?;

    let grid = model.grid_points();
    let flat = |n: usize| {
        vec![
            ShapePair {
                t0: grid.clone(),
                t1: grid.clone(),
            };
            n
        ]
    };
    let base = classify(&flat(tr.len()), &ytr, &flat(te.len()), &yte, &cfg.classify)?;
    let top_k = top_k_curve(&tr, &ytr, &te, &yte, curve, &cfg.classify)?;

    let ids: Vec<String> = test_s.iter().map(|&i| cohort.subjects[i].id.clone()).collect();
    write_predictions_csv(&ids, &yte, &r.scores, &r.predictions, out.path("predictions.csv"))?;
    r.importance.write_csv(out.path("importance.csv"))?;
    r.importance.write_histogram_csv(20, out.path("importance_histogram.csv"))?;
    r.model.save(out.path("dwd.model"))?;
    let report = ClassifyReport {
        train_subjects: train_s.len(),
        test_subjects: test_s.len(),
        features: r.model.weights.len(),
        lambda: r.model.lambda,
        accuracy: r.accuracy,
        average_precision: r.average_precision,
        baseline_accuracy: base.accuracy,
        baseline_average_precision: base.average_precision,
        top_k,
    };
    log::info!(
        "accuracy {:.3}, AP {:.3} (grid-point baseline AP {:.3})",
        report.accuracy,
        report.average_precision,
        report.baseline_average_precision
    );
    out.write("report.toml", &to_toml(&report))?;
    out.finish("classify", cfg, &[cohort_dir, checkpoint])?;
    Ok(report)
}

pub fn saliency_command(cfg: &RunConfig, checkpoint: &Path, image: &Path, index: usize, out: &Output) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let img = load_image(image)?;
    out.prepare()?;
    let map = saliency(&model, &img, index)?;
    save_image(&map, out.path("saliency.ltf"))?;
    let landmarks = model.propose(&img, image.display().to_string())?.points;
    render_overlay(&map, &landmarks, &[index], None, out.path("saliency.png"))?;
    render_overlay(&img, &landmarks, &[index], None, out.path("landmarks.png"))?;
    out.finish("saliency", cfg, &[checkpoint, image])?;
    Ok(())
}
