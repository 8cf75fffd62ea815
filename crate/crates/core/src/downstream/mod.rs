//! Shape-based classification from ordered landmarks: Procrustes
//! alignment, a linear DWD classifier, scoring, and per-landmark
//! importance.
//!
//! A subject's feature vector is its aligned t0 landmarks followed by its
//! aligned t1 landmarks, each flattened row-major (`2·N·dim` values).

mod dwd;
mod gpa;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dwd::{dwd_loss, dwd_loss_derivative, dwd_predict, dwd_train, DwdConfig, LinearDwdModel};
pub use gpa::{align_to, gpa, AlignedShapes};

use crate::error::{ensure, Error, Result};
use crate::fieldcore::Points;

/// Fraction of predictions equal to the labels.
pub fn accuracy(predictions: &[bool], labels: &[bool]) -> Result<f64> {
    ensure!(!labels.is_empty(), InvalidInput, "accuracy of an empty set");
    ensure!(
        predictions.len() == labels.len(),
        Shape,
        "{} predictions for {} labels",
        predictions.len(),
        labels.len()
    );
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean precision at the rank of each positive, ranking by descending
/// score. Equal scores keep their input order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    ensure!(!labels.is_empty(), InvalidInput, "average precision of an empty set");
    ensure!(scores.len() == labels.len(), Shape, "{} scores for {} labels", scores.len(), labels.len());
    ensure!(scores.iter().all(|s| !s.is_nan()), NonFinite, "NaN score");
    let positives = labels.iter().filter(|&&l| l).count();
    ensure!(positives > 0, InvalidInput, "average precision needs at least one positive");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Per-landmark importance, highest first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkImportance {
    /// Indexed by landmark.
    pub importance: Vec<f64>,
    /// Landmark indices by descending importance; ties keep index order.
    pub ranking: Vec<usize>,
}

impl LandmarkImportance {
    pub fn top(&self, k: usize) -> Vec<usize> {
        self.ranking.iter().copied().take(k).collect()
    }

    /// `rank,landmark,importance` rows in ranking order.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let map = |e: csv::Error| Error::InvalidInput(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(map)?;
        w.write_record(["rank", "landmark", "importance"]).map_err(map)?;
        for (r, &i) in self.ranking.iter().enumerate() {
            w.write_record([r.to_string(), i.to_string(), format!("{:?}", self.importance[i])])
                .map_err(map)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// `bin_low,bin_high,count` histogram of importance values over
    /// `bins` equal-width bins.
    pub fn write_histogram_csv(&self, bins: usize, path: impl AsRef<Path>) -> Result<()> {
        ensure!(bins > 0, InvalidInput, "histogram needs at least one bin");
        let path = path.as_ref();
        let hi = self.importance.iter().cloned().fold(0.0, f64::max);
        let width = if hi > 0.0 { hi / bins as f64 } else { 1.0 };
        let mut counts = vec![0usize; bins];
        for &v in &self.importance {
            counts[((v / width) as usize).min(bins - 1)] += 1;
        }
        let map = |e: csv::Error| Error::InvalidInput(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(map)?;
        w.write_record(["bin_low", "bin_high", "count"]).map_err(map)?;
        for (b, c) in counts.iter().enumerate() {
            w.write_record([
                format!("{:?}", b as f64 * width),
                format!("{:?}", (b + 1) as f64 * width),
                c.to_string(),
            ])
            .map_err(map)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Sum of absolute standardized weights over every coordinate feature of
/// each landmark, across all concatenated blocks of `n_landmarks · dim`.
pub fn landmark_importance(model: &LinearDwdModel, n_landmarks: usize, dim: usize) -> Result<LandmarkImportance> {
    let block = n_landmarks * dim;
    ensure!(
        block > 0 && !model.weights.is_empty() && model.weights.len() % block == 0,
        Shape,
        "{} weights do not split into blocks of {n_landmarks} landmarks × {dim}",
        model.weights.len()
    );
    let mut importance = vec![0.0; n_landmarks];
    for chunk in model.weights.chunks(block) {
        for (i, w) in chunk.chunks(dim).enumerate() {
            importance[i] += w.iter().map(|v| v.abs()).sum::<f64>();
        }
    }
    let mut ranking: Vec<usize> = (0..n_landmarks).collect();
    ranking.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]));
    Ok(LandmarkImportance { importance, ranking })
}

/// Landmarks of one subject at both timepoints.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapePair {
    pub t0: Points,
    pub t1: Points,
}

/// Align both timepoints to `mean` and concatenate the coordinates of
/// `subset` (all landmarks when `None`).
pub fn shape_features(pair: &ShapePair, mean: &Points, subset: Option<&[usize]>) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for shape in [&pair.t0, &pair.t1] {
        let a = align_to(shape, mean)?;
        match subset {
            Some(idx) => {
                for &i in idx {
                    ensure!(i < a.len(), InvalidInput, "landmark {i} out of range for {} landmarks", a.len());
                    out.extend_from_slice(a.row(i));
                }
            }
            None => out.extend_from_slice(a.as_flat()),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifyConfig {
    pub dwd: DwdConfig,
    /// Pick `dwd.lambda` from `lambda_grid` by stratified cross-validation.
    pub cross_validate: bool,
    pub lambda_grid: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
    /// Restrict features to the `k` most important landmarks of a first
    /// fit on all landmarks.
    pub top_k: Option<usize>,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            dwd: DwdConfig::default(),
            cross_validate: false,
            lambda_grid: vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0],
            folds: 5,
            seed: 0,
            top_k: None,
        }
    }
}

/// Stratified fold assignment: each class is shuffled and dealt round-robin.
fn folds(labels: &[bool], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![0; labels.len()];
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for (j, i) in idx.into_iter().enumerate() {
            fold[i] = j % k;
        }
    }
    fold
}

/// Cross-validated `λ`: highest pooled out-of-fold AP, larger `λ` on ties.
pub fn select_lambda(features: &[Vec<f64>], labels: &[bool], cfg: &ClassifyConfig) -> Result<f64> {
    ensure!(cfg.folds >= 2, Config, "cross-validation needs at least 2 folds");
    ensure!(!cfg.lambda_grid.is_empty(), Config, "empty lambda grid");
    let fold = folds(labels, cfg.folds, cfg.seed);
    let mut best = (f64::NEG_INFINITY, cfg.dwd.lambda);
    for &lambda in &cfg.lambda_grid {
        let mut scores = vec![0.0; labels.len()];
        for f in 0..cfg.folds {
            let (tr, te): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| fold[i] != f);
            if te.is_empty() {
                continue;
            }
            let x: Vec<Vec<f64>> = tr.iter().map(|&i| features[i].clone()).collect();
            let y: Vec<bool> = tr.iter().map(|&i| labels[i]).collect();
            let m = dwd_train(&x, &y, &DwdConfig { lambda, ..cfg.dwd.clone() })?;
            let xt: Vec<Vec<f64>> = te.iter().map(|&i| features[i].clone()).collect();
            for (&i, s) in te.iter().zip(dwd_predict(&m, &xt)?.0) {
                scores[i] = s;
            }
        }
        let ap = average_precision(&scores, labels)?;
        log::info!("lambda {lambda:e}: cross-validated AP {ap:.4}");
        if ap >= best.0 {
            best = (ap, lambda);
        }
    }
    Ok(best.1)
}

#[derive(Clone, Debug)]
pub struct ClassificationResult {
    pub model: LinearDwdModel,
    /// Procrustes mean of the training shapes.
    pub mean_shape: Points,
    /// Landmarks whose coordinates form the features.
    pub landmarks: Vec<usize>,
    pub scores: Vec<f64>,
    pub predictions: Vec<bool>,
    pub accuracy: f64,
    pub average_precision: f64,
    /// Importance from the fit on all landmarks.
    pub importance: LandmarkImportance,
}

fn fit(
    train: &[ShapePair],
    train_labels: &[bool],
    mean: &Points,
    subset: Option<&[usize]>,
    cfg: &ClassifyConfig,
) -> Result<LinearDwdModel> {
    let x: Vec<Vec<f64>> = train.iter().map(|p| shape_features(p, mean, subset)).collect::<Result<_>>()?;
    let lambda = if cfg.cross_validate {
        select_lambda(&x, train_labels, cfg)?
    } else {
        cfg.dwd.lambda
    };
    dwd_train(&x, train_labels, &DwdConfig { lambda, ..cfg.dwd.clone() })
}

/// GPA on the training shapes (both timepoints), DWD on the aligned
/// features, scored on the test subjects.
pub fn classify(
    train: &[ShapePair],
    train_labels: &[bool],
    test: &[ShapePair],
    test_labels: &[bool],
    cfg: &ClassifyConfig,
) -> Result<ClassificationResult> {
    ensure!(!train.is_empty() && !test.is_empty(), InvalidInput, "empty train or test set");
    ensure!(
        train.len() == train_labels.len() && test.len() == test_labels.len(),
        Shape,
        "shape and label counts differ"
    );
    let shapes: Vec<Points> = train.iter().flat_map(|p| [p.t0.clone(), p.t1.clone()]).collect();
    let aligned = gpa(&shapes)?;
    let (n, dim) = (aligned.mean.len(), aligned.mean.dim());
    let full = fit(train, train_labels, &aligned.mean, None, cfg)?;
    let importance = landmark_importance(&full, n, dim)?;
    let (model, landmarks) = match cfg.top_k {
        Some(k) => {
            ensure!(k >= 1 && k <= n, InvalidInput, "top-k {k} out of range for {n} landmarks");
            let idx = importance.top(k);
            (fit(train, train_labels, &aligned.mean, Some(&idx), cfg)?, idx)
        }
        None => (full, (0..n).collect()),
    };
    let xt: Vec<Vec<f64>> = test
        .iter()
        .map(|p| shape_features(p, &aligned.mean, Some(&landmarks)))
        .collect::<Result<_>>()?;
    let (scores, predictions) = dwd_predict(&model, &xt)?;
    Ok(ClassificationResult {
        accuracy: accuracy(&predictions, test_labels)?,
        average_precision: average_precision(&scores, test_labels)?,
        model,
        mean_shape: aligned.mean,
        landmarks,
        scores,
        predictions,
        importance,
    })
}

/// Test accuracy and AP when retraining on the top-k landmarks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopKRow {
    pub k: usize,
    pub accuracy: f64,
    pub average_precision: f64,
}

pub fn top_k_curve(
    train: &[ShapePair],
    train_labels: &[bool],
    test: &[ShapePair],
    test_labels: &[bool],
    ks: &[usize],
    cfg: &ClassifyConfig,
) -> Result<Vec<TopKRow>> {
    ks.iter()
        .map(|&k| {
            let r = classify(
                train,
                train_labels,
                test,
                test_labels,
                &ClassifyConfig {
                    top_k: Some(k),
                    ..cfg.clone()
                },
            )?;
            Ok(TopKRow {
                k,
                accuracy: r.accuracy,
                average_precision: r.average_precision,
            })
        })
        .collect()
}

/// `subject,label,score,prediction` rows.
pub fn write_predictions_csv(
    ids: &[String],
    labels: &[bool],
    scores: &[f64],
    predictions: &[bool],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let map = |e: csv::Error| Error::InvalidInput(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(map)?;
    w.write_record(["subject", "label", "score", "prediction"]).map_err(map)?;
    for i in 0..ids.len() {
        let b = |v: bool| if v { "1" } else { "0" }.to_string();
        w.write_record([ids[i].clone(), b(labels[i]), format!("{:?}", scores[i]), b(predictions[i])])
            .map_err(map)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
