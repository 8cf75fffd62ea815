//! Cohort directory layout.
//!
//! ```text
//! cohort.toml                 config, seed, subject table, hashes
//! labels.csv                  subject,label
//! template.ltf                template image
//! template_points.csv         template anatomical points
//! subject_<id>_t0.ltf         image at t0
//! subject_<id>_t1.ltf         image at t1
//! subject_<id>_map.ltf        template→subject displacement at t0
//! subject_<id>_inv.ltf        subject→template displacement at t0
//! subject_<id>_t1_map.ltf     template→subject displacement at t1
//! subject_<id>_t1_inv.ltf     subject→template displacement at t1
//! subject_<id>_gt.csv         ground-truth landmarks at t0 (index,x,y[,z])
//! subject_<id>_gt_t1.csv      ground-truth landmarks at t1
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Cohort, CohortConfig, Subject, SubjectSpec, Template};
use crate::error::{ensure, Error, Result};
use crate::fieldcore::ltf::{load_field, load_image, save_image, save_transform};
use crate::fieldcore::{Points, TransformField};
use crate::proposal::LandmarkSet;

const FORMAT: &str = "trilandmark-cohort-1";
const AXES: [&str; 3] = ["x", "y", "z"];

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    template_hash: String,
    payload_hash: String,
    config: CohortConfig,
    subjects: Vec<SubjectEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubjectEntry {
    id: String,
    seed: u64,
    progression: f64,
    label: bool,
    thinning_mm: f64,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::InvalidInput(format!("{}: {e}", path.display()))
}

/// Write points as `index,x,y[,z]` rows.
pub fn write_points_csv(points: &Points, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["index"];
    header.extend(&AXES[..points.dim()]);
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (i, r) in points.rows().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(r.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read points written by [`write_points_csv`]; rows must be in index order.
pub fn read_points_csv(path: impl AsRef<Path>) -> Result<Points> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let dim = r.headers().map_err(|e| csv_err(path, e))?.len().saturating_sub(1);
    ensure!(
        dim == 2 || dim == 3,
        InvalidInput,
        "{}: expected columns index,x,y[,z]",
        path.display()
    );
    let mut coords = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidInput(format!("{}: row {}: bad number {s:?}", path.display(), row + 1)))
        };
        ensure!(
            parse(&rec[0])? == row as f64,
            InvalidInput,
            "{}: row {} has index {}",
            path.display(),
            row + 1,
            &rec[0]
        );
        for k in 0..dim {
            coords.push(parse(&rec[k + 1])?);
        }
    }
    Points::from_flat(dim, coords)
}

/// `subject,label` with labels written as 0/1.
pub fn write_labels_csv(ids: &[String], labels: &[bool], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["subject", "label"]).map_err(|e| csv_err(path, e))?;
    for (id, &l) in ids.iter().zip(labels) {
        w.write_record([id.as_str(), if l { "1" } else { "0" }])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_labels_csv(path: impl AsRef<Path>) -> Result<Vec<(String, bool)>> {
    let path = path.as_ref();
    ensure!(path.exists(), InvalidInput, "{}: labels file not found", path.display());
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        ensure!(rec.len() == 2, InvalidInput, "{}: expected subject,label rows", path.display());
        let label = match rec[1].trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::InvalidInput(format!(
                    "{}: label {other:?} is not 0 or 1",
                    path.display()
                )))
            }
        };
        out.push((rec[0].trim().to_string(), label));
    }
    Ok(out)
}

/// Write `cohort` into `dir`. A non-empty `dir` is refused unless `force`.
pub fn write_cohort(cohort: &Cohort, dir: impl AsRef<Path>, force: bool) -> Result<()> {
    let dir = dir.as_ref();
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        ensure!(
            !non_empty || force,
            InvalidInput,
            "{}: directory is not empty (use --force to overwrite)",
            dir.display()
        );
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_image(&cohort.template.image, dir.join("template.ltf"))?;
    write_points_csv(&cohort.template.points, dir.join("template_points.csv"))?;
    for s in &cohort.subjects {
        let f = |suffix: &str| dir.join(format!("subject_{}_{suffix}", s.id));
        save_image(&s.images[0], f("t0.ltf"))?;
        save_image(&s.images[1], f("t1.ltf"))?;
        save_transform(&s.to_subject[0], f("map.ltf"))?;
        save_transform(&s.to_template[0], f("inv.ltf"))?;
        save_transform(&s.to_subject[1], f("t1_map.ltf"))?;
        save_transform(&s.to_template[1], f("t1_inv.ltf"))?;
        write_points_csv(&s.gt_landmarks[0].points, f("gt.csv"))?;
        write_points_csv(&s.gt_landmarks[1].points, f("gt_t1.csv"))?;
    }
    let ids: Vec<String> = cohort.subjects.iter().map(|s| s.id.clone()).collect();
    write_labels_csv(&ids, &cohort.labels(), dir.join("labels.csv"))?;
    let manifest = Manifest {
        format: FORMAT.into(),
        template_hash: cohort.template.hash.clone(),
        payload_hash: cohort.payload_hash(),
        config: cohort.config.clone(),
        subjects: cohort
            .subjects
            .iter()
            .map(|s| SubjectEntry {
                id: s.id.clone(),
                seed: s.spec.seed,
                progression: s.spec.progression,
                label: s.label,
                thinning_mm: s.thinning_mm,
            })
            .collect(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    let path = dir.join("cohort.toml");
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Load a cohort directory written by [`write_cohort`]. Labels are taken
/// from `labels.csv`.
pub fn load_cohort(dir: impl AsRef<Path>) -> Result<Cohort> {
    let dir = dir.as_ref();
    let path = dir.join("cohort.toml");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    ensure!(
        m.format == FORMAT,
        Config,
        "{}: unsupported cohort format {:?}",
        path.display(),
        m.format
    );
    let image = load_image(dir.join("template.ltf"))?;
    let points = read_points_csv(dir.join("template_points.csv"))?;
    let template = Template {
        image,
        points,
        hash: m.template_hash.clone(),
    };
    let labels = read_labels_csv(dir.join("labels.csv"))?;
    let mut subjects = Vec::with_capacity(m.subjects.len());
    for e in &m.subjects {
        let f = |suffix: &str| dir.join(format!("subject_{}_{suffix}", e.id));
        let tf = |suffix: &str| -> Result<TransformField> { Ok(TransformField::from_displacement(load_field(f(suffix))?)) };
        let label = labels
            .iter()
            .find(|(id, _)| id == &e.id)
            .map(|(_, l)| *l)
            .ok_or_else(|| Error::InvalidInput(format!("labels.csv has no row for subject {}", e.id)))?;
        subjects.push(Subject {
            id: e.id.clone(),
            spec: SubjectSpec {
                id: e.id.clone(),
                seed: e.seed,
                progression: e.progression,
            },
            label,
            thinning_mm: e.thinning_mm,
            images: [load_image(f("t0.ltf"))?, load_image(f("t1.ltf"))?],
            to_subject: [tf("map.ltf")?, tf("t1_map.ltf")?],
            to_template: [tf("inv.ltf")?, tf("t1_inv.ltf")?],
            gt_landmarks: [
                LandmarkSet::new(read_points_csv(f("gt.csv"))?, format!("{}_t0", e.id)),
                LandmarkSet::new(read_points_csv(f("gt_t1.csv"))?, format!("{}_t1", e.id)),
            ],
            template_hash: m.template_hash.clone(),
        });
    }
    let cohort = Cohort {
        config: m.config,
        template,
        subjects,
    };
    ensure!(
        cohort.payload_hash() == m.payload_hash,
        InvalidInput,
        "{}: image payload hash mismatch",
        path.display()
    );
    Ok(cohort)
}
