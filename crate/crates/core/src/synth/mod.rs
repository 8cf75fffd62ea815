//! Synthetic cohorts with exact ground-truth correspondences.
//!
//! Every subject image is the template pulled back through a smooth
//! diffeomorphism, so any two images are related through template space
//! and the registration oracle is exact up to interpolation error. The
//! second timepoint adds a localized thinning of the ring (label 1 only)
//! and a small nuisance deformation.
//!
//! Map conventions, for an image `I = template ∘ Ψ`:
//! `Ψ` sends image points to template points, `T ≈ Ψ⁻¹` sends template
//! points to image points.

mod io;
mod oracle;
mod template;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use io::{load_cohort, read_labels_csv, read_points_csv, write_cohort, write_labels_csv, write_points_csv};
pub use oracle::{oracle_registration, FieldDirOracle, RegistrationOracle};
pub use template::{make_template, Template};

use crate::error::{ensure, Error, Result};
use crate::fieldcore::{compose, exp_svf, warp_image, DenseField, Grid, Image, Points, TransformField};
use crate::proposal::LandmarkSet;

/// A Gaussian intensity blob of the template.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Blob {
    pub center: Vec<f64>,
    /// Gaussian standard deviation in mm.
    pub radius: f64,
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortConfig {
    pub num_subjects: usize,
    pub dims: Vec<usize>,
    pub spacing: Vec<f64>,
    /// Ring (2-D) or spherical shell (3-D) centre; `None` = image centre.
    pub ring_center: Option<Vec<f64>>,
    pub ring_radius: f64,
    /// Twice the Gaussian profile width of the ring, in mm.
    pub ring_thickness: f64,
    pub ring_intensity: f64,
    pub blobs: Vec<Blob>,
    /// Amplitude of the low-frequency background texture.
    pub texture_amplitude: f64,
    /// Global multiplier on all template intensities.
    pub intensity: f64,
    pub svf_points: usize,
    /// Standard deviation of each bump's velocity components, mm.
    pub svf_amplitude: f64,
    /// Gaussian width of each velocity bump, mm.
    pub svf_width: f64,
    /// Bound of the uniform log-scale component about the image centre.
    pub svf_log_scale: f64,
    /// Width of the window `1 − exp(−r²/2ρ²)` that pins the bump velocity to
    /// zero at the image centre, so every map fixes that point; 0 disables.
    pub anchor_radius: f64,
    pub svf_steps: u32,
    /// Velocity amplitude of the t0→t1 nuisance deformation, mm.
    pub nuisance_amplitude: f64,
    /// Thinning at full progression, mm; must stay below `ring_thickness`.
    pub progression_mm: f64,
    pub progression_threshold: f64,
    /// Unit direction of the thinned sector.
    pub thinning_direction: Option<Vec<f64>>,
    /// Angular half-width of the thinned sector, radians.
    pub thinning_sector: f64,
    /// Additive Gaussian noise standard deviation, in intensity units.
    pub noise_std: f64,
    pub max_fold_fraction: f64,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            num_subjects: 40,
            dims: vec![96, 96],
            spacing: vec![1.0, 1.0],
            ring_center: None,
            ring_radius: 26.0,
            ring_thickness: 6.0,
            ring_intensity: 1.0,
            blobs: default_blobs(),
            texture_amplitude: 0.0,
            intensity: 7.0,
            svf_points: 8,
            svf_amplitude: 3.0,
            svf_width: 16.0,
            svf_log_scale: 0.1,
            anchor_radius: 20.0,
            svf_steps: 7,
            nuisance_amplitude: 0.5,
            progression_mm: 3.0,
            progression_threshold: 0.5,
            thinning_direction: None,
            thinning_sector: 0.6,
            noise_std: 0.35,
            max_fold_fraction: 0.01,
            seed: 0,
        }
    }
}

fn default_blobs() -> Vec<Blob> {
    let b = |x: f64, y: f64, radius: f64, intensity: f64| Blob {
        center: vec![x, y],
        radius,
        intensity,
    };
    vec![
        b(47.5, 47.5, 5.0, 0.8),
        b(40.0, 58.0, 3.0, 0.6),
        b(16.0, 16.0, 4.0, 0.7),
        b(80.0, 18.0, 4.0, 0.9),
        b(18.0, 80.0, 4.0, 0.6),
        b(79.0, 78.0, 4.5, 0.8),
    ]
}

impl CohortConfig {
    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dims.clone(), self.spacing.clone(), vec![0.0; self.dims.len()])
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.grid()?;
        let dim = g.dim();
        for (name, v) in [
            ("svf_amplitude", self.svf_amplitude),
            ("svf_log_scale", self.svf_log_scale),
            ("anchor_radius", self.anchor_radius),
            ("nuisance_amplitude", self.nuisance_amplitude),
            ("progression_mm", self.progression_mm),
            ("noise_std", self.noise_std),
            ("texture_amplitude", self.texture_amplitude),
            ("max_fold_fraction", self.max_fold_fraction),
        ] {
            ensure!(v >= 0.0 && v.is_finite(), Config, "{name} must be a non-negative number, got {v}");
        }
        ensure!(
            self.ring_radius > 0.0 && self.ring_thickness > 0.0 && self.svf_width > 0.0,
            Config,
            "ring radius, ring thickness and svf width must be positive"
        );
        ensure!(
            self.progression_mm < self.ring_thickness,
            Config,
            "progression_mm ({}) must be smaller than ring_thickness ({})",
            self.progression_mm,
            self.ring_thickness
        );
        ensure!(
            (0.0..1.0).contains(&self.progression_threshold),
            Config,
            "progression_threshold must lie in [0, 1)"
        );
        ensure!(
            (1..=30).contains(&self.svf_steps),
            Config,
            "svf_steps must lie in 1..=30"
        );
        if let Some(c) = &self.ring_center {
            ensure!(c.len() == dim, Config, "ring_center has {} coordinates for a {dim}-D grid", c.len());
        }
        if let Some(d) = &self.thinning_direction {
            ensure!(d.len() == dim, Config, "thinning_direction has {} coordinates for a {dim}-D grid", d.len());
            ensure!(d.iter().any(|&x| x != 0.0), Config, "thinning_direction must be nonzero");
        }
        for (i, b) in self.blobs.iter().enumerate() {
            ensure!(b.center.len() == dim, Config, "blob {i} has a {}-D centre on a {dim}-D grid", b.center.len());
            ensure!(b.radius > 0.0, Config, "blob {i} radius must be positive");
        }
        Ok(())
    }

    fn ring_center_or_default(&self, g: &Grid) -> Vec<f64> {
        self.ring_center.clone().unwrap_or_else(|| g.center())
    }

    fn thinning_axis(&self, dim: usize) -> Vec<f64> {
        let d = self.thinning_direction.clone().unwrap_or_else(|| {
            let mut e = vec![0.0; dim];
            e[dim - 1] = 1.0;
            e
        });
        let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        d.iter().map(|x| x / n).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Timepoint {
    T0,
    T1,
}

impl Timepoint {
    pub fn index(self) -> usize {
        match self {
            Timepoint::T0 => 0,
            Timepoint::T1 => 1,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Timepoint::T0 => "t0",
            Timepoint::T1 => "t1",
        }
    }
}

/// Identifies one image of a cohort.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ImageKey {
    pub subject: usize,
    pub timepoint: Timepoint,
}

impl ImageKey {
    pub fn new(subject: usize, timepoint: Timepoint) -> Self {
        Self { subject, timepoint }
    }
}

/// Draw parameters fixing one subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectSpec {
    pub id: String,
    pub seed: u64,
    /// Progression parameter in `[0, 1)`.
    pub progression: f64,
}

#[derive(Clone, Debug)]
pub struct Subject {
    pub id: String,
    pub spec: SubjectSpec,
    pub label: bool,
    /// Applied thinning in mm (0 for label 0).
    pub thinning_mm: f64,
    pub images: [Image; 2],
    /// `T` per timepoint: template points to image points.
    pub to_subject: [TransformField; 2],
    /// `Ψ` per timepoint: image points to template points.
    pub to_template: [TransformField; 2],
    /// Template anatomical points mapped into each timepoint.
    pub gt_landmarks: [LandmarkSet; 2],
    /// Hash of the template this subject was generated from.
    pub template_hash: String,
}

impl Subject {
    pub fn image(&self, t: Timepoint) -> &Image {
        &self.images[t.index()]
    }

    pub fn image_t0(&self) -> &Image {
        &self.images[0]
    }

    pub fn image_t1(&self) -> &Image {
        &self.images[1]
    }

    /// Ground-truth template→subject map at t0.
    pub fn gt_map(&self) -> &TransformField {
        &self.to_subject[0]
    }
}

#[derive(Clone, Debug)]
pub struct Cohort {
    pub config: CohortConfig,
    pub template: Template,
    pub subjects: Vec<Subject>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn image(&self, k: ImageKey) -> &Image {
        self.subjects[k.subject].image(k.timepoint)
    }

    /// Name of an image, e.g. `007_t1`.
    pub fn image_name(&self, k: ImageKey) -> String {
        format!("{}_{}", self.subjects[k.subject].id, k.timepoint.tag())
    }

    /// All keys for `subjects` at the given timepoints, subject-major.
    pub fn keys(&self, subjects: &[usize], timepoints: &[Timepoint]) -> Vec<ImageKey> {
        subjects
            .iter()
            .flat_map(|&s| timepoints.iter().map(move |&t| ImageKey::new(s, t)))
            .collect()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.subjects.iter().map(|s| s.label).collect()
    }

    /// SHA-256 over every image payload, hex encoded.
    pub fn payload_hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.subjects {
            for img in &s.images {
                for v in img.values() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

/// Stratified progression draws: one value per equal-width stratum, in
/// random subject order, so labels are balanced for every seed.
pub fn subject_specs(config: &CohortConfig) -> Vec<SubjectSpec> {
    let n = config.num_subjects;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut strata: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        strata.swap(i, rng.random_range(0..=i));
    }
    (0..n)
        .map(|i| SubjectSpec {
            id: format!("{i:03}"),
            seed: rng.random(),
            progression: (strata[i] as f64 + rng.random::<f64>()) / n as f64,
        })
        .collect()
}

/// Generate the full cohort described by `config`.
pub fn generate_cohort(config: &CohortConfig) -> Result<Cohort> {
    config.validate()?;
    let template = make_template(config)?;
    let subjects = subject_specs(config)
        .iter()
        .map(|spec| sample_subject(config, &template, spec))
        .collect::<Result<Vec<_>>>()?;
    Ok(Cohort {
        config: config.clone(),
        template,
        subjects,
    })
}

fn gaussian_bump_velocity(
    grid: &Grid,
    rng: &mut ChaCha8Rng,
    points: usize,
    amplitude: f64,
    width: f64,
    log_scale: f64,
    anchor_radius: f64,
) -> Result<DenseField> {
    let dim = grid.dim();
    let ext = grid.extent();
    let center = grid.center();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let bumps: Vec<(Vec<f64>, Vec<f64>)> = (0..points)
        .map(|_| {
            let c: Vec<f64> = (0..dim)
                .map(|k| grid.origin()[k] + ext[k] * rng.random_range(0.1..0.9))
                .collect();
            let a: Vec<f64> = (0..dim).map(|_| amplitude * normal.sample(rng)).collect();
            (c, a)
        })
        .collect();
    let s = if log_scale > 0.0 {
        rng.random_range(-log_scale..log_scale)
    } else {
        0.0
    };
    let inv = 1.0 / (2.0 * width * width);
    DenseField::from_fn(grid.clone(), |x, v| {
        let window = if anchor_radius > 0.0 {
            let r2: f64 = (0..dim).map(|k| (x[k] - center[k]).powi(2)).sum();
            1.0 - (-r2 / (2.0 * anchor_radius * anchor_radius)).exp()
        } else {
            1.0
        };
        for k in 0..dim {
            v[k] = s * (x[k] - center[k]);
        }
        for (c, a) in &bumps {
            let r2: f64 = (0..dim).map(|k| (x[k] - c[k]).powi(2)).sum();
            let w = window * (-r2 * inv).exp();
            for k in 0..dim {
                v[k] += w * a[k];
            }
        }
    })
}

/// A velocity whose forward and backward flows both fold less than the
/// configured fraction; redraws up to 100 times.
fn sample_velocity(
    config: &CohortConfig,
    grid: &Grid,
    rng: &mut ChaCha8Rng,
    amplitude: f64,
    log_scale: f64,
    what: &str,
) -> Result<(DenseField, TransformField, TransformField)> {
    for attempt in 0..100 {
        let v = gaussian_bump_velocity(
            grid,
            rng,
            config.svf_points,
            amplitude,
            config.svf_width,
            log_scale,
            config.anchor_radius,
        )?;
        let fwd = exp_svf(&v, config.svf_steps)?;
        let back = exp_svf(&v.scaled(-1.0), config.svf_steps)?;
        let fold = fwd.folding_fraction().max(back.folding_fraction());
        if fold <= config.max_fold_fraction {
            return Ok((v, fwd, back));
        }
        log::warn!("{what}: draw {attempt} folds {:.2}% of the grid, resampling", 100.0 * fold);
    }
    Err(Error::InvalidInput(format!(
        "{what}: no non-folding deformation in 100 draws; lower svf_amplitude"
    )))
}

/// Radial thinning velocity around the ring inside the thinned sector.
fn thinning_velocity(config: &CohortConfig, grid: &Grid, thinning_mm: f64) -> Result<DenseField> {
    let dim = grid.dim();
    let c = config.ring_center_or_default(grid);
    let e = config.thinning_axis(dim);
    let tau = config.ring_thickness;
    let kappa = -(1.0 - thinning_mm / tau).ln();
    let (r0, sr, sa) = (config.ring_radius, tau, config.thinning_sector);
    DenseField::from_fn(grid.clone(), |x, v| {
        let d: Vec<f64> = (0..dim).map(|k| x[k] - c[k]).collect();
        let r = d.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.fill(0.0);
        if r < 1e-9 {
            return;
        }
        let cosang: f64 = d.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>() / r;
        let sector = (-(1.0 - cosang) / (sa * sa)).exp();
        let dr = r - r0;
        let mag = kappa * dr * (-dr * dr / (2.0 * sr * sr)).exp() * sector;
        for k in 0..dim {
            v[k] = mag * d[k] / r;
        }
    })
}

fn add_noise(image: &mut Image, std: f64, rng: &mut ChaCha8Rng) {
    if std > 0.0 {
        let n = Normal::new(0.0, std).expect("valid noise std");
        for v in image.values_mut() {
            *v += n.sample(rng);
        }
    }
}

/// Generate one subject from its spec.
pub fn sample_subject(config: &CohortConfig, template: &Template, spec: &SubjectSpec) -> Result<Subject> {
    let grid = template.image.grid().clone();
    ensure!(
        grid == config.grid()?,
        GridMismatch,
        "template grid does not match the cohort configuration"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (_, t_s, psi_s) = sample_velocity(
        config,
        &grid,
        &mut rng,
        config.svf_amplitude,
        config.svf_log_scale,
        &format!("subject {}", spec.id),
    )?;
    let label = spec.progression > config.progression_threshold;
    let thinning_mm = if label {
        config.progression_mm * spec.progression
    } else {
        0.0
    };

    let mut psi_t1 = psi_s.clone();
    let mut t_t1 = t_s.clone();
    if config.nuisance_amplitude > 0.0 {
        let (_, n_fwd, n_back) = sample_velocity(
            config,
            &grid,
            &mut rng,
            config.nuisance_amplitude,
            0.0,
            &format!("subject {} nuisance", spec.id),
        )?;
        // Ψ_t1 = Ψ_s ∘ N and T_t1 = N⁻¹ ∘ T_s.
        psi_t1 = compose(&psi_t1, &n_fwd)?;
        t_t1 = compose(&n_back, &t_t1)?;
    }
    if thinning_mm > 0.0 {
        let theta = thinning_velocity(config, &grid, thinning_mm)?;
        let th_fwd = exp_svf(&theta, config.svf_steps)?;
        let th_back = exp_svf(&theta.scaled(-1.0), config.svf_steps)?;
        psi_t1 = compose(&th_fwd, &psi_t1)?;
        t_t1 = compose(&t_t1, &th_back)?;
    }

    let mut img0 = warp_image(&template.image, &psi_s)?;
    let mut img1 = warp_image(&template.image, &psi_t1)?;
    add_noise(&mut img0, config.noise_std, &mut rng);
    add_noise(&mut img1, config.noise_std, &mut rng);
    let gt0 = t_s.apply(&template.points)?;
    let gt1 = t_t1.apply(&template.points)?;
    Ok(Subject {
        id: spec.id.clone(),
        spec: spec.clone(),
        label,
        thinning_mm,
        images: [img0, img1],
        to_subject: [t_s, t_t1],
        to_template: [psi_s, psi_t1],
        gt_landmarks: [
            LandmarkSet::new(gt0, format!("{}_t0", spec.id)),
            LandmarkSet::new(gt1, format!("{}_t1", spec.id)),
        ],
        template_hash: template.hash.clone(),
    })
}

/// Points as an ordered landmark set of a subject image.
pub fn gt_points(cohort: &Cohort, k: ImageKey) -> &Points {
    &cohort.subjects[k.subject].gt_landmarks[k.timepoint.index()].points
}

#[cfg(test)]
mod tests;
