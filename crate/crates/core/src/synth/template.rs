use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::CohortConfig;
use crate::error::{ensure, Result};
use crate::fieldcore::{Image, Points};

/// Seed of the fixed background texture; independent of the cohort seed.
const TEXTURE_SEED: u64 = 0x7e57;
const TEXTURE_WAVES: usize = 4;

/// Procedural template and its anatomical points.
#[derive(Clone, Debug)]
pub struct Template {
    pub image: Image,
    /// Ring cardinal points (`c ∓ r₀·e_k` per axis), then blob centres.
    pub points: Points,
    pub hash: String,
}

/// Ring (shell in 3-D) with a Gaussian radial profile, Gaussian blobs and
/// a low-frequency cosine texture.
pub fn make_template(config: &CohortConfig) -> Result<Template> {
    config.validate()?;
    let grid = config.grid()?;
    let dim = grid.dim();
    let c = config.ring_center_or_default(&grid);
    let ext = grid.extent();
    let hi: Vec<f64> = (0..dim).map(|k| grid.origin()[k] + ext[k]).collect();
    let reach = config.ring_radius + config.ring_thickness;
    for k in 0..dim {
        ensure!(
            c[k] - reach >= grid.origin()[k] && c[k] + reach <= hi[k],
            InvalidInput,
            "ring of radius {} and thickness {} leaves the image along axis {k}",
            config.ring_radius,
            config.ring_thickness
        );
    }
    for (i, b) in config.blobs.iter().enumerate() {
        for k in 0..dim {
            ensure!(
                b.center[k] - 2.0 * b.radius >= grid.origin()[k] && b.center[k] + 2.0 * b.radius <= hi[k],
                InvalidInput,
                "blob {i} at {:?} with radius {} leaves the image",
                b.center,
                b.radius
            );
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(TEXTURE_SEED);
    let waves: Vec<(Vec<f64>, f64)> = (0..TEXTURE_WAVES)
        .map(|_| {
            let w = (0..dim)
                .map(|_| std::f64::consts::TAU / rng.random_range(24.0..48.0) * if rng.random() { 1.0 } else { -1.0 })
                .collect();
            (w, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();

    let ring_sd = config.ring_thickness / 2.0;
    let image = Image::from_fn(grid.clone(), |x| {
        let r = (0..dim).map(|k| (x[k] - c[k]).powi(2)).sum::<f64>().sqrt();
        let mut v = config.ring_intensity * (-(r - config.ring_radius).powi(2) / (2.0 * ring_sd * ring_sd)).exp();
        for b in &config.blobs {
            let d2: f64 = (0..dim).map(|k| (x[k] - b.center[k]).powi(2)).sum();
            v += b.intensity * (-d2 / (2.0 * b.radius * b.radius)).exp();
        }
        let t: f64 = waves
            .iter()
            .map(|(w, p)| (w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + p).cos())
            .sum();
        config.intensity * (v + config.texture_amplitude * t / TEXTURE_WAVES as f64)
    })?;

    let mut rows = Vec::new();
    for k in 0..dim {
        for s in [-1.0, 1.0] {
            let mut p = c.clone();
            p[k] += s * config.ring_radius;
            rows.push(p);
        }
    }
    for b in &config.blobs {
        rows.push(b.center.clone());
    }
    let points = Points::from_rows(dim, &rows)?;

    let mut h = Sha256::new();
    for v in image.values() {
        h.update(v.to_le_bytes());
    }
    Ok(Template {
        image,
        points,
        hash: hex::encode(h.finalize()),
    })
}
