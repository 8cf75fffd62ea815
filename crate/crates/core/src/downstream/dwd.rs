//! Linear distance-weighted discrimination with the smooth DWD loss.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::fieldcore::ltf::LtfTensor;

const MODEL_FORMAT: &str = "trilandmark-dwd-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DwdConfig {
    /// Weight of `‖w‖²`.
    pub lambda: f64,
    /// Stop once the gradient norm falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for DwdConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            tolerance: 1e-6,
            max_iterations: 200_000,
        }
    }
}

/// `V(u) = 1 − u` for `u ≤ ½`, `1/(4u)` beyond.
pub fn dwd_loss(u: f64) -> f64 {
    if u <= 0.5 {
        1.0 - u
    } else {
        1.0 / (4.0 * u)
    }
}

pub fn dwd_loss_derivative(u: f64) -> f64 {
    if u <= 0.5 {
        -1.0
    } else {
        -1.0 / (4.0 * u * u)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearDwdModel {
    /// Weights on standardized features.
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub feature_mean: Vec<f64>,
    /// Per-feature divisor; constant features keep 1.
    pub feature_scale: Vec<f64>,
    pub iterations: usize,
    pub gradient_norm: f64,
}

fn check_rows(features: &[Vec<f64>]) -> Result<usize> {
    ensure!(!features.is_empty(), InvalidInput, "no feature rows");
    let p = features[0].len();
    ensure!(p > 0, InvalidInput, "feature vectors are empty");
    ensure!(
        features.iter().all(|r| r.len() == p),
        Shape,
        "feature rows have different lengths"
    );
    ensure!(
        features.iter().flatten().all(|v| v.is_finite()),
        NonFinite,
        "non-finite feature value"
    );
    Ok(p)
}

/// Mean of `V(y_i (wᵀx_i + β))` plus `λ‖w‖²`, with its gradient.
fn objective(x: &[Vec<f64>], y: &[f64], w: &[f64], b: f64, lambda: f64) -> (f64, Vec<f64>, f64) {
    let n = x.len() as f64;
    let mut f = lambda * w.iter().map(|v| v * v).sum::<f64>();
    let mut gw: Vec<f64> = w.iter().map(|v| 2.0 * lambda * v).collect();
    let mut gb = 0.0;
    for (xi, &yi) in x.iter().zip(y) {
        let u = yi * (xi.iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b);
        f += dwd_loss(u) / n;
        let d = dwd_loss_derivative(u) * yi / n;
        for (g, a) in gw.iter_mut().zip(xi) {
            *g += d * a;
        }
        gb += d;
    }
    (f, gw, gb)
}

/// Full-batch gradient descent with Armijo backtracking. Trial steps start
/// from the Barzilai-Borwein estimate, so every accepted step lowers the
/// objective.
pub fn dwd_train(features: &[Vec<f64>], labels: &[bool], cfg: &DwdConfig) -> Result<LinearDwdModel> {
    let p = check_rows(features)?;
    ensure!(features.len() == labels.len(), Shape, "{} rows but {} labels", features.len(), labels.len());
    ensure!(
        labels.iter().any(|&l| l) && labels.iter().any(|&l| !l),
        InvalidInput,
        "DWD needs examples of both classes"
    );
    ensure!(cfg.lambda > 0.0, Config, "DWD lambda must be positive");
    let n = features.len() as f64;
    let mut mean = vec![0.0; p];
    for r in features {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut scale = vec![0.0; p];
    for r in features {
        for ((s, v), m) in scale.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    for s in scale.iter_mut() {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }
    let x: Vec<Vec<f64>> = features
        .iter()
        .map(|r| r.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect())
        .collect();
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();

    let (mut w, mut b) = (vec![0.0; p], 0.0);
    let (mut f, mut gw, mut gb) = objective(&x, &y, &w, b, cfg.lambda);
    let mut step = 1.0;
    let mut iterations = 0;
    let norm = |gw: &[f64], gb: f64| (gw.iter().map(|g| g * g).sum::<f64>() + gb * gb).sqrt();
    while norm(&gw, gb) >= cfg.tolerance && iterations < cfg.max_iterations {
        let g2 = norm(&gw, gb).powi(2);
        let mut t = step;
        let accepted = loop {
            let w2: Vec<f64> = w.iter().zip(&gw).map(|(a, g)| a - t * g).collect();
            let b2 = b - t * gb;
            let (f2, gw2, gb2) = objective(&x, &y, &w2, b2, cfg.lambda);
            if f2 <= f - 1e-4 * t * g2 && f2 < f {
                break Some((w2, b2, f2, gw2, gb2));
            }
            t *= 0.5;
            if t < 1e-20 {
                break None;
            }
        };
        let Some((w2, b2, f2, gw2, gb2)) = accepted else {
            break;
        };
        // Barzilai-Borwein step for the next trial.
        let (mut sy, mut ss) = (0.0, 0.0);
        for i in 0..p {
            let (s, d) = (w2[i] - w[i], gw2[i] - gw[i]);
            sy += s * d;
            ss += s * s;
        }
        sy += (b2 - b) * (gb2 - gb);
        ss += (b2 - b) * (b2 - b);
        step = if sy > 0.0 { (ss / sy).clamp(1e-10, 1e10) } else { t * 2.0 };
        (w, b, f, gw, gb) = (w2, b2, f2, gw2, gb2);
        iterations += 1;
    }
    let gradient_norm = norm(&gw, gb);
    if gradient_norm >= cfg.tolerance {
        log::warn!("DWD stopped after {iterations} iterations with gradient norm {gradient_norm:.3e}");
    }
    Ok(LinearDwdModel {
        weights: w,
        intercept: b,
        lambda: cfg.lambda,
        feature_mean: mean,
        feature_scale: scale,
        iterations,
        gradient_norm,
    })
}

/// Decision scores and labels; a score of exactly 0 is labelled positive.
pub fn dwd_predict(model: &LinearDwdModel, features: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<bool>)> {
    let p = check_rows(features)?;
    ensure!(
        p == model.weights.len(),
        Shape,
        "model expects {} features, got {p}",
        model.weights.len()
    );
    let scores: Vec<f64> = features
        .iter()
        .map(|r| {
            r.iter()
                .zip(&model.feature_mean)
                .zip(&model.feature_scale)
                .zip(&model.weights)
                .map(|(((v, m), s), w)| (v - m) / s * w)
                .sum::<f64>()
                + model.intercept
        })
        .collect();
    let labels = scores.iter().map(|&s| s >= 0.0).collect();
    Ok((scores, labels))
}

impl LinearDwdModel {
    /// Text header followed by one LTF1 tensor of shape `[3, p]` holding
    /// weights, feature means and feature scales.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let p = self.weights.len();
        let mut data = self.weights.clone();
        data.extend(&self.feature_mean);
        data.extend(&self.feature_scale);
        let mut bytes = format!(
            "{MODEL_FORMAT}\nfeatures = {p}\nintercept = {:?}\nlambda = {:?}\niterations = {}\ngradient_norm = {:?}\n\n",
            self.intercept, self.lambda, self.iterations, self.gradient_norm
        )
        .into_bytes();
        bytes.extend(LtfTensor::plain(&[3, p], data).encode());
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::InvalidInput(format!("{}: {m}", path.display()));
        let split = bytes.windows(2).position(|w| w == b"\n\n").ok_or_else(|| bad("missing header"))?;
        let header = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8"))?;
        let mut lines = header.lines();
        ensure!(lines.next() == Some(MODEL_FORMAT), InvalidInput, "{}: not a DWD model file", path.display());
        let mut get = std::collections::HashMap::new();
        for l in lines {
            let (k, v) = l.split_once(" = ").ok_or_else(|| bad("malformed header line"))?;
            get.insert(k, v);
        }
        let num = |k: &str| -> Result<f64> {
            get.get(k)
                .ok_or_else(|| bad(&format!("missing {k}")))?
                .parse::<f64>()
                .map_err(|_| bad(&format!("bad {k}")))
        };
        let p = num("features")? as usize;
        let t = LtfTensor::decode(&bytes[split + 2..])?;
        ensure!(t.shape() == vec![3, p], InvalidInput, "{}: weight tensor shape mismatch", path.display());
        Ok(Self {
            weights: t.data[..p].to_vec(),
            feature_mean: t.data[p..2 * p].to_vec(),
            feature_scale: t.data[2 * p..].to_vec(),
            intercept: num("intercept")?,
            lambda: num("lambda")?,
            iterations: num("iterations")? as usize,
            gradient_norm: num("gradient_norm")?,
        })
    }
}
