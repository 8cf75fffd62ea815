//! Consistency metrics, reconstruction diagnostics, saliency and overlays.
//!
//! Landmark sets of an evaluated pair `(a, b)` are compared in the frame
//! of a third image `c` after transporting them with the registration
//! oracle.

mod overlay;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use overlay::render_overlay;

use crate::diffengine::Tape;
use crate::error::{ensure, Error, Result};
use crate::fieldcore::{distance, mse, warp_image, Image, Points, TransformField};
use crate::losses::{nw_reconstruct, LossConfig};
use crate::proposal::ProposalModel;
use crate::synth::{Cohort, ImageKey, RegistrationOracle, Timepoint};

/// Nearest-neighbour distance from `q` to `set`, where `order` sorts `set`
/// by its first coordinate. Scans outward and stops once the first-axis gap
/// alone exceeds the best distance.
fn nearest(set: &Points, order: &[usize], keys: &[f64], q: &[f64]) -> f64 {
    let start = keys.partition_point(|&k| k < q[0]);
    let mut best = f64::INFINITY;
    let (mut lo, mut hi) = (start, start);
    let (mut up, mut down) = (true, true);
    while up || down {
        if up {
            if hi < order.len() && keys[hi] - q[0] <= best {
                best = best.min(distance(set.row(order[hi]), q));
                hi += 1;
            } else {
                up = false;
            }
        }
        if down {
            if lo > 0 && q[0] - keys[lo - 1] <= best {
                best = best.min(distance(set.row(order[lo - 1]), q));
                lo -= 1;
            } else {
                down = false;
            }
        }
    }
    best
}

fn mean_nearest(from: &Points, to: &Points) -> f64 {
    let mut order: Vec<usize> = (0..to.len()).collect();
    order.sort_by(|&i, &j| to.row(i)[0].total_cmp(&to.row(j)[0]));
    let keys: Vec<f64> = order.iter().map(|&i| to.row(i)[0]).collect();
    from.rows().map(|q| nearest(to, &order, &keys, q)).sum::<f64>() / from.len() as f64
}

/// Symmetric mean nearest-neighbour distance between two point clouds.
pub fn chamfer(a: &Points, b: &Points) -> Result<f64> {
    ensure!(!a.is_empty() && !b.is_empty(), InvalidInput, "chamfer distance of an empty set");
    ensure!(a.dim() == b.dim(), Shape, "chamfer between {}-D and {}-D sets", a.dim(), b.dim());
    Ok(0.5 * (mean_nearest(a, b) + mean_nearest(b, a)))
}

/// Index-matched errors between two ordered sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderedError {
    /// Mean absolute difference per coordinate axis.
    pub per_axis: Vec<f64>,
    /// Mean Euclidean distance.
    pub total: f64,
}

pub fn ordered_error(a: &Points, b: &Points) -> Result<OrderedError> {
    ensure!(
        a.len() == b.len() && a.dim() == b.dim(),
        Shape,
        "ordered error between {} and {} landmarks",
        a.len(),
        b.len()
    );
    ensure!(!a.is_empty(), InvalidInput, "ordered error of empty sets");
    let n = a.len() as f64;
    let mut per_axis = vec![0.0; a.dim()];
    let mut total = 0.0;
    for (p, q) in a.rows().zip(b.rows()) {
        for k in 0..a.dim() {
            per_axis[k] += (p[k] - q[k]).abs() / n;
        }
        total += distance(p, q) / n;
    }
    Ok(OrderedError { per_axis, total })
}

/// Chamfer distance after mapping both sets into the anchor frame.
pub fn chamfer_consistency(pa: &Points, pb: &Points, ca: &TransformField, cb: &TransformField) -> Result<f64> {
    chamfer(&ca.apply(pa)?, &cb.apply(pb)?)
}

/// Ordered error after mapping both sets into the anchor frame.
pub fn ordered_consistency(
    pa: &Points,
    pb: &Points,
    ca: &TransformField,
    cb: &TransformField,
) -> Result<OrderedError> {
    ensure!(pa.len() == pb.len(), Shape, "ordered consistency of {} vs {} landmarks", pa.len(), pb.len());
    ordered_error(&ca.apply(pa)?, &cb.apply(pb)?)
}

/// An evaluated pair `(a, b)` with its anchor `c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalTriplet {
    pub a: ImageKey,
    pub b: ImageKey,
    pub c: ImageKey,
}

/// Consecutive cross-subject pairs `(s_i, s_{i+1})` at `timepoint`, each
/// with an anchor image from a third subject drawn with `seed`.
pub fn evaluation_triplets(subjects: &[usize], timepoint: Timepoint, seed: u64) -> Result<Vec<EvalTriplet>> {
    ensure!(
        subjects.len() >= 3,
        InvalidInput,
        "evaluation needs at least 3 subjects, got {}",
        subjects.len()
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for w in subjects.windows(2) {
        let others: Vec<usize> = subjects.iter().copied().filter(|s| *s != w[0] && *s != w[1]).collect();
        let c = others[rng.random_range(0..others.len())];
        out.push(EvalTriplet {
            a: ImageKey::new(w[0], timepoint),
            b: ImageKey::new(w[1], timepoint),
            c: ImageKey::new(c, timepoint),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub pair_id: String,
    pub chamfer: f64,
    pub per_axis: Vec<f64>,
    pub total: f64,
}

/// Mean and standard deviation over pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Self::default();
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub rows: Vec<PairMetrics>,
    pub chamfer_mm: MeanStd,
    pub ordered_per_axis: Vec<MeanStd>,
    pub ordered_total_mm: MeanStd,
}

impl ConsistencyReport {
    pub fn from_rows(rows: Vec<PairMetrics>) -> Self {
        let dim = rows.first().map_or(0, |r| r.per_axis.len());
        Self {
            chamfer_mm: MeanStd::of(rows.iter().map(|r| r.chamfer)),
            ordered_per_axis: (0..dim).map(|k| MeanStd::of(rows.iter().map(|r| r.per_axis[k]))).collect(),
            ordered_total_mm: MeanStd::of(rows.iter().map(|r| r.total)),
            rows,
        }
    }

    /// CSV with columns `pair_id,chamfer,x,y,z,total`; `z` is empty in 2-D.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let map = |e: csv::Error| Error::InvalidInput(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(map)?;
        w.write_record(["pair_id", "chamfer", "x", "y", "z", "total"]).map_err(map)?;
        for r in &self.rows {
            let axis = |k: usize| r.per_axis.get(k).map(|v| format!("{v:?}")).unwrap_or_default();
            w.write_record([
                r.pair_id.clone(),
                format!("{:?}", r.chamfer),
                axis(0),
                axis(1),
                axis(2),
                format!("{:?}", r.total),
            ])
            .map_err(map)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Evaluate landmark sets supplied by `landmarks` on every triplet.
pub fn evaluate_landmarks<F>(
    oracle: &dyn RegistrationOracle,
    triplets: &[EvalTriplet],
    names: impl Fn(ImageKey) -> String,
    mut landmarks: F,
) -> Result<ConsistencyReport>
where
    F: FnMut(ImageKey) -> Result<Points>,
{
    let mut rows = Vec::with_capacity(triplets.len());
    for t in triplets {
        let (pa, pb) = (landmarks(t.a)?, landmarks(t.b)?);
        let ca = oracle.register(t.a, t.c)?;
        let cb = oracle.register(t.b, t.c)?;
        let o = ordered_consistency(&pa, &pb, &ca, &cb)?;
        rows.push(PairMetrics {
            pair_id: format!("{}~{}@{}", names(t.a), names(t.b), names(t.c)),
            chamfer: chamfer_consistency(&pa, &pb, &ca, &cb)?,
            per_axis: o.per_axis,
            total: o.total,
        });
    }
    Ok(ConsistencyReport::from_rows(rows))
}

/// Evaluate a proposal model's landmarks on a synthetic cohort.
pub fn evaluate_model(model: &ProposalModel, cohort: &Cohort, triplets: &[EvalTriplet]) -> Result<ConsistencyReport> {
    evaluate_landmarks(
        cohort,
        triplets,
        |k| cohort.image_name(k),
        |k| Ok(model.propose(cohort.image(k), cohort.image_name(k))?.points),
    )
}

/// Warped-image errors for one source/target pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarpErrors {
    /// MSE of the source warped by the landmark-regressed field.
    pub landmark_mse: f64,
    /// MSE of the source warped by the oracle field.
    pub oracle_mse: f64,
    /// MSE with no warp at all.
    pub unwarped_mse: f64,
}

/// Compare the kernel-regressed reconstruction of `source → target` with
/// the oracle field.
pub fn warp_errors(
    source: &Image,
    target: &Image,
    p_source: &Points,
    p_target: &Points,
    oracle: &TransformField,
    cfg: &LossConfig,
) -> Result<WarpErrors> {
    let d = nw_reconstruct(p_source, p_target, target.grid(), cfg)?;
    let nw = warp_image(source, &TransformField::from_displacement(d))?;
    Ok(WarpErrors {
        landmark_mse: mse(&nw, target)?,
        oracle_mse: mse(&warp_image(source, oracle)?, target)?,
        unwarped_mse: mse(source, target)?,
    })
}

/// Per-pixel `|∂‖ψ_p(f_i)‖² / ∂I(x)|` for landmark `index`.
pub fn saliency(model: &ProposalModel, image: &Image, index: usize) -> Result<Image> {
    ensure!(
        index < model.num_landmarks(),
        InvalidInput,
        "landmark index {index} out of range for {} landmarks",
        model.num_landmarks()
    );
    let mut tape = Tape::new();
    let params = model.param_constants(&mut tape);
    let input = tape.leaf(model.input_tensor(image)?);
    let out = model.forward(&mut tape, &params, input)?;
    let row = tape.gather(out.displacements, &[index])?;
    let s = tape.squared_norm(row);
    let g = tape.backward(s)?.wrt(&tape, input);
    let scale = 1.0 / model.config().input_scale;
    Image::new(image.grid().clone(), g.iter().map(|v| (v * scale).abs()).collect())
}
