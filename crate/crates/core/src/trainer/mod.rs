//! Triplet sampling and the optimization loop.
//!
//! Each step draws `batch_size` triplets, averages their objectives and
//! applies one optimizer update. Registration fields come from a
//! [`RegistrationOracle`] and enter the tape as constants.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffengine::{Tape, Tensor};
use crate::error::{ensure, Error, Result};
use crate::fieldcore::{Image, Points, TransformField};
use crate::losses::{total_loss_on, ImageNode, LossBreakdown, LossConfig, MapNode, TripletInputs};
use crate::proposal::{save_checkpoint, ProposalModel};
use crate::synth::{Cohort, ImageKey, RegistrationOracle, Timepoint};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
    /// Plain gradient descent.
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Triplets per update.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fractional learning-rate decrease applied after every epoch.
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub optimizer: Optimizer,
    /// Serialized separately from the optimizer settings.
    #[serde(skip)]
    pub loss: LossConfig,
    pub seed: u64,
    /// Updates per epoch; `None` means one pass worth of images,
    /// `ceil(n_images / batch_size)`.
    pub steps_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 35,
            batch_size: 4,
            learning_rate: 0.001,
            lr_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            optimizer: Optimizer::Adam,
            loss: LossConfig::default(),
            seed: 0,
            steps_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.learning_rate > 0.0, Config, "learning_rate must be positive, got {}", self.learning_rate);
        ensure!(
            (0.0..1.0).contains(&self.lr_decay),
            Config,
            "lr_decay must lie in [0, 1), got {}",
            self.lr_decay
        );
        ensure!(self.batch_size > 0, Config, "batch_size must be at least 1");
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            Config,
            "optimizer moments must lie in [0, 1)"
        );
        ensure!(self.eps > 0.0, Config, "eps must be positive");
        ensure!(self.steps_per_epoch != Some(0), Config, "steps_per_epoch must be at least 1");
        self.loss.validate()
    }

    /// `lr · (1 − decay)^epoch`, epochs counted from 0.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * (1.0 - self.lr_decay).powi(epoch as i32)
    }

    pub fn steps_for(&self, num_images: usize) -> usize {
        self.steps_per_epoch.unwrap_or(num_images.div_ceil(self.batch_size))
    }
}

/// Images available for training together with the oracle that registers
/// them.
pub struct TrainingSet<'a> {
    pub keys: Vec<ImageKey>,
    pub images: Vec<&'a Image>,
    pub oracle: &'a dyn RegistrationOracle,
}

impl<'a> TrainingSet<'a> {
    pub fn from_cohort(cohort: &'a Cohort, subjects: &[usize], timepoints: &[Timepoint]) -> Self {
        let keys = cohort.keys(subjects, timepoints);
        Self {
            images: keys.iter().map(|&k| cohort.image(k)).collect(),
            keys,
            oracle: cohort,
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Triplet `(a, b, c)` with its maps `Φca` (a-points to c) and `Φcb`.
    pub fn triplet(&self, t: [usize; 3]) -> Result<Triplet<'a>> {
        let [a, b, c] = t.map(|i| self.keys[i]);
        Ok(Triplet {
            indices: t,
            images: t.map(|i| self.images[i]),
            ca: self.oracle.register(a, c)?,
            cb: self.oracle.register(b, c)?,
        })
    }
}

/// Three training images; the last one is the anchor frame.
pub struct Triplet<'a> {
    pub indices: [usize; 3],
    pub images: [&'a Image; 3],
    pub ca: TransformField,
    pub cb: TransformField,
}

/// Three distinct indices out of `n`, drawn uniformly without replacement.
/// The third is the anchor.
pub fn sample_triplet(n: usize, rng: &mut ChaCha8Rng) -> Result<[usize; 3]> {
    ensure!(n >= 3, InvalidInput, "triplet sampling needs at least 3 images, got {n}");
    let s = sample(rng, n, 3);
    Ok([s.index(0), s.index(1), s.index(2)])
}

/// First and second moment estimates for every parameter tensor.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(model: &ProposalModel) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Batch-mean losses and parameter gradients.
pub struct BatchGradients {
    pub breakdown: LossBreakdown,
    pub per_triplet: Vec<LossBreakdown>,
    pub grads: Vec<Vec<f64>>,
}

impl BatchGradients {
    pub fn norm(&self) -> f64 {
        self.grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }
}

fn dump_landmarks(sets: &[Points]) -> String {
    let mut s = String::new();
    for (i, p) in sets.iter().enumerate() {
        s.push_str(&format!("\nset {i}:"));
        for r in p.rows() {
            s.push_str(&format!(" ({})", r.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", ")));
        }
    }
    s
}

/// Forward and backward over a batch. Gradients are summed over triplets in
/// batch order and divided by the batch size.
pub fn batch_gradients(model: &ProposalModel, batch: &[Triplet], cfg: &LossConfig) -> Result<BatchGradients> {
    ensure!(!batch.is_empty(), InvalidInput, "empty batch");
    let mut grads: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut per_triplet = Vec::with_capacity(batch.len());
    for t in batch {
        let mut tape = Tape::new();
        let params = model.param_leaves(&mut tape);
        let mut landmarks = Vec::with_capacity(3);
        let mut nodes = Vec::with_capacity(3);
        for im in t.images {
            let x = tape.constant(model.input_tensor(im)?);
            landmarks.push(model.forward(&mut tape, &params, x)?.landmarks);
            nodes.push(ImageNode::constant(&mut tape, im));
        }
        let dump = |tape: &Tape, what: String| -> Error {
            let sets: Result<Vec<Points>> = landmarks
                .iter()
                .map(|&v| Points::from_flat(model.image_grid().dim(), tape.value(v).data().to_vec()))
                .collect();
            match sets {
                Ok(sets) => Error::NonFinite(format!("{what} on triplet {:?}; landmarks:{}", t.indices, dump_landmarks(&sets))),
                Err(e) => e,
            }
        };
        if landmarks.iter().any(|&v| !tape.value(v).is_finite()) {
            return Err(dump(&tape, "non-finite landmarks".into()));
        }
        let (ca, cb) = (MapNode::constant(&mut tape, &t.ca), MapNode::constant(&mut tape, &t.cb));
        let vars = total_loss_on(
            &mut tape,
            &TripletInputs {
                pa: landmarks[0],
                pb: landmarks[1],
                pc: landmarks[2],
                ia: &nodes[0],
                ib: &nodes[1],
                ic: &nodes[2],
                ca: &ca,
                cb: &cb,
            },
            cfg,
        )?;
        let b = vars.breakdown(&tape, cfg)?;
        if !b.is_finite() {
            return Err(dump(&tape, format!("loss {b:?}")));
        }
        let g = tape.backward(vars.total)?;
        for (acc, &p) in grads.iter_mut().zip(&params) {
            for (a, v) in acc.iter_mut().zip(g.wrt(&tape, p)) {
                *a += v;
            }
        }
        per_triplet.push(b);
    }
    let inv = 1.0 / batch.len() as f64;
    for g in grads.iter_mut().flatten() {
        *g *= inv;
    }
    ensure!(
        grads.iter().flatten().all(|g| g.is_finite()),
        NonFinite,
        "non-finite gradient on triplets {:?}",
        batch.iter().map(|t| t.indices).collect::<Vec<_>>()
    );
    Ok(BatchGradients {
        breakdown: LossBreakdown::mean(&per_triplet),
        per_triplet,
        grads,
    })
}

/// Apply one update with learning rate `lr`.
pub fn apply_update(model: &mut ProposalModel, state: &mut OptimizerState, grads: &[Vec<f64>], lr: f64, cfg: &TrainConfig) {
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
    for (i, p) in model.params_mut().iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            match cfg.optimizer {
                Optimizer::Sgd => *w -= lr * g,
                Optimizer::Adam => {
                    m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                    v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                    *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
                }
            }
        }
    }
}

/// One optimizer step on `batch`; returns the batch-mean losses.
pub fn train_step(
    model: &mut ProposalModel,
    state: &mut OptimizerState,
    batch: &[Triplet],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let g = batch_gradients(model, batch, &cfg.loss)?;
    apply_update(model, state, &g.grads, lr, cfg);
    Ok(g.breakdown)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_total: f64,
    pub validation: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Not part of any CSV, so logs stay comparable across runs.
    pub wall_clock_s: f64,
}

impl TrainLog {
    /// Per-step CSV: `step,epoch,lr,l_d_ab,l_d_ca,l_d_cb,l_d_total,l_recon,total`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let map = |e: csv::Error| Error::InvalidInput(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(map)?;
        w.write_record(["step", "epoch", "lr", "l_d_ab", "l_d_ca", "l_d_cb", "l_d_total", "l_recon", "total"])
            .map_err(map)?;
        for r in &self.steps {
            let l = &r.loss;
            let mut rec = vec![r.step.to_string(), r.epoch.to_string()];
            rec.extend(
                [r.lr, l.l_d_ab, l.l_d_ca, l.l_d_cb, l.l_d_total, l.l_recon, l.total].map(|v| format!("{v:?}")),
            );
            w.write_record(&rec).map_err(map)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Per-epoch CSV: `epoch,lr,mean_total,validation`.
    pub fn write_epoch_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let map = |e: csv::Error| Error::InvalidInput(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(map)?;
        w.write_record(["epoch", "lr", "mean_total", "validation"]).map_err(map)?;
        for r in &self.epochs {
            w.write_record([
                r.epoch.to_string(),
                format!("{:?}", r.lr),
                format!("{:?}", r.mean_total),
                r.validation.map(|v| format!("{v:?}")).unwrap_or_default(),
            ])
            .map_err(map)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Side outputs of [`train`].
#[derive(Default)]
pub struct TrainHooks<'h> {
    /// Checkpoints go to `<dir>/epoch_<e>/` after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
    /// Scalar validation metric evaluated after every epoch.
    pub validation: Option<Box<dyn Fn(&ProposalModel) -> Result<f64> + 'h>>,
    /// Called after every step with the step index and its losses.
    pub on_step: Option<Box<dyn FnMut(usize, &LossBreakdown) + 'h>>,
}

/// Train `model` for `cfg.epochs` epochs. Deterministic given `cfg.seed`
/// and the initial parameters.
pub fn train(
    mut model: ProposalModel,
    data: &TrainingSet,
    cfg: &TrainConfig,
    mut hooks: TrainHooks,
) -> Result<(ProposalModel, TrainLog)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok((model, log));
    }
    ensure!(data.len() >= 3, InvalidInput, "training needs at least 3 images, got {}", data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(&model);
    let steps = cfg.steps_for(data.len());
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        let mut sum = 0.0;
        for _ in 0..steps {
            let batch = (0..cfg.batch_size)
                .map(|_| data.triplet(sample_triplet(data.len(), &mut rng)?))
                .collect::<Result<Vec<_>>>()?;
            let loss = train_step(&mut model, &mut state, &batch, lr, cfg)?;
            log::debug!("epoch {epoch} step {step}: total {:.6e}", loss.total);
            if let Some(f) = hooks.on_step.as_mut() {
                f(step, &loss);
            }
            sum += loss.total;
            log.steps.push(StepRecord { step, epoch, lr, loss });
            step += 1;
        }
        let validation = match &hooks.validation {
            Some(f) => Some(f(&model)?),
            None => None,
        };
        if let Some(dir) = &hooks.checkpoint_dir {
            save_checkpoint(&model, dir.join(format!("epoch_{epoch}")))?;
        }
        log.epochs.push(EpochRecord {
            epoch,
            lr,
            mean_total: sum / steps as f64,
            validation,
        });
        log::info!("epoch {epoch}: lr {lr:.6e}, mean loss {:.6e}", sum / steps as f64);
    }
    log.wall_clock_s = start.elapsed().as_secs_f64();
    Ok((model, log))
}

/// Bitwise equality of two parameter lists.
pub fn params_equal(a: &[Tensor], b: &[Tensor]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(u, v)| u.to_bits() == v.to_bits())
        })
}
