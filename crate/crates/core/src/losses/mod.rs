//! Training objectives.
//!
//! Each loss comes in two forms: a tape builder (`*_on`) used by the
//! trainer, and a value-level wrapper over plain point sets and fields.
//! Transformation fields enter every tape as constants.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffengine::{Tape, Tensor, Var};
use crate::error::{ensure, Result};
use crate::fieldcore::{DenseField, Grid, Image, Points, TransformField};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Kernel bandwidth in mm.
    pub sigma: f64,
    pub lambda_d: f64,
    pub lambda_recon: f64,
    /// Floor on the kernel-weight sum.
    pub nw_epsilon: f64,
    /// Kernel support radius in units of `sigma`; beyond it a landmark
    /// contributes nothing. At 4 the dropped weight is below `e^-8` of the
    /// peak. `None` keeps the full Gaussian.
    pub nw_cutoff: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            sigma: 3.0,
            lambda_d: 0.005,
            lambda_recon: 0.05,
            nw_epsilon: 1e-12,
            nw_cutoff: Some(4.0),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.sigma > 0.0, Config, "sigma must be positive, got {}", self.sigma);
        ensure!(
            self.lambda_d >= 0.0 && self.lambda_recon >= 0.0,
            Config,
            "loss weights must be non-negative"
        );
        ensure!(self.nw_epsilon > 0.0, Config, "nw_epsilon must be positive");
        ensure!(
            self.nw_cutoff.is_none_or(|c| c > 0.0),
            Config,
            "nw_cutoff must be positive"
        );
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_d_ab: f64,
    pub l_d_ca: f64,
    pub l_d_cb: f64,
    pub l_d_total: f64,
    pub l_recon: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Combine component values; `total` is the weighted sum.
    pub fn new(l_d_ab: f64, l_d_ca: f64, l_d_cb: f64, l_recon: f64, cfg: &LossConfig) -> Self {
        let l_d_total = l_d_ab + l_d_ca + l_d_cb;
        Self {
            l_d_ab,
            l_d_ca,
            l_d_cb,
            l_d_total,
            l_recon,
            total: cfg.lambda_d * l_d_total + cfg.lambda_recon * l_recon,
        }
    }

    /// Component-wise mean over a batch.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut m = LossBreakdown::default();
        for b in items {
            m.l_d_ab += b.l_d_ab / n;
            m.l_d_ca += b.l_d_ca / n;
            m.l_d_cb += b.l_d_cb / n;
            m.l_d_total += b.l_d_total / n;
            m.l_recon += b.l_recon / n;
            m.total += b.total / n;
        }
        m
    }

    pub fn is_finite(&self) -> bool {
        [self.l_d_ab, self.l_d_ca, self.l_d_cb, self.l_recon, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// A dense point map `x ↦ x + D(x)` recorded on a tape.
#[derive(Clone)]
pub struct MapNode {
    pub displacement: Var,
    pub grid: Arc<Grid>,
}

impl MapNode {
    pub fn constant(tape: &mut Tape, map: &TransformField) -> Self {
        let d = map.displacement();
        let g = d.grid();
        let t = Tensor::new(vec![g.len(), g.dim()], d.vectors().to_vec()).expect("field shape");
        Self {
            displacement: tape.constant(t),
            grid: Arc::new(g.clone()),
        }
    }

    /// Mapped points `p + D(p)`, `[N, dim]`.
    pub fn apply(&self, tape: &mut Tape, points: Var) -> Result<Var> {
        let d = tape.sample(self.displacement, points, &self.grid)?;
        tape.add(points, d)
    }
}

fn same_rows(tape: &Tape, a: Var, b: Var, what: &str) -> Result<usize> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    ensure!(
        sa.len() == 2 && sa == sb,
        Shape,
        "{what}: landmark sets of shape {sa:?} and {sb:?}"
    );
    ensure!(sa[0] > 0, InvalidInput, "{what}: empty landmark set");
    Ok(sa[0])
}

fn mean_sq_dist(tape: &mut Tape, a: Var, b: Var, n: usize) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let s = tape.squared_norm(d);
    Ok(tape.scale(s, 1.0 / n as f64))
}

/// `(1/N) Σ ‖Φca(p_a) − Φcb(p_b)‖²`.
pub fn discovery_pair_on(tape: &mut Tape, pa: Var, pb: Var, ca: &MapNode, cb: &MapNode) -> Result<Var> {
    let n = same_rows(tape, pa, pb, "discovery_pair")?;
    let ma = ca.apply(tape, pa)?;
    let mb = cb.apply(tape, pb)?;
    mean_sq_dist(tape, ma, mb, n)
}

/// `(1/N) Σ ‖p_c − Φcx(p_x)‖²`.
pub fn discovery_anchor_on(tape: &mut Tape, pc: Var, px: Var, cx: &MapNode) -> Result<Var> {
    let n = same_rows(tape, pc, px, "discovery_anchor")?;
    let mx = cx.apply(tape, px)?;
    mean_sq_dist(tape, pc, mx, n)
}

/// The three discovery terms `[ab, ca, cb]`.
pub fn discovery_terms_on(
    tape: &mut Tape,
    pa: Var,
    pb: Var,
    pc: Var,
    ca: &MapNode,
    cb: &MapNode,
) -> Result<[Var; 3]> {
    let n = same_rows(tape, pa, pb, "discovery_total")?;
    same_rows(tape, pa, pc, "discovery_total")?;
    let ma = ca.apply(tape, pa)?;
    let mb = cb.apply(tape, pb)?;
    Ok([
        mean_sq_dist(tape, ma, mb, n)?,
        mean_sq_dist(tape, pc, ma, n)?,
        mean_sq_dist(tape, pc, mb, n)?,
    ])
}

/// Kernel-regressed displacement field on `grid`: centers at `p_tgt`,
/// values `p_src − p_tgt`. Result is `[grid.len(), dim]`.
pub fn nw_reconstruct_on(
    tape: &mut Tape,
    p_src: Var,
    p_tgt: Var,
    grid: &Arc<Grid>,
    cfg: &LossConfig,
) -> Result<Var> {
    same_rows(tape, p_src, p_tgt, "nw_reconstruct")?;
    let values = tape.sub(p_src, p_tgt)?;
    tape.nadaraya_watson(
        p_tgt,
        values,
        grid,
        cfg.sigma,
        cfg.nw_epsilon,
        cfg.nw_cutoff.map(|c| c * cfg.sigma),
    )
}

/// Images and their grid as tape constants.
pub struct ImageNode {
    pub values: Var,
    pub grid: Arc<Grid>,
    grid_points: Var,
}

impl ImageNode {
    pub fn constant(tape: &mut Tape, image: &Image) -> Self {
        let g = image.grid();
        let v = Tensor::new(vec![g.len(), 1], image.values().to_vec()).expect("image shape");
        let p = Tensor::new(vec![g.len(), g.dim()], g.points().into_flat()).expect("grid shape");
        Self {
            values: tape.constant(v),
            grid: Arc::new(g.clone()),
            grid_points: tape.constant(p),
        }
    }
}

/// `MSE(I_src ∘ (Id + D̃), I_tgt)` with `D̃` regressed from `(p_src, p_tgt)`
/// on the target grid.
pub fn warped_mse_on(
    tape: &mut Tape,
    src: &ImageNode,
    tgt: &ImageNode,
    p_src: Var,
    p_tgt: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    ensure!(
        src.grid.dim() == tgt.grid.dim(),
        GridMismatch,
        "source image is {}-D, target is {}-D",
        src.grid.dim(),
        tgt.grid.dim()
    );
    let d = nw_reconstruct_on(tape, p_src, p_tgt, &tgt.grid, cfg)?;
    let coords = tape.add(tgt.grid_points, d)?;
    let warped = tape.sample(src.values, coords, &src.grid)?;
    let r = tape.sub(warped, tgt.values)?;
    let s = tape.squared_norm(r);
    Ok(tape.scale(s, 1.0 / tgt.grid.len() as f64))
}

/// `MSE(I_a ∘ Φ̃ac, I_c) + MSE(I_b ∘ Φ̃bc, I_c)`.
#[allow(clippy::too_many_arguments)]
pub fn recon_loss_on(
    tape: &mut Tape,
    ia: &ImageNode,
    ib: &ImageNode,
    ic: &ImageNode,
    pa: Var,
    pb: Var,
    pc: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let a = warped_mse_on(tape, ia, ic, pa, pc, cfg)?;
    let b = warped_mse_on(tape, ib, ic, pb, pc, cfg)?;
    tape.add(a, b)
}

/// Everything one triplet contributes to the objective.
pub struct TripletVars {
    pub l_d_ab: Var,
    pub l_d_ca: Var,
    pub l_d_cb: Var,
    pub l_recon: Option<Var>,
    pub total: Var,
}

impl TripletVars {
    pub fn breakdown(&self, tape: &Tape, cfg: &LossConfig) -> Result<LossBreakdown> {
        let r = match self.l_recon {
            Some(v) => tape.item(v)?,
            None => 0.0,
        };
        Ok(LossBreakdown::new(
            tape.item(self.l_d_ab)?,
            tape.item(self.l_d_ca)?,
            tape.item(self.l_d_cb)?,
            r,
            cfg,
        ))
    }
}

/// Landmark sets, images and point maps of one triplet on a tape.
pub struct TripletInputs<'a> {
    pub pa: Var,
    pub pb: Var,
    pub pc: Var,
    pub ia: &'a ImageNode,
    pub ib: &'a ImageNode,
    pub ic: &'a ImageNode,
    pub ca: &'a MapNode,
    pub cb: &'a MapNode,
}

/// `λ_d L_d + λ_recon L_recon`. The reconstruction branch is skipped when
/// its weight is zero.
pub fn total_loss_on(tape: &mut Tape, x: &TripletInputs, cfg: &LossConfig) -> Result<TripletVars> {
    let [ab, ca, cb] = discovery_terms_on(tape, x.pa, x.pb, x.pc, x.ca, x.cb)?;
    let s = tape.add(ab, ca)?;
    let ld = tape.add(s, cb)?;
    let mut total = tape.scale(ld, cfg.lambda_d);
    let l_recon = if cfg.lambda_recon > 0.0 {
        let r = recon_loss_on(tape, x.ia, x.ib, x.ic, x.pa, x.pb, x.pc, cfg)?;
        let w = tape.scale(r, cfg.lambda_recon);
        total = tape.add(total, w)?;
        Some(r)
    } else {
        None
    };
    Ok(TripletVars {
        l_d_ab: ab,
        l_d_ca: ca,
        l_d_cb: cb,
        l_recon,
        total,
    })
}

fn points_const(tape: &mut Tape, p: &Points) -> Var {
    tape.constant(Tensor::new(vec![p.len(), p.dim()], p.as_flat().to_vec()).expect("points shape"))
}

fn check_len(a: &Points, b: &Points, what: &str) -> Result<()> {
    ensure!(
        a.len() == b.len() && a.dim() == b.dim(),
        Shape,
        "{what}: {} landmarks in {}-D vs {} in {}-D",
        a.len(),
        a.dim(),
        b.len(),
        b.dim()
    );
    Ok(())
}

/// Value of `discovery_pair_on`.
pub fn discovery_pair(pa: &Points, pb: &Points, ca: &TransformField, cb: &TransformField) -> Result<f64> {
    check_len(pa, pb, "discovery_pair")?;
    let mut t = Tape::new();
    let (a, b) = (points_const(&mut t, pa), points_const(&mut t, pb));
    let (ca, cb) = (MapNode::constant(&mut t, ca), MapNode::constant(&mut t, cb));
    let v = discovery_pair_on(&mut t, a, b, &ca, &cb)?;
    t.item(v)
}

/// Value of `discovery_anchor_on`.
pub fn discovery_anchor(pc: &Points, px: &Points, cx: &TransformField) -> Result<f64> {
    check_len(pc, px, "discovery_anchor")?;
    let mut t = Tape::new();
    let (c, x) = (points_const(&mut t, pc), points_const(&mut t, px));
    let m = MapNode::constant(&mut t, cx);
    let v = discovery_anchor_on(&mut t, c, x, &m)?;
    t.item(v)
}

/// `L_d = L_d,ab + L_d,ca + L_d,cb`.
pub fn discovery_total(
    pa: &Points,
    pb: &Points,
    pc: &Points,
    ca: &TransformField,
    cb: &TransformField,
) -> Result<f64> {
    Ok(discovery_pair(pa, pb, ca, cb)? + discovery_anchor(pc, pa, ca)? + discovery_anchor(pc, pb, cb)?)
}

/// `(1/N) Σ ‖p_a − Φab(p_b)‖²`.
pub fn discovery_one_directional(pa: &Points, pb: &Points, ab: &TransformField) -> Result<f64> {
    discovery_anchor(pa, pb, ab)
}

/// `exp(−‖x − p‖² / (2σ²))`.
pub fn nw_kernel(x: &[f64], p: &[f64], sigma: f64) -> f64 {
    let d2: f64 = x.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Regressed displacement field on `grid`.
pub fn nw_reconstruct(p_src: &Points, p_tgt: &Points, grid: &Grid, cfg: &LossConfig) -> Result<DenseField> {
    check_len(p_src, p_tgt, "nw_reconstruct")?;
    ensure!(!p_src.is_empty(), InvalidInput, "nw_reconstruct: empty landmark sets");
    ensure!(
        p_src.dim() == grid.dim(),
        GridMismatch,
        "{}-D landmarks on a {}-D grid",
        p_src.dim(),
        grid.dim()
    );
    let mut t = Tape::new();
    let (s, g) = (points_const(&mut t, p_src), points_const(&mut t, p_tgt));
    let d = nw_reconstruct_on(&mut t, s, g, &Arc::new(grid.clone()), cfg)?;
    DenseField::new(grid.clone(), t.value(d).data().to_vec())
}

/// Value of `recon_loss_on`.
pub fn recon_loss(
    images: [&Image; 3],
    landmarks: [&Points; 3],
    cfg: &LossConfig,
) -> Result<f64> {
    let [pa, pb, pc] = landmarks;
    check_len(pa, pc, "recon_loss")?;
    check_len(pb, pc, "recon_loss")?;
    let mut t = Tape::new();
    let [ia, ib, ic] = images.map(|i| ImageNode::constant(&mut t, i));
    let (a, b, c) = (points_const(&mut t, pa), points_const(&mut t, pb), points_const(&mut t, pc));
    let v = recon_loss_on(&mut t, &ia, &ib, &ic, a, b, c, cfg)?;
    t.item(v)
}

/// Full breakdown for one triplet.
pub fn total_loss(
    images: [&Image; 3],
    landmarks: [&Points; 3],
    ca: &TransformField,
    cb: &TransformField,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let [pa, pb, pc] = landmarks;
    check_len(pa, pb, "total_loss")?;
    check_len(pa, pc, "total_loss")?;
    let mut t = Tape::new();
    let [ia, ib, ic] = images.map(|i| ImageNode::constant(&mut t, i));
    let (a, b, c) = (points_const(&mut t, pa), points_const(&mut t, pb), points_const(&mut t, pc));
    let (ca, cb) = (MapNode::constant(&mut t, ca), MapNode::constant(&mut t, cb));
    let x = TripletInputs {
        pa: a,
        pb: b,
        pc: c,
        ia: &ia,
        ib: &ib,
        ic: &ic,
        ca: &ca,
        cb: &cb,
    };
    total_loss_on(&mut t, &x, cfg)?.breakdown(&t, cfg)
}
