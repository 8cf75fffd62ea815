//! Grid-based point proposal network.
//!
//! A strided convolutional extractor maps an image to one feature vector
//! per feature-grid cell, and a shared per-cell head turns each feature
//! vector into a displacement from its cell's grid point. Landmark `i` of
//! every image therefore belongs to grid cell `i`, which is what makes the
//! landmark sets ordered.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, save_checkpoint};

use crate::diffengine::{ConvGeom, Tape, Tensor, Var};
use crate::error::{ensure, Error, Result};
use crate::fieldcore::{Grid, Image, Points};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Architecture of the proposal network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_dims: Vec<usize>,
    pub image_spacing: Vec<f64>,
    pub image_origin: Vec<f64>,
    pub feature_dims: Vec<usize>,
    /// Output channels of each stride-2 block; the last entry is the
    /// feature width `c`.
    pub widths: Vec<usize>,
    /// Extra stride-1 convolutions at feature resolution.
    pub extra_layers: usize,
    pub kernel: usize,
    /// Nonlinearity after every convolution but the last.
    pub activation: Activation,
    /// Append normalized coordinate channels to the input image.
    pub coord_channels: bool,
    /// Hidden width of the head (0 = single affine layer).
    pub head_hidden: usize,
    /// Multiplier on the head output in units of the feature-grid spacing.
    pub head_scale: f64,
    /// Saturate displacements at this many feature-grid spacings.
    pub displacement_bound: Option<f64>,
    /// Images are divided by this before entering the network.
    pub input_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_dims: vec![96, 96],
            image_spacing: vec![1.0, 1.0],
            image_origin: vec![0.0, 0.0],
            feature_dims: vec![12, 12],
            widths: vec![8, 16, 32],
            extra_layers: 1,
            kernel: 3,
            activation: Activation::Relu,
            coord_channels: true,
            head_hidden: 0,
            head_scale: 1.0,
            displacement_bound: None,
            input_scale: 7.0,
        }
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    weight: usize,
    bias: usize,
    geom: ConvGeom,
}

/// Forward-pass handles.
pub struct ProposalOutput {
    /// `[c, D', H', W']` extractor output.
    pub features: Var,
    /// `[N, dim]` head displacements `ψ_p(f_i)` in mm.
    pub displacements: Var,
    /// `[N, dim]` landmark coordinates `ψ_p(f_i) + G_i`.
    pub landmarks: Var,
}

/// Parameters and geometry of the proposal network.
#[derive(Clone, Debug)]
pub struct ProposalModel {
    config: ModelConfig,
    image_grid: Grid,
    feature_grid: Grid,
    names: Vec<String>,
    params: Vec<Tensor>,
    extractor: Vec<ConvLayer>,
    head: Vec<ConvLayer>,
    grid_points: Tensor,
    coord_input: Option<Tensor>,
}

/// Ordered landmarks of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: Points,
    pub source_id: String,
}

impl LandmarkSet {
    pub fn new(points: Points, source_id: impl Into<String>) -> Self {
        Self {
            points,
            source_id: source_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Grid of cell centers for a feature lattice obtained by integer
/// downsampling of `image`.
pub fn feature_grid(image: &Grid, feature_dims: &[usize]) -> Result<Grid> {
    ensure!(
        feature_dims.len() == image.dim(),
        Config,
        "feature grid is {}-D but the image is {}-D",
        feature_dims.len(),
        image.dim()
    );
    let mut spacing = Vec::new();
    let mut origin = Vec::new();
    for k in 0..image.dim() {
        let (n, d) = (image.dims()[k], feature_dims[k]);
        ensure!(
            d >= 2 && n % d == 0 && (n / d).is_power_of_two(),
            Config,
            "feature axis {k} of {d} is not a power-of-two downsampling of {n}"
        );
        let r = (n / d) as f64;
        spacing.push(image.spacing()[k] * r);
        origin.push(image.origin()[k] + image.spacing()[k] * (r - 1.0) / 2.0);
    }
    Grid::new(feature_dims.to_vec(), spacing, origin)
}

/// Image values as a `[1, D, H, W]` tensor (D = 1 in 2-D).
pub fn image_tensor(image: &Image, scale: f64) -> Tensor {
    let g = image.grid();
    let shape = spatial_shape(g, 1);
    Tensor::new(shape, image.values().iter().map(|v| v / scale).collect()).expect("image shape")
}

fn spatial_shape(g: &Grid, channels: usize) -> Vec<usize> {
    let d = g.dims();
    if g.dim() == 2 {
        vec![channels, 1, d[0], d[1]]
    } else {
        vec![channels, d[0], d[1], d[2]]
    }
}

fn he_init(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

impl ProposalModel {
    /// Build a freshly initialized network. The final head layer is zero,
    /// so initial landmarks sit exactly on the grid points.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let image_grid = Grid::new(
            config.image_dims.clone(),
            config.image_spacing.clone(),
            config.image_origin.clone(),
        )?;
        let fgrid = feature_grid(&image_grid, &config.feature_dims)?;
        let dim = image_grid.dim();
        ensure!(config.kernel % 2 == 1, Config, "kernel size {} must be odd", config.kernel);
        ensure!(config.head_scale > 0.0, Config, "head_scale must be positive");
        ensure!(config.input_scale > 0.0, Config, "input_scale must be positive");
        if let Some(b) = config.displacement_bound {
            ensure!(b > 0.0, Config, "displacement_bound must be positive");
        }
        let log_ratio: Vec<u32> = (0..dim)
            .map(|k| (image_grid.dims()[k] / fgrid.dims()[k]).trailing_zeros())
            .collect();
        let blocks = *log_ratio.iter().max().unwrap() as usize;
        ensure!(
            config.widths.len() == blocks,
            Config,
            "{} stride-2 blocks are needed but {} widths were given",
            blocks,
            config.widths.len()
        );
        ensure!(
            blocks > 0 || config.extra_layers > 0,
            Config,
            "the extractor needs at least one layer"
        );

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        let k = config.kernel;
        let (kd, pd) = if dim == 2 { (1, 0) } else { (k, k / 2) };
        let mut cin = 1 + if config.coord_channels { dim } else { 0 };
        let mut extractor = Vec::new();
        let add_conv = |names: &mut Vec<String>,
                            params: &mut Vec<Tensor>,
                            rng: &mut ChaCha8Rng,
                            prefix: String,
                            cin: usize,
                            cout: usize,
                            taps: [usize; 3],
                            geom: ConvGeom,
                            zero: bool| {
            let n = cout * cin * taps.iter().product::<usize>();
            let w = if zero {
                vec![0.0; n]
            } else {
                he_init(rng, n, cin * taps.iter().product::<usize>())
            };
            names.push(format!("{prefix}.weight"));
            params.push(Tensor::new(vec![cout, cin, taps[0], taps[1], taps[2]], w).unwrap());
            names.push(format!("{prefix}.bias"));
            params.push(Tensor::zeros(&[cout]));
            ConvLayer {
                weight: params.len() - 2,
                bias: params.len() - 1,
                geom,
            }
        };
        for (b, &width) in config.widths.iter().enumerate() {
            let stride_of = |axis: usize| if (b as u32) < log_ratio[axis] { 2 } else { 1 };
            let stride = if dim == 2 {
                [1, stride_of(0), stride_of(1)]
            } else {
                [stride_of(0), stride_of(1), stride_of(2)]
            };
            let geom = ConvGeom::new(stride, [pd, k / 2, k / 2]);
            extractor.push(add_conv(
                &mut names,
                &mut params,
                &mut rng,
                format!("extractor.{}", extractor.len()),
                cin,
                width,
                [kd, k, k],
                geom,
                false,
            ));
            cin = width;
        }
        for _ in 0..config.extra_layers {
            let width = *config.widths.last().unwrap_or(&8);
            let geom = ConvGeom::new([1, 1, 1], [pd, k / 2, k / 2]);
            extractor.push(add_conv(
                &mut names,
                &mut params,
                &mut rng,
                format!("extractor.{}", extractor.len()),
                cin,
                width,
                [kd, k, k],
                geom,
                false,
            ));
            cin = width;
        }
        let unit = ConvGeom::new([1, 1, 1], [0, 0, 0]);
        let mut head = Vec::new();
        if config.head_hidden > 0 {
            head.push(add_conv(
                &mut names,
                &mut params,
                &mut rng,
                "head.0".into(),
                cin,
                config.head_hidden,
                [1, 1, 1],
                unit,
                false,
            ));
            cin = config.head_hidden;
        }
        head.push(add_conv(
            &mut names,
            &mut params,
            &mut rng,
            format!("head.{}", head.len()),
            cin,
            dim,
            [1, 1, 1],
            unit,
            true,
        ));

        let grid_points = Tensor::new(vec![fgrid.len(), dim], fgrid.points().into_flat())?;
        let coord_input = config.coord_channels.then(|| coordinate_channels(&image_grid));
        Ok(Self {
            config: config.clone(),
            image_grid,
            feature_grid: fgrid,
            names,
            params,
            extractor,
            head,
            grid_points,
            coord_input,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn image_grid(&self) -> &Grid {
        &self.image_grid
    }

    pub fn feature_grid(&self) -> &Grid {
        &self.feature_grid
    }

    /// `N = d·h·w`.
    pub fn num_landmarks(&self) -> usize {
        self.feature_grid.len()
    }

    /// Feature width `c`.
    pub fn channels(&self) -> usize {
        *self.config.widths.last().unwrap_or(&8)
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Replace parameters, checking shapes.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        ensure!(
            params.len() == self.params.len(),
            Shape,
            "{} parameter tensors for a model with {}",
            params.len(),
            self.params.len()
        );
        for (i, (new, old)) in params.iter().zip(&self.params).enumerate() {
            ensure!(
                new.shape() == old.shape(),
                Shape,
                "parameter {} has shape {:?}, expected {:?}",
                self.names[i],
                new.shape(),
                old.shape()
            );
        }
        self.params = params;
        Ok(())
    }

    /// Grid points `G_i` as a point list.
    pub fn grid_points(&self) -> Points {
        self.feature_grid.points()
    }

    /// SHA-256 over all parameter payloads, hex encoded.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.names.iter().zip(&self.params) {
            h.update(name.as_bytes());
            for v in p.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Register all parameters on `tape` as differentiable leaves.
    pub fn param_leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Register all parameters as constants.
    pub fn param_constants(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }

    /// Network input tensor for an image.
    pub fn input_tensor(&self, image: &Image) -> Result<Tensor> {
        image
            .grid()
            .require_same(&self.image_grid, "proposal input image")?;
        Ok(image_tensor(image, self.config.input_scale))
    }

    /// Record the forward pass; `image` is a `[1, D, H, W]` node.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], image: Var) -> Result<ProposalOutput> {
        ensure!(
            params.len() == self.params.len(),
            Shape,
            "{} parameter nodes for {} parameters",
            params.len(),
            self.params.len()
        );
        let expected = spatial_shape(&self.image_grid, 1);
        ensure!(
            tape.value(image).shape() == expected.as_slice(),
            Shape,
            "image node {:?}, expected {:?}",
            tape.value(image).shape(),
            expected
        );
        let mut x = match &self.coord_input {
            Some(c) => {
                let c = tape.constant(c.clone());
                tape.concat(&[image, c])?
            }
            None => image,
        };
        let activate = |tape: &mut Tape, x| match self.config.activation {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        };
        for layer in &self.extractor {
            x = tape.conv(x, params[layer.weight], Some(params[layer.bias]), layer.geom)?;
            x = activate(tape, x);
        }
        let features = x;
        let last = self.head.len() - 1;
        for (i, layer) in self.head.iter().enumerate() {
            x = tape.conv(x, params[layer.weight], Some(params[layer.bias]), layer.geom)?;
            if i < last {
                x = activate(tape, x);
            }
        }
        let dim = self.image_grid.dim();
        let n = self.num_landmarks();
        let raw = tape.reshape(x, &[dim, n])?;
        let raw = tape.transpose(raw)?;
        let delta = self.mean_feature_spacing();
        let mut disp = tape.scale(raw, self.config.head_scale * delta);
        if let Some(bound) = self.config.displacement_bound {
            let b = bound * delta;
            let t = tape.scale(disp, 1.0 / b);
            let t = tape.tanh(t);
            disp = tape.scale(t, b);
        }
        let g = tape.constant(self.grid_points.clone());
        let landmarks = tape.add(disp, g)?;
        Ok(ProposalOutput {
            features,
            displacements: disp,
            landmarks,
        })
    }

    fn mean_feature_spacing(&self) -> f64 {
        let s = self.feature_grid.spacing();
        s.iter().sum::<f64>() / s.len() as f64
    }

    /// Feature matrix `f = ψ_f(I)` of shape `(d·h·w) × c`.
    pub fn extract_features(&self, image: &Image) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.param_constants(&mut tape);
        let img = tape.constant(self.input_tensor(image)?);
        let out = self.forward(&mut tape, &params, img)?;
        let c = tape.value(out.features).shape()[0];
        let f = tape.reshape(out.features, &[c, self.num_landmarks()])?;
        let f = tape.transpose(f)?;
        Ok(tape.value(f).clone())
    }

    /// Landmarks `p_i = ψ_p(f_i) + G_i` for one image.
    pub fn propose(&self, image: &Image, source_id: impl Into<String>) -> Result<LandmarkSet> {
        let mut tape = Tape::new();
        let params = self.param_constants(&mut tape);
        let img = tape.constant(self.input_tensor(image)?);
        let out = self.forward(&mut tape, &params, img)?;
        let p = tape.value(out.landmarks);
        if !p.is_finite() {
            return Err(Error::NonFinite("proposed landmarks".into()));
        }
        Ok(LandmarkSet::new(
            Points::from_flat(self.image_grid.dim(), p.data().to_vec())?,
            source_id,
        ))
    }
}

/// Coordinate channels scaled to `[-1, 1]` along each image axis.
fn coordinate_channels(g: &Grid) -> Tensor {
    let dim = g.dim();
    let n = g.len();
    let mut data = vec![0.0; dim * n];
    for i in 0..n {
        let idx = g.unravel(i);
        for k in 0..dim {
            data[k * n + i] = 2.0 * idx[k] as f64 / (g.dims()[k] - 1) as f64 - 1.0;
        }
    }
    Tensor::new(spatial_shape(g, dim), data).expect("coordinate shape")
}
