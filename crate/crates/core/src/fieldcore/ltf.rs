//! The `LTF1` binary tensor container.
//!
//! Layout (little-endian):
//!
//! | bytes            | content                                   |
//! |------------------|-------------------------------------------|
//! | 4                | magic `LTF1`                              |
//! | 1                | dtype: 0 = f32, 1 = f64                   |
//! | 1                | ndim                                      |
//! | 1                | components per point                      |
//! | 1                | reserved (0)                              |
//! | 8 × ndim         | dims (u64)                                |
//! | 8 × ndim         | spacing (f64)                             |
//! | 8 × ndim         | origin (f64)                              |
//! | rest             | row-major payload, components interleaved |

use std::path::Path;

use super::{DenseField, Grid, Image, TransformField};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LTF1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// A decoded LTF1 file. Payload values are always held as `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct LtfTensor {
    pub dtype: Dtype,
    pub components: u8,
    pub dims: Vec<u64>,
    pub spacing: Vec<f64>,
    pub origin: Vec<f64>,
    pub data: Vec<f64>,
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

impl LtfTensor {
    /// A plain tensor without grid geometry (unit spacing, zero origin).
    pub fn plain(shape: &[usize], data: Vec<f64>) -> Self {
        Self {
            dtype: Dtype::F64,
            components: 1,
            dims: shape.iter().map(|&d| d as u64).collect(),
            spacing: vec![1.0; shape.len()],
            origin: vec![0.0; shape.len()],
            data,
        }
    }

    pub fn from_image(image: &Image) -> Self {
        let g = image.grid();
        Self {
            dtype: Dtype::F64,
            components: 1,
            dims: g.dims().iter().map(|&d| d as u64).collect(),
            spacing: g.spacing().to_vec(),
            origin: g.origin().to_vec(),
            data: image.values().to_vec(),
        }
    }

    pub fn from_field(field: &DenseField) -> Self {
        let g = field.grid();
        Self {
            dtype: Dtype::F64,
            components: g.dim() as u8,
            dims: g.dims().iter().map(|&d| d as u64).collect(),
            spacing: g.spacing().to_vec(),
            origin: g.origin().to_vec(),
            data: field.vectors().to_vec(),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }

    fn grid(&self) -> Result<Grid> {
        Grid::new(self.shape(), self.spacing.clone(), self.origin.clone())
    }

    pub fn to_image(&self) -> Result<Image> {
        if self.components != 1 {
            return Err(format_err(6, format!(
                "expected 1 component per point for an image, found {}",
                self.components
            )));
        }
        Image::new(self.grid()?, self.data.clone())
    }

    pub fn to_field(&self) -> Result<DenseField> {
        if self.components as usize != self.dims.len() {
            return Err(format_err(6, format!(
                "expected {} components per point for a {}-D field, found {}",
                self.dims.len(),
                self.dims.len(),
                self.components
            )));
        }
        DenseField::new(self.grid()?, self.data.clone())
    }

    pub fn encode(&self) -> Vec<u8> {
        let ndim = self.dims.len();
        let mut out = Vec::with_capacity(8 + 24 * ndim + self.data.len() * self.dtype.size());
        out.extend_from_slice(MAGIC);
        out.push(self.dtype as u8);
        out.push(ndim as u8);
        out.push(self.components);
        out.push(0);
        for &d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &s in &self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for &o in &self.origin {
            out.extend_from_slice(&o.to_le_bytes());
        }
        match self.dtype {
            Dtype::F64 => {
                for &v in &self.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Dtype::F32 => {
                for &v in &self.data {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(format_err(bytes.len(), format!(
                "header needs 8 bytes, file has {}",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(format_err(0, "missing LTF1 magic"));
        }
        let dtype = match bytes[4] {
            0 => Dtype::F32,
            1 => Dtype::F64,
            other => return Err(format_err(4, format!("unknown dtype code {other}"))),
        };
        let ndim = bytes[5] as usize;
        if ndim == 0 {
            return Err(format_err(5, "ndim must be at least 1"));
        }
        let components = bytes[6];
        if components == 0 {
            return Err(format_err(6, "components per point must be at least 1"));
        }
        let header = 8 + 24 * ndim;
        if bytes.len() < header {
            return Err(format_err(bytes.len(), format!(
                "header for {ndim} dims needs {header} bytes, file has {}",
                bytes.len()
            )));
        }
        let word = |i: usize| -> [u8; 8] { bytes[i..i + 8].try_into().unwrap() };
        let dims: Vec<u64> = (0..ndim).map(|k| u64::from_le_bytes(word(8 + 8 * k))).collect();
        let spacing: Vec<f64> = (0..ndim)
            .map(|k| f64::from_le_bytes(word(8 + 8 * ndim + 8 * k)))
            .collect();
        let origin: Vec<f64> = (0..ndim)
            .map(|k| f64::from_le_bytes(word(8 + 16 * ndim + 8 * k)))
            .collect();
        let count = dims
            .iter()
            .try_fold(components as u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| format_err(8, "dims overflow"))?;
        let expected = count
            .checked_mul(dtype.size() as u64)
            .ok_or_else(|| format_err(8, "payload size overflows"))?;
        let actual = (bytes.len() - header) as u64;
        if actual != expected {
            return Err(format_err(header, format!(
                "expected payload of {expected} bytes, found {actual}"
            )));
        }
        let payload = &bytes[header..];
        let data = match dtype {
            Dtype::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Dtype::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        Ok(Self {
            dtype,
            components,
            dims,
            spacing,
            origin,
            data,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Format { offset, message } => Error::Format {
                offset,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })
    }
}

pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    LtfTensor::from_image(image).write(path)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    LtfTensor::read(path)?.to_image()
}

pub fn save_field(field: &DenseField, path: impl AsRef<Path>) -> Result<()> {
    LtfTensor::from_field(field).write(path)
}

pub fn load_field(path: impl AsRef<Path>) -> Result<DenseField> {
    LtfTensor::read(path)?.to_field()
}

/// Read an externally computed transformation (stored as displacement).
pub fn load_external_field(path: impl AsRef<Path>) -> Result<TransformField> {
    Ok(TransformField::from_displacement(load_field(path)?))
}

pub fn save_transform(t: &TransformField, path: impl AsRef<Path>) -> Result<()> {
    save_field(t.displacement(), path)
}
