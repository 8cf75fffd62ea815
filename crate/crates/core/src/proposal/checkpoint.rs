//! Checkpoints: one LTF1 file per parameter tensor plus a TOML manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ProposalModel};
use crate::diffengine::Tensor;
use crate::error::{ensure, Error, Result};
use crate::fieldcore::ltf::LtfTensor;

const MANIFEST: &str = "checkpoint.toml";
const FORMAT: &str = "trilandmark-checkpoint-1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    param_hash: String,
    model: ModelConfig,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

/// Write `model` into directory `dir` (created if missing).
pub fn save_checkpoint(model: &ProposalModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::new();
    for (name, p) in model.param_names().iter().zip(model.params()) {
        let file = format!("{name}.ltf");
        LtfTensor::plain(p.shape(), p.data().to_vec()).write(dir.join(&file))?;
        params.push(ParamEntry {
            name: name.clone(),
            shape: p.shape().to_vec(),
            file,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        param_hash: model.param_hash(),
        model: model.config().clone(),
        params,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    let path = dir.join(MANIFEST);
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Rebuild a model from a checkpoint directory, verifying shapes and the
/// parameter hash.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<ProposalModel> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    ensure!(
        manifest.format == FORMAT,
        Config,
        "{}: unsupported checkpoint format {:?}",
        path.display(),
        manifest.format
    );
    let mut model = ProposalModel::init(&manifest.model, 0)?;
    ensure!(
        manifest.params.len() == model.params().len()
            && manifest
                .params
                .iter()
                .zip(model.param_names())
                .all(|(e, n)| &e.name == n),
        Shape,
        "{}: parameter list does not match the model architecture",
        path.display()
    );
    let mut params = Vec::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        let t = LtfTensor::read(dir.join(&entry.file))?;
        ensure!(
            t.shape() == entry.shape,
            Shape,
            "{}: shape {:?}, manifest says {:?}",
            entry.file,
            t.shape(),
            entry.shape
        );
        params.push(Tensor::new(entry.shape.clone(), t.data)?);
    }
    model.set_params(params)?;
    ensure!(
        model.param_hash() == manifest.param_hash,
        InvalidInput,
        "{}: parameter hash mismatch",
        path.display()
    );
    Ok(model)
}
