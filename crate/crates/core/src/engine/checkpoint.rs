//! Model checkpoints: `checkpoint.toml` with the model configuration and a
//! parameter index, plus one f64 MDFF tensor per parameter under `params/`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::mdff::{read_tensor, write_tensor, Tensor};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, MomentDiffModel};
use crate::nn::ParamStore;

pub const INDEX_FILE: &str = "checkpoint.toml";
const FORMAT: &str = "momentdiff-checkpoint";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    format: String,
    version: u32,
    model: ModelConfig,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    file: String,
    shape: [usize; 2],
}

pub fn save_checkpoint(model: &MomentDiffModel, dir: &Path) -> Result<()> {
    let params_dir = dir.join("params");
    fs::create_dir_all(&params_dir).map_err(|e| Error::io(&params_dir, e))?;
    let mut entries = Vec::with_capacity(model.params.len());
    for (name, value) in model.params.iter() {
        let file = format!("params/{name}.mdff");
        write_tensor(&dir.join(&file), &Tensor::from_array2_f64(value))?;
        entries.push(ParamEntry {
            name: name.clone(),
            file,
            shape: [value.nrows(), value.ncols()],
        });
    }
    let index = Index {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        model: model.config.clone(),
        params: entries,
    };
    let path = dir.join(INDEX_FILE);
    let text = toml::to_string(&index).map_err(|e| Error::parse(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<MomentDiffModel> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: Index = toml::from_str(&text).map_err(|e| Error::parse(&path, e))?;
    if index.format != FORMAT || index.version != FORMAT_VERSION {
        return Err(Error::parse(
            &path,
            format!("unsupported checkpoint format {} v{}", index.format, index.version),
        ));
    }
    let mut params = ParamStore::new();
    for entry in index.params {
        let value = read_tensor(&dir.join(&entry.file))?.into_array2_f64()?;
        if value.dim() != (entry.shape[0], entry.shape[1]) {
            return Err(Error::Shape(format!(
                "parameter {} has shape {:?}, index says {:?}",
                entry.name,
                value.dim(),
                entry.shape
            )));
        }
        params.insert(entry.name, value);
    }
    MomentDiffModel::from_parts(index.model, params)
}
