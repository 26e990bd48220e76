//! Checkpoint directories: one `.ntsr` file per parameter, a manifest
//! mapping parameter names to files, and the model config as `key = value`
//! text.

use std::collections::HashMap;
use std::path::Path;

use super::config::{parse_kv_text, ToyDiTConfig};
use super::model::{param_layout, ToyDiT};
use crate::error::{bail, Result};
use crate::io::{load_tensor, save_tensor};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CONFIG_FILE: &str = "config.txt";

pub fn save_checkpoint(model: &ToyDiT, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for ((name, shape), values) in model
        .param_names()
        .iter()
        .zip(model.param_shapes())
        .zip(model.params())
    {
        let file = format!("{name}.ntsr");
        save_tensor(&Tensor::new(shape.clone(), values.clone())?, dir.join(&file))?;
        manifest.push_str(&format!("{name} = {file}\n"));
    }
    std::fs::write(dir.join(MANIFEST_FILE), manifest)?;
    std::fs::write(dir.join(CONFIG_FILE), model.config().to_kv_text())?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<ToyDiT> {
    let dir = dir.as_ref();
    let mut config = ToyDiTConfig::default();
    config.apply_kv_text(&std::fs::read_to_string(dir.join(CONFIG_FILE))?)?;
    let manifest: HashMap<String, String> =
        parse_kv_text(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?
            .into_iter()
            .collect();

    // Parameter order and shapes are fixed by the config.
    let layout = param_layout(&config);
    let mut params = Vec::with_capacity(layout.len());
    for (name, shape) in &layout {
        let Some(file) = manifest.get(name) else {
            bail!(Format, "checkpoint manifest has no entry for '{name}'");
        };
        let t = load_tensor(dir.join(file))?;
        if t.shape() != shape.as_slice() {
            bail!(
                Format,
                "parameter '{name}' has shape {:?}, expected {:?}",
                t.shape(),
                shape
            );
        }
        params.push(t.into_data());
    }
    ToyDiT::from_parts(&config, params)
}
