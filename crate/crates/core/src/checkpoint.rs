//! Checkpoints: a directory with one `MRT1` file per parameter and a
//! `manifest.json` recording the format version, the encoder config and the
//! name-to-file map.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, Model};
use crate::error::{Error, Result};
use crate::params::ParamTree;
use crate::tensor::{AnyTensor, Element};

pub const FORMAT: &str = "memroute-ckpt-1";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub config: EncoderConfig,
    pub params: BTreeMap<String, String>,
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST);
    let text = fs::read_to_string(&path)?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::format(
            "checkpoint",
            format!("unsupported format {:?}", manifest.format),
        ));
    }
    manifest.config.validate()?;
    Ok(manifest)
}

impl<T: Element> Model<T> {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut params = BTreeMap::new();
        let mut result = Ok(());
        self.params.visit_named("", &mut |name, t| {
            if result.is_err() {
                return;
            }
            let file = format!("{name}.mrt");
            result = t.save_mrt(dir.join(&file));
            params.insert(name.to_string(), file);
        });
        result?;
        let manifest = Manifest {
            format: FORMAT.to_string(),
            config: self.config.clone(),
            params,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST), text)?;
        Ok(())
    }

    /// Loads a checkpoint; every parameter of the configured architecture must
    /// be present with its exact shape and dtype, and nothing else.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = read_manifest(dir)?;
        let mut model = Model::<T>::init(manifest.config.clone(), 0)?;
        let mut expected = 0;
        let mut result = Ok(());
        model.params.visit_named_mut("", &mut |name, slot| {
            expected += 1;
            if result.is_err() {
                return;
            }
            result = (|| {
                let file = manifest.params.get(name).ok_or_else(|| {
                    Error::format("checkpoint", format!("missing parameter {name}"))
                })?;
                let t = AnyTensor::load_mrt(dir.join(file))?.into_typed::<T>()?;
                if t.shape() != slot.shape() {
                    return Err(Error::format(
                        "checkpoint",
                        format!(
                            "{name} has shape {:?}, expected {:?}",
                            t.shape(),
                            slot.shape()
                        ),
                    ));
                }
                *slot = t;
                Ok(())
            })();
        });
        result?;
        if manifest.params.len() != expected {
            return Err(Error::format(
                "checkpoint",
                format!(
                    "manifest lists {} parameters, architecture has {expected}",
                    manifest.params.len()
                ),
            ));
        }
        Ok(model)
    }
}
