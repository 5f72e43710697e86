//! JSON checkpoint of hypernetwork parameters and task identities.
//!
//! Values are written with serde_json's shortest round-trip float format and
//! parsed back with exact rounding, so a save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::identity::{IdentityRecord, IdentityRegistry, IdentitySchedule};
use super::{HyperConfig, HyperParams};
use crate::error::{Error, Result};
use crate::target::TargetArchitecture;
use crate::tensor::Array;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    architecture: TargetArchitecture,
    config: HyperConfig,
    #[serde(default)]
    schedule: IdentitySchedule,
    params: BTreeMap<String, Tensor>,
    identities: Vec<IdentityRecord>,
}

impl Checkpoint {
    pub fn capture(
        arch: &TargetArchitecture,
        hyper: &HyperParams,
        identities: &IdentityRegistry,
    ) -> Self {
        let params = hyper
            .names()
            .into_iter()
            .zip(hyper.arrays())
            .map(|(n, a)| {
                (
                    n,
                    Tensor {
                        shape: a.shape().to_vec(),
                        values: a.data().to_vec(),
                    },
                )
            })
            .collect();
        Self {
            architecture: arch.clone(),
            config: hyper.config,
            schedule: identities.schedule(),
            params,
            identities: identities.records(),
        }
    }

    pub fn restore(&self) -> Result<(TargetArchitecture, HyperParams, IdentityRegistry)> {
        let arch = TargetArchitecture::new(self.architecture.layers.clone())?;
        let mut hyper = HyperParams::zeros(&arch, self.config);
        let names = hyper.names();
        if names.len() != self.params.len() {
            return Err(Error::dim(format!(
                "checkpoint has {} tensors, architecture needs {}",
                self.params.len(),
                names.len()
            )));
        }
        for (name, slot) in names.iter().zip(hyper.arrays_mut()) {
            let t = self
                .params
                .get(name)
                .ok_or_else(|| Error::dim(format!("checkpoint lacks `{name}`")))?;
            let a = Array::new(t.shape.clone(), t.values.clone())?;
            a.check_same_shape(slot, name)?;
            *slot = a;
        }
        let registry =
            IdentityRegistry::from_records(self.config.n_z, self.schedule, self.identities.clone())?;
        Ok((arch, hyper, registry))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
