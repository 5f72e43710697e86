use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::amr::{Lookahead, ServerConfig};
use crate::error::{Error, Result};
use crate::federation::{FederationConfig, Mode, RunSetup};
use crate::hyper::{HyperConfig, IdentitySchedule};
use crate::target::TargetArchitecture;
use crate::tensor::AdamConfig;

/// Flat, fully defaulted experiment description. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub num_clients: usize,
    pub local_epochs: usize,
    pub rounds_per_task: usize,
    pub seed: u64,
    pub shared_initial: Vec<u32>,
    pub shared_pool: Vec<u32>,
    pub unique_pools: Vec<Vec<u32>>,
    pub mode: Mode,
    /// Learning rate of both the clients' and the server's Adam.
    pub lr: f64,
    pub beta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub server_steps_per_round: usize,
    pub js_bins: usize,
    pub js_epsilon: f64,
    pub similarity_override: Option<f64>,
    pub recalibrate_within_slot: bool,
    pub lookahead: Lookahead,
    pub images_per_client: usize,
    pub n_z: usize,
    pub hidden: usize,
    pub init_scale: f64,
    pub identity_mu_step: f64,
    pub identity_sigma: f64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let fed = FederationConfig::default();
        let server = ServerConfig::default();
        let hyper = HyperConfig::default();
        let identity = IdentitySchedule::SPREAD;
        ExperimentConfig {
            num_clients: fed.num_clients,
            local_epochs: fed.local_epochs,
            rounds_per_task: fed.rounds_per_task,
            seed: fed.seed,
            shared_initial: fed.shared_initial,
            shared_pool: fed.shared_pool,
            unique_pools: fed.unique_pools,
            mode: fed.mode,
            lr: AdamConfig::default().lr,
            beta: server.beta,
            beta1: server.beta1,
            beta2: server.beta2,
            server_steps_per_round: server.server_steps_per_round,
            js_bins: server.js_bins,
            js_epsilon: server.js_epsilon,
            similarity_override: server.similarity_override,
            recalibrate_within_slot: server.recalibrate_within_slot,
            lookahead: server.lookahead,
            images_per_client: 200,
            n_z: hyper.n_z,
            hidden: hyper.hidden,
            init_scale: hyper.init_scale,
            identity_mu_step: identity.mu_step,
            identity_sigma: identity.sigma,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        // an empty document means "all defaults"
        if text.trim().is_empty() {
            return Ok(Self::default());
        }
        Ok(serde_json::from_str(text)?)
    }

    /// Read, parse and validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config = Self::parse(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn federation(&self) -> FederationConfig {
        FederationConfig {
            num_clients: self.num_clients,
            local_epochs: self.local_epochs,
            rounds_per_task: self.rounds_per_task,
            seed: self.seed,
            shared_initial: self.shared_initial.clone(),
            shared_pool: self.shared_pool.clone(),
            unique_pools: self.unique_pools.clone(),
            mode: self.mode,
        }
    }

    pub fn server(&self) -> ServerConfig {
        ServerConfig {
            beta: self.beta,
            beta1: self.beta1,
            beta2: self.beta2,
            server_steps_per_round: self.server_steps_per_round,
            js_bins: self.js_bins,
            js_epsilon: self.js_epsilon,
            lr: self.lr,
            similarity_override: self.similarity_override,
            recalibrate_within_slot: self.recalibrate_within_slot,
            lookahead: self.lookahead,
        }
    }

    pub fn setup(&self) -> RunSetup {
        RunSetup {
            arch: TargetArchitecture::tiny_seg(),
            hyper: HyperConfig {
                n_z: self.n_z,
                hidden: self.hidden,
                init_scale: self.init_scale,
            },
            identity: IdentitySchedule {
                mu_step: self.identity_mu_step,
                sigma: self.identity_sigma,
            },
            server: self.server(),
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            ..RunSetup::default()
        }
    }

    /// Every invariant, reported against the offending key.
    pub fn validate(&self) -> Result<()> {
        self.federation().validate(TargetArchitecture::tiny_seg().out_channels())?;
        self.server().validate()?;
        if self.images_per_client < 10 {
            return Err(Error::config("images_per_client", "must be >= 10"));
        }
        for (key, v) in [("n_z", self.n_z), ("hidden", self.hidden)] {
            if v == 0 {
                return Err(Error::config(key, "must be >= 1"));
            }
        }
        for (key, v) in [
            ("init_scale", self.init_scale),
            ("identity_mu_step", self.identity_mu_step),
            ("identity_sigma", self.identity_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(key, "must be a finite value >= 0"));
            }
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::config("out_dir", "must not be empty"));
        }
        Ok(())
    }
}
