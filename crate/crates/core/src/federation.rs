//! The simulated federation: per-client task streams, local training,
//! server rounds, allocation and evaluation, plus the baselines and
//! ablations that share the same schedule and log schema.
//!
//! All clients advance task slots together. A slot lasts
//! `rounds_per_task` communication rounds; in each round every active
//! client starts from the model allocated to it, trains `local_epochs`
//! epochs on the channel of its current task and uploads the result.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::amr::{server_round, BasicModelRegistry, RoundContext, RoundReport, ServerConfig, Upload};
use crate::error::{Error, Result};
use crate::harness::data::{ClientShard, Dataset};
use crate::hyper::{generate_model, snapshot, HyperConfig, HyperParams, IdentityRegistry, IdentitySchedule};
use crate::parallel::Exec;
use crate::target::{all_channel_dice, channel_dice, train_local, ParameterSet, Sample, TargetArchitecture};
use crate::tensor::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Feddah,
    Fedavg,
    Local,
    AblateDahyper,
    AblateLr,
    AblateWs,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Feddah,
        Mode::Fedavg,
        Mode::Local,
        Mode::AblateDahyper,
        Mode::AblateLr,
        Mode::AblateWs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Feddah => "feddah",
            Mode::Fedavg => "fedavg",
            Mode::Local => "local",
            Mode::AblateDahyper => "ablate_dahyper",
            Mode::AblateLr => "ablate_lr",
            Mode::AblateWs => "ablate_ws",
        }
    }

    /// Server settings this mode runs with.
    pub fn server_config(self, base: &ServerConfig) -> ServerConfig {
        match self {
            Mode::AblateLr => ServerConfig {
                beta: 0.0,
                beta1: 0.0,
                beta2: 0.0,
                ..base.clone()
            },
            Mode::AblateWs => ServerConfig {
                similarity_override: Some(1.0),
                ..base.clone()
            },
            _ => base.clone(),
        }
    }

    fn uses_hypernetwork(self) -> bool {
        matches!(self, Mode::Feddah | Mode::AblateLr | Mode::AblateWs)
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("mode", format!("unknown mode `{s}`")))
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub local_epochs: usize,
    pub rounds_per_task: usize,
    pub seed: u64,
    pub shared_initial: Vec<u32>,
    pub shared_pool: Vec<u32>,
    pub unique_pools: Vec<Vec<u32>>,
    pub mode: Mode,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            num_clients: 4,
            local_epochs: 5,
            rounds_per_task: 20,
            seed: 0,
            shared_initial: vec![1, 2],
            shared_pool: vec![3, 4, 5, 6, 7],
            unique_pools: vec![vec![8, 9], vec![10, 11], vec![12, 13], vec![14, 15]],
            mode: Mode::Feddah,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self, num_tasks: usize) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("num_clients", "must be >= 1"));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("local_epochs", "must be >= 1"));
        }
        if self.rounds_per_task == 0 {
            return Err(Error::config("rounds_per_task", "must be >= 1"));
        }
        if self.unique_pools.len() != self.num_clients {
            return Err(Error::config(
                "unique_pools",
                format!("expected one pool per client ({}), got {}", self.num_clients, self.unique_pools.len()),
            ));
        }
        let mut owner: BTreeMap<u32, &str> = BTreeMap::new();
        let pools = std::iter::once(("shared_initial", &self.shared_initial))
            .chain(std::iter::once(("shared_pool", &self.shared_pool)))
            .chain(self.unique_pools.iter().map(|p| ("unique_pools", p)));
        for (key, pool) in pools {
            for &t in pool {
                if t == 0 || t as usize > num_tasks {
                    return Err(Error::config(key, format!("task {t} outside 1..={num_tasks}")));
                }
                if let Some(prev) = owner.insert(t, key) {
                    return Err(Error::config(key, format!("task {t} already listed in {prev}")));
                }
            }
        }
        if self.shared_initial.is_empty() && self.shared_pool.is_empty() && self.unique_pools.iter().all(Vec::is_empty) {
            return Err(Error::config("shared_initial", "no tasks to learn"));
        }
        Ok(())
    }
}

/// Deterministic seed for a labelled sub-stream of `seed`.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    // splitmix64 finalizer folded over the parts
    let mut x = seed;
    for &p in parts {
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(p);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x = z ^ (z >> 31);
    }
    x
}

/// Each stream is the shared prefix followed by a seeded shuffle of the
/// shared pool and the client's unique pool.
pub fn build_streams(config: &FederationConfig) -> Result<Vec<Vec<u32>>> {
    if config.unique_pools.len() != config.num_clients {
        return Err(Error::config("unique_pools", "expected one pool per client"));
    }
    let mut streams = Vec::with_capacity(config.num_clients);
    for (c, unique) in config.unique_pools.iter().enumerate() {
        let mut rest: Vec<u32> = config.shared_pool.iter().chain(unique).copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[1, c as u64]));
        rest.shuffle(&mut rng);
        let mut stream = config.shared_initial.clone();
        stream.extend(rest);
        streams.push(stream);
    }
    Ok(streams)
}

#[derive(Clone, Debug)]
pub struct ClientState {
    pub client_id: usize,
    pub stream: Vec<u32>,
    pub model: ParameterSet,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl ClientState {
    pub fn task_at(&self, slot: usize) -> Option<u32> {
        self.stream.get(slot).copied()
    }
}

/// One communication round of local training from the allocated `init`.
pub fn client_round(
    client: &mut ClientState,
    arch: &TargetArchitecture,
    init: &ParameterSet,
    slot: usize,
    round_index: usize,
    epochs: usize,
    adam: AdamConfig,
    seed: u64,
) -> Result<(Upload, f64)> {
    let task = client
        .task_at(slot)
        .ok_or_else(|| Error::contract(format!("client {} has no task in slot {slot}", client.client_id)))?;
    let train_seed = derive_seed(seed, &[2, client.client_id as u64, round_index as u64]);
    let (model, report) = train_local(arch, init, &client.train, task as usize - 1, epochs, adam, train_seed)?;
    client.model = model.clone();
    let loss = *report.epoch_losses.last().expect("at least one epoch");
    Ok((
        Upload {
            client_id: client.client_id,
            task_id: task,
            round_index,
            slot,
            weights: model,
        },
        loss,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClientLog {
    pub client_id: usize,
    /// `None` once the client's stream is exhausted.
    pub task: Option<u32>,
    /// Mean soft Dice loss of the last local epoch.
    pub local_loss: Option<f64>,
    /// Test Dice of every channel, channel `c` belonging to task `c + 1`.
    pub dice: Vec<f64>,
    pub mean_dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundLog {
    pub global_round: usize,
    pub slot: usize,
    pub clients: Vec<ClientLog>,
    /// Present for hypernetwork modes.
    pub server: Option<RoundReport>,
}

/// Everything a run needs besides its config.
#[derive(Clone, Debug)]
pub struct RunSetup {
    pub arch: TargetArchitecture,
    pub hyper: HyperConfig,
    pub identity: IdentitySchedule,
    pub server: ServerConfig,
    pub adam: AdamConfig,
    pub exec: Exec,
}

impl Default for RunSetup {
    fn default() -> Self {
        RunSetup {
            arch: TargetArchitecture::tiny_seg(),
            hyper: HyperConfig::default(),
            identity: IdentitySchedule::SPREAD,
            server: ServerConfig::default(),
            adam: AdamConfig::default(),
            exec: Exec::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub logs: Vec<RoundLog>,
    pub streams: Vec<Vec<u32>>,
    /// Untrained starting model shared by the baselines; its Dice is the
    /// chance reference.
    pub init_model: ParameterSet,
    /// Final hypernetwork and identities for hypernetwork modes.
    pub hyper: Option<(HyperParams, IdentityRegistry)>,
    pub basic_models: BasicModelRegistry,
}

/// What decides the models clients receive and are evaluated with.
enum Server {
    Hyper {
        params: HyperParams,
        identities: IdentityRegistry,
        registry: BasicModelRegistry,
        config: ServerConfig,
    },
    /// Uniform average of all uploads of the round.
    Average { global: ParameterSet },
    /// Clients keep their own models.
    Local,
    /// Per-task running mean of every upload received for the task.
    Stored {
        models: BTreeMap<u32, (ParameterSet, usize)>,
        init: ParameterSet,
    },
}

impl Server {
    fn allocate(&self, arch: &TargetArchitecture, client: &ClientState, task: u32) -> Result<ParameterSet> {
        match self {
            Server::Hyper { params, identities, .. } => generate_model(params, identities.get(task)?, arch),
            Server::Average { global } => Ok(global.clone()),
            Server::Local => Ok(client.model.clone()),
            Server::Stored { models, init } => {
                if let Some((m, _)) = models.get(&task) {
                    Ok(m.clone())
                } else if models.is_empty() {
                    Ok(init.clone())
                } else {
                    let all: Vec<&ParameterSet> = models.values().map(|(m, _)| m).collect();
                    ParameterSet::mean(&all)
                }
            }
        }
    }

    /// Per-channel evaluation models: the task's own model where the server
    /// has one, otherwise `fallback`.
    fn evaluation_models(
        &self,
        arch: &TargetArchitecture,
        fallback: &ParameterSet,
    ) -> Result<Option<Vec<ParameterSet>>> {
        let per_task = |lookup: &dyn Fn(u32) -> Result<Option<ParameterSet>>| -> Result<Vec<ParameterSet>> {
            (1..=arch.out_channels() as u32)
                .map(|t| Ok(lookup(t)?.unwrap_or_else(|| fallback.clone())))
                .collect()
        };
        match self {
            Server::Hyper { params, identities, .. } => Ok(Some(per_task(&|t| {
                if identities.contains(t) {
                    Ok(Some(generate_model(params, identities.get(t)?, arch)?))
                } else {
                    Ok(None)
                }
            })?)),
            Server::Stored { models, .. } => Ok(Some(per_task(&|t| Ok(models.get(&t).map(|(m, _)| m.clone())))?)),
            Server::Average { .. } | Server::Local => Ok(None),
        }
    }
}

fn evaluate(
    arch: &TargetArchitecture,
    per_channel: Option<&[ParameterSet]>,
    model: &ParameterSet,
    test: &[Sample],
) -> Result<Vec<f64>> {
    match per_channel {
        None => all_channel_dice(arch, model, test),
        Some(models) => models
            .iter()
            .enumerate()
            .map(|(c, m)| channel_dice(arch, m, test, c))
            .collect(),
    }
}

/// Run the full schedule for `config.mode`.
pub fn run(config: &FederationConfig, dataset: &Dataset, setup: &RunSetup) -> Result<RunOutput> {
    let arch = &setup.arch;
    config.validate(arch.out_channels())?;
    setup.server.validate()?;
    if dataset.clients.len() < config.num_clients {
        return Err(Error::contract(format!(
            "dataset has {} client shards for {} clients",
            dataset.clients.len(),
            config.num_clients
        )));
    }
    let streams = build_streams(config)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[3]));
    let init_model = ParameterSet::init_random(arch, &mut init_rng);
    let mut clients: Vec<ClientState> = streams
        .iter()
        .zip(&dataset.clients)
        .enumerate()
        .map(|(c, (s, ClientShard { train, test }))| ClientState {
            client_id: c,
            stream: s.clone(),
            model: init_model.clone(),
            train: train.clone(),
            test: test.clone(),
        })
        .collect();

    let mut server = match config.mode {
        Mode::Feddah | Mode::AblateLr | Mode::AblateWs => Server::Hyper {
            params: HyperParams::init(arch, setup.hyper, derive_seed(config.seed, &[4])),
            identities: IdentityRegistry::with_schedule(setup.hyper.n_z, setup.identity),
            registry: BasicModelRegistry::new(),
            config: config.mode.server_config(&setup.server),
        },
        Mode::Fedavg => Server::Average {
            global: init_model.clone(),
        },
        Mode::Local => Server::Local,
        Mode::AblateDahyper => Server::Stored {
            models: BTreeMap::new(),
            init: init_model.clone(),
        },
    };

    let slots = streams.iter().map(Vec::len).max().unwrap_or(0);
    let mut logs = Vec::with_capacity(slots * config.rounds_per_task);
    let mut allocated: Vec<ParameterSet> = vec![init_model.clone(); clients.len()];
    for slot in 0..slots {
        let mut frozen = None;
        if let Server::Hyper { params, identities, .. } = &mut server {
            for c in &clients {
                if let Some(t) = c.task_at(slot) {
                    if !identities.contains(t) {
                        identities.register(t, config.seed)?;
                    }
                }
            }
            frozen = Some(snapshot(params));
        }
        for r in 0..config.rounds_per_task {
            let global_round = slot * config.rounds_per_task + r;
            for (c, a) in clients.iter().zip(allocated.iter_mut()) {
                if let Some(t) = c.task_at(slot) {
                    *a = server.allocate(arch, c, t)?;
                }
            }
            let mut jobs: Vec<(&mut ClientState, &ParameterSet)> =
                clients.iter_mut().zip(allocated.iter()).collect();
            let results = setup.exec.map_mut(&mut jobs, |(client, init)| {
                if client.task_at(slot).is_none() {
                    return Ok(None);
                }
                client_round(
                    client,
                    arch,
                    init,
                    slot,
                    global_round,
                    config.local_epochs,
                    setup.adam,
                    config.seed,
                )
                .map(Some)
            });
            let mut uploads = Vec::new();
            let mut local_loss = vec![None; clients.len()];
            for (c, res) in results.into_iter().enumerate() {
                if let Some((u, loss)) = res? {
                    local_loss[c] = Some(loss);
                    uploads.push(u);
                }
            }

            let report = match &mut server {
                Server::Hyper {
                    params,
                    identities,
                    registry,
                    config: server_config,
                } => {
                    let ctx = RoundContext {
                        arch,
                        identities,
                        snapshot: frozen.as_ref().expect("snapshot taken at slot start"),
                        slot,
                        round: global_round,
                        config: server_config,
                    };
                    Some(server_round(params, registry, &uploads, &ctx)?)
                }
                Server::Average { global } => {
                    let ws: Vec<&ParameterSet> = uploads.iter().map(|u| &u.weights).collect();
                    *global = ParameterSet::mean(&ws)?;
                    None
                }
                Server::Local => None,
                Server::Stored { models, .. } => {
                    for u in &uploads {
                        match models.get_mut(&u.task_id) {
                            Some((m, n)) => {
                                *n += 1;
                                let k = *n as f64;
                                for (dst, src) in m.arrays_mut().into_iter().zip(u.weights.arrays()) {
                                    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                                        *d += (s - *d) / k;
                                    }
                                }
                            }
                            None => {
                                models.insert(u.task_id, (u.weights.clone(), 1));
                            }
                        }
                    }
                    None
                }
            };

            // evaluation model of each client after the server update
            let mut eval_models = Vec::with_capacity(clients.len());
            for (c, last) in clients.iter().zip(&allocated) {
                let own = match (&server, c.task_at(slot)) {
                    (Server::Local, _) => c.model.clone(),
                    (Server::Average { global }, _) => global.clone(),
                    (_, Some(t)) => server.allocate(arch, c, t)?,
                    (_, None) => last.clone(),
                };
                eval_models.push(own);
            }
            let per_channel: Vec<Option<Vec<ParameterSet>>> = eval_models
                .iter()
                .map(|m| server.evaluation_models(arch, m))
                .collect::<Result<_>>()?;
            let jobs: Vec<usize> = (0..clients.len()).collect();
            let dice = setup.exec.map(&jobs, |&c| {
                evaluate(arch, per_channel[c].as_deref(), &eval_models[c], &clients[c].test)
            });
            let mut client_logs = Vec::with_capacity(clients.len());
            for (c, d) in dice.into_iter().enumerate() {
                let d = d?;
                let mean = d.iter().sum::<f64>() / d.len() as f64;
                client_logs.push(ClientLog {
                    client_id: c,
                    task: clients[c].task_at(slot),
                    local_loss: local_loss[c],
                    dice: d,
                    mean_dice: mean,
                });
            }
            logs.push(RoundLog {
                global_round,
                slot,
                clients: client_logs,
                server: report,
            });
        }
    }

    let (hyper, basic_models) = match server {
        Server::Hyper {
            params,
            identities,
            registry,
            ..
        } => (Some((params, identities)), registry),
        _ => (None, BasicModelRegistry::new()),
    };
    debug_assert_eq!(hyper.is_some(), config.mode.uses_hypernetwork());
    Ok(RunOutput {
        logs,
        streams,
        init_model,
        hyper,
        basic_models,
    })
}

/// Chance-level Dice per client and channel: the untrained starting model
/// evaluated on each client's test split.
pub fn chance_dice(arch: &TargetArchitecture, init: &ParameterSet, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
    dataset
        .clients
        .iter()
        .map(|c| all_channel_dice(arch, init, &c.test))
        .collect()
}
