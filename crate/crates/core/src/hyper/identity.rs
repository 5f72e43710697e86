use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Array;

/// How identity distributions are assigned: task `t` draws its embedding
/// from `N(mu_step · t, sigma²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentitySchedule {
    pub mu_step: f64,
    pub sigma: f64,
}

impl IdentitySchedule {
    /// Integer means with a narrow spread.
    pub const INTEGER: Self = IdentitySchedule {
        mu_step: 1.0,
        sigma: 0.1,
    };

    /// Means spread over `(0, 1]` for fifteen tasks with unit variance, so
    /// embeddings neither grow with the task id nor share one direction.
    pub const SPREAD: Self = IdentitySchedule {
        mu_step: 1.0 / 15.0,
        sigma: 1.0,
    };

    pub fn mu(&self, task_id: u32) -> f64 {
        self.mu_step * task_id as f64
    }
}

impl Default for IdentitySchedule {
    fn default() -> Self {
        Self::INTEGER
    }
}

/// A task's frozen embedding, drawn once from `N(mu, sigma²)` per coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskIdentity {
    pub task_id: u32,
    pub mu: f64,
    pub sigma: f64,
    pub z: Array,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub(crate) struct IdentityRecord {
    pub task_id: u32,
    pub mu: f64,
    pub sigma: f64,
    pub z: Vec<f64>,
}

impl From<&TaskIdentity> for IdentityRecord {
    fn from(t: &TaskIdentity) -> Self {
        Self {
            task_id: t.task_id,
            mu: t.mu,
            sigma: t.sigma,
            z: t.z.data().to_vec(),
        }
    }
}

/// Append-only map from task id to its identity.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityRegistry {
    n_z: usize,
    schedule: IdentitySchedule,
    entries: BTreeMap<u32, TaskIdentity>,
}

impl IdentityRegistry {
    pub fn new(n_z: usize) -> Self {
        Self::with_schedule(n_z, IdentitySchedule::default())
    }

    pub fn with_schedule(n_z: usize, schedule: IdentitySchedule) -> Self {
        Self {
            n_z,
            schedule,
            entries: BTreeMap::new(),
        }
    }

    pub fn n_z(&self) -> usize {
        self.n_z
    }

    pub fn schedule(&self) -> IdentitySchedule {
        self.schedule
    }

    /// Sample and store the identity of `task_id` under the registry's
    /// schedule.
    pub fn register(&mut self, task_id: u32, seed: u64) -> Result<&TaskIdentity> {
        let s = self.schedule;
        self.register_with(task_id, s.mu(task_id), s.sigma, seed)
    }

    pub fn register_with(
        &mut self,
        task_id: u32,
        mu: f64,
        sigma: f64,
        seed: u64,
    ) -> Result<&TaskIdentity> {
        if task_id == 0 {
            return Err(Error::contract("task ids start at 1"));
        }
        if self.entries.contains_key(&task_id) {
            return Err(Error::DuplicateTask(task_id));
        }
        if !(sigma >= 0.0) || !mu.is_finite() {
            return Err(Error::contract(format!("bad distribution N({mu}, {sigma}²)")));
        }
        let normal = Normal::new(mu, sigma).map_err(|e| Error::contract(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(task_id) << 32));
        let z = Array::vector((0..self.n_z).map(|_| normal.sample(&mut rng)).collect());
        if let Some(clash) = self.entries.values().find(|t| t.z == z) {
            return Err(Error::contract(format!(
                "identity of task {task_id} coincides with task {}",
                clash.task_id
            )));
        }
        let identity = TaskIdentity {
            task_id,
            mu,
            sigma,
            z,
        };
        Ok(self.entries.entry(task_id).or_insert(identity))
    }

    pub fn get(&self, task_id: u32) -> Result<&TaskIdentity> {
        self.entries
            .get(&task_id)
            .ok_or(Error::UnknownTask(task_id))
    }

    pub fn contains(&self, task_id: u32) -> bool {
        self.entries.contains_key(&task_id)
    }

    /// Identities in ascending task id order.
    pub fn iter(&self) -> impl Iterator<Item = &TaskIdentity> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub(crate) fn records(&self) -> Vec<IdentityRecord> {
        self.entries.values().map(IdentityRecord::from).collect()
    }

    pub(crate) fn from_records(
        n_z: usize,
        schedule: IdentitySchedule,
        records: Vec<IdentityRecord>,
    ) -> Result<Self> {
        let mut reg = Self::with_schedule(n_z, schedule);
        for r in records {
            if r.z.len() != n_z {
                return Err(Error::dim(format!(
                    "identity of task {} has {} coordinates, expected {n_z}",
                    r.task_id,
                    r.z.len()
                )));
            }
            if reg.entries.contains_key(&r.task_id) {
                return Err(Error::DuplicateTask(r.task_id));
            }
            reg.entries.insert(
                r.task_id,
                TaskIdentity {
                    task_id: r.task_id,
                    mu: r.mu,
                    sigma: r.sigma,
                    z: Array::vector(r.z),
                },
            );
        }
        Ok(reg)
    }
}
