//! Server-side optimization of the hypernetwork.
//!
//! Every upload is folded into the hypernetwork by a few Adam steps on one of
//! two objectives:
//!
//! * `L_hyper = L_task + β·L_R`, where `L_task` is the squared L2 distance
//!   between the generated model and a target, and `L_R` keeps the
//!   generations of earlier tasks close to what a frozen snapshot produced,
//!   evaluated at the one-step lookahead `θ_h + Δθ_h`.
//! * the recalibrated loss for a task returning in a later episode, which
//!   blends the old basic model and the new upload with the similarity
//!   weight `W_s = 1 − JS(M′, M)`.
//!
//! `Δθ_h` and `W_s` are computed from the current parameters at every step
//! and then held constant, so gradients only flow through the live
//! generation.

mod js;

pub use js::{histogram, js_distributions, js_divergence};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hyper::{
    generate_model, generate_model_vars, flatten_vars, HyperParams, HyperVars, IdentityRegistry,
    Snapshot, TaskIdentity,
};
use crate::target::{ParameterSet, TargetArchitecture};
use crate::tensor::{AdamConfig, AdamState, Array, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerConfig {
    pub beta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub server_steps_per_round: usize,
    pub js_bins: usize,
    pub js_epsilon: f64,
    pub lr: f64,
    /// Replace the measured similarity weight by a constant.
    pub similarity_override: Option<f64>,
    /// Recalibrate on every round of a returning task's episode instead of
    /// only on its first round.
    pub recalibrate_within_slot: bool,
    /// Optimizer state the candidate change is stepped from.
    pub lookahead: Lookahead,
}

/// Which Adam state proposes the candidate change `Δθ_h`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lookahead {
    /// A new optimizer, so `Δθ_h` is a first Adam step (≈ `-lr·sign(g)`).
    Fresh,
    /// A copy of the server optimizer mid-way through its steps.
    #[default]
    Running,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            beta: 0.01,
            beta1: 0.01,
            beta2: 0.01,
            server_steps_per_round: 10,
            js_bins: 64,
            js_epsilon: 1e-8,
            lr: 1e-3,
            similarity_override: None,
            recalibrate_within_slot: false,
            lookahead: Lookahead::default(),
        }
    }
}

impl ServerConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("beta", self.beta), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be a finite value >= 0"));
            }
        }
        if self.server_steps_per_round == 0 {
            return Err(Error::config("server_steps_per_round", "must be >= 1"));
        }
        if self.js_bins < 2 {
            return Err(Error::config("js_bins", "must be >= 2"));
        }
        if !(self.js_epsilon > 0.0 && self.js_epsilon.is_finite()) {
            return Err(Error::config("js_epsilon", "must be > 0"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be > 0"));
        }
        if let Some(w) = self.similarity_override {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::config("similarity_override", "must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr)
    }
}

/// The weights a client sends after a round of local training.
#[derive(Clone, Debug, PartialEq)]
pub struct Upload {
    pub client_id: usize,
    pub task_id: u32,
    pub round_index: usize,
    /// Task slot the client was in when it trained these weights.
    pub slot: usize,
    pub weights: ParameterSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BasicModel {
    pub model: ParameterSet,
    /// Round in which the task was first seen.
    pub inserted_round: usize,
    /// Slot of the latest refresh.
    pub slot: usize,
}

/// The server's current standard model per task.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BasicModelRegistry {
    entries: BTreeMap<u32, BasicModel>,
}

impl BasicModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, task_id: u32) -> Option<&BasicModel> {
        self.entries.get(&task_id)
    }

    pub fn contains(&self, task_id: u32) -> bool {
        self.entries.contains_key(&task_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn task_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.keys().copied()
    }

    fn store(&mut self, task_id: u32, model: ParameterSet, round: usize, slot: usize) {
        self.entries
            .entry(task_id)
            .and_modify(|e| {
                e.model = model.clone();
                e.slot = slot;
            })
            .or_insert(BasicModel {
                model,
                inserted_round: round,
                slot,
            });
    }
}

/// Snapshot generations of the tasks the regularizer protects, in the order
/// they were given.
#[derive(Clone, Debug, Default)]
pub struct Priors {
    zs: Vec<Array>,
    anchors: Vec<Array>,
}

impl Priors {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(
        snapshot: &Snapshot,
        identities: &[&TaskIdentity],
        arch: &TargetArchitecture,
    ) -> Result<Self> {
        let mut zs = Vec::with_capacity(identities.len());
        let mut anchors = Vec::with_capacity(identities.len());
        for id in identities {
            zs.push(id.z.clone());
            anchors.push(generate_model(snapshot.params(), id, arch)?.flatten());
        }
        Ok(Priors { zs, anchors })
    }

    pub fn len(&self) -> usize {
        self.zs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zs.is_empty()
    }
}

fn generated_flat(
    tape: &mut Tape,
    arch: &TargetArchitecture,
    vars: &HyperVars,
    z: &Array,
) -> Result<Var> {
    let zv = tape.constant(z.clone());
    let layers = generate_model_vars(tape, arch, vars, zv)?;
    flatten_vars(tape, &layers)
}

/// `L_task` recorded on `tape`.
pub fn l_task_on(
    tape: &mut Tape,
    arch: &TargetArchitecture,
    vars: &HyperVars,
    z: &Array,
    target: &ParameterSet,
) -> Result<Var> {
    target.check(arch)?;
    let generated = generated_flat(tape, arch, vars, z)?;
    let t = tape.constant(target.flatten());
    tape.l2_squared(generated, t)
}

/// `L_R` recorded on `tape`; a constant zero when there are no priors.
pub fn l_r_on(
    tape: &mut Tape,
    arch: &TargetArchitecture,
    vars: &HyperVars,
    delta: &[Array],
    priors: &Priors,
) -> Result<Var> {
    if priors.is_empty() {
        return Ok(tape.constant(Array::scalar(0.0)));
    }
    let lookahead = vars.shifted(tape, delta)?;
    let mut total: Option<Var> = None;
    for (z, anchor) in priors.zs.iter().zip(&priors.anchors) {
        let generated = generated_flat(tape, arch, &lookahead, z)?;
        let a = tape.constant(anchor.clone());
        let term = tape.l2_squared(a, generated)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let total = total.expect("priors are non-empty");
    Ok(tape.scale(total, 1.0 / priors.len() as f64))
}

/// `L_task + β·L_R` recorded on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn hyper_loss_on(
    tape: &mut Tape,
    arch: &TargetArchitecture,
    vars: &HyperVars,
    z: &Array,
    target: &ParameterSet,
    delta: &[Array],
    priors: &Priors,
    beta: f64,
) -> Result<Var> {
    let task = l_task_on(tape, arch, vars, z, target)?;
    if beta == 0.0 || priors.is_empty() {
        return Ok(task);
    }
    let reg = l_r_on(tape, arch, vars, delta, priors)?;
    let reg = tape.scale(reg, beta);
    tape.add(task, reg)
}

/// Inputs of the recalibrated objective that stay fixed during one step.
#[derive(Clone, Debug)]
pub struct Recalibration<'a> {
    pub basic: &'a ParameterSet,
    pub upload: &'a ParameterSet,
    pub delta_basic: &'a [Array],
    pub delta_upload: &'a [Array],
    pub w_s: f64,
    pub beta1: f64,
    pub beta2: f64,
}

/// `W_s·[L_task(M) + β₁L_R1] + (1 − W_s)·[L_task(M_new) + β₂L_R2]`
/// recorded on `tape`.
pub fn recalibrated_loss_on(
    tape: &mut Tape,
    arch: &TargetArchitecture,
    vars: &HyperVars,
    z: &Array,
    priors: &Priors,
    r: &Recalibration<'_>,
) -> Result<Var> {
    let old = hyper_loss_on(tape, arch, vars, z, r.basic, r.delta_basic, priors, r.beta1)?;
    let new = hyper_loss_on(tape, arch, vars, z, r.upload, r.delta_upload, priors, r.beta2)?;
    let old = tape.scale(old, r.w_s);
    let new = tape.scale(new, 1.0 - r.w_s);
    tape.add(old, new)
}

/// Value and gradient (in [`HyperParams::arrays`] order) of a loss built by
/// `build` on the live parameters.
pub fn value_and_grad(
    hyper: &HyperParams,
    build: impl FnOnce(&mut Tape, &HyperVars) -> Result<Var>,
) -> Result<(f64, Vec<Array>)> {
    let mut tape = Tape::new();
    let vars = hyper.record(&mut tape);
    let loss = build(&mut tape, &vars)?;
    let value = tape.scalar(loss);
    let grads = tape.backward(loss)?;
    let arrays = hyper.arrays();
    let out = vars
        .flat
        .iter()
        .zip(arrays)
        .map(|(&v, a)| grads.get_or_zeros(v, a))
        .collect();
    Ok((value, out))
}

fn value_only(
    hyper: &HyperParams,
    build: impl FnOnce(&mut Tape, &HyperVars) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = hyper.record_const(&mut tape);
    let loss = build(&mut tape, &vars)?;
    Ok(tape.scalar(loss))
}

/// Squared L2 distance between the generation for `identity` and `target`.
pub fn l_task(
    hyper: &HyperParams,
    identity: &TaskIdentity,
    target: &ParameterSet,
    arch: &TargetArchitecture,
) -> Result<f64> {
    value_only(hyper, |tape, vars| l_task_on(tape, arch, vars, &identity.z, target))
}

/// The displacement a fresh Adam optimizer would apply to the hypernetwork
/// after one step on `L_task` alone.
pub fn candidate_change(
    hyper: &HyperParams,
    identity: &TaskIdentity,
    target: &ParameterSet,
    arch: &TargetArchitecture,
    config: &ServerConfig,
) -> Result<Vec<Array>> {
    let fresh = AdamState::new(config.adam(), hyper.arrays());
    candidate_change_from(hyper, identity, target, arch, &fresh)
}

/// The displacement `optimizer` would apply after one more step on `L_task`
/// alone. The optimizer itself is left untouched.
pub fn candidate_change_from(
    hyper: &HyperParams,
    identity: &TaskIdentity,
    target: &ParameterSet,
    arch: &TargetArchitecture,
    optimizer: &AdamState,
) -> Result<Vec<Array>> {
    let (_, grads) =
        value_and_grad(hyper, |tape, vars| l_task_on(tape, arch, vars, &identity.z, target))?;
    adam_displacement(&grads, optimizer.clone())
}

/// Adam's update does not depend on the parameter values, so stepping from
/// zero yields the displacement without cancellation error.
fn adam_displacement(grads: &[Array], mut adam: AdamState) -> Result<Vec<Array>> {
    let mut delta: Vec<Array> = grads.iter().map(|g| Array::zeros(g.shape())).collect();
    let mut refs: Vec<&mut Array> = delta.iter_mut().collect();
    adam.step(&mut refs, grads)?;
    Ok(delta)
}

/// Anti-forgetting regularizer: mean squared distance between snapshot generations and
/// lookahead generations of the prior tasks.
pub fn l_r(
    hyper: &HyperParams,
    delta: &[Array],
    priors: &Priors,
    arch: &TargetArchitecture,
) -> Result<f64> {
    value_only(hyper, |tape, vars| l_r_on(tape, arch, vars, delta, priors))
}

/// `L_task + β·L_R` with `Δθ_h` from [`candidate_change`].
pub fn hyper_loss(
    hyper: &HyperParams,
    identity: &TaskIdentity,
    target: &ParameterSet,
    priors: &Priors,
    arch: &TargetArchitecture,
    config: &ServerConfig,
) -> Result<f64> {
    let delta = candidate_change(hyper, identity, target, arch, config)?;
    value_only(hyper, |tape, vars| {
        hyper_loss_on(tape, arch, vars, &identity.z, target, &delta, priors, config.beta)
    })
}

/// `W_s = 1 − JS(M′, M)`, or the configured override.
pub fn similarity_weight(
    generated: &ParameterSet,
    basic: &ParameterSet,
    config: &ServerConfig,
) -> Result<f64> {
    let js = js_divergence(generated, basic, config.js_bins, config.js_epsilon)?;
    Ok(config.similarity_override.unwrap_or(1.0 - js))
}

/// Value of the recalibrated objective together with the `W_s` it used.
#[allow(clippy::too_many_arguments)]
pub fn recalibrated_loss(
    hyper: &HyperParams,
    identity: &TaskIdentity,
    basic: Option<&ParameterSet>,
    upload: &ParameterSet,
    priors: &Priors,
    arch: &TargetArchitecture,
    config: &ServerConfig,
) -> Result<(f64, f64)> {
    let basic = basic.ok_or_else(|| {
        Error::contract(format!(
            "task {} has no basic model to recalibrate against",
            identity.task_id
        ))
    })?;
    let generated = generate_model(hyper, identity, arch)?;
    let w_s = similarity_weight(&generated, basic, config)?;
    let d1 = candidate_change(hyper, identity, basic, arch, config)?;
    let d2 = candidate_change(hyper, identity, upload, arch, config)?;
    let r = Recalibration {
        basic,
        upload,
        delta_basic: &d1,
        delta_upload: &d2,
        w_s,
        beta1: config.beta1,
        beta2: config.beta2,
    };
    let v = value_only(hyper, |tape, vars| {
        recalibrated_loss_on(tape, arch, vars, &identity.z, priors, &r)
    })?;
    Ok((v, w_s))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    /// First upload ever for the task.
    Fresh,
    /// Task already has a basic model from the current slot.
    Refine,
    /// Task returns with a basic model from an earlier slot.
    Recalibrated,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UploadReport {
    pub client_id: usize,
    pub task_id: u32,
    pub route: Route,
    /// Objective value before each server step.
    pub objective: Vec<f64>,
    /// `L_task` against the upload before and after the server steps.
    pub initial_task_loss: f64,
    pub final_task_loss: f64,
    /// Similarity weight used by the last recalibrated step.
    pub w_s: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RoundReport {
    pub uploads: Vec<UploadReport>,
}

impl RoundReport {
    pub fn for_client(&self, client_id: usize) -> Option<&UploadReport> {
        self.uploads.iter().find(|u| u.client_id == client_id)
    }
}

/// Everything a server round reads besides the state it mutates.
#[derive(Clone, Copy, Debug)]
pub struct RoundContext<'a> {
    pub arch: &'a TargetArchitecture,
    pub identities: &'a IdentityRegistry,
    pub snapshot: &'a Snapshot,
    pub slot: usize,
    pub round: usize,
    pub config: &'a ServerConfig,
}

/// Fold one round of uploads into the hypernetwork.
///
/// Uploads are processed in ascending `(task_id, client_id)` order. The
/// regularizer protects every task holding a basic model that is not itself
/// uploaded this round, in ascending task order.
pub fn server_round(
    hyper: &mut HyperParams,
    registry: &mut BasicModelRegistry,
    uploads: &[Upload],
    ctx: &RoundContext<'_>,
) -> Result<RoundReport> {
    if uploads.is_empty() {
        return Err(Error::contract("server round without uploads"));
    }
    let mut order: Vec<&Upload> = uploads.iter().collect();
    order.sort_by_key(|u| (u.task_id, u.client_id));
    let mut seen = BTreeSet::new();
    for u in &order {
        if !seen.insert((u.task_id, u.client_id)) {
            return Err(Error::contract(format!(
                "client {} uploaded task {} twice in one round",
                u.client_id, u.task_id
            )));
        }
        ctx.identities.get(u.task_id)?;
        u.weights.check(ctx.arch)?;
    }
    let current: BTreeSet<u32> = order.iter().map(|u| u.task_id).collect();
    let prior_ids: Vec<&TaskIdentity> = registry
        .task_ids()
        .filter(|t| !current.contains(t))
        .map(|t| ctx.identities.get(t))
        .collect::<Result<_>>()?;
    let priors = Priors::new(ctx.snapshot, &prior_ids, ctx.arch)?;

    let mut report = RoundReport::default();
    for u in order {
        let identity = ctx.identities.get(u.task_id)?;
        let route = match registry.get(u.task_id) {
            None => Route::Fresh,
            Some(b) if b.slot < u.slot || ctx.config.recalibrate_within_slot => {
                Route::Recalibrated
            }
            Some(_) => Route::Refine,
        };
        let basic = registry.get(u.task_id).map(|b| b.model.clone());
        let r = optimize_upload(hyper, identity, &u.weights, basic.as_ref(), route, &priors, ctx)?;
        report.uploads.push(UploadReport {
            client_id: u.client_id,
            ..r
        });
        let refreshed = generate_model(hyper, identity, ctx.arch)?;
        registry.store(u.task_id, refreshed, ctx.round, u.slot);
    }
    Ok(report)
}

fn lookahead(
    hyper: &HyperParams,
    identity: &TaskIdentity,
    target: &ParameterSet,
    arch: &TargetArchitecture,
    config: &ServerConfig,
    running: &AdamState,
) -> Result<Vec<Array>> {
    match config.lookahead {
        Lookahead::Fresh => candidate_change(hyper, identity, target, arch, config),
        Lookahead::Running => candidate_change_from(hyper, identity, target, arch, running),
    }
}

fn optimize_upload(
    hyper: &mut HyperParams,
    identity: &TaskIdentity,
    upload: &ParameterSet,
    basic: Option<&ParameterSet>,
    route: Route,
    priors: &Priors,
    ctx: &RoundContext<'_>,
) -> Result<UploadReport> {
    let arch = ctx.arch;
    let config = ctx.config;
    let initial_task_loss = l_task(hyper, identity, upload, arch)?;
    let mut adam = AdamState::new(config.adam(), hyper.arrays());
    let mut objective = Vec::with_capacity(config.server_steps_per_round);
    let mut last_w_s = None;
    for _ in 0..config.server_steps_per_round {
        let (value, grads) = match route {
            Route::Fresh | Route::Refine => {
                let delta = if config.beta > 0.0 && !priors.is_empty() {
                    lookahead(hyper, identity, upload, arch, config, &adam)?
                } else {
                    Vec::new()
                };
                value_and_grad(hyper, |tape, vars| {
                    hyper_loss_on(tape, arch, vars, &identity.z, upload, &delta, priors, config.beta)
                })?
            }
            Route::Recalibrated => {
                let basic = basic.expect("recalibration requires a basic model");
                let generated = generate_model(hyper, identity, arch)?;
                let w_s = similarity_weight(&generated, basic, config)?;
                let need_delta = !priors.is_empty();
                let d1 = if need_delta && config.beta1 > 0.0 {
                    lookahead(hyper, identity, basic, arch, config, &adam)?
                } else {
                    Vec::new()
                };
                let d2 = if need_delta && config.beta2 > 0.0 {
                    lookahead(hyper, identity, upload, arch, config, &adam)?
                } else {
                    Vec::new()
                };
                let r = Recalibration {
                    basic,
                    upload,
                    delta_basic: &d1,
                    delta_upload: &d2,
                    w_s,
                    beta1: config.beta1,
                    beta2: config.beta2,
                };
                last_w_s = Some(w_s);
                value_and_grad(hyper, |tape, vars| {
                    recalibrated_loss_on(tape, arch, vars, &identity.z, priors, &r)
                })?
            }
        };
        objective.push(value);
        let mut params = hyper.arrays_mut();
        adam.step(&mut params, &grads)?;
    }
    let final_task_loss = l_task(hyper, identity, upload, arch)?;
    Ok(UploadReport {
        client_id: 0,
        task_id: identity.task_id,
        route,
        objective,
        initial_task_loss,
        final_task_loss,
        w_s: last_w_s,
    })
}
