//! Self-tests behind `hyperfcl check`: gradient and closed-form oracles
//! that a correct build must pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::amr::{
    candidate_change, hyper_loss, hyper_loss_on, js_distributions, recalibrated_loss, recalibrated_loss_on, Priors,
    Recalibration, ServerConfig,
};
use crate::error::Result;
use crate::hyper::{snapshot, HyperConfig, HyperParams, HyperVars, IdentityRegistry, TaskIdentity};
use crate::target::{Activation, LayerSpec, ParameterSet, TargetArchitecture};
use crate::tensor::{grad_check, AdamConfig, AdamState, Array};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn toy_arch() -> Result<TargetArchitecture> {
    TargetArchitecture::new(vec![
        LayerSpec { n_in: 1, n_out: 2, activation: Activation::Relu },
        LayerSpec { n_in: 2, n_out: 1, activation: Activation::Sigmoid },
    ])
}

struct Toy {
    arch: TargetArchitecture,
    identities: IdentityRegistry,
    hyper: HyperParams,
    priors: Priors,
}

/// Two-layer toy hypernetwork (N_z = 4, d = 4) displaced from its snapshot
/// so the regularizer is active.
fn toy() -> Result<Toy> {
    let arch = toy_arch()?;
    let mut identities = IdentityRegistry::new(4);
    for t in 1..=3 {
        identities.register(t, 11)?;
    }
    let h0 = HyperParams::init(&arch, HyperConfig { n_z: 4, hidden: 4, init_scale: 0.3 }, 12);
    let snap = snapshot(&h0);
    let prior_ids: Vec<&TaskIdentity> = identities.iter().skip(1).collect();
    let priors = Priors::new(&snap, &prior_ids, &arch)?;
    let mut hyper = h0;
    for a in hyper.arrays_mut() {
        for v in a.data_mut() {
            *v -= 0.004;
        }
    }
    Ok(Toy { arch, identities, hyper, priors })
}

fn random_target(arch: &TargetArchitecture, seed: u64) -> ParameterSet {
    ParameterSet::init_random(arch, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn gradients(toy: &Toy) -> Result<Vec<CheckResult>> {
    let Toy { arch, identities, hyper, priors } = toy;
    let id = identities.get(1)?;
    let basic = random_target(arch, 41);
    let upload = random_target(arch, 42);
    let cfg = ServerConfig { beta: 0.5, beta1: 0.5, beta2: 0.25, ..Default::default() };
    let d1 = candidate_change(hyper, id, &basic, arch, &cfg)?;
    let d2 = candidate_change(hyper, id, &upload, arch, &cfg)?;
    let params: Vec<Array> = hyper.arrays().into_iter().cloned().collect();

    let plain = grad_check(
        |tape, vars| {
            let hv = HyperVars { flat: vars.to_vec() };
            hyper_loss_on(tape, arch, &hv, &id.z, &upload, &d2, priors, cfg.beta)
        },
        &params,
        1e-5,
    )?;
    let r = Recalibration {
        basic: &basic,
        upload: &upload,
        delta_basic: &d1,
        delta_upload: &d2,
        w_s: 0.37,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
    };
    let recal = grad_check(
        |tape, vars| {
            let hv = HyperVars { flat: vars.to_vec() };
            recalibrated_loss_on(tape, arch, &hv, &id.z, priors, &r)
        },
        &params,
        1e-5,
    )?;
    Ok([("hyper_loss gradient", plain), ("recalibrated_loss gradient", recal)]
        .into_iter()
        .map(|(name, rep)| CheckResult {
            name,
            passed: rep.max_rel_error <= 1e-4,
            detail: format!("max relative error {:.3e} over {} coordinates", rep.max_rel_error, rep.coordinates),
        })
        .collect())
}

fn collapse(toy: &Toy) -> Result<CheckResult> {
    let Toy { arch, identities, hyper, priors } = toy;
    let id = identities.get(1)?;
    let cfg = ServerConfig { beta: 0.3, beta1: 0.3, beta2: 0.3, ..Default::default() };
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let m = random_target(arch, 100 + seed);
        let (recal, _) = recalibrated_loss(hyper, id, Some(&m), &m, priors, arch, &cfg)?;
        let plain = hyper_loss(hyper, id, &m, priors, arch, &cfg)?;
        worst = worst.max((recal - plain).abs());
    }
    Ok(CheckResult {
        name: "recalibration collapse",
        passed: worst <= 1e-12,
        detail: format!("max |recalibrated - hyper| {worst:.3e} over 20 instances"),
    })
}

/// Direct base-2 summation over the support.
fn js_oracle(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter().zip(m).filter(|(x, _)| **x > 0.0).map(|(x, y)| x * (x / y).log2()).sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl(p, &m) + 0.5 * kl(q, &m)
}

fn js() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let mut self_zero = true;
    for _ in 0..50 {
        let n = rng.random_range(2..12);
        let mut draw = || {
            let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect::<Vec<f64>>()
        };
        let (p, q) = (draw(), draw());
        worst = worst.max((js_distributions(&p, &q) - js_oracle(&p, &q)).abs());
        self_zero &= js_distributions(&p, &p) == 0.0;
    }
    CheckResult {
        name: "js oracle",
        passed: worst <= 1e-10 && self_zero,
        detail: format!("max deviation {worst:.3e}, JS(P,P) = 0: {self_zero}"),
    }
}

fn adam_first_step() -> Result<CheckResult> {
    let cfg = AdamConfig::default();
    let mut worst: f64 = 0.0;
    for g in [3.0, -0.25, 1e-3, -40.0] {
        let mut w = Array::scalar(0.5);
        let mut state = AdamState::new(cfg, [&w]);
        state.step(&mut [&mut w], &[Array::scalar(g)])?;
        let expected = 0.5 - cfg.lr * g / (g.abs() + cfg.eps);
        worst = worst.max((w.item() - expected).abs());
    }
    Ok(CheckResult {
        name: "adam first step",
        passed: worst <= 1e-15,
        detail: format!("max deviation {worst:.3e}"),
    })
}

fn tiny_seg() -> CheckResult {
    let n = TargetArchitecture::tiny_seg().param_count();
    CheckResult {
        name: "tiny_seg parameter count",
        passed: n == 1759,
        detail: format!("{n} parameters"),
    }
}

/// Run every self-test.
pub fn run_checks() -> Result<Vec<CheckResult>> {
    let toy = toy()?;
    let mut out = gradients(&toy)?;
    out.push(collapse(&toy)?);
    out.push(js());
    out.push(adam_first_step()?);
    out.push(tiny_seg());
    Ok(out)
}
