//! Task-conditioned hypernetwork that emits the complete weights of a
//! [`TargetArchitecture`].
//!
//! Each target layer `j` owns a [`GenerationHead`]. The head projects the
//! layer embedding `e_j` into one hidden vector `a_i = W_i·e_j + B_i` per
//! input channel `i`, maps each of them through the shared output projection
//! `W_o·a_i + B_o` into a `3 × (N_out·3)` slice of the kernel, and
//! concatenates the slices. The layer bias comes from `W_b·mean_i(a_i) + B_b`.
//!
//! Layers are chained: a linear [`ConsistencyEncoder`] compresses the
//! kernel just produced into a vector of the task-embedding size, which is
//! appended to the embedding of the next layer, so `e_1 = z` and
//! `e_{j+1} = concat(e_j, C_j·vec(K^j) + c_j)`.

mod checkpoint;
mod identity;

pub use checkpoint::Checkpoint;
pub use identity::{IdentityRegistry, IdentitySchedule, TaskIdentity};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::target::{LayerParams, LayerSpec, LayerVars, ParameterSet, TargetArchitecture, KERNEL};
use crate::tensor::{Array, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperConfig {
    /// Task embedding length.
    pub n_z: usize,
    /// Hidden width of the per-slice projections.
    pub hidden: usize,
    /// Parameters start i.i.d. uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self {
            n_z: 16,
            hidden: 32,
            init_scale: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationHead {
    /// One `hidden × E_j` matrix per input channel.
    pub w_in: Vec<Array>,
    /// One `hidden` vector per input channel.
    pub b_in: Vec<Array>,
    /// `(3·N_out·3) × hidden`
    pub w_out: Array,
    pub b_out: Array,
    /// `N_out × hidden`
    pub w_bias: Array,
    pub b_bias: Array,
}

impl GenerationHead {
    pub fn zeros(spec: &LayerSpec, embed: usize, hidden: usize) -> Self {
        let slice = KERNEL * spec.n_out * KERNEL;
        Self {
            w_in: (0..spec.n_in).map(|_| Array::zeros(&[hidden, embed])).collect(),
            b_in: (0..spec.n_in).map(|_| Array::zeros(&[hidden])).collect(),
            w_out: Array::zeros(&[slice, hidden]),
            b_out: Array::zeros(&[slice]),
            w_bias: Array::zeros(&[spec.n_out, hidden]),
            b_bias: Array::zeros(&[spec.n_out]),
        }
    }

    pub fn embed_len(&self) -> usize {
        self.w_in[0].shape()[1]
    }

    fn arrays(&self) -> Vec<&Array> {
        let mut v: Vec<&Array> = Vec::new();
        for (w, b) in self.w_in.iter().zip(&self.b_in) {
            v.push(w);
            v.push(b);
        }
        v.extend([&self.w_out, &self.b_out, &self.w_bias, &self.b_bias]);
        v
    }

    fn arrays_mut(&mut self) -> Vec<&mut Array> {
        let mut v: Vec<&mut Array> = Vec::new();
        for (w, b) in self.w_in.iter_mut().zip(self.b_in.iter_mut()) {
            v.push(w);
            v.push(b);
        }
        v.extend([
            &mut self.w_out,
            &mut self.b_out,
            &mut self.w_bias,
            &mut self.b_bias,
        ]);
        v
    }

    fn names(&self, layer: usize) -> Vec<String> {
        let mut v = Vec::new();
        for i in 1..=self.w_in.len() {
            v.push(format!("layer{layer}.slice{i}.Wi"));
            v.push(format!("layer{layer}.slice{i}.Bi"));
        }
        for n in ["Wo", "Bo", "Wb", "Bb"] {
            v.push(format!("layer{layer}.{n}"));
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyEncoder {
    /// `N_z × (N_out·N_in·3·3)`
    pub weight: Array,
    pub bias: Array,
}

/// Every trainable parameter of the hypernetwork.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperParams {
    pub config: HyperConfig,
    pub heads: Vec<GenerationHead>,
    /// One per layer except the last.
    pub encoders: Vec<ConsistencyEncoder>,
}

impl HyperParams {
    pub fn zeros(arch: &TargetArchitecture, config: HyperConfig) -> Self {
        let n_layers = arch.layers.len();
        let heads = arch
            .layers
            .iter()
            .enumerate()
            .map(|(j, spec)| GenerationHead::zeros(spec, (j + 1) * config.n_z, config.hidden))
            .collect();
        let encoders = arch.layers[..n_layers - 1]
            .iter()
            .map(|spec| ConsistencyEncoder {
                weight: Array::zeros(&[config.n_z, spec.kernel_len()]),
                bias: Array::zeros(&[config.n_z]),
            })
            .collect();
        Self {
            config,
            heads,
            encoders,
        }
    }

    /// Uniform `[-init_scale, init_scale]` initialisation, seeded.
    pub fn init(arch: &TargetArchitecture, config: HyperConfig, seed: u64) -> Self {
        let mut h = Self::zeros(arch, config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = config.init_scale;
        for a in h.arrays_mut() {
            for v in a.data_mut() {
                *v = if s > 0.0 { rng.random_range(-s..=s) } else { 0.0 };
            }
        }
        h
    }

    /// Heads (slice by slice, then `W_o, B_o, W_b, B_b`) layer by layer,
    /// followed by the encoders.
    pub fn arrays(&self) -> Vec<&Array> {
        let mut v: Vec<&Array> = self.heads.iter().flat_map(|h| h.arrays()).collect();
        for e in &self.encoders {
            v.push(&e.weight);
            v.push(&e.bias);
        }
        v
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Array> {
        let mut v: Vec<&mut Array> = self
            .heads
            .iter_mut()
            .flat_map(|h| h.arrays_mut())
            .collect();
        for e in self.encoders.iter_mut() {
            v.push(&mut e.weight);
            v.push(&mut e.bias);
        }
        v
    }

    /// Checkpoint names, parallel to [`HyperParams::arrays`].
    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .heads
            .iter()
            .enumerate()
            .flat_map(|(j, h)| h.names(j + 1))
            .collect();
        for j in 1..=self.encoders.len() {
            v.push(format!("layer{j}.encoder.W"));
            v.push(format!("layer{j}.encoder.B"));
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }

    /// Verify that heads and encoders fit `arch`.
    pub fn check(&self, arch: &TargetArchitecture) -> Result<()> {
        let reference = Self::zeros(arch, self.config);
        let ours = self.arrays();
        let theirs = reference.arrays();
        if ours.len() != theirs.len()
            || ours.iter().zip(&theirs).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::dim(
                "hypernetwork heads do not match the target architecture",
            ));
        }
        Ok(())
    }

    /// Record every parameter as a differentiable leaf.
    pub fn record(&self, tape: &mut Tape) -> HyperVars {
        HyperVars {
            flat: self.arrays().into_iter().map(|a| tape.param(a.clone())).collect(),
        }
    }

    /// Record every parameter as a constant.
    pub fn record_const(&self, tape: &mut Tape) -> HyperVars {
        HyperVars {
            flat: self
                .arrays()
                .into_iter()
                .map(|a| tape.constant(a.clone()))
                .collect(),
        }
    }

    /// `self + delta`, parameter by parameter.
    pub fn shifted(&self, delta: &[Array]) -> Result<HyperParams> {
        let mut out = self.clone();
        let arrays = out.arrays_mut();
        if arrays.len() != delta.len() {
            return Err(Error::dim("delta does not mirror the hypernetwork"));
        }
        for (a, d) in arrays.into_iter().zip(delta) {
            a.check_same_shape(d, "shifted")?;
            a.add_assign(d);
        }
        Ok(out)
    }
}

/// Tape handles for a [`HyperParams`], in [`HyperParams::arrays`] order.
#[derive(Clone, Debug)]
pub struct HyperVars {
    pub flat: Vec<Var>,
}

impl HyperVars {
    /// `live + delta` with `delta` recorded as a constant, so gradients reach
    /// the live leaves unchanged.
    pub fn shifted(&self, tape: &mut Tape, delta: &[Array]) -> Result<HyperVars> {
        if delta.len() != self.flat.len() {
            return Err(Error::dim("delta does not mirror the hypernetwork"));
        }
        let mut flat = Vec::with_capacity(self.flat.len());
        for (&v, d) in self.flat.iter().zip(delta) {
            let c = tape.constant(d.clone());
            flat.push(tape.add(v, c)?);
        }
        Ok(HyperVars { flat })
    }
}

/// Positions of one head's parameters inside [`HyperVars::flat`].
struct HeadSlots {
    w_in: Vec<usize>,
    b_in: Vec<usize>,
    w_out: usize,
    b_out: usize,
    w_bias: usize,
    b_bias: usize,
}

fn layout(arch: &TargetArchitecture) -> (Vec<HeadSlots>, Vec<(usize, usize)>) {
    let mut next = 0;
    let mut heads = Vec::new();
    for spec in &arch.layers {
        let mut w_in = Vec::new();
        let mut b_in = Vec::new();
        for _ in 0..spec.n_in {
            w_in.push(next);
            b_in.push(next + 1);
            next += 2;
        }
        heads.push(HeadSlots {
            w_in,
            b_in,
            w_out: next,
            b_out: next + 1,
            w_bias: next + 2,
            b_bias: next + 3,
        });
        next += 4;
    }
    let encoders = (0..arch.layers.len() - 1)
        .map(|j| (next + 2 * j, next + 2 * j + 1))
        .collect();
    (heads, encoders)
}

/// Source index in the slice concatenation for each conv-layout kernel
/// entry `(o, i, ky, kx)`. Slice `i` is a `3 × (N_out·3)` matrix whose
/// row is `ky` and whose column is `o·3 + kx`.
fn kernel_gather(spec: &LayerSpec) -> Vec<usize> {
    let slice = KERNEL * spec.n_out * KERNEL;
    let mut idx = Vec::with_capacity(spec.kernel_len());
    for o in 0..spec.n_out {
        for i in 0..spec.n_in {
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    idx.push(i * slice + ky * spec.n_out * KERNEL + o * KERNEL + kx);
                }
            }
        }
    }
    idx
}

fn affine(tape: &mut Tape, w: Var, x: Var, b: Var) -> Result<Var> {
    let n_in = tape.value(w).shape()[1];
    let n_out = tape.value(w).shape()[0];
    if tape.value(x).len() != n_in {
        return Err(Error::dim(format!(
            "input of length {} for a {n_out}×{n_in} projection",
            tape.value(x).len()
        )));
    }
    let col = tape.reshape(x, vec![n_in, 1])?;
    let y = tape.matmul(w, col)?;
    let y = tape.reshape(y, vec![n_out])?;
    tape.add(y, b)
}

/// One layer's kernel (conv layout) and bias from its head and embedding.
fn generate_layer_vars(
    tape: &mut Tape,
    spec: &LayerSpec,
    vars: &[Var],
    slots: &HeadSlots,
    embedding: Var,
) -> Result<(Var, Var)> {
    let mut slices = Vec::with_capacity(spec.n_in);
    let mut hidden = Vec::with_capacity(spec.n_in);
    for i in 0..spec.n_in {
        let a = affine(tape, vars[slots.w_in[i]], embedding, vars[slots.b_in[i]])?;
        slices.push(affine(tape, vars[slots.w_out], a, vars[slots.b_out])?);
        hidden.push(a);
    }
    let cat = tape.concat(&slices)?;
    let kernel = tape.gather(cat, kernel_gather(spec), spec.kernel_shape().to_vec())?;
    let mut pooled = hidden[0];
    for &a in &hidden[1..] {
        pooled = tape.add(pooled, a)?;
    }
    let pooled = tape.scale(pooled, 1.0 / spec.n_in as f64);
    let bias = affine(tape, vars[slots.w_bias], pooled, vars[slots.b_bias])?;
    Ok((kernel, bias))
}

/// Generate the full target weights on `tape`. The returned layer vars are
/// differentiable with respect to `vars` whenever those are params.
pub fn generate_model_vars(
    tape: &mut Tape,
    arch: &TargetArchitecture,
    vars: &HyperVars,
    z: Var,
) -> Result<Vec<LayerVars>> {
    let (heads, encoders) = layout(arch);
    let n_z = tape.value(z).len();
    let mut embedding = z;
    let mut out = Vec::with_capacity(arch.layers.len());
    for (j, spec) in arch.layers.iter().enumerate() {
        let expected = (j + 1) * n_z;
        if tape.value(embedding).len() != expected {
            return Err(Error::dim(format!(
                "layer {} embedding has length {}, expected {expected}",
                j + 1,
                tape.value(embedding).len()
            )));
        }
        let (kernel, bias) = generate_layer_vars(tape, spec, &vars.flat, &heads[j], embedding)?;
        out.push(LayerVars { kernel, bias });
        if j + 1 < arch.layers.len() {
            let (w, b) = encoders[j];
            let flat = tape.reshape(kernel, vec![spec.kernel_len()])?;
            let code = affine(tape, vars.flat[w], flat, vars.flat[b])?;
            embedding = tape.concat(&[embedding, code])?;
        }
    }
    Ok(out)
}

/// Flatten generated layer vars into one vector node, ordered like
/// [`ParameterSet::flatten`].
pub fn flatten_vars(tape: &mut Tape, layers: &[LayerVars]) -> Result<Var> {
    let parts: Vec<Var> = layers.iter().flat_map(|l| [l.kernel, l.bias]).collect();
    tape.concat(&parts)
}

fn read_params(tape: &Tape, layers: &[LayerVars]) -> ParameterSet {
    ParameterSet {
        layers: layers
            .iter()
            .map(|l| LayerParams {
                kernel: tape.value(l.kernel).clone(),
                bias: tape.value(l.bias).clone(),
            })
            .collect(),
    }
}

/// Weights of the target network for `identity`.
pub fn generate_model(
    hyper: &HyperParams,
    identity: &TaskIdentity,
    arch: &TargetArchitecture,
) -> Result<ParameterSet> {
    generate_from_embedding(hyper, &identity.z, arch)
}

/// Same as [`generate_model`] for a raw embedding vector.
pub fn generate_from_embedding(
    hyper: &HyperParams,
    z: &Array,
    arch: &TargetArchitecture,
) -> Result<ParameterSet> {
    hyper.check(arch)?;
    if z.len() != hyper.config.n_z {
        return Err(Error::dim(format!(
            "embedding of length {}, hypernetwork expects {}",
            z.len(),
            hyper.config.n_z
        )));
    }
    let mut tape = Tape::new();
    let vars = hyper.record_const(&mut tape);
    let zv = tape.constant(z.clone());
    let layers = generate_model_vars(&mut tape, arch, &vars, zv)?;
    Ok(read_params(&tape, &layers))
}

/// Kernel `K^j` and bias of a single layer from its head and an embedding of
/// length `E_j`.
pub fn generate_layer(
    head: &GenerationHead,
    spec: &LayerSpec,
    embedding: &Array,
) -> Result<(Array, Array)> {
    if embedding.len() != head.embed_len() {
        return Err(Error::dim(format!(
            "embedding of length {}, head expects {}",
            embedding.len(),
            head.embed_len()
        )));
    }
    if head.w_in.len() != spec.n_in || head.b_out.len() != KERNEL * spec.n_out * KERNEL {
        return Err(Error::dim("head does not match the layer spec"));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = head
        .arrays()
        .into_iter()
        .map(|a| tape.constant(a.clone()))
        .collect();
    let one = TargetArchitecture {
        layers: vec![*spec],
    };
    let (slots, _) = layout(&one);
    let e = tape.constant(embedding.clone());
    let (k, b) = generate_layer_vars(&mut tape, spec, &vars, &slots[0], e)?;
    Ok((tape.value(k).clone(), tape.value(b).clone()))
}

/// `C_j·vec(K^j) + c_j`.
pub fn encode_layer(encoder: &ConsistencyEncoder, kernel: &Array) -> Result<Array> {
    if kernel.len() != encoder.weight.shape()[1] {
        return Err(Error::dim(format!(
            "kernel with {} entries for an encoder taking {}",
            kernel.len(),
            encoder.weight.shape()[1]
        )));
    }
    let mut tape = Tape::new();
    let w = tape.constant(encoder.weight.clone());
    let b = tape.constant(encoder.bias.clone());
    let k = tape.constant(kernel.clone());
    let z = affine(&mut tape, w, k, b)?;
    Ok(tape.value(z).clone())
}

/// Frozen copy of the hypernetwork taken at a task boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot(HyperParams);

impl Snapshot {
    pub fn params(&self) -> &HyperParams {
        &self.0
    }

    pub fn snapshot(&self) -> Snapshot {
        self.clone()
    }
}

pub fn snapshot(hyper: &HyperParams) -> Snapshot {
    Snapshot(hyper.clone())
}
