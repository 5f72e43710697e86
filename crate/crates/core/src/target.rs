//! The per-task client model: a three-layer 3×3 conv net with one sigmoid
//! output channel per class, its soft Dice training loss and the Dice metric.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv2d, sigmoid, AdamConfig, AdamState, Array, Tape, Var};

/// Spatial kernel extent; every layer is 3×3, stride 1, zero padding 1.
pub const KERNEL: usize = 3;
pub const NUM_CLASSES: usize = 15;
pub const IMAGE_SIZE: usize = 32;
pub const DICE_EPS: f64 = 1e-6;
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub n_in: usize,
    pub n_out: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn kernel_len(&self) -> usize {
        self.n_in * self.n_out * KERNEL * KERNEL
    }

    pub fn param_count(&self) -> usize {
        self.kernel_len() + self.n_out
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.n_out, self.n_in, KERNEL, KERNEL]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetArchitecture {
    pub layers: Vec<LayerSpec>,
}

impl TargetArchitecture {
    /// conv 1→8 relu, conv 8→8 relu, conv 8→15 sigmoid.
    pub fn tiny_seg() -> Self {
        use Activation::*;
        Self::new(vec![
            LayerSpec { n_in: 1, n_out: 8, activation: Relu },
            LayerSpec { n_in: 8, n_out: 8, activation: Relu },
            LayerSpec { n_in: 8, n_out: NUM_CLASSES, activation: Sigmoid },
        ])
        .expect("TinySeg is well formed")
    }

    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::dim("architecture needs at least one layer"));
        }
        for (j, l) in layers.iter().enumerate() {
            if l.n_in == 0 || l.n_out == 0 {
                return Err(Error::dim(format!("layer {j} has an empty channel count")));
            }
        }
        for (j, w) in layers.windows(2).enumerate() {
            if w[0].n_out != w[1].n_in {
                return Err(Error::dim(format!(
                    "layer {j} emits {} channels but layer {} takes {}",
                    w[0].n_out,
                    j + 1,
                    w[1].n_in
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().unwrap().n_out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// `n_out × n_in × 3 × 3`
    pub kernel: Array,
    pub bias: Array,
}

/// Weights of one target network, layer by layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    pub layers: Vec<LayerParams>,
}

impl ParameterSet {
    pub fn zeros(arch: &TargetArchitecture) -> Self {
        Self {
            layers: arch
                .layers
                .iter()
                .map(|l| LayerParams {
                    kernel: Array::zeros(&l.kernel_shape()),
                    bias: Array::zeros(&[l.n_out]),
                })
                .collect(),
        }
    }

    /// He-uniform kernels, zero biases.
    pub fn init_random(arch: &TargetArchitecture, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(arch);
        for (l, spec) in p.layers.iter_mut().zip(&arch.layers) {
            let bound = (6.0 / (spec.n_in * KERNEL * KERNEL) as f64).sqrt();
            for v in l.kernel.data_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        p
    }

    pub fn check(&self, arch: &TargetArchitecture) -> Result<()> {
        if self.layers.len() != arch.layers.len() {
            return Err(Error::dim(format!(
                "{} parameter layers for a {}-layer architecture",
                self.layers.len(),
                arch.layers.len()
            )));
        }
        for (j, (p, l)) in self.layers.iter().zip(&arch.layers).enumerate() {
            if p.kernel.shape() != l.kernel_shape() || p.bias.shape() != [l.n_out] {
                return Err(Error::dim(format!(
                    "layer {j}: kernel {:?} / bias {:?} do not match {:?}",
                    p.kernel.shape(),
                    p.bias.shape(),
                    l
                )));
            }
        }
        Ok(())
    }

    /// Kernel then bias, layer by layer.
    pub fn arrays(&self) -> Vec<&Array> {
        self.layers
            .iter()
            .flat_map(|l| [&l.kernel, &l.bias])
            .collect()
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Array> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.kernel, &mut l.bias])
            .collect()
    }

    pub fn len(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Array {
        let data: Vec<f64> = self
            .arrays()
            .into_iter()
            .flat_map(|a| a.data().iter().copied())
            .collect();
        Array::vector(data)
    }

    pub fn unflatten(arch: &TargetArchitecture, flat: &Array) -> Result<Self> {
        if flat.len() != arch.param_count() {
            return Err(Error::dim(format!(
                "flat parameter vector has {} values, architecture needs {}",
                flat.len(),
                arch.param_count()
            )));
        }
        let mut p = Self::zeros(arch);
        let mut offset = 0;
        for a in p.arrays_mut() {
            let n = a.len();
            a.data_mut().copy_from_slice(&flat.data()[offset..offset + n]);
            offset += n;
        }
        Ok(p)
    }

    /// `Σ (self − other)²` over all weights.
    pub fn l2_squared(&self, other: &ParameterSet) -> Result<f64> {
        let (a, b) = (self.arrays(), other.arrays());
        if a.len() != b.len() {
            return Err(Error::dim("parameter sets have different layer counts"));
        }
        let mut s = 0.0;
        for (x, y) in a.iter().zip(&b) {
            x.check_same_shape(y, "l2_squared")?;
            s += x
                .data()
                .iter()
                .zip(y.data())
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>();
        }
        Ok(s)
    }

    /// Element-wise arithmetic mean, computed as `first + Σ(xᵢ − first)/k`
    /// in slice order so that identical inputs average to themselves exactly.
    pub fn mean(sets: &[&ParameterSet]) -> Result<ParameterSet> {
        let Some(first) = sets.first() else {
            return Err(Error::contract("mean of no parameter sets"));
        };
        let k = sets.len() as f64;
        let mut acc = ParameterSet::zeros_like(first);
        for s in &sets[1..] {
            if s.layers.len() != acc.layers.len() {
                return Err(Error::dim("parameter sets have different layer counts"));
            }
            for ((a, x), f) in acc.arrays_mut().into_iter().zip(s.arrays()).zip(first.arrays()) {
                x.check_same_shape(f, "mean")?;
                for ((av, &xv), &fv) in a.data_mut().iter_mut().zip(x.data()).zip(f.data()) {
                    *av += xv - fv;
                }
            }
        }
        for (a, f) in acc.arrays_mut().into_iter().zip(first.arrays()) {
            for (av, &fv) in a.data_mut().iter_mut().zip(f.data()) {
                *av = fv + *av / k;
            }
        }
        Ok(acc)
    }

    fn zeros_like(other: &ParameterSet) -> Self {
        Self {
            layers: other
                .layers
                .iter()
                .map(|l| LayerParams {
                    kernel: Array::zeros(l.kernel.shape()),
                    bias: Array::zeros(l.bias.shape()),
                })
                .collect(),
        }
    }
}

/// One image with its per-pixel class labels (0 = background, `c + 1` =
/// class channel `c`). Shapes never overlap, so the label map encodes all
/// fifteen binary masks exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `1 × H × W`, values in `[0, 1]`
    pub image: Array,
    pub labels: Vec<u8>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Binary `H × W` mask for output channel `channel`.
    pub fn mask(&self, channel: usize) -> Array {
        let want = channel as u8 + 1;
        let data = self
            .labels
            .iter()
            .map(|&l| if l == want { 1.0 } else { 0.0 })
            .collect();
        Array::new(vec![self.height(), self.width()], data).unwrap()
    }

    pub fn mask_bits(&self, channel: usize) -> Vec<bool> {
        let want = channel as u8 + 1;
        self.labels.iter().map(|&l| l == want).collect()
    }

    /// All masks stacked, `NUM_CLASSES × H × W`.
    pub fn masks(&self) -> Array {
        let mut data = Vec::with_capacity(NUM_CLASSES * self.labels.len());
        for c in 0..NUM_CLASSES {
            data.extend(self.mask(c).into_data());
        }
        Array::new(vec![NUM_CLASSES, self.height(), self.width()], data).unwrap()
    }
}

/// A batch of images with stacked masks and the one channel that carries
/// supervision for the current task.
#[derive(Clone, Debug, PartialEq)]
pub struct SegBatch {
    /// `B × 1 × H × W`
    pub images: Array,
    /// `B × 15 × H × W`, {0,1}-valued
    pub masks: Array,
    pub supervised_channel: usize,
}

impl SegBatch {
    pub fn from_samples(samples: &[Sample], supervised_channel: usize) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::contract("empty batch"));
        };
        if supervised_channel >= NUM_CLASSES {
            return Err(Error::contract(format!(
                "supervised channel {supervised_channel} out of range"
            )));
        }
        let (h, w) = (first.height(), first.width());
        let mut images = Vec::new();
        let mut masks = Vec::new();
        for s in samples {
            images.extend_from_slice(s.image.data());
            masks.extend(s.masks().into_data());
        }
        Ok(Self {
            images: Array::new(vec![samples.len(), 1, h, w], images)?,
            masks: Array::new(vec![samples.len(), NUM_CLASSES, h, w], masks)?,
            supervised_channel,
        })
    }
}

fn activate(x: &Array, act: Activation) -> Array {
    match act {
        Activation::Relu => x.map(|v| v.max(0.0)),
        Activation::Sigmoid => x.map(sigmoid),
        Activation::None => x.clone(),
    }
}

/// Single-image forward pass, `C_in × H × W → C_out × H × W`.
pub fn forward_image(
    arch: &TargetArchitecture,
    params: &ParameterSet,
    image: &Array,
) -> Result<Array> {
    params.check(arch)?;
    let mut x = image.clone();
    for (p, l) in params.layers.iter().zip(&arch.layers) {
        x = activate(&conv2d(&x, &p.kernel, &p.bias)?, l.activation);
    }
    Ok(x)
}

/// Forward pass that computes only output channel `channel` of the last
/// layer, `H × W`.
pub fn forward_channel(
    arch: &TargetArchitecture,
    params: &ParameterSet,
    image: &Array,
    channel: usize,
) -> Result<Array> {
    params.check(arch)?;
    let last = arch.layers.len() - 1;
    if channel >= arch.out_channels() {
        return Err(Error::dim(format!("channel {channel} out of range")));
    }
    let mut x = image.clone();
    for (p, l) in params.layers[..last].iter().zip(&arch.layers) {
        x = activate(&conv2d(&x, &p.kernel, &p.bias)?, l.activation);
    }
    let (k, b) = channel_slice(&params.layers[last], &arch.layers[last], channel);
    let out = activate(&conv2d(&x, &k, &b)?, arch.layers[last].activation);
    let (h, w) = (out.shape()[1], out.shape()[2]);
    out.reshape(vec![h, w])
}

fn channel_slice(p: &LayerParams, spec: &LayerSpec, channel: usize) -> (Array, Array) {
    let per = spec.n_in * KERNEL * KERNEL;
    let k = Array::new(
        vec![1, spec.n_in, KERNEL, KERNEL],
        p.kernel.data()[channel * per..(channel + 1) * per].to_vec(),
    )
    .unwrap();
    (k, Array::vector(vec![p.bias.data()[channel]]))
}

/// Batched forward, `B × C_in × H × W → B × C_out × H × W`.
pub fn forward(arch: &TargetArchitecture, params: &ParameterSet, images: &Array) -> Result<Array> {
    let [b, c, h, w] = images.shape()[..] else {
        return Err(Error::dim(format!(
            "images must be B×C×H×W, got {:?}",
            images.shape()
        )));
    };
    if c != arch.in_channels() {
        return Err(Error::dim(format!(
            "images have {c} channels, network expects {}",
            arch.in_channels()
        )));
    }
    let plane = c * h * w;
    let mut out = Vec::with_capacity(b * arch.out_channels() * h * w);
    for i in 0..b {
        let img = Array::new(vec![c, h, w], images.data()[i * plane..(i + 1) * plane].to_vec())?;
        out.extend(forward_image(arch, params, &img)?.into_data());
    }
    Array::new(vec![b, arch.out_channels(), h, w], out)
}

/// Tape-recorded layer weights.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub kernel: Var,
    pub bias: Var,
}

pub fn param_vars(tape: &mut Tape, params: &ParameterSet) -> Vec<LayerVars> {
    params
        .layers
        .iter()
        .map(|l| LayerVars {
            kernel: tape.param(l.kernel.clone()),
            bias: tape.param(l.bias.clone()),
        })
        .collect()
}

/// Recorded forward pass for one image producing output `channel` only,
/// shaped `1 × H × W`.
pub fn forward_channel_tape(
    tape: &mut Tape,
    arch: &TargetArchitecture,
    layers: &[LayerVars],
    image: Var,
    channel: usize,
) -> Result<Var> {
    let last = arch.layers.len() - 1;
    let mut x = image;
    for (j, (lv, spec)) in layers.iter().zip(&arch.layers).enumerate() {
        let (k, b) = if j == last {
            let per = spec.n_in * KERNEL * KERNEL;
            let k = tape.gather(
                lv.kernel,
                (channel * per..(channel + 1) * per).collect(),
                vec![1, spec.n_in, KERNEL, KERNEL],
            )?;
            let b = tape.gather(lv.bias, vec![channel], vec![1])?;
            (k, b)
        } else {
            (lv.kernel, lv.bias)
        };
        x = tape.conv2d(x, k, b)?;
        x = match spec.activation {
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::None => x,
        };
    }
    Ok(x)
}

/// `1 − (2Σpm + ε)/(Σp + Σm + ε)`, recorded on the tape.
pub fn soft_dice_loss(tape: &mut Tape, pred: Var, mask: Var) -> Result<Var> {
    let (p, m) = (tape.value(pred), tape.value(mask));
    if p.len() != m.len() {
        return Err(Error::dim(format!(
            "soft dice: prediction {:?} vs mask {:?}",
            p.shape(),
            m.shape()
        )));
    }
    let mask_sum = m.sum();
    let m = if tape.value(mask).shape() != tape.value(pred).shape() {
        tape.reshape(mask, tape.value(pred).shape().to_vec())?
    } else {
        mask
    };
    let pm = tape.mul(pred, m)?;
    let inter = tape.sum(pm);
    let psum = tape.sum(pred);
    let eps = tape.constant(Array::scalar(DICE_EPS));
    let num = tape.scale(inter, 2.0);
    let num = tape.add(num, eps)?;
    let den_const = tape.constant(Array::scalar(mask_sum + DICE_EPS));
    let den = tape.add(psum, den_const)?;
    let ratio = tape.div(num, den)?;
    let one = tape.constant(Array::scalar(1.0));
    tape.sub(one, ratio)
}

/// Value-only soft Dice loss.
pub fn soft_dice_loss_value(pred: &Array, mask: &Array) -> Result<f64> {
    if pred.len() != mask.len() {
        return Err(Error::dim(format!(
            "soft dice: prediction {:?} vs mask {:?}",
            pred.shape(),
            mask.shape()
        )));
    }
    let inter: f64 = pred.data().iter().zip(mask.data()).map(|(p, m)| p * m).sum();
    Ok(1.0 - (2.0 * inter + DICE_EPS) / (pred.sum() + mask.sum() + DICE_EPS))
}

pub fn binarize(prob: &Array) -> Array {
    prob.map(|p| if p > THRESHOLD { 1.0 } else { 0.0 })
}

/// `2|P∩M| / (|P| + |M|)` on binary arrays; two empty masks score 1.
pub fn dice_score(pred: &Array, mask: &Array) -> Result<f64> {
    pred.check_same_shape(mask, "dice_score")?;
    let binary = |a: &Array| a.data().iter().all(|&v| v == 0.0 || v == 1.0);
    if !binary(pred) || !binary(mask) {
        return Err(Error::contract("dice_score needs {0,1}-valued inputs"));
    }
    let p: Vec<bool> = pred.data().iter().map(|&v| v == 1.0).collect();
    let m: Vec<bool> = mask.data().iter().map(|&v| v == 1.0).collect();
    Ok(dice_bits(&p, &m))
}

pub fn dice_bits(pred: &[bool], mask: &[bool]) -> f64 {
    let (mut inter, mut np, mut nm) = (0usize, 0usize, 0usize);
    for (&p, &m) in pred.iter().zip(mask) {
        inter += (p && m) as usize;
        np += p as usize;
        nm += m as usize;
    }
    if np + nm == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + nm) as f64
    }
}

/// Mean per-image Dice of output `channel` over `samples`.
pub fn channel_dice(
    arch: &TargetArchitecture,
    params: &ParameterSet,
    samples: &[Sample],
    channel: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::contract("no samples to evaluate"));
    }
    let mut total = 0.0;
    for s in samples {
        let prob = forward_channel(arch, params, &s.image, channel)?;
        let pred: Vec<bool> = prob.data().iter().map(|&p| p > THRESHOLD).collect();
        total += dice_bits(&pred, &s.mask_bits(channel));
    }
    Ok(total / samples.len() as f64)
}

/// Mean per-image Dice of every output channel, from one full forward pass
/// per image.
pub fn all_channel_dice(
    arch: &TargetArchitecture,
    params: &ParameterSet,
    samples: &[Sample],
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::contract("no samples to evaluate"));
    }
    let c_out = arch.out_channels();
    let mut totals = vec![0.0; c_out];
    for s in samples {
        let prob = forward_image(arch, params, &s.image)?;
        let plane = s.labels.len();
        for (c, t) in totals.iter_mut().enumerate() {
            let pred: Vec<bool> = prob.data()[c * plane..(c + 1) * plane]
                .iter()
                .map(|&p| p > THRESHOLD)
                .collect();
            *t += dice_bits(&pred, &s.mask_bits(c));
        }
    }
    Ok(totals.into_iter().map(|t| t / samples.len() as f64).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean soft Dice loss of each epoch, measured before each update.
    pub epoch_losses: Vec<f64>,
    pub updates: usize,
}

/// `epochs` full passes over `shard`, batch size 1, supervising only
/// `channel`. Shard order is reshuffled every epoch from `seed`.
pub fn train_local(
    arch: &TargetArchitecture,
    params: &ParameterSet,
    shard: &[Sample],
    channel: usize,
    epochs: usize,
    adam: AdamConfig,
    seed: u64,
) -> Result<(ParameterSet, TrainReport)> {
    params.check(arch)?;
    if shard.is_empty() {
        return Err(Error::contract("train_local on an empty shard"));
    }
    if epochs == 0 {
        return Err(Error::contract("train_local needs at least one epoch"));
    }
    if channel >= arch.out_channels() {
        return Err(Error::contract(format!("channel {channel} out of range")));
    }
    let mut params = params.clone();
    let mut opt = AdamState::new(adam, params.arrays());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(epochs),
        updates: 0,
    };
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &i in &order {
            let sample = &shard[i];
            let mut tape = Tape::new();
            let vars = param_vars(&mut tape, &params);
            let image = tape.constant(sample.image.clone());
            let pred = forward_channel_tape(&mut tape, arch, &vars, image, channel)?;
            let mask = tape.constant(sample.mask(channel));
            let loss = soft_dice_loss(&mut tape, pred, mask)?;
            epoch_loss += tape.scalar(loss);
            let grads = tape.backward(loss)?;
            let g: Vec<Array> = vars
                .iter()
                .flat_map(|lv| [lv.kernel, lv.bias])
                .map(|v| grads.get_or_zeros(v, tape.value(v)))
                .collect();
            opt.step(&mut params.arrays_mut(), &g)?;
            report.updates += 1;
        }
        report.epoch_losses.push(epoch_loss / shard.len() as f64);
    }
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_sample(seed: u64, size: usize) -> Sample {
        let mut r = rng(seed);
        let image = Array::new(
            vec![1, size, size],
            (0..size * size).map(|_| r.random::<f64>()).collect(),
        )
        .unwrap();
        let labels = (0..size * size).map(|_| r.random_range(0..=15u8)).collect();
        Sample { image, labels }
    }

    #[test]
    fn tiny_seg_has_1759_parameters() {
        let arch = TargetArchitecture::tiny_seg();
        // (1·8·9 + 8) + (8·8·9 + 8) + (8·15·9 + 15)
        assert_eq!(arch.param_count(), 80 + 584 + 1095);
        assert_eq!(ParameterSet::zeros(&arch).flatten().len(), 1759);
    }

    #[test]
    fn architecture_rejects_channel_gap() {
        let l = |n_in, n_out| LayerSpec { n_in, n_out, activation: Activation::Relu };
        assert!(TargetArchitecture::new(vec![l(1, 4), l(3, 2)]).is_err());
        assert!(TargetArchitecture::new(vec![l(1, 0)]).is_err());
    }

    #[test]
    fn flatten_round_trip_and_zero() {
        let arch = TargetArchitecture::tiny_seg();
        let p = ParameterSet::init_random(&arch, &mut rng(3));
        assert_eq!(ParameterSet::unflatten(&arch, &p.flatten()).unwrap(), p);
        let z = ParameterSet::zeros(&arch).flatten();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let short = Array::vector(vec![0.0; 10]);
        assert!(matches!(
            ParameterSet::unflatten(&arch, &short),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn zero_params_output_one_half() {
        let arch = TargetArchitecture::tiny_seg();
        let p = ParameterSet::zeros(&arch);
        let images = Array::full(&[2, 1, 32, 32], 0.7);
        let out = forward(&arch, &p, &images).unwrap();
        assert_eq!(out.shape(), &[2, 15, 32, 32]);
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn single_delta_layer_is_sigmoid_of_scaled_pixel() {
        let arch = TargetArchitecture::new(vec![LayerSpec {
            n_in: 1,
            n_out: 1,
            activation: Activation::Sigmoid,
        }])
        .unwrap();
        let mut p = ParameterSet::zeros(&arch);
        p.layers[0].kernel.data_mut()[4] = 1.7;
        let img = Array::new(vec![1, 2, 2], vec![0.0, 0.5, -1.0, 2.0]).unwrap();
        let out = forward_image(&arch, &p, &img).unwrap();
        for (o, x) in out.data().iter().zip(img.data()) {
            assert!((o - sigmoid(1.7 * x)).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_channel_matches_full_forward() {
        let arch = TargetArchitecture::tiny_seg();
        let p = ParameterSet::init_random(&arch, &mut rng(11));
        let s = random_sample(5, 12);
        let full = forward_image(&arch, &p, &s.image).unwrap();
        for c in [0, 7, 14] {
            let one = forward_channel(&arch, &p, &s.image, c).unwrap();
            assert_eq!(one.data(), &full.data()[c * 144..(c + 1) * 144]);
        }
    }

    #[test]
    fn forward_is_batch_permutation_equivariant() {
        let arch = TargetArchitecture::tiny_seg();
        let p = ParameterSet::init_random(&arch, &mut rng(2));
        let a = random_sample(1, 8);
        let b = random_sample(2, 8);
        let ab = SegBatch::from_samples(&[a.clone(), b.clone()], 0).unwrap();
        let ba = SegBatch::from_samples(&[b, a], 0).unwrap();
        let oab = forward(&arch, &p, &ab.images).unwrap();
        let oba = forward(&arch, &p, &ba.images).unwrap();
        let n = 15 * 64;
        assert_eq!(&oab.data()[..n], &oba.data()[n..]);
        assert_eq!(&oab.data()[n..], &oba.data()[..n]);
    }

    #[test]
    fn soft_dice_examples() {
        let mask = Array::vector(vec![1.0, 0.0, 1.0, 1.0]);
        assert!(soft_dice_loss_value(&mask, &mask).unwrap() <= 1e-5);
        let ones = Array::full(&[6], 1.0);
        let zeros = Array::zeros(&[6]);
        assert!((soft_dice_loss_value(&zeros, &ones).unwrap() - 1.0).abs() < 1e-6);
        let n = 40.0;
        let half = Array::full(&[40], 0.5);
        let all = Array::full(&[40], 1.0);
        let expected = 1.0 - (2.0 * 0.5 * n + DICE_EPS) / (0.5 * n + n + DICE_EPS);
        let got = soft_dice_loss_value(&half, &all).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 1.0 / 3.0).abs() < 1e-7);
        assert!(soft_dice_loss_value(&half, &ones).is_err());
    }

    #[test]
    fn soft_dice_tape_matches_value_and_gradient() {
        let pred = Array::vector(vec![0.2, 0.9, 0.4, 0.6, 0.05]);
        let mask = Array::vector(vec![0.0, 1.0, 1.0, 0.0, 0.0]);
        let mut t = Tape::new();
        let p = t.param(pred.clone());
        let m = t.constant(mask.clone());
        let l = soft_dice_loss(&mut t, p, m).unwrap();
        assert!((t.scalar(l) - soft_dice_loss_value(&pred, &mask).unwrap()).abs() < 1e-15);
        let report = grad_check(
            |t, v| {
                let m = t.constant(mask.clone());
                soft_dice_loss(t, v[0], m)
            },
            &[pred],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }

    #[test]
    fn dice_examples() {
        let a = Array::vector(vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        let p = Array::vector(vec![1.0, 1.0, 0.0, 0.0]);
        let m = Array::vector(vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(dice_score(&p, &m).unwrap(), 0.0);
        let p = Array::vector(vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        let m = Array::vector(vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(dice_score(&p, &m).unwrap(), 0.5);
        let empty = Array::zeros(&[4]);
        assert_eq!(dice_score(&empty, &empty).unwrap(), 1.0);
        let soft = Array::vector(vec![0.3, 1.0, 0.0, 0.0]);
        assert!(matches!(
            dice_score(&soft, &empty),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn train_local_contracts() {
        let arch = TargetArchitecture::tiny_seg();
        let p = ParameterSet::init_random(&arch, &mut rng(0));
        let cfg = AdamConfig::default();
        assert!(matches!(
            train_local(&arch, &p, &[], 0, 1, cfg, 0),
            Err(Error::Contract(_))
        ));
        let s = vec![random_sample(9, 8)];
        assert!(matches!(
            train_local(&arch, &p, &s, 0, 0, cfg, 0),
            Err(Error::Contract(_))
        ));
        let (_, r) = train_local(&arch, &p, &s, 0, 1, cfg, 0).unwrap();
        assert_eq!(r.updates, 1);
        assert_eq!(r.epoch_losses.len(), 1);
    }

    #[test]
    fn train_local_leaves_saturated_model_alone() {
        // every pixel belongs to the supervised class and the output is
        // pinned at 1, so the loss has (numerically) no gradient
        let arch = TargetArchitecture::tiny_seg();
        let mut p = ParameterSet::zeros(&arch);
        p.layers[2].bias.data_mut()[3] = 60.0;
        let sample = Sample {
            image: Array::full(&[1, 8, 8], 0.5),
            labels: vec![4; 64],
        };
        let (q, _) = train_local(&arch, &p, &[sample], 3, 5, AdamConfig::default(), 1).unwrap();
        assert!(q.l2_squared(&p).unwrap().sqrt() <= 1e-6);
    }

    #[test]
    fn mean_of_parameter_sets() {
        let arch = TargetArchitecture::tiny_seg();
        let a = ParameterSet::init_random(&arch, &mut rng(1));
        let b = ParameterSet::init_random(&arch, &mut rng(2));
        let m = ParameterSet::mean(&[&a, &b]).unwrap();
        for ((x, y), z) in a
            .flatten()
            .data()
            .iter()
            .zip(b.flatten().data())
            .zip(m.flatten().data())
        {
            assert!((z - (x + y) / 2.0).abs() < 1e-15);
        }
        assert_eq!(ParameterSet::mean(&[&a, &a, &a]).unwrap(), a);
        let mut neg = a.clone();
        for arr in neg.arrays_mut() {
            for v in arr.data_mut() {
                *v = -*v;
            }
        }
        let zero = ParameterSet::mean(&[&a, &neg]).unwrap();
        assert!(zero.flatten().data().iter().all(|&v| v == 0.0));
    }
}
