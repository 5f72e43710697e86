use crate::error::{Error, Result};

/// Dense row-major `f64` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// One-dimensional array. Panics on empty input.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element array.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub(crate) fn add_assign(&mut self, other: &Array) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn check_same_shape(&self, other: &Array, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

/// Plain matrix product `a[m×k] · b[k×n]`.
pub fn matmul(a: &Array, b: &Array) -> Result<Array> {
    let (m, k) = dims2(a, "matmul lhs")?;
    let (k2, n) = dims2(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(Array {
        shape: vec![m, n],
        data: out,
    })
}

/// `aᵀ · b` without materialising the transpose.
pub(crate) fn matmul_tn(a: &Array, b: &Array) -> Array {
    let (k, m) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b.data[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a.data[p * m + i];
            if api == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
    Array {
        shape: vec![m, n],
        data: out,
    }
}

/// `a · bᵀ` without materialising the transpose.
pub(crate) fn matmul_nt(a: &Array, b: &Array) -> Array {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[0];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
    Array {
        shape: vec![m, n],
        data: out,
    }
}

fn dims2(a: &Array, what: &str) -> Result<(usize, usize)> {
    match a.shape.as_slice() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::dim(format!("{what} must be 2-D, got {s:?}"))),
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators keep the reduction order fixed and vectorisable
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Geometry of a 3×3, stride 1, zero-padded convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
}

pub(crate) fn conv_dims(input: &Array, kernel: &Array, bias: &Array) -> Result<ConvDims> {
    let [c_in, h, w] = input.shape[..] else {
        return Err(Error::dim(format!(
            "conv2d input must be C×H×W, got {:?}",
            input.shape
        )));
    };
    let [c_out, k_in, 3, 3] = kernel.shape[..] else {
        return Err(Error::dim(format!(
            "conv2d kernel must be C_out×C_in×3×3, got {:?}",
            kernel.shape
        )));
    };
    if k_in != c_in {
        return Err(Error::dim(format!(
            "conv2d channel mismatch: input has {c_in}, kernel expects {k_in}"
        )));
    }
    if bias.shape != [c_out] {
        return Err(Error::dim(format!(
            "conv2d bias must be [{c_out}], got {:?}",
            bias.shape
        )));
    }
    Ok(ConvDims { c_in, c_out, h, w })
}

/// Valid output index range along one axis for tap offset `d ∈ {-1,0,1}`.
#[inline]
fn tap_range(d: isize, n: usize) -> (usize, usize) {
    let lo = if d < 0 { 1 } else { 0 };
    let hi = if d > 0 { n - 1 } else { n };
    (lo, hi)
}

/// 3×3 convolution, stride 1, zero padding 1.
pub fn conv2d(input: &Array, kernel: &Array, bias: &Array) -> Result<Array> {
    let d = conv_dims(input, kernel, bias)?;
    Ok(conv2d_unchecked(input, kernel, bias, d))
}

pub(crate) fn conv2d_unchecked(input: &Array, kernel: &Array, bias: &Array, d: ConvDims) -> Array {
    let ConvDims { c_in, c_out, h, w } = d;
    let plane = h * w;
    let mut out = vec![0.0; c_out * plane];
    for o in 0..c_out {
        let out_p = &mut out[o * plane..(o + 1) * plane];
        out_p.fill(bias.data[o]);
        for i in 0..c_in {
            let in_p = &input.data[i * plane..(i + 1) * plane];
            let k = &kernel.data[(o * c_in + i) * 9..(o * c_in + i + 1) * 9];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = tap_range(dy, h);
                for kx in 0..3 {
                    let wv = k[ky * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - 1;
                    let (x0, x1) = tap_range(dx, w);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let src = &in_p[sy * w + (x0 as isize + dx) as usize
                            ..sy * w + (x1 as isize + dx) as usize];
                        let dst = &mut out_p[y * w + x0..y * w + x1];
                        for (o, &s) in dst.iter_mut().zip(src) {
                            *o += wv * s;
                        }
                    }
                }
            }
        }
    }
    Array {
        shape: vec![c_out, h, w],
        data: out,
    }
}

/// Gradients of `conv2d` given the upstream gradient of its output.
/// Returns `(d_input, d_kernel, d_bias)`; `d_input` is skipped when not needed.
pub(crate) fn conv2d_backward(
    input: &Array,
    kernel: &Array,
    grad_out: &Array,
    d: ConvDims,
    need_input: bool,
) -> (Option<Array>, Array, Array) {
    let ConvDims { c_in, c_out, h, w } = d;
    let plane = h * w;
    let mut g_in = need_input.then(|| vec![0.0; c_in * plane]);
    let mut g_k = vec![0.0; kernel.data.len()];
    let mut g_b = vec![0.0; c_out];
    for o in 0..c_out {
        let go = &grad_out.data[o * plane..(o + 1) * plane];
        g_b[o] = go.iter().sum();
        for i in 0..c_in {
            let in_p = &input.data[i * plane..(i + 1) * plane];
            let kidx = (o * c_in + i) * 9;
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = tap_range(dy, h);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = tap_range(dx, w);
                    let wv = kernel.data[kidx + ky * 3 + kx];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s0 = sy * w + (x0 as isize + dx) as usize;
                        let s1 = sy * w + (x1 as isize + dx) as usize;
                        let gro = &go[y * w + x0..y * w + x1];
                        acc += dot(gro, &in_p[s0..s1]);
                        if let Some(gi) = g_in.as_mut() {
                            if wv != 0.0 {
                                let dst = &mut gi[i * plane + s0..i * plane + s1];
                                for (t, &g) in dst.iter_mut().zip(gro) {
                                    *t += wv * g;
                                }
                            }
                        }
                    }
                    g_k[kidx + ky * 3 + kx] = acc;
                }
            }
        }
    }
    (
        g_in.map(|data| Array {
            shape: vec![c_in, h, w],
            data,
        }),
        Array {
            shape: kernel.shape.clone(),
            data: g_k,
        },
        Array {
            shape: vec![c_out],
            data: g_b,
        },
    )
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
