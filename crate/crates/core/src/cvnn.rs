//! The nine-stage complex-valued network (and its real-valued baseline):
//! input, conv I, pool I, conv II, pool II, flatten, fc I, fc II, output.
//!
//! Both models share one engine. The complex model reads the normalised CSI
//! matrix as a single-channel `C x L` image and emits one complex output
//! neuron. The real baseline stacks `Re(H)` and `Im(H)` as two real channels
//! and emits two real output neurons `[Re(y), Im(y)]`; all of its tensors have
//! identically zero imaginary planes, so the complex kernels compute exactly
//! the real network.
//!
//! Gradients use the convention `g = dJ/da + i dJ/db` for every parameter
//! `w = a + ib`, which equals `2 dJ/dw*`. The factor two is absorbed into the
//! learning rate everywhere in the crate.

use std::hash::{DefaultHasher, Hash, Hasher};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctensor::{
    avgpool1d, avgpool1d_backward, cconv2d, cconv2d_backward, cmatmul, cmatmul_backward_acc, flatten, ComplexTensor,
    Padding,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// Split ReLU on real and imaginary parts.
    #[default]
    Crelu,
    /// Phase-preserving modulus threshold with a learnable offset per layer.
    Modrelu,
}

/// Weight initialiser. Both keep the same second moment for the complex and
/// the real model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    /// `E|w|^2 = 1/(fan_in+fan_out)`.
    #[default]
    Glorot,
    /// `E|w|^2 = 2/fan_in`.
    He,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Cvnn,
    Rvnn,
}

impl ModelKind {
    pub fn input_channels(self) -> usize {
        match self {
            ModelKind::Cvnn => 1,
            ModelKind::Rvnn => 2,
        }
    }

    pub fn output_units(self) -> usize {
        match self {
            ModelKind::Cvnn => 1,
            ModelKind::Rvnn => 2,
        }
    }
}

/// Layer extents. Defaults follow the reference hyperparameter table with a
/// two-antenna, 250-tap input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// `C`, the height of the input image.
    pub antennas: usize,
    /// `L`, the width of the input image.
    pub subcarriers: usize,
    pub conv1_channels: usize,
    pub conv1_kernel: usize,
    pub pool1_window: usize,
    pub pool1_stride: usize,
    pub conv2_channels: usize,
    pub conv2_kernel: usize,
    pub pool2_window: usize,
    pub pool2_stride: usize,
    pub fc1_units: usize,
    pub fc2_units: usize,
    pub activation: Activation,
    pub padding: Padding,
    pub init: Init,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            antennas: 2,
            subcarriers: 250,
            conv1_channels: 4,
            conv1_kernel: 2,
            pool1_window: 5,
            pool1_stride: 1,
            conv2_channels: 8,
            conv2_kernel: 2,
            pool2_window: 9,
            pool2_stride: 2,
            fc1_units: 64,
            fc2_units: 32,
            activation: Activation::Crelu,
            padding: Padding::Same,
            init: Init::Glorot,
            seed: 0,
        }
    }
}

/// Tensor shapes along the layer chain for one model kind.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerShapes {
    pub input: [usize; 3],
    pub conv1: [usize; 3],
    pub pool1: [usize; 3],
    pub conv2: [usize; 3],
    pub pool2: [usize; 3],
    pub flat: usize,
}

fn pooled(w: usize, window: usize, stride: usize) -> Option<usize> {
    (window <= w).then(|| (w - window) / stride + 1)
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("antennas", self.antennas),
            ("subcarriers", self.subcarriers),
            ("conv1_channels", self.conv1_channels),
            ("conv1_kernel", self.conv1_kernel),
            ("pool1_window", self.pool1_window),
            ("pool1_stride", self.pool1_stride),
            ("conv2_channels", self.conv2_channels),
            ("conv2_kernel", self.conv2_kernel),
            ("pool2_window", self.pool2_window),
            ("pool2_stride", self.pool2_stride),
            ("fc1_units", self.fc1_units),
            ("fc2_units", self.fc2_units),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("net.{name} must be at least 1")));
        }
        self.shapes(ModelKind::Cvnn).map(|_| ())
    }

    /// Walks the shape chain, naming the first layer that cannot be built.
    pub fn shapes(&self, kind: ModelKind) -> Result<LayerShapes> {
        let fail = |layer: &str, detail: String| Error::dim("shape chain", format!("{layer}: {detail}"));
        let input = [kind.input_channels(), self.antennas, self.subcarriers];
        let conv = |layer: &str, inp: [usize; 3], out_ch: usize, k: usize| -> Result<[usize; 3]> {
            let (_, h) = self
                .padding
                .geometry(inp[1], k)
                .ok_or_else(|| fail(layer, format!("kernel {k} exceeds height {}", inp[1])))?;
            let (_, w) = self
                .padding
                .geometry(inp[2], k)
                .ok_or_else(|| fail(layer, format!("kernel {k} exceeds width {}", inp[2])))?;
            if h == 0 || w == 0 {
                return Err(fail(layer, "empty output".into()));
            }
            Ok([out_ch, h, w])
        };
        let pool = |layer: &str, inp: [usize; 3], window: usize, stride: usize| -> Result<[usize; 3]> {
            if stride == 0 {
                return Err(fail(layer, "stride must be at least 1".into()));
            }
            let w = pooled(inp[2], window, stride)
                .ok_or_else(|| fail(layer, format!("window {window} exceeds width {}", inp[2])))?;
            Ok([inp[0], inp[1], w])
        };
        let conv1 = conv("convolutional layer I", input, self.conv1_channels, self.conv1_kernel)?;
        let pool1 = pool("pooling layer I", conv1, self.pool1_window, self.pool1_stride)?;
        let conv2 = conv("convolutional layer II", pool1, self.conv2_channels, self.conv2_kernel)?;
        let pool2 = pool("pooling layer II", conv2, self.pool2_window, self.pool2_stride)?;
        let flat = pool2.iter().product();
        Ok(LayerShapes {
            input,
            conv1,
            pool1,
            conv2,
            pool2,
            flat,
        })
    }

    /// Number of modReLU offsets carried by the parameter set.
    pub fn modrelu_params(&self) -> usize {
        match self.activation {
            Activation::Crelu => 0,
            Activation::Modrelu => ACTIVATED_LAYERS,
        }
    }
}

const ACTIVATED_LAYERS: usize = 4;

pub const TENSOR_NAMES: [&str; 10] = [
    "conv1_kernel",
    "conv1_bias",
    "conv2_kernel",
    "conv2_bias",
    "fc1_weight",
    "fc1_bias",
    "fc2_weight",
    "fc2_bias",
    "out_weight",
    "out_bias",
];

/// Full parameter set of either model kind. Gradients share the layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub kind: ModelKind,
    pub conv1_kernel: ComplexTensor,
    pub conv1_bias: ComplexTensor,
    pub conv2_kernel: ComplexTensor,
    pub conv2_bias: ComplexTensor,
    pub fc1_weight: ComplexTensor,
    pub fc1_bias: ComplexTensor,
    pub fc2_weight: ComplexTensor,
    pub fc2_bias: ComplexTensor,
    pub out_weight: ComplexTensor,
    pub out_bias: ComplexTensor,
    /// One real offset per activated layer (conv I, conv II, fc I, fc II) under modReLU.
    pub modrelu_q: Vec<f64>,
}

pub type CvnnParams = NetParams;
pub type RvnnParams = NetParams;
pub type CvnnGradient = NetParams;

impl NetParams {
    fn layout(cfg: &NetConfig, kind: ModelKind) -> Result<[Vec<usize>; 10]> {
        let s = cfg.shapes(kind)?;
        let (o1, o2, k1, k2) = (
            cfg.conv1_channels,
            cfg.conv2_channels,
            cfg.conv1_kernel,
            cfg.conv2_kernel,
        );
        let (n1, n2, out) = (cfg.fc1_units, cfg.fc2_units, kind.output_units());
        Ok([
            vec![o1, kind.input_channels(), k1, k1],
            vec![o1],
            vec![o2, o1, k2, k2],
            vec![o2],
            vec![s.flat, n1],
            vec![n1],
            vec![n1, n2],
            vec![n2],
            vec![n2, out],
            vec![out],
        ])
    }

    pub fn zeros(cfg: &NetConfig, kind: ModelKind) -> Result<Self> {
        let l = Self::layout(cfg, kind)?;
        let t = |i: usize| ComplexTensor::zeros(&l[i]);
        Ok(Self {
            kind,
            conv1_kernel: t(0),
            conv1_bias: t(1),
            conv2_kernel: t(2),
            conv2_bias: t(3),
            fc1_weight: t(4),
            fc1_bias: t(5),
            fc2_weight: t(6),
            fc2_bias: t(7),
            out_weight: t(8),
            out_bias: t(9),
            modrelu_q: vec![0.0; cfg.modrelu_params()],
        })
    }

    /// Seeded uniform initialisation, see [`Init`]. Complex weights draw real
    /// and imaginary parts independently with the limit divided by `sqrt(2)`.
    /// Biases and modReLU offsets start at zero.
    pub fn init(cfg: &NetConfig, kind: ModelKind) -> Result<Self> {
        let mut p = Self::zeros(cfg, kind)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for t in [
            &mut p.conv1_kernel,
            &mut p.conv2_kernel,
            &mut p.fc1_weight,
            &mut p.fc2_weight,
            &mut p.out_weight,
        ] {
            let shape = t.shape().to_vec();
            let (fan_in, fan_out) = match shape.as_slice() {
                [o, c, kh, kw] => (c * kh * kw, o * kh * kw),
                [i, o] => (*i, *o),
                _ => unreachable!("weight tensors are rank 2 or 4"),
            };
            let mut limit = match cfg.init {
                Init::Glorot => (3.0 / (fan_in + fan_out) as f64).sqrt(),
                Init::He => (6.0 / fan_in as f64).sqrt(),
            };
            if kind == ModelKind::Cvnn {
                limit /= std::f64::consts::SQRT_2;
            }
            let (re, im) = t.planes_mut();
            for k in 0..re.len() {
                re[k] = rng.random_range(-limit..=limit);
                if kind == ModelKind::Cvnn {
                    im[k] = rng.random_range(-limit..=limit);
                }
            }
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            let (re, im) = t.planes_mut();
            re.fill(0.0);
            im.fill(0.0);
        }
        z.modrelu_q.fill(0.0);
        z
    }

    pub fn tensors(&self) -> [&ComplexTensor; 10] {
        [
            &self.conv1_kernel,
            &self.conv1_bias,
            &self.conv2_kernel,
            &self.conv2_bias,
            &self.fc1_weight,
            &self.fc1_bias,
            &self.fc2_weight,
            &self.fc2_bias,
            &self.out_weight,
            &self.out_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut ComplexTensor; 10] {
        [
            &mut self.conv1_kernel,
            &mut self.conv1_bias,
            &mut self.conv2_kernel,
            &mut self.conv2_bias,
            &mut self.fc1_weight,
            &mut self.fc1_bias,
            &mut self.fc2_weight,
            &mut self.fc2_bias,
            &mut self.out_weight,
            &mut self.out_bias,
        ]
    }

    /// Complex entries across all tensors (modReLU offsets excluded).
    pub fn complex_len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Concatenated real planes followed by the modReLU offsets.
    pub fn real_part(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.tensors().iter().flat_map(|t| t.re().iter().copied()).collect();
        v.extend_from_slice(&self.modrelu_q);
        v
    }

    pub fn imag_part(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.im().iter().copied()).collect()
    }

    /// Inverse of (`real_part`, `imag_part`) using `self` as the layout template.
    pub fn recombine(&self, re: &[f64], im: &[f64]) -> Result<Self> {
        let n = self.complex_len();
        if re.len() != n + self.modrelu_q.len() || im.len() != n {
            return Err(Error::dim(
                "recombine",
                format!(
                    "expected {} real and {n} imaginary values, got {} and {}",
                    n + self.modrelu_q.len(),
                    re.len(),
                    im.len()
                ),
            ));
        }
        let mut out = self.clone();
        let mut off = 0;
        for t in out.tensors_mut() {
            let len = t.len();
            let (r, i) = t.planes_mut();
            r.copy_from_slice(&re[off..off + len]);
            i.copy_from_slice(&im[off..off + len]);
            off += len;
        }
        out.modrelu_q.copy_from_slice(&re[off..]);
        Ok(out)
    }

    /// Checks that tensor shapes agree with `cfg` for this model kind.
    pub fn check_layout(&self, cfg: &NetConfig) -> Result<()> {
        let layout = Self::layout(cfg, self.kind)?;
        for ((t, want), name) in self.tensors().iter().zip(&layout).zip(TENSOR_NAMES) {
            if t.shape() != want.as_slice() {
                return Err(Error::dim(
                    "parameters",
                    format!("{name} has shape {:?}, config implies {want:?}", t.shape()),
                ));
            }
        }
        if self.modrelu_q.len() != cfg.modrelu_params() {
            return Err(Error::dim(
                "parameters",
                format!(
                    "{} modReLU offsets present, config implies {}",
                    self.modrelu_q.len(),
                    cfg.modrelu_params()
                ),
            ));
        }
        Ok(())
    }

    /// Hash of every bit of the parameter values, used to tie caches to parameters.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.kind.hash(&mut h);
        for t in self.tensors() {
            t.shape().hash(&mut h);
            for v in t.re().iter().chain(t.im()) {
                v.to_bits().hash(&mut h);
            }
        }
        for q in &self.modrelu_q {
            q.to_bits().hash(&mut h);
        }
        h.finish()
    }

    /// Cheap key for matching a forward cache to its parameters: shapes,
    /// every bias and `q`, and a strided sample of each weight tensor.
    fn cache_key(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.kind.hash(&mut h);
        for t in self.tensors() {
            t.shape().hash(&mut h);
            let step = t.len() / 64 + 1;
            for plane in [t.re(), t.im()] {
                for v in plane.iter().step_by(step).chain(plane.last()) {
                    v.to_bits().hash(&mut h);
                }
            }
        }
        for q in &self.modrelu_q {
            q.to_bits().hash(&mut h);
        }
        h.finish()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite()) && self.modrelu_q.iter().all(|q| q.is_finite())
    }

    /// Per-layer container walk: entries of each layer's tensors.
    pub fn counts(&self) -> ParamCounts {
        let t = self.tensors();
        let c = |a: usize, b: usize| t[a].len() + t[b].len();
        ParamCounts::new(c(0, 1), c(2, 3), c(4, 5), c(6, 7), c(8, 9), self.modrelu_q.len())
    }
}

/// Parameter counts per layer. For the complex model these are complex
/// entries; for the real baseline, real entries. modReLU offsets are real and
/// listed separately.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub conv1: usize,
    pub conv2: usize,
    pub fc1: usize,
    pub fc2: usize,
    pub out: usize,
    pub modrelu_q: usize,
    pub total: usize,
}

impl ParamCounts {
    fn new(conv1: usize, conv2: usize, fc1: usize, fc2: usize, out: usize, modrelu_q: usize) -> Self {
        Self {
            conv1,
            conv2,
            fc1,
            fc2,
            out,
            modrelu_q,
            total: conv1 + conv2 + fc1 + fc2 + out,
        }
    }
}

/// Closed-form parameter counts from the layer extents.
pub fn count_params(cfg: &NetConfig, kind: ModelKind) -> Result<ParamCounts> {
    let s = cfg.shapes(kind)?;
    let (o1, o2, k1, k2) = (
        cfg.conv1_channels,
        cfg.conv2_channels,
        cfg.conv1_kernel,
        cfg.conv2_kernel,
    );
    let (n1, n2, cin, out) = (cfg.fc1_units, cfg.fc2_units, kind.input_channels(), kind.output_units());
    Ok(ParamCounts::new(
        o1 * cin * k1 * k1 + o1,
        o2 * o1 * k2 * k2 + o2,
        s.flat * n1 + n1,
        n1 * n2 + n2,
        n2 * out + out,
        cfg.modrelu_params(),
    ))
}

/// Number of trainable real scalars, the budget used to compare model kinds.
pub fn real_parameter_budget(cfg: &NetConfig, kind: ModelKind) -> Result<usize> {
    let c = count_params(cfg, kind)?;
    Ok(match kind {
        ModelKind::Cvnn => 2 * c.total + c.modrelu_q,
        ModelKind::Rvnn => c.total + c.modrelu_q,
    })
}

/// Multiplications per forward pass, layer by layer (complex multiplications
/// for the complex model, real ones for the baseline; pooling counts one
/// scaling per averaged window entry).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct MultCounts {
    pub conv1: usize,
    pub pool1: usize,
    pub conv2: usize,
    pub pool2: usize,
    pub fc1: usize,
    pub fc2: usize,
    pub out: usize,
    pub total: usize,
}

pub fn count_mults(cfg: &NetConfig, kind: ModelKind) -> Result<MultCounts> {
    let s = cfg.shapes(kind)?;
    let area = |d: [usize; 3]| d[1] * d[2];
    let conv1 = s.conv1[0] * kind.input_channels() * cfg.conv1_kernel.pow(2) * area(s.conv1);
    let pool1 = s.conv1.iter().product();
    let conv2 = s.conv2[0] * s.pool1[0] * cfg.conv2_kernel.pow(2) * area(s.conv2);
    let pool2 = s.conv2.iter().product();
    let fc1 = s.flat * cfg.fc1_units;
    let fc2 = cfg.fc1_units * cfg.fc2_units;
    let out = cfg.fc2_units * kind.output_units();
    Ok(MultCounts {
        conv1,
        pool1,
        conv2,
        pool2,
        fc1,
        fc2,
        out,
        total: conv1 + pool1 + conv2 + pool2 + fc1 + fc2 + out,
    })
}

// ---------------------------------------------------------------------------
// Activations

pub fn crelu_scalar(z: Complex64) -> Complex64 {
    Complex64::new(z.re.max(0.0), z.im.max(0.0))
}

/// `(|z| + q) z/|z|` when `|z| + q >= 0`, else 0. Defined as 0 at `z = 0`.
pub fn modrelu_scalar(z: Complex64, q: f64) -> Complex64 {
    let r = z.norm();
    if r == 0.0 || r + q < 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    z * ((r + q) / r)
}

pub fn crelu(z: &ComplexTensor) -> ComplexTensor {
    z.map(crelu_scalar)
}

pub fn modrelu(z: &ComplexTensor, q: f64) -> ComplexTensor {
    z.map(|v| modrelu_scalar(v, q))
}

fn activate(act: Activation, z: &ComplexTensor, q: f64) -> ComplexTensor {
    match act {
        Activation::Crelu => crelu(z),
        Activation::Modrelu => modrelu(z, q),
    }
}

/// Maps the upstream gradient at an activation output back to its input;
/// also returns the gradient of the modReLU offset (0 for split ReLU).
fn activate_backward(act: Activation, pre: &ComplexTensor, q: f64, up: &ComplexTensor) -> (ComplexTensor, f64) {
    let mut g = ComplexTensor::zeros(pre.shape());
    let mut gq = 0.0;
    match act {
        Activation::Crelu => {
            let (gr, gi) = g.planes_mut();
            for k in 0..pre.len() {
                if pre.re()[k] > 0.0 {
                    gr[k] = up.re()[k];
                }
                if pre.im()[k] > 0.0 {
                    gi[k] = up.im()[k];
                }
            }
        }
        Activation::Modrelu => {
            let (gr, gi) = g.planes_mut();
            for k in 0..pre.len() {
                let (x, y) = (pre.re()[k], pre.im()[k]);
                let r = x.hypot(y);
                if r == 0.0 || r + q <= 0.0 {
                    continue;
                }
                let (ur, ui) = (up.re()[k], up.im()[k]);
                let r3 = r * r * r;
                let cross = -q * x * y / r3;
                gr[k] = ur * (1.0 + q * y * y / r3) + ui * cross;
                gi[k] = ur * cross + ui * (1.0 + q * x * x / r3);
                gq += (ur * x + ui * y) / r;
            }
        }
    }
    (g, gq)
}

// ---------------------------------------------------------------------------
// Forward / backward

/// Every intermediate tensor of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    fingerprint: u64,
    kind: ModelKind,
    pub input: ComplexTensor,
    pub conv1_pre: ComplexTensor,
    pub conv1_act: ComplexTensor,
    pub pool1: ComplexTensor,
    pub conv2_pre: ComplexTensor,
    pub conv2_act: ComplexTensor,
    pub pool2: ComplexTensor,
    pub flat: ComplexTensor,
    pub fc1_pre: ComplexTensor,
    pub fc1_act: ComplexTensor,
    pub fc2_pre: ComplexTensor,
    pub fc2_act: ComplexTensor,
    pub output: ComplexTensor,
}

fn dense(x: &ComplexTensor, w: &ComplexTensor, b: &ComplexTensor) -> Result<ComplexTensor> {
    let mut y = cmatmul(x, w)?;
    let (yr, yi) = y.planes_mut();
    for k in 0..b.len() {
        yr[k] += b.re()[k];
        yi[k] += b.im()[k];
    }
    Ok(y)
}

/// Builds the network input tensor for `kind` from a normalised `C x L` CSI matrix.
pub fn model_input(kind: ModelKind, h_hat: &ComplexTensor) -> Result<ComplexTensor> {
    let (c, l) = match h_hat.shape() {
        [c, l] => (*c, *l),
        s => {
            return Err(Error::dim(
                "input layer",
                format!("expected a [C, L] matrix, got {s:?}"),
            ))
        }
    };
    match kind {
        ModelKind::Cvnn => h_hat.reshape(&[1, c, l]),
        ModelKind::Rvnn => {
            let mut re = h_hat.re().to_vec();
            re.extend_from_slice(h_hat.im());
            ComplexTensor::from_real(&[2, c, l], re)
        }
    }
}

/// Reads the model output as the complex estimate `y = a + ib`.
pub fn output_value(kind: ModelKind, output: &ComplexTensor) -> Complex64 {
    match kind {
        ModelKind::Cvnn => output.at(0),
        ModelKind::Rvnn => Complex64::new(output.re()[0], output.re()[1]),
    }
}

pub fn forward(params: &NetParams, cfg: &NetConfig, h_hat: &ComplexTensor) -> Result<(Complex64, ForwardCache)> {
    params.check_layout(cfg)?;
    if h_hat.shape() != [cfg.antennas, cfg.subcarriers] {
        return Err(Error::dim(
            "input layer",
            format!(
                "input {:?} does not match configured [{}, {}]",
                h_hat.shape(),
                cfg.antennas,
                cfg.subcarriers
            ),
        ));
    }
    let shapes = cfg.shapes(params.kind)?;
    let q = |layer: usize| params.modrelu_q.get(layer).copied().unwrap_or(0.0);
    let act = cfg.activation;

    let input = model_input(params.kind, h_hat)?;
    let conv1_pre = cconv2d(&input, &params.conv1_kernel, &params.conv1_bias, cfg.padding)?;
    let conv1_act = activate(act, &conv1_pre, q(0));
    let pool1 = avgpool1d(&conv1_act, cfg.pool1_window, cfg.pool1_stride)?;
    let conv2_pre = cconv2d(&pool1, &params.conv2_kernel, &params.conv2_bias, cfg.padding)?;
    let conv2_act = activate(act, &conv2_pre, q(1));
    let pool2 = avgpool1d(&conv2_act, cfg.pool2_window, cfg.pool2_stride)?;
    let flat = flatten(&pool2).reshape(&[1, shapes.flat])?;
    let fc1_pre = dense(&flat, &params.fc1_weight, &params.fc1_bias)?;
    let fc1_act = activate(act, &fc1_pre, q(2));
    let fc2_pre = dense(&fc1_act, &params.fc2_weight, &params.fc2_bias)?;
    let fc2_act = activate(act, &fc2_pre, q(3));
    let output = dense(&fc2_act, &params.out_weight, &params.out_bias)?;

    let y = output_value(params.kind, &output);
    let cache = ForwardCache {
        fingerprint: params.cache_key(),
        kind: params.kind,
        input,
        conv1_pre,
        conv1_act,
        pool1,
        conv2_pre,
        conv2_act,
        pool2,
        flat,
        fc1_pre,
        fc1_act,
        fc2_pre,
        fc2_act,
        output,
    };
    Ok((y, cache))
}

/// Output estimate only.
pub fn predict(params: &NetParams, cfg: &NetConfig, h_hat: &ComplexTensor) -> Result<Complex64> {
    forward(params, cfg, h_hat).map(|(y, _)| y)
}

/// Backpropagates `upstream = dJ/dRe(y) + i dJ/dIm(y)` to every parameter.
pub fn backward(
    params: &NetParams,
    cfg: &NetConfig,
    cache: &ForwardCache,
    upstream: Complex64,
) -> Result<CvnnGradient> {
    let mut grad = params.zeros_like();
    backward_into(params, cfg, cache, upstream, &mut grad)?;
    Ok(grad)
}

fn add_into(acc: &mut ComplexTensor, g: &ComplexTensor) {
    let (ar, ai) = acc.planes_mut();
    for (a, b) in ar.iter_mut().zip(g.re()) {
        *a += b;
    }
    for (a, b) in ai.iter_mut().zip(g.im()) {
        *a += b;
    }
}

/// Same as [`backward`], adding the gradient into `grad` so a batch can be
/// accumulated without a fresh buffer per sample.
pub fn backward_into(
    params: &NetParams,
    cfg: &NetConfig,
    cache: &ForwardCache,
    upstream: Complex64,
    grad: &mut CvnnGradient,
) -> Result<()> {
    if cache.kind != params.kind || cache.fingerprint != params.cache_key() {
        return Err(Error::Contract(
            "forward cache was produced by different parameters".into(),
        ));
    }
    if grad.kind != params.kind || grad.modrelu_q.len() != params.modrelu_q.len() {
        return Err(Error::Contract("gradient accumulator has a different layout".into()));
    }
    let q = |layer: usize| params.modrelu_q.get(layer).copied().unwrap_or(0.0);
    let act = cfg.activation;

    let g_out = match params.kind {
        ModelKind::Cvnn => ComplexTensor::from_complex(&[1, 1], &[upstream])?,
        ModelKind::Rvnn => ComplexTensor::from_real(&[1, 2], vec![upstream.re, upstream.im])?,
    };
    add_into(&mut grad.out_bias, &g_out);
    let g_fc2_act = cmatmul_backward_acc(&cache.fc2_act, &params.out_weight, &g_out, &mut grad.out_weight)?;

    let (g_fc2_pre, gq3) = activate_backward(act, &cache.fc2_pre, q(3), &g_fc2_act);
    add_into(&mut grad.fc2_bias, &g_fc2_pre);
    let g_fc1_act = cmatmul_backward_acc(&cache.fc1_act, &params.fc2_weight, &g_fc2_pre, &mut grad.fc2_weight)?;

    let (g_fc1_pre, gq2) = activate_backward(act, &cache.fc1_pre, q(2), &g_fc1_act);
    add_into(&mut grad.fc1_bias, &g_fc1_pre);
    let g_flat = cmatmul_backward_acc(&cache.flat, &params.fc1_weight, &g_fc1_pre, &mut grad.fc1_weight)?;

    let g_pool2 = g_flat.reshape(cache.pool2.shape())?;
    let g_conv2_act = avgpool1d_backward(cache.conv2_act.shape(), cfg.pool2_window, cfg.pool2_stride, &g_pool2)?;
    let (g_conv2_pre, gq1) = activate_backward(act, &cache.conv2_pre, q(1), &g_conv2_act);
    let c2 = cconv2d_backward(&cache.pool1, &params.conv2_kernel, cfg.padding, &g_conv2_pre)?;
    add_into(&mut grad.conv2_kernel, &c2.kernel);
    add_into(&mut grad.conv2_bias, &c2.bias);

    let g_conv1_act = avgpool1d_backward(cache.conv1_act.shape(), cfg.pool1_window, cfg.pool1_stride, &c2.input)?;
    let (g_conv1_pre, gq0) = activate_backward(act, &cache.conv1_pre, q(0), &g_conv1_act);
    let c1 = cconv2d_backward(&cache.input, &params.conv1_kernel, cfg.padding, &g_conv1_pre)?;
    add_into(&mut grad.conv1_kernel, &c1.kernel);
    add_into(&mut grad.conv1_bias, &c1.bias);

    for (g, d) in grad.modrelu_q.iter_mut().zip([gq0, gq1, gq2, gq3]) {
        *g += d;
    }
    if params.kind == ModelKind::Rvnn {
        for t in grad.tensors_mut() {
            t.im_mut().fill(0.0);
        }
    }
    Ok(())
}

/// Real-valued baseline with the same layer sequence as `cfg`.
pub fn build_rvnn_baseline(cfg: &NetConfig) -> Result<RvnnParams> {
    NetParams::init(cfg, ModelKind::Rvnn)
}

/// Copy of `cfg` whose first dense layer is resized so the real baseline's
/// real parameter count is as close as possible to the complex model's.
pub fn matched_rvnn_config(cfg: &NetConfig) -> Result<NetConfig> {
    let target = real_parameter_budget(cfg, ModelKind::Cvnn)? as i64;
    let budget = |n1: usize| -> Result<i64> {
        let c = NetConfig {
            fc1_units: n1,
            ..cfg.clone()
        };
        Ok(real_parameter_budget(&c, ModelKind::Rvnn)? as i64)
    };
    // The budget grows linearly in the width, so two evaluations locate the best one.
    let (b1, b2) = (budget(1)?, budget(2)?);
    let slope = (b2 - b1).max(1);
    let guess = (1 + (target - b1) / slope).max(1) as usize;
    let mut best = guess;
    for n1 in guess.saturating_sub(1).max(1)..=guess + 1 {
        if (budget(n1)? - target).abs() < (budget(best)? - target).abs() {
            best = n1;
        }
    }
    Ok(NetConfig {
        fc1_units: best,
        ..cfg.clone()
    })
}
