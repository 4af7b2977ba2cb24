use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{avgpool2, avgpool2_backward, maxpool2, relu_inplace, Conv2d, Linear};
use super::loss::{kl_to_target, soft_target_grad};
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::rng::Rng;

/// A frozen image classifier. Every method takes `&self`, so parameters cannot
/// change through this interface.
pub trait Classifier: Send + Sync {
    fn num_classes(&self) -> usize;
    /// Resolution the model consumes; `None` when undefined.
    fn input_dims(&self) -> Option<(usize, usize)>;
    /// Logits for an image already at `input_dims`.
    fn logits(&self, x: &Image) -> Vec<f32>;
    fn param_digest(&self) -> [u8; 32];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// conv16-pool-conv32-pool-linear
    ConvPool,
    /// conv16-conv16-avgpool-conv32-global-average-linear
    ConvGap,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::ConvPool => "convpool",
            Arch::ConvGap => "convgap",
        }
    }

    fn code(self) -> u8 {
        match self {
            Arch::ConvPool => 0,
            Arch::ConvGap => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Arch::ConvPool),
            1 => Some(Arch::ConvGap),
            _ => None,
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Conv(Conv2d),
    Relu,
    MaxPool2,
    AvgPool2,
    GlobalAvgPool,
    Linear(Linear),
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    c: usize,
    h: usize,
    w: usize,
}

pub struct Trace {
    inputs: Vec<(Vec<f32>, Shape)>,
    argmax: Vec<Option<Vec<u32>>>,
}

const INPUT_MEAN: f32 = 0.5;
const INPUT_SCALE: f32 = 4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvClassifier {
    arch: Arch,
    input: (usize, usize),
    classes: usize,
    layers: Vec<Layer>,
}

impl ConvClassifier {
    pub fn new(arch: Arch, input: (usize, usize), classes: usize, rng: &mut Rng) -> Self {
        let (h, w) = input;
        assert!(h % 4 == 0 && w % 4 == 0, "input dims must be multiples of 4");
        let layers = match arch {
            Arch::ConvPool => vec![
                Layer::Conv(Conv2d::new(CHANNELS, 16, rng)),
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Conv(Conv2d::new(16, 32, rng)),
                Layer::Relu,
                Layer::MaxPool2,
                Layer::Linear(Linear::new(32 * (h / 4) * (w / 4), classes, rng)),
            ],
            Arch::ConvGap => vec![
                Layer::Conv(Conv2d::new(CHANNELS, 16, rng)),
                Layer::Relu,
                Layer::Conv(Conv2d::new(16, 16, rng)),
                Layer::Relu,
                Layer::AvgPool2,
                Layer::Conv(Conv2d::new(16, 32, rng)),
                Layer::Relu,
                Layer::GlobalAvgPool,
                Layer::Linear(Linear::new(32, classes, rng)),
            ],
        };
        Self {
            arch,
            input,
            classes,
            layers,
        }
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn input(&self) -> (usize, usize) {
        self.input
    }

    pub fn params(&self) -> Vec<&[f32]> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Conv(c) => out.extend([&c.weight[..], &c.bias[..]]),
                Layer::Linear(c) => out.extend([&c.weight[..], &c.bias[..]]),
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Conv(c) => out.extend([&mut c.weight[..], &mut c.bias[..]]),
                Layer::Linear(c) => out.extend([&mut c.weight[..], &mut c.bias[..]]),
                _ => {}
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grads(&self) -> Vec<Vec<f32>> {
        self.params().iter().map(|p| vec![0.0; p.len()]).collect()
    }

    pub fn forward_trace(&self, x: &Image) -> (Vec<f32>, Trace) {
        assert_eq!(x.dims(), self.input, "classifier input dims");
        let mut act: Vec<f32> = x.data().iter().map(|v| (v - INPUT_MEAN) * INPUT_SCALE).collect();
        let mut shape = Shape {
            c: CHANNELS,
            h: x.height(),
            w: x.width(),
        };
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut argmax = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            inputs.push((act.clone(), shape));
            let mut arg = None;
            act = match l {
                Layer::Conv(c) => {
                    shape.c = c.cout;
                    c.forward(&act, shape.h, shape.w)
                }
                Layer::Relu => {
                    relu_inplace(&mut act);
                    act
                }
                Layer::MaxPool2 => {
                    let (o, a) = maxpool2(&act, shape.c, shape.h, shape.w);
                    arg = Some(a);
                    shape.h /= 2;
                    shape.w /= 2;
                    o
                }
                Layer::AvgPool2 => {
                    let o = avgpool2(&act, shape.c, shape.h, shape.w);
                    shape.h /= 2;
                    shape.w /= 2;
                    o
                }
                Layer::GlobalAvgPool => {
                    let hw = shape.h * shape.w;
                    let o = act.chunks_exact(hw).map(|p| p.iter().sum::<f32>() / hw as f32).collect();
                    shape.h = 1;
                    shape.w = 1;
                    o
                }
                Layer::Linear(lin) => {
                    shape = Shape { c: lin.nout, h: 1, w: 1 };
                    lin.forward(&act)
                }
            };
            argmax.push(arg);
        }
        (act, Trace { inputs, argmax })
    }

    /// Accumulates parameter gradients of `<glogits, logits>` into `grads`.
    pub fn backward(&self, trace: &Trace, glogits: &[f32], grads: &mut [Vec<f32>]) {
        let mut g = glogits.to_vec();
        let mut pidx = grads.len();
        for (li, l) in self.layers.iter().enumerate().rev() {
            let (x, s) = &trace.inputs[li];
            let first = li == 0;
            g = match l {
                Layer::Conv(c) => {
                    pidx -= 2;
                    let (gw, gb) = grads[pidx..].split_at_mut(1);
                    match c.backward(x, s.h, s.w, &g, Some((&mut gw[0], &mut gb[0])), !first) {
                        Some(gi) => gi,
                        None => return,
                    }
                }
                Layer::Linear(lin) => {
                    pidx -= 2;
                    let (gw, gb) = grads[pidx..].split_at_mut(1);
                    lin.backward(x, &g, Some((&mut gw[0], &mut gb[0])), true).unwrap()
                }
                Layer::Relu => {
                    for (gv, xv) in g.iter_mut().zip(x) {
                        if *xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    g
                }
                Layer::MaxPool2 => {
                    let mut gi = vec![0.0; x.len()];
                    for (gv, &a) in g.iter().zip(trace.argmax[li].as_ref().unwrap()) {
                        gi[a as usize] += gv;
                    }
                    gi
                }
                Layer::AvgPool2 => avgpool2_backward(&g, s.c, s.h, s.w),
                Layer::GlobalAvgPool => {
                    let hw = s.h * s.w;
                    let mut gi = Vec::with_capacity(x.len());
                    for gv in &g {
                        gi.extend(std::iter::repeat(gv / hw as f32).take(hw));
                    }
                    gi
                }
            };
        }
    }

    /// Mean soft-target loss over `batch` and its parameter gradients.
    pub fn batch_gradients(&self, batch: &[(&Image, &[f32])]) -> (f32, Vec<Vec<f32>>) {
        let mut grads = self.zero_grads();
        let mut total = 0.0;
        let scale = 1.0 / batch.len() as f32;
        for (x, target) in batch {
            let (logits, trace) = self.forward_trace(x);
            total += kl_to_target(&logits, target);
            let g: Vec<f32> = soft_target_grad(&logits, target).iter().map(|v| v * scale).collect();
            self.backward(&trace, &g, &mut grads);
        }
        (total * scale, grads)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&1u16.to_le_bytes());
        out.push(self.arch.code());
        for v in [self.input.0, self.input.1, self.classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for p in self.params() {
            out.extend_from_slice(&(p.len() as u32).to_le_bytes());
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = crate::bytes::Reader::new(bytes);
        if r.take(4)? != CKPT_MAGIC {
            return Err(Error::MalformedArtifact("not a classifier checkpoint".into()));
        }
        let version = r.u16()?;
        if version != 1 {
            return Err(Error::VersionUnsupported(version));
        }
        let arch = Arch::from_code(r.u8()?)
            .ok_or_else(|| Error::MalformedArtifact("unknown architecture".into()))?;
        let (h, w, k) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let mut model = ConvClassifier::new(arch, (h, w), k, &mut crate::rng::rng_for(0, &[]));
        for p in model.params_mut() {
            let n = r.u32()? as usize;
            if n != p.len() {
                return Err(Error::MalformedArtifact("parameter size mismatch".into()));
            }
            for v in p.iter_mut() {
                *v = r.f32()?;
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&crate::audit::read(path).map_err(|e| Error::io(path, e))?)
    }
}

const CKPT_MAGIC: &[u8; 4] = b"D3MC";

pub fn digest_params<'a>(params: impl IntoIterator<Item = &'a [f32]>) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in params {
        h.update((p.len() as u64).to_le_bytes());
        for v in p {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().into()
}

impl Classifier for ConvClassifier {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn input_dims(&self) -> Option<(usize, usize)> {
        Some(self.input)
    }

    fn logits(&self, x: &Image) -> Vec<f32> {
        self.forward_trace(x).0
    }

    fn param_digest(&self) -> [u8; 32] {
        digest_params(self.params())
    }
}

/// Linear readout over raw pixels: `logits = W * flatten(x) + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub input: (usize, usize),
    pub layer: Linear,
}

impl LinearProbe {
    pub fn new(input: (usize, usize), layer: Linear) -> Self {
        assert_eq!(layer.nin, CHANNELS * input.0 * input.1);
        Self { input, layer }
    }
}

impl Classifier for LinearProbe {
    fn num_classes(&self) -> usize {
        self.layer.nout
    }

    fn input_dims(&self) -> Option<(usize, usize)> {
        Some(self.input)
    }

    fn logits(&self, x: &Image) -> Vec<f32> {
        self.layer.forward(x.data())
    }

    fn param_digest(&self) -> [u8; 32] {
        digest_params([&self.layer.weight[..], &self.layer.bias[..]])
    }
}

/// Emits the same logits for every input.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantClassifier {
    pub logits: Vec<f32>,
    pub input: Option<(usize, usize)>,
}

impl Classifier for ConstantClassifier {
    fn num_classes(&self) -> usize {
        self.logits.len()
    }

    fn input_dims(&self) -> Option<(usize, usize)> {
        self.input
    }

    fn logits(&self, _x: &Image) -> Vec<f32> {
        self.logits.clone()
    }

    fn param_digest(&self) -> [u8; 32] {
        digest_params([&self.logits[..]])
    }
}
