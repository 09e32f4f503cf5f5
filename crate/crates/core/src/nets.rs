//! Network zoo for adversaries, matching objectives and downstream evaluation.
//!
//! Every architecture is described by a flat parameter layout (`layout`) and a forward pass that
//! consumes parameters in that order. Layer tables, with `w` the width and `IN` instance
//! normalization without affine parameters:
//!
//! | arch        | layers |
//! |-------------|--------|
//! | `convnet`   | `depth` x [conv3(w) IN ReLU avgpool2], flatten, fc |
//! | `resnet_s`  | conv3(w) IN ReLU, res(w), avgpool2, res(2w, 1x1 shortcut), avgpool2, global mean, fc |
//! | `vgg_s`     | conv3(w) IN ReLU pool, conv3(2w) IN ReLU pool, 2 x conv3(4w) IN ReLU, pool, flatten, fc |
//! | `alexnet_s` | conv5(w) ReLU pool, conv5(2w) ReLU pool, 2 x conv3(2w) ReLU, pool, flatten, fc(4w) ReLU, fc |
//!
//! `res(k)` is conv3(k) IN ReLU conv3(k) IN plus the (projected) input, then ReLU. `depth` only
//! affects `convnet`. The penultimate feature is the input of the last fc layer.

use std::fmt;
use std::str::FromStr;

use haba_autograd::nn::{avg_pool2, conv2d, flatten, global_avg_pool, instance_norm, linear};
use haba_autograd::{no_grad, Patch, Tensor, Var};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};
use crate::rng;

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Convnet,
    ResnetS,
    VggS,
    AlexnetS,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::Convnet, Arch::ResnetS, Arch::VggS, Arch::AlexnetS];

    pub fn as_str(&self) -> &'static str {
        match self {
            Arch::Convnet => "convnet",
            Arch::ResnetS => "resnet_s",
            Arch::VggS => "vgg_s",
            Arch::AlexnetS => "alexnet_s",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| usage(format!("unknown architecture {s:?} (convnet, resnet_s, vgg_s, alexnet_s)")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    #[default]
    Instance,
}

/// Architecture choice without the data-dependent input shape and class count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub arch: Arch,
    pub depth: usize,
    pub width: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { arch: Arch::Convnet, depth: 3, width: 128 }
    }
}

impl NetConfig {
    pub fn spec(&self, input_shape: [usize; 3], class_count: usize) -> ModelSpec {
        ModelSpec { arch: self.arch, depth: self.depth, width: self.width, input_shape, class_count, norm: Norm::Instance }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub depth: usize,
    pub width: usize,
    /// `[h, w, c]`.
    pub input_shape: [usize; 3],
    pub class_count: usize,
    #[serde(default)]
    pub norm: Norm,
}

impl ModelSpec {
    /// The 3-block, 128-channel ConvNet.
    pub fn convnet(input_shape: [usize; 3], class_count: usize) -> Self {
        Self { arch: Arch::Convnet, depth: 3, width: 128, input_shape, class_count, norm: Norm::Instance }
    }

    pub fn with_arch(&self, arch: Arch) -> Self {
        Self { arch, ..self.clone() }
    }

    pub fn feature_dim(&self) -> Result<usize> {
        let l = self.layout()?;
        Ok(l[l.len() - 2].shape[0])
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.layout()?.iter().map(|p| p.shape.iter().product::<usize>()).sum())
    }

    /// Ordered parameter layout; the last two entries are always the output layer.
    pub fn layout(&self) -> Result<Vec<ParamDef>> {
        let [h, w, c] = self.input_shape;
        if h == 0 || w == 0 || c == 0 || self.width == 0 || self.class_count == 0 {
            return Err(usage(format!("model spec has a zero dimension: {self:?}")));
        }
        let k = self.width;
        let mut l = Layout::default();
        let (fh, fw, feat) = match self.arch {
            Arch::Convnet => {
                if self.depth == 0 {
                    return Err(usage("convnet depth must be at least 1"));
                }
                let (mut sh, mut sw, mut cin) = (h, w, c);
                for i in 0..self.depth {
                    l.conv(format!("conv{i}"), 3, cin, k);
                    cin = k;
                    (sh, sw) = (sh / 2, sw / 2);
                    if sh == 0 || sw == 0 {
                        return Err(usage(format!("input {h}x{w} too small for convnet depth {}", self.depth)));
                    }
                }
                (sh, sw, sh * sw * k)
            }
            Arch::ResnetS => {
                l.conv("stem".into(), 3, c, k);
                l.conv("res1.a".into(), 3, k, k);
                l.conv("res1.b".into(), 3, k, k);
                l.conv("res2.a".into(), 3, k, 2 * k);
                l.conv("res2.b".into(), 3, 2 * k, 2 * k);
                l.conv("res2.proj".into(), 1, k, 2 * k);
                (h / 4, w / 4, 2 * k)
            }
            Arch::VggS => {
                l.conv("conv0".into(), 3, c, k);
                l.conv("conv1".into(), 3, k, 2 * k);
                l.conv("conv2".into(), 3, 2 * k, 4 * k);
                l.conv("conv3".into(), 3, 4 * k, 4 * k);
                (h / 8, w / 8, (h / 8) * (w / 8) * 4 * k)
            }
            Arch::AlexnetS => {
                l.conv("conv0".into(), 5, c, k);
                l.conv("conv1".into(), 5, k, 2 * k);
                l.conv("conv2".into(), 3, 2 * k, 2 * k);
                l.conv("conv3".into(), 3, 2 * k, 2 * k);
                let flat = (h / 8) * (w / 8) * 2 * k;
                l.linear("hidden".into(), flat, 4 * k);
                (h / 8, w / 8, 4 * k)
            }
        };
        if fh == 0 || fw == 0 {
            return Err(usage(format!("input {h}x{w} too small for {}", self.arch)));
        }
        l.linear("fc".into(), feat, self.class_count);
        Ok(l.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDef {
    pub name: String,
    pub shape: Vec<usize>,
    /// Fan-in for weights; `None` for biases (zero-initialized).
    pub fan_in: Option<usize>,
    pub is_conv: bool,
}

#[derive(Default)]
struct Layout(Vec<ParamDef>);

impl Layout {
    fn conv(&mut self, name: String, k: usize, cin: usize, cout: usize) {
        self.0.push(ParamDef { name: format!("{name}.w"), shape: vec![k, k, cin, cout], fan_in: Some(k * k * cin), is_conv: true });
        self.0.push(ParamDef { name: format!("{name}.b"), shape: vec![cout], fan_in: None, is_conv: true });
    }

    fn linear(&mut self, name: String, fan_in: usize, out: usize) {
        self.0.push(ParamDef { name: format!("{name}.w"), shape: vec![fan_in, out], fan_in: Some(fan_in), is_conv: false });
        self.0.push(ParamDef { name: format!("{name}.b"), shape: vec![out], fan_in: None, is_conv: false });
    }
}

/// Named parameter tensors in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn total_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inverse of [`flatten`](Self::flatten), using `self` for names and shapes.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.total_count() {
            return Err(usage(format!("{} values for {} parameters", flat.len(), self.total_count())));
        }
        let mut at = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let part = Tensor::new(t.shape(), flat[at..at + t.numel()].to_vec());
                at += t.numel();
                part
            })
            .collect();
        Ok(Self { names: self.names.clone(), tensors })
    }

    pub fn to_vars(&self, requires_grad: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| if requires_grad { Var::param(t.clone()) } else { Var::constant(t.clone()) }).collect()
    }

    pub fn from_vars(&self, vars: &[Var]) -> Self {
        Self { names: self.names.clone(), tensors: vars.iter().map(|v| v.value().clone()).collect() }
    }

    pub fn check_compatible(&self, other: &ModelParams) -> Result<()> {
        let same = self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape());
        if !same {
            return Err(usage("parameter sets differ in names or shapes"));
        }
        Ok(())
    }

    /// `self - lr * grads`, returned as a new value.
    pub fn sgd_step(&self, grads: &ModelParams, lr: f64) -> Result<Self> {
        self.check_compatible(grads)?;
        let tensors = self.tensors.iter().zip(&grads.tensors).map(|(p, g)| p.zip_map(g, |p, g| p - lr * g)).collect();
        Ok(Self { names: self.names.clone(), tensors })
    }

    pub fn sq_distance(&self, other: &ModelParams) -> f64 {
        self.tensors.iter().zip(&other.tensors).map(|(a, b)| a.zip_map(b, |x, y| x - y).sq_norm()).sum()
    }
}

/// Differentiable SGD step on graph values; `lr` may itself be a graph value (shape `[]`).
pub fn sgd_step_vars(params: &[Var], grads: &[Var], lr: &Var) -> Vec<Var> {
    params.iter().zip(grads).map(|(p, g)| p.sub(&g.mul(lr))).collect()
}

pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    let layout = spec.layout()?;
    let mut r = rng::stream(seed, "model-init", 0);
    let mut names = Vec::with_capacity(layout.len());
    let mut tensors = Vec::with_capacity(layout.len());
    for p in layout {
        let t = match p.fan_in {
            None => Tensor::zeros(p.shape.clone()),
            Some(fan_in) => {
                // Kaiming-normal for ReLU convs, LeCun-normal for fully connected layers
                let gain = if p.is_conv { 2.0 } else { 1.0 };
                let dist = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
                Tensor::from_fn(p.shape.clone(), |_| dist.sample(&mut r))
            }
        };
        names.push(p.name);
        tensors.push(t);
    }
    Ok(ModelParams { names, tensors })
}

pub struct FeatureOutput {
    pub logits: Var,
    pub penult: Var,
}

struct Cursor<'a> {
    params: &'a [Var],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self) -> (&'a Var, &'a Var) {
        let pair = (&self.params[self.at], &self.params[self.at + 1]);
        self.at += 2;
        pair
    }

    fn conv(&mut self, x: &Var, k: usize) -> Var {
        let (w, b) = self.take();
        conv2d(x, w, Some(b), Patch::same(k))
    }

    fn conv_in(&mut self, x: &Var, k: usize) -> Var {
        instance_norm(&self.conv(x, k), NORM_EPS)
    }
}

/// Logits and penultimate features for `[n, h, w, c]` images.
pub fn forward(params: &[Var], spec: &ModelSpec, images: &Var) -> Result<FeatureOutput> {
    let layout = spec.layout()?;
    if params.len() != layout.len() || params.iter().zip(&layout).any(|(p, d)| p.shape() != d.shape.as_slice()) {
        return Err(usage(format!("parameters do not match the {} layout", spec.arch)));
    }
    let s = images.shape();
    if s.len() != 4 || s[1..] != spec.input_shape {
        return Err(usage(format!("images {:?} do not match model input {:?}", s, spec.input_shape)));
    }
    let mut cur = Cursor { params, at: 0 };
    let penult = match spec.arch {
        Arch::Convnet => {
            let mut x = images.clone();
            for _ in 0..spec.depth {
                x = avg_pool2(&cur.conv_in(&x, 3).relu());
            }
            flatten(&x)
        }
        Arch::ResnetS => {
            let x = cur.conv_in(images, 3).relu();
            let y = cur.conv_in(&x, 3).relu();
            let y = cur.conv_in(&y, 3);
            let x = avg_pool2(&y.add(&x).relu());
            let y = cur.conv_in(&x, 3).relu();
            let y = cur.conv_in(&y, 3);
            let shortcut = cur.conv(&x, 1);
            global_avg_pool(&avg_pool2(&y.add(&shortcut).relu()))
        }
        Arch::VggS => {
            let x = avg_pool2(&cur.conv_in(images, 3).relu());
            let x = avg_pool2(&cur.conv_in(&x, 3).relu());
            let x = cur.conv_in(&x, 3).relu();
            flatten(&avg_pool2(&cur.conv_in(&x, 3).relu()))
        }
        Arch::AlexnetS => {
            let x = avg_pool2(&cur.conv(images, 5).relu());
            let x = avg_pool2(&cur.conv(&x, 5).relu());
            let x = cur.conv(&x, 3).relu();
            let x = cur.conv(&x, 3).relu();
            let x = flatten(&avg_pool2(&x));
            let (w, b) = cur.take();
            linear(&x, w, Some(b)).relu()
        }
    };
    let (w, b) = cur.take();
    Ok(FeatureOutput { logits: linear(&penult, w, Some(b)), penult })
}

/// Argmax predictions, evaluated in chunks without recording a graph.
pub fn predict(params: &ModelParams, spec: &ModelSpec, images: &Tensor, chunk: usize) -> Result<Vec<usize>> {
    no_grad(|| {
        let vars = params.to_vars(false);
        let n = images.shape()[0];
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let len = chunk.max(1).min(n - start);
            let logits = forward(&vars, spec, &Var::constant(images.slice_rows(start, len)))?.logits;
            let k = spec.class_count;
            for row in logits.value().data().chunks_exact(k) {
                let best = row.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
                out.push(best.0);
            }
            start += len;
        }
        Ok(out)
    })
}

/// Fraction of correctly classified images.
pub fn accuracy(params: &ModelParams, spec: &ModelSpec, images: &Tensor, labels: &[usize]) -> Result<f64> {
    let pred = predict(params, spec, images, 256)?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}
