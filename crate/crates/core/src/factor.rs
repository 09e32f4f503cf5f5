//! The factorized synthetic dataset: labelled bases, hallucinator networks and their composition.
//!
//! A hallucinator maps a basis to an image in three stages: an encoder of `depth` 3x3 conv+ReLU
//! blocks (`c -> c'' -> ... -> c''`), an element-wise affine map `sigma * f + mu` with full
//! `[h, w, c'']` tensors, and a decoder of `depth` 3x3 conv blocks back to `c` channels, where
//! every decoder block except the last is followed by ReLU. Depth 0 is the affine map alone and
//! requires `c'' = c`.
//!
//! Before the encoder a basis of shape `[h', w', c']` is bilinearly resized to `h x w` and, when
//! `c' = 1 < c`, broadcast across channels.
//!
//! Composed grids are ordered basis-major: row `r` of a grid over `basis_ids x hall_ids` is the
//! pair `(basis_ids[r / hall_ids.len()], hall_ids[r % hall_ids.len()])`.

use std::rc::Rc;

use haba_autograd::nn::conv2d;
use haba_autograd::{no_grad, Patch, SpatialMap, Tensor, Var};
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{sample_class_balanced, ImageDataset};
use crate::error::{usage, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisInit {
    /// Class-balanced real samples (resized and channel-averaged as needed).
    #[default]
    Real,
    /// Standard normal pixels.
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FactorConfig {
    pub bases_per_class: usize,
    /// `|H|`; per class when `class_independent` is set.
    pub num_hallucinators: usize,
    pub class_independent: bool,
    /// `h' = w'`; defaults to the image side.
    pub basis_side: Option<usize>,
    /// `c'`; 1 or the image channel count, defaults to the latter.
    pub basis_channels: Option<usize>,
    pub hall_depth: usize,
    /// `c''`.
    pub hall_channels: usize,
    pub basis_init: BasisInit,
    /// Initial synthetic inner learning rate (stored as its log).
    pub lr_init: f64,
}

impl Default for FactorConfig {
    fn default() -> Self {
        Self {
            bases_per_class: 1,
            num_hallucinators: 5,
            class_independent: false,
            basis_side: None,
            basis_channels: None,
            hall_depth: 1,
            hall_channels: 3,
            basis_init: BasisInit::Real,
            lr_init: 0.01,
        }
    }
}

impl FactorConfig {
    pub fn geometry(&self, image_shape: [usize; 3]) -> Result<Geometry> {
        let [h, w, c] = image_shape;
        if h != w {
            return Err(usage(format!("non-square images {h}x{w} are not supported")));
        }
        let side = self.basis_side.unwrap_or(h);
        let channels = self.basis_channels.unwrap_or(c);
        if side == 0 || side > h {
            return Err(usage(format!("basis side {side} must be in [1, {h}]")));
        }
        if channels != 1 && channels != c {
            return Err(usage(format!("basis channels {channels} must be 1 or {c}")));
        }
        if self.hall_channels == 0 {
            return Err(usage("hallucinator channels must be at least 1"));
        }
        if self.hall_depth == 0 && self.hall_channels != c {
            return Err(usage(format!("a depth-0 hallucinator needs c'' = c = {c}, got {}", self.hall_channels)));
        }
        if self.bases_per_class == 0 || self.num_hallucinators == 0 {
            return Err(usage("bases per class and hallucinator count must be at least 1"));
        }
        Ok(Geometry {
            image_shape,
            basis_shape: [side, side, channels],
            depth: self.hall_depth,
            channels: self.hall_channels,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub image_shape: [usize; 3],
    pub basis_shape: [usize; 3],
    pub depth: usize,
    /// `c''`.
    pub channels: usize,
}

struct HallParam {
    name: String,
    shape: Vec<usize>,
    fan_in: Option<usize>,
    relu_after: bool,
}

impl Geometry {
    fn layout(&self) -> Vec<HallParam> {
        let [h, w, c] = self.image_shape;
        let cc = self.channels;
        let mut out = Vec::new();
        let conv = |out: &mut Vec<HallParam>, name: String, cin: usize, cout: usize, relu: bool| {
            out.push(HallParam { name: format!("{name}.w"), shape: vec![3, 3, cin, cout], fan_in: Some(9 * cin), relu_after: relu });
            out.push(HallParam { name: format!("{name}.b"), shape: vec![cout], fan_in: None, relu_after: relu });
        };
        for i in 0..self.depth {
            conv(&mut out, format!("enc{i}"), if i == 0 { c } else { cc }, cc, true);
        }
        for name in ["sigma", "mu"] {
            out.push(HallParam { name: name.into(), shape: vec![h, w, cc], fan_in: None, relu_after: false });
        }
        for i in 0..self.depth {
            let last = i + 1 == self.depth;
            conv(&mut out, format!("dec{i}"), cc, if last { c } else { cc }, !last);
        }
        out
    }

    pub fn hallucinator_param_names(&self) -> Vec<String> {
        self.layout().into_iter().map(|p| p.name).collect()
    }

    pub fn hallucinator_param_count(&self) -> usize {
        self.layout().iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }

    pub fn basis_elements(&self) -> usize {
        self.basis_shape.iter().product()
    }

    pub fn image_elements(&self) -> usize {
        self.image_shape.iter().product()
    }

    /// Resize and channel broadcast of `[n, h', w', c']` bases to `[n, h, w, c]`.
    pub fn preprocess(&self, bases: &Var) -> Var {
        let [h, w, c] = self.image_shape;
        let [bh, bw, bc] = self.basis_shape;
        let mut x = bases.clone();
        if (bh, bw) != (h, w) {
            x = x.resample(&Rc::new(resize_map((bh, bw), (h, w))));
        }
        if bc == 1 && c > 1 {
            let n = x.shape()[0];
            x = x.broadcast_to(&[n, h, w, c]);
        }
        x
    }

    /// Runs one hallucinator, given its parameters in layout order, on preprocessed images.
    pub fn hallucinate(&self, params: &[Var], x: &Var) -> Var {
        let layout = self.layout();
        debug_assert_eq!(params.len(), layout.len());
        let mut x = x.clone();
        let mut i = 0;
        while i < layout.len() {
            if layout[i].name == "sigma" {
                x = x.mul(&params[i]).add(&params[i + 1]);
                i += 2;
                continue;
            }
            x = conv2d(&x, &params[i], Some(&params[i + 1]), Patch::same(3));
            if layout[i].relu_after {
                x = x.relu();
            }
            i += 2;
        }
        x
    }
}

/// Half-pixel-centred bilinear resize with edge clamping.
pub fn resize_map(from: (usize, usize), to: (usize, usize)) -> SpatialMap {
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let s = (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
        s.clamp(0.0, (n_in - 1) as f64)
    };
    SpatialMap::bilinear(from, to, |y, x| (coord(y, from.0, to.0), coord(x, from.1, to.1)))
}

/// Parameters of one hallucinator in [`Geometry`] layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct Hallucinator {
    pub tensors: Vec<Tensor>,
}

impl Hallucinator {
    /// Random convs, `sigma = 1`, `mu = 0`.
    pub fn init(geom: &Geometry, rng: &mut rng::Rng) -> Self {
        let tensors = geom
            .layout()
            .into_iter()
            .map(|p| match (p.name.as_str(), p.fan_in) {
                ("sigma", _) => Tensor::ones(p.shape),
                (_, None) => Tensor::zeros(p.shape),
                (_, Some(fan_in)) => {
                    let gain = if p.relu_after { 2.0 } else { 1.0 };
                    let dist = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
                    Tensor::from_fn(p.shape, |_| dist.sample(rng))
                }
            })
            .collect();
        Self { tensors }
    }

    pub fn sigma(&self, geom: &Geometry) -> &Tensor {
        &self.tensors[2 * geom.depth]
    }

    pub fn mu(&self, geom: &Geometry) -> &Tensor {
        &self.tensors[2 * geom.depth + 1]
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    fn matches(&self, geom: &Geometry) -> bool {
        let layout = geom.layout();
        layout.len() == self.tensors.len() && layout.iter().zip(&self.tensors).all(|(p, t)| p.shape == t.shape())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorMeta {
    pub dataset: String,
    pub config: FactorConfig,
    #[serde(default)]
    pub zca_fingerprint: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedDataset {
    pub geometry: Geometry,
    pub class_count: usize,
    /// `|H|` per group: the whole set when shared, per class when class-independent.
    pub num_hallucinators: usize,
    pub class_independent: bool,
    /// Shared: `|H|` entries. Class-independent: `C * |H|`, with class `y`'s `j`-th at `y * |H| + j`.
    pub hallucinators: Vec<Hallucinator>,
    /// `[|B|, h', w', c']`.
    pub bases: Tensor,
    pub labels: Vec<usize>,
    /// Log of the learnable synthetic inner learning rate.
    pub synth_lr_log: f64,
    pub meta: FactorMeta,
}

impl FactorizedDataset {
    pub fn num_bases(&self) -> usize {
        self.labels.len()
    }

    /// Index into `hallucinators` of local hallucinator `j` for a basis of class `label`.
    pub fn global_hall(&self, label: usize, j: usize) -> usize {
        if self.class_independent {
            label * self.num_hallucinators + j
        } else {
            j
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        let n = self.labels.len();
        if n == 0 || self.num_hallucinators == 0 {
            return Err(usage("a factorized dataset needs at least one basis and one hallucinator"));
        }
        let mut bshape = vec![n];
        bshape.extend(g.basis_shape);
        if self.bases.shape() != bshape.as_slice() {
            return Err(usage(format!("bases have shape {:?}, expected {:?}", self.bases.shape(), bshape)));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.class_count) {
            return Err(usage(format!("basis label {l} outside [0, {})", self.class_count)));
        }
        let groups = if self.class_independent { self.class_count } else { 1 };
        if self.hallucinators.len() != groups * self.num_hallucinators {
            return Err(usage(format!("{} hallucinators, expected {}", self.hallucinators.len(), groups * self.num_hallucinators)));
        }
        if let Some(i) = self.hallucinators.iter().position(|h| !h.matches(g)) {
            return Err(usage(format!("hallucinator {i} does not match the configured architecture")));
        }
        if !self.bases.is_finite() || !self.synth_lr_log.is_finite() {
            return Err(usage("factorized dataset contains non-finite values"));
        }
        Ok(())
    }

    /// Rounds every stored value to `f32`, the on-disk precision.
    pub fn quantize(&mut self) {
        self.bases = self.bases.to_f32_precision();
        for h in &mut self.hallucinators {
            for t in &mut h.tensors {
                *t = t.to_f32_precision();
            }
        }
        self.synth_lr_log = self.synth_lr_log as f32 as f64;
    }

    /// Short digest of all stored values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |t: &Tensor| {
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        };
        feed(&self.bases);
        for hall in &self.hallucinators {
            hall.tensors.iter().for_each(&mut feed);
        }
        for l in &self.labels {
            h.update((*l as u64).to_le_bytes());
        }
        h.update(self.synth_lr_log.to_le_bytes());
        hex::encode(&h.finalize()[..16])
    }

    pub fn count_parameters(&self) -> BudgetReport {
        BudgetReport::new(&self.geometry, self.hallucinators.len(), self.num_bases(), self.class_count)
    }

    /// Basis-major `(basis, local hallucinator)` pairs.
    pub fn grid(basis_ids: &[usize], hall_ids: &[usize]) -> Vec<(usize, usize)> {
        basis_ids.iter().flat_map(|&b| hall_ids.iter().map(move |&j| (b, j))).collect()
    }

    /// Composition of arbitrary pairs without recording a graph.
    pub fn compose_pairs(&self, pairs: &[(usize, usize)]) -> Result<ComposedBatch> {
        no_grad(|| {
            let vars = FactorVars::new(self, &(0..self.hallucinators.len()).collect::<Vec<_>>(), false);
            compose_pairs_vars(self, &vars, pairs)
        })
    }

    /// Single image `[h, w, c]` from basis `basis` and local hallucinator `j`.
    pub fn compose(&self, basis: usize, j: usize) -> Result<Tensor> {
        let [h, w, c] = self.geometry.image_shape;
        Ok(self.compose_pairs(&[(basis, j)])?.images.value().reshape([h, w, c]))
    }

    pub fn compose_batch(&self, basis_ids: &[usize], hall_ids: &[usize]) -> Result<ComposedBatch> {
        self.compose_pairs(&Self::grid(basis_ids, hall_ids))
    }
}

/// Graph handles for the bases, a chosen subset of hallucinators, and `synth_lr_log`.
pub struct FactorVars {
    pub bases: Var,
    /// `(global hallucinator index, parameters)`, sorted by index.
    pub halls: Vec<(usize, Vec<Var>)>,
    pub synth_lr_log: Var,
}

impl FactorVars {
    /// `halls` are global indices; duplicates are ignored.
    pub fn new(fd: &FactorizedDataset, halls: &[usize], requires_grad: bool) -> Self {
        let make = |t: &Tensor| if requires_grad { Var::param(t.clone()) } else { Var::constant(t.clone()) };
        let mut ids = halls.to_vec();
        ids.sort_unstable();
        ids.dedup();
        Self {
            bases: make(&fd.bases),
            halls: ids.into_iter().map(|g| (g, fd.hallucinators[g].tensors.iter().map(make).collect())).collect(),
            synth_lr_log: make(&Tensor::scalar(fd.synth_lr_log)),
        }
    }

    pub fn hall(&self, global: usize) -> Option<&[Var]> {
        self.halls.binary_search_by_key(&global, |(g, _)| *g).ok().map(|i| self.halls[i].1.as_slice())
    }
}

/// Composed images with their index bookkeeping.
#[derive(Clone)]
pub struct ComposedBatch {
    /// `[pairs, h, w, c]`.
    pub images: Var,
    pub labels: Vec<usize>,
    pub basis_index: Vec<usize>,
    /// Local hallucinator index `j` in `[0, |H|)`.
    pub hall_index: Vec<usize>,
    /// Index into `FactorizedDataset::hallucinators`.
    pub hall_global: Vec<usize>,
}

impl ComposedBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Composes `pairs` of `(basis, local hallucinator)` through the graph handles in `vars`, so the
/// result is differentiable with respect to whatever `vars` tracks.
pub fn compose_pairs_vars(fd: &FactorizedDataset, vars: &FactorVars, pairs: &[(usize, usize)]) -> Result<ComposedBatch> {
    if pairs.is_empty() {
        return Err(usage("cannot compose an empty set of pairs"));
    }
    let mut hall_global = Vec::with_capacity(pairs.len());
    for &(b, j) in pairs {
        if b >= fd.num_bases() {
            return Err(usage(format!("basis index {b} out of range (|B| = {})", fd.num_bases())));
        }
        if j >= fd.num_hallucinators {
            return Err(usage(format!("hallucinator index {j} out of range (|H| = {})", fd.num_hallucinators)));
        }
        hall_global.push(fd.global_hall(fd.labels[b], j));
    }
    // run each hallucinator once on all of its rows, then restore the requested order
    let mut groups: Vec<usize> = hall_global.clone();
    groups.sort_unstable();
    groups.dedup();
    let mut parts = Vec::with_capacity(groups.len());
    let mut position = vec![0; pairs.len()];
    let mut offset = 0;
    for &g in &groups {
        let params = vars.hall(g).ok_or_else(|| usage(format!("hallucinator {g} is not tracked")))?;
        let rows: Vec<usize> = (0..pairs.len()).filter(|&r| hall_global[r] == g).collect();
        for (k, &r) in rows.iter().enumerate() {
            position[r] = offset + k;
        }
        offset += rows.len();
        let basis_rows: Vec<usize> = rows.iter().map(|&r| pairs[r].0).collect();
        let x = fd.geometry.preprocess(&vars.bases.index_select(&basis_rows));
        parts.push(fd.geometry.hallucinate(params, &x));
    }
    let stacked = if parts.len() == 1 { parts.pop().unwrap() } else { Var::concat(&parts) };
    let identity = position.iter().enumerate().all(|(i, &p)| i == p);
    let images = if identity { stacked } else { stacked.index_select(&position) };
    Ok(ComposedBatch {
        images,
        labels: pairs.iter().map(|&(b, _)| fd.labels[b]).collect(),
        basis_index: pairs.iter().map(|&(b, _)| b).collect(),
        hall_index: pairs.iter().map(|&(_, j)| j).collect(),
        hall_global,
    })
}

/// Class-balanced bases (real or noise), fresh hallucinators, `synth_lr_log = ln(lr_init)`.
pub fn init_factorization(cfg: &FactorConfig, data: &ImageDataset, seed: u64) -> Result<FactorizedDataset> {
    let geometry = cfg.geometry(data.image_shape())?;
    if !(cfg.lr_init > 0.0) {
        return Err(usage(format!("initial synthetic lr must be positive, got {}", cfg.lr_init)));
    }
    let bpc = cfg.bases_per_class;
    let labels: Vec<usize> = (0..data.class_count).flat_map(|c| std::iter::repeat(c).take(bpc)).collect();
    let n = labels.len();
    let [bh, bw, bc] = geometry.basis_shape;
    let bases = match cfg.basis_init {
        BasisInit::Noise => {
            let mut r = rng::stream(seed, "basis-noise", 0);
            Tensor::from_fn([n, bh, bw, bc], |_| StandardNormal.sample(&mut r))
        }
        BasisInit::Real => {
            let idx = sample_class_balanced(data, bpc, seed)?;
            let real = data.gather(&idx);
            let [h, w, c] = data.image_shape();
            let resized = if (bh, bw) != (h, w) {
                no_grad(|| Var::constant(real).resample(&Rc::new(resize_map((h, w), (bh, bw)))).value().clone())
            } else {
                real
            };
            if bc == 1 && c > 1 {
                Tensor::from_fn([n, bh, bw, 1], |i| resized.data()[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
            } else {
                resized
            }
        }
    };
    let groups = if cfg.class_independent { data.class_count } else { 1 };
    let mut r = rng::stream(seed, "hallucinator-init", 0);
    let hallucinators = (0..groups * cfg.num_hallucinators).map(|_| Hallucinator::init(&geometry, &mut r)).collect();
    let mut fd = FactorizedDataset {
        geometry,
        class_count: data.class_count,
        num_hallucinators: cfg.num_hallucinators,
        class_independent: cfg.class_independent,
        hallucinators,
        bases,
        labels,
        synth_lr_log: cfg.lr_init.ln(),
        meta: FactorMeta { dataset: data.name.clone(), config: cfg.clone(), zca_fingerprint: None },
    };
    fd.quantize();
    fd.validate()?;
    Ok(fd)
}

/// Storage accounting for a factorization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub per_hallucinator: usize,
    /// Total hallucinator instances (`C * |H|` when class-independent).
    pub hallucinator_instances: usize,
    pub hallucinator_total: usize,
    pub num_bases: usize,
    pub basis_elements: usize,
    pub basis_total: usize,
    pub total: usize,
    pub class_count: usize,
    /// `h * w * c` of one real image.
    pub image_elements: usize,
    /// `total / image_elements`.
    pub image_equivalents: f64,
}

impl BudgetReport {
    pub fn new(geom: &Geometry, hallucinator_instances: usize, num_bases: usize, class_count: usize) -> Self {
        let per_hallucinator = geom.hallucinator_param_count();
        let hallucinator_total = per_hallucinator * hallucinator_instances;
        let basis_total = geom.basis_elements() * num_bases;
        let total = hallucinator_total + basis_total;
        Self {
            per_hallucinator,
            hallucinator_instances,
            hallucinator_total,
            num_bases,
            basis_elements: geom.basis_elements(),
            basis_total,
            total,
            class_count,
            image_elements: geom.image_elements(),
            image_equivalents: total as f64 / geom.image_elements() as f64,
        }
    }

    /// Whole real images per class that fit in the budget, and whether rounding down was needed.
    pub fn images_per_class(&self) -> (usize, bool) {
        let per_class = self.image_elements * self.class_count;
        (self.total / per_class, self.total % per_class != 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Split;
    use haba_autograd::finite_diff::check_gradients;
    use rand::Rng;

    fn geom(side: usize, c: usize, depth: usize, cc: usize) -> Geometry {
        Geometry { image_shape: [side, side, c], basis_shape: [side, side, c], depth, channels: cc }
    }

    fn toy_data(side: usize, c: usize, classes: usize, per_class: usize) -> ImageDataset {
        let n = classes * per_class;
        let mut r = crate::rng::seeded(17);
        let images = Tensor::from_fn([n, side, side, c], |_| r.gen());
        ImageDataset::new("toy", images, (0..n).map(|i| i % classes).collect(), classes, Split::Train).unwrap()
    }

    #[test]
    fn pinned_parameter_counts() {
        assert_eq!(geom(32, 3, 0, 3).hallucinator_param_count(), 6144);
        assert_eq!(geom(32, 3, 1, 3).hallucinator_param_count(), 6312);
        assert_eq!(geom(32, 3, 1, 8).hallucinator_param_count(), 16827);
        assert_eq!(geom(32, 3, 1, 16).hallucinator_param_count(), 33651);
        for (c, cc) in [(1, 1), (3, 5), (1, 4)] {
            let (h, w) = (6, 6);
            assert_eq!(geom(6, c, 1, cc).hallucinator_param_count(), 2 * h * w * cc + (9 * c * cc + cc) + (9 * cc * c + c));
        }
    }

    fn fd_from(g: Geometry, halls: Vec<Hallucinator>, bases: Tensor, labels: Vec<usize>, classes: usize) -> FactorizedDataset {
        let num = halls.len();
        FactorizedDataset {
            geometry: g,
            class_count: classes,
            num_hallucinators: num,
            class_independent: false,
            hallucinators: halls,
            bases,
            labels,
            synth_lr_log: 0.0,
            meta: FactorMeta { dataset: "toy".into(), config: FactorConfig::default(), zca_fingerprint: None },
        }
    }

    #[test]
    fn depth_zero_affine_cases() {
        let g = geom(4, 3, 0, 3);
        let mut r = crate::rng::seeded(0);
        let ident = Hallucinator::init(&g, &mut r);
        let bases = Tensor::from_fn([2, 4, 4, 3], |i| (i as f64 * 0.7).cos());
        let fd = fd_from(g, vec![ident], bases.clone(), vec![0, 1], 2);
        assert_eq!(fd.compose(1, 0).unwrap(), bases.slice_rows(1, 1).reshape([4, 4, 3]));

        let h = Hallucinator { tensors: vec![Tensor::full([4, 4, 3], 2.0), Tensor::full([4, 4, 3], -1.0)] };
        let fd = fd_from(g, vec![h], Tensor::full([1, 4, 4, 3], 0.5), vec![0], 1);
        assert!(fd.compose(0, 0).unwrap().data().iter().all(|&v| v == 0.0));
    }

    /// Direct loops for a 3x3 same-padded convolution on `[h, w, cin]`.
    fn conv_ref(x: &[f64], h: usize, w: usize, cin: usize, wt: &Tensor, b: &Tensor) -> Vec<f64> {
        let cout = b.numel();
        let mut out = vec![0.0; h * w * cout];
        for y in 0..h {
            for xx in 0..w {
                for o in 0..cout {
                    let mut acc = b.data()[o];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            for i in 0..cin {
                                acc += x[(sy as usize * w + sx as usize) * cin + i] * wt.data()[((ky * 3 + kx) * cin + i) * cout + o];
                            }
                        }
                    }
                    out[(y * w + xx) * cout + o] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn depth_one_matches_direct_convolution() {
        let g = geom(4, 3, 1, 2);
        let mut r = crate::rng::seeded(4);
        let mut hall = Hallucinator::init(&g, &mut r);
        for t in &mut hall.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-1.0..1.0));
        }
        let basis = Tensor::from_fn([1, 4, 4, 3], |_| r.gen_range(-1.0..1.0));
        let fd = fd_from(g, vec![hall.clone()], basis.clone(), vec![0], 1);
        let got = fd.compose(0, 0).unwrap();

        let t = &hall.tensors;
        let f: Vec<f64> = conv_ref(basis.data(), 4, 4, 3, &t[0], &t[1]).into_iter().map(|v| v.max(0.0)).collect();
        let f: Vec<f64> = f.iter().enumerate().map(|(i, v)| v * t[2].data()[i] + t[3].data()[i]).collect();
        let expect = conv_ref(&f, 4, 4, 2, &t[4], &t[5]);
        let diff = got.data().iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn gradients_of_compose_losses() {
        let g = geom(4, 2, 1, 2);
        let mut r = crate::rng::seeded(6);
        let mut hall = Hallucinator::init(&g, &mut r);
        // move sigma/mu away from their init so every path carries signal
        for t in &mut hall.tensors {
            t.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-0.5..0.5));
        }
        let basis = Tensor::from_fn([2, 4, 4, 2], |_| r.gen_range(-1.0..1.0));
        let mut inputs = vec![basis];
        inputs.extend(hall.tensors.iter().cloned());
        let report = check_gradients(
            |v| {
                let y = g.hallucinate(&v[1..], &g.preprocess(&v[0]));
                y.square().sum().add(&y.sum())
            },
            &inputs,
            1e-6,
        );
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn init_is_deterministic_and_balanced() {
        let data = toy_data(4, 3, 10, 3);
        let cfg = FactorConfig { num_hallucinators: 2, ..Default::default() };
        let a = init_factorization(&cfg, &data, 3).unwrap();
        assert_eq!(a, init_factorization(&cfg, &data, 3).unwrap());
        assert_eq!(a.labels, (0..10).collect::<Vec<_>>());
        assert_eq!(a.synth_lr_log, (0.01f64.ln()) as f32 as f64);
        assert!(a.hallucinators.iter().all(|h| h.sigma(&a.geometry).data().iter().all(|&v| v == 1.0)));
        assert!(a.hallucinators.iter().all(|h| h.mu(&a.geometry).data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn grayscale_bases_are_channel_means() {
        let data = toy_data(4, 3, 2, 4);
        let cfg = FactorConfig { basis_channels: Some(1), bases_per_class: 2, ..Default::default() };
        let fd = init_factorization(&cfg, &data, 1).unwrap();
        let idx = sample_class_balanced(&data, 2, 1).unwrap();
        for (b, &i) in idx.iter().enumerate() {
            for p in 0..16 {
                let px = &data.images.data()[(i * 16 + p) * 3..(i * 16 + p) * 3 + 3];
                let mean = (px[0] + px[1] + px[2]) / 3.0;
                assert!((fd.bases.data()[b * 16 + p] - mean).abs() < 1e-6);
            }
        }
        // the broadcast basis feeds all three channels identically
        let x = fd.geometry.preprocess(&Var::constant(fd.bases.slice_rows(0, 1)));
        let v = x.value().data();
        assert!(v.chunks_exact(3).all(|p| p[0] == p[1] && p[1] == p[2]));
    }

    #[test]
    fn downsampled_bases_are_resized_up() {
        let data = toy_data(8, 1, 2, 2);
        let cfg = FactorConfig { basis_side: Some(4), hall_depth: 0, hall_channels: 1, ..Default::default() };
        let fd = init_factorization(&cfg, &data, 0).unwrap();
        assert_eq!(fd.bases.shape(), &[2, 4, 4, 1]);
        assert_eq!(fd.compose(0, 0).unwrap().shape(), &[8, 8, 1]);
        // constant bases stay constant under the resize
        let mut flat = fd.clone();
        flat.bases = Tensor::full([2, 4, 4, 1], 0.3);
        assert!(flat.compose(1, 0).unwrap().data().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn bad_configs_are_usage_errors() {
        let data = toy_data(4, 3, 2, 2);
        for cfg in [
            FactorConfig { hall_depth: 0, hall_channels: 2, ..Default::default() },
            FactorConfig { basis_channels: Some(2), ..Default::default() },
            FactorConfig { basis_side: Some(5), ..Default::default() },
            FactorConfig { bases_per_class: 0, ..Default::default() },
            FactorConfig { num_hallucinators: 0, ..Default::default() },
        ] {
            assert!(matches!(init_factorization(&cfg, &data, 0), Err(crate::Error::Usage(_))), "{cfg:?}");
        }
    }

    #[test]
    fn grid_ordering_and_single_pair() {
        let data = toy_data(4, 1, 3, 2);
        let cfg = FactorConfig { num_hallucinators: 2, hall_channels: 2, ..Default::default() };
        let fd = init_factorization(&cfg, &data, 0).unwrap();
        let batch = fd.compose_batch(&[2, 0, 1], &[1, 0]).unwrap();
        assert_eq!(batch.basis_index, vec![2, 2, 0, 0, 1, 1]);
        assert_eq!(batch.hall_index, vec![1, 0, 1, 0, 1, 0]);
        assert_eq!(batch.labels, batch.basis_index.iter().map(|&b| fd.labels[b]).collect::<Vec<_>>());
        for r in 0..6 {
            let single = fd.compose(batch.basis_index[r], batch.hall_index[r]).unwrap();
            assert!(batch.images.value().slice_rows(r, 1).reshape([4, 4, 1]).max_abs_diff(&single) < 1e-12);
        }
        assert!(fd.compose_batch(&[3], &[0]).is_err());
        assert!(fd.compose_batch(&[0], &[2]).is_err());
    }

    #[test]
    fn full_grid_rows_are_distinct_and_reproducible() {
        let data = toy_data(4, 1, 10, 1);
        let cfg = FactorConfig { num_hallucinators: 5, hall_channels: 2, ..Default::default() };
        let fd = init_factorization(&cfg, &data, 9).unwrap();
        let all_b: Vec<usize> = (0..10).collect();
        let all_h: Vec<usize> = (0..5).collect();
        let a = fd.compose_batch(&all_b, &all_h).unwrap();
        assert_eq!(a.len(), 50);
        let rows: Vec<Vec<u64>> = (0..50).map(|r| a.images.value().slice_rows(r, 1).data().iter().map(|v| v.to_bits()).collect()).collect();
        let mut uniq = rows.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 50);
        let b = init_factorization(&cfg, &data, 9).unwrap().compose_batch(&all_b, &all_h).unwrap();
        assert_eq!(a.images.value(), b.images.value());
    }

    #[test]
    fn class_independent_routing() {
        let data = toy_data(4, 1, 3, 1);
        let cfg = FactorConfig { num_hallucinators: 2, hall_channels: 2, class_independent: true, ..Default::default() };
        let fd = init_factorization(&cfg, &data, 0).unwrap();
        assert_eq!(fd.hallucinators.len(), 6);
        let batch = fd.compose_batch(&[0, 1, 2], &[0, 1]).unwrap();
        assert_eq!(batch.hall_global, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn budget_arithmetic() {
        let g = geom(32, 3, 1, 3);
        let b = BudgetReport::new(&g, 5, 90, 10);
        assert_eq!(b.hallucinator_total, 31_560);
        assert_eq!(b.basis_total, 276_480);
        let (ipc, rounded) = BudgetReport::new(&geom(32, 3, 0, 3), 0, 100, 10).images_per_class();
        assert_eq!((ipc, rounded), (10, false));
    }

    proptest::proptest! {
        #[test]
        fn counts_follow_closed_form(side in 2usize..7, c in 1usize..4, cc in 1usize..5, depth in 0usize..2) {
            let cc = if depth == 0 { c } else { cc };
            let expect = 2 * side * side * cc + depth * ((9 * c * cc + cc) + (9 * cc * c + c));
            proptest::prop_assert_eq!(geom(side, c, depth, cc).hallucinator_param_count(), expect);
        }

        #[test]
        fn grid_has_h_times_b_distinct_images(bpc in 1usize..3, nh in 1usize..4, seed in 0u64..50) {
            let data = toy_data(4, 1, 2, 3);
            // with c'' = 2 a fully dead encoder ReLU occasionally maps two bases to the bias image
            let cfg = FactorConfig { bases_per_class: bpc, num_hallucinators: nh, hall_channels: 6, ..Default::default() };
            let fd = init_factorization(&cfg, &data, seed).unwrap();
            let all: Vec<usize> = (0..fd.num_bases()).collect();
            let halls: Vec<usize> = (0..nh).collect();
            let batch = fd.compose_batch(&all, &halls).unwrap();
            proptest::prop_assert_eq!(batch.len(), nh * fd.num_bases());
            let rows: Vec<&[f64]> = batch.images.value().data().chunks(16).collect();
            for a in 0..rows.len() {
                for b in a + 1..rows.len() {
                    proptest::prop_assert!(rows[a] != rows[b]);
                }
            }
        }
    }
}
