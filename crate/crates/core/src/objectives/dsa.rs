//! Differentiable siamese augmentation: one parameter draw per call, applied identically to every
//! image of the batch, each op a fixed linear resampling of the pixel grid.
//!
//! Parameter ranges: horizontal flip with probability 0.5; integer crop-shift of up to 12.5% of
//! the side per axis with zero fill; per-axis scale in `[1/1.2, 1.2]`; rotation in `[-15, 15]`
//! degrees; one zeroed square of half the side (rounded) centred anywhere in the image. Scale and
//! rotation sample bilinearly about the image centre with zero padding.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use haba_autograd::{SpatialMap, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{usage, Result};
use crate::rng;

const FLIP_PROB: f64 = 0.5;
const SHIFT_RATIO: f64 = 0.125;
const SCALE_RATIO: f64 = 1.2;
const ROTATE_DEGREES: f64 = 15.0;
const CUTOUT_RATIO: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DsaOp {
    Flip,
    CropShift,
    Scale,
    Rotate,
    Cutout,
}

impl DsaOp {
    pub const ALL: [DsaOp; 5] = [DsaOp::Flip, DsaOp::CropShift, DsaOp::Scale, DsaOp::Rotate, DsaOp::Cutout];

    pub fn as_str(&self) -> &'static str {
        match self {
            DsaOp::Flip => "flip",
            DsaOp::CropShift => "crop-shift",
            DsaOp::Scale => "scale",
            DsaOp::Rotate => "rotate",
            DsaOp::Cutout => "cutout",
        }
    }
}

/// Ordered set of ops; parsed from a comma list such as `flip,crop-shift` (`none` is empty).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DsaPolicy(pub Vec<DsaOp>);

impl DsaPolicy {
    pub fn none() -> Self {
        Self(Vec::new())
    }

    pub fn all() -> Self {
        Self(DsaOp::ALL.to_vec())
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for DsaPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("none");
        }
        let names: Vec<_> = self.0.iter().map(DsaOp::as_str).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for DsaPolicy {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(Self::none());
        }
        s.split(',')
            .map(|name| {
                let name = name.trim();
                DsaOp::ALL.into_iter().find(|o| o.as_str() == name).ok_or_else(|| usage(format!("unknown augmentation {name:?}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DsaTransform {
    Flip(bool),
    Shift { dy: isize, dx: isize },
    Scale { sy: f64, sx: f64 },
    Rotate { radians: f64 },
    Cutout { cy: usize, cx: usize, size: usize },
}

impl DsaTransform {
    /// The resampling realizing this transform, or `None` when it is the identity.
    pub fn to_map(&self, h: usize, w: usize) -> Option<SpatialMap> {
        let hw = (h, w);
        match *self {
            DsaTransform::Flip(false) => None,
            DsaTransform::Flip(true) => Some(SpatialMap::from_pixel_fn(hw, hw, |y, x| Some((y, w - 1 - x)))),
            DsaTransform::Shift { dy: 0, dx: 0 } => None,
            DsaTransform::Shift { dy, dx } => Some(SpatialMap::from_pixel_fn(hw, hw, |y, x| {
                let (sy, sx) = (y as isize - dy, x as isize - dx);
                (sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize).then_some((sy as usize, sx as usize))
            })),
            DsaTransform::Scale { sy, sx } => Some(affine(h, w, [[sx, 0.0], [0.0, sy]])),
            DsaTransform::Rotate { radians } => {
                let (s, c) = radians.sin_cos();
                Some(affine(h, w, [[c, s], [-s, c]]))
            }
            DsaTransform::Cutout { cy, cx, size } => {
                let half = size as isize / 2;
                let inside = |p: usize, centre: usize| {
                    let d = p as isize - centre as isize;
                    d >= -half && d < size as isize - half
                };
                Some(SpatialMap::from_pixel_fn(hw, hw, |y, x| (!(inside(y, cy) && inside(x, cx))).then_some((y, x))))
            }
        }
    }
}

/// Bilinear warp sampling at `theta * p` in centred coordinates normalized to `[-1, 1]`.
fn affine(h: usize, w: usize, theta: [[f64; 2]; 2]) -> SpatialMap {
    let norm = |p: usize, n: usize| (2.0 * p as f64 + 1.0) / n as f64 - 1.0;
    let pixel = |v: f64, n: usize| ((v + 1.0) * n as f64 - 1.0) / 2.0;
    SpatialMap::bilinear((h, w), (h, w), |y, x| {
        let (ny, nx) = (norm(y, h), norm(x, w));
        let sx = theta[0][0] * nx + theta[0][1] * ny;
        let sy = theta[1][0] * nx + theta[1][1] * ny;
        (pixel(sy, h), pixel(sx, w))
    })
}

/// One draw of every op in a policy.
#[derive(Clone, Debug, PartialEq)]
pub struct DsaParams {
    pub transforms: Vec<DsaTransform>,
}

impl DsaParams {
    pub fn sample(policy: &DsaPolicy, h: usize, w: usize, r: &mut rng::Rng) -> Self {
        let transforms = policy
            .0
            .iter()
            .map(|op| match op {
                DsaOp::Flip => DsaTransform::Flip(r.gen_bool(FLIP_PROB)),
                DsaOp::CropShift => {
                    let my = (h as f64 * SHIFT_RATIO).round() as isize;
                    let mx = (w as f64 * SHIFT_RATIO).round() as isize;
                    DsaTransform::Shift { dy: r.gen_range(-my..=my), dx: r.gen_range(-mx..=mx) }
                }
                DsaOp::Scale => DsaTransform::Scale {
                    sy: r.gen_range(1.0 / SCALE_RATIO..SCALE_RATIO),
                    sx: r.gen_range(1.0 / SCALE_RATIO..SCALE_RATIO),
                },
                DsaOp::Rotate => DsaTransform::Rotate { radians: r.gen_range(-ROTATE_DEGREES..ROTATE_DEGREES).to_radians() },
                DsaOp::Cutout => DsaTransform::Cutout {
                    cy: r.gen_range(0..h),
                    cx: r.gen_range(0..w),
                    size: ((h.min(w) as f64) * CUTOUT_RATIO + 0.5) as usize,
                },
            })
            .collect();
        Self { transforms }
    }
}

/// Applies `params` in order to `[n, h, w, c]` images.
pub fn apply_dsa(images: &Var, params: &DsaParams) -> Var {
    let (h, w) = (images.shape()[1], images.shape()[2]);
    params.transforms.iter().fold(images.clone(), |x, t| match t.to_map(h, w) {
        Some(map) => x.resample(&Rc::new(map)),
        None => x,
    })
}

/// Draws parameters from `seed` and applies them to the whole batch.
pub fn dsa_augment(images: &Var, seed: u64, policy: &DsaPolicy) -> Var {
    if policy.is_empty() {
        return images.clone();
    }
    let mut r = rng::stream(seed, "dsa", 0);
    let params = DsaParams::sample(policy, images.shape()[1], images.shape()[2], &mut r);
    apply_dsa(images, &params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use haba_autograd::finite_diff::check_gradients;
    use haba_autograd::Tensor;

    fn images(n: usize) -> Var {
        Var::constant(Tensor::from_fn([n, 6, 6, 2], |i| ((i * 7) % 11) as f64 / 11.0))
    }

    #[test]
    fn empty_policy_is_identity_and_parsing() {
        let x = images(2);
        assert_eq!(dsa_augment(&x, 3, &DsaPolicy::none()).value(), x.value());
        let p: DsaPolicy = "flip, crop-shift,rotate".parse().unwrap();
        assert_eq!(p.0, vec![DsaOp::Flip, DsaOp::CropShift, DsaOp::Rotate]);
        assert_eq!(p.to_string().parse::<DsaPolicy>().unwrap(), p);
        assert!("blur".parse::<DsaPolicy>().is_err());
        assert!("none".parse::<DsaPolicy>().unwrap().is_empty());
    }

    #[test]
    fn deterministic_per_seed() {
        let x = images(3);
        let a = dsa_augment(&x, 11, &DsaPolicy::all());
        let b = dsa_augment(&x, 11, &DsaPolicy::all());
        assert_eq!(a.value(), b.value());
        let differs = (0..20).any(|s| dsa_augment(&x, s, &DsaPolicy::all()).value() != a.value());
        assert!(differs);
    }

    #[test]
    fn flip_is_an_involution() {
        let x = images(2);
        let p = DsaParams { transforms: vec![DsaTransform::Flip(true)] };
        let twice = apply_dsa(&apply_dsa(&x, &p), &p);
        assert!(twice.value().max_abs_diff(x.value()) < 1e-6);
        assert!(apply_dsa(&x, &p).value().max_abs_diff(x.value()) > 0.0);
    }

    #[test]
    fn same_transform_for_every_image() {
        // image 1 is image 0 scaled by 3, so a shared transform keeps the ratio exactly
        let base = Tensor::from_fn([1, 6, 6, 1], |i| (i as f64 * 0.37).sin());
        let x = Var::constant(Tensor::stack(&[base.reshape([6, 6, 1]), base.map(|v| 3.0 * v).reshape([6, 6, 1])]));
        for seed in 0..5 {
            let y = dsa_augment(&x, seed, &DsaPolicy::all());
            let v = y.value().data();
            for p in 0..36 {
                assert!((v[36 + p] - 3.0 * v[p]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unit_scale_and_zero_rotation_are_identity() {
        let x = images(1);
        for t in [DsaTransform::Scale { sy: 1.0, sx: 1.0 }, DsaTransform::Rotate { radians: 0.0 }] {
            let y = apply_dsa(&x, &DsaParams { transforms: vec![t] });
            assert!(y.value().max_abs_diff(x.value()) < 1e-12);
        }
        let cut = DsaTransform::Cutout { cy: 0, cx: 0, size: 3 };
        let y = apply_dsa(&x, &DsaParams { transforms: vec![cut] });
        let zeros = y.value().data().iter().zip(x.value().data()).filter(|(a, b)| **a == 0.0 && **b != 0.0).count();
        assert!(zeros > 0);
    }

    #[test]
    fn augmentation_is_differentiable() {
        let mut r = rng::seeded(2);
        let params = DsaParams::sample(&DsaPolicy::all(), 4, 4, &mut r);
        let x = Tensor::from_fn([2, 4, 4, 1], |i| (i as f64).cos());
        let report = check_gradients(|v| apply_dsa(&v[0], &params).square().sum(), &[x], 1e-6);
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    proptest::proptest! {
        #[test]
        fn batch_rows_match_single_image_calls(vals in proptest::collection::vec(-1.0f64..1.0, 3 * 36), seed in 0u64..1000) {
            let x = Var::constant(Tensor::new([3, 6, 6, 1], vals));
            let batch = dsa_augment(&x, seed, &DsaPolicy::all());
            for i in 0..3 {
                let alone = dsa_augment(&x.index_select(&[i]), seed, &DsaPolicy::all());
                let row = &batch.value().data()[i * 36..(i + 1) * 36];
                let diff = row.iter().zip(alone.value().data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                proptest::prop_assert!(diff < 1e-12, "row {} differs by {}", i, diff);
            }
        }
    }
}
