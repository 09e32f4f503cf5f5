//! Procedural blob images for desk-scale runs and CI.
//!
//! Each class has a fixed prototype made of a few Gaussian bumps. Samples are the
//! prototype, optionally shifted, with a random contrast and additive noise, clipped to
//! `[0, 1]`.

use haba_autograd::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ImageDataset, Split};
use crate::error::{usage, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub side: usize,
    pub channels: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub bumps_per_class: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    /// Samples are translated by up to this many pixels along each axis.
    pub max_shift: usize,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            side: 8,
            channels: 1,
            train_per_class: 100,
            test_per_class: 50,
            bumps_per_class: 2,
            noise: 0.2,
            max_shift: 0,
            seed: 0,
        }
    }
}

/// Bump centres sit on distinct cells of a coarse 4x4 lattice; no two classes share the same
/// cell set.
fn prototypes(spec: &BlobSpec) -> Vec<Vec<f64>> {
    let s = spec.side;
    let cell = s as f64 / 4.0;
    let mut r = rng::stream(spec.seed, "blob-prototypes", 0);
    let bumps = spec.bumps_per_class.clamp(1, 16);
    let mut used: Vec<Vec<usize>> = Vec::new();
    (0..spec.classes)
        .map(|_| {
            let mut cells: Vec<usize>;
            let mut tries = 0;
            loop {
                cells = rand::seq::index::sample(&mut r, 16, bumps).into_vec();
                cells.sort_unstable();
                tries += 1;
                if !used.contains(&cells) || tries > 100 {
                    break;
                }
            }
            used.push(cells.clone());
            let mut img = vec![0.0; s * s * spec.channels];
            for &k in &cells {
                let cy = (k / 4) as f64 * cell + cell / 2.0 - 0.5;
                let cx = (k % 4) as f64 * cell + cell / 2.0 - 0.5;
                let width = r.gen_range(0.8..1.2) * cell / 2.0;
                let tint: Vec<f64> = (0..spec.channels).map(|_| r.gen_range(0.6..1.0)).collect();
                for y in 0..s {
                    for x in 0..s {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        let v = (-d2 / (2.0 * width * width)).exp();
                        for (c, t) in tint.iter().enumerate() {
                            img[(y * s + x) * spec.channels + c] += v * t;
                        }
                    }
                }
            }
            img.iter().map(|v| v.min(1.0)).collect()
        })
        .collect()
}

pub fn generate_blobs(spec: &BlobSpec, split: Split) -> Result<ImageDataset> {
    if spec.classes == 0 || spec.side == 0 || spec.channels == 0 {
        return Err(usage("blob spec needs at least one class, pixel and channel"));
    }
    let per_class = match split {
        Split::Train => spec.train_per_class,
        Split::Test => spec.test_per_class,
    };
    let protos = prototypes(spec);
    let (s, ch) = (spec.side, spec.channels);
    let mut r = rng::stream(spec.seed, "blob-samples", split as u64);
    let mut data = Vec::with_capacity(spec.classes * per_class * s * s * ch);
    let mut labels = Vec::with_capacity(spec.classes * per_class);
    for _ in 0..per_class {
        for (class, proto) in protos.iter().enumerate() {
            let m = spec.max_shift as isize;
            let dy: isize = r.gen_range(-m..=m);
            let dx: isize = r.gen_range(-m..=m);
            let contrast = r.gen_range(0.6..1.2);
            for y in 0..s as isize {
                for x in 0..s as isize {
                    let (sy, sx) = (y - dy, x - dx);
                    for c in 0..ch {
                        let base = if sy >= 0 && sx >= 0 && sy < s as isize && sx < s as isize {
                            proto[(sy as usize * s + sx as usize) * ch + c]
                        } else {
                            0.0
                        };
                        let n: f64 = StandardNormal.sample(&mut r);
                        data.push((0.15 + contrast * base * 0.7 + spec.noise * n).clamp(0.0, 1.0));
                    }
                }
            }
            labels.push(class);
        }
    }
    let n = labels.len();
    ImageDataset::new("blobs", Tensor::new([n, s, s, ch], data), labels, spec.classes, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_balance() {
        let ds = generate_blobs(&BlobSpec::default(), Split::Train).unwrap();
        assert_eq!(ds.len(), 1000);
        assert_eq!(ds.image_shape(), [8, 8, 1]);
        for c in 0..10 {
            assert_eq!(ds.indices_of_class(c).len(), 100);
        }
        assert!(ds.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn deterministic_and_splits_differ() {
        let spec = BlobSpec { train_per_class: 3, test_per_class: 3, ..Default::default() };
        let a = generate_blobs(&spec, Split::Train).unwrap();
        let b = generate_blobs(&spec, Split::Train).unwrap();
        let t = generate_blobs(&spec, Split::Test).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.images, t.images);
    }
}
