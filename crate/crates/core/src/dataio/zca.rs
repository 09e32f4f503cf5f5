//! ZCA whitening: `x -> (x - mean) W` with `W = U diag(1 / sqrt(lambda + eps)) U^T` from the
//! eigendecomposition of the (unbiased) sample covariance.

use haba_autograd::Tensor;
use nalgebra::{DMatrix, SymmetricEigen};
use sha2::{Digest, Sha256};

use super::ImageDataset;
use crate::error::{usage, Error, Result};

pub const DEFAULT_ZCA_EPSILON: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct ZcaStats {
    pub mean: Vec<f64>,
    /// Symmetric `[dim, dim]` matrix.
    pub whitening: Tensor,
    pub epsilon: f64,
}

impl ZcaStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Inverse of the whitening matrix, via its own eigendecomposition.
    pub fn inverse_whitening(&self) -> Result<Tensor> {
        let d = self.dim();
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, self.whitening.data()));
        if let Some(bad) = eig.eigenvalues.iter().find(|&&l| l <= 0.0) {
            return Err(Error::Numerical(format!("whitening matrix is not positive definite (eigenvalue {bad:e})")));
        }
        let inv = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l))
            * eig.eigenvectors.transpose();
        Ok(Tensor::new([d, d], row_major(&inv)))
    }

    /// `x W^-1 + mean`, restoring the pre-whitening pixel space.
    pub fn unwhiten(&self, images: &Tensor) -> Result<Tensor> {
        let (n, flat) = self.flatten_checked(images)?;
        let mut out = flat.matmul(&self.inverse_whitening()?);
        for row in out.data_mut().chunks_exact_mut(self.dim()) {
            for (v, m) in row.iter_mut().zip(&self.mean) {
                *v += m;
            }
        }
        debug_assert_eq!(out.shape()[0], n);
        Ok(out.reshape(images.shape()))
    }

    /// Short hex digest of the statistics, recorded in checkpoint manifests.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in self.mean.iter().chain(self.whitening.data()) {
            h.update(v.to_le_bytes());
        }
        h.update(self.epsilon.to_le_bytes());
        hex::encode(&h.finalize()[..8])
    }

    fn flatten_checked(&self, images: &Tensor) -> Result<(usize, Tensor)> {
        let n = images.shape().first().copied().unwrap_or(0);
        if n == 0 || images.numel() != n * self.dim() {
            return Err(usage(format!(
                "ZCA of dimension {} cannot apply to images of shape {:?}",
                self.dim(),
                images.shape()
            )));
        }
        Ok((n, images.reshape([n, self.dim()])))
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

pub fn fit_zca(data: &ImageDataset, epsilon: f64) -> Result<ZcaStats> {
    if !(epsilon > 0.0) {
        return Err(usage(format!("ZCA epsilon must be positive, got {epsilon}")));
    }
    let n = data.len();
    if n < 2 {
        return Err(usage("ZCA needs at least two samples"));
    }
    let d = data.image_elements();
    let mut mean = vec![0.0; d];
    for row in data.images.data().chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = Tensor::from_fn([n, d], |i| data.images.data()[i] - mean[i % d]);
    let ct = Tensor::from_fn([d, n], |i| centered.data()[(i % n) * d + i / n]);
    let mut cov = ct.matmul(&centered);
    cov.data_mut().iter_mut().for_each(|v| *v /= (n - 1) as f64);

    let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, cov.data()));
    let scale = eig.eigenvalues.map(|l| 1.0 / (l.max(0.0) + epsilon).sqrt());
    let w = &eig.eigenvectors * DMatrix::from_diagonal(&scale) * eig.eigenvectors.transpose();
    let w = (&w + w.transpose()) * 0.5;
    Ok(ZcaStats { mean, whitening: Tensor::new([d, d], row_major(&w)), epsilon })
}

/// `(x - mean) W`, reshaped back to the input shape.
pub fn apply_zca(stats: &ZcaStats, images: &Tensor) -> Result<Tensor> {
    let (_, mut flat) = stats.flatten_checked(images)?;
    let d = stats.dim();
    for row in flat.data_mut().chunks_exact_mut(d) {
        for (v, m) in row.iter_mut().zip(&stats.mean) {
            *v -= m;
        }
    }
    Ok(flat.matmul(&stats.whitening).reshape(images.shape()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Split;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn dataset(images: Tensor) -> ImageDataset {
        let n = images.shape()[0];
        ImageDataset::new("t", images, vec![0; n], 1, Split::Train).unwrap()
    }

    /// Sample covariance computed directly, independent of the fitting path.
    fn covariance(x: &Tensor) -> Vec<Vec<f64>> {
        let n = x.shape()[0];
        let d = x.numel() / n;
        let rows: Vec<&[f64]> = x.data().chunks_exact(d).collect();
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        (0..d)
            .map(|a| {
                (0..d)
                    .map(|b| rows.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / (n - 1) as f64)
                    .collect()
            })
            .collect()
    }

    #[test]
    fn whitened_random_images_have_identity_covariance() {
        let mut r = crate::rng::seeded(3);
        // correlated pixels: each is a pixel-specific mix of a shared factor and noise
        let images = Tensor::from_fn([500, 4, 4, 1], |_| 0.0);
        let mut data = images.into_data();
        for row in data.chunks_exact_mut(16) {
            let shared: f64 = r.gen();
            for (j, v) in row.iter_mut().enumerate() {
                *v = 0.5 * shared * (j as f64 / 16.0) + 0.5 * r.gen::<f64>();
            }
        }
        let ds = dataset(Tensor::new([500, 4, 4, 1], data));
        let stats = fit_zca(&ds, 1e-6).unwrap();
        let cov = covariance(&apply_zca(&stats, &ds.images).unwrap());
        for (a, row) in cov.iter().enumerate() {
            for (b, &v) in row.iter().enumerate() {
                let target = if a == b { 1.0 } else { 0.0 };
                assert!((v - target).abs() < 0.05, "cov[{a}][{b}] = {v}");
            }
        }
        let w = &stats.whitening;
        for a in 0..16 {
            for b in 0..16 {
                let (x, y) = (w.data()[a * 16 + b], w.data()[b * 16 + a]);
                assert!((x - y).abs() <= 1e-5 * x.abs().max(y.abs()).max(1e-12));
            }
        }
    }

    #[test]
    fn identity_covariance_data_gives_identity_whitening() {
        // +-1 patterns over all 16 sign combinations of 4 pixels: zero mean, identity covariance
        // up to the n/(n-1) factor, corrected below.
        let n = 16;
        let data: Vec<f64> = (0..n).flat_map(|i| (0..4).map(move |b| if i >> b & 1 == 1 { 1.0 } else { -1.0 })).collect();
        let scale = (((n - 1) as f64) / n as f64).sqrt();
        let ds = dataset(Tensor::new([n, 2, 2, 1], data.iter().map(|v| v * scale).collect()));
        let stats = fit_zca(&ds, 1e-9).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                let target = if a == b { 1.0 } else { 0.0 };
                assert!((stats.whitening.data()[a * 4 + b] - target).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn rank_deficient_input_stays_finite() {
        let ds = dataset(Tensor::full([10, 3, 3, 1], 0.4));
        let stats = fit_zca(&ds, 0.1).unwrap();
        let out = apply_zca(&stats, &ds.images).unwrap();
        assert!(out.is_finite() && stats.whitening.is_finite());
    }

    #[test]
    fn usage_errors() {
        let ds = dataset(Tensor::zeros([4, 2, 2, 1]));
        assert!(matches!(fit_zca(&ds, 0.0), Err(Error::Usage(_))));
        assert!(matches!(fit_zca(&dataset(Tensor::zeros([1, 2, 2, 1])), 0.1), Err(Error::Usage(_))));
        let stats = fit_zca(&ds, 0.1).unwrap();
        assert!(matches!(apply_zca(&stats, &Tensor::zeros([2, 3, 3, 1])), Err(Error::Usage(_))));
    }

    #[test]
    fn identity_stats_are_a_no_op_and_batch_independent() {
        let stats = ZcaStats { mean: vec![0.0; 4], whitening: Tensor::from_fn([4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 }), epsilon: 0.1 };
        let x = Tensor::from_fn([3, 2, 2, 1], |i| i as f64 * 0.3);
        assert_eq!(apply_zca(&stats, &x).unwrap(), x);

        let mut r = crate::rng::seeded(9);
        let imgs = Tensor::from_fn([40, 3, 3, 1], |_| StandardNormal.sample(&mut r));
        let fitted = fit_zca(&dataset(imgs.clone()), 0.1).unwrap();
        let all = apply_zca(&fitted, &imgs).unwrap();
        let one = apply_zca(&fitted, &imgs.slice_rows(7, 1)).unwrap();
        assert!(one.max_abs_diff(&all.slice_rows(7, 1)) < 1e-12);
    }

    #[test]
    fn refit_on_whitened_data_acts_as_identity() {
        let mut r = crate::rng::seeded(11);
        let imgs = Tensor::from_fn([400, 3, 3, 1], |i| r.gen::<f64>() * (1.0 + (i % 9) as f64));
        let first = fit_zca(&dataset(imgs.clone()), 1e-6).unwrap();
        let white = apply_zca(&first, &imgs).unwrap();
        let second = fit_zca(&dataset(white.clone()), 1e-9).unwrap();
        let again = apply_zca(&second, &white).unwrap();
        assert!(again.max_abs_diff(&white) < 1e-3, "diff {}", again.max_abs_diff(&white));
    }

    #[test]
    fn unwhiten_recovers_original() {
        let mut r = crate::rng::seeded(5);
        let imgs = Tensor::from_fn([200, 2, 2, 3], |_| r.gen::<f64>());
        let stats = fit_zca(&dataset(imgs.clone()), 0.1).unwrap();
        let back = stats.unwhiten(&apply_zca(&stats, &imgs).unwrap()).unwrap();
        assert!(back.max_abs_diff(&imgs) < 1e-3);
    }
}
