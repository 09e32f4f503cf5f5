//! PNG grids of a factorization: one of the (preprocessed) bases and one per local hallucinator.
//!
//! Rows are classes and columns the bases of each class, separated by one white pixel. Values
//! are mapped back through the inverse ZCA when statistics are given, then clipped to `[0, 1]`.

use std::path::{Path, PathBuf};

use haba_autograd::{no_grad, Tensor, Var};
use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::dataio::ZcaStats;
use crate::error::{io_err, usage, Error, Result};
use crate::factor::FactorizedDataset;

/// `[n, h, w, c]` images in `[0, 1]` laid out by `cells[row][col]` image index.
pub fn write_grid(images: &Tensor, cells: &[Vec<usize>], path: &Path) -> Result<()> {
    let [_, h, w, c] = images.shape() else {
        return Err(usage(format!("grid images must be [n, h, w, c], got {:?}", images.shape())));
    };
    let (h, w, c) = (*h, *w, *c);
    let cols = cells.iter().map(Vec::len).max().unwrap_or(0);
    let (gw, gh) = ((cols * (w + 1) + 1) as u32, (cells.len() * (h + 1) + 1) as u32);
    let px = |i: usize, y: usize, x: usize, ch: usize| {
        let v = images.data()[((i * h + y) * w + x) * c + ch];
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    };
    let save_err = |e: image::ImageError| Error::Io { path: path.to_path_buf(), source: std::io::Error::other(e) };
    match c {
        1 => {
            let mut img = GrayImage::from_pixel(gw, gh, Luma([255]));
            for (r, row) in cells.iter().enumerate() {
                for (k, &i) in row.iter().enumerate() {
                    for y in 0..h {
                        for x in 0..w {
                            img.put_pixel((k * (w + 1) + 1 + x) as u32, (r * (h + 1) + 1 + y) as u32, Luma([px(i, y, x, 0)]));
                        }
                    }
                }
            }
            img.save(path).map_err(save_err)
        }
        3 => {
            let mut img = RgbImage::from_pixel(gw, gh, Rgb([255, 255, 255]));
            for (r, row) in cells.iter().enumerate() {
                for (k, &i) in row.iter().enumerate() {
                    for y in 0..h {
                        for x in 0..w {
                            let p = Rgb([px(i, y, x, 0), px(i, y, x, 1), px(i, y, x, 2)]);
                            img.put_pixel((k * (w + 1) + 1 + x) as u32, (r * (h + 1) + 1 + y) as u32, p);
                        }
                    }
                }
            }
            img.save(path).map_err(save_err)
        }
        _ => Err(usage(format!("cannot export {c}-channel images"))),
    }
}

fn class_rows(fd: &FactorizedDataset) -> Vec<Vec<usize>> {
    (0..fd.class_count).map(|c| (0..fd.num_bases()).filter(|&b| fd.labels[b] == c).collect()).collect()
}

fn to_pixels(images: &Tensor, zca: Option<&ZcaStats>) -> Result<Tensor> {
    match zca {
        Some(z) => z.unwhiten(images),
        None => Ok(images.clone()),
    }
}

/// Writes `bases.png` and `hallucinator_{1..|H|}.png` into `out_dir`; returns the paths.
pub fn export_images(fd: &FactorizedDataset, out_dir: &Path, zca: Option<&ZcaStats>) -> Result<Vec<PathBuf>> {
    fd.validate()?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let rows = class_rows(fd);
    let bases = no_grad(|| fd.geometry.preprocess(&Var::constant(fd.bases.clone())).value().clone());
    let mut written = Vec::with_capacity(fd.num_hallucinators + 1);
    let path = out_dir.join("bases.png");
    write_grid(&to_pixels(&bases, zca)?, &rows, &path)?;
    written.push(path);
    let all: Vec<usize> = (0..fd.num_bases()).collect();
    for j in 0..fd.num_hallucinators {
        let composed = fd.compose_batch(&all, &[j])?.images.value().clone();
        let path = out_dir.join(format!("hallucinator_{}.png", j + 1));
        write_grid(&to_pixels(&composed, zca)?, &rows, &path)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{fit_zca, generate_blobs, BlobSpec, Split};
    use crate::evalharness::image_only_factor;
    use crate::factor::{init_factorization, FactorConfig};

    #[test]
    fn one_grid_per_hallucinator_plus_bases() {
        let data = generate_blobs(&BlobSpec { classes: 10, train_per_class: 10, ..Default::default() }, Split::Train).unwrap();
        let fd = init_factorization(&FactorConfig { bases_per_class: 10, num_hallucinators: 2, ..Default::default() }, &data, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = export_images(&fd, dir.path(), None).unwrap();
        let names: Vec<_> = files.iter().map(|p| p.file_name().unwrap().to_str().unwrap().to_string()).collect();
        assert_eq!(names, ["bases.png", "hallucinator_1.png", "hallucinator_2.png"]);
        let img = image::open(&files[0]).unwrap();
        assert_eq!((img.width(), img.height()), (10 * 9 + 1, 10 * 9 + 1));
    }

    #[test]
    fn identity_hallucinator_grid_equals_bases_grid() {
        let data = generate_blobs(&BlobSpec { classes: 3, train_per_class: 4, ..Default::default() }, Split::Train).unwrap();
        let zca = fit_zca(&data, 0.1).unwrap();
        let white = data.with_images(crate::dataio::apply_zca(&zca, &data.images).unwrap()).unwrap();
        let fd = init_factorization(&image_only_factor(2, 1), &white, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = export_images(&fd, dir.path(), Some(&zca)).unwrap();
        let a = image::open(&files[0]).unwrap().to_luma8();
        let b = image::open(&files[1]).unwrap().to_luma8();
        assert_eq!(a, b);
        // the exported pixels are the original real images
        let pick = crate::dataio::sample_class_balanced(&data, 2, 0).unwrap();
        let v = a.get_pixel(1, 1)[0] as f64 / 255.0;
        assert!((v - data.images.data()[pick[0] * 64]).abs() <= 0.5 / 255.0 + 1e-3);
    }

    #[test]
    fn rgb_and_bad_channels() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = Tensor::full([2, 2, 2, 3], 0.5);
        write_grid(&rgb, &[vec![0, 1]], &dir.path().join("g.png")).unwrap();
        let img = image::open(dir.path().join("g.png")).unwrap().to_rgb8();
        assert_eq!(img.get_pixel(1, 1).0, [128, 128, 128]);
        assert!(write_grid(&Tensor::zeros([1, 2, 2, 2]), &[vec![0]], &dir.path().join("h.png")).is_err());
    }
}
