//! CIFAR binary record files: label byte(s) followed by 3072 planar RGB bytes.

use std::path::{Path, PathBuf};

use haba_autograd::Tensor;

use super::Split;
use crate::error::{io_err, Error, Result};

const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;
const PIXELS: usize = 3 * PLANE;

/// Appends the records of one file; `label_bytes` is 1 (CIFAR-10) or 2 (CIFAR-100, fine label last).
fn parse_records(bytes: &[u8], path: &Path, label_bytes: usize, images: &mut Vec<f64>, labels: &mut Vec<usize>) -> Result<()> {
    let record = label_bytes + PIXELS;
    if bytes.len() % record != 0 {
        let whole = bytes.len() / record * record;
        return Err(Error::Format {
            path: path.to_path_buf(),
            position: whole as u64,
            message: format!("trailing partial record ({} of {record} bytes)", bytes.len() - whole),
        });
    }
    for rec in bytes.chunks_exact(record) {
        labels.push(rec[label_bytes - 1] as usize);
        let px = &rec[label_bytes..];
        // planar RGB -> interleaved HWC
        for p in 0..PLANE {
            for c in 0..3 {
                images.push(px[c * PLANE + p] as f64 / 255.0);
            }
        }
    }
    Ok(())
}

fn load_files(paths: &[PathBuf], label_bytes: usize) -> Result<(Tensor, Vec<usize>)> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        parse_records(&bytes, path, label_bytes, &mut images, &mut labels)?;
    }
    let n = labels.len();
    Ok((Tensor::new([n, SIDE, SIDE, 3], images), labels))
}

pub(crate) fn load_cifar10(root: &Path, split: Split) -> Result<(Tensor, Vec<usize>)> {
    let paths: Vec<PathBuf> = match split {
        Split::Train => (1..=5).map(|i| root.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![root.join("test_batch.bin")],
    };
    load_files(&paths, 1)
}

pub(crate) fn load_cifar100(root: &Path, split: Split) -> Result<(Tensor, Vec<usize>)> {
    let name = match split {
        Split::Train => "train.bin",
        Split::Test => "test.bin",
    };
    load_files(&[root.join(name)], 2)
}
