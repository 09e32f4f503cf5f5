//! IDX files (MNIST, Fashion-MNIST).

use std::io::Read;
use std::path::{Path, PathBuf};

use haba_autograd::Tensor;

use super::{bytes_to_unit, Split};
use crate::error::{io_err, Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn format_err(path: &Path, position: u64, message: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), position, message: message.into() }
}

/// Reads `path`, or `path.gz` when only the compressed file exists.
pub(crate) fn read_maybe_gz(path: &Path) -> Result<(PathBuf, Vec<u8>)> {
    if path.exists() {
        return Ok((path.to_path_buf(), std::fs::read(path).map_err(io_err(path))?));
    }
    let gz = PathBuf::from(format!("{}.gz", path.display()));
    if gz.exists() {
        let file = std::fs::File::open(&gz).map_err(io_err(&gz))?;
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(file).read_to_end(&mut out).map_err(io_err(&gz))?;
        return Ok((gz, out));
    }
    Err(Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found"),
    })
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, at as u64, "truncated header"))
}

/// `(count, rows, cols, pixels)` of an IDX3 image file.
pub(crate) fn parse_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(format_err(path, 0, format!("bad magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(format_err(path, bytes.len() as u64, format!("truncated: need {need} bytes")));
    }
    Ok((n, rows, cols, bytes[16..need].to_vec()))
}

pub(crate) fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(format_err(path, 0, format!("bad magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = bytes
        .get(8..8 + n)
        .ok_or_else(|| format_err(path, bytes.len() as u64, format!("truncated: need {} bytes", 8 + n)))?;
    Ok(body.iter().map(|&b| b as usize).collect())
}

pub(crate) fn load_mnist_family(root: &Path, split: Split) -> Result<(Tensor, Vec<usize>)> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let (img_path, img_bytes) = read_maybe_gz(&root.join(format!("{prefix}-images-idx3-ubyte")))?;
    let (lbl_path, lbl_bytes) = read_maybe_gz(&root.join(format!("{prefix}-labels-idx1-ubyte")))?;
    let (n, rows, cols, pixels) = parse_images(&img_bytes, &img_path)?;
    let labels = parse_labels(&lbl_bytes, &lbl_path)?;
    if labels.len() != n {
        return Err(format_err(&lbl_path, 4, format!("{} labels for {n} images", labels.len())));
    }
    Ok((Tensor::new([n, rows, cols, 1], bytes_to_unit(&pixels)), labels))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn idx_images(n: usize, rows: usize, cols: usize, pixel: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend((0..n * rows * cols).map(pixel));
        out
    }

    pub(crate) fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend_from_slice(labels);
        out
    }

    #[test]
    fn loads_test_split_with_published_header() {
        let dir = tempfile::tempdir().unwrap();
        let labels: Vec<u8> = (0..20).map(|i| (i % 10) as u8).collect();
        std::fs::write(dir.path().join("t10k-images-idx3-ubyte"), idx_images(20, 28, 28, |i| (i % 256) as u8)).unwrap();
        std::fs::write(dir.path().join("t10k-labels-idx1-ubyte"), idx_labels(&labels)).unwrap();
        let ds = crate::dataio::load_dataset("mnist", dir.path(), Split::Test).unwrap();
        assert_eq!(ds.len(), 20);
        assert_eq!(ds.image_shape(), [28, 28, 1]);
        assert_eq!(ds.images.data()[255], 1.0);
        assert!(ds.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn gzipped_files_are_accepted() {
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let write_gz = |name: &str, bytes: &[u8]| {
            let f = std::fs::File::create(dir.path().join(format!("{name}.gz"))).unwrap();
            let mut enc = flate2::write::GzEncoder::new(f, flate2::Compression::fast());
            enc.write_all(bytes).unwrap();
            enc.finish().unwrap();
        };
        let labels: Vec<u8> = (0..10).collect();
        write_gz("train-images-idx3-ubyte", &idx_images(10, 4, 4, |_| 0));
        write_gz("train-labels-idx1-ubyte", &idx_labels(&labels));
        let ds = crate::dataio::load_dataset("fashion-mnist", dir.path(), Split::Train).unwrap();
        assert_eq!(ds.len(), 10);
    }

    #[test]
    fn bad_magic_and_truncation_are_format_errors() {
        let p = Path::new("x");
        let mut bytes = idx_images(2, 2, 2, |_| 1);
        bytes[3] = 0x01;
        assert!(matches!(parse_images(&bytes, p), Err(Error::Format { position: 0, .. })));
        let bytes = idx_images(2, 2, 2, |_| 1);
        assert!(matches!(parse_images(&bytes[..20], p), Err(Error::Format { .. })));
        assert!(matches!(parse_labels(&[0, 0], p), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_mnist_family(dir.path(), Split::Train).unwrap_err().to_string();
        assert!(err.contains("train-images-idx3-ubyte"), "{err}");
    }
}
