//! SVHN cropped-digit files (`*_32x32.mat`, MATLAB level-5 MAT format).
//!
//! Only what those files use is supported: little-endian, numeric matrices, optionally
//! zlib-compressed (`miCOMPRESSED`) elements. `X` is `32x32x3xN` uint8 in column-major
//! order and `y` holds labels 1..10 where 10 denotes the digit 0.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use haba_autograd::Tensor;

use super::Split;
use crate::error::{io_err, Error, Result};

const HEADER_LEN: usize = 128;
const MI_MATRIX: u32 = 14;
const MI_COMPRESSED: u32 = 15;

struct MatArray {
    dims: Vec<usize>,
    data: Vec<f64>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    /// Offset of `bytes[0]` in the file, for error positions.
    base: u64,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, at: usize, msg: impl Into<String>) -> Error {
        Error::Format { path: self.path.to_path_buf(), position: self.base + at as u64, message: msg.into() }
    }

    fn u32_at(&self, at: usize) -> Result<u32> {
        self.bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| self.err(at, "truncated element tag"))
    }

    /// `(type, payload range, next element offset)` of the element at `at`.
    fn tag(&self, at: usize) -> Result<(u32, std::ops::Range<usize>, usize)> {
        let first = self.u32_at(at)?;
        if first >> 16 != 0 {
            // small data element: size in the upper half, payload packed into the tag
            let ty = first & 0xffff;
            let n = (first >> 16) as usize;
            if n > 4 {
                return Err(self.err(at, "small element larger than 4 bytes"));
            }
            return Ok((ty, at + 4..at + 4 + n, at + 8));
        }
        let n = self.u32_at(at + 4)? as usize;
        let start = at + 8;
        let end = start.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| self.err(at, "element runs past end of file"))?;
        let next = if first == MI_COMPRESSED { end } else { start + n.div_ceil(8) * 8 };
        Ok((first, start..end, next))
    }

    fn numeric(&self, ty: u32, range: std::ops::Range<usize>, at: usize) -> Result<Vec<f64>> {
        let b = &self.bytes[range];
        let vals = match ty {
            1 => b.iter().map(|&v| v as i8 as f64).collect(),
            2 => b.iter().map(|&v| v as f64).collect(),
            3 => b.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f64).collect(),
            4 => b.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as f64).collect(),
            5 => b.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            6 => b.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            7 => b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            9 => b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            other => return Err(self.err(at, format!("unsupported numeric data type {other}"))),
        };
        Ok(vals)
    }

    fn matrix(&self, payload: std::ops::Range<usize>) -> Result<(String, MatArray)> {
        let sub = Reader { bytes: &self.bytes[payload.clone()], base: self.base + payload.start as u64, path: self.path };
        let (_, _, next) = sub.tag(0)?; // array flags
        let (_, dims_r, next2) = sub.tag(next)?;
        let dims: Vec<usize> = sub.numeric(5, dims_r, next)?.into_iter().map(|d| d as usize).collect();
        let (_, name_r, next3) = sub.tag(next2)?;
        let name = String::from_utf8_lossy(&sub.bytes[name_r]).into_owned();
        let (ty, real_r, _) = sub.tag(next3)?;
        let data = sub.numeric(ty, real_r, next3)?;
        if data.len() != dims.iter().product::<usize>() {
            return Err(sub.err(next3, format!("variable {name}: {} values for dims {dims:?}", data.len())));
        }
        Ok((name, MatArray { dims, data }))
    }

    fn variables(&self, start: usize, out: &mut HashMap<String, MatArray>) -> Result<()> {
        let mut at = start;
        while at + 8 <= self.bytes.len() {
            let (ty, range, next) = self.tag(at)?;
            match ty {
                MI_MATRIX => {
                    let (name, arr) = self.matrix(range)?;
                    out.insert(name, arr);
                }
                MI_COMPRESSED => {
                    let mut inflated = Vec::new();
                    flate2::read::ZlibDecoder::new(&self.bytes[range.clone()])
                        .read_to_end(&mut inflated)
                        .map_err(|e| self.err(range.start, format!("corrupt compressed element: {e}")))?;
                    // positions inside inflated data are reported at the compressed element
                    Reader { bytes: &inflated, base: self.base + at as u64, path: self.path }.variables(0, out)?;
                }
                _ => {}
            }
            at = next;
        }
        Ok(())
    }
}

fn read_mat(bytes: &[u8], path: &Path) -> Result<HashMap<String, MatArray>> {
    let r = Reader { bytes, base: 0, path };
    if bytes.len() < HEADER_LEN {
        return Err(r.err(bytes.len(), "file shorter than the 128-byte MAT header"));
    }
    match &bytes[126..128] {
        b"IM" => {}
        b"MI" => return Err(r.err(126, "big-endian MAT files are not supported")),
        _ => return Err(r.err(126, "not a level-5 MAT file")),
    }
    let mut vars = HashMap::new();
    r.variables(HEADER_LEN, &mut vars)?;
    Ok(vars)
}

pub(crate) fn load_svhn(root: &Path, split: Split) -> Result<(Tensor, Vec<usize>)> {
    let path = root.join(match split {
        Split::Train => "train_32x32.mat",
        Split::Test => "test_32x32.mat",
    });
    let bytes = std::fs::read(&path).map_err(io_err(&path))?;
    let vars = read_mat(&bytes, &path)?;
    let missing = |v: &str| Error::Format { path: path.clone(), position: 0, message: format!("variable {v} not found") };
    let x = vars.get("X").ok_or_else(|| missing("X"))?;
    let y = vars.get("y").ok_or_else(|| missing("y"))?;
    let [h, w, c, n] = x.dims[..] else {
        return Err(Error::Format { path, position: 0, message: format!("X has dims {:?}, expected 4-D", x.dims) });
    };
    if y.data.len() != n {
        return Err(Error::Format { path, position: 0, message: format!("{} labels for {n} images", y.data.len()) });
    }
    let mut images = vec![0.0; n * h * w * c];
    for s in 0..n {
        for ch in 0..c {
            for col in 0..w {
                for row in 0..h {
                    let src = row + h * (col + w * (ch + c * s));
                    images[((s * h + row) * w + col) * c + ch] = x.data[src] / 255.0;
                }
            }
        }
    }
    let labels = y.data.iter().map(|&l| (l as usize) % 10).collect();
    Ok((Tensor::new([n, h, w, c], images), labels))
}

/// Writes a minimal compressed MAT file with uint8 `X` (column-major) and double `y`.
#[cfg(test)]
fn write_mat_uint8_for_tests(path: &Path, x_dims: [usize; 4], x: &[u8], y: &[f64]) -> std::io::Result<()> {
    use std::io::Write;
    fn element(ty: u32, payload: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&ty.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(payload);
        while out.len() % 8 != 0 {
            out.push(0);
        }
        out
    }
    fn matrix(name: &str, class: u8, dims: &[usize], data_ty: u32, data: &[u8]) -> Vec<u8> {
        let mut body = element(6, &[class as u32, 0u32].iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>());
        body.extend(element(5, &dims.iter().flat_map(|&d| (d as i32).to_le_bytes()).collect::<Vec<_>>()));
        body.extend(element(1, name.as_bytes()));
        body.extend(element(data_ty, data));
        element(MI_MATRIX, &body)
    }
    let mut file = vec![b' '; HEADER_LEN];
    file[..10].copy_from_slice(b"MATLAB 5.0");
    file[124..126].copy_from_slice(&0x0100u16.to_le_bytes());
    file[126..128].copy_from_slice(b"IM");
    let xm = matrix("X", 9, &x_dims, 2, x);
    let mut enc = flate2::write::ZlibEncoder::new(Vec::new(), flate2::Compression::fast());
    enc.write_all(&xm)?;
    let compressed = enc.finish()?;
    file.extend_from_slice(&MI_COMPRESSED.to_le_bytes());
    file.extend_from_slice(&(compressed.len() as u32).to_le_bytes());
    file.extend_from_slice(&compressed);
    let ybytes: Vec<u8> = y.iter().flat_map(|v| v.to_le_bytes()).collect();
    file.extend(matrix("y", 6, &[y.len(), 1], 9, &ybytes));
    std::fs::write(path, file)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn column_major_layout_and_label_ten_is_zero() {
        let dir = tempfile::tempdir().unwrap();
        let (h, w, c, n) = (32, 32, 3, 10);
        // pixel value encodes (row, col, channel) for sample 0
        let mut x = vec![0u8; h * w * c * n];
        for s in 0..n {
            for ch in 0..c {
                for col in 0..w {
                    for row in 0..h {
                        x[row + h * (col + w * (ch + c * s))] = ((row + 2 * col + 50 * ch + s) % 256) as u8;
                    }
                }
            }
        }
        let y: Vec<f64> = (1..=10).map(|v| v as f64).collect();
        write_mat_uint8_for_tests(&dir.path().join("test_32x32.mat"), [h, w, c, n], &x, &y).unwrap();
        let ds = crate::dataio::load_dataset("svhn", dir.path(), Split::Test).unwrap();
        assert_eq!(ds.image_shape(), [32, 32, 3]);
        assert_eq!(ds.labels[9], 0);
        assert_eq!(ds.labels[0], 1);
        // sample 1, row 3, col 5, channel 2
        let v = ds.images.data()[((32 + 3) * 32 + 5) * 3 + 2];
        assert!((v - (3 + 10 + 100 + 1) as f64 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn big_endian_and_short_files_rejected() {
        let p = Path::new("s.mat");
        assert!(matches!(read_mat(&[0; 10], p), Err(Error::Format { .. })));
        let mut header = vec![b' '; HEADER_LEN];
        header[126..].copy_from_slice(b"MI");
        assert!(matches!(read_mat(&header, p), Err(Error::Format { position: 126, .. })));
    }

    #[test]
    fn corrupt_compressed_element_is_format_error() {
        let mut file = vec![b' '; HEADER_LEN];
        file[126..].copy_from_slice(b"IM");
        file.extend_from_slice(&MI_COMPRESSED.to_le_bytes());
        file.extend_from_slice(&4u32.to_le_bytes());
        file.extend_from_slice(&[1, 2, 3, 4]);
        assert!(matches!(read_mat(&file, Path::new("c.mat")), Err(Error::Format { .. })));
    }
}
