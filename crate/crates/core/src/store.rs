//! The HABA checkpoint format.
//!
//! ```text
//! offset 0   "HABA"
//! offset 4   u32 LE  format version (1)
//! offset 8   u32 LE  manifest length L
//! offset 12  L bytes JSON manifest {kind, tensors: [{name, shape, dtype, offset, length}], meta}
//! 12 + L     payload: little-endian f32 tensor data in manifest order
//! ```
//!
//! Tensor offsets are relative to the payload start, contiguous, and cover it exactly. Values are
//! stored as `f32`; anything else (labels, configs, `synth_lr_log`) lives in `meta`. Writes go to
//! a temporary file in the destination directory and are renamed into place.

use std::io::Write;
use std::path::Path;

use haba_autograd::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dataio::{ImageDataset, Split, ZcaStats};
use crate::ddmatch::ExpertTrajectory;
use crate::error::{io_err, usage, Error, Result};
use crate::factor::{FactorMeta, FactorizedDataset, Geometry, Hallucinator};
use crate::nets::{ModelParams, ModelSpec};

pub const MAGIC: &[u8; 4] = b"HABA";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    Factorized(FactorizedDataset),
    Trajectory(ExpertTrajectory),
    Params { params: ModelParams, spec: Option<ModelSpec> },
    Dataset(ImageDataset),
    Zca(ZcaStats),
}

impl Checkpoint {
    pub fn kind(&self) -> &'static str {
        match self {
            Checkpoint::Factorized(_) => "factorized",
            Checkpoint::Trajectory(_) => "trajectory",
            Checkpoint::Params { .. } => "params",
            Checkpoint::Dataset(_) => "dataset",
            Checkpoint::Zca(_) => "zca",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub tensors: Vec<TensorEntry>,
    pub meta: Value,
}

#[derive(Serialize, Deserialize)]
struct FactorizedMeta {
    geometry: Geometry,
    class_count: usize,
    num_hallucinators: usize,
    class_independent: bool,
    labels: Vec<usize>,
    synth_lr_log: f64,
    info: FactorMeta,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryMeta {
    spec: ModelSpec,
    names: Vec<String>,
    checkpoints: usize,
    interval: usize,
    beta: f64,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    name: String,
    labels: Vec<usize>,
    class_count: usize,
    split: Split,
}

fn split_parts(ck: &Checkpoint) -> Result<(Vec<(String, &Tensor)>, Value)> {
    let to_value = |v: Result<Value, serde_json::Error>| v.map_err(|e| usage(format!("cannot serialize metadata: {e}")));
    Ok(match ck {
        Checkpoint::Factorized(fd) => {
            fd.validate()?;
            let mut t = vec![("bases".to_string(), &fd.bases)];
            for (i, h) in fd.hallucinators.iter().enumerate() {
                for (name, tensor) in fd.geometry.hallucinator_param_names().into_iter().zip(&h.tensors) {
                    t.push((format!("hall{i}.{name}"), tensor));
                }
            }
            let meta = FactorizedMeta {
                geometry: fd.geometry,
                class_count: fd.class_count,
                num_hallucinators: fd.num_hallucinators,
                class_independent: fd.class_independent,
                labels: fd.labels.clone(),
                synth_lr_log: fd.synth_lr_log,
                info: fd.meta.clone(),
            };
            (t, to_value(serde_json::to_value(meta))?)
        }
        Checkpoint::Trajectory(tr) => {
            if tr.checkpoints.len() < 2 {
                return Err(usage("an expert trajectory needs at least two checkpoints"));
            }
            let names = tr.checkpoints[0].names.clone();
            let mut t = Vec::new();
            for (k, c) in tr.checkpoints.iter().enumerate() {
                tr.checkpoints[0].check_compatible(c)?;
                t.extend(c.names.iter().zip(&c.tensors).map(|(n, x)| (format!("ckpt{k}.{n}"), x)));
            }
            let meta = TrajectoryMeta { spec: tr.spec.clone(), names, checkpoints: tr.checkpoints.len(), interval: tr.interval, beta: tr.beta, seed: tr.seed };
            (t, to_value(serde_json::to_value(meta))?)
        }
        Checkpoint::Params { params, spec } => {
            if params.tensors.is_empty() {
                return Err(usage("cannot save an empty parameter set"));
            }
            let t = params.names.iter().cloned().zip(&params.tensors).collect();
            (t, json!({ "spec": spec, "names": params.names }))
        }
        Checkpoint::Dataset(d) => {
            if d.is_empty() {
                return Err(usage("cannot save an empty dataset"));
            }
            let meta = DatasetMeta { name: d.name.clone(), labels: d.labels.clone(), class_count: d.class_count, split: d.split };
            (vec![("images".into(), &d.images)], to_value(serde_json::to_value(meta))?)
        }
        Checkpoint::Zca(z) => {
            if z.dim() == 0 {
                return Err(usage("cannot save empty ZCA statistics"));
            }
            (vec![("whitening".into(), &z.whitening)], json!({ "mean": z.mean, "epsilon": z.epsilon, "fingerprint": z.fingerprint() }))
        }
    })
}

/// Serializes a checkpoint to bytes.
pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let (tensors, meta) = split_parts(ck)?;
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in &tensors {
        if t.numel() == 0 {
            return Err(usage(format!("tensor {name} is empty")));
        }
        let length = 4 * t.numel() as u64;
        entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), dtype: "f32".into(), offset, length });
        offset += length;
    }
    let manifest = Manifest { kind: ck.kind().into(), tensors: entries, meta };
    let header = serde_json::to_vec(&manifest).map_err(|e| usage(format!("cannot serialize manifest: {e}")))?;
    let header_len = u32::try_from(header.len()).map_err(|_| usage("manifest exceeds 4 GiB"))?;
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in &tensors {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    path: &'a Path,
}

impl Reader<'_> {
    fn err(&self, position: usize, message: impl Into<String>) -> Error {
        Error::Format { path: self.path.to_path_buf(), position: position as u64, message: message.into() }
    }
}

/// Parses and checks the preamble and manifest; returns the manifest and payload start.
fn parse_manifest(bytes: &[u8], path: &Path) -> Result<(Manifest, usize)> {
    let r = Reader { path };
    if bytes.len() < PREAMBLE {
        return Err(r.err(bytes.len(), "file is shorter than the 12-byte preamble"));
    }
    if &bytes[..4] != MAGIC {
        return Err(r.err(0, format!("bad magic {:?}, expected \"HABA\"", String::from_utf8_lossy(&bytes[..4]))));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        let hint = if u32::from_be_bytes(bytes[4..8].try_into().expect("4 bytes")) == VERSION { " (big-endian file?)" } else { "" };
        return Err(r.err(4, format!("unsupported version {version}{hint}")));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let start = PREAMBLE + len;
    if start > bytes.len() {
        return Err(r.err(8, format!("manifest length {len} runs past the end of the file ({} bytes)", bytes.len())));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[PREAMBLE..start]).map_err(|e| r.err(PREAMBLE, format!("invalid manifest: {e}")))?;
    let payload = (bytes.len() - start) as u64;
    let mut expected = 0u64;
    for t in &manifest.tensors {
        let at = start + t.offset.min(payload) as usize;
        if t.dtype != "f32" {
            return Err(r.err(at, format!("tensor {} has unsupported dtype {}", t.name, t.dtype)));
        }
        if t.offset != expected {
            return Err(r.err(at, format!("tensor {} starts at {}, expected {expected}", t.name, t.offset)));
        }
        let numel = t.shape.iter().try_fold(1u64, |a, &d| a.checked_mul(d as u64));
        if numel.and_then(|n| n.checked_mul(4)) != Some(t.length) || t.length == 0 {
            return Err(r.err(at, format!("tensor {} length {} does not match shape {:?}", t.name, t.length, t.shape)));
        }
        expected += t.length;
        if expected > payload {
            return Err(r.err(bytes.len(), format!("payload truncated: tensor {} needs {expected} bytes, file has {payload}", t.name)));
        }
    }
    if expected != payload {
        return Err(r.err(start + expected as usize, format!("{} trailing payload bytes", payload - expected)));
    }
    Ok((manifest, start))
}

/// Reads only the manifest of a checkpoint file.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(parse_manifest(&bytes, path)?.0)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let (manifest, start) = parse_manifest(bytes, path)?;
    let fail = |message: String| Error::Format { path: path.to_path_buf(), position: PREAMBLE as u64, message };
    let mut tensors = manifest.tensors.iter().map(|e| {
        let at = start + e.offset as usize;
        let data = bytes[at..at + e.length as usize]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        (e.name.as_str(), Tensor::new(e.shape.clone(), data))
    });
    let meta = |v: &Value| v.clone();
    let ck = match manifest.kind.as_str() {
        "factorized" => {
            let m: FactorizedMeta = serde_json::from_value(meta(&manifest.meta)).map_err(|e| fail(format!("factorized metadata: {e}")))?;
            let (_, bases) = tensors.next().ok_or_else(|| fail("missing bases tensor".into()))?;
            let names = m.geometry.hallucinator_param_names();
            let groups = if m.class_independent { m.class_count } else { 1 };
            let mut hallucinators = Vec::new();
            for i in 0..groups * m.num_hallucinators {
                let mut ts = Vec::with_capacity(names.len());
                for n in &names {
                    let (tn, t) = tensors.next().ok_or_else(|| fail(format!("missing tensor hall{i}.{n}")))?;
                    if tn != format!("hall{i}.{n}") {
                        return Err(fail(format!("expected tensor hall{i}.{n}, found {tn}")));
                    }
                    ts.push(t);
                }
                hallucinators.push(Hallucinator { tensors: ts });
            }
            let fd = FactorizedDataset {
                geometry: m.geometry,
                class_count: m.class_count,
                num_hallucinators: m.num_hallucinators,
                class_independent: m.class_independent,
                hallucinators,
                bases,
                labels: m.labels,
                synth_lr_log: m.synth_lr_log,
                meta: m.info,
            };
            fd.validate().map_err(|e| fail(format!("inconsistent factorized dataset: {e}")))?;
            Checkpoint::Factorized(fd)
        }
        "trajectory" => {
            let m: TrajectoryMeta = serde_json::from_value(meta(&manifest.meta)).map_err(|e| fail(format!("trajectory metadata: {e}")))?;
            let layout = m.spec.layout().map_err(|e| fail(e.to_string()))?;
            let mut checkpoints = Vec::with_capacity(m.checkpoints);
            for k in 0..m.checkpoints {
                let mut ts = Vec::with_capacity(m.names.len());
                for (n, def) in m.names.iter().zip(&layout) {
                    let (tn, t) = tensors.next().ok_or_else(|| fail(format!("missing tensor ckpt{k}.{n}")))?;
                    if tn != format!("ckpt{k}.{n}") || t.shape() != def.shape.as_slice() {
                        return Err(fail(format!("tensor {tn} does not match ckpt{k}.{n} of shape {:?}", def.shape)));
                    }
                    ts.push(t);
                }
                checkpoints.push(ModelParams { names: m.names.clone(), tensors: ts });
            }
            if checkpoints.len() < 2 || m.names.len() != layout.len() {
                return Err(fail("trajectory needs at least two checkpoints of the full layout".into()));
            }
            Checkpoint::Trajectory(ExpertTrajectory { spec: m.spec, checkpoints, interval: m.interval, beta: m.beta, seed: m.seed })
        }
        "params" => {
            let spec: Option<ModelSpec> =
                serde_json::from_value(manifest.meta.get("spec").cloned().unwrap_or(Value::Null)).map_err(|e| fail(format!("params spec: {e}")))?;
            let (names, ts): (Vec<String>, Vec<Tensor>) = tensors.map(|(n, t)| (n.to_string(), t)).unzip();
            let params = ModelParams { names, tensors: ts };
            if let Some(s) = &spec {
                let layout = s.layout().map_err(|e| fail(e.to_string()))?;
                if layout.len() != params.tensors.len() || layout.iter().zip(&params.tensors).any(|(d, t)| d.shape != t.shape()) {
                    return Err(fail("parameters do not match the recorded model spec".into()));
                }
            }
            Checkpoint::Params { params, spec }
        }
        "dataset" => {
            let m: DatasetMeta = serde_json::from_value(meta(&manifest.meta)).map_err(|e| fail(format!("dataset metadata: {e}")))?;
            let (_, images) = tensors.next().ok_or_else(|| fail("missing images tensor".into()))?;
            Checkpoint::Dataset(ImageDataset::new(m.name, images, m.labels, m.class_count, m.split).map_err(|e| fail(e.to_string()))?)
        }
        "zca" => {
            let mean: Vec<f64> = serde_json::from_value(manifest.meta.get("mean").cloned().unwrap_or(Value::Null)).map_err(|e| fail(format!("zca mean: {e}")))?;
            let epsilon = manifest.meta.get("epsilon").and_then(Value::as_f64).ok_or_else(|| fail("zca epsilon missing".into()))?;
            let (_, whitening) = tensors.next().ok_or_else(|| fail("missing whitening tensor".into()))?;
            if whitening.shape() != [mean.len(), mean.len()] {
                return Err(fail(format!("whitening shape {:?} does not match mean of length {}", whitening.shape(), mean.len())));
            }
            Checkpoint::Zca(ZcaStats { mean, whitening, epsilon })
        }
        other => return Err(fail(format!("unknown checkpoint kind {other:?}"))),
    };
    Ok(ck)
}

/// Atomically writes `ck` to `path`.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ck)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(&bytes).map_err(io_err(tmp.path()))?;
    tmp.as_file().sync_all().map_err(io_err(tmp.path()))?;
    tmp.persist(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode(&bytes, path)
}

macro_rules! typed_loader {
    ($name:ident, $variant:ident, $ty:ty) => {
        pub fn $name(path: &Path) -> Result<$ty> {
            match load_checkpoint(path)? {
                Checkpoint::$variant(x) => Ok(x),
                other => Err(usage(format!("{} holds a {} checkpoint, expected {}", path.display(), other.kind(), stringify!($variant).to_lowercase()))),
            }
        }
    };
}

typed_loader!(load_factorized, Factorized, FactorizedDataset);
typed_loader!(load_trajectory, Trajectory, ExpertTrajectory);
typed_loader!(load_dataset_cache, Dataset, ImageDataset);
typed_loader!(load_zca, Zca, ZcaStats);
