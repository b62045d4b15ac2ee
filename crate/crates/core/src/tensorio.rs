//! Tensor files, run configs, checkpoints, and the seeded random stream.
//!
//! The `.vvot` tensor file layout is fixed and little-endian:
//!
//! ```text
//! magic   4 bytes  "VVOT"
//! dtype   1 byte   0 = float32, 1 = int32, 2 = uint8
//! ndim    1 byte
//! dims    ndim x u32 (little-endian)
//! payload row-major values, little-endian
//! ```

use crate::tensor::{IntGrid, Tensor};
use rand_core::{RngCore, SeedableRng};
use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"VVOT";

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic {found:?}, expected \"VVOT\"")]
    BadMagic { found: [u8; 4] },
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("truncated payload: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("bad dims: {0}")]
    BadDims(String),
    #[error("checkpoint manifest error: {0}")]
    Manifest(String),
}

impl TensorIoError {
    fn io(path: &Path, source: io::Error) -> Self {
        TensorIoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Element type of a tensor file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    I32,
    U8,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::I32 => 1,
            Dtype::U8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, TensorIoError> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::I32),
            2 => Ok(Dtype::U8),
            other => Err(TensorIoError::UnknownDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::I32 => 4,
            Dtype::U8 => 1,
        }
    }
}

/// Payload of a tensor file, one vector per supported dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::I32(_) => Dtype::I32,
            TensorData::U8(_) => Dtype::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Dims + payload as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<u32>,
    pub data: TensorData,
}

fn check_dims(dims: &[u32], len: usize) -> Result<(), TensorIoError> {
    if dims.is_empty() {
        return Err(TensorIoError::BadDims("dims must be nonempty".into()));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(TensorIoError::BadDims(format!("every dim must be >= 1, got {:?}", dims)));
    }
    let expect: usize = dims.iter().map(|&d| d as usize).product();
    if expect != len {
        return Err(TensorIoError::BadDims(format!(
            "dims {:?} imply {} elements, payload has {}",
            dims, expect, len
        )));
    }
    Ok(())
}

/// Writes a tensor file; see the module docs for the byte layout.
pub fn write_tensor(path: &Path, dims: &[u32], data: &TensorData) -> Result<(), TensorIoError> {
    check_dims(dims, data.len())?;
    let mut buf: Vec<u8> = Vec::with_capacity(6 + 4 * dims.len() + data.len() * data.dtype().size());
    buf.extend_from_slice(&MAGIC);
    buf.push(data.dtype().code());
    buf.push(dims.len() as u8);
    for &d in dims {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    match data {
        TensorData::F32(v) => {
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        TensorData::I32(v) => {
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        TensorData::U8(v) => buf.extend_from_slice(v),
    }
    fs::write(path, &buf).map_err(|e| TensorIoError::io(path, e))
}

/// Reads a tensor file, reporting bad magic, unknown dtype, and truncation distinctly.
pub fn read_tensor(path: &Path) -> Result<TensorFile, TensorIoError> {
    let mut file = fs::File::open(path).map_err(|e| TensorIoError::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| TensorIoError::io(path, e))?;

    if bytes.len() < 6 {
        return Err(TensorIoError::Truncated {
            expected: 6,
            got: bytes.len(),
        });
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[0..4]);
    if magic != MAGIC {
        return Err(TensorIoError::BadMagic { found: magic });
    }
    let dtype = Dtype::from_code(bytes[4])?;
    let ndim = bytes[5] as usize;
    let header = 6 + 4 * ndim;
    if bytes.len() < header {
        return Err(TensorIoError::Truncated {
            expected: header,
            got: bytes.len(),
        });
    }
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let off = 6 + 4 * i;
        dims.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
    }
    if dims.is_empty() || dims.iter().any(|&d| d == 0) {
        return Err(TensorIoError::BadDims(format!("invalid dims in file: {:?}", dims)));
    }
    let count: usize = dims.iter().map(|&d| d as usize).product();
    let expected = header + count * dtype.size();
    if bytes.len() != expected {
        return Err(TensorIoError::Truncated {
            expected,
            got: bytes.len(),
        });
    }
    let payload = &bytes[header..];
    let data = match dtype {
        Dtype::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::I32 => TensorData::I32(
            payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::U8 => TensorData::U8(payload.to_vec()),
    };
    Ok(TensorFile { dims, data })
}

/// Writes an in-memory `f64` tensor as a float32 file (values rounded to f32).
pub fn write_tensor_f64(path: &Path, t: &Tensor) -> Result<(), TensorIoError> {
    let dims: Vec<u32> = t.shape.iter().map(|&d| d as u32).collect();
    let data = TensorData::F32(t.data.iter().map(|&v| v as f32).collect());
    write_tensor(path, &dims, &data)
}

/// Reads a float32 tensor file into an `f64` tensor.
pub fn read_tensor_f64(path: &Path) -> Result<Tensor, TensorIoError> {
    let tf = read_tensor(path)?;
    match tf.data {
        TensorData::F32(v) => Ok(Tensor::new(
            tf.dims.iter().map(|&d| d as usize).collect(),
            v.into_iter().map(|x| x as f64).collect(),
        )),
        other => Err(TensorIoError::BadDims(format!(
            "expected float32 file at {}, found {:?}",
            path.display(),
            other.dtype()
        ))),
    }
}

pub fn write_int_grid(path: &Path, g: &IntGrid) -> Result<(), TensorIoError> {
    write_tensor(path, &[g.h as u32, g.w as u32], &TensorData::I32(g.data.clone()))
}

pub fn read_int_grid(path: &Path) -> Result<IntGrid, TensorIoError> {
    let tf = read_tensor(path)?;
    match (tf.dims.as_slice(), tf.data) {
        ([h, w], TensorData::I32(v)) => Ok(IntGrid::new(*h as usize, *w as usize, v)),
        (dims, data) => Err(TensorIoError::BadDims(format!(
            "expected 2-D int32 grid at {}, found dims {:?} dtype {:?}",
            path.display(),
            dims,
            data.dtype()
        ))),
    }
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config syntax error on line {line}: `{text}`")]
    Syntax { line: usize, text: String },
    #[error("bad value for `{key}`: `{value}` is not a valid {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
}

/// One known config key with its documented default.
#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub name: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
}

/// Flat `key = value` configuration with a fixed schema of known keys.
///
/// Lines are `key = value`; `#` starts a comment; blank lines are ignored.
/// Unknown keys are rejected by name. Every key has a default from the
/// schema, so an empty config is valid.
#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    schema: &'static [KeySpec],
}

impl RunConfig {
    pub fn defaults(schema: &'static [KeySpec]) -> Self {
        RunConfig {
            values: BTreeMap::new(),
            schema,
        }
    }

    pub fn parse(text: &str, schema: &'static [KeySpec]) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let key = key.trim();
            let value = value.trim();
            if !schema.iter().any(|k| k.name == key) {
                return Err(ConfigError::UnknownKey(key.to_string()));
            }
            values.insert(key.to_string(), value.to_string());
        }
        Ok(RunConfig { values, schema })
    }

    pub fn load(path: &Path, schema: &'static [KeySpec]) -> Result<Self, TensorIoError> {
        let text = fs::read_to_string(path).map_err(|e| TensorIoError::io(path, e))?;
        RunConfig::parse(&text, schema).map_err(|e| TensorIoError::Manifest(e.to_string()))
    }

    /// Sets a key, enforcing that it is known to the schema.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if !self.schema.iter().any(|k| k.name == key) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Renders explicitly-set keys back to `key = value` lines (sorted).
    /// `parse(format(c))` is the identity on the key-value map.
    pub fn format(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn get_str(&self, key: &str) -> &str {
        if let Some(v) = self.values.get(key) {
            return v;
        }
        self.schema
            .iter()
            .find(|k| k.name == key)
            .unwrap_or_else(|| panic!("key `{key}` not in schema"))
            .default
    }

    pub fn get_int(&self, key: &str) -> Result<i64, ConfigError> {
        let v = self.get_str(key);
        v.parse().map_err(|_| ConfigError::BadValue {
            key: key.to_string(),
            value: v.to_string(),
            expected: "integer",
        })
    }

    pub fn get_float(&self, key: &str) -> Result<f64, ConfigError> {
        let v = self.get_str(key);
        v.parse().map_err(|_| ConfigError::BadValue {
            key: key.to_string(),
            value: v.to_string(),
            expected: "float",
        })
    }

    pub fn get_bool(&self, key: &str) -> Result<bool, ConfigError> {
        match self.get_str(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(ConfigError::BadValue {
                key: key.to_string(),
                value: v.to_string(),
                expected: "bool (true/false)",
            }),
        }
    }

    /// Comma-separated integer list.
    pub fn get_int_list(&self, key: &str) -> Result<Vec<i64>, ConfigError> {
        let v = self.get_str(key);
        if v.trim().is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|p| {
                p.trim().parse().map_err(|_| ConfigError::BadValue {
                    key: key.to_string(),
                    value: v.to_string(),
                    expected: "comma-separated integer list",
                })
            })
            .collect()
    }

    /// The explicitly-set key-value pairs (defaults are not materialized).
    pub fn set_pairs(&self) -> &BTreeMap<String, String> {
        &self.values
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Named tensors as stored in a checkpoint directory.
pub type NamedTensors = BTreeMap<String, TensorFile>;

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

/// Saves one tensor file per entry plus `manifest.txt` with lines
/// `name<TAB>filename<TAB>d1,d2,...`.
pub fn save_checkpoint(dir: &Path, entries: &NamedTensors) -> Result<(), TensorIoError> {
    fs::create_dir_all(dir).map_err(|e| TensorIoError::io(dir, e))?;
    // Clear stale tensor files so manifest and directory stay in bijection.
    for entry in fs::read_dir(dir).map_err(|e| TensorIoError::io(dir, e))? {
        let entry = entry.map_err(|e| TensorIoError::io(dir, e))?;
        let p = entry.path();
        if p.extension().map(|e| e == "vvot").unwrap_or(false) {
            fs::remove_file(&p).map_err(|e| TensorIoError::io(&p, e))?;
        }
    }
    let mut manifest = String::new();
    for (i, (name, tf)) in entries.iter().enumerate() {
        let filename = format!("t{:03}_{}.vvot", i, sanitize(name));
        write_tensor(&dir.join(&filename), &tf.dims, &tf.data)?;
        let dims: Vec<String> = tf.dims.iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{}\t{}\t{}\n", name, filename, dims.join(",")));
    }
    let mpath = dir.join("manifest.txt");
    let mut f = fs::File::create(&mpath).map_err(|e| TensorIoError::io(&mpath, e))?;
    f.write_all(manifest.as_bytes())
        .map_err(|e| TensorIoError::io(&mpath, e))
}

/// Loads a checkpoint, verifying that manifest entries and `.vvot` files in
/// the directory are in bijection and that dims match.
pub fn load_checkpoint(dir: &Path) -> Result<NamedTensors, TensorIoError> {
    let mpath = dir.join("manifest.txt");
    let text = fs::read_to_string(&mpath).map_err(|e| TensorIoError::io(&mpath, e))?;
    let mut out = NamedTensors::new();
    let mut listed = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(TensorIoError::Manifest(format!(
                "manifest line {} malformed: `{}`",
                i + 1,
                line
            )));
        }
        let (name, filename, dims_str) = (parts[0], parts[1], parts[2]);
        let dims: Vec<u32> = dims_str
            .split(',')
            .map(|d| {
                d.parse()
                    .map_err(|_| TensorIoError::Manifest(format!("bad dims `{}` for `{}`", dims_str, name)))
            })
            .collect::<Result<_, _>>()?;
        let tf = read_tensor(&dir.join(filename))?;
        if tf.dims != dims {
            return Err(TensorIoError::Manifest(format!(
                "dims mismatch for `{}`: manifest {:?}, file {:?}",
                name, dims, tf.dims
            )));
        }
        listed.push(filename.to_string());
        if out.insert(name.to_string(), tf).is_some() {
            return Err(TensorIoError::Manifest(format!("duplicate entry `{}`", name)));
        }
    }
    let mut on_disk: Vec<String> = fs::read_dir(dir)
        .map_err(|e| TensorIoError::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            if p.extension().map(|x| x == "vvot").unwrap_or(false) {
                p.file_name().map(|n| n.to_string_lossy().into_owned())
            } else {
                None
            }
        })
        .collect();
    on_disk.sort();
    let mut expected = listed.clone();
    expected.sort();
    if on_disk != expected {
        return Err(TensorIoError::Manifest(format!(
            "manifest and directory out of bijection: manifest {:?}, dir {:?}",
            expected, on_disk
        )));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Seeded random stream
// ---------------------------------------------------------------------------

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// f64 tensor as an on-disk float32 record.
pub fn tensor_file_from_f64(t: &Tensor) -> TensorFile {
    TensorFile {
        dims: t.shape.iter().map(|&d| d as u32).collect(),
        data: TensorData::F32(t.data.iter().map(|&v| v as f32).collect()),
    }
}

/// Derives an independent sub-seed from `(seed, tag)`; different tags give
/// uncorrelated streams for the same base seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut state = seed ^ tag.wrapping_mul(0xA24BAED4963EE407);
    splitmix64(&mut state)
}

/// Inverse-CDF Gumbel(0,1) transform of a uniform draw in (0,1).
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// Deterministic random stream: same seed gives the same draws on every
/// platform. Uniform, standard-normal (Box-Muller), and Gumbel(0,1) draws all
/// derive from one ChaCha8 word stream.
pub struct StreamRng {
    seed: u64,
    inner: rand_chacha::ChaCha8Rng,
}

impl StreamRng {
    pub fn new(seed: u64) -> Self {
        let mut s = seed;
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
        }
        StreamRng {
            seed,
            inner: rand_chacha::ChaCha8Rng::from_seed(key),
        }
    }

    /// Independent stream for a given index, derived from the base seed only
    /// (current position does not matter). One stream per worker/sample.
    pub fn split(&self, stream: u64) -> StreamRng {
        let mut s = self.seed ^ stream.wrapping_mul(0xA24BAED4963EE407);
        StreamRng::new(splitmix64(&mut s))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9007199254740992.0)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)` via Lemire's widening-multiply method.
    pub fn uniform_int(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Standard normal via Box-Muller (two uniforms per draw; no caching so
    /// the stream position stays easy to reason about).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn gumbel(&mut self) -> f64 {
        gumbel_from_uniform(self.uniform())
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }

    /// Tensor of i.i.d. normal draws scaled by `std`, rounded to the f32
    /// lattice (parameter initialization).
    pub fn normal_tensor(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push((self.normal() * std) as f32 as f64);
        }
        Tensor::new(shape.to_vec(), data)
    }
}

/// SHA-256 over the f32 little-endian encoding of named tensors. Used by
/// freeze audits: frozen parameter sets must keep an identical hash.
pub fn param_hash(entries: &[(&str, &Tensor)]) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (name, t) in entries {
        h.update(name.as_bytes());
        h.update([0u8]);
        for &d in &t.shape {
            h.update((d as u64).to_le_bytes());
        }
        for &v in &t.data {
            h.update((v as f32).to_le_bytes());
        }
    }
    h.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_by_two_f32_file_is_30_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.vvot");
        let data = TensorData::F32(vec![1.0, 2.0, 3.0, 4.0]);
        write_tensor(&path, &[2, 2], &data).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 30);
        let tf = read_tensor(&path).unwrap();
        assert_eq!(tf.dims, vec![2, 2]);
        assert_eq!(tf.data, data);
    }

    #[test]
    fn zero_valued_1x1_int_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.vvot");
        write_tensor(&path, &[1, 1], &TensorData::I32(vec![0])).unwrap();
        let tf = read_tensor(&path).unwrap();
        assert_eq!(tf.data, TensorData::I32(vec![0]));
    }

    #[test]
    fn random_3x5x7_f32_file_length_matches_format_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.vvot");
        let mut rng = StreamRng::new(0);
        let vals: Vec<f32> = (0..3 * 5 * 7).map(|_| rng.uniform() as f32).collect();
        write_tensor(&path, &[3, 5, 7], &TensorData::F32(vals)).unwrap();
        // 4 magic + 1 dtype + 1 ndim + 12 dims + 420 payload
        assert_eq!(fs::metadata(&path).unwrap().len(), 4 + 1 + 1 + 12 + 420);
    }

    #[test]
    fn bad_magic_truncation_and_unknown_dtype_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.vvot");
        write_tensor(&good, &[2, 2], &TensorData::F32(vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let mut bytes = fs::read(&good).unwrap();

        let bad_magic = dir.path().join("bad_magic.vvot");
        let mut b = bytes.clone();
        b[0..4].copy_from_slice(b"XXXX");
        fs::write(&bad_magic, &b).unwrap();
        assert!(matches!(read_tensor(&bad_magic), Err(TensorIoError::BadMagic { .. })));

        let truncated = dir.path().join("trunc.vvot");
        fs::write(&truncated, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            read_tensor(&truncated),
            Err(TensorIoError::Truncated { expected: 30, got: 26 })
        ));

        let bad_dtype = dir.path().join("bad_dtype.vvot");
        bytes[4] = 9;
        fs::write(&bad_dtype, &bytes).unwrap();
        assert!(matches!(read_tensor(&bad_dtype), Err(TensorIoError::UnknownDtype(9))));
    }

    proptest! {
        #[test]
        fn tensor_round_trip_identity(
            dims in proptest::collection::vec(1u32..=16, 1..=4),
            dtype in 0u8..3,
            seed in any::<u64>(),
        ) {
            let count: usize = dims.iter().map(|&d| d as usize).product();
            let mut rng = StreamRng::new(seed);
            let data = match dtype {
                0 => TensorData::F32((0..count).map(|_| rng.normal() as f32).collect()),
                1 => TensorData::I32((0..count).map(|_| rng.next_u64() as i32).collect()),
                _ => TensorData::U8((0..count).map(|_| rng.next_u64() as u8).collect()),
            };
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.vvot");
            write_tensor(&path, &dims, &data).unwrap();
            let tf = read_tensor(&path).unwrap();
            prop_assert_eq!(tf.dims, dims);
            prop_assert_eq!(tf.data, data);
        }

        #[test]
        fn config_format_parse_identity(
            entries in proptest::collection::btree_map(0usize..4, "[a-z0-9_ ]{0,12}", 0..4)
        ) {
            static KEYS: [KeySpec; 4] = [
                KeySpec { name: "alpha", default: "1", doc: "" },
                KeySpec { name: "beta", default: "x", doc: "" },
                KeySpec { name: "gamma", default: "", doc: "" },
                KeySpec { name: "delta", default: "0", doc: "" },
            ];
            let mut cfg = RunConfig::defaults(&KEYS);
            for (i, v) in &entries {
                // values are trimmed by the parser, so only store trimmed text
                cfg.set(KEYS[*i].name, v.trim()).unwrap();
            }
            let reparsed = RunConfig::parse(&cfg.format(), &KEYS).unwrap();
            prop_assert_eq!(reparsed.set_pairs(), cfg.set_pairs());
        }

        #[test]
        fn checkpoint_save_load_identity(
            n_tensors in 1usize..4,
            seed in any::<u64>(),
        ) {
            let mut rng = StreamRng::new(seed);
            let mut entries = NamedTensors::new();
            for i in 0..n_tensors {
                let rows = 1 + (rng.uniform_int(5) as u32);
                let cols = 1 + (rng.uniform_int(5) as u32);
                let vals: Vec<f32> = (0..rows * cols).map(|_| rng.normal() as f32).collect();
                entries.insert(
                    format!("layer{}.weight", i),
                    TensorFile { dims: vec![rows, cols], data: TensorData::F32(vals) },
                );
            }
            let dir = tempfile::tempdir().unwrap();
            save_checkpoint(dir.path(), &entries).unwrap();
            let loaded = load_checkpoint(dir.path()).unwrap();
            prop_assert_eq!(loaded, entries);
        }
    }

    #[test]
    fn checkpoint_bijection_violation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut entries = NamedTensors::new();
        entries.insert(
            "w".into(),
            TensorFile {
                dims: vec![1],
                data: TensorData::F32(vec![1.0]),
            },
        );
        save_checkpoint(dir.path(), &entries).unwrap();
        // An extra tensor file not in the manifest breaks the bijection.
        write_tensor(&dir.path().join("stray.vvot"), &[1], &TensorData::F32(vec![0.0])).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(TensorIoError::Manifest(_))));
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = StreamRng::new(42);
        let mut b = StreamRng::new(42);
        assert_eq!(a.uniform(), b.uniform());
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut s1 = a.split(3);
        let mut s2 = b.split(3);
        assert_eq!(s1.normal(), s2.normal());
    }

    #[test]
    fn gumbel_inverse_cdf_at_half() {
        // -ln(-ln(0.5)) = -ln(ln 2)
        let g = gumbel_from_uniform(0.5);
        assert!((g - 0.36651292058166435).abs() < 1e-12);
    }

    #[test]
    fn normal_mean_is_near_zero() {
        let mut rng = StreamRng::new(7);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| rng.normal()).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {}", mean);
    }

    #[test]
    fn empty_config_uses_documented_defaults() {
        static KEYS: [KeySpec; 2] = [
            KeySpec { name: "steps", default: "100", doc: "step count" },
            KeySpec { name: "list", default: "1,2", doc: "ints" },
        ];
        let cfg = RunConfig::parse("", &KEYS).unwrap();
        assert_eq!(cfg.get_int("steps").unwrap(), 100);
        assert_eq!(cfg.get_int_list("list").unwrap(), vec![1, 2]);
        let err = RunConfig::parse("bogus = 1", &KEYS).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }
}
