//! Binary tensor container (.urtn) and checkpoint directories.
//!
//! Layout: magic "URTN", u16 version (LE), u8 dtype (1 = f32, 2 = f64,
//! 3 = complex-f32 interleaved), u8 ndim, ndim x u64 extents (LE), then the
//! row-major little-endian payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"URTN";
const VERSION: u16 = 1;

pub const DTYPE_F32: u8 = 1;
pub const DTYPE_F64: u8 = 2;
pub const DTYPE_C32: u8 = 3;

fn write_header(out: &mut Vec<u8>, dtype: u8, shape: &[usize]) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

fn read_header(path: &Path, buf: &[u8]) -> Result<(u8, Vec<usize>, usize)> {
    let name = path.display();
    if buf.len() < 8 {
        return Err(Error::Data(format!("{name}: truncated container header")));
    }
    if &buf[0..4] != MAGIC {
        return Err(Error::Data(format!("{name}: bad magic bytes, not a URTN container")));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != VERSION {
        return Err(Error::Data(format!("{name}: unsupported container version {version}")));
    }
    let dtype = buf[6];
    let ndim = buf[7] as usize;
    let header = 8 + ndim * 8;
    if buf.len() < header {
        return Err(Error::Data(format!("{name}: truncated shape table")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let mut b = [0u8; 8];
        b.copy_from_slice(&buf[8 + i * 8..16 + i * 8]);
        shape.push(u64::from_le_bytes(b) as usize);
    }
    Ok((dtype, shape, header))
}

fn payload_check(path: &Path, buf: &[u8], header: usize, n: usize, elem: usize) -> Result<()> {
    let want = header + n * elem;
    if buf.len() != want {
        return Err(Error::Data(format!(
            "{}: truncated container ({} bytes, expected {})",
            path.display(),
            buf.len(),
            want
        )));
    }
    Ok(())
}

/// Write a real tensor; dtype follows the element type.
pub fn save_real<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut out = Vec::with_capacity(16 + t.len() * 8);
    write_header(&mut out, T::DTYPE_CODE, t.shape());
    for &v in t.data() {
        match T::DTYPE_CODE {
            DTYPE_F32 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
            _ => out.extend_from_slice(&v.as_f64().to_le_bytes()),
        }
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn load_real<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    let (dtype, shape, header) = read_header(path, &buf)?;
    if dtype != T::DTYPE_CODE {
        return Err(Error::Dtype(format!(
            "{}: container dtype code {dtype}, expected {}",
            path.display(),
            T::DTYPE_CODE
        )));
    }
    let n: usize = shape.iter().product();
    let elem = if dtype == DTYPE_F32 { 4 } else { 8 };
    payload_check(path, &buf, header, n, elem)?;
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let off = header + i * elem;
        let v = if dtype == DTYPE_F32 {
            f32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]]) as f64
        } else {
            let mut b = [0u8; 8];
            b.copy_from_slice(&buf[off..off + 8]);
            f64::from_le_bytes(b)
        };
        data.push(T::of_f64(v));
    }
    Tensor::new(shape, data)
}

/// Write complex-f32 interleaved (re, im pairs) from separate planes.
pub fn save_complex(path: &Path, shape: &[usize], re: &[f32], im: &[f32]) -> Result<()> {
    let n: usize = shape.iter().product();
    if re.len() != n || im.len() != n {
        return Err(Error::Shape(format!(
            "save_complex: shape {:?} implies {} elements, planes have {}/{}",
            shape,
            n,
            re.len(),
            im.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + n * 8);
    write_header(&mut out, DTYPE_C32, shape);
    for i in 0..n {
        out.extend_from_slice(&re[i].to_le_bytes());
        out.extend_from_slice(&im[i].to_le_bytes());
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Read complex-f32 interleaved into (shape, re, im).
pub fn load_complex(path: &Path) -> Result<(Vec<usize>, Vec<f32>, Vec<f32>)> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    let (dtype, shape, header) = read_header(path, &buf)?;
    if dtype != DTYPE_C32 {
        return Err(Error::Dtype(format!(
            "{}: container dtype code {dtype}, expected {DTYPE_C32} (complex-f32)",
            path.display()
        )));
    }
    let n: usize = shape.iter().product();
    payload_check(path, &buf, header, n, 8)?;
    let mut re = Vec::with_capacity(n);
    let mut im = Vec::with_capacity(n);
    for i in 0..n {
        let off = header + i * 8;
        re.push(f32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]]));
        im.push(f32::from_le_bytes([buf[off + 4], buf[off + 5], buf[off + 6], buf[off + 7]]));
    }
    Ok((shape, re, im))
}

#[derive(Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub version: u32,
    pub step_count: u64,
    pub params: BTreeMap<String, ParamFileEntry>,
    /// Model metadata (kind, architecture config, unroll settings).
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
pub struct ParamFileEntry {
    pub file: String,
    pub shape: Vec<usize>,
}

/// Checkpoint = directory of one container per parameter plus a JSON index.
pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    store: &ParamStore<T>,
    meta: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut params = BTreeMap::new();
    for name in store.names() {
        let file = format!("{name}.urtn");
        let t = store.get(name)?;
        save_real(&dir.join(&file), t)?;
        params.insert(name.to_string(), ParamFileEntry { file, shape: t.shape().to_vec() });
    }
    let index = CheckpointIndex { version: 1, step_count: store.step_count(), params, meta };
    fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(ParamStore<T>, CheckpointIndex)> {
    let raw = fs::read_to_string(dir.join("index.json"))
        .map_err(|e| Error::Data(format!("{}: {e}", dir.join("index.json").display())))?;
    let index: CheckpointIndex = serde_json::from_str(&raw)?;
    if index.version != 1 {
        return Err(Error::Data(format!("unsupported checkpoint version {}", index.version)));
    }
    let mut store = ParamStore::new();
    for (name, entry) in &index.params {
        let t = load_real::<T>(&dir.join(&entry.file))?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Data(format!(
                "checkpoint param '{name}': file shape {:?} != index shape {:?}",
                t.shape(),
                entry.shape
            )));
        }
        store.insert(name, t);
    }
    store.set_step_count(index.step_count);
    Ok((store, index))
}
