//! On-disk formats.
//!
//! RTQT (one tensor): magic `RTQT`, u32 version 1, u8 dtype (0 = f32,
//! 1 = f64), u32 ndim, ndim x u32 dims, then the row-major little-endian
//! payload.
//!
//! RTQC (checkpoint): magic `RTQC`, u32 version 1, u32 length + canonical
//! JSON model config, u32 parameter count, then per parameter a u32 name
//! length, the UTF-8 name and an RTQT blob. Loading into a different
//! precision casts through f64, so f32 -> f64 -> f32 is lossless.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig};
use crate::real::{Dtype, Real};
use crate::tensor::Tensor4;

const RTQT_MAGIC: &[u8; 4] = b"RTQT";
const RTQC_MAGIC: &[u8; 4] = b"RTQC";
const VERSION: u32 = 1;
const MAX_NDIM: usize = 16;

/// A decoded RTQT tensor in its stored precision.
#[derive(Debug, Clone, PartialEq)]
pub enum RawTensor {
    F32 { dims: Vec<usize>, data: Vec<f32> },
    F64 { dims: Vec<usize>, data: Vec<f64> },
}

impl RawTensor {
    pub fn dims(&self) -> &[usize] {
        match self {
            RawTensor::F32 { dims, .. } | RawTensor::F64 { dims, .. } => dims,
        }
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            RawTensor::F32 { .. } => Dtype::F32,
            RawTensor::F64 { .. } => Dtype::F64,
        }
    }

    pub fn to_vec<T: Real>(&self) -> Vec<T> {
        match self {
            RawTensor::F32 { data, .. } => data.iter().map(|&v| T::of(v as f64)).collect(),
            RawTensor::F64 { data, .. } => data.iter().map(|&v| T::of(v)).collect(),
        }
    }
}

pub fn encode_rtqt<T: Real>(dims: &[usize], data: &[T], out: &mut Vec<u8>) -> Result<()> {
    let n: usize = dims.iter().product();
    if n != data.len() {
        return Err(Error::shape(
            "encode_rtqt",
            format!("{n} values for dims {dims:?}"),
            data.len(),
        ));
    }
    if dims.len() > MAX_NDIM {
        return Err(Error::invalid(
            "encode_rtqt",
            format!("{} dims exceeds {MAX_NDIM}", dims.len()),
        ));
    }
    out.extend_from_slice(RTQT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE as u8);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::invalid("encode_rtqt", format!("dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.reserve(data.len() * T::DTYPE.size());
    for &v in data {
        v.write_le(out);
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| Error::format("RTQT", format!("truncated {what}: {e}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R, format: &'static str, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::format(format, format!("truncated {what}: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn decode_rtqt<R: Read>(r: &mut R) -> Result<RawTensor> {
    let magic = read_exact(r, 4, "magic")?;
    if magic != RTQT_MAGIC {
        return Err(Error::format("RTQT", format!("bad magic {magic:?}")));
    }
    let version = read_u32(r, "RTQT", "version")?;
    if version != VERSION {
        return Err(Error::format("RTQT", format!("unsupported version {version}")));
    }
    let code = read_exact(r, 1, "dtype")?[0];
    let dtype = Dtype::from_code(code).ok_or_else(|| Error::format("RTQT", format!("unknown dtype {code}")))?;
    let ndim = read_u32(r, "RTQT", "ndim")? as usize;
    if ndim > MAX_NDIM {
        return Err(Error::format("RTQT", format!("ndim {ndim} exceeds {MAX_NDIM}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(read_u32(r, "RTQT", "dims")? as usize);
    }
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::format("RTQT", "element count overflows"))?;
    let bytes = read_exact(r, n * dtype.size(), "payload")?;
    Ok(match dtype {
        Dtype::F32 => RawTensor::F32 {
            dims,
            data: bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        },
        Dtype::F64 => RawTensor::F64 {
            dims,
            data: bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        },
    })
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    {
        let mut f = BufWriter::new(fs::File::create(&tmp)?);
        f.write_all(bytes)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_tensor<T: Real>(path: &Path, t: &Tensor4<T>) -> Result<()> {
    let mut out = Vec::new();
    encode_rtqt(&t.dims(), t.data(), &mut out)?;
    atomic_write(path, &out)
}

/// Loads a rank-4 (or lower, padded with leading ones) tensor, casting to `T`.
pub fn load_tensor<T: Real>(path: &Path) -> Result<Tensor4<T>> {
    let bytes = fs::read(path)?;
    let raw = decode_rtqt(&mut bytes.as_slice())?;
    raw_to_tensor4(&raw)
}

pub fn raw_to_tensor4<T: Real>(raw: &RawTensor) -> Result<Tensor4<T>> {
    let d = raw.dims();
    if d.len() > 4 {
        return Err(Error::format("RTQT", format!("expected at most 4 dims, found {d:?}")));
    }
    let mut dims = [1usize; 4];
    dims[4 - d.len()..].copy_from_slice(d);
    Tensor4::from_vec(dims, raw.to_vec())
}

/// Canonical JSON: object keys sorted, no whitespace.
pub fn canonical_json<S: serde::Serialize>(value: &S) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&sort_keys(v))?)
}

fn sort_keys(v: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match v {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, sort_keys(v))).collect())
        }
        Value::Array(a) => Value::Array(a.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

pub fn encode_checkpoint<T: Real>(model: &Model<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(RTQC_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let json = canonical_json(model.config())?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        encode_rtqt(&p.dims, &p.data, &mut out)?;
    }
    Ok(out)
}

/// Decodes a checkpoint into precision `T` (casting if it was stored in the
/// other precision). Also returns the stored precision.
pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<(Model<T>, Dtype)> {
    let r = &mut &bytes[..];
    let magic = read_exact(r, 4, "magic")?;
    if magic != RTQC_MAGIC {
        return Err(Error::format("RTQC", format!("bad magic {magic:?}")));
    }
    let version = read_u32(r, "RTQC", "version")?;
    if version != VERSION {
        return Err(Error::format("RTQC", format!("unsupported version {version}")));
    }
    let len = read_u32(r, "RTQC", "config length")? as usize;
    let json = read_exact(r, len, "config")?;
    let cfg: ModelConfig = serde_json::from_slice(&json)?;
    let count = read_u32(r, "RTQC", "parameter count")? as usize;
    let mut params = Vec::with_capacity(count.min(1024));
    let mut dtype = T::DTYPE;
    for _ in 0..count {
        let nlen = read_u32(r, "RTQC", "name length")? as usize;
        let name =
            String::from_utf8(read_exact(r, nlen, "name")?).map_err(|_| Error::format("RTQC", "parameter name is not UTF-8"))?;
        let raw = decode_rtqt(r)?;
        dtype = raw.dtype();
        params.push((name, raw.dims().to_vec(), raw.to_vec::<T>()));
    }
    if !r.is_empty() {
        return Err(Error::format("RTQC", format!("{} trailing bytes", r.len())));
    }
    Ok((Model::from_params(&cfg, params)?, dtype))
}

pub fn save_checkpoint<T: Real>(path: &Path, model: &Model<T>) -> Result<()> {
    atomic_write(path, &encode_checkpoint(model)?)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Model<T>> {
    Ok(decode_checkpoint(&fs::read(path)?)?.0)
}

/// Palette-indexed 8-bit PNG of a label map; `palette` holds RGB triples.
pub fn write_label_png(path: &Path, labels: &[u8], width: usize, height: usize, palette: &[[u8; 3]]) -> Result<()> {
    if labels.len() != width * height {
        return Err(Error::shape(
            "write_label_png",
            format!("{width}x{height} labels"),
            labels.len(),
        ));
    }
    let mut pal: Vec<u8> = palette.iter().flatten().copied().collect();
    pal.resize(256 * 3, 0);
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut bytes, width as u32, height as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_palette(pal);
        let mut w = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        w.write_image_data(labels).map_err(|e| Error::Png(e.to_string()))?;
        w.finish().map_err(|e| Error::Png(e.to_string()))?;
    }
    atomic_write(path, &bytes)
}

/// Reads a PNG as `(1, channels, h, w)` with values in `[0, 1]`; palette
/// images are expanded, alpha is dropped, 16-bit samples are reduced to 8.
pub fn read_png_image<T: Real>(path: &Path) -> Result<Tensor4<T>> {
    let file = std::io::BufReader::new(fs::File::open(path)?);
    let mut dec = png::Decoder::new(file);
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let (channels, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(Error::Png("palette was not expanded".into())),
    };
    Ok(Tensor4::from_fn([1, keep, h, w], |[_, c, i, j]| {
        T::of(buf[i * info.line_size + j * channels + c] as f64 / 255.0)
    }))
}
