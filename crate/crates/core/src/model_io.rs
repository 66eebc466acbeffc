//! Single-file model container.
//!
//! ```text
//! pgnn-model v1\n
//! sha256 <64 hex digits>\n
//! length <body byte count>\n
//! <body>
//! ```
//!
//! The body starts with `key=value` provenance lines ended by an empty line,
//! followed by a little-endian binary payload:
//!
//! | field | encoding |
//! |---|---|
//! | layer count `L` | `u32` |
//! | per layer: input dim, output dim, activation | `u32`, `u32`, `u8` (0 ReLU, 1 identity) |
//! | per layer: weights (row-major), biases | `f64` × out·in, `f64` × out |
//! | mask flag | `u8` |
//! | per layer when flagged: mask bitset, row-major, LSB first | `ceil(out·in / 8)` bytes |
//! | target layout (7 column indices) | `u32` × 7 |
//! | feature scaler: width `w`, minima, maxima | `u32`, `f64` × w, `f64` × w |
//! | target scaler: same | |
//!
//! The checksum covers the whole body. Files are written to a temporary
//! sibling and renamed into place, so a crash never leaves a file with a
//! valid checksum and partial content.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::MinMaxScaler;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{Activation, LayerSpec, Mlp};
use crate::physics::{TargetLayout, N_TARGETS};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "pgnn-model v";

/// Provenance stored in the text part of the file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub seed: u64,
    pub lambda: f64,
    /// `standard` or `physics-guided` for pruned models.
    pub prune_scheme: Option<String>,
    pub prune_kind: Option<String>,
    pub ratio: Option<f64>,
    pub alpha: Option<f64>,
    /// Free-form extra entries.
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub model: Mlp,
    pub feature_scaler: MinMaxScaler,
    pub target_scaler: MinMaxScaler,
    pub layout: TargetLayout,
    pub meta: ModelMeta,
}

impl ModelBundle {
    fn validate(&self) -> Result<()> {
        if self.feature_scaler.width() != self.model.input_dim() {
            return Err(Error::ModelFile(format!(
                "feature scaler width {} does not match model input {}",
                self.feature_scaler.width(),
                self.model.input_dim()
            )));
        }
        if self.target_scaler.width() != self.model.output_dim() {
            return Err(Error::ModelFile(format!(
                "target scaler width {} does not match model output {}",
                self.target_scaler.width(),
                self.model.output_dim()
            )));
        }
        self.layout.validate()
    }
}

fn check_text(key: &str, value: &str) -> Result<()> {
    if value.contains('\n') || value.contains('\r') || key.contains('=') || key.contains('\n') || key.is_empty() {
        return Err(Error::ModelFile(format!("metadata entry {key:?} cannot be stored as a text line")));
    }
    Ok(())
}

fn encode_meta(meta: &ModelMeta) -> Result<String> {
    let mut lines: Vec<(String, String)> = vec![
        ("seed".into(), meta.seed.to_string()),
        ("lambda".into(), meta.lambda.to_string()),
    ];
    if let Some(s) = &meta.prune_scheme {
        lines.push(("prune_scheme".into(), s.clone()));
    }
    if let Some(s) = &meta.prune_kind {
        lines.push(("prune_kind".into(), s.clone()));
    }
    if let Some(v) = meta.ratio {
        lines.push(("ratio".into(), v.to_string()));
    }
    if let Some(v) = meta.alpha {
        lines.push(("alpha".into(), v.to_string()));
    }
    for (k, v) in &meta.extra {
        lines.push((format!("extra.{k}"), v.clone()));
    }
    let mut out = String::new();
    for (k, v) in lines {
        check_text(&k, &v)?;
        out.push_str(&format!("{k}={v}\n"));
    }
    out.push('\n');
    Ok(out)
}

fn decode_meta(text: &str) -> Result<ModelMeta> {
    let mut meta = ModelMeta::default();
    let num = |k: &str, v: &str| -> Result<f64> {
        v.parse()
            .map_err(|_| Error::ModelFile(format!("metadata {k} is not a number: {v:?}")))
    };
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::ModelFile(format!("malformed metadata line {line:?}")))?;
        match k {
            "seed" => {
                meta.seed = v
                    .parse()
                    .map_err(|_| Error::ModelFile(format!("metadata seed is not an integer: {v:?}")))?
            }
            "lambda" => meta.lambda = num(k, v)?,
            "prune_scheme" => meta.prune_scheme = Some(v.to_string()),
            "prune_kind" => meta.prune_kind = Some(v.to_string()),
            "ratio" => meta.ratio = Some(num(k, v)?),
            "alpha" => meta.alpha = Some(num(k, v)?),
            _ => match k.strip_prefix("extra.") {
                Some(name) => {
                    meta.extra.insert(name.to_string(), v.to_string());
                }
                None => return Err(Error::ModelFile(format!("unknown metadata key {k:?}"))),
            },
        }
    }
    Ok(meta)
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::ModelFile(format!("{v} does not fit in 32 bits")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64s(buf: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_scaler(buf: &mut Vec<u8>, s: &MinMaxScaler) -> Result<()> {
    put_u32(buf, s.width())?;
    put_f64s(buf, &s.min);
    put_f64s(buf, &s.max);
    Ok(())
}

fn encode_payload(b: &ModelBundle) -> Result<Vec<u8>> {
    let m = &b.model;
    let mut buf = Vec::new();
    put_u32(&mut buf, m.layers().len())?;
    for l in m.layers() {
        put_u32(&mut buf, l.input_dim)?;
        put_u32(&mut buf, l.output_dim)?;
        buf.push(match l.activation {
            Activation::Relu => 0,
            Activation::Identity => 1,
        });
    }
    for (w, bias) in m.weights().iter().zip(m.biases()) {
        put_f64s(&mut buf, w.as_slice());
        put_f64s(&mut buf, bias);
    }
    match m.masks() {
        None => buf.push(0),
        Some(masks) => {
            buf.push(1);
            for mask in masks {
                let bits = mask.as_slice();
                let mut bytes = vec![0u8; bits.len().div_ceil(8)];
                for (i, &v) in bits.iter().enumerate() {
                    if v != 0.0 {
                        bytes[i / 8] |= 1 << (i % 8);
                    }
                }
                buf.extend_from_slice(&bytes);
            }
        }
    }
    for i in b.layout.indices() {
        put_u32(&mut buf, i)?;
    }
    put_scaler(&mut buf, &b.feature_scaler)?;
    put_scaler(&mut buf, &b.target_scaler)?;
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::ModelFile("payload ends early".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::ModelFile("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn scaler(&mut self) -> Result<MinMaxScaler> {
        let w = self.u32()?;
        Ok(MinMaxScaler {
            min: self.f64s(w)?,
            max: self.f64s(w)?,
        })
    }
}

fn decode_payload(buf: &[u8], meta: ModelMeta) -> Result<ModelBundle> {
    let mut r = Reader { buf, pos: 0 };
    let n = r.u32()?;
    if n == 0 || n > 1024 {
        return Err(Error::ModelFile(format!("implausible layer count {n}")));
    }
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let input_dim = r.u32()?;
        let output_dim = r.u32()?;
        let activation = match r.u8()? {
            0 => Activation::Relu,
            1 => Activation::Identity,
            a => return Err(Error::ModelFile(format!("unknown activation code {a}"))),
        };
        layers.push(LayerSpec {
            input_dim,
            output_dim,
            activation,
        });
    }
    let mut weights = Vec::with_capacity(n);
    let mut biases = Vec::with_capacity(n);
    for l in &layers {
        let count = l
            .input_dim
            .checked_mul(l.output_dim)
            .ok_or_else(|| Error::ModelFile("layer size overflow".into()))?;
        weights.push(Matrix::from_vec(l.output_dim, l.input_dim, r.f64s(count)?)?);
        biases.push(r.f64s(l.output_dim)?);
    }
    let masks = match r.u8()? {
        0 => None,
        1 => {
            let mut ms = Vec::with_capacity(n);
            for (l, w) in layers.iter().zip(&weights) {
                let count = l.input_dim * l.output_dim;
                let bytes = r.take(count.div_ceil(8))?;
                let data: Vec<f64> = (0..count)
                    .map(|i| f64::from((bytes[i / 8] >> (i % 8)) & 1))
                    .collect();
                if data.iter().zip(w.as_slice()).any(|(&m, &v)| m == 0.0 && v != 0.0) {
                    return Err(Error::ModelFile("a masked weight is stored as non-zero".into()));
                }
                ms.push(Matrix::from_vec(l.output_dim, l.input_dim, data)?);
            }
            Some(ms)
        }
        f => return Err(Error::ModelFile(format!("unknown mask flag {f}"))),
    };
    let mut idx = [0usize; N_TARGETS];
    for i in idx.iter_mut() {
        *i = r.u32()?;
    }
    let layout = TargetLayout {
        dbh_dt: idx[0],
        b_n: idx[1],
        b_e: idx[2],
        dphi_dt: idx[3],
        v: idx[4],
        bz_imf: idx[5],
        theta: idx[6],
    };
    let feature_scaler = r.scaler()?;
    let target_scaler = r.scaler()?;
    if r.pos != buf.len() {
        return Err(Error::ModelFile(format!("{} trailing payload bytes", buf.len() - r.pos)));
    }
    let model = Mlp::from_parts(layers, weights, biases, masks)
        .map_err(|e| Error::ModelFile(format!("inconsistent model: {e}")))?;
    let bundle = ModelBundle {
        model,
        feature_scaler,
        target_scaler,
        layout,
        meta,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Serializes a bundle to bytes.
pub fn to_bytes(bundle: &ModelBundle) -> Result<Vec<u8>> {
    bundle.validate()?;
    let mut body = encode_meta(&bundle.meta)?.into_bytes();
    body.extend_from_slice(&encode_payload(bundle)?);
    let digest = hex::encode(Sha256::digest(&body));
    let mut out = format!("{MAGIC}{FORMAT_VERSION}\nsha256 {digest}\nlength {}\n", body.len()).into_bytes();
    out.extend_from_slice(&body);
    Ok(out)
}

fn header_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::ModelFile("truncated header".into()))?;
    let line = std::str::from_utf8(&rest[..nl]).map_err(|_| Error::ModelFile("header is not UTF-8".into()))?;
    *pos += nl + 1;
    Ok(line)
}

/// Parses and verifies a serialized bundle.
pub fn from_bytes(bytes: &[u8]) -> Result<ModelBundle> {
    let mut pos = 0;
    let magic = header_line(bytes, &mut pos)?;
    let version: u32 = magic
        .strip_prefix(MAGIC)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::ModelFile("not a pgnn model file".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let stored = header_line(bytes, &mut pos)?
        .strip_prefix("sha256 ")
        .ok_or_else(|| Error::ModelFile("missing checksum line".into()))?
        .to_string();
    let length: usize = header_line(bytes, &mut pos)?
        .strip_prefix("length ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::ModelFile("missing length line".into()))?;
    let body = &bytes[pos..];
    if body.len() != length {
        return Err(Error::ModelFile(format!(
            "body is {} bytes, header says {length} (truncated or padded file)",
            body.len()
        )));
    }
    let computed = hex::encode(Sha256::digest(body));
    if computed != stored {
        return Err(Error::Checksum { stored, computed });
    }
    let split = body
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::ModelFile("metadata block is not terminated".into()))?;
    let meta_text =
        std::str::from_utf8(&body[..split]).map_err(|_| Error::ModelFile("metadata is not UTF-8".into()))?;
    let meta = decode_meta(meta_text)?;
    decode_payload(&body[split + 2..], meta)
}

/// Writes `bundle` to `path` atomically.
pub fn save(bundle: &ModelBundle, path: &Path) -> Result<()> {
    let bytes = to_bytes(bundle)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::ModelFile(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelBundle> {
    from_bytes(&fs::read(path)?)
}
