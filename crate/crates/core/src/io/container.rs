//! Binary tensor container.
//!
//! ```text
//! magic        8 bytes   "RSEGTC01"
//! header_len   u64 LE
//! header       header_len bytes of UTF-8 text
//! padding      zeros up to the next multiple of 64
//! payload      tensors, little-endian f32, each at a 64-aligned offset
//! ```
//!
//! Header lines, in order: `format_version: 1`, one `key: value` line per
//! metadata entry sorted by key, one `tensor: name f32 n,c,h,w offset nbytes`
//! line per tensor sorted by name (offsets relative to the payload start),
//! and `header_sha256: <hex>` over all preceding header bytes. Every line
//! ends with `\n`.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::WeightMap;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"RSEGTC01";
pub const FORMAT_VERSION: u32 = 1;
pub const ALIGN: usize = 64;

/// Well-known metadata keys.
pub mod keys {
    pub const PRESET: &str = "preset";
    pub const SCHEDULE: &str = "schedule";
    pub const NUM_CLASSES: &str = "num_classes";
    pub const NORM_MEAN: &str = "norm_mean";
    pub const NORM_STD: &str = "norm_std";
}

pub type Metadata = BTreeMap<String, String>;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub metadata: Metadata,
    pub tensors: WeightMap<f32>,
}

const RESERVED: [&str; 3] = ["format_version", "tensor", "header_sha256"];

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace() || c == ':' || c.is_control())
}

/// Serializes tensors and metadata. Tensor names must be unique, non-empty
/// and free of whitespace; metadata keys likewise, and values single-line.
pub fn encode_container(tensors: &[(&str, &Tensor<f32>)], metadata: &Metadata) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    for (name, _) in tensors {
        if !valid_token(name) {
            return Err(Error::Value(format!("invalid tensor name {name:?}")));
        }
        if !seen.insert(*name) {
            return Err(Error::Value(format!("duplicate tensor name '{name}'")));
        }
    }
    for (k, v) in metadata {
        if !valid_token(k) || RESERVED.contains(&k.as_str()) {
            return Err(Error::Value(format!("invalid metadata key {k:?}")));
        }
        if v.contains(['\n', '\r']) {
            return Err(Error::Value(format!("metadata value for '{k}' spans lines")));
        }
    }
    let mut sorted: Vec<&(&str, &Tensor<f32>)> = tensors.iter().collect();
    sorted.sort_by_key(|(n, _)| *n);

    let mut header = format!("format_version: {FORMAT_VERSION}\n");
    for (k, v) in metadata {
        let _ = writeln!(header, "{k}: {v}");
    }
    let mut offset = 0usize;
    for (name, t) in &sorted {
        let s = t.shape();
        let nbytes = t.len() * 4;
        let _ = writeln!(
            header,
            "tensor: {name} f32 {},{},{},{} {offset} {nbytes}",
            s.n, s.c, s.h, s.w
        );
        offset = align_up(offset + nbytes);
    }
    let digest = Sha256::digest(header.as_bytes());
    let _ = writeln!(header, "header_sha256: {}", hex(&digest));

    let payload_start = align_up(16 + header.len());
    let mut out = Vec::with_capacity(payload_start + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.resize(payload_start, 0);
    for (_, t) in &sorted {
        out.resize(align_up(out.len()), 0);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_container(path: &Path, tensors: &WeightMap<f32>, metadata: &Metadata) -> Result<()> {
    let entries: Vec<(&str, &Tensor<f32>)> = tensors.iter().map(|(k, v)| (k.as_str(), v)).collect();
    let bytes = encode_container(&entries, metadata)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Corruption(msg.into())
}

struct IndexEntry {
    name: String,
    shape: Shape,
    offset: usize,
    nbytes: usize,
}

fn parse_usize(s: &str, what: &str) -> Result<usize> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) || (s.len() > 1 && s.starts_with('0')) {
        return Err(corrupt(format!("malformed {what} '{s}'")));
    }
    s.parse().map_err(|_| corrupt(format!("{what} '{s}' out of range")))
}

fn parse_tensor_line(rest: &str) -> Result<IndexEntry> {
    let fields: Vec<&str> = rest.split(' ').collect();
    let [name, dtype, dims, offset, nbytes] = fields[..] else {
        return Err(corrupt(format!("malformed tensor entry '{rest}'")));
    };
    if !valid_token(name) {
        return Err(corrupt(format!("invalid tensor name {name:?}")));
    }
    if dtype != "f32" {
        return Err(Error::Format(format!("unsupported dtype '{dtype}' for '{name}'")));
    }
    let d: Vec<usize> = dims
        .split(',')
        .map(|x| parse_usize(x, "extent"))
        .collect::<Result<_>>()?;
    let [n, c, h, w] = d[..] else {
        return Err(corrupt(format!("'{name}' needs four extents")));
    };
    let shape = Shape::new(n, c, h, w);
    shape
        .validate()
        .map_err(|_| corrupt(format!("'{name}' has a zero extent")))?;
    let numel = [n, c, h, w]
        .iter()
        .try_fold(1usize, |a, &x| a.checked_mul(x))
        .and_then(|e| e.checked_mul(4))
        .ok_or_else(|| corrupt(format!("'{name}' is too large")))?;
    let entry = IndexEntry {
        name: name.to_string(),
        shape,
        offset: parse_usize(offset, "offset")?,
        nbytes: parse_usize(nbytes, "byte length")?,
    };
    if entry.nbytes != numel {
        return Err(corrupt(format!(
            "'{name}' byte length {} != 4 * {}",
            entry.nbytes,
            numel / 4
        )));
    }
    Ok(entry)
}

/// Parses and fully validates a container held in memory.
pub fn decode_container(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    if bytes.len() < 16 {
        return Err(corrupt("truncated header length"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let hlen = usize::try_from(hlen).map_err(|_| corrupt("header length out of range"))?;
    let header_end = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("header extends past end of file"))?;
    let header = std::str::from_utf8(&bytes[16..header_end]).map_err(|_| corrupt("header is not UTF-8"))?;

    // The checksum line covers everything before it.
    let body = header
        .strip_suffix('\n')
        .ok_or_else(|| corrupt("header does not end with a newline"))?;
    let (signed, last) = match body.rfind('\n') {
        Some(i) => (&header[..=i], &body[i + 1..]),
        None => ("", body),
    };
    let digest = last
        .strip_prefix("header_sha256: ")
        .ok_or_else(|| corrupt("missing header checksum"))?;
    if digest != hex(&Sha256::digest(signed.as_bytes())) {
        return Err(corrupt("header checksum mismatch"));
    }

    let mut lines = signed.lines();
    let version = lines
        .next()
        .and_then(|l| l.strip_prefix("format_version: "))
        .ok_or_else(|| Error::Format("missing format_version".into()))?;
    if version != FORMAT_VERSION.to_string() {
        return Err(Error::Format(format!("unsupported format version '{version}'")));
    }

    let mut metadata = Metadata::new();
    let mut index: Vec<IndexEntry> = Vec::new();
    for line in lines {
        let (key, value) = line
            .split_once(": ")
            .ok_or_else(|| corrupt(format!("malformed header line '{line}'")))?;
        if key == "tensor" {
            index.push(parse_tensor_line(value)?);
        } else {
            if !index.is_empty() || !valid_token(key) || RESERVED.contains(&key) {
                return Err(corrupt(format!("unexpected header key '{key}'")));
            }
            if metadata.last_key_value().is_some_and(|(k, _)| k.as_str() >= key) {
                return Err(corrupt(format!("metadata key '{key}' out of order")));
            }
            metadata.insert(key.to_string(), value.to_string());
        }
    }

    let payload_start = align_up(header_end);
    if payload_start > bytes.len() {
        return Err(corrupt("file truncated inside header padding"));
    }
    if bytes[header_end..payload_start].iter().any(|&b| b != 0) {
        return Err(corrupt("nonzero header padding"));
    }
    let payload = &bytes[payload_start..];

    let mut end = 0usize;
    for (i, e) in index.iter().enumerate() {
        if i > 0 && index[i - 1].name >= e.name {
            return Err(corrupt(format!("tensor '{}' duplicated or out of order", e.name)));
        }
        if e.offset % ALIGN != 0 {
            return Err(corrupt(format!(
                "'{}' offset {} not {ALIGN}-byte aligned",
                e.name, e.offset
            )));
        }
        if e.offset < end {
            return Err(corrupt(format!("'{}' overlaps the previous tensor", e.name)));
        }
        end = e
            .offset
            .checked_add(e.nbytes)
            .filter(|&x| x <= payload.len())
            .ok_or_else(|| corrupt(format!("'{}' extends past end of payload", e.name)))?;
    }
    if payload.len() != end {
        return Err(corrupt(format!(
            "payload is {} bytes, index covers {end}",
            payload.len()
        )));
    }

    let mut tensors = WeightMap::new();
    for e in index {
        let data = payload[e.offset..e.offset + e.nbytes]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(e.name, Tensor::from_vec(e.shape, data)?);
    }
    Ok(Container { metadata, tensors })
}
