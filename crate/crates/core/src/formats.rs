//! Shared serialization: canonical JSON and config digests, the artifact
//! header, the checkpoint container, and binary PGM.
//!
//! Canonical JSON has object keys sorted and floats written as the shortest
//! decimal that round-trips, so the same value hashes identically on every
//! platform.
//!
//! Checkpoint container layout (little-endian):
//!
//! ```text
//! "DCKP"            4 bytes magic
//! version: u16      currently 1
//! reserved: u16     0
//! header_len: u32
//! header            canonical JSON, `header_len` bytes
//! arrays            f64 values of every array listed in the header, in order
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Param, ParamStore, Tag};

pub const FORMAT_VERSION: u16 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DCKP";

/// Serializes `value` as canonical JSON. Non-finite floats are rejected:
/// `serde_json` would silently turn them into `null`, so any `null` in the
/// tree is treated as a non-canonicalizable value.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let tree = serde_json::to_value(value)?;
    reject_nulls(&tree, "$")?;
    Ok(serde_json::to_string(&tree)?)
}

fn reject_nulls(v: &Value, path: &str) -> Result<()> {
    match v {
        Value::Null => Err(Error::NonCanonical(format!(
            "{path} is null or non-finite"
        ))),
        Value::Array(items) => items
            .iter()
            .enumerate()
            .try_for_each(|(i, item)| reject_nulls(item, &format!("{path}[{i}]"))),
        Value::Object(map) => map
            .iter()
            .try_for_each(|(k, item)| reject_nulls(item, &format!("{path}.{k}"))),
        _ => Ok(()),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of the canonical JSON form of `value`, as 64 hex characters.
pub fn digest<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(canonical_json(value)?.as_bytes()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactKind {
    Corpus,
    Classifier,
    Weights,
    Doll,
    Segmodel,
    Report,
}

/// Provenance stamp embedded in every artifact the pipeline writes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub magic: String,
    pub version: u16,
    pub kind: ArtifactKind,
    pub config_digest: String,
    pub created_by: String,
}

impl ArtifactHeader {
    pub fn new(kind: ArtifactKind, config_digest: impl Into<String>) -> Self {
        ArtifactHeader {
            magic: "DOLL".into(),
            version: FORMAT_VERSION,
            kind,
            config_digest: config_digest.into(),
            created_by: concat!("doll ", env!("CARGO_PKG_VERSION")).into(),
        }
    }

    pub fn validate(&self, expected: ArtifactKind) -> Result<()> {
        if self.magic != "DOLL" {
            return Err(Error::format(0, format!("bad artifact magic `{}`", self.magic)));
        }
        if self.kind != expected {
            return Err(Error::format(0, format!("expected {expected:?} artifact, found {:?}", self.kind)));
        }
        if self.config_digest.len() != 64 || !self.config_digest.chars().all(|c| c.is_ascii_hexdigit()) {
            return Err(Error::format(0, "config digest is not a 256-bit hex string"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub tag: Tag,
}

/// JSON header of a checkpoint container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub artifact: ArtifactHeader,
    pub arch_id: String,
    pub seed: u64,
    pub in_channels: usize,
    pub out_channels: usize,
    pub iteration: usize,
    pub metric_name: String,
    pub val_metric: f64,
    pub arrays: Vec<ArrayEntry>,
}

pub fn encode_checkpoint(header: &CheckpointHeader, params: &ParamStore) -> Result<Vec<u8>> {
    header.artifact.validate(header.artifact.kind)?;
    let json = canonical_json(header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    for entry in &header.arrays {
        let p = params.get(&entry.name);
        if p.shape != entry.shape {
            return Err(Error::shape(format!("{:?}", entry.shape), format!("{:?}", p.shape)));
        }
        for v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn array_entries(params: &ParamStore) -> Vec<ArrayEntry> {
    params
        .iter()
        .map(|(name, p)| ArrayEntry {
            name: name.clone(),
            shape: p.shape.clone(),
            tag: p.tag,
        })
        .collect()
}

/// Small cursor that reports the offset of the first short read.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub(crate) fn read_magic_version(bytes: &[u8], magic: &[u8; 4]) -> Result<usize> {
    let mut r = Reader { bytes, pos: 0 };
    let m = r.take(4, "magic")?;
    if m != magic {
        return Err(Error::format(0, format!("bad magic {m:?}, expected {magic:?}")));
    }
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    Ok(r.pos)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, ParamStore)> {
    let mut r = Reader {
        bytes,
        pos: read_magic_version(bytes, CHECKPOINT_MAGIC)?,
    };
    let _reserved = r.u16("reserved")?;
    let len = r.u32("header length")? as usize;
    let header_at = r.pos as u64;
    let header: CheckpointHeader = serde_json::from_slice(r.take(len, "header")?)
        .map_err(|e| Error::format(header_at, format!("bad header: {e}")))?;
    let mut params = ParamStore::new();
    for entry in &header.arrays {
        let count: usize = entry.shape.iter().product();
        let raw = r.take(count * 8, &format!("array `{}`", entry.name))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(
            entry.name.clone(),
            Param {
                shape: entry.shape.clone(),
                tag: entry.tag,
                data,
            },
        );
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after last array"));
    }
    Ok((header, params))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

/// Reads a binary (P5, maxval 255) PGM, returning `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos as u64, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::format(0, format!("not a binary PGM: {}", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format(0, format!("bad PGM field `{s}`")));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(Error::format(0, format!("unsupported maxval {maxval}")));
    }
    if bytes.len() < pos + w * h {
        return Err(Error::format(bytes.len() as u64, "truncated PGM raster"));
    }
    Ok((w, h, bytes[pos..pos + w * h].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn empty_config_digest_is_pinned() {
        // sha256 of the two bytes "{}", cross-checked with Python hashlib
        let empty: BTreeMap<String, f64> = BTreeMap::new();
        assert_eq!(
            digest(&empty).unwrap(),
            "44136fa355b3678a1146ad16f7e8649e94fb4fc21fe77e8310c060f61caaff8a"
        );
    }

    #[test]
    fn canonical_form_sorts_keys_and_shortens_floats() {
        #[derive(Serialize)]
        struct Cfg {
            zeta: f64,
            alpha: u32,
        }
        let s = canonical_json(&Cfg { zeta: 0.1, alpha: 3 }).unwrap();
        assert_eq!(s, r#"{"alpha":3,"zeta":0.1}"#);
    }

    #[test]
    fn nan_is_not_canonicalizable() {
        #[derive(Serialize)]
        struct Cfg {
            tau: f64,
        }
        let err = digest(&Cfg { tau: f64::NAN }).unwrap_err();
        assert!(matches!(err, Error::NonCanonical(_)));
    }

    #[test]
    fn header_validation() {
        let h = ArtifactHeader::new(ArtifactKind::Doll, "a".repeat(64));
        h.validate(ArtifactKind::Doll).unwrap();
        assert!(h.validate(ArtifactKind::Report).is_err());
        let bad = ArtifactHeader::new(ArtifactKind::Doll, "xyz");
        assert!(bad.validate(ArtifactKind::Doll).is_err());
    }

    #[test]
    fn pgm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let px: Vec<u8> = (0..12).collect();
        write_pgm(&path, 4, 3, &px).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), (4, 3, px));
    }
}
