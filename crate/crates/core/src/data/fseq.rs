//! `FSEQ` feature files and the CSV dataset index.
//!
//! ```text
//! "FSEQ" | u16 version | u8 modality | u32 N | u32 D | N*D f32 | u32 crc32
//! ```
//!
//! All integers little-endian; the CRC covers every byte after the magic.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, FeatureSequence, Modality, Sample};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FSEQ";
pub const VERSION: u16 = 1;
const HEADER: usize = 4 + 2 + 1 + 4 + 4;
pub const INDEX_FILE: &str = "index.csv";

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn encode_fseq(modality: Modality, seq: &FeatureSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + seq.data().len() * 4 + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(modality.code());
    out.extend_from_slice(&(seq.snippets() as u32).to_le_bytes());
    out.extend_from_slice(&(seq.dim() as u32).to_le_bytes());
    for v in seq.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[4..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Parses an FSEQ image; `path` only labels errors.
pub fn decode_fseq(bytes: &[u8], path: &Path) -> Result<(Modality, FeatureSequence)> {
    if bytes.len() < 4 {
        return Err(format_err(path, format!("truncated at offset {}: missing magic", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(path, format!("bad magic {:?} at offset 0, expected \"FSEQ\"", &bytes[..4])));
    }
    if bytes.len() < HEADER {
        return Err(format_err(
            path,
            format!("truncated at offset {}: header needs {HEADER} bytes", bytes.len()),
        ));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(format_err(
            path,
            format!("unsupported version {version} at offset 4, expected {VERSION}"),
        ));
    }
    let modality = Modality::from_code(bytes[6])
        .ok_or_else(|| format_err(path, format!("unknown modality code {} at offset 6", bytes[6])))?;
    let n = u32_at(7) as usize;
    let d = u32_at(11) as usize;
    let payload = n
        .checked_mul(d)
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| format_err(path, format!("implausible shape {n} x {d} at offset 7")))?;
    let expected = HEADER + payload + 4;
    if bytes.len() < expected {
        return Err(format_err(
            path,
            format!(
                "truncated at offset {}: {n} x {d} payload plus checksum needs {expected} bytes",
                bytes.len()
            ),
        ));
    }
    if bytes.len() > expected {
        return Err(format_err(
            path,
            format!("{} trailing bytes after offset {expected}", bytes.len() - expected),
        ));
    }
    let stored = u32_at(expected - 4);
    let actual = crc32fast::hash(&bytes[4..expected - 4]);
    if stored != actual {
        return Err(format_err(
            path,
            format!("checksum mismatch: stored {stored:#010x}, computed {actual:#010x}"),
        ));
    }
    let data = bytes[HEADER..expected - 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let seq = FeatureSequence::new(n, d, data).map_err(|e| format_err(path, e.to_string()))?;
    Ok((modality, seq))
}

pub fn write_fseq(path: &Path, modality: Modality, seq: &FeatureSequence) -> Result<()> {
    fs::write(path, encode_fseq(modality, seq))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_fseq(path: &Path) -> Result<(Modality, FeatureSequence)> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_fseq(&bytes, path)
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexRow {
    id: String,
    action: usize,
    verb: usize,
    noun: usize,
    rgb_path: String,
    flow_path: String,
    obj_path: String,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !id.starts_with('.')
}

/// Writes `dir/index.csv` and `dir/features/<id>.<modality>.fseq`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(format!("creating {}", feat_dir.display()), e))?;
    let index = dir.join(INDEX_FILE);
    let mut w = csv::Writer::from_path(&index).map_err(|e| Error::Dataset(format!("{}: {e}", index.display())))?;
    for s in dataset.samples() {
        if !valid_id(&s.id) {
            return Err(Error::Dataset(format!(
                "sample id `{}` is not usable as a file name (use [A-Za-z0-9_.-])",
                s.id
            )));
        }
        let mut rel = Vec::with_capacity(3);
        for m in Modality::ALL {
            let name = format!("features/{}.{m}.fseq", s.id);
            write_fseq(&dir.join(&name), m, s.modality(m))?;
            rel.push(name);
        }
        let [rgb_path, flow_path, obj_path]: [String; 3] = rel.try_into().unwrap();
        w.serialize(IndexRow {
            id: s.id.clone(),
            action: s.action,
            verb: s.verb,
            noun: s.noun,
            rgb_path,
            flow_path,
            obj_path,
        })
        .map_err(|e| Error::Dataset(format!("{}: {e}", index.display())))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", index.display()), e))?;
    Ok(index)
}

/// Reads an index file; feature paths resolve relative to its directory.
pub fn read_dataset(index: &Path) -> Result<Dataset> {
    let base = index.parent().unwrap_or(Path::new("."));
    let mut r = csv::Reader::from_path(index).map_err(|e| Error::Dataset(format!("{}: {e}", index.display())))?;
    let headers = r
        .headers()
        .map_err(|e| Error::Dataset(format!("{}: {e}", index.display())))?
        .clone();
    let expected = ["id", "action", "verb", "noun", "rgb_path", "flow_path", "obj_path"];
    if headers.iter().ne(expected) {
        return Err(Error::Dataset(format!(
            "{}: header must be `{}`, found `{}`",
            index.display(),
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut samples = Vec::new();
    for (line, row) in r.deserialize::<IndexRow>().enumerate() {
        let row = row.map_err(|e| Error::Dataset(format!("{} row {}: {e}", index.display(), line + 2)))?;
        let mut features = Vec::with_capacity(3);
        for (m, rel) in Modality::ALL.iter().zip([&row.rgb_path, &row.flow_path, &row.obj_path]) {
            let path = base.join(rel);
            if !path.is_file() {
                return Err(Error::Dataset(format!(
                    "sample `{}`: {m} feature file {} does not exist",
                    row.id,
                    path.display()
                )));
            }
            let (stored, seq) = read_fseq(&path)?;
            if stored != *m {
                return Err(format_err(
                    &path,
                    format!("sample `{}` lists this as {m} but the file holds {stored}", row.id),
                ));
            }
            features.push(seq);
        }
        let [rgb, flow, obj]: [FeatureSequence; 3] = features.try_into().unwrap();
        samples.push(Sample {
            id: row.id,
            features: [rgb, flow, obj],
            action: row.action,
            verb: row.verb,
            noun: row.noun,
        });
    }
    Dataset::new(samples)
}
