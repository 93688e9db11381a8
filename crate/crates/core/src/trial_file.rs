//! Binary trial container.
//!
//! Layout: the 8-byte magic `LFPTRIAL`, a little-endian `u64` header length,
//! a JSON header, then one record per trial: `edc_index: u32 LE`,
//! `target: u32 LE`, `samples: f64 LE × channels·T` (row-major by channel).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Edc, Trial, TrialStore};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LFPTRIAL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFileHeader {
    pub version: u32,
    pub subject_id: String,
    pub channels: usize,
    #[serde(rename = "T")]
    pub len: usize,
    pub sample_rate_hz: f64,
    pub num_targets: usize,
    pub num_trials: usize,
    pub edcs: Vec<Edc>,
}

pub fn encode(store: &TrialStore) -> Result<Vec<u8>> {
    let header = TrialFileHeader {
        version: FORMAT_VERSION,
        subject_id: store.subject_id.clone(),
        channels: store.channels,
        len: store.len,
        sample_rate_hz: store.sample_rate_hz,
        num_targets: store.num_targets,
        num_trials: store.trials.len(),
        edcs: store.edcs.values().cloned().collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let record = 8 + 8 * store.channels * store.len;
    let mut out = Vec::with_capacity(16 + json.len() + record * store.trials.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &store.trials {
        out.extend_from_slice(&t.edc_index.to_le_bytes());
        out.extend_from_slice(&(t.target as u32).to_le_bytes());
        for v in t.samples() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn split_header(bytes: &[u8]) -> Result<(TrialFileHeader, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("missing LFPTRIAL magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body_start = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("header length exceeds file size".into()))?;
    let header: TrialFileHeader = serde_json::from_slice(&bytes[16..body_start])?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {}",
            header.version
        )));
    }
    Ok((header, &bytes[body_start..]))
}

pub fn decode(bytes: &[u8]) -> Result<TrialStore> {
    let (header, body) = split_header(bytes)?;
    let values = header.channels * header.len;
    let record = 8 + 8 * values;
    if body.len() != record * header.num_trials {
        return Err(Error::Format(format!(
            "body holds {} bytes, expected {} trials of {record} bytes",
            body.len(),
            header.num_trials
        )));
    }
    let trials = body
        .chunks_exact(record)
        .map(|chunk| {
            let edc = u32::from_le_bytes(chunk[0..4].try_into().unwrap());
            let target = u32::from_le_bytes(chunk[4..8].try_into().unwrap()) as usize;
            let samples = chunk[8..]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Trial::new(
                header.subject_id.clone(),
                edc,
                target,
                header.channels,
                samples,
                header.sample_rate_hz,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    TrialStore::new(
        header.subject_id,
        header.channels,
        header.len,
        header.sample_rate_hz,
        header.num_targets,
        header.edcs,
        trials,
    )
}

pub fn read_store(path: impl AsRef<Path>) -> Result<TrialStore> {
    decode(&fs::read(path)?)
}

/// Reads only the JSON header.
pub fn read_header(path: impl AsRef<Path>) -> Result<TrialFileHeader> {
    use std::io::Read;
    let mut f = fs::File::open(path)?;
    let mut prefix = [0u8; 16];
    f.read_exact(&mut prefix)?;
    if &prefix[..8] != MAGIC {
        return Err(Error::Format("missing LFPTRIAL magic".into()));
    }
    let hlen = u64::from_le_bytes(prefix[8..16].try_into().unwrap()) as usize;
    let mut json = vec![0u8; hlen];
    f.read_exact(&mut json)?;
    let mut bytes = prefix.to_vec();
    bytes.extend_from_slice(&json);
    Ok(split_header(&bytes)?.0)
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_store(path: impl AsRef<Path>, store: &TrialStore) -> Result<()> {
    write_atomic(path, &encode(store)?)
}
