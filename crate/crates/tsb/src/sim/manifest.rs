//! JSON Lines manifest of simulated mixtures, with run-length frame labels.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Snr;

use super::{FrameLabel, MixMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Offsets {
    pub a: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lengths {
    pub a: usize,
    pub b: usize,
}

/// How the noise stream was produced, enough to rebuild it exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseInfo {
    pub path: String,
    pub offset: usize,
    pub gain: f64,
    pub looped: bool,
}

/// One mixture: audio file paths are relative to the manifest location.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub mixture: String,
    pub target: String,
    pub enrollment: String,
    pub speaker: String,
    pub interferer_speaker: String,
    /// Run-length encoded frame labels, e.g. "tss:100,ntss:50".
    pub labels: String,
    pub snr_db: Snr,
    /// Requested overlap ratio; the realized ratio is recomputable from
    /// offsets and lengths.
    pub overlap_ratio: f64,
    pub offsets: Offsets,
    pub mode: MixMode,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub transcript: Option<String>,
    pub lengths: Lengths,
    /// Joint headroom rescale applied to all streams (1.0 = none).
    pub gain: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub noise: Option<NoiseInfo>,
}

/// Ordered manifest plus its base directory for path resolution.
#[derive(Clone, Debug)]
pub struct Manifest {
    records: Vec<Record>,
    base_dir: PathBuf,
}

impl Manifest {
    pub fn new(records: Vec<Record>, base_dir: PathBuf) -> Self {
        Self { records, base_dir }
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for rec in &self.records {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Loads and validates a manifest: ids must be unique and every
    /// referenced file must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let base_dir = path
            .parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from("."));
        let reader = BufReader::new(File::open(path)?);
        let mut records = Vec::new();
        let mut ids = BTreeSet::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| {
                Error::Manifest(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            if !ids.insert(rec.id.clone()) {
                return Err(Error::Manifest(format!("duplicate id {:?}", rec.id)));
            }
            for rel in [&rec.mixture, &rec.target, &rec.enrollment] {
                let p = base_dir.join(rel);
                if !p.exists() {
                    return Err(Error::Manifest(format!(
                        "record {:?} references missing file {}",
                        rec.id,
                        p.display()
                    )));
                }
            }
            records.push(rec);
        }
        Ok(Self { records, base_dir })
    }
}

/// Encodes frame labels as "tss:100,ntss:50".
pub fn encode_labels(labels: &[FrameLabel]) -> String {
    let mut out = String::new();
    let mut iter = labels.iter();
    let Some(&first) = iter.next() else { return out };
    let mut current = first;
    let mut count = 1usize;
    for &l in iter {
        if l == current {
            count += 1;
        } else {
            out.push_str(&format!("{}:{count},", current.as_str()));
            current = l;
            count = 1;
        }
    }
    out.push_str(&format!("{}:{count}", current.as_str()));
    out
}

/// Decodes the run-length label string.
pub fn decode_labels(rle: &str) -> Result<Vec<FrameLabel>> {
    let mut out = Vec::new();
    if rle.is_empty() {
        return Ok(out);
    }
    for chunk in rle.split(',') {
        let (name, count) = chunk
            .split_once(':')
            .ok_or_else(|| Error::Manifest(format!("bad label run {chunk:?}")))?;
        let label = FrameLabel::from_str(name)
            .ok_or_else(|| Error::Manifest(format!("unknown label {name:?}")))?;
        let count: usize = count
            .parse()
            .map_err(|_| Error::Manifest(format!("bad label count {count:?}")))?;
        out.extend(std::iter::repeat(label).take(count));
    }
    Ok(out)
}
