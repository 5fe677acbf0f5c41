//! On-disk collection of simulated projections: one packed binary file of
//! projection records plus a tab-separated member list.
//!
//! Layout of a store directory:
//!
//! ```text
//! projections.bin   concatenated records in the 64-byte-header format
//! projections.tsv   one line per member: kind, phantom, diameter, height,
//!                   angle_deg, realization, seed, n_photons, offset, bytes
//! ```
//!
//! Flats do not depend on phantom or angle and are stored with both set to 0.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::{ProjKind, Projection};
use crate::error::{Error, Result};
use crate::geometry::FovSpec;

pub const STORE_BIN: &str = "projections.bin";
pub const STORE_TSV: &str = "projections.tsv";
const STORE_COLUMNS: &str =
    "kind\tphantom\tdiameter\theight\tangle_deg\trealization\tseed\tn_photons\toffset\tbytes";

/// Lookup key of a stored projection. Angles are matched in micro-degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StoreKey {
    pub kind: ProjKind,
    pub phantom: u32,
    pub fov: (i64, i64),
    pub angle: i64,
    pub realization: u32,
}

impl StoreKey {
    pub fn new(kind: ProjKind, phantom: u32, fov: &FovSpec, angle_deg: f64, realization: u32) -> Self {
        StoreKey {
            kind,
            phantom,
            fov: fov.key(),
            angle: (angle_deg * 1e6).round() as i64,
            realization,
        }
    }

    pub fn flat(fov: &FovSpec) -> Self {
        StoreKey::new(ProjKind::Flat, 0, fov, 0.0, 0)
    }

    pub fn describe(&self) -> String {
        format!(
            "{} phantom={} fov={}x{} angle={} realization={}",
            self.kind.as_str(),
            self.phantom,
            self.fov.0 as f64 / 1000.0,
            self.fov.1 as f64 / 1000.0,
            self.angle as f64 / 1e6,
            self.realization
        )
    }
}

impl PartialOrd for ProjKind {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ProjKind {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.code().cmp(&other.code())
    }
}

impl std::hash::Hash for ProjKind {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.code().hash(state);
    }
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    offset: u64,
    bytes: u64,
}

/// Append-only writer; members become visible once `finish` writes the list.
pub struct StoreWriter {
    dir: PathBuf,
    bin: BufWriter<File>,
    offset: u64,
    lines: Vec<String>,
}

impl StoreWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(STORE_BIN);
        let bin = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(StoreWriter {
            dir: dir.to_path_buf(),
            bin: BufWriter::new(bin),
            offset: 0,
            lines: Vec::new(),
        })
    }

    pub fn append(&mut self, proj: &Projection, realization: u32) -> Result<()> {
        let m = &proj.meta;
        let (phantom, angle) = match m.kind {
            ProjKind::Flat => (0, 0.0),
            _ => (m.phantom, m.angle_deg),
        };
        let bytes = proj.byte_len() as u64;
        proj.write_to(&mut self.bin)
            .map_err(|e| Error::io(self.dir.join(STORE_BIN), e))?;
        self.lines.push(format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            m.kind.as_str(),
            phantom,
            m.fov.diameter,
            m.fov.height,
            angle,
            realization,
            m.seed,
            m.n_photons,
            self.offset,
            bytes
        ));
        self.offset += bytes;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        let bin_path = self.dir.join(STORE_BIN);
        self.bin.flush().map_err(|e| Error::io(&bin_path, e))?;
        let path = self.dir.join(STORE_TSV);
        let mut text = String::from(STORE_COLUMNS);
        text.push('\n');
        for l in &self.lines {
            text.push_str(l);
            text.push('\n');
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Read-only view of a store directory.
#[derive(Debug)]
pub struct ProjectionStore {
    dir: PathBuf,
    entries: HashMap<StoreKey, Entry>,
}

fn parse_kind(s: &str) -> Option<ProjKind> {
    Some(match s {
        "flat" => ProjKind::Flat,
        "primary" => ProjKind::Primary,
        "scatter" => ProjKind::Scatter,
        "input" => ProjKind::Input,
        "target" => ProjKind::Target,
        _ => return None,
    })
}

impl ProjectionStore {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(STORE_TSV);
        let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = HashMap::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if i == 0 {
                if line != STORE_COLUMNS {
                    return Err(Error::format(&path, "unexpected column header"));
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let bad = || Error::format(&path, format!("line {}: {line:?}", i + 1));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 10 {
                return Err(bad());
            }
            let kind = parse_kind(f[0]).ok_or_else(bad)?;
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            let int = |s: &str| s.parse::<u64>().map_err(|_| bad());
            let fov = FovSpec::new(num(f[2])?, num(f[3])?).map_err(|_| bad())?;
            let key = StoreKey::new(kind, int(f[1])? as u32, &fov, num(f[4])?, int(f[5])? as u32);
            entries.insert(
                key,
                Entry {
                    offset: int(f[8])?,
                    bytes: int(f[9])?,
                },
            );
        }
        Ok(ProjectionStore {
            dir: dir.to_path_buf(),
            entries,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: &StoreKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &StoreKey> {
        self.entries.keys()
    }

    /// Keys from `wanted` that are absent, in input order.
    pub fn missing<'a>(&self, wanted: impl IntoIterator<Item = &'a StoreKey>) -> Vec<StoreKey> {
        wanted
            .into_iter()
            .filter(|k| !self.entries.contains_key(k))
            .copied()
            .collect()
    }

    pub fn get(&self, key: &StoreKey) -> Result<Projection> {
        let entry = self
            .entries
            .get(key)
            .ok_or_else(|| Error::Missing(vec![key.describe()]))?;
        let path = self.dir.join(STORE_BIN);
        let mut f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        f.seek(SeekFrom::Start(entry.offset))
            .map_err(|e| Error::io(&path, e))?;
        let mut buf = vec![0u8; entry.bytes as usize];
        f.read_exact(&mut buf).map_err(|e| Error::io(&path, e))?;
        let proj = Projection::read_from(&mut buf.as_slice()).map_err(|e| Error::io(&path, e))?;
        if proj.meta.kind != key.kind || proj.meta.fov.key() != key.fov {
            return Err(Error::format(
                &path,
                format!("record at offset {} is not {}", entry.offset, key.describe()),
            ));
        }
        Ok(proj)
    }
}
