//! Binary feature stores.
//!
//! A store is a fixed-stride `.fst` file plus a `<stem>.meta.jsonl` sidecar:
//!
//! ```text
//! offset  size          field
//! 0       4             magic "FSTR"
//! 4       4             version (u32 LE, = 1)
//! 8       4             dim (u32 LE)
//! 12      8             count (u64 LE)
//! 20      4             aux_count (u32 LE)
//! 24      4             reserved (u32 LE, = 0)
//! 28      8*count       ids (u64 LE)
//! ...     4*count*dim   vectors (f32 LE, row-major)
//! ...     4*count*aux   aux scalars (f32 LE, row-major)
//! ```
//!
//! The sidecar holds one JSON object per record, in record order, with the
//! dataset label and source key; the first line also lists the aux channel
//! names. Opening a store maps the file and validates only the header, so
//! opening is O(1) in the record count; the sidecar is parsed on first use.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::ops::Deref;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use memmap2::Mmap;
use serde::{Deserialize, Serialize};

use crate::fsutil::write_atomic;
use crate::points::VectorSource;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FSTR";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;

/// Aux channel names understood by the perplexity scorers.
pub const AUX_LOGPROB_TARGET: &str = "logprob_sum_target";
pub const AUX_LOGPROB_BASE: &str = "logprob_sum_base";
pub const AUX_TOKEN_COUNT: &str = "token_count";

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: u64,
    pub dataset: String,
    /// Original source key of the sample (may be empty).
    pub key: String,
    pub vector: Vec<f32>,
    /// Values for the store's aux channels, in schema order.
    pub aux: Vec<f32>,
}

impl FeatureRecord {
    pub fn new(id: u64, dataset: impl Into<String>, vector: Vec<f32>) -> Self {
        FeatureRecord {
            id,
            dataset: dataset.into(),
            key: String::new(),
            vector,
            aux: Vec::new(),
        }
    }

    pub fn with_aux(mut self, aux: Vec<f32>) -> Self {
        self.aux = aux;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StoreSummary {
    pub count: u64,
    pub dim: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Header {
    dim: u32,
    count: u64,
    aux_count: u32,
}

impl Header {
    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut buf = [0u8; HEADER_LEN];
        buf[0..4].copy_from_slice(MAGIC);
        buf[4..8].copy_from_slice(&VERSION.to_le_bytes());
        buf[8..12].copy_from_slice(&self.dim.to_le_bytes());
        buf[12..20].copy_from_slice(&self.count.to_le_bytes());
        buf[20..24].copy_from_slice(&self.aux_count.to_le_bytes());
        buf
    }

    fn decode(buf: &[u8], file_len: u64) -> Result<Header> {
        if buf.len() < 4 || &buf[0..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if buf.len() < HEADER_LEN {
            return Err(Error::Truncated {
                needed: HEADER_LEN as u64,
                actual: file_len,
            });
        }
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let header = Header {
            dim: u32_at(8),
            count: u64::from_le_bytes(buf[12..20].try_into().unwrap()),
            aux_count: u32_at(20),
        };
        if u32_at(24) != 0 {
            return Err(Error::Corrupt("reserved header field is nonzero".into()));
        }
        if header.dim == 0 {
            return Err(Error::Corrupt("dimension is zero".into()));
        }
        Ok(header)
    }

    /// Total file length implied by the header, if it fits in u64.
    fn file_len(&self) -> Option<u64> {
        let n = self.count as u128;
        let len =
            HEADER_LEN as u128 + 8 * n + 4 * n * self.dim as u128 + 4 * n * self.aux_count as u128;
        u64::try_from(len).ok()
    }

    fn ids_offset(&self) -> usize {
        HEADER_LEN
    }

    fn vectors_offset(&self) -> usize {
        HEADER_LEN + 8 * self.count as usize
    }

    fn aux_offset(&self) -> usize {
        self.vectors_offset() + 4 * self.count as usize * self.dim as usize
    }
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    id: u64,
    dataset: String,
    key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    aux_names: Option<Vec<String>>,
}

/// Per-record metadata loaded from the sidecar, aligned with record order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StoreMeta {
    pub datasets: Vec<String>,
    pub keys: Vec<String>,
    pub aux_names: Vec<String>,
}

enum Backing {
    Mapped(Mmap),
    Owned(Vec<u8>),
}

impl Deref for Backing {
    type Target = [u8];

    fn deref(&self) -> &[u8] {
        match self {
            Backing::Mapped(m) => m,
            Backing::Owned(v) => v,
        }
    }
}

/// Read-only view of a feature store, memory-mapped from disk or held in
/// memory with the identical byte layout.
pub struct FeatureStore {
    path: Option<PathBuf>,
    header: Header,
    bytes: Backing,
    meta: OnceLock<StoreMeta>,
}

impl std::fmt::Debug for FeatureStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureStore")
            .field("path", &self.path)
            .field("dim", &self.header.dim)
            .field("count", &self.header.count)
            .field("aux_count", &self.header.aux_count)
            .finish()
    }
}

/// Path of the metadata sidecar for a store file: `<stem>.meta.jsonl`.
pub fn meta_path(path: &Path) -> PathBuf {
    sibling(path, "meta.jsonl")
}

pub(crate) fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn check_records(dim: usize, aux_names: &[String], records: &[FeatureRecord]) -> Result<()> {
    if dim == 0 || dim > u32::MAX as usize {
        return Err(Error::invalid(format!("unsupported dimension {dim}")));
    }
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        if r.vector.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: r.vector.len(),
            });
        }
        if r.aux.len() != aux_names.len() {
            return Err(Error::invalid(format!(
                "record {} has {} aux values, schema has {}",
                r.id,
                r.aux.len(),
                aux_names.len()
            )));
        }
        if !r.vector.iter().chain(&r.aux).all(|v| v.is_finite()) {
            return Err(Error::NonFinite { id: r.id });
        }
        if !seen.insert(r.id) {
            return Err(Error::DuplicateId(r.id));
        }
    }
    Ok(())
}

fn encode<W: Write>(
    out: &mut W,
    dim: usize,
    aux_count: usize,
    records: &[FeatureRecord],
) -> Result<()> {
    let header = Header {
        dim: dim as u32,
        count: records.len() as u64,
        aux_count: aux_count as u32,
    };
    out.write_all(&header.encode())?;
    for r in records {
        out.write_all(&r.id.to_le_bytes())?;
    }
    for r in records {
        for v in &r.vector {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    for r in records {
        for v in &r.aux {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn encode_meta<W: Write>(
    out: &mut W,
    aux_names: &[String],
    records: &[FeatureRecord],
) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        let line = MetaLine {
            id: r.id,
            dataset: r.dataset.clone(),
            key: r.key.clone(),
            aux_names: (i == 0).then(|| aux_names.to_vec()),
        };
        serde_json::to_writer(&mut *out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Writes `records` as a `.fst` file plus its metadata sidecar.
///
/// `dim` is explicit so that an empty record sequence still produces a valid
/// store. Both files are written atomically.
pub fn write_store(
    path: &Path,
    dim: usize,
    aux_names: &[String],
    records: &[FeatureRecord],
) -> Result<StoreSummary> {
    check_records(dim, aux_names, records)?;
    write_atomic(path, |out| encode(out, dim, aux_names.len(), records))?;
    write_atomic(&meta_path(path), |out| encode_meta(out, aux_names, records))?;
    Ok(StoreSummary {
        count: records.len() as u64,
        dim: dim as u32,
    })
}

/// Opens a store file, validating only its header against the file length.
pub fn open_store(path: &Path) -> Result<FeatureStore> {
    FeatureStore::open(path)
}

impl FeatureStore {
    pub fn open(path: &Path) -> Result<FeatureStore> {
        let mut file = File::open(path)?;
        let file_len = file.metadata()?.len();
        let mut head = Vec::with_capacity(HEADER_LEN);
        (&mut file).take(HEADER_LEN as u64).read_to_end(&mut head)?;
        let header = Header::decode(&head, file_len)?;
        let needed = header.file_len().ok_or(Error::Truncated {
            needed: u64::MAX,
            actual: file_len,
        })?;
        if file_len < needed {
            return Err(Error::Truncated {
                needed,
                actual: file_len,
            });
        }
        if file_len > needed {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes after payload",
                file_len - needed
            )));
        }
        // SAFETY: stores are immutable once written (atomic rename); the map
        // is read-only.
        let map = unsafe { Mmap::map(&file)? };
        log::debug!(
            "opened {} (count={}, dim={})",
            path.display(),
            header.count,
            header.dim
        );
        Ok(FeatureStore {
            path: Some(path.to_path_buf()),
            header,
            bytes: Backing::Mapped(map),
            meta: OnceLock::new(),
        })
    }

    /// Builds an in-memory store with exactly the on-disk layout, so vectors
    /// go through the same `f32` quantisation as a written store.
    pub fn from_records(
        dim: usize,
        aux_names: &[String],
        records: &[FeatureRecord],
    ) -> Result<FeatureStore> {
        check_records(dim, aux_names, records)?;
        let mut bytes = Vec::new();
        encode(&mut bytes, dim, aux_names.len(), records)?;
        let meta = StoreMeta {
            datasets: records.iter().map(|r| r.dataset.clone()).collect(),
            keys: records.iter().map(|r| r.key.clone()).collect(),
            aux_names: aux_names.to_vec(),
        };
        Ok(FeatureStore {
            path: None,
            header: Header {
                dim: dim as u32,
                count: records.len() as u64,
                aux_count: aux_names.len() as u32,
            },
            bytes: Backing::Owned(bytes),
            meta: OnceLock::from(meta),
        })
    }

    /// Writes this store (vectors, aux, metadata) to `path`.
    pub fn write(&self, path: &Path) -> Result<StoreSummary> {
        let records = self.records()?;
        write_store(path, self.dim(), &self.metadata()?.aux_names, &records)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn dim(&self) -> usize {
        self.header.dim as usize
    }

    pub fn len(&self) -> usize {
        self.header.count as usize
    }

    pub fn is_empty(&self) -> bool {
        self.header.count == 0
    }

    pub fn aux_count(&self) -> usize {
        self.header.aux_count as usize
    }

    pub fn id(&self, index: usize) -> u64 {
        let o = self.header.ids_offset() + 8 * index;
        u64::from_le_bytes(self.bytes[o..o + 8].try_into().unwrap())
    }

    pub fn ids(&self) -> impl ExactSizeIterator<Item = u64> + '_ {
        (0..self.len()).map(|i| self.id(i))
    }

    fn f32_at(&self, offset: usize) -> f32 {
        f32::from_le_bytes(self.bytes[offset..offset + 4].try_into().unwrap())
    }

    fn vector_bytes(&self, index: usize) -> &[u8] {
        let stride = 4 * self.dim();
        let o = self.header.vectors_offset() + stride * index;
        &self.bytes[o..o + stride]
    }

    pub fn vector_f32(&self, index: usize) -> Vec<f32> {
        self.vector_bytes(index)
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }

    pub fn aux_value(&self, index: usize, channel: usize) -> f32 {
        let o = self.header.aux_offset() + 4 * (index * self.aux_count() + channel);
        self.f32_at(o)
    }

    pub fn aux_row(&self, index: usize) -> Vec<f32> {
        (0..self.aux_count())
            .map(|c| self.aux_value(index, c))
            .collect()
    }

    /// Sidecar metadata, parsed on first access. A store without a sidecar
    /// gets empty labels and positional aux names (`aux0`, `aux1`, ...).
    pub fn metadata(&self) -> Result<&StoreMeta> {
        if let Some(m) = self.meta.get() {
            return Ok(m);
        }
        let meta = self.load_meta()?;
        let _ = self.meta.set(meta);
        Ok(self.meta.get().expect("metadata initialised"))
    }

    fn load_meta(&self) -> Result<StoreMeta> {
        let n = self.len();
        let default_aux = || (0..self.aux_count()).map(|i| format!("aux{i}")).collect();
        let sidecar = match &self.path {
            Some(p) => meta_path(p),
            None => {
                return Ok(StoreMeta {
                    datasets: vec![String::new(); n],
                    keys: vec![String::new(); n],
                    aux_names: default_aux(),
                })
            }
        };
        let file = match File::open(&sidecar) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                log::warn!("no metadata sidecar at {}", sidecar.display());
                return Ok(StoreMeta {
                    datasets: vec![String::new(); n],
                    keys: vec![String::new(); n],
                    aux_names: default_aux(),
                });
            }
            Err(e) => return Err(e.into()),
        };
        let mut by_id: HashMap<u64, (String, String)> = HashMap::with_capacity(n);
        let mut aux_names = None;
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let m: MetaLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: lineno + 1,
                msg: e.to_string(),
            })?;
            if aux_names.is_none() {
                aux_names = m.aux_names;
            }
            by_id.insert(m.id, (m.dataset, m.key));
        }
        let aux_names: Vec<String> = aux_names.unwrap_or_else(default_aux);
        if aux_names.len() != self.aux_count() {
            return Err(Error::Corrupt(format!(
                "sidecar names {} aux channels, header declares {}",
                aux_names.len(),
                self.aux_count()
            )));
        }
        let mut datasets = Vec::with_capacity(n);
        let mut keys = Vec::with_capacity(n);
        for id in self.ids() {
            let (d, k) = by_id
                .remove(&id)
                .ok_or_else(|| Error::Corrupt(format!("id {id} missing from metadata sidecar")))?;
            datasets.push(d);
            keys.push(k);
        }
        Ok(StoreMeta {
            datasets,
            keys,
            aux_names,
        })
    }

    pub fn dataset(&self, index: usize) -> Result<&str> {
        Ok(&self.metadata()?.datasets[index])
    }

    /// Index of the named aux channel.
    pub fn aux_channel(&self, name: &str) -> Result<usize> {
        self.metadata()?
            .aux_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::MissingAux(name.to_string()))
    }

    /// Map from record id to record index.
    pub fn index_by_id(&self) -> HashMap<u64, usize> {
        self.ids().enumerate().map(|(i, id)| (id, i)).collect()
    }

    /// Indices of records grouped by dataset label, in first-seen order.
    pub fn indices_by_dataset(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
        let mut slot: HashMap<&str, usize> = HashMap::new();
        let meta = self.metadata()?;
        for (i, d) in meta.datasets.iter().enumerate() {
            let g = *slot.entry(d.as_str()).or_insert_with(|| {
                groups.push((d.clone(), Vec::new()));
                groups.len() - 1
            });
            groups[g].1.push(i);
        }
        Ok(groups)
    }

    pub fn record(&self, index: usize) -> Result<FeatureRecord> {
        let meta = self.metadata()?;
        Ok(FeatureRecord {
            id: self.id(index),
            dataset: meta.datasets[index].clone(),
            key: meta.keys[index].clone(),
            vector: self.vector_f32(index),
            aux: self.aux_row(index),
        })
    }

    pub fn records(&self) -> Result<Vec<FeatureRecord>> {
        (0..self.len()).map(|i| self.record(i)).collect()
    }

    pub fn summary(&self) -> StoreSummary {
        StoreSummary {
            count: self.header.count,
            dim: self.header.dim,
        }
    }
}

impl VectorSource for FeatureStore {
    fn dim(&self) -> usize {
        FeatureStore::dim(self)
    }

    fn len(&self) -> usize {
        FeatureStore::len(self)
    }

    fn read_into(&self, index: usize, out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(self.vector_bytes(index).chunks_exact(4)) {
            *o = f32::from_le_bytes(c.try_into().unwrap()) as f64;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Issue {
    NonFinite { id: u64, index: usize },
    DuplicateId { id: u64 },
    Metadata { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub count: u64,
    pub dim: u32,
    pub issues: Vec<Issue>,
}

/// Full scan of a store: non-finite vector or aux entries, duplicate ids and
/// an unreadable sidecar are reported, never raised.
pub fn validate_store(store: &FeatureStore) -> ValidationReport {
    let mut issues = Vec::new();
    let mut seen = HashSet::with_capacity(store.len());
    let mut reported_dup = HashSet::new();
    for i in 0..store.len() {
        let id = store.id(i);
        let finite = store
            .vector_bytes(i)
            .chunks_exact(4)
            .all(|c| f32::from_le_bytes(c.try_into().unwrap()).is_finite())
            && (0..store.aux_count()).all(|c| store.aux_value(i, c).is_finite());
        if !finite {
            issues.push(Issue::NonFinite { id, index: i });
        }
        if !seen.insert(id) && reported_dup.insert(id) {
            issues.push(Issue::DuplicateId { id });
        }
    }
    if let Err(e) = store.metadata() {
        issues.push(Issue::Metadata {
            message: e.to_string(),
        });
    }
    ValidationReport {
        ok: issues.is_empty(),
        count: store.header.count,
        dim: store.header.dim,
        issues,
    }
}

#[derive(Deserialize)]
struct DumpLine {
    id: u64,
    dataset: String,
    #[serde(default)]
    key: String,
    vector: Vec<f64>,
    #[serde(default)]
    aux: Option<std::collections::BTreeMap<String, f64>>,
}

/// Records parsed from a JSON-lines vector dump, ready for [`write_store`].
#[derive(Debug, Clone)]
pub struct Ingested {
    pub dim: usize,
    pub aux_names: Vec<String>,
    pub records: Vec<FeatureRecord>,
}

/// Parses a vector dump: one `{"id", "dataset", "vector", "key"?, "aux"?}`
/// object per line, where `aux` maps channel names to values. The aux schema
/// is taken from the first record (sorted by name) and every later record
/// must carry the same channels.
pub fn ingest_jsonl<R: BufRead>(reader: R) -> Result<Ingested> {
    let mut dim = None;
    let mut aux_names: Option<Vec<String>> = None;
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            line: lineno + 1,
            msg,
        };
        let d: DumpLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let dim = *dim.get_or_insert(d.vector.len());
        if d.vector.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: d.vector.len(),
            });
        }
        let aux = d.aux.unwrap_or_default();
        let names: Vec<String> = aux.keys().cloned().collect();
        let schema = aux_names.get_or_insert_with(|| names.clone());
        if *schema != names {
            return Err(parse_err(format!(
                "aux channels {names:?} differ from schema {schema:?}"
            )));
        }
        records.push(FeatureRecord {
            id: d.id,
            dataset: d.dataset,
            key: d.key,
            vector: d.vector.iter().map(|&v| v as f32).collect(),
            aux: aux.values().map(|&v| v as f32).collect(),
        });
    }
    let dim = dim.ok_or_else(|| Error::empty("vector dump has no records"))?;
    Ok(Ingested {
        dim,
        aux_names: aux_names.unwrap_or_default(),
        records,
    })
}
