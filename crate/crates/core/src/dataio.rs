//! Embedding files and caption manifests.
//!
//! `.pfeb` layout, little-endian throughout:
//!
//! ```text
//! 0..4    magic "PFEB"
//! 4..8    u32 version (1)
//! 8..12   u32 n
//! 12..16  u32 d
//! 16..20  u32 flags   bit0: labels present, bit1: ids present
//! ...     n*d f32 embeddings, row-major
//! ...     n f32 labels            (bit0)
//! ...     n x (u16 len, UTF-8)    (bit1)
//! ```
//!
//! Rows are L2-normalized on load, never on write, so producers can emit raw
//! encoder outputs.

use std::fs::{self, File};
use std::io::{BufWriter, Cursor, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Task;

pub const EMBEDDING_MAGIC: [u8; 4] = *b"PFEB";
pub const EMBEDDING_VERSION: u32 = 1;
const FLAG_LABELS: u32 = 1;
const FLAG_IDS: u32 = 1 << 1;
const HEADER_LEN: usize = 20;

/// A set of image embeddings with optional evaluation labels and ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    raw: Array2<f32>,
    embeddings: Array2<f64>,
    labels: Option<Vec<f64>>,
    ids: Option<Vec<String>>,
}

impl EmbeddingDataset {
    /// Validates `raw` and computes the unit-norm rows.
    pub fn new(raw: Array2<f32>, labels: Option<Vec<f64>>, ids: Option<Vec<String>>) -> Result<Self> {
        let (n, d) = raw.dim();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if d == 0 {
            return Err(Error::InvalidData("embedding dimension is zero".into()));
        }
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
            }
            if let Some(i) = labels.iter().position(|l| !l.is_finite()) {
                return Err(Error::NonFinite { row: i, col: d });
            }
        }
        if let Some(ids) = &ids {
            if ids.len() != n {
                return Err(Error::Shape(format!("{} ids for {n} rows", ids.len())));
            }
            if let Some(id) = ids.iter().find(|id| id.len() > u16::MAX as usize) {
                return Err(Error::InvalidData(format!("id longer than 65535 bytes: {}...", &id[..16])));
            }
        }
        let embeddings = normalize_rows(raw.view())?;
        Ok(Self {
            raw,
            embeddings,
            labels,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.raw.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.raw.ncols()
    }

    /// Unit-norm rows in double precision.
    pub fn embeddings(&self) -> ArrayView2<'_, f64> {
        self.embeddings.view()
    }

    /// The payload exactly as stored.
    pub fn raw(&self) -> ArrayView2<'_, f32> {
        self.raw.view()
    }

    pub fn labels(&self) -> Option<&[f64]> {
        self.labels.as_deref()
    }

    pub fn ids(&self) -> Option<&[String]> {
        self.ids.as_deref()
    }

    /// Id of row `i`, falling back to the row index.
    pub fn id(&self, i: usize) -> String {
        match &self.ids {
            Some(ids) => ids[i].clone(),
            None => i.to_string(),
        }
    }
}

fn normalize_rows(raw: ArrayView2<'_, f32>) -> Result<Array2<f64>> {
    let mut out = raw.mapv(f64::from);
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: i, col: j });
        }
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroNormRow(i));
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(out)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingDataset> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && bytes[..4] != EMBEDDING_MAGIC {
            return Err(Error::BadMagic {
                expected: EMBEDDING_MAGIC,
                found: bytes[..4].try_into().unwrap(),
            });
        }
        return Err(Error::Truncated(format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len())));
    }
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).expect("length checked");
    if magic != EMBEDDING_MAGIC {
        return Err(Error::BadMagic {
            expected: EMBEDDING_MAGIC,
            found: magic,
        });
    }
    let version = cur.read_u32::<LittleEndian>().expect("length checked");
    if version != EMBEDDING_VERSION {
        return Err(Error::VersionMismatch {
            expected: EMBEDDING_VERSION,
            found: version,
        });
    }
    let n = cur.read_u32::<LittleEndian>().expect("length checked") as usize;
    let d = cur.read_u32::<LittleEndian>().expect("length checked") as usize;
    let flags = cur.read_u32::<LittleEndian>().expect("length checked");
    if flags & !(FLAG_LABELS | FLAG_IDS) != 0 {
        return Err(Error::InvalidData(format!("unknown flag bits {flags:#x}")));
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }

    let payload = n
        .checked_mul(d)
        .ok_or_else(|| Error::InvalidData(format!("n*d overflows ({n} x {d})")))?;
    let truncated = |what: &str| Error::Truncated(format!("file ends inside {what}"));

    let mut values = vec![0f32; payload];
    cur.read_f32_into::<LittleEndian>(&mut values)
        .map_err(|_| truncated("embedding payload"))?;
    let raw = Array2::from_shape_vec((n, d), values).map_err(|e| Error::Shape(e.to_string()))?;

    let labels = if flags & FLAG_LABELS != 0 {
        let mut labels = vec![0f32; n];
        cur.read_f32_into::<LittleEndian>(&mut labels)
            .map_err(|_| truncated("labels"))?;
        Some(labels.into_iter().map(f64::from).collect())
    } else {
        None
    };

    let ids = if flags & FLAG_IDS != 0 {
        let mut ids = Vec::with_capacity(n);
        for i in 0..n {
            let len = cur.read_u16::<LittleEndian>().map_err(|_| truncated("ids"))? as usize;
            let mut buf = vec![0u8; len];
            cur.read_exact(&mut buf).map_err(|_| truncated("ids"))?;
            let id = String::from_utf8(buf)
                .map_err(|_| Error::InvalidData(format!("id of row {i} is not valid UTF-8")))?;
            ids.push(id);
        }
        Some(ids)
    } else {
        None
    };

    let consumed = cur.position() as usize;
    if consumed != bytes.len() {
        return Err(Error::InvalidData(format!(
            "{} trailing bytes after payload",
            bytes.len() - consumed
        )));
    }
    EmbeddingDataset::new(raw, labels, ids)
}

pub fn write_embeddings(dataset: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode_embeddings(dataset, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn encode_embeddings<W: Write>(dataset: &EmbeddingDataset, w: &mut W) -> std::io::Result<()> {
    let (n, d) = dataset.raw.dim();
    let mut flags = 0;
    if dataset.labels.is_some() {
        flags |= FLAG_LABELS;
    }
    if dataset.ids.is_some() {
        flags |= FLAG_IDS;
    }
    w.write_all(&EMBEDDING_MAGIC)?;
    w.write_u32::<LittleEndian>(EMBEDDING_VERSION)?;
    w.write_u32::<LittleEndian>(n as u32)?;
    w.write_u32::<LittleEndian>(d as u32)?;
    w.write_u32::<LittleEndian>(flags)?;
    for v in dataset.raw.iter() {
        w.write_f32::<LittleEndian>(*v)?;
    }
    if let Some(labels) = &dataset.labels {
        for l in labels {
            w.write_f32::<LittleEndian>(*l as f32)?;
        }
    }
    if let Some(ids) = &dataset.ids {
        for id in ids {
            w.write_u16::<LittleEndian>(id.len() as u16)?;
            w.write_all(id.as_bytes())?;
        }
    }
    Ok(())
}

/// Caption embeddings with the label value each caption stands for.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionSet {
    embeddings: Array2<f64>,
    values: Vec<f64>,
    names: Vec<String>,
    task: Task,
}

impl CaptionSet {
    pub fn new(embeddings: ArrayView2<'_, f32>, values: Vec<f64>, names: Vec<String>, task: Task) -> Result<Self> {
        let m = embeddings.nrows();
        if m == 0 {
            return Err(Error::InvalidData("caption set is empty".into()));
        }
        if values.len() != m || names.len() != m {
            return Err(Error::Shape(format!(
                "caption set has {m} embeddings, {} values and {} names",
                values.len(),
                names.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("caption value {i} is not finite")));
        }
        match task {
            Task::Regression => {
                if let Some(i) = values.windows(2).position(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less)) {
                    return Err(Error::InvalidData(format!(
                        "regression caption values must be strictly increasing (index {})",
                        i + 1
                    )));
                }
            }
            Task::Classification => {
                if let Some(i) = values.iter().enumerate().position(|(i, v)| *v != i as f64) {
                    return Err(Error::InvalidData(format!(
                        "classification caption {i} must carry class index {i}"
                    )));
                }
            }
        }
        Ok(Self {
            embeddings: normalize_rows(embeddings)?,
            values,
            names,
            task,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn embeddings(&self) -> ArrayView2<'_, f64> {
        self.embeddings.view()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn task(&self) -> Task {
        self.task
    }
}

/// On-disk caption manifest. `embeddings` is resolved relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionManifest {
    pub embeddings: String,
    pub names: Vec<String>,
    pub values: Vec<f64>,
    pub task: Task,
}

pub fn read_captions(manifest_path: impl AsRef<Path>) -> Result<CaptionSet> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: CaptionManifest = serde_json::from_str(&text)?;
    let payload = resolve_relative(manifest_path, &manifest.embeddings);
    let data = read_embeddings(&payload)?;
    CaptionSet::new(data.raw(), manifest.values, manifest.names, manifest.task)
}

/// Writes `<manifest_path>` plus the caption payload at `payload_path`.
///
/// The manifest stores the payload path relative to the manifest's directory
/// when possible.
pub fn write_captions(
    raw: ArrayView2<'_, f32>,
    values: &[f64],
    names: &[String],
    task: Task,
    manifest_path: impl AsRef<Path>,
    payload_path: impl AsRef<Path>,
) -> Result<()> {
    let manifest_path = manifest_path.as_ref();
    let payload_path = payload_path.as_ref();
    // Validate before touching the filesystem.
    CaptionSet::new(raw, values.to_vec(), names.to_vec(), task)?;
    let dataset = EmbeddingDataset::new(raw.to_owned(), None, None)?;
    write_embeddings(&dataset, payload_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new(""));
    let rel = payload_path
        .strip_prefix(base)
        .map(Path::to_path_buf)
        .unwrap_or_else(|_| payload_path.to_path_buf());
    let manifest = CaptionManifest {
        embeddings: rel.to_string_lossy().into_owned(),
        names: names.to_vec(),
        values: values.to_vec(),
        task,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(manifest_path, text + "\n").map_err(|e| Error::io(manifest_path, e))
}

pub(crate) fn resolve_relative(anchor_file: &Path, target: &str) -> PathBuf {
    let target = Path::new(target);
    if target.is_absolute() {
        return target.to_path_buf();
    }
    match anchor_file.parent() {
        Some(dir) => dir.join(target),
        None => target.to_path_buf(),
    }
}
