//! Embedding records, the in-memory store, and the `AEM1` binary format.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "AEM1" | u32 version = 1 | u32 count | u32 dim
//! count * dim f32 values, row-major
//! metadata trailer: one JSON object per record, newline-terminated
//! u64 byte offset of the trailer
//! ```

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::Footprint;

pub const MAGIC: &[u8; 4] = b"AEM1";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Vectors whose norm is this close to 1 are left untouched by normalization.
/// Rounding a unit f64 vector to f32 moves its norm by at most 2^-24, so
/// normalization is idempotent on stored vectors.
pub const UNIT_NORM_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Query,
    Db,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Query => "query",
            Kind::Db => "db",
        })
    }
}

/// Image rotation in 90° steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u16", into = "u16")]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    pub fn degrees(self) -> u16 {
        match self {
            Rotation::R0 => 0,
            Rotation::R90 => 90,
            Rotation::R180 => 180,
            Rotation::R270 => 270,
        }
    }
}

impl TryFrom<u16> for Rotation {
    type Error = String;

    fn try_from(deg: u16) -> Result<Self, String> {
        match deg {
            0 => Ok(Rotation::R0),
            90 => Ok(Rotation::R90),
            180 => Ok(Rotation::R180),
            270 => Ok(Rotation::R270),
            d => Err(format!("rotation must be 0, 90, 180 or 270, got {d}")),
        }
    }
}

impl From<Rotation> for u16 {
    fn from(r: Rotation) -> u16 {
        r.degrees()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    /// Identifier of the un-rotated source image.
    pub base_id: String,
    pub rotation: Rotation,
    pub kind: Kind,
    pub vector: Vec<f32>,
    pub footprint: Option<Footprint>,
}

impl EmbeddingRecord {
    /// An un-rotated record (`base_id == id`).
    pub fn base(id: impl Into<String>, kind: Kind, vector: Vec<f32>, footprint: Option<Footprint>) -> Self {
        let id = id.into();
        Self {
            base_id: id.clone(),
            id,
            rotation: Rotation::R0,
            kind,
            vector,
            footprint,
        }
    }
}

/// Immutable collection of embeddings sharing one dimension.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    records: Vec<EmbeddingRecord>,
    by_id: HashMap<String, usize>,
    queries: Vec<usize>,
    db: Vec<usize>,
}

impl PartialEq for EmbeddingStore {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.records == other.records
    }
}

impl EmbeddingStore {
    /// Validates the records and L2-normalizes every vector.
    pub fn new(dim: usize, mut records: Vec<EmbeddingRecord>) -> Result<Self> {
        for r in &mut records {
            check_vector(r, dim)?;
            normalize_f32(&mut r.vector);
        }
        Self::assemble(dim, records)
    }

    fn assemble(dim: usize, records: Vec<EmbeddingRecord>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        let mut by_id = HashMap::with_capacity(records.len());
        let (mut queries, mut db) = (Vec::new(), Vec::new());
        for (i, r) in records.iter().enumerate() {
            if r.rotation == Rotation::R0 && r.base_id != r.id {
                return Err(Error::InvalidRecord {
                    id: r.id.clone(),
                    reason: format!("un-rotated record must be its own base, found base {:?}", r.base_id),
                });
            }
            if by_id.insert(r.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(r.id.clone()));
            }
            match r.kind {
                Kind::Query => queries.push(i),
                Kind::Db => db.push(i),
            }
        }
        Ok(Self {
            dim,
            records,
            by_id,
            queries,
            db,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn get(&self, idx: usize) -> &EmbeddingRecord {
        &self.records[idx]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    /// Indices of query records, in store order.
    pub fn query_indices(&self) -> &[usize] {
        &self.queries
    }

    /// Indices of database records, in store order.
    pub fn db_indices(&self) -> &[usize] {
        &self.db
    }

    /// All vectors widened to f64.
    pub fn vectors_f64(&self) -> Vec<Vec<f64>> {
        self.records
            .iter()
            .map(|r| r.vector.iter().map(|&v| v as f64).collect())
            .collect()
    }

    /// Same records with new vectors (normalized on the way in).
    pub fn with_vectors(&self, vectors: &[Vec<f64>]) -> Result<Self> {
        if vectors.len() != self.records.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} vectors, got {}",
                self.records.len(),
                vectors.len()
            )));
        }
        let records = self
            .records
            .iter()
            .zip(vectors)
            .map(|(r, v)| EmbeddingRecord {
                vector: v.iter().map(|&x| x as f32).collect(),
                ..r.clone()
            })
            .collect();
        Self::new(self.dim, records)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut trailer = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut trailer, &RecordMeta::from(r))?;
            trailer.push(b'\n');
        }
        let rows = self.records.iter().map(|r| r.vector.as_slice());
        write_vector_block(rows, self.records.len(), self.dim, &trailer)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let block = read_vector_block(bytes)?;
        let lines: Vec<&str> = block.trailer_lines().collect();
        if lines.len() != block.count {
            return Err(Error::Truncated(format!(
                "trailer lists {} records, header says {}",
                lines.len(),
                block.count
            )));
        }
        let mut records = Vec::with_capacity(block.count);
        for (i, line) in lines.into_iter().enumerate() {
            let meta: RecordMeta = serde_json::from_str(line).map_err(|e| Error::Format {
                line: i + 1,
                message: format!("metadata trailer: {e}"),
            })?;
            let mut vector = block.values[i * block.dim..(i + 1) * block.dim].to_vec();
            let mut rec = meta.into_record(Vec::new())?;
            if vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(rec.id));
            }
            if l2_norm_f32(&vector) == 0.0 {
                return Err(Error::ZeroVector(rec.id));
            }
            normalize_f32(&mut vector);
            rec.vector = vector;
            records.push(rec);
        }
        Self::assemble(block.dim, records)
    }
}

fn check_vector(r: &EmbeddingRecord, dim: usize) -> Result<()> {
    if r.vector.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: r.vector.len(),
        });
    }
    if r.vector.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(r.id.clone()));
    }
    if l2_norm_f32(&r.vector) == 0.0 {
        return Err(Error::ZeroVector(r.id.clone()));
    }
    Ok(())
}

fn l2_norm_f32(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

fn normalize_f32(v: &mut [f32]) {
    let n = l2_norm_f32(v);
    if (n - 1.0).abs() <= UNIT_NORM_TOL {
        return;
    }
    for x in v.iter_mut() {
        *x = (*x as f64 / n) as f32;
    }
}

/// Trailer line for one record.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordMeta {
    id: String,
    base_id: String,
    rotation: Rotation,
    kind: Kind,
    footprint: Option<[[f64; 2]; 4]>,
}

impl From<&EmbeddingRecord> for RecordMeta {
    fn from(r: &EmbeddingRecord) -> Self {
        Self {
            id: r.id.clone(),
            base_id: r.base_id.clone(),
            rotation: r.rotation,
            kind: r.kind,
            footprint: r.footprint.map(|f| f.to_latlon()),
        }
    }
}

impl RecordMeta {
    fn into_record(self, vector: Vec<f32>) -> Result<EmbeddingRecord> {
        let footprint = self
            .footprint
            .map(Footprint::from_latlon)
            .transpose()
            .map_err(|e| Error::InvalidRecord {
                id: self.id.clone(),
                reason: e.to_string(),
            })?;
        Ok(EmbeddingRecord {
            id: self.id,
            base_id: self.base_id,
            rotation: self.rotation,
            kind: self.kind,
            vector,
            footprint,
        })
    }
}

/// Serializes `count` rows of `dim` values followed by a trailer.
pub fn write_vector_block<'a>(
    rows: impl Iterator<Item = &'a [f32]>,
    count: usize,
    dim: usize,
    trailer: &[u8],
) -> Result<Vec<u8>> {
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} exceeds u32")))
    };
    let mut out = Vec::with_capacity(HEADER_LEN + count * dim * 4 + trailer.len() + 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(count, "count")?.to_le_bytes());
    out.extend_from_slice(&to_u32(dim, "dim")?.to_le_bytes());
    let mut written = 0;
    for row in rows {
        if row.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: row.len(),
            });
        }
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
        written += 1;
    }
    if written != count {
        return Err(Error::InvalidArgument(format!("wrote {written} rows, header says {count}")));
    }
    let offset = out.len() as u64;
    out.extend_from_slice(trailer);
    out.extend_from_slice(&offset.to_le_bytes());
    Ok(out)
}

/// Decoded `AEM1` block: raw values plus the undecoded trailer.
#[derive(Debug)]
pub struct VectorBlock<'a> {
    pub count: usize,
    pub dim: usize,
    pub values: Vec<f32>,
    pub trailer: &'a str,
}

impl<'a> VectorBlock<'a> {
    pub fn trailer_lines(&self) -> impl Iterator<Item = &'a str> {
        self.trailer.lines().filter(|l| !l.trim().is_empty())
    }
}

pub fn read_vector_block(bytes: &[u8]) -> Result<VectorBlock<'_>> {
    if bytes.len() < 4 {
        return Err(Error::Truncated("file shorter than magic".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < HEADER_LEN + 8 {
        return Err(Error::Truncated("file shorter than header".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let count = u32_at(8) as usize;
    let dim = u32_at(12) as usize;
    let values_len = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Truncated("count * dim overflows".into()))?;
    let expected_offset = HEADER_LEN + values_len;
    let tail = bytes.len() - 8;
    let offset = u64::from_le_bytes(bytes[tail..].try_into().unwrap());
    if expected_offset > tail || offset != expected_offset as u64 {
        return Err(Error::Truncated(format!(
            "payload needs {expected_offset} bytes before the trailer, file has {tail} (trailer offset {offset})"
        )));
    }
    let values = bytes[HEADER_LEN..expected_offset]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let trailer = std::str::from_utf8(&bytes[expected_offset..tail])
        .map_err(|e| Error::Truncated(format!("trailer is not UTF-8: {e}")))?;
    Ok(VectorBlock {
        count,
        dim,
        values,
        trailer,
    })
}

/// Cosine similarity.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector(String::new()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dot product of two f32 slices, accumulated in f64.
pub fn dot_f32(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Parameters of the synthetic desk-scale dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_locations: usize,
    pub db_per_location: usize,
    pub queries_per_location: usize,
    pub dim: usize,
    /// Per-coordinate standard deviation of the Gaussian noise added to the
    /// location prototype before renormalization.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Emit the four rotation variants of every database image.
    #[serde(default)]
    pub rotations: bool,
}

const SYNTH_SPACING_DEG: f64 = 2.0;
const SYNTH_LAT_LIMIT: f64 = 60.0;
const SYNTH_SIDE_DEG: f64 = 0.5;
const SYNTH_DB_JITTER_DEG: f64 = 0.1;
const SYNTH_QUERY_JITTER_DEG: f64 = 0.05;

/// Locations the synthetic grid can hold.
pub fn synth_capacity() -> usize {
    let rows = (2.0 * SYNTH_LAT_LIMIT / SYNTH_SPACING_DEG) as usize;
    let cols = (360.0 / SYNTH_SPACING_DEG) as usize;
    rows * cols
}

/// Deterministic synthetic dataset.
///
/// Locations sit on a 2° grid. Every location has a random unit prototype;
/// each record's vector is the prototype plus per-coordinate Gaussian noise,
/// renormalized. Database footprints are 0.5° squares jittered by up to 0.1°
/// around the cell centre, query footprints by up to 0.05°, so a query
/// overlaps every database image of its own location (IoU > 0.3) and nothing
/// else.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<EmbeddingStore> {
    if cfg.n_locations == 0 || cfg.db_per_location == 0 || cfg.queries_per_location == 0 || cfg.dim == 0 {
        return Err(Error::InvalidArgument("synthetic counts must be positive".into()));
    }
    if !(cfg.noise_sigma >= 0.0) || !cfg.noise_sigma.is_finite() {
        return Err(Error::InvalidArgument("noise_sigma must be finite and >= 0".into()));
    }
    let capacity = synth_capacity();
    if cfg.n_locations > capacity {
        return Err(Error::GridCapacity {
            capacity,
            requested: cfg.n_locations,
        });
    }
    let cols = (360.0 / SYNTH_SPACING_DEG) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let db_jitter = Uniform::new_inclusive(-SYNTH_DB_JITTER_DEG, SYNTH_DB_JITTER_DEG);
    let q_jitter = Uniform::new_inclusive(-SYNTH_QUERY_JITTER_DEG, SYNTH_QUERY_JITTER_DEG);

    let gaussian = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..cfg.dim).map(|_| StandardNormal.sample(rng)).collect()
    };
    let noisy = |proto: &[f64], rng: &mut ChaCha8Rng| -> Vec<f32> {
        proto
            .iter()
            .map(|&p| {
                let n: f64 = StandardNormal.sample(rng);
                (p + cfg.noise_sigma * n) as f32
            })
            .collect()
    };
    let square = |clat: f64, clon: f64| {
        let h = SYNTH_SIDE_DEG / 2.0;
        Footprint::from_bounds(clat - h, clon - h, clat + h, clon + h)
    };

    let mut records = Vec::new();
    for loc in 0..cfg.n_locations {
        let (row, col) = (loc / cols, loc % cols);
        let clat = SYNTH_LAT_LIMIT - SYNTH_SPACING_DEG * (row as f64 + 0.5);
        let clon = -180.0 + SYNTH_SPACING_DEG * (col as f64 + 0.5);

        let mut proto = gaussian(&mut rng);
        let n = proto.iter().map(|x| x * x).sum::<f64>().sqrt();
        proto.iter_mut().for_each(|x| *x /= n);

        for m in 0..cfg.db_per_location {
            let fp = square(clat + db_jitter.sample(&mut rng), clon + db_jitter.sample(&mut rng))?;
            let base = format!("loc{loc:05}-db{m}");
            if cfg.rotations {
                for rot in Rotation::ALL {
                    let id = if rot == Rotation::R0 {
                        base.clone()
                    } else {
                        format!("{base}@r{}", rot.degrees())
                    };
                    records.push(EmbeddingRecord {
                        id,
                        base_id: base.clone(),
                        rotation: rot,
                        kind: Kind::Db,
                        vector: noisy(&proto, &mut rng),
                        footprint: Some(fp),
                    });
                }
            } else {
                records.push(EmbeddingRecord::base(base, Kind::Db, noisy(&proto, &mut rng), Some(fp)));
            }
        }
        for j in 0..cfg.queries_per_location {
            let fp = square(clat + q_jitter.sample(&mut rng), clon + q_jitter.sample(&mut rng))?;
            records.push(EmbeddingRecord::base(
                format!("loc{loc:05}-q{j}"),
                Kind::Query,
                noisy(&proto, &mut rng),
                Some(fp),
            ));
        }
    }
    EmbeddingStore::new(cfg.dim, records)
}

/// One line of the vector ingestion format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorLine {
    pub id: String,
    /// Defaults to `id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_id: Option<String>,
    #[serde(default = "default_rotation")]
    pub rotation: Rotation,
    pub vector: Vec<f64>,
}

fn default_rotation() -> Rotation {
    Rotation::R0
}

/// Best-effort `"id"` value of a line that failed to parse.
fn sniff_id(line: &str) -> Option<&str> {
    let at = line.find("\"id\"")?;
    let rest = line[at + 4..].trim_start().strip_prefix(':')?.trim_start().strip_prefix('"')?;
    rest.find('"').map(|end| &rest[..end])
}

/// Parses line-delimited vector records. Errors carry the 1-based line
/// number and, when it can be recovered, the record id.
pub fn read_vector_lines<R: std::io::BufRead>(reader: R) -> Result<Vec<(usize, VectorLine)>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: VectorLine = serde_json::from_str(&line).map_err(|e| Error::Format {
            line: i + 1,
            message: match sniff_id(&line) {
                Some(id) => format!("record {id:?}: {e}"),
                None => e.to_string(),
            },
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

/// Joins vectors with their footprint records into a normalized store.
///
/// A vector takes the footprint record of its own id or, failing that, of
/// its `base_id`; the record supplies kind and footprint. Footprint records
/// that no vector refers to are ignored.
pub fn ingest(footprints: &[crate::geo::FootprintRecord], vectors: Vec<(usize, VectorLine)>) -> Result<EmbeddingStore> {
    let by_id: HashMap<&str, &crate::geo::FootprintRecord> = footprints.iter().map(|f| (f.id.as_str(), f)).collect();
    let dim = vectors.first().map_or(0, |(_, v)| v.vector.len());
    let mut records = Vec::with_capacity(vectors.len());
    for (line, v) in vectors {
        let fail = |message: String| Error::Format { line, message };
        let base_id = v.base_id.clone().unwrap_or_else(|| v.id.clone());
        let meta = by_id
            .get(v.id.as_str())
            .or_else(|| by_id.get(base_id.as_str()))
            .ok_or_else(|| fail(format!("record {:?} has no footprint record", v.id)))?;
        if v.vector.len() != dim {
            return Err(fail(format!(
                "record {:?}: dimension {} differs from {dim}",
                v.id,
                v.vector.len()
            )));
        }
        if v.vector.iter().any(|x| !(x.abs() <= f32::MAX as f64)) {
            return Err(Error::NonFinite(v.id));
        }
        records.push(EmbeddingRecord {
            vector: v.vector.iter().map(|&x| x as f32).collect(),
            id: v.id,
            base_id,
            rotation: v.rotation,
            kind: meta.kind,
            footprint: Some(meta.footprint()?),
        });
    }
    if records.is_empty() {
        return Err(Error::InvalidArgument("no vectors to ingest".into()));
    }
    EmbeddingStore::new(dim, records)
}
