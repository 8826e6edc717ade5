use std::cmp::Ordering;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::parallel::Execution;

use super::{Metric, RetrievalError, RetrievalMode};

/// Provenance of one indexed vector.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChunkRef {
    pub title: String,
    pub seq_no: usize,
}

impl ChunkRef {
    pub fn new(title: impl Into<String>, seq_no: usize) -> Self {
        Self {
            title: title.into(),
            seq_no,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub chunk: ChunkRef,
    /// Distance to the query; lower is closer.
    pub score: f32,
}

pub fn l2_distance(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum::<f32>()
        .sqrt()
}

/// `1 - cos(a, b)`; zero vectors are at distance 1 from everything.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> f32 {
    let (mut dot, mut na, mut nb) = (0f32, 0f32, 0f32);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na.sqrt() * nb.sqrt())
}

impl Metric {
    pub fn distance(self, a: &[f32], b: &[f32]) -> f32 {
        match self {
            Metric::L2 => l2_distance(a, b),
            Metric::Cosine => cosine_distance(a, b),
        }
    }
}

/// Ordering used for every ranked list: score, then title, then seq_no.
pub fn hit_order(a: &Hit, b: &Hit) -> Ordering {
    a.score
        .total_cmp(&b.score)
        .then_with(|| a.chunk.cmp(&b.chunk))
}

/// Dense vectors held in one row-major buffer, searched exhaustively.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dimension: usize,
    metric: Metric,
    mode: RetrievalMode,
    refs: Vec<ChunkRef>,
    data: Vec<f32>,
}

const MAGIC: &[u8; 8] = b"LRAGIDX1";

#[derive(Serialize, Deserialize)]
struct ManifestRow {
    row: usize,
    title: String,
    seq_no: usize,
}

impl VectorIndex {
    pub fn new(dimension: usize, metric: Metric, mode: RetrievalMode) -> Self {
        Self {
            dimension,
            metric,
            mode,
            refs: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn mode(&self) -> RetrievalMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn refs(&self) -> &[ChunkRef] {
        &self.refs
    }

    pub fn vector(&self, row: usize) -> &[f32] {
        &self.data[row * self.dimension..(row + 1) * self.dimension]
    }

    pub fn push(&mut self, chunk: ChunkRef, vector: &[f32]) -> Result<(), RetrievalError> {
        self.check_dim(vector.len())?;
        self.refs.push(chunk);
        self.data.extend_from_slice(vector);
        Ok(())
    }

    fn check_dim(&self, got: usize) -> Result<(), RetrievalError> {
        if got != self.dimension {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dimension,
                got,
            });
        }
        Ok(())
    }

    /// The `k` nearest entries, closest first. Returns every entry when the
    /// index holds fewer than `k`.
    pub fn query_top_k(&self, query: &[f32], k: usize) -> Result<Vec<Hit>, RetrievalError> {
        self.check_dim(query.len())?;
        let mut hits: Vec<Hit> = self
            .refs
            .iter()
            .enumerate()
            .map(|(row, r)| Hit {
                chunk: r.clone(),
                score: self.metric.distance(query, self.vector(row)),
            })
            .collect();
        let k = k.min(hits.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        if k < hits.len() {
            hits.select_nth_unstable_by(k - 1, hit_order);
            hits.truncate(k);
        }
        hits.sort_by(hit_order);
        Ok(hits)
    }

    /// [`VectorIndex::query_top_k`] for many queries; results follow query order.
    pub fn query_batch(
        &self,
        queries: &[Vec<f32>],
        k: usize,
        execution: Execution,
    ) -> Result<Vec<Vec<Hit>>, RetrievalError> {
        execution
            .map(queries, |q| self.query_top_k(q, k))
            .into_iter()
            .collect()
    }

    /// Sidecar manifest path for an index file.
    pub fn manifest_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".manifest.jsonl");
        PathBuf::from(p)
    }

    /// Writes the binary vector file and its JSONL manifest.
    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let io = |e| RetrievalError::Io {
            path: path.to_path_buf(),
            source: e,
        };
        let mut buf = Vec::with_capacity(24 + self.data.len() * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.dimension as u32).to_le_bytes());
        buf.push(self.metric.code());
        buf.push(self.mode.code());
        buf.extend_from_slice(&0u16.to_le_bytes());
        buf.extend_from_slice(&(self.refs.len() as u64).to_le_bytes());
        for x in &self.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        write_atomic(path, &buf).map_err(io)?;

        let mut manifest = Vec::new();
        for (row, r) in self.refs.iter().enumerate() {
            let line = serde_json::to_string(&ManifestRow {
                row,
                title: r.title.clone(),
                seq_no: r.seq_no,
            })
            .expect("manifest rows serialise");
            manifest.extend_from_slice(line.as_bytes());
            manifest.push(b'\n');
        }
        let mpath = Self::manifest_path(path);
        write_atomic(&mpath, &manifest).map_err(|e| RetrievalError::Io {
            path: mpath.clone(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let io = |e| RetrievalError::Io {
            path: path.to_path_buf(),
            source: e,
        };
        let corrupt = |msg: String| RetrievalError::CorruptIndex(format!("{}: {msg}", path.display()));
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(io)?;
        if bytes.len() < 24 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad header".into()));
        }
        let dimension = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let metric = Metric::from_code(bytes[12]).ok_or_else(|| corrupt("unknown metric".into()))?;
        let mode =
            RetrievalMode::from_code(bytes[13]).ok_or_else(|| corrupt("unknown mode".into()))?;
        let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let payload = &bytes[24..];
        if payload.len() != count * dimension * 4 {
            return Err(corrupt(format!(
                "expected {} vector bytes, found {}",
                count * dimension * 4,
                payload.len()
            )));
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();

        let mpath = Self::manifest_path(path);
        let file = fs::File::open(&mpath).map_err(|e| RetrievalError::Io {
            path: mpath.clone(),
            source: e,
        })?;
        let mut refs = Vec::with_capacity(count);
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| RetrievalError::Io {
                path: mpath.clone(),
                source: e,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let row: ManifestRow = serde_json::from_str(&line)
                .map_err(|e| corrupt(format!("manifest line {}: {e}", i + 1)))?;
            if row.row != refs.len() {
                return Err(corrupt(format!("manifest line {} has row {}", i + 1, row.row)));
            }
            refs.push(ChunkRef::new(row.title, row.seq_no));
        }
        if refs.len() != count {
            return Err(corrupt(format!(
                "manifest has {} rows, header says {count}",
                refs.len()
            )));
        }
        Ok(Self {
            dimension,
            metric,
            mode,
            refs,
            data,
        })
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}
