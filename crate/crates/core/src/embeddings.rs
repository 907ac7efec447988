//! Dense vector tables (KGEB format), projection matrices and the small
//! amount of vector math shared by the reward and bandit code.
//!
//! Storage is `f32`; every reduction accumulates in `f64`.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, RelationId};
use crate::rl::ReasoningChain;

pub const KGEB_MAGIC: &[u8; 4] = b"KGEB";
pub const KGEB_VERSION: u32 = 1;
const KGEB_HEADER: usize = 4 + 4 + 4 + 8;

/// Row-major `count x dim` table of named vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    data: Vec<f32>,
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, vocab: Vec<String>, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Format("dim must be positive".into()));
        }
        if data.len() != vocab.len() * dim {
            return Err(Error::Format(format!(
                "count mismatch: {} names but {} values for dim {dim}",
                vocab.len(),
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: pos / dim });
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, name) in vocab.iter().enumerate() {
            index.entry(name.clone()).or_insert(i);
        }
        Ok(EmbeddingTable { dim, data, vocab, index })
    }

    /// Deterministic table of [`mock_embed`] vectors, one per name.
    pub fn mock<S: AsRef<str>>(names: &[S], dim: usize, seed: u64) -> Self {
        let mut data = Vec::with_capacity(names.len() * dim);
        for n in names {
            data.extend(mock_embed(n.as_ref(), dim, seed));
        }
        let vocab = names.iter().map(|n| n.as_ref().to_string()).collect();
        EmbeddingTable::new(dim, vocab, data).expect("mock vectors are finite")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.position(name).map(|i| self.row(i))
    }

    pub fn require(&self, name: &str) -> Result<&[f32]> {
        self.get(name).ok_or_else(|| Error::MissingEmbedding(name.to_string()))
    }

    pub fn to_kgeb_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(KGEB_HEADER + self.data.len() * 4);
        out.extend_from_slice(KGEB_MAGIC);
        out.extend_from_slice(&KGEB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.vocab.len() as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn load(vectors_path: impl AsRef<Path>, vocab_path: impl AsRef<Path>) -> Result<Self> {
        let vectors_path = vectors_path.as_ref();
        let bytes = fs::read(vectors_path).map_err(|e| Error::io(vectors_path, e))?;
        let (dim, count, data) = parse_kgeb(&bytes)?;
        let vocab = read_vocab(vocab_path.as_ref())?;
        if vocab.len() != count {
            return Err(Error::Format(format!(
                "count mismatch: vectors file has {count} rows, vocab has {} lines",
                vocab.len()
            )));
        }
        EmbeddingTable::new(dim, vocab, data)
    }

    pub fn save(&self, vectors_path: impl AsRef<Path>, vocab_path: impl AsRef<Path>) -> Result<()> {
        let vectors_path = vectors_path.as_ref();
        fs::write(vectors_path, self.to_kgeb_bytes()).map_err(|e| Error::io(vectors_path, e))?;
        let vocab_path = vocab_path.as_ref();
        let mut f = fs::File::create(vocab_path).map_err(|e| Error::io(vocab_path, e))?;
        for name in &self.vocab {
            writeln!(f, "{name}").map_err(|e| Error::io(vocab_path, e))?;
        }
        Ok(())
    }
}

/// Decode a KGEB buffer into `(dim, count, values)`.
pub fn parse_kgeb(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < KGEB_HEADER {
        return Err(Error::Format("truncated KGEB header".into()));
    }
    if &bytes[0..4] != KGEB_MAGIC {
        return Err(Error::Format("bad magic, expected KGEB".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != KGEB_VERSION {
        return Err(Error::Format(format!("unsupported KGEB version {version}")));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(Error::Format("dim must be positive".into()));
    }
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("KGEB size overflow".into()))?;
    let body = &bytes[KGEB_HEADER..];
    if body.len() != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes, header implies {expected}",
            body.len()
        )));
    }
    let data: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { row: pos / dim });
    }
    Ok((dim, count, data))
}

fn read_vocab(path: &Path) -> Result<Vec<String>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| {
            l.map(|s| s.strip_suffix('\r').map(str::to_string).unwrap_or(s))
                .map_err(|e| Error::io(path, e))
        })
        .collect()
}

/// Cosine similarity plus a flag set when either input is a zero vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub degenerate: bool,
}

/// Standard cosine; a zero vector yields `0.0` with `degenerate = true`.
pub fn cosine<A, B>(a: &[A], b: &[B]) -> Result<Cosine>
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.into(), y.into());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(Cosine {
            value: 0.0,
            degenerate: true,
        });
    }
    let value = (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0);
    Ok(Cosine {
        value,
        degenerate: false,
    })
}

pub(crate) fn dot_f64<A: Copy + Into<f64>, B: Copy + Into<f64>>(a: &[A], b: &[B]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.into() * y.into()).sum()
}

/// Entity and relation rows of a table, resolved once against a graph.
#[derive(Debug, Clone)]
pub struct GraphVectors<'a> {
    table: &'a EmbeddingTable,
    graph: &'a KnowledgeGraph,
    entity_rows: Vec<Option<u32>>,
    relation_rows: Vec<Option<u32>>,
}

impl<'a> GraphVectors<'a> {
    pub fn new(graph: &'a KnowledgeGraph, table: &'a EmbeddingTable) -> Self {
        let lookup = |name: &str| table.position(name).map(|i| i as u32);
        let entity_rows = graph.entity_names().iter().map(|n| lookup(n)).collect();
        let relation_rows = graph.relation_names().iter().map(|n| lookup(n)).collect();
        GraphVectors {
            table,
            graph,
            entity_rows,
            relation_rows,
        }
    }

    pub fn dim(&self) -> usize {
        self.table.dim()
    }

    pub fn table(&self) -> &'a EmbeddingTable {
        self.table
    }

    pub fn try_entity(&self, e: EntityId) -> Option<&'a [f32]> {
        self.entity_rows
            .get(e.index())
            .copied()
            .flatten()
            .map(|i| self.table.row(i as usize))
    }

    pub fn entity(&self, e: EntityId) -> Result<&'a [f32]> {
        self.try_entity(e).ok_or_else(|| {
            let name = self
                .graph
                .entity_names()
                .get(e.index())
                .cloned()
                .unwrap_or_else(|| format!("entity #{}", e.index()));
            Error::MissingEmbedding(name)
        })
    }

    pub fn relation(&self, r: RelationId) -> Result<&'a [f32]> {
        self.relation_rows
            .get(r.index())
            .copied()
            .flatten()
            .map(|i| self.table.row(i as usize))
            .ok_or_else(|| {
                let name = self
                    .graph
                    .relation_names()
                    .get(r.index())
                    .cloned()
                    .unwrap_or_else(|| format!("relation #{}", r.index()));
                Error::MissingEmbedding(name)
            })
    }
}

/// Mean of the interleaved walk `[e_source, re_1, e_1, re_2, e_2, ...]`.
pub fn path_embedding(chain: &ReasoningChain, vectors: &GraphVectors<'_>) -> Result<Vec<f64>> {
    let mut acc = PathAccumulator::new(vectors.dim());
    acc.push(vectors.entity(chain.source)?);
    for (rel, node) in chain.relations().zip(chain.entities().iter().skip(1)) {
        acc.push(vectors.relation(rel)?);
        acc.push(vectors.entity(*node)?);
    }
    Ok(acc.mean())
}

/// Running sum for prefix means of a path.
#[derive(Debug, Clone)]
pub(crate) struct PathAccumulator {
    sum: Vec<f64>,
    n: usize,
}

impl PathAccumulator {
    pub(crate) fn new(dim: usize) -> Self {
        PathAccumulator {
            sum: vec![0.0; dim],
            n: 0,
        }
    }

    pub(crate) fn push(&mut self, v: &[f32]) {
        for (s, &x) in self.sum.iter_mut().zip(v) {
            *s += x as f64;
        }
        self.n += 1;
    }

    pub(crate) fn mean(&self) -> Vec<f64> {
        if self.n == 0 {
            return self.sum.clone();
        }
        let n = self.n as f64;
        self.sum.iter().map(|s| s / n).collect()
    }
}

/// Dense `rows x cols` matrix mapping path space into context space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    rows: usize,
    cols: usize,
    w: Vec<f32>,
}

impl ProjectionMatrix {
    pub fn new(rows: usize, cols: usize, w: Vec<f32>) -> Result<Self> {
        if w.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: w.len(),
            });
        }
        if let Some(pos) = w.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: pos / cols.max(1) });
        }
        Ok(ProjectionMatrix { rows, cols, w })
    }

    pub fn identity(dim: usize) -> Self {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        ProjectionMatrix { rows: dim, cols: dim, w }
    }

    /// Identity when the dims agree; otherwise a matrix must be supplied.
    pub fn default_for(path_dim: usize, context_dim: usize) -> Result<Self> {
        if path_dim == context_dim {
            Ok(Self::identity(path_dim))
        } else {
            Err(Error::Config(format!(
                "path dim {path_dim} differs from context dim {context_dim}; supply a projection matrix"
            )))
        }
    }

    /// Read a KGEB file whose rows are the matrix rows (no vocab needed).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (cols, rows, w) = parse_kgeb(&bytes)?;
        ProjectionMatrix::new(rows, cols, w)
    }

    pub fn input_dim(&self) -> usize {
        self.cols
    }

    pub fn output_dim(&self) -> usize {
        self.rows
    }

    pub fn is_identity(&self) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| {
                (0..self.cols).all(|j| self.w[i * self.cols + j] == if i == j { 1.0 } else { 0.0 })
            })
    }
}

/// Matrix-vector product `W x p`.
pub fn project(w: &ProjectionMatrix, p: &[f64]) -> Result<Vec<f64>> {
    if p.len() != w.cols {
        return Err(Error::DimensionMismatch {
            expected: w.cols,
            actual: p.len(),
        });
    }
    Ok(w.w
        .chunks_exact(w.cols)
        .map(|row| dot_f64(row, p))
        .collect())
}

/// Deterministic unit vector derived from `(seed, text)`.
pub fn mock_embed(text: &str, dim: usize, seed: u64) -> Vec<f32> {
    assert!(dim >= 1, "mock_embed needs dim >= 1");
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(key);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.iter().map(|x| (x / norm) as f32).collect();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cosine_examples() {
        let v = [0.3f32, -1.2, 4.0];
        assert_abs_diff_eq!(cosine(&v, &v).unwrap().value, 1.0, epsilon = 1e-12);
        assert_eq!(cosine(&[1.0f64, 0.0], &[0.0f64, 1.0]).unwrap().value, 0.0);
        assert_abs_diff_eq!(
            cosine(&[1.0f64, 0.0], &[1.0f64, 1.0]).unwrap().value,
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-6
        );
        let z = cosine(&[0.0f64, 0.0], &[1.0f64, 1.0]).unwrap();
        assert_eq!(z.value, 0.0);
        assert!(z.degenerate);
        assert!(cosine(&[1.0f64], &[1.0f64, 2.0]).is_err());
    }

    #[test]
    fn projection_examples() {
        let id = ProjectionMatrix::identity(3);
        assert_eq!(project(&id, &[1.0, -2.0, 3.5]).unwrap(), vec![1.0, -2.0, 3.5]);
        let swap = ProjectionMatrix::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(project(&swap, &[2.0, 3.0]).unwrap(), vec![3.0, 2.0]);
        let zero = ProjectionMatrix::new(2, 2, vec![0.0; 4]).unwrap();
        assert_eq!(project(&zero, &[2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        assert!(project(&swap, &[1.0]).is_err());
        assert!(ProjectionMatrix::default_for(4, 8).is_err());
        assert!(ProjectionMatrix::default_for(4, 4).unwrap().is_identity());
    }

    #[test]
    fn mock_embed_is_deterministic_unit() {
        let a = mock_embed("vacation", 16, 7);
        let b = mock_embed("vacation", 16, 7);
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-6);
        assert_ne!(a, mock_embed("vacation", 16, 8));
        assert_eq!(mock_embed("x", 1, 0).len(), 1);
    }

    #[test]
    fn kgeb_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let t = EmbeddingTable::new(4, vec!["a".into(), "b".into()], (0..8).map(|i| i as f32 * 0.5).collect())
            .unwrap();
        let (vp, np) = (dir.path().join("v.kgeb"), dir.path().join("v.vocab"));
        t.save(&vp, &np).unwrap();
        let back = EmbeddingTable::load(&vp, &np).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.len(), 2);
        assert_eq!(back.get("b").unwrap(), &[2.0, 2.5, 3.0, 3.5]);

        fs::write(&np, "a\nb\nc\n").unwrap();
        assert!(matches!(EmbeddingTable::load(&vp, &np), Err(Error::Format(_))));

        let mut bytes = t.to_kgeb_bytes();
        bytes[0] = b'X';
        assert!(parse_kgeb(&bytes).is_err());
        let mut bytes = t.to_kgeb_bytes();
        bytes[4] = 2;
        assert!(parse_kgeb(&bytes).is_err());

        let mut bytes = t.to_kgeb_bytes();
        let nan_at_row1 = KGEB_HEADER + 4 * 5;
        bytes[nan_at_row1..nan_at_row1 + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(parse_kgeb(&bytes), Err(Error::NonFinite { row: 1 })));
    }

    #[test]
    fn kgeb_header_layout() {
        let t = EmbeddingTable::new(2, vec!["x".into()], vec![1.0, -1.0]).unwrap();
        let bytes = t.to_kgeb_bytes();
        assert_eq!(&bytes[..4], b"KGEB");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(&bytes[12..20], &[1, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[20..24], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 28);
    }
}
