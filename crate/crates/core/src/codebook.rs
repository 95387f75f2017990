//! Non-object exemplar codebook.
//!
//! Patches are visited in stream order. A patch whose best cosine similarity
//! to the current exemplars is below `lambda` founds a new exemplar (count 1);
//! otherwise the most similar exemplar's count is incremented. Ties go to the
//! earliest-inserted exemplar. Counts therefore sum to the number of patches
//! streamed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel;
use crate::store::{normalize_in_place, PatchGrid};

pub const EXEMPLAR_MAGIC: [u8; 4] = *b"BWLX";
pub const EXEMPLAR_VERSION: u32 = 1;
pub const DEFAULT_LAMBDA: f32 = 0.2;
pub const DEFAULT_TOP_N: usize = 1000;

/// Below this many exemplars a nearest-neighbour scan stays on one thread.
const PAR_SCAN_MIN_ROWS: usize = 16 * 1024;
const PAR_SCAN_CHUNK_ROWS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Provenance {
    pub image_id: u64,
    pub row: u32,
    pub col: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExemplarInfo {
    pub count: u64,
    pub provenance: Provenance,
    pub insertion_index: u64,
}

/// Borrowed view of one exemplar.
#[derive(Debug, Clone, Copy)]
pub struct Exemplar<'a> {
    pub embedding: &'a [f32],
    pub count: u64,
    pub provenance: Provenance,
    pub insertion_index: u64,
}

/// Ordered exemplar embeddings (unit vectors, stored contiguously) with
/// nearest-neighbour tallies.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarSet {
    lambda: f32,
    dim: usize,
    matrix: Vec<f32>,
    info: Vec<ExemplarInfo>,
}

impl ExemplarSet {
    pub fn empty(dim: usize, lambda: f32) -> Result<Self> {
        validate_lambda(lambda)?;
        Ok(ExemplarSet {
            lambda,
            dim,
            matrix: Vec::new(),
            info: Vec::new(),
        })
    }

    /// Assemble a set from parts. Embeddings are normalized.
    pub fn from_parts(
        dim: usize,
        lambda: f32,
        exemplars: impl IntoIterator<Item = (Vec<f32>, ExemplarInfo)>,
    ) -> Result<Self> {
        let mut set = ExemplarSet::empty(dim, lambda)?;
        for (mut e, info) in exemplars {
            if e.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    found: e.len(),
                });
            }
            normalize_in_place(&mut e)?;
            set.matrix.extend_from_slice(&e);
            set.info.push(info);
        }
        Ok(set)
    }

    pub fn lambda(&self) -> f32 {
        self.lambda
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.info.len()
    }

    pub fn is_empty(&self) -> bool {
        self.info.is_empty()
    }

    pub fn get(&self, i: usize) -> Exemplar<'_> {
        let info = self.info[i];
        Exemplar {
            embedding: &self.matrix[i * self.dim..(i + 1) * self.dim],
            count: info.count,
            provenance: info.provenance,
            insertion_index: info.insertion_index,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Exemplar<'_>> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    pub fn info(&self) -> &[ExemplarInfo] {
        &self.info
    }

    /// Row-major exemplar embeddings.
    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    pub fn total_count(&self) -> u64 {
        self.info.iter().map(|e| e.count).sum()
    }

    fn check_dim(&self, query: &[f32]) -> Result<()> {
        if query.len() != self.dim || self.dim == 0 {
            return Err(Error::Dimension {
                expected: self.dim,
                found: query.len(),
            });
        }
        Ok(())
    }

    /// Most similar exemplar to a unit `query`: `(index, cosine)`. `None` when
    /// the set is empty. Lowest index wins ties, whether or not the scan is
    /// split across threads.
    pub fn nearest(&self, query: &[f32]) -> Result<Option<(usize, f32)>> {
        self.check_dim(query)?;
        Ok(self.nearest_unchecked(query))
    }

    fn nearest_unchecked(&self, query: &[f32]) -> Option<(usize, f32)> {
        if self.len() < PAR_SCAN_MIN_ROWS {
            return kernel::max_dot(query, &self.matrix);
        }
        let rows_per_chunk = PAR_SCAN_CHUNK_ROWS * self.dim;
        self.matrix
            .par_chunks(rows_per_chunk)
            .enumerate()
            .filter_map(|(c, chunk)| {
                kernel::max_dot_offset(query, chunk, c * PAR_SCAN_CHUNK_ROWS)
            })
            .reduce_with(|a, b| {
                if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) {
                    b
                } else {
                    a
                }
            })
    }

    /// Maximum cosine similarity of a unit `query` to the set; negative
    /// infinity for an empty set.
    pub fn s_max(&self, query: &[f32]) -> Result<f32> {
        Ok(self
            .nearest(query)?
            .map_or(f32::NEG_INFINITY, |(_, s)| s))
    }

    /// `s_max` for each row of a row-major batch of unit queries. Rows are
    /// scored independently, so the result does not depend on thread count.
    pub fn s_max_batch(&self, queries: &[f32]) -> Result<Vec<f32>> {
        if self.dim == 0 || queries.len() % self.dim != 0 {
            return Err(Error::Dimension {
                expected: self.dim,
                found: queries.len() % self.dim.max(1),
            });
        }
        const QUERY_CHUNK: usize = 256;
        let dim = self.dim;
        let mut out = vec![f32::NEG_INFINITY; queries.len() / dim];
        out.par_chunks_mut(QUERY_CHUNK)
            .zip(queries.par_chunks(QUERY_CHUNK * dim))
            .for_each(|(o, q)| {
                let mut best = vec![None; o.len()];
                kernel::max_dot_many(q, &self.matrix, dim, &mut best);
                for (slot, b) in o.iter_mut().zip(best) {
                    if let Some((_, s)) = b {
                        *slot = s;
                    }
                }
            });
        Ok(out)
    }

    /// The `n` exemplars with the largest counts, in descending count order;
    /// equal counts keep insertion order.
    pub fn top_n(&self, n: usize) -> Result<ExemplarSet> {
        if n == 0 {
            return Err(Error::Config("top-n must be at least 1".into()));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            let (ia, ib) = (&self.info[a], &self.info[b]);
            ib.count
                .cmp(&ia.count)
                .then(ia.insertion_index.cmp(&ib.insertion_index))
        });
        order.truncate(n);
        let mut matrix = Vec::with_capacity(order.len() * self.dim);
        let mut info = Vec::with_capacity(order.len());
        for i in order {
            matrix.extend_from_slice(&self.matrix[i * self.dim..(i + 1) * self.dim]);
            info.push(self.info[i]);
        }
        Ok(ExemplarSet {
            lambda: self.lambda,
            dim: self.dim,
            matrix,
            info,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut buf = Vec::with_capacity(20 + self.len() * (self.dim * 4 + 32));
        buf.extend_from_slice(&EXEMPLAR_MAGIC);
        buf.extend_from_slice(&EXEMPLAR_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&self.lambda.to_le_bytes());
        let count = u32::try_from(self.len())
            .map_err(|_| Error::Format("more than u32::MAX exemplars".into()))?;
        buf.extend_from_slice(&count.to_le_bytes());
        for e in self.iter() {
            for v in e.embedding {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.extend_from_slice(&e.count.to_le_bytes());
            buf.extend_from_slice(&e.provenance.image_id.to_le_bytes());
            buf.extend_from_slice(&e.provenance.row.to_le_bytes());
            buf.extend_from_slice(&e.provenance.col.to_le_bytes());
            buf.extend_from_slice(&e.insertion_index.to_le_bytes());
        }
        w.write_all(&buf).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ExemplarSet> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ExemplarSet> {
        if bytes.len() < 4 {
            return Err(Error::Truncated("exemplar file shorter than magic".into()));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != EXEMPLAR_MAGIC {
            return Err(Error::BadMagic {
                expected: EXEMPLAR_MAGIC,
                found: magic,
            });
        }
        if bytes.len() < 20 {
            return Err(Error::Truncated(format!(
                "exemplar header is {} of 20 bytes",
                bytes.len()
            )));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != EXEMPLAR_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                supported: EXEMPLAR_VERSION,
            });
        }
        let dim = u32_at(8) as usize;
        let lambda = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
        validate_lambda(lambda).map_err(|_| Error::Format(format!("lambda {lambda} out of range")))?;
        let count = u32_at(16) as usize;
        if count > 0 && dim == 0 {
            return Err(Error::Format("exemplars with dim 0".into()));
        }
        let rec = dim * 4 + 8 + 8 + 4 + 4 + 8;
        let expected = 20 + count * rec;
        if bytes.len() < expected {
            return Err(Error::Truncated(format!(
                "exemplar file is {} of {expected} bytes",
                bytes.len()
            )));
        }
        if bytes.len() > expected {
            return Err(Error::Format(format!(
                "{} trailing bytes after {count} exemplars",
                bytes.len() - expected
            )));
        }
        let mut matrix = Vec::with_capacity(count * dim);
        let mut info = Vec::with_capacity(count);
        for i in 0..count {
            let r = &bytes[20 + i * rec..20 + (i + 1) * rec];
            let start = matrix.len();
            matrix.extend(
                r[..dim * 4]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap())),
            );
            let e = &matrix[start..];
            if e.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("exemplar {i}: non-finite value")));
            }
            let norm: f64 = e.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-4 {
                return Err(Error::Format(format!("exemplar {i}: norm {norm} is not unit")));
            }
            let t = &r[dim * 4..];
            let count = u64::from_le_bytes(t[..8].try_into().unwrap());
            if count == 0 {
                return Err(Error::Format(format!("exemplar {i}: zero count")));
            }
            info.push(ExemplarInfo {
                count,
                provenance: Provenance {
                    image_id: u64::from_le_bytes(t[8..16].try_into().unwrap()),
                    row: u32::from_le_bytes(t[16..20].try_into().unwrap()),
                    col: u32::from_le_bytes(t[20..24].try_into().unwrap()),
                },
                insertion_index: u64::from_le_bytes(t[24..32].try_into().unwrap()),
            });
        }
        Ok(ExemplarSet {
            lambda,
            dim,
            matrix,
            info,
        })
    }
}

fn validate_lambda(lambda: f32) -> Result<()> {
    if lambda > -1.0 && lambda < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "lambda {lambda} must lie in (-1, 1)"
        )))
    }
}

/// What happened to one streamed patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Assignment {
    Founded { index: usize },
    Absorbed { index: usize, similarity: f32 },
}

/// Incremental greedy codebook construction.
#[derive(Debug, Clone)]
pub struct CodebookBuilder {
    set: ExemplarSet,
    scratch: Vec<f32>,
    seen: u64,
}

impl CodebookBuilder {
    pub fn new(dim: usize, lambda: f32) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Dimension {
                expected: 1,
                found: 0,
            });
        }
        Ok(CodebookBuilder {
            set: ExemplarSet::empty(dim, lambda)?,
            scratch: vec![0.0; dim],
            seen: 0,
        })
    }

    pub fn patches_seen(&self) -> u64 {
        self.seen
    }

    pub fn exemplars(&self) -> &ExemplarSet {
        &self.set
    }

    /// Feed one raw (unnormalized) patch embedding.
    pub fn push(&mut self, embedding: &[f32], provenance: Provenance) -> Result<Assignment> {
        if embedding.len() != self.set.dim {
            return Err(Error::Dimension {
                expected: self.set.dim,
                found: embedding.len(),
            });
        }
        self.scratch.copy_from_slice(embedding);
        normalize_in_place(&mut self.scratch)?;
        let nearest = self.set.nearest_unchecked(&self.scratch);
        let assignment = match nearest {
            Some((index, similarity)) if similarity >= self.set.lambda => {
                self.set.info[index].count += 1;
                Assignment::Absorbed { index, similarity }
            }
            _ => {
                let index = self.set.len();
                self.set.matrix.extend_from_slice(&self.scratch);
                self.set.info.push(ExemplarInfo {
                    count: 1,
                    provenance,
                    insertion_index: self.seen,
                });
                Assignment::Founded { index }
            }
        };
        self.seen += 1;
        Ok(assignment)
    }

    /// Feed every patch of a grid in row-major order.
    pub fn push_grid(&mut self, grid: &PatchGrid) -> Result<()> {
        for (row, col, v) in grid.patches() {
            self.push(
                v,
                Provenance {
                    image_id: grid.image_id,
                    row,
                    col,
                },
            )?;
        }
        Ok(())
    }

    pub fn finish(self) -> ExemplarSet {
        self.set
    }
}

/// Build an exemplar set from a stream of `(provenance, embedding)` pairs.
pub fn build_exemplars<'a, I>(patches: I, dim: usize, lambda: f32) -> Result<ExemplarSet>
where
    I: IntoIterator<Item = (Provenance, &'a [f32])>,
{
    let mut b = CodebookBuilder::new(dim, lambda)?;
    for (p, v) in patches {
        b.push(v, p)?;
    }
    Ok(b.finish())
}

/// Build from grids in the order given, patches row-major within each grid.
pub fn build_from_grids<'a>(
    grids: impl IntoIterator<Item = &'a PatchGrid>,
    dim: usize,
    lambda: f32,
) -> Result<ExemplarSet> {
    let mut b = CodebookBuilder::new(dim, lambda)?;
    for g in grids {
        if g.dim as usize != dim {
            return Err(Error::Dimension {
                expected: dim,
                found: g.dim as usize,
            });
        }
        b.push_grid(g)?;
    }
    Ok(b.finish())
}
