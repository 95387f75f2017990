//! Binary patch-embedding store.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic   "BWLE"
//! version u32
//! dim     u32
//! repeated until EOF:
//!   image_id u64, grid_h u32, grid_w u32, patch_size u32, stride u32
//!   grid_h * grid_w * dim f32   (row-major over the grid)
//! ```
//!
//! Vectors are stored exactly as the extractor produced them. Consumers call
//! [`PatchGrid::normalized`] (or [`read_embeddings_normalized`]) to get unit
//! vectors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: [u8; 4] = *b"BWLE";
pub const EMBEDDING_VERSION: u32 = 1;

const RECORD_HEADER_LEN: usize = 8 + 4 * 4;

/// Pixel rectangle of a patch, top-left anchored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

/// Per-image grid of patch embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub image_id: u64,
    pub grid_h: u32,
    pub grid_w: u32,
    pub patch_size: u32,
    pub stride: u32,
    pub dim: u32,
    /// `grid_h * grid_w * dim` floats, row-major over (row, col).
    pub data: Vec<f32>,
}

impl PatchGrid {
    pub fn new(
        image_id: u64,
        grid_h: u32,
        grid_w: u32,
        patch_size: u32,
        stride: u32,
        dim: u32,
        data: Vec<f32>,
    ) -> Result<Self> {
        let grid = PatchGrid {
            image_id,
            grid_h,
            grid_w,
            patch_size,
            stride,
            dim,
            data,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(Error::Format(format!(
                "image {}: empty grid {}x{}",
                self.image_id, self.grid_h, self.grid_w
            )));
        }
        if self.dim == 0 {
            return Err(Error::Format(format!("image {}: dim 0", self.image_id)));
        }
        if self.stride == 0 || self.patch_size == 0 {
            return Err(Error::Format(format!(
                "image {}: stride {} / patch size {} must be positive",
                self.image_id, self.stride, self.patch_size
            )));
        }
        let expected = self.num_patches() * self.dim as usize;
        if self.data.len() != expected {
            return Err(Error::Format(format!(
                "image {}: {} floats, expected {}",
                self.image_id,
                self.data.len(),
                expected
            )));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format(format!(
                "image {}: non-finite value at float {}",
                self.image_id, i
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h as usize * self.grid_w as usize
    }

    pub fn patch(&self, row: u32, col: u32) -> &[f32] {
        let d = self.dim as usize;
        let i = (row as usize * self.grid_w as usize + col as usize) * d;
        &self.data[i..i + d]
    }

    /// Patches in row-major order.
    pub fn patches(&self) -> impl Iterator<Item = (u32, u32, &[f32])> + '_ {
        let w = self.grid_w;
        self.data
            .chunks_exact(self.dim as usize)
            .enumerate()
            .map(move |(i, v)| (i as u32 / w, i as u32 % w, v))
    }

    pub fn patch_rect(&self, row: u32, col: u32) -> Result<PatchRect> {
        if row >= self.grid_h || col >= self.grid_w {
            return Err(Error::Index(format!(
                "patch ({row}, {col}) outside {}x{} grid",
                self.grid_h, self.grid_w
            )));
        }
        Ok(PatchRect {
            x: col * self.stride,
            y: row * self.stride,
            w: self.patch_size,
            h: self.patch_size,
        })
    }

    /// Pixel extent covered by the union of all patches.
    pub fn pixel_extent(&self) -> (u32, u32) {
        (
            (self.grid_w - 1) * self.stride + self.patch_size,
            (self.grid_h - 1) * self.stride + self.patch_size,
        )
    }

    /// Copy with every patch vector scaled to unit L2 norm.
    pub fn normalized(&self) -> Result<PatchGrid> {
        let mut out = self.clone();
        for (i, v) in out.data.chunks_exact_mut(self.dim as usize).enumerate() {
            normalize_in_place(v).map_err(|_| {
                Error::Degenerate(format!(
                    "image {}: zero embedding at patch ({}, {})",
                    self.image_id,
                    i as u32 / self.grid_w,
                    i as u32 % self.grid_w
                ))
            })?;
        }
        Ok(out)
    }
}

/// Scale `v` to unit L2 norm. The norm is accumulated in f64.
pub fn normalize(v: &[f32]) -> Result<Vec<f32>> {
    let mut out = v.to_vec();
    normalize_in_place(&mut out)?;
    Ok(out)
}

pub fn normalize_in_place(v: &mut [f32]) -> Result<()> {
    let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Degenerate("cannot normalize a zero vector".into()));
    }
    for x in v.iter_mut() {
        *x = (*x as f64 / norm) as f32;
    }
    Ok(())
}

/// Write `grids` to `path`. Returns the number of records written.
pub fn write_embeddings(path: impl AsRef<Path>, grids: &[PatchGrid]) -> Result<usize> {
    let path = path.as_ref();
    let dim = match grids.first() {
        Some(g) => g.dim,
        None => 0,
    };
    for g in grids {
        if g.dim != dim {
            return Err(Error::Format(format!(
                "mixed embedding dims in one file: {} and {}",
                dim, g.dim
            )));
        }
        g.validate()?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = EmbeddingWriter::new(BufWriter::new(file), dim, path.to_path_buf())?;
    for g in grids {
        w.write(g)?;
    }
    w.finish()
}

/// Streaming writer for an embedding file.
pub struct EmbeddingWriter<W: Write> {
    inner: W,
    dim: u32,
    count: usize,
    path: PathBuf,
}

impl<W: Write> EmbeddingWriter<W> {
    pub fn new(mut inner: W, dim: u32, path: PathBuf) -> Result<Self> {
        let mut header = Vec::with_capacity(12);
        header.extend_from_slice(&EMBEDDING_MAGIC);
        header.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        header.extend_from_slice(&dim.to_le_bytes());
        inner.write_all(&header).map_err(|e| Error::io(&path, e))?;
        Ok(EmbeddingWriter {
            inner,
            dim,
            count: 0,
            path,
        })
    }

    pub fn write(&mut self, g: &PatchGrid) -> Result<()> {
        if g.dim != self.dim {
            return Err(Error::Format(format!(
                "mixed embedding dims in one file: {} and {}",
                self.dim, g.dim
            )));
        }
        let mut buf = Vec::with_capacity(RECORD_HEADER_LEN + g.data.len() * 4);
        buf.extend_from_slice(&g.image_id.to_le_bytes());
        buf.extend_from_slice(&g.grid_h.to_le_bytes());
        buf.extend_from_slice(&g.grid_w.to_le_bytes());
        buf.extend_from_slice(&g.patch_size.to_le_bytes());
        buf.extend_from_slice(&g.stride.to_le_bytes());
        for v in &g.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.inner
            .write_all(&buf)
            .map_err(|e| Error::io(&self.path, e))?;
        self.count += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<usize> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(self.count)
    }
}

/// Streaming reader; yields one validated [`PatchGrid`] per record.
pub struct EmbeddingReader<R: Read> {
    inner: R,
    dim: u32,
    path: PathBuf,
    index: usize,
    done: bool,
}

impl EmbeddingReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        EmbeddingReader::new(BufReader::new(file), path.to_path_buf())
    }
}

impl<R: Read> EmbeddingReader<R> {
    pub fn new(mut inner: R, path: PathBuf) -> Result<Self> {
        let mut header = [0u8; 12];
        let n = read_full(&mut inner, &mut header).map_err(|e| Error::io(&path, e))?;
        if n < 4 {
            return Err(Error::Truncated(format!(
                "{}: {n} bytes, shorter than the magic",
                path.display()
            )));
        }
        let magic: [u8; 4] = header[..4].try_into().unwrap();
        if magic != EMBEDDING_MAGIC {
            return Err(Error::BadMagic {
                expected: EMBEDDING_MAGIC,
                found: magic,
            });
        }
        if n < header.len() {
            return Err(Error::Truncated(format!(
                "{}: header is {n} of 12 bytes",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != EMBEDDING_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                supported: EMBEDDING_VERSION,
            });
        }
        let dim = u32::from_le_bytes(header[8..12].try_into().unwrap());
        Ok(EmbeddingReader {
            inner,
            dim,
            path,
            index: 0,
            done: false,
        })
    }

    pub fn dim(&self) -> u32 {
        self.dim
    }

    fn next_record(&mut self) -> Result<Option<PatchGrid>> {
        let mut head = [0u8; RECORD_HEADER_LEN];
        let n = read_full(&mut self.inner, &mut head).map_err(|e| Error::io(&self.path, e))?;
        if n == 0 {
            return Ok(None);
        }
        if n < RECORD_HEADER_LEN {
            return Err(Error::Truncated(format!(
                "record {}: header is {n} of {RECORD_HEADER_LEN} bytes",
                self.index
            )));
        }
        if self.dim == 0 {
            return Err(Error::Format(
                "file declares dim 0 but contains records".into(),
            ));
        }
        let u32_at = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().unwrap());
        let image_id = u64::from_le_bytes(head[..8].try_into().unwrap());
        let (grid_h, grid_w, patch_size, stride) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20));
        let floats = (grid_h as u64)
            .checked_mul(grid_w as u64)
            .and_then(|p| p.checked_mul(self.dim as u64))
            .filter(|&f| f <= (usize::MAX / 4) as u64)
            .ok_or_else(|| {
                Error::Format(format!("record {}: payload size overflows", self.index))
            })? as usize;
        let mut payload = vec![0u8; floats * 4];
        let got = read_full(&mut self.inner, &mut payload).map_err(|e| Error::io(&self.path, e))?;
        if got < payload.len() {
            return Err(Error::Truncated(format!(
                "record {} (image {image_id}): payload is {got} of {} bytes",
                self.index,
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let grid = PatchGrid::new(image_id, grid_h, grid_w, patch_size, stride, self.dim, data)?;
        self.index += 1;
        Ok(Some(grid))
    }
}

impl<R: Read> Iterator for EmbeddingReader<R> {
    type Item = Result<PatchGrid>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_record() {
            Ok(Some(g)) => Some(Ok(g)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Read every record exactly as stored.
pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Vec<PatchGrid>> {
    EmbeddingReader::open(path)?.collect()
}

/// Read every record and normalize each patch vector.
pub fn read_embeddings_normalized(path: impl AsRef<Path>) -> Result<Vec<PatchGrid>> {
    EmbeddingReader::open(path)?
        .map(|g| g.and_then(|g| g.normalized()))
        .collect()
}
