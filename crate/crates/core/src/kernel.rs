//! Dot-product scan kernels.
//!
//! Every dot product, whichever entry point computes it, accumulates into
//! eight f32 lanes over 8-wide chunks, folds the lanes in one fixed order and
//! then adds the scalar tail. The AVX2 path does the same with separate
//! multiply and add (no fused multiply-add), so results are bit-identical
//! across dispatch paths and across blocked and unblocked scans.

const LANES: usize = 8;
const ROW_BLOCK: usize = 4;

#[inline(always)]
fn fold_lanes(acc: &[f32; LANES]) -> f32 {
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]))
}

/// Row-block primitives. Implementations must agree bit for bit.
trait Kernels {
    unsafe fn dot(a: &[f32], b: &[f32]) -> f32;
    unsafe fn dot4(q: &[f32], rows: [&[f32]; ROW_BLOCK]) -> [f32; ROW_BLOCK];
    unsafe fn dot2x4(q: [&[f32]; 2], rows: [&[f32]; ROW_BLOCK]) -> [[f32; ROW_BLOCK]; 2];
}

#[inline(always)]
fn tail_dot(a: &[f32], b: &[f32]) -> f32 {
    let mut tail = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        tail += x * y;
    }
    tail
}

struct Portable;

impl Kernels for Portable {
    #[inline(always)]
    unsafe fn dot(a: &[f32], b: &[f32]) -> f32 {
        let split = a.len() - a.len() % LANES;
        let mut acc = [0.0f32; LANES];
        for (ca, cb) in a[..split].chunks_exact(LANES).zip(b[..split].chunks_exact(LANES)) {
            for i in 0..LANES {
                acc[i] += ca[i] * cb[i];
            }
        }
        fold_lanes(&acc) + tail_dot(&a[split..], &b[split..])
    }

    #[inline(always)]
    unsafe fn dot4(q: &[f32], rows: [&[f32]; ROW_BLOCK]) -> [f32; ROW_BLOCK] {
        let out = Self::dot2x4([q, q], rows);
        out[0]
    }

    #[inline(always)]
    unsafe fn dot2x4(q: [&[f32]; 2], rows: [&[f32]; ROW_BLOCK]) -> [[f32; ROW_BLOCK]; 2] {
        let mut out = [[0.0f32; ROW_BLOCK]; 2];
        for k in 0..2 {
            for r in 0..ROW_BLOCK {
                out[k][r] = Self::dot(q[k], rows[r]);
            }
        }
        out
    }
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use super::{fold_lanes, tail_dot, Kernels, LANES, ROW_BLOCK};
    use std::arch::x86_64::*;

    pub(super) struct Avx2;

    #[inline(always)]
    unsafe fn fold(v: __m256, a: &[f32], b: &[f32]) -> f32 {
        let mut lanes = [0.0f32; LANES];
        _mm256_storeu_ps(lanes.as_mut_ptr(), v);
        fold_lanes(&lanes) + tail_dot(a, b)
    }

    #[target_feature(enable = "avx2")]
    unsafe fn dot(a: &[f32], b: &[f32]) -> f32 {
        let split = a.len() - a.len() % LANES;
        let (pa, pb) = (a.as_ptr(), b.as_ptr());
        let mut acc = _mm256_setzero_ps();
        let mut c = 0;
        while c < split {
            acc = _mm256_add_ps(acc, _mm256_mul_ps(_mm256_loadu_ps(pa.add(c)), _mm256_loadu_ps(pb.add(c))));
            c += LANES;
        }
        fold(acc, &a[split..], &b[split..])
    }

    #[target_feature(enable = "avx2")]
    unsafe fn dot4(q: &[f32], rows: [&[f32]; ROW_BLOCK]) -> [f32; ROW_BLOCK] {
        let split = q.len() - q.len() % LANES;
        let p = rows.map(|r| r.as_ptr());
        let mut acc = [_mm256_setzero_ps(); ROW_BLOCK];
        let mut c = 0;
        while c < split {
            let qv = _mm256_loadu_ps(q.as_ptr().add(c));
            for r in 0..ROW_BLOCK {
                acc[r] = _mm256_add_ps(acc[r], _mm256_mul_ps(qv, _mm256_loadu_ps(p[r].add(c))));
            }
            c += LANES;
        }
        let mut out = [0.0f32; ROW_BLOCK];
        for r in 0..ROW_BLOCK {
            out[r] = fold(acc[r], &q[split..], &rows[r][split..]);
        }
        out
    }

    #[target_feature(enable = "avx2")]
    unsafe fn dot2x4(q: [&[f32]; 2], rows: [&[f32]; ROW_BLOCK]) -> [[f32; ROW_BLOCK]; 2] {
        let split = q[0].len() - q[0].len() % LANES;
        let p = rows.map(|r| r.as_ptr());
        let mut a0 = [_mm256_setzero_ps(); ROW_BLOCK];
        let mut a1 = [_mm256_setzero_ps(); ROW_BLOCK];
        let mut c = 0;
        while c < split {
            let q0 = _mm256_loadu_ps(q[0].as_ptr().add(c));
            let q1 = _mm256_loadu_ps(q[1].as_ptr().add(c));
            for r in 0..ROW_BLOCK {
                let rv = _mm256_loadu_ps(p[r].add(c));
                a0[r] = _mm256_add_ps(a0[r], _mm256_mul_ps(q0, rv));
                a1[r] = _mm256_add_ps(a1[r], _mm256_mul_ps(q1, rv));
            }
            c += LANES;
        }
        let mut out = [[0.0f32; ROW_BLOCK]; 2];
        for r in 0..ROW_BLOCK {
            out[0][r] = fold(a0[r], &q[0][split..], &rows[r][split..]);
            out[1][r] = fold(a1[r], &q[1][split..], &rows[r][split..]);
        }
        out
    }

    impl Kernels for Avx2 {
        #[inline(always)]
        unsafe fn dot(a: &[f32], b: &[f32]) -> f32 {
            dot(a, b)
        }
        #[inline(always)]
        unsafe fn dot4(q: &[f32], rows: [&[f32]; ROW_BLOCK]) -> [f32; ROW_BLOCK] {
            dot4(q, rows)
        }
        #[inline(always)]
        unsafe fn dot2x4(q: [&[f32]; 2], rows: [&[f32]; ROW_BLOCK]) -> [[f32; ROW_BLOCK]; 2] {
            dot2x4(q, rows)
        }
    }
}

#[inline(always)]
fn offer(best: &mut (usize, f32), idx: usize, s: f32) {
    if s > best.1 {
        *best = (idx, s);
    }
}

/// Running max over the rows of `tile` (numbered from `first_row`) for every
/// query, updating `best` in place. Lowest row wins ties as long as tiles
/// arrive in ascending row order.
#[inline(always)]
unsafe fn max_dot_tile<K: Kernels>(queries: &[f32], tile: &[f32], first_row: usize, best: &mut [(usize, f32)]) {
    let dim = queries.len() / best.len();
    let n = tile.len() / dim;
    let row = |r: usize| &tile[r * dim..(r + 1) * dim];
    let query = |k: usize| &queries[k * dim..(k + 1) * dim];
    let mut k = 0;
    while k + 2 <= best.len() {
        let q = [query(k), query(k + 1)];
        let mut r = 0;
        while r + ROW_BLOCK <= n {
            let sims = K::dot2x4(q, [row(r), row(r + 1), row(r + 2), row(r + 3)]);
            for (j, per_row) in sims.iter().enumerate() {
                for (i, &s) in per_row.iter().enumerate() {
                    offer(&mut best[k + j], first_row + r + i, s);
                }
            }
            r += ROW_BLOCK;
        }
        while r < n {
            for j in 0..2 {
                offer(&mut best[k + j], first_row + r, K::dot(q[j], row(r)));
            }
            r += 1;
        }
        k += 2;
    }
    if k < best.len() {
        let q = query(k);
        let mut r = 0;
        while r + ROW_BLOCK <= n {
            let sims = K::dot4(q, [row(r), row(r + 1), row(r + 2), row(r + 3)]);
            for (i, &s) in sims.iter().enumerate() {
                offer(&mut best[k], first_row + r + i, s);
            }
            r += ROW_BLOCK;
        }
        while r < n {
            offer(&mut best[k], first_row + r, K::dot(q, row(r)));
            r += 1;
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn max_dot_tile_avx2(queries: &[f32], tile: &[f32], first_row: usize, best: &mut [(usize, f32)]) {
    max_dot_tile::<avx2::Avx2>(queries, tile, first_row, best)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn dot_avx2(a: &[f32], b: &[f32]) -> f32 {
    <avx2::Avx2 as Kernels>::dot(a, b)
}

fn max_dot_scan(query: &[f32], matrix: &[f32], first_row: usize, portable: bool) -> Option<(usize, f32)> {
    let dim = query.len();
    if dim == 0 || matrix.is_empty() {
        return None;
    }
    let mut best = [(0usize, f32::NEG_INFINITY)];
    #[cfg(target_arch = "x86_64")]
    if !portable && has_avx2() {
        // SAFETY: the avx2 feature was detected at runtime.
        unsafe { max_dot_tile_avx2(query, matrix, first_row, &mut best) };
        return Some(best[0]);
    }
    let _ = portable;
    // SAFETY: the portable kernels have no preconditions.
    unsafe { max_dot_tile::<Portable>(query, matrix, first_row, &mut best) };
    Some(best[0])
}

#[inline]
fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// Dot product of two equal-length slices.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len(), "dot: length mismatch");
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the avx2 feature was detected at runtime.
        return unsafe { dot_avx2(a, b) };
    }
    // SAFETY: the portable kernels have no preconditions.
    unsafe { Portable::dot(a, b) }
}

/// Scan a row-major `matrix` (rows of `query.len()` floats) and return
/// `(row, similarity)` of the largest dot product, lowest row on ties.
/// `None` for an empty matrix.
pub fn max_dot(query: &[f32], matrix: &[f32]) -> Option<(usize, f32)> {
    max_dot_offset(query, matrix, 0)
}

pub(crate) fn max_dot_offset(
    query: &[f32],
    matrix: &[f32],
    first_row: usize,
) -> Option<(usize, f32)> {
    if !query.is_empty() {
        assert_eq!(matrix.len() % query.len(), 0, "max_dot: ragged matrix");
    }
    max_dot_scan(query, matrix, first_row, false)
}

const TILE_BYTES: usize = 64 * 1024;

/// `max_dot` for each row of a row-major batch of queries, written to `out`.
/// Same results as calling `max_dot` per query; the matrix is walked in
/// cache-sized row tiles shared by the whole batch.
pub fn max_dot_many(queries: &[f32], matrix: &[f32], dim: usize, out: &mut [Option<(usize, f32)>]) {
    assert_eq!(queries.len(), dim * out.len(), "max_dot_many: batch shape");
    assert!(dim > 0 && matrix.len() % dim == 0, "max_dot_many: ragged matrix");
    if matrix.is_empty() {
        out.fill(None);
        return;
    }
    let tile_rows = (TILE_BYTES / (4 * dim)).max(ROW_BLOCK) / ROW_BLOCK * ROW_BLOCK;
    let mut best = vec![(0usize, f32::NEG_INFINITY); out.len()];
    #[cfg(target_arch = "x86_64")]
    let avx2 = has_avx2();
    for (t, tile) in matrix.chunks(tile_rows * dim).enumerate() {
        let first = t * tile_rows;
        #[cfg(target_arch = "x86_64")]
        if avx2 {
            // SAFETY: the avx2 feature was detected at runtime.
            unsafe { max_dot_tile_avx2(queries, tile, first, &mut best) };
            continue;
        }
        // SAFETY: the portable kernels have no preconditions.
        unsafe { max_dot_tile::<Portable>(queries, tile, first, &mut best) };
    }
    for (o, b) in out.iter_mut().zip(best) {
        *o = Some(b);
    }
}

/// Portable path only; exposed so tests can compare dispatch routes.
#[doc(hidden)]
pub fn max_dot_portable(query: &[f32], matrix: &[f32]) -> Option<(usize, f32)> {
    max_dot_scan(query, matrix, 0, true)
}

#[doc(hidden)]
pub fn dot_portable(a: &[f32], b: &[f32]) -> f32 {
    // SAFETY: the portable kernels have no preconditions.
    unsafe { Portable::dot(a, b) }
}
