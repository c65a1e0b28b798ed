//! Execution strategy for band-parallel work.
//!
//! The renderer partitions an image into fixed-height row bands and computes
//! each band as a pure function of its index. Because the band layout is a
//! constant of the algorithm (not of the thread count), any executor that
//! returns the per-band results in index order produces bit-identical images
//! and gradients. The std companion crate provides a threaded executor; this
//! crate only ships the sequential one.

use alloc::vec::Vec;

/// Rows per band; fixed so numeric results never depend on thread count.
pub const BAND_ROWS: u32 = 16;

pub trait Executor {
    /// Evaluate `f(0..bands)` and return results in index order.
    fn map_bands<T, F>(&self, bands: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync;
}

/// Runs bands one after another on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map_bands<T, F>(&self, bands: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync,
    {
        (0..bands).map(f).collect()
    }
}

/// Number of bands covering `rows` image rows.
pub fn band_count(rows: u32) -> usize {
    rows.div_ceil(BAND_ROWS) as usize
}

/// Row range `[start, end)` of band `band`.
pub fn band_rows(band: usize, rows: u32) -> (u32, u32) {
    let start = band as u32 * BAND_ROWS;
    (start, (start + BAND_ROWS).min(rows))
}
