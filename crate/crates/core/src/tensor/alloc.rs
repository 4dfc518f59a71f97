//! Per-thread accounting of tensor buffer bytes.
//!
//! Every tensor payload is wrapped in a [`Storage`], which reports its size to
//! counters owned by the allocating thread. The counters give the benchmark a
//! peak-memory figure without an instrumented global allocator, and an
//! optional byte limit lets it turn an oversize run into a reported result
//! instead of an abort.

use std::cell::Cell;
use std::ops::{Deref, DerefMut};

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
    static LIMIT: Cell<Option<usize>> = const { Cell::new(None) };
}

/// Panic payload raised when an allocation would cross the thread's byte limit.
#[derive(Debug, Clone, Copy)]
pub struct OutOfMemory {
    pub requested: usize,
    pub live: usize,
    pub limit: usize,
}

/// Bytes currently held by tensors created on this thread.
pub fn live_bytes() -> usize {
    LIVE.with(Cell::get)
}

/// High-water mark since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.with(Cell::get)
}

/// Restart peak tracking from the current live byte count.
pub fn reset_peak() {
    PEAK.with(|p| p.set(live_bytes()));
}

/// Cap the bytes live tensors may hold on this thread. `None` removes the cap.
pub fn set_memory_limit(limit: Option<usize>) {
    LIMIT.with(|l| l.set(limit));
}

fn check(bytes: usize) {
    if let Some(limit) = LIMIT.with(Cell::get) {
        let live = live_bytes();
        if live + bytes > limit {
            std::panic::panic_any(OutOfMemory {
                requested: bytes,
                live,
                limit,
            });
        }
    }
}

fn track_alloc(bytes: usize) {
    LIVE.with(|l| {
        let now = l.get() + bytes;
        l.set(now);
        PEAK.with(|p| {
            if now > p.get() {
                p.set(now)
            }
        });
    });
}

fn track_free(bytes: usize) {
    LIVE.with(|l| l.set(l.get().saturating_sub(bytes)));
}

/// A zero-filled buffer of `n` values, refused up front if it would cross the limit.
pub fn zeroed(n: usize) -> Vec<f64> {
    check(n * std::mem::size_of::<f64>());
    vec![0.0; n]
}

/// Owned, accounted tensor payload.
#[derive(Debug)]
pub struct Storage {
    buf: Vec<f64>,
    bytes: usize,
}

impl Storage {
    pub fn new(buf: Vec<f64>) -> Self {
        let bytes = buf.len() * std::mem::size_of::<f64>();
        check(bytes);
        track_alloc(bytes);
        Storage { buf, bytes }
    }
}

impl Drop for Storage {
    fn drop(&mut self) {
        track_free(self.bytes);
    }
}

impl Deref for Storage {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.buf
    }
}

impl DerefMut for Storage {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.buf
    }
}
