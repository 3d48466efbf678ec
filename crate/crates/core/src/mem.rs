//! Allocation accounting for the benchmark harness.
//!
//! [`CountingAllocator`] wraps the system allocator and keeps a running byte
//! count and high-water mark per thread. Install it in a binary with
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: alignmamba::mem::CountingAllocator = alignmamba::mem::CountingAllocator;
//! ```
//!
//! Counts are per thread: memory allocated on one thread and freed on
//! another skews both, so measured regions should stay on one thread.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::sync::atomic::{AtomicBool, Ordering};

use thiserror::Error;

pub struct CountingAllocator;

static INSTALLED: AtomicBool = AtomicBool::new(false);

thread_local! {
    static CURRENT: Cell<isize> = const { Cell::new(0) };
    static PEAK: Cell<isize> = const { Cell::new(0) };
    // (limit in bytes, baseline the limit is measured from)
    static BUDGET: Cell<Option<(usize, isize)>> = const { Cell::new(None) };
}

#[inline]
fn note(delta: isize) {
    let _ = CURRENT.try_with(|c| {
        let now = c.get() + delta;
        c.set(now);
        let _ = PEAK.try_with(|p| {
            if now > p.get() {
                p.set(now);
            }
        });
    });
}

#[inline]
fn mark_installed() {
    if !INSTALLED.load(Ordering::Relaxed) {
        INSTALLED.store(true, Ordering::Relaxed);
    }
}

// SAFETY: every call is forwarded unchanged to `System`; bookkeeping only
// touches const-initialized thread-locals, which never allocate.
unsafe impl GlobalAlloc for CountingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            mark_installed();
            note(layout.size() as isize);
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            mark_installed();
            note(layout.size() as isize);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        note(-(layout.size() as isize));
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            note(new_size as isize - layout.size() as isize);
        }
        p
    }
}

/// Whether a [`CountingAllocator`] is serving allocations in this process.
pub fn is_installed() -> bool {
    if !INSTALLED.load(Ordering::Relaxed) {
        // any heap allocation flips the flag when the allocator is live
        drop(std::hint::black_box(Box::new(0u64)));
    }
    INSTALLED.load(Ordering::Relaxed)
}

/// Bytes currently held by this thread (relative to thread start).
pub fn current_bytes() -> isize {
    CURRENT.with(Cell::get)
}

/// High-water mark of [`current_bytes`] since the last [`reset_peak`].
pub fn peak_bytes() -> isize {
    PEAK.with(Cell::get)
}

pub fn reset_peak() {
    let now = current_bytes();
    PEAK.with(|p| p.set(now));
}

/// Runs `f` and returns its result with the peak number of bytes held above
/// the level at entry.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, usize) {
    let base = current_bytes();
    reset_peak();
    let out = f();
    let peak = (peak_bytes() - base).max(0) as usize;
    (out, peak)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("allocating {requested} bytes would exceed the {limit}-byte budget ({in_use} in use)")]
pub struct OutOfMemory {
    pub requested: usize,
    pub limit: usize,
    pub in_use: usize,
}

/// Caps the bytes that [`try_zeroed`] may bring this thread to, measured from
/// the current level. `None` removes the cap.
pub fn set_budget(limit: Option<usize>) {
    let base = current_bytes();
    BUDGET.with(|b| b.set(limit.map(|l| (l, base))));
}

/// A zero-filled buffer of `n` elements, or [`OutOfMemory`] when the thread
/// budget or the system allocator refuses it.
pub fn try_zeroed<T: Clone + Default>(n: usize) -> Result<Vec<T>, OutOfMemory> {
    let requested = n.saturating_mul(std::mem::size_of::<T>());
    if let Some((limit, base)) = BUDGET.with(Cell::get) {
        let in_use = (current_bytes() - base).max(0) as usize;
        if in_use.saturating_add(requested) > limit {
            return Err(OutOfMemory {
                requested,
                limit,
                in_use,
            });
        }
    }
    let mut v = Vec::new();
    v.try_reserve_exact(n).map_err(|_| OutOfMemory {
        requested,
        limit: usize::MAX,
        in_use: current_bytes().max(0) as usize,
    })?;
    v.resize(n, T::default());
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn allocator_is_installed_for_tests() {
        assert!(is_installed());
    }

    #[test]
    fn peak_counts_each_allocation_once() {
        let (_, peak) = measure(|| {
            let v: Vec<u64> = Vec::with_capacity(1000);
            drop(std::hint::black_box(v));
        });
        assert_eq!(peak, 8000);

        let (_, peak) = measure(|| {
            let a: Vec<u8> = Vec::with_capacity(4096);
            let b: Vec<u8> = Vec::with_capacity(1024);
            drop(std::hint::black_box(a));
            let c: Vec<u8> = Vec::with_capacity(2048);
            drop(std::hint::black_box((b, c)));
        });
        assert_eq!(peak, 5120);
    }

    #[test]
    fn budget_refuses_oversized_buffers() {
        set_budget(Some(1 << 20));
        assert!(try_zeroed::<f32>(1000).is_ok());
        let err = try_zeroed::<f32>(1 << 20).unwrap_err();
        assert_eq!(err.requested, 4 << 20);
        set_budget(None);
        assert_eq!(try_zeroed::<f32>(1 << 20).unwrap().len(), 1 << 20);
    }
}
