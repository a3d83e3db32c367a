//! Deterministic data-parallel execution over disjoint output regions.
//!
//! The worker count is a per-thread setting, not a tuning knob for results:
//! every output chunk is written by exactly one worker and each element's
//! reduction order is fixed by the kernel, so outputs are bitwise identical
//! for any worker count. Workers are scoped `std::thread`s; with one worker
//! everything runs inline on the calling thread and nothing is spawned.

use std::cell::Cell;

thread_local! {
    static WORKERS: Cell<usize> = const { Cell::new(1) };
}

/// Run `f` with the calling thread's worker count set to `n`.
///
/// Nested kernel calls made from inside worker threads see the default of 1,
/// so there is no nested parallelism.
pub fn with_workers<R>(n: usize, f: impl FnOnce() -> R) -> R {
    let n = n.max(1);
    let prev = WORKERS.with(|w| w.replace(n));
    let out = f();
    WORKERS.with(|w| w.set(prev));
    out
}

/// Current worker count for kernels invoked from this thread.
pub fn workers() -> usize {
    WORKERS.with(|w| w.get())
}

/// Split `data` into chunks of `chunk_len` (the last may be shorter) and call
/// `f(chunk_index, chunk)` for every chunk, distributing contiguous runs of
/// chunks across the current worker count.
///
/// Each chunk is owned by exactly one worker and chunks are processed in
/// ascending index order within a worker, so the result does not depend on
/// how many workers run.
pub(crate) fn for_each_chunk<F>(data: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    assert!(chunk_len > 0, "chunk_len must be positive");
    let n_chunks = data.len().div_ceil(chunk_len);
    let n_workers = workers().clamp(1, n_chunks.max(1));

    if n_workers <= 1 {
        for (idx, chunk) in data.chunks_mut(chunk_len).enumerate() {
            f(idx, chunk);
        }
        return;
    }

    let chunks_per_worker = n_chunks.div_ceil(n_workers);
    let mut spans: Vec<(usize, &mut [f64])> = Vec::with_capacity(n_workers);
    let mut rest = data;
    let mut next_chunk = 0;
    while !rest.is_empty() {
        let take = (chunks_per_worker * chunk_len).min(rest.len());
        let (head, tail) = rest.split_at_mut(take);
        spans.push((next_chunk, head));
        next_chunk += chunks_per_worker;
        rest = tail;
    }

    std::thread::scope(|scope| {
        for (first_chunk, span) in spans {
            let f = &f;
            scope.spawn(move || {
                for (offset, chunk) in span.chunks_mut(chunk_len).enumerate() {
                    f(first_chunk + offset, chunk);
                }
            });
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_indices_cover_all_chunks_once() {
        for n_workers in [1, 2, 3, 8] {
            let mut data = vec![0.0; 37];
            with_workers(n_workers, || {
                for_each_chunk(&mut data, 5, |idx, chunk| {
                    for v in chunk.iter_mut() {
                        *v += 1.0 + idx as f64;
                    }
                });
            });
            let expect: Vec<f64> = (0..37).map(|i| 1.0 + (i / 5) as f64).collect();
            assert_eq!(data, expect, "workers={n_workers}");
        }
    }

    #[test]
    fn with_workers_restores_previous_value() {
        assert_eq!(workers(), 1);
        with_workers(4, || {
            assert_eq!(workers(), 4);
            with_workers(2, || assert_eq!(workers(), 2));
            assert_eq!(workers(), 4);
        });
        assert_eq!(workers(), 1);
    }
}
