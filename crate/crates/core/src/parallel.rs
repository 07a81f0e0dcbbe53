//! Ordered parallel map over a slice with scoped threads.

use std::sync::atomic::{AtomicUsize, Ordering};

/// Apply `f` to every item with up to `jobs` workers and return the results
/// in input order, so the output never depends on scheduling. `jobs <= 1`
/// runs inline on the caller's thread.
pub fn map_indexed<T, R, F>(items: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let mut merged: Vec<Option<R>> = Vec::with_capacity(items.len());
    merged.resize_with(items.len(), || None);
    std::thread::scope(|scope| {
        let workers: Vec<_> = (0..jobs)
            .map(|_| {
                scope.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= items.len() {
                            break;
                        }
                        local.push((i, f(i, &items[i])));
                    }
                    local
                })
            })
            .collect();
        for worker in workers {
            for (i, r) in worker.join().expect("worker panicked") {
                merged[i] = Some(r);
            }
        }
    });
    merged
        .into_iter()
        .map(|r| r.expect("every index visited exactly once"))
        .collect()
}
