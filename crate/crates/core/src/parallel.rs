//! Deterministic fan-out over scoped threads.

/// Computes `f(i)` for `i in 0..n` on up to `threads` workers; results come
/// back in index order so downstream reductions are thread-count independent.
pub fn map_indexed<R: Send>(n: usize, threads: usize, f: impl Fn(usize) -> R + Sync) -> Vec<R> {
    let threads = threads.max(1).min(n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let f = &f;
    let mut slots: Vec<Option<R>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| s.spawn(move || (t..n).step_by(threads).map(|i| (i, f(i))).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("slot filled")).collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn order_is_preserved() {
        let a = super::map_indexed(37, 4, |i| i * i);
        let b: Vec<_> = (0..37).map(|i| i * i).collect();
        assert_eq!(a, b);
    }
}
