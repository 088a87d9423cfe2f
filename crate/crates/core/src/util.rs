//! Small shared helpers.

/// Number of worker threads for embarrassingly parallel per-utterance work.
/// `LABNET_THREADS` overrides the detected parallelism; 0 or unparsable
/// values fall back to 1.
pub fn thread_count() -> usize {
    if let Ok(v) = std::env::var("LABNET_THREADS") {
        return v.trim().parse::<usize>().ok().filter(|&n| n > 0).unwrap_or(1);
    }
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Deterministic parallel map: results come back in input order regardless of
/// the thread count, so parallel and serial runs are bit-identical as long as
/// `f` itself is a pure function of `(index, item)`.
pub fn parallel_map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, T) -> R + Send + Sync,
{
    let threads = thread_count().min(items.len().max(1));
    if threads <= 1 {
        return items.into_iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let jobs: Vec<(usize, T)> = items.into_iter().enumerate().collect();
    let mut slots: Vec<Option<R>> = jobs.iter().map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let jobs = std::sync::Mutex::new(jobs.into_iter().map(Some).collect::<Vec<_>>());
    let out = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                let job = {
                    let mut guard = jobs.lock().unwrap();
                    if i >= guard.len() {
                        return;
                    }
                    guard[i].take()
                };
                let Some((idx, item)) = job else { return };
                let r = f(idx, item);
                out.lock().unwrap()[idx] = Some(r);
            });
        }
    });
    slots.into_iter().map(|s| s.expect("worker filled every slot")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_preserves_order() {
        let xs: Vec<usize> = (0..100).collect();
        let ys = parallel_map(xs, |i, x| i * 1000 + x);
        for (i, y) in ys.iter().enumerate() {
            assert_eq!(*y, i * 1000 + i);
        }
    }
}
