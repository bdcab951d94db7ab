//! Order-preserving parallel map over scoped threads.

use crate::error::Result;

/// Worker count: `requested`, or the available parallelism when 0.
pub fn resolve_workers(requested: usize) -> usize {
    if requested > 0 {
        requested
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    }
}

/// Applies `f` to every item on up to `workers` threads. Results come back
/// in input order; the first error in input order wins.
pub fn map<T, U, F>(items: &[T], workers: usize, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync,
{
    let workers = resolve_workers(workers).min(items.len()).max(1);
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    let parts: Vec<Vec<Result<U>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    parts.into_iter().flatten().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn preserves_order_for_any_worker_count() {
        let items: Vec<u64> = (0..37).collect();
        let serial = map(&items, 1, |x| Ok(x * x)).unwrap();
        for w in [2, 3, 8, 64] {
            assert_eq!(map(&items, w, |x| Ok(x * x)).unwrap(), serial);
        }
    }

    #[test]
    fn first_error_in_order() {
        let items: Vec<u64> = (0..10).collect();
        let r = map(&items, 4, |&x| {
            if x % 3 == 2 {
                Err(Error::Data(format!("bad {x}")))
            } else {
                Ok(x)
            }
        });
        assert_eq!(r.unwrap_err().to_string(), "data: bad 2");
    }
}
