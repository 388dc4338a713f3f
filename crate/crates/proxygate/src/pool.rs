use std::thread;

use proxygate_core::ParallelMap;

/// Scoped worker threads over contiguous chunks; output order matches input
/// order, so results do not depend on the worker count.
#[derive(Debug, Clone, Copy)]
pub struct Workers(usize);

impl Workers {
    pub fn new(count: usize) -> Self {
        Workers(count.max(1))
    }

    pub fn count(&self) -> usize {
        self.0
    }
}

impl ParallelMap for Workers {
    fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync,
    {
        if self.0 == 1 || items.len() <= 1 {
            return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
        }
        let chunk = items.len().div_ceil(self.0);
        let f = &f;
        thread::scope(|s| {
            let handles: Vec<_> = items
                .chunks(chunk)
                .enumerate()
                .map(|(c, part)| {
                    s.spawn(move || {
                        part.iter()
                            .enumerate()
                            .map(|(i, t)| f(c * chunk + i, t))
                            .collect::<Vec<R>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("worker panicked"))
                .collect()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order() {
        let items: Vec<u32> = (0..103).collect();
        let out = Workers::new(4).map(&items, |i, &x| (i, x * 2));
        assert_eq!(
            out,
            items
                .iter()
                .map(|&x| (x as usize, x * 2))
                .collect::<Vec<_>>()
        );
    }
}
