//! Thread-pool band executor.
//!
//! Bands are a fixed function of the image layout, so distributing them over
//! any number of threads returns bit-identical results; see
//! [`desplat_core::exec`].

use desplat_core::exec::Executor;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

#[derive(Debug, Clone, Copy)]
pub struct Threads {
    count: usize,
}

impl Threads {
    pub fn new(count: usize) -> Self {
        Self {
            count: count.max(1),
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }
}

impl Executor for Threads {
    fn map_bands<T, F>(&self, bands: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync,
    {
        if self.count == 1 || bands <= 1 {
            return (0..bands).map(f).collect();
        }
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<T>>> = (0..bands).map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..self.count.min(bands) {
                scope.spawn(|| loop {
                    let band = next.fetch_add(1, Ordering::Relaxed);
                    if band >= bands {
                        break;
                    }
                    let value = f(band);
                    *slots[band].lock().unwrap() = Some(value);
                });
            }
        });
        slots
            .into_iter()
            .map(|slot| slot.into_inner().unwrap().expect("band not computed"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordered_results_regardless_of_scheduling() {
        let exec = Threads::new(4);
        let out = exec.map_bands(37, |b| b * 3);
        assert_eq!(out, (0..37).map(|b| b * 3).collect::<Vec<_>>());
    }
}
