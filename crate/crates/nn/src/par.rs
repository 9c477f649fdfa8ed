//! Order-preserving parallel maps with a sequential fallback.
//!
//! Compiled with the `parallel` feature (default) these run on rayon; the
//! runtime switch [`set_serial`] forces sequential execution without
//! rebuilding. Both paths return results in item order and callers reduce
//! sequentially, so outputs are bit-identical regardless of mode or thread
//! count.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SERIAL: AtomicBool = AtomicBool::new(false);

/// Force sequential execution at runtime (e.g. `--serial` on the CLI).
pub fn set_serial(serial: bool) {
    FORCE_SERIAL.store(serial, Ordering::Relaxed);
}

/// True when maps will actually fan out to rayon.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && !FORCE_SERIAL.load(Ordering::Relaxed)
}

/// Map `f` over `0..n`, preserving index order in the result.
pub fn par_map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(&f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Map `f` over a slice, preserving item order in the result.
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() {
            use rayon::prelude::*;
            return items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect();
        }
    }
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_preserved_and_modes_agree() {
        let parallel: Vec<usize> = par_map_range(1000, |i| i * i);
        set_serial(true);
        let serial: Vec<usize> = par_map_range(1000, |i| i * i);
        set_serial(false);
        assert_eq!(parallel, serial);
        assert_eq!(parallel[37], 37 * 37);
    }
}
