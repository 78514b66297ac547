//! Worker-count control for the numeric kernels.
//!
//! `TEMVIRO_THREADS` caps the worker count; `0` (or `1`) selects the
//! single-threaded mode. Every kernel computes each output cell with a
//! single writer and a fixed summation order, so results are bitwise
//! identical across worker counts; the cap only trades wall time.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

const UNSET: usize = usize::MAX;

static THREAD_CAP: AtomicUsize = AtomicUsize::new(UNSET);
static POOL_INIT: OnceLock<()> = OnceLock::new();

/// Reads `TEMVIRO_THREADS` once and applies it. Called by binaries at startup;
/// library use falls back to the environment lazily.
pub fn init_from_env() {
    if let Ok(raw) = std::env::var("TEMVIRO_THREADS") {
        if let Ok(n) = raw.trim().parse::<usize>() {
            set_thread_cap(n);
        }
    }
}

/// Overrides the worker cap. `0` and `1` both mean single-threaded.
pub fn set_thread_cap(n: usize) {
    THREAD_CAP.store(n, Ordering::SeqCst);
    if n > 1 {
        configure_pool(n);
    }
}

fn cap() -> usize {
    let c = THREAD_CAP.load(Ordering::SeqCst);
    if c != UNSET {
        return c;
    }
    let from_env = std::env::var("TEMVIRO_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        });
    THREAD_CAP.store(from_env, Ordering::SeqCst);
    if from_env > 1 {
        configure_pool(from_env);
    }
    from_env
}

fn configure_pool(n: usize) {
    POOL_INIT.get_or_init(|| {
        // Best effort: the global pool may already exist (e.g. under a test
        // harness); the cap still gates whether parallel paths run at all.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    });
}

/// Whether kernels should take their parallel path.
pub fn parallel_enabled() -> bool {
    cap() > 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_and_one_are_serial() {
        let saved = THREAD_CAP.load(Ordering::SeqCst);
        set_thread_cap(0);
        assert!(!parallel_enabled());
        set_thread_cap(1);
        assert!(!parallel_enabled());
        THREAD_CAP.store(saved, Ordering::SeqCst);
    }
}
