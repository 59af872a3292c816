//! Process-level tuning for the training loops.

use std::sync::Once;

static RETAIN: Once = Once::new();

/// Stops glibc from returning freed memory to the kernel between steps.
///
/// Each step allocates and frees the same large activation buffers, and
/// without this every step pays to fault them back in.
pub fn retain_heap() {
    RETAIN.call_once(|| {
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        // SAFETY: mallopt only adjusts allocator thresholds.
        unsafe {
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        }
    });
}
