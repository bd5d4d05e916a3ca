//! Latent flow-matching surrogate for time-dependent PDEs.

// `!(x > 0.0)` style checks are deliberate: they reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod container;
pub mod denoiser;
pub mod diagnostics;
pub mod error;
pub mod forecast;
pub mod fft;
pub mod meshcodec;
pub mod nn;
pub mod pdelab;
pub mod samplers;
pub mod schedules;
pub mod tensor;

#[cfg(test)]
pub(crate) mod gradcheck;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Keep freed tensor buffers on the heap instead of returning them to the
/// kernel after every op. Cuts system time sharply on glibc; a no-op elsewhere.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        // glibc caps the mmap threshold at 32 MiB on 64-bit targets
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        libc::mallopt(libc::M_TOP_PAD, 512 << 20);
    }
}
