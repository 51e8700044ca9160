//! On-disk formats: PPM images, raw float feature maps, checkpoints.
//!
//! All multi-byte integers and floats are little-endian. Every reader
//! validates magic bytes and lengths up front and reports the byte offset
//! of the first problem it sees.

pub mod checkpoint;
pub mod ppm;
pub mod stfr;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use ppm::{read_ppm, write_ppm};
pub use stfr::{read_stfr, write_stfr};

pub const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64_init() -> u64 {
    FNV_OFFSET
}

pub fn fnv1a64_update(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv1a64_update(fnv1a64_init(), bytes)
}
