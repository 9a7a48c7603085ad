//! Named, stateless seed streams derived from one master seed.

/// Stream for model initialization (index 0: server, index `id`: client head).
pub const STREAM_INIT: &str = "init";
/// Stream for synthetic data generation (index: client id).
pub const STREAM_DATA: &str = "data";
/// Stream for local mini-batch shuffling (index: round and client id).
pub const STREAM_SHUFFLE: &str = "shuffle";
/// Stream for train/test splitting (index: client id).
pub const STREAM_SPLIT: &str = "split";

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// One SplitMix64 step from `state`.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `splitmix64((master ^ fnv1a64(label)) + index * GOLDEN)`.
pub fn derive_seed(master: u64, stream_label: &str, index: u64) -> u64 {
    splitmix64((master ^ fnv1a64(stream_label.as_bytes())).wrapping_add(index.wrapping_mul(GOLDEN)))
}
