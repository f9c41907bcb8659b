/// Deterministic seed derivation for independent RNG streams.
///
/// Mixes a base seed with a role tag so that, e.g., masking noise and context
/// sampling never share a stream even when configured from one seed.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut state = splitmix64(base ^ 0x6d61736b6f7074); // "maskopt"
    for &b in tag.as_bytes() {
        state = splitmix64(state ^ u64::from(b));
    }
    state
}

/// Per-repetition variant of [`derive_seed`].
pub fn derive_seed_indexed(base: u64, tag: &str, index: u64) -> u64 {
    splitmix64(derive_seed(base, tag) ^ splitmix64(index))
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
