//! Seed derivation and subset fingerprints.
//!
//! Seeds are the first eight bytes (little-endian) of
//! `SHA-256("stilt-seed/v1" ‖ master_seed ‖ domain ‖ labels…)`, each string
//! field length-prefixed. The layout is frozen: changing it changes every
//! derived seed.

use sha2::{Digest, Sha256};

use crate::training::ProtocolKind;

fn put_str(h: &mut Sha256, s: &str) {
    h.update((s.len() as u64).to_le_bytes());
    h.update(s.as_bytes());
}

pub fn derive_seed(master_seed: u64, domain: &str, labels: &[&str]) -> u64 {
    let mut h = Sha256::new();
    put_str(&mut h, "stilt-seed/v1");
    h.update(master_seed.to_le_bytes());
    put_str(&mut h, domain);
    h.update((labels.len() as u64).to_le_bytes());
    for l in labels {
        put_str(&mut h, l);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Seed for the meme subset of `(fraction, run_id)`. No approach label, so
/// every approach trains on the same subset.
pub fn subset_seed(master_seed: u64, fraction_key: u32, run_id: usize) -> u64 {
    derive_seed(
        master_seed,
        "subset",
        &[&fraction_key.to_string(), &run_id.to_string()],
    )
}

/// Seed for one training run.
pub fn run_seed(master_seed: u64, approach: ProtocolKind, fraction_key: u32, run_id: usize) -> u64 {
    derive_seed(
        master_seed,
        "run",
        &[approach.as_str(), &fraction_key.to_string(), &run_id.to_string()],
    )
}

/// Hex SHA-256 prefix over the sorted record ids.
pub fn subset_fingerprint<'a>(ids: impl IntoIterator<Item = &'a str>) -> String {
    let mut ids: Vec<&str> = ids.into_iter().collect();
    ids.sort_unstable();
    let mut h = Sha256::new();
    for id in ids {
        put_str(&mut h, id);
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}
