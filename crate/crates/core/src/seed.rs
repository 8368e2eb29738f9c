//! Root-seed splitting.
//!
//! Every stream is derived as the first eight bytes of
//! `SHA-256(root_seed_le || component_name)`, so a stage can be re-run in
//! isolation and still draw exactly the numbers it drew inside the pipeline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn derive_seed(root: u64, component: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(component.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

pub fn stream(root: u64, component: &str) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, component))
}
