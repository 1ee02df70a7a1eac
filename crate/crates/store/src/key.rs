use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Address of one cached tensor bundle.
///
/// `variant` carries everything else that changes the extracted tensors
/// (noise sharing mode, preprocessing flags) so that distinct inputs never
/// share a key.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheKey {
    pub image_hash: String,
    pub backend_id: String,
    pub site: String,
    pub noise_seed: u64,
    pub resolution: u32,
    #[serde(default)]
    pub variant: String,
}

impl CacheKey {
    /// Site string used for image-token entries.
    pub const IP_TOKENS_SITE: &'static str = "ip_tokens";

    /// Canonical form: a JSON array of the fields in declaration order.
    /// JSON string escaping makes this injective.
    pub fn canonical(&self) -> String {
        serde_json::to_string(&(
            "v1",
            &self.image_hash,
            &self.backend_id,
            &self.site,
            self.noise_seed,
            self.resolution,
            &self.variant,
        ))
        .expect("key fields serialize")
    }

    /// Hex SHA-256 of the canonical form; the on-disk file stem.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}
