//! Configuration fingerprints.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Result;

/// Hex SHA-256 of the compact JSON serialization of `config`.
pub fn config_hash<T: Serialize + ?Sized>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
