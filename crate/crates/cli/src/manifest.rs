//! Dataset manifest written by `phantom` and consumed by `train`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestItem {
    pub seed: u64,
    pub domain: String,
    pub volume: String,
    pub mask: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub side: usize,
    pub items: Vec<ManifestItem>,
}
