use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::geometry::RegistrationMetrics;

/// One benchmark result. Wall time is kept out of [`to_line`](Self::to_line)
/// so that records of repeated runs compare byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchmarkRecord {
    pub pair_id: usize,
    pub metrics: RegistrationMetrics,
    pub iterations: usize,
    pub config_hash: String,
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl BenchmarkRecord {
    pub const HEADER: &'static str = "pair_id\tmae_rot\tmae_trans\tmie_rot\tmie_trans\titerations\tconfig_hash";

    pub fn to_line(&self) -> String {
        let m = &self.metrics;
        format!(
            "{}\t{:e}\t{:e}\t{:e}\t{:e}\t{}\t{}",
            self.pair_id, m.mae_rot, m.mae_trans, m.mie_rot, m.mie_trans, self.iterations, self.config_hash
        )
    }
}

/// First 16 hex digits of the SHA-256 of `canonical`.
pub fn config_hash(canonical: &str) -> String {
    let digest = Sha256::digest(canonical.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive() {
        assert_eq!(config_hash("k = 8\n"), config_hash("k = 8\n"));
        assert_ne!(config_hash("k = 8\n"), config_hash("k = 9\n"));
        assert_eq!(config_hash("").len(), 16);
        // SHA-256 of the empty string.
        assert_eq!(config_hash(""), "e3b0c44298fc1c14");
    }

    #[test]
    fn line_omits_wall_time() {
        let r = BenchmarkRecord {
            pair_id: 3,
            metrics: RegistrationMetrics::default(),
            iterations: 3,
            config_hash: "ab".into(),
            wall_time_s: 1.5,
        };
        let line = r.to_line();
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), BenchmarkRecord::HEADER.split('\t').count());
        assert!(!r.to_line().contains("1.5"));
    }
}
