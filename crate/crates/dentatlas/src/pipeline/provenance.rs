//! Provenance record written next to every command's outputs: config hash,
//! seeds and versions, enough to reproduce the run bit-for-bit.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::config::PipelineConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub inputs: Vec<String>,
}

impl Provenance {
    pub fn new(
        command: &str,
        config: &PipelineConfig,
        seeds: &[u64],
        inputs: &[String],
    ) -> Result<Provenance> {
        let canonical = config.to_canonical_json()?;
        let digest = Sha256::digest(canonical.as_bytes());
        Ok(Provenance {
            tool: "dentatlas".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_sha256: hex_string(&digest),
            seeds: seeds.to_vec(),
            inputs: inputs.to_vec(),
        })
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join("provenance.json");
        std::fs::write(
            &path,
            serde_json::to_string_pretty(self)
                .map_err(|e| Error::Config(format!("provenance serialization: {e}")))?,
        )
        .map_err(|e| Error::io(path.display().to_string(), e))
    }
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let cfg = PipelineConfig::default();
        let a = Provenance::new("eval", &cfg, &[1, 2], &[]).unwrap();
        let b = Provenance::new("eval", &cfg, &[1, 2], &[]).unwrap();
        assert_eq!(a.config_sha256, b.config_sha256);
        assert_eq!(a.config_sha256.len(), 64);

        let mut changed = cfg.clone();
        changed.working_spacing_mm = 1.0;
        let c = Provenance::new("eval", &changed, &[1, 2], &[]).unwrap();
        assert_ne!(a.config_sha256, c.config_sha256);
    }
}
