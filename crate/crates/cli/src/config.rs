use std::path::Path;

use freqalign::detector::{BiasConfig, DefenseProtocol, DetectorTrainConfig};
use freqalign::{AlignConfig, RdcTrainConfig, SynthSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Everything a run depends on. Loaded from an optional JSON file, then
/// overridden by flags; missing sections take library defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthSpec,
    pub align: AlignConfig,
    pub rdc: RdcTrainConfig,
    pub detector: DetectorTrainConfig,
    pub defense: DefenseProtocol,
    pub experiment: BiasConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("config {}: {e}", path.display())))
    }

    /// The run seed drives every seeded component.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
        self.rdc.seed = seed;
        self.detector.seed = seed;
        self.experiment.seed = seed;
        self.experiment.detector.seed = seed;
    }

    pub fn hash(&self) -> CliResult<String> {
        Ok(hex(&Sha256::digest(serde_json::to_vec(self)?)))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"seed": 4, "align": {"k": 7}}"#).unwrap();
        let c = RunConfig::load(Some(&p)).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.align.k, 7);
        assert_eq!(c.align.r_t, AlignConfig::default().r_t);
        assert_eq!(c.rdc, RdcTrainConfig::default());
    }

    #[test]
    fn unknown_fields_and_missing_files_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"sed": 4}"#).unwrap();
        assert!(matches!(RunConfig::load(Some(&p)), Err(CliError::Data(_))));
        assert!(matches!(
            RunConfig::load(Some(&dir.path().join("none.json"))),
            Err(CliError::Data(_))
        ));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.set_seed(1);
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
    }
}
