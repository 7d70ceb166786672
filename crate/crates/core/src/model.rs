//! Trained models and their on-disk checkpoint format.
//!
//! A checkpoint is the 4-byte magic `PXQN`, a little-endian `u32` format
//! version, a `u32` header length, a JSON header (network shape, model kind,
//! training configuration), a `u64` parameter count and then the parameters
//! as little-endian `f64` in block order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::ObserverMode;
use crate::error::{Error, Result};
use crate::qnet::{NetShape, QNetwork};
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 4] = b"PXQN";
pub const FORMAT_VERSION: u32 = 1;

/// Tolerance when matching a requested σ_v against a per-σ_v model.
pub const SIGMA_MATCH_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelKind {
    Ideal,
    PerSigma { sigma_v: f64 },
    Conditioned,
}

impl ModelKind {
    pub fn observer(&self) -> ObserverMode {
        match self {
            ModelKind::Ideal => ObserverMode::Ideal,
            ModelKind::PerSigma { .. } => ObserverMode::Noisy,
            ModelKind::Conditioned => ObserverMode::Conditioned,
        }
    }

    pub fn label(&self) -> String {
        match self {
            ModelKind::Ideal => "ideal".into(),
            ModelKind::PerSigma { sigma_v } => format!("sigma-{sigma_v:.3}"),
            ModelKind::Conditioned => "conditioned".into(),
        }
    }

    /// Errors unless this model may act at noise level `sigma_v`.
    pub fn check_sigma(&self, sigma_v: f64) -> Result<()> {
        let ok = match self {
            ModelKind::Ideal => sigma_v == 0.0,
            ModelKind::PerSigma { sigma_v: s } => (s - sigma_v).abs() <= SIGMA_MATCH_TOL,
            ModelKind::Conditioned => (0.0..=1.0).contains(&sigma_v),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::IncompatibleModel { model: self.label(), sigma_v })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    kind: ModelKind,
    net: QNetwork,
    train_config: Option<TrainConfig>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    shape: NetShape,
    model: ModelKind,
    train_config: Option<TrainConfig>,
}

impl Model {
    pub fn new(kind: ModelKind, net: QNetwork, train_config: Option<TrainConfig>) -> Self {
        Model { kind, net, train_config }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn net(&self) -> &QNetwork {
        &self.net
    }

    pub fn train_config(&self) -> Option<&TrainConfig> {
        self.train_config.as_ref()
    }

    /// File name used for this model inside a run directory.
    pub fn file_name(&self) -> String {
        format!("{}.pxqn", self.kind.label())
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let header = serde_json::to_vec(&Header {
            shape: *self.net.shape(),
            model: self.kind,
            train_config: self.train_config.clone(),
        })?;
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(header.len() as u32).to_le_bytes())?;
        out.write_all(&header)?;
        out.write_all(&(self.net.shape().param_count() as u64).to_le_bytes())?;
        self.net.write_params(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a model checkpoint (bad magic)".into()));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        input.read_exact(&mut word)?;
        let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
        input.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        let mut count = [0u8; 8];
        input.read_exact(&mut count)?;
        let count = u64::from_le_bytes(count);
        if count != header.shape.param_count() as u64 {
            return Err(Error::Checkpoint(format!(
                "parameter count {count} does not match shape ({})",
                header.shape.param_count()
            )));
        }
        if header.shape.input_dim != header.model.observer().obs_dim() {
            return Err(Error::Checkpoint("network input size does not match model kind".into()));
        }
        let net = QNetwork::read_params(header.shape, &mut input)?;
        let mut rest = [0u8; 1];
        if input.read(&mut rest)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after parameters".into()));
        }
        Ok(Model { kind: header.model, net, train_config: header.train_config })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn model(kind: ModelKind) -> Model {
        let shape = NetShape::new(kind.observer().obs_dim()).with_hidden(8, 4);
        Model::new(kind, QNetwork::new(shape, &mut seeded(1)), Some(TrainConfig::default()))
    }

    #[test]
    fn round_trip_is_bit_identical() {
        for kind in [ModelKind::Ideal, ModelKind::PerSigma { sigma_v: 0.1 }, ModelKind::Conditioned] {
            let m = model(kind);
            let mut bytes = Vec::new();
            m.write_to(&mut bytes).unwrap();
            let back = Model::read_from(bytes.as_slice()).unwrap();
            assert_eq!(back, m);
            let a: Vec<u64> = m.net().params().flatten().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = back.net().params().flatten().iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = model(ModelKind::PerSigma { sigma_v: 0.05 });
        let path = dir.path().join(m.file_name());
        assert!(path.ends_with("sigma-0.050.pxqn"));
        m.save(&path).unwrap();
        assert_eq!(Model::load(&path).unwrap(), m);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let m = model(ModelKind::Ideal);
        let mut bytes = Vec::new();
        m.write_to(&mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Model::read_from(bad.as_slice()), Err(Error::Checkpoint(_))));
        let truncated = &bytes[..bytes.len() - 3];
        assert!(Model::read_from(truncated).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Model::read_from(extra.as_slice()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn sigma_compatibility() {
        assert!(ModelKind::Ideal.check_sigma(0.0).is_ok());
        assert!(ModelKind::Ideal.check_sigma(0.1).is_err());
        assert!(ModelKind::PerSigma { sigma_v: 0.1 }.check_sigma(0.1).is_ok());
        assert!(matches!(
            ModelKind::PerSigma { sigma_v: 0.1 }.check_sigma(0.2),
            Err(Error::IncompatibleModel { .. })
        ));
        assert!(ModelKind::Conditioned.check_sigma(0.37).is_ok());
        assert!(ModelKind::Conditioned.check_sigma(1.5).is_err());
    }
}
