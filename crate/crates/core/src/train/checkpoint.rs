use std::path::Path;

use sha2::{Digest, Sha256};

use super::adam::Adam;
use super::config::TrainConfig;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::nets::FieldNetworks;

/// Trained networks with the optimizer state and the config that produced
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub nets: FieldNetworks,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub template_hash: String,
}

const KIND: &str = "checkpoint";

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container> {
        let meta = serde_json::json!({
            "config": self.config,
            "epoch": self.epoch,
            "adam_step": self.adam.step,
            "template_hash": self.template_hash,
        });
        let mut c = Container::new(KIND, meta);
        self.nets.write_arrays(&mut c, "nets.")?;
        c.push_f64("adam.m", vec![self.adam.m.len()], self.adam.m.clone())?;
        c.push_f64("adam.v", vec![self.adam.v.len()], self.adam.v.clone())?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != KIND {
            return Err(Error::Format(format!("expected {KIND}, got '{}'", c.kind)));
        }
        let config: TrainConfig = serde_json::from_value(c.meta["config"].clone())?;
        let epoch = c.meta["epoch"]
            .as_u64()
            .ok_or_else(|| Error::Format("checkpoint: missing epoch".into()))? as usize;
        let step = c.meta["adam_step"]
            .as_u64()
            .ok_or_else(|| Error::Format("checkpoint: missing adam_step".into()))?;
        let template_hash = c.meta["template_hash"].as_str().unwrap_or_default().to_string();
        let nets = FieldNetworks::read_arrays(config.fields.clone(), c, "nets.")?;
        let m = c.f64s("adam.m")?.1.to_vec();
        let v = c.f64s("adam.v")?.1.to_vec();
        if m.len() != nets.num_params() || v.len() != nets.num_params() {
            return Err(Error::Format("checkpoint: optimizer moments do not match the networks".into()));
        }
        let adam = Adam {
            config: config.optimizer,
            m,
            v,
            step,
        };
        Ok(Self {
            config,
            nets,
            adam,
            epoch,
            template_hash,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container()?.to_bytes()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::invalid(format!("checkpoint not found: {}", path.display())));
        }
        Self::from_container(&Container::read(path)?)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let config = TrainConfig::compact();
        let nets = FieldNetworks::new(config.fields.clone(), 3).unwrap();
        let mut adam = Adam::new(config.optimizer, nets.num_params());
        adam.step = 7;
        adam.m[3] = 0.25;
        adam.v[5] = 1e-9;
        let ck = Checkpoint {
            config,
            nets,
            adam,
            epoch: 4,
            template_hash: "abc".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.bin");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.content_hash().unwrap(), ck.content_hash().unwrap());
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = Checkpoint::load(Path::new("/nonexistent/ck.bin")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/ck.bin"));
    }
}
