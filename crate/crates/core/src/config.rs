//! TOML run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::losses::LossConfig;
use crate::networks::{Net1Config, Net2Config};
use crate::phantom::{generate_dataset, read_manifest, PhantomConfig};
use crate::sampler::SamplerConfig;
use crate::trainer::TrainSchedule;
use crate::volumes::{load_volume, IntensityVolume, LabelVolume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Image/label manifest to train on; phantoms are generated when unset.
    pub manifest: Option<PathBuf>,
    /// Number of phantoms to generate.
    pub train_count: usize,
    /// Phantom `i` uses seed `seed_base + i`.
    pub seed_base: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { manifest: None, train_count: 8, seed_base: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub phantom: PhantomConfig,
    pub data: DataConfig,
    pub sampler: SamplerConfig,
    pub loss: LossConfig,
    pub net1: Net1Config,
    pub net2: Net2Config,
    pub schedule: TrainSchedule,
    pub inference: InferenceConfig,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.sampler.validate()?;
        self.loss.validate()?;
        self.net1.validate()?;
        self.net2.validate()?;
        self.schedule.validate()?;
        self.inference.validate()?;
        if self.net1.num_classes != self.net2.num_classes {
            return Err(Error::InvalidConfig("net1 and net2 must agree on num_classes".into()));
        }
        if self.data.manifest.is_none() {
            if self.phantom.num_classes() != self.net1.num_classes {
                return Err(Error::InvalidConfig(format!(
                    "phantoms have {} classes but the networks output {}",
                    self.phantom.num_classes(),
                    self.net1.num_classes
                )));
            }
            if self.data.train_count == 0 {
                return Err(Error::InvalidConfig("data.train_count must be positive".into()));
            }
        }
        Ok(())
    }

    /// Points every random stream at `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.phantom.seed = seed;
        self.data.seed_base = seed;
        self.sampler.rng_seed = seed;
        self.schedule.seed = seed;
        self
    }

    /// Training image/label pairs from the manifest, or freshly generated
    /// phantoms.
    pub fn training_pairs(&self) -> Result<Vec<(IntensityVolume, LabelVolume)>> {
        let Some(manifest) = &self.data.manifest else {
            return generate_dataset(&self.phantom, self.data.train_count, self.data.seed_base);
        };
        let base = manifest.parent().unwrap_or(Path::new("."));
        let resolve = |p: PathBuf| if p.is_absolute() || p.exists() { p } else { base.join(p) };
        read_manifest(manifest)?
            .into_iter()
            .map(|(image, label)| {
                let iv = load_volume(resolve(image))?.into_intensity();
                let lv = load_volume(resolve(label))?.into_labels()?;
                let lv = LabelVolume::new(lv.grid().clone(), self.net1.num_classes, lv.into_labels())?;
                Ok((iv, lv))
            })
            .collect()
    }
}
