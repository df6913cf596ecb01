//! Run manifests: everything needed to repeat a training run.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crmn::analysis::ModelKind;
use crmn::data::{self, CifarVariant, ImageDataset, NormalizeMode, Split};
use crmn::training::{ShiftRecord, TrainConfig};
use crmn::{Error, NetworkConfig, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSpec {
    /// Synthetic prototypes; the last `test_per_class` samples of each class
    /// are held out as the test split.
    Synth {
        classes: usize,
        per_class: usize,
        test_per_class: usize,
        extent: usize,
        seed: u64,
    },
    Cifar {
        variant: CifarVariant,
        train: Vec<PathBuf>,
        #[serde(default)]
        test: Option<PathBuf>,
    },
    Raw {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
    },
}

impl DataSpec {
    /// Training pool and optional test split, before normalization.
    pub fn load(&self) -> Result<(ImageDataset, Option<ImageDataset>)> {
        match self {
            DataSpec::Synth {
                classes,
                per_class,
                test_per_class,
                extent,
                seed,
            } => {
                let all = data::synth_images(*classes, per_class + test_per_class, *extent, *seed)?;
                let n_train = classes * per_class;
                let train: Vec<usize> = (0..n_train).collect();
                let test: Vec<usize> = (n_train..all.len()).collect();
                let test = if test.is_empty() { None } else { Some(all.subset(&test, Split::Test)?) };
                Ok((all.subset(&train, Split::Train)?, test))
            }
            DataSpec::Cifar { variant, train, test } => {
                let parts = train
                    .iter()
                    .map(|p| data::load_cifar_binary(p, *variant, Split::Train))
                    .collect::<Result<Vec<_>>>()?;
                let test = test
                    .as_ref()
                    .map(|p| data::load_cifar_binary(p, *variant, Split::Test))
                    .transpose()?;
                Ok((ImageDataset::concat(parts)?, test))
            }
            DataSpec::Raw { train, test } => {
                let test = test.as_ref().map(|p| data::load_raw(p, Split::Test)).transpose()?;
                Ok((data::load_raw(train, Split::Train)?, test))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum ScheduleSpec {
    /// Patience search on a 10% validation split.
    Search,
    /// Recorded shifts applied at their epochs, training on the full pool.
    Replay { shifts: Vec<ShiftRecord> },
    /// First ladder rate throughout, training on the full pool.
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub kind: ModelKind,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleSpec,
    pub data: DataSpec,
    pub normalize: Option<NormalizeMode>,
    pub model_seed: u64,
    pub split_seed: u64,
    /// Value of `CRMN_DETERMINISTIC` when the run was made. All arithmetic
    /// runs on one thread in a fixed order, so results are reproducible
    /// either way; the flag is recorded for provenance.
    pub deterministic: bool,
    /// Dataset checksums (`train`, `test`) before normalization. Checked
    /// when a manifest is replayed.
    #[serde(default)]
    pub checksums: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        if let Some(p) = &self.train.augment {
            p.validate(self.network.input_extent)?;
            if p.crop != self.network.input_extent {
                return Err(Error::Input(format!(
                    "augmentation crops to {} but the network expects {}",
                    p.crop, self.network.input_extent
                )));
            }
        }
        Ok(())
    }

    /// Compares against checksums recorded earlier; an empty record passes.
    pub fn check_checksums(&self, train: &ImageDataset, test: Option<&ImageDataset>) -> Result<()> {
        let actual = checksums(train, test);
        for (k, want) in &self.checksums {
            match actual.get(k) {
                Some(got) if got == want => {}
                got => {
                    return Err(Error::format(
                        0,
                        format!("{k} dataset checksum mismatch: manifest {want}, data {got:?}"),
                    ))
                }
            }
        }
        Ok(())
    }
}

pub fn checksums(train: &ImageDataset, test: Option<&ImageDataset>) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("train".to_string(), train.checksum());
    if let Some(t) = test {
        m.insert("test".to_string(), t.checksum());
    }
    m
}
