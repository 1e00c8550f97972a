use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ModelKind, TrainConfig};
use super::Model;
use crate::act_st::ActStModel;
use crate::datagen::DataKind;
use crate::error::{Error, Result};
use crate::filtering::FilterModel;
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DACCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Mixed into the seed for parameter initialisation.
const INIT_SALT: u64 = 0x1a17_5eed_0000_0001;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: TrainConfig,
    steps_completed: usize,
    tensors: Vec<TensorEntry>,
}

/// A model with its parameters and the configuration that produced it.
///
/// On disk: the 8-byte magic, a little-endian `u32` format version, a
/// little-endian `u32` header length, a JSON header (version, config echo,
/// tensor manifest) and the parameters as little-endian `f32` in manifest order.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub steps_completed: usize,
    pub model: Model,
    pub store: ParamStore<f32>,
}

impl Checkpoint {
    /// A freshly initialised model for `config`.
    pub fn init(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ INIT_SALT);
        let mut store = ParamStore::new();
        let model = match config.model {
            ModelKind::Mlf | ModelKind::Af => Model::Filter(FilterModel::new(config.filter_config(), &mut store, &mut rng)?),
            ModelKind::ActSt => Model::ActSt(ActStModel::new(config.act_config(), &mut store, &mut rng)?),
        };
        Ok(Self { config, steps_completed: 0, model, store })
    }

    pub fn manifest(&self) -> Vec<TensorEntry> {
        self.store.iter().map(|(name, t)| TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), dtype: "f32".into() }).collect()
    }

    /// Fails with a configuration error unless the checkpoint was trained on `kind` data.
    pub fn ensure_data_kind(&self, kind: DataKind) -> Result<()> {
        if self.config.kind != kind {
            return Err(Error::Config(format!(
                "checkpoint was trained on {} data but {} data was requested",
                self.config.kind.as_str(),
                kind.as_str()
            )));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            steps_completed: self.steps_completed,
            tensors: self.manifest(),
        };
        let header = serde_json::to_vec(&header)?;
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let len = u32::try_from(header.len()).map_err(|_| Error::Format("checkpoint header too large".into()))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(&header)?;
        for (_, t) in self.store.iter() {
            for v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(|_| Error::Format("file too short for a checkpoint".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(input)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = read_u32(input)? as usize;
        let mut header = vec![0u8; len];
        input.read_exact(&mut header).map_err(|_| Error::Format("truncated checkpoint header".into()))?;
        let header: Header = serde_json::from_slice(&header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if header.format_version != version {
            return Err(Error::Format("checkpoint header version disagrees with preamble".into()));
        }

        let mut ckpt = Self::init(header.config)?;
        ckpt.steps_completed = header.steps_completed;
        let expected = ckpt.manifest();
        if header.tensors != expected {
            return Err(Error::Format("tensor manifest does not match the architecture in the header".into()));
        }
        for entry in &header.tensors {
            let count: usize = entry.shape.iter().product();
            let mut bytes = vec![0u8; count * 4];
            input.read_exact(&mut bytes).map_err(|_| Error::Format(format!("truncated payload in tensor {}", entry.name)))?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            ckpt.store.assign(&entry.name, Tensor::new(entry.shape.clone(), data)?)?;
        }
        let mut rest = [0u8; 1];
        if input.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint payload".into()));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b).map_err(|_| Error::Format("truncated checkpoint preamble".into()))?;
    Ok(u32::from_le_bytes(b))
}
