//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "NXCKPT\0\0"
//! version    u32
//! header     u64 length + canonical JSON (config, role, network, optimizer
//!            settings, step counters)
//! schedule   u64 count + f64 betas (count 0 for continuous-time models)
//! shapes     u32 count, then per tensor: u32 name length, name, u32 rank,
//!            u64 dims
//! data       f64 values of every tensor in table order
//! ```
//!
//! The table lists the network parameters followed by the Adam first and
//! second moments (`adam.m.<name>`, `adam.v.<name>`).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Tensor};
use crate::schedule::NoiseSchedule;
use crate::training::{TrainConfig, Trainer};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"NXCKPT\0\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ExperimentConfig,
    role: String,
    network: DenoiserConfig,
    train: TrainConfig,
    train_step: u64,
    adam: AdamConfig,
    adam_step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ExperimentConfig,
    /// Which model of the experiment this is, e.g. `baseline`.
    pub role: String,
    pub schedule: Option<NoiseSchedule>,
    pub trainer: Trainer,
}

impl Checkpoint {
    pub fn new(config: ExperimentConfig, role: &str, schedule: Option<NoiseSchedule>, trainer: Trainer) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            config,
            role: role.to_string(),
            schedule,
            trainer,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let t = &self.trainer;
        let header = Header {
            config: self.config.clone(),
            role: self.role.clone(),
            network: t.net.config().clone(),
            train: t.config.clone(),
            train_step: t.step_count(),
            adam: t.optimizer.config,
            adam_step: t.optimizer.step_count(),
        };
        let header = canonical(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());

        let betas = self.schedule.as_ref().map(|s| s.betas()).unwrap_or(&[]);
        out.extend_from_slice(&(betas.len() as u64).to_le_bytes());
        for b in betas {
            out.extend_from_slice(&b.to_le_bytes());
        }

        let names = t.net.param_names();
        let groups: [(&str, &[Tensor]); 3] = [
            ("", t.net.params()),
            ("adam.m.", t.optimizer.first_moments()),
            ("adam.v.", t.optimizer.second_moments()),
        ];
        let count: usize = groups.iter().map(|(_, g)| g.len()).sum();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (prefix, tensors) in &groups {
            for (name, tensor) in names.iter().zip(tensors.iter()) {
                let full = format!("{prefix}{name}");
                out.extend_from_slice(&(full.len() as u32).to_le_bytes());
                out.extend_from_slice(full.as_bytes());
                out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
                for &d in tensor.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
            }
        }
        for (_, tensors) in &groups {
            for tensor in tensors.iter() {
                for v in tensor.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let header_len = r.len64()?;
        let header: Header = serde_json::from_slice(r.take(header_len)?)?;

        let n_betas = r.len64()?;
        let betas = (0..n_betas).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let schedule = if betas.is_empty() {
            None
        } else {
            Some(NoiseSchedule::from_betas(betas)?)
        };

        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len64()).collect::<Result<Vec<_>>>()?;
            table.push((name, shape));
        }

        let expected = header.network.shape_table();
        let n = expected.len();
        if count != 3 * n {
            return Err(Error::Checkpoint(format!(
                "shape table has {count} entries, network needs {}",
                3 * n
            )));
        }
        for (i, (name, shape)) in table.iter().enumerate() {
            let (want_name, want_shape) = &expected[i % n];
            let prefix = ["", "adam.m.", "adam.v."][i / n];
            if *name != format!("{prefix}{want_name}") || shape != want_shape {
                return Err(Error::Checkpoint(format!(
                    "entry {i}: found {name} {shape:?}, expected {prefix}{want_name} {want_shape:?}"
                )));
            }
        }
        let mut tensors = Vec::with_capacity(count);
        for (_, shape) in &table {
            let numel: usize = shape.iter().product();
            let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push(Tensor::new(shape.clone(), data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let v = tensors.split_off(2 * n);
        let m = tensors.split_off(n);
        let net = Denoiser::from_params(header.network, tensors)?;
        let optimizer = Adam::from_parts(header.adam, header.adam_step, m, v)?;
        let trainer = Trainer::from_parts(net, optimizer, header.train, header.train_step)?;
        Ok(Checkpoint {
            format_version: version,
            config: header.config,
            role: header.role,
            schedule,
            trainer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn canonical<T: Serialize>(value: &T) -> Result<String> {
    // Struct fields serialize in declaration order, so this is stable.
    Ok(serde_json::to_string(value)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} too large")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
