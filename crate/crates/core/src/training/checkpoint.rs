//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "D3DC" | u32 version = 1 | u32 entry count
//! per entry: u32 name length | UTF-8 name | u8 rank | rank x u32 dims | f32 data
//! trailer:   u64 iteration | u64 rng seed | u32 config length | UTF-8 key=value config
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kv::KvConfig;
use crate::network::{Network, NetworkConfig};
use crate::tensorcore::Tensor;

pub const MAGIC: &[u8; 4] = b"D3DC";
pub const VERSION: u32 = 1;
pub const VELOCITY_PREFIX: &str = "velocity/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
    pub iteration: u64,
    /// Training RNG state. All randomness is derived from this seed and the
    /// iteration counter, so the seed is the complete state.
    pub seed: u64,
    /// Network configuration as `key = value` text.
    pub config: String,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        r.pos = 4;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch(version));
        }
        let count = r.u32()?;
        let mut entries = Vec::with_capacity(count.min(4096) as usize);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Config("checkpoint entry name is not UTF-8".into()))?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or(Error::Truncated)?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            entries.push((name, Tensor::new(&shape, data)?));
        }
        let iteration = r.u64()?;
        let seed = r.u64()?;
        let len = r.u32()? as usize;
        let config = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Config("checkpoint config is not UTF-8".into()))?;
        if r.pos != bytes.len() {
            return Err(Error::Config("trailing bytes after checkpoint trailer".into()));
        }
        Ok(Checkpoint { entries, iteration, seed, config })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn network_config(&self) -> Result<NetworkConfig> {
        let kv = KvConfig::parse(&self.config)?;
        NetworkConfig::from_kv(&kv, &NetworkConfig::paper_preset())
    }

    /// Rebuilds the network and restores its parameters and running
    /// statistics. Unknown entries (other than optimizer state) are errors.
    pub fn to_network(&self) -> Result<Network> {
        let mut net = Network::build(&self.network_config()?)?;
        let mut seen = vec![false; net.param_names().len()];
        let mut unknown = Vec::new();
        for (name, t) in &self.entries {
            if name.starts_with(VELOCITY_PREFIX) {
                continue;
            }
            if let Some(i) = net.param_names().iter().position(|n| n == name) {
                if net.params()[i].shape() != t.shape() {
                    return Err(Error::shape(
                        "checkpoint",
                        format!("{name}: stored {:?}, network expects {:?}", t.shape(), net.params()[i].shape()),
                    ));
                }
                net.params_mut()[i] = t.clone();
                seen[i] = true;
            } else if !net.set_bn_tensor(name, t) {
                unknown.push(name.clone());
            }
        }
        if !unknown.is_empty() {
            return Err(Error::UnknownParameters(unknown));
        }
        let missing: Vec<String> =
            net.param_names().iter().zip(&seen).filter(|(_, s)| !**s).map(|(n, _)| n.clone()).collect();
        if !missing.is_empty() {
            return Err(Error::MissingParameters(missing));
        }
        Ok(net)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(Error::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}
