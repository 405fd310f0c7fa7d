//! Binary parameter stores and content checksums.
//!
//! Layout: the magic line `XDPS1\n`, a little-endian `u64` header length,
//! a JSON header, then every tensor as little-endian `f32` in header order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::network::{Network, NetworkArch};
use crate::error::{structural, Error, Result};

const MAGIC: &[u8] = b"XDPS1\n";

/// SHA-256 over every parameter and buffer (names, shapes and bits).
pub fn param_checksum(net: &Network) -> String {
    let mut h = Sha256::new();
    for (name, values, shape) in net.named_params() {
        h.update(name.as_bytes());
        for d in shape {
            h.update((d as u64).to_le_bytes());
        }
        for v in values {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    networks: Vec<NetworkArch>,
    entries: Vec<Entry>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

/// One or more networks with free-form string metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub networks: Vec<Network>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn single(net: Network) -> Self {
        Checkpoint {
            networks: vec![net],
            meta: BTreeMap::new(),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut entries = Vec::new();
        for net in &self.networks {
            for (name, _, shape) in net.named_params() {
                entries.push(Entry { name, shape });
            }
        }
        let header = Header {
            networks: self.networks.iter().map(Network::arch).collect(),
            entries,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for net in &self.networks {
            for (_, values, _) in net.named_params() {
                let mut buf = Vec::with_capacity(values.len() * 4);
                for v in values {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(structural!("not a parameter store"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        // parameters are overwritten below, so the init rng is irrelevant
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut networks = header.networks.iter().map(|a| Network::from_arch(a, &mut rng)).collect::<Result<Vec<_>>>()?;
        let mut entries = header.entries.iter();
        for net in &mut networks {
            for (name, slot) in net.named_params_mut() {
                let e = entries.next().ok_or_else(|| structural!("parameter store is missing {}", name))?;
                if e.name != name || e.shape.iter().product::<usize>() != slot.len() {
                    return Err(structural!("parameter store entry {} does not match {}", e.name, name));
                }
                let mut buf = vec![0u8; slot.len() * 4];
                r.read_exact(&mut buf)?;
                for (v, b) in slot.iter_mut().zip(buf.chunks_exact(4)) {
                    *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
                }
            }
        }
        if entries.next().is_some() {
            return Err(structural!("parameter store has extra entries"));
        }
        Ok(Checkpoint {
            networks,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush().map_err(Error::from)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    Checkpoint::single(net.clone()).save(path)
}

pub fn load_network(path: &Path) -> Result<Network> {
    let mut ck = Checkpoint::load(path)?;
    if ck.networks.len() != 1 {
        return Err(structural!("expected one network in {}, found {}", path.display(), ck.networks.len()));
    }
    Ok(ck.networks.remove(0))
}
