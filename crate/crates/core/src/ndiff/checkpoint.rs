//! Weight file: `b"FGGM"`, version `u32`, header length `u32`, a JSON header,
//! then raw little-endian `f64` arrays in the order the header declares them:
//! every network's `W₁, b₁, W₂, b₂, …`, then the named vectors, then the
//! normaliser mean and M2.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mlp::{Layer, MlpParams, OutputActivation};
use super::tensor::Tensor;
use crate::env::NormalizerState;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FGGM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub networks: Vec<(String, MlpParams)>,
    pub vectors: Vec<(String, Vec<f64>)>,
    pub normalizer: Option<NormalizerState>,
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct NetworkHeader {
    name: String,
    dims: Vec<usize>,
    output: OutputActivation,
}

#[derive(Serialize, Deserialize)]
struct VectorHeader {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct NormalizerHeader {
    count: u64,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    networks: Vec<NetworkHeader>,
    vectors: Vec<VectorHeader>,
    normalizer: Option<NormalizerHeader>,
    meta: serde_json::Value,
}

impl WeightFile {
    pub fn network(&self, name: &str) -> Result<&MlpParams> {
        self.networks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::Format(format!("weight file has no network {name:?}")))
    }

    pub fn vector(&self, name: &str) -> Result<&[f64]> {
        self.vectors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::Format(format!("weight file has no vector {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            networks: self
                .networks
                .iter()
                .map(|(name, p)| NetworkHeader {
                    name: name.clone(),
                    dims: p.dims(),
                    output: p.output,
                })
                .collect(),
            vectors: self
                .vectors
                .iter()
                .map(|(name, v)| VectorHeader { name: name.clone(), len: v.len() })
                .collect(),
            normalizer: self.normalizer.as_ref().map(|n| NormalizerHeader { count: n.count, dim: n.dim() }),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        for (_, p) in &self.networks {
            for slice in p.params() {
                put(slice);
            }
        }
        for (_, v) in &self.vectors {
            put(v);
        }
        if let Some(n) = &self.normalizer {
            put(&n.mean);
            put(&n.m2);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing FGGM magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported weight file version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)
            .map_err(|e| Error::Format(format!("bad header: {e}")))?;
        let mut reader = F64Reader { bytes, pos: 12 + hlen };

        let mut networks = Vec::new();
        for nh in header.networks {
            if nh.dims.len() < 2 {
                return Err(Error::Format(format!("network {:?} has fewer than two dims", nh.name)));
            }
            let mut layers = Vec::new();
            for w in nh.dims.windows(2) {
                let weight = Tensor::from_vec(w[1], w[0], reader.take(w[0] * w[1])?);
                let bias = reader.take(w[1])?;
                layers.push(Layer { weight, bias });
            }
            networks.push((nh.name, MlpParams::new(layers, nh.output)?));
        }
        let mut vectors = Vec::new();
        for vh in header.vectors {
            vectors.push((vh.name, reader.take(vh.len)?));
        }
        let normalizer = match header.normalizer {
            Some(nh) => Some(NormalizerState {
                count: nh.count,
                mean: reader.take(nh.dim)?,
                m2: reader.take(nh.dim)?,
            }),
            None => None,
        };
        if reader.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - reader.pos)));
        }
        Ok(Self {
            networks,
            vectors,
            normalizer,
            meta: header.meta,
        })
    }
}

struct F64Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl F64Reader<'_> {
    fn take(&mut self, n: usize) -> Result<Vec<f64>> {
        let end = self.pos + 8 * n;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Format("truncated weight payload".into()))?;
        self.pos = end;
        Ok(chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn save_weights(file: &WeightFile, path: &Path) -> Result<()> {
    std::fs::write(path, file.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<WeightFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    WeightFile::from_bytes(&bytes)
}
