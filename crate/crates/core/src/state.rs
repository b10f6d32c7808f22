//! Trainable state and its checkpoint container.
//!
//! A checkpoint is laid out as
//!
//! ```text
//! b"DCDGCKPT" | version: u32 LE | header_len: u64 LE | header (JSON) | payload
//! ```
//!
//! The JSON header carries the architecture, epoch, seed, optimizer step
//! counters and a tensor table (`name`, `shape`, `offset`, `len`). Offsets
//! index the payload in units of `f32`; values are little-endian IEEE-754.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{ArchConfig, Model, Net};
use crate::nn::{Param, ParamSet};
use crate::optim::AdamState;

const MAGIC: &[u8; 8] = b"DCDGCKPT";
const VERSION: u32 = 1;

/// The four parameter collections plus per-collection optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub model: Model<f32>,
    /// Optimizer state indexed like [`Net::ALL`].
    pub optim: [AdamState; 4],
    pub seed: u64,
    pub epoch: usize,
}

/// Deterministically initializes all four networks.
pub fn init_model(arch: &ArchConfig, seed: u64) -> Result<ModelState> {
    let model = Model::init(arch, seed)?;
    let optim = Net::ALL.map(|n| AdamState::new(model.params(n)));
    Ok(ModelState {
        model,
        optim,
        seed,
        epoch: 0,
    })
}

impl ModelState {
    pub fn optim_mut(&mut self, net: Net) -> (&mut ParamSet<f32>, &mut AdamState) {
        let idx = Net::ALL.iter().position(|&n| n == net).expect("known net");
        (self.model.params_mut(net), &mut self.optim[idx])
    }

    /// Bitwise equality of parameters, optimizer buffers and metadata.
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.to_bytes() == other.to_bytes()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut payload: Vec<f32> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &[f32]| {
            tensors.push(TensorEntry {
                name,
                shape,
                offset: payload.len(),
                len: data.len(),
            });
            payload.extend_from_slice(data);
        };
        for net in Net::ALL {
            for p in self.model.params(net).iter() {
                push(p.name.clone(), p.shape.clone(), &p.data);
            }
        }
        for (net, opt) in Net::ALL.iter().zip(&self.optim) {
            let params = self.model.params(*net);
            for ((p, m), v) in params.iter().zip(&opt.m).zip(&opt.v) {
                push(format!("adam.m.{}", p.name), p.shape.clone(), m);
                push(format!("adam.v.{}", p.name), p.shape.clone(), v);
            }
        }
        let header = Header {
            arch: self.model.arch.clone(),
            epoch: self.epoch,
            seed: self.seed,
            optimizer_steps: self.optim.iter().map(|o| o.step).collect(),
            tensors,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + 4 * payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Data(format!("malformed checkpoint: {msg}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| bad(&e.to_string()))?;
        let raw = &body[hlen..];
        if raw.len() % 4 != 0 {
            return Err(bad("payload is not a whole number of f32 values"));
        }
        let payload: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mut table = std::collections::HashMap::new();
        for t in &header.tensors {
            let end = t.offset.checked_add(t.len).filter(|&e| e <= payload.len());
            let Some(end) = end else {
                return Err(bad(&format!("tensor `{}` out of bounds", t.name)));
            };
            if t.shape.iter().product::<usize>() != t.len {
                return Err(bad(&format!("tensor `{}` shape/length mismatch", t.name)));
            }
            table.insert(t.name.as_str(), (t, &payload[t.offset..end]));
        }

        let reference = Model::init(&header.arch, 0)?;
        let mut sets = Vec::new();
        let mut optim = Vec::new();
        for (i, net) in Net::ALL.iter().enumerate() {
            let mut params = Vec::new();
            let mut m = Vec::new();
            let mut v = Vec::new();
            for p in reference.params(*net).iter() {
                let fetch = |name: &str| {
                    table
                        .get(name)
                        .map(|(t, data)| (t.shape.clone(), data.to_vec()))
                        .ok_or_else(|| bad(&format!("missing tensor `{name}`")))
                };
                let (shape, data) = fetch(&p.name)?;
                params.push(Param {
                    name: p.name.clone(),
                    shape,
                    data,
                });
                m.push(fetch(&format!("adam.m.{}", p.name))?.1);
                v.push(fetch(&format!("adam.v.{}", p.name))?.1);
            }
            sets.push(ParamSet::new(params));
            let step = *header
                .optimizer_steps
                .get(i)
                .ok_or_else(|| bad("missing optimizer step counter"))?;
            optim.push(AdamState { step, m, v });
        }
        let sets: [ParamSet<f32>; 4] = sets.try_into().expect("four nets");
        let model = Model::from_params(&header.arch, sets)?;
        Ok(Self {
            model,
            optim: optim.try_into().expect("four nets"),
            seed: header.seed,
            epoch: header.epoch,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    epoch: usize,
    seed: u64,
    optimizer_steps: Vec<u64>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ArchConfig {
        ArchConfig {
            channels: vec![2, 4],
            ..Default::default()
        }
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let mut st = init_model(&small(), 3).unwrap();
        st.epoch = 7;
        st.optim[2].step = 11;
        st.optim[2].m[0][0] = -0.125;
        st.model.d.get_mut(0).data[1] = f32::from_bits(0x3f80_0001);
        let back = ModelState::from_bytes(&st.to_bytes()).unwrap();
        assert_eq!(back, st);
        assert_eq!(back.to_bytes(), st.to_bytes());
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let bytes = init_model(&small(), 3).unwrap().to_bytes();
        assert!(ModelState::from_bytes(&bytes[..bytes.len() - 2]).is_err());
        assert!(ModelState::from_bytes(b"not a checkpoint at all").is_err());
    }

    #[test]
    fn header_is_json() {
        let bytes = init_model(&small(), 9).unwrap().to_bytes();
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let v: serde_json::Value = serde_json::from_slice(&bytes[20..20 + hlen]).unwrap();
        assert_eq!(v["seed"], 9);
        assert_eq!(v["arch"]["channels"], serde_json::json!([2, 4]));
    }
}
