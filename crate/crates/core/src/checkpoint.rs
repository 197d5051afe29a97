//! Checkpoint container for a [`TrainState`].
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "RGANCKPT" | u32 version | u32 meta_len | meta (UTF-8 TOML)
//! u32 entry_count | entries...
//! entry: u16 name_len | name | u8 ndim | u32 dims[ndim] | f32 data[prod(dims)]
//! ```
//!
//! Entries hold generator (`g.*`) and critic (`d.*`) parameters followed by
//! Adam moments named `adam.{g,d}.{m,v}.<parameter>`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{critic_layout, generator_layout, ParamSet};
use crate::tensor::{Shape, Tensor};
use crate::trainer::{Adam, HistoryRow, Model, TrainConfig, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RGANCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const WHAT: &str = "checkpoint";
const MAX_ENTRIES: usize = 1 << 20;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    epoch: usize,
    step: usize,
    adam_g_t: u64,
    adam_d_t: u64,
    sampler: [u64; 2],
    config: TrainConfig,
    #[serde(default)]
    history: Vec<HistoryRow>,
}

fn put_entry(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(4);
    for d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let meta = Meta {
        epoch: state.epoch,
        step: state.step,
        adam_g_t: state.adam_g.t,
        adam_d_t: state.adam_d.t,
        sampler: state.sampler,
        config: state.config.clone(),
        history: state.history.clone(),
    };
    let text = toml::to_string(&meta).map_err(|e| Error::InvalidInput(format!("checkpoint metadata: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());

    let mut entries: Vec<(String, &Tensor<f32>)> = Vec::new();
    for (set, adam, tag) in [(&state.generator, &state.adam_g, "g"), (&state.critic, &state.adam_d, "d")] {
        for (name, t) in set.iter() {
            entries.push((name.to_string(), t));
        }
        for (moment, list) in [("m", &adam.m), ("v", &adam.v)] {
            for (name, t) in set.names().iter().zip(list) {
                entries.push((format!("adam.{tag}.{moment}.{name}"), t));
            }
        }
    }
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        put_entry(&mut out, &name, t);
    }
    Ok(out)
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
            .ok_or_else(|| Error::malformed(WHAT, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn take_params(
    named: &mut HashMap<String, Tensor<f32>>,
    layout: &[(String, Shape)],
    prefix: &str,
) -> Result<ParamSet<f32>> {
    let mut part = HashMap::with_capacity(layout.len());
    for (name, _) in layout {
        let key = format!("{prefix}{name}");
        let t = named
            .remove(&key)
            .ok_or_else(|| Error::shape(format!("entry {key}"), "missing"))?;
        part.insert(name.clone(), t);
    }
    ParamSet::from_named(layout, part)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::malformed(WHAT, "bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            what: WHAT,
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let meta_len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(meta_len)?).map_err(|e| Error::malformed(WHAT, e.to_string()))?;
    let meta: Meta = toml::from_str(text).map_err(|e| Error::malformed(WHAT, e.to_string()))?;
    meta.config.validate()?;

    let count = r.u32()? as usize;
    if count > MAX_ENTRIES {
        return Err(Error::malformed(WHAT, format!("{count} entries")));
    }
    let mut named = HashMap::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::malformed(WHAT, e.to_string()))?
            .to_string();
        let ndim = r.u8()?;
        if ndim != 4 {
            return Err(Error::malformed(WHAT, format!("entry {name} has {ndim} dimensions")));
        }
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.u32()? as usize;
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::malformed(WHAT, format!("entry {name} is too large")))?;
        let raw = r.take(n)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::malformed(WHAT, format!("entry {name} holds non-finite values")));
        }
        if named.insert(name.clone(), Tensor::new(shape, data)).is_some() {
            return Err(Error::malformed(WHAT, format!("duplicate entry {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::malformed(WHAT, "trailing bytes"));
    }

    let net = &meta.config.network;
    let g_layout = generator_layout(net);
    let d_layout = critic_layout(net);
    let generator = take_params(&mut named, &g_layout, "")?;
    let critic = take_params(&mut named, &d_layout, "")?;
    let moments = |named: &mut HashMap<String, Tensor<f32>>, layout: &[(String, Shape)], tag: &str, t: u64| -> Result<Adam> {
        let m = take_params(named, layout, &format!("adam.{tag}.m."))?;
        let v = take_params(named, layout, &format!("adam.{tag}.v."))?;
        Ok(Adam {
            t,
            m: m.tensors().to_vec(),
            v: v.tensors().to_vec(),
        })
    };
    let adam_g = moments(&mut named, &g_layout, "g", meta.adam_g_t)?;
    let adam_d = moments(&mut named, &d_layout, "d", meta.adam_d_t)?;
    if let Some(extra) = named.keys().next() {
        return Err(Error::shape("no further entries", format!("entry {extra}")));
    }
    Ok(TrainState {
        config: meta.config,
        epoch: meta.epoch,
        step: meta.step,
        generator,
        critic,
        adam_g,
        adam_d,
        sampler: meta.sampler,
        history: meta.history,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and checks it against the expected network.
pub fn load_checkpoint_for(path: &Path, network: &crate::network::NetworkConfig) -> Result<TrainState> {
    let state = load_checkpoint(path)?;
    state.check_network(network)?;
    Ok(state)
}

/// Generator-only view of a checkpoint file.
pub fn load_model(path: &Path) -> Result<Model> {
    Ok(load_checkpoint(path)?.model())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{MaskSpec, Pattern};
    use crate::network::NetworkConfig;

    fn state() -> TrainState {
        let cfg = TrainConfig {
            mask: MaskSpec::new(Pattern::Random, 0.2, 16, 16, 4),
            network: NetworkConfig {
                levels: 2,
                base_filters: 4,
                ..NetworkConfig::default()
            },
            ..TrainConfig::default()
        };
        let mut st = TrainState::new(cfg).unwrap();
        st.adam_g.t = 7;
        st.adam_g.m[0].data_mut()[0] = 0.125;
        st.sampler = [3, 9];
        st.history.push(HistoryRow {
            epoch: 1,
            step: 1,
            adv_g: 0.1,
            adv_d: -0.2,
            freq: 0.3,
            imag: 0.4,
            total: 4.4,
            lr: 1e-4,
        });
        st
    }

    #[test]
    fn roundtrip_is_exact() {
        let st = state();
        let back = decode_checkpoint(&encode_checkpoint(&st).unwrap()).unwrap();
        assert_eq!(back, st);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode_checkpoint(&state()).unwrap();
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::Malformed { .. })));
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(matches!(decode_checkpoint(&v), Err(Error::Version { found: 9, .. })));
        let mut v = bytes.clone();
        v.push(0);
        assert!(decode_checkpoint(&v).is_err());
        assert!(decode_checkpoint(b"RGANCK").is_err());
    }

    #[test]
    fn mismatched_network_is_a_shape_error() {
        let st = state();
        let other = NetworkConfig {
            base_filters: 6,
            ..st.config.network
        };
        assert!(matches!(st.check_network(&other), Err(Error::ShapeMismatch { .. })));
    }
}
