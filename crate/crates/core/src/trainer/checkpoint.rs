//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "A2PO" | u32 version | u64 len, config text | u64 step
//!        | u64 root_seed, [u8; 32] key, u64 stream, u128 word_pos
//!        | u32 count, then per network:
//!            u64 len, name | u64 n | n f64 values | n f64 adam_m | n f64 adam_v | u64 adam step
//! ```

use std::fs;
use std::path::Path;

use super::{TrainConfig, TrainState};
use crate::approximator::ParamSet;
use crate::rng::{RngState, StreamRng};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"A2PO";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_bytes(&mut out, state.config.to_text().as_bytes());
    put_u64(&mut out, state.step);
    let rng = state.rng.state();
    put_u64(&mut out, rng.root_seed);
    out.extend_from_slice(&rng.key);
    put_u64(&mut out, rng.stream);
    out.extend_from_slice(&rng.word_pos.to_le_bytes());
    let nets = state.networks();
    out.extend_from_slice(&(nets.len() as u32).to_le_bytes());
    for (name, net) in nets {
        put_bytes(&mut out, name.as_bytes());
        let p = &net.params;
        put_u64(&mut out, p.len() as u64);
        put_f64s(&mut out, &p.values);
        put_f64s(&mut out, &p.adam_m);
        put_f64s(&mut out, &p.adam_v);
        put_u64(&mut out, p.step_count);
    }
    out
}

pub fn write_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(state)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(format!("truncated at byte {} (needed {n} more)", self.pos)),
        }
    }

    fn array<const N: usize>(&mut self) -> std::result::Result<[u8; N], String> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn len(&mut self) -> std::result::Result<usize, String> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| format!("implausible length {n} at byte {}", self.pos - 8))
    }

    fn bytes(&mut self) -> std::result::Result<&'a [u8], String> {
        let n = self.len()?;
        self.take(n)
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let raw = self.take(n.checked_mul(8).ok_or("length overflow")?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<TrainState, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| "file too short for the magic bytes".to_string())? != CHECKPOINT_MAGIC {
        return Err("bad magic bytes, not an A2PO checkpoint".into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("format version {version}, expected {CHECKPOINT_VERSION}"));
    }
    let text = std::str::from_utf8(r.bytes()?).map_err(|_| "config text is not UTF-8".to_string())?;
    let config = TrainConfig::parse(text).map_err(|e| e.to_string())?;
    let step = r.u64()?;
    let root_seed = r.u64()?;
    let key = r.array::<32>()?;
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.array()?);

    let mut state = TrainState::new(config).map_err(|e| e.to_string())?;
    state.step = step;
    state.rng = StreamRng::from_state(&RngState {
        root_seed,
        key,
        stream,
        word_pos,
    });
    let count = r.u32()? as usize;
    let mut nets = state.networks_mut();
    if count != nets.len() {
        return Err(format!("{count} networks stored, variant needs {}", nets.len()));
    }
    for (want, net) in nets.iter_mut() {
        let name = r.bytes()?;
        if name != want.as_bytes() {
            return Err(format!("expected network {want}, found {}", String::from_utf8_lossy(name)));
        }
        let n = r.len()?;
        let values = r.f64s(n)?;
        let m = r.f64s(n)?;
        let v = r.f64s(n)?;
        let steps = r.u64()?;
        net.params = ParamSet::from_parts(&net.spec, values, m, v, steps).map_err(|e| format!("{want}: {e}"))?;
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(state)
}

pub fn read_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|message| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    })
}
