//! Binary checkpoints: `RSDG`, u32 version, a shape table, little-endian f64
//! parameters and optional Adam state. The architecture goes next to it as
//! JSON.

use std::fs;
use std::path::{Path, PathBuf};

use super::adam::AdamState;
use super::network::Network;
use super::spec::NetworkSpec;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RSDG";
pub const VERSION: u32 = 1;

pub fn descriptor_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn encode(net: &Network, adam: Option<&AdamState>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let blocks = net.weight_blocks();
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in blocks {
        out.extend_from_slice(&(b.out as u64).to_le_bytes());
        out.extend_from_slice(&(b.fan_in as u64).to_le_bytes());
        out.push(b.weight_norm as u8);
    }
    out.extend_from_slice(&(net.n_params() as u64).to_le_bytes());
    for p in net.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    match adam {
        None => out.push(0),
        Some(s) => {
            out.push(1);
            out.extend_from_slice(&s.step.to_le_bytes());
            for v in s.m.iter().chain(&s.v) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n)
            .map(|_| Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"))))
            .collect()
    }
}

/// Decodes a blob against an architecture, checking the shape table.
pub fn decode(spec: NetworkSpec, bytes: &[u8]) -> Result<(Network, Option<AdamState>)> {
    let mut net = Network::uninitialised(spec)?;
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n_blocks = r.u32()? as usize;
    if n_blocks != net.weight_blocks().len() {
        return Err(Error::Checkpoint(format!(
            "{n_blocks} weight blocks, architecture has {}",
            net.weight_blocks().len()
        )));
    }
    for b in net.weight_blocks().to_vec() {
        let out = r.u64()? as usize;
        let fan_in = r.u64()? as usize;
        let wn = r.take(1)?[0] != 0;
        if (out, fan_in, wn) != (b.out, b.fan_in, b.weight_norm) {
            return Err(Error::Checkpoint(format!(
                "block {}x{} (wn {wn}) does not match {}x{} (wn {})",
                out, fan_in, b.out, b.fan_in, b.weight_norm
            )));
        }
    }
    let n = r.u64()? as usize;
    if n != net.n_params() {
        return Err(Error::Checkpoint(format!("{n} parameters, expected {}", net.n_params())));
    }
    let params = r.f64s(n)?;
    net.set_params(&params)?;
    let adam = match r.take(1)?[0] {
        0 => None,
        1 => {
            let step = r.u64()?;
            let m = r.f64s(n)?;
            let v = r.f64s(n)?;
            Some(AdamState { step, m, v })
        }
        t => return Err(Error::Checkpoint(format!("bad optimizer tag {t}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((net, adam))
}

pub fn save(path: &Path, net: &Network, adam: Option<&AdamState>) -> Result<()> {
    fs::write(path, encode(net, adam))?;
    fs::write(descriptor_path(path), serde_json::to_string_pretty(net.spec())?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Network, Option<AdamState>)> {
    let spec: NetworkSpec = serde_json::from_slice(&fs::read(descriptor_path(path))?)?;
    decode(spec, &fs::read(path)?)
}
