//! Network checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 8 bytes  magic "BTCKPT01"
//! u32      element width in bytes (4 = f32, 8 = f64)
//! u64      seed
//! u64      epoch
//! u64      length of the spec JSON, followed by the UTF-8 JSON itself
//! u64      number of parameter tensors
//! per tensor:
//!   u32    rank
//!   u64    extent, repeated rank times
//!   values little-endian, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Network, NetworkSpec, Real, Tensor};

const MAGIC: &[u8; 8] = b"BTCKPT01";

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Real> {
    pub seed: u64,
    pub epoch: u64,
    pub network: Network<T>,
}

pub fn encode_checkpoint<T: Real>(net: &Network<T>, seed: u64, epoch: u64) -> Result<Vec<u8>> {
    let spec = serde_json::to_vec(net.spec()).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(std::mem::size_of::<T>() as u32).to_le_bytes());
    out.extend_from_slice(&seed.to_le_bytes());
    out.extend_from_slice(&epoch.to_le_bytes());
    out.extend_from_slice(&(spec.len() as u64).to_le_bytes());
    out.extend_from_slice(&spec);
    out.extend_from_slice(&(net.params().len() as u64).to_le_bytes());
    for p in net.params() {
        out.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
        for &d in p.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&T::to_le_bytes_vec(p.data()));
    }
    Ok(out)
}

pub fn save_checkpoint<T: Real>(net: &Network<T>, seed: u64, epoch: u64, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(net, seed, epoch)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::parse(
                self.path,
                format!("truncated checkpoint at byte {}", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(Error::parse(path, "not a checkpoint (bad magic)"));
    }
    let width = r.u32()? as usize;
    if width != std::mem::size_of::<T>() {
        return Err(Error::parse(
            path,
            format!("checkpoint stores {width}-byte values, requested {}", T::DTYPE),
        ));
    }
    let seed = r.u64()?;
    let epoch = r.u64()?;
    let spec_len = r.u64()? as usize;
    let spec: NetworkSpec = serde_json::from_slice(r.take(spec_len)?)
        .map_err(|e| Error::parse(path, format!("spec: {e}")))?;
    let count = r.u64()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r.take(n * width)?.chunks(width).map(T::from_le_chunk).collect();
        params.push(Tensor::new(shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(Error::parse(path, "trailing bytes after parameters"));
    }
    Ok(Checkpoint {
        seed,
        epoch,
        network: Network::from_parts(spec, params)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build_network;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let spec = NetworkSpec::cornet_z_mini(7, [3, 16, 16]);
        let net = build_network::<f32>(&spec, 11).unwrap();
        save_checkpoint(&net, 11, 3, &path).unwrap();
        let ck = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!((ck.seed, ck.epoch), (11, 3));
        assert_eq!(ck.network.spec(), &spec);
        assert_eq!(ck.network.params(), net.params());
        assert!(load_checkpoint::<f64>(&path).is_err());
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }
}
