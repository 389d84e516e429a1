//! `NDT1` binary tensor dumps.
//!
//! Layout: magic `NDT1`, one dtype byte (`0x01` = f32), one rank byte, `rank`
//! little-endian u64 dims, then the row-major little-endian f32 payload.

use std::fs;
use std::path::Path;

use super::NdTensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NDT1";
pub const DTYPE_F32: u8 = 0x01;

pub fn encode(t: &NdTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 8 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(DTYPE_F32);
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<NdTensor> {
    let bad = |m: &str| Error::Format(format!("NDT1: {m}"));
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(bad("missing magic"));
    }
    if bytes[4] != DTYPE_F32 {
        return Err(bad(&format!("unsupported dtype code {:#04x}", bytes[4])));
    }
    let rank = bytes[5] as usize;
    if rank == 0 {
        return Err(bad("rank must be at least 1"));
    }
    let header = 6 + 8 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let dims: Vec<usize> = bytes[6..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")) as usize)
        .collect();
    let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| bad("dims overflow"))?;
    if bytes.len() != header + 4 * n {
        return Err(bad(&format!("payload has {} bytes, dims {dims:?} need {}", bytes.len() - header, 4 * n)));
    }
    let data =
        bytes[header..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk"))).collect();
    NdTensor::new(dims, data)
}

pub fn save(t: &NdTensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<NdTensor> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = NdTensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"NDT1");
        assert_eq!(b[4], 0x01);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..14], &1u64.to_le_bytes());
        assert_eq!(&b[14..22], &2u64.to_le_bytes());
        assert_eq!(&b[22..26], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 30);
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(decode(b"NDT2\x01\x01").is_err());
        let mut b = encode(&NdTensor::scalar(1.0));
        b[4] = 0x02;
        assert!(decode(&b).is_err());
        let b = encode(&NdTensor::scalar(1.0));
        assert!(decode(&b[..b.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(dims in prop::collection::vec(1usize..4, 1..4), seed in any::<u64>()) {
            let mut rng = crate::tensor::SeedRng::new(seed);
            let t = NdTensor::randn(&dims, &mut rng).unwrap();
            prop_assert_eq!(decode(&encode(&t)).unwrap(), t);
        }
    }
}
