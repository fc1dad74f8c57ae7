//! OCLT tensor files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! b"OCLT" | version: u32 | rank: u32 | dims: u64 * rank | data: f64 * prod(dims)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"OCLT";
pub const VERSION: u32 = 1;
const MAX_RANK: u32 = 16;

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 8 * t.rank() + 8 * t.numel());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t).expect("writing to a Vec cannot fail");
    buf
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = bytes;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(TensorError::Format(format!("truncated while reading {what}")));
        }
        let (head, rest) = cur.split_at(n);
        cur = rest;
        Ok(head)
    };
    if take(4, "magic")? != MAGIC {
        return Err(TensorError::Format("bad magic, not an OCLT file".into()));
    }
    let version = u32::from_le_bytes(take(4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let rank = u32::from_le_bytes(take(4, "rank")?.try_into().unwrap());
    if rank > MAX_RANK {
        return Err(TensorError::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut numel: u64 = 1;
    for i in 0..rank {
        let d = u64::from_le_bytes(take(8, "dims")?.try_into().unwrap());
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| TensorError::Format(format!("dim {i} overflows the element count")))?;
        shape.push(d as usize);
    }
    let expected = numel
        .checked_mul(8)
        .ok_or_else(|| TensorError::Format("element count overflows".into()))?;
    let remaining = cur.len() as u64;
    if remaining != expected {
        return Err(TensorError::Format(format!(
            "dims {shape:?} need {expected} data bytes, file has {remaining}"
        )));
    }
    let data = cur
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| TensorError::Io(format!("{}: {e}", path.display())))
}

/// Loads a tensor file; errors carry the file path.
pub fn load(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| TensorError::Io(format!("{}: {e}", path.display())))?;
    decode(&bytes).map_err(|e| match e {
        TensorError::Format(msg) => TensorError::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(shape in prop::collection::vec(0usize..4, 0..4), seed in any::<u64>()) {
            let t = Tensor::from_fn(&shape, |i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2));
            let back = decode(&encode(&t)).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"OCLT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[12..20].try_into().unwrap()), 2);
        assert_eq!(b.len(), 12 + 16 + 16);
        assert_eq!(f64::from_le_bytes(b[36..44].try_into().unwrap()), -2.0);
    }

    #[test]
    fn rejects_corruption() {
        let mut b = encode(&Tensor::zeros(&[3, 2]));
        assert!(decode(&b[..b.len() - 1]).is_err());
        b[12] = 9; // first dim 3 -> 9
        let err = decode(&b).unwrap_err().to_string();
        assert!(err.contains("data bytes"), "{err}");
        let mut b = encode(&Tensor::zeros(&[1]));
        b[0] = b'X';
        assert!(decode(&b).unwrap_err().to_string().contains("magic"));
        let mut b = encode(&Tensor::zeros(&[1]));
        b[4] = 7;
        assert!(decode(&b).unwrap_err().to_string().contains("version"));
    }
}
