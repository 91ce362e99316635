//! Flat little-endian tensor serialization.
//!
//! Layout: `u32` tensor count, then per tensor a `u32` rank, `rank` × `u64`
//! dimensions and the row-major values as `f64`.

use alloc::format;
use alloc::vec::Vec;

use super::{Tensor, TensorError};

pub fn encode_tensors<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> Vec<u8> {
    let tensors: Vec<&Tensor> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], TensorError> {
        let end = self.pos + N;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| TensorError::Snapshot(format!("truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(chunk.try_into().expect("exact length"))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<Tensor>, TensorError> {
    let mut r = Reader { bytes, pos: 0 };
    let count = u32::from_le_bytes(r.take()?) as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let rank = u32::from_le_bytes(r.take()?) as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(r.take()?) as usize);
        }
        let n: usize = shape.iter().product();
        if n > (bytes.len() - r.pos) / 8 {
            return Err(TensorError::Snapshot(format!("shape {:?} exceeds remaining bytes", shape)));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(r.take()?));
        }
        out.push(Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(TensorError::Snapshot(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn layout_is_little_endian() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let bytes = encode_tensors([&t]);
        assert_eq!(&bytes[..4], &1u32.to_le_bytes());
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &1u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &2u64.to_le_bytes());
        assert_eq!(&bytes[24..32], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 40);
    }

    #[test]
    fn truncated_input_is_rejected() {
        let t = Tensor::from_vec(vec![1.0, 2.0]);
        let bytes = encode_tensors([&t]);
        assert!(decode_tensors(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn round_trips(dims in proptest::collection::vec(1usize..4, 0..3), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| (seed as f64) * 1e-9 + i as f64 * 0.5 - 3.0).collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = decode_tensors(&encode_tensors([&t, &t])).unwrap();
            prop_assert_eq!(back, vec![t.clone(), t]);
        }
    }
}
