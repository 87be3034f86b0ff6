//! Binary encodings for tensors and checkpoint containers.
//!
//! All integers and floats are little-endian.
//!
//! Tensor record:
//! ```text
//! magic   b"RTGT"
//! version u32            (= 1)
//! rank    u32
//! dims    u64 * rank
//! values  f64 * prod(dims)
//! ```
//!
//! Checkpoint container:
//! ```text
//! magic    b"RTGNNCKP"
//! version  u32           (= 1)
//! digest   [u8; 32]      model configuration digest
//! meta_len u32, meta     UTF-8 metadata (free-form, JSON by convention)
//! count    u32
//! count * { name_len u32, name UTF-8, tensor record }
//! ```
//! Entries are written in ascending name order.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: [u8; 4] = *b"RTGT";
pub const TENSOR_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: [u8; 8] = *b"RTGNNCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn tensor_serialize(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * t.shape().len() + 8 * t.numel());
    write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

pub fn tensor_deserialize(bytes: &[u8]) -> Result<Tensor> {
    let mut r = bytes;
    let t = read_tensor(&mut r)?;
    if !r.is_empty() {
        return Err(TensorError::Malformed(format!("{} trailing bytes", r.len())));
    }
    Ok(t)
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(&TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TensorError::Truncated(what),
        _ => TensorError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &'static str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "tensor magic")?;
    if magic != TENSOR_MAGIC {
        return Err(TensorError::Magic);
    }
    let version = read_u32(r, "tensor version")?;
    if version != TENSOR_VERSION {
        return Err(TensorError::Version {
            found: version,
            expected: TENSOR_VERSION,
        });
    }
    let rank = read_u32(r, "tensor rank")? as usize;
    if rank > 16 {
        return Err(TensorError::Malformed(format!("rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r, "tensor dims")? as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= 1 << 32)
        .ok_or_else(|| TensorError::Malformed(format!("shape {shape:?} too large")))?;
    let mut raw = vec![0u8; numel * 8];
    read_exact(r, &mut raw, "tensor values")?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data)
}

/// Decoded checkpoint container.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub digest: [u8; 32],
    pub metadata: String,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn write_container<W: Write>(w: &mut W, c: &Container) -> Result<()> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&c.digest)?;
    w.write_all(&(c.metadata.len() as u32).to_le_bytes())?;
    w.write_all(c.metadata.as_bytes())?;
    w.write_all(&(c.tensors.len() as u32).to_le_bytes())?;
    for (name, t) in &c.tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, t)?;
    }
    Ok(())
}

fn read_string<R: Read>(r: &mut R, what: &'static str) -> Result<String> {
    let len = read_u32(r, what)? as usize;
    if len > 1 << 26 {
        return Err(TensorError::Malformed(format!("{what} length {len}")));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf, what)?;
    String::from_utf8(buf).map_err(|e| TensorError::Malformed(format!("{what}: {e}")))
}

pub fn read_container<R: Read>(r: &mut R) -> Result<Container> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic, "checkpoint magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(TensorError::Magic);
    }
    let version = read_u32(r, "checkpoint version")?;
    if version != CHECKPOINT_VERSION {
        return Err(TensorError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut digest = [0u8; 32];
    read_exact(r, &mut digest, "config digest")?;
    let metadata = read_string(r, "metadata")?;
    let count = read_u32(r, "tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name = read_string(r, "tensor name")?;
        let t = read_tensor(r)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(TensorError::Malformed(format!("duplicate tensor `{name}`")));
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(TensorError::Malformed("trailing bytes after tensor table".into()));
    }
    Ok(Container {
        digest,
        metadata,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scalar_round_trips() {
        let t = Tensor::scalar(-3.25);
        let back = tensor_deserialize(&tensor_serialize(&t)).unwrap();
        assert_eq!(back.shape(), &[] as &[usize]);
        assert_eq!(back, t);
    }

    #[test]
    fn primitive_image_sized_tensor_round_trips_bit_exactly() {
        let data: Vec<f64> = (0..21 * 21 * 6).map(|i| i as f64 * 0.1).collect();
        let t = Tensor::new(vec![21, 21, 6], data).unwrap();
        let back = tensor_deserialize(&tensor_serialize(&t)).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn flipped_magic_is_rejected() {
        let mut bytes = tensor_serialize(&Tensor::scalar(1.0));
        bytes[0] ^= 0xff;
        assert!(matches!(tensor_deserialize(&bytes), Err(TensorError::Magic)));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut bytes = tensor_serialize(&Tensor::scalar(1.0));
        bytes[4] = 9;
        assert!(matches!(
            tensor_deserialize(&bytes),
            Err(TensorError::Version { found: 9, .. })
        ));
    }

    #[test]
    fn truncated_stream_is_rejected() {
        let bytes = tensor_serialize(&Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(
                tensor_deserialize(&bytes[..cut]),
                Err(TensorError::Truncated(_))
            ));
        }
    }

    #[test]
    fn container_round_trips() {
        let mut tensors = BTreeMap::new();
        tensors.insert("a.w".to_string(), Tensor::from_vec(vec![1.0, f64::MIN_POSITIVE]));
        tensors.insert("b".to_string(), Tensor::zeros(&[2, 3]));
        let c = Container {
            digest: [7; 32],
            metadata: "{\"epoch\":3}".into(),
            tensors,
        };
        let mut buf = Vec::new();
        write_container(&mut buf, &c).unwrap();
        assert_eq!(read_container(&mut buf.as_slice()).unwrap(), c);
        buf.truncate(buf.len() - 4);
        assert!(read_container(&mut buf.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_tensors_round_trip(
            dims in proptest::collection::vec(1usize..5, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) ^ 0x3ff0_0000_0000_0000))
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = tensor_deserialize(&tensor_serialize(&t)).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
