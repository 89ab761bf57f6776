//! Binary checkpoints: named tensors in name order, binary32 payloads.
//!
//! Layout: `XGPTCKPT`, u32 version (1), u32 tensor count, then per tensor
//! u32 name length, UTF-8 name, u32 rank, rank × u32 extents and the
//! row-major little-endian binary32 values. All integers little-endian.

use std::path::Path;

use crate::binio::{put_f32s, put_str, put_u32, ByteReader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"XGPTCKPT";
pub const VERSION: u32 = 1;

/// Encodes `tensors`, sorted by name. Duplicate names are rejected.
pub fn to_bytes(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut sorted: Vec<&(String, Tensor)> = tensors.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    if let Some(w) = sorted.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Input(format!("duplicate tensor name {:?}", w[0].0)));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, sorted.len() as u32);
    for (name, t) in sorted {
        put_str(&mut out, name);
        put_u32(&mut out, t.rank() as u32);
        for &d in t.shape() {
            put_u32(&mut out, d as u32);
        }
        put_f32s(&mut out, t.data());
    }
    Ok(out)
}

pub fn from_bytes(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = ByteReader::new(buf);
    if buf.is_empty() {
        return Err(Error::format(0, "empty checkpoint"));
    }
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::format(0, "bad checkpoint magic"));
    }
    let at = r.offset();
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(at, format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut out: Vec<(String, Tensor)> = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = r.offset();
        let name = r.string("tensor name")?;
        if let Some((prev, _)) = out.last() {
            if *prev >= name {
                return Err(Error::format(at, format!("tensor {name:?} out of name order")));
            }
        }
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let at = r.offset();
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::format(at, "tensor size overflows"))?;
        let data = r.f32s(numel, "tensor payload")?;
        let t = Tensor::new(shape, data).map_err(|e| Error::format(at, e.to_string()))?;
        out.push((name, t));
    }
    if !r.at_end() {
        return Err(Error::format(r.offset(), "trailing bytes after last tensor"));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let bytes = to_bytes(tensors)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Element-wise mean in f64 of checkpoints with identical names and shapes.
pub fn average(checkpoints: &[Vec<(String, Tensor)>]) -> Result<Vec<(String, Tensor)>> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::Input("nothing to average".into()))?;
    let mut acc: Vec<(String, Vec<f64>, Vec<usize>)> = first
        .iter()
        .map(|(n, t)| (n.clone(), vec![0.0; t.numel()], t.shape().to_vec()))
        .collect();
    for (k, ckpt) in checkpoints.iter().enumerate() {
        if ckpt.len() != acc.len() {
            return Err(Error::format(0, format!("checkpoint {k} has {} tensors, expected {}", ckpt.len(), acc.len())));
        }
        for ((name, sum, shape), (n, t)) in acc.iter_mut().zip(ckpt) {
            if n != name || t.shape() != shape.as_slice() {
                return Err(Error::format(
                    0,
                    format!("checkpoint {k} tensor {n:?} {:?} does not match {name:?} {shape:?}", t.shape()),
                ));
            }
            for (s, v) in sum.iter_mut().zip(t.data()) {
                *s += v;
            }
        }
    }
    let n = checkpoints.len() as f64;
    acc.into_iter()
        .map(|(name, sum, shape)| Ok((name, Tensor::new(shape, sum.into_iter().map(|s| s / n).collect())?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("b".into(), Tensor::new(vec![2, 3], vec![1.0, -2.5, 0.125, 3.0, 4.0, 5.0]).unwrap()),
            ("a".into(), Tensor::new(vec![1], vec![0.1]).unwrap()),
        ]
    }

    #[test]
    fn layout_is_exact() {
        let b = to_bytes(&[("w".into(), Tensor::new(vec![1], vec![1.0]).unwrap())]).unwrap();
        let mut expect = b"XGPTCKPT".to_vec();
        expect.extend([1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, b'w', 1, 0, 0, 0, 1, 0, 0, 0]);
        expect.extend(1.0f32.to_le_bytes());
        assert_eq!(b, expect);
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let b = to_bytes(&sample()).unwrap();
        let back = from_bytes(&b).unwrap();
        assert_eq!(back[0].0, "a");
        assert_eq!(back[0].1.data()[0], 0.1f32 as f64);
        assert_eq!(to_bytes(&back).unwrap(), b);
    }

    #[test]
    fn corrupt_files_report_offsets() {
        let mut b = to_bytes(&sample()).unwrap();
        assert!(matches!(from_bytes(&[]), Err(Error::Format { offset: 0, .. })));
        let e = from_bytes(&b[..b.len() - 2]).unwrap_err();
        assert!(matches!(e, Error::Format { .. }));
        b[0] = b'Y';
        assert!(matches!(from_bytes(&b), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn averaging() {
        let x = vec![("w".to_string(), Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap())];
        let zero = vec![("w".to_string(), Tensor::zeros(&[3]))];
        let two = vec![("w".to_string(), x[0].1.map(|v| 2.0 * v))];
        assert_eq!(average(&[zero, two]).unwrap(), x);
        let bad = vec![("v".to_string(), Tensor::zeros(&[3]))];
        assert!(matches!(average(&[x.clone(), bad]), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn identical_checkpoints_average_to_themselves(vals in proptest::collection::vec(-1e3f32..1e3, 1..20), k in 1usize..6) {
            let t = Tensor::new(vec![vals.len()], vals.iter().map(|&v| v as f64).collect()).unwrap();
            let ck = vec![("p".to_string(), t)];
            let avg = average(&vec![ck.clone(); k]).unwrap();
            prop_assert_eq!(to_bytes(&avg).unwrap(), to_bytes(&ck).unwrap());
        }
    }
}
