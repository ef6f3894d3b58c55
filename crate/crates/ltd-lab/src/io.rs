//! The `.ltdt` tensor file format.
//!
//! Binary, little-endian, no padding, no checksum:
//!
//! ```text
//! magic   4 bytes  "LTDT"
//! version u8       1
//! rank    u8       1..=4
//! reserved u16     0
//! dims    rank x u32
//! payload product(dims) x f32, row-major
//! ```
//!
//! Payloads are stored as f32 for compactness and widened to f64 on
//! load; saving a freshly loaded tensor reproduces the file byte for
//! byte.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: [u8; 4] = *b"LTDT";
pub const VERSION: u8 = 1;

/// Serialize a tensor to the `.ltdt` byte layout.
pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(t.rank() as u8);
    out.extend_from_slice(&0u16.to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn save_tensor(t: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, tensor_to_bytes(t))?;
    Ok(())
}

fn format_err(path: &Path, field: &'static str, reason: String) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        field,
        reason,
    }
}

/// Parse `.ltdt` bytes; `path` is only used in error messages.
pub fn tensor_from_bytes(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < 8 {
        return Err(format_err(
            path,
            "header",
            format!("file too short ({} bytes)", bytes.len()),
        ));
    }
    if bytes[0..4] != MAGIC {
        return Err(format_err(
            path,
            "magic",
            format!("bad magic {:?}", &bytes[0..4]),
        ));
    }
    if bytes[4] != VERSION {
        return Err(format_err(
            path,
            "version",
            format!("unsupported version {}", bytes[4]),
        ));
    }
    let rank = bytes[5] as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(format_err(
            path,
            "rank",
            format!("rank {rank} outside 1..={MAX_RANK}"),
        ));
    }
    let reserved = u16::from_le_bytes([bytes[6], bytes[7]]);
    if reserved != 0 {
        return Err(format_err(
            path,
            "reserved",
            format!("expected 0, got {reserved}"),
        ));
    }
    let dims_end = 8 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(format_err(path, "dims", "truncated dims".into()));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 8 + 4 * i;
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        if d == 0 {
            return Err(format_err(path, "dims", format!("zero extent at axis {i}")));
        }
        dims.push(d);
    }
    let count: usize = dims.iter().product();
    let expect = dims_end + 4 * count;
    if bytes.len() < expect {
        return Err(format_err(
            path,
            "payload",
            format!(
                "truncated payload: dims {dims:?} need {count} values, found {}",
                (bytes.len() - dims_end) / 4
            ),
        ));
    }
    if bytes.len() > expect {
        return Err(format_err(
            path,
            "payload",
            format!("{} trailing bytes after payload", bytes.len() - expect),
        ));
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let off = dims_end + 4 * i;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        if !v.is_finite() {
            return Err(format_err(
                path,
                "payload",
                format!("non-finite value at element {i}"),
            ));
        }
        data.push(v as f64);
    }
    Tensor::from_vec(dims, data)
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    tensor_from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{sample_gaussian, Rng};
    use proptest::prelude::*;

    /// Project every element onto the f32 grid the file stores.
    fn narrow(t: &Tensor) -> Tensor {
        let data = t.data().iter().map(|&v| v as f32 as f64).collect();
        Tensor::from_vec(t.dims().to_vec(), data).unwrap()
    }

    #[test]
    fn round_trip_bit_equality() {
        let t = narrow(&sample_gaussian(&mut Rng::new(5), &[3, 2, 2, 4]).unwrap());
        let bytes = tensor_to_bytes(&t);
        let back = tensor_from_bytes(&bytes, Path::new("mem")).unwrap();
        assert!(back.bit_eq(&t));
        // And the byte image is a fixed point.
        assert_eq!(tensor_to_bytes(&back), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ltdt");
        let t = narrow(&sample_gaussian(&mut Rng::new(6), &[5, 4]).unwrap());
        save_tensor(&t, &path).unwrap();
        assert!(load_tensor(&path).unwrap().bit_eq(&t));
    }

    #[test]
    fn bad_magic_named() {
        let mut bytes = tensor_to_bytes(&Tensor::zeros(vec![2]).unwrap());
        bytes[0..4].copy_from_slice(b"XXXX");
        let err = tensor_from_bytes(&bytes, Path::new("mem")).unwrap_err();
        match err {
            Error::Format { field, reason, .. } => {
                assert_eq!(field, "magic");
                assert!(reason.contains("bad magic"), "{reason}");
            }
            other => panic!("wrong error {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_named() {
        // Header declares (2, 3) but carries only 5 values.
        let full = tensor_to_bytes(
            &Tensor::from_vec(vec![2, 3], (0..6).map(f64::from).collect()).unwrap(),
        );
        let cut = &full[..full.len() - 4];
        let err = tensor_from_bytes(cut, Path::new("mem")).unwrap_err();
        match err {
            Error::Format { field, reason, .. } => {
                assert_eq!(field, "payload");
                assert!(reason.contains("truncated payload"), "{reason}");
            }
            other => panic!("wrong error {other:?}"),
        }
    }

    #[test]
    fn excessive_rank_named() {
        let mut bytes = tensor_to_bytes(&Tensor::zeros(vec![1]).unwrap());
        bytes[5] = 5;
        let err = tensor_from_bytes(&bytes, Path::new("mem")).unwrap_err();
        match err {
            Error::Format { field, .. } => assert_eq!(field, "rank"),
            other => panic!("wrong error {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn round_trip_on_f32_grid(
            dims in proptest::collection::vec(1usize..5, 1..=4),
            seed in 0u64..1000,
        ) {
            let raw = sample_gaussian(&mut Rng::new(seed), &dims).unwrap();
            let t = narrow(&raw);
            let back = tensor_from_bytes(&tensor_to_bytes(&t), Path::new("mem")).unwrap();
            prop_assert!(back.bit_eq(&t));
        }
    }
}
